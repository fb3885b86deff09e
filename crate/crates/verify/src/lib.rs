//! Holds the `acceptance` integration test; there is no library code.
