mod common;

use common::{mi_training, random_simplex, random_tensor, rng};
use pctl::autodiff::{Tape, Tensor};
use pctl::discriminator::{derangement, js_from_scores, MiDiscriminator};
use pctl::encoder::SimplexBatch;
use pctl::gradcheck::GradCheck;
use pctl::nn::ParamStore;
use pctl::rng::stream;
use rand::Rng;

#[test]
fn bound_is_never_positive() {
    let mut r = rng(0);
    for trial in 0..1000 {
        let n = r.random_range(2..12);
        let scale = [0.1, 1.0, 30.0][trial % 3];
        let mut tape = Tape::new();
        let pos = tape.constant(random_tensor(&mut r, &[n, 1], -scale, scale));
        let neg = tape.constant(random_tensor(&mut r, &[n, 1], -scale, scale));
        let j = js_from_scores(&mut tape, pos, neg).unwrap();
        let v = tape.value(j).data()[0];
        assert!(v <= 0.0 && v.is_finite(), "trial {trial}: {v}");
    }
}

#[test]
fn bound_through_the_network_is_never_positive() {
    let mut r = rng(1);
    for seed in 0..50 {
        let mut store = ParamStore::new();
        let disc = MiDiscriminator::new(&mut store, 8, 3, 13, seed).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(random_tensor(&mut r, &[20, 8], -5.0, 5.0));
        let av = tape.constant(random_simplex(&mut r, 20, 3));
        let a = SimplexBatch::checked(&tape, av, 1e-9).unwrap();
        let xs = tape.constant(random_tensor(&mut r, &[20, 8], -5.0, 5.0));
        let j = disc.js_mi_objective(&mut tape, &bound, x, a, xs).unwrap();
        assert!(tape.value(j).data()[0] <= 0.0);
    }
}

#[test]
fn zero_network_gives_minus_two_log_two() {
    let mut store = ParamStore::new();
    let disc = MiDiscriminator::new(&mut store, 5, 3, 13, 0).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let mut r = rng(2);
    let x = tape.constant(random_tensor(&mut r, &[7, 5], 0.0, 1.0));
    let av = tape.constant(random_simplex(&mut r, 7, 3));
    let a = SimplexBatch::checked(&tape, av, 1e-9).unwrap();
    let mut shuffle = stream(0, "shuffle");
    let j = disc.mi_loss(&mut tape, &bound, x, a, x, a, &mut shuffle).unwrap();
    // Two domains, each contributing −2·log 2.
    assert!((tape.value(j).data()[0] + 4.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn derangements_move_every_row_uniformly() {
    let n = 5;
    let trials = 20_000;
    let mut rng = stream(3, "shuffle");
    let mut counts = vec![vec![0usize; n]; n];
    let mut with_fixed_points = 0;
    for _ in 0..trials {
        let p = derangement(n, &mut rng).unwrap();
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        if p.iter().enumerate().any(|(i, &j)| i == j) {
            with_fixed_points += 1;
        }
        for (i, &j) in p.iter().enumerate() {
            counts[i][j] += 1;
        }
    }
    // Sixteen retries leave a fixed point with probability (1 − 44/120)^16 ≈ 7e-4.
    assert!(with_fixed_points < 60, "{with_fixed_points}");
    let expected = trials as f64 / (n - 1) as f64;
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if i != j {
                assert!((c as f64 - expected).abs() < 0.06 * expected, "{i}->{j}: {c}");
            }
        }
    }
}

#[test]
fn shuffling_needs_two_rows() {
    let mut rng = stream(0, "shuffle");
    assert!(derangement(1, &mut rng).is_err());
    assert!(derangement(0, &mut rng).is_err());
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let disc = MiDiscriminator::new(&mut store, 6, 3, 5, 4).unwrap();
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[6, 6], 0.0, 1.0);
    let xs = random_tensor(&mut r, &[6, 6], 0.0, 1.0);
    let a = random_simplex(&mut r, 6, 3);
    let report = GradCheck::default()
        .run_params("discriminator", &store, |tape, bound| {
            let xv = tape.constant(x.clone());
            let xsv = tape.constant(xs.clone());
            let av = tape.constant(a.clone());
            let a = SimplexBatch::checked(tape, av, 1e-9)?;
            disc.js_mi_objective(tape, bound, xv, a, xsv)
        })
        .unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn training_raises_the_bound_on_dependent_pairs() {
    let j = mi_training(300, 0);
    assert!(j > -2.0 * 2f64.ln() + 0.5, "bound {j}");
}

#[test]
fn scores_reject_mismatched_batches() {
    let mut store = ParamStore::new();
    let disc = MiDiscriminator::new(&mut store, 4, 3, 13, 0).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[5, 4]));
    let av = tape.constant(Tensor::full(&[4, 3], 1.0 / 3.0));
    let a = SimplexBatch::checked(&tape, av, 1e-9).unwrap();
    assert!(disc.score(&mut tape, &bound, x, a).is_err());
}
