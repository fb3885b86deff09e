//! Shared sparse Dirichlet encoder.
//!
//! A dense stack maps each pixel spectrum to `c − 1` stick logits. The sticks
//! pass through a Kumaraswamy-style power transform and are broken off a unit
//! stick; the last piece is the remaining length, so every abundance row lies
//! exactly on the simplex.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{forward_stack, Activation, Bound, DenseLayer, ParamId, ParamStore};

/// Number of hidden dense layers before the stick head.
pub const ENCODER_DEPTH: usize = 6;
/// Keeps `0·log 0` at zero inside the entropy.
pub const ENTROPY_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BetaMode {
    Fixed(f64),
    /// Softplus-parameterized, initialized to 1.
    Learnable {
        per_stick: bool,
    },
}

/// Which stick transform to apply to `u ∈ (0,1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KumaraswamyForm {
    /// `v = u^{1/β}`.
    Power,
    /// Inverse CDF of Kumaraswamy(1, β): `v = 1 − (1 − u)^{1/β}`.
    InverseCdf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub bands: usize,
    pub abundance_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub beta: BetaMode,
    pub form: KumaraswamyForm,
}

/// Geometric interpolation from `bands` down to `multiplier · c` over
/// [`ENCODER_DEPTH`] layers.
pub fn default_hidden_widths(bands: usize, abundance_dim: usize, multiplier: usize) -> Vec<usize> {
    let start = bands.max(1) as f64;
    let end = (multiplier * abundance_dim).max(1) as f64;
    (0..ENCODER_DEPTH)
        .map(|i| {
            let t = i as f64 / (ENCODER_DEPTH - 1) as f64;
            (start * (end / start).powf(t)).round().max(1.0) as usize
        })
        .collect()
}

impl EncoderConfig {
    pub fn new(bands: usize, abundance_dim: usize) -> Self {
        EncoderConfig {
            bands,
            abundance_dim,
            hidden_widths: default_hidden_widths(bands, abundance_dim, 3),
            beta: BetaMode::Learnable { per_stick: true },
            form: KumaraswamyForm::Power,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.abundance_dim < 2 {
            return Err(Error::Config(format!("abundance dim {} < 2", self.abundance_dim)));
        }
        if self.bands < 1 {
            return Err(Error::Config("encoder needs at least one band".into()));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config(format!("bad encoder widths {:?}", self.hidden_widths)));
        }
        if let BetaMode::Fixed(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("fixed beta {b} must be positive")));
            }
        }
        Ok(())
    }
}

/// Abundance rows on the probability simplex, recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimplexBatch {
    var: Var,
}

impl SimplexBatch {
    /// Wraps `var` after checking entries lie in `[0,1]` and rows sum to 1
    /// within `tol`.
    pub fn checked(tape: &Tape, var: Var, tol: f64) -> Result<Self> {
        let t = tape.value(var);
        if t.ndim() != 2 {
            return Err(Error::shape("SimplexBatch", t.shape(), &[]));
        }
        for r in 0..t.shape()[0] {
            let row = t.row(r);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > tol {
                return Err(Error::Contract(format!("row {r} is not on the simplex (sum {sum})")));
            }
        }
        Ok(SimplexBatch { var })
    }

    pub fn var(self) -> Var {
        self.var
    }

    pub fn values(self, tape: &Tape) -> &Tensor {
        tape.value(self.var)
    }
}

/// Breaks sticks `v [batch×(c−1)]`, every entry strictly inside (0,1), into
/// `c` pieces; the last piece is the remaining stick.
pub fn stick_breaking(tape: &mut Tape, v: Var) -> Result<SimplexBatch> {
    if let Some(bad) = tape.value(v).data().iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::domain("stick_breaking", format!("stick {bad} outside (0,1)")));
    }
    stick_breaking_closed(tape, v)
}

/// Same construction, accepting saturated sticks at exactly 0 or 1.
fn stick_breaking_closed(tape: &mut Tape, v: Var) -> Result<SimplexBatch> {
    let s = tape.shape(v);
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::shape("stick_breaking", s, &[]));
    }
    let sticks = s[1];
    let neg = tape.neg(v);
    let remain = tape.add_scalar(neg, 1.0);
    let before = tape.cumprod(remain, 1, true)?;
    let pieces = tape.mul(v, before)?;
    let all = tape.cumprod(remain, 1, false)?;
    let last = tape.narrow(all, 1, sticks - 1, 1)?;
    let a = tape.concat(&[pieces, last], 1)?;
    Ok(SimplexBatch { var: a })
}

fn power_from_log(tape: &mut Tape, log_u: Var, beta: Var) -> Result<Var> {
    let scaled = tape.div(log_u, beta)?;
    Ok(tape.exp(scaled))
}

fn apply_form(tape: &mut Tape, log_u: Var, log_1mu: Var, beta: Var, form: KumaraswamyForm) -> Result<Var> {
    match form {
        KumaraswamyForm::Power => power_from_log(tape, log_u, beta),
        KumaraswamyForm::InverseCdf => {
            let p = power_from_log(tape, log_1mu, beta)?;
            let n = tape.neg(p);
            Ok(tape.add_scalar(n, 1.0))
        }
    }
}

/// Stick transform of `u ∈ (0,1)` with positive `beta` (scalar or one entry
/// per stick column).
pub fn kumaraswamy_transform(tape: &mut Tape, u: Var, beta: Var, form: KumaraswamyForm) -> Result<Var> {
    if let Some(bad) = tape.value(u).data().iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::domain(
            "kumaraswamy_transform",
            format!("u = {bad} outside (0,1)"),
        ));
    }
    if let Some(bad) = tape.value(beta).data().iter().find(|&&b| !(b > 0.0)) {
        return Err(Error::domain(
            "kumaraswamy_transform",
            format!("beta = {bad} not positive"),
        ));
    }
    let log_u = tape.log(u)?;
    let n = tape.neg(u);
    let one_minus = tape.add_scalar(n, 1.0);
    let log_1mu = tape.log(one_minus)?;
    apply_form(tape, log_u, log_1mu, beta, form)
}

/// The transform driven directly by logits `z` with `u = sigmoid(z)`;
/// `log u = −sp(−z)` and `log(1−u) = −sp(z)` stay finite when `u` saturates.
fn kumaraswamy_from_logits(tape: &mut Tape, z: Var, beta: Var, form: KumaraswamyForm) -> Result<Var> {
    let nz = tape.neg(z);
    let sp_neg = tape.softplus(nz);
    let log_u = tape.neg(sp_neg);
    let sp_pos = tape.softplus(z);
    let log_1mu = tape.neg(sp_pos);
    apply_form(tape, log_u, log_1mu, beta, form)
}

/// `softplus⁻¹(1)`, the raw value giving β = 1.
pub fn beta_raw_init() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

#[derive(Clone, Debug)]
pub struct DirichletEncoder {
    pub config: EncoderConfig,
    pub layers: Vec<DenseLayer>,
    pub head: DenseLayer,
    pub beta_raw: Option<ParamId>,
}

impl DirichletEncoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.hidden_widths.len());
        let mut width = config.bands;
        for (i, &w) in config.hidden_widths.iter().enumerate() {
            layers.push(DenseLayer::new(
                store,
                &format!("encoder.{i}"),
                width,
                w,
                Activation::Relu,
                seed,
            )?);
            width = w;
        }
        let sticks = config.abundance_dim - 1;
        // The sigmoid is applied inside the stick transform via log-sigmoid.
        let head = DenseLayer::new(store, "encoder.head", width, sticks, Activation::None, seed)?;
        let beta_raw = match config.beta {
            BetaMode::Fixed(_) => None,
            BetaMode::Learnable { per_stick } => {
                let n = if per_stick { sticks } else { 1 };
                Some(store.add("encoder.beta_raw", Tensor::full(&[n], beta_raw_init()), true)?)
            }
        };
        Ok(DirichletEncoder {
            config,
            layers,
            head,
            beta_raw,
        })
    }

    /// Every parameter the encoder reads.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .layers
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|l| [l.weight, l.bias])
            .collect();
        ids.extend(self.beta_raw);
        ids
    }

    fn beta_var(&self, tape: &mut Tape, bound: &Bound) -> Var {
        match (self.config.beta, self.beta_raw) {
            (_, Some(raw)) => tape.softplus(bound.var(raw)),
            (BetaMode::Fixed(b), None) => tape.constant(Tensor::scalar(b)),
            (BetaMode::Learnable { .. }, None) => unreachable!("learnable beta is always registered"),
        }
    }

    /// Current β values.
    pub fn beta(&self, store: &ParamStore) -> Vec<f64> {
        match (self.config.beta, self.beta_raw) {
            (_, Some(raw)) => store
                .get(raw)
                .data()
                .iter()
                .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
                .collect(),
            (BetaMode::Fixed(b), None) => vec![b],
            _ => unreachable!(),
        }
    }

    /// Stick logits for `x [batch×L]`.
    pub fn stick_logits(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.config.bands {
            return Err(Error::shape("encode", s, &[self.config.bands]));
        }
        let h = forward_stack(&self.layers, tape, bound, x)?;
        self.head.forward(tape, bound, h)
    }

    /// Projects pixels onto the abundance simplex. The same parameters serve
    /// both domains.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<SimplexBatch> {
        let z = self.stick_logits(tape, bound, x)?;
        let beta = self.beta_var(tape, bound);
        let v = kumaraswamy_from_logits(tape, z, beta, self.config.form)?;
        stick_breaking_closed(tape, v)
    }
}

/// Batch mean of the normalized entropy `−Σ q log q`, `q = |a|^p / ‖a‖_p^p`.
pub fn normalized_entropy(tape: &mut Tape, a: SimplexBatch, p: f64) -> Result<Var> {
    if !(p > 0.0) {
        return Err(Error::Config(format!("entropy order p = {p} must be positive")));
    }
    let abs = tape.abs(a.var);
    let powered = if p == 1.0 { abs } else { tape.powf(abs, p)? };
    let norm = tape.sum_axis(powered, 1, true)?;
    let q = tape.div(powered, norm)?;
    let clamped = tape.clamp_min(q, ENTROPY_EPS);
    let logq = tape.log(clamped)?;
    let plogp = tape.mul(q, logq)?;
    let row = tape.sum_axis(plogp, 1, false)?;
    let mean = tape.mean(row);
    Ok(tape.neg(mean))
}

/// `H_1(a_S) + H_1(a_T)`.
pub fn sparse_loss(tape: &mut Tape, a_source: SimplexBatch, a_target: SimplexBatch) -> Result<Var> {
    let hs = normalized_entropy(tape, a_source, 1.0)?;
    let ht = normalized_entropy(tape, a_target, 1.0)?;
    tape.add(hs, ht)
}
