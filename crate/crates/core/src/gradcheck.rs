//! Central finite-difference verification of tape gradients.
//!
//! The relative error of one entry is `|analytic − numeric| / max(|analytic|,
//! |numeric|, 1e-5)`. Probes whose ±h interval crosses a relu/abs/clamp kink
//! (detected through [`Tape::kink_signature`]) are skipped: the difference
//! quotient is not a derivative there.

use rand::Rng;

use crate::autodiff::{Conv3dSpec, Tape, Tensor, Var};
use crate::config::{ModelSettings, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Bound, ParamId, ParamStore};
use crate::rng::{stream, StreamRng};
use crate::trainer::{total_loss, StepBatch};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DENOMINATOR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many entries per input (evenly strided); `None`
    /// checks every entry.
    pub max_entries_per_input: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: DEFAULT_STEP,
            max_entries_per_input: None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

impl GradCheck {
    /// Compares backward gradients of the scalar built by `build` against
    /// central differences, perturbing every entry of every input.
    pub fn run<F>(&self, name: &str, inputs: &[Tensor], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor]| -> Result<(f64, Vec<i8>)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars)?;
            let v = tape
                .value(loss)
                .item()
                .ok_or_else(|| Error::Contract(format!("gradcheck '{name}' built a non-scalar output")))?;
            Ok((v, tape.kink_signature()))
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let base_sig = tape.kink_signature();
        drop(tape);

        let mut report = GradCheckReport {
            name: name.to_string(),
            max_rel_error: 0.0,
            checked: 0,
            skipped_kinks: 0,
        };
        let mut probe = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], input.len());
            let stride = match self.max_entries_per_input {
                Some(cap) if cap > 0 && input.len() > cap => input.len().div_ceil(cap),
                _ => 1,
            };
            for j in (0..input.len()).step_by(stride) {
                let x0 = input.data()[j];
                probe[i].data_mut()[j] = x0 + self.step;
                let (fp, sp) = eval(&probe)?;
                probe[i].data_mut()[j] = x0 - self.step;
                let (fm, sm) = eval(&probe)?;
                probe[i].data_mut()[j] = x0;
                if sp != base_sig || sm != base_sig {
                    report.skipped_kinks += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * self.step);
                let err = relative_error(analytic[j], numeric);
                if !(err <= report.max_rel_error) {
                    report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                }
                report.checked += 1;
            }
        }
        Ok(report)
    }
}

impl GradCheck {
    /// Like [`GradCheck::run`], but perturbs the trainable entries of a
    /// parameter store that `build` reads through its binding.
    pub fn run_params<F>(&self, name: &str, store: &ParamStore, build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &Bound) -> Result<Var>,
    {
        let eval = |store: &ParamStore| -> Result<(f64, Vec<i8>)> {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let loss = build(&mut tape, &bound)?;
            let v = tape
                .value(loss)
                .item()
                .ok_or_else(|| Error::Contract(format!("gradcheck '{name}' built a non-scalar output")))?;
            Ok((v, tape.kink_signature()))
        };

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = build(&mut tape, &bound)?;
        let grads = tape.backward(loss)?;
        let base_sig = tape.kink_signature();
        drop(tape);

        let mut report = GradCheckReport {
            name: name.to_string(),
            max_rel_error: 0.0,
            checked: 0,
            skipped_kinks: 0,
        };
        let mut probe = store.clone();
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let len = store.get(id).len();
            let analytic = grads.get_or_zeros(bound.var(id), len);
            let stride = match self.max_entries_per_input {
                Some(cap) if cap > 0 && len > cap => len.div_ceil(cap),
                _ => 1,
            };
            for j in (0..len).step_by(stride) {
                let x0 = store.get(id).data()[j];
                probe.get_mut(id).data_mut()[j] = x0 + self.step;
                let (fp, sp) = eval(&probe)?;
                probe.get_mut(id).data_mut()[j] = x0 - self.step;
                let (fm, sm) = eval(&probe)?;
                probe.get_mut(id).data_mut()[j] = x0;
                if sp != base_sig || sm != base_sig {
                    report.skipped_kinks += 1;
                    continue;
                }
                let err = relative_error(analytic[j], (fp - fm) / (2.0 * self.step));
                if !(err <= report.max_rel_error) {
                    report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                }
                report.checked += 1;
            }
        }
        Ok(report)
    }
}

fn random(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// `Σ w ⊙ y` with fixed random weights, so every output entry matters.
fn weighted_sum(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = stream(rng_seed, "gradcheck/weights");
    let w = random(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpBuild = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Every differentiable tape op, each wrapped into a scalar with random
/// weights and evaluated at random inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = stream(seed, "gradcheck/inputs");
    let mut r = |shape: &[usize], lo: f64, hi: f64| random(&mut rng, shape, lo, hi);
    let ce_labels = Tensor::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.0, 0.0, 1.0]])?;
    let cases: Vec<(&str, Vec<Tensor>, OpBuild)> = vec![
        ("matmul", vec![r(&[3, 4], -1.0, 1.0), r(&[4, 2], -1.0, 1.0)], |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("add", vec![r(&[3, 4], -1.0, 1.0), r(&[4], -1.0, 1.0)], |t, v| {
            t.add(v[0], v[1])
        }),
        ("sub", vec![r(&[3, 4], -1.0, 1.0), r(&[3, 1], -1.0, 1.0)], |t, v| {
            t.sub(v[0], v[1])
        }),
        ("mul", vec![r(&[3, 4], -1.0, 1.0), r(&[1], -1.0, 1.0)], |t, v| {
            t.mul(v[0], v[1])
        }),
        ("div", vec![r(&[3, 4], -1.0, 1.0), r(&[3, 4], 0.5, 2.0)], |t, v| {
            t.div(v[0], v[1])
        }),
        ("neg", vec![r(&[5], -1.0, 1.0)], |t, v| Ok(t.neg(v[0]))),
        ("exp", vec![r(&[5], -2.0, 2.0)], |t, v| Ok(t.exp(v[0]))),
        ("log", vec![r(&[5], 0.2, 3.0)], |t, v| t.log(v[0])),
        ("sigmoid", vec![r(&[5], -4.0, 4.0)], |t, v| Ok(t.sigmoid(v[0]))),
        ("softplus", vec![r(&[5], -4.0, 4.0)], |t, v| Ok(t.softplus(v[0]))),
        ("relu", vec![r(&[8], -1.0, 1.0)], |t, v| Ok(t.relu(v[0]))),
        ("abs", vec![r(&[8], -1.0, 1.0)], |t, v| Ok(t.abs(v[0]))),
        ("powf", vec![r(&[5], 0.2, 2.0)], |t, v| t.powf(v[0], 1.7)),
        ("add_scalar", vec![r(&[5], -1.0, 1.0)], |t, v| {
            Ok(t.add_scalar(v[0], 0.3))
        }),
        ("mul_scalar", vec![r(&[5], -1.0, 1.0)], |t, v| {
            Ok(t.mul_scalar(v[0], -2.5))
        }),
        ("clamp_min", vec![r(&[8], -1.0, 1.0)], |t, v| Ok(t.clamp_min(v[0], 0.1))),
        ("sum", vec![r(&[2, 3], -1.0, 1.0)], |t, v| {
            let e = t.exp(v[0]);
            let s = t.sum(e);
            t.mul(s, s)
        }),
        ("mean", vec![r(&[2, 3], -1.0, 1.0)], |t, v| {
            let e = t.exp(v[0]);
            let m = t.mean(e);
            t.mul(m, m)
        }),
        ("sum_axis", vec![r(&[2, 3, 4], -1.0, 1.0)], |t, v| {
            t.sum_axis(v[0], 1, false)
        }),
        ("mean_axis", vec![r(&[2, 3, 4], -1.0, 1.0)], |t, v| {
            t.mean_axis(v[0], 2, true)
        }),
        ("norm_axis", vec![r(&[3, 4], -1.0, 1.0)], |t, v| {
            t.norm_axis(v[0], 1, false)
        }),
        ("cumprod", vec![r(&[2, 5], 0.2, 1.5)], |t, v| t.cumprod(v[0], 1, true)),
        ("concat", vec![r(&[2, 3], -1.0, 1.0), r(&[2, 2], -1.0, 1.0)], |t, v| {
            let e = t.exp(v[1]);
            t.concat(&[v[0], e], 1)
        }),
        ("narrow", vec![r(&[3, 5], -1.0, 1.0)], |t, v| {
            let n = t.narrow(v[0], 1, 1, 3)?;
            Ok(t.exp(n))
        }),
        ("reshape", vec![r(&[2, 6], -1.0, 1.0)], |t, v| {
            let s = t.reshape(v[0], &[3, 4])?;
            Ok(t.exp(s))
        }),
        ("permute", vec![r(&[2, 3, 4], -1.0, 1.0)], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            Ok(t.exp(p))
        }),
        ("index_rows", vec![r(&[4, 3], -1.0, 1.0)], |t, v| {
            let g = t.index_rows(v[0], &[2, 0, 2, 3])?;
            Ok(t.exp(g))
        }),
        (
            "conv3d",
            vec![r(&[2, 2, 3, 4, 4], -1.0, 1.0), r(&[3, 2, 3, 3, 3], -1.0, 1.0)],
            |t, v| t.conv3d(v[0], v[1], Conv3dSpec::same([3, 3, 3])),
        ),
        (
            "batch_norm_train",
            vec![r(&[3, 2, 2, 2], -1.0, 1.0), r(&[2], 0.5, 1.5), r(&[2], -0.5, 0.5)],
            |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
        ),
        (
            "batch_norm_eval",
            vec![r(&[3, 2, 2, 2], -1.0, 1.0), r(&[2], 0.5, 1.5), r(&[2], -0.5, 0.5)],
            |t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.8, 1.3], 1e-5),
        ),
    ];

    let check = GradCheck::default();
    let mut reports = Vec::with_capacity(cases.len() + 1);
    for (i, (name, inputs, op)) in cases.into_iter().enumerate() {
        let seed_w = seed.wrapping_add(i as u64);
        reports.push(check.run(name, &inputs, |t, v| {
            let y = op(t, v)?;
            weighted_sum(t, y, seed_w)
        })?);
    }
    let logits = r(&[2, 3], -2.0, 2.0);
    reports.push(check.run("softmax_cross_entropy", &[logits], |t, v| {
        t.softmax_cross_entropy(v[0], &ce_labels)
    })?);
    Ok(reports)
}

/// The tiny model the composed objective is checked on.
pub fn tiny_model_settings() -> ModelSettings {
    ModelSettings {
        abundance_dim: Some(4),
        width_multiplier: 2,
        patch: 5,
        block_channels: vec![2, 3, 2, 2, 3],
        dropout: 0.5,
        ..ModelSettings::default()
    }
}

/// Gradient of the full objective `L2 + α·LH − λ·I + LS` with respect to
/// every trainable parameter of a tiny model (8 bands, 4 abundances,
/// 3 classes, 5×5 patches). Negative shuffles and dropout masks are
/// re-drawn from the same seeds at every evaluation.
pub fn composite_check(seed: u64, max_entries_per_param: Option<usize>) -> Result<GradCheckReport> {
    let (bands, classes, patch) = (8, 3, 5);
    let model = Model::new(&tiny_model_settings(), bands, classes, seed)?;
    let mut rng = stream(seed, "gradcheck/batch");
    let batch = StepBatch {
        source: random(&mut rng, &[6, bands], 0.0, 1.0),
        target: random(&mut rng, &[6, bands], 0.0, 1.0),
        patches: random(&mut rng, &[2 * patch * patch, bands], 0.0, 1.0),
        labels: vec![1, 3],
    };
    let cfg = TrainConfig::default();
    let check = GradCheck {
        max_entries_per_input: max_entries_per_param,
        ..GradCheck::default()
    };
    check.run_params("total_loss", &model.store, |tape, bound| {
        let mut shuffle = stream(seed, "gradcheck/shuffle");
        let mut dropout = stream(seed, "gradcheck/dropout");
        Ok(total_loss(&model, tape, bound, &batch, &cfg, &mut shuffle, &mut dropout)?.total)
    })
}

/// Per-op reports followed by the composed objective.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = op_suite(seed)?;
    reports.push(composite_check(seed, None)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for r in op_suite(3).unwrap() {
            assert!(r.passes(1e-6), "{r:?}");
        }
    }

    #[test]
    fn composite_sampled_passes() {
        let r = composite_check(0, Some(4)).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
