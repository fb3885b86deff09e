//! Joint optimization of reconstruction and classification, and inference.
//!
//! Each step draws an equal-size pixel batch from both scenes for the
//! reconstruction, sparsity and mutual-information terms, plus a batch of
//! labeled source patches for the classifier, and minimizes
//! `L2 + α·LH − λ·I + LS` with Adam. Target labels are never read during
//! optimization; they only feed the optional accuracy columns of the log.

use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{BatchStats, Tape, Tensor, Var};
use crate::classifier::{abundance_volumes, argmax_labels, classification_loss, extract_patches, gather_patches};
use crate::config::{AblationFlags, ModelSettings, TrainConfig};
use crate::data::{split_labels, HsiCube, SplitMasks};
use crate::decoder::{pixel_l2, Domain};
use crate::encoder::sparse_loss;
use crate::error::{Error, Result};
use crate::metrics::{confusion, oa_aa_kappa, Accuracy};
use crate::model::{Model, ModelState};
use crate::nn::{Bound, Mode};
use crate::rng::{stream, StreamRng};

/// Rows per chunk when encoding or classifying a whole cube.
const INFER_CHUNK: usize = 256;

/// Inputs of one optimization step.
#[derive(Clone, Debug)]
pub struct StepBatch {
    /// `[n×L]` source pixels.
    pub source: Tensor,
    /// `[n×L]` target pixels.
    pub target: Tensor,
    /// `[m·P·P × L]` source patch pixels.
    pub patches: Tensor,
    /// Center labels of the `m` patches.
    pub labels: Vec<u16>,
}

/// Tape handles of each objective term.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub l2: Var,
    pub lh: Var,
    /// The mutual-information bound (maximized, so it enters with −λ).
    pub mi: Var,
    pub ls: Var,
    pub total: Var,
    pub stats: Vec<BatchStats>,
}

/// Scalar values of one step's terms as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub l2: f64,
    pub lh: f64,
    /// `−λ·I`.
    pub li: f64,
    pub ls: f64,
    pub total: f64,
}

/// `L2 + α·LH − λ·I + LS` on one batch. Terms removed by `flags` are zero.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    batch: &StepBatch,
    cfg: &TrainConfig,
    shuffle_rng: &mut StreamRng,
    dropout_rng: &mut StreamRng,
) -> Result<LossTerms> {
    let flags = cfg.flags;
    let zero = tape.constant(Tensor::scalar(0.0));
    let (mut l2, mut lh, mut mi) = (zero, zero, zero);
    if !flags.classifier_only {
        let xs = tape.constant(batch.source.clone());
        let xt = tape.constant(batch.target.clone());
        let a_s = model.encoder.encode(tape, bound, xs)?;
        let a_t = model.encoder.encode(tape, bound, xt)?;
        let target_branch = if flags.shared_decoder {
            Domain::Source
        } else {
            Domain::Target
        };
        let xs_hat = model.decoder.decode(tape, bound, a_s, Domain::Source)?;
        let xt_hat = model.decoder.decode(tape, bound, a_t, target_branch)?;
        let rs = pixel_l2(tape, xs_hat, xs)?;
        let rt = pixel_l2(tape, xt_hat, xt)?;
        l2 = tape.add(rs, rt)?;
        if !flags.no_sparse {
            lh = sparse_loss(tape, a_s, a_t)?;
        }
        if !flags.no_mi {
            mi = model
                .discriminator
                .mi_loss(tape, bound, xs, a_s, xt, a_t, shuffle_rng)?;
        }
    }
    let px = tape.constant(batch.patches.clone());
    let a_p = model.encoder.encode(tape, bound, px)?;
    let volumes = abundance_volumes(tape, a_p, model.classifier.config.patch)?;
    let out = model
        .classifier
        .classify(tape, bound, &model.store, volumes, Mode::Train, dropout_rng)?;
    let ls = classification_loss(tape, out.logits, &batch.labels)?;
    let weighted_h = tape.mul_scalar(lh, cfg.alpha);
    let weighted_i = tape.mul_scalar(mi, -cfg.lambda);
    let mut total = tape.add(l2, weighted_h)?;
    total = tape.add(total, weighted_i)?;
    total = tape.add(total, ls)?;
    Ok(LossTerms {
        l2,
        lh,
        mi,
        ls,
        total,
        stats: out.stats,
    })
}

impl LossTerms {
    /// Reads the values, naming the first non-finite term.
    pub fn values(&self, tape: &Tape, lambda: f64, step: usize) -> Result<LossValues> {
        let get = |v: Var, name: &'static str| -> Result<f64> {
            let x = tape.value(v).data()[0];
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::Divergence { component: name, step })
            }
        };
        let l2 = get(self.l2, "L2")?;
        let lh = get(self.lh, "LH")?;
        let li = -lambda * get(self.mi, "LI")?;
        let ls = get(self.ls, "LS")?;
        let total = get(self.total, "total")?;
        Ok(LossValues { l2, lh, li, ls, total })
    }
}

/// One row of the per-epoch log. Accuracies are NaN when not evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub losses: LossValues,
    pub source_oa: f64,
    pub target_oa: f64,
}

pub const METRICS_HEADER: &str = "epoch,L2,LH,LI,LS,total,source_oa,target_oa";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, l.l2, l.lh, l.li, l.ls, l.total, self.source_oa, self.target_oa
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub split: SplitMasks,
    /// Source accuracy on the evaluation mask after the final epoch.
    pub source: Option<Accuracy>,
    /// Target accuracy on every labeled target pixel after the final epoch.
    pub target: Option<Accuracy>,
}

fn centers(cube: &HsiCube, indices: &[usize]) -> Vec<(usize, usize)> {
    indices.iter().map(|&i| (i / cube.width, i % cube.width)).collect()
}

/// `n` pixel rows drawn uniformly with replacement.
pub fn sample_rows(cube: &HsiCube, n: usize, rng: &mut StreamRng) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * cube.bands);
    for _ in 0..n {
        let p = rng.random_range(0..cube.pixels());
        data.extend_from_slice(&cube.data[p * cube.bands..(p + 1) * cube.bands]);
    }
    Tensor::new(vec![n, cube.bands], data)
}

fn check_inputs(model: &Model, source: &HsiCube, target: &HsiCube) -> Result<()> {
    model.check_bands(source.bands)?;
    model.check_bands(target.bands)?;
    if source.labels.is_none() {
        return Err(Error::Contract("source cube needs labels".into()));
    }
    if source.num_classes() > model.classes {
        return Err(Error::Incompatible(format!(
            "source has {} classes but the classifier has {}",
            source.num_classes(),
            model.classes
        )));
    }
    Ok(())
}

/// Accuracy of `pred` against `truth` over `indices`; `None` when no
/// labeled pixel is selected.
pub fn accuracy_on(truth: &[u16], pred: &[u16], indices: &[usize], k: usize) -> Result<Option<Accuracy>> {
    let t: Vec<u16> = indices.iter().map(|&i| truth[i]).collect();
    let p: Vec<u16> = indices.iter().map(|&i| pred[i]).collect();
    let cm = confusion(&t, &p, k)?;
    if cm.total() == 0 {
        return Ok(None);
    }
    oa_aa_kappa(&cm).map(Some)
}

fn evaluate_pair(
    model: &Model,
    source: &HsiCube,
    target: &HsiCube,
    split: &SplitMasks,
) -> Result<(Option<Accuracy>, Option<Accuracy>)> {
    let k = model.classes;
    let sp = predict(model, source)?;
    let s = accuracy_on(source.labels.as_deref().unwrap_or(&[]), &sp, &split.eval_indices(), k)?;
    let t = match &target.labels {
        Some(labels) => {
            let tp = predict(model, target)?;
            accuracy_on(labels, &tp, &target.labeled_indices(), k)?
        }
        None => None,
    };
    Ok((s, t))
}

/// Next classification batch from a queue of training pixels that is
/// refilled with a fresh permutation whenever it runs short.
fn next_class_batch(queue: &mut Vec<usize>, pool: &[usize], size: usize, rng: &mut StreamRng) -> Vec<usize> {
    let want = size.min(pool.len());
    if queue.len() < want {
        let mut fresh = pool.to_vec();
        fresh.shuffle(rng);
        queue.extend(fresh);
    }
    queue.drain(..want).collect()
}

/// Runs `cfg.epochs` epochs. An epoch visits as many reconstruction batches
/// as it takes to cover the larger scene once; each of its steps also takes
/// the next classification batch from a reshuffled cycle over the labeled
/// source training pixels.
pub fn train(
    state: &mut ModelState,
    source: &HsiCube,
    target: &HsiCube,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    check_inputs(&state.model, source, target)?;
    let split = split_labels(source, cfg.train_fraction, cfg.seed)?;
    let order = split.train_indices();
    let labels = source.labels.as_deref().expect("checked above");
    let patch = state.model.classifier.config.patch;
    state.adam.learning_rate = cfg.learning_rate;

    let mut class_rng = stream(cfg.seed, "batch.class");
    let mut recon_rng = stream(cfg.seed, "batch.recon");
    let mut shuffle_rng = stream(cfg.seed, "shuffle");
    let mut dropout_rng = stream(cfg.seed, "dropout");
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut last_eval = (None, None);

    let steps_per_epoch = source.pixels().max(target.pixels()).div_ceil(cfg.batch_recon);
    let mut queue: Vec<usize> = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut sums = LossValues::default();
        let mut steps = 0usize;
        for _ in 0..steps_per_epoch {
            let chunk = next_class_batch(&mut queue, &order, cfg.batch_class, &mut class_rng);
            let batch = StepBatch {
                source: sample_rows(source, cfg.batch_recon, &mut recon_rng)?,
                target: sample_rows(target, cfg.batch_recon, &mut recon_rng)?,
                patches: extract_patches(source, &centers(source, &chunk), patch)?,
                labels: chunk.iter().map(|&i| labels[i]).collect(),
            };
            let model = &state.model;
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let terms = total_loss(
                model,
                &mut tape,
                &bound,
                &batch,
                cfg,
                &mut shuffle_rng,
                &mut dropout_rng,
            )?;
            let v = terms.values(&tape, cfg.lambda, step)?;
            let grads = tape.backward(terms.total)?;
            state.adam.update(&mut state.model.store, &bound, &grads);
            state
                .model
                .classifier
                .update_running(&mut state.model.store, &terms.stats);
            sums.l2 += v.l2;
            sums.lh += v.lh;
            sums.li += v.li;
            sums.ls += v.ls;
            sums.total += v.total;
            steps += 1;
            step += 1;
        }
        let n = steps.max(1) as f64;
        let mean = LossValues {
            l2: sums.l2 / n,
            lh: sums.lh / n,
            li: sums.li / n,
            ls: sums.ls / n,
            total: sums.total / n,
        };
        let evaluate = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let (source_oa, target_oa) = if evaluate {
            last_eval = evaluate_pair(&state.model, source, target, &split)?;
            (
                last_eval.0.as_ref().map_or(f64::NAN, |a| a.oa),
                last_eval.1.as_ref().map_or(f64::NAN, |a| a.oa),
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        let row = EpochMetrics {
            epoch,
            losses: mean,
            source_oa,
            target_oa,
        };
        info!(
            "epoch {epoch}: total {:.5} L2 {:.5} LH {:.5} LI {:.5} LS {:.5} source OA {source_oa:.4} target OA {target_oa:.4}",
            mean.total, mean.l2, mean.lh, mean.li, mean.ls
        );
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainReport {
        epochs: log,
        split,
        source: last_eval.0,
        target: last_eval.1,
    })
}

/// Worker threads for inference: `PCTL_THREADS` if set, else all cores.
pub fn worker_threads() -> usize {
    std::env::var("PCTL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` over `0..jobs` on up to [`worker_threads`] threads and returns
/// the results in job order.
fn parallel_map<T: Send>(jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = worker_threads().min(jobs).max(1);
    if threads == 1 {
        return (0..jobs).map(&f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<Result<T>>> = (0..jobs).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut rest: &mut [Option<Result<T>>] = &mut slots;
        let per = jobs.div_ceil(threads);
        let mut start = 0;
        while !rest.is_empty() {
            let take = per.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            rest = tail;
            let base = start;
            scope.spawn(move || {
                for (i, slot) in head.iter_mut().enumerate() {
                    *slot = Some(f(base + i));
                }
            });
            start += take;
        }
    });
    slots.into_iter().map(|s| s.expect("every job ran")).collect()
}

/// Abundances of every pixel, `[H·W × c]` row-major.
pub fn encode_cube(model: &Model, cube: &HsiCube) -> Result<Vec<f64>> {
    model.check_bands(cube.bands)?;
    let l = cube.bands;
    let chunks = cube.pixels().div_ceil(INFER_CHUNK);
    let parts = parallel_map(chunks, |j| {
        let lo = j * INFER_CHUNK;
        let hi = (lo + INFER_CHUNK).min(cube.pixels());
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![hi - lo, l], cube.data[lo * l..hi * l].to_vec())?);
        let a = model.encoder.encode(&mut tape, &bound, x)?;
        Ok(a.values(&tape).data().to_vec())
    })?;
    Ok(parts.concat())
}

/// Classifier logits `[H·W × k]` for every pixel of `cube`.
pub fn predict_logits(model: &Model, cube: &HsiCube) -> Result<Tensor> {
    let abund = encode_cube(model, cube)?;
    let c = model.abundance_dim();
    let patch = model.classifier.config.patch;
    let all: Vec<(usize, usize)> = (0..cube.pixels()).map(|i| (i / cube.width, i % cube.width)).collect();
    let chunks = all.len().div_ceil(INFER_CHUNK);
    let parts = parallel_map(chunks, |j| {
        let span = &all[j * INFER_CHUNK..((j + 1) * INFER_CHUNK).min(all.len())];
        let pixels = gather_patches(&abund, cube.height, cube.width, c, span, patch)?;
        classify_abundance_patches(model, pixels)
    })?;
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![cube.pixels(), model.classes], data)
}

/// Inference-mode logits for already encoded patch pixels `[m·P·P × c]`.
pub fn classify_abundance_patches(model: &Model, pixels: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let a = tape.constant(pixels);
    let a = crate::encoder::SimplexBatch::checked(&tape, a, 1e-9)?;
    let volumes = abundance_volumes(&mut tape, a, model.classifier.config.patch)?;
    // Dropout is the identity in inference mode, so the stream is unused.
    let mut unused = stream(0, "dropout");
    let out = model
        .classifier
        .classify(&mut tape, &bound, &model.store, volumes, Mode::Infer, &mut unused)?;
    Ok(tape.value(out.logits).clone())
}

/// Per-pixel class raster (1-based) from frozen parameters.
pub fn predict(model: &Model, cube: &HsiCube) -> Result<Vec<u16>> {
    Ok(argmax_labels(&predict_logits(model, cube)?))
}

/// Softmax probabilities `[H·W × k]`.
pub fn predict_probabilities(model: &Model, cube: &HsiCube) -> Result<Tensor> {
    let logits = predict_logits(model, cube)?;
    let k = model.classes;
    let mut data = logits.into_data();
    for row in data.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![data.len() / k, k], data)
}

/// The ablation ladder, weakest first.
pub const ABLATION_VARIANTS: [(&str, AblationFlags); 5] = [
    (
        "classifier-only",
        AblationFlags {
            classifier_only: true,
            shared_decoder: false,
            no_sparse: true,
            no_mi: true,
        },
    ),
    (
        "shared-decoder",
        AblationFlags {
            classifier_only: false,
            shared_decoder: true,
            no_sparse: true,
            no_mi: true,
        },
    ),
    (
        "affine-decoder",
        AblationFlags {
            classifier_only: false,
            shared_decoder: false,
            no_sparse: true,
            no_mi: true,
        },
    ),
    (
        "+sparse",
        AblationFlags {
            classifier_only: false,
            shared_decoder: false,
            no_sparse: false,
            no_mi: true,
        },
    ),
    (
        "full",
        AblationFlags {
            classifier_only: false,
            shared_decoder: false,
            no_sparse: false,
            no_mi: false,
        },
    ),
];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub source: Option<Accuracy>,
    pub target: Option<Accuracy>,
}

/// Trains one fresh model per variant from the same seed and data.
pub fn run_ablation(
    settings: &ModelSettings,
    cfg: &TrainConfig,
    source: &HsiCube,
    target: &HsiCube,
    variants: &[(&str, AblationFlags)],
) -> Result<Vec<AblationRow>> {
    let classes = source.num_classes();
    variants
        .iter()
        .map(|&(name, flags)| {
            let run = TrainConfig { flags, ..cfg.clone() };
            let model = Model::new(settings, source.bands, classes, run.seed)?;
            let mut state = ModelState::new(model, run.learning_rate);
            let report = train(&mut state, source, target, &run, |_| {})?;
            info!("ablation {name}: done");
            Ok(AblationRow {
                variant: name.to_string(),
                source: report.source,
                target: report.target,
            })
        })
        .collect()
}

/// Tab-separated ablation table, metrics in percent.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\tsource_oa\tsource_aa\tsource_kappa\ttarget_oa\ttarget_aa\ttarget_kappa\n");
    let cells = |a: &Option<Accuracy>| match a {
        Some(a) => format!("{:.2}\t{:.2}\t{:.2}", 100.0 * a.oa, 100.0 * a.aa, 100.0 * a.kappa),
        None => "nan\tnan\tnan".to_string(),
    };
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}", r.variant, cells(&r.source), cells(&r.target));
    }
    s
}
