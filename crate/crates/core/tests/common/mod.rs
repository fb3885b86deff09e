#![allow(dead_code)]

use pctl::autodiff::{Tape, Tensor, Var};
use pctl::data::{generate_synthetic_pair, SynthParams};
use pctl::decoder::{pixel_l2, AffineDecoder, DecoderConfig, Domain};
use pctl::discriminator::{shuffle_negatives, MiDiscriminator};
use pctl::encoder::{normalized_entropy, DirichletEncoder, EncoderConfig, SimplexBatch};
use pctl::model::Adam;
use pctl::nn::ParamStore;
use pctl::rng::stream;
use pctl::trainer::sample_rows;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Forward value of `build` at `inputs`.
pub fn eval_scalar<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).item().expect("scalar output")
}

/// Central-difference gradients of `build` w.r.t. every input entry.
pub fn numeric_grads<F>(inputs: &[Tensor], h: f64, build: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut probe = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let fp = eval_scalar(&probe, build);
            probe[i].data_mut()[j] = x0 - h;
            let fm = eval_scalar(&probe, build);
            probe[i].data_mut()[j] = x0;
            g.push((fp - fm) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

pub fn analytic_grads<F>(inputs: &[Tensor], build: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, 1e-5)` over all entries.
pub fn max_rel_error<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let a = analytic_grads(inputs, &build);
    let n = numeric_grads(inputs, 1e-5, &build);
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-5))
        .fold(0.0, f64::max)
}

/// Extremes seen over a sweep of encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct SimplexExtremes {
    pub min_entry: f64,
    pub max_entry: f64,
    pub max_sum_error: f64,
}

/// Encodes a random `batch × 40` batch with each of `models` freshly
/// initialized encoders (6 abundances) and records the worst rows.
pub fn simplex_sweep(models: usize, batch: usize, seed: u64) -> SimplexExtremes {
    let mut out = SimplexExtremes {
        min_entry: f64::INFINITY,
        max_entry: f64::NEG_INFINITY,
        max_sum_error: 0.0,
    };
    let mut r = rng(seed);
    for m in 0..models {
        let mut store = ParamStore::new();
        let enc = DirichletEncoder::new(&mut store, EncoderConfig::new(40, 6), seed + m as u64).unwrap();
        let x = random_tensor(&mut r, &[batch, 40], -2.0, 2.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x);
        let a = enc.encode(&mut tape, &bound, xv).unwrap();
        let a = a.values(&tape);
        for i in 0..batch {
            let row = a.row(i);
            for &v in row {
                out.min_entry = out.min_entry.min(v);
                out.max_entry = out.max_entry.max(v);
            }
            out.max_sum_error = out.max_sum_error.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    out
}

/// Trains an encoder on the entropy term alone for `steps` Adam steps over
/// a fixed 64-pixel batch and returns the mean largest abundance.
pub fn entropy_descent(steps: usize, seed: u64) -> f64 {
    let mut store = ParamStore::new();
    let enc = DirichletEncoder::new(&mut store, EncoderConfig::new(40, 6), seed).unwrap();
    let x = random_tensor(&mut rng(seed), &[64, 40], 0.0, 1.0);
    let mut adam = Adam::new(&store, 1e-2);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let a = enc.encode(&mut tape, &bound, xv).unwrap();
        let h = normalized_entropy(&mut tape, a, 1.0).unwrap();
        let grads = tape.backward(h).unwrap();
        adam.update(&mut store, &bound, &grads);
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.constant(x);
    let a = enc.encode(&mut tape, &bound, xv).unwrap();
    let a = a.values(&tape);
    (0..64)
        .map(|i| a.row(i).iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / 64.0
}

/// Coefficient of determination of the least-squares line `y ≈ a·x + b`.
pub fn affine_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Trains encoder and decoder on reconstruction alone over the noiseless
/// default pair, then maps every source pixel end to end into the target
/// domain (encode, decode with the target pair) and returns the per-band R²
/// of the affine fit between the source pixels and their images.
pub fn band_map_r2(steps: usize, seed: u64) -> Vec<f64> {
    let params = SynthParams {
        noise: 0.0,
        seed,
        ..SynthParams::default()
    };
    let (source, target, _) = generate_synthetic_pair(&params.build().unwrap()).unwrap();
    let (c, l) = (params.abundance_dim, params.bands);
    let mut store = ParamStore::new();
    let enc = DirichletEncoder::new(&mut store, EncoderConfig::new(l, c), seed).unwrap();
    let dec = AffineDecoder::new(&mut store, DecoderConfig::new(c, l), seed).unwrap();
    let mut adam = Adam::new(&store, 1e-2);
    let mut batches = stream(seed, "test/batches");
    for step in 0..steps {
        // Exponential decay from 1e-2 to 1e-4.
        adam.learning_rate = 1e-2 * (1e-2f64).powf(step as f64 / steps as f64);
        let xs = sample_rows(&source, 256, &mut batches).unwrap();
        let xt = sample_rows(&target, 256, &mut batches).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut loss = tape.constant(Tensor::scalar(0.0));
        for (x, domain) in [(xs, Domain::Source), (xt, Domain::Target)] {
            let xv = tape.constant(x);
            let a = enc.encode(&mut tape, &bound, xv).unwrap();
            let x_hat = dec.decode(&mut tape, &bound, a, domain).unwrap();
            let e = pixel_l2(&mut tape, x_hat, xv).unwrap();
            loss = tape.add(loss, e).unwrap();
        }
        let grads = tape.backward(loss).unwrap();
        adam.update(&mut store, &bound, &grads);
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xs = Tensor::new(vec![source.pixels(), l], source.data.clone()).unwrap();
    let xv = tape.constant(xs);
    let a = enc.encode(&mut tape, &bound, xv).unwrap();
    let translated = dec.decode(&mut tape, &bound, a, Domain::Target).unwrap();
    let translated = tape.value(translated).data().to_vec();
    (0..l)
        .map(|j| {
            let x: Vec<f64> = (0..source.pixels()).map(|p| source.data[p * l + j]).collect();
            let y: Vec<f64> = (0..source.pixels()).map(|p| translated[p * l + j]).collect();
            affine_r2(&x, &y)
        })
        .collect()
}

/// Random simplex rows (normalized exponentials).
pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        let e: Vec<f64> = (0..c).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(vec![n, c], data).unwrap()
}

/// Maximizes the JS bound of a fresh discriminator for `steps` Adam steps on
/// pairs where the pixel is a fixed linear mixture of its abundances, and
/// returns the bound on a held-out batch.
pub fn mi_training(steps: usize, seed: u64) -> f64 {
    let (l, c, n) = (16, 4, 128);
    let mut r = rng(seed);
    let basis = random_tensor(&mut r, &[c, l], 0.0, 1.0);
    let mut store = ParamStore::new();
    let disc = MiDiscriminator::new(&mut store, l, c, 13, seed).unwrap();
    let mut adam = Adam::new(&store, 1e-2);
    let mut shuffles = stream(seed, "test/shuffle");
    let objective = |store: &ParamStore, a: Tensor, tape: &mut Tape, shuffles: &mut _| {
        let bound = store.bind(tape);
        let av = tape.constant(a);
        let bv = tape.constant(basis.clone());
        let x = tape.matmul(av, bv).unwrap();
        let a = SimplexBatch::checked(tape, av, 1e-9).unwrap();
        let neg = shuffle_negatives(tape, x, shuffles).unwrap();
        let j = disc.js_mi_objective(tape, &bound, x, a, neg).unwrap();
        (bound, j)
    };
    for _ in 0..steps {
        let a = random_simplex(&mut r, n, c);
        let mut tape = Tape::new();
        let (bound, j) = objective(&store, a, &mut tape, &mut shuffles);
        let loss = tape.neg(j);
        let grads = tape.backward(loss).unwrap();
        adam.update(&mut store, &bound, &grads);
    }
    let a = random_simplex(&mut r, 1024, c);
    let mut tape = Tape::new();
    let (_, j) = objective(&store, a, &mut tape, &mut shuffles);
    tape.value(j).data()[0]
}
