//! Densely connected 3-D CNN over abundance patches.
//!
//! Each labeled pixel contributes a `P×P` neighbourhood, encoded pixel-wise
//! onto the simplex and arranged as a one-channel volume `[1, c, P, P]` whose
//! depth axis runs over abundance components. Five conv → batch-norm → relu
//! blocks follow; block `i` sees the input volume concatenated with every
//! earlier block's output. The last block is flattened, passed through
//! dropout and mapped to class logits.

use crate::autodiff::BatchStats;
use crate::autodiff::{Conv3dSpec, Tape, Tensor, Var};
use crate::data::HsiCube;
use crate::encoder::SimplexBatch;
use crate::error::{Error, Result};
use crate::nn::{
    glorot_uniform, one_hot, Activation, BatchNorm3d, Bound, DenseLayer, Dropout, Mode, ParamId, ParamStore,
    DEFAULT_DROPOUT,
};
use crate::rng::{stream, StreamRng};

pub const DEFAULT_PATCH: usize = 11;
pub const DEFAULT_BLOCK_CHANNELS: [usize; 5] = [12, 32, 12, 12, 30];
/// Requested kernel along (abundance, row, col) before clamping.
pub const REQUESTED_KERNEL: [usize; 3] = [3, 7, 7];

/// Largest odd number not above `min(want, extent)`.
fn odd_clamp(want: usize, extent: usize) -> usize {
    let k = want.min(extent).max(1);
    if k.is_multiple_of(2) {
        k - 1
    } else {
        k
    }
}

/// `requested` `[depth, height, width]` kernel fitted to `c` components and
/// patch `P`, each extent odd.
pub fn fit_kernel(requested: [usize; 3], abundance_dim: usize, patch: usize) -> [usize; 3] {
    [
        odd_clamp(requested[0], abundance_dim),
        odd_clamp(requested[1], patch),
        odd_clamp(requested[2], patch),
    ]
}

/// The default kernel fitted to the data.
pub fn clamped_kernel(abundance_dim: usize, patch: usize) -> [usize; 3] {
    fit_kernel(REQUESTED_KERNEL, abundance_dim, patch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub patch: usize,
    pub abundance_dim: usize,
    pub classes: usize,
    pub block_channels: Vec<usize>,
    /// `[abundance, row, col]` extents, each odd.
    pub kernel: [usize; 3],
    pub dropout: f64,
}

impl ClassifierConfig {
    pub fn new(patch: usize, abundance_dim: usize, classes: usize) -> Self {
        ClassifierConfig {
            patch,
            abundance_dim,
            classes,
            block_channels: DEFAULT_BLOCK_CHANNELS.to_vec(),
            kernel: clamped_kernel(abundance_dim, patch),
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch.is_multiple_of(2) {
            return Err(Error::Config(format!("patch size {} must be odd", self.patch)));
        }
        if self.block_channels.len() != 5 || self.block_channels.contains(&0) {
            return Err(Error::Config(format!(
                "need five positive block widths, got {:?}",
                self.block_channels
            )));
        }
        if self.classes < 2 || self.abundance_dim < 2 {
            return Err(Error::Config("classifier needs k ≥ 2 and c ≥ 2".into()));
        }
        let extents = [self.abundance_dim, self.patch, self.patch];
        if self.kernel.iter().zip(extents).any(|(&k, e)| k % 2 == 0 || k > e) {
            return Err(Error::Config(format!(
                "kernel {:?} must be odd and fit {extents:?}",
                self.kernel
            )));
        }
        Dropout::new(self.dropout)?;
        Ok(())
    }

    /// Channels entering block `i`: the input plus all earlier outputs.
    pub fn block_input_channels(&self, i: usize) -> usize {
        1 + self.block_channels[..i].iter().sum::<usize>()
    }

    pub fn flat_features(&self) -> usize {
        self.block_channels[4] * self.abundance_dim * self.patch * self.patch
    }
}

#[derive(Clone, Debug)]
pub struct DenseCnn {
    pub config: ClassifierConfig,
    pub kernels: Vec<ParamId>,
    pub norms: Vec<BatchNorm3d>,
    pub head: DenseLayer,
    pub dropout: Dropout,
}

/// Forward result: logits plus, in training mode, per-block batch statistics.
pub struct Classified {
    pub logits: Var,
    pub stats: Vec<BatchStats>,
}

impl DenseCnn {
    pub fn new(store: &mut ParamStore, config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vol: usize = config.kernel.iter().product();
        let mut kernels = Vec::with_capacity(5);
        let mut norms = Vec::with_capacity(5);
        for (i, &out) in config.block_channels.iter().enumerate() {
            let cin = config.block_input_channels(i);
            let name = format!("classifier.block{i}.kernel");
            let mut rng = stream(seed, &format!("init/{name}"));
            let [kd, kh, kw] = config.kernel;
            let w = glorot_uniform(&mut rng, &[out, cin, kd, kh, kw], cin * vol, out * vol);
            kernels.push(store.add(&name, w, true)?);
            norms.push(BatchNorm3d::new(store, &format!("classifier.block{i}.bn"), out)?);
        }
        let head = DenseLayer::new(
            store,
            "classifier.head",
            config.flat_features(),
            config.classes,
            Activation::None,
            seed,
        )?;
        let dropout = Dropout::new(config.dropout)?;
        Ok(DenseCnn {
            config,
            kernels,
            norms,
            head,
            dropout,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.kernels.clone();
        for n in &self.norms {
            ids.extend([n.gamma, n.beta, n.running_mean, n.running_var]);
        }
        ids.extend([self.head.weight, self.head.bias]);
        ids
    }

    /// Logits `[batch×k]` for abundance volumes `[batch, 1, c, P, P]`.
    pub fn classify(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        store: &ParamStore,
        volumes: Var,
        mode: Mode,
        rng: &mut StreamRng,
    ) -> Result<Classified> {
        let cfg = &self.config;
        let s = tape.shape(volumes).to_vec();
        let want = [cfg.abundance_dim, cfg.patch, cfg.patch];
        if s.len() != 5 || s[1] != 1 || s[2..] != want {
            return Err(Error::shape("classify", &s, &[0, 1, want[0], want[1], want[2]]));
        }
        let batch = s[0];
        let spec = Conv3dSpec::same(cfg.kernel);
        let mut features = vec![volumes];
        let mut stats = Vec::new();
        for (kernel, norm) in self.kernels.iter().zip(&self.norms) {
            let input = if features.len() == 1 {
                features[0]
            } else {
                tape.concat(&features, 1)?
            };
            let h = tape.conv3d(input, bound.var(*kernel), spec)?;
            let (h, st) = norm.forward(tape, bound, store, h, mode)?;
            stats.extend(st);
            features.push(tape.relu(h));
        }
        let last = *features.last().expect("five blocks");
        let flat = tape.reshape(last, &[batch, cfg.flat_features()])?;
        let dropped = self.dropout.apply(tape, flat, mode, rng)?;
        let logits = self.head.forward(tape, bound, dropped)?;
        Ok(Classified { logits, stats })
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running(&self, store: &mut ParamStore, stats: &[BatchStats]) {
        for (norm, st) in self.norms.iter().zip(stats) {
            norm.update_running(store, st);
        }
    }
}

/// Index reflected into `0..n` without repeating the edge.
pub fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Gathers `P×P` neighbourhoods from a row-major `h×w×dim` map, mirrored at
/// the borders. Rows of the result are ordered (patch, row, col).
pub fn gather_patches(
    map: &[f64],
    height: usize,
    width: usize,
    dim: usize,
    centers: &[(usize, usize)],
    patch: usize,
) -> Result<Tensor> {
    if centers.is_empty() {
        return Err(Error::Contract("no patch centers".into()));
    }
    if patch.is_multiple_of(2) {
        return Err(Error::Config(format!("patch size {patch} must be odd")));
    }
    if map.len() != height * width * dim {
        return Err(Error::shape("gather_patches", &[map.len()], &[height, width, dim]));
    }
    let half = (patch / 2) as isize;
    let mut out = Vec::with_capacity(centers.len() * patch * patch * dim);
    for &(r, c) in centers {
        if r >= height || c >= width {
            return Err(Error::Contract(format!("center ({r}, {c}) outside {height}×{width}")));
        }
        for dr in -half..=half {
            let rr = mirror_index(r as isize + dr, height);
            for dc in -half..=half {
                let cc = mirror_index(c as isize + dc, width);
                let p = (rr * width + cc) * dim;
                out.extend_from_slice(&map[p..p + dim]);
            }
        }
    }
    Tensor::new(vec![centers.len() * patch * patch, dim], out)
}

/// Pixel patches `[n·P·P, L]` around `centers`.
pub fn extract_patches(cube: &HsiCube, centers: &[(usize, usize)], patch: usize) -> Result<Tensor> {
    gather_patches(&cube.data, cube.height, cube.width, cube.bands, centers, patch)
}

/// Rearranges encoded patch pixels `[n·P·P, c]` into volumes `[n, 1, c, P, P]`.
pub fn abundance_volumes(tape: &mut Tape, a: SimplexBatch, patch: usize) -> Result<Var> {
    let s = tape.shape(a.var()).to_vec();
    let per = patch * patch;
    if s.len() != 2 || s[0] == 0 || !s[0].is_multiple_of(per) {
        return Err(Error::shape("abundance_volumes", &s, &[per]));
    }
    let (n, c) = (s[0] / per, s[1]);
    let grid = tape.reshape(a.var(), &[n, patch, patch, c])?;
    let moved = tape.permute(grid, &[0, 3, 1, 2])?;
    tape.reshape(moved, &[n, 1, c, patch, patch])
}

/// Mean cross-entropy against 1-based class labels.
pub fn classification_loss(tape: &mut Tape, logits: Var, labels: &[u16]) -> Result<Var> {
    let k = tape.shape(logits).get(1).copied().unwrap_or(0);
    let idx: Vec<usize> = labels
        .iter()
        .map(|&l| {
            if l == 0 {
                Err(Error::Contract("unlabeled pixel in classification batch".into()))
            } else {
                Ok(l as usize - 1)
            }
        })
        .collect::<Result<_>>()?;
    let targets = one_hot(&idx, k)?;
    tape.softmax_cross_entropy(logits, &targets)
}

/// Row-wise argmax as 1-based class ids.
pub fn argmax_labels(logits: &Tensor) -> Vec<u16> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best as u16 + 1
        })
        .collect()
}
