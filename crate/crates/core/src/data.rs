//! Hyperspectral cubes, label rasters, labeled-sample splits and the synthetic
//! two-domain generator.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! cube:   "HSIC" u32 H, u32 W, u32 L, then H·W·L f32, band-interleaved by pixel
//! labels: "HSIL" u32 H, u32 W,        then H·W u16, 0 = unlabeled
//! ```
//!
//! Labels live in a sibling file with the `.hsil` extension.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const LABEL_MAGIC: &[u8; 4] = b"HSIL";

#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// `H·W·L` reflectances, band-interleaved by pixel.
    pub data: Vec<f64>,
    /// `H·W` class ids, 0 for unlabeled.
    pub labels: Option<Vec<u16>>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>, labels: Option<Vec<u16>>) -> Result<Self> {
        let pixels = height
            .checked_mul(width)
            .ok_or_else(|| Error::Contract("cube dimensions overflow".into()))?;
        if bands == 0 || pixels.checked_mul(bands) != Some(data.len()) {
            return Err(Error::Contract(format!(
                "cube {height}×{width}×{bands} does not match {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite reflectance at value {i}")));
        }
        if let Some(l) = &labels {
            if l.len() != pixels {
                return Err(Error::Contract(format!("{} labels for {pixels} pixels", l.len())));
            }
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            data,
            labels,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = row * self.width + col;
        &self.data[i * self.bands..(i + 1) * self.bands]
    }

    /// Label of a flat pixel index, 0 when unlabeled.
    pub fn label(&self, index: usize) -> u16 {
        self.labels.as_ref().map_or(0, |l| l[index])
    }

    /// Largest class id present.
    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().and_then(|l| l.iter().max().copied()).unwrap_or(0) as usize
    }

    /// Flat indices of every labeled pixel.
    pub fn labeled_indices(&self) -> Vec<usize> {
        match &self.labels {
            Some(l) => (0..l.len()).filter(|&i| l[i] > 0).collect(),
            None => Vec::new(),
        }
    }

    pub fn without_labels(&self) -> HsiCube {
        HsiCube {
            labels: None,
            ..self.clone()
        }
    }
}

/// Path of the label raster next to a cube file.
pub fn label_path(cube_path: &Path) -> PathBuf {
    cube_path.with_extension("hsil")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                msg: format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(Error::Parse {
                offset: 0,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            });
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn payload(&mut self, count: usize, width: usize, header_offset: usize) -> Result<&'a [u8]> {
        let n = count.checked_mul(width).ok_or_else(|| Error::Parse {
            offset: header_offset as u64,
            msg: "dimensions overflow".into(),
        })?;
        let s = self.take(n, "payload")?;
        if self.pos != self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(s)
    }
}

fn dims_product(dims: &[usize], offset: usize) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::Parse {
            offset: offset as u64,
            msg: format!("dimensions {dims:?} overflow"),
        })
}

/// Decodes a cube image (labels not attached).
pub fn decode_cube(bytes: &[u8]) -> Result<HsiCube> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(CUBE_MAGIC)?;
    let h = r.u32("height")?;
    let w = r.u32("width")?;
    let l = r.u32("bands")?;
    if l == 0 {
        return Err(Error::Parse {
            offset: 12,
            msg: "zero bands".into(),
        });
    }
    let n = dims_product(&[h, w, l], 4)?;
    let payload = r.payload(n, 4, 4)?;
    let mut data = Vec::with_capacity(n);
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(Error::Parse {
                offset: (16 + 4 * i) as u64,
                msg: format!("non-finite reflectance {v}"),
            });
        }
        data.push(v as f64);
    }
    HsiCube::new(h, w, l, data, None)
}

pub fn encode_cube(cube: &HsiCube) -> Result<Vec<u8>> {
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Contract(format!("dimension {v} exceeds u32")));
    let mut out = Vec::with_capacity(16 + 4 * cube.data.len());
    out.extend_from_slice(CUBE_MAGIC);
    for d in [cube.height, cube.width, cube.bands] {
        out.extend_from_slice(&dim(d)?.to_le_bytes());
    }
    for &v in &cube.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes a label raster into `(H, W, labels)`.
pub fn decode_labels(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LABEL_MAGIC)?;
    let h = r.u32("height")?;
    let w = r.u32("width")?;
    let n = dims_product(&[h, w], 4)?;
    let payload = r.payload(n, 2, 4)?;
    let labels = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok((h, w, labels))
}

pub fn encode_labels(height: usize, width: usize, labels: &[u16]) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::Contract(format!("{} labels for {height}×{width}", labels.len())));
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Contract(format!("dimension {v} exceeds u32")));
    let mut out = Vec::with_capacity(12 + 2 * labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&dim(height)?.to_le_bytes());
    out.extend_from_slice(&dim(width)?.to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

/// Reads a cube and, when present, its sibling label raster.
pub fn read_cube(path: &Path) -> Result<HsiCube> {
    let mut cube = decode_cube(&fs::read(path)?)?;
    let lp = label_path(path);
    if lp.exists() {
        let (h, w, labels) = decode_labels(&fs::read(&lp)?)?;
        if (h, w) != (cube.height, cube.width) {
            return Err(Error::Parse {
                offset: 4,
                msg: format!(
                    "label raster {h}×{w} does not match cube {}×{}",
                    cube.height, cube.width
                ),
            });
        }
        cube.labels = Some(labels);
    }
    Ok(cube)
}

/// Writes the cube and, when labeled, its sibling label raster.
pub fn write_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    fs::write(path, encode_cube(cube)?)?;
    if let Some(l) = &cube.labels {
        fs::write(label_path(path), encode_labels(cube.height, cube.width, l)?)?;
    }
    Ok(())
}

/// Disjoint training and evaluation masks over the labeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub eval: Vec<bool>,
}

impl SplitMasks {
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.train.len()).filter(|&i| self.train[i]).collect()
    }

    pub fn eval_indices(&self) -> Vec<usize> {
        (0..self.eval.len()).filter(|&i| self.eval[i]).collect()
    }
}

/// Pixels drawn from a class of `n` labeled samples: `fraction·n` rounded to
/// nearest (halves up), at least 1.
pub fn class_quota(fraction: f64, n: usize) -> usize {
    // Nudge absorbs representation error in products such as 0.05·1330.
    ((fraction * n as f64 + 1e-9).round() as usize).clamp(1, n)
}

/// Stratified random selection of `fraction` of each class.
pub fn split_labels(cube: &HsiCube, fraction: f64, seed: u64) -> Result<SplitMasks> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0,1]")));
    }
    let labels = cube
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("cannot split an unlabeled cube".into()))?;
    let k = cube.num_classes();
    if k == 0 {
        return Err(Error::Contract("cube has no labeled pixels".into()));
    }
    let mut by_class = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            by_class[l as usize - 1].push(i);
        }
    }
    let mut rng = stream(seed, "split");
    let mut train = vec![false; labels.len()];
    let mut eval = vec![false; labels.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            return Err(Error::Contract(format!("class {} has no samples", c + 1)));
        }
        members.shuffle(&mut rng);
        let take = class_quota(fraction, members.len());
        for (j, &i) in members.iter().enumerate() {
            if j < take {
                train[i] = true;
            } else {
                eval[i] = true;
            }
        }
    }
    Ok(SplitMasks { train, eval })
}

/// Parameters of the synthetic source/target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub abundance_dim: usize,
    pub bands: usize,
    /// `classes × abundance_dim` Dirichlet concentrations.
    pub concentrations: Vec<Vec<f64>>,
    /// Source basis, `abundance_dim × bands`, row-major.
    pub basis: Vec<f64>,
    /// Per-band affine shift `B_S = scale ∘ B_T + offset`.
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise: f64,
    pub pixels_per_class: usize,
    pub seed: u64,
}

/// Scalar description from which a [`SynthSpec`] is built.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub classes: usize,
    pub abundance_dim: usize,
    pub bands: usize,
    pub scale: f64,
    pub offset: f64,
    pub noise: f64,
    pub pixels_per_class: usize,
    /// Concentration on each class's own endmember; the rest get `background`.
    pub concentration: f64,
    pub background: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            classes: 4,
            abundance_dim: 6,
            bands: 40,
            scale: 0.7,
            offset: 0.1,
            noise: 0.01,
            pixels_per_class: 800,
            concentration: 10.0,
            background: 1.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub const KEYS: [&'static str; 10] = [
        "classes",
        "abundance_dim",
        "bands",
        "scale",
        "offset",
        "noise",
        "pixels_per_class",
        "concentration",
        "background",
        "seed",
    ];

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
        }
        match key {
            "classes" => self.classes = parse(key, value)?,
            "abundance_dim" => self.abundance_dim = parse(key, value)?,
            "bands" => self.bands = parse(key, value)?,
            "scale" => self.scale = parse(key, value)?,
            "offset" => self.offset = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "pixels_per_class" => self.pixels_per_class = parse(key, value)?,
            "concentration" => self.concentration = parse(key, value)?,
            "background" => self.background = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown synth key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = SynthParams::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            p.set(k.strip_prefix("synth.").unwrap_or(k), v)?;
        }
        Ok(p)
    }

    pub fn to_text(&self) -> String {
        format!(
            "classes = {}\nabundance_dim = {}\nbands = {}\nscale = {}\noffset = {}\nnoise = {}\n\
             pixels_per_class = {}\nconcentration = {}\nbackground = {}\nseed = {}\n",
            self.classes,
            self.abundance_dim,
            self.bands,
            self.scale,
            self.offset,
            self.noise,
            self.pixels_per_class,
            self.concentration,
            self.background,
            self.seed
        )
    }

    /// Builds the full spec; the target basis is drawn as smooth spectra in
    /// [0,1] and mapped through the affine shift to give the source basis.
    pub fn build(&self) -> Result<SynthSpec> {
        if self.classes == 0 || self.abundance_dim < self.classes.max(2) || self.bands == 0 {
            return Err(Error::Config(format!(
                "synthetic spec needs 1 ≤ k ≤ c, c ≥ 2, L ≥ 1 (k={}, c={}, L={})",
                self.classes, self.abundance_dim, self.bands
            )));
        }
        if self.pixels_per_class == 0 || !(self.noise >= 0.0) {
            return Err(Error::Config(
                "pixels_per_class must be positive and noise non-negative".into(),
            ));
        }
        if !(self.concentration > 0.0 && self.background > 0.0) {
            return Err(Error::Config("Dirichlet concentrations must be positive".into()));
        }
        let c = self.abundance_dim;
        let target = smooth_basis(c, self.bands, &mut stream(self.seed, "data/basis"));
        let basis = target.iter().map(|&t| self.scale * t + self.offset).collect();
        let concentrations = (0..self.classes)
            .map(|k| {
                (0..c)
                    .map(|j| if j == k { self.concentration } else { self.background })
                    .collect()
            })
            .collect();
        let spec = SynthSpec {
            classes: self.classes,
            abundance_dim: c,
            bands: self.bands,
            concentrations,
            basis,
            scale: vec![self.scale; self.bands],
            offset: vec![self.offset; self.bands],
            noise: self.noise,
            pixels_per_class: self.pixels_per_class,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `c` smooth spectra over `bands`: sums of Gaussian bumps rescaled to start
/// at 0 and peak at a random albedo in [0.5, 1].
fn smooth_basis(c: usize, bands: usize, rng: &mut StreamRng) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * bands);
    for _ in 0..c {
        let bumps: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random::<f64>(),
                    0.05 + 0.2 * rng.random::<f64>(),
                    0.3 + rng.random::<f64>(),
                )
            })
            .collect();
        let row: Vec<f64> = (0..bands)
            .map(|j| {
                let t = if bands > 1 { j as f64 / (bands - 1) as f64 } else { 0.5 };
                bumps
                    .iter()
                    .map(|&(m, s, h)| h * (-(t - m).powi(2) / (2.0 * s * s)).exp())
                    .sum()
            })
            .collect();
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let albedo = 0.5 + 0.5 * rng.random::<f64>();
        out.extend(row.iter().map(|v| albedo * (v - lo) / span));
    }
    out
}

/// Ground-truth abundances of both cubes, `H·W × c` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (c, l) = (self.abundance_dim, self.bands);
        if self.basis.len() != c * l || self.scale.len() != l || self.offset.len() != l {
            return Err(Error::Config("synthetic basis or shift has the wrong length".into()));
        }
        if self.concentrations.len() != self.classes || self.concentrations.iter().any(|r| r.len() != c) {
            return Err(Error::Config(
                "one concentration vector of length c per class required".into(),
            ));
        }
        if self.basis.iter().any(|&b| !(0.0..=1.0).contains(&b)) {
            return Err(Error::Config("basis entries must lie in [0,1]".into()));
        }
        for j in 0..l {
            if self.scale[j] == 0.0 && (0..c).any(|i| self.basis[i * l + j] != self.offset[j]) {
                return Err(Error::Config(format!("zero scale at band {j} cannot map the basis")));
            }
        }
        Ok(())
    }

    /// Target basis `(B − offset) / scale`.
    pub fn target_basis(&self) -> Vec<f64> {
        let l = self.bands;
        self.basis
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let j = i % l;
                if self.scale[j] == 0.0 {
                    0.0
                } else {
                    (b - self.offset[j]) / self.scale[j]
                }
            })
            .collect()
    }

    /// Tile grid `(tile_h, tile_w, grid_rows, grid_cols)`.
    pub fn layout(&self) -> (usize, usize, usize, usize) {
        let n = self.pixels_per_class;
        let mut th = (n as f64).sqrt().floor() as usize;
        while th > 1 && !n.is_multiple_of(th) {
            th -= 1;
        }
        let tw = n / th;
        let gc = (self.classes as f64).sqrt().ceil() as usize;
        let gr = self.classes.div_ceil(gc);
        (th, tw, gr, gc)
    }
}

fn dirichlet(alpha: &[f64], rng: &mut StreamRng) -> Vec<f64> {
    let mut g: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive concentration").sample(rng))
        .collect();
    let s: f64 = g.iter().sum();
    if s > 0.0 {
        g.iter_mut().for_each(|v| *v /= s);
    } else {
        let n = g.len() as f64;
        g.iter_mut().for_each(|v| *v = 1.0 / n);
    }
    g
}

/// Class raster of the tiled layout with randomly swapped tile borders.
fn tiled_labels(spec: &SynthSpec, rng: &mut StreamRng) -> (usize, usize, Vec<u16>) {
    let (th, tw, gr, gc) = spec.layout();
    let (h, w) = (th * gr, tw * gc);
    let mut labels = vec![0u16; h * w];
    for r in 0..h {
        for c in 0..w {
            let tile = (r / th) * gc + c / tw;
            if tile < spec.classes {
                labels[r * w + c] = tile as u16 + 1;
            }
        }
    }
    // One-pixel jitter: swap across each tile border with probability 1/2.
    for r in 0..h {
        for c in (tw..w).step_by(tw) {
            if rng.random::<f64>() < 0.5 {
                labels.swap(r * w + c - 1, r * w + c);
            }
        }
    }
    for r in (th..h).step_by(th) {
        for c in 0..w {
            if rng.random::<f64>() < 0.5 {
                labels.swap((r - 1) * w + c, r * w + c);
            }
        }
    }
    (h, w, labels)
}

fn render(spec: &SynthSpec, basis: &[f64], labels: &[u16], rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
    let (c, l) = (spec.abundance_dim, spec.bands);
    let uniform = vec![1.0; c];
    let noise = Normal::new(0.0, spec.noise).expect("finite noise");
    let mut data = Vec::with_capacity(labels.len() * l);
    let mut abund = Vec::with_capacity(labels.len() * c);
    for &lab in labels {
        let alpha = if lab == 0 {
            &uniform
        } else {
            &spec.concentrations[lab as usize - 1]
        };
        let a = dirichlet(alpha, rng);
        for j in 0..l {
            let clean: f64 = (0..c).map(|i| a[i] * basis[i * l + j]).sum();
            let eps = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(clean + eps);
        }
        abund.extend_from_slice(&a);
    }
    (data, abund)
}

/// Source and target cubes sharing one labeled layout, with fresh abundance
/// draws per domain. Target labels are for evaluation only.
pub fn generate_synthetic_pair(spec: &SynthSpec) -> Result<(HsiCube, HsiCube, SynthTruth)> {
    spec.validate()?;
    let (h, w, labels) = tiled_labels(spec, &mut stream(spec.seed, "data/layout"));
    let target_basis = spec.target_basis();
    let (xs, a_s) = render(spec, &spec.basis, &labels, &mut stream(spec.seed, "data/source"));
    let (xt, a_t) = render(spec, &target_basis, &labels, &mut stream(spec.seed, "data/target"));
    let source = HsiCube::new(h, w, spec.bands, xs, Some(labels.clone()))?;
    let target = HsiCube::new(h, w, spec.bands, xt, Some(labels))?;
    Ok((
        source,
        target,
        SynthTruth {
            source: a_s,
            target: a_t,
        },
    ))
}

/// `domain,row,col,a_1..a_c` rows for both domains.
pub fn abundance_csv(spec: &SynthSpec, cube: &HsiCube, truth: &SynthTruth) -> String {
    let c = spec.abundance_dim;
    let mut out = String::from("domain,row,col");
    for i in 1..=c {
        out.push_str(&format!(",a_{i}"));
    }
    out.push('\n');
    for (name, a) in [("source", &truth.source), ("target", &truth.target)] {
        for p in 0..cube.pixels() {
            out.push_str(&format!("{name},{},{}", p / cube.width, p % cube.width));
            for v in &a[p * c..(p + 1) * c] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}
