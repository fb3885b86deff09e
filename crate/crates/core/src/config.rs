//! `section.key = value` run configuration.
//!
//! Every key has a default, unknown keys are errors, and [`RunConfig::to_text`]
//! writes the fully resolved configuration back in the same syntax.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::classifier::{DEFAULT_BLOCK_CHANNELS, DEFAULT_PATCH, REQUESTED_KERNEL};
use crate::data::SynthParams;
use crate::decoder::{AffineMode, DEFAULT_BASIS_HIDDEN};
use crate::discriminator::DEFAULT_DISCRIMINATOR_HIDDEN;
use crate::encoder::KumaraswamyForm;
use crate::error::{Error, Result};
use crate::nn::DEFAULT_DROPOUT;

/// Switches that remove parts of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationFlags {
    /// Train only encoder and classifier on source patches.
    pub classifier_only: bool,
    /// Decode both domains through the source affine pair.
    pub shared_decoder: bool,
    pub no_sparse: bool,
    pub no_mi: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    /// Pixels per domain in each reconstruction batch.
    pub batch_recon: usize,
    /// Labeled source patches per classification batch.
    pub batch_class: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of each source class used for training.
    pub train_fraction: f64,
    /// Accuracy is evaluated every this many epochs and after the last.
    pub eval_every: usize,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.001,
            lambda: 0.1,
            learning_rate: 1e-3,
            batch_recon: 256,
            batch_class: 64,
            epochs: 200,
            seed: 0,
            train_fraction: 0.05,
            eval_every: 0,
            flags: AblationFlags::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BetaSetting {
    Learnable,
    Fixed(f64),
}

/// Architecture settings independent of the data dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    /// `None` means classes + 2.
    pub abundance_dim: Option<usize>,
    pub width_multiplier: usize,
    /// Overrides the geometric default when set.
    pub hidden_widths: Option<Vec<usize>>,
    pub beta: BetaSetting,
    pub beta_shared: bool,
    pub form: KumaraswamyForm,
    pub decoder_hidden: usize,
    pub affine: AffineMode,
    pub discriminator_hidden: usize,
    pub patch: usize,
    pub block_channels: Vec<usize>,
    /// Requested `[abundance, row, col]` kernel, clamped to the data.
    pub kernel: [usize; 3],
    pub dropout: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            abundance_dim: None,
            width_multiplier: 3,
            hidden_widths: None,
            beta: BetaSetting::Learnable,
            beta_shared: false,
            form: KumaraswamyForm::Power,
            decoder_hidden: DEFAULT_BASIS_HIDDEN,
            affine: AffineMode::PerBand,
            discriminator_hidden: DEFAULT_DISCRIMINATOR_HIDDEN,
            patch: DEFAULT_PATCH,
            block_channels: DEFAULT_BLOCK_CHANNELS.to_vec(),
            kernel: REQUESTED_KERNEL,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelSettings,
    pub synth: SynthParams,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{}' for '{key}'", value.trim())))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("invalid boolean '{other}' for '{key}'"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses `section.key = value` lines over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected section.key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (t, m) = (&mut self.train, &mut self.model);
        match key {
            "train.alpha" => t.alpha = parse(key, value)?,
            "train.lambda" => t.lambda = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.batch_recon" => t.batch_recon = parse(key, value)?,
            "train.batch_class" => t.batch_class = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.train_fraction" => t.train_fraction = parse(key, value)?,
            "train.eval_every" => t.eval_every = parse(key, value)?,
            "train.classifier_only" => t.flags.classifier_only = parse_bool(key, value)?,
            "train.shared_decoder" => t.flags.shared_decoder = parse_bool(key, value)?,
            "train.no_sparse" => t.flags.no_sparse = parse_bool(key, value)?,
            "train.no_mi" => t.flags.no_mi = parse_bool(key, value)?,
            "encoder.abundance_dim" => {
                m.abundance_dim = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "encoder.width_multiplier" => m.width_multiplier = parse(key, value)?,
            "encoder.hidden_widths" => {
                m.hidden_widths = match value {
                    "auto" => None,
                    v => Some(parse_list(key, v)?),
                }
            }
            "encoder.beta" => {
                m.beta = match value {
                    "learnable" => BetaSetting::Learnable,
                    v => BetaSetting::Fixed(parse(key, v)?),
                }
            }
            "encoder.beta_shared" => m.beta_shared = parse_bool(key, value)?,
            "encoder.form" => {
                m.form = match value {
                    "power" => KumaraswamyForm::Power,
                    "inverse_cdf" => KumaraswamyForm::InverseCdf,
                    v => return Err(Error::Config(format!("unknown stick form '{v}'"))),
                }
            }
            "decoder.hidden" => m.decoder_hidden = parse(key, value)?,
            "decoder.affine" => {
                m.affine = match value {
                    "per_band" => AffineMode::PerBand,
                    "scalar" => AffineMode::Scalar,
                    v => return Err(Error::Config(format!("unknown affine mode '{v}'"))),
                }
            }
            "discriminator.hidden" => m.discriminator_hidden = parse(key, value)?,
            "classifier.patch" => m.patch = parse(key, value)?,
            "classifier.block_channels" => m.block_channels = parse_list(key, value)?,
            "classifier.kernel" => {
                let k = parse_list(key, value)?;
                m.kernel = k
                    .try_into()
                    .map_err(|_| Error::Config(format!("'{key}' needs three values")))?;
            }
            "classifier.dropout" => m.dropout = parse(key, value)?,
            _ => match key.strip_prefix("synth.") {
                Some(k) => self.synth.set(k, value)?,
                None => return Err(Error::Config(format!("unknown config key '{key}'"))),
            },
        }
        Ok(())
    }

    /// Checks ranges that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.alpha >= 0.0 && t.lambda >= 0.0) {
            return Err(Error::Config("alpha and lambda must be non-negative".into()));
        }
        if !(t.learning_rate > 0.0) || t.batch_class == 0 || t.batch_recon < 2 {
            return Err(Error::Config(
                "need learning_rate > 0, batch_class ≥ 1, batch_recon ≥ 2".into(),
            ));
        }
        if !(t.train_fraction > 0.0 && t.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0,1]",
                t.train_fraction
            )));
        }
        if self.model.patch.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "classifier.patch {} must be odd",
                self.model.patch
            )));
        }
        Ok(())
    }

    /// The resolved configuration in parseable form.
    pub fn to_text(&self) -> String {
        let (t, m) = (&self.train, &self.model);
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("train.alpha", t.alpha.to_string());
        line("train.lambda", t.lambda.to_string());
        line("train.learning_rate", t.learning_rate.to_string());
        line("train.batch_recon", t.batch_recon.to_string());
        line("train.batch_class", t.batch_class.to_string());
        line("train.epochs", t.epochs.to_string());
        line("train.seed", t.seed.to_string());
        line("train.train_fraction", t.train_fraction.to_string());
        line("train.eval_every", t.eval_every.to_string());
        line("train.classifier_only", t.flags.classifier_only.to_string());
        line("train.shared_decoder", t.flags.shared_decoder.to_string());
        line("train.no_sparse", t.flags.no_sparse.to_string());
        line("train.no_mi", t.flags.no_mi.to_string());
        line(
            "encoder.abundance_dim",
            m.abundance_dim.map_or("auto".into(), |c| c.to_string()),
        );
        line("encoder.width_multiplier", m.width_multiplier.to_string());
        line(
            "encoder.hidden_widths",
            m.hidden_widths.as_deref().map_or("auto".into(), join),
        );
        line(
            "encoder.beta",
            match m.beta {
                BetaSetting::Learnable => "learnable".into(),
                BetaSetting::Fixed(b) => b.to_string(),
            },
        );
        line("encoder.beta_shared", m.beta_shared.to_string());
        line(
            "encoder.form",
            match m.form {
                KumaraswamyForm::Power => "power",
                KumaraswamyForm::InverseCdf => "inverse_cdf",
            }
            .into(),
        );
        line("decoder.hidden", m.decoder_hidden.to_string());
        line(
            "decoder.affine",
            match m.affine {
                AffineMode::PerBand => "per_band",
                AffineMode::Scalar => "scalar",
            }
            .into(),
        );
        line("discriminator.hidden", m.discriminator_hidden.to_string());
        line("classifier.patch", m.patch.to_string());
        line("classifier.block_channels", join(&m.block_channels));
        line("classifier.kernel", join(&m.kernel));
        line("classifier.dropout", m.dropout.to_string());
        for l in self.synth.to_text().lines() {
            let _ = writeln!(s, "synth.{l}");
        }
        s
    }
}
