//! The assembled network, its optimizer state and the checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "PCTL" u8 version, u32 record count, then per record:
//!   u32 name length, name (UTF-8), u32 ndim, ndim × u32 dims, f64 data
//! ```
//!
//! Records hold every parameter and buffer by name, then the Adam moments as
//! `adam.m.<name>` / `adam.v.<name>` and the step count as `adam.step`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::{Gradients, Tensor};
use crate::classifier::{fit_kernel, ClassifierConfig, DenseCnn};
use crate::config::{BetaSetting, ModelSettings};
use crate::decoder::{AffineDecoder, DecoderConfig};
use crate::discriminator::MiDiscriminator;
use crate::encoder::{default_hidden_widths, BetaMode, DirichletEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCTL";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Encoder, decoder, discriminator and classifier over one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub settings: ModelSettings,
    pub bands: usize,
    pub classes: usize,
    pub store: ParamStore,
    pub encoder: DirichletEncoder,
    pub decoder: AffineDecoder,
    pub discriminator: MiDiscriminator,
    pub classifier: DenseCnn,
}

impl Model {
    pub fn new(settings: &ModelSettings, bands: usize, classes: usize, seed: u64) -> Result<Self> {
        let c = settings.abundance_dim.unwrap_or(classes + 2);
        let mut store = ParamStore::new();
        let encoder = DirichletEncoder::new(
            &mut store,
            EncoderConfig {
                bands,
                abundance_dim: c,
                hidden_widths: settings
                    .hidden_widths
                    .clone()
                    .unwrap_or_else(|| default_hidden_widths(bands, c, settings.width_multiplier)),
                beta: match settings.beta {
                    BetaSetting::Learnable => BetaMode::Learnable {
                        per_stick: !settings.beta_shared,
                    },
                    BetaSetting::Fixed(b) => BetaMode::Fixed(b),
                },
                form: settings.form,
            },
            seed,
        )?;
        let decoder = AffineDecoder::new(
            &mut store,
            DecoderConfig {
                abundance_dim: c,
                bands,
                basis_hidden: settings.decoder_hidden,
                affine: settings.affine,
            },
            seed,
        )?;
        let discriminator = MiDiscriminator::new(&mut store, bands, c, settings.discriminator_hidden, seed)?;
        let kernel = fit_kernel(settings.kernel, c, settings.patch);
        let classifier = DenseCnn::new(
            &mut store,
            ClassifierConfig {
                patch: settings.patch,
                abundance_dim: c,
                classes,
                block_channels: settings.block_channels.clone(),
                kernel,
                dropout: settings.dropout,
            },
            seed,
        )?;
        Ok(Model {
            settings: settings.clone(),
            bands,
            classes,
            store,
            encoder,
            decoder,
            discriminator,
            classifier,
        })
    }

    pub fn abundance_dim(&self) -> usize {
        self.encoder.config.abundance_dim
    }

    /// Parameters touched by reconstruction and mutual information only.
    pub fn reconstruction_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.decoder.basis_param_ids();
        for p in [self.decoder.source, self.decoder.target] {
            ids.extend([p.scale, p.offset]);
        }
        ids.extend(self.discriminator.param_ids());
        ids
    }

    pub fn check_bands(&self, bands: usize) -> Result<()> {
        if bands != self.bands {
            return Err(Error::Incompatible(format!(
                "cube has {bands} bands but the model expects {}",
                self.bands
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction. Parameters without a gradient in a step keep
/// their values and moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let m: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| {
                if p.trainable {
                    vec![0.0; p.value.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.param(id).trainable {
                continue;
            }
            let Some(g) = grads.get(bound.var(id)) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((p, &gi), mi), vi) in store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *p -= self.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Parameters plus optimizer moments.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub model: Model,
    pub adam: Adam,
}

impl ModelState {
    pub fn new(model: Model, learning_rate: f64) -> Self {
        let adam = Adam::new(&model.store, learning_rate);
        ModelState { model, adam }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let mut records: Vec<(String, &[usize], &[f64])> = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape(), p.value.data()))
            .collect();
        let mut moments = Vec::new();
        for (id, p) in store.iter() {
            if p.trainable {
                moments.push((
                    format!("adam.m.{}", p.name),
                    p.value.shape(),
                    &self.adam.m[id.index()][..],
                ));
                moments.push((
                    format!("adam.v.{}", p.name),
                    p.value.shape(),
                    &self.adam.v[id.index()][..],
                ));
            }
        }
        records.extend(moments);
        let step = [self.adam.step as f64];
        records.push(("adam.step".into(), &[1], &step));

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, shape, data) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Rebuilds a state from checkpoint bytes and the architecture settings
    /// it was trained with. Band and class counts come from the records.
    pub fn from_bytes(bytes: &[u8], settings: &ModelSettings) -> Result<Self> {
        let records = parse_records(bytes)?;
        let dim = |name: &str, axis: usize| -> Result<usize> {
            records
                .get(name)
                .and_then(|t| t.shape().get(axis).copied())
                .ok_or_else(|| Error::Parse {
                    offset: 0,
                    msg: format!("checkpoint lacks '{name}'"),
                })
        };
        let bands = dim("encoder.0.weight", 0)?;
        let classes = dim("classifier.head.weight", 1)?;
        let mut model = Model::new(settings, bands, classes, 0)?;
        let mut adam = Adam::new(&model.store, 0.0);
        let mut used = 0;
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = records.get(name).ok_or_else(|| Error::Parse {
                offset: 0,
                msg: format!("checkpoint lacks '{name}'"),
            })?;
            if t.shape() != shape {
                return Err(Error::Incompatible(format!(
                    "'{name}' has shape {:?} in the checkpoint but {shape:?} in the configured model",
                    t.shape()
                )));
            }
            used += 1;
            Ok(t.data().to_vec())
        };
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let (name, shape, trainable) = {
                let p = model.store.param(id);
                (p.name.clone(), p.value.shape().to_vec(), p.trainable)
            };
            let data = take(&name, &shape)?;
            model.store.get_mut(id).data_mut().copy_from_slice(&data);
            if trainable {
                adam.m[id.index()] = take(&format!("adam.m.{name}"), &shape)?;
                adam.v[id.index()] = take(&format!("adam.v.{name}"), &shape)?;
            }
        }
        adam.step = take("adam.step", &[1])?[0] as u64;
        if used != records.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} records the configured model does not use",
                records.len() - used
            )));
        }
        Ok(ModelState { model, adam })
    }

    pub fn load(path: &Path, settings: &ModelSettings) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, settings)
    }
}

fn parse_records(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::Parse {
                offset: bytes.len() as u64,
                msg: format!("truncated checkpoint: need {n} bytes at offset {pos}"),
            });
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let version = take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = u32_at(take(4)?);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32_at(take(4)?);
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| Error::Parse {
            offset: 0,
            msg: "record name is not UTF-8".into(),
        })?;
        let ndim = u32_at(take(4)?);
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32_at(take(4)?));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8));
        let n = n.ok_or(Error::Parse {
            offset: 0,
            msg: format!("record '{name}' dimensions overflow"),
        })?;
        let data = take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("duplicate record '{name}'"),
            });
        }
    }
    if pos != bytes.len() {
        return Err(Error::Parse {
            offset: pos as u64,
            msg: "trailing bytes after last record".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSettings {
        ModelSettings {
            patch: 3,
            block_channels: vec![2, 3, 2, 2, 3],
            ..ModelSettings::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let model = Model::new(&tiny(), 8, 3, 4).unwrap();
        let mut state = ModelState::new(model, 1e-3);
        state.adam.step = 7;
        state.adam.m[0][0] = 0.25;
        let bytes = state.to_bytes();
        let back = ModelState::from_bytes(&bytes, &tiny()).unwrap();
        assert_eq!(back.model.store, state.model.store);
        assert_eq!(back.adam.m, state.adam.m);
        assert_eq!(back.adam.step, 7);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let state = ModelState::new(Model::new(&tiny(), 8, 3, 4).unwrap(), 1e-3);
        let mut bytes = state.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            ModelState::from_bytes(&bytes, &tiny()),
            Err(Error::Parse { offset: 0, .. })
        ));
        let bytes = state.to_bytes();
        assert!(ModelState::from_bytes(&bytes[..bytes.len() - 1], &tiny()).is_err());
        let other = ModelSettings {
            decoder_hidden: 5,
            ..tiny()
        };
        assert!(matches!(
            ModelState::from_bytes(&bytes, &other),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn kernel_respects_request_and_data() {
        let m = Model::new(&tiny(), 8, 3, 0).unwrap();
        assert_eq!(m.classifier.config.kernel, [3, 3, 3]);
        let s = ModelSettings {
            kernel: [1, 3, 3],
            patch: 5,
            ..tiny()
        };
        assert_eq!(Model::new(&s, 8, 3, 0).unwrap().classifier.config.kernel, [1, 3, 3]);
    }
}
