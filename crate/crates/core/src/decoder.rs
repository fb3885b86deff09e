//! Affine-transfer decoder.
//!
//! One basis network `B(a)` is shared by both domains. Each domain applies its
//! own per-band scale and offset, `x̂ = c ∘ B(a) + d`, so the two
//! reconstructions of the same abundances differ by an affine map.

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::SimplexBatch;
use crate::error::{Error, Result};
use crate::nn::{forward_stack, Activation, Bound, DenseLayer, ParamId, ParamStore};

pub const DEFAULT_BASIS_HIDDEN: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffineMode {
    PerBand,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub abundance_dim: usize,
    pub bands: usize,
    pub basis_hidden: usize,
    pub affine: AffineMode,
}

impl DecoderConfig {
    pub fn new(abundance_dim: usize, bands: usize) -> Self {
        DecoderConfig {
            abundance_dim,
            bands,
            basis_hidden: DEFAULT_BASIS_HIDDEN,
            affine: AffineMode::PerBand,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.abundance_dim < 2 || self.bands < 1 || self.basis_hidden < 1 {
            return Err(Error::Config(format!(
                "bad decoder dims c={} L={} hidden={}",
                self.abundance_dim, self.bands, self.basis_hidden
            )));
        }
        Ok(())
    }
}

/// A per-domain `(scale, offset)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AffinePair {
    pub scale: ParamId,
    pub offset: ParamId,
}

#[derive(Clone, Debug)]
pub struct AffineDecoder {
    pub config: DecoderConfig,
    pub basis: Vec<DenseLayer>,
    pub source: AffinePair,
    pub target: AffinePair,
}

impl AffineDecoder {
    /// Registers the basis stack and both affine pairs at identity transfer.
    pub fn new(store: &mut ParamStore, config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let basis = vec![
            DenseLayer::new(
                store,
                "decoder.basis.0",
                config.abundance_dim,
                config.basis_hidden,
                Activation::Relu,
                seed,
            )?,
            DenseLayer::new(
                store,
                "decoder.basis.1",
                config.basis_hidden,
                config.bands,
                Activation::None,
                seed,
            )?,
        ];
        let n = match config.affine {
            AffineMode::PerBand => config.bands,
            AffineMode::Scalar => 1,
        };
        let mut pair = |tag: &str| -> Result<AffinePair> {
            Ok(AffinePair {
                scale: store.add(&format!("decoder.{tag}.scale"), Tensor::ones(&[n]), true)?,
                offset: store.add(&format!("decoder.{tag}.offset"), Tensor::zeros(&[n]), true)?,
            })
        };
        let source = pair("source")?;
        let target = pair("target")?;
        Ok(AffineDecoder {
            config,
            basis,
            source,
            target,
        })
    }

    pub fn basis_param_ids(&self) -> Vec<ParamId> {
        self.basis.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn pair(&self, domain: Domain) -> AffinePair {
        match domain {
            Domain::Source => self.source,
            Domain::Target => self.target,
        }
    }

    /// Shared basis reconstruction `B(a)`.
    pub fn basis_output(&self, tape: &mut Tape, bound: &Bound, a: SimplexBatch) -> Result<Var> {
        let s = tape.shape(a.var());
        if s.len() != 2 || s[1] != self.config.abundance_dim {
            return Err(Error::shape("decode", s, &[self.config.abundance_dim]));
        }
        forward_stack(&self.basis, tape, bound, a.var())
    }

    /// `c ∘ B(a) + d` with the pair of `domain`.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, a: SimplexBatch, domain: Domain) -> Result<Var> {
        let b = self.basis_output(tape, bound, a)?;
        self.apply_affine(tape, bound, b, domain)
    }

    pub fn apply_affine(&self, tape: &mut Tape, bound: &Bound, basis_out: Var, domain: Domain) -> Result<Var> {
        let p = self.pair(domain);
        let scaled = tape.mul(basis_out, bound.var(p.scale))?;
        tape.add(scaled, bound.var(p.offset))
    }

    pub fn decode_source(&self, tape: &mut Tape, bound: &Bound, a: SimplexBatch) -> Result<Var> {
        self.decode(tape, bound, a, Domain::Source)
    }

    pub fn decode_target(&self, tape: &mut Tape, bound: &Bound, a: SimplexBatch) -> Result<Var> {
        self.decode(tape, bound, a, Domain::Target)
    }

    /// Learned `(c_S, d_S, c_T, d_T)` per band, broadcasting scalar mode.
    pub fn affine_table(&self, store: &ParamStore) -> Vec<[f64; 4]> {
        let get = |id: ParamId, j: usize| {
            let t = store.get(id).data();
            t[if t.len() == 1 { 0 } else { j }]
        };
        (0..self.config.bands)
            .map(|j| {
                [
                    get(self.source.scale, j),
                    get(self.source.offset, j),
                    get(self.target.scale, j),
                    get(self.target.offset, j),
                ]
            })
            .collect()
    }
}

/// Batch mean of per-pixel Euclidean reconstruction error.
pub fn pixel_l2(tape: &mut Tape, x_hat: Var, x: Var) -> Result<Var> {
    if tape.shape(x_hat) != tape.shape(x) {
        return Err(Error::shape("reconstruction_loss", tape.shape(x_hat), tape.shape(x)));
    }
    let diff = tape.sub(x_hat, x)?;
    let norms = tape.norm_axis(diff, 1, false)?;
    Ok(tape.mean(norms))
}

/// Sum of both domains' mean per-pixel reconstruction errors.
pub fn reconstruction_loss(tape: &mut Tape, xs_hat: Var, xs: Var, xt_hat: Var, xt: Var) -> Result<Var> {
    let s = pixel_l2(tape, xs_hat, xs)?;
    let t = pixel_l2(tape, xt_hat, xt)?;
    tape.add(s, t)
}
