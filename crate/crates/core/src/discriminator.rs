//! Mutual-information discriminator.
//!
//! A small network scores `(pixel, abundance)` pairs. The Jensen-Shannon lower
//! bound contrasts true pairs against pairs whose pixels were shuffled within
//! the batch while the abundances stay in place.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::SimplexBatch;
use crate::error::{Error, Result};
use crate::nn::{forward_stack, Activation, Bound, DenseLayer, ParamId, ParamStore};
use crate::rng::StreamRng;

pub const DEFAULT_DISCRIMINATOR_HIDDEN: usize = 13;
/// Attempts at drawing a fixed-point-free permutation before accepting any.
pub const DERANGEMENT_TRIES: usize = 16;

#[derive(Clone, Debug)]
pub struct MiDiscriminator {
    pub bands: usize,
    pub abundance_dim: usize,
    pub layers: Vec<DenseLayer>,
}

impl MiDiscriminator {
    pub fn new(store: &mut ParamStore, bands: usize, abundance_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || bands == 0 || abundance_dim == 0 {
            return Err(Error::Config("discriminator dimensions must be positive".into()));
        }
        let layers = vec![
            DenseLayer::new(
                store,
                "discriminator.0",
                bands + abundance_dim,
                hidden,
                Activation::Relu,
                seed,
            )?,
            DenseLayer::new(store, "discriminator.1", hidden, 1, Activation::None, seed)?,
        ];
        Ok(MiDiscriminator {
            bands,
            abundance_dim,
            layers,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Scores `[batch×1]` of the concatenated pairs.
    pub fn score(&self, tape: &mut Tape, bound: &Bound, x: Var, a: SimplexBatch) -> Result<Var> {
        let (xs, as_) = (tape.shape(x).to_vec(), tape.shape(a.var()).to_vec());
        if xs.len() != 2 || as_.len() != 2 || xs[0] != as_[0] || xs[1] != self.bands || as_[1] != self.abundance_dim {
            return Err(Error::shape("score", &xs, &as_));
        }
        let pair = tape.concat(&[x, a.var()], 1)?;
        forward_stack(&self.layers, tape, bound, pair)
    }

    /// `mean(−sp(−T(x,a))) − mean(sp(T(x',a)))`, to be maximized.
    pub fn js_mi_objective(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        a: SimplexBatch,
        x_shuffled: Var,
    ) -> Result<Var> {
        let pos = self.score(tape, bound, x, a)?;
        let neg = self.score(tape, bound, x_shuffled, a)?;
        js_from_scores(tape, pos, neg)
    }

    /// Sum of both domains' objectives, each with its own shuffled negatives.
    #[allow(clippy::too_many_arguments)]
    pub fn mi_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_s: Var,
        a_s: SimplexBatch,
        x_t: Var,
        a_t: SimplexBatch,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        let xs_neg = shuffle_negatives(tape, x_s, rng)?;
        let xt_neg = shuffle_negatives(tape, x_t, rng)?;
        let s = self.js_mi_objective(tape, bound, x_s, a_s, xs_neg)?;
        let t = self.js_mi_objective(tape, bound, x_t, a_t, xt_neg)?;
        tape.add(s, t)
    }
}

/// JS bound from already computed positive and negative scores.
pub fn js_from_scores(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var> {
    let np = tape.neg(pos);
    let sp_pos = tape.softplus(np);
    let pos_term = tape.mean(sp_pos);
    let sp_neg = tape.softplus(neg);
    let neg_term = tape.mean(sp_neg);
    let total = tape.add(pos_term, neg_term)?;
    Ok(tape.neg(total))
}

/// A permutation of `0..n`, retried until it has no fixed points.
pub fn derangement(n: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Contract(format!(
            "shuffling needs a batch of at least 2, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..DERANGEMENT_TRIES {
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
    }
    Ok(perm)
}

/// Rows of `x` reordered by [`derangement`].
pub fn shuffle_negatives(tape: &mut Tape, x: Var, rng: &mut StreamRng) -> Result<Var> {
    let n = tape.shape(x).first().copied().unwrap_or(0);
    let perm = derangement(n, rng)?;
    tape.index_rows(x, &perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng::stream;

    #[test]
    fn pair_of_two_is_swapped() {
        let mut rng = stream(0, "shuffle");
        for _ in 0..20 {
            assert_eq!(derangement(2, &mut rng).unwrap(), vec![1, 0]);
        }
    }

    #[test]
    fn single_row_is_rejected() {
        let mut rng = stream(0, "shuffle");
        assert!(matches!(derangement(1, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_scores_give_minus_two_log_two() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[5, 1]));
        let js = js_from_scores(&mut tape, z, z).unwrap();
        assert!((tape.value(js).data()[0] + 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn constant_score_matches_closed_form() {
        let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        for s in [-3.0, -0.5, 0.7, 4.0] {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::full(&[3, 1], s));
            let js = js_from_scores(&mut tape, v, v).unwrap();
            let want = -(sp(s) + sp(-s));
            assert!((tape.value(js).data()[0] - want).abs() < 1e-14);
            assert!(want <= -2.0 * 2f64.ln() + 1e-15);
        }
    }
}
