//! Per-profile mask tensors and the row-weighting rules applied to them.
//!
//! Soft rows are a softmax over the bank. Hard rows use the straight-through
//! Gumbel top-k estimator: the forward value is a k-hot vector scaled by
//! `1/k`, while the gradient is that of `softmax(logits / tau)`.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::autodiff::{Tape, Var};
use crate::codec::bits::BitMatrix;
use crate::codec::profile::MaskMode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which masks a profile trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskVariant {
    /// Separate `M_A` and `M_B`.
    #[default]
    TwoMasks,
    /// Only `M_B`; the down-projection is the plain mean of the bank.
    UpOnly,
}

impl MaskVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskVariant::TwoMasks => "two_masks",
            MaskVariant::UpOnly => "m_b_only",
        }
    }
}

impl std::str::FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_masks" => Ok(MaskVariant::TwoMasks),
            "m_b_only" => Ok(MaskVariant::UpOnly),
            other => Err(Error::config(format!(
                "unknown mask variant {other:?} (expected two_masks|m_b_only)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSettings {
    pub mode: MaskMode,
    /// Selected adapters per row (hard mode only).
    pub k: usize,
    pub tau: f64,
    /// Gumbel noise scale applied during training.
    pub nu: f64,
    pub variant: MaskVariant,
}

impl MaskSettings {
    pub fn soft() -> Self {
        MaskSettings {
            mode: MaskMode::Soft,
            k: 0,
            tau: 1.0,
            nu: 0.0,
            variant: MaskVariant::TwoMasks,
        }
    }

    pub fn hard(k: usize) -> Self {
        MaskSettings {
            mode: MaskMode::Hard,
            k,
            tau: 1.0,
            nu: 1.0,
            variant: MaskVariant::TwoMasks,
        }
    }

    pub fn with_variant(mut self, variant: MaskVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.mode == MaskMode::Hard && (self.k == 0 || self.k > n) {
            return Err(Error::TopK { k: self.k, n });
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.nu >= 0.0) {
            return Err(Error::config(format!("nu must be non-negative, got {}", self.nu)));
        }
        Ok(())
    }
}

/// Trainable per-profile state: mask logits for both projections and the
/// affine of the LN applied after the aggregated down-projection.
#[derive(Clone, Debug)]
pub struct MaskTensors<S> {
    /// `[L×N]`
    pub logits_a: Tensor<S>,
    /// `[L×N]`
    pub logits_b: Tensor<S>,
    /// `[L×b]`
    pub ln_gamma: Tensor<S>,
    /// `[L×b]`
    pub ln_beta: Tensor<S>,
    pub settings: MaskSettings,
}

impl<S: Scalar> MaskTensors<S> {
    /// Zero logits (uniform softmax over the bank) and identity LN affine.
    pub fn new(l: usize, n: usize, b: usize, settings: MaskSettings) -> Result<Self> {
        settings.validate(n)?;
        let mut masks = MaskTensors {
            logits_a: Tensor::zeros(&[l, n]),
            logits_b: Tensor::zeros(&[l, n]),
            ln_gamma: Tensor::ones(&[l, b]),
            ln_beta: Tensor::zeros(&[l, b]),
            settings,
        };
        masks.set_trainable(true);
        Ok(masks)
    }

    pub fn layers(&self) -> usize {
        self.logits_a.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.logits_a.shape()[1]
    }

    pub fn bottleneck(&self) -> usize {
        self.ln_gamma.shape()[1]
    }

    /// Marks the parameters the current variant trains.
    pub fn set_trainable(&mut self, on: bool) {
        self.logits_a.requires_grad = on && self.settings.variant == MaskVariant::TwoMasks;
        self.logits_b.requires_grad = on;
        self.ln_gamma.requires_grad = on;
        self.ln_beta.requires_grad = on;
    }

    pub fn tensors(&self) -> [&Tensor<S>; 4] {
        [&self.logits_a, &self.logits_b, &self.ln_gamma, &self.ln_beta]
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors().iter().filter(|t| t.requires_grad).map(|t| t.numel()).sum()
    }

    /// Binarises trained hard masks: per row, the `k` largest entries of the
    /// noiseless `softmax(logits / tau)`, lowest index first on ties.
    pub fn binarize(&self) -> Result<(BitMatrix, BitMatrix)> {
        if self.settings.mode != MaskMode::Hard {
            return Err(Error::SoftMasks);
        }
        if self.settings.variant != MaskVariant::TwoMasks {
            return Err(Error::config("only two-mask profiles can be binarised"));
        }
        let k = self.settings.k;
        let tau = self.settings.tau;
        let pick = |logits: &Tensor<S>| -> Result<BitMatrix> {
            let mut tape = Tape::new();
            let x = tape.leaf(&logits.clone().with_requires_grad(false));
            let y = tempered_softmax(&mut tape, x, tau)?;
            let n = logits.shape()[1];
            let rows: Vec<Vec<usize>> = tape.value(y).chunks(n).map(|row| topk_indices(row, k)).collect();
            Ok(BitMatrix::from_rows(n, &rows))
        };
        Ok((pick(&self.logits_a)?, pick(&self.logits_b)?))
    }
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn topk_indices<S: Scalar>(values: &[S], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

fn tempered_softmax<S: Scalar>(tape: &mut Tape<S>, logits: Var, tau: f64) -> Result<Var> {
    let last = tape.shape(logits).len() - 1;
    let scaled = tape.scale(logits, S::lit(1.0 / tau));
    tape.softmax(scaled, last)
}

/// Softmax over the last axis (one row per block).
pub fn soft_row_weights<S: Scalar>(tape: &mut Tape<S>, logits: Var) -> Result<Var> {
    let last = tape.shape(logits).len().checked_sub(1).ok_or_else(|| Error::shape("soft_row_weights", &[], &[]))?;
    tape.softmax(logits, last)
}

/// Straight-through hard top-k softmax over the last axis.
///
/// Forward: `y_hard - detach(y_soft) + y_soft` where `y_soft` is
/// `softmax((logits + nu·g) / tau)` with `g ~ Gumbel(0, 1)` and `y_hard`
/// holds `1/k` at the top-k positions of `y_soft`. No noise is drawn when
/// `nu == 0`.
pub fn hard_row_weights<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    logits: Var,
    k: usize,
    tau: f64,
    nu: f64,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let n = *shape.last().ok_or_else(|| Error::shape("hard_row_weights", &shape, &[]))?;
    if k == 0 || k > n {
        return Err(Error::TopK { k, n });
    }
    if !(tau > 0.0) || !(nu >= 0.0) {
        return Err(Error::config(format!("need tau > 0 and nu >= 0 (tau={tau}, nu={nu})")));
    }
    let noisy = if nu > 0.0 {
        let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
        let noise: Vec<S> = (0..tape.value(logits).len())
            .map(|_| S::lit(nu * gumbel.sample(rng)))
            .collect();
        let noise = tape.constant(shape.clone(), noise)?;
        tape.add(logits, noise)?
    } else {
        logits
    };
    let y_soft = tempered_softmax(tape, noisy, tau)?;

    let inv_k = S::one() / S::lit(k as f64);
    let mut hard = vec![S::zero(); tape.value(y_soft).len()];
    for (dst, row) in hard.chunks_mut(n).zip(tape.value(y_soft).chunks(n)) {
        for i in topk_indices(row, k) {
            dst[i] = inv_k;
        }
    }
    let y_hard = tape.constant(shape, hard)?;
    let frozen = tape.detach(y_soft);
    let centred = tape.sub(y_hard, frozen)?;
    tape.add(centred, y_soft)
}

/// Weights reconstructed from stored bits: `1/k` on set bits.
pub fn bit_weights<S: Scalar>(bits: &BitMatrix, k: usize) -> Tensor<S> {
    let inv_k = S::one() / S::lit(k as f64);
    let data = bits
        .to_f64s()
        .into_iter()
        .map(|b| if b > 0.0 { inv_k } else { S::zero() })
        .collect();
    Tensor::new(vec![bits.rows(), bits.cols()], data).expect("bit matrix dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn soft_weights_examples() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(vec![4], vec![0.0; 4]).unwrap();
        let y = soft_row_weights(&mut t, x).unwrap();
        assert_eq!(t.value(y), &[0.25; 4]);
        let x = t.constant(vec![1], vec![3.7]).unwrap();
        let y = soft_row_weights(&mut t, x).unwrap();
        assert_eq!(t.value(y), &[1.0]);
    }

    #[test]
    fn hard_noiseless_argmax() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(vec![4], vec![5.0, 1.0, 0.0, 0.0]).unwrap();
        let y = hard_row_weights(&mut t, x, 1, 1.0, 0.0, &mut rng()).unwrap();
        assert_eq!(t.value(y), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn hard_full_selection_is_uniform() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(vec![5], vec![3.0, -1.0, 0.5, 2.0, 7.0]).unwrap();
        let y = hard_row_weights(&mut t, x, 5, 1.0, 0.0, &mut rng()).unwrap();
        for &v in t.value(y) {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn hard_rejects_bad_k() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(vec![3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            hard_row_weights(&mut t, x, 0, 1.0, 0.0, &mut rng()),
            Err(Error::TopK { k: 0, n: 3 })
        ));
        assert!(matches!(
            hard_row_weights(&mut t, x, 4, 1.0, 0.0, &mut rng()),
            Err(Error::TopK { k: 4, n: 3 })
        ));
    }

    #[test]
    fn hard_gradient_equals_soft_gradient() {
        let logits = vec![0.3f32, -1.2, 2.0, 0.7, 0.1];
        let tau = 0.7;

        let mut hard = Tape::new();
        let x = hard.variable(vec![5], logits.clone()).unwrap();
        let y = hard_row_weights(&mut hard, x, 2, tau, 0.0, &mut rng()).unwrap();
        // weight the outputs so the gradient is not trivially zero
        let w = hard.constant(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let yw = hard.mul(y, w).unwrap();
        let s = hard.sum(yw);
        hard.backward(s).unwrap();

        let mut soft = Tape::new();
        let x2 = soft.variable(vec![5], logits).unwrap();
        let scaled = soft.scale(x2, 1.0 / tau as f32);
        let y2 = soft.softmax(scaled, 0).unwrap();
        let w2 = soft.constant(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let yw2 = soft.mul(y2, w2).unwrap();
        let s2 = soft.sum(yw2);
        soft.backward(s2).unwrap();

        assert_eq!(hard.grad(x).unwrap(), soft.grad(x2).unwrap());
    }

    #[test]
    fn noisy_selection_is_reproducible() {
        let run = |seed| {
            let mut t = Tape::<f32>::new();
            let x = t.constant(vec![2, 6], vec![0.0; 12]).unwrap();
            let y = hard_row_weights(&mut t, x, 2, 1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            t.value(y).to_vec()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn topk_tie_breaks_low_index() {
        assert_eq!(topk_indices(&[3.0f32, 1.0, 2.0, 0.0], 2), vec![0, 2]);
        assert_eq!(topk_indices(&[0.0f32, 1.0, 0.5, 1.0], 1), vec![1]);
        assert_eq!(topk_indices(&[0.0f32; 4], 2), vec![0, 1]);
    }

    #[test]
    fn binarize_examples() {
        let mut m = MaskTensors::<f32>::new(1, 4, 2, MaskSettings::hard(2)).unwrap();
        m.logits_a.data_mut().copy_from_slice(&[3.0, 1.0, 2.0, 0.0]);
        m.logits_b.data_mut().copy_from_slice(&[0.0, 1.0, 0.0, 1.0]);
        let (a, b) = m.binarize().unwrap();
        assert_eq!(a.row_indices(0), vec![0, 2]);
        assert_eq!(b.row_indices(0), vec![1, 3]);

        let mut m = MaskTensors::<f32>::new(1, 4, 2, MaskSettings::hard(1)).unwrap();
        m.logits_a.data_mut().copy_from_slice(&[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(m.binarize().unwrap().0.row_indices(0), vec![1]);

        let soft = MaskTensors::<f32>::new(1, 4, 2, MaskSettings::soft()).unwrap();
        assert!(matches!(soft.binarize(), Err(Error::SoftMasks)));
    }

    #[test]
    fn trainable_count_is_two_n_plus_b_times_l() {
        let m = MaskTensors::<f32>::new(12, 100, 48, MaskSettings::hard(50)).unwrap();
        assert_eq!(m.trainable_count(), 3552);
        let up_only = MaskTensors::<f32>::new(
            12,
            100,
            48,
            MaskSettings::hard(50).with_variant(MaskVariant::UpOnly),
        )
        .unwrap();
        assert_eq!(up_only.trainable_count(), 100 * 12 + 2 * 48 * 12);
    }

    #[test]
    fn settings_validation() {
        assert!(MaskTensors::<f32>::new(1, 4, 2, MaskSettings::hard(5)).is_err());
        let mut s = MaskSettings::soft();
        s.tau = 0.0;
        assert!(s.validate(4).is_err());
    }
}
