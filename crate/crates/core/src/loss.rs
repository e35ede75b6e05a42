//! Dual-domain L1 loss over the three output scales.
//!
//! Per scale, with `S` the element count of that scale:
//!
//! ```text
//! L_s = (1/S) Σ |Î − I|
//! L_f = (1/S) Σ |Re(F Î − F I)| + |Im(F Î − F I)|
//! ```
//!
//! where `F` is the unnormalized 2-D DFT of each channel. Both terms are
//! summed over scales and `L = L_s + λ·L_f`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{ScaleOutputs, SCALES};
use crate::error::{ensure, Result};

/// Weight of the frequency term.
pub const LAMBDA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub spatial: f64,
    pub frequency: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        self.spatial.is_finite() && self.frequency.is_finite() && self.total.is_finite()
    }
}

/// Records the loss of `preds` (full, half, quarter) against `targets`.
/// Returns the scalar root to backpropagate from and its terms.
pub fn dual_domain_loss_traced(
    tape: &Tape,
    preds: [Var; SCALES],
    targets: &ScaleOutputs,
    lambda: f64,
) -> Result<(Var, LossTerms)> {
    ensure!(
        lambda.is_finite() && lambda >= 0.0,
        Config,
        "loss weight must be finite and non-negative, got {lambda}"
    );
    let mut spatial = Vec::with_capacity(SCALES);
    let mut frequency = Vec::with_capacity(SCALES);
    for (pred, target) in preds.into_iter().zip(targets.as_array()) {
        spatial.push((tape.l1_mean(pred, target)?, 1.0));
        frequency.push((tape.spectral_l1_mean(pred, target)?, 1.0));
    }
    let spatial = tape.combine(&spatial)?;
    let frequency = tape.combine(&frequency)?;
    let total = tape.combine(&[(spatial, 1.0), (frequency, lambda)])?;
    let scalar = |v: Var| tape.value(v).data()[0];
    let terms = LossTerms {
        spatial: scalar(spatial),
        frequency: scalar(frequency),
        lambda,
        total: scalar(total),
    };
    Ok((total, terms))
}

pub fn dual_domain_loss(pred: &ScaleOutputs, target: &ScaleOutputs, lambda: f64) -> Result<LossTerms> {
    for (p, t) in pred.as_array().into_iter().zip(target.as_array()) {
        p.expect_same_shape(t, "dual-domain loss")?;
    }
    let tape = Tape::new();
    let preds = pred.as_array().map(|t| tape.leaf(t.clone()));
    Ok(dual_domain_loss_traced(&tape, preds, target, lambda)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_scale(full: Tensor) -> ScaleOutputs {
        let [n, c, _, _] = full.shape();
        ScaleOutputs {
            full,
            half: Tensor::zeros([n, c, 1, 1]),
            quarter: Tensor::zeros([n, c, 1, 1]),
        }
    }

    #[test]
    fn identical_inputs_give_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let x = ScaleOutputs::pyramid(&Tensor::randn([2, 3, 8, 8], 1.0, &mut r)).unwrap();
        let terms = dual_domain_loss(&x, &x, LAMBDA).unwrap();
        assert_eq!((terms.spatial, terms.frequency, terms.total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_difference_on_two_by_two() {
        let pred = single_scale(Tensor::full([1, 1, 2, 2], 0.5));
        let target = single_scale(Tensor::zeros([1, 1, 2, 2]));
        let terms = dual_domain_loss(&pred, &target, LAMBDA).unwrap();
        assert_eq!(terms.spatial, 0.5);
        // 4-point DFT of a constant 0.5: DC = 2, all other bins 0
        let mut bins = [0.0f64; 4];
        for (k, bin) in bins.iter_mut().enumerate() {
            let (ky, kx) = (k / 2, k % 2);
            let mut re = 0.0;
            for y in 0..2 {
                for x in 0..2 {
                    re += 0.5 * (std::f64::consts::PI * (ky * y + kx * x) as f64).cos();
                }
            }
            *bin = re.abs();
        }
        let expected = bins.iter().sum::<f64>() / 4.0;
        assert!((terms.frequency - expected).abs() < 1e-15);
        assert_eq!(terms.frequency, 0.5);
        assert_eq!(terms.total, terms.spatial + LAMBDA * terms.frequency);
    }

    #[test]
    fn zero_lambda_leaves_only_the_spatial_term() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = ScaleOutputs::pyramid(&Tensor::randn([1, 3, 8, 8], 1.0, &mut r)).unwrap();
        let b = ScaleOutputs::pyramid(&Tensor::randn([1, 3, 8, 8], 1.0, &mut r)).unwrap();
        let terms = dual_domain_loss(&a, &b, 0.0).unwrap();
        assert_eq!(terms.total, terms.spatial);
        assert!(terms.frequency > 0.0);
    }

    #[test]
    fn scales_are_summed() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a = ScaleOutputs::pyramid(&Tensor::randn([1, 2, 8, 8], 1.0, &mut r)).unwrap();
        let b = ScaleOutputs::pyramid(&Tensor::randn([1, 2, 8, 8], 1.0, &mut r)).unwrap();
        let per_scale: f64 = a
            .as_array()
            .iter()
            .zip(b.as_array())
            .map(|(p, t)| p.zip_map(t, |x, y| (x - y).abs()).unwrap().mean())
            .sum();
        let terms = dual_domain_loss(&a, &b, LAMBDA).unwrap();
        assert!((terms.spatial - per_scale).abs() < 1e-14);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = ScaleOutputs::pyramid(&Tensor::zeros([1, 3, 8, 8])).unwrap();
        let b = ScaleOutputs::pyramid(&Tensor::zeros([1, 3, 8, 12])).unwrap();
        assert!(matches!(dual_domain_loss(&a, &b, LAMBDA), Err(crate::Error::Dimension(_))));
        assert!(dual_domain_loss(&a, &a, -1.0).is_err());
    }
}
