//! Instruction cross-entropy, mask BCE and soft dice, and their weighted sum.
//!
//! These are the plain-value forms used for reporting and as references; the
//! differentiable versions live on [`crate::tape::Tape`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::BinaryMask;
use crate::seg_decoder::MaskLogits;
use crate::tape::{sigmoid, softplus, Mat};

pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub lambda_c: f64,
    pub lambda_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bce: 2.0,
            lambda_dice: 0.5,
            lambda_c: 1.0,
            lambda_m: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_bce", self.lambda_bce),
            ("lambda_dice", self.lambda_dice),
            ("lambda_c", self.lambda_c),
            ("lambda_m", self.lambda_m),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub l_m: f64,
    pub total: f64,
}

/// Mean `-log softmax(logits[t])[targets[t]]` over rows with `mask[t]`.
pub fn instruction_ce(logits: &Mat, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let rows = logits.nrows();
    if targets.len() != rows || mask.len() != rows {
        return Err(invalid!(
            "ce: {rows} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        ));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((row, &t), _) in logits.rows().into_iter().zip(targets).zip(mask).filter(|(_, &m)| m) {
        if t >= row.len() {
            return Err(invalid!("ce: target {t} outside vocabulary of {}", row.len()));
        }
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
        total += lse - row[t];
        n += 1;
    }
    if n == 0 {
        return Err(invalid!("ce: loss mask selects no positions"));
    }
    Ok(total / n as f64)
}

fn check_shapes(logits: &MaskLogits, gt: &BinaryMask) -> Result<()> {
    if logits.0.dim() != gt.dim() {
        return Err(invalid!(
            "mask logits {:?} and ground truth {:?} differ in shape",
            logits.0.dim(),
            gt.dim()
        ));
    }
    Ok(())
}

/// Mean pixel BCE, computed as `softplus(z) - g·z`.
pub fn bce_mask(logits: &MaskLogits, gt: &BinaryMask) -> Result<f64> {
    check_shapes(logits, gt)?;
    let sum: f64 = logits
        .0
        .iter()
        .zip(gt.0.iter())
        .map(|(&z, &g)| softplus(z) - f64::from(g) * z)
        .sum();
    Ok(sum / logits.0.len() as f64)
}

/// `1 - (2Σpg + eps) / (Σp + Σg + eps)` with `p = sigmoid(z)`.
pub fn dice_mask(logits: &MaskLogits, gt: &BinaryMask, eps: f64) -> Result<f64> {
    check_shapes(logits, gt)?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&z, &g) in logits.0.iter().zip(gt.0.iter()) {
        let p = sigmoid(z);
        let g = f64::from(g);
        inter += p * g;
        sp += p;
        sg += g;
    }
    Ok(1.0 - (2.0 * inter + eps) / (sp + sg + eps))
}

pub fn total_loss(l_c: f64, l_bce: f64, l_dice: f64, w: &LossWeights) -> Result<LossBreakdown> {
    if ![l_c, l_bce, l_dice].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite loss component: l_c={l_c} l_bce={l_bce} l_dice={l_dice}"
        )));
    }
    let l_m = w.lambda_bce * l_bce + w.lambda_dice * l_dice;
    Ok(LossBreakdown {
        l_c,
        l_bce,
        l_dice,
        l_m,
        total: w.lambda_c * l_c + w.lambda_m * l_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn ce_identities() {
        let mut logits = Mat::zeros((2, 8));
        logits[[0, 3]] = 100.0;
        logits[[1, 5]] = 100.0;
        assert!(instruction_ce(&logits, &[3, 5], &[true, true]).unwrap() < 1e-6);
        let uniform = Mat::zeros((3, 8));
        let l = instruction_ce(&uniform, &[0, 1, 2], &[true, false, true]).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
        assert!(instruction_ce(&uniform, &[0, 1, 2], &[false; 3]).is_err());
    }

    #[test]
    fn ce_hand_case() {
        let logits = array![[1.0, 2.0, 0.0], [0.5, -0.5, 0.0]];
        let row0 = -(2f64.exp() / (1f64.exp() + 2f64.exp() + 1.0)).ln();
        let row1 = -(0.5f64.exp() / (0.5f64.exp() + (-0.5f64).exp() + 1.0)).ln();
        let l = instruction_ce(&logits, &[1, 0], &[true, true]).unwrap();
        assert!((l - (row0 + row1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bce_identities() {
        let gt = BinaryMask::from_fn(4, 4, |y, x| (y + x) % 3 == 0);
        let zero = MaskLogits(Mat::zeros((4, 4)));
        assert!((bce_mask(&zero, &gt).unwrap() - 2f64.ln()).abs() < 1e-12);
        let sat = MaskLogits(gt.to_f64().mapv(|g| if g > 0.5 { 100.0 } else { -100.0 }));
        assert!(bce_mask(&sat, &gt).unwrap() < 1e-6);
        let huge = MaskLogits(gt.to_f64().mapv(|g| if g > 0.5 { -1e4 } else { 1e4 }));
        assert!(bce_mask(&huge, &gt).unwrap().is_finite());
        assert!(bce_mask(&MaskLogits(Mat::zeros((4, 3))), &gt).is_err());
    }

    #[test]
    fn bce_matches_pixel_oracle() {
        let z: Mat = array![[0.3, -1.2, 2.0, 0.0], [5.0, -0.7, 0.1, -3.0], [1.5, 1.5, -2.2, 0.9], [-0.4, 0.0, 0.8, -6.0]];
        let gt = BinaryMask::from_fn(4, 4, |y, x| (y * 4 + x) % 3 != 1);
        let mut sum = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let p = 1.0 / (1.0 + (-z[[y, x]]).exp());
                let g = f64::from(gt.get(y, x));
                sum -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
            }
        }
        let l = bce_mask(&MaskLogits(z), &gt).unwrap();
        assert!((l - sum / 16.0).abs() < 1e-9);
    }

    #[test]
    fn dice_identities_and_oracle() {
        let gt = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let sat = MaskLogits(gt.to_f64().mapv(|g| if g > 0.5 { 60.0 } else { -60.0 }));
        assert!(dice_mask(&sat, &gt, DICE_EPS).unwrap() <= 1e-6);
        let empty = BinaryMask::zeros(4, 4);
        let off = MaskLogits(Mat::from_elem((4, 4), -800.0));
        assert_eq!(dice_mask(&off, &empty, DICE_EPS).unwrap(), 0.0);

        let z = Array2::from_shape_fn((4, 4), |(y, x)| ((y * 7 + x * 3) % 5) as f64 - 2.0);
        let (mut i, mut p, mut g) = (0.0, 0.0, 0.0);
        for y in 0..4 {
            for x in 0..4 {
                let pv = 1.0 / (1.0 + (-z[[y, x]]).exp());
                let gv = if y < 2 { 1.0 } else { 0.0 };
                i += pv * gv;
                p += pv;
                g += gv;
            }
        }
        let expect = 1.0 - (2.0 * i + 1.0) / (p + g + 1.0);
        assert!((dice_mask(&MaskLogits(z), &gt, DICE_EPS).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn total_with_default_weights() {
        let w = LossWeights::default();
        let b = total_loss(1.0, 1.0, 1.0, &w).unwrap();
        assert_eq!(b.l_m, 2.5);
        assert_eq!(b.total, 3.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).unwrap().total, 0.0);
        let no_c = LossWeights { lambda_c: 0.0, ..w };
        assert_eq!(
            total_loss(7.0, 0.3, 0.2, &no_c).unwrap().total,
            total_loss(0.1, 0.3, 0.2, &no_c).unwrap().total
        );
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, &w), Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn losses_are_bounded(vals in proptest::collection::vec(-50.0f64..50.0, 16), bits in proptest::collection::vec(any::<bool>(), 16)) {
            let z = MaskLogits(Mat::from_shape_vec((4, 4), vals).unwrap());
            let gt = BinaryMask::from_fn(4, 4, |y, x| bits[y * 4 + x]);
            let bce = bce_mask(&z, &gt).unwrap();
            let dice = dice_mask(&z, &gt, DICE_EPS).unwrap();
            prop_assert!(bce >= 0.0 && bce.is_finite());
            prop_assert!((-1e-12..=1.0).contains(&dice));
        }

        #[test]
        fn total_is_linear_in_each_weight(l in (0.0f64..5.0, 0.0f64..5.0, 0.0f64..5.0), lc in 0.0f64..3.0, k in 0.0f64..3.0) {
            let w = LossWeights { lambda_c: lc, ..LossWeights::default() };
            let w2 = LossWeights { lambda_c: lc * k, ..w };
            let a = total_loss(l.0, l.1, l.2, &w).unwrap();
            let b = total_loss(l.0, l.1, l.2, &w2).unwrap();
            prop_assert!(((b.total - a.l_m) - k * (a.total - a.l_m)).abs() < 1e-9);
        }
    }
}
