//! Two-class mIoU and pixel F1 with the edited class as positive.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::BinaryMask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(invalid!("prediction {:?} and ground truth {:?} differ in shape", pred.dim(), gt.dim()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.0.iter().zip(gt.0.iter()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn iou_edited(c: &ConfusionCounts) -> f64 {
    ratio_or_one(c.tp, c.tp + c.fp + c.fn_)
}

pub fn iou_authentic(c: &ConfusionCounts) -> f64 {
    ratio_or_one(c.tn, c.tn + c.fn_ + c.fp)
}

pub fn miou(c: &ConfusionCounts) -> f64 {
    (iou_edited(c) + iou_authentic(c)) / 2.0
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio_or_one(c.tp, c.tp + c.fp)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio_or_one(c.tp, c.tp + c.fn_)
}

/// Equivalent to `2PR / (P + R)`, written as `2tp / (2tp + fp + fn)` so the
/// degenerate cases need no special handling beyond `tp = fp = fn = 0`.
pub fn f1(c: &ConfusionCounts) -> f64 {
    ratio_or_one(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Metrics per image, then the arithmetic mean.
    #[default]
    PerImage,
    /// Counts summed over the split, then one set of metrics.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    pub iou_edited: f64,
    pub iou_authentic: f64,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ImageMetrics {
    pub fn from_counts(id: impl Into<String>, c: ConfusionCounts) -> Self {
        Self {
            id: id.into(),
            counts: c,
            iou_edited: iou_edited(&c),
            iou_authentic: iou_authentic(&c),
            miou: miou(&c),
            precision: precision(&c),
            recall: recall(&c),
            f1: f1(&c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub miou: f64,
    pub f1: f64,
    pub iou_edited: f64,
    pub iou_authentic: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub reduction: Reduction,
    pub images: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Scores each prediction against the ground truth with the same id.
/// Records come out sorted by id.
pub fn evaluate_split(
    split: &str,
    predictions: &BTreeMap<String, BinaryMask>,
    gts: &BTreeMap<String, BinaryMask>,
    reduction: Reduction,
) -> Result<MetricsReport> {
    if let Some(extra) = predictions.keys().find(|k| !gts.contains_key(*k)) {
        return Err(Error::MissingSample(format!("prediction `{extra}` has no ground truth")));
    }
    let mut images = Vec::with_capacity(gts.len());
    for (id, gt) in gts {
        let pred = predictions
            .get(id)
            .ok_or_else(|| Error::MissingSample(format!("no prediction for `{id}`")))?;
        images.push(ImageMetrics::from_counts(id.clone(), confusion(pred, gt)?));
    }
    let aggregate = aggregate(&images, reduction);
    Ok(MetricsReport {
        split: split.to_string(),
        reduction,
        images,
        aggregate,
    })
}

pub fn aggregate(images: &[ImageMetrics], reduction: Reduction) -> Aggregate {
    if images.is_empty() {
        return Aggregate::default();
    }
    match reduction {
        Reduction::PerImage => {
            let n = images.len() as f64;
            let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
            Aggregate {
                miou: mean(|m| m.miou),
                f1: mean(|m| m.f1),
                iou_edited: mean(|m| m.iou_edited),
                iou_authentic: mean(|m| m.iou_authentic),
                precision: mean(|m| m.precision),
                recall: mean(|m| m.recall),
            }
        }
        Reduction::Pooled => {
            let c = images
                .iter()
                .fold(ConfusionCounts::default(), |acc, m| acc + m.counts);
            Aggregate {
                miou: miou(&c),
                f1: f1(&c),
                iou_edited: iou_edited(&c),
                iou_authentic: iou_authentic(&c),
                precision: precision(&c),
                recall: recall(&c),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn confusion_simple_cases() {
        let gt = BinaryMask::from_fn(4, 4, |y, x| y * 4 + x < 5);
        assert_eq!(confusion(&gt, &gt).unwrap(), counts(5, 0, 0, 11));
        let inv = BinaryMask(gt.0.mapv(|v| 1 - v));
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&BinaryMask::zeros(4, 3), &gt).is_err());
    }

    #[test]
    fn hand_arithmetic() {
        let c = counts(2, 1, 1, 12);
        assert_eq!(iou_edited(&c), 0.5);
        assert!((iou_authentic(&c) - 12.0 / 14.0).abs() < 1e-15);
        assert!((miou(&c) - (0.5 + 12.0 / 14.0) / 2.0).abs() < 1e-15);
        assert!((f1(&c) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_conventions() {
        assert_eq!(miou(&counts(0, 0, 0, 16)), 1.0);
        assert_eq!(f1(&counts(0, 0, 0, 16)), 1.0);
        assert_eq!(f1(&counts(0, 3, 0, 13)), 0.0);
        assert_eq!(miou(&counts(4, 0, 0, 12)), 1.0);
    }

    #[test]
    fn aggregate_is_mean_and_ids_must_align() {
        let gt = BinaryMask::from_fn(2, 2, |y, _| y == 0);
        let half = BinaryMask::from_fn(2, 2, |y, x| y == 0 && x == 0);
        let mut preds = BTreeMap::new();
        let mut gts = BTreeMap::new();
        preds.insert("a".to_string(), gt.clone());
        gts.insert("a".to_string(), gt.clone());
        preds.insert("b".to_string(), half);
        gts.insert("b".to_string(), gt.clone());
        let r = evaluate_split("s", &preds, &gts, Reduction::PerImage).unwrap();
        // b: tp 1, fp 0, fn 1, tn 2 -> (1/2 + 2/3) / 2
        let b = (0.5 + 2.0 / 3.0) / 2.0;
        assert!((r.aggregate.miou - (1.0 + b) / 2.0).abs() < 1e-15);
        preds.remove("b");
        assert!(matches!(
            evaluate_split("s", &preds, &gts, Reduction::PerImage),
            Err(Error::MissingSample(_))
        ));
        preds.insert("b".into(), gt.clone());
        preds.insert("c".into(), gt);
        assert!(evaluate_split("s", &preds, &gts, Reduction::PerImage).is_err());
    }

    proptest! {
        #[test]
        fn bounds_and_iou_below_f1(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
            let c = counts(tp, fp, fn_, tn);
            for v in [miou(&c), f1(&c), iou_edited(&c), iou_authentic(&c)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(iou_edited(&c) <= f1(&c) + 1e-15);
        }

        #[test]
        fn aggregate_ignores_order(bits in proptest::collection::vec(any::<u8>(), 5 * 9), rot in 0usize..5) {
            let ims: Vec<ImageMetrics> = (0..5)
                .map(|i| {
                    let c = counts(
                        u64::from(bits[i * 9] % 7),
                        u64::from(bits[i * 9 + 1] % 7),
                        u64::from(bits[i * 9 + 2] % 7),
                        u64::from(bits[i * 9 + 3] % 7),
                    );
                    ImageMetrics::from_counts(i.to_string(), c)
                })
                .collect();
            let mut rotated = ims.clone();
            rotated.rotate_left(rot);
            for red in [Reduction::PerImage, Reduction::Pooled] {
                let a = aggregate(&ims, red);
                let b = aggregate(&rotated, red);
                prop_assert!((a.miou - b.miou).abs() < 1e-12 && (a.f1 - b.f1).abs() < 1e-12);
            }
        }
    }
}
