//! Class-balanced binary cross-entropy and IoU evaluation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Loss of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    /// Background fraction `|T-| / (|T-| + |T+|)`, the weight of the
    /// foreground term.
    pub alpha: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Loss of a batch: the mean of the per-image losses.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub items: Vec<LossValue>,
}

/// Weighted BCE with the weight `alpha` computed per image:
///
/// `L = -alpha * sum_{T+} ln A - (1 - alpha) * sum_{T-} ln(1 - A)`
///
/// Returns the batch mean and its gradient with respect to `prediction`.
pub fn weighted_bce<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<(BatchLoss, Tensor<T>)> {
    prediction.check_same_shape(target)?;
    let n = *prediction
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("weighted_bce on a rank-0 tensor".into()))?;
    if n == 0 {
        return Err(Error::Shape("weighted_bce on an empty batch".into()));
    }
    let mut grad = Tensor::zeros(prediction.shape());
    let mut items = Vec::with_capacity(n);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let (a, t) = (prediction.item(i), target.item(i));
        let base = i * a.len();
        let mut n_pos = 0;
        for (p, &v) in t.iter().enumerate() {
            if v == T::one() {
                n_pos += 1;
            } else if v != T::zero() {
                return Err(Error::NonBinaryMask(base + p));
            }
        }
        let n_neg = t.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::DegenerateMask { item: i, n_pos, n_neg });
        }
        let alpha = n_neg as f64 / t.len() as f64;
        let mut total = 0.0;
        let g = grad.item_mut(i);
        for p in 0..a.len() {
            let raw = a[p].as_f64();
            let clamped = raw.clamp(EPS, 1.0 - EPS);
            let inside = raw > EPS && raw < 1.0 - EPS;
            if t[p] == T::one() {
                total -= alpha * clamped.ln();
                if inside {
                    g[p] = T::from_f64(-alpha / clamped * inv_n);
                }
            } else {
                total -= (1.0 - alpha) * (1.0 - clamped).ln();
                if inside {
                    g[p] = T::from_f64((1.0 - alpha) / (1.0 - clamped) * inv_n);
                }
            }
        }
        items.push(LossValue {
            total,
            alpha,
            n_pos,
            n_neg,
        });
    }
    let total = items.iter().map(|l| l.total).sum::<f64>() * inv_n;
    Ok((BatchLoss { total, items }, grad))
}

/// Binary mask with an explicit shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub shape: Vec<usize>,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::Shape(format!(
                "{} mask bits for shape {shape:?}",
                bits.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            bits,
        })
    }

    /// Reads a `{0, 1}` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let bits = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == T::one() {
                    Ok(true)
                } else if v == T::zero() {
                    Ok(false)
                } else {
                    Err(Error::NonBinaryMask(i))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(t.shape(), bits)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        Tensor::from_vec(&self.shape, data).expect("mask shape matches bits")
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `pixel >= threshold`, for a threshold in the open interval `(0, 1)`.
pub fn binarize<T: Scalar>(prediction: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    check_threshold(threshold)?;
    let bits = prediction
        .data()
        .iter()
        .map(|&v| v.as_f64() >= threshold)
        .collect();
    BinaryMask::new(prediction.shape(), bits)
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside the open interval (0, 1)"
        )))
    }
}

/// Foreground intersection over union; 1.0 when both masks are empty.
pub fn iou(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    if pred.shape != truth.shape {
        return Err(Error::Shape(format!(
            "iou: {:?} vs {:?}",
            pred.shape, truth.shape
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.bits.iter().zip(&truth.bits) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegMetrics {
    pub iou: f64,
    pub threshold: f64,
}

/// Per-subset means and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanIou {
    pub per_subset: Vec<(String, f64)>,
    pub overall: f64,
}

/// Mean within each group, then the mean of the group means.
pub fn mean_iou<S: AsRef<str>>(groups: &[(S, Vec<f64>)]) -> Result<MeanIou> {
    if groups.is_empty() {
        return Err(Error::EmptyGroup("no subsets".into()));
    }
    let mut per_subset = Vec::with_capacity(groups.len());
    for (name, values) in groups {
        if values.is_empty() {
            return Err(Error::EmptyGroup(name.as_ref().to_string()));
        }
        per_subset.push((
            name.as_ref().to_string(),
            values.iter().sum::<f64>() / values.len() as f64,
        ));
    }
    let overall = per_subset.iter().map(|(_, m)| m).sum::<f64>() / per_subset.len() as f64;
    Ok(MeanIou {
        per_subset,
        overall,
    })
}

/// One line of a metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode_id: usize,
    pub subset: String,
    pub class: String,
    pub iou: f64,
    pub loss: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}
