//! Overall IoU, mean IoU and precision at IoU thresholds.

use crate::error::{CoreError, Result};

pub const THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];
pub const CSV_HEADER: &str = "oIoU,mIoU,Pr@0.5,Pr@0.7,Pr@0.9,n";

/// Intersection and union pixel counts of two binary masks.
pub fn overlap(pred: &[u8], gt: &[u8]) -> Result<(usize, usize)> {
    if pred.len() != gt.len() {
        return Err(CoreError::Tensor(sbanet_autograd::TensorError::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        ))));
    }
    let (mut inter, mut union) = (0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        if p > 1 || g > 1 {
            return Err(CoreError::Data("masks must be binary".into()));
        }
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    Ok((inter, union))
}

/// `|pred ∧ gt| / |pred ∨ gt|`, and 1 when both masks are empty.
pub fn iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub oiou: f64,
    pub miou: f64,
    /// `(threshold, fraction of samples with IoU > threshold)`.
    pub pr: Vec<(f64, f64)>,
    pub per_sample_iou: Vec<f64>,
    pub count: usize,
}

impl MetricsReport {
    pub fn precision_at(&self, t: f64) -> Option<f64> {
        self.pr.iter().find(|(x, _)| *x == t).map(|&(_, p)| p)
    }

    /// `oIoU,mIoU,Pr@0.5,Pr@0.7,Pr@0.9,n` values; precisions for thresholds
    /// the report lacks are left empty.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![format!("{:.6}", self.oiou), format!("{:.6}", self.miou)];
        for t in THRESHOLDS {
            cols.push(self.precision_at(t).map(|p| format!("{p:.6}")).unwrap_or_default());
        }
        cols.push(self.count.to_string());
        cols.join(",")
    }
}

/// Corpus metrics from `(prediction, ground truth)` pairs.
pub fn aggregate<P: AsRef<[u8]>, G: AsRef<[u8]>>(samples: &[(P, G)], thresholds: &[f64]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(CoreError::Contract("cannot aggregate metrics over zero samples".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(CoreError::Contract(format!("threshold {t} outside (0, 1)")));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    let mut per = Vec::with_capacity(samples.len());
    for (p, g) in samples {
        let (i, u) = overlap(p.as_ref(), g.as_ref())?;
        inter += i;
        union += u;
        per.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
    }
    let n = per.len() as f64;
    let miou = per.iter().sum::<f64>() / n;
    let oiou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let pr = thresholds.iter().map(|&t| (t, per.iter().filter(|&&v| v > t).count() as f64 / n)).collect();
    Ok(MetricsReport { oiou, miou, pr, per_sample_iou: per, count: samples.len() })
}
