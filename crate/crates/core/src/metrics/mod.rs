//! Distribution and correlation statistics for generated motion.
//!
//! Scalar conventions used throughout: Pearson of anything against a constant
//! sequence is defined as 0, variances are population variances (divide by n),
//! and every public entry point validates shapes before computing.

mod frechet;
mod report;
mod sid;

pub use frechet::{frechet_distance, GaussianSummary};
pub use report::{metric_report, MetricReport, MetricRow};
pub use sid::{delta_sid, sid_entropy, KMeans};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor below which a sequence counts as constant.
const CONST_VAR_EPS: f64 = 1e-24;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Pearson correlation; constant inputs (either side) give 0 by convention.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "pearson length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::input("pearson of empty sequences"));
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    let n = a.len() as f64;
    let (va, vb) = (va / n, vb / n);
    if va < CONST_VAR_EPS * (1.0 + ma * ma) || vb < CONST_VAR_EPS * (1.0 + mb * mb) {
        return Ok(0.0);
    }
    Ok((cov / n / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Residual-prosody cross correlation: mean over dims of
/// |pearson(gen_d - gt_d, speaker_d)|. All three tracks must share the same
/// frame count and width; slice dims before calling for pose/expression rows.
pub fn rpcc(gen: &Tensor, gt: &Tensor, speaker: &Tensor) -> Result<f64> {
    if gen.shape() != gt.shape() || gen.shape() != speaker.shape() {
        return Err(Error::input(format!(
            "rpcc shape mismatch: gen {:?}, gt {:?}, speaker {:?}",
            gen.shape(),
            gt.shape(),
            speaker.shape()
        )));
    }
    let (f, d) = (gen.rows(), gen.cols());
    if f == 0 || d == 0 {
        return Err(Error::input("rpcc of empty tracks"));
    }
    let mut acc = 0.0;
    for dim in 0..d {
        let resid: Vec<f64> = (0..f).map(|r| gen.at(r, dim) - gt.at(r, dim)).collect();
        let spk: Vec<f64> = (0..f).map(|r| speaker.at(r, dim)).collect();
        acc += pearson(&resid, &spk)?.abs();
    }
    Ok(acc / d as f64)
}

/// Absolute difference of mean per-dimension variance between two frame sets.
pub fn delta_var(gen: &Tensor, gt: &Tensor) -> Result<f64> {
    if gen.cols() != gt.cols() {
        return Err(Error::input(format!(
            "delta_var width mismatch: {} vs {}",
            gen.cols(),
            gt.cols()
        )));
    }
    if gen.rows() == 0 || gt.rows() == 0 {
        return Err(Error::input("delta_var of empty frame sets"));
    }
    let mean_var = |t: &Tensor| -> f64 {
        let d = t.cols();
        (0..d)
            .map(|c| {
                let col: Vec<f64> = (0..t.rows()).map(|r| t.at(r, c)).collect();
                variance(&col)
            })
            .sum::<f64>()
            / d as f64
    };
    Ok((mean_var(gen) - mean_var(gt)).abs())
}

/// Keep only the columns in `dims` of a frame matrix.
pub fn slice_dims(t: &Tensor, dims: std::ops::Range<usize>) -> Tensor {
    let f = t.rows();
    let w = dims.len();
    let mut out = Tensor::zeros(&[f, w]);
    for r in 0..f {
        for (i, c) in dims.clone().enumerate() {
            out.set(r, i, t.at(r, c));
        }
    }
    out
}
