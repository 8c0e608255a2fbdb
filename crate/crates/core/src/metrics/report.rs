//! Corpus-level metric table: {FD, RPCC, dSID, dVar} x {Exp, Pose}.
//!
//! Inputs are per-dialogue motion-track pairs (participant 1, participant 2);
//! generated and ground-truth corpora must align sample-by-sample. Frame
//! pools, cluster fits, and correlations are split into expression and pose
//! dimension groups before anything is computed.

use super::frechet::{frechet_distance, GaussianSummary};
use super::sid::{KMeans, SID_ITERS, SID_K};
use super::{delta_var, rpcc, sid_entropy, slice_dims};
use crate::consts::{EXPR_DIMS, POSE_DIMS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub fd: f64,
    pub rpcc: f64,
    pub delta_sid: f64,
    pub delta_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub expression: MetricRow,
    pub pose: MetricRow,
}

impl MetricRow {
    pub fn is_finite(&self) -> bool {
        self.fd.is_finite()
            && self.rpcc.is_finite()
            && self.delta_sid.is_finite()
            && self.delta_var.is_finite()
    }
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        self.expression.is_finite() && self.pose.is_finite()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,FD,RPCC,dSID,dVar\n");
        for (name, row) in [("Exp", &self.expression), ("Pose", &self.pose)] {
            s.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9}\n",
                name, row.fd, row.rpcc, row.delta_sid, row.delta_var
            ));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| group | FD | RPCC | \u{394}SID | \u{394}Var |\n|---|---|---|---|---|\n");
        for (name, row) in [("Exp", &self.expression), ("Pose", &self.pose)] {
            s.push_str(&format!(
                "| {} | {:.6} | {:.6} | {:.6} | {:.6} |\n",
                name, row.fd, row.rpcc, row.delta_sid, row.delta_var
            ));
        }
        s
    }
}

fn pool(tracks: &[[Tensor; 2]], dims: std::ops::Range<usize>) -> Result<Tensor> {
    let mut parts: Vec<Tensor> = Vec::new();
    for pair in tracks {
        for t in pair {
            parts.push(slice_dims(t, dims.clone()));
        }
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

fn group_row(
    gen: &[[Tensor; 2]],
    gt: &[[Tensor; 2]],
    dims: std::ops::Range<usize>,
    seed: u64,
) -> Result<MetricRow> {
    let gen_pool = pool(gen, dims.clone())?;
    let gt_pool = pool(gt, dims.clone())?;

    let fd = frechet_distance(
        &GaussianSummary::from_frames(&gen_pool)?,
        &GaussianSummary::from_frames(&gt_pool)?,
    )?;

    // RPCC per (dialogue, listener role), partner's ground truth as speaker.
    let mut rp = 0.0;
    let mut n = 0usize;
    for (g, t) in gen.iter().zip(gt) {
        for role in 0..2 {
            let gen_l = slice_dims(&g[role], dims.clone());
            let gt_l = slice_dims(&t[role], dims.clone());
            let spk = slice_dims(&t[1 - role], dims.clone());
            rp += rpcc(&gen_l, &gt_l, &spk)?;
            n += 1;
        }
    }
    let rp = if n > 0 { rp / n as f64 } else { 0.0 };

    let km = KMeans::fit(&gt_pool, SID_K, SID_ITERS, seed)?;
    let h_gt = sid_entropy(&km.assign(&gt_pool)?, SID_K);
    let h_gen = sid_entropy(&km.assign(&gen_pool)?, SID_K);

    Ok(MetricRow {
        fd,
        rpcc: rp,
        delta_sid: (h_gen - h_gt).abs(),
        delta_var: delta_var(&gen_pool, &gt_pool)?,
    })
}

/// Compare generated motion against ground truth, one row per dim group.
pub fn metric_report(
    gen: &[[Tensor; 2]],
    gt: &[[Tensor; 2]],
    seed: u64,
) -> Result<MetricReport> {
    if gen.len() != gt.len() {
        return Err(Error::input(format!(
            "metric_report sample count mismatch: gen {} vs gt {}",
            gen.len(),
            gt.len()
        )));
    }
    if gen.is_empty() {
        return Err(Error::input("metric_report over zero samples"));
    }
    for (i, (g, t)) in gen.iter().zip(gt).enumerate() {
        for role in 0..2 {
            if g[role].shape() != t[role].shape() {
                return Err(Error::input(format!(
                    "sample {i} role {role}: gen {:?} vs gt {:?}",
                    g[role].shape(),
                    t[role].shape()
                )));
            }
        }
    }
    Ok(MetricReport {
        expression: group_row(gen, gt, EXPR_DIMS, seed)?,
        pose: group_row(gen, gt, POSE_DIMS, seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consts::LATENT_DIM;
    use crate::rng::rng_from_seed;

    fn tracks(n: usize, f: usize, seed: u64) -> Vec<[Tensor; 2]> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                [
                    Tensor::rand_normal(&[f, LATENT_DIM], &mut rng),
                    Tensor::rand_normal(&[f, LATENT_DIM], &mut rng),
                ]
            })
            .collect()
    }

    #[test]
    fn gt_vs_gt_is_all_zero() {
        let gt = tracks(6, 40, 1);
        let rep = metric_report(&gt, &gt, 5).unwrap();
        for row in [&rep.expression, &rep.pose] {
            assert!(row.fd.abs() < 1e-6, "fd {}", row.fd);
            assert_eq!(row.rpcc, 0.0);
            assert_eq!(row.delta_sid, 0.0);
            assert_eq!(row.delta_var, 0.0);
        }
        assert!(rep.is_finite());
    }

    #[test]
    fn mismatched_counts_rejected() {
        let gt = tracks(4, 20, 2);
        let gen = tracks(3, 20, 3);
        assert!(metric_report(&gen, &gt, 0).is_err());
    }

    #[test]
    fn csv_layout_is_fixed_and_deterministic() {
        let gt = tracks(4, 30, 4);
        let gen = tracks(4, 30, 5);
        let rep1 = metric_report(&gen, &gt, 9).unwrap();
        let rep2 = metric_report(&gen, &gt, 9).unwrap();
        let csv = rep1.to_csv();
        assert_eq!(csv, rep2.to_csv(), "same inputs must render identical bytes");
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "group,FD,RPCC,dSID,dVar");
        assert!(lines.next().unwrap().starts_with("Exp,"));
        assert!(lines.next().unwrap().starts_with("Pose,"));
        assert!(rep1.to_markdown().contains("| Exp |"));
    }

    #[test]
    fn degraded_generation_scores_worse_than_gt() {
        let gt = tracks(5, 60, 6);
        // Collapse generated motion to near-constant: FD and dVar must move.
        let gen: Vec<[Tensor; 2]> = gt
            .iter()
            .map(|pair| [pair[0].scale(0.05), pair[1].scale(0.05)])
            .collect();
        let rep = metric_report(&gen, &gt, 7).unwrap();
        assert!(rep.expression.fd > 1.0, "fd {}", rep.expression.fd);
        assert!(rep.expression.delta_var > 0.5, "dvar {}", rep.expression.delta_var);
    }
}
