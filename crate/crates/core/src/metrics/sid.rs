//! Motion-state diversity via k-means cluster entropy.
//!
//! Clusters are fit on ground-truth frames only; both ground truth and
//! generated frames are then assigned to those fixed clusters and compared by
//! the Shannon entropy (natural log) of their assignment histograms.

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

/// Default cluster count and Lloyd iterations used by the report.
pub const SID_K: usize = 8;
pub const SID_ITERS: usize = 50;

#[derive(Debug, Clone)]
pub struct KMeans {
    centroids: Vec<Vec<f64>>,
}

impl KMeans {
    /// Fit with seeded initialization: centroids start at k distinct frames
    /// chosen from a seeded shuffle. Fewer than k distinct frames is an input
    /// error.
    pub fn fit(frames: &Tensor, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
        let (n, d) = (frames.rows(), frames.cols());
        if n == 0 {
            return Err(Error::input("k-means on an empty frame set"));
        }
        if k == 0 {
            return Err(Error::input("k-means with k = 0"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(seed));
        let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
        for &i in &order {
            let row = frames.row(i).to_vec();
            if !centroids.iter().any(|c| c == &row) {
                centroids.push(row);
                if centroids.len() == k {
                    break;
                }
            }
        }
        if centroids.len() < k {
            return Err(Error::input(format!(
                "k-means needs {k} distinct frames, found {}",
                centroids.len()
            )));
        }

        let mut model = KMeans { centroids };
        for _ in 0..iters {
            let assign = model.assign(frames)?;
            let mut sums = vec![vec![0.0; d]; k];
            let mut counts = vec![0usize; k];
            for (i, &a) in assign.iter().enumerate() {
                counts[a] += 1;
                for c in 0..d {
                    sums[a][c] += frames.at(i, c);
                }
            }
            for j in 0..k {
                if counts[j] > 0 {
                    for c in 0..d {
                        model.centroids[j][c] = sums[j][c] / counts[j] as f64;
                    }
                }
                // Empty clusters keep their previous centroid.
            }
        }
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest-centroid assignment; ties go to the lowest cluster index.
    pub fn assign(&self, frames: &Tensor) -> Result<Vec<usize>> {
        let d = self.centroids[0].len();
        if frames.cols() != d {
            return Err(Error::input(format!(
                "k-means width mismatch: frames {} vs centroids {}",
                frames.cols(),
                d
            )));
        }
        let mut out = Vec::with_capacity(frames.rows());
        for r in 0..frames.rows() {
            let row = frames.row(r);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, c) in self.centroids.iter().enumerate() {
                let dist: f64 = row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }
}

/// Shannon entropy (nats) of the cluster-assignment histogram.
pub fn sid_entropy(assignments: &[usize], k: usize) -> f64 {
    if assignments.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    let n = assignments.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// |H(gen assignments) - H(gt assignments)| under clusters fit on gt frames.
pub fn delta_sid(
    gt_frames: &Tensor,
    gen_frames: &Tensor,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    let model = KMeans::fit(gt_frames, k, iters, seed)?;
    let h_gt = sid_entropy(&model.assign(gt_frames)?, k);
    let h_gen = sid_entropy(&model.assign(gen_frames)?, k);
    Ok((h_gen - h_gt).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::normal;
    use rand::Rng;

    /// Frames scattered tightly around k well-separated sites.
    fn clustered_frames(k: usize, per: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let sites: Vec<[f64; 3]> = (0..k)
            .map(|i| [10.0 * i as f64, -5.0 * i as f64, 3.0 * i as f64])
            .collect();
        let mut t = Tensor::zeros(&[k * per, 3]);
        for i in 0..k * per {
            let s = sites[i % k];
            for c in 0..3 {
                t.set(i, c, s[c] + 0.05 * normal(&mut rng));
            }
        }
        t
    }

    #[test]
    fn collapsed_generation_against_uniform_gt_is_ln_k() {
        // Noiseless sites: only 8 distinct frame values exist, so the
        // distinct-frame init lands exactly one centroid per site and the
        // ground-truth histogram is exactly uniform.
        let mut gt = Tensor::zeros(&[400, 3]);
        for r in 0..400 {
            let site = (r % 8) as f64;
            gt.set(r, 0, 10.0 * site);
            gt.set(r, 1, -5.0 * site);
            gt.set(r, 2, 3.0 * site);
        }
        // All generated frames sit on one site.
        let mut gen = Tensor::zeros(&[400, 3]);
        for r in 0..400 {
            gen.set(r, 0, 0.01);
        }
        let d = delta_sid(&gt, &gen, 8, SID_ITERS, 7).unwrap();
        assert!(
            (d - (8.0f64).ln()).abs() < 1e-9,
            "collapsed delta_sid {d}, ln 8 = {}",
            (8.0f64).ln()
        );
    }

    #[test]
    fn identical_sets_give_zero() {
        let gt = clustered_frames(8, 30, 2);
        assert_eq!(delta_sid(&gt, &gt, 8, SID_ITERS, 3).unwrap(), 0.0);
    }

    #[test]
    fn entropy_invariant_to_cluster_relabeling() {
        let mut rng = rng_from_seed(4);
        let assign: Vec<usize> = (0..500).map(|_| rng.gen_range(0..8)).collect();
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        let relabeled: Vec<usize> = assign.iter().map(|&a| perm[a]).collect();
        let h1 = sid_entropy(&assign, 8);
        let h2 = sid_entropy(&relabeled, 8);
        assert!((h1 - h2).abs() < 1e-12);
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let gt = clustered_frames(4, 40, 5);
        let a = KMeans::fit(&gt, 4, 50, 11).unwrap();
        let b = KMeans::fit(&gt, 4, 50, 11).unwrap();
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn too_few_distinct_frames_is_input_error() {
        let mut t = Tensor::zeros(&[10, 2]);
        for r in 0..10 {
            t.set(r, 0, (r % 3) as f64);
        }
        let err = KMeans::fit(&t, 8, 10, 0).unwrap_err();
        assert!(err.to_string().contains("distinct"), "{err}");
    }

    #[test]
    fn empty_input_is_input_error() {
        let t = Tensor::zeros(&[0, 3]);
        assert!(KMeans::fit(&t, 2, 10, 0).is_err());
    }
}
