//! Quantization codebook: nearest-centroid encoding of token feature rows.
//!
//! Centroid 0 is the all-zero silence token. Every other centroid carries
//! random "linguistic" content in the first half of its dims and a single
//! shared prosody level replicated across the prosody half, so the prosody
//! channel of a token is a readable scalar.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::consts::{LING_DIMS, PROSODY_DIMS, TOKEN_DIM, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{normal, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centroids: Tensor,
    pub prosody_dims: Range<usize>,
}

impl Codebook {
    /// Build the default synthetic codebook for a seed. Prosody levels are an
    /// even grid over (-0.96, 0.96), shuffled so the index→level map is not
    /// monotone.
    pub fn generate(seed: u64) -> Codebook {
        let mut rng = rng_from_seed(seed);
        let mut centroids = Tensor::zeros(&[VOCAB_SIZE, TOKEN_DIM]);
        let n_levels = VOCAB_SIZE - 1;
        let mut levels: Vec<f64> = (0..n_levels)
            .map(|i| -0.96 + 1.92 * i as f64 / (n_levels - 1) as f64)
            .collect();
        levels.shuffle(&mut rng);
        for j in 1..VOCAB_SIZE {
            for d in LING_DIMS {
                centroids.set(j, d, 0.7 * normal(&mut rng));
            }
            for d in PROSODY_DIMS {
                centroids.set(j, d, levels[j - 1]);
            }
        }
        Codebook {
            centroids,
            prosody_dims: PROSODY_DIMS,
        }
    }

    /// Wrap explicit centroids, enforcing pairwise distinctness and a valid
    /// prosody range.
    pub fn from_centroids(centroids: Tensor, prosody_dims: Range<usize>) -> Result<Codebook> {
        if centroids.shape.len() != 2 || centroids.rows() == 0 {
            return Err(Error::input("centroids must be a nonempty 2-D matrix"));
        }
        let d = centroids.cols();
        if prosody_dims.end > d || prosody_dims.start >= prosody_dims.end {
            return Err(Error::input(format!(
                "prosody dims {prosody_dims:?} outside centroid width {d}"
            )));
        }
        let v = centroids.rows();
        for a in 0..v {
            for b in (a + 1)..v {
                if (0..d).all(|k| centroids.at(a, k) == centroids.at(b, k)) {
                    return Err(Error::input(format!("centroids {a} and {b} are identical")));
                }
            }
        }
        Ok(Codebook {
            centroids,
            prosody_dims,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Mean of the prosody dims of centroid `j` — the token's prosody level.
    pub fn prosody_level(&self, j: u32) -> f64 {
        let row = j as usize;
        let n = (self.prosody_dims.end - self.prosody_dims.start) as f64;
        self.prosody_dims
            .clone()
            .map(|d| self.centroids.at(row, d))
            .sum::<f64>()
            / n
    }

    /// Nearest centroid per row under Euclidean distance, lowest index on ties.
    pub fn quantize(&self, features: &Tensor) -> Result<Vec<u32>> {
        if features.cols() != self.dim() || features.shape.len() != 2 {
            return Err(Error::input(format!(
                "feature width {} does not match codebook width {}",
                features.cols(),
                self.dim()
            )));
        }
        if features.rows() == 0 {
            return Err(Error::input("cannot quantize an empty feature matrix"));
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(features.rows());
        for r in 0..features.rows() {
            let mut best = 0u32;
            let mut best_d2 = f64::INFINITY;
            for j in 0..self.vocab_size() {
                let mut d2 = 0.0;
                for k in 0..d {
                    let diff = features.at(r, k) - self.centroids.at(j, k);
                    d2 += diff * diff;
                }
                // strict < keeps the lowest index on exact ties
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = j as u32;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Row `i` of the output is the centroid of `indices[i]`.
    pub fn dequantize(&self, indices: &[u32]) -> Result<Tensor> {
        let v = self.vocab_size();
        let d = self.dim();
        let mut out = Tensor::zeros(&[indices.len(), d]);
        for (r, &j) in indices.iter().enumerate() {
            if (j as usize) >= v {
                return Err(Error::input(format!(
                    "token index {j} outside codebook of {v}"
                )));
            }
            for k in 0..d {
                out.set(r, k, self.centroids.at(j as usize, k));
            }
        }
        Ok(out)
    }

    /// Nearest non-silence centroid by prosody level, lowest index on ties.
    pub fn nearest_to_prosody(&self, p: f64) -> u32 {
        let mut best = 1u32;
        let mut best_d = f64::INFINITY;
        for j in 1..self.vocab_size() {
            let d = (self.prosody_level(j as u32) - p).abs();
            if d < best_d {
                best_d = d;
                best = j as u32;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consts::SILENCE_INDEX;
    use proptest::prelude::*;

    fn two_centroid_book() -> Codebook {
        let c = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        Codebook::from_centroids(c, 0..2).unwrap()
    }

    #[test]
    fn quantize_hand_cases() {
        let cb = two_centroid_book();
        let f = Tensor::new(vec![3, 2], vec![0.1, 0.2, 1.0, 1.0, 0.5, 0.5]).unwrap();
        // nearest, exact hit, and the declared lowest-index tie rule
        assert_eq!(cb.quantize(&f).unwrap(), vec![0, 1, 0]);
    }

    #[test]
    fn quantize_rejects_width_mismatch() {
        let cb = two_centroid_book();
        let f = Tensor::zeros(&[1, 3]);
        assert!(cb.quantize(&f).is_err());
    }

    #[test]
    fn dequantize_lookup_and_range_check() {
        let cb = two_centroid_book();
        let m = cb.dequantize(&[1, 1, 0]).unwrap();
        assert_eq!(m.data, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(cb.dequantize(&[2]).is_err());
    }

    #[test]
    fn duplicate_centroids_rejected() {
        let c = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 0.0, 1.0]).unwrap();
        let e = Codebook::from_centroids(c, 0..2).unwrap_err();
        assert!(e.to_string().contains("identical"));
    }

    #[test]
    fn generated_book_is_valid_and_deterministic() {
        let a = Codebook::generate(11);
        let b = Codebook::generate(11);
        assert_eq!(a, b);
        assert_ne!(a, Codebook::generate(12));
        // silence row is all zeros, book passes its own distinctness check
        for d in 0..TOKEN_DIM {
            assert_eq!(a.centroids.at(SILENCE_INDEX as usize, d), 0.0);
        }
        Codebook::from_centroids(a.centroids.clone(), a.prosody_dims.clone()).unwrap();
    }

    #[test]
    fn prosody_lookup_recovers_exact_levels() {
        let cb = Codebook::generate(5);
        for j in [1u32, 7, 100, 255] {
            let p = cb.prosody_level(j);
            let hit = cb.nearest_to_prosody(p);
            // levels are distinct, so an exact level maps back to a centroid
            // holding that exact level
            assert_eq!(cb.prosody_level(hit), p);
        }
        assert_ne!(cb.nearest_to_prosody(-0.9), cb.nearest_to_prosody(0.9));
    }

    proptest! {
        #[test]
        fn quantize_inverts_dequantize_on_centroid_points(
            indices in proptest::collection::vec(0u32..256, 1..40)
        ) {
            let cb = Codebook::generate(3);
            let feats = cb.dequantize(&indices).unwrap();
            let back = cb.quantize(&feats).unwrap();
            prop_assert_eq!(back, indices);
        }
    }
}
