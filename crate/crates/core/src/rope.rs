//! Rotary position embeddings.
//!
//! Dimension pairs are interleaved `(2k, 2k+1)` and rotated by
//! `angle(p, k) = p · theta^(−2k/head_dim)`.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use ndarray::{Array2, ArrayViewMut2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    theta: f64,
    head_dim: usize,
    max_positions: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(theta: f64, head_dim: usize, max_positions: usize) -> Result<RopeTable> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Argument(format!("head_dim {head_dim} must be even and positive")));
        }
        if !(theta > 0.0) {
            return Err(Error::Argument(format!("rope theta {theta} must be positive")));
        }
        let half = head_dim / 2;
        let inv_freq: Vec<f64> = (0..half)
            .map(|k| theta.powf(-((2 * k) as f64) / head_dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for &f in &inv_freq {
                let a = p as f64 * f;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        Ok(RopeTable {
            theta,
            head_dim,
            max_positions,
            cos,
            sin,
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn cos_sin(&self, position: usize, pair: usize) -> (f64, f64) {
        let i = position * (self.head_dim / 2) + pair;
        (self.cos[i], self.sin[i])
    }

    fn check(&self, positions: &[usize]) -> Result<()> {
        match positions.iter().find(|&&p| p >= self.max_positions) {
            Some(&p) => Err(Error::Range {
                position: p,
                max: self.max_positions,
            }),
            None => Ok(()),
        }
    }

    /// Rotates every head of every row in place. `inverse` rotates by the
    /// negated angle, which is the transpose needed for backpropagation.
    pub fn rotate_heads(
        &self,
        mut x: ArrayViewMut2<'_, f64>,
        positions: &[usize],
        inverse: bool,
    ) -> Result<()> {
        self.check(positions)?;
        if x.nrows() != positions.len() || x.ncols() % self.head_dim != 0 {
            return Err(Error::Argument(format!(
                "rope input {}×{} does not fit {} positions of head_dim {}",
                x.nrows(),
                x.ncols(),
                positions.len(),
                self.head_dim
            )));
        }
        let half = self.head_dim / 2;
        let heads = x.ncols() / self.head_dim;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (mut row, &p) in x.rows_mut().into_iter().zip(positions) {
            let cos = &self.cos[p * half..(p + 1) * half];
            let sin = &self.sin[p * half..(p + 1) * half];
            for h in 0..heads {
                let base = h * self.head_dim;
                for k in 0..half {
                    let (c, s) = (cos[k], sign * sin[k]);
                    let a = row[base + 2 * k];
                    let b = row[base + 2 * k + 1];
                    row[base + 2 * k] = a * c - b * s;
                    row[base + 2 * k + 1] = a * s + b * c;
                }
            }
        }
        Ok(())
    }
}

/// Rotates single-head vectors (`rows × head_dim`) to their positions.
pub fn apply_rope(vectors: &Array2<f64>, positions: &[usize], table: &RopeTable) -> Result<Array2<f64>> {
    if vectors.ncols() != table.head_dim() {
        return Err(Error::Argument(format!(
            "vector width {} ≠ head_dim {}",
            vectors.ncols(),
            table.head_dim()
        )));
    }
    let mut out = vectors.clone();
    table.rotate_heads(out.view_mut(), positions, false)?;
    Ok(out)
}

/// Tables keyed by theta, grown on demand. Regrowing recomputes every entry
/// from the same formula, so a larger table agrees bit-for-bit on the prefix.
#[derive(Debug, Default)]
pub struct RopeCache {
    head_dim: usize,
    tables: RwLock<HashMap<u64, Arc<RopeTable>>>,
}

impl RopeCache {
    pub fn new(head_dim: usize) -> Self {
        RopeCache {
            head_dim,
            tables: RwLock::new(HashMap::new()),
        }
    }

    pub fn get(&self, theta: f64, min_positions: usize) -> Result<Arc<RopeTable>> {
        let key = theta.to_bits();
        if let Some(t) = self.tables.read().unwrap().get(&key) {
            if t.max_positions() >= min_positions {
                return Ok(t.clone());
            }
        }
        let mut tables = self.tables.write().unwrap();
        if let Some(t) = tables.get(&key) {
            if t.max_positions() >= min_positions {
                return Ok(t.clone());
            }
        }
        let size = min_positions.next_power_of_two().max(64);
        let t = Arc::new(RopeTable::new(theta, self.head_dim, size)?);
        tables.insert(key, t.clone());
        Ok(t)
    }
}

impl Clone for RopeCache {
    fn clone(&self) -> Self {
        RopeCache {
            head_dim: self.head_dim,
            tables: RwLock::new(self.tables.read().unwrap().clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn position_zero_is_identity() {
        let t = RopeTable::new(10_000.0, 8, 4).unwrap();
        let v = array![[0.3, -1.2, 5.0, 0.25, 1e-9, 7.0, -3.0, 2.0]];
        assert_eq!(apply_rope(&v, &[0], &t).unwrap(), v);
    }

    #[test]
    fn first_pair_at_position_one_rotates_one_radian() {
        let t = RopeTable::new(10_000.0, 4, 2).unwrap();
        let v = array![[1.0, 0.0, 0.0, 0.0]];
        let r = apply_rope(&v, &[1], &t).unwrap();
        assert!((r[[0, 0]] - 1f64.cos()).abs() < 1e-15);
        assert!((r[[0, 1]] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_position() {
        let t = RopeTable::new(10_000.0, 4, 2).unwrap();
        let v = Array2::zeros((1, 4));
        assert!(matches!(apply_rope(&v, &[2], &t), Err(Error::Range { position: 2, max: 2 })));
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = RopeTable::new(160_000.0, 64, 100).unwrap();
        let b = RopeTable::new(160_000.0, 64, 300).unwrap();
        assert_eq!(a, RopeTable::new(160_000.0, 64, 100).unwrap());
        for p in 0..100 {
            for k in 0..32 {
                assert_eq!(a.cos_sin(p, k), b.cos_sin(p, k));
            }
        }
    }

    #[test]
    fn rotation_preserves_norm_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = RopeTable::new(10_000.0, 16, 64).unwrap();
        let v = Array2::from_shape_fn((5, 32), |_| rng.random_range(-1.0..1.0));
        let pos = [0, 3, 17, 40, 63];
        let mut r = v.clone();
        t.rotate_heads(r.view_mut(), &pos, false).unwrap();
        for (a, b) in v.rows().into_iter().zip(r.rows()) {
            assert!((a.dot(&a) - b.dot(&b)).abs() < 1e-12);
        }
        t.rotate_heads(r.view_mut(), &pos, true).unwrap();
        assert!(r.iter().zip(v.iter()).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn cache_grows_on_demand() {
        let c = RopeCache::new(8);
        let small = c.get(10_000.0, 10).unwrap();
        let big = c.get(10_000.0, 1000).unwrap();
        assert!(big.max_positions() >= 1000);
        assert_eq!(small.cos_sin(9, 3), big.cos_sin(9, 3));
    }
}
