//! Multi-resolution hash-grid feature encoding for 2-D coordinates.
//!
//! Each level overlays the unit box with an N_l x N_l vertex lattice,
//! N_l = floor(N_min * b^l). A point gathers the four surrounding vertex
//! feature vectors and blends them bilinearly; the per-level results are
//! concatenated. Levels whose lattice fits in the table store vertices
//! densely; finer levels index through a spatial hash instead. The encoding
//! is linear in the table, so its backward pass is a plain scatter of the
//! same four weights.
//!
//! Reconstruction queries the same pixel coordinates every iteration, so the
//! corner indices and weights are computed once into an `EncodingPlan` and
//! reused for every gather/scatter.

use ndarray::Array2;
use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Hash-grid shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    /// Number of resolution levels.
    pub levels: usize,
    /// Feature channels per vertex.
    pub features: usize,
    /// log2 of the per-level table capacity.
    pub log2_table: u32,
    /// Vertices per axis at the coarsest level.
    pub base_resolution: usize,
    /// Per-level geometric growth factor of the resolution.
    pub growth: f64,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 16,
            features: 2,
            log2_table: 20,
            base_resolution: 16,
            growth: 1.19,
        }
    }
}

impl HashGridConfig {
    /// Vertices per axis at level `l`.
    pub fn level_resolution(&self, l: usize) -> usize {
        (self.base_resolution as f64 * self.growth.powi(l as i32)).floor() as usize
    }

    /// Table entries actually allocated for level `l`: the full lattice when
    /// it fits, otherwise the hash capacity.
    pub fn level_entries(&self, l: usize) -> usize {
        let res = self.level_resolution(l);
        (res * res).min(1usize << self.log2_table)
    }

    /// Entry offset of level `l` in the concatenated table.
    pub fn level_offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.level_entries(k)).sum()
    }

    /// Total vertex entries across levels.
    pub fn total_entries(&self) -> usize {
        self.level_offset(self.levels)
    }

    /// Length of the flat feature table.
    pub fn table_len(&self) -> usize {
        self.total_entries() * self.features
    }

    /// Dimension of the concatenated per-point feature vector.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    fn corner_entry(&self, l: usize, res: usize, i: usize, j: usize) -> u32 {
        let dense = res * res <= (1usize << self.log2_table);
        let local = if dense {
            (i * res + j) as u32
        } else {
            let h = (i as u32) ^ (j as u32).wrapping_mul(2_654_435_761);
            h & ((1u32 << self.log2_table) - 1)
        };
        self.level_offset(l) as u32 + local
    }
}

/// Precomputed gather/scatter pattern for a fixed list of query points:
/// four table entry indices and four bilinear weights per point per level.
#[derive(Debug, Clone)]
pub struct EncodingPlan<T> {
    cfg: HashGridConfig,
    points: usize,
    indices: Vec<u32>,
    weights: Vec<T>,
}

impl<T: Float> EncodingPlan<T> {
    pub fn build(cfg: &HashGridConfig, coords: &[[f64; 2]]) -> Self {
        let mut indices = Vec::with_capacity(coords.len() * cfg.levels * 4);
        let mut weights = Vec::with_capacity(coords.len() * cfg.levels * 4);
        // per-level offsets once, not per point
        let offsets: Vec<u32> = (0..cfg.levels).map(|l| cfg.level_offset(l) as u32).collect();
        for &[x, y] in coords {
            // coordinates in [-0.5, 0.5) map to the unit box; rotated-grid
            // corners that fall outside clamp to the boundary cell
            let u = (x + 0.5).clamp(0.0, 1.0);
            let v = (y + 0.5).clamp(0.0, 1.0);
            for l in 0..cfg.levels {
                let res = cfg.level_resolution(l);
                let px = u * (res - 1) as f64;
                let py = v * (res - 1) as f64;
                let i0 = (px.floor() as usize).min(res - 2);
                let j0 = (py.floor() as usize).min(res - 2);
                let fx = px - i0 as f64;
                let fy = py - j0 as f64;
                let level_entry = |i: usize, j: usize| {
                    cfg.corner_entry(l, res, i, j) - cfg.level_offset(l) as u32 + offsets[l]
                };
                indices.extend_from_slice(&[
                    level_entry(i0, j0),
                    level_entry(i0, j0 + 1),
                    level_entry(i0 + 1, j0),
                    level_entry(i0 + 1, j0 + 1),
                ]);
                let cast = |w: f64| T::from(w).unwrap();
                weights.extend_from_slice(&[
                    cast((1.0 - fx) * (1.0 - fy)),
                    cast((1.0 - fx) * fy),
                    cast(fx * (1.0 - fy)),
                    cast(fx * fy),
                ]);
            }
        }
        EncodingPlan {
            cfg: *cfg,
            points: coords.len(),
            indices,
            weights,
        }
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.cfg
    }

    /// Gathers features for all planned points: output (points, levels*F).
    pub fn encode(&self, table: &[T]) -> Array2<T> {
        assert_eq!(table.len(), self.cfg.table_len(), "table length mismatch");
        let f = self.cfg.features;
        let mut out = Array2::zeros((self.points, self.cfg.output_dim()));
        let out_slice = out.as_slice_mut().unwrap();
        let dim = self.cfg.output_dim();
        for p in 0..self.points {
            for l in 0..self.cfg.levels {
                let slot = p * self.cfg.levels + l;
                let idx = &self.indices[slot * 4..slot * 4 + 4];
                let wts = &self.weights[slot * 4..slot * 4 + 4];
                let dst = &mut out_slice[p * dim + l * f..p * dim + (l + 1) * f];
                for k in 0..4 {
                    let base = idx[k] as usize * f;
                    let w = wts[k];
                    for (d, &t) in dst.iter_mut().zip(&table[base..base + f]) {
                        *d = *d + w * t;
                    }
                }
            }
        }
        out
    }

    /// Scatters output-feature gradients back onto the table (accumulating).
    pub fn backprop(&self, d_out: &Array2<T>, grad_table: &mut [T]) {
        assert_eq!(d_out.dim(), (self.points, self.cfg.output_dim()));
        assert_eq!(grad_table.len(), self.cfg.table_len());
        let f = self.cfg.features;
        let dim = self.cfg.output_dim();
        let src_slice = d_out.as_slice().unwrap();
        for p in 0..self.points {
            for l in 0..self.cfg.levels {
                let slot = p * self.cfg.levels + l;
                let idx = &self.indices[slot * 4..slot * 4 + 4];
                let wts = &self.weights[slot * 4..slot * 4 + 4];
                let src = &src_slice[p * dim + l * f..p * dim + (l + 1) * f];
                for k in 0..4 {
                    let base = idx[k] as usize * f;
                    let w = wts[k];
                    for (t, &s) in grad_table[base..base + f].iter_mut().zip(src) {
                        *t = *t + w * s;
                    }
                }
            }
        }
    }
}
