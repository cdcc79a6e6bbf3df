//! Multi-resolution feature grids over the contracted cube.
//!
//! The theta axis is periodic (the azimuth seam at 0/1 wraps); phi and rho
//! are clamped. Levels whose vertex count fits in the hash table are stored
//! dense and are collision-free; finer levels share storage through an
//! instant-NGP style spatial hash.

use serde::{Deserialize, Serialize};

use crate::config::GridConfig;
use crate::geom::ContractedPoint;

const HASH_P2: u64 = 2_654_435_761;
const HASH_P3: u64 = 805_459_861;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub resolution: usize,
    pub is_dense: bool,
    pub table_len: usize,
    /// Offset into the grid parameter block, in scalars.
    pub param_offset: usize,
}

/// Geometry of a multi-resolution grid; feature storage lives in the
/// model's flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub levels: Vec<LevelSpec>,
    pub features: usize,
    pub param_count: usize,
}

impl GridSpec {
    pub fn new(cfg: &GridConfig) -> GridSpec {
        let mut levels = Vec::with_capacity(cfg.levels);
        let mut offset = 0usize;
        let mut prev_res = 0usize;
        for l in 0..cfg.levels {
            let mut res = (cfg.base_resolution as f64 * cfg.growth_factor.powi(l as i32)).floor()
                as usize;
            if res <= prev_res {
                res = prev_res + 1;
            }
            prev_res = res;
            // theta has `res` distinct vertices (periodic), phi/rho res+1
            let vertex_count = res * (res + 1) * (res + 1);
            let is_dense = vertex_count <= cfg.hash_table_size;
            let table_len = if is_dense { vertex_count } else { cfg.hash_table_size };
            levels.push(LevelSpec {
                resolution: res,
                is_dense,
                table_len,
                param_offset: offset,
            });
            offset += table_len * cfg.features_per_level;
        }
        GridSpec {
            levels,
            features: cfg.features_per_level,
            param_count: offset,
        }
    }

    pub fn output_len(&self) -> usize {
        self.levels.len() * self.features
    }

    /// Scalar index of vertex (it, ip, ir) at `level`, relative to the
    /// grid parameter block.
    pub fn vertex_param_index(&self, level: usize, it: usize, ip: usize, ir: usize) -> usize {
        let spec = &self.levels[level];
        let res = spec.resolution;
        let slot = if spec.is_dense {
            (it * (res + 1) + ip) * (res + 1) + ir
        } else {
            let h = (it as u64)
                ^ (ip as u64).wrapping_mul(HASH_P2)
                ^ (ir as u64).wrapping_mul(HASH_P3);
            (h as usize) & (spec.table_len - 1)
        };
        spec.param_offset + slot * self.features
    }

    /// The 8 interpolation corners of `c` at `level`: (param index, weight).
    pub fn corners(&self, level: usize, c: &ContractedPoint) -> [(usize, f64); 8] {
        let res = self.levels[level].resolution;
        let resf = res as f64;

        let x = (c.theta.clamp(0.0, 1.0)) * resf;
        let xi = x.floor();
        let it0 = (xi as usize) % res;
        let it1 = (it0 + 1) % res;
        let wt = x - xi;

        let y = (c.phi.clamp(0.0, 1.0)) * resf;
        let ip0 = (y.floor() as usize).min(res - 1);
        let wp = y - ip0 as f64;

        let z = (c.rho.clamp(0.0, 1.0)) * resf;
        let ir0 = (z.floor() as usize).min(res - 1);
        let wr = z - ir0 as f64;

        let mut out = [(0usize, 0.0f64); 8];
        let mut k = 0;
        for (it, wx) in [(it0, 1.0 - wt), (it1, wt)] {
            for (ip, wy) in [(ip0, 1.0 - wp), (ip0 + 1, wp)] {
                for (ir, wz) in [(ir0, 1.0 - wr), (ir0 + 1, wr)] {
                    out[k] = (self.vertex_param_index(level, it, ip, ir), wx * wy * wz);
                    k += 1;
                }
            }
        }
        out
    }

    /// Trilinear encode at all levels; `out` has length `output_len()`.
    pub fn encode_into(&self, params: &[f64], c: &ContractedPoint, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.output_len());
        let f = self.features;
        for (l, chunk) in out.chunks_mut(f).enumerate() {
            chunk.fill(0.0);
            for (idx, w) in self.corners(l, c) {
                for j in 0..f {
                    chunk[j] += w * params[idx + j];
                }
            }
        }
    }

    /// Encode a single level; `out` has length `features`.
    pub fn encode_level_into(&self, params: &[f64], level: usize, c: &ContractedPoint, out: &mut [f64]) {
        let f = self.features;
        out[..f].fill(0.0);
        for (idx, w) in self.corners(level, c) {
            for j in 0..f {
                out[j] += w * params[idx + j];
            }
        }
    }

    /// Scatter `dout` (length `output_len()`) back onto the corner features.
    pub fn encode_backward(&self, c: &ContractedPoint, dout: &[f64], dparams: &mut [f64]) {
        let f = self.features;
        for (l, chunk) in dout.chunks(f).enumerate() {
            for (idx, w) in self.corners(l, c) {
                for j in 0..f {
                    dparams[idx + j] += w * chunk[j];
                }
            }
        }
    }
}
