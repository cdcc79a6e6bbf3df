//! One local radiance field: spherical feature grids, density/color MLPs,
//! a proposal field, an occupancy grid, and its optimizer state.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FieldConfig, OptimConfig};
use crate::error::{Error, Result};
use crate::geom::{from_contracted, to_contracted, ContractedPoint, Pose};
use crate::grid::GridSpec;
use crate::mlp::{mlp_forward, softplus, sigmoid, MlpCache, MlpSpec};

/// Flat parameter layout: [grid | proposal grid | density MLP | color MLP
/// | proposal MLP].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub grid: GridSpec,
    pub proposal_grid: GridSpec,
    pub density_mlp: MlpSpec,
    pub color_mlp: MlpSpec,
    pub proposal_mlp: MlpSpec,
    pub grid_offset: usize,
    pub proposal_grid_offset: usize,
    pub density_mlp_offset: usize,
    pub color_mlp_offset: usize,
    pub proposal_mlp_offset: usize,
    pub total: usize,
}

impl ModelLayout {
    pub fn new(cfg: &FieldConfig) -> ModelLayout {
        let grid = GridSpec::new(&cfg.grid);
        let proposal_grid = GridSpec::new(&cfg.proposal_grid);
        let density_mlp = MlpSpec::new(grid.output_len(), &cfg.density_hidden, 1 + cfg.geo_features);
        let color_mlp = MlpSpec::new(cfg.geo_features + 3, &cfg.color_hidden, 3);
        let proposal_mlp = MlpSpec::new(proposal_grid.output_len(), &cfg.proposal_hidden, 1);

        let grid_offset = 0;
        let proposal_grid_offset = grid_offset + grid.param_count;
        let density_mlp_offset = proposal_grid_offset + proposal_grid.param_count;
        let color_mlp_offset = density_mlp_offset + density_mlp.param_count;
        let proposal_mlp_offset = color_mlp_offset + color_mlp.param_count;
        let total = proposal_mlp_offset + proposal_mlp.param_count;
        ModelLayout {
            grid,
            proposal_grid,
            density_mlp,
            color_mlp,
            proposal_mlp,
            grid_offset,
            proposal_grid_offset,
            density_mlp_offset,
            color_mlp_offset,
            proposal_mlp_offset,
            total,
        }
    }

    /// Grid feature parameters come first; everything at or past this
    /// boundary is an MLP parameter (different learning rate).
    pub fn mlp_boundary(&self) -> usize {
        self.density_mlp_offset
    }
}

/// Adam moments for the full parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One Adam step; grid features and MLP parameters use separate rates.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        cfg: &OptimConfig,
        mlp_boundary: usize,
    ) {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let lr = if i < mlp_boundary { cfg.lr_grid } else { cfg.lr_mlp };
            params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// 16^3 (by default) boolean occupancy grid over contracted space.
/// Cells are only ever set, never cleared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(resolution: usize) -> OccupancyGrid {
        OccupancyGrid {
            resolution,
            cells: vec![false; resolution * resolution * resolution],
        }
    }

    pub fn cell_index(&self, c: &ContractedPoint) -> usize {
        let r = self.resolution;
        let clamp = |v: f64| ((v * r as f64) as usize).min(r - 1);
        (clamp(c.theta) * r + clamp(c.phi)) * r + clamp(c.rho)
    }

    pub fn is_occupied(&self, c: &ContractedPoint) -> bool {
        self.cells[self.cell_index(c)]
    }

    pub fn set_all(&mut self) {
        self.cells.fill(true);
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }
}

/// One local radiance field anchored at a keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFieldModel {
    pub id: u64,
    pub anchor_keyframe: u64,
    pub config: FieldConfig,
    pub layout: ModelLayout,
    pub params: Vec<f64>,
    pub occupancy: OccupancyGrid,
    pub training_frames: BTreeSet<u64>,
    pub opt: AdamState,
}

/// Reusable per-thread evaluation buffers.
pub struct FieldEval {
    pub feat: Vec<f64>,
    pub prop_feat: Vec<f64>,
    pub color_in: Vec<f64>,
    pub density_cache: MlpCache,
    pub color_cache: MlpCache,
    pub proposal_cache: MlpCache,
}

impl FieldEval {
    pub fn new(layout: &ModelLayout) -> FieldEval {
        FieldEval {
            feat: vec![0.0; layout.grid.output_len()],
            prop_feat: vec![0.0; layout.proposal_grid.output_len()],
            color_in: vec![0.0; layout.color_mlp.input_dim()],
            density_cache: MlpCache::for_spec(&layout.density_mlp),
            color_cache: MlpCache::for_spec(&layout.color_mlp),
            proposal_cache: MlpCache::for_spec(&layout.proposal_mlp),
        }
    }
}

pub fn init_model(id: u64, anchor_keyframe: u64, cfg: &FieldConfig, rng_seed: u64) -> LocalFieldModel {
    let layout = ModelLayout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut params = vec![0.0; layout.total];
    let s = cfg.grid_init_scale;
    for p in params[..layout.mlp_boundary()].iter_mut() {
        *p = rng.gen::<f64>() * 2.0 * s - s;
    }
    init_mlp_params(&layout.density_mlp, &mut params[layout.density_mlp_offset..], &mut rng);
    init_mlp_params(&layout.color_mlp, &mut params[layout.color_mlp_offset..], &mut rng);
    init_mlp_params(&layout.proposal_mlp, &mut params[layout.proposal_mlp_offset..], &mut rng);

    let total = layout.total;
    let mut training_frames = BTreeSet::new();
    training_frames.insert(anchor_keyframe);
    LocalFieldModel {
        id,
        anchor_keyframe,
        occupancy: OccupancyGrid::new(cfg.occupancy_resolution),
        config: cfg.clone(),
        layout,
        params,
        training_frames,
        opt: AdamState::new(total),
    }
}

/// Fan-in scaled uniform init, zero biases.
fn init_mlp_params(spec: &MlpSpec, params: &mut [f64], rng: &mut impl Rng) {
    let mut offset = 0;
    for &(din, dout) in &spec.layers {
        let bound = 1.0 / (din as f64).sqrt();
        for p in params[offset..offset + din * dout].iter_mut() {
            *p = rng.gen::<f64>() * 2.0 * bound - bound;
        }
        // biases stay zero
        offset += din * dout + dout;
    }
}

impl LocalFieldModel {
    /// Main field: (density, rgb) at a contracted point and view direction.
    pub fn query(&self, c: &ContractedPoint, view_dir: &Vector3<f64>, ev: &mut FieldEval) -> (f64, [f64; 3]) {
        let lay = &self.layout;
        let gp = &self.params[lay.grid_offset..lay.grid_offset + lay.grid.param_count];
        lay.grid.encode_into(gp, c, &mut ev.feat);
        mlp_forward(
            &lay.density_mlp,
            &self.params[lay.density_mlp_offset..lay.density_mlp_offset + lay.density_mlp.param_count],
            &ev.feat,
            &mut ev.density_cache,
        );
        let raw = ev.density_cache.output()[0];
        let sigma = softplus(raw);
        let geo = self.config.geo_features;
        ev.color_in[..geo].copy_from_slice(&ev.density_cache.output()[1..1 + geo]);
        ev.color_in[geo] = view_dir.x;
        ev.color_in[geo + 1] = view_dir.y;
        ev.color_in[geo + 2] = view_dir.z;
        mlp_forward(
            &lay.color_mlp,
            &self.params[lay.color_mlp_offset..lay.color_mlp_offset + lay.color_mlp.param_count],
            &ev.color_in,
            &mut ev.color_cache,
        );
        let out = ev.color_cache.output();
        (sigma, [sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])])
    }

    /// Proposal field: density only.
    pub fn query_proposal(&self, c: &ContractedPoint, ev: &mut FieldEval) -> f64 {
        let lay = &self.layout;
        let gp = &self.params
            [lay.proposal_grid_offset..lay.proposal_grid_offset + lay.proposal_grid.param_count];
        lay.proposal_grid.encode_into(gp, c, &mut ev.prop_feat);
        mlp_forward(
            &lay.proposal_mlp,
            &self.params
                [lay.proposal_mlp_offset..lay.proposal_mlp_offset + lay.proposal_mlp.param_count],
            &ev.prop_feat,
            &mut ev.proposal_cache,
        );
        softplus(ev.proposal_cache.output()[0])
    }

    /// Mark cells holding samples whose rendering weight exceeds w_occ.
    pub fn mark_occupancy(&mut self, samples: &[(ContractedPoint, f64)]) {
        for (c, w) in samples {
            if *w > self.config.w_occ {
                let idx = self.occupancy.cell_index(c);
                self.occupancy.cells[idx] = true;
            }
        }
    }

    pub fn param_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in &self.params {
            h ^= p.to_bits();
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

/// Initialize `target` from a trained neighbor: dense (collision-free) grid
/// levels are resampled through the relative transform, hash levels keep
/// their fresh initialization, and all MLP weights are copied verbatim.
///
/// `relative_pose` maps target-local coordinates into the source frame.
pub fn propagate_features(
    source: &LocalFieldModel,
    target: &mut LocalFieldModel,
    relative_pose: &Pose,
) -> Result<()> {
    if source.config != target.config {
        return Err(Error::InvalidArgument(
            "feature propagation requires matching model configs".into(),
        ));
    }
    let lay = source.layout.clone();
    let f = lay.grid.features;
    let src_grid = &source.params[lay.grid_offset..lay.grid_offset + lay.grid.param_count];
    // An identity transform copies dense levels verbatim: resampling
    // through 3D would be exact except at the spherical poles, where the
    // azimuth of a vertex is not recoverable from its world point.
    let identity = relative_pose.rotation.angle() < 1e-12
        && relative_pose.translation.norm() < 1e-12;
    let mut feat = vec![0.0; f];
    for (li, level) in lay.grid.levels.iter().enumerate() {
        if !level.is_dense {
            continue;
        }
        if identity {
            let from = lay.grid_offset + level.param_offset;
            let to = from + level.table_len * f;
            target.params[from..to].copy_from_slice(&source.params[from..to]);
            continue;
        }
        let res = level.resolution;
        for it in 0..res {
            for ip in 0..=res {
                for ir in 0..=res {
                    let c_t = ContractedPoint {
                        theta: it as f64 / res as f64,
                        phi: ip as f64 / res as f64,
                        // rho = 0 is the point at infinity; nudge inward
                        rho: (ir as f64 / res as f64).max(1e-9),
                    };
                    let p_target = from_contracted(&c_t)?;
                    let p_source = relative_pose.transform_point(&p_target);
                    let c_s = to_contracted(&p_source)?;
                    lay.grid.encode_level_into(src_grid, li, &c_s, &mut feat);
                    let idx = lay.grid.vertex_param_index(li, it, ip, ir);
                    target.params[lay.grid_offset + idx..lay.grid_offset + idx + f]
                        .copy_from_slice(&feat);
                }
            }
        }
    }
    // copy all MLP blocks (density, color, proposal)
    let mlp_from = lay.density_mlp_offset;
    target.params[mlp_from..lay.total].copy_from_slice(&source.params[mlp_from..lay.total]);
    Ok(())
}

const MODEL_MAGIC: &[u8; 8] = b"VFMD0001";

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    id: u64,
    anchor_keyframe: u64,
    config: FieldConfig,
    training_frames: Vec<u64>,
    param_count: usize,
    occupancy_resolution: usize,
    adam_t: u64,
}

/// Write a model checkpoint: a self-describing binary container with a
/// JSON header followed by raw little-endian f64 arrays. Round trips are
/// bit exact.
pub fn save_model(model: &LocalFieldModel, path: &Path) -> Result<()> {
    let header = ModelHeader {
        id: model.id,
        anchor_keyframe: model.anchor_keyframe,
        config: model.config.clone(),
        training_frames: model.training_frames.iter().copied().collect(),
        param_count: model.params.len(),
        occupancy_resolution: model.occupancy.resolution,
        adam_t: model.opt.t,
    };
    let hbytes = serde_json::to_vec(&header)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(hbytes.len() as u64).to_le_bytes())?;
    w.write_all(&hbytes)?;
    for arr in [&model.params, &model.opt.m, &model.opt.v] {
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let occ_bytes: Vec<u8> = model.occupancy.cells.iter().map(|&b| b as u8).collect();
    w.write_all(&occ_bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<LocalFieldModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let hlen = u64::from_le_bytes(len8) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let header: ModelHeader = serde_json::from_slice(&hbytes)?;
    let layout = ModelLayout::new(&header.config);
    if layout.total != header.param_count {
        return Err(Error::MalformedCheckpoint(
            "param count does not match config".into(),
        ));
    }
    let mut read_arr = |n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let params = read_arr(header.param_count)?;
    let m = read_arr(header.param_count)?;
    let v = read_arr(header.param_count)?;
    let occ_res = header.occupancy_resolution;
    let mut occ_bytes = vec![0u8; occ_res * occ_res * occ_res];
    r.read_exact(&mut occ_bytes)?;
    Ok(LocalFieldModel {
        id: header.id,
        anchor_keyframe: header.anchor_keyframe,
        config: header.config,
        layout,
        params,
        occupancy: OccupancyGrid {
            resolution: occ_res,
            cells: occ_bytes.into_iter().map(|b| b != 0).collect(),
        },
        training_frames: header.training_frames.into_iter().collect(),
        opt: AdamState {
            m,
            v,
            t: header.adam_t,
        },
    })
}
