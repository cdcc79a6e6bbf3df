//! Run and model configuration with serializable defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One multi-resolution grid stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
    /// Hash table size (power of two). Levels whose vertex count fits are
    /// stored dense and are collision-free.
    pub hash_table_size: usize,
}

impl GridConfig {
    pub fn main_default() -> Self {
        GridConfig {
            levels: 8,
            features_per_level: 2,
            base_resolution: 16,
            growth_factor: 1.4,
            hash_table_size: 1 << 14,
        }
    }

    pub fn proposal_default() -> Self {
        GridConfig {
            levels: 4,
            features_per_level: 2,
            base_resolution: 8,
            growth_factor: 1.4,
            hash_table_size: 1 << 12,
        }
    }
}

/// Architecture of one local field model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub grid: GridConfig,
    pub proposal_grid: GridConfig,
    /// Geometry feature width passed from the density head to the color MLP.
    pub geo_features: usize,
    pub density_hidden: Vec<usize>,
    pub color_hidden: Vec<usize>,
    pub proposal_hidden: Vec<usize>,
    pub occupancy_resolution: usize,
    /// Accumulated sample weight above which a cell is marked occupied.
    pub w_occ: f64,
    /// Grid features initialized Uniform(-init_scale, init_scale).
    pub grid_init_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            grid: GridConfig::main_default(),
            proposal_grid: GridConfig::proposal_default(),
            geo_features: 8,
            density_hidden: vec![64],
            color_hidden: vec![64, 64],
            proposal_hidden: vec![32],
            occupancy_resolution: 16,
            w_occ: 1e-2,
            grid_init_scale: 1e-4,
        }
    }
}

/// Ray sampling and compositing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub proposal_samples: usize,
    pub main_samples: usize,
    pub near: f64,
    /// Metric depth cap applied when converting contracted boundaries back
    /// to meters (the last boundary sits at infinity otherwise).
    pub far_clamp: f64,
    pub background: [f64; 3],
    /// Uniform floor mass added per proposal interval before inverse-CDF
    /// resampling.
    pub resample_floor: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            proposal_samples: 64,
            main_samples: 32,
            near: 0.05,
            far_clamp: 1e4,
            background: [0.0, 0.0, 0.0],
            resample_floor: 1e-2,
        }
    }
}

/// Loss weights of the total training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dist: f64,
    pub lambda_prop: f64,
    pub lambda_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dist: 0.002,
            lambda_prop: 1.0,
            lambda_depth: 0.5,
        }
    }
}

/// Adam optimizer settings; grids and MLPs use separate learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_grid: f64,
    pub lr_mlp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_grid: 1e-2,
            lr_mlp: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        }
    }
}

/// Map maintenance policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasConfig {
    pub d_th: f64,
    pub max_models: usize,
    pub rays_per_step: usize,
    /// Initialize new models by resampling the nearest model's dense grid
    /// levels and copying MLP weights.
    pub feature_propagation: bool,
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        AtlasConfig {
            d_th: 0.3,
            max_models: 12,
            rays_per_step: 1024,
            feature_propagation: true,
            field: FieldConfig::default(),
            render: RenderConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
        }
    }
}

/// Pipeline mode: the full view-centric map, or the single-model
/// world-frame ablation baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    ViewCentric,
    WorldCentricSingle,
}

impl std::str::FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "view_centric" => Ok(RunMode::ViewCentric),
            "world_centric_single" => Ok(RunMode::WorldCentricSingle),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Full pipeline configuration; serialized alongside every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: RunMode,
    pub rgb_only: bool,
    pub seed: u64,
    pub stream: String,
    pub out: String,
    /// Training steps interleaved per consumed keyframe.
    pub train_steps_per_keyframe: usize,
    /// Evaluate held-out frames every this many training keyframes.
    pub eval_interval: usize,
    /// Every holdout_every-th keyframe is held out as a test frame.
    pub holdout_every: u64,
    /// Blending sharpness exponent.
    pub blend_p: f64,
    /// Rescale the stream so the trajectory bounding sphere has radius 1.
    pub rescale: bool,
    pub atlas: AtlasConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: RunMode::ViewCentric,
            rgb_only: false,
            seed: 0,
            stream: String::new(),
            out: String::new(),
            train_steps_per_keyframe: 30,
            eval_interval: 10,
            holdout_every: 10,
            blend_p: 4.0,
            rescale: true,
            atlas: AtlasConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.atlas.loss;
        if l.lambda_dist < 0.0 || l.lambda_prop < 0.0 || l.lambda_depth < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.atlas.max_models == 0 {
            return Err(Error::Config("max_models must be >= 1".into()));
        }
        if self.atlas.render.main_samples == 0 || self.atlas.render.proposal_samples == 0 {
            return Err(Error::Config("sample counts must be >= 1".into()));
        }
        if self.holdout_every == 0 {
            return Err(Error::Config("holdout_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
