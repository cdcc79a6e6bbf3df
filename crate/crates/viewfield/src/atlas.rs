//! Multi-model map maintenance: keyframe assignment, per-step training
//! scheduling, loop-closure pose updates, and atlas checkpoints.
//!
//! Each local field model is anchored to one keyframe; anchor poses are
//! read from the *current* keyframe pose table at every ray expression, so
//! a pose update instantly re-situates trained geometry without touching
//! any model parameter.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::AtlasConfig;
use crate::error::{Error, Result};
use crate::geom::{pixel_to_ray, pose_distance, CameraIntrinsics, Pose};
use crate::img::{DepthMap, Image};
use crate::model::{init_model, load_model, propagate_features, save_model, LocalFieldModel};
use crate::render::LossParts;
use crate::train::{batch_pass, RayTarget, TrainReport, TrainScratch};

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: u64,
    /// Current (tracker-stamped, possibly later corrected) camera-to-world pose.
    pub pose: Pose,
    pub image: Image,
    pub depth: Option<DepthMap>,
    /// Model this keyframe was assigned to on arrival.
    pub primary_model: u64,
}

/// Undirected covisibility edges between keyframe ids.
#[derive(Debug, Clone, Default)]
pub struct CovisibilityGraph {
    adjacency: BTreeMap<u64, BTreeSet<u64>>,
}

impl CovisibilityGraph {
    pub fn add_edge(&mut self, a: u64, b: u64) {
        if a == b {
            return;
        }
        self.adjacency.entry(a).or_default().insert(b);
        self.adjacency.entry(b).or_default().insert(a);
    }

    pub fn neighbors(&self, id: u64) -> impl Iterator<Item = u64> + '_ {
        self.adjacency.get(&id).into_iter().flatten().copied()
    }

    pub fn edges(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        for (a, nbrs) in &self.adjacency {
            for b in nbrs {
                if a < b {
                    out.push((*a, *b));
                }
            }
        }
        out
    }
}

/// Outcome of consuming one keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssignmentReport {
    pub keyframe: u64,
    pub primary_model: u64,
    pub created_model: bool,
    /// Model cap was hit; the keyframe joined the nearest model instead.
    pub overflow: bool,
    pub propagation_source: Option<u64>,
}

/// Per-model result of one training step.
#[derive(Debug, Clone, Copy)]
pub struct ModelStepReport {
    pub model_id: u64,
    pub report: TrainReport,
}

pub struct AtlasState {
    pub config: AtlasConfig,
    pub intrinsics: CameraIntrinsics,
    pub models: Vec<LocalFieldModel>,
    pub keyframes: BTreeMap<u64, Keyframe>,
    pub graph: CovisibilityGraph,
    /// Ablation baseline: every model anchor is frozen to the world frame
    /// identity instead of following its anchor keyframe's current pose.
    pub world_centric: bool,
    pub seed: u64,
    pub step_counter: u64,
    /// Keyframe ids that arrived after the model cap was reached and had to
    /// join an existing model.
    pub overflow_log: Vec<u64>,
    sched_rng: ChaCha8Rng,
    scratch: Option<TrainScratch>,
    grads: Vec<f64>,
    occ_buf: Vec<(crate::geom::ContractedPoint, f64)>,
}

impl AtlasState {
    pub fn new(
        config: AtlasConfig,
        intrinsics: CameraIntrinsics,
        world_centric: bool,
        seed: u64,
    ) -> Result<AtlasState> {
        intrinsics.validate()?;
        Ok(AtlasState {
            config,
            intrinsics,
            models: Vec::new(),
            keyframes: BTreeMap::new(),
            graph: CovisibilityGraph::default(),
            world_centric,
            seed,
            step_counter: 0,
            overflow_log: Vec::new(),
            sched_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5c4e_d01e_0001),
            scratch: None,
            grads: Vec::new(),
            occ_buf: Vec::new(),
        })
    }

    /// Anchor pose of a model: its anchor keyframe's *current* pose, or the
    /// world identity in the world-centric ablation.
    pub fn anchor_pose(&self, model: &LocalFieldModel) -> Pose {
        if self.world_centric {
            Pose::identity()
        } else {
            self.keyframes
                .get(&model.anchor_keyframe)
                .map(|kf| kf.pose.clone())
                .unwrap_or_else(Pose::identity)
        }
    }

    pub fn model(&self, id: u64) -> Result<&LocalFieldModel> {
        self.models.get(id as usize).ok_or(Error::UnknownModel(id))
    }

    fn model_seed(&self, id: u64) -> u64 {
        self.seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }

    /// Consume one tracker keyframe: assign it to a model (creating one if
    /// no covisible model is close enough), register covisibility edges,
    /// and append it to the training batches of older covisible models.
    pub fn on_keyframe(
        &mut self,
        mut kf: Keyframe,
        covisible: &BTreeSet<u64>,
    ) -> Result<AssignmentReport> {
        if self.keyframes.contains_key(&kf.id) {
            return Err(Error::DuplicateKeyframe(kf.id));
        }
        for c in covisible {
            if !self.keyframes.contains_key(c) {
                return Err(Error::UnknownKeyframe(*c));
            }
        }

        let covis_models: BTreeSet<u64> = covisible
            .iter()
            .map(|c| self.keyframes[c].primary_model)
            .collect();

        let all_far = covis_models.iter().all(|&m| {
            let anchor = self.anchor_pose(&self.models[m as usize]);
            pose_distance(&kf.pose, &anchor) > self.config.d_th
        });
        let want_new = covis_models.is_empty() || all_far;

        let mut created = false;
        let mut overflow = false;
        let mut source = None;
        let primary = if want_new {
            if self.models.len() < self.config.max_models {
                let (id, src) = self.create_model(&kf)?;
                created = true;
                source = src;
                id
            } else {
                overflow = true;
                self.overflow_log.push(kf.id);
                self.nearest_model(&kf.pose, &covis_models)
            }
        } else {
            *covis_models.iter().max().expect("nonempty")
        };

        kf.primary_model = primary;
        if created {
            // create_model anchored the new model to kf.id already.
        } else {
            self.models[primary as usize].training_frames.insert(kf.id);
        }
        for &m in &covis_models {
            if m != primary {
                self.models[m as usize].training_frames.insert(kf.id);
            }
        }
        for &c in covisible {
            self.graph.add_edge(kf.id, c);
        }
        let id = kf.id;
        self.keyframes.insert(id, kf);
        Ok(AssignmentReport {
            keyframe: id,
            primary_model: primary,
            created_model: created,
            overflow,
            propagation_source: source,
        })
    }

    /// Prefer the nearest covisible model; fall back to the globally
    /// nearest model when the covisible set is empty.
    fn nearest_model(&self, pose: &Pose, covis_models: &BTreeSet<u64>) -> u64 {
        let candidates: Vec<u64> = if covis_models.is_empty() {
            (0..self.models.len() as u64).collect()
        } else {
            covis_models.iter().copied().collect()
        };
        candidates
            .into_iter()
            .min_by(|&a, &b| {
                let da = pose_distance(pose, &self.anchor_pose(&self.models[a as usize]));
                let db = pose_distance(pose, &self.anchor_pose(&self.models[b as usize]));
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            })
            .expect("at least one model")
    }

    /// Create a new model anchored at `anchor_kf`, optionally warm-started
    /// from the nearest existing model. Returns (model id, source id).
    fn create_model(&mut self, anchor_kf: &Keyframe) -> Result<(u64, Option<u64>)> {
        if self.models.len() >= self.config.max_models {
            return Err(Error::ModelCapReached(self.config.max_models));
        }
        let id = self.models.len() as u64;
        let mut model = init_model(id, anchor_kf.id, &self.config.field, self.model_seed(id));
        let mut source = None;
        if self.config.feature_propagation && !self.models.is_empty() {
            let src_id = (0..self.models.len() as u64)
                .min_by(|&a, &b| {
                    let da =
                        pose_distance(&anchor_kf.pose, &self.anchor_pose(&self.models[a as usize]));
                    let db =
                        pose_distance(&anchor_kf.pose, &self.anchor_pose(&self.models[b as usize]));
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                })
                .expect("nonempty");
            let src_anchor = self.anchor_pose(&self.models[src_id as usize]);
            let tgt_anchor = if self.world_centric {
                Pose::identity()
            } else {
                anchor_kf.pose.clone()
            };
            // target-local -> world -> source-local
            let rel = src_anchor.inverse().compose(&tgt_anchor);
            propagate_features(&self.models[src_id as usize], &mut model, &rel)?;
            source = Some(src_id);
        }
        self.models.push(model);
        Ok((id, source))
    }

    /// Pick the models to train this step: the two newest models whose
    /// training batch contains `latest_kf`, plus one uniformly random model
    /// (deduplicated by redrawing).
    pub fn schedule_training_step(&mut self, latest_kf: u64) -> Vec<u64> {
        let mut covis: Vec<u64> = self
            .models
            .iter()
            .filter(|m| m.training_frames.contains(&latest_kf))
            .map(|m| m.id)
            .collect();
        covis.sort_unstable_by(|a, b| b.cmp(a));
        let mut picks: Vec<u64> = covis.into_iter().take(2).collect();
        let n = self.models.len();
        if n > picks.len() {
            loop {
                let r = self.sched_rng.gen_range(0..n) as u64;
                if !picks.contains(&r) {
                    picks.push(r);
                    break;
                }
            }
        }
        picks
    }

    /// Sample a supervised ray batch for `model` from its training frames.
    fn sample_batch(&self, model: &LocalFieldModel, rng: &mut dyn RngCore) -> Vec<RayTarget> {
        let frames: Vec<u64> = model
            .training_frames
            .iter()
            .filter(|f| self.keyframes.contains_key(f))
            .copied()
            .collect();
        if frames.is_empty() {
            return Vec::new();
        }
        let anchor = self.anchor_pose(model);
        let mut batch = Vec::with_capacity(self.config.rays_per_step);
        for _ in 0..self.config.rays_per_step {
            let fid = frames[rng.gen_range(0..frames.len())];
            let kf = &self.keyframes[&fid];
            let x = rng.gen_range(0..kf.image.width);
            let y = rng.gen_range(0..kf.image.height);
            let ray = pixel_to_ray(
                &kf.pose,
                &self.intrinsics,
                x as f64 + 0.5,
                y as f64 + 0.5,
                &anchor,
            );
            let depth = kf.depth.as_ref().and_then(|d| {
                let i = d.idx(x, y);
                if d.valid[i] {
                    Some(d.data[i])
                } else {
                    None
                }
            });
            batch.push(RayTarget {
                ray,
                color: kf.image.get(x, y),
                depth,
            });
        }
        batch
    }

    /// One optimizer step on each scheduled model. Deterministic given
    /// (seed, step_counter, model id); models with empty batches are skipped.
    pub fn train_step(&mut self, ids: &[u64], rgb_only: bool) -> Result<Vec<ModelStepReport>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= self.models.len() {
                return Err(Error::UnknownModel(id));
            }
            let ray_seed = self
                .seed
                .wrapping_mul(0x2545_f491_4f6c_dd1d)
                .wrapping_add(self.step_counter.wrapping_mul(0x0100_0000_01b3))
                .wrapping_add(id);
            let mut rng = ChaCha8Rng::seed_from_u64(ray_seed);
            let batch = self.sample_batch(&self.models[id as usize], &mut rng);
            if batch.is_empty() {
                out.push(ModelStepReport {
                    model_id: id,
                    report: TrainReport {
                        parts: LossParts::default(),
                        total: 0.0,
                        n_rays: 0,
                        n_depth_rays: 0,
                    },
                });
                continue;
            }
            let model = &mut self.models[id as usize];
            let mut scratch = match self.scratch.take() {
                Some(s) => s,
                None => TrainScratch::new(model, &self.config.render),
            };
            self.grads.clear();
            self.grads.resize(model.layout.total, 0.0);
            self.occ_buf.clear();
            let report = batch_pass(
                model,
                &batch,
                &self.config.render,
                &self.config.loss,
                rgb_only,
                Some(&mut rng),
                None,
                Some(&mut self.grads),
                Some(&mut self.occ_buf),
                None,
                &mut scratch,
            )?;
            if !report.total.is_finite() || self.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Domain(format!(
                    "non-finite loss or gradient on model {id} at step {}",
                    self.step_counter
                )));
            }
            let boundary = model.layout.mlp_boundary();
            let opt_cfg = self.config.optim;
            let mut opt = std::mem::replace(&mut model.opt, crate::model::AdamState::new(0));
            opt.step(&mut model.params, &self.grads, &opt_cfg, boundary);
            model.opt = opt;
            model.mark_occupancy(&self.occ_buf);
            self.scratch = Some(scratch);
            out.push(ModelStepReport { model_id: id, report });
        }
        self.step_counter += 1;
        Ok(out)
    }

    /// Loop-closure correction: overwrite keyframe poses in place. No model
    /// parameter changes; anchored geometry follows the new poses.
    pub fn apply_pose_update(&mut self, updates: &BTreeMap<u64, Pose>) -> Result<()> {
        for id in updates.keys() {
            if !self.keyframes.contains_key(id) {
                return Err(Error::UnknownKeyframe(*id));
            }
        }
        for (id, pose) in updates {
            self.keyframes.get_mut(id).expect("checked").pose = pose.clone();
        }
        Ok(())
    }

    pub fn total_param_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for m in &self.models {
            h ^= m.param_checksum();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct KeyframeRecord {
    id: u64,
    pose: [f64; 7],
    primary_model: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AtlasManifest {
    config: AtlasConfig,
    intrinsics: CameraIntrinsics,
    world_centric: bool,
    seed: u64,
    step_counter: u64,
    overflow_log: Vec<u64>,
    n_models: usize,
    keyframes: Vec<KeyframeRecord>,
    edges: Vec<(u64, u64)>,
}

/// Save models plus a manifest (poses, assignments, covisibility). Keyframe
/// pixels are not stored; a restored atlas renders and evaluates, but
/// further training requires re-supplying images from the stream.
pub fn save_atlas(state: &AtlasState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("models"))?;
    for m in &state.models {
        save_model(m, &dir.join("models").join(format!("model_{:04}.vfm", m.id)))?;
    }
    let manifest = AtlasManifest {
        config: state.config.clone(),
        intrinsics: state.intrinsics.clone(),
        world_centric: state.world_centric,
        seed: state.seed,
        step_counter: state.step_counter,
        overflow_log: state.overflow_log.clone(),
        n_models: state.models.len(),
        keyframes: state
            .keyframes
            .values()
            .map(|kf| KeyframeRecord {
                id: kf.id,
                pose: kf.pose.to_array(),
                primary_model: kf.primary_model,
            })
            .collect(),
        edges: state.graph.edges(),
    };
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)?;
    Ok(())
}

pub fn load_atlas(dir: &Path) -> Result<AtlasState> {
    let f = std::fs::File::open(dir.join("manifest.json"))?;
    let manifest: AtlasManifest =
        serde_json::from_reader(std::io::BufReader::new(f)).map_err(Error::Json)?;
    let mut state = AtlasState::new(
        manifest.config,
        manifest.intrinsics,
        manifest.world_centric,
        manifest.seed,
    )?;
    state.step_counter = manifest.step_counter;
    state.overflow_log = manifest.overflow_log;
    for i in 0..manifest.n_models {
        let m = load_model(&dir.join("models").join(format!("model_{i:04}.vfm")))?;
        if m.id != i as u64 {
            return Err(Error::MalformedCheckpoint(format!(
                "model file {i} has id {}",
                m.id
            )));
        }
        state.models.push(m);
    }
    for rec in manifest.keyframes {
        state.keyframes.insert(
            rec.id,
            Keyframe {
                id: rec.id,
                pose: Pose::from_array(&rec.pose),
                image: Image::new(0, 0),
                depth: None,
                primary_model: rec.primary_model,
            },
        );
    }
    for (a, b) in manifest.edges {
        state.graph.add_edge(a, b);
    }
    Ok(state)
}
