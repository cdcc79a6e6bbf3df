//! Simulated tracker: an analytic ray-traced scene, drifting trajectories,
//! an idealized loop closure, and the JSONL keyframe stream it emits.
//!
//! The stream is the boundary between tracking and mapping: KEYFRAME
//! events carry a stamped (drifting) pose, rendered RGB-D ground truth,
//! and a covisibility list; one POSE_UPDATE event snaps all prior poses to
//! ground truth; END terminates. A HEADER line carries the camera
//! intrinsics. Image pixels are written as PNGs next to the stream file.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::Keyframe;
use crate::error::{Error, Result};
use crate::geom::{pixel_to_ray, CameraIntrinsics, Pose};
use crate::img::{DepthMap, Image};

// ---------------------------------------------------------------------------
// Scene

#[derive(Debug, Clone)]
pub enum Primitive {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
        albedo: [f64; 3],
    },
    Aabb {
        min: Vector3<f64>,
        max: Vector3<f64>,
        albedo: [f64; 3],
    },
    /// Horizontal plane y = level with a two-tone checker albedo
    /// (+y points down; the ground sits below the cameras).
    Ground {
        level: f64,
        albedo_a: [f64; 3],
        albedo_b: [f64; 3],
    },
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Direction the light travels (unit length).
    pub light_dir: Vector3<f64>,
    pub ambient: f64,
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    albedo: [f64; 3],
}

const T_MIN: f64 = 1e-9;

fn intersect(prim: &Primitive, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    match prim {
        Primitive::Sphere { center, radius, albedo } => {
            let oc = o - center;
            let b = oc.dot(d);
            let disc = b * b - (oc.dot(&oc) - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > T_MIN {
                -b - sq
            } else if -b + sq > T_MIN {
                -b + sq
            } else {
                return None;
            };
            let normal = (o + d * t - center) / *radius;
            Some(Hit { t, normal, albedo: *albedo })
        }
        Primitive::Aabb { min, max, albedo } => {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut axis = 0usize;
            for a in 0..3 {
                if d[a].abs() < 1e-300 {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let mut t0 = (min[a] - o[a]) / d[a];
                let mut t1 = (max[a] - o[a]) / d[a];
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_near {
                    t_near = t0;
                    axis = a;
                }
                t_far = t_far.min(t1);
                if t_near > t_far {
                    return None;
                }
            }
            if t_near <= T_MIN {
                return None; // inside or behind: treat as a miss
            }
            let mut normal = Vector3::zeros();
            normal[axis] = -d[axis].signum();
            Some(Hit { t: t_near, normal, albedo: *albedo })
        }
        Primitive::Ground { level, albedo_a, albedo_b } => {
            if d.y.abs() < 1e-300 {
                return None;
            }
            let t = (level - o.y) / d.y;
            if t <= T_MIN {
                return None;
            }
            let p = o + d * t;
            let checker = (p.x.floor() as i64 + p.z.floor() as i64).rem_euclid(2) == 0;
            Some(Hit {
                t,
                normal: Vector3::new(0.0, -d.y.signum(), 0.0),
                albedo: if checker { *albedo_a } else { *albedo_b },
            })
        }
    }
}

impl SyntheticScene {
    /// Seeded scene: 6-10 primitives in a shell outside `radius`, plus the
    /// ground plane.
    pub fn generate(seed: u64, radius: f64) -> SyntheticScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9_e5ce_9e5c_e9e5);
        let n = rng.gen_range(6..=10);
        let mut primitives = Vec::with_capacity(n + 1);
        for _ in 0..n {
            let az = rng.gen::<f64>() * std::f64::consts::TAU;
            let r = radius + 0.8 + rng.gen::<f64>() * 1.4;
            let y = -0.6 + rng.gen::<f64>() * 0.9; // roughly eye level to near ground
            let center = Vector3::new(r * az.cos(), y, r * az.sin());
            let albedo = [
                0.2 + rng.gen::<f64>() * 0.7,
                0.2 + rng.gen::<f64>() * 0.7,
                0.2 + rng.gen::<f64>() * 0.7,
            ];
            if rng.gen::<bool>() {
                primitives.push(Primitive::Sphere {
                    center,
                    radius: 0.25 + rng.gen::<f64>() * 0.35,
                    albedo,
                });
            } else {
                let half = Vector3::new(
                    0.2 + rng.gen::<f64>() * 0.3,
                    0.2 + rng.gen::<f64>() * 0.4,
                    0.2 + rng.gen::<f64>() * 0.3,
                );
                primitives.push(Primitive::Aabb {
                    min: center - half,
                    max: center + half,
                    albedo,
                });
            }
        }
        primitives.push(Primitive::Ground {
            level: 0.6,
            albedo_a: [0.75, 0.75, 0.7],
            albedo_b: [0.25, 0.3, 0.35],
        });
        SyntheticScene {
            primitives,
            background: [0.02, 0.02, 0.05],
            light_dir: Vector3::new(0.35, 0.8, 0.25).normalize(),
            ambient: 0.3,
        }
    }

    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<([f64; 3], f64)> {
        let mut best: Option<Hit> = None;
        for prim in &self.primitives {
            if let Some(h) = intersect(prim, o, d) {
                if best.as_ref().map_or(true, |b| h.t < b.t) {
                    best = Some(h);
                }
            }
        }
        best.map(|h| {
            let diffuse = h.normal.dot(&-self.light_dir).max(0.0);
            let shade = self.ambient + (1.0 - self.ambient) * diffuse;
            (
                [
                    (h.albedo[0] * shade).clamp(0.0, 1.0),
                    (h.albedo[1] * shade).clamp(0.0, 1.0),
                    (h.albedo[2] * shade).clamp(0.0, 1.0),
                ],
                h.t,
            )
        })
    }
}

/// Render the ground-truth RGB-D view from `pose`. Depth is the Euclidean
/// ray distance; misses are background color with invalid depth.
pub fn raytrace_gt(
    scene: &SyntheticScene,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> (Image, DepthMap) {
    let mut img = Image::new(intr.width, intr.height);
    let mut depth = DepthMap::new(intr.width, intr.height);
    let ident = Pose::identity();
    for y in 0..intr.height {
        for x in 0..intr.width {
            let ray = pixel_to_ray(pose, intr, x as f64 + 0.5, y as f64 + 0.5, &ident);
            match scene.trace(&ray.origin, &ray.direction) {
                Some((rgb, t)) => {
                    img.set(x, y, rgb);
                    depth.set(x, y, t);
                }
                None => img.set(x, y, scene.background),
            }
        }
    }
    (img, depth)
}

// ---------------------------------------------------------------------------
// Trajectories and drift

#[derive(Debug, Clone, Copy)]
pub enum TrajectoryKind {
    /// Closed loop of the given radius in the xz plane, looking outward.
    Loop { radius: f64 },
    /// Straight translation along +x of the given total length, looking +z.
    Line { length: f64 },
}

/// Camera-to-world rotation with forward axis `f` (+z) and image-down (+y)
/// aligned with world-down.
fn look_rotation(forward: &Vector3<f64>) -> UnitQuaternion<f64> {
    let z = forward.normalize();
    let world_down = Vector3::new(0.0, 1.0, 0.0);
    let x = world_down.cross(&z).normalize();
    let y = z.cross(&x);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
        Matrix3::from_columns(&[x, y, z]),
    ))
}

/// `n` smoothly varying poses; a loop returns to its start exactly.
pub fn generate_trajectory(kind: TrajectoryKind, n: usize) -> Result<Vec<Pose>> {
    if n < 2 {
        return Err(Error::InvalidArgument("trajectory needs >= 2 poses".into()));
    }
    let mut out = Vec::with_capacity(n);
    match kind {
        TrajectoryKind::Loop { radius } => {
            if radius <= 0.0 {
                return Err(Error::InvalidArgument("loop radius must be > 0".into()));
            }
            for k in 0..n {
                let a = std::f64::consts::TAU * k as f64 / (n - 1) as f64;
                let pos = Vector3::new(radius * a.cos(), -0.2, radius * a.sin());
                let forward = Vector3::new(a.cos(), 0.08, a.sin()); // outward, slightly down
                out.push(Pose::new(look_rotation(&forward), pos));
            }
        }
        TrajectoryKind::Line { length } => {
            for k in 0..n {
                let x = length * k as f64 / (n - 1) as f64;
                out.push(Pose::new(
                    look_rotation(&Vector3::new(0.0, 0.0, 1.0)),
                    Vector3::new(x, -0.2, 0.0),
                ));
            }
        }
    }
    Ok(out)
}

/// Cumulative tracker drift: pose k is translated by k * `trans_rate`
/// along a fixed bias direction and rotated by k * `rot_rate` radians
/// about a fixed axis.
pub fn inject_drift(poses: &[Pose], trans_rate: f64, rot_rate: f64) -> Vec<Pose> {
    let bias = Vector3::new(1.0, 0.25, -0.4).normalize();
    let axis = nalgebra::Unit::new_normalize(Vector3::new(0.0, 1.0, 0.0));
    poses
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let rot = UnitQuaternion::from_axis_angle(&axis, k as f64 * rot_rate);
            Pose::new(rot * p.rotation, p.translation + bias * (k as f64 * trans_rate))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Covisibility

/// Fraction of frame i's valid depth samples that reproject inside frame
/// j's image with positive forward depth. Evaluated on a sparse pixel grid.
pub fn frustum_overlap(
    pose_i: &Pose,
    depth_i: &DepthMap,
    pose_j: &Pose,
    intr: &CameraIntrinsics,
) -> f64 {
    let ident = Pose::identity();
    let inv_j = pose_j.inverse();
    let mut seen = 0usize;
    let mut total = 0usize;
    let step = 4u32;
    for y in (0..depth_i.height).step_by(step as usize) {
        for x in (0..depth_i.width).step_by(step as usize) {
            let idx = depth_i.idx(x, y);
            if !depth_i.valid[idx] {
                continue;
            }
            total += 1;
            let ray = pixel_to_ray(pose_i, intr, x as f64 + 0.5, y as f64 + 0.5, &ident);
            let p_world = ray.point_at(depth_i.data[idx]);
            let p_cam = inv_j.transform_point(&p_world);
            if p_cam.z <= 1e-6 {
                continue;
            }
            let u = intr.fx * p_cam.x / p_cam.z + intr.cx;
            let v = intr.fy * p_cam.y / p_cam.z + intr.cy;
            if u >= 0.0 && u < intr.width as f64 && v >= 0.0 && v < intr.height as f64 {
                seen += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen as f64 / total as f64
    }
}

/// Symmetric covisibility decision: frustum overlap in either direction
/// above `threshold`, or camera centers within `radius` (0 disables).
pub fn covisible(
    pose_i: &Pose,
    depth_i: &DepthMap,
    pose_j: &Pose,
    depth_j: &DepthMap,
    intr: &CameraIntrinsics,
    threshold: f64,
    radius: f64,
) -> bool {
    if radius > 0.0 && (pose_i.translation - pose_j.translation).norm() <= radius {
        return true;
    }
    frustum_overlap(pose_i, depth_i, pose_j, intr).max(frustum_overlap(
        pose_j,
        depth_j,
        pose_i,
        intr,
    )) > threshold
}

// ---------------------------------------------------------------------------
// Stream

/// In-memory tracker event with pixels attached.
#[derive(Debug, Clone)]
pub enum TrackerEvent {
    Keyframe {
        kf: Keyframe,
        covisible: BTreeSet<u64>,
        /// Held out from training; used only for evaluation.
        test: bool,
    },
    PoseUpdate(BTreeMap<u64, Pose>),
    End,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum StreamLine {
    Header {
        intrinsics: CameraIntrinsics,
    },
    Keyframe {
        id: u64,
        pose: [f64; 7],
        image_path: String,
        depth_path: String,
        covisible: Vec<u64>,
        test: bool,
    },
    // JSON object keys are strings; ids are parsed on read.
    PoseUpdate {
        updates: BTreeMap<String, [f64; 7]>,
    },
    End {},
}

#[derive(Debug, Clone)]
pub struct StreamSpec {
    pub kind: TrajectoryKind,
    pub n_frames: usize,
    pub intrinsics: CameraIntrinsics,
    /// Per-frame translational drift in meters.
    pub drift_trans: f64,
    /// Per-frame rotational drift in radians.
    pub drift_rot: f64,
    /// Frame index before which a POSE_UPDATE snaps all earlier poses to
    /// ground truth. None: no loop-closure event.
    pub loop_close_at: Option<usize>,
    /// Every holdout-th frame (ending phase) is marked as a test frame.
    pub holdout_every: u64,
    pub covis_threshold: f64,
    pub covis_radius: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> StreamSpec {
        StreamSpec {
            kind: TrajectoryKind::Loop { radius: 2.0 },
            n_frames: 40,
            intrinsics: CameraIntrinsics {
                fx: 64.0,
                fy: 64.0,
                cx: 32.0,
                cy: 32.0,
                width: 64,
                height: 64,
            },
            drift_trans: 0.01,
            drift_rot: 0.002,
            loop_close_at: Some(32),
            holdout_every: 10,
            covis_threshold: 0.3,
            covis_radius: 0.0,
            seed: 0,
        }
    }
}

fn is_test_frame(id: u64, holdout_every: u64) -> bool {
    holdout_every > 1 && id % holdout_every == holdout_every - 1
}

/// Run the simulated tracker: trace ground truth, stamp drifting poses,
/// and emit the keyframe/loop-closure event sequence.
pub fn generate_stream(spec: &StreamSpec) -> Result<Vec<TrackerEvent>> {
    spec.intrinsics.validate()?;
    if let Some(lc) = spec.loop_close_at {
        if lc == 0 || lc >= spec.n_frames {
            return Err(Error::InvalidArgument(
                "loop_close_at must fall inside the trajectory".into(),
            ));
        }
    }
    let radius = match spec.kind {
        TrajectoryKind::Loop { radius } => radius,
        TrajectoryKind::Line { length } => length * 0.5,
    };
    let scene = SyntheticScene::generate(spec.seed, radius);
    let gt_poses = generate_trajectory(spec.kind, spec.n_frames)?;
    let drifted = inject_drift(&gt_poses, spec.drift_trans, spec.drift_rot);

    let mut events = Vec::with_capacity(spec.n_frames + 2);
    let mut depths: Vec<DepthMap> = Vec::with_capacity(spec.n_frames);
    let mut train_ids: Vec<u64> = Vec::new();

    for k in 0..spec.n_frames {
        let id = k as u64;
        if spec.loop_close_at == Some(k) {
            let mut updates = BTreeMap::new();
            for &prev in train_ids.iter() {
                updates.insert(prev, gt_poses[prev as usize].clone());
            }
            for prev in 0..k as u64 {
                updates.entry(prev).or_insert_with(|| gt_poses[prev as usize].clone());
            }
            events.push(TrackerEvent::PoseUpdate(updates));
        }
        let corrected = spec.loop_close_at.map_or(false, |lc| k >= lc);
        let stamped = if corrected { gt_poses[k].clone() } else { drifted[k].clone() };
        let (image, depth) = raytrace_gt(&scene, &gt_poses[k], &spec.intrinsics);
        let test = is_test_frame(id, spec.holdout_every);
        let covis: BTreeSet<u64> = if test {
            BTreeSet::new()
        } else {
            train_ids
                .iter()
                .filter(|&&j| {
                    covisible(
                        &gt_poses[k],
                        &depth,
                        &gt_poses[j as usize],
                        &depths[j as usize],
                        &spec.intrinsics,
                        spec.covis_threshold,
                        spec.covis_radius,
                    )
                })
                .copied()
                .collect()
        };
        if !test {
            train_ids.push(id);
        }
        depths.push(depth.clone());
        events.push(TrackerEvent::Keyframe {
            kf: Keyframe {
                id,
                pose: stamped,
                image,
                depth: Some(depth),
                primary_model: 0,
            },
            covisible: covis,
            test,
        });
    }
    events.push(TrackerEvent::End);
    Ok(events)
}

/// Write a stream to `dir/stream.jsonl` with PNG pixels under `dir/images/`.
pub fn write_stream(
    events: &[TrackerEvent],
    intr: &CameraIntrinsics,
    dir: &Path,
) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    let stream_path = dir.join("stream.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&stream_path)?);
    let mut emit = |line: &StreamLine| -> Result<()> {
        serde_json::to_writer(&mut f, line)?;
        f.write_all(b"\n")?;
        Ok(())
    };
    emit(&StreamLine::Header { intrinsics: intr.clone() })?;
    for ev in events {
        match ev {
            TrackerEvent::Keyframe { kf, covisible, test } => {
                let image_path = format!("images/kf_{:05}.png", kf.id);
                let depth_path = format!("images/kf_{:05}_depth.png", kf.id);
                kf.image.save_png(&dir.join(&image_path))?;
                match &kf.depth {
                    Some(d) => d.save_png(&dir.join(&depth_path))?,
                    None => {
                        return Err(Error::InvalidArgument(
                            "stream keyframes must carry depth".into(),
                        ))
                    }
                }
                emit(&StreamLine::Keyframe {
                    id: kf.id,
                    pose: kf.pose.to_array(),
                    image_path,
                    depth_path,
                    covisible: covisible.iter().copied().collect(),
                    test: *test,
                })?;
            }
            TrackerEvent::PoseUpdate(updates) => {
                emit(&StreamLine::PoseUpdate {
                    updates: updates
                        .iter()
                        .map(|(k, v)| (k.to_string(), v.to_array()))
                        .collect(),
                })?;
            }
            TrackerEvent::End => emit(&StreamLine::End {})?,
        }
    }
    Ok(stream_path)
}

/// Read a stream file back, loading pixels from the paths it references.
pub fn read_stream(path: &Path) -> Result<(CameraIntrinsics, Vec<TrackerEvent>)> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut intr: Option<CameraIntrinsics> = None;
    let mut events = Vec::new();
    let mut ended = false;
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if ended {
            return Err(Error::MalformedStream(format!(
                "line {}: event after END",
                lineno + 1
            )));
        }
        let parsed: StreamLine = serde_json::from_str(&line).map_err(|e| {
            Error::MalformedStream(format!("line {}: {}", lineno + 1, e))
        })?;
        match parsed {
            StreamLine::Header { intrinsics } => {
                intrinsics.validate()?;
                intr = Some(intrinsics);
            }
            StreamLine::Keyframe { id, pose, image_path, depth_path, covisible, test } => {
                let image = Image::load_png(&dir.join(&image_path))?;
                let depth = DepthMap::load_png(&dir.join(&depth_path))?;
                events.push(TrackerEvent::Keyframe {
                    kf: Keyframe {
                        id,
                        pose: Pose::from_array(&pose),
                        image,
                        depth: Some(depth),
                        primary_model: 0,
                    },
                    covisible: covisible.into_iter().collect(),
                    test,
                });
            }
            StreamLine::PoseUpdate { updates } => {
                let mut parsed_updates = BTreeMap::new();
                for (k, v) in updates {
                    let id: u64 = k.parse().map_err(|_| {
                        Error::MalformedStream(format!(
                            "line {}: bad keyframe id `{k}`",
                            lineno + 1
                        ))
                    })?;
                    parsed_updates.insert(id, Pose::from_array(&v));
                }
                events.push(TrackerEvent::PoseUpdate(parsed_updates));
            }
            StreamLine::End {} => {
                events.push(TrackerEvent::End);
                ended = true;
            }
        }
    }
    let intr = intr.ok_or_else(|| Error::MalformedStream("missing header line".into()))?;
    if !ended {
        return Err(Error::MalformedStream("missing END event".into()));
    }
    Ok((intr, events))
}
