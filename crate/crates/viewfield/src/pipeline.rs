//! End-to-end run driver: consume a tracker stream, train the atlas
//! online, evaluate held-out frames, and write run artifacts (CSV metrics,
//! SVG plots, checkpoints, rendered views).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::atlas::{load_atlas, save_atlas, AtlasState};
use crate::blend::render_novel_view;
use crate::config::{RunConfig, RunMode};
use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose};
use crate::img::{DepthMap, Image};
use crate::metrics::{l1_depth, psnr, ssim, MetricRecord};
use crate::tracksim::{read_stream, TrackerEvent};

/// Held-out frame retained for evaluation only.
#[derive(Debug, Clone)]
pub struct TestFrame {
    pub pose: Pose,
    pub image: Image,
    pub depth: Option<DepthMap>,
}

/// Similarity transform applied to the stream before mapping: recenter on
/// the trajectory centroid and scale its bounding sphere to unit radius.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneTransform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl SceneTransform {
    pub fn identity() -> SceneTransform {
        SceneTransform { center: [0.0; 3], scale: 1.0 }
    }

    /// Fit from the stamped keyframe translations of a stream.
    pub fn fit(events: &[TrackerEvent]) -> SceneTransform {
        let translations: Vec<Vector3<f64>> = events
            .iter()
            .filter_map(|e| match e {
                TrackerEvent::Keyframe { kf, .. } => Some(kf.pose.translation),
                _ => None,
            })
            .collect();
        if translations.is_empty() {
            return SceneTransform::identity();
        }
        let center = translations.iter().sum::<Vector3<f64>>() / translations.len() as f64;
        let radius = translations
            .iter()
            .map(|t| (t - center).norm())
            .fold(0.0f64, f64::max);
        SceneTransform {
            center: [center.x, center.y, center.z],
            scale: if radius > 1e-9 { 1.0 / radius } else { 1.0 },
        }
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        let c = Vector3::new(self.center[0], self.center[1], self.center[2]);
        Pose::new(pose.rotation, (pose.translation - c) * self.scale)
    }

    /// Rescale every pose and depth map in the stream in place.
    pub fn apply_events(&self, events: &mut [TrackerEvent]) {
        for ev in events.iter_mut() {
            match ev {
                TrackerEvent::Keyframe { kf, .. } => {
                    kf.pose = self.apply_pose(&kf.pose);
                    if let Some(d) = kf.depth.as_mut() {
                        d.scale(self.scale);
                    }
                }
                TrackerEvent::PoseUpdate(updates) => {
                    for p in updates.values_mut() {
                        *p = self.apply_pose(p);
                    }
                }
                TrackerEvent::End => {}
            }
        }
    }
}

/// One aggregate row per evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub train_keyframes: u64,
    pub event: String,
    pub n_frames: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_l1_depth: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: RunMode,
    pub n_models: usize,
    pub n_keyframes: usize,
    pub n_test_frames: usize,
    pub overflow_keyframes: usize,
    pub transform: SceneTransform,
    pub evals: Vec<EvalSummary>,
}

/// Per-model training log row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub keyframe: u64,
    pub model_id: u64,
    pub rgb: f64,
    pub dist: f64,
    pub prop: f64,
    pub depth: Option<f64>,
    pub total: f64,
}

/// Everything a run produces, kept in memory; writing to disk is optional.
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub records: Vec<MetricRecord>,
    pub train_log: Vec<TrainLogRow>,
    pub atlas: AtlasState,
    pub test_frames: BTreeMap<u64, TestFrame>,
}

fn summarize(records: &[MetricRecord], train_keyframes: u64, event: &str) -> Option<EvalSummary> {
    let rows: Vec<&MetricRecord> = records
        .iter()
        .filter(|r| r.train_keyframes == train_keyframes && r.event == event)
        .collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let depths: Vec<f64> = rows.iter().filter_map(|r| r.l1_depth).collect();
    Some(EvalSummary {
        train_keyframes,
        event: event.to_string(),
        n_frames: rows.len(),
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        mean_l1_depth: if depths.is_empty() {
            None
        } else {
            Some(depths.iter().sum::<f64>() / depths.len() as f64)
        },
    })
}

fn evaluate(
    atlas: &AtlasState,
    test_frames: &BTreeMap<u64, TestFrame>,
    blend_p: f64,
    train_keyframes: u64,
    event: &str,
    records: &mut Vec<MetricRecord>,
) -> Result<()> {
    if atlas.models.is_empty() {
        return Ok(());
    }
    for (&id, tf) in test_frames {
        let view = render_novel_view(atlas, &tf.pose, &atlas.intrinsics, blend_p, false)?;
        let l1 = match &tf.depth {
            Some(gt) => l1_depth(&view.depth, gt)?,
            None => None,
        };
        records.push(MetricRecord {
            train_keyframes,
            frame_id: id,
            psnr: psnr(&view.color, &tf.image)?,
            ssim: ssim(&view.color, &tf.image)?,
            l1_depth: l1,
            event: event.to_string(),
        });
    }
    Ok(())
}

/// Run the full mapping pipeline over pre-loaded stream events.
///
/// `events` must already be in stream order and end with an END event. If
/// `cfg.out` is non-empty the run directory is populated with the resolved
/// config, CSV logs, plots, rendered test views, and an atlas checkpoint.
pub fn run_with_events(
    cfg: &RunConfig,
    intr: CameraIntrinsics,
    mut events: Vec<TrackerEvent>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let transform = if cfg.rescale {
        SceneTransform::fit(&events)
    } else {
        SceneTransform::identity()
    };
    transform.apply_events(&mut events);

    let world_centric = cfg.mode == RunMode::WorldCentricSingle;
    let mut acfg = cfg.atlas.clone();
    if world_centric {
        // One model, anchored to the world frame, never split.
        acfg.d_th = f64::INFINITY;
        acfg.max_models = 1;
    }
    let mut atlas = AtlasState::new(acfg, intr, world_centric, cfg.seed)?;

    let out_dir = if cfg.out.is_empty() {
        None
    } else {
        let d = PathBuf::from(&cfg.out);
        std::fs::create_dir_all(&d)?;
        std::fs::write(d.join("config.toml"), cfg.to_toml_string()?)?;
        Some(d)
    };

    let mut records: Vec<MetricRecord> = Vec::new();
    let mut train_log: Vec<TrainLogRow> = Vec::new();
    let mut evals: Vec<EvalSummary> = Vec::new();
    let mut test_frames: BTreeMap<u64, TestFrame> = BTreeMap::new();
    let mut train_kfs: u64 = 0;
    let mut ended = false;

    let run_eval = |atlas: &AtlasState,
                        test_frames: &BTreeMap<u64, TestFrame>,
                        train_kfs: u64,
                        event: &str,
                        records: &mut Vec<MetricRecord>,
                        evals: &mut Vec<EvalSummary>|
     -> Result<()> {
        evaluate(atlas, test_frames, cfg.blend_p, train_kfs, event, records)?;
        if let Some(s) = summarize(records, train_kfs, event) {
            evals.push(s);
        }
        Ok(())
    };

    for ev in events {
        if ended {
            return Err(Error::MalformedStream("event after END".into()));
        }
        match ev {
            TrackerEvent::Keyframe { kf, covisible, test } => {
                if test {
                    test_frames.insert(
                        kf.id,
                        TestFrame { pose: kf.pose, image: kf.image, depth: kf.depth },
                    );
                    continue;
                }
                let id = kf.id;
                let known: BTreeSet<u64> = covisible
                    .into_iter()
                    .filter(|c| atlas.keyframes.contains_key(c))
                    .collect();
                atlas.on_keyframe(kf, &known)?;
                for _ in 0..cfg.train_steps_per_keyframe {
                    let picks = atlas.schedule_training_step(id);
                    for r in atlas.train_step(&picks, cfg.rgb_only)? {
                        train_log.push(TrainLogRow {
                            step: atlas.step_counter,
                            keyframe: id,
                            model_id: r.model_id,
                            rgb: r.report.parts.rgb,
                            dist: r.report.parts.dist,
                            prop: r.report.parts.prop,
                            depth: r.report.parts.depth,
                            total: r.report.total,
                        });
                    }
                }
                train_kfs += 1;
                if cfg.eval_interval > 0 && train_kfs % cfg.eval_interval as u64 == 0 {
                    run_eval(&atlas, &test_frames, train_kfs, "interval", &mut records, &mut evals)?;
                }
            }
            TrackerEvent::PoseUpdate(updates) => {
                run_eval(&atlas, &test_frames, train_kfs, "pre_update", &mut records, &mut evals)?;
                let known: BTreeMap<u64, Pose> = updates
                    .iter()
                    .filter(|(id, _)| atlas.keyframes.contains_key(id))
                    .map(|(id, p)| (*id, *p))
                    .collect();
                atlas.apply_pose_update(&known)?;
                for (id, pose) in &updates {
                    if let Some(tf) = test_frames.get_mut(id) {
                        tf.pose = *pose;
                    }
                }
                run_eval(&atlas, &test_frames, train_kfs, "post_update", &mut records, &mut evals)?;
            }
            TrackerEvent::End => {
                run_eval(&atlas, &test_frames, train_kfs, "final", &mut records, &mut evals)?;
                ended = true;
            }
        }
    }
    if !ended {
        return Err(Error::MalformedStream("missing END event".into()));
    }

    let summary = RunSummary {
        mode: cfg.mode,
        n_models: atlas.models.len(),
        n_keyframes: atlas.keyframes.len(),
        n_test_frames: test_frames.len(),
        overflow_keyframes: atlas.overflow_log.len(),
        transform,
        evals,
    };

    if let Some(dir) = &out_dir {
        write_metrics_csv(&records, &dir.join("metrics.csv"))?;
        write_train_log_csv(&train_log, &dir.join("train_log.csv"))?;
        write_summary_csv(&summary.evals, &dir.join("summary.csv"))?;
        let f = std::fs::File::create(dir.join("run_summary.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &summary)?;
        save_atlas(&atlas, &dir.join("checkpoint"))?;
        write_plots(&summary.evals, &train_log, dir)?;
        write_final_renders(&atlas, &test_frames, cfg.blend_p, &dir.join("renders"))?;
    }

    Ok(RunArtifacts { summary, records, train_log, atlas, test_frames })
}

/// Run the pipeline from a stream file on disk.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunArtifacts> {
    if cfg.stream.is_empty() {
        return Err(Error::Config("no stream path given".into()));
    }
    let (intr, events) = read_stream(Path::new(&cfg.stream))?;
    run_with_events(cfg, intr, events)
}

/// Collect the held-out frames of a stream at their final corrected poses,
/// applying the same rescale a run would.
pub fn collect_test_frames(
    events: Vec<TrackerEvent>,
    rescale: bool,
) -> (SceneTransform, BTreeMap<u64, TestFrame>) {
    let transform = if rescale {
        SceneTransform::fit(&events)
    } else {
        SceneTransform::identity()
    };
    let mut events = events;
    transform.apply_events(&mut events);
    let mut out = BTreeMap::new();
    for ev in events {
        match ev {
            TrackerEvent::Keyframe { kf, test: true, .. } => {
                out.insert(kf.id, TestFrame { pose: kf.pose, image: kf.image, depth: kf.depth });
            }
            TrackerEvent::PoseUpdate(updates) => {
                for (id, pose) in updates {
                    if let Some(tf) = out.get_mut(&id) {
                        tf.pose = pose;
                    }
                }
            }
            _ => {}
        }
    }
    (transform, out)
}

/// Re-evaluate a saved atlas checkpoint against a stream's held-out frames.
pub fn eval_checkpoint(
    checkpoint: &Path,
    stream: &Path,
    blend_p: f64,
    rescale: bool,
    out: Option<&Path>,
) -> Result<Vec<MetricRecord>> {
    let atlas = load_atlas(checkpoint)?;
    let (_, events) = read_stream(stream)?;
    let (_, test_frames) = collect_test_frames(events, rescale);
    let mut records = Vec::new();
    evaluate(&atlas, &test_frames, blend_p, atlas.step_counter, "eval", &mut records)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_metrics_csv(&records, &dir.join("metrics.csv"))?;
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// CSV + report output

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_metrics_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "train_keyframes,frame_id,psnr,ssim,l1_depth,event")?;
    for r in records {
        writeln!(
            f,
            "{},{},{:.6},{:.6},{},{}",
            r.train_keyframes,
            r.frame_id,
            r.psnr,
            r.ssim,
            fmt_opt(r.l1_depth),
            r.event
        )?;
    }
    Ok(())
}

fn write_train_log_csv(rows: &[TrainLogRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,keyframe,model_id,rgb,dist,prop,depth,total")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{:.6},{},{:.6}",
            r.step, r.keyframe, r.model_id, r.rgb, r.dist, r.prop, fmt_opt(r.depth), r.total
        )?;
    }
    Ok(())
}

pub fn write_summary_csv(evals: &[EvalSummary], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "train_keyframes,event,n_frames,mean_psnr,mean_ssim,mean_l1_depth")?;
    for e in evals {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{}",
            e.train_keyframes,
            e.event,
            e.n_frames,
            e.mean_psnr,
            e.mean_ssim,
            fmt_opt(e.mean_l1_depth)
        )?;
    }
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<EvalSummary>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Config(format!("bad summary row: {line}")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Config(format!("bad number `{s}`")))
        };
        out.push(EvalSummary {
            train_keyframes: cols[0]
                .parse()
                .map_err(|_| Error::Config(format!("bad count `{}`", cols[0])))?,
            event: cols[1].to_string(),
            n_frames: cols[2]
                .parse()
                .map_err(|_| Error::Config(format!("bad count `{}`", cols[2])))?,
            mean_psnr: parse(cols[3])?,
            mean_ssim: parse(cols[4])?,
            mean_l1_depth: if cols[5].is_empty() { None } else { Some(parse(cols[5])?) },
        });
    }
    Ok(out)
}

fn write_final_renders(
    atlas: &AtlasState,
    test_frames: &BTreeMap<u64, TestFrame>,
    blend_p: f64,
    dir: &Path,
) -> Result<()> {
    if atlas.models.is_empty() || test_frames.is_empty() {
        return Ok(());
    }
    std::fs::create_dir_all(dir)?;
    for (id, tf) in test_frames {
        let view = render_novel_view(atlas, &tf.pose, &atlas.intrinsics, blend_p, false)?;
        view.color.save_png(&dir.join(format!("render_{id:05}.png")))?;
        view.depth.save_png(&dir.join(format!("render_{id:05}_depth.png")))?;
        tf.image.save_png(&dir.join(format!("gt_{id:05}.png")))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// SVG plots (no plotting dependency; plain polyline charts)

const PLOT_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Write a simple line chart. Each series is (label, points).
pub fn write_line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 50.0);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
    let (mut x0, mut x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        w / 2.0
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n",
        (ml + w - mr) / 2.0,
        h - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{y_label}</text>\n",
        (mt + h - mb) / 2.0
    ));
    // Min/max tick labels.
    svg.push_str(&format!(
        "<text x=\"{ml}\" y=\"{0}\" text-anchor=\"middle\">{x0:.3}</text>\n\
         <text x=\"{1}\" y=\"{0}\" text-anchor=\"middle\">{x1:.3}</text>\n",
        h - mb + 18.0,
        w - mr
    ));
    svg.push_str(&format!(
        "<text x=\"{0}\" y=\"{1}\" text-anchor=\"end\">{y0:.3}</text>\n\
         <text x=\"{0}\" y=\"{2}\" text-anchor=\"end\">{y1:.3}</text>\n",
        ml - 6.0,
        h - mb + 4.0,
        mt + 4.0
    ));
    for (i, (label, points)) in series.iter().enumerate() {
        let color = PLOT_COLORS[i % PLOT_COLORS.len()];
        if !points.is_empty() {
            let path_pts: Vec<String> = points
                .iter()
                .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
                .collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path_pts.join(" ")
            ));
            for (x, y) in points {
                svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                    sx(*x),
                    sy(*y)
                ));
            }
        }
        let ly = mt + 14.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{0}\" y=\"{1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{2}\" y=\"{3}\">{label}</text>\n",
            w - mr - 150.0,
            ly,
            w - mr - 135.0,
            ly + 9.0
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

fn write_plots(evals: &[EvalSummary], train_log: &[TrainLogRow], dir: &Path) -> Result<()> {
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    let psnr_pts: Vec<(f64, f64)> = evals
        .iter()
        .map(|e| (e.train_keyframes as f64, e.mean_psnr))
        .collect();
    let ssim_pts: Vec<(f64, f64)> = evals
        .iter()
        .map(|e| (e.train_keyframes as f64, e.mean_ssim))
        .collect();
    write_line_plot(
        &plots.join("psnr.svg"),
        "Held-out PSNR over training",
        "training keyframes",
        "PSNR (dB)",
        &[("mean PSNR".to_string(), psnr_pts)],
    )?;
    write_line_plot(
        &plots.join("ssim.svg"),
        "Held-out SSIM over training",
        "training keyframes",
        "SSIM",
        &[("mean SSIM".to_string(), ssim_pts)],
    )?;
    let loss_pts: Vec<(f64, f64)> = train_log
        .iter()
        .map(|r| (r.step as f64, r.total))
        .collect();
    write_line_plot(
        &plots.join("loss.svg"),
        "Training loss",
        "training step",
        "total loss",
        &[("total loss".to_string(), loss_pts)],
    )?;
    Ok(())
}

/// Side-by-side report over run directories (each must contain summary.csv
/// from a completed run). Writes report.txt and a PSNR comparison plot.
pub fn emit_report(run_dirs: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut report = String::new();
    let mut series = Vec::new();
    for dir in run_dirs {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let evals = read_summary_csv(&dir.join("summary.csv"))?;
        report.push_str(&format!("== {name} ==\n"));
        report.push_str("train_kfs  event         n   psnr      ssim      l1_depth\n");
        for e in &evals {
            report.push_str(&format!(
                "{:<10} {:<13} {:<3} {:<9.3} {:<9.4} {}\n",
                e.train_keyframes,
                e.event,
                e.n_frames,
                e.mean_psnr,
                e.mean_ssim,
                fmt_opt(e.mean_l1_depth)
            ));
        }
        report.push('\n');
        series.push((
            name,
            evals
                .iter()
                .map(|e| (e.train_keyframes as f64, e.mean_psnr))
                .collect::<Vec<_>>(),
        ));
    }
    std::fs::write(out.join("report.txt"), &report)?;
    write_line_plot(
        &out.join("psnr_compare.svg"),
        "Held-out PSNR comparison",
        "training keyframes",
        "PSNR (dB)",
        &series,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AtlasConfig, FieldConfig, GridConfig, RenderConfig};
    use crate::tracksim::{generate_stream, StreamSpec, TrajectoryKind};

    fn tiny_field() -> FieldConfig {
        FieldConfig {
            grid: GridConfig {
                levels: 3,
                features_per_level: 2,
                base_resolution: 4,
                growth_factor: 1.6,
                hash_table_size: 512,
            },
            proposal_grid: GridConfig {
                levels: 2,
                features_per_level: 2,
                base_resolution: 4,
                growth_factor: 1.6,
                hash_table_size: 256,
            },
            geo_features: 4,
            density_hidden: vec![16],
            color_hidden: vec![16],
            proposal_hidden: vec![8],
            occupancy_resolution: 8,
            w_occ: 1e-2,
            grid_init_scale: 1e-4,
        }
    }

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            seed: 5,
            train_steps_per_keyframe: 2,
            eval_interval: 5,
            blend_p: 4.0,
            atlas: AtlasConfig {
                rays_per_step: 24,
                field: tiny_field(),
                render: RenderConfig {
                    proposal_samples: 8,
                    main_samples: 6,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_stream() -> (CameraIntrinsics, Vec<TrackerEvent>) {
        let spec = StreamSpec {
            kind: TrajectoryKind::Loop { radius: 2.0 },
            n_frames: 10,
            intrinsics: CameraIntrinsics {
                fx: 16.0,
                fy: 16.0,
                cx: 8.0,
                cy: 8.0,
                width: 16,
                height: 16,
            },
            loop_close_at: Some(8),
            holdout_every: 5,
            seed: 2,
            ..Default::default()
        };
        (spec.intrinsics.clone(), generate_stream(&spec).unwrap())
    }

    #[test]
    fn pipeline_runs_end_to_end_and_evaluates() {
        let (intr, events) = tiny_stream();
        let arts = run_with_events(&tiny_cfg(), intr, events).unwrap();
        assert!(arts.summary.n_keyframes >= 8);
        assert!(arts.summary.n_test_frames == 2);
        // pre/post update and final evals all ran.
        let events_seen: BTreeSet<&str> =
            arts.records.iter().map(|r| r.event.as_str()).collect();
        assert!(events_seen.contains("pre_update"));
        assert!(events_seen.contains("post_update"));
        assert!(events_seen.contains("final"));
        assert!(arts.records.iter().all(|r| r.psnr.is_finite()));
        assert!(!arts.train_log.is_empty());
        assert!(arts.train_log.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn pipeline_is_deterministic() {
        let run = || {
            let (intr, events) = tiny_stream();
            let arts = run_with_events(&tiny_cfg(), intr, events).unwrap();
            (
                arts.atlas.total_param_checksum(),
                arts.records
                    .iter()
                    .map(|r| (r.frame_id, r.psnr.to_bits(), r.ssim.to_bits()))
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn world_centric_mode_builds_one_model() {
        let (intr, events) = tiny_stream();
        let mut cfg = tiny_cfg();
        cfg.mode = RunMode::WorldCentricSingle;
        let arts = run_with_events(&cfg, intr, events).unwrap();
        assert_eq!(arts.summary.n_models, 1);
        assert!(arts.atlas.world_centric);
    }

    #[test]
    fn rescale_moves_trajectory_into_unit_sphere() {
        let (intr, events) = tiny_stream();
        // The fitted transform puts the stamped trajectory inside the unit
        // sphere (later pose corrections may nudge poses slightly past it).
        let t = SceneTransform::fit(&events);
        let mut rescaled = events.clone();
        t.apply_events(&mut rescaled);
        let mut max_norm: f64 = 0.0;
        for ev in &rescaled {
            if let TrackerEvent::Keyframe { kf, .. } = ev {
                max_norm = max_norm.max(kf.pose.translation.norm());
            }
        }
        assert!((max_norm - 1.0).abs() < 1e-9, "max norm {max_norm}");
        // The pipeline records the same transform.
        let arts = run_with_events(&tiny_cfg(), intr, events).unwrap();
        assert!((arts.summary.transform.scale - t.scale).abs() < 1e-15);
    }

    #[test]
    fn empty_stream_is_a_clean_no_op() {
        let intr = CameraIntrinsics {
            fx: 16.0,
            fy: 16.0,
            cx: 8.0,
            cy: 8.0,
            width: 16,
            height: 16,
        };
        let arts = run_with_events(&tiny_cfg(), intr, vec![TrackerEvent::End]).unwrap();
        assert_eq!(arts.summary.n_keyframes, 0);
        assert!(arts.records.is_empty());
    }

    #[test]
    fn missing_end_event_is_rejected() {
        let intr = CameraIntrinsics {
            fx: 16.0,
            fy: 16.0,
            cx: 8.0,
            cy: 8.0,
            width: 16,
            height: 16,
        };
        assert!(matches!(
            run_with_events(&tiny_cfg(), intr, vec![]),
            Err(Error::MalformedStream(_))
        ));
    }

    #[test]
    fn run_artifacts_written_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (intr, events) = tiny_stream();
        let mut cfg = tiny_cfg();
        cfg.out = dir.path().join("run").to_string_lossy().into_owned();
        run_with_events(&cfg, intr, events).unwrap();
        let run = dir.path().join("run");
        for f in [
            "config.toml",
            "metrics.csv",
            "train_log.csv",
            "summary.csv",
            "run_summary.json",
            "plots/psnr.svg",
            "plots/loss.svg",
            "checkpoint/manifest.json",
        ] {
            assert!(run.join(f).exists(), "missing {f}");
        }
        // Summary CSV round-trips.
        let evals = read_summary_csv(&run.join("summary.csv")).unwrap();
        assert!(!evals.is_empty());
        // Checkpoint re-evaluates: write the stream to disk and score it.
        let sdir = dir.path().join("stream");
        let spec = StreamSpec {
            kind: TrajectoryKind::Loop { radius: 2.0 },
            n_frames: 10,
            intrinsics: CameraIntrinsics {
                fx: 16.0,
                fy: 16.0,
                cx: 8.0,
                cy: 8.0,
                width: 16,
                height: 16,
            },
            loop_close_at: Some(8),
            holdout_every: 5,
            seed: 2,
            ..Default::default()
        };
        let events = generate_stream(&spec).unwrap();
        let spath = crate::tracksim::write_stream(&events, &spec.intrinsics, &sdir).unwrap();
        let records =
            eval_checkpoint(&run.join("checkpoint"), &spath, 4.0, true, None).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records.iter().all(|r| r.psnr.is_finite()));
    }

    #[test]
    fn report_compares_two_runs() {
        let dir = tempfile::tempdir().unwrap();
        let evals = vec![EvalSummary {
            train_keyframes: 5,
            event: "interval".into(),
            n_frames: 2,
            mean_psnr: 20.0,
            mean_ssim: 0.8,
            mean_l1_depth: Some(0.1),
        }];
        for name in ["a", "b"] {
            let d = dir.path().join(name);
            std::fs::create_dir_all(&d).unwrap();
            write_summary_csv(&evals, &d.join("summary.csv")).unwrap();
        }
        let out = dir.path().join("report");
        emit_report(&[dir.path().join("a"), dir.path().join("b")], &out).unwrap();
        let text = std::fs::read_to_string(out.join("report.txt")).unwrap();
        assert!(text.contains("== a =="));
        assert!(text.contains("== b =="));
        assert!(out.join("psnr_compare.svg").exists());
    }
}
