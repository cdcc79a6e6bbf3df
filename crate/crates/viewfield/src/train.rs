//! Reverse-mode training pass for one model over a ray minibatch.
//!
//! The forward pass runs proposal sampling, inverse-CDF resampling, the
//! main field, compositing, and the loss stack; the backward pass
//! accumulates hand-derived adjoints into a flat gradient vector matching
//! the model's parameter layout.
//!
//! Sample boundaries are treated as constants of the optimization (the
//! resampling is not differentiated through); the main-field weights are
//! detached inside the proposal loss so its gradient reaches only the
//! proposal parameters. A [`FrozenBatch`] captures boundaries and detached
//! weights so the same differentiable function can be re-evaluated for
//! finite-difference checks.

use rand::RngCore;

use crate::config::{LossWeights, RenderConfig};
use crate::error::Result;
use crate::geom::{to_contracted, ContractedPoint, Ray};
use crate::mlp::{mlp_backward, mlp_forward, sigmoid, softplus, MlpCache};
use crate::model::LocalFieldModel;
use crate::render::{
    composite, composite_backward, loss_distortion, loss_distortion_grad, loss_proposal,
    loss_proposal_grad, loss_total, resample_from_proposal, sample_uniform_contracted, LossParts,
    RaySamples,
};

/// One supervised ray: local-frame geometry plus its target pixel.
#[derive(Debug, Clone)]
pub struct RayTarget {
    pub ray: Ray,
    pub color: [f64; 3],
    pub depth: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FrozenRay {
    pub prop_boundaries: Vec<f64>,
    pub main_boundaries: Vec<f64>,
    pub detached_weights: Vec<f64>,
}

/// Sampling decisions and detached values captured from one pass, enough to
/// re-evaluate the loss as a deterministic function of the parameters only.
#[derive(Debug, Clone, Default)]
pub struct FrozenBatch {
    pub rays: Vec<FrozenRay>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainReport {
    pub parts: LossParts,
    pub total: f64,
    pub n_rays: usize,
    pub n_depth_rays: usize,
}

/// Reusable buffers for one training pass.
pub struct TrainScratch {
    prop_points: Vec<ContractedPoint>,
    prop_feats: Vec<Vec<f64>>,
    prop_caches: Vec<MlpCache>,
    main_points: Vec<ContractedPoint>,
    main_feats: Vec<Vec<f64>>,
    density_caches: Vec<MlpCache>,
    color_ins: Vec<Vec<f64>>,
    color_caches: Vec<MlpCache>,
}

impl TrainScratch {
    pub fn new(model: &LocalFieldModel, cfg: &RenderConfig) -> TrainScratch {
        let lay = &model.layout;
        let np = cfg.proposal_samples;
        let nm = cfg.main_samples;
        TrainScratch {
            prop_points: vec![ContractedPoint { theta: 0.0, phi: 0.0, rho: 1.0 }; np],
            prop_feats: vec![vec![0.0; lay.proposal_grid.output_len()]; np],
            prop_caches: (0..np).map(|_| MlpCache::for_spec(&lay.proposal_mlp)).collect(),
            main_points: vec![ContractedPoint { theta: 0.0, phi: 0.0, rho: 1.0 }; nm],
            main_feats: vec![vec![0.0; lay.grid.output_len()]; nm],
            density_caches: (0..nm).map(|_| MlpCache::for_spec(&lay.density_mlp)).collect(),
            color_ins: vec![vec![0.0; lay.color_mlp.input_dim()]; nm],
            color_caches: (0..nm).map(|_| MlpCache::for_spec(&lay.color_mlp)).collect(),
        }
    }
}

/// Forward (and optionally backward) pass over a ray minibatch.
///
/// * `rng`: stratified jitter source for sampling; `None` uses the
///   deterministic midpoint mode.
/// * `frozen`: replay captured boundaries/detached weights instead of
///   sampling (finite-difference mode).
/// * `grads`: when given, accumulates dL_total/dparams (caller zeroes it).
/// * `occupancy_out`: collects (point, weight) pairs from the main pass.
/// * `frozen_out`: when given, captures this pass's sampling decisions.
#[allow(clippy::too_many_arguments)]
pub fn batch_pass<R: RngCore + ?Sized>(
    model: &LocalFieldModel,
    batch: &[RayTarget],
    cfg: &RenderConfig,
    lw: &LossWeights,
    rgb_only: bool,
    mut rng: Option<&mut R>,
    frozen: Option<&FrozenBatch>,
    mut grads: Option<&mut [f64]>,
    mut occupancy_out: Option<&mut Vec<(ContractedPoint, f64)>>,
    mut frozen_out: Option<&mut FrozenBatch>,
    scratch: &mut TrainScratch,
) -> Result<TrainReport> {
    let n_rays = batch.len();
    if n_rays == 0 {
        return Ok(TrainReport::default());
    }
    let n_depth_rays = if rgb_only {
        0
    } else {
        batch.iter().filter(|r| r.depth.is_some()).count()
    };
    let lay = model.layout.clone();
    let geo = model.config.geo_features;

    let grid_params = &model.params[lay.grid_offset..lay.grid_offset + lay.grid.param_count];
    let pgrid_params = &model.params
        [lay.proposal_grid_offset..lay.proposal_grid_offset + lay.proposal_grid.param_count];
    let dens_params =
        &model.params[lay.density_mlp_offset..lay.density_mlp_offset + lay.density_mlp.param_count];
    let color_params =
        &model.params[lay.color_mlp_offset..lay.color_mlp_offset + lay.color_mlp.param_count];
    let prop_params = &model.params
        [lay.proposal_mlp_offset..lay.proposal_mlp_offset + lay.proposal_mlp.param_count];

    let mut rgb_sum = 0.0;
    let mut dist_sum = 0.0;
    let mut prop_sum = 0.0;
    let mut depth_sum = 0.0;

    if let Some(f) = frozen_out.as_deref_mut() {
        f.rays.clear();
    }

    let mut d_sigmas = vec![0.0; cfg.main_samples.max(cfg.proposal_samples)];
    let mut d_colors = vec![[0.0f64; 3]; cfg.main_samples];
    let mut d_feat = vec![0.0; lay.grid.output_len().max(lay.proposal_grid.output_len())];
    let mut d_color_in = vec![0.0; lay.color_mlp.input_dim()];
    let mut d_dens_out = vec![0.0; lay.density_mlp.output_dim()];

    for (ri, rt) in batch.iter().enumerate() {
        // --- proposal pass ---
        let prop_b = match frozen {
            Some(f) => f.rays[ri].prop_boundaries.clone(),
            None => sample_uniform_contracted(cfg.proposal_samples, rng.as_deref_mut())?,
        };
        let mut prop = RaySamples::from_boundaries(prop_b, cfg);
        let np = prop.len();
        for i in 0..np {
            let c = to_contracted(&rt.ray.point_at(prop.mids_depth[i]))?;
            scratch.prop_points[i] = c;
            lay.proposal_grid
                .encode_into(pgrid_params, &c, &mut scratch.prop_feats[i]);
            mlp_forward(
                &lay.proposal_mlp,
                prop_params,
                &scratch.prop_feats[i],
                &mut scratch.prop_caches[i],
            );
            prop.sigmas[i] = softplus(scratch.prop_caches[i].output()[0]);
        }
        let prop_out = composite(&prop, &[0.0; 3]);

        // --- main boundaries ---
        let main_b = match frozen {
            Some(f) => f.rays[ri].main_boundaries.clone(),
            None => resample_from_proposal(
                &prop.boundaries,
                &prop_out.weights,
                cfg.main_samples,
                cfg.resample_floor,
                rng.as_deref_mut(),
            )?,
        };
        let mut main = RaySamples::from_boundaries(main_b, cfg);
        let nm = main.len();
        for i in 0..nm {
            let c = to_contracted(&rt.ray.point_at(main.mids_depth[i]))?;
            scratch.main_points[i] = c;
            lay.grid.encode_into(grid_params, &c, &mut scratch.main_feats[i]);
            mlp_forward(
                &lay.density_mlp,
                dens_params,
                &scratch.main_feats[i],
                &mut scratch.density_caches[i],
            );
            let dens_out = scratch.density_caches[i].output();
            main.sigmas[i] = softplus(dens_out[0]);
            scratch.color_ins[i][..geo].copy_from_slice(&dens_out[1..1 + geo]);
            scratch.color_ins[i][geo] = rt.ray.direction.x;
            scratch.color_ins[i][geo + 1] = rt.ray.direction.y;
            scratch.color_ins[i][geo + 2] = rt.ray.direction.z;
            mlp_forward(
                &lay.color_mlp,
                color_params,
                &scratch.color_ins[i],
                &mut scratch.color_caches[i],
            );
            let raw = scratch.color_caches[i].output();
            main.colors[i] = [sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])];
        }
        let out = composite(&main, &cfg.background);

        if let Some(occ) = occupancy_out.as_deref_mut() {
            for i in 0..nm {
                if out.weights[i] > model.config.w_occ {
                    occ.push((scratch.main_points[i], out.weights[i]));
                }
            }
        }

        // --- losses ---
        let mut rgb_r = 0.0;
        for ch in 0..3 {
            let d = out.color[ch] - rt.color[ch];
            rgb_r += d * d;
        }
        rgb_sum += rgb_r;
        dist_sum += loss_distortion(&out.weights, &main.boundaries);

        let detached_w: &[f64] = match frozen {
            Some(f) => &f.rays[ri].detached_weights,
            None => &out.weights,
        };
        prop_sum += loss_proposal(&main.boundaries, detached_w, &prop.boundaries, &prop_out.weights);

        let use_depth = !rgb_only && rt.depth.is_some();
        if use_depth {
            depth_sum += (out.depth - rt.depth.unwrap()).abs();
        }

        if let Some(f) = frozen_out.as_deref_mut() {
            f.rays.push(FrozenRay {
                prop_boundaries: prop.boundaries.clone(),
                main_boundaries: main.boundaries.clone(),
                detached_weights: out.weights.clone(),
            });
        }

        // --- backward ---
        let Some(g) = grads.as_deref_mut() else { continue };
        let r_inv = 1.0 / n_rays as f64;

        let d_color = [
            2.0 * (out.color[0] - rt.color[0]) * r_inv,
            2.0 * (out.color[1] - rt.color[1]) * r_inv,
            2.0 * (out.color[2] - rt.color[2]) * r_inv,
        ];
        let d_depth = if use_depth {
            let diff = out.depth - rt.depth.unwrap();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            lw.lambda_depth * sign / n_depth_rays as f64
        } else {
            0.0
        };
        let dwx = &mut d_sigmas[..nm];
        dwx.fill(0.0);
        loss_distortion_grad(&out.weights, &main.boundaries, dwx);
        for v in dwx.iter_mut() {
            *v *= lw.lambda_dist * r_inv;
        }
        let mut d_main_sigmas = vec![0.0; nm];
        composite_backward(
            &main,
            &out,
            &cfg.background,
            &d_color,
            d_depth,
            dwx,
            &mut d_main_sigmas,
            &mut d_colors[..nm],
        );

        for i in 0..nm {
            // color head
            let raw = scratch.color_caches[i].output();
            let mut d_raw = [0.0; 3];
            for ch in 0..3 {
                let s = sigmoid(raw[ch]);
                d_raw[ch] = d_colors[i][ch] * s * (1.0 - s);
            }
            mlp_backward(
                &lay.color_mlp,
                color_params,
                &mut scratch.color_caches[i],
                &d_raw,
                &mut d_color_in,
                &mut g[lay.color_mlp_offset..lay.color_mlp_offset + lay.color_mlp.param_count],
            );
            // density head: sigma + geometry features feeding the color MLP
            let dens_raw = scratch.density_caches[i].output()[0];
            d_dens_out[0] = d_main_sigmas[i] * sigmoid(dens_raw);
            d_dens_out[1..1 + geo].copy_from_slice(&d_color_in[..geo]);
            mlp_backward(
                &lay.density_mlp,
                dens_params,
                &mut scratch.density_caches[i],
                &d_dens_out,
                &mut d_feat[..lay.grid.output_len()],
                &mut g[lay.density_mlp_offset..lay.density_mlp_offset + lay.density_mlp.param_count],
            );
            lay.grid.encode_backward(
                &scratch.main_points[i],
                &d_feat[..lay.grid.output_len()],
                &mut g[lay.grid_offset..lay.grid_offset + lay.grid.param_count],
            );
        }

        // proposal branch: gradient reaches the proposal weights only
        let d_prop_w = &mut d_sigmas[..np];
        d_prop_w.fill(0.0);
        loss_proposal_grad(
            &main.boundaries,
            detached_w,
            &prop.boundaries,
            &prop_out.weights,
            d_prop_w,
        );
        for v in d_prop_w.iter_mut() {
            *v *= lw.lambda_prop * r_inv;
        }
        let mut d_prop_sigmas = vec![0.0; np];
        let d_prop_w_copy: Vec<f64> = d_prop_w.to_vec();
        composite_backward(
            &prop,
            &prop_out,
            &[0.0; 3],
            &[0.0; 3],
            0.0,
            &d_prop_w_copy,
            &mut d_prop_sigmas,
            &mut vec![[0.0; 3]; np],
        );
        for i in 0..np {
            if d_prop_sigmas[i] == 0.0 {
                continue;
            }
            let raw = scratch.prop_caches[i].output()[0];
            let d_raw = [d_prop_sigmas[i] * sigmoid(raw)];
            mlp_backward(
                &lay.proposal_mlp,
                prop_params,
                &mut scratch.prop_caches[i],
                &d_raw,
                &mut d_feat[..lay.proposal_grid.output_len()],
                &mut g[lay.proposal_mlp_offset
                    ..lay.proposal_mlp_offset + lay.proposal_mlp.param_count],
            );
            lay.proposal_grid.encode_backward(
                &scratch.prop_points[i],
                &d_feat[..lay.proposal_grid.output_len()],
                &mut g[lay.proposal_grid_offset
                    ..lay.proposal_grid_offset + lay.proposal_grid.param_count],
            );
        }
    }

    let parts = LossParts {
        rgb: rgb_sum / n_rays as f64,
        dist: dist_sum / n_rays as f64,
        prop: prop_sum / n_rays as f64,
        depth: if !rgb_only && n_depth_rays > 0 {
            Some(depth_sum / n_depth_rays as f64)
        } else {
            None
        },
    };
    Ok(TrainReport {
        parts,
        total: loss_total(&parts, lw),
        n_rays,
        n_depth_rays,
    })
}

/// Result of a finite-difference gradient audit.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

/// Compare the analytic gradient of the total loss against central finite
/// differences, replaying the captured sampling decisions so the checked
/// function is deterministic in the parameters.
pub fn finite_difference_check(
    model: &mut LocalFieldModel,
    batch: &[RayTarget],
    cfg: &RenderConfig,
    lw: &LossWeights,
    rgb_only: bool,
    seed: u64,
    step: f64,
    rel_tol: f64,
) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = TrainScratch::new(model, cfg);
    let mut grads = vec![0.0; model.layout.total];
    let mut frozen = FrozenBatch::default();
    batch_pass(
        model,
        batch,
        cfg,
        lw,
        rgb_only,
        Some(&mut rng),
        None,
        Some(&mut grads),
        None,
        Some(&mut frozen),
        &mut scratch,
    )?;

    let mut report = GradCheckReport::default();
    for i in 0..model.layout.total {
        let orig = model.params[i];
        model.params[i] = orig + step;
        let fp = batch_pass(
            model, batch, cfg, lw, rgb_only, None::<&mut dyn RngCore>, Some(&frozen), None, None, None,
            &mut scratch,
        )?
        .total;
        model.params[i] = orig - step;
        let fm = batch_pass(
            model, batch, cfg, lw, rgb_only, None::<&mut dyn RngCore>, Some(&frozen), None, None, None,
            &mut scratch,
        )?
        .total;
        model.params[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let a = grads[i];
        let denom = fd.abs().max(a.abs());
        let err = if denom < 1e-8 { 0.0 } else { (fd - a).abs() / denom };
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
        }
        if err > rel_tol {
            report.failures += 1;
        }
    }
    Ok(report)
}
