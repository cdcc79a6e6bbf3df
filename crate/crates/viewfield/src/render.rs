//! Volume rendering along rays in contracted space: uniform and
//! proposal-guided sampling, alpha compositing, and the training losses.
//!
//! Ray boundaries live in a normalized contracted coordinate s in [0,1]:
//! s = 0 at the near plane, s = 1 at infinity, equal steps in s are equal
//! steps in inverse depth 1/(1+t).

use rand::Rng;

use crate::config::{LossWeights, RenderConfig};
use crate::error::{Error, Result};
use crate::geom::{to_contracted, Ray};
use crate::model::{FieldEval, LocalFieldModel};

/// Convert a normalized contracted boundary s into metric ray depth.
pub fn s_to_depth(s: f64, cfg: &RenderConfig) -> f64 {
    let t = (1.0 + cfg.near) / (1.0 - s).max(1e-12) - 1.0;
    t.min(cfg.far_clamp)
}

/// Samples along one ray: N strictly increasing boundaries in s-space plus
/// per-interval densities and colors.
#[derive(Debug, Clone)]
pub struct RaySamples {
    /// N+1 boundaries in [0,1].
    pub boundaries: Vec<f64>,
    /// Per-interval midpoints in s-space.
    pub mids_s: Vec<f64>,
    /// Metric depth of each interval midpoint.
    pub mids_depth: Vec<f64>,
    /// Metric length of each interval.
    pub deltas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl RaySamples {
    pub fn from_boundaries(boundaries: Vec<f64>, cfg: &RenderConfig) -> RaySamples {
        let n = boundaries.len() - 1;
        let mut mids_s = Vec::with_capacity(n);
        let mut mids_depth = Vec::with_capacity(n);
        let mut deltas = Vec::with_capacity(n);
        for i in 0..n {
            let s_mid = 0.5 * (boundaries[i] + boundaries[i + 1]);
            mids_s.push(s_mid);
            mids_depth.push(s_to_depth(s_mid, cfg));
            deltas.push(s_to_depth(boundaries[i + 1], cfg) - s_to_depth(boundaries[i], cfg));
        }
        RaySamples {
            boundaries,
            mids_s,
            mids_depth,
            deltas,
            sigmas: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mids_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mids_s.is_empty()
    }
}

/// Compositing result for one ray.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub depth: f64,
    pub weights: Vec<f64>,
    pub opacity: f64,
}

const DEPTH_EPS: f64 = 1e-8;

/// N+1 boundaries evenly spaced in s; interior boundaries are stratified
/// jittered when `rng` is given.
pub fn sample_uniform_contracted<R: rand::RngCore + ?Sized>(
    n: usize,
    mut rng: Option<&mut R>,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let mut b = Vec::with_capacity(n + 1);
    b.push(0.0);
    for k in 1..n {
        let s = match rng.as_deref_mut() {
            Some(r) => (k as f64 - 0.5 + r.gen::<f64>()) / n as f64,
            None => k as f64 / n as f64,
        };
        b.push(s);
    }
    b.push(1.0);
    Ok(b)
}

/// Inverse-CDF resampling of N+1 sorted boundaries from the piecewise
/// constant proposal weights (plus a uniform floor).
pub fn resample_from_proposal<R: rand::RngCore + ?Sized>(
    prop_boundaries: &[f64],
    prop_weights: &[f64],
    n: usize,
    floor: f64,
    mut rng: Option<&mut R>,
) -> Result<Vec<f64>> {
    let m = prop_weights.len();
    if prop_boundaries.len() != m + 1 {
        return Err(Error::ShapeMismatch(
            "proposal boundaries must be weights + 1".into(),
        ));
    }
    if prop_weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidArgument("proposal weights must be >= 0".into()));
    }
    let per_interval_floor = floor / m as f64;
    let mut cdf = Vec::with_capacity(m + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &w in prop_weights {
        acc += w + per_interval_floor;
        cdf.push(acc);
    }
    let total = acc;
    for c in cdf.iter_mut() {
        *c /= total;
    }
    cdf[m] = 1.0;

    let mut out = Vec::with_capacity(n + 1);
    let mut j = 0usize;
    for k in 0..=n {
        let u = match rng.as_deref_mut() {
            Some(r) => (k as f64 + r.gen::<f64>()) / (n + 1) as f64,
            None => k as f64 / n as f64,
        };
        while j + 1 < m && cdf[j + 1] <= u {
            j += 1;
        }
        // re-scan from the start when u is not monotone (cannot happen here,
        // both modes emit sorted u)
        let seg = (cdf[j + 1] - cdf[j]).max(1e-300);
        let frac = ((u - cdf[j]) / seg).clamp(0.0, 1.0);
        out.push(prop_boundaries[j] + frac * (prop_boundaries[j + 1] - prop_boundaries[j]));
    }
    // enforce strict monotonicity against duplicate quantiles
    for i in 1..out.len() {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1] + 1e-12;
        }
    }
    let last = *out.last().unwrap();
    if last > 1.0 {
        let scale = 1.0 / last;
        for v in out.iter_mut() {
            *v *= scale;
        }
    }
    Ok(out)
}

/// Front-to-back alpha compositing with metric interval lengths.
pub fn composite(samples: &RaySamples, background: &[f64; 3]) -> RenderOutput {
    let n = samples.len();
    let mut weights = vec![0.0; n];
    let mut trans = 1.0;
    let mut color = [0.0f64; 3];
    let mut depth_acc = 0.0;
    let mut wsum = 0.0;
    for i in 0..n {
        let alpha = 1.0 - (-samples.sigmas[i] * samples.deltas[i]).exp();
        let w = trans * alpha;
        weights[i] = w;
        for ch in 0..3 {
            color[ch] += w * samples.colors[i][ch];
        }
        depth_acc += w * samples.mids_depth[i];
        wsum += w;
        trans *= 1.0 - alpha;
    }
    for ch in 0..3 {
        color[ch] += (1.0 - wsum) * background[ch];
    }
    RenderOutput {
        color,
        depth: depth_acc / wsum.max(DEPTH_EPS),
        weights,
        opacity: wsum,
    }
}

/// Backward pass of [`composite`]: given gradients w.r.t. the output color,
/// depth, and (externally, e.g. from the distortion loss) each weight,
/// produce gradients w.r.t. per-interval densities and colors.
pub fn composite_backward(
    samples: &RaySamples,
    out: &RenderOutput,
    background: &[f64; 3],
    d_color: &[f64; 3],
    d_depth: f64,
    d_weights_extra: &[f64],
    d_sigmas: &mut [f64],
    d_colors: &mut [[f64; 3]],
) {
    let n = samples.len();
    let wsum = out.opacity;
    let denom = wsum.max(DEPTH_EPS);
    let depth_num: f64 = out.depth * denom;
    // total dL/dw_i
    let mut g = vec![0.0; n];
    for i in 0..n {
        let mut gi = d_weights_extra[i];
        for ch in 0..3 {
            gi += d_color[ch] * (samples.colors[i][ch] - background[ch]);
        }
        // D = depth_num / denom; denom active only when wsum > eps
        let d_num = samples.mids_depth[i];
        gi += d_depth
            * if wsum > DEPTH_EPS {
                (d_num * denom - depth_num) / (denom * denom)
            } else {
                d_num / DEPTH_EPS
            };
        g[i] = gi;
        d_colors[i] = [
            d_color[0] * out.weights[i],
            d_color[1] * out.weights[i],
            d_color[2] * out.weights[i],
        ];
    }
    // dL/dsigma_k = delta_k * ( g_k * T_{k+1} - sum_{i>k} g_i w_i )
    // where T_{k+1} = T_k - w_k (transmittance after interval k).
    let mut suffix = 0.0; // sum_{i>k} g_i w_i
    let mut trans_after = vec![0.0; n];
    let mut t = 1.0;
    for i in 0..n {
        t -= out.weights[i];
        trans_after[i] = t;
    }
    for k in (0..n).rev() {
        d_sigmas[k] = samples.deltas[k] * (g[k] * trans_after[k] - suffix);
        suffix += g[k] * out.weights[k];
    }
}

/// Mean squared color error over a batch of rays.
pub fn loss_rgb(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch("rgb batch lengths differ".into()));
    }
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for ch in 0..3 {
            let d = p[ch] - t[ch];
            acc += d * d;
        }
    }
    Ok(acc / pred.len() as f64)
}

/// Distortion regularizer on one ray, in normalized contracted coordinates.
pub fn loss_distortion(weights: &[f64], boundaries: &[f64]) -> f64 {
    let n = weights.len();
    let mids: Vec<f64> = (0..n).map(|i| 0.5 * (boundaries[i] + boundaries[i + 1])).collect();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += weights[i] * weights[j] * (mids[i] - mids[j]).abs();
        }
        acc += weights[i] * weights[i] * (boundaries[i + 1] - boundaries[i]) / 3.0;
    }
    acc
}

/// dL_dist/dw for one ray.
pub fn loss_distortion_grad(weights: &[f64], boundaries: &[f64], dw: &mut [f64]) {
    let n = weights.len();
    let mids: Vec<f64> = (0..n).map(|i| 0.5 * (boundaries[i] + boundaries[i + 1])).collect();
    for i in 0..n {
        let mut g = 0.0;
        for j in 0..n {
            g += 2.0 * weights[j] * (mids[i] - mids[j]).abs();
        }
        g += 2.0 / 3.0 * weights[i] * (boundaries[i + 1] - boundaries[i]);
        dw[i] += g;
    }
}

/// Sum of proposal weights whose intervals overlap `(a, b)` with positive
/// measure (boundary touching does not count).
pub fn bound(prop_boundaries: &[f64], prop_weights: &[f64], a: f64, b: f64) -> f64 {
    let mut acc = 0.0;
    for j in 0..prop_weights.len() {
        if prop_boundaries[j] < b && prop_boundaries[j + 1] > a {
            acc += prop_weights[j];
        }
    }
    acc
}

/// Proposal supervision for one ray. Main-field weights are treated as
/// constants; gradients flow only into the proposal weights.
pub fn loss_proposal(
    boundaries: &[f64],
    weights: &[f64],
    prop_boundaries: &[f64],
    prop_weights: &[f64],
) -> f64 {
    let mut acc = 0.0;
    for i in 0..weights.len() {
        let b_i = bound(prop_boundaries, prop_weights, boundaries[i], boundaries[i + 1]);
        let h = (weights[i] - b_i).max(0.0);
        acc += h * h;
    }
    acc
}

/// dL_prop/d prop_weights for one ray (accumulated into `dw_hat`).
pub fn loss_proposal_grad(
    boundaries: &[f64],
    weights: &[f64],
    prop_boundaries: &[f64],
    prop_weights: &[f64],
    dw_hat: &mut [f64],
) {
    for i in 0..weights.len() {
        let (a, b) = (boundaries[i], boundaries[i + 1]);
        let b_i = bound(prop_boundaries, prop_weights, a, b);
        let h = weights[i] - b_i;
        if h > 0.0 {
            for j in 0..prop_weights.len() {
                if prop_boundaries[j] < b && prop_boundaries[j + 1] > a {
                    dw_hat[j] -= 2.0 * h;
                }
            }
        }
    }
}

/// Mean absolute depth error over masked rays. Returns (loss, valid count).
pub fn loss_depth(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<(f64, usize)> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::ShapeMismatch("depth batch lengths differ".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            acc += (pred[i] - target[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Ok((0.0, 0));
    }
    Ok((acc / count as f64, count))
}

/// Per-batch loss components; `depth` is None in RGB-only mode or when no
/// ray had valid depth.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub rgb: f64,
    pub dist: f64,
    pub prop: f64,
    pub depth: Option<f64>,
}

pub fn loss_total(parts: &LossParts, lw: &LossWeights) -> f64 {
    parts.rgb
        + lw.lambda_dist * parts.dist
        + lw.lambda_prop * parts.prop
        + lw.lambda_depth * parts.depth.unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Train,
    Eval,
}

/// Full two-stage render of one ray: proposal pass, inverse-CDF resample,
/// main pass, composite. With `use_skipping`, samples in unoccupied cells
/// contribute zero density without evaluating the field.
pub fn render_ray<R: rand::RngCore + ?Sized>(
    model: &LocalFieldModel,
    ray: &Ray,
    cfg: &RenderConfig,
    mode: RenderMode,
    use_skipping: bool,
    ev: &mut FieldEval,
    mut rng: Option<&mut R>,
) -> Result<RenderOutput> {
    let jitter = matches!(mode, RenderMode::Train);
    let prop_b = sample_uniform_contracted(
        cfg.proposal_samples,
        if jitter { rng.as_deref_mut() } else { None },
    )?;
    let mut prop = RaySamples::from_boundaries(prop_b, cfg);
    for i in 0..prop.len() {
        let p = ray.point_at(prop.mids_depth[i]);
        let c = to_contracted(&p)?;
        prop.sigmas[i] = if use_skipping && !model.occupancy.is_occupied(&c) {
            0.0
        } else {
            model.query_proposal(&c, ev)
        };
    }
    let prop_out = composite(&prop, &[0.0; 3]);

    let main_b = resample_from_proposal(
        &prop.boundaries,
        &prop_out.weights,
        cfg.main_samples,
        cfg.resample_floor,
        if jitter { rng.as_deref_mut() } else { None },
    )?;
    let mut main = RaySamples::from_boundaries(main_b, cfg);
    for i in 0..main.len() {
        let p = ray.point_at(main.mids_depth[i]);
        let c = to_contracted(&p)?;
        if use_skipping && !model.occupancy.is_occupied(&c) {
            main.sigmas[i] = 0.0;
            main.colors[i] = [0.0; 3];
        } else {
            let (sigma, rgb) = model.query(&c, &ray.direction, ev);
            main.sigmas[i] = sigma;
            main.colors[i] = rgb;
        }
    }
    Ok(composite(&main, &cfg.background))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Deterministic (midpoint) sampling mode.
    const NO_RNG: Option<&mut ChaCha8Rng> = None;

    fn rcfg() -> RenderConfig {
        RenderConfig::default()
    }

    #[test]
    fn uniform_boundaries_basic() {
        let b = sample_uniform_contracted(1, NO_RNG).unwrap();
        assert_eq!(b, vec![0.0, 1.0]);
        let b4 = sample_uniform_contracted(4, NO_RNG).unwrap();
        assert_eq!(b4, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(sample_uniform_contracted(0, NO_RNG).is_err());
        // equal s steps are equal steps in 1/(1+t)
        let cfg = rcfg();
        let g = |s: f64| 1.0 / (1.0 + s_to_depth(s, &cfg));
        let step0 = g(b4[0]) - g(b4[1]);
        for i in 1..3 {
            assert!(((g(b4[i]) - g(b4[i + 1])) - step0).abs() < 1e-9);
        }
    }

    #[test]
    fn jittered_boundaries_uniform_within_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 8;
        let draws = 10_000;
        let mut sums = vec![0.0; n + 1];
        let mut mins = vec![f64::INFINITY; n + 1];
        let mut maxs = vec![f64::NEG_INFINITY; n + 1];
        for _ in 0..draws {
            let b = sample_uniform_contracted(n, Some(&mut rng)).unwrap();
            for (k, v) in b.iter().enumerate() {
                sums[k] += v;
                mins[k] = mins[k].min(*v);
                maxs[k] = maxs[k].max(*v);
            }
            for w in b.windows(2) {
                assert!(w[1] > w[0]);
            }
        }
        for k in 1..n {
            let mean = sums[k] / draws as f64;
            let center = k as f64 / n as f64;
            // uniform in [center - 1/(2n), center + 1/(2n)]
            assert!((mean - center).abs() < 3.0 / (12f64.sqrt() * (draws as f64).sqrt() * n as f64) * 4.0);
            assert!(mins[k] >= center - 0.5 / n as f64 - 1e-12);
            assert!(maxs[k] <= center + 0.5 / n as f64 + 1e-12);
        }
    }

    #[test]
    fn resample_uniform_weights_gives_uniform_spacing() {
        let prop_b = sample_uniform_contracted(8, NO_RNG).unwrap();
        let w = vec![0.125; 8];
        let out = resample_from_proposal(&prop_b, &w, 4, 1e-2, NO_RNG).unwrap();
        for (k, v) in out.iter().enumerate() {
            assert!((v - k as f64 / 4.0).abs() < 1e-12, "boundary {k} = {v}");
        }
    }

    #[test]
    fn resample_spike_concentrates() {
        let prop_b = sample_uniform_contracted(10, NO_RNG).unwrap();
        let mut w = vec![0.0; 10];
        w[6] = 1.0;
        let out = resample_from_proposal(&prop_b, &w, 8, 1e-2, NO_RNG).unwrap();
        let inside = out.iter().filter(|&&v| v >= 0.6 && v <= 0.7 + 1e-9).count();
        assert!(inside >= out.len() - 2, "only {inside} of {} in spike", out.len());
    }

    #[test]
    fn resample_all_zero_weights_falls_back_to_floor() {
        let prop_b = sample_uniform_contracted(8, NO_RNG).unwrap();
        let w = vec![0.0; 8];
        let out = resample_from_proposal(&prop_b, &w, 4, 1e-2, NO_RNG).unwrap();
        for (k, v) in out.iter().enumerate() {
            assert!((v - k as f64 / 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_cdf_matches_histogram() {
        // statistical oracle: empirical CDF of many stratified draws matches
        // the (floored) input CDF within 2/sqrt(n)
        let prop_b = sample_uniform_contracted(6, NO_RNG).unwrap();
        let w = vec![0.05, 0.3, 0.05, 0.4, 0.1, 0.1];
        let floor = 1e-2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut samples = Vec::new();
        let n_draws = 12_500;
        for _ in 0..n_draws {
            let out = resample_from_proposal(&prop_b, &w, 7, floor, Some(&mut rng)).unwrap();
            samples.extend(out);
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        let total: f64 = w.iter().sum::<f64>() + floor;
        let cdf_at = |x: f64| -> f64 {
            let mut acc = 0.0;
            for j in 0..w.len() {
                let (a, b) = (prop_b[j], prop_b[j + 1]);
                let q = w[j] + floor / w.len() as f64;
                if x >= b {
                    acc += q;
                } else if x > a {
                    acc += q * (x - a) / (b - a);
                }
            }
            acc / total
        };
        for x in [0.1, 0.25, 0.4, 0.55, 0.7, 0.85] {
            let emp = samples.iter().filter(|&&v| v <= x).count() as f64 / n;
            assert!(
                (emp - cdf_at(x)).abs() < 2.0 / n.sqrt() + 0.01,
                "CDF mismatch at {x}: emp {emp} expected {}",
                cdf_at(x)
            );
        }
    }

    #[test]
    fn composite_zero_density_gives_background() {
        let cfg = rcfg();
        let b = sample_uniform_contracted(8, NO_RNG).unwrap();
        let samples = RaySamples::from_boundaries(b, &cfg);
        let out = composite(&samples, &[0.2, 0.4, 0.6]);
        assert_eq!(out.color, [0.2, 0.4, 0.6]);
        assert_eq!(out.opacity, 0.0);
    }

    #[test]
    fn composite_half_alpha_analytic() {
        let cfg = rcfg();
        // single interval engineered so sigma * delta = ln 2
        let b = vec![0.0, 0.5];
        let mut samples = RaySamples::from_boundaries(b, &cfg);
        let delta = samples.deltas[0];
        samples.sigmas[0] = std::f64::consts::LN_2 / delta;
        samples.colors[0] = [1.0, 0.0, 0.5];
        let bg = [0.0, 1.0, 0.5];
        let out = composite(&samples, &bg);
        assert!((out.weights[0] - 0.5).abs() < 1e-12);
        assert!((out.color[0] - 0.5).abs() < 1e-12);
        assert!((out.color[1] - 0.5).abs() < 1e-12);
        assert!((out.color[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn composite_matches_sequential_transmittance_oracle() {
        let cfg = rcfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let b = sample_uniform_contracted(16, Some(&mut rng)).unwrap();
            let mut samples = RaySamples::from_boundaries(b, &cfg);
            for i in 0..16 {
                samples.sigmas[i] = rng.gen::<f64>() * 3.0;
                samples.colors[i] = [rng.gen(), rng.gen(), rng.gen()];
            }
            let bg = [rng.gen(), rng.gen(), rng.gen()];
            let out = composite(&samples, &bg);
            // independent brute-force oracle
            let mut color = [0.0; 3];
            let mut wsum = 0.0;
            let mut depth = 0.0;
            for i in 0..16 {
                // T_i as an explicit product
                let mut t = 1.0;
                for j in 0..i {
                    t *= (-samples.sigmas[j] * samples.deltas[j]).exp();
                }
                let alpha = 1.0 - (-samples.sigmas[i] * samples.deltas[i]).exp();
                let w = t * alpha;
                wsum += w;
                depth += w * samples.mids_depth[i];
                for ch in 0..3 {
                    color[ch] += w * samples.colors[i][ch];
                }
            }
            for ch in 0..3 {
                color[ch] += (1.0 - wsum) * bg[ch];
            }
            depth /= wsum.max(DEPTH_EPS);
            for ch in 0..3 {
                assert!((out.color[ch] - color[ch]).abs() < 1e-12);
            }
            assert!((out.depth - depth).abs() < 1e-9 * depth.abs().max(1.0));
            assert!((out.opacity - wsum).abs() < 1e-12);
            // invariants
            assert!(out.opacity <= 1.0 + 1e-6);
            let mut t = 1.0;
            for i in 0..16 {
                assert!(out.weights[i] >= 0.0 && out.weights[i] <= 1.0);
                let t_next = t - out.weights[i];
                assert!(t_next <= t + 1e-12);
                t = t_next;
            }
        }
    }

    #[test]
    fn composite_invariant_to_interval_split() {
        let cfg = rcfg();
        let b = vec![0.0, 0.3, 0.8, 1.0];
        let mut s1 = RaySamples::from_boundaries(b, &cfg);
        s1.sigmas = vec![0.5, 2.0, 0.1];
        s1.colors = vec![[0.9, 0.1, 0.2]; 3];
        let out1 = composite(&s1, &[0.0; 3]);
        // split the middle interval in two with the same sigma and color
        let b2 = vec![0.0, 0.3, 0.55, 0.8, 1.0];
        let mut s2 = RaySamples::from_boundaries(b2, &cfg);
        s2.sigmas = vec![0.5, 2.0, 2.0, 0.1];
        s2.colors = vec![[0.9, 0.1, 0.2]; 4];
        let out2 = composite(&s2, &[0.0; 3]);
        for ch in 0..3 {
            assert!((out1.color[ch] - out2.color[ch]).abs() < 1e-9);
        }
        assert!((out1.opacity - out2.opacity).abs() < 1e-9);
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let cfg = rcfg();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let b = sample_uniform_contracted(8, Some(&mut rng)).unwrap();
        let mut samples = RaySamples::from_boundaries(b, &cfg);
        for i in 0..8 {
            samples.sigmas[i] = rng.gen::<f64>() * 2.0 + 0.05;
            samples.colors[i] = [rng.gen(), rng.gen(), rng.gen()];
        }
        let bg = [0.3, 0.3, 0.3];
        let d_color = [0.7, -0.2, 0.4];
        let d_depth = 0.31;
        let d_wx: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() - 0.5).collect();
        let out = composite(&samples, &bg);
        let mut d_sigmas = vec![0.0; 8];
        let mut d_colors = vec![[0.0; 3]; 8];
        composite_backward(&samples, &out, &bg, &d_color, d_depth, &d_wx, &mut d_sigmas, &mut d_colors);

        let scalar = |s: &RaySamples| -> f64 {
            let o = composite(s, &bg);
            let mut acc = d_depth * o.depth;
            for ch in 0..3 {
                acc += d_color[ch] * o.color[ch];
            }
            for i in 0..8 {
                acc += d_wx[i] * o.weights[i];
            }
            acc
        };
        let h = 1e-6;
        for i in 0..8 {
            let mut sp = samples.clone();
            sp.sigmas[i] += h;
            let mut sm = samples.clone();
            sm.sigmas[i] -= h;
            let fd = (scalar(&sp) - scalar(&sm)) / (2.0 * h);
            assert!(
                (fd - d_sigmas[i]).abs() < 1e-5 * fd.abs().max(1.0),
                "sigma {i}: fd {fd} vs {}",
                d_sigmas[i]
            );
            for ch in 0..3 {
                let mut sp = samples.clone();
                sp.colors[i][ch] += h;
                let mut sm = samples.clone();
                sm.colors[i][ch] -= h;
                let fd = (scalar(&sp) - scalar(&sm)) / (2.0 * h);
                assert!((fd - d_colors[i][ch]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn distortion_analytic_cases() {
        assert_eq!(loss_distortion(&[0.0, 0.0], &[0.0, 0.5, 1.0]), 0.0);
        let v = loss_distortion(&[1.0], &[0.0, 1.0]);
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        // two intervals [0,.5],[.5,1] with w = (.5,.5):
        // pair term 2*(0.5*0.5*0.5) = 0.25, self term 2*(0.25*0.5)/3 = 1/12
        let v2 = loss_distortion(&[0.5, 0.5], &[0.0, 0.5, 1.0]);
        assert!((v2 - 1.0 / 3.0).abs() < 1e-12, "got {v2}");
        assert!(v2 >= 0.0);
    }

    #[test]
    fn distortion_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sample_uniform_contracted(6, Some(&mut rng)).unwrap();
        let w: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 0.3).collect();
        let mut dw = vec![0.0; 6];
        loss_distortion_grad(&w, &b, &mut dw);
        let h = 1e-7;
        for i in 0..6 {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (loss_distortion(&wp, &b) - loss_distortion(&wm, &b)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn bound_cases() {
        let tb = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let wb = vec![0.1, 0.2, 0.3, 0.4];
        // exact alignment with open-overlap rule: only the matching interval
        assert!((bound(&tb, &wb, 0.25, 0.5) - 0.2).abs() < 1e-15);
        // whole domain
        assert!((bound(&tb, &wb, 0.0, 1.0) - 1.0).abs() < 1e-15);
        // brute-force O(N^2) oracle on random partitions
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let tb = sample_uniform_contracted(7, Some(&mut rng)).unwrap();
            let wb: Vec<f64> = (0..7).map(|_| rng.gen::<f64>()).collect();
            let a = rng.gen::<f64>() * 0.8;
            let b = a + rng.gen::<f64>() * (1.0 - a);
            let mut oracle = 0.0;
            for j in 0..7 {
                let lo = tb[j].max(a);
                let hi = tb[j + 1].min(b);
                if hi > lo {
                    oracle += wb[j];
                }
            }
            assert!((bound(&tb, &wb, a, b) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn proposal_loss_cases() {
        let tb = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let w = vec![0.1, 0.2, 0.3, 0.4];
        // identical partitions: bound >= w_i elementwise, loss 0
        assert_eq!(loss_proposal(&tb, &w, &tb, &w), 0.0);
        // all-zero proposal, single w_i = 0.5
        let w2 = vec![0.0, 0.5, 0.0, 0.0];
        let zero = vec![0.0; 4];
        let l = loss_proposal(&tb, &w2, &tb, &zero);
        assert!((l - 0.25).abs() < 1e-15);
        // random instance vs direct evaluation
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let tb = sample_uniform_contracted(5, Some(&mut rng)).unwrap();
            let hb = sample_uniform_contracted(8, Some(&mut rng)).unwrap();
            let w: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() * 0.3).collect();
            let wh: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() * 0.2).collect();
            let mut direct = 0.0;
            for i in 0..5 {
                let mut b = 0.0;
                for j in 0..8 {
                    if hb[j] < tb[i + 1] && hb[j + 1] > tb[i] {
                        b += wh[j];
                    }
                }
                direct += (w[i] - b).max(0.0).powi(2);
            }
            assert!((loss_proposal(&tb, &w, &hb, &wh) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_loss_cases() {
        let (l, n) = loss_depth(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(n, 2);
        let (l, _) = loss_depth(&[1.2], &[1.0], &[true]).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
        let (l, n) = loss_depth(&[1.2], &[1.0], &[false]).unwrap();
        assert_eq!((l, n), (0.0, 0));
        assert!(loss_depth(&[1.0], &[1.0, 2.0], &[true]).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let lw = LossWeights::default();
        let z = LossParts { rgb: 0.0, dist: 0.0, prop: 0.0, depth: Some(0.0) };
        assert_eq!(loss_total(&z, &lw), 0.0);
        let ones = LossParts { rgb: 1.0, dist: 1.0, prop: 1.0, depth: Some(1.0) };
        assert!((loss_total(&ones, &lw) - 2.502).abs() < 1e-12);
        let rgb_only = LossParts { rgb: 1.0, dist: 1.0, prop: 1.0, depth: None };
        assert!((loss_total(&rgb_only, &lw) - 2.002).abs() < 1e-12);
    }

    #[test]
    fn rgb_loss_cases() {
        let a = vec![[0.1, 0.2, 0.3]];
        assert_eq!(loss_rgb(&a, &a).unwrap(), 0.0);
        let b = vec![[0.2, 0.2, 0.3]];
        assert!((loss_rgb(&b, &a).unwrap() - 0.01).abs() < 1e-15);
        assert!(loss_rgb(&a, &[]).is_err());
    }
}
