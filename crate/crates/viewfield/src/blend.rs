//! Novel-view synthesis by multi-model blending.
//!
//! Model selection is two-step: find the training view nearest the query
//! camera, rank models by their nearest member view to that keyframe, and
//! keep the top three. Blend weights fall off as an inverse power of the
//! distance from the query origin to each model's nearest training view.

use crate::atlas::AtlasState;
use crate::error::{Error, Result};
use crate::geom::{pixel_to_ray, CameraIntrinsics, Pose};
use crate::img::{DepthMap, Image};
use crate::model::FieldEval;
use crate::render::{render_ray, RenderMode};

/// Minimum distance used in the weight law (avoids a division blow-up when
/// the query sits exactly on a training view).
pub const BLEND_DIST_EPS: f64 = 1e-6;

/// Maximum number of models blended per view.
pub const BLEND_TOP_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendEntry {
    pub model_id: u64,
    /// Member training view of this model nearest to the query origin.
    pub nearest_view: u64,
    /// Clamped distance from the query origin to that view.
    pub distance: f64,
    /// Normalized blend weight.
    pub weight: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BlendSelection {
    pub entries: Vec<BlendEntry>,
}

/// Inverse-power-law weights from clamped distances: w_i ∝ d_i^-p,
/// normalized to sum to one.
pub fn blend_weights(distances: &[f64], p: f64) -> Vec<f64> {
    let raw: Vec<f64> = distances
        .iter()
        .map(|d| d.max(BLEND_DIST_EPS).powf(-p))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Pick up to [`BLEND_TOP_K`] models for a query pose and compute their
/// blend weights.
pub fn select_models(atlas: &AtlasState, query: &Pose, p: f64) -> Result<BlendSelection> {
    if atlas.models.is_empty() || atlas.keyframes.is_empty() {
        return Err(Error::EmptyAtlas);
    }
    let o = query.translation;

    // Step 1: training view nearest the query camera (ties: smaller id).
    let (&nearest_kf, _) = atlas
        .keyframes
        .iter()
        .min_by(|(ia, a), (ib, b)| {
            let da = (a.pose.translation - o).norm();
            let db = (b.pose.translation - o).norm();
            da.partial_cmp(&db).unwrap().then(ia.cmp(ib))
        })
        .expect("nonempty");
    let anchor_pos = atlas.keyframes[&nearest_kf].pose.translation;

    // Step 2: rank models by their nearest member view to that keyframe.
    let mut ranked: Vec<(f64, u64)> = atlas
        .models
        .iter()
        .filter_map(|m| {
            m.training_frames
                .iter()
                .filter_map(|f| atlas.keyframes.get(f))
                .map(|kf| (kf.pose.translation - anchor_pos).norm())
                .min_by(|a, b| a.partial_cmp(b).unwrap())
                .map(|d| (d, m.id))
        })
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    ranked.truncate(BLEND_TOP_K);

    // Weights from the query origin to each model's nearest member view.
    let mut entries: Vec<BlendEntry> = ranked
        .iter()
        .map(|&(_, id)| {
            let m = &atlas.models[id as usize];
            let (view, d) = m
                .training_frames
                .iter()
                .filter_map(|f| atlas.keyframes.get(f).map(|kf| (*f, kf)))
                .map(|(f, kf)| (f, (kf.pose.translation - o).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                .expect("model has at least one known frame");
            BlendEntry {
                model_id: id,
                nearest_view: view,
                distance: d.max(BLEND_DIST_EPS),
                weight: 0.0,
            }
        })
        .collect();
    let w = blend_weights(
        &entries.iter().map(|e| e.distance).collect::<Vec<_>>(),
        p,
    );
    for (e, w) in entries.iter_mut().zip(w) {
        e.weight = w;
    }
    Ok(BlendSelection { entries })
}

#[derive(Debug)]
pub struct NovelView {
    pub color: Image,
    pub depth: DepthMap,
    pub selection: BlendSelection,
}

/// Render a full image from the blended atlas at `query`.
pub fn render_novel_view(
    atlas: &AtlasState,
    query: &Pose,
    intr: &CameraIntrinsics,
    p: f64,
    use_skipping: bool,
) -> Result<NovelView> {
    intr.validate()?;
    let selection = select_models(atlas, query, p)?;
    let mut color = Image::new(intr.width, intr.height);
    let mut depth = DepthMap::new(intr.width, intr.height);
    let mut opac = vec![0.0f64; (intr.width * intr.height) as usize];

    for entry in &selection.entries {
        let model = atlas.model(entry.model_id)?;
        let anchor = atlas.anchor_pose(model);
        let mut ev = FieldEval::new(&model.layout);
        for y in 0..intr.height {
            for x in 0..intr.width {
                let ray = pixel_to_ray(query, intr, x as f64 + 0.5, y as f64 + 0.5, &anchor);
                let out = render_ray(
                    model,
                    &ray,
                    &atlas.config.render,
                    RenderMode::Eval,
                    use_skipping,
                    &mut ev,
                    None::<&mut dyn rand::RngCore>,
                )?;
                let i3 = color.idx(x, y);
                for c in 0..3 {
                    color.data[i3 + c] += entry.weight * out.color[c];
                }
                let i = depth.idx(x, y);
                depth.data[i] += entry.weight * out.depth;
                opac[i] += entry.weight * out.opacity;
            }
        }
    }
    for i in 0..opac.len() {
        depth.valid[i] = opac[i] > 1e-3;
    }
    Ok(NovelView {
        color,
        depth,
        selection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{AtlasState, Keyframe};
    use crate::config::{AtlasConfig, FieldConfig, GridConfig, RenderConfig};
    use nalgebra::{UnitQuaternion, Vector3};
    use std::collections::BTreeSet;

    fn tiny_atlas(anchors: &[[f64; 3]], d_th: f64) -> AtlasState {
        let cfg = AtlasConfig {
            d_th,
            max_models: 12,
            rays_per_step: 8,
            feature_propagation: false,
            field: FieldConfig {
                grid: GridConfig {
                    levels: 2,
                    features_per_level: 2,
                    base_resolution: 4,
                    growth_factor: 1.6,
                    hash_table_size: 256,
                },
                proposal_grid: GridConfig {
                    levels: 2,
                    features_per_level: 2,
                    base_resolution: 4,
                    growth_factor: 1.6,
                    hash_table_size: 256,
                },
                geo_features: 2,
                density_hidden: vec![8],
                color_hidden: vec![8],
                proposal_hidden: vec![8],
                occupancy_resolution: 8,
                w_occ: 1e-2,
                grid_init_scale: 1e-4,
            },
            render: RenderConfig {
                proposal_samples: 4,
                main_samples: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let intr = CameraIntrinsics {
            fx: 4.0,
            fy: 4.0,
            cx: 2.0,
            cy: 2.0,
            width: 4,
            height: 4,
        };
        let mut a = AtlasState::new(cfg, intr, false, 1).unwrap();
        for (i, t) in anchors.iter().enumerate() {
            let covis: BTreeSet<u64> = if i == 0 {
                BTreeSet::new()
            } else {
                [(i - 1) as u64].into_iter().collect()
            };
            a.on_keyframe(
                Keyframe {
                    id: i as u64,
                    pose: Pose::new(
                        UnitQuaternion::identity(),
                        Vector3::new(t[0], t[1], t[2]),
                    ),
                    image: Image::new(4, 4),
                    depth: None,
                    primary_model: 0,
                },
                &covis,
            )
            .unwrap();
        }
        a
    }

    fn query_at(t: [f64; 3]) -> Pose {
        Pose::new(UnitQuaternion::identity(), Vector3::new(t[0], t[1], t[2]))
    }

    #[test]
    fn single_model_gets_weight_one() {
        let a = tiny_atlas(&[[0.0; 3], [0.1, 0.0, 0.0]], 0.3);
        assert_eq!(a.models.len(), 1);
        let sel = select_models(&a, &query_at([0.05, 0.0, 0.0]), 4.0).unwrap();
        assert_eq!(sel.entries.len(), 1);
        assert_eq!(sel.entries[0].weight, 1.0);
    }

    #[test]
    fn weights_for_distances_one_and_two_at_p_four() {
        // d = (1, 2), p = 4: raw (1, 1/16) -> (16/17, 1/17).
        let w = blend_weights(&[1.0, 2.0], 4.0);
        assert!((w[0] - 16.0 / 17.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 17.0).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one_and_order_by_distance() {
        let w = blend_weights(&[0.5, 1.5, 3.0], 4.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[0] > w[1] && w[1] > w[2]);
    }

    #[test]
    fn zero_distance_is_clamped_not_infinite() {
        let w = blend_weights(&[0.0, 1.0], 4.0);
        assert!(w.iter().all(|v| v.is_finite()));
        assert!(w[0] > 0.999_999);
    }

    #[test]
    fn weights_are_scale_sensitive_but_normalized() {
        // Scaling all distances scales raw weights by a common factor, so
        // normalized weights are invariant.
        let a = blend_weights(&[1.0, 2.0, 4.0], 4.0);
        let b = blend_weights(&[3.0, 6.0, 12.0], 4.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_caps_at_three_models() {
        let a = tiny_atlas(
            &[
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [3.0, 0.0, 0.0],
                [4.0, 0.0, 0.0],
            ],
            0.3,
        );
        assert_eq!(a.models.len(), 5);
        let sel = select_models(&a, &query_at([2.0, 0.1, 0.0]), 4.0).unwrap();
        assert_eq!(sel.entries.len(), 3);
        assert!((sel.entries.iter().map(|e| e.weight).sum::<f64>() - 1.0).abs() < 1e-12);
        // Keyframe 2 is the nearest training view; it belongs to model 2
        // (primary) and model 1 (older covisible), which rank first with a
        // tie broken by the smaller id. Both share keyframe 2 as their
        // nearest member, so their weights match and dominate the third.
        assert_eq!(sel.entries[0].model_id, 1);
        assert_eq!(sel.entries[1].model_id, 2);
        assert!((sel.entries[0].weight - sel.entries[1].weight).abs() < 1e-12);
        assert!(sel.entries[1].weight > sel.entries[2].weight);
    }

    #[test]
    fn empty_atlas_is_an_error() {
        let cfg = AtlasConfig::default();
        let intr = CameraIntrinsics {
            fx: 4.0,
            fy: 4.0,
            cx: 2.0,
            cy: 2.0,
            width: 4,
            height: 4,
        };
        let a = AtlasState::new(cfg, intr, false, 1).unwrap();
        assert!(matches!(
            select_models(&a, &query_at([0.0; 3]), 4.0),
            Err(Error::EmptyAtlas)
        ));
    }

    #[test]
    fn blended_pixel_stays_in_convex_envelope() {
        let a = tiny_atlas(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], 0.3);
        let intr = a.intrinsics.clone();
        let query = query_at([1.0, 0.05, 0.0]);
        let sel = select_models(&a, &query, 4.0).unwrap();

        // Render each selected model alone and check the blend is the
        // weighted average (within fp tolerance).
        let view = render_novel_view(&a, &query, &intr, 4.0, false).unwrap();
        let mut expect = Image::new(intr.width, intr.height);
        for e in &sel.entries {
            let model = a.model(e.model_id).unwrap();
            let anchor = a.anchor_pose(model);
            let mut ev = FieldEval::new(&model.layout);
            for y in 0..intr.height {
                for x in 0..intr.width {
                    let ray =
                        pixel_to_ray(&query, &intr, x as f64 + 0.5, y as f64 + 0.5, &anchor);
                    let out = render_ray(
                        model,
                        &ray,
                        &a.config.render,
                        RenderMode::Eval,
                        false,
                        &mut ev,
                        None::<&mut dyn rand::RngCore>,
                    )
                    .unwrap();
                    let i3 = expect.idx(x, y);
                    for c in 0..3 {
                        expect.data[i3 + c] += e.weight * out.color[c];
                    }
                }
            }
        }
        for (a, b) in view.color.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
