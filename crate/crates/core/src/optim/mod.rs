//! Loss assembly and hand-derived gradients.
//!
//! Total loss: `L = L_photo + alpha * L_reg + beta * L_iou` with the L1
//! photometric term, the eikonal regularizer `mean (|grad f| - 1)^2`, and
//! the two-view MoG IoU term over matched keypoint rays.
//!
//! A [`BatchPlan`] pins everything random about a step (pixels, targets,
//! per-ray depth jitters, keypoint pairs) plus the quantities deliberately
//! frozen inside the step:
//!
//! - per-ray near/far bounds (so pose gradients never differentiate the
//!   box intersection),
//! - eikonal sample positions (the regularizer anchors the field at fixed
//!   points; it carries no pose gradient),
//! - the positions at which IoU weight profiles are evaluated, and the
//!   reference-ray Gaussian means. The source ray's means stay live, which
//!   is exactly the path that steers the source pose toward overlap.
//!
//! With a fixed plan, `loss_for_plan` is a deterministic function of
//! (field, s, poses) and the analytic gradients are checked against central
//! finite differences of that same function.

pub mod adam;

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::field::{depths_from_jitter, RayForward, VoxelField};
use crate::geometry::{pixel_to_ray, Intrinsics, Pose};
use crate::img::Image;
use crate::iou::{backprop_normalized_weights, iou_pair_with_grad, MogGrid, RayMoG};
use crate::rng;
use crate::scene_graph::SceneGraph;

pub use adam::{AdamParams, AdamState, ModelOptimizer, StepOutcome, S_MIN};

/// Internal weighting knobs; the training path always uses photo = 1.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub photo: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn training(alpha: f64, beta: f64) -> Self {
        LossWeights {
            photo: 1.0,
            alpha,
            beta,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub photo: f64,
    pub eikonal: f64,
    pub iou: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct GradientSet {
    pub d_sdf: Vec<f64>,
    pub d_rgb: Vec<f64>,
    pub d_s: f64,
    /// Per touched node index: (axis-angle, translation) tangent gradient.
    pub d_pose: BTreeMap<usize, [f64; 6]>,
}

impl GradientSet {
    pub fn zeros(field: &VoxelField) -> Self {
        GradientSet {
            d_sdf: vec![0.0; field.sdf.len()],
            d_rgb: vec![0.0; field.rgb.len()],
            d_s: 0.0,
            d_pose: BTreeMap::new(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.d_s.is_finite()
            && self.d_sdf.iter().all(|g| g.is_finite())
            && self.d_rgb.iter().all(|g| g.is_finite())
            && self
                .d_pose
                .values()
                .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Frozen integration segment of one ray.
#[derive(Debug, Clone)]
pub struct RaySegment {
    pub near: f64,
    pub far: f64,
    pub jitter: Vec<f64>,
}

impl RaySegment {
    pub fn depths(&self) -> Vec<f64> {
        depths_from_jitter(self.near, self.far, &self.jitter)
    }
}

#[derive(Debug, Clone)]
pub struct PlannedRay {
    /// Index into the graph's node list (and the poses slice).
    pub node: usize,
    pub pixel: (f64, f64),
    pub target: [f64; 3],
    /// None when the ray missed the bounds at plan time; it then renders
    /// pure background and carries no gradient.
    pub segment: Option<RaySegment>,
}

#[derive(Debug, Clone)]
pub struct PlannedPair {
    pub src: PlannedRay,
    pub reference: PlannedRay,
    /// Sample positions frozen at plan time; weight profiles for both rays
    /// and the reference means evaluate here.
    pub src_frozen: Vec<Vector3<f64>>,
    pub ref_frozen: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub intrinsics: Intrinsics,
    pub background: [f64; 3],
    pub rays: Vec<PlannedRay>,
    pub pairs: Vec<PlannedPair>,
    pub eikonal_points: Vec<Vector3<f64>>,
}

impl BatchPlan {
    /// Assemble one training batch: `batch_rays - keypoint_rays` uniform
    /// pixels from the epoch's sampled images plus `keypoint_rays` matched
    /// keypoint pairs drawn from the incident matches of sampled images.
    /// Sampled images without matches hand their keypoint quota to the
    /// others; if no sampled image has matches the batch carries no pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        field: &VoxelField,
        graph: &SceneGraph,
        blurred: &[Image],
        multiset: &[usize],
        batch_rays: usize,
        keypoint_rays: usize,
        n_samples: usize,
        background: [f64; 3],
        seed: u64,
    ) -> BatchPlan {
        use rand::Rng;
        assert!(!multiset.is_empty(), "empty training multiset");
        assert!(keypoint_rays <= batch_rays);
        let intr = graph.intrinsics;
        let id_to_idx: BTreeMap<usize, usize> = graph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect();
        let mut r = rng::rng_from_seed(seed);
        let mut eikonal_points = Vec::new();

        let make_segment = |node_idx: usize,
                                u: f64,
                                v: f64,
                                r: &mut rand_chacha::ChaCha8Rng,
                                eik: &mut Vec<Vector3<f64>>|
         -> (Option<RaySegment>, Vec<Vector3<f64>>) {
            let pose = &graph.nodes[node_idx].pose;
            let ray = pixel_to_ray(pose, &intr, u, v).expect("keypoint inside image");
            match field.bounds.intersect_ray(&ray) {
                Some((near, far)) if far > near + 1e-9 => {
                    let jitter: Vec<f64> = (0..n_samples).map(|_| r.gen::<f64>()).collect();
                    let seg = RaySegment { near, far, jitter };
                    let positions: Vec<Vector3<f64>> = seg
                        .depths()
                        .iter()
                        .map(|&t| ray.origin + t * ray.direction)
                        .collect();
                    eik.extend(positions.iter().copied());
                    (Some(seg), positions)
                }
                _ => (None, Vec::new()),
            }
        };

        let photo_count = batch_rays - keypoint_rays;
        let mut rays = Vec::with_capacity(photo_count);
        for _ in 0..photo_count {
            let id = multiset[r.gen_range(0..multiset.len())];
            let idx = id_to_idx[&id];
            let px = r.gen_range(0..intr.width);
            let py = r.gen_range(0..intr.height);
            let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
            let target = blurred[idx].get(px, py);
            let (segment, _) = make_segment(idx, u, v, &mut r, &mut eikonal_points);
            rays.push(PlannedRay {
                node: idx,
                pixel: (u, v),
                target,
                segment,
            });
        }

        // Keypoint pairs from sampled images that have incident matches.
        let mut incident_cache: BTreeMap<usize, Vec<crate::scene_graph::IncidentMatch>> =
            BTreeMap::new();
        let candidates: Vec<usize> = multiset
            .iter()
            .copied()
            .filter(|&id| {
                !incident_cache
                    .entry(id)
                    .or_insert_with(|| graph.incident_matches(id))
                    .is_empty()
            })
            .collect();
        let mut pairs = Vec::new();
        if candidates.is_empty() {
            if keypoint_rays > 0 {
                log::debug!("no sampled image has matches: batch carries no keypoint pairs");
            }
        } else {
            for _ in 0..keypoint_rays {
                let id = candidates[r.gen_range(0..candidates.len())];
                let inc = &incident_cache[&id];
                let m = inc[r.gen_range(0..inc.len())];
                let src_idx = id_to_idx[&id];
                let ref_idx = id_to_idx[&m.other_node];
                let src_target = blurred[src_idx].bilinear(m.own_kp.0, m.own_kp.1);
                let ref_target = blurred[ref_idx].bilinear(m.other_kp.0, m.other_kp.1);
                let (src_segment, src_frozen) =
                    make_segment(src_idx, m.own_kp.0, m.own_kp.1, &mut r, &mut eikonal_points);
                let (ref_segment, ref_frozen) = make_segment(
                    ref_idx,
                    m.other_kp.0,
                    m.other_kp.1,
                    &mut r,
                    &mut eikonal_points,
                );
                pairs.push(PlannedPair {
                    src: PlannedRay {
                        node: src_idx,
                        pixel: m.own_kp,
                        target: src_target,
                        segment: src_segment,
                    },
                    reference: PlannedRay {
                        node: ref_idx,
                        pixel: m.other_kp,
                        target: ref_target,
                        segment: ref_segment,
                    },
                    src_frozen,
                    ref_frozen,
                });
            }
        }

        BatchPlan {
            intrinsics: intr,
            background,
            rays,
            pairs,
            eikonal_points,
        }
    }

    pub fn n_rays(&self) -> usize {
        self.rays.len() + 2 * self.pairs.len()
    }
}

/// Mean absolute error over pixels and channels, with its gradient w.r.t.
/// the rendered values (subgradient zero at exact ties).
pub fn photometric_loss(
    rendered: &[[f64; 3]],
    reference: &[[f64; 3]],
) -> (f64, Vec<[f64; 3]>) {
    assert_eq!(rendered.len(), reference.len());
    let denom = (rendered.len() * 3) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(rendered.len());
    for (c, i) in rendered.iter().zip(reference) {
        let mut g = [0.0; 3];
        for ch in 0..3 {
            let d = c[ch] - i[ch];
            loss += d.abs();
            g[ch] = if d > 0.0 {
                1.0 / denom
            } else if d < 0.0 {
                -1.0 / denom
            } else {
                0.0
            };
        }
        grads.push(g);
    }
    (loss / denom, grads)
}

/// Mean squared deviation of the SDF gradient norm from 1 over the given
/// points, with its gradient into the SDF grid. Points with vanishing
/// gradient contribute loss 1 and zero gradient.
pub fn eikonal_loss(field: &VoxelField, points: &[Vector3<f64>]) -> (f64, Vec<f64>) {
    let mut d_sdf = vec![0.0; field.sdf.len()];
    if points.is_empty() {
        return (0.0, d_sdf);
    }
    let k = points.len() as f64;
    let mut loss = 0.0;
    for p in points {
        let cell = field.cell_at(p);
        let g = field.sdf_gradient_in_cell(&cell);
        let norm = g.norm();
        if norm < 1e-12 {
            loss += 1.0;
            continue;
        }
        let dev = norm - 1.0;
        loss += dev * dev;
        // d/dgrid = 2 (|g| - 1) / |g| * (g . dW_corner) / k
        let coef = 2.0 * dev / (norm * k);
        for c in 0..8 {
            let dw = cell.dw[c];
            d_sdf[cell.idx[c]] += coef * (g[0] * dw[0] + g[1] * dw[1] + g[2] * dw[2]);
        }
    }
    (loss / k, d_sdf)
}

#[derive(Debug)]
pub struct BatchOutput {
    pub losses: LossBreakdown,
    pub grads: Option<GradientSet>,
    pub iou_pairs_used: usize,
    pub iou_pairs_skipped: usize,
}

struct LiveRender {
    node: usize,
    target: [f64; 3],
    dir: Vector3<f64>,
    fwd: Option<RayForward>,
}

fn render_live(
    field: &VoxelField,
    poses: &[Pose],
    intr: &Intrinsics,
    pr: &PlannedRay,
    background: [f64; 3],
) -> LiveRender {
    match &pr.segment {
        None => LiveRender {
            node: pr.node,
            target: pr.target,
            dir: Vector3::zeros(),
            fwd: None,
        },
        Some(seg) => {
            let ray = pixel_to_ray(&poses[pr.node], intr, pr.pixel.0, pr.pixel.1)
                .expect("planned pixel inside image");
            let ts = seg.depths();
            let fwd = RayForward::compute(field, &ray, &ts, background);
            LiveRender {
                node: pr.node,
                target: pr.target,
                dir: ray.direction,
                fwd: Some(fwd),
            }
        }
    }
}

/// The full forward pass (and optionally backward) for one planned batch.
pub fn evaluate_batch(
    field: &VoxelField,
    poses: &[Pose],
    plan: &BatchPlan,
    weights: LossWeights,
    with_grads: bool,
) -> BatchOutput {
    let bg = plan.background;
    let intr = &plan.intrinsics;
    let n_rays = plan.n_rays();

    // Live renders for every ray (photometric path).
    let mut live: Vec<LiveRender> = Vec::with_capacity(n_rays);
    for pr in &plan.rays {
        live.push(render_live(field, poses, intr, pr, bg));
    }
    for pair in &plan.pairs {
        live.push(render_live(field, poses, intr, &pair.src, bg));
        live.push(render_live(field, poses, intr, &pair.reference, bg));
    }

    let rendered: Vec<[f64; 3]> = live
        .iter()
        .map(|lr| lr.fwd.as_ref().map_or(bg, |f| f.color))
        .collect();
    let targets: Vec<[f64; 3]> = live.iter().map(|lr| lr.target).collect();
    let (photo, d_rendered) = photometric_loss(&rendered, &targets);

    let mut grads = if with_grads {
        Some(GradientSet::zeros(field))
    } else {
        None
    };

    // Eikonal over the plan's frozen points.
    let (eik, d_sdf_eik) = if weights.alpha != 0.0 || !with_grads {
        eikonal_loss(field, &plan.eikonal_points)
    } else {
        (eikonal_loss(field, &plan.eikonal_points).0, Vec::new())
    };
    if let Some(g) = grads.as_mut() {
        if weights.alpha != 0.0 {
            for (dst, src) in g.d_sdf.iter_mut().zip(&d_sdf_eik) {
                *dst += weights.alpha * src;
            }
        }
    }

    // IoU pairs: weight profiles at frozen positions (live field), source
    // means live (pose path), reference means frozen.
    let mog_grid = MogGrid::new(field.bounds);
    let mut iou_sum = 0.0;
    let mut iou_used = 0usize;
    let mut iou_skipped = 0usize;
    struct PairBackward {
        src_live_index: usize,
        src_frozen_fwd: RayForward,
        ref_frozen_fwd: RayForward,
        mog_src: RayMoG,
        mog_ref: RayMoG,
        grad: crate::iou::MogPairGrad,
    }
    let mut pair_backwards: Vec<PairBackward> = Vec::new();
    for (pi, pair) in plan.pairs.iter().enumerate() {
        let src_live_index = plan.rays.len() + 2 * pi;
        let (Some(src_seg), Some(ref_seg)) = (&pair.src.segment, &pair.reference.segment)
        else {
            iou_skipped += 1;
            continue;
        };
        let src_live_fwd = live[src_live_index].fwd.as_ref().expect("segment exists");
        let src_frozen_fwd =
            RayForward::compute_at(field, src_seg.depths(), pair.src_frozen.clone(), bg);
        let ref_frozen_fwd =
            RayForward::compute_at(field, ref_seg.depths(), pair.ref_frozen.clone(), bg);
        // Source means follow the live ray; selection and weights come from
        // the frozen profile.
        let mog_src = RayMoG::from_weight_profile(
            &src_frozen_fwd.weights,
            &src_frozen_fwd.ts,
            &src_live_fwd.positions,
        );
        let mog_ref = RayMoG::from_weight_profile(
            &ref_frozen_fwd.weights,
            &ref_frozen_fwd.ts,
            &ref_frozen_fwd.positions,
        );
        if mog_src.is_empty() || mog_ref.is_empty() {
            iou_skipped += 1;
            continue;
        }
        let grad = iou_pair_with_grad(&mog_src, &mog_ref, &mog_grid);
        iou_sum += grad.loss;
        iou_used += 1;
        if with_grads {
            pair_backwards.push(PairBackward {
                src_live_index,
                src_frozen_fwd,
                ref_frozen_fwd,
                mog_src,
                mog_ref,
                grad,
            });
        }
    }
    let iou = if iou_used > 0 {
        iou_sum / iou_used as f64
    } else {
        0.0
    };
    debug_assert!(iou >= -1e-6, "iou loss {iou} below bound");

    let total = weights.photo * photo + weights.alpha * eik + weights.beta * iou;

    if let Some(g) = grads.as_mut() {
        // Photometric backward through every live ray.
        for (ri, lr) in live.iter().enumerate() {
            let Some(fwd) = &lr.fwd else { continue };
            let d_color_out = [
                weights.photo * d_rendered[ri][0],
                weights.photo * d_rendered[ri][1],
                weights.photo * d_rendered[ri][2],
            ];
            backprop_ray(field, g, fwd, lr.node, lr.dir, d_color_out, bg);
        }

        // IoU backward.
        if weights.beta != 0.0 && iou_used > 0 {
            let scale = weights.beta / iou_used as f64;
            for pb in &pair_backwards {
                // Field path through both frozen weight profiles.
                for (mog, fwd, d_norm) in [
                    (&pb.mog_src, &pb.src_frozen_fwd, &pb.grad.d_weight_a),
                    (&pb.mog_ref, &pb.ref_frozen_fwd, &pb.grad.d_weight_b),
                ] {
                    let d_w = backprop_normalized_weights(
                        mog,
                        &fwd.weights,
                        d_norm,
                        fwd.weights.len(),
                    );
                    let d_alpha = fwd.backprop_weights_to_alphas(&d_w);
                    let (d_f, d_s) = fwd.backprop_alphas_to_sdf(&d_alpha, field.inv_std);
                    g.d_s += scale * d_s;
                    for (i, cell) in fwd.cells.iter().enumerate() {
                        if d_f[i] == 0.0 {
                            continue;
                        }
                        for c in 0..8 {
                            g.d_sdf[cell.idx[c]] += scale * d_f[i] * cell.w[c];
                        }
                    }
                }
                // Pose path through the live source means.
                let lr = &live[pb.src_live_index];
                let src_fwd = lr.fwd.as_ref().expect("live source forward");
                let entry = g.d_pose.entry(lr.node).or_insert([0.0; 6]);
                for (k, comp) in pb.mog_src.components.iter().enumerate() {
                    let gv = scale * pb.grad.d_mean_a[k];
                    let t_i = src_fwd.ts[comp.sample_index];
                    let omega = t_i * lr.dir.cross(&gv);
                    entry[0] += omega[0];
                    entry[1] += omega[1];
                    entry[2] += omega[2];
                    entry[3] += gv[0];
                    entry[4] += gv[1];
                    entry[5] += gv[2];
                }
            }
        }
    }

    BatchOutput {
        losses: LossBreakdown {
            photo,
            eikonal: eik,
            iou,
            total,
            alpha: weights.alpha,
            beta: weights.beta,
        },
        grads,
        iou_pairs_used: iou_used,
        iou_pairs_skipped: iou_skipped,
    }
}

/// Reverse pass of one rendered ray: given dL/d(output color), accumulate
/// gradients into the grids, the sharpness, and the ray's camera pose
/// (through sample positions).
fn backprop_ray(
    field: &VoxelField,
    g: &mut GradientSet,
    fwd: &RayForward,
    node: usize,
    dir: Vector3<f64>,
    d_color_out: [f64; 3],
    background: [f64; 3],
) {
    if d_color_out.iter().all(|&v| v == 0.0) {
        return;
    }
    let n = fwd.positions.len();
    if n < 2 {
        return;
    }
    let m = n - 1;

    // dL/dw_i and per-sample color gradients.
    let mut d_w = vec![0.0; m];
    let mut d_colors = vec![[0.0f64; 3]; m];
    for i in 0..m {
        let mut acc = 0.0;
        for ch in 0..3 {
            acc += d_color_out[ch] * (fwd.colors[i][ch] - background[ch]);
            d_colors[i][ch] = fwd.weights[i] * d_color_out[ch];
        }
        d_w[i] = acc;
    }

    let d_alpha = fwd.backprop_weights_to_alphas(&d_w);
    let (d_f, d_s) = fwd.backprop_alphas_to_sdf(&d_alpha, field.inv_std);
    g.d_s += d_s;

    let pose_entry = g.d_pose.entry(node).or_insert([0.0; 6]);
    for i in 0..n {
        let cell = &fwd.cells[i];
        // Grid scatter: sdf via the alpha chain, rgb via sample colors.
        if d_f[i] != 0.0 {
            for c in 0..8 {
                g.d_sdf[cell.idx[c]] += d_f[i] * cell.w[c];
            }
        }
        let mut spatial = Vector3::zeros();
        if d_f[i] != 0.0 {
            spatial += d_f[i] * field.sdf_gradient_in_cell(cell);
        }
        if i < m {
            let in_range = &fwd.rgb_in_range[i];
            for ch in 0..3 {
                let dc = d_colors[i][ch];
                if dc == 0.0 || !in_range[ch] {
                    continue;
                }
                let mut grad_ch = Vector3::zeros();
                for c in 0..8 {
                    let v = field.rgb[cell.idx[c] * 3 + ch];
                    g.d_rgb[cell.idx[c] * 3 + ch] += dc * cell.w[c];
                    grad_ch[0] += v * cell.dw[c][0];
                    grad_ch[1] += v * cell.dw[c][1];
                    grad_ch[2] += v * cell.dw[c][2];
                }
                spatial += dc * grad_ch;
            }
        }
        if spatial != Vector3::zeros() {
            let t_i = fwd.ts[i];
            let omega = t_i * dir.cross(&spatial);
            pose_entry[0] += omega[0];
            pose_entry[1] += omega[1];
            pose_entry[2] += omega[2];
            pose_entry[3] += spatial[0];
            pose_entry[4] += spatial[1];
            pose_entry[5] += spatial[2];
        }
    }
}

/// Spec-shaped wrapper: loss breakdown plus gradients for one batch.
pub fn total_loss_and_gradients(
    field: &VoxelField,
    poses: &[Pose],
    plan: &BatchPlan,
    alpha: f64,
    beta: f64,
) -> (LossBreakdown, GradientSet) {
    let out = evaluate_batch(field, poses, plan, LossWeights::training(alpha, beta), true);
    (out.losses, out.grads.expect("grads requested"))
}

/// Forward-only total for the finite-difference harness.
pub fn loss_for_plan(
    field: &VoxelField,
    poses: &[Pose],
    plan: &BatchPlan,
    weights: LossWeights,
) -> f64 {
    evaluate_batch(field, poses, plan, weights, false).losses.total
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub worst: String,
}

/// Compare every analytic gradient entry against central finite differences
/// of `loss_for_plan`. Entries with |analytic| <= `min_grad` are skipped
/// (relative error is meaningless at zero).
pub fn check_gradients(
    field: &VoxelField,
    poses: &[Pose],
    plan: &BatchPlan,
    weights: LossWeights,
    h: f64,
    min_grad: f64,
) -> GradCheckReport {
    let out = evaluate_batch(field, poses, plan, weights, true);
    let grads = out.grads.expect("grads requested");
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        n_checked: 0,
        worst: String::new(),
    };
    let consider = |analytic: f64, fd: f64, what: String, report: &mut GradCheckReport| {
        if analytic.abs() <= min_grad {
            return;
        }
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        report.n_checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = format!("{what}: analytic {analytic:.3e} fd {fd:.3e}");
        }
    };

    let mut field_mut = field.clone();
    for v in 0..field.sdf.len() {
        let orig = field_mut.sdf[v];
        field_mut.sdf[v] = orig + h;
        let lp = loss_for_plan(&field_mut, poses, plan, weights);
        field_mut.sdf[v] = orig - h;
        let lm = loss_for_plan(&field_mut, poses, plan, weights);
        field_mut.sdf[v] = orig;
        consider(grads.d_sdf[v], (lp - lm) / (2.0 * h), format!("sdf[{v}]"), &mut report);
    }
    for v in 0..field.rgb.len() {
        let orig = field_mut.rgb[v];
        field_mut.rgb[v] = orig + h;
        let lp = loss_for_plan(&field_mut, poses, plan, weights);
        field_mut.rgb[v] = orig - h;
        let lm = loss_for_plan(&field_mut, poses, plan, weights);
        field_mut.rgb[v] = orig;
        consider(grads.d_rgb[v], (lp - lm) / (2.0 * h), format!("rgb[{v}]"), &mut report);
    }
    {
        let orig = field_mut.inv_std;
        field_mut.inv_std = orig + h;
        let lp = loss_for_plan(&field_mut, poses, plan, weights);
        field_mut.inv_std = orig - h;
        let lm = loss_for_plan(&field_mut, poses, plan, weights);
        field_mut.inv_std = orig;
        consider(grads.d_s, (lp - lm) / (2.0 * h), "s".into(), &mut report);
    }
    let mut poses_mut = poses.to_vec();
    for (&node, g) in &grads.d_pose {
        for axis in 0..6 {
            let mut delta_r = Vector3::zeros();
            let mut delta_t = Vector3::zeros();
            if axis < 3 {
                delta_r[axis] = h;
            } else {
                delta_t[axis - 3] = h;
            }
            poses_mut[node] = poses[node].apply_delta(&delta_r, &delta_t);
            let lp = loss_for_plan(field, &poses_mut, plan, weights);
            poses_mut[node] = poses[node].apply_delta(&-delta_r, &-delta_t);
            let lm = loss_for_plan(field, &poses_mut, plan, weights);
            poses_mut[node] = poses[node];
            consider(
                g[axis],
                (lp - lm) / (2.0 * h),
                format!("pose[{node}][{axis}]"),
                &mut report,
            );
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Aabb;
    use crate::img::Image;
    use crate::scene_graph::{Edge, Match, Node};
    use nalgebra::UnitQuaternion;
    use rand::Rng;

    #[test]
    fn photometric_examples() {
        let a = vec![[0.2, 0.4, 0.6]; 5];
        let (loss, grads) = photometric_loss(&a, &a);
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));

        let rendered = vec![[0.0; 3]; 4];
        let reference = vec![[0.5; 3]; 4];
        let (loss, _) = photometric_loss(&rendered, &reference);
        assert!((loss - 0.5).abs() < 1e-15);
    }

    #[test]
    fn photometric_matches_scalar_loop() {
        let mut r = crate::rng::rng_from_seed(7);
        let a: Vec<[f64; 3]> = (0..32)
            .map(|_| [r.gen(), r.gen(), r.gen()])
            .collect();
        let b: Vec<[f64; 3]> = (0..32)
            .map(|_| [r.gen(), r.gen(), r.gen()])
            .collect();
        let (loss, _) = photometric_loss(&a, &b);
        let mut acc = 0.0;
        for i in 0..32 {
            for ch in 0..3 {
                acc += (a[i][ch] - b[i][ch]).abs();
            }
        }
        assert!((loss - acc / 96.0).abs() < 1e-12);
    }

    #[test]
    fn eikonal_plane_and_constant() {
        let plane = VoxelField::from_sdf_fn(Aabb::unit(), [10; 3], 10.0, |p| p.z);
        let pts: Vec<Vector3<f64>> = (0..20)
            .map(|i| Vector3::new(0.05 * i as f64 - 0.5, 0.3, -0.2))
            .collect();
        let (loss, _) = eikonal_loss(&plane, &pts);
        assert!(loss < 1e-9, "plane eikonal {loss}");

        let constant = VoxelField::new(Aabb::unit(), [10; 3], 10.0);
        let (loss, grads) = eikonal_loss(&constant, &pts);
        assert!((loss - 1.0).abs() < 1e-12);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn eikonal_gradient_matches_fd() {
        let mut r = crate::rng::rng_from_seed(31);
        let mut field = VoxelField::new(Aabb::unit(), [8; 3], 10.0);
        for v in field.sdf.iter_mut() {
            *v = r.gen_range(-0.6..0.6);
        }
        let pts: Vec<Vector3<f64>> = (0..30)
            .map(|_| {
                Vector3::new(
                    r.gen_range(-0.9..0.9),
                    r.gen_range(-0.9..0.9),
                    r.gen_range(-0.9..0.9),
                )
            })
            .collect();
        let (_, grads) = eikonal_loss(&field, &pts);
        let h = 1e-5;
        let mut checked = 0;
        for v in 0..field.sdf.len() {
            if grads[v].abs() < 1e-6 {
                continue;
            }
            let orig = field.sdf[v];
            field.sdf[v] = orig + h;
            let lp = eikonal_loss(&field, &pts).0;
            field.sdf[v] = orig - h;
            let lm = eikonal_loss(&field, &pts).0;
            field.sdf[v] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grads[v] - fd).abs() / grads[v].abs().max(fd.abs());
            assert!(rel < 1e-3, "vertex {v}: analytic {} fd {fd}", grads[v]);
            checked += 1;
        }
        assert!(checked > 20);
    }

    /// Small scene used by the batch tests: a sphere field and a couple of
    /// posed nodes with one matched keypoint pair.
    fn tiny_setup() -> (VoxelField, SceneGraph, Vec<Image>) {
        let mut field =
            VoxelField::sphere_init(Aabb::unit(), [8; 3], 0.55, 6.0);
        let mut r = crate::rng::rng_from_seed(41);
        for v in field.sdf.iter_mut() {
            *v += r.gen_range(-0.02..0.02);
        }
        for v in field.rgb.iter_mut() {
            *v = r.gen_range(0.2..0.8);
        }
        let intr = crate::geometry::Intrinsics {
            fx: 16.0,
            fy: 16.0,
            cx: 8.0,
            cy: 8.0,
            width: 16,
            height: 16,
        };
        let poses: Vec<Pose> = [
            Vector3::new(0.0, -0.3, -2.2),
            Vector3::new(0.6, 0.4, -2.1),
            Vector3::new(-0.7, 0.2, -2.0),
        ]
        .iter()
        .map(|c| {
            let fwd = (-c).normalize();
            Pose::new(
                UnitQuaternion::rotation_between(&Vector3::z(), &fwd).unwrap(),
                *c,
            )
        })
        .collect();
        let mut images = Vec::new();
        for _ in 0..poses.len() {
            let mut img = Image::new(16, 16);
            for v in img.data.iter_mut() {
                *v = r.gen();
            }
            images.push(img);
        }
        let nodes: Vec<Node> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| Node {
                id: i,
                pose: *p,
                image: images[i].clone(),
                confidence: 1.0 / 3.0,
                gt_pose: None,
            })
            .collect();
        let edges = vec![
            Edge {
                i: 0,
                j: 1,
                matches: vec![
                    Match {
                        a: (8.2, 7.9),
                        b: (8.4, 8.1),
                    },
                    Match {
                        a: (6.0, 9.0),
                        b: (7.1, 8.6),
                    },
                ],
            },
            Edge {
                i: 0,
                j: 2,
                matches: vec![Match {
                    a: (9.5, 8.0),
                    b: (7.7, 8.4),
                }],
            },
        ];
        let graph = SceneGraph::new(nodes, edges, intr).unwrap();
        (field, graph, images)
    }

    #[test]
    fn decomposition_identities() {
        let (field, graph, images) = tiny_setup();
        let poses: Vec<Pose> = graph.nodes.iter().map(|n| n.pose).collect();
        let multiset = vec![0, 1, 2];
        let plan = BatchPlan::build(
            &field, &graph, &images, &multiset, 32, 4, 12, [1.0; 3], 99,
        );
        assert_eq!(plan.rays.len(), 28);
        assert_eq!(plan.pairs.len(), 4);

        let (full, _) = total_loss_and_gradients(&field, &poses, &plan, 0.1, 0.2);
        assert!(
            (full.total - (full.photo + 0.1 * full.eikonal + 0.2 * full.iou)).abs() < 1e-9
        );

        let (no_iou, _) = total_loss_and_gradients(&field, &poses, &plan, 0.1, 0.0);
        assert_eq!(no_iou.photo, full.photo);
        assert_eq!(no_iou.eikonal, full.eikonal);
        assert!((no_iou.total - (full.photo + 0.1 * full.eikonal)).abs() < 1e-12);

        let (photo_only, _) = total_loss_and_gradients(&field, &poses, &plan, 0.0, 0.0);
        assert_eq!(photo_only.total, photo_only.photo);

        // Bit-identical determinism.
        let (again, g2) = total_loss_and_gradients(&field, &poses, &plan, 0.1, 0.2);
        assert_eq!(full.total.to_bits(), again.total.to_bits());
        let (_, g1) = total_loss_and_gradients(&field, &poses, &plan, 0.1, 0.2);
        assert_eq!(g1.d_sdf, g2.d_sdf);
        assert_eq!(g1.d_s.to_bits(), g2.d_s.to_bits());
    }

    #[test]
    fn gradients_all_finite_and_pose_touched() {
        let (field, graph, images) = tiny_setup();
        let poses: Vec<Pose> = graph.nodes.iter().map(|n| n.pose).collect();
        let plan = BatchPlan::build(
            &field, &graph, &images, &[0, 1, 2], 48, 8, 12, [1.0; 3], 3,
        );
        let (_, grads) = total_loss_and_gradients(&field, &poses, &plan, 0.1, 0.2);
        assert!(grads.all_finite());
        assert!(!grads.d_pose.is_empty());
    }

    #[test]
    fn photometric_gradcheck_small() {
        let (field, graph, images) = tiny_setup();
        let poses: Vec<Pose> = graph.nodes.iter().map(|n| n.pose).collect();
        let plan = BatchPlan::build(
            &field, &graph, &images, &[0, 1, 2], 12, 0, 10, [1.0; 3], 11,
        );
        let weights = LossWeights {
            photo: 1.0,
            alpha: 0.0,
            beta: 0.0,
        };
        let report = check_gradients(&field, &poses, &plan, weights, 1e-4, 1e-6);
        assert!(report.n_checked > 50, "checked {}", report.n_checked);
        assert!(
            report.max_rel_err <= 1e-3,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn iou_gradcheck_small() {
        let (field, graph, images) = tiny_setup();
        let poses: Vec<Pose> = graph.nodes.iter().map(|n| n.pose).collect();
        let plan = BatchPlan::build(
            &field, &graph, &images, &[0, 1, 2], 6, 3, 10, [1.0; 3], 13,
        );
        let weights = LossWeights {
            photo: 0.0,
            alpha: 0.0,
            beta: 1.0,
        };
        let report = check_gradients(&field, &poses, &plan, weights, 1e-4, 1e-6);
        assert!(report.n_checked > 20, "checked {}", report.n_checked);
        assert!(
            report.max_rel_err <= 1e-2,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }
}
