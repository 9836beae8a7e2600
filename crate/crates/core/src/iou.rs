//! Two-view IoU loss between keypoint rays.
//!
//! Each matched keypoint's ray is summarized by a mixture of Gaussians: the
//! 8 samples with the largest rendering weights become isotropic Gaussians
//! (fixed covariance 0.1 * I) centered at the sample positions, with MoG
//! weights equal to the selected rendering weights normalized to sum 1.
//! The overlap of two MoGs is scored on a 64^3 discretization of the scene
//! bounds as `1 - sum(A*B) / sum(A+B)`, taking the product-over-sum form
//! at face value rather than folding it into a conventional IoU.
//!
//! Evaluation exploits that axis-truncated isotropic Gaussians are
//! separable: every grid sum factorizes into per-axis 1-D dot products, so
//! the pair loss and its gradients never touch the full 64^3 grid. The
//! rasterized form is kept (`rasterize`, `iou_on_grids`) and tests pin the
//! fast path to it.

use nalgebra::Vector3;

use crate::field::{Aabb, RenderResult};

/// Components per MoG.
pub const MOG_MAX_COMPONENTS: usize = 8;
/// Isotropic covariance 0.1 * I (variance per axis).
pub const MOG_VARIANCE: f64 = 0.1;
/// Per-axis grid resolution of the discretization.
pub const MOG_GRID_RES: usize = 64;
/// Gaussians contribute nothing beyond 3 sigma (per axis).
pub const MOG_TRUNCATION_SIGMAS: f64 = 3.0;
/// Floor for the overlap denominator.
pub const IOU_DENOM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MogComponent {
    pub mean: Vector3<f64>,
    /// Normalized weight; the component set sums to 1 for non-empty MoGs.
    pub weight: f64,
    /// Index of the originating ray sample (selection bookkeeping).
    pub sample_index: usize,
}

/// Discretized mixture of Gaussians along one keypoint ray. Empty when the
/// ray deposited no rendering weight (uninformative ray).
#[derive(Debug, Clone, PartialEq)]
pub struct RayMoG {
    pub components: Vec<MogComponent>,
}

/// Geometry of the discretization grid (voxel centers over the bounds).
#[derive(Debug, Clone, Copy)]
pub struct MogGrid {
    pub bounds: Aabb,
    pub res: usize,
}

impl MogGrid {
    pub fn new(bounds: Aabb) -> Self {
        MogGrid {
            bounds,
            res: MOG_GRID_RES,
        }
    }

    #[inline]
    pub fn center(&self, axis: usize, i: usize) -> f64 {
        let step = (self.bounds.hi[axis] - self.bounds.lo[axis]) / self.res as f64;
        self.bounds.lo[axis] + (i as f64 + 0.5) * step
    }

    pub fn voxel_volume(&self) -> f64 {
        (0..3)
            .map(|a| (self.bounds.hi[a] - self.bounds.lo[a]) / self.res as f64)
            .product()
    }
}

/// Indices of the top-`MOG_MAX_COMPONENTS` samples by rendering weight,
/// ties broken by smaller depth. Deterministic under any input permutation.
pub fn select_top_samples(weights: &[f64], ts: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .total_cmp(&weights[a])
            .then(ts[a].total_cmp(&ts[b]))
    });
    order.truncate(MOG_MAX_COMPONENTS);
    order
}

impl RayMoG {
    /// Build from a rendered ray: top-8 samples by weight become Gaussians
    /// at the sample positions; all-zero weight rays yield the empty MoG.
    pub fn from_render(render: &RenderResult) -> RayMoG {
        assert!(!render.samples.is_empty(), "build_mog requires >= 1 sample");
        let weights: Vec<f64> = render.samples.iter().map(|s| s.weight).collect();
        let ts: Vec<f64> = render.samples.iter().map(|s| s.t).collect();
        let positions: Vec<Vector3<f64>> = render.samples.iter().map(|s| s.position).collect();
        RayMoG::from_weight_profile(&weights, &ts, &positions)
    }

    pub fn from_weight_profile(
        weights: &[f64],
        ts: &[f64],
        positions: &[Vector3<f64>],
    ) -> RayMoG {
        let selected = select_top_samples(weights, ts);
        let total: f64 = selected.iter().map(|&i| weights[i]).sum();
        if total <= 0.0 {
            return RayMoG { components: vec![] };
        }
        let components = selected
            .into_iter()
            .map(|i| MogComponent {
                mean: positions[i],
                weight: weights[i] / total,
                sample_index: i,
            })
            .collect();
        RayMoG { components }
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Literal discretization: `grid[v] = sum_k w_k N(center(v); mean_k, 0.1 I)`
    /// with contributions truncated at 3 sigma per axis.
    pub fn rasterize(&self, grid: &MogGrid) -> Vec<f64> {
        assert!(!self.is_empty(), "rasterize requires a non-empty MoG");
        let res = grid.res;
        let mut out = vec![0.0; res * res * res];
        for comp in &self.components {
            let fx = axis_factor(grid, 0, comp.mean[0]);
            let fy = axis_factor(grid, 1, comp.mean[1]);
            let fz = axis_factor(grid, 2, comp.mean[2]);
            for k in fz.window.clone() {
                for j in fy.window.clone() {
                    let base = (k * res + j) * res;
                    let gyz = fy.values[j] * fz.values[k];
                    for i in fx.window.clone() {
                        out[base + i] += comp.weight * fx.values[i] * gyz;
                    }
                }
            }
        }
        out
    }
}

/// One axis of a truncated Gaussian: per-cell values (zero outside the
/// 3-sigma window) and the window itself.
struct AxisFactor {
    values: Vec<f64>,
    window: std::ops::Range<usize>,
}

fn axis_factor(grid: &MogGrid, axis: usize, mean: f64) -> AxisFactor {
    let res = grid.res;
    let sigma = MOG_VARIANCE.sqrt();
    let cut = MOG_TRUNCATION_SIGMAS * sigma;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * MOG_VARIANCE).sqrt();
    let inv_two_var = 1.0 / (2.0 * MOG_VARIANCE);
    let mut values = vec![0.0; res];
    let mut lo = res;
    let mut hi = 0;
    for i in 0..res {
        let d = grid.center(axis, i) - mean;
        if d.abs() <= cut {
            values[i] = norm * (-d * d * inv_two_var).exp();
            lo = lo.min(i);
            hi = hi.max(i + 1);
        }
    }
    if lo >= hi {
        lo = 0;
        hi = 0;
    }
    AxisFactor {
        values,
        window: lo..hi,
    }
}

/// Loss on explicit grids: `1 - sum(A*B) / sum(A+B)` with the denominator
/// floored. This is the reference form the fast path must reproduce.
pub fn iou_on_grids(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += x * y;
        den += x + y;
    }
    1.0 - num / den.max(IOU_DENOM_FLOOR)
}

/// Pair loss plus gradients with respect to both MoGs' normalized weights
/// and means.
#[derive(Debug, Clone)]
pub struct MogPairGrad {
    pub loss: f64,
    pub d_weight_a: Vec<f64>,
    pub d_mean_a: Vec<Vector3<f64>>,
    pub d_weight_b: Vec<f64>,
    pub d_mean_b: Vec<Vector3<f64>>,
}

/// Deterministic total order so the pair loss is exactly symmetric in its
/// arguments: the summation schedule depends only on the canonical order.
fn mog_key_le(a: &RayMoG, b: &RayMoG) -> bool {
    use std::cmp::Ordering;
    match a.components.len().cmp(&b.components.len()) {
        Ordering::Less => return true,
        Ordering::Greater => return false,
        Ordering::Equal => {}
    }
    for (ca, cb) in a.components.iter().zip(&b.components) {
        for axis in 0..3 {
            match ca.mean[axis].total_cmp(&cb.mean[axis]) {
                Ordering::Less => return true,
                Ordering::Greater => return false,
                Ordering::Equal => {}
            }
        }
        match ca.weight.total_cmp(&cb.weight) {
            Ordering::Less => return true,
            Ordering::Greater => return false,
            Ordering::Equal => {}
        }
    }
    true
}

struct SeparableTerms {
    /// factors[k][axis]: 1-D truncated Gaussian of component k.
    factors: Vec<[AxisFactor; 3]>,
    /// sums[k][axis]: plain sum of the axis factor.
    sums: Vec<[f64; 3]>,
}

fn separable_terms(mog: &RayMoG, grid: &MogGrid) -> SeparableTerms {
    let factors: Vec<[AxisFactor; 3]> = mog
        .components
        .iter()
        .map(|c| {
            [
                axis_factor(grid, 0, c.mean[0]),
                axis_factor(grid, 1, c.mean[1]),
                axis_factor(grid, 2, c.mean[2]),
            ]
        })
        .collect();
    let sums = factors
        .iter()
        .map(|f| {
            [
                f[0].values.iter().sum(),
                f[1].values.iter().sum(),
                f[2].values.iter().sum(),
            ]
        })
        .collect();
    SeparableTerms { factors, sums }
}

fn dot(a: &AxisFactor, b: &AxisFactor) -> f64 {
    let lo = a.window.start.max(b.window.start);
    let hi = a.window.end.min(b.window.end);
    let mut acc = 0.0;
    for i in lo..hi {
        acc += a.values[i] * b.values[i];
    }
    acc
}

/// `1 - sum(A*B) / sum(A+B)` over the discretization, evaluated through the
/// separable factorization. Equal to [`iou_on_grids`] of the rasterized
/// grids up to summation roundoff, and exactly symmetric in its arguments.
pub fn iou_pair(a: &RayMoG, b: &RayMoG, grid: &MogGrid) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "iou_pair requires non-empty MoGs");
    let (x, y) = if mog_key_le(a, b) { (a, b) } else { (b, a) };
    let tx = separable_terms(x, grid);
    let ty = separable_terms(y, grid);
    let mut num = 0.0;
    for (k, cx) in x.components.iter().enumerate() {
        for (m, cy) in y.components.iter().enumerate() {
            num += cx.weight
                * cy.weight
                * dot(&tx.factors[k][0], &ty.factors[m][0])
                * dot(&tx.factors[k][1], &ty.factors[m][1])
                * dot(&tx.factors[k][2], &ty.factors[m][2]);
        }
    }
    let mass = |mog: &RayMoG, t: &SeparableTerms| -> f64 {
        mog.components
            .iter()
            .enumerate()
            .map(|(k, c)| c.weight * t.sums[k][0] * t.sums[k][1] * t.sums[k][2])
            .sum()
    };
    let den = mass(x, &tx) + mass(y, &ty);
    1.0 - num / den.max(IOU_DENOM_FLOOR)
}

/// Pair loss with gradients w.r.t. normalized weights and Gaussian means of
/// both sides. Mean gradients flow through the truncated axis factors;
/// window membership changes are treated as constant (measure-zero events).
pub fn iou_pair_with_grad(a: &RayMoG, b: &RayMoG, grid: &MogGrid) -> MogPairGrad {
    assert!(!a.is_empty() && !b.is_empty());
    let loss = iou_pair(a, b, grid);

    let ta = separable_terms(a, grid);
    let tb = separable_terms(b, grid);
    let inv_var = 1.0 / MOG_VARIANCE;

    // d/dmean of an axis factor: g'(x) = g(x) * (x - mean) / var, summed
    // either against the other factor (numerator) or alone (denominator).
    let dsum = |f: &AxisFactor, axis: usize, mean: f64| -> f64 {
        let mut acc = 0.0;
        for i in f.window.clone() {
            acc += f.values[i] * (grid.center(axis, i) - mean) * inv_var;
        }
        acc
    };
    let ddot = |f: &AxisFactor, other: &AxisFactor, axis: usize, mean: f64| -> f64 {
        let lo = f.window.start.max(other.window.start);
        let hi = f.window.end.min(other.window.end);
        let mut acc = 0.0;
        for i in lo..hi {
            acc += f.values[i] * (grid.center(axis, i) - mean) * inv_var * other.values[i];
        }
        acc
    };

    let mut num = 0.0;
    let na = a.components.len();
    let nb = b.components.len();
    // Cross-dots cached per (k, m, axis).
    let mut cross = vec![[0.0f64; 3]; na * nb];
    for k in 0..na {
        for m in 0..nb {
            for axis in 0..3 {
                cross[k * nb + m][axis] = dot(&ta.factors[k][axis], &tb.factors[m][axis]);
            }
            num += a.components[k].weight
                * b.components[m].weight
                * cross[k * nb + m][0]
                * cross[k * nb + m][1]
                * cross[k * nb + m][2];
        }
    }
    let mass_a: f64 = (0..na)
        .map(|k| a.components[k].weight * ta.sums[k][0] * ta.sums[k][1] * ta.sums[k][2])
        .sum();
    let mass_b: f64 = (0..nb)
        .map(|m| b.components[m].weight * tb.sums[m][0] * tb.sums[m][1] * tb.sums[m][2])
        .sum();
    let den = (mass_a + mass_b).max(IOU_DENOM_FLOOR);
    let d_num = -1.0 / den;
    let d_den = num / (den * den);

    let mut out = MogPairGrad {
        loss,
        d_weight_a: vec![0.0; na],
        d_mean_a: vec![Vector3::zeros(); na],
        d_weight_b: vec![0.0; nb],
        d_mean_b: vec![Vector3::zeros(); nb],
    };

    for k in 0..na {
        let ck = &a.components[k];
        let sums_k = ta.sums[k];
        out.d_weight_a[k] += d_den * (sums_k[0] * sums_k[1] * sums_k[2]);
        for m in 0..nb {
            let cm = &b.components[m];
            let c = &cross[k * nb + m];
            out.d_weight_a[k] += d_num * cm.weight * c[0] * c[1] * c[2];
            out.d_weight_b[m] += d_num * ck.weight * c[0] * c[1] * c[2];
            for axis in 0..3 {
                let others: f64 = (0..3).filter(|&x| x != axis).map(|x| c[x]).product();
                let dd_a = ddot(
                    &ta.factors[k][axis],
                    &tb.factors[m][axis],
                    axis,
                    ck.mean[axis],
                );
                out.d_mean_a[k][axis] += d_num * ck.weight * cm.weight * dd_a * others;
                let dd_b = ddot(
                    &tb.factors[m][axis],
                    &ta.factors[k][axis],
                    axis,
                    cm.mean[axis],
                );
                out.d_mean_b[m][axis] += d_num * ck.weight * cm.weight * dd_b * others;
            }
        }
        for axis in 0..3 {
            let others: f64 = (0..3).filter(|&x| x != axis).map(|x| sums_k[x]).product();
            out.d_mean_a[k][axis] +=
                d_den * ck.weight * dsum(&ta.factors[k][axis], axis, ck.mean[axis]) * others;
        }
    }
    for m in 0..nb {
        let cm = &b.components[m];
        let sums_m = tb.sums[m];
        out.d_weight_b[m] += d_den * (sums_m[0] * sums_m[1] * sums_m[2]);
        for axis in 0..3 {
            let others: f64 = (0..3).filter(|&x| x != axis).map(|x| sums_m[x]).product();
            out.d_mean_b[m][axis] +=
                d_den * cm.weight * dsum(&tb.factors[m][axis], axis, cm.mean[axis]) * others;
        }
    }
    out
}

/// Back-propagate gradients on normalized MoG weights to the raw rendering
/// weights of the originating samples (through `w_hat_k = w_k / sum w`).
/// Returns a dense per-sample vector, zero outside the selected set.
pub fn backprop_normalized_weights(
    mog: &RayMoG,
    raw_weights: &[f64],
    d_norm: &[f64],
    n_samples: usize,
) -> Vec<f64> {
    let total: f64 = mog
        .components
        .iter()
        .map(|c| raw_weights[c.sample_index])
        .sum();
    let mut out = vec![0.0; n_samples];
    if total <= 0.0 {
        return out;
    }
    let inner: f64 = mog
        .components
        .iter()
        .zip(d_norm)
        .map(|(c, d)| d * c.weight)
        .sum();
    for (c, d) in mog.components.iter().zip(d_norm) {
        out[c.sample_index] = (d - inner) / total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::RaySample;

    fn grid() -> MogGrid {
        MogGrid::new(Aabb::unit())
    }

    fn render_from_weights(weights: &[f64], spread: f64) -> RenderResult {
        let samples: Vec<RaySample> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| RaySample {
                t: 1.0 + i as f64 * 0.01,
                position: Vector3::new(-0.5 + spread * i as f64, 0.0, 0.0),
                sdf: 0.0,
                weight: w,
                color: [0.5; 3],
            })
            .collect();
        RenderResult {
            color: [0.0; 3],
            samples,
            accumulated_weight: weights.iter().sum(),
        }
    }

    fn single_comp_mog(center: Vector3<f64>) -> RayMoG {
        RayMoG {
            components: vec![MogComponent {
                mean: center,
                weight: 1.0,
                sample_index: 0,
            }],
        }
    }

    #[test]
    fn build_single_sample() {
        let render = render_from_weights(&[1.0], 0.0);
        let mog = RayMoG::from_render(&render);
        assert_eq!(mog.components.len(), 1);
        assert_eq!(mog.components[0].weight, 1.0);
        assert_eq!(mog.components[0].mean, Vector3::new(-0.5, 0.0, 0.0));
    }

    #[test]
    fn build_keeps_zero_weight_fill_components() {
        let mut weights = vec![0.0; 64];
        weights[0] = 0.4;
        weights[1] = 0.4;
        weights[2] = 0.2;
        let render = render_from_weights(&weights, 0.005);
        let mog = RayMoG::from_render(&render);
        assert_eq!(mog.components.len(), 8);
        let w: Vec<f64> = mog.components.iter().map(|c| c.weight).collect();
        assert_eq!(&w[..3], &[0.4, 0.4, 0.2]);
        assert!(w[3..].iter().all(|&x| x == 0.0));
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn selection_matches_full_sort_oracle_and_is_permutation_invariant() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(71);
        for _ in 0..20 {
            let n = 64;
            let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let ts: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.01).collect();
            let sel = select_top_samples(&weights, &ts);

            let mut oracle: Vec<usize> = (0..n).collect();
            oracle.sort_by(|&a, &b| {
                weights[b]
                    .total_cmp(&weights[a])
                    .then(ts[a].total_cmp(&ts[b]))
            });
            oracle.truncate(8);
            assert_eq!(sel, oracle);

            // Permutation invariance of the selected (t, weight) multiset.
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let pw: Vec<f64> = perm.iter().map(|&i| weights[i]).collect();
            let pt: Vec<f64> = perm.iter().map(|&i| ts[i]).collect();
            let sel_p = select_top_samples(&pw, &pt);
            let orig: Vec<(u64, u64)> = sel
                .iter()
                .map(|&i| (ts[i].to_bits(), weights[i].to_bits()))
                .collect();
            let permd: Vec<(u64, u64)> = sel_p
                .iter()
                .map(|&i| (pt[i].to_bits(), pw[i].to_bits()))
                .collect();
            assert_eq!(orig, permd);
        }
    }

    #[test]
    fn all_zero_weights_flag_empty() {
        let render = render_from_weights(&[0.0; 16], 0.01);
        let mog = RayMoG::from_render(&render);
        assert!(mog.is_empty());
    }

    #[test]
    fn rasterize_argmax_at_component_voxel() {
        let g = grid();
        // Center of voxel (40, 32, 32).
        let c = Vector3::new(g.center(0, 40), g.center(1, 32), g.center(2, 32));
        let mog = single_comp_mog(c);
        let raster = mog.rasterize(&g);
        let argmax = raster
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, (32 * g.res + 32) * g.res + 40);
    }

    #[test]
    fn rasterize_mass_close_to_one() {
        let g = grid();
        let mog = single_comp_mog(Vector3::new(0.1, -0.05, 0.02));
        let raster = mog.rasterize(&g);
        let mass: f64 = raster.iter().sum::<f64>() * g.voxel_volume();
        assert!((mass - 1.0).abs() < 0.05, "mass {mass}");
    }

    #[test]
    fn rasterize_is_linear_in_components() {
        let g = grid();
        let m1 = single_comp_mog(Vector3::new(0.2, 0.0, 0.0));
        let m2 = single_comp_mog(Vector3::new(-0.2, 0.1, 0.0));
        let combined = RayMoG {
            components: vec![
                MogComponent {
                    mean: m1.components[0].mean,
                    weight: 0.5,
                    sample_index: 0,
                },
                MogComponent {
                    mean: m2.components[0].mean,
                    weight: 0.5,
                    sample_index: 1,
                },
            ],
        };
        let r1 = m1.rasterize(&g);
        let r2 = m2.rasterize(&g);
        let rc = combined.rasterize(&g);
        for i in 0..rc.len() {
            let expect = 0.5 * (r1[i] + r2[i]);
            assert!((rc[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_disjoint_supports_is_one() {
        let g = grid();
        let sigma = MOG_VARIANCE.sqrt();
        // Separated by more than 6 sigma along x: truncated supports disjoint.
        let a = single_comp_mog(Vector3::new(-0.8, 0.0, 0.0));
        let b = single_comp_mog(Vector3::new(-0.8 + 7.0 * sigma, 0.0, 0.0));
        let loss = iou_pair(&a, &b, &g);
        assert!((loss - 1.0).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn iou_on_grids_shared_voxel() {
        let mut ga = vec![0.0; 8];
        let mut gb = vec![0.0; 8];
        ga[3] = 1.0;
        gb[3] = 1.0;
        assert_eq!(iou_on_grids(&ga, &gb), 0.5);
    }

    #[test]
    fn identical_grids_closed_form_and_scalar_loop() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(73);
        let g: Vec<f64> = (0..4096).map(|_| rng.gen_range(0.0..2.0)).collect();
        let loss = iou_on_grids(&g, &g);
        let sum_sq: f64 = g.iter().map(|x| x * x).sum();
        let sum: f64 = g.iter().sum();
        let expect = 1.0 - sum_sq / (2.0 * sum);
        assert!((loss - expect).abs() < 1e-9);
    }

    #[test]
    fn fast_path_matches_rasterized_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(79);
        let g = grid();
        for _ in 0..5 {
            let mut rand_mog = |rng: &mut rand_chacha::ChaCha8Rng| {
                let n = rng.gen_range(1..=8usize);
                let mut weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
                let total: f64 = weights.iter().sum();
                for w in weights.iter_mut() {
                    *w /= total;
                }
                RayMoG {
                    components: (0..n)
                        .map(|i| MogComponent {
                            mean: Vector3::new(
                                rng.gen_range(-0.7..0.7),
                                rng.gen_range(-0.7..0.7),
                                rng.gen_range(-0.7..0.7),
                            ),
                            weight: weights[i],
                            sample_index: i,
                        })
                        .collect(),
                }
            };
            let a = rand_mog(&mut rng);
            let b = rand_mog(&mut rng);
            let fast = iou_pair(&a, &b, &g);
            let oracle = iou_on_grids(&a.rasterize(&g), &b.rasterize(&g));
            assert!(
                (fast - oracle).abs() < 1e-9,
                "fast {fast} oracle {oracle}"
            );
            // Exact symmetry.
            let swapped = iou_pair(&b, &a, &g);
            assert_eq!(fast.to_bits(), swapped.to_bits());
        }
    }

    #[test]
    fn loss_decreases_as_mogs_approach() {
        let g = grid();
        let a = single_comp_mog(Vector3::new(-0.4, 0.0, 0.0));
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let sep = 0.8 - 0.08 * step as f64;
            let b = single_comp_mog(Vector3::new(-0.4 + sep, 0.0, 0.0));
            let loss = iou_pair(&a, &b, &g);
            assert!(loss < prev + 1e-12, "sep {sep}: {loss} !< {prev}");
            prev = loss;
        }
    }

    #[test]
    fn pair_gradients_match_finite_differences() {
        let g = grid();
        let a = RayMoG {
            components: vec![
                MogComponent {
                    mean: Vector3::new(-0.15, 0.05, 0.0),
                    weight: 0.6,
                    sample_index: 0,
                },
                MogComponent {
                    mean: Vector3::new(0.05, -0.1, 0.1),
                    weight: 0.4,
                    sample_index: 1,
                },
            ],
        };
        let b = single_comp_mog(Vector3::new(0.1, 0.0, -0.05));
        let grads = iou_pair_with_grad(&a, &b, &g);
        let h = 1e-6;
        for k in 0..a.components.len() {
            for axis in 0..3 {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap.components[k].mean[axis] += h;
                am.components[k].mean[axis] -= h;
                let fd = (iou_pair(&ap, &b, &g) - iou_pair(&am, &b, &g)) / (2.0 * h);
                let an = grads.d_mean_a[k][axis];
                assert!(
                    (fd - an).abs() <= 1e-5 * an.abs().max(1.0),
                    "mean a[{k}][{axis}]: fd {fd} analytic {an}"
                );
            }
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.components[k].weight += h;
            am.components[k].weight -= h;
            let fd = (iou_pair(&ap, &b, &g) - iou_pair(&am, &b, &g)) / (2.0 * h);
            let an = grads.d_weight_a[k];
            assert!(
                (fd - an).abs() <= 1e-5 * an.abs().max(1.0),
                "weight a[{k}]: fd {fd} analytic {an}"
            );
        }
        for axis in 0..3 {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp.components[0].mean[axis] += h;
            bm.components[0].mean[axis] -= h;
            let fd = (iou_pair(&a, &bp, &g) - iou_pair(&a, &bm, &g)) / (2.0 * h);
            let an = grads.d_mean_b[0][axis];
            assert!(
                (fd - an).abs() <= 1e-5 * an.abs().max(1.0),
                "mean b[{axis}]: fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn normalized_weight_backprop_matches_fd() {
        let raw = vec![0.5, 0.0, 0.3, 0.2, 0.0, 0.0];
        let ts: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let pos: Vec<Vector3<f64>> = (0..6)
            .map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0))
            .collect();
        let mog = RayMoG::from_weight_profile(&raw, &ts, &pos);
        // Arbitrary upstream gradient on normalized weights.
        let d_norm: Vec<f64> = (0..mog.components.len())
            .map(|k| 0.3 + 0.1 * k as f64)
            .collect();
        let d_raw = backprop_normalized_weights(&mog, &raw, &d_norm, raw.len());

        let eval_fn = |raw: &[f64]| -> f64 {
            let sel = select_top_samples(raw, &ts);
            let total: f64 = sel.iter().map(|&i| raw[i]).sum();
            sel.iter()
                .enumerate()
                .map(|(k, &i)| d_norm[k] * raw[i] / total)
                .sum()
        };
        let h = 1e-7;
        for j in [0usize, 2, 3] {
            let mut rp = raw.clone();
            let mut rm = raw.clone();
            rp[j] += h;
            rm[j] -= h;
            let fd = (eval_fn(&rp) - eval_fn(&rm)) / (2.0 * h);
            assert!(
                (fd - d_raw[j]).abs() < 1e-6,
                "raw weight {j}: fd {fd} analytic {}",
                d_raw[j]
            );
        }
    }
}
