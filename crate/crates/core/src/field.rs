//! The radiance field: dense voxel grids of SDF and RGB with trilinear
//! interpolation, SDF-based volume rendering along rays, and checkpoint I/O.
//!
//! Opacity follows the logistic-CDF formulation: with `Phi_s` the logistic
//! CDF of inverse standard deviation `s`,
//! `alpha_i = clamp((Phi_s(f_i) - Phi_s(f_{i+1})) / max(Phi_s(f_i), eps), 0, 1)`
//! and weights `w_i = alpha_i * prod_{j<i} (1 - alpha_j)`. Color is
//! view-independent and composited over a fixed background.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{pixel_to_ray, Intrinsics, Pose, Ray};
use crate::img::Image;
use crate::rng;

/// Guard for the opacity denominator.
pub const PHI_EPS: f64 = 1e-12;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
}

impl Aabb {
    pub fn unit() -> Self {
        Aabb {
            lo: Vector3::new(-1.0, -1.0, -1.0),
            hi: Vector3::new(1.0, 1.0, 1.0),
        }
    }

    /// Slab intersection; returns the parametric (near, far) overlap with
    /// the positive half-line, or None when the ray misses the box.
    pub fn intersect_ray(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let inv = 1.0 / ray.direction[a];
            let mut near = (self.lo[a] - ray.origin[a]) * inv;
            let mut far = (self.hi[a] - ray.origin[a]) * inv;
            if inv < 0.0 {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Trilinear interpolation footprint of one query point: the 8 cell-corner
/// grid indices, their weights, and the spatial derivative of each weight
/// (already scaled by grid spacing). `clamped[a]` marks axes where the point
/// was clamped to the boundary cell; those axes carry zero spatial gradient.
#[derive(Debug, Clone)]
pub struct TrilinearCell {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 3]; 8],
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct VoxelField {
    pub bounds: Aabb,
    /// Per-axis vertex count.
    pub resolution: [usize; 3],
    pub sdf: Vec<f64>,
    /// RGB per vertex, interleaved; clamped to [0, 1] on read.
    pub rgb: Vec<f64>,
    /// Opacity sharpness (inverse standard deviation of the logistic CDF).
    pub inv_std: f64,
}

/// One integration sample along a rendered ray.
#[derive(Debug, Clone, Copy)]
pub struct RaySample {
    pub t: f64,
    pub position: Vector3<f64>,
    pub sdf: f64,
    pub weight: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub samples: Vec<RaySample>,
    pub accumulated_weight: f64,
}

/// How sample depths are jittered inside their strata.
#[derive(Debug, Clone, Copy)]
pub enum Stratification {
    /// Deterministic midpoints; used for image rendering and PSNR.
    Midpoint,
    /// Per-ray seeded jitter; used during training.
    Seeded(u64),
}

impl VoxelField {
    pub fn new(bounds: Aabb, resolution: [usize; 3], inv_std: f64) -> Self {
        let n = resolution[0] * resolution[1] * resolution[2];
        VoxelField {
            bounds,
            resolution,
            sdf: vec![0.0; n],
            rgb: vec![0.5; n * 3],
            inv_std,
        }
    }

    /// Standard initialization for inward-facing scenes: sphere SDF of
    /// radius `r0`, grey color, given sharpness.
    pub fn sphere_init(bounds: Aabb, resolution: [usize; 3], r0: f64, inv_std: f64) -> Self {
        VoxelField::from_sdf_fn(bounds, resolution, inv_std, |p| p.norm() - r0)
    }

    pub fn from_sdf_fn(
        bounds: Aabb,
        resolution: [usize; 3],
        inv_std: f64,
        f: impl Fn(Vector3<f64>) -> f64,
    ) -> Self {
        let mut field = VoxelField::new(bounds, resolution, inv_std);
        for k in 0..resolution[2] {
            for j in 0..resolution[1] {
                for i in 0..resolution[0] {
                    let p = field.vertex_position(i, j, k);
                    let idx = field.index(i, j, k);
                    field.sdf[idx] = f(p);
                }
            }
        }
        field
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    pub fn num_vertices(&self) -> usize {
        self.resolution[0] * self.resolution[1] * self.resolution[2]
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let mut p = Vector3::zeros();
        let ijk = [i, j, k];
        for a in 0..3 {
            let step = (self.bounds.hi[a] - self.bounds.lo[a]) / (self.resolution[a] - 1) as f64;
            p[a] = self.bounds.lo[a] + ijk[a] as f64 * step;
        }
        p
    }

    /// Grid spacing per axis.
    pub fn cell_size(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for a in 0..3 {
            c[a] = (self.bounds.hi[a] - self.bounds.lo[a]) / (self.resolution[a] - 1) as f64;
        }
        c
    }

    /// Locate the trilinear cell containing `p`. Points outside the bounds
    /// clamp to the boundary cell and are flagged.
    pub fn cell_at(&self, p: &Vector3<f64>) -> TrilinearCell {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        let mut scale = [0f64; 3];
        let mut clamped = false;
        for a in 0..3 {
            let n = self.resolution[a];
            let step = (self.bounds.hi[a] - self.bounds.lo[a]) / (n - 1) as f64;
            scale[a] = 1.0 / step;
            let mut u = (p[a] - self.bounds.lo[a]) * scale[a];
            if u < 0.0 {
                u = 0.0;
                clamped = true;
                scale[a] = 0.0;
            }
            let max_u = (n - 1) as f64;
            if u > max_u {
                u = max_u;
                clamped = true;
                scale[a] = 0.0;
            }
            let mut i = u.floor() as usize;
            if i >= n - 1 {
                i = n - 2;
            }
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut idx = [0usize; 8];
        let mut w = [0f64; 8];
        let mut dw = [[0f64; 3]; 8];
        for corner in 0..8 {
            let di = corner & 1;
            let dj = (corner >> 1) & 1;
            let dk = (corner >> 2) & 1;
            idx[corner] = self.index(base[0] + di, base[1] + dj, base[2] + dk);
            let wx = if di == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dj == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dk == 1 { frac[2] } else { 1.0 - frac[2] };
            w[corner] = wx * wy * wz;
            let sx = if di == 1 { 1.0 } else { -1.0 };
            let sy = if dj == 1 { 1.0 } else { -1.0 };
            let sz = if dk == 1 { 1.0 } else { -1.0 };
            dw[corner] = [
                sx * wy * wz * scale[0],
                wx * sy * wz * scale[1],
                wx * wy * sz * scale[2],
            ];
        }
        TrilinearCell {
            idx,
            w,
            dw,
            clamped,
        }
    }

    pub fn sdf_at(&self, p: &Vector3<f64>) -> f64 {
        let cell = self.cell_at(p);
        (0..8).map(|c| self.sdf[cell.idx[c]] * cell.w[c]).sum()
    }

    /// Exact analytic gradient of the trilinear interpolant (piecewise per cell).
    pub fn sdf_gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let cell = self.cell_at(p);
        self.sdf_gradient_in_cell(&cell)
    }

    pub fn sdf_gradient_in_cell(&self, cell: &TrilinearCell) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for c in 0..8 {
            let v = self.sdf[cell.idx[c]];
            g[0] += v * cell.dw[c][0];
            g[1] += v * cell.dw[c][1];
            g[2] += v * cell.dw[c][2];
        }
        g
    }

    /// RGB at a point, clamped to [0, 1] per channel.
    pub fn rgb_at(&self, cell: &TrilinearCell) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..8 {
            let base = cell.idx[c] * 3;
            for ch in 0..3 {
                out[ch] += self.rgb[base + ch] * cell.w[c];
            }
        }
        for v in out.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    /// Render one ray; `near < far`, `n_samples >= 2`.
    pub fn render_ray(
        &self,
        ray: &Ray,
        near: f64,
        far: f64,
        n_samples: usize,
        background: [f64; 3],
        strat: Stratification,
    ) -> RenderResult {
        assert!(near < far, "render_ray requires near < far");
        assert!(n_samples >= 2, "render_ray requires n_samples >= 2");
        let ts = sample_depths(near, far, n_samples, strat);
        let fwd = RayForward::compute(self, ray, &ts, background);
        fwd.into_result()
    }

    /// Render every `stride`-th pixel center; deterministic midpoint sampling.
    /// Rays that miss the bounds composite pure background.
    pub fn render_image(
        &self,
        pose: &Pose,
        intr: &Intrinsics,
        stride: usize,
        n_samples: usize,
        background: [f64; 3],
    ) -> Image {
        assert!(stride >= 1);
        let out_w = intr.width.div_ceil(stride);
        let out_h = intr.height.div_ceil(stride);
        let mut img = Image::new(out_w, out_h);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let u = (ox * stride) as f64 + 0.5;
                let v = (oy * stride) as f64 + 0.5;
                let ray = pixel_to_ray(pose, intr, u, v).expect("pixel inside image");
                let color = match self.bounds.intersect_ray(&ray) {
                    Some((near, far)) if far > near => {
                        self.render_ray(&ray, near, far, n_samples, background, {
                            Stratification::Midpoint
                        })
                        .color
                    }
                    _ => background,
                };
                img.set(ox, oy, color);
            }
        }
        img
    }

    /// Round grid values through f32. Checkpoints store grids as 32-bit
    /// floats, so the trainer applies this at every checkpoint boundary to
    /// keep save -> resume bit-identical with an uninterrupted run.
    pub fn quantize_to_f32(&mut self) {
        for v in self.sdf.iter_mut() {
            *v = *v as f32 as f64;
        }
        for v in self.rgb.iter_mut() {
            *v = *v as f32 as f64;
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::with_capacity(64 + self.num_vertices() * 16);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for a in 0..3 {
            buf.extend_from_slice(&(self.resolution[a] as u32).to_le_bytes());
        }
        for a in 0..3 {
            buf.extend_from_slice(&self.bounds.lo[a].to_le_bytes());
        }
        for a in 0..3 {
            buf.extend_from_slice(&self.bounds.hi[a].to_le_bytes());
        }
        buf.extend_from_slice(&self.inv_std.to_le_bytes());
        for v in &self.sdf {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for v in &self.rgb {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<VoxelField> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bytes.len() {
                return Err(Error::format(path, "truncated field checkpoint"));
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        let magic = take(&mut cur, 8)?;
        if magic != MAGIC {
            return Err(Error::format(path, "bad magic (not a field checkpoint)"));
        }
        let ver = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
        if ver != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {ver}"),
            ));
        }
        let mut resolution = [0usize; 3];
        for r in resolution.iter_mut() {
            *r = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            if *r < 2 {
                return Err(Error::format(path, "resolution below 2"));
            }
        }
        let mut lo = Vector3::zeros();
        let mut hi = Vector3::zeros();
        for a in 0..3 {
            lo[a] = f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
        }
        for a in 0..3 {
            hi[a] = f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
        }
        let inv_std = f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
        if !(inv_std > 0.0) {
            return Err(Error::format(path, "non-positive inv_std"));
        }
        let n = resolution[0] * resolution[1] * resolution[2];
        let mut sdf = Vec::with_capacity(n);
        for _ in 0..n {
            sdf.push(f32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as f64);
        }
        let mut rgb = Vec::with_capacity(n * 3);
        for _ in 0..n * 3 {
            rgb.push(f32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as f64);
        }
        if cur != bytes.len() {
            return Err(Error::format(path, "trailing bytes after grids"));
        }
        Ok(VoxelField {
            bounds: Aabb { lo, hi },
            resolution,
            sdf,
            rgb,
            inv_std,
        })
    }
}

const MAGIC: &[u8; 8] = b"SGSFIELD";
const FORMAT_VERSION: u32 = 1;

pub fn sample_depths(near: f64, far: f64, n: usize, strat: Stratification) -> Vec<f64> {
    let jitters = match strat {
        Stratification::Midpoint => vec![0.5; n],
        Stratification::Seeded(seed) => {
            use rand::Rng;
            let mut r = rng::rng_from_seed(seed);
            (0..n).map(|_| r.gen::<f64>()).collect()
        }
    };
    depths_from_jitter(near, far, &jitters)
}

pub fn depths_from_jitter(near: f64, far: f64, jitters: &[f64]) -> Vec<f64> {
    let n = jitters.len();
    let span = far - near;
    jitters
        .iter()
        .enumerate()
        .map(|(i, u)| near + span * ((i as f64 + u) / n as f64))
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward pass along one ray with every intermediate the backward pass
/// needs. Positions derive from the live ray; depths are supplied by the
/// caller so they can be frozen in a batch plan.
#[derive(Debug, Clone)]
pub struct RayForward {
    pub ts: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
    pub cells: Vec<TrilinearCell>,
    pub f: Vec<f64>,
    pub phi: Vec<f64>,
    /// n-1 entries; alpha[i] pairs samples (i, i+1).
    pub alpha: Vec<f64>,
    /// Per-alpha flag: raw value outside [0, 1] or denominator at guard.
    pub alpha_frozen: Vec<bool>,
    /// Transmittance before each alpha slot (n-1 entries).
    pub trans: Vec<f64>,
    pub weights: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    /// Per channel: raw interpolated rgb inside [0, 1] (clamp inactive).
    pub rgb_in_range: Vec<[bool; 3]>,
    pub color: [f64; 3],
    pub acc_weight: f64,
    pub background: [f64; 3],
}

impl RayForward {
    pub fn compute(
        field: &VoxelField,
        ray: &Ray,
        ts: &[f64],
        background: [f64; 3],
    ) -> RayForward {
        let positions: Vec<Vector3<f64>> =
            ts.iter().map(|&t| ray.origin + t * ray.direction).collect();
        Self::compute_at(field, ts.to_vec(), positions, background)
    }

    /// Forward pass at explicit positions (used when positions are frozen
    /// independent of the pose).
    pub fn compute_at(
        field: &VoxelField,
        ts: Vec<f64>,
        positions: Vec<Vector3<f64>>,
        background: [f64; 3],
    ) -> RayForward {
        let n = positions.len();
        let s = field.inv_std;
        let mut cells = Vec::with_capacity(n);
        let mut f = Vec::with_capacity(n);
        let mut phi = Vec::with_capacity(n);
        let mut colors = Vec::with_capacity(n);
        let mut rgb_in_range = Vec::with_capacity(n);
        for p in &positions {
            let cell = field.cell_at(p);
            let fv: f64 = (0..8).map(|c| field.sdf[cell.idx[c]] * cell.w[c]).sum();
            f.push(fv);
            phi.push(sigmoid(s * fv));
            let mut raw = [0.0f64; 3];
            for c in 0..8 {
                let base = cell.idx[c] * 3;
                for ch in 0..3 {
                    raw[ch] += field.rgb[base + ch] * cell.w[c];
                }
            }
            let mut clamped = [0.0f64; 3];
            let mut in_range = [false; 3];
            for ch in 0..3 {
                clamped[ch] = raw[ch].clamp(0.0, 1.0);
                in_range[ch] = (0.0..=1.0).contains(&raw[ch]);
            }
            colors.push(clamped);
            rgb_in_range.push(in_range);
            cells.push(cell);
        }
        let m = n.saturating_sub(1);
        let mut alpha = Vec::with_capacity(m);
        let mut alpha_frozen = Vec::with_capacity(m);
        let mut trans = Vec::with_capacity(m);
        let mut weights = vec![0.0; n];
        let mut t_acc = 1.0f64;
        let mut color = [0.0f64; 3];
        let mut acc_weight = 0.0;
        for i in 0..m {
            let denom = phi[i].max(PHI_EPS);
            let raw = (phi[i] - phi[i + 1]) / denom;
            let a = raw.clamp(0.0, 1.0);
            let frozen = !(0.0..=1.0).contains(&raw) || phi[i] <= PHI_EPS;
            trans.push(t_acc);
            let w = a * t_acc;
            weights[i] = w;
            acc_weight += w;
            for ch in 0..3 {
                color[ch] += w * colors[i][ch];
            }
            t_acc *= 1.0 - a;
            alpha.push(a);
            alpha_frozen.push(frozen);
        }
        for ch in 0..3 {
            color[ch] += (1.0 - acc_weight) * background[ch];
        }
        RayForward {
            ts,
            positions,
            cells,
            f,
            phi,
            alpha,
            alpha_frozen,
            trans,
            weights,
            colors,
            rgb_in_range,
            color,
            acc_weight,
            background,
        }
    }

    pub fn into_result(self) -> RenderResult {
        let samples = (0..self.positions.len())
            .map(|i| RaySample {
                t: self.ts[i],
                position: self.positions[i],
                sdf: self.f[i],
                weight: self.weights[i],
                color: self.colors[i],
            })
            .collect();
        RenderResult {
            color: self.color,
            samples,
            accumulated_weight: self.acc_weight,
        }
    }

    /// Reverse pass through the transmittance chain: given dL/d(weight_i),
    /// produce dL/d(alpha_i).
    pub fn backprop_weights_to_alphas(&self, d_weights: &[f64]) -> Vec<f64> {
        let m = self.alpha.len();
        let mut d_alpha = vec![0.0; m];
        let mut suffix = 0.0; // sum over k > i of d_w[k] * w[k]
        for i in (0..m).rev() {
            let one_minus = 1.0 - self.alpha[i];
            let correction = if one_minus > 1e-12 {
                suffix / one_minus
            } else {
                0.0 // all later weights are zero, so suffix is zero too
            };
            d_alpha[i] = self.trans[i] * d_weights[i] - correction;
            suffix += d_weights[i] * self.weights[i];
        }
        d_alpha
    }

    /// dL/d(alpha) -> dL/d(f_i) and dL/ds through the logistic CDF ratio.
    pub fn backprop_alphas_to_sdf(&self, d_alpha: &[f64], s: f64) -> (Vec<f64>, f64) {
        let n = self.positions.len();
        let mut d_f = vec![0.0; n];
        let mut d_s = 0.0;
        for i in 0..d_alpha.len() {
            if self.alpha_frozen[i] || d_alpha[i] == 0.0 {
                continue;
            }
            let denom = self.phi[i].max(PHI_EPS);
            // raw = (phi_i - phi_{i+1}) / phi_i  (denominator at phi_i here,
            // since the frozen flag covers the guarded branch)
            let d_raw_d_phi_i = (1.0 - self.alpha[i]) / denom;
            let d_raw_d_phi_next = -1.0 / denom;
            let dphi_i = self.phi[i] * (1.0 - self.phi[i]);
            let dphi_next = self.phi[i + 1] * (1.0 - self.phi[i + 1]);
            d_f[i] += d_alpha[i] * d_raw_d_phi_i * s * dphi_i;
            d_f[i + 1] += d_alpha[i] * d_raw_d_phi_next * s * dphi_next;
            d_s += d_alpha[i]
                * (d_raw_d_phi_i * self.f[i] * dphi_i
                    + d_raw_d_phi_next * self.f[i + 1] * dphi_next);
        }
        (d_f, d_s)
    }
}
