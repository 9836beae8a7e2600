//! Adam with per-parameter-group state and learning rates.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::field::VoxelField;
use crate::geometry::Pose;

use super::GradientSet;

/// Lower clamp for the opacity sharpness parameter.
pub const S_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Bias-corrected update vector `lr * m_hat / (sqrt(v_hat) + eps)`;
    /// subtract it from the parameters.
    pub fn update(&mut self, grads: &[f64], cfg: &AdamParams) -> Vec<f64> {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        let mut out = Vec::with_capacity(grads.len());
        for i in 0..grads.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grads[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            out.push(cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
        }
        out
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &AdamParams) {
        let upd = self.update(grads, cfg);
        for (p, u) in params.iter_mut().zip(upd) {
            *p -= u;
        }
    }
}

/// Optimizer over the whole model: field grids, sharpness, and per-node
/// pose deltas (axis-angle + translation, left-multiplied).
#[derive(Debug, Clone)]
pub struct ModelOptimizer {
    pub field_params: AdamParams,
    pub s_params: AdamParams,
    pub pose_params: AdamParams,
    sdf: AdamState,
    rgb: AdamState,
    s: AdamState,
    poses: BTreeMap<usize, AdamState>,
}

#[derive(Debug, Default)]
pub struct StepOutcome {
    /// Parameter groups whose step was rejected for non-finite gradients.
    pub rejected: Vec<String>,
}

impl ModelOptimizer {
    pub fn new(field: &VoxelField, lr_field: f64, lr_s: f64, lr_pose: f64) -> Self {
        ModelOptimizer {
            field_params: AdamParams::with_lr(lr_field),
            s_params: AdamParams::with_lr(lr_s),
            pose_params: AdamParams::with_lr(lr_pose),
            sdf: AdamState::new(field.sdf.len()),
            rgb: AdamState::new(field.rgb.len()),
            s: AdamState::new(1),
            poses: BTreeMap::new(),
        }
    }

    /// Apply one Adam step. Groups with any non-finite gradient entry are
    /// rejected and logged. The sharpness is clamped to `S_MIN`, RGB to
    /// [0, 1], and pose quaternions renormalize inside `apply_delta`.
    pub fn step(
        &mut self,
        field: &mut VoxelField,
        poses: &mut [Pose],
        grads: &GradientSet,
        freeze_poses: bool,
    ) -> StepOutcome {
        let mut outcome = StepOutcome::default();

        if grads.d_sdf.iter().all(|g| g.is_finite()) {
            self.sdf.step(&mut field.sdf, &grads.d_sdf, &self.field_params);
        } else {
            log::warn!("non-finite sdf gradient: step rejected");
            outcome.rejected.push("sdf".into());
        }

        if grads.d_rgb.iter().all(|g| g.is_finite()) {
            self.rgb.step(&mut field.rgb, &grads.d_rgb, &self.field_params);
            for v in field.rgb.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        } else {
            log::warn!("non-finite rgb gradient: step rejected");
            outcome.rejected.push("rgb".into());
        }

        if grads.d_s.is_finite() {
            let mut s = [field.inv_std];
            self.s.step(&mut s, &[grads.d_s], &self.s_params);
            field.inv_std = s[0].max(S_MIN);
        } else {
            log::warn!("non-finite s gradient: step rejected");
            outcome.rejected.push("s".into());
        }

        if !freeze_poses {
            for (&node, g) in &grads.d_pose {
                if !g.iter().all(|v| v.is_finite()) {
                    log::warn!("non-finite pose gradient on node {node}: step rejected");
                    outcome.rejected.push(format!("pose[{node}]"));
                    continue;
                }
                let state = self
                    .poses
                    .entry(node)
                    .or_insert_with(|| AdamState::new(6));
                let upd = state.update(g, &self.pose_params);
                let omega = -Vector3::new(upd[0], upd[1], upd[2]);
                let dt = -Vector3::new(upd[3], upd[4], upd[5]);
                poses[node] = poses[node].apply_delta(&omega, &dt);
            }
        }
        outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        let orig = p.clone();
        st.step(&mut p, &[0.0, 0.0, 0.0], &AdamParams::with_lr(0.1));
        assert_eq!(p, orig);
    }

    #[test]
    fn first_step_is_minus_lr_for_unit_gradient() {
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        let lr = 0.05;
        st.step(&mut p, &[1.0], &AdamParams::with_lr(lr));
        // Bias-corrected first step: lr * g / (|g| + eps) ~ lr.
        assert!((p[0] + lr).abs() < 1e-6, "got {}", p[0]);
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = 0.5 * sum (x - a)^2, optimum x = a.
        let a = [3.0, -1.5, 0.25, 7.0];
        let mut p = vec![0.0; 4];
        let mut st = AdamState::new(4);
        let cfg = AdamParams::with_lr(0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().zip(&a).map(|(x, ai)| x - ai).collect();
            st.step(&mut p, &g, &cfg);
        }
        for (x, ai) in p.iter().zip(&a) {
            assert!((x - ai).abs() < 1e-6, "x {x} vs {ai}");
        }
    }
}
