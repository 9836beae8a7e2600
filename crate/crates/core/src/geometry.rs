//! Rigid-body and camera math.
//!
//! Poses follow the camera-to-world convention: `rotation` maps camera-frame
//! vectors into the world and `translation` is the camera center in world
//! coordinates, so ray origins fall straight out of the pose. The camera
//! frame is +x right, +y down, +z forward (pinhole, no distortion).

use nalgebra::{Matrix3, Matrix4, Quaternion, SymmetricEigen, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    /// Camera center in world coordinates.
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_quat_parts(qw: f64, qx: f64, qy: f64, qz: f64, t: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Pose::new(q, t)
    }

    /// Transform a camera-frame point into the world.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.to_rotation_matrix().into_inner());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Left-multiplied axis-angle rotation delta plus translation delta,
    /// with the quaternion renormalized afterwards. This is the update
    /// parameterization used by the optimizer.
    pub fn apply_delta(&self, omega: &Vector3<f64>, dt: &Vector3<f64>) -> Pose {
        let dq = UnitQuaternion::from_scaled_axis(*omega);
        let mut q = dq * self.rotation;
        q.renormalize_fast();
        Pose {
            rotation: q,
            translation: self.translation + dt,
        }
    }
}

/// Result of applying `b` then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let mut q = a.rotation * b.rotation;
    q.renormalize_fast();
    Pose {
        rotation: q,
        translation: a.rotation * b.translation + a.translation,
    }
}

/// Angle of the relative rotation between two poses, in degrees, in [0, 180].
pub fn rotation_angle_between(a: &Pose, b: &Pose) -> f64 {
    let rel = a.rotation.inverse() * b.rotation;
    rel.angle().to_degrees()
}

/// Shared pinhole intrinsics. Focal lengths and principal point in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::input("intrinsics: focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::input("intrinsics: cx outside image"));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::input("intrinsics: cy outside image"));
        }
        Ok(())
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= self.width as f64 && v >= 0.0 && v <= self.height as f64
    }
}

/// A world-space ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

/// Cast a ray through subpixel coordinates (u, v).
pub fn pixel_to_ray(pose: &Pose, intr: &Intrinsics, u: f64, v: f64) -> Result<Ray> {
    if !intr.contains_pixel(u, v) {
        return Err(Error::input(format!(
            "pixel ({u:.2}, {v:.2}) outside {}x{} image",
            intr.width, intr.height
        )));
    }
    let dir_cam = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    let dir = (pose.rotation * dir_cam).normalize();
    Ok(Ray {
        origin: pose.translation,
        direction: dir,
    })
}

/// Pinhole projection result. Points with non-positive camera-frame depth
/// are flagged rather than silently projected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel { u: f64, v: f64 },
    BehindCamera,
}

impl Projection {
    pub fn pixel(&self) -> Option<(f64, f64)> {
        match self {
            Projection::Pixel { u, v } => Some((*u, *v)),
            Projection::BehindCamera => None,
        }
    }
}

pub fn project(pose: &Pose, intr: &Intrinsics, point: &Vector3<f64>) -> Projection {
    let p_cam = pose.rotation.inverse() * (point - pose.translation);
    if p_cam.z <= 0.0 {
        return Projection::BehindCamera;
    }
    Projection::Pixel {
        u: intr.fx * p_cam.x / p_cam.z + intr.cx,
        v: intr.fy * p_cam.y / p_cam.z + intr.cy,
    }
}

/// 7-DoF similarity transform `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Similarity {
        let r_inv = self.rotation.inverse();
        let s_inv = 1.0 / self.scale;
        Similarity {
            scale: s_inv,
            rotation: r_inv,
            translation: -s_inv * (r_inv * self.translation),
        }
    }

    /// Map a camera-to-world pose into the transformed frame.
    pub fn apply_to_pose(&self, pose: &Pose) -> Pose {
        let mut q = self.rotation * pose.rotation;
        q.renormalize_fast();
        Pose {
            rotation: q,
            translation: self.apply(&pose.translation),
        }
    }
}

/// Chordal L2 mean of unit quaternions: leading eigenvector of the Gram
/// matrix, with signs aligned against the first sample beforehand.
fn chordal_mean(quats: &[UnitQuaternion<f64>]) -> UnitQuaternion<f64> {
    let mut gram = nalgebra::Matrix4::<f64>::zeros();
    let first = quats[0].coords;
    for q in quats {
        let mut v = q.coords;
        if v.dot(&first) < 0.0 {
            v = -v;
        }
        gram += v * v.transpose();
    }
    let eig = SymmetricEigen::new(gram);
    let mut best = 0;
    for i in 1..4 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let v = eig.eigenvectors.column(best);
    UnitQuaternion::from_quaternion(Quaternion::new(v[3], v[0], v[1], v[2]))
}

/// Fit the similarity minimizing `sum_i || s R c_est_i + t - c_gt_i ||^2`
/// over masked-in cameras. The global orientation is seeded by the chordal
/// mean of the per-camera relative rotations and then refined by the
/// closed-form least-squares similarity fit on camera centers. Masked-out
/// cameras do not influence the fit.
pub fn align_similarity(
    est_centers: &[Vector3<f64>],
    gt_centers: &[Vector3<f64>],
    est_rotations: &[UnitQuaternion<f64>],
    gt_rotations: &[UnitQuaternion<f64>],
    mask: &[bool],
) -> Result<Similarity> {
    let n_total = est_centers.len();
    if gt_centers.len() != n_total
        || est_rotations.len() != n_total
        || gt_rotations.len() != n_total
        || mask.len() != n_total
    {
        return Err(Error::input("align_similarity: mismatched input lengths"));
    }
    let idx: Vec<usize> = (0..n_total).filter(|&i| mask[i]).collect();
    if idx.len() < 3 {
        return Err(Error::Alignment(format!(
            "need at least 3 masked-in cameras, got {}",
            idx.len()
        )));
    }

    // Orientation seed from rotation averaging.
    let rel: Vec<UnitQuaternion<f64>> = idx
        .iter()
        .map(|&i| gt_rotations[i] * est_rotations[i].inverse())
        .collect();
    let r0 = chordal_mean(&rel);

    // Closed-form similarity refinement on centers, with est centers
    // pre-rotated by the seed.
    let n = idx.len() as f64;
    let rotated: Vec<Vector3<f64>> = idx.iter().map(|&i| r0 * est_centers[i]).collect();
    let gts: Vec<Vector3<f64>> = idx.iter().map(|&i| gt_centers[i]).collect();
    let mu_e: Vector3<f64> = rotated.iter().sum::<Vector3<f64>>() / n;
    let mu_g: Vector3<f64> = gts.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::<f64>::zeros();
    let mut var_e = 0.0;
    for (e, g) in rotated.iter().zip(&gts) {
        let de = e - mu_e;
        let dg = g - mu_g;
        cov += dg * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= n;
    var_e /= n;
    if var_e < 1e-18 {
        return Err(Error::Alignment(
            "degenerate configuration: coincident camera centers".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let sv = svd.singular_values;
    // Collinear centers leave the rotation about the line unconstrained.
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(Error::Alignment(
            "degenerate configuration: collinear camera centers".into(),
        ));
    }
    let det_sign = (u.determinant() * v_t.determinant()).signum();
    let d = Vector3::new(1.0, 1.0, det_sign);
    let r1_mat = u * Matrix3::from_diagonal(&d) * v_t;
    let r1 = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
        r1_mat,
    ));
    let scale = (sv[0] + sv[1] + det_sign * sv[2]) / var_e;
    if !(scale > 0.0) {
        return Err(Error::Alignment(format!("non-positive scale {scale}")));
    }
    let mut rotation = r1 * r0;
    rotation.renormalize_fast();
    let translation = mu_g - scale * (r1 * mu_e);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle: f64 = rng.gen_range(-3.0..3.0);
        let t = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        let axis = if axis.norm() < 1e-6 {
            Vector3::x()
        } else {
            axis.normalize()
        };
        Pose::new(UnitQuaternion::from_scaled_axis(axis * angle), t)
    }

    fn test_intrinsics() -> Intrinsics {
        Intrinsics {
            fx: 128.0,
            fy: 128.0,
            cx: 64.0,
            cy: 64.0,
            width: 128,
            height: 128,
        }
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = crate::rng::rng_from_seed(7);
        for _ in 0..20 {
            let p = random_pose(&mut rng);
            let id = Pose::identity();
            let c = compose(&id, &p);
            assert_relative_eq!(c.translation, p.translation, epsilon = 1e-12);
            assert!(c.rotation.angle_to(&p.rotation) < 1e-12);

            let inv = compose(&p, &p.inverse());
            assert!(inv.translation.norm() < 1e-9);
            assert!(inv.rotation.angle() < 1e-9);
            assert_relative_eq!(p.rotation.norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn compose_matches_matrix_product_oracle() {
        let mut rng = crate::rng::rng_from_seed(11);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = compose(&a, &b);
            let m = a.to_matrix() * b.to_matrix();
            let p = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let via_pose = c.apply(&p);
            let hp = m * p.push(1.0);
            let via_mat = Vector3::new(hp[0], hp[1], hp[2]);
            assert_relative_eq!(via_pose, via_mat, epsilon = 1e-9);
        }
    }

    #[test]
    fn rotation_angle_examples() {
        let p = Pose::identity();
        assert_relative_eq!(rotation_angle_between(&p, &p), 0.0, epsilon = 1e-12);

        let q = Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 90f64.to_radians()),
            Vector3::zeros(),
        );
        assert_relative_eq!(rotation_angle_between(&p, &q), 90.0, epsilon = 1e-9);
    }

    #[test]
    fn rotation_angle_matches_trace_oracle() {
        let mut rng = crate::rng::rng_from_seed(13);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let got = rotation_angle_between(&a, &b);
            let ra = a.rotation.to_rotation_matrix().into_inner();
            let rb = b.rotation.to_rotation_matrix().into_inner();
            let tr = (ra.transpose() * rb).trace();
            let expect = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
            assert!((got - expect).abs() < 1e-6, "got {got} expect {expect}");
            assert!((0.0..=180.0).contains(&got));
        }
    }

    #[test]
    fn rotation_angle_symmetric_and_triangle() {
        let mut rng = crate::rng::rng_from_seed(17);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let ab = rotation_angle_between(&a, &b);
            let ba = rotation_angle_between(&b, &a);
            assert!((ab - ba).abs() < 1e-9);
            let bc = rotation_angle_between(&b, &c);
            let ac = rotation_angle_between(&a, &c);
            assert!(ac <= ab + bc + 1e-6);
        }
    }

    #[test]
    fn pixel_to_ray_axis_cases() {
        let intr = test_intrinsics();
        let pose = Pose::identity();
        let r = pixel_to_ray(&pose, &intr, intr.cx, intr.cy).unwrap();
        assert_relative_eq!(r.direction, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        assert_relative_eq!(r.direction.norm(), 1.0, epsilon = 1e-9);

        let wide = Intrinsics {
            fx: 32.0,
            fy: 32.0,
            ..intr
        };
        let r = pixel_to_ray(&pose, &wide, wide.cx + wide.fx, wide.cy).unwrap();
        let expect = Vector3::new(1.0, 0.0, 1.0).normalize();
        assert_relative_eq!(r.direction, expect, epsilon = 1e-12);

        assert!(pixel_to_ray(&pose, &intr, -1.0, 5.0).is_err());
        assert!(pixel_to_ray(&pose, &intr, 5.0, 129.0).is_err());
    }

    #[test]
    fn project_examples() {
        let intr = test_intrinsics();
        let pose = Pose::identity();
        match project(&pose, &intr, &Vector3::new(0.0, 0.0, 1.0)) {
            Projection::Pixel { u, v } => {
                assert_relative_eq!(u, intr.cx, epsilon = 1e-12);
                assert_relative_eq!(v, intr.cy, epsilon = 1e-12);
            }
            Projection::BehindCamera => panic!("should project"),
        }
        assert_eq!(
            project(&pose, &intr, &Vector3::new(0.0, 0.0, -1.0)),
            Projection::BehindCamera
        );
    }

    #[test]
    fn project_unproject_round_trip() {
        let intr = test_intrinsics();
        let mut rng = crate::rng::rng_from_seed(23);
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let u = rng.gen_range(0.5..intr.width as f64 - 0.5);
            let v = rng.gen_range(0.5..intr.height as f64 - 0.5);
            let depth = rng.gen_range(0.3..5.0);
            let ray = pixel_to_ray(&pose, &intr, u, v).unwrap();
            let point = ray.origin + depth * ray.direction;
            let (pu, pv) = project(&pose, &intr, &point).pixel().expect("in front");
            assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6);
        }
    }

    #[test]
    fn align_exact_identity() {
        let mut rng = crate::rng::rng_from_seed(29);
        let centers: Vec<Vector3<f64>> = (0..8)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let rots: Vec<UnitQuaternion<f64>> =
            (0..8).map(|_| random_pose(&mut rng).rotation).collect();
        let mask = vec![true; 8];
        let sim = align_similarity(&centers, &centers, &rots, &rots, &mask).unwrap();
        assert_relative_eq!(sim.scale, 1.0, epsilon = 1e-9);
        assert!(sim.rotation.angle() < 1e-9);
        assert!(sim.translation.norm() < 1e-9);
    }

    #[test]
    fn align_recovers_known_similarity() {
        let mut rng = crate::rng::rng_from_seed(31);
        let est: Vec<Vector3<f64>> = (0..10)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let est_rots: Vec<UnitQuaternion<f64>> =
            (0..10).map(|_| random_pose(&mut rng).rotation).collect();
        let truth = Similarity {
            scale: 2.5,
            rotation: UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 30f64.to_radians()),
            translation: Vector3::new(1.0, -2.0, 0.0),
        };
        let gt: Vec<Vector3<f64>> = est.iter().map(|c| truth.apply(c)).collect();
        let gt_rots: Vec<UnitQuaternion<f64>> =
            est_rots.iter().map(|q| truth.rotation * q).collect();
        let mask = vec![true; 10];
        let sim = align_similarity(&est, &gt, &est_rots, &gt_rots, &mask).unwrap();
        for (e, g) in est.iter().zip(&gt) {
            assert!((sim.apply(e) - g).norm() < 1e-7);
        }
        assert_relative_eq!(sim.scale, truth.scale, epsilon = 1e-7);

        // Applying then inverting is identity.
        let inv = sim.inverse();
        for e in &est {
            assert!((inv.apply(&sim.apply(e)) - e).norm() < 1e-7);
        }
    }

    #[test]
    fn align_ignores_masked_out_and_handles_noise() {
        let mut rng = crate::rng::rng_from_seed(37);
        let n = 12;
        let est: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let est_rots: Vec<UnitQuaternion<f64>> =
            (0..n).map(|_| random_pose(&mut rng).rotation).collect();
        let truth = Similarity {
            scale: 1.7,
            rotation: UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.4),
            translation: Vector3::new(0.3, 0.1, -0.8),
        };
        let mut gt: Vec<Vector3<f64>> = est.iter().map(|c| truth.apply(c)).collect();
        let gt_rots: Vec<UnitQuaternion<f64>> =
            est_rots.iter().map(|q| truth.rotation * q).collect();
        // Noise on inliers, garbage on two masked-out cameras.
        let mut mask = vec![true; n];
        for g in gt.iter_mut() {
            *g += Vector3::new(
                rng.gen_range(-1e-3..1e-3),
                rng.gen_range(-1e-3..1e-3),
                rng.gen_range(-1e-3..1e-3),
            );
        }
        gt[0] += Vector3::new(10.0, -5.0, 3.0);
        gt[1] += Vector3::new(-8.0, 2.0, 9.0);
        mask[0] = false;
        mask[1] = false;

        let sim = align_similarity(&est, &gt, &est_rots, &gt_rots, &mask).unwrap();
        let mut ss = 0.0;
        let mut cnt = 0.0;
        for i in 2..n {
            ss += (sim.apply(&est[i]) - gt[i]).norm_squared();
            cnt += 1.0;
        }
        let rms = (ss / cnt).sqrt();
        assert!(rms <= 3e-3, "rms {rms}");
    }

    #[test]
    fn align_rejects_degenerate() {
        let est = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
        ];
        let rots = vec![UnitQuaternion::identity(); 3];
        let mask = vec![true; 3];
        assert!(align_similarity(&est, &est, &rots, &rots, &mask).is_err());

        let mask2 = vec![true, true, false];
        assert!(align_similarity(&est, &est, &rots, &rots, &mask2).is_err());
    }
}
