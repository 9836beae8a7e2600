//! Synthetic dataset generation: analytic-SDF scenes, hemisphere cameras,
//! ground-truth renders, geometry-exact keypoint matches, and DTU-style
//! outlier pose injection.
//!
//! The generator replaces a learned SfM front end. Matches come from exact
//! surface geometry plus controllable pixel noise, and an optional
//! contamination fraction swaps matches for uniformly random wrong pairs.

mod io;
mod sdf;

pub use io::{pose_from_parts, read_bundle, write_bundle};
pub use sdf::{
    analytic_normal, analytic_sdf, analytic_sdf_value, light_direction, render_gt, sphere_trace,
    Primitive, PrimitiveShape,
};

use nalgebra::{UnitQuaternion, UnitVector3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::Aabb;
use crate::geometry::{project, rotation_angle_between, Intrinsics, Pose, Ray};
use crate::img::Image;
use crate::mesh::{marching_cubes_fn, Mesh};
use crate::rng;
use crate::scene_graph::{Edge, Match, Node, SceneGraph};

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub width: usize,
    pub height: usize,
    pub n_cameras: usize,
    pub hemisphere_radius: f64,
    pub seed: u64,
    /// Target matches per camera pair (pairs yielding < 8 get no edge).
    pub per_pair_matches: usize,
    /// Gaussian pixel noise added to both keypoints of a match.
    pub match_noise_px: f64,
    /// Fraction of matches replaced by uniformly random wrong pairs.
    pub contaminate: f64,
    /// Small pose noise applied to non-outlier cameras so every estimate
    /// starts imperfect (degrees; rotation and translation direction).
    pub inlier_rot_noise_deg: f64,
    pub inlier_dir_noise_deg: f64,
    /// Resolution for the ground-truth mesh extraction.
    pub gt_mesh_resolution: usize,
}

impl SceneSpec {
    /// The default desk-scale scene: three primitives, 15 cameras on a
    /// hemisphere, 128x128 images with fx = fy = 128.
    pub fn toy(seed: u64) -> SceneSpec {
        SceneSpec {
            name: "toy".into(),
            primitives: vec![
                Primitive {
                    shape: PrimitiveShape::Sphere,
                    pose: Pose::new(
                        UnitQuaternion::identity(),
                        Vector3::new(-0.28, -0.05, 0.0),
                    ),
                    size: Vector3::new(0.32, 0.0, 0.0),
                    color: [0.75, 0.25, 0.2],
                },
                Primitive {
                    shape: PrimitiveShape::Box,
                    pose: Pose::new(
                        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.52),
                        Vector3::new(0.3, 0.12, -0.05),
                    ),
                    size: Vector3::new(0.2, 0.16, 0.22),
                    color: [0.25, 0.55, 0.8],
                },
                Primitive {
                    shape: PrimitiveShape::Torus,
                    pose: Pose::new(
                        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 1.2),
                        Vector3::new(0.05, -0.32, 0.18),
                    ),
                    size: Vector3::new(0.22, 0.08, 0.0),
                    color: [0.3, 0.7, 0.3],
                },
            ],
            width: 128,
            height: 128,
            n_cameras: 15,
            hemisphere_radius: 2.5,
            seed,
            per_pair_matches: 24,
            match_noise_px: 0.5,
            contaminate: 0.0,
            inlier_rot_noise_deg: 2.0,
            inlier_dir_noise_deg: 4.0,
            gt_mesh_resolution: 256,
        }
    }

    /// A single-sphere scene, mostly useful for debugging.
    pub fn sphere(seed: u64) -> SceneSpec {
        let mut spec = SceneSpec::toy(seed);
        spec.name = "sphere".into();
        spec.primitives = vec![Primitive {
            shape: PrimitiveShape::Sphere,
            pose: Pose::identity(),
            size: Vector3::new(0.45, 0.0, 0.0),
            color: [0.8, 0.3, 0.25],
        }];
        spec
    }

    pub fn by_name(name: &str, seed: u64) -> Result<SceneSpec> {
        match name {
            "toy" => Ok(SceneSpec::toy(seed)),
            "sphere" => Ok(SceneSpec::sphere(seed)),
            other => Err(Error::input(format!(
                "unknown scene '{other}' (available: toy, sphere)"
            ))),
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.width as f64,
            fy: self.width as f64,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutlierSpec {
    /// Fraction of cameras to corrupt, in [0, 1/3].
    pub fraction: f64,
    /// Maximum angle applied to the translation direction (degrees).
    pub eps_t_max_deg: f64,
    /// Maximum rotation perturbation (degrees).
    pub eps_r_max_deg: f64,
    pub seed: u64,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        OutlierSpec {
            fraction: 0.2,
            eps_t_max_deg: 90.0,
            eps_r_max_deg: 20.0,
            seed: 1,
        }
    }
}

fn random_axis(rng: &mut ChaCha8Rng) -> UnitVector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return UnitVector3::new_normalize(v);
        }
    }
}

/// Gaussian sample via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Perturb a pose: rotate the translation vector by a uniform angle in
/// [0, dir_max_deg] about a random axis (direction noise, magnitude
/// preserved) and left-multiply a uniform-axis rotation with angle uniform
/// in [0, rot_max_deg].
pub fn perturb_pose(
    pose: &Pose,
    rot_max_deg: f64,
    dir_max_deg: f64,
    rng: &mut ChaCha8Rng,
) -> Pose {
    let dir_angle = rng.gen_range(0.0..=dir_max_deg).to_radians();
    let dir_axis = random_axis(rng);
    let t_rot = UnitQuaternion::from_axis_angle(&dir_axis, dir_angle);
    let rot_angle = rng.gen_range(0.0..=rot_max_deg).to_radians();
    let rot_axis = random_axis(rng);
    let q_noise = UnitQuaternion::from_axis_angle(&rot_axis, rot_angle);
    let mut q = q_noise * pose.rotation;
    q.renormalize_fast();
    Pose {
        rotation: q,
        translation: t_rot * pose.translation,
    }
}

/// Fibonacci-spiral viewpoints on the upper hemisphere, all looking at the
/// origin with +z projected out as the up direction.
pub fn place_cameras(n: usize, radius: f64) -> Vec<Pose> {
    assert!(n >= 4, "place_cameras requires n >= 4");
    let golden_angle = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let z = (i as f64 + 0.5) / n as f64;
            let r_xy = (1.0 - z * z).sqrt();
            let az = golden_angle * i as f64;
            let center = radius * Vector3::new(r_xy * az.cos(), r_xy * az.sin(), z);
            look_at_origin(center)
        })
        .collect()
}

/// Camera-to-world pose at `center` with the optical axis through the
/// origin; camera frame is +x right, +y down, +z forward.
pub fn look_at_origin(center: Vector3<f64>) -> Pose {
    let forward = (-center).normalize();
    let world_up = Vector3::z();
    let mut up = world_up - world_up.dot(&forward) * forward;
    if up.norm() < 1e-9 {
        up = Vector3::x();
    }
    let up = up.normalize();
    let down = -up;
    let right = down.cross(&forward);
    let rot = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[
        right, down, forward,
    ]));
    Pose::new(UnitQuaternion::from_rotation_matrix(&rot), center)
}

/// Corrupt a random subset of poses: translation-direction noise up to
/// eps_t and rotation noise up to eps_r. Returns the noisy poses and the
/// sorted indices of injected outliers.
pub fn inject_outliers(poses: &[Pose], spec: &OutlierSpec) -> Result<(Vec<Pose>, Vec<usize>)> {
    if !(0.0..=1.0 / 3.0 + 1e-12).contains(&spec.fraction) {
        return Err(Error::input(format!(
            "outlier fraction {} outside [0, 1/3]",
            spec.fraction
        )));
    }
    let n = poses.len();
    let mut out = poses.to_vec();
    if spec.fraction == 0.0 {
        return Ok((out, vec![]));
    }
    let count = ((spec.fraction * n as f64).round() as usize).clamp(1, n);
    let mut r = rng::rng_from_seed(rng::mix(spec.seed, 0xD1CE));
    let mut indices: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates for the first `count` picks.
    for i in 0..count {
        let j = r.gen_range(i..n);
        indices.swap(i, j);
    }
    let mut labels: Vec<usize> = indices[..count].to_vec();
    labels.sort_unstable();
    for &idx in &labels {
        out[idx] = perturb_pose(&poses[idx], spec.eps_r_max_deg, spec.eps_t_max_deg, &mut r);
    }
    Ok((out, labels))
}

/// Geometry-exact matches between co-visible camera pairs: surface points
/// sphere-traced from one view, checked for visibility in the other,
/// projected into both, plus Gaussian pixel noise. Pairs with relative
/// rotation above 90 degrees or fewer than 8 co-visible points get no edge.
pub fn gen_matches(
    primitives: &[Primitive],
    poses: &[Pose],
    intr: &Intrinsics,
    per_pair: usize,
    noise_px: f64,
    contaminate: f64,
    seed: u64,
) -> Result<Vec<Edge>> {
    if per_pair < 8 {
        return Err(Error::input("gen_matches: per_pair must be >= 8"));
    }
    let mut edges = Vec::new();
    let margin = 1.5;
    for i in 0..poses.len() {
        for j in (i + 1)..poses.len() {
            if rotation_angle_between(&poses[i], &poses[j]) > 90.0 {
                continue;
            }
            let mut r = rng::rng_from_seed(rng::mix2(seed, i as u64, j as u64));
            let mut matches = Vec::new();
            let max_attempts = per_pair * 30;
            let mut attempts = 0;
            while matches.len() < per_pair && attempts < max_attempts {
                attempts += 1;
                let u = r.gen_range(margin..intr.width as f64 - margin);
                let v = r.gen_range(margin..intr.height as f64 - margin);
                let ray = crate::geometry::pixel_to_ray(&poses[i], intr, u, v)?;
                let Some(t) = sphere_trace(primitives, &ray) else {
                    continue;
                };
                let point = ray.origin + t * ray.direction;
                let Some((uj, vj)) = project(&poses[j], intr, &point).pixel() else {
                    continue;
                };
                if uj < margin
                    || uj > intr.width as f64 - margin
                    || vj < margin
                    || vj > intr.height as f64 - margin
                {
                    continue;
                }
                // Occlusion check from view j.
                let to_point = point - poses[j].translation;
                let dist = to_point.norm();
                let vis_ray = Ray {
                    origin: poses[j].translation,
                    direction: to_point / dist,
                };
                let Some(tj) = sphere_trace(primitives, &vis_ray) else {
                    continue;
                };
                if (tj - dist).abs() > 1e-3 {
                    continue; // occluded
                }
                let (mut a, mut b) = ((u, v), (uj, vj));
                if noise_px > 0.0 {
                    a.0 += noise_px * gaussian(&mut r);
                    a.1 += noise_px * gaussian(&mut r);
                    b.0 += noise_px * gaussian(&mut r);
                    b.1 += noise_px * gaussian(&mut r);
                }
                if !intr.contains_pixel(a.0, a.1) || !intr.contains_pixel(b.0, b.1) {
                    continue;
                }
                matches.push(Match { a, b });
            }
            if matches.len() >= 8 {
                if contaminate > 0.0 {
                    for m in matches.iter_mut() {
                        if r.gen::<f64>() < contaminate {
                            *m = Match {
                                a: (
                                    r.gen_range(0.0..intr.width as f64),
                                    r.gen_range(0.0..intr.height as f64),
                                ),
                                b: (
                                    r.gen_range(0.0..intr.width as f64),
                                    r.gen_range(0.0..intr.height as f64),
                                ),
                            };
                        }
                    }
                }
                edges.push(Edge { i, j, matches });
            }
        }
    }
    Ok(edges)
}

#[derive(Debug, Clone)]
pub struct BundleNode {
    pub id: usize,
    pub image: Image,
    /// The estimated (noisy) pose the trainer starts from.
    pub pose: Pose,
    pub gt_pose: Pose,
}

/// Everything a training/evaluation run needs, as generated or as loaded
/// from disk.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub intrinsics: Intrinsics,
    pub nodes: Vec<BundleNode>,
    pub edges: Vec<Edge>,
    pub gt_mesh: Mesh,
    pub outlier_labels: Vec<usize>,
}

impl DatasetBundle {
    pub fn generate(scene: &SceneSpec, outliers: &OutlierSpec) -> Result<DatasetBundle> {
        let intr = scene.intrinsics();
        intr.validate()?;
        let gt_poses = place_cameras(scene.n_cameras, scene.hemisphere_radius);

        let images: Vec<Image> = gt_poses
            .iter()
            .map(|pose| render_gt(&scene.primitives, pose, &intr).quantized())
            .collect();

        let edges = gen_matches(
            &scene.primitives,
            &gt_poses,
            &intr,
            scene.per_pair_matches,
            scene.match_noise_px,
            scene.contaminate,
            rng::mix(scene.seed, 0x1234),
        )?;

        let (mut noisy, labels) = inject_outliers(&gt_poses, outliers)?;
        // Non-outlier cameras start with small pose noise of their own.
        let label_set: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
        let mut r = rng::rng_from_seed(rng::mix(outliers.seed, 0x5EED));
        for (idx, pose) in noisy.iter_mut().enumerate() {
            if !label_set.contains(&idx) {
                *pose = perturb_pose(
                    pose,
                    scene.inlier_rot_noise_deg,
                    scene.inlier_dir_noise_deg,
                    &mut r,
                );
            }
        }

        let gt_mesh = marching_cubes_fn(
            |p| analytic_sdf_value(&scene.primitives, &p),
            Aabb::unit(),
            scene.gt_mesh_resolution,
            0.0,
        )?;
        if gt_mesh.is_empty() {
            return Err(Error::input("scene has an empty ground-truth surface"));
        }

        let nodes = (0..scene.n_cameras)
            .map(|id| BundleNode {
                id,
                image: images[id].clone(),
                pose: noisy[id],
                gt_pose: gt_poses[id],
            })
            .collect();

        Ok(DatasetBundle {
            intrinsics: intr,
            nodes,
            edges,
            gt_mesh,
            outlier_labels: labels,
        })
    }

    /// Build the scene graph the trainer starts from (confidence zeroed,
    /// ground-truth poses attached for evaluation).
    pub fn to_scene_graph(&self) -> Result<SceneGraph> {
        let nodes = self
            .nodes
            .iter()
            .map(|bn| Node {
                id: bn.id,
                pose: bn.pose,
                image: bn.image.clone(),
                confidence: 0.0,
                gt_pose: Some(bn.gt_pose),
            })
            .collect();
        SceneGraph::new(nodes, self.edges.clone(), self.intrinsics)
    }

    pub fn initial_poses(&self) -> Vec<Pose> {
        self.nodes.iter().map(|n| n.pose).collect()
    }

    pub fn gt_poses(&self) -> Vec<Pose> {
        self.nodes.iter().map(|n| n.gt_pose).collect()
    }
}
