//! Analytic SDF scenes and the exact sphere-traced reference renderer.

use nalgebra::Vector3;

use crate::geometry::{pixel_to_ray, Intrinsics, Pose, Ray};
use crate::img::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimitiveShape {
    Sphere,
    Box,
    Torus,
}

#[derive(Debug, Clone)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    pub pose: Pose,
    /// Sphere: x = radius. Box: half extents. Torus: x = major, y = minor.
    pub size: Vector3<f64>,
    pub color: [f64; 3],
}

impl Primitive {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        let local = self.pose.inverse().apply(p);
        match self.shape {
            PrimitiveShape::Sphere => local.norm() - self.size.x,
            PrimitiveShape::Box => {
                let q = Vector3::new(
                    local.x.abs() - self.size.x,
                    local.y.abs() - self.size.y,
                    local.z.abs() - self.size.z,
                );
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            PrimitiveShape::Torus => {
                let ring = (local.x * local.x + local.y * local.y).sqrt() - self.size.x;
                (ring * ring + local.z * local.z).sqrt() - self.size.y
            }
        }
    }
}

/// Min-union SDF over the scene's primitives with the color of the nearest
/// primitive.
pub fn analytic_sdf(primitives: &[Primitive], p: &Vector3<f64>) -> (f64, [f64; 3]) {
    let mut best = f64::INFINITY;
    let mut color = [0.0; 3];
    for prim in primitives {
        let d = prim.sdf(p);
        if d < best {
            best = d;
            color = prim.color;
        }
    }
    (best, color)
}

pub fn analytic_sdf_value(primitives: &[Primitive], p: &Vector3<f64>) -> f64 {
    analytic_sdf(primitives, p).0
}

/// Central-difference normal of the union SDF.
pub fn analytic_normal(primitives: &[Primitive], p: &Vector3<f64>) -> Vector3<f64> {
    let h = 1e-5;
    let mut g = Vector3::zeros();
    for a in 0..3 {
        let mut pp = *p;
        let mut pm = *p;
        pp[a] += h;
        pm[a] -= h;
        g[a] = (analytic_sdf_value(primitives, &pp) - analytic_sdf_value(primitives, &pm))
            / (2.0 * h);
    }
    let n = g.norm();
    if n > 1e-12 {
        g / n
    } else {
        Vector3::z()
    }
}

pub const TRACE_EPS: f64 = 1e-6;
pub const TRACE_MAX_T: f64 = 20.0;
pub const TRACE_MAX_STEPS: usize = 512;

/// Sphere trace the union SDF; returns the hit depth when the surface is
/// reached.
pub fn sphere_trace(primitives: &[Primitive], ray: &Ray) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..TRACE_MAX_STEPS {
        let p = ray.origin + t * ray.direction;
        let d = analytic_sdf_value(primitives, &p);
        if d < TRACE_EPS {
            return Some(t);
        }
        t += d;
        if t > TRACE_MAX_T {
            return None;
        }
    }
    None
}

/// Fixed directional light for the reference renders.
pub fn light_direction() -> Vector3<f64> {
    Vector3::new(-0.4, -0.3, -0.85).normalize()
}

const AMBIENT: f64 = 0.35;

/// Exact sphere-traced render with flat per-primitive albedo and Lambertian
/// shading from a fixed directional light over a white background.
/// Deterministic; one ray per pixel center.
pub fn render_gt(primitives: &[Primitive], pose: &Pose, intr: &Intrinsics) -> Image {
    let mut img = Image::new(intr.width, intr.height);
    let light = light_direction();
    for y in 0..intr.height {
        for x in 0..intr.width {
            let ray = pixel_to_ray(pose, intr, x as f64 + 0.5, y as f64 + 0.5)
                .expect("pixel center inside image");
            let rgb = match sphere_trace(primitives, &ray) {
                Some(t) => {
                    let p = ray.origin + t * ray.direction;
                    let (_, albedo) = analytic_sdf(primitives, &p);
                    let n = analytic_normal(primitives, &p);
                    let lambert = n.dot(&-light).max(0.0);
                    let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
                    [
                        (albedo[0] * shade).clamp(0.0, 1.0),
                        (albedo[1] * shade).clamp(0.0, 1.0),
                        (albedo[2] * shade).clamp(0.0, 1.0),
                    ]
                }
                None => [1.0, 1.0, 1.0],
            };
            img.set(x, y, rgb);
        }
    }
    img
}
