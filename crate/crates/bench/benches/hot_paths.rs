use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::Vector3;

use sgsurf_core::eval::{chamfer, PointGrid};
use sgsurf_core::field::{Aabb, Stratification, VoxelField};
use sgsurf_core::geometry::Ray;
use sgsurf_core::img::{gaussian_blur, Image};
use sgsurf_core::iou::{iou_pair, iou_pair_with_grad, MogComponent, MogGrid, RayMoG};
use sgsurf_core::rng::rng_from_seed;

fn sphere_field(res: usize) -> VoxelField {
    VoxelField::from_sdf_fn(Aabb::unit(), [res; 3], 40.0, |p| p.norm() - 0.5)
}

fn bench_render_ray(c: &mut Criterion) {
    let field = sphere_field(64);
    let ray = Ray {
        origin: Vector3::new(0.1, -0.2, -2.5),
        direction: Vector3::new(-0.03, 0.06, 1.0).normalize(),
    };
    c.bench_function("render_ray_64_samples", |b| {
        b.iter(|| {
            field.render_ray(
                std::hint::black_box(&ray),
                1.5,
                3.5,
                64,
                [1.0; 3],
                Stratification::Midpoint,
            )
        })
    });
}

fn random_mog(seed: u64) -> RayMoG {
    use rand::Rng;
    let mut r = rng_from_seed(seed);
    let mut weights: Vec<f64> = (0..8).map(|_| r.gen_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    RayMoG {
        components: (0..8)
            .map(|i| MogComponent {
                mean: Vector3::new(
                    r.gen_range(-0.6..0.6),
                    r.gen_range(-0.6..0.6),
                    r.gen_range(-0.6..0.6),
                ),
                weight: weights[i],
                sample_index: i,
            })
            .collect(),
    }
}

fn bench_iou(c: &mut Criterion) {
    let grid = MogGrid::new(Aabb::unit());
    let a = random_mog(1);
    let b = random_mog(2);
    c.bench_function("iou_pair_separable", |bch| {
        bch.iter(|| iou_pair(std::hint::black_box(&a), std::hint::black_box(&b), &grid))
    });
    c.bench_function("iou_pair_with_grad", |bch| {
        bch.iter(|| {
            iou_pair_with_grad(std::hint::black_box(&a), std::hint::black_box(&b), &grid)
        })
    });
    c.bench_function("mog_rasterize_64", |bch| {
        bch.iter(|| std::hint::black_box(&a).rasterize(&grid))
    });
}

fn bench_nearest_neighbors(c: &mut Criterion) {
    use rand::Rng;
    let mut r = rng_from_seed(3);
    let pts: Vec<Vector3<f64>> = (0..50_000)
        .map(|_| {
            Vector3::new(
                r.gen_range(-5.0..5.0),
                r.gen_range(-5.0..5.0),
                r.gen_range(-5.0..5.0),
            )
        })
        .collect();
    let queries: Vec<Vector3<f64>> = (0..1000)
        .map(|_| {
            Vector3::new(
                r.gen_range(-5.0..5.0),
                r.gen_range(-5.0..5.0),
                r.gen_range(-5.0..5.0),
            )
        })
        .collect();
    let grid = PointGrid::build(&pts);
    c.bench_function("grid_nn_1k_queries_50k_points", |b| {
        b.iter(|| {
            queries
                .iter()
                .map(|q| grid.nearest_l1(std::hint::black_box(q)))
                .sum::<f64>()
        })
    });
    let small_a: Vec<Vector3<f64>> = pts[..2000].to_vec();
    let small_b: Vec<Vector3<f64>> = pts[2000..4000].to_vec();
    c.bench_function("chamfer_2k_vs_2k", |b| {
        b.iter(|| chamfer(std::hint::black_box(&small_a), std::hint::black_box(&small_b)))
    });
}

fn bench_blur(c: &mut Criterion) {
    use rand::Rng;
    let mut r = rng_from_seed(4);
    let mut img = Image::new(128, 128);
    for v in img.data.iter_mut() {
        *v = r.gen();
    }
    c.bench_function("gaussian_blur_128_sigma_2.56", |b| {
        b.iter(|| gaussian_blur(std::hint::black_box(&img), 2.56))
    });
}

criterion_group!(
    benches,
    bench_render_ray,
    bench_iou,
    bench_nearest_neighbors,
    bench_blur
);
criterion_main!(benches);
