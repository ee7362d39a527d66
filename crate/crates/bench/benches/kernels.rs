use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use semfield_core::geometry::{ray_for_pixel, Pixel};
use semfield_core::meshing::{marching_cubes, ScalarGrid};
use semfield_core::render::{composite, Sampling};
use semfield_core::synthgen::Aabb;
use semfield_core::train::{loss_and_gradient, SemanticTarget};
use semfield_core::{Camera, FieldConfig, FieldParams, Net, Pose, RayBounds, RenderConfig, Vec3};

fn field_forward(c: &mut Criterion) {
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    let params = FieldParams::<f32>::init(FieldConfig::desk(7), 1).unwrap();
    let mut g = c.benchmark_group("field_forward");
    for n in [256usize, 2048] {
        let pos: Vec<[f32; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let dir: Vec<[f32; 3]> = vec![[0.0, 0.0, 1.0]; n];
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| params.forward_batch(Net::Fine, &pos, &dir))
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let params = FieldParams::<f32>::init(FieldConfig::desk(7), 2).unwrap();
    let bounds = RayBounds::new(0.1, 6.0).unwrap();
    let cam = Camera::from_hfov(32, 24, 90.0).unwrap();
    let pose = Pose::look_at(Vec3::new(0.0, 1.0, -2.0), Vec3::new(0.0, 1.0, 0.0)).unwrap();
    let rays: Vec<_> =
        (0..64u32).map(|i| ray_for_pixel(&cam, &pose, Pixel::new(i % 32, i / 32 * 8), bounds).unwrap()).collect();
    let rgb = vec![[0.5; 3]; rays.len()];
    let targets: Vec<SemanticTarget> = (0..rays.len()).map(|i| SemanticTarget::Class((i % 7) as u8)).collect();
    let mut cfg = RenderConfig::desk(bounds);
    cfg.n_coarse = 16;
    cfg.n_fine = 16;
    let mut g = c.benchmark_group("loss_and_gradient");
    g.throughput(Throughput::Elements(rays.len() as u64));
    g.bench_function("64_rays_16+16", |b| {
        b.iter(|| loss_and_gradient(&params, &rays, &rgb, &targets, &cfg, 0.04, Sampling::Deterministic).unwrap())
    });
    g.finish();
}

fn compositing(c: &mut Criterion) {
    let mut rng = rand::rngs::StdRng::seed_from_u64(3);
    let k = 64;
    let sigma: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5.0)).collect();
    let delta = vec![0.05; k];
    let values: Vec<f64> = (0..3 * k).map(|_| rng.random()).collect();
    c.bench_function("composite_64_samples", |b| b.iter(|| composite(&sigma, &delta, &values, 3).unwrap()));
}

fn meshing(c: &mut Criterion) {
    let bounds = Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
    let mut g = c.benchmark_group("marching_cubes_sphere");
    for n in [32usize, 64] {
        let grid = ScalarGrid::from_fn(bounds, n, |p| 10.0 * (1.0 - p.norm())).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &grid, |b, grid| b.iter(|| marching_cubes(grid, 5.0)));
    }
    g.finish();
}

criterion_group!(benches, field_forward, train_step, compositing, meshing);
criterion_main!(benches);
