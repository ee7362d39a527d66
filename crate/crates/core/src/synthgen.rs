//! Procedural ground-truth scenes and an analytic ray-cast oracle.
//!
//! A scene is a list of spheres, axis-aligned boxes and planes, each carrying
//! a class id and a unique instance id. Rendering is flat Lambertian plus
//! ambient with no shadows, so the radiance is view-consistent unless the
//! optional specular lobe is switched on.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Frame, Image};
use crate::error::{Error, Result};
use crate::geometry::{ray_for_pixel, Camera, Pixel, Pose, Ray, RayBounds, Vec3};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(0..3).all(|i| min[i] < max[i]) {
            return Err(Error::config("bounds need min < max on every axis"));
        }
        Ok(Aabb { min, max })
    }

    pub fn centre(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min, 1e-9) && self.contains(&other.max, 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { centre: Vec3, radius: f64 },
    Box { min: Vec3, max: Vec3 },
    /// Infinite plane through `point`; `normal` is unit length.
    Plane { point: Vec3, normal: Vec3 },
}

/// Nearest intersection parameter and the geometric normal there.
struct Hit {
    t: f64,
    normal: Vec3,
}

impl Shape {
    fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let (o, d) = (ray.origin, ray.direction);
        let in_range = |t: f64| t >= ray.t_near && t <= ray.t_far;
        match *self {
            Shape::Sphere { centre, radius } => {
                let oc = o - centre;
                let b = d.dot(&oc);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = [-b - s, -b + s].into_iter().find(|&t| in_range(t))?;
                Some(Hit { t, normal: (ray.at(t) - centre) / radius })
            }
            Shape::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut axis0, mut axis1) = (0, 0);
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis0 = a;
                    }
                    if tb < t1 {
                        t1 = tb;
                        axis1 = a;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if in_range(t0) {
                    (t0, axis0)
                } else if in_range(t1) {
                    (t1, axis1)
                } else {
                    return None;
                };
                let mut normal = Vec3::zeros();
                normal[axis] = if d[axis] > 0.0 { -1.0 } else { 1.0 };
                if t == t1 && !in_range(t0) {
                    normal = -normal;
                }
                Some(Hit { t, normal })
            }
            Shape::Plane { point, normal } => {
                let denom = d.dot(&normal);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (point - o).dot(&normal) / denom;
                in_range(t).then_some(Hit { t, normal })
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { centre, radius } => ((p - centre).norm() - radius).abs(),
            Shape::Box { min, max } => {
                let c = (min + max) / 2.0;
                let h = (max - min) / 2.0;
                let q = (p - c).abs() - h;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
            Shape::Plane { point, normal } => (p - point).dot(&normal).abs(),
        }
    }

    pub fn bounding_box(&self) -> Option<Aabb> {
        match *self {
            Shape::Sphere { centre, radius } => {
                let r = Vec3::repeat(radius);
                Some(Aabb { min: centre - r, max: centre + r })
            }
            Shape::Box { min, max } => Some(Aabb { min, max }),
            Shape::Plane { .. } => None,
        }
    }
}

/// Procedural albedo modulation: alternating cells darkened by `contrast`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checker {
    pub cell: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub class_id: u8,
    pub instance_id: u8,
    pub albedo: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checker: Option<Checker>,
}

impl Primitive {
    fn albedo_at(&self, p: &Vec3) -> Vec3 {
        let base = Vec3::from(self.albedo);
        match self.checker {
            Some(ch) => {
                let cell = (p / ch.cell).map(|v| v.floor() as i64);
                if (cell.x + cell.y + cell.z).rem_euclid(2) == 1 {
                    base * (1.0 - ch.contrast)
                } else {
                    base
                }
            }
            None => base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub class_id: u8,
    pub albedo: [f64; 3],
}

/// Directional light; `direction` points from the surface towards the light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub direction: Vec3,
    pub ambient: f64,
}

/// Phong-style highlight that makes radiance depend on viewing direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Specular {
    pub strength: f64,
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub primitives: Vec<Primitive>,
    pub background: Background,
    pub light: Light,
    pub bounds: Aabb,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specular: Option<Specular>,
}

/// Ground truth for one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtSample {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub class_id: u8,
    /// 0 marks a miss; primitives carry ids from 1.
    pub instance_id: u8,
    /// Index into `SceneModel::primitives`, `None` on a miss.
    pub primitive: Option<usize>,
}

impl SceneModel {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Centre of the bounding box of all bounded primitives (the objects),
    /// falling back to the world-bounds centre.
    pub fn focus(&self) -> Vec3 {
        let boxes: Vec<Aabb> = self.primitives.iter().filter_map(|p| p.shape.bounding_box()).collect();
        if boxes.is_empty() {
            return self.bounds.centre();
        }
        let mut lo = boxes[0].min;
        let mut hi = boxes[0].max;
        for b in &boxes[1..] {
            lo = lo.inf(&b.min);
            hi = hi.sup(&b.max);
        }
        (lo + hi) / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        let mut seen = std::collections::HashSet::new();
        for p in &self.primitives {
            if p.class_id as usize >= c {
                return Err(Error::config(format!("primitive class {} >= num_classes {c}", p.class_id)));
            }
            if p.instance_id == 0 || !seen.insert(p.instance_id) {
                return Err(Error::config(format!("instance id {} is zero or repeated", p.instance_id)));
            }
            let inside = match p.shape.bounding_box() {
                Some(b) => self.bounds.contains_box(&b),
                None => match p.shape {
                    Shape::Plane { point, .. } => self.bounds.contains(&point, 1e-9),
                    _ => unreachable!(),
                },
            };
            if !inside {
                return Err(Error::config(format!("primitive {} leaves the world bounds", p.instance_id)));
            }
        }
        if self.background.class_id as usize >= c {
            return Err(Error::config("background class out of range"));
        }
        Ok(())
    }
}

/// Nearest-hit oracle: Lambertian plus ambient shading, background on a miss.
pub fn raycast_gt(scene: &SceneModel, ray: &Ray) -> GtSample {
    let mut best: Option<(usize, Hit)> = None;
    for (i, p) in scene.primitives.iter().enumerate() {
        if let Some(hit) = p.shape.intersect(ray) {
            if best.as_ref().is_none_or(|(_, b)| hit.t < b.t) {
                best = Some((i, hit));
            }
        }
    }
    let Some((idx, hit)) = best else {
        return GtSample {
            rgb: scene.background.albedo,
            depth: ray.t_far,
            class_id: scene.background.class_id,
            instance_id: 0,
            primitive: None,
        };
    };
    let prim = &scene.primitives[idx];
    let point = ray.at(hit.t);
    let mut n = hit.normal;
    if n.dot(&ray.direction) > 0.0 {
        n = -n;
    }
    let light = &scene.light;
    let lambert = n.dot(&light.direction).max(0.0);
    let mut rgb = prim.albedo_at(&point) * (light.ambient + (1.0 - light.ambient) * lambert);
    if let Some(spec) = scene.specular {
        let reflected = light.direction - n * 2.0 * n.dot(&light.direction);
        let highlight = reflected.dot(&ray.direction).max(0.0).powf(spec.exponent) * spec.strength;
        rgb += Vec3::repeat(highlight);
    }
    let rgb = rgb.map(|v| v.clamp(0.0, 1.0));
    GtSample {
        rgb: [rgb.x, rgb.y, rgb.z],
        depth: hit.t,
        class_id: prim.class_id,
        instance_id: prim.instance_id,
        primitive: Some(idx),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_primitives: usize,
    pub num_classes: usize,
    pub bounds: Aabb,
    /// Objects forced into one shared class (the "chairs"). Zero picks 2 when
    /// there are at least 4 objects.
    #[serde(default)]
    pub shared_class_instances: usize,
    /// Surround the objects with floor, ceiling and wall planes.
    #[serde(default = "default_true")]
    pub enclosed: bool,
    /// Checker texture on the room planes.
    #[serde(default = "default_true")]
    pub textured_room: bool,
    #[serde(default)]
    pub specular: Option<Specular>,
}

fn default_true() -> bool {
    true
}

/// Procedurally place non-overlapping objects resting on the floor.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SceneModel> {
    let c = spec.num_classes;
    if c < 2 {
        return Err(Error::config("a scene needs at least two classes (background and one object class)"));
    }
    if c > 255 {
        return Err(Error::config("at most 255 classes fit an 8-bit label map"));
    }
    if spec.num_primitives == 0 {
        return Err(Error::config("a scene needs at least one primitive"));
    }
    if spec.num_primitives + 6 > 254 {
        return Err(Error::config("too many primitives for 8-bit instance ids"));
    }
    let b = spec.bounds;
    let mut rng = rng::derive(seed, "scene");

    let mut class_names = vec!["background".to_string()];
    let floor_class = if spec.enclosed && c >= 3 {
        class_names.push("floor".into());
        Some(1u8)
    } else {
        None
    };
    let first_object = class_names.len();
    for k in first_object..c {
        class_names.push(format!("object{}", k - first_object));
    }
    let object_classes: Vec<u8> = (first_object as u8..c as u8).collect();

    let shared = match spec.shared_class_instances {
        0 if spec.num_primitives >= 4 => 2,
        0 => 0,
        k if k > spec.num_primitives => {
            return Err(Error::config(format!(
                "{k} shared-class instances requested but only {} primitives",
                spec.num_primitives
            )))
        }
        k => k,
    };
    // Shared class first, then round-robin over the remaining object classes.
    let chair_class = object_classes[0];
    let others: Vec<u8> = if object_classes.len() > 1 { object_classes[1..].to_vec() } else { vec![chair_class] };
    let classes: Vec<u8> = (0..spec.num_primitives)
        .map(|i| if i < shared { chair_class } else { others[(i - shared) % others.len()] })
        .collect();

    // Objects live in the middle of the room, resting on the floor.
    let floor_y = b.min.y;
    let extent = b.max - b.min;
    let region_half = Vec3::new(extent.x * 0.3, 0.0, extent.z * 0.3);
    let centre = b.centre();
    let max_height = (extent.y * 0.4).max(0.1);
    let mut footprints: Vec<(Vec3, f64)> = Vec::new();
    let mut primitives = Vec::new();
    for (i, &class_id) in classes.iter().enumerate() {
        let mut placed = None;
        for _attempt in 0..500 {
            let is_chair = i < shared;
            let sphere = !is_chair && rng.random_bool(0.4);
            let size = if is_chair {
                // Chair-like: similar, slightly tall boxes.
                Vec3::new(rng.random_range(0.25..0.35), rng.random_range(0.4..0.5), rng.random_range(0.25..0.35))
            } else {
                Vec3::new(rng.random_range(0.3..0.6), rng.random_range(0.25..0.6), rng.random_range(0.3..0.6))
            };
            let size = size.map(|v| v.min(max_height));
            let radius_xz = if sphere { size.x / 2.0 } else { 0.5 * (size.x * size.x + size.z * size.z).sqrt() };
            let pos = Vec3::new(
                centre.x + rng.random_range(-1.0..1.0) * region_half.x,
                floor_y,
                centre.z + rng.random_range(-1.0..1.0) * region_half.z,
            );
            if footprints.iter().any(|(q, r)| {
                let dx = pos.x - q.x;
                let dz = pos.z - q.z;
                (dx * dx + dz * dz).sqrt() < r + radius_xz + 0.1
            }) {
                continue;
            }
            let shape = if sphere {
                let r = size.x / 2.0;
                Shape::Sphere { centre: Vec3::new(pos.x, floor_y + r + 1e-3, pos.z), radius: r }
            } else {
                let half = Vec3::new(size.x / 2.0, 0.0, size.z / 2.0);
                Shape::Box {
                    min: Vec3::new(pos.x - half.x, floor_y, pos.z - half.z),
                    max: Vec3::new(pos.x + half.x, floor_y + size.y, pos.z + half.z),
                }
            };
            if let Some(bb) = shape.bounding_box() {
                if !b.contains_box(&bb) {
                    continue;
                }
            }
            placed = Some((shape, pos, radius_xz));
            break;
        }
        let (shape, pos, r) = placed.ok_or_else(|| {
            Error::config(format!("could not place {} non-overlapping objects in the bounds", spec.num_primitives))
        })?;
        footprints.push((pos, r));
        let albedo = [rng.random_range(0.25..0.95), rng.random_range(0.25..0.95), rng.random_range(0.25..0.95)];
        primitives.push(Primitive { shape, class_id, instance_id: (i + 1) as u8, albedo, checker: None });
    }

    let wall_albedo = [0.75, 0.72, 0.68];
    if spec.enclosed {
        let checker = spec.textured_room.then_some(Checker { cell: 0.5, contrast: 0.3 });
        let planes = [
            (Vec3::new(centre.x, b.min.y, centre.z), Vec3::y(), floor_class.unwrap_or(0), [0.55, 0.45, 0.35]),
            (Vec3::new(centre.x, b.max.y, centre.z), -Vec3::y(), 0, wall_albedo),
            (Vec3::new(b.min.x, centre.y, centre.z), Vec3::x(), 0, [0.70, 0.75, 0.80]),
            (Vec3::new(b.max.x, centre.y, centre.z), -Vec3::x(), 0, [0.80, 0.72, 0.66]),
            (Vec3::new(centre.x, centre.y, b.min.z), Vec3::z(), 0, [0.68, 0.78, 0.70]),
            (Vec3::new(centre.x, centre.y, b.max.z), -Vec3::z(), 0, wall_albedo),
        ];
        for (next_id, (point, normal, class_id, albedo)) in (spec.num_primitives as u8 + 1..).zip(planes) {
            primitives.push(Primitive {
                shape: Shape::Plane { point, normal },
                class_id,
                instance_id: next_id,
                albedo,
                checker,
            });
        }
    }

    let light_dir = Vec3::new(rng.random_range(-0.5..0.5), 1.0, rng.random_range(-0.5..0.5)).normalize();
    let scene = SceneModel {
        primitives,
        background: Background { class_id: 0, albedo: wall_albedo },
        light: Light { direction: light_dir, ambient: 0.35 },
        bounds: b,
        class_names,
        specular: spec.specular,
    };
    scene.validate()?;
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub num_poses: usize,
    /// Orbit radius range around the look-at centre, metres.
    pub radius: [f64; 2],
    /// Camera elevation range above the look-at centre, degrees.
    #[serde(default = "default_elevation")]
    pub elevation_deg: [f64; 2],
    /// Total azimuth swept over the sequence, degrees.
    #[serde(default = "default_sweep")]
    pub sweep_deg: f64,
    /// Maximum offset of the look-at point from the centre, metres.
    #[serde(default = "default_jitter")]
    pub target_jitter: f64,
}

fn default_elevation() -> [f64; 2] {
    [15.0, 35.0]
}

fn default_sweep() -> f64 {
    360.0
}

fn default_jitter() -> f64 {
    0.15
}

/// A smooth orbit around `centre` with slowly varying radius, height and
/// gaze, similar to a hand-held sweep. Roll is locked to world `+y`.
pub fn make_trajectory(spec: &TrajectorySpec, centre: Vec3, seed: u64) -> Result<Vec<Pose>> {
    if spec.num_poses < 2 {
        return Err(Error::config("a trajectory needs at least two poses"));
    }
    let [r_lo, r_hi] = spec.radius;
    let [e_lo, e_hi] = spec.elevation_deg;
    if !(r_lo > 0.0 && r_lo <= r_hi) || !(e_lo <= e_hi && e_lo > -80.0 && e_hi < 80.0) {
        return Err(Error::config("invalid radius or elevation range"));
    }
    let mut rng = rng::derive(seed, "trajectory");
    let phase: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let azimuth0 = rng.random_range(0.0..std::f64::consts::TAU);
    let n = spec.num_poses;
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let s = i as f64 / n as f64;
        let wave = |k: usize, freq: f64| 0.5 + 0.5 * (std::f64::consts::TAU * freq * s + phase[k]).sin();
        let radius = r_lo + (r_hi - r_lo) * wave(0, 2.0);
        let elevation = (e_lo + (e_hi - e_lo) * wave(1, 3.0)).to_radians();
        let azimuth = azimuth0 + spec.sweep_deg.to_radians() * s;
        let eye = centre
            + Vec3::new(azimuth.cos() * elevation.cos(), elevation.sin(), azimuth.sin() * elevation.cos()) * radius;
        let jitter = Vec3::new(wave(2, 5.0) - 0.5, (wave(3, 4.0) - 0.5) * 0.5, wave(4, 7.0) - 0.5)
            * (2.0 * spec.target_jitter);
        poses.push(Pose::look_at(eye, centre + jitter)?);
    }
    Ok(poses)
}

/// One frame per pose: 8-bit colour, class labels, instance ids and ray
/// distance depth from the oracle.
pub fn render_sequence(scene: &SceneModel, camera: &Camera, poses: &[Pose], bounds: RayBounds) -> Result<Dataset> {
    if poses.is_empty() {
        return Err(Error::config("cannot render an empty trajectory"));
    }
    let frames = poses
        .par_iter()
        .map(|pose| render_frame(scene, camera, pose, bounds))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { camera: *camera, class_names: scene.class_names.clone(), frames })
}

pub fn render_frame(scene: &SceneModel, camera: &Camera, pose: &Pose, bounds: RayBounds) -> Result<Frame> {
    let n = camera.num_pixels();
    let (mut rgb, mut labels, mut instances, mut depth) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for row in 0..camera.height {
        for col in 0..camera.width {
            let ray = ray_for_pixel(camera, pose, Pixel::new(col, row), bounds)?;
            let gt = raycast_gt(scene, &ray);
            rgb.push(gt.rgb.map(|v| (v * 255.0).round() as u8));
            labels.push(gt.class_id);
            instances.push(gt.instance_id);
            depth.push(gt.depth as f32);
        }
    }
    let (w, h) = (camera.width, camera.height);
    Ok(Frame {
        rgb: Image::from_vec(w, h, rgb)?,
        labels: Image::from_vec(w, h, labels)?,
        instances: Some(Image::from_vec(w, h, instances)?),
        depth: Some(Image::from_vec(w, h, depth)?),
        pose: *pose,
    })
}
