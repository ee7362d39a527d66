//! End-to-end experiment protocols: generate a scene, degrade its training
//! labels, fit a field and score the result against the clean labels.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, write_json, Dataset, LabelMap, Split, SupervisionMask, VOID};
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::fusion::{fuse_to_frame, simulate_cnn, CnnSimSpec, DepthSource, FusionMethod, ProbabilityMap, DEPTH_TOLERANCE};
use crate::geometry::{Camera, RayBounds, Vec3};
use crate::labelops::{
    corrupt_pixels, corrupt_regions, depth_metrics, downscale_labels, partial_labels, psnr, reports_to_csv,
    segmentation_metrics, DownscaleMode, MetricsReport, PartialBudget, RegionCriterion,
};
use crate::render::{render_image, FieldQuery, ImageRender, RenderConfig};
use crate::rng;
use crate::synthgen::{generate_scene, make_trajectory, render_sequence, Aabb, SceneModel, SceneSpec, TrajectorySpec};
use crate::train::{train, TrainConfig, TrainOutcome, TrainingData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
}

impl CameraSpec {
    pub fn camera(&self) -> Result<Camera> {
        Camera::from_hfov(self.width, self.height, self.hfov_deg).map_err(|e| Error::config(e.to_string()))
    }
}

/// Every `stride`-th frame trains; `num_test` of the in-between midpoints,
/// evenly spread, are held out for testing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub stride: usize,
    pub num_test: usize,
}

impl SplitSpec {
    pub fn split(&self, num_frames: usize) -> Result<Split> {
        let mut s = dataset::split(num_frames, self.stride)?;
        let n = s.test.len();
        if self.num_test < n {
            s.test = (0..self.num_test).map(|j| s.test[(2 * j + 1) * n / (2 * self.num_test)]).collect();
        }
        Ok(s)
    }
}

/// How the training labels are degraded. Exactly one per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    /// Clean labels on every training frame.
    None,
    /// Labels on `ceil((1 - ratio) N)` evenly spaced key-frames only.
    Sparsity { ratio: f64 },
    /// Labels on the listed training frames only.
    Keyframes { frames: Vec<usize> },
    PixelNoise { ratio: f64 },
    /// Whole-instance flips of `class`; by default the class with the most
    /// instances.
    RegionNoise {
        ratio: f64,
        criterion: RegionCriterion,
        #[serde(default)]
        class: Option<u8>,
    },
    Downscale { factor: u32, mode: DownscaleMode },
    Partial { budget: PartialBudget },
    /// Simulated monocular predictions, also fused by the multi-view baselines.
    /// Without a `region_class` the class with the most instances is used.
    FusionSim { cnn: CnnSimSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub camera: CameraSpec,
    pub split: SplitSpec,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub degradation: Degradation,
    #[serde(default)]
    pub eval: EvalTargets,
    /// Used when no output directory is given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Which poses are rendered and scored after training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTargets {
    pub train_rerender: bool,
    pub test: bool,
}

impl Default for EvalTargets {
    fn default() -> Self {
        EvalTargets { train_rerender: true, test: true }
    }
}

fn room() -> Aabb {
    Aabb { min: Vec3::new(-3.0, 0.0, -3.0), max: Vec3::new(3.0, 2.5, 3.0) }
}

impl ExperimentConfig {
    /// Procedural room with 6 classes plus background and 8 objects, 64x48
    /// images, 40 training and 8 test frames, 32+32 samples, 20 000 steps.
    pub fn desk(seed: u64) -> Self {
        let bounds = RayBounds { near: 0.1, far: 10.0 };
        let mut field = FieldConfig::desk(7);
        field.encoding.position_scale = 1.0 / 3.0;
        let mut train = TrainConfig::desk(RenderConfig::desk(bounds));
        train.learning_rate = 5e-3;
        ExperimentConfig {
            seed,
            scene: SceneSpec {
                num_primitives: 8,
                num_classes: 7,
                bounds: room(),
                shared_class_instances: 3,
                enclosed: true,
                textured_room: true,
                specular: None,
            },
            trajectory: TrajectorySpec {
                num_poses: 80,
                radius: [1.8, 2.4],
                elevation_deg: [15.0, 35.0],
                sweep_deg: 360.0,
                target_jitter: 0.15,
            },
            camera: CameraSpec { width: 64, height: 48, hfov_deg: 90.0 },
            split: SplitSpec { stride: 2, num_test: 8 },
            field,
            train,
            degradation: Degradation::None,
            eval: EvalTargets::default(),
            output_dir: None,
        }
    }

    /// The desk scene shrunk to fit a single CPU core: 32x24 images,
    /// 16+16 samples, 64-ray batches and 6000 steps.
    pub fn quick(seed: u64) -> Self {
        let mut c = Self::desk(seed);
        c.camera = CameraSpec { width: 32, height: 24, hfov_deg: 90.0 };
        c.train.render.n_coarse = 16;
        c.train.render.n_fine = 16;
        c.train.batch_rays = 64;
        c.train.iterations = 6000;
        c
    }

    /// Full-size network, 320x240 images, 64+128 samples, 1024-ray batches,
    /// 200 000 steps at learning rate 5e-4.
    pub fn paper_scale(seed: u64) -> Self {
        let mut c = Self::desk(seed);
        let bounds = c.train.render.bounds;
        c.camera = CameraSpec { width: 320, height: 240, hfov_deg: 90.0 };
        c.field = FieldConfig { encoding: c.field.encoding, ..FieldConfig::paper(7) };
        c.train = TrainConfig::paper(RenderConfig::paper(bounds));
        c
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "desk-scale" => Ok(Self::desk(seed)),
            "quick" => Ok(Self::quick(seed)),
            "paper-scale" => Ok(Self::paper_scale(seed)),
            other => Err(Error::config(format!("unknown preset {other:?} (desk-scale, quick, paper-scale)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.train.validate()?;
        self.camera.camera()?;
        if self.field.num_classes != self.scene.num_classes {
            return Err(Error::config(format!(
                "field has {} classes but the scene {}",
                self.field.num_classes, self.scene.num_classes
            )));
        }
        if self.split.stride == 0 {
            return Err(Error::config("split stride must be at least 1"));
        }
        Ok(())
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }
}

/// A generated scene with its clean dataset and split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scene: SceneModel,
    pub clean: Dataset,
    pub split: Split,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let scene = generate_scene(&cfg.scene, cfg.seed)?;
    let camera = cfg.camera.camera()?;
    let poses = make_trajectory(&cfg.trajectory, scene.focus(), cfg.seed)?;
    let clean = render_sequence(&scene, &camera, &poses, cfg.train.render.bounds)?;
    let split = cfg.split.split(clean.frames.len())?;
    Ok(Prepared { scene, clean, split })
}

/// Training supervision after degradation.
#[derive(Debug, Clone)]
pub struct Degraded {
    /// The clean dataset with training-frame labels replaced.
    pub dataset: Dataset,
    pub mask: SupervisionMask,
    /// Simulated per-frame predictions (fusion protocol only); test frames
    /// hold uniform distributions.
    pub cnn_probs: Option<Vec<ProbabilityMap>>,
}

/// Non-background class with the most distinct instances over `frames`, ties
/// to the lowest id.
pub fn most_instanced_class(ds: &Dataset, frames: &[usize]) -> Option<u8> {
    let mut pairs = std::collections::BTreeSet::new();
    for &f in frames {
        let fr = &ds.frames[f];
        let inst = fr.instances.as_ref()?;
        for (&l, &i) in fr.labels.data.iter().zip(&inst.data) {
            if i != 0 && l != 0 && l != VOID {
                pairs.insert((l, i));
            }
        }
    }
    let mut counts = std::collections::BTreeMap::new();
    for (l, _) in pairs {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(l, _)| l)
}

/// Apply `spec` to the training frames of `clean`.
pub fn degrade(clean: &Dataset, split: &Split, spec: &Degradation, seed: u64) -> Result<Degraded> {
    let mut ds = clean.clone();
    let mut rng = rng::derive(seed, "degrade");
    let c = clean.num_classes();
    let train = &split.train;
    let mut mask = SupervisionMask::from_indices(ds.frames.len(), train)?;
    let mut cnn_probs = None;
    let train_labels = || -> Vec<LabelMap> { train.iter().map(|&f| clean.frames[f].labels.clone()).collect() };
    let replace = |ds: &mut Dataset, maps: Vec<LabelMap>| {
        for (&f, m) in train.iter().zip(maps) {
            ds.frames[f].labels = m;
        }
    };
    match *spec {
        Degradation::None => {}
        Degradation::Sparsity { ratio } => {
            let keep = dataset::select_keyframes(train, ratio)?;
            mask = SupervisionMask::from_indices(ds.frames.len(), &keep)?;
        }
        Degradation::Keyframes { ref frames } => {
            if frames.is_empty() {
                return Err(Error::config("key-frame list is empty"));
            }
            if let Some(f) = frames.iter().find(|f| !train.contains(f)) {
                return Err(Error::config(format!("key-frame {f} is not a training frame")));
            }
            mask = SupervisionMask::from_indices(ds.frames.len(), frames)?;
        }
        Degradation::PixelNoise { ratio } => {
            let maps = train_labels().iter().map(|l| corrupt_pixels(l, ratio, c, &mut rng)).collect::<Result<_>>()?;
            replace(&mut ds, maps);
        }
        Degradation::RegionNoise { ratio, criterion, class } => {
            let class = match class {
                Some(k) => k,
                None => most_instanced_class(clean, train)
                    .ok_or_else(|| Error::config("region noise needs instance maps on every training frame"))?,
            };
            let inst = instance_maps(clean, train)?;
            let maps = corrupt_regions(&train_labels(), &inst, class, c, ratio, criterion, &mut rng)?;
            replace(&mut ds, maps);
        }
        Degradation::Downscale { factor, mode } => {
            let maps = train_labels().iter().map(|l| downscale_labels(l, factor, mode)).collect::<Result<_>>()?;
            replace(&mut ds, maps);
        }
        Degradation::Partial { budget } => {
            let maps = train_labels().iter().map(|l| partial_labels(l, budget, &mut rng)).collect::<Result<_>>()?;
            replace(&mut ds, maps);
        }
        Degradation::FusionSim { cnn } => {
            let spec = CnnSimSpec {
                region_class: cnn.region_class.or_else(|| most_instanced_class(clean, train)),
                ..cnn
            };
            let inst = if spec.region_class.is_some() { Some(instance_maps(clean, train)?) } else { None };
            let (noisy, probs) = simulate_cnn(&train_labels(), inst.as_deref(), c, &spec, &mut rng)?;
            replace(&mut ds, noisy);
            let cam = &clean.camera;
            let uniform = vec![1.0 / c as f32; cam.num_pixels() * c];
            let mut all: Vec<ProbabilityMap> = (0..ds.frames.len())
                .map(|_| ProbabilityMap { width: cam.width, height: cam.height, num_classes: c, data: uniform.clone() })
                .collect();
            for (&f, p) in train.iter().zip(probs) {
                all[f] = p;
            }
            cnn_probs = Some(all);
        }
    }
    Ok(Degraded { dataset: ds, mask, cnn_probs })
}

fn instance_maps(ds: &Dataset, frames: &[usize]) -> Result<Vec<LabelMap>> {
    frames
        .iter()
        .map(|&f| {
            ds.frames[f].instances.clone().ok_or_else(|| Error::config(format!("frame {f} has no instance map")))
        })
        .collect()
}

pub fn train_field(prepared: &Prepared, degraded: &Degraded, cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = TrainingData::new(&degraded.dataset, prepared.split.train.clone(), degraded.mask.clone());
    train(&data, cfg.field, &cfg.train_config(), None)
}

/// Deterministic renders at the given frames with normalized depth.
pub fn render_frames<Q: FieldQuery + ?Sized>(
    field: &Q,
    ds: &Dataset,
    frames: &[usize],
    render: &RenderConfig,
) -> Result<Vec<ImageRender>> {
    let cfg = RenderConfig { normalize_depth: true, ..*render };
    frames.iter().map(|&f| render_image(field, &ds.camera, &ds.frames[f].pose, &cfg)).collect()
}

/// Colour, label and depth scores of renders against the clean frames.
pub fn score_renders(name: &str, renders: &[ImageRender], clean: &Dataset, frames: &[usize]) -> Result<MetricsReport> {
    let gt: Vec<LabelMap> = frames.iter().map(|&f| clean.frames[f].labels.clone()).collect();
    let pred: Vec<LabelMap> = renders.iter().map(|r| r.labels.clone()).collect();
    let mut report = MetricsReport::new(name, segmentation_metrics(&pred, &gt, clean.num_classes())?);
    let mut p = 0.0;
    for (r, &f) in renders.iter().zip(frames) {
        let a: Vec<f64> = r.rgb.data.iter().flat_map(|px| px.map(|v| v.clamp(0.0, 1.0))).collect();
        let b: Vec<f64> = clean.frames[f].rgb.data.iter().flat_map(|px| px.map(|v| v as f64 / 255.0)).collect();
        p += psnr(&a, &b)?;
    }
    report.psnr = Some(p / renders.len().max(1) as f64);
    if frames.iter().all(|&f| clean.frames[f].depth.is_some()) {
        let pred: Vec<f64> = renders.iter().flat_map(|r| r.depth.data.iter().copied()).collect();
        let gt: Vec<f64> =
            frames.iter().flat_map(|&f| clean.frames[f].depth.as_ref().unwrap().data.iter().map(|&v| v as f64)).collect();
        report.depth = Some(depth_metrics(&pred, &gt)?);
    }
    Ok(report)
}

fn label_report(name: &str, pred: &[LabelMap], clean: &Dataset, frames: &[usize]) -> Result<MetricsReport> {
    let gt: Vec<LabelMap> = frames.iter().map(|&f| clean.frames[f].labels.clone()).collect();
    Ok(MetricsReport::new(name, segmentation_metrics(pred, &gt, clean.num_classes())?))
}

/// Rows: `input` (supervising labels on labelled training frames),
/// `train_rerender` (renders at the training poses), `test` (held-out
/// poses, with colour and depth scores), and for the fusion protocol the
/// rows of [`fusion_reports`].
pub fn evaluate<Q: FieldQuery + ?Sized>(
    field: &Q,
    prepared: &Prepared,
    degraded: &Degraded,
    cfg: &ExperimentConfig,
) -> Result<Vec<MetricsReport>> {
    let clean = &prepared.clean;
    let train = &prepared.split.train;
    let labelled: Vec<usize> = train.iter().copied().filter(|&f| degraded.mask.is_labelled(f)).collect();
    let input: Vec<LabelMap> = labelled.iter().map(|&f| degraded.dataset.frames[f].labels.clone()).collect();
    let mut rows = vec![label_report("input", &input, clean, &labelled)?];

    let fusion = degraded.cnn_probs.is_some();
    let train_renders = if cfg.eval.train_rerender || fusion {
        render_frames(field, clean, train, &cfg.train.render)?
    } else {
        Vec::new()
    };
    if cfg.eval.train_rerender {
        let rerender: Vec<LabelMap> = train_renders.iter().map(|r| r.labels.clone()).collect();
        rows.push(label_report("train_rerender", &rerender, clean, train)?);
    }
    if cfg.eval.test {
        let test_renders = render_frames(field, clean, &prepared.split.test, &cfg.train.render)?;
        rows.push(score_renders("test", &test_renders, clean, &prepared.split.test)?);
    }
    if let Some(probs) = &degraded.cnn_probs {
        rows.remove(0);
        rows.splice(0..0, fusion_reports(clean, train, probs, Some(&train_renders))?);
    }
    Ok(rows)
}

/// Fusion comparison on the frames `train`: `monocular` (argmax of `probs`),
/// Bayesian and average fusion with ground-truth depth, and when `renders`
/// (one per frame of `train`) are given, both methods again with rendered
/// depth plus the rendered labels as `nerf_training`.
pub fn fusion_reports(
    clean: &Dataset,
    train: &[usize],
    probs: &[ProbabilityMap],
    renders: Option<&[ImageRender]>,
) -> Result<Vec<MetricsReport>> {
    let mono: Vec<LabelMap> = train.iter().map(|&f| probs[f].labels()).collect();
    let mut rows = vec![label_report("monocular", &mono, clean, train)?];
    let learned: Option<Vec<dataset::DepthMap>> = renders.map(|rs| {
        let mut maps: Vec<dataset::DepthMap> = clean
            .frames
            .iter()
            .map(|_| dataset::DepthMap::filled(clean.camera.width, clean.camera.height, 0.0))
            .collect();
        for (&f, r) in train.iter().zip(rs) {
            maps[f].data = r.depth.data.iter().map(|&d| d as f32).collect();
        }
        maps
    });
    let mut sources = vec![(DepthSource::GroundTruth, "gt_depth")];
    if let Some(l) = &learned {
        sources.push((DepthSource::Learned(l), "learned_depth"));
    }
    for (method, mname) in [(FusionMethod::Bayesian, "bayesian"), (FusionMethod::Average, "average")] {
        for &(src, sname) in &sources {
            let fused: Vec<LabelMap> = train
                .iter()
                .map(|&t| Ok(fuse_to_frame(clean, probs, src, t, method, train, DEPTH_TOLERANCE)?.0))
                .collect::<Result<_>>()?;
            rows.push(label_report(&format!("{mname}_{sname}"), &fused, clean, train)?);
        }
    }
    if let Some(rs) = renders {
        let labels: Vec<LabelMap> = rs.iter().map(|r| r.labels.clone()).collect();
        rows.push(label_report("nerf_training", &labels, clean, train)?);
    }
    Ok(rows)
}

/// Everything produced by one experiment.
pub struct RunOutcome {
    pub prepared: Prepared,
    pub degraded: Degraded,
    pub trained: TrainOutcome,
    pub reports: Vec<MetricsReport>,
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let prepared = prepare(cfg)?;
    let degraded = degrade(&prepared.clean, &prepared.split, &cfg.degradation, cfg.seed)?;
    let trained = train_field(&prepared, &degraded, cfg)?;
    let reports = evaluate(&trained.params, &prepared, &degraded, cfg)?;
    Ok(RunOutcome { prepared, degraded, trained, reports })
}

/// `metrics.csv` and `metrics.json` in `dir`.
pub fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("metrics.csv");
    std::fs::write(&csv, reports_to_csv(reports)).map_err(|e| Error::io(&csv, e))?;
    write_json(&dir.join("metrics.json"), reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::quick(seed);
        c.camera = CameraSpec { width: 12, height: 9, hfov_deg: 90.0 };
        c.trajectory.num_poses = 12;
        c.split = SplitSpec { stride: 2, num_test: 2 };
        c.field.trunk_width = 16;
        c.field.head_width = 8;
        c.field.trunk_depth = 2;
        c.field.skip_layer = Some(1);
        c.field.encoding.pos_freqs = 3;
        c.train.iterations = 5;
        c.train.batch_rays = 32;
        c.train.render.n_coarse = 4;
        c.train.render.n_fine = 4;
        c
    }

    #[test]
    fn split_spec_thins_the_test_set_evenly() {
        let s = SplitSpec { stride: 2, num_test: 3 }.split(20).unwrap();
        assert_eq!(s.train, (0..20).step_by(2).collect::<Vec<_>>());
        assert_eq!(s.test.len(), 3);
        assert!(s.test.windows(2).all(|w| w[0] < w[1]));
        assert!(s.test.iter().all(|t| t % 2 == 1));
    }

    #[test]
    fn presets_validate() {
        for name in ["desk-scale", "quick", "paper-scale"] {
            ExperimentConfig::preset(name, 3).unwrap().validate().unwrap();
        }
        assert!(ExperimentConfig::preset("huge", 0).is_err());
    }

    #[test]
    fn degradations_touch_only_training_labels() {
        let cfg = tiny(1);
        let p = prepare(&cfg).unwrap();
        let specs = [
            Degradation::Sparsity { ratio: 0.5 },
            Degradation::Keyframes { frames: vec![p.split.train[0], p.split.train[2]] },
            Degradation::PixelNoise { ratio: 0.5 },
            Degradation::RegionNoise { ratio: 0.5, criterion: RegionCriterion::Sort, class: None },
            Degradation::Downscale { factor: 2, mode: DownscaleMode::SparseVoid },
            Degradation::Partial { budget: PartialBudget::SingleClick },
            Degradation::FusionSim { cnn: CnnSimSpec::default() },
        ];
        for spec in specs {
            let d = degrade(&p.clean, &p.split, &spec, 1).unwrap();
            for &t in &p.split.test {
                assert_eq!(d.dataset.frames[t].labels, p.clean.frames[t].labels);
                assert!(!d.mask.is_labelled(t));
            }
            let again = degrade(&p.clean, &p.split, &spec, 1).unwrap();
            assert_eq!(d.dataset, again.dataset);
        }
    }

    #[test]
    fn keyframe_list_sets_the_mask() {
        let p = prepare(&tiny(1)).unwrap();
        let frames = vec![p.split.train[1], p.split.train[3]];
        let d = degrade(&p.clean, &p.split, &Degradation::Keyframes { frames: frames.clone() }, 1).unwrap();
        assert_eq!(d.mask.indices(), frames);
        let bad = Degradation::Keyframes { frames: vec![p.split.test[0]] };
        assert!(matches!(degrade(&p.clean, &p.split, &bad, 1), Err(Error::Config(_))));
        assert!(degrade(&p.clean, &p.split, &Degradation::Keyframes { frames: vec![] }, 1).is_err());
    }

    #[test]
    fn shared_class_has_the_most_instances() {
        let cfg = tiny(2);
        let p = prepare(&cfg).unwrap();
        assert_eq!(most_instanced_class(&p.clean, &p.split.train), Some(2));
    }

    #[test]
    fn fusion_run_reports_every_row() {
        let mut cfg = tiny(3);
        cfg.degradation = Degradation::FusionSim { cnn: CnnSimSpec::default() };
        let out = run(&cfg).unwrap();
        let names: Vec<&str> = out.reports.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "monocular",
                "bayesian_gt_depth",
                "bayesian_learned_depth",
                "average_gt_depth",
                "average_learned_depth",
                "nerf_training",
                "train_rerender",
                "test"
            ]
        );
        assert_eq!(out.trained.trace.len(), 5);
    }
}
