//! Multi-view label fusion baselines: per-pixel class distributions from
//! several views are associated through depth and combined by product
//! (Bayesian) or mean (average).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DepthMap, LabelMap, VOID};
use crate::error::{Error, Result};
use crate::geometry::{reproject, Pixel};
use crate::labelops::{corrupt_pixels, corrupt_regions, RegionCriterion};
use crate::linalg::argmax;
use crate::render::{render_image, FieldQuery, ImageRender, RenderConfig};
use crate::rng::Rng;

/// Floor applied to every probability before multiplying.
pub const PROB_FLOOR: f64 = 1e-12;

/// Depth-consistency threshold for associating pixels across views, metres.
pub const DEPTH_TOLERANCE: f64 = 0.05;

const PROB_MAGIC: &[u8; 4] = b"SPRB";

/// Per-pixel class distributions, `num_classes` values per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: u32,
    pub height: u32,
    pub num_classes: usize,
    pub data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(width: u32, height: u32, num_classes: usize, data: Vec<f32>) -> Result<Self> {
        if num_classes == 0 || data.len() != width as usize * height as usize * num_classes {
            return Err(Error::domain("probability buffer does not match its dimensions"));
        }
        for (i, p) in data.chunks_exact(num_classes).enumerate() {
            let s: f64 = p.iter().map(|&v| v as f64).sum();
            if p.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-4 {
                return Err(Error::domain(format!("pixel {i} is not a distribution (sum {s})")));
            }
        }
        Ok(ProbabilityMap { width, height, num_classes, data })
    }

    pub fn pixel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.num_classes..(idx + 1) * self.num_classes]
    }

    /// Argmax per pixel, ties to the lowest class.
    pub fn labels(&self) -> LabelMap {
        LabelMap {
            width: self.width,
            height: self.height,
            data: self.data.chunks_exact(self.num_classes).map(|p| argmax(p) as u8).collect(),
        }
    }

    pub fn from_render(r: &ImageRender) -> Self {
        ProbabilityMap { width: r.labels.width, height: r.labels.height, num_classes: r.num_classes, data: r.probs.clone() }
    }

    /// `SPRB`, then width, height and class count as little-endian u32,
    /// then the f32 values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(PROB_MAGIC);
        for v in [self.width, self.height, self.num_classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, format!("cannot read: {e}")))?;
        if bytes.len() < 16 || &bytes[..4] != PROB_MAGIC {
            return Err(Error::load(path, "not a probability map"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (w, h, c) = (word(0), word(1), word(2) as usize);
        let data: Vec<f32> = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if (bytes.len() - 16) % 4 != 0 {
            return Err(Error::load(path, "truncated probability data"));
        }
        ProbabilityMap::new(w, h, c, data).map_err(|e| Error::load(path, e.to_string()))
    }
}

/// Product of the distributions, renormalized. Computed in the log domain.
pub fn bayesian_fuse(probs: &[&[f64]]) -> Result<Vec<f64>> {
    let c = check_inputs(probs)?;
    let mut log = vec![0.0; c];
    for p in probs {
        for (l, &v) in log.iter_mut().zip(*p) {
            *l += v.max(PROB_FLOOR).ln();
        }
    }
    let m = log.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = log.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    Ok(out)
}

/// Arithmetic mean of the distributions.
pub fn average_fuse(probs: &[&[f64]]) -> Result<Vec<f64>> {
    let c = check_inputs(probs)?;
    let mut out = vec![0.0; c];
    for p in probs {
        out.iter_mut().zip(*p).for_each(|(o, v)| *o += v);
    }
    let n = probs.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

fn check_inputs(probs: &[&[f64]]) -> Result<usize> {
    let c = probs.first().ok_or_else(|| Error::domain("cannot fuse an empty list"))?.len();
    if c == 0 || probs.iter().any(|p| p.len() != c) {
        return Err(Error::domain("distributions to fuse must share a non-zero length"));
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Bayesian,
    Average,
}

impl FusionMethod {
    pub fn fuse(self, probs: &[&[f64]]) -> Result<Vec<f64>> {
        match self {
            FusionMethod::Bayesian => bayesian_fuse(probs),
            FusionMethod::Average => average_fuse(probs),
        }
    }
}

/// Where per-frame depth for association comes from.
#[derive(Debug, Clone, Copy)]
pub enum DepthSource<'a> {
    /// The dataset's depth channel.
    GroundTruth,
    /// One map per dataset frame, e.g. rendered by a trained field.
    Learned(&'a [DepthMap]),
}

impl DepthSource<'_> {
    fn map<'d>(&'d self, dataset: &'d Dataset, frame: usize) -> Result<&'d DepthMap> {
        match self {
            DepthSource::GroundTruth => dataset.frames[frame]
                .depth
                .as_ref()
                .ok_or_else(|| Error::config(format!("frame {frame} has no ground-truth depth for association"))),
            DepthSource::Learned(maps) => maps
                .get(frame)
                .ok_or_else(|| Error::config(format!("no learned depth supplied for frame {frame}"))),
        }
    }
}

/// Fuse the distributions of every window frame that sees each pixel of
/// `target`. A target pixel is lifted to 3D with its own depth and projected
/// into each window frame; the view contributes if its depth at that pixel
/// agrees with the projected distance to within `tolerance`. The target's
/// own distribution is always included.
pub fn fuse_to_frame(
    dataset: &Dataset,
    probs: &[ProbabilityMap],
    depth: DepthSource<'_>,
    target: usize,
    method: FusionMethod,
    window: &[usize],
    tolerance: f64,
) -> Result<(LabelMap, ProbabilityMap)> {
    let n = dataset.frames.len();
    if probs.len() != n {
        return Err(Error::domain(format!("{} probability maps for {n} frames", probs.len())));
    }
    if target >= n || window.iter().any(|&f| f >= n) {
        return Err(Error::domain("fusion frame index outside the dataset"));
    }
    let cam = &dataset.camera;
    let c = probs[target].num_classes;
    let tgt_depth = depth.map(dataset, target)?;
    let others: Vec<(usize, &DepthMap)> = window
        .iter()
        .filter(|&&f| f != target)
        .map(|&f| Ok((f, depth.map(dataset, f)?)))
        .collect::<Result<_>>()?;
    let tgt_pose = &dataset.frames[target].pose;

    let rows: Vec<Vec<f64>> = (0..cam.height)
        .into_par_iter()
        .map(|row| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(cam.width as usize * c);
            for col in 0..cam.width {
                let idx = (row * cam.width + col) as usize;
                let own: Vec<f64> = probs[target].pixel(idx).iter().map(|&v| v as f64).collect();
                let mut views = vec![own];
                let d = tgt_depth.data[idx] as f64;
                if d > 0.0 && d.is_finite() {
                    for &(f, dm) in &others {
                        let pose = &dataset.frames[f].pose;
                        let Some(rp) = reproject(Pixel::new(col, row), d, tgt_pose, pose, cam)? else {
                            continue;
                        };
                        let q = rp.pixel();
                        let qi = (q.row * cam.width + q.col) as usize;
                        if ((dm.data[qi] as f64) - rp.depth).abs() < tolerance {
                            views.push(probs[f].pixel(qi).iter().map(|&v| v as f64).collect());
                        }
                    }
                }
                let refs: Vec<&[f64]> = views.iter().map(Vec::as_slice).collect();
                out.extend(method.fuse(&refs)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let data: Vec<f32> = rows.into_iter().flatten().map(|v| v as f32).collect();
    let fused = ProbabilityMap { width: cam.width, height: cam.height, num_classes: c, data };
    Ok((fused.labels(), fused))
}

/// Corruption recipe standing in for a monocular segmentation network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnnSimSpec {
    /// Class whose instances get region-level errors; `None` skips them.
    pub region_class: Option<u8>,
    pub region_ratio: f64,
    pub criterion: RegionCriterion,
    pub pixel_ratio: f64,
    /// Probability mass spread over the other classes.
    pub eta: f64,
}

impl Default for CnnSimSpec {
    fn default() -> Self {
        CnnSimSpec { region_class: None, region_ratio: 0.3, criterion: RegionCriterion::Even, pixel_ratio: 0.3, eta: 0.1 }
    }
}

/// `1 - eta` on `label`, `eta / (C - 1)` elsewhere; uniform for void.
pub fn soften(label: u8, num_classes: usize, eta: f64) -> Vec<f64> {
    if label == VOID || label as usize >= num_classes || num_classes == 1 {
        return vec![1.0 / num_classes as f64; num_classes];
    }
    let mut p = vec![eta / (num_classes - 1) as f64; num_classes];
    p[label as usize] = 1.0 - eta;
    p
}

/// Imperfect but multi-view-correlated predictions from clean labels:
/// region flips of whole instances, then per-pixel flips, then softening.
/// Returns the hard corrupted labels alongside their distributions.
pub fn simulate_cnn(
    labels: &[LabelMap],
    instances: Option<&[LabelMap]>,
    num_classes: usize,
    spec: &CnnSimSpec,
    rng: &mut Rng,
) -> Result<(Vec<LabelMap>, Vec<ProbabilityMap>)> {
    if !(0.0..1.0).contains(&spec.eta) {
        return Err(Error::config(format!("softening eta {} outside [0, 1)", spec.eta)));
    }
    let mut noisy = labels.to_vec();
    if let Some(class) = spec.region_class {
        let inst = instances.ok_or_else(|| Error::config("region errors need instance maps"))?;
        noisy = corrupt_regions(&noisy, inst, class, num_classes, spec.region_ratio, spec.criterion, rng)?;
    }
    let noisy: Vec<LabelMap> =
        noisy.iter().map(|l| corrupt_pixels(l, spec.pixel_ratio, num_classes, rng)).collect::<Result<_>>()?;
    let probs = noisy
        .iter()
        .map(|l| ProbabilityMap {
            width: l.width,
            height: l.height,
            num_classes,
            data: l.data.iter().flat_map(|&v| soften(v, num_classes, spec.eta)).map(|v| v as f32).collect(),
        })
        .collect();
    Ok((noisy, probs))
}

/// Re-render a trained field at the given frames' poses: the fused labels of
/// the training-as-fusion pathway.
pub fn nerf_fusion_render<Q: FieldQuery + ?Sized>(
    field: &Q,
    dataset: &Dataset,
    frames: &[usize],
    cfg: &RenderConfig,
) -> Result<Vec<ImageRender>> {
    frames
        .iter()
        .map(|&f| {
            let frame = dataset.frames.get(f).ok_or_else(|| Error::domain(format!("frame {f} outside dataset")))?;
            render_image(field, &dataset.camera, &frame.pose, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Frame;
    use crate::geometry::{Camera, Pose, Vec3};
    use crate::rng;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn probability_map_file_round_trip() {
        let p = ProbabilityMap::new(2, 1, 3, vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        p.save(&path).unwrap();
        assert_eq!(ProbabilityMap::load(&path).unwrap(), p);
        std::fs::write(&path, b"SPRB\x01").unwrap();
        assert!(ProbabilityMap::load(&path).is_err());
    }

    #[test]
    fn bayesian_examples() {
        let u = [0.25; 4];
        assert!(close(&bayesian_fuse(&[&u, &u]).unwrap(), &u, 1e-15));
        let p = [0.6, 0.4];
        let f = bayesian_fuse(&[&p, &p]).unwrap();
        assert!(close(&f, &[0.36 / 0.52, 0.16 / 0.52], 1e-15));
        assert!((f[0] - 0.6923).abs() < 5e-5);
        let one = [0.0, 1.0, 0.0];
        let f = bayesian_fuse(&[&[0.5, 0.2, 0.3], &one]).unwrap();
        assert!(close(&f, &one, 1e-11));
    }

    #[test]
    fn average_examples() {
        let p = [0.2, 0.7, 0.1];
        assert!(close(&average_fuse(&[&p, &p, &p]).unwrap(), &p, 1e-15));
        assert_eq!(average_fuse(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        let q = [0.5, 0.1, 0.4];
        assert_eq!(average_fuse(&[&p, &q]).unwrap(), average_fuse(&[&q, &p]).unwrap());
    }

    #[test]
    fn opposed_views_tie_to_the_lowest_class() {
        let (a, b) = ([0.6, 0.4], [0.4, 0.6]);
        for m in [FusionMethod::Bayesian, FusionMethod::Average] {
            let f = m.fuse(&[&a, &b]).unwrap();
            assert!(close(&f, &[0.5, 0.5], 1e-15));
            assert_eq!(argmax(&f), 0);
        }
    }

    #[test]
    fn empty_or_ragged_input_is_rejected() {
        assert!(bayesian_fuse(&[]).is_err());
        assert!(average_fuse(&[&[0.5, 0.5], &[1.0]]).is_err());
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn fused_outputs_are_distributions(ps in proptest::collection::vec(dist(5), 1..6)) {
            let refs: Vec<&[f64]> = ps.iter().map(Vec::as_slice).collect();
            for m in [FusionMethod::Bayesian, FusionMethod::Average] {
                let f = m.fuse(&refs).unwrap();
                prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(f.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn repeated_evidence_sharpens(p in dist(4), n in 1usize..8) {
            let a = vec![p.as_slice(); n];
            let b = vec![p.as_slice(); n + 1];
            let ma = bayesian_fuse(&a).unwrap().into_iter().fold(0.0, f64::max);
            let mb = bayesian_fuse(&b).unwrap().into_iter().fold(0.0, f64::max);
            prop_assert!(mb >= ma - 1e-12);
        }
    }

    /// Three cameras looking at a fronto-parallel wall 2 m away.
    fn wall_dataset(c: usize) -> Dataset {
        let cam = Camera::from_hfov(16, 12, 60.0).unwrap();
        let frames = [-0.2, 0.0, 0.2]
            .iter()
            .map(|&x| {
                let pose = Pose::look_at(Vec3::new(x, 0.0, 0.0), Vec3::new(x, 0.0, -2.0)).unwrap();
                let mut depth = DepthMap::filled(16, 12, 0.0);
                for row in 0..12 {
                    for col in 0..16 {
                        let d = cam.back_project(col as f64 + 0.5, row as f64 + 0.5);
                        let i = depth.index(col, row);
                        depth.data[i] = (2.0 * d.norm()) as f32;
                    }
                }
                Frame {
                    rgb: crate::dataset::RgbImage::filled(16, 12, [0, 0, 0]),
                    labels: LabelMap::filled(16, 12, 1),
                    instances: None,
                    depth: Some(depth),
                    pose,
                }
            })
            .collect();
        Dataset { camera: cam, class_names: (0..c).map(|i| format!("c{i}")).collect(), frames }
    }

    fn constant_probs(ds: &Dataset, p: &[f32]) -> ProbabilityMap {
        let n = ds.camera.num_pixels();
        ProbabilityMap::new(ds.camera.width, ds.camera.height, p.len(), p.repeat(n)).unwrap()
    }

    #[test]
    fn single_view_window_returns_the_monocular_prediction() {
        let ds = wall_dataset(3);
        let probs: Vec<ProbabilityMap> = (0..3).map(|i| constant_probs(&ds, &[0.2, 0.1 * i as f32 + 0.3, 0.5 - 0.1 * i as f32])).collect();
        let (labels, fused) =
            fuse_to_frame(&ds, &probs, DepthSource::GroundTruth, 1, FusionMethod::Bayesian, &[1], DEPTH_TOLERANCE).unwrap();
        assert!(fused.data.iter().zip(&probs[1].data).all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(labels, probs[1].labels());
    }

    #[test]
    fn consensus_survives_both_methods() {
        let ds = wall_dataset(3);
        let probs: Vec<ProbabilityMap> = (0..3).map(|_| constant_probs(&ds, &[0.0, 0.0, 1.0])).collect();
        for m in [FusionMethod::Bayesian, FusionMethod::Average] {
            let (labels, _) = fuse_to_frame(&ds, &probs, DepthSource::GroundTruth, 0, m, &[0, 1, 2], DEPTH_TOLERANCE).unwrap();
            assert!(labels.data.iter().all(|&l| l == 2));
        }
    }

    #[test]
    fn neighbours_vote_where_the_wall_is_shared() {
        let ds = wall_dataset(2);
        let probs = vec![
            constant_probs(&ds, &[0.6, 0.4]),
            constant_probs(&ds, &[0.3, 0.7]),
            constant_probs(&ds, &[0.3, 0.7]),
        ];
        let (labels, _) =
            fuse_to_frame(&ds, &probs, DepthSource::GroundTruth, 0, FusionMethod::Bayesian, &[0, 1, 2], DEPTH_TOLERANCE)
                .unwrap();
        // Central pixels are seen by every camera and flip to class 1.
        assert_eq!(*labels.get(8, 6), 1);
        // A wrong depth map breaks every association.
        let bad: Vec<DepthMap> = ds.frames.iter().map(|f| {
            let mut d = f.depth.clone().unwrap();
            d.data.iter_mut().for_each(|v| *v += 0.5);
            d
        }).collect();
        let mut learned = bad.clone();
        learned[0] = ds.frames[0].depth.clone().unwrap();
        let (labels, _) =
            fuse_to_frame(&ds, &probs, DepthSource::Learned(&learned), 0, FusionMethod::Bayesian, &[0, 1, 2], DEPTH_TOLERANCE)
                .unwrap();
        assert!(labels.data.iter().all(|&l| l == 0));
    }

    #[test]
    fn missing_depth_is_a_config_error() {
        let mut ds = wall_dataset(2);
        ds.frames[2].depth = None;
        let probs: Vec<ProbabilityMap> = (0..3).map(|_| constant_probs(&ds, &[0.5, 0.5])).collect();
        let err = fuse_to_frame(&ds, &probs, DepthSource::GroundTruth, 0, FusionMethod::Average, &[0, 2], 0.05);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn soften_shapes() {
        assert_eq!(soften(1, 3, 0.1), vec![0.05, 0.9, 0.05]);
        assert_eq!(soften(VOID, 4, 0.1), vec![0.25; 4]);
    }

    #[test]
    fn simulated_predictions_are_distributions() {
        let ds = wall_dataset(4);
        let labels: Vec<LabelMap> = ds.frames.iter().map(|f| f.labels.clone()).collect();
        let spec = CnnSimSpec { pixel_ratio: 0.2, ..CnnSimSpec::default() };
        let (noisy, probs) = simulate_cnn(&labels, None, 4, &spec, &mut rng::derive(1, "cnn")).unwrap();
        for (n, p) in noisy.iter().zip(&probs) {
            let changed = n.data.iter().filter(|&&v| v != 1).count();
            assert_eq!(changed, (0.2f64 * 192.0).round() as usize);
            assert!(ProbabilityMap::new(p.width, p.height, 4, p.data.clone()).is_ok());
        }
    }
}
