//! Label degradation (pixel noise, region noise, down-scaling, partial
//! annotation) and evaluation metrics for labels, colour and depth.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelMap, VOID};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Reassign exactly `round(ratio * pixels)` pixels, each to a value drawn
/// uniformly from `{0..C-1, void}` minus its current value.
pub fn corrupt_pixels(labels: &LabelMap, noise_ratio: f64, num_classes: usize, rng: &mut Rng) -> Result<LabelMap> {
    if !(0.0..=1.0).contains(&noise_ratio) {
        return Err(Error::domain(format!("noise ratio {noise_ratio} outside [0, 1]")));
    }
    if num_classes < 1 || num_classes >= VOID as usize {
        return Err(Error::domain(format!("num_classes {num_classes} outside 1..255")));
    }
    let n = labels.len();
    let count = (noise_ratio * n as f64).round() as usize;
    let mut out = labels.clone();
    let mut picks = sample(rng, n, count).into_vec();
    picks.sort_unstable();
    for i in picks {
        out.data[i] = random_other_label(labels.data[i], num_classes, rng);
    }
    Ok(out)
}

/// Uniform over the `C` values of `{0..C-1, void}` that differ from `orig`
/// (out-of-range originals are treated like void).
fn random_other_label(orig: u8, num_classes: usize, rng: &mut Rng) -> u8 {
    let k = rng.random_range(0..num_classes);
    if (orig as usize) >= num_classes {
        return k as u8;
    }
    // Candidates: every class except orig, then void.
    match if k < orig as usize { k } else { k + 1 } {
        c if c == num_classes => VOID,
        c => c as u8,
    }
}

/// How frames are chosen among those where an instance is visible, after
/// ranking them by the instance's occupied area (ascending).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionCriterion {
    /// The frames with the smallest area.
    Sort,
    /// Evenly spaced through the ranking.
    Even,
}

/// Frames chosen for corruption of one instance, in the order ranked.
pub fn select_region_frames(areas: &[(usize, usize)], ratio: f64, criterion: RegionCriterion) -> Vec<usize> {
    let mut ranked: Vec<(usize, usize)> = areas.iter().copied().filter(|&(_, a)| a > 0).collect();
    ranked.sort_by_key(|&(f, a)| (a, f));
    let n = ranked.len();
    let k = ((ratio * n as f64).round() as usize).min(n);
    match criterion {
        RegionCriterion::Sort => ranked[..k].iter().map(|&(f, _)| f).collect(),
        RegionCriterion::Even => (0..k).map(|j| ranked[j * n / k].0).collect(),
    }
}

/// Flip whole instances of `target_class`: for each instance, a fraction
/// `ratio` of the frames where it is visible (chosen by `criterion`) get all
/// of its pixels set to one random other class.
pub fn corrupt_regions(
    labels: &[LabelMap],
    instances: &[LabelMap],
    target_class: u8,
    num_classes: usize,
    ratio: f64,
    criterion: RegionCriterion,
    rng: &mut Rng,
) -> Result<Vec<LabelMap>> {
    if labels.len() != instances.len() {
        return Err(Error::domain("one instance map per label map is required"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::domain(format!("frame ratio {ratio} outside [0, 1]")));
    }
    if (target_class as usize) >= num_classes || num_classes < 2 {
        return Err(Error::domain(format!("target class {target_class} needs another class to flip to")));
    }
    if labels.iter().zip(instances).any(|(l, i)| !l.same_size(i)) {
        return Err(Error::domain("label and instance maps differ in size"));
    }
    let mut ids: Vec<u8> = Vec::new();
    for (l, inst) in labels.iter().zip(instances) {
        for (&c, &i) in l.data.iter().zip(&inst.data) {
            if c == target_class && i != 0 && !ids.contains(&i) {
                ids.push(i);
            }
        }
    }
    ids.sort_unstable();
    if ids.len() < 2 {
        return Err(Error::domain(format!(
            "class {target_class} has {} instance(s); region noise needs at least 2",
            ids.len()
        )));
    }
    let mut out = labels.to_vec();
    for id in ids {
        let areas: Vec<(usize, usize)> = instances
            .iter()
            .enumerate()
            .map(|(f, m)| (f, m.data.iter().filter(|&&v| v == id).count()))
            .collect();
        let mut frames = select_region_frames(&areas, ratio, criterion);
        frames.sort_unstable();
        for f in frames {
            let k = rng.random_range(0..num_classes - 1) as u8;
            let new = if k < target_class { k } else { k + 1 };
            for (l, &i) in out[f].data.iter_mut().zip(&instances[f].data) {
                if i == id {
                    *l = new;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownscaleMode {
    /// Nearest-neighbour down-sampling by `S`, then nearest up-sampling.
    DenseInterp,
    /// Keep pixels on the `S`-grid, void everywhere else.
    SparseVoid,
}

pub fn downscale_labels(labels: &LabelMap, factor: u32, mode: DownscaleMode) -> Result<LabelMap> {
    if factor == 0 {
        return Err(Error::domain("scale factor must be at least 1"));
    }
    let s = factor;
    let mut out = labels.clone();
    for row in 0..labels.height {
        for col in 0..labels.width {
            let i = labels.index(col, row);
            out.data[i] = match mode {
                DownscaleMode::DenseInterp => *labels.get(col / s * s, row / s * s),
                DownscaleMode::SparseVoid if row % s == 0 && col % s == 0 => labels.data[i],
                DownscaleMode::SparseVoid => VOID,
            };
        }
    }
    Ok(out)
}

/// Annotation budget per class and frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialBudget {
    SingleClick,
    /// Fraction of the class's pixels in the frame.
    Fraction(f64),
}

/// Keep one connected patch per class and frame, void elsewhere. The patch
/// grows by breadth-first search (4-neighbourhood) from a random seed pixel
/// of the class; if the seed's component runs out before the budget is met,
/// growth restarts from another random unlabelled pixel of the class.
pub fn partial_labels(labels: &LabelMap, budget: PartialBudget, rng: &mut Rng) -> Result<LabelMap> {
    if let PartialBudget::Fraction(f) = budget {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::domain(format!("budget fraction {f} outside (0, 1]")));
        }
    }
    let (w, h) = (labels.width as usize, labels.height as usize);
    let mut out = LabelMap::filled(labels.width, labels.height, VOID);
    let mut present: Vec<u8> = labels.data.iter().copied().filter(|&l| l != VOID).collect();
    present.sort_unstable();
    present.dedup();
    let mut taken = vec![false; labels.len()];
    for class in present {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels.data[i] == class).collect();
        let want = match budget {
            PartialBudget::SingleClick => 1,
            PartialBudget::Fraction(f) => ((f * members.len() as f64).round() as usize).clamp(1, members.len()),
        };
        let mut got = 0;
        let mut queue = VecDeque::new();
        while got < want {
            if queue.is_empty() {
                let free: Vec<usize> = members.iter().copied().filter(|&i| !taken[i]).collect();
                let seed = free[rng.random_range(0..free.len())];
                taken[seed] = true;
                queue.push_back(seed);
            }
            let i = queue.pop_front().unwrap();
            out.data[i] = class;
            got += 1;
            let (x, y) = (i % w, i / w);
            let mut push = |j: usize| {
                if !taken[j] && labels.data[j] == class {
                    taken[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
    }
    Ok(out)
}

/// Ground-truth rows by predicted columns. Pixels with void ground truth are
/// skipped; void predictions are counted in `missed` for their row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
    pub missed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes], missed: vec![0; num_classes] }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if !pred.same_size(gt) {
            return Err(Error::domain("prediction and ground truth differ in size"));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == VOID {
                continue;
            }
            let g = g as usize;
            if g >= c {
                return Err(Error::domain(format!("ground-truth label {g} outside {c} classes")));
            }
            if (p as usize) < c {
                self.counts[g * c + p as usize] += 1;
            } else {
                self.missed[g] += 1;
            }
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.missed.iter().sum::<u64>()
    }

    pub fn metrics(&self) -> SegMetrics {
        let c = self.num_classes;
        let total = self.total();
        let trace: u64 = (0..c).map(|i| self.get(i, i)).sum();
        let row = |i: usize| (0..c).map(|j| self.get(i, j)).sum::<u64>() + self.missed[i];
        let col = |j: usize| (0..c).map(|i| self.get(i, j)).sum::<u64>();
        let (mut recall_sum, mut recall_n, mut iou_sum, mut iou_n) = (0.0, 0, 0.0, 0);
        for k in 0..c {
            let (r, p, tp) = (row(k), col(k), self.get(k, k));
            if r > 0 {
                recall_sum += tp as f64 / r as f64;
                recall_n += 1;
            }
            if r + p > 0 {
                iou_sum += tp as f64 / (r + p - tp) as f64;
                iou_n += 1;
            }
        }
        let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        SegMetrics {
            miou: ratio(iou_sum, iou_n),
            avg_acc: ratio(recall_sum, recall_n),
            total_acc: ratio(trace as f64, total as usize),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    /// Mean per-class recall over classes present in the ground truth.
    pub avg_acc: f64,
    pub total_acc: f64,
}

/// Metrics accumulated over every pair of maps.
pub fn segmentation_metrics(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::domain("prediction and ground-truth lists differ in length"));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in pred.iter().zip(gt) {
        cm.add(p, g)?;
    }
    Ok(cm.metrics())
}

/// Reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio of values in `[0, 1]`.
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::domain("psnr needs two non-empty inputs of equal length"));
    }
    let mse = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub abs_diff: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Standard depth errors over pixels whose ground truth is positive and
/// finite. `delta_i` is the fraction with `max(d/g, g/d) < 1.25^i`.
pub fn depth_metrics(pred: &[f64], gt: &[f64]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::domain("depth maps differ in size"));
    }
    let mut m = DepthMetrics::default();
    let mut sq = 0.0;
    let mut n = 0usize;
    for (&d, &g) in pred.iter().zip(gt) {
        if !(g > 0.0 && g.is_finite()) {
            continue;
        }
        n += 1;
        let e = (d - g).abs();
        m.abs_rel += e / g;
        m.abs_diff += e;
        m.sq_rel += e * e / g;
        sq += e * e;
        let r = (d / g).max(g / d);
        m.delta1 += (r < 1.25) as u8 as f64;
        m.delta2 += (r < 1.25f64.powi(2)) as u8 as f64;
        m.delta3 += (r < 1.25f64.powi(3)) as u8 as f64;
    }
    if n == 0 {
        return Err(Error::domain("no valid ground-truth depth pixels"));
    }
    let k = n as f64;
    Ok(DepthMetrics {
        abs_rel: m.abs_rel / k,
        abs_diff: m.abs_diff / k,
        sq_rel: m.sq_rel / k,
        rmse: (sq / k).sqrt(),
        delta1: m.delta1 / k,
        delta2: m.delta2 / k,
        delta3: m.delta3 / k,
    })
}

/// One evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub miou: f64,
    pub avg_acc: f64,
    pub total_acc: f64,
    pub psnr: Option<f64>,
    pub depth: Option<DepthMetrics>,
}

impl MetricsReport {
    pub fn new(name: impl Into<String>, seg: SegMetrics) -> Self {
        MetricsReport {
            name: name.into(),
            miou: seg.miou,
            avg_acc: seg.avg_acc,
            total_acc: seg.total_acc,
            psnr: None,
            depth: None,
        }
    }

    pub const CSV_HEADER: &'static str =
        "name,miou,avg_acc,total_acc,psnr,abs_rel,abs_diff,sq_rel,rmse,delta1,delta2,delta3";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let d = self.depth;
        format!(
            "{},{:.6},{:.6},{:.6},{},{},{},{},{},{},{},{}",
            self.name,
            self.miou,
            self.avg_acc,
            self.total_acc,
            opt(self.psnr),
            opt(d.map(|d| d.abs_rel)),
            opt(d.map(|d| d.abs_diff)),
            opt(d.map(|d| d.sq_rel)),
            opt(d.map(|d| d.rmse)),
            opt(d.map(|d| d.delta1)),
            opt(d.map(|d| d.delta2)),
            opt(d.map(|d| d.delta3)),
        )
    }
}

pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from(MetricsReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
