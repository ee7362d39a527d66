//! Ray sampling and quadrature compositing.
//!
//! Per ray, with samples `t_1 < ... < t_K` and spacings `delta_k`
//! (`delta_K = t_far - t_K`):
//!
//! ```text
//! T_k = exp(-sum_{j<k} sigma_j delta_j)
//! w_k = T_k (1 - exp(-sigma_k delta_k))
//! E[v] = sum_k w_k v_k
//! ```
//!
//! The same weights composite colours and semantic logits. A coarse pass on
//! stratified samples drives inverse-CDF importance sampling for the fine
//! pass. Sample positions are treated as constants when differentiating.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Image, LabelMap};
use crate::error::{Error, Result};
use crate::field::{FieldParams, Net, NetTape};
use crate::geometry::{ray_for_pixel, Camera, Pixel, Pose, Ray, RayBounds};
use crate::linalg::{argmax, entropy, softmax, Real};
use crate::rng::Rng;

/// Added to every coarse weight before building the importance CDF.
pub const WEIGHT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub bounds: RayBounds,
    /// Divide the expected depth by the accumulated weight.
    #[serde(default)]
    pub normalize_depth: bool,
}

impl RenderConfig {
    pub fn desk(bounds: RayBounds) -> Self {
        RenderConfig { n_coarse: 32, n_fine: 32, bounds, normalize_depth: false }
    }

    pub fn paper(bounds: RayBounds) -> Self {
        RenderConfig { n_coarse: 64, n_fine: 128, bounds, normalize_depth: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 {
            return Err(Error::config("need at least one coarse sample"));
        }
        self.bounds.validate().map_err(|e| Error::config(e.to_string()))
    }
}

/// Sorted quadrature points along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub t: Vec<f64>,
    pub bounds: RayBounds,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `t_{k+1} - t_k`, with the last interval running to the far bound.
    pub fn deltas(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.t.windows(2).map(|w| w[1] - w[0]).collect();
        if let Some(&last) = self.t.last() {
            d.push(self.bounds.far - last);
        }
        d
    }
}

/// One sample per equal-width bin of the ray bounds: the bin midpoint when
/// `rng` is `None`, a uniform draw inside the bin otherwise.
pub fn stratified_samples(bounds: RayBounds, k: usize, rng: Option<&mut Rng>) -> SampleSet {
    let width = (bounds.far - bounds.near) / k as f64;
    let t = match rng {
        None => (0..k).map(|i| bounds.near + (i as f64 + 0.5) * width).collect(),
        Some(rng) => (0..k).map(|i| bounds.near + (i as f64 + rng.random::<f64>()) * width).collect(),
    };
    SampleSet { t, bounds }
}

/// Draw `m` extra samples by inverting the piecewise-constant CDF of
/// `coarse_weights + WEIGHT_EPS` over the coarse set's equal-width bins, then
/// merge them with the coarse samples. Without `rng` the CDF is inverted at
/// the stratified midpoints `(j + 0.5) / m`.
pub fn importance_samples(coarse: &SampleSet, coarse_weights: &[f64], m: usize, rng: Option<&mut Rng>) -> SampleSet {
    let k = coarse.len();
    assert_eq!(coarse_weights.len(), k, "one weight per coarse sample");
    let bounds = coarse.bounds;
    let width = (bounds.far - bounds.near) / k as f64;
    let pdf: Vec<f64> = coarse_weights.iter().map(|w| w.max(0.0) + WEIGHT_EPS).collect();
    let total: f64 = pdf.iter().sum();
    let mut cdf = Vec::with_capacity(k + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p / total;
        cdf.push(acc);
    }
    cdf[k] = 1.0;

    let us: Vec<f64> = match rng {
        None => (0..m).map(|j| (j as f64 + 0.5) / m as f64).collect(),
        Some(rng) => (0..m).map(|_| rng.random::<f64>()).collect(),
    };
    let mut t = coarse.t.clone();
    t.reserve(m);
    for u in us {
        // Last bin whose CDF start is <= u.
        let bin = cdf[1..k].partition_point(|&c| c <= u);
        let frac = ((u - cdf[bin]) / (cdf[bin + 1] - cdf[bin])).clamp(0.0, 1.0);
        let s = bounds.near + (bin as f64 + frac) * width;
        t.push(s.clamp(bounds.near, bounds.far));
    }
    t.sort_by(f64::total_cmp);
    SampleSet { t, bounds }
}

/// Compositing weights and the transmittances `T_1..T_{K+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub weights: Vec<F>,
    pub transmittance: Vec<F>,
}

pub fn composite_weights<F: Real>(sigmas: &[F], deltas: &[F]) -> Result<Weights<F>> {
    if sigmas.len() != deltas.len() {
        return Err(Error::domain("sigma and delta lengths differ"));
    }
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut transmittance = Vec::with_capacity(sigmas.len() + 1);
    let mut optical_depth = F::zero();
    transmittance.push(F::one());
    for (&s, &d) in sigmas.iter().zip(deltas) {
        if !(s >= F::zero()) || !(d >= F::zero()) {
            return Err(Error::domain(format!("negative or NaN density/spacing: sigma={s:?}, delta={d:?}")));
        }
        let t = (-optical_depth).exp();
        let x = s * d;
        weights.push(if x.is_infinite() { t } else { -t * (-x).exp_m1() });
        optical_depth = optical_depth + x;
        transmittance.push((-optical_depth).exp());
    }
    Ok(Weights { weights, transmittance })
}

/// `sum_k w_k v_k` over payload rows of width `dim`.
pub fn expected_value<F: Real>(weights: &[F], values: &[F], dim: usize) -> Vec<F> {
    assert_eq!(values.len(), weights.len() * dim, "payload must have one row per sample");
    let mut out = vec![F::zero(); dim];
    for (w, row) in weights.iter().zip(values.chunks_exact(dim)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + *w * v;
        }
    }
    out
}

/// Expected payload, weights and transmittances.
pub fn composite<F: Real>(sigmas: &[F], deltas: &[F], values: &[F], dim: usize) -> Result<(Vec<F>, Weights<F>)> {
    if values.len() != sigmas.len() * dim {
        return Err(Error::domain("payload must have one row per sample"));
    }
    let w = composite_weights(sigmas, deltas)?;
    Ok((expected_value(&w.weights, values, dim), w))
}

/// Gradient of a loss with respect to the densities given `d_weights`, the
/// loss gradient with respect to each compositing weight.
///
/// `dL/dsigma_j = delta_j (T_{j+1} g_j - sum_{k>j} w_k g_k)`.
pub fn composite_weights_backward<F: Real>(deltas: &[F], w: &Weights<F>, d_weights: &[F]) -> Vec<F> {
    let k = deltas.len();
    let mut out = vec![F::zero(); k];
    let mut suffix = F::zero();
    for j in (0..k).rev() {
        out[j] = deltas[j] * (w.transmittance[j + 1] * d_weights[j] - suffix);
        suffix = suffix + w.weights[j] * d_weights[j];
    }
    out
}

/// Everything rendered for one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb_coarse: [f64; 3],
    pub rgb_fine: [f64; 3],
    pub logits_coarse: Vec<f64>,
    pub logits_fine: Vec<f64>,
    /// `softmax(logits_fine)`.
    pub probs: Vec<f64>,
    pub depth: f64,
    /// Fine-pass samples, weights and transmittances.
    pub t: Vec<f64>,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub entropy: f64,
}

impl RenderOutput {
    pub fn label(&self) -> u8 {
        argmax(&self.probs) as u8
    }
}

/// How sample positions are chosen for a batch.
pub enum Sampling<'a> {
    /// Bin midpoints and midpoint CDF inversion (evaluation).
    Deterministic,
    /// Jittered strata and random CDF inversion (training).
    Random(&'a mut Rng),
    /// Caller-supplied sample sets (gradient checks).
    Fixed { coarse: &'a [SampleSet], fine: &'a [SampleSet] },
}

/// Batched coarse + fine pass with every activation kept for the backward pass.
pub struct BatchPass<F> {
    pub num_rays: usize,
    pub num_classes: usize,
    pub coarse_samples: Vec<SampleSet>,
    pub fine_samples: Vec<SampleSet>,
    coarse: PassState<F>,
    fine: PassState<F>,
}

struct PassState<F> {
    tape: NetTape<F>,
    /// Samples per ray.
    k: usize,
    deltas: Vec<F>,
    weights: Vec<Weights<F>>,
    rgb: Vec<F>,
    logits: Vec<F>,
}

impl<F: Real> BatchPass<F> {
    pub fn rgb(&self, net: Net) -> &[F] {
        &self.pass(net).rgb
    }

    pub fn logits(&self, net: Net) -> &[F] {
        &self.pass(net).logits
    }

    pub fn weights(&self, net: Net, ray: usize) -> &Weights<F> {
        &self.pass(net).weights[ray]
    }

    fn pass(&self, net: Net) -> &PassState<F> {
        match net {
            Net::Coarse => &self.coarse,
            Net::Fine => &self.fine,
        }
    }

    /// Expected ray distance from the fine weights.
    pub fn depth(&self, ray: usize, normalize: bool) -> f64 {
        let w = &self.fine.weights[ray].weights;
        let t = &self.fine_samples[ray].t;
        let d: f64 = w.iter().zip(t).map(|(w, t)| w.to_f64().unwrap() * t).sum();
        if normalize {
            let acc: f64 = w.iter().map(|w| w.to_f64().unwrap()).sum();
            if acc < 1e-6 {
                0.0
            } else {
                d / acc
            }
        } else {
            d
        }
    }
}

fn run_pass<F: Real>(params: &FieldParams<F>, net: Net, rays: &[Ray], samples: &[SampleSet]) -> Result<PassState<F>> {
    let k = samples.first().map_or(0, SampleSet::len);
    if samples.iter().any(|s| s.len() != k) {
        return Err(Error::domain("every ray in a batch needs the same sample count"));
    }
    let c = params.num_classes();
    let mut positions = Vec::with_capacity(rays.len() * k);
    let mut dirs = Vec::with_capacity(rays.len() * k);
    let mut deltas = Vec::with_capacity(rays.len() * k);
    for (ray, s) in rays.iter().zip(samples) {
        let d = [ray.direction.x, ray.direction.y, ray.direction.z].map(F::lit);
        for &t in &s.t {
            let p = ray.at(t);
            positions.push([p.x, p.y, p.z].map(F::lit));
            dirs.push(d);
        }
        deltas.extend(s.deltas().into_iter().map(F::lit));
    }
    let tape = params.forward_batch(net, &positions, &dirs);
    let mut weights = Vec::with_capacity(rays.len());
    let mut rgb = Vec::with_capacity(rays.len() * 3);
    let mut logits = Vec::with_capacity(rays.len() * c);
    for r in 0..rays.len() {
        let span = r * k..(r + 1) * k;
        let w = composite_weights(&tape.sigma[span.clone()], &deltas[span.clone()])?;
        rgb.extend(expected_value(&w.weights, &tape.rgb[3 * span.start..3 * span.end], 3));
        logits.extend(expected_value(&w.weights, &tape.logits[c * span.start..c * span.end], c));
        weights.push(w);
    }
    Ok(PassState { tape, k, deltas, weights, rgb, logits })
}

/// Coarse pass, importance resampling, fine pass.
pub fn forward_pass<F: Real>(
    params: &FieldParams<F>,
    rays: &[Ray],
    cfg: &RenderConfig,
    sampling: Sampling<'_>,
) -> Result<BatchPass<F>> {
    cfg.validate()?;
    let (coarse_samples, coarse, fine_samples) = match sampling {
        Sampling::Fixed { coarse, fine } => {
            if coarse.len() != rays.len() || fine.len() != rays.len() {
                return Err(Error::domain("fixed sample sets must cover every ray"));
            }
            let state = run_pass(params, Net::Coarse, rays, coarse)?;
            (coarse.to_vec(), state, fine.to_vec())
        }
        Sampling::Deterministic => {
            let cs: Vec<SampleSet> = rays.iter().map(|r| stratified_samples(r.bounds(), cfg.n_coarse, None)).collect();
            let state = run_pass(params, Net::Coarse, rays, &cs)?;
            let fs = cs
                .iter()
                .zip(&state.weights)
                .map(|(s, w)| importance_samples(s, &to_f64(&w.weights), cfg.n_fine, None))
                .collect();
            (cs, state, fs)
        }
        Sampling::Random(rng) => {
            let cs: Vec<SampleSet> =
                rays.iter().map(|r| stratified_samples(r.bounds(), cfg.n_coarse, Some(&mut *rng))).collect();
            let state = run_pass(params, Net::Coarse, rays, &cs)?;
            let fs = cs
                .iter()
                .zip(&state.weights)
                .map(|(s, w)| importance_samples(s, &to_f64(&w.weights), cfg.n_fine, Some(&mut *rng)))
                .collect();
            (cs, state, fs)
        }
    };
    let fine = run_pass(params, Net::Fine, rays, &fine_samples)?;
    Ok(BatchPass { num_rays: rays.len(), num_classes: params.num_classes(), coarse_samples, fine_samples, coarse, fine })
}

fn to_f64<F: Real>(v: &[F]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap()).collect()
}

/// Loss gradients with respect to the per-ray composited outputs.
pub struct OutputGrads<F> {
    pub rgb_coarse: Vec<F>,
    pub rgb_fine: Vec<F>,
    pub logits_coarse: Vec<F>,
    pub logits_fine: Vec<F>,
}

/// Back-propagate per-ray output gradients through compositing and both
/// networks, accumulating into `grad`.
pub fn backward_pass<F: Real>(params: &FieldParams<F>, pass: &BatchPass<F>, d_out: &OutputGrads<F>, grad: &mut [F]) {
    for (net, state, d_rgb, d_logits) in [
        (Net::Coarse, &pass.coarse, &d_out.rgb_coarse, &d_out.logits_coarse),
        (Net::Fine, &pass.fine, &d_out.rgb_fine, &d_out.logits_fine),
    ] {
        let (k, c) = (state.k, pass.num_classes);
        let n = pass.num_rays * k;
        let mut d_sigma = vec![F::zero(); n];
        let mut d_rgb_s = vec![F::zero(); 3 * n];
        let mut d_logit_s = vec![F::zero(); c * n];
        for r in 0..pass.num_rays {
            let g_rgb = &d_rgb[3 * r..3 * r + 3];
            let g_log = &d_logits[c * r..c * r + c];
            let w = &state.weights[r];
            let d_w: Vec<F> = (0..k)
                .map(|s| {
                    let i = r * k + s;
                    let mut a = F::zero();
                    for ch in 0..3 {
                        a = a + g_rgb[ch] * state.tape.rgb[3 * i + ch];
                        d_rgb_s[3 * i + ch] = w.weights[s] * g_rgb[ch];
                    }
                    for l in 0..c {
                        a = a + g_log[l] * state.tape.logits[c * i + l];
                        d_logit_s[c * i + l] = w.weights[s] * g_log[l];
                    }
                    a
                })
                .collect();
            let ds = composite_weights_backward(&state.deltas[r * k..(r + 1) * k], w, &d_w);
            d_sigma[r * k..(r + 1) * k].copy_from_slice(&ds);
        }
        params.backward_batch(net, &state.tape, &d_sigma, &d_rgb_s, &d_logit_s, grad);
    }
}

/// Anything that can answer batched density / colour / logit queries.
pub trait FieldQuery: Sync {
    fn num_classes(&self) -> usize;

    /// Returns `(sigma, rgb, logits)` flattened per sample.
    fn query(&self, net: Net, positions: &[[f64; 3]], dirs: &[[f64; 3]]) -> (Vec<f64>, Vec<f64>, Vec<f64>);
}

impl<F: Real> FieldQuery for FieldParams<F> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn query(&self, net: Net, positions: &[[f64; 3]], dirs: &[[f64; 3]]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let p: Vec<[F; 3]> = positions.iter().map(|v| v.map(F::lit)).collect();
        let d: Vec<[F; 3]> = dirs.iter().map(|v| v.map(F::lit)).collect();
        let tape = self.forward_batch(net, &p, &d);
        (to_f64(&tape.sigma), to_f64(&tape.rgb), to_f64(&tape.logits))
    }
}

struct Composited {
    rgb: Vec<f64>,
    logits: Vec<f64>,
    weights: Vec<Weights<f64>>,
}

fn query_and_composite<Q: FieldQuery + ?Sized>(
    field: &Q,
    net: Net,
    rays: &[Ray],
    samples: &[SampleSet],
) -> Result<Composited> {
    let c = field.num_classes();
    let mut positions = Vec::new();
    let mut dirs = Vec::new();
    for (ray, s) in rays.iter().zip(samples) {
        for &t in &s.t {
            let p = ray.at(t);
            positions.push([p.x, p.y, p.z]);
            dirs.push([ray.direction.x, ray.direction.y, ray.direction.z]);
        }
    }
    let (sigma, rgb, logits) = field.query(net, &positions, &dirs);
    let mut out = Composited { rgb: Vec::new(), logits: Vec::new(), weights: Vec::new() };
    let mut start = 0;
    for s in samples {
        let span = start..start + s.len();
        start = span.end;
        let w = composite_weights(&sigma[span.clone()], &s.deltas())?;
        out.rgb.extend(expected_value(&w.weights, &rgb[3 * span.start..3 * span.end], 3));
        out.logits.extend(expected_value(&w.weights, &logits[c * span.start..c * span.end], c));
        out.weights.push(w);
    }
    Ok(out)
}

/// Deterministic coarse-to-fine render of a batch of rays.
pub fn render_rays<Q: FieldQuery + ?Sized>(field: &Q, rays: &[Ray], cfg: &RenderConfig) -> Result<Vec<RenderOutput>> {
    cfg.validate()?;
    let c = field.num_classes();
    let coarse_s: Vec<SampleSet> = rays.iter().map(|r| stratified_samples(r.bounds(), cfg.n_coarse, None)).collect();
    let coarse = query_and_composite(field, Net::Coarse, rays, &coarse_s)?;
    let fine_s: Vec<SampleSet> = coarse_s
        .iter()
        .zip(&coarse.weights)
        .map(|(s, w)| importance_samples(s, &w.weights, cfg.n_fine, None))
        .collect();
    let fine = query_and_composite(field, Net::Fine, rays, &fine_s)?;
    let mut out = Vec::with_capacity(rays.len());
    for (r, (samples, w)) in fine_s.into_iter().zip(fine.weights).enumerate() {
        let logits_fine = fine.logits[c * r..c * (r + 1)].to_vec();
        let probs = softmax(&logits_fine);
        let mut depth: f64 = w.weights.iter().zip(&samples.t).map(|(w, t)| w * t).sum();
        if cfg.normalize_depth {
            let acc: f64 = w.weights.iter().sum();
            depth = if acc < 1e-6 { 0.0 } else { depth / acc };
        }
        out.push(RenderOutput {
            rgb_coarse: [coarse.rgb[3 * r], coarse.rgb[3 * r + 1], coarse.rgb[3 * r + 2]],
            rgb_fine: [fine.rgb[3 * r], fine.rgb[3 * r + 1], fine.rgb[3 * r + 2]],
            logits_coarse: coarse.logits[c * r..c * (r + 1)].to_vec(),
            entropy: entropy(&probs),
            probs,
            logits_fine,
            depth,
            t: samples.t,
            weights: w.weights,
            transmittance: w.transmittance,
        });
    }
    Ok(out)
}

pub fn render_ray<Q: FieldQuery + ?Sized>(field: &Q, ray: &Ray, cfg: &RenderConfig) -> Result<RenderOutput> {
    Ok(render_rays(field, std::slice::from_ref(ray), cfg)?.remove(0))
}

/// Per-pixel render of a full image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRender {
    pub rgb: Image<[f64; 3]>,
    pub labels: LabelMap,
    pub depth: Image<f64>,
    pub entropy: Image<f64>,
    /// Row-major per-pixel class probabilities, `num_classes` per pixel.
    pub probs: Vec<f32>,
    pub num_classes: usize,
}

impl ImageRender {
    pub fn rgb_u8(&self) -> Image<[u8; 3]> {
        Image {
            width: self.rgb.width,
            height: self.rgb.height,
            data: self.rgb.data.iter().map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect(),
        }
    }

    pub fn pixel_probs(&self, idx: usize) -> &[f32] {
        &self.probs[idx * self.num_classes..(idx + 1) * self.num_classes]
    }
}

/// Rays per field query when rendering images.
const IMAGE_CHUNK: usize = 512;

pub fn render_image<Q: FieldQuery + ?Sized>(
    field: &Q,
    camera: &Camera,
    pose: &Pose,
    cfg: &RenderConfig,
) -> Result<ImageRender> {
    let mut rays = Vec::with_capacity(camera.num_pixels());
    for row in 0..camera.height {
        for col in 0..camera.width {
            rays.push(ray_for_pixel(camera, pose, Pixel::new(col, row), cfg.bounds)?);
        }
    }
    let chunks: Vec<Vec<RenderOutput>> =
        rays.par_chunks(IMAGE_CHUNK).map(|chunk| render_rays(field, chunk, cfg)).collect::<Result<_>>()?;
    let (w, h) = (camera.width, camera.height);
    let c = field.num_classes();
    let n = camera.num_pixels();
    let (mut rgb, mut labels, mut depth, mut ent) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut probs = Vec::with_capacity(n * c);
    for o in chunks.into_iter().flatten() {
        rgb.push(o.rgb_fine);
        labels.push(o.label());
        depth.push(o.depth);
        ent.push(o.entropy);
        probs.extend(o.probs.iter().map(|&p| p as f32));
    }
    Ok(ImageRender {
        rgb: Image::from_vec(w, h, rgb)?,
        labels: Image::from_vec(w, h, labels)?,
        depth: Image::from_vec(w, h, depth)?,
        entropy: Image::from_vec(w, h, ent)?,
        probs,
        num_classes: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::rng;
    use proptest::prelude::*;

    fn unit() -> RayBounds {
        RayBounds { near: 1e-9, far: 1.0 }
    }

    #[test]
    fn midpoint_strata() {
        let s = stratified_samples(RayBounds { near: 1e-12, far: 1.0 }, 4, None);
        let expect = [0.125, 0.375, 0.625, 0.875];
        for (a, b) in s.t.iter().zip(expect) {
            assert!((a - b).abs() < 1e-11);
        }
        let one = stratified_samples(RayBounds { near: 2.0, far: 3.0 }, 1, Some(&mut rng::derive(0, "t")));
        assert!(one.t[0] >= 2.0 && one.t[0] <= 3.0);
    }

    #[test]
    fn jittered_samples_stay_in_their_bins() {
        let mut r = rng::derive(1, "strata");
        let b = RayBounds { near: 0.1, far: 10.0 };
        for _ in 0..1000 {
            let s = stratified_samples(b, 8, Some(&mut r));
            let width = (b.far - b.near) / 8.0;
            for (i, t) in s.t.iter().enumerate() {
                assert!(*t >= b.near + i as f64 * width && *t <= b.near + (i + 1) as f64 * width);
            }
            assert!(s.deltas().iter().all(|d| *d > 0.0));
        }
    }

    #[test]
    fn empty_space_composites_to_zero() {
        let (v, w) = composite(&[0.0f64; 4], &[0.25; 4], &[1.0; 8], 2).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        assert!(w.weights.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn opaque_first_sample_takes_all_weight() {
        let (v, w) = composite(&[1e6f64, 3.0], &[1.0, 1.0], &[0.2, 0.9], 1).unwrap();
        assert!((w.weights[0] - 1.0).abs() < 1e-12);
        assert!((v[0] - 0.2).abs() < 1e-12);
        let (v, _) = composite(&[f64::INFINITY, 3.0], &[1.0, 1.0], &[0.2, 0.9], 1).unwrap();
        assert_eq!(v[0], 0.2);
    }

    #[test]
    fn two_samples_with_half_transmission() {
        let ln2 = 2f64.ln();
        let (v, w) = composite(&[ln2, ln2], &[1.0, 1.0], &[1.0, 10.0, 100.0, 1000.0], 2).unwrap();
        assert!((w.weights[0] - 0.5).abs() < 1e-12);
        assert!((w.weights[1] - 0.25).abs() < 1e-12);
        assert!((v[0] - (0.5 + 25.0)).abs() < 1e-12);
        assert!((v[1] - (5.0 + 250.0)).abs() < 1e-12);
    }

    #[test]
    fn negative_density_or_spacing_is_rejected() {
        assert!(composite(&[-1.0f64], &[1.0], &[0.0], 1).is_err());
        assert!(composite(&[1.0f64], &[-1.0], &[0.0], 1).is_err());
    }

    proptest! {
        #[test]
        fn weights_telescope_and_are_bounded(sig in prop::collection::vec(0.0f64..20.0, 1..40),
                                             seed in 0u64..1000) {
            let mut r = rng::derive(seed, "d");
            let deltas: Vec<f64> = sig.iter().map(|_| r.random_range(0.001..0.5)).collect();
            let w = composite_weights(&sig, &deltas).unwrap();
            let total: f64 = w.weights.iter().sum();
            prop_assert!((total - (1.0 - w.transmittance[sig.len()])).abs() < 1e-12);
            prop_assert!(total <= 1.0 + 1e-6);
            prop_assert!(w.weights.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn compositing_is_linear_in_payload(sig in prop::collection::vec(0.0f64..5.0, 1..20),
                                            a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..100) {
            let mut r = rng::derive(seed, "lin");
            let k = sig.len();
            let deltas = vec![0.1; k];
            let v: Vec<f64> = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = v.iter().zip(&u).map(|(x, y)| a * x + b * y).collect();
            let (cv, _) = composite(&sig, &deltas, &v, 1).unwrap();
            let (cu, _) = composite(&sig, &deltas, &u, 1).unwrap();
            let (cm, _) = composite(&sig, &deltas, &mix, 1).unwrap();
            prop_assert!((cm[0] - (a * cv[0] + b * cu[0])).abs() < 1e-12);
        }

        #[test]
        fn inserting_empty_sample_leaves_weights(sig in prop::collection::vec(0.0f64..5.0, 1..20),
                                                 pos in 0usize..20, delta in 0.0f64..2.0) {
            let pos = pos.min(sig.len());
            let deltas = vec![0.2; sig.len()];
            let w = composite_weights(&sig, &deltas).unwrap();
            let mut s2 = sig.clone();
            let mut d2 = deltas.clone();
            s2.insert(pos, 0.0);
            d2.insert(pos, delta);
            let w2 = composite_weights(&s2, &d2).unwrap();
            prop_assert_eq!(w2.weights[pos], 0.0);
            let mut rest = w2.weights.clone();
            rest.remove(pos);
            for (a, b) in rest.iter().zip(&w.weights) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let sig = [0.3f64, 2.0, 0.0, 5.0, 0.7];
        let deltas = [0.2, 0.1, 0.4, 0.3, 0.5];
        let g = [0.5, -1.0, 2.0, 0.25, -0.3];
        let loss = |s: &[f64]| -> f64 {
            let w = composite_weights(s, &deltas).unwrap();
            w.weights.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let w = composite_weights(&sig, &deltas).unwrap();
        let analytic = composite_weights_backward(&deltas, &w, &g);
        for j in 0..sig.len() {
            let h = 1e-6;
            let (mut p, mut m) = (sig, sig);
            p[j] += h;
            m[j] -= h;
            if m[j] < 0.0 {
                continue;
            }
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - analytic[j]).abs() < 1e-8, "j={j} fd={fd} an={}", analytic[j]);
        }
    }

    #[test]
    fn importance_sampling_concentrates_on_single_bin() {
        let coarse = stratified_samples(unit(), 8, None);
        let mut w = vec![0.0; 8];
        w[5] = 1.0;
        let fine = importance_samples(&coarse, &w, 64, None);
        assert_eq!(fine.len(), 72);
        let in_bin = fine.t.iter().filter(|&&t| (0.625..=0.75).contains(&t)).count();
        assert!(in_bin >= 64, "{in_bin}");
        let mut r = rng::derive(3, "is");
        let fine = importance_samples(&coarse, &w, 64, Some(&mut r));
        assert!(fine.t.iter().filter(|&&t| (0.625..=0.75).contains(&t)).count() >= 64);
        assert!(fine.t.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn uniform_weights_give_uniform_histogram() {
        let k = 10;
        let m = 10_000;
        let coarse = stratified_samples(unit(), k, None);
        let mut r = rng::derive(11, "hist");
        let fine = importance_samples(&coarse, &vec![0.1; k], m, Some(&mut r));
        let mut counts = vec![0usize; k];
        for t in &fine.t {
            counts[((t * k as f64) as usize).min(k - 1)] += 1;
        }
        // Remove the k coarse samples (one per bin) and compare with the
        // multinomial mean m/k and standard deviation sqrt(m p (1-p)).
        let mean = m as f64 / k as f64;
        let sd = (m as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            let extra = c as f64 - 1.0;
            assert!((extra - mean).abs() <= 3.0 * sd, "count {extra} vs {mean} +- {}", 3.0 * sd);
        }
    }

    proptest! {
        #[test]
        fn importance_output_sorted_and_bounded(ws in prop::collection::vec(0.0f64..1.0, 2..32), m in 1usize..64, seed in 0u64..50) {
            let b = RayBounds { near: 0.1, far: 6.0 };
            let coarse = stratified_samples(b, ws.len(), Some(&mut rng::derive(seed, "c")));
            let fine = importance_samples(&coarse, &ws, m, Some(&mut rng::derive(seed, "f")));
            prop_assert_eq!(fine.len(), ws.len() + m);
            prop_assert!(fine.t.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(fine.t.iter().all(|t| *t >= b.near && *t <= b.far));
        }
    }

    /// Analytic field: empty space, an opaque slab at `wall` along -z, and
    /// fixed logits.
    struct Wall {
        wall: f64,
        logits: Vec<f64>,
        density: f64,
    }

    impl FieldQuery for Wall {
        fn num_classes(&self) -> usize {
            self.logits.len()
        }
        fn query(&self, _: Net, positions: &[[f64; 3]], _: &[[f64; 3]]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
            let sigma = positions.iter().map(|p| if -p[2] >= self.wall { self.density } else { 0.0 }).collect();
            let rgb = positions.iter().flat_map(|_| [0.2, 0.4, 0.6]).collect();
            let logits = positions.iter().flat_map(|_| self.logits.clone()).collect();
            (sigma, rgb, logits)
        }
    }

    fn forward_ray(far: f64) -> Ray {
        Ray::new(Vec3::zeros(), -Vec3::z(), RayBounds { near: 0.1, far }).unwrap()
    }

    #[test]
    fn empty_field_has_zero_depth_and_maximal_entropy() {
        let f = Wall { wall: f64::INFINITY, logits: vec![0.0; 5], density: 0.0 };
        let cfg = RenderConfig::desk(RayBounds { near: 0.1, far: 6.0 });
        let o = render_ray(&f, &forward_ray(6.0), &cfg).unwrap();
        assert_eq!(o.depth, 0.0);
        assert!((o.entropy - 5f64.ln()).abs() < 1e-12);
        assert_eq!(o.rgb_fine, [0.0; 3]);
    }

    #[test]
    fn opaque_wall_depth_within_a_bin() {
        let cfg = RenderConfig::desk(RayBounds { near: 0.1, far: 6.0 });
        let f = Wall { wall: 3.0, logits: vec![0.0, 12.0, 0.0], density: 1e4 };
        let o = render_ray(&f, &forward_ray(6.0), &cfg).unwrap();
        let bin = (6.0 - 0.1) / cfg.n_coarse as f64;
        assert!((o.depth - 3.0).abs() <= bin, "depth {}", o.depth);
        assert!(o.entropy < 0.1);
        assert_eq!(o.label(), 1);
        let total: f64 = o.weights.iter().sum();
        assert!(total <= 1.0 + 1e-6);
        // Colour and semantics composite with identical weights.
        assert!((o.rgb_fine[0] - 0.2 * total).abs() < 1e-12);
        assert!((o.logits_fine[1] - 12.0 * total).abs() < 1e-9);
    }

    #[test]
    fn normalized_depth_variant() {
        let mut cfg = RenderConfig::desk(RayBounds { near: 0.1, far: 6.0 });
        cfg.normalize_depth = true;
        let f = Wall { wall: 2.0, logits: vec![0.0, 1.0], density: 0.5 };
        let o = render_ray(&f, &forward_ray(6.0), &cfg).unwrap();
        assert!(o.depth >= 2.0 - 0.2 && o.depth <= 6.0);
        let empty = Wall { wall: f64::INFINITY, logits: vec![0.0, 1.0], density: 0.0 };
        assert_eq!(render_ray(&empty, &forward_ray(6.0), &cfg).unwrap().depth, 0.0);
    }
}
