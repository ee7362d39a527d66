//! Joint optimization of colour and semantics.
//!
//! Per batch of rays `R` the objective is
//!
//! ```text
//! L_p = sum_r |C_c(r) - C(r)|^2 + |C_f(r) - C(r)|^2
//! L_s = -sum_r sum_l p_l(r) (log q_c,l(r) + log q_f,l(r))
//! L   = L_p + lambda L_s
//! ```
//!
//! summed (not averaged) over rays, with void rays excluded from `L_s`.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SupervisionMask, VOID};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams};
use crate::geometry::{ray_for_pixel, Pixel, Ray};
use crate::linalg::{softmax, Real};
use crate::render::{backward_pass, forward_pass, BatchPass, OutputGrads, RenderConfig, Sampling};
use crate::rng::{self, Rng};

/// Rays per gradient chunk. Chunk boundaries and the reduction order depend
/// only on the batch size, so results do not change with the thread count.
const GRAD_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_sem: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_rays: usize,
    pub render: RenderConfig,
    /// Supplied by the experiment seed rather than the config file.
    #[serde(skip)]
    pub seed: u64,
    /// Exponential decay of the learning rate to 10% over the run.
    #[serde(default = "yes")]
    pub lr_decay: bool,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// 256 rays, 20 000 iterations.
    pub fn desk(render: RenderConfig) -> Self {
        TrainConfig {
            lambda_sem: 0.04,
            learning_rate: 5e-4,
            iterations: 20_000,
            batch_rays: 256,
            render,
            seed: 0,
            lr_decay: true,
        }
    }

    /// 1024 rays, 200 000 iterations.
    pub fn paper(render: RenderConfig) -> Self {
        TrainConfig { iterations: 200_000, batch_rays: 1024, ..Self::desk(render) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sem >= 0.0) {
            return Err(Error::config(format!("lambda_sem {} must be non-negative", self.lambda_sem)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_rays == 0 {
            return Err(Error::config("batch needs at least one ray"));
        }
        self.render.validate()
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        if self.lr_decay && self.iterations > 0 {
            self.learning_rate * 0.1f64.powf(iteration as f64 / self.iterations as f64)
        } else {
            self.learning_rate
        }
    }
}

/// Semantic supervision for one ray.
#[derive(Debug, Clone, PartialEq)]
pub enum SemanticTarget {
    Void,
    Class(u8),
    /// Probability vector over the classes.
    Soft(Vec<f64>),
}

/// Sum of squared colour errors of both hierarchies.
pub fn photometric_loss<F: Real>(rgb_coarse: &[F], rgb_fine: &[F], target: &[F]) -> F {
    assert!(rgb_coarse.len() == target.len() && rgb_fine.len() == target.len());
    let mut l = F::zero();
    for i in 0..target.len() {
        let (a, b) = (rgb_coarse[i] - target[i], rgb_fine[i] - target[i]);
        l = l + a * a + b * b;
    }
    l
}

fn cross_entropy<F: Real>(logits: &[F], target: &SemanticTarget, grad: Option<&mut [F]>) -> F {
    let p = softmax(logits);
    let (loss, onehot);
    let dist: &[f64] = match target {
        SemanticTarget::Void => return F::zero(),
        SemanticTarget::Class(l) => {
            let mut v = vec![0.0; logits.len()];
            v[*l as usize] = 1.0;
            onehot = v;
            &onehot
        }
        SemanticTarget::Soft(d) => d,
    };
    let tiny = F::min_positive_value();
    loss = dist
        .iter()
        .zip(&p)
        .filter(|(&q, _)| q > 0.0)
        .fold(F::zero(), |acc, (&q, &pi)| acc - F::lit(q) * pi.max(tiny).ln());
    if let Some(g) = grad {
        let mass: f64 = dist.iter().sum();
        for ((g, &pi), &q) in g.iter_mut().zip(&p).zip(dist) {
            *g = F::lit(mass) * pi - F::lit(q);
        }
    }
    loss
}

/// Cross-entropy of both hierarchies, summed over non-void rays.
pub fn semantic_loss<F: Real>(logits_coarse: &[F], logits_fine: &[F], targets: &[SemanticTarget]) -> F {
    let c = logits_coarse.len() / targets.len().max(1);
    let mut l = F::zero();
    for (r, t) in targets.iter().enumerate() {
        l = l + cross_entropy(&logits_coarse[c * r..c * (r + 1)], t, None);
        l = l + cross_entropy(&logits_fine[c * r..c * (r + 1)], t, None);
    }
    l
}

pub fn total_loss<F: Real>(photometric: F, semantic: F, lambda: f64) -> F {
    photometric + F::lit(lambda) * semantic
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![F::zero(); len], v: vec![F::zero(); len], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<F: Real>(params: &mut [F], grads: &[F], state: &mut AdamState<F>, lr: f64) {
    assert!(params.len() == grads.len() && state.m.len() == params.len());
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::lit(state.beta1), F::lit(state.beta2));
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let step = F::lit(lr * c2.sqrt() / c1);
    let eps = F::lit(state.eps * c2.sqrt());
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (F::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (F::one() - b2) * g * g;
        params[i] = params[i] - step * state.m[i] / (state.v[i].sqrt() + eps);
    }
}

/// Loss terms for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub photometric: f64,
    pub semantic: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.photometric += o.photometric;
        self.semantic += o.semantic;
        self.total += o.total;
    }
}

/// Total loss and its gradient for a batch of rays rendered with `sampling`.
pub fn loss_and_gradient<F: Real>(
    params: &FieldParams<F>,
    rays: &[Ray],
    target_rgb: &[[f64; 3]],
    targets: &[SemanticTarget],
    cfg: &RenderConfig,
    lambda: f64,
    sampling: Sampling<'_>,
) -> Result<(LossParts, Vec<F>)> {
    let pass = forward_pass(params, rays, cfg, sampling)?;
    let mut grad = vec![F::zero(); params.len()];
    let parts = accumulate(params, &pass, target_rgb, targets, lambda, &mut grad);
    Ok((parts, grad))
}

fn accumulate<F: Real>(
    params: &FieldParams<F>,
    pass: &BatchPass<F>,
    target_rgb: &[[f64; 3]],
    targets: &[SemanticTarget],
    lambda: f64,
    grad: &mut [F],
) -> LossParts {
    let n = pass.num_rays;
    let c = pass.num_classes;
    let target: Vec<F> = target_rgb.iter().flat_map(|p| p.map(F::lit)).collect();
    let (rc, rf) = (pass.rgb(crate::field::Net::Coarse), pass.rgb(crate::field::Net::Fine));
    let (lc, lf) = (pass.logits(crate::field::Net::Coarse), pass.logits(crate::field::Net::Fine));
    let lp = photometric_loss(rc, rf, &target);
    let two = F::lit(2.0);
    let mut d = OutputGrads {
        rgb_coarse: rc.iter().zip(&target).map(|(&a, &t)| two * (a - t)).collect(),
        rgb_fine: rf.iter().zip(&target).map(|(&a, &t)| two * (a - t)).collect(),
        logits_coarse: vec![F::zero(); n * c],
        logits_fine: vec![F::zero(); n * c],
    };
    let mut ls = F::zero();
    let lam = F::lit(lambda);
    for (r, t) in targets.iter().enumerate() {
        let span = c * r..c * (r + 1);
        ls = ls + cross_entropy(&lc[span.clone()], t, Some(&mut d.logits_coarse[span.clone()]));
        ls = ls + cross_entropy(&lf[span.clone()], t, Some(&mut d.logits_fine[span.clone()]));
    }
    if lambda == 0.0 {
        d.logits_coarse.fill(F::zero());
        d.logits_fine.fill(F::zero());
    } else {
        d.logits_coarse.iter_mut().chain(d.logits_fine.iter_mut()).for_each(|g| *g = *g * lam);
    }
    backward_pass(params, pass, &d, grad);
    let (lp, ls) = (lp.to_f64().unwrap(), ls.to_f64().unwrap());
    LossParts { photometric: lp, semantic: ls, total: lp + lambda * ls }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub photometric: f64,
    pub semantic: f64,
    pub total: f64,
}

pub fn write_loss_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut s = String::from("iteration,photometric,semantic,total\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{}\n", r.iteration, r.photometric, r.semantic, r.total));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Supervision for `train`: the frames to fit and their label channels.
#[derive(Debug, Clone)]
pub struct TrainingData<'a> {
    pub dataset: &'a Dataset,
    /// Frames contributing rays.
    pub frames: Vec<usize>,
    /// Frames whose labels are used; indexes `dataset.frames`.
    pub mask: SupervisionMask,
    /// Optional per-frame soft targets, `num_classes` values per pixel,
    /// overriding the hard labels of that frame.
    pub soft_labels: Option<Vec<Option<Vec<f32>>>>,
}

impl<'a> TrainingData<'a> {
    pub fn new(dataset: &'a Dataset, frames: Vec<usize>, mask: SupervisionMask) -> Self {
        TrainingData { dataset, frames, mask, soft_labels: None }
    }

    fn target(&self, frame: usize, pixel: usize) -> SemanticTarget {
        if !self.mask.is_labelled(frame) {
            return SemanticTarget::Void;
        }
        let c = self.dataset.num_classes();
        if let Some(Some(soft)) = self.soft_labels.as_ref().map(|s| &s[frame]) {
            return SemanticTarget::Soft(soft[pixel * c..(pixel + 1) * c].iter().map(|&p| p as f64).collect());
        }
        match self.dataset.frames[frame].labels.data[pixel] {
            VOID => SemanticTarget::Void,
            l => SemanticTarget::Class(l),
        }
    }

    fn validate(&self, lambda: f64) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::config("no training frames"));
        }
        if let Some(&f) = self.frames.iter().find(|&&f| f >= self.dataset.frames.len()) {
            return Err(Error::config(format!("training frame {f} outside the dataset")));
        }
        if lambda > 0.0 {
            let any = self.frames.iter().any(|&f| {
                self.mask.is_labelled(f)
                    && (self.soft_labels.as_ref().is_some_and(|s| s[f].is_some())
                        || self.dataset.frames[f].labels.data.iter().any(|&l| l != VOID))
            });
            if !any {
                return Err(Error::config("semantic weight is positive but no training pixel is labelled"));
            }
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub params: FieldParams<f32>,
    pub trace: Vec<LossRecord>,
}

/// Hook called every `every` iterations with the current parameters.
pub struct CheckpointHook<'a> {
    pub every: usize,
    pub save: &'a mut dyn FnMut(usize, &FieldParams<f32>) -> Result<()>,
}

/// Fit a field to `data`. Rays are drawn uniformly over every pixel of the
/// training frames. Given the same seed the result is bit-identical.
pub fn train(
    data: &TrainingData<'_>,
    field: FieldConfig,
    cfg: &TrainConfig,
    mut hook: Option<CheckpointHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate(cfg.lambda_sem)?;
    if field.num_classes != data.dataset.num_classes() {
        return Err(Error::config(format!(
            "field has {} classes, dataset {}",
            field.num_classes,
            data.dataset.num_classes()
        )));
    }
    let mut params = FieldParams::<f32>::init(field, cfg.seed)?;
    let mut adam = AdamState::new(params.len());
    let mut rng = rng::derive(cfg.seed, "train-rays");
    let cam = &data.dataset.camera;
    let per_frame = cam.num_pixels();
    let total_pixels = per_frame * data.frames.len();
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let mut rays = Vec::with_capacity(cfg.batch_rays);
        let mut rgb = Vec::with_capacity(cfg.batch_rays);
        let mut sem = Vec::with_capacity(cfg.batch_rays);
        for _ in 0..cfg.batch_rays {
            let idx = rng.random_range(0..total_pixels);
            let (frame, pixel) = (data.frames[idx / per_frame], idx % per_frame);
            let f = &data.dataset.frames[frame];
            let px = Pixel::new((pixel % cam.width as usize) as u32, (pixel / cam.width as usize) as u32);
            rays.push(ray_for_pixel(cam, &f.pose, px, cfg.render.bounds)?);
            rgb.push(f.rgb.data[pixel].map(|v| v as f64 / 255.0));
            sem.push(data.target(frame, pixel));
        }
        let chunk_seeds: Vec<u64> = (0..cfg.batch_rays.div_ceil(GRAD_CHUNK)).map(|_| rng.random()).collect();
        let partials: Vec<(LossParts, Vec<f32>)> = chunk_seeds
            .par_iter()
            .enumerate()
            .map(|(ci, &s)| {
                let span = ci * GRAD_CHUNK..((ci + 1) * GRAD_CHUNK).min(cfg.batch_rays);
                let mut crng = Rng::seed_from_u64(s);
                loss_and_gradient(
                    &params,
                    &rays[span.clone()],
                    &rgb[span.clone()],
                    &sem[span],
                    &cfg.render,
                    cfg.lambda_sem,
                    Sampling::Random(&mut crng),
                )
            })
            .collect::<Result<_>>()?;
        let mut parts = LossParts::default();
        let mut grad = vec![0f32; params.len()];
        for (p, g) in &partials {
            parts.add(p);
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: it,
                detail: format!(
                    "photometric {} semantic {} total {}",
                    parts.photometric, parts.semantic, parts.total
                ),
            });
        }
        adam_step(&mut params.values, &grad, &mut adam, cfg.learning_rate_at(it));
        trace.push(LossRecord {
            iteration: it,
            photometric: parts.photometric,
            semantic: parts.semantic,
            total: parts.total,
        });
        if let Some(h) = hook.as_mut() {
            if h.every > 0 && (it + 1) % h.every == 0 {
                (h.save)(it + 1, &params)?;
            }
        }
    }
    Ok(TrainOutcome { params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{DensityActivation, EncodingConfig, Net};
    use crate::geometry::{Vec3, RayBounds};
    use crate::render::{stratified_samples, importance_samples};

    #[test]
    fn photometric_examples() {
        let t = [0.2f64, 0.4, 0.6];
        assert_eq!(photometric_loss(&t, &t, &t), 0.0);
        let off = [0.3, 0.4, 0.6];
        assert!((photometric_loss(&t, &off, &t) - 0.01).abs() < 1e-15);
        let t2 = [0.2f64, 0.4, 0.6, 0.2, 0.4, 0.6];
        let off2 = [0.3, 0.4, 0.6, 0.3, 0.4, 0.6];
        assert!((photometric_loss(&t2, &off2, &t2) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn semantic_examples() {
        let sure = [50.0, -50.0, -50.0];
        assert!(semantic_loss(&sure, &sure, &[SemanticTarget::Class(0)]) < 1e-20);
        let flat = [0.0f64; 6];
        let l = semantic_loss(&flat, &flat, &[SemanticTarget::Class(3)]);
        assert!((l - 2.0 * 6f64.ln()).abs() < 1e-12);
        let junk = [3.0, -1.0, 0.5, 3.0, -1.0, 0.5];
        assert_eq!(semantic_loss(&junk, &junk, &[SemanticTarget::Void, SemanticTarget::Void]), 0.0);
        assert_eq!(total_loss(1.5, 2.0, 0.04), 1.5 + 0.08);
    }

    #[test]
    fn soft_target_matching_prediction_gives_its_entropy() {
        let logits = [0.3f64, -0.2, 1.1];
        let p = softmax(&logits);
        let h: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        let l = semantic_loss(&logits, &logits, &[SemanticTarget::Soft(p.clone())]);
        assert!((l - 2.0 * h).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut p = vec![0.5f64, -1.0, 2.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 1e-3);
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let g = [0.3f64, -2.0, 1e-3];
        let mut p = vec![0.0f64; 3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &g, &mut s, 5e-4);
        for (pi, gi) in p.iter().zip(g) {
            let expect = -5e-4 * gi / (gi.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-15, "{pi} vs {expect}");
        }
        let mut p2 = vec![0.0f64; 3];
        let mut s2 = AdamState::new(3);
        adam_step(&mut p2, &g, &mut s2, 5e-4);
        assert_eq!(p, p2);
        assert_eq!(s, s2);
    }

    #[test]
    fn learning_rate_decays_to_a_tenth() {
        let cfg = TrainConfig { iterations: 100, ..TrainConfig::desk(RenderConfig::desk(RayBounds::new(0.1, 10.0).unwrap())) };
        assert_eq!(cfg.learning_rate_at(0), 5e-4);
        assert!((cfg.learning_rate_at(100) - 5e-5).abs() < 1e-18);
        assert!((cfg.learning_rate_at(50) - 5e-4 * 0.1f64.sqrt()).abs() < 1e-15);
    }

    pub(crate) fn tiny_config(c: usize) -> FieldConfig {
        FieldConfig {
            encoding: EncodingConfig { pos_freqs: 2, dir_freqs: 1, include_input: true, position_scale: 0.5 },
            trunk_width: 8,
            trunk_depth: 2,
            head_width: 6,
            skip_layer: Some(1),
            num_classes: c,
            density_activation: DensityActivation::Softplus,
        }
    }

    fn check_gradient(seed: u64) -> f64 {
        let c = 3;
        let params = FieldParams::<f64>::init(tiny_config(c), seed).unwrap();
        let bounds = RayBounds::new(0.5, 3.0).unwrap();
        let cfg = RenderConfig { n_coarse: 8, n_fine: 8, bounds, normalize_depth: false };
        let mut r = rng::derive(seed, "gradcheck");
        let rays: Vec<Ray> = (0..4)
            .map(|_| {
                let d = Vec3::new(r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), -1.0);
                Ray::new(Vec3::new(r.random_range(-0.2..0.2), 0.0, 0.0), d, bounds).unwrap()
            })
            .collect();
        let coarse: Vec<_> = rays.iter().map(|ray| stratified_samples(ray.bounds(), 8, Some(&mut r))).collect();
        let fine: Vec<_> = coarse.iter().map(|s| importance_samples(s, &[0.1; 8], 8, Some(&mut r))).collect();
        let rgb: Vec<[f64; 3]> = (0..4).map(|_| [r.random(), r.random(), r.random()]).collect();
        let sem = vec![
            SemanticTarget::Class(0),
            SemanticTarget::Void,
            SemanticTarget::Class(2),
            SemanticTarget::Soft(vec![0.2, 0.5, 0.3]),
        ];
        let eval = |p: &FieldParams<f64>| {
            loss_and_gradient(p, &rays, &rgb, &sem, &cfg, 0.7, Sampling::Fixed { coarse: &coarse, fine: &fine }).unwrap()
        };
        let (_, g) = eval(&params);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, &gi) in g.iter().enumerate() {
            let mut p = params.clone();
            p.values[i] += h;
            let up = eval(&p).0.total;
            p.values[i] -= 2.0 * h;
            let down = eval(&p).0.total;
            let num = (up - down) / (2.0 * h);
            let rel = (gi - num).abs() / gi.abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..2 {
            let e = check_gradient(seed);
            assert!(e < 1e-4, "seed {seed}: max relative error {e}");
        }
    }

    #[test]
    fn zero_lambda_leaves_semantic_heads_untouched() {
        let params = FieldParams::<f64>::init(tiny_config(4), 3).unwrap();
        let bounds = RayBounds::new(0.5, 3.0).unwrap();
        let cfg = RenderConfig { n_coarse: 6, n_fine: 6, bounds, normalize_depth: false };
        let rays = vec![Ray::new(Vec3::zeros(), Vec3::new(0.1, 0.2, -1.0), bounds).unwrap()];
        let (_, g) = loss_and_gradient(
            &params,
            &rays,
            &[[0.5, 0.5, 0.5]],
            &[SemanticTarget::Class(1)],
            &cfg,
            0.0,
            Sampling::Deterministic,
        )
        .unwrap();
        for r in params.semantic_ranges() {
            assert!(g[r].iter().all(|&v| v == 0.0));
        }
        assert!(g[params.segment_range(Net::Fine)].iter().any(|&v| v != 0.0));
    }
}
