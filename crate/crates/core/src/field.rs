//! The implicit scene function: positional encoding plus coarse and fine
//! MLPs mapping a position and viewing direction to density, colour and
//! semantic logits, with hand-derived reverse-mode gradients.
//!
//! Topology per network:
//!
//! ```text
//! PE(x) -> FC+ReLU x depth (PE(x) re-injected at `skip_layer`) -> h
//! h -> FC -> density activation                  = sigma
//! h -> FC+ReLU (head width) -> FC                = semantic logits
//! h -> FC (feature) ++ PE(d) -> FC+ReLU -> FC -> sigmoid = rgb
//! ```
//!
//! Density and logits never see the direction, so they are view-invariant by
//! construction.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_column_sums, Real};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Frequency count for positions.
    pub pos_freqs: usize,
    /// Frequency count for viewing directions.
    pub dir_freqs: usize,
    /// Prepend the raw coordinates to the sin/cos features.
    pub include_input: bool,
    /// Positions are multiplied by this before encoding; maps the scene into
    /// roughly unit range so the lowest frequency spans the whole room.
    #[serde(default = "one")]
    pub position_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl EncodingConfig {
    pub fn encoded_len(n: usize, freqs: usize, include_input: bool) -> usize {
        n * (include_input as usize + 2 * freqs)
    }

    pub fn pos_len(&self) -> usize {
        Self::encoded_len(3, self.pos_freqs, self.include_input)
    }

    pub fn dir_len(&self) -> usize {
        Self::encoded_len(3, self.dir_freqs, self.include_input)
    }
}

/// `[v] ++ [sin(2^k pi v), cos(2^k pi v)]` for `k = 0..freqs`, appended to `out`.
pub fn positional_encode_into<F: Real>(v: &[F], freqs: usize, include_input: bool, out: &mut Vec<F>) {
    if include_input {
        out.extend_from_slice(v);
    }
    let pi = F::lit(std::f64::consts::PI);
    let mut scale = pi;
    for _ in 0..freqs {
        out.extend(v.iter().map(|&x| (x * scale).sin()));
        out.extend(v.iter().map(|&x| (x * scale).cos()));
        scale = scale + scale;
    }
}

pub fn positional_encode<F: Real>(v: &[F], freqs: usize, include_input: bool) -> Vec<F> {
    let mut out = Vec::with_capacity(EncodingConfig::encoded_len(v.len(), freqs, include_input));
    positional_encode_into(v, freqs, include_input, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityActivation {
    Softplus,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub head_width: usize,
    /// Trunk layer whose input is `[h, PE(x)]`; `None` disables the skip.
    pub skip_layer: Option<usize>,
    pub num_classes: usize,
    pub density_activation: DensityActivation,
}

impl FieldConfig {
    /// CPU-sized network: width 64, four trunk layers, 32-wide heads.
    pub fn desk(num_classes: usize) -> Self {
        FieldConfig {
            encoding: EncodingConfig { pos_freqs: 10, dir_freqs: 4, include_input: true, position_scale: 1.0 },
            trunk_width: 64,
            trunk_depth: 4,
            head_width: 32,
            skip_layer: Some(2),
            num_classes,
            density_activation: DensityActivation::Softplus,
        }
    }

    /// The full-size network: width 256, eight trunk layers, 128-wide heads.
    pub fn paper(num_classes: usize) -> Self {
        FieldConfig { trunk_width: 256, trunk_depth: 8, head_width: 128, skip_layer: Some(5), ..Self::desk(num_classes) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk_width == 0 || self.trunk_depth == 0 || self.head_width == 0 {
            return Err(Error::config("network widths and depth must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("field needs at least one class"));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.trunk_depth {
                return Err(Error::config(format!("skip layer {s} must be in 1..{}", self.trunk_depth)));
            }
        }
        if !(self.encoding.position_scale > 0.0) {
            return Err(Error::config("position scale must be positive"));
        }
        Ok(())
    }
}

/// Which of the two networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Net {
    Coarse,
    Fine,
}

/// One fully-connected layer inside a network's parameter segment. Weights
/// are stored `fan_in x fan_out` row-major, followed by `fan_out` biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn weights<'a, F>(&self, seg: &'a [F]) -> &'a [F] {
        &seg[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    fn bias<'a, F>(&self, seg: &'a [F]) -> &'a [F] {
        let start = self.offset + self.fan_in * self.fan_out;
        &seg[start..start + self.fan_out]
    }

    fn split_grad<'a, F>(&self, seg: &'a mut [F]) -> (&'a mut [F], &'a mut [F]) {
        let w = self.fan_in * self.fan_out;
        seg[self.offset..self.offset + w + self.fan_out].split_at_mut(w)
    }
}

/// Shape table of one network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkLayout {
    pub layers: Vec<LayerShape>,
    trunk: Vec<usize>,
    density: usize,
    sem_hidden: usize,
    sem_out: usize,
    feature: usize,
    color_hidden: usize,
    color_out: usize,
}

impl NetworkLayout {
    pub fn new(cfg: &FieldConfig) -> Self {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, fan_in: usize, fan_out: usize| {
            layers.push(LayerShape { name, fan_in, fan_out, offset });
            offset += fan_in * fan_out + fan_out;
            layers.len() - 1
        };
        let (w, hw) = (cfg.trunk_width, cfg.head_width);
        let px = cfg.encoding.pos_len();
        let trunk = (0..cfg.trunk_depth)
            .map(|i| {
                let fan_in = match i {
                    0 => px,
                    i if Some(i) == cfg.skip_layer => w + px,
                    _ => w,
                };
                push(format!("trunk{i}"), fan_in, w)
            })
            .collect();
        let density = push("density".into(), w, 1);
        let sem_hidden = push("semantic_hidden".into(), w, hw);
        let sem_out = push("semantic_out".into(), hw, cfg.num_classes);
        let feature = push("feature".into(), w, w);
        let color_hidden = push("color_hidden".into(), w + cfg.encoding.dir_len(), hw);
        let color_out = push("color_out".into(), hw, 3);
        NetworkLayout { layers, trunk, density, sem_hidden, sem_out, feature, color_hidden, color_out }
    }

    pub fn len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.offset + l.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat ranges (within one network segment) of the semantic head.
    pub fn semantic_ranges(&self) -> Vec<std::ops::Range<usize>> {
        [self.sem_hidden, self.sem_out]
            .iter()
            .map(|&i| self.layers[i].offset..self.layers[i].offset + self.layers[i].len())
            .collect()
    }
}

/// Weights of both networks in one flat vector: coarse segment then fine.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<F> {
    pub config: FieldConfig,
    pub layout: NetworkLayout,
    pub values: Vec<F>,
}

/// Output of the field at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample<F> {
    pub sigma: F,
    pub rgb: [F; 3],
    pub logits: Vec<F>,
}

/// Activations cached by a batched forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct NetTape<F> {
    pub n: usize,
    enc_x: Vec<F>,
    skip_input: Vec<F>,
    trunk_out: Vec<Vec<F>>,
    sigma_raw: Vec<F>,
    pub sigma: Vec<F>,
    sem_hidden: Vec<F>,
    pub logits: Vec<F>,
    color_in: Vec<F>,
    color_hidden: Vec<F>,
    pub rgb: Vec<F>,
}

fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `out = x * W + b` for a batch of `n` rows.
fn dense<F: Real>(layer: &LayerShape, seg: &[F], x: &[F], n: usize, out: &mut Vec<F>) {
    out.clear();
    let bias = layer.bias(seg);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    F::gemm(n, layer.fan_in, layer.fan_out, x, false, layer.weights(seg), false, F::one(), out);
}

fn relu_inplace<F: Real>(v: &mut [F]) {
    for x in v {
        *x = x.max(F::zero());
    }
}

/// Accumulate weight and bias gradients; returns `d_input` when requested.
fn dense_backward<F: Real>(
    layer: &LayerShape,
    seg: &[F],
    grad_seg: &mut [F],
    x: &[F],
    d_out: &[F],
    n: usize,
    want_input_grad: bool,
) -> Option<Vec<F>> {
    let (dw, db) = layer.split_grad(grad_seg);
    F::gemm(layer.fan_in, n, layer.fan_out, x, true, d_out, false, F::one(), dw);
    add_column_sums(d_out, layer.fan_out, db);
    want_input_grad.then(|| {
        let mut dx = vec![F::zero(); n * layer.fan_in];
        F::gemm(n, layer.fan_out, layer.fan_in, d_out, false, layer.weights(seg), true, F::zero(), &mut dx);
        dx
    })
}

/// Row-wise concatenation of `a` (`n x wa`) and `b` (`n x wb`).
fn concat_rows<F: Real>(a: &[F], wa: usize, b: &[F], wb: usize, n: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(n * (wa + wb));
    for i in 0..n {
        out.extend_from_slice(&a[i * wa..(i + 1) * wa]);
        out.extend_from_slice(&b[i * wb..(i + 1) * wb]);
    }
    out
}

/// First `wa` columns of each row of an `n x (wa + wb)` matrix.
fn left_columns<F: Real>(m: &[F], wa: usize, wb: usize, n: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(n * wa);
    for row in m.chunks_exact(wa + wb).take(n) {
        out.extend_from_slice(&row[..wa]);
    }
    out
}

impl<F: Real> FieldParams<F> {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization for both
    /// networks, drawn from an independent stream per seed.
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = NetworkLayout::new(&config);
        let mut rng = rng::derive(seed, "field-init");
        let mut values = Vec::with_capacity(2 * layout.len());
        for _net in 0..2 {
            for layer in &layout.layers {
                let bound = 1.0 / (layer.fan_in as f64).sqrt();
                for _ in 0..layer.len() {
                    values.push(F::lit(rng.random_range(-bound..bound)));
                }
            }
        }
        Ok(FieldParams { config, layout, values })
    }

    pub fn from_values(config: FieldConfig, values: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = NetworkLayout::new(&config);
        if values.len() != 2 * layout.len() {
            return Err(Error::domain(format!(
                "parameter count {} does not match the shape table ({})",
                values.len(),
                2 * layout.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite parameter value"));
        }
        Ok(FieldParams { config, layout, values })
    }

    pub fn cast<G: Real>(&self) -> FieldParams<G> {
        FieldParams {
            config: self.config,
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| G::lit(v.to_f64().unwrap())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Flat range of `net`'s segment.
    pub fn segment_range(&self, net: Net) -> std::ops::Range<usize> {
        let n = self.layout.len();
        match net {
            Net::Coarse => 0..n,
            Net::Fine => n..2 * n,
        }
    }

    /// Flat ranges of both semantic heads.
    pub fn semantic_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        for net in [Net::Coarse, Net::Fine] {
            let base = self.segment_range(net).start;
            for r in self.layout.semantic_ranges() {
                out.push(base + r.start..base + r.end);
            }
        }
        out
    }

    fn segment(&self, net: Net) -> &[F] {
        &self.values[self.segment_range(net)]
    }

    /// Single-point evaluation.
    pub fn forward(&self, net: Net, x: [f64; 3], d: [f64; 3]) -> Result<FieldSample<F>> {
        if x.iter().chain(d.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("field input is not finite"));
        }
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::domain(format!("view direction must be unit length, |d| = {norm}")));
        }
        let tape = self.forward_batch(net, &[x.map(F::lit)], &[d.map(F::lit)]);
        Ok(FieldSample { sigma: tape.sigma[0], rgb: [tape.rgb[0], tape.rgb[1], tape.rgb[2]], logits: tape.logits })
    }

    /// Batched forward pass over `positions.len()` samples.
    pub fn forward_batch(&self, net: Net, positions: &[[F; 3]], dirs: &[[F; 3]]) -> NetTape<F> {
        assert_eq!(positions.len(), dirs.len());
        let n = positions.len();
        let cfg = &self.config;
        let enc = &cfg.encoding;
        let lay = &self.layout;
        let seg = self.segment(net);
        let (w, hw, c) = (cfg.trunk_width, cfg.head_width, cfg.num_classes);
        let (px, pd) = (enc.pos_len(), enc.dir_len());

        let scale = F::lit(enc.position_scale);
        let mut enc_x = Vec::with_capacity(n * px);
        let mut enc_d = Vec::with_capacity(n * pd);
        for (p, d) in positions.iter().zip(dirs) {
            positional_encode_into(&p.map(|v| v * scale), enc.pos_freqs, enc.include_input, &mut enc_x);
            positional_encode_into(d, enc.dir_freqs, enc.include_input, &mut enc_d);
        }

        let mut trunk_out: Vec<Vec<F>> = Vec::with_capacity(cfg.trunk_depth);
        let mut skip_input = Vec::new();
        for (i, &li) in lay.trunk.iter().enumerate() {
            let mut out = Vec::new();
            if i == 0 {
                dense(&lay.layers[li], seg, &enc_x, n, &mut out);
            } else if Some(i) == cfg.skip_layer {
                skip_input = concat_rows(&trunk_out[i - 1], w, &enc_x, px, n);
                dense(&lay.layers[li], seg, &skip_input, n, &mut out);
            } else {
                dense(&lay.layers[li], seg, &trunk_out[i - 1], n, &mut out);
            }
            relu_inplace(&mut out);
            trunk_out.push(out);
        }
        let h = trunk_out.last().unwrap();

        let mut sigma_raw = Vec::new();
        dense(&lay.layers[lay.density], seg, h, n, &mut sigma_raw);
        let sigma = sigma_raw
            .iter()
            .map(|&r| match cfg.density_activation {
                DensityActivation::Softplus => softplus(r),
                DensityActivation::Relu => r.max(F::zero()),
            })
            .collect();

        let mut sem_hidden = Vec::new();
        dense(&lay.layers[lay.sem_hidden], seg, h, n, &mut sem_hidden);
        relu_inplace(&mut sem_hidden);
        let mut logits = Vec::new();
        dense(&lay.layers[lay.sem_out], seg, &sem_hidden, n, &mut logits);
        debug_assert_eq!(logits.len(), n * c);

        let mut feature = Vec::new();
        dense(&lay.layers[lay.feature], seg, h, n, &mut feature);
        let color_in = concat_rows(&feature, w, &enc_d, pd, n);
        let mut color_hidden = Vec::new();
        dense(&lay.layers[lay.color_hidden], seg, &color_in, n, &mut color_hidden);
        relu_inplace(&mut color_hidden);
        let mut rgb = Vec::new();
        dense(&lay.layers[lay.color_out], seg, &color_hidden, n, &mut rgb);
        for v in &mut rgb {
            *v = sigmoid(*v);
        }
        debug_assert_eq!(color_hidden.len(), n * hw);

        NetTape {
            n,
            enc_x,
            skip_input,
            trunk_out,
            sigma_raw,
            sigma,
            sem_hidden,
            logits,
            color_in,
            color_hidden,
            rgb,
        }
    }

    /// Reverse pass: accumulate `d loss / d params` of `net` into `grad`
    /// (the full two-network gradient vector) given the loss gradients with
    /// respect to each sample's density, colour and logits.
    pub fn backward_batch(
        &self,
        net: Net,
        tape: &NetTape<F>,
        d_sigma: &[F],
        d_rgb: &[F],
        d_logits: &[F],
        grad: &mut [F],
    ) {
        let n = tape.n;
        let cfg = &self.config;
        let lay = &self.layout;
        let seg = self.segment(net);
        let grad_seg = &mut grad[self.segment_range(net)];
        let (w, c) = (cfg.trunk_width, cfg.num_classes);
        let (px, pd) = (cfg.encoding.pos_len(), cfg.encoding.dir_len());
        assert_eq!(d_sigma.len(), n);
        assert_eq!(d_rgb.len(), 3 * n);
        assert_eq!(d_logits.len(), c * n);
        let h = tape.trunk_out.last().unwrap();

        // Colour branch.
        let d_rgb_raw: Vec<F> = d_rgb.iter().zip(&tape.rgb).map(|(&g, &y)| g * y * (F::one() - y)).collect();
        let mut d_ch = dense_backward(&lay.layers[lay.color_out], seg, grad_seg, &tape.color_hidden, &d_rgb_raw, n, true)
            .unwrap();
        mask_relu(&mut d_ch, &tape.color_hidden);
        let d_color_in =
            dense_backward(&lay.layers[lay.color_hidden], seg, grad_seg, &tape.color_in, &d_ch, n, true).unwrap();
        let d_feature = left_columns(&d_color_in, w, pd, n);
        let mut d_h = dense_backward(&lay.layers[lay.feature], seg, grad_seg, h, &d_feature, n, true).unwrap();

        // Semantic branch.
        let mut d_sh =
            dense_backward(&lay.layers[lay.sem_out], seg, grad_seg, &tape.sem_hidden, d_logits, n, true).unwrap();
        mask_relu(&mut d_sh, &tape.sem_hidden);
        let d_h_sem = dense_backward(&lay.layers[lay.sem_hidden], seg, grad_seg, h, &d_sh, n, true).unwrap();
        add_assign(&mut d_h, &d_h_sem);

        // Density branch.
        let d_raw: Vec<F> = d_sigma
            .iter()
            .zip(&tape.sigma_raw)
            .map(|(&g, &r)| match cfg.density_activation {
                DensityActivation::Softplus => g * sigmoid(r),
                DensityActivation::Relu => {
                    if r > F::zero() {
                        g
                    } else {
                        F::zero()
                    }
                }
            })
            .collect();
        let d_h_sigma = dense_backward(&lay.layers[lay.density], seg, grad_seg, h, &d_raw, n, true).unwrap();
        add_assign(&mut d_h, &d_h_sigma);

        // Trunk, last layer first.
        let mut d_out = d_h;
        for i in (0..cfg.trunk_depth).rev() {
            mask_relu(&mut d_out, &tape.trunk_out[i]);
            let layer = &lay.layers[lay.trunk[i]];
            let input: &[F] = if i == 0 {
                &tape.enc_x
            } else if Some(i) == cfg.skip_layer {
                &tape.skip_input
            } else {
                &tape.trunk_out[i - 1]
            };
            let d_in = dense_backward(layer, seg, grad_seg, input, &d_out, n, i > 0);
            if let Some(d_in) = d_in {
                d_out = if Some(i) == cfg.skip_layer { left_columns(&d_in, w, px, n) } else { d_in };
            }
        }
    }
}

fn mask_relu<F: Real>(grad: &mut [F], activated: &[F]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= F::zero() {
            *g = F::zero();
        }
    }
}

fn add_assign<F: Real>(a: &mut [F], b: &[F]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x = *x + y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(c: usize) -> FieldConfig {
        FieldConfig {
            encoding: EncodingConfig { pos_freqs: 3, dir_freqs: 2, include_input: true, position_scale: 0.5 },
            trunk_width: 8,
            trunk_depth: 3,
            head_width: 6,
            skip_layer: Some(2),
            num_classes: c,
            density_activation: DensityActivation::Softplus,
        }
    }

    #[test]
    fn encoding_of_zero_is_zero_sines_and_unit_cosines() {
        let e = positional_encode(&[0.0f64; 3], 4, false);
        assert_eq!(e.len(), 24);
        for k in 0..4 {
            assert!(e[6 * k..6 * k + 3].iter().all(|&v| v == 0.0));
            assert!(e[6 * k + 3..6 * k + 6].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn encoding_lengths_and_identity() {
        assert_eq!(positional_encode(&[0.1f64, 0.2, 0.3], 10, true).len(), 63);
        assert_eq!(positional_encode(&[0.1f64, 0.2, 0.3], 0, true), vec![0.1, 0.2, 0.3]);
        let e = positional_encode(&[0.25f64], 2, false);
        let pi = std::f64::consts::PI;
        let expect = [(0.25 * pi).sin(), (0.25 * pi).cos(), (0.5 * pi).sin(), (0.5 * pi).cos()];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn desk_layout_parameter_count() {
        let layout = NetworkLayout::new(&FieldConfig::desk(7));
        let expected = (63 * 64 + 64) + (64 * 64 + 64) + (127 * 64 + 64) + (64 * 64 + 64)
            + (64 + 1)
            + (64 * 32 + 32)
            + (32 * 7 + 7)
            + (64 * 64 + 64)
            + (91 * 32 + 32)
            + (32 * 3 + 3);
        assert_eq!(layout.len(), expected);
        let p = FieldParams::<f32>::init(FieldConfig::desk(7), 0).unwrap();
        assert_eq!(p.len(), 2 * expected);
    }

    #[test]
    fn density_and_logits_ignore_direction() {
        let p = FieldParams::<f64>::init(tiny(4), 3).unwrap();
        let x = [0.3, -0.1, 0.7];
        let a = p.forward(Net::Fine, x, [1.0, 0.0, 0.0]).unwrap();
        let b = p.forward(Net::Fine, x, [0.0, 0.6, 0.8]).unwrap();
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.logits, b.logits);
        assert_ne!(a.rgb, b.rgb);
    }

    #[test]
    fn non_finite_or_non_unit_input_is_rejected() {
        let p = FieldParams::<f64>::init(tiny(2), 0).unwrap();
        assert!(p.forward(Net::Coarse, [f64::NAN, 0.0, 0.0], [1.0, 0.0, 0.0]).is_err());
        assert!(p.forward(Net::Coarse, [0.0; 3], [2.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn relu_density_option_is_nonnegative() {
        let mut cfg = tiny(3);
        cfg.density_activation = DensityActivation::Relu;
        let p = FieldParams::<f64>::init(cfg, 1).unwrap();
        for i in 0..50 {
            let s = p.forward(Net::Coarse, [i as f64 * 0.1 - 2.0, 0.3, -0.4], [0.0, 0.0, 1.0]).unwrap();
            assert!(s.sigma >= 0.0);
        }
    }

    #[test]
    fn batched_and_single_point_agree() {
        let p = FieldParams::<f64>::init(tiny(3), 5).unwrap();
        let xs = [[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0], [0.0, 0.0, 0.0]];
        let d = [0.0, 1.0, 0.0];
        let tape = p.forward_batch(Net::Coarse, &xs, &[d; 3]);
        for (i, x) in xs.iter().enumerate() {
            let s = p.forward(Net::Coarse, *x, d).unwrap();
            assert!((s.sigma - tape.sigma[i]).abs() < 1e-12);
            assert!((s.logits[2] - tape.logits[3 * i + 2]).abs() < 1e-12);
        }
    }

    #[test]
    fn from_values_checks_shape_and_finiteness() {
        let p = FieldParams::<f64>::init(tiny(3), 5).unwrap();
        assert!(FieldParams::from_values(p.config, p.values[1..].to_vec()).is_err());
        let mut bad = p.values.clone();
        bad[0] = f64::INFINITY;
        assert!(FieldParams::from_values(p.config, bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn fresh_network_outputs_are_in_range(seed in 0u64..50, x in prop::array::uniform3(-5.0f64..5.0),
                                              theta in 0.0f64..std::f64::consts::PI, phi in 0.0f64..std::f64::consts::TAU) {
            let p = FieldParams::<f64>::init(tiny(5), seed).unwrap();
            let d = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
            let s = p.forward(Net::Fine, x, d).unwrap();
            prop_assert!(s.sigma >= 0.0 && s.sigma.is_finite());
            prop_assert!(s.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(s.logits.iter().all(|v| v.is_finite()));
        }
    }
}
