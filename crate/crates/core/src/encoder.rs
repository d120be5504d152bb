//! Stacked-GRU encoder: maps feature windows to unit-norm embeddings, or to
//! class logits in the baseline classification mode.
//!
//! The network is implemented from scratch with exact reverse-mode gradients
//! (checked against finite differences in the test suites). Parameters and
//! inference run in binary32; the same code instantiates at binary64 for the
//! gradient-check harness.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, FEATURE_DIM};
use crate::numeric::Real;
use crate::util::rng_from;

/// Windows per forward chunk when embedding long sequences. Fixed so that
/// results do not depend on the worker count.
const EMBED_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    Embedding,
    Classification,
}

impl EncoderMode {
    pub fn tag(self) -> &'static str {
        match self {
            EncoderMode::Embedding => "embedding",
            EncoderMode::Classification => "classification",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub input_dim: usize,
    pub gru_layers: usize,
    pub gru_layer_size: usize,
    pub gru_dropout: f32,
    /// Output dimensionality n in embedding mode.
    pub embedding_dim: usize,
    /// Class count in classification mode.
    pub num_classes: usize,
    pub window_len: usize,
}

impl Default for EncoderConfig {
    /// The selected embedding-model configuration: 3 GRU layers of 450
    /// units, dropout 0.28, 192-dimensional embeddings over 500-frame
    /// windows of 18 features.
    fn default() -> Self {
        EncoderConfig {
            mode: EncoderMode::Embedding,
            input_dim: FEATURE_DIM,
            gru_layers: 3,
            gru_layer_size: 450,
            gru_dropout: 0.28,
            embedding_dim: 192,
            num_classes: 0,
            window_len: 500,
        }
    }
}

impl EncoderConfig {
    pub fn classifier_default(num_classes: usize) -> Self {
        // selected baseline configuration: 4 x 200, dropout 0.19
        EncoderConfig {
            mode: EncoderMode::Classification,
            input_dim: FEATURE_DIM,
            gru_layers: 4,
            gru_layer_size: 200,
            gru_dropout: 0.19,
            embedding_dim: 0,
            num_classes,
            window_len: 500,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.mode {
            EncoderMode::Embedding => self.embedding_dim,
            EncoderMode::Classification => self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.gru_layers == 0 || self.gru_layer_size == 0 {
            return Err(Error::Config(
                "encoder dimensions must all be positive".into(),
            ));
        }
        if self.window_len == 0 {
            return Err(Error::Config("window_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gru_dropout) {
            return Err(Error::Config(format!(
                "gru_dropout must be in [0, 1), got {}",
                self.gru_dropout
            )));
        }
        match self.mode {
            EncoderMode::Embedding if self.embedding_dim == 0 => {
                Err(Error::Config("embedding_dim must be positive".into()))
            }
            EncoderMode::Classification if self.num_classes < 2 => Err(Error::Config(
                "classification needs at least 2 classes".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Out-of-search-space settings are legal but worth flagging.
    pub fn search_space_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !(1..=4).contains(&self.gru_layers) {
            w.push(format!("gru_layers {} outside search space [1, 4]", self.gru_layers));
        }
        if !(100..=500).contains(&self.gru_layer_size) {
            w.push(format!(
                "gru_layer_size {} outside search space [100, 500]",
                self.gru_layer_size
            ));
        }
        if self.gru_dropout > 0.4 {
            w.push(format!("gru_dropout {} outside search space [0, 0.4]", self.gru_dropout));
        }
        if self.mode == EncoderMode::Embedding && !(32..=320).contains(&self.embedding_dim) {
            w.push(format!(
                "embedding_dim {} outside search space [32, 320]",
                self.embedding_dim
            ));
        }
        w
    }
}

/// Per-feature standardization statistics, computed on the training split
/// and stored with the model so inference is self-contained.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        FeatureStats { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn compute<'a, I: IntoIterator<Item = &'a FeatureSequence>>(seqs: I) -> Self {
        let mut sum = vec![0.0f64; FEATURE_DIM];
        let mut sumsq = vec![0.0f64; FEATURE_DIM];
        let mut count = 0usize;
        for seq in seqs {
            for row in seq.rows.rows() {
                for (c, v) in row.iter().enumerate() {
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
            }
            count += seq.len();
        }
        let n = count.max(1) as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(&sumsq)
            .map(|(s, sq)| {
                let m = s / n;
                let var = (sq / n - m * m).max(0.0);
                (var.sqrt().max(1e-6)) as f32
            })
            .collect();
        FeatureStats { mean, std }
    }
}

/// One GRU layer's parameters. Gate rows are stacked [reset; update;
/// candidate] in the leading dimension of the weight matrices.
#[derive(Clone, Debug)]
pub struct GruLayer<F> {
    pub w_ih: Array2<F>, // (3H, I)
    pub w_hh: Array2<F>, // (3H, H)
    pub b_ih: Array1<F>, // (3H)
    pub b_hh: Array1<F>, // (3H)
}

/// The full network: stacked GRU layers plus a linear head. Embedding mode
/// L2-normalizes the head output onto the unit sphere.
#[derive(Clone, Debug)]
pub struct GruStack<F> {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub normalize: bool,
    pub dropout: f64,
    pub layers: Vec<GruLayer<F>>,
    pub head_w: Array2<F>, // (O, H)
    pub head_b: Array1<F>, // (O)
}

/// Gradients in the same shapes as [`GruStack`] parameters.
#[derive(Clone, Debug)]
pub struct GruGrads<F> {
    pub layers: Vec<GruLayer<F>>,
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

struct LayerCache<F> {
    x: Array3<F>,   // (T, B, I)
    h: Array3<F>,   // (T+1, B, H)
    r: Array3<F>,   // (T, B, H)
    z: Array3<F>,   // (T, B, H)
    n: Array3<F>,   // (T, B, H)
    ghn: Array3<F>, // (T, B, H)
}

/// Intermediate activations recorded by a training-mode forward pass.
pub struct ForwardCache<F> {
    layers: Vec<LayerCache<F>>,
    masks: Vec<Array3<F>>,
    out_norm: Array1<F>,
    pub output: Array2<F>,
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> GruStack<F> {
    /// Deterministic initialization: every parameter uniform in
    /// (-1/sqrt(h), 1/sqrt(h)) with h the layer's hidden size.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<GruStack<F>> {
        config.validate()?;
        let mut rng = rng_from(seed, "encoder-init");
        let h = config.gru_layer_size;
        let bound = 1.0 / (h as f64).sqrt();
        let mut uniform = |shape: (usize, usize)| -> Array2<F> {
            Array2::from_shape_fn(shape, |_| {
                F::from_f64(rng.random_range(-bound..bound))
            })
        };
        let mut layers = Vec::with_capacity(config.gru_layers);
        for l in 0..config.gru_layers {
            let input = if l == 0 { config.input_dim } else { h };
            let w_ih = uniform((3 * h, input));
            let w_hh = uniform((3 * h, h));
            let b_ih = uniform((3 * h, 1)).remove_axis(Axis(1));
            let b_hh = uniform((3 * h, 1)).remove_axis(Axis(1));
            layers.push(GruLayer { w_ih, w_hh, b_ih, b_hh });
        }
        let head_w = uniform((config.output_dim(), h));
        let head_b = uniform((config.output_dim(), 1)).remove_axis(Axis(1));
        Ok(GruStack {
            input_dim: config.input_dim,
            hidden: h,
            output_dim: config.output_dim(),
            normalize: config.mode == EncoderMode::Embedding,
            dropout: f64::from(config.gru_dropout),
            layers,
            head_w,
            head_b,
        })
    }

    /// Inference pass over a batch laid out as (T, B, input_dim).
    pub fn forward(&self, input: &Array3<F>) -> Result<Array2<F>> {
        let (t_len, batch, _) = input.dim();
        let mut x = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = Array2::zeros((batch, self.hidden));
            let mut out = Array3::zeros((t_len, batch, self.hidden));
            for t in 0..t_len {
                let (h_new, ..) = gru_step(layer, &x.index_axis(Axis(0), t).to_owned(), &h, self.hidden);
                out.index_axis_mut(Axis(0), t).assign(&h_new);
                h = h_new;
            }
            check_finite(&h, l)?;
            x = out;
        }
        let h_final = x.index_axis(Axis(0), t_len - 1).to_owned();
        let out_lin = h_final.dot(&self.head_w.t()) + &self.head_b;
        if self.normalize {
            Ok(normalize_rows(&out_lin).0)
        } else {
            Ok(out_lin)
        }
    }

    /// Training pass: applies inter-layer dropout using `rng` and records
    /// every activation needed by [`GruStack::backward`].
    pub fn forward_train(
        &self,
        input: &Array3<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<F>, ForwardCache<F>)> {
        let (t_len, batch, _) = input.dim();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::new();
        let mut x = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = Array2::<F>::zeros((batch, self.hidden));
            let mut cache = LayerCache {
                x: x.clone(),
                h: Array3::zeros((t_len + 1, batch, self.hidden)),
                r: Array3::zeros((t_len, batch, self.hidden)),
                z: Array3::zeros((t_len, batch, self.hidden)),
                n: Array3::zeros((t_len, batch, self.hidden)),
                ghn: Array3::zeros((t_len, batch, self.hidden)),
            };
            let mut out = Array3::zeros((t_len, batch, self.hidden));
            for t in 0..t_len {
                let x_t = x.index_axis(Axis(0), t).to_owned();
                let (h_new, r, z, n, ghn) = gru_step(layer, &x_t, &h, self.hidden);
                cache.h.index_axis_mut(Axis(0), t + 1).assign(&h_new);
                cache.r.index_axis_mut(Axis(0), t).assign(&r);
                cache.z.index_axis_mut(Axis(0), t).assign(&z);
                cache.n.index_axis_mut(Axis(0), t).assign(&n);
                cache.ghn.index_axis_mut(Axis(0), t).assign(&ghn);
                out.index_axis_mut(Axis(0), t).assign(&h_new);
                h = h_new;
            }
            check_finite(&h, l)?;
            caches.push(cache);
            x = out;
            // inverted dropout between layers, never after the top layer
            if l + 1 < self.layers.len() && self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let scale = F::from_f64(1.0 / keep);
                let mask = Array3::from_shape_fn(x.dim(), |_| {
                    if rng.random::<f64>() < keep { scale } else { F::zero() }
                });
                x = &x * &mask;
                masks.push(mask);
            }
        }
        let h_final = x.index_axis(Axis(0), t_len - 1).to_owned();
        let out_lin = h_final.dot(&self.head_w.t()) + &self.head_b;
        let (output, out_norm) = if self.normalize {
            normalize_rows(&out_lin)
        } else {
            (out_lin, Array1::zeros(batch))
        };
        let cache = ForwardCache { layers: caches, masks, out_norm, output: output.clone() };
        Ok((output, cache))
    }

    /// Exact reverse-mode gradients for the pass recorded in `cache`.
    /// Returns parameter gradients and the gradient w.r.t. the input batch.
    pub fn backward(&self, cache: &ForwardCache<F>, grad_output: ArrayView2<F>) -> (GruGrads<F>, Array3<F>) {
        let t_len = cache.layers[0].x.dim().0;
        let batch = cache.layers[0].x.dim().1;
        let h_dim = self.hidden;

        // head (with L2 normalization Jacobian in embedding mode)
        let d_out_lin = if self.normalize {
            let mut d = Array2::zeros(grad_output.dim());
            for b in 0..batch {
                let y = cache.output.row(b);
                let g = grad_output.row(b);
                let gy = g.dot(&y);
                let norm = cache.out_norm[b];
                let mut dr = d.row_mut(b);
                for i in 0..y.len() {
                    dr[i] = (g[i] - gy * y[i]) / norm;
                }
            }
            d
        } else {
            grad_output.to_owned()
        };
        // input to the head is the top layer's (post-dropout-free) final state
        let top = self.layers.len() - 1;
        let h_top_final = cache.layers[top].h.index_axis(Axis(0), t_len).to_owned();
        let head_w_grad = d_out_lin.t().dot(&h_top_final);
        let head_b_grad = d_out_lin.sum_axis(Axis(0));

        let mut layer_grads: Vec<GruLayer<F>> = self
            .layers
            .iter()
            .map(|l| GruLayer {
                w_ih: Array2::zeros(l.w_ih.dim()),
                w_hh: Array2::zeros(l.w_hh.dim()),
                b_ih: Array1::zeros(l.b_ih.dim()),
                b_hh: Array1::zeros(l.b_hh.dim()),
            })
            .collect();

        // gradient flowing into each layer's output sequence
        let mut d_out_seq = Array3::<F>::zeros((t_len, batch, h_dim));
        {
            let mut last = d_out_seq.index_axis_mut(Axis(0), t_len - 1);
            last.assign(&d_out_lin.dot(&self.head_w));
        }

        let mut d_input = Array3::zeros((0, 0, 0));
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let lc = &cache.layers[l];
            let grads = &mut layer_grads[l];
            let input_dim = lc.x.dim().2;
            let mut dx_seq = Array3::<F>::zeros((t_len, batch, input_dim));
            let mut dh_next = Array2::<F>::zeros((batch, h_dim));
            for t in (0..t_len).rev() {
                let dh = &d_out_seq.index_axis(Axis(0), t).to_owned() + &dh_next;
                let r = lc.r.index_axis(Axis(0), t);
                let z = lc.z.index_axis(Axis(0), t);
                let n = lc.n.index_axis(Axis(0), t);
                let ghn = lc.ghn.index_axis(Axis(0), t);
                let h_prev = lc.h.index_axis(Axis(0), t);
                let x_t = lc.x.index_axis(Axis(0), t);

                let one = F::one();
                let mut d_gi = Array2::<F>::zeros((batch, 3 * h_dim));
                let mut d_gh = Array2::<F>::zeros((batch, 3 * h_dim));
                let mut dh_direct = Array2::<F>::zeros((batch, h_dim));
                for b in 0..batch {
                    for i in 0..h_dim {
                        let dh_v = dh[[b, i]];
                        let z_v = z[[b, i]];
                        let n_v = n[[b, i]];
                        let r_v = r[[b, i]];
                        let ghn_v = ghn[[b, i]];
                        let dn = dh_v * (one - z_v);
                        let dz = dh_v * (h_prev[[b, i]] - n_v);
                        let dpre_n = dn * (one - n_v * n_v);
                        let dr = dpre_n * ghn_v;
                        let d_ghn = dpre_n * r_v;
                        let dpre_r = dr * r_v * (one - r_v);
                        let dpre_z = dz * z_v * (one - z_v);
                        d_gi[[b, i]] = dpre_r;
                        d_gi[[b, h_dim + i]] = dpre_z;
                        d_gi[[b, 2 * h_dim + i]] = dpre_n;
                        d_gh[[b, i]] = dpre_r;
                        d_gh[[b, h_dim + i]] = dpre_z;
                        d_gh[[b, 2 * h_dim + i]] = d_ghn;
                        dh_direct[[b, i]] = dh_v * z_v;
                    }
                }
                grads.w_ih = &grads.w_ih + &d_gi.t().dot(&x_t);
                grads.w_hh = &grads.w_hh + &d_gh.t().dot(&h_prev);
                grads.b_ih = &grads.b_ih + &d_gi.sum_axis(Axis(0));
                grads.b_hh = &grads.b_hh + &d_gh.sum_axis(Axis(0));
                dx_seq.index_axis_mut(Axis(0), t).assign(&d_gi.dot(&layer.w_ih));
                dh_next = dh_direct + d_gh.dot(&layer.w_hh);
            }
            if l == 0 {
                d_input = dx_seq;
            } else {
                // undo the dropout between layer l-1 and l
                if !cache.masks.is_empty() && self.dropout > 0.0 {
                    d_out_seq = &dx_seq * &cache.masks[l - 1];
                } else {
                    d_out_seq = dx_seq;
                }
            }
        }

        (
            GruGrads { layers: layer_grads, head_w: head_w_grad, head_b: head_b_grad },
            d_input,
        )
    }

    pub fn flat_len(&self) -> usize {
        self.segments().last().map_or(0, |(_, r)| r.end)
    }

    /// Named spans of each tensor within the flattened parameter vector.
    pub fn segments(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut at = 0usize;
        let mut push = |name: String, len: usize, at: &mut usize| {
            out.push((name, *at..*at + len));
            *at += len;
        };
        for (l, layer) in self.layers.iter().enumerate() {
            push(format!("layer{l}.w_ih"), layer.w_ih.len(), &mut at);
            push(format!("layer{l}.w_hh"), layer.w_hh.len(), &mut at);
            push(format!("layer{l}.b_ih"), layer.b_ih.len(), &mut at);
            push(format!("layer{l}.b_hh"), layer.b_hh.len(), &mut at);
        }
        push("head.w".into(), self.head_w.len(), &mut at);
        push("head.b".into(), self.head_b.len(), &mut at);
        out
    }

    pub fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.flat_len());
        for layer in &self.layers {
            out.extend(layer.w_ih.iter().copied());
            out.extend(layer.w_hh.iter().copied());
            out.extend(layer.b_ih.iter().copied());
            out.extend(layer.b_hh.iter().copied());
        }
        out.extend(self.head_w.iter().copied());
        out.extend(self.head_b.iter().copied());
        out
    }

    pub fn load_flat(&mut self, data: &[F]) {
        let mut at = 0usize;
        fn take2<F: Real>(dst: &mut Array2<F>, data: &[F], at: &mut usize) {
            for v in dst.iter_mut() {
                *v = data[*at];
                *at += 1;
            }
        }
        fn take1<F: Real>(dst: &mut Array1<F>, data: &[F], at: &mut usize) {
            for v in dst.iter_mut() {
                *v = data[*at];
                *at += 1;
            }
        }
        for layer in &mut self.layers {
            take2(&mut layer.w_ih, data, &mut at);
            take2(&mut layer.w_hh, data, &mut at);
            take1(&mut layer.b_ih, data, &mut at);
            take1(&mut layer.b_hh, data, &mut at);
        }
        take2(&mut self.head_w, data, &mut at);
        take1(&mut self.head_b, data, &mut at);
        debug_assert_eq!(at, data.len());
    }
}

impl<F: Real> GruGrads<F> {
    pub fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.w_ih.iter().copied());
            out.extend(layer.w_hh.iter().copied());
            out.extend(layer.b_ih.iter().copied());
            out.extend(layer.b_hh.iter().copied());
        }
        out.extend(self.head_w.iter().copied());
        out.extend(self.head_b.iter().copied());
        out
    }
}

fn gru_step<F: Real>(
    layer: &GruLayer<F>,
    x_t: &Array2<F>,
    h_prev: &Array2<F>,
    h_dim: usize,
) -> (Array2<F>, Array2<F>, Array2<F>, Array2<F>, Array2<F>) {
    let gi = x_t.dot(&layer.w_ih.t()) + &layer.b_ih;
    let gh = h_prev.dot(&layer.w_hh.t()) + &layer.b_hh;
    let batch = x_t.dim().0;
    let mut r = Array2::zeros((batch, h_dim));
    let mut z = Array2::zeros((batch, h_dim));
    let mut n = Array2::zeros((batch, h_dim));
    let mut ghn = Array2::zeros((batch, h_dim));
    let mut h = Array2::zeros((batch, h_dim));
    let one = F::one();
    for b in 0..batch {
        for i in 0..h_dim {
            let r_v = sigmoid(gi[[b, i]] + gh[[b, i]]);
            let z_v = sigmoid(gi[[b, h_dim + i]] + gh[[b, h_dim + i]]);
            let ghn_v = gh[[b, 2 * h_dim + i]];
            let n_v = (gi[[b, 2 * h_dim + i]] + r_v * ghn_v).tanh();
            r[[b, i]] = r_v;
            z[[b, i]] = z_v;
            ghn[[b, i]] = ghn_v;
            n[[b, i]] = n_v;
            h[[b, i]] = (one - z_v) * n_v + z_v * h_prev[[b, i]];
        }
    }
    (h, r, z, n, ghn)
}

fn check_finite<F: Real>(h: &Array2<F>, layer: usize) -> Result<()> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite activation in GRU layer {layer}"
        )));
    }
    Ok(())
}

/// Row-wise L2 normalization; returns the normalized rows and the norms.
pub(crate) fn normalize_rows<F: Real>(x: &Array2<F>) -> (Array2<F>, Array1<F>) {
    let mut out = x.clone();
    let mut norms = Array1::zeros(x.nrows());
    for (b, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|v| *v * *v).sum::<F>().sqrt().max(F::from_f64(1e-12));
        norms[b] = norm;
        row.mapv_inplace(|v| v / norm);
    }
    (out, norms)
}

/// A trained model: network parameters plus the preprocessing statistics
/// and (in classification mode) the class-name table.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub stats: FeatureStats,
    pub classes: Vec<String>,
    pub stack: GruStack<f32>,
}

impl EncoderModel {
    pub fn init(config: EncoderConfig, stats: FeatureStats, seed: u64) -> Result<EncoderModel> {
        if stats.mean.len() != config.input_dim || stats.std.len() != config.input_dim {
            return Err(Error::Config(format!(
                "standardization statistics have {} features, encoder expects {}",
                stats.mean.len(),
                config.input_dim
            )));
        }
        let stack = GruStack::init(&config, seed)?;
        Ok(EncoderModel { config, stats, classes: Vec::new(), stack })
    }

    /// Standardizes window slices into the (T, B, D) batch layout.
    pub fn assemble_batch(&self, windows: &[ArrayView2<f64>]) -> Result<Array3<f32>> {
        let t_len = self.config.window_len;
        let d = self.config.input_dim;
        for w in windows {
            if w.dim() != (t_len, d) {
                return Err(Error::Shape(format!(
                    "window is {:?}, model expects ({t_len}, {d})",
                    w.dim()
                )));
            }
        }
        let mut out = Array3::zeros((t_len, windows.len(), d));
        for (b, w) in windows.iter().enumerate() {
            for t in 0..t_len {
                for c in 0..d {
                    out[[t, b, c]] =
                        (w[[t, c]] as f32 - self.stats.mean[c]) / self.stats.std[c];
                }
            }
        }
        Ok(out)
    }

    /// Forward pass over feature windows. With `train_mode` the inter-layer
    /// dropout draws masks from `rng`; inference is deterministic.
    pub fn forward(
        &self,
        windows: &[ArrayView2<f64>],
        train_mode: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array2<f32>> {
        let batch = self.assemble_batch(windows)?;
        if train_mode {
            let rng = rng.ok_or_else(|| Error::State("train-mode forward needs an rng".into()))?;
            Ok(self.stack.forward_train(&batch, rng)?.0)
        } else {
            self.stack.forward(&batch)
        }
    }

    /// Embeds the windows of `seq` starting at `offsets`, in fixed-size
    /// chunks (parallelized across chunks, bit-stable for any worker count).
    pub fn embed_offsets(&self, seq: &FeatureSequence, offsets: &[usize]) -> Result<Array2<f32>> {
        let w = self.config.window_len;
        let results: Result<Vec<Array2<f32>>> = offsets
            .par_chunks(EMBED_CHUNK)
            .map(|chunk| {
                let views: Vec<ArrayView2<f64>> = chunk
                    .iter()
                    .map(|&o| seq.rows.slice(s![o..o + w, ..]))
                    .collect();
                let batch = self.assemble_batch(&views)?;
                self.stack.forward(&batch)
            })
            .collect();
        let results = results?;
        let mut out = Array2::zeros((offsets.len(), self.config.output_dim()));
        let mut at = 0;
        for block in results {
            let n = block.nrows();
            out.slice_mut(s![at..at + n, ..]).assign(&block);
            at += n;
        }
        Ok(out)
    }
}

/// Anything that can embed feature windows; lets the evaluation harness run
/// against oracle embedders in tests.
pub trait Embedder: Sync {
    fn window_len(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    fn embed(&self, seq: &FeatureSequence, offsets: &[usize]) -> Result<Array2<f32>>;
}

impl Embedder for EncoderModel {
    fn window_len(&self) -> usize {
        self.config.window_len
    }

    fn embedding_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn embed(&self, seq: &FeatureSequence, offsets: &[usize]) -> Result<Array2<f32>> {
        if self.config.mode != EncoderMode::Embedding {
            return Err(Error::State(
                "embed called on a classification-mode model".into(),
            ));
        }
        self.embed_offsets(seq, offsets)
    }
}

/// Per-window class scoring for the classification baseline.
pub trait WindowClassifier: Sync {
    fn window_len(&self) -> usize;
    fn classes(&self) -> &[String];
    fn logits(&self, seq: &FeatureSequence, offsets: &[usize]) -> Result<Array2<f32>>;
}

impl WindowClassifier for EncoderModel {
    fn window_len(&self) -> usize {
        self.config.window_len
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn logits(&self, seq: &FeatureSequence, offsets: &[usize]) -> Result<Array2<f32>> {
        if self.config.mode != EncoderMode::Classification {
            return Err(Error::State("logits called on an embedding-mode model".into()));
        }
        self.embed_offsets(seq, offsets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_config(layers: usize, hidden: usize, input: usize, out: usize, t: usize) -> EncoderConfig {
        EncoderConfig {
            mode: EncoderMode::Embedding,
            input_dim: input,
            gru_layers: layers,
            gru_layer_size: hidden,
            gru_dropout: 0.0,
            embedding_dim: out,
            num_classes: 0,
            window_len: t,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_config(2, 5, 3, 4, 6);
        let a: GruStack<f32> = GruStack::init(&cfg, 42).unwrap();
        let b: GruStack<f32> = GruStack::init(&cfg, 42).unwrap();
        let c: GruStack<f32> = GruStack::init(&cfg, 43).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        assert_ne!(a.to_flat(), c.to_flat());
    }

    #[test]
    fn head_shape_matches_selected_configuration() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.gru_layers, 3);
        assert_eq!(cfg.gru_layer_size, 450);
        assert_eq!(cfg.embedding_dim, 192);
        let stack: GruStack<f32> = GruStack::init(&cfg, 1).unwrap();
        assert_eq!(stack.head_w.dim(), (192, 450));
    }

    #[test]
    fn forward_scalar_hand_oracle() {
        // Single unit, single feature, two timesteps: evaluate the gate
        // recurrences by hand and compare to 1e-12.
        let cfg = tiny_config(1, 1, 1, 1, 2);
        let mut stack: GruStack<f64> = GruStack::init(&cfg, 0).unwrap();
        let (wr, wz, wn) = (0.31, -0.12, 0.55);
        let (ur, uz, un) = (-0.41, 0.22, 0.17);
        let (br1, bz1, bn1) = (0.05, -0.03, 0.11);
        let (br2, bz2, bn2) = (-0.07, 0.09, 0.02);
        stack.layers[0].w_ih = ndarray::arr2(&[[wr], [wz], [wn]]);
        stack.layers[0].w_hh = ndarray::arr2(&[[ur], [uz], [un]]);
        stack.layers[0].b_ih = ndarray::arr1(&[br1, bz1, bn1]);
        stack.layers[0].b_hh = ndarray::arr1(&[br2, bz2, bn2]);
        stack.head_w = ndarray::arr2(&[[1.0]]);
        stack.head_b = ndarray::arr1(&[0.0]);
        stack.normalize = false;

        let xs = [0.7, -0.4];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = 0.0f64;
        for x in xs {
            let r = sig(wr * x + br1 + ur * h + br2);
            let z = sig(wz * x + bz1 + uz * h + bz2);
            let n = (wn * x + bn1 + r * (un * h + bn2)).tanh();
            h = (1.0 - z) * n + z * h;
        }

        let mut input = Array3::zeros((2, 1, 1));
        input[[0, 0, 0]] = xs[0];
        input[[1, 0, 0]] = xs[1];
        let out = stack.forward(&input).unwrap();
        assert!((out[[0, 0]] - h).abs() < 1e-12, "{} vs {h}", out[[0, 0]]);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let cfg = tiny_config(2, 7, 4, 5, 9);
        let stack: GruStack<f32> = GruStack::init(&cfg, 3).unwrap();
        let mut rng = rng_from(5, "in");
        let input = Array3::from_shape_fn((9, 4, 4), |_| rng.random_range(-1.0f32..1.0));
        let out = stack.forward(&input).unwrap();
        for row in out.rows() {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_deterministic_without_dropout_rng() {
        let cfg = tiny_config(2, 6, 3, 4, 5);
        let stack: GruStack<f32> = GruStack::init(&cfg, 9).unwrap();
        let mut rng = rng_from(1, "x");
        let input = Array3::from_shape_fn((5, 3, 3), |_| rng.random_range(-1.0f32..1.0));
        let a = stack.forward(&input).unwrap();
        let b = stack.forward(&input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = tiny_config(1, 6, 3, 4, 5);
        let stack: GruStack<f32> = GruStack::init(&cfg, 9).unwrap();
        let mut rng = rng_from(2, "x");
        let input = Array3::from_shape_fn((5, 4, 3), |_| rng.random_range(-1.0f32..1.0));
        let mut permuted = Array3::zeros((5, 4, 3));
        let perm = [2usize, 0, 3, 1];
        for (dst, src) in perm.iter().enumerate() {
            permuted
                .slice_mut(s![.., dst, ..])
                .assign(&input.slice(s![.., *src, ..]));
        }
        let a = stack.forward(&input).unwrap();
        let b = stack.forward(&permuted).unwrap();
        for (dst, src) in perm.iter().enumerate() {
            assert_eq!(a.row(*src), b.row(dst));
        }
    }

    #[test]
    fn normalize_backward_is_orthogonal_to_output() {
        let cfg = tiny_config(1, 5, 3, 4, 4);
        let stack: GruStack<f64> = GruStack::init(&cfg, 17).unwrap();
        let mut rng = rng_from(3, "x");
        let input = Array3::from_shape_fn((4, 2, 3), |_| rng.random_range(-1.0..1.0));
        let mut mask_rng = ChaCha8Rng::seed_from_u64(0);
        let (out, cache) = stack.forward_train(&input, &mut mask_rng).unwrap();
        let upstream = Array2::from_shape_fn(out.dim(), |_| rng.random_range(-1.0..1.0));
        // reconstruct d_out_lin via backward on an identity-ish probe: the
        // orthogonality g'z = 0 shows at the head input, so recompute it here
        for b in 0..out.nrows() {
            let y = out.row(b);
            let g = upstream.row(b);
            let gy = g.dot(&y);
            let norm = cache.out_norm[b];
            let projected: Vec<f64> = (0..y.len()).map(|i| (g[i] - gy * y[i]) / norm).collect();
            let dot: f64 = projected.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-12);
        }
    }

    fn fd_check(layers: usize, seed: u64, dropout: f32) -> f64 {
        // central finite differences against analytic gradients in f64
        let cfg = EncoderConfig {
            gru_dropout: dropout,
            ..tiny_config(layers, 5, 3, 4, 4)
        };
        let mut stack: GruStack<f64> = GruStack::init(&cfg, seed).unwrap();
        let mut rng = rng_from(seed, "fd-input");
        let input = Array3::from_shape_fn((4, 3, 3), |_| rng.random_range(-1.0..1.0));
        let upstream = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));

        let loss_of = |stack: &GruStack<f64>| -> f64 {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
            let (out, _) = stack.forward_train(&input, &mut mask_rng).unwrap();
            (&out * &upstream).sum()
        };

        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let (_, cache) = stack.forward_train(&input, &mut mask_rng).unwrap();
        let (grads, _) = stack.backward(&cache, upstream.view());
        let analytic = grads.to_flat();

        let params = stack.to_flat();
        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += eps;
            stack.load_flat(&plus);
            let f_plus = loss_of(&stack);
            let mut minus = params.clone();
            minus[i] -= eps;
            stack.load_flat(&minus);
            let f_minus = loss_of(&stack);
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-4);
            max_rel = max_rel.max((analytic[i] - fd).abs() / denom);
        }
        stack.load_flat(&params);
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        for layers in 1..=2 {
            let rel = fd_check(layers, 7 + layers as u64, 0.0);
            assert!(rel <= 1e-4, "layers {layers}: max rel err {rel}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_through_dropout() {
        let rel = fd_check(2, 21, 0.3);
        assert!(rel <= 1e-4, "max rel err {rel}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny_config(2, 5, 3, 4, 4);
        let stack: GruStack<f64> = GruStack::init(&cfg, 4).unwrap();
        let mut rng = rng_from(4, "x");
        let input = Array3::from_shape_fn((4, 2, 3), |_| rng.random_range(-1.0..1.0));
        let mut mask_rng = ChaCha8Rng::seed_from_u64(0);
        let (out, cache) = stack.forward_train(&input, &mut mask_rng).unwrap();
        let (grads, d_input) = stack.backward(&cache, Array2::zeros(out.dim()).view());
        assert!(grads.to_flat().iter().all(|v| *v == 0.0));
        assert!(d_input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn overflowing_activations_name_the_layer() {
        let cfg = tiny_config(2, 3, 2, 2, 3);
        let mut stack: GruStack<f32> = GruStack::init(&cfg, 5).unwrap();
        stack.layers[1].w_hh.fill(f32::NAN);
        let input = Array3::from_elem((3, 1, 2), 0.5f32);
        match stack.forward(&input) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("layer 1"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn stats_standardize_into_batch() {
        let cfg = EncoderConfig { window_len: 2, ..tiny_config(1, 4, FEATURE_DIM, 3, 2) };
        let mut stats = FeatureStats::identity(FEATURE_DIM);
        stats.mean[0] = 1.0;
        stats.std[0] = 2.0;
        let model = EncoderModel::init(cfg, stats, 0).unwrap();
        let rows = Array2::from_elem((2, FEATURE_DIM), 3.0);
        let batch = model.assemble_batch(&[rows.view()]).unwrap();
        assert_eq!(batch[[0, 0, 0]], 1.0); // (3 - 1) / 2
        assert_eq!(batch[[0, 0, 1]], 3.0);
    }

    #[test]
    fn config_validation_rejects_zero_dims() {
        let mut cfg = tiny_config(1, 4, 3, 2, 5);
        cfg.gru_layer_size = 0;
        assert!(matches!(
            EncoderModel::init(cfg, FeatureStats::identity(3), 0),
            Err(Error::Config(_))
        ));
    }
}
