//! The tiny dual encoder: an MLP image tower and a bag-of-tokens text tower,
//! both ending in L2 normalization so every embedding lies on the unit sphere.
//!
//! Parameters are stored as `f64` but are always kept on the `f32` grid
//! (initialization and every optimizer step round through `f32`). Forward and
//! backward passes run in `f64`, and checkpoints store the exact `f32` values.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id reserved for padding; ignored by the text encoder's pooling.
pub const PAD_TOKEN: u32 = 0;

/// Allowed deviation of an embedding row norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths, vocabulary and temperature of a [`DualEncoderModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Dimension of a raw image vector.
    pub d_img: usize,
    /// Hidden width of the image MLP.
    pub d_hidden: usize,
    /// Number of token ids, including the padding id 0.
    pub vocab_size: usize,
    /// Maximum caption length in tokens.
    pub max_len: usize,
    /// Width of the token embedding table.
    pub d_token: usize,
    /// Shared embedding dimension.
    pub d_emb: usize,
    /// Softmax temperature of the contrastive losses. Fixed, never learned.
    pub temperature: f64,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_img: 64,
            d_hidden: 64,
            vocab_size: 64,
            max_len: 8,
            d_token: 32,
            d_emb: 32,
            temperature: 0.07,
            activation: Activation::Tanh,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_img", self.d_img),
            ("d_hidden", self.d_hidden),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_token", self.d_token),
            ("d_emb", self.d_emb),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "vocab_size must leave room for the padding token".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// All trainable arrays of a model. The same struct doubles as a gradient
/// accumulator and as optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    /// `d_hidden × d_img`
    pub img_w1: Array2<f64>,
    pub img_b1: Array1<f64>,
    /// `d_emb × d_hidden`
    pub img_w2: Array2<f64>,
    pub img_b2: Array1<f64>,
    /// `vocab_size × d_token`
    pub tok_embed: Array2<f64>,
    /// `d_emb × d_token`
    pub txt_w: Array2<f64>,
    pub txt_b: Array1<f64>,
}

impl Params {
    pub const NAMES: [&'static str; 7] = [
        "img_w1",
        "img_b1",
        "img_w2",
        "img_b2",
        "tok_embed",
        "txt_w",
        "txt_b",
    ];

    pub fn zeros(arch: &ArchConfig) -> Self {
        Self {
            img_w1: Array2::zeros((arch.d_hidden, arch.d_img)),
            img_b1: Array1::zeros(arch.d_hidden),
            img_w2: Array2::zeros((arch.d_emb, arch.d_hidden)),
            img_b2: Array1::zeros(arch.d_emb),
            tok_embed: Array2::zeros((arch.vocab_size, arch.d_token)),
            txt_w: Array2::zeros((arch.d_emb, arch.d_token)),
            txt_b: Array1::zeros(arch.d_emb),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            img_w1: Array2::zeros(self.img_w1.raw_dim()),
            img_b1: Array1::zeros(self.img_b1.raw_dim()),
            img_w2: Array2::zeros(self.img_w2.raw_dim()),
            img_b2: Array1::zeros(self.img_b2.raw_dim()),
            tok_embed: Array2::zeros(self.tok_embed.raw_dim()),
            txt_w: Array2::zeros(self.txt_w.raw_dim()),
            txt_b: Array1::zeros(self.txt_b.raw_dim()),
        }
    }

    /// Shapes in [`Params::NAMES`] order.
    pub fn shapes(&self) -> [Vec<usize>; 7] {
        [
            self.img_w1.shape().to_vec(),
            self.img_b1.shape().to_vec(),
            self.img_w2.shape().to_vec(),
            self.img_b2.shape().to_vec(),
            self.tok_embed.shape().to_vec(),
            self.txt_w.shape().to_vec(),
            self.txt_b.shape().to_vec(),
        ]
    }

    /// Contiguous views in [`Params::NAMES`] order.
    pub fn slices(&self) -> [&[f64]; 7] {
        fn s<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
            a.as_slice().expect("parameter arrays are contiguous")
        }
        [
            s(&self.img_w1),
            s(&self.img_b1),
            s(&self.img_w2),
            s(&self.img_b2),
            s(&self.tok_embed),
            s(&self.txt_w),
            s(&self.txt_b),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 7] {
        fn s<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("parameter arrays are contiguous")
        }
        [
            s(&mut self.img_w1),
            s(&mut self.img_b1),
            s(&mut self.img_w2),
            s(&mut self.img_b2),
            s(&mut self.tok_embed),
            s(&mut self.txt_w),
            s(&mut self.txt_b),
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for dst in self.slices_mut() {
            dst.copy_from_slice(&flat[offset..offset + dst.len()]);
            offset += dst.len();
        }
        Ok(())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for dst in self.slices_mut() {
            dst.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Round every entry to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for dst in self.slices_mut() {
            dst.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// A batch of unit-norm embeddings, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
}

impl EmbeddingMatrix {
    /// Wraps rows that are already unit-norm.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        for (i, row) in data.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Input(format!("row {i} has norm {norm}, expected 1")));
            }
        }
        Ok(Self { data })
    }

    /// Scales every row to unit norm. Zero rows are rejected.
    pub fn normalized(mut data: Array2<f64>) -> Result<Self> {
        for (i, mut row) in data.outer_iter_mut().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Input(format!("row {i} cannot be normalized")));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(Self { data })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

/// Pairwise dot products: entry `(n, k)` is `img[n] · txt[k]`.
pub fn similarity_matrix(img: &EmbeddingMatrix, txt: &EmbeddingMatrix) -> Result<Array2<f64>> {
    if img.dim() != txt.dim() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            img.dim(),
            txt.dim()
        )));
    }
    Ok(img.data.dot(&txt.data.t()))
}

/// Intermediate values of an image forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct ImageTrace {
    pre_act: Array2<f64>,
    hidden: Array2<f64>,
    norms: Array1<f64>,
    pub embeddings: EmbeddingMatrix,
}

/// Intermediate values of a text forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct TextTrace {
    tokens: Vec<Vec<u32>>,
    pooled: Array2<f64>,
    norms: Array1<f64>,
    pub embeddings: EmbeddingMatrix,
}

/// Normalizes rows of `raw` in place and returns the pre-normalization norms.
fn normalize_rows(raw: &mut Array2<f64>) -> Array1<f64> {
    let mut norms = Array1::zeros(raw.nrows());
    for (mut row, n) in raw.outer_iter_mut().zip(norms.iter_mut()) {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
        *n = norm;
    }
    norms
}

/// Backprop through `e = z / ‖z‖`: `dz = (g − (g·e) e) / ‖z‖`.
fn normalize_backward(emb: &EmbeddingMatrix, norms: &Array1<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut dz = grad.clone();
    for ((mut row, e), &norm) in dz.outer_iter_mut().zip(emb.data.outer_iter()).zip(norms) {
        let proj = row.dot(&e);
        row.zip_mut_with(&e, |g, &ei| *g = (*g - proj * ei) / norm);
    }
    dz
}

/// Dual-encoder model: image tower, text tower, fixed temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderModel {
    arch: ArchConfig,
    params: Params,
}

impl DualEncoderModel {
    /// Deterministic initialization: `(arch, seed)` fully determines every
    /// parameter. Weights are Gaussian with variance `1 / fan_in`, biases zero.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(arch);
        let mut fill = |a: &mut Array2<f64>, std: f64| {
            let normal = Normal::new(0.0, std).expect("finite std");
            a.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        };
        fill(&mut params.img_w1, (arch.d_img as f64).recip().sqrt());
        fill(&mut params.img_w2, (arch.d_hidden as f64).recip().sqrt());
        fill(&mut params.tok_embed, 1.0);
        fill(&mut params.txt_w, (arch.d_token as f64).recip().sqrt());
        // padding rows never receive gradient; keep them zero for readability
        params.tok_embed.row_mut(PAD_TOKEN as usize).fill(0.0);
        params.quantize_f32();
        Ok(Self {
            arch: arch.clone(),
            params,
        })
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(arch: ArchConfig, params: Params) -> Result<Self> {
        arch.validate()?;
        let expected = Params::zeros(&arch).shapes();
        for ((name, want), got) in Params::NAMES.iter().zip(expected).zip(params.shapes()) {
            if want != got {
                return Err(Error::Shape(format!(
                    "{name}: expected shape {want:?}, got {got:?}"
                )));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn temperature(&self) -> f64 {
        self.arch.temperature
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.to_flat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        self.params.copy_from_flat(flat)
    }

    /// Deep copy usable as a fixed reference.
    pub fn snapshot(&self) -> FrozenModel {
        FrozenModel {
            inner: Arc::new(self.clone()),
        }
    }

    pub fn encode_image(&self, images: ArrayView2<'_, f64>) -> Result<EmbeddingMatrix> {
        Ok(self.forward_image(images)?.embeddings)
    }

    pub fn encode_text(&self, tokens: &[Vec<u32>]) -> Result<EmbeddingMatrix> {
        Ok(self.forward_text(tokens)?.embeddings)
    }

    pub fn forward_image(&self, images: ArrayView2<'_, f64>) -> Result<ImageTrace> {
        if images.nrows() == 0 {
            return Err(Error::Input("empty image batch".into()));
        }
        if images.ncols() != self.arch.d_img {
            return Err(Error::Shape(format!(
                "image dimension {} does not match d_img {}",
                images.ncols(),
                self.arch.d_img
            )));
        }
        let p = &self.params;
        let mut pre_act = images.dot(&p.img_w1.t());
        pre_act += &p.img_b1;
        let act = self.arch.activation;
        let hidden = pre_act.mapv(|v| act.apply(v));
        let mut raw = hidden.dot(&p.img_w2.t());
        raw += &p.img_b2;
        let norms = normalize_rows(&mut raw);
        Ok(ImageTrace {
            pre_act,
            hidden,
            norms,
            embeddings: EmbeddingMatrix { data: raw },
        })
    }

    /// Checks token ids and drops padding, returning the content tokens of
    /// each caption.
    fn content_tokens(&self, tokens: &[Vec<u32>]) -> Result<Vec<Vec<u32>>> {
        if tokens.is_empty() {
            return Err(Error::Input("empty caption batch".into()));
        }
        tokens
            .iter()
            .enumerate()
            .map(|(n, seq)| {
                if seq.len() > self.arch.max_len {
                    return Err(Error::Input(format!(
                        "caption {n} has {} tokens, max_len is {}",
                        seq.len(),
                        self.arch.max_len
                    )));
                }
                if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.arch.vocab_size) {
                    return Err(Error::Input(format!(
                        "caption {n}: token id {bad} outside vocabulary of size {}",
                        self.arch.vocab_size
                    )));
                }
                let content: Vec<u32> = seq.iter().copied().filter(|&t| t != PAD_TOKEN).collect();
                if content.is_empty() {
                    return Err(Error::Input(format!("caption {n} contains only padding")));
                }
                Ok(content)
            })
            .collect()
    }

    pub fn forward_text(&self, tokens: &[Vec<u32>]) -> Result<TextTrace> {
        let tokens = self.content_tokens(tokens)?;
        let p = &self.params;
        let mut pooled = Array2::zeros((tokens.len(), self.arch.d_token));
        for (mut row, seq) in pooled.outer_iter_mut().zip(&tokens) {
            for &t in seq {
                row += &p.tok_embed.row(t as usize);
            }
            row.mapv_inplace(|v| v / seq.len() as f64);
        }
        let mut raw = pooled.dot(&p.txt_w.t());
        raw += &p.txt_b;
        let norms = normalize_rows(&mut raw);
        Ok(TextTrace {
            tokens,
            pooled,
            norms,
            embeddings: EmbeddingMatrix { data: raw },
        })
    }

    /// Accumulates into `grads` the gradient of a scalar whose derivative
    /// with respect to the image embeddings is `grad_emb`.
    pub fn backward_image(
        &self,
        trace: &ImageTrace,
        images: ArrayView2<'_, f64>,
        grad_emb: &Array2<f64>,
        grads: &mut Params,
    ) {
        let p = &self.params;
        let dz = normalize_backward(&trace.embeddings, &trace.norms, grad_emb);
        grads.img_w2 += &dz.t().dot(&trace.hidden);
        grads.img_b2 += &dz.sum_axis(Axis(0));
        let mut da = dz.dot(&p.img_w2);
        let act = self.arch.activation;
        ndarray::Zip::from(&mut da)
            .and(&trace.pre_act)
            .and(&trace.hidden)
            .for_each(|d, &pre, &out| *d *= act.derivative(pre, out));
        grads.img_w1 += &da.t().dot(&images);
        grads.img_b1 += &da.sum_axis(Axis(0));
    }

    /// Text-tower counterpart of [`DualEncoderModel::backward_image`].
    pub fn backward_text(&self, trace: &TextTrace, grad_emb: &Array2<f64>, grads: &mut Params) {
        let p = &self.params;
        let dz = normalize_backward(&trace.embeddings, &trace.norms, grad_emb);
        grads.txt_w += &dz.t().dot(&trace.pooled);
        grads.txt_b += &dz.sum_axis(Axis(0));
        let dpooled = dz.dot(&p.txt_w);
        for (drow, seq) in dpooled.outer_iter().zip(&trace.tokens) {
            let share = 1.0 / seq.len() as f64;
            for &t in seq {
                grads
                    .tok_embed
                    .row_mut(t as usize)
                    .scaled_add(share, &drow);
            }
        }
    }
}

/// Read-only snapshot of a model, used as the fixed reference of the
/// consistency loss. Cloning shares the underlying parameters.
#[derive(Clone, Debug)]
pub struct FrozenModel {
    inner: Arc<DualEncoderModel>,
}

impl FrozenModel {
    pub fn model(&self) -> &DualEncoderModel {
        &self.inner
    }

    pub fn encode_image(&self, images: ArrayView2<'_, f64>) -> Result<EmbeddingMatrix> {
        self.inner.encode_image(images)
    }

    pub fn encode_text(&self, tokens: &[Vec<u32>]) -> Result<EmbeddingMatrix> {
        self.inner.encode_text(tokens)
    }

    /// Always fails: snapshots are immutable.
    pub fn set_flat_params(&self, _flat: &[f64]) -> Result<()> {
        Err(Error::FrozenMutation)
    }

    /// Returns an independent, mutable copy of the wrapped model.
    pub fn thaw(&self) -> DualEncoderModel {
        (*self.inner).clone()
    }
}

/// Free-function form of [`DualEncoderModel::snapshot`].
pub fn snapshot(model: &DualEncoderModel) -> FrozenModel {
    model.snapshot()
}
