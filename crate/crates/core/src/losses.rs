//! Contrastive, forgetting, retention and consistency losses, the combined
//! unlearning objective and the gradient-ascent style baselines.
//!
//! Every loss exists at two levels: a value on embeddings, and a
//! `*_and_grad` form that runs the encoders and backpropagates into a
//! [`Params`] gradient for the live model.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{DualEncoderModel, EmbeddingMatrix, FrozenModel, ImageTrace, Params, TextTrace};

/// Unlearning method: the three-module objective or one of the baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Cliperase,
    Ga,
    Graddiff,
    Klmin,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cliperase, Method::Ga, Method::Graddiff, Method::Klmin];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cliperase => "CLIPERASE",
            Method::Ga => "GA",
            Method::Graddiff => "GRADDIFF",
            Method::Klmin => "KLMIN",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    /// Softmax over text candidates for each image.
    #[default]
    ImageToText,
    /// Mean of the image→text and text→image directions.
    Symmetric,
}

/// Weights of the retention, forgetting and consistency terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Component values of one evaluation of the unlearning objective.
///
/// For baseline methods the same slots are reused: `l_fm` holds the negated
/// forget-set contrastive loss, `l_rm` the retain-set contrastive loss and
/// `l_cm` the retain-set consistency term, with the lambdas set to 1 or 0
/// according to which terms the baseline uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_fm: f64,
    pub l_rm: f64,
    pub l_cm: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossBreakdown {
    fn assemble(weights: LossWeights, l_rm: f64, l_fm: f64, l_cm: f64) -> Self {
        Self {
            l_fm,
            l_rm,
            l_cm,
            total: weights.lambda1 * l_rm + weights.lambda2 * l_fm + weights.lambda3 * l_cm,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            lambda3: weights.lambda3,
        }
    }

    /// `λ1·l_rm + λ2·l_fm + λ3·l_cm` recomputed from the stored components.
    pub fn reassembled(&self) -> f64 {
        self.lambda1 * self.l_rm + self.lambda2 * self.l_fm + self.lambda3 * self.l_cm
    }
}

/// A probability vector produced by a softmax over embedding coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxDistribution {
    pub probs: Array1<f64>,
    log_probs: Array1<f64>,
}

impl SoftmaxDistribution {
    pub fn from_logits(logits: ArrayView1<'_, f64>) -> Self {
        let log_probs = log_softmax(logits);
        Self {
            probs: log_probs.mapv(f64::exp),
            log_probs,
        }
    }

    pub fn log_probs(&self) -> ArrayView1<'_, f64> {
        self.log_probs.view()
    }
}

/// `KL(p ‖ q) = Σ p log(p / q)`.
pub fn kl_divergence(p: &SoftmaxDistribution, q: &SoftmaxDistribution) -> f64 {
    p.probs
        .iter()
        .zip(p.log_probs.iter().zip(q.log_probs.iter()))
        .map(|(&pi, (&lp, &lq))| pi * (lp - lq))
        .sum()
}

fn log_sum_exp(x: ArrayView1<'_, f64>) -> f64 {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn log_softmax(x: ArrayView1<'_, f64>) -> Array1<f64> {
    let lse = log_sum_exp(x);
    x.mapv(|v| v - lse)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

fn check_paired(img: ArrayView2<'_, f64>, txt: ArrayView2<'_, f64>) -> Result<()> {
    if img.nrows() != txt.nrows() {
        return Err(Error::Shape(format!(
            "{} image rows vs {} text rows",
            img.nrows(),
            txt.nrows()
        )));
    }
    if img.ncols() != txt.ncols() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            img.ncols(),
            txt.ncols()
        )));
    }
    if img.nrows() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    Ok(())
}

/// Cross-entropy of the diagonal in one softmax direction. `rows` selects
/// softmax over each row (image→text) or over each column (text→image).
/// Returns the loss and `dL/dS`.
fn directional_infonce(sim: &Array2<f64>, tau: f64, rows: bool) -> (f64, Array2<f64>) {
    let n = sim.nrows();
    let mut grad = Array2::zeros(sim.raw_dim());
    let mut loss = 0.0;
    for i in 0..n {
        let logits = if rows { sim.row(i) } else { sim.column(i) }.mapv(|s| s / tau);
        let lse = log_sum_exp(logits.view());
        loss += lse - logits[i];
        for (k, &l) in logits.iter().enumerate() {
            let p = (l - lse).exp();
            let target = if k == i { 1.0 } else { 0.0 };
            let (r, c) = if rows { (i, k) } else { (k, i) };
            grad[[r, c]] = (p - target) / (n as f64 * tau);
        }
    }
    (loss / n as f64, grad)
}

/// Loss and gradients with respect to the image and text embeddings.
fn contrastive_grad(
    img: ArrayView2<'_, f64>,
    txt: ArrayView2<'_, f64>,
    tau: f64,
    mode: ContrastiveMode,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_paired(img, txt)?;
    check_tau(tau)?;
    let sim = img.dot(&txt.t());
    let (loss, d_sim) = match mode {
        ContrastiveMode::ImageToText => directional_infonce(&sim, tau, true),
        ContrastiveMode::Symmetric => {
            let (a, ga) = directional_infonce(&sim, tau, true);
            let (b, gb) = directional_infonce(&sim, tau, false);
            (0.5 * (a + b), (ga + gb) * 0.5)
        }
    };
    let d_img = d_sim.dot(&txt);
    let d_txt = d_sim.t().dot(&img);
    Ok((loss, d_img, d_txt))
}

/// Image→text InfoNCE:
/// `−(1/N) Σₙ log[exp(sₙₙ/τ) / Σₖ exp(sₙₖ/τ)]`.
pub fn contrastive_loss(img: &EmbeddingMatrix, txt: &EmbeddingMatrix, tau: f64) -> Result<f64> {
    contrastive_loss_with_mode(img, txt, tau, ContrastiveMode::ImageToText)
}

pub fn contrastive_loss_with_mode(
    img: &EmbeddingMatrix,
    txt: &EmbeddingMatrix,
    tau: f64,
    mode: ContrastiveMode,
) -> Result<f64> {
    contrastive_grad(img.view(), txt.view(), tau, mode).map(|(l, _, _)| l)
}

/// Contrastive alignment loss on retain-set pairs; identical to
/// [`contrastive_loss`].
pub fn retention_loss(img_r: &EmbeddingMatrix, txt_r: &EmbeddingMatrix, tau: f64) -> Result<f64> {
    contrastive_loss(img_r, txt_r, tau)
}

fn forgetting_grad(
    img: ArrayView2<'_, f64>,
    txt: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_paired(img, txt)?;
    let n = img.nrows() as f64;
    let loss = img
        .outer_iter()
        .zip(txt.outer_iter())
        .map(|(a, b)| a.dot(&b))
        .sum::<f64>()
        / n;
    Ok((loss, txt.mapv(|v| v / n), img.mapv(|v| v / n)))
}

/// Mean similarity of matched forget pairs, `(1/N_f) Σₙ imgₙ · txtₙ`.
pub fn forgetting_loss(img_f: &EmbeddingMatrix, txt_f: &EmbeddingMatrix) -> Result<f64> {
    forgetting_grad(img_f.view(), txt_f.view()).map(|(l, _, _)| l)
}

/// Mean over rows of `KL(softmax(orig_n) ‖ softmax(cur_n))`, and its gradient
/// with respect to `cur`.
fn divergence_grad(orig: ArrayView2<'_, f64>, cur: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    check_paired(orig, cur)?;
    let n = orig.nrows() as f64;
    let mut grad = Array2::zeros(cur.raw_dim());
    let mut total = 0.0;
    for ((o, u), mut g) in orig.outer_iter().zip(cur.outer_iter()).zip(grad.outer_iter_mut()) {
        let p = SoftmaxDistribution::from_logits(o);
        let q = SoftmaxDistribution::from_logits(u);
        total += kl_divergence(&p, &q);
        // d KL / d u = q − p
        g.assign(&((&q.probs - &p.probs) / n));
    }
    Ok((total / n, grad))
}

/// Per-sample KL between coordinate softmaxes of two embedding sets,
/// averaged over rows. The first argument is the reference distribution.
pub fn embedding_divergence(orig: ArrayView2<'_, f64>, cur: ArrayView2<'_, f64>) -> Result<f64> {
    divergence_grad(orig, cur).map(|(l, _)| l)
}

/// Consistency between the frozen original model and the current one on a
/// retain batch: image KL plus text KL, averaged over samples.
pub fn consistency_loss(
    orig: &FrozenModel,
    current: &DualEncoderModel,
    images: ArrayView2<'_, f64>,
    texts: &[Vec<u32>],
) -> Result<f64> {
    if orig.model().arch().d_emb != current.arch().d_emb {
        return Err(Error::Shape(format!(
            "embedding dims differ: original {} vs current {}",
            orig.model().arch().d_emb,
            current.arch().d_emb
        )));
    }
    let oi = orig.encode_image(images)?;
    let ot = orig.encode_text(texts)?;
    let ui = current.encode_image(images)?;
    let ut = current.encode_text(texts)?;
    Ok(embedding_divergence(oi.view(), ui.view())? + embedding_divergence(ot.view(), ut.view())?)
}

/// Encoder passes of the live model over one batch.
struct Encoded<'b> {
    batch: &'b Batch,
    img: ImageTrace,
    txt: TextTrace,
}

impl<'b> Encoded<'b> {
    fn new(model: &DualEncoderModel, batch: &'b Batch) -> Result<Self> {
        Ok(Self {
            batch,
            img: model.forward_image(batch.images.view())?,
            txt: model.forward_text(&batch.captions)?,
        })
    }

    fn img(&self) -> ArrayView2<'_, f64> {
        self.img.embeddings.view()
    }

    fn txt(&self) -> ArrayView2<'_, f64> {
        self.txt.embeddings.view()
    }

    fn backward(&self, model: &DualEncoderModel, d_img: &Array2<f64>, d_txt: &Array2<f64>, grads: &mut Params) {
        model.backward_image(&self.img, self.batch.images.view(), d_img, grads);
        model.backward_text(&self.txt, d_txt, grads);
    }
}

/// Reference embeddings of the frozen model, computed without any trace.
fn reference_embeddings(orig: &FrozenModel, batch: &Batch) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    Ok((
        orig.encode_image(batch.images.view())?,
        orig.encode_text(&batch.captions)?,
    ))
}

fn check_same_dim(orig: &FrozenModel, model: &DualEncoderModel) -> Result<()> {
    if orig.model().arch().d_emb != model.arch().d_emb {
        return Err(Error::Shape("original and current models differ in d_emb".into()));
    }
    Ok(())
}

/// Contrastive loss over a batch and its parameter gradient.
pub fn contrastive_loss_and_grad(
    model: &DualEncoderModel,
    batch: &Batch,
    tau: f64,
    mode: ContrastiveMode,
) -> Result<(f64, Params)> {
    let enc = Encoded::new(model, batch)?;
    let (loss, d_img, d_txt) = contrastive_grad(enc.img(), enc.txt(), tau, mode)?;
    let mut grads = model.params().zeros_like();
    enc.backward(model, &d_img, &d_txt, &mut grads);
    Ok((loss, grads))
}

pub fn forgetting_loss_and_grad(model: &DualEncoderModel, batch: &Batch) -> Result<(f64, Params)> {
    let enc = Encoded::new(model, batch)?;
    let (loss, d_img, d_txt) = forgetting_grad(enc.img(), enc.txt())?;
    let mut grads = model.params().zeros_like();
    enc.backward(model, &d_img, &d_txt, &mut grads);
    Ok((loss, grads))
}

/// Gradient flows only into `model`; the snapshot is a constant.
pub fn consistency_loss_and_grad(
    orig: &FrozenModel,
    model: &DualEncoderModel,
    batch: &Batch,
) -> Result<(f64, Params)> {
    check_same_dim(orig, model)?;
    let enc = Encoded::new(model, batch)?;
    let (oi, ot) = reference_embeddings(orig, batch)?;
    let (li, d_img) = divergence_grad(oi.view(), enc.img())?;
    let (lt, d_txt) = divergence_grad(ot.view(), enc.txt())?;
    let mut grads = model.params().zeros_like();
    enc.backward(model, &d_img, &d_txt, &mut grads);
    Ok((li + lt, grads))
}

/// Combined objective `λ1·L_RM + λ2·L_FM + λ3·L_CM` with its gradient.
pub fn total_unlearn_loss_and_grad(
    model: &DualEncoderModel,
    orig: &FrozenModel,
    forget: &Batch,
    retain: &Batch,
    weights: LossWeights,
    tau: f64,
    mode: ContrastiveMode,
) -> Result<(LossBreakdown, Params)> {
    weights.validate()?;
    check_same_dim(orig, model)?;
    let mut grads = model.params().zeros_like();

    let f = Encoded::new(model, forget)?;
    let (l_fm, df_img, df_txt) = forgetting_grad(f.img(), f.txt())?;
    f.backward(model, &(df_img * weights.lambda2), &(df_txt * weights.lambda2), &mut grads);

    let r = Encoded::new(model, retain)?;
    let (l_rm, dr_img, dr_txt) = contrastive_grad(r.img(), r.txt(), tau, mode)?;
    let (oi, ot) = reference_embeddings(orig, retain)?;
    let (lci, dc_img) = divergence_grad(oi.view(), r.img())?;
    let (lct, dc_txt) = divergence_grad(ot.view(), r.txt())?;
    let d_img = dr_img * weights.lambda1 + dc_img * weights.lambda3;
    let d_txt = dr_txt * weights.lambda1 + dc_txt * weights.lambda3;
    r.backward(model, &d_img, &d_txt, &mut grads);

    Ok((LossBreakdown::assemble(weights, l_rm, l_fm, lci + lct), grads))
}

pub fn total_unlearn_loss(
    model: &DualEncoderModel,
    orig: &FrozenModel,
    forget: &Batch,
    retain: &Batch,
    weights: LossWeights,
    tau: f64,
) -> Result<LossBreakdown> {
    total_unlearn_loss_and_grad(model, orig, forget, retain, weights, tau, ContrastiveMode::ImageToText)
        .map(|(b, _)| b)
}

/// Baseline objectives:
/// GA `= −L_con(D_f)`, GRADDIFF `= −L_con(D_f) + L_con(D_r)`,
/// KLMIN `= −L_con(D_f) + L_CM(D_r)`.
pub fn baseline_loss_and_grad(
    method: Method,
    model: &DualEncoderModel,
    orig: &FrozenModel,
    forget: &Batch,
    retain: &Batch,
    tau: f64,
    mode: ContrastiveMode,
) -> Result<(LossBreakdown, Params)> {
    let (use_rm, use_cm) = match method {
        Method::Ga => (false, false),
        Method::Graddiff => (true, false),
        Method::Klmin => (false, true),
        Method::Cliperase => {
            return Err(Error::Config("CLIPERASE is not a baseline method".into()));
        }
    };
    let mut grads = model.params().zeros_like();

    let f = Encoded::new(model, forget)?;
    let (l_con_f, df_img, df_txt) = contrastive_grad(f.img(), f.txt(), tau, mode)?;
    f.backward(model, &(-df_img), &(-df_txt), &mut grads);

    let mut l_rm = 0.0;
    let mut l_cm = 0.0;
    if use_rm {
        let r = Encoded::new(model, retain)?;
        let (l, d_img, d_txt) = contrastive_grad(r.img(), r.txt(), tau, mode)?;
        r.backward(model, &d_img, &d_txt, &mut grads);
        l_rm = l;
    }
    if use_cm {
        check_same_dim(orig, model)?;
        let r = Encoded::new(model, retain)?;
        let (oi, ot) = reference_embeddings(orig, retain)?;
        let (li, d_img) = divergence_grad(oi.view(), r.img())?;
        let (lt, d_txt) = divergence_grad(ot.view(), r.txt())?;
        r.backward(model, &d_img, &d_txt, &mut grads);
        l_cm = li + lt;
    }
    let weights = LossWeights {
        lambda1: if use_rm { 1.0 } else { 0.0 },
        lambda2: 1.0,
        lambda3: if use_cm { 1.0 } else { 0.0 },
    };
    Ok((LossBreakdown::assemble(weights, l_rm, -l_con_f, l_cm), grads))
}

pub fn baseline_loss(
    method: Method,
    model: &DualEncoderModel,
    orig: &FrozenModel,
    forget: &Batch,
    retain: &Batch,
    tau: f64,
) -> Result<f64> {
    baseline_loss_and_grad(method, model, orig, forget, retain, tau, ContrastiveMode::ImageToText)
        .map(|(b, _)| b.total)
}
