//! Downstream evaluation: zero-shot prediction and retrieval, recall@k in both
//! retrieval directions, the metrics report, ablation, forget-fraction sweep
//! and embedding export.
//!
//! Ties are always broken towards the lowest index.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{classes_for_fraction, split_by_class, Corpus, SplitDataset};
use crate::engine::{unlearn, UnlearnConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::Method;
use crate::model::{similarity_matrix, DualEncoderModel, EmbeddingMatrix};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

const RETRIEVAL_ACC_DEFINITION: &str =
    "fraction of class prompts whose top-1 image (over all corpus images) belongs to the prompt's class";
const POSITIVES_DEFINITION: &str = "gallery items of the query's class";

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Class index with the highest prompt similarity, for each image embedding.
pub fn zero_shot_predict_embeddings(images: &EmbeddingMatrix, prompts: &EmbeddingMatrix) -> Result<Vec<usize>> {
    if prompts.rows() == 0 {
        return Err(Error::Input("no class prompts".into()));
    }
    let sim = similarity_matrix(images, prompts)?;
    Ok(sim.outer_iter().map(argmax).collect())
}

/// Zero-shot classification of raw images against one prompt per class.
pub fn zero_shot_predict(
    model: &DualEncoderModel,
    images: ArrayView2<'_, f64>,
    class_prompts: &[Vec<u32>],
) -> Result<Vec<usize>> {
    if class_prompts.is_empty() {
        return Err(Error::Input("no class prompts".into()));
    }
    let prompts = model.encode_text(class_prompts)?;
    zero_shot_predict_embeddings(&model.encode_image(images)?, &prompts)
}

/// Index of the most similar pool image for each prompt embedding.
pub fn zero_shot_retrieve_embeddings(prompts: &EmbeddingMatrix, pool: &EmbeddingMatrix) -> Result<Vec<usize>> {
    if pool.rows() == 0 {
        return Err(Error::Input("empty image pool".into()));
    }
    let sim = similarity_matrix(prompts, pool)?;
    Ok(sim.outer_iter().map(argmax).collect())
}

pub fn zero_shot_retrieve(
    model: &DualEncoderModel,
    class_prompts: &[Vec<u32>],
    image_pool: ArrayView2<'_, f64>,
) -> Result<Vec<usize>> {
    if class_prompts.is_empty() {
        return Err(Error::Input("no class prompts".into()));
    }
    zero_shot_retrieve_embeddings(&model.encode_text(class_prompts)?, &model.encode_image(image_pool)?)
}

/// Fraction of `indices` whose zero-shot prediction equals their class.
pub fn zero_shot_accuracy(
    model: &DualEncoderModel,
    corpus: &Corpus,
    prompts: &[Vec<u32>],
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    let batch = corpus.batch(indices);
    let preds = zero_shot_predict(model, batch.images.view(), prompts)?;
    Ok(fraction(preds.iter().zip(&batch.class_ids).filter(|(p, c)| p == c).count(), indices.len()))
}

fn fraction(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

/// Position of gallery item `g` in the ranking of query row `sims`
/// (descending similarity, lower id first on ties).
fn rank_of(sims: ArrayView1<'_, f64>, g: usize) -> usize {
    let s = sims[g];
    sims.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < g))
        .count()
}

/// Recall@k over a `queries × gallery` similarity table: the fraction of
/// queries with at least one positive among their top `k` gallery items.
pub fn recall_at_k(sim: ArrayView2<'_, f64>, positives: &[BTreeSet<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    if positives.len() != sim.nrows() {
        return Err(Error::Shape(format!(
            "{} positive sets for {} queries",
            positives.len(),
            sim.nrows()
        )));
    }
    if sim.nrows() == 0 {
        return Err(Error::Input("no queries".into()));
    }
    let mut hits = 0;
    for (q, (row, pos)) in sim.outer_iter().zip(positives).enumerate() {
        if pos.is_empty() {
            return Err(Error::Input(format!("query {q} has no positives")));
        }
        if let Some(&bad) = pos.iter().find(|&&g| g >= sim.ncols()) {
            return Err(Error::Input(format!("query {q}: positive {bad} outside gallery")));
        }
        // the best-ranked positive decides the hit
        let best = pos
            .iter()
            .copied()
            .reduce(|a, b| if row[b] > row[a] { b } else { a })
            .expect("nonempty");
        if rank_of(row, best) < k {
            hits += 1;
        }
    }
    Ok(fraction(hits, sim.nrows()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalDirection {
    /// Caption queries against an image gallery.
    TextToImage,
    /// Image queries against a caption gallery.
    ImageToText,
}

/// Recall@k for a model: queries and gallery are rows of `corpus`, and
/// positives are given as gallery-position sets per query.
pub fn model_recall_at_k(
    model: &DualEncoderModel,
    corpus: &Corpus,
    direction: RetrievalDirection,
    queries: &[usize],
    gallery: &[usize],
    positives: &[BTreeSet<usize>],
    k: usize,
) -> Result<f64> {
    let q = corpus.batch(queries);
    let g = corpus.batch(gallery);
    let sim = match direction {
        RetrievalDirection::TextToImage => similarity_matrix(
            &model.encode_text(&q.captions)?,
            &model.encode_image(g.images.view())?,
        )?,
        RetrievalDirection::ImageToText => similarity_matrix(
            &model.encode_image(q.images.view())?,
            &model.encode_text(&g.captions)?,
        )?,
    };
    recall_at_k(sim.view(), positives, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    #[serde(rename = "recall@1")]
    pub r1: f64,
    #[serde(rename = "recall@5")]
    pub r5: f64,
    #[serde(rename = "recall@10")]
    pub r10: f64,
}

impl RecallAtK {
    pub fn get(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.r1),
            5 => Some(self.r5),
            10 => Some(self.r10),
            _ => None,
        }
    }
}

/// Metrics of one side (forget or retain) of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub samples: usize,
    pub prompt_classes: usize,
    pub zeroshot_prediction_acc: f64,
    pub zeroshot_retrieval_acc: f64,
    pub image_retrieval: RecallAtK,
    pub text_retrieval: RecallAtK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub format_version: u32,
    pub selector: String,
    pub zeroshot_retrieval_definition: String,
    pub retrieval_positives: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub forget: SplitMetrics,
    pub retain: SplitMetrics,
    pub meta: ReportMeta,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Flat `split,task,metric,value` table.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Corrupt(e.to_string());
        w.write_record(["split", "task", "metric", "value"]).map_err(csv_err)?;
        for (name, m) in [("forget", &self.forget), ("retain", &self.retain)] {
            let mut row = |task: &str, metric: &str, v: f64| {
                w.write_record([name, task, metric, &v.to_string()]).map_err(csv_err)
            };
            row("zeroshot_prediction", "acc", m.zeroshot_prediction_acc)?;
            row("zeroshot_retrieval", "acc", m.zeroshot_retrieval_acc)?;
            for k in RECALL_KS {
                row("image_retrieval", &format!("recall@{k}"), m.image_retrieval.get(k).unwrap_or_default())?;
            }
            for k in RECALL_KS {
                row("text_retrieval", &format!("recall@{k}"), m.text_retrieval.get(k).unwrap_or_default())?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Embeddings of every corpus sample and every class prompt.
struct CorpusEmbeddings {
    images: EmbeddingMatrix,
    captions: EmbeddingMatrix,
    prompts: EmbeddingMatrix,
}

impl CorpusEmbeddings {
    fn new(model: &DualEncoderModel, corpus: &Corpus, prompts: &[Vec<u32>]) -> Result<Self> {
        let all = corpus.batch(&corpus.all_indices());
        Ok(Self {
            images: model.encode_image(all.images.view())?,
            captions: model.encode_text(&all.captions)?,
            prompts: model.encode_text(prompts)?,
        })
    }
}

fn select_rows(m: &EmbeddingMatrix, rows: &[usize]) -> Array2<f64> {
    m.view().select(ndarray::Axis(0), rows)
}

fn split_metrics(
    emb: &CorpusEmbeddings,
    corpus: &Corpus,
    indices: &[usize],
    prompt_classes: &BTreeSet<usize>,
    predictions: &[usize],
) -> Result<SplitMetrics> {
    if indices.is_empty() {
        return Err(Error::Input("split side has no samples".into()));
    }
    let class_of = |i: usize| corpus.samples[i].class_id;
    let correct = indices.iter().filter(|&&i| predictions[i] == class_of(i)).count();

    // zero-shot retrieval: top-1 image over the whole corpus, per class prompt
    let prompt_sim = emb.prompts.view().dot(&emb.images.view().t());
    let retrieved = prompt_classes
        .iter()
        .filter(|&&c| class_of(argmax(prompt_sim.row(c))) == c)
        .count();

    let mut by_class: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        by_class.entry(s.class_id).or_default().insert(i);
    }
    let positives: Vec<BTreeSet<usize>> = indices.iter().map(|&i| by_class[&class_of(i)].clone()).collect();

    let text_q = select_rows(&emb.captions, indices);
    let image_q = select_rows(&emb.images, indices);
    let t2i = text_q.dot(&emb.images.view().t());
    let i2t = image_q.dot(&emb.captions.view().t());
    let recalls = |sim: &Array2<f64>| -> Result<RecallAtK> {
        Ok(RecallAtK {
            r1: recall_at_k(sim.view(), &positives, 1)?,
            r5: recall_at_k(sim.view(), &positives, 5)?,
            r10: recall_at_k(sim.view(), &positives, 10)?,
        })
    };

    Ok(SplitMetrics {
        samples: indices.len(),
        prompt_classes: prompt_classes.len(),
        zeroshot_prediction_acc: fraction(correct, indices.len()),
        zeroshot_retrieval_acc: fraction(retrieved, prompt_classes.len()),
        image_retrieval: recalls(&t2i)?,
        text_retrieval: recalls(&i2t)?,
    })
}

/// All four tasks on D_f and D_r from a single embedding pass per modality.
///
/// Forget-side retrieval prompts are the classes with a sample in D_f; the
/// retain side uses the classes with a sample in D_r.
pub fn evaluate_suite(model: &DualEncoderModel, split: &SplitDataset, prompts: &[Vec<u32>]) -> Result<MetricsReport> {
    let corpus = &split.corpus;
    if prompts.len() != corpus.num_classes {
        return Err(Error::Input(format!(
            "{} prompts for {} classes",
            prompts.len(),
            corpus.num_classes
        )));
    }
    let emb = CorpusEmbeddings::new(model, corpus, prompts)?;
    let predictions = zero_shot_predict_embeddings(&emb.images, &emb.prompts)?;
    let classes_of = |idx: &[usize]| -> BTreeSet<usize> { idx.iter().map(|&i| corpus.samples[i].class_id).collect() };
    let forget = split_metrics(
        &emb,
        corpus,
        split.forget_indices(),
        &classes_of(split.forget_indices()),
        &predictions,
    )?;
    let retain = split_metrics(
        &emb,
        corpus,
        split.retain_indices(),
        &classes_of(split.retain_indices()),
        &predictions,
    )?;
    Ok(MetricsReport {
        forget,
        retain,
        meta: ReportMeta {
            format_version: REPORT_FORMAT_VERSION,
            selector: split.selector.to_string(),
            zeroshot_retrieval_definition: RETRIEVAL_ACC_DEFINITION.into(),
            retrieval_positives: POSITIVES_DEFINITION.into(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub modules: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub forget_acc: f64,
    pub retain_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub original_forget_acc: f64,
    pub original_retain_acc: f64,
    /// FM, FM+RM, FM+RM+CM, in that order.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["modules", "lambda1", "lambda2", "lambda3", "forget_acc", "retain_acc"])
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.modules.clone(),
                r.lambda1.to_string(),
                r.lambda2.to_string(),
                r.lambda3.to_string(),
                r.forget_acc.to_string(),
                r.retain_acc.to_string(),
            ])
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Zero-shot prediction accuracy on (D_f, D_r).
pub fn forget_retain_accuracy(model: &DualEncoderModel, split: &SplitDataset) -> Result<(f64, f64)> {
    let prompts = split.corpus.class_prompts();
    Ok((
        zero_shot_accuracy(model, &split.corpus, &prompts, split.forget_indices())?,
        zero_shot_accuracy(model, &split.corpus, &prompts, split.retain_indices())?,
    ))
}

/// Three CLIPErase runs from the same starting model and seed with the
/// lambda masks FM (λ2), FM+RM (λ1, λ2) and FM+RM+CM (λ1, λ2, λ3). The
/// nonzero weights are taken from `config`.
pub fn run_ablation(model: &DualEncoderModel, split: &SplitDataset, config: &UnlearnConfig) -> Result<AblationTable> {
    let (original_forget_acc, original_retain_acc) = forget_retain_accuracy(model, split)?;
    let masks = [("FM", false, false), ("FM+RM", true, false), ("FM+RM+CM", true, true)];
    let rows = masks
        .par_iter()
        .map(|&(label, rm, cm)| {
            let cfg = UnlearnConfig {
                method: Method::Cliperase,
                lambda1: if rm { config.lambda1 } else { 0.0 },
                lambda2: config.lambda2,
                lambda3: if cm { config.lambda3 } else { 0.0 },
                ..config.clone()
            };
            let (unlearned, _) = unlearn(model, split, &cfg)?;
            let (forget_acc, retain_acc) = forget_retain_accuracy(&unlearned, split)?;
            Ok(AblationRow {
                modules: label.to_string(),
                lambda1: cfg.lambda1,
                lambda2: cfg.lambda2,
                lambda3: cfg.lambda3,
                forget_acc,
                retain_acc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        original_forget_acc,
        original_retain_acc,
        rows,
    })
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.03, 0.10, 0.20, 0.30]
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Seed of the forget-class draw, shared by all fractions so that larger
    /// fractions forget supersets of smaller ones.
    #[serde(default)]
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            fractions: default_fractions(),
            methods: default_methods(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub method: Method,
    pub forget_classes: usize,
    pub forget_acc: Option<f64>,
    pub retain_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub forget_fractions: Vec<f64>,
    /// Fraction-major, methods in configured order.
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn row(&self, fraction: f64, method: Method) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.fraction == fraction && r.method == method)
    }

    /// `fraction,method,forget_acc,retain_acc`; the forget column is empty
    /// when nothing was forgotten.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Corrupt(e.to_string());
        w.write_record(["fraction", "method", "forget_acc", "retain_acc"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.fraction.to_string(),
                r.method.to_string(),
                r.forget_acc.map(|v| v.to_string()).unwrap_or_default(),
                r.retain_acc.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Unlearns `round(fraction · C)` seeded classes per fraction and method,
/// starting every run from `base`. Run `i` of fraction index `f` uses seed
/// `config.seed + f`. The 0 fraction evaluates `base` itself on all data.
pub fn sweep_forget_fraction(
    base: &DualEncoderModel,
    corpus: &Corpus,
    methods: &[Method],
    fractions: &[f64],
    config: &UnlearnConfig,
    class_seed: u64,
) -> Result<SweepResult> {
    if methods.is_empty() || fractions.is_empty() {
        return Err(Error::Config("sweep needs at least one method and one fraction".into()));
    }
    let prompts = corpus.class_prompts();
    let mut jobs = Vec::new();
    for (fi, &fraction) in fractions.iter().enumerate() {
        let classes = classes_for_fraction(corpus.num_classes, fraction, class_seed)?;
        if fraction > 0.0 && classes.is_empty() {
            return Err(Error::Config(format!(
                "fraction {fraction} of {} classes rounds to zero classes",
                corpus.num_classes
            )));
        }
        for &method in methods {
            jobs.push((fi, fraction, method, classes.clone()));
        }
    }
    let base_acc = zero_shot_accuracy(base, corpus, &prompts, &corpus.all_indices())?;
    let rows = jobs
        .into_par_iter()
        .map(|(fi, fraction, method, classes)| {
            if classes.is_empty() {
                return Ok(SweepRow {
                    fraction,
                    method,
                    forget_classes: 0,
                    forget_acc: None,
                    retain_acc: base_acc,
                });
            }
            let split = split_by_class(corpus, &classes)?;
            let cfg = UnlearnConfig {
                method,
                seed: config.seed.wrapping_add(fi as u64),
                ..config.clone()
            };
            let (unlearned, _) = unlearn(base, &split, &cfg)?;
            let (forget_acc, retain_acc) = forget_retain_accuracy(&unlearned, &split)?;
            Ok(SweepRow {
                fraction,
                method,
                forget_classes: classes.len(),
                forget_acc: Some(forget_acc),
                retain_acc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        forget_fractions: fractions.to_vec(),
        rows,
    })
}

/// One exported embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub sample_id: u64,
    pub modality: String,
    pub class_id: usize,
    pub values: Vec<f64>,
}

/// CSV of image and text embeddings, one row per sample per modality, in
/// sample order with the image row first.
pub fn embeddings_csv(model: &DualEncoderModel, corpus: &Corpus, indices: &[usize]) -> Result<String> {
    let batch = corpus.batch(indices);
    let img = model.encode_image(batch.images.view())?;
    let txt = model.encode_text(&batch.captions)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Corrupt(e.to_string());
    let mut header = vec!["sample_id".to_string(), "modality".into(), "class_id".into()];
    header.extend((0..img.dim()).map(|j| format!("e{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for n in 0..batch.len() {
        for (tag, m) in [("image", &img), ("text", &txt)] {
            let mut rec = vec![batch.sample_ids[n].to_string(), tag.to_string(), batch.class_ids[n].to_string()];
            rec.extend(m.view().row(n).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn export_embeddings(model: &DualEncoderModel, corpus: &Corpus, indices: &[usize], path: &Path) -> Result<()> {
    write_atomic(path, embeddings_csv(model, corpus, indices)?.as_bytes())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(0, e.to_string()))?;
    let dims = reader
        .headers()
        .map_err(|e| Error::parse(1, e.to_string()))?
        .len()
        .checked_sub(3)
        .ok_or_else(|| Error::parse(1, "header too short"))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(line, e.to_string()))?;
        let field = |j: usize| rec.get(j).ok_or_else(|| Error::parse(line, "missing field"));
        let parse_err = |e: &dyn std::fmt::Display| Error::parse(line, e.to_string());
        let values = (3..3 + dims)
            .map(|j| field(j)?.parse::<f64>().map_err(|e| parse_err(&e)))
            .collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRecord {
            sample_id: field(0)?.parse().map_err(|e| parse_err(&e))?,
            modality: field(1)?.to_string(),
            class_id: field(2)?.parse().map_err(|e| parse_err(&e))?,
            values,
        });
    }
    Ok(out)
}
