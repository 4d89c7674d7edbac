#![allow(dead_code)]

pub mod grad;

use std::collections::BTreeSet;

use cliperase::data::{generate_corpus, split_by_class, Batch, Corpus, CorpusConfig, SplitDataset};
use cliperase::model::{ArchConfig, DualEncoderModel};
use cliperase::{pretrain, PretrainConfig};

/// d_emb = 8 model over a small vocabulary, for gradient checks.
pub fn grad_arch() -> ArchConfig {
    ArchConfig {
        d_img: 12,
        d_hidden: 10,
        vocab_size: 24,
        max_len: 8,
        d_token: 6,
        d_emb: 8,
        ..ArchConfig::default()
    }
}

pub fn grad_corpus() -> Corpus {
    generate_corpus(&CorpusConfig {
        num_classes: 4,
        pairs_per_class: 6,
        d_img: 12,
        seed: 5,
        ..CorpusConfig::default()
    })
    .unwrap()
}

/// Forget batch (class 0) and retain batch (other classes) of a small corpus.
pub fn grad_batches(corpus: &Corpus) -> (Batch, Batch) {
    let split = split_by_class(corpus, &BTreeSet::from([0])).unwrap();
    let forget = corpus.batch(&split.forget_indices()[..4]);
    let retain = corpus.batch(&split.retain_indices()[..5]);
    (forget, retain)
}

/// Default 10-class toy corpus.
pub fn toy_corpus(seed: u64) -> Corpus {
    generate_corpus(&CorpusConfig {
        seed,
        ..CorpusConfig::default()
    })
    .unwrap()
}

pub fn pretrained(corpus: &Corpus, seed: u64) -> DualEncoderModel {
    let arch = ArchConfig {
        d_img: corpus.d_img,
        ..ArchConfig::default()
    };
    let model = DualEncoderModel::init(&arch, seed).unwrap();
    let cfg = PretrainConfig {
        seed,
        ..PretrainConfig::default()
    };
    pretrain(model, corpus, &cfg).unwrap().0
}

pub fn class_split(corpus: &Corpus, class: usize) -> SplitDataset {
    split_by_class(corpus, &BTreeSet::from([class])).unwrap()
}

/// Largest relative error between an analytic gradient and central finite
/// differences of `value` (step `h`), over every parameter. Entries where
/// both magnitudes fall below `floor` are compared absolutely against it.
pub fn max_relative_error(
    model: &DualEncoderModel,
    value: impl Fn(&DualEncoderModel) -> f64,
    analytic: &[f64],
    h: f64,
    floor: f64,
) -> (f64, usize) {
    let base = model.flat_params();
    assert_eq!(base.len(), analytic.len());
    let mut probe = model.clone();
    let mut worst = (0.0, 0);
    let mut theta = base.clone();
    for i in 0..base.len() {
        theta[i] = base[i] + h;
        probe.set_flat_params(&theta).unwrap();
        let plus = value(&probe);
        theta[i] = base[i] - h;
        probe.set_flat_params(&theta).unwrap();
        let minus = value(&probe);
        theta[i] = base[i];
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        let err = if scale < floor {
            (a - numeric).abs() / floor
        } else {
            (a - numeric).abs() / scale
        };
        if err > worst.0 {
            worst = (err, i);
        }
    }
    worst
}

/// Recall@k by sorting every gallery row: descending similarity, lower index
/// first on ties, then a scan of the first `k` entries for any positive.
pub fn sorted_recall(sim: &ndarray::Array2<f64>, positives: &[BTreeSet<usize>], k: usize) -> f64 {
    let mut hits = 0;
    for (row, pos) in sim.outer_iter().zip(positives) {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if order.iter().take(k).any(|g| pos.contains(g)) {
            hits += 1;
        }
    }
    hits as f64 / sim.nrows() as f64
}

/// Mean dot product of matched image/caption pairs over `indices`.
pub fn mean_pair_similarity(model: &DualEncoderModel, corpus: &Corpus, indices: &[usize]) -> f64 {
    let b = corpus.batch(indices);
    let img = model.encode_image(b.images.view()).unwrap();
    let txt = model.encode_text(&b.captions).unwrap();
    let (i, t) = (img.view(), txt.view());
    i.outer_iter().zip(t.outer_iter()).map(|(a, b)| a.dot(&b)).sum::<f64>() / indices.len() as f64
}

/// Dotted key paths of a JSON document, arrays ignored.
pub fn json_key_paths(value: &serde_json::Value) -> Vec<String> {
    fn walk(v: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
        if let serde_json::Value::Object(map) = v {
            for (k, child) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                out.push(path.clone());
                walk(child, &path, out);
            }
        }
    }
    let mut out = Vec::new();
    walk(value, "", &mut out);
    out.sort();
    out
}
