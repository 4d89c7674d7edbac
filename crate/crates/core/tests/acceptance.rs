//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Run alone with `cargo test -p cliperase --test acceptance`.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cliperase::checkpoint::{decode_checkpoint, encode_checkpoint};
use cliperase::eval::forget_retain_accuracy;
use cliperase::losses::{ContrastiveMode, LossWeights};
use cliperase::model::{ArchConfig, DualEncoderModel, EmbeddingMatrix};
use cliperase::{
    consistency_loss, contrastive_loss, evaluate_suite, forgetting_loss, generate_corpus, recall_at_k,
    retention_loss, run_ablation, sweep_forget_fraction, unlearn, Corpus, CorpusConfig, Method, RunHistory,
    UnlearnConfig,
};

use common::*;

const SEEDS: [u64; 3] = [0, 1, 2];

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix {
    let data = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    EmbeddingMatrix::normalized(data).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut checks = vec![
        ("contrastive", grad::contrastive(ContrastiveMode::ImageToText)),
        ("forgetting", grad::forgetting()),
        ("consistency", grad::consistency()),
        ("total", grad::total(LossWeights::default())),
    ];
    for method in [Method::Ga, Method::Graddiff, Method::Klmin] {
        checks.push((method.name(), grad::baseline(method)));
    }
    let elapsed = start.elapsed();
    let failed: Vec<String> = checks
        .iter()
        .filter(|(_, (err, _, _))| *err >= grad::TOLERANCE)
        .map(|(name, (err, point, at))| format!("{name} {err:.2e} at point {point} param {at}"))
        .collect();
    let worst = checks.iter().map(|(_, w)| w.0).fold(0.0, f64::max);
    let in_time = elapsed < Duration::from_secs(60);
    outcome(
        failed.is_empty() && in_time,
        format!(
            "{} losses x {} points, worst relative error {worst:.2e} (< {:e}), {elapsed:.1?} (< 60s){}",
            checks.len(),
            grad::POINTS,
            grad::TOLERANCE,
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let tau = 0.07;

    let single = random_unit_rows(&mut rng, 1, 8);
    let single_txt = random_unit_rows(&mut rng, 1, 8);
    let at_one = contrastive_loss(&single, &single_txt, tau).unwrap();
    pass &= at_one == 0.0;
    notes.push(format!("N=1 -> {at_one}"));

    let mut uniform_err: f64 = 0.0;
    for n in [2usize, 5, 17, 64] {
        let mut rows = Array2::zeros((n, 8));
        rows.column_mut(3).fill(1.0);
        let e = EmbeddingMatrix::new(rows).unwrap();
        let v = contrastive_loss(&e, &e, tau).unwrap();
        uniform_err = uniform_err.max((v - (n as f64).ln()).abs());
    }
    pass &= uniform_err <= 1e-9;
    notes.push(format!("uniform |L - ln N| max {uniform_err:.1e}"));

    let corpus = toy_corpus(0);
    let batch = corpus.batch(&(0..64).collect::<Vec<_>>());
    let mut self_kl: f64 = 0.0;
    for seed in 0..3 {
        let m = DualEncoderModel::init(&ArchConfig::default(), seed).unwrap();
        self_kl = self_kl.max(consistency_loss(&m.snapshot(), &m, batch.images.view(), &batch.captions).unwrap());
    }
    pass &= self_kl <= 1e-12;
    notes.push(format!("L_CM(m, m) max {self_kl:.1e}"));

    let mut fm_range = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=12);
        let v = forgetting_loss(&random_unit_rows(&mut rng, n, d), &random_unit_rows(&mut rng, n, d)).unwrap();
        fm_range = (fm_range.0.min(v), fm_range.1.max(v));
    }
    pass &= fm_range.0 >= -1.0 && fm_range.1 <= 1.0;
    notes.push(format!("L_FM over 1000 batches in [{:.3}, {:.3}]", fm_range.0, fm_range.1));

    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(2..=12);
        let t = rng.gen_range(0.01..2.0);
        let (a, b) = (random_unit_rows(&mut rng, n, d), random_unit_rows(&mut rng, n, d));
        if retention_loss(&a, &b, t).unwrap().to_bits() != contrastive_loss(&a, &b, t).unwrap().to_bits() {
            mismatches += 1;
        }
    }
    pass &= mismatches == 0;
    notes.push(format!("L_RM vs contrastive mismatches {mismatches}/100"));

    outcome(pass, notes.join("; "))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let corpus = toy_corpus(seed);
        let model = pretrained(&corpus, seed);
        let split = class_split(&corpus, seed as usize);
        let (f0, r0) = forget_retain_accuracy(&model, &split).unwrap();
        let cfg = UnlearnConfig {
            seed,
            ..UnlearnConfig::default()
        };
        let (unlearned, _) = unlearn(&model, &split, &cfg).unwrap();
        let (f1, r1) = forget_retain_accuracy(&unlearned, &split).unwrap();
        let d0 = mean_pair_similarity(&model, &corpus, split.forget_indices());
        let d1 = mean_pair_similarity(&unlearned, &corpus, split.forget_indices());
        let ok = r0 >= 0.9 && f1 <= 0.10 && (r1 - r0).abs() <= 0.05 && d1 < d0;
        pass &= ok;
        lines.push(format!(
            "seed {seed}: pretrained retain {r0:.3} forget {f0:.3} -> forget {f1:.3} retain {r1:.3}, pair sim {d0:.3} -> {d1:.3}"
        ));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(300);
    outcome(pass, format!("{} ({elapsed:.1?}, < 5min)", lines.join("; ")))
}

fn criterion_4() -> Outcome {
    let mut votes = [0usize; 3];
    let mut lines = Vec::new();
    for seed in SEEDS {
        let corpus = toy_corpus(seed);
        let model = pretrained(&corpus, seed);
        let split = class_split(&corpus, seed as usize);
        let cfg = UnlearnConfig {
            seed,
            ..UnlearnConfig::default()
        };
        let table = run_ablation(&model, &split, &cfg).unwrap();
        let (fm, fmrm, full) = (&table.rows[0], &table.rows[1], &table.rows[2]);
        votes[0] += (fm.forget_acc < table.original_forget_acc) as usize;
        votes[1] += (fmrm.retain_acc >= fm.retain_acc) as usize;
        votes[2] += (full.forget_acc <= fmrm.forget_acc && full.retain_acc >= fmrm.retain_acc) as usize;
        lines.push(format!(
            "seed {seed}: orig {:.3}/{:.3} FM {:.3}/{:.3} FM+RM {:.3}/{:.3} FM+RM+CM {:.3}/{:.3}",
            table.original_forget_acc,
            table.original_retain_acc,
            fm.forget_acc,
            fm.retain_acc,
            fmrm.forget_acc,
            fmrm.retain_acc,
            full.forget_acc,
            full.retain_acc
        ));
    }
    let pass = votes.iter().all(|&v| v >= 2);
    outcome(
        pass,
        format!("votes {votes:?} of 3 (forget/retain per row); {}", lines.join("; ")),
    )
}

fn criterion_5() -> Outcome {
    let mut retain_wins = 0;
    let mut forget_wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let corpus = toy_corpus(seed);
        let model = pretrained(&corpus, seed);
        let split = class_split(&corpus, seed as usize);
        let run = |method| {
            let cfg = UnlearnConfig {
                method,
                seed,
                ..UnlearnConfig::default()
            };
            forget_retain_accuracy(&unlearn(&model, &split, &cfg).unwrap().0, &split).unwrap()
        };
        let (ce_f, ce_r) = run(Method::Cliperase);
        let (_, ga_r) = run(Method::Ga);
        let (gd_f, _) = run(Method::Graddiff);
        retain_wins += (ce_r >= ga_r) as usize;
        forget_wins += (ce_f <= gd_f) as usize;
        lines.push(format!(
            "seed {seed}: retain CLIPERASE {ce_r:.3} vs GA {ga_r:.3}, forget CLIPERASE {ce_f:.3} vs GRADDIFF {gd_f:.3}"
        ));
    }
    outcome(
        retain_wins >= 2 && forget_wins >= 2,
        format!("retain wins {retain_wins}/3, forget wins {forget_wins}/3; {}", lines.join("; ")),
    )
}

fn criterion_6() -> Outcome {
    let corpus = generate_corpus(&CorpusConfig {
        num_classes: 30,
        ..CorpusConfig::default()
    })
    .unwrap();
    let base = pretrained(&corpus, 0);
    let fractions = [0.0, 0.03, 0.10, 0.20, 0.30];
    let result = sweep_forget_fraction(
        &base,
        &corpus,
        &[Method::Cliperase, Method::Ga],
        &fractions,
        &UnlearnConfig::default(),
        0,
    )
    .unwrap();
    let chance = 1.0 / 30.0;
    let mut pass = true;
    let mut forget = Vec::new();
    for &f in &fractions[1..] {
        let acc = result.row(f, Method::Cliperase).unwrap().forget_acc.unwrap();
        pass &= acc <= chance;
        forget.push(format!("{f}: {acc:.3}"));
    }
    let ce = result.row(0.30, Method::Cliperase).unwrap().retain_acc;
    let ga = result.row(0.30, Method::Ga).unwrap().retain_acc;
    pass &= ce > ga;
    outcome(
        pass,
        format!(
            "CLIPERASE forget by fraction [{}] (chance {chance:.3}); retain at .30 CLIPERASE {ce:.3} vs GA {ga:.3}",
            forget.join(", ")
        ),
    )
}

const REPORT_KEYS: &[&str] = &[
    "forget",
    "forget.image_retrieval",
    "forget.image_retrieval.recall@1",
    "forget.image_retrieval.recall@10",
    "forget.image_retrieval.recall@5",
    "forget.prompt_classes",
    "forget.samples",
    "forget.text_retrieval",
    "forget.text_retrieval.recall@1",
    "forget.text_retrieval.recall@10",
    "forget.text_retrieval.recall@5",
    "forget.zeroshot_prediction_acc",
    "forget.zeroshot_retrieval_acc",
    "meta",
    "meta.format_version",
    "meta.retrieval_positives",
    "meta.selector",
    "meta.zeroshot_retrieval_definition",
    "retain",
    "retain.image_retrieval",
    "retain.image_retrieval.recall@1",
    "retain.image_retrieval.recall@10",
    "retain.image_retrieval.recall@5",
    "retain.prompt_classes",
    "retain.samples",
    "retain.text_retrieval",
    "retain.text_retrieval.recall@1",
    "retain.text_retrieval.recall@10",
    "retain.text_retrieval.recall@5",
    "retain.zeroshot_prediction_acc",
    "retain.zeroshot_retrieval_acc",
];

fn criterion_7() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |ok: bool, what: &str| {
        pass &= ok;
        if !ok {
            notes.push(format!("{what} FAILED"));
        }
    };

    let config = CorpusConfig {
        seed: 3,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&config).unwrap();
    let text = corpus.to_text();
    check(text == generate_corpus(&config).unwrap().to_text(), "corpus rerun");
    check(Corpus::from_text(&text).unwrap() == corpus, "corpus round-trip");

    let run = || {
        let model = DualEncoderModel::init(&ArchConfig::default(), 3).unwrap();
        let cfg = cliperase::PretrainConfig {
            seed: 3,
            epochs: 5,
            ..Default::default()
        };
        cliperase::pretrain(model, &corpus, &cfg).unwrap()
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    let bytes = encode_checkpoint(&m1, &h1).unwrap();
    check(bytes == encode_checkpoint(&m2, &h2).unwrap(), "checkpoint rerun");
    let (back, hist): (DualEncoderModel, RunHistory) = decode_checkpoint(&bytes).unwrap();
    check(back == m1 && hist == h1, "checkpoint round-trip");

    let split = class_split(&corpus, 4);
    let prompts = corpus.class_prompts();
    let r1 = evaluate_suite(&m1, &split, &prompts).unwrap();
    let r2 = evaluate_suite(&m2, &split, &prompts).unwrap();
    check(r1.to_json() == r2.to_json() && r1.to_csv().unwrap() == r2.to_csv().unwrap(), "report rerun");
    let keys = json_key_paths(&serde_json::from_str(&r1.to_json()).unwrap());
    check(keys == REPORT_KEYS, "report schema");

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut disagreements = 0;
    let mut non_monotone = 0;
    for _ in 0..200 {
        let (q, g) = (rng.gen_range(1..=6), rng.gen_range(1..=12));
        let sim = Array2::from_shape_fn((q, g), |_| rng.gen_range(-4..=4) as f64 / 4.0);
        let positives: Vec<BTreeSet<usize>> = (0..q)
            .map(|_| {
                let mut s: BTreeSet<usize> = (0..g).filter(|_| rng.gen_bool(0.25)).collect();
                s.insert(rng.gen_range(0..g));
                s
            })
            .collect();
        let mut prev = 0.0;
        for k in 1..=g + 1 {
            let got = recall_at_k(sim.view(), &positives, k).unwrap();
            if got != sorted_recall(&sim, &positives, k) {
                disagreements += 1;
            }
            if got < prev {
                non_monotone += 1;
            }
            prev = got;
        }
    }
    check(disagreements == 0 && non_monotone == 0, "recall@k property");
    notes.push(format!(
        "corpus/checkpoint/report reruns and round-trips, {} report keys, recall@k on 200 instances: {disagreements} oracle disagreements, {non_monotone} monotonicity violations",
        REPORT_KEYS.len()
    ));
    outcome(pass, notes.join("; "))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("gradient correctness", criterion_1),
        ("loss identities", criterion_2),
        ("end-to-end unlearning", criterion_3),
        ("ablation ordering", criterion_4),
        ("baseline comparison", criterion_5),
        ("sweep robustness", criterion_6),
        ("determinism and formats", criterion_7),
    ];
    let total = Instant::now();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failures += 1;
        }
        println!(
            "criterion {} [{name}]: {} ({:.1?}) {}",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            start.elapsed(),
            result.detail
        );
    }
    let elapsed = total.elapsed();
    println!(
        "acceptance: {}/{} passed in {elapsed:.1?} (budget 15min)",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 || elapsed > Duration::from_secs(900) {
        std::process::exit(1);
    }
}
