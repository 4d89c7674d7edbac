//! Synthetic paired image/caption corpus, forget/retain splits, batching and
//! the line-oriented corpus file format.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::PAD_TOKEN;

pub const CORPUS_FORMAT_VERSION: u32 = 1;
const CORPUS_MAGIC: &str = "cliperase-corpus";

/// Vocabulary ids of the fixed template words.
const TOKEN_A: u32 = 1;
const TOKEN_PHOTO: u32 = 2;
const TOKEN_OF: u32 = 3;
const FIRST_CLASS_TOKEN: u32 = 4;
const TEMPLATE_LEN: usize = 5;

const CLASS_NAMES: [&str; 32] = [
    "apple", "bicycle", "car", "dog", "elephant", "flower", "guitar", "house", "island",
    "jacket", "kite", "lamp", "mountain", "notebook", "orange", "piano", "queen", "rabbit",
    "ship", "tree", "umbrella", "violin", "whale", "xylophone", "yacht", "zebra", "bridge",
    "castle", "dolphin", "forest", "garden", "helmet",
];

const FILLER_NAMES: [&str; 16] = [
    "small", "red", "blue", "old", "bright", "dark", "tiny", "large", "green", "shiny",
    "wooden", "quiet", "round", "soft", "tall", "warm",
];

/// Parameters of the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_classes: usize,
    pub pairs_per_class: usize,
    pub d_img: usize,
    /// Standard deviation of the per-coordinate Gaussian image noise.
    pub noise_std: f64,
    /// Number of distinct filler words in the vocabulary.
    pub num_fillers: usize,
    /// Upper bound on filler words inserted into a single caption.
    pub max_fillers_per_caption: usize,
    pub max_len: usize,
    /// Total number of token ids available, padding included.
    pub vocab_capacity: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            pairs_per_class: 100,
            d_img: 64,
            noise_std: 0.1,
            num_fillers: 8,
            max_fillers_per_caption: 3,
            max_len: 8,
            vocab_capacity: 64,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.pairs_per_class == 0 {
            return Err(Error::Config("pairs_per_class must be positive".into()));
        }
        if self.d_img < self.num_classes {
            return Err(Error::Config(format!(
                "d_img ({}) must be at least num_classes ({}) for orthogonal prototypes",
                self.d_img, self.num_classes
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be finite and nonnegative".into()));
        }
        if self.max_len < TEMPLATE_LEN {
            return Err(Error::Config(format!(
                "max_len must be at least {TEMPLATE_LEN} to hold the caption template"
            )));
        }
        if self.num_fillers > FILLER_NAMES.len() {
            return Err(Error::Config(format!(
                "at most {} filler words are available",
                FILLER_NAMES.len()
            )));
        }
        let needed = FIRST_CLASS_TOKEN as usize + self.num_classes + self.num_fillers;
        if needed > self.vocab_capacity {
            return Err(Error::Config(format!(
                "{} classes and {} fillers need {needed} token ids, vocabulary capacity is {}",
                self.num_classes, self.num_fillers, self.vocab_capacity
            )));
        }
        Ok(())
    }
}

/// One image/caption pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub sample_id: u64,
    pub class_id: usize,
    pub caption: Vec<u32>,
    pub image: Vec<f64>,
}

/// The full dataset D together with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vec<String>,
    pub num_classes: usize,
    pub d_img: usize,
    pub max_len: usize,
    /// Name token of each class.
    pub class_tokens: Vec<u32>,
    pub samples: Vec<PairSample>,
}

/// A materialized minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub sample_ids: Vec<u64>,
    pub class_ids: Vec<usize>,
    /// `N × d_img`
    pub images: Array2<f64>,
    pub captions: Vec<Vec<u32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

fn class_name(c: usize) -> String {
    CLASS_NAMES
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{c}"))
}

/// Random orthonormal class prototypes (rows), deterministic in the config seed.
pub fn class_prototypes(config: &CorpusConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut protos = Array2::<f64>::zeros((config.num_classes, config.d_img));
    for c in 0..config.num_classes {
        // Gram-Schmidt; a fresh draw is linearly independent with probability 1
        loop {
            let mut v: ndarray::Array1<f64> =
                (0..config.d_img).map(|_| normal.sample(&mut rng)).collect();
            for prev in protos.outer_iter().take(c) {
                let proj = v.dot(&prev);
                v.scaled_add(-proj, &prev);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-6 {
                protos.row_mut(c).assign(&(v / norm));
                break;
            }
        }
    }
    Ok(protos)
}

/// Generates `num_classes × pairs_per_class` pairs. Images are the class
/// prototype plus Gaussian noise; captions follow "a photo of a [fillers]
/// {class}".
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    let protos = class_prototypes(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, config.noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("noise_std: {e}")))?;

    let mut vocab: Vec<String> = ["<pad>", "a", "photo", "of"].iter().map(|s| s.to_string()).collect();
    vocab.extend((0..config.num_classes).map(class_name));
    vocab.extend(FILLER_NAMES[..config.num_fillers].iter().map(|s| s.to_string()));
    let class_tokens: Vec<u32> = (0..config.num_classes)
        .map(|c| FIRST_CLASS_TOKEN + c as u32)
        .collect();
    let first_filler = FIRST_CLASS_TOKEN + config.num_classes as u32;
    let max_fillers = config
        .max_fillers_per_caption
        .min(config.max_len - TEMPLATE_LEN)
        .min(config.num_fillers);

    let mut samples = Vec::with_capacity(config.num_classes * config.pairs_per_class);
    for (c, &class_token) in class_tokens.iter().enumerate() {
        for _ in 0..config.pairs_per_class {
            let image: Vec<f64> = protos
                .row(c)
                .iter()
                .map(|&p| p + noise.sample(&mut rng))
                .collect();
            let n_fill = rng.gen_range(0..=max_fillers);
            let mut caption = vec![TOKEN_A, TOKEN_PHOTO, TOKEN_OF, TOKEN_A];
            for _ in 0..n_fill {
                caption.push(first_filler + rng.gen_range(0..config.num_fillers as u32));
            }
            caption.push(class_token);
            samples.push(PairSample {
                sample_id: samples.len() as u64,
                class_id: c,
                caption,
                image,
            });
        }
    }
    Ok(Corpus {
        vocab,
        num_classes: config.num_classes,
        d_img: config.d_img,
        max_len: config.max_len,
        class_tokens,
        samples,
    })
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn token_id(&self, word: &str) -> Option<u32> {
        self.vocab.iter().position(|w| w == word).map(|i| i as u32)
    }

    /// Zero-shot prompt for one class: "a photo of a {class}".
    pub fn prompt(&self, class_id: usize) -> Vec<u32> {
        vec![TOKEN_A, TOKEN_PHOTO, TOKEN_OF, TOKEN_A, self.class_tokens[class_id]]
    }

    pub fn class_prompts(&self) -> Vec<Vec<u32>> {
        (0..self.num_classes).map(|c| self.prompt(c)).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut images = Array2::zeros((indices.len(), self.d_img));
        for (mut row, &i) in images.outer_iter_mut().zip(indices) {
            row.iter_mut()
                .zip(&self.samples[i].image)
                .for_each(|(d, &s)| *d = s);
        }
        Batch {
            sample_ids: indices.iter().map(|&i| self.samples[i].sample_id).collect(),
            class_ids: indices.iter().map(|&i| self.samples[i].class_id).collect(),
            images,
            captions: indices.iter().map(|&i| self.samples[i].caption.clone()).collect(),
        }
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).collect()
    }

    /// Writes the corpus atomically in the line-oriented text format.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CORPUS_MAGIC} {CORPUS_FORMAT_VERSION}");
        let _ = writeln!(out, "classes {}", self.num_classes);
        let _ = writeln!(out, "d_img {}", self.d_img);
        let _ = writeln!(out, "max_len {}", self.max_len);
        let _ = writeln!(out, "vocab {} {}", self.vocab.len(), self.vocab.join(" "));
        let toks: Vec<String> = self.class_tokens.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "class_tokens {}", toks.join(" "));
        let _ = writeln!(out, "samples {}", self.samples.len());
        for s in &self.samples {
            let _ = write!(out, "{} {} {}", s.sample_id, s.class_id, s.caption.len());
            for t in &s.caption {
                let _ = write!(out, " {t}");
            }
            for v in &s.image {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(0, format!("unexpected end of file, expected {what}")))
        };

        let (ln, header) = next("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CORPUS_MAGIC) {
            return Err(Error::parse(ln, "not a corpus file"));
        }
        let version: u32 = parse_field(ln, parts.next(), "version")?;
        if version != CORPUS_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CORPUS_FORMAT_VERSION,
            });
        }

        let num_classes: usize = keyed_value(next("classes")?, "classes")?;
        let d_img: usize = keyed_value(next("d_img")?, "d_img")?;
        let max_len: usize = keyed_value(next("max_len")?, "max_len")?;

        let (ln, vocab_line) = next("vocab")?;
        let mut parts = vocab_line.split_whitespace();
        expect_key(ln, parts.next(), "vocab")?;
        let vocab_len: usize = parse_field(ln, parts.next(), "vocab size")?;
        let vocab: Vec<String> = parts.map(str::to_string).collect();
        if vocab.len() != vocab_len {
            return Err(Error::parse(
                ln,
                format!("vocab lists {} words, header says {vocab_len}", vocab.len()),
            ));
        }

        let (ln, class_line) = next("class_tokens")?;
        let mut parts = class_line.split_whitespace();
        expect_key(ln, parts.next(), "class_tokens")?;
        let class_tokens = parts
            .map(|p| p.parse::<u32>().map_err(|e| Error::parse(ln, format!("class token: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if class_tokens.len() != num_classes
            || class_tokens.iter().any(|&t| t as usize >= vocab_len)
        {
            return Err(Error::parse(ln, "class token list inconsistent with header"));
        }

        let n_samples: usize = keyed_value(next("samples")?, "samples")?;
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let (ln, line) = next("sample record")?;
            samples.push(parse_sample(ln, line, num_classes, d_img, max_len, vocab_len)?);
        }
        let (ln, trailer) = next("end marker")?;
        if trailer.trim() != "end" {
            return Err(Error::parse(ln, "expected end marker"));
        }
        Ok(Corpus {
            vocab,
            num_classes,
            d_img,
            max_len,
            class_tokens,
            samples,
        })
    }
}

fn expect_key(line: usize, got: Option<&str>, key: &str) -> Result<()> {
    if got == Some(key) {
        Ok(())
    } else {
        Err(Error::parse(line, format!("expected `{key}`")))
    }
}

fn parse_field<T: FromStr>(line: usize, field: Option<&str>, what: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    let field = field.ok_or_else(|| Error::parse(line, format!("missing {what}")))?;
    field
        .parse()
        .map_err(|e| Error::parse(line, format!("invalid {what} `{field}`: {e}")))
}

fn keyed_value<T: FromStr>((line, text): (usize, &str), key: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    let mut parts = text.split_whitespace();
    expect_key(line, parts.next(), key)?;
    let value = parse_field(line, parts.next(), key)?;
    if parts.next().is_some() {
        return Err(Error::parse(line, format!("trailing data after {key}")));
    }
    Ok(value)
}

fn parse_sample(
    ln: usize,
    line: &str,
    num_classes: usize,
    d_img: usize,
    max_len: usize,
    vocab_len: usize,
) -> Result<PairSample> {
    let mut parts = line.split_whitespace();
    let sample_id: u64 = parse_field(ln, parts.next(), "sample id")?;
    let class_id: usize = parse_field(ln, parts.next(), "class id")?;
    if class_id >= num_classes {
        return Err(Error::parse(ln, format!("class id {class_id} out of range")));
    }
    let n_tok: usize = parse_field(ln, parts.next(), "caption length")?;
    if n_tok > max_len {
        return Err(Error::parse(ln, format!("caption longer than max_len {max_len}")));
    }
    let mut caption = Vec::with_capacity(n_tok);
    for _ in 0..n_tok {
        let t: u32 = parse_field(ln, parts.next(), "token id")?;
        if t as usize >= vocab_len {
            return Err(Error::parse(ln, format!("token id {t} outside vocabulary")));
        }
        caption.push(t);
    }
    let mut image = Vec::with_capacity(d_img);
    for _ in 0..d_img {
        let v: f64 = parse_field(ln, parts.next(), "image value")?;
        if !v.is_finite() {
            return Err(Error::parse(ln, "non-finite image value"));
        }
        image.push(v);
    }
    if parts.next().is_some() {
        return Err(Error::parse(ln, "trailing data after image values"));
    }
    Ok(PairSample {
        sample_id,
        class_id,
        caption,
        image,
    })
}

/// Rule that selected the forget set.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSelector {
    Classes(BTreeSet<usize>),
    Keyword(u32),
}

impl fmt::Display for SplitSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSelector::Classes(classes) => {
                let list: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
                write!(f, "classes {{{}}}", list.join(","))
            }
            SplitSelector::Keyword(token) => write!(f, "keyword token {token}"),
        }
    }
}

/// A corpus partitioned into forget set D_f and retain set D_r = D − D_f.
///
/// Indices refer to positions in `corpus.samples` and are kept sorted.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub corpus: Corpus,
    forget: Vec<usize>,
    retain: Vec<usize>,
    pub selector: SplitSelector,
}

impl SplitDataset {
    fn from_predicate(
        corpus: &Corpus,
        selector: SplitSelector,
        in_forget: impl Fn(&PairSample) -> bool,
    ) -> Self {
        let (forget, retain): (Vec<usize>, Vec<usize>) =
            (0..corpus.samples.len()).partition(|&i| in_forget(&corpus.samples[i]));
        Self {
            corpus: corpus.clone(),
            forget,
            retain,
            selector,
        }
    }

    pub fn forget_indices(&self) -> &[usize] {
        &self.forget
    }

    pub fn retain_indices(&self) -> &[usize] {
        &self.retain
    }

    pub fn forget_ids(&self) -> BTreeSet<u64> {
        self.forget.iter().map(|&i| self.corpus.samples[i].sample_id).collect()
    }

    pub fn retain_ids(&self) -> BTreeSet<u64> {
        self.retain.iter().map(|&i| self.corpus.samples[i].sample_id).collect()
    }

    /// Classes that have at least one sample in the forget set.
    pub fn forget_classes(&self) -> BTreeSet<usize> {
        self.forget.iter().map(|&i| self.corpus.samples[i].class_id).collect()
    }

    pub fn indices(&self, which: Subset) -> Vec<usize> {
        match which {
            Subset::Forget => self.forget.clone(),
            Subset::Retain => self.retain.clone(),
            Subset::All => self.corpus.all_indices(),
        }
    }
}

/// Forget every sample whose class is in `forget_classes`.
pub fn split_by_class(corpus: &Corpus, forget_classes: &BTreeSet<usize>) -> Result<SplitDataset> {
    if forget_classes.is_empty() {
        return Err(Error::Config("forget class set is empty".into()));
    }
    if let Some(&bad) = forget_classes.iter().find(|&&c| c >= corpus.num_classes) {
        return Err(Error::Config(format!(
            "forget class {bad} does not exist (corpus has {} classes)",
            corpus.num_classes
        )));
    }
    if forget_classes.len() == corpus.num_classes {
        return Err(Error::Config("cannot forget every class".into()));
    }
    let split = SplitDataset::from_predicate(
        corpus,
        SplitSelector::Classes(forget_classes.clone()),
        |s| forget_classes.contains(&s.class_id),
    );
    if split.forget.is_empty() || split.retain.is_empty() {
        return Err(Error::Config("class split leaves an empty side".into()));
    }
    Ok(split)
}

/// Forget every sample whose caption contains `token`.
pub fn split_by_keyword(corpus: &Corpus, token: u32) -> Result<SplitDataset> {
    if token as usize >= corpus.vocab.len() || token == PAD_TOKEN {
        return Err(Error::Config(format!("token {token} is not a vocabulary word")));
    }
    let split = SplitDataset::from_predicate(corpus, SplitSelector::Keyword(token), |s| {
        s.caption.contains(&token)
    });
    let word = &corpus.vocab[token as usize];
    if split.forget.is_empty() {
        return Err(Error::Config(format!("keyword `{word}` matches no caption")));
    }
    if split.retain.is_empty() {
        return Err(Error::Config(format!("keyword `{word}` matches every caption")));
    }
    Ok(split)
}

/// Forget `round(fraction · C)` classes chosen by a seeded shuffle. Shuffles
/// with the same seed are nested: a larger fraction forgets a superset.
pub fn split_by_fraction(corpus: &Corpus, fraction: f64, seed: u64) -> Result<SplitDataset> {
    let classes = classes_for_fraction(corpus.num_classes, fraction, seed)?;
    if classes.is_empty() {
        return Err(Error::Config(format!(
            "fraction {fraction} of {} classes rounds to zero classes",
            corpus.num_classes
        )));
    }
    split_by_class(corpus, &classes)
}

/// The first `round(fraction · num_classes)` classes of a seeded permutation.
pub fn classes_for_fraction(num_classes: usize, fraction: f64, seed: u64) -> Result<BTreeSet<usize>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("forget fraction {fraction} outside [0, 1)")));
    }
    let count = (fraction * num_classes as f64).round() as usize;
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xc1a55)));
    Ok(order.into_iter().take(count).collect())
}

/// Textual split selector used on the command line:
/// `class:3`, `class:0,4`, `keyword:car` or `fraction:0.1`.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    Classes(BTreeSet<usize>),
    Keyword(String),
    Fraction(f64),
}

impl FromStr for SplitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("split spec `{s}` must look like kind:value")))?;
        match kind {
            "class" | "classes" => value
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Config(format!("class id `{c}`: {e}")))
                })
                .collect::<Result<BTreeSet<_>>>()
                .map(SplitSpec::Classes),
            "keyword" => Ok(SplitSpec::Keyword(value.to_string())),
            "fraction" => value
                .parse::<f64>()
                .map(SplitSpec::Fraction)
                .map_err(|e| Error::Config(format!("fraction `{value}`: {e}"))),
            other => Err(Error::Config(format!("unknown split kind `{other}`"))),
        }
    }
}

impl SplitSpec {
    pub fn apply(&self, corpus: &Corpus, seed: u64) -> Result<SplitDataset> {
        match self {
            SplitSpec::Classes(classes) => split_by_class(corpus, classes),
            SplitSpec::Keyword(word) => {
                let token = corpus
                    .token_id(word)
                    .ok_or_else(|| Error::Config(format!("keyword `{word}` not in vocabulary")))?;
                split_by_keyword(corpus, token)
            }
            SplitSpec::Fraction(f) => split_by_fraction(corpus, *f, seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Forget,
    Retain,
    All,
}

impl Subset {
    fn tag(self) -> u64 {
        match self {
            Subset::Forget => 1,
            Subset::Retain => 2,
            Subset::All => 3,
        }
    }
}

/// SplitMix64-style mixing of two seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded permutation of `indices`, chunked into batches; the final partial
/// batch is kept.
pub fn shuffled_batches(indices: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if indices.is_empty() {
        return Err(Error::Input("cannot batch an empty subset".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// One epoch of batches over a subset of `split`, ordered by `(epoch_seed, which)`.
pub fn batches(
    split: &SplitDataset,
    which: Subset,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    shuffled_batches(&split.indices(which), batch_size, mix_seed(epoch_seed, which.tag()))
}
