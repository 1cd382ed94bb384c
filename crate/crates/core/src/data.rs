//! Synthetic paired-modality corpus, manifests, and batching.
//!
//! Every translation sample is a triplet: speech-like features, source
//! tokens, target tokens. Targets are a deterministic function of the
//! source (a fixed random bijection into the target vocabulary followed by
//! an adjacent-pair swap), so the task needs both lexical mapping and mild
//! reordering while keeping a closed-form oracle. Speech features render
//! each token as a run of noisy copies of a frozen prototype vector; the
//! codebook is independent of any model embedding so the task cannot be
//! solved by inverting a table the model owns.
//!
//! All randomness is derived from (corpus seed, purpose tag, index), so a
//! spec reproduces its corpus exactly, sample by sample. Feature values are
//! quantized to f32 at synthesis time: the in-memory corpus and the written
//! one are the same numbers.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::DataError;
use crate::rng::{child_seed, child_seed_n, rng_from};
use crate::tensor::Tensor;

/// Reserved vocabulary ids shared by every vocabulary in the workspace.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Count of reserved ids at the bottom of every vocabulary.
pub const SPECIALS: usize = 4;

/// Generation parameters for one synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub sigma_noise: f64,
    pub d_s: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_text_only: usize,
    pub seed: u64,
}

impl CorpusSpec {
    /// Desk-scale defaults: minutes of training, nontrivial reordering.
    pub fn desk_default() -> Self {
        Self {
            src_vocab: 40,
            tgt_vocab: 44,
            len_min: 5,
            len_max: 20,
            r_min: 2,
            r_max: 4,
            sigma_noise: 0.1,
            d_s: 16,
            n_train: 8000,
            n_dev: 500,
            n_test: 500,
            n_text_only: 8000,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.src_vocab < 8 || self.tgt_vocab < 8 {
            return Err(DataError::Contract(format!(
                "vocab sizes {}/{} below the minimum of 8",
                self.src_vocab, self.tgt_vocab
            )));
        }
        if self.tgt_vocab < self.src_vocab {
            return Err(DataError::Contract(format!(
                "target vocab {} too small to embed a bijection of {} source tokens",
                self.tgt_vocab, self.src_vocab
            )));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(DataError::Contract(format!(
                "length range [{}, {}] invalid",
                self.len_min, self.len_max
            )));
        }
        if self.r_min == 0 || self.r_min > self.r_max {
            return Err(DataError::Contract(format!(
                "frames-per-token range [{}, {}] invalid",
                self.r_min, self.r_max
            )));
        }
        if !(self.sigma_noise >= 0.0 && self.sigma_noise.is_finite()) {
            return Err(DataError::Contract(format!(
                "sigma_noise {} must be finite and >= 0",
                self.sigma_noise
            )));
        }
        if self.d_s == 0 {
            return Err(DataError::Contract("d_s must be positive".into()));
        }
        Ok(())
    }
}

/// One sample; `speech` is present iff the modality flag says so.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub id: String,
    pub speech: Option<Tensor>,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl TrainingSample {
    pub fn is_speech(&self) -> bool {
        self.speech.is_some()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<TrainingSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// The four splits: triplet train/dev/test plus a text-only pool.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub text_only: Dataset,
}

/// The fixed source-to-target token bijection, indexed by source id.
/// Reserved ids map to themselves and never occur in sentences.
pub fn target_map(spec: &CorpusSpec) -> Vec<usize> {
    let mut tgt_content: Vec<usize> = (SPECIALS..spec.tgt_vocab).collect();
    let mut rng = rng_from(child_seed(spec.seed, "bijection"));
    tgt_content.shuffle(&mut rng);
    let mut map: Vec<usize> = (0..spec.src_vocab).collect();
    for (i, slot) in map.iter_mut().enumerate().skip(SPECIALS) {
        *slot = tgt_content[i - SPECIALS];
    }
    map
}

/// Applies the target function: map every token, then swap adjacent pairs.
pub fn map_to_target(src: &[usize], map: &[usize]) -> Vec<usize> {
    let mut y: Vec<usize> = src.iter().map(|&t| map[t]).collect();
    let mut i = 0;
    while i + 1 < y.len() {
        y.swap(i, i + 1);
        i += 2;
    }
    y
}

/// Frozen prototype vectors, row per vocabulary id, quantized to f32.
pub fn codebook(spec: &CorpusSpec) -> Tensor {
    let mut rng = rng_from(child_seed(spec.seed, "codebook"));
    let normal = Normal::new(0.0, 1.0).expect("std");
    let data: Vec<f64> = (0..spec.src_vocab * spec.d_s)
        .map(|_| normal.sample(&mut rng) as f32 as f64)
        .collect();
    Tensor::new(vec![spec.src_vocab, spec.d_s], data).expect("shape")
}

/// Renders source tokens as frames: each token becomes r consecutive noisy
/// copies of its prototype, r drawn per token from [r_min, r_max].
pub fn synthesize_speech_features(
    src: &[usize],
    spec: &CorpusSpec,
    book: &Tensor,
    sample_seed: u64,
) -> Tensor {
    let mut rng = rng_from(sample_seed);
    let normal = Normal::new(0.0, spec.sigma_noise).expect("sigma");
    let d = spec.d_s;
    let mut data = Vec::new();
    for &tok in src {
        let r = rng.random_range(spec.r_min..=spec.r_max);
        let proto = book.row(tok);
        for _ in 0..r {
            for &p in proto {
                let v = if spec.sigma_noise == 0.0 {
                    p
                } else {
                    p + normal.sample(&mut rng)
                };
                data.push(v as f32 as f64);
            }
        }
    }
    let rows = data.len() / d;
    Tensor::new(vec![rows, d], data).expect("shape")
}

/// Generates all four splits. Splits are disjoint by source sentence and
/// the whole corpus is a pure function of the spec.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, DataError> {
    spec.validate()?;
    let map = target_map(spec);
    let book = codebook(spec);
    let mut sent_rng = rng_from(child_seed(spec.seed, "sentences"));
    let mut seen: HashSet<Vec<usize>> = HashSet::new();

    let mut draw_sentence = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<Vec<usize>, DataError> {
        for _ in 0..10_000 {
            let len = rng.random_range(spec.len_min..=spec.len_max);
            let s: Vec<usize> = (0..len)
                .map(|_| rng.random_range(SPECIALS..spec.src_vocab))
                .collect();
            if seen.insert(s.clone()) {
                return Ok(s);
            }
        }
        Err(DataError::Contract(
            "sentence space exhausted while drawing disjoint splits".into(),
        ))
    };

    let mut global_index = 0u64;
    let mut build = |name: &str,
                     n: usize,
                     speech: bool,
                     sent_rng: &mut rand_chacha::ChaCha8Rng|
     -> Result<Dataset, DataError> {
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let src = draw_sentence(sent_rng)?;
            let tgt = map_to_target(&src, &map);
            let feats = if speech {
                let seed = child_seed_n(spec.seed, "speech", global_index);
                Some(synthesize_speech_features(&src, spec, &book, seed))
            } else {
                None
            };
            global_index += 1;
            samples.push(TrainingSample {
                id: format!("{name}-{i:06}"),
                speech: feats,
                src,
                tgt,
            });
        }
        Ok(Dataset { samples })
    };

    Ok(Corpus {
        train: build("train", spec.n_train, true, &mut sent_rng)?,
        dev: build("dev", spec.n_dev, true, &mut sent_rng)?,
        test: build("test", spec.n_test, true, &mut sent_rng)?,
        text_only: build("text", spec.n_text_only, false, &mut sent_rng)?,
    })
}

fn ids_to_str(ids: &[usize]) -> String {
    ids.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_ids(s: &str, line: usize) -> Result<Vec<usize>, DataError> {
    s.split(' ')
        .map(|t| {
            t.parse::<usize>().map_err(|_| {
                DataError::Manifest(format!("line {line}: bad token id {t:?}"))
            })
        })
        .collect()
}

/// Writes `{name}.tsv` (manifest) and, when the split carries speech,
/// `{name}.feats` (raw little-endian f32 frames).
pub fn write_dataset(dir: &Path, name: &str, ds: &Dataset) -> Result<(), DataError> {
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(
        dir.join(format!("{name}.tsv")),
    )?);
    let mut feats: Option<std::io::BufWriter<std::fs::File>> = None;
    let mut offset = 0u64;
    for s in &ds.samples {
        match &s.speech {
            Some(x) => {
                let f = match feats.as_mut() {
                    Some(f) => f,
                    None => {
                        feats = Some(std::io::BufWriter::new(std::fs::File::create(
                            dir.join(format!("{name}.feats")),
                        )?));
                        feats.as_mut().expect("just set")
                    }
                };
                let n = x.shape()[0];
                writeln!(
                    manifest,
                    "{}\tspeech\t{}\t{}\t{}\t{}",
                    s.id,
                    ids_to_str(&s.src),
                    ids_to_str(&s.tgt),
                    offset,
                    n
                )?;
                for &v in x.data() {
                    f.write_all(&(v as f32).to_le_bytes())?;
                }
                offset += (x.numel() * 4) as u64;
            }
            None => {
                writeln!(
                    manifest,
                    "{}\ttext\t{}\t{}",
                    s.id,
                    ids_to_str(&s.src),
                    ids_to_str(&s.tgt)
                )?;
            }
        }
    }
    manifest.flush()?;
    if let Some(mut f) = feats {
        f.flush()?;
    }
    Ok(())
}

/// Writes all four splits into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    write_dataset(dir, "train", &corpus.train)?;
    write_dataset(dir, "dev", &corpus.dev)?;
    write_dataset(dir, "test", &corpus.test)?;
    write_dataset(dir, "text", &corpus.text_only)?;
    Ok(())
}

/// Loads one split written by [`write_dataset`]. `d_s` is the feature width
/// the manifest's (offset, N) pairs are resolved against.
pub fn load_dataset(dir: &Path, name: &str, d_s: usize) -> Result<Dataset, DataError> {
    let manifest_path = dir.join(format!("{name}.tsv"));
    let file = std::fs::File::open(&manifest_path)?;
    let feats_path = dir.join(format!("{name}.feats"));
    let feats_bytes: Option<Vec<u8>> = if feats_path.exists() {
        Some(std::fs::read(&feats_path)?)
    } else {
        None
    };

    let mut samples = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        let sample = match fields.as_slice() {
            [id, "text", src, tgt] => TrainingSample {
                id: (*id).to_string(),
                speech: None,
                src: parse_ids(src, lineno)?,
                tgt: parse_ids(tgt, lineno)?,
            },
            [id, "speech", src, tgt, off, n] => {
                let bytes = feats_bytes.as_ref().ok_or_else(|| {
                    DataError::Manifest(format!(
                        "line {lineno}: speech sample but {name}.feats is missing"
                    ))
                })?;
                let off: usize = off.parse().map_err(|_| {
                    DataError::Manifest(format!("line {lineno}: bad offset {off:?}"))
                })?;
                let n: usize = n.parse().map_err(|_| {
                    DataError::Manifest(format!("line {lineno}: bad frame count {n:?}"))
                })?;
                let need = n * d_s * 4;
                if off + need > bytes.len() {
                    return Err(DataError::Manifest(format!(
                        "line {lineno}: features [{off}, {}) past end of file ({})",
                        off + need,
                        bytes.len()
                    )));
                }
                let data: Vec<f64> = bytes[off..off + need]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk")) as f64)
                    .collect();
                TrainingSample {
                    id: (*id).to_string(),
                    speech: Some(Tensor::new(vec![n, d_s], data).map_err(|e| {
                        DataError::Manifest(format!("line {lineno}: {e}"))
                    })?),
                    src: parse_ids(src, lineno)?,
                    tgt: parse_ids(tgt, lineno)?,
                }
            }
            _ => {
                return Err(DataError::Manifest(format!(
                    "line {lineno}: expected 4 (text) or 6 (speech) fields, got {}",
                    fields.len()
                )))
            }
        };
        samples.push(sample);
    }
    Ok(Dataset { samples })
}

/// Batching cost: raw frames for speech samples, tokens for text samples.
pub fn sample_cost(s: &TrainingSample) -> usize {
    match &s.speech {
        Some(x) => x.shape()[0],
        None => s.src.len().max(s.tgt.len()),
    }
}

/// Length-bucketed index batches under a padded-cost budget: a batch of B
/// samples costs B times its longest member. Batch order is shuffled per
/// (seed, epoch); membership is deterministic across epochs.
pub fn make_batches(
    ds: &Dataset,
    budget: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if ds.is_empty() {
        return Err(DataError::Contract("batching an empty dataset".into()));
    }
    let costs: Vec<usize> = ds.samples.iter().map(sample_cost).collect();
    if let Some((i, &c)) = costs.iter().enumerate().find(|(_, &c)| c > budget) {
        return Err(DataError::Contract(format!(
            "sample {} costs {c}, over the batch budget {budget}",
            ds.samples[i].id
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(costs[i]), i));

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_max = 0usize;
    for i in order {
        let c = costs[i];
        let max = cur_max.max(c);
        if !cur.is_empty() && (cur.len() + 1) * max > budget {
            batches.push(std::mem::take(&mut cur));
            cur_max = 0;
        }
        cur_max = cur_max.max(c);
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }

    let mut rng = rng_from(child_seed_n(seed, "batches", epoch));
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Row mask for a packed batch: true marks a real row. Returns (t_max, mask
/// of length B * t_max).
pub fn padding_mask(lens: &[usize]) -> (usize, Vec<bool>) {
    let t_max = lens.iter().copied().max().unwrap_or(0);
    let mut mask = vec![false; lens.len() * t_max];
    for (i, &l) in lens.iter().enumerate() {
        mask[i * t_max..i * t_max + l].fill(true);
    }
    (t_max, mask)
}

/// Which stream a scheduled step draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Speech,
    Text,
}

/// Strict speech/text alternation; the shorter stream cycles until the
/// longer is exhausted. Entries are (task, batch index within its stream).
pub fn alternating_schedule(
    n_speech: usize,
    n_text: usize,
) -> Result<Vec<(Task, usize)>, DataError> {
    if n_speech == 0 || n_text == 0 {
        return Err(DataError::Contract(
            "alternating schedule needs both streams non-empty".into(),
        ));
    }
    let steps = n_speech.max(n_text);
    let mut out = Vec::with_capacity(2 * steps);
    for k in 0..steps {
        out.push((Task::Speech, k % n_speech));
        out.push((Task::Text, k % n_text));
    }
    Ok(out)
}
