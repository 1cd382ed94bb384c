//! Beam-search decoding and corpus BLEU.
//!
//! Decoding re-runs the decoder on the full prefix each step: no incremental
//! state is cached, so every step scores against exactly the same math the
//! trainer saw. Active hypotheses always share a length, which keeps each
//! step a single rectangular batch.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use crate::data::{Dataset, EOS};
use crate::error::ModelError;
use crate::graph::Graph;
use crate::model::{Encoded, Model, ModelKind, SampleInput};
use crate::tensor::Tensor;

/// One decoded candidate. `tokens` holds the generated ids and ends with EOS
/// unless the search hit `max_len` first; `score` is logprob / tokens.len().
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub score: f64,
}

impl Hypothesis {
    /// The tokens with the terminating EOS stripped.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == EOS => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Decoding budget: twice the input length plus headroom. Speech inputs count
/// frames after the stride-2 subsampling.
pub fn default_max_len(input: &SampleInput) -> usize {
    let n = match input {
        SampleInput::Speech(x) => x.shape()[0].div_ceil(2),
        SampleInput::Text(t) => t.len(),
    };
    2 * n + 8
}

/// Beam search over a batched next-token scorer. The scorer receives the
/// current prefixes (all the same length) and returns one log-probability
/// row per prefix. Candidates are ranked by cumulative log-probability with
/// ties broken toward the lowest token id, so beam 1 reproduces greedy
/// decoding exactly. A candidate that emits EOS retires to the finished pool
/// and its beam slot is consumed for the step.
fn beam_over<F>(
    mut scorer: F,
    beam_size: usize,
    max_len: usize,
) -> Result<Hypothesis, ModelError>
where
    F: FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>, ModelError>,
{
    if beam_size < 1 {
        return Err(ModelError::Contract("beam size must be at least 1".into()));
    }
    if max_len < 1 {
        return Err(ModelError::Contract("max_len must be at least 1".into()));
    }
    let mut active: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = active.iter().map(|(t, _)| t.clone()).collect();
        let rows = scorer(&prefixes)?;
        if rows.len() != active.len() {
            return Err(ModelError::Contract(format!(
                "scorer returned {} rows for {} prefixes",
                rows.len(),
                active.len()
            )));
        }
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, row) in rows.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                cands.push((active[h].1 + lp, tok, h));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam_size);
        let mut next = Vec::with_capacity(beam_size);
        for (lp, tok, h) in cands {
            let mut tokens = active[h].0.clone();
            tokens.push(tok);
            if tok == EOS {
                let score = lp / tokens.len() as f64;
                finished.push(Hypothesis { tokens, logprob: lp, score });
            } else {
                next.push((tokens, lp));
            }
        }
        active = next;
    }
    let best_finished = finished
        .into_iter()
        .reduce(|best, h| if h.score > best.score { h } else { best });
    if let Some(h) = best_finished {
        return Ok(h);
    }
    let (tokens, logprob) = active
        .into_iter()
        .reduce(|best, h| if h.1 > best.1 { h } else { best })
        .expect("max_len >= 1 leaves at least one hypothesis");
    let score = logprob / tokens.len() as f64;
    Ok(Hypothesis { tokens, logprob, score })
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

/// Scores a batch of equal-length prefixes against one encoded input by
/// replicating its states into a constant rectangular batch. The prefix is
/// extended by one dummy token so the final row conditions on all of it;
/// causal masking keeps the dummy out of every score.
fn score_prefixes(
    model: &Model,
    h: &Tensor,
    prefixes: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>, ModelError> {
    let n = prefixes.len();
    let t = prefixes[0].len();
    let rows = h.shape()[0];
    let d = h.shape()[1];
    let mut tile = Vec::with_capacity(n * rows * d);
    for _ in 0..n {
        tile.extend_from_slice(h.data());
    }
    let mut g = Graph::new();
    let enc = Encoded {
        h: g.constant(Tensor::new(vec![n * rows, d], tile)?),
        t_max: rows,
        lens: vec![rows; n],
    };
    let targets: Vec<Vec<usize>> = prefixes
        .iter()
        .map(|p| {
            let mut y = p.clone();
            y.push(EOS);
            y
        })
        .collect();
    let trefs: Vec<&[usize]> = targets.iter().map(|y| y.as_slice()).collect();
    let dec = model.decode_batch(&mut g, &enc, &trefs, false)?;
    let logits = g.value(dec.logits);
    let v = model.decoder_vocab();
    Ok((0..n)
        .map(|i| log_softmax_row(&logits.data()[(i * dec.k_max + t) * v..][..v]))
        .collect())
}

/// Decodes one input with the given beam. The model runs in eval mode.
pub fn beam_search(
    model: &Model,
    input: SampleInput,
    beam_size: usize,
    max_len: usize,
) -> Result<Hypothesis, ModelError> {
    let h = match input {
        SampleInput::Speech(x) => model.encode_speech(x)?,
        SampleInput::Text(t) => model.encode_text(t)?,
    };
    beam_over(|prefixes| score_prefixes(model, &h, prefixes), beam_size, max_len)
}

/// Decodes every sample of a dataset with the model's natural input side:
/// ASR and joint models read speech, MT models read source tokens. Returns
/// (id, tokens) pairs with the terminating EOS stripped.
pub fn decode_dataset(
    model: &Model,
    ds: &Dataset,
    beam_size: usize,
) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
    let mut out = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let input = match model.kind() {
            ModelKind::Mt => SampleInput::Text(&s.src),
            _ => SampleInput::Speech(s.speech.as_ref().ok_or_else(|| {
                ModelError::Contract(format!("sample {} has no speech features", s.id))
            })?),
        };
        let max_len = default_max_len(&input);
        let hyp = beam_search(model, input, beam_size, max_len)?;
        out.push((s.id.clone(), hyp.content().to_vec()));
    }
    Ok(out)
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m: HashMap<&[usize], usize> = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 over token-id sequences: geometric mean of clipped n-gram
/// precisions for n = 1..4 times the brevity penalty
/// exp(min(0, 1 − ref_len/hyp_len)), with corpus-level counts and no
/// smoothing, so any empty precision yields 0.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64, ModelError> {
    if hyps.len() != refs.len() {
        return Err(ModelError::Contract(format!(
            "{} hypotheses against {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.is_empty() {
        return Err(ModelError::Contract("references must be non-empty".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &count) in &hc {
                matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        if matches[n] == 0 || totals[n] == 0 {
            return Ok(0.0);
        }
        log_p += (matches[n] as f64 / totals[n] as f64).ln();
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(100.0 * bp * (log_p / 4.0).exp())
}

/// Writes one line per sample: id, a tab, then space-separated token ids.
pub fn write_hypotheses(path: &Path, rows: &[(String, Vec<usize>)]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (id, toks) in rows {
        let joined: Vec<String> = toks.iter().map(|t| t.to_string()).collect();
        writeln!(w, "{id}\t{}", joined.join(" "))?;
    }
    Ok(())
}

/// Reads the format produced by `write_hypotheses`.
pub fn read_hypotheses(path: &Path) -> std::io::Result<Vec<(String, Vec<usize>)>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let bad = || {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: malformed hypothesis line", path.display(), ln + 1),
            )
        };
        let (id, rest) = line.split_once('\t').ok_or_else(bad)?;
        let mut toks = Vec::new();
        for part in rest.split_whitespace() {
            toks.push(part.parse::<usize>().map_err(|_| bad())?);
        }
        out.push((id.to_string(), toks));
    }
    Ok(out)
}
