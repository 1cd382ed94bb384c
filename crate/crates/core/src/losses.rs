//! Training objectives: label-smoothed NLL, cross-attentive reconstruction,
//! online distillation, and their weighted combination.
//!
//! Position convention is row-major: encoder states are [T, d], logits are
//! [K, |V|]. Every loss is averaged per target token (or per text position
//! for the reconstruction term), so the mixing weights transfer across batch
//! sizes. The packed `_sum` variants return unnormalized sums plus counts;
//! the trainer divides by window totals so gradient accumulation is exact.
//!
//! The text side of the reconstruction loss is detached at entry: no
//! gradient reaches text-branch parameters through the similarity matrix or
//! either reconstruction. The distillation teacher is likewise detached.

use crate::data::PAD;
use crate::error::ModelError;
use crate::graph::{Graph, Var};
use crate::model::{Encoded, Model};
use crate::tensor::Tensor;

/// Mixing weights for the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.8, lambda: 0.02, label_smoothing: 0.1 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, lambda: f64, label_smoothing: f64) -> Result<Self, ModelError> {
        let w = Self { alpha, lambda, label_smoothing };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(ModelError::Contract(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::Contract(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(ModelError::Contract(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Per-term values of one combined-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub nll_st: f64,
    pub nll_mt: f64,
    pub kd: f64,
    pub car: f64,
    pub total: f64,
}

/// One parallel triplet: speech features, source text, target text.
#[derive(Debug, Clone, Copy)]
pub struct TripletRef<'a> {
    pub speech: &'a Tensor,
    pub src_text: &'a [usize],
    pub tgt_text: &'a [usize],
}

/// Pairwise cosine similarities between state rows: out[i][j] compares
/// speech position i with text position j. Zero-norm rows are clamped in
/// the denominator and logged as a degenerate state.
pub fn similarity_matrix(g: &mut Graph, hs: Var, ht: Var) -> Result<Var, ModelError> {
    let (s, clamped) = g.cosine_sim(hs, ht)?;
    if clamped {
        log::warn!("similarity_matrix: zero-norm state row, denominator clamped");
    }
    Ok(s)
}

/// Attends the speech states into text positions: each output row j is the
/// convex combination of `hs` rows weighted by softmax over column j of `s`.
pub fn reconstruct(g: &mut Graph, hs: Var, s: Var) -> Result<Var, ModelError> {
    let (n_s, _) = g.value(s).dims2()?;
    let (n_h, _) = g.value(hs).dims2()?;
    if n_s != n_h {
        return Err(ModelError::Contract(format!(
            "reconstruct: similarity has {n_s} rows, states have {n_h}"
        )));
    }
    let a = g.softmax_cols(s)?;
    let at = g.transpose(a)?;
    Ok(g.matmul(at, hs)?)
}

/// Self-reconstruction of the text states through their own similarities.
pub fn self_reconstruct(g: &mut Graph, ht: Var) -> Result<Var, ModelError> {
    let s = similarity_matrix(g, ht, ht)?;
    reconstruct(g, ht, s)
}

/// Frobenius norm of the reconstruction gap for one sample, with the text
/// side already detached. Returns the norm and whether any cosine was
/// clamped.
fn car_norm(g: &mut Graph, hs: Var, ht: Var) -> Result<(Var, bool), ModelError> {
    let ht = g.stop_grad(ht);
    let (s, c1) = g.cosine_sim(hs, ht)?;
    let recon_st = reconstruct(g, hs, s)?;
    let (s_tt, c2) = g.cosine_sim(ht, ht)?;
    let recon_tt = reconstruct(g, ht, s_tt)?;
    let recon_tt = g.stop_grad(recon_tt);
    let diff = g.sub(recon_st, recon_tt)?;
    let sq = g.mul(diff, diff)?;
    let sumsq = g.sum(sq);
    let norm = g.sqrt_elem(sumsq)?;
    Ok((norm, c1 || c2))
}

/// Cross-attentive reconstruction loss for one sample: the Frobenius norm
/// of `reconstruct(hs) − sg[self_reconstruct(ht)]`, divided by the text
/// length M. Gradient flows only through the speech-side reconstruction.
pub fn car_loss(g: &mut Graph, hs: Var, ht: Var) -> Result<Var, ModelError> {
    let (m, _) = g.value(ht).dims2()?;
    let (norm, clamped) = car_norm(g, hs, ht)?;
    if clamped {
        log::warn!("car_loss: zero-norm state row, cosine denominator clamped");
    }
    Ok(g.scale(norm, 1.0 / m as f64)?)
}

/// Batched reconstruction loss over packed encoder outputs: returns the sum
/// of per-sample Frobenius norms and the total text-position count, so the
/// caller can normalize over a whole accumulation window.
pub fn car_sum_batched(
    g: &mut Graph,
    hs: &Encoded,
    ht: &Encoded,
) -> Result<(Var, usize), ModelError> {
    if hs.lens.len() != ht.lens.len() {
        return Err(ModelError::Contract(format!(
            "car batch sizes differ: speech {}, text {}",
            hs.lens.len(),
            ht.lens.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut any_clamped = false;
    for i in 0..hs.lens.len() {
        let hs_i = g.row_slice(hs.h, i * hs.t_max, hs.lens[i])?;
        let ht_i = g.row_slice(ht.h, i * ht.t_max, ht.lens[i])?;
        let (norm, clamped) = car_norm(g, hs_i, ht_i)?;
        any_clamped |= clamped;
        total = Some(match total {
            None => norm,
            Some(t) => g.add(t, norm)?,
        });
    }
    if any_clamped {
        log::warn!("car loss: zero-norm state row, cosine denominator clamped");
    }
    let m_total = ht.lens.iter().sum();
    Ok((total.expect("nonempty batch"), m_total))
}

/// Builds the smoothed-target constant for packed logits. Real positions get
/// 1−ε at the target and ε/(|V|−1) elsewhere; pad rows stay zero so they
/// contribute nothing to value or gradient.
fn smoothed_targets(
    rows: usize,
    k_max: usize,
    vocab: usize,
    targets: &[&[usize]],
    eps: f64,
) -> Result<(Tensor, usize), ModelError> {
    let mut data = vec![0.0; rows * vocab];
    let mut count = 0usize;
    let off_value = if eps == 0.0 { 0.0 } else { eps / (vocab - 1) as f64 };
    for (i, y) in targets.iter().enumerate() {
        for (k, &id) in y.iter().enumerate() {
            if id == PAD {
                return Err(ModelError::Contract(
                    "nll target contains a pad position".into(),
                ));
            }
            if id >= vocab {
                return Err(ModelError::Vocab { id, vocab });
            }
            let row = (i * k_max + k) * vocab;
            if off_value != 0.0 {
                data[row..row + vocab].fill(off_value);
            }
            data[row + id] = 1.0 - eps;
            count += 1;
        }
    }
    Ok((Tensor::new(vec![rows, vocab], data).expect("shape"), count))
}

/// Unnormalized label-smoothed NLL over packed logits: −Σ t ⊙ log-softmax,
/// summed over real positions only. Returns the sum and the token count.
pub fn nll_sum_packed(
    g: &mut Graph,
    logits: Var,
    targets: &[&[usize]],
    eps: f64,
) -> Result<(Var, usize), ModelError> {
    let (rows, vocab) = g.value(logits).dims2()?;
    let b = targets.len();
    if b == 0 || rows % b != 0 {
        return Err(ModelError::Contract(format!(
            "nll: {rows} logit rows do not pack {b} targets"
        )));
    }
    let k_max = rows / b;
    for y in targets {
        if y.len() > k_max {
            return Err(ModelError::Contract(format!(
                "nll: target length {} exceeds packed rows {k_max}",
                y.len()
            )));
        }
    }
    let (t, count) = smoothed_targets(rows, k_max, vocab, targets, eps)?;
    let t = g.constant(t);
    let logp = g.log_softmax_rows(logits)?;
    let prod = g.mul(t, logp)?;
    let s = g.sum(prod);
    Ok((g.scale(s, -1.0)?, count))
}

/// Label-smoothed NLL of one sample, averaged per target token.
pub fn nll_loss(g: &mut Graph, logits: Var, y: &[usize], eps: f64) -> Result<Var, ModelError> {
    if y.is_empty() {
        return Err(ModelError::Contract("nll over empty target".into()));
    }
    let (rows, _) = g.value(logits).dims2()?;
    if rows != y.len() {
        return Err(ModelError::Contract(format!(
            "nll: {rows} logit rows for {} targets",
            y.len()
        )));
    }
    let (s, count) = nll_sum_packed(g, logits, &[y], eps)?;
    Ok(g.scale(s, 1.0 / count as f64)?)
}

/// Unnormalized distillation cross-entropy over packed logits. The teacher
/// distribution comes from the text-conditioned logits, detached; pad rows
/// are masked to zero. Returns the sum and the token count.
pub fn kd_sum_packed(
    g: &mut Graph,
    st_logits: Var,
    mt_logits: Var,
    lens: &[usize],
) -> Result<(Var, usize), ModelError> {
    let (rows, vocab) = g.value(st_logits).dims2()?;
    let (mrows, mvocab) = g.value(mt_logits).dims2()?;
    if rows != mrows || vocab != mvocab {
        return Err(ModelError::Contract(format!(
            "kd: logits shapes differ: [{rows}, {vocab}] vs [{mrows}, {mvocab}]"
        )));
    }
    let b = lens.len();
    if b == 0 || rows % b != 0 {
        return Err(ModelError::Contract(format!(
            "kd: {rows} logit rows do not pack {b} samples"
        )));
    }
    let k_max = rows / b;
    let mut mask = vec![0.0; rows * vocab];
    let mut count = 0usize;
    for (i, &len) in lens.iter().enumerate() {
        if len > k_max {
            return Err(ModelError::Contract(format!(
                "kd: sample length {len} exceeds packed rows {k_max}"
            )));
        }
        let start = i * k_max * vocab;
        mask[start..start + len * vocab].fill(1.0);
        count += len;
    }
    let mask = g.constant(Tensor::new(vec![rows, vocab], mask).expect("shape"));
    let teacher = g.stop_grad(mt_logits);
    let q = g.softmax_rows(teacher)?;
    let q = g.mul(q, mask)?;
    let logp = g.log_softmax_rows(st_logits)?;
    let prod = g.mul(q, logp)?;
    let s = g.sum(prod);
    Ok((g.scale(s, -1.0)?, count))
}

/// Distillation loss of one sample, averaged per target token.
pub fn kd_loss(g: &mut Graph, st_logits: Var, mt_logits: Var) -> Result<Var, ModelError> {
    let (rows, _) = g.value(st_logits).dims2()?;
    let (s, count) = kd_sum_packed(g, st_logits, mt_logits, &[rows])?;
    Ok(g.scale(s, 1.0 / count as f64)?)
}

/// α·nll_st + (1−α)·kd + λ·car + nll_mt.
pub fn weighted_total(
    g: &mut Graph,
    nll_st: Var,
    kd: Var,
    car: Var,
    nll_mt: Var,
    w: &LossWeights,
) -> Result<Var, ModelError> {
    let a = g.scale(nll_st, w.alpha)?;
    let b = g.scale(kd, 1.0 - w.alpha)?;
    let c = g.scale(car, w.lambda)?;
    let ab = g.add(a, b)?;
    let abc = g.add(ab, c)?;
    Ok(g.add(abc, nll_mt)?)
}

/// Runs both branches of a joint model on one triplet and assembles the
/// combined loss. The model must carry a text branch; the MT branch trains
/// through its own NLL term while the distillation and reconstruction terms
/// are detached from it.
pub fn total_loss(
    g: &mut Graph,
    model: &Model,
    sample: TripletRef<'_>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Var), ModelError> {
    w.validate()?;
    let enc_s = model.encode_speech_batch(g, &[sample.speech], true)?;
    let enc_t = model.encode_text_batch(g, &[sample.src_text], true)?;
    let dec_st = model.decode_batch(g, &enc_s, &[sample.tgt_text], true)?;
    let dec_mt = model.decode_batch(g, &enc_t, &[sample.tgt_text], true)?;

    let nll_st = nll_loss(g, dec_st.logits, sample.tgt_text, w.label_smoothing)?;
    let nll_mt = nll_loss(g, dec_mt.logits, sample.tgt_text, w.label_smoothing)?;
    let kd = kd_loss(g, dec_st.logits, dec_mt.logits)?;
    let car = car_loss(g, enc_s.h, enc_t.h)?;
    let total = weighted_total(g, nll_st, kd, car, nll_mt, w)?;

    let breakdown = LossBreakdown {
        nll_st: g.value(nll_st).item()?,
        nll_mt: g.value(nll_mt).item()?,
        kd: g.value(kd).item()?,
        car: g.value(car).item()?,
        total: g.value(total).item()?,
    };
    Ok((breakdown, total))
}
