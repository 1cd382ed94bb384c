//! Training loops: single-task pretraining and joint bimodal training with
//! gradient accumulation, per-epoch checkpointing, and a metrics log.
//!
//! Gradient accumulation is exact: every update window fixes its token and
//! text-position counts up front, so each micro-batch contributes its term
//! of the window objective with the final normalizer already applied.
//! Splitting a window into more micro-batches changes nothing but memory.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use crate::data::{self, Dataset, Task, EOS};
use crate::error::TrainError;
use crate::graph::Graph;
use crate::losses::{self, LossWeights};
use crate::model::{init_from_scheme, Model, ModelConfig, ModelKind, PretrainSource, Scheme};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{child_seed, child_seed_n};
use crate::tensor::Tensor;

/// Knobs for one training run. `validate` enforces the user-facing ranges;
/// the loops themselves tolerate `epochs = 0`, which writes the
/// initialization unchanged.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub accum: usize,
    pub keep_last: usize,
    /// Frame budget per speech batch, padded semantics.
    pub speech_budget: usize,
    /// Token budget per text batch, padded semantics.
    pub text_budget: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        Self {
            scheme: Scheme::JtProposed,
            weights: LossWeights::default(),
            adam: AdamConfig::desk_default(),
            epochs: 40,
            accum: 4,
            keep_last: 10,
            speech_budget: 800,
            text_budget: 200,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate()?;
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(TrainError::Contract(format!("lr {} must be positive", a.lr)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(TrainError::Contract(format!(
                "betas ({}, {}) must lie in [0, 1)",
                a.beta1, a.beta2
            )));
        }
        if !(a.eps > 0.0) {
            return Err(TrainError::Contract(format!("adam eps {} must be positive", a.eps)));
        }
        if a.warmup == 0 {
            return Err(TrainError::Contract("warmup must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Contract("epochs must be at least 1".into()));
        }
        if self.accum == 0 {
            return Err(TrainError::Contract("accumulation factor must be at least 1".into()));
        }
        if self.keep_last == 0 {
            return Err(TrainError::Contract("keep-last count must be at least 1".into()));
        }
        if self.speech_budget == 0 || self.text_budget == 0 {
            return Err(TrainError::Contract("batch budgets must be positive".into()));
        }
        Ok(())
    }
}

/// What a finished run leaves on disk.
#[derive(Debug)]
pub struct RunArtifacts {
    pub model: Model,
    pub final_ckpt: PathBuf,
    pub metrics_csv: PathBuf,
    /// Surviving per-epoch checkpoints, oldest first.
    pub epoch_ckpts: Vec<PathBuf>,
}

struct Metrics {
    w: BufWriter<File>,
}

impl Metrics {
    fn create(path: &Path) -> Result<Self, TrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "step,epoch,task,nll_st,kd,car,nll_mt,total,lr")?;
        Ok(Self { w })
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &mut self,
        step: u64,
        epoch: u64,
        task: &str,
        nll_st: Option<f64>,
        kd: Option<f64>,
        car: Option<f64>,
        nll_mt: Option<f64>,
        total: f64,
        lr: f64,
    ) -> Result<(), TrainError> {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.12}")).unwrap_or_default()
        }
        writeln!(
            self.w,
            "{step},{epoch},{task},{},{},{},{},{total:.12},{lr:.12}",
            cell(nll_st),
            cell(kd),
            cell(car),
            cell(nll_mt),
        )?;
        self.w.flush()?;
        Ok(())
    }
}

struct LoopState<'a> {
    model: Model,
    adam: Adam,
    weights: LossWeights,
    cfg: &'a TrainConfig,
    metrics: Metrics,
    step: u64,
    micro: u64,
    saved: VecDeque<(u64, PathBuf)>,
}

impl<'a> LoopState<'a> {
    fn new(model: Model, weights: LossWeights, cfg: &'a TrainConfig, dir: &Path) -> Result<Self, TrainError> {
        fs::create_dir_all(dir)?;
        let adam = Adam::new(cfg.adam, model.store());
        let metrics = Metrics::create(&dir.join("metrics.csv"))?;
        Ok(Self { model, adam, weights, cfg, metrics, step: 0, micro: 0, saved: VecDeque::new() })
    }

    fn next_graph(&mut self) -> Graph {
        let seed = child_seed_n(self.cfg.seed, "graph", self.micro);
        self.micro += 1;
        Graph::with_seed(seed)
    }

    fn check_finite(&self, v: f64) -> Result<(), TrainError> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(TrainError::NonFinite { step: self.step + 1, value: v })
        }
    }

    fn save_epoch(&mut self, dir: &Path, epoch: u64) -> Result<(), TrainError> {
        let path = dir.join(format!("ckpt_{epoch:04}.bmtc"));
        self.model.to_checkpoint(self.step, epoch).save(&path)?;
        self.saved.push_back((epoch, path));
        while self.saved.len() > self.cfg.keep_last {
            let (_, old) = self.saved.pop_front().expect("non-empty");
            fs::remove_file(&old)?;
        }
        Ok(())
    }

    fn finish(mut self, dir: &Path, epochs: u64) -> Result<RunArtifacts, TrainError> {
        let final_ckpt = dir.join("final.bmtc");
        self.model.to_checkpoint(self.step, epochs).save(&final_ckpt)?;
        self.metrics.w.flush()?;
        Ok(RunArtifacts {
            model: self.model,
            final_ckpt,
            metrics_csv: dir.join("metrics.csv"),
            epoch_ckpts: self.saved.into_iter().map(|(_, p)| p).collect(),
        })
    }
}

fn target_of(sample: &data::TrainingSample, transcript: bool) -> Vec<usize> {
    let mut t = if transcript { sample.src.clone() } else { sample.tgt.clone() };
    t.push(EOS);
    t
}

/// One optimizer update from a window of speech batches. The window objective
/// is alpha·NLL_sum/K_W + (1−alpha)·KD_sum/K_W + lambda·CAR_sum/M_W with K_W
/// and M_W counted over the whole window before any micro-batch runs.
fn run_speech_window(
    lp: &mut LoopState,
    ds: &Dataset,
    window: &[Vec<usize>],
    transcript: bool,
    use_kd: bool,
    use_car: bool,
    epoch: u64,
) -> Result<(), TrainError> {
    let mut k_w = 0usize;
    let mut m_w = 0usize;
    for b in window {
        for &i in b {
            let s = &ds.samples[i];
            k_w += if transcript { s.src.len() } else { s.tgt.len() } + 1;
            m_w += s.src.len();
        }
    }
    if k_w == 0 {
        return Err(TrainError::Contract("empty speech window".into()));
    }
    let alpha = if use_kd { lp.weights.alpha } else { 1.0 };
    let lambda = if use_car { lp.weights.lambda } else { 0.0 };
    let eps = lp.weights.label_smoothing;

    let mut nll_total = 0.0;
    let mut kd_total = 0.0;
    let mut car_total = 0.0;
    let mut loss_total = 0.0;
    for b in window {
        let mut g = lp.next_graph();
        let mut feats: Vec<&Tensor> = Vec::with_capacity(b.len());
        for &i in b {
            feats.push(ds.samples[i].speech.as_ref().ok_or_else(|| {
                TrainError::Contract(format!("sample {} has no speech features", ds.samples[i].id))
            })?);
        }
        let targets: Vec<Vec<usize>> = b.iter().map(|&i| target_of(&ds.samples[i], transcript)).collect();
        let trefs: Vec<&[usize]> = targets.iter().map(|t| t.as_slice()).collect();

        let enc_s = lp.model.encode_speech_batch(&mut g, &feats, true)?;
        let dec_s = lp.model.decode_batch(&mut g, &enc_s, &trefs, true)?;
        let (nll_sum, _) = losses::nll_sum_packed(&mut g, dec_s.logits, &trefs, eps)?;
        let mut loss = g.scale(nll_sum, alpha / k_w as f64)?;

        if use_kd || use_car {
            let srcs: Vec<&[usize]> = b.iter().map(|&i| ds.samples[i].src.as_slice()).collect();
            // The text branch only feeds detached teacher signals here, so it
            // runs on constant leaves; text parameters train in text windows.
            let enc_t = lp.model.encode_text_batch(&mut g, &srcs, false)?;
            if use_kd {
                let dec_t = lp.model.decode_batch(&mut g, &enc_t, &trefs, false)?;
                let lens: Vec<usize> = trefs.iter().map(|t| t.len()).collect();
                let (kd_sum, _) = losses::kd_sum_packed(&mut g, dec_s.logits, dec_t.logits, &lens)?;
                kd_total += g.value(kd_sum).data()[0];
                let term = g.scale(kd_sum, (1.0 - alpha) / k_w as f64)?;
                loss = g.add(loss, term)?;
            }
            if use_car {
                let (car_sum, _) = losses::car_sum_batched(&mut g, &enc_s, &enc_t)?;
                car_total += g.value(car_sum).data()[0];
                let term = g.scale(car_sum, lambda / m_w as f64)?;
                loss = g.add(loss, term)?;
            }
        }

        let v = g.value(loss).data()[0];
        lp.check_finite(v)?;
        loss_total += v;
        nll_total += g.value(nll_sum).data()[0];
        g.backward(loss)?;
        lp.model.store_mut().accumulate_grads(&g);
    }

    let lr = lp.adam.step(lp.model.store_mut());
    lp.model.store_mut().zero_grads();
    lp.step += 1;
    lp.metrics.row(
        lp.step,
        epoch,
        "speech",
        Some(nll_total / k_w as f64),
        use_kd.then(|| kd_total / k_w as f64),
        use_car.then(|| car_total / m_w as f64),
        None,
        loss_total,
        lr,
    )
}

/// One optimizer update from a window of text batches: NLL_sum/K_W.
fn run_text_window(
    lp: &mut LoopState,
    ds: &Dataset,
    window: &[Vec<usize>],
    epoch: u64,
) -> Result<(), TrainError> {
    let k_w: usize = window
        .iter()
        .flat_map(|b| b.iter())
        .map(|&i| ds.samples[i].tgt.len() + 1)
        .sum();
    if k_w == 0 {
        return Err(TrainError::Contract("empty text window".into()));
    }
    let eps = lp.weights.label_smoothing;

    let mut nll_total = 0.0;
    let mut loss_total = 0.0;
    for b in window {
        let mut g = lp.next_graph();
        let srcs: Vec<&[usize]> = b.iter().map(|&i| ds.samples[i].src.as_slice()).collect();
        let targets: Vec<Vec<usize>> = b.iter().map(|&i| target_of(&ds.samples[i], false)).collect();
        let trefs: Vec<&[usize]> = targets.iter().map(|t| t.as_slice()).collect();

        let enc = lp.model.encode_text_batch(&mut g, &srcs, true)?;
        let dec = lp.model.decode_batch(&mut g, &enc, &trefs, true)?;
        let (nll_sum, _) = losses::nll_sum_packed(&mut g, dec.logits, &trefs, eps)?;
        let loss = g.scale(nll_sum, 1.0 / k_w as f64)?;

        let v = g.value(loss).data()[0];
        lp.check_finite(v)?;
        loss_total += v;
        nll_total += g.value(nll_sum).data()[0];
        g.backward(loss)?;
        lp.model.store_mut().accumulate_grads(&g);
    }

    let lr = lp.adam.step(lp.model.store_mut());
    lp.model.store_mut().zero_grads();
    lp.step += 1;
    lp.metrics.row(lp.step, epoch, "text", None, None, None, Some(nll_total / k_w as f64), loss_total, lr)
}

/// Trains a single-task model from scratch. ASR transcribes speech into the
/// source tokens; MT translates source tokens into target tokens using the
/// text-only pool. The model is seeded from `cfg.seed`, so a zero-epoch run
/// writes exactly `Model::new(mcfg, kind, cfg.seed)`.
pub fn pretrain(
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    source: PretrainSource,
    train: &Dataset,
    dev: Option<&Dataset>,
    dir: &Path,
) -> Result<RunArtifacts, TrainError> {
    let kind = match source {
        PretrainSource::Asr => ModelKind::Asr,
        PretrainSource::Mt => ModelKind::Mt,
    };
    let model = Model::new(mcfg.clone(), kind, cfg.seed)?;
    let mut lp = LoopState::new(model, cfg.weights, cfg, dir)?;
    for epoch in 1..=cfg.epochs as u64 {
        let (tag, budget) = match source {
            PretrainSource::Asr => ("asr-batches", cfg.speech_budget),
            PretrainSource::Mt => ("mt-batches", cfg.text_budget),
        };
        let batches = data::make_batches(train, budget, child_seed(cfg.seed, tag), epoch)?;
        for window in batches.chunks(cfg.accum) {
            match source {
                PretrainSource::Asr => run_speech_window(&mut lp, train, window, true, false, false, epoch)?,
                PretrainSource::Mt => run_text_window(&mut lp, train, window, epoch)?,
            }
        }
        lp.save_epoch(dir, epoch)?;
        if let Some(dev) = dev {
            let acc = token_accuracy(&lp.model, dev)?;
            log::info!("pretrain epoch {epoch}: dev token accuracy {acc:.4}");
        }
    }
    lp.finish(dir, cfg.epochs as u64)
}

/// Joint training from pretrained ASR and MT checkpoints. Speech and text
/// updates alternate; each update window holds batches of one modality only.
/// Scheme ST drops the text branch entirely and forces alpha = 1, lambda = 0.
pub fn train_joint(
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    text_only: &Dataset,
    asr: &crate::checkpoint::Checkpoint,
    mt: &crate::checkpoint::Checkpoint,
    dir: &Path,
) -> Result<RunArtifacts, TrainError> {
    let scheme = cfg.scheme;
    let model = init_from_scheme(mcfg.clone(), scheme, asr, mt, cfg.seed)?;
    let weights = if scheme == Scheme::St {
        LossWeights { alpha: 1.0, lambda: 0.0, ..cfg.weights }
    } else {
        cfg.weights
    };
    weights.validate()?;
    let has_text = scheme.has_text_branch();
    if has_text && text_only.is_empty() {
        return Err(TrainError::Contract(
            "joint training needs a non-empty text-only stream".into(),
        ));
    }
    let use_kd = has_text && weights.alpha < 1.0;
    let use_car = has_text && weights.lambda > 0.0;

    let mut lp = LoopState::new(model, weights, cfg, dir)?;
    for epoch in 1..=cfg.epochs as u64 {
        let sb = data::make_batches(train, cfg.speech_budget, child_seed(cfg.seed, "speech-batches"), epoch)?;
        let s_windows: Vec<&[Vec<usize>]> = sb.chunks(cfg.accum).collect();
        if has_text {
            let tb = data::make_batches(text_only, cfg.text_budget, child_seed(cfg.seed, "text-batches"), epoch)?;
            let t_windows: Vec<&[Vec<usize>]> = tb.chunks(cfg.accum).collect();
            let schedule = data::alternating_schedule(s_windows.len(), t_windows.len())?;
            for (task, idx) in schedule {
                match task {
                    Task::Speech => {
                        run_speech_window(&mut lp, train, s_windows[idx], false, use_kd, use_car, epoch)?
                    }
                    Task::Text => run_text_window(&mut lp, text_only, t_windows[idx], epoch)?,
                }
            }
        } else {
            for window in &s_windows {
                run_speech_window(&mut lp, train, window, false, false, false, epoch)?;
            }
        }
        lp.save_epoch(dir, epoch)?;
    }
    lp.finish(dir, cfg.epochs as u64)
}

/// Teacher-forced argmax accuracy over every target position (EOS included).
/// ASR models read speech and predict source tokens, MT models read source
/// tokens, joint models read speech; both of the latter predict target tokens.
pub fn token_accuracy(model: &Model, ds: &Dataset) -> Result<f64, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::Contract("accuracy over an empty dataset".into()));
    }
    let transcript = matches!(model.kind(), ModelKind::Asr);
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in ds.samples.chunks(8) {
        let mut g = Graph::new();
        let targets: Vec<Vec<usize>> = chunk.iter().map(|s| target_of(s, transcript)).collect();
        let trefs: Vec<&[usize]> = targets.iter().map(|t| t.as_slice()).collect();
        let enc = match model.kind() {
            ModelKind::Mt => {
                let srcs: Vec<&[usize]> = chunk.iter().map(|s| s.src.as_slice()).collect();
                model.encode_text_batch(&mut g, &srcs, false)?
            }
            _ => {
                let mut feats: Vec<&Tensor> = Vec::with_capacity(chunk.len());
                for s in chunk {
                    feats.push(s.speech.as_ref().ok_or_else(|| {
                        TrainError::Contract(format!("sample {} has no speech features", s.id))
                    })?);
                }
                model.encode_speech_batch(&mut g, &feats, false)?
            }
        };
        let dec = model.decode_batch(&mut g, &enc, &trefs, false)?;
        let logits = g.value(dec.logits);
        let v = model.decoder_vocab();
        for (bi, t) in targets.iter().enumerate() {
            for (ti, &tok) in t.iter().enumerate() {
                let row = &logits.data()[(bi * dec.k_max + ti) * v..][..v];
                let mut arg = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[arg] {
                        arg = j;
                    }
                }
                if arg == tok {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}
