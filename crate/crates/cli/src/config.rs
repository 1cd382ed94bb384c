//! Flat `key = value` experiment configuration shared by every subcommand.
//!
//! One file merges the corpus, model, and training knobs. Keys overlapping
//! two domains (vocabulary sizes, feature width, seed) are single keys that
//! set every field they govern, so the resolved file can never disagree with
//! itself. Every run writes the fully resolved form next to its outputs.

use std::fmt::Write as _;
use std::path::Path;

use bimodal_core::data::CorpusSpec;
use bimodal_core::model::{ModelConfig, Scheme};
use bimodal_core::trainer::TrainConfig;

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: usize,
    pub average_last: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::desk_default(),
            model: ModelConfig::desk_default(),
            train: TrainConfig::desk_default(),
            beam: 5,
            average_last: 10,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("key {key}: cannot parse value {value:?}"))
}

impl ExperimentConfig {
    /// Applies one key. Unknown keys are rejected, which is what makes the
    /// resolved file a closed record of a run.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => {
                let v: u64 = parse(key, value)?;
                self.corpus.seed = v;
                self.train.seed = v;
            }
            "src_vocab" => {
                let v: usize = parse(key, value)?;
                self.corpus.src_vocab = v;
                self.model.src_vocab = v;
            }
            "tgt_vocab" => {
                let v: usize = parse(key, value)?;
                self.corpus.tgt_vocab = v;
                self.model.tgt_vocab = v;
            }
            "d_s" => {
                let v: usize = parse(key, value)?;
                self.corpus.d_s = v;
                self.model.speech_feature_dim = v;
            }
            "len_min" => self.corpus.len_min = parse(key, value)?,
            "len_max" => self.corpus.len_max = parse(key, value)?,
            "r_min" => self.corpus.r_min = parse(key, value)?,
            "r_max" => self.corpus.r_max = parse(key, value)?,
            "sigma_noise" => self.corpus.sigma_noise = parse(key, value)?,
            "n_train" => self.corpus.n_train = parse(key, value)?,
            "n_dev" => self.corpus.n_dev = parse(key, value)?,
            "n_test" => self.corpus.n_test = parse(key, value)?,
            "n_text_only" => self.corpus.n_text_only = parse(key, value)?,
            "d_model" => self.model.d_model = parse(key, value)?,
            "n_heads" => self.model.n_heads = parse(key, value)?,
            "d_ffn" => self.model.d_ffn = parse(key, value)?,
            "n_speech_lower_layers" => self.model.n_speech_lower_layers = parse(key, value)?,
            "n_shared_encoder_layers" => self.model.n_shared_encoder_layers = parse(key, value)?,
            "n_decoder_layers" => self.model.n_decoder_layers = parse(key, value)?,
            "dropout" => self.model.dropout = parse(key, value)?,
            "max_positions" => self.model.max_positions = parse(key, value)?,
            "scheme" => {
                self.train.scheme = Scheme::parse(value)
                    .ok_or_else(|| format!("key scheme: unknown scheme {value:?}"))?;
            }
            "alpha" => self.train.weights.alpha = parse(key, value)?,
            "lambda" => self.train.weights.lambda = parse(key, value)?,
            "label_smoothing" => self.train.weights.label_smoothing = parse(key, value)?,
            "lr" => self.train.adam.lr = parse(key, value)?,
            "beta1" => self.train.adam.beta1 = parse(key, value)?,
            "beta2" => self.train.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.train.adam.eps = parse(key, value)?,
            "warmup" => self.train.adam.warmup = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "accum" => self.train.accum = parse(key, value)?,
            "keep_last" => self.train.keep_last = parse(key, value)?,
            "speech_budget" => self.train.speech_budget = parse(key, value)?,
            "text_budget" => self.train.text_budget = parse(key, value)?,
            "beam" => self.beam = parse(key, value)?,
            "average_last" => self.average_last = parse(key, value)?,
            other => return Err(format!("unknown configuration key {other:?}")),
        }
        Ok(())
    }

    /// Parses a config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), ln + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("{}:{}: {e}", path.display(), ln + 1))?;
        }
        Ok(())
    }

    /// The fully resolved configuration in canonical key order. Feeding this
    /// back through `apply_file` reproduces the identical configuration.
    pub fn render(&self) -> String {
        let mut s = String::from("# resolved experiment configuration\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.train.seed.to_string());
        kv("src_vocab", self.corpus.src_vocab.to_string());
        kv("tgt_vocab", self.corpus.tgt_vocab.to_string());
        kv("d_s", self.corpus.d_s.to_string());
        kv("len_min", self.corpus.len_min.to_string());
        kv("len_max", self.corpus.len_max.to_string());
        kv("r_min", self.corpus.r_min.to_string());
        kv("r_max", self.corpus.r_max.to_string());
        kv("sigma_noise", self.corpus.sigma_noise.to_string());
        kv("n_train", self.corpus.n_train.to_string());
        kv("n_dev", self.corpus.n_dev.to_string());
        kv("n_test", self.corpus.n_test.to_string());
        kv("n_text_only", self.corpus.n_text_only.to_string());
        kv("d_model", self.model.d_model.to_string());
        kv("n_heads", self.model.n_heads.to_string());
        kv("d_ffn", self.model.d_ffn.to_string());
        kv("n_speech_lower_layers", self.model.n_speech_lower_layers.to_string());
        kv("n_shared_encoder_layers", self.model.n_shared_encoder_layers.to_string());
        kv("n_decoder_layers", self.model.n_decoder_layers.to_string());
        kv("dropout", self.model.dropout.to_string());
        kv("max_positions", self.model.max_positions.to_string());
        kv("scheme", self.train.scheme.name().to_string());
        kv("alpha", self.train.weights.alpha.to_string());
        kv("lambda", self.train.weights.lambda.to_string());
        kv("label_smoothing", self.train.weights.label_smoothing.to_string());
        kv("lr", self.train.adam.lr.to_string());
        kv("beta1", self.train.adam.beta1.to_string());
        kv("beta2", self.train.adam.beta2.to_string());
        kv("adam_eps", self.train.adam.eps.to_string());
        kv("warmup", self.train.adam.warmup.to_string());
        kv("epochs", self.train.epochs.to_string());
        kv("accum", self.train.accum.to_string());
        kv("keep_last", self.train.keep_last.to_string());
        kv("speech_budget", self.train.speech_budget.to_string());
        kv("text_budget", self.train.text_budget.to_string());
        kv("beam", self.beam.to_string());
        kv("average_last", self.average_last.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.set("nonsense", "1").is_err());
        assert!(cfg.set("alpha", "0.5").is_ok());
        assert!(cfg.set("alpha", "zebra").is_err());
    }

    #[test]
    fn shared_keys_set_every_owner() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("seed", "77").unwrap();
        assert_eq!(cfg.corpus.seed, 77);
        assert_eq!(cfg.train.seed, 77);
        cfg.set("src_vocab", "24").unwrap();
        assert_eq!(cfg.corpus.src_vocab, 24);
        assert_eq!(cfg.model.src_vocab, 24);
        cfg.set("d_s", "8").unwrap();
        assert_eq!(cfg.corpus.d_s, 8);
        assert_eq!(cfg.model.speech_feature_dim, 8);
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("alpha", "0.65").unwrap();
        cfg.set("scheme", "jt-s-mt").unwrap();
        cfg.set("epochs", "7").unwrap();
        cfg.set("adam_eps", "0.000000001").unwrap();
        let rendered = cfg.render();

        let dir = std::env::temp_dir().join(format!("bimodal-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("resolved.cfg");
        std::fs::write(&path, &rendered).unwrap();
        let mut back = ExperimentConfig::default();
        back.apply_file(&path).unwrap();
        assert_eq!(back.render(), rendered);
        assert_eq!(back.train.weights.alpha, 0.65);
        assert_eq!(back.train.epochs, 7);
    }
}
