//! Run configuration: `key=value` files, presets and overrides.
//!
//! Keys use the same kebab-case names as the command-line flags
//! (underscores are accepted too). Later assignments win, so flags given
//! after a file override it. `preset` and `encoder` are resolved first
//! because they decide the defaults the other keys start from.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus::BatchOrder;
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::search::DEFAULT_MAX_LEN;
use crate::train::{preset, TrainConfig};

/// Beam sizes swept by evaluation, greedy first.
pub const DEFAULT_BEAMS: [usize; 3] = [1, 5, 10];

pub const KEYS: &[&str] = &[
    "preset",
    "encoder",
    "dim",
    "vocab-size",
    "lr",
    "beta1",
    "beta2",
    "adam-eps",
    "batch-size",
    "dropout",
    "epochs",
    "tune-metric",
    "sari-bleu-threshold",
    "seed",
    "clip-norm",
    "forget-bias",
    "max-train-len",
    "bucketed",
    "train-src",
    "train-tgt",
    "dev-src",
    "dev-refs",
    "test-src",
    "test-refs",
    "embeddings",
    "checkpoint-dir",
    "beams",
    "max-len",
    "length-normalize",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub train: TrainConfig,
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_refs: Vec<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_refs: Vec<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub beams: Vec<usize>,
    pub max_len: usize,
    pub length_normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::base(None, EncoderKind::Lstm).expect("no preset")
    }
}

fn canonical(key: &str) -> String {
    key.trim().replace('_', "-")
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {value:?} for {key} (expected true or false)"
        ))),
    }
}

/// `none` or `off` disables an optional number.
fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn paths(value: &str) -> Vec<PathBuf> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect()
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_deref()
        .map_or_else(String::new, |p| p.display().to_string())
}

fn join_paths(ps: &[PathBuf]) -> String {
    ps.iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Splits a config file into `(key, value)` pairs. Blank lines and text
/// after `#` are ignored.
pub fn parse_file_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{origin}:{}: expected key=value, got {line:?}",
                i + 1
            ))
        })?;
        out.push((canonical(k), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_file_text(&text, &path.display().to_string())
}

impl RunConfig {
    fn base(preset_name: Option<&str>, encoder: EncoderKind) -> Result<Self> {
        let train = match preset_name {
            Some(p) => TrainConfig::with_preset(encoder, preset(p)?),
            None => TrainConfig::new(encoder),
        };
        Ok(RunConfig {
            preset: preset_name.map(str::to_string),
            train,
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_refs: Vec::new(),
            test_src: None,
            test_refs: Vec::new(),
            embeddings: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            beams: DEFAULT_BEAMS.to_vec(),
            max_len: DEFAULT_MAX_LEN,
            length_normalize: false,
        })
    }

    /// Builds a configuration from ordered assignments. Unknown keys are a
    /// usage error, malformed values a config error.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Usage(format!("unknown configuration key {k:?}")));
            }
        }
        let last = |key: &str| {
            pairs
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
        };
        let encoder: EncoderKind = last("encoder").map_or(Ok(EncoderKind::Lstm), str::parse)?;
        let mut cfg = RunConfig::base(last("preset"), encoder)?;
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "preset" | "encoder" => {}
            "dim" => t.dim = parse(key, v)?,
            "vocab-size" => t.vocab_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam-eps" => t.adam_eps = parse(key, v)?,
            "batch-size" => t.batch_size = parse(key, v)?,
            "dropout" => t.dropout = parse(key, v)?,
            "epochs" => t.max_epochs = parse(key, v)?,
            "tune-metric" => t.tune_metric = v.parse()?,
            "sari-bleu-threshold" => t.sari_bleu_threshold = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "clip-norm" => t.clip_norm = parse_opt(key, v)?,
            "forget-bias" => t.forget_bias = parse_opt(key, v)?,
            "max-train-len" => t.max_train_len = parse(key, v)?,
            "bucketed" => {
                t.batch_order = if parse_bool(key, v)? {
                    BatchOrder::Bucketed
                } else {
                    BatchOrder::Shuffle
                }
            }
            "train-src" => self.train_src = Some(v.into()),
            "train-tgt" => self.train_tgt = Some(v.into()),
            "dev-src" => self.dev_src = Some(v.into()),
            "dev-refs" => self.dev_refs = paths(v),
            "test-src" => self.test_src = Some(v.into()),
            "test-refs" => self.test_refs = paths(v),
            "embeddings" => self.embeddings = Some(v.into()),
            "checkpoint-dir" => self.checkpoint_dir = v.into(),
            "beams" => self.beams = parse_list(key, v)?,
            "max-len" => {
                self.max_len = parse(key, v)?;
                t.dev_max_len = self.max_len;
            }
            "length-normalize" => self.length_normalize = parse_bool(key, v)?,
            _ => return Err(Error::Usage(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.beams.is_empty() || self.beams.contains(&0) {
            return Err(Error::Config(
                "beams must be a non-empty list of positive sizes".into(),
            ));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max-len must be at least 1".into()));
        }
        Ok(())
    }

    /// The effective configuration as `key=value` lines in [`KEYS`] order.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        for &key in KEYS {
            let value = match key {
                "preset" => self.preset.clone().unwrap_or_else(|| "none".into()),
                "encoder" => t.encoder.to_string(),
                "dim" => t.dim.to_string(),
                "vocab-size" => t.vocab_size.to_string(),
                "lr" => t.lr.to_string(),
                "beta1" => t.beta1.to_string(),
                "beta2" => t.beta2.to_string(),
                "adam-eps" => t.adam_eps.to_string(),
                "batch-size" => t.batch_size.to_string(),
                "dropout" => t.dropout.to_string(),
                "epochs" => t.max_epochs.to_string(),
                "tune-metric" => t.tune_metric.to_string(),
                "sari-bleu-threshold" => t.sari_bleu_threshold.to_string(),
                "seed" => t.seed.to_string(),
                "clip-norm" => opt_num(t.clip_norm),
                "forget-bias" => opt_num(t.forget_bias),
                "max-train-len" => t.max_train_len.to_string(),
                "bucketed" => (t.batch_order == BatchOrder::Bucketed).to_string(),
                "train-src" => opt_path(&self.train_src),
                "train-tgt" => opt_path(&self.train_tgt),
                "dev-src" => opt_path(&self.dev_src),
                "dev-refs" => join_paths(&self.dev_refs),
                "test-src" => opt_path(&self.test_src),
                "test-refs" => join_paths(&self.test_refs),
                "embeddings" => opt_path(&self.embeddings),
                "checkpoint-dir" => self.checkpoint_dir.display().to_string(),
                "beams" => self
                    .beams
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
                "max-len" => self.max_len.to_string(),
                "length-normalize" => self.length_normalize.to_string(),
                _ => unreachable!("every key is echoed"),
            };
            let _ = writeln!(s, "{key}={value}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TuneMetric;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn file_parsing() {
        let p = parse_file_text(
            "# comment\n\nencoder = nse  # trailing\nbatch_size=8\n",
            "f",
        )
        .unwrap();
        assert_eq!(p, pairs(&[("encoder", "nse"), ("batch-size", "8")]));
        match parse_file_text("ok=1\nbroken line\n", "run.cfg") {
            Err(Error::Config(m)) => assert!(m.contains("run.cfg:2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn presets_and_overrides() {
        let c = RunConfig::from_pairs(&pairs(&[
            ("encoder", "nse"),
            ("tune-metric", "sari"),
            ("preset", "newsela"),
            ("sari-bleu-threshold", "22"),
        ]))
        .unwrap();
        assert_eq!(c.train.encoder, EncoderKind::Nse);
        assert_eq!(c.train.lr, 0.0003);
        assert_eq!(c.train.vocab_size, 20_000);
        assert_eq!(c.train.tune_metric, TuneMetric::Sari);
        assert_eq!(c.train.sari_bleu_threshold, 22.0);
        // an explicit value beats the preset, the later of two assignments wins
        let c = RunConfig::from_pairs(&pairs(&[
            ("preset", "wikilarge"),
            ("lr", "0.5"),
            ("lr", "0.01"),
        ]))
        .unwrap();
        assert_eq!((c.train.lr, c.train.sari_bleu_threshold), (0.01, 77.0));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            RunConfig::from_pairs(&pairs(&[("colour", "red")])),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            RunConfig::from_pairs(&pairs(&[("dim", "big")])),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_pairs(&pairs(&[("dropout", "1.5")])),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_pairs(&pairs(&[("beams", "5,0")])),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_pairs(&pairs(&[("preset", "x")])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_pairs(&pairs(&[
            ("preset", "wikismall"),
            ("encoder", "nse"),
            ("clip-norm", "none"),
            ("dev-refs", "a.txt,b.txt"),
            ("bucketed", "true"),
        ]))
        .unwrap();
        let echoed = parse_file_text(&c.echo(), "echo").unwrap();
        let again = RunConfig::from_pairs(
            &echoed
                .into_iter()
                .filter(|(_, v)| !v.is_empty())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(again, c);
    }
}
