//! Teacher-forced cross-entropy training with Adam and dev-set model
//! selection.

use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::corpus::{batches, BatchOrder, ParallelCorpus, Vocabulary, DEFAULT_MAX_TRAIN_LEN};
use crate::encoder::{EncoderKind, Mode};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalInstance};
use crate::model::Seq2Seq;
use crate::search::{replace_unks, BeamConfig, DEFAULT_MAX_LEN};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TuneMetric {
    #[default]
    Bleu,
    Sari,
}

impl TuneMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            TuneMetric::Bleu => "bleu",
            TuneMetric::Sari => "sari",
        }
    }
}

impl FromStr for TuneMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bleu" => Ok(TuneMetric::Bleu),
            "sari" => Ok(TuneMetric::Sari),
            _ => Err(Error::Config(format!(
                "unknown tune metric {s:?} (expected bleu or sari)"
            ))),
        }
    }
}

impl fmt::Display for TuneMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dataset-specific settings: vocabulary cap and the BLEU floor used when
/// selecting by SARI.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub vocab_size: usize,
    pub sari_bleu_threshold: f64,
}

pub const PRESETS: [Preset; 3] = [
    Preset {
        name: "newsela",
        vocab_size: 20_000,
        sari_bleu_threshold: 22.0,
    },
    Preset {
        name: "wikismall",
        vocab_size: 30_000,
        sari_bleu_threshold: 33.0,
    },
    Preset {
        name: "wikilarge",
        vocab_size: 30_000,
        sari_bleu_threshold: 77.0,
    },
];

pub fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        Error::Config(format!(
            "unknown preset {name:?} (expected newsela, wikismall or wikilarge)"
        ))
    })
}

/// Adam step size used for each encoder.
pub fn default_lr(kind: EncoderKind) -> f64 {
    match kind {
        EncoderKind::Lstm => 0.001,
        EncoderKind::Nse => 0.0003,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderKind,
    pub dim: usize,
    pub vocab_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub tune_metric: TuneMetric,
    pub sari_bleu_threshold: f64,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub forget_bias: Option<f64>,
    /// Training pairs with a longer side are dropped.
    pub max_train_len: usize,
    pub batch_order: BatchOrder,
    /// Output cap for the greedy dev decode after each epoch.
    pub dev_max_len: usize,
}

impl TrainConfig {
    pub fn new(encoder: EncoderKind) -> Self {
        TrainConfig {
            encoder,
            dim: 300,
            vocab_size: 30_000,
            lr: default_lr(encoder),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            dropout: 0.3,
            max_epochs: 40,
            tune_metric: TuneMetric::Bleu,
            sari_bleu_threshold: 0.0,
            seed: 1,
            clip_norm: Some(5.0),
            forget_bias: Some(1.0),
            max_train_len: DEFAULT_MAX_TRAIN_LEN,
            batch_order: BatchOrder::Shuffle,
            dev_max_len: DEFAULT_MAX_LEN,
        }
    }

    pub fn with_preset(encoder: EncoderKind, preset: &Preset) -> Self {
        TrainConfig {
            vocab_size: preset.vocab_size,
            sari_bleu_threshold: preset.sari_bleu_threshold,
            ..TrainConfig::new(encoder)
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.vocab_size <= crate::corpus::RESERVED.len() {
            return bad(format!(
                "vocab size {} leaves no room beyond the reserved tokens",
                self.vocab_size
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps <= 0.0 {
            return bad("adam eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.max_epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return bad("clip norm must be positive".into());
        }
        if self.max_train_len == 0 || self.dev_max_len == 0 {
            return bad("length limits must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates, one buffer per parameter in store
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, _, t), (m, v))| m.len() == t.numel() && v.len() == t.numel())
    }
}

/// Bias-corrected Adam update from the gradients stored on each parameter.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if !state.matches(store) {
        return Err(Error::Usage(
            "optimizer state does not match the parameters".into(),
        ));
    }
    if let Some((_, name, _)) = store.iter().find(|(_, _, t)| t.grad.is_none()) {
        return Err(Error::Usage(format!("parameter {name} has no gradient")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        let g = p.grad.as_ref().expect("checked above");
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.data.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Mean negative log-likelihood over unmasked positions of `logits`
/// `[T x V]`.
pub fn xent_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    tape.cross_entropy(logits, targets, mask)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Token-weighted mean training loss.
    pub loss: f64,
    pub dev_bleu: f64,
    pub dev_sari: f64,
    pub seconds: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} dev_bleu={:.4} dev_sari={:.4} seconds={:.3}",
            self.epoch, self.loss, self.dev_bleu, self.dev_sari, self.seconds
        )
    }
}

/// 1-based epoch chosen by the tuning rule. Under `Sari`, only epochs with
/// dev BLEU at least `threshold` are eligible, falling back to the best
/// BLEU epoch when none is. Ties go to the earliest epoch.
pub fn select_model(records: &[EpochRecord], metric: TuneMetric, threshold: f64) -> Option<usize> {
    fn argmax<'a>(
        it: impl Iterator<Item = &'a EpochRecord>,
        key: fn(&EpochRecord) -> f64,
    ) -> Option<usize> {
        let mut best: Option<&EpochRecord> = None;
        for r in it {
            if best.is_none_or(|b| key(r) > key(b)) {
                best = Some(r);
            }
        }
        best.map(|r| r.epoch)
    }
    let by_bleu = || argmax(records.iter(), |r| r.dev_bleu);
    match metric {
        TuneMetric::Bleu => by_bleu(),
        TuneMetric::Sari => argmax(records.iter().filter(|r| r.dev_bleu >= threshold), |r| {
            r.dev_sari
        })
        .or_else(by_bleu),
    }
}

/// Held-out data scored after every epoch.
#[derive(Clone, Debug, Default)]
pub struct DevSet {
    pub sources: Vec<Vec<String>>,
    pub references: Vec<Vec<Vec<String>>>,
}

impl DevSet {
    pub fn new(sources: Vec<Vec<String>>, references: Vec<Vec<Vec<String>>>) -> Result<Self> {
        if sources.len() != references.len() {
            return Err(Error::Alignment(format!(
                "{} dev sources but {} reference sets",
                sources.len(),
                references.len()
            )));
        }
        Ok(DevSet {
            sources,
            references,
        })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Decodes `sources` and returns detokenized outputs
/// with UNKs replaced from the source.
pub fn decode_strings(
    model: &Seq2Seq,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    sources: &[Vec<String>],
    search: &BeamConfig,
) -> Result<Vec<Vec<String>>> {
    let ids: Vec<Vec<usize>> = sources.iter().map(|s| src_vocab.encode(s)).collect();
    let hyps = model.decode_all(&ids, search)?;
    hyps.iter()
        .zip(sources)
        .map(|(h, src)| replace_unks(&h.tokens, &h.alignments, src, tgt_vocab))
        .collect()
}

/// Greedy dev decode scored with BLEU and SARI.
pub fn dev_scores(
    model: &Seq2Seq,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    dev: &DevSet,
    max_len: usize,
) -> Result<(f64, f64)> {
    let outputs = decode_strings(
        model,
        src_vocab,
        tgt_vocab,
        &dev.sources,
        &BeamConfig {
            beam: 1,
            max_len,
            length_normalize: false,
        },
    )?;
    let instances = dev
        .sources
        .iter()
        .zip(outputs)
        .zip(&dev.references)
        .map(|((s, o), r)| {
            EvalInstance::new(
                lowercase(s),
                lowercase(&o),
                r.iter().map(|x| lowercase(x)).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&instances)?;
    Ok((report.bleu, report.sari))
}

fn lowercase(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub best: Seq2Seq,
    pub best_epoch: usize,
    /// Parameters and optimizer state after the final epoch.
    pub last: Seq2Seq,
    pub adam: AdamState,
    pub records: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }
}

/// Runs up to `config.max_epochs` epochs. `on_epoch` sees each record and
/// the current model as they are produced and may stop training early by
/// returning `Break`.
pub fn train(
    config: &TrainConfig,
    mut model: Seq2Seq,
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    dev: &DevSet,
    mut on_epoch: impl FnMut(&EpochRecord, &Seq2Seq) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Config("dev set is empty".into()));
    }
    if model.config.src_vocab != src_vocab.len() || model.config.tgt_vocab != tgt_vocab.len() {
        return Err(Error::Config(
            "model vocabulary sizes do not match the vocabularies".into(),
        ));
    }
    let mut corpus = corpus.clone();
    let dropped = corpus.filter_length(config.max_train_len);
    if dropped > 0 {
        log::warn!(
            "dropped {dropped} training pairs longer than {} tokens",
            config.max_train_len
        );
    }
    if corpus.is_empty() {
        return Err(Error::Config(
            "no training pairs left after the length filter".into(),
        ));
    }

    let adam_cfg = config.adam();
    let mut adam = AdamState::new(&model.params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut records = Vec::new();
    let mut best: Option<(usize, Seq2Seq)> = None;

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        let epoch_batches = batches(
            &corpus,
            src_vocab,
            tgt_vocab,
            config.batch_size,
            config.batch_order,
            Some(&mut order_rng),
        )?;
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for batch in &epoch_batches {
            model.params.zero_grad();
            let total = batch.predicted_tokens();
            for i in 0..batch.len() {
                let (src, tgt) = batch.example(i);
                let grads = {
                    let mut tape = Tape::new(&model.params);
                    let mut mode = Mode::Train {
                        rate: config.dropout,
                        rng: &mut dropout_rng,
                    };
                    let (loss, n) = model.loss(&mut tape, &src, &tgt, &mut mode)?;
                    loss_sum += tape.scalar(loss) * n as f64;
                    let scaled = tape.scale(loss, n as f64 / total as f64)?;
                    tape.backward(scaled)?
                };
                model.params.accumulate(&grads);
            }
            tokens += total;
            if let Some(max) = config.clip_norm {
                model.params.clip_grad_norm(max);
            }
            adam_step(&mut model.params, &mut adam, &adam_cfg)?;
        }
        model.params.clear_grad();

        let (dev_bleu, dev_sari) =
            dev_scores(&model, src_vocab, tgt_vocab, dev, config.dev_max_len)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / tokens as f64,
            dev_bleu,
            dev_sari,
            seconds: start.elapsed().as_secs_f64(),
        };
        records.push(record);
        let chosen = select_model(&records, config.tune_metric, config.sari_bleu_threshold)
            .expect("records is non-empty");
        if chosen == epoch {
            best = Some((epoch, model.clone()));
        }
        if on_epoch(&record, &model).is_break() {
            break;
        }
    }

    let (best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        adam,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rec(epoch: usize, bleu: f64, sari: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            loss: 0.0,
            dev_bleu: bleu,
            dev_sari: sari,
            seconds: 0.0,
        }
    }

    #[test]
    fn selection_examples() {
        let rs = [rec(1, 10.0, 50.0), rec(2, 40.0, 30.0)];
        assert_eq!(select_model(&rs, TuneMetric::Sari, 22.0), Some(2));
        assert_eq!(select_model(&rs, TuneMetric::Sari, 5.0), Some(1));
        assert_eq!(select_model(&rs, TuneMetric::Sari, 90.0), Some(2));
        assert_eq!(select_model(&rs, TuneMetric::Bleu, 1e9), Some(2));
        assert_eq!(
            select_model(&[rec(1, 5.0, 5.0), rec(2, 5.0, 5.0)], TuneMetric::Bleu, 0.0),
            Some(1)
        );
        assert_eq!(select_model(&[], TuneMetric::Bleu, 0.0), None);
    }

    #[test]
    fn presets() {
        assert_eq!(preset("newsela").unwrap().sari_bleu_threshold, 22.0);
        assert_eq!(preset("wikismall").unwrap().vocab_size, 30_000);
        assert!(preset("simplewiki").is_err());
        let c = TrainConfig::with_preset(EncoderKind::Nse, preset("wikilarge").unwrap());
        assert_eq!(
            (c.lr, c.sari_bleu_threshold, c.vocab_size),
            (0.0003, 77.0, 30_000)
        );
        c.validate().unwrap();
        assert!(TrainConfig {
            dropout: 1.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
    }

    fn one_param(value: f64, grad: Option<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![value]));
        s.get_mut(id).grad = grad.map(|g| vec![g]);
        s
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = one_param(0.7, Some(0.0));
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &TrainConfig::new(EncoderKind::Lstm).adam()).unwrap();
        assert_eq!(s.get(s.ids().next().unwrap()).data, vec![0.7]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let cfg = AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        for g in [3.0, -0.02] {
            let mut s = one_param(1.0, Some(g));
            let mut st = AdamState::new(&s);
            adam_step(&mut s, &mut st, &cfg).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
            let expected = 1.0 - cfg.lr * g / (f64::abs(g) + cfg.eps);
            assert!((s.get(s.ids().next().unwrap()).data[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_missing_gradient() {
        let mut s = one_param(1.0, None);
        let mut st = AdamState::new(&s);
        assert!(matches!(
            adam_step(&mut s, &mut st, &TrainConfig::new(EncoderKind::Lstm).adam()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn adam_decreases_quadratic() {
        let cfg = AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![0.5, -1.5, 2.0]));
        let mut st = AdamState::new(&s);
        let norm2 = |s: &ParamStore| s.get(id).data.iter().map(|x| x * x).sum::<f64>();
        let before = norm2(&s);
        let g: Vec<f64> = s.get(id).data.iter().map(|x| 2.0 * x).collect();
        s.get_mut(id).grad = Some(g);
        adam_step(&mut s, &mut st, &cfg).unwrap();
        assert!(norm2(&s) < before);
    }

    #[test]
    fn xent_examples() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let uniform = t.constant(vec![2, 4], vec![0.0; 8]).unwrap();
        let l = xent_loss(&mut t, uniform, &[1, 3], &[true, true]).unwrap();
        assert!((t.scalar(l) - 4f64.ln()).abs() < 1e-12);
        let peaked = t.constant(vec![1, 3], vec![-800.0, 800.0, -800.0]).unwrap();
        let l = xent_loss(&mut t, peaked, &[1], &[true]).unwrap();
        assert!(t.scalar(l).abs() < 1e-12);
        assert!(matches!(
            xent_loss(&mut t, uniform, &[1, 3], &[false, false]),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            xent_loss(&mut t, uniform, &[1], &[true]),
            Err(Error::Usage(_))
        ));
    }
}
