//! End-to-end: train a tiny model, checkpoint it, decode and score.

use std::ops::ControlFlow;

use nse_core::checkpoint::Checkpoint;
use nse_core::corpus::{ParallelCorpus, SentencePair, Vocabulary};
use nse_core::encoder::EncoderKind;
use nse_core::metrics::{evaluate, EvalInstance};
use nse_core::model::{ModelConfig, Seq2Seq};
use nse_core::search::BeamConfig;
use nse_core::train::{decode_strings, train, DevSet, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn train_checkpoint_decode_evaluate() {
    let pairs = [
        ("the old man walked home slowly", "the man walked home"),
        ("a very large dog barked loudly", "a dog barked"),
        ("the small cat slept quietly", "the cat slept"),
        ("a tall man sat down", "a man sat"),
    ];
    let corpus = ParallelCorpus::from_pairs(
        pairs
            .iter()
            .map(|(s, t)| SentencePair {
                source: toks(s),
                target: toks(t),
            })
            .collect(),
    );
    let vocab = Vocabulary::build(corpus.sources().chain(corpus.targets()), 40).unwrap();
    let dev = DevSet::new(
        pairs.iter().map(|(s, _)| toks(s)).collect(),
        pairs.iter().map(|(_, t)| vec![toks(t)]).collect(),
    )
    .unwrap();
    for kind in [EncoderKind::Lstm, EncoderKind::Nse] {
        let cfg = TrainConfig {
            dim: 8,
            batch_size: 2,
            max_epochs: 3,
            dropout: 0.1,
            lr: 0.01,
            ..TrainConfig::new(kind)
        };
        let model_cfg = ModelConfig {
            encoder: kind,
            dim: 8,
            src_vocab: vocab.len(),
            tgt_vocab: vocab.len(),
            forget_bias: Some(1.0),
        };
        let model = Seq2Seq::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let mut seen = Vec::new();
        let outcome = train(&cfg, model, &corpus, &vocab, &vocab, &dev, |rec, _| {
            seen.push(rec.epoch);
            ControlFlow::Continue(())
        })
        .unwrap();
        assert_eq!(seen, [1, 2, 3]);
        assert_eq!(outcome.records.len(), 3);
        assert!(outcome.records.iter().all(|r| r.loss.is_finite()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        Checkpoint::new(&outcome.best, &vocab, &vocab)
            .save(&path)
            .unwrap();
        let restored = Checkpoint::load(&path).unwrap().model().unwrap();

        let search = BeamConfig {
            beam: 3,
            max_len: 12,
            length_normalize: false,
        };
        let outputs = decode_strings(&restored, &vocab, &vocab, &dev.sources, &search).unwrap();
        assert_eq!(outputs.len(), pairs.len());
        let instances: Vec<EvalInstance> = outputs
            .into_iter()
            .zip(&dev.sources)
            .zip(&dev.references)
            .map(|((o, s), r)| EvalInstance::new(s.clone(), o, r.clone()).unwrap())
            .collect();
        let report = evaluate(&instances).unwrap();
        assert!((0.0..=100.0).contains(&report.bleu));
        assert!((0.0..=100.0).contains(&report.sari));
        assert_eq!(report.instances, pairs.len());
    }
}
