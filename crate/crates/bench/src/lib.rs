//! Benchmark fixtures.

use nse_core::encoder::EncoderKind;
use nse_core::metrics::EvalInstance;
use nse_core::model::{ModelConfig, Seq2Seq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn model(kind: EncoderKind, dim: usize, vocab: usize) -> Seq2Seq {
    let config = ModelConfig {
        encoder: kind,
        dim,
        src_vocab: vocab,
        tgt_vocab: vocab,
        forget_bias: Some(1.0),
    };
    Seq2Seq::new(config, &mut ChaCha8Rng::seed_from_u64(1))
}

/// Token ids above the reserved range.
pub fn sentence(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(4..vocab)).collect()
}

/// Instances over a small word list so n-grams overlap often.
pub fn instances(count: usize, refs: usize, seed: u64) -> Vec<EvalInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sent = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.gen_range(8..30);
        (0..len)
            .map(|_| format!("w{}", rng.gen_range(0..40)))
            .collect()
    };
    (0..count)
        .map(|_| {
            let source = sent(&mut rng);
            let output = sent(&mut rng);
            let references = (0..refs).map(|_| sent(&mut rng)).collect();
            EvalInstance::new(source, output, references).expect("references are non-empty")
        })
        .collect()
}
