use nse_core::checkpoint::Checkpoint;
use nse_core::corpus::{Vocabulary, RESERVED, UNK};
use nse_core::decoder::AttentionRecord;
use nse_core::metrics::{bleu_corpus_with, sari_corpus, EvalInstance};
use nse_core::search::replace_unks;
use nse_core::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from),
        0..10,
    )
}

fn instance() -> impl Strategy<Value = EvalInstance> {
    (words(), words(), prop::collection::vec(words(), 1..4))
        .prop_map(|(s, o, r)| EvalInstance::new(s, o, r).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, cols in 1usize..6, scale in 0.1f64..500.0, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((seed.wrapping_add(i as u64).wrapping_mul(2654435761) % 1000) as f64 / 500.0 - 1.0) * scale)
            .collect();
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::matrix(rows, cols, data).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_stays_between_endpoints(
        mem in prop::collection::vec(-5.0f64..5.0, 6),
        weights in prop::collection::vec(0.0f64..=1.0, 2),
        write in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let m = tape.leaf(Tensor::matrix(2, 3, mem.clone()).unwrap());
        let w = tape.leaf(Tensor::vector(weights));
        let x = tape.leaf(Tensor::vector(write.clone()));
        let out = tape.interpolate_rows(m, w, x).unwrap();
        for (i, v) in tape.value(out).iter().enumerate() {
            let (a, b) = (mem[i], write[i % 3]);
            prop_assert!(*v >= a.min(b) && *v <= a.max(b));
        }
    }

    #[test]
    fn clipping_preserves_direction(grad in prop::collection::vec(-100.0f64..100.0, 1..20), max_norm in 0.01f64..50.0) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.0; grad.len()]).with_grad());
        store.get_mut(id).grad = Some(grad.clone());
        let before = store.clip_grad_norm(max_norm);
        let after = store.get(id).grad.clone().unwrap();
        prop_assert!(store.grad_norm() <= max_norm.max(before) * (1.0 + 1e-12));
        let scale = if before > max_norm { max_norm / before } else { 1.0 };
        for (g, a) in grad.iter().zip(&after) {
            prop_assert!((g * scale - a).abs() <= 1e-12 * g.abs().max(1.0));
        }
    }

    #[test]
    fn metrics_stay_in_range(corpus in prop::collection::vec(instance(), 1..6)) {
        for smooth in [false, true] {
            let b = bleu_corpus_with(&corpus, smooth).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        }
        let s = sari_corpus(&corpus).unwrap();
        for c in [s.keep, s.delete, s.add] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
        }
    }

    #[test]
    fn identical_output_and_reference_score_full_bleu(sentence in prop::collection::vec("[a-e]", 4..12)) {
        let inst = EvalInstance::new(vec!["x".into()], sentence.clone(), vec![sentence]).unwrap();
        prop_assert!((bleu_corpus_with(&[inst], false).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn vocabulary_round_trips_known_tokens(sentence in words()) {
        let vocab = Vocabulary::build([&sentence[..]], 10).unwrap();
        prop_assert_eq!(vocab.decode(&vocab.encode(&sentence)), sentence);
    }

    #[test]
    fn unk_replacement_only_touches_unks(
        ids in prop::collection::vec(1usize..8, 1..10),
        src_len in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend((4..8).map(|i| format!("t{i}")));
        let vocab = Vocabulary::from_tokens(tokens).unwrap();
        let ids: Vec<usize> = ids.into_iter().map(|i| if i < 4 { UNK } else { i }).collect();
        let source: Vec<String> = (0..src_len).map(|i| format!("src{i}")).collect();
        let alignments: Vec<AttentionRecord> = (0..ids.len())
            .map(|t| AttentionRecord {
                alpha: (0..src_len).map(|i| ((seed ^ (t * 31 + i) as u64).wrapping_mul(0x9e3779b97f4a7c15) >> 11) as f64).collect(),
            })
            .collect();
        let out = replace_unks(&ids, &alignments, &source, &vocab).unwrap();
        for ((id, word), rec) in ids.iter().zip(&out).zip(&alignments) {
            if *id == UNK {
                prop_assert_eq!(word, &source[rec.argmax().unwrap()]);
            } else {
                prop_assert_eq!(word.as_str(), vocab.token(*id));
            }
        }
    }

    #[test]
    fn arbitrary_bytes_never_load(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
