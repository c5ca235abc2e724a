//! The full sequence-to-sequence model and its inference session.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{log_softmax, Tape, Var};
use crate::corpus::{BOS, EOS, PAD};
use crate::decoder::{AttnDecoder, DecoderState};
use crate::encoder::{Encoder, EncoderKind, EncoderOutput, Mode, NseTrace};
use crate::error::{Error, Result};
use crate::layers::Embedding;
use crate::search::{beam_decode, greedy_decode, BeamConfig, Hypothesis, StepModel, StepOutput};
use crate::tensor::{ParamStore, Tensor};

/// Architecture descriptor; everything needed to rebuild the parameter
/// layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Embedding and hidden width.
    pub dim: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Initial forget-gate bias; `None` leaves it at the uniform init.
    pub forget_bias: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub src_embedding: Embedding,
    pub encoder: Encoder,
    pub decoder: AttnDecoder,
}

impl Seq2Seq {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let src_embedding = Embedding::new(
            &mut params,
            "src.embedding",
            config.src_vocab,
            config.dim,
            rng,
        );
        let encoder = Encoder::new(
            config.encoder,
            &mut params,
            config.dim,
            config.forget_bias,
            rng,
        );
        let decoder = AttnDecoder::new(
            &mut params,
            config.tgt_vocab,
            config.dim,
            config.forget_bias,
            rng,
        );
        Seq2Seq {
            config,
            params,
            src_embedding,
            encoder,
            decoder,
        }
    }

    /// Rebuilds the model around previously stored parameters. Every
    /// parameter the architecture expects must be present with the right
    /// shape, and nothing else may be.
    pub fn from_params(config: ModelConfig, loaded: &ParamStore) -> Result<Self> {
        let mut model = Seq2Seq::new(config, &mut ChaCha8Rng::seed_from_u64(0));
        if loaded.len() != model.params.len() {
            return Err(Error::Format {
                location: "parameters".into(),
                detail: format!(
                    "expected {} tensors, found {}",
                    model.params.len(),
                    loaded.len()
                ),
            });
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let src = loaded
                .find(&name)
                .map(|i| loaded.get(i))
                .ok_or_else(|| Error::Format {
                    location: format!("parameter {name}"),
                    detail: "missing".into(),
                })?;
            let dst = model.params.get_mut(id);
            if src.shape != dst.shape {
                return Err(Error::Format {
                    location: format!("parameter {name}"),
                    detail: format!("shape {:?}, expected {:?}", src.shape, dst.shape),
                });
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(model)
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        src: &[usize],
        mode: &mut Mode,
        trace: bool,
    ) -> Result<EncoderOutput> {
        if src.is_empty() {
            return Err(Error::Usage("empty source sentence".into()));
        }
        let emb = self.src_embedding.lookup(tape, src)?;
        self.encoder.encode(tape, emb, mode, trace)
    }

    /// Teacher-forced per-step logits `[T+1 x V]` for the target wrapped as
    /// `BOS y_1 .. y_T EOS`, along with the prediction targets.
    pub fn forward(
        &self,
        tape: &mut Tape,
        src: &[usize],
        tgt: &[usize],
        mode: &mut Mode,
    ) -> Result<(Var, Vec<usize>)> {
        let encoded = self.encode(tape, src, mode, false)?;
        let mut inputs = Vec::with_capacity(tgt.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(tgt);
        let emb = self.decoder.embedding.lookup(tape, &inputs)?;
        let mut state = self.decoder.init_state(tape, &encoded)?;
        let mut logits = Vec::with_capacity(inputs.len());
        for (t, &token) in inputs.iter().enumerate() {
            let y_prev = tape.row(emb, t)?;
            let step = self
                .decoder
                .step(tape, &state, y_prev, encoded.states, mode)?;
            logits.push(step.logits);
            state = DecoderState {
                prev_token: token,
                ..step.state
            };
        }
        let mut targets = tgt.to_vec();
        targets.push(EOS);
        Ok((tape.stack_rows(&logits)?, targets))
    }

    /// Mean token cross-entropy of one pair and the number of predicted
    /// tokens it averages over.
    pub fn loss(
        &self,
        tape: &mut Tape,
        src: &[usize],
        tgt: &[usize],
        mode: &mut Mode,
    ) -> Result<(Var, usize)> {
        let (logits, targets) = self.forward(tape, src, tgt, mode)?;
        let mask = vec![true; targets.len()];
        Ok((tape.cross_entropy(logits, &targets, &mask)?, targets.len()))
    }

    /// `log P(tgt EOS | src)` as the sum of per-step log-softmax values.
    pub fn sequence_log_prob(&self, src: &[usize], tgt: &[usize]) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let (logits, targets) = self.forward(&mut tape, src, tgt, &mut Mode::Eval)?;
        let v = self.config.tgt_vocab;
        let values = tape.value(logits);
        Ok(targets
            .iter()
            .enumerate()
            .map(|(t, &y)| log_softmax(&values[t * v..(t + 1) * v])[y])
            .sum())
    }

    /// Encodes `src` once and returns a step-wise decoder for search.
    pub fn session(&self, src: &[usize], trace: bool) -> Result<Session<'_>> {
        let mut tape = Tape::new(&self.params);
        let encoded = self.encode(&mut tape, src, &mut Mode::Eval, trace)?;
        let init = self.decoder.init_state(&mut tape, &encoded)?;
        let [(h1, c1), (h2, c2)] = init.layers;
        let init = DecoderValues {
            layers: [h1, c1, h2, c2].map(|v| tape.value(v).to_vec()),
        };
        Ok(Session {
            model: self,
            states: tape.tensor(encoded.states),
            init,
            trace: encoded.trace,
        })
    }

    /// Decodes one sentence. Beam size 1 without length normalisation
    /// runs greedy search.
    pub fn decode(&self, src: &[usize], search: &BeamConfig) -> Result<Hypothesis<DecoderValues>> {
        let session = self.session(src, false)?;
        if search.beam == 1 && !search.length_normalize {
            greedy_decode(&session, search.max_len)
        } else {
            Ok(beam_decode(&session, search)?.best)
        }
    }

    /// Decodes every sentence, spreading the work over the available cores.
    /// Results are in input order and do not depend on the thread count.
    pub fn decode_all(
        &self,
        sources: &[Vec<usize>],
        search: &BeamConfig,
    ) -> Result<Vec<Hypothesis<DecoderValues>>> {
        let threads = std::thread::available_parallelism()
            .map_or(1, |n| n.get())
            .min(sources.len().max(1));
        let chunk = sources.len().div_ceil(threads).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = sources
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|src| self.decode(src, search))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(sources.len());
            for h in handles {
                out.extend(h.join().expect("decode worker panicked")?);
            }
            Ok(out)
        })
    }
}

/// Plain-value decoder state `[h1, c1, h2, c2]`, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderValues {
    pub layers: [Vec<f64>; 4],
}

/// Inference-only view of one encoded source sentence. Each decoder step
/// runs on its own short-lived tape.
pub struct Session<'m> {
    model: &'m Seq2Seq,
    states: Tensor,
    init: DecoderValues,
    pub trace: Option<NseTrace>,
}

impl Session<'_> {
    pub fn source_len(&self) -> usize {
        self.states.rows()
    }
}

impl StepModel for Session<'_> {
    type State = DecoderValues;

    fn initial(&self) -> Result<DecoderValues> {
        Ok(self.init.clone())
    }

    fn step(&self, state: &DecoderValues, prev_token: usize) -> Result<StepOutput<DecoderValues>> {
        let dec = &self.model.decoder;
        let mut tape = Tape::new(&self.model.params);
        let states = tape.leaf(self.states.clone());
        let [h1, c1, h2, c2] = state.layers.clone().map(|v| tape.leaf(Tensor::vector(v)));
        let y_prev = dec.embedding.lookup(&mut tape, &[prev_token])?;
        let y_prev = tape.row(y_prev, 0)?;
        let ds = DecoderState {
            layers: [(h1, c1), (h2, c2)],
            prev_token,
            step: 0,
        };
        let out = dec.step(&mut tape, &ds, y_prev, states, &mut Mode::Eval)?;
        let mut log_probs = log_softmax(tape.value(out.logits));
        // never emitted; the remaining entries keep their unmasked values so
        // hypothesis scores stay true model log-probabilities
        log_probs[PAD] = f64::NEG_INFINITY;
        log_probs[BOS] = f64::NEG_INFINITY;
        let [(h1, c1), (h2, c2)] = out.state.layers;
        Ok(StepOutput {
            state: DecoderValues {
                layers: [h1, c1, h2, c2].map(|v| tape.value(v).to_vec()),
            },
            log_probs,
            alpha: tape.value(out.alpha).to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;

    fn tiny(kind: EncoderKind, seed: u64) -> Seq2Seq {
        let cfg = ModelConfig {
            encoder: kind,
            dim: 4,
            src_vocab: 9,
            tgt_vocab: 8,
            forget_bias: Some(1.0),
        };
        Seq2Seq::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn greedy_score_is_sequence_log_prob() {
        for kind in [EncoderKind::Lstm, EncoderKind::Nse] {
            let m = tiny(kind, 5);
            let src = [4, 5, 6, 7];
            let hyp = m
                .decode(
                    &src,
                    &BeamConfig {
                        beam: 1,
                        max_len: 6,
                        length_normalize: false,
                    },
                )
                .unwrap();
            if hyp.finished {
                let lp = m.sequence_log_prob(&src, &hyp.tokens).unwrap();
                assert!((lp - hyp.score).abs() < 1e-10, "{lp} vs {}", hyp.score);
            }
            assert_eq!(hyp.alignments.len(), hyp.tokens.len());
            for a in &hyp.alignments {
                assert_eq!(a.alpha.len(), src.len());
                assert!((a.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_params_round_trip() {
        let a = tiny(EncoderKind::Nse, 1);
        let b = Seq2Seq::from_params(a.config.clone(), &a.params).unwrap();
        for ((_, na, ta), (_, nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data);
        }
        let lstm = tiny(EncoderKind::Lstm, 1);
        assert!(matches!(
            Seq2Seq::from_params(a.config.clone(), &lstm.params),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn loss_gradients_check() {
        let mut m = tiny(EncoderKind::Nse, 2);
        let ids: Vec<_> = m.params.ids().collect();
        let model = m.clone();
        let report = GradCheck {
            max_entries: 12,
            ..GradCheck::default()
        }
        .run(&mut m.params, &ids, |tape| {
            Ok(model.loss(tape, &[4, 5, 6], &[5, 6], &mut Mode::Eval)?.0)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn decode_all_matches_sequential() {
        let m = tiny(EncoderKind::Lstm, 3);
        let srcs: Vec<Vec<usize>> = (0..7).map(|i| vec![4 + i % 5, 5, 8 - i % 3]).collect();
        let search = BeamConfig {
            beam: 2,
            max_len: 5,
            length_normalize: false,
        };
        let par = m.decode_all(&srcs, &search).unwrap();
        for (s, p) in srcs.iter().zip(&par) {
            let q = m.decode(s, &search).unwrap();
            assert_eq!(q.tokens, p.tokens);
            assert_eq!(q.score.to_bits(), p.score.to_bits());
        }
    }
}
