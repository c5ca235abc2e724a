//! Greedy and beam-search decoding, plus attention-argmax UNK replacement.
//!
//! Search runs against the [`StepModel`] trait so the same code drives the
//! neural decoder and hand-built probability tables in tests.

use std::cmp::Ordering;

use crate::corpus::{Vocabulary, BOS, EOS, UNK};
use crate::decoder::AttentionRecord;
use crate::error::{Error, Result};

/// Output-length cap used when none is configured.
pub const DEFAULT_MAX_LEN: usize = 100;

pub struct StepOutput<S> {
    pub state: S,
    /// Log-probability of every vocabulary entry; `-inf` marks tokens that
    /// may not be emitted.
    pub log_probs: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// An autoregressive scorer: given the state after the prefix and the last
/// emitted token, produce next-token log-probabilities.
pub trait StepModel {
    type State: Clone;

    fn initial(&self) -> Result<Self::State>;

    fn step(&self, state: &Self::State, prev_token: usize) -> Result<StepOutput<Self::State>>;

    fn bos(&self) -> usize {
        BOS
    }

    fn eos(&self) -> usize {
        EOS
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Emitted content tokens, EOS excluded.
    pub tokens: Vec<usize>,
    /// Sum of per-step log-probabilities, including the EOS step.
    pub score: f64,
    pub state: S,
    pub last_token: usize,
    /// One record per content token.
    pub alignments: Vec<AttentionRecord>,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    fn rank_score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.score / self.steps().max(1) as f64
        } else {
            self.score
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Rank by mean per-step log-probability instead of the raw sum.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 5,
            max_len: DEFAULT_MAX_LEN,
            length_normalize: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BeamResult<S> {
    pub best: Hypothesis<S>,
    /// Every completed candidate: EOS-terminated hypotheses in the order
    /// they finished, then survivors cut off at `max_len`.
    pub pool: Vec<Hypothesis<S>>,
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    Ok(())
}

fn extend<S: Clone>(
    h: &Hypothesis<S>,
    state: &S,
    token: usize,
    lp: f64,
    alpha: &[f64],
    eos: usize,
) -> Hypothesis<S> {
    let mut next = Hypothesis {
        tokens: h.tokens.clone(),
        score: h.score + lp,
        state: state.clone(),
        last_token: token,
        alignments: h.alignments.clone(),
        finished: token == eos,
    };
    if !next.finished {
        next.tokens.push(token);
        next.alignments.push(AttentionRecord {
            alpha: alpha.to_vec(),
        });
    }
    next
}

fn start<M: StepModel>(model: &M) -> Result<Hypothesis<M::State>> {
    Ok(Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state: model.initial()?,
        last_token: model.bos(),
        alignments: Vec::new(),
        finished: false,
    })
}

/// Emits the highest-scoring token at every step (lowest id on ties) until
/// EOS or `max_len` steps.
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis<M::State>> {
    check_max_len(max_len)?;
    let eos = model.eos();
    let mut hyp = start(model)?;
    for _ in 0..max_len {
        let out = model.step(&hyp.state, hyp.last_token)?;
        let mut best: Option<(usize, f64)> = None;
        for (tok, &lp) in out.log_probs.iter().enumerate() {
            let total = hyp.score + lp;
            if lp.is_finite() && best.is_none_or(|(_, b)| total > b) {
                best = Some((tok, total));
            }
        }
        let (tok, _) = best.ok_or_else(|| {
            Error::Usage("model assigns no finite probability to any token".into())
        })?;
        hyp = extend(&hyp, &out.state, tok, out.log_probs[tok], &out.alpha, eos);
        if hyp.finished {
            break;
        }
    }
    Ok(hyp)
}

/// Beam search over cumulative log-probability.
///
/// At each step every live hypothesis is expanded by every token and the
/// top `beam` extensions survive (ties: earlier parent, then lower token
/// id). Extensions ending in EOS leave the beam and are held aside. The
/// result is the best of the held-aside hypotheses and whatever is still
/// live after `max_len` steps.
pub fn beam_decode<M: StepModel>(model: &M, config: &BeamConfig) -> Result<BeamResult<M::State>> {
    if config.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    check_max_len(config.max_len)?;
    let eos = model.eos();
    let norm = config.length_normalize;
    let mut live = vec![start(model)?];
    let mut finished = Vec::new();

    for _ in 0..config.max_len {
        let outs: Vec<StepOutput<M::State>> = live
            .iter()
            .map(|h| model.step(&h.state, h.last_token))
            .collect::<Result<_>>()?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, (h, out)) in live.iter().zip(&outs).enumerate() {
            for (tok, &lp) in out.log_probs.iter().enumerate() {
                if !lp.is_finite() {
                    continue;
                }
                let score = if norm {
                    (h.score + lp) / (h.steps() + 1) as f64
                } else {
                    h.score + lp
                };
                cands.push((score, hi, tok));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(config.beam);

        let mut next = Vec::with_capacity(config.beam);
        for &(_, hi, tok) in &cands {
            let out = &outs[hi];
            let h = extend(
                &live[hi],
                &out.state,
                tok,
                out.log_probs[tok],
                &out.alpha,
                eos,
            );
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }

    let mut pool = finished;
    pool.extend(live);
    let best = pool
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.rank_score(norm)
                .partial_cmp(&b.rank_score(norm))
                .unwrap_or(Ordering::Equal)
                .then(ib.cmp(ia))
        })
        .map(|(_, h)| h.clone())
        .ok_or_else(|| Error::Usage("beam search produced no hypothesis".into()))?;
    Ok(BeamResult { best, pool })
}

/// Maps output ids to strings, substituting each UNK with the source token
/// that received the most attention at that step (earliest on ties).
pub fn replace_unks(
    tokens: &[usize],
    alignments: &[AttentionRecord],
    source: &[String],
    vocab: &Vocabulary,
) -> Result<Vec<String>> {
    if alignments.len() < tokens.len() {
        return Err(Error::Usage(format!(
            "{} output tokens but only {} alignment records",
            tokens.len(),
            alignments.len()
        )));
    }
    tokens
        .iter()
        .zip(alignments)
        .map(|(&tok, rec)| {
            if tok != UNK {
                return Ok(vocab.token(tok).to_string());
            }
            let k = rec
                .argmax()
                .ok_or_else(|| Error::Usage("empty alignment record".into()))?;
            source.get(k).cloned().ok_or_else(|| {
                Error::Usage(format!(
                    "alignment argmax {k} beyond source length {}",
                    source.len()
                ))
            })
        })
        .collect()
}
