//! Two-layer LSTM decoder with dot-product attention over encoder states.
//!
//! Per step: attention weights come from the previous top-layer state,
//! the bottom layer reads `[y_prev; context]`, the top layer reads the
//! bottom layer's output, and the vocabulary logits are an affine map of
//! `[s_t; context]`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::corpus::BOS;
use crate::encoder::{EncoderOutput, Mode};
use crate::error::{Error, Result};
use crate::layers::{Embedding, Linear, LstmCell};
use crate::tensor::ParamStore;

/// Alignment distribution over source positions for one output step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub alpha: Vec<f64>,
}

impl AttentionRecord {
    /// Position of the largest weight; ties go to the earliest position.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &a) in self.alpha.iter().enumerate() {
            if best.is_none_or(|(_, b)| a > b) {
                best = Some((i, a));
            }
        }
        best.map(|(i, _)| i)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    /// `(h, c)` for the bottom and top layer.
    pub layers: [(Var, Var); 2],
    pub prev_token: usize,
    pub step: usize,
}

impl DecoderState {
    /// Top-layer hidden state `s_t`.
    pub fn top(&self) -> Var {
        self.layers[1].0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderStep {
    pub state: DecoderState,
    pub alpha: Var,
    pub context: Var,
    pub logits: Var,
}

/// Dot-product attention: `alpha = softmax(states · s_prev)`,
/// `context = alpha · states`.
pub fn attend(tape: &mut Tape, s_prev: Var, states: Var) -> Result<(Var, Var)> {
    let (ss, hs) = (tape.shape(states), tape.shape(s_prev));
    if ss.len() != 2 || hs.len() != 1 || ss[1] != hs[0] {
        return Err(Error::dim("attend", format!("state {hs:?} against {ss:?}")));
    }
    let scores = tape.matmul(states, s_prev)?;
    let alpha = tape.softmax_rows(scores)?;
    let context = tape.matmul(alpha, states)?;
    Ok((alpha, context))
}

#[derive(Clone, Debug)]
pub struct AttnDecoder {
    pub embedding: Embedding,
    pub layer1: LstmCell,
    pub layer2: LstmCell,
    pub output: Linear,
    /// Maps the encoder's final `[h; c]` to the four initial decoder vectors.
    pub init: Linear,
    pub dim: usize,
    pub vocab: usize,
}

impl AttnDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab: usize,
        dim: usize,
        forget_bias: Option<f64>,
        rng: &mut R,
    ) -> Self {
        AttnDecoder {
            embedding: Embedding::new(store, "dec.embedding", vocab, dim, rng),
            layer1: LstmCell::new(store, "dec.l1", 2 * dim, dim, forget_bias, rng),
            layer2: LstmCell::new(store, "dec.l2", dim, dim, forget_bias, rng),
            output: Linear::new(store, "dec.out", 2 * dim, vocab, rng),
            init: Linear::new(store, "dec.init", 2 * dim, 4 * dim, rng),
            dim,
            vocab,
        }
    }

    /// `tanh(init · [h_enc; c_enc])` split into both layers' `(h, c)`.
    pub fn init_state(&self, tape: &mut Tape, encoded: &EncoderOutput) -> Result<DecoderState> {
        let (h, c) = encoded.top_final();
        let hc = tape.concat(h, c)?;
        let z = self.init.forward(tape, hc)?;
        let z = tape.tanh(z)?;
        let d = self.dim;
        let h1 = tape.slice(z, 0, d)?;
        let c1 = tape.slice(z, d, d)?;
        let h2 = tape.slice(z, 2 * d, d)?;
        let c2 = tape.slice(z, 3 * d, d)?;
        Ok(DecoderState {
            layers: [(h1, c1), (h2, c2)],
            prev_token: BOS,
            step: 0,
        })
    }

    /// One decoding step consuming the embedding of `state.prev_token`.
    pub fn step(
        &self,
        tape: &mut Tape,
        state: &DecoderState,
        y_prev: Var,
        states: Var,
        mode: &mut Mode,
    ) -> Result<DecoderStep> {
        let (alpha, context) = attend(tape, state.top(), states)?;
        let y_prev = mode.dropout(tape, y_prev)?;
        let input = tape.concat(y_prev, context)?;
        let (h1, c1) = self
            .layer1
            .step(tape, input, state.layers[0].0, state.layers[0].1)?;
        let between = mode.dropout(tape, h1)?;
        let (h2, c2) = self
            .layer2
            .step(tape, between, state.layers[1].0, state.layers[1].1)?;
        let features = tape.concat(h2, context)?;
        let features = mode.dropout(tape, features)?;
        let logits = self.output.forward(tape, features)?;
        Ok(DecoderStep {
            state: DecoderState {
                layers: [(h1, c1), (h2, c2)],
                prev_token: state.prev_token,
                step: state.step + 1,
            },
            alpha,
            context,
            logits,
        })
    }
}
