//! Source encoders: a two-layer LSTM stack and the Neural Semantic Encoder.
//!
//! The NSE keeps a memory matrix with one row per source token, seeded with
//! the token embeddings. Each step reads the next token with an LSTM,
//! retrieves a softmax-weighted mix of memory rows keyed on the read state,
//! fuses the two through an MLP, runs the fused vector through a write
//! LSTM and finally pulls every memory row toward the written vector in
//! proportion to its retrieval weight.

use std::fmt;

use rand::{Rng, RngCore};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{LstmCell, Mlp};
use crate::tensor::{ParamStore, Tensor};

/// Forward-pass regime. Dropout only fires in `Train`.
pub enum Mode<'r> {
    Eval,
    Train { rate: f64, rng: &'r mut dyn RngCore },
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { rate, rng } => tape.dropout(x, *rate, true, &mut **rng),
        }
    }
}

impl fmt::Debug for Mode<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Eval => f.write_str("Eval"),
            Mode::Train { rate, .. } => write!(f, "Train {{ rate: {rate} }}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Lstm,
    Nse,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Lstm => "lstm",
            EncoderKind::Nse => "nse",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(EncoderKind::Lstm),
            "nse" => Ok(EncoderKind::Nse),
            other => Err(Error::Config(format!(
                "unknown encoder kind {other:?} (expected lstm or nse)"
            ))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-step record of the NSE memory, kept only on request.
#[derive(Clone, Debug, Default)]
pub struct NseTrace {
    /// Retrieval weights, one row per encoding step.
    pub sigma: Vec<Vec<f64>>,
    /// `memory[0]` is the initial memory; `memory[t]` follows step `t`.
    pub memory: Vec<Tensor>,
    /// Written vectors `w_t` before output dropout.
    pub writes: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[T x D]` hidden states attended over by the decoder.
    pub states: Var,
    /// Final `(h, c)` of the recurrent layers, bottom to top.
    pub finals: Vec<(Var, Var)>,
    /// Final NSE memory.
    pub memory: Option<Var>,
    pub trace: Option<NseTrace>,
}

impl EncoderOutput {
    /// `(h, c)` of the layer that produced `states`.
    pub fn top_final(&self) -> (Var, Var) {
        *self
            .finals
            .last()
            .expect("encoder always has a recurrent layer")
    }
}

fn check_input(tape: &Tape, embeddings: Var, dim: usize) -> Result<usize> {
    let shape = tape.shape(embeddings);
    if shape.len() != 2 || shape[1] != dim {
        return Err(Error::dim(
            "encode",
            format!("expected [T x {dim}], got {shape:?}"),
        ));
    }
    Ok(shape[0])
}

/// Two stacked LSTM layers; the top layer's states are the output.
#[derive(Clone, Debug)]
pub struct LstmEncoder {
    pub layer1: LstmCell,
    pub layer2: LstmCell,
    pub dim: usize,
}

impl LstmEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        forget_bias: Option<f64>,
        rng: &mut R,
    ) -> Self {
        LstmEncoder {
            layer1: LstmCell::new(store, &format!("{name}.l1"), dim, dim, forget_bias, rng),
            layer2: LstmCell::new(store, &format!("{name}.l2"), dim, dim, forget_bias, rng),
            dim,
        }
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        embeddings: Var,
        mode: &mut Mode,
    ) -> Result<EncoderOutput> {
        let len = check_input(tape, embeddings, self.dim)?;
        let inputs = mode.dropout(tape, embeddings)?;
        let (mut h1, mut c1) = self.layer1.zero_state(tape);
        let (mut h2, mut c2) = self.layer2.zero_state(tape);
        let mut outs = Vec::with_capacity(len);
        for t in 0..len {
            let x = tape.row(inputs, t)?;
            (h1, c1) = self.layer1.step(tape, x, h1, c1)?;
            let between = mode.dropout(tape, h1)?;
            (h2, c2) = self.layer2.step(tape, between, h2, c2)?;
            outs.push(h2);
        }
        let states = tape.stack_rows(&outs)?;
        let states = mode.dropout(tape, states)?;
        Ok(EncoderOutput {
            states,
            finals: vec![(h1, c1), (h2, c2)],
            memory: None,
            trace: None,
        })
    }
}

/// How an NSE step obtains its retrieval weights.
#[derive(Clone, Debug)]
pub enum SigmaSource {
    /// Softmax of read-state/memory-row dot products.
    Attend,
    /// Externally supplied weights, used to probe the update algebra.
    Forced(Vec<f64>),
}

#[derive(Clone, Copy, Debug)]
pub struct NseState {
    pub read_h: Var,
    pub read_c: Var,
    pub write_h: Var,
    pub write_c: Var,
    /// `[T x D]` memory before this step.
    pub memory: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NseStepOutput {
    pub write: Var,
    pub sigma: Var,
    pub retrieved: Var,
    pub compose_out: Var,
    pub state: NseState,
}

/// Read LSTM, compose MLP and write LSTM sharing one memory matrix.
#[derive(Clone, Debug)]
pub struct NseEncoder {
    pub read: LstmCell,
    pub compose: Mlp,
    pub write: LstmCell,
    pub dim: usize,
}

impl NseEncoder {
    /// Compose maps `[r; m]` (2D) through a D-wide tanh layer to 2D.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        forget_bias: Option<f64>,
        rng: &mut R,
    ) -> Self {
        NseEncoder {
            read: LstmCell::new(store, &format!("{name}.read"), dim, dim, forget_bias, rng),
            compose: Mlp::new(
                store,
                &format!("{name}.compose"),
                2 * dim,
                dim,
                2 * dim,
                rng,
            ),
            write: LstmCell::new(
                store,
                &format!("{name}.write"),
                2 * dim,
                dim,
                forget_bias,
                rng,
            ),
            dim,
        }
    }

    pub fn initial_state(&self, tape: &mut Tape, memory: Var) -> NseState {
        let (read_h, read_c) = self.read.zero_state(tape);
        let (write_h, write_c) = self.write.zero_state(tape);
        NseState {
            read_h,
            read_c,
            write_h,
            write_c,
            memory,
        }
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        x: Var,
        state: NseState,
        sigma: &SigmaSource,
    ) -> Result<NseStepOutput> {
        let rows = tape.shape(state.memory)[0];
        if tape.shape(state.memory) != [rows, self.dim] {
            return Err(Error::dim(
                "nse_step",
                format!("memory shape {:?}", tape.shape(state.memory)),
            ));
        }
        let (read_h, read_c) = self.read.step(tape, x, state.read_h, state.read_c)?;
        let sigma = match sigma {
            SigmaSource::Attend => {
                let scores = tape.matmul(state.memory, read_h)?;
                tape.softmax_rows(scores)?
            }
            SigmaSource::Forced(w) => {
                if w.len() != rows {
                    return Err(Error::dim(
                        "nse_step",
                        format!("{} forced weights for {rows} slots", w.len()),
                    ));
                }
                tape.leaf(Tensor::vector(w.clone()))
            }
        };
        let retrieved = tape.matmul(sigma, state.memory)?;
        let fused = tape.concat(read_h, retrieved)?;
        let compose_out = self.compose.forward(tape, fused)?;
        let (write_h, write_c) =
            self.write
                .step(tape, compose_out, state.write_h, state.write_c)?;
        let memory = tape.interpolate_rows(state.memory, sigma, write_h)?;
        Ok(NseStepOutput {
            write: write_h,
            sigma,
            retrieved,
            compose_out,
            state: NseState {
                read_h,
                read_c,
                write_h,
                write_c,
                memory,
            },
        })
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        embeddings: Var,
        mode: &mut Mode,
        trace: bool,
    ) -> Result<EncoderOutput> {
        let len = check_input(tape, embeddings, self.dim)?;
        let inputs = mode.dropout(tape, embeddings)?;
        let mut state = self.initial_state(tape, embeddings);
        let mut record = trace.then(|| NseTrace {
            memory: vec![tape.tensor(embeddings)],
            ..Default::default()
        });
        let mut outs = Vec::with_capacity(len);
        for t in 0..len {
            let x = tape.row(inputs, t)?;
            let step = self.step(tape, x, state, &SigmaSource::Attend)?;
            if let Some(r) = record.as_mut() {
                r.sigma.push(tape.value(step.sigma).to_vec());
                r.memory.push(tape.tensor(step.state.memory));
                r.writes.push(tape.value(step.write).to_vec());
            }
            outs.push(step.write);
            state = step.state;
        }
        let states = tape.stack_rows(&outs)?;
        let states = mode.dropout(tape, states)?;
        Ok(EncoderOutput {
            states,
            finals: vec![(state.read_h, state.read_c), (state.write_h, state.write_c)],
            memory: Some(state.memory),
            trace: record,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Lstm(LstmEncoder),
    Nse(NseEncoder),
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        kind: EncoderKind,
        store: &mut ParamStore,
        dim: usize,
        forget_bias: Option<f64>,
        rng: &mut R,
    ) -> Self {
        match kind {
            EncoderKind::Lstm => {
                Encoder::Lstm(LstmEncoder::new(store, "enc", dim, forget_bias, rng))
            }
            EncoderKind::Nse => Encoder::Nse(NseEncoder::new(store, "enc", dim, forget_bias, rng)),
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Lstm(_) => EncoderKind::Lstm,
            Encoder::Nse(_) => EncoderKind::Nse,
        }
    }

    /// `trace` is ignored by the LSTM encoder.
    pub fn encode(
        &self,
        tape: &mut Tape,
        embeddings: Var,
        mode: &mut Mode,
        trace: bool,
    ) -> Result<EncoderOutput> {
        match self {
            Encoder::Lstm(e) => e.encode(tape, embeddings, mode),
            Encoder::Nse(e) => e.encode(tape, embeddings, mode, trace),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use crate::layers::init_uniform;
    use crate::tensor::ParamId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(tape: &mut Tape, rows: usize, dim: usize, seed: u64) -> Var {
        tape.leaf(init_uniform(&[rows, dim], &mut rng(seed)))
    }

    #[test]
    fn lstm_encoder_shapes_and_zero_params() {
        let mut store = ParamStore::new();
        let enc = LstmEncoder::new(&mut store, "enc", 4, None, &mut rng(1));
        {
            let mut tape = Tape::new(&store);
            let x = random_input(&mut tape, 1, 4, 2);
            let out = enc.encode(&mut tape, x, &mut Mode::Eval).unwrap();
            assert_eq!(tape.shape(out.states), &[1, 4]);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new(&store);
        let x = random_input(&mut tape, 3, 4, 2);
        let out = enc.encode(&mut tape, x, &mut Mode::Eval).unwrap();
        assert!(tape.value(out.states).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_encoder_is_order_sensitive() {
        let mut store = ParamStore::new();
        let enc = LstmEncoder::new(&mut store, "enc", 4, Some(1.0), &mut rng(3));
        let mut tape = Tape::new(&store);
        let a = tape.leaf(init_uniform(&[1, 4], &mut rng(10)));
        let b = tape.leaf(init_uniform(&[1, 4], &mut rng(11)));
        let (ra, rb) = (tape.row(a, 0).unwrap(), tape.row(b, 0).unwrap());
        let ab = tape.stack_rows(&[ra, rb]).unwrap();
        let ba = tape.stack_rows(&[rb, ra]).unwrap();
        let oab = enc.encode(&mut tape, ab, &mut Mode::Eval).unwrap();
        let oba = enc.encode(&mut tape, ba, &mut Mode::Eval).unwrap();
        let last = |t: &Tape, v: Var| t.value(v)[4..8].to_vec();
        assert_ne!(last(&tape, oab.states), last(&tape, oba.states));
    }

    #[test]
    fn encoders_reject_empty_and_wrong_width() {
        let mut store = ParamStore::new();
        let enc = NseEncoder::new(&mut store, "enc", 4, None, &mut rng(1));
        let mut tape = Tape::new(&store);
        let x = random_input(&mut tape, 2, 3, 1);
        assert!(matches!(
            enc.encode(&mut tape, x, &mut Mode::Eval, false),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn nse_sigma_sums_to_one_and_is_positive() {
        let mut store = ParamStore::new();
        let enc = NseEncoder::new(&mut store, "enc", 5, Some(1.0), &mut rng(4));
        let mut tape = Tape::new(&store);
        let x = random_input(&mut tape, 6, 5, 9);
        let out = enc.encode(&mut tape, x, &mut Mode::Eval, true).unwrap();
        let trace = out.trace.unwrap();
        assert_eq!(trace.sigma.len(), 6);
        for row in &trace.sigma {
            assert_eq!(row.len(), 6);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn nse_initial_memory_is_the_embeddings() {
        let mut store = ParamStore::new();
        let enc = NseEncoder::new(&mut store, "enc", 4, None, &mut rng(5));
        let mut tape = Tape::new(&store);
        let x = random_input(&mut tape, 3, 4, 6);
        let expected = tape.tensor(x);
        let out = enc.encode(&mut tape, x, &mut Mode::Eval, true).unwrap();
        let trace = out.trace.unwrap();
        assert_eq!(trace.memory[0], expected);
        assert_eq!(trace.memory.len(), 4);
        assert_eq!(tape.shape(out.states), &[3, 4]);
    }

    #[test]
    fn nse_zero_read_state_gives_uniform_weights() {
        let mut store = ParamStore::new();
        let enc = NseEncoder::new(&mut store, "enc", 3, None, &mut rng(7));
        for id in [enc.read.w_x, enc.read.w_h, enc.read.bias] {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new(&store);
        let mem = random_input(&mut tape, 4, 3, 8);
        let state = enc.initial_state(&mut tape, mem);
        let x = tape.leaf(Tensor::vector(vec![0.3, 0.1, -0.2]));
        let out = enc.step(&mut tape, x, state, &SigmaSource::Attend).unwrap();
        assert!(tape.value(out.state.read_h).iter().all(|&v| v == 0.0));
        assert!(tape
            .value(out.sigma)
            .iter()
            .all(|&s| (s - 0.25).abs() < 1e-15));
        let m = tape.value(mem);
        for j in 0..3 {
            let mean = (0..4).map(|i| m[i * 3 + j]).sum::<f64>() / 4.0;
            assert!((tape.value(out.retrieved)[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn nse_one_hot_sigma_replaces_single_row() {
        let mut store = ParamStore::new();
        let enc = NseEncoder::new(&mut store, "enc", 3, None, &mut rng(9));
        let mut tape = Tape::new(&store);
        let mem = random_input(&mut tape, 4, 3, 10);
        let before = tape.value(mem).to_vec();
        let state = enc.initial_state(&mut tape, mem);
        let x = tape.leaf(Tensor::vector(vec![0.5, -0.5, 0.25]));
        let forced = SigmaSource::Forced(vec![0.0, 0.0, 1.0, 0.0]);
        let out = enc.step(&mut tape, x, state, &forced).unwrap();
        let after = tape.value(out.state.memory);
        let w = tape.value(out.write);
        for i in 0..4 {
            let row = &after[i * 3..(i + 1) * 3];
            if i == 2 {
                assert_eq!(row, w);
            } else {
                assert_eq!(row, &before[i * 3..(i + 1) * 3]);
            }
        }
        let bad = SigmaSource::Forced(vec![1.0]);
        assert!(enc.step(&mut tape, x, state, &bad).is_err());
    }

    #[test]
    fn nse_single_token_retrieves_its_own_row() {
        let mut store = ParamStore::new();
        let enc = NseEncoder::new(&mut store, "enc", 4, None, &mut rng(11));
        let mut tape = Tape::new(&store);
        let mem = random_input(&mut tape, 1, 4, 12);
        let state = enc.initial_state(&mut tape, mem);
        let x = tape.row(mem, 0).unwrap();
        let out = enc.step(&mut tape, x, state, &SigmaSource::Attend).unwrap();
        assert_eq!(tape.value(out.sigma), &[1.0]);
        assert_eq!(tape.value(out.retrieved), tape.value(mem));
    }

    #[test]
    fn nse_encode_is_bit_identical_across_runs() {
        let mut store = ParamStore::new();
        let enc = NseEncoder::new(&mut store, "enc", 4, Some(1.0), &mut rng(13));
        let run = || {
            let mut tape = Tape::new(&store);
            let x = random_input(&mut tape, 5, 4, 14);
            let out = enc.encode(&mut tape, x, &mut Mode::Eval, false).unwrap();
            tape.value(out.states)
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nse_gradient_check_small() {
        let mut store = ParamStore::new();
        let enc = NseEncoder::new(&mut store, "enc", 4, Some(1.0), &mut rng(15));
        let x = store.add("x", init_uniform(&[3, 4], &mut rng(16)));
        let ids: Vec<ParamId> = store.ids().collect();
        let report = GradCheck::default()
            .run(&mut store, &ids, |t| {
                let xv = t.param(x);
                let out = enc.encode(t, xv, &mut Mode::Eval, false)?;
                let mem = out.memory.unwrap();
                let a = t.tanh(out.states)?;
                let a = t.sum(a)?;
                let b = t.mul(mem, mem)?;
                let b = t.sum(b)?;
                t.add(a, b)
            })
            .unwrap();
        assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn train_mode_dropout_changes_outputs() {
        let mut store = ParamStore::new();
        let enc = LstmEncoder::new(&mut store, "enc", 4, Some(1.0), &mut rng(17));
        let mut r = rng(18);
        let mut tape = Tape::new(&store);
        let x = random_input(&mut tape, 3, 4, 19);
        let eval = enc.encode(&mut tape, x, &mut Mode::Eval).unwrap();
        let mut mode = Mode::Train {
            rate: 0.5,
            rng: &mut r,
        };
        let train = enc.encode(&mut tape, x, &mut mode).unwrap();
        assert!(tape.is_stochastic());
        assert_ne!(tape.value(eval.states), tape.value(train.states));
    }
}
