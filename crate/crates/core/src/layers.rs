//! Parameterised building blocks: embeddings, LSTM cell, one-hidden-layer
//! MLP and affine projection.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Half-width of the uniform initialisation interval.
pub const INIT_RANGE: f64 = 0.1;

/// I.i.d. samples from `[-INIT_RANGE, INIT_RANGE)`.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    init_uniform_range(shape, INIT_RANGE, rng)
}

pub fn init_uniform_range<R: Rng + ?Sized>(shape: &[usize], range: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in &mut t.data {
        *v = rng.gen_range(-range..range);
    }
    t
}

fn expect_shape(tape: &Tape, v: Var, want: &[usize], op: &'static str) -> Result<()> {
    if tape.shape(v) != want {
        return Err(Error::dim(
            op,
            format!("expected {want:?}, got {:?}", tape.shape(v)),
        ));
    }
    Ok(())
}

/// Word-vector table `[V x D]`. Row 0 belongs to the padding token.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add(format!("{name}.table"), init_uniform(&[vocab, dim], rng));
        Embedding { table, vocab, dim }
    }

    /// `[T x D]` matrix whose row `t` is the vector of `ids[t]`.
    pub fn lookup(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let table = tape.param(self.table);
        tape.gather_rows(table, ids)
    }
}

/// LSTM cell with gate blocks stacked in the order input, forget,
/// candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// `forget_bias`, when set, overrides the initial forget-gate bias slice.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        forget_bias: Option<f64>,
        rng: &mut R,
    ) -> Self {
        let w_x = store.add(
            format!("{name}.w_x"),
            init_uniform(&[4 * hidden, input], rng),
        );
        let w_h = store.add(
            format!("{name}.w_h"),
            init_uniform(&[4 * hidden, hidden], rng),
        );
        let mut b = init_uniform(&[4 * hidden], rng);
        if let Some(fb) = forget_bias {
            b.data[hidden..2 * hidden].iter_mut().for_each(|v| *v = fb);
        }
        let bias = store.add(format!("{name}.bias"), b);
        LstmCell {
            w_x,
            w_h,
            bias,
            input,
            hidden,
        }
    }

    /// One step; returns the new `(h, c)`.
    pub fn step(&self, tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        expect_shape(tape, x, &[self.input], "lstm_step")?;
        expect_shape(tape, h_prev, &[hd], "lstm_step")?;
        expect_shape(tape, c_prev, &[hd], "lstm_step")?;
        let w_x = tape.param(self.w_x);
        let w_h = tape.param(self.w_h);
        let b = tape.param(self.bias);
        let zx = tape.matmul(w_x, x)?;
        let zh = tape.matmul(w_h, h_prev)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add(z, b)?;

        let i = tape.slice(z, 0, hd)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice(z, hd, hd)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice(z, 2 * hd, hd)?;
        let g = tape.tanh(g)?;
        let o = tape.slice(z, 3 * hd, hd)?;
        let o = tape.sigmoid(o)?;

        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    pub fn zero_state(&self, tape: &mut Tape) -> (Var, Var) {
        let h = tape.leaf(Tensor::zeros(&[self.hidden]));
        let c = tape.leaf(Tensor::zeros(&[self.hidden]));
        (h, c)
    }
}

/// `W2 · tanh(W1 · x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            w1: store.add(format!("{name}.w1"), init_uniform(&[hidden, input], rng)),
            b1: store.add(format!("{name}.b1"), init_uniform(&[hidden], rng)),
            w2: store.add(format!("{name}.w2"), init_uniform(&[output, hidden], rng)),
            b2: store.add(format!("{name}.b2"), init_uniform(&[output], rng)),
            input,
            hidden,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        expect_shape(tape, x, &[self.input], "mlp")?;
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let z = tape.matmul(w1, x)?;
        let z = tape.add(z, b1)?;
        let a = tape.tanh(z)?;
        let y = tape.matmul(w2, a)?;
        tape.add(y, b2)
    }
}

/// Affine map `W · x + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                init_uniform(&[output, input], rng),
            ),
            bias: store.add(format!("{name}.bias"), init_uniform(&[output], rng)),
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        expect_shape(tape, x, &[self.input], "linear")?;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(w, x)?;
        tape.add(y, b)
    }
}
