//! Stacked LSTM encoder with variational (per-sequence) dropout between
//! layers and DropConnect on the recurrent weights.

use std::rc::Rc;

use crate::config::DropoutRates;
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{dropout_mask, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// One LSTM layer's parameters. Gate blocks are ordered (input, forget,
/// cell, output); the forget-gate bias block is initialized separately.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        forget_bias: f32,
        gain: f32,
        rng: &mut Rng,
    ) -> Self {
        let bound = gain / (hidden as f32).sqrt();
        let w_ih = store.add(
            format!("{prefix}.w_ih"),
            Tensor::uniform(vec![4 * hidden, input_dim], -bound, bound, rng),
        );
        let w_hh = store.add(
            format!("{prefix}.w_hh"),
            Tensor::uniform(vec![4 * hidden, hidden], -bound, bound, rng),
        );
        let mut b = Tensor::uniform(vec![4 * hidden], -bound, bound, rng);
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = forget_bias;
        }
        let bias = store.add(format!("{prefix}.bias"), b);
        LstmLayer {
            w_ih,
            w_hh,
            bias,
            input_dim,
            hidden,
        }
    }

    /// Layer weights registered on a tape for one forward call, with the
    /// DropConnect mask (sampled once per call) applied to the recurrent
    /// matrix.
    pub fn bind(
        &self,
        tape: &Tape,
        store: &ParamStore,
        weight_drop: f32,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<BoundLayer> {
        let w_ih = tape.param(store, self.w_ih);
        let w_hh_raw = tape.param(store, self.w_hh);
        let mask = dropout_mask(
            vec![4 * self.hidden, self.hidden],
            weight_drop,
            mode.is_train(),
            rng,
        )?;
        let w_hh = tape.mul(w_hh_raw, tape.constant(mask))?;
        let bias = tape.param(store, self.bias);
        Ok(BoundLayer {
            w_ih,
            w_hh,
            bias,
            hidden: self.hidden,
        })
    }
}

/// Tape handles for one layer within one forward call.
#[derive(Clone, Copy)]
pub struct BoundLayer {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl BoundLayer {
    /// Single cell update: `x` is `[batch x D_in]`, state is `[batch x H]`.
    pub fn step(&self, tape: &Tape, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let gates = tape.affine2(x, self.w_ih, h, self.w_hh, self.bias)?;
        tape.lstm_cell(gates, c)
    }
}

#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

impl LstmStack {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: &[usize],
        forget_bias: f32,
        gain: f32,
        rng: &mut Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut d_in = input_dim;
        for (n, &h) in hidden.iter().enumerate() {
            layers.push(LstmLayer::init(
                store,
                &format!("{prefix}.l{}", n + 1),
                d_in,
                h,
                forget_bias,
                gain,
                rng,
            ));
            d_in = h;
        }
        LstmStack { layers }
    }

    /// Zero initial state for a batch.
    pub fn zero_state(&self, batch: usize) -> Vec<(Tensor, Tensor)> {
        self.layers
            .iter()
            .map(|l| {
                (
                    Tensor::zeros(vec![batch, l.hidden]),
                    Tensor::zeros(vec![batch, l.hidden]),
                )
            })
            .collect()
    }
}

/// All per-timestep outputs of one stack forward call.
pub struct StackForward {
    /// `dropped[n][t]`: layer n output after its variational mask. Index 0
    /// is the (already input-dropped) embedding-level sequence as given, so
    /// the head can draw components from any layer.
    pub dropped: Vec<Vec<Var>>,
    /// Raw final-layer outputs before the output mask, for the temporal
    /// regularizer.
    pub raw_top: Vec<Var>,
    /// Detached final (h, c) per layer, carried into the next slice.
    pub final_state: Vec<(Tensor, Tensor)>,
}

/// Run the stack over a sequence of embedded inputs.
///
/// Variational dropout: one mask per (call, layer), reused at every
/// timestep; the DropConnect mask is sampled once per call inside
/// [`LstmLayer::bind`]. All layers' hidden sequences are returned because
/// the output head may draw on middle layers.
pub fn forward_sequence(
    tape: &Tape,
    store: &ParamStore,
    stack: &LstmStack,
    h0_seq: &[Var],
    state0: &[(Tensor, Tensor)],
    rates: &DropoutRates,
    weight_drop: f32,
    mode: Mode,
    rng: &mut Rng,
) -> Result<StackForward> {
    assert_eq!(state0.len(), stack.layers.len(), "state/layer count");
    let steps = h0_seq.len();
    let batch = tape.value(h0_seq[0]).rows();
    let n_layers = stack.layers.len();

    let mut dropped: Vec<Vec<Var>> = Vec::with_capacity(n_layers + 1);
    dropped.push(h0_seq.to_vec());
    let mut raw_top = Vec::with_capacity(steps);
    let mut final_state = Vec::with_capacity(n_layers);

    let mut inputs: Vec<Var> = h0_seq.to_vec();
    for (n, layer) in stack.layers.iter().enumerate() {
        let bound = layer.bind(tape, store, weight_drop, mode, rng)?;
        let is_top = n + 1 == n_layers;
        let rate = if is_top { rates.out } else { rates.mid };
        let mask = dropout_mask(
            vec![batch, layer.hidden],
            rate,
            mode.is_train(),
            rng,
        )?;
        let mask_var = tape.constant(mask);

        let mut h = tape.constant(state0[n].0.clone());
        let mut c = tape.constant(state0[n].1.clone());
        let mut raw = Vec::with_capacity(steps);
        let mut masked = Vec::with_capacity(steps);
        for &x in &inputs {
            let (h_new, c_new) = bound.step(tape, x, h, c)?;
            h = h_new;
            c = c_new;
            raw.push(h_new);
            masked.push(tape.mul(h_new, mask_var)?);
        }
        final_state.push(((*tape.value(h)).clone(), (*tape.value(c)).clone()));
        if is_top {
            raw_top = raw;
        }
        inputs = masked.clone();
        dropped.push(masked);
    }

    Ok(StackForward {
        dropped,
        raw_top,
        final_state,
    })
}

/// Embedding lookup with word-level dropout: whole rows of the table are
/// zeroed (and survivors rescaled) with one mask per call, so a dropped word
/// is zero at every occurrence in the batch.
pub fn embed_sequence(
    tape: &Tape,
    table: Var,
    token_cols: &[Vec<usize>],
    word_dropout: f32,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Vec<Var>> {
    let vocab = tape.value(table).rows();
    let word_mask = dropout_mask(vec![vocab], word_dropout, mode.is_train(), rng)?;
    let dropped_table = tape.mul_colvec(table, tape.constant(word_mask))?;
    token_cols
        .iter()
        .map(|ids| tape.rows(dropped_table, Rc::new(ids.clone())))
        .collect()
}
