//! The assembled language model: embedding table, LSTM stack, mixture output
//! head, and the regularized training loss.

use std::rc::Rc;

use crate::config::ModelConfig;
use crate::doc::{cv_penalty, DocForward, DocHead};
use crate::error::{Error, Result};
use crate::lstm::{embed_sequence, forward_sequence, LstmStack, Mode};
use crate::rng::Rng;
use crate::tensor::{dropout_mask, ParamStore, Tape, Tensor, Var};

pub struct LanguageModel {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    pub embed: crate::tensor::ParamId,
    /// Output matrix; equals `embed` when tied.
    pub output: crate::tensor::ParamId,
    pub stack: LstmStack,
    pub head: DocHead,
}

/// Everything a training step needs from one forward pass.
pub struct TrainForward {
    pub loss: Var,
    pub nll: f32,
    pub beta: f32,
    pub final_state: Vec<(Tensor, Tensor)>,
    pub positions: usize,
}

/// Evaluation outputs: probabilities for each flattened position (row order
/// `t * batch + b`) plus the gate weights.
#[derive(Debug)]
pub struct EvalForward {
    pub probs: Rc<Tensor>,
    pub pi: Rc<Tensor>,
    pub final_state: Vec<(Tensor, Tensor)>,
}

impl LanguageModel {
    pub fn new(cfg: ModelConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let scale = cfg.init.embed_scale;
        let embed = store.add(
            "embed",
            Tensor::uniform(vec![vocab_size, cfg.d_embed], -scale, scale, rng),
        );
        let output = if cfg.tied {
            embed
        } else {
            store.add(
                "output",
                Tensor::uniform(vec![vocab_size, cfg.d_embed], -scale, scale, rng),
            )
        };
        let stack = LstmStack::init(
            &mut store,
            "lstm",
            cfg.d_embed,
            &cfg.d_hidden,
            cfg.init.forget_bias,
            cfg.init.weight_gain,
            rng,
        );
        let head = DocHead::init(&mut store, &cfg, output, rng)?;
        Ok(LanguageModel {
            cfg,
            vocab_size,
            store,
            embed,
            output,
            stack,
            head,
        })
    }

    pub fn zero_state(&self, batch: usize) -> Vec<(Tensor, Tensor)> {
        self.stack.zero_state(batch)
    }

    pub fn param_count(&self) -> usize {
        self.store.total_len()
    }

    /// Shared forward: embed, run the stack, flatten every layer's sequence
    /// (row order `t * batch + b`), and apply the head.
    fn forward_core(
        &self,
        tape: &Tape,
        inputs: &[Vec<usize>],
        state0: &[(Tensor, Tensor)],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(DocForward, Vec<Var>, Vec<Var>, Vec<(Tensor, Tensor)>, usize, usize)> {
        let batch = inputs.len();
        let steps = inputs[0].len();
        if steps == 0 {
            return Err(Error::Eval("empty input slice".into()));
        }
        let token_cols: Vec<Vec<usize>> = (0..steps)
            .map(|t| inputs.iter().map(|row| row[t]).collect())
            .collect();

        let table = tape.param(&self.store, self.embed);
        let embedded = embed_sequence(tape, table, &token_cols, self.cfg.dropout.x, mode, rng)?;
        let input_mask = dropout_mask(
            vec![batch, self.cfg.d_embed],
            self.cfg.dropout.h0,
            mode.is_train(),
            rng,
        )?;
        let mask_var = tape.constant(input_mask);
        let h0: Vec<Var> = embedded
            .iter()
            .map(|&e| tape.mul(e, mask_var))
            .collect::<Result<_>>()?;

        let stack_out = forward_sequence(
            tape,
            &self.store,
            &self.stack,
            &h0,
            state0,
            &self.cfg.dropout,
            self.cfg.weight_drop,
            mode,
            rng,
        )?;

        let flat_layers: Vec<Var> = stack_out
            .dropped
            .iter()
            .map(|seq| tape.concat_rows(seq))
            .collect::<Result<_>>()?;

        let head_out = self
            .head
            .forward(tape, &self.store, &flat_layers, batch, steps, mode, rng)?;
        Ok((
            head_out,
            flat_layers,
            stack_out.raw_top,
            stack_out.final_state,
            batch,
            steps,
        ))
    }

    /// Training loss: mean NLL plus the gate-balance penalty and the
    /// activation / temporal-activation regularizers.
    pub fn forward_train(
        &self,
        tape: &Tape,
        inputs: &[Vec<usize>],
        targets: &[Vec<usize>],
        state0: &[(Tensor, Tensor)],
        rng: &mut Rng,
    ) -> Result<TrainForward> {
        let (head_out, flat_layers, raw_top, final_state, batch, steps) =
            self.forward_core(tape, inputs, state0, Mode::Train, rng)?;

        let mut flat_targets = Vec::with_capacity(batch * steps);
        for t in 0..steps {
            for row in targets {
                flat_targets.push(row[t]);
            }
        }
        let nll = tape.nll_from_probs(head_out.probs, Rc::new(flat_targets))?;
        let nll_value = tape.value(nll).data()[0];

        let beta = cv_penalty(tape, head_out.pi)?;
        let beta_value = tape.value(beta).data()[0];

        let mut loss = nll;
        if self.cfg.lambda_beta > 0.0 {
            let weighted = tape.scale(beta, self.cfg.lambda_beta);
            loss = tape.add(loss, weighted)?;
        }
        if self.cfg.ar_alpha > 0.0 {
            let top_flat = *flat_layers.last().unwrap();
            let sq = tape.mul(top_flat, top_flat)?;
            let ar = tape.scale(tape.mean_all(sq), self.cfg.ar_alpha);
            loss = tape.add(loss, ar)?;
        }
        if self.cfg.tar_gamma > 0.0 && steps > 1 {
            let diffs: Vec<Var> = (1..steps)
                .map(|t| tape.sub(raw_top[t], raw_top[t - 1]))
                .collect::<Result<_>>()?;
            let stacked = tape.concat_rows(&diffs)?;
            let sq = tape.mul(stacked, stacked)?;
            let tar = tape.scale(tape.mean_all(sq), self.cfg.tar_gamma);
            loss = tape.add(loss, tar)?;
        }

        Ok(TrainForward {
            loss,
            nll: nll_value,
            beta: beta_value,
            final_state,
            positions: batch * steps,
        })
    }

    /// Deterministic evaluation pass (no dropout, no loss graph).
    pub fn forward_eval(
        &self,
        tape: &Tape,
        inputs: &[Vec<usize>],
        state0: &[(Tensor, Tensor)],
    ) -> Result<EvalForward> {
        let mut rng = Rng::from_seed(0); // eval samples nothing
        let (head_out, _, _, final_state, _, _) =
            self.forward_core(tape, inputs, state0, Mode::Eval, &mut rng)?;
        Ok(EvalForward {
            probs: tape.value(head_out.probs),
            pi: tape.value(head_out.pi),
            final_state,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{profile, DropoutRates};

    pub fn micro_model(seed: u64, vocab: usize, allocation: Vec<usize>) -> LanguageModel {
        let mut cfg = profile("desk-word").unwrap().model;
        cfg.n_layers = 2;
        cfg.d_embed = 5;
        cfg.d_hidden = vec![6, 4];
        cfg.allocation = allocation;
        cfg.dropout = DropoutRates::zero();
        cfg.weight_drop = 0.0;
        cfg.lambda_beta = 0.001;
        let mut rng = Rng::from_seed(seed);
        LanguageModel::new(cfg, vocab, &mut rng).unwrap()
    }

    #[test]
    fn eval_is_deterministic_and_normalized() {
        let model = micro_model(3, 9, vec![2, 1, 0]);
        let inputs = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]];
        let run = || {
            let tape = Tape::new();
            let out = model
                .forward_eval(&tape, &inputs, &model.zero_state(2))
                .unwrap();
            out.probs.data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        let tape = Tape::new();
        let out = model
            .forward_eval(&tape, &inputs, &model.zero_state(2))
            .unwrap();
        for r in 0..out.probs.rows() {
            let s: f32 = out.probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn train_forward_reports_finite_loss_and_beta() {
        let model = micro_model(5, 8, vec![1, 1, 1]);
        let tape = Tape::new();
        let mut rng = Rng::from_seed(11);
        let inputs = vec![vec![0, 1, 2], vec![3, 4, 5]];
        let targets = vec![vec![1, 2, 3], vec![4, 5, 6]];
        let out = model
            .forward_train(&tape, &inputs, &targets, &model.zero_state(2), &mut rng)
            .unwrap();
        let loss = tape.value(out.loss).data()[0];
        assert!(loss.is_finite());
        assert!(out.beta >= 0.0);
        assert!(out.nll > 0.0);
        assert_eq!(out.positions, 6);
        // regularizers make the loss strictly larger than the bare NLL here
        assert!(loss > out.nll);
    }

    #[test]
    fn state_carry_changes_predictions() {
        let model = micro_model(7, 9, vec![2, 0, 0]);
        let inputs = vec![vec![1, 2]];
        let tape = Tape::new();
        let fresh = model
            .forward_eval(&tape, &inputs, &model.zero_state(1))
            .unwrap();
        let carried_state = fresh.final_state.clone();
        let tape2 = Tape::new();
        let carried = model
            .forward_eval(&tape2, &inputs, &carried_state)
            .unwrap();
        assert_ne!(fresh.probs.data(), carried.probs.data());
    }

    #[test]
    fn out_of_range_token_is_an_index_error() {
        let model = micro_model(9, 6, vec![1, 0, 0]);
        let tape = Tape::new();
        let err = model
            .forward_eval(&tape, &[vec![99]], &model.zero_state(1))
            .unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { .. }));
    }
}
