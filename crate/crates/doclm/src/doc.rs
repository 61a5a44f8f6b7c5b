//! The mixture output head: J softmax components drawn from designated
//! layers of the stack (embeddings included), gated per context from the
//! final hidden state, mixed in probability space, and regularized toward
//! balanced gate usage via a coefficient-of-variation penalty.

use crate::config::{Activation, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    affine_fwd, dropout_mask, softmax_rows_fwd, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::lstm::Mode;

/// One softmax component: projection parameters and the stack layer it
/// reads.
#[derive(Clone, Debug)]
pub struct Component {
    pub w: ParamId,
    pub b: ParamId,
    pub source_layer: usize,
}

/// Head parameters. The shared output matrix is `[V x d]`; with tying it is
/// the embedding table itself. Components are ordered final layer first,
/// matching the `[i_N .. i_0]` allocation serialization.
///
/// The output softmax carries no bias term: component logits are exactly
/// `W~ k_j`, which also keeps the single-component head's log-probability
/// matrix inside the d+1 rank bound that the rank diagnostic checks.
#[derive(Clone, Debug)]
pub struct DocHead {
    pub components: Vec<Component>,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    /// Shared output matrix `[V x d]` (the embedding table when tied).
    pub output: ParamId,
    pub d: usize,
    pub k_activation: Activation,
    pub k_dropout: f32,
}

/// Per-call head outputs on the tape.
pub struct DocForward {
    /// Gate weights, `[M x J]`, rows summing to 1.
    pub pi: Var,
    /// Mixed distribution, `[M x V]`, rows summing to 1.
    pub probs: Var,
    /// Component distributions before mixing.
    pub component_probs: Vec<Var>,
}

impl DocHead {
    pub fn init(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        output: ParamId,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = cfg.d_embed;
        let n = cfg.n_layers;
        let gain = cfg.init.weight_gain;
        let mut components = Vec::new();
        for (j, layer) in cfg.component_layers().into_iter().enumerate() {
            if layer > n {
                return Err(Error::Config(format!(
                    "component {j} drawn from layer {layer} but the stack has {n} layers"
                )));
            }
            let width = cfg.layer_width(layer);
            let bound = gain / (width as f32).sqrt();
            let w = store.add(
                format!("head.k{j}.w"),
                Tensor::uniform(vec![d, width], -bound, bound, rng),
            );
            let b = store.add(
                format!("head.k{j}.b"),
                Tensor::uniform(vec![d], -bound, bound, rng),
            );
            components.push(Component {
                w,
                b,
                source_layer: layer,
            });
        }
        let top_width = cfg.layer_width(n);
        let bound = gain / (top_width as f32).sqrt();
        let j_total = components.len();
        let gate_w = store.add(
            "head.gate.w",
            Tensor::uniform(vec![j_total, top_width], -bound, bound, rng),
        );
        let gate_b = store.add(
            "head.gate.b",
            Tensor::uniform(vec![j_total], -bound, bound, rng),
        );
        Ok(DocHead {
            components,
            gate_w,
            gate_b,
            output,
            d,
            k_activation: cfg.k_activation,
            k_dropout: cfg.dropout.k,
        })
    }

    pub fn total_components(&self) -> usize {
        self.components.len()
    }

    /// Gate weights from the final hidden state: rowwise softmax of a
    /// linear map, so every row sums to 1.
    pub fn gate(&self, tape: &Tape, store: &ParamStore, top: Var) -> Result<Var> {
        let w = tape.param(store, self.gate_w);
        let b = tape.param(store, self.gate_b);
        let logits = tape.affine(top, w, Some(b))?;
        Ok(tape.softmax_rows(logits))
    }

    /// Per-component projections `k_j = W_j h^{n_j} + b_j` (linear by
    /// default, tanh behind the configuration flag), with component dropout
    /// in train mode. `flat_layers[n]` is the `[M x width(n)]` matrix of
    /// layer n states; masks are per sequence (`batch` rows tiled over the
    /// `steps` positions of the flattened layout).
    pub fn project_components(
        &self,
        tape: &Tape,
        store: &ParamStore,
        flat_layers: &[Var],
        batch: usize,
        steps: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Vec<Var>> {
        let mut ks = Vec::with_capacity(self.components.len());
        for comp in &self.components {
            if comp.source_layer >= flat_layers.len() {
                return Err(Error::Config(format!(
                    "component reads layer {} but only {} layer outputs are available",
                    comp.source_layer,
                    flat_layers.len()
                )));
            }
            let w = tape.param(store, comp.w);
            let b = tape.param(store, comp.b);
            let mut k = tape.affine(flat_layers[comp.source_layer], w, Some(b))?;
            if self.k_activation == Activation::Tanh {
                k = tape.tanh(k);
            }
            let mask =
                dropout_mask(vec![batch, self.d], self.k_dropout, mode.is_train(), rng)?
                    .tile_rows(steps);
            k = tape.mul(k, tape.constant(mask))?;
            ks.push(k);
        }
        Ok(ks)
    }

    /// Full head: gate, project, softmax per component, mix in probability
    /// space.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        flat_layers: &[Var],
        batch: usize,
        steps: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<DocForward> {
        let top = *flat_layers.last().expect("at least the embedding layer");
        let pi = self.gate(tape, store, top)?;
        let ks = self.project_components(tape, store, flat_layers, batch, steps, mode, rng)?;
        let output = tape.param(store, self.output);
        let mut component_probs = Vec::with_capacity(ks.len());
        for k in ks {
            let logits = tape.affine(k, output, None)?;
            component_probs.push(tape.softmax_rows(logits));
        }
        let probs = mix_components(tape, pi, &component_probs)?;
        Ok(DocForward {
            pi,
            probs,
            component_probs,
        })
    }
}

/// Weighted average of component distributions: row i of the result is
/// `sum_j pi[i, j] * comps[j][i, :]`.
pub fn mix_components(tape: &Tape, pi: Var, comps: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (j, &p) in comps.iter().enumerate() {
        let weight = tape.select_col(pi, j)?;
        let scaled = tape.mul_colvec(p, weight)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    Ok(acc.expect("at least one component"))
}

/// Coefficient-of-variation penalty over a mini-batch: with B the vector of
/// per-component gate mass (column sums of pi), beta = (std(B)/avg(B))^2
/// using the population standard deviation.
pub fn cv_penalty(tape: &Tape, pi: Var) -> Result<Var> {
    let j = tape.value(pi).cols();
    let b = tape.sum_axis0(pi);
    let mean = tape.scale(tape.sum_all(b), 1.0 / j as f32);
    let mean_b = tape.broadcast_scalar(mean, vec![j])?;
    let centered = tape.sub(b, mean_b)?;
    let var = tape.scale(tape.sum_all(tape.mul(centered, centered)?), 1.0 / j as f32);
    let mean_sq = tape.mul(mean, mean)?;
    tape.div(var, mean_sq)
}

/// Reference mixture path coded directly from the single-source equations:
/// every projection reads the final hidden state. Uses the same forward
/// kernels as the tape, so a head whose allocation sends all components to
/// the final layer must reproduce it bitwise.
pub fn mos_reference_probs(
    top: &Tensor,
    gate_w: &Tensor,
    gate_b: &Tensor,
    projections: &[(Tensor, Tensor)],
    k_activation: Activation,
    output: &Tensor,
) -> Result<Tensor> {
    let pi = softmax_rows_fwd(&affine_fwd(top, gate_w, Some(gate_b))?);
    let m = top.rows();
    let mut acc: Option<Tensor> = None;
    for (j, (w, b)) in projections.iter().enumerate() {
        let mut k = affine_fwd(top, w, Some(b))?;
        if k_activation == Activation::Tanh {
            for v in k.data_mut() {
                *v = v.tanh();
            }
        }
        let probs = softmax_rows_fwd(&affine_fwd(&k, output, None)?);
        // scale row i by pi[i, j], same as the tape's mul_colvec
        let mut scaled = probs.clone();
        let cols = scaled.cols();
        for r in 0..m {
            let weight = pi.at(r, j);
            for v in &mut scaled.data_mut()[r * cols..(r + 1) * cols] {
                *v *= weight;
            }
        }
        acc = Some(match acc {
            None => scaled,
            Some(mut a) => {
                a.add_assign(&scaled);
                a
            }
        });
    }
    Ok(acc.expect("at least one projection"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{profile, DropoutRates};

    fn micro_cfg(allocation: Vec<usize>) -> ModelConfig {
        let mut cfg = profile("desk-word").unwrap().model;
        cfg.n_layers = 2;
        cfg.d_embed = 4;
        cfg.d_hidden = vec![5, 6];
        cfg.allocation = allocation;
        cfg.dropout = DropoutRates::zero();
        cfg.weight_drop = 0.0;
        cfg
    }

    fn head_with_store(cfg: &ModelConfig, vocab: usize, seed: u64) -> (ParamStore, DocHead) {
        let mut store = ParamStore::new();
        let mut rng = Rng::from_seed(seed);
        let output = store.add(
            "output",
            Tensor::uniform(vec![vocab, cfg.d_embed], -0.5, 0.5, &mut rng),
        );
        let head = DocHead::init(&mut store, cfg, output, &mut rng).unwrap();
        (store, head)
    }

    #[test]
    fn zero_gate_weights_give_uniform_pi() {
        let cfg = micro_cfg(vec![2, 1, 0]);
        let (mut store, head) = head_with_store(&cfg, 7, 1);
        for v in store.get_mut(head.gate_w).data_mut() {
            *v = 0.0;
        }
        for v in store.get_mut(head.gate_b).data_mut() {
            *v = 0.0;
        }
        let tape = Tape::new();
        let mut rng = Rng::from_seed(2);
        let top = tape.constant(Tensor::uniform(vec![5, 6], -1.0, 1.0, &mut rng));
        let pi = head.gate(&tape, &store, top).unwrap();
        for &v in tape.value(pi).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_component_pi_is_one() {
        let cfg = micro_cfg(vec![1, 0, 0]);
        let (store, head) = head_with_store(&cfg, 7, 3);
        let tape = Tape::new();
        let mut rng = Rng::from_seed(4);
        let top = tape.constant(Tensor::uniform(vec![4, 6], -2.0, 2.0, &mut rng));
        let pi = head.gate(&tape, &store, top).unwrap();
        assert!(tape.value(pi).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pi_rows_sum_to_one_across_seeds() {
        let cfg = micro_cfg(vec![2, 1, 1]);
        for seed in 0..100 {
            let (store, head) = head_with_store(&cfg, 9, seed);
            let tape = Tape::new();
            let mut rng = Rng::from_seed(seed + 1000);
            let top = tape.constant(Tensor::uniform(vec![3, 6], -3.0, 3.0, &mut rng));
            let pi = head.gate(&tape, &store, top).unwrap();
            let v = tape.value(pi);
            for r in 0..v.rows() {
                let s: f32 = v.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "seed {seed} row {r} sum {s}");
            }
        }
    }

    #[test]
    fn identity_projection_passes_hidden_through() {
        let mut cfg = micro_cfg(vec![1, 0, 0]);
        cfg.d_embed = 6; // d equals the top width so W can be the identity
        let (mut store, head) = head_with_store(&cfg, 7, 5);
        let w = store.get_mut(head.components[0].w);
        for v in w.data_mut() {
            *v = 0.0;
        }
        for i in 0..6 {
            let cols = 6;
            w.data_mut()[i * cols + i] = 1.0;
        }
        for v in store.get_mut(head.components[0].b).data_mut() {
            *v = 0.0;
        }
        let tape = Tape::new();
        let mut rng = Rng::from_seed(6);
        let h = Tensor::uniform(vec![4, 6], -1.0, 1.0, &mut rng);
        let flat = vec![
            tape.constant(Tensor::zeros(vec![4, 6])),
            tape.constant(Tensor::zeros(vec![4, 5])),
            tape.constant(h.clone()),
        ];
        let ks = head
            .project_components(&tape, &store, &flat, 4, 1, Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(tape.value(ks[0]).data(), h.data());
    }

    #[test]
    fn components_follow_allocation_sources() {
        let cfg = micro_cfg(vec![2, 0, 1]);
        let (store, head) = head_with_store(&cfg, 7, 7);
        let layers: Vec<usize> = head.components.iter().map(|c| c.source_layer).collect();
        assert_eq!(layers, vec![2, 2, 0]);
        // mos mode: every component reads the final layer
        let mos = cfg.mos_equivalent();
        let (_, head) = {
            let mut store2 = ParamStore::new();
            let mut rng = Rng::from_seed(8);
            let out = store2.add("output", Tensor::zeros(vec![7, 4]));
            let h = DocHead::init(&mut store2, &mos, out, &mut rng).unwrap();
            (store2, h)
        };
        assert!(head.components.iter().all(|c| c.source_layer == 2));
        let _ = store;
    }

    #[test]
    fn hand_mixture_matches_weighted_average() {
        // pi = (0.5, 0.5), components (0.2,0.3,0.5) and (0.6,0.2,0.2)
        let tape = Tape::new();
        let pi = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let c1 = tape.constant(Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap());
        let c2 = tape.constant(Tensor::new(vec![1, 3], vec![0.6, 0.2, 0.2]).unwrap());
        let p = mix_components(&tape, pi, &[c1, c2]).unwrap();
        let got = tape.value(p);
        for (g, want) in got.data().iter().zip([0.4, 0.25, 0.35]) {
            assert!((g - want).abs() < 1e-6);
        }
    }

    #[test]
    fn one_hot_gate_selects_single_component() {
        let tape = Tape::new();
        let pi = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c1 = tape.constant(Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.8, 0.2]).unwrap());
        let c2 = tape.constant(Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.4, 0.6]).unwrap());
        let p = mix_components(&tape, pi, &[c1, c2]).unwrap();
        let got = tape.value(p);
        assert_eq!(got.row(0), &[0.9, 0.1]);
        assert_eq!(got.row(1), &[0.4, 0.6]);
    }

    #[test]
    fn cv_penalty_hand_case() {
        // column sums (2, 1, 0): avg 1, population variance 2/3
        let tape = Tape::new();
        let pi = tape.constant(
            Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
        );
        let beta = cv_penalty(&tape, pi).unwrap();
        let got = tape.value(beta).data()[0];
        assert!((got - 2.0 / 3.0).abs() < 1e-6, "beta {got}");
    }

    #[test]
    fn cv_penalty_zero_for_uniform_rows() {
        let tape = Tape::new();
        let pi = tape.constant(Tensor::full(vec![7, 4], 0.25));
        let beta = cv_penalty(&tape, pi).unwrap();
        assert!(tape.value(beta).data()[0].abs() < 1e-12);
    }

    #[test]
    fn cv_penalty_decreases_toward_uniformity() {
        // along pi(s) = (1-s) pi0 + s uniform, beta falls as (1-s)^2
        let mut rng = Rng::from_seed(11);
        let raw = Tensor::uniform(vec![6, 3], 0.0, 1.0, &mut rng);
        let mut pi0 = raw.clone();
        for r in 0..6 {
            let s: f32 = raw.row(r).iter().sum();
            for v in &mut pi0.data_mut()[r * 3..(r + 1) * 3] {
                *v /= s;
            }
        }
        let beta_at = |s: f32| {
            let tape = Tape::new();
            let mut blend = pi0.clone();
            for v in blend.data_mut() {
                *v = (1.0 - s) * *v + s / 3.0;
            }
            let pi = tape.constant(blend);
            tape.value(cv_penalty(&tape, pi).unwrap()).data()[0]
        };
        let mut last = f32::INFINITY;
        for step in 0..=5 {
            let s = step as f32 / 5.0;
            let b = beta_at(s);
            assert!(b < last || b == 0.0, "beta did not decrease at s={s}");
            last = b;
        }
        assert!(beta_at(1.0).abs() < 1e-10);
    }

    #[test]
    fn cv_penalty_gradient_matches_differences() {
        use crate::tensor::{analytic_grad, grad_check, well_conditioned};
        for attempt in 0..64 {
            let mut rng = Rng::from_seed(200 + attempt);
            let x = Tensor::uniform(vec![4, 3], -1.0, 1.0, &mut rng);
            let f = |tape: &Tape, v: Var| {
                let pi = tape.softmax_rows(v);
                cv_penalty(tape, pi)
            };
            if !well_conditioned(&analytic_grad(f, &x).unwrap(), 0.05) {
                continue;
            }
            let err = grad_check(f, &x, 1e-2).unwrap();
            assert!(err < 2e-3, "attempt {attempt} err {err}");
            return;
        }
        panic!("no well-conditioned draw");
    }

    #[test]
    fn mos_allocation_matches_reference_bitwise() {
        let cfg = micro_cfg(vec![3, 0, 0]); // all components from the top layer
        let (store, head) = head_with_store(&cfg, 11, 21);
        let mut rng = Rng::from_seed(22);
        for case in 0..100 {
            let m = 1 + (case % 5);
            let top = Tensor::uniform(vec![m, 6], -2.0, 2.0, &mut rng);
            let tape = Tape::new();
            let flat = vec![
                tape.constant(Tensor::zeros(vec![m, 4])),
                tape.constant(Tensor::zeros(vec![m, 5])),
                tape.constant(top.clone()),
            ];
            let mut drop_rng = Rng::from_seed(0);
            let fwd = head
                .forward(&tape, &store, &flat, m, 1, Mode::Eval, &mut drop_rng)
                .unwrap();
            let got = tape.value(fwd.probs);

            let projections: Vec<(Tensor, Tensor)> = head
                .components
                .iter()
                .map(|c| (store.get(c.w).clone(), store.get(c.b).clone()))
                .collect();
            let want = mos_reference_probs(
                &top,
                store.get(head.gate_w),
                store.get(head.gate_b),
                &projections,
                head.k_activation,
                store.get(head.output),
            )
            .unwrap();
            assert_eq!(got.data().len(), want.data().len());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "case {case}");
            }
        }
    }

    #[test]
    fn forward_rows_sum_to_one() {
        let cfg = micro_cfg(vec![2, 1, 1]);
        let (store, head) = head_with_store(&cfg, 13, 31);
        let tape = Tape::new();
        let mut rng = Rng::from_seed(32);
        let flat = vec![
            tape.constant(Tensor::uniform(vec![6, 4], -1.0, 1.0, &mut rng)),
            tape.constant(Tensor::uniform(vec![6, 5], -1.0, 1.0, &mut rng)),
            tape.constant(Tensor::uniform(vec![6, 6], -1.0, 1.0, &mut rng)),
        ];
        let mut drop_rng = Rng::from_seed(33);
        let fwd = head
            .forward(&tape, &store, &flat, 3, 2, Mode::Train, &mut drop_rng)
            .unwrap();
        let p = tape.value(fwd.probs);
        for r in 0..p.rows() {
            let s: f32 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "row {r} sums to {s}");
        }
        let pi = tape.value(fwd.pi);
        for r in 0..pi.rows() {
            let s: f32 = pi.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
