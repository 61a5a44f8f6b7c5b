use doclm::config::profile;
use doclm::model::LanguageModel;
use doclm::rng::Rng;
use doclm::tensor::Tape;
use std::time::Instant;

fn main() {
    let cfg = profile("desk-char").unwrap();
    let vocab = 30;
    let mut rng = Rng::from_seed(1);
    let mut model = LanguageModel::new(cfg.model.clone(), vocab, &mut rng).unwrap();
    let batch = cfg.training.batch_size;
    let bptt = cfg.training.bptt;
    let mut data_rng = Rng::from_seed(2);
    let inputs: Vec<Vec<usize>> = (0..batch)
        .map(|_| (0..bptt).map(|_| data_rng.below(vocab)).collect())
        .collect();
    let targets = inputs.clone();

    let mut state = model.zero_state(batch);
    let start = Instant::now();
    let steps = 20;
    for _ in 0..steps {
        let tape = Tape::new();
        let out = model
            .forward_train(&tape, &inputs, &targets, &state, &mut rng)
            .unwrap();
        let mut grads = tape.backward(out.loss).unwrap();
        let lr = 0.1f32;
        for (id, var) in tape.bindings() {
            if let Some(g) = grads.take(var) {
                let p = model.store.get_mut(id);
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
        state = out.final_state;
    }
    let dt = start.elapsed().as_secs_f64();
    let tokens = (steps * batch * bptt) as f64;
    println!(
        "{} steps, {:.2}s, {:.0} tokens/sec (batch {} bptt {} params {})",
        steps,
        dt,
        tokens / dt,
        batch,
        bptt,
        model.param_count()
    );
}
