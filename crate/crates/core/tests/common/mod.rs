#![allow(dead_code)]

use contextlm::tensor::{finite_diff_grad, max_relative_error, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `Σ build(inputs) ∘ probe` on a fresh tape, where `probe` is a fixed
/// random weighting, and compares every input gradient against central
/// differences. Returns the worst relative error across inputs.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F, h: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let probe = random_tensor(&mut rng(9_999), &out_shape, 1.0);

    let eval = |xs: &[Tensor<f64>], want_grads: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let loss = if tape.value(out).numel() == 1 && out_shape.is_empty() {
            out
        } else {
            let p = tape.leaf(probe.clone(), false);
            let weighted = tape.mul(out, p).unwrap();
            tape.sum(weighted)
        };
        let value = tape.value(loss).data()[0];
        if !want_grads {
            return (value, vec![]);
        }
        tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| tape.grad_tensor(v)).collect())
    };

    let (_, analytic) = eval(inputs, true);
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe_x| {
                let mut xs = inputs.to_vec();
                xs[i] = probe_x.clone();
                eval(&xs, false).0
            },
            x,
            h,
        );
        worst = worst.max(max_relative_error(analytic[i].data(), numeric.data(), 1e-7));
    }
    worst
}

use contextlm::model::{forward, ForwardOptions, ModelConfig, ModelParams, TokenBatch};

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, batch: usize, seq: usize) -> TokenBatch {
    let ids = (0..batch * seq).map(|_| rng.gen_range(0..vocab)).collect();
    TokenBatch::new(ids, batch, seq).unwrap()
}

/// Params with non-trivial norms and biases so that every gradient path is
/// exercised (fresh init has unit gains and zero biases).
pub fn jittered_params(config: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(config).unwrap();
    let mut r = rng(seed);
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += r.gen_range(-0.2..0.2);
        }
    }
    p
}

pub fn mean_loss(params: &ModelParams<f64>, inputs: &TokenBatch, targets: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let trace = forward(&mut tape, params, &bound, inputs, ForwardOptions::default()).unwrap();
    let l = tape.cross_entropy(trace.logits, targets, None).unwrap();
    tape.value(l).data()[0]
}

/// Central-difference check of every parameter tensor. Returns the worst
/// relative error and the tensor it came from.
pub fn model_gradcheck(params: &ModelParams<f64>, inputs: &TokenBatch, targets: &[usize], h: f64, floor: f64) -> (f64, String) {
    let (_, grads) = contextlm::model::loss_and_grads(params, inputs, targets, ForwardOptions::default()).unwrap();
    let mut worst = (0.0, String::new());
    for (i, name) in params.names().iter().enumerate() {
        let numeric = finite_diff_grad(
            |x| {
                let mut p = params.clone();
                p.tensors_mut()[i] = x.clone();
                mean_loss(&p, inputs, targets)
            },
            params.tensor(i),
            h,
        );
        let err = max_relative_error(grads[i].data(), numeric.data(), floor);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    worst
}
