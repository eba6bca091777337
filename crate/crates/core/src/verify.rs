//! f64 gradient verification suite: every differentiable op in isolation,
//! the chunk/pathway gradient identities, and a central-difference check of
//! every model parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{forward, grad_pathway_report, ForwardOptions, ModelConfig, ModelParams, TokenBatch};
use crate::tensor::{finite_diff_grad, max_relative_error, OpKind, Tape, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const PATHWAY_TOLERANCE: f64 = 1e-10;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-3;
/// Denominator floor for relative errors of near-zero gradients.
pub const FD_FLOOR: f64 = 1e-7;
/// Largest model the suite accepts.
pub const MAX_D_MODEL: usize = 16;
pub const MAX_SEQ_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Extra context, such as the worst parameter tensor.
    pub detail: Option<String>,
}

impl Check {
    fn new(name: impl Into<String>, residual: f64, tolerance: f64, detail: Option<String>) -> Self {
        Self {
            name: name.into(),
            residual,
            tolerance,
            // NaN residuals fail.
            passed: residual <= tolerance,
            detail,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub config: ModelConfig,
    pub seq_len: usize,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// A small graph whose only non-leaf node is one op of `kind`.
fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> Option<(Vec<Tensor<f64>>, Box<Build>)> {
    let mut r = |shape: &[usize]| random(rng, shape);
    let case: (Vec<Tensor<f64>>, Box<Build>) = match kind {
        OpKind::Leaf | OpKind::Detach => return None,
        OpKind::MatMul => (vec![r(&[3, 4]), r(&[4, 2])], Box::new(|tp, v| tp.matmul(v[0], v[1]))),
        OpKind::Transpose => (vec![r(&[3, 4])], Box::new(|tp, v| tp.transpose(v[0]))),
        OpKind::Add => (vec![r(&[3, 4]), r(&[3, 4])], Box::new(|tp, v| tp.add(v[0], v[1]))),
        OpKind::AddRow => (vec![r(&[3, 4]), r(&[4])], Box::new(|tp, v| tp.add_row(v[0], v[1]))),
        OpKind::Scale => (vec![r(&[3, 4])], Box::new(|tp, v| Ok(tp.scale(v[0], -1.7)))),
        OpKind::Mul => (vec![r(&[3, 4]), r(&[3, 4])], Box::new(|tp, v| tp.mul(v[0], v[1]))),
        OpKind::Sum => (vec![r(&[3, 4])], Box::new(|tp, v| Ok(tp.sum(v[0])))),
        OpKind::Gelu => (vec![r(&[3, 4])], Box::new(|tp, v| Ok(tp.gelu(v[0])))),
        OpKind::LayerNorm => (
            vec![r(&[3, 4]), r(&[4]), r(&[4])],
            Box::new(|tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        OpKind::SoftmaxRows => (vec![r(&[3, 4])], Box::new(|tp, v| tp.softmax_rows(v[0]))),
        OpKind::Embedding => (vec![r(&[5, 3])], Box::new(|tp, v| tp.embedding(v[0], &[0, 2, 2, 4]))),
        OpKind::Attention => (
            vec![r(&[6, 4]), r(&[6, 4]), r(&[6, 4])],
            Box::new(|tp, v| tp.attention(v[0], v[1], v[2], 2, 3, 2)),
        ),
        OpKind::CrossEntropy => (
            vec![r(&[4, 5])],
            Box::new(|tp, v| tp.cross_entropy(v[0], &[1, 0, 4, 4], None)),
        ),
        OpKind::MeanPool => (vec![r(&[12, 3])], Box::new(|tp, v| tp.mean_pool(v[0], 2, 6, 2, 3))),
        OpKind::GatherRows => (vec![r(&[3, 2])], Box::new(|tp, v| tp.gather_rows(v[0], &[2, 0, 0, 1]))),
        OpKind::ConcatRows => (vec![r(&[2, 3]), r(&[1, 3])], Box::new(|tp, v| tp.concat_rows(v))),
        OpKind::Dropout => (
            vec![r(&[3, 4])],
            Box::new(|tp, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(5);
                Ok(tp.dropout(v[0], 0.3, &mut mask_rng))
            }),
        ),
    };
    Some(case)
}

/// Analytic vector-Jacobian product of one op (on a tape that may carry an
/// injected fault) against central differences of `Σ probe ∘ op(x)`.
fn check_op(kind: OpKind, fault: Option<OpKind>) -> Result<Option<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ kind as u64);
    let Some((inputs, build)) = op_case(kind, &mut rng) else {
        return Ok(None);
    };
    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let probe = random(&mut rng, tape.value(out).shape());
    tape.backward_from(out, probe.data())?;
    let weighted = |xs: &[Tensor<f64>]| -> f64 {
        let mut tp = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|t| tp.leaf(t.clone(), false)).collect();
        let y = build(&mut tp, &vs).expect("op rebuilt on valid inputs");
        tp.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |xi| {
                let mut xs = inputs.clone();
                xs[i] = xi.clone();
                weighted(&xs)
            },
            x,
            FD_STEP,
        );
        let err = max_relative_error(tape.grad_tensor(vars[i]).data(), numeric.data(), FD_FLOOR);
        worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
    }
    Ok(Some(Check::new(format!("op {}", kind.name()), worst, OP_TOLERANCE, None)))
}

/// One isolated check per differentiable op.
pub fn op_checks(fault: Option<OpKind>) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        checks.extend(check_op(kind, fault)?);
    }
    Ok(checks)
}

/// Parameters moved off their initial symmetric values (unit gains, zero
/// biases) so every gradient path carries signal.
pub fn jittered_params(config: &ModelConfig, seed: u64) -> Result<ModelParams<f64>> {
    let mut params = ModelParams::<f64>::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
    Ok(params)
}

fn model_loss(params: &ModelParams<f64>, inputs: &TokenBatch, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let trace = forward(&mut tape, params, &bound, inputs, ForwardOptions::default())?;
    let loss = tape.cross_entropy(trace.logits, targets, None)?;
    Ok(tape.value(loss).data()[0])
}

/// Worst relative error over all parameters, and the tensor it occurs in.
pub fn model_gradcheck(
    params: &ModelParams<f64>,
    inputs: &TokenBatch,
    targets: &[usize],
    fault: Option<OpKind>,
) -> Result<(f64, String)> {
    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let bound = params.bind(&mut tape, true);
    let trace = forward(&mut tape, params, &bound, inputs, ForwardOptions::default())?;
    let loss = tape.cross_entropy(trace.logits, targets, None)?;
    tape.backward(loss)?;
    let grads = bound.grads(&tape);
    let mut worst = (0.0f64, String::new());
    for (i, name) in params.names().iter().enumerate() {
        let mut probe = params.clone();
        let mut failure = None;
        let numeric = finite_diff_grad(
            |x| {
                probe.tensors_mut()[i] = x.clone();
                model_loss(&probe, inputs, targets).unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            },
            params.tensor(i),
            FD_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let err = max_relative_error(grads[i].data(), numeric.data(), FD_FLOOR);
        if err.is_nan() || err > worst.0 {
            worst = (err, name.clone());
            if err.is_nan() {
                break;
            }
        }
    }
    Ok(worst)
}

/// Runs every check on a jittered copy of `config` at `seq_len`, batch 2.
/// `fault` multiplies one op's backward contributions by 1.01 to show the
/// suite catches it.
pub fn run_suite(config: &ModelConfig, seq_len: usize, seed: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    config.validate()?;
    let mut errs = Vec::new();
    if config.d_model > MAX_D_MODEL {
        errs.push(format!("model.d_model must be <= {MAX_D_MODEL} for gradcheck, got {}", config.d_model));
    }
    if seq_len > MAX_SEQ_LEN || seq_len == 0 || seq_len > config.max_seq_len {
        errs.push(format!(
            "seq_len must be in [1, {}] for gradcheck, got {seq_len}",
            MAX_SEQ_LEN.min(config.max_seq_len)
        ));
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut checks = op_checks(fault)?;

    let params = jittered_params(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let batch = 2;
    let v = config.vocab_size;
    let ids = (0..batch * seq_len).map(|_| rng.gen_range(0..v)).collect();
    let inputs = TokenBatch::new(ids, batch, seq_len)?;
    let targets: Vec<usize> = (0..batch * seq_len).map(|_| rng.gen_range(0..v)).collect();

    let report = grad_pathway_report(&params, &inputs, &targets)?;
    let r = &report.residuals;
    let vacuous = (!config.is_contextlm()).then(|| "vacuous: baseline has no context pathway".to_string());
    for (name, value) in [
        ("encoder gradient = token pathway + context pathway", r.pathway_split),
        ("chunk gradient = sum of broadcast-copy gradients over its segment", r.chunk_aggregation),
        ("no broadcast-copy gradient from outside the segment", r.segment_leakage),
        ("chunk gradient = sum of per-position loss gradients", r.per_token_sum),
        ("positions before a segment contribute zero", r.per_token_causal),
    ] {
        checks.push(Check::new(name, value, PATHWAY_TOLERANCE, vacuous.clone()));
    }

    let (err, worst) = model_gradcheck(&params, &inputs, &targets, fault)?;
    checks.push(Check::new(
        "full-model parameter gradients",
        err,
        MODEL_TOLERANCE,
        Some(format!("worst tensor `{worst}`")),
    ));
    Ok(SuiteReport {
        config: config.clone(),
        seq_len,
        checks,
    })
}
