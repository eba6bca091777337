use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::{lr_at, TrainConfig};
use super::optim::{adamw_step, clip_global_norm, OptimizerState};
use crate::data::{BatchSampler, Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::{perplexity, EvalReport};
use crate::model::{loss_and_grads, ForwardOptions, ModelConfig, ModelParams};
use crate::nn::{dropout_rng, Dropout};
use crate::tensor::Scalar;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub ppl: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_step: u64,
    pub records: Vec<MetricRecord>,
    pub last_train_loss: f64,
    pub final_eval: Option<EvalReport>,
}

/// Where a run writes its artifacts; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Stop (after checkpointing) once this many steps are complete.
    pub stop_after: Option<u64>,
    /// Zero the fusion contribution (used to check that the context path has
    /// no loss term of its own).
    pub zero_fusion: bool,
    /// Echo each metric record to stderr.
    pub echo: bool,
}

impl RunOutput {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Default::default()
        }
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.bin"))
}

pub struct Trainer<T> {
    pub params: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    pub train: TrainConfig,
    pub sampler: BatchSampler,
    pub step: u64,
}

fn check_compatible(model: &ModelConfig, train: &TrainConfig, corpus: &Corpus) -> Result<()> {
    let mut errors = Vec::new();
    if let Err(Error::Config(e)) = model.validate() {
        errors.extend(e);
    }
    if let Err(Error::Config(e)) = train.validate() {
        errors.extend(e);
    }
    if train.seq_len > model.max_seq_len {
        errors.push(format!(
            "train.seq_len ({}) exceeds model.max_seq_len ({})",
            train.seq_len, model.max_seq_len
        ));
    }
    if let Some(&max) = corpus.bytes().iter().max() {
        if max as usize >= model.vocab_size {
            errors.push(format!(
                "corpus contains byte {max} but model.vocab_size is {}",
                model.vocab_size
            ));
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errors))
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: &ModelConfig, train: TrainConfig, corpus: &Corpus) -> Result<Self> {
        check_compatible(model, &train, corpus)?;
        Self::with_params(ModelParams::init(model)?, train, corpus)
    }

    pub fn with_params(params: ModelParams<T>, train: TrainConfig, corpus: &Corpus) -> Result<Self> {
        check_compatible(params.config(), &train, corpus)?;
        let sampler = BatchSampler::new(corpus, Split::Train, train.seq_len, train.batch_size, train.seed)?;
        Ok(Self {
            optimizer: OptimizerState::new(&params),
            params,
            train,
            sampler,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>, corpus: &Corpus) -> Result<Self> {
        check_compatible(ckpt.params.config(), &ckpt.train, corpus)?;
        let mut sampler = BatchSampler::new(
            corpus,
            Split::Train,
            ckpt.train.seq_len,
            ckpt.train.batch_size,
            ckpt.train.seed,
        )?;
        sampler.restore(ckpt.sampler);
        Ok(Self {
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            train: ckpt.train,
            sampler,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            train: self.train.clone(),
            step: self.step,
            sampler: self.sampler.state(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// One optimizer step. A non-finite loss is returned without touching
    /// parameters, moments or the step counter.
    pub fn train_step(&mut self, corpus: &Corpus, zero_fusion: bool) -> Result<StepOutcome> {
        let (inputs, targets) = self.sampler.next_batch(corpus);
        let lr = lr_at(self.step + 1, &self.train);
        let p = self.params.config().dropout;
        let opts = ForwardOptions {
            zero_fusion,
            dropout: (p > 0.0).then(|| Dropout {
                p,
                rng: dropout_rng(self.train.seed, self.step),
            }),
            ..Default::default()
        };
        let (loss, mut grads) = loss_and_grads(&self.params, &inputs, &targets, opts)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Ok(StepOutcome {
                loss,
                grad_norm: f64::NAN,
                lr,
            });
        }
        let grad_norm = clip_global_norm(&mut grads, self.train.grad_clip_norm);
        adamw_step(&mut self.params, &grads, &mut self.optimizer, lr, &self.train)?;
        self.step += 1;
        Ok(StepOutcome { loss, grad_norm, lr })
    }

    pub fn evaluate(&self, corpus: &Corpus) -> Result<EvalReport> {
        perplexity(&self.params, corpus, Split::Val, self.train.seq_len, self.train.eval_windows)
    }

    /// Trains until `train.steps` (or `out.stop_after`), logging train loss
    /// every `log_every` steps, validating every `eval_every` steps and
    /// checkpointing every `checkpoint_every` steps and at the end.
    pub fn run(&mut self, corpus: &Corpus, out: &RunOutput) -> Result<TrainSummary> {
        let start = Instant::now();
        let mut records = Vec::new();
        let mut last_train_loss = f64::NAN;
        let mut final_eval = None;
        let end = out.stop_after.map_or(self.train.steps, |s| s.min(self.train.steps));
        let mut metrics = match &out.dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        let echo = out.echo;
        let mut emit = |rec: MetricRecord, records: &mut Vec<MetricRecord>| -> Result<()> {
            if echo {
                eprintln!(
                    "step {:>6}  {:<5}  loss {:.4}  ppl {:.3}  lr {:.3e}  {:.1}s",
                    rec.step,
                    rec.split,
                    rec.loss,
                    rec.ppl,
                    rec.lr,
                    rec.wall_ms as f64 / 1e3
                );
            }
            if let Some((f, path)) = metrics.as_mut() {
                let mut line = serde_json::to_string(&rec)?;
                line.push('\n');
                f.write_all(line.as_bytes()).map_err(|e| Error::io(&*path, e))?;
            }
            records.push(rec);
            Ok(())
        };
        while self.step < end {
            let outcome = self.train_step(corpus, out.zero_fusion)?;
            if !outcome.loss.is_finite() {
                let step = self.step + 1;
                let path = match &out.dir {
                    Some(dir) => {
                        let p = dir.join(format!("ckpt_diag_{step:06}.bin"));
                        save_checkpoint(&p, &self.checkpoint())?;
                        p
                    }
                    None => PathBuf::new(),
                };
                return Err(Error::NonFiniteLoss { step, path });
            }
            last_train_loss = outcome.loss;
            let step = self.step;
            let wall_ms = start.elapsed().as_millis() as u64;
            if step % self.train.log_every == 0 || step == self.train.steps {
                emit(
                    MetricRecord {
                        step,
                        split: "train".into(),
                        loss: outcome.loss,
                        ppl: outcome.loss.exp(),
                        lr: outcome.lr,
                        wall_ms,
                    },
                    &mut records,
                )?;
            }
            let eval_due = (self.train.eval_every > 0 && step % self.train.eval_every == 0) || step == self.train.steps;
            if eval_due {
                let report = self.evaluate(corpus)?;
                emit(
                    MetricRecord {
                        step,
                        split: "val".into(),
                        loss: report.mean_nll,
                        ppl: report.perplexity,
                        lr: outcome.lr,
                        wall_ms: start.elapsed().as_millis() as u64,
                    },
                    &mut records,
                )?;
                final_eval = Some(report);
            }
            let ckpt_due = (self.train.checkpoint_every > 0 && step % self.train.checkpoint_every == 0)
                || step == self.train.steps
                || step == end;
            if let (true, Some(dir)) = (ckpt_due, &out.dir) {
                save_checkpoint(&checkpoint_path(dir, step), &self.checkpoint())?;
            }
        }
        Ok(TrainSummary {
            final_step: self.step,
            records,
            last_train_loss,
            final_eval,
        })
    }
}
