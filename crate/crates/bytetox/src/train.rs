//! Training loops: span-corruption pretraining and regression finetuning.
//!
//! A step runs every batch example on its own tape (in parallel), then reduces
//! losses and gradients in example order so runs are reproducible bit for bit
//! given a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::bytes::ByteSequence;
use crate::elem::Elem;
use crate::heads::AttributeLabels;
use crate::model::{Net, Session};
use crate::optim::{Adam, LrSchedule};
use crate::pretrain::{corrupt_spans, CorpusMixture, PretrainError, SpanCorruptionConfig};
use crate::tensor::TensorError;
use crate::transformer::Runtime;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error("loss diverged (non-finite) at step {step}; last good checkpoint retained")]
    Diverged { step: u64 },
    #[error("no training data")]
    NoData,
    #[error("checkpoint hook failed: {0}")]
    Hook(String),
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub dropout: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            steps: 1000,
            batch_size: 32,
            schedule: LrSchedule::Constant { lr: 1e-3 },
            dropout: 0.1,
            seed: 0,
            log_every: 100,
            checkpoint_every: None,
        }
    }
}

/// (step, mean loss) pairs emitted every `log_every` steps plus the final
/// step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<(u64, f64)>,
}

impl TrainLog {
    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|&(_, l)| l)
    }
}

fn example_rng(step_seed: u64, example_idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    rng.set_stream(example_idx as u64 + 1);
    rng
}

/// Forward/backward one batch; returns (mean loss, gradients by slot scaled
/// for the batch mean).
fn run_batch<F, I, Fwd>(
    net: &Net<F>,
    items: &[I],
    dropout: f64,
    step_seed: u64,
    forward: Fwd,
) -> Result<(f64, Vec<Option<Vec<F>>>), TensorError>
where
    F: Elem,
    I: Sync,
    Fwd: Fn(&mut Session<F>, &I, &mut Runtime<ChaCha8Rng>) -> Result<crate::tensor::Var, TensorError>
        + Sync,
{
    let per_example: Vec<(f64, Vec<Option<Vec<F>>>)> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut rng = example_rng(step_seed, i);
            let mut session = Session::new(net);
            let mut rt = Runtime::training(dropout, &mut rng);
            let loss = forward(&mut session, item, &mut rt)?;
            let grads = session.tape.backward(loss)?;
            Ok((session.tape.scalar(loss).as_f64(), session.param_grads(&grads)))
        })
        .collect::<Result<_, TensorError>>()?;

    let batch = items.len();
    let scale = F::from_f64(1.0 / batch as f64);
    let mut loss_sum = 0.0;
    let mut grads: Vec<Option<Vec<F>>> = vec![None; net.params.len()];
    // Sequential reduce in example order keeps the sum deterministic.
    for (loss, example_grads) in per_example {
        loss_sum += loss;
        for (slot, g) in example_grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut grads[slot] {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += *v * scale;
                    }
                }
                None => {
                    let mut g = g;
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                    grads[slot] = Some(g);
                }
            }
        }
    }
    Ok((loss_sum / batch as f64, grads))
}

/// One finetuning step over labeled examples.
pub fn finetune_step<F: Elem>(
    net: &Net<F>,
    batch: &[(ByteSequence, AttributeLabels)],
    dropout: f64,
    step_seed: u64,
) -> Result<(f64, Vec<Option<Vec<F>>>), TensorError> {
    run_batch(net, batch, dropout, step_seed, |session, (seq, labels), rt| {
        session.finetune_loss(seq, labels, rt)
    })
}

/// One pretraining step over (input, target) denoising pairs.
pub fn pretrain_step<F: Elem>(
    net: &Net<F>,
    batch: &[(ByteSequence, ByteSequence)],
    dropout: f64,
    step_seed: u64,
) -> Result<(f64, Vec<Option<Vec<F>>>), TensorError> {
    run_batch(net, batch, dropout, step_seed, |session, (input, target), rt| {
        session.pretrain_loss(input, target, rt)
    })
}

/// Sample `k` distinct indices (partial Fisher-Yates); falls back to all
/// indices when the pool is small.
fn sample_indices<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Checkpoint hook invoked at the configured interval and on the final step.
pub type CheckpointHook<'h, F> = dyn FnMut(&Net<F>, u64, f64) -> Result<(), String> + 'h;

fn maybe_checkpoint<F: Elem>(
    hook: &mut Option<&mut CheckpointHook<'_, F>>,
    every: Option<u64>,
    net: &Net<F>,
    step: u64,
    final_step: u64,
    loss: f64,
) -> Result<(), TrainError> {
    let due = match every {
        Some(k) if k > 0 => step % k == 0 || step == final_step,
        _ => step == final_step,
    };
    if due {
        if let Some(h) = hook {
            h(net, step, loss).map_err(TrainError::Hook)?;
        }
    }
    Ok(())
}

/// Finetune on labeled byte sequences. Aborts on divergence, leaving the
/// parameters and any checkpoints from before the bad step intact.
pub fn train_finetune<F: Elem>(
    net: &mut Net<F>,
    data: &[(ByteSequence, AttributeLabels)],
    opts: &TrainOpts,
    mut hook: Option<&mut CheckpointHook<'_, F>>,
) -> Result<TrainLog, TrainError> {
    if data.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut opt = Adam::new(&net.params);
    let mut data_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xda7a_5eed);
    let mut log = TrainLog::default();
    for step in 1..=opts.steps {
        let idx = sample_indices(data.len(), opts.batch_size, &mut data_rng);
        let batch: Vec<(ByteSequence, AttributeLabels)> =
            idx.iter().map(|&i| data[i].clone()).collect();
        let (loss, grads) =
            finetune_step(net, &batch, opts.dropout, opts.seed.wrapping_add(step))?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        opt.step(&mut net.params, &grads, opts.schedule.lr(step));
        if step % opts.log_every == 0 || step == opts.steps {
            log.entries.push((step, loss));
        }
        maybe_checkpoint(&mut hook, opts.checkpoint_every, net, step, opts.steps, loss)?;
    }
    Ok(log)
}

/// Pretrain with span corruption over a corpus mixture.
pub fn train_pretrain<F: Elem>(
    net: &mut Net<F>,
    mixture: &CorpusMixture,
    corruption: &SpanCorruptionConfig,
    opts: &TrainOpts,
    mut hook: Option<&mut CheckpointHook<'_, F>>,
) -> Result<TrainLog, TrainError> {
    corruption.validate()?;
    if corruption.max_sentinels > net.cfg.max_sentinels {
        return Err(PretrainError::BadConfig(format!(
            "corruption uses up to {} sentinels but the model embeds only {}",
            corruption.max_sentinels, net.cfg.max_sentinels
        ))
        .into());
    }
    let mut opt = Adam::new(&net.params);
    let mut data_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xda7a_5eed);
    let mut log = TrainLog::default();
    for step in 1..=opts.steps {
        let raw = mixture.sample_batch(opts.batch_size, net.cfg.max_len, &mut data_rng);
        let batch: Vec<(ByteSequence, ByteSequence)> = raw
            .iter()
            .map(|seq| {
                let out = corrupt_spans(seq, corruption, &mut data_rng)?;
                Ok((out.input, out.target))
            })
            .collect::<Result<_, PretrainError>>()?;
        let (loss, grads) =
            pretrain_step(net, &batch, opts.dropout, opts.seed.wrapping_add(step))?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        opt.step(&mut net.params, &grads, opts.schedule.lr(step));
        if step % opts.log_every == 0 || step == opts.steps {
            log.entries.push((step, loss));
        }
        maybe_checkpoint(&mut hook, opts.checkpoint_every, net, step, opts.steps, loss)?;
    }
    Ok(log)
}
