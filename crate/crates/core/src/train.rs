//! Toy pretraining: next-token cross-entropy over random corpus windows,
//! AdamW with warmup-cosine decay, fully deterministic under the configured
//! seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{
    init_model, lm_loss_on_tape, register_model, Model, ModelConfig, ScaleVector, ScalesOnTape,
};
use crate::optim::{adamw_step, cosine_schedule, AdamWConfig, AdamWState};
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Window-sampling seed, independent of the weight-init seed.
    pub seed: u64,
    /// Per-op NaN/Inf checking on the tape; off by default for long runs,
    /// the optimizer still rejects non-finite gradients.
    pub check_finite: bool,
}

impl Default for TrainConfig {
    /// Desk defaults: batch 4, peak lr 1e-3, 100-step warmup.
    fn default() -> Self {
        TrainConfig {
            batch: 4,
            lr: 1e-3,
            warmup: 100,
            seed: 7,
            check_finite: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// Batch-mean loss per step, recorded before each update.
    pub step_loss: Vec<f64>,
    /// Mean next-token NLL over held-out windows at the training length,
    /// measured after the final step.
    pub validation_loss: Option<f64>,
}

/// Pretrains a fresh model from `config` for `steps` AdamW updates on random
/// train-split windows of length L+1 (L inputs, L targets). Zero steps
/// returns the initialized model untouched. The corpus must hold at least
/// steps × batch × L train tokens.
pub fn pretrain_toy(
    config: &ModelConfig,
    corpus: &Corpus,
    steps: u64,
    train: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    if train.batch == 0 {
        return Err(Error::Param {
            name: "batch",
            why: "batch size must be positive".into(),
        });
    }
    let mut model = init_model(config)?;
    let mut log = TrainLog::default();
    if steps == 0 {
        return Ok((model, log));
    }
    let window = config.train_len + 1;
    let needed = steps as usize * train.batch * config.train_len;
    if corpus.train().len() < needed.max(window) {
        return Err(Error::Data(format!(
            "train split has {} tokens, {} steps × batch {} × L {} needs {}",
            corpus.train().len(),
            steps,
            train.batch,
            config.train_len,
            needed
        )));
    }

    model.set_requires_grad(true);
    let scales = ScaleVector::default_for(config);
    let mut opt = {
        let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.len()).collect();
        AdamWState::new(AdamWConfig::default(), &sizes)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let stream = corpus.train();

    for step in 0..steps {
        let mut tape = Tape::with_checks(train.check_finite);
        let nodes = register_model(&mut tape, &model);
        let mut losses = Vec::with_capacity(train.batch);
        for _ in 0..train.batch {
            let off = rng.gen_range(0..=stream.len() - window);
            let sample = &stream[off..off + window];
            losses.push(lm_loss_on_tape(
                &mut tape,
                &nodes,
                config,
                sample,
                &ScalesOnTape::Const(&scales),
            )?);
        }
        let loss = tape.mean_of(&losses)?;
        log.step_loss.push(tape.value(loss).data()[0]);
        tape.backward(loss)?;

        // pull gradients from the tape back onto the weight tensors
        let leaf_ids = nodes.leaf_ids();
        {
            let mut named = model.named_tensors_mut();
            debug_assert_eq!(named.len(), leaf_ids.len());
            for ((_, tensor), node) in named.iter_mut().zip(&leaf_ids) {
                let g = tape.grad(*node).ok_or_else(|| {
                    Error::Contract("training leaf missing its gradient".into())
                })?;
                tensor.zero_grad();
                tensor.grad_mut().copy_from_slice(g);
            }
            let lr = cosine_schedule(step + 1, steps, train.warmup.min(steps), train.lr)?;
            let mut params: Vec<(&str, &mut crate::tensor::Tensor)> = named
                .iter_mut()
                .map(|(name, t)| (name.as_str(), &mut **t))
                .collect();
            adamw_step(&mut params, &mut opt, lr)?;
        }
    }

    model.set_requires_grad(false);
    log.validation_loss = Some(validation_loss(&model, corpus, &scales, train.seed)?);
    Ok((model, log))
}

/// Mean next-token NLL over up to 8 held-out windows at the training length.
/// Falls back to train-split windows when the validation split is too short
/// (tiny test corpora).
pub fn validation_loss(
    model: &Model,
    corpus: &Corpus,
    scales: &ScaleVector,
    seed: u64,
) -> Result<f64> {
    let window = model.config.train_len + 1;
    let stream = if corpus.validation().len() >= window {
        corpus.validation()
    } else {
        corpus.train()
    };
    let seqs = crate::corpus::sample_sequences(stream, window, 8, seed ^ 0x5eed)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in &seqs {
        for nll in crate::model::per_position_nll(model, seq, scales)? {
            total += nll;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
