//! Optimization loop: AdamW with decoupled weight decay, linear warmup to the
//! peak rate over the first steps, then linear decay to 10% of peak at the
//! final step; per-epoch validation, best/last checkpointing, and a JSON-lines
//! training log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::canonical_json_line;
use crate::error::{Error, Result};
use crate::ingest::{Catalog, LeaveOneOutSplit, SplitExample};
use crate::model::{
    load_checkpoint, loss, loss_and_grad, save_checkpoint, Batch, ModelConfig, ParamSet, Scalar,
};
use crate::prompt::{
    default_template_bank, fit_history, format_example, render_for_training, PromptTemplate,
};
use crate::tokenizer::TokenizerModel;

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup_steps")]
    pub warmup_steps: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_grad_clip")]
    pub grad_clip_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Update only the adapter factors, leaving base weights frozen.
    #[serde(default)]
    pub adapters_only: bool,
}

fn default_peak_lr() -> f64 {
    3e-4
}
fn default_warmup_steps() -> u64 {
    1000
}
fn default_batch_size() -> usize {
    128
}
fn default_epochs() -> u64 {
    5
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: default_peak_lr(),
            warmup_steps: default_warmup_steps(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            weight_decay: default_weight_decay(),
            betas: default_betas(),
            grad_clip_norm: default_grad_clip(),
            seed: 0,
            adapters_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 {
            return Err(Error::config("peak_lr must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be at least 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if let Some(clip) = self.grad_clip_norm {
            if clip <= 0.0 {
                return Err(Error::config("grad_clip_norm must be positive when set"));
            }
        }
        Ok(())
    }
}

/// Learning rate at 1-based `step` out of `total_steps`: linear warmup to the
/// peak over `warmup_steps`, then linear decay to 0.1 * peak at the final
/// step. Continuous at the warmup boundary and non-negative everywhere.
pub fn lr_schedule(cfg: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    debug_assert!(step >= 1, "schedule steps are 1-based");
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if total_steps <= cfg.warmup_steps {
        return cfg.peak_lr;
    }
    let frac = (step.saturating_sub(cfg.warmup_steps)) as f64
        / (total_steps - cfg.warmup_steps) as f64;
    cfg.peak_lr * (0.1 + 0.9 * (1.0 - frac.min(1.0)))
}

/// Optimizer state: step counter, first/second moments for each trainable
/// tensor, best validation loss, and the run's rng.
pub struct TrainState<T: Scalar> {
    pub step: u64,
    pub total_steps: u64,
    pub epoch: u64,
    pub best_valid_loss: f64,
    pub rng: ChaCha20Rng,
    m: BTreeMap<String, ArrayD<T>>,
    v: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(
        params: &ParamSet<T>,
        model_cfg: &ModelConfig,
        train_cfg: &TrainConfig,
        total_steps: u64,
    ) -> Result<Self> {
        let trainable = params.trainable_names(model_cfg, train_cfg.adapters_only)?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for name in &trainable {
            let zeros = ArrayD::<T>::zeros(params.get(name).raw_dim());
            m.insert(name.clone(), zeros.clone());
            v.insert(name.clone(), zeros);
        }
        Ok(TrainState {
            step: 0,
            total_steps,
            epoch: 0,
            best_valid_loss: f64::INFINITY,
            rng: ChaCha20Rng::seed_from_u64(train_cfg.seed),
            m,
            v,
        })
    }

    fn trainable(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }
}

/// One AdamW update on the trainable tensors: moment updates with bias
/// correction, then the decoupled weight-decay step on base weights only.
fn adamw_apply<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    lr: f64,
) {
    let step_t = (state.step + 1) as i32;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(step_t);
    let bc2 = 1.0 - b2.powi(step_t);
    let tb1 = T::from(b1).unwrap();
    let tb2 = T::from(b2).unwrap();
    let one_m_b1 = T::from(1.0 - b1).unwrap();
    let one_m_b2 = T::from(1.0 - b2).unwrap();
    let t_lr = T::from(lr).unwrap();
    let t_bc1 = T::from(bc1).unwrap();
    let t_bc2 = T::from(bc2).unwrap();
    let t_eps = T::from(ADAM_EPS).unwrap();
    let decay = T::from(lr * cfg.weight_decay).unwrap();

    let names: Vec<String> = state.trainable().cloned().collect();
    for name in names {
        let grad = grads.get(&name);
        let m = state.m.get_mut(&name).unwrap();
        let v = state.v.get_mut(&name).unwrap();
        let weight = params.tensors_mut().get_mut(&name).unwrap();
        let apply_decay = cfg.weight_decay > 0.0 && ParamSet::<T>::is_decayed(&name);
        ndarray::Zip::from(weight)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|w, m, v, &g| {
                *m = tb1 * *m + one_m_b1 * g;
                *v = tb2 * *v + one_m_b2 * g * g;
                let m_hat = *m / t_bc1;
                let v_hat = *v / t_bc2;
                let mut next = *w - t_lr * m_hat / (v_hat.sqrt() + t_eps);
                if apply_decay {
                    next = next - decay * *w;
                }
                *w = next;
            });
    }
}

/// Global-norm gradient clipping over the trainable tensors.
fn clip_gradients<T: Scalar>(grads: &mut ParamSet<T>, trainable: &[String], max_norm: f64) {
    let mut sum_sq = 0.0f64;
    for name in trainable {
        for &g in grads.get(name).iter() {
            let g = g.to_f64().unwrap();
            sum_sq += g * g;
        }
    }
    let norm = sum_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from(max_norm / norm).unwrap();
        for name in trainable {
            grads
                .tensors_mut()
                .get_mut(name)
                .unwrap()
                .mapv_inplace(|g| g * scale);
        }
    }
}

/// One optimizer step. Errors (without touching parameters) if the loss is
/// non-finite.
pub fn train_step<T: Scalar>(
    params: &mut ParamSet<T>,
    state: &mut TrainState<T>,
    batch: &Batch,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<T> {
    let (loss_value, mut grads, _) =
        loss_and_grad(params, model_cfg, batch, Some(&mut state.rng)).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!(
                "aborting at optimizer step {}: {msg}",
                state.step + 1
            )),
            other => other,
        })?;
    let trainable: Vec<String> = state.trainable().cloned().collect();
    if let Some(max_norm) = train_cfg.grad_clip_norm {
        clip_gradients(&mut grads, &trainable, max_norm);
    }
    let lr = lr_schedule(train_cfg, state.step + 1, state.total_steps);
    adamw_apply(params, &grads, state, train_cfg, lr);
    state.step += 1;
    Ok(loss_value)
}

/// Token-count-weighted combination of gradient shards. Each shard's gradient
/// is the mean over its own masked tokens, so the weighted average equals the
/// gradient of the concatenated batch; the reduction is order-independent up
/// to floating-point associativity.
pub fn combine_grads<T: Scalar>(shards: &[(ParamSet<T>, usize)]) -> Result<ParamSet<T>> {
    if shards.is_empty() {
        return Err(Error::data("combine_grads: no shards"));
    }
    let total: usize = shards.iter().map(|(_, count)| count).sum();
    if total == 0 {
        return Err(Error::data("combine_grads: zero total mask count"));
    }
    let mut combined = shards[0].0.zeros_like();
    for (shard, count) in shards {
        let weight = T::from(*count as f64 / total as f64).unwrap();
        for (name, tensor) in combined.tensors_mut() {
            tensor.zip_mut_with(shard.get(name), |acc, &g| *acc = *acc + weight * g);
        }
    }
    Ok(combined)
}

/// Tokenized training example: ids with BOS/EOS and the index of the first
/// output-region token.
pub type TokenizedExample = (Vec<u32>, usize);

/// Format, truncate, render, and tokenize split examples. Templates are drawn
/// per example from the bank with the seeded rng (the same draw sequence as
/// [`crate::prompt::assign_templates`]); `fixed_template` pins one template
/// for every example instead, which evaluation uses so prompts are identical
/// across models.
pub fn prepare_examples(
    examples: &[SplitExample],
    catalog: &Catalog,
    bank: &[PromptTemplate],
    tokenizer: &TokenizerModel,
    model_cfg: &ModelConfig,
    seed: u64,
    fixed_template: Option<usize>,
) -> Result<Vec<TokenizedExample>> {
    if bank.is_empty() {
        return Err(Error::config("prepare_examples: empty template bank"));
    }
    if let Some(idx) = fixed_template {
        if idx >= bank.len() {
            return Err(Error::config(format!(
                "fixed template index {idx} outside bank of {}",
                bank.len()
            )));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(examples.len());
    for example in examples {
        let template = match fixed_template {
            Some(idx) => &bank[idx],
            None => &bank[rng.random_range(0..bank.len())],
        };
        let kept = fit_history(
            &example.history,
            &example.target,
            catalog,
            template,
            tokenizer,
            model_cfg.max_len,
            0,
        )?;
        let formatted =
            format_example(kept, &example.target, catalog, template, &example.user_id)?;
        let (text, byte_offset) = render_for_training(&formatted);
        let ids = tokenizer.encode(&text, true, true)?;
        let output_start = tokenizer.offset_to_token_index(&text, byte_offset)? + 1; // +1 for BOS
        out.push((ids, output_start));
    }
    Ok(out)
}

/// Tokenizer-training corpus: every rendered training text (templates drawn
/// with the same seed the fit run will use) plus every catalog title, so
/// titles always have compact stable encodings for the trie.
pub fn prepare_corpus_texts(
    split: &LeaveOneOutSplit,
    catalog: &Catalog,
    seed: u64,
) -> Result<Vec<String>> {
    let bank = default_template_bank();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut corpus = Vec::with_capacity(split.train.len() + catalog.len());
    for example in &split.train {
        let template = &bank[rng.random_range(0..bank.len())];
        let formatted = format_example(
            &example.history,
            &example.target,
            catalog,
            template,
            &example.user_id,
        )?;
        corpus.push(render_for_training(&formatted).0);
    }
    for (_, title) in catalog.iter() {
        corpus.push(title.to_string());
    }
    Ok(corpus)
}

/// Paths produced by a fit run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub final_step: u64,
    pub best_valid_loss: f64,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Serialize)]
struct StepLog {
    kind: &'static str,
    step: u64,
    lr: f64,
    loss: f64,
    wall_time: f64,
}

#[derive(Serialize)]
struct EpochLog {
    kind: &'static str,
    epoch: u64,
    valid_loss: f64,
    wall_time: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    seed: u64,
    step: u64,
    epoch: u64,
    best_valid_loss: f64,
    rng_seed: String,
    rng_word_pos: String,
    train_config: TrainConfig,
}

fn batch_mean_valid_loss<T: Scalar>(
    params: &ParamSet<T>,
    model_cfg: &ModelConfig,
    valid: &[TokenizedExample],
    batch_size: usize,
) -> Result<f64> {
    if valid.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total_nll = 0.0f64;
    let mut total_mask = 0usize;
    for chunk in valid.chunks(batch_size) {
        let batch = Batch::from_examples(chunk)?;
        let count = batch.mask_count();
        let value = loss(params, model_cfg, &batch)?.to_f64().unwrap();
        total_nll += value * count as f64;
        total_mask += count;
    }
    Ok(total_nll / total_mask as f64)
}

fn save_train_checkpoint<T: Scalar>(
    path: &Path,
    params: &ParamSet<T>,
    state: &TrainState<T>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    with_optimizer: bool,
) -> Result<()> {
    let mut tensors = params.tensors().clone();
    if with_optimizer {
        for (name, tensor) in &state.m {
            tensors.insert(format!("opt.m.{name}"), tensor.clone());
        }
        for (name, tensor) in &state.v {
            tensors.insert(format!("opt.v.{name}"), tensor.clone());
        }
    }
    let meta = CheckpointMeta {
        seed: train_cfg.seed,
        step: state.step,
        epoch: state.epoch,
        best_valid_loss: state.best_valid_loss,
        rng_seed: hex::encode(state.rng.get_seed()),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        train_config: train_cfg.clone(),
    };
    save_checkpoint(path, model_cfg, &tensors, &serde_json::to_value(&meta)?)
}

/// Load model parameters from a checkpoint, dropping any optimizer tensors.
pub fn load_params<T: Scalar>(path: &Path) -> Result<(ModelConfig, ParamSet<T>)> {
    let (cfg, mut tensors, _) = load_checkpoint::<T>(path)?;
    tensors.retain(|name, _| !name.starts_with("opt."));
    let params = ParamSet::from_tensors(&cfg, tensors)?;
    Ok((cfg, params))
}

fn restore_state<T: Scalar>(
    path: &Path,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    total_steps: u64,
) -> Result<(ParamSet<T>, TrainState<T>)> {
    let (stored_cfg, mut tensors, meta) = load_checkpoint::<T>(path)?;
    if &stored_cfg != model_cfg {
        return Err(Error::config(
            "resume: checkpoint model config differs from the requested config",
        ));
    }
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    if &meta.train_config != train_cfg {
        return Err(Error::config(
            "resume: training config differs from the interrupted run (the schedule would change)",
        ));
    }
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let names: Vec<String> = tensors.keys().cloned().collect();
    for name in names {
        if let Some(base) = name.strip_prefix("opt.m.") {
            m.insert(base.to_string(), tensors.remove(&name).unwrap());
        } else if let Some(base) = name.strip_prefix("opt.v.") {
            v.insert(base.to_string(), tensors.remove(&name).unwrap());
        }
    }
    let restored = ParamSet::from_tensors(model_cfg, tensors)?;
    let trainable = restored.trainable_names(model_cfg, train_cfg.adapters_only)?;
    if m.len() != trainable.len() || v.len() != trainable.len() {
        return Err(Error::config(
            "resume: checkpoint optimizer state does not match the trainable set",
        ));
    }
    let seed_bytes: [u8; 32] = hex::decode(&meta.rng_seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::data("resume: bad rng seed in checkpoint meta"))?;
    let mut rng = ChaCha20Rng::from_seed(seed_bytes);
    let word_pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| Error::data("resume: bad rng word position"))?;
    rng.set_word_pos(word_pos);
    Ok((
        restored,
        TrainState {
            step: meta.step,
            total_steps,
            epoch: meta.epoch,
            best_valid_loss: meta.best_valid_loss,
            rng,
            m,
            v,
        },
    ))
}

/// Run the training loop over the split, writing `best.ckpt`, `last.ckpt`,
/// and `train_log.jsonl` into `out_dir`. With `resume`, training continues
/// from `last.ckpt` when it exists (the training config must match the
/// interrupted run, since the schedule depends on the total step budget).
pub fn fit<T: Scalar>(
    split: &LeaveOneOutSplit,
    catalog: &Catalog,
    tokenizer: &TokenizerModel,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<FitOutcome> {
    fit_with_epoch_limit::<T>(
        split, catalog, tokenizer, model_cfg, train_cfg, out_dir, resume, None,
    )
}

/// [`fit`] that executes at most `epoch_limit` epochs in this invocation and
/// then returns, leaving `last.ckpt` ready to resume. The learning-rate
/// schedule always spans the config's full epoch budget.
#[allow(clippy::too_many_arguments)]
pub fn fit_with_epoch_limit<T: Scalar>(
    split: &LeaveOneOutSplit,
    catalog: &Catalog,
    tokenizer: &TokenizerModel,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
    epoch_limit: Option<u64>,
) -> Result<FitOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::data("fit: training split is empty"));
    }
    if tokenizer.vocab_size() > model_cfg.vocab_size {
        return Err(Error::config(format!(
            "tokenizer vocabulary ({}) exceeds model vocab_size ({})",
            tokenizer.vocab_size(),
            model_cfg.vocab_size
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let bank = default_template_bank();
    let train_examples = prepare_examples(
        &split.train,
        catalog,
        &bank,
        tokenizer,
        model_cfg,
        train_cfg.seed,
        None,
    )?;
    // Validation always uses template 0 so the measurement never depends on
    // instruction sampling.
    let valid_examples = prepare_examples(
        &split.valid,
        catalog,
        &bank,
        tokenizer,
        model_cfg,
        train_cfg.seed,
        Some(0),
    )?;

    let steps_per_epoch = train_examples.len().div_ceil(train_cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * train_cfg.epochs;

    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let log_path = out_dir.join(TRAIN_LOG);

    let (mut params, mut state) = if resume && last_path.exists() {
        restore_state::<T>(&last_path, model_cfg, train_cfg, total_steps)?
    } else {
        let params = ParamSet::<T>::init(model_cfg, train_cfg.seed)?;
        let state = TrainState::new(&params, model_cfg, train_cfg, total_steps)?;
        (params, state)
    };

    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?,
    );
    let started = Instant::now();

    let start_epoch = state.epoch;
    let end_epoch = match epoch_limit {
        Some(limit) => train_cfg.epochs.min(start_epoch + limit),
        None => train_cfg.epochs,
    };
    for epoch in start_epoch..end_epoch {
        let mut order: Vec<usize> = (0..train_examples.len()).collect();
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(train_cfg.batch_size) {
            let selected: Vec<TokenizedExample> =
                chunk.iter().map(|&i| train_examples[i].clone()).collect();
            let batch = Batch::from_examples(&selected)?;
            let loss_value = train_step(&mut params, &mut state, &batch, train_cfg, model_cfg)?;
            let entry = StepLog {
                kind: "step",
                step: state.step,
                lr: lr_schedule(train_cfg, state.step, state.total_steps),
                loss: loss_value.to_f64().unwrap(),
                wall_time: started.elapsed().as_secs_f64(),
            };
            writeln!(log, "{}", canonical_json_line(&entry)?)
                .map_err(|e| Error::io(&log_path, e))?;
        }

        let valid_loss =
            batch_mean_valid_loss(&params, model_cfg, &valid_examples, train_cfg.batch_size)?;
        let entry = EpochLog {
            kind: "epoch",
            epoch: epoch + 1,
            valid_loss,
            wall_time: started.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", canonical_json_line(&entry)?).map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;

        state.epoch = epoch + 1;
        if valid_loss.is_nan() || valid_loss < state.best_valid_loss {
            if !valid_loss.is_nan() {
                state.best_valid_loss = valid_loss;
            }
            save_train_checkpoint(&best_path, &params, &state, model_cfg, train_cfg, false)?;
        }
        save_train_checkpoint(&last_path, &params, &state, model_cfg, train_cfg, true)?;
    }

    Ok(FitOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log_path,
        final_step: state.step,
        best_valid_loss: state.best_valid_loss,
    })
}
