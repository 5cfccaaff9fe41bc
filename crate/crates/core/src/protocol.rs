//! Pretraining, low-resource adaptation with dev-set early stopping, and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{exact_match, shuffled_indices, AdapterSpec, Adapters, Batch, BackboneConfig, Seq2Seq};
use crate::moe::Mode;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::regularizer::{redundancy_loss, total_loss, BatchReps, CriticSet, RegConfig};
use crate::rsa::Side;
use crate::seed::derive_seed;
use crate::report::ResultRow;
use crate::tasks::{generate_mixture, generate_synthetic, make_lowresource_splits, LowResourceSplit, Sample, SyntheticTask, TaskKind};

pub const DEFAULT_SEEDS: [u64; 5] = [13, 21, 42, 87, 100];
pub const DEFAULT_LR_GRID: [f64; 5] = [5e-5, 1e-4, 5e-4, 1e-3, 5e-3];
pub const DEFAULT_N_D: [usize; 6] = [16, 32, 64, 100, 500, 1000];
pub const ALPHA_GRID: [f64; 6] = [0.04, 0.06, 0.08, 0.1, 0.2, 0.4];

/// Fraction of exactly reproduced answers under greedy decoding.
pub fn evaluate(model: &mut Seq2Seq, store: &ParamStore, samples: &[Sample]) -> Result<f64> {
    let predictions = model.greedy_decode(store, samples)?;
    Ok(exact_match(&predictions, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub tasks: Vec<TaskKind>,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            tasks: vec![TaskKind::Copy, TaskKind::Reverse, TaskKind::KvLookup],
            train_samples: 20_000,
            heldout_samples: 600,
            steps: 4_000,
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 200,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.tasks.is_empty() || self.batch_size == 0 || self.train_samples == 0 {
            return Err(Error::Config("pretraining needs tasks, samples and a positive batch size".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        for t in &self.tasks {
            SyntheticTask::pretraining(*t).format.validate(self.backbone.vocab)?;
        }
        Ok(())
    }

    fn task_list(&self) -> Vec<SyntheticTask> {
        self.tasks.iter().map(|&k| SyntheticTask::pretraining(k)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// `(step, mean NLL per sample)` logged every 100 steps and at the end.
    pub loss_trace: Vec<(usize, f64)>,
    pub heldout_exact_match: f64,
    pub per_task: Vec<(TaskKind, f64)>,
    pub seconds: f64,
}

fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Mean per-sample NLL of `batch`, recorded on `tape`.
pub fn batch_nll(model: &mut Seq2Seq, tape: &mut Tape, store: &ParamStore, batch: &Batch, mode: Mode) -> Result<Var> {
    let fwd = model.forward(tape, store, batch, mode)?;
    total_loss(tape, fwd.logits, &batch.targets, batch.n_b, None, 0.0)
}

/// Trains a fresh backbone with teacher forcing on the pretraining mixture.
pub fn pretrain(config: &PretrainConfig) -> Result<(ParamStore, Seq2Seq, PretrainReport)> {
    config.validate()?;
    let start = Instant::now();
    let mut store = ParamStore::new();
    let mut model = Seq2Seq::new(&mut store, config.backbone, config.seed)?;
    let tasks = config.task_list();
    let train = generate_mixture(&tasks, config.train_samples, derive_seed(config.seed, "pretrain/train"));
    let mut opt = AdamW::new(AdamWConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pretrain/batches"));
    let mut order = Vec::new();
    let mut loss_trace = Vec::new();
    let mut running = 0.0;
    let mut running_n = 0;
    for step in 0..config.steps {
        if order.len() < config.batch_size {
            order = shuffled_indices(train.len(), &mut rng);
        }
        let idx: Vec<usize> = order.split_off(order.len() - config.batch_size.min(order.len()));
        let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let batch = Batch::new(&refs)?;
        store.zero_gradients();
        let mut tape = Tape::new();
        let loss = batch_nll(&mut model, &mut tape, &store, &batch, Mode::Training)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                what: format!("pretraining loss {value}"),
            });
        }
        tape.backward(loss, &mut store)?;
        opt.config.lr = lr_at(step, config.steps, config.warmup_steps, config.lr);
        opt.step(&mut store)?;
        running += value;
        running_n += 1;
        if (step + 1) % 100 == 0 || step + 1 == config.steps {
            loss_trace.push((step + 1, running / running_n as f64));
            running = 0.0;
            running_n = 0;
        }
    }
    let mut per_task = Vec::new();
    let mut total = 0.0;
    let per = (config.heldout_samples / tasks.len()).max(1);
    for t in &tasks {
        let held = generate_synthetic(t, per, derive_seed(config.seed, "pretrain/heldout"));
        let score = evaluate(&mut model, &store, &held)?;
        per_task.push((t.kind, score));
        total += score;
    }
    let report = PretrainReport {
        loss_trace,
        heldout_exact_match: total / tasks.len() as f64,
        per_task,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((store, model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub adapter: AdapterSpec,
    pub reg: RegConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterSpec::default_mixphm(),
            reg: RegConfig::default(),
            lr: 5e-3,
            weight_decay: 0.01,
            batch_size: 16,
            max_epochs: 1000,
            patience: 200,
            seed: 13,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        if matches!(self.adapter, AdapterSpec::None) {
            return Err(Error::Config("adaptation needs an adapter".into()));
        }
        if self.batch_size < 2 && self.reg.alpha > 0.0 {
            return Err(Error::Config("the redundancy term needs batches of at least 2".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }

    fn uses_regularizer(&self) -> bool {
        self.reg.alpha > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_nll: f64,
    pub l_ra: f64,
    pub dev_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub nll: f64,
    pub penalty: f64,
    pub mutual_info: f64,
    pub l_ra: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub history: Vec<EpochMetrics>,
    pub steps: Vec<StepMetrics>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_dev: f64,
    /// Score on the test set after restoring the best weights and merging.
    pub test_score: Option<f64>,
    pub adapter_params: usize,
    pub critic_params: usize,
    pub backbone_checksum: String,
    pub seconds: f64,
    pub store: ParamStore,
    pub model: Seq2Seq,
}

fn pooling_matrix(n_b: usize, n_t: usize) -> Matrix {
    Matrix::from_fn(n_b, n_b * n_t, |b, r| if r / n_t == b { 1.0 / n_t as f64 } else { 0.0 })
}

fn adapter_ids(model: &Seq2Seq, store: &ParamStore) -> Vec<ParamId> {
    model
        .adapters
        .param_ids()
        .into_iter()
        .filter(|&id| !store.get(id).is_retired())
        .collect()
}

/// Tunes adapters on `split.train` with the backbone frozen, selecting the
/// epoch with the best dev exact-match and stopping after `patience` epochs
/// without improvement. Restores the best weights, merges experts and scores
/// `test` when given. With `out_dir`, writes the run directory.
pub fn adapt(
    backbone_store: &ParamStore,
    backbone: &Seq2Seq,
    split: &LowResourceSplit,
    test: Option<&[Sample]>,
    config: &AdaptConfig,
    out_dir: Option<&Path>,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if !matches!(backbone.adapters, Adapters::None) {
        return Err(Error::Config("backbone already carries adapters".into()));
    }
    if split.train.is_empty() || split.dev.is_empty() {
        return Err(Error::Protocol("empty train or dev split".into()));
    }
    let start = Instant::now();
    let mut store = backbone_store.clone();
    let mut model = backbone.clone();
    model.insert_adapters(&mut store, &config.adapter, derive_seed(config.seed, "adapter"))?;
    if let Adapters::MixPhm(m) = &mut model.adapters {
        m.reseed(derive_seed(config.seed, "routing"));
    }
    let critics = config.uses_regularizer().then(|| {
        CriticSet::new(
            &mut store,
            config.reg.critic_kind,
            model.config().d,
            model.adapted_layers(),
            derive_seed(config.seed, "critic"),
        )
    });
    let checksum = store.checksum(ParamGroup::Backbone);
    let tuned = adapter_ids(&model, &store);
    let adapter_params = store.trainable_count(Some(ParamGroup::Adapter));
    let critic_params = critics.as_ref().map_or(0, |c| c.param_count(&store));

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    }

    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "adapt/batches"));
    let mut neg_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "adapt/negatives"));
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, store.snapshot(&tuned));
    let mut step = 0;
    for epoch in 1..=config.max_epochs {
        let order = shuffled_indices(split.train.len(), &mut batch_rng);
        let (mut nll_sum, mut lra_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &split.train[i]).collect();
            let batch = Batch::new(&refs)?;
            store.zero_gradients();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &store, &batch, Mode::Training)?;
            let nll = total_loss(&mut tape, fwd.logits, &batch.targets, batch.n_b, None, 0.0)?;
            let nll_value = tape.scalar(nll);
            let mut metrics = StepMetrics {
                step,
                nll: nll_value,
                penalty: 0.0,
                mutual_info: 0.0,
                l_ra: 0.0,
                total: 0.0,
            };
            let loss = match &critics {
                Some(critics) if batch.n_b >= 2 => {
                    if !batch.is_uniform() {
                        return Err(Error::Protocol("the redundancy term needs equal-length samples".into()));
                    }
                    let enc_pool = tape.constant(pooling_matrix(batch.n_b, batch.src_len));
                    let dec_pool = tape.constant(pooling_matrix(batch.n_b, batch.tgt_len));
                    let enc_bar = tape.matmul(enc_pool, fwd.enc_out)?;
                    let dec_bar = tape.matmul(dec_pool, fwd.dec_out)?;
                    let reps: Vec<BatchReps> = fwd
                        .taps
                        .iter()
                        .map(|t| BatchReps {
                            z_a: t.delta,
                            z: t.h,
                            h_bar: if t.side == Side::Encoder { enc_bar } else { dec_bar },
                        })
                        .collect();
                    let terms = redundancy_loss(&mut tape, &store, &reps, critics, &config.reg, &mut neg_rng)?;
                    metrics.penalty = terms.penalty;
                    metrics.mutual_info = terms.mutual_info;
                    metrics.l_ra = tape.scalar(terms.loss);
                    let weighted = tape.scale(terms.loss, config.reg.alpha);
                    tape.add(nll, weighted)?
                }
                _ => nll,
            };
            let value = tape.scalar(loss);
            metrics.total = value;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    what: format!("adaptation loss {value}"),
                });
            }
            tape.backward(loss, &mut store)?;
            opt.step(&mut store)?;
            nll_sum += nll_value;
            lra_sum += metrics.l_ra;
            batches += 1;
            steps.push(metrics);
            step += 1;
        }
        let dev_score = evaluate(&mut model, &store, &split.dev)?;
        history.push(EpochMetrics {
            epoch,
            train_nll: nll_sum / batches as f64,
            l_ra: lra_sum / batches as f64,
            dev_score,
        });
        if dev_score > best.1 {
            best = (epoch, dev_score, store.snapshot(&tuned));
            if let Some(dir) = out_dir {
                model.save(&store, &dir.join("best.ckpt"))?;
            }
        }
        if epoch - best.0 >= config.patience {
            break;
        }
    }
    if store.checksum(ParamGroup::Backbone) != checksum {
        return Err(Error::FrozenViolation("backbone parameters changed during adaptation".into()));
    }
    store.restore(&tuned, &best.2);
    if let Adapters::MixPhm(m) = &mut model.adapters {
        m.merge_experts(&mut store);
    }
    let test_score = test.map(|t| evaluate(&mut model, &store, t)).transpose()?;
    let outcome = AdaptOutcome {
        history,
        steps,
        best_epoch: best.0,
        best_dev: best.1,
        test_score,
        adapter_params,
        critic_params,
        backbone_checksum: checksum,
        seconds: start.elapsed().as_secs_f64(),
        store,
        model,
    };
    if let Some(dir) = out_dir {
        write_run_dir(dir, &outcome, split)?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub n_d: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub dev_score: f64,
    pub test_score: Option<f64>,
    pub adapter_params: usize,
    pub critic_params: usize,
    pub seconds: f64,
}

impl AdaptOutcome {
    pub fn result(&self, split: &LowResourceSplit) -> RunResult {
        RunResult {
            seed: split.seed,
            n_d: split.train.len(),
            best_epoch: self.best_epoch,
            epochs_run: self.history.len(),
            dev_score: self.best_dev,
            test_score: self.test_score,
            adapter_params: self.adapter_params,
            critic_params: self.critic_params,
            seconds: self.seconds,
        }
    }
}

fn write_run_dir(dir: &Path, outcome: &AdaptOutcome, split: &LowResourceSplit) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Report(e.to_string());
    let mut w = csv::Writer::from_path(dir.join("metrics.csv")).map_err(csv_err)?;
    for m in &outcome.history {
        w.serialize(m).map_err(csv_err)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("steps.csv")).map_err(csv_err)?;
    for m in &outcome.steps {
        w.serialize(m).map_err(csv_err)?;
    }
    w.flush()?;
    outcome.model.save(&outcome.store, &dir.join("final_merged.ckpt"))?;
    std::fs::write(
        dir.join("result.json"),
        serde_json::to_string_pretty(&outcome.result(split))?,
    )?;
    Ok(())
}

/// Runs `adapt` for each learning rate and keeps the run with the best dev score
/// (earliest rate on ties).
pub fn adapt_with_lr_grid(
    backbone_store: &ParamStore,
    backbone: &Seq2Seq,
    split: &LowResourceSplit,
    test: Option<&[Sample]>,
    config: &AdaptConfig,
    grid: &[f64],
) -> Result<(f64, AdaptOutcome)> {
    let mut best: Option<(f64, AdaptOutcome)> = None;
    for &lr in grid {
        let run = adapt(backbone_store, backbone, split, test, &AdaptConfig { lr, ..config.clone() }, None)?;
        if best.as_ref().is_none_or(|(_, b)| run.best_dev > b.best_dev) {
            best = Some((lr, run));
        }
    }
    best.ok_or_else(|| Error::Config("empty learning-rate grid".into()))
}

/// Default output root: `$MIXPHM_OUT` or `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os("MIXPHM_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Task id written to result rows for the shifted lookup task.
pub const ADAPTATION_TASK_ID: &str = "kv-lookup-shifted";

/// A sweep over seeds and training-set sizes on the adaptation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub adapt: AdaptConfig,
    /// Learning rates searched on dev; empty means `adapt.lr` alone.
    pub lr_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_d: Vec<usize>,
    /// Samples from which train/dev splits are drawn.
    pub pool_samples: usize,
    pub test_samples: usize,
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            adapt: AdaptConfig::default(),
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            n_d: DEFAULT_N_D.to_vec(),
            pool_samples: 4_000,
            test_samples: 500,
            data_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        if self.seeds.is_empty() || self.n_d.is_empty() {
            return Err(Error::Config("seeds and n_d must be non-empty".into()));
        }
        if self.n_d.contains(&0) {
            return Err(Error::Config("n_d entries must be positive".into()));
        }
        let largest = self.n_d.iter().max().copied().unwrap_or(0);
        if self.pool_samples < 2 * largest {
            return Err(Error::Config(format!(
                "pool of {} samples cannot hold 2·{largest}",
                self.pool_samples
            )));
        }
        if self.test_samples == 0 {
            return Err(Error::Config("test_samples must be positive".into()));
        }
        if self.lr_grid.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Short method label: `plain`, `mixphm`, or `mixphm-a0` without the regularizer.
pub fn method_name(config: &AdaptConfig) -> String {
    match config.adapter {
        AdapterSpec::None => "none".into(),
        AdapterSpec::Plain { .. } => "plain".into(),
        AdapterSpec::Mixphm { .. } if config.uses_regularizer() => "mixphm".into(),
        AdapterSpec::Mixphm { .. } => "mixphm-a0".into(),
    }
}

/// Train/dev pool and the shared test set of the adaptation task.
pub fn adaptation_data(pool_samples: usize, test_samples: usize, data_seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut all = generate_synthetic(&SyntheticTask::adaptation(), pool_samples + test_samples, data_seed);
    let test = all.split_off(pool_samples);
    (all, test)
}

/// Runs every `(N_D, seed)` pair. Each run gets `out/<method>/nd<N_D>/seed<seed>`;
/// with a learning-rate grid, each rate gets its own `lr<rate>` subdirectory and
/// `selected_lr.json` records the pick.
pub fn sweep(backbone_store: &ParamStore, backbone: &Seq2Seq, config: &RunConfig, out: &Path) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let (pool, test) = adaptation_data(config.pool_samples, config.test_samples, config.data_seed);
    let method = method_name(&config.adapt);
    let mut rows = Vec::new();
    for &n_d in &config.n_d {
        for &seed in &config.seeds {
            let split = make_lowresource_splits(&pool, n_d, seed)?;
            let dir = out.join(&method).join(format!("nd{n_d}")).join(format!("seed{seed}"));
            let base = AdaptConfig {
                seed,
                ..config.adapt.clone()
            };
            let outcome = if config.lr_grid.is_empty() {
                adapt(backbone_store, backbone, &split, Some(&test), &base, Some(&dir))?
            } else {
                let mut best: Option<(f64, AdaptOutcome)> = None;
                for &lr in &config.lr_grid {
                    let run_dir = dir.join(format!("lr{lr}"));
                    let run = adapt(backbone_store, backbone, &split, Some(&test), &AdaptConfig { lr, ..base.clone() }, Some(&run_dir))?;
                    if best.as_ref().is_none_or(|(_, b)| run.best_dev > b.best_dev) {
                        best = Some((lr, run));
                    }
                }
                let (lr, run) = best.ok_or_else(|| Error::Config("empty learning-rate grid".into()))?;
                std::fs::write(dir.join("selected_lr.json"), serde_json::to_string(&serde_json::json!({ "lr": lr }))?)?;
                run
            };
            rows.push(ResultRow {
                task: ADAPTATION_TASK_ID.into(),
                method: method.clone(),
                n_d,
                seed,
                score: outcome.test_score.unwrap_or(0.0),
                params: outcome.adapter_params,
                seconds: outcome.seconds,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            layers: 1,
            d: 8,
            heads: 2,
            d_ff: 16,
            vocab: 64,
            max_len: 24,
        }
    }

    fn tiny_pretrain(steps: usize) -> PretrainConfig {
        PretrainConfig {
            backbone: tiny_backbone(),
            train_samples: 300,
            heldout_samples: 30,
            steps,
            batch_size: 8,
            warmup_steps: 10,
            ..PretrainConfig::default()
        }
    }

    fn tiny_adapt(max_epochs: usize, patience: usize) -> AdaptConfig {
        AdaptConfig {
            adapter: AdapterSpec::Mixphm {
                n: 2,
                d_r: 4,
                d_k: 1,
                n_experts: 2,
                activation: crate::autodiff::Activation::Gelu,
                routing: crate::moe::RoutingKind::BatchRandom,
            },
            batch_size: 4,
            max_epochs,
            patience,
            lr: 2e-2,
            ..AdaptConfig::default()
        }
    }

    fn setup() -> (ParamStore, Seq2Seq, LowResourceSplit, Vec<Sample>) {
        let (store, model, _) = pretrain(&tiny_pretrain(0)).unwrap();
        let (pool, test) = adaptation_data(64, 16, 5);
        let split = make_lowresource_splits(&pool, 8, 13).unwrap();
        (store, model, split, test)
    }

    #[test]
    fn zero_steps_returns_the_initialization() {
        let (store, _, _) = pretrain(&tiny_pretrain(0)).unwrap();
        let mut fresh = ParamStore::new();
        Seq2Seq::new(&mut fresh, tiny_backbone(), PretrainConfig::default().seed).unwrap();
        assert_eq!(store.named_values(), fresh.named_values());
    }

    #[test]
    fn training_lowers_the_loss_on_a_fixed_batch() {
        let fixed = generate_synthetic(&SyntheticTask::pretraining(TaskKind::Copy), 8, 99);
        let refs: Vec<&Sample> = fixed.iter().collect();
        let batch = Batch::new(&refs).unwrap();
        let loss_of = |steps| {
            let (store, mut model, _) = pretrain(&tiny_pretrain(steps)).unwrap();
            let mut tape = Tape::new();
            let l = batch_nll(&mut model, &mut tape, &store, &batch, Mode::Inference).unwrap();
            tape.scalar(l)
        };
        assert!(loss_of(500) < loss_of(0));
    }

    #[test]
    fn schedule_warms_up_then_decays_to_a_tenth() {
        assert!((lr_at(0, 100, 10, 1.0) - 0.1).abs() < 1e-15);
        assert!((lr_at(9, 100, 10, 1.0) - 1.0).abs() < 1e-15);
        assert!((lr_at(10, 100, 10, 1.0) - 1.0).abs() < 1e-15);
        assert!((lr_at(100, 100, 10, 1.0) - 0.1).abs() < 1e-15);
        assert!(lr_at(40, 100, 10, 1.0) > lr_at(60, 100, 10, 1.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(PretrainConfig { tasks: vec![], ..tiny_pretrain(1) }.validate().is_err());
        assert!(PretrainConfig { lr: f64::NAN, ..tiny_pretrain(1) }.validate().is_err());
        assert!(AdaptConfig { adapter: AdapterSpec::None, ..AdaptConfig::default() }.validate().is_err());
        assert!(AdaptConfig { patience: 0, ..AdaptConfig::default() }.validate().is_err());
        assert!(RunConfig { n_d: vec![3000], ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { seeds: vec![], ..RunConfig::default() }.validate().is_err());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn method_names() {
        assert_eq!(method_name(&AdaptConfig::default()), "mixphm");
        let mut c = AdaptConfig::default();
        c.reg.alpha = 0.0;
        assert_eq!(method_name(&c), "mixphm-a0");
        c.adapter = AdapterSpec::matched_plain();
        assert_eq!(method_name(&c), "plain");
    }

    #[test]
    fn adaptation_keeps_the_backbone_and_the_best_dev_epoch() {
        let (store, model, split, test) = setup();
        let before = store.checksum(ParamGroup::Backbone);
        let run = adapt(&store, &model, &split, Some(&test), &tiny_adapt(12, 4), None).unwrap();
        assert_eq!(run.backbone_checksum, before);
        assert_eq!(run.store.checksum(ParamGroup::Backbone), before);
        let max = run.history.iter().map(|h| h.dev_score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(run.best_dev, max);
        let first_max = run.history.iter().find(|h| h.dev_score == max).unwrap().epoch;
        assert_eq!(run.best_epoch, first_max);
        assert!(run.history.len() <= run.best_epoch + 4);
        assert!(run.history.len() == 12 || run.history.len() == run.best_epoch + 4);
        assert!(matches!(&run.model.adapters, Adapters::MixPhm(m) if m.is_merged()));
        assert!(run.test_score.is_some());
    }

    #[test]
    fn restored_weights_reproduce_the_best_dev_score() {
        let (store, model, split, _) = setup();
        let mut run = adapt(&store, &model, &split, None, &tiny_adapt(10, 10), None).unwrap();
        assert_eq!(evaluate(&mut run.model, &run.store, &split.dev).unwrap(), run.best_dev);
    }

    #[test]
    fn metric_trajectories_are_seed_deterministic() {
        let (store, model, split, test) = setup();
        let a = adapt(&store, &model, &split, Some(&test), &tiny_adapt(5, 5), None).unwrap();
        let b = adapt(&store, &model, &split, Some(&test), &tiny_adapt(5, 5), None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.test_score, b.test_score);
        let c = adapt(&store, &model, &split, Some(&test), &AdaptConfig { seed: 21, ..tiny_adapt(5, 5) }, None).unwrap();
        assert_ne!(a.steps, c.steps);
    }

    #[test]
    fn run_directory_is_complete() {
        let (store, model, split, test) = setup();
        let dir = tempfile::tempdir().unwrap();
        let run = adapt(&store, &model, &split, Some(&test), &tiny_adapt(3, 3), Some(dir.path())).unwrap();
        let alpha = tiny_adapt(3, 3).reg.alpha;
        for s in &run.steps {
            assert!((s.total - (s.nll + alpha * s.l_ra)).abs() < 1e-9 * (1.0 + s.total.abs()));
        }
        for f in ["config.json", "metrics.csv", "steps.csv", "best.ckpt", "final_merged.ckpt", "result.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let header = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(header.lines().next().unwrap(), "epoch,train_nll,l_ra,dev_score");
        let steps = std::fs::read_to_string(dir.path().join("steps.csv")).unwrap();
        assert_eq!(steps.lines().next().unwrap(), "step,nll,penalty,mutual_info,l_ra,total");
        let config: AdaptConfig = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
        assert_eq!(config, tiny_adapt(3, 3));
        let (_, reloaded) = Seq2Seq::load(&dir.path().join("final_merged.ckpt")).unwrap();
        assert!(matches!(&reloaded.adapters, Adapters::MixPhm(m) if m.is_merged()));
    }

    #[test]
    fn adapted_models_are_rejected_as_backbones() {
        let (store, model, split, _) = setup();
        let run = adapt(&store, &model, &split, None, &tiny_adapt(1, 1), None).unwrap();
        assert!(matches!(
            adapt(&run.store, &run.model, &split, None, &tiny_adapt(1, 1), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sweep_emits_one_row_per_size_and_seed() {
        let (store, model, _, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            adapt: tiny_adapt(1, 1),
            lr_grid: vec![1e-3, 1e-2],
            seeds: vec![1, 2],
            n_d: vec![4, 8],
            pool_samples: 32,
            test_samples: 8,
            data_seed: 0,
        };
        let rows = sweep(&store, &model, &config, dir.path()).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.method == "mixphm" && r.task == ADAPTATION_TASK_ID));
        assert!(dir.path().join("mixphm/nd8/seed2/selected_lr.json").exists());
        assert!(dir.path().join("mixphm/nd8/seed2/lr0.01/result.json").exists());
    }
}
