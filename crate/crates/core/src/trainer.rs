//! Training loops: self-supervised pretraining and the round-robin multi-task
//! loop with its freeze schedule and split learning rates. One outer iteration
//! visits every task in fixed order; each task does fetch -> shared SRE ->
//! head -> criterion -> backward -> immediate optimizer update.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::{BatchLoader, TaskId};
use crate::error::{Error, Result};
use crate::heads::TaskHead;
use crate::losses::{cross_entropy, AngularSoftmax};
use crate::optim::{Adam, AdamConfig, Param};
use crate::rng::SplitRng;
use crate::sre::{pretrain_step_loss, SREModel};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Pretrain,
    SingleTask,
    MultiTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Normal,
    RandomSre,
    FrozenSre,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_iterations: u64,
    pub pretrain_iterations: u64,
    /// SRE parameters stay fixed while iteration < freeze_iters.
    pub freeze_iters: u64,
    pub lr_head: f64,
    pub lr_sre: f64,
    pub lr_pretrain: f64,
    pub adam: AdamConfig,
    pub batch_kws: usize,
    pub batch_sv: usize,
    pub batch_pretrain: usize,
    pub mode: TrainMode,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 2000,
            pretrain_iterations: 1000,
            freeze_iters: 1000,
            lr_head: 1e-4,
            lr_sre: 1e-5,
            lr_pretrain: 5e-4,
            adam: AdamConfig::default(),
            batch_kws: 8,
            batch_sv: 8,
            batch_pretrain: 8,
            mode: TrainMode::MultiTask,
            ablation: Ablation::Normal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.pretrain_iterations == 0 {
            return Err(Error::param("iteration counts must be positive"));
        }
        for (name, v) in [
            ("lr_head", self.lr_head),
            ("lr_sre", self.lr_sre),
            ("lr_pretrain", self.lr_pretrain),
        ] {
            if v <= 0.0 {
                return Err(Error::param(format!("train.{name} must be > 0")));
            }
        }
        if self.lr_sre >= self.lr_head {
            return Err(Error::param(
                "lr_sre must be smaller than lr_head (backbone updates more gently)",
            ));
        }
        if self.batch_kws == 0 || self.batch_sv == 0 || self.batch_pretrain == 0 {
            return Err(Error::param("batch sizes must be positive"));
        }
        Ok(())
    }

    pub fn batch_for(&self, task: TaskId) -> usize {
        match task {
            TaskId::Kws => self.batch_kws,
            TaskId::Sv => self.batch_sv,
            TaskId::Pretrain => self.batch_pretrain,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub iter: u64,
    pub task: String,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    /// One entry per optimizer update, in execution order.
    pub update_log: Vec<(u64, TaskId)>,
    /// Pretraining only: mean codebook perplexity per step.
    pub perplexities: Vec<f64>,
}

impl TrainOutcome {
    /// The deterministic portion of the metrics (wall time excluded).
    pub fn loss_trace(&self) -> Vec<(u64, String, u64)> {
        self.records
            .iter()
            .map(|r| (r.iter, r.task.clone(), r.loss.to_bits()))
            .collect()
    }
}

/// Plain-text metrics log: `iter,task,loss,wall_ms` per record.
pub fn write_metrics(path: &Path, records: &[MetricsRecord], config_hash: u64) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# config_hash={config_hash:016x}").ok();
    writeln!(out, "# iter,task,loss,wall_ms").ok();
    for r in records {
        writeln!(out, "{},{},{:.12e},{:.3}", r.iter, r.task, r.loss, r.wall_ms).ok();
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn ensure_finite(loss: f64, iter: u64, task: &str) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss ({loss}) at iteration {iter}, task {task}"
        )));
    }
    Ok(loss)
}

/// Self-supervised pretraining of the SRE on an unlabeled waveform loader.
pub fn pretrain(
    cfg: &TrainConfig,
    model: &mut SREModel,
    loader: &mut BatchLoader,
    rng: &SplitRng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut noise = rng.split("pretrain_noise");
    let mut adam = Adam::new(cfg.adam);
    let mut outcome = TrainOutcome::default();
    for step in 0..cfg.pretrain_iterations {
        let t0 = Instant::now();
        let batch = loader.next_batch(cfg.batch_pretrain);
        let mut g = Graph::new();
        let (loss, stats) = pretrain_step_loss(&mut g, model, &batch.inputs, step, &mut noise)?;
        let loss_v = ensure_finite(loss.item()?, step, "pretrain")?;
        g.backward(&loss)?;
        adam.step(cfg.lr_pretrain, &mut model.params_mut())?;
        outcome.update_log.push((step, TaskId::Pretrain));
        outcome.perplexities.push(stats.mean_perplexity);
        outcome.records.push(MetricsRecord {
            iter: step,
            task: "pretrain".into(),
            loss: loss_v,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(outcome)
}

/// Per-task criterion bound to a head.
pub enum Criterion {
    CrossEntropy,
    Angular(AngularSoftmax),
}

impl Criterion {
    pub fn loss(
        &self,
        g: &mut Graph,
        output: &Tensor,
        labels: &[usize],
        step: u64,
    ) -> Result<Tensor> {
        match self {
            Criterion::CrossEntropy => cross_entropy(g, output, labels),
            Criterion::Angular(a) => a.loss(g, output, labels, step),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Criterion::CrossEntropy => Vec::new(),
            Criterion::Angular(a) => vec![&mut a.weight],
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Criterion::CrossEntropy => Vec::new(),
            Criterion::Angular(a) => vec![&a.weight],
        }
    }
}

/// One task of the round-robin loop: loader, head, criterion, and the task's
/// own update counter (drives annealing schedules).
pub struct TaskBinding {
    pub task: TaskId,
    pub head: TaskHead,
    pub criterion: Criterion,
    pub loader: BatchLoader,
    pub updates: u64,
}

/// Round-robin multi-task fine-tuning (single-task is the one-binding case).
/// Returns the metrics log; `model` and the bindings are trained in place.
pub fn multitask_train(
    cfg: &TrainConfig,
    model: &mut SREModel,
    bindings: &mut [TaskBinding],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if bindings.is_empty() {
        return Err(Error::contract("multitask_train needs at least one task"));
    }
    let mut adam = Adam::new(cfg.adam);
    let mut outcome = TrainOutcome::default();
    for iter in 0..cfg.max_iterations {
        for binding in bindings.iter_mut() {
            let t0 = Instant::now();
            let frozen = cfg.ablation == Ablation::FrozenSre || iter < cfg.freeze_iters;
            let batch = binding.loader.next_batch(cfg.batch_for(binding.task));

            let mut g = Graph::new();
            let ctx = if frozen {
                // Backbone runs detached: no tape, no gradients, no updates.
                let mut gi = Graph::inference();
                let z = model.encode_frames(&mut gi, &batch.inputs)?;
                model.contextualize(&mut gi, &z, None)?
            } else {
                let z = model.encode_frames(&mut g, &batch.inputs)?;
                model.contextualize(&mut g, &z, None)?
            };
            let output = binding.head.forward(&mut g, &ctx, true)?;
            let loss = binding
                .criterion
                .loss(&mut g, &output, &batch.labels, binding.updates)?;
            let loss_v = ensure_finite(loss.item()?, iter, binding.task.name())?;
            g.backward(&loss)?;

            let mut head_group = binding.head.params_mut();
            head_group.extend(binding.criterion.params_mut());
            adam.step(cfg.lr_head, &mut head_group)?;
            if !frozen {
                // Only the parameters on the fine-tune forward path carry
                // gradients (mask embedding and quantizer sit idle here).
                adam.step(cfg.lr_sre, &mut model.finetune_params_mut())?;
            }
            binding.updates += 1;
            outcome.update_log.push((iter, binding.task));
            outcome.records.push(MetricsRecord {
                iter,
                task: binding.task.name().into(),
                loss: loss_v,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok(outcome)
}
