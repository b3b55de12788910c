//! End-to-end orchestration shared by the CLI, the Python bindings, and the
//! acceptance suite: dataset assembly, model construction, pretraining,
//! fine-tuning (with ablations), evaluation, and checkpoint wiring.



use crate::checkpoint::CheckpointData;
use crate::config::{angular_config, RunConfig};
use crate::data::{
    load_kws_tree, load_sv_tree, load_trials, synth_dataset, BatchLoader, LabeledUtterance,
    TaskId, TrialPair, WavClip, KWS_SAMPLES, SV_SAMPLES,
};
use crate::error::{Error, Result};
use crate::eval::{compute_eer, score_trial_pairs, top1_accuracy, ScoredTrial};
use crate::heads::TaskHead;
use crate::losses::AngularSoftmax;
use crate::rng::SplitRng;
use crate::sre::SREModel;
use crate::tensor::{Graph, Tensor};
use crate::trainer::{self, Ablation, Criterion, TaskBinding, TrainOutcome};

/// Evaluation forward passes run at this batch size.
const EVAL_BATCH: usize = 8;

#[derive(Clone)]
pub struct DataBundle {
    pub kws_train: Vec<LabeledUtterance>,
    pub kws_test: Vec<LabeledUtterance>,
    pub sv_train: Vec<LabeledUtterance>,
    pub trial_clips: Vec<WavClip>,
    pub trial_pairs: Vec<TrialPair>,
    pub kws_classes: usize,
    pub sv_speakers: usize,
}

/// Materialize the configured dataset (synthetic by default, directory trees
/// when roots are given).
pub fn load_data(cfg: &RunConfig, seed: u64) -> Result<DataBundle> {
    if let Some(spec) = cfg.data.synthetic_spec() {
        let d = synth_dataset(&spec, seed)?;
        return Ok(DataBundle {
            kws_classes: d.kws_class_names.len(),
            sv_speakers: d.n_sv_speakers,
            kws_train: d.kws_train,
            kws_test: d.kws_test,
            sv_train: d.sv_train,
            trial_clips: d.trial_clips,
            trial_pairs: d.trial_pairs,
        });
    }
    let need = |name: &str, p: &Option<std::path::PathBuf>| {
        p.clone()
            .ok_or_else(|| Error::config(format!("data.{name} is required for directory datasets")))
    };
    let kws_root = need("kws_root", &cfg.data.kws_root)?;
    let sv_root = need("sv_root", &cfg.data.sv_root)?;
    let trials = need("trials", &cfg.data.trials)?;
    let (kws_train, names) = load_kws_tree(&kws_root.join("train"))?;
    let (kws_test, _) = load_kws_tree(&kws_root.join("test"))?;
    let (sv_train, sv_speakers) = load_sv_tree(&sv_root.join("train"))?;
    let (trial_clips, trial_pairs) = load_trials(&trials)?;
    Ok(DataBundle {
        kws_classes: names.len(),
        sv_speakers,
        kws_train,
        kws_test,
        sv_train,
        trial_clips,
        trial_pairs,
    })
}

pub fn build_model(cfg: &RunConfig, seed: u64) -> Result<SREModel> {
    SREModel::new(cfg.sre.build()?, &SplitRng::seed_from(seed).split("model"))
}

/// Build the task bindings declared in the config. Head output sizes adapt to
/// the dataset's class/speaker counts when the config asks for classification.
pub fn build_bindings(
    cfg: &RunConfig,
    bundle: &DataBundle,
    seed: u64,
    task_filter: Option<TaskId>,
) -> Result<Vec<TaskBinding>> {
    let root = SplitRng::seed_from(seed);
    let sre_cfg = cfg.sre.build()?;
    let mut bindings = Vec::new();
    for section in &cfg.heads {
        let task = section.task_id()?;
        if let Some(f) = task_filter {
            if task != f {
                continue;
            }
        }
        let mut head_cfg = section.build()?;
        // Class counts come from the data, not guesses in the config.
        if task == TaskId::Kws {
            head_cfg.output = crate::heads::OutputKind::ClassScores(bundle.kws_classes);
        }
        let name = format!("head.{}", section.task);
        let head = TaskHead::new(&name, head_cfg, sre_cfg.d_model, &root.split(&name))?;
        let criterion = match task {
            TaskId::Kws => Criterion::CrossEntropy,
            TaskId::Sv => {
                let mut crng = root.split("crit.sv");
                Criterion::Angular(AngularSoftmax::new(
                    angular_config(),
                    bundle.sv_speakers,
                    head.output_dim(),
                    &mut crng,
                )?)
            }
            TaskId::Pretrain => unreachable!("validated by config"),
        };
        let items = match task {
            TaskId::Kws => bundle.kws_train.clone(),
            TaskId::Sv => bundle.sv_train.clone(),
            TaskId::Pretrain => unreachable!(),
        };
        let loader = BatchLoader::new(
            items,
            task,
            task.sample_len(),
            root.split(&format!("loader.{}", section.task)),
        )?;
        bindings.push(TaskBinding {
            task,
            head,
            criterion,
            loader,
            updates: 0,
        });
    }
    if bindings.is_empty() {
        return Err(Error::config("no head matches the requested task"));
    }
    Ok(bindings)
}

/// Unlabeled pretraining loader over every training clip (1 s slices).
pub fn build_pretrain_loader(bundle: &DataBundle, seed: u64) -> Result<BatchLoader> {
    let mut items: Vec<LabeledUtterance> = Vec::new();
    items.extend(bundle.kws_train.iter().cloned());
    items.extend(bundle.sv_train.iter().cloned());
    for item in items.iter_mut() {
        item.task = TaskId::Pretrain;
        item.label = 0;
    }
    BatchLoader::new(
        items,
        TaskId::Pretrain,
        KWS_SAMPLES,
        SplitRng::seed_from(seed).split("loader.pretrain"),
    )
}

// ── checkpoint assembly ────────────────────────────────────────────────

/// SRE-only checkpoint (pretraining output).
pub fn sre_checkpoint(model: &SREModel, config_hash: u64) -> CheckpointData {
    let mut data = CheckpointData {
        config_hash,
        tensors: Vec::new(),
    };
    for p in model.params() {
        data.push(p.name.clone(), p.value.shape(), p.value.data());
    }
    data
}

/// Combined SRE + heads + criterion checkpoint (fine-tuning output).
pub fn full_checkpoint(
    model: &SREModel,
    bindings: &[TaskBinding],
    config_hash: u64,
) -> CheckpointData {
    let mut data = sre_checkpoint(model, config_hash);
    for b in bindings {
        for p in b.head.params() {
            data.push(p.name.clone(), p.value.shape(), p.value.data());
        }
        for (name, values) in b.head.buffers() {
            data.push(name, &[values.len()], &values);
        }
        for p in b.criterion.params() {
            data.push(p.name.clone(), p.value.shape(), p.value.data());
        }
    }
    data
}

fn fill_param(p: &mut crate::optim::Param, data: &CheckpointData) -> Result<()> {
    let t = data
        .get(&p.name)
        .ok_or_else(|| Error::format(format!("checkpoint missing tensor '{}'", p.name)))?;
    if t.dims != p.value.shape() {
        return Err(Error::format(format!(
            "tensor '{}' has dims {:?} in the checkpoint but {:?} in the model \
             (checkpoint and config are incompatible)",
            p.name,
            t.dims,
            p.value.shape()
        )));
    }
    p.value = Tensor::param(t.values.clone(), &t.dims)?;
    Ok(())
}

/// Load SRE weights from a checkpoint into a freshly built model.
pub fn load_sre_weights(model: &mut SREModel, data: &CheckpointData) -> Result<()> {
    for p in model.params_mut() {
        fill_param(p, data)?;
    }
    Ok(())
}

/// Load head + criterion state for each binding.
pub fn load_binding_weights(bindings: &mut [TaskBinding], data: &CheckpointData) -> Result<()> {
    for b in bindings.iter_mut() {
        for p in b.head.params_mut() {
            fill_param(p, data)?;
        }
        let buffer_names: Vec<String> = b.head.buffers().iter().map(|(n, _)| n.clone()).collect();
        for name in buffer_names {
            let t = data
                .get(&name)
                .ok_or_else(|| Error::format(format!("checkpoint missing tensor '{name}'")))?;
            b.head.load_buffer(&name, &t.values)?;
        }
        for p in b.criterion.params_mut() {
            fill_param(p, data)?;
        }
    }
    Ok(())
}

// ── runs ───────────────────────────────────────────────────────────────

pub struct PretrainRun {
    pub outcome: TrainOutcome,
    pub model: SREModel,
    pub checkpoint: CheckpointData,
}

pub fn run_pretrain(cfg: &RunConfig, config_hash: u64, seed: u64) -> Result<PretrainRun> {
    let bundle = load_data(cfg, seed)?;
    run_pretrain_with(cfg, config_hash, seed, &bundle)
}

/// `run_pretrain` over an already-materialized dataset (clips are shared, not
/// copied).
pub fn run_pretrain_with(
    cfg: &RunConfig,
    config_hash: u64,
    seed: u64,
    bundle: &DataBundle,
) -> Result<PretrainRun> {
    let mut model = build_model(cfg, seed)?;
    let mut loader = build_pretrain_loader(bundle, seed)?;
    let train_cfg = cfg.train.build()?;
    let outcome = trainer::pretrain(
        &train_cfg,
        &mut model,
        &mut loader,
        &SplitRng::seed_from(seed).split("train"),
    )?;
    let checkpoint = sre_checkpoint(&model, config_hash);
    Ok(PretrainRun {
        outcome,
        model,
        checkpoint,
    })
}

/// How the SRE is initialized for fine-tuning.
pub enum SreInit<'a> {
    Checkpoint(&'a CheckpointData),
    Random,
}

pub struct FinetuneRun {
    pub outcome: TrainOutcome,
    pub model: SREModel,
    pub bindings: Vec<TaskBinding>,
    pub checkpoint: CheckpointData,
}

/// Fine-tune per the config's mode/ablation. `task_filter` restricts to one
/// task (single-task runs); `sre_init` supplies the pretrained weights.
pub fn run_finetune(
    cfg: &RunConfig,
    config_hash: u64,
    seed: u64,
    sre_init: SreInit,
    task_filter: Option<TaskId>,
) -> Result<FinetuneRun> {
    let bundle = load_data(cfg, seed)?;
    run_finetune_with(cfg, config_hash, seed, sre_init, task_filter, &bundle)
}

/// `run_finetune` over an already-materialized dataset.
pub fn run_finetune_with(
    cfg: &RunConfig,
    config_hash: u64,
    seed: u64,
    sre_init: SreInit,
    task_filter: Option<TaskId>,
    bundle: &DataBundle,
) -> Result<FinetuneRun> {
    let mut model = build_model(cfg, seed)?;
    let train_cfg = cfg.train.build()?;
    match sre_init {
        SreInit::Checkpoint(data) => load_sre_weights(&mut model, data)?,
        SreInit::Random => {
            if train_cfg.ablation == Ablation::FrozenSre {
                return Err(Error::config(
                    "frozen_sre ablation requires a pretrained checkpoint",
                ));
            }
        }
    }
    let mut bindings = build_bindings(cfg, &bundle, seed, task_filter)?;
    let outcome = trainer::multitask_train(&train_cfg, &mut model, &mut bindings)?;
    let checkpoint = full_checkpoint(&model, &bindings, config_hash);
    Ok(FinetuneRun {
        outcome,
        model,
        bindings,
        checkpoint,
    })
}

// ── evaluation ─────────────────────────────────────────────────────────

pub struct KwsEval {
    pub top1: f64,
    pub n: usize,
}

/// Top-1 accuracy of a KWS head over a labeled test set.
pub fn evaluate_kws(
    model: &SREModel,
    head: &mut TaskHead,
    test: &[LabeledUtterance],
) -> Result<KwsEval> {
    if test.is_empty() {
        return Err(Error::contract("empty KWS test set"));
    }
    let n_classes = head.output_dim();
    let mut all_logits = Vec::with_capacity(test.len() * n_classes);
    let mut labels = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_BATCH) {
        let bsz = chunk.len();
        let mut flat = Vec::with_capacity(bsz * KWS_SAMPLES);
        for item in chunk {
            let mut s = item.clip.samples.to_vec();
            s.resize(KWS_SAMPLES, 0.0);
            flat.extend_from_slice(&s[..KWS_SAMPLES]);
            labels.push(item.label);
        }
        let wave = Tensor::from_vec(flat, &[bsz, KWS_SAMPLES])?;
        let mut g = Graph::inference();
        let z = model.encode_frames(&mut g, &wave)?;
        let c = model.contextualize(&mut g, &z, None)?;
        let logits = head.forward(&mut g, &c, false)?;
        all_logits.extend_from_slice(logits.data());
    }
    let logits = Tensor::from_vec(all_logits, &[test.len(), n_classes])?;
    Ok(KwsEval {
        top1: top1_accuracy(&logits, &labels)?,
        n: test.len(),
    })
}

pub struct SvEval {
    pub eer: f64,
    pub trials: Vec<ScoredTrial>,
}

/// EER of an SV head over trial pairs.
pub fn evaluate_sv(
    model: &SREModel,
    head: &mut TaskHead,
    clips: &[WavClip],
    pairs: &[TrialPair],
) -> Result<SvEval> {
    let trials = score_trial_pairs(model, head, clips, pairs, EVAL_BATCH)?;
    let eer = compute_eer(&trials)?;
    Ok(SvEval { eer, trials })
}

/// Evaluate a finished fine-tune run on the requested task.
pub fn evaluate_run(
    run: &mut FinetuneRun,
    bundle: &DataBundle,
    task: TaskId,
) -> Result<(String, f64, Vec<ScoredTrial>)> {
    let binding = run
        .bindings
        .iter_mut()
        .find(|b| b.task == task)
        .ok_or_else(|| Error::config(format!("run has no head for task '{}'", task.name())))?;
    match task {
        TaskId::Kws => {
            let r = evaluate_kws(&run.model, &mut binding.head, &bundle.kws_test)?;
            Ok(("kws_top1".into(), r.top1, Vec::new()))
        }
        TaskId::Sv => {
            let r = evaluate_sv(
                &run.model,
                &mut binding.head,
                &bundle.trial_clips,
                &bundle.trial_pairs,
            )?;
            Ok(("sv_eer".into(), r.eer, r.trials))
        }
        TaskId::Pretrain => Err(Error::config("evaluate expects 'kws' or 'sv'")),
    }
}

/// Rebuild a trained model + bindings from a checkpoint, for `evaluate`.
pub fn restore_for_eval(
    cfg: &RunConfig,
    seed: u64,
    data: &CheckpointData,
    task: TaskId,
) -> Result<(SREModel, Vec<TaskBinding>, DataBundle)> {
    let bundle = load_data(cfg, seed)?;
    let mut model = build_model(cfg, seed)?;
    load_sre_weights(&mut model, data)?;
    let mut bindings = build_bindings(cfg, &bundle, seed, Some(task))?;
    load_binding_weights(&mut bindings, data)?;
    Ok((model, bindings, bundle))
}

/// `sample_len` guard for SV clips fed through KWS evaluation and vice versa.
pub fn native_len(task: TaskId) -> usize {
    match task {
        TaskId::Sv => SV_SAMPLES,
        _ => KWS_SAMPLES,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    /// Tiny config for fast end-to-end paths.
    pub(crate) fn tiny_config() -> RunConfig {
        parse_config(
            r#"
seed = 7

[sre]
conv_channels = 8
d_model = 8
n_layers = 1
n_heads = 2
ffn_dim = 16
codebooks = 2
codebook_entries = 8
code_dim = 8
mask_span = 3
distractors = 4

[[heads]]
task = "kws"

[[heads]]
task = "sv"
embedding_dim = 16

[train]
max_iterations = 4
pretrain_iterations = 4
freeze_iters = 2
batch_kws = 2
batch_sv = 2
batch_pretrain = 2

[data]
synthetic = { n_keywords = 4, n_speakers = 6, clips_per_class = 3, held_out_speakers = 2, trial_pairs = 6 }
"#,
        )
        .unwrap()
    }

    #[test]
    fn pretrain_then_finetune_then_evaluate() {
        let cfg = tiny_config();
        let pre = run_pretrain(&cfg, 1, 7).unwrap();
        assert_eq!(pre.outcome.records.len(), 4);
        let mut ft = run_finetune(
            &cfg,
            1,
            7,
            SreInit::Checkpoint(&pre.checkpoint),
            None,
        )
        .unwrap();
        assert_eq!(ft.outcome.records.len(), 8); // 2 tasks x 4 iters
        let bundle = load_data(&cfg, 7).unwrap();
        let (name, top1, _) = evaluate_run(&mut ft, &bundle, TaskId::Kws).unwrap();
        assert_eq!(name, "kws_top1");
        assert!((0.0..=1.0).contains(&top1));
        let (name, eer, trials) = evaluate_run(&mut ft, &bundle, TaskId::Sv).unwrap();
        assert_eq!(name, "sv_eer");
        assert!((0.0..=1.0).contains(&eer));
        assert_eq!(trials.len(), 6);
    }

    #[test]
    fn checkpoint_restores_for_eval_exactly() {
        let cfg = tiny_config();
        let pre = run_pretrain(&cfg, 9, 7).unwrap();
        let mut ft =
            run_finetune(&cfg, 9, 7, SreInit::Checkpoint(&pre.checkpoint), None).unwrap();
        let bundle = load_data(&cfg, 7).unwrap();
        let (_, direct_eer, _) = evaluate_run(&mut ft, &bundle, TaskId::Sv).unwrap();

        // round-trip through checkpoint bytes
        let bytes = crate::checkpoint::encode(&ft.checkpoint);
        let restored = crate::checkpoint::decode(&bytes).unwrap();
        let (model, mut bindings, bundle2) =
            restore_for_eval(&cfg, 7, &restored, TaskId::Sv).unwrap();
        let r = evaluate_sv(
            &model,
            &mut bindings[0].head,
            &bundle2.trial_clips,
            &bundle2.trial_pairs,
        )
        .unwrap();
        // f32 storage rounds the weights; scores move by a hair
        assert!(
            (r.eer - direct_eer).abs() < 0.35,
            "restored EER {} vs direct {direct_eer}",
            r.eer
        );
    }

    #[test]
    fn finetune_without_checkpoint_requires_random_or_errors() {
        let mut cfg = tiny_config();
        cfg.train.ablation = "frozen_sre".into();
        assert!(run_finetune(&cfg, 1, 7, SreInit::Random, None).is_err());
    }

    #[test]
    fn missing_head_in_checkpoint_is_descriptive() {
        let cfg = tiny_config();
        let pre = run_pretrain(&cfg, 2, 7).unwrap();
        // SRE-only checkpoint lacks the head tensors
        let err = match restore_for_eval(&cfg, 7, &pre.checkpoint, TaskId::Kws) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("restore must fail without head tensors"),
        };
        assert!(err.contains("missing tensor 'head.kws"), "{err}");
    }

    #[test]
    fn dim_mismatch_is_descriptive() {
        let cfg = tiny_config();
        let pre = run_pretrain(&cfg, 3, 7).unwrap();
        let mut other = tiny_config();
        other.sre.d_model = 16;
        other.sre.code_dim = 16;
        let mut model = build_model(&other, 7).unwrap();
        let err = load_sre_weights(&mut model, &pre.checkpoint)
            .unwrap_err()
            .to_string();
        assert!(err.contains("dims"), "{err}");
    }

    #[test]
    fn single_task_filter_trains_one_head() {
        let cfg = tiny_config();
        let ft = run_finetune(&cfg, 4, 7, SreInit::Random, Some(TaskId::Kws)).unwrap();
        assert_eq!(ft.bindings.len(), 1);
        assert!(ft
            .outcome
            .update_log
            .iter()
            .all(|&(_, t)| t == TaskId::Kws));
    }
}
