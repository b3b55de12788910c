//! Audio ingestion and batching: WAV files, the synthetic desk-scale corpus,
//! directory-tree datasets, and the cycling per-task batch loaders.

mod dirs;
mod loader;
mod synth;
mod wav;

pub use dirs::{load_kws_tree, load_sv_tree, load_trials, write_dataset};
pub use loader::{slice_utterance, BatchLoader};
pub use synth::{synth_dataset, SynthData, SynthSpec};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
/// 1 s of audio: keyword-spotting input length.
pub const KWS_SAMPLES: usize = 16_000;
/// 2 s of audio: speaker-verification training slice length.
pub const SV_SAMPLES: usize = 32_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskId {
    Kws,
    Sv,
    Pretrain,
}

impl TaskId {
    pub fn name(&self) -> &'static str {
        match self {
            TaskId::Kws => "kws",
            TaskId::Sv => "sv",
            TaskId::Pretrain => "pretrain",
        }
    }

    /// Native input length in samples for batches of this task.
    pub fn sample_len(&self) -> usize {
        match self {
            TaskId::Kws => KWS_SAMPLES,
            TaskId::Sv => SV_SAMPLES,
            // Pretraining consumes 1 s slices of every training clip.
            TaskId::Pretrain => KWS_SAMPLES,
        }
    }
}

/// Mono 16 kHz waveform in [-1, 1]. Samples sit behind an Arc so clips can be
/// handed to loaders and bundles without copying audio.
#[derive(Debug, Clone)]
pub struct WavClip {
    pub samples: std::sync::Arc<Vec<f64>>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl WavClip {
    pub fn new(samples: Vec<f64>, source_id: impl Into<String>) -> WavClip {
        WavClip {
            samples: std::sync::Arc::new(samples),
            sample_rate: SAMPLE_RATE,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A clip with a task label (keyword id or speaker id).
#[derive(Debug, Clone)]
pub struct LabeledUtterance {
    pub clip: WavClip,
    pub task: TaskId,
    pub label: usize,
}

/// Two clips plus the same-speaker ground truth; indices into a clip table.
#[derive(Debug, Clone, Copy)]
pub struct TrialPair {
    pub a: usize,
    pub b: usize,
    pub same_speaker: bool,
}

/// One training mini-batch; all rows share the task's native length.
#[derive(Debug)]
pub struct Batch {
    pub inputs: Tensor, // [B, L]
    pub labels: Vec<usize>,
    pub task: TaskId,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

pub(crate) fn build_batch(
    flat: Vec<f64>,
    b: usize,
    l: usize,
    labels: Vec<usize>,
    task: TaskId,
) -> Result<Batch> {
    if b == 0 {
        return Err(Error::contract("empty batch"));
    }
    Ok(Batch {
        inputs: Tensor::from_vec(flat, &[b, l])?,
        labels,
        task,
    })
}
