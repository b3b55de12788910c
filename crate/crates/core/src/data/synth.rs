//! Deterministic synthetic corpus standing in for the real keyword / speaker
//! datasets. Keyword classes are distinct harmonic templates; speakers are
//! distinct pitch + formant signatures articulating random "syllables". Trial
//! pairs come from speakers held out of SV training, balanced 50/50.

use super::{LabeledUtterance, TaskId, TrialPair, WavClip, KWS_SAMPLES, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::SplitRng;

/// Source clips for SV are 3 s so that 2 s training slices have headroom and
/// trial scoring exercises the multi-window pooling path.
pub const SV_CLIP_SAMPLES: usize = 48_000;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Total KWS classes. With 4 or more, the last two are "unknown"
    /// (out-of-set templates) and "silence" (low noise).
    pub n_keywords: usize,
    pub n_speakers: usize,
    pub clips_per_class: usize,
    pub held_out_speakers: usize,
    pub trial_pairs: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_keywords: 12,
            n_speakers: 20,
            clips_per_class: 40,
            held_out_speakers: 4,
            trial_pairs: 200,
        }
    }
}

#[derive(Debug)]
pub struct SynthData {
    pub kws_train: Vec<LabeledUtterance>,
    pub kws_test: Vec<LabeledUtterance>,
    pub sv_train: Vec<LabeledUtterance>,
    pub trial_clips: Vec<WavClip>,
    pub trial_pairs: Vec<TrialPair>,
    pub kws_class_names: Vec<String>,
    /// Number of SV *training* speakers (the classification space).
    pub n_sv_speakers: usize,
    /// Original speaker index per held-out speaker (for dataset export).
    pub held_out_ids: Vec<usize>,
}

/// Pitch plus two formant resonances; enough to tell speakers apart.
#[derive(Debug, Clone, Copy)]
struct Voice {
    f0: f64,
    f1: f64,
    f2: f64,
}

fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

fn voices(n: usize) -> Vec<Voice> {
    (0..n)
        .map(|s| {
            let frac = if n > 1 { s as f64 / (n - 1) as f64 } else { 0.0 };
            Voice {
                f0: 85.0 * (250.0f64 / 85.0).powf(frac),
                f1: 350.0 + 450.0 * halton(s + 1, 2),
                f2: 1000.0 + 1500.0 * halton(s + 1, 3),
            }
        })
        .collect()
}

/// Held-out speakers are spread evenly across the pitch range so trial pairs
/// cover it.
fn held_out_indices(n_speakers: usize, held_out: usize) -> Vec<usize> {
    (0..held_out)
        .map(|i| (i * n_speakers + n_speakers / 2) / held_out.max(1))
        .map(|i| i.min(n_speakers - 1))
        .collect()
}

/// Additive harmonic oscillator bank with per-harmonic amplitude; phases are
/// advanced by complex rotation with periodic renormalization.
struct Osc {
    sin: f64,
    cos: f64,
    rot_sin: f64,
    rot_cos: f64,
    amp: f64,
    steps: u32,
}

impl Osc {
    fn new(freq: f64, phase: f64, amp: f64) -> Osc {
        let w = 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE as f64;
        Osc {
            sin: phase.sin(),
            cos: phase.cos(),
            rot_sin: w.sin(),
            rot_cos: w.cos(),
            amp,
            steps: 0,
        }
    }

    #[inline]
    fn next(&mut self) -> f64 {
        let out = self.amp * self.sin;
        let s = self.sin * self.rot_cos + self.cos * self.rot_sin;
        let c = self.cos * self.rot_cos - self.sin * self.rot_sin;
        self.sin = s;
        self.cos = c;
        self.steps += 1;
        if self.steps == 4096 {
            self.steps = 0;
            let norm = (self.sin * self.sin + self.cos * self.cos).sqrt();
            self.sin /= norm;
            self.cos /= norm;
        }
        out
    }
}

/// Render a harmonic burst into `out[start..start+len]` with a trapezoid
/// envelope (attack/release in samples).
#[allow(clippy::too_many_arguments)]
fn render_burst(
    out: &mut [f64],
    start: usize,
    len: usize,
    f0: f64,
    amps: &[f64],
    rng: &mut SplitRng,
    attack: usize,
    release: usize,
) {
    let mut oscs: Vec<Osc> = amps
        .iter()
        .enumerate()
        .filter(|(_, &a)| a != 0.0)
        .map(|(h, &a)| Osc::new(f0 * (h + 1) as f64, rng.range(0.0, std::f64::consts::TAU), a))
        .collect();
    for i in 0..len {
        let env = if i < attack {
            i as f64 / attack as f64
        } else if i + release > len {
            (len - i) as f64 / release as f64
        } else {
            1.0
        };
        let mut v = 0.0;
        for o in oscs.iter_mut() {
            v += o.next();
        }
        out[start + i] += env * v;
    }
}

fn add_noise(out: &mut [f64], sigma: f64, rng: &mut SplitRng) {
    for v in out.iter_mut() {
        *v += sigma * rng.normal();
    }
}

fn normalize_peak(out: &mut [f64], target: f64) {
    let peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let s = target / peak;
        out.iter_mut().for_each(|v| *v *= s);
    }
}

/// Keyword template: fundamental plus class-specific comb of harmonics.
fn keyword_amps(f0: f64, timbre_phase: f64) -> Vec<f64> {
    let n_h = ((5000.0 / f0) as usize).max(1);
    (0..n_h)
        .map(|h| {
            let hn = (h + 1) as f64;
            (1.0 / hn.powf(0.7)) * (1.0 + 0.8 * (hn * timbre_phase).cos())
        })
        .collect()
}

fn keyword_f0(class: usize, n_templates: usize) -> f64 {
    let frac = if n_templates > 1 {
        class as f64 / (n_templates - 1) as f64
    } else {
        0.0
    };
    220.0 * 3.0f64.powf(frac)
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

fn synth_kws_clip(class: usize, n_templates: usize, rng: &mut SplitRng) -> Vec<f64> {
    let mut out = vec![0.0; KWS_SAMPLES];
    let sr = SAMPLE_RATE as f64;
    let is_silence = class == n_templates + 1;
    let is_unknown = class == n_templates;
    if is_silence {
        add_noise(&mut out, rng.range(0.005, 0.02), rng);
        return out;
    }
    let (f0, timbre) = if is_unknown {
        // out-of-set template: pitch above every target class
        (rng.range(800.0, 1400.0), rng.range(0.5, 5.5))
    } else {
        (
            keyword_f0(class, n_templates) * (1.0 + 0.01 * rng.range(-1.0, 1.0)),
            GOLDEN_ANGLE * (class + 1) as f64,
        )
    };
    let amps = keyword_amps(f0, timbre);
    let onset = (rng.range(0.05, 0.25) * sr) as usize;
    let dur = (rng.range(0.5, 0.7) * sr) as usize;
    render_burst(
        &mut out,
        onset,
        dur.min(KWS_SAMPLES - onset),
        f0,
        &amps,
        rng,
        (0.03 * sr) as usize,
        (0.1 * sr) as usize,
    );
    normalize_peak(&mut out, rng.range(0.3, 0.5));
    add_noise(&mut out, 0.01, rng);
    out
}

fn formant_gain(f: f64, voice: &Voice) -> f64 {
    let r1 = (f - voice.f1) / 90.0;
    let r2 = (f - voice.f2) / 140.0;
    0.1 + 1.0 / (1.0 + r1 * r1) + 0.8 / (1.0 + r2 * r2)
}

fn speaker_amps(f0: f64, voice: &Voice) -> Vec<f64> {
    let n_h = ((4000.0 / f0) as usize).max(1);
    (0..n_h)
        .map(|h| {
            let hn = (h + 1) as f64;
            formant_gain(f0 * hn, voice) / hn.powf(0.3)
        })
        .collect()
}

fn synth_sv_clip(voice: &Voice, rng: &mut SplitRng) -> Vec<f64> {
    let mut out = vec![0.0; SV_CLIP_SAMPLES];
    let sr = SAMPLE_RATE as f64;
    let mut t = (rng.range(0.02, 0.1) * sr) as usize;
    while t + ((0.25 * sr) as usize) < SV_CLIP_SAMPLES {
        let dur = (rng.range(0.2, 0.5) * sr) as usize;
        let dur = dur.min(SV_CLIP_SAMPLES - t);
        let f0 = voice.f0 * (1.0 + 0.02 * rng.range(-1.0, 1.0));
        let amps = speaker_amps(f0, voice);
        render_burst(
            &mut out,
            t,
            dur,
            f0,
            &amps,
            rng,
            (0.025 * sr) as usize,
            (0.05 * sr) as usize,
        );
        t += dur + (rng.range(0.03, 0.12) * sr) as usize;
    }
    normalize_peak(&mut out, rng.range(0.3, 0.5));
    add_noise(&mut out, 0.01, rng);
    out
}

/// Generate the full synthetic corpus. Bit-identical for a given (spec, seed).
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    if spec.n_keywords < 2 {
        return Err(Error::param("synthetic spec needs n_keywords >= 2"));
    }
    if spec.n_speakers < 4 {
        return Err(Error::param("synthetic spec needs n_speakers >= 4"));
    }
    if spec.held_out_speakers < 2 {
        return Err(Error::param(
            "need at least 2 held-out speakers to form different-speaker trials",
        ));
    }
    if spec.n_speakers < spec.held_out_speakers + 2 {
        return Err(Error::param(format!(
            "cannot hold out {} of {} speakers and still train on >= 2",
            spec.held_out_speakers, spec.n_speakers
        )));
    }
    if spec.clips_per_class < 2 {
        return Err(Error::param("need clips_per_class >= 2"));
    }
    if spec.trial_pairs < 2 {
        return Err(Error::param("need trial_pairs >= 2"));
    }

    let root = SplitRng::seed_from(seed).split("synth");
    let n_templates = if spec.n_keywords >= 4 {
        spec.n_keywords - 2
    } else {
        spec.n_keywords
    };
    let special = spec.n_keywords >= 4;

    let mut kws_class_names: Vec<String> =
        (0..n_templates).map(|j| format!("kw{j:02}")).collect();
    if special {
        kws_class_names.push("unknown".into());
        kws_class_names.push("silence".into());
    }

    // KWS train + test (test clips are fresh draws from the same templates).
    let n_test = (spec.clips_per_class / 4).max(2);
    let mut kws_train = Vec::new();
    let mut kws_test = Vec::new();
    for class in 0..spec.n_keywords {
        for i in 0..spec.clips_per_class + n_test {
            let mut rng =
                root.split_indexed("kws_clip", (class * 1_000_000 + i) as u64);
            let samples = synth_kws_clip(class, n_templates, &mut rng);
            let clip = WavClip::new(samples, format!("kws/{}/{i}", kws_class_names[class]));
            let item = LabeledUtterance {
                clip,
                task: TaskId::Kws,
                label: class,
            };
            if i < spec.clips_per_class {
                kws_train.push(item);
            } else {
                kws_test.push(item);
            }
        }
    }

    // Speakers: train set gets contiguous labels, held-out speakers feed trials.
    let all_voices = voices(spec.n_speakers);
    let held = held_out_indices(spec.n_speakers, spec.held_out_speakers);
    let mut sv_train = Vec::new();
    let mut train_label = 0usize;
    for (s, voice) in all_voices.iter().enumerate() {
        if held.contains(&s) {
            continue;
        }
        for i in 0..spec.clips_per_class {
            let mut rng = root.split_indexed("sv_clip", (s * 1_000_000 + i) as u64);
            let samples = synth_sv_clip(voice, &mut rng);
            sv_train.push(LabeledUtterance {
                clip: WavClip::new(samples, format!("sv/spk{s:02}/{i}")),
                task: TaskId::Sv,
                label: train_label,
            });
        }
        train_label += 1;
    }

    // Held-out clips and balanced trial pairs.
    let mut trial_clips = Vec::new();
    let mut by_speaker: Vec<Vec<usize>> = Vec::new();
    for &s in &held {
        let mut clip_ids = Vec::new();
        for i in 0..spec.clips_per_class {
            let mut rng = root.split_indexed("trial_clip", (s * 1_000_000 + i) as u64);
            let samples = synth_sv_clip(&all_voices[s], &mut rng);
            clip_ids.push(trial_clips.len());
            trial_clips.push(WavClip::new(samples, format!("trials/spk{s:02}/{i}")));
        }
        by_speaker.push(clip_ids);
    }

    let mut pair_rng = root.split("pairs");
    let n_same = spec.trial_pairs / 2;
    let mut trial_pairs = Vec::with_capacity(spec.trial_pairs);
    for i in 0..n_same {
        let spk = i % by_speaker.len();
        let clips = &by_speaker[spk];
        let a = pair_rng.below(clips.len());
        let mut b = pair_rng.below(clips.len() - 1);
        if b >= a {
            b += 1;
        }
        trial_pairs.push(TrialPair {
            a: clips[a],
            b: clips[b],
            same_speaker: true,
        });
    }
    for i in 0..spec.trial_pairs - n_same {
        let s1 = i % by_speaker.len();
        let mut s2 = pair_rng.below(by_speaker.len() - 1);
        if s2 >= s1 {
            s2 += 1;
        }
        trial_pairs.push(TrialPair {
            a: by_speaker[s1][pair_rng.below(by_speaker[s1].len())],
            b: by_speaker[s2][pair_rng.below(by_speaker[s2].len())],
            same_speaker: false,
        });
    }

    Ok(SynthData {
        kws_train,
        kws_test,
        sv_train,
        trial_clips,
        trial_pairs,
        kws_class_names,
        n_sv_speakers: train_label,
        held_out_ids: held,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_keywords: 4,
            n_speakers: 6,
            clips_per_class: 3,
            held_out_speakers: 2,
            trial_pairs: 6,
        }
    }

    #[test]
    fn default_spec_counts() {
        let spec = SynthSpec::default();
        let d = synth_dataset(&spec, 7).unwrap();
        assert_eq!(d.kws_train.len(), 12 * 40);
        assert_eq!(d.kws_test.len(), 12 * 10);
        assert_eq!(d.sv_train.len(), 16 * 40);
        assert_eq!(d.n_sv_speakers, 16);
        assert_eq!(d.trial_pairs.len(), 200);
        assert_eq!(d.trial_clips.len(), 4 * 40);
        let same = d.trial_pairs.iter().filter(|p| p.same_speaker).count();
        assert_eq!(same, 100, "pairs balanced 50/50");
        assert_eq!(d.kws_class_names.len(), 12);
        assert_eq!(d.kws_class_names[10], "unknown");
        assert_eq!(d.kws_class_names[11], "silence");
    }

    #[test]
    fn clip_lengths_and_amplitude_bounds() {
        let d = synth_dataset(&small_spec(), 3).unwrap();
        for u in d.kws_train.iter().chain(&d.kws_test) {
            assert_eq!(u.clip.len(), KWS_SAMPLES);
            assert!(u.clip.samples.iter().all(|v| v.abs() <= 1.0));
        }
        for u in &d.sv_train {
            assert_eq!(u.clip.len(), SV_CLIP_SAMPLES);
            assert!(u.clip.samples.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let a = synth_dataset(&small_spec(), 11).unwrap();
        let b = synth_dataset(&small_spec(), 11).unwrap();
        for (x, y) in a.sv_train.iter().zip(&b.sv_train) {
            assert_eq!(x.label, y.label);
            assert!(x
                .clip
                .samples
                .iter()
                .zip(y.clip.samples.iter())
                .all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        let c = synth_dataset(&small_spec(), 12).unwrap();
        assert!(a.sv_train[0]
            .clip
            .samples
            .iter()
            .zip(c.sv_train[0].clip.samples.iter())
            .any(|(u, v)| u != v));
    }

    #[test]
    fn too_small_specs_rejected() {
        let mut s = small_spec();
        s.held_out_speakers = 1;
        assert!(synth_dataset(&s, 1).is_err());
        let mut s = small_spec();
        s.n_speakers = 3;
        assert!(synth_dataset(&s, 1).is_err());
        let mut s = small_spec();
        s.held_out_speakers = 5;
        assert!(synth_dataset(&s, 1).is_err());
    }

    #[test]
    fn trial_speakers_disjoint_from_training() {
        // Constructive: trial clips live in their own table keyed by held-out
        // speakers; check the held-out ids do not collide with train labels.
        let d = synth_dataset(&small_spec(), 5).unwrap();
        assert_eq!(d.held_out_ids.len(), 2);
        // n_sv_speakers counts only training speakers
        assert_eq!(d.n_sv_speakers, 4);
        for u in &d.sv_train {
            assert!(u.label < d.n_sv_speakers);
        }
    }
}
