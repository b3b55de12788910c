//! Directory-tree datasets: folder-per-keyword KWS layouts, speaker-id trees
//! for SV, and plain-text trial lists (`"<0|1> <rel_a> <rel_b>"` per line).
//! `write_dataset` materializes a synthetic corpus in the same layout.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{
    read_wav, write_wav, LabeledUtterance, SynthData, TaskId, TrialPair, WavClip,
};
use crate::error::{Error, Result};

fn sorted_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn wavs_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            wavs_under(&p, out)?;
        } else if p.extension().map(|e| e == "wav").unwrap_or(false) {
            out.push(p);
        }
    }
    Ok(())
}

/// Folder-per-class tree: `root/<class>/**.wav`. Classes are sorted folder
/// names; returns the utterances and the class-name table.
pub fn load_kws_tree(root: &Path) -> Result<(Vec<LabeledUtterance>, Vec<String>)> {
    let dirs = sorted_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::format(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let mut items = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in dirs.iter().enumerate() {
        names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        let mut wavs = Vec::new();
        wavs_under(dir, &mut wavs)?;
        for w in wavs {
            items.push(LabeledUtterance {
                clip: read_wav(&w)?,
                task: TaskId::Kws,
                label,
            });
        }
    }
    Ok((items, names))
}

/// Speaker-id tree: `root/<speaker>/**.wav` (arbitrary nesting below the
/// speaker level, like id/video/clip layouts).
pub fn load_sv_tree(root: &Path) -> Result<(Vec<LabeledUtterance>, usize)> {
    let dirs = sorted_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::format(format!(
            "no speaker directories under {}",
            root.display()
        )));
    }
    let mut items = Vec::new();
    for (label, dir) in dirs.iter().enumerate() {
        let mut wavs = Vec::new();
        wavs_under(dir, &mut wavs)?;
        for w in wavs {
            items.push(LabeledUtterance {
                clip: read_wav(&w)?,
                task: TaskId::Sv,
                label,
            });
        }
    }
    Ok((items, dirs.len()))
}

/// Trial list: one `"<0|1> <rel_a> <rel_b>"` line per pair, paths relative to
/// the list file's directory. Clips are loaded once each.
pub fn load_trials(list_path: &Path) -> Result<(Vec<WavClip>, Vec<TrialPair>)> {
    let base = list_path
        .parent()
        .ok_or_else(|| Error::format("trial list has no parent directory"))?
        .to_path_buf();
    let text = fs::read_to_string(list_path)?;
    let mut clips = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut pairs = Vec::new();
    let mut intern = |rel: &str, clips: &mut Vec<WavClip>| -> Result<usize> {
        if let Some(&i) = index.get(rel) {
            return Ok(i);
        }
        let clip = read_wav(&base.join(rel))?;
        let i = clips.len();
        clips.push(clip);
        index.insert(rel.to_string(), i);
        Ok(i)
    };
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (lab, a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(a), Some(b)) => (l, a, b),
            _ => {
                return Err(Error::format(format!(
                    "trial list line {}: expected '<0|1> <path_a> <path_b>'",
                    ln + 1
                )))
            }
        };
        let same = match lab {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::format(format!(
                    "trial list line {}: label '{other}' is not 0 or 1",
                    ln + 1
                )))
            }
        };
        pairs.push(TrialPair {
            a: intern(a, &mut clips)?,
            b: intern(b, &mut clips)?,
            same_speaker: same,
        });
    }
    if pairs.is_empty() {
        return Err(Error::format("trial list contains no pairs"));
    }
    Ok((clips, pairs))
}

/// Materialize a synthetic corpus as WAV trees plus a trial list:
///   out/kws/train/<class>/clip_NNNN.wav
///   out/kws/test/<class>/clip_NNNN.wav
///   out/sv/train/<speaker>/clip_NNNN.wav
///   out/sv/trials/<clip>.wav and out/sv/trials.txt
pub fn write_dataset(out: &Path, data: &SynthData) -> Result<()> {
    let write_items = |base: PathBuf, items: &[LabeledUtterance], names: &dyn Fn(usize) -> String| -> Result<()> {
        let mut counters: HashMap<usize, usize> = HashMap::new();
        for item in items {
            let n = counters.entry(item.label).or_insert(0);
            let dir = base.join(names(item.label));
            fs::create_dir_all(&dir)?;
            write_wav(&dir.join(format!("clip_{n:04}.wav")), &item.clip.samples)?;
            *n += 1;
        }
        Ok(())
    };
    let kws_name = |l: usize| data.kws_class_names[l].clone();
    write_items(out.join("kws/train"), &data.kws_train, &kws_name)?;
    write_items(out.join("kws/test"), &data.kws_test, &kws_name)?;
    write_items(out.join("sv/train"), &data.sv_train, &|l| {
        format!("spk{l:03}")
    })?;

    let trials_dir = out.join("sv/trials");
    fs::create_dir_all(&trials_dir)?;
    let mut rel_names = Vec::with_capacity(data.trial_clips.len());
    for (i, clip) in data.trial_clips.iter().enumerate() {
        let rel = format!("trials/clip_{i:04}.wav");
        write_wav(&out.join("sv").join(&rel), &clip.samples)?;
        rel_names.push(rel);
    }
    let mut listing = String::new();
    for p in &data.trial_pairs {
        listing.push_str(&format!(
            "{} {} {}\n",
            if p.same_speaker { 1 } else { 0 },
            rel_names[p.a],
            rel_names[p.b]
        ));
    }
    fs::write(out.join("sv/trials.txt"), listing)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};

    #[test]
    fn write_then_load_round_trip() {
        let spec = SynthSpec {
            n_keywords: 3,
            n_speakers: 5,
            clips_per_class: 2,
            held_out_speakers: 2,
            trial_pairs: 4,
        };
        let data = synth_dataset(&spec, 21).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        write_dataset(tmp.path(), &data).unwrap();

        let (kws, names) = load_kws_tree(&tmp.path().join("kws/train")).unwrap();
        assert_eq!(kws.len(), data.kws_train.len());
        assert_eq!(names.len(), 3);

        let (sv, n_spk) = load_sv_tree(&tmp.path().join("sv/train")).unwrap();
        assert_eq!(sv.len(), data.sv_train.len());
        assert_eq!(n_spk, data.n_sv_speakers);

        let (clips, pairs) = load_trials(&tmp.path().join("sv/trials.txt")).unwrap();
        assert_eq!(pairs.len(), 4);
        // Clips are interned in file order, so compare through the pairs.
        // WAV write/read quantizes to 16-bit; samples match to that precision.
        for (orig, loaded) in data.trial_pairs.iter().zip(&pairs) {
            assert_eq!(orig.same_speaker, loaded.same_speaker);
            for (o, l) in [(orig.a, loaded.a), (orig.b, loaded.b)] {
                for (x, y) in data.trial_clips[o].samples.iter().zip(clips[l].samples.iter()) {
                    assert!((x - y).abs() <= 1.0 / 32_768.0);
                }
            }
        }
    }

    #[test]
    fn trial_list_parse_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let list = tmp.path().join("trials.txt");
        std::fs::write(&list, "1 a.wav\n").unwrap();
        assert!(load_trials(&list).is_err());
        std::fs::write(&list, "x a.wav b.wav\n").unwrap();
        assert!(load_trials(&list).is_err());
    }
}
