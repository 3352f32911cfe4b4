#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neurodecode::dataio::{write_dataset, Dataset, SessionInfo, Split, TrialRecord};
use neurodecode::model::{DecoderModel, ModelConfig};
use neurodecode::{RngStream, Tensor};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neurodecode"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Symbol classes a stub model can emit: blank first, then characters.
pub fn classes(text: &str) -> Vec<char> {
    let mut c: Vec<char> = text.chars().collect();
    c.sort_unstable();
    c.dedup();
    c
}

fn stub_config(k: usize) -> ModelConfig {
    ModelConfig {
        channels: k,
        num_sessions: 1,
        d_model: k,
        num_blocks: 0,
        heads: 1,
        d_ff: 4,
        conv_kernel: 1,
        patch_size: 1,
        stride: 1,
        dropout: 0.0,
        vocab_size: 129,
        max_pos_len: 1024,
    }
}

fn set(model: &mut DecoderModel<f32>, name: &str, t: Tensor<f32>) {
    let id = model.params().find(name).unwrap_or_else(|| panic!("{name}"));
    *model.params_mut().value_mut(id) = t;
}

/// Patch of one frame, no encoder blocks, and a head that copies input
/// channel j to the token of class j. Fed one-hot frames it emits exactly
/// the classes it is shown.
pub fn perfect_stub(chars: &[char], path: &Path) {
    let k = chars.len() + 1;
    let mut m = DecoderModel::<f32>::new(stub_config(k), &mut RngStream::new(0)).unwrap();
    set(&mut m, "embed.proj.w", Tensor::eye(k));
    set(&mut m, "embed.proj.b", Tensor::zeros(&[k]));
    let mut w1 = Tensor::eye(k);
    w1.scale_in_place(2.0);
    set(&mut m, "head.w1.w", w1);
    set(&mut m, "head.w1.b", Tensor::zeros(&[k]));
    let mut w2 = Tensor::zeros(&[k, 129]);
    for j in 0..k {
        let token = if j == 0 { 0 } else { chars[j - 1] as usize + 1 };
        w2.set(&[j, token], 10.0);
    }
    set(&mut m, "head.w2.w", w2);
    set(&mut m, "head.w2.b", Tensor::zeros(&[129]));
    m.save(path, serde_json::json!({"kind": "stub"})).unwrap();
}

/// Same layout, but every frame's argmax is the blank.
pub fn blank_stub(channels: usize, path: &Path) {
    let mut m = DecoderModel::<f32>::new(stub_config(channels), &mut RngStream::new(0)).unwrap();
    set(&mut m, "head.w2.w", Tensor::zeros(&[channels, 129]));
    let mut b = Tensor::zeros(&[129]);
    b.set(&[0], 50.0);
    set(&mut m, "head.w2.b", b);
    m.save(path, serde_json::json!({"kind": "stub"})).unwrap();
}

/// One trial whose frames spell `text` as held one-hot blocks separated by
/// blank blocks.
pub fn spelled_trial(text: &str, chars: &[char], hold: usize) -> Tensor<f32> {
    let k = chars.len() + 1;
    let mut rows: Vec<usize> = vec![0; hold];
    for c in text.chars() {
        let j = chars.iter().position(|&x| x == c).unwrap() + 1;
        rows.extend(std::iter::repeat_n(j, hold));
        rows.extend(std::iter::repeat_n(0, hold));
    }
    let mut t = Tensor::zeros(&[rows.len(), k]);
    for (i, &j) in rows.iter().enumerate() {
        t.set(&[i, j], 10.0);
    }
    t
}

pub fn trial_file(dir: &Path, features: Tensor<f32>, transcript: &str) -> PathBuf {
    let data = Dataset {
        channels: features.shape()[1],
        sessions: vec![SessionInfo { id: 0, name: "s0".into(), date_ordinal: 0 }],
        trials: vec![TrialRecord {
            trial_id: "fixture".into(),
            session_id: 0,
            split: Split::Test,
            features,
            transcript: transcript.into(),
        }],
        source: serde_json::Value::Null,
    };
    write_dataset(dir, &data).unwrap();
    dir.to_path_buf()
}

/// Config for a small model on a small synthetic set, fast enough for tests.
pub fn tiny_config(path: &Path) {
    let cfg = serde_json::json!({
        "model": {"channels": 8, "num_sessions": 2, "d_model": 16, "num_blocks": 1, "heads": 2,
                  "d_ff": 32, "conv_kernel": 3, "patch_size": 4, "stride": 2, "max_pos_len": 256},
        "synth": {"channels": 8, "frames_per_char": 4, "max_words": 1, "rest_frames": 2, "sessions": 2,
                  "train_trials": 24, "val_trials": 6, "words": ["ab", "ba", "cab", "bad"]},
        "optim": {"epochs": 2, "batch_size": 8, "warmup_steps": 5, "base_lr": 0.003}
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}
