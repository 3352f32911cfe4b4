//! Trial storage, dataset splits, batching and a synthetic generator.
//!
//! A dataset directory holds `manifest.json` and `features.bin`. The binary
//! file starts with a version byte followed by each trial's `T × C` features
//! as little-endian `f32`; the manifest records every trial's byte offset
//! and CRC32.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{apply_pipeline, AugmentConfig};
use crate::numcore::{Mode, RngStream, Scalar, Tensor};
use crate::textcodec::CharVocab;

pub const FORMAT_VERSION: u8 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.bin";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("unsupported features.bin version {0}")]
    Version(u8),
    #[error("trial {trial_id}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        trial_id: String,
        stored: u32,
        computed: u32,
    },
    #[error("trial {trial_id}: features.bin is truncated")]
    Truncated { trial_id: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train, val, test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub trial_id: String,
    pub session_id: usize,
    pub split: Split,
    /// `[T, C]` binned features.
    pub features: Tensor<f32>,
    pub transcript: String,
}

impl TrialRecord {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: usize,
    pub name: String,
    pub date_ordinal: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub trial_id: String,
    pub session_id: usize,
    pub split: Split,
    pub frames: usize,
    pub offset: u64,
    pub byte_len: u64,
    pub crc32: u32,
    pub transcript: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u8,
    pub channels: usize,
    pub sessions: Vec<SessionInfo>,
    pub trials: Vec<TrialEntry>,
    /// Free-form provenance, e.g. the generator spec.
    #[serde(default)]
    pub source: serde_json::Value,
}

/// An in-memory dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub sessions: Vec<SessionInfo>,
    pub trials: Vec<TrialRecord>,
    pub source: serde_json::Value,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        for (i, s) in self.sessions.iter().enumerate() {
            if s.id != i {
                return bad(format!("session table entry {i} has id {}", s.id));
            }
            if i > 0 && s.date_ordinal <= self.sessions[i - 1].date_ordinal {
                return bad(format!("session dates must increase (session {i})"));
            }
        }
        let vocab = CharVocab::default();
        let mut seen = std::collections::HashSet::new();
        for t in &self.trials {
            if !seen.insert(t.trial_id.as_str()) {
                return bad(format!("duplicate trial id {}", t.trial_id));
            }
            let shape = t.features.shape();
            if shape.len() != 2 || shape[0] == 0 || shape[1] != self.channels {
                return bad(format!("trial {}: features {shape:?}, expected [T >= 1, {}]", t.trial_id, self.channels));
            }
            if t.session_id >= self.sessions.len() {
                return bad(format!("trial {}: unknown session {}", t.trial_id, t.session_id));
            }
            if !vocab.accepts(&t.transcript) {
                return bad(format!("trial {}: transcript is not 7-bit", t.trial_id));
            }
        }
        Ok(())
    }

    /// Indices of the trials in `split`, in storage order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.trials.len()).filter(|&i| self.trials[i].split == split).collect()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<DatasetManifest, DataError> {
    data.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = vec![FORMAT_VERSION];
    let mut entries = Vec::with_capacity(data.trials.len());
    for t in &data.trials {
        let offset = blob.len() as u64;
        let start = blob.len();
        for v in t.features.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TrialEntry {
            trial_id: t.trial_id.clone(),
            session_id: t.session_id,
            split: t.split,
            frames: t.frames(),
            offset,
            byte_len: (blob.len() - start) as u64,
            crc32: crc32fast::hash(&blob[start..]),
            transcript: t.transcript.clone(),
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        channels: data.channels,
        sessions: data.sessions.clone(),
        trials: entries,
        source: data.source.clone(),
    };
    let fpath = dir.join(FEATURES_FILE);
    fs::write(&fpath, &blob).map_err(io_err(&fpath))?;
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DataError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(DataError::Version(m.format_version));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest = read_manifest(dir)?;
    let fpath = dir.join(FEATURES_FILE);
    let blob = fs::read(&fpath).map_err(io_err(&fpath))?;
    match blob.first() {
        None => {
            return Err(DataError::Truncated {
                trial_id: "<header>".into(),
            })
        }
        Some(&v) if v != FORMAT_VERSION => return Err(DataError::Version(v)),
        _ => {}
    }
    let mut trials = Vec::with_capacity(manifest.trials.len());
    for e in &manifest.trials {
        let expect = (e.frames * manifest.channels * 4) as u64;
        if e.byte_len != expect {
            return Err(DataError::Manifest(format!(
                "trial {}: {} bytes recorded for {} frames",
                e.trial_id, e.byte_len, e.frames
            )));
        }
        let (start, end) = (e.offset as usize, (e.offset + e.byte_len) as usize);
        if end > blob.len() || start == 0 {
            return Err(DataError::Truncated {
                trial_id: e.trial_id.clone(),
            });
        }
        let bytes = &blob[start..end];
        let computed = crc32fast::hash(bytes);
        if computed != e.crc32 {
            return Err(DataError::Checksum {
                trial_id: e.trial_id.clone(),
                stored: e.crc32,
                computed,
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        trials.push(TrialRecord {
            trial_id: e.trial_id.clone(),
            session_id: e.session_id,
            split: e.split,
            features: Tensor::from_vec(&[e.frames, manifest.channels], values)
                .map_err(|err| DataError::Manifest(err.to_string()))?,
            transcript: e.transcript.clone(),
        });
    }
    let data = Dataset {
        channels: manifest.channels,
        sessions: manifest.sessions,
        trials,
        source: manifest.source,
    };
    data.validate()?;
    Ok(data)
}

/// Parameters of the synthetic neural-data generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub channels: usize,
    /// Frames emitted per character.
    pub frames_per_char: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub words: Vec<String>,
    /// Silent frames before the first and after the last character.
    pub rest_frames: usize,
    /// Scale of the character templates.
    pub template_scale: f64,
    /// Standard deviation of additive per-frame noise.
    pub noise: f64,
    /// Session `s` mixes channels with `I + s·drift·R`.
    pub drift: f64,
    /// Session `s` shifts channels by `s·offset_drift·g`.
    pub offset_drift: f64,
    pub sessions: usize,
    pub train_trials: usize,
    pub val_trials: usize,
    pub test_trials: usize,
}

pub const DEFAULT_WORDS: &[&str] = &[
    "the", "cat", "sat", "on", "mat", "dog", "ran", "far", "sun", "is", "hot", "we", "go", "home", "now", "you",
    "can", "see", "it", "big", "red", "box", "my", "hand", "water", "tree", "good", "day", "time", "help",
    "yes", "no", "this", "that", "want", "eat", "food", "cold", "light", "please",
];

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            channels: 32,
            frames_per_char: 8,
            min_words: 1,
            max_words: 3,
            words: DEFAULT_WORDS.iter().map(|w| w.to_string()).collect(),
            rest_frames: 6,
            template_scale: 1.0,
            noise: 0.5,
            drift: 0.15,
            offset_drift: 0.3,
            sessions: 3,
            train_trials: 300,
            val_trials: 50,
            test_trials: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.channels == 0 || self.frames_per_char == 0 || self.sessions == 0 {
            return bad("channels, frames_per_char and sessions must be positive".into());
        }
        if self.words.is_empty() {
            return bad("the word list is empty".into());
        }
        for w in &self.words {
            if w.is_empty() || !w.chars().all(|c| c.is_ascii() && !c.is_ascii_whitespace() && !c.is_ascii_control()) {
                return bad(format!("word {w:?} must be non-empty printable ASCII without spaces"));
            }
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad(format!("need 1 <= min_words <= max_words, got {}..{}", self.min_words, self.max_words));
        }
        for (name, v) in [
            ("template_scale", self.template_scale),
            ("noise", self.noise),
            ("drift", self.drift),
            ("offset_drift", self.offset_drift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Sorted distinct characters that can appear, space included.
    pub fn alphabet(&self) -> Vec<char> {
        let mut chars: Vec<char> = self.words.iter().flat_map(|w| w.chars()).collect();
        chars.push(' ');
        chars.sort_unstable();
        chars.dedup();
        chars
    }
}

/// Fixed templates and session distortions drawn once from a seed.
#[derive(Clone, Debug)]
pub struct SynthGenerator {
    pub spec: SynthSpec,
    alphabet: Vec<char>,
    /// One `C`-vector per alphabet character.
    templates: Vec<Vec<f64>>,
    /// Row-major `C × C` mixing matrix per session.
    mixing: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
    seed: u64,
}

impl SynthGenerator {
    pub fn new(spec: SynthSpec, seed: u64) -> Result<Self, DataError> {
        spec.validate()?;
        let c = spec.channels;
        let alphabet = spec.alphabet();
        let mut rng = RngStream::new(seed).derive(0);
        let templates = alphabet
            .iter()
            .map(|_| (0..c).map(|_| spec.template_scale * rng.normal()).collect())
            .collect();
        let r: Vec<f64> = (0..c * c).map(|_| rng.normal() / (c as f64).sqrt()).collect();
        let g: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let mut mixing = Vec::with_capacity(spec.sessions);
        let mut offsets = Vec::with_capacity(spec.sessions);
        for s in 0..spec.sessions {
            let k = s as f64 * spec.drift;
            let mut m: Vec<f64> = r.iter().map(|v| k * v).collect();
            for i in 0..c {
                m[i * c + i] += 1.0;
            }
            mixing.push(m);
            offsets.push(g.iter().map(|v| s as f64 * spec.offset_drift * v).collect());
        }
        Ok(SynthGenerator {
            spec,
            alphabet,
            templates,
            mixing,
            offsets,
            seed,
        })
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn template(&self, ch: char) -> Option<&[f64]> {
        self.alphabet.binary_search(&ch).ok().map(|i| self.templates[i].as_slice())
    }

    pub fn mixing(&self, session: usize) -> &[f64] {
        &self.mixing[session]
    }

    pub fn offset(&self, session: usize) -> &[f64] {
        &self.offsets[session]
    }

    pub fn sentence(&self, rng: &mut RngStream) -> String {
        let n = rng.int_inclusive(self.spec.min_words, self.spec.max_words);
        (0..n)
            .map(|_| self.spec.words[rng.below(self.spec.words.len())].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Undistorted frames: rest, `D` noisy template frames per character,
    /// rest. Row-major `[T, C]`.
    pub fn base_frames(&self, text: &str, rng: &mut RngStream) -> Vec<f64> {
        let (c, d, rest) = (self.spec.channels, self.spec.frames_per_char, self.spec.rest_frames);
        let frames = 2 * rest + d * text.chars().count();
        let mut out = Vec::with_capacity(frames * c);
        let zero = vec![0.0; c];
        let mut emit = |u: &[f64], out: &mut Vec<f64>| {
            for &v in u {
                out.push(v + self.spec.noise * rng.normal());
            }
        };
        for _ in 0..rest {
            emit(&zero, &mut out);
        }
        for ch in text.chars() {
            let u = self.template(ch).unwrap_or(&zero);
            for _ in 0..d {
                emit(u, &mut out);
            }
        }
        for _ in 0..rest {
            emit(&zero, &mut out);
        }
        out
    }

    /// Applies session `s`: each frame `x ↦ M_s x + o_s`.
    pub fn distort(&self, frames: &[f64], session: usize) -> Vec<f64> {
        let c = self.spec.channels;
        let m = &self.mixing[session];
        let o = &self.offsets[session];
        let mut out = Vec::with_capacity(frames.len());
        for x in frames.chunks(c) {
            for i in 0..c {
                let row = &m[i * c..(i + 1) * c];
                out.push(row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + o[i]);
            }
        }
        out
    }

    /// One trial; all randomness comes from `(seed, index)`.
    pub fn trial(&self, index: usize, session: usize, split: Split) -> TrialRecord {
        let mut rng = RngStream::new(self.seed).derive(1 + index as u64);
        let text = self.sentence(&mut rng);
        let base = self.base_frames(&text, &mut rng);
        let frames = base.len() / self.spec.channels;
        let data = self.distort(&base, session).into_iter().map(|v| v as f32).collect();
        TrialRecord {
            trial_id: format!("t{index:05}"),
            session_id: session,
            split,
            features: Tensor::from_vec(&[frames, self.spec.channels], data).expect("shape"),
            transcript: text,
        }
    }

    /// Full dataset: train, then validation, then test trials; sessions
    /// assigned round-robin.
    pub fn generate(&self) -> Dataset {
        let s = &self.spec;
        let plan = [(Split::Train, s.train_trials), (Split::Val, s.val_trials), (Split::Test, s.test_trials)];
        let mut trials = Vec::new();
        for (split, n) in plan {
            for _ in 0..n {
                let i = trials.len();
                trials.push(self.trial(i, i % s.sessions, split));
            }
        }
        Dataset {
            channels: s.channels,
            sessions: (0..s.sessions)
                .map(|i| SessionInfo {
                    id: i,
                    name: format!("synthetic-{i}"),
                    date_ordinal: i as i64,
                })
                .collect(),
            trials,
            source: serde_json::json!({ "generator": "synthetic", "seed": self.seed, "spec": s }),
        }
    }
}

pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<Dataset, DataError> {
    Ok(SynthGenerator::new(spec.clone(), seed)?.generate())
}

/// Groups trial indices into batches. Training order is reshuffled from
/// `rng`; evaluation keeps the given order.
pub fn batch_order(indices: &[usize], batch_size: usize, mode: Mode, rng: &mut RngStream) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order = indices.to_vec();
    if mode == Mode::Train {
        rng.shuffle(&mut order);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// A padded batch ready for the model.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub trial_indices: Vec<usize>,
    /// `[B, T, C]`, zero past each trial's length.
    pub features: Tensor<T>,
    pub lengths: Vec<usize>,
    pub sessions: Vec<usize>,
    pub targets: Vec<Vec<u32>>,
    pub log: Vec<Vec<crate::augment::AppliedOp>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.trial_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trial_indices.is_empty()
    }
}

/// Augments and pads the trials `indices`. Trials shorter than `min_frames`
/// after augmentation are dropped with a warning and reported.
pub fn collate<T: Scalar>(
    data: &Dataset,
    indices: &[usize],
    augment: &AugmentConfig,
    mode: Mode,
    min_frames: usize,
    rng: &RngStream,
) -> (Batch<T>, Vec<String>) {
    let raw: Vec<Tensor<T>> = indices.iter().map(|&i| data.trials[i].features.cast()).collect();
    let refs: Vec<&Tensor<T>> = raw.iter().collect();
    let aug = apply_pipeline(&refs, augment, mode, min_frames, rng);
    let vocab = CharVocab::default();
    let frames = aug.features.shape()[1];
    let c = data.channels;
    let mut skipped = Vec::new();
    let mut keep = Vec::new();
    for (k, &i) in indices.iter().enumerate() {
        if aug.valid_lengths[k] < min_frames {
            log::warn!(
                "skipping trial {}: {} frames after augmentation, need {min_frames}",
                data.trials[i].trial_id,
                aug.valid_lengths[k]
            );
            skipped.push(data.trials[i].trial_id.clone());
        } else {
            keep.push(k);
        }
    }
    let kept_frames = keep.iter().map(|&k| aug.valid_lengths[k]).max().unwrap_or(0);
    let mut feats = vec![T::zero(); keep.len() * kept_frames * c];
    for (row, &k) in keep.iter().enumerate() {
        let src = &aug.features.data()[k * frames * c..][..aug.valid_lengths[k] * c];
        feats[row * kept_frames * c..][..src.len()].copy_from_slice(src);
    }
    let batch = Batch {
        trial_indices: keep.iter().map(|&k| indices[k]).collect(),
        features: Tensor::from_vec(&[keep.len(), kept_frames, c], feats).expect("shape"),
        lengths: keep.iter().map(|&k| aug.valid_lengths[k]).collect(),
        sessions: keep.iter().map(|&k| data.trials[indices[k]].session_id).collect(),
        targets: keep
            .iter()
            .map(|&k| vocab.encode(&data.trials[indices[k]].transcript).expect("validated transcript"))
            .collect(),
        log: keep.iter().map(|&k| aug.log[k].clone()).collect(),
    };
    (batch, skipped)
}
