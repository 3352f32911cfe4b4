//! Evaluation battery: per-utterance CER, session means, the CER
//! distribution, length regression, character confusions, and rendering of
//! all of it to CSV, JSON and SVG.

mod emit;
mod plot;
mod stats;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::ctc::{argmax_path, collapse_path};
use crate::dataio::{batch_order, collate, Dataset, Split};
use crate::model::{DecoderModel, ModelError, ModelInput};
use crate::numcore::{Mode, RngStream, Scalar};
use crate::textcodec::{cer, levenshtein, CharVocab, EditOp};

pub use emit::{emit_report, parse_char, render_char, ConfusionRow, EmitError, REPORT_FILES};
pub use plot::{cer_histogram_svg, length_svg, session_svg};
pub use stats::{linear_fit, quantile, spearman, LinearFit};

/// Greedy output for one trial.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub hypothesis: String,
    /// Per-frame argmax indices over valid tokens.
    pub frames: Vec<u32>,
}

/// Anything that maps dataset trials to hypotheses.
pub trait TrialDecoder {
    fn decode(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<Decoded>, ModelError>;
}

/// Greedy CTC decoding with a trained model, smoothing-only preprocessing.
pub struct ModelDecoder<'a, T: Scalar> {
    pub model: &'a DecoderModel<T>,
    pub augment: &'a AugmentConfig,
    pub batch_size: usize,
}

impl<T: Scalar> TrialDecoder for ModelDecoder<'_, T> {
    fn decode(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<Decoded>, ModelError> {
        let vocab = CharVocab::default();
        let min_frames = self.model.config().patch_size;
        let mut out: Vec<Option<Decoded>> = vec![None; indices.len()];
        let positions: Vec<usize> = (0..indices.len()).collect();
        let mut unused = RngStream::new(0);
        for chunk in batch_order(&positions, self.batch_size.max(1), Mode::Eval, &mut unused) {
            let idx: Vec<usize> = chunk.iter().map(|&p| indices[p]).collect();
            let (batch, skipped) = collate::<T>(data, &idx, self.augment, Mode::Eval, min_frames, &unused);
            for id in &skipped {
                log::warn!("trial {id} is shorter than one patch; decoded as empty");
            }
            if batch.is_empty() {
                continue;
            }
            let input = ModelInput {
                features: &batch.features,
                lengths: &batch.lengths,
                sessions: &batch.sessions,
            };
            let rows = self.model.infer(&input)?;
            for (trial, lp) in batch.trial_indices.iter().zip(rows) {
                let v = lp.shape()[1];
                let frames = argmax_path(lp.data(), v, lp.shape()[0]);
                let tokens: Vec<u32> = collapse_path(&frames).into_iter().filter(|&k| (1..=128).contains(&k)).collect();
                let p = chunk[idx.iter().position(|i| i == trial).expect("kept trial")];
                out[p] = Some(Decoded {
                    hypothesis: vocab.decode_tokens(&tokens).expect("character tokens"),
                    frames,
                });
            }
        }
        Ok(out
            .into_iter()
            .map(|d| {
                d.unwrap_or(Decoded {
                    hypothesis: String::new(),
                    frames: Vec::new(),
                })
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub trial_id: String,
    pub session_id: usize,
    pub reference: String,
    pub hypothesis: String,
    pub distance: usize,
    pub reference_len: usize,
    pub cer: f64,
    pub empty_reference: bool,
}

impl UtteranceResult {
    pub fn new(trial_id: &str, session_id: usize, reference: &str, hypothesis: &str) -> Self {
        let c = cer(reference, hypothesis);
        UtteranceResult {
            trial_id: trial_id.to_string(),
            session_id,
            reference: reference.to_string(),
            hypothesis: hypothesis.to_string(),
            distance: c.distance,
            reference_len: c.reference_len,
            cer: c.value,
            empty_reference: c.empty_reference,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Substitution,
    Insertion,
    Deletion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfusionCategory {
    DeletionOfBoundary,
    InsertionIntoWord,
    Other,
}

impl ConfusionCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ConfusionCategory::DeletionOfBoundary => "deletion-of-boundary",
            ConfusionCategory::InsertionIntoWord => "insertion-into-word",
            ConfusionCategory::Other => "other",
        }
    }

    /// A reference space replaced or dropped removes a word boundary; a
    /// hypothesis space where the reference has none splits a word.
    pub fn of(reference: Option<char>, hypothesis: Option<char>) -> Self {
        match (reference, hypothesis) {
            (Some(' '), h) if h != Some(' ') => ConfusionCategory::DeletionOfBoundary,
            (r, Some(' ')) if r != Some(' ') => ConfusionCategory::InsertionIntoWord,
            _ => ConfusionCategory::Other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionEntry {
    pub kind: EditKind,
    pub ref_char: Option<char>,
    pub hyp_char: Option<char>,
    pub count: usize,
    pub category: ConfusionCategory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: usize,
    pub name: String,
    pub date_ordinal: i64,
    pub trials: usize,
    pub mean_cer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    /// Inclusive reference-length range.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub mean_cer: f64,
    /// Population standard deviation within the bin.
    pub std_cer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthAnalysis {
    pub bin_width: usize,
    pub bins: Vec<LengthBin>,
    pub fit: Option<LinearFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub utterances: usize,
    pub total_edits: usize,
    pub total_reference_chars: usize,
    /// Total edits over total reference characters: the headline number.
    pub micro_cer: f64,
    /// Mean of per-utterance CER.
    pub macro_cer: f64,
    pub median_cer: f64,
    pub q1_cer: f64,
    pub q3_cer: f64,
    pub iqr_cer: f64,
    pub empty_references: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub results: Vec<UtteranceResult>,
    pub summary: Summary,
    pub sessions: Vec<SessionSummary>,
    pub length: LengthAnalysis,
    pub confusions: Vec<ConfusionEntry>,
}

pub const LENGTH_BIN_WIDTH: usize = 5;

pub fn summarize(results: &[UtteranceResult]) -> Summary {
    let total_edits: usize = results.iter().map(|r| r.distance).sum();
    let total_chars: usize = results.iter().map(|r| r.reference_len).sum();
    let mut cers: Vec<f64> = results.iter().map(|r| r.cer).collect();
    cers.sort_by(f64::total_cmp);
    let q = |p: f64| quantile(&cers, p).unwrap_or(0.0);
    let (q1, q3) = (q(0.25), q(0.75));
    Summary {
        utterances: results.len(),
        total_edits,
        total_reference_chars: total_chars,
        micro_cer: if total_chars == 0 { 0.0 } else { total_edits as f64 / total_chars as f64 },
        macro_cer: if cers.is_empty() { 0.0 } else { cers.iter().sum::<f64>() / cers.len() as f64 },
        median_cer: q(0.5),
        q1_cer: q1,
        q3_cer: q3,
        iqr_cer: q3 - q1,
        empty_references: results.iter().filter(|r| r.empty_reference).count(),
    }
}

/// Mean CER per session in date order. Sessions without trials are left out.
pub fn session_summary(results: &[UtteranceResult], data: &Dataset) -> Vec<SessionSummary> {
    let mut sessions: Vec<_> = data.sessions.iter().collect();
    sessions.sort_by_key(|s| (s.date_ordinal, s.id));
    let mut out = Vec::new();
    for s in sessions {
        let cers: Vec<f64> = results.iter().filter(|r| r.session_id == s.id).map(|r| r.cer).collect();
        if cers.is_empty() {
            log::warn!("session {} has no evaluated trials; omitted", s.id);
            continue;
        }
        out.push(SessionSummary {
            session_id: s.id,
            name: s.name.clone(),
            date_ordinal: s.date_ordinal,
            trials: cers.len(),
            mean_cer: cers.iter().sum::<f64>() / cers.len() as f64,
        });
    }
    out
}

/// CER by reference length: bins of `bin_width` characters and an
/// ordinary least-squares line over utterances (empty references excluded).
pub fn length_analysis(results: &[UtteranceResult], bin_width: usize) -> LengthAnalysis {
    let width = bin_width.max(1);
    let usable: Vec<&UtteranceResult> = results.iter().filter(|r| !r.empty_reference).collect();
    let mut by_bin: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for r in &usable {
        by_bin.entry(r.reference_len / width).or_default().push(r.cer);
    }
    let bins = by_bin
        .into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            LengthBin {
                lo: k * width,
                hi: k * width + width - 1,
                count: v.len(),
                mean_cer: mean,
                std_cer: (v.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt(),
            }
        })
        .collect();
    let xs: Vec<f64> = usable.iter().map(|r| r.reference_len as f64).collect();
    let ys: Vec<f64> = usable.iter().map(|r| r.cer).collect();
    LengthAnalysis {
        bin_width: width,
        bins,
        fit: linear_fit(&xs, &ys),
    }
}

/// All substitution, insertion and deletion pairs over the results, most
/// frequent first; ties ordered by the (reference, hypothesis) pair.
pub fn confusion_table(results: &[UtteranceResult], top_k: Option<usize>) -> Vec<ConfusionEntry> {
    let mut counts: std::collections::BTreeMap<(Option<char>, Option<char>), usize> = Default::default();
    for r in results {
        let (_, script) = levenshtein(&r.reference, &r.hypothesis);
        for op in script.ops {
            let key = match op {
                EditOp::Match(_) => continue,
                EditOp::Substitute { reference, hypothesis } => (Some(reference), Some(hypothesis)),
                EditOp::Insert(c) => (None, Some(c)),
                EditOp::Delete(c) => (Some(c), None),
            };
            *counts.entry(key).or_default() += 1;
        }
    }
    let mut entries: Vec<ConfusionEntry> = counts
        .into_iter()
        .map(|((r, h), count)| ConfusionEntry {
            kind: match (r, h) {
                (Some(_), Some(_)) => EditKind::Substitution,
                (None, _) => EditKind::Insertion,
                (_, None) => EditKind::Deletion,
            },
            ref_char: r,
            hyp_char: h,
            count,
            category: ConfusionCategory::of(r, h),
        })
        .collect();
    // stable sort keeps the map's pair order among equal counts
    entries.sort_by(|a, b| b.count.cmp(&a.count));
    if let Some(k) = top_k {
        entries.truncate(k);
    }
    entries
}

pub fn build_report(split: &str, results: Vec<UtteranceResult>, data: &Dataset) -> EvalReport {
    EvalReport {
        split: split.to_string(),
        summary: summarize(&results),
        sessions: session_summary(&results, data),
        length: length_analysis(&results, LENGTH_BIN_WIDTH),
        confusions: confusion_table(&results, None),
        results,
    }
}

/// Decodes every trial of `split` and builds the full report.
pub fn evaluate_split(decoder: &dyn TrialDecoder, data: &Dataset, split: Split) -> Result<EvalReport, ModelError> {
    let indices = data.split_indices(split);
    let decoded = decoder.decode(data, &indices)?;
    let results = indices
        .iter()
        .zip(&decoded)
        .map(|(&i, d)| {
            let t = &data.trials[i];
            UtteranceResult::new(&t.trial_id, t.session_id, &t.transcript, &d.hypothesis)
        })
        .collect();
    Ok(build_report(split.as_str(), results, data))
}

/// Micro CER over `indices`, the model-selection metric.
pub fn micro_cer(decoder: &dyn TrialDecoder, data: &Dataset, indices: &[usize]) -> Result<f64, ModelError> {
    let decoded = decoder.decode(data, indices)?;
    let (mut edits, mut chars) = (0usize, 0usize);
    for (&i, d) in indices.iter().zip(&decoded) {
        let c = cer(&data.trials[i].transcript, &d.hypothesis);
        edits += c.distance;
        chars += c.reference_len;
    }
    Ok(if chars == 0 { 0.0 } else { edits as f64 / chars as f64 })
}

/// One arm of an ablation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub micro_cer: f64,
    pub macro_cer: f64,
}

/// Markdown table of ablation arms, one row each, CER as percentages.
pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| Model | CER (%) | Macro CER (%) |\n|---|---|---|\n");
    for r in rows {
        s.push_str(&format!("| {} | {:.2} | {:.2} |\n", r.arm, 100.0 * r.micro_cer, 100.0 * r.macro_cer));
    }
    s
}
