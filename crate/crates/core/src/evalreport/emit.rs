use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    cer_histogram_svg, length_svg, quantile, session_svg, ConfusionCategory, ConfusionEntry, EditKind, EvalReport,
    LengthBin, SessionSummary, UtteranceResult,
};

pub const REPORT_FILES: [&str; 8] = [
    "utterances.csv",
    "sessions.csv",
    "length_bins.csv",
    "confusions.csv",
    "summary.json",
    "session_cer.svg",
    "cer_histogram.svg",
    "length_cer.svg",
];

const AVERAGING_NOTE: &str = "micro_cer is total edits over total reference characters and is the headline \
figure; macro_cer, median and IQR are over per-utterance CER. The source result does not state which \
averaging it used.";

#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot encode {path}: {detail}")]
    Encode { path: PathBuf, detail: String },
}

/// `[SP]` for a space, the character otherwise, empty for a missing side.
pub fn render_char(c: Option<char>) -> String {
    match c {
        Some(' ') => "[SP]".to_string(),
        Some(c) => c.to_string(),
        None => String::new(),
    }
}

pub fn parse_char(s: &str) -> Option<char> {
    match s {
        "" => None,
        "[SP]" => Some(' '),
        s => s.chars().next(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub rank: usize,
    pub kind: EditKind,
    pub ref_char: String,
    pub hyp_char: String,
    pub count: usize,
    pub category: ConfusionCategory,
}

impl ConfusionRow {
    pub fn from_entry(rank: usize, e: &ConfusionEntry) -> Self {
        ConfusionRow {
            rank,
            kind: e.kind,
            ref_char: render_char(e.ref_char),
            hyp_char: render_char(e.hyp_char),
            count: e.count,
            category: e.category,
        }
    }

    pub fn to_entry(&self) -> ConfusionEntry {
        ConfusionEntry {
            kind: self.kind,
            ref_char: parse_char(&self.ref_char),
            hyp_char: parse_char(&self.hyp_char),
            count: self.count,
            category: self.category,
        }
    }
}

#[derive(Serialize)]
struct Example<'a> {
    which: &'static str,
    trial_id: &'a str,
    reference: &'a str,
    hypothesis: &'a str,
    cer: f64,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    split: &'a str,
    micro_cer: f64,
    macro_cer: f64,
    median_cer: f64,
    q1_cer: f64,
    q3_cer: f64,
    iqr_cer: f64,
    utterances: usize,
    total_edits: usize,
    total_reference_chars: usize,
    empty_references: usize,
    session_median_cer: Option<f64>,
    session_iqr_cer: Option<f64>,
    length_bin_width: usize,
    length_fit: Option<super::LinearFit>,
    top_confusions: Vec<ConfusionRow>,
    examples: Vec<Example<'a>>,
    averaging_note: &'static str,
}

fn csv_rows<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<(), EmitError> {
    let enc = |e: csv::Error| EmitError::Encode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).map_err(enc)?;
    for r in rows {
        w.serialize(r).map_err(enc)?;
    }
    let bytes = w.into_inner().map_err(|e| EmitError::Encode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    write_file(path, &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), EmitError> {
    fs::write(path, bytes).map_err(|source| EmitError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn examples(results: &[UtteranceResult]) -> Vec<Example<'_>> {
    let mut order: Vec<&UtteranceResult> = results.iter().collect();
    order.sort_by(|a, b| a.cer.total_cmp(&b.cer).then_with(|| a.trial_id.cmp(&b.trial_id)));
    let Some(first) = order.first() else {
        return Vec::new();
    };
    let picks = [
        ("best", *first),
        ("median", order[order.len() / 2]),
        ("worst", order[order.len() - 1]),
    ];
    picks
        .into_iter()
        .map(|(which, r)| Example {
            which,
            trial_id: &r.trial_id,
            reference: &r.reference,
            hypothesis: &r.hypothesis,
            cer: r.cer,
        })
        .collect()
}

/// Writes every file in [`REPORT_FILES`] into `out_dir`, creating it.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<(), EmitError> {
    fs::create_dir_all(out_dir).map_err(|source| EmitError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let p = |name: &str| out_dir.join(name);

    csv_rows::<UtteranceResult>(
        &p("utterances.csv"),
        &["trial_id", "session_id", "reference", "hypothesis", "distance", "reference_len", "cer", "empty_reference"],
        &report.results,
    )?;
    csv_rows::<SessionSummary>(
        &p("sessions.csv"),
        &["session_id", "name", "date_ordinal", "trials", "mean_cer"],
        &report.sessions,
    )?;
    csv_rows::<LengthBin>(
        &p("length_bins.csv"),
        &["lo", "hi", "count", "mean_cer", "std_cer"],
        &report.length.bins,
    )?;
    let rows: Vec<ConfusionRow> = report
        .confusions
        .iter()
        .enumerate()
        .map(|(i, e)| ConfusionRow::from_entry(i + 1, e))
        .collect();
    csv_rows(
        &p("confusions.csv"),
        &["rank", "kind", "ref_char", "hyp_char", "count", "category"],
        &rows,
    )?;

    let mut session_means: Vec<f64> = report.sessions.iter().map(|s| s.mean_cer).collect();
    session_means.sort_by(f64::total_cmp);
    let qs = |q: f64| quantile(&session_means, q);
    let s = &report.summary;
    let summary = SummaryFile {
        split: &report.split,
        micro_cer: s.micro_cer,
        macro_cer: s.macro_cer,
        median_cer: s.median_cer,
        q1_cer: s.q1_cer,
        q3_cer: s.q3_cer,
        iqr_cer: s.iqr_cer,
        utterances: s.utterances,
        total_edits: s.total_edits,
        total_reference_chars: s.total_reference_chars,
        empty_references: s.empty_references,
        session_median_cer: qs(0.5),
        session_iqr_cer: qs(0.75).zip(qs(0.25)).map(|(a, b)| a - b),
        length_bin_width: report.length.bin_width,
        length_fit: report.length.fit,
        top_confusions: rows.iter().take(10).cloned().collect(),
        examples: examples(&report.results),
        averaging_note: AVERAGING_NOTE,
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| EmitError::Encode {
        path: p("summary.json"),
        detail: e.to_string(),
    })?;
    write_file(&p("summary.json"), &json)?;

    let cers: Vec<f64> = report.results.iter().map(|r| r.cer).collect();
    write_file(&p("session_cer.svg"), session_svg(&report.sessions).as_bytes())?;
    write_file(&p("cer_histogram.svg"), cer_histogram_svg(&cers, 20).as_bytes())?;
    write_file(&p("length_cer.svg"), length_svg(&report.length).as_bytes())?;
    Ok(())
}
