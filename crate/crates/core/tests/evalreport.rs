use std::collections::BTreeMap;

use neurodecode::dataio::{Dataset, SessionInfo, Split, TrialRecord};
use neurodecode::evalreport::*;
use neurodecode::model::ModelError;
use neurodecode::Tensor;

struct Echo;
impl TrialDecoder for Echo {
    fn decode(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<Decoded>, ModelError> {
        Ok(indices
            .iter()
            .map(|&i| Decoded {
                hypothesis: data.trials[i].transcript.clone(),
                frames: Vec::new(),
            })
            .collect())
    }
}

struct Silent;
impl TrialDecoder for Silent {
    fn decode(&self, _: &Dataset, indices: &[usize]) -> Result<Vec<Decoded>, ModelError> {
        Ok(vec![
            Decoded {
                hypothesis: String::new(),
                frames: Vec::new()
            };
            indices.len()
        ])
    }
}

fn dataset(texts: &[(&str, usize)]) -> Dataset {
    Dataset {
        channels: 2,
        sessions: vec![
            SessionInfo { id: 0, name: "late".into(), date_ordinal: 20 },
            SessionInfo { id: 1, name: "early".into(), date_ordinal: 10 },
        ],
        trials: texts
            .iter()
            .enumerate()
            .map(|(i, &(t, s))| TrialRecord {
                trial_id: format!("t{i}"),
                session_id: s,
                split: Split::Test,
                features: Tensor::zeros(&[20, 2]),
                transcript: t.to_string(),
            })
            .collect(),
        source: serde_json::Value::Null,
    }
}

fn results(pairs: &[(&str, &str, usize)]) -> Vec<UtteranceResult> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(r, h, s))| UtteranceResult::new(&format!("u{i}"), s, r, h))
        .collect()
}

#[test]
fn perfect_decoder_scores_zero() {
    let d = dataset(&[("hello world", 0), ("abc", 1)]);
    let r = evaluate_split(&Echo, &d, Split::Test).unwrap();
    assert_eq!(r.summary.micro_cer, 0.0);
    assert!(r.confusions.is_empty());
    assert_eq!(r.results.len(), 2);
}

#[test]
fn silent_decoder_deletes_everything() {
    let d = dataset(&[("hello world", 0), ("abc", 1)]);
    let r = evaluate_split(&Silent, &d, Split::Test).unwrap();
    assert!(r.results.iter().all(|u| u.cer == 1.0));
    assert!(r.confusions.iter().all(|c| c.kind == EditKind::Deletion));
    assert_eq!(r.summary.micro_cer, 1.0);
}

#[test]
fn micro_cer_matches_hand_sum() {
    // edits 1 + 2 + 0 over 3 + 5 + 4 characters
    let res = results(&[("cat", "cut", 0), ("hello", "helo!", 0), ("same", "same", 1)]);
    assert_eq!(res.iter().map(|r| r.distance).collect::<Vec<_>>(), vec![1, 2, 0]);
    let s = summarize(&res);
    assert_eq!(s.micro_cer, 3.0 / 12.0);
    let macro_hand = (1.0 / 3.0 + 2.0 / 5.0 + 0.0) / 3.0;
    assert!((s.macro_cer - macro_hand).abs() < 1e-15);
    assert_ne!(s.micro_cer, s.macro_cer);
}

#[test]
fn empty_reference_is_kept_and_flagged() {
    let d = dataset(&[("", 0), ("ab", 0)]);
    let res = evaluate_split(&Echo, &d, Split::Test).unwrap();
    assert_eq!(res.results.len(), 2);
    assert_eq!(res.summary.empty_references, 1);
}

#[test]
fn session_means_in_date_order() {
    let d = dataset(&[]);
    let mut res = results(&[("aaaaaaaaaa", "aaaaaaaaab", 0), ("aaaaaaaaaa", "aaaaaaabbb", 0)]);
    res.extend(results(&[("ab", "ab", 1)]));
    let s = session_summary(&res, &d);
    assert_eq!(s.len(), 2);
    assert_eq!(s[0].name, "early");
    assert_eq!(s[1].session_id, 0);
    assert!((s[1].mean_cer - 0.2).abs() < 1e-15);
}

#[test]
fn session_without_trials_is_omitted() {
    let d = dataset(&[]);
    let s = session_summary(&results(&[("a", "a", 1)]), &d);
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].session_id, 1);
}

#[test]
fn fit_examples() {
    let f = linear_fit(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
    assert!((f.slope - 1.0).abs() < 1e-15 && (f.r_squared - 1.0).abs() < 1e-15);
    let f = linear_fit(&[1.0, 2.0, 3.0], &[0.4, 0.4, 0.4]).unwrap();
    assert_eq!(f.slope, 0.0);
    assert_eq!(f.r_squared, 0.0);
    assert!(linear_fit(&[2.0, 2.0], &[0.1, 0.5]).is_none());
}

#[test]
fn fit_matches_normal_equations() {
    // 20 points; oracle solves the 2x2 normal equations directly
    let xs: Vec<f64> = (0..20).map(|i| 3.0 + i as f64 * 1.7).collect();
    let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| 0.02 * x + 0.1 + ((i * 7 % 5) as f64 - 2.0) * 0.03).collect();
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    let f = linear_fit(&xs, &ys).unwrap();
    assert!((f.slope - slope).abs() <= 1e-10);
    assert!((f.intercept - intercept).abs() <= 1e-10);
}

#[test]
fn length_bins_of_five() {
    let res = results(&[("abcd", "abcd", 0), ("abcde", "abcdx", 0), ("abcdefg", "abcdefx", 0), ("", "x", 0)]);
    let l = length_analysis(&res, 5);
    assert_eq!(l.bins.len(), 2);
    assert_eq!((l.bins[0].lo, l.bins[0].hi, l.bins[0].count), (0, 4, 1));
    assert_eq!(l.bins[1].count, 2);
    let m = (0.2 + 1.0 / 7.0) / 2.0;
    assert!((l.bins[1].mean_cer - m).abs() < 1e-15);
    assert!(l.fit.is_some());
}

#[test]
fn boundary_categories() {
    let c = confusion_table(&results(&[("a b", "ab", 0)]), None);
    assert_eq!(c.len(), 1);
    assert_eq!((c[0].kind, c[0].ref_char, c[0].hyp_char), (EditKind::Deletion, Some(' '), None));
    assert_eq!(c[0].category, ConfusionCategory::DeletionOfBoundary);

    let c = confusion_table(&results(&[("ab", "a b", 0)]), None);
    assert_eq!((c[0].kind, c[0].hyp_char), (EditKind::Insertion, Some(' ')));
    assert_eq!(c[0].category, ConfusionCategory::InsertionIntoWord);

    assert_eq!(ConfusionCategory::of(Some(' '), Some('e')), ConfusionCategory::DeletionOfBoundary);
    assert_eq!(ConfusionCategory::of(Some('e'), Some(' ')), ConfusionCategory::InsertionIntoWord);
    assert_eq!(ConfusionCategory::of(Some('e'), Some('a')), ConfusionCategory::Other);
    assert_eq!(ConfusionCategory::of(Some('e'), None), ConfusionCategory::Other);
}

#[test]
fn confusion_counts_match_hand_tally() {
    let res = results(&[
        ("the cat", "the cut", 0),  // a->u
        ("a b", "ab", 0),           // del space
        ("cat", "cut", 0),          // a->u
        ("dog", "dogs", 0),         // ins s
        ("ab cd", "abxcd", 0),      // space->x
    ]);
    let c = confusion_table(&res, None);
    let mut tally: BTreeMap<(Option<char>, Option<char>), usize> = BTreeMap::new();
    for e in &c {
        tally.insert((e.ref_char, e.hyp_char), e.count);
    }
    let expected: BTreeMap<_, _> = [
        ((Some('a'), Some('u')), 2),
        ((Some(' '), None), 1),
        ((None, Some('s')), 1),
        ((Some(' '), Some('x')), 1),
    ]
    .into_iter()
    .collect();
    assert_eq!(tally, expected);
    assert_eq!((c[0].ref_char, c[0].count), (Some('a'), 2));
    // ties by pair: None < Some, then character order
    let tail: Vec<_> = c[1..].iter().map(|e| (e.ref_char, e.hyp_char)).collect();
    assert_eq!(tail, vec![(None, Some('s')), (Some(' '), None), (Some(' '), Some('x'))]);
    let total: usize = c.iter().map(|e| e.count).sum();
    assert_eq!(total, res.iter().map(|r| r.distance).sum::<usize>());
    assert_eq!(confusion_table(&res, Some(2)).len(), 2);
}

fn read_csv(path: &std::path::Path) -> (Vec<String>, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().iter().map(String::from).collect();
    (h, r.records().map(|x| x.unwrap()).collect())
}

#[test]
fn empty_results_emit_header_only_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = build_report("test", Vec::new(), &dataset(&[]));
    emit_report(&report, dir.path()).unwrap();
    for f in REPORT_FILES {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let (h, rows) = read_csv(&dir.path().join("utterances.csv"));
    assert_eq!(h[0], "trial_id");
    assert!(rows.is_empty());
    let (h, rows) = read_csv(&dir.path().join("confusions.csv"));
    assert_eq!(h.len(), 6);
    assert!(rows.is_empty());
}

fn sample_report() -> EvalReport {
    let d = dataset(&[]);
    let res = results(&[
        ("hello world", "helo wrld", 0),
        ("the quick, brown fox", "thequick, brown \"fox\"", 1),
        ("a b c", "abc", 0),
        ("", "x", 1),
        ("jump over", "jumpover it", 0),
    ]);
    build_report("test", res, &d)
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let report = sample_report();
    emit_report(&report, dir.path()).unwrap();
    let back: Vec<UtteranceResult> = csv::Reader::from_path(dir.path().join("utterances.csv"))
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect();
    assert_eq!(back, report.results);
    let back: Vec<SessionSummary> = csv::Reader::from_path(dir.path().join("sessions.csv"))
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect();
    assert_eq!(back, report.sessions);
    let back: Vec<LengthBin> = csv::Reader::from_path(dir.path().join("length_bins.csv"))
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect();
    assert_eq!(back, report.length.bins);
    let back: Vec<ConfusionEntry> = csv::Reader::from_path(dir.path().join("confusions.csv"))
        .unwrap()
        .deserialize::<ConfusionRow>()
        .map(|r| r.unwrap().to_entry())
        .collect();
    assert_eq!(back, report.confusions);
    let text = std::fs::read_to_string(dir.path().join("confusions.csv")).unwrap();
    assert!(text.contains("[SP]"));
    assert!(!text.contains('\r'));
}

#[test]
fn emission_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&sample_report(), a.path()).unwrap();
    emit_report(&sample_report(), b.path()).unwrap();
    for f in REPORT_FILES {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn svgs_parse_as_xml() {
    let dir = tempfile::tempdir().unwrap();
    emit_report(&sample_report(), dir.path()).unwrap();
    let empty = tempfile::tempdir().unwrap();
    emit_report(&build_report("test", Vec::new(), &dataset(&[])), empty.path()).unwrap();
    for d in [dir.path(), empty.path()] {
        for f in REPORT_FILES.iter().filter(|f| f.ends_with(".svg")) {
            let text = std::fs::read_to_string(d.join(f)).unwrap();
            let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{f}: {e}"));
            assert_eq!(doc.root_element().tag_name().name(), "svg");
        }
    }
}

#[test]
fn summary_json_has_both_averages() {
    let dir = tempfile::tempdir().unwrap();
    let report = sample_report();
    emit_report(&report, dir.path()).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(v["micro_cer"].as_f64().unwrap(), report.summary.micro_cer);
    assert_eq!(v["macro_cer"].as_f64().unwrap(), report.summary.macro_cer);
    assert!(v["averaging_note"].is_string());
    assert_eq!(v["examples"].as_array().unwrap().len(), 3);
}
