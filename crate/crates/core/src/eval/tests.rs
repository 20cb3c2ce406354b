use super::*;
use crate::dataset::{EmotionLabel, Modality, ScaleTier};
use crate::vecstore::{AlignedStore, IdIndex, ModalityStore};
use proptest::prelude::*;
use std::sync::Arc;

#[test]
fn three_class_example() {
    // per-class correct/total: 8/10, 5/5, 2/5
    let mut truth = Vec::new();
    let mut preds = Vec::new();
    for (class, correct, total) in [(0, 8, 10), (1, 5, 5), (2, 2, 5)] {
        for i in 0..total {
            truth.push(class);
            preds.push(if i < correct { class } else { (class + 1) % 3 });
        }
    }
    let cm = confusion(&preds, &truth).unwrap();
    assert_eq!(weighted_accuracy(&cm).unwrap(), 75.0);
    let ua = unweighted_accuracy(&cm).unwrap();
    assert!((ua - 220.0 / 3.0).abs() < 1e-12);
    assert_eq!(format!("{ua:.2}"), "73.33");
    assert_eq!(cm.recalls()[3], None);
}

#[test]
fn empty_or_mismatched_inputs() {
    let cm = confusion(&[], &[]).unwrap();
    assert!(weighted_accuracy(&cm).is_err());
    assert!(unweighted_accuracy(&cm).is_err());
    assert!(confusion(&[0], &[0, 1]).is_err());
    assert!(confusion(&[6], &[0]).is_err());
    assert_eq!(accuracy_pct(&[], &[]), 0.0);
}

proptest! {
    #[test]
    fn metrics_match_direct_tallies(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..200)) {
        let (preds, truth): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = confusion(&preds, &truth).unwrap();
        let correct = pairs.iter().filter(|(p, t)| p == t).count();
        prop_assert!((weighted_accuracy(&cm).unwrap() - 100.0 * correct as f64 / pairs.len() as f64).abs() < 1e-12);
        let mut recalls = Vec::new();
        for c in 0..6 {
            let n = truth.iter().filter(|t| **t == c).count();
            if n > 0 {
                let hit = pairs.iter().filter(|(p, t)| *t == c && *p == c).count();
                recalls.push(hit as f64 / n as f64);
            }
        }
        let ua = 100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64;
        prop_assert!((unweighted_accuracy(&cm).unwrap() - ua).abs() < 1e-9);
        prop_assert_eq!(cm.total() as usize, pairs.len());
    }

    #[test]
    fn balanced_support_makes_wa_equal_ua(per in 1usize..20, preds in prop::collection::vec(0usize..6, 120)) {
        let truth: Vec<usize> = (0..6).flat_map(|c| std::iter::repeat_n(c, per)).collect();
        let preds = &preds[..truth.len()];
        let cm = confusion(preds, &truth).unwrap();
        prop_assert!((weighted_accuracy(&cm).unwrap() - unweighted_accuracy(&cm).unwrap()).abs() < 1e-9);
    }
}

fn grid(name: &str, per_condition: &[(&str, &[(f64, f64)])]) -> RunGrid {
    let mut g = RunGrid::new(name);
    for (code, runs) in per_condition {
        for &(wa, ua) in *runs {
            g.push(code.parse().unwrap(), Metrics { wa, ua });
        }
    }
    g
}

#[test]
fn summaries_use_sample_std() {
    let g = grid(
        "x",
        &[
            ("a", &[(60.0, 50.0), (64.0, 54.0)]),
            ("v", &[(40.0, 30.0), (44.0, 38.0)]),
        ],
    );
    let a = g.cell("a".parse().unwrap()).unwrap();
    assert_eq!((a.wa_mean, a.ua_mean), (62.0, 52.0));
    assert!((a.wa_std - 8f64.sqrt()).abs() < 1e-12);
    let avg = g.avg().unwrap();
    assert_eq!(avg.wa_mean, 52.0);
    assert_eq!(avg.ua_mean, 43.0);
    // per-run averages 50 and 54
    assert!((avg.wa_std - 8f64.sqrt()).abs() < 1e-12);
    assert_eq!(g.run_count(), 2);
    assert_eq!(
        g.mean_wa(&["a".parse().unwrap(), "l".parse().unwrap()]),
        Some(62.0)
    );
    let single = grid("y", &[("l", &[(10.0, 20.0)])]);
    assert_eq!(single.cell("l".parse().unwrap()).unwrap().wa_std, 0.0);
}

#[test]
fn markdown_has_all_columns() {
    let g = grid(
        "ramer",
        &[("a", &[(61.234, 50.0)]), ("vl", &[(70.0, 65.5)])],
    );
    let md = render_markdown(&[g, RunGrid::new("empty")]);
    let lines: Vec<&str> = md.lines().collect();
    assert_eq!(lines.len(), 4);
    for l in &lines {
        assert_eq!(l.matches('|').count(), 17, "{l}");
    }
    assert!(lines[0].contains("| a WA | a UA |") && lines[0].contains("Avg WA"));
    assert!(lines[2].contains("61.23 ± 0.00"));
    assert!(lines[2].contains(" - | - |"));
    assert!(lines[2].contains("| 70.00 ± 0.00 | 65.50 ± 0.00 |"));
}

#[test]
fn csv_round_trips() {
    let g = grid(
        "top,k",
        &[
            ("a", &[(61.0, 50.0), (63.0, 52.0)]),
            ("av", &[(70.0, 65.0), (72.0, 66.0)]),
        ],
    );
    let csv = render_csv(std::slice::from_ref(&g));
    assert!(csv.lines().all(|l| l.split(',').count() == 30));
    let rows = parse_csv_report(&csv).unwrap();
    assert_eq!(rows.len(), 1);
    let (name, runs, vals) = &rows[0];
    assert_eq!((name.as_str(), *runs), ("top;k", 2));
    assert_eq!(vals[0], Some(62.0));
    assert_eq!(vals[1], Some(51.0));
    assert_eq!(vals[2], None);
    assert_eq!(vals[12], Some(66.5));
    assert_eq!(vals[14], Some(1.41));
    assert!(parse_csv_report("nope\n").is_err());
}

#[test]
fn empty_grid_list_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    emit_report(&[], ReportFormat::Csv, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(parse_csv_report(&text).unwrap().is_empty());
    assert_eq!(
        "MD".parse::<ReportFormat>().unwrap(),
        ReportFormat::Markdown
    );
    assert!("xls".parse::<ReportFormat>().is_err());
}

fn tiny_store(n: usize) -> AlignedStore {
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
    let index = Arc::new(IdIndex::new(ids).unwrap());
    let hidden = Modality::ALL.map(|m| {
        let data: Vec<f32> = (0..n * 2).map(|i| (i + m.index()) as f32 + 1.0).collect();
        ModalityStore::new(m, 2, index.clone(), data).unwrap()
    });
    let labels = (0..n).map(|i| EmotionLabel::from_code(i % 7)).collect();
    AlignedStore::new(index, labels, hidden, ScaleTier::Small, String::new()).unwrap()
}

#[test]
fn export_writes_seeded_rows() {
    let dir = tempfile::tempdir().unwrap();
    let store = tiny_store(10);
    let path = dir.path().join("h.csv");
    export_hidden_csv(&store, 0, 1, &path).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "modality,id,label,h0,h1\n"
    );

    export_hidden_csv(&store, 10, 1, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 31);
    assert_eq!(lines[1], "audio,s000,Happy,1,2");
    assert_eq!(lines[11], "video,s000,Happy,2,3");
    // sample 6 is unlabeled
    assert!(lines.iter().any(|l| l.starts_with("text,s006,,")));

    export_hidden_csv(&store, 4, 9, &path).unwrap();
    let a = std::fs::read_to_string(&path).unwrap();
    export_hidden_csv(&store, 4, 9, &path).unwrap();
    assert_eq!(a, std::fs::read_to_string(&path).unwrap());
    let ids: Vec<Vec<&str>> = ["audio", "video", "text"]
        .iter()
        .map(|m| {
            a.lines()
                .filter(|l| l.starts_with(m))
                .map(|l| l.split(',').nth(1).unwrap())
                .collect()
        })
        .collect();
    assert_eq!(ids[0].len(), 4);
    assert!(ids.iter().all(|v| *v == ids[0]));
    assert!(export_hidden_csv(&store, 11, 1, &path).is_err());
}

#[test]
fn ablation_specs_are_unique() {
    for full in [false, true] {
        let specs = default_ablation_specs(full);
        let names: std::collections::BTreeSet<_> = specs.iter().map(|s| s.name.clone()).collect();
        assert_eq!(names.len(), specs.len());
        assert_eq!(specs.len(), if full { 4 + 16 } else { 4 + 6 });
    }
    let cfg = EvalConfig {
        conditions: vec!["avl".parse().unwrap()],
        ..EvalConfig::default()
    };
    assert!(cfg.validate().is_err());
}
