use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segscape::graph::{build_hierarchy, horizontal_cut, Criterion, CutConfig, GradientImage};
use segscape::session::{
    evaluate, mask_from_region_labels, oracle_majority_labels, EvalMode, LabelMask, ProviderSpec, Session,
};
use segscape::testkit::piecewise_scene;

fn segscape(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segscape"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = segscape(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Writes `count` scenes into `dir`, ground truth under `dir/gt`.
fn scenes(dir: &Path, count: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    (0..count)
        .map(|i| {
            let regions = rng.random_range(4..=8);
            let scene = piecewise_scene(24, 24, regions, 0.05, &mut rng);
            let name = format!("img{i:02}");
            scene.write(dir, &name).unwrap();
            name
        })
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `mode -> (mean, median)` rows of a summary table.
fn summary(tsv: &str) -> Vec<(String, f64, f64)> {
    let mut lines = tsv.lines();
    assert_eq!(lines.next(), Some("mode\tmean\tmedian\timages"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_owned(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn unknown_flag_exits_two_with_usage() {
    let out = segscape(&["partition", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(segscape(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn partition_records_cut_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    scenes(dir.path(), 2);
    let session = dir.path().join("session");
    let out = ok(&["partition", "--images", s(dir.path()), "--criterion", "volume", "--threshold", "1000", "--session", s(&session)]);
    assert!(out.starts_with("image\tsegments\n"));
    let loaded = Session::load(&session).unwrap();
    for id in loaded.image_ids() {
        assert_eq!(loaded.cut(&id).unwrap(), CutConfig::new(Criterion::Volume, 1000.0).unwrap());
    }
    assert!(session.join("segments.fsrl").is_file());

    // Defaults match the explicit flags.
    let default = dir.path().join("default");
    ok(&["partition", "--images", s(dir.path()), "--session", s(&default)]);
    let d = Session::load(&default).unwrap();
    assert_eq!(d.cut("img00").unwrap(), loaded.cut("img00").unwrap());
}

#[test]
fn bad_inputs_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("session");
    let out = segscape(&["partition", "--images", s(dir.path()), "--session", s(&session)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no .png images"));

    scenes(dir.path(), 1);
    let out = segscape(&["partition", "--images", s(dir.path()), "--threshold=-3", "--session", s(&session)]);
    assert_eq!(out.status.code(), Some(1));
    let out = segscape(&["partition", "--images", s(dir.path()), "--provider", "file", "--session", s(&session)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--feature-file"));
    let out = segscape(&["project", "--session", s(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracle_eval_matches_library_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let names = scenes(dir.path(), 5);
    let gt_dir = dir.path().join("gt");
    let out = ok(&["oracle-eval", "--images", s(dir.path()), "--gt", s(&gt_dir), "--threshold", "10"]);
    let rows = summary(&out);
    assert_eq!(rows.len(), 3);

    let cut = CutConfig::new(Criterion::Volume, 10.0).unwrap();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for n in &names {
        let g = GradientImage::load(&dir.path().join(format!("{n}.fsgr"))).unwrap();
        let part = horizontal_cut(&build_hierarchy(&g, cut.criterion).unwrap(), cut.threshold).unwrap();
        let gt = LabelMask::load_png(&gt_dir.join(format!("{n}.png")), n.as_str()).unwrap();
        let labels = oracle_majority_labels(&part, &gt).unwrap();
        preds.push(mask_from_region_labels(n, &part, &labels).unwrap());
        gts.push(gt);
    }
    for (mode, (name, mean, median)) in EvalMode::ALL.iter().zip(&rows) {
        let m = evaluate(&preds, &gts, *mode).unwrap();
        assert_eq!(name, mode.as_str());
        assert_eq!((*mean, *median), (m.mean, m.median), "{name}");
    }

    let per = ok(&["oracle-eval", "--images", s(dir.path()), "--gt", s(&gt_dir), "--threshold", "10", "--mode", "instance-iou", "--per-image"]);
    let lines: Vec<&str> = per.lines().collect();
    assert_eq!(lines[0], "image\tinstance-iou");
    assert_eq!(lines.len(), names.len() + 1);
}

#[test]
fn features_from_file_provider() {
    let dir = tempfile::tempdir().unwrap();
    scenes(dir.path(), 2);
    let session = dir.path().join("session");
    ok(&["partition", "--images", s(dir.path()), "--session", s(&session)]);
    let table = dir.path().join("features.fsaf");
    let out = ok(&["features", "--session", s(&session), "--out", s(&table)]);
    let before = Session::load(&session).unwrap();
    assert!(out.contains(&format!("{}\t{}", before.segment_count(), before.feature_dimension())));

    ok(&["features", "--session", s(&session), "--provider", "file", "--feature-file", s(&table)]);
    let after = Session::load(&session).unwrap();
    assert_eq!(after.provider(), &ProviderSpec::File(table));
    let f = |x: &Session| x.segments().map(|s| s.features.clone()).collect::<Vec<_>>();
    assert_eq!(f(&before), f(&after));
}

#[test]
fn gt_constrained_export_reproduces_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let names = scenes(dir.path(), 3);
    let session = dir.path().join("session");
    let gt_dir = dir.path().join("gt");
    ok(&["partition", "--images", s(dir.path()), "--threshold", "100", "--session", s(&session)]);
    let out = ok(&["gt-constrain", "--session", s(&session), "--gt", s(&gt_dir), "--label"]);
    assert_eq!(out.lines().count(), names.len() + 1);
    let masks = dir.path().join("masks");
    let written = ok(&["export-masks", "--session", s(&session), "--out", s(&masks)]);
    assert!(written.lines().count() >= names.len());
    let rows = summary(&ok(&["iou", "--pred", s(&masks), "--gt", s(&gt_dir), "--mode", "agreement"]));
    assert_eq!(rows, vec![("agreement".to_owned(), 1.0, 1.0)]);
}

#[test]
fn label_project_train_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    scenes(dir.path(), 4);
    let session = dir.path().join("session");
    let gt_dir = dir.path().join("gt");
    ok(&["partition", "--images", s(dir.path()), "--threshold", "10", "--session", s(&session)]);
    let out = ok(&["project", "--session", s(&session), "--batch", "2"]);
    let shown_first: usize = out.trim().split('\t').nth(1).unwrap().parse().unwrap();
    assert!(shown_first > 0);
    ok(&["label", "--session", s(&session), "--gt", s(&gt_dir)]);
    let head = dir.path().join("head.fsmh");
    let losses = ok(&["train", "--session", s(&session), "--epochs", "2", "--out", s(&head)]);
    let lines: Vec<&str> = losses.lines().collect();
    assert_eq!(lines[0], "epoch\tloss");
    assert_eq!(lines.len(), 3);
    assert!(head.is_file());

    let layout = dir.path().join("layout.json");
    ok(&["project", "--session", s(&session), "--out", s(&layout)]);
    let loaded = Session::load(&session).unwrap();
    assert_eq!(loaded.shown_keys().len(), loaded.segment_count());
    assert_eq!(segscape::projector::read_layout_json(&layout).unwrap(), loaded.layout_points());

    let count: usize = ok(&["label", "--session", s(&session), "--rect", "-1e9", "-1e9", "1e9", "1e9", "--label", "1"])
        .trim()
        .split('\t')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(count, loaded.segment_count());
}

#[test]
fn serve_fails_on_busy_port() {
    let dir = tempfile::tempdir().unwrap();
    scenes(dir.path(), 1);
    let session: PathBuf = dir.path().join("session");
    ok(&["partition", "--images", s(dir.path()), "--session", s(&session)]);
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = segscape(&["serve", "--session", s(&session), "--port", &port]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("serving on"));
}
