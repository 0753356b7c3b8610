use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn arloss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arloss")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn value(o: &Output, key: &str) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
        .unwrap_or_else(|| panic!("no {key} in {}", stdout(o)))
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_pgm(path: &Path, w: usize, h: usize, px: impl Fn(usize, usize) -> u8) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        for c in 0..w {
            bytes.push(px(r, c));
        }
    }
    fs::write(path, bytes).unwrap();
}

fn ppm_pixels(path: &Path) -> Vec<[u8; 3]> {
    let bytes = fs::read(path).unwrap();
    let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
    bytes[header_end..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

#[test]
fn loss_matches_golden_report() {
    let o = arloss(&["loss", s(&golden("loss_fixture.arsg")), s(&golden("loss_fixture.pgm")), "--scales", "4,2"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o), fs::read_to_string(golden("loss_fixture.txt")).unwrap());
}

#[test]
fn loss_with_zero_lambda_reports_total_equal_to_ce() {
    let o = arloss(&[
        "loss",
        s(&golden("loss_fixture.arsg")),
        s(&golden("loss_fixture.pgm")),
        "--scales",
        "4,2",
        "--lambda",
        "0",
    ]);
    assert!(o.status.success());
    assert_eq!(value(&o, "total"), value(&o, "ce"));
}

#[test]
fn loss_rejects_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("small.pgm");
    write_pgm(&pgm, 4, 4, |_, _| 0);
    let o = arloss(&["loss", s(&golden("loss_fixture.arsg")), s(&pgm), "--scales", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn loss_of_perfect_prediction_is_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = (8, 8);
    let label = |r: usize, _c: usize| u8::from(r >= 4);
    let pgm = dir.path().join("labels.pgm");
    write_pgm(&pgm, w, h, label);
    let mut bytes = b"ARSG\x01".to_vec();
    for d in [2u32, h as u32, w as u32] {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for k in 0..2u8 {
        for r in 0..h {
            for c in 0..w {
                let v: f64 = if label(r, c) == k { 50.0 } else { -50.0 };
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let grid = dir.path().join("scores.arsg");
    fs::write(&grid, bytes).unwrap();
    let o = arloss(&["loss", s(&grid), s(&pgm), "--scales", "4,2"]);
    assert!(o.status.success(), "{o:?}");
    assert!(value(&o, "ar").parse::<f64>().unwrap() <= 1e-6);
}

#[test]
fn affinity_of_constant_image_is_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("flat.pgm");
    write_pgm(&pgm, 16, 16, |_, _| 3);
    let csv = dir.path().join("m.csv");
    let o = arloss(&["affinity", s(&pgm), "--scales", "4,2", "--out", s(&csv)]);
    assert!(o.status.success(), "{o:?}");
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 20);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.split(',').all(|v| v.parse::<f64>().unwrap() == 1.0)));
    let px = ppm_pixels(&csv.with_extension("ppm"));
    assert_eq!(px.len(), 400);
    assert!(px.iter().all(|&p| p == [255, 0, 0]));
}

#[test]
fn affinity_of_two_bands_is_block_structured() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("bands.pgm");
    write_pgm(&pgm, 8, 8, |_, c| if c < 4 { 1 } else { 2 });
    let csv = dir.path().join("m.csv");
    assert!(arloss(&["affinity", s(&pgm), "--scales", "4", "--out", s(&csv)]).status.success());
    // Samples on a 4x4 grid sit at columns 1, 3, 5, 7: the first two of each row are in band 1.
    let band = |j: usize| (j % 4) < 2;
    let text = fs::read_to_string(&csv).unwrap();
    for (i, row) in text.lines().skip(1).enumerate() {
        for (j, v) in row.split(',').enumerate() {
            let expected = if band(i) == band(j) { 1.0 } else { 0.0 };
            assert_eq!(v.parse::<f64>().unwrap(), expected, "({i},{j})");
        }
    }
}

#[test]
fn affinity_of_fully_ignored_image_is_masked_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("void.pgm");
    write_pgm(&pgm, 8, 8, |_, _| 255);
    let csv = dir.path().join("m.csv");
    let o = arloss(&["affinity", s(&pgm), "--scales", "2", "--out", s(&csv)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert!(ppm_pixels(&csv.with_extension("ppm")).iter().all(|&p| p == [128, 128, 128]));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.lines().skip(1).all(|r| r.split(',').all(|v| v == "nan")));
}

#[test]
fn affinity_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let missing = dir.path().join("missing.pgm");
    assert_eq!(arloss(&["affinity", s(&missing), "--out", s(&out)]).status.code(), Some(1));
    let junk = dir.path().join("junk.pgm");
    fs::write(&junk, b"not an image").unwrap();
    assert_eq!(arloss(&["affinity", s(&junk), "--out", s(&out)]).status.code(), Some(1));
    let small = dir.path().join("small.pgm");
    write_pgm(&small, 4, 4, |_, _| 0);
    assert_eq!(arloss(&["affinity", s(&small), "--scales", "8", "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(arloss(&[]).status.code(), Some(1));
    assert_eq!(arloss(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(arloss(&["gradcheck", "--scales", "4,x"]).status.code(), Some(1));
    assert_eq!(arloss(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_passes_and_fails_with_exit_codes() {
    let o = arloss(&["gradcheck", "--seed", "5", "--channels", "4", "--height", "9", "--width", "7", "--with-ignore"]);
    assert!(o.status.success(), "{}", stdout(&o));
    for name in ["sum", "quadratic", "ce", "ar", "total"] {
        assert_eq!(value(&o, &format!("{name}.passed")), "true");
    }
    let o = arloss(&["gradcheck", "--tolerance", "1e-15"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(value(&o, "passed"), "false");
}

#[test]
fn train_toy_reference_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = arloss(&["train-toy", "--out", s(&out)]);
    assert!(o.status.success(), "{o:?}");
    assert!(value(&o, "trend_p_value").parse::<f64>().unwrap() < 1e-3);
    for f in ["trace.csv", "prediction.pgm", "label_affinity.ppm", "affinity_warmup.ppm", "affinity_final.ppm"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1001);
    assert!(!trace.contains('\r'));

    let trend = arloss(&["trend", s(&out.join("trace.csv")), "--column", "ar_loss", "--skip", "300"]);
    assert!(trend.status.success());
    assert_eq!(value(&trend, "n"), "700");
    assert_eq!(value(&trend, "p_value"), value(&o, "trend_p_value"));

    let again = dir.path().join("again");
    assert!(arloss(&["train-toy", "--out", s(&again)]).status.success());
    for f in ["trace.csv", "label_affinity.ppm", "affinity_warmup.ppm", "affinity_final.ppm"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_toy_zero_steps_writes_empty_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = arloss(&["train-toy", "--steps", "0", "--out", s(dir.path())]);
    assert!(o.status.success());
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);
}

#[test]
fn train_toy_zero_lambda_still_renders() {
    let dir = tempfile::tempdir().unwrap();
    let o = arloss(&["train-toy", "--steps", "50", "--warmup", "10", "--lambda", "0", "--out", s(dir.path())]);
    assert!(o.status.success(), "{o:?}");
    let px = ppm_pixels(&dir.path().join("affinity_final.ppm"));
    assert_eq!(px.len(), 80 * 80);
}

#[test]
fn train_toy_divergence_exits_two_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = arloss(&["train-toy", "--precision", "f32", "--lr", "1e300", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,phase,"));
}

#[test]
fn heatmap_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    fs::write(&csv, "c0,c1\n1,0\n0.5,nan\n").unwrap();
    let ppm = dir.path().join("m.ppm");
    let o = arloss(&["heatmap", s(&csv), "--out", s(&ppm)]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(ppm_pixels(&ppm), vec![[255, 0, 0], [0, 0, 255], [128, 0, 127], [128, 128, 128]]);
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "c0,c1\n1,0\n").unwrap();
    assert_eq!(arloss(&["heatmap", s(&bad), "--out", s(&ppm)]).status.code(), Some(1));
}

#[test]
fn trend_on_plain_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("y.csv");
    let body: String = (0..40).map(|i| format!("{}\n", 3.0 - 0.25 * i as f64)).collect();
    fs::write(&csv, body).unwrap();
    let o = arloss(&["trend", s(&csv)]);
    assert!(o.status.success(), "{o:?}");
    assert!((value(&o, "slope").parse::<f64>().unwrap() + 0.25).abs() < 1e-10);
    assert!((value(&o, "intercept").parse::<f64>().unwrap() - 3.0).abs() < 1e-10);
    assert_eq!(value(&o, "degenerate"), "ExactFit");
}
