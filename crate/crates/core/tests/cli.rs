mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crnn_gan::features::song_to_events;
use crnn_gan::metrics::MetricsReport;
use crnn_gan::midi::parse_midi;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crnn-gan")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fs::create_dir(&corpus).unwrap();
    common::write_walk_fixture(&corpus, 3, 48, 4);
    dir
}

const SMALL: &str = "hidden = 8\nbatch_size = 4\npretrain_epochs = 2\nsample_length = 16\n";

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let conf = dir.join("small.conf");
    fs::write(&conf, SMALL).unwrap();
    let corpus = dir.join("corpus");
    let out = dir.join(out);
    let mut args = vec!["train", "--config", p(&conf), "--corpus-dir", p(&corpus), "--out", p(&out)];
    args.extend_from_slice(extra);
    bin(&args)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn ingest_counts_songs_and_is_reproducible() {
    let dir = fixture();
    let cache = dir.path().join("corpus.bin");
    let stdout = ok(&["ingest", "--corpus-dir", p(&dir.path().join("corpus")), "--cache", p(&cache)]);
    assert!(stdout.contains("songs: 3"), "{stdout}");
    let first = fs::read(&cache).unwrap();
    ok(&["ingest", "--corpus-dir", p(&dir.path().join("corpus")), "--cache", p(&cache)]);
    assert_eq!(fs::read(&cache).unwrap(), first);
}

#[test]
fn ingest_of_empty_directory_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["ingest", "--corpus-dir", p(dir.path()), "--cache", p(&dir.path().join("c.bin"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no usable MIDI files"));
}

#[test]
fn train_writes_reproducible_logs() {
    let dir = fixture();
    for out in ["a", "b"] {
        let o = train(dir.path(), out, &["--seed", "7", "--epochs", "2", "--preset", "desk"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a/epochs.csv")).unwrap();
    assert_eq!(csv_rows(&dir.path().join("a/epochs.csv")).len(), 2);
    assert_eq!(a, fs::read(dir.path().join("b/epochs.csv")).unwrap());
    assert_eq!(fs::read(dir.path().join("a/latest.ckpt")).unwrap(), fs::read(dir.path().join("b/latest.ckpt")).unwrap());
}

#[test]
fn generator_objective_sign_follows_the_objective() {
    let dir = fixture();
    assert!(train(dir.path(), "fm", &["--epochs", "2"]).status.success());
    assert!(train(dir.path(), "plain", &["--epochs", "2", "--no-feature-matching"]).status.success());
    for row in csv_rows(&dir.path().join("fm/epochs.csv")) {
        assert!(row[2].parse::<f64>().unwrap() >= 0.0);
    }
    for row in csv_rows(&dir.path().join("plain/epochs.csv")) {
        assert!(row[2].parse::<f64>().unwrap() <= 0.0);
    }
}

#[test]
fn resume_refuses_a_different_architecture() {
    let dir = fixture();
    assert!(train(dir.path(), "run", &["--epochs", "1"]).status.success());
    let conf = dir.path().join("wide.conf");
    fs::write(&conf, SMALL.replace("hidden = 8", "hidden = 12")).unwrap();
    let out = bin(&[
        "train",
        "--config",
        p(&conf),
        "--corpus-dir",
        p(&dir.path().join("corpus")),
        "--out",
        p(&dir.path().join("run")),
        "--epochs",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn baseline_logs_every_epoch() {
    let dir = fixture();
    assert!(train(dir.path(), "base", &["--epochs", "1", "--baseline"]).status.success());
    let rows = csv_rows(&dir.path().join("base/epochs.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[1] == "NaN"));
}

#[test]
fn generate_is_reproducible_and_matches_evaluate() {
    let dir = fixture();
    assert!(train(dir.path(), "run", &["--epochs", "1"]).status.success());
    let ckpt = dir.path().join("run/latest.ckpt");
    let (g1, g2) = (dir.path().join("g1"), dir.path().join("g2"));
    for out in [&g1, &g2] {
        ok(&["generate", "--checkpoint", p(&ckpt), "--count", "3", "--length", "24", "--seed", "5", "--out", p(out)]);
    }
    let mut names: Vec<_> = fs::read_dir(&g1).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    let rows = csv_rows(&g1.join("metrics.csv"));
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        let file = g1.join(&row[0]);
        let bytes = fs::read(&file).unwrap();
        assert_eq!(bytes, fs::read(g2.join(&row[0])).unwrap());
        assert_eq!(&bytes[8..10], &[0, 0], "format 0");
        let song = parse_midi(&bytes).unwrap();
        let report = MetricsReport::evaluate(&song_to_events(&song));
        assert_eq!(row[1..].to_vec(), report.csv_fields().to_vec(), "sample {i}");
    }
    let eval = ok(&["evaluate", p(&g1.join("sample-001.mid"))]);
    let line = eval.lines().nth(1).unwrap();
    assert_eq!(line.split(',').skip(1).collect::<Vec<_>>(), rows[0][1..].to_vec());
}

#[test]
fn evaluate_fixtures_and_corrupt_input() {
    let dir = tempfile::tempdir().unwrap();
    let major = dir.path().join("major.mid");
    let chromatic = dir.path().join("chromatic.mid");
    let corrupt = dir.path().join("corrupt.mid");
    common::write_midi(&major, &common::melody(&[60, 62, 64, 65, 67, 69, 71]));
    common::write_midi(&chromatic, &common::melody(&(60..72).collect::<Vec<_>>()));
    fs::write(&corrupt, b"MThd\x00\x00\x00\x06garbage").unwrap();

    let out = bin(&["evaluate", p(&major), p(&chromatic), p(&corrupt)]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 4, "{stdout}");
    assert_eq!(lines[1].split(',').nth(2), Some("1"));
    assert_eq!(lines[2].split(',').nth(2).unwrap().parse::<f64>().unwrap(), 7.0 / 12.0);
    assert!(lines[3].starts_with("mean,"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warnings: 1"));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let stdout = ok(&["gradcheck"]);
    for name in ["L_D:", "L_G:", "L_G_feature_matching:", "MSE:"] {
        assert!(stdout.contains(name), "{stdout}");
    }
    let bad = bin(&["gradcheck", "--corrupt-gradient"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(bin(&["train", "--tones-per-step", "2", "--corpus-dir", "."]).status.code(), Some(2));
    assert_eq!(bin(&["train"]).status.code(), Some(2));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
}
