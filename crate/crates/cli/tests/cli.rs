use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use halftrack::dataio::Layout;
use halftrack::synthetic::{market_like, to_orlib_text, to_price_panel};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_halftrack"));
    c.env("HALFTRACK_LOG", "error");
    c
}

fn write_data(dir: &Path, name: &str, t: usize, n: usize, layout: Layout) -> PathBuf {
    let panel = to_price_panel(&market_like(t, n, 1e-3, 17)).unwrap();
    let p = dir.join(format!("{name}.txt"));
    fs::write(&p, to_orlib_text(&panel, layout)).unwrap();
    p
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output {
        status,
        stdout,
        stderr,
    } = cmd.output().unwrap();
    (
        status.code().unwrap_or(-1),
        String::from_utf8(stdout).unwrap(),
        String::from_utf8(stderr).unwrap(),
    )
}

#[test]
fn parse_reports_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_data(dir.path(), "panel", 40, 9, Layout::SeriesIndexLast);
    let (code, out, _) = run(bin()
        .args(["parse", "--layout", "series-index-last", "--input"])
        .arg(&p));
    assert_eq!(code, 0);
    assert!(out.contains("N: 9"), "{out}");
    assert!(out.contains("T_p: 41"), "{out}");
}

#[test]
fn run_writes_json_record() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_data(dir.path(), "panel", 60, 12, Layout::default());
    let out = dir.path().join("res.json");
    let (code, stdout, stderr) = run(bin()
        .args([
            "run",
            "--model",
            "l12",
            "--k",
            "4",
            "--split-count",
            "30",
            "--rule",
            "monotone-min",
            "--data",
        ])
        .arg(&p)
        .arg("--out")
        .arg(&out));
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("l12 k=4"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["model"], "l12");
    assert_eq!(v["support"].as_array().unwrap().len(), 4);
    let tei = v["tei"].as_f64().unwrap();
    let teo = v["teo"].as_f64().unwrap();
    assert_eq!(v["cons"].as_f64().unwrap(), (tei - teo).abs());
}

#[test]
fn sweep_writes_csv_and_plots_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_data(dir.path(), "indtrack1", 80, 14, Layout::default());
    let plots = dir.path().join("plots");
    let mut outputs = Vec::new();
    for i in 0..2 {
        let csv = dir.path().join(format!("sweep{i}.csv"));
        let (code, _, stderr) = run(bin()
            .args([
                "sweep",
                "--k-min",
                "5",
                "--k-max",
                "10",
                "--models",
                "l12,l1",
                "--reference",
                "builtin",
                "--jobs",
                "2",
                "--data",
            ])
            .arg(&p)
            .arg("--csv")
            .arg(&csv)
            .arg("--plot-dir")
            .arg(&plots));
        assert_eq!(code, 0, "{stderr}");
        outputs.push(fs::read_to_string(&csv).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let lines: Vec<&str> = outputs[0].lines().collect();
    assert_eq!(
        lines[0],
        "dataset,n_stocks,k,model,tei,teo,cons,supo,seed,iterations,runtime_ms"
    );
    assert_eq!(lines.len(), 13);
    let teo = fs::read_to_string(plots.join("indtrack1_teo.csv")).unwrap();
    assert_eq!(teo.lines().next(), Some("k,l12,l1"));
    assert_eq!(teo.lines().count(), 7);
}

#[test]
fn sweep_cell_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_data(dir.path(), "wide", 40, 80, Layout::default());
    let csv = dir.path().join("out.csv");
    let (code, _, stderr) = run(bin()
        .args([
            "sweep",
            "--k-min",
            "4",
            "--k-max",
            "4",
            "--models",
            "l12,exhaustive",
            "--data",
        ])
        .arg(&p)
        .arg("--csv")
        .arg(&csv));
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("exhaustive"));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_data(dir.path(), "panel", 30, 8, Layout::default());
    let csv = dir.path().join("out.csv");
    let (code, _, stderr) = run(bin()
        .args(["sweep", "--k-min", "6", "--k-max", "5", "--data"])
        .arg(&p)
        .arg("--csv")
        .arg(&csv));
    assert_eq!(code, 1, "{stderr}");
    assert!(!csv.exists());

    let (code, _, _) = run(bin().args(["run", "--k", "1", "--data"]).arg(&p));
    assert_eq!(code, 1);

    fs::write(dir.path().join("bad.txt"), "2 3\n1 2 3\n").unwrap();
    let (code, _, stderr) = run(bin()
        .args(["parse", "--input"])
        .arg(dir.path().join("bad.txt")));
    assert_eq!(code, 1);
    assert!(stderr.contains("error"));
}
