use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_tilespmm");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn value<'a>(out: &'a str, key: &str) -> &'a str {
    out.lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
}

fn graph(dir: &Path) {
    ok(dir, &["gen-rmat", "--scale", "9", "--edge-factor", "6", "--seed", "3", "-o", "g.txt"]);
    ok(dir, &["convert", "g.txt", "-o", "g.img", "--rows", "512", "--cols", "512", "--tile-size", "64"]);
}

#[test]
fn info_reports_toy_layout() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("toy.txt"), "# toy\n0 1\n0 2\n5 5\n").unwrap();
    ok(d.path(), &["convert", "toy.txt", "-o", "toy.img", "--rows", "16", "--cols", "16", "--tile-size", "16"]);
    let out = ok(d.path(), &["info", "toy.img"]);
    assert_eq!(value(&out, "n"), "16");
    assert_eq!(value(&out, "t"), "16");
    assert_eq!(value(&out, "nnz"), "3");
    assert_eq!(value(&out, "tiles"), "1");
    assert_eq!(value(&out, "file_bytes"), "86");
    assert_eq!(
        value(&out, "file_bytes").parse::<u64>().unwrap(),
        value(&out, "header_bytes").parse::<u64>().unwrap() + value(&out, "record_bytes").parse::<u64>().unwrap()
    );
}

#[test]
fn spmm_modes_and_partitions_agree() {
    let d = tempfile::tempdir().unwrap();
    graph(d.path());
    let mut outs = Vec::new();
    for extra in [&["--mode", "im"][..], &["--mode", "sem"], &["--mode", "sem", "--mem-cols", "3"], &["--threads", "3"]] {
        let mut args = vec!["spmm", "--matrix", "g.img", "--cols", "8", "--seed", "5", "-o", "y.dense"];
        args.extend_from_slice(extra);
        let out = ok(d.path(), &args);
        let passes: usize = value(&out, "passes").parse().unwrap();
        if extra.contains(&"--mem-cols") {
            assert_eq!(passes, 3);
        }
        outs.push(fs::read(d.path().join("y.dense")).unwrap());
    }
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn bench_reads_image_once_per_run() {
    let d = tempfile::tempdir().unwrap();
    graph(d.path());
    let e = fs::metadata(d.path().join("g.img")).unwrap().len();
    ok(d.path(), &["bench", "--matrix", "g.img", "--p", "1,2,4,8", "--modes", "sem", "-o", "b.csv"]);
    let csv = fs::read_to_string(d.path().join("b.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# schema=bench/v1"));
    assert_eq!(lines.next(), Some("graph,mode,p,mem_cols,threads,seconds,bytes_read,bytes_written"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for (row, p) in rows.iter().zip([1u64, 2, 4, 8]) {
        assert_eq!(row[2].parse::<u64>().unwrap(), p);
        assert_eq!(row[6].parse::<u64>().unwrap(), e);
        assert_eq!(row[7].parse::<u64>().unwrap(), 28 + 512 * 8 * p);
    }
}

#[test]
fn apps_run_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen-rmat", "--scale", "8", "--edge-factor", "4", "-o", "g.txt"]);
    ok(d.path(), &["convert", "g.txt", "-o", "gt.img", "--rows", "256", "--cols", "256", "--tile-size", "64", "--transpose"]);
    let out = ok(d.path(), &["pagerank", "--matrix", "gt.img", "--iters", "10", "-o", "r.txt", "--trace", "r.csv"]);
    assert_eq!(value(&out, "iterations"), "10");
    let ranks: Vec<f64> = fs::read_to_string(d.path().join("r.txt")).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(ranks.len(), 256);
    assert!((ranks.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(fs::read_to_string(d.path().join("r.csv")).unwrap().starts_with("iter,metric,value,wall_seconds"));

    ok(d.path(), &["gen-rmat", "--scale", "7", "--edge-factor", "4", "--undirected", "-o", "u.txt"]);
    ok(d.path(), &["convert", "u.txt", "-o", "u.img", "--rows", "128", "--cols", "128", "--tile-size", "32", "--symmetrize"]);
    ok(d.path(), &["eigen", "--matrix", "u.img", "--k", "4", "--block", "12", "--tol", "1e-8"]);

    ok(d.path(), &["convert", "g.txt", "-o", "g.img", "--rows", "256", "--cols", "256", "--tile-size", "64"]);
    ok(d.path(), &["nmf", "--matrix", "g.img", "--transpose", "gt.img", "--k", "4", "--iters", "5", "--w-out", "w.dense"]);
    assert!(fs::metadata(d.path().join("w.dense")).unwrap().len() == 28 + 256 * 4 * 8);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("e.txt"), "0 1\n").unwrap();
    let code = |args: &[&str]| run(d.path(), args).status.code();
    assert_eq!(code(&["convert", "e.txt", "-o", "e.img", "--tile-size", "3"]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["info", "missing.img"]), Some(3));
    fs::write(d.path().join("bad.txt"), "0 x\n").unwrap();
    assert_eq!(code(&["convert", "bad.txt", "-o", "b.img"]), Some(3));
    fs::write(d.path().join("junk.img"), b"not an image at all").unwrap();
    assert_eq!(code(&["info", "junk.img"]), Some(3));
}
