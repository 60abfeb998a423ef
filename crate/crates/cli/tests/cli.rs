use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use densetrack::decoder::FlowField;
use densetrack::synth::{self, read_flo, read_ppm, write_flo, write_pgm, SceneConfig};
use densetrack::tensor::Tensor;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_densetrack"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn data_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                out.push(path.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// A tiny trained checkpoint shared by the tracking tests.
fn tiny_checkpoint(root: &Path) -> PathBuf {
    let data = root.join("data");
    ok(&["gen", "--out", p(&data), "--num", "1", "--size", "32", "--frames", "4", "--seed", "3"]);
    let run_dir = root.join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run_dir), "--steps", "2", "--iters-N", "1", "--video-len", "3", "--log-every", "1"]);
    run_dir.join("checkpoint.spot")
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = ok(&["gen", "--out", p(&a), "--num", "2", "--size", "32", "--frames", "3", "--seed", "7"]);
    assert_eq!(out.lines().collect::<Vec<_>>(), vec!["seq_0000 seed=7", "seq_0001 seed=8"]);
    ok(&["gen", "--out", p(&b), "--num", "2", "--size", "32", "--frames", "3", "--seed", "7", "--threads", "2"]);
    let files = data_files(&a);
    assert_eq!(files, data_files(&b));
    assert!(files.iter().any(|f| f.ends_with("seq_0001/flow/00002.flo")));
    for f in files {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{}", f.display());
    }
    assert!(a.join("manifest.json").exists());
}

#[test]
fn zero_frames_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen", "--out", p(dir.path()), "--frames", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["gen", "--bogus"]).status.code(), Some(2));
}

#[test]
fn invalid_ablation_lists_valid_toggles() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--out", p(&data), "--num", "1", "--size", "32", "--frames", "2"]);
    let out = run(&["train", "--data", p(&data), "--out", p(&dir.path().join("r")), "--steps", "1", "--ablate", "warp_drive"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for t in ["memory_bank", "sensory", "query_projector", "warm_hidden", "warm_flow", "warm_vis"] {
        assert!(err.contains(t), "missing {t} in: {err}");
    }
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    assert_eq!(&fs::read(&ckpt).unwrap()[..8], b"SPOTCKPT");
    let log = fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,loss,epe"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.len() == 3 && r[1].is_finite()));

    let abl = dir.path().join("abl");
    ok(&[
        "train", "--data", p(&dir.path().join("data")), "--out", p(&abl), "--steps", "1", "--iters-N", "1",
        "--video-len", "3", "--ablate", "memory_bank,sensory", "--splat", "softmax",
    ]);
    assert!(abl.join("checkpoint.spot").exists());
}

#[test]
fn empty_corpus_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data", p(dir.path()), "--out", p(&dir.path().join("r")), "--steps", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tracking_streams_causally() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let seq = dir.path().join("data/seq_0000");
    let full = dir.path().join("full");
    let prefix = dir.path().join("prefix");
    let out = ok(&["track", "--checkpoint", p(&ckpt), "--seq", p(&seq), "--out", p(&full), "--iters-N", "2"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("frame=")).count(), 4);
    ok(&["track", "--checkpoint", p(&ckpt), "--seq", p(&seq), "--out", p(&prefix), "--iters-N", "2", "--max-frames", "2"]);
    let common = data_files(&prefix);
    assert_eq!(common.len(), 4);
    for f in &common {
        assert_eq!(fs::read(prefix.join(f)).unwrap(), fs::read(full.join(f)).unwrap(), "{}", f.display());
    }
    let mtimes: Vec<_> = (0..4)
        .map(|t| fs::metadata(full.join(format!("flow/{t:05}.flo"))).unwrap().modified().unwrap())
        .collect();
    assert!(mtimes.windows(2).all(|w| w[0] <= w[1]));

    let f0 = read_flo(full.join("flow/00000.flo")).unwrap();
    assert!(f0.0.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_frame_gives_identity_flow() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let one = dir.path().join("one");
    ok(&["gen", "--out", p(&one), "--num", "1", "--size", "24", "--frames", "1", "--seed", "1"]);
    let out = dir.path().join("out");
    ok(&["track", "--checkpoint", p(&ckpt), "--seq", p(&one.join("seq_0000")), "--out", p(&out)]);
    let flow = read_flo(out.join("flow/00000.flo")).unwrap();
    assert_eq!((flow.width(), flow.height()), (24, 24));
    assert!(flow.0.data().iter().all(|&v| v == 0.0));
    let (_, _, vis) = synth::read_pgm(out.join("vis/00000.pgm")).unwrap();
    assert!(vis.iter().all(|&v| v > 128));
    assert_eq!(data_files(&out).len(), 2);
}

#[test]
fn mismatched_frame_geometry_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let seq = dir.path().join("odd");
    fs::create_dir_all(seq.join("frames")).unwrap();
    synth::write_ppm(seq.join("frames/00000.ppm"), &Tensor::zeros([3, 16, 16])).unwrap();
    synth::write_ppm(seq.join("frames/00001.ppm"), &Tensor::zeros([3, 16, 20])).unwrap();
    let out = run(&["track", "--checkpoint", p(&ckpt), "--seq", p(&seq), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

fn parse_machine_lines(stdout: &str) -> Vec<(String, String, f64)> {
    stdout
        .lines()
        .filter(|l| l.matches(',').count() == 2)
        .map(|l| {
            let parts: Vec<&str> = l.split(',').collect();
            (parts[0].to_string(), parts[1].to_string(), parts[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn eval_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--out", p(dir.path()), "--num", "2", "--size", "32", "--frames", "4", "--seed", "5"]);
    let queries = dir.path().join("q.txt");
    fs::write(&queries, "# x y\n3 4\n10.5, 20\n31 31\n").unwrap();
    let out = ok(&["eval", "--pred", p(dir.path()), "--gt", p(dir.path()), "--queries", p(&queries)]);
    let rows = parse_machine_lines(&out);
    let get = |m: &str, s: &str| rows.iter().find(|r| r.0 == m && r.1 == s).map(|r| r.2).unwrap();
    assert_eq!(get("epe_all", "all"), 0.0);
    assert_eq!(get("oa", "all"), 1.0);
    assert_eq!(get("epe_all", "seq_0001"), 0.0);
    assert_eq!(get("delta_avg", "all"), 1.0);
    assert_eq!(get("aj", "all"), 1.0);
}

#[test]
fn eval_constant_offset_is_five() {
    let dir = tempfile::tempdir().unwrap();
    let gt_dir = dir.path().join("gt");
    let rec = synth::generate_static(&SceneConfig { height: 16, width: 16, frames: 3, size_range: [4.0, 8.0], ..SceneConfig::default() })
        .unwrap();
    synth::save_sequence(&rec, &gt_dir).unwrap();
    let pred = dir.path().join("pred");
    fs::create_dir_all(pred.join("flow")).unwrap();
    fs::create_dir_all(pred.join("vis")).unwrap();
    for t in 0..3 {
        let f = FlowField(Tensor::from_fn([2, 16, 16], |i| if i < 256 { 3.0 } else { 4.0 }));
        write_flo(pred.join(format!("flow/{t:05}.flo")), &f).unwrap();
        write_pgm(pred.join(format!("vis/{t:05}.pgm")), 16, 16, &[255; 256]).unwrap();
    }
    let out = ok(&["eval", "--pred", p(&pred), "--gt", p(&gt_dir)]);
    assert!(out.contains("all.epe_all=5.000000"), "{out}");
    let rows = parse_machine_lines(&out);
    assert!(rows.iter().any(|r| r.0 == "epe_all" && r.1 == "all" && r.2 == 5.0));
}

#[test]
fn eval_rejects_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--out", p(&dir.path().join("gt")), "--num", "1", "--size", "32", "--frames", "3"]);
    let pred = dir.path().join("pred");
    fs::create_dir_all(pred.join("flow")).unwrap();
    write_flo(pred.join("flow/00000.flo"), &FlowField::zeros(32, 32)).unwrap();
    let out = run(&["eval", "--pred", p(&pred), "--gt", p(&dir.path().join("gt"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn viz_is_deterministic_and_uses_the_wheel() {
    let dir = tempfile::tempdir().unwrap();
    let zero = dir.path().join("zero.flo");
    write_flo(&zero, &FlowField::zeros(5, 6)).unwrap();
    let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
    ok(&["viz", "--flow", p(&zero), "--out", p(&a)]);
    ok(&["viz", "--flow", p(&zero), "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let img = read_ppm(&a).unwrap();
    assert!(img.tensor().data().iter().all(|&v| v == 1.0));

    let right = dir.path().join("right.flo");
    write_flo(&right, &FlowField(Tensor::from_fn([2, 2, 2], |i| if i < 4 { 2.0 } else { 0.0 }))).unwrap();
    let c = dir.path().join("c.ppm");
    ok(&["viz", "--flow", p(&right), "--out", p(&c), "--max-flow", "2"]);
    let img = read_ppm(&c).unwrap();
    assert_eq!((img.tensor().at(&[0, 0, 0]), img.tensor().at(&[1, 0, 0]), img.tensor().at(&[2, 0, 0])), (1.0, 0.0, 0.0));
}
