use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use vpe_core::data::ImageTensor;
use vpe_core::oneshot::SupportSet;

fn vpe(args: &[&str]) -> Output {
    vpe_env(args, &[])
}

fn vpe_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vpe"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("vpe-cli").join(name);
    let _ = fs::remove_dir_all(&p);
    fs::create_dir_all(&p).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &[&str] = &["--classes", "6", "--unseen", "2", "--per-class", "10", "--image-size", "16"];

/// A small dataset and a briefly trained checkpoint shared by the read-only tests.
fn fixture() -> &'static (PathBuf, PathBuf) {
    static F: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    F.get_or_init(|| {
        let root = scratch("fixture");
        let data = root.join("data");
        let mut args = vec!["gen-data", "--out", s(&data), "--seed", "3"];
        args.extend_from_slice(SMALL);
        ok(&vpe(&args));
        let run = root.join("run");
        ok(&vpe(&[
            "train", "--data", s(&data), "--out", s(&run), "--iterations", "3", "--batch-size", "8",
        ]));
        (data, run.join("model.vpec"))
    })
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_is_reproducible_and_records_config() {
    let root = scratch("gen");
    let a = root.join("a");
    let mut args = vec!["gen-data", "--out", s(&a), "--seed", "7"];
    args.extend_from_slice(SMALL);
    ok(&vpe(&args));
    let ta = tree(&a);
    fs::remove_dir_all(&a).unwrap();
    ok(&vpe(&args));
    let tb = tree(&a);
    assert!(ta.contains_key(Path::new("splits.txt")));
    assert!(ta.contains_key(Path::new("config.resolved.txt")));
    assert!(!ta.contains_key(Path::new(".vpe.lock")));
    assert_eq!(ta, tb);
    let cfg = fs::read_to_string(a.join("config.resolved.txt")).unwrap();
    assert!(cfg.contains("classes = 6") && cfg.contains("seed = 7"));
}

#[test]
fn gen_data_rejects_impossible_split() {
    let root = scratch("gen-bad");
    let out = vpe(&["gen-data", "--out", s(&root.join("d")), "--classes", "30", "--unseen", "40"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unseen"));
    assert!(!root.join("d").exists());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(vpe(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(vpe(&["train", "--bogus"]).status.code(), Some(1));
    let (data, _) = fixture();
    let out = scratch("usage");
    let r = vpe(&["train", "--data", s(data), "--out", s(&out), "--set", "colour=red"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("colour"));
    assert_eq!(vpe(&["train", "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn training_writes_artifacts_and_defaults() {
    let (_, ckpt) = fixture();
    let run = ckpt.parent().unwrap();
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    assert!(loss.starts_with("iteration,loss,recon,kl,smoothed"));
    let cfg = fs::read_to_string(run.join("config.resolved.txt")).unwrap();
    for line in ["lr = 0.0001", "latent_dim = 300", "prototype_ratio = 200", "augment = true"] {
        assert!(cfg.contains(line), "missing `{line}` in\n{cfg}");
    }
    assert!(cfg.contains("batch_size = 8"));
    assert!(!run.join(".vpe.lock").exists());
}

#[test]
fn baseline_vae_changes_only_the_target() {
    let (data, _) = fixture();
    let root = scratch("targets");
    let dump = |name: &str, extra: &[&str]| {
        let dir = root.join(name);
        let mut args = vec![
            "train", "--data", s(data), "--out", s(&dir), "--iterations", "1", "--batch-size", "16",
            "--dump-targets",
        ];
        let d = dir.join("dump");
        args.push(s(&d));
        args.extend_from_slice(extra);
        ok(&vpe(&args));
        let read = |f: &str| fs::read(d.join(f)).unwrap();
        (read("inputs.png"), read("targets.png"), read("labels.csv"))
    };
    let (vpe_in, vpe_target, vpe_labels) = dump("vpe", &[]);
    let (vae_in, vae_target, vae_labels) = dump("vae", &["--baseline-vae"]);
    assert_eq!(vpe_in, vae_in);
    assert_eq!(vpe_labels, vae_labels);
    assert_eq!(vae_target, vae_in);
    assert_ne!(vpe_target, vpe_in);
}

#[test]
fn config_file_env_and_flag_precedence() {
    let (data, _) = fixture();
    let root = scratch("precedence");
    let file = root.join("run.conf");
    fs::write(&file, format!("data = {}\niterations = 5\nbatch_size = 4\nlr = 0.01\n", data.display())).unwrap();
    let out = root.join("run");
    ok(&vpe_env(
        &["train", "--config", s(&file), "--out", s(&out), "--iterations", "2"],
        &[("VPE_ITERATIONS", "4"), ("VPE_LR", "0.002")],
    ));
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    let cfg = fs::read_to_string(out.join("config.resolved.txt")).unwrap();
    assert!(cfg.contains("lr = 0.002") && cfg.contains("batch_size = 4") && cfg.contains("iterations = 2"));
}

#[test]
fn resume_continues_the_iteration_count() {
    let (_, ckpt) = fixture();
    let (data, _) = fixture();
    let out = scratch("resume");
    ok(&vpe(&[
        "train", "--data", s(data), "--out", s(&out), "--resume", s(ckpt), "--iterations", "2", "--batch-size", "8",
    ]));
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    let iters: Vec<&str> = loss.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["3", "4"]);
}

#[test]
fn divergence_exits_three_and_keeps_the_trace() {
    let (data, _) = fixture();
    let out = scratch("nan");
    let r = vpe(&[
        "train", "--data", s(data), "--out", s(&out), "--iterations", "20", "--batch-size", "4", "--lr", "1e30",
    ]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("loss.csv").exists());
    assert!(!out.join("model.vpec").exists());
}

#[test]
fn data_errors_exit_two() {
    let root = scratch("broken");
    let data = root.join("data");
    let mut args = vec!["gen-data", "--out", s(&data)];
    args.extend_from_slice(SMALL);
    ok(&vpe(&args));
    let victim = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .unwrap();
    fs::remove_file(victim.join("prototype.png")).unwrap();
    let r = vpe(&["train", "--data", s(&data), "--out", s(&root.join("run")), "--iterations", "1"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("prototype"));
    let (_, ckpt) = fixture();
    let r = vpe(&["eval-oneshot", "--checkpoint", s(ckpt), "--data", s(&data), "--out", s(&root.join("ev"))]);
    assert_eq!(r.status.code(), Some(2));
}

fn json_number(text: &str, key: &str) -> f64 {
    let start = text.find(&format!("\"{key}\":")).unwrap() + key.len() + 3;
    let rest = text[start..].trim_start();
    let end = rest.find([',', '\n']).unwrap();
    rest[..end].trim().parse().unwrap()
}

#[test]
fn eval_oneshot_reports_every_protocol_reproducibly() {
    let (data, ckpt) = fixture();
    let root = scratch("oneshot");
    let a = root.join("a");
    let run = || ok(&vpe(&["eval-oneshot", "--checkpoint", s(ckpt), "--data", s(data), "--out", s(&a)]));
    run();
    let first = tree(&a);
    run();
    assert_eq!(tree(&a), first);
    for p in ["all", "unseen", "mixed"] {
        let json = fs::read_to_string(a.join(format!("oneshot_{p}.json"))).unwrap();
        let acc = json_number(&json, "accuracy");
        assert!((0.0..=1.0).contains(&acc));
        assert!(a.join(format!("predictions_{p}.csv")).exists());
    }
    let unseen = fs::read_to_string(a.join("oneshot_unseen.json")).unwrap();
    assert_eq!(json_number(&unseen, "support_size"), 2.0);
}

#[test]
fn oracle_embeddings_are_perfect() {
    let (data, ckpt) = fixture();
    let root = scratch("oracle");
    let one = root.join("oneshot");
    ok(&vpe(&["eval-oneshot", "--checkpoint", s(ckpt), "--data", s(data), "--out", s(&one), "--oracle"]));
    for p in ["all", "unseen", "mixed"] {
        let json = fs::read_to_string(one.join(format!("oneshot_{p}.json"))).unwrap();
        assert_eq!(json_number(&json, "accuracy"), 1.0);
    }
    let ret = root.join("retrieval");
    ok(&vpe(&["eval-retrieval", "--checkpoint", s(ckpt), "--data", s(data), "--out", s(&ret), "--oracle"]));
    let auc = fs::read_to_string(ret.join("auc.csv")).unwrap();
    let mean = auc.lines().find(|l| l.starts_with("mean")).unwrap();
    assert_eq!(mean.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 1.0);
}

#[test]
fn eval_retrieval_writes_tables_and_images() {
    let (data, ckpt) = fixture();
    let root = scratch("retrieval");
    let cats = root.join("categories.txt");
    let names: Vec<String> = fs::read_to_string(data.join("splits.txt"))
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    fs::write(&cats, names.iter().enumerate().map(|(i, n)| format!("{n} g{}\n", i % 2)).collect::<String>()).unwrap();
    let out = root.join("out");
    ok(&vpe(&[
        "eval-retrieval", "--checkpoint", s(ckpt), "--data", s(data), "--out", s(&out), "--scope", "all",
        "--categories", s(&cats),
    ]));
    let cfg = fs::read_to_string(out.join("config.resolved.txt")).unwrap();
    assert!(cfg.contains("top_k = 100"));
    let auc = fs::read_to_string(out.join("auc.csv")).unwrap();
    assert_eq!(auc.lines().count(), 1 + 6 + 1);
    for line in auc.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    for f in ["rankings.csv", "heatmap.csv", "heatmap.png", "average_images.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_dir(out.join("average")).unwrap().count(), 6);
}

#[test]
fn reconstruct_grid_matches_rows() {
    let (data, ckpt) = fixture();
    let out = scratch("reconstruct");
    ok(&vpe(&[
        "reconstruct", "--checkpoint", s(ckpt), "--data", s(data), "--out", s(&out), "--rows", "5", "--scale", "1",
    ]));
    let grid = ImageTensor::load_png(&out.join("reconstruction.png"), 3).unwrap();
    assert_eq!(grid.height(), 5 * 16 + 4);
    assert_eq!(grid.width(), 3 * 16 + 2);
    let listing = fs::read_to_string(out.join("reconstruction.csv")).unwrap();
    assert!(listing.lines().skip(1).any(|l| l.ends_with("false")), "no unseen row:\n{listing}");
}

#[test]
fn exported_embeddings_reproduce_classification() {
    let (data, ckpt) = fixture();
    let root = scratch("export");
    ok(&vpe(&["export-embeddings", "--checkpoint", s(ckpt), "--data", s(data), "--out", s(&root.join("emb"))]));
    ok(&vpe(&[
        "eval-oneshot", "--checkpoint", s(ckpt), "--data", s(data), "--out", s(&root.join("ev")), "--protocol", "all",
    ]));
    let csv = fs::read_to_string(root.join("emb/embeddings.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 300);
    assert_eq!(header[2], "e1");
    assert_eq!(header[301], "e300");
    let rows: Vec<(String, usize, Vec<f32>)> = lines
        .map(|l| {
            let mut f = l.split(',');
            let id = f.next().unwrap().to_string();
            let label = f.next().unwrap().parse().unwrap();
            (id, label, f.map(|v| v.parse().unwrap()).collect())
        })
        .collect();
    let images = fs::read_dir(data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .map(|d| fs::read_dir(d).unwrap().count())
        .sum::<usize>();
    assert_eq!(rows.len(), images);

    let support = SupportSet::new(
        rows.iter()
            .filter(|r| r.0.ends_with("/prototype.png"))
            .map(|r| (r.1, r.2.clone()))
            .collect(),
    )
    .unwrap();
    let by_id: BTreeMap<&str, &Vec<f32>> = rows.iter().map(|r| (r.0.as_str(), &r.2)).collect();
    let preds = fs::read_to_string(root.join("ev/predictions_all.csv")).unwrap();
    let mut checked = 0;
    for line in preds.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (predicted, _) = support.classify(by_id[f[0]]).unwrap();
        assert_eq!(predicted.to_string(), f[2], "{}", f[0]);
        checked += 1;
    }
    assert!(checked > 0);
}
