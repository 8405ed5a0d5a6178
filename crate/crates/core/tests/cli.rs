mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{random_model, rng, sha256_file};
use milrank::cli::{EXIT_IO, EXIT_METRIC, EXIT_NUMERIC, EXIT_SHAPE, EXIT_USAGE};
use milrank::eval::{roc_auc, score_video};
use milrank::features::{load_features, DatasetManifest, FeatureFormat, Split};
use milrank::net::{Architecture, MlpModel};
use milrank::synthetic::{synthesize, SynthSpec};

fn milrank(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_milrank"));
    cmd.args(args);
    for (flag, path) in paths {
        cmd.arg(flag).arg(path);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, name: &str, args: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let o = milrank(&[&["synth"], args].concat(), &[("--out", &out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn tree_digests(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, sha256_file(&p)));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_the_requested_files_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let flags = ["--pos", "20", "--neg", "20", "--dim", "32", "--clips", "64", "--seed", "7"];
    let a = synth(tmp.path(), "a", &flags);
    let b = synth(tmp.path(), "b", &flags);
    let features = fs::read_dir(a.join("features")).unwrap().count();
    assert_eq!(features, 40);
    assert!(a.join("manifest.txt").is_file() && a.join("annotations.txt").is_file());
    assert_eq!(fs::read_to_string(a.join("manifest.txt")).unwrap().lines().count(), 40);
    assert_eq!(tree_digests(&a), tree_digests(&b));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let o = milrank(&["synth", "--pos", "2"], &[]);
    assert_eq!(code(&o), EXIT_USAGE);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&milrank(&["train", "--manifest", "m.txt", "--out", "x", "--iters", "0"], &[])), EXIT_USAGE);
    assert_eq!(code(&milrank(&["frobnicate"], &[])), EXIT_USAGE);
}

#[test]
fn ingest_check_reports_counts_and_rejects_missing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &["--pos", "3", "--neg", "2", "--dim", "6", "--clips", "10", "--split", "test"]);
    let o = milrank(&["ingest-check", "--split", "test"], &[("--manifest", &d.join("manifest.txt"))]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("5 videos (3 anomalous, 2 normal), dim 6"));
    fs::remove_file(d.join("features/test_neg_001.milf")).unwrap();
    let o = milrank(&["ingest-check"], &[("--manifest", &d.join("manifest.txt"))]);
    assert_eq!(code(&o), EXIT_IO);
    let o = milrank(&["ingest-check"], &[("--manifest", &tmp.path().join("nope.txt"))]);
    assert_eq!(code(&o), EXIT_IO);
}

#[test]
fn train_writes_checkpoint_and_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &["--pos", "30", "--neg", "30", "--dim", "8", "--clips", "16", "--seed", "2"]);
    let run = tmp.path().join("run");
    let o = milrank(
        &["train", "--iters", "100", "--seed", "1"],
        &[("--manifest", &d.join("manifest.txt")), ("--out", &run)],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("final loss "));
    assert!(run.join("ckpt_100.json").is_file());
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("iteration,loss,hinge_mean,smooth_mean,sparse_mean,reg"));
    assert_eq!(lines.count(), 100);
    let model = MlpModel::load(&run.join("ckpt_100.json")).unwrap();
    assert_eq!((model.arch.hidden1, model.arch.hidden2), (512, 32));
    assert_eq!(model.dropout_rate, 0.6);
}

#[test]
fn config_file_supplies_values_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &["--pos", "4", "--neg", "4", "--dim", "5", "--clips", "8"]);
    let cfg = tmp.path().join("train.cfg");
    fs::write(&cfg, "# small run\niters = 3\nbatch = 2\nhidden1 = 6\nhidden2 = 3\nsnapshot_every = 1\n").unwrap();
    let run = tmp.path().join("run");
    let o = milrank(
        &["train", "--iters", "4"],
        &[("--config", &cfg), ("--manifest", &d.join("manifest.txt")), ("--out", &run)],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(run.join("train_log.csv")).unwrap().lines().count(), 5);
    for it in 1..=4 {
        assert!(run.join(format!("ckpt_{it}.json")).is_file());
    }
    let model = MlpModel::load(&run.join("ckpt_4.json")).unwrap();
    assert_eq!((model.arch.hidden1, model.arch.hidden2), (6, 3));
    // probe snapshots at 0..=4, 8 segments each
    assert_eq!(fs::read_to_string(run.join("probe_scores.csv")).unwrap().lines().count(), 1 + 5 * 32);

    fs::write(&cfg, "iters = 3\nsepia = 1\n").unwrap();
    let o = milrank(&["train"], &[("--config", &cfg), ("--manifest", &d.join("manifest.txt")), ("--out", &run)]);
    assert_eq!(code(&o), EXIT_USAGE);
}

#[test]
fn exploding_training_exits_with_numeric_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &["--pos", "3", "--neg", "3", "--dim", "5", "--clips", "8"]);
    let o = milrank(
        &["train", "--iters", "20", "--batch", "2", "--lr", "1e300", "--hidden1", "6", "--hidden2", "3"],
        &[("--manifest", &d.join("manifest.txt")), ("--out", &tmp.path().join("run"))],
    );
    assert_eq!(code(&o), EXIT_NUMERIC, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn score_matches_the_library_and_header_frame_count() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &["--pos", "1", "--neg", "1", "--dim", "6", "--clips", "9"]);
    let feat = d.join("features/train_pos_000.milf");
    let f = load_features(&feat, FeatureFormat::Binary).unwrap();

    let zero = tmp.path().join("zero.json");
    MlpModel::zeros(Architecture::new(6, 5, 2).unwrap(), 0.6).unwrap().save(&zero).unwrap();
    let out = tmp.path().join("zero_out");
    let o = milrank(&["score"], &[("--checkpoint", &zero), ("--features", &feat), ("--out", &out)]);
    assert_eq!(code(&o), 0);
    let frames = fs::read_to_string(out.join("train_pos_000_frames.csv")).unwrap();
    let values: Vec<&str> = frames.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values.len(), f.n_frames());
    assert!(values.iter().all(|&v| v == "0.5"));

    let model = random_model(&mut rng(6), Architecture::new(6, 5, 2).unwrap(), 0.6, 1.0);
    let ckpt = tmp.path().join("rand.json");
    model.save(&ckpt).unwrap();
    let out = tmp.path().join("rand_out");
    let o = milrank(&["score", "--segments", "8"], &[("--checkpoint", &ckpt), ("--features", &feat), ("--out", &out)]);
    assert_eq!(code(&o), 0);
    let (expected, timeline) = score_video(&model, &f, 8).unwrap();
    let seg = fs::read_to_string(out.join("train_pos_000_segments.csv")).unwrap();
    let got: Vec<f64> = seg.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(got, expected);
    assert_eq!(fs::read_to_string(out.join("train_pos_000_frames.csv")).unwrap(), timeline.to_csv());

    let wide = tmp.path().join("wide.json");
    MlpModel::zeros(Architecture::new(7, 5, 2).unwrap(), 0.6).unwrap().save(&wide).unwrap();
    let o = milrank(&["score"], &[("--checkpoint", &wide), ("--features", &feat), ("--out", &out)]);
    assert_eq!(code(&o), EXIT_SHAPE);
    let o = milrank(&["score"], &[("--checkpoint", &tmp.path().join("none.json")), ("--features", &feat), ("--out", &out)]);
    assert_eq!(code(&o), EXIT_IO);
}

/// One ReLU unit along the planted direction with a steep output.
fn aligned_checkpoint(spec: &SynthSpec, path: &Path) {
    let world = synthesize(spec).unwrap().world;
    let dim = spec.dim;
    let mut m = MlpModel::zeros(Architecture::new(dim, 3, 2).unwrap(), 0.6).unwrap();
    m.layers[0].weights[..dim].copy_from_slice(&world.direction);
    m.layers[0].bias[0] = 2.0;
    m.layers[1].weights[0] = 1.0;
    m.layers[2].weights[0] = 20.0;
    m.layers[2].bias[0] = -50.0;
    m.save(path).unwrap();
}

#[test]
fn eval_reports_auc_and_false_alarms() {
    let tmp = tempfile::tempdir().unwrap();
    let flags = [
        "--pos", "5", "--neg", "5", "--dim", "16", "--clips", "32", "--separation", "20", "--sigma", "0.2", "--seed", "3",
        "--split", "test",
    ];
    let d = synth(tmp.path(), "d", &flags);
    let manifest = d.join("manifest.txt");
    let spec = SynthSpec {
        n_pos_videos: 5,
        n_neg_videos: 5,
        dim: 16,
        clips_per_video: 32,
        separation: 20.0,
        noise_sigma: 0.2,
        seed: 3,
        split: Split::Test,
        ..SynthSpec::default()
    };

    let perfect = tmp.path().join("perfect.json");
    aligned_checkpoint(&spec, &perfect);
    let ev = tmp.path().join("ev");
    let o = milrank(&["eval"], &[("--checkpoint", &perfect), ("--manifest", &manifest), ("--out", &ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("AUC 1.0000\n"), "{}", stdout(&o));
    assert!(stdout(&o).contains("false alarm rate 0.0000"));
    assert_eq!(fs::read_dir(ev.join("timelines")).unwrap().count(), 10);
    assert!(fs::read_to_string(ev.join("roc.csv")).unwrap().contains("\nAUC,1\n"));

    let zero = tmp.path().join("zero.json");
    MlpModel::zeros(Architecture::new(16, 3, 2).unwrap(), 0.6).unwrap().save(&zero).unwrap();
    let o = milrank(&["eval"], &[("--checkpoint", &zero), ("--manifest", &manifest), ("--out", &tmp.path().join("ev0"))]);
    assert!(stdout(&o).starts_with("AUC 0.5000\n"));
    assert!(stdout(&o).contains("false alarm rate 1.0000"));

    let model = random_model(&mut rng(8), Architecture::new(16, 6, 3).unwrap(), 0.6, 1.0);
    let ckpt = tmp.path().join("rand.json");
    model.save(&ckpt).unwrap();
    let evr = tmp.path().join("evr");
    assert_eq!(code(&milrank(&["eval"], &[("--checkpoint", &ckpt), ("--manifest", &manifest), ("--out", &evr)])), 0);
    let summary = fs::read_to_string(evr.join("summary.csv")).unwrap();
    let cli_auc: f64 = summary.lines().find_map(|l| l.strip_prefix("auc,")).unwrap().parse().unwrap();
    let data = synthesize(&spec).unwrap();
    let m = DatasetManifest::load(&manifest, Split::Test).unwrap();
    let timelines: Vec<_> = m
        .entries
        .iter()
        .map(|e| score_video(&model, &e.load().unwrap(), 32).unwrap().1)
        .collect();
    let lib_auc = roc_auc(&timelines, &data.annotations()).unwrap().auc;
    assert!((cli_auc - lib_auc).abs() <= 1e-9);

    let normals: String = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .filter(|l| l.split_whitespace().nth(1) == Some("0"))
        .map(|l| format!("{l}\n"))
        .collect();
    let only_normal = d.join("normal_only.txt");
    fs::write(&only_normal, normals).unwrap();
    let o = milrank(&["eval"], &[("--checkpoint", &zero), ("--manifest", &only_normal), ("--out", &tmp.path().join("ev1"))]);
    assert_eq!(code(&o), EXIT_METRIC);
}

#[test]
fn baseline_commands_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let tr = synth(tmp.path(), "tr", &["--pos", "6", "--neg", "6", "--dim", "8", "--clips", "16", "--seed", "4"]);
    let te = synth(tmp.path(), "te", &["--pos", "3", "--neg", "3", "--dim", "8", "--clips", "16", "--seed", "4", "--split", "test"]);
    let bl = tmp.path().join("bl");
    let o = milrank(&["baseline-train", "--epochs", "200"], &[("--manifest", &tr.join("manifest.txt")), ("--out", &bl)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = sha256_file(&bl.join("baseline.json"));
    milrank(&["baseline-train", "--epochs", "200"], &[("--manifest", &tr.join("manifest.txt")), ("--out", &bl)]);
    assert_eq!(sha256_file(&bl.join("baseline.json")), first);
    let o = milrank(
        &["baseline-eval"],
        &[("--checkpoint", &bl.join("baseline.json")), ("--manifest", &te.join("manifest.txt")), ("--out", &tmp.path().join("bev"))],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("AUC "));
}
