use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plmetric::config::{RunConfig, SeedStream};
use plmetric::dataio::{generate_synthetic, load_dataset, save_dataset, DatasetFormat, SyntheticSpec};
use plmetric::eval::{diagnose, recall_at_k, DiagnoseConfig};
use plmetric::trainer::{checkpoint, TrainState};
use plmetric::{FeatureDataset, Mlp};

const SMALL: &[&str] = &[
    "--set",
    "n_proxies=8",
    "--set",
    "network.hidden=[16]",
    "--set",
    "network.output_dim=8",
    "--set",
    "sampler.batch_size=20",
    "--set",
    "sampler.n_seeds=4",
    "--set",
    "manifold.k=8",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_plmetric"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("plmetric-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> PathBuf {
    let path = dir.join("data.plmf");
    let o = run(&[
        "gen", "--out", s(&path), "--n-classes", "3", "--ambient-dim", "12", "--points-per-class", "20",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    path
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    for pair in SMALL.chunks(2) {
        c.apply_override(pair[1]).unwrap();
    }
    c
}

#[test]
fn gen_default_is_loadable_and_deterministic() {
    let dir = scratch("gen");
    let (a, b) = (dir.join("a.plmf"), dir.join("b.plmf"));
    assert!(run(&["gen", "--out", s(&a)]).status.success());
    assert!(run(&["gen", "--out", s(&b)]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ds = load_dataset(&a, DatasetFormat::Binary).unwrap();
    assert_eq!(ds, generate_synthetic(&SyntheticSpec::default()).unwrap());

    let csv = dir.join("a.csv");
    assert!(run(&["gen", "--out", s(&csv)]).status.success());
    assert_eq!(load_dataset(&csv, DatasetFormat::Csv).unwrap(), ds);
}

#[test]
fn gen_rejects_bad_patch_dim() {
    let dir = scratch("badgen");
    let o = run(&["gen", "--out", s(&dir.join("x.plmf")), "--patch-dim", "40"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("patch_dim"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_zero_epochs_writes_initial_state() {
    let dir = scratch("zero");
    let data = small_dataset(&dir);
    let out = dir.join("out");
    let mut args = vec!["train", "--dataset", s(&data), "--output-dir", s(&out), "--epochs", "0"];
    args.extend_from_slice(SMALL);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = checkpoint::load(&out.join("final.plck")).unwrap();
    let ds = load_dataset(&data, DatasetFormat::Binary).unwrap();
    let mut cfg = small_config();
    cfg.epochs = 0;
    assert_eq!(ck, TrainState::init(&ds, &cfg).unwrap());
}

#[test]
fn train_missing_dataset_fails() {
    let dir = scratch("missing");
    let o = run(&[
        "train",
        "--dataset",
        s(&dir.join("nope.plmf")),
        "--output-dir",
        s(&dir.join("out")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error"));
}

#[test]
fn train_smoke_then_eval_and_resume() {
    let dir = scratch("smoke");
    let data = small_dataset(&dir);
    let out = dir.join("out");
    let mut args = vec!["train", "--dataset", s(&data), "--output-dir", s(&out), "--epochs", "3"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--set", "checkpoint_every=1"]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epochs=3"));

    let log = std::fs::read_to_string(out.join("metrics.log")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("eval"))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(!epochs.is_empty());
    assert!(epochs.windows(2).all(|w| w[0] <= w[1]));
    for e in 1..=3 {
        assert!(out.join(format!("epoch_{e:04}.plck")).exists());
    }
    let fin = checkpoint::load(&out.join("final.plck")).unwrap();
    assert_eq!(fin.epoch, 3);
    assert_eq!(fin, checkpoint::load(&out.join("epoch_0003.plck")).unwrap());

    // Eval output equals the library calls on the same checkpoint.
    let o = run(&["eval", "--checkpoint", s(&out.join("final.plck")), "--dataset", s(&data), "--k", "1,4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = load_dataset(&data, DatasetFormat::Binary).unwrap();
    let z = fin.embedder.theta.forward(ds.features()).unwrap();
    let labels = ds.labels().unwrap();
    let recall = recall_at_k(&z, labels, &[1, 4]).unwrap();
    let sup = diagnose(
        &z,
        labels,
        &DiagnoseConfig {
            manifold: &fin.config.manifold,
            similarity: &fin.config.similarity,
            n_clusters: 3,
            kmeans_seed: fin.config.derive_seed(SeedStream::KMeans, 0),
            pair_seed: fin.config.derive_seed(SeedStream::CorrelationPairs, 0),
            threads: 1,
        },
    )
    .unwrap();
    let want = format!(
        "recall@1={}\nrecall@4={}\nneighborhood_purity={}\nkmeans_purity={}\nsimilarity_correlation={}\nkmeans_correlation={}\n",
        recall[&1], recall[&4], sup.neighborhood_purity, sup.kmeans_purity, sup.similarity_correlation, sup.kmeans_correlation
    );
    assert_eq!(stdout(&o), want);

    // Resuming from epoch 1 reproduces the final checkpoint.
    let out2 = dir.join("resumed");
    let o = run(&[
        "train",
        "--resume",
        s(&out.join("epoch_0001.plck")),
        "--dataset",
        s(&data),
        "--output-dir",
        s(&out2),
        "--epochs",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out2.join("final.plck")).unwrap(),
        std::fs::read(out.join("final.plck")).unwrap()
    );
}

#[test]
fn eval_without_labels_reports_notice() {
    let dir = scratch("nolabels");
    let data = small_dataset(&dir);
    let out = dir.join("out");
    let mut args = vec!["train", "--dataset", s(&data), "--output-dir", s(&out), "--epochs", "0"];
    args.extend_from_slice(SMALL);
    assert!(run(&args).status.success());

    let ds = load_dataset(&data, DatasetFormat::Binary).unwrap();
    let bare = FeatureDataset::from_features(ds.features().clone(), None).unwrap();
    let bare_path = dir.join("bare.plmf");
    save_dataset(&bare, &bare_path, DatasetFormat::Binary).unwrap();
    let o = run(&["eval", "--checkpoint", s(&out.join("final.plck")), "--dataset", s(&bare_path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("notice: dataset has no labels"));
}

#[test]
fn diagnose_columns_and_values() {
    let dir = scratch("diag");
    let data = small_dataset(&dir);
    let mut args = vec!["diagnose", "--dataset", s(&data)];
    args.extend_from_slice(SMALL);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,label_purity,correlation");
    assert!(lines[1].starts_with("ours,") && lines[2].starts_with("kmeans,"));

    let ds = load_dataset(&data, DatasetFormat::Binary).unwrap();
    let cfg = small_config();
    let net = Mlp::new(&cfg.network.layer_sizes(ds.dim()), cfg.derive_seed(SeedStream::NetworkInit, 0)).unwrap();
    let y = net.forward(ds.features()).unwrap();
    let r = diagnose(
        &y,
        ds.labels().unwrap(),
        &DiagnoseConfig {
            manifold: &cfg.manifold,
            similarity: &cfg.similarity,
            n_clusters: 3,
            kmeans_seed: cfg.derive_seed(SeedStream::KMeans, 0),
            pair_seed: cfg.derive_seed(SeedStream::CorrelationPairs, 0),
            threads: 1,
        },
    )
    .unwrap();
    assert_eq!(lines[1], format!("ours,{},{}", r.neighborhood_purity, r.similarity_correlation));
    assert_eq!(lines[2], format!("kmeans,{},{}", r.kmeans_purity, r.kmeans_correlation));
}
