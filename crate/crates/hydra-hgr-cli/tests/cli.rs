use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hydra_hgr::read_tensor;

const SMALL: &str = r#"
[dataset]
num_classes = 2
reps_per_class = 5
windows_per_rep = 1

[model]
embed_dim = 8
num_heads = 2
num_layers = 1
mlp_hidden = 16
fusion_hidden = 16

[macro_train]
epochs = 2
batch_size = 4
lr = 0.003

[micro_train]
epochs = 2
batch_size = 4
lr = 0.003

[fusion_train]
epochs = 2
batch_size = 4
lr = 0.003
"#;

fn hydra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydra-hgr"))
        .args(args)
        .env_remove("HYDRA_HGR_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hydra(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    hydra(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

/// A generated and decomposed 2-class, 10-window dataset.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    let data = root.join("data");
    ok(&["--config", s(&config), "--seed", "3", "generate", "--out", s(&data)]);
    ok(&["--config", s(&config), "decompose", "--in", s(&data)]);
    Fixture { _dir: dir, root, config, data }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&["generate", "--classes", "0", "--out", s(&out)]), 2);
    assert_eq!(code(&["decompose", "--in", s(dir.path()), "--sil", "1.01"]), 2);
    let missing = hydra(&["decompose", "--in", s(dir.path())]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("manifest.csv"));
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["--seed", "x", "generate", "--out", s(&out)]), 2);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(code(&["--config", s(&bad), "generate", "--out", s(&out)]), 2);
}

#[test]
fn printed_defaults_are_the_published_constants() {
    let text = ok(&["--print-config", "decompose", "--in", "."]);
    let v: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(v["decomposition"]["sil_threshold"].as_float(), Some(0.92));
    assert_eq!(v["decomposition"]["max_sources"].as_integer(), Some(7));
    assert_eq!(v["decomposition"]["extension_factor"].as_integer(), Some(20));
    for (section, lr, wd, epochs, batch) in [
        ("macro_train", 1e-4, 1e-3, 20, 128),
        ("micro_train", 3e-4, 1e-3, 50, 64),
        ("fusion_train", 5e-4, 1e-4, 20, 128),
    ] {
        assert_eq!(v[section]["lr"].as_float(), Some(lr));
        assert_eq!(v[section]["weight_decay"].as_float(), Some(wd));
        assert_eq!(v[section]["epochs"].as_integer(), Some(epochs));
        assert_eq!(v[section]["batch_size"].as_integer(), Some(batch));
    }
    assert_eq!(v["model"]["embed_dim"].as_integer(), Some(128));
    assert_eq!(v["model"]["fusion_hidden"].as_integer(), Some(128));
    // Flags win over defaults and the printed document round-trips.
    let text = ok(&["--print-config", "--seed", "9", "decompose", "--in", ".", "--sil", "0.8"]);
    let v: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(v["decomposition"]["sil_threshold"].as_float(), Some(0.8));
    assert_eq!(v["seed"].as_integer(), Some(9));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_hydra-hgr"))
        .args(["--print-config", "generate", "--out", "."])
        .env("HYDRA_HGR_SEED", "41")
        .output()
        .unwrap();
    let v: toml::Value = toml::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(v["seed"].as_integer(), Some(41));
    assert_eq!(v["dataset"]["seed"].as_integer(), Some(41));
}

#[test]
fn full_pipeline_on_a_small_dataset() {
    let f = fixture();
    let cfg = s(&f.config);
    let manifest = std::fs::read_to_string(f.data.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 2 * 5);

    let images = read_tensor(f.data.join("decomp/muap_images.hydt")).unwrap();
    assert_eq!(images.dims(), &[10, 7, 8, 16]);
    let sil = std::fs::read_to_string(f.data.join("decomp/sil.csv")).unwrap();
    assert!(sil.starts_with("window_id,source_idx,sil,num_spikes"));
    for line in sil.lines().skip(1) {
        let v: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(v >= 0.92);
    }

    let (m, u, h) = (f.root.join("macro"), f.root.join("micro"), f.root.join("fusion"));
    let data = s(&f.data);
    ok(&["--config", cfg, "train-macro", "--data", data, "--out", s(&m), "--holdout-rep", "0"]);
    ok(&["--config", cfg, "train-micro", "--data", data, "--out", s(&u), "--holdout-rep", "0"]);
    ok(&["--config", cfg, "train-fusion", "--data", data, "--macro", s(&m), "--micro", s(&u), "--out", s(&h), "--holdout-rep", "0"]);

    let window = f.data.join("raw").join(std::fs::read_dir(f.data.join("raw")).unwrap().next().unwrap().unwrap().file_name());
    for model in [&m, &u, &h] {
        let line = ok(&["--config", cfg, "predict", "--window", s(&window), "--model", s(model)]);
        let line = line.trim();
        let (label, conf) = line.split_once(',').expect("label,confidence");
        assert!(label.parse::<usize>().unwrap() < 2);
        let conf: f64 = conf.parse().unwrap();
        assert!((0.5..=1.0).contains(&conf), "{line}");
        assert_eq!(line.lines().count(), 1);
    }

    let missing = hydra(&["--config", cfg, "train-fusion", "--data", data, "--macro", s(&f.root.join("nope")), "--micro", s(&u), "--out", s(&h)]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
    // Macro weights do not fit the Micro slot layout.
    assert_ne!(code(&["--config", cfg, "train-fusion", "--data", data, "--macro", s(&u), "--micro", s(&m), "--out", s(&h)]), 0);
}

#[test]
fn evaluate_and_report_are_reproducible() {
    let f = fixture();
    let cfg = s(&f.config);
    let (a, b) = (f.root.join("eval_a"), f.root.join("eval_b"));
    for out in [&a, &b] {
        ok(&["--config", cfg, "evaluate", "--data", s(&f.data), "--out", s(out)]);
    }
    for file in ["fold_results.csv", "results.csv", "boxplot.csv", "table.txt"] {
        let x = std::fs::read(a.join(file)).unwrap();
        assert_eq!(x, std::fs::read(b.join(file)).unwrap(), "{file} differs between runs");
    }
    let results = std::fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 15 + 3);
    let table = std::fs::read_to_string(a.join("table.txt")).unwrap();
    assert!(table.contains("macro") && table.contains("micro") && table.contains("hydra"));

    // `report` rebuilds the same outputs from the fold results alone.
    std::fs::remove_file(a.join("results.csv")).unwrap();
    ok(&["report", "--results", s(&a)]);
    assert_eq!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(b.join("results.csv")).unwrap());

    let one = f.root.join("eval_one");
    ok(&["--config", cfg, "evaluate", "--data", s(&f.data), "--models", "hydra", "--out", s(&one)]);
    assert_eq!(std::fs::read_to_string(one.join("results.csv")).unwrap().lines().count(), 1 + 5 + 1);
    assert_eq!(code(&["--config", cfg, "evaluate", "--data", s(&f.data), "--models", "cnn", "--out", s(&one)]), 2);
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        ok(&["--config", s(&cfg), "--seed", seed, "generate", "--out", s(out)]);
    }
    let files = |d: &Path| {
        let mut v: Vec<PathBuf> = Vec::new();
        for sub in ["", "raw", "env"] {
            for e in std::fs::read_dir(d.join(sub)).unwrap() {
                let p = e.unwrap().path();
                if p.is_file() {
                    v.push(p.strip_prefix(d).unwrap().to_path_buf());
                }
            }
        }
        v.sort();
        v
    };
    assert_eq!(files(&a), files(&b));
    for rel in files(&a) {
        assert_eq!(std::fs::read(a.join(&rel)).unwrap(), std::fs::read(b.join(&rel)).unwrap(), "{}", rel.display());
    }
    let first_raw = files(&a).into_iter().find(|p| p.starts_with("raw")).unwrap();
    assert_ne!(std::fs::read(a.join(&first_raw)).unwrap(), std::fs::read(c.join(&first_raw)).unwrap());
}
