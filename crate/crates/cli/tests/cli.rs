use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gracaps::dataset::{write_idx, LabeledImageSet};
use gracaps_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_gracaps");

const TINY: &str = "\
input_side = 8
conv = 4:3:1, 8:3:2
heads = 2
capsule_dim_in = 4
capsule_dim_out = 4
classes = 3
decoder_hidden = 8
train_limit = 0
test_limit = 0
epochs = 1
batch_size = 4
dataset = toy
";

/// Bright 3×3 block in one of three corners per class.
fn toy(n: usize, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners = [(0, 0), (0, 5), (5, 2)];
    let mut data = Vec::new();
    for i in 0..n {
        let (y0, x0) = corners[i % 3];
        let mut img: Vec<f32> = (0..64).map(|_| f32::from(rng.gen_range(0u8..20)) / 255.0).collect();
        for y in y0..y0 + 3 {
            for x in x0..x0 + 3 {
                img[y * 8 + x] = 1.0;
            }
        }
        data.extend(img);
    }
    LabeledImageSet::new("toy", Tensor::new([n, 1, 8, 8], data).unwrap(), (0..n).map(|i| i % 3).collect()).unwrap()
}

struct Env {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Env {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let d = root.join("data/toy");
        std::fs::create_dir_all(&d).unwrap();
        write_idx(&toy(24, 1), &d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte")).unwrap();
        write_idx(&toy(9, 2), &d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte")).unwrap();
        std::fs::write(root.join("tiny.kv"), TINY).unwrap();
        Env { _tmp: tmp, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(BIN);
        cmd.args(args)
            .env("GRACAPS_DATA_DIR", self.path("data"))
            .env("GRACAPS_OUT_DIR", self.path("out"));
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    }

    fn trained(&self) -> PathBuf {
        let cfg = self.path("tiny.kv");
        self.ok(&["train", "--config", cfg.to_str().unwrap()]);
        self.path("out/model.ckpt")
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn exists(p: &Path) -> bool {
    p.exists()
}

#[test]
fn train_then_every_command() {
    let env = Env::new();
    let ckpt = env.trained();
    let ck = ckpt.to_str().unwrap();
    for f in ["model.ckpt", "metrics.csv", "train.config.kv"] {
        assert!(exists(&env.path("out").join(f)), "{f}");
    }
    let metrics = std::fs::read_to_string(env.path("out/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,loss,accuracy\n1,train,"));
    let resolved = std::fs::read_to_string(env.path("out/train.config.kv")).unwrap();
    assert!(resolved.contains("grid_side = 2") && resolved.contains("dataset = toy"), "{resolved}");

    let stdout = env.ok(&["eval", "--checkpoint", ck, "--dataset", "toy", "--batch-size", "4"]);
    assert!(stdout.starts_with("accuracy "), "{stdout}");
    let eval = std::fs::read_to_string(env.path("out/eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 5);
    assert!(eval.contains("\nall,9,"));

    env.ok(&["explain", "--checkpoint", ck, "--dataset", "toy", "--images", "0..1,4", "--methods", "att,grad,ig,random"]);
    for i in [0, 1, 4] {
        for m in ["att", "grad", "ig", "random"] {
            for ext in ["pgm", "csv", "txt"] {
                assert!(exists(&env.path(&format!("out/explain/img{i:05}_{m}.{ext}"))));
            }
        }
    }

    env.ok(&["aopc", "--checkpoint", ck, "--dataset", "toy", "--images", "3", "--steps", "2", "--ig-steps", "4"]);
    let summary = std::fs::read_to_string(env.path("out/aopc.csv")).unwrap();
    assert!(summary.starts_with("method,images,steps,aopc\n"));
    assert!(exists(&env.path("out/aopc_random.csv")));

    env.ok(&["attack", "--checkpoint", ck, "--dataset", "toy", "--mode", "untargeted,targeted"]);
    for mode in ["untargeted", "targeted"] {
        let csv = std::fs::read_to_string(env.path(&format!("out/attack_{mode}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 6);
    }

    env.ok(&["perturb", "--checkpoint", ck, "--dataset", "toy", "--index", "2", "--dims", "0..3"]);
    let layout = std::fs::read_to_string(env.path("out/perturb/layout.csv")).unwrap();
    assert_eq!(layout.lines().count(), 1 + 4 * 11);
    assert!(exists(&env.path("out/perturb/dim03_step10.pgm")));
    let sheet = std::fs::read(env.path("out/perturb/sheet.pgm")).unwrap();
    assert!(sheet.starts_with(format!("P5\n{} {}\n255\n", 11 * 9 - 1, 4 * 9 - 1).as_bytes()));
}

#[test]
fn flags_override_the_config_file() {
    let env = Env::new();
    let cfg = env.path("tiny.kv");
    let out = env.path("other");
    env.ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "epochs=3",
        "--epochs",
        "2",
        "--heads",
        "1",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    let resolved = std::fs::read_to_string(out.join("train.config.kv")).unwrap();
    assert!(resolved.contains("epochs = 2"));
    // The primary layer follows the head count.
    assert!(resolved.contains("conv = 4:3:1, 4:3:2"), "{resolved}");
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);
}

#[test]
fn invalid_input_exits_with_one() {
    let env = Env::new();
    let cfg = env.path("tiny.kv");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&env.run(&["train", "--bogus"])), 1);
    assert_eq!(code(&env.run(&["train", "--config", cfg, "--set", "head=2"])), 1);
    assert_eq!(code(&env.run(&["train", "--config", cfg, "--set", "epochs"])), 1);
    assert_eq!(code(&env.run(&["train", "--config", cfg, "--aggregation", "max"])), 1);
    let out = env.run(&["train", "--config", cfg, "--set", "sigma=-1"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma"));

    let ckpt = env.trained();
    let ck = ckpt.to_str().unwrap();
    let stale = env.run(&["eval", "--checkpoint", ck, "--config", cfg, "--set", "capsule_dim_out=5"]);
    assert_eq!(code(&stale), 1);
    assert!(String::from_utf8_lossy(&stale.stderr).contains("capsule_dim_out"));
    assert_eq!(code(&env.run(&["explain", "--checkpoint", ck, "--dataset", "toy", "--images", "3..1"])), 1);
    assert_eq!(code(&env.run(&["explain", "--checkpoint", ck, "--dataset", "toy", "--methods", "lime"])), 1);
    assert_eq!(code(&env.run(&["explain", "--checkpoint", ck, "--dataset", "toy", "--images", "99"])), 1);
    assert_eq!(code(&env.run(&["perturb", "--checkpoint", ck, "--dataset", "toy", "--dims", "7"])), 1);
    assert_eq!(code(&env.run(&["attack", "--checkpoint", ck, "--dataset", "toy", "--mode", "both"])), 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let env = Env::new();
    let cfg = env.path("tiny.kv");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&env.run(&["train", "--config", cfg, "--dataset", "missing"])), 2);
    let ckpt = env.trained();
    let bytes = std::fs::read(&ckpt).unwrap();
    let cut = env.path("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&env.run(&["eval", "--checkpoint", cut.to_str().unwrap(), "--dataset", "toy"])), 2);
    assert_eq!(code(&env.run(&["eval", "--checkpoint", "nowhere.ckpt", "--dataset", "toy"])), 2);
}

#[test]
fn help_exits_cleanly() {
    let env = Env::new();
    let out = env.run(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("perturb"));
}
