use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use duosplat_core::image::{read_mask_png, read_rgb_png, write_rgb_png, Grid};
use duosplat_core::ply::read_gaussian_ply;
use duosplat_core::{Checkpoint, PointMap, Reconstructor};

const TINY: &str = r#"
[net]
image_size = 16
patch_size = 4
embed_dim = 16
heads = 2
mlp_ratio = 2
n_encoder_blocks = 1
n_decoder_blocks = 2

[unet]
channels = 8
levels = 2
groups = 2

[data]
novel_views = 2
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Env {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Env { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_with(args, &self.path("tiny.toml"))
    }

    fn run_with(&self, args: &[&str], config: &Path) -> Output {
        Command::new(env!("CARGO_BIN_EXE_duosplat"))
            .args(args)
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(self.path("out"))
            .arg("--resolution")
            .arg("16")
            .env("DUOSPLAT_DATA_ROOT", self.path("data"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    fn view(&self, name: &str) -> String {
        self.path(&format!("data/subject_0000/{name}")).to_string_lossy().into_owned()
    }

    fn train(&self) {
        self.ok(&["gen-data", "--subjects", "2"]);
        self.ok(&["train-stage1", "--iterations", "3"]);
        self.ok(&["train-stage2", "--iterations", "2"]);
    }

    fn infer_args(&self, back: &str) -> Vec<String> {
        ["infer", "--front", &self.view("front.png"), "--front-mask", &self.view("front.mask.png"), "--back", back, "--back-mask", &self.view("back.mask.png")]
            .map(String::from)
            .to_vec()
    }
}

fn code(o: &Output) -> Option<i32> {
    o.status.code()
}

fn as_strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn infer_writes_one_gaussian_per_valid_pixel() {
    let env = Env::new();
    env.train();
    let args = env.infer_args(&env.view("back.png"));
    env.ok(&as_strs(&args));
    let set = read_gaussian_ply(&env.path("out/gaussians.ply")).unwrap();

    let ck = Checkpoint::load(&env.path("out/model.ckpt")).unwrap();
    let (gaussian, activation) = ck.regressor.unwrap();
    let rec = Reconstructor {
        pointmap: ck.pointmap,
        gaussian,
        activation,
        options: Default::default(),
    };
    let load = |n: &str| read_rgb_png(Path::new(&env.view(n))).unwrap();
    let mask = |n: &str| read_mask_png(Path::new(&env.view(n))).unwrap();
    let prior = rec.prior(&load("front.png"), &mask("front.mask.png"), &load("back.png"), &mask("back.mask.png")).unwrap();
    let valid: usize = prior.maps.iter().map(PointMap::valid_count).sum();
    assert_eq!(set.len(), valid);
    for v in ["front", "back", "left", "right"] {
        assert!(env.path(&format!("out/debug/{v}.input.png")).exists());
        assert!(env.path(&format!("out/debug/{v}.pointmap.png")).exists());
    }

    env.ok(&["render", "--ply", &env.path("out/gaussians.ply").to_string_lossy(), "--azimuth", "90", "--azimuth", "-45"]);
    assert!(env.path("out/azimuth_090.000.png").exists());
    env.ok(&["eval", "--views", "all"]);
    let csv = std::fs::read_to_string(env.path("out/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 6);
    env.ok(&["export-ply", "--subject", "subject_0001", "--kind", "points"]);
    assert!(env.path("out/subject_0001.points.ply").exists());
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let env = Env::new();
    env.train();

    let small = env.path("small.png");
    write_rgb_png(&small, &Grid::filled(8, 8, [0.2; 3])).unwrap();
    let o = env.run(&as_strs(&env.infer_args(&small.to_string_lossy())));
    assert_eq!(code(&o), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let o = env.run(&as_strs(&env.infer_args(&env.path("missing.png").to_string_lossy())));
    assert_eq!(code(&o), Some(3));

    let other = env.path("other.toml");
    std::fs::write(&other, TINY.replace("embed_dim = 16", "embed_dim = 8")).unwrap();
    let o = env.run_with(&as_strs(&env.infer_args(&env.view("back.png"))), &other);
    assert_eq!(code(&o), Some(4), "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(&other, format!("{TINY}\n[stage1]\nlearning_rate = 1.0\n")).unwrap();
    let o = env.run_with(&["gen-data"], &other);
    assert_eq!(code(&o), Some(2));

    let o = env.run(&["infer", "--checkpoint", &env.path("out/stage1.ckpt").to_string_lossy(), "--front", "a", "--front-mask", "b", "--back", "c", "--back-mask", "d"]);
    assert_eq!(code(&o), Some(3));
}

#[test]
fn runs_are_deterministic_under_a_seed() {
    let a = Env::new();
    let b = Env::new();
    for env in [&a, &b] {
        env.ok(&["gen-data", "--subjects", "1", "--seed", "4"]);
        env.ok(&["train-stage1", "--iterations", "3", "--seed", "4"]);
    }
    let left = |e: &Env| std::fs::read(e.path("data/subject_0000/left.png")).unwrap();
    assert_eq!(left(&a), left(&b));
    let manifest = |e: &Env| std::fs::read_to_string(e.path("data/manifest.json")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
    let ck = |e: &Env| Checkpoint::load(&e.path("out/stage1.ckpt")).unwrap();
    let (ca, cb) = (ck(&a), ck(&b));
    assert!(ca.pointmap.store().iter().zip(cb.pointmap.store().iter()).all(|(x, y)| x == y));
    let losses = |c: &Checkpoint| c.history.iter().map(|r| r.loss).collect::<Vec<_>>();
    assert_eq!(losses(&ca), losses(&cb));
}
