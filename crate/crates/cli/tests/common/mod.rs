#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emdt_core::numeric::Prng;

/// Credit-card shaped CSV: `Time, V1..V28, Amount, Class`, frauds drawn
/// from two shifted blobs so clustering and the classifier have signal.
pub fn write_toy_csv(path: &Path, rows: usize, frauds: usize, seed: u64) {
    let mut rng = Prng::new(seed);
    let mut text = String::from("Time");
    for i in 1..=28 {
        write!(text, ",V{i}").unwrap();
    }
    text.push_str(",Amount,Class\n");
    let step = (rows / frauds.max(1)).max(1);
    for r in 0..rows {
        let fraud = r % step == 0 && r / step < frauds;
        let shift = match (fraud, (r / step) % 2) {
            (false, _) => 0.0,
            (true, 0) => 2.5,
            (true, _) => -2.5,
        };
        write!(text, "{}", r as f64 * 1.5).unwrap();
        for j in 0..28 {
            let v = rng.next_gaussian() + if j < 4 { shift } else { 0.0 };
            write!(text, ",{v}").unwrap();
        }
        let amount = (rng.next_gaussian() * 40.0 + if fraud { 150.0 } else { 80.0 }).abs();
        writeln!(text, ",{amount},{}", u8::from(fraud)).unwrap();
    }
    std::fs::write(path, text).unwrap();
}

/// Small, fast configuration for a toy run rooted at `dir`.
pub fn toy_config(dir: &Path, csv: &Path) -> String {
    format!(
        r#"
[data]
path = "{csv}"
expected_rows = 0

[embedding]
dim = 8
feature_scale = 10.0
time_scale = 1.0

[diffusion]
timesteps = 40
epochs = 3
batch_size = 32

[clustering]
clusters = 2
neighbors = 5
layout_epochs = 30
restarts = 2

[classifier]
trees = [5, 10]
max_depths = [2]
learning_rates = [0.3]

[evaluation]
seeds = 2
histogram_bins = 8

[sweep]
learning_rates = [1e-3]
batch_sizes = [32]
dims = [8]
feature_scales = [10.0]
time_scales = [1.0]
seeds = 1

[output]
dir = "{out}"
"#,
        csv = csv.display(),
        out = dir.join("run").display()
    )
}

pub struct Toy {
    pub tmp: tempfile::TempDir,
    pub config: PathBuf,
    pub run: PathBuf,
}

impl Toy {
    pub fn new(rows: usize, frauds: usize) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let csv = tmp.path().join("creditcard.csv");
        write_toy_csv(&csv, rows, frauds, 7);
        let config = tmp.path().join("emdt.toml");
        std::fs::write(&config, toy_config(tmp.path(), &csv)).unwrap();
        let run = tmp.path().join("run");
        Self { tmp, config, run }
    }

    pub fn emdt(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_emdt"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
