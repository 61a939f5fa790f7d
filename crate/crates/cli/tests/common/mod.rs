#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use oodsim_core::data::{synth_generate, Dataset, SynthConfig};
use oodsim_core::model::ModelConfig;
use oodsim_core::sim::Simulator;
use oodsim_core::train::{train, Checkpoint, TrainConfig};
use tempfile::TempDir;

pub const HISTORY: usize = 4;
pub const HORIZON: usize = 2;

pub fn train_config() -> TrainConfig {
    TrainConfig { model: ModelConfig::tiny(8, HISTORY, HORIZON), max_epochs: 2, patience: 2, seed: 1, ..Default::default() }
}

/// A synthetic data directory and a checkpoint trained on it, shared by every test.
pub struct Fixture {
    _dir: TempDir,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub root: PathBuf,
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let data: Dataset = synth_generate(21, &SynthConfig::default()).unwrap().into();
        data.write_dir(&data_dir).unwrap();
        let ckpt = train(&Dataset::load_dir(&data_dir).unwrap(), &train_config()).unwrap();
        let checkpoint = dir.path().join("model.ckpt");
        ckpt.save(&checkpoint).unwrap();
        Fixture { root: dir.path().to_path_buf(), _dir: dir, data_dir, checkpoint }
    })
}

pub fn simulator() -> Simulator {
    let f = fixture();
    Simulator::new(Checkpoint::load(&f.checkpoint).unwrap(), Dataset::load_dir(&f.data_dir).unwrap()).unwrap()
}

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_oodsim"));
    c.env_remove("OODSIM_DATA_DIR").env_remove("OODSIM_CHECKPOINT").env_remove("OODSIM_BIND").env("RUST_LOG", "warn");
    c
}

pub fn oodsim(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

pub fn with_model<'a>(mut args: Vec<&'a str>, f: &'a Fixture) -> Vec<&'a str> {
    args.extend(["--checkpoint", f.checkpoint.to_str().unwrap(), "--data-dir", f.data_dir.to_str().unwrap()]);
    args
}

pub fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// A state with a policy enacted mid-panel, the policy id, and a window start containing it.
pub fn scenario_parts(sim: &Simulator) -> (String, String, String) {
    let panel = &sim.data().panel;
    let rec = sim
        .data()
        .corpus
        .records()
        .find(|r| panel.month_index(r.enacted_month).is_some_and(|t| t >= HISTORY && t + HISTORY < panel.num_months()))
        .unwrap();
    (rec.state.clone(), rec.policy_id.clone(), rec.enacted_month.offset(-1).to_string())
}

/// Three policy ids from the corpus other than `not`.
pub fn pool(sim: &Simulator, not: &str) -> Vec<String> {
    sim.data().corpus.records().map(|r| r.policy_id.clone()).filter(|id| id != not).take(3).collect()
}
