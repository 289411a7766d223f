#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

/// Runs the CLI in-process.
pub fn cli(args: &[&str]) -> i32 {
    orefeed::cli::run(std::iter::once("orefeed").chain(args.iter().copied()))
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// 40 regimes, otherwise the desk scenario.
pub const SMALL_SCENARIO: &str = "bags = 40\nseed = 5\n";

/// Tiny networks and short training so a whole run takes seconds.
pub const SMALL_CONFIG: &str = r#"
seed = 9

[patch_net]
geometry = "desk"
blocks = 2
layers_per_block = 1
growth = 4
stem_channels = 4
per_class_channels = 4

[train]
max_epochs = 3
early_stop_patience = 3
plateau_patience = 2

[bag_net]
reduced_dim = 16
hidden_dim = 16
patch_dropout = 0.3

[bag_train]
max_epochs = 5

[relabel]
k_min = 6
k_max = 9
max_outer_iterations = 2
kmeans_restarts = 2
"#;

pub struct Workspace {
    pub root: PathBuf,
    pub data: PathBuf,
    pub config: PathBuf,
}

impl Workspace {
    /// Writes the scenario and config under `root` with all paths pointing
    /// inside it.
    pub fn new(root: &Path, scenario: &str, config: &str) -> Workspace {
        let data = root.join("data");
        let body = format!(
            "{config}\n[paths]\ndata_dir = {:?}\ncheckpoint_dir = {:?}\nreport_dir = {:?}\n",
            s(&data),
            s(&root.join("checkpoints")),
            s(&root.join("reports"))
        );
        let config = root.join("run.toml");
        fs::write(&config, body).unwrap();
        fs::write(root.join("scenario.toml"), scenario).unwrap();
        Workspace {
            root: root.to_path_buf(),
            data,
            config,
        }
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn run(&self, args: &[&str]) -> i32 {
        let mut all = vec!["--config", s(&self.config)];
        all.extend_from_slice(args);
        cli(&all)
    }

    pub fn synth(&self) -> i32 {
        let sc = self.root.join("scenario.toml");
        cli(&["synth", "--scenario", s(&sc), "--out", s(&self.data)])
    }

    pub fn truth(&self) -> PathBuf {
        self.data.join("truth.jsonl")
    }
}
