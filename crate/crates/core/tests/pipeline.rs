mod common;

use std::fs;
use std::process::Command;

use common::{s, Workspace, SMALL_CONFIG, SMALL_SCENARIO};
use orefeed::evalsuite::DeployEvalReport;
use orefeed::ingest::{load_data_dir, BagLine};
use orefeed::synthgen::GroundTruth;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_orefeed"))
}

#[test]
fn synth_then_ingest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), SMALL_SCENARIO, SMALL_CONFIG);
    assert_eq!(ws.synth(), 0);
    assert!(ws.data.join("manifest.json").exists());
    let out = dir.path().join("bags.jsonl");
    assert_eq!(ws.run(&["ingest", "--out", s(&out)]), 0);
    let text = fs::read_to_string(&out).unwrap();
    let bags: Vec<BagLine> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(bags.len(), 40);
    for b in &bags {
        assert_eq!(b.instances.len(), 10, "20 minute window at one frame per 2 minutes");
        assert!(b.label == 0.0 || (120.0..=146.0).contains(&b.label));
        assert!(b.lab_q >= 66.0);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.reports().join("ingest.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["inputs_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn planted_instance_noise_matches_its_rate() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), "bags = 120\nseed = 3\n", SMALL_CONFIG);
    assert_eq!(ws.synth(), 0);
    let gt = GroundTruth::load(&ws.truth()).unwrap();
    let log = load_data_dir(&ws.data).unwrap();
    let mut noisy = 0usize;
    for img in &log.images {
        let regime = gt.regimes.iter().find(|r| r.t_start <= img.t && img.t < r.t_end).unwrap();
        if gt.latent_of(img.id).unwrap() != regime.dominant {
            noisy += 1;
        }
    }
    let n = log.images.len() as f64;
    let p = 0.4;
    let sd = (n * p * (1.0 - p)).sqrt();
    assert!((noisy as f64 - n * p).abs() < 3.0 * sd, "{noisy} noisy of {n}");
}

#[test]
fn small_pipeline_runs_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), SMALL_SCENARIO, SMALL_CONFIG);
    assert_eq!(ws.synth(), 0);
    assert_eq!(ws.run(&["stage1", "--truth", s(&ws.truth())]), 0);
    assert_eq!(ws.run(&["stage2", "--window", "20", "--window", "30"]), 0);
    let stage2: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.reports().join("stage2_report.json")).unwrap()).unwrap();
    let keys: Vec<&String> = stage2.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["20min", "30min"]);

    assert_eq!(ws.run(&["eval", "--mode", "table2"]), 0);
    assert!(fs::read_to_string(ws.reports().join("table2.txt")).unwrap().contains("accuracy"));
    assert_eq!(ws.run(&["eval", "--mode", "deploy"]), 0);
    assert_eq!(ws.run(&["eval", "--mode", "features"]), 0);
    assert!(fs::read_to_string(ws.reports().join("features.csv"))
        .unwrap()
        .starts_with("class,sample,head,bin,bin_lo,bin_hi,count"));

    assert_eq!(ws.run(&["eval", "--mode", "deploy", "--oracle"]), 0);
    let oracle: DeployEvalReport =
        serde_json::from_str(&fs::read_to_string(ws.reports().join("deploy.json")).unwrap()).unwrap();
    assert!((oracle.fractions[0] + oracle.fractions[1] - 1.0).abs() < 1e-12, "{oracle:?}");

    let window = dir.path().join("window");
    fs::create_dir(&window).unwrap();
    let log = load_data_dir(&ws.data).unwrap();
    for img in &log.images[10..20] {
        fs::copy(&img.path, window.join(img.path.file_name().unwrap())).unwrap();
    }
    let out = bin()
        .args(["--config", s(&ws.config), "predict", "--window-dir", s(&window)])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tons: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!([0.0, 120.0, 125.0, 130.0, 135.0, 140.0].contains(&tons), "{tons}");

    // a new patch network makes the old bag networks stale
    assert_eq!(ws.run(&["--seed", "10", "stage1"]), 0);
    assert_eq!(ws.run(&["eval", "--mode", "table2"]), 2);
}

#[test]
fn zero_noise_gives_correct_initial_labels() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), "bags = 40\nseed = 5\ninstance_noise_rate = 0.0\n", SMALL_CONFIG);
    assert_eq!(ws.synth(), 0);
    let gt = GroundTruth::load(&ws.truth()).unwrap();
    let log = load_data_dir(&ws.data).unwrap();
    for img in &log.images {
        let regime = gt.regimes.iter().find(|r| r.t_start <= img.t && img.t < r.t_end).unwrap();
        assert_eq!(gt.latent_of(img.id).unwrap(), regime.dominant, "image {}", img.id);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let st = bin().arg("frobnicate").output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&st.stderr).contains("Usage"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatch_size = \"many\"\n").unwrap();
    let st = bin().args(["--config", s(&bad), "stage1"]).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&st.stderr).contains("batch_size"));

    let missing = dir.path().join("nowhere");
    let st = bin().args(["--data", s(&missing), "ingest", "--out", s(&dir.path().join("b.jsonl"))]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
}
