use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pglode::grid::{tile_max, tile_partition};
use pglode::models::{encode_checkpoint, read_checkpoint};
use pglode::synthgen::read_dataset;
use pglode::verify::{format_score, parse_csv, Tier};
use pglode_cli::RunConfig;

const SMALL: &str = "\
# small and fast
height = 32
width = 32
n_days = 50
tile_size = 16
history_t = 2
latent_channels = 4
hidden_channels = 4
rk4_steps = 2
epochs = 2
batch_size = 8
";

struct Sandbox {
    dir: PathBuf,
}

impl Sandbox {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("pglode-cli-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("small.cfg"), SMALL).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.dir.join("small.cfg");
        let out = self.out();
        Command::new(env!("CARGO_BIN_EXE_pglode"))
            .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.out().join(name)).unwrap()
    }
}

impl Drop for Sandbox {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.dir);
    }
}

fn assert_error(o: &Output, code: i32, needle: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "not a single line: {err:?}");
    assert!(err.starts_with("error: "), "{err:?}");
    assert!(err.contains(needle), "{err:?} lacks {needle:?}");
}

fn assert_well_formed_svg(path: &Path) -> usize {
    let text = fs::read_to_string(path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    doc.descendants().count()
}

#[test]
fn generate_prints_planted_extremes_and_is_readable() {
    let s = Sandbox::new("gen");
    let stdout = s.ok(&["generate"]);
    assert!(stdout.contains("planted extremes"), "{stdout}");
    let set = read_dataset::<f64>(s.out().join("dataset.pgl")).unwrap();
    assert_eq!(set.len(), 50);
    assert!(stdout.contains(&format!("{} pixels on {} days", set.burst_pixels(), set.burst_days())));
    s.ok(&["train", "--model", "convlstm", "--set", "epochs=1"]);
}

#[test]
fn generate_is_byte_identical_for_a_repeated_seed() {
    let s = Sandbox::new("gen-seed");
    s.ok(&["generate", "--seed", "7"]);
    let a = fs::read(s.out().join("dataset.pgl")).unwrap();
    s.ok(&["generate", "--seed", "7"]);
    let b = fs::read(s.out().join("dataset.pgl")).unwrap();
    assert_eq!(a, b);
    s.ok(&["generate", "--seed", "8"]);
    assert_ne!(a, fs::read(s.out().join("dataset.pgl")).unwrap());
}

#[test]
fn too_few_days_is_a_usage_error() {
    let s = Sandbox::new("gen-short");
    assert_error(&s.run(&["generate", "--n-days", "10"]), 1, "n_days");
    assert!(!s.out().join("dataset.pgl").exists());
}

#[test]
fn bad_arguments_and_config_keys_are_usage_errors() {
    let s = Sandbox::new("usage");
    assert_error(&s.run(&["frobnicate"]), 1, "frobnicate");
    assert_error(&s.run(&["generate", "--set", "nonsense=1"]), 1, "nonsense");
    assert_error(&s.run(&["generate", "--set", "n_days=many"]), 1, "n_days");
}

#[test]
fn help_exits_zero() {
    let s = Sandbox::new("help");
    let o = s.run(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("case-study"));
}

#[test]
fn training_without_a_dataset_is_a_data_error() {
    let s = Sandbox::new("no-data");
    assert_error(&s.run(&["train", "--model", "pg-lode"]), 2, "dataset");
}

#[test]
fn unknown_model_lists_the_valid_ones() {
    let s = Sandbox::new("bad-model");
    s.ok(&["generate"]);
    assert_error(&s.run(&["train", "--model", "transformer"]), 1, "valid models: pg-lode, convlstm");
}

#[test]
fn divergence_is_a_numerical_error() {
    let s = Sandbox::new("diverge");
    s.ok(&["generate"]);
    let o = s.run(&["train", "--model", "pg-lode", "--set", "learning_rate=1e300", "--set", "epochs=3"]);
    assert_error(&o, 3, "");
}

#[test]
fn train_is_reproducible_and_checkpoints_round_trip() {
    let s = Sandbox::new("train");
    s.ok(&["generate"]);
    for model in ["pg-lode", "convlstm"] {
        let stdout = s.ok(&["train", "--model", model]);
        assert!(stdout.contains(&format!("{model} epoch 2")), "{stdout}");
        let first = s.read(&format!("{model}_loss.csv"));
        assert_eq!(first.lines().next(), Some("epoch,total,mse,bce"));
        assert_eq!(first.lines().count(), 3);
        s.ok(&["train", "--model", model]);
        assert_eq!(first, s.read(&format!("{model}_loss.csv")));
    }

    let path = s.out().join("pg-lode.pgw");
    let bytes = fs::read(&path).unwrap();
    assert_eq!(encode_checkpoint(&read_checkpoint::<f64>(&path).unwrap()), bytes);

    let a = s.ok(&["evaluate"]);
    let copy = s.dir.join("copy.pgw");
    fs::write(&copy, encode_checkpoint(&read_checkpoint::<f64>(&path).unwrap())).unwrap();
    let b = s.ok(&["evaluate", path.to_str().unwrap()]);
    let c = s.ok(&["evaluate", copy.to_str().unwrap()]);
    assert_eq!(b, c);
    assert!(a.contains("convlstm,tile"));
}

#[test]
fn evaluate_reports_persistence_first_and_round_trips() {
    let s = Sandbox::new("eval");
    s.ok(&["generate"]);
    s.ok(&["train", "--model", "pg-lode", "--set", "epochs=1"]);
    s.ok(&["train", "--model", "convlstm", "--set", "epochs=1"]);
    let stdout = s.ok(&["evaluate"]);
    let csv = s.read("report.csv");
    assert_eq!(stdout, csv);
    let rows = parse_csv(&csv).unwrap();
    let names: Vec<(&str, Tier)> = rows.iter().map(|r| (r.row.model.as_str(), r.row.tier)).collect();
    assert_eq!(
        names,
        [
            ("persistence", Tier::Pixel),
            ("persistence", Tier::Tile),
            ("pg-lode", Tier::Pixel),
            ("pg-lode", Tier::Tile),
            ("convlstm", Tier::Pixel),
            ("convlstm", Tier::Tile),
        ]
    );
    for r in &rows {
        let s = r.row.scores();
        assert_eq!(format_score(s.pod), format_score(r.printed.pod));
        assert_eq!(format_score(s.far), format_score(r.printed.far));
        assert_eq!(format_score(s.csi), format_score(r.printed.csi));
        assert!(r.row.counts.total() > 0);
    }
    assert!(assert_well_formed_svg(&s.out().join("tile_scores.svg")) > 10);

    let echoed = RunConfig::from_text(&s.read("config.txt")).unwrap();
    assert_eq!(echoed.history_t, 2);
    assert_eq!(echoed.out_dir, s.out());
}

#[test]
fn evaluate_without_checkpoints_scores_persistence_only() {
    let s = Sandbox::new("eval-pers");
    s.ok(&["generate"]);
    let rows = parse_csv(&s.ok(&["evaluate"])).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.row.model == "persistence"));
}

#[test]
fn checkpoint_grid_mismatch_is_a_data_error() {
    let s = Sandbox::new("mismatch");
    s.ok(&["generate"]);
    s.ok(&["train", "--model", "convlstm", "--set", "epochs=1"]);
    let ckpt = s.out().join("convlstm.pgw");
    let moved = s.dir.join("32.pgw");
    fs::rename(&ckpt, &moved).unwrap();
    s.ok(&["generate", "--set", "height=48", "--set", "width=48"]);
    let o = s.run(&["evaluate", "--set", "height=48", "--set", "width=48", moved.to_str().unwrap()]);
    assert_error(&o, 2, "grid");
    assert_error(&s.run(&["evaluate", "missing.pgw"]), 2, "missing.pgw");
}

fn case_csv(stdout: &str) -> Vec<Vec<String>> {
    stdout.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn case_study_matches_the_raw_data() {
    let s = Sandbox::new("case");
    s.ok(&["generate"]);
    s.ok(&["train", "--model", "pg-lode", "--set", "epochs=1"]);
    let set = read_dataset::<f64>(s.out().join("dataset.pgl")).unwrap();
    // 40 training days, then history 2 and lead 1 give targets 42..=49.
    let stdout = s.ok(&["case-study", "--tile-row", "1", "--tile-col", "0", "--center-day", "44", "--window", "4"]);
    assert_eq!(stdout, s.read("case_study.csv"));
    let rows = case_csv(&stdout);
    assert_eq!(rows[0], ["day", "observed", "persistence", "pg-lode_intensity", "pg-lode_prob"]);
    let days: Vec<usize> = rows[1..].iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(days, [42, 43, 44, 45]);

    let tile = tile_partition(set.spec(), 16).unwrap().tiles[2];
    let observed = |day: usize| tile_max(set.targets()[day].values(), 32, 32, &tile).unwrap();
    for r in &rows[1..] {
        let day: usize = r[0].parse().unwrap();
        assert_eq!(r[1].parse::<f64>().unwrap(), observed(day));
        assert_eq!(r[2].parse::<f64>().unwrap(), observed(day - 1));
        let p: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    assert!(assert_well_formed_svg(&s.out().join("case_study.svg")) > 10);

    let single = case_csv(&s.ok(&["case-study", "--center-day", "49", "--window", "1"]));
    assert_eq!(single.len(), 2);
    assert_eq!(single[1][0], "49");
}

#[test]
fn case_study_window_outside_the_evaluation_split_is_rejected() {
    let s = Sandbox::new("case-bad");
    s.ok(&["generate"]);
    assert_error(&s.run(&["case-study", "--center-day", "20", "--window", "3"]), 2, "window");
    assert_error(&s.run(&["case-study", "--center-day", "49", "--window", "3"]), 2, "window");
    assert_error(&s.run(&["case-study", "--center-day", "44", "--tile-row", "2"]), 1, "tile");
}
