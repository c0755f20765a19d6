//! End-to-end CLI coverage: dataset generation, training, scoring,
//! evaluation, and the failure exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use pleo::io::load_checkpoint;
use pleo::net::RegressionNet;
use pleo::TrainScalar;

fn pleo(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_pleo")).args(args).output().expect("spawn pleo");
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.code().unwrap_or(-1), text)
}

const SMALL_CONFIG: &str = "data.train_cases = 3\ndata.val_cases = 3\ndata.test_cases = 3\n\
    train.max_epochs = 2\ntrain.train_iters_per_epoch = 4\ntrain.val_iters_per_epoch = 2\n\
    train.patience_epochs = 2\n";

struct Fixture {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("run.cfg");
        std::fs::write(&config, SMALL_CONFIG).unwrap();
        let data = tmp.path().join("data");
        let model = tmp.path().join("model");
        let (code, out) = pleo(&[
            "gen-data",
            "--config",
            config.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "9",
        ]);
        assert_eq!(code, 0, "gen-data failed: {out}");
        let (code, out) = pleo(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            model.to_str().unwrap(),
            "--seed",
            "9",
        ]);
        assert_eq!(code, 0, "train failed: {out}");
        Fixture { _tmp: tmp, config, data, model }
    })
}

fn score_case(f: &Fixture, case: &str, detections: &Path, out: &Path) -> (i32, String) {
    pleo(&[
        "score",
        "--checkpoint",
        f.model.join("checkpoint.ckpt").to_str().unwrap(),
        "--image",
        f.data.join("images").join(format!("{case}.ppm")).to_str().unwrap(),
        "--detections",
        detections.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn pipeline_end_to_end() {
    let f = fixture();
    assert!(f.model.join("checkpoint.ckpt").is_file());
    assert!(f.data.join("ratings.csv").is_file());
    let history = std::fs::read_to_string(f.model.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss\n"));

    let out = f.data.parent().unwrap().join("score_e2e");
    let dets = f.data.join("detections").join("case_006.csv");
    let (code, text) = score_case(f, "case_006", &dets, &out);
    assert_eq!(code, 0, "score failed: {text}");
    let score = std::fs::read_to_string(out.join("score.csv")).unwrap();
    assert!(score.starts_with("case_id,score,quantized\ncase_006,"), "unexpected score.csv: {score}");
    assert!(out.join("heatmap.ppm").is_file());
    let map = std::fs::read_to_string(out.join("scoremap.csv")).unwrap();
    assert!(map.starts_with("block_x,block_y,count,mean\n"));
    assert!(map.lines().count() > 1, "no defined blocks");
}

#[test]
fn eval_reports_agreement() {
    let f = fixture();
    let root = f.data.parent().unwrap();
    let mut scores = String::from("case_id,score\n");
    for case in ["case_006", "case_007", "case_008"] {
        let out = root.join(format!("score_eval_{case}"));
        let dets = f.data.join("detections").join(format!("{case}.csv"));
        let (code, text) = score_case(f, case, &dets, &out);
        assert_eq!(code, 0, "score failed: {text}");
        let row = std::fs::read_to_string(out.join("score.csv")).unwrap();
        let row = row.lines().nth(1).unwrap();
        let mut cols = row.split(',');
        scores.push_str(&format!("{},{}\n", cols.next().unwrap(), cols.next().unwrap()));
    }
    let scores_path = root.join("scores.csv");
    std::fs::write(&scores_path, scores).unwrap();
    let ratings: String = std::fs::read_to_string(f.data.join("ratings.csv"))
        .unwrap()
        .lines()
        .enumerate()
        .filter(|(i, l)| *i == 0 || l.starts_with("case_006") || l.starts_with("case_007") || l.starts_with("case_008"))
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    let ratings_path = root.join("ratings_test.csv");
    std::fs::write(&ratings_path, ratings).unwrap();
    let eval_out = root.join("eval");
    let (code, text) = pleo(&[
        "eval",
        "--scores",
        scores_path.to_str().unwrap(),
        "--ratings",
        ratings_path.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "eval failed: {text}");
    let report = std::fs::read_to_string(eval_out.join("report.txt")).unwrap();
    assert!(report.contains("mae = ") && report.contains("spearman = "), "report: {report}");
    let kappa = std::fs::read_to_string(eval_out.join("kappa.csv")).unwrap();
    assert!(kappa.lines().next().unwrap().ends_with("AI,mean_excluding_self"), "kappa header: {kappa}");
    assert!(eval_out.join("loo_kappa.csv").is_file());
    assert!(eval_out.join("difference_histogram.csv").is_file());
}

#[test]
fn rater_stats_reports() {
    let f = fixture();
    let out = f.data.parent().unwrap().join("rater_stats");
    let (code, text) = pleo(&[
        "rater-stats",
        "--ratings",
        f.data.join("ratings.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "rater-stats failed: {text}");
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("mean_pairwise_kappa = "), "report: {report}");
    assert!(out.join("kappa.csv").is_file());
}

#[test]
fn baseline_training_history_schema() {
    let f = fixture();
    let out = f.data.parent().unwrap().join("model_baseline");
    let (code, text) = pleo(&[
        "train",
        "--config",
        f.config.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--baseline",
        "--epochs",
        "1",
        "--seed",
        "9",
    ]);
    assert_eq!(code, 0, "baseline train failed: {text}");
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss_t,loss_n,val_loss\n"), "history: {history}");
}

#[test]
fn zero_lr_training_keeps_initial_weights() {
    let f = fixture();
    let out = f.data.parent().unwrap().join("model_lr0");
    let (code, text) = pleo(&[
        "train",
        "--config",
        f.config.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--lr",
        "0",
        "--epochs",
        "1",
        "--seed",
        "9",
    ]);
    assert_eq!(code, 0, "lr=0 train failed: {text}");
    let ckpt = load_checkpoint(out.join("checkpoint.ckpt")).unwrap();
    let mut net = RegressionNet::<TrainScalar>::build(pleo::net::RegressionNetConfig::desk_default(), 9).unwrap();
    ckpt.apply_to_net(&mut net).unwrap();
    let fresh = RegressionNet::<TrainScalar>::build(pleo::net::RegressionNetConfig::desk_default(), 9).unwrap();
    for ((name, a), (_, b)) in net.named_params().iter().zip(fresh.named_params()) {
        assert_eq!(a.data(), b.data(), "param {name} drifted at lr 0");
    }
}

#[test]
fn no_tumor_detections_exit_3() {
    let f = fixture();
    let root = f.data.parent().unwrap();
    let empty = root.join("empty_dets.csv");
    std::fs::write(&empty, "x,y,class,confidence\n").unwrap();
    let out = root.join("score_notumor");
    let (code, text) = score_case(f, "case_006", &empty, &out);
    assert_eq!(code, 3, "expected exit 3: {text}");
    assert!(out.join("NO_TUMOR").is_file());
    assert!(!out.join("score.csv").exists());
}

#[test]
fn corrupted_checkpoint_exit_5() {
    let f = fixture();
    let root = f.data.parent().unwrap();
    let bad = root.join("bad.ckpt");
    let mut bytes = std::fs::read(f.model.join("checkpoint.ckpt")).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&bad, bytes).unwrap();
    let out = root.join("score_badckpt");
    let (code, text) = pleo(&[
        "score",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--image",
        f.data.join("images").join("case_006.ppm").to_str().unwrap(),
        "--detections",
        f.data.join("detections").join("case_006.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 5, "expected exit 5: {text}");
    assert!(text.contains("integrity"), "message: {text}");
}

#[test]
fn usage_errors_exit_2() {
    let (code, _) = pleo(&["definitely-not-a-command"]);
    assert_eq!(code, 2);
    let (code, _) = pleo(&["score", "--bogus-flag"]);
    assert_eq!(code, 2);
    let (code, text) = pleo(&["--help"]);
    assert_eq!(code, 0);
    assert!(text.contains("gen-data"));
    let (code, text) = pleo(&[
        "score",
        "--checkpoint",
        "/nonexistent/path.ckpt",
        "--image",
        "/nonexistent/img.ppm",
        "--detections",
        "/nonexistent/d.csv",
        "--out",
        "/tmp/never",
    ]);
    assert_eq!(code, 2, "missing checkpoint should be a generic error: {text}");
}

#[test]
fn gen_data_rejects_tiny_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "data.train_cases = 2\n").unwrap();
    let (code, text) = pleo(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(text.contains("3 cases"), "message: {text}");
}

#[test]
fn grad_check_command_passes() {
    let (code, text) = pleo(&["grad-check"]);
    assert_eq!(code, 0, "grad-check failed: {text}");
    assert!(text.contains("all") && text.contains("gradient checks passed"), "output: {text}");
}
