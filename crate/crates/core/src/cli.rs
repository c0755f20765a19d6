//! Command-line surface: gen-data, train, score, eval, rater-stats,
//! grad-check.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::baseline::joint_train;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck::run_op_grad_checks;
use crate::inference::{
    aggregate_slide_score, build_density_map, mask_tumor, plan_tiles, score_tiles, render_heatmap, TileGrid,
};
use crate::io;
use crate::metrics::{
    leave_one_out_majority_kappa, pairwise_kappa_matrix, regression_report, score_difference_counts, spearman,
    PanelTable,
};
use crate::net::{EmbeddingNet, RegressionNet};
use crate::regressor::{child_seed, train, Roi};
use crate::scalar::Scalar;
use crate::score::{majority_vote, quantize_k, reference_score, PleomorphismScore};
use crate::synthdata::{generate_patch, generate_slide, oracle_detect, simulate_panel, NucleusModel, Region,
    SyntheticSlideSpec};
use crate::TrainScalar;

#[derive(Parser, Debug)]
#[command(name = "pleo", about = "Two-stage continuous nuclear pleomorphism scoring", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the regression network (optionally jointly with the
    /// normal-epithelium baseline).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a slide or ROI raster with a trained checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quantize: Option<usize>,
    },
    /// Agreement report of model scores against rater panels.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inter-rater agreement statistics for a ratings file alone.
    RaterStats {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of every differentiable op.
    GradCheck,
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => cmd_gen_data(&load_config(config.as_deref(), seed)?, &out),
        Command::Train { config, data, out, baseline, epochs, lr, seed } => {
            let mut config = load_config(config.as_deref(), seed)?;
            if let Some(epochs) = epochs {
                config.train.max_epochs = epochs;
            }
            if let Some(lr) = lr {
                config.train.learning_rate = lr;
            }
            config.validate()?;
            cmd_train(&config, &data, &out, baseline)
        }
        Command::Score { checkpoint, image, detections, out, quantize } => {
            cmd_score(&checkpoint, &image, &detections, &out, quantize)
        }
        Command::Eval { scores, ratings, out } => cmd_eval(&scores, &ratings, &out),
        Command::RaterStats { ratings, out } => cmd_rater_stats(&ratings, &out),
        Command::GradCheck => cmd_grad_check(),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

// ---- gen-data ------------------------------------------------------------

/// Evenly spaced severities over [1.05, 2.95]; with n >= 3 every k=3
/// category is hit.
fn severity_grid(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if n == 1 {
                2.0
            } else {
                1.05 + 1.9 * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

pub fn cmd_gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    config.validate()?;
    for split in ["train", "val", "test"] {
        let n = split_cases(config, split);
        if n < 3 {
            return Err(Error::InvalidConfig(format!("split {split} needs >= 3 cases for category coverage, has {n}")));
        }
    }
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("detections"))?;

    let model = NucleusModel::default();
    let mut manifest: Vec<io::ManifestRecord> = Vec::new();
    let mut panels = Vec::new();
    let mut case_counter = 0usize;
    let mut tumor_count = 0usize;
    let mut normal_count = 0usize;
    for (si, split) in ["train", "val", "test"].iter().enumerate() {
        let n = split_cases(config, split);
        for (ci, &severity) in severity_grid(n).iter().enumerate() {
            let id = format!("case_{case_counter:03}");
            case_counter += 1;
            let case_seed = child_seed(config.seed, si as u64, ci as u64, 10);
            let patch = generate_patch::<TrainScalar>(severity, &model, config.data.roi_size, config.data.cell_density, case_seed)?;
            let detections = oracle_detect(&patch, 0.5, 0.02, 0.0, child_seed(config.seed, si as u64, ci as u64, 11))?;
            panels.push(simulate_panel(&id, severity, &config.panel, child_seed(config.seed, si as u64, ci as u64, 12))?);
            write_roi(out, &id, &patch.image, &detections)?;
            manifest.push(manifest_record(&id, split, "tumor", severity, case_seed));
            tumor_count += 1;

            if *split == "train" && ci % config.data.normal_every == 0 {
                let nid = format!("{id}_normal");
                let nseed = child_seed(config.seed, si as u64, ci as u64, 13);
                let spec = SyntheticSlideSpec {
                    width: config.data.roi_size,
                    height: config.data.roi_size,
                    regions: vec![Region::rect(
                        0.0,
                        0.0,
                        config.data.roi_size as f64,
                        config.data.roi_size as f64,
                        1.0,
                        config.data.cell_density,
                        true,
                    )],
                    model,
                    background_seed: child_seed(nseed, 0, 0, 0),
                    seed: nseed,
                };
                let slide = generate_slide::<TrainScalar>(&spec)?;
                let dets = oracle_detect(&slide, 0.5, 0.02, 0.0, child_seed(config.seed, si as u64, ci as u64, 14))?;
                write_roi(out, &nid, &slide.image, &dets)?;
                manifest.push(manifest_record(&nid, split, "normal", 1.0, nseed));
                normal_count += 1;
            }
        }
    }
    io::write_ratings_csv(out.join("ratings.csv"), &panels)?;
    io::write_manifest(out.join("manifest.jsonl"), &manifest)?;
    fs::write(out.join("config.txt"), config.resolved())?;
    println!("wrote {tumor_count} tumor and {normal_count} normal rois across 3 splits to {}", out.display());
    Ok(())
}

fn split_cases(config: &RunConfig, split: &str) -> usize {
    match split {
        "train" => config.data.train_cases,
        "val" => config.data.val_cases,
        _ => config.data.test_cases,
    }
}

fn write_roi<T: Scalar>(
    out: &Path,
    id: &str,
    image: &crate::tensor::Tensor<T>,
    detections: &[crate::synthdata::CellDetection],
) -> Result<()> {
    io::write_ppm(out.join("images").join(format!("{id}.ppm")), &io::tensor_to_rgb8(image)?)?;
    io::write_detections_csv(out.join("detections").join(format!("{id}.csv")), detections)?;
    Ok(())
}

fn manifest_record(id: &str, split: &str, kind: &str, severity: f64, seed: u64) -> io::ManifestRecord {
    vec![
        ("id".to_string(), io::ManifestValue::Str(id.to_string())),
        ("split".to_string(), io::ManifestValue::Str(split.to_string())),
        ("kind".to_string(), io::ManifestValue::Str(kind.to_string())),
        ("severity".to_string(), io::ManifestValue::Num(severity)),
        ("seed".to_string(), io::ManifestValue::Num(seed as f64)),
        ("image".to_string(), io::ManifestValue::Str(format!("images/{id}.ppm"))),
        ("detections".to_string(), io::ManifestValue::Str(format!("detections/{id}.csv"))),
    ]
}

// ---- dataset loading -------------------------------------------------------

/// One manifest entry resolved against the dataset directory.
pub struct DatasetEntry {
    pub id: String,
    pub split: String,
    pub kind: String,
    pub severity: f64,
    pub image: PathBuf,
    pub detections: PathBuf,
}

pub fn read_dataset_manifest(data: &Path) -> Result<Vec<DatasetEntry>> {
    let records = io::read_manifest(data.join("manifest.jsonl"))?;
    records
        .iter()
        .map(|rec| {
            let get_str = |key: &str| -> Result<String> {
                io::manifest_get(rec, key)?
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::InvalidInput(format!("manifest key {key} is not a string")))
            };
            let severity = io::manifest_get(rec, "severity")?
                .as_num()
                .ok_or_else(|| Error::InvalidInput("manifest severity is not numeric".into()))?;
            Ok(DatasetEntry {
                id: get_str("id")?,
                split: get_str("split")?,
                kind: get_str("kind")?,
                severity,
                image: data.join(get_str("image")?),
                detections: data.join(get_str("detections")?),
            })
        })
        .collect()
}

/// Loads a split's ROIs: panel reference scores for tumor entries,
/// severity 1 for normal entries.
pub fn load_rois(
    data: &Path,
    entries: &[DatasetEntry],
    split: &str,
    kind: &str,
    density_sigma: f64,
) -> Result<Vec<Roi<TrainScalar>>> {
    let panels = io::read_ratings_csv(data.join("ratings.csv"))?;
    let mut rois = Vec::new();
    for e in entries.iter().filter(|e| e.split == split && e.kind == kind) {
        let image: crate::tensor::Tensor<TrainScalar> = io::rgb8_to_tensor(&io::read_ppm(&e.image)?)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let detections = io::read_detections_csv(&e.detections)?;
        let density = build_density_map(&detections, density_sigma, w, h)?;
        let reference = if kind == "normal" {
            PleomorphismScore::raw(1.0)?
        } else {
            let panel = panels
                .iter()
                .find(|p| p.case_id == e.id)
                .ok_or_else(|| Error::InvalidInput(format!("no rater panel for case {}", e.id)))?;
            reference_score(panel)?
        };
        rois.push(Roi { id: e.id.clone(), image, density, reference });
    }
    Ok(rois)
}

// ---- train -----------------------------------------------------------------

pub fn cmd_train(config: &RunConfig, data: &Path, out: &Path, baseline: bool) -> Result<()> {
    let entries = read_dataset_manifest(data)?;
    let train_pool = load_rois(data, &entries, "train", "tumor", config.infer.density_sigma)?;
    let val_pool = load_rois(data, &entries, "val", "tumor", config.infer.density_sigma)?;
    if train_pool.is_empty() || val_pool.is_empty() {
        return Err(Error::InvalidInput("dataset is missing train or val tumor rois".into()));
    }
    let mut net = RegressionNet::<TrainScalar>::build(config.net.clone(), config.seed)?;
    let mut history_csv = String::new();
    if baseline {
        let normal_pool = load_rois(data, &entries, "train", "normal", config.infer.density_sigma)?;
        if normal_pool.is_empty() {
            return Err(Error::InvalidInput("baseline training needs normal rois in the train split".into()));
        }
        let mut embed = EmbeddingNet::<TrainScalar>::build(config.embed_config(), config.seed.wrapping_add(1))?;
        let history = joint_train(
            &mut net,
            &mut embed,
            &train_pool,
            &normal_pool,
            &val_pool,
            &config.train,
            &config.weights,
        )?;
        history_csv.push_str("epoch,loss_t,loss_n,val_loss\n");
        for h in &history {
            history_csv.push_str(&format!("{},{},{},{}\n", h.epoch, h.loss_t, h.loss_n, h.val_loss));
        }
    } else {
        let history = train(&mut net, &train_pool, &val_pool, &config.train)?;
        history_csv.push_str("epoch,train_loss,val_loss\n");
        for h in &history {
            history_csv.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.val_loss));
        }
    }
    fs::create_dir_all(out)?;
    let ckpt_config: Vec<(String, String)> = config
        .resolved()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once(" = ").expect("resolved config line");
            (k.to_string(), v.to_string())
        })
        .collect();
    io::save_checkpoint(out.join("checkpoint.ckpt"), &io::Checkpoint::from_net(&net, ckpt_config))?;
    fs::write(out.join("history.csv"), history_csv)?;
    fs::write(out.join("config.txt"), config.resolved())?;
    println!("trained checkpoint written to {}", out.join("checkpoint.ckpt").display());
    Ok(())
}

// ---- score -----------------------------------------------------------------

pub fn cmd_score(
    checkpoint: &Path,
    image_path: &Path,
    detections_path: &Path,
    out: &Path,
    quantize: Option<usize>,
) -> Result<()> {
    let ckpt = io::load_checkpoint(checkpoint)?;
    let mut config = RunConfig::default();
    for (k, v) in &ckpt.config {
        config.set(k, v)?;
    }
    let k = quantize.unwrap_or(config.infer.quantize_k);
    let image: crate::tensor::Tensor<TrainScalar> = io::rgb8_to_tensor(&io::read_ppm(image_path)?)?;
    let detections = io::read_detections_csv(detections_path)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let grid = TileGrid {
        tile_size: config.infer.tile_size,
        overlap: config.infer.overlap,
        block_size: config.infer.block_size,
        width: w,
        height: h,
    };
    plan_tiles(&grid)?; // validate geometry before building the net
    let mut net = RegressionNet::<TrainScalar>::build(config.net.clone(), 0)?;
    ckpt.apply_to_net(&mut net)?;
    let acc = score_tiles(&image, &grid, config.infer.batch_size, |batch| net.score_batch(batch))?;
    let map = mask_tumor(&acc, &detections, &grid, config.infer.mask_threshold)?;

    fs::create_dir_all(out)?;
    fs::write(out.join("scoremap.csv"), map.to_csv())?;
    io::write_ppm(out.join("heatmap.ppm"), &render_heatmap(&map))?;
    let case_id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match aggregate_slide_score(std::slice::from_ref(&map), config.infer.pooling) {
        Ok(score) => {
            let quantized = quantize_k(score, k)?;
            fs::write(
                out.join("score.csv"),
                format!("case_id,score,quantized\n{case_id},{},{quantized}\n", score.value()),
            )?;
            println!("{case_id}: score {:.4}, category {quantized} of {k}", score.value());
            Ok(())
        }
        Err(e @ Error::NoTumorFound(_)) => {
            fs::write(out.join("NO_TUMOR"), "no defined blocks after tumor masking\n")?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

// ---- eval / rater-stats ------------------------------------------------------

fn read_scores_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 2 {
            return Err(Error::InvalidInput(format!("scores line {}: expected case_id,score", ln + 1)));
        }
        let score: f64 = cols[1]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("scores line {}: bad score {:?}", ln + 1, cols[1])))?;
        out.push((cols[0].to_string(), score));
    }
    Ok(out)
}

/// Rater table: participants x cases, checking every panel carries the
/// same rater set in the same order.
fn panel_table(panels: &[crate::score::RaterPanel]) -> Result<(Vec<String>, Vec<String>, Vec<u8>)> {
    if panels.is_empty() {
        return Err(Error::InvalidInput("no panels in ratings file".into()));
    }
    let raters: Vec<String> = panels[0].scores.iter().map(|s| s.rater_id.clone()).collect();
    let mut case_ids = Vec::new();
    let mut categories = Vec::new();
    for p in panels {
        let ids: Vec<&String> = p.scores.iter().map(|s| &s.rater_id).collect();
        if ids.len() != raters.len() || ids.iter().zip(&raters).any(|(a, b)| *a != b) {
            return Err(Error::InvalidInput(format!("case {}: rater set differs from the first case", p.case_id)));
        }
        case_ids.push(p.case_id.clone());
        categories.extend(p.scores.iter().map(|s| s.score));
    }
    Ok((raters, case_ids, categories))
}

fn kappa_matrix_csv(m: &crate::metrics::KappaMatrix) -> String {
    let mut out = String::from("participant");
    for p in &m.participants {
        out.push_str(&format!(",{p}"));
    }
    out.push_str(",mean_excluding_self\n");
    for (i, p) in m.participants.iter().enumerate() {
        out.push_str(p);
        for j in 0..m.participants.len() {
            out.push_str(&format!(",{:.6}", m.get(i, j)));
        }
        out.push_str(&format!(",{:.6}\n", m.mean_excluding_self[i]));
    }
    out
}

pub fn cmd_eval(scores_path: &Path, ratings_path: &Path, out: &Path) -> Result<()> {
    let scores = read_scores_csv(scores_path)?;
    let panels = io::read_ratings_csv(ratings_path)?;
    // alignment check with offenders listed
    let score_ids: std::collections::BTreeSet<&str> = scores.iter().map(|(id, _)| id.as_str()).collect();
    let panel_ids: std::collections::BTreeSet<&str> = panels.iter().map(|p| p.case_id.as_str()).collect();
    if score_ids != panel_ids {
        let missing: Vec<&&str> = panel_ids.difference(&score_ids).collect();
        let extra: Vec<&&str> = score_ids.difference(&panel_ids).collect();
        return Err(Error::InvalidInput(format!(
            "case ids disagree; unscored {missing:?}, unrated {extra:?}"
        )));
    }
    let by_id: std::collections::BTreeMap<&str, f64> = scores.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    let predictions: Vec<f64> = panels.iter().map(|p| by_id[p.case_id.as_str()]).collect();
    let references: Vec<f64> = panels
        .iter()
        .map(|p| reference_score(p).map(|s| s.value()))
        .collect::<Result<_>>()?;
    let report = regression_report(&predictions, &references)?;
    let rho = spearman(&predictions, &references)?;

    let (mut raters, case_ids, mut categories) = panel_table(&panels)?;
    let n_raters = raters.len();
    raters.push("AI".to_string());
    let mut with_ai = Vec::with_capacity(categories.len() + case_ids.len());
    for (c, _) in case_ids.iter().enumerate() {
        with_ai.extend_from_slice(&categories[c * n_raters..(c + 1) * n_raters]);
        with_ai.push(quantize_k(PleomorphismScore::raw(predictions[c])?, 3)?);
    }
    categories = with_ai;
    let table = PanelTable::new(raters, case_ids, categories)?;
    let kappa = pairwise_kappa_matrix(&table, 3)?;

    fs::create_dir_all(out)?;
    fs::write(
        out.join("report.txt"),
        format!(
            "cases = {}\nmae = {:.6}\nmse = {:.6}\nmdae = {:.6}\nexplained_variance = {:.6}\nr2 = {:.6}\nspearman = {:.6}\n",
            panels.len(),
            report.mae,
            report.mse,
            report.mdae,
            report.explained_variance,
            report.r2,
            rho
        ),
    )?;
    fs::write(out.join("kappa.csv"), kappa_matrix_csv(&kappa))?;
    write_loo_and_histogram(&table, out)?;
    println!("eval report written to {}", out.display());
    Ok(())
}

fn write_loo_and_histogram(table: &PanelTable, out: &Path) -> Result<()> {
    let mut loo = String::from("participant,loo_majority_kappa\n");
    if table.participants.len() >= 3 {
        for (i, p) in table.participants.iter().enumerate() {
            match leave_one_out_majority_kappa(table, i, 3) {
                Ok(k) => loo.push_str(&format!("{p},{k:.6}\n")),
                Err(Error::UndefinedMetric(_)) => loo.push_str(&format!("{p},undefined\n")),
                Err(e) => return Err(e),
            }
        }
    }
    fs::write(out.join("loo_kappa.csv"), loo)?;

    // difference histogram of each participant against the leave-them-out majority
    let mut hist = String::from("participant,diff_-2,diff_-1,diff_0,diff_+1,diff_+2\n");
    if table.participants.len() >= 3 {
        for (i, p) in table.participants.iter().enumerate() {
            let majorities: Vec<u8> = table
                .case_ids
                .iter()
                .enumerate()
                .map(|(c, case_id)| {
                    let scores: Vec<crate::score::ObserverScore> = (0..table.participants.len())
                        .filter(|&q| q != i)
                        .map(|q| {
                            crate::score::ObserverScore::new(
                                table.participants[q].clone(),
                                table.categories[c * table.participants.len() + q],
                                None,
                            )
                        })
                        .collect::<Result<_>>()?;
                    majority_vote(&crate::score::RaterPanel::new(case_id.clone(), scores)?)
                })
                .collect::<Result<_>>()?;
            let counts = score_difference_counts(&table.column(i), &majorities)?;
            hist.push_str(&format!(
                "{p},{},{},{},{},{}\n",
                counts[0], counts[1], counts[2], counts[3], counts[4]
            ));
        }
    }
    fs::write(out.join("difference_histogram.csv"), hist)?;
    Ok(())
}

pub fn cmd_rater_stats(ratings_path: &Path, out: &Path) -> Result<()> {
    let panels = io::read_ratings_csv(ratings_path)?;
    let (raters, case_ids, categories) = panel_table(&panels)?;
    let table = PanelTable::new(raters, case_ids, categories)?;
    let kappa = pairwise_kappa_matrix(&table, 3)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("kappa.csv"), kappa_matrix_csv(&kappa))?;
    write_loo_and_histogram(&table, out)?;
    let grand_mean =
        kappa.mean_excluding_self.iter().sum::<f64>() / kappa.mean_excluding_self.len() as f64;
    fs::write(
        out.join("report.txt"),
        format!("participants = {}\ncases = {}\nmean_pairwise_kappa = {grand_mean:.6}\n", table.participants.len(), table.case_ids.len()),
    )?;
    println!("rater statistics written to {}", out.display());
    Ok(())
}

pub fn cmd_grad_check() -> Result<()> {
    let checks = run_op_grad_checks()?;
    let mut failed = 0usize;
    for c in &checks {
        println!(
            "{:<18} max_rel_err {:.3e}  tolerance {:.0e}  {}",
            c.name,
            c.max_rel_err,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
        if !c.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::InvalidInput(format!("{failed} of {} gradient checks failed", checks.len())));
    }
    println!("all {} gradient checks passed", checks.len());
    Ok(())
}
