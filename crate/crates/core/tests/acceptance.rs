//! Release gate: ten checks, one printed PASS/FAIL line each.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pleo::gradcheck::{grad_check_coords, run_op_grad_checks};
use pleo::inference::{
    aggregate_roi_score, build_density_map, grad_cam_map, mask_tumor, score_tiles, TileGrid,
};
use pleo::io::{load_checkpoint, save_checkpoint, Checkpoint};
use pleo::metrics::{quadratic_kappa, spearman};
use pleo::net::{EmbeddingNet, RegressionNet, RegressionNetConfig};
use pleo::regressor::{child_seed, train, Roi, TrainConfig};
use pleo::score::{quantize_k, reference_score, PleomorphismScore};
use pleo::synthdata::{
    generate_patch, generate_slide, oracle_detect, simulate_panel, CellDetection, NucleusModel,
    Region, SimulatedPanelConfig, SyntheticSlideSpec,
};
use pleo::{Error, Tensor};

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("{name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name} failed: {detail}");
}

// ---- shared synthetic dataset and trained model ------------------------------

const ROI_SIZE: usize = 96;
const CELL_DENSITY: f64 = 0.008;
const BASE_SEED: u64 = 0;

struct TestCase {
    severity: f64,
    image: Tensor<f32>,
    detections: Vec<CellDetection>,
    reference: f64,
}

struct Shared {
    net: RegressionNet<f32>,
    train_pool: Vec<Roi<f32>>,
    val_pool: Vec<Roi<f32>>,
    normal_pool: Vec<Roi<f32>>,
    test_cases: Vec<TestCase>,
    plain_mae: f64,
    plain_spearman: f64,
}

fn severity_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| 1.05 + 1.9 * i as f64 / (n - 1) as f64).collect()
}

fn tumor_roi(id: String, severity: f64, si: u64, ci: u64) -> (Roi<f32>, Vec<CellDetection>) {
    let slide = generate_patch::<f32>(
        severity,
        &NucleusModel::default(),
        ROI_SIZE,
        CELL_DENSITY,
        child_seed(BASE_SEED, si, ci, 10),
    )
    .unwrap();
    let detections = oracle_detect(&slide, 0.5, 0.02, 0.0, child_seed(BASE_SEED, si, ci, 11)).unwrap();
    let density = build_density_map(&detections, 4.0, ROI_SIZE, ROI_SIZE).unwrap();
    let panel = simulate_panel(
        &id,
        severity,
        &SimulatedPanelConfig::default(),
        child_seed(BASE_SEED, si, ci, 12),
    )
    .unwrap();
    let reference = reference_score(&panel).unwrap();
    (Roi { id, image: slide.image, density, reference }, detections)
}

fn normal_roi(id: String, ci: u64) -> Roi<f32> {
    let seed = child_seed(BASE_SEED, 0, ci, 13);
    let spec = SyntheticSlideSpec {
        width: ROI_SIZE,
        height: ROI_SIZE,
        regions: vec![Region::rect(0.0, 0.0, ROI_SIZE as f64, ROI_SIZE as f64, 1.0, CELL_DENSITY, true)],
        model: NucleusModel::default(),
        background_seed: child_seed(seed, 0, 0, 0),
        seed,
    };
    let slide = generate_slide::<f32>(&spec).unwrap();
    let detections = oracle_detect(&slide, 0.5, 0.02, 0.0, child_seed(BASE_SEED, 0, ci, 14)).unwrap();
    let density = build_density_map(&detections, 4.0, ROI_SIZE, ROI_SIZE).unwrap();
    Roi { id, image: slide.image, density, reference: PleomorphismScore::raw(1.0).unwrap() }
}

/// Tiled inference over one raster: overlapping-tile scoring, tumor
/// masking, unweighted block mean.
fn predict(net: &RegressionNet<f32>, image: &Tensor<f32>, detections: &[CellDetection]) -> f64 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let grid = TileGrid::desk_scale(w, h);
    let acc = score_tiles(image, &grid, 16, |batch| net.score_batch(batch)).unwrap();
    let map = mask_tumor(&acc, detections, &grid, 1).unwrap();
    aggregate_roi_score(&map).unwrap().value()
}

fn mae(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let mut train_pool = Vec::new();
        for (ci, s) in severity_grid(18).into_iter().enumerate() {
            train_pool.push(tumor_roi(format!("train_{ci:03}"), s, 0, ci as u64).0);
        }
        let mut val_pool = Vec::new();
        for (ci, s) in severity_grid(9).into_iter().enumerate() {
            val_pool.push(tumor_roi(format!("val_{ci:03}"), s, 1, ci as u64).0);
        }
        let normal_pool: Vec<Roi<f32>> = (0..6).map(|ci| normal_roi(format!("normal_{ci:03}"), ci)).collect();
        let mut test_cases = Vec::new();
        for (ci, s) in severity_grid(12).into_iter().enumerate() {
            let (roi, detections) = tumor_roi(format!("test_{ci:03}"), s, 2, ci as u64);
            test_cases.push(TestCase {
                severity: s,
                image: roi.image,
                detections,
                reference: roi.reference.value(),
            });
        }

        let config = TrainConfig::desk_default();
        let mut net = RegressionNet::<f32>::build(RegressionNetConfig::desk_default(), BASE_SEED).unwrap();
        train(&mut net, &train_pool, &val_pool, &config).unwrap();

        let predictions: Vec<f64> =
            test_cases.iter().map(|c| predict(&net, &c.image, &c.detections)).collect();
        let references: Vec<f64> = test_cases.iter().map(|c| c.reference).collect();
        let severities: Vec<f64> = test_cases.iter().map(|c| c.severity).collect();
        let plain_mae = mae(&predictions, &references);
        let plain_spearman = spearman(&severities, &predictions).unwrap();

        Shared { net, train_pool, val_pool, normal_pool, test_cases, plain_mae, plain_spearman }
    })
}

// ---- A1 gradient fidelity ----------------------------------------------------

#[test]
fn a01_gradient_fidelity() {
    let started = Instant::now();
    let checks = run_op_grad_checks().unwrap();
    let ops_ok = checks.iter().all(|c| c.passed());
    let worst = checks
        .iter()
        .map(|c| (c.max_rel_err / c.tolerance, c.name, c.max_rel_err))
        .fold((0.0, "", 0.0), |a, b| if b.0 > a.0 { b } else { a });

    // whole desk-scale network + loss, double precision, probed at
    // sampled input coordinates
    let net = RegressionNet::<f64>::build(RegressionNetConfig::desk_default(), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let n = 2 * 3 * 64 * 64;
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let point = Tensor::new(vec![2, 3, 64, 64], data).unwrap();
    let targets = [1.7, 2.4];
    let coords: Vec<usize> = (0..n).step_by(509).collect();
    let err = grad_check_coords(
        |g, leaf| {
            let fwd = net.forward(g, leaf, true)?;
            let l = g.smooth_l1(fwd.output, &targets, 1.0)?;
            Ok(g.mean_all(l))
        },
        &point,
        1e-5,
        &coords,
    )
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        "A1 gradient fidelity",
        ops_ok && err < 1e-4 && elapsed < 120.0,
        &format!(
            "worst op {} rel err {:.2e}, full-net rel err {:.2e} < 1e-4, {:.1}s",
            worst.1, worst.2, err, elapsed
        ),
    );
}

// ---- A2 tile aggregation oracle ------------------------------------------------

fn oracle_tile_means(image: &Tensor<f64>, grid: &TileGrid) -> (Vec<f64>, Vec<u64>) {
    let (w, h, t, b) = (grid.width, grid.height, grid.tile_size, grid.block_size);
    let stride = t - grid.overlap;
    let origins = |extent: usize| -> Vec<usize> {
        let mut v = Vec::new();
        let mut o = 0;
        while o + t <= extent {
            v.push(o);
            o += stride;
        }
        if *v.last().unwrap() != extent - t {
            v.push(extent - t);
        }
        v
    };
    let (bx_n, by_n) = (w.div_ceil(b), h.div_ceil(b));
    let mut sum = vec![0.0; bx_n * by_n];
    let mut count = vec![0u64; bx_n * by_n];
    let data = image.data();
    for &oy in &origins(h) {
        for &ox in &origins(w) {
            let mut acc = 0.0;
            for c in 0..3 {
                for y in oy..oy + t {
                    for x in ox..ox + t {
                        acc += data[c * w * h + y * w + x];
                    }
                }
            }
            let score = acc / (3 * t * t) as f64;
            for by in 0..by_n {
                for bx in 0..bx_n {
                    let (x0, y0) = (bx * b, by * b);
                    let (x1, y1) = (((bx + 1) * b).min(w), ((by + 1) * b).min(h));
                    if x0 >= ox && x1 <= ox + t && y0 >= oy && y1 <= oy + t {
                        sum[by * bx_n + bx] += score;
                        count[by * bx_n + bx] += 1;
                    }
                }
            }
        }
    }
    (sum, count)
}

#[test]
fn a02_aggregation_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut max_dev = 0.0f64;
    for case in 0..100 {
        let grid = if case == 0 {
            TileGrid::paper_scale(1024, 640)
        } else {
            let b = [2usize, 4, 8][rng.random_range(0..3)];
            let stride = b * rng.random_range(1..=3);
            let tile = stride + b * rng.random_range(0..=6);
            TileGrid {
                tile_size: tile,
                overlap: tile - stride,
                block_size: b,
                width: tile + rng.random_range(0..3 * stride + 5),
                height: tile + rng.random_range(0..3 * stride + 5),
            }
        };
        let n = 3 * grid.width * grid.height;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let image = Tensor::new(vec![3, grid.height, grid.width], data).unwrap();
        let acc = score_tiles(&image, &grid, 5, |batch| {
            let t = grid.tile_size;
            let per = 3 * t * t;
            Ok(batch
                .data()
                .chunks(per)
                .map(|c| c.iter().sum::<f64>() / per as f64)
                .collect())
        })
        .unwrap();
        let (sum, count) = oracle_tile_means(&image, &grid);
        for by in 0..grid.blocks_y() {
            for bx in 0..grid.blocks_x() {
                let i = by * grid.blocks_x() + bx;
                assert_eq!(acc.count[i], count[i], "count mismatch at ({bx},{by}) case {case}");
                if count[i] > 0 {
                    let dev = (acc.mean(bx, by).unwrap() - sum[i] / count[i] as f64).abs();
                    max_dev = max_dev.max(dev);
                }
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        "A2 aggregation oracle",
        max_dev < 1e-6 && elapsed < 60.0,
        &format!("100 configs incl. (512,448,64), max |dev| {max_dev:.2e} < 1e-6, {elapsed:.1}s"),
    );
}

// ---- A3 end-to-end learning ----------------------------------------------------

#[test]
fn a03_end_to_end_learning() {
    let started = Instant::now();
    let s = shared();
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        "A3 end-to-end learning",
        s.plain_mae <= 0.30 && s.plain_spearman >= 0.90 && elapsed < 1800.0,
        &format!(
            "held-out mae {:.3} <= 0.30, severity spearman {:.3} >= 0.90, {:.0}s",
            s.plain_mae, s.plain_spearman, elapsed
        ),
    );
}

// ---- A4 baseline-extension parity -----------------------------------------------

#[test]
fn a04_baseline_parity() {
    use pleo::baseline::{joint_train, JointLossWeights};
    let s = shared();
    let config = TrainConfig::desk_default();
    let run = pleo::config::RunConfig::default();
    let mut net = RegressionNet::<f32>::build(RegressionNetConfig::desk_default(), BASE_SEED).unwrap();
    let mut embed = EmbeddingNet::<f32>::build(run.embed_config(), BASE_SEED.wrapping_add(1)).unwrap();
    let history = joint_train(
        &mut net,
        &mut embed,
        &s.train_pool,
        &s.normal_pool,
        &s.val_pool,
        &config,
        &JointLossWeights::default(),
    )
    .unwrap();
    let finite = history
        .iter()
        .all(|h| h.loss_t.is_finite() && h.loss_n.is_finite() && h.val_loss.is_finite());
    let predictions: Vec<f64> =
        s.test_cases.iter().map(|c| predict(&net, &c.image, &c.detections)).collect();
    let references: Vec<f64> = s.test_cases.iter().map(|c| c.reference).collect();
    let joint_mae = mae(&predictions, &references);
    let gap = (joint_mae - s.plain_mae).abs();
    verdict(
        "A4 baseline-extension parity",
        finite && gap <= 0.05,
        &format!(
            "losses finite over {} epochs, joint mae {:.3} vs plain {:.3}, |gap| {:.3} <= 0.05",
            history.len(),
            joint_mae,
            s.plain_mae,
            gap
        ),
    );
}

// ---- A5 kappa oracle --------------------------------------------------------------

/// Independent quadratic-weighted kappa from first principles:
/// kappa = 1 - n * sum(w.O) / sum(w.(r x c)) with w_ij = (i-j)^2.
fn kappa_oracle(a: &[u8], b: &[u8], k: usize) -> Option<f64> {
    let n = a.len() as f64;
    let mut obs = vec![0.0; k * k];
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    for (&x, &y) in a.iter().zip(b) {
        obs[(x as usize - 1) * k + (y as usize - 1)] += 1.0;
        row[x as usize - 1] += 1.0;
        col[y as usize - 1] += 1.0;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64) - (j as f64)).powi(2);
            num += w * obs[i * k + j];
            den += w * row[i] * col[j];
        }
    }
    if den == 0.0 {
        return None;
    }
    Some(1.0 - n * num / den)
}

#[test]
fn a05_kappa_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut max_dev = 0.0f64;
    let mut compared = 0;
    while compared < 1000 {
        let k = rng.random_range(2..=5usize);
        let n = rng.random_range(20..=60usize);
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(1..=k as u8)).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.random_range(1..=k as u8)).collect();
        let Some(expect) = kappa_oracle(&a, &b, k) else { continue };
        let got = quadratic_kappa(&a, &b, k).unwrap();
        max_dev = max_dev.max((got - expect).abs());
        if compared % 10 == 0 {
            assert_eq!(quadratic_kappa(&a, &a, k).unwrap(), 1.0, "self-kappa must be 1");
        }
        compared += 1;
    }

    // chance level: mean kappa over random permutations of one rater
    let n = 400;
    let a: Vec<u8> = (0..n).map(|i| (i % 3 + 1) as u8).collect();
    let mut b = a.clone();
    let mut acc = 0.0;
    let trials = 200;
    for _ in 0..trials {
        for i in (1..n).rev() {
            b.swap(i, rng.random_range(0..=i));
        }
        acc += quadratic_kappa(&a, &b, 3).unwrap();
    }
    let chance = acc / trials as f64;
    verdict(
        "A5 kappa oracle",
        max_dev < 1e-12 && chance.abs() <= 0.05,
        &format!("1000 tables max |dev| {max_dev:.2e} < 1e-12, permutation mean {chance:.4} within +/-0.05"),
    );
}

// ---- A6 quantizer exactness ----------------------------------------------------------

#[test]
fn a06_quantizer_exactness() {
    let delta = 1e-9;
    let third = 2.0 / 3.0;
    let probes = [
        (1.0, 1u8),
        (1.5, 1),
        (1.0 + third - delta, 1),
        (1.0 + third, 2),
        (2.0, 2),
        (1.0 + 2.0 * third, 3),
        (1.0 + 2.0 * third + delta, 3),
        (3.0, 3),
    ];
    let mut ok = true;
    let mut detail = String::new();
    for (value, expect) in probes {
        let got = quantize_k(PleomorphismScore::raw(value).unwrap(), 3).unwrap();
        if got != expect {
            ok = false;
        }
        detail.push_str(&format!("{value:.6}->{got} "));
    }
    verdict("A6 quantizer exactness", ok, detail.trim());
}

// ---- A7 slide-level correctness --------------------------------------------------------

#[test]
fn a07_slide_level_correctness() {
    let s = shared();
    // severities at least 0.12 inside their k=3 bin
    let severities = [
        1.05, 1.12, 1.20, 1.28, 1.35, 1.42, 1.50, 1.80, 1.88, 1.95, 2.03, 2.10, 2.18, 2.45, 2.55,
        2.65, 2.72, 2.80, 2.88, 2.95,
    ];
    let mut hits = 0;
    let mut max_gap = 0u8;
    for (i, &severity) in severities.iter().enumerate() {
        let seed = child_seed(77, 3, i as u64, 0);
        let spec = SyntheticSlideSpec {
            width: 128,
            height: 128,
            regions: vec![Region::rect(8.0, 8.0, 120.0, 120.0, severity, CELL_DENSITY, false)],
            model: NucleusModel::default(),
            background_seed: child_seed(seed, 0, 0, 0),
            seed,
        };
        let slide = generate_slide::<f32>(&spec).unwrap();
        let detections = oracle_detect(&slide, 0.5, 0.02, 0.0, child_seed(77, 3, i as u64, 1)).unwrap();
        let predicted = predict(&s.net, &slide.image, &detections);
        let got = quantize_k(PleomorphismScore::raw(predicted).unwrap(), 3).unwrap();
        let expect = quantize_k(PleomorphismScore::raw(severity).unwrap(), 3).unwrap();
        if got == expect {
            hits += 1;
        }
        max_gap = max_gap.max(got.abs_diff(expect));
    }
    verdict(
        "A7 slide-level correctness",
        hits >= 17 && max_gap <= 1,
        &format!("{hits}/20 quantized matches (>= 17), max category gap {max_gap} <= 1"),
    );
}

// ---- A8 saliency localization ------------------------------------------------------------

#[test]
fn a08_saliency_localization() {
    let s = shared();
    let mut inside_wins = 0;
    let total = 100;
    for i in 0..total {
        let severity = 1.1 + 1.8 * (i as f64) / (total - 1) as f64;
        let slide =
            generate_patch::<f32>(severity, &NucleusModel::default(), 64, CELL_DENSITY, child_seed(99, 4, i as u64, 0))
                .unwrap();
        let cam = grad_cam_map(&s.net, &slide.image).unwrap();
        let mut mask = vec![false; 64 * 64];
        for nucleus in &slide.nuclei {
            let (sin, cos) = nucleus.angle.sin_cos();
            for y in 0..64usize {
                for x in 0..64usize {
                    let dx = x as f64 + 0.5 - nucleus.cx;
                    let dy = y as f64 + 0.5 - nucleus.cy;
                    let u = (dx * cos + dy * sin) / nucleus.rx;
                    let v = (-dx * sin + dy * cos) / nucleus.ry;
                    if u * u + v * v <= 1.0 {
                        mask[y * 64 + x] = true;
                    }
                }
            }
        }
        let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0usize, 0.0, 0usize);
        for (j, &inside) in mask.iter().enumerate() {
            if inside {
                in_sum += cam.data[j];
                in_n += 1;
            } else {
                out_sum += cam.data[j];
                out_n += 1;
            }
        }
        if in_n > 0 && out_n > 0 && in_sum / in_n as f64 > out_sum / out_n as f64 {
            inside_wins += 1;
        }
    }
    verdict(
        "A8 saliency localization",
        inside_wins >= 80,
        &format!("nuclei brighter than background in {inside_wins}/100 patches (>= 80)"),
    );
}

// ---- A9 CLI reproducibility ------------------------------------------------------------------

fn run_cli(args: &[&str]) -> i32 {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_pleo"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::inherit())
        .status()
        .expect("spawn pleo");
    status.code().unwrap_or(-1)
}

fn dir_snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn a09_cli_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let config_path = root.join("run.cfg");
    std::fs::write(
        &config_path,
        "data.train_cases = 3\ndata.val_cases = 3\ndata.test_cases = 3\n\
         train.max_epochs = 2\ntrain.train_iters_per_epoch = 4\ntrain.val_iters_per_epoch = 2\n\
         train.patience_epochs = 2\n",
    )
    .unwrap();
    let cfg = config_path.to_str().unwrap();

    let mut snapshots: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for pass in ["one", "two"] {
        let data = root.join(format!("data_{pass}"));
        let model = root.join(format!("model_{pass}"));
        let eval = root.join(format!("eval_{pass}"));
        assert_eq!(run_cli(&["gen-data", "--config", cfg, "--out", data.to_str().unwrap(), "--seed", "5"]), 0);
        assert_eq!(
            run_cli(&[
                "train",
                "--config",
                cfg,
                "--data",
                data.to_str().unwrap(),
                "--out",
                model.to_str().unwrap(),
                "--seed",
                "5"
            ]),
            0
        );
        // score the three test-split cases and pool them for eval
        let mut scores = String::from("case_id,score\n");
        for case in ["case_006", "case_007", "case_008"] {
            let out = root.join(format!("score_{pass}_{case}"));
            assert_eq!(
                run_cli(&[
                    "score",
                    "--checkpoint",
                    model.join("checkpoint.ckpt").to_str().unwrap(),
                    "--image",
                    data.join("images").join(format!("{case}.ppm")).to_str().unwrap(),
                    "--detections",
                    data.join("detections").join(format!("{case}.csv")).to_str().unwrap(),
                    "--out",
                    out.to_str().unwrap(),
                ]),
                0
            );
            let line = std::fs::read_to_string(out.join("score.csv")).unwrap();
            let row = line.lines().nth(1).unwrap();
            let mut cols = row.split(',');
            scores.push_str(&format!("{},{}\n", cols.next().unwrap(), cols.next().unwrap()));
        }
        let scores_path = root.join(format!("scores_{pass}.csv"));
        std::fs::write(&scores_path, scores).unwrap();
        // ratings restricted to the scored cases
        let ratings = std::fs::read_to_string(data.join("ratings.csv")).unwrap();
        let filtered: String = ratings
            .lines()
            .enumerate()
            .filter(|(i, l)| *i == 0 || l.starts_with("case_006") || l.starts_with("case_007") || l.starts_with("case_008"))
            .map(|(_, l)| format!("{l}\n"))
            .collect();
        let ratings_path = root.join(format!("ratings_{pass}.csv"));
        std::fs::write(&ratings_path, filtered).unwrap();
        assert_eq!(
            run_cli(&[
                "eval",
                "--scores",
                scores_path.to_str().unwrap(),
                "--ratings",
                ratings_path.to_str().unwrap(),
                "--out",
                eval.to_str().unwrap(),
            ]),
            0
        );

        let mut snap = dir_snapshot(&data);
        snap.extend(dir_snapshot(&model));
        for case in ["case_006", "case_007", "case_008"] {
            snap.extend(dir_snapshot(&root.join(format!("score_{pass}_{case}"))));
        }
        snap.extend(dir_snapshot(&eval));
        snapshots.push(snap);
    }
    let identical = snapshots[0] == snapshots[1];
    let n_files = snapshots[0].len();
    verdict(
        "A9 reproducibility",
        identical && n_files > 0,
        &format!("gen-data/train/score/eval reruns byte-identical across {n_files} files"),
    );
}

// ---- A10 checkpoint integrity ------------------------------------------------------------------

#[test]
fn a10_checkpoint_integrity() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("net.ckpt");
    let config = RegressionNetConfig {
        input_size: 16,
        stem_channels: 8,
        blocks: vec![(2, 6)],
        transition_compression: 0.5,
        head_features: 24,
    };
    let net = RegressionNet::<f32>::build(config.clone(), 3).unwrap();
    let ckpt = Checkpoint::from_net(&net, vec![("note".into(), "a10".into())]);
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let mut reloaded = RegressionNet::<f32>::build(config, 4).unwrap();
    loaded.apply_to_net(&mut reloaded).unwrap();
    let round_trip_exact = net
        .named_params()
        .iter()
        .zip(reloaded.named_params())
        .all(|((_, a), (_, b))| {
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let path2 = tmp.path().join("net2.ckpt");
    save_checkpoint(&path2, &Checkpoint::from_net(&reloaded, loaded.config.clone())).unwrap();
    let bytes_exact = std::fs::read(&path).unwrap() == std::fs::read(&path2).unwrap();

    let original = std::fs::read(&path).unwrap();
    let corruptions: Vec<(&str, Vec<u8>)> = vec![
        ("bad magic", {
            let mut b = original.clone();
            b[0] ^= 0xff;
            b
        }),
        ("bad version", {
            let mut b = original.clone();
            b[4] = 99;
            b
        }),
        ("truncated payload", original[..original.len() - 7].to_vec()),
        ("trailing garbage", {
            let mut b = original.clone();
            b.extend_from_slice(&[0u8; 9]);
            b
        }),
    ];
    let mut rejected = 0;
    for (label, bytes) in &corruptions {
        let p = tmp.path().join("bad.ckpt");
        std::fs::write(&p, bytes).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Integrity { .. }) => rejected += 1,
            other => panic!("{label}: expected integrity error, got {other:?}"),
        }
    }
    verdict(
        "A10 checkpoint integrity",
        round_trip_exact && bytes_exact && rejected == corruptions.len(),
        &format!("round trip bit-exact, resave byte-identical, {rejected}/4 corruptions rejected"),
    );
}
