//! Deterministic synthetic stand-in for clinical slides: parametric
//! nucleus images with known severity, simulated rater panels, and an
//! oracle cell detector with the frozen-inference contract of the
//! upstream detection network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::score::{Confidence, ObserverScore, RaterPanel};
use crate::tensor::Tensor;

/// Affine function of severity, anchored at s = 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub at_one: f64,
    pub slope: f64,
}

impl Affine {
    pub fn eval(&self, s: f64) -> f64 {
        self.at_one + self.slope * (s - 1.0)
    }
}

/// Morphology statistics as functions of severity; all monotone
/// non-decreasing on [1,3].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NucleusModel {
    pub base_radius: f64,
    pub radius_cv: Affine,
    pub eccentricity_max: Affine,
    pub intensity_jitter: Affine,
    pub chromatin_amp: Affine,
}

impl Default for NucleusModel {
    fn default() -> Self {
        NucleusModel {
            base_radius: 4.0,
            radius_cv: Affine { at_one: 0.05, slope: 0.25 },
            eccentricity_max: Affine { at_one: 0.20, slope: 0.35 },
            intensity_jitter: Affine { at_one: 0.02, slope: 0.12 },
            chromatin_amp: Affine { at_one: 0.02, slope: 0.10 },
        }
    }
}

impl NucleusModel {
    pub fn validate(&self) -> Result<()> {
        if self.base_radius <= 0.0 {
            return Err(Error::InvalidConfig("base_radius must be positive".into()));
        }
        for (name, a) in [
            ("radius_cv", self.radius_cv),
            ("eccentricity_max", self.eccentricity_max),
            ("intensity_jitter", self.intensity_jitter),
            ("chromatin_amp", self.chromatin_amp),
        ] {
            if a.slope < 0.0 || a.at_one < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative and non-decreasing")));
            }
        }
        if self.radius_cv.eval(1.0) > 0.08 {
            return Err(Error::InvalidConfig("radius_cv(1) must be <= 0.08".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellClass {
    Tumor,
    Normal,
}

impl CellClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellClass::Tumor => "tumor",
            CellClass::Normal => "normal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tumor" => Ok(CellClass::Tumor),
            "normal" => Ok(CellClass::Normal),
            other => Err(Error::InvalidInput(format!("unknown cell class {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellDetection {
    pub x: f64,
    pub y: f64,
    pub class: CellClass,
    pub confidence: f64,
}

/// Realized per-nucleus parameters; ground truth for generator tests
/// and saliency masks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nucleus {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub intensity_factor: f64,
    pub chromatin_amp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    /// Closed polygon, vertices in pixel coordinates.
    pub polygon: Vec<(f64, f64)>,
    pub severity: f64,
    /// Nuclei per square pixel.
    pub cell_density: f64,
    /// Normal-epithelium flag; detections in this region get class
    /// normal instead of tumor.
    pub normal: bool,
}

impl Region {
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64, severity: f64, cell_density: f64, normal: bool) -> Self {
        Region {
            polygon: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
            severity,
            cell_density,
            normal,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSlideSpec {
    pub width: usize,
    pub height: usize,
    pub regions: Vec<Region>,
    pub model: NucleusModel,
    pub background_seed: u64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SynthSlide<T> {
    /// [3,H,W] image, values in [0,1].
    pub image: Tensor<T>,
    /// Per pixel: 0 background, i+1 for region i. Row-major H x W.
    pub region_map: Vec<u16>,
    pub regions: Vec<Region>,
    pub detections: Vec<CellDetection>,
    pub nuclei: Vec<Nucleus>,
}

impl<T: Scalar> SynthSlide<T> {
    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn hash_unit(seed: u64, a: u64, b: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(a ^ splitmix64(b)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() / 2.0
}

fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn polygon_bbox(poly: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in poly {
        b.0 = b.0.min(x);
        b.1 = b.1.min(y);
        b.2 = b.2.max(x);
        b.3 = b.3.max(y);
    }
    b
}

const BG_COLOR: [f64; 3] = [0.93, 0.90, 0.95];
const NUCLEUS_COLOR: [f64; 3] = [0.36, 0.22, 0.55];

/// Renders a slide from a `SyntheticSlideSpec`: textured background,
/// per-region elliptical nuclei with severity-scaled morphology, a
/// region label map and ground-truth detections. Bit-reproducible for
/// a fixed input.
pub fn generate_slide<T: Scalar>(spec: &SyntheticSlideSpec) -> Result<SynthSlide<T>> {
    spec.model.validate()?;
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput("empty slide extent".into()));
    }
    for (i, r) in spec.regions.iter().enumerate() {
        if r.polygon.len() < 3 {
            return Err(Error::InvalidInput(format!("region {i}: polygon needs >= 3 vertices")));
        }
        if !(1.0..=3.0).contains(&r.severity) {
            return Err(Error::InvalidInput(format!("region {i}: severity {} outside [1,3]", r.severity)));
        }
        if r.cell_density <= 0.0 {
            return Err(Error::InvalidInput(format!("region {i}: non-positive cell density")));
        }
        if r.polygon.iter().any(|&(x, y)| x < 0.0 || y < 0.0 || x > w as f64 || y > h as f64) {
            return Err(Error::InvalidInput(format!("region {i}: polygon outside slide bounds")));
        }
    }

    // region label map; overlap is an invalid spec
    let mut region_map = vec![0u16; w * h];
    for (ri, r) in spec.regions.iter().enumerate() {
        for py in 0..h {
            for px in 0..w {
                if point_in_polygon(&r.polygon, px as f64 + 0.5, py as f64 + 0.5) {
                    let cell = &mut region_map[py * w + px];
                    if *cell != 0 {
                        return Err(Error::InvalidInput(format!(
                            "regions {} and {ri} overlap at ({px},{py})",
                            *cell - 1
                        )));
                    }
                    *cell = ri as u16 + 1;
                }
            }
        }
    }

    // background: smooth value noise over a coarse grid
    let mut img = vec![0.0f64; 3 * w * h];
    let grid = 8usize;
    for py in 0..h {
        for px in 0..w {
            let gx = px / grid;
            let gy = py / grid;
            let fx = (px % grid) as f64 / grid as f64;
            let fy = (py % grid) as f64 / grid as f64;
            let v00 = hash_unit(spec.background_seed, gx as u64, gy as u64);
            let v10 = hash_unit(spec.background_seed, gx as u64 + 1, gy as u64);
            let v01 = hash_unit(spec.background_seed, gx as u64, gy as u64 + 1);
            let v11 = hash_unit(spec.background_seed, gx as u64 + 1, gy as u64 + 1);
            let v = v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy;
            let noise = (v - 0.5) * 0.05;
            for c in 0..3 {
                img[c * w * h + py * w + px] = (BG_COLOR[c] + noise).clamp(0.0, 1.0);
            }
        }
    }

    let mut detections = Vec::new();
    let mut nuclei = Vec::new();
    for (ri, r) in spec.regions.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ splitmix64(ri as u64 + 1)));
        let s = r.severity;
        let cv = spec.model.radius_cv.eval(s);
        let sigma = (1.0 + cv * cv).ln().sqrt();
        let mu = -sigma * sigma / 2.0; // lognormal with mean 1
        let ecc_max = spec.model.eccentricity_max.eval(s);
        let jitter = spec.model.intensity_jitter.eval(s);
        let chrom = spec.model.chromatin_amp.eval(s);
        let area = polygon_area(&r.polygon);
        let lambda = r.cell_density * area;
        let count = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| Error::InvalidInput(format!("poisson: {e}")))?
                .sample(&mut rng) as usize
        } else {
            0
        };
        let bbox = polygon_bbox(&r.polygon);
        let normal_z = Normal::new(0.0, 1.0).unwrap();
        for ni in 0..count {
            // rejection-sample a center inside the polygon
            let mut center = None;
            for _ in 0..1000 {
                let x: f64 = rng.random_range(bbox.0..bbox.2);
                let y: f64 = rng.random_range(bbox.1..bbox.3);
                if point_in_polygon(&r.polygon, x, y) {
                    center = Some((x, y));
                    break;
                }
            }
            let Some((cx, cy)) = center else { continue };
            let z: f64 = normal_z.sample(&mut rng);
            let radius = spec.model.base_radius * (mu + sigma * z).exp();
            let ecc: f64 = rng.random_range(0.0..=ecc_max.max(f64::MIN_POSITIVE));
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let zi: f64 = normal_z.sample(&mut rng);
            let intensity_factor = (1.0 + jitter * zi).max(0.3);
            let q = 1.0 - ecc.min(0.9);
            let nucleus = Nucleus {
                cx,
                cy,
                radius,
                rx: radius / q.sqrt(),
                ry: radius * q.sqrt(),
                angle,
                intensity_factor,
                chromatin_amp: chrom,
            };
            render_nucleus(&mut img, w, h, &nucleus, spec.seed ^ splitmix64((ri as u64) << 32 | ni as u64));
            nuclei.push(nucleus);
            detections.push(CellDetection {
                x: cx,
                y: cy,
                class: if r.normal { CellClass::Normal } else { CellClass::Tumor },
                confidence: 1.0,
            });
        }
    }

    let data: Vec<T> = img.iter().map(|&v| T::from_f(v)).collect();
    Ok(SynthSlide {
        image: Tensor::new(vec![3, h, w], data)?,
        region_map,
        regions: spec.regions.clone(),
        detections,
        nuclei,
    })
}

fn render_nucleus(img: &mut [f64], w: usize, h: usize, n: &Nucleus, speckle_seed: u64) {
    let extent = n.rx.max(n.ry) + 1.5;
    let x0 = ((n.cx - extent).floor().max(0.0)) as usize;
    let y0 = ((n.cy - extent).floor().max(0.0)) as usize;
    let x1 = ((n.cx + extent).ceil() as usize).min(w.saturating_sub(1));
    let y1 = ((n.cy + extent).ceil() as usize).min(h.saturating_sub(1));
    let (sin_a, cos_a) = n.angle.sin_cos();
    for py in y0..=y1 {
        for px in x0..=x1 {
            let dx = px as f64 + 0.5 - n.cx;
            let dy = py as f64 + 0.5 - n.cy;
            let u = cos_a * dx + sin_a * dy;
            let v = -sin_a * dx + cos_a * dy;
            let d = ((u / n.rx).powi(2) + (v / n.ry).powi(2)).sqrt();
            if d >= 1.25 {
                continue;
            }
            let cov = ((1.0 - d) * 4.0).clamp(0.0, 1.0);
            if cov <= 0.0 {
                continue;
            }
            let speckle = (hash_unit(speckle_seed, px as u64, py as u64) - 0.5) * 2.0 * n.chromatin_amp;
            for c in 0..3 {
                let idx = c * w * h + py * w + px;
                let target = (NUCLEUS_COLOR[c] * n.intensity_factor + speckle).clamp(0.0, 1.0);
                img[idx] = img[idx] * (1.0 - cov) + target * cov;
            }
        }
    }
}

/// Square patch with a single full-frame tumor region; composition of
/// [`generate_slide`].
pub fn generate_patch<T: Scalar>(
    severity: f64,
    model: &NucleusModel,
    size: usize,
    cell_density: f64,
    seed: u64,
) -> Result<SynthSlide<T>> {
    if !(1.0..=3.0).contains(&severity) {
        return Err(Error::InvalidInput(format!("severity {severity} outside [1,3]")));
    }
    let spec = SyntheticSlideSpec {
        width: size,
        height: size,
        regions: vec![Region::rect(0.0, 0.0, size as f64, size as f64, severity, cell_density, false)],
        model: *model,
        background_seed: splitmix64(seed),
        seed,
    };
    generate_slide(&spec)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulatedPanelConfig {
    pub n_raters: usize,
    pub score_noise_sd: f64,
    /// |noise| below this reads as certain.
    pub certain_threshold: f64,
    /// |noise| below this (and above certain) reads as fairly certain.
    pub fairly_certain_threshold: f64,
}

impl Default for SimulatedPanelConfig {
    fn default() -> Self {
        SimulatedPanelConfig {
            n_raters: 10,
            score_noise_sd: 0.3,
            certain_threshold: 0.25,
            fairly_certain_threshold: 0.5,
        }
    }
}

/// Rater g scores clamp(round(s + N(0, sd)), 1, 3); confidence falls
/// out of |noise| against the thresholds.
pub fn simulate_panel(
    case_id: &str,
    true_severity: f64,
    config: &SimulatedPanelConfig,
    seed: u64,
) -> Result<RaterPanel> {
    if !(1.0..=3.0).contains(&true_severity) {
        return Err(Error::InvalidInput(format!("severity {true_severity} outside [1,3]")));
    }
    if config.n_raters == 0 {
        return Err(Error::InvalidInput("panel needs at least one rater".into()));
    }
    if config.score_noise_sd < 0.0 {
        return Err(Error::InvalidInput("negative noise sd".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, config.score_noise_sd.max(f64::MIN_POSITIVE)).unwrap();
    let mut scores = Vec::with_capacity(config.n_raters);
    for g in 0..config.n_raters {
        let noise = if config.score_noise_sd == 0.0 { 0.0 } else { dist.sample(&mut rng) };
        let score = (true_severity + noise).round().clamp(1.0, 3.0) as u8;
        let confidence = if noise.abs() < config.certain_threshold {
            Confidence::Certain
        } else if noise.abs() < config.fairly_certain_threshold {
            Confidence::FairlyCertain
        } else {
            Confidence::NotCertain
        };
        scores.push(ObserverScore::new(format!("R{:02}", g + 1), score, Some(confidence))?);
    }
    RaterPanel::new(case_id, scores)
}

/// Frozen-inference detector stand-in: ground-truth centers with
/// Gaussian positional jitter, dropout at `miss_rate`, and Poisson
/// false positives at `false_rate` per pixel.
pub fn oracle_detect<T: Scalar>(
    slide: &SynthSlide<T>,
    jitter_sd: f64,
    miss_rate: f64,
    false_rate: f64,
    seed: u64,
) -> Result<Vec<CellDetection>> {
    if !(0.0..1.0).contains(&miss_rate) || !(0.0..1.0).contains(&false_rate) {
        return Err(Error::InvalidInput("rates must be in [0,1)".into()));
    }
    if jitter_sd < 0.0 {
        return Err(Error::InvalidInput("negative jitter sd".into()));
    }
    let (w, h) = (slide.width() as f64, slide.height() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, jitter_sd.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = Vec::new();
    for det in &slide.detections {
        let u: f64 = rng.random_range(0.0..1.0);
        let (dx, dy): (f64, f64) = if jitter_sd == 0.0 {
            (0.0, 0.0)
        } else {
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        };
        if u < miss_rate {
            continue;
        }
        out.push(CellDetection {
            x: (det.x + dx).clamp(0.0, w - 1e-9),
            y: (det.y + dy).clamp(0.0, h - 1e-9),
            class: det.class,
            confidence: det.confidence,
        });
    }
    let lambda = false_rate * w * h;
    if lambda > 0.0 {
        let count = Poisson::new(lambda)
            .map_err(|e| Error::InvalidInput(format!("poisson: {e}")))?
            .sample(&mut rng) as usize;
        for _ in 0..count {
            out.push(CellDetection {
                x: rng.random_range(0.0..w),
                y: rng.random_range(0.0..h),
                class: CellClass::Tumor,
                confidence: rng.random_range(0.2..0.6),
            });
        }
    }
    Ok(out)
}
