//! ROI- and slide-level scoring: tile planning, block-average
//! accumulation, density maps, tumor masking, heatmaps, Grad-CAM.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::io::Rgb8Image;
use crate::net::RegressionNet;
use crate::scalar::Scalar;
use crate::score::PleomorphismScore;
use crate::synthdata::{CellClass, CellDetection};
use crate::tensor::Tensor;

/// Overlapping-tile geometry over a fixed image extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub overlap: usize,
    pub block_size: usize,
    pub width: usize,
    pub height: usize,
}

impl TileGrid {
    /// (512, 448, 64): 8:1 tile/stride ratio.
    pub fn paper_scale(width: usize, height: usize) -> Self {
        TileGrid { tile_size: 512, overlap: 448, block_size: 64, width, height }
    }

    /// (64, 56, 8): same ratios at desk scale.
    pub fn desk_scale(width: usize, height: usize) -> Self {
        TileGrid { tile_size: 64, overlap: 56, block_size: 8, width, height }
    }

    pub fn stride(&self) -> usize {
        self.tile_size - self.overlap
    }

    pub fn validate(&self) -> Result<()> {
        if self.overlap >= self.tile_size {
            return Err(Error::InvalidConfig(format!(
                "overlap {} must be smaller than tile size {}",
                self.overlap, self.tile_size
            )));
        }
        if self.block_size == 0 || self.tile_size % self.block_size != 0 || self.stride() % self.block_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "block size {} must divide tile size {} and stride {}",
                self.block_size,
                self.tile_size,
                self.stride()
            )));
        }
        if self.width < self.tile_size || self.height < self.tile_size {
            return Err(Error::InvalidInput(format!(
                "image {}x{} smaller than one {} px tile",
                self.width, self.height, self.tile_size
            )));
        }
        Ok(())
    }

    pub fn blocks_x(&self) -> usize {
        self.width.div_ceil(self.block_size)
    }

    pub fn blocks_y(&self) -> usize {
        self.height.div_ceil(self.block_size)
    }
}

fn axis_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut origins: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&o| o + tile <= extent)
        .collect();
    // extra edge-aligned tile when the extent is not stride-aligned
    let last = extent - tile;
    if *origins.last().unwrap() != last {
        origins.push(last);
    }
    origins
}

/// Tile origins in row-major order; a final edge-aligned tile per axis
/// covers non-stride-aligned margins.
pub fn plan_tiles(grid: &TileGrid) -> Result<Vec<(usize, usize)>> {
    grid.validate()?;
    let xs = axis_origins(grid.width, grid.tile_size, grid.stride());
    let ys = axis_origins(grid.height, grid.tile_size, grid.stride());
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            tiles.push((x, y));
        }
    }
    Ok(tiles)
}

/// Per-block running sum and count over a block grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockAccumulator {
    pub blocks_x: usize,
    pub blocks_y: usize,
    pub block_size: usize,
    pub sum: Vec<f64>,
    pub count: Vec<u64>,
}

impl BlockAccumulator {
    pub fn new(grid: &TileGrid) -> Self {
        let n = grid.blocks_x() * grid.blocks_y();
        BlockAccumulator {
            blocks_x: grid.blocks_x(),
            blocks_y: grid.blocks_y(),
            block_size: grid.block_size,
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn add(&mut self, bx: usize, by: usize, value: f64) {
        let i = by * self.blocks_x + bx;
        self.sum[i] += value;
        self.count[i] += 1;
    }

    pub fn mean(&self, bx: usize, by: usize) -> Option<f64> {
        let i = by * self.blocks_x + bx;
        (self.count[i] > 0).then(|| self.sum[i] / self.count[i] as f64)
    }

    pub fn merge(&mut self, other: &BlockAccumulator) -> Result<()> {
        if self.blocks_x != other.blocks_x || self.blocks_y != other.blocks_y {
            return Err(Error::InvalidShape("accumulator grids differ".into()));
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        Ok(())
    }
}

/// Block indices fully contained in a tile at (ox, oy); the trailing
/// partial blocks of a ceil-sized grid count as contained when the
/// tile reaches the image border that clips them.
fn blocks_in_tile(grid: &TileGrid, ox: usize, oy: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let b = grid.block_size;
    let contained = |origin: usize, extent: usize, blocks: usize| -> std::ops::Range<usize> {
        let lo = origin.div_ceil(b);
        let mut hi = lo;
        while hi < blocks {
            let block_end = ((hi + 1) * b).min(extent);
            if block_end <= origin + grid.tile_size {
                hi += 1;
            } else {
                break;
            }
        }
        lo..hi
    };
    (
        contained(ox, grid.width, grid.blocks_x()),
        contained(oy, grid.height, grid.blocks_y()),
    )
}

fn crop_tile<T: Scalar>(image: &Tensor<T>, ox: usize, oy: usize, size: usize) -> Tensor<T> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut out = vec![T::zero(); 3 * size * size];
    for c in 0..3 {
        for y in 0..size {
            let srow = c * w * h + (oy + y) * w + ox;
            let drow = c * size * size + y * size;
            out[drow..drow + size].copy_from_slice(&src[srow..srow + size]);
        }
    }
    Tensor::new(vec![3, size, size], out).unwrap()
}

/// Scores every planned tile with `scorer` (batched [N,3,t,t] in,
/// one scalar per tile out) and accumulates each tile's score into all
/// blocks it fully contains, in row-major tile order.
pub fn score_tiles<T: Scalar>(
    image: &Tensor<T>,
    grid: &TileGrid,
    batch_size: usize,
    mut scorer: impl FnMut(&Tensor<T>) -> Result<Vec<T>>,
) -> Result<BlockAccumulator> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != grid.height || shape[2] != grid.width {
        return Err(Error::InvalidShape(format!(
            "expected [3,{},{}] image, got {shape:?}",
            grid.height, grid.width
        )));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let tiles = plan_tiles(grid)?;
    let mut acc = BlockAccumulator::new(grid);
    let t = grid.tile_size;
    for chunk in tiles.chunks(batch_size) {
        let mut batch = vec![T::zero(); chunk.len() * 3 * t * t];
        for (i, &(ox, oy)) in chunk.iter().enumerate() {
            let tile = crop_tile(image, ox, oy, t);
            batch[i * 3 * t * t..(i + 1) * 3 * t * t].copy_from_slice(tile.data());
        }
        let scores = scorer(&Tensor::new(vec![chunk.len(), 3, t, t], batch)?)?;
        if scores.len() != chunk.len() {
            return Err(Error::InvalidShape(format!(
                "scorer returned {} scores for {} tiles",
                scores.len(),
                chunk.len()
            )));
        }
        for (&(ox, oy), &score) in chunk.iter().zip(&scores) {
            let (bxs, bys) = blocks_in_tile(grid, ox, oy);
            for by in bys {
                for bx in bxs.clone() {
                    acc.add(bx, by, score.to_f());
                }
            }
        }
    }
    Ok(acc)
}

/// Real-valued map over the full image extent.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DensityMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Sum of isotropic Gaussian kernels (peak 1, truncated at 3 sigma)
/// centered at the detections.
pub fn build_density_map(detections: &[CellDetection], sigma: f64, width: usize, height: usize) -> Result<DensityMap> {
    if sigma <= 0.0 {
        return Err(Error::InvalidConfig(format!("sigma {sigma} must be positive")));
    }
    let mut data = vec![0.0; width * height];
    let radius = 3.0 * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for d in detections {
        let x0 = ((d.x - radius).floor().max(0.0)) as usize;
        let y0 = ((d.y - radius).floor().max(0.0)) as usize;
        let x1 = ((d.x + radius).ceil() as usize).min(width.saturating_sub(1));
        let y1 = ((d.y + radius).ceil() as usize).min(height.saturating_sub(1));
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 - d.x;
                let dy = py as f64 - d.y;
                let r2 = dx * dx + dy * dy;
                if r2 <= radius * radius {
                    data[py * width + px] += (-r2 * inv).exp();
                }
            }
        }
    }
    Ok(DensityMap { width, height, data })
}

/// Block grid of finalized scores; undefined where masking or coverage
/// left no evidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub blocks_x: usize,
    pub blocks_y: usize,
    pub block_size: usize,
    pub count: Vec<u64>,
    pub mean: Vec<f64>,
}

impl ScoreMap {
    pub fn get(&self, bx: usize, by: usize) -> Option<f64> {
        let i = by * self.blocks_x + bx;
        (self.count[i] > 0).then(|| self.mean[i])
    }

    pub fn defined(&self) -> impl Iterator<Item = (usize, usize, u64, f64)> + '_ {
        (0..self.blocks_y).flat_map(move |by| {
            (0..self.blocks_x).filter_map(move |bx| {
                let i = by * self.blocks_x + bx;
                (self.count[i] > 0).then(|| (bx, by, self.count[i], self.mean[i]))
            })
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block_x,block_y,count,mean\n");
        for (bx, by, count, mean) in self.defined() {
            out.push_str(&format!("{bx},{by},{count},{mean}\n"));
        }
        out
    }
}

/// Finalizes an accumulator into a ScoreMap, dropping blocks whose
/// tumor-class detection count falls below `threshold`.
pub fn mask_tumor(
    acc: &BlockAccumulator,
    detections: &[CellDetection],
    grid: &TileGrid,
    threshold: u64,
) -> Result<ScoreMap> {
    if acc.blocks_x != grid.blocks_x() || acc.blocks_y != grid.blocks_y() {
        return Err(Error::InvalidShape("accumulator does not match grid".into()));
    }
    let mut tumor = vec![0u64; acc.blocks_x * acc.blocks_y];
    for d in detections {
        if d.class != CellClass::Tumor {
            continue;
        }
        let bx = (d.x as usize / grid.block_size).min(acc.blocks_x - 1);
        let by = (d.y as usize / grid.block_size).min(acc.blocks_y - 1);
        tumor[by * acc.blocks_x + bx] += 1;
    }
    let mut count = vec![0u64; acc.count.len()];
    let mut mean = vec![0.0; acc.count.len()];
    for i in 0..acc.count.len() {
        if acc.count[i] > 0 && tumor[i] >= threshold {
            count[i] = acc.count[i];
            mean[i] = acc.sum[i] / acc.count[i] as f64;
        }
    }
    Ok(ScoreMap {
        blocks_x: acc.blocks_x,
        blocks_y: acc.blocks_y,
        block_size: acc.block_size,
        count,
        mean,
    })
}

/// Unweighted mean over defined blocks.
pub fn aggregate_roi_score(map: &ScoreMap) -> Result<PleomorphismScore> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (_, _, _, mean) in map.defined() {
        sum += mean;
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoTumorFound("score map has no defined blocks".into()));
    }
    PleomorphismScore::raw(sum / n as f64)
}

/// How a slide aggregates its regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SlidePooling {
    /// Mean of per-region aggregate scores; regions weighted equally.
    #[default]
    PerRegion,
    /// Mean over all defined blocks of all regions.
    PerBlock,
}

/// Slide score over per-region score maps; empty regions are skipped,
/// all-empty is a no-tumor error.
pub fn aggregate_slide_score(maps: &[ScoreMap], pooling: SlidePooling) -> Result<PleomorphismScore> {
    let mut sum = 0.0;
    let mut n = 0usize;
    match pooling {
        SlidePooling::PerRegion => {
            for map in maps {
                if let Ok(score) = aggregate_roi_score(map) {
                    sum += score.value();
                    n += 1;
                }
            }
        }
        SlidePooling::PerBlock => {
            for map in maps {
                for (_, _, _, mean) in map.defined() {
                    sum += mean;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::NoTumorFound("no region has a defined block".into()));
    }
    PleomorphismScore::raw(sum / n as f64)
}

const HEATMAP_BACKGROUND: [u8; 3] = [255, 255, 255];
const HEATMAP_ANCHORS: [[f64; 3]; 3] = [[0.0, 160.0, 0.0], [255.0, 220.0, 0.0], [220.0, 0.0, 0.0]];

/// Two-segment linear colormap on [1,3]; channels truncate toward zero.
pub fn heatmap_color(score: f64) -> [u8; 3] {
    let s = score.clamp(1.0, 3.0);
    let (lo, hi, t) = if s <= 2.0 {
        (HEATMAP_ANCHORS[0], HEATMAP_ANCHORS[1], s - 1.0)
    } else {
        (HEATMAP_ANCHORS[1], HEATMAP_ANCHORS[2], s - 2.0)
    };
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        rgb[c] = (lo[c] + (hi[c] - lo[c]) * t).floor().clamp(0.0, 255.0) as u8;
    }
    rgb
}

/// Block-resolution heatmap scaled up by block_size; undefined blocks
/// render as background.
pub fn render_heatmap(map: &ScoreMap) -> Rgb8Image {
    let b = map.block_size;
    let mut img = Rgb8Image::new(map.blocks_x * b, map.blocks_y * b);
    for by in 0..map.blocks_y {
        for bx in 0..map.blocks_x {
            let rgb = map.get(bx, by).map(heatmap_color).unwrap_or(HEATMAP_BACKGROUND);
            for y in by * b..(by + 1) * b {
                for x in bx * b..(bx + 1) * b {
                    img.put(x, y, rgb);
                }
            }
        }
    }
    img
}

/// Saliency raster in [0,1] at patch resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Grad-CAM against the last dense-block feature maps: channel weights
/// are spatially averaged output gradients; the map is the ReLU of the
/// weighted channel sum, bilinearly upsampled and max-normalized.
/// Averaged over the eight square symmetries (each mapped back to the
/// original frame), which suppresses orientation-dependent noise in the
/// coarse feature grid.
pub fn grad_cam_map<T: Scalar>(net: &RegressionNet<T>, patch: &Tensor<T>) -> Result<SaliencyMap> {
    let shape = patch.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidShape(format!("expected [3,H,W] patch, got {shape:?}")));
    }
    let (ph, pw) = (shape[1], shape[2]);
    let mut mean = vec![0.0f64; ph * pw];
    for element in 0..8u8 {
        let view = crate::regressor::dihedral(patch, element);
        let cam = grad_cam_single(net, &view)?;
        let cam_t = Tensor::new(vec![1, ph, pw], cam)?;
        // rotate-then-flip elements with the flip bit set are involutions
        let inverse = if element & 4 != 0 { element } else { (4 - element) % 4 };
        let back = crate::regressor::dihedral(&cam_t, inverse);
        for (m, &v) in mean.iter_mut().zip(back.data().iter()) {
            *m += v / 8.0;
        }
    }
    let max = mean.iter().cloned().fold(0.0f64, f64::max);
    let data = if max > 0.0 { mean.iter().map(|v| v / max).collect() } else { mean };
    Ok(SaliencyMap { width: pw, height: ph, data })
}

fn grad_cam_single<T: Scalar>(net: &RegressionNet<T>, patch: &Tensor<T>) -> Result<Vec<f64>> {
    let shape = patch.shape().to_vec();
    let (ph, pw) = (shape[1], shape[2]);
    let mut g = Graph::new();
    let mut input = patch.reshaped(vec![1, 3, ph, pw])?;
    input.requires_grad = true;
    let leaf = g.leaf(input);
    let fwd = net.forward(&mut g, leaf, false)?;
    let grads = g.backward(fwd.output)?;
    let block_grad = grads
        .get(fwd.last_block)
        .ok_or_else(|| Error::DegenerateInput("no gradient reached the last dense block".into()))?;
    let bshape = g.value(fwd.last_block).shape().to_vec();
    let (channels, fh, fw) = (bshape[1], bshape[2], bshape[3]);
    let acts = g.value(fwd.last_block).data();

    let mut cam = vec![0.0f64; fh * fw];
    let area = (fh * fw) as f64;
    for c in 0..channels {
        let base = c * fh * fw;
        let weight: f64 = block_grad[base..base + fh * fw].iter().map(|v| v.to_f()).sum::<f64>() / area;
        for i in 0..fh * fw {
            cam[i] += weight * acts[base + i].to_f();
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }

    let up = bilinear_upsample(&cam, fw, fh, pw, ph);
    let max = up.iter().cloned().fold(0.0f64, f64::max);
    Ok(if max > 0.0 { up.iter().map(|v| v / max).collect() } else { up })
}

fn bilinear_upsample(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; dw * dh];
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sh as f64 / dh as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sw as f64 / dw as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let v = src[y0 * sw + x0] * (1.0 - tx) * (1.0 - ty)
                + src[y0 * sw + x1] * tx * (1.0 - ty)
                + src[y1 * sw + x0] * (1.0 - tx) * ty
                + src[y1 * sw + x1] * tx * ty;
            out[y * dw + x] = v;
        }
    }
    out
}
