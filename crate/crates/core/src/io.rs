//! Persistence: PPM rasters, CSV schemas, line-delimited manifests,
//! and the checkpoint container.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::RegressionNet;
use crate::scalar::Scalar;
use crate::score::{Confidence, ObserverScore, RaterPanel};
use crate::synthdata::{CellClass, CellDetection};
use crate::tensor::Tensor;

// ---- rasters -----------------------------------------------------------

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize) -> Self {
        Rgb8Image { width, height, data: vec![0; 3 * width * height] }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// [3,H,W] tensor in [0,1] to 8-bit RGB, round-to-nearest.
pub fn tensor_to_rgb8<T: Scalar>(image: &Tensor<T>) -> Result<Rgb8Image> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidShape(format!("expected [3,H,W] image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = Rgb8Image::new(w, h);
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[c * w * h + y * w + x].to_f();
                out.data[3 * (y * w + x) + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

pub fn rgb8_to_tensor<T: Scalar>(image: &Rgb8Image) -> Result<Tensor<T>> {
    let (w, h) = (image.width, image.height);
    let mut data = vec![T::zero(); 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * w * h + y * w + x] = T::from_f(image.data[3 * (y * w + x) + c] as f64 / 255.0);
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Rgb8Image) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", image.width, image.height)?;
    f.write_all(&image.data)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Rgb8Image> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::InvalidInput(format!("ppm: {m}"));
    // header: magic, width, height, maxval, single whitespace, payload
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(bad("not a P6 file"));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    if token(&bytes)? != "255" {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    let expected = 3 * width * height;
    if bytes.len() < pos + expected {
        return Err(bad("truncated payload"));
    }
    Ok(Rgb8Image { width, height, data: bytes[pos..pos + expected].to_vec() })
}

// ---- CSV schemas -------------------------------------------------------

fn fmt_f64(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v}")
}

pub fn write_ratings_csv(path: impl AsRef<Path>, panels: &[RaterPanel]) -> Result<()> {
    let mut out = String::from("case_id,rater_id,score,confidence\n");
    for p in panels {
        for s in &p.scores {
            let conf = s.confidence.map(|c| c.as_str()).unwrap_or("");
            out.push_str(&format!("{},{},{},{}\n", p.case_id, s.rater_id, s.score, conf));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ratings_csv(path: impl AsRef<Path>) -> Result<Vec<RaterPanel>> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<(String, ObserverScore)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::InvalidInput(format!("ratings line {}: expected 4 columns", ln + 1)));
        }
        let score: u8 = cols[2]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("ratings line {}: bad score {:?}", ln + 1, cols[2])))?;
        let confidence = Confidence::parse(cols[3])?;
        rows.push((cols[0].to_string(), ObserverScore::new(cols[1], score, confidence)?));
    }
    // group consecutive rows by case id, preserving file order
    let mut panels: Vec<RaterPanel> = Vec::new();
    let mut current: Option<(String, Vec<ObserverScore>)> = None;
    for (case, score) in rows {
        match &mut current {
            Some((id, scores)) if *id == case => scores.push(score),
            _ => {
                if let Some((id, scores)) = current.take() {
                    panels.push(RaterPanel::new(id, scores)?);
                }
                current = Some((case, vec![score]));
            }
        }
    }
    if let Some((id, scores)) = current {
        panels.push(RaterPanel::new(id, scores)?);
    }
    Ok(panels)
}

pub fn write_detections_csv(path: impl AsRef<Path>, detections: &[CellDetection]) -> Result<()> {
    let mut out = String::from("x,y,class,confidence\n");
    for d in detections {
        out.push_str(&format!("{},{},{},{}\n", fmt_f64(d.x), fmt_f64(d.y), d.class.as_str(), fmt_f64(d.confidence)));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_detections_csv(path: impl AsRef<Path>) -> Result<Vec<CellDetection>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::InvalidInput(format!("detections line {}: expected 4 columns", ln + 1)));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidInput(format!("detections line {}: bad {what} {s:?}", ln + 1)))
        };
        out.push(CellDetection {
            x: parse(cols[0], "x")?,
            y: parse(cols[1], "y")?,
            class: CellClass::parse(cols[2])?,
            confidence: parse(cols[3], "confidence")?,
        });
    }
    Ok(out)
}

// ---- manifest (line-delimited flat records) ----------------------------

/// One flat record per line: string or numeric values only.
#[derive(Clone, Debug, PartialEq)]
pub enum ManifestValue {
    Str(String),
    Num(f64),
}

impl ManifestValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            ManifestValue::Str(s) => Some(s),
            ManifestValue::Num(_) => None,
        }
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            ManifestValue::Num(n) => Some(*n),
            ManifestValue::Str(_) => None,
        }
    }
}

pub type ManifestRecord = Vec<(String, ManifestValue)>;

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push('{');
        for (i, (k, v)) in rec.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            match v {
                ManifestValue::Str(s) => out.push_str(&format!("\"{k}\": \"{s}\"")),
                ManifestValue::Num(n) => out.push_str(&format!("\"{k}\": {}", fmt_f64(*n))),
            }
        }
        out.push_str("}\n");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        records.push(
            parse_manifest_line(line)
                .ok_or_else(|| Error::InvalidInput(format!("manifest line {}: malformed record", ln + 1)))?,
        );
    }
    Ok(records)
}

fn parse_manifest_line(line: &str) -> Option<ManifestRecord> {
    let inner = line.strip_prefix('{')?.strip_suffix('}')?.trim();
    let mut rec = Vec::new();
    if inner.is_empty() {
        return Some(rec);
    }
    let mut rest = inner;
    loop {
        rest = rest.trim_start();
        rest = rest.strip_prefix('"')?;
        let kq = rest.find('"')?;
        let key = rest[..kq].to_string();
        rest = rest[kq + 1..].trim_start().strip_prefix(':')?.trim_start();
        if let Some(r) = rest.strip_prefix('"') {
            let vq = r.find('"')?;
            rec.push((key, ManifestValue::Str(r[..vq].to_string())));
            rest = &r[vq + 1..];
        } else {
            let end = rest.find(',').unwrap_or(rest.len());
            let num: f64 = rest[..end].trim().parse().ok()?;
            rec.push((key, ManifestValue::Num(num)));
            rest = &rest[end..];
        }
        rest = rest.trim_start();
        match rest.strip_prefix(',') {
            Some(r) => rest = r,
            None if rest.is_empty() => return Some(rec),
            None => return None,
        }
    }
}

pub fn manifest_get<'a>(rec: &'a ManifestRecord, key: &str) -> Result<&'a ManifestValue> {
    rec.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::InvalidInput(format!("manifest record missing key {key:?}")))
}

// ---- checkpoint container ----------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PLEO";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Resolved configuration snapshot, echoed verbatim in the header.
    pub config: Vec<(String, String)>,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn from_net<T: Scalar>(net: &RegressionNet<T>, config: Vec<(String, String)>) -> Self {
        let params = net
            .named_params()
            .into_iter()
            .map(|(name, t)| ParamEntry {
                name,
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f() as f32).collect(),
            })
            .collect();
        Checkpoint { version: CHECKPOINT_VERSION, config, params }
    }

    /// Loads parameters into a net built with matching geometry.
    pub fn apply_to_net<T: Scalar>(&self, net: &mut RegressionNet<T>) -> Result<()> {
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        let tensors = net.params_mut();
        if names.len() != self.params.len() {
            return Err(Error::Integrity {
                offset: 0,
                detail: format!("checkpoint has {} parameters, net wants {}", self.params.len(), names.len()),
            });
        }
        for ((name, tensor), entry) in names.iter().zip(tensors).zip(&self.params) {
            if *name != entry.name || tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Integrity {
                    offset: 0,
                    detail: format!(
                        "parameter mismatch: checkpoint {} {:?} vs net {} {:?}",
                        entry.name,
                        entry.shape,
                        name,
                        tensor.shape()
                    ),
                });
            }
            for (dst, src) in tensor.data_mut().iter_mut().zip(&entry.data) {
                *dst = T::from_f(*src as f64);
            }
        }
        Ok(())
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut header = String::new();
    for (k, v) in &ckpt.config {
        header.push_str(&format!("config {k}={v}\n"));
    }
    let mut offset = 0usize; // in floats
    for p in &ckpt.params {
        let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("param {} {} {}\n", p.name, dims.join("x"), offset));
        offset += p.data.len();
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&ckpt.version.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for p in &ckpt.params {
        for v in &p.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |offset: u64, detail: &str| Error::Integrity { offset, detail: detail.into() };
    if bytes.len() < 16 {
        return Err(corrupt(bytes.len() as u64, "file shorter than fixed header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(4, &format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(corrupt(16, "truncated header"));
    }
    let header = std::str::from_utf8(&bytes[16..16 + header_len]).map_err(|_| corrupt(16, "header not UTF-8"))?;
    let payload = &bytes[16 + header_len..];

    let mut config = Vec::new();
    let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
    for line in header.lines() {
        if let Some(kv) = line.strip_prefix("config ") {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| corrupt(16, &format!("malformed config line {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
        } else if let Some(rest) = line.strip_prefix("param ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 3 {
                return Err(corrupt(16, &format!("malformed param line {line:?}")));
            }
            let shape: Vec<usize> = parts[1]
                .split('x')
                .map(|d| d.parse().map_err(|_| corrupt(16, &format!("bad shape in {line:?}"))))
                .collect::<Result<_>>()?;
            let offset: usize = parts[2].parse().map_err(|_| corrupt(16, &format!("bad offset in {line:?}")))?;
            manifest.push((parts[0].to_string(), shape, offset));
        } else if !line.is_empty() {
            return Err(corrupt(16, &format!("unknown header line {line:?}")));
        }
    }

    let mut params = Vec::new();
    let mut expected_offset = 0usize;
    for (name, shape, offset) in manifest {
        if offset != expected_offset {
            return Err(corrupt(
                (16 + header_len + 4 * offset) as u64,
                &format!("parameter {name}: offset {offset}, expected {expected_offset}"),
            ));
        }
        let count: usize = shape.iter().product();
        let start = 4 * offset;
        let end = start + 4 * count;
        if payload.len() < end {
            return Err(corrupt(
                (16 + header_len + payload.len()) as u64,
                &format!("parameter {name}: payload truncated"),
            ));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(ParamEntry { name, shape, data });
        expected_offset = offset + count;
    }
    if payload.len() != 4 * expected_offset {
        return Err(corrupt(
            (16 + header_len + 4 * expected_offset) as u64,
            "payload length disagrees with manifest",
        ));
    }
    Ok(Checkpoint { version, config, params })
}
