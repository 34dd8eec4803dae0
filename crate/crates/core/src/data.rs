//! Synthetic CT-style data pipeline: HU windowing, scene generation,
//! portable-graymap storage, annotations and the dataset manifest.
//!
//! Every image is generated from a counter-based stream derived from
//! `(dataset seed, image index)`, so datasets are reproducible byte for byte
//! and images could be produced in any order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::metrics::{BBox, GroundTruth};
use crate::params::splitmix64;

/// Stored pixel = HU + 1024, clamped to [0, 4095] like 12-bit CT rawdata.
pub const HU_OFFSET: f64 = 1024.0;
pub const PGM_MAXVAL: u16 = 4095;

/// Window an HU value to [0, 1]: the window spans `level ± width/2`.
pub fn hu_window_scalar(x: f64, level: f64, width: f64) -> f64 {
    let lo = level - width / 2.0;
    ((x - lo) / width).clamp(0.0, 1.0)
}

/// Window a whole image; `width` must be positive.
pub fn hu_window(image: &[f64], level: f64, width: f64) -> Result<Vec<f64>> {
    if !(width > 0.0) || !width.is_finite() || !level.is_finite() {
        return Err(CoreError::InvalidArgument(format!(
            "window width must be positive and finite, got level={level} width={width}"
        )));
    }
    Ok(image
        .iter()
        .map(|&x| hu_window_scalar(x, level, width))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown split `{other}` (expected train|val|test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub classes: usize,
    pub hard_fraction: f64,
    pub level: f64,
    pub width: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub texture: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            count: 200,
            size: 128,
            classes: 2,
            hard_fraction: 0.16,
            level: 30.0,
            width: 300.0,
            train_frac: 0.70,
            val_frac: 0.15,
            texture: 40.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(CoreError::Config("count must be positive".into()));
        }
        if self.size < 32 || self.size % 32 != 0 {
            return Err(CoreError::Config(format!(
                "size must be a positive multiple of 32, got {}",
                self.size
            )));
        }
        if !(1..=2).contains(&self.classes) {
            return Err(CoreError::Config(format!(
                "classes must be 1 or 2, got {}",
                self.classes
            )));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(CoreError::Config(format!(
                "hard_fraction must lie in [0,1], got {}",
                self.hard_fraction
            )));
        }
        if !(self.width > 0.0) {
            return Err(CoreError::Config(format!(
                "window width must be positive, got {}",
                self.width
            )));
        }
        if self.train_frac < 0.0
            || self.val_frac < 0.0
            || self.train_frac + self.val_frac > 1.0 + 1e-12
        {
            return Err(CoreError::Config(format!(
                "split fractions invalid: train={} val={}",
                self.train_frac, self.val_frac
            )));
        }
        Ok(())
    }

    /// Image `i` is hard exactly when the running integral of the hard
    /// fraction crosses an integer; gives `floor(count * frac)` hard images
    /// spread evenly over the index range.
    pub fn is_hard(&self, index: usize) -> bool {
        let f = self.hard_fraction;
        ((index + 1) as f64 * f).floor() > (index as f64 * f).floor()
    }

    pub fn split_of(&self, index: usize) -> Split {
        let n_train = (self.train_frac * self.count as f64).round() as usize;
        let n_val = (self.val_frac * self.count as f64).round() as usize;
        let n_val_end = (n_train + n_val).min(self.count);
        if index < n_train.min(self.count) {
            Split::Train
        } else if index < n_val_end {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Axis-aligned ellipse lesion.
#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    class: u32,
    contrast: f64,
    /// Radial falloff exponent; small = crisp plateau, large = soft fade.
    softness: f64,
}

/// Tight bounding box of the ellipse support {d² ≤ 1} on the pixel grid
/// (pixel centers at integer + 0.5), in pixel-corner coordinates.
fn blob_mask_bbox(b: &Blob, size: usize) -> Option<BBox> {
    let (mut x_min, mut x_max, mut y_min, mut y_max) = (usize::MAX, 0usize, usize::MAX, 0usize);
    let px_lo = ((b.cx - b.rx - 1.0).floor().max(0.0)) as usize;
    let px_hi = ((b.cx + b.rx + 1.0).ceil() as usize).min(size);
    let py_lo = ((b.cy - b.ry - 1.0).floor().max(0.0)) as usize;
    let py_hi = ((b.cy + b.ry + 1.0).ceil() as usize).min(size);
    for py in py_lo..py_hi {
        for px in px_lo..px_hi {
            let dx = (px as f64 + 0.5 - b.cx) / b.rx;
            let dy = (py as f64 + 0.5 - b.cy) / b.ry;
            if dx * dx + dy * dy <= 1.0 {
                x_min = x_min.min(px);
                x_max = x_max.max(px);
                y_min = y_min.min(py);
                y_max = y_max.max(py);
            }
        }
    }
    if x_min == usize::MAX {
        return None;
    }
    Some(BBox {
        x1: x_min as f64,
        y1: y_min as f64,
        x2: (x_max + 1) as f64,
        y2: (y_max + 1) as f64,
    })
}

fn render_blob(b: &Blob, size: usize, hu: &mut [f64]) {
    let px_lo = ((b.cx - b.rx - 1.0).floor().max(0.0)) as usize;
    let px_hi = ((b.cx + b.rx + 1.0).ceil() as usize).min(size);
    let py_lo = ((b.cy - b.ry - 1.0).floor().max(0.0)) as usize;
    let py_hi = ((b.cy + b.ry + 1.0).ceil() as usize).min(size);
    for py in py_lo..py_hi {
        for px in px_lo..px_hi {
            let dx = (px as f64 + 0.5 - b.cx) / b.rx;
            let dy = (py as f64 + 0.5 - b.cy) / b.ry;
            let d2 = dx * dx + dy * dy;
            if d2 <= 1.0 {
                hu[py * size + px] += b.contrast * (1.0 - d2).powf(b.softness);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub index: u32,
    pub hard: bool,
    pub split: Split,
    /// Raw HU values, row-major `size*size`.
    pub hu: Vec<f64>,
    pub gts: Vec<GroundTruth>,
}

/// Renders one image; pure function of `(config.seed, index)`.
pub fn generate_image(cfg: &SynthConfig, index: usize) -> SynthImage {
    let stream = splitmix64(cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let s = cfg.size;
    let sf = s as f64;
    let hard = cfg.is_hard(index);

    // smooth low-frequency background texture plus fine noise
    let mut hu = vec![-60.0; s * s];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                cfg.texture * rng.gen_range(0.5..1.0),
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    for py in 0..s {
        for px in 0..s {
            let (x, y) = (px as f64 / sf, py as f64 / sf);
            let mut v = 0.0;
            for &(amp, fx, fy, phase) in &waves {
                v += amp * (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin();
            }
            hu[py * s + px] += v + rng.gen_range(-8.0..8.0);
        }
    }

    // lesion layout: either one large blob or a few small/medium ones
    let large_scene = sf >= 120.0 && rng.gen_bool(0.2);
    let n_blobs = if large_scene { 1 } else { rng.gen_range(1..=3) };
    let mut gts: Vec<GroundTruth> = Vec::new();
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..n_blobs {
        let mut placed = false;
        for _attempt in 0..25 {
            let r = if large_scene {
                rng.gen_range(0.39 * sf..0.45 * sf)
            } else {
                // tiers straddle the metric area buckets: boxes span 4r^2
                let tier = rng.gen_range(0.0..1.0);
                if tier < 0.3 {
                    rng.gen_range(3.0..6.0)
                } else if tier < 0.6 {
                    rng.gen_range(7.0..14.0)
                } else {
                    rng.gen_range(16.0..30.0)
                }
            };
            let class: u32 = if cfg.classes == 1 {
                0
            } else {
                rng.gen_range(0..2)
            };
            let ratio: f64 = if class == 0 {
                rng.gen_range(0.9..1.1)
            } else {
                rng.gen_range(1.7..2.3)
            };
            let (mut rx, mut ry) = (r * ratio.sqrt(), r / ratio.sqrt());
            if rng.gen_bool(0.5) {
                std::mem::swap(&mut rx, &mut ry);
            }
            let margin_x = rx + 2.0;
            let margin_y = ry + 2.0;
            if margin_x * 2.0 >= sf || margin_y * 2.0 >= sf {
                continue;
            }
            let cx = rng.gen_range(margin_x..sf - margin_x);
            let cy = rng.gen_range(margin_y..sf - margin_y);
            let (contrast, softness) = if hard {
                (rng.gen_range(25.0..45.0), rng.gen_range(1.4..2.2))
            } else {
                (rng.gen_range(90.0..160.0), rng.gen_range(0.1..0.2))
            };
            let blob = Blob {
                cx,
                cy,
                rx,
                ry,
                class,
                contrast,
                softness,
            };
            let Some(bbox) = blob_mask_bbox(&blob, s) else {
                continue;
            };
            if boxes.iter().any(|b| b.iou(&bbox) > 0.15) {
                continue;
            }
            render_blob(&blob, s, &mut hu);
            boxes.push(bbox);
            gts.push(GroundTruth {
                image: index as u32,
                class: blob.class,
                bbox,
            });
            placed = true;
            break;
        }
        let _ = placed;
    }

    SynthImage {
        index: index as u32,
        hard,
        split: cfg.split_of(index),
        hu,
        gts,
    }
}

// ── portable graymap I/O ──────────────────────────────────────────────

/// Binary 16-bit PGM (P5, big-endian samples).
pub fn write_pgm16(path: &Path, width: usize, height: usize, pixels: &[u16]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(CoreError::Dimension(format!(
            "pgm pixel count {} != {width}x{height}",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n{PGM_MAXVAL}\n").into_bytes();
    bytes.reserve(pixels.len() * 2);
    for &p in pixels {
        bytes.extend_from_slice(&p.to_be_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| CoreError::Parse {
        line: 0,
        message: format!("{}: {m}", path.display()),
    };
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CoreError::Parse {
                line: 0,
                message: "unexpected end of pgm header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P5" {
        return Err(bad("not a binary pgm (P5)"));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: u32 = token(&bytes)?.parse().map_err(|_| bad("bad maxval"))?;
    if !(256..=65535).contains(&maxval) {
        return Err(bad("expected 16-bit maxval"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 2;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let pixels = bytes[pos..pos + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((width, height, pixels))
}

fn hu_to_stored(hu: f64) -> u16 {
    (hu + HU_OFFSET).round().clamp(0.0, PGM_MAXVAL as f64) as u16
}

// ── annotations ───────────────────────────────────────────────────────

/// Annotation file loader with bounds validation against the image size.
pub fn load_annotations(path: &Path, size: usize) -> Result<Vec<GroundTruth>> {
    let gts = crate::metrics::load_ground_truth(path)?;
    let text = std::fs::read_to_string(path)?;
    let line_of: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim().starts_with('#'))
        .map(|(i, _)| i + 1)
        .collect();
    for (g, &line) in gts.iter().zip(&line_of) {
        let b = &g.bbox;
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > size as f64 || b.y2 > size as f64 {
            return Err(CoreError::Validation {
                line,
                message: format!("box {b:?} exceeds image bounds 0..{size}"),
            });
        }
    }
    Ok(gts)
}

// ── dataset directory layout ──────────────────────────────────────────

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const ANNOTATIONS_NAME: &str = "annotations.txt";
pub const IMAGES_DIR: &str = "images";

pub fn image_file_name(index: usize) -> String {
    format!("img_{index:05}.pgm")
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub index: u32,
    pub file: String,
    pub split: Split,
    pub hard: bool,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub config: SynthConfig,
    pub content_hash: String,
    pub entries: Vec<ManifestEntry>,
}

fn render_manifest(cfg: &SynthConfig, hash: &str, entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "format=icaf-dataset-v1");
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(s, "count={}", cfg.count);
    let _ = writeln!(s, "size={}", cfg.size);
    let _ = writeln!(s, "classes={}", cfg.classes);
    let _ = writeln!(s, "hard_fraction={}", cfg.hard_fraction);
    let _ = writeln!(s, "level={}", cfg.level);
    let _ = writeln!(s, "width={}", cfg.width);
    let _ = writeln!(s, "train_frac={}", cfg.train_frac);
    let _ = writeln!(s, "val_frac={}", cfg.val_frac);
    let _ = writeln!(s, "texture={}", cfg.texture);
    let _ = writeln!(s, "content_hash={hash}");
    for e in entries {
        let _ = writeln!(
            s,
            "image={},{},{},{}",
            e.index,
            e.file,
            e.split.as_str(),
            u8::from(e.hard)
        );
    }
    s
}

/// Generates the dataset under `dir`: `images/*.pgm`, one annotation file,
/// and a manifest echoing the config plus a content hash.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let images_dir = dir.join(IMAGES_DIR);
    std::fs::create_dir_all(&images_dir)?;

    let mut hasher = Sha256::new();
    let mut entries = Vec::with_capacity(cfg.count);
    let mut all_gts = Vec::new();
    for i in 0..cfg.count {
        let img = generate_image(cfg, i);
        let stored: Vec<u16> = img.hu.iter().map(|&h| hu_to_stored(h)).collect();
        let file = image_file_name(i);
        write_pgm16(&images_dir.join(&file), cfg.size, cfg.size, &stored)?;
        hasher.update(std::fs::read(images_dir.join(&file))?);
        entries.push(ManifestEntry {
            index: i as u32,
            file,
            split: img.split,
            hard: img.hard,
        });
        all_gts.extend(img.gts);
    }
    crate::metrics::save_ground_truth(&dir.join(ANNOTATIONS_NAME), &all_gts)?;
    hasher.update(std::fs::read(dir.join(ANNOTATIONS_NAME))?);
    let hash = format!("{:x}", hasher.finalize());
    std::fs::write(dir.join(MANIFEST_NAME), render_manifest(cfg, &hash, &entries))?;
    Ok(Manifest {
        config: cfg.clone(),
        content_hash: hash,
        entries,
    })
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    if !path.is_file() {
        return Err(CoreError::MissingInput(format!(
            "manifest not found at {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path)?;
    let mut cfg = SynthConfig::default();
    let mut hash = String::new();
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| CoreError::Parse {
            line: i + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        let parse_err = |m: String| CoreError::Parse {
            line: i + 1,
            message: m,
        };
        match key {
            "format" => {
                if value != "icaf-dataset-v1" {
                    return Err(parse_err(format!("unsupported dataset format `{value}`")));
                }
            }
            "seed" => cfg.seed = value.parse().map_err(|_| parse_err("bad seed".into()))?,
            "count" => cfg.count = value.parse().map_err(|_| parse_err("bad count".into()))?,
            "size" => cfg.size = value.parse().map_err(|_| parse_err("bad size".into()))?,
            "classes" => {
                cfg.classes = value.parse().map_err(|_| parse_err("bad classes".into()))?
            }
            "hard_fraction" => {
                cfg.hard_fraction = value
                    .parse()
                    .map_err(|_| parse_err("bad hard_fraction".into()))?
            }
            "level" => cfg.level = value.parse().map_err(|_| parse_err("bad level".into()))?,
            "width" => cfg.width = value.parse().map_err(|_| parse_err("bad width".into()))?,
            "train_frac" => {
                cfg.train_frac = value
                    .parse()
                    .map_err(|_| parse_err("bad train_frac".into()))?
            }
            "val_frac" => {
                cfg.val_frac = value.parse().map_err(|_| parse_err("bad val_frac".into()))?
            }
            "texture" => {
                cfg.texture = value.parse().map_err(|_| parse_err("bad texture".into()))?
            }
            "content_hash" => hash = value.to_string(),
            "image" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 4 {
                    return Err(parse_err(format!("bad image record `{value}`")));
                }
                entries.push(ManifestEntry {
                    index: parts[0]
                        .parse()
                        .map_err(|_| parse_err("bad image index".into()))?,
                    file: parts[1].to_string(),
                    split: Split::parse(parts[2]).map_err(|e| parse_err(e.to_string()))?,
                    hard: parts[3] == "1",
                });
            }
            other => {
                return Err(parse_err(format!("unknown manifest key `{other}`")));
            }
        }
    }
    Ok(Manifest {
        config: cfg,
        content_hash: hash,
        entries,
    })
}

#[derive(Debug, Clone)]
pub struct DataItem {
    pub index: u32,
    pub hard: bool,
    /// Windowed intensities in [0, 1], row-major `size*size`.
    pub image: Vec<f64>,
    pub gts: Vec<GroundTruth>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub size: usize,
    pub classes: usize,
    pub items: Vec<DataItem>,
}

/// Loads the images of one split (or all of them), windowed with the
/// level/width recorded in the manifest.
pub fn load_dataset(dir: &Path, split: Option<Split>) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let cfg = &manifest.config;
    let all_gts = load_annotations(&dir.join(ANNOTATIONS_NAME), cfg.size)?;
    let mut items = Vec::new();
    for e in &manifest.entries {
        if split.is_some_and(|s| s != e.split) {
            continue;
        }
        let path = dir.join(IMAGES_DIR).join(&e.file);
        if !path.is_file() {
            return Err(CoreError::MissingInput(format!(
                "image listed in manifest not found: {}",
                path.display()
            )));
        }
        let (w, h, stored) = read_pgm16(&path)?;
        if w != cfg.size || h != cfg.size {
            return Err(CoreError::Dimension(format!(
                "{}: image is {w}x{h}, manifest says {}",
                path.display(),
                cfg.size
            )));
        }
        let hu: Vec<f64> = stored.iter().map(|&p| p as f64 - HU_OFFSET).collect();
        let image = hu_window(&hu, cfg.level, cfg.width)?;
        items.push(DataItem {
            index: e.index,
            hard: e.hard,
            image,
            gts: all_gts.iter().filter(|g| g.image == e.index).copied().collect(),
        });
    }
    Ok(Dataset {
        size: cfg.size,
        classes: cfg.classes,
        items,
    })
}

/// Convenience wrapper returning the directory a dataset was written to.
pub fn dataset_dir(base: &Path, name: &str) -> PathBuf {
    base.join(name)
}
