//! Dataset ingestion: CSV and IDX files, seeded synthetic generators, and
//! deterministic subsetting for calibration splits.

use crate::linalg::Matrix;
use crate::rng::stream_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
}

/// Labeled inputs in [0, 1]^d.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Matrix,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self, DataError> {
        let ds = Self {
            name: name.into(),
            inputs,
            labels,
            classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.labels.len() != self.inputs.rows {
            return Err(DataError::Validation(format!(
                "{} labels for {} rows",
                self.labels.len(),
                self.inputs.rows
            )));
        }
        for (i, v) in self.inputs.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(DataError::Validation(format!(
                    "non-finite feature at flat index {i}"
                )));
            }
            if !(-1e-9..=1.0 + 1e-9).contains(v) {
                return Err(DataError::Validation(format!(
                    "feature {v} at flat index {i} outside [0, 1]"
                )));
            }
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.classes {
                return Err(DataError::Validation(format!(
                    "label {l} at row {i} out of range for {} classes",
                    self.classes
                )));
            }
        }
        Ok(())
    }

    /// Deterministic subset of `n` rows (without replacement); the same seed
    /// always yields the same indices.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        let idx = self.subset_indices(n, seed);
        self.take(&idx, format!("{}-subset{n}", self.name))
    }

    pub fn subset_indices(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = stream_rng(seed, "subset", 0);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order.truncate(n.min(self.len()));
        order.sort_unstable();
        order
    }

    /// Split off a disjoint calibration set of `n` rows; the remainder keeps
    /// the original order.
    pub fn split_calibration(&self, n: usize, seed: u64) -> (Dataset, Dataset) {
        let picked = self.subset_indices(n, seed);
        let mut in_calib = vec![false; self.len()];
        for &i in &picked {
            in_calib[i] = true;
        }
        let rest: Vec<usize> = (0..self.len()).filter(|&i| !in_calib[i]).collect();
        (
            self.take(&picked, format!("{}-calib", self.name)),
            self.take(&rest, format!("{}-rest", self.name)),
        )
    }

    fn take(&self, idx: &[usize], name: String) -> Dataset {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.inputs.row(i).to_vec()).collect();
        Dataset {
            name,
            inputs: Matrix::from_rows(&rows),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            let mut fields = vec![self.labels[i].to_string()];
            fields.extend(self.inputs.row(i).iter().map(|v| format!("{v}")));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

/// CSV rows are `label,feature,feature,…`.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv"))
}

pub fn parse_csv(text: &str, name: &str) -> Result<Dataset, DataError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap_or_default();
        let label: usize = label_field.trim().parse().map_err(|_| {
            DataError::Parse(format!("row {}: bad label `{label_field}`", lineno + 1))
        })?;
        let feats: Vec<f64> = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| DataError::Parse(format!("row {}: bad feature `{f}`", lineno + 1)))
            })
            .collect::<Result<_, _>>()?;
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(DataError::Parse(format!(
                    "row {}: {} features, expected {w} (ragged rows)",
                    lineno + 1,
                    feats.len()
                )))
            }
            _ => {}
        }
        labels.push(label);
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(DataError::Parse("empty csv".into()));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(name, Matrix::from_rows(&rows), labels, classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Standard big-endian IDX image/label pair; pixels scale to [0, 1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let img_bytes = std::fs::read(images)?;
    let lbl_bytes = std::fs::read(labels)?;
    parse_idx(&img_bytes, &lbl_bytes, "idx")
}

pub fn parse_idx(img_bytes: &[u8], lbl_bytes: &[u8], name: &str) -> Result<Dataset, DataError> {
    let mut img = img_bytes;
    let magic = read_u32_be(&mut img, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Parse(format!(
            "image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&mut img, "image count")? as usize;
    let rows = read_u32_be(&mut img, "image rows")? as usize;
    let cols = read_u32_be(&mut img, "image cols")? as usize;
    let pixels = n * rows * cols;
    if img.len() < pixels {
        return Err(DataError::Parse(format!(
            "image payload has {} bytes, expected {pixels}",
            img.len()
        )));
    }

    let mut lbl = lbl_bytes;
    let lmagic = read_u32_be(&mut lbl, "label magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(DataError::Parse(format!(
            "label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let ln = read_u32_be(&mut lbl, "label count")? as usize;
    if ln != n {
        return Err(DataError::Parse(format!(
            "{ln} labels for {n} images"
        )));
    }
    if lbl.len() < n {
        return Err(DataError::Parse("label payload truncated".into()));
    }

    let data: Vec<f64> = img[..pixels].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl[..n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        name,
        Matrix::from_vec(n, rows * cols, data),
        labels,
        classes.max(10).min(256),
    )
}

fn read_u32_be(bytes: &mut &[u8], what: &str) -> Result<u32, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Parse(format!("{what}: truncated header")));
    }
    let mut buf = [0u8; 4];
    (&bytes[..4]).read_exact(&mut buf).expect("length checked");
    *bytes = &bytes[4..];
    Ok(u32::from_be_bytes(buf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Moons,
    Blobs,
    /// 28×28 digit glyphs with jitter and noise; a desk-scale stand-in for
    /// handwritten-digit data (784 features, 10 classes).
    Digits,
}

impl std::str::FromStr for SyntheticKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "moons" => Ok(Self::Moons),
            "blobs" => Ok(Self::Blobs),
            "digits" => Ok(Self::Digits),
            other => Err(format!("unknown synthetic kind `{other}`")),
        }
    }
}

/// Seeded synthetic classification sets in [0, 1].
pub fn make_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Dataset {
    match kind {
        SyntheticKind::Moons => make_moons(n, noise, seed),
        SyntheticKind::Blobs => make_blobs(n, noise, seed),
        SyntheticKind::Digits => make_digits(n, noise, seed),
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Map a canonical-moons point (x ∈ [−1, 2], y ∈ [−0.5, 1]) into [0, 1]².
pub fn moons_to_unit(x: f64, y: f64) -> (f64, f64) {
    (((x + 1.0) / 3.0).clamp(0.0, 1.0), ((y + 0.5) / 1.5).clamp(0.0, 1.0))
}

fn make_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, "moons", 0);
    let half = n / 2;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let k = i / 2;
        let count = if class == 0 { n - half } else { half };
        let t = std::f64::consts::PI * k as f64 / (count.max(2) - 1) as f64;
        let (mut x, mut y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x += noise * gaussian(&mut rng);
        y += noise * gaussian(&mut rng);
        let (ux, uy) = moons_to_unit(x, y);
        rows.push(vec![ux, uy]);
        labels.push(class);
    }
    Dataset::new("moons", Matrix::from_rows(&rows), labels, 2).expect("moons in range")
}

fn make_blobs(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, "blobs", 0);
    let centers = [(0.25, 0.25), (0.75, 0.75)];
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let (cx, cy) = centers[class];
        let x = (cx + noise * gaussian(&mut rng)).clamp(0.0, 1.0);
        let y = (cy + noise * gaussian(&mut rng)).clamp(0.0, 1.0);
        rows.push(vec![x, y]);
        labels.push(class);
    }
    Dataset::new("blobs", Matrix::from_rows(&rows), labels, 2).expect("blobs in range")
}

/// 5×7 glyph bitmaps for the ten digits.
const GLYPHS: [[&str; 7]; 10] = [
    [" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "],
    ["  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
    [" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"],
    [" ### ", "#   #", "    #", "  ## ", "    #", "#   #", " ### "],
    ["   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "],
    ["#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "],
    [" ### ", "#    ", "#    ", "#### ", "#   #", "#   #", " ### "],
    ["#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "],
    [" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "],
    [" ### ", "#   #", "#   #", " ####", "    #", "    #", " ### "],
];

fn make_digits(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, "digits", 0);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let dx = rng.gen_range(-2i32..=2);
        let dy = rng.gen_range(-2i32..=2);
        let mut img = vec![0.0f64; 28 * 28];
        // Upscale the 5×7 glyph by 3 and drop it near the center.
        for (gy, row) in GLYPHS[class].iter().enumerate() {
            for (gx, ch) in row.chars().enumerate() {
                if ch != '#' {
                    continue;
                }
                for sy in 0..3 {
                    for sx in 0..3 {
                        let py = 3 + gy as i32 * 3 + sy + dy;
                        let px = 6 + gx as i32 * 3 + sx + dx;
                        if (0..28).contains(&py) && (0..28).contains(&px) {
                            img[(py * 28 + px) as usize] = 1.0;
                        }
                    }
                }
            }
        }
        if noise > 0.0 {
            for v in &mut img {
                *v = (*v + noise * gaussian(&mut rng)).clamp(0.0, 1.0);
            }
        }
        rows.push(img);
        labels.push(class);
    }
    Dataset::new("digits", Matrix::from_rows(&rows), labels, 10).expect("digits in range")
}
