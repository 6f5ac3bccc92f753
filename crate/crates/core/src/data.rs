//! Dataset generation, ingestion, batching, and parametric corruptions.
//!
//! All inputs live in [0,1]. Everything is deterministic under its seed.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{read_blob_file, write_blob_file, BLOB_MAGIC};
use crate::error::{contract, Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

/// Labeled inputs in [0,1]. `inputs` is `(N, ...)`, labels index `0..classes`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
    pub split: String,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        classes: usize,
        name: impl Into<String>,
        split: impl Into<String>,
    ) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(contract(format!(
                "{} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(contract(format!("label {bad} out of range 0..{classes}")));
        }
        if inputs.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(contract("dataset inputs must lie in [0,1]"));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            name: name.into(),
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` examples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let d = self.inputs.row_len();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = n;
        Dataset {
            inputs: Tensor::new(shape, self.inputs.data()[..n * d].to_vec())
                .expect("prefix slice is well formed"),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            name: self.name.clone(),
            split: self.split.clone(),
        }
    }
}

// ── Two moons ────────────────────────────────────────────────────────────

/// Interleaved two-arc dataset rescaled into [0,1]^2, class 0 on the upper
/// arc. `n` must be even; points split evenly between the arcs.
pub fn make_two_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(contract(format!("two-moons size {n} must be even and positive")));
    }
    if noise_sigma < 0.0 {
        return Err(contract("noise sigma must be nonnegative"));
    }
    let half = n / 2;
    let mut rng = seeds::rng(seeds::split(seed, "two-moons"));
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let arc_t = |i: usize| {
        if half == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (half - 1) as f64
        }
    };
    // canonical moons: upper arc (cos t, sin t), lower arc (1-cos t, 0.5-sin t)
    for i in 0..half {
        let t = arc_t(i);
        data.push(t.cos());
        data.push(t.sin());
        labels.push(0);
    }
    for i in 0..half {
        let t = arc_t(i);
        data.push(1.0 - t.cos());
        data.push(0.5 - t.sin());
        labels.push(1);
    }
    for v in data.iter_mut() {
        *v += noise_sigma * normal(&mut rng);
    }
    // fixed affine map into [0,1]^2; the noiseless arcs land well inside
    for i in 0..n {
        data[2 * i] = ((data[2 * i] + 1.5) / 4.0).clamp(0.0, 1.0);
        data[2 * i + 1] = ((data[2 * i + 1] + 1.0) / 2.5).clamp(0.0, 1.0);
    }
    Dataset::new(Tensor::matrix(n, 2, data)?, labels, 2, "two-moons", "train")
}

/// Invert the two-moons affine map (for tests that check arc membership).
pub fn two_moons_to_canonical(x: f64, y: f64) -> (f64, f64) {
    (x * 4.0 - 1.5, y * 2.5 - 1.0)
}

fn normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

// ── IDX files ────────────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader {
    bytes: Vec<u8>,
    pos: usize,
}

impl IdxReader {
    fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Ok(IdxReader { bytes, pos: 0 })
    }

    fn u32_be(&mut self) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(Error::Parse(format!(
                "idx file truncated at byte offset {}",
                self.pos
            )));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn payload(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse(format!(
                "idx payload truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Load an IDX image/label file pair (the MNIST container format:
/// big-endian magics 0x803 / 0x801). Pixels scale to [0,1].
pub fn load_idx_images(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut ir = IdxReader::open(images_path)?;
    let magic = ir.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse(format!(
            "bad image magic 0x{magic:08x} at byte offset 0 (expected 0x{IDX_IMAGES_MAGIC:08x})"
        )));
    }
    let count = ir.u32_be()? as usize;
    let rows = ir.u32_be()? as usize;
    let cols = ir.u32_be()? as usize;
    let pix = ir.payload(count * rows * cols)?;
    let data: Vec<f64> = pix.iter().map(|&b| b as f64 / 255.0).collect();

    let mut lr = IdxReader::open(labels_path)?;
    let lmagic = lr.u32_be()?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Parse(format!(
            "bad label magic 0x{lmagic:08x} at byte offset 0 (expected 0x{IDX_LABELS_MAGIC:08x})"
        )));
    }
    let lcount = lr.u32_be()? as usize;
    if lcount != count {
        return Err(Error::Parse(format!(
            "image count {count} disagrees with label count {lcount}"
        )));
    }
    let raw = lr.payload(count)?;
    let labels: Vec<usize> = raw.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        Tensor::new(vec![count, rows, cols], data)?,
        labels,
        classes.max(2),
        "idx",
        "train",
    )
}

/// Write a dataset of `(N, H, W)` images to an IDX image/label file pair.
/// Pixels quantize to u8 by rounding.
pub fn save_idx_images(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = ds.inputs.shape();
    if shape.len() != 3 {
        return Err(contract(format!("idx export needs (N,H,W) images, got {shape:?}")));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let mut img = std::fs::File::create(images_path)?;
    img.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    img.write_all(&(n as u32).to_be_bytes())?;
    img.write_all(&(h as u32).to_be_bytes())?;
    img.write_all(&(w as u32).to_be_bytes())?;
    let bytes: Vec<u8> = ds
        .inputs
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    img.write_all(&bytes)?;
    let mut lab = std::fs::File::create(labels_path)?;
    lab.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lab.write_all(&(n as u32).to_be_bytes())?;
    let lbytes: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    lab.write_all(&lbytes)?;
    Ok(())
}

// ── Synthetic glyph digits ───────────────────────────────────────────────

/// 28x28 grayscale glyph classes (ring, bars, cross, diagonals, disk, ...)
/// with per-example jitter in position, scale, stroke and intensity, drawn
/// over a class-independent background level. The background carries
/// feature energy but no class signal, as photographic backgrounds do. A
/// desk-scale stand-in for digit data that the IDX pipeline can round-trip.
pub fn make_synth_digits(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(contract("synth-digits size must be positive"));
    }
    if !(2..=10).contains(&classes) {
        return Err(contract(format!("synth-digits supports 2..=10 classes, got {classes}")));
    }
    const HW: usize = 28;
    let mut data = vec![0.0; n * HW * HW];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        let mut rng = seeds::rng(seeds::split_index(seeds::split(seed, "synth-digits"), i as u64));
        let cx = 13.5 + rng.gen_range(-3.0..3.0);
        let cy = 13.5 + rng.gen_range(-3.0..3.0);
        let scale = rng.gen_range(0.85..1.15);
        let stroke = rng.gen_range(1.6..2.6);
        // strokes over a class-independent background: the background level
        // drives feature energy without carrying class signal, while the
        // stroke/background contrast keeps the shape evidence attack-worthy
        let background = rng.gen_range(0.20..0.40);
        let contrast = rng.gen_range(0.35..0.55);
        let img = &mut data[i * HW * HW..(i + 1) * HW * HW];
        for py in 0..HW {
            for px in 0..HW {
                let x = px as f64 - cx;
                let y = py as f64 - cy;
                let d = glyph_distance(class, x / scale, y / scale);
                img[py * HW + px] = if d < stroke {
                    background + contrast * (1.0 - (d / stroke).powi(2)).max(0.4)
                } else {
                    background
                };
            }
        }
        for v in img.iter_mut() {
            *v = (*v + 0.05 * normal(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, HW, HW], data)?,
        labels,
        classes,
        "synth-digits",
        "train",
    )
}

/// Distance from a point to a line segment.
fn seg_dist(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Distance to a circular arc of radius `r` centered at (cx, cy) spanning
/// angles a0..a1 (radians, a0 < a1).
fn arc_dist(px: f64, py: f64, cx: f64, cy: f64, r: f64, a0: f64, a1: f64) -> f64 {
    let (dx, dy) = (px - cx, py - cy);
    let ang = dy.atan2(dx);
    let mut a = ang;
    // bring the angle into [a0, a0 + 2pi)
    while a < a0 {
        a += 2.0 * std::f64::consts::PI;
    }
    if a <= a1 {
        ((dx * dx + dy * dy).sqrt() - r).abs()
    } else {
        let e0 = (cx + r * a0.cos(), cy + r * a0.sin());
        let e1 = (cx + r * a1.cos(), cy + r * a1.sin());
        let d0 = ((px - e0.0) * (px - e0.0) + (py - e0.1) * (py - e0.1)).sqrt();
        let d1 = ((px - e1.0) * (px - e1.0) + (py - e1.1) * (py - e1.1)).sqrt();
        d0.min(d1)
    }
}

/// Distance from (x, y), centered glyph coordinates, to the stroke set of
/// digit `class`. Digits are drawn seven-segment-and-arc style, so the
/// shape confusions of handwriting (3/8, 4/9, 1/7, 5/6) carry over.
fn glyph_distance(class: usize, x: f64, y: f64) -> f64 {
    use std::f64::consts::PI;
    let segs: &[(f64, f64, f64, f64)] = match class {
        // 1: main stroke with a small flag
        1 => &[(0.0, -9.0, 0.0, 9.0), (0.0, -9.0, -3.5, -5.5)],
        // 2: diagonal and bottom bar (plus a top arc below)
        2 => &[(5.0, -4.5, -5.0, 9.0), (-5.0, 9.0, 5.5, 9.0)],
        // 4: open top-left wedge and the crossed vertical
        4 => &[(-5.0, -9.0, -6.0, 2.0), (-6.0, 2.0, 6.0, 2.0), (3.0, -9.0, 3.0, 9.0)],
        // 5: top bar, upper-left vertical (arc adds the bowl)
        5 => &[(4.5, -9.0, -4.5, -9.0), (-4.5, -9.0, -4.5, -1.0)],
        // 7: top bar and long diagonal
        7 => &[(-5.5, -9.0, 5.5, -9.0), (5.5, -9.0, -1.0, 9.0)],
        _ => &[],
    };
    let arcs: &[(f64, f64, f64, f64, f64)] = match class {
        // 0: full ellipse-ish ring
        0 => &[(0.0, 0.0, 8.0, 0.0, 2.0 * PI)],
        // 2: opening arc on top
        2 => &[(0.0, -4.5, 5.0, -PI, 0.0)],
        // 3: two right-opening arcs
        3 => &[(-0.5, -4.5, 4.5, -0.6 * PI, 0.5 * PI), (-0.5, 4.5, 4.5, -0.5 * PI, 0.6 * PI)],
        // 5: lower bowl
        5 => &[(-0.5, 3.5, 5.5, -0.5 * PI, 0.6 * PI)],
        // 6: left spine arc plus lower ring
        6 => &[(2.0, -2.0, 8.5, 0.55 * PI, 1.05 * PI), (-0.5, 4.0, 5.0, 0.0, 2.0 * PI)],
        // 8: stacked rings
        8 => &[(0.0, -4.5, 4.3, 0.0, 2.0 * PI), (0.0, 4.5, 4.6, 0.0, 2.0 * PI)],
        // 9: upper ring with a dropping tail
        9 => &[(0.5, -4.0, 5.0, 0.0, 2.0 * PI), (-2.0, 2.0, 8.5, -0.45 * PI, 0.05 * PI)],
        _ => &[],
    };
    let mut best = f64::INFINITY;
    for &(ax, ay, bx, by) in segs {
        best = best.min(seg_dist(x, y, ax, ay, bx, by));
    }
    for &(cx, cy, r, a0, a1) in arcs {
        best = best.min(arc_dist(x, y, cx, cy, r, a0, a1));
    }
    best
}

// ── Corruptions ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    GaussianNoise,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian-noise" => Ok(CorruptionKind::GaussianNoise),
            "brightness" => Ok(CorruptionKind::Brightness),
            "contrast" => Ok(CorruptionKind::Contrast),
            "pixelate" => Ok(CorruptionKind::Pixelate),
            _ => Err(contract(format!("unknown corruption `{s}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

/// Corruption family plus severity 1..=5. The severity tables are versioned
/// here; each parameter is strictly monotone in severity.
#[derive(Debug, Clone, Copy)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

/// noise sigma per severity
pub const GAUSSIAN_SIGMA: [f64; 5] = [0.02, 0.04, 0.08, 0.12, 0.18];
/// additive brightness shift per severity
pub const BRIGHTNESS_SHIFT: [f64; 5] = [0.05, 0.10, 0.15, 0.22, 0.30];
/// contrast factor per severity (distortion = 1 - factor, increasing)
pub const CONTRAST_FACTOR: [f64; 5] = [0.85, 0.70, 0.55, 0.40, 0.25];
/// pixelation block size per severity
pub const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 5, 7];

/// Apply a corruption. Labels never change; outputs clamp to [0,1];
/// deterministic per seed.
pub fn corrupt(ds: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Dataset> {
    if !(1..=5).contains(&spec.severity) {
        return Err(contract(format!("severity {} must lie in 1..=5", spec.severity)));
    }
    let si = (spec.severity - 1) as usize;
    let mut data = ds.inputs.data().to_vec();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = GAUSSIAN_SIGMA[si];
            let mut rng = seeds::rng(seeds::split(seed, "corrupt-noise"));
            for v in data.iter_mut() {
                *v = (*v + sigma * normal(&mut rng)).clamp(0.0, 1.0);
            }
        }
        CorruptionKind::Brightness => {
            let shift = BRIGHTNESS_SHIFT[si];
            for v in data.iter_mut() {
                *v = (*v + shift).clamp(0.0, 1.0);
            }
        }
        CorruptionKind::Contrast => {
            let f = CONTRAST_FACTOR[si];
            for v in data.iter_mut() {
                *v = ((*v - 0.5) * f + 0.5).clamp(0.0, 1.0);
            }
        }
        CorruptionKind::Pixelate => {
            let shape = ds.inputs.shape();
            if shape.len() != 3 {
                return Err(contract(format!(
                    "pixelate needs (N,H,W) images, got {shape:?}"
                )));
            }
            let (n, h, w) = (shape[0], shape[1], shape[2]);
            let bs = PIXELATE_BLOCK[si];
            for img in 0..n {
                let base = img * h * w;
                for by in (0..h).step_by(bs) {
                    for bx in (0..w).step_by(bs) {
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for py in by..(by + bs).min(h) {
                            for px in bx..(bx + bs).min(w) {
                                acc += ds.inputs.data()[base + py * w + px];
                                cnt += 1.0;
                            }
                        }
                        let avg = acc / cnt;
                        for py in by..(by + bs).min(h) {
                            for px in bx..(bx + bs).min(w) {
                                data[base + py * w + px] = avg;
                            }
                        }
                    }
                }
            }
        }
    }
    Dataset::new(
        Tensor::new(ds.inputs.shape().to_vec(), data)?,
        ds.labels.clone(),
        ds.classes,
        format!("{}+{}{}", ds.name, spec.kind.name(), spec.severity),
        ds.split.clone(),
    )
}

// ── Batching ─────────────────────────────────────────────────────────────

/// Seeded full-permutation batch iterator; the final partial batch is kept.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

/// Iterate mini-batches over a fresh permutation drawn from `shuffle_seed`.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(contract("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = seeds::rng(seeds::split(shuffle_seed, "batches"));
    order.shuffle(&mut rng);
    Ok(Batches { ds, order, batch_size, cursor: 0 })
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let d = self.ds.inputs.row_len();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.ds.inputs.data()[i * d..(i + 1) * d]);
            labels.push(self.ds.labels[i]);
        }
        let mut shape = self.ds.inputs.shape().to_vec();
        shape[0] = idx.len();
        Some((
            Tensor::new(shape, data).expect("batch slice is well formed"),
            labels,
        ))
    }
}

// ── Blob export ──────────────────────────────────────────────────────────

/// Export a dataset to the tensor-blob container (inputs + labels).
pub fn export_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let labels = Tensor::new(
        vec![ds.labels.len()],
        ds.labels.iter().map(|&l| l as f64).collect(),
    )?;
    let header = vec![
        ("kind".to_string(), "dataset".to_string()),
        ("name".to_string(), ds.name.clone()),
        ("split".to_string(), ds.split.clone()),
        ("classes".to_string(), ds.classes.to_string()),
    ];
    write_blob_file(path, BLOB_MAGIC, &header, &[&ds.inputs, &labels])
}

/// Load a dataset exported by [`export_dataset`].
pub fn import_dataset(path: &Path) -> Result<Dataset> {
    let (header, tensors) = read_blob_file(path, BLOB_MAGIC)?;
    if header.get("kind").map(String::as_str) != Some("dataset") {
        return Err(Error::Parse("blob file does not hold a dataset".into()));
    }
    if tensors.len() != 2 {
        return Err(Error::Parse(format!(
            "dataset blob holds {} tensors, expected 2",
            tensors.len()
        )));
    }
    let mut it = tensors.into_iter();
    let inputs = it.next().unwrap();
    let labels_t = it.next().unwrap();
    let labels: Vec<usize> = labels_t.data().iter().map(|&v| v as usize).collect();
    let classes: usize = header
        .get("classes")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse("dataset blob missing classes".into()))?;
    Dataset::new(
        inputs,
        labels,
        classes,
        header.get("name").cloned().unwrap_or_default(),
        header.get("split").cloned().unwrap_or_default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_is_balanced_and_deterministic() {
        let a = make_two_moons(40, 0.1, 7).unwrap();
        let b = make_two_moons(40, 0.1, 7).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 20);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 20);
    }

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let ds = make_two_moons(20, 0.0, 3).unwrap();
        for i in 0..ds.len() {
            let (cx, cy) = two_moons_to_canonical(ds.inputs.data()[2 * i], ds.inputs.data()[2 * i + 1]);
            let r = if ds.labels[i] == 0 {
                (cx * cx + cy * cy).sqrt()
            } else {
                ((cx - 1.0) * (cx - 1.0) + (cy - 0.5) * (cy - 0.5)).sqrt()
            };
            assert!((r - 1.0).abs() < 1e-9, "example {i} off its arc: r = {r}");
        }
    }

    #[test]
    fn odd_moon_count_rejected() {
        assert!(make_two_moons(7, 0.1, 0).is_err());
    }

    #[test]
    fn idx_round_trip_on_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        // 2 images of 28x28, labels 5 and 0, built byte by byte
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend(std::iter::repeat(0u8).take(28 * 28));
        bytes.extend(std::iter::repeat(255u8).take(28 * 28));
        std::fs::write(&img, &bytes).unwrap();
        let mut lbytes = Vec::new();
        lbytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbytes.extend_from_slice(&2u32.to_be_bytes());
        lbytes.extend_from_slice(&[5u8, 0u8]);
        std::fs::write(&lab, &lbytes).unwrap();

        let ds = load_idx_images(&img, &lab).unwrap();
        assert_eq!(ds.inputs.shape(), &[2, 28, 28]);
        assert_eq!(ds.labels, vec![5, 0]);
        assert_eq!(ds.inputs.data()[0], 0.0);
        assert_eq!(ds.inputs.data()[28 * 28], 1.0);
    }

    #[test]
    fn empty_idx_file_errors_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("empty.idx");
        std::fs::write(&img, b"").unwrap();
        let err = load_idx_images(&img, &img).unwrap_err();
        assert!(err.to_string().contains("offset 0"), "{err}");
    }

    #[test]
    fn idx_count_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&img, &bytes).unwrap();
        let mut lbytes = Vec::new();
        lbytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbytes.extend_from_slice(&3u32.to_be_bytes());
        lbytes.extend_from_slice(&[0, 1, 0]);
        std::fs::write(&lab, &lbytes).unwrap();
        let err = load_idx_images(&img, &lab).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('1') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn idx_writer_reader_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("rt.idx");
        let lab = dir.path().join("rt-labels.idx");
        let ds = make_synth_digits(12, 4, 5).unwrap();
        save_idx_images(&ds, &img, &lab).unwrap();
        let back = load_idx_images(&img, &lab).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.inputs.shape(), ds.inputs.shape());
        // quantization to u8 moves each pixel by at most 1/510
        for (a, b) in back.inputs.data().iter().zip(ds.inputs.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn synth_digits_deterministic_and_in_range() {
        let a = make_synth_digits(30, 10, 9).unwrap();
        let b = make_synth_digits(30, 10, 9).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert!(a.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.labels[..10], (0..10).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn brightness_mean_monotone_in_severity() {
        let ds = make_synth_digits(4, 4, 2).unwrap();
        let mut prev = -1.0;
        for severity in 1..=5u8 {
            let c = corrupt(
                &ds,
                CorruptionSpec { kind: CorruptionKind::Brightness, severity },
                0,
            )
            .unwrap();
            let mean: f64 = c.inputs.data().iter().sum::<f64>() / c.inputs.len() as f64;
            assert!(mean > prev);
            prev = mean;
        }
    }

    #[test]
    fn corrupt_rejects_severity_zero_and_keeps_labels() {
        let ds = make_synth_digits(4, 4, 2).unwrap();
        assert!(corrupt(&ds, CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 0 }, 0)
            .is_err());
        let c = corrupt(
            &ds,
            CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 3 },
            11,
        )
        .unwrap();
        assert_eq!(c.labels, ds.labels);
        let c2 = corrupt(
            &ds,
            CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 3 },
            11,
        )
        .unwrap();
        assert_eq!(c.inputs.data(), c2.inputs.data());
    }

    #[test]
    fn batches_cover_dataset_exactly() {
        let ds = make_two_moons(10, 0.05, 1).unwrap();
        let got: Vec<(Tensor, Vec<usize>)> = batches(&ds, 4, 3).unwrap().collect();
        assert_eq!(got.len(), 3);
        assert_eq!(got[2].1.len(), 2);
        // multiset of rows must equal the dataset
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for (t, _) in &got {
            for i in 0..t.shape()[0] {
                seen.push(t.data()[i * 2..(i + 1) * 2].iter().map(|v| v.to_bits()).collect());
            }
        }
        seen.sort();
        let mut expect: Vec<Vec<u64>> = (0..10)
            .map(|i| ds.inputs.data()[i * 2..(i + 1) * 2].iter().map(|v| v.to_bits()).collect())
            .collect();
        expect.sort();
        assert_eq!(seen, expect);
    }

    #[test]
    fn same_shuffle_seed_same_order() {
        let ds = make_two_moons(12, 0.05, 1).unwrap();
        let a: Vec<Vec<usize>> = batches(&ds, 5, 8).unwrap().map(|(_, l)| l).collect();
        let b: Vec<Vec<usize>> = batches(&ds, 5, 8).unwrap().map(|(_, l)| l).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.blob");
        let ds = make_two_moons(8, 0.1, 4).unwrap();
        export_dataset(&path, &ds).unwrap();
        let back = import_dataset(&path).unwrap();
        assert_eq!(back.inputs.data(), ds.inputs.data());
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.classes, 2);
    }
}
