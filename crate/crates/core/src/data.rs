//! IDX image/label files, synthetic Gaussian-blob benchmarks and 2×2 pooling.
//!
//! IDX layout: big-endian `u32` magic (`0x00000803` images, `0x00000801`
//! labels), big-endian `u32` dimension sizes, then raw unsigned bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples in `[0, 1]` with integer labels. For OOD sets the labels are
/// informational only and never used for training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// `(height, width)` for image data.
    pub geometry: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        samples: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        geometry: Option<(usize, usize)>,
    ) -> Result<Self> {
        let name = name.into();
        if samples.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{name}: {} samples but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(format!(
                "{name}: label {y} outside 0..{n_classes}"
            )));
        }
        if samples.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("{name}: samples must lie in [0, 1]")));
        }
        if let Some((h, w)) = geometry {
            if h * w != samples.cols() {
                return Err(Error::invalid(format!(
                    "{name}: geometry {h}x{w} does not match dimension {}",
                    samples.cols()
                )));
            }
        }
        Ok(Dataset {
            name,
            samples,
            labels,
            n_classes,
            geometry,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// First `count` samples (or all, if fewer).
    pub fn truncated(&self, count: usize) -> Dataset {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            samples: self.samples.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            geometry: self.geometry,
        }
    }

    /// Keeps samples whose label is below `n`, relabelled to a dataset of `n` classes.
    pub fn restrict_classes(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] < n).collect();
        let mut d = self.subset(&idx);
        d.n_classes = n.min(self.n_classes);
        d
    }

    pub fn downsampled(&self) -> Result<Dataset> {
        let (h, w) = self
            .geometry
            .ok_or_else(|| Error::invalid(format!("{}: not image data", self.name)))?;
        let samples = downsample(&self.samples, h, w)?;
        Ok(Dataset {
            name: self.name.clone(),
            samples,
            labels: self.labels.clone(),
            n_classes: self.n_classes,
            geometry: Some((h / 2, w / 2)),
        })
    }

    /// Loads an IDX image/label pair. Labels `>= n_classes` fail validation.
    pub fn load_idx(
        name: &str,
        images: &Path,
        labels: &Path,
        n_classes: usize,
    ) -> Result<Dataset> {
        let (x, h, w) = read_idx_images(images)?;
        let y = read_idx_labels(labels)?;
        let m = x.shape()[0];
        if m != y.len() {
            return Err(Error::invalid(format!(
                "{}: {} images but {} labels in {}",
                name,
                m,
                y.len(),
                labels.display()
            )));
        }
        let flat = x.reshaped(vec![m, h * w])?;
        Dataset::new(name, flat, y, n_classes, Some((h, w)))
    }
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

fn read_u32_at(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(BigEndian::read_u32)
        .ok_or_else(|| format_err(path, offset as u64, format!("truncated header: missing {what}")))
}

/// Reads an IDX3 image file into `[M, H, W]` scaled by `1/255`.
pub fn read_idx_images(path: &Path) -> Result<(Tensor, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_images(&bytes, path)
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Tensor, usize, usize)> {
    let magic = read_u32_at(bytes, 0, path, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let m = read_u32_at(bytes, 4, path, "item count")? as usize;
    let h = read_u32_at(bytes, 8, path, "row count")? as usize;
    let w = read_u32_at(bytes, 12, path, "column count")? as usize;
    let need = m * h * w;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(format_err(
            path,
            16 + payload.len() as u64,
            format!("truncated payload: expected {need} pixel bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(format_err(path, 16 + need as u64, "trailing bytes after payload"));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Tensor::new(vec![m, h, w], data)?, h, w))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_labels(&bytes, path)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_u32_at(bytes, 0, path, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let m = read_u32_at(bytes, 4, path, "item count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != m {
        return Err(format_err(
            path,
            8 + payload.len().min(m) as u64,
            format!("expected {m} label bytes, found {}", payload.len()),
        ));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Writes `[M, H·W]` samples in `[0, 1]` as IDX3, quantising with `round(255·v)`.
pub fn write_idx_images(path: &Path, samples: &Tensor, h: usize, w: usize) -> Result<()> {
    if samples.numel() != samples.rows() * h * w {
        return Err(Error::invalid("image geometry does not match sample width"));
    }
    let m = samples.rows();
    let mut out = Vec::with_capacity(16 + m * h * w);
    for v in [IDX_IMAGES_MAGIC, m as u32, h as u32, w as u32] {
        out.write_u32::<BigEndian>(v).expect("vec write");
    }
    out.extend(samples.data().iter().map(|&v| quantize(v)));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(IDX_LABELS_MAGIC).expect("vec write");
    out.write_u32::<BigEndian>(labels.len() as u32).expect("vec write");
    for &y in labels {
        let b = u8::try_from(y).map_err(|_| Error::invalid(format!("label {y} does not fit a byte")))?;
        out.push(b);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `round(255·v)` with halves rounded up, clamped to a byte.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

/// 2×2 mean pooling of `[M, H·W]` images.
pub fn downsample(images: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("cannot 2x2-pool odd geometry {h}x{w}")));
    }
    if images.cols() != h * w && images.numel() != images.rows() * h * w {
        return Err(Error::ShapeMismatch {
            op: "downsample",
            lhs: images.shape().to_vec(),
            rhs: vec![h, w],
        });
    }
    let m = images.numel() / (h * w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(m * oh * ow);
    for img in images.data().chunks(h * w) {
        for r in 0..oh {
            for c in 0..ow {
                let at = |dr: usize, dc: usize| img[(2 * r + dr) * w + 2 * c + dc];
                out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
    }
    Tensor::new(vec![m, oh * ow], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodGeometry {
    /// Points at radius `U(radius − width/2, radius + width/2)` and uniform angle.
    Ring { radius: f64, width: f64 },
    /// Uniform in the axis-aligned box `[lo, hi]²`, rejecting points within
    /// `min_blob_distance` of any class mean.
    Uniform { lo: f64, hi: f64, min_blob_distance: f64 },
}

/// Two-dimensional Gaussian blobs plus an OOD population. Raw coordinates
/// are mapped into `[0, 1]` by `0.5 + x / (2 · extent)`.
///
/// With `ambient_dim > 2` each point is placed in the first two coordinates
/// of a larger space whose remaining coordinates are fixed at 0.5, the mean
/// of the garbage-class noise. Noise then lies off the data plane, as it does
/// for images, instead of blanketing the OOD ring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub means: Vec<[f64; 2]>,
    pub stds: Vec<f64>,
    pub samples_per_class: usize,
    pub ood: OodGeometry,
    pub ood_count: usize,
    pub extent: f64,
    #[serde(default = "plane_dim")]
    pub ambient_dim: usize,
}

fn plane_dim() -> usize {
    2
}

impl SynthSpec {
    /// Equilateral triangle of side `side` centred at the origin.
    pub fn triangle(side: f64, std: f64, samples_per_class: usize, ring_radius: f64) -> Self {
        let r = side / 3f64.sqrt();
        let means = (0..3)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 + i as f64 * 2.0 * std::f64::consts::PI / 3.0;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        SynthSpec {
            n_classes: 3,
            means,
            stds: vec![std; 3],
            samples_per_class,
            ood: OodGeometry::Ring {
                radius: ring_radius,
                width: 1.0,
            },
            ood_count: samples_per_class,
            extent: ring_radius + 2.0,
            ambient_dim: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.means.len() != self.n_classes || self.stds.len() != self.n_classes {
            return Err(Error::invalid("synth spec needs n_classes >= 2 with one mean and std per class"));
        }
        if self.stds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("synth stds must be positive"));
        }
        if !(self.extent > 0.0) {
            return Err(Error::invalid("synth extent must be positive"));
        }
        if self.ambient_dim < 2 {
            return Err(Error::invalid("synth ambient_dim must be >= 2"));
        }
        if let OodGeometry::Ring { radius, width } = self.ood {
            let spread = self
                .means
                .iter()
                .zip(&self.stds)
                .map(|(m, s)| m[0].hypot(m[1]) + 3.0 * s)
                .fold(0.0, f64::max);
            if radius - width / 2.0 <= spread {
                return Err(Error::invalid(format!(
                    "ring inner radius {} does not clear the blob spread {spread}",
                    radius - width / 2.0
                )));
            }
        }
        Ok(())
    }

    fn to_unit(&self, p: [f64; 2]) -> [f64; 2] {
        let f = |v: f64| (0.5 + v / (2.0 * self.extent)).clamp(0.0, 1.0);
        [f(p[0]), f(p[1])]
    }

    fn embed(&self, p: [f64; 2]) -> Vec<f64> {
        let mut v = vec![0.5; self.ambient_dim];
        v[..2].copy_from_slice(&self.to_unit(p));
        v
    }

    pub fn mean_unit(&self, c: usize) -> [f64; 2] {
        self.to_unit(self.means[c])
    }
}

fn gaussian2(rng: &mut Rng) -> [f64; 2] {
    let v = rng::normal_vec(rng, 2);
    [v[0], v[1]]
}

/// Draws an ID set (labelled blobs) and an OOD set (labels all zero).
pub fn synth_blobs(spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = rng::stream(seed, rng::streams::DATA);
    let mut id_rows = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(id_rows.capacity());
    // interleave classes so any prefix is balanced
    for _ in 0..spec.samples_per_class {
        for c in 0..spec.n_classes {
            let z = gaussian2(&mut rng);
            let p = [
                spec.means[c][0] + spec.stds[c] * z[0],
                spec.means[c][1] + spec.stds[c] * z[1],
            ];
            id_rows.push(spec.embed(p));
            labels.push(c);
        }
    }
    let mut ood_rows = Vec::with_capacity(spec.ood_count);
    while ood_rows.len() < spec.ood_count {
        let p = match spec.ood {
            OodGeometry::Ring { radius, width } => {
                let r = radius + width * (rng.random::<f64>() - 0.5);
                let a = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                [r * a.cos(), r * a.sin()]
            }
            OodGeometry::Uniform {
                lo,
                hi,
                min_blob_distance,
            } => {
                let p = [
                    lo + (hi - lo) * rng.random::<f64>(),
                    lo + (hi - lo) * rng.random::<f64>(),
                ];
                let near = spec
                    .means
                    .iter()
                    .any(|m| (m[0] - p[0]).hypot(m[1] - p[1]) < min_blob_distance);
                if near {
                    continue;
                }
                p
            }
        };
        ood_rows.push(spec.embed(p));
    }
    let id = Dataset::new(
        "blobs",
        Tensor::new(vec![id_rows.len(), spec.ambient_dim], id_rows.concat())?,
        labels,
        spec.n_classes,
        None,
    )?;
    let ood = Dataset::new(
        "ring",
        Tensor::new(vec![ood_rows.len(), spec.ambient_dim], ood_rows.concat())?,
        vec![0; spec.ood_count],
        1,
        None,
    )?;
    Ok((id, ood))
}
