//! Dataset ingestion: synthetic generators plus IDX and CSV image decoders.
//!
//! Decoded images are `[N, C, H, W]` arrays with values in `[0, 1]`, optionally
//! followed by per-channel standardisation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseLocation, Result};
use crate::tensor::NumArray;

/// A labelled image set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: NumArray,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: NumArray, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Dimension {
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
                context: "images vs labels",
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_outer(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_outer(0, n),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Class prototypes built from jittered Gaussian blobs; needs spatial features.
    SyntheticGaussians,
    /// One fixed random prototype per class with small pixel noise.
    SyntheticSeparable,
    IdxImages,
    CsvImages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    /// Directory holding the IDX or CSV files.
    pub path: Option<PathBuf>,
    pub classes: usize,
    /// `[C, H, W]` for synthetic and CSV sources.
    pub image_shape: [usize; 3],
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Pixel noise standard deviation for synthetic kinds.
    pub noise: f32,
    /// Blob-centre jitter in pixels for `synthetic-gaussians`.
    pub jitter: f32,
    pub normalization: Option<Normalization>,
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticGaussians,
            path: None,
            classes: 10,
            image_shape: [1, 16, 16],
            train_size: 1000,
            test_size: 500,
            seed: 0,
            noise: 0.1,
            jitter: 1.0,
            normalization: None,
        }
    }
}

/// Loads train and test sets. Synthetic sources are a pure function of the config.
pub fn load_dataset(src: &DatasetSource) -> Result<Split> {
    if src.classes == 0 {
        return Err(Error::Config("class count must be positive".into()));
    }
    let mut split = match src.kind {
        DatasetKind::SyntheticSeparable => synthetic_separable(src)?,
        DatasetKind::SyntheticGaussians => synthetic_gaussians(src)?,
        DatasetKind::IdxImages => {
            let dir = src
                .path
                .as_deref()
                .ok_or_else(|| Error::Config("idx-images source needs a path".into()))?;
            Split {
                train: load_idx_pair(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                    src.classes,
                )?,
                test: load_idx_pair(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                    src.classes,
                )?,
            }
        }
        DatasetKind::CsvImages => {
            let dir = src
                .path
                .as_deref()
                .ok_or_else(|| Error::Config("csv-images source needs a path".into()))?;
            Split {
                train: load_csv(&dir.join("train.csv"), src.image_shape, src.classes)?,
                test: load_csv(&dir.join("test.csv"), src.image_shape, src.classes)?,
            }
        }
    };
    if let Some(norm) = &src.normalization {
        normalize(&mut split.train, norm)?;
        normalize(&mut split.test, norm)?;
    }
    Ok(split)
}

fn normalize(ds: &mut Dataset, norm: &Normalization) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    if norm.mean.len() != c || norm.std.len() != c {
        return Err(Error::Config(format!(
            "normalization has {} means / {} stds for {c} channels",
            norm.mean.len(),
            norm.std.len()
        )));
    }
    if norm.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("normalization std must be positive".into()));
    }
    for (i, plane) in ds.images.data_mut().chunks_mut(h * w).enumerate() {
        let (m, s) = (norm.mean[i % c], norm.std[i % c]);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(())
}

fn synthetic_separable(src: &DatasetSource) -> Result<Split> {
    let [c, h, w] = src.image_shape;
    let pixels = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(src.seed);
    let prototypes: Vec<Vec<f32>> = (0..src.classes)
        .map(|_| (0..pixels).map(|_| rng.random::<f32>()).collect())
        .collect();
    let noise = Normal::new(0.0f32, src.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let draw = |n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(src.seed);
        rng.set_stream(stream);
        let mut data = Vec::with_capacity(n * pixels);
        let labels: Vec<usize> = (0..n).map(|i| i % src.classes).collect();
        for &label in &labels {
            data.extend(
                prototypes[label]
                    .iter()
                    .map(|&p| (p + noise.sample(&mut rng)).clamp(0.0, 1.0)),
            );
        }
        Dataset::new(NumArray::new(vec![n, c, h, w], data)?, labels, src.classes)
    };
    Ok(Split {
        train: draw(src.train_size, 1)?,
        test: draw(src.test_size, 2)?,
    })
}

struct Blob {
    channel: usize,
    y: f32,
    x: f32,
    sigma: f32,
    amplitude: f32,
}

fn synthetic_gaussians(src: &DatasetSource) -> Result<Split> {
    const BLOBS_PER_CLASS: usize = 3;
    let [c, h, w] = src.image_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(src.seed);
    let classes: Vec<Vec<Blob>> = (0..src.classes)
        .map(|_| {
            (0..BLOBS_PER_CLASS)
                .map(|_| Blob {
                    channel: rng.random_range(0..c),
                    y: rng.random_range(2.0..(h as f32 - 2.0).max(2.5)),
                    x: rng.random_range(2.0..(w as f32 - 2.0).max(2.5)),
                    sigma: rng.random_range(0.8..2.0),
                    amplitude: rng.random_range(0.5..1.0),
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0f32, src.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = Normal::new(0.0f32, src.jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let draw = |n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(src.seed);
        rng.set_stream(stream);
        let mut data = vec![0.0f32; n * c * h * w];
        let labels: Vec<usize> = (0..n).map(|i| i % src.classes).collect();
        for (img, &label) in data.chunks_mut(c * h * w).zip(&labels) {
            // one shared shift for the whole pattern plus per-blob wobble
            let (dy, dx) = (jitter.sample(&mut rng), jitter.sample(&mut rng));
            for blob in &classes[label] {
                let cy = blob.y + dy + 0.5 * jitter.sample(&mut rng);
                let cx = blob.x + dx + 0.5 * jitter.sample(&mut rng);
                let amp = blob.amplitude * rng.random_range(0.7..1.3);
                let plane = &mut img[blob.channel * h * w..(blob.channel + 1) * h * w];
                paint(plane, w, cy, cx, blob.sigma, amp);
            }
            // one distractor blob at a random place
            let ch = rng.random_range(0..c);
            let (cy, cx) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
            let amp = rng.random_range(0.2..0.6);
            paint(&mut img[ch * h * w..(ch + 1) * h * w], w, cy, cx, 1.2, amp);
            for v in img.iter_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        Dataset::new(NumArray::new(vec![n, c, h, w], data)?, labels, src.classes)
    };
    Ok(Split {
        train: draw(src.train_size, 1)?,
        test: draw(src.test_size, 2)?,
    })
}

fn paint(plane: &mut [f32], w: usize, cy: f32, cx: f32, sigma: f32, amp: f32) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (i, v) in plane.iter_mut().enumerate() {
        let (y, x) = ((i / w) as f32, (i % w) as f32);
        let d2 = (y - cy).powi(2) + (x - cx).powi(2);
        *v += amp * (-d2 * inv).exp();
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decoded IDX payload: dimensions and raw `u8` values.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses the IDX layout: two zero bytes, type code `0x08` (unsigned byte),
/// dimension count, big-endian `u32` extents, then the payload.
pub fn parse_idx(bytes: &[u8], source_name: &str) -> Result<IdxArray> {
    let err = |offset: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        location: ParseLocation::ByteOffset(offset as u64),
        message,
    };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, "bad magic: expected 0x00 0x00 <type> <ndim>".into()));
    }
    if bytes[2] != 0x08 {
        return Err(err(
            2,
            format!("unsupported element type 0x{:02x}; only unsigned bytes (0x08)", bytes[2]),
        ));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(err(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(err(bytes.len(), "truncated dimension header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(err(
            bytes.len().min(header + n),
            format!("payload has {} bytes, dimensions {dims:?} need {n}", bytes.len() - header),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Encodes `u8` data in the IDX layout.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

fn load_idx_pair(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let img = parse_idx(&read_file(images)?, &images.display().to_string())?;
    let lab = parse_idx(&read_file(labels)?, &labels.display().to_string())?;
    let (n, c, h, w) = match img.dims.as_slice() {
        [n, h, w] => (*n, 1, *h, *w),
        [n, h, w, c] => (*n, *c, *h, *w),
        other => {
            return Err(Error::Data(format!(
                "{}: expected 3 or 4 image dimensions, got {other:?}",
                images.display()
            )))
        }
    };
    if lab.dims != [n] {
        return Err(Error::Data(format!(
            "{}: label dimensions {:?} do not match {n} images",
            labels.display(),
            lab.dims
        )));
    }
    // IDX stores H x W x C; reorder to C x H x W.
    let mut data = vec![0.0f32; n * c * h * w];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let src = ((i * h + y) * w + x) * c + ch;
                    data[((i * c + ch) * h + y) * w + x] = img.data[src] as f32 / 255.0;
                }
            }
        }
    }
    let labels_out: Vec<usize> = lab.data.iter().map(|&l| l as usize).collect();
    if let Some(pos) = labels_out.iter().position(|&l| l >= classes) {
        return Err(Error::Data(format!(
            "{}: label {} at index {pos} out of range for {classes} classes",
            labels.display(),
            labels_out[pos]
        )));
    }
    Dataset::new(NumArray::new(vec![n, c, h, w], data)?, labels_out, classes)
}

/// Parses `label,pixel,...` rows with pixels in `0..=255`, stored `H x W x C`.
pub fn parse_csv(text: &str, source_name: &str, shape: [usize; 3], classes: usize) -> Result<Dataset> {
    let [c, h, w] = shape;
    let pixels = c * h * w;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            location: ParseLocation::Line(line_no),
            message,
        };
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad label: {e}")))?;
        if label >= classes {
            return Err(Error::Data(format!(
                "{source_name} line {line_no}: label {label} out of range for {classes} classes"
            )));
        }
        let row: Vec<f32> = fields
            .map(|f| f.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(format!("bad pixel value: {e}")))?;
        if row.len() != pixels {
            return Err(parse_err(format!("expected {pixels} pixels, found {}", row.len())));
        }
        if row.iter().any(|&v| !(0.0..=255.0).contains(&v)) {
            return Err(parse_err("pixel outside 0..=255".into()));
        }
        let base = data.len();
        data.resize(base + pixels, 0.0);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[base + (ch * h + y) * w + x] = row[(y * w + x) * c + ch] / 255.0;
                }
            }
        }
        labels.push(label);
    }
    let n = labels.len();
    Dataset::new(NumArray::new(vec![n, c, h, w], data)?, labels, classes)
}

fn load_csv(path: &Path, shape: [usize; 3], classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, &path.display().to_string(), shape, classes)
}
