//! Point-cloud field samples, z-score normalization and the PCF on-disk
//! format. A sample is a set of N points with positions, input features
//! and target fields; N may vary between samples. Files store f32
//! payloads; in-memory tensors are f64 and cast at the boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PCF_MAGIC: [u8; 4] = *b"PCF1";
const PCF_VERSION: u32 = 1;
/// Caps on header fields so a corrupt file cannot trigger huge allocations.
const MAX_POINTS: u64 = 1 << 30;
const MAX_DIM: u32 = 1 << 20;

/// One geometry: point positions, per-point input features and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// N×d_pos, coordinates in the unit cube.
    pub coords: Tensor<f64>,
    /// N×d_in, typically positions plus physical fields.
    pub features: Tensor<f64>,
    /// N×d_out target field values.
    pub labels: Tensor<f64>,
}

impl Sample {
    pub fn n_points(&self) -> usize {
        self.coords.rows()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("coords", &self.coords),
            ("features", &self.features),
            ("labels", &self.labels),
        ] {
            if t.rank() != 2 {
                return Err(Error::shape("sample", format!("{} is rank {}", name, t.rank())));
            }
            if !t.all_finite() {
                return Err(Error::non_finite("sample", name));
            }
        }
        let n = self.coords.rows();
        if n == 0 {
            return Err(Error::invalid_value("sample", "empty point set"));
        }
        if self.features.rows() != n || self.labels.rows() != n {
            return Err(Error::shape(
                "sample",
                format!(
                    "{} coords vs {} features vs {} labels",
                    n,
                    self.features.rows(),
                    self.labels.rows()
                ),
            ));
        }
        if self.coords.data().iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::invalid_value("sample", "coords outside the unit cube"));
        }
        Ok(())
    }
}

/// An ordered collection of samples; order is part of dataset identity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The common (d_pos, d_in, d_out) of all samples; mixed dimensions
    /// are a config error because one model serves the whole set.
    pub fn uniform_dims(&self) -> Result<(usize, usize, usize)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::InvalidConfig("empty dataset".into()))?;
        let dims = (
            first.coords.cols(),
            first.features.cols(),
            first.labels.cols(),
        );
        for (i, s) in self.samples.iter().enumerate() {
            let got = (s.coords.cols(), s.features.cols(), s.labels.cols());
            if got != dims {
                return Err(Error::InvalidConfig(format!(
                    "sample {} has dims {:?}, expected {:?}",
                    i, got, dims
                )));
            }
        }
        Ok(dims)
    }
}

/// Per-dimension feature/label statistics from a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub label_mean: Vec<f64>,
    pub label_std: Vec<f64>,
}

fn column_stats(tensors: &[&Tensor<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut count = 0usize;
    let mut mean = vec![0.0; dim];
    for t in tensors {
        count += t.rows();
        for row in t.data().chunks(dim) {
            for (acc, &x) in mean.iter_mut().zip(row) {
                *acc += x;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; dim];
    for t in tensors {
        for row in t.data().chunks(dim) {
            for ((acc, &m), &x) in var.iter_mut().zip(&mean).zip(row) {
                let d = x - m;
                *acc += d * d;
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .zip(&mean)
        .map(|(&v, &m)| {
            let s = (v / count as f64).sqrt();
            // A numerically constant column gets unit scale so it maps to
            // (approximately) zero instead of amplified rounding noise.
            if s <= 1e-12 * m.abs().max(1.0) {
                1.0
            } else {
                s
            }
        })
        .collect();
    (mean, std)
}

/// Pooled per-dimension statistics over every point of every sample.
pub fn compute_stats(train: &Dataset) -> Result<NormStats> {
    let (_, d_in, d_out) = train.uniform_dims()?;
    let features: Vec<&Tensor<f64>> = train.samples.iter().map(|s| &s.features).collect();
    let labels: Vec<&Tensor<f64>> = train.samples.iter().map(|s| &s.labels).collect();
    let (feature_mean, feature_std) = column_stats(&features, d_in);
    let (label_mean, label_std) = column_stats(&labels, d_out);
    Ok(NormStats {
        feature_mean,
        feature_std,
        label_mean,
        label_std,
    })
}

fn apply_affine(t: &Tensor<f64>, mean: &[f64], std: &[f64], forward: bool) -> Tensor<f64> {
    let dim = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(dim) {
        for (j, x) in row.iter_mut().enumerate() {
            if forward {
                *x = (*x - mean[j]) / std[j];
            } else {
                *x = *x * std[j] + mean[j];
            }
        }
    }
    out
}

/// Z-scores features and labels. With `stats: None` the statistics are
/// computed from `ds` itself (the training split); a test split passes the
/// training stats so both live in the same coordinates. Coordinates are
/// left untouched.
pub fn normalize(ds: &Dataset, stats: Option<&NormStats>) -> Result<(Dataset, NormStats)> {
    let computed;
    let stats = match stats {
        Some(s) => s,
        None => {
            computed = compute_stats(ds)?;
            &computed
        }
    };
    let (_, d_in, d_out) = ds.uniform_dims()?;
    if stats.feature_mean.len() != d_in || stats.label_mean.len() != d_out {
        return Err(Error::InvalidConfig(format!(
            "stats cover {} feature / {} label dims, dataset has {} / {}",
            stats.feature_mean.len(),
            stats.label_mean.len(),
            d_in,
            d_out
        )));
    }
    let samples = ds
        .samples
        .iter()
        .map(|s| Sample {
            coords: s.coords.clone(),
            features: apply_affine(&s.features, &stats.feature_mean, &stats.feature_std, true),
            labels: apply_affine(&s.labels, &stats.label_mean, &stats.label_std, true),
        })
        .collect();
    Ok((Dataset { samples }, stats.clone()))
}

/// Inverts [`normalize`] on a normalized dataset.
pub fn denormalize(ds: &Dataset, stats: &NormStats) -> Dataset {
    let samples = ds
        .samples
        .iter()
        .map(|s| Sample {
            coords: s.coords.clone(),
            features: apply_affine(&s.features, &stats.feature_mean, &stats.feature_std, false),
            labels: apply_affine(&s.labels, &stats.label_mean, &stats.label_std, false),
        })
        .collect();
    Dataset { samples }
}

/// Inverts label normalization on one prediction tensor.
pub fn denormalize_labels(pred: &Tensor<f64>, stats: &NormStats) -> Tensor<f64> {
    apply_affine(pred, &stats.label_mean, &stats.label_std, false)
}

fn write_f32_payload<W: Write>(w: &mut W, t: &Tensor<f64>) -> std::io::Result<()> {
    for &x in t.data() {
        w.write_f32::<LittleEndian>(x as f32)?;
    }
    Ok(())
}

/// Serializes a dataset. Payloads are f32; callers keeping data in f64
/// should expect one rounding on first write.
pub fn write_pcf(path: &Path, ds: &Dataset) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(&PCF_MAGIC)?;
        w.write_u32::<LittleEndian>(PCF_VERSION)?;
        w.write_u64::<LittleEndian>(ds.samples.len() as u64)?;
        for s in &ds.samples {
            w.write_u64::<LittleEndian>(s.n_points() as u64)?;
            w.write_u32::<LittleEndian>(s.coords.cols() as u32)?;
            w.write_u32::<LittleEndian>(s.features.cols() as u32)?;
            w.write_u32::<LittleEndian>(s.labels.cols() as u32)?;
            write_f32_payload(&mut w, &s.coords)?;
            write_f32_payload(&mut w, &s.features)?;
            write_f32_payload(&mut w, &s.labels)?;
        }
        w.flush()
    })()
    .map_err(io_err)
}

fn read_f32_tensor<R: Read>(
    r: &mut R,
    rows: usize,
    cols: usize,
    path: &Path,
    what: &str,
) -> Result<Tensor<f64>> {
    let mut data = vec![0.0f64; rows * cols];
    for slot in data.iter_mut() {
        *slot = r.read_f32::<LittleEndian>().map_err(|e| truncated(path, what, e))? as f64;
    }
    Tensor::new(&[rows, cols], data)
}

fn truncated(path: &Path, what: &str, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncated {
            path: path.display().to_string(),
            what: what.to_string(),
        }
    } else {
        Error::io(path, e)
    }
}

pub fn read_pcf(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| truncated(path, "magic", e))?;
    if magic != PCF_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: PCF_MAGIC,
            found: magic,
        });
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| truncated(path, "version", e))?;
    if version != PCF_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.display().to_string(),
            found: version,
            supported: PCF_VERSION,
        });
    }
    let n_samples = r
        .read_u64::<LittleEndian>()
        .map_err(|e| truncated(path, "sample count", e))?;
    let mut samples = Vec::new();
    for i in 0..n_samples {
        let what = format!("sample {}", i);
        let n_points = r
            .read_u64::<LittleEndian>()
            .map_err(|e| truncated(path, &what, e))?;
        let d_pos = r
            .read_u32::<LittleEndian>()
            .map_err(|e| truncated(path, &what, e))?;
        let d_in = r
            .read_u32::<LittleEndian>()
            .map_err(|e| truncated(path, &what, e))?;
        let d_out = r
            .read_u32::<LittleEndian>()
            .map_err(|e| truncated(path, &what, e))?;
        if n_points == 0 || n_points > MAX_POINTS || d_pos > MAX_DIM || d_in > MAX_DIM || d_out > MAX_DIM
        {
            return Err(Error::invalid_value(
                "read_pcf",
                format!(
                    "{}: implausible header n_points={} dims=({},{},{})",
                    what, n_points, d_pos, d_in, d_out
                ),
            ));
        }
        let n = n_points as usize;
        let coords = read_f32_tensor(&mut r, n, d_pos as usize, path, &format!("{} coords", i))?;
        let features =
            read_f32_tensor(&mut r, n, d_in as usize, path, &format!("{} features", i))?;
        let labels = read_f32_tensor(&mut r, n, d_out as usize, path, &format!("{} labels", i))?;
        samples.push(Sample {
            coords,
            features,
            labels,
        });
    }
    Ok(Dataset { samples })
}

/// Sidecar path: `train.pcf` → `train.meta.json`.
pub fn meta_path(pcf_path: &Path) -> PathBuf {
    pcf_path.with_extension("meta.json")
}

/// Provenance of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub kind: String,
    pub grid_size: usize,
    pub base_seed: u64,
}

/// Which files make up the train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub train_file: String,
    pub test_file: String,
    pub n_train: usize,
    pub n_test: usize,
}

/// JSON sidecar content for a PCF file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitMeta>,
}

pub fn write_meta(path: &Path, meta: &DatasetMeta) -> Result<()> {
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
