//! Feature datasets: in-memory representation, synthetic piecewise-linear
//! class patches, and the CSV / packed-binary file formats.
//!
//! Packed-binary layout (little-endian):
//!
//! ```text
//! "PLMF" | version: u16 | n: u64 | d: u64 | has_labels: u8
//! | n*d f32 features, row-major | [n u32 labels]
//! ```
//!
//! CSV layout: header `id,label,f0,...,f{d-1}`; a label of `-1` means absent.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{distance, reorthonormalize, Matrix};

const MAGIC: &[u8; 4] = b"PLMF";
const VERSION: u16 = 1;

/// Input feature vectors with optional class labels.
///
/// Labels are carried only for evaluation; training never reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Matrix,
    labels: Option<Vec<u32>>,
    ids: Vec<u64>,
}

impl FeatureDataset {
    pub fn new(features: Matrix, labels: Option<Vec<u32>>, ids: Vec<u64>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Empty("dataset has no rows"));
        }
        if ids.len() != features.rows() {
            return Err(Error::Dimension {
                expected: features.rows(),
                got: ids.len(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::Dimension {
                    expected: features.rows(),
                    got: l.len(),
                });
            }
        }
        if let Some(row) = features.iter_rows().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("feature row {row}")));
        }
        Ok(Self {
            features,
            labels,
            ids,
        })
    }

    /// Dataset with sequential ids `0..n`.
    pub fn from_features(features: Matrix, labels: Option<Vec<u32>>) -> Result<Self> {
        let ids = (0..features.rows() as u64).collect();
        Self::new(features, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Number of distinct labels, if labelled.
    pub fn n_classes(&self) -> Option<usize> {
        let labels = self.labels.as_ref()?;
        let mut l = labels.clone();
        l.sort_unstable();
        l.dedup();
        Some(l.len())
    }

    /// Rows whose label satisfies `keep`, preserving order and ids.
    pub fn filter_by_label(&self, keep: impl Fn(u32) -> bool) -> Result<Self> {
        let labels = self
            .labels
            .as_ref()
            .ok_or(Error::MissingLabels("filter_by_label"))?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(labels[i])).collect();
        Self::new(
            self.features.select_rows(&idx),
            Some(idx.iter().map(|&i| labels[i]).collect()),
            idx.iter().map(|&i| self.ids[i]).collect(),
        )
    }
}

/// Parameters of the synthetic class-patch generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    /// Intrinsic dimension of each class patch.
    pub patch_dim: usize,
    pub ambient_dim: usize,
    pub points_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Half-width of the hypercube each patch is sampled from, in patch coordinates.
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    /// Minimum pairwise centroid distance in units of the patch radius.
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_half_width() -> f64 {
    1.0
}

fn default_separation() -> f64 {
    4.0
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 5,
            patch_dim: 3,
            ambient_dim: 32,
            points_per_class: 100,
            noise_sigma: 0.01,
            seed: 0,
            half_width: default_half_width(),
            separation: default_separation(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::config("n_classes", "must be at least 1"));
        }
        if self.patch_dim == 0 {
            return Err(Error::config("patch_dim", "must be at least 1"));
        }
        if self.patch_dim >= self.ambient_dim {
            return Err(Error::config(
                "patch_dim",
                format!(
                    "must be smaller than ambient_dim ({} >= {})",
                    self.patch_dim, self.ambient_dim
                ),
            ));
        }
        if self.points_per_class == 0 {
            return Err(Error::config("points_per_class", "must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::config("half_width", "must be finite and > 0"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::config("separation", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Largest distance from a noiseless patch point to its centroid.
    pub fn patch_radius(&self) -> f64 {
        self.half_width * (self.patch_dim as f64).sqrt()
    }
}

/// Samples one flat patch per class and scatters points over it.
///
/// Each class gets a random orthonormal `patch_dim`-frame and an offset on a
/// sphere; offsets are redrawn until all centroids sit at least
/// `separation * patch_radius` apart (the sphere grows by 10% every 1000
/// failed draws). Patch coordinates are uniform in `[-half_width, half_width]`
/// and isotropic Gaussian noise of scale `noise_sigma` is added. Features are
/// rounded to `f32` so the packed-binary format round-trips exactly.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.ambient_dim;
    let radius = spec.patch_radius();
    let min_sep = spec.separation * radius;
    let mut offset_scale = min_sep.max(radius);

    let mut offsets: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    let mut failures = 0usize;
    while offsets.len() < spec.n_classes {
        let dir = random_unit(&mut rng, d);
        let cand: Vec<f64> = dir.iter().map(|x| x * offset_scale).collect();
        if offsets.iter().all(|o| distance(o, &cand) >= min_sep) {
            offsets.push(cand);
        } else {
            failures += 1;
            if failures % 1000 == 0 {
                offset_scale *= 1.1;
            }
        }
    }

    let n = spec.n_classes * spec.points_per_class;
    let mut features = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (c, offset) in offsets.iter().enumerate() {
        let mut frame = Matrix::zeros(spec.patch_dim, d);
        for v in frame.as_mut_slice() {
            *v = rng.sample(StandardNormal);
        }
        let frame = reorthonormalize(&frame)?.basis;
        for _ in 0..spec.points_per_class {
            let x = features.row_mut(row);
            x.copy_from_slice(offset);
            for k in 0..spec.patch_dim {
                let t: f64 = rng.gen_range(-spec.half_width..=spec.half_width);
                for (xi, fi) in x.iter_mut().zip(frame.vector(k)) {
                    *xi += t * fi;
                }
            }
            for xi in x.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *xi = ((*xi + spec.noise_sigma * e) as f32) as f64;
            }
            labels.push(c as u32);
            row += 1;
        }
    }
    FeatureDataset::from_features(features, Some(labels))
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::linalg::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    Binary,
}

impl DatasetFormat {
    /// `.csv` selects CSV; anything else is packed-binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Binary,
        }
    }
}

pub fn save_dataset(ds: &FeatureDataset, path: &Path, format: DatasetFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        DatasetFormat::Binary => write_binary(ds, &mut w),
        DatasetFormat::Csv => write_csv(ds, &mut w),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<FeatureDataset> {
    match format {
        DatasetFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_binary(&bytes)
        }
        DatasetFormat::Csv => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            read_csv(BufReader::new(file)).map_err(|e| match e {
                Error::Io { source, .. } => Error::io(path, source),
                other => other,
            })
        }
    }
}

fn write_binary(ds: &FeatureDataset, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    w.write_all(&(ds.dim() as u64).to_le_bytes())?;
    w.write_all(&[u8::from(ds.labels.is_some())])?;
    for v in ds.features.as_slice() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    if let Some(labels) = &ds.labels {
        for l in labels {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Decodes the packed-binary layout from memory.
pub fn decode_binary(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut cur = bytes;
    let mut take = |k: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < k {
            return Err(Error::Format(format!("truncated file while reading {what}")));
        }
        let (head, tail) = cur.split_at(k);
        cur = tail;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected PLMF".into()));
    }
    let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(take(8, "n")?.try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(take(8, "d")?.try_into().unwrap()) as usize;
    let has_labels = match take(1, "label flag")?[0] {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad label flag {f}"))),
    };
    let nd = n
        .checked_mul(d)
        .ok_or_else(|| Error::Format("n*d overflows".into()))?;
    let raw = take(nd * 4, "features")?;
    let mut data = Vec::with_capacity(nd);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Parse {
                row: i / d.max(1),
                reason: "non-finite feature".into(),
            });
        }
        data.push(v as f64);
    }
    let labels = if has_labels {
        let raw = take(n * 4, "labels")?;
        Some(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        None
    };
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", cur.len())));
    }
    FeatureDataset::from_features(Matrix::from_vec(n, d, data)?, labels)
}

fn write_csv(ds: &FeatureDataset, w: &mut impl Write) -> std::io::Result<()> {
    write!(w, "id,label")?;
    for j in 0..ds.dim() {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for (i, row) in ds.features.iter_rows().enumerate() {
        let label = ds.labels.as_ref().map_or(-1, |l| l[i] as i64);
        write!(w, "{},{}", ds.ids[i], label)?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Parses the CSV layout. Row numbers in errors count the header as row 0.
pub fn read_csv(reader: impl BufRead) -> Result<FeatureDataset> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io("<csv>", e))?,
        None => return Err(Error::Parse {
            row: 0,
            reason: "missing header".into(),
        }),
    };
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
        return Err(Error::Parse {
            row: 0,
            reason: "header must start with `id,label,f0`".into(),
        });
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::Parse {
                row: 0,
                reason: format!("expected column `f{j}`, found `{c}`"),
            });
        }
    }
    let d = cols.len() - 2;

    let mut data = Vec::new();
    let mut ids = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    for (k, line) in lines.enumerate() {
        let row = k + 1;
        let line = line.map_err(|e| Error::io("<csv>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::Parse {
                row,
                reason: format!("expected {} columns, found {}", d + 2, fields.len()),
            });
        }
        let id: u64 = fields[0].trim().parse().map_err(|_| Error::Parse {
            row,
            reason: format!("bad id `{}`", fields[0]),
        })?;
        let label: i64 = fields[1].trim().parse().map_err(|_| Error::Parse {
            row,
            reason: format!("bad label `{}`", fields[1]),
        })?;
        if label < -1 || label > u32::MAX as i64 {
            return Err(Error::Parse {
                row,
                reason: format!("label {label} out of range"),
            });
        }
        for (j, f) in fields[2..].iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                row,
                reason: format!("bad value `{f}` in column f{j}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    reason: format!("non-finite value in column f{j}"),
                });
            }
            data.push(v);
        }
        ids.push(id);
        labels.push(label);
    }
    let n = ids.len();
    if n == 0 {
        return Err(Error::Empty("csv has no data rows"));
    }
    let labels = if labels.iter().all(|&l| l == -1) {
        None
    } else if let Some(pos) = labels.iter().position(|&l| l == -1) {
        return Err(Error::Parse {
            row: pos + 1,
            reason: "label missing while other rows are labelled".into(),
        });
    } else {
        Some(labels.into_iter().map(|l| l as u32).collect())
    };
    FeatureDataset::new(Matrix::from_vec(n, d, data)?, labels, ids)
}
