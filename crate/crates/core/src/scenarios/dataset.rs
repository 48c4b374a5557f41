//! Labeled source datasets: generated Gaussian blobs, a directory of PNG files,
//! or a flat binary record file.
//!
//! Record file layout (little endian):
//!
//! ```text
//! magic  b"HSCLREC1"
//! u64    record count
//! u32    rank, u64 × rank sample shape
//! u8     dtype (0 = u8 scaled by 1/255, 1 = f32, 2 = f64)
//! per record: i64 class label, then prod(shape) values of dtype
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HsclError, Result};
use crate::types::SampleId;

const RECORD_MAGIC: &[u8; 8] = b"HSCLREC1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: SampleId,
    pub label: i64,
    pub datum: ArrayD<f64>,
}

/// A labeled dataset with fixed train and test portions. Ids are unique across both.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub sample_shape: Vec<usize>,
    pub class_names: Vec<String>,
    pub train: Vec<Record>,
    pub test: Vec<Record>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn classes(&self) -> Vec<i64> {
        (0..self.class_names.len() as i64).collect()
    }

    /// Shifts ids and labels so the dataset can sit next to another one.
    pub fn offset(mut self, id_offset: SampleId, label_offset: i64) -> Self {
        for r in self.train.iter_mut().chain(self.test.iter_mut()) {
            r.id += id_offset;
            r.label += label_offset;
        }
        self
    }

    pub fn max_id(&self) -> Option<SampleId> {
        self.train.iter().chain(&self.test).map(|r| r.id).max()
    }

    fn check(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(HsclError::Dataset(format!("dataset {} has no training records", self.name)));
        }
        let mut ids: Vec<_> = self.train.iter().chain(&self.test).map(|r| r.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(HsclError::Dataset(format!("dataset {} has duplicate ids", self.name)));
        }
        let n = self.n_classes() as i64;
        for r in self.train.iter().chain(&self.test) {
            if r.datum.shape() != self.sample_shape.as_slice() {
                return Err(HsclError::Dataset(format!(
                    "record {} has shape {:?}, expected {:?}",
                    r.id,
                    r.datum.shape(),
                    self.sample_shape
                )));
            }
            if !(0..n).contains(&r.label) {
                return Err(HsclError::Dataset(format!("record {} has label {} outside 0..{n}", r.id, r.label)));
            }
        }
        Ok(())
    }
}

/// Where a dataset comes from; relative paths resolve against a data root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Blobs {
        #[serde(default = "default_blobs_name")]
        name: String,
        n_classes: usize,
        dim: usize,
        separation: f64,
        n_per_class: usize,
        seed: u64,
    },
    /// `<path>/train/<class>/*.png` and `<path>/test/<class>/*.png`.
    PngDir { name: String, path: PathBuf },
    /// `<path>/train.hscl` and `<path>/test.hscl` in the record format.
    Records { name: String, path: PathBuf },
}

fn default_blobs_name() -> String {
    "blobs".into()
}

impl DatasetSource {
    pub fn name(&self) -> &str {
        match self {
            DatasetSource::Blobs { name, .. } | DatasetSource::PngDir { name, .. } | DatasetSource::Records { name, .. } => {
                name
            }
        }
    }

    pub fn load(&self, data_root: Option<&Path>) -> Result<Dataset> {
        let resolve = |p: &Path| match data_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        };
        let mut ds = match self {
            DatasetSource::Blobs {
                n_classes,
                dim,
                separation,
                n_per_class,
                seed,
                ..
            } => make_synthetic_blobs(*n_classes, *dim, *separation, *n_per_class, *seed)?,
            DatasetSource::PngDir { path, .. } => load_png_dir(&resolve(path))?,
            DatasetSource::Records { path, .. } => load_record_dir(&resolve(path))?,
        };
        ds.name = self.name().to_string();
        Ok(ds)
    }
}

/// Class means for the blobs dataset: `separation/√2 · e_c` when the classes fit
/// on the axes (pairwise distance exactly `separation`), otherwise Gaussian draws
/// rejected until every pair is at least `separation` apart.
pub fn blob_means(n_classes: usize, dim: usize, separation: f64, seed: u64) -> Vec<Array1<f64>> {
    if n_classes <= dim {
        return (0..n_classes)
            .map(|c| {
                let mut m = Array1::zeros(dim);
                m[c] = separation / std::f64::consts::SQRT_2;
                m
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut radius = separation;
    let mut means: Vec<Array1<f64>> = Vec::with_capacity(n_classes);
    let mut tries = 0;
    while means.len() < n_classes {
        let cand = Array1::from_shape_simple_fn(dim, || radius * rng.sample::<f64, _>(StandardNormal));
        if means.iter().all(|m| (m - &cand).dot(&(m - &cand)).sqrt() >= separation) {
            means.push(cand);
        } else {
            tries += 1;
            if tries % 1000 == 0 {
                radius *= 1.5;
            }
        }
    }
    means
}

/// Gaussian clusters with unit covariance. The test portion holds
/// `max(n_per_class / 5, 1)` fresh points per class.
pub fn make_synthetic_blobs(n_classes: usize, dim: usize, separation: f64, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(HsclError::InvalidInput(format!("blobs need at least 2 classes, got {n_classes}")));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(HsclError::InvalidInput(format!("blob separation must be positive, got {separation}")));
    }
    if dim == 0 || n_per_class == 0 {
        return Err(HsclError::InvalidInput("blob dim and n_per_class must be positive".into()));
    }
    let means = blob_means(n_classes, dim, separation, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_test = (n_per_class / 5).max(1);
    let mut next_id = 0;
    let mut draw = |count: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(count * n_classes);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..count {
                let x = mean + &Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
                out.push(Record {
                    id: next_id,
                    label: c as i64,
                    datum: x.into_dyn(),
                });
                next_id += 1;
            }
        }
        out
    };
    let train = draw(n_per_class, &mut rng);
    let test = draw(n_test, &mut rng);
    Ok(Dataset {
        name: default_blobs_name(),
        sample_shape: vec![dim],
        class_names: (0..n_classes).map(|c| c.to_string()).collect(),
        train,
        test,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

/// Reads `train/` and `test/`, each holding one subdirectory of PNG files per class.
/// Class names are the sorted subdirectory names of `train/`. Grayscale files load
/// as one channel, anything else as RGB; values scale to [0, 1].
pub fn load_png_dir(root: &Path) -> Result<Dataset> {
    let train_dir = root.join("train");
    let class_dirs: Vec<PathBuf> = sorted_entries(&train_dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(HsclError::Dataset(format!("no class directories under {}", train_dir.display())));
    }
    let class_names: Vec<String> =
        class_dirs.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();
    let mut shape: Option<Vec<usize>> = None;
    let mut next_id = 0;
    let mut read_split = |split: &str| -> Result<Vec<Record>> {
        let mut out = Vec::new();
        for (label, name) in class_names.iter().enumerate() {
            let dir = root.join(split).join(name);
            if !dir.is_dir() {
                continue;
            }
            for path in sorted_entries(&dir)? {
                if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) != Some(true) {
                    continue;
                }
                let img = image::open(&path)?;
                let gray = matches!(img.color(), image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8);
                let (w, h) = (img.width() as usize, img.height() as usize);
                let datum = if gray {
                    let buf = img.to_luma8();
                    ArrayD::from_shape_fn(IxDyn(&[1, h, w]), |ix| buf.get_pixel(ix[2] as u32, ix[1] as u32)[0] as f64 / 255.0)
                } else {
                    let buf = img.to_rgb8();
                    ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |ix| {
                        buf.get_pixel(ix[2] as u32, ix[1] as u32)[ix[0]] as f64 / 255.0
                    })
                };
                match &shape {
                    None => shape = Some(datum.shape().to_vec()),
                    Some(s) if s.as_slice() != datum.shape() => {
                        return Err(HsclError::Dataset(format!(
                            "{} has shape {:?}, expected {s:?}",
                            path.display(),
                            datum.shape()
                        )))
                    }
                    _ => {}
                }
                out.push(Record {
                    id: next_id,
                    label: label as i64,
                    datum,
                });
                next_id += 1;
            }
        }
        Ok(out)
    };
    let train = read_split("train")?;
    let test = read_split("test")?;
    let ds = Dataset {
        name: root.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        sample_shape: shape.unwrap_or_default(),
        class_names,
        train,
        test,
    };
    ds.check()?;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordDtype {
    U8,
    F32,
    F64,
}

impl RecordDtype {
    fn code(self) -> u8 {
        match self {
            RecordDtype::U8 => 0,
            RecordDtype::F32 => 1,
            RecordDtype::F64 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(RecordDtype::U8),
            1 => Ok(RecordDtype::F32),
            2 => Ok(RecordDtype::F64),
            _ => Err(HsclError::Dataset(format!("unknown record dtype {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            RecordDtype::U8 => 1,
            RecordDtype::F32 => 4,
            RecordDtype::F64 => 8,
        }
    }
}

/// Writes `(label, datum)` pairs; every datum must have `shape`.
pub fn write_records(path: &Path, shape: &[usize], dtype: RecordDtype, records: &[(i64, ArrayD<f64>)]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(RECORD_MAGIC)?;
    out.write_all(&(records.len() as u64).to_le_bytes())?;
    out.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    out.write_all(&[dtype.code()])?;
    for (label, datum) in records {
        if datum.shape() != shape {
            return Err(HsclError::ShapeMismatch(format!("record shape {:?} vs header {shape:?}", datum.shape())));
        }
        out.write_all(&label.to_le_bytes())?;
        for &v in datum.iter() {
            match dtype {
                RecordDtype::U8 => out.write_all(&[(v * 255.0).round().clamp(0.0, 255.0) as u8])?,
                RecordDtype::F32 => out.write_all(&(v as f32).to_le_bytes())?,
                RecordDtype::F64 => out.write_all(&v.to_le_bytes())?,
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a record file into `(shape, [(label, datum)])`.
pub fn read_records(path: &Path) -> Result<(Vec<usize>, Vec<(i64, ArrayD<f64>)>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != RECORD_MAGIC {
        return Err(HsclError::Dataset(format!("{} is not a record file", path.display())));
    }
    let mut b8 = [0u8; 8];
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let dtype = RecordDtype::from_code(code[0])?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * dtype.width()];
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b8)?;
        let label = i64::from_le_bytes(b8);
        r.read_exact(&mut buf)?;
        let values: Vec<f64> = match dtype {
            RecordDtype::U8 => buf.iter().map(|&b| b as f64 / 255.0).collect(),
            RecordDtype::F32 => buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            RecordDtype::F64 => buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        };
        let datum = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| HsclError::Dataset(e.to_string()))?;
        records.push((label, datum));
    }
    Ok((shape, records))
}

/// Loads `train.hscl` and (if present) `test.hscl` from `root`. Class names are
/// the label values seen, which must be `0..n`.
pub fn load_record_dir(root: &Path) -> Result<Dataset> {
    let (shape, train) = read_records(&root.join("train.hscl"))?;
    let test_path = root.join("test.hscl");
    let test = if test_path.exists() {
        let (s, t) = read_records(&test_path)?;
        if s != shape {
            return Err(HsclError::Dataset(format!("test shape {s:?} differs from train shape {shape:?}")));
        }
        t
    } else {
        Vec::new()
    };
    let n_classes = train.iter().chain(&test).map(|(l, _)| *l).max().map_or(0, |m| m + 1);
    let mut id = 0;
    let mut to_records = |v: Vec<(i64, ArrayD<f64>)>| {
        v.into_iter()
            .map(|(label, datum)| {
                id += 1;
                Record { id: id - 1, label, datum }
            })
            .collect::<Vec<_>>()
    };
    let train = to_records(train);
    let test = to_records(test);
    let ds = Dataset {
        name: root.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        sample_shape: shape,
        class_names: (0..n_classes).map(|c| c.to_string()).collect(),
        train,
        test,
    };
    ds.check()?;
    Ok(ds)
}
