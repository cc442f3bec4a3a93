//! Datasets: the plain-text matrix format, IDX conversion, binarization,
//! subsetting and minibatch order.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const IMAGE_DIMS: usize = 784;
const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    /// Every value is exactly 0 or 1.
    Binary,
    /// Intensities in [0, 1], binarized per minibatch.
    Gray,
    /// Any finite value (synthetic Gaussian data).
    Real,
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataMode::Binary => "binary",
            DataMode::Gray => "gray",
            DataMode::Real => "real",
        })
    }
}

impl FromStr for DataMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(DataMode::Binary),
            "gray" => Ok(DataMode::Gray),
            "real" => Ok(DataMode::Real),
            other => Err(Error::Config(format!("unknown data mode {other:?}"))),
        }
    }
}

impl DataMode {
    fn check(self, v: f64) -> std::result::Result<(), String> {
        let ok = match self {
            DataMode::Binary => v == 0.0 || v == 1.0,
            DataMode::Gray => (0.0..=1.0).contains(&v),
            DataMode::Real => v.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("value {v} out of range for {self} mode"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetOrigin {
    pub parent_checksum: String,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// SHA-256 of the canonical text serialization.
    pub checksum: String,
    pub subset: Option<SubsetOrigin>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    data: Tensor,
    mode: DataMode,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(data: Tensor, mode: DataMode, source: impl Into<String>) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::shape("Dataset::new", &[data.shape()]));
        }
        for (i, v) in data.data().iter().enumerate() {
            if let Err(msg) = mode.check(*v) {
                return Err(Error::Parse {
                    path: "<memory>".into(),
                    msg: format!("row {}: {msg}", i / data.cols().max(1) + 1),
                });
            }
        }
        let checksum = checksum_of(&data);
        Ok(Dataset {
            data,
            mode,
            provenance: Provenance {
                source: source.into(),
                checksum,
                subset: None,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn mode(&self) -> DataMode {
        self.mode
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn checksum(&self) -> &str {
        &self.provenance.checksum
    }

    pub fn rows(&self, idx: &[usize]) -> Tensor {
        self.data.gather_rows(idx)
    }

    pub fn to_text(&self) -> String {
        to_text(&self.data)
    }

    pub fn manifest(&self) -> DataManifest {
        DataManifest {
            n: self.len(),
            dims: self.dims(),
            checksum: self.provenance.checksum.clone(),
            mode: self.mode,
        }
    }
}

/// Sidecar written next to converted files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub n: usize,
    pub dims: usize,
    pub checksum: String,
    pub mode: DataMode,
}

/// One row per line, values separated by single spaces, shortest round-trip decimals.
pub fn to_text(data: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..data.rows() {
        for (j, v) in data.row(i).iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

fn checksum_of(data: &Tensor) -> String {
    hex::encode(Sha256::digest(to_text(data).as_bytes()))
}

/// Parses the text matrix format. With `dims = None` the width is taken from the first row.
pub fn parse_text(text: &str, mode: DataMode, dims: Option<usize>, source: &str) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.into(),
        msg: format!("line {line}: {msg}"),
    };
    let mut width = dims;
    let mut values = Vec::new();
    let mut rows = 0;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for (col, tok) in line.split_whitespace().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| err(line_no, format!("column {}: cannot parse {tok:?}", col + 1)))?;
            mode.check(v)
                .map_err(|m| err(line_no, format!("row {}, column {}: {m}", rows + 1, col + 1)))?;
            values.push(v);
            count += 1;
        }
        match width {
            Some(w) if w != count => {
                return Err(err(line_no, format!("row {} has {count} values, expected {w}", rows + 1)));
            }
            None => width = Some(count),
            _ => {}
        }
        rows += 1;
    }
    let data = Tensor::matrix(rows, width.unwrap_or(0), values)?;
    let checksum = checksum_of(&data);
    Ok(Dataset {
        data,
        mode,
        provenance: Provenance {
            source: source.to_string(),
            checksum,
            subset: None,
        },
    })
}

pub fn load_text(path: &Path, mode: DataMode, dims: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    parse_text(&text, mode, dims, &path.display().to_string())
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("gzip: {e}"),
        })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads an IDX image file (optionally gzipped) as gray values `pixel / 255`, (N, rows*cols).
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read_maybe_gz(path)?;
    parse_idx_images(&bytes, &path.display().to_string())
}

pub fn parse_idx_images(bytes: &[u8], source: &str) -> Result<Tensor> {
    let err = |msg: String| Error::Parse {
        path: source.into(),
        msg,
    };
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| err(format!("truncated header at offset {}", 4 * i)))
    };
    let magic = word(0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(err(format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")));
    }
    let (n, r, c) = (word(1)? as usize, word(2)? as usize, word(3)? as usize);
    let body = &bytes[16..];
    let need = n * r * c;
    if body.len() < need {
        return Err(err(format!(
            "truncated at offset {}: need {need} pixel bytes, have {}",
            16 + body.len(),
            body.len()
        )));
    }
    let data = body[..need].iter().map(|&p| f64::from(p) / 255.0).collect();
    Tensor::matrix(n, r * c, data)
}

/// Each value `p` becomes 1 with probability `p`.
pub fn stochastic_binarize(gray: &Tensor, rng: &mut impl Rng) -> Tensor {
    let data = gray
        .data()
        .iter()
        .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(gray.shape().to_vec(), data).expect("same shape")
}

/// Binary view of a split for evaluation. Gray data gets one fixed
/// binarization per seed; other modes are returned as they are.
pub fn evaluation_matrix(ds: &Dataset, seed: u64) -> Tensor {
    match ds.mode {
        DataMode::Gray => stochastic_binarize(&ds.data, &mut stream_rng(seed, Stream::Binarize, u64::MAX)),
        DataMode::Binary | DataMode::Real => ds.data.clone(),
    }
}

/// Seeded uniform subsample of `n` rows without replacement.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::Config(format!("subset of {n} requested from {} rows", ds.len())));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Subset, 0));
    idx.truncate(n);
    let data = ds.data.gather_rows(&idx);
    let checksum = checksum_of(&data);
    Ok(Dataset {
        data,
        mode: ds.mode,
        provenance: Provenance {
            source: ds.provenance.source.clone(),
            checksum,
            subset: Some(SubsetOrigin {
                parent_checksum: ds.provenance.checksum.clone(),
                n,
                seed,
            }),
        },
    })
}

/// Index batches for one epoch, in an order fixed by `(seed, epoch)`. The
/// final batch may be short.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    order: Vec<usize>,
    batch: usize,
    cursor: usize,
}

impl BatchIterator {
    pub fn new(n: usize, batch: usize, seed: u64, epoch: u64) -> Self {
        assert!(batch >= 1, "batch size must be positive");
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch));
        BatchIterator { order, batch, cursor: 0 }
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(out)
    }
}
