//! MNIST IDX ingestion, class-pair selection, 2D DCT, and path linearization.
//!
//! Images are read fully into memory and normalized to `[0, 1]`. The optional
//! DCT moves them to frequency space, where a JPEG-style zigzag path orders
//! coefficients by non-decreasing frequency.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::par;
use crate::tensor::{DenseTensor, TensorError};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CACHE_MAGIC: &[u8; 8] = b"ENTMPS01";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {got:#010x}, expected {want:#010x}")]
    BadMagic { path: PathBuf, got: u32, want: u32 },
    #[error("{path}: truncated payload (wanted {want} bytes, got {got})")]
    Truncated { path: PathBuf, want: usize, got: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("images are {rows}x{cols}, expected square")]
    NonSquareImages { rows: usize, cols: usize },
    #[error("label {0} outside [0, 9]")]
    LabelOutOfRange(u8),
    #[error("invalid class pair ({0}, {1})")]
    BadPair(u8, u8),
    #[error("no images with labels {0} or {1}")]
    EmptySelection(u8, u8),
    #[error("path length {path_len} does not match image size {expected}")]
    PathLengthMismatch { path_len: usize, expected: usize },
    #[error("site path entries are not distinct: {0:?}")]
    NotInjective(Vec<usize>),
    #[error("cannot rescale all-zero data")]
    AllZero,
    #[error("{path}: bad cache magic")]
    BadCacheMagic { path: PathBuf },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A set of square grayscale images with digit labels.
#[derive(Debug, Clone)]
pub struct ImageSet {
    /// `n * m * m` values, row-major per image.
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
    pub side: usize,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, n: usize) -> &[f64] {
        let px = self.side * self.side;
        &self.images[n * px..(n + 1) * px]
    }
}

/// Load an MNIST IDX image/label file pair. Pixels are divided by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageSet, DataError> {
    let mut img = BufReader::new(File::open(images_path).map_err(|e| io_err(images_path, e))?);
    let magic = read_u32_be(&mut img, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            got: magic,
            want: IDX_IMAGES_MAGIC,
        });
    }
    let n = read_u32_be(&mut img, images_path)? as usize;
    let rows = read_u32_be(&mut img, images_path)? as usize;
    let cols = read_u32_be(&mut img, images_path)? as usize;
    if rows != cols {
        return Err(DataError::NonSquareImages { rows, cols });
    }
    let want = n * rows * cols;
    let mut bytes = vec![0u8; want];
    read_exact_or_truncated(&mut img, &mut bytes, images_path)?;

    let mut lab = BufReader::new(File::open(labels_path).map_err(|e| io_err(labels_path, e))?);
    let magic = read_u32_be(&mut lab, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            got: magic,
            want: IDX_LABELS_MAGIC,
        });
    }
    let n_labels = read_u32_be(&mut lab, labels_path)? as usize;
    if n_labels != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let mut labels = vec![0u8; n_labels];
    read_exact_or_truncated(&mut lab, &mut labels, labels_path)?;
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(DataError::LabelOutOfRange(bad));
    }

    let images: Vec<f64> = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(ImageSet {
        images,
        labels,
        side: rows,
    })
}

/// Keep only two digit classes, remapping `class_a -> 0`, `class_b -> 1`.
pub fn select_pair(set: &ImageSet, class_a: u8, class_b: u8) -> Result<ImageSet, DataError> {
    if class_a == class_b || class_a > 9 || class_b > 9 {
        return Err(DataError::BadPair(class_a, class_b));
    }
    let px = set.side * set.side;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (n, &lab) in set.labels.iter().enumerate() {
        let remapped = if lab == class_a {
            0u8
        } else if lab == class_b {
            1u8
        } else {
            continue;
        };
        images.extend_from_slice(set.image(n));
        labels.push(remapped);
        debug_assert_eq!(images.len(), labels.len() * px);
    }
    if labels.is_empty() {
        return Err(DataError::EmptySelection(class_a, class_b));
    }
    Ok(ImageSet {
        images,
        labels,
        side: set.side,
    })
}

/// Orthonormal 2D DCT-II of a square image.
pub fn dct2(image: &DenseTensor) -> Result<DenseTensor, DataError> {
    let m = square_side(image)?;
    let c = dct_matrix(m);
    // eta = C theta C^T
    let tmp = crate::tensor::contract(&c, image, &[1], &[0])?;
    Ok(crate::tensor::contract(&tmp, &c, &[1], &[1])?)
}

/// Inverse of [`dct2`] (the transpose transform).
pub fn idct2(coeffs: &DenseTensor) -> Result<DenseTensor, DataError> {
    let m = square_side(coeffs)?;
    let c = dct_matrix(m);
    let tmp = crate::tensor::contract(&c, coeffs, &[0], &[0])?;
    Ok(crate::tensor::contract(&tmp, &c, &[1], &[0])?)
}

fn square_side(image: &DenseTensor) -> Result<usize, DataError> {
    if image.rank() != 2 || image.dims()[0] != image.dims()[1] {
        return Err(DataError::NonSquareImages {
            rows: image.dims().first().copied().unwrap_or(0),
            cols: image.dims().last().copied().unwrap_or(0),
        });
    }
    Ok(image.dims()[0])
}

fn dct_matrix(m: usize) -> DenseTensor {
    let norm = (2.0 / m as f64).sqrt();
    DenseTensor::from_fn(vec![m, m], |idx| {
        let (u, x) = (idx[0] as f64, idx[1] as f64);
        let alpha = if idx[0] == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
        norm * alpha * ((2.0 * x + 1.0) * u * std::f64::consts::PI / (2.0 * m as f64)).cos()
    })
}

/// Apply [`dct2`] to every image of the set, in parallel.
pub fn dct_all(set: &ImageSet) -> Result<ImageSet, DataError> {
    let m = set.side;
    let indices: Vec<usize> = (0..set.len()).collect();
    let transformed: Vec<Result<Vec<f64>, DataError>> = par::map_collect(&indices, |&n| {
        let img = DenseTensor::new(vec![m, m], set.image(n).to_vec())?;
        Ok(dct2(&img)?.into_data())
    });
    let mut images = Vec::with_capacity(set.images.len());
    for r in transformed {
        images.extend_from_slice(&r?);
    }
    Ok(ImageSet {
        images,
        labels: set.labels.clone(),
        side: m,
    })
}

/// Ordering of MPS sites over flattened pixel/coefficient indices.
///
/// `order[l]` is the flat index (`x * M + y`) that site `l` reads. Paths over
/// whole images are bijections; truncated models keep an injective prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SitePath {
    order: Vec<usize>,
}

impl SitePath {
    pub fn new(order: Vec<usize>) -> Result<Self, DataError> {
        let mut seen = std::collections::HashSet::new();
        if !order.iter().all(|&i| seen.insert(i)) {
            return Err(DataError::NotInjective(order));
        }
        Ok(Self { order })
    }

    /// Row-major traversal of `len` sites.
    pub fn identity(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// True when the entries are exactly a permutation of `0..len`.
    pub fn is_bijection(&self) -> bool {
        let mut sorted = self.order.clone();
        sorted.sort_unstable();
        sorted.iter().enumerate().all(|(i, &v)| i == v)
    }

    /// First `len` sites of this path.
    pub fn prefix(&self, len: usize) -> Self {
        Self {
            order: self.order[..len].to_vec(),
        }
    }
}

/// JPEG-style anti-diagonal traversal of an `m x m` grid starting at (0, 0).
/// Along the path `x + y` never decreases.
pub fn zigzag_path(m: usize) -> SitePath {
    assert!(m >= 1);
    let mut order = Vec::with_capacity(m * m);
    for diag in 0..(2 * m - 1) {
        let lo = diag.saturating_sub(m - 1);
        let hi = diag.min(m - 1);
        if diag % 2 == 0 {
            // moving up-right: x decreasing
            for x in (lo..=hi).rev() {
                order.push(x * m + (diag - x));
            }
        } else {
            for x in lo..=hi {
                order.push(x * m + (diag - x));
            }
        }
    }
    SitePath { order }
}

/// Images flattened along a path: sample `n`, position `l` holds the value at
/// `path.order()[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSet {
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
    pub n_sites: usize,
}

impl LinearizedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_sites..(n + 1) * self.n_sites]
    }

    /// Keep only the first `len` positions of every sample.
    pub fn truncate_sites(&self, len: usize) -> Self {
        assert!(len >= 1 && len <= self.n_sites);
        let mut values = Vec::with_capacity(self.len() * len);
        for n in 0..self.len() {
            values.extend_from_slice(&self.sample(n)[..len]);
        }
        Self {
            values,
            labels: self.labels.clone(),
            n_sites: len,
        }
    }

    /// Reorder positions: new position `j` reads old position `perm[j]`.
    pub fn permute_sites(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n_sites);
        let mut values = Vec::with_capacity(self.values.len());
        for n in 0..self.len() {
            let row = self.sample(n);
            values.extend(perm.iter().map(|&p| row[p]));
        }
        Self {
            values,
            labels: self.labels.clone(),
            n_sites: self.n_sites,
        }
    }
}

pub fn linearize(set: &ImageSet, path: &SitePath) -> Result<LinearizedSet, DataError> {
    let px = set.side * set.side;
    if path.len() != px {
        return Err(DataError::PathLengthMismatch {
            path_len: path.len(),
            expected: px,
        });
    }
    let mut values = Vec::with_capacity(set.len() * px);
    for n in 0..set.len() {
        let img = set.image(n);
        values.extend(path.order().iter().map(|&i| img[i]));
    }
    Ok(LinearizedSet {
        values,
        labels: set.labels.clone(),
        n_sites: px,
    })
}

/// Divide every value by the global max-abs of `data`, mapping it into
/// `[-1, 1]`. Returns the scale so a test split can be divided by the same
/// factor.
pub fn rescale_frequency(data: &mut LinearizedSet) -> Result<f64, DataError> {
    let scale = data.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(DataError::AllZero);
    }
    for v in data.values.iter_mut() {
        *v /= scale;
    }
    Ok(scale)
}

/// Divide by an externally supplied scale (the training split's).
pub fn rescale_by(data: &mut LinearizedSet, scale: f64) {
    assert!(scale > 0.0);
    for v in data.values.iter_mut() {
        *v /= scale;
    }
}

/// Write the flat binary dataset cache: `ENTMPS01`, u32 N, u32 L (LE),
/// then `N * L` f64 values (LE), then `N` u8 labels.
pub fn write_cache(path: &Path, data: &LinearizedSet) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(data.len() as u32).to_le_bytes())?;
        w.write_all(&(data.n_sites as u32).to_le_bytes())?;
        for v in &data.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&data.labels)?;
        w.flush()
    })();
    res.map_err(|e| io_err(path, e))
}

pub fn read_cache(path: &Path) -> Result<LinearizedSet, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut magic, path)?;
    if &magic != CACHE_MAGIC {
        return Err(DataError::BadCacheMagic {
            path: path.to_path_buf(),
        });
    }
    let mut u32buf = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut u32buf, path)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    read_exact_or_truncated(&mut r, &mut u32buf, path)?;
    let l = u32::from_le_bytes(u32buf) as usize;
    let mut values = vec![0.0f64; n * l];
    let mut f64buf = [0u8; 8];
    for v in values.iter_mut() {
        read_exact_or_truncated(&mut r, &mut f64buf, path)?;
        *v = f64::from_le_bytes(f64buf);
    }
    let mut labels = vec![0u8; n];
    read_exact_or_truncated(&mut r, &mut labels, path)?;
    Ok(LinearizedSet {
        values,
        labels,
        n_sites: l,
    })
}

fn read_u32_be<R: Read>(r: &mut R, path: &Path) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    read_exact_or_truncated(r, &mut buf, path)?;
    Ok(u32::from_be_bytes(buf))
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<(), DataError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(DataError::Truncated {
                    path: path.to_path_buf(),
                    want: buf.len(),
                    got: filled,
                })
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(io_err(path, e)),
        }
    }
    Ok(())
}
