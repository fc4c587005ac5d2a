//! The unitary MPS classifier: construction, canonical form, evaluation and
//! a checksummed binary serialization.
//!
//! Core `l` is a rank-3 tensor with axis order (physical, left, right); the
//! left axis of core 0 is the label bond of dimension `D`. In full right
//! canonical form every core satisfies the right-orthogonal condition
//! (rows of the `left x (phys * right)` matricization are orthonormal), which
//! makes the whole MPS an isometry from the `d^L` product space onto a
//! `D`-dimensional output space.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{DataError, SitePath};
use crate::feature::EncodedSample;
use crate::linalg::{closest_isometry, lq, svd_matrix};
use crate::tensor::{contract, DenseTensor, TensorError};

const MODEL_MAGIC: &[u8; 9] = b"ENTMPS-M1";
const DENSE_LIMIT: usize = 1 << 26;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),
    #[error("model file i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad model magic")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated model file")]
    Truncated { path: PathBuf },
    #[error("{path}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },
    #[error("inconsistent model shape: {0}")]
    ShapeInconsistent(String),
    #[error("sample has {got_sites} sites of dim {got_d}, model expects {want_sites} of dim {want_d}")]
    SampleMismatch {
        want_sites: usize,
        want_d: usize,
        got_sites: usize,
        got_d: usize,
    },
    #[error("dense reconstruction of {0} entries is too large")]
    TooLargeForDense(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which cores are known to satisfy the right-orthogonal condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanonicalForm {
    None,
    /// Cores strictly right of `l` are right-orthogonal; core `l` carries the
    /// remainder.
    RightOf(usize),
    /// Every core, including the label core, is right-orthogonal: the MPS is
    /// an exact isometry.
    FullRight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpsClassifier {
    cores: Vec<DenseTensor>,
    label_dim: usize,
    chi_max: usize,
    path: SitePath,
    canonical: CanonicalForm,
}

impl MpsClassifier {
    /// Seeded random initialization, right-orthogonalized so the classifier
    /// starts as an exact isometry. Bond dimensions are capped by what either
    /// boundary can support, so no dead parameters exist.
    pub fn init_random(
        path: SitePath,
        d: usize,
        chi: usize,
        label_dim: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let l_sites = path.len();
        if l_sites < 2 || d < 2 || chi < 1 || label_dim < 2 {
            return Err(ModelError::InvalidDims(format!(
                "need L >= 2, d >= 2, chi >= 1, D >= 2; got L={l_sites}, d={d}, chi={chi}, D={label_dim}"
            )));
        }
        let bonds = bond_caps(l_sites, d, chi, label_dim);
        if label_dim > d * bonds[0] {
            return Err(ModelError::InvalidDims(format!(
                "label dimension {label_dim} exceeds the d * chi_0 = {} capacity of the first bond",
                d * bonds[0]
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cores = Vec::with_capacity(l_sites);
        for l in 0..l_sites {
            let left = if l == 0 { label_dim } else { bonds[l - 1] };
            let right = bonds[l];
            let data: Vec<f64> = (0..d * left * right)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            cores.push(
                DenseTensor::new(vec![d, left, right], data).expect("random core is finite"),
            );
        }
        let mut mps = Self {
            cores,
            label_dim,
            chi_max: chi,
            path,
            canonical: CanonicalForm::None,
        };
        mps.right_orthogonalize()?;
        Ok(mps)
    }

    /// Build an exact MPS for a dense tensor of shape `(D, d, ..., d)` by
    /// successive SVD splits from the right. Singular values below
    /// `tol * s_max` at each split are discarded, shrinking the bond. The
    /// result is canonical right of core 0, which keeps the represented
    /// tensor bit-for-bit (no re-isometrization of the label core).
    pub fn from_dense(psi: &DenseTensor, path: SitePath, tol: f64) -> Result<Self, ModelError> {
        let rank = psi.rank();
        if rank < 3 {
            return Err(ModelError::InvalidDims(format!(
                "dense input must be rank >= 3 (label + 2 sites), got rank {rank}"
            )));
        }
        let l_sites = rank - 1;
        if path.len() != l_sites {
            return Err(ModelError::InvalidDims(format!(
                "path has {} entries for {l_sites} sites",
                path.len()
            )));
        }
        let label_dim = psi.dims()[0];
        let d = psi.dims()[1];
        if psi.dims()[1..].iter().any(|&x| x != d) {
            return Err(ModelError::InvalidDims(format!(
                "site axes must share one physical dimension, got {:?}",
                psi.dims()
            )));
        }

        let mut cores_rev: Vec<DenseTensor> = Vec::with_capacity(l_sites);
        // rest holds (D, d^l sites, chi) flattened as a matrix
        let mut chi = 1usize;
        let mut rest = psi.clone();
        for l in (1..l_sites).rev() {
            let rows: usize = label_dim * d.pow(l as u32);
            let mat = rest.into_reshape(vec![rows, d * chi])?;
            let svd = svd_matrix(&mat)?;
            let smax = svd.s.first().copied().unwrap_or(0.0);
            let keep = svd
                .s
                .iter()
                .filter(|&&s| s > tol * smax && s > 0.0)
                .count()
                .max(1);
            // core = first `keep` rows of vt, reshaped (keep, d, chi)
            let vt_rows = svd.vt.data()[..keep * d * chi].to_vec();
            let core = DenseTensor::new(vec![keep, d, chi], vt_rows)?.permute(&[1, 0, 2])?;
            cores_rev.push(core);
            // rest = u[:, :keep] * diag(s[:keep])
            let mut rest_data = vec![0.0; rows * keep];
            let u = svd.u.data();
            let full = svd.s.len();
            for r in 0..rows {
                for k in 0..keep {
                    rest_data[r * keep + k] = u[r * full + k] * svd.s[k];
                }
            }
            rest = DenseTensor::new(vec![rows, keep], rest_data)?;
            chi = keep;
        }
        let core0 = rest
            .into_reshape(vec![label_dim, d, chi])?
            .permute(&[1, 0, 2])?;
        cores_rev.push(core0);
        cores_rev.reverse();
        let chi_max = cores_rev
            .iter()
            .map(|c| c.dims()[2])
            .max()
            .unwrap_or(1);
        Ok(Self {
            cores: cores_rev,
            label_dim,
            chi_max,
            path,
            canonical: CanonicalForm::RightOf(0),
        })
    }

    pub fn sites(&self) -> usize {
        self.cores.len()
    }

    pub fn phys_dim(&self) -> usize {
        self.cores[0].dims()[0]
    }

    pub fn label_dim(&self) -> usize {
        self.label_dim
    }

    pub fn chi_max(&self) -> usize {
        self.chi_max
    }

    pub fn path(&self) -> &SitePath {
        &self.path
    }

    pub fn canonical(&self) -> CanonicalForm {
        self.canonical
    }

    pub fn core(&self, l: usize) -> &DenseTensor {
        &self.cores[l]
    }

    pub(crate) fn set_core(&mut self, l: usize, core: DenseTensor) {
        debug_assert_eq!(self.cores[l].dims(), core.dims());
        self.cores[l] = core;
    }

    /// Replace one core without re-orthogonalizing, downgrading the canonical
    /// marker. Only meant for finite-difference oracles in tests.
    #[doc(hidden)]
    pub fn set_core_for_tests(&mut self, l: usize, core: DenseTensor) {
        assert_eq!(self.cores[l].dims(), core.dims());
        self.cores[l] = core;
        self.canonical = CanonicalForm::None;
    }

    /// Right bond dimension of each core (the last entry is 1).
    pub fn bond_dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.dims()[2]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(|c| c.len()).sum()
    }

    /// Matricize core `l` as (left) x (phys * right).
    pub(crate) fn core_as_left_matrix(&self, l: usize) -> DenseTensor {
        let c = &self.cores[l];
        let (d, left, right) = (c.dims()[0], c.dims()[1], c.dims()[2]);
        c.permute(&[1, 0, 2])
            .expect("static permutation")
            .into_reshape(vec![left, d * right])
            .expect("same element count")
    }

    pub(crate) fn core_from_left_matrix(m: DenseTensor, d: usize, right: usize) -> DenseTensor {
        let left = m.dims()[0];
        m.into_reshape(vec![left, d, right])
            .expect("same element count")
            .permute(&[1, 0, 2])
            .expect("static permutation")
    }

    /// Bring the classifier to full right canonical form. The represented map
    /// changes only by the final re-isometrization of the label core (gauge
    /// factors are absorbed leftward along the chain first).
    pub fn right_orthogonalize(&mut self) -> Result<(), ModelError> {
        let l_sites = self.sites();
        for l in (1..l_sites).rev() {
            let c = &self.cores[l];
            let (d, left, right) = (c.dims()[0], c.dims()[1], c.dims()[2]);
            if left > d * right {
                return Err(ModelError::ShapeInconsistent(format!(
                    "core {l} has left bond {left} > d * right = {}",
                    d * right
                )));
            }
            let m = self.core_as_left_matrix(l);
            let (mut l_factor, q) = lq(&m)?;
            // rescale the absorbed factor so magnitudes cannot compound
            // across hundreds of sites; the overall scale is dropped by the
            // final re-isometrization of the label core anyway
            let norm = l_factor.frobenius_norm();
            if norm > 0.0 {
                l_factor = l_factor.scale(1.0 / norm);
            }
            self.cores[l] = Self::core_from_left_matrix(q, d, right);
            self.cores[l - 1] = contract(&self.cores[l - 1], &l_factor, &[2], &[0])?;
        }
        let c0 = &self.cores[0];
        let (d, label, right) = (c0.dims()[0], c0.dims()[1], c0.dims()[2]);
        if label > d * right {
            return Err(ModelError::ShapeInconsistent(format!(
                "label dimension {label} exceeds d * chi_0 = {}",
                d * right
            )));
        }
        let m0 = self.core_as_left_matrix(0);
        let w = closest_isometry(&m0).map_err(|e| match e {
            TensorError::ZeroMatrix => {
                ModelError::ShapeInconsistent("the classifier is the zero map".into())
            }
            other => ModelError::Tensor(other),
        })?;
        self.cores[0] = Self::core_from_left_matrix(w, d, right);
        self.canonical = CanonicalForm::FullRight;
        Ok(())
    }

    /// Worst right-orthogonality defect over all cores (including the label
    /// core): `max |M M^T - I|` for the left matricization.
    pub fn orthogonality_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for l in 0..self.sites() {
            let m = self.core_as_left_matrix(l);
            let g = contract(&m, &m, &[1], &[1]).expect("gram matrix");
            let n = g.dims()[0];
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((g.get(&[i, j]) - want).abs());
                }
            }
        }
        worst
    }

    fn check_sample(&self, sample: &EncodedSample) -> Result<(), ModelError> {
        if sample.sites() != self.sites() || sample.phys_dim() != self.phys_dim() {
            return Err(ModelError::SampleMismatch {
                want_sites: self.sites(),
                want_d: self.phys_dim(),
                got_sites: sample.sites(),
                got_d: sample.phys_dim(),
            });
        }
        Ok(())
    }

    /// Output vector `u_b = sum_s Psi_{b,s} prod_l v_l[s_l]`, contracted
    /// right-to-left in `O(L d chi^2)`. In full right canonical form
    /// `|u| <= 1` for unit product states.
    pub fn forward(&self, sample: &EncodedSample) -> Result<Vec<f64>, ModelError> {
        self.check_sample(sample)?;
        let l_sites = self.sites();
        let mut r = vec![1.0f64];
        for l in (1..l_sites).rev() {
            r = self.apply_core_right(l, sample.site_vector(l), &r);
        }
        let c0 = &self.cores[0];
        let (d, label, right) = (c0.dims()[0], c0.dims()[1], c0.dims()[2]);
        let v = sample.site_vector(0);
        let data = c0.data();
        let mut u = vec![0.0f64; label];
        for s in 0..d {
            let vs = v[s];
            if vs == 0.0 {
                continue;
            }
            for (b, ub) in u.iter_mut().enumerate() {
                let row = &data[(s * label + b) * right..(s * label + b + 1) * right];
                let acc: f64 = row.iter().zip(&r).map(|(a, x)| a * x).sum();
                *ub += vs * acc;
            }
        }
        Ok(u)
    }

    /// `new_r[a] = sum_{s,b} core_l[s,a,b] v[s] r[b]`
    pub(crate) fn apply_core_right(&self, l: usize, v: &[f64], r: &[f64]) -> Vec<f64> {
        let c = &self.cores[l];
        let (d, left, right) = (c.dims()[0], c.dims()[1], c.dims()[2]);
        debug_assert_eq!(v.len(), d);
        debug_assert_eq!(r.len(), right);
        let data = c.data();
        let mut out = vec![0.0f64; left];
        for s in 0..d {
            let vs = v[s];
            if vs == 0.0 {
                continue;
            }
            for (a, o) in out.iter_mut().enumerate() {
                let row = &data[(s * left + a) * right..(s * left + a + 1) * right];
                let acc: f64 = row.iter().zip(r).map(|(x, y)| x * y).sum();
                *o += vs * acc;
            }
        }
        out
    }

    /// `new_l[b] = sum_{s,a} core_l[s,a,b] v[s] l[a]` (label axis for core 0).
    pub(crate) fn apply_core_left(&self, l: usize, v: &[f64], lv: &[f64]) -> Vec<f64> {
        let c = &self.cores[l];
        let (d, left, right) = (c.dims()[0], c.dims()[1], c.dims()[2]);
        debug_assert_eq!(v.len(), d);
        debug_assert_eq!(lv.len(), left);
        let data = c.data();
        let mut out = vec![0.0f64; right];
        for s in 0..d {
            let vs = v[s];
            if vs == 0.0 {
                continue;
            }
            for (a, &la) in lv.iter().enumerate() {
                let w = vs * la;
                if w == 0.0 {
                    continue;
                }
                let row = &data[(s * left + a) * right..(s * left + a + 1) * right];
                for (o, &x) in out.iter_mut().zip(row) {
                    *o += w * x;
                }
            }
        }
        out
    }

    /// Class prediction: `argmax_b |u_b|`, ties toward the smaller index.
    pub fn predict(&self, sample: &EncodedSample) -> Result<usize, ModelError> {
        let u = self.forward(sample)?;
        Ok(argmax_abs(&u))
    }

    /// Contract all cores into the dense `(D, d, ..., d)` tensor. Only
    /// sensible for short chains; guarded by an element-count limit.
    pub fn to_dense(&self) -> Result<DenseTensor, ModelError> {
        let d = self.phys_dim();
        let mut size = self.label_dim;
        for _ in 0..self.sites() {
            size = size.saturating_mul(d);
            if size > DENSE_LIMIT {
                return Err(ModelError::TooLargeForDense(size));
            }
        }
        // (b, s0, a0)
        let mut acc = self.cores[0].permute(&[1, 0, 2])?;
        for l in 1..self.sites() {
            let rank = acc.rank();
            // bond axis is last; contracting it against the next core's left
            // bond appends (s_l, a_l) in that order
            acc = contract(&acc, &self.cores[l], &[rank - 1], &[1])?;
        }
        // drop the trailing bond of size 1
        let mut dims = acc.dims().to_vec();
        assert_eq!(dims.pop(), Some(1));
        Ok(acc.into_reshape(dims)?)
    }

    /// Serialize to the checksummed `ENTMPS-M1` container.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MODEL_MAGIC);
        for v in [
            self.sites() as u32,
            self.phys_dim() as u32,
            self.label_dim as u32,
            self.chi_max as u32,
            encode_canonical(self.canonical),
        ] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &p in self.path.order() {
            bytes.extend_from_slice(&(p as u32).to_le_bytes());
        }
        for core in &self.cores {
            for &dim in core.dims() {
                bytes.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &x in core.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        fs::write(path, bytes).map_err(|e| ModelError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|e| ModelError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let truncated = || ModelError::Truncated {
            path: path.to_path_buf(),
        };
        if bytes.len() < MODEL_MAGIC.len() + 4 {
            return Err(truncated());
        }
        if &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
            return Err(ModelError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32(body);
        if stored != computed {
            return Err(ModelError::ChecksumMismatch {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }

        let mut cursor = MODEL_MAGIC.len();
        let next_u32 = |cursor: &mut usize| -> Result<u32, ModelError> {
            if *cursor + 4 > body.len() {
                return Err(truncated());
            }
            let v = u32::from_le_bytes(body[*cursor..*cursor + 4].try_into().unwrap());
            *cursor += 4;
            Ok(v)
        };
        let l_sites = next_u32(&mut cursor)? as usize;
        let d = next_u32(&mut cursor)? as usize;
        let label_dim = next_u32(&mut cursor)? as usize;
        let chi_max = next_u32(&mut cursor)? as usize;
        let canonical = decode_canonical(next_u32(&mut cursor)?, l_sites)
            .ok_or_else(|| ModelError::ShapeInconsistent("bad canonical code".into()))?;
        let mut order = Vec::with_capacity(l_sites);
        for _ in 0..l_sites {
            order.push(next_u32(&mut cursor)? as usize);
        }
        let path_perm = SitePath::new(order)?;

        let mut cores = Vec::with_capacity(l_sites);
        for l in 0..l_sites {
            let cd = next_u32(&mut cursor)? as usize;
            let left = next_u32(&mut cursor)? as usize;
            let right = next_u32(&mut cursor)? as usize;
            if cd != d {
                return Err(ModelError::ShapeInconsistent(format!(
                    "core {l} has physical dimension {cd}, header says {d}"
                )));
            }
            let count = cd
                .checked_mul(left)
                .and_then(|x| x.checked_mul(right))
                .ok_or_else(truncated)?;
            if cursor + count * 8 > body.len() {
                return Err(truncated());
            }
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_le_bytes(body[cursor..cursor + 8].try_into().unwrap()));
                cursor += 8;
            }
            cores.push(DenseTensor::new(vec![cd, left, right], data)?);
        }
        if cursor != body.len() {
            return Err(ModelError::ShapeInconsistent(
                "trailing bytes after the last core".into(),
            ));
        }
        if cores.is_empty() || cores[0].dims()[1] != label_dim {
            return Err(ModelError::ShapeInconsistent(
                "label bond does not match header".into(),
            ));
        }
        for l in 1..l_sites {
            if cores[l].dims()[1] != cores[l - 1].dims()[2] {
                return Err(ModelError::ShapeInconsistent(format!(
                    "bond between cores {} and {l} is inconsistent",
                    l - 1
                )));
            }
        }
        if cores[l_sites - 1].dims()[2] != 1 {
            return Err(ModelError::ShapeInconsistent(
                "last core must close with a bond of 1".into(),
            ));
        }
        Ok(Self {
            cores,
            label_dim,
            chi_max,
            path: path_perm,
            canonical,
        })
    }
}

pub(crate) fn argmax_abs(u: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_val = u[0].abs();
    for (b, &x) in u.iter().enumerate().skip(1) {
        if x.abs() > best_val {
            best = b;
            best_val = x.abs();
        }
    }
    best
}

fn encode_canonical(c: CanonicalForm) -> u32 {
    match c {
        CanonicalForm::None => 0,
        CanonicalForm::FullRight => 1,
        CanonicalForm::RightOf(l) => 2 + l as u32,
    }
}

fn decode_canonical(code: u32, l_sites: usize) -> Option<CanonicalForm> {
    match code {
        0 => Some(CanonicalForm::None),
        1 => Some(CanonicalForm::FullRight),
        k if (k as usize) < 2 + l_sites => Some(CanonicalForm::RightOf(k as usize - 2)),
        _ => None,
    }
}

/// Bond caps `chi_l = min(chi, d^(l+1) * D, d^(L-1-l))`, saturating.
fn bond_caps(l_sites: usize, d: usize, chi: usize, label_dim: usize) -> Vec<usize> {
    (0..l_sites)
        .map(|l| {
            if l == l_sites - 1 {
                return 1;
            }
            let left = sat_pow(d, l + 1, chi).saturating_mul(label_dim);
            let right = sat_pow(d, l_sites - 1 - l, chi);
            chi.min(left).min(right)
        })
        .collect()
}

fn sat_pow(base: usize, exp: usize, cap: usize) -> usize {
    let mut acc = 1usize;
    for _ in 0..exp {
        acc = acc.saturating_mul(base);
        if acc > cap {
            return cap + 1; // anything above the cap behaves the same
        }
    }
    acc
}

/// CRC-32 (IEEE 802.3, reflected) of a byte slice.
pub(crate) fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}
