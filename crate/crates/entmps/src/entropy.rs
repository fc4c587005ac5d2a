//! Single-site (SEE) and bipartite (BEE) entanglement entropies of a
//! canonical MPS classifier, in nats.
//!
//! SEE at site `l` is the von Neumann entropy of the trace-normalized
//! reduced density matrix of that site; with the right-orthogonal condition
//! everything right of `l` contracts to the identity, so only the partials up
//! to `l` are built (`O(l d chi^3)`). BEE at a cut is the entropy of the
//! normalized Schmidt spectrum, read off the SVD of the center core after the
//! cores left of the cut have been brought to left-orthogonal form.

use thiserror::Error;

use crate::data::SitePath;
use crate::linalg::{svd_matrix, sym_eigenvalues};
use crate::model::{CanonicalForm, ModelError, MpsClassifier};
use crate::tensor::{contract, DenseTensor, TensorError};

/// Eigenvalues and squared Schmidt values at or below this are treated as
/// exactly zero inside entropy formulas (`0 ln 0 = 0`).
pub const EIG_FLOOR: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("site/cut {index} out of range for {l_sites} sites")]
    OutOfRange { index: usize, l_sites: usize },
    #[error("classifier must be canonical at or left of site {wanted}, but is {form:?}")]
    NotCanonical {
        wanted: usize,
        form: CanonicalForm,
    },
    #[error("state has zero norm; entropies are undefined")]
    ZeroState,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// SEE per site and BEE per cut of one trained model, along its site path.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile {
    pub see: Vec<f64>,
    pub bee: Vec<f64>,
    pub path: SitePath,
}

/// `-sum_i p_i ln p_i` with the floor applied; accepts an unnormalized
/// non-negative spectrum and normalizes it first.
pub(crate) fn entropy_of_spectrum(spectrum: &[f64]) -> f64 {
    let total: f64 = spectrum.iter().map(|&p| p.max(0.0)).sum();
    if total <= 0.0 {
        return 0.0;
    }
    -spectrum
        .iter()
        .map(|&p| p.max(0.0) / total)
        .filter(|&p| p > EIG_FLOOR)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

fn require_canonical(mps: &MpsClassifier, site: usize) -> Result<(), EntropyError> {
    match mps.canonical() {
        CanonicalForm::FullRight => Ok(()),
        CanonicalForm::RightOf(k) if k <= site => Ok(()),
        form => Err(EntropyError::NotCanonical { wanted: site, form }),
    }
}

/// Trace-normalized reduced density matrix of site `l`, built by carrying the
/// label-summed left overlap through cores `0..l` while the right side
/// contracts to the identity.
pub fn reduced_density_single(mps: &MpsClassifier, l: usize) -> Result<DenseTensor, EntropyError> {
    let l_sites = mps.sites();
    if l >= l_sites {
        return Err(EntropyError::OutOfRange {
            index: l,
            l_sites,
        });
    }
    require_canonical(mps, l)?;
    let raw = if l == 0 {
        contract(mps.core(0), mps.core(0), &[1, 2], &[1, 2])?
    } else {
        // lam[a, a'] accumulates the left block, label bond summed
        let mut lam = contract(mps.core(0), mps.core(0), &[0, 1], &[0, 1])?;
        for j in 1..l {
            let tmp = contract(&lam, mps.core(j), &[0], &[1])?; // (a', s, c)
            lam = contract(&tmp, mps.core(j), &[0, 1], &[1, 0])?; // (c, c')
        }
        let tmp = contract(&lam, mps.core(l), &[0], &[1])?; // (a', s, c)
        contract(&tmp, mps.core(l), &[0, 2], &[1, 2])? // (s, s')
    };
    let d = raw.dims()[0];
    let trace: f64 = (0..d).map(|i| raw.get(&[i, i])).sum();
    if trace <= 0.0 {
        return Err(EntropyError::ZeroState);
    }
    // symmetrize against contraction round-off, then normalize
    let mut rho = DenseTensor::zeros(vec![d, d]);
    for i in 0..d {
        for j in 0..d {
            rho.set(&[i, j], 0.5 * (raw.get(&[i, j]) + raw.get(&[j, i])) / trace);
        }
    }
    Ok(rho)
}

/// Single-site entanglement entropy at site `l`.
pub fn see(mps: &MpsClassifier, l: usize) -> Result<f64, EntropyError> {
    let rho = reduced_density_single(mps, l)?;
    let eig = sym_eigenvalues(&rho)?;
    Ok(entropy_of_spectrum(&eig))
}

/// Bipartite entanglement entropy across the cut between sites `cut` and
/// `cut + 1` (0-based; valid cuts are `0..L-1`).
pub fn bee(mps: &MpsClassifier, cut: usize) -> Result<f64, EntropyError> {
    let l_sites = mps.sites();
    if cut + 1 >= l_sites {
        return Err(EntropyError::OutOfRange {
            index: cut,
            l_sites,
        });
    }
    require_canonical(mps, 0)?;
    let mut walker = CenterWalker::new(mps);
    while walker.center < cut {
        walker.move_right()?;
    }
    Ok(entropy_of_schmidt(&walker.schmidt_at_center()?))
}

/// Schmidt entropy across the label bond itself (the cut separating the
/// class output from all data qubits). For an exact isometry the spectrum is
/// uniform and this equals `ln D`; inter-core cuts can exceed `ln D` when the
/// first sites carry data correlations of their own.
pub fn label_bond_entropy(mps: &MpsClassifier) -> Result<f64, EntropyError> {
    require_canonical(mps, 0)?;
    let c0 = mps.core(0);
    let (d, label, right) = (c0.dims()[0], c0.dims()[1], c0.dims()[2]);
    // cores right of 0 contract to the identity, so the Schmidt values across
    // the label bond are the singular values of core 0 matricized label-first
    let m = c0
        .permute(&[1, 0, 2])?
        .into_reshape(vec![label, d * right])?;
    Ok(entropy_of_schmidt(&svd_matrix(&m)?.s))
}

/// Full SEE/BEE profile in a single left-to-right pass, reusing each gauge
/// move for both quantities. Matches the per-site calls to round-off.
pub fn profile(mps: &MpsClassifier) -> Result<EntropyProfile, EntropyError> {
    require_canonical(mps, 0)?;
    let l_sites = mps.sites();
    let mut walker = CenterWalker::new(mps);
    let mut see_values = Vec::with_capacity(l_sites);
    let mut bee_values = Vec::with_capacity(l_sites - 1);
    for c in 0..l_sites {
        while walker.center < c {
            walker.move_right()?;
        }
        let rho = walker.density_at_center()?;
        let eig = sym_eigenvalues(&rho)?;
        see_values.push(entropy_of_spectrum(&eig));
        if c + 1 < l_sites {
            bee_values.push(entropy_of_schmidt(&walker.schmidt_at_center()?));
        }
    }
    Ok(EntropyProfile {
        see: see_values,
        bee: bee_values,
        path: mps.path().clone(),
    })
}

fn entropy_of_schmidt(schmidt: &[f64]) -> f64 {
    let squared: Vec<f64> = schmidt.iter().map(|&s| s * s).collect();
    entropy_of_spectrum(&squared)
}

/// Owns a copy of the cores and moves the orthogonality center rightward via
/// SVD splits. Cores left of the center are left-orthogonal, cores right of
/// it keep the model's right-orthogonal form.
struct CenterWalker {
    cores: Vec<DenseTensor>,
    center: usize,
}

impl CenterWalker {
    fn new(mps: &MpsClassifier) -> Self {
        Self {
            cores: (0..mps.sites()).map(|l| mps.core(l).clone()).collect(),
            center: 0,
        }
    }

    /// Reduced density matrix of the center site (unnormalized).
    fn density_at_center(&self) -> Result<DenseTensor, EntropyError> {
        let c = &self.cores[self.center];
        let raw = contract(c, c, &[1, 2], &[1, 2])?;
        let d = raw.dims()[0];
        let trace: f64 = (0..d).map(|i| raw.get(&[i, i])).sum();
        if trace <= 0.0 {
            return Err(EntropyError::ZeroState);
        }
        let mut rho = DenseTensor::zeros(vec![d, d]);
        for i in 0..d {
            for j in 0..d {
                rho.set(&[i, j], 0.5 * (raw.get(&[i, j]) + raw.get(&[j, i])) / trace);
            }
        }
        Ok(rho)
    }

    /// Schmidt spectrum across the bond right of the center.
    fn schmidt_at_center(&self) -> Result<Vec<f64>, EntropyError> {
        let c = &self.cores[self.center];
        let (d, left, right) = (c.dims()[0], c.dims()[1], c.dims()[2]);
        let m = c.reshape(vec![d * left, right])?;
        Ok(svd_matrix(&m)?.s)
    }

    fn move_right(&mut self) -> Result<(), EntropyError> {
        let c = &self.cores[self.center];
        let (d, left, right) = (c.dims()[0], c.dims()[1], c.dims()[2]);
        let m = c.reshape(vec![d * left, right])?;
        let svd = svd_matrix(&m)?;
        // drop numerically dead Schmidt directions; carrying them along only
        // compounds underflow over hundreds of moves
        let smax = svd.s.first().copied().unwrap_or(0.0);
        let keep = svd
            .s
            .iter()
            .filter(|&&x| x > smax * 1e-15 && x > 0.0)
            .count()
            .max(1);
        let mut u = svd.u;
        if keep < svd.s.len() {
            let rows = u.dims()[0];
            let full = u.dims()[1];
            let mut data = Vec::with_capacity(rows * keep);
            for r in 0..rows {
                data.extend_from_slice(&u.data()[r * full..r * full + keep]);
            }
            u = DenseTensor::new(vec![rows, keep], data)?;
        }
        self.cores[self.center] = u.into_reshape(vec![d, left, keep])?;
        // absorb diag(s) * vt into the next core's left bond
        let mut sv = DenseTensor::zeros(vec![keep, right]);
        for i in 0..keep {
            for j in 0..right {
                sv.set(&[i, j], svd.vt.get(&[i, j]) * svd.s[i]);
            }
        }
        let next = &self.cores[self.center + 1];
        self.cores[self.center + 1] = contract(&sv, next, &[1], &[1])?.permute(&[1, 0, 2])?;
        self.center += 1;
        Ok(())
    }
}
