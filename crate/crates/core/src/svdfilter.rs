//! Spatiotemporal SVD clutter filtering of beamformed stacks.
//!
//! The stack is viewed as a Casorati matrix `M` (voxels x frames). Frames
//! are far fewer than voxels, so the decomposition is taken from the
//! eigen-decomposition of the frame Gram matrix `M^T M = V S^2 V^T`; spatial
//! vectors follow as `U = M V S^-1`. Keeping components `[low, high)` is the
//! projection `M V_k V_k^T`, which never needs `U`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::beamform::BeamformedStack;
use crate::error::{param, Error, Result};

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CasoratiMatrix {
    /// `n_voxels x n_frames`; column `j` is frame `j` flattened z-fastest,
    /// then y, then x.
    pub values: DMatrix<f64>,
}

impl CasoratiMatrix {
    pub fn n_voxels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

pub fn to_casorati(stack: &BeamformedStack) -> Result<CasoratiMatrix> {
    if stack.n_frames() < 2 {
        return Err(param("SVD filtering needs at least two frames"));
    }
    let n = stack.grid.len();
    let values = DMatrix::from_fn(n, stack.n_frames(), |i, j| stack.frames[j][i] as f64);
    Ok(CasoratiMatrix { values })
}

/// Writes the matrix columns back as frames of `template`'s grid and scheme.
pub fn from_casorati(m: &CasoratiMatrix, template: &BeamformedStack) -> Result<BeamformedStack> {
    if m.n_voxels() != template.grid.len() {
        return Err(Error::Layout("Casorati rows do not match the stack grid".into()));
    }
    let mut out = BeamformedStack::new(template.grid, template.scheme, template.provenance);
    out.frames = (0..m.n_frames())
        .map(|j| m.values.column(j).iter().map(|&v| v as f32).collect())
        .collect();
    Ok(out)
}

/// Thin SVD of a Casorati matrix, components sorted by decreasing singular value.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// Eigenpairs of a frame Gram matrix, sorted descending, as singular values
/// and temporal vectors.
fn temporal_basis(gram: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = gram.nrows();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let s = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k].max(0.0).sqrt()));
    let mut v = DMatrix::zeros(n, n);
    for (dst, &k) in order.iter().enumerate() {
        v.set_column(dst, &eig.eigenvectors.column(k));
    }
    (s, v)
}

fn numerical_rank(s: &DVector<f64>) -> usize {
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > RANK_TOLERANCE * smax).count()
}

pub fn svd(m: &CasoratiMatrix) -> Svd {
    let gram = m.values.transpose() * &m.values;
    let (s, mut v) = temporal_basis(gram);
    let rank = numerical_rank(&s);
    let mut u = DMatrix::zeros(m.n_voxels(), s.len());
    for k in 0..rank {
        let mut col = &m.values * v.column(k) / s[k];
        // Sign convention: largest-magnitude spatial entry is positive.
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col = -col;
            let neg = -v.column(k);
            v.set_column(k, &neg);
        }
        u.set_column(k, &col);
    }
    Svd { u, singular_values: s, v }
}

fn check_cuts(n_voxels: usize, n_frames: usize, low: usize, high: Option<usize>) -> Result<usize> {
    let n = n_voxels.min(n_frames);
    if low >= n {
        return Err(param(format!("low cut {low} must be below {n}")));
    }
    let high = high.unwrap_or(n_frames);
    if high <= low || high > n_frames {
        return Err(param(format!("high cut {high} must lie in ({low}, {n_frames}]")));
    }
    Ok(high)
}

/// Projector onto the temporal components `[low, high)` of a Gram matrix.
fn band_projector(gram: DMatrix<f64>, low: usize, high: usize) -> DMatrix<f64> {
    let (s, v) = temporal_basis(gram);
    let rank = numerical_rank(&s);
    let high = high.min(rank.max(low));
    let n = v.nrows();
    let mut p = DMatrix::zeros(n, n);
    for k in low..high {
        let col = v.column(k);
        p += col * col.transpose();
    }
    p
}

/// Keeps singular components `[low_cut, high_cut)`.
pub fn svd_filter(m: &CasoratiMatrix, low_cut: usize, high_cut: Option<usize>) -> Result<CasoratiMatrix> {
    let high = check_cuts(m.n_voxels(), m.n_frames(), low_cut, high_cut)?;
    let gram = m.values.transpose() * &m.values;
    let p = band_projector(gram, low_cut, high);
    Ok(CasoratiMatrix { values: &m.values * p })
}

/// Same filter applied directly to a stack without materialising the
/// Casorati matrix, for volumes too large to hold in double precision.
pub fn filter_stack(stack: &BeamformedStack, low_cut: usize, high_cut: Option<usize>) -> Result<BeamformedStack> {
    let nf = stack.n_frames();
    if nf < 2 {
        return Err(param("SVD filtering needs at least two frames"));
    }
    let high = check_cuts(stack.grid.len(), nf, low_cut, high_cut)?;
    let gram = frame_gram(stack);
    let p = band_projector(gram, low_cut, high);
    let n = stack.grid.len();
    let mut out = BeamformedStack::new(stack.grid, stack.scheme, stack.provenance);
    out.frames = (0..nf)
        .map(|j| {
            let mut acc = vec![0f64; n];
            for i in 0..nf {
                let w = p[(i, j)];
                if w == 0.0 {
                    continue;
                }
                for (a, &v) in acc.iter_mut().zip(&stack.frames[i]) {
                    *a += w * v as f64;
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    Ok(out)
}

fn frame_gram(stack: &BeamformedStack) -> DMatrix<f64> {
    let nf = stack.n_frames();
    let mut g = DMatrix::zeros(nf, nf);
    for i in 0..nf {
        for j in i..nf {
            let d: f64 = stack.frames[i].iter().zip(&stack.frames[j]).map(|(&a, &b)| a as f64 * b as f64).sum();
            g[(i, j)] = d;
            g[(j, i)] = d;
        }
    }
    g
}

/// Parameters of the spatial-similarity rank selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoThreshold {
    /// Minimum mean |correlation| for a vector to join the leading block.
    pub correlation: f64,
    /// Number of leading spatial vectors examined.
    pub max_vectors: usize,
}

impl Default for AutoThreshold {
    fn default() -> Self {
        Self { correlation: 0.2, max_vectors: 20 }
    }
}

/// Size of the leading block of spatial singular vectors whose magnitudes
/// are mutually correlated; used as the low cut.
pub fn auto_threshold(m: &CasoratiMatrix, params: AutoThreshold) -> usize {
    if m.n_frames() < 8 {
        return 0;
    }
    let dec = svd(m);
    let rank = numerical_rank(&dec.singular_values);
    let k_max = rank.min(params.max_vectors);
    if k_max == 0 {
        return 0;
    }
    let mags: Vec<DVector<f64>> = (0..k_max).map(|k| dec.u.column(k).map(f64::abs)).collect();
    let mut block = 1;
    for j in 1..k_max {
        let mean: f64 = (0..block).map(|i| pearson(&mags[i], &mags[j]).abs()).sum::<f64>() / block as f64;
        if mean >= params.correlation {
            block = j + 1;
        } else {
            break;
        }
    }
    block.min(m.n_frames() - 1)
}

fn pearson(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}
