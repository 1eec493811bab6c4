//! Dense linear-algebra helpers shared by the simulator and the estimators.
//!
//! Everything here works on small matrices (tens to a few hundred rows), so
//! plain `nalgebra` dense storage is used throughout.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
pub fn hermitian_eigen(m: &DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let eig = m.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Cached spectral form of a Hermitian generator `H`, so that `exp(-i s H)`
/// can be produced for many `s` at the cost of one matrix product each.
#[derive(Clone, Debug)]
pub struct HermitianPropagator {
    values: Vec<f64>,
    vectors: DMatrix<C64>,
}

impl HermitianPropagator {
    pub fn new(generator: &DMatrix<C64>) -> Self {
        let (values, vectors) = hermitian_eigen(generator);
        Self { values, vectors }
    }

    /// `exp(-i s H)`.
    pub fn at(&self, s: f64) -> DMatrix<C64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &lambda) in self.values.iter().enumerate() {
            let phase = C64::from_polar(1.0, -lambda * s);
            for i in 0..n {
                scaled[(i, j)] *= phase;
            }
        }
        scaled * self.vectors.adjoint()
    }
}

/// `exp(-i s H)` for Hermitian `H`.
pub fn hermitian_exp(generator: &DMatrix<C64>, s: f64) -> DMatrix<C64> {
    HermitianPropagator::new(generator).at(s)
}

pub fn kron(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    a.kronecker(b)
}

pub fn max_hermitian_defect(m: &DMatrix<C64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for f in (0..dims.len().saturating_sub(1)).rev() {
        s[f] = s[f + 1] * dims[f + 1];
    }
    s
}

/// Offsets of the sub-block addressed by `factors` (first factor slowest) and
/// the base indices of every block.
fn local_layout(dims: &[usize], factors: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let st = strides(dims);
    let total: usize = dims.iter().product();
    let sub_dims: Vec<usize> = factors.iter().map(|&f| dims[f]).collect();
    let sub_total: usize = sub_dims.iter().product();
    let mut offsets = Vec::with_capacity(sub_total);
    for s in 0..sub_total {
        let mut rem = s;
        let mut off = 0;
        for (k, &f) in factors.iter().enumerate().rev() {
            let digit = rem % sub_dims[k];
            rem /= sub_dims[k];
            off += digit * st[f];
        }
        offsets.push(off);
    }
    let bases = (0..total)
        .filter(|&i| factors.iter().all(|&f| (i / st[f]).is_multiple_of(dims[f])))
        .collect();
    (offsets, bases)
}

/// Applies `op` (acting on the tensor factors `factors`, first slowest) to a
/// vector laid out with factor dimensions `dims` (first slowest).
pub fn apply_local(vec: &mut DVector<C64>, dims: &[usize], factors: &[usize], op: &DMatrix<C64>) {
    let (offsets, bases) = local_layout(dims, factors);
    let n = offsets.len();
    debug_assert_eq!(op.nrows(), n);
    let mut buf = vec![C64::new(0.0, 0.0); n];
    for base in bases {
        for (k, &o) in offsets.iter().enumerate() {
            buf[k] = vec[base + o];
        }
        for r in 0..n {
            let mut acc = C64::new(0.0, 0.0);
            for (k, b) in buf.iter().enumerate() {
                acc += op[(r, k)] * b;
            }
            vec[base + offsets[r]] = acc;
        }
    }
}

/// `M -> U M U†` with `U` acting locally on `factors`.
pub fn conjugate_local(m: &mut DMatrix<C64>, dims: &[usize], factors: &[usize], op: &DMatrix<C64>) {
    let n = m.nrows();
    for j in 0..n {
        let mut col = m.column(j).into_owned();
        apply_local(&mut col, dims, factors, op);
        m.set_column(j, &col);
    }
    let op_conj = op.map(|z| z.conj());
    for i in 0..n {
        let mut row = m.row(i).transpose();
        apply_local(&mut row, dims, factors, &op_conj);
        m.set_row(i, &row.transpose());
    }
}

/// Moore-Penrose pseudo-inverse with a relative singular-value cutoff.
#[derive(Clone, Debug)]
pub struct PseudoInverse {
    pub matrix: DMatrix<f64>,
    pub condition: f64,
    pub rank: usize,
}

pub fn pseudo_inverse(a: &DMatrix<f64>, rcond: f64) -> Result<PseudoInverse> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::Numerical("pseudo-inverse of an empty matrix".into()));
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let vt = svd.v_t.as_ref().ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let cut = rcond * smax;
    let k = svd.singular_values.len();
    let mut pinv = DMatrix::zeros(n, m);
    let mut rank = 0;
    for s in 0..k {
        let sv = svd.singular_values[s];
        if sv > cut && sv > 0.0 {
            rank += 1;
            let vcol = vt.row(s).transpose();
            let ucol = u.column(s);
            pinv += (vcol * ucol.transpose()) / sv;
        }
    }
    let condition = if smin > 0.0 && k == n { smax / smin } else { f64::INFINITY };
    Ok(PseudoInverse {
        matrix: pinv,
        condition,
        rank,
    })
}

/// Ratio of the largest to smallest singular value (infinite when the matrix
/// has fewer rows than columns or a zero singular value).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.nrows() < a.ncols() {
        return f64::INFINITY;
    }
    let sv = a.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// SplitMix64 finalizer; used to derive independent child seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
