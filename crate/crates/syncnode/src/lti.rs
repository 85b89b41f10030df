//! Matrix-valued functions of the complex frequency `s`.
//!
//! A [`TransferMatrix`] is an immutable expression tree built from constants,
//! real rational blocks, integrators, pure delays and the usual matrix
//! compositions. Dimensions are checked when a node is built; [`TransferMatrix::eval`]
//! never fails on shape. Inversions are carried out numerically at every
//! evaluation point with an LU factorization and a condition-number cap.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, C0, C1, DEFAULT_COND_CAP};

#[derive(Clone)]
pub struct TransferMatrix {
    rows: usize,
    cols: usize,
    node: Arc<Node>,
}

enum Node {
    Constant(CMat),
    /// Real-coefficient ratio, coefficients highest power first.
    Rational {
        num: Vec<f64>,
        den: Vec<f64>,
    },
    Integrator,
    Delay(f64),
    Scale(Complex64, TransferMatrix),
    Sum(TransferMatrix, TransferMatrix),
    Product(TransferMatrix, TransferMatrix),
    /// 1×1 function times a matrix function.
    ScalarProduct(TransferMatrix, TransferMatrix),
    BlockDiag(Vec<TransferMatrix>),
    HCat(Vec<TransferMatrix>),
    VCat(Vec<TransferMatrix>),
    Inverse(TransferMatrix),
    Submatrix {
        src: TransferMatrix,
        r0: usize,
        c0: usize,
    },
    Embed {
        src: TransferMatrix,
        r0: usize,
        c0: usize,
    },
}

impl fmt::Debug for TransferMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TransferMatrix({}x{})", self.rows, self.cols)
    }
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn polyval(coeffs: &[f64], s: Complex64) -> Complex64 {
    coeffs.iter().fold(C0, |acc, &a| acc * s + a)
}

impl TransferMatrix {
    fn new(rows: usize, cols: usize, node: Node) -> Self {
        Self {
            rows,
            cols,
            node: Arc::new(node),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn constant(m: CMat) -> Self {
        Self::new(m.nrows(), m.ncols(), Node::Constant(m))
    }

    pub fn scalar(v: Complex64) -> Self {
        Self::constant(CMat::from_element(1, 1, v))
    }

    pub fn real(v: f64) -> Self {
        Self::scalar(c(v))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(CMat::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(linalg::identity(n))
    }

    /// `p(s)/q(s)` with real coefficients, highest power first.
    pub fn rational(num: &[f64], den: &[f64]) -> Result<Self> {
        let den: Vec<f64> = den.iter().copied().skip_while(|&a| a == 0.0).collect();
        if den.is_empty() {
            return Err(Error::InvalidSpec("rational block with zero denominator".into()));
        }
        if num.is_empty() {
            return Err(Error::InvalidSpec("rational block with empty numerator".into()));
        }
        Ok(Self::new(1, 1, Node::Rational { num: num.to_vec(), den }))
    }

    /// PI regulator `kp + ki/s`.
    pub fn pi(kp: f64, ki: f64) -> Self {
        Self::rational(&[kp, ki], &[1.0, 0.0]).expect("PI denominator is s")
    }

    /// `1/s`.
    pub fn integrator() -> Self {
        Self::new(1, 1, Node::Integrator)
    }

    /// `e^{-sT}`, kept exact.
    pub fn delay(t: f64) -> Self {
        Self::new(1, 1, Node::Delay(t))
    }

    pub fn scale(&self, k: Complex64) -> Self {
        Self::new(self.rows, self.cols, Node::Scale(k, self.clone()))
    }

    pub fn scale_real(&self, k: f64) -> Self {
        self.scale(c(k))
    }

    pub fn neg(&self) -> Self {
        self.scale_real(-1.0)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Self::new(self.rows, self.cols, Node::Sum(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "mul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Self::new(
            self.rows,
            other.cols,
            Node::Product(self.clone(), other.clone()),
        ))
    }

    /// Scalar (1×1) function `self` times matrix function `m`.
    pub fn times(&self, m: &Self) -> Result<Self> {
        if self.shape() != (1, 1) {
            return Err(Error::DimensionMismatch {
                op: "times",
                left: self.shape(),
                right: m.shape(),
            });
        }
        Ok(Self::new(m.rows, m.cols, Node::ScalarProduct(self.clone(), m.clone())))
    }

    pub fn block_diag(blocks: &[Self]) -> Self {
        let rows = blocks.iter().map(|b| b.rows).sum();
        let cols = blocks.iter().map(|b| b.cols).sum();
        Self::new(rows, cols, Node::BlockDiag(blocks.to_vec()))
    }

    pub fn hcat(blocks: &[Self]) -> Result<Self> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::DimensionMismatch {
                op: "hcat",
                left: (rows, 0),
                right: b.shape(),
            });
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        Ok(Self::new(rows, cols, Node::HCat(blocks.to_vec())))
    }

    pub fn vcat(blocks: &[Self]) -> Result<Self> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        if let Some(b) = blocks.iter().find(|b| b.cols != cols) {
            return Err(Error::DimensionMismatch {
                op: "vcat",
                left: (0, cols),
                right: b.shape(),
            });
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        Ok(Self::new(rows, cols, Node::VCat(blocks.to_vec())))
    }

    /// Block matrix from rows of blocks.
    pub fn grid(rows: &[Vec<Self>]) -> Result<Self> {
        let stacked: Result<Vec<Self>> = rows.iter().map(|r| Self::hcat(r)).collect();
        Self::vcat(&stacked?)
    }

    /// Numerical inverse at each evaluation point.
    pub fn inv(&self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch {
                op: "inv",
                left: self.shape(),
                right: self.shape(),
            });
        }
        Ok(Self::new(self.rows, self.cols, Node::Inverse(self.clone())))
    }

    pub fn submatrix(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Self> {
        if r0 + rows > self.rows || c0 + cols > self.cols {
            return Err(Error::DimensionMismatch {
                op: "submatrix",
                left: self.shape(),
                right: (r0 + rows, c0 + cols),
            });
        }
        Ok(Self::new(
            rows,
            cols,
            Node::Submatrix {
                src: self.clone(),
                r0,
                c0,
            },
        ))
    }

    pub fn entry(&self, r: usize, c: usize) -> Result<Self> {
        self.submatrix(r, c, 1, 1)
    }

    /// Place `self` at `(r0, c0)` inside a `rows × cols` zero matrix.
    pub fn embed(&self, rows: usize, cols: usize, r0: usize, c0: usize) -> Result<Self> {
        if r0 + self.rows > rows || c0 + self.cols > cols {
            return Err(Error::DimensionMismatch {
                op: "embed",
                left: (rows, cols),
                right: (r0 + self.rows, c0 + self.cols),
            });
        }
        Ok(Self::new(
            rows,
            cols,
            Node::Embed {
                src: self.clone(),
                r0,
                c0,
            },
        ))
    }

    pub fn eval(&self, s: Complex64) -> Result<CMat> {
        self.eval_with(s, DEFAULT_COND_CAP)
    }

    pub fn eval_hz(&self, f_hz: f64) -> Result<CMat> {
        self.eval(Complex64::new(0.0, 2.0 * PI * f_hz))
    }

    pub fn eval_with(&self, s: Complex64, cond_cap: f64) -> Result<CMat> {
        let out = match &*self.node {
            Node::Constant(m) => m.clone(),
            Node::Rational { num, den } => {
                let q = polyval(den, s);
                if q.norm() == 0.0 {
                    return Err(Error::SingularAtS { s, cond: f64::INFINITY });
                }
                CMat::from_element(1, 1, polyval(num, s) / q)
            }
            Node::Integrator => {
                if s.norm() == 0.0 {
                    return Err(Error::SingularAtS { s, cond: f64::INFINITY });
                }
                CMat::from_element(1, 1, C1 / s)
            }
            Node::Delay(t) => CMat::from_element(1, 1, (-s * *t).exp()),
            Node::Scale(k, m) => m.eval_with(s, cond_cap)? * *k,
            Node::Sum(a, b) => a.eval_with(s, cond_cap)? + b.eval_with(s, cond_cap)?,
            Node::Product(a, b) => a.eval_with(s, cond_cap)? * b.eval_with(s, cond_cap)?,
            Node::ScalarProduct(k, m) => {
                let k = k.eval_with(s, cond_cap)?[(0, 0)];
                m.eval_with(s, cond_cap)? * k
            }
            Node::BlockDiag(blocks) => {
                let mut out = CMat::zeros(self.rows, self.cols);
                let (mut r, mut cc) = (0, 0);
                for b in blocks {
                    let v = b.eval_with(s, cond_cap)?;
                    out.view_mut((r, cc), (b.rows, b.cols)).copy_from(&v);
                    r += b.rows;
                    cc += b.cols;
                }
                out
            }
            Node::HCat(blocks) => {
                let mut out = CMat::zeros(self.rows, self.cols);
                let mut cc = 0;
                for b in blocks {
                    let v = b.eval_with(s, cond_cap)?;
                    out.view_mut((0, cc), (b.rows, b.cols)).copy_from(&v);
                    cc += b.cols;
                }
                out
            }
            Node::VCat(blocks) => {
                let mut out = CMat::zeros(self.rows, self.cols);
                let mut r = 0;
                for b in blocks {
                    let v = b.eval_with(s, cond_cap)?;
                    out.view_mut((r, 0), (b.rows, b.cols)).copy_from(&v);
                    r += b.rows;
                }
                out
            }
            Node::Inverse(m) => linalg::inverse_checked(&m.eval_with(s, cond_cap)?, s, cond_cap)?,
            Node::Submatrix { src, r0, c0 } => src
                .eval_with(s, cond_cap)?
                .view((*r0, *c0), (self.rows, self.cols))
                .into_owned(),
            Node::Embed { src, r0, c0 } => {
                let mut out = CMat::zeros(self.rows, self.cols);
                out.view_mut((*r0, *c0), (src.rows, src.cols))
                    .copy_from(&src.eval_with(s, cond_cap)?);
                out
            }
        };
        debug_assert_eq!(out.shape(), (self.rows, self.cols));
        Ok(out)
    }

    /// True when the expression is structurally the zero function
    /// (built from a zero constant), independent of `s`.
    pub fn is_structural_zero(&self) -> bool {
        match &*self.node {
            Node::Constant(m) => m.iter().all(|z| *z == C0),
            Node::Scale(_, m) => m.is_structural_zero(),
            Node::Embed { src, .. } => src.is_structural_zero(),
            Node::Submatrix { src, r0, c0 } => match &*src.node {
                Node::Constant(m) => m.view((*r0, *c0), (self.rows, self.cols)).iter().all(|z| *z == C0),
                _ => false,
            },
            _ => false,
        }
    }
}

/// Eigenvalue traces of a square transfer matrix along `j2πf`.
#[derive(Debug, Clone)]
pub struct EigLoci {
    pub freqs_hz: Vec<f64>,
    /// `traces[k][i]` is eigenvalue `k` at `freqs_hz[i]`.
    pub traces: Vec<Vec<Complex64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LociOptions {
    /// A step is bisected when its largest matched displacement exceeds this
    /// fraction of the local eigenvalue magnitude.
    pub refine_fraction: f64,
    pub max_bisections: usize,
    pub cond_cap: f64,
}

impl Default for LociOptions {
    fn default() -> Self {
        Self {
            refine_fraction: 0.2,
            max_bisections: 6,
            cond_cap: DEFAULT_COND_CAP,
        }
    }
}

/// Greedy minimal-distance matching: repeatedly take the globally closest
/// unassigned (previous, candidate) pair. Returns `perm` with
/// `next[perm[k]]` continuing trace `k`.
pub fn match_eigenvalues(prev: &[Complex64], next: &[Complex64]) -> Vec<usize> {
    let n = prev.len();
    assert_eq!(n, next.len());
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for (i, p) in prev.iter().enumerate() {
        for (j, q) in next.iter().enumerate() {
            pairs.push(((p - q).norm(), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut perm = vec![usize::MAX; n];
    let mut used = vec![false; n];
    let mut left = n;
    for (_, i, j) in pairs {
        if left == 0 {
            break;
        }
        if perm[i] == usize::MAX && !used[j] {
            perm[i] = j;
            used[j] = true;
            left -= 1;
        }
    }
    perm
}

fn eigs_at(m: &TransferMatrix, f_hz: f64, cap: f64) -> Result<Vec<Complex64>> {
    let s = Complex64::new(0.0, 2.0 * PI * f_hz);
    m.eval_with(s, cap)
        .and_then(|a| linalg::eigenvalues(&a))
        .map_err(|e| e.at_frequency(f_hz))
}

fn max_rel_step(prev: &[Complex64], next: &[Complex64], perm: &[usize]) -> f64 {
    prev.iter()
        .enumerate()
        .map(|(k, p)| {
            let q = next[perm[k]];
            (p - q).norm() / p.norm().max(q.norm()).max(1e-12)
        })
        .fold(0.0, f64::max)
}

fn reorder(vals: &[Complex64], perm: &[usize]) -> Vec<Complex64> {
    perm.iter().map(|&j| vals[j]).collect()
}

/// Follow `prev` (at `f0`) to the eigenvalue set `next` (at `f1`), bisecting
/// the step when the matched displacement looks like a jump.
fn follow(
    m: &TransferMatrix,
    prev: &[Complex64],
    f0: f64,
    next: &[Complex64],
    f1: f64,
    opts: &LociOptions,
    depth: usize,
) -> Result<Vec<Complex64>> {
    let perm = match_eigenvalues(prev, next);
    if depth >= opts.max_bisections || max_rel_step(prev, next, &perm) <= opts.refine_fraction {
        return Ok(reorder(next, &perm));
    }
    let fm = 0.5 * (f0 + f1);
    let mid = eigs_at(m, fm, opts.cond_cap)?;
    let mid = follow(m, prev, f0, &mid, fm, opts, depth + 1)?;
    follow(m, &mid, fm, next, f1, opts, depth + 1)
}

pub fn eig_loci(m: &TransferMatrix, grid_hz: &[f64]) -> Result<EigLoci> {
    eig_loci_with(m, grid_hz, &LociOptions::default())
}

pub fn eig_loci_with(m: &TransferMatrix, grid_hz: &[f64], opts: &LociOptions) -> Result<EigLoci> {
    if m.rows != m.cols {
        return Err(Error::DimensionMismatch {
            op: "eig_loci",
            left: m.shape(),
            right: m.shape(),
        });
    }
    if grid_hz.len() < 2 {
        return Err(Error::InvalidGrid("at least two frequencies required".into()));
    }
    if grid_hz.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidGrid("frequencies must be strictly increasing".into()));
    }

    #[cfg(feature = "parallel")]
    let raw: Vec<Result<Vec<Complex64>>> = {
        use rayon::prelude::*;
        grid_hz.par_iter().map(|&f| eigs_at(m, f, opts.cond_cap)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let raw: Vec<Result<Vec<Complex64>>> = grid_hz.iter().map(|&f| eigs_at(m, f, opts.cond_cap)).collect();
    let raw: Vec<Vec<Complex64>> = raw.into_iter().collect::<Result<_>>()?;

    let n = m.rows;
    let mut traces = vec![Vec::with_capacity(grid_hz.len()); n];
    let mut prev = raw[0].clone();
    for i in 0..grid_hz.len() {
        let cur = if i == 0 {
            prev.clone()
        } else {
            follow(m, &prev, grid_hz[i - 1], &raw[i], grid_hz[i], opts, 0)?
        };
        for (k, v) in cur.iter().enumerate() {
            traces[k].push(*v);
        }
        prev = cur;
    }
    Ok(EigLoci {
        freqs_hz: grid_hz.to_vec(),
        traces,
    })
}

/// `n` log-spaced frequencies over `[f_min, f_max]`.
pub fn logspace(f_min: f64, f_max: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && f_min > 0.0 && f_max > f_min);
    let (a, b) = (f_min.ln(), f_max.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{from_real_rows, max_abs};

    fn jw(w: f64) -> Complex64 {
        Complex64::new(0.0, w)
    }

    #[test]
    fn pi_block_at_j() {
        let v = TransferMatrix::pi(1.0, 1.0).eval(jw(1.0)).unwrap();
        assert!((v[(0, 0)] - Complex64::new(1.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_delay_is_unity() {
        for s in [jw(3.0), Complex64::new(-2.0, 7.0), C0] {
            let v = TransferMatrix::delay(0.0).eval(s).unwrap();
            assert_eq!(v[(0, 0)], C1);
        }
    }

    #[test]
    fn constants_ignore_s() {
        let k = from_real_rows(2, 2, &[1.0, -2.0, 3.5, 4.0]);
        let v = TransferMatrix::constant(k.clone()).eval(jw(100.0)).unwrap();
        assert_eq!(v, k);
    }

    #[test]
    fn integrator_pole_is_reported() {
        assert!(matches!(
            TransferMatrix::integrator().eval(C0),
            Err(Error::SingularAtS { .. })
        ));
    }

    #[test]
    fn shapes_checked_at_construction() {
        let a = TransferMatrix::zeros(2, 3);
        let b = TransferMatrix::zeros(2, 3);
        assert!(matches!(a.mul(&b), Err(Error::DimensionMismatch { .. })));
        assert!(a.add(&TransferMatrix::zeros(3, 2)).is_err());
        assert!(a.inv().is_err());
        assert!(TransferMatrix::hcat(&[a.clone(), TransferMatrix::zeros(1, 1)]).is_err());
        assert!(a.submatrix(1, 1, 2, 1).is_err());
    }

    #[test]
    fn inverse_of_dq_inductor() {
        // [sL, -wL; wL, sL] is invertible away from s = ±jw.
        let l = 0.1;
        let w = 314.0;
        let sl = TransferMatrix::rational(&[l, 0.0], &[1.0]).unwrap();
        let z = TransferMatrix::grid(&[
            vec![sl.clone(), TransferMatrix::real(-w * l)],
            vec![TransferMatrix::real(w * l), sl],
        ])
        .unwrap();
        let s = jw(50.0);
        let zi = z.inv().unwrap().eval(s).unwrap();
        let prod = z.eval(s).unwrap() * zi;
        assert!(max_abs(&(prod - linalg::identity(2))) < 1e-12);
        assert!(matches!(z.inv().unwrap().eval(jw(w)), Err(Error::SingularAtS { .. })));
    }

    #[test]
    fn loci_one_over_s() {
        let m = TransferMatrix::integrator();
        let loci = eig_loci(&m, &[0.5, 1.0, 2.0]).unwrap();
        for (i, f) in loci.freqs_hz.iter().enumerate() {
            let want = Complex64::new(0.0, -1.0 / (2.0 * PI * f));
            assert!((loci.traces[0][i] - want).norm() < 1e-14);
        }
    }

    #[test]
    fn loci_never_swap_distinct_magnitudes() {
        let p = TransferMatrix::rational(&[1.0], &[1.0, 1.0]).unwrap();
        let m = TransferMatrix::block_diag(&[p.clone(), p.scale_real(2.0)]);
        let loci = eig_loci(&m, &[0.1, 0.2]).unwrap();
        let ratio0 = loci.traces[1][0] / loci.traces[0][0];
        let ratio1 = loci.traces[1][1] / loci.traces[0][1];
        assert!((ratio0 - ratio1).norm() < 1e-12);
    }

    #[test]
    fn loci_reject_bad_grid() {
        let m = TransferMatrix::identity(2);
        assert!(eig_loci(&m, &[1.0]).is_err());
        assert!(eig_loci(&m, &[1.0, 1.0]).is_err());
        assert!(eig_loci(&m, &[2.0, 1.0]).is_err());
    }

    #[test]
    fn structural_zero_detection() {
        assert!(TransferMatrix::zeros(1, 1).is_structural_zero());
        assert!(!TransferMatrix::integrator().is_structural_zero());
        assert!(TransferMatrix::zeros(1, 1)
            .embed(3, 3, 1, 1)
            .unwrap()
            .is_structural_zero());
    }

    #[test]
    fn logspace_endpoints() {
        let g = logspace(0.1, 1000.0, 5);
        assert!((g[0] - 0.1).abs() < 1e-15);
        assert!((g[4] - 1000.0).abs() < 1e-9);
        assert!((g[2] - 10.0).abs() < 1e-12);
    }
}
