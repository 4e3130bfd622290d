use super::Mat;
use crate::error::{Error, Result};

pub const POLAR_TOL: f64 = 1e-10;
pub const POLAR_MAX_ITER: usize = 50;

/// Result of [`lu_logabsdet`]. A zero pivot is reported as `Singular`
/// rather than folded into a float.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogAbsDet {
    Regular(f64),
    Singular,
}

impl LogAbsDet {
    /// `log|det|`, with `-inf` for a singular matrix.
    pub fn value(self) -> f64 {
        match self {
            LogAbsDet::Regular(v) => v,
            LogAbsDet::Singular => f64::NEG_INFINITY,
        }
    }

    pub fn is_singular(self) -> bool {
        matches!(self, LogAbsDet::Singular)
    }
}

/// LU factorization with partial pivoting, `P A = L U` packed in one matrix.
#[derive(Clone, Debug)]
pub struct Lu {
    lu: Mat,
    perm: Vec<usize>,
    sign: f64,
    singular: bool,
}

impl Lu {
    pub fn new(m: &Mat) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::shape("lu", format!("{:?} is not square", m.shape())));
        }
        let n = m.rows();
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let mut singular = false;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 {
                singular = true;
                continue;
            }
            if p != k {
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        let u = lu[(k, j)];
                        lu[(i, j)] -= f * u;
                    }
                }
            }
        }
        Ok(Lu {
            lu,
            perm,
            sign,
            singular,
        })
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    pub fn logabsdet(&self) -> LogAbsDet {
        if self.singular {
            return LogAbsDet::Singular;
        }
        let n = self.lu.rows();
        LogAbsDet::Regular((0..n).map(|i| self.lu[(i, i)].abs().ln()).sum())
    }

    pub fn det(&self) -> f64 {
        if self.singular {
            return 0.0;
        }
        let n = self.lu.rows();
        self.sign * (0..n).map(|i| self.lu[(i, i)]).product::<f64>()
    }

    /// Solve `A X = B` for a matrix right-hand side.
    pub fn solve(&self, b: &Mat) -> Result<Mat> {
        if self.singular {
            return Err(Error::Singular);
        }
        let n = self.lu.rows();
        if b.rows() != n {
            return Err(Error::shape("Lu::solve", format!("rhs has {} rows, need {n}", b.rows())));
        }
        let m = b.cols();
        let mut x = Mat::from_fn(n, m, |i, j| b[(self.perm[i], j)]);
        for j in 0..m {
            for i in 0..n {
                let mut s = x[(i, j)];
                for k in 0..i {
                    s -= self.lu[(i, k)] * x[(k, j)];
                }
                x[(i, j)] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[(i, j)];
                for k in i + 1..n {
                    s -= self.lu[(i, k)] * x[(k, j)];
                }
                x[(i, j)] = s / self.lu[(i, i)];
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Mat> {
        self.solve(&Mat::identity(self.lu.rows()))
    }
}

/// `log|det m|` via pivoted LU.
pub fn lu_logabsdet(m: &Mat) -> Result<LogAbsDet> {
    Ok(Lu::new(m)?.logabsdet())
}

pub fn inverse(m: &Mat) -> Result<Mat> {
    Lu::new(m)?.inverse()
}

/// Lower Cholesky factor `L` with `L Lᵀ = m`.
pub fn cholesky(m: &Mat) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::shape("cholesky", format!("{:?} is not square", m.shape())));
    }
    let n = m.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Whether the Stiefel constraint is on columns (`RᵀR = I`) or on rows
/// (`R Rᵀ = I`). Tall and square matrices use columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Columns,
    Rows,
}

impl Orientation {
    pub fn of(rows: usize, cols: usize) -> Self {
        if rows >= cols {
            Orientation::Columns
        } else {
            Orientation::Rows
        }
    }
}

/// `‖TᵀT − I‖_F` for tall `T`, `‖TTᵀ − I‖_F` for wide `T`.
pub fn orth_defect(t: &Mat) -> f64 {
    let g = match Orientation::of(t.rows(), t.cols()) {
        Orientation::Columns => t.t_matmul(t),
        Orientation::Rows => t.matmul_t(t),
    };
    g.add_diag(-1.0).frobenius()
}

/// Orthogonal projection onto the Stiefel manifold (the orthonormal polar
/// factor), computed by `Y ← 2Y(I + YᵀY)⁻¹` starting from `t_tilde`.
///
/// Wide inputs are iterated in transposed form so the inverted Gram matrix
/// is always the smaller one.
pub fn polar_project(t_tilde: &Mat, tol: f64, max_iter: usize) -> Result<Mat> {
    if tol <= 0.0 {
        return Err(Error::invalid("polar_project tolerance must be positive"));
    }
    match Orientation::of(t_tilde.rows(), t_tilde.cols()) {
        Orientation::Columns => polar_tall(t_tilde.clone(), tol, max_iter),
        Orientation::Rows => Ok(polar_tall(t_tilde.transpose(), tol, max_iter)?.transpose()),
    }
}

fn polar_tall(mut y: Mat, tol: f64, max_iter: usize) -> Result<Mat> {
    let mut iterations = 0;
    loop {
        let gram = y.t_matmul(&y);
        let defect = gram.add_diag(-1.0).frobenius();
        if !defect.is_finite() {
            return Err(Error::PolarNotConverged {
                iterations,
                defect,
            });
        }
        if defect <= tol {
            return Ok(y);
        }
        if iterations == max_iter {
            return Err(Error::PolarNotConverged {
                iterations,
                defect,
            });
        }
        let inv = inverse(&gram.add_diag(1.0))?;
        y = y.matmul(&inv).scale(2.0);
        iterations += 1;
    }
}

/// Number of polar iterations [`polar_project`] needs for this input.
pub fn polar_iterations(t_tilde: &Mat, tol: f64, max_iter: usize) -> Result<usize> {
    let mut y = match Orientation::of(t_tilde.rows(), t_tilde.cols()) {
        Orientation::Columns => t_tilde.clone(),
        Orientation::Rows => t_tilde.transpose(),
    };
    for r in 0..=max_iter {
        let gram = y.t_matmul(&y);
        let defect = gram.add_diag(-1.0).frobenius();
        if defect <= tol {
            return Ok(r);
        }
        if r == max_iter || !defect.is_finite() {
            return Err(Error::PolarNotConverged {
                iterations: r,
                defect,
            });
        }
        y = y.matmul(&inverse(&gram.add_diag(1.0))?).scale(2.0);
    }
    unreachable!()
}
