//! Low-rank shape recovery with fixed rotations.
//!
//! The `3F x P` shape `X` is reshuffled into the `F x 3P` matrix `X#` whose
//! rank is at most K. ADMM alternates a closed-form data step on `X` with a
//! partial singular value thresholding step on `X#` that keeps the leading
//! `N` singular values and shrinks the rest by weights inverse to the
//! singular values of the pseudoinverse initialization.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::error::{Error, Result};
use crate::linalg::{singular_values_desc, svd_desc};
use crate::rotation::BlockRotation;

/// `3F x P` to `F x 3P`: row `f` is `[x_f | y_f | z_f]`.
pub fn reshape_sharp(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() % 3 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} rows is not a multiple of 3",
            x.nrows()
        )));
    }
    let (f, p) = (x.nrows() / 3, x.ncols());
    Ok(DMatrix::from_fn(f, 3 * p, |i, j| x[(3 * i + j / p, j % p)]))
}

/// Inverse of [`reshape_sharp`].
pub fn reshape_tall(xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if xs.ncols() % 3 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} columns is not a multiple of 3",
            xs.ncols()
        )));
    }
    let (f, p) = (xs.nrows(), xs.ncols() / 3);
    Ok(DMatrix::from_fn(3 * f, p, |i, j| xs[(i / 3, (i % 3) * p + j)]))
}

fn check_dims(w: &DMatrix<f64>, r: &BlockRotation) -> Result<()> {
    if w.nrows() != 2 * r.frames() {
        return Err(Error::ShapeMismatch(format!(
            "{} measurement rows for {} frames",
            w.nrows(),
            r.frames()
        )));
    }
    Ok(())
}

/// Minimum-norm least-squares shape, `X_f = R_f^T (R_f R_f^T)^-1 W_f`.
pub fn pinv_shape(r: &BlockRotation, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims(w, r)?;
    let p = w.ncols();
    let mut x = DMatrix::zeros(3 * r.frames(), p);
    for (f, b) in r.blocks.iter().enumerate() {
        let gram = b * b.transpose();
        let inv = gram
            .try_inverse()
            .ok_or_else(|| Error::DegenerateInput(format!("rotation block {f} is singular")))?;
        let wf = w.rows(2 * f, 2);
        x.rows_mut(3 * f, 3).copy_from(&(b.transpose() * inv * wf));
    }
    Ok(x)
}

/// `theta_i = xi / (sigma_i + gamma)` for the singular values past the first `n`.
pub fn compute_weights(sigma: &DVector<f64>, n: usize, xi: f64, gamma: f64) -> DVector<f64> {
    let start = n.min(sigma.len());
    DVector::from_iterator(
        sigma.len() - start,
        sigma.iter().skip(start).map(|s| xi / (s + gamma)),
    )
}

/// Default `xi = 5e-3 sqrt(sigma_1)`.
pub fn default_xi(sigma1: f64) -> f64 {
    5e-3 * sigma1.sqrt()
}

/// Partial singular value thresholding, returning the output together with
/// its singular values (in the input's singular vector order).
pub fn psvt_with_values(q: &DMatrix<f64>, n: usize, tau: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let (u, mut s, vt) = svd_desc(q);
    for i in n..s.len() {
        let t = tau.get(i - n).copied().unwrap_or(0.0);
        s[i] = (s[i] - t).max(0.0);
    }
    let mut us = u;
    for (c, sv) in s.iter().enumerate() {
        us.column_mut(c).scale_mut(*sv);
    }
    (us * vt, s)
}

/// Keeps `sigma_1..sigma_n`, soft-thresholds `sigma_i` (i > n) by `tau[i - n - 1]`.
/// Missing thresholds count as zero.
pub fn psvt(q: &DMatrix<f64>, n: usize, tau: &[f64]) -> DMatrix<f64> {
    psvt_with_values(q, n, tau).0
}

/// Closed-form minimizer of
/// `0.5 ||W - R X||^2 + rho/2 ||X - (Phi^-1(X#) + Phi^-1(Y)/rho)||^2`, frame by frame.
pub fn solve_x_subproblem(
    w: &DMatrix<f64>,
    r: &BlockRotation,
    xsharp: &DMatrix<f64>,
    y: &DMatrix<f64>,
    rho: f64,
) -> Result<DMatrix<f64>> {
    check_dims(w, r)?;
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    let f_count = r.frames();
    if xsharp.shape() != (f_count, 3 * w.ncols()) || y.shape() != xsharp.shape() {
        return Err(Error::ShapeMismatch("X# or Y does not match W".into()));
    }
    let t = reshape_tall(&(xsharp + y / rho))?;
    let mut x = DMatrix::zeros(3 * f_count, w.ncols());
    for (f, b) in r.blocks.iter().enumerate() {
        let lhs = b.transpose() * b + Matrix3::identity() * rho;
        let chol = lhs
            .cholesky()
            .ok_or_else(|| Error::NumericalFailure(format!("frame {f} normal system")))?;
        let rhs = b.transpose() * w.rows(2 * f, 2) + t.rows(3 * f, 3) * rho;
        x.rows_mut(3 * f, 3).copy_from(&chol.solve(&rhs));
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSolverConfig {
    /// Leading singular values kept untouched.
    pub n: usize,
    pub mu: f64,
    /// `None` selects [`default_xi`].
    pub xi: Option<f64>,
    pub gamma: f64,
    pub rho0: f64,
    pub lambda: f64,
    pub rho_max: f64,
    pub eps: f64,
    pub max_iter: usize,
}

impl Default for ShapeSolverConfig {
    fn default() -> Self {
        Self {
            n: 1,
            mu: 1.0,
            xi: None,
            gamma: 1e-6,
            rho0: 1e-4,
            lambda: 1.1,
            rho_max: 1e10,
            eps: 1e-10,
            max_iter: 500,
        }
    }
}

impl ShapeSolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mu", self.mu),
            ("gamma", self.gamma),
            ("rho0", self.rho0),
            ("rho_max", self.rho_max),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(xi) = self.xi {
            if !(xi > 0.0) {
                return Err(Error::Config(format!("xi must be positive, got {xi}")));
            }
        }
        if !(self.lambda > 1.0) {
            return Err(Error::Config(format!("lambda must exceed 1, got {}", self.lambda)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitReason {
    /// `||X# - Phi(X)||_inf < eps`
    Converged,
    RhoCap,
    MaxIter,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub residual: f64,
    pub rho: f64,
}

#[derive(Clone, Debug)]
pub struct ShapeSolution {
    /// `3F x P`
    pub x: DMatrix<f64>,
    pub x_init: DMatrix<f64>,
    pub xsharp: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub theta: DVector<f64>,
    pub xi: f64,
    pub iterations: usize,
    pub exit: ExitReason,
    /// `||X# - Phi(X)||_inf` at exit.
    pub final_residual: f64,
    pub diagnostics: Vec<IterationRecord>,
}

impl ShapeSolution {
    pub fn rho_capped(&self) -> bool {
        self.exit == ExitReason::RhoCap
    }
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// ADMM on the weighted, partially preserved nuclear norm of `X#`.
pub fn admm_shape(w: &DMatrix<f64>, r: &BlockRotation, cfg: &ShapeSolverConfig) -> Result<ShapeSolution> {
    cfg.validate()?;
    let x_init = pinv_shape(r, w)?;
    let init_sharp = reshape_sharp(&x_init)?;
    let sigma = singular_values_desc(&init_sharp);
    let xi = cfg.xi.unwrap_or_else(|| default_xi(sigma[0]));
    let theta = compute_weights(&sigma, cfg.n, xi, cfg.gamma);

    let mut xsharp = init_sharp;
    let mut y = DMatrix::zeros(xsharp.nrows(), xsharp.ncols());
    let mut x = x_init.clone();
    let mut rho = cfg.rho0;
    let mut diagnostics = Vec::new();
    let mut exit = ExitReason::MaxIter;
    let mut residual = f64::INFINITY;
    let assembled_fit = |x: &DMatrix<f64>| -> f64 {
        let mut total = 0.0;
        for (f, b) in r.blocks.iter().enumerate() {
            total += (w.rows(2 * f, 2) - b * x.rows(3 * f, 3)).norm_squared();
        }
        0.5 * total
    };

    for iteration in 1..=cfg.max_iter {
        x = solve_x_subproblem(w, r, &xsharp, &y, rho)?;
        let phi_x = reshape_sharp(&x)?;
        let tau: Vec<f64> = theta.iter().map(|t| cfg.mu * t / rho).collect();
        let (next, values) = psvt_with_values(&(&phi_x - &y / rho), cfg.n, &tau);
        xsharp = next;
        let gap = &xsharp - &phi_x;
        y += &gap * rho;
        residual = gap.amax();

        let penalty: f64 = values
            .iter()
            .skip(cfg.n)
            .zip(theta.iter())
            .map(|(s, t)| s * t)
            .sum();
        let objective = assembled_fit(&x) + cfg.mu * penalty;
        diagnostics.push(IterationRecord {
            iteration,
            objective,
            residual,
            rho,
        });
        if !(all_finite(&x) && all_finite(&xsharp) && all_finite(&y)) || !objective.is_finite() {
            return Err(Error::NonFinite(iteration));
        }

        rho = (rho * cfg.lambda).min(cfg.rho_max);
        if residual < cfg.eps {
            exit = ExitReason::Converged;
            break;
        }
        if rho >= cfg.rho_max {
            exit = ExitReason::RhoCap;
            break;
        }
    }

    Ok(ShapeSolution {
        x,
        x_init,
        xsharp,
        y,
        theta,
        xi,
        iterations: diagnostics.len(),
        exit,
        final_residual: residual,
        diagnostics,
    })
}

/// CSV with header `iteration,objective,residual,rho`.
pub fn write_diagnostics(records: &[IterationRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "iteration,objective,residual,rho").map_err(io)?;
    for r in records {
        writeln!(out, "{},{:e},{:e},{:e}", r.iteration, r.objective, r.residual, r.rho).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// ASCII PLY point cloud of one `3 x P` frame.
pub fn write_ply(frame: &DMatrix<f64>, path: &Path) -> Result<()> {
    if frame.nrows() != 3 {
        return Err(Error::ShapeMismatch(format!("frame has {} rows, expected 3", frame.nrows())));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        frame.ncols()
    )
    .map_err(io)?;
    for c in frame.column_iter() {
        writeln!(out, "{} {} {}", c[0], c[1], c[2]).map_err(io)?;
    }
    out.flush().map_err(io)
}
