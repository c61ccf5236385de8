//! Shared fixtures and independent numerical oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// One-sided Jacobi SVD, deliberately independent of the library's SVD path.
/// Returns `(U, s, V)` with `s` nonincreasing, thin factors.
pub fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let transpose = a.nrows() < a.ncols();
    let mut u = if transpose { a.transpose() } else { a.clone() };
    let (m, n) = (u.nrows(), u.ncols());
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: f64 = u.column(p).norm_squared();
                let beta: f64 = u.column(q).norm_squared();
                let gamma: f64 = u.column(p).dot(&u.column(q));
                if gamma.abs() <= 1e-300 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(1e-300));
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (u[(i, p)], u[(i, q)]);
                    u[(i, p)] = c * x - s * y;
                    u[(i, q)] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<(f64, usize)> = (0..n).map(|j| (u.column(j).norm(), j)).collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0));
    let r = n.min(m);
    let mut uu = DMatrix::zeros(m, r);
    let mut vv = DMatrix::zeros(n, r);
    let mut s = DVector::zeros(r);
    for (c, &(sig, j)) in sv.iter().take(r).enumerate() {
        s[c] = sig;
        vv.set_column(c, &v.column(j));
        if sig > 1e-300 {
            uu.set_column(c, &(u.column(j) / sig));
        }
    }
    if transpose {
        (vv, s, uu)
    } else {
        (uu, s, vv)
    }
}

/// Partial thresholding rebuilt from the Jacobi factors.
pub fn psvt_oracle(q: &DMatrix<f64>, n: usize, tau: &[f64]) -> DMatrix<f64> {
    let (u, s, v) = jacobi_svd(q);
    let mut out = DMatrix::zeros(q.nrows(), q.ncols());
    for i in 0..s.len() {
        let si = if i < n { s[i] } else { (s[i] - tau.get(i - n).copied().unwrap_or(0.0)).max(0.0) };
        out += u.column(i) * v.column(i).transpose() * si;
    }
    out
}

pub fn rot(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
}

/// Deterministic pseudo-random generator for test data without a seed crate.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64) / ((1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn matrix(&mut self, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| self.normal())
    }

    pub fn rotation(&mut self) -> Matrix3<f64> {
        let axis = Vector3::new(self.normal(), self.normal(), self.normal());
        rot(axis, self.uniform(0.0, std::f64::consts::PI))
    }
}

/// Gradient of `0.5 ||W - R X||^2 + rho/2 ||X - T||^2` by central differences.
pub fn fd_gradient(f: impl Fn(&DMatrix<f64>) -> f64, x: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    let mut xp = x.clone();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let orig = xp[(i, j)];
            xp[(i, j)] = orig + h;
            let fp = f(&xp);
            xp[(i, j)] = orig - h;
            let fm = f(&xp);
            xp[(i, j)] = orig;
            g[(i, j)] = (fp - fm) / (2.0 * h);
        }
    }
    g
}
