//! Rank-3K factorization and corrective triplet recovery.
//!
//! Frame `f` contributes two rows `u_f`, `v_f` of the ambiguous motion factor
//! `M^`. A corrective triplet `G` (3K x 3) is valid when every projected pair
//! `u_f G`, `v_f G` is orthogonal with equal norms. In terms of the Gram
//! matrix `Q = G G^T` these are linear constraints, which gives a linear
//! system on the half-vectorization of `Q`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd_desc, sym_eigen_asc};
use crate::measurements::MeasurementMatrix;

/// Angle (degrees) below which two converged triplets count as the same.
pub const CLUSTER_ANGLE_DEG: f64 = 5.0;

const REFINE_MAX_ITER: usize = 500;
const REFINE_STEP_TOL: f64 = 1e-10;
const PROJECTION_MAX_ITER: usize = 500;

#[derive(Clone, Debug)]
pub struct TruncatedFactors {
    /// `2F x 3K`
    pub mhat: DMatrix<f64>,
    /// `3K x P`
    pub bhat: DMatrix<f64>,
    pub singular_values: DVector<f64>,
}

impl TruncatedFactors {
    pub fn frames(&self) -> usize {
        self.mhat.nrows() / 2
    }

    pub fn k(&self) -> usize {
        self.mhat.ncols() / 3
    }
}

/// Splits the top 3K singular triplets symmetrically between `M^` and `B^`.
pub fn truncated_factor(w: &MeasurementMatrix, k: usize) -> Result<TruncatedFactors> {
    if !w.is_centered() {
        return Err(Error::NotCentered);
    }
    let available = w.data().nrows().min(w.data().ncols());
    if k == 0 || 3 * k > available {
        return Err(Error::RankTooLarge {
            requested: 3 * k,
            available,
        });
    }
    let r = 3 * k;
    let (u, s, vt) = svd_desc(w.data());
    let sqrt_s = s.rows(0, r).map(f64::sqrt);
    let mut mhat = u.columns(0, r).into_owned();
    let mut bhat = vt.rows(0, r).into_owned();
    for i in 0..r {
        mhat.column_mut(i).scale_mut(sqrt_s[i]);
        bhat.row_mut(i).scale_mut(sqrt_s[i]);
    }
    Ok(TruncatedFactors {
        mhat,
        bhat,
        singular_values: s.rows(0, r).into_owned(),
    })
}

/// Upper-triangle index pairs `(i, j)`, `i <= j`, in row-major order.
fn vech_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

pub fn vech(q: &DMatrix<f64>) -> DVector<f64> {
    let pairs = vech_pairs(q.nrows());
    DVector::from_iterator(pairs.len(), pairs.iter().map(|&(i, j)| q[(i, j)]))
}

pub fn unvech(q: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for (c, (i, j)) in vech_pairs(n).into_iter().enumerate() {
        m[(i, j)] = q[c];
        m[(j, i)] = q[c];
    }
    m
}

/// `2F x 3K(3K+1)/2` matrix with `A vech(Q)` stacking
/// `u_f^T Q u_f - v_f^T Q v_f` and `u_f^T Q v_f` for every frame.
pub fn build_constraint_matrix(factors: &TruncatedFactors) -> DMatrix<f64> {
    let m = &factors.mhat;
    let n = m.ncols();
    let pairs = vech_pairs(n);
    let mut a = DMatrix::zeros(m.nrows(), pairs.len());
    for f in 0..factors.frames() {
        let u = m.row(2 * f);
        let v = m.row(2 * f + 1);
        for (c, &(i, j)) in pairs.iter().enumerate() {
            if i == j {
                a[(2 * f, c)] = u[i] * u[i] - v[i] * v[i];
                a[(2 * f + 1, c)] = u[i] * v[i];
            } else {
                a[(2 * f, c)] = 2.0 * (u[i] * u[j] - v[i] * v[j]);
                a[(2 * f + 1, c)] = u[i] * v[j] + u[j] * v[i];
            }
        }
    }
    a
}

/// Linear functional `s` with `s . vech(Q) = sum_f (u_f^T Q u_f + v_f^T Q v_f)`.
pub fn scale_functional(factors: &TruncatedFactors) -> DVector<f64> {
    let t = factors.mhat.transpose() * &factors.mhat;
    let pairs = vech_pairs(t.nrows());
    DVector::from_iterator(
        pairs.len(),
        pairs
            .iter()
            .map(|&(i, j)| if i == j { t[(i, i)] } else { 2.0 * t[(i, j)] }),
    )
}

/// The `2K^2 - K` smallest eigenpairs of `A^T A`, eigenvalues ascending.
fn near_null_space(a: &DMatrix<f64>, k: usize) -> (DVector<f64>, DMatrix<f64>) {
    let (vals, vecs) = sym_eigen_asc(&(a.transpose() * a));
    let d = (2 * k * k - k).min(vals.len());
    (vals.rows(0, d).into_owned(), vecs.columns(0, d).into_owned())
}

/// Closest PSD matrix of rank at most 3, with its factor `E sqrt(lambda)`.
fn project_rank3_psd(q: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (vals, vecs) = sym_eigen_asc(q);
    let n = q.nrows();
    let keep = n.min(3);
    let mut g = DMatrix::zeros(n, 3);
    for c in 0..keep {
        let idx = n - 1 - c;
        let lam = vals[idx].max(0.0);
        g.set_column(c, &(vecs.column(idx) * lam.sqrt()));
    }
    (&g * g.transpose(), g)
}

/// Minimizes `||A vech(Q)||^2` on the slice `s . vech(Q) = 2F` within the
/// near-null space of `A`, then projects to rank-3 PSD.
pub fn solve_gram(a: &DMatrix<f64>, factors: &TruncatedFactors) -> Result<DMatrix<f64>> {
    let k = factors.k();
    let n = 3 * k;
    if a.ncols() != n * (n + 1) / 2 || a.nrows() != factors.mhat.nrows() {
        return Err(Error::ShapeMismatch(
            "constraint matrix does not match the factors".into(),
        ));
    }
    let target = 2.0 * factors.frames() as f64;
    let (vals, basis) = near_null_space(a, k);
    let top = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let ridge = 1e-12 * top.max(f64::MIN_POSITIVE);
    let t = basis.transpose() * scale_functional(factors);
    let hinv_t = DVector::from_iterator(
        t.len(),
        t.iter().zip(vals.iter()).map(|(ti, wi)| ti / (wi.max(0.0) + ridge)),
    );
    let denom = t.dot(&hinv_t);
    if !denom.is_finite() || denom.abs() <= f64::EPSILON * t.norm_squared() {
        return Err(Error::NoSolutionSpace);
    }
    let y = hinv_t * (target / denom);
    let q = unvech(&(basis * y), n);
    let (projected, g) = project_rank3_psd(&q);
    if g.norm() == 0.0 {
        return Err(Error::NoSolutionSpace);
    }
    Ok(projected)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectiveTriplet {
    /// `3K x 3`
    pub g: DMatrix<f64>,
    pub residual: f64,
    /// `2F x 3`, each frame's rows divided by their mean norm.
    pub rotation_candidate: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct TripletRecord {
    k: usize,
    residual: f64,
    #[serde(rename = "G")]
    g: Vec<f64>,
}

impl CorrectiveTriplet {
    fn from_g(g: DMatrix<f64>, mhat: &DMatrix<f64>) -> Self {
        let (residual, _) = triplet_residual(mhat, &g);
        let mut cand = mhat * &g;
        for f in 0..mhat.nrows() / 2 {
            let mut block = cand.rows_mut(2 * f, 2);
            let scale = 0.5 * (block.row(0).norm() + block.row(1).norm());
            if scale > 0.0 {
                block /= scale;
            }
        }
        Self {
            g,
            residual,
            rotation_candidate: cand,
        }
    }
}

/// JSON array of `{k, residual, G}` records, `k` 1-based, `G` row-major.
pub fn triplets_to_json(triplets: &[CorrectiveTriplet]) -> String {
    let records: Vec<TripletRecord> = triplets
        .iter()
        .enumerate()
        .map(|(i, t)| TripletRecord {
            k: i + 1,
            residual: t.residual,
            g: t.g.transpose().iter().copied().collect(),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("plain numeric records serialize")
}

/// Returns `(residual, scale)` where `scale = sum_f (a_f + c_f) / 2F` and the
/// residual is evaluated after normalizing `G` so that `scale = 1`.
pub fn triplet_residual(mhat: &DMatrix<f64>, g: &DMatrix<f64>) -> (f64, f64) {
    let p = mhat * g;
    let frames = mhat.nrows() / 2;
    let (mut raw, mut trace) = (0.0, 0.0);
    for f in 0..frames {
        let u = p.row(2 * f);
        let v = p.row(2 * f + 1);
        let (a, b, c) = (u.dot(&u), u.dot(&v), v.dot(&v));
        raw += (a - c).powi(2) + 2.0 * b * b;
        trace += a + c;
    }
    let scale = trace / (2.0 * frames as f64);
    (raw / (scale * scale), scale)
}

fn normalize_scale(mhat: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let (_, scale) = triplet_residual(mhat, g);
    g / scale.sqrt()
}

/// Residual vector `[a_f - c_f, sqrt2 b_f]` and its Jacobian in row-major `G`.
fn residual_and_jacobian(mhat: &DMatrix<f64>, g: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let frames = mhat.nrows() / 2;
    let n = mhat.ncols();
    let p = mhat * g;
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut r = DVector::zeros(2 * frames);
    let mut jac = DMatrix::zeros(2 * frames, 3 * n);
    for f in 0..frames {
        let (mu, mv) = (mhat.row(2 * f), mhat.row(2 * f + 1));
        let (pu, pv) = (p.row(2 * f), p.row(2 * f + 1));
        r[f] = pu.dot(&pu) - pv.dot(&pv);
        r[frames + f] = sqrt2 * pu.dot(&pv);
        for i in 0..n {
            for j in 0..3 {
                jac[(f, 3 * i + j)] = 2.0 * (mu[i] * pu[j] - mv[i] * pv[j]);
                jac[(frames + f, 3 * i + j)] = sqrt2 * (mu[i] * pv[j] + mv[i] * pu[j]);
            }
        }
    }
    (r, jac)
}

/// Damped Gauss-Newton on the triplet residual with the scale re-imposed
/// after every step. Only decreasing steps are accepted.
pub fn refine_triplet(g0: &DMatrix<f64>, factors: &TruncatedFactors) -> Result<CorrectiveTriplet> {
    let mhat = &factors.mhat;
    if g0.nrows() != mhat.ncols() || g0.ncols() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "triplet is {}x{}, expected {}x3",
            g0.nrows(),
            g0.ncols(),
            mhat.ncols()
        )));
    }
    if g0.norm() == 0.0 {
        return Err(Error::InvalidArgument("initial triplet is zero".into()));
    }
    let n = mhat.ncols();
    let mut g = normalize_scale(mhat, g0);
    let (mut res, _) = triplet_residual(mhat, &g);
    if !res.is_finite() {
        return Err(Error::NumericalFailure("non-finite initial residual".into()));
    }
    let mut damping = 1e-3;
    for _ in 0..REFINE_MAX_ITER {
        if res == 0.0 {
            break;
        }
        let (r, jac) = residual_and_jacobian(mhat, &g);
        let h = jac.transpose() * &jac;
        let grad = jac.transpose() * r;
        let mut accepted = None;
        while damping <= 1e12 {
            let mut lhs = h.clone();
            for i in 0..lhs.nrows() {
                lhs[(i, i)] += damping * h[(i, i)] + 1e-15;
            }
            let step = match lhs.clone().cholesky() {
                Some(ch) => ch.solve(&grad),
                None => lhs.lu().solve(&grad).unwrap_or_else(|| DVector::zeros(grad.len())),
            };
            let step = -step;
            let mut trial = g.clone();
            for i in 0..n {
                for j in 0..3 {
                    trial[(i, j)] += step[3 * i + j];
                }
            }
            let trial = normalize_scale(mhat, &trial);
            let (trial_res, _) = triplet_residual(mhat, &trial);
            if !trial_res.is_finite() {
                return Err(Error::NumericalFailure(
                    "non-finite residual during refinement".into(),
                ));
            }
            if trial_res <= res {
                damping = (damping / 10.0).max(1e-12);
                accepted = Some((trial, trial_res, step.norm()));
                break;
            }
            damping *= 10.0;
        }
        let Some((trial, trial_res, step_norm)) = accepted else {
            break;
        };
        let stalled = res - trial_res <= 1e-16 * res;
        g = trial;
        res = trial_res;
        if step_norm < REFINE_STEP_TOL || stalled {
            break;
        }
    }
    Ok(CorrectiveTriplet::from_g(canonical_factor(&g), mhat))
}

/// Rewrites `G` as `E sqrt(Lambda)` from the eigendecomposition of `G G^T`,
/// removing the right orthogonal gauge so equal Gram matrices give equal `G`.
fn canonical_factor(g: &DMatrix<f64>) -> DMatrix<f64> {
    project_rank3_psd(&(g * g.transpose())).1
}

/// Largest principal angle between the column spaces of two triplets, degrees.
pub fn principal_angle_deg(g1: &DMatrix<f64>, g2: &DMatrix<f64>) -> f64 {
    let q1 = g1.clone().qr().q();
    let q2 = g2.clone().qr().q();
    let s = crate::linalg::singular_values_desc(&(q1.transpose() * q2));
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    smin.acos().to_degrees()
}

/// Alternating projections between the null-space slice and the rank-3 PSD set.
struct NullSpaceProjector {
    /// Frobenius-orthonormal basis of the near-null space, `n^2 x d`.
    basis: DMatrix<f64>,
    gram: DMatrix<f64>,
    target: f64,
    n: usize,
}

impl NullSpaceProjector {
    fn new(a: &DMatrix<f64>, factors: &TruncatedFactors) -> Self {
        let k = factors.k();
        let n = 3 * k;
        let (_, vecs) = near_null_space(a, k);
        let mut flat = DMatrix::zeros(n * n, vecs.ncols());
        for c in 0..vecs.ncols() {
            let m = unvech(&vecs.column(c).into_owned(), n);
            flat.set_column(c, &DVector::from_column_slice(m.as_slice()));
        }
        let basis = flat.qr().q();
        Self {
            basis,
            gram: factors.mhat.transpose() * &factors.mhat,
            target: 2.0 * factors.frames() as f64,
            n,
        }
    }

    fn run(&self, z0: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let n = self.n;
        let mut z = z0.clone();
        let mut g = None;
        for _ in 0..PROJECTION_MAX_ITER {
            let flat = DVector::from_column_slice(z.as_slice());
            let coeffs = self.basis.transpose() * flat;
            let proj = &self.basis * coeffs;
            let mut zs = DMatrix::from_column_slice(n, n, proj.as_slice());
            let scale = (&zs * &self.gram).trace();
            if !scale.is_finite() || scale.abs() < 1e-300 {
                return None;
            }
            zs *= self.target / scale;
            let (p, gg) = project_rank3_psd(&zs);
            let moved = (&p - &zs).norm();
            let size = zs.norm();
            z = p;
            g = Some(gg);
            if moved < 1e-9 * size {
                break;
            }
        }
        g.filter(|g| g.norm() > 0.0 && g.iter().all(|v| v.is_finite()))
    }
}

/// Every distinct triplet found by the restart search, best first.
#[derive(Clone, Debug)]
pub struct TripletSearch {
    pub clusters: Vec<CorrectiveTriplet>,
    pub restarts_run: usize,
    pub restarts_failed: usize,
}

/// Runs `restarts` refinements and clusters them by principal angle.
///
/// Restart 0 starts from [`solve_gram`]; the others from random PSD matrices.
/// Each start is pulled onto the rank-3 PSD part of the near-null space by
/// alternating projections before refinement.
pub fn search_triplets(
    factors: &TruncatedFactors,
    a: &DMatrix<f64>,
    seed: u64,
    restarts: usize,
) -> Result<TripletSearch> {
    let n = 3 * factors.k();
    let frames = factors.frames() as f64;
    let projector = NullSpaceProjector::new(a, factors);
    let first = solve_gram(a, factors)?;

    let results: Vec<Result<CorrectiveTriplet>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let z0 = if r == 0 {
                first.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                let m: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
                &m * m.transpose()
            };
            let g0 = projector
                .run(&z0)
                .ok_or_else(|| Error::NumericalFailure("projection collapsed".into()))?;
            refine_triplet(&g0, factors)
        })
        .collect();

    let mut failed = 0;
    let mut first_err = None;
    let mut converged = Vec::new();
    for r in results {
        match r {
            Ok(t) => converged.push(t),
            Err(e) => {
                failed += 1;
                first_err.get_or_insert(e);
            }
        }
    }
    if converged.is_empty() {
        return Err(first_err.unwrap_or(Error::NoSolutionSpace));
    }

    // residuals at round-off level tie, and the smaller-norm triplet wins
    let floor = 1e-18 * frames;
    let key = |t: &CorrectiveTriplet| if t.residual > floor { t.residual } else { 0.0 };
    converged.sort_by(|x, y| {
        key(x)
            .total_cmp(&key(y))
            .then(x.g.norm_squared().total_cmp(&y.g.norm_squared()))
            .then_with(|| {
                x.g.iter()
                    .zip(y.g.iter())
                    .map(|(p, q)| p.total_cmp(q))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });

    let mut clusters: Vec<CorrectiveTriplet> = Vec::new();
    for t in converged {
        if clusters
            .iter()
            .all(|c| principal_angle_deg(&c.g, &t.g) > CLUSTER_ANGLE_DEG)
        {
            clusters.push(t);
        }
    }
    Ok(TripletSearch {
        clusters,
        restarts_run: restarts,
        restarts_failed: failed,
    })
}

/// The K best distinct triplets, reference first.
pub fn extract_triplets(
    factors: &TruncatedFactors,
    a: &DMatrix<f64>,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<Vec<CorrectiveTriplet>> {
    if restarts < k {
        return Err(Error::InvalidArgument(format!(
            "restarts ({restarts}) must be at least K ({k})"
        )));
    }
    let mut search = search_triplets(factors, a, seed, restarts)?;
    if search.clusters.len() < k {
        return Err(Error::InsufficientTriplets {
            found: search.clusters.len(),
            needed: k,
            partial: search.clusters,
        });
    }
    search.clusters.truncate(k);
    Ok(search.clusters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurements::{synthesize_sequence, SyntheticModel};

    fn factors_for(frames: usize, points: usize, k: usize, seed: u64) -> TruncatedFactors {
        let seq = synthesize_sequence(&SyntheticModel::random(frames, points, k, 0.0, seed), seed).unwrap();
        truncated_factor(&seq.measurements, k).unwrap()
    }

    #[test]
    fn exact_rank_reconstruction() {
        let seq = synthesize_sequence(&SyntheticModel::random(20, 15, 2, 0.0, 1), 1).unwrap();
        let f = truncated_factor(&seq.measurements, 2).unwrap();
        let w = seq.measurements.data();
        assert!((w - &f.mhat * &f.bhat).norm() / w.norm() < 1e-8);
        assert!(f.singular_values.as_slice().windows(2).all(|p| p[0] >= p[1]));
        assert!(matches!(
            truncated_factor(&seq.measurements, 6),
            Err(Error::RankTooLarge { .. })
        ));
    }

    #[test]
    fn constraint_matrix_evaluates_quadratic_forms() {
        let f = factors_for(6, 8, 1, 2);
        let a = build_constraint_matrix(&f);
        let q0 = DMatrix::from_fn(3, 3, |i, j| ((i + 1) * (j + 2)) as f64 * 0.1);
        let q = &q0 + q0.transpose();
        let lhs = &a * vech(&q);
        for fr in 0..f.frames() {
            let u = f.mhat.row(2 * fr).transpose();
            let v = f.mhat.row(2 * fr + 1).transpose();
            let e1 = (u.transpose() * &q * &u)[0] - (v.transpose() * &q * &v)[0];
            let e2 = (u.transpose() * &q * &v)[0];
            assert!((lhs[2 * fr] - e1).abs() < 1e-12);
            assert!((lhs[2 * fr + 1] - e2).abs() < 1e-12);
        }
        let scaled = TruncatedFactors {
            mhat: &f.mhat * 2.0,
            ..f.clone()
        };
        assert!((build_constraint_matrix(&scaled) - &a * 4.0).abs().max() < 1e-12);
    }

    #[test]
    fn rigid_triplet_is_exact() {
        let f = factors_for(12, 20, 1, 4);
        let a = build_constraint_matrix(&f);
        let q = solve_gram(&a, &f).unwrap();
        let (vals, _) = sym_eigen_asc(&q);
        assert!(vals[0] >= -1e-12);
        let t = refine_triplet(&project_rank3_psd(&q).1, &f).unwrap();
        assert!(t.residual < 1e-10 * f.frames() as f64, "{}", t.residual);
    }

    #[test]
    fn refinement_does_not_increase_residual() {
        let f = factors_for(30, 25, 2, 9);
        let g0 = DMatrix::from_fn(6, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin());
        let (r0, _) = triplet_residual(&f.mhat, &g0);
        let t = refine_triplet(&g0, &f).unwrap();
        assert!(t.residual <= r0);
    }

    #[test]
    fn gauge_covariance() {
        let f = factors_for(10, 12, 2, 5);
        let h = DMatrix::from_fn(6, 6, |i, j| if i == j { 2.0 } else { ((i + 2 * j) as f64).cos() * 0.3 });
        let hinv = h.clone().try_inverse().unwrap();
        let g = DMatrix::from_fn(6, 3, |i, j| ((i + j) as f64).sin() + 0.1);
        let (r1, _) = triplet_residual(&f.mhat, &g);
        let (r2, _) = triplet_residual(&(&f.mhat * &h), &(hinv * &g));
        assert!((r1 - r2).abs() < 1e-8 * r1.max(1.0));
    }

    #[test]
    fn restarts_guard() {
        let f = factors_for(12, 20, 2, 1);
        let a = build_constraint_matrix(&f);
        assert!(matches!(
            extract_triplets(&f, &a, 2, 0, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn json_layout() {
        let f = factors_for(6, 8, 1, 2);
        let t = CorrectiveTriplet::from_g(DMatrix::identity(3, 3), &f.mhat);
        let v: serde_json::Value = serde_json::from_str(&triplets_to_json(&[t])).unwrap();
        assert_eq!(v[0]["k"], 1);
        assert_eq!(v[0]["G"].as_array().unwrap().len(), 9);
    }
}
