//! Rotation candidates on SO(3): lifting, registration, filtering and
//! geodesic L1 averaging.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Rotation3, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{svd3, svd_desc};

/// Reflection through the xy-plane.
pub fn flip_z() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0))
}

/// Nearest proper rotation in Frobenius norm.
pub fn project_so3(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let (u, s, vt) = svd3(m);
    if !(s[2] > 1e-12) || !s.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateProjection);
    }
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Ok(u * d * vt)
}

pub fn geodesic_distance(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let c = (((r1 * r2.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Rotation vector of a (near) rotation matrix.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

pub fn exp_so3(v: &Vector3<f64>) -> Matrix3<f64> {
    *Rotation3::new(*v).matrix()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignPolicy {
    AsIs,
    /// Negate the third column of every block before lifting.
    FlipThirdAxis,
}

#[derive(Clone, Debug)]
pub struct LiftedColumn {
    pub rotations: Vec<Matrix3<f64>>,
    /// Per-frame `(s1 - s2) / s1` of the 2x3 block: zero for an exact scaled rotation.
    pub deviation: Vec<f64>,
}

/// Lifts each 2x3 block of a `2F x 3` candidate to SO(3).
pub fn lift_to_so3(candidate: &DMatrix<f64>, policy: SignPolicy) -> Result<LiftedColumn> {
    if candidate.ncols() != 3 || candidate.nrows() % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "rotation candidate is {}x{}, expected 2F x 3",
            candidate.nrows(),
            candidate.ncols()
        )));
    }
    let frames = candidate.nrows() / 2;
    let mut rotations = Vec::with_capacity(frames);
    let mut deviation = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut b: Matrix2x3<f64> = candidate.fixed_view::<2, 3>(2 * f, 0).into_owned();
        if policy == SignPolicy::FlipThirdAxis {
            b.column_mut(2).neg_mut();
        }
        let (r1, r2) = (b.row(0).transpose(), b.row(1).transpose());
        let (n1, n2) = (r1.norm(), r2.norm());
        if n1 == 0.0 || n2 == 0.0 || !(n1.is_finite() && n2.is_finite()) {
            return Err(Error::DegenerateFrame(f));
        }
        if r1.cross(&r2).norm() / (n1 * n2) < 1e-6 {
            return Err(Error::DegenerateFrame(f));
        }
        let (u, s, vt) = svd_desc(&DMatrix::from_fn(2, 3, |i, j| b[(i, j)]));
        let uv = u * vt;
        let o = Matrix2x3::from_fn(|i, j| uv[(i, j)]);
        let (s1, s2) = (s[0], s[1]);
        let (o1, o2) = (o.row(0).transpose(), o.row(1).transpose());
        let o3 = o1.cross(&o2);
        rotations.push(Matrix3::from_rows(&[o1.transpose(), o2.transpose(), o3.transpose()]));
        deviation.push((s1 - s2) / s1);
    }
    Ok(LiftedColumn {
        rotations,
        deviation,
    })
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub rreg: Matrix3<f64>,
    pub registered: Vec<Matrix3<f64>>,
    /// Whether the axis-flipped variant of the candidate was used.
    pub flipped: bool,
    /// `sum_f ||R_ref,f - registered_f||_F^2`
    pub residual: f64,
}

fn registration_residual(reference: &[Matrix3<f64>], other: &[Matrix3<f64>]) -> f64 {
    reference
        .iter()
        .zip(other)
        .map(|(a, b)| (a - b).norm_squared())
        .sum()
}

fn register_variant(reference: &[Matrix3<f64>], other: &[Matrix3<f64>]) -> Result<(Matrix3<f64>, Vec<Matrix3<f64>>, f64)> {
    let m: Matrix3<f64> = reference
        .iter()
        .zip(other)
        .map(|(r, o)| r.transpose() * o)
        .sum();
    let rreg = project_so3(&m).unwrap_or_else(|_| Matrix3::identity());
    let registered: Vec<Matrix3<f64>> = other.iter().map(|o| o * rreg.transpose()).collect();
    let residual = registration_residual(reference, &registered);
    Ok((rreg, registered, residual))
}

/// Aligns `other` to `reference` with one global rotation
/// `registered_f = other_f * Rreg^T`, trying the candidate and its
/// axis-flipped variant `D other_f D`, `D = diag(1, 1, -1)`.
pub fn register_rotations(reference: &[Matrix3<f64>], other: &[Matrix3<f64>]) -> Result<Registration> {
    if reference.len() != other.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} reference frames vs {} candidate frames",
            reference.len(),
            other.len()
        )));
    }
    let d = flip_z();
    let flipped_other: Vec<Matrix3<f64>> = other.iter().map(|o| d * o * d).collect();
    let plain = register_variant(reference, other)?;
    let flipped = register_variant(reference, &flipped_other)?;
    let identity = registration_residual(reference, other);
    let (rreg, registered, residual, was_flipped) = if flipped.2 < plain.2 {
        (flipped.0, flipped.1, flipped.2, true)
    } else {
        (plain.0, plain.1, plain.2, false)
    };
    if residual > identity {
        return Ok(Registration {
            rreg: Matrix3::identity(),
            registered: other.to_vec(),
            flipped: false,
            residual: identity,
        });
    }
    Ok(Registration {
        rreg,
        registered,
        flipped: was_flipped,
        residual,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationSample {
    pub rotation: Matrix3<f64>,
    /// 0-based triplet index; 0 is the reference.
    pub source: usize,
    pub kept: bool,
}

/// Per-frame rotation samples from all triplets.
#[derive(Clone, Debug, Default)]
pub struct FrameRotationSet {
    pub frames: Vec<Vec<RotationSample>>,
}

impl FrameRotationSet {
    /// Builds the set from registered columns; column 0 is the reference.
    pub fn from_columns(columns: &[Vec<Matrix3<f64>>]) -> Result<Self> {
        let frames = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != frames) {
            return Err(Error::ShapeMismatch("columns have different frame counts".into()));
        }
        Ok(Self {
            frames: (0..frames)
                .map(|f| {
                    columns
                        .iter()
                        .enumerate()
                        .map(|(k, c)| RotationSample {
                            rotation: c[f],
                            source: k,
                            kept: true,
                        })
                        .collect()
                })
                .collect(),
        })
    }

    pub fn kept(&self, f: usize) -> Vec<Matrix3<f64>> {
        self.frames[f]
            .iter()
            .filter(|s| s.kept)
            .map(|s| s.rotation)
            .collect()
    }

    pub fn reference(&self) -> Vec<Matrix3<f64>> {
        self.frames
            .iter()
            .map(|samples| {
                samples
                    .iter()
                    .find(|s| s.source == 0)
                    .map_or_else(Matrix3::identity, |s| s.rotation)
            })
            .collect()
    }
}

/// Drops every non-reference sample farther than `delta` radians from the
/// frame's reference sample.
pub fn filter_samples(set: &FrameRotationSet, delta: f64) -> FrameRotationSet {
    let mut out = set.clone();
    for samples in out.frames.iter_mut() {
        let Some(reference) = samples.iter().find(|s| s.source == 0).map(|s| s.rotation) else {
            continue;
        };
        for s in samples.iter_mut() {
            s.kept = s.source == 0 || geodesic_distance(&s.rotation, &reference) <= delta;
        }
    }
    out
}

/// Elementwise (lower) median of the sample matrices, projected to SO(3).
pub fn median_init(samples: &[Matrix3<f64>]) -> Result<Matrix3<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("median of no rotations".into()));
    }
    let mid = (samples.len() - 1) / 2;
    let median = Matrix3::from_fn(|i, j| {
        let mut vals: Vec<f64> = samples.iter().map(|s| s[(i, j)]).collect();
        vals.sort_by(f64::total_cmp);
        vals[mid]
    });
    project_so3(&median)
}

/// `sum_i d(R_i, R)`
pub fn sra_objective(samples: &[Matrix3<f64>], r: &Matrix3<f64>) -> f64 {
    samples.iter().map(|s| geodesic_distance(s, r)).sum()
}

#[derive(Clone, Debug)]
pub struct SraResult {
    pub rotation: Matrix3<f64>,
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub objective: Vec<f64>,
}

/// Geodesic L1 mean by Weiszfeld iterations in the tangent space.
///
/// Samples closer than 1e-12 rad to the current estimate are left out of a
/// step. A step that would raise the objective is halved up to 30 times and
/// the iteration ends if none of the shortened steps help.
pub fn weiszfeld_sra(samples: &[Matrix3<f64>], eps_t: f64, max_iter: usize) -> Result<SraResult> {
    let mut r = median_init(samples)?;
    let mut objective = vec![sra_objective(samples, &r)];
    let mut iterations = 0;
    for _ in 0..max_iter {
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for s in samples {
            let v = log_so3(&(s * r.transpose()));
            let n = v.norm();
            if n < 1e-12 {
                continue;
            }
            num += v / n;
            den += 1.0 / n;
        }
        if den == 0.0 {
            break;
        }
        let mut dv = num / den;
        let current = *objective.last().unwrap();
        let mut accepted = None;
        for _ in 0..=30 {
            let cand = exp_so3(&dv) * r;
            let value = sra_objective(samples, &cand);
            if value <= current {
                accepted = Some((cand, value));
                break;
            }
            dv *= 0.5;
        }
        let Some((cand, value)) = accepted else {
            break;
        };
        r = cand;
        objective.push(value);
        iterations += 1;
        if dv.norm() < eps_t {
            break;
        }
    }
    Ok(SraResult {
        rotation: r,
        iterations,
        objective,
    })
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct FrameSummary {
    pub frame: usize,
    pub samples_kept: usize,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct AveragedRotations {
    pub rotations: Vec<Matrix3<f64>>,
    pub summaries: Vec<FrameSummary>,
}

/// Runs [`weiszfeld_sra`] on the kept samples of every frame.
pub fn average_frames(set: &FrameRotationSet, eps_t: f64, max_iter: usize) -> Result<AveragedRotations> {
    let results: Vec<Result<(Matrix3<f64>, FrameSummary)>> = (0..set.frames.len())
        .into_par_iter()
        .map(|f| {
            let kept = set.kept(f);
            let res = weiszfeld_sra(&kept, eps_t, max_iter)?;
            Ok((
                res.rotation,
                FrameSummary {
                    frame: f + 1,
                    samples_kept: kept.len(),
                    objective: *res.objective.last().unwrap(),
                    iterations: res.iterations,
                },
            ))
        })
        .collect();
    let mut rotations = Vec::with_capacity(results.len());
    let mut summaries = Vec::with_capacity(results.len());
    for r in results {
        let (rot, summary) = r?;
        rotations.push(rot);
        summaries.push(summary);
    }
    Ok(AveragedRotations {
        rotations,
        summaries,
    })
}

/// Block-diagonal orthographic camera built from the first two rows of
/// each frame rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockRotation {
    pub blocks: Vec<Matrix2x3<f64>>,
}

impl BlockRotation {
    pub fn frames(&self) -> usize {
        self.blocks.len()
    }

    /// The `2F x 3F` block-diagonal matrix.
    pub fn assembled(&self) -> DMatrix<f64> {
        let f = self.blocks.len();
        let mut r = DMatrix::zeros(2 * f, 3 * f);
        for (i, b) in self.blocks.iter().enumerate() {
            r.fixed_view_mut::<2, 3>(2 * i, 3 * i).copy_from(b);
        }
        r
    }
}

pub fn assemble_block_rotation(avg: &[Matrix3<f64>]) -> BlockRotation {
    BlockRotation {
        blocks: avg.iter().map(|r| r.fixed_view::<2, 3>(0, 0).into_owned()).collect(),
    }
}
