//! Gauge-aware error metrics and the evaluation report.

use nalgebra::{DMatrix, Matrix3};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rotation::{flip_z, project_so3, BlockRotation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum AlignmentMode {
    None,
    /// Global sign `s = +-1` only.
    FlipOnly,
    /// Sign plus the best global rotation over all frames.
    GlobalRotation,
}

impl std::str::FromStr for AlignmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "none" => Ok(AlignmentMode::None),
            "fliponly" | "flip" => Ok(AlignmentMode::FlipOnly),
            "globalrotation" | "rotation" | "procrustes" => Ok(AlignmentMode::GlobalRotation),
            other => Err(Error::Config(format!("unknown alignment mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlignedShape {
    pub shape: DMatrix<f64>,
    pub sign: f64,
    pub rotation: Matrix3<f64>,
}

fn apply(est: &DMatrix<f64>, sign: f64, q: &Matrix3<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(est.nrows(), est.ncols());
    for f in 0..est.nrows() / 3 {
        out.rows_mut(3 * f, 3).copy_from(&(q * est.rows(3 * f, 3) * sign));
    }
    out
}

fn check_shapes(est: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<()> {
    if est.shape() != gt.shape() || est.nrows() % 3 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "estimate {:?} vs ground truth {:?}",
            est.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Removes the global gauge of `est` relative to `gt`. Each sign is scored
/// by the resulting [`e3d`] and the better one wins (ties keep `+1`).
pub fn align_shapes(est: &DMatrix<f64>, gt: &DMatrix<f64>, mode: AlignmentMode) -> Result<AlignedShape> {
    check_shapes(est, gt)?;
    let identity = Matrix3::identity();
    if mode == AlignmentMode::None {
        return Ok(AlignedShape {
            shape: est.clone(),
            sign: 1.0,
            rotation: identity,
        });
    }
    let mut best: Option<(f64, AlignedShape)> = None;
    for sign in [1.0, -1.0] {
        let rotation = if mode == AlignmentMode::GlobalRotation {
            let mut m = Matrix3::zeros();
            for f in 0..est.nrows() / 3 {
                m += gt.fixed_rows::<3>(3 * f) * est.fixed_rows::<3>(3 * f).transpose() * sign;
            }
            project_so3(&m).unwrap_or(identity)
        } else {
            identity
        };
        let shape = apply(est, sign, &rotation);
        let score = e3d(&shape, gt)?.mean;
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, AlignedShape { shape, sign, rotation }));
        }
    }
    Ok(best.unwrap().1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeError {
    pub mean: f64,
    pub per_frame: Vec<f64>,
}

/// Mean over frames of `||est_f - gt_f||_F / ||gt_f||_F`.
pub fn e3d(est: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<ShapeError> {
    check_shapes(est, gt)?;
    let frames = est.nrows() / 3;
    let mut per_frame = Vec::with_capacity(frames);
    for f in 0..frames {
        let g = gt.rows(3 * f, 3);
        let norm = g.norm();
        if norm == 0.0 {
            return Err(Error::DegenerateGroundTruth(f));
        }
        per_frame.push((est.rows(3 * f, 3) - g).norm() / norm);
    }
    let mean = per_frame.iter().sum::<f64>() / frames.max(1) as f64;
    Ok(ShapeError { mean, per_frame })
}

/// [`align_shapes`] followed by [`e3d`].
pub fn aligned_e3d(est: &DMatrix<f64>, gt: &DMatrix<f64>, mode: AlignmentMode) -> Result<ShapeError> {
    e3d(&align_shapes(est, gt, mode)?.shape, gt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationError {
    /// After the best global right rotation and optional axis flip.
    pub aligned: f64,
    pub unaligned: f64,
}

fn mean_frobenius(a: &[Matrix3<f64>], b: &[Matrix3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len().max(1) as f64
}

/// Mean per-frame `||R_gt - R_est||_F`, with and without removing the global
/// gauge `R_est,f -> (D) R_est,f (D) A`.
pub fn rotation_error(est: &[Matrix3<f64>], gt: &[Matrix3<f64>]) -> Result<RotationError> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} estimated vs {} ground-truth rotations",
            est.len(),
            gt.len()
        )));
    }
    let unaligned = mean_frobenius(est, gt);
    let d = flip_z();
    let mut aligned = unaligned;
    for flip in [false, true] {
        let cand: Vec<Matrix3<f64>> = est.iter().map(|r| if flip { d * r * d } else { *r }).collect();
        let m: Matrix3<f64> = cand.iter().zip(gt).map(|(e, g)| e.transpose() * g).sum();
        let a = project_so3(&m).unwrap_or_else(|_| Matrix3::identity());
        let moved: Vec<Matrix3<f64>> = cand.iter().map(|r| r * a).collect();
        aligned = aligned.min(mean_frobenius(&moved, gt));
    }
    Ok(RotationError { aligned, unaligned })
}

/// `||W - R X||_F / ||W||_F`
pub fn reprojection_error(w: &DMatrix<f64>, r: &BlockRotation, x: &DMatrix<f64>) -> Result<f64> {
    if w.nrows() != 2 * r.frames() || x.nrows() != 3 * r.frames() || x.ncols() != w.ncols() {
        return Err(Error::ShapeMismatch("W, R and X disagree".into()));
    }
    let wn = w.norm();
    if wn == 0.0 {
        return Err(Error::DegenerateInput("measurement matrix is zero".into()));
    }
    let mut total = 0.0;
    for (f, b) in r.blocks.iter().enumerate() {
        total += (w.rows(2 * f, 2) - b * x.rows(3 * f, 3)).norm_squared();
    }
    Ok(total.sqrt() / wn)
}

/// Rounds to 12 significant digits so reports are byte-stable.
pub fn round_sig(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.11e}").parse().unwrap_or(v)
}

fn ser_round<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig(*v))
}

fn ser_round_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_some(&round_sig(*x)),
        None => s.serialize_none(),
    }
}

fn ser_round_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| round_sig(*x)))
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct EvaluationReport {
    pub sequence: String,
    pub frames: usize,
    pub points: usize,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    #[serde(serialize_with = "ser_round_opt")]
    pub e3d: Option<f64>,
    #[serde(serialize_with = "ser_round_opt")]
    pub e3d_init: Option<f64>,
    #[serde(serialize_with = "ser_round_vec")]
    pub per_frame_e3d: Vec<f64>,
    #[serde(rename = "eR", serialize_with = "ser_round_opt")]
    pub e_r: Option<f64>,
    #[serde(rename = "eRUnaligned", serialize_with = "ser_round_opt")]
    pub e_r_unaligned: Option<f64>,
    #[serde(serialize_with = "ser_round")]
    pub reprojection: f64,
    pub alignment_used: AlignmentMode,
    pub iterations: usize,
    pub admm_exit: String,
    #[serde(serialize_with = "ser_round")]
    pub admm_residual: f64,
    pub triplets_found: usize,
    pub triplets_used: usize,
    pub warnings: Vec<String>,
    pub artifacts: Vec<String>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields serialize")
    }
}
