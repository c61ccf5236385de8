//! End-to-end pipeline, configuration and experiment harnesses.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use nalgebra::{DMatrix, Matrix3};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Error;
use crate::factorization::{build_constraint_matrix, search_triplets, triplets_to_json, truncated_factor, CorrectiveTriplet, TruncatedFactors};
use crate::measurements::{
    add_noise, load_measurements, load_rotations, load_shapes, mean_center, save_measurements, save_rotations, save_shapes, synthesize_sequence,
    Format, MeasurementMatrix, SyntheticModel,
};
use crate::metrics::{aligned_e3d, reprojection_error, rotation_error, round_sig, AlignmentMode, EvaluationReport};
use crate::rotation::{
    assemble_block_rotation, average_frames, filter_samples, lift_to_so3, register_rotations, AveragedRotations, BlockRotation, FrameRotationSet,
    SignPolicy,
};
use crate::shape::{admm_shape, write_diagnostics, write_ply, ExitReason, ShapeSolution, ShapeSolverConfig};

/// An error tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct PipelineError {
    pub stage: &'static str,
    pub module: &'static str,
    pub source: Error,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage \"{}\": {}", self.module, self.stage, self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

fn stage<T>(module: &'static str, stage: &'static str, r: crate::Result<T>) -> Result<T, PipelineError> {
    r.map_err(|source| PipelineError { stage, module, source })
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError {
        stage: "config",
        module: "cli",
        source: Error::Config(msg.into()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationSource {
    /// Per-frame L1 average of all registered triplet rotations.
    Averaged,
    /// Rotations of the best triplet only.
    Reference,
}

#[derive(Clone, Debug)]
pub struct ReconstructionOptions {
    pub k: usize,
    pub seed: u64,
    /// `None` means `8 K`.
    pub restarts: Option<usize>,
    pub delta: f64,
    pub eps_t: f64,
    pub sra_max_iter: usize,
    pub rotation_source: RotationSource,
    pub shape: ShapeSolverConfig,
}

impl ReconstructionOptions {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            seed: 0,
            restarts: None,
            delta: 0.05,
            eps_t: 1e-3,
            sra_max_iter: 50,
            rotation_source: RotationSource::Averaged,
            shape: ShapeSolverConfig::default(),
        }
    }

    pub fn restarts(&self) -> usize {
        self.restarts.unwrap_or(8 * self.k)
    }
}

#[derive(Clone, Debug)]
pub struct RotationEstimate {
    pub factors: TruncatedFactors,
    /// Triplets in use, reference first.
    pub triplets: Vec<CorrectiveTriplet>,
    /// Number of distinct triplets the search produced.
    pub triplets_found: usize,
    /// Registered and filtered samples.
    pub samples: FrameRotationSet,
    pub reference: Vec<Matrix3<f64>>,
    pub averaged: AveragedRotations,
    pub warnings: Vec<String>,
}

impl RotationEstimate {
    pub fn rotations(&self, source: RotationSource) -> &[Matrix3<f64>] {
        match source {
            RotationSource::Averaged => &self.averaged.rotations,
            RotationSource::Reference => &self.reference,
        }
    }
}

/// Factorization, triplet search, lifting, registration, filtering and averaging.
pub fn estimate_rotations(w: &MeasurementMatrix, opts: &ReconstructionOptions) -> Result<RotationEstimate, PipelineError> {
    const MODULE_F: &str = "factorization";
    const MODULE_R: &str = "rotation";
    if !(opts.delta > 0.0) {
        return Err(config_err(format!("delta must be positive, got {}", opts.delta)));
    }
    let factors = stage(MODULE_F, "factor", truncated_factor(w, opts.k))?;
    let a = build_constraint_matrix(&factors);
    let restarts = opts.restarts();
    if restarts < opts.k {
        return Err(stage::<()>(
            MODULE_F,
            "triplets",
            Err(Error::InvalidArgument(format!("restarts ({restarts}) must be at least K ({})", opts.k))),
        )
        .unwrap_err());
    }
    let search = stage(MODULE_F, "triplets", search_triplets(&factors, &a, opts.seed, restarts))?;
    let mut warnings = Vec::new();
    let found = search.clusters.len();
    if found < opts.k {
        warnings.push(format!("only {found} of {} distinct corrective triplets found; averaging over those", opts.k));
    }
    if search.restarts_failed > 0 {
        warnings.push(format!("{} of {} triplet restarts failed", search.restarts_failed, restarts));
    }
    let triplets: Vec<CorrectiveTriplet> = search.clusters.into_iter().take(opts.k).collect();

    let mut columns = Vec::with_capacity(triplets.len());
    for t in &triplets {
        columns.push(stage(MODULE_R, "lift", lift_to_so3(&t.rotation_candidate, SignPolicy::AsIs))?.rotations);
    }
    let reference = columns[0].clone();
    let mut registered = vec![reference.clone()];
    for c in &columns[1..] {
        registered.push(stage(MODULE_R, "register", register_rotations(&reference, c))?.registered);
    }
    let set = stage(MODULE_R, "register", FrameRotationSet::from_columns(&registered))?;
    let samples = filter_samples(&set, opts.delta);
    let averaged = stage(MODULE_R, "average", average_frames(&samples, opts.eps_t, opts.sra_max_iter))?;
    Ok(RotationEstimate {
        factors,
        triplets,
        triplets_found: found,
        samples,
        reference,
        averaged,
        warnings,
    })
}

pub fn recover_shape(w: &MeasurementMatrix, rotations: &[Matrix3<f64>], cfg: &ShapeSolverConfig) -> Result<(BlockRotation, ShapeSolution), PipelineError> {
    let block = assemble_block_rotation(rotations);
    let shape = stage("shape", "admm", admm_shape(w.data(), &block, cfg))?;
    Ok((block, shape))
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub rotations: RotationEstimate,
    pub block: BlockRotation,
    pub shape: ShapeSolution,
}

impl Reconstruction {
    pub fn frame_rotations(&self, source: RotationSource) -> &[Matrix3<f64>] {
        self.rotations.rotations(source)
    }
}

/// Full reconstruction of a centered measurement matrix.
pub fn reconstruct(w: &MeasurementMatrix, opts: &ReconstructionOptions) -> Result<Reconstruction, PipelineError> {
    let rotations = estimate_rotations(w, opts)?;
    let (block, shape) = recover_shape(w, rotations.rotations(opts.rotation_source), &opts.shape)?;
    Ok(Reconstruction { rotations, block, shape })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum Experiment {
    None,
    NoiseSweep,
    NSweep,
    RotationAblation,
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "none" => Ok(Experiment::None),
            "noisesweep" | "noise" => Ok(Experiment::NoiseSweep),
            "nsweep" => Ok(Experiment::NSweep),
            "rotationablation" | "ablation" => Ok(Experiment::RotationAblation),
            other => Err(Error::Config(format!("unknown experiment {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub format: Option<Format>,
    pub gt_shape: Option<PathBuf>,
    pub gt_rot: Option<PathBuf>,
    pub k: usize,
    pub n: usize,
    pub delta: f64,
    pub seed: u64,
    pub restarts: Option<usize>,
    pub out: Option<PathBuf>,
    pub experiment: Experiment,
    pub dump_triplets: bool,
    pub dump_rotations: bool,
    pub dry_run: bool,
    pub alignment: AlignmentMode,
    pub eps_t: f64,
    pub sra_max_iter: usize,
    pub shape: ShapeSolverConfig,
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub n_values: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: None,
            format: None,
            gt_shape: None,
            gt_rot: None,
            k: 1,
            n: 1,
            delta: 0.05,
            seed: 0,
            restarts: None,
            out: None,
            experiment: Experiment::None,
            dump_triplets: false,
            dump_rotations: false,
            dry_run: false,
            alignment: AlignmentMode::GlobalRotation,
            eps_t: 1e-3,
            sra_max_iter: 50,
            shape: ShapeSolverConfig::default(),
            sigmas: vec![0.01, 0.05, 0.1, 0.15, 0.2, 0.25],
            trials: 10,
            n_values: vec![0, 1, 2],
        }
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, value: &str) -> crate::Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> crate::Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> crate::Result<Vec<T>> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_val(key, s)).collect()
}

impl PipelineConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> crate::Result<()> {
        let path = || Some(PathBuf::from(value.trim()));
        match key.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "input" => self.input = path(),
            "format" => self.format = Some(parse_val(key, value)?),
            "gt_shape" => self.gt_shape = path(),
            "gt_rot" => self.gt_rot = path(),
            "k" => self.k = parse_val(key, value)?,
            "n" => self.n = parse_val(key, value)?,
            "delta" => self.delta = parse_val(key, value)?,
            "seed" => self.seed = parse_val(key, value)?,
            "restarts" => self.restarts = Some(parse_val(key, value)?),
            "out" => self.out = path(),
            "experiment" => self.experiment = parse_val(key, value)?,
            "dump_triplets" => self.dump_triplets = parse_bool(key, value)?,
            "dump_rotations" => self.dump_rotations = parse_bool(key, value)?,
            "dry_run" => self.dry_run = parse_bool(key, value)?,
            "alignment" => self.alignment = parse_val(key, value)?,
            "eps_t" => self.eps_t = parse_val(key, value)?,
            "sra_max_iter" => self.sra_max_iter = parse_val(key, value)?,
            "mu" => self.shape.mu = parse_val(key, value)?,
            "xi" => self.shape.xi = Some(parse_val(key, value)?),
            "gamma" => self.shape.gamma = parse_val(key, value)?,
            "rho0" | "rho" => self.shape.rho0 = parse_val(key, value)?,
            "lambda" => self.shape.lambda = parse_val(key, value)?,
            "rho_max" => self.shape.rho_max = parse_val(key, value)?,
            "eps" => self.shape.eps = parse_val(key, value)?,
            "max_iter" => self.shape.max_iter = parse_val(key, value)?,
            "sigmas" => self.sigmas = parse_list(key, value)?,
            "trials" => self.trials = parse_val(key, value)?,
            "n_values" => self.n_values = parse_list(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Reads flat `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> crate::Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if let Some(r) = self.restarts {
            if r < self.k {
                return Err(Error::Config(format!("restarts ({r}) must be at least K ({})", self.k)));
            }
        }
        let mut shape = self.shape.clone();
        shape.n = self.n;
        shape.validate()
    }

    pub fn reconstruction_options(&self) -> ReconstructionOptions {
        let mut shape = self.shape.clone();
        shape.n = self.n;
        ReconstructionOptions {
            k: self.k,
            seed: self.seed,
            restarts: self.restarts,
            delta: self.delta,
            eps_t: self.eps_t,
            sra_max_iter: self.sra_max_iter,
            rotation_source: RotationSource::Averaged,
            shape,
        }
    }

    /// Resolved settings as `key=value` lines, in a fixed order.
    pub fn describe(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let lines = [
            format!("input={}", opt_path(&self.input)),
            format!("format={}", self.format.map_or("auto".to_string(), |f| format!("{f:?}").to_lowercase())),
            format!("gt_shape={}", opt_path(&self.gt_shape)),
            format!("gt_rot={}", opt_path(&self.gt_rot)),
            format!("k={}", self.k),
            format!("n={}", self.n),
            format!("delta={}", self.delta),
            format!("seed={}", self.seed),
            format!("restarts={}", self.restarts.unwrap_or(8 * self.k)),
            format!("out={}", opt_path(&self.out)),
            format!("experiment={:?}", self.experiment),
            format!("dump_triplets={}", self.dump_triplets),
            format!("dump_rotations={}", self.dump_rotations),
            format!("alignment={:?}", self.alignment),
            format!("eps_t={}", self.eps_t),
            format!("sra_max_iter={}", self.sra_max_iter),
            format!("mu={}", self.shape.mu),
            format!("xi={}", self.shape.xi.map_or("auto".to_string(), |x| x.to_string())),
            format!("gamma={}", self.shape.gamma),
            format!("rho0={}", self.shape.rho0),
            format!("lambda={}", self.shape.lambda),
            format!("rho_max={}", self.shape.rho_max),
            format!("eps={}", self.shape.eps),
            format!("max_iter={}", self.shape.max_iter),
            format!("sigmas={}", list(&self.sigmas)),
            format!("trials={}", self.trials),
            format!("n_values={}", self.n_values.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")),
        ];
        lines.join("\n")
    }

    fn sequence_name(&self) -> String {
        self.input
            .as_ref()
            .and_then(|p| p.file_stem())
            .map_or_else(|| "sequence".to_string(), |s| s.to_string_lossy().into_owned())
    }
}

/// Centers every 3 x P frame of a shape matrix on its centroid.
pub fn center_shapes(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    out
}

/// Measurements and optional ground truth as used by every entry point.
pub struct Inputs {
    pub measurements: MeasurementMatrix,
    pub gt_shapes: Option<DMatrix<f64>>,
    pub gt_rotations: Option<Vec<Matrix3<f64>>>,
}

pub fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs, PipelineError> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| PipelineError { stage: "load", module: "measurements", source: Error::Config("no input path given".into()) })?;
    let format = cfg.format.unwrap_or_else(|| Format::from_path(input));
    let raw = stage("measurements", "load", load_measurements(input, format))?;
    let measurements = stage("measurements", "center", mean_center(&raw))?;
    let gt_shapes = match &cfg.gt_shape {
        Some(p) => {
            let s = stage("measurements", "load", load_shapes(p))?;
            if s.nrows() != 3 * measurements.frames() || s.ncols() != measurements.points() {
                return Err(PipelineError {
                    stage: "load",
                    module: "measurements",
                    source: Error::ShapeMismatch(format!("ground-truth shapes are {}x{}, expected {}x{}", s.nrows(), s.ncols(), 3 * measurements.frames(), measurements.points())),
                });
            }
            Some(center_shapes(&s))
        }
        None => None,
    };
    let gt_rotations = match &cfg.gt_rot {
        Some(p) => Some(stage("measurements", "load", load_rotations(p))?),
        None => None,
    };
    Ok(Inputs { measurements, gt_shapes, gt_rotations })
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub report: EvaluationReport,
    pub reconstruction: Reconstruction,
}

fn exit_name(e: ExitReason) -> &'static str {
    match e {
        ExitReason::Converged => "converged",
        ExitReason::RhoCap => "rhoCap",
        ExitReason::MaxIter => "maxIter",
    }
}

fn io_stage(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError { stage: "export", module: "cli", source: Error::io(path, e) }
}

/// Load, reconstruct, evaluate and (when `out` is set) write artifacts.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    stage("cli", "config", cfg.validate())?;
    let inputs = load_inputs(cfg)?;
    let w = &inputs.measurements;
    let rec = reconstruct(w, &cfg.reconstruction_options())?;
    let rots = rec.frame_rotations(RotationSource::Averaged);

    let metrics = |r| stage("metrics", "evaluate", r);
    let (e3d, e3d_init, per_frame) = match &inputs.gt_shapes {
        Some(gt) => {
            let fin = metrics(aligned_e3d(&rec.shape.x, gt, cfg.alignment))?;
            let init = metrics(aligned_e3d(&rec.shape.x_init, gt, cfg.alignment))?;
            (Some(fin.mean), Some(init.mean), fin.per_frame)
        }
        None => (None, None, Vec::new()),
    };
    let (e_r, e_r_unaligned) = match &inputs.gt_rotations {
        Some(gt) => {
            let e = stage("metrics", "evaluate", rotation_error(rots, gt))?;
            (Some(e.aligned), Some(e.unaligned))
        }
        None => (None, None),
    };
    let reprojection = stage("metrics", "evaluate", reprojection_error(w.data(), &rec.block, &rec.shape.x))?;

    let mut warnings = rec.rotations.warnings.clone();
    if rec.shape.exit == ExitReason::MaxIter {
        warnings.push("ADMM stopped at the iteration cap before convergence".into());
    }

    let mut report = EvaluationReport {
        sequence: cfg.sequence_name(),
        frames: w.frames(),
        points: w.points(),
        k: cfg.k,
        n: cfg.n,
        seed: cfg.seed,
        e3d,
        e3d_init,
        per_frame_e3d: per_frame,
        e_r,
        e_r_unaligned,
        reprojection,
        alignment_used: if inputs.gt_shapes.is_some() { cfg.alignment } else { AlignmentMode::None },
        iterations: rec.shape.iterations,
        admm_exit: exit_name(rec.shape.exit).to_string(),
        admm_residual: rec.shape.final_residual,
        triplets_found: rec.rotations.triplets_found,
        triplets_used: rec.rotations.triplets.len(),
        warnings,
        artifacts: Vec::new(),
    };

    if let Some(out) = &cfg.out {
        report.artifacts = write_artifacts(cfg, out, &rec)?;
        let path = out.join("report.json");
        fs::write(&path, report.to_json()).map_err(|e| io_stage(&path, e))?;
    }
    Ok(PipelineOutcome { report, reconstruction: rec })
}

fn write_artifacts(cfg: &PipelineConfig, out: &Path, rec: &Reconstruction) -> Result<Vec<String>, PipelineError> {
    let ply_dir = out.join("shapes");
    fs::create_dir_all(&ply_dir).map_err(|e| io_stage(&ply_dir, e))?;
    let export = |r| stage("cli", "export", r);
    let mut artifacts = vec!["report.json".to_string()];

    let frames = rec.shape.x.nrows() / 3;
    for f in 0..frames {
        let name = format!("shapes/frame_{:04}.ply", f + 1);
        export(write_ply(&rec.shape.x.rows(3 * f, 3).into_owned(), &out.join(&name)))?;
        artifacts.push(name);
    }
    export(save_shapes(&rec.shape.x, &out.join("shapes.nrsg")))?;
    artifacts.push("shapes.nrsg".into());
    export(save_rotations(rec.frame_rotations(RotationSource::Averaged), &out.join("rotations.nrsr")))?;
    artifacts.push("rotations.nrsr".into());
    export(write_diagnostics(&rec.shape.diagnostics, &out.join("diagnostics.csv")))?;
    artifacts.push("diagnostics.csv".into());

    if cfg.dump_rotations {
        let path = out.join("rotations.json");
        let json = serde_json::to_string_pretty(&rec.rotations.averaged.summaries).expect("summaries serialize");
        fs::write(&path, json).map_err(|e| io_stage(&path, e))?;
        artifacts.push("rotations.json".into());
    }
    if cfg.dump_triplets {
        let path = out.join("triplets.json");
        fs::write(&path, triplets_to_json(&rec.rotations.triplets)).map_err(|e| io_stage(&path, e))?;
        artifacts.push("triplets.json".into());
    }
    Ok(artifacts)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepRow {
    pub sigma: f64,
    pub trials: usize,
    pub mean_e3d: f64,
    pub std_e3d: f64,
    pub mean_e_r: Option<f64>,
    pub std_e_r: Option<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn trial_seed(base: u64, a: usize, b: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((a as u64) << 32) ^ b as u64
}

/// Per sigma, `trials` reconstructions of the input with fresh noise.
/// Rows are ordered by sigma, never by completion time.
pub fn run_noise_sweep(cfg: &PipelineConfig, sigmas: &[f64], trials: usize) -> Result<Vec<SweepRow>, PipelineError> {
    if trials == 0 {
        return Err(config_err("trials must be at least 1"));
    }
    if sigmas.iter().any(|s| !(*s >= 0.0)) {
        return Err(config_err("noise levels must be nonnegative"));
    }
    stage("cli", "config", cfg.validate())?;
    let inputs = load_inputs(cfg)?;
    let gt = inputs
        .gt_shapes
        .as_ref()
        .ok_or_else(|| config_err("noise sweep needs ground-truth shapes"))?;
    sweep_noise(&inputs.measurements, gt, inputs.gt_rotations.as_deref(), cfg, sigmas, trials)
}

/// Noise sweep on in-memory data (centered `w`, centered ground truth).
pub fn sweep_noise(
    w: &MeasurementMatrix,
    gt: &DMatrix<f64>,
    gt_rot: Option<&[Matrix3<f64>]>,
    cfg: &PipelineConfig,
    sigmas: &[f64],
    trials: usize,
) -> Result<Vec<SweepRow>, PipelineError> {
    let jobs: Vec<(usize, usize)> = (0..sigmas.len()).flat_map(|s| (0..trials).map(move |t| (s, t))).collect();
    let results: Vec<Result<(f64, Option<f64>), PipelineError>> = jobs
        .par_iter()
        .map(|&(si, t)| {
            let noisy = add_noise(w, sigmas[si], trial_seed(cfg.seed, si + 1, t));
            let centered = stage("measurements", "center", mean_center(&noisy))?;
            let mut opts = cfg.reconstruction_options();
            opts.seed = cfg.seed.wrapping_add(t as u64);
            let rec = reconstruct(&centered, &opts)?;
            let e = stage("metrics", "evaluate", aligned_e3d(&rec.shape.x, gt, cfg.alignment))?.mean;
            let er = match gt_rot {
                Some(g) => Some(stage("metrics", "evaluate", rotation_error(rec.frame_rotations(RotationSource::Averaged), g))?.aligned),
                None => None,
            };
            Ok((e, er))
        })
        .collect();
    let mut rows = Vec::with_capacity(sigmas.len());
    let mut iter = results.into_iter();
    for &sigma in sigmas {
        let mut e3ds = Vec::with_capacity(trials);
        let mut ers = Vec::with_capacity(trials);
        for _ in 0..trials {
            let (e, er) = iter.next().unwrap()?;
            e3ds.push(e);
            if let Some(er) = er {
                ers.push(er);
            }
        }
        let (mean_e3d, std_e3d) = mean_std(&e3ds);
        let (mean_e_r, std_e_r) = if ers.is_empty() { (None, None) } else { let (m, s) = mean_std(&ers); (Some(m), Some(s)) };
        rows.push(SweepRow { sigma, trials, mean_e3d, std_e3d, mean_e_r, std_e_r });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{}", round_sig(x)));
    let mut s = String::from("sigma,trials,mean_e3d,std_e3d,mean_eR,std_eR\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sigma,
            r.trials,
            round_sig(r.mean_e3d),
            round_sig(r.std_e3d),
            opt(r.mean_e_r),
            opt(r.std_e_r)
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct NSweepRow {
    pub n: usize,
    pub e3d_init: f64,
    pub e3d: f64,
    pub iterations: usize,
}

/// Shape stage for every `N` in `n_values` with one shared rotation estimate.
pub fn run_n_sweep(cfg: &PipelineConfig, n_values: &[usize]) -> Result<Vec<NSweepRow>, PipelineError> {
    stage("cli", "config", cfg.validate())?;
    let inputs = load_inputs(cfg)?;
    let gt = inputs.gt_shapes.as_ref().ok_or_else(|| config_err("N sweep needs ground-truth shapes"))?;
    let est = estimate_rotations(&inputs.measurements, &cfg.reconstruction_options())?;
    sweep_n(&inputs.measurements, est.rotations(RotationSource::Averaged), gt, cfg, n_values)
}

pub fn sweep_n(w: &MeasurementMatrix, rotations: &[Matrix3<f64>], gt: &DMatrix<f64>, cfg: &PipelineConfig, n_values: &[usize]) -> Result<Vec<NSweepRow>, PipelineError> {
    n_values
        .par_iter()
        .map(|&n| {
            let mut shape = cfg.shape.clone();
            shape.n = n;
            let (_, sol) = recover_shape(w, rotations, &shape)?;
            Ok(NSweepRow {
                n,
                e3d_init: stage("metrics", "evaluate", aligned_e3d(&sol.x_init, gt, cfg.alignment))?.mean,
                e3d: stage("metrics", "evaluate", aligned_e3d(&sol.x, gt, cfg.alignment))?.mean,
                iterations: sol.iterations,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct AblationRow {
    pub rotation: String,
    pub e3d_init: f64,
    pub e3d: f64,
    pub e_r: Option<f64>,
}

/// Shape stage with the reference triplet's rotations and with the averaged ones.
pub fn run_rotation_ablation(cfg: &PipelineConfig) -> Result<Vec<AblationRow>, PipelineError> {
    stage("cli", "config", cfg.validate())?;
    let inputs = load_inputs(cfg)?;
    let gt = inputs.gt_shapes.as_ref().ok_or_else(|| config_err("rotation ablation needs ground-truth shapes"))?;
    let est = estimate_rotations(&inputs.measurements, &cfg.reconstruction_options())?;
    ablate_rotations(&inputs.measurements, &est, gt, inputs.gt_rotations.as_deref(), cfg)
}

pub fn ablate_rotations(
    w: &MeasurementMatrix,
    est: &RotationEstimate,
    gt: &DMatrix<f64>,
    gt_rot: Option<&[Matrix3<f64>]>,
    cfg: &PipelineConfig,
) -> Result<Vec<AblationRow>, PipelineError> {
    let mut shape = cfg.shape.clone();
    shape.n = cfg.n;
    [("reference", RotationSource::Reference), ("averaged", RotationSource::Averaged)]
        .into_iter()
        .map(|(name, source)| {
            let rots = est.rotations(source);
            let (_, sol) = recover_shape(w, rots, &shape)?;
            let e_r = match gt_rot {
                Some(g) => Some(stage("metrics", "evaluate", rotation_error(rots, g))?.aligned),
                None => None,
            };
            Ok(AblationRow {
                rotation: name.to_string(),
                e3d_init: stage("metrics", "evaluate", aligned_e3d(&sol.x_init, gt, cfg.alignment))?.mean,
                e3d: stage("metrics", "evaluate", aligned_e3d(&sol.x, gt, cfg.alignment))?.mean,
                e_r,
            })
        })
        .collect()
}

/// Thread pool capped by `NRSFM_THREADS` when set.
pub fn thread_pool() -> rayon::ThreadPool {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("NRSFM_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|n| *n > 0) {
        builder = builder.num_threads(n);
    }
    builder.build().expect("thread pool")
}

/// Command line flags. Flags override values read from `--config`.
#[derive(Parser, Debug, Default)]
#[command(name = "nrsfm", version, about = "Non-rigid structure from motion")]
pub struct CliArgs {
    /// Measurement matrix (.csv, .nrsm, or whitespace table)
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Input format: csv, binary or whitespace (default: from extension)
    #[arg(long)]
    pub format: Option<String>,
    /// Ground-truth shapes (NRSG)
    #[arg(long)]
    pub gt_shape: Option<PathBuf>,
    /// Ground-truth rotations (NRSR)
    #[arg(long)]
    pub gt_rot: Option<PathBuf>,
    /// Shape basis size
    #[arg(short = 'K')]
    pub k: Option<usize>,
    /// Leading singular values preserved by the shape solver
    #[arg(short = 'N')]
    pub n: Option<usize>,
    /// Outlier threshold for rotation samples, radians
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Triplet search restarts (default 8K)
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// none, noise-sweep, n-sweep or rotation-ablation
    #[arg(long)]
    pub experiment: Option<String>,
    #[arg(long)]
    pub dump_triplets: bool,
    #[arg(long)]
    pub dump_rotations: bool,
    /// Print the resolved configuration and exit
    #[arg(long)]
    pub dry_run: bool,
    /// none, flip-only or global-rotation
    #[arg(long)]
    pub alignment: Option<String>,
    /// Flat key=value configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra key=value overrides
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Write a synthetic fixture FxPxK to --out and exit
    #[arg(long, value_name = "FxPxK")]
    pub synthesize: Option<String>,
    /// Noise level for --synthesize
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

impl CliArgs {
    pub fn resolve(&self) -> crate::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        if let Some(p) = &self.input {
            cfg.input = Some(p.clone());
        }
        if let Some(f) = &self.format {
            cfg.format = Some(f.parse()?);
        }
        if let Some(p) = &self.gt_shape {
            cfg.gt_shape = Some(p.clone());
        }
        if let Some(p) = &self.gt_rot {
            cfg.gt_rot = Some(p.clone());
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.restarts {
            cfg.restarts = Some(r);
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(e) = &self.experiment {
            cfg.experiment = e.parse()?;
        }
        if let Some(a) = &self.alignment {
            cfg.alignment = a.parse()?;
        }
        cfg.dump_triplets |= self.dump_triplets;
        cfg.dump_rotations |= self.dump_rotations;
        cfg.dry_run |= self.dry_run;
        Ok(cfg)
    }
}

/// Writes `measurements.nrsm`, `shapes.nrsg` and `rotations.nrsr` for a random model.
pub fn write_synthetic_fixture(spec: &str, noise: f64, seed: u64, out: &Path) -> crate::Result<()> {
    let dims: Vec<usize> = spec
        .split(['x', 'X', ','])
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad fixture size {spec:?}"))))
        .collect::<crate::Result<_>>()?;
    let [frames, points, k] = dims[..] else {
        return Err(Error::Config(format!("fixture size must be FxPxK, got {spec:?}")));
    };
    let seq = synthesize_sequence(&SyntheticModel::random(frames, points, k, noise, seed), seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_measurements(&seq.measurements, &out.join("measurements.nrsm"), Format::Binary)?;
    save_shapes(&seq.shapes, &out.join("shapes.nrsg"))?;
    save_rotations(&seq.rotations, &out.join("rotations.nrsr"))?;
    Ok(())
}

/// Entry point behind the binary; returns the process exit code.
pub fn main_with(args: CliArgs) -> i32 {
    let cfg = match args.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: cli stage \"config\": {e}");
            return 2;
        }
    };
    if cfg.dry_run {
        println!("{}", cfg.describe());
        return 0;
    }
    if let Some(spec) = &args.synthesize {
        let Some(out) = &cfg.out else {
            eprintln!("error: --synthesize needs --out");
            return 2;
        };
        return match write_synthetic_fixture(spec, args.noise, cfg.seed, out) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: measurements stage \"synthesize\": {e}");
                1
            }
        };
    }
    let pool = thread_pool();
    match pool.install(|| run_experiment(&cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write_out(cfg: &PipelineConfig, name: &str, text: &str) -> Result<(), PipelineError> {
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out).map_err(|e| io_stage(out, e))?;
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| io_stage(&path, e))?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.6}"))
}

fn run_experiment(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    match cfg.experiment {
        Experiment::None => {
            let start = Instant::now();
            let outcome = run_pipeline(cfg)?;
            let r = &outcome.report;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!("{:<20} {:>3} {:>10} {:>10} {:>12} {:>6} {:>9}", "sequence", "K", "e3d", "eR", "reprojection", "iter", "time_s");
            println!(
                "{:<20} {:>3} {:>10} {:>10} {:>12.3e} {:>6} {:>9.2}",
                r.sequence,
                r.k,
                fmt_opt(r.e3d),
                fmt_opt(r.e_r),
                r.reprojection,
                r.iterations,
                start.elapsed().as_secs_f64()
            );
        }
        Experiment::NoiseSweep => {
            let rows = run_noise_sweep(cfg, &cfg.sigmas, cfg.trials)?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            write_out(cfg, "noise_sweep.csv", &csv)?;
        }
        Experiment::NSweep => {
            let rows = run_n_sweep(cfg, &cfg.n_values)?;
            let mut csv = String::from("n,e3d_init,e3d,iterations\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{},{}\n", r.n, round_sig(r.e3d_init), round_sig(r.e3d), r.iterations));
            }
            print!("{csv}");
            write_out(cfg, "n_sweep.csv", &csv)?;
        }
        Experiment::RotationAblation => {
            let rows = run_rotation_ablation(cfg)?;
            let mut csv = String::from("rotation,e3d_init,e3d,eR\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    r.rotation,
                    round_sig(r.e3d_init),
                    round_sig(r.e3d),
                    r.e_r.map_or(String::new(), |x| round_sig(x).to_string())
                ));
            }
            print!("{csv}");
            write_out(cfg, "rotation_ablation.csv", &csv)?;
        }
    }
    Ok(())
}
