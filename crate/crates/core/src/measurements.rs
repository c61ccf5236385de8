//! Measurement matrices: loading, saving, centering and synthetic sequences.
//!
//! A measurement matrix stacks the tracked 2D points of `F` frames into a
//! `2F x P` matrix; rows `2f` and `2f + 1` (0-indexed) hold the x and y
//! coordinates of frame `f`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const MAGIC_MEASUREMENTS: &[u8; 4] = b"NRSM";
const MAGIC_SHAPES: &[u8; 4] = b"NRSG";
const MAGIC_ROTATIONS: &[u8; 4] = b"NRSR";
const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementMatrix {
    data: DMatrix<f64>,
    translations: DVector<f64>,
    centered: bool,
}

impl MeasurementMatrix {
    /// Wraps raw (uncentered) tracks. Fails unless the row count is even and nonzero.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::MalformedInput("empty measurement matrix".into()));
        }
        if data.nrows() % 2 != 0 {
            return Err(Error::MalformedInput(format!(
                "odd row count {}",
                data.nrows()
            )));
        }
        let rows = data.nrows();
        Ok(Self {
            data,
            translations: DVector::zeros(rows),
            centered: false,
        })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn translations(&self) -> &DVector<f64> {
        &self.translations
    }

    pub fn frames(&self) -> usize {
        self.data.nrows() / 2
    }

    pub fn points(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// The 2 x P block of frame `f`.
    pub fn frame(&self, f: usize) -> DMatrix<f64> {
        self.data.rows(2 * f, 2).into_owned()
    }

    /// Adds the stored translations back to every row.
    pub fn uncentered(&self) -> DMatrix<f64> {
        let mut out = self.data.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row.add_scalar_mut(self.translations[i]);
        }
        out
    }
}

/// Removes the per-row mean. Translations accumulate so that
/// [`MeasurementMatrix::uncentered`] always reproduces the original tracks.
pub fn mean_center(w: &MeasurementMatrix) -> Result<MeasurementMatrix> {
    if w.centered {
        return Err(Error::AlreadyCentered);
    }
    let p = w.points() as f64;
    let mut data = w.data.clone();
    let mut translations = w.translations.clone();
    for (i, mut row) in data.row_iter_mut().enumerate() {
        let mean = row.sum() / p;
        row.add_scalar_mut(-mean);
        translations[i] += mean;
    }
    Ok(MeasurementMatrix {
        data,
        translations,
        centered: true,
    })
}

/// Returns `W + E` with `E` i.i.d. normal of standard deviation `sigma`.
/// The result is flagged uncentered; centering it again keeps the
/// accumulated translations consistent.
pub fn add_noise(w: &MeasurementMatrix, sigma: f64, seed: u64) -> MeasurementMatrix {
    if sigma == 0.0 {
        return MeasurementMatrix {
            centered: false,
            ..w.clone()
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = w.data.clone();
    // column-major fill keeps the draw order fixed for a given shape
    for v in data.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
    MeasurementMatrix {
        data,
        translations: w.translations.clone(),
        centered: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
    /// Whitespace separated `2F x P` table as used by common MoCap releases.
    Whitespace,
}

impl Format {
    /// Guesses the format from the file extension.
    pub fn from_path(path: &Path) -> Format {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("csv") => Format::Csv,
            Some("nrsm") | Some("bin") => Format::Binary,
            _ => Format::Whitespace,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "binary" | "bin" | "nrsm" => Ok(Format::Binary),
            "whitespace" | "mocap" | "txt" => Ok(Format::Whitespace),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

/// Loads an uncentered measurement matrix.
pub fn load_measurements(path: &Path, format: Format) -> Result<MeasurementMatrix> {
    let data = match format {
        Format::Csv => parse_table(&read_text(path)?, Some(','))?,
        Format::Whitespace => parse_table(&read_text(path)?, None)?,
        Format::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let (frames, m) = decode_matrix(&bytes, MAGIC_MEASUREMENTS, 2)?;
            debug_assert_eq!(m.nrows(), 2 * frames);
            m
        }
    };
    MeasurementMatrix::new(data)
}

/// Saves the matrix exactly as stored (centered data stays centered).
pub fn save_measurements(w: &MeasurementMatrix, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Csv => write_table(w.data(), path, ","),
        Format::Whitespace => write_table(w.data(), path, " "),
        Format::Binary => write_bytes(
            path,
            &encode_matrix(w.data(), MAGIC_MEASUREMENTS, w.frames()),
        ),
    }
}

/// Loads a `3F x P` shape matrix in the "NRSG" format.
pub fn load_shapes(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, MAGIC_SHAPES, 3).map(|(_, m)| m)
}

pub fn save_shapes(shapes: &DMatrix<f64>, path: &Path) -> Result<()> {
    if shapes.nrows() % 3 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "shape matrix has {} rows, expected a multiple of 3",
            shapes.nrows()
        )));
    }
    write_bytes(
        path,
        &encode_matrix(shapes, MAGIC_SHAPES, shapes.nrows() / 3),
    )
}

/// Loads per-frame rotations in the "NRSR" format.
pub fn load_rotations(path: &Path) -> Result<Vec<Matrix3<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 || &bytes[..4] != MAGIC_ROTATIONS {
        return Err(Error::MalformedInput("bad rotation file header".into()));
    }
    check_version(&bytes)?;
    let frames = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = &bytes[10..];
    if body.len() != frames * 9 * 8 {
        return Err(Error::MalformedInput(format!(
            "rotation file holds {} bytes, expected {}",
            body.len(),
            frames * 72
        )));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(vals
        .chunks_exact(9)
        .map(|c| Matrix3::from_row_slice(c))
        .collect())
}

pub fn save_rotations(rotations: &[Matrix3<f64>], path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(10 + rotations.len() * 72);
    bytes.extend_from_slice(MAGIC_ROTATIONS);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(rotations.len() as u32).to_le_bytes());
    for r in rotations {
        for i in 0..3 {
            for j in 0..3 {
                bytes.extend_from_slice(&r[(i, j)].to_le_bytes());
            }
        }
    }
    write_bytes(path, &bytes)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_table(m: &DMatrix<f64>, path: &Path, sep: &str) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", line.join(sep)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses a numeric table. `sep = None` splits on whitespace.
/// Blank lines are skipped; row and column numbers in errors are 1-based.
fn parse_table(text: &str, sep: Option<char>) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row_no = rows.len() + 1;
        let cells: Vec<&str> = match sep {
            Some(c) => line.split(c).collect(),
            None => line.split_whitespace().collect(),
        };
        let mut row = Vec::with_capacity(cells.len());
        for (j, cell) in cells.iter().enumerate() {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: row_no,
                col: j + 1,
                text: cell.to_string(),
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::MalformedInput(format!(
                    "row {row_no} has {} columns, expected {}",
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::MalformedInput("no data rows".into()));
    }
    if rows.len() % 2 != 0 {
        return Err(Error::MalformedInput(format!(
            "odd row count {}",
            rows.len()
        )));
    }
    let cols = rows[0].len();
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        cols,
        rows.into_iter().flatten(),
    ))
}

fn check_version(bytes: &[u8]) -> Result<()> {
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::MalformedInput(format!(
            "unsupported format version {version}"
        )));
    }
    Ok(())
}

fn encode_matrix(m: &DMatrix<f64>, magic: &[u8; 4], frames: usize) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(14 + m.len() * 8);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(frames as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for row in m.row_iter() {
        for v in row.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

fn decode_matrix(
    bytes: &[u8],
    magic: &[u8; 4],
    rows_per_frame: usize,
) -> Result<(usize, DMatrix<f64>)> {
    if bytes.len() < 14 || &bytes[..4] != magic {
        return Err(Error::MalformedInput(format!(
            "bad header, expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    check_version(bytes)?;
    let frames = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let points = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let rows = rows_per_frame * frames;
    let body = &bytes[14..];
    if body.len() != rows * points * 8 {
        return Err(Error::MalformedInput(format!(
            "payload holds {} bytes, expected {}",
            body.len(),
            rows * points * 8
        )));
    }
    let vals = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    Ok((frames, DMatrix::from_row_iterator(rows, points, vals)))
}

/// Generative model `X_f = sum_k c[f,k] B_k`, observed through the first
/// two rows of `R_f`.
#[derive(Clone, Debug)]
pub struct SyntheticModel {
    pub basis: Vec<DMatrix<f64>>,
    pub coefficients: DMatrix<f64>,
    pub rotations: Vec<Rotation3<f64>>,
    pub noise_sigma: f64,
}

impl SyntheticModel {
    /// Draws a generic instance.
    ///
    /// Basis shapes are standard normal and centered per coordinate.
    /// The first coefficient is drawn from `[0.8, 1.2]` and the others from
    /// `[-0.5, 0.5]`, so every frame has a dominant mean shape. Rotations use
    /// a uniform axis and a uniform angle in `[0, pi)`.
    pub fn random(frames: usize, points: usize, k: usize, noise_sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = (0..k)
            .map(|_| {
                let mut b = DMatrix::from_fn(3, points, |_, _| rng.sample::<f64, _>(StandardNormal));
                for mut row in b.row_iter_mut() {
                    let mean = row.mean();
                    row.add_scalar_mut(-mean);
                }
                b
            })
            .collect();
        let coefficients = DMatrix::from_fn(frames, k, |_, j| {
            if j == 0 {
                rng.random_range(0.8..1.2)
            } else {
                rng.random_range(-0.5..0.5)
            }
        });
        let rotations = (0..frames).map(|_| random_rotation(&mut rng)).collect();
        Self {
            basis,
            coefficients,
            rotations,
            noise_sigma,
        }
    }

    pub fn frames(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn points(&self) -> usize {
        self.basis.first().map_or(0, |b| b.ncols())
    }

    pub fn k(&self) -> usize {
        self.basis.len()
    }

    /// Ground-truth `3F x P` shape matrix.
    pub fn shapes(&self) -> DMatrix<f64> {
        let (f_count, p) = (self.frames(), self.points());
        let mut x = DMatrix::zeros(3 * f_count, p);
        for f in 0..f_count {
            let mut block = x.rows_mut(3 * f, 3);
            for (k, b) in self.basis.iter().enumerate() {
                block += b * self.coefficients[(f, k)];
            }
        }
        x
    }
}

/// Uniform axis on the sphere, angle uniform in `[0, pi)`.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Rotation3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() > 1e-6 {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            return Rotation3::from_axis_angle(&Unit::new_normalize(v), angle);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    /// Centered measurements.
    pub measurements: MeasurementMatrix,
    /// Ground-truth `3F x P` shapes (already centered per point set).
    pub shapes: DMatrix<f64>,
    pub rotations: Vec<Matrix3<f64>>,
    /// Set when `K > F / 2`; the sequence is still generated.
    pub ill_posed: bool,
}

/// Projects the model through its rotations, adds noise and centers.
pub fn synthesize_sequence(model: &SyntheticModel, seed: u64) -> Result<SyntheticSequence> {
    let (f_count, p, k) = (model.frames(), model.points(), model.k());
    if k == 0 || f_count == 0 || p == 0 {
        return Err(Error::InvalidArgument(
            "synthetic model needs K, F, P >= 1".into(),
        ));
    }
    if model.rotations.len() != f_count || model.basis.iter().any(|b| b.nrows() != 3 || b.ncols() != p) {
        return Err(Error::ShapeMismatch("inconsistent synthetic model".into()));
    }
    let shapes = model.shapes();
    let mut w = DMatrix::zeros(2 * f_count, p);
    for f in 0..f_count {
        let proj = model.rotations[f].matrix() * shapes.rows(3 * f, 3);
        w.rows_mut(2 * f, 2).copy_from(&proj.rows(0, 2));
    }
    let raw = MeasurementMatrix::new(w)?;
    let noisy = add_noise(&raw, model.noise_sigma, seed);
    Ok(SyntheticSequence {
        measurements: mean_center(&noisy)?,
        shapes,
        rotations: model.rotations.iter().map(|r| *r.matrix()).collect(),
        ill_posed: k > f_count / 2,
    })
}
