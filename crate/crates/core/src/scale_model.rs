//! Robust polynomial model of image scale (pixels per meter) against drone
//! altitude, fitted with RANSAC, plus the held-out RMSE harness used to pick
//! a polynomial degree.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_DEGREE: usize = 4;

/// Altitudes (m) of the reference degree-study columns.
pub const STUDY_ALTITUDES: [f64; 4] = [5.0, 8.0, 10.0, 15.0];

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error("degree {0} not in 1..=4")]
    InvalidDegree(usize),
    #[error("need at least {needed} samples for this degree, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("sample {index} invalid: altitude and pixels_per_meter must be positive and finite")]
    InvalidSample { index: usize },
    #[error("all sample altitudes are identical")]
    IdenticalAltitudes,
    #[error("degenerate fit: best consensus {inliers}/{total} below required fraction {required}")]
    DegenerateFit { inliers: usize, total: usize, required: f64 },
    #[error("invalid fit configuration: {0}")]
    Config(&'static str),
    #[error("altitude {altitude} m outside model validity range [{min}, {max}]")]
    OutOfRange { altitude: f64, min: f64, max: f64 },
    #[error("model invalid at altitude {altitude} m (predicted {value} px/m)")]
    NonPositive { altitude: f64, value: f64 },
    #[error("held-out set is empty")]
    EmptyHeldout,
    #[error("degree set is empty")]
    EmptyDegrees,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{0} is empty")]
    EmptyFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSample {
    #[serde(rename = "altitude_m")]
    pub altitude: f64,
    pub pixels_per_meter: f64,
}

impl ScaleSample {
    pub fn is_valid(&self) -> bool {
        self.altitude.is_finite()
            && self.pixels_per_meter.is_finite()
            && self.altitude > 0.0
            && self.pixels_per_meter > 0.0
    }
}

/// One held-out measurement: a known real-world length seen at some altitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutSample {
    #[serde(rename = "pixel_span_px")]
    pub pixel_span: f64,
    #[serde(rename = "true_m")]
    pub true_meters: f64,
    #[serde(rename = "altitude_m")]
    pub altitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    /// Absolute residual bound for inliers, in px/m.
    pub inlier_threshold: f64,
    pub min_inlier_fraction: f64,
    pub rng_seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { iterations: 1000, inlier_threshold: 2.0, min_inlier_fraction: 0.5, rng_seed: 0 }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<(), ScaleError> {
        if self.iterations == 0 {
            return Err(ScaleError::Config("iterations must be >= 1"));
        }
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(ScaleError::Config("inlier_threshold must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.min_inlier_fraction) {
            return Err(ScaleError::Config("min_inlier_fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Affine map from altitude to the standardized regressor `z = (h - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub const IDENTITY: Standardization = Standardization { mean: 0.0, std: 1.0 };

    fn from_samples(samples: &[ScaleSample]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s.altitude).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s.altitude - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    #[inline]
    pub fn apply(&self, altitude: f64) -> f64 {
        (altitude - self.mean) / self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleModel {
    pub degree: usize,
    /// Ascending powers of the standardized altitude.
    pub coefficients: Vec<f64>,
    pub standardization: Standardization,
    pub inlier_count: usize,
    pub inlier_threshold: f64,
    /// Indices into the training samples that formed the final consensus.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inliers: Vec<usize>,
    /// Altitude span of the training data.
    pub training_range: (f64, f64),
}

impl ScaleModel {
    /// A model given directly in raw ascending powers of altitude.
    pub fn from_raw_coefficients(coefficients: Vec<f64>, training_range: (f64, f64)) -> Result<Self, ScaleError> {
        let degree = coefficients.len().saturating_sub(1);
        if !(1..=MAX_DEGREE).contains(&degree) {
            return Err(ScaleError::InvalidDegree(degree));
        }
        Ok(Self {
            degree,
            coefficients,
            standardization: Standardization::IDENTITY,
            inlier_count: degree + 1,
            inlier_threshold: f64::INFINITY,
            inliers: Vec::new(),
            training_range,
        })
    }

    /// Polynomial value without the extrapolation guard.
    pub fn evaluate(&self, altitude: f64) -> f64 {
        horner(&self.coefficients, self.standardization.apply(altitude))
    }

    /// Coefficients re-expressed in raw ascending powers of altitude.
    pub fn raw_coefficients(&self) -> Vec<f64> {
        // p(z) with z = (h - m) / s  =>  expand sum c_k (h - m)^k / s^k.
        let Standardization { mean, std } = self.standardization;
        let mut raw = vec![0.0; self.coefficients.len()];
        for (k, c) in self.coefficients.iter().enumerate() {
            let scale = c / std.powi(k as i32);
            for (j, slot) in raw.iter_mut().enumerate().take(k + 1) {
                *slot += scale * binomial(k, j) as f64 * (-mean).powi((k - j) as i32);
            }
        }
        raw
    }

    /// Altitudes at which predictions are allowed.
    pub fn validity_range(&self) -> (f64, f64) {
        (0.5 * self.training_range.0, 1.5 * self.training_range.1)
    }
}

fn binomial(n: usize, k: usize) -> u64 {
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

fn horner(coefficients: &[f64], z: f64) -> f64 {
    coefficients.iter().rev().fold(0.0, |acc, c| acc * z + c)
}

/// Least-squares polynomial coefficients in `z` for the selected rows (SVD).
fn least_squares(zs: &[f64], ys: &[f64], rows: &[usize], degree: usize) -> Option<Vec<f64>> {
    let cols = degree + 1;
    let a = DMatrix::from_fn(rows.len(), cols, |r, c| zs[rows[r]].powi(c as i32));
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|&r| ys[r]));
    let svd = a.svd(true, true);
    let x = svd.solve(&b, 1e-12).ok()?;
    x.iter().all(|v| v.is_finite()).then(|| x.iter().copied().collect())
}

const MAX_TERMS: usize = MAX_DEGREE + 1;

/// Solves a small dense system in place by Gaussian elimination with partial pivoting.
fn solve_small(m: &mut [[f64; MAX_TERMS + 1]; MAX_TERMS], n: usize) -> Option<[f64; MAX_TERMS]> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for row in col + 1..n {
            let factor = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= factor * m[col][k];
            }
        }
    }
    let mut x = [0.0; MAX_TERMS];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (m[row][n] - tail) / m[row][row];
    }
    x.iter().take(n).all(|v| v.is_finite()).then_some(x)
}

/// Exact interpolant through a minimal sample.
fn interpolate(zs: &[f64], ys: &[f64], rows: &[usize], degree: usize) -> Option<[f64; MAX_TERMS]> {
    let n = degree + 1;
    let mut m = [[0.0; MAX_TERMS + 1]; MAX_TERMS];
    for (i, &r) in rows.iter().enumerate().take(n) {
        let mut p = 1.0;
        for slot in m[i].iter_mut().take(n) {
            *slot = p;
            p *= zs[r];
        }
        m[i][n] = ys[r];
    }
    solve_small(&mut m, n)
}

/// Quick least-squares through the normal equations; used only to rank tied consensus sets.
fn quick_refit(zs: &[f64], ys: &[f64], rows: &[usize], degree: usize) -> Option<[f64; MAX_TERMS]> {
    let n = degree + 1;
    let mut m = [[0.0; MAX_TERMS + 1]; MAX_TERMS];
    let mut moments = [0.0; 2 * MAX_DEGREE + 1];
    let mut rhs = [0.0; MAX_TERMS];
    for &r in rows {
        let mut p = 1.0;
        for (k, slot) in moments.iter_mut().enumerate().take(2 * degree + 1) {
            *slot += p;
            if k < n {
                rhs[k] += p * ys[r];
            }
            p *= zs[r];
        }
    }
    for i in 0..n {
        m[i][..n].copy_from_slice(&moments[i..i + n]);
        m[i][n] = rhs[i];
    }
    solve_small(&mut m, n)
}

fn rms_over(coefficients: &[f64], zs: &[f64], ys: &[f64], rows: &[usize]) -> f64 {
    let ss: f64 = rows.iter().map(|&r| (horner(coefficients, zs[r]) - ys[r]).powi(2)).sum();
    (ss / rows.len() as f64).sqrt()
}

/// RANSAC fit of a degree-`degree` polynomial from altitude to pixels-per-meter.
pub fn fit_ransac(samples: &[ScaleSample], degree: usize, cfg: &FitConfig) -> Result<ScaleModel, ScaleError> {
    if !(1..=MAX_DEGREE).contains(&degree) {
        return Err(ScaleError::InvalidDegree(degree));
    }
    cfg.validate()?;
    let minimal = degree + 1;
    if samples.len() < minimal {
        return Err(ScaleError::InsufficientSamples { needed: minimal, got: samples.len() });
    }
    if let Some(index) = samples.iter().position(|s| !s.is_valid()) {
        return Err(ScaleError::InvalidSample { index });
    }
    let standardization = Standardization::from_samples(samples);
    if standardization.std <= f64::EPSILON * standardization.mean.abs().max(1.0) {
        return Err(ScaleError::IdenticalAltitudes);
    }

    let zs: Vec<f64> = samples.iter().map(|s| standardization.apply(s.altitude)).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.pixels_per_meter).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    // (inlier indices, refit rms) of the best consensus so far.
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut inliers = Vec::with_capacity(samples.len());
    for _ in 0..cfg.iterations {
        let pick = index::sample(&mut rng, samples.len(), minimal).into_vec();
        let distinct = pick
            .iter()
            .enumerate()
            .all(|(i, &a)| pick[i + 1..].iter().all(|&b| (zs[a] - zs[b]).abs() > 1e-12));
        if !distinct {
            continue;
        }
        let Some(hypothesis) = interpolate(&zs, &ys, &pick, degree) else {
            continue;
        };
        let hypothesis = &hypothesis[..minimal];
        inliers.clear();
        inliers.extend(
            (0..samples.len()).filter(|&i| (horner(hypothesis, zs[i]) - ys[i]).abs() <= cfg.inlier_threshold),
        );
        let better = match &best {
            None => inliers.len() >= minimal,
            Some((current, _)) if inliers.len() > current.len() => true,
            Some((current, current_rms)) if inliers.len() == current.len() => {
                // Equal consensus: the tighter refit wins, otherwise keep the earlier one.
                quick_refit(&zs, &ys, &inliers, degree)
                    .map(|refit| rms_over(&refit[..minimal], &zs, &ys, &inliers) < *current_rms)
                    .unwrap_or(false)
            }
            _ => false,
        };
        if better {
            let rms = quick_refit(&zs, &ys, &inliers, degree)
                .map(|refit| rms_over(&refit[..minimal], &zs, &ys, &inliers))
                .unwrap_or(f64::INFINITY);
            best = Some((inliers.clone(), rms));
        }
    }

    let (consensus, _) = best.ok_or(ScaleError::DegenerateFit {
        inliers: 0,
        total: samples.len(),
        required: cfg.min_inlier_fraction,
    })?;
    let required = (cfg.min_inlier_fraction * samples.len() as f64).ceil() as usize;
    if consensus.len() < required.max(minimal) {
        return Err(ScaleError::DegenerateFit {
            inliers: consensus.len(),
            total: samples.len(),
            required: cfg.min_inlier_fraction,
        });
    }
    let coefficients = least_squares(&zs, &ys, &consensus, degree).ok_or(ScaleError::IdenticalAltitudes)?;
    let lo = samples.iter().map(|s| s.altitude).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.altitude).fold(f64::NEG_INFINITY, f64::max);
    Ok(ScaleModel {
        degree,
        coefficients,
        standardization,
        inlier_count: consensus.len(),
        inlier_threshold: cfg.inlier_threshold,
        inliers: consensus,
        training_range: (lo, hi),
    })
}

/// Pixels per meter at `altitude`, guarded against extrapolation.
pub fn predict_ppm(model: &ScaleModel, altitude: f64) -> Result<f64, ScaleError> {
    let (min, max) = model.validity_range();
    if !altitude.is_finite() || altitude < min || altitude > max {
        return Err(ScaleError::OutOfRange { altitude, min, max });
    }
    let value = model.evaluate(altitude);
    if !(value > 0.0 && value.is_finite()) {
        return Err(ScaleError::NonPositive { altitude, value });
    }
    Ok(value)
}

/// Root-mean-square error of recovered real-world lengths, in centimeters.
pub fn evaluate_rmse(model: &ScaleModel, heldout: &[HeldoutSample]) -> Result<f64, ScaleError> {
    if heldout.is_empty() {
        return Err(ScaleError::EmptyHeldout);
    }
    let mut ss = 0.0;
    for s in heldout {
        let predicted_m = s.pixel_span / predict_ppm(model, s.altitude)?;
        ss += (predicted_m - s.true_meters).powi(2);
    }
    Ok((ss / heldout.len() as f64).sqrt() * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub degree: usize,
    /// One RMSE (cm) per entry of [`StudyTable::altitudes`].
    pub rmse_cm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyTable {
    pub altitudes: Vec<f64>,
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    pub fn header(&self) -> Vec<String> {
        std::iter::once("degree".to_string())
            .chain(self.altitudes.iter().map(|a| format!("rmse_{}m_cm", format_altitude(*a))))
            .collect()
    }

    pub fn row(&self, degree: usize) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.degree == degree)
    }

    /// Whether `degree` has the lowest RMSE in `column`, allowing `tie_cm` of slack.
    pub fn is_best_or_tied(&self, degree: usize, column: usize, tie_cm: f64) -> bool {
        let Some(row) = self.row(degree) else { return false };
        let best = self.rows.iter().map(|r| r.rmse_cm[column]).fold(f64::INFINITY, f64::min);
        row.rmse_cm[column] <= best + tie_cm
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), ScaleError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header())?;
        for row in &self.rows {
            let mut record = vec![row.degree.to_string()];
            record.extend(row.rmse_cm.iter().map(|v| format!("{v:.2}")));
            w.write_record(record)?;
        }
        w.flush().map_err(|source| ScaleError::Io { path: "<report>".into(), source })?;
        Ok(())
    }
}

fn format_altitude(a: f64) -> String {
    if a.fract() == 0.0 {
        format!("{a:.0}")
    } else {
        format!("{a}")
    }
}

/// Fits every degree on `samples` and scores it per held-out altitude.
pub fn degree_study(
    samples: &[ScaleSample],
    heldout: &[HeldoutSample],
    degrees: &[usize],
    cfg: &FitConfig,
) -> Result<StudyTable, ScaleError> {
    if degrees.is_empty() {
        return Err(ScaleError::EmptyDegrees);
    }
    if heldout.is_empty() {
        return Err(ScaleError::EmptyHeldout);
    }
    let mut groups: BTreeMap<u64, (f64, Vec<HeldoutSample>)> = BTreeMap::new();
    for h in heldout {
        // Non-negative finite floats order the same as their bit patterns.
        groups.entry(h.altitude.to_bits()).or_insert_with(|| (h.altitude, Vec::new())).1.push(*h);
    }
    let altitudes: Vec<f64> = groups.values().map(|(a, _)| *a).collect();
    let mut rows = Vec::with_capacity(degrees.len());
    for &degree in degrees {
        let model = fit_ransac(samples, degree, cfg)?;
        let rmse_cm = groups
            .values()
            .map(|(_, group)| evaluate_rmse(&model, group))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(StudyRow { degree, rmse_cm });
    }
    Ok(StudyTable { altitudes, rows })
}

/// Synthetic pinhole-camera data: `ppm(h) = focal_px / h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinholeGenerator {
    pub focal_px: f64,
    pub altitude_range: (f64, f64),
    pub samples: usize,
    /// Gaussian noise on training ppm values (px/m).
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Held-out measurements per altitude.
    pub heldout_per_altitude: usize,
    /// Real-world lengths drawn uniformly from this range (m).
    pub span_range: (f64, f64),
    /// Gaussian noise on held-out pixel spans (px).
    pub span_noise_px: f64,
}

impl Default for PinholeGenerator {
    fn default() -> Self {
        Self {
            focal_px: 1000.0,
            altitude_range: (3.0, 20.0),
            samples: 200,
            noise_sigma: 3.0,
            outlier_fraction: 0.2,
            heldout_per_altitude: 25,
            span_range: (0.5, 5.0),
            span_noise_px: 1.0,
        }
    }
}

/// Training samples plus a flag per sample marking planted outliers.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub samples: Vec<ScaleSample>,
    pub is_outlier: Vec<bool>,
}

impl PinholeGenerator {
    pub fn true_ppm(&self, altitude: f64) -> f64 {
        self.focal_px / altitude
    }

    pub fn training(&self, seed: u64) -> SyntheticSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma");
        let (lo, hi) = self.altitude_range;
        let outliers = (self.outlier_fraction * self.samples as f64).round() as usize;
        let planted: std::collections::BTreeSet<usize> =
            index::sample(&mut rng, self.samples, outliers.min(self.samples)).into_iter().collect();
        let mut samples = Vec::with_capacity(self.samples);
        let mut is_outlier = Vec::with_capacity(self.samples);
        for i in 0..self.samples {
            let altitude = rng.random_range(lo..=hi);
            let truth = self.true_ppm(altitude);
            let ppm = if planted.contains(&i) {
                // Gross errors: the scale is off by a large factor either way.
                if rng.random_bool(0.5) {
                    truth * rng.random_range(1.4..2.5)
                } else {
                    truth * rng.random_range(0.3..0.7)
                }
            } else {
                (truth + noise.sample(&mut rng)).max(1e-3)
            };
            samples.push(ScaleSample { altitude, pixels_per_meter: ppm });
            is_outlier.push(planted.contains(&i));
        }
        SyntheticSet { samples, is_outlier }
    }

    pub fn heldout(&self, altitudes: &[f64], seed: u64) -> Vec<HeldoutSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_4e1d);
        let noise = Normal::new(0.0, self.span_noise_px.max(f64::MIN_POSITIVE)).expect("sigma");
        let mut out = Vec::with_capacity(altitudes.len() * self.heldout_per_altitude);
        for &altitude in altitudes {
            for _ in 0..self.heldout_per_altitude {
                let true_meters = rng.random_range(self.span_range.0..=self.span_range.1);
                let pixel_span = true_meters * self.true_ppm(altitude) + noise.sample(&mut rng);
                out.push(HeldoutSample { pixel_span, true_meters, altitude });
            }
        }
        out
    }
}

/// Fit settings used by the synthetic degree study: inliers within three noise
/// standard deviations, and a consensus floor low enough that the linear model
/// still yields a fit to score.
pub fn study_fit_config(generator: &PinholeGenerator, seed: u64) -> FitConfig {
    FitConfig {
        iterations: 1000,
        inlier_threshold: 3.0 * generator.noise_sigma,
        min_inlier_fraction: 0.25,
        rng_seed: seed,
    }
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ScaleError> {
    let file = std::fs::File::open(path).map_err(|source| ScaleError::Io { path: path.display().to_string(), source })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut out = Vec::new();
    for record in reader.deserialize() {
        let value: T = record.map_err(|e| ScaleError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        out.push(value);
    }
    if out.is_empty() {
        return Err(ScaleError::EmptyFile(path.display().to_string()));
    }
    Ok(out)
}

/// Reads `altitude_m,pixels_per_meter` rows.
pub fn read_samples_csv(path: &Path) -> Result<Vec<ScaleSample>, ScaleError> {
    let samples: Vec<ScaleSample> = read_csv(path)?;
    if let Some(index) = samples.iter().position(|s| !s.is_valid()) {
        return Err(ScaleError::Parse { line: index as u64 + 2, message: "values must be positive".into() });
    }
    Ok(samples)
}

/// Reads `pixel_span_px,true_m,altitude_m` rows.
pub fn read_heldout_csv(path: &Path) -> Result<Vec<HeldoutSample>, ScaleError> {
    read_csv(path)
}
