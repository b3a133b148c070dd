//! Image-frame detections from the nadir survey camera to world-frame object
//! reports, and a detector simulator paced by the on-board inference rate.

use std::f64::consts::PI;
use std::fmt;
use std::io;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{enu_to_geodetic, geodetic_to_enu, EnuPoint, GeoError, GeoPoint};
use crate::scale_model::{predict_ppm, ScaleError, ScaleModel};

/// Minimum confidence for a detection to become a report.
pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.5;

/// Survey altitude used unless the scenario overrides it.
pub const DEFAULT_SURVEY_ALTITUDE_M: f64 = 8.0;

const BUILTIN_PRESETS: &str = include_str!("../../../data/detectors.csv");

#[derive(Debug, Error)]
pub enum GeolocateError {
    #[error(transparent)]
    Scale(#[from] ScaleError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("invalid detection: {0}")]
    InvalidDetection(&'static str),
    #[error("altitude above ground must be positive")]
    Altitude,
    #[error("unknown detector model {0:?}")]
    UnknownModel(String),
    #[error("unknown processor {0:?} (expected i7, a72 or m7)")]
    UnknownProcessor(String),
    #[error("detector presets: {0}")]
    Presets(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Person,
    Cone,
    Vehicle,
}

impl ObjectClass {
    /// Typical ground footprint edge length, used to size simulated boxes.
    pub fn nominal_size_m(self) -> f64 {
        match self {
            ObjectClass::Person => 0.6,
            ObjectClass::Cone => 0.4,
            ObjectClass::Vehicle => 3.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Person => "person",
            ObjectClass::Cone => "cone",
            ObjectClass::Vehicle => "vehicle",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl Default for ImageSize {
    fn default() -> Self {
        Self { width: 1920, height: 1080 }
    }
}

impl ImageSize {
    fn center(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.width as f64).contains(&x) && (0.0..=self.height as f64).contains(&y)
    }
}

/// Axis-aligned box in image pixels; origin top-left, y grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: ObjectClass,
    pub confidence: f64,
}

impl Detection {
    pub fn validate(&self, image: ImageSize) -> Result<(), GeolocateError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(GeolocateError::InvalidDetection("confidence outside [0, 1]"));
        }
        if !(self.w >= 0.0 && self.h >= 0.0) {
            return Err(GeolocateError::InvalidDetection("negative box size"));
        }
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let eps = 1e-9;
        if self.cx - hw < -eps
            || self.cy - hh < -eps
            || self.cx + hw > image.width as f64 + eps
            || self.cy + hh > image.height as f64 + eps
        {
            return Err(GeolocateError::InvalidDetection("box outside image"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroneFix {
    pub position: GeoPoint,
    /// Camera heading: 0 when image-up points north, counter-clockwise positive.
    pub yaw: f64,
    pub altitude_agl: f64,
    /// Monotonic milliseconds.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectReport {
    pub position: GeoPoint,
    pub class: ObjectClass,
    pub confidence: f64,
    pub source_ts: u64,
}

/// Rotates a body-frame offset (x right, y forward) into east/north by `yaw`.
fn rotate(x: f64, y: f64, yaw: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (x * c - y * s, x * s + y * c)
}

/// Ground-plane ENU position of a detection seen from `fix`.
pub fn detection_to_enu(
    d: &Detection,
    fix: &DroneFix,
    model: &ScaleModel,
    image: ImageSize,
    origin: &GeoPoint,
) -> Result<EnuPoint, GeolocateError> {
    if !(fix.altitude_agl > 0.0) {
        return Err(GeolocateError::Altitude);
    }
    let ppm = predict_ppm(model, fix.altitude_agl)?;
    let drone = geodetic_to_enu(origin, &fix.position)?;
    let (cx0, cy0) = image.center();
    let right = (d.cx - cx0) / ppm;
    let forward = -(d.cy - cy0) / ppm;
    let (de, dn) = rotate(right, forward, fix.yaw);
    Ok(EnuPoint::planar(drone.east + de, drone.north + dn))
}

/// Geolocated report for `d`, or `None` when its confidence is below `confidence_floor`.
pub fn to_report(
    d: &Detection,
    fix: &DroneFix,
    model: &ScaleModel,
    image: ImageSize,
    origin: &GeoPoint,
    confidence_floor: f64,
) -> Result<Option<ObjectReport>, GeolocateError> {
    if d.confidence < confidence_floor {
        return Ok(None);
    }
    let enu = detection_to_enu(d, fix, model, image, origin)?;
    Ok(Some(ObjectReport {
        position: enu_to_geodetic(origin, &enu)?,
        class: d.class,
        confidence: d.confidence,
        source_ts: fix.timestamp,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Processor {
    I7,
    A72,
    M7,
}

impl FromStr for Processor {
    type Err = GeolocateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "i7" | "i7-8700" => Ok(Processor::I7),
            "a72" | "cortex-a72" => Ok(Processor::A72),
            "m7" | "cortex-m7" => Ok(Processor::M7),
            other => Err(GeolocateError::UnknownProcessor(other.to_string())),
        }
    }
}

/// One row of the detector throughput table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorPreset {
    pub model: String,
    pub size_kb: f64,
    pub fps_i7: f64,
    pub fps_a72: f64,
    pub fps_m7: f64,
}

impl DetectorPreset {
    pub fn fps(&self, processor: Processor) -> f64 {
        match processor {
            Processor::I7 => self.fps_i7,
            Processor::A72 => self.fps_a72,
            Processor::M7 => self.fps_m7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorProfile {
    pub name: String,
    pub fps: f64,
    /// Square network input edge in pixels.
    pub input_size: u32,
}

impl DetectorProfile {
    pub fn frame_period_ms(&self) -> f64 {
        1000.0 / self.fps
    }
}

/// Parses a `model,size_kb,fps_i7,fps_a72,fps_m7` table.
pub fn parse_presets<R: io::Read>(reader: R) -> Result<Vec<DetectorPreset>, GeolocateError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let presets = rdr
        .deserialize()
        .collect::<Result<Vec<DetectorPreset>, _>>()
        .map_err(|e| GeolocateError::Presets(e.to_string()))?;
    if let Some(bad) = presets.iter().find(|p| [p.fps_i7, p.fps_a72, p.fps_m7].iter().any(|f| !(*f > 0.0))) {
        return Err(GeolocateError::Presets(format!("{}: fps must be positive", bad.model)));
    }
    Ok(presets)
}

pub fn builtin_presets() -> Vec<DetectorPreset> {
    parse_presets(BUILTIN_PRESETS.as_bytes()).expect("bundled detector table parses")
}

/// Looks up `model` on `processor`; the input size is the model name's numeric suffix.
pub fn select_profile(presets: &[DetectorPreset], model: &str, processor: Processor) -> Result<DetectorProfile, GeolocateError> {
    let preset = presets
        .iter()
        .find(|p| p.model.eq_ignore_ascii_case(model))
        .ok_or_else(|| GeolocateError::UnknownModel(model.to_string()))?;
    let input_size = preset.model.rsplit('-').next().and_then(|s| s.parse().ok()).unwrap_or(192);
    Ok(DetectorProfile {
        name: format!("{} on {}", preset.model, processor_label(processor)),
        fps: preset.fps(processor),
        input_size,
    })
}

fn processor_label(p: Processor) -> &'static str {
    match p {
        Processor::I7 => "i7",
        Processor::A72 => "A72",
        Processor::M7 => "M7",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Gaussian noise on box centers, px.
    pub pixel_sigma: f64,
    pub miss_probability: f64,
    pub confidence_range: (f64, f64),
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { pixel_sigma: 2.0, miss_probability: 0.1, confidence_range: (0.45, 0.98) }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self { pixel_sigma: 0.0, miss_probability: 0.0, confidence_range: (0.9, 0.9) }
    }
}

/// A ground-truth actor visible to the simulated camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundActor {
    pub position: EnuPoint,
    pub class: ObjectClass,
}

/// Renders the actors inside the camera footprint as detections.
///
/// `drone` is the camera position in ENU and `ppm` the true image scale at
/// the fix altitude. The projection is the exact inverse of
/// [`detection_to_enu`] before noise is applied.
pub fn simulate_detections<R: Rng + ?Sized>(
    actors: &[GroundActor],
    drone: EnuPoint,
    yaw: f64,
    ppm: f64,
    image: ImageSize,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Vec<Detection> {
    let (cx0, cy0) = image.center();
    let jitter = Normal::new(0.0, noise.pixel_sigma.max(0.0)).ok();
    let mut out = Vec::new();
    for actor in actors {
        let (right, forward) = rotate(actor.position.east - drone.east, actor.position.north - drone.north, -yaw);
        let cx = cx0 + right * ppm;
        let cy = cy0 - forward * ppm;
        if !image.contains(cx, cy) {
            continue;
        }
        // Draw the random numbers unconditionally so one actor's miss does not
        // shift another actor's noise.
        let missed = rng.random::<f64>() < noise.miss_probability;
        let (nx, ny) = match jitter {
            Some(n) if noise.pixel_sigma > 0.0 => (n.sample(rng), n.sample(rng)),
            _ => (0.0, 0.0),
        };
        let (lo, hi) = noise.confidence_range;
        let confidence = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        if missed {
            continue;
        }
        let cx = (cx + nx).clamp(0.0, image.width as f64);
        let cy = (cy + ny).clamp(0.0, image.height as f64);
        let side = actor.class.nominal_size_m() * ppm;
        // Clip the box so it stays inside the frame around its center.
        let w = side.min(2.0 * cx).min(2.0 * (image.width as f64 - cx));
        let h = side.min(2.0 * cy).min(2.0 * (image.height as f64 - cy));
        out.push(Detection { cx, cy, w, h, class: actor.class, confidence });
    }
    out
}

/// Ground footprint (width, height) in meters of the camera at scale `ppm`.
pub fn footprint_m(image: ImageSize, ppm: f64) -> (f64, f64) {
    (image.width as f64 / ppm, image.height as f64 / ppm)
}

/// Frame pacing for a detector running at a fixed rate.
#[derive(Debug, Clone)]
pub struct DetectorClock {
    period_ms: f64,
    next_frame_ms: f64,
}

impl DetectorClock {
    pub fn new(profile: &DetectorProfile, start_ms: u64) -> Self {
        Self { period_ms: profile.frame_period_ms(), next_frame_ms: start_ms as f64 }
    }

    /// True when a frame completes at or before `now_ms`; at most one frame per call.
    pub fn poll(&mut self, now_ms: u64) -> bool {
        if (now_ms as f64) + 1e-9 < self.next_frame_ms {
            return false;
        }
        self.next_frame_ms += self.period_ms;
        // A slow caller never accumulates a backlog of frames.
        if self.next_frame_ms < now_ms as f64 {
            self.next_frame_ms = now_ms as f64 + self.period_ms;
        }
        true
    }
}

/// Angles used for the rotation equivariance checks.
pub const QUARTER_TURNS: [f64; 4] = [0.0, PI / 2.0, PI, -PI / 2.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::planar_distance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const ORIGIN: GeoPoint = GeoPoint { lat: 40.7865, lon: 29.45, alt: 0.0 };

    fn model_125_at_8m() -> ScaleModel {
        // ppm(h) = 1000 / h approximated by a line through (8, 125) flat enough for the test.
        ScaleModel::from_raw_coefficients(vec![125.0, 0.0], (3.0, 20.0)).unwrap()
    }

    fn fix_at(enu: EnuPoint, yaw: f64) -> DroneFix {
        DroneFix { position: enu_to_geodetic(&ORIGIN, &enu).unwrap(), yaw, altitude_agl: 8.0, timestamp: 42 }
    }

    fn centered(dx: f64) -> Detection {
        Detection { cx: 960.0 + dx, cy: 540.0, w: 10.0, h: 10.0, class: ObjectClass::Person, confidence: 0.9 }
    }

    #[test]
    fn center_detection_maps_to_drone_ground_point() {
        let image = ImageSize::default();
        for yaw in [0.0, 1.0, -2.5] {
            let p = detection_to_enu(&centered(0.0), &fix_at(EnuPoint::new(10.0, 20.0, 8.0), yaw), &model_125_at_8m(), image, &ORIGIN)
                .unwrap();
            assert!((p.east - 10.0).abs() < 1e-6 && (p.north - 20.0).abs() < 1e-6, "{p:?}");
            assert_eq!(p.up, 0.0);
        }
    }

    #[test]
    fn offset_right_rotates_with_yaw() {
        let image = ImageSize::default();
        let model = model_125_at_8m();
        let p = detection_to_enu(&centered(100.0), &fix_at(EnuPoint::ORIGIN, 0.0), &model, image, &ORIGIN).unwrap();
        assert!((p.east - 0.8).abs() < 1e-6 && p.north.abs() < 1e-6, "{p:?}");
        let p = detection_to_enu(&centered(100.0), &fix_at(EnuPoint::ORIGIN, PI / 2.0), &model, image, &ORIGIN).unwrap();
        assert!(p.east.abs() < 1e-6 && (p.north - 0.8).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn image_up_is_forward() {
        let image = ImageSize::default();
        let d = Detection { cy: 540.0 - 125.0, ..centered(0.0) };
        let p = detection_to_enu(&d, &fix_at(EnuPoint::ORIGIN, 0.0), &model_125_at_8m(), image, &ORIGIN).unwrap();
        assert!((p.north - 1.0).abs() < 1e-6 && p.east.abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn report_filters_low_confidence() {
        let image = ImageSize::default();
        let fix = fix_at(EnuPoint::ORIGIN, 0.0);
        let model = model_125_at_8m();
        let low = Detection { confidence: 0.3, ..centered(0.0) };
        assert!(to_report(&low, &fix, &model, image, &ORIGIN, DEFAULT_CONFIDENCE_FLOOR).unwrap().is_none());
        let r = to_report(&centered(0.0), &fix, &model, image, &ORIGIN, DEFAULT_CONFIDENCE_FLOOR).unwrap().unwrap();
        assert!((r.position.lat - ORIGIN.lat).abs() < 1e-12 && (r.position.lon - ORIGIN.lon).abs() < 1e-12);
        assert_eq!(r.source_ts, 42);
        assert_eq!(r.class, ObjectClass::Person);
    }

    #[test]
    fn out_of_range_altitude_propagates() {
        let mut fix = fix_at(EnuPoint::ORIGIN, 0.0);
        fix.altitude_agl = 100.0;
        let err = detection_to_enu(&centered(0.0), &fix, &model_125_at_8m(), ImageSize::default(), &ORIGIN).unwrap_err();
        assert!(matches!(err, GeolocateError::Scale(ScaleError::OutOfRange { .. })));
    }

    #[test]
    fn table_presets() {
        let presets = builtin_presets();
        assert_eq!(presets.len(), 8);
        let m7 = select_profile(&presets, "YoloLC-192", Processor::M7).unwrap();
        assert_eq!(m7.fps, 0.85);
        assert_eq!(m7.input_size, 192);
        let a72 = select_profile(&presets, "yololc-192", "A72".parse().unwrap()).unwrap();
        assert_eq!(a72.fps, 257.9);
        assert!(select_profile(&presets, "nope", Processor::M7).is_err());
        assert!("gpu".parse::<Processor>().is_err());
    }

    #[test]
    fn detector_clock_paces_frames() {
        let profile = DetectorProfile { name: "t".into(), fps: 0.85, input_size: 192 };
        let mut clock = DetectorClock::new(&profile, 0);
        let frames = (0..=10_000u64).step_by(100).filter(|&t| clock.poll(t)).count();
        // Frames at 0, 1176, 2353, ... , 9412 ms.
        assert_eq!(frames, 9);
    }

    #[test]
    fn actor_below_drone_detected_at_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let actors = [GroundActor { position: EnuPoint::planar(5.0, 5.0), class: ObjectClass::Person }];
        let d = simulate_detections(&actors, EnuPoint::new(5.0, 5.0, 8.0), 0.3, 125.0, ImageSize::default(), &NoiseConfig::noiseless(), &mut rng);
        assert_eq!(d.len(), 1);
        assert!((d[0].cx - 960.0).abs() < 1e-9 && (d[0].cy - 540.0).abs() < 1e-9);
        assert!(d[0].validate(ImageSize::default()).is_ok());
    }

    #[test]
    fn actors_outside_footprint_not_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (fw, fh) = footprint_m(ImageSize::default(), 125.0);
        let actors = [
            GroundActor { position: EnuPoint::planar(fw / 2.0 + 0.1, 0.0), class: ObjectClass::Person },
            GroundActor { position: EnuPoint::planar(0.0, fh / 2.0 + 0.1), class: ObjectClass::Person },
        ];
        let d = simulate_detections(&actors, EnuPoint::new(0.0, 0.0, 8.0), 0.0, 125.0, ImageSize::default(), &NoiseConfig::noiseless(), &mut rng);
        assert!(d.is_empty());
    }

    #[test]
    fn noiseless_roundtrip_any_yaw() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = model_125_at_8m();
        let image = ImageSize::default();
        for i in 0..200 {
            let yaw = -PI + i as f64 * 0.031;
            let drone = EnuPoint::new(3.0, -4.0, 8.0);
            let actor = EnuPoint::planar(3.0 + rng.random_range(-3.0..3.0), -4.0 + rng.random_range(-3.0..3.0));
            let dets = simulate_detections(
                &[GroundActor { position: actor, class: ObjectClass::Cone }],
                drone,
                yaw,
                125.0,
                image,
                &NoiseConfig::noiseless(),
                &mut rng,
            );
            for d in dets {
                let back = detection_to_enu(&d, &fix_at(drone, yaw), &model, image, &ORIGIN).unwrap();
                assert!(planar_distance(&back, &actor) < 1e-6);
            }
        }
    }
}
