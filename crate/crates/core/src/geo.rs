//! WGS84 geodetic positions, the local East-North-Up frame anchored at a site
//! origin, and planar helpers used by everything that lives on the ground plane.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS84 semi-major axis in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

/// Largest origin-to-point separation for which the tangent plane is accepted.
pub const MAX_LOCAL_RANGE_M: f64 = 100_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("non-finite coordinate component")]
    NonFinite,
    #[error("point is {0:.0} m from the origin, beyond the local tangent-plane range")]
    OutOfLocalRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub alt: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64, alt: f64) -> Result<Self, GeoError> {
        let p = Self { lat, lon, alt };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.lat.is_finite() && self.lon.is_finite() && self.alt.is_finite()) {
            return Err(GeoError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(GeoError::Latitude(self.lat));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(GeoError::Longitude(self.lon));
        }
        Ok(())
    }

    /// Earth-centered, Earth-fixed coordinates in meters.
    pub fn to_ecef(&self) -> [f64; 3] {
        let (sin_lat, cos_lat) = self.lat.to_radians().sin_cos();
        let (sin_lon, cos_lon) = self.lon.to_radians().sin_cos();
        let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
        [
            (n + self.alt) * cos_lat * cos_lon,
            (n + self.alt) * cos_lat * sin_lon,
            (n * (1.0 - WGS84_E2) + self.alt) * sin_lat,
        ]
    }

    /// Inverse of [`GeoPoint::to_ecef`] (Heikkinen's closed form followed by
    /// one Newton polish of latitude, good to well below a micrometer).
    pub fn from_ecef(ecef: [f64; 3]) -> Self {
        let [x, y, z] = ecef;
        let a = WGS84_A;
        let b = a * (1.0 - WGS84_F);
        let e2 = WGS84_E2;
        let ep2 = (a * a - b * b) / (b * b);
        let p = x.hypot(y);
        let lon = y.atan2(x);

        if p < 1e-9 {
            // On the polar axis.
            let lat = if z >= 0.0 { 90.0 } else { -90.0 };
            return Self { lat, lon: 0.0, alt: z.abs() - b };
        }

        let f = 54.0 * b * b * z * z;
        let g = p * p + (1.0 - e2) * z * z - e2 * (a * a - b * b);
        let c = e2 * e2 * f * p * p / (g * g * g);
        let s = (1.0 + c + (c * c + 2.0 * c).sqrt()).cbrt();
        let k = s + 1.0 + 1.0 / s;
        let pp = f / (3.0 * k * k * g * g);
        let q = (1.0 + 2.0 * e2 * e2 * pp).sqrt();
        let r0 = -(pp * e2 * p) / (1.0 + q)
            + (0.5 * a * a * (1.0 + 1.0 / q)
                - pp * (1.0 - e2) * z * z / (q * (1.0 + q))
                - 0.5 * pp * p * p)
                .max(0.0)
                .sqrt();
        let u = ((p - e2 * r0).powi(2) + z * z).sqrt();
        let v = ((p - e2 * r0).powi(2) + (1.0 - e2) * z * z).sqrt();
        let z0 = b * b * z / (a * v);
        let alt = u * (1.0 - b * b / (a * v));
        let mut lat = (z + ep2 * z0).atan2(p);

        // Newton step on latitude using the exact forward relation.
        let (sin_lat, cos_lat) = lat.sin_cos();
        let n = a / (1.0 - e2 * sin_lat * sin_lat).sqrt();
        let h = p * cos_lat + z * sin_lat - a * a / n;
        let refined = (z / p * (1.0 - e2 * n / (n + h)).recip()).atan();
        if refined.is_finite() {
            lat = refined;
        }
        let (sin_lat, cos_lat) = lat.sin_cos();
        let n = a / (1.0 - e2 * sin_lat * sin_lat).sqrt();
        let alt_refined = p * cos_lat + z * sin_lat - a * a / n;
        let alt = if alt_refined.is_finite() { alt_refined } else { alt };

        Self { lat: lat.to_degrees(), lon: lon.to_degrees(), alt }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnuPoint {
    pub east: f64,
    pub north: f64,
    #[serde(default)]
    pub up: f64,
}

impl EnuPoint {
    pub const ORIGIN: EnuPoint = EnuPoint { east: 0.0, north: 0.0, up: 0.0 };

    pub const fn new(east: f64, north: f64, up: f64) -> Self {
        Self { east, north, up }
    }

    /// Ground-plane point (up = 0).
    pub const fn planar(east: f64, north: f64) -> Self {
        Self { east, north, up: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.east.is_finite() && self.north.is_finite() && self.up.is_finite()
    }

    pub fn with_up(self, up: f64) -> Self {
        Self { up, ..self }
    }

    pub fn ground(self) -> Self {
        self.with_up(0.0)
    }

    /// Linear interpolation in the horizontal plane; `up` is interpolated too.
    pub fn lerp(self, other: EnuPoint, t: f64) -> EnuPoint {
        EnuPoint {
            east: self.east + (other.east - self.east) * t,
            north: self.north + (other.north - self.north) * t,
            up: self.up + (other.up - self.up) * t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub position: EnuPoint,
    /// Counter-clockwise from east, in (-pi, pi].
    pub yaw: f64,
}

impl Pose2D {
    pub fn new(position: EnuPoint, yaw: f64) -> Self {
        Self { position, yaw: normalize_angle(yaw) }
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

fn enu_basis(origin: &GeoPoint) -> [[f64; 3]; 3] {
    let (sin_lat, cos_lat) = origin.lat.to_radians().sin_cos();
    let (sin_lon, cos_lon) = origin.lon.to_radians().sin_cos();
    [
        [-sin_lon, cos_lon, 0.0],
        [-sin_lat * cos_lon, -sin_lat * sin_lon, cos_lat],
        [cos_lat * cos_lon, cos_lat * sin_lon, sin_lat],
    ]
}

/// ENU coordinates of `p` about `origin`, through ECEF.
pub fn geodetic_to_enu(origin: &GeoPoint, p: &GeoPoint) -> Result<EnuPoint, GeoError> {
    origin.validate()?;
    p.validate()?;
    if origin == p {
        return Ok(EnuPoint::ORIGIN);
    }
    let o = origin.to_ecef();
    let q = p.to_ecef();
    let d = [q[0] - o[0], q[1] - o[1], q[2] - o[2]];
    let range = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if range >= MAX_LOCAL_RANGE_M {
        return Err(GeoError::OutOfLocalRange(range));
    }
    let r = enu_basis(origin);
    let dot = |row: [f64; 3]| row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
    Ok(EnuPoint { east: dot(r[0]), north: dot(r[1]), up: dot(r[2]) })
}

pub fn enu_to_geodetic(origin: &GeoPoint, p: &EnuPoint) -> Result<GeoPoint, GeoError> {
    origin.validate()?;
    if !p.is_finite() {
        return Err(GeoError::NonFinite);
    }
    if *p == EnuPoint::ORIGIN {
        return Ok(*origin);
    }
    let o = origin.to_ecef();
    let r = enu_basis(origin);
    let mut ecef = o;
    for (axis, value) in ecef.iter_mut().enumerate() {
        *value += r[0][axis] * p.east + r[1][axis] * p.north + r[2][axis] * p.up;
    }
    Ok(GeoPoint::from_ecef(ecef))
}

/// Euclidean distance in the east-north plane.
pub fn planar_distance(a: &EnuPoint, b: &EnuPoint) -> f64 {
    (a.east - b.east).hypot(a.north - b.north)
}
