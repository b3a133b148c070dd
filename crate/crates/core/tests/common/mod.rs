//! Shared helpers for the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sitefleet_core::geo::EnuPoint;
use sitefleet_core::geometry::{distance_to_outline, point_in_polygon};
use sitefleet_core::planner::ClearanceField;
use sitefleet_core::sitemap::{DynamicObstacle, MapDocument, SiteMap};

pub const ORIGIN_LAT: f64 = 40.7865;
pub const ORIGIN_LON: f64 = 29.45;

/// A 100 m (east) by 50 m (north) site centred on the origin.
pub fn site_document() -> MapDocument {
    serde_json::from_str(&format!(
        r#"{{"origin": {{"lat": {ORIGIN_LAT}, "lon": {ORIGIN_LON}}},
            "boundary": [[-50,-25],[50,-25],[50,25],[-50,25]]}}"#
    ))
    .unwrap()
}

/// Rotated rectangle as a counter-clockwise ring.
pub fn rectangle(center: (f64, f64), half: (f64, f64), angle: f64) -> Vec<[f64; 2]> {
    let (s, c) = angle.sin_cos();
    [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
        .iter()
        .map(|(u, v)| {
            let (x, y) = (u * half.0, v * half.1);
            [center.0 + x * c - y * s, center.1 + x * s + y * c]
        })
        .collect()
}

pub struct Scene {
    pub map: SiteMap,
    pub start: EnuPoint,
    pub goal: EnuPoint,
}

fn free_point(rng: &mut ChaCha8Rng, map: &SiteMap, floor: f64) -> EnuPoint {
    let field = ClearanceField::new(map, &[]);
    loop {
        let p = EnuPoint::planar(rng.random_range(-48.0..48.0), rng.random_range(-23.0..23.0));
        if field.at_point(&p) >= floor {
            return p;
        }
    }
}

/// Seeded random scene: 3-8 rectangular obstacles on the 100 x 50 m site.
pub fn random_scene(seed: u64, floor: f64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut doc = site_document();
    let count = rng.random_range(3..=8);
    for _ in 0..count {
        let center = (rng.random_range(-40.0..40.0), rng.random_range(-17.0..17.0));
        let half = (rng.random_range(1.0..6.0), rng.random_range(1.0..6.0));
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        doc.static_obstacles.push(rectangle(center, half, angle));
    }
    let map = SiteMap::from_document(doc).unwrap();
    let start = free_point(&mut rng, &map, floor);
    let goal = free_point(&mut rng, &map, floor);
    Scene { map, start, goal }
}

/// Distance from `p` to the nearest obstacle or boundary, independent of the
/// planner's clearance code: negative inside obstacles or outside the site.
pub fn oracle_clearance(p: &EnuPoint, map: &SiteMap, dynamic: &[DynamicObstacle]) -> f64 {
    if !point_in_polygon(p, &map.boundary) {
        return -1.0;
    }
    let mut d = distance_to_outline(p, &map.boundary);
    for poly in &map.static_obstacles {
        if point_in_polygon(p, poly) {
            return -1.0;
        }
        d = d.min(distance_to_outline(p, poly));
    }
    for o in dynamic {
        d = d.min((p.east - o.position.east).hypot(p.north - o.position.north) - o.radius);
    }
    d
}

/// Minimum oracle clearance over points sampled every `step` meters along the polyline.
pub fn sampled_min_clearance(points: &[EnuPoint], map: &SiteMap, dynamic: &[DynamicObstacle], step: f64) -> f64 {
    let mut worst = f64::INFINITY;
    for w in points.windows(2) {
        let len = (w[1].east - w[0].east).hypot(w[1].north - w[0].north);
        let n = (len / step).ceil().max(1.0) as usize;
        for k in 0..=n {
            worst = worst.min(oracle_clearance(&w[0].lerp(w[1], k as f64 / n as f64), map, dynamic));
        }
    }
    worst
}
