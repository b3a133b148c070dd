//! Planar geometry on the east-north plane. `up` is ignored throughout.

use crate::geo::EnuPoint;

#[inline]
fn sub(a: &EnuPoint, b: &EnuPoint) -> (f64, f64) {
    (a.east - b.east, a.north - b.north)
}

#[inline]
fn cross(o: &EnuPoint, a: &EnuPoint, b: &EnuPoint) -> f64 {
    let (ax, ay) = sub(a, o);
    let (bx, by) = sub(b, o);
    ax * by - ay * bx
}

/// Closest point on segment `ab` to `p`.
pub fn closest_on_segment(p: &EnuPoint, a: &EnuPoint, b: &EnuPoint) -> EnuPoint {
    let (dx, dy) = sub(b, a);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return *a;
    }
    let (px, py) = sub(p, a);
    let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
    EnuPoint::planar(a.east + t * dx, a.north + t * dy)
}

pub fn point_segment_distance(p: &EnuPoint, a: &EnuPoint, b: &EnuPoint) -> f64 {
    let c = closest_on_segment(p, a, b);
    (p.east - c.east).hypot(p.north - c.north)
}

fn on_segment(p: &EnuPoint, a: &EnuPoint, b: &EnuPoint) -> bool {
    p.east >= a.east.min(b.east)
        && p.east <= a.east.max(b.east)
        && p.north >= a.north.min(b.north)
        && p.north <= a.north.max(b.north)
}

/// Whether closed segments `ab` and `cd` share at least one point.
pub fn segments_intersect(a: &EnuPoint, b: &EnuPoint, c: &EnuPoint, d: &EnuPoint) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(a, c, d))
        || (d2 == 0.0 && on_segment(b, c, d))
        || (d3 == 0.0 && on_segment(c, a, b))
        || (d4 == 0.0 && on_segment(d, a, b))
}

pub fn segment_segment_distance(a: &EnuPoint, b: &EnuPoint, c: &EnuPoint, d: &EnuPoint) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

/// Iterator over the closed polygon's edges.
pub fn edges(poly: &[EnuPoint]) -> impl Iterator<Item = (&EnuPoint, &EnuPoint)> {
    poly.iter().zip(poly.iter().cycle().skip(1)).take(poly.len())
}

/// Signed area; positive for counter-clockwise rings.
pub fn signed_area(poly: &[EnuPoint]) -> f64 {
    edges(poly).map(|(a, b)| a.east * b.north - b.east * a.north).sum::<f64>() / 2.0
}

/// Even-odd point-in-polygon test. Points exactly on an edge may go either way.
pub fn point_in_polygon(p: &EnuPoint, poly: &[EnuPoint]) -> bool {
    let mut inside = false;
    for (a, b) in edges(poly) {
        if (a.north > p.north) != (b.north > p.north) {
            let x = a.east + (p.north - a.north) / (b.north - a.north) * (b.east - a.east);
            if p.east < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Distance from `p` to the polygon's outline.
pub fn distance_to_outline(p: &EnuPoint, poly: &[EnuPoint]) -> f64 {
    edges(poly).map(|(a, b)| point_segment_distance(p, a, b)).fold(f64::INFINITY, f64::min)
}

/// Minimum distance between segment `ab` and the polygon's outline.
pub fn segment_outline_distance(a: &EnuPoint, b: &EnuPoint, poly: &[EnuPoint]) -> f64 {
    edges(poly).map(|(c, d)| segment_segment_distance(a, b, c, d)).fold(f64::INFINITY, f64::min)
}

/// No two non-adjacent edges touch and no edge is degenerate.
pub fn is_simple(poly: &[EnuPoint]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let e: Vec<_> = edges(poly).collect();
    if e.iter().any(|(a, b)| a.east == b.east && a.north == b.north) {
        return false;
    }
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Adjacent edges may only share their common vertex.
                let (a, b) = e[i];
                let (c, d) = e[j];
                let shared = if j == i + 1 { b } else { a };
                let other_i = if j == i + 1 { a } else { b };
                let other_j = if j == i + 1 { d } else { c };
                if cross(shared, other_i, other_j) == 0.0
                    && (other_j.east - shared.east) * (other_i.east - shared.east)
                        + (other_j.north - shared.north) * (other_i.north - shared.north)
                        > 0.0
                {
                    return false;
                }
                continue;
            }
            if segments_intersect(e[i].0, e[i].1, e[j].0, e[j].1) {
                return false;
            }
        }
    }
    true
}

/// (min_east, min_north, max_east, max_north).
pub fn bounding_box(poly: &[EnuPoint]) -> (f64, f64, f64, f64) {
    poly.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p.east), b.min(p.north), c.max(p.east), d.max(p.north)),
    )
}

/// Points along the closed outline, at most `spacing` apart, starting at each vertex.
pub fn sample_outline(poly: &[EnuPoint], spacing: f64) -> Vec<EnuPoint> {
    let mut out = Vec::new();
    for (a, b) in edges(poly) {
        let len = (b.east - a.east).hypot(b.north - a.north);
        let steps = (len / spacing).ceil().max(1.0) as usize;
        for k in 0..steps {
            out.push(a.lerp(*b, k as f64 / steps as f64).ground());
        }
    }
    out
}

/// Regular `n`-gon inscribed in the circle, counter-clockwise.
pub fn circle_polygon(center: &EnuPoint, radius: f64, n: usize) -> Vec<EnuPoint> {
    (0..n)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            EnuPoint::planar(center.east + radius * t.cos(), center.north + radius * t.sin())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(e: f64, n: f64) -> EnuPoint {
        EnuPoint::planar(e, n)
    }

    fn square() -> Vec<EnuPoint> {
        vec![p(0.0, 0.0), p(10.0, 0.0), p(10.0, 10.0), p(0.0, 10.0)]
    }

    #[test]
    fn segment_distance_cases() {
        assert_eq!(point_segment_distance(&p(5.0, 3.0), &p(0.0, 0.0), &p(10.0, 0.0)), 3.0);
        assert_eq!(point_segment_distance(&p(13.0, 4.0), &p(0.0, 0.0), &p(10.0, 0.0)), 5.0);
        assert_eq!(point_segment_distance(&p(1.0, 1.0), &p(1.0, 2.0), &p(1.0, 2.0)), 1.0);
        assert_eq!(segment_segment_distance(&p(0.0, 0.0), &p(2.0, 2.0), &p(0.0, 2.0), &p(2.0, 0.0)), 0.0);
        assert_eq!(segment_segment_distance(&p(0.0, 0.0), &p(2.0, 0.0), &p(0.0, 1.0), &p(2.0, 1.0)), 1.0);
    }

    #[test]
    fn polygon_predicates() {
        let sq = square();
        assert_eq!(signed_area(&sq), 100.0);
        assert!(point_in_polygon(&p(5.0, 5.0), &sq));
        assert!(!point_in_polygon(&p(15.0, 5.0), &sq));
        assert!(is_simple(&sq));
        let bowtie = vec![p(0.0, 0.0), p(10.0, 10.0), p(10.0, 0.0), p(0.0, 10.0)];
        assert!(!is_simple(&bowtie));
        let spike = vec![p(0.0, 0.0), p(10.0, 0.0), p(5.0, 0.0), p(5.0, 5.0)];
        assert!(!is_simple(&spike));
        assert_eq!(distance_to_outline(&p(5.0, 4.0), &sq), 4.0);
    }

    #[test]
    fn outline_sampling_spacing() {
        let pts = sample_outline(&square(), 0.5);
        assert_eq!(pts.len(), 80);
        for w in pts.windows(2) {
            assert!((w[0].east - w[1].east).hypot(w[0].north - w[1].north) <= 0.5 + 1e-12);
        }
    }
}
