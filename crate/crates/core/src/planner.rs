//! Voronoi roadmap over the site's free space and A* search on it.
//!
//! Obstacle outlines, dynamic-obstacle circles and the site boundary are
//! sampled into point sites. Circumcenters of their Delaunay triangles are the
//! Voronoi vertices; two vertices are joined when their triangles share an
//! edge. Vertices and edges are then filtered by their exact clearance against
//! the true geometry, and the largest connected component is kept.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use spade::{DelaunayTriangulation, Point2, Triangulation};
use thiserror::Error;

use crate::geo::{planar_distance, EnuPoint};
use crate::geometry::{self, circle_polygon, point_in_polygon, point_segment_distance, sample_outline};
use crate::sitemap::{DynamicObstacle, SiteMap};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("site fully blocked: no free roadmap node survives the clearance filter")]
    SiteFullyBlocked,
    #[error("{which} position ({east:.2}, {north:.2}) is infeasible: {reason}")]
    Placement { which: Endpoint, east: f64, north: f64, reason: &'static str },
    #[error("no route between start and goal")]
    Unreachable,
    #[error("triangulation failed: {0}")]
    Triangulation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Start,
    Goal,
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Endpoint::Start => "start",
            Endpoint::Goal => "goal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub clearance_floor: f64,
    /// Distance between point sites along outlines.
    pub site_spacing: f64,
    /// Polygon resolution of dynamic-obstacle circles.
    pub circle_segments: usize,
    /// Roadmap nodes tried when attaching start and goal.
    pub connect_candidates: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { clearance_floor: 2.0, site_spacing: 0.5, circle_segments: 16, connect_candidates: 5 }
    }
}

/// Exact distance from points and segments to the nearest obstacle geometry.
#[derive(Debug, Clone, Copy)]
pub struct ClearanceField<'a> {
    pub map: &'a SiteMap,
    pub obstacles: &'a [DynamicObstacle],
}

impl<'a> ClearanceField<'a> {
    pub fn new(map: &'a SiteMap, obstacles: &'a [DynamicObstacle]) -> Self {
        Self { map, obstacles }
    }

    /// Zero when `p` is outside the boundary or inside an obstacle.
    pub fn at_point(&self, p: &EnuPoint) -> f64 {
        if !point_in_polygon(p, &self.map.boundary) {
            return 0.0;
        }
        let mut best = geometry::distance_to_outline(p, &self.map.boundary);
        for poly in &self.map.static_obstacles {
            if point_in_polygon(p, poly) {
                return 0.0;
            }
            best = best.min(geometry::distance_to_outline(p, poly));
        }
        for o in self.obstacles {
            best = best.min(planar_distance(p, &o.position) - o.radius);
        }
        best.max(0.0)
    }

    /// Minimum clearance along the closed segment `ab`.
    pub fn along_segment(&self, a: &EnuPoint, b: &EnuPoint) -> f64 {
        let ends = self.at_point(a).min(self.at_point(b));
        if ends <= 0.0 {
            return 0.0;
        }
        let mut best = ends.min(geometry::segment_outline_distance(a, b, &self.map.boundary));
        for poly in &self.map.static_obstacles {
            best = best.min(geometry::segment_outline_distance(a, b, poly));
        }
        for o in self.obstacles {
            best = best.min(point_segment_distance(&o.position, a, b) - o.radius);
        }
        best.max(0.0)
    }

    pub fn along_polyline(&self, points: &[EnuPoint]) -> f64 {
        match points {
            [] => f64::INFINITY,
            [p] => self.at_point(p),
            _ => points.windows(2).map(|w| self.along_segment(&w[0], &w[1])).fold(f64::INFINITY, f64::min),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub position: EnuPoint,
    pub clearance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
    pub min_clearance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoronoiGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub generation: u64,
    pub clearance_floor: f64,
    #[serde(skip)]
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl VoronoiGraph {
    fn new(nodes: Vec<GraphNode>, edges: Vec<GraphEdge>, generation: u64, clearance_floor: f64) -> Self {
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for e in &edges {
            adjacency[e.a].push((e.b, e.length));
            adjacency[e.b].push((e.a, e.length));
        }
        Self { nodes, edges, generation, clearance_floor, adjacency }
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.adjacency[node]
    }
}

/// Point sites for the Voronoi construction.
pub fn generator_sites(map: &SiteMap, obstacles: &[DynamicObstacle], cfg: &PlannerConfig) -> Vec<EnuPoint> {
    let mut sites = sample_outline(&map.boundary, cfg.site_spacing);
    for poly in &map.static_obstacles {
        sites.extend(sample_outline(poly, cfg.site_spacing));
    }
    for o in obstacles {
        let ring = circle_polygon(&o.position, o.radius, cfg.circle_segments.max(3));
        sites.extend(sample_outline(&ring, cfg.site_spacing));
    }
    sites
}

fn quantize(p: &EnuPoint) -> (i64, i64) {
    ((p.east * 1e6).round() as i64, (p.north * 1e6).round() as i64)
}

pub fn build_graph(
    map: &SiteMap,
    obstacles: &[DynamicObstacle],
    cfg: &PlannerConfig,
    generation: u64,
) -> Result<VoronoiGraph, PlanError> {
    let field = ClearanceField::new(map, obstacles);
    let sites = generator_sites(map, obstacles, cfg);
    let triangulation = DelaunayTriangulation::<Point2<f64>>::bulk_load(
        sites.iter().map(|p| Point2::new(p.east, p.north)).collect(),
    )
    .map_err(|e| PlanError::Triangulation(format!("{e:?}")))?;

    let floor = cfg.clearance_floor;
    let mut nodes: Vec<GraphNode> = Vec::new();
    let mut by_position: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    // Face index -> surviving node index.
    let mut face_node: BTreeMap<usize, usize> = BTreeMap::new();
    for face in triangulation.inner_faces() {
        let c = face.circumcenter();
        let p = EnuPoint::planar(c.x, c.y);
        if !p.is_finite() {
            continue;
        }
        let clearance = field.at_point(&p);
        if clearance < floor {
            continue;
        }
        let index = *by_position.entry(quantize(&p)).or_insert_with(|| {
            nodes.push(GraphNode { position: p, clearance });
            nodes.len() - 1
        });
        face_node.insert(face.fix().index(), index);
    }

    let mut edge_set: BTreeSet<(usize, usize)> = BTreeSet::new();
    for edge in triangulation.undirected_edges() {
        let directed = edge.as_directed();
        let (Some(left), Some(right)) = (directed.face().as_inner(), directed.rev().face().as_inner()) else {
            continue;
        };
        let (Some(&a), Some(&b)) = (face_node.get(&left.fix().index()), face_node.get(&right.fix().index())) else {
            continue;
        };
        if a != b {
            edge_set.insert((a.min(b), a.max(b)));
        }
    }
    let mut edges = Vec::with_capacity(edge_set.len());
    for (a, b) in edge_set {
        let (pa, pb) = (nodes[a].position, nodes[b].position);
        let min_clearance = field.along_segment(&pa, &pb);
        if min_clearance >= floor {
            edges.push(GraphEdge { a, b, length: planar_distance(&pa, &pb), min_clearance });
        }
    }

    let (nodes, edges) = largest_component(nodes, edges);
    if nodes.is_empty() {
        return Err(PlanError::SiteFullyBlocked);
    }
    Ok(VoronoiGraph::new(nodes, edges, generation, floor))
}

/// Keeps the biggest connected component; equal sizes prefer the one holding the lowest node index.
fn largest_component(nodes: Vec<GraphNode>, edges: Vec<GraphEdge>) -> (Vec<GraphNode>, Vec<GraphEdge>) {
    let n = nodes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for e in &edges {
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        *sizes.entry(r).or_default() += 1;
    }
    // Roots are the smallest index of their component, so iteration order breaks ties.
    let Some(root) = sizes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(r, _)| *r) else {
        return (Vec::new(), Vec::new());
    };
    let mut remap = vec![usize::MAX; n];
    let mut kept = Vec::new();
    for (i, node) in nodes.into_iter().enumerate() {
        if find(&mut parent, i) == root {
            remap[i] = kept.len();
            kept.push(node);
        }
    }
    let edges = edges
        .into_iter()
        .filter(|e| remap[e.a] != usize::MAX)
        .map(|e| GraphEdge { a: remap[e.a], b: remap[e.b], ..e })
        .collect();
    (kept, edges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPath {
    pub waypoints: Vec<EnuPoint>,
    pub length: f64,
    pub min_clearance: f64,
    pub graph_generation: u64,
}

impl PlannedPath {
    pub fn from_waypoints(waypoints: Vec<EnuPoint>, min_clearance: f64, graph_generation: u64) -> Self {
        let length = polyline_length(&waypoints);
        Self { waypoints, length, min_clearance, graph_generation }
    }

    pub fn start(&self) -> Option<&EnuPoint> {
        self.waypoints.first()
    }

    pub fn goal(&self) -> Option<&EnuPoint> {
        self.waypoints.last()
    }
}

pub fn polyline_length(points: &[EnuPoint]) -> f64 {
    points.windows(2).map(|w| planar_distance(&w[0], &w[1])).sum()
}

/// The roadmap plus start and goal nodes, as searched by A*.
#[derive(Debug, Clone)]
pub struct AugmentedGraph {
    pub positions: Vec<EnuPoint>,
    pub adjacency: Vec<Vec<(usize, f64)>>,
    pub start: usize,
    pub goal: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frontier {
    f: f64,
    g: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on f, then lower node index.
        other.f.total_cmp(&self.f).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Node expanded by A*, with the heuristic value it was expanded under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expansion {
    pub node: usize,
    pub g: f64,
    pub h: f64,
}

impl AugmentedGraph {
    pub fn heuristic(&self, node: usize) -> f64 {
        planar_distance(&self.positions[node], &self.positions[self.goal])
    }

    /// Optimal node sequence and its cost.
    pub fn astar(&self) -> Option<(Vec<usize>, f64)> {
        self.astar_traced(&mut Vec::new())
    }

    pub fn astar_traced(&self, trace: &mut Vec<Expansion>) -> Option<(Vec<usize>, f64)> {
        let n = self.positions.len();
        let mut best_g = vec![f64::INFINITY; n];
        let mut came_from = vec![usize::MAX; n];
        let mut closed = vec![false; n];
        let mut heap = BinaryHeap::new();
        best_g[self.start] = 0.0;
        heap.push(Frontier { f: self.heuristic(self.start), g: 0.0, node: self.start });
        while let Some(Frontier { g, node, .. }) = heap.pop() {
            if closed[node] || g > best_g[node] {
                continue;
            }
            closed[node] = true;
            trace.push(Expansion { node, g, h: self.heuristic(node) });
            if node == self.goal {
                let mut path = vec![node];
                let mut cur = node;
                while came_from[cur] != usize::MAX {
                    cur = came_from[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some((path, g));
            }
            for &(next, w) in &self.adjacency[node] {
                if closed[next] {
                    continue;
                }
                let candidate = g + w;
                let improves = candidate < best_g[next] || (candidate == best_g[next] && node < came_from[next]);
                if improves {
                    best_g[next] = candidate;
                    came_from[next] = node;
                    heap.push(Frontier { f: candidate + self.heuristic(next), g: candidate, node: next });
                }
            }
        }
        None
    }
}

/// Result of a planning query with the intermediate products kept for inspection.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub path: PlannedPath,
    /// Waypoints before shortcutting.
    pub raw_waypoints: Vec<EnuPoint>,
    /// A* cost on the augmented graph.
    pub raw_cost: f64,
    pub augmented: AugmentedGraph,
}

fn check_endpoint(field: &ClearanceField<'_>, p: &EnuPoint, which: Endpoint, floor: f64) -> Result<(), PlanError> {
    let reason = if !field.map.contains(p) {
        Some("outside the site boundary")
    } else if field.at_point(p) < floor {
        Some("closer than the clearance floor to an obstacle or the boundary")
    } else {
        None
    };
    match reason {
        Some(reason) => Err(PlanError::Placement { which, east: p.east, north: p.north, reason }),
        None => Ok(()),
    }
}

/// Index of the nearest roadmap node among the closest `k` that `p` reaches in a straight, clear line.
fn attach(graph: &VoronoiGraph, field: &ClearanceField<'_>, p: &EnuPoint, k: usize, floor: f64) -> Option<usize> {
    let mut candidates: Vec<(f64, usize)> =
        graph.nodes.iter().enumerate().map(|(i, n)| (planar_distance(p, &n.position), i)).collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates
        .into_iter()
        .take(k)
        .find(|(_, i)| field.along_segment(p, &graph.nodes[*i].position) >= floor)
        .map(|(_, i)| i)
}

pub fn augment(
    graph: &VoronoiGraph,
    field: &ClearanceField<'_>,
    start: EnuPoint,
    goal: EnuPoint,
    cfg: &PlannerConfig,
) -> Result<AugmentedGraph, PlanError> {
    let floor = cfg.clearance_floor;
    let start_link = attach(graph, field, &start, cfg.connect_candidates, floor).ok_or(PlanError::Unreachable)?;
    let goal_link = attach(graph, field, &goal, cfg.connect_candidates, floor).ok_or(PlanError::Unreachable)?;
    let n = graph.nodes.len();
    let mut positions: Vec<EnuPoint> = graph.nodes.iter().map(|n| n.position).collect();
    positions.push(start.ground());
    positions.push(goal.ground());
    let mut adjacency: Vec<Vec<(usize, f64)>> = graph.adjacency.clone();
    adjacency.push(Vec::new());
    adjacency.push(Vec::new());
    let mut link = |a: usize, b: usize| {
        let w = planar_distance(&positions[a], &positions[b]);
        adjacency[a].push((b, w));
        adjacency[b].push((a, w));
    };
    link(n, start_link);
    link(n + 1, goal_link);
    Ok(AugmentedGraph { positions, adjacency, start: n, goal: n + 1 })
}

pub fn plan(
    graph: &VoronoiGraph,
    map: &SiteMap,
    obstacles: &[DynamicObstacle],
    start: EnuPoint,
    goal: EnuPoint,
    cfg: &PlannerConfig,
) -> Result<PlanOutcome, PlanError> {
    let field = ClearanceField::new(map, obstacles);
    let floor = cfg.clearance_floor;
    check_endpoint(&field, &start, Endpoint::Start, floor)?;
    check_endpoint(&field, &goal, Endpoint::Goal, floor)?;
    let augmented = augment(graph, &field, start, goal, cfg)?;
    let (nodes, raw_cost) = augmented.astar().ok_or(PlanError::Unreachable)?;
    let raw_waypoints: Vec<EnuPoint> = nodes.iter().map(|&i| augmented.positions[i]).collect();
    let raw = PlannedPath::from_waypoints(raw_waypoints.clone(), field.along_polyline(&raw_waypoints), graph.generation);
    let path = simplify(&raw, map, obstacles, floor);
    Ok(PlanOutcome { path, raw_waypoints, raw_cost, augmented })
}

/// Greedy forward shortcutting: from each kept waypoint jump to the farthest
/// later waypoint whose straight segment keeps `clearance_floor`.
pub fn simplify(path: &PlannedPath, map: &SiteMap, obstacles: &[DynamicObstacle], clearance_floor: f64) -> PlannedPath {
    let w = &path.waypoints;
    if w.len() <= 2 {
        return path.clone();
    }
    let field = ClearanceField::new(map, obstacles);
    let mut kept = vec![w[0]];
    let mut min_clearance = f64::INFINITY;
    let mut i = 0;
    while i < w.len() - 1 {
        let mut next = i + 1;
        let mut next_clearance = field.along_segment(&w[i], &w[i + 1]);
        for j in (i + 2..w.len()).rev() {
            let c = field.along_segment(&w[i], &w[j]);
            if c >= clearance_floor {
                next = j;
                next_clearance = c;
                break;
            }
        }
        min_clearance = min_clearance.min(next_clearance);
        kept.push(w[next]);
        i = next;
    }
    PlannedPath::from_waypoints(kept, min_clearance, path.graph_generation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_map(size: f64, obstacles: &str) -> SiteMap {
        SiteMap::parse(&format!(
            r#"{{"origin": {{"lat": 40.0, "lon": 29.0}},
                "boundary": [[0,0],[{size},0],[{size},{size}],[0,{size}]],
                "static_obstacles": [{obstacles}]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn empty_map_nodes_respect_floor() {
        let map = square_map(50.0, "");
        let cfg = PlannerConfig::default();
        let g = build_graph(&map, &[], &cfg, 1).unwrap();
        assert!(!g.nodes.is_empty());
        for n in &g.nodes {
            assert!(geometry::distance_to_outline(&n.position, &map.boundary) >= cfg.clearance_floor);
        }
        for e in &g.edges {
            assert!(e.min_clearance >= cfg.clearance_floor);
            assert!((e.length - planar_distance(&g.nodes[e.a].position, &g.nodes[e.b].position)).abs() < 1e-9);
        }
    }

    #[test]
    fn open_square_path_is_nearly_straight() {
        let map = square_map(50.0, "");
        let cfg = PlannerConfig::default();
        let g = build_graph(&map, &[], &cfg, 1).unwrap();
        let (s, t) = (EnuPoint::planar(5.0, 5.0), EnuPoint::planar(45.0, 45.0));
        let out = plan(&g, &map, &[], s, t, &cfg).unwrap();
        assert!(out.path.length <= 1.05 * planar_distance(&s, &t), "{}", out.path.length);
        assert_eq!(out.path.waypoints.first(), Some(&s));
        assert_eq!(out.path.waypoints.last(), Some(&t));
    }

    #[test]
    fn goal_inside_obstacle_is_placement_error() {
        let map = square_map(50.0, "[[20,20],[30,20],[30,30],[20,30]]");
        let cfg = PlannerConfig::default();
        let g = build_graph(&map, &[], &cfg, 1).unwrap();
        let err = plan(&g, &map, &[], EnuPoint::planar(5.0, 5.0), EnuPoint::planar(25.0, 25.0), &cfg).unwrap_err();
        assert!(matches!(err, PlanError::Placement { which: Endpoint::Goal, .. }));
    }

    #[test]
    fn fully_blocked_site() {
        let map = square_map(10.0, "[[0.5,0.5],[9.5,0.5],[9.5,9.5],[0.5,9.5]]");
        assert_eq!(build_graph(&map, &[], &PlannerConfig::default(), 1).unwrap_err(), PlanError::SiteFullyBlocked);
    }

    #[test]
    fn simplify_edge_cases() {
        let map = square_map(50.0, "");
        let two = PlannedPath::from_waypoints(vec![EnuPoint::planar(5.0, 5.0), EnuPoint::planar(10.0, 5.0)], 2.0, 0);
        assert_eq!(simplify(&two, &map, &[], 2.0), two);
        let three = PlannedPath::from_waypoints(
            vec![EnuPoint::planar(5.0, 5.0), EnuPoint::planar(10.0, 5.0), EnuPoint::planar(15.0, 5.0)],
            2.0,
            0,
        );
        let s = simplify(&three, &map, &[], 2.0);
        assert_eq!(s.waypoints, vec![EnuPoint::planar(5.0, 5.0), EnuPoint::planar(15.0, 5.0)]);
        assert!((s.length - 10.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_paths() {
        let map = square_map(50.0, "[[20,10],[30,10],[30,40],[20,40]]");
        let cfg = PlannerConfig::default();
        let a = build_graph(&map, &[], &cfg, 1).unwrap();
        let b = build_graph(&map, &[], &cfg, 1).unwrap();
        assert_eq!(a, b);
        let (s, t) = (EnuPoint::planar(5.0, 25.0), EnuPoint::planar(45.0, 25.0));
        assert_eq!(plan(&a, &map, &[], s, t, &cfg).unwrap().path, plan(&b, &map, &[], s, t, &cfg).unwrap().path);
    }
}
