//! Moving trajectories between scenes: direct point transfer for short
//! motions, waypoint transfer plus grid A* replanning for long ones.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::pipeline::SceneMap;
use crate::scene::SceneBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentInfo {
    /// Waypoint indices joined by this segment.
    pub from: usize,
    pub to: usize,
    /// Grid path cost between the two waypoint cells (m).
    pub cost: f64,
    pub point_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub frame_id: String,
    pub points: Vec<[f64; 3]>,
    /// Filled in by the planner.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segments: Vec<SegmentInfo>,
    /// Configuration that produced this trajectory, when it was produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<PipelineConfig>,
}

impl Trajectory {
    pub fn new(frame_id: impl Into<String>, points: &[Point3<f64>]) -> Self {
        Trajectory {
            frame_id: frame_id.into(),
            points: points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            segments: Vec::new(),
            config: None,
        }
    }

    pub fn positions(&self) -> Vec<Point3<f64>> {
        self.points.iter().map(|p| Point3::from(*p)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("trajectory has no points"));
        }
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("trajectory point {i} is not finite")));
        }
        Ok(())
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let traj: Trajectory = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Format {
            context: context.to_string(),
            message: format!("at `{}`: {}", e.path(), e.inner()),
        })?;
        traj.validate()?;
        Ok(traj)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serializes")
    }

    /// Polyline length.
    pub fn length(&self) -> f64 {
        let pts = self.positions();
        pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }
}

pub fn transfer_short(traj: &Trajectory, map: &SceneMap) -> Result<Trajectory> {
    traj.validate()?;
    let mapped = traj
        .positions()
        .iter()
        .map(|p| map.apply(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory::new(map.provenance.reference_scene.clone(), &mapped))
}

pub type Cell = [usize; 3];

/// Axis-aligned voxel grid; `origin` is the minimum corner of cell (0,0,0).
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    origin: Point3<f64>,
    resolution: f64,
    dims: [usize; 3],
    occupied: Vec<bool>,
    inflation_radius: f64,
}

impl OccupancyGrid {
    pub fn from_cells(origin: Point3<f64>, resolution: f64, dims: [usize; 3], occupied: Vec<bool>) -> Result<Self> {
        if !(resolution > 0.0) || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("grid needs positive resolution and dimensions"));
        }
        if occupied.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::invalid("occupancy length does not match grid dimensions"));
        }
        Ok(OccupancyGrid {
            origin,
            resolution,
            dims,
            occupied,
            inflation_radius: 0.0,
        })
    }

    pub fn origin(&self) -> Point3<f64> {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn inflation_radius(&self) -> f64 {
        self.inflation_radius
    }

    pub fn cell_count(&self) -> usize {
        self.occupied.len()
    }

    pub fn index(&self, c: Cell) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        let k = index % self.dims[2];
        let j = (index / self.dims[2]) % self.dims[1];
        let i = index / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    pub fn is_occupied(&self, c: Cell) -> bool {
        self.occupied[self.index(c)]
    }

    pub fn center(&self, c: Cell) -> Point3<f64> {
        Point3::new(
            self.origin.x + (c[0] as f64 + 0.5) * self.resolution,
            self.origin.y + (c[1] as f64 + 0.5) * self.resolution,
            self.origin.z + (c[2] as f64 + 0.5) * self.resolution,
        )
    }

    /// Cell containing `p`, or `None` outside the grid.
    pub fn cell_of(&self, p: &Point3<f64>) -> Option<Cell> {
        let mut c = [0; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.resolution).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            c[a] = f as usize;
        }
        Some(c)
    }

    /// 26-neighborhood of `c` inside the grid with center-distance costs.
    pub fn neighbors(&self, c: Cell) -> impl Iterator<Item = (Cell, f64)> + '_ {
        let res = self.resolution;
        (0..27).filter(|&n| n != 13).filter_map(move |n| {
            let d = [n / 9, (n / 3) % 3, n % 3].map(|v| v as i64 - 1);
            let mut out = [0; 3];
            for a in 0..3 {
                let v = c[a] as i64 + d[a];
                if v < 0 || v >= self.dims[a] as i64 {
                    return None;
                }
                out[a] = v as usize;
            }
            let steps = d.iter().filter(|v| **v != 0).count();
            Some((out, res * (steps as f64).sqrt()))
        })
    }

    /// Nearest free cell whose center lies within `radius` of `p`; ties go
    /// to the lexicographically smallest cell.
    pub fn snap_free(&self, p: &Point3<f64>, radius: f64) -> Option<Cell> {
        let lo = |a: usize| (((p[a] - radius - self.origin[a]) / self.resolution).floor().max(0.0)) as usize;
        let hi = |a: usize| {
            let v = ((p[a] + radius - self.origin[a]) / self.resolution).floor();
            (v.max(-1.0) as i64).min(self.dims[a] as i64 - 1)
        };
        let mut best: Option<(f64, Cell)> = None;
        for i in lo(0) as i64..=hi(0) {
            for j in lo(1) as i64..=hi(1) {
                for k in lo(2) as i64..=hi(2) {
                    let c = [i as usize, j as usize, k as usize];
                    if self.is_occupied(c) {
                        continue;
                    }
                    let d = (self.center(c) - p).norm();
                    if d <= radius && best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, c));
                    }
                }
            }
        }
        best.map(|(_, c)| c)
    }
}

/// Grid over the reference points' bounds plus `margin`. A cell is occupied
/// when a point lies within `inflation_radius` of its center or inside it.
pub fn build_occupancy(scene_ref: &SceneBundle, resolution: f64, inflation_radius: f64, margin: f64) -> Result<OccupancyGrid> {
    build_occupancy_from_points(&scene_ref.all_points(), resolution, inflation_radius, margin)
}

pub fn build_occupancy_from_points(points: &[Point3<f64>], resolution: f64, inflation_radius: f64, margin: f64) -> Result<OccupancyGrid> {
    if points.is_empty() {
        return Err(Error::invalid("occupancy grid needs at least one point"));
    }
    if !(resolution > 0.0 && resolution.is_finite()) || !(inflation_radius >= 0.0) || !(margin >= 0.0) {
        return Err(Error::invalid("occupancy grid needs resolution > 0, inflation >= 0 and margin >= 0"));
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let origin = lo - nalgebra::Vector3::repeat(margin);
    let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a] + 2.0 * margin) / resolution).ceil() as usize).max(1));
    let mut grid = OccupancyGrid {
        origin,
        resolution,
        dims,
        occupied: vec![false; dims[0] * dims[1] * dims[2]],
        inflation_radius,
    };
    let reach = (inflation_radius / resolution).ceil() as i64 + 1;
    for p in points {
        let base = [0, 1, 2].map(|a| ((p[a] - origin[a]) / resolution).floor() as i64);
        for di in -reach..=reach {
            for dj in -reach..=reach {
                for dk in -reach..=reach {
                    let c = [base[0] + di, base[1] + dj, base[2] + dk];
                    if (0..3).any(|a| c[a] < 0 || c[a] >= dims[a] as i64) {
                        continue;
                    }
                    let c = c.map(|v| v as usize);
                    let inside = di == 0 && dj == 0 && dk == 0;
                    if inside || (grid.center(c) - p).norm() <= inflation_radius {
                        let idx = grid.index(c);
                        grid.occupied[idx] = true;
                    }
                }
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPath {
    pub points: Vec<Point3<f64>>,
    /// Cost of the cell path on the grid graph.
    pub cost: f64,
    pub cells: Vec<Cell>,
}

#[derive(Debug, PartialEq)]
struct Open {
    f: f64,
    index: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (f, index)
        other.f.total_cmp(&self.f).then(other.index.cmp(&self.index))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn endpoint(grid: &OccupancyGrid, p: &Point3<f64>, snap_radius: f64, what: &str) -> Result<(Cell, Point3<f64>)> {
    let cell = grid
        .cell_of(p)
        .ok_or_else(|| Error::Unreachable(format!("{what} {p:?} lies outside the occupancy grid")))?;
    if !grid.is_occupied(cell) {
        return Ok((cell, *p));
    }
    let snapped = grid
        .snap_free(p, snap_radius)
        .ok_or_else(|| Error::Unreachable(format!("{what} {p:?} is occupied with no free cell within {snap_radius} m")))?;
    Ok((snapped, grid.center(snapped)))
}

/// 26-connected A* from `start` to `goal` over free cells. Occupied
/// endpoints are first snapped to the nearest free cell center within
/// `snap_radius`.
pub fn astar(grid: &OccupancyGrid, start: &Point3<f64>, goal: &Point3<f64>, snap_radius: f64) -> Result<PlannedPath> {
    let (start_cell, start_pt) = endpoint(grid, start, snap_radius, "start")?;
    let (goal_cell, goal_pt) = endpoint(grid, goal, snap_radius, "goal")?;
    let goal_center = grid.center(goal_cell);
    let h = |c: Cell| (grid.center(c) - goal_center).norm();

    let n = grid.cell_count();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let s = grid.index(start_cell);
    let t = grid.index(goal_cell);
    g[s] = 0.0;
    open.push(Open { f: h(start_cell), index: s });
    while let Some(Open { index, .. }) = open.pop() {
        if closed[index] {
            continue;
        }
        if index == t {
            break;
        }
        closed[index] = true;
        let cell = grid.cell_at(index);
        for (next, w) in grid.neighbors(cell) {
            let j = grid.index(next);
            if closed[j] || grid.occupied[j] {
                continue;
            }
            let cand = g[index] + w;
            if cand < g[j] {
                g[j] = cand;
                parent[j] = index;
                open.push(Open { f: cand + h(next), index: j });
            }
        }
    }
    if !g[t].is_finite() {
        return Err(Error::Unreachable(format!("no free path from {start:?} to {goal:?}")));
    }

    let mut chain = vec![t];
    while *chain.last().expect("non-empty") != s {
        chain.push(parent[*chain.last().expect("non-empty")]);
    }
    chain.reverse();
    let cells: Vec<Cell> = chain.iter().map(|&i| grid.cell_at(i)).collect();
    let mut points = vec![start_pt];
    if cells.len() > 2 {
        points.extend(cells[1..cells.len() - 1].iter().map(|&c| grid.center(c)));
    }
    points.push(goal_pt);
    Ok(PlannedPath {
        points,
        cost: g[t],
        cells,
    })
}

/// Points every `stride` of arc length from the start, plus the last point.
pub fn sample_waypoints(points: &[Point3<f64>], stride: f64) -> Result<Vec<Point3<f64>>> {
    if points.is_empty() {
        return Err(Error::invalid("cannot sample waypoints from an empty trajectory"));
    }
    if !(stride > 0.0 && stride.is_finite()) {
        return Err(Error::invalid("waypoint stride must be positive"));
    }
    let mut out = vec![points[0]];
    let mut next = stride;
    let mut travelled = 0.0;
    for w in points.windows(2) {
        let len = (w[1] - w[0]).norm();
        while len > 0.0 && travelled + len > next {
            let f = (next - travelled) / len;
            out.push(w[0] + (w[1] - w[0]) * f);
            next += stride;
        }
        travelled += len;
    }
    let last = *points.last().expect("non-empty");
    if out.len() == 1 || out.last() != Some(&last) {
        out.push(last);
    }
    if points.len() == 1 {
        out.truncate(1);
    }
    Ok(out)
}

/// Samples waypoints, maps them, and reconnects them with A*.
pub fn transfer_long(
    traj: &Trajectory,
    map: &SceneMap,
    grid: &OccupancyGrid,
    stride: f64,
    snap_radius: f64,
) -> Result<Trajectory> {
    traj.validate()?;
    if traj.points.len() < 2 {
        return Err(Error::invalid("long transfer needs at least two trajectory points"));
    }
    let waypoints = sample_waypoints(&traj.positions(), stride)?;
    let mapped = waypoints.iter().map(|w| map.apply(w)).collect::<Result<Vec<_>>>()?;
    let segments: Vec<Result<PlannedPath>> = (0..mapped.len() - 1)
        .into_par_iter()
        .map(|i| astar(grid, &mapped[i], &mapped[i + 1], snap_radius))
        .collect();

    let mut points: Vec<Point3<f64>> = Vec::new();
    let mut infos = Vec::new();
    for (i, seg) in segments.into_iter().enumerate() {
        let seg = seg.map_err(|e| {
            Error::Unreachable(format!(
                "segment between waypoint {i} {:?} and waypoint {} {:?} failed: {e}",
                mapped[i],
                i + 1,
                mapped[i + 1]
            ))
        })?;
        let skip = usize::from(points.last().is_some_and(|last| *last == seg.points[0]));
        infos.push(SegmentInfo {
            from: i,
            to: i + 1,
            cost: seg.cost,
            point_count: seg.points.len(),
        });
        points.extend(seg.points.into_iter().skip(skip));
    }
    let mut out = Trajectory::new(map.provenance.reference_scene.clone(), &points);
    out.segments = infos;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_grid(dims: [usize; 3]) -> OccupancyGrid {
        OccupancyGrid::from_cells(Point3::origin(), 1.0, dims, vec![false; dims[0] * dims[1] * dims[2]]).unwrap()
    }

    #[test]
    fn single_point_inflation_matches_brute_force() {
        let p = Point3::new(0.012, -0.031, 0.4);
        let grid = build_occupancy_from_points(&[p], 0.05, 0.15, 0.5).unwrap();
        let d = grid.dims();
        for i in 0..d[0] {
            for j in 0..d[1] {
                for k in 0..d[2] {
                    let c = [i, j, k];
                    assert_eq!(grid.is_occupied(c), (grid.center(c) - p).norm() <= 0.15, "{c:?}");
                }
            }
        }
    }

    #[test]
    fn zero_inflation_marks_containing_cells() {
        let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(0.33, 0.1, 0.0)];
        let grid = build_occupancy_from_points(&pts, 0.1, 0.0, 0.2).unwrap();
        let occupied = grid.occupied.iter().filter(|o| **o).count();
        assert_eq!(occupied, 2);
        for p in &pts {
            assert!(grid.is_occupied(grid.cell_of(p).unwrap()));
        }
    }

    #[test]
    fn far_region_is_free() {
        let grid = build_occupancy_from_points(&[Point3::origin()], 0.05, 0.15, 1.0).unwrap();
        assert!(!grid.is_occupied(grid.cell_of(&Point3::new(0.8, 0.8, 0.8)).unwrap()));
    }

    #[test]
    fn straight_line_on_empty_grid() {
        let grid = empty_grid([10, 3, 3]);
        let path = astar(&grid, &Point3::new(0.5, 1.5, 1.5), &Point3::new(8.5, 1.5, 1.5), 0.5).unwrap();
        assert_eq!(path.cost, 8.0);
        assert_eq!(path.points.len(), 9);
        assert!(path.points.iter().all(|p| p.y == 1.5 && p.z == 1.5));
    }

    #[test]
    fn keeps_exact_endpoints() {
        let grid = empty_grid([5, 5, 1]);
        let (s, g) = (Point3::new(0.2, 0.3, 0.5), Point3::new(4.9, 4.1, 0.5));
        let path = astar(&grid, &s, &g, 0.5).unwrap();
        assert_eq!(path.points[0], s);
        assert_eq!(*path.points.last().unwrap(), g);
        assert!((path.cost - 4.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sealed_goal_is_unreachable() {
        let mut grid = empty_grid([7, 7, 7]);
        for i in 2..5 {
            for j in 2..5 {
                for k in 2..5 {
                    if [i, j, k] != [3, 3, 3] {
                        let idx = grid.index([i, j, k]);
                        grid.occupied[idx] = true;
                    }
                }
            }
        }
        let err = astar(&grid, &Point3::new(0.5, 0.5, 0.5), &Point3::new(3.5, 3.5, 3.5), 0.5).unwrap_err();
        assert!(matches!(err, Error::Unreachable(_)));
    }

    #[test]
    fn occupied_start_snaps_to_nearest_free_cell() {
        let mut grid = empty_grid([5, 1, 1]);
        let idx = grid.index([2, 0, 0]);
        grid.occupied[idx] = true;
        // equidistant free neighbors: lexicographically smaller wins
        assert_eq!(grid.snap_free(&Point3::new(2.5, 0.5, 0.5), 1.0), Some([1, 0, 0]));
        assert_eq!(grid.snap_free(&Point3::new(2.5, 0.5, 0.5), 0.5), None);
        let path = astar(&grid, &Point3::new(2.6, 0.5, 0.5), &Point3::new(4.5, 0.5, 0.5), 1.0).unwrap();
        assert_eq!(path.points[0], Point3::new(3.5, 0.5, 0.5));
    }

    #[test]
    fn waypoints_include_endpoints_and_respect_stride() {
        let pts = [Point3::origin(), Point3::new(2.5, 0.0, 0.0), Point3::new(2.5, 1.2, 0.0)];
        let w = sample_waypoints(&pts, 1.0).unwrap();
        assert_eq!(w.first(), Some(&pts[0]));
        assert_eq!(w.last(), Some(&pts[2]));
        assert_eq!(w.len(), 5);
        assert_eq!(w[3], Point3::new(2.5, 0.5, 0.0));
        let w = sample_waypoints(&[Point3::origin(), Point3::new(2.0, 0.0, 0.0)], 1.0).unwrap();
        assert_eq!(w, vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(2.0, 0.0, 0.0)]);
    }

    #[test]
    fn trajectory_json_format() {
        let t = Trajectory::from_json(r#"{"frame_id": "room", "points": [[0, 0, 0], [1, 2, 3]]}"#, "t").unwrap();
        assert_eq!(t.points[1], [1.0, 2.0, 3.0]);
        assert!(!t.to_json().contains("segments"));
        assert!(Trajectory::from_json(r#"{"frame_id": "room", "points": []}"#, "t").is_err());
    }
}
