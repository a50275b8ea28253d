//! Scenario geometry, longitudinal kinematics and conflict metrics.
//!
//! Every vehicle follows a fixed polyline path; control is a scalar
//! acceleration integrated with semi-implicit Euler at 10 Hz. Conflict zones
//! are circles around the point where two paths cross or merge.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DrivingStyle, EpisodeOutcome, Intention, ScenarioDescription, MAX_SPEED, TTC_CAP};

pub const TICK: f64 = 0.1;
pub const TICKS_PER_SECOND: f64 = 10.0;
pub const VEHICLE_LENGTH: f64 = 4.0;
pub const VEHICLE_WIDTH: f64 = 1.8;
pub const ZONE_RADIUS: f64 = 3.0;
pub const COLLISION_DISTANCE: f64 = 2.0;
pub const STOPPED_SPEED: f64 = 0.1;
pub const DEADLOCK_WINDOW: f64 = 5.0;
pub const EPISODE_TIMEOUT: f64 = 60.0;
/// Minimum cosine between headings for a vehicle ahead to count as a leader.
const FOLLOW_ALIGNMENT: f64 = 0.7;

/// Approach length before a crossing point, and run-out after the junction.
const UPSTREAM: f64 = 40.0;
const DOWNSTREAM: f64 = 20.0;
/// Approach lengths before a tangential junction; long enough that the
/// clearance point still leaves room for a 40 m spawn gap.
const MERGE_UPSTREAM: f64 = 55.0;
const RING_UPSTREAM: f64 = 50.0;
/// On tangential junctions the conflict point is where the two paths first
/// come this close (m), not where they finally touch.
pub const CLEARANCE: f64 = 3.0;
const SAMPLE_SPACING: f64 = 0.25;
const INTERSECTION_OFFSETS: [f64; 3] = [0.0, 3.5, -3.5];
const ROUNDABOUT_RADIUS: f64 = 12.0;
const MERGE_ANGLE_DEG: f64 = 15.0;
const QUEUE_SPACING: f64 = 7.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown vehicle id {0}")]
    UnknownVehicle(u32),
    #[error("unknown path id {0}")]
    UnknownPath(u32),
    #[error("path {0} has no conflict point with path {1}")]
    NoConflict(u32, u32),
    #[error("no human-driven vehicle in the world")]
    NoOpponent,
    #[error("unsupported step {0} s (only 0.1 s ticks are supported)")]
    UnsupportedStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    #[default]
    Intersection,
    Roundabout,
    Merging,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [
        ScenarioKind::Intersection,
        ScenarioKind::Roundabout,
        ScenarioKind::Merging,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::Roundabout => "roundabout",
            ScenarioKind::Merging => "merging",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "intersection" => Ok(ScenarioKind::Intersection),
            "roundabout" => Ok(ScenarioKind::Roundabout),
            "merging" => Ok(ScenarioKind::Merging),
            other => Err(format!("unknown scenario `{other}`")),
        }
    }
}

/// A fixed driving path, densely sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGeometry {
    pub id: u32,
    points: Vec<Point>,
    arclength: Vec<f64>,
    /// Opposing path id → arclength of the conflict point on this path.
    pub conflicts: BTreeMap<u32, f64>,
}

impl PathGeometry {
    /// Builds a path from a curve sampled at `SAMPLE_SPACING`.
    pub fn from_points(id: u32, points: Vec<Point>) -> Self {
        assert!(points.len() >= 2, "a path needs at least two points");
        let mut arclength = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        arclength.push(0.0);
        for w in points.windows(2) {
            acc += w[0].distance(w[1]);
            arclength.push(acc);
        }
        PathGeometry {
            id,
            points,
            arclength,
            conflicts: BTreeMap::new(),
        }
    }

    fn sampled(id: u32, length: f64, curve: impl Fn(f64) -> Point) -> Self {
        let n = (length / SAMPLE_SPACING).ceil() as usize;
        let points = (0..=n)
            .map(|i| curve(length * i as f64 / n as f64))
            .collect();
        Self::from_points(id, points)
    }

    pub fn length(&self) -> f64 {
        *self.arclength.last().unwrap()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn arclengths(&self) -> &[f64] {
        &self.arclength
    }

    pub fn conflict_with(&self, other: u32) -> Option<f64> {
        self.conflicts.get(&other).copied()
    }

    /// Position and unit tangent at arclength `s` (clamped to the path).
    pub fn pose_at(&self, s: f64) -> (Point, Point) {
        let s = s.clamp(0.0, self.length());
        let i = match self
            .arclength
            .binary_search_by(|a| a.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.arclength[i + 1] - self.arclength[i];
        let f = if seg > 0.0 { (s - self.arclength[i]) / seg } else { 0.0 };
        let p = Point::new(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y));
        let t = Point::new((b.x - a.x) / seg, (b.y - a.y) / seg);
        (p, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "AV")]
    Av,
    #[serde(rename = "HV")]
    Hv,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Av => "AV",
            Role::Hv => "HV",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleBody {
    pub id: u32,
    pub role: Role,
    pub path_id: u32,
    pub s: f64,
    pub v: f64,
    pub length: f64,
    pub width: f64,
    pub style: Option<DrivingStyle>,
    pub intention: Option<Intention>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConflictZone {
    pub paths: (u32, u32),
    pub center: Point,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZoneEventKind {
    Enter,
    Exit,
}

/// A conflict-zone entry or exit, with every vehicle's position at that tick.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneEvent {
    pub tick: u64,
    pub t: f64,
    pub vehicle: u32,
    pub zone: usize,
    pub kind: ZoneEventKind,
    pub positions: Vec<(u32, Point)>,
}

/// Time until a vehicle reaches a conflict point, or a marker once past it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConflictTime {
    Ahead(f64),
    Passed,
}

impl ConflictTime {
    pub fn seconds(self) -> Option<f64> {
        match self {
            ConflictTime::Ahead(t) => Some(t),
            ConflictTime::Passed => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub kind: ScenarioKind,
    pub paths: Vec<PathGeometry>,
    pub vehicles: Vec<VehicleBody>,
    pub zones: Vec<ConflictZone>,
    pub seed: u64,
    pub events: Vec<ZoneEvent>,
    tick: u64,
    occupancy: BTreeSet<(u32, usize)>,
    stopped_for: HashMap<u32, f64>,
}

pub fn conflict_time(distance: f64, v: f64) -> f64 {
    if v <= 0.0 {
        return TTC_CAP;
    }
    (distance / v.max(STOPPED_SPEED)).min(TTC_CAP)
}

fn intersection_paths(n_hv: usize) -> Vec<PathGeometry> {
    let length = UPSTREAM + DOWNSTREAM;
    let mut av = PathGeometry::sampled(0, length, |s| Point::new(s - UPSTREAM, 0.0));
    let mut paths = Vec::new();
    for (k, &x) in INTERSECTION_OFFSETS.iter().take(n_hv).enumerate() {
        let id = k as u32 + 1;
        // Alternate southbound / northbound so HV lanes never meet each other.
        let dir = if k % 2 == 0 { -1.0 } else { 1.0 };
        let mut hv = PathGeometry::sampled(id, length, move |s| Point::new(x, -dir * (UPSTREAM - s)));
        hv.conflicts.insert(0, UPSTREAM);
        av.conflicts.insert(id, UPSTREAM + x);
        paths.push(hv);
    }
    paths.insert(0, av);
    paths
}

fn merging_paths() -> (PathGeometry, PathGeometry) {
    let length = MERGE_UPSTREAM + DOWNSTREAM;
    let main = PathGeometry::sampled(0, length, |s| Point::new(s - MERGE_UPSTREAM, 0.0));
    let (sin, cos) = MERGE_ANGLE_DEG.to_radians().sin_cos();
    let ramp = PathGeometry::sampled(1, length, move |s| {
        if s < MERGE_UPSTREAM {
            let back = MERGE_UPSTREAM - s;
            Point::new(-back * cos, -back * sin)
        } else {
            Point::new(s - MERGE_UPSTREAM, 0.0)
        }
    });
    (main, ramp)
}

fn roundabout_paths() -> (PathGeometry, PathGeometry) {
    let length = RING_UPSTREAM + DOWNSTREAM;
    let r = ROUNDABOUT_RADIUS;
    // Counter-clockwise around (0, r); the tangency point is the origin.
    let ring = PathGeometry::sampled(0, length, move |s| {
        let phi = -std::f64::consts::FRAC_PI_2 + (s - RING_UPSTREAM) / r;
        Point::new(r * phi.cos(), r + r * phi.sin())
    });
    let entry = PathGeometry::sampled(1, length, move |s| {
        if s < RING_UPSTREAM {
            Point::new(s - RING_UPSTREAM, 0.0)
        } else {
            let phi = -std::f64::consts::FRAC_PI_2 + (s - RING_UPSTREAM) / r;
            Point::new(r * phi.cos(), r + r * phi.sin())
        }
    });
    (ring, entry)
}

/// First arclength on `a` whose point lies within `CLEARANCE` of path `b`.
fn clearance_point(a: &PathGeometry, b: &PathGeometry) -> f64 {
    a.points()
        .iter()
        .zip(a.arclengths())
        .find(|(p, _)| b.points().iter().any(|q| p.distance(*q) < CLEARANCE))
        .map(|(_, s)| *s)
        .expect("tangential paths meet")
}

/// Builds a seeded scene with one AV (id 0) and `n_hv` HVs (ids 1..).
pub fn build_scenario(kind: ScenarioKind, seed: u64, n_hv: usize) -> World {
    assert!((1..=3).contains(&n_hv), "n_hv must be 1..=3");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths;
    let av_path;
    let mut hv_paths = Vec::new();
    match kind {
        ScenarioKind::Intersection => {
            paths = intersection_paths(n_hv);
            av_path = 0;
            hv_paths.extend(1..=n_hv as u32);
        }
        ScenarioKind::Merging | ScenarioKind::Roundabout => {
            let (mut a, mut b) = if kind == ScenarioKind::Merging {
                merging_paths()
            } else {
                roundabout_paths()
            };
            let (sa, sb) = (clearance_point(&a, &b), clearance_point(&b, &a));
            a.conflicts.insert(1, sa);
            b.conflicts.insert(0, sb);
            paths = vec![a, b];
            // Which entry the AV takes is part of the random draw.
            let av_on_main = rng.gen_bool(0.5);
            av_path = if av_on_main { 0 } else { 1 };
            hv_paths.extend(std::iter::repeat(1 - av_path).take(n_hv));
        }
    }

    let mut vehicles = Vec::with_capacity(n_hv + 1);
    let av_gap: f64 = rng.gen_range(25.0..=40.0);
    let av_v: f64 = rng.gen_range(2.0..=4.0);
    let av_conflict = paths[av_path as usize]
        .conflict_with(hv_paths[0])
        .expect("AV path conflicts with the first HV");
    vehicles.push(VehicleBody {
        id: 0,
        role: Role::Av,
        path_id: av_path,
        s: av_conflict - av_gap,
        v: av_v,
        length: VEHICLE_LENGTH,
        width: VEHICLE_WIDTH,
        style: None,
        intention: None,
    });

    // HVs sharing one entry are queued: sorted offsets plus a fixed spacing
    // keep every gap inside [25, 40] m.
    let shared_entry = kind != ScenarioKind::Intersection;
    let mut queue: Vec<f64> = Vec::new();
    if shared_entry {
        let slack = 15.0 - QUEUE_SPACING * (n_hv as f64 - 1.0);
        queue = (0..n_hv).map(|_| rng.gen_range(0.0..=slack)).collect();
        queue.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    for (k, &path_id) in hv_paths.iter().enumerate() {
        let gap = if shared_entry {
            25.0 + queue[k] + QUEUE_SPACING * k as f64
        } else {
            rng.gen_range(25.0..=40.0)
        };
        let v: f64 = rng.gen_range(2.0..=4.0);
        let style = DrivingStyle::ALL[rng.gen_range(0..3)];
        let coin = rng.gen_bool(0.5);
        let intention = match style {
            DrivingStyle::Conservative => Intention::Yield,
            DrivingStyle::Aggressive => Intention::Rush,
            DrivingStyle::General => {
                if coin {
                    Intention::Yield
                } else {
                    Intention::Rush
                }
            }
        };
        let conflict = paths[path_id as usize].conflict_with(av_path).unwrap();
        vehicles.push(VehicleBody {
            id: k as u32 + 1,
            role: Role::Hv,
            path_id,
            s: conflict - gap,
            v,
            length: VEHICLE_LENGTH,
            width: VEHICLE_WIDTH,
            style: Some(style),
            intention: Some(intention),
        });
    }

    let zones = zones_for(&paths);
    World::assemble(kind, seed, paths, vehicles, zones)
}

fn zones_for(paths: &[PathGeometry]) -> Vec<ConflictZone> {
    let mut zones = Vec::new();
    for a in paths {
        for (&b, &s) in &a.conflicts {
            if a.id < b {
                let pa = a.pose_at(s).0;
                let pb = paths
                    .iter()
                    .find(|p| p.id == b)
                    .and_then(|p| p.conflict_with(a.id).map(|sb| p.pose_at(sb).0))
                    .unwrap_or(pa);
                zones.push(ConflictZone {
                    paths: (a.id, b),
                    center: Point::new((pa.x + pb.x) / 2.0, (pa.y + pb.y) / 2.0),
                    radius: ZONE_RADIUS,
                });
            }
        }
    }
    zones
}

impl World {
    /// Assembles a world from explicit parts; zone occupancy is initialized
    /// from the starting positions without logging events.
    pub fn assemble(
        kind: ScenarioKind,
        seed: u64,
        paths: Vec<PathGeometry>,
        vehicles: Vec<VehicleBody>,
        zones: Vec<ConflictZone>,
    ) -> World {
        let mut w = World {
            kind,
            paths,
            vehicles,
            zones,
            seed,
            events: Vec::new(),
            tick: 0,
            occupancy: BTreeSet::new(),
            stopped_for: HashMap::new(),
        };
        w.occupancy = w.current_occupancy();
        w
    }

    /// Builds a world from custom paths, deriving zones from their conflict maps.
    pub fn from_parts(kind: ScenarioKind, paths: Vec<PathGeometry>, vehicles: Vec<VehicleBody>) -> World {
        let zones = zones_for(&paths);
        World::assemble(kind, 0, paths, vehicles, zones)
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 / TICKS_PER_SECOND
    }

    pub fn av(&self) -> &VehicleBody {
        self.vehicles.iter().find(|v| v.role == Role::Av).expect("world has an AV")
    }

    pub fn hvs(&self) -> impl Iterator<Item = &VehicleBody> {
        self.vehicles.iter().filter(|v| v.role == Role::Hv)
    }

    pub fn vehicle(&self, id: u32) -> Result<&VehicleBody, EnvError> {
        self.vehicles.iter().find(|v| v.id == id).ok_or(EnvError::UnknownVehicle(id))
    }

    pub fn vehicle_mut(&mut self, id: u32) -> Result<&mut VehicleBody, EnvError> {
        self.vehicles.iter_mut().find(|v| v.id == id).ok_or(EnvError::UnknownVehicle(id))
    }

    pub fn path(&self, id: u32) -> Result<&PathGeometry, EnvError> {
        self.paths.get(id as usize).filter(|p| p.id == id).ok_or(EnvError::UnknownPath(id))
    }

    pub fn position(&self, v: &VehicleBody) -> Point {
        self.paths[v.path_id as usize].pose_at(v.s).0
    }

    /// Position, heading angle (rad) and velocity components.
    pub fn kinematics(&self, v: &VehicleBody) -> (Point, f64, Point) {
        let (p, t) = self.paths[v.path_id as usize].pose_at(v.s);
        (p, t.y.atan2(t.x), Point::new(v.v * t.x, v.v * t.y))
    }

    pub fn finished(&self, v: &VehicleBody) -> bool {
        v.s >= self.paths[v.path_id as usize].length() - 1e-9
    }

    /// Continuous time the vehicle has spent below the stopped threshold.
    pub fn stopped_for(&self, id: u32) -> f64 {
        self.stopped_for.get(&id).copied().unwrap_or(0.0)
    }

    /// Zone index for the conflict between two paths.
    pub fn zone_between(&self, a: u32, b: u32) -> Option<usize> {
        let key = (a.min(b), a.max(b));
        self.zones.iter().position(|z| z.paths == key)
    }

    /// Signed distance (m) from a vehicle to its conflict point with `opposing_path`;
    /// negative once past it.
    pub fn distance_to_conflict(&self, id: u32, opposing_path: u32) -> Result<f64, EnvError> {
        let v = self.vehicle(id)?;
        let s_star = self
            .path(v.path_id)?
            .conflict_with(opposing_path)
            .ok_or(EnvError::NoConflict(v.path_id, opposing_path))?;
        Ok(s_star - v.s)
    }

    fn current_occupancy(&self) -> BTreeSet<(u32, usize)> {
        let mut occ = BTreeSet::new();
        for v in &self.vehicles {
            if self.finished(v) {
                continue;
            }
            let p = self.position(v);
            for (zi, z) in self.zones.iter().enumerate() {
                if (z.paths.0 == v.path_id || z.paths.1 == v.path_id) && p.distance(z.center) < z.radius {
                    occ.insert((v.id, zi));
                }
            }
        }
        occ
    }

    /// Longitudinal gap to the nearest unfinished vehicle physically ahead in
    /// the same lane corridor and heading the same way, if any is within `horizon` metres.
    pub fn leader_gap(&self, id: u32, horizon: f64) -> Option<f64> {
        let me = self.vehicle(id).ok()?;
        let (p, t) = self.paths[me.path_id as usize].pose_at(me.s);
        self.vehicles
            .iter()
            .filter(|o| o.id != id && !self.finished(o))
            .filter_map(|o| {
                let (q, u) = self.paths[o.path_id as usize].pose_at(o.s);
                // Crossing traffic is not a leader.
                if t.x * u.x + t.y * u.y < FOLLOW_ALIGNMENT {
                    return None;
                }
                let (dx, dy) = (q.x - p.x, q.y - p.y);
                let along = dx * t.x + dy * t.y;
                let lateral = (dx * t.y - dy * t.x).abs();
                (along > 0.0 && along <= horizon && lateral < VEHICLE_WIDTH).then_some(along)
            })
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }
}

/// Advances the world one tick. Vehicles missing from `accel` hold speed.
pub fn step_world(w: &World, accel: &HashMap<u32, f64>, dt: f64) -> Result<World, EnvError> {
    if (dt - TICK).abs() > 1e-12 {
        return Err(EnvError::UnsupportedStep(dt));
    }
    if let Some(&id) = accel.keys().find(|id| w.vehicles.iter().all(|v| v.id != **id)) {
        return Err(EnvError::UnknownVehicle(id));
    }
    let mut next = w.clone();
    next.tick += 1;
    for v in &mut next.vehicles {
        let a = accel.get(&v.id).copied().unwrap_or(0.0);
        let length = w.paths[v.path_id as usize].length();
        v.v = (v.v + a * dt).clamp(0.0, MAX_SPEED);
        v.s = (v.s + v.v * dt).min(length);
        let stopped = next.stopped_for.entry(v.id).or_insert(0.0);
        if v.v < STOPPED_SPEED {
            *stopped += dt;
        } else {
            *stopped = 0.0;
        }
    }

    let occ = next.current_occupancy();
    let t = next.time();
    let positions: Vec<(u32, Point)> = next.vehicles.iter().map(|v| (v.id, next.position(v))).collect();
    for &(vehicle, zone) in w.occupancy.difference(&occ) {
        next.events.push(ZoneEvent {
            tick: next.tick,
            t,
            vehicle,
            zone,
            kind: ZoneEventKind::Exit,
            positions: positions.clone(),
        });
    }
    for &(vehicle, zone) in occ.difference(&w.occupancy) {
        next.events.push(ZoneEvent {
            tick: next.tick,
            t,
            vehicle,
            zone,
            kind: ZoneEventKind::Enter,
            positions: positions.clone(),
        });
    }
    next.occupancy = occ;
    Ok(next)
}

/// `(s* − s) / max(v, 0.1)` capped at 10 s; 10 s when stopped.
pub fn time_to_conflict(w: &World, vehicle_id: u32, opposing_path: u32) -> Result<ConflictTime, EnvError> {
    let d = w.distance_to_conflict(vehicle_id, opposing_path)?;
    if d < 0.0 {
        return Ok(ConflictTime::Passed);
    }
    Ok(ConflictTime::Ahead(conflict_time(d, w.vehicle(vehicle_id)?.v)))
}

/// Predicted arrival gap `|t_av − t_hv|` at the pair's conflict point, when
/// neither has passed it.
pub fn pair_conflict_gap(w: &World, av: u32, hv: u32) -> Option<f64> {
    let a = w.vehicle(av).ok()?;
    let h = w.vehicle(hv).ok()?;
    let ta = time_to_conflict(w, av, h.path_id).ok()?.seconds()?;
    let th = time_to_conflict(w, hv, a.path_id).ok()?.seconds()?;
    Some((ta - th).abs())
}

/// Picks the riskiest HV and emits the 9-value scenario description.
pub fn observe(w: &World, ego_id: u32) -> Result<(ScenarioDescription, u32), EnvError> {
    let ego = w.vehicle(ego_id)?;
    let mut candidates: Vec<(f64, u32)> = Vec::new();
    for hv in w.hvs() {
        let t_hv = time_to_conflict(w, hv.id, ego.path_id)?;
        let t_ego = time_to_conflict(w, ego_id, hv.path_id)?;
        if let (ConflictTime::Ahead(h), ConflictTime::Ahead(e)) = (t_hv, t_ego) {
            candidates.push(((e - h).abs(), hv.id));
        }
    }
    let ego_pos = w.position(ego);
    let opponent = if candidates.is_empty() {
        w.hvs()
            .map(|hv| (w.position(hv).distance(ego_pos), hv.id))
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
            .ok_or(EnvError::NoOpponent)?
            .1
    } else {
        candidates
            .iter()
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
            .unwrap()
            .1
    };
    let hv = w.vehicle(opponent)?;
    let c = match (
        time_to_conflict(w, ego_id, hv.path_id)?,
        time_to_conflict(w, opponent, ego.path_id)?,
    ) {
        (ConflictTime::Ahead(e), ConflictTime::Ahead(h)) => e.min(h),
        _ => TTC_CAP,
    };
    let (pa, _, va) = w.kinematics(ego);
    let (ph, _, vh) = w.kinematics(hv);
    Ok((
        ScenarioDescription::new([pa.x, pa.y, va.x, va.y, ph.x, ph.y, vh.x, vh.y, c]),
        opponent,
    ))
}

fn zone_times(events: &[ZoneEvent], zone: usize, vehicle: u32) -> (Option<&ZoneEvent>, Option<&ZoneEvent>) {
    let enter = events
        .iter()
        .find(|e| e.zone == zone && e.vehicle == vehicle && e.kind == ZoneEventKind::Enter);
    let exit = enter.and_then(|en| {
        events
            .iter()
            .find(|e| e.zone == zone && e.vehicle == vehicle && e.kind == ZoneEventKind::Exit && e.tick >= en.tick)
    });
    (enter, exit)
}

fn shared_zone(events: &[ZoneEvent], pair: (u32, u32)) -> Option<usize> {
    events
        .iter()
        .filter(|e| e.vehicle == pair.0)
        .map(|e| e.zone)
        .find(|z| events.iter().any(|e| e.vehicle == pair.1 && e.zone == *z))
}

/// Post-encroachment time for a pair: entry of the second vehicle minus exit of
/// the first. `None` if either vehicle never entered their shared zone.
/// When the first vehicle never left, the result is the (non-positive) entry gap.
pub fn compute_pet(events: &[ZoneEvent], pair: (u32, u32)) -> Option<f64> {
    let zone = shared_zone(events, pair)?;
    let (a_in, a_out) = zone_times(events, zone, pair.0);
    let (b_in, b_out) = zone_times(events, zone, pair.1);
    let (a_in, b_in) = (a_in?, b_in?);
    let ((first_in, first_out), second_in) = if (a_in.tick, pair.0) <= (b_in.tick, pair.1) {
        ((a_in, a_out), b_in)
    } else {
        ((b_in, b_out), a_in)
    };
    // Differences are formed in whole ticks so 0.1 s multiples stay exact.
    let ticks = match first_out {
        Some(out) => second_in.tick as f64 - out.tick as f64,
        None => first_in.tick as f64 - second_in.tick as f64,
    };
    Some(ticks / TICKS_PER_SECOND)
}

/// Whether the pair's zone traversal was dangerous: when the first vehicle
/// exits, the centre gap minus one vehicle length is negative.
pub fn is_dangerous(events: &[ZoneEvent], pair: (u32, u32), world: &World) -> bool {
    let Some(zone) = shared_zone(events, pair) else {
        return false;
    };
    let (a_in, a_out) = zone_times(events, zone, pair.0);
    let (b_in, b_out) = zone_times(events, zone, pair.1);
    let (Some(a_in), Some(b_in)) = (a_in, b_in) else {
        return false;
    };
    let first_exit = if (a_in.tick, pair.0) <= (b_in.tick, pair.1) { a_out } else { b_out };
    let Some(exit) = first_exit else {
        return false;
    };
    let pos = |id: u32| exit.positions.iter().find(|(v, _)| *v == id).map(|(_, p)| *p);
    let (Some(pa), Some(pb)) = (pos(pair.0), pos(pair.1)) else {
        return false;
    };
    let length = world.vehicle(pair.0).map(|v| v.length).unwrap_or(VEHICLE_LENGTH);
    pa.distance(pb) - length < 0.0
}

/// Collision predicate on two vehicles' centres.
pub fn collided(w: &World, a: &VehicleBody, b: &VehicleBody) -> bool {
    !w.finished(a) && !w.finished(b) && w.position(a).distance(w.position(b)) < COLLISION_DISTANCE
}

pub fn check_termination(w: &World) -> Option<EpisodeOutcome> {
    for (i, a) in w.vehicles.iter().enumerate() {
        for b in &w.vehicles[i + 1..] {
            if collided(w, a, b) {
                return Some(EpisodeOutcome::Collision);
            }
        }
    }
    let av = w.av();
    if w.finished(av) {
        return Some(EpisodeOutcome::Success);
    }
    if let Ok((_, opponent)) = observe(w, av.id) {
        let hv = w.vehicle(opponent).expect("observed opponent exists");
        let before = |id: u32, path: u32| w.distance_to_conflict(id, path).map(|d| d > 0.0).unwrap_or(false);
        if w.stopped_for(av.id) >= DEADLOCK_WINDOW - 1e-9
            && w.stopped_for(hv.id) >= DEADLOCK_WINDOW - 1e-9
            && before(av.id, hv.path_id)
            && before(hv.id, av.path_id)
        {
            return Some(EpisodeOutcome::Deadlock);
        }
    }
    if w.time() >= EPISODE_TIMEOUT - 1e-9 {
        return Some(EpisodeOutcome::Timeout);
    }
    None
}
