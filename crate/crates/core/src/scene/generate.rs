//! Synthetic driving scenarios with a controllable domain shift.
//!
//! Two presets stand in for a large, mixed-traffic source domain and a
//! small, vehicle-only target domain. They differ in road layout mix, lane
//! geometry, speed distribution, curve behavior (target drivers brake much
//! harder for curvature) and yielding at junctions, so both the input
//! marginals and the conditional future distribution shift.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::scene::{normalize_angle, AgentState, AgentTrack, AgentType, MapKind, MapPolyline, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    SourceLike,
    TargetLike,
}

impl Preset {
    pub const NAMES: [&'static str; 2] = ["source_like", "target_like"];

    pub fn name(self) -> &'static str {
        match self {
            Self::SourceLike => "source_like",
            Self::TargetLike => "target_like",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Self::SourceLike => 0x5eed_0001,
            Self::TargetLike => 0x5eed_0002,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_like" => Ok(Self::SourceLike),
            "target_like" => Ok(Self::TargetLike),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (valid: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub preset: Preset,
    pub count: usize,
    /// Sampling rate in Hz.
    pub rate: f64,
    /// Scenario length in seconds.
    pub duration: f64,
    pub current_index: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Preset::SourceLike,
            count: 100,
            rate: 10.0,
            duration: 9.0,
            current_index: 10,
        }
    }
}

impl GeneratorConfig {
    pub const KEYS: [&'static str; 6] = ["seed", "preset", "count", "rate", "duration", "current_index"];

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&Self::KEYS)?;
        let d = Self::default();
        let cfg = Self {
            seed: kv.get_or("seed", d.seed)?,
            preset: kv.get_or("preset", d.preset)?,
            count: kv.get_or("count", d.count)?,
            rate: kv.get_or("rate", d.rate)?,
            duration: kv.get_or("duration", d.duration)?,
            current_index: kv.get_or("current_index", d.current_index)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if !(self.rate > 0.0 && self.duration > 0.0) {
            return Err(Error::Config("rate and duration must be positive".into()));
        }
        let steps = self.duration * self.rate;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::Config("duration x rate must be a whole number of steps".into()));
        }
        if self.current_index >= steps.round() as usize {
            return Err(Error::Config("current_index leaves no future steps".into()));
        }
        Ok(())
    }
}

/// Distribution parameters of one domain.
#[derive(Debug, Clone)]
struct DomainParams {
    /// Probabilities of straight road, curved road, 4-way intersection.
    layout: [f64; 3],
    lane_width: f64,
    lanes_per_direction: usize,
    curvature: (f64, f64),
    speed_mean: f64,
    speed_sd: f64,
    /// Comfortable lateral acceleration; sets the speed limit on curvature.
    lateral_accel: f64,
    decel: f64,
    accel: f64,
    /// Probability of yielding almost to a stop when entering a junction.
    yield_prob: f64,
    /// Left / straight / right turn probabilities at junctions.
    turn_probs: [f64; 3],
    extra_agents: (usize, usize),
    type_mix: [f64; 3],
    crosswalks: bool,
    free_vehicle_prob: f64,
}

fn domain(preset: Preset) -> DomainParams {
    match preset {
        Preset::SourceLike => DomainParams {
            layout: [0.3, 0.2, 0.5],
            lane_width: 3.7,
            lanes_per_direction: 2,
            curvature: (0.004, 0.01),
            speed_mean: 10.0,
            speed_sd: 3.0,
            lateral_accel: 4.0,
            decel: 2.5,
            accel: 1.5,
            yield_prob: 0.15,
            turn_probs: [0.25, 0.5, 0.25],
            extra_agents: (3, 6),
            type_mix: [0.70, 0.07, 0.23],
            crosswalks: true,
            free_vehicle_prob: 0.1,
        },
        Preset::TargetLike => DomainParams {
            layout: [0.4, 0.5, 0.1],
            lane_width: 3.25,
            lanes_per_direction: 1,
            curvature: (0.004, 0.012),
            speed_mean: 15.0,
            speed_sd: 2.0,
            lateral_accel: 3.0,
            decel: 3.0,
            accel: 1.0,
            yield_prob: 0.0,
            turn_probs: [0.35, 0.3, 0.35],
            extra_agents: (0, 2),
            type_mix: [1.0, 0.0, 0.0],
            crosswalks: false,
            free_vehicle_prob: 0.0,
        },
    }
}

const DENSE_STEP: f64 = 0.5;
const MAP_STEP: f64 = 2.5;
const ARM_LENGTH: f64 = 55.0;

/// Arc-length parameterized 2-D path.
#[derive(Debug, Clone)]
struct Path {
    pts: Vec<[f64; 2]>,
    s: Vec<f64>,
    heading: Vec<f64>,
}

impl Path {
    fn new(raw: &[[f64; 2]]) -> Self {
        let pts = densify(raw, DENSE_STEP);
        let mut s = vec![0.0];
        for w in pts.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            s.push(s.last().unwrap() + d);
        }
        let mut raw_heading: Vec<f64> = pts
            .windows(2)
            .map(|w| (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]))
            .collect();
        raw_heading.push(*raw_heading.last().unwrap());
        let heading = crate::scene::pchip::unwrap_angles(&raw_heading);
        Self { pts, s, heading }
    }

    fn length(&self) -> f64 {
        *self.s.last().unwrap()
    }

    /// Position and heading at arc length `s`, extrapolating straight past either end.
    fn at(&self, s: f64) -> ([f64; 2], f64) {
        let n = self.pts.len();
        if s <= 0.0 {
            let h = self.heading[0];
            return ([self.pts[0][0] + s * h.cos(), self.pts[0][1] + s * h.sin()], h);
        }
        if s >= self.length() {
            let h = self.heading[n - 1];
            let e = s - self.length();
            return ([self.pts[n - 1][0] + e * h.cos(), self.pts[n - 1][1] + e * h.sin()], h);
        }
        let i = match self.s.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i - 1,
        };
        let f = (s - self.s[i]) / (self.s[i + 1] - self.s[i]);
        let p = [
            self.pts[i][0] + f * (self.pts[i + 1][0] - self.pts[i][0]),
            self.pts[i][1] + f * (self.pts[i + 1][1] - self.pts[i][1]),
        ];
        // headings are sampled per segment; blend toward the next one
        let h = self.heading[i] + f * (self.heading[i + 1] - self.heading[i]);
        (p, h)
    }

    /// Absolute curvature around arc length `s`.
    fn curvature(&self, s: f64) -> f64 {
        let ds = 2.0;
        let (_, h0) = self.at(s - ds);
        let (_, h1) = self.at(s + ds);
        ((h1 - h0) / (2.0 * ds)).abs()
    }

    fn offset(&self, off: f64) -> Vec<[f64; 2]> {
        self.pts
            .iter()
            .zip(&self.heading)
            .map(|(p, h)| [p[0] - off * h.sin(), p[1] + off * h.cos()])
            .collect()
    }
}

fn densify(raw: &[[f64; 2]], step: f64) -> Vec<[f64; 2]> {
    let mut out = vec![raw[0]];
    for w in raw.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        let n = (d / step).ceil().max(1.0) as usize;
        for k in 1..=n {
            let f = k as f64 / n as f64;
            out.push([w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])]);
        }
    }
    out
}

fn to_map(kind: MapKind, pts: &[[f64; 2]]) -> MapPolyline {
    let coarse = resample_polyline(pts, MAP_STEP);
    MapPolyline {
        kind,
        points: coarse.into_iter().map(|p| [p[0], p[1], 0.0]).collect(),
    }
}

/// Points at fixed arc-length spacing along a polyline (endpoint included).
fn resample_polyline(pts: &[[f64; 2]], step: f64) -> Vec<[f64; 2]> {
    let path = Path::new(pts);
    let len = path.length();
    let n = (len / step).round().max(1.0) as usize;
    (0..=n).map(|k| path.at(len * k as f64 / n as f64).0).collect()
}

fn bezier(p0: [f64; 2], h0: f64, p3: [f64; 2], h3: f64) -> Vec<[f64; 2]> {
    let d = ((p3[0] - p0[0]).powi(2) + (p3[1] - p0[1]).powi(2)).sqrt();
    let c = 0.55 * d;
    let p1 = [p0[0] + c * h0.cos(), p0[1] + c * h0.sin()];
    let p2 = [p3[0] - c * h3.cos(), p3[1] - c * h3.sin()];
    (0..=40)
        .map(|i| {
            let t = i as f64 / 40.0;
            let u = 1.0 - t;
            let b = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
            [
                b[0] * p0[0] + b[1] * p1[0] + b[2] * p2[0] + b[3] * p3[0],
                b[0] * p0[1] + b[1] * p1[1] + b[2] * p2[1] + b[3] * p3[1],
            ]
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Route {
    path: Path,
    /// Arc length where the route enters a junction, if any.
    junction: Option<f64>,
}

#[derive(Debug, Default)]
struct Layout {
    polylines: Vec<MapPolyline>,
    /// Vehicle routes through the scene.
    routes: Vec<Route>,
    /// Routes hugging the right edge, used by cyclists.
    bike_routes: Vec<Route>,
    /// Sidewalk and crosswalk paths for pedestrians.
    walkways: Vec<Path>,
}

fn pick_weighted<R: Rng>(rng: &mut R, w: &[f64]) -> usize {
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, p) in w.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    w.len() - 1
}

/// Two-way road following `center`; returns the layout with lanes, edges and walkways.
fn road_from_centerline(center: &[[f64; 2]], dp: &DomainParams) -> Layout {
    let base = Path::new(center);
    let w = dp.lane_width;
    let n = dp.lanes_per_direction;
    let mut layout = Layout::default();
    for i in 0..n {
        let off = (i as f64 + 0.5) * w;
        let fwd = base.offset(-off);
        let mut back = base.offset(off);
        back.reverse();
        layout.polylines.push(to_map(MapKind::Lane, &fwd));
        layout.polylines.push(to_map(MapKind::Lane, &back));
        let fwd_path = Path::new(&fwd);
        let back_path = Path::new(&back);
        layout.routes.push(Route {
            path: fwd_path,
            junction: None,
        });
        layout.routes.push(Route {
            path: back_path,
            junction: None,
        });
    }
    let edge = n as f64 * w;
    layout.polylines.push(to_map(MapKind::RoadEdge, &base.offset(-edge)));
    layout.polylines.push(to_map(MapKind::RoadEdge, &base.offset(edge)));
    let bike_fwd = base.offset(-(edge - 0.7));
    let mut bike_back = base.offset(edge - 0.7);
    bike_back.reverse();
    layout.bike_routes.push(Route {
        path: Path::new(&bike_fwd),
        junction: None,
    });
    layout.bike_routes.push(Route {
        path: Path::new(&bike_back),
        junction: None,
    });
    layout.walkways.push(Path::new(&base.offset(-(edge + 2.5))));
    layout.walkways.push(Path::new(&base.offset(edge + 2.5)));
    layout
}

fn straight_road(dp: &DomainParams) -> Layout {
    road_from_centerline(&[[-ARM_LENGTH, 0.0], [ARM_LENGTH, 0.0]], dp)
}

fn curved_road<R: Rng>(dp: &DomainParams, rng: &mut R) -> Layout {
    let k = rng.gen_range(dp.curvature.0..=dp.curvature.1) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let entry = 30.0;
    let arc = 55.0;
    let mut pts = vec![[-entry, 0.0], [0.0, 0.0]];
    let steps = 30;
    for i in 1..=steps {
        let s = arc * i as f64 / steps as f64;
        let th = k * s;
        pts.push([th.sin() / k, (1.0 - th.cos()) / k]);
    }
    let th = k * arc;
    let end = *pts.last().unwrap();
    pts.push([end[0] + 30.0 * th.cos(), end[1] + 30.0 * th.sin()]);
    road_from_centerline(&pts, dp)
}

fn intersection(dp: &DomainParams) -> Layout {
    let w = dp.lane_width;
    let n = dp.lanes_per_direction;
    let half = n as f64 * w;
    let r0 = half + 4.0;
    let mut layout = Layout::default();
    let unit = |phi: f64| [phi.cos(), phi.sin()];
    let add = |a: [f64; 2], b: [f64; 2], s: f64| [a[0] + s * b[0], a[1] + s * b[1]];
    let arms: Vec<f64> = (0..4).map(|a| a as f64 * PI / 2.0).collect();
    // inbound[a][i]: (points, heading); outbound likewise
    let mut inbound = vec![vec![]; 4];
    let mut outbound = vec![vec![]; 4];
    for (a, &phi) in arms.iter().enumerate() {
        let u = unit(phi);
        let nrm = unit(phi + PI / 2.0);
        for i in 0..n {
            let o = (i as f64 + 0.5) * w;
            let inb = vec![add(add([0.0, 0.0], u, ARM_LENGTH), nrm, o), add(add([0.0, 0.0], u, r0), nrm, o)];
            let outb = vec![add(add([0.0, 0.0], u, r0), nrm, -o), add(add([0.0, 0.0], u, ARM_LENGTH), nrm, -o)];
            layout.polylines.push(to_map(MapKind::Lane, &inb));
            layout.polylines.push(to_map(MapKind::Lane, &outb));
            inbound[a].push(inb);
            outbound[a].push(outb);
        }
        for side in [-1.0, 1.0] {
            let e = vec![add(add([0.0, 0.0], u, r0), nrm, side * half), add(add([0.0, 0.0], u, ARM_LENGTH), nrm, side * half)];
            layout.polylines.push(to_map(MapKind::RoadEdge, &e));
            let walk = vec![
                add(add([0.0, 0.0], u, ARM_LENGTH), nrm, side * (half + 2.5)),
                add(add([0.0, 0.0], u, r0 - 1.0), nrm, side * (half + 2.5)),
            ];
            layout.walkways.push(Path::new(&walk));
        }
        if dp.crosswalks {
            let c = vec![add(add([0.0, 0.0], u, r0 - 2.0), nrm, -half - 1.0), add(add([0.0, 0.0], u, r0 - 2.0), nrm, half + 1.0)];
            layout.polylines.push(to_map(MapKind::Crosswalk, &c));
            layout.walkways.push(Path::new(&c));
        }
    }
    // connectors: straight for every lane, left from the inner lane, right from the outer lane
    for a in 0..4 {
        let in_heading = arms[a] + PI;
        for i in 0..n {
            let mut moves = vec![((a + 2) % 4, i, 1usize)];
            if i == 0 {
                moves.push(((a + 3) % 4, 0, 0));
            }
            if i == n - 1 {
                moves.push(((a + 1) % 4, n - 1, 2));
            }
            for (b, j, turn) in moves {
                let from = *inbound[a][i].last().unwrap();
                let to = outbound[b][j][0];
                let conn = bezier(from, in_heading, to, arms[b]);
                layout.polylines.push(to_map(MapKind::Lane, &conn));
                let mut full: Vec<[f64; 2]> = vec![inbound[a][i][0]];
                full.extend_from_slice(&conn);
                full.push(outbound[b][j][1]);
                let path = Path::new(&full);
                let junction = Some(ARM_LENGTH - r0);
                let route = Route { path, junction };
                // store the turn code in the ordering of `routes` via repetition weights
                layout.routes.push(route.clone());
                let _ = turn;
                if i == n - 1 && turn != 0 {
                    let offset_full: Vec<[f64; 2]> = Path::new(&full).offset(-(w / 2.0 - 0.7));
                    layout.bike_routes.push(Route {
                        path: Path::new(&offset_full),
                        junction: Some(ARM_LENGTH - r0),
                    });
                }
            }
        }
    }
    layout
}

/// Chooses a junction route honoring the domain's turn preferences.
fn pick_junction_route<'a, R: Rng>(layout: &'a Layout, dp: &DomainParams, rng: &mut R) -> &'a Route {
    // classify by net heading change
    let mut groups: [Vec<&Route>; 3] = [vec![], vec![], vec![]];
    for r in &layout.routes {
        let dh = r.path.heading.last().unwrap() - r.path.heading[0];
        let g = if dh > PI / 4.0 {
            0
        } else if dh < -PI / 4.0 {
            2
        } else {
            1
        };
        groups[g].push(r);
    }
    let weights: Vec<f64> = (0..3)
        .map(|g| if groups[g].is_empty() { 0.0 } else { dp.turn_probs[g] })
        .collect();
    let g = pick_weighted(rng, &weights);
    groups[g][rng.gen_range(0..groups[g].len())]
}

/// Speed limit along a route from curvature plus an optional yield zone.
fn speed_profile(route: &Route, cruise: f64, lateral_accel: f64, yield_speed: Option<f64>) -> impl Fn(f64) -> f64 + '_ {
    move |s: f64| {
        let k = route.path.curvature(s);
        let mut lim = if k > 1e-6 { (lateral_accel / k).sqrt() } else { f64::INFINITY };
        if let (Some(js), Some(v)) = (route.junction, yield_speed) {
            if (s - js).abs() < 2.0 {
                lim = lim.min(v);
            }
        }
        lim.min(cruise)
    }
}

/// Arc length and speed at each sample time for a route-following agent.
fn simulate_route(
    route: &Route,
    s0: f64,
    cruise: f64,
    dp: &DomainParams,
    yield_speed: Option<f64>,
    times: &[f64],
) -> Vec<(f64, f64)> {
    let limit = speed_profile(route, cruise, dp.lateral_accel, yield_speed);
    // desired speed on a 1 m grid: the speed limit, reduced so the vehicle can
    // brake comfortably for any slower section ahead (backward recursion)
    let span = cruise * times.last().copied().unwrap_or(0.0) + 80.0;
    let cells = span.ceil() as usize + 1;
    let mut desired: Vec<f64> = (0..cells).map(|i| limit(s0 + i as f64)).collect();
    for i in (0..cells - 1).rev() {
        desired[i] = desired[i].min((desired[i + 1].powi(2) + 2.0 * dp.decel).sqrt());
    }
    let desired_at = |s: f64| {
        let x = (s - s0).clamp(0.0, (cells - 1) as f64);
        let i = (x.floor() as usize).min(cells - 2);
        let f = x - i as f64;
        desired[i] + f * (desired[i + 1] - desired[i])
    };
    let substeps = 5;
    let mut out = Vec::with_capacity(times.len());
    let mut s = s0;
    let mut v = desired_at(s0);
    let mut t = 0.0;
    for &target in times {
        let dt = (target - t) / substeps as f64;
        if dt > 0.0 {
            for _ in 0..substeps {
                let a = ((desired_at(s) - v) / 0.6).clamp(-dp.decel * 1.6, dp.accel);
                v = (v + a * dt).max(0.0);
                s += v * dt;
            }
            t = target;
        }
        out.push((s, v));
    }
    out
}

fn dims_for<R: Rng>(kind: AgentType, rng: &mut R) -> [f64; 3] {
    let jitter = |rng: &mut R, m: f64, sd: f64, lo: f64| (m + sd * Normal::new(0.0, 1.0).unwrap().sample(rng)).max(lo);
    match kind {
        AgentType::Vehicle => [jitter(rng, 4.6, 0.3, 3.5), jitter(rng, 1.9, 0.08, 1.5), jitter(rng, 1.6, 0.15, 1.2)],
        AgentType::Cyclist => [jitter(rng, 1.8, 0.1, 1.4), jitter(rng, 0.6, 0.05, 0.4), jitter(rng, 1.7, 0.08, 1.4)],
        AgentType::Pedestrian => [jitter(rng, 0.6, 0.08, 0.3), jitter(rng, 0.6, 0.08, 0.3), jitter(rng, 1.75, 0.1, 1.4)],
    }
}

fn route_states(route: &Route, samples: &[(f64, f64)], times: &[f64], dims: [f64; 3]) -> Vec<AgentState> {
    samples
        .iter()
        .zip(times)
        .map(|(&(s, v), &t)| {
            let (p, h) = route.path.at(s);
            AgentState {
                t,
                center: [p[0], p[1], 0.0],
                velocity: [v * h.cos(), v * h.sin()],
                heading: normalize_angle(h),
                dims,
                valid: true,
            }
        })
        .collect()
}

/// Constant speed, constant turn rate motion.
fn turn_rate_states(p0: [f64; 2], h0: f64, speed: f64, omega: f64, times: &[f64], dims: [f64; 3]) -> Vec<AgentState> {
    times
        .iter()
        .map(|&t| {
            let h = h0 + omega * t;
            let (x, y) = if omega.abs() < 1e-9 {
                (p0[0] + speed * t * h0.cos(), p0[1] + speed * t * h0.sin())
            } else {
                (
                    p0[0] + speed / omega * (h.sin() - h0.sin()),
                    p0[1] - speed / omega * (h.cos() - h0.cos()),
                )
            };
            AgentState {
                t,
                center: [x, y, 0.0],
                velocity: [speed * h.cos(), speed * h.sin()],
                heading: normalize_angle(h),
                dims,
                valid: true,
            }
        })
        .collect()
}

fn scenario_rng(cfg: &GeneratorConfig, index: usize) -> ChaCha8Rng {
    let mixed = (cfg.seed ^ cfg.preset.salt().rotate_left(32)) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn one_scenario(cfg: &GeneratorConfig, index: usize) -> Result<Scenario> {
    let dp = domain(cfg.preset);
    let mut rng = scenario_rng(cfg, index);
    let n_states = (cfg.duration * cfg.rate).round() as usize + 1;
    let times: Vec<f64> = (0..n_states).map(|i| i as f64 / cfg.rate).collect();
    let t_now = times[cfg.current_index];

    let layout_kind = pick_weighted(&mut rng, &dp.layout);
    let layout = match layout_kind {
        0 => straight_road(&dp),
        1 => curved_road(&dp, &mut rng),
        _ => intersection(&dp),
    };

    let extra = rng.gen_range(dp.extra_agents.0..=dp.extra_agents.1);
    let phase: f64 = rng.gen();
    let golden = 0.618_033_988_749_894_9;
    let mut agents = Vec::with_capacity(extra + 1);
    for j in 0..=extra {
        let u = (phase + j as f64 * golden).fract();
        let kind = AgentType::ALL[if u < dp.type_mix[0] {
            0
        } else if u < dp.type_mix[0] + dp.type_mix[1] {
            1
        } else {
            2
        }];
        let focal = j == 0;
        let dims = dims_for(kind, &mut rng);
        let states = match kind {
            AgentType::Vehicle if !focal && rng.gen_bool(dp.free_vehicle_prob) => {
                let r = &layout.routes[rng.gen_range(0..layout.routes.len())];
                let (p, h) = r.path.at(rng.gen_range(0.0..r.path.length() * 0.5));
                let speed = rng.gen_range(4.0..9.0);
                let omega = Normal::new(0.0, 0.08).unwrap().sample(&mut rng);
                turn_rate_states(p, h + Normal::new(0.0, 0.1).unwrap().sample(&mut rng), speed, omega, &times, dims)
            }
            AgentType::Vehicle | AgentType::Cyclist => {
                let (route, cruise) = if kind == AgentType::Vehicle {
                    let route = if layout_kind == 2 && (focal || rng.gen_bool(0.7)) {
                        pick_junction_route(&layout, &dp, &mut rng)
                    } else {
                        &layout.routes[rng.gen_range(0..layout.routes.len())]
                    };
                    let cruise = (dp.speed_mean + dp.speed_sd * Normal::new(0.0, 1.0).unwrap().sample(&mut rng))
                        .clamp(3.0, dp.speed_mean + 3.0 * dp.speed_sd);
                    (route, cruise)
                } else {
                    let route = &layout.bike_routes[rng.gen_range(0..layout.bike_routes.len())];
                    (route, rng.gen_range(3.0..7.0))
                };
                let s0 = match route.junction {
                    Some(js) if focal => js - cruise * rng.gen_range(1.0..3.5),
                    Some(js) => js - cruise * rng.gen_range(-1.0..4.0),
                    None if focal => rng.gen_range(0.0..route.path.length() * 0.35),
                    None => rng.gen_range(0.0..route.path.length() * 0.6),
                };
                let yield_speed = if route.junction.is_some() && rng.gen_bool(dp.yield_prob) {
                    Some(rng.gen_range(0.5..2.0))
                } else {
                    None
                };
                let samples = simulate_route(route, s0, cruise, &dp, yield_speed, &times);
                route_states(route, &samples, &times, dims)
            }
            AgentType::Pedestrian => {
                let walk = &layout.walkways[rng.gen_range(0..layout.walkways.len())];
                let forward = rng.gen_bool(0.5);
                let len = walk.length();
                let s = rng.gen_range(0.0..len);
                let (p, h) = walk.at(s);
                let h = if forward { h } else { h + PI };
                let speed = rng.gen_range(0.8..1.8);
                let omega = Normal::new(0.0, 0.03).unwrap().sample(&mut rng);
                turn_rate_states(p, h, speed, omega, &times, dims)
            }
        };
        let mut states = states;
        if !focal && rng.gen_bool(0.2) {
            let appear = rng.gen_range(1..=cfg.current_index.max(1));
            for st in states.iter_mut().take(appear) {
                *st = AgentState::invalid(st.t);
            }
        }
        agents.push(AgentTrack {
            id: j as u32,
            kind,
            states,
        });
    }

    // place the whole scene at a random pose in the world
    let yaw = rng.gen_range(-PI..PI);
    let shift = [rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0)];
    let (sin, cos) = yaw.sin_cos();
    let place = |p: [f64; 3]| [cos * p[0] - sin * p[1] + shift[0], sin * p[0] + cos * p[1] + shift[1], p[2]];
    let mut polylines = layout.polylines;
    for p in &mut polylines {
        for pt in &mut p.points {
            *pt = place(*pt);
        }
    }
    for a in &mut agents {
        for st in a.states.iter_mut().filter(|s| s.valid) {
            st.center = place(st.center);
            st.velocity = [cos * st.velocity[0] - sin * st.velocity[1], sin * st.velocity[0] + cos * st.velocity[1]];
            st.heading = normalize_angle(st.heading + yaw);
        }
    }
    let _ = t_now;
    let scenario = Scenario {
        id: format!("{}-{:016x}-{index:05}", cfg.preset, cfg.seed),
        duration: cfg.duration,
        sample_rate: cfg.rate,
        polylines,
        agents,
        focal_id: 0,
        current_index: cfg.current_index,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Generates `cfg.count` scenarios; scenario `i` depends only on `(seed, preset, i)`.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<Vec<Scenario>> {
    cfg.validate()?;
    (0..cfg.count).into_par_iter().map(|i| one_scenario(cfg, i)).collect()
}
