//! Scenario representation and the data pipeline that turns raw agent
//! tracks and road geometry into vectorized model inputs.

pub mod dataset;
pub mod ego;
pub mod generate;
pub mod ingest;
pub mod pchip;
pub mod vectorize;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{load_dataset, save_dataset, Dataset, DatasetRole, SplitName, Splits};
pub use ego::{to_ego_frame, EgoTransform};
pub use generate::{generate_synthetic, GeneratorConfig, Preset};
pub use pchip::pchip_resample;
pub use vectorize::{vectorize, PolylineBatch, PolylineKind, SceneSample, VectorizeConfig};

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentType {
    Vehicle,
    Cyclist,
    Pedestrian,
}

impl AgentType {
    pub const ALL: [AgentType; 3] = [AgentType::Vehicle, AgentType::Cyclist, AgentType::Pedestrian];

    /// Wire and file code: 1 vehicle, 2 cyclist, 3 pedestrian.
    pub fn code(self) -> u8 {
        match self {
            Self::Vehicle => 1,
            Self::Cyclist => 2,
            Self::Pedestrian => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Self::Vehicle),
            2 => Ok(Self::Cyclist),
            3 => Ok(Self::Pedestrian),
            other => Err(Error::Input(format!("unknown agent type code {other}"))),
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.code() as usize - 1] = 1.0;
        v
    }
}

/// Kinematic state of one agent at one timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub t: f64,
    pub center: [f64; 3],
    pub velocity: [f64; 2],
    /// Radians in `(-pi, pi]`.
    pub heading: f64,
    /// Length, width, height in meters.
    pub dims: [f64; 3],
    pub valid: bool,
}

impl AgentState {
    pub fn invalid(t: f64) -> Self {
        Self {
            t,
            center: [0.0; 3],
            velocity: [0.0; 2],
            heading: 0.0,
            dims: [0.0; 3],
            valid: false,
        }
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.center[0], self.center[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u32,
    pub kind: AgentType,
    pub states: Vec<AgentState>,
}

impl AgentTrack {
    pub fn first_valid(&self) -> Option<usize> {
        self.states.iter().position(|s| s.valid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MapKind {
    Lane,
    RoadEdge,
    Crosswalk,
}

impl MapKind {
    pub const ALL: [MapKind; 3] = [MapKind::Lane, MapKind::RoadEdge, MapKind::Crosswalk];

    pub fn code(self) -> u8 {
        match self {
            Self::Lane => 0,
            Self::RoadEdge => 1,
            Self::Crosswalk => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Self::Lane),
            1 => Ok(Self::RoadEdge),
            2 => Ok(Self::Crosswalk),
            other => Err(Error::Format(format!("unknown map polyline code {other}"))),
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.code() as usize] = 1.0;
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    pub kind: MapKind,
    pub points: Vec<[f64; 3]>,
}

/// One recorded traffic situation: road geometry, agent tracks on a shared
/// time base and the agent whose future is predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub duration: f64,
    pub sample_rate: f64,
    pub polylines: Vec<MapPolyline>,
    pub agents: Vec<AgentTrack>,
    pub focal_id: u32,
    /// Index of the current step; states up to and including it are history.
    pub current_index: usize,
}

impl Scenario {
    /// Number of states every track must carry.
    pub fn state_count(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize + 1
    }

    pub fn focal(&self) -> Result<&AgentTrack> {
        self.agents
            .iter()
            .find(|a| a.id == self.focal_id)
            .ok_or_else(|| Error::Input(format!("scenario {}: focal agent {} missing", self.id, self.focal_id)))
    }

    pub fn focal_index(&self) -> Result<usize> {
        self.agents
            .iter()
            .position(|a| a.id == self.focal_id)
            .ok_or_else(|| Error::Input(format!("scenario {}: focal agent {} missing", self.id, self.focal_id)))
    }

    /// Checks the structural invariants of a scenario.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(format!("scenario {}: {msg}", self.id)));
        if !(self.duration > 0.0 && self.sample_rate > 0.0) {
            return bad("duration and sample rate must be positive".into());
        }
        let n = self.state_count();
        if ((n - 1) as f64 - self.duration * self.sample_rate).abs() > 1e-6 {
            return bad(format!(
                "duration {} s at {} Hz is not a whole number of steps",
                self.duration, self.sample_rate
            ));
        }
        if self.current_index >= n {
            return bad(format!("current index {} outside {n} states", self.current_index));
        }
        let mut ids: Vec<u32> = self.agents.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate agent ids".into());
        }
        if self.agents.iter().filter(|a| a.id == self.focal_id).count() != 1 {
            return bad(format!("focal agent {} not present exactly once", self.focal_id));
        }
        for a in &self.agents {
            if a.states.len() != n {
                return bad(format!("agent {} has {} states, expected {n}", a.id, a.states.len()));
            }
            for (i, s) in a.states.iter().enumerate() {
                let t = i as f64 / self.sample_rate;
                if (s.t - t).abs() > 1e-6 {
                    return bad(format!("agent {} state {i} at t={} off the time base", a.id, s.t));
                }
                if !s.valid {
                    continue;
                }
                let finite = s.center.iter().chain(&s.velocity).chain(&s.dims).all(|v| v.is_finite())
                    && s.heading.is_finite();
                if !finite {
                    return bad(format!("agent {} state {i} has non-finite values", a.id));
                }
                if !(s.heading > -PI - 1e-12 && s.heading <= PI + 1e-12) {
                    return bad(format!("agent {} heading {} not normalized", a.id, s.heading));
                }
                if s.dims.iter().any(|d| *d <= 0.0) {
                    return bad(format!("agent {} has non-positive dimensions", a.id));
                }
            }
        }
        for p in &self.polylines {
            if p.points.is_empty() || p.points.iter().flatten().any(|v| !v.is_finite()) {
                return bad("map polyline empty or non-finite".into());
            }
        }
        Ok(())
    }
}

impl fmt::Display for AgentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vehicle => "vehicle",
            Self::Cyclist => "cyclist",
            Self::Pedestrian => "pedestrian",
        })
    }
}

impl FromStr for AgentType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vehicle" => Ok(Self::Vehicle),
            "cyclist" => Ok(Self::Cyclist),
            "pedestrian" => Ok(Self::Pedestrian),
            other => Err(Error::Config(format!("unknown agent type '{other}'"))),
        }
    }
}
