//! Rigid transform into the focal agent's reference frame.

use crate::error::{Error, Result};
use crate::scene::{normalize_angle, AgentState, Scenario};

/// World → ego transform: translate by `-origin`, then rotate by `-yaw`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoTransform {
    pub origin: [f64; 3],
    pub yaw: f64,
}

impl EgoTransform {
    /// Frame of the focal agent at the scenario's current step.
    pub fn from_focal(s: &Scenario) -> Result<Self> {
        let focal = s.focal()?;
        let st = focal
            .states
            .get(s.current_index)
            .filter(|st| st.valid)
            .ok_or_else(|| {
                Error::Degenerate(format!(
                    "scenario {}: focal agent {} invalid at current step {}",
                    s.id, s.focal_id, s.current_index
                ))
            })?;
        Ok(Self {
            origin: st.center,
            yaw: st.heading,
        })
    }

    pub fn point(&self, p: [f64; 3]) -> [f64; 3] {
        let (sin, cos) = self.yaw.sin_cos();
        let x = p[0] - self.origin[0];
        let y = p[1] - self.origin[1];
        [cos * x + sin * y, -sin * x + cos * y, p[2] - self.origin[2]]
    }

    pub fn vector(&self, v: [f64; 2]) -> [f64; 2] {
        let (sin, cos) = self.yaw.sin_cos();
        [cos * v[0] + sin * v[1], -sin * v[0] + cos * v[1]]
    }

    pub fn inverse_point(&self, p: [f64; 3]) -> [f64; 3] {
        let (sin, cos) = self.yaw.sin_cos();
        [
            cos * p[0] - sin * p[1] + self.origin[0],
            sin * p[0] + cos * p[1] + self.origin[1],
            p[2] + self.origin[2],
        ]
    }

    pub fn inverse_vector(&self, v: [f64; 2]) -> [f64; 2] {
        let (sin, cos) = self.yaw.sin_cos();
        [cos * v[0] - sin * v[1], sin * v[0] + cos * v[1]]
    }

    fn state(&self, s: &AgentState, forward: bool) -> AgentState {
        if !s.valid {
            return *s;
        }
        let (center, velocity, heading) = if forward {
            (self.point(s.center), self.vector(s.velocity), s.heading - self.yaw)
        } else {
            (self.inverse_point(s.center), self.inverse_vector(s.velocity), s.heading + self.yaw)
        };
        AgentState {
            center,
            velocity,
            heading: normalize_angle(heading),
            ..*s
        }
    }

    fn scenario(&self, s: &Scenario, forward: bool) -> Scenario {
        let mut out = s.clone();
        for p in &mut out.polylines {
            for pt in &mut p.points {
                *pt = if forward { self.point(*pt) } else { self.inverse_point(*pt) };
            }
        }
        for a in &mut out.agents {
            for st in &mut a.states {
                *st = self.state(st, forward);
            }
        }
        out
    }

    pub fn apply(&self, s: &Scenario) -> Scenario {
        self.scenario(s, true)
    }

    pub fn to_world(&self, s: &Scenario) -> Scenario {
        self.scenario(s, false)
    }
}

/// Re-expresses a scenario so the focal agent sits at the origin facing +x.
pub fn to_ego_frame(s: &Scenario) -> Result<Scenario> {
    Ok(EgoTransform::from_focal(s)?.apply(s))
}
