//! Turns an ego-frame scenario into polyline tensors and supervision targets.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scene::{AgentState, Scenario};
use crate::tensor::Tensor;

/// Per-point channels of an agent polyline.
pub const AGENT_CHANNELS: usize = 14;
/// Per-point channels of a map polyline.
pub const MAP_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolylineKind {
    Agents,
    Map,
}

/// `N × P × C` polyline tensor with an `N × P` validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PolylineBatch {
    pub kind: PolylineKind,
    pub data: Tensor,
    pub mask: Vec<bool>,
}

impl PolylineBatch {
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn mask_row(&self, i: usize) -> &[bool] {
        let p = self.points();
        &self.mask[i * p..(i + 1) * p]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorizeConfig {
    /// History samples including the current one.
    pub history: usize,
    /// Future samples after the current one.
    pub future: usize,
    /// Points per map segment.
    pub map_points: usize,
    /// Keep at most this many agents (focal plus nearest others).
    pub max_agents: usize,
    /// Keep at most this many map segments (nearest centroids).
    pub max_map: usize,
}

impl Default for VectorizeConfig {
    fn default() -> Self {
        Self {
            history: 11,
            future: 30,
            map_points: 20,
            max_agents: 8,
            max_map: 24,
        }
    }
}

impl VectorizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.future == 0 {
            return Err(Error::Config("history and future lengths must be positive".into()));
        }
        if self.map_points < 2 {
            return Err(Error::Config("map segments need at least 2 points".into()));
        }
        if self.max_agents == 0 {
            return Err(Error::Config("max_agents must be at least 1".into()));
        }
        Ok(())
    }
}

/// Model inputs and targets for one scenario, focal agent first.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub agents: PolylineBatch,
    pub map: PolylineBatch,
    /// Token positions: each agent's latest observed position.
    pub agent_pos: Vec<[f64; 2]>,
    /// Token positions: map segment centroids.
    pub map_pos: Vec<[f64; 2]>,
    /// Focal future positions, `T × 2`.
    pub gt: Tensor,
    /// Focal future headings.
    pub gt_heading: Vec<f64>,
    /// Focal speed at the current step.
    pub speed: f64,
    /// Dense targets per agent: displacement from its token position and velocity, `N_a × T × 4`.
    pub agent_future: Tensor,
    /// Validity of `agent_future`, `N_a × T`.
    pub agent_future_mask: Vec<bool>,
    pub sample_rate: f64,
}

impl SceneSample {
    pub fn horizon(&self) -> usize {
        self.gt.shape()[0]
    }

    pub fn endpoint(&self) -> [f64; 2] {
        let t = self.horizon();
        [self.gt.at2(t - 1, 0), self.gt.at2(t - 1, 1)]
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn agent_row(st: &AgentState, one_hot: [f64; 3], time: f64) -> [f64; AGENT_CHANNELS] {
    let (s, c) = st.heading.sin_cos();
    [
        st.center[0],
        st.center[1],
        st.center[2],
        st.velocity[0],
        st.velocity[1],
        s,
        c,
        st.dims[0],
        st.dims[1],
        st.dims[2],
        one_hot[0],
        one_hot[1],
        one_hot[2],
        time,
    ]
}

/// Vectorizes an ego-frame scenario.
pub fn vectorize(s: &Scenario, cfg: &VectorizeConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let cur = s.current_index;
    let n_states = s.state_count();
    if cur + 1 < cfg.history {
        return Err(Error::Input(format!(
            "scenario {}: current index {cur} leaves fewer than {} history samples",
            s.id, cfg.history
        )));
    }
    if cur + cfg.future >= n_states {
        return Err(Error::Input(format!(
            "scenario {}: {} future samples requested, {} available",
            s.id,
            cfg.future,
            n_states - 1 - cur
        )));
    }
    let h0 = cur + 1 - cfg.history;
    let dt = 1.0 / s.sample_rate;

    // candidates: agents observed at least once in the history window
    let focal_idx = s.focal_index()?;
    let mut picked: Vec<(usize, [f64; 2])> = Vec::new();
    for (i, a) in s.agents.iter().enumerate() {
        if let Some(last) = a.states[h0..=cur].iter().rev().find(|st| st.valid) {
            picked.push((i, last.xy()));
        }
    }
    if picked.is_empty() {
        return Err(Error::Input(format!("scenario {}: no agents observed in history", s.id)));
    }
    let focal_pos = picked
        .iter()
        .find(|(i, _)| *i == focal_idx)
        .map(|p| p.1)
        .ok_or_else(|| Error::Input(format!("scenario {}: focal agent unobserved in history", s.id)))?;
    let focal = &s.agents[focal_idx];
    if !focal.states[cur..=cur + cfg.future].iter().all(|st| st.valid) {
        return Err(Error::Input(format!("scenario {}: focal future incomplete", s.id)));
    }
    picked.sort_by(|a, b| {
        let fa = a.0 != focal_idx;
        let fb = b.0 != focal_idx;
        fa.cmp(&fb)
            .then(dist2(a.1, focal_pos).partial_cmp(&dist2(b.1, focal_pos)).unwrap_or(Ordering::Equal))
            .then(s.agents[a.0].id.cmp(&s.agents[b.0].id))
    });
    picked.truncate(cfg.max_agents);

    let n_a = picked.len();
    let h = cfg.history;
    let t_len = cfg.future;
    let mut a_data = vec![0.0; n_a * h * AGENT_CHANNELS];
    let mut a_mask = vec![false; n_a * h];
    let mut fut = vec![0.0; n_a * t_len * 4];
    let mut fut_mask = vec![false; n_a * t_len];
    let mut agent_pos = Vec::with_capacity(n_a);
    for (r, &(ai, pos)) in picked.iter().enumerate() {
        let a = &s.agents[ai];
        let one_hot = a.kind.one_hot();
        for j in 0..h {
            let st = &a.states[h0 + j];
            if st.valid {
                let time = (j as f64 - (h - 1) as f64) * dt;
                let row = agent_row(st, one_hot, time);
                a_data[(r * h + j) * AGENT_CHANNELS..(r * h + j + 1) * AGENT_CHANNELS].copy_from_slice(&row);
                a_mask[r * h + j] = true;
            }
        }
        for t in 0..t_len {
            let st = &a.states[cur + 1 + t];
            if st.valid {
                let o = (r * t_len + t) * 4;
                fut[o] = st.center[0] - pos[0];
                fut[o + 1] = st.center[1] - pos[1];
                fut[o + 2] = st.velocity[0];
                fut[o + 3] = st.velocity[1];
                fut_mask[r * t_len + t] = true;
            }
        }
        agent_pos.push(pos);
    }

    // map: split each polyline into overlapping fixed-length segments
    let p = cfg.map_points;
    let mut segments: Vec<(Vec<[f64; MAP_CHANNELS]>, [f64; 2])> = Vec::new();
    for poly in &s.polylines {
        let pts = &poly.points;
        let one_hot = poly.kind.one_hot();
        let dir = |i: usize| -> [f64; 2] {
            let (a, b) = if i + 1 < pts.len() {
                (pts[i], pts[i + 1])
            } else if i > 0 {
                (pts[i - 1], pts[i])
            } else {
                return [0.0, 0.0];
            };
            let d = [b[0] - a[0], b[1] - a[1]];
            let n = d[0].hypot(d[1]);
            if n > 0.0 {
                [d[0] / n, d[1] / n]
            } else {
                [0.0, 0.0]
            }
        };
        let mut start = 0;
        loop {
            let end = (start + p).min(pts.len());
            let rows: Vec<[f64; MAP_CHANNELS]> = (start..end)
                .map(|i| {
                    let d = dir(i);
                    [pts[i][0], pts[i][1], pts[i][2], d[0], d[1], one_hot[0], one_hot[1], one_hot[2]]
                })
                .collect();
            let k = rows.len() as f64;
            let centroid = [
                rows.iter().map(|r| r[0]).sum::<f64>() / k,
                rows.iter().map(|r| r[1]).sum::<f64>() / k,
            ];
            segments.push((rows, centroid));
            if end >= pts.len() {
                break;
            }
            start = end - 1;
        }
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| {
        dist2(segments[a].1, focal_pos)
            .partial_cmp(&dist2(segments[b].1, focal_pos))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(cfg.max_map);
    let n_m = order.len();
    let mut m_data = vec![0.0; n_m * p * MAP_CHANNELS];
    let mut m_mask = vec![false; n_m * p];
    let mut map_pos = Vec::with_capacity(n_m);
    for (r, &si) in order.iter().enumerate() {
        let (rows, centroid) = &segments[si];
        for (j, row) in rows.iter().enumerate() {
            m_data[(r * p + j) * MAP_CHANNELS..(r * p + j + 1) * MAP_CHANNELS].copy_from_slice(row);
            m_mask[r * p + j] = true;
        }
        map_pos.push(*centroid);
    }

    let gt_states = &focal.states[cur + 1..=cur + t_len];
    let gt: Vec<f64> = gt_states.iter().flat_map(|st| [st.center[0], st.center[1]]).collect();
    Ok(SceneSample {
        id: s.id.clone(),
        agents: PolylineBatch {
            kind: PolylineKind::Agents,
            data: Tensor::new(&[n_a, h, AGENT_CHANNELS], a_data)?,
            mask: a_mask,
        },
        map: PolylineBatch {
            kind: PolylineKind::Map,
            data: Tensor::new(&[n_m, p, MAP_CHANNELS], m_data)?,
            mask: m_mask,
        },
        agent_pos,
        map_pos,
        gt: Tensor::new(&[t_len, 2], gt)?,
        gt_heading: gt_states.iter().map(|st| st.heading).collect(),
        speed: focal.states[cur].speed(),
        agent_future: Tensor::new(&[n_a, t_len, 4], fut)?,
        agent_future_mask: fut_mask,
        sample_rate: s.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{AgentTrack, AgentType, MapKind, MapPolyline};

    fn st(t: f64, x: f64, valid: bool) -> AgentState {
        if !valid {
            return AgentState::invalid(t);
        }
        AgentState {
            t,
            center: [x, 0.0, 0.0],
            velocity: [1.0, 0.0],
            heading: 0.0,
            dims: [4.0, 2.0, 1.5],
            valid: true,
        }
    }

    fn scene(appear: &[usize]) -> Scenario {
        let n = 41;
        Scenario {
            id: "v".into(),
            duration: 4.0,
            sample_rate: 10.0,
            polylines: vec![MapPolyline {
                kind: MapKind::Lane,
                points: (0..45).map(|i| [i as f64, 2.0, 0.0]).collect(),
            }],
            agents: appear
                .iter()
                .enumerate()
                .map(|(id, &a)| AgentTrack {
                    id: id as u32,
                    kind: AgentType::Vehicle,
                    states: (0..n).map(|i| st(i as f64 / 10.0, i as f64 * 0.1 + id as f64, i >= a)).collect(),
                })
                .collect(),
            focal_id: 0,
            current_index: 10,
        }
    }

    #[test]
    fn shapes_and_masks() {
        let s = scene(&[0, 0, 5]);
        let cfg = VectorizeConfig {
            future: 30,
            ..VectorizeConfig::default()
        };
        let v = vectorize(&s, &cfg).unwrap();
        assert_eq!(v.agents.data.shape(), &[3, 11, AGENT_CHANNELS]);
        assert!(v.agents.mask_row(0).iter().all(|&m| m));
        assert_eq!(v.agents.mask_row(2)[..5], [false; 5]);
        assert!(v.agents.mask_row(2)[5..].iter().all(|&m| m));
        // 45 points split into 20 + 20 + 7 with one shared point per boundary
        assert_eq!(v.map.len(), 3);
        assert_eq!(v.agent_future.shape(), &[3, 30, 4]);
        assert_eq!(v.gt.shape(), &[30, 2]);
    }

    #[test]
    fn too_short_future_rejected() {
        let s = scene(&[0]);
        let cfg = VectorizeConfig {
            future: 31,
            ..VectorizeConfig::default()
        };
        assert!(matches!(vectorize(&s, &cfg), Err(Error::Input(_))));
    }
}
