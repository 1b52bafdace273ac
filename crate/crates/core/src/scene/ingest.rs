//! Simulator bridge: agent-state datagrams in, resampled scenarios out.
//!
//! Wire format, one record per datagram:
//! `id|t|x|y|z|vx|vy|heading|length|width|height|type` where type is
//! 1 vehicle, 2 cyclist, 3 pedestrian. `END|<scenario id>` closes the
//! current scenario.

use std::collections::BTreeMap;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scene::pchip::{unwrap_angles, Pchip};
use crate::scene::{normalize_angle, AgentState, AgentTrack, AgentType, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub enum Datagram {
    Record { id: u32, kind: AgentType, state: AgentState },
    End(String),
}

pub fn parse_datagram(text: &str) -> Result<Datagram> {
    let text = text.trim_end_matches(['\n', '\r']);
    let fields: Vec<&str> = text.split('|').collect();
    if fields[0] == "END" {
        return match fields.as_slice() {
            [_, id] if !id.trim().is_empty() => Ok(Datagram::End(id.trim().to_string())),
            _ => Err(Error::Input(format!("malformed end marker '{text}'"))),
        };
    }
    if fields.len() != 12 {
        return Err(Error::Input(format!("expected 12 fields, got {}", fields.len())));
    }
    let id: u32 = fields[0]
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("bad agent id '{}'", fields[0])))?;
    let mut v = [0.0; 10];
    for (slot, f) in v.iter_mut().zip(&fields[1..11]) {
        *slot = f
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::Input(format!("bad number '{f}'")))?;
    }
    let code: u8 = fields[11]
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("bad type code '{}'", fields[11])))?;
    let kind = AgentType::from_code(code)?;
    if v[0] < 0.0 {
        return Err(Error::Input(format!("negative timestamp {}", v[0])));
    }
    if v[7..10].iter().any(|d| *d <= 0.0) {
        return Err(Error::Input("dimensions must be positive".into()));
    }
    Ok(Datagram::Record {
        id,
        kind,
        state: AgentState {
            t: v[0],
            center: [v[1], v[2], v[3]],
            velocity: [v[4], v[5]],
            heading: normalize_angle(v[6]),
            dims: [v[7], v[8], v[9]],
            valid: true,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    /// Output sampling rate in Hz.
    pub rate: f64,
    pub current_index: usize,
    /// Records older than the newest timestamp minus this many seconds are dropped.
    pub reorder_window: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            rate: 10.0,
            current_index: 10,
            reorder_window: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub records: u64,
    pub malformed: u64,
    pub late: u64,
    pub duplicates: u64,
    pub scenarios: u64,
    pub rejected_scenarios: u64,
}

/// Collects records of one scenario, kept sorted per agent.
#[derive(Debug, Default)]
pub struct ScenarioBuilder {
    tracks: BTreeMap<u32, (AgentType, Vec<AgentState>)>,
    newest: Option<f64>,
}

impl ScenarioBuilder {
    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    fn push(&mut self, id: u32, kind: AgentType, state: AgentState, window: f64, stats: &mut IngestStats) {
        if let Some(newest) = self.newest {
            if state.t < newest - window {
                stats.late += 1;
                return;
            }
        }
        self.newest = Some(self.newest.map_or(state.t, |n| n.max(state.t)));
        let (_, states) = self.tracks.entry(id).or_insert_with(|| (kind, Vec::new()));
        match states.binary_search_by(|s| s.t.partial_cmp(&state.t).expect("finite")) {
            Ok(i) => {
                states[i] = state;
                stats.duplicates += 1;
            }
            Err(i) => states.insert(i, state),
        }
        stats.records += 1;
    }

    /// Raw (not yet resampled) states of one agent, sorted by time.
    pub fn track(&self, id: u32) -> Option<&[AgentState]> {
        self.tracks.get(&id).map(|(_, s)| s.as_slice())
    }

    /// Resamples every track onto `k / rate` and assembles a scenario.
    pub fn finish(self, id: &str, cfg: &IngestConfig) -> Result<Scenario> {
        let newest = self
            .newest
            .ok_or_else(|| Error::Input(format!("scenario {id}: no records before end marker")))?;
        let last_k = (newest * cfg.rate + 1e-9).floor() as usize;
        let grid: Vec<f64> = (0..=last_k).map(|k| k as f64 / cfg.rate).collect();
        let current_index = cfg.current_index.min(last_k);
        let mut agents = Vec::with_capacity(self.tracks.len());
        for (aid, (kind, states)) in self.tracks {
            agents.push(AgentTrack {
                id: aid,
                kind,
                states: resample_track(&states, &grid)?,
            });
        }
        let focal_id = agents
            .iter()
            .find(|a| a.states[current_index].valid)
            .or_else(|| agents.first())
            .map(|a| a.id)
            .expect("at least one track");
        let s = Scenario {
            id: id.to_string(),
            duration: last_k as f64 / cfg.rate,
            sample_rate: cfg.rate,
            polylines: Vec::new(),
            agents,
            focal_id,
            current_index,
        };
        s.validate()?;
        Ok(s)
    }
}

fn resample_track(states: &[AgentState], grid: &[f64]) -> Result<Vec<AgentState>> {
    let tol = 1e-9;
    let (first, last) = (states[0].t, states[states.len() - 1].t);
    if states.len() == 1 {
        return Ok(grid
            .iter()
            .map(|&t| {
                if (t - first).abs() < tol {
                    AgentState { t, ..states[0] }
                } else {
                    AgentState::invalid(t)
                }
            })
            .collect());
    }
    let times: Vec<f64> = states.iter().map(|s| s.t).collect();
    let channel = |f: &dyn Fn(&AgentState) -> f64| Pchip::new(&times, &states.iter().map(f).collect::<Vec<_>>());
    let headings = unwrap_angles(&states.iter().map(|s| s.heading).collect::<Vec<_>>());
    let interps = [
        channel(&|s| s.center[0])?,
        channel(&|s| s.center[1])?,
        channel(&|s| s.center[2])?,
        channel(&|s| s.velocity[0])?,
        channel(&|s| s.velocity[1])?,
        Pchip::new(&times, &headings)?,
        channel(&|s| s.dims[0])?,
        channel(&|s| s.dims[1])?,
        channel(&|s| s.dims[2])?,
    ];
    grid.iter()
        .map(|&t| {
            if t < first - tol || t > last + tol {
                return Ok(AgentState::invalid(t));
            }
            let q = t.clamp(first, last);
            let mut v = [0.0; 9];
            for (slot, p) in v.iter_mut().zip(&interps) {
                *slot = p.eval(q)?;
            }
            Ok(AgentState {
                t,
                center: [v[0], v[1], v[2]],
                velocity: [v[3], v[4]],
                heading: normalize_angle(v[5]),
                dims: [v[6], v[7], v[8]],
                valid: true,
            })
        })
        .collect()
}

/// Line-at-a-time ingestion state machine shared by the socket listener and replay.
#[derive(Debug, Default)]
pub struct Ingestor {
    cfg: IngestConfig,
    builder: ScenarioBuilder,
    stats: IngestStats,
}

impl Ingestor {
    pub fn new(cfg: IngestConfig) -> Self {
        Self {
            cfg,
            builder: ScenarioBuilder::default(),
            stats: IngestStats::default(),
        }
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    pub fn builder(&self) -> &ScenarioBuilder {
        &self.builder
    }

    /// Feeds one datagram; returns a scenario when an end marker completes one.
    pub fn push(&mut self, text: &str) -> Option<Scenario> {
        match parse_datagram(text) {
            Err(e) => {
                log::debug!("skipping malformed record: {e}");
                self.stats.malformed += 1;
                None
            }
            Ok(Datagram::Record { id, kind, state }) => {
                self.builder.push(id, kind, state, self.cfg.reorder_window, &mut self.stats);
                None
            }
            Ok(Datagram::End(id)) => {
                let builder = std::mem::take(&mut self.builder);
                match builder.finish(&id, &self.cfg) {
                    Ok(s) => {
                        self.stats.scenarios += 1;
                        Some(s)
                    }
                    Err(e) => {
                        log::warn!("dropping scenario {id}: {e}");
                        self.stats.rejected_scenarios += 1;
                        None
                    }
                }
            }
        }
    }

    pub fn push_bytes(&mut self, bytes: &[u8]) -> Option<Scenario> {
        match std::str::from_utf8(bytes) {
            Ok(text) => self.push(text),
            Err(_) => {
                self.stats.malformed += 1;
                None
            }
        }
    }
}

/// Replays a capture with one datagram per line.
pub fn ingest_lines<'a>(lines: impl IntoIterator<Item = &'a str>, cfg: IngestConfig) -> (Vec<Scenario>, IngestStats) {
    let mut ing = Ingestor::new(cfg);
    let scenarios = lines.into_iter().filter(|l| !l.trim().is_empty()).filter_map(|l| ing.push(l)).collect();
    (scenarios, ing.stats())
}

#[derive(Debug, Clone, Default)]
pub struct ListenOptions {
    /// Stop after this many scenarios.
    pub max_scenarios: Option<usize>,
    /// Stop when no datagram arrives for this long.
    pub idle_timeout: Option<Duration>,
    /// Stop when set from another thread (signal handlers, tests).
    pub stop: Option<Arc<AtomicBool>>,
}

pub struct UdpListener {
    socket: UdpSocket,
}

impl UdpListener {
    pub fn bind(addr: &str) -> Result<Self> {
        let socket = UdpSocket::bind(addr).map_err(|e| Error::Startup(format!("cannot bind {addr}: {e}")))?;
        socket
            .set_read_timeout(Some(Duration::from_millis(50)))
            .map_err(|e| Error::Startup(format!("cannot configure socket: {e}")))?;
        Ok(Self { socket })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.socket.local_addr()?)
    }

    /// Receives until a stop condition holds; single consumer.
    pub fn run(&self, ingestor: &mut Ingestor, opts: &ListenOptions) -> Result<Vec<Scenario>> {
        let mut buf = vec![0u8; 65_536];
        let mut out = Vec::new();
        let mut last = Instant::now();
        loop {
            if opts.max_scenarios.is_some_and(|m| out.len() >= m) {
                break;
            }
            if opts.stop.as_ref().is_some_and(|s| s.load(Ordering::Relaxed)) {
                break;
            }
            if opts.idle_timeout.is_some_and(|t| last.elapsed() >= t) {
                break;
            }
            match self.socket.recv_from(&mut buf) {
                Ok((n, _)) => {
                    last = Instant::now();
                    if let Some(s) = ingestor.push_bytes(&buf[..n]) {
                        out.push(s);
                    }
                }
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_reference_record() {
        let d = parse_datagram("1|0.200|12.5|-3.0|0.0|8.2|0.1|0.05|4.5|1.8|1.5|1").unwrap();
        let Datagram::Record { id, kind, state } = d else { panic!() };
        assert_eq!(id, 1);
        assert_eq!(kind, AgentType::Vehicle);
        assert_eq!(state.t, 0.2);
        assert_eq!(state.center, [12.5, -3.0, 0.0]);
        assert_eq!(state.velocity, [8.2, 0.1]);
        assert_eq!(state.heading, 0.05);
        assert_eq!(state.dims, [4.5, 1.8, 1.5]);
    }

    #[test]
    fn malformed_is_counted() {
        let (s, stats) = ingest_lines(["garbage", "1|x|0|0|0|0|0|0|1|1|1|1", "1|0|0|0|0|0|0|0|1|1|1|9"], IngestConfig::default());
        assert!(s.is_empty());
        assert_eq!(stats.malformed, 3);
    }

    #[test]
    fn out_of_order_is_sorted() {
        let mut ing = Ingestor::new(IngestConfig::default());
        ing.push("4|0.3|3|0|0|1|0|0|4|2|1.5|1");
        ing.push("4|0.2|2|0|0|1|0|0|4|2|1.5|1");
        let t: Vec<f64> = ing.builder().track(4).unwrap().iter().map(|s| s.t).collect();
        assert_eq!(t, vec![0.2, 0.3]);
    }

    #[test]
    fn late_records_outside_window_dropped() {
        let mut ing = Ingestor::new(IngestConfig::default());
        ing.push("4|2.0|3|0|0|1|0|0|4|2|1.5|1");
        ing.push("4|0.5|2|0|0|1|0|0|4|2|1.5|1");
        assert_eq!(ing.stats().late, 1);
    }

    #[test]
    fn seven_hz_becomes_ten_hz_grid() {
        let mut lines: Vec<String> = (0..=14)
            .map(|i| {
                let t = i as f64 / 7.0;
                format!("1|{t}|{}|0|0|2|0|0|4|2|1.5|1", 2.0 * t)
            })
            .collect();
        lines.push("END|s7".into());
        let cfg = IngestConfig {
            current_index: 5,
            ..IngestConfig::default()
        };
        let (s, _) = ingest_lines(lines.iter().map(String::as_str), cfg);
        let s = &s[0];
        assert_eq!(s.state_count(), 21);
        for (k, st) in s.agents[0].states.iter().enumerate() {
            assert_eq!(st.t, k as f64 / 10.0);
            assert!((st.center[0] - 2.0 * st.t).abs() < 1e-9);
        }
    }
}
