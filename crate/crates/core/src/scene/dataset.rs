//! Dataset files: scenarios plus a persisted, seeded train/val/test split.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{Container, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::scene::{AgentState, AgentTrack, AgentType, MapKind, MapPolyline, Scenario};

const TAG: &[u8; 4] = b"DSET";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetRole {
    Source,
    Target,
}

impl DatasetRole {
    /// Default train/val/test fractions.
    pub fn split_ratios(self) -> [f64; 3] {
        match self {
            Self::Source => [0.8467, 0.0767, 0.0767],
            Self::Target => [0.70, 0.15, 0.15],
        }
    }

    fn code(self) -> u8 {
        match self {
            Self::Source => 0,
            Self::Target => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Self::Source),
            1 => Ok(Self::Target),
            _ => Err(Error::Format(format!("unknown dataset role code {c}"))),
        }
    }
}

impl fmt::Display for DatasetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Source => "source",
            Self::Target => "target",
        })
    }
}

impl FromStr for DatasetRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Self::Source),
            "target" => Ok(Self::Target),
            other => Err(Error::Config(format!("unknown dataset role '{other}' (valid: source, target)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split '{other}' (valid: train, val, test)"))),
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// Index lists into the scenario list; each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Shuffles `0..n` with `seed`, then cuts val and test by rounded fractions; train keeps the rest.
    pub fn seeded(n: usize, ratios: [f64; 3], seed: u64) -> Result<Self> {
        if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-3 {
            return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
        }
        let n_val = (n as f64 * ratios[1]).round() as usize;
        let n_test = (n as f64 * ratios[2]).round() as usize;
        if n_val + n_test > n {
            return Err(Error::Config(format!("{n} scenarios too few for split ratios {ratios:?}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut val = idx[..n_val].to_vec();
        let mut test = idx[n_val..n_val + n_test].to_vec();
        let mut train = idx[n_val + n_test..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Ok(Self { train, val, test })
    }

    pub fn get(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Checks the three lists partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return Err(Error::Format(format!("split index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("splits do not cover every scenario".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub role: DatasetRole,
    pub split_seed: u64,
    pub scenarios: Vec<Scenario>,
    pub splits: Splits,
}

impl Dataset {
    /// Validates every scenario and assigns the role's default split.
    pub fn new(role: DatasetRole, scenarios: Vec<Scenario>, split_seed: u64) -> Result<Self> {
        for s in &scenarios {
            s.validate()?;
        }
        let splits = Splits::seeded(scenarios.len(), role.split_ratios(), split_seed)?;
        Ok(Self {
            role,
            split_seed,
            scenarios,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn split(&self, which: SplitName) -> Vec<&Scenario> {
        self.splits.get(which).iter().map(|&i| &self.scenarios[i]).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut t = Encoder::new();
        TAG.iter().for_each(|b| t.u8(*b));
        t.u8(self.role.code());
        t.u64(self.split_seed);
        t.usizes(&self.splits.train);
        t.usizes(&self.splits.val);
        t.usizes(&self.splits.test);
        Container {
            records: self.scenarios.iter().map(encode_scenario).collect(),
            trailer: t.finish(),
        }
        .encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = Container::decode(bytes)?;
        let mut t = Decoder::new(&c.trailer);
        let tag = [t.u8()?, t.u8()?, t.u8()?, t.u8()?];
        if &tag != TAG {
            return Err(Error::Format("container does not hold a dataset".into()));
        }
        let role = DatasetRole::from_code(t.u8()?)?;
        let split_seed = t.u64()?;
        let splits = Splits {
            train: t.usizes()?,
            val: t.usizes()?,
            test: t.usizes()?,
        };
        t.expect_end()?;
        let scenarios = c.records.iter().map(|r| decode_scenario(r)).collect::<Result<Vec<_>>>()?;
        splits.validate(scenarios.len())?;
        for s in &scenarios {
            s.validate().map_err(|e| Error::Format(format!("stored scenario invalid: {e}")))?;
        }
        Ok(Self {
            role,
            split_seed,
            scenarios,
            splits,
        })
    }
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, ds.encode())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::decode(&std::fs::read(path)?)
}

fn encode_scenario(s: &Scenario) -> Vec<u8> {
    let mut e = Encoder::new();
    e.str(&s.id);
    e.f64(s.duration);
    e.f64(s.sample_rate);
    e.usize(s.current_index);
    e.u32(s.focal_id);
    e.usize(s.polylines.len());
    for p in &s.polylines {
        e.u8(p.kind.code());
        e.usize(p.points.len());
        for pt in &p.points {
            pt.iter().for_each(|v| e.f64(*v));
        }
    }
    e.usize(s.agents.len());
    for a in &s.agents {
        e.u32(a.id);
        e.u8(a.kind.code());
        e.usize(a.states.len());
        for st in &a.states {
            e.f64(st.t);
            st.center.iter().for_each(|v| e.f64(*v));
            st.velocity.iter().for_each(|v| e.f64(*v));
            e.f64(st.heading);
            st.dims.iter().for_each(|v| e.f64(*v));
            e.bool(st.valid);
        }
    }
    e.finish()
}

fn decode_scenario(buf: &[u8]) -> Result<Scenario> {
    let mut d = Decoder::new(buf);
    let id = d.str()?;
    let duration = d.f64()?;
    let sample_rate = d.f64()?;
    let current_index = d.usize()?;
    let focal_id = d.u32()?;
    let n_poly = d.len(9)?;
    let mut polylines = Vec::with_capacity(n_poly);
    for _ in 0..n_poly {
        let kind = MapKind::from_code(d.u8()?)?;
        let n = d.len(24)?;
        let points = (0..n)
            .map(|_| Ok([d.f64()?, d.f64()?, d.f64()?]))
            .collect::<Result<Vec<_>>>()?;
        polylines.push(MapPolyline { kind, points });
    }
    let n_agents = d.len(13)?;
    let mut agents = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let aid = d.u32()?;
        let kind = AgentType::from_code(d.u8()?).map_err(|e| Error::Format(e.to_string()))?;
        let n = d.len(81)?;
        let mut states = Vec::with_capacity(n);
        for _ in 0..n {
            states.push(AgentState {
                t: d.f64()?,
                center: [d.f64()?, d.f64()?, d.f64()?],
                velocity: [d.f64()?, d.f64()?],
                heading: d.f64()?,
                dims: [d.f64()?, d.f64()?, d.f64()?],
                valid: d.bool()?,
            });
        }
        agents.push(AgentTrack { id: aid, kind, states });
    }
    d.expect_end()?;
    Ok(Scenario {
        id,
        duration,
        sample_rate,
        polylines,
        agents,
        focal_id,
        current_index,
    })
}
