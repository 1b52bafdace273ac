//! Whole-run configuration assembled from one `key=value` file.
//!
//! Recognized sections: `data.`, `generate.`, `model.`, `train.`, `ingest.`,
//! plus the top-level `method` key. Everything is parsed and validated up
//! front so a typo fails before any stage starts.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scene::ingest::IngestConfig;
use crate::scene::{DatasetRole, GeneratorConfig, Preset};
use crate::train::{Method, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Run,
    Study,
    Eval,
    Ingest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Generate => "generate",
            Self::Run => "run",
            Self::Study => "study",
            Self::Eval => "eval",
            Self::Ingest => "ingest",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const SECTIONS: [&str; 5] = ["data", "generate", "model", "train", "ingest"];
const TOP_LEVEL: [&str; 1] = ["method"];
const DATA_KEYS: [&str; 2] = ["source", "target"];
const INGEST_KEYS: [&str; 6] = ["rate", "current_index", "reorder_window", "idle_timeout", "max_scenarios", "role"];

/// Settings of the UDP ingestion command.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestSettings {
    pub ingest: IngestConfig,
    pub role: DatasetRole,
    /// Stop after this long without a datagram; `None` waits for a signal.
    pub idle_timeout: Option<Duration>,
    pub max_scenarios: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub generate: GeneratorConfig,
    /// Split role of generated data; follows the preset unless set.
    pub generate_role: DatasetRole,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub method: Option<Method>,
    pub ingest: IngestSettings,
    /// `model.*` keys the file set explicitly, without the prefix.
    pub explicit_model_keys: Vec<String>,
}

fn default_role(p: Preset) -> DatasetRole {
    match p {
        Preset::SourceLike => DatasetRole::Source,
        Preset::TargetLike => DatasetRole::Target,
    }
}

impl RunConfig {
    pub fn parse(command: Command, text: &str) -> Result<Self> {
        Self::from_key_values(command, &KeyValues::parse(text)?)
    }

    /// Validates every section, then the keys `command` needs.
    pub fn from_key_values(command: Command, kv: &KeyValues) -> Result<Self> {
        let stray: Vec<&str> = kv
            .keys()
            .filter(|k| match k.split_once('.') {
                Some((s, _)) => !SECTIONS.contains(&s),
                None => !TOP_LEVEL.contains(k),
            })
            .collect();
        if !stray.is_empty() {
            return Err(Error::Config(format!(
                "unknown key(s): {} (sections: {}; top-level: {})",
                stray.join(", "),
                SECTIONS.join(", "),
                TOP_LEVEL.join(", ")
            )));
        }
        let in_section = |name: &str, allowed: &[&str]| -> Result<KeyValues> {
            let s = kv.section(name);
            s.reject_unknown(allowed)
                .map_err(|e| Error::Config(format!("[{name}] {}", e.to_string().trim_start_matches("config error: "))))?;
            Ok(s)
        };

        let data = in_section("data", &DATA_KEYS)?;
        let mut gen = in_section("generate", &[&GeneratorConfig::KEYS[..], &["role"]].concat())?;
        let generate_role_raw = gen.remove("role").map(|r| r.parse::<DatasetRole>()).transpose()?;
        let generate = GeneratorConfig::from_key_values(&gen)?;
        let model_kv = in_section("model", &ModelConfig::KEYS)?;
        let model = ModelConfig::from_key_values(&model_kv)?;
        let train = TrainConfig::from_key_values(&in_section("train", &TrainConfig::KEYS)?)?;

        let ing = in_section("ingest", &INGEST_KEYS)?;
        let d = IngestConfig::default();
        let ingest = IngestSettings {
            ingest: IngestConfig {
                rate: ing.get_or("rate", d.rate)?,
                current_index: ing.get_or("current_index", d.current_index)?,
                reorder_window: ing.get_or("reorder_window", d.reorder_window)?,
            },
            role: ing.get_or("role", DatasetRole::Target)?,
            idle_timeout: ing.get::<f64>("idle_timeout")?.map(|s| {
                if s > 0.0 && s.is_finite() {
                    Ok(Duration::from_secs_f64(s))
                } else {
                    Err(Error::Config(format!("ingest.idle_timeout {s} must be positive")))
                }
            }).transpose()?,
            max_scenarios: ing.get("max_scenarios")?,
        };
        if !(ingest.ingest.rate > 0.0 && ingest.ingest.reorder_window >= 0.0) {
            return Err(Error::Config("ingest.rate must be positive and ingest.reorder_window non-negative".into()));
        }

        let cfg = Self {
            command,
            source: data.raw("source").map(PathBuf::from),
            target: data.raw("target").map(PathBuf::from),
            generate_role: generate_role_raw.unwrap_or_else(|| default_role(generate.preset)),
            generate,
            model,
            train,
            method: kv.get("method")?,
            ingest,
            explicit_model_keys: model_kv.keys().map(String::from).collect(),
        };
        cfg.check_command()?;
        Ok(cfg)
    }

    fn check_command(&self) -> Result<()> {
        let need_data = matches!(self.command, Command::Run | Command::Study);
        if need_data && (self.source.is_none() || self.target.is_none()) {
            return Err(Error::Config(format!(
                "{} needs data.source and data.target",
                self.command
            )));
        }
        if self.command == Command::Run && self.method.is_none() {
            return Err(Error::Config(format!(
                "run needs method (one of {})",
                Method::ALL.map(|m| m.name()).join(", ")
            )));
        }
        Ok(())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generate" => Ok(Self::Generate),
            "run" => Ok(Self::Run),
            "study" => Ok(Self::Study),
            "eval" => Ok(Self::Eval),
            "ingest" => Ok(Self::Ingest),
            other => Err(Error::Config(format!("unknown command '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_file() {
        let cfg = RunConfig::parse(
            Command::Run,
            "method = FT\n[data]\nsource = a.bin\ntarget = b.bin\n[model]\ndim = 16\n[train]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.method, Some(Method::FT));
        assert_eq!(cfg.model.dim, 16);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.source.as_deref(), Some(std::path::Path::new("a.bin")));
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["colour=red", "model.width=3", "extra.x=1", "generate.speed=9"] {
            let e = RunConfig::parse(Command::Generate, text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        }
    }

    #[test]
    fn command_requirements() {
        assert!(RunConfig::parse(Command::Study, "data.source=a").is_err());
        assert!(RunConfig::parse(Command::Run, "data.source=a\ndata.target=b").is_err());
        assert!(RunConfig::parse(Command::Generate, "").is_ok());
    }

    #[test]
    fn generate_role_follows_preset() {
        let cfg = RunConfig::parse(Command::Generate, "generate.preset=target_like").unwrap();
        assert_eq!(cfg.generate_role, DatasetRole::Target);
        let cfg = RunConfig::parse(Command::Generate, "generate.preset=target_like\ngenerate.role=source").unwrap();
        assert_eq!(cfg.generate_role, DatasetRole::Source);
        let e = RunConfig::parse(Command::Generate, "generate.preset=urban").unwrap_err().to_string();
        assert!(e.contains("source_like") && e.contains("target_like"), "{e}");
    }
}
