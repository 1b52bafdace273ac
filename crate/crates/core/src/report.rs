//! The seven-method study table and its plot data.
//!
//! Timing columns are deterministic work units (graph element operations,
//! in millions) rather than wall-clock seconds, so two runs with one seed
//! produce byte-identical files. Wall time is logged separately.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::train::{ExperimentResult, Method};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Metric {
    MAp,
    MinAde,
    MinFde,
    MissRate,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::MAp, Metric::MinAde, Metric::MinFde, Metric::MissRate];

    pub fn name(self) -> &'static str {
        match self {
            Self::MAp => "mAP",
            Self::MinAde => "minADE",
            Self::MinFde => "minFDE",
            Self::MissRate => "missRate",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == Self::MAp
    }

    fn of(self, r: &MetricScores) -> f64 {
        match self {
            Self::MAp => r.map,
            Self::MinAde => r.min_ade,
            Self::MinFde => r.min_fde,
            Self::MissRate => r.miss_rate,
        }
    }
}

/// One of the eight metric columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Column {
    pub domain: Domain,
    pub metric: Metric,
}

impl Column {
    /// Source columns first, then target, each in mAP/minADE/minFDE/missRate order.
    pub fn all() -> [Column; 8] {
        let mut out = [Column {
            domain: Domain::Source,
            metric: Metric::MAp,
        }; 8];
        for (i, domain) in [Domain::Source, Domain::Target].into_iter().enumerate() {
            for (j, metric) in Metric::ALL.into_iter().enumerate() {
                out[i * 4 + j] = Column { domain, metric };
            }
        }
        out
    }

    pub fn label(self) -> String {
        let d = match self.domain {
            Domain::Source => "src",
            Domain::Target => "tgt",
        };
        format!("{d} {}", self.metric.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricScores {
    pub map: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
}

impl From<&MetricsReport> for MetricScores {
    fn from(r: &MetricsReport) -> Self {
        Self {
            map: r.map,
            min_ade: r.min_ade,
            min_fde: r.min_fde,
            miss_rate: r.miss_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub method: Method,
    pub source: MetricScores,
    pub target: MetricScores,
    /// Training cost of the whole method; two-stage methods include the source stage.
    pub total_work: f64,
    /// Cost of the target-only stage of two-stage methods.
    pub target_stage_work: Option<f64>,
}

impl StudyRow {
    pub fn value(&self, col: Column) -> f64 {
        match col.domain {
            Domain::Source => col.metric.of(&self.source),
            Domain::Target => col.metric.of(&self.target),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub seed: u64,
    /// Unit of the work columns.
    pub work_unit: &'static str,
    pub rows: Vec<StudyRow>,
}

const WORK_SCALE: f64 = 1e6;

fn work_of(r: &ExperimentResult) -> f64 {
    r.stages.iter().map(|s| s.work as f64).sum::<f64>() / WORK_SCALE
}

impl StudyReport {
    /// Builds the table from one result per method, in any order.
    pub fn from_results(seed: u64, results: &[ExperimentResult]) -> Result<Self> {
        let find = |m: Method| {
            results
                .iter()
                .find(|r| r.method == m)
                .ok_or_else(|| Error::Input(format!("study is missing the {m} result")))
        };
        let sb_work = work_of(find(Method::SB)?);
        let rows = Method::ALL
            .into_iter()
            .map(|m| {
                let r = find(m)?;
                let own = work_of(r);
                let (total_work, target_stage_work) = if m.needs_source_checkpoint() {
                    (sb_work + own, Some(own))
                } else {
                    (own, None)
                };
                Ok(StudyRow {
                    method: m,
                    source: (&r.source_report).into(),
                    target: (&r.target_report).into(),
                    total_work,
                    target_stage_work,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed,
            work_unit: "Mop",
            rows,
        })
    }

    pub fn row(&self, m: Method) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.method == m)
    }

    /// Methods tied for the best value of `col`.
    pub fn best(&self, col: Column) -> Vec<Method> {
        let vals = self.rows.iter().map(|r| r.value(col));
        let best = if col.metric.higher_is_better() {
            vals.fold(f64::NEG_INFINITY, f64::max)
        } else {
            vals.fold(f64::INFINITY, f64::min)
        };
        self.rows.iter().filter(|r| r.value(col) == best).map(|r| r.method).collect()
    }

    /// Aligned text table; `*` marks the best value of each column.
    pub fn to_text(&self) -> String {
        let cols = Column::all();
        let best: Vec<Vec<Method>> = cols.iter().map(|c| self.best(*c)).collect();
        let mut header = vec!["method".to_string()];
        header.extend(cols.iter().map(|c| c.label()));
        header.push(format!("total [{}]", self.work_unit));
        header.push(format!("target stage [{}]", self.work_unit));
        let mut lines: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            let mut cells = vec![r.method.name().to_string()];
            for (c, b) in cols.iter().zip(&best) {
                let mark = if b.contains(&r.method) { "*" } else { " " };
                cells.push(format!("{:.4}{mark}", r.value(*c)));
            }
            cells.push(format!("{:.1}", r.total_work));
            cells.push(r.target_stage_work.map_or("-".into(), |w| format!("{w:.1}")));
            lines.push(cells);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        let _ = writeln!(out, "* best in column (seed {})", self.seed);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("study report serializes") + "\n"
    }

    /// `method,total_work` for every method.
    pub fn total_time_csv(&self) -> String {
        let mut out = format!("method,total_{}\n", self.work_unit);
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.3}", r.method, r.total_work);
        }
        out
    }

    /// `method,target_stage_work` for the two-stage methods only.
    pub fn target_stage_csv(&self) -> String {
        let mut out = format!("method,target_stage_{}\n", self.work_unit);
        for r in &self.rows {
            if let Some(w) = r.target_stage_work {
                let _ = writeln!(out, "{},{w:.3}", r.method);
            }
        }
        out
    }

    /// Writes the four report files into `dir` and returns their paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = [
            ("study.txt", self.to_text()),
            ("study.json", self.to_json()),
            ("total_time.csv", self.total_time_csv()),
            ("target_stage_time.csv", self.target_stage_csv()),
        ];
        files
            .into_iter()
            .map(|(name, body)| {
                let p = dir.join(name);
                std::fs::write(&p, body)?;
                Ok(p)
            })
            .collect()
    }
}
