//! Motion forecasting metrics: minADE, minFDE, miss rate and mAP over
//! trajectory shape categories.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{PredictionSet, Predictor};
use crate::scene::{normalize_angle, SceneSample};

/// Horizon- and speed-dependent match thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchThresholds {
    /// `(seconds, lateral threshold in meters)`, ascending in time.
    pub lateral: Vec<(f64, f64)>,
    /// Longitudinal threshold as a multiple of the lateral one.
    pub longitudinal_factor: f64,
    /// Speed at or below which the smallest multiplier applies.
    pub slow_speed: f64,
    /// Speed at or above which the multiplier is 1.
    pub fast_speed: f64,
    pub slow_multiplier: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        Self {
            lateral: vec![(3.0, 1.0), (5.0, 1.8), (8.0, 3.0)],
            longitudinal_factor: 2.0,
            slow_speed: 1.4,
            fast_speed: 11.0,
            slow_multiplier: 0.5,
        }
    }
}

impl MatchThresholds {
    /// Velocity multiplier in `[slow_multiplier, 1]`.
    pub fn speed_multiplier(&self, speed: f64) -> f64 {
        if speed <= self.slow_speed {
            self.slow_multiplier
        } else if speed >= self.fast_speed {
            1.0
        } else {
            let f = (speed - self.slow_speed) / (self.fast_speed - self.slow_speed);
            self.slow_multiplier + f * (1.0 - self.slow_multiplier)
        }
    }

    /// Base lateral threshold at `t` seconds, linear between checkpoints and flat outside.
    pub fn base_lateral(&self, t: f64) -> f64 {
        let pts = &self.lateral;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            if t <= w[1].0 {
                let f = (t - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + f * (w[1].1 - w[0].1);
            }
        }
        pts[pts.len() - 1].1
    }

    /// `(longitudinal, lateral)` thresholds at `t` seconds for an agent moving at `speed`.
    pub fn at(&self, t: f64, speed: f64) -> (f64, f64) {
        let lat = self.base_lateral(t) * self.speed_multiplier(speed);
        (lat * self.longitudinal_factor, lat)
    }
}

fn check_lengths(gt: &[[f64; 2]], preds: &[&[[f64; 2]]]) -> Result<()> {
    if gt.is_empty() {
        return Err(Error::Input("empty ground truth trajectory".into()));
    }
    if preds.is_empty() {
        return Err(Error::Input("no predicted trajectories".into()));
    }
    if let Some(p) = preds.iter().find(|p| p.len() != gt.len()) {
        return Err(Error::Input(format!("prediction length {} vs ground truth {}", p.len(), gt.len())));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Minimum over modes of the mean L2 distance over steps.
pub fn min_ade(gt: &[[f64; 2]], preds: &[&[[f64; 2]]]) -> Result<f64> {
    check_lengths(gt, preds)?;
    let t = gt.len() as f64;
    Ok(preds
        .iter()
        .map(|p| gt.iter().zip(p.iter()).map(|(a, b)| dist(*a, *b)).sum::<f64>() / t)
        .fold(f64::INFINITY, f64::min))
}

/// Minimum over modes of the final-step L2 distance.
pub fn min_fde(gt: &[[f64; 2]], preds: &[&[[f64; 2]]]) -> Result<f64> {
    check_lengths(gt, preds)?;
    let last = gt.len() - 1;
    Ok(preds.iter().map(|p| dist(gt[last], p[last])).fold(f64::INFINITY, f64::min))
}

/// Error rotated into the ground-truth heading frame must satisfy
/// `|x| < longitudinal` and `|y| < lateral`.
pub fn is_match(gt: [f64; 2], heading: f64, pred: [f64; 2], longitudinal: f64, lateral: f64) -> bool {
    let (s, c) = heading.sin_cos();
    let (ex, ey) = (gt[0] - pred[0], gt[1] - pred[1]);
    let x = c * ex + s * ey;
    let y = -s * ex + c * ey;
    x.abs() < longitudinal && y.abs() < lateral
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ShapeCategory {
    Stationary,
    Straight,
    StraightLeft,
    StraightRight,
    LeftTurn,
    RightTurn,
    LeftUTurn,
    RightUTurn,
}

impl ShapeCategory {
    pub const ALL: [ShapeCategory; 8] = [
        Self::Stationary,
        Self::Straight,
        Self::StraightLeft,
        Self::StraightRight,
        Self::LeftTurn,
        Self::RightTurn,
        Self::LeftUTurn,
        Self::RightUTurn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Stationary => "stationary",
            Self::Straight => "straight",
            Self::StraightLeft => "straight_left",
            Self::StraightRight => "straight_right",
            Self::LeftTurn => "left_turn",
            Self::RightTurn => "right_turn",
            Self::LeftUTurn => "left_u_turn",
            Self::RightUTurn => "right_u_turn",
        }
    }
}

impl fmt::Display for ShapeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const STATIONARY_DISTANCE: f64 = 2.0;
const U_TURN_ANGLE: f64 = 135.0 * PI / 180.0;
const TURN_ANGLE: f64 = 30.0 * PI / 180.0;
const LATERAL_OFFSET: f64 = 5.0;

/// Buckets a trajectory by total displacement and net heading change.
///
/// `start` and `start_heading` describe the agent at the current step; `end`
/// and `end_heading` its final ground-truth state.
pub fn classify_shape(start: [f64; 2], start_heading: f64, end: [f64; 2], end_heading: f64) -> ShapeCategory {
    let d = [end[0] - start[0], end[1] - start[1]];
    if d[0].hypot(d[1]) < STATIONARY_DISTANCE {
        return ShapeCategory::Stationary;
    }
    let dh = normalize_angle(end_heading - start_heading);
    let (s, c) = start_heading.sin_cos();
    let lateral = -s * d[0] + c * d[1];
    if dh.abs() > U_TURN_ANGLE {
        if dh > 0.0 {
            ShapeCategory::LeftUTurn
        } else {
            ShapeCategory::RightUTurn
        }
    } else if dh.abs() > TURN_ANGLE {
        if dh > 0.0 {
            ShapeCategory::LeftTurn
        } else {
            ShapeCategory::RightTurn
        }
    } else if lateral > LATERAL_OFFSET {
        ShapeCategory::StraightLeft
    } else if lateral < -LATERAL_OFFSET {
        ShapeCategory::StraightRight
    } else {
        ShapeCategory::Straight
    }
}

/// Ground truth and prediction for one focal agent.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub gt: Vec<[f64; 2]>,
    pub gt_heading: Vec<f64>,
    /// Speed at the current step.
    pub speed: f64,
    pub pred: PredictionSet,
    pub category: ShapeCategory,
}

impl EvalRecord {
    /// Builds a record from an ego-frame sample (focal at the origin facing +x).
    pub fn from_sample(sample: &SceneSample, pred: PredictionSet) -> Result<Self> {
        let t = sample.horizon();
        if pred.horizon() != t {
            return Err(Error::Input(format!("prediction horizon {} vs ground truth {t}", pred.horizon())));
        }
        let gt: Vec<[f64; 2]> = (0..t).map(|s| [sample.gt.at2(s, 0), sample.gt.at2(s, 1)]).collect();
        let category = classify_shape([0.0, 0.0], 0.0, gt[t - 1], sample.gt_heading[t - 1]);
        Ok(Self {
            gt,
            gt_heading: sample.gt_heading.clone(),
            speed: sample.speed,
            pred,
            category,
        })
    }

    /// Whether mode `k` matches at step `h` (0-based), `rate` in Hz.
    pub fn mode_matches(&self, k: usize, h: usize, rate: f64, th: &MatchThresholds) -> bool {
        let (long, lat) = th.at((h + 1) as f64 / rate, self.speed);
        is_match(self.gt[h], self.gt_heading[h], self.pred.modes[k].traj[h], long, lat)
    }

    pub fn is_miss(&self, h: usize, rate: f64, th: &MatchThresholds) -> bool {
        !(0..self.pred.modes.len()).any(|k| self.mode_matches(k, h, rate, th))
    }

    fn trajectories(&self) -> Vec<&[[f64; 2]]> {
        self.pred.modes.iter().map(|m| m.traj.as_slice()).collect()
    }
}

/// Fraction of records where no mode matches at step `h`.
pub fn miss_rate(records: &[EvalRecord], h: usize, rate: f64, th: &MatchThresholds) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("miss rate over zero records".into()));
    }
    let misses = records.iter().filter(|r| r.is_miss(h, rate, th)).count();
    Ok(misses as f64 / records.len() as f64)
}

/// Area under the precision-envelope PR curve, at most one true positive per record.
///
/// Returns `None` for an empty category.
pub fn average_precision(records: &[&EvalRecord], h: usize, rate: f64, th: &MatchThresholds) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        for (k, m) in rec.pred.modes.iter().enumerate() {
            pool.push((m.confidence, r, k));
        }
    }
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut hit = vec![false; records.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(pool.len());
    let mut recall = Vec::with_capacity(pool.len());
    for (i, &(_, r, k)) in pool.iter().enumerate() {
        if !hit[r] && records[r].mode_matches(k, h, rate, th) {
            hit[r] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / records.len() as f64);
    }
    // envelope: precision made non-increasing from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

/// Unweighted mean AP over non-empty categories, plus the per-category values.
pub fn mean_ap(
    records: &[EvalRecord],
    h: usize,
    rate: f64,
    th: &MatchThresholds,
) -> Result<(f64, BTreeMap<ShapeCategory, Option<f64>>)> {
    let mut per = BTreeMap::new();
    for cat in ShapeCategory::ALL {
        let subset: Vec<&EvalRecord> = records.iter().filter(|r| r.category == cat).collect();
        per.insert(cat, average_precision(&subset, h, rate, th));
    }
    let present: Vec<f64> = per.values().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Input("mAP over zero non-empty categories".into()));
    }
    Ok((present.iter().sum::<f64>() / present.len() as f64, per))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub map: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    /// AP per category; `None` marks an empty category (excluded from mAP).
    pub per_category: BTreeMap<ShapeCategory, Option<f64>>,
    pub samples: usize,
}

impl MetricsReport {
    /// Flat `key=value` text block.
    pub fn to_key_values(&self) -> String {
        let mut out = format!(
            "map={}\nmin_ade={}\nmin_fde={}\nmiss_rate={}\nsamples={}\n",
            self.map, self.min_ade, self.min_fde, self.miss_rate, self.samples
        );
        for (cat, ap) in &self.per_category {
            match ap {
                Some(v) => out.push_str(&format!("ap.{cat}={v}\n")),
                None => out.push_str(&format!("ap.{cat}=empty\n")),
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores prepared records at the final horizon.
pub fn report(records: &[EvalRecord], rate: f64, th: &MatchThresholds) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Input("evaluation over zero records".into()));
    }
    let h = records[0].gt.len() - 1;
    let n = records.len() as f64;
    let mut ade = 0.0;
    let mut fde = 0.0;
    for r in records {
        let trajs = r.trajectories();
        ade += min_ade(&r.gt, &trajs)?;
        fde += min_fde(&r.gt, &trajs)?;
    }
    let (map, per_category) = mean_ap(records, h, rate, th)?;
    let report = MetricsReport {
        map,
        min_ade: ade / n,
        min_fde: fde / n,
        miss_rate: miss_rate(records, h, rate, th)?,
        per_category,
        samples: records.len(),
    };
    if ![report.map, report.min_ade, report.min_fde, report.miss_rate].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric {
            op: "evaluate",
            detail: format!("non-finite metrics {report:?}"),
        });
    }
    Ok(report)
}

/// Predicts every sample (in parallel, order preserved) and scores the results.
pub fn evaluate(model: &dyn Predictor, samples: &[SceneSample], th: &MatchThresholds) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let records = samples
        .par_iter()
        .map(|s| EvalRecord::from_sample(s, model.predict(s)?))
        .collect::<Result<Vec<_>>>()?;
    report(&records, samples[0].sample_rate, th)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotated_error_is_lateral() {
        assert!(is_match([0.0, 0.0], 0.0, [0.5, 0.3], 2.0, 1.0));
        assert!(!is_match([0.0, 0.0], PI / 2.0, [1.5, 0.0], 2.0, 1.0));
        // strict inequality at the boundary
        assert!(!is_match([0.0, 0.0], 0.0, [2.0, 0.0], 2.0, 1.0));
    }

    #[test]
    fn thresholds_interpolate_and_scale() {
        let th = MatchThresholds::default();
        assert_eq!(th.at(3.0, 20.0), (2.0, 1.0));
        assert_eq!(th.at(8.0, 0.0), (3.0, 1.5));
        assert!((th.base_lateral(4.0) - 1.4).abs() < 1e-12);
        assert!((th.speed_multiplier(6.2) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn shapes() {
        assert_eq!(classify_shape([0.0, 0.0], 0.0, [0.0, 0.0], 0.0), ShapeCategory::Stationary);
        assert_eq!(classify_shape([0.0, 0.0], 0.0, [20.0, 0.0], 0.0), ShapeCategory::Straight);
        assert_eq!(classify_shape([0.0, 0.0], 0.0, [10.0, 10.0], PI / 2.0), ShapeCategory::LeftTurn);
        assert_eq!(classify_shape([0.0, 0.0], 0.0, [10.0, -10.0], -PI / 2.0), ShapeCategory::RightTurn);
        assert_eq!(classify_shape([0.0, 0.0], 0.0, [0.0, 8.0], PI), ShapeCategory::LeftUTurn);
        assert_eq!(classify_shape([0.0, 0.0], 0.0, [30.0, 6.0], 0.1), ShapeCategory::StraightLeft);
    }

    #[test]
    fn offset_prediction_scores_five() {
        let gt: Vec<[f64; 2]> = (0..4).map(|i| [i as f64, 0.0]).collect();
        let p: Vec<[f64; 2]> = gt.iter().map(|q| [q[0] + 3.0, q[1] + 4.0]).collect();
        assert!((min_ade(&gt, &[&p]).unwrap() - 5.0).abs() < 1e-12);
        assert!((min_fde(&gt, &[&p]).unwrap() - 5.0).abs() < 1e-12);
        assert!(min_ade(&[], &[&p]).is_err());
    }
}
