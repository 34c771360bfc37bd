//! The RMS metric family over de-normalized TECU maps, baseline-relative
//! errors, latitude slices, the cosine-weighted global-mean error, and
//! curve smoothing, plus CSV export.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::data::{row_latitude_deg, GRID};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("baseline value at index {0} is not positive")]
    ZeroBaseline(usize),
    #[error("latitude {0} outside the grid range")]
    LatitudeOutOfRange(f64),
    #[error("horizon index {k} outside 1..={max}")]
    HorizonOutOfRange { k: usize, max: usize },
}

/// Predicted and target frames for one sequence, flattened `[P][frame]`,
/// both in TECU.
#[derive(Debug, Clone)]
pub struct SequencePair {
    pub pred: Vec<f32>,
    pub target: Vec<f32>,
    pub horizon: usize,
}

impl SequencePair {
    pub fn new(pred: Vec<f32>, target: Vec<f32>, horizon: usize) -> Result<Self, MetricsError> {
        if pred.len() != target.len() {
            return Err(MetricsError::LengthMismatch {
                left: pred.len(),
                right: target.len(),
            });
        }
        if horizon == 0 || pred.len() % horizon != 0 {
            return Err(MetricsError::Empty("sequence pair"));
        }
        Ok(SequencePair {
            pred,
            target,
            horizon,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.pred.len() / self.horizon
    }

    /// 1-based horizon index.
    pub fn frame(&self, k: usize) -> (&[f32], &[f32]) {
        let n = self.frame_len();
        (
            &self.pred[(k - 1) * n..k * n],
            &self.target[(k - 1) * n..k * n],
        )
    }
}

/// Root-mean-square pixel difference between one predicted map and its
/// target.
pub fn rms_map(pred: &[f32], target: &[f32]) -> Result<f64, MetricsError> {
    if pred.len() != target.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty("rms_map"));
    }
    let sum: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Arithmetic mean of the per-map RMS over one sequence.
pub fn mean_rms_sequence(pair: &SequencePair) -> Result<f64, MetricsError> {
    let mut acc = 0.0;
    for k in 1..=pair.horizon {
        let (p, t) = pair.frame(k);
        acc += rms_map(p, t)?;
    }
    Ok(acc / pair.horizon as f64)
}

/// Mean RMS at one horizon index (1-based) across the test set.
pub fn mean_rms_per_horizon(pairs: &[SequencePair], k: usize) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty("mean_rms_per_horizon"));
    }
    let max = pairs.iter().map(|p| p.horizon).min().unwrap_or(0);
    if k == 0 || k > max {
        return Err(MetricsError::HorizonOutOfRange { k, max });
    }
    let mut acc = 0.0;
    for pair in pairs {
        let (p, t) = pair.frame(k);
        acc += rms_map(p, t)?;
    }
    Ok(acc / pairs.len() as f64)
}

/// Global score over the test set, in both normalizations: the per-frame
/// mean (used for comparisons) and the per-sequence sum of frame RMS values
/// divided by the sequence count only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalRms {
    /// Mean of the per-map RMS over every frame of every sequence.
    pub per_frame: f64,
    /// Sum of per-map RMS within each sequence, averaged over sequences
    /// only (so it scales with the horizon length).
    pub per_sequence_sum: f64,
}

pub fn global_mean_rms(pairs: &[SequencePair]) -> Result<GlobalRms, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty("global_mean_rms"));
    }
    let mut total = 0.0;
    let mut frames = 0usize;
    for pair in pairs {
        for k in 1..=pair.horizon {
            let (p, t) = pair.frame(k);
            total += rms_map(p, t)?;
            frames += 1;
        }
    }
    Ok(GlobalRms {
        per_frame: total / frames as f64,
        per_sequence_sum: total / pairs.len() as f64,
    })
}

/// Grid row whose latitude is nearest to the requested one.
pub fn nearest_latitude_row(latitude_deg: f64) -> Result<usize, MetricsError> {
    if !(-90.0..=90.0).contains(&latitude_deg) {
        return Err(MetricsError::LatitudeOutOfRange(latitude_deg));
    }
    Ok((0..GRID)
        .min_by(|&a, &b| {
            let da = (row_latitude_deg(a) - latitude_deg).abs();
            let db = (row_latitude_deg(b) - latitude_deg).abs();
            da.total_cmp(&db)
        })
        .expect("non-empty grid"))
}

/// Per-frame RMS restricted to the single grid row nearest the latitude,
/// averaged over all frames of all sequences.
pub fn latitude_slice_rms(pairs: &[SequencePair], latitude_deg: f64) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty("latitude_slice_rms"));
    }
    let row = nearest_latitude_row(latitude_deg)?;
    let mut acc = 0.0;
    let mut frames = 0usize;
    for pair in pairs {
        if pair.frame_len() != GRID * GRID {
            return Err(MetricsError::LengthMismatch {
                left: pair.frame_len(),
                right: GRID * GRID,
            });
        }
        for k in 1..=pair.horizon {
            let (p, t) = pair.frame(k);
            acc += rms_map(&p[row * GRID..(row + 1) * GRID], &t[row * GRID..(row + 1) * GRID])?;
            frames += 1;
        }
    }
    Ok(acc / frames as f64)
}

/// Cosine-of-latitude pixel weights, normalized to sum 1 over the map.
pub fn latitude_weights() -> Vec<f64> {
    let mut w = vec![0.0f64; GRID * GRID];
    let mut sum = 0.0;
    for r in 0..GRID {
        let c = row_latitude_deg(r).to_radians().cos();
        for x in 0..GRID {
            w[r * GRID + x] = c;
            sum += c;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn weighted_mean(map: &[f32], weights: &[f64]) -> f64 {
    map.iter()
        .zip(weights.iter())
        .map(|(&v, &w)| v as f64 * w)
        .sum()
}

/// RMS of the cosine-weighted global mean TEC difference:
/// `sqrt(sum over sequences and frames of (mean(P) - mean(T))^2
/// / (n_sequences * seq_len))`.
pub fn global_mean_tec_rms(pairs: &[SequencePair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty("global_mean_tec_rms"));
    }
    let weights = latitude_weights();
    let mut acc = 0.0;
    for pair in pairs {
        if pair.frame_len() != GRID * GRID {
            return Err(MetricsError::LengthMismatch {
                left: pair.frame_len(),
                right: GRID * GRID,
            });
        }
        for k in 1..=pair.horizon {
            let (p, t) = pair.frame(k);
            let d = weighted_mean(p, &weights) - weighted_mean(t, &weights);
            acc += d * d / (pairs.len() as f64 * pair.horizon as f64);
        }
    }
    Ok(acc.sqrt())
}

/// Centered moving average; the window is truncated at the boundaries.
/// For even windows the extra sample is taken from the trailing side.
pub fn smooth_curve(values: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 || values.is_empty() {
        return values.to_vec();
    }
    let lo = (window - 1) / 2;
    let hi = window / 2;
    (0..values.len())
        .map(|i| {
            let a = i.saturating_sub(lo);
            let b = (i + hi).min(values.len() - 1);
            let s: f64 = values[a..=b].iter().sum();
            s / (b - a + 1) as f64
        })
        .collect()
}

/// Pointwise `model / baseline - 1`; negative means better than the
/// baseline.
pub fn relative_to_baseline(model: &[f64], baseline: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if model.len() != baseline.len() {
        return Err(MetricsError::LengthMismatch {
            left: model.len(),
            right: baseline.len(),
        });
    }
    model
        .iter()
        .zip(baseline.iter())
        .enumerate()
        .map(|(i, (&m, &b))| {
            if b <= 0.0 {
                Err(MetricsError::ZeroBaseline(i))
            } else {
                Ok(m / b - 1.0)
            }
        })
        .collect()
}

/// Full evaluation given model and baseline sequence pairs over the same
/// targets.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub per_sequence: Vec<f64>,
    pub per_horizon: Vec<f64>,
    pub baseline_per_horizon: Vec<f64>,
    pub relative_per_horizon: Vec<f64>,
    pub global: GlobalRms,
    pub baseline_global: GlobalRms,
    pub global_mean_tec: f64,
    pub baseline_global_mean_tec: f64,
    /// `(requested latitude, model rms, baseline rms)` rows.
    pub latitude_slices: Vec<(f64, f64, f64)>,
}

pub fn evaluate(
    model: &[SequencePair],
    baseline: &[SequencePair],
    latitudes: &[f64],
) -> Result<MetricsReport, MetricsError> {
    if model.len() != baseline.len() {
        return Err(MetricsError::LengthMismatch {
            left: model.len(),
            right: baseline.len(),
        });
    }
    let horizon = model
        .iter()
        .map(|p| p.horizon)
        .min()
        .ok_or(MetricsError::Empty("evaluate"))?;
    let per_sequence = model
        .iter()
        .map(mean_rms_sequence)
        .collect::<Result<Vec<_>, _>>()?;
    let per_horizon = (1..=horizon)
        .map(|k| mean_rms_per_horizon(model, k))
        .collect::<Result<Vec<_>, _>>()?;
    let baseline_per_horizon = (1..=horizon)
        .map(|k| mean_rms_per_horizon(baseline, k))
        .collect::<Result<Vec<_>, _>>()?;
    let relative_per_horizon = relative_to_baseline(&per_horizon, &baseline_per_horizon)?;
    let latitude_slices = latitudes
        .iter()
        .map(|&lat| {
            Ok((
                lat,
                latitude_slice_rms(model, lat)?,
                latitude_slice_rms(baseline, lat)?,
            ))
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(MetricsReport {
        per_sequence,
        per_horizon,
        baseline_per_horizon,
        relative_per_horizon,
        global: global_mean_rms(model)?,
        baseline_global: global_mean_rms(baseline)?,
        global_mean_tec: global_mean_tec_rms(model)?,
        baseline_global_mean_tec: global_mean_tec_rms(baseline)?,
        latitude_slices,
    })
}

// ---------------------------------------------------------------------------
// CSV export
// ---------------------------------------------------------------------------

/// One row per (sequence, horizon step).
pub fn write_detail_csv(
    path: impl AsRef<Path>,
    model: &[SequencePair],
    baseline: &[SequencePair],
) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "sequence_id,horizon_k,rms_tecu,baseline_rms_tecu")?;
    for (i, (m, b)) in model.iter().zip(baseline.iter()).enumerate() {
        for k in 1..=m.horizon.min(b.horizon) {
            let (p, t) = m.frame(k);
            let (bp, bt) = b.frame(k);
            writeln!(
                f,
                "{i},{k},{:.6},{:.6}",
                rms_map(p, t).unwrap_or(f64::NAN),
                rms_map(bp, bt).unwrap_or(f64::NAN)
            )?;
        }
    }
    Ok(())
}

/// One row per horizon step with the smoothed relative series alongside.
pub fn write_per_horizon_csv(path: impl AsRef<Path>, report: &MetricsReport, smooth_window: usize) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "horizon_k,rms_tecu,baseline_rms_tecu,relative_to_baseline,relative_smoothed"
    )?;
    let smoothed = smooth_curve(&report.relative_per_horizon, smooth_window);
    for (i, ((m, b), (r, s))) in report
        .per_horizon
        .iter()
        .zip(report.baseline_per_horizon.iter())
        .zip(report.relative_per_horizon.iter().zip(smoothed.iter()))
        .enumerate()
    {
        writeln!(f, "{},{m:.6},{b:.6},{r:.6},{s:.6}", i + 1)?;
    }
    Ok(())
}

/// Named summary values, one metric per row.
pub fn write_summary_csv(path: impl AsRef<Path>, report: &MetricsReport) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "metric,value")?;
    let seq_mean = report.per_sequence.iter().sum::<f64>() / report.per_sequence.len().max(1) as f64;
    writeln!(f, "sequence_mean_rms_tecu,{seq_mean:.6}")?;
    writeln!(f, "global_mean_rms_tecu,{:.6}", report.global.per_frame)?;
    writeln!(
        f,
        "global_rms_per_sequence_sum_tecu,{:.6}",
        report.global.per_sequence_sum
    )?;
    writeln!(
        f,
        "baseline_global_mean_rms_tecu,{:.6}",
        report.baseline_global.per_frame
    )?;
    writeln!(
        f,
        "baseline_global_rms_per_sequence_sum_tecu,{:.6}",
        report.baseline_global.per_sequence_sum
    )?;
    writeln!(
        f,
        "relative_global_to_baseline,{:.6}",
        report.global.per_frame / report.baseline_global.per_frame - 1.0
    )?;
    writeln!(f, "global_mean_tec_rms_tecu,{:.6}", report.global_mean_tec)?;
    writeln!(
        f,
        "baseline_global_mean_tec_rms_tecu,{:.6}",
        report.baseline_global_mean_tec
    )?;
    for (lat, rms, base) in &report.latitude_slices {
        writeln!(f, "latitude_{lat}_rms_tecu,{rms:.6}")?;
        writeln!(f, "latitude_{lat}_baseline_rms_tecu,{base:.6}")?;
    }
    Ok(())
}
