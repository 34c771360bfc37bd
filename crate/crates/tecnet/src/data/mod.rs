//! Map ingestion and preprocessing: resize raw 71x73 grids to 72x72,
//! rotate into the heliocentric frame, normalize by the training maximum,
//! build 60-frame sliding windows, and generate synthetic datasets for
//! desk-scale experiments.

mod ionex;
mod io;
mod synth;

pub use ionex::{format_ionex, parse_ionex};
pub use io::{load_dataset, save_dataset};
pub use synth::{synth_generate, SynthConfig};

use thiserror::Error;

use crate::forecast::{SequenceBatch, INPUT_LEN, SEQ_LEN};
use crate::tensor::Tensor;

/// Target grid extent after preprocessing.
pub const GRID: usize = 72;
/// Latitude rows in the raw exchange grid (+87.5 to -87.5 step -2.5).
pub const RAW_ROWS: usize = 71;
/// Longitude columns in the raw exchange grid (-180 to +180 step 5; the
/// first and last columns are the same meridian).
pub const RAW_COLS: usize = 73;
/// Seconds between consecutive frames (2 h cadence).
pub const FRAME_SECONDS: i64 = 7200;

/// Latitude in degrees of a resized grid row (72 rows spanning +87.5..-87.5).
pub fn row_latitude_deg(row: usize) -> f64 {
    87.5 - row as f64 * 175.0 / 71.0
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("expected a {RAW_ROWS}x{RAW_COLS} grid, got {rows}x{cols}")]
    RawExtent { rows: usize, cols: usize },
    #[error("frame at epoch {epoch} is already in the {space:?} frame")]
    SpaceFlag { epoch: i64, space: FrameSpace },
    #[error("normalization constant must be positive, got {0}")]
    BadMaxTrain(f32),
    #[error("need at least {SEQ_LEN} contiguous frames, got {0}")]
    TooFewFrames(usize),
    #[error("dataset has no train/test boundary")]
    NoSplit,
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw exchange-format map: 71 latitude rows x 73 longitude columns of
/// TECU values at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTecMap {
    /// Row-major, north first, west (-180) first.
    pub grid: Vec<f64>,
    /// Unix seconds, 2 h cadence.
    pub epoch: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameSpace {
    Geographic,
    Heliocentric,
}

impl FrameSpace {
    pub(crate) fn tag(&self) -> u8 {
        match self {
            FrameSpace::Geographic => 0,
            FrameSpace::Heliocentric => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(FrameSpace::Geographic),
            1 => Some(FrameSpace::Heliocentric),
            _ => None,
        }
    }
}

/// One preprocessed 72x72 map.
#[derive(Debug, Clone, PartialEq)]
pub struct TecMap {
    /// Row-major, north first, west first; TECU or normalized units.
    pub grid: Vec<f32>,
    pub epoch: i64,
    pub space: FrameSpace,
    pub normalized: bool,
}

/// Drop the duplicated final longitude column (73 -> 72) and linearly
/// interpolate latitude onto 72 equally spaced rows spanning the same range
/// (output row r samples fractional source row `r * 70 / 71`).
pub fn resize_to_72(raw: &RawTecMap) -> Result<TecMap, DataError> {
    if raw.grid.len() != RAW_ROWS * RAW_COLS {
        let rows = raw.grid.len() / RAW_COLS;
        return Err(DataError::RawExtent {
            rows,
            cols: if raw.grid.len() % RAW_COLS == 0 { RAW_COLS } else { 0 },
        });
    }
    let mut grid = vec![0.0f32; GRID * GRID];
    for r in 0..GRID {
        let pos = r as f64 * (RAW_ROWS as f64 - 1.0) / (GRID as f64 - 1.0);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(RAW_ROWS - 1);
        let t = pos - lo as f64;
        for c in 0..GRID {
            let a = raw.grid[lo * RAW_COLS + c];
            let b = raw.grid[hi * RAW_COLS + c];
            grid[r * GRID + c] = ((1.0 - t) * a + t * b) as f32;
        }
    }
    Ok(TecMap {
        grid,
        epoch: raw.epoch,
        space: FrameSpace::Geographic,
        normalized: false,
    })
}

/// Whole columns of circular shift that cancel Earth rotation for this
/// epoch: `round(seconds_of_day / 86400 * 72)`, i.e. 3 columns per hour.
pub fn rotation_columns(epoch: i64) -> usize {
    let secs = epoch.rem_euclid(86_400) as f64;
    (secs / 86_400.0 * GRID as f64).round() as usize % GRID
}

fn shift_columns(grid: &[f32], shift: i64) -> Vec<f32> {
    let mut out = vec![0.0f32; grid.len()];
    for r in 0..GRID {
        for c in 0..GRID {
            let src = (c as i64 + shift).rem_euclid(GRID as i64) as usize;
            out[r * GRID + c] = grid[r * GRID + src];
        }
    }
    out
}

/// Rotate so the sub-solar longitude sits at a fixed column across frames.
pub fn to_heliocentric(map: &TecMap) -> Result<TecMap, DataError> {
    if map.space == FrameSpace::Heliocentric {
        return Err(DataError::SpaceFlag {
            epoch: map.epoch,
            space: map.space,
        });
    }
    let s = rotation_columns(map.epoch) as i64;
    Ok(TecMap {
        grid: shift_columns(&map.grid, -s),
        epoch: map.epoch,
        space: FrameSpace::Heliocentric,
        normalized: map.normalized,
    })
}

/// Inverse of [`to_heliocentric`].
pub fn from_heliocentric(map: &TecMap) -> Result<TecMap, DataError> {
    if map.space == FrameSpace::Geographic {
        return Err(DataError::SpaceFlag {
            epoch: map.epoch,
            space: map.space,
        });
    }
    let s = rotation_columns(map.epoch) as i64;
    Ok(TecMap {
        grid: shift_columns(&map.grid, s),
        epoch: map.epoch,
        space: FrameSpace::Geographic,
        normalized: map.normalized,
    })
}

/// Ordered frames with the train normalization constant and an optional
/// train/test boundary (epoch of the last training frame). Sliding windows
/// index into the shared frame storage; nothing is copied until a batch is
/// assembled.
#[derive(Debug, Clone)]
pub struct TecDataset {
    frames: Vec<TecMap>,
    pub max_train: f32,
    pub train_until: Option<i64>,
}

impl TecDataset {
    pub fn new(frames: Vec<TecMap>) -> Self {
        TecDataset {
            frames,
            max_train: 0.0,
            train_until: None,
        }
    }

    pub fn frames(&self) -> &[TecMap] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Set the boundary so that roughly `frac` of the frames are training
    /// frames.
    pub fn split_by_fraction(&mut self, frac: f64) -> Result<(), DataError> {
        if self.frames.is_empty() {
            return Err(DataError::TooFewFrames(0));
        }
        let n_train = ((self.frames.len() as f64 * frac).round() as usize)
            .clamp(1, self.frames.len());
        self.train_until = Some(self.frames[n_train - 1].epoch);
        Ok(())
    }

    pub fn split_at_epoch(&mut self, epoch: i64) {
        self.train_until = Some(epoch);
    }

    /// Normalize every frame to the maximum value over training frames.
    /// Values are divided, never clamped, so test values may exceed 1.
    pub fn normalize(&mut self) -> Result<(), DataError> {
        let boundary = self.train_until.ok_or(DataError::NoSplit)?;
        let mut max = f32::MIN;
        for f in self.frames.iter().filter(|f| f.epoch <= boundary) {
            for &v in &f.grid {
                max = max.max(v);
            }
        }
        if !(max > 0.0) {
            return Err(DataError::BadMaxTrain(max));
        }
        self.max_train = max;
        for f in &mut self.frames {
            for v in &mut f.grid {
                *v /= max;
            }
            f.normalized = true;
        }
        Ok(())
    }

    /// Convert preprocessed geographic TECU frames in place: heliocentric
    /// rotation followed by normalization.
    pub fn preprocess(&mut self) -> Result<(), DataError> {
        for f in &mut self.frames {
            *f = to_heliocentric(f)?;
        }
        self.normalize()
    }

    /// Start offsets of every 60-frame contiguous window (stride 1).
    pub fn sequence_starts(&self) -> Vec<usize> {
        self.window_starts(|_| true)
    }

    /// Windows fully inside the training region (last frame at or before
    /// the boundary).
    pub fn train_starts(&self) -> Result<Vec<usize>, DataError> {
        let boundary = self.train_until.ok_or(DataError::NoSplit)?;
        Ok(self.window_starts(|w: &[TecMap]| w[SEQ_LEN - 1].epoch <= boundary))
    }

    /// Windows whose earliest frame lies strictly after the boundary.
    pub fn test_starts(&self) -> Result<Vec<usize>, DataError> {
        let boundary = self.train_until.ok_or(DataError::NoSplit)?;
        Ok(self.window_starts(|w: &[TecMap]| w[0].epoch > boundary))
    }

    fn window_starts(&self, keep: impl Fn(&[TecMap]) -> bool) -> Vec<usize> {
        if self.frames.len() < SEQ_LEN {
            return Vec::new();
        }
        (0..=self.frames.len() - SEQ_LEN)
            .filter(|&s| {
                let w = &self.frames[s..s + SEQ_LEN];
                let contiguous = w
                    .windows(2)
                    .all(|p| p[1].epoch - p[0].epoch == FRAME_SECONDS);
                contiguous && keep(w)
            })
            .collect()
    }

    /// Assemble `[B,36,1,72,72]` inputs and `[B,P,1,72,72]` targets for the
    /// windows starting at `starts`.
    pub fn make_batch(&self, starts: &[usize], horizon: usize) -> Result<SequenceBatch, DataError> {
        let b = starts.len();
        let frame = GRID * GRID;
        let mut inputs = vec![0.0f32; b * INPUT_LEN * frame];
        let mut targets = vec![0.0f32; b * horizon * frame];
        let mut epochs = Vec::with_capacity(b);
        for (bi, &s) in starts.iter().enumerate() {
            if s + INPUT_LEN + horizon > self.frames.len() {
                return Err(DataError::TooFewFrames(self.frames.len()));
            }
            epochs.push(self.frames[s].epoch);
            for t in 0..INPUT_LEN {
                inputs[(bi * INPUT_LEN + t) * frame..(bi * INPUT_LEN + t + 1) * frame]
                    .copy_from_slice(&self.frames[s + t].grid);
            }
            for k in 0..horizon {
                targets[(bi * horizon + k) * frame..(bi * horizon + k + 1) * frame]
                    .copy_from_slice(&self.frames[s + INPUT_LEN + k].grid);
            }
        }
        Ok(SequenceBatch {
            inputs: Tensor::from_vec(&[b, INPUT_LEN, 1, GRID, GRID], inputs)
                .expect("input batch shape"),
            targets: Tensor::from_vec(&[b, horizon, 1, GRID, GRID], targets)
                .expect("target batch shape"),
            start_epochs: epochs,
        })
    }
}

/// Multiply normalized values back into TECU.
pub fn denormalize(values: &mut [f32], max_train: f32) {
    for v in values {
        *v *= max_train;
    }
}

/// (year, month, day, hour, minute, second) in UTC to Unix seconds.
/// Days-from-civil arithmetic, valid for all IONEX-era dates.
pub fn epoch_from_ymdhms(y: i64, m: i64, d: i64, hh: i64, mm: i64, ss: i64) -> i64 {
    let y_adj = if m <= 2 { y - 1 } else { y };
    let era = y_adj.div_euclid(400);
    let yoe = y_adj - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    let days = era * 146_097 + doe - 719_468;
    days * 86_400 + hh * 3600 + mm * 60 + ss
}

/// Inverse of [`epoch_from_ymdhms`].
pub fn ymdhms_from_epoch(epoch: i64) -> (i64, i64, i64, i64, i64, i64) {
    let days = epoch.div_euclid(86_400);
    let secs = epoch.rem_euclid(86_400);
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    (y, m, d, secs / 3600, (secs % 3600) / 60, secs % 60)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_constant(c: f64, epoch: i64) -> RawTecMap {
        RawTecMap {
            grid: vec![c; RAW_ROWS * RAW_COLS],
            epoch,
        }
    }

    #[test]
    fn resize_constant_stays_constant() {
        let m = resize_to_72(&raw_constant(13.25, 0)).unwrap();
        assert_eq!(m.grid.len(), GRID * GRID);
        assert!(m.grid.iter().all(|&v| v == 13.25));
    }

    #[test]
    fn duplicate_meridian_column_never_influences_output() {
        let mut a = raw_constant(1.0, 0);
        let mut b = raw_constant(1.0, 0);
        for r in 0..RAW_ROWS {
            b.grid[r * RAW_COLS + RAW_COLS - 1] = 999.0;
        }
        a.grid[5] = 3.0;
        b.grid[5] = 3.0;
        assert_eq!(resize_to_72(&a).unwrap().grid, resize_to_72(&b).unwrap().grid);
    }

    #[test]
    fn latitude_ramp_interpolates_linearly() {
        let mut raw = raw_constant(0.0, 0);
        for r in 0..RAW_ROWS {
            for c in 0..RAW_COLS {
                raw.grid[r * RAW_COLS + c] = r as f64;
            }
        }
        let m = resize_to_72(&raw).unwrap();
        for r in 0..GRID {
            let expect = r as f64 * 70.0 / 71.0;
            assert!(
                (m.grid[r * GRID] as f64 - expect).abs() < 1e-5,
                "row {r}: {} vs {expect}",
                m.grid[r * GRID]
            );
        }
    }

    #[test]
    fn resize_stays_within_source_range() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut raw = raw_constant(0.0, 0);
        for v in &mut raw.grid {
            *v = rng.gen_range(0.0..80.0);
        }
        let (lo, hi) = raw
            .grid
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let m = resize_to_72(&raw).unwrap();
        for &v in &m.grid {
            assert!(v as f64 >= lo - 1e-6 && v as f64 <= hi + 1e-6);
        }
    }

    #[test]
    fn wrong_extent_is_rejected() {
        let raw = RawTecMap {
            grid: vec![0.0; 70 * RAW_COLS],
            epoch: 0,
        };
        assert!(matches!(
            resize_to_72(&raw),
            Err(DataError::RawExtent { rows: 70, .. })
        ));
    }

    #[test]
    fn rotation_shift_steps_six_columns_per_frame() {
        let e0 = epoch_from_ymdhms(2014, 1, 1, 0, 0, 0);
        assert_eq!(rotation_columns(e0), 0);
        assert_eq!(rotation_columns(e0 + FRAME_SECONDS), 6);
        assert_eq!(rotation_columns(e0 + 12 * FRAME_SECONDS), 0); // 24 h wraps
    }

    fn checker_map(epoch: i64) -> TecMap {
        let mut grid = vec![0.0f32; GRID * GRID];
        for (i, v) in grid.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 101) as f32;
        }
        TecMap {
            grid,
            epoch,
            space: FrameSpace::Geographic,
            normalized: false,
        }
    }

    #[test]
    fn heliocentric_round_trip_is_exact() {
        let m = checker_map(epoch_from_ymdhms(2016, 7, 3, 10, 0, 0));
        let h = to_heliocentric(&m).unwrap();
        assert_eq!(h.space, FrameSpace::Heliocentric);
        let back = from_heliocentric(&h).unwrap();
        assert_eq!(back.grid, m.grid);
        assert_eq!(back.space, FrameSpace::Geographic);
    }

    #[test]
    fn heliocentric_is_a_pure_permutation() {
        let m = checker_map(epoch_from_ymdhms(2015, 3, 5, 14, 0, 0));
        let h = to_heliocentric(&m).unwrap();
        let mut a = m.grid.clone();
        let mut b = h.grid.clone();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn double_transform_is_rejected() {
        let m = checker_map(0);
        let h = to_heliocentric(&m).unwrap();
        assert!(to_heliocentric(&h).is_err());
        assert!(from_heliocentric(&m).is_err());
    }

    #[test]
    fn epochs_full_day_apart_shift_identically() {
        let e = epoch_from_ymdhms(2014, 6, 1, 8, 0, 0);
        assert_eq!(rotation_columns(e), rotation_columns(e + 86_400));
    }

    fn dataset_of(n: usize) -> TecDataset {
        let e0 = epoch_from_ymdhms(2014, 1, 1, 0, 0, 0);
        let frames = (0..n)
            .map(|i| TecMap {
                grid: vec![1.0 + i as f32; GRID * GRID],
                epoch: e0 + i as i64 * FRAME_SECONDS,
                space: FrameSpace::Heliocentric,
                normalized: false,
            })
            .collect();
        TecDataset::new(frames)
    }

    #[test]
    fn window_counts() {
        assert_eq!(dataset_of(100).sequence_starts().len(), 41);
        assert_eq!(dataset_of(60).sequence_starts().len(), 1);
        assert_eq!(dataset_of(59).sequence_starts().len(), 0);
    }

    #[test]
    fn gap_breaks_windows() {
        let mut ds = dataset_of(130);
        ds.frames[65].epoch += 60; // break contiguity in the middle
        let starts = ds.sequence_starts();
        // windows covering index 65 at any position are gone
        assert!(starts.iter().all(|&s| !(s..s + SEQ_LEN).contains(&65) || s + SEQ_LEN <= 65));
        assert!(starts.len() < 71);
    }

    #[test]
    fn split_never_leaks() {
        let mut ds = dataset_of(200);
        ds.split_by_fraction(0.6).unwrap();
        let boundary = ds.train_until.unwrap();
        for &s in &ds.train_starts().unwrap() {
            assert!(ds.frames[s + SEQ_LEN - 1].epoch <= boundary);
        }
        for &s in &ds.test_starts().unwrap() {
            assert!(ds.frames[s].epoch > boundary);
        }
    }

    #[test]
    fn normalization_uses_train_frames_only() {
        let mut ds = dataset_of(100); // values 1..=100; frame i has 1+i
        ds.split_by_fraction(0.8).unwrap();
        ds.normalize().unwrap();
        assert_eq!(ds.max_train, 80.0);
        // the training maximum maps to exactly 1.0
        assert_eq!(ds.frames[79].grid[0], 1.0);
        // test values beyond the train max exceed 1 (no clamping)
        assert!(ds.frames[99].grid[0] > 1.0);
        let mut v = vec![ds.frames[79].grid[0]];
        denormalize(&mut v, ds.max_train);
        assert_eq!(v[0], 80.0);
    }

    #[test]
    fn batch_assembly_shapes_and_values() {
        let mut ds = dataset_of(70);
        ds.split_by_fraction(1.0).unwrap();
        let batch = ds.make_batch(&[0, 5], 24).unwrap();
        assert_eq!(batch.inputs.shape(), &[2, INPUT_LEN, 1, GRID, GRID]);
        assert_eq!(batch.targets.shape(), &[2, 24, 1, GRID, GRID]);
        // first target frame of window 5 is frame index 41
        let frame = GRID * GRID;
        let v = batch.targets.data()[(1 * 24) * frame];
        assert_eq!(v, 1.0 + 41.0);
        assert_eq!(batch.start_epochs.len(), 2);
    }

    #[test]
    fn civil_epoch_round_trip() {
        for (y, m, d, hh) in [
            (2014, 1, 1, 0),
            (2016, 2, 29, 22),
            (2016, 12, 31, 12),
            (1970, 1, 1, 0),
        ] {
            let e = epoch_from_ymdhms(y, m, d, hh, 0, 0);
            assert_eq!(ymdhms_from_epoch(e), (y, m, d, hh, 0, 0));
        }
        assert_eq!(epoch_from_ymdhms(1970, 1, 1, 0, 0, 0), 0);
        assert_eq!(epoch_from_ymdhms(2014, 1, 1, 0, 0, 0), 1_388_534_400);
    }
}
