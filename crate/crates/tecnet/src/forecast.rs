//! Rolling a model over an input sequence under the direct or residual
//! scheme, plus the periodic replay baseline.
//!
//! A sequence is 60 frames at 2 h cadence: the first 36 (3 days) are
//! observed inputs, the last up-to-24 (48 h) are prediction targets. The
//! rollout warms the recurrent state over all 36 input frames (outputs
//! discarded), then predicts step by step, feeding the last input frame at
//! the first prediction step and each prediction back in afterwards.

use std::str::FromStr;

use thiserror::Error;

use crate::arch::Model;
use crate::tensor::{gaussian_blur, stack_time, Element, Tensor, TensorError};

/// Frames in the observed input window (3 days at 2 h cadence).
pub const INPUT_LEN: usize = 36;
/// Longest supported prediction horizon (48 h at 2 h cadence).
pub const MAX_HORIZON: usize = 24;
/// Full sequence length (inputs plus targets).
pub const SEQ_LEN: usize = 60;
/// Blur width applied to the residual scheme's reference frame.
pub const RESIDUAL_BLUR_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForecastError {
    #[error("prediction index {k} outside 1..={max}")]
    HorizonOutOfRange { k: usize, max: usize },
    #[error("expected input tensor [B,{INPUT_LEN},1,H,W], got {shape:?}")]
    BadInputShape { shape: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How network outputs become predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecastScheme {
    /// The network output is the next map.
    Direct,
    /// The network output is a correction added to the blurred reference
    /// frame at the same solar time.
    Residual,
}

impl ForecastScheme {
    pub fn name(&self) -> &'static str {
        match self {
            ForecastScheme::Direct => "direct",
            ForecastScheme::Residual => "residual",
        }
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            ForecastScheme::Direct => 0,
            ForecastScheme::Residual => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ForecastScheme::Direct),
            1 => Some(ForecastScheme::Residual),
            _ => None,
        }
    }
}

impl FromStr for ForecastScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(ForecastScheme::Direct),
            "residual" => Ok(ForecastScheme::Residual),
            other => Err(format!("unknown scheme '{other}' (expected direct or residual)")),
        }
    }
}

impl std::fmt::Display for ForecastScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One batch of sequences: normalized heliocentric frames split into the
/// observed window and the targets, with the epoch of each item's first
/// input frame.
#[derive(Debug, Clone)]
pub struct SequenceBatch<E: Element = f32> {
    /// `[B, 36, 1, H, W]`
    pub inputs: Tensor<E>,
    /// `[B, P, 1, H, W]`, `P <= 24`
    pub targets: Tensor<E>,
    /// Epoch (Unix seconds) of each item's first input frame; frames are 2 h
    /// apart and contiguous.
    pub start_epochs: Vec<i64>,
}

fn check_inputs<E: Element>(inputs: &Tensor<E>) -> Result<(usize, usize, usize), ForecastError> {
    let s = inputs.shape();
    if s.len() != 5 || s[1] != INPUT_LEN || s[2] != 1 {
        return Err(ForecastError::BadInputShape { shape: s.to_vec() });
    }
    Ok((s[0], s[3], s[4]))
}

/// Copy input frame `idx` out of `[B,36,1,H,W]` as a constant `[B,1,H,W]`.
fn input_frame<E: Element>(inputs: &Tensor<E>, idx: usize) -> Tensor<E> {
    let s = inputs.shape();
    let (b, t, frame) = (s[0], s[1], s[2] * s[3] * s[4]);
    let src = inputs.data();
    let mut data = vec![E::zero(); b * frame];
    for bi in 0..b {
        data[bi * frame..(bi + 1) * frame]
            .copy_from_slice(&src[(bi * t + idx) * frame..(bi * t + idx + 1) * frame]);
    }
    Tensor::from_vec(&[b, 1, s[3], s[4]], data).expect("frame shape")
}

/// Input index holding the same-solar-time frame for prediction step `k`
/// (1-based): lag 24 h while it lies in the observed window, lag 48 h
/// beyond it.
///
/// With input indices 0..=35 covering t-70h..t, prediction k covers t+2k.
///
/// | k       | lag  | index  |
/// |---------|------|--------|
/// | 1..=12  | 24 h | 23 + k |
/// | 13..=24 | 48 h | 11 + k |
pub fn reference_index(k: usize) -> Result<usize, ForecastError> {
    if k == 0 || k > MAX_HORIZON {
        return Err(ForecastError::HorizonOutOfRange {
            k,
            max: MAX_HORIZON,
        });
    }
    Ok(if k <= 12 { 23 + k } else { 11 + k })
}

/// The unblurred same-solar-time input frame for prediction step `k`.
pub fn reference_frame<E: Element>(
    inputs: &Tensor<E>,
    k: usize,
) -> Result<Tensor<E>, ForecastError> {
    check_inputs(inputs)?;
    Ok(input_frame(inputs, reference_index(k)?))
}

/// Roll the model over the batch: 36 warm-up steps plus `horizon` prediction
/// steps (recurrent state persists across the boundary). Returns
/// `[B, horizon, 1, H, W]`.
pub fn predict<E: Element>(
    model: &Model<E>,
    scheme: ForecastScheme,
    inputs: &Tensor<E>,
    horizon: usize,
) -> Result<Tensor<E>, ForecastError> {
    Ok(rollout(model, scheme, inputs, horizon)?.0)
}

/// [`predict`] plus the final recurrent states (each slot has advanced
/// exactly `36 + horizon` times).
pub fn rollout<E: Element>(
    model: &Model<E>,
    scheme: ForecastScheme,
    inputs: &Tensor<E>,
    horizon: usize,
) -> Result<(Tensor<E>, Vec<crate::cells::CellState<E>>), ForecastError> {
    let (batch, _, _) = check_inputs(inputs)?;
    if horizon == 0 || horizon > MAX_HORIZON {
        return Err(ForecastError::HorizonOutOfRange {
            k: horizon,
            max: MAX_HORIZON,
        });
    }
    let mut states = model.init_states(batch);
    for t in 0..INPUT_LEN {
        let frame = input_frame(inputs, t);
        let _ = model.step(&frame, &mut states)?;
    }
    let mut predictions = Vec::with_capacity(horizon);
    let mut feed = input_frame(inputs, INPUT_LEN - 1);
    for k in 1..=horizon {
        let out = model.step(&feed, &mut states)?;
        let pred = match scheme {
            ForecastScheme::Direct => out,
            ForecastScheme::Residual => {
                let reference = input_frame(inputs, reference_index(k)?);
                let blurred = gaussian_blur(&reference, RESIDUAL_BLUR_SIGMA)?;
                blurred.add(&out)?
            }
        };
        feed = pred.clone();
        predictions.push(pred);
    }
    Ok((stack_time(&predictions)?, states))
}

/// Replay the input window as the forecast, exploiting the 24 h periodicity
/// of the maps. Returns `[B, horizon, 1, H, W]`.
pub fn periodic_baseline<E: Element>(
    inputs: &Tensor<E>,
    horizon: usize,
) -> Result<Tensor<E>, ForecastError> {
    check_inputs(inputs)?;
    if horizon == 0 || horizon > MAX_HORIZON {
        return Err(ForecastError::HorizonOutOfRange {
            k: horizon,
            max: MAX_HORIZON,
        });
    }
    let frames: Vec<Tensor<E>> = (1..=horizon)
        .map(|k| reference_frame(inputs, k))
        .collect::<Result<_, _>>()?;
    Ok(stack_time(&frames)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchKind;

    fn ramp_inputs(b: usize, h: usize, w: usize) -> Tensor<f32> {
        // frame t filled with t/100 so frames are distinguishable
        let frame = h * w;
        let mut data = vec![0.0f32; b * INPUT_LEN * frame];
        for bi in 0..b {
            for t in 0..INPUT_LEN {
                for v in &mut data[(bi * INPUT_LEN + t) * frame..(bi * INPUT_LEN + t + 1) * frame] {
                    *v = t as f32 / 100.0 + bi as f32;
                }
            }
        }
        Tensor::from_vec(&[b, INPUT_LEN, 1, h, w], data).unwrap()
    }

    #[test]
    fn reference_index_table() {
        assert_eq!(reference_index(1).unwrap(), 24); // t-22h, 24h before t+2h
        assert_eq!(reference_index(12).unwrap(), 35); // frame at t
        assert_eq!(reference_index(13).unwrap(), 24); // lag 48h
        assert_eq!(reference_index(24).unwrap(), 35); // lag 48h of t+48h
        assert!(reference_index(0).is_err());
        assert!(reference_index(25).is_err());
    }

    #[test]
    fn reference_frame_picks_the_right_slot() {
        let inputs = ramp_inputs(2, 4, 4);
        let r = reference_frame(&inputs, 1).unwrap();
        assert_eq!(r.shape(), &[2, 1, 4, 4]);
        assert!((r.data()[0] - 0.24).abs() < 1e-6);
        assert!((r.data()[16] - 1.24).abs() < 1e-6);
    }

    #[test]
    fn baseline_of_constant_sequence_is_that_constant() {
        let inputs = Tensor::full(&[1, INPUT_LEN, 1, 4, 4], 5.5f32);
        let base = periodic_baseline(&inputs, 24).unwrap();
        assert_eq!(base.shape(), &[1, 24, 1, 4, 4]);
        assert!(base.data().iter().all(|&v| v == 5.5));
    }

    #[test]
    fn zero_model_residual_equals_blurred_reference() {
        let model: Model<f32> = {
            let mut m = Model::build_with_grid(ArchKind::Dcnn121, 0, 12).unwrap();
            let dump: Vec<(String, Vec<usize>, Vec<f32>)> = m
                .named_params()
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec(), vec![0.0; t.numel()]))
                .collect();
            m.load_named_params(&dump).unwrap();
            m
        };
        let inputs = ramp_inputs(1, 12, 12);
        let pred = predict(&model, ForecastScheme::Residual, &inputs, 4).unwrap();
        for k in 1..=4usize {
            let expect = gaussian_blur(&reference_frame(&inputs, k).unwrap(), RESIDUAL_BLUR_SIGMA).unwrap();
            let frame = 12 * 12;
            let got = &pred.data()[(k - 1) * frame..k * frame];
            for (g, e) in got.iter().zip(expect.data().iter()) {
                assert_eq!(g, e, "k={k}");
            }
        }
    }

    #[test]
    fn zero_model_direct_predicts_zero_maps() {
        let model: Model<f32> = {
            let mut m = Model::build_with_grid(ArchKind::Dcnn121, 0, 12).unwrap();
            let dump: Vec<(String, Vec<usize>, Vec<f32>)> = m
                .named_params()
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec(), vec![0.0; t.numel()]))
                .collect();
            m.load_named_params(&dump).unwrap();
            m
        };
        let inputs = ramp_inputs(1, 12, 12);
        let pred = predict(&model, ForecastScheme::Direct, &inputs, 3).unwrap();
        assert!(pred.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_horizon_advances_each_slot_37_times() {
        let model: Model<f32> = Model::build_with_grid(ArchKind::Dcnn121, 3, 12).unwrap();
        let inputs = ramp_inputs(1, 12, 12);
        let (pred, states) = rollout(&model, ForecastScheme::Direct, &inputs, 1).unwrap();
        assert_eq!(pred.shape(), &[1, 1, 1, 12, 12]);
        for st in &states {
            assert_eq!(st.steps, 37);
        }
    }

    #[test]
    fn direct_and_residual_consume_identical_step_counts() {
        let model: Model<f32> = Model::build_with_grid(ArchKind::RUnet, 2, 12).unwrap();
        let inputs = ramp_inputs(1, 12, 12);
        for horizon in [1usize, 5] {
            let (_, sd) = rollout(&model, ForecastScheme::Direct, &inputs, horizon).unwrap();
            let (_, sr) = rollout(&model, ForecastScheme::Residual, &inputs, horizon).unwrap();
            let d: Vec<u64> = sd.iter().map(|s| s.steps).collect();
            let r: Vec<u64> = sr.iter().map(|s| s.steps).collect();
            assert_eq!(d, r);
            assert!(d.iter().all(|&s| s == (INPUT_LEN + horizon) as u64));
        }
    }

    #[test]
    fn prefix_property_under_causal_feeding() {
        let model: Model<f32> = Model::build_with_grid(ArchKind::Dcnn121, 9, 12).unwrap();
        let inputs = ramp_inputs(1, 12, 12);
        let long = predict(&model, ForecastScheme::Residual, &inputs, 24).unwrap();
        let short = predict(&model, ForecastScheme::Residual, &inputs, 12).unwrap();
        let frame = 12 * 12;
        assert_eq!(
            &long.data()[..12 * frame],
            &short.data()[..],
            "first 12 frames must agree"
        );
        let _ = frame;
    }

    #[test]
    fn direct_and_residual_are_deterministic() {
        let model: Model<f32> = Model::build_with_grid(ArchKind::RUnet, 4, 12).unwrap();
        let inputs = ramp_inputs(2, 12, 12);
        for scheme in [ForecastScheme::Direct, ForecastScheme::Residual] {
            let a = predict(&model, scheme, &inputs, 3).unwrap();
            let b = predict(&model, scheme, &inputs, 3).unwrap();
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }
}
