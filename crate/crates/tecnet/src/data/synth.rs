//! Deterministic synthetic map generator: a diurnal bulge following the
//! sub-solar point, drifting smooth anomalies that break the 24 h
//! periodicity, and seeded pixel noise. With anomalies and noise disabled
//! the frames are exactly 24 h periodic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{epoch_from_ymdhms, row_latitude_deg, FrameSpace, TecMap, FRAME_SECONDS, GRID};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub frames: usize,
    /// TECU floor everywhere.
    pub base_level: f64,
    /// Peak TECU added by the diurnal bulge.
    pub diurnal_amplitude: f64,
    /// Number of drifting anomaly blobs.
    pub anomaly_count: usize,
    /// Anomaly drift speed scale, grid columns per frame.
    pub anomaly_drift: f64,
    /// Uniform pixel noise amplitude in TECU.
    pub noise_scale: f64,
    /// Clamp ceiling in TECU.
    pub max_value: f64,
    pub start_epoch: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 600,
            base_level: 8.0,
            diurnal_amplitude: 40.0,
            anomaly_count: 4,
            anomaly_drift: 0.35,
            noise_scale: 0.3,
            max_value: 120.0,
            start_epoch: epoch_from_ymdhms(2014, 1, 1, 0, 0, 0),
        }
    }
}

struct Anomaly {
    amplitude: f64,
    lon0: f64,
    lat_row0: f64,
    sigma_lon: f64,
    sigma_lat: f64,
    drift_lon: f64,
    drift_lat: f64,
    breath_period: f64,
    breath_phase: f64,
}

/// Geographic, unnormalized TECU frames at 2 h cadence.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Vec<TecMap> {
    let mut setup = ChaCha8Rng::seed_from_u64(seed);
    setup.set_stream(0);
    let anomalies: Vec<Anomaly> = (0..config.anomaly_count)
        .map(|_| Anomaly {
            amplitude: config.diurnal_amplitude * setup.gen_range(0.25..0.6),
            lon0: setup.gen_range(0.0..GRID as f64),
            lat_row0: setup.gen_range(14.0..(GRID as f64 - 14.0)),
            sigma_lon: setup.gen_range(4.0..9.0),
            sigma_lat: setup.gen_range(3.0..7.0),
            drift_lon: config.anomaly_drift * setup.gen_range(0.5..1.5) * sign(&mut setup),
            drift_lat: config.anomaly_drift * setup.gen_range(0.1..0.3) * sign(&mut setup),
            // amplitude modulation deliberately off the 12-frame day cycle
            breath_period: setup.gen_range(29.0..47.0),
            breath_phase: setup.gen_range(0.0..std::f64::consts::TAU),
        })
        .collect();

    (0..config.frames)
        .map(|fi| {
            let epoch = config.start_epoch + fi as i64 * FRAME_SECONDS;
            let secs_of_day = epoch.rem_euclid(86_400) as f64;
            // sub-solar longitude column: noon at Greenwich maps to the
            // +0 degree column at 12:00 UTC
            let sun_col = (GRID as f64) * (0.5 - secs_of_day / 86_400.0) + GRID as f64 / 2.0;

            let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
            noise_rng.set_stream(fi as u64 + 1);

            let mut grid = vec![0.0f32; GRID * GRID];
            for r in 0..GRID {
                let lat = row_latitude_deg(r).to_radians();
                let coslat = lat.cos();
                for c in 0..GRID {
                    let dlon = circular_cols(c as f64 - sun_col) * 5.0f64.to_radians();
                    let day = dlon.cos().max(0.0);
                    let mut v = config.base_level
                        + config.diurnal_amplitude * day * day * coslat * coslat;
                    for a in &anomalies {
                        let t = fi as f64;
                        let lon_c = a.lon0 + a.drift_lon * t;
                        let lat_c = a.lat_row0 + a.drift_lat * t;
                        let dl = circular_cols(c as f64 - lon_c);
                        let dr = r as f64 - lat_c;
                        let breath =
                            0.55 + 0.45 * (std::f64::consts::TAU * t / a.breath_period + a.breath_phase).sin();
                        v += a.amplitude
                            * breath
                            * (-(dl * dl) / (2.0 * a.sigma_lon * a.sigma_lon)
                                - (dr * dr) / (2.0 * a.sigma_lat * a.sigma_lat))
                                .exp();
                    }
                    if config.noise_scale > 0.0 {
                        v += noise_rng.gen_range(-config.noise_scale..config.noise_scale);
                    }
                    grid[r * GRID + c] = v.clamp(0.0, config.max_value) as f32;
                }
            }
            TecMap {
                grid,
                epoch,
                space: FrameSpace::Geographic,
                normalized: false,
            }
        })
        .collect()
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Signed circular distance in columns, in (-GRID/2, GRID/2].
fn circular_cols(d: f64) -> f64 {
    let g = GRID as f64;
    let m = d.rem_euclid(g);
    if m > g / 2.0 {
        m - g
    } else {
        m
    }
}
