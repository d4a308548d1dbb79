//! Seeded synthetic series for tests, smoke runs and demos.

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use higenet_core::data::{TimeSeriesFrame, AIOPS_COLUMNS, AIOPS_INTERVAL_MINUTES, AIOPS_TARGET};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2020, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

/// `dims` hourly channels, each `sin(2πt/24 + φ) + 0.5·sin(2πt/60 + ψ)`
/// with random phases plus Gaussian noise of standard deviation `noise`.
/// Columns are `s0…`; the last one is the target.
pub fn seasonal_frame(len: usize, dims: usize, noise: f64, seed: u64) -> TimeSeriesFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let phases: Vec<(f64, f64)> = (0..dims)
        .map(|_| (rng.random_range(0.0..tau), rng.random_range(0.0..tau)))
        .collect();
    let normal = Normal::new(0.0, noise).expect("valid noise level");
    let t0 = start();
    let timestamps = (0..len).map(|i| t0 + TimeDelta::hours(i as i64)).collect();
    let mut values = Vec::with_capacity(len * dims);
    for t in 0..len {
        let x = t as f64;
        for &(a, b) in &phases {
            values.push((tau * x / 24.0 + a).sin() + 0.5 * (tau * x / 60.0 + b).sin() + normal.sample(&mut rng));
        }
    }
    let columns: Vec<String> = (0..dims).map(|j| format!("s{j}")).collect();
    let target = columns[dims - 1].clone();
    TimeSeriesFrame::new(timestamps, columns, values, &target).expect("synthetic frame is valid")
}

/// AIOps-schema frame: 20 named columns at 5-minute spacing with a daily
/// cycle; the response-time target follows load and memory pressure.
pub fn aiops_frame(len: usize, seed: u64) -> TimeSeriesFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let per_day = 24.0 * 60.0 / AIOPS_INTERVAL_MINUTES as f64;
    let tau = std::f64::consts::TAU;
    let t0 = start();
    let timestamps = (0..len)
        .map(|i| t0 + TimeDelta::minutes(AIOPS_INTERVAL_MINUTES * i as i64))
        .collect();
    let d = AIOPS_COLUMNS.len();
    let scale: Vec<f64> = (0..d).map(|j| 1.0 + (j % 5) as f64 * 3.0).collect();
    let mut values = Vec::with_capacity(len * d);
    for t in 0..len {
        let day = (tau * t as f64 / per_day).sin();
        let load = 1.5 + day + 0.2 * normal.sample(&mut rng);
        let mut row: Vec<f64> = (0..d - 1)
            .map(|j| scale[j] * (1.0 + 0.3 * load + 0.05 * normal.sample(&mut rng)))
            .collect();
        let resp = 2.0 + 0.8 * load + 0.1 * row[9] / scale[9] + 0.1 * normal.sample(&mut rng);
        row.push(resp);
        values.extend(row);
    }
    let columns = AIOPS_COLUMNS.iter().map(|s| s.to_string()).collect();
    TimeSeriesFrame::new(timestamps, columns, values, AIOPS_TARGET).expect("synthetic frame is valid")
}
