//! Align strides on the time of peak knee flexion with a piecewise-linear warp.

use mvfmm::dataset::Side;
use mvfmm::ingest::{landmark_register, landmark_time, time_normalize, RawCurve};

fn curve(dimension: &str, times: &[f64], peak: f64) -> RawCurve {
    let (start, end) = (times[0], *times.last().unwrap());
    RawCurve {
        subject: "s1".into(),
        side: Side::Left,
        dimension: dimension.into(),
        stride: 0,
        times: times.to_vec(),
        values: times
            .iter()
            .map(|t| {
                let u = (t - start) / (end - start) * 100.0;
                if dimension == "knee" {
                    60.0 * (-(u - peak).powi(2) / 80.0).exp() + 5.0
                } else {
                    25.0 * (std::f64::consts::PI * u / 100.0).cos()
                }
            })
            .collect(),
    }
}

fn main() -> mvfmm::Result<()> {
    let target = 72.0;
    // raw times in milliseconds of strides with different durations and peak timing
    for (duration, peak) in [(1040.0, 68.0), (980.0, 75.0), (1110.0, 71.0)] {
        let times: Vec<f64> = (0..=150)
            .map(|i| 250.0 + i as f64 * duration / 150.0)
            .collect();
        let stride: Vec<RawCurve> = ["hip", "knee"]
            .iter()
            .map(|d| time_normalize(&curve(d, &times, peak), 100.0))
            .collect::<mvfmm::Result<_>>()?;
        let before = landmark_time(&stride[1]);
        let registered = landmark_register(&stride, "knee", target)?;
        let after = landmark_time(&registered[1]);
        println!("duration {duration:6.0} ms: knee peak at {before:5.2}% -> {after:5.2}% after registration");
    }
    Ok(())
}
