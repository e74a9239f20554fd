use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::decode::decode;
use super::metrics::{CONF_THRESHOLD, NMS_IOU_THRESHOLD};
use super::nms::nms;
use crate::detnet::Model;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FpsReport {
    pub iterations: usize,
    pub warmup: usize,
    /// Seconds per timed iteration.
    pub times: Vec<f64>,
    pub total_seconds: f64,
    /// Frames per second from the median iteration time.
    pub median_fps: f64,
    /// `iterations / total_seconds`.
    pub mean_fps: f64,
}

/// Times forward + decode + NMS on a random single-image batch.
pub fn fps_benchmark<T: Real>(
    model: &Model<T>,
    height: usize,
    width: usize,
    iterations: usize,
    warmup: usize,
) -> Result<FpsReport> {
    if iterations < 10 {
        return Err(Error::invalid("fps_benchmark", format!("need at least 10 iterations, got {iterations}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = model.config.in_channels;
    let data = (0..c * height * width).map(|_| T::from_f64(rng.random_range(0.0..1.0))).collect();
    let x = Tensor::from_vec(&[1, c, height, width], data)?;
    let run = || -> Result<usize> {
        let preds = model.forward(&x)?;
        let dets = decode(&preds, &model.config, CONF_THRESHOLD)?;
        Ok(dets.iter().map(|d| nms(d, NMS_IOU_THRESHOLD).len()).sum())
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        std::hint::black_box(run()?);
        times.push(t.elapsed().as_secs_f64());
    }
    let total_seconds: f64 = times.iter().sum();
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(FpsReport {
        iterations,
        warmup,
        times,
        total_seconds,
        median_fps: 1.0 / median,
        mean_fps: iterations as f64 / total_seconds,
    })
}
