//! One-stage versus two-stage forward latency.

use std::time::{Duration, Instant};

use jcra_core::model::{Model, ModelConfig};
use jcra_core::rng::{uniform, RngState};
use jcra_core::tensor::Tensor;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub repeats: usize,
    pub one_stage: Duration,
    pub two_stage: Duration,
}

impl BenchReport {
    /// Two-stage median over one-stage median.
    pub fn ratio(&self) -> f64 {
        self.two_stage.as_secs_f64() / self.one_stage.as_secs_f64()
    }

    pub fn render(&self) -> String {
        format!(
            "repeats           {}\none-stage median  {:.3} ms\ntwo-stage median  {:.3} ms\nratio two/one     {:.3}\n",
            self.repeats,
            self.one_stage.as_secs_f64() * 1e3,
            self.two_stage.as_secs_f64() * 1e3,
            self.ratio()
        )
    }
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Times both variants on one random image with shared parameters (the
/// refinement decoder is enabled for both; the one-stage pass ignores it).
/// Runs alternate so drift affects both equally.
pub fn run(cfg: &ModelConfig, repeats: usize, warmup: usize, seed: u64) -> Result<BenchReport> {
    let cfg = ModelConfig {
        refinement_decoder: true,
        ..cfg.clone()
    };
    let rng = RngState::new(seed);
    let model = Model::init(cfg.clone(), &rng.split(0))?;
    let mut stream = rng.stream(1);
    let image = Tensor::from_fn(&[cfg.image_h, cfg.image_w, cfg.channels], |_| uniform(&mut stream, 0.0, 1.0));

    let repeats = repeats.max(1);
    let (mut one, mut two) = (Vec::with_capacity(repeats), Vec::with_capacity(repeats));
    for i in 0..warmup + repeats {
        let t = Instant::now();
        std::hint::black_box(model.predict(&image)?);
        let a = t.elapsed();
        let t = Instant::now();
        std::hint::black_box(model.predict_two_stage(&image)?);
        let b = t.elapsed();
        if i >= warmup {
            one.push(a);
            two.push(b);
        }
    }
    Ok(BenchReport {
        repeats,
        one_stage: median(one),
        two_stage: median(two),
    })
}
