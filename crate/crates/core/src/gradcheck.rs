//! Central finite-difference check of the analytic head gradients.
//!
//! The numeric side only touches `forward`, `softmax` and `cross_entropy`, so
//! it is independent of the backward pass it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{cross_entropy, softmax, DenseHead, EmbeddingSample, HeadShape, InitMode};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-5;
/// Denominator floor for the relative error, so coordinates whose true
/// gradient is numerically zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub instances: usize,
    pub coordinates: usize,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= REL_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn loss_at(shape: HeadShape, params: &[f64], sample: &EmbeddingSample) -> Result<f64> {
    let n_weights = shape.num_classes * shape.embedding_dim;
    let head = DenseHead::from_parts(
        shape.embedding_dim,
        shape.num_classes,
        params[..n_weights].to_vec(),
        params[n_weights..].to_vec(),
    )?;
    cross_entropy(&softmax(&head.forward(&sample.features)?), sample.label)
}

/// Central differences of the loss with respect to every parameter, in canonical order.
pub fn numeric_gradients(head: &DenseHead, sample: &EmbeddingSample, step: f64) -> Result<Vec<f64>> {
    let mut params: Vec<f64> = head.flat_params().collect();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + step;
        let plus = loss_at(head.shape(), &params, sample)?;
        params[i] = orig - step;
        let minus = loss_at(head.shape(), &params, sample)?;
        params[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Checks `instances` random heads and samples with `E <= 8`, `C <= 4`.
pub fn run_gradcheck(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        instances,
        coordinates: 0,
        max_relative_error: 0.0,
    };
    for _ in 0..instances {
        let e = rng.gen_range(1..=8);
        let c = rng.gen_range(2..=4);
        let head = DenseHead::init(e, c, &InitMode::Random { seed: rng.gen() })?;
        let sample = EmbeddingSample::new((0..e).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(0..c));
        let analytic = head.sample_gradients(&sample)?;
        let numeric = numeric_gradients(&head, &sample, FD_STEP)?;
        for (a, n) in analytic.iter().zip(numeric) {
            report.max_relative_error = report.max_relative_error.max(relative_error(a, n));
            report.coordinates += 1;
        }
    }
    Ok(report)
}
