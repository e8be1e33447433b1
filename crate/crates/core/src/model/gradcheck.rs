//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::FrameFeatures;
use crate::error::Result;
use crate::model::{accumulate_gradients, loss_sum, Dropout, ModelConfig, Parameters, TokenizedInput};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Denominator floor so coordinates with vanishing gradients compare absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `loss` on `count`
/// coordinates. Each coordinate picks a tensor uniformly, then an element
/// uniformly, so every tensor kind is exercised.
pub fn finite_difference_check<F>(
    params: &Parameters,
    analytic: &Parameters,
    mut loss: F,
    count: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Parameters) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let grads: Vec<Vec<f64>> = analytic
        .tensors()
        .iter()
        .map(|(_, t)| t.iter().copied().collect())
        .collect();

    let mut probe = params.clone();
    let mut coordinates = Vec::with_capacity(count);
    for _ in 0..count {
        let ti = rng.random_range(0..names.len());
        let ei = rng.random_range(0..names[ti].1);
        let nudge = |p: &mut Parameters, delta: f64| {
            p.for_each_mut(|i, mut t| {
                if i == ti {
                    let v = t.iter_mut().nth(ei).expect("index in range");
                    *v += delta;
                }
            })
        };
        nudge(&mut probe, step);
        let plus = loss(&probe)?;
        nudge(&mut probe, -2.0 * step);
        let minus = loss(&probe)?;
        nudge(&mut probe, step);
        let numeric = (plus - minus) / (2.0 * step);
        let a = grads[ti][ei];
        coordinates.push(CoordinateCheck {
            tensor: names[ti].0.clone(),
            index: ei,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        coordinates,
        max_rel_error,
        tolerance: DEFAULT_TOLERANCE,
    })
}

/// Gradient check of the mean masked cross entropy over `batch`.
///
/// With `dropout_seed` set, every loss evaluation runs in training mode and
/// draws fresh dropout masks; the check is then expected to fail.
pub fn grad_check(
    params: &Parameters,
    config: &ModelConfig,
    batch: &[(TokenizedInput, Option<&FrameFeatures>)],
    count: usize,
    seed: u64,
    dropout_seed: Option<u64>,
) -> Result<GradCheckReport> {
    let total: usize = batch.iter().map(|(i, _)| i.targets.len()).sum();
    let scale = 1.0 / total.max(1) as f64;
    let mut drop_rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);

    let mut analytic = params.zeros_like();
    for (input, frames) in batch {
        let dropout = drop_rng.as_mut().map(|rng| Dropout {
            rate: config.dropout,
            rng,
        });
        accumulate_gradients(input, *frames, params, config, dropout, scale, &mut analytic)?;
    }

    let loss = |p: &Parameters| -> Result<f64> {
        let mut sum = 0.0;
        for (input, frames) in batch {
            let dropout = drop_rng.as_mut().map(|rng| Dropout {
                rate: config.dropout,
                rng,
            });
            sum += loss_sum(input, *frames, p, config, dropout)?;
        }
        Ok(sum * scale)
    };
    finite_difference_check(params, &analytic, loss, count, DEFAULT_STEP, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let config = ModelConfig::tiny(16);
        let params = Parameters::init(&config, &mut ChaCha8Rng::seed_from_u64(2));
        // loss = sum_i c_i * out_b[i] + sum_ij w_ij * head_w[i][j]
        let coeff_b: Vec<f64> = (0..16).map(|i| 0.3 * i as f64 - 1.0).collect();
        let mut analytic = params.zeros_like();
        analytic.out_b.iter_mut().zip(&coeff_b).for_each(|(g, c)| *g = *c);
        analytic.head_w.fill(0.5);
        let loss = |p: &Parameters| -> Result<f64> {
            Ok(p.out_b.iter().zip(&coeff_b).map(|(b, c)| b * c).sum::<f64>() + 0.5 * p.head_w.sum())
        };
        let report = finite_difference_check(&params, &analytic, loss, 200, DEFAULT_STEP, 1).unwrap();
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
    }
}
