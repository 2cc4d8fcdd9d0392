//! Central finite-difference checks of reverse-mode gradients.
//!
//! The loss closure receives the parameter list and returns the scalar loss
//! together with a routing key. Routing decisions are piecewise constant in
//! the parameters, so a coordinate whose `±h` evaluations change the key sits
//! on a discontinuity and is skipped rather than compared.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Denominator floor of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-3;

pub struct Probe {
    pub loss: Tensor<f64>,
    pub route_key: u64,
}

impl Probe {
    pub fn smooth(loss: Tensor<f64>) -> Self {
        Self { loss, route_key: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, coordinate)` of the worst comparison.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }

    pub fn skip_fraction(&self) -> f64 {
        let total = self.checked + self.skipped;
        if total == 0 {
            0.0
        } else {
            self.skipped as f64 / total as f64
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn with_coordinate(params: &[Tensor<f64>], t: usize, i: usize, delta: f64) -> Result<Vec<Tensor<f64>>> {
    let mut out: Vec<Tensor<f64>> = params.iter().map(Tensor::detach).collect();
    let mut data = out[t].data().to_vec();
    data[i] += delta;
    out[t] = Tensor::new(data, params[t].shape())?;
    Ok(out)
}

/// Compares analytic gradients of every tensor in `params` against central
/// differences with step `h`. With `max_coords = Some(c)`, at most `c`
/// distinct coordinates per tensor are sampled from `rng`.
pub fn check<F>(
    params: &[Tensor<f64>],
    h: f64,
    max_coords: Option<usize>,
    rng: &mut Rng,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<Probe>,
{
    let leaves: Vec<Tensor<f64>> = params.iter().map(|p| p.detach().requires_grad_()).collect();
    let base = f(&leaves)?;
    if !base.loss.requires_grad() {
        return Err(Error::Contract("loss does not depend on the checked parameters".into()));
    }
    base.loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(Tensor::grad_or_zeros).collect();

    let mut report = GradCheckReport::default();
    for (t, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(c) if c < p.numel() => {
                let mut pool: Vec<usize> = (0..p.numel()).collect();
                (0..c).map(|_| pool.swap_remove(rng.below(pool.len()))).collect()
            }
            _ => (0..p.numel()).collect(),
        };
        for i in coords {
            let plus = f(&with_coordinate(params, t, i, h)?)?;
            let minus = f(&with_coordinate(params, t, i, -h)?)?;
            if plus.route_key != base.route_key || minus.route_key != base.route_key {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.loss.item()? - minus.loss.item()?) / (2.0 * h);
            let err = relative_error(analytic[t][i], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((t, i));
            }
        }
    }
    Ok(report)
}
