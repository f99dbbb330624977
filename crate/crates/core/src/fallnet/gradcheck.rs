//! Central finite-difference verification of FallNet gradients.

use super::net::FallNet;
use super::tensor::Tensor3;
use super::FallNetError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a − n| / max(|a|, |n|, floor)`; the floor keeps gradients that are
    /// analytically zero (e.g. a conv bias followed by instance norm) from
    /// turning round-off into a relative error.
    pub fn rel_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Step shrink factor and attempts used when a step changes pooling routes.
const SHRINK: f64 = 0.1;
const MAX_SHRINKS: usize = 4;

/// Compares the analytic gradient of the total loss for input `x` and fixed ε
/// against `(L(θ+h) − L(θ−h)) / 2h` for every parameter.
///
/// Unpooling places values at the stored argmax positions, so the loss jumps
/// where a pooling window changes its maximum. When `θ ± h` lands on a
/// different routing than `θ` the step is shrunk until both sides agree.
pub fn check_gradients(
    net: &FallNet<f64>,
    x: &Tensor3<f64>,
    noise: &[f64],
    h: f64,
) -> Result<Vec<GradCheck>, FallNetError> {
    let mut grads = vec![0.0; net.param_count()];
    net.loss_and_grad(x, noise, &mut grads)?;
    let routing = net.pool_routing(x)?;
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(grads.len());
    for e in net.param_entries() {
        for k in 0..e.len {
            let i = e.offset + k;
            let orig = probe.params()[i];
            let mut step = h;
            let numeric = loop {
                probe.params_mut()[i] = orig + step;
                let up = probe.loss_with_noise(x, noise)?.total;
                let same_up = probe.pool_routing(x)? == routing;
                probe.params_mut()[i] = orig - step;
                let down = probe.loss_with_noise(x, noise)?.total;
                let same_down = probe.pool_routing(x)? == routing;
                probe.params_mut()[i] = orig;
                if (same_up && same_down) || step <= h * SHRINK.powi(MAX_SHRINKS as i32) {
                    break (up - down) / (2.0 * step);
                }
                step *= SHRINK;
            };
            out.push(GradCheck {
                name: e.name.clone(),
                index: k,
                analytic: grads[i],
                numeric,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::fallnet::FallNetConfig;

    #[test]
    fn test_step_near_a_pooling_switch_is_shrunk() {
        // At h = 1e-5 one conv weight moves a pooling maximum for this input.
        let net = FallNet::<f64>::new(FallNetConfig::tiny(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut x = Tensor3::zeros(1, 8, 6);
        x.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..3.0));
        let noise: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let worst = check_gradients(&net, &x, &noise, 1e-5)
            .unwrap()
            .iter()
            .map(|c| c.rel_error(1e-6))
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "{worst}");
    }
}
