use super::ApproximatorParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LEARNING_RATE: f64 = 5e-3;

/// Adaptive-moment optimizer state for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ApproximatorParams,
    pub second_moment: ApproximatorParams,
    pub step_count: u64,
    pub learning_rate: f64,
}

impl OptimizerState {
    pub fn new(params: &ApproximatorParams, learning_rate: f64) -> OptimizerState {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        OptimizerState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
            learning_rate,
        }
    }

    /// Bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut ApproximatorParams, grads: &ApproximatorParams) {
        assert!(
            params.same_shape(grads) && params.same_shape(&self.first_moment),
            "optimizer, parameter and gradient shapes differ"
        );
        self.step_count += 1;
        let c1 = 1.0 - ADAM_BETA1.powf(self.step_count as f64);
        let c2 = 1.0 - ADAM_BETA2.powf(self.step_count as f64);
        let lr = self.learning_rate;
        let blocks = params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.first_moment.slices_mut())
            .zip(self.second_moment.slices_mut());
        for (((p, g), m), v) in blocks {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Value-style wrapper around [`OptimizerState::step`].
pub fn adam_step(
    params: &ApproximatorParams,
    grads: &ApproximatorParams,
    opt: &OptimizerState,
) -> (ApproximatorParams, OptimizerState) {
    let mut params = params.clone();
    let mut opt = opt.clone();
    opt.step(&mut params, grads);
    (params, opt)
}
