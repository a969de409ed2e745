//! AdamW with decoupled weight decay and bias correction.

use super::{Real, Tensor};

/// Optimizer state: one pair of moment accumulators per parameter slot.
///
/// Defaults follow the usual AdamW setup (beta1 0.9, beta2 0.999, eps 1e-8)
/// with weight decay 0, which makes a zero gradient on fresh state an exact
/// fixed point.
pub struct AdamW<S: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    moments: Vec<(Tensor<S>, Tensor<S>)>,
}

impl<S: Real> AdamW<S> {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over a fixed parameter list. `None` gradients are zeros.
    ///
    /// theta <- theta - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * theta )
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Option<&Tensor<S>>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
                .collect();
        }
        assert_eq!(
            self.moments.len(),
            params.len(),
            "parameter list changed between steps"
        );
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.beta2);
        let corr1 = S::from_f64(1.0 / (1.0 - self.beta1.powi(t)));
        let corr2 = S::from_f64(1.0 / (1.0 - self.beta2.powi(t)));
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);
        let wd = S::from_f64(self.weight_decay);

        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.moments.iter_mut())
        {
            if let Some(g) = grad {
                assert_eq!(g.shape(), param.shape(), "gradient shape mismatch");
            }
            let pdata = param.data_mut();
            let mdata = m.data_mut();
            let vdata = v.data_mut();
            for i in 0..pdata.len() {
                let g = grad.map_or(S::zero(), |g| g.data()[i]);
                mdata[i] = b1 * mdata[i] + one_m_b1 * g;
                vdata[i] = b2 * vdata[i] + one_m_b2 * g * g;
                let m_hat = mdata[i] * corr1;
                let v_hat = vdata[i] * corr2;
                pdata[i] = pdata[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * pdata[i]);
            }
        }
    }
}
