//! DDIM noise schedule, deterministic inversion, and the sampling step.
//!
//! The schedule is a linear beta ramp over 1000 base steps whose cumulative
//! signal coefficients are subsampled uniformly onto T sampling steps, with
//! `alpha_bar[0] = 1` exactly. Sampling index `t` maps to a base-schedule
//! index via [`NoiseSchedule::base_timestep`]; noise predictors are
//! conditioned on that base index so the same model serves any T grid.

use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const BASE_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Cumulative signal coefficients and per-step stochasticity for T sampling
/// steps. Deterministic DDIM throughout: `sigma[t] = 0`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    base_index: Vec<usize>,
}

impl NoiseSchedule {
    pub fn linear(t_steps: usize) -> Self {
        Self::with_base(t_steps, BASE_STEPS, BETA_START, BETA_END)
    }

    pub fn with_base(t_steps: usize, base_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(t_steps >= 1 && t_steps <= base_steps);
        let mut cum = Vec::with_capacity(base_steps);
        let mut prod = 1.0f64;
        for i in 0..base_steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (base_steps - 1) as f64;
            prod *= 1.0 - beta;
            cum.push(prod);
        }
        let mut alpha_bar = Vec::with_capacity(t_steps + 1);
        let mut sigma = Vec::with_capacity(t_steps + 1);
        let mut base_index = Vec::with_capacity(t_steps + 1);
        alpha_bar.push(1.0);
        sigma.push(0.0);
        base_index.push(0);
        for t in 1..=t_steps {
            let idx = t * base_steps / t_steps - 1;
            alpha_bar.push(cum[idx]);
            sigma.push(0.0);
            base_index.push(idx);
        }
        for t in 1..=t_steps {
            assert!(
                alpha_bar[t] > 0.0 && alpha_bar[t] < alpha_bar[t - 1],
                "alpha_bar must strictly decrease"
            );
        }
        NoiseSchedule { alpha_bar, sigma, base_index }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Base-schedule index used to condition the noise predictor at step t.
    pub fn base_timestep(&self, t: usize) -> usize {
        self.base_index[t]
    }

    /// One-step clean-sample estimate: `(x_t - sqrt(1-a_t) eps) / sqrt(a_t)`.
    pub fn predict_x0<S: Real>(&self, x_t: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Tensor<S> {
        let (c_eps, c_x) = self.predict_coeffs(t);
        x_t.sub(&eps.scale(c_eps)).scale(c_x)
    }

    /// Tape form of [`Self::predict_x0`], differentiable in both inputs.
    pub fn predict_x0_var<S: Real>(&self, tape: &mut Tape<S>, x_t: Var, t: usize, eps: Var) -> Var {
        let (c_eps, c_x) = self.predict_coeffs(t);
        let scaled = tape.mul_scalar(eps, c_eps);
        let diff = tape.sub(x_t, scaled);
        tape.mul_scalar(diff, c_x)
    }

    fn predict_coeffs(&self, t: usize) -> (f64, f64) {
        assert!(t >= 1 && t <= self.steps(), "predict_x0 needs t in [1, T], got {t}");
        let a = self.alpha_bar[t];
        ((1.0 - a).sqrt(), 1.0 / a.sqrt())
    }

    /// Deterministic DDIM transition from `x_t` to `x_{t-1}`:
    /// `sqrt(a_{t-1}) x0_hat + sqrt(1 - a_{t-1} - sigma_t^2) eps`.
    pub fn ddim_step<S: Real>(&self, x_t: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Tensor<S> {
        let (c_x0, c_eps) = self.step_coeffs(t);
        self.predict_x0(x_t, t, eps)
            .scale(c_x0)
            .add(&eps.scale(c_eps))
    }

    /// Tape form of [`Self::ddim_step`].
    pub fn ddim_step_var<S: Real>(&self, tape: &mut Tape<S>, x_t: Var, t: usize, eps: Var) -> Var {
        let (c_x0, c_eps) = self.step_coeffs(t);
        let x0 = self.predict_x0_var(tape, x_t, t, eps);
        let lhs = tape.mul_scalar(x0, c_x0);
        let rhs = tape.mul_scalar(eps, c_eps);
        tape.add(lhs, rhs)
    }

    fn step_coeffs(&self, t: usize) -> (f64, f64) {
        assert!(t >= 1 && t <= self.steps(), "ddim_step needs t in [1, T], got {t}");
        let a_prev = self.alpha_bar[t - 1];
        let s = self.sigma[t];
        let radicand = 1.0 - a_prev - s * s;
        assert!(radicand >= 0.0, "sigma too large: sigma^2 > 1 - alpha_bar[t-1]");
        (a_prev.sqrt(), radicand.sqrt())
    }
}

/// Reversed latents `{x_0, ..., x_tmax}`, indexed by timestep.
#[derive(Clone, Debug)]
pub struct LatentTrajectory {
    latents: Vec<Tensor<f32>>,
}

impl LatentTrajectory {
    pub fn t_max(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn latent(&self, t: usize) -> &Tensor<f32> {
        &self.latents[t]
    }
}

/// Anything that predicts the injected noise for a latent at a base timestep.
pub trait NoisePredictor {
    fn predict_noise(&self, x: &Tensor<f32>, base_t: usize) -> Tensor<f32>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor<f32>, usize) -> Tensor<f32>,
{
    fn predict_noise(&self, x: &Tensor<f32>, base_t: usize) -> Tensor<f32> {
        self(x, base_t)
    }
}

/// Deterministic DDIM inversion of a clean sample up to `t_target`:
/// `x_{t+1} = sqrt(a_{t+1}) x0_hat^t + sqrt(1 - a_{t+1}) eps(x_t, t)`.
/// No gradients are recorded.
pub fn ddim_invert(
    x0: &Tensor<f32>,
    t_target: usize,
    denoiser: &dyn NoisePredictor,
    sched: &NoiseSchedule,
) -> LatentTrajectory {
    assert!(t_target >= 1 && t_target <= sched.steps());
    let mut latents = Vec::with_capacity(t_target + 1);
    latents.push(x0.clone());
    for t in 0..t_target {
        let x_t = &latents[t];
        let eps = denoiser.predict_noise(x_t, sched.base_timestep(t));
        let a_t = sched.alpha_bar(t);
        let a_next = sched.alpha_bar(t + 1);
        // alpha_bar[0] = 1 makes the t = 0 step exact: x0_hat = x_0.
        let x0_hat = x_t.sub(&eps.scale((1.0 - a_t).sqrt())).scale(1.0 / a_t.sqrt());
        let x_next = x0_hat
            .scale(a_next.sqrt())
            .add(&eps.scale((1.0 - a_next).sqrt()));
        latents.push(x_next);
    }
    LatentTrajectory { latents }
}

/// Run the deterministic sampler from `x_t` at `t_from` down to a clean
/// sample, querying the predictor at each step.
pub fn ddim_sample(
    x_t: &Tensor<f32>,
    t_from: usize,
    denoiser: &dyn NoisePredictor,
    sched: &NoiseSchedule,
) -> Tensor<f32> {
    let mut x = x_t.clone();
    for t in (1..=t_from).rev() {
        let eps = denoiser.predict_noise(&x, sched.base_timestep(t));
        x = sched.ddim_step(&x, t, &eps);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched20() -> NoiseSchedule {
        NoiseSchedule::linear(20)
    }

    #[test]
    fn alpha_monotone_and_anchored() {
        for t_steps in [1, 5, 20, 40] {
            let s = NoiseSchedule::linear(t_steps);
            assert_eq!(s.alpha_bar(0), 1.0);
            for t in 1..=t_steps {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(s.alpha_bar(t) > 0.0);
                assert_eq!(s.sigma(t), 0.0);
            }
        }
    }

    #[test]
    fn base_timesteps_align_across_grids() {
        // t_s = 5 of T = 20 and t_s = 10 of T = 40 share a noise level.
        let s20 = NoiseSchedule::linear(20);
        let s40 = NoiseSchedule::linear(40);
        assert_eq!(s20.base_timestep(5), s40.base_timestep(10));
        assert_eq!(s20.alpha_bar(5), s40.alpha_bar(10));
    }

    #[test]
    fn predict_x0_inverts_forward_mixing() {
        // alpha_t = 0.64: x_t = 0.8 x0 + 0.6 eps, eps_hat = eps -> x0 exactly.
        let mut s = sched20();
        s.alpha_bar[3] = 0.64;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::<f32>::rand_uniform(&[2, 4], 0.0, 1.0, &mut rng);
        let eps = Tensor::<f32>::randn(&[2, 4], 1.0, &mut rng);
        let x_t = x0.scale(0.8).add(&eps.scale(0.6));
        let rec = s.predict_x0(&x_t, 3, &eps);
        assert!(rec.max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn predict_x0_zero_eps_is_pure_rescale() {
        let mut s = sched20();
        s.alpha_bar[2] = 0.25;
        let x_t = Tensor::<f32>::from_f64(&[3], &[0.1, -0.5, 2.0]);
        let zero = Tensor::zeros(&[3]);
        let out = s.predict_x0(&x_t, 2, &zero);
        assert!(out.max_abs_diff(&x_t.scale(2.0)) < 1e-7);
    }

    #[test]
    fn predict_x0_gradient_is_inverse_sqrt_alpha_over_numel() {
        let mut s = sched20();
        s.alpha_bar[4] = 0.36;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x_t = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xv = tape.param(&x_t);
        let ev = tape.input(&eps);
        let x0 = s.predict_x0_var(&mut tape, xv, 4, ev);
        let root = tape.mean_all(x0);
        let grads = tape.backward(root);
        let g = grads.get(xv).unwrap();
        let expect = 1.0 / (0.6 * 6.0);
        for &v in g.data() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_step_scaling_identity() {
        // eps = 0, alpha_t = 0.25, alpha_{t-1} = 0.64 -> x_{t-1} = 1.6 x_t.
        let mut s = sched20();
        s.alpha_bar[6] = 0.64;
        s.alpha_bar[7] = 0.25;
        let x_t = Tensor::<f32>::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]);
        let zero = Tensor::zeros(&[4]);
        let out = s.ddim_step(&x_t, 7, &zero);
        assert!(out.max_abs_diff(&x_t.scale(1.6)) < 1e-6);
    }

    #[test]
    fn ddim_step_reduces_to_forward_mixing() {
        // With eps_hat equal to the exact forward noise, the step lands on
        // sqrt(a_{t-1}) x0 + sqrt(1 - a_{t-1}) eps.
        let s = sched20();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0 = Tensor::<f32>::rand_uniform(&[2, 5], 0.0, 1.0, &mut rng);
        let eps = Tensor::<f32>::randn(&[2, 5], 1.0, &mut rng);
        let t = 8;
        let a_t = s.alpha_bar(t);
        let x_t = x0.scale(a_t.sqrt()).add(&eps.scale((1.0 - a_t).sqrt()));
        let out = s.ddim_step(&x_t, t, &eps);
        let a_prev = s.alpha_bar(t - 1);
        let want = x0.scale(a_prev.sqrt()).add(&eps.scale((1.0 - a_prev).sqrt()));
        assert!(out.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn ddim_step_is_linear_superposition() {
        let s = sched20();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (a, b) = (0.7f64, -1.3f64);
        let x1 = Tensor::<f32>::randn(&[6], 1.0, &mut rng);
        let x2 = Tensor::<f32>::randn(&[6], 1.0, &mut rng);
        let e1 = Tensor::<f32>::randn(&[6], 1.0, &mut rng);
        let e2 = Tensor::<f32>::randn(&[6], 1.0, &mut rng);
        let t = 5;
        let lhs = s.ddim_step(&x1.scale(a).add(&x2.scale(b)), t, &e1.scale(a).add(&e2.scale(b)));
        let rhs = s.ddim_step(&x1, t, &e1).scale(a).add(&s.ddim_step(&x2, t, &e2).scale(b));
        assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn remix_after_predict_x0_reproduces_x_t() {
        let s = sched20();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for t in [1, 5, 13, 20] {
            let x_t = Tensor::<f32>::randn(&[3, 3], 1.0, &mut rng);
            let eps = Tensor::<f32>::randn(&[3, 3], 1.0, &mut rng);
            let x0 = s.predict_x0(&x_t, t, &eps);
            let a = s.alpha_bar(t);
            let remix = x0.scale(a.sqrt()).add(&eps.scale((1.0 - a).sqrt()));
            assert!(remix.max_abs_diff(&x_t) < 1e-6);
        }
    }

    #[test]
    fn invert_with_zero_denoiser_rescales() {
        let s = sched20();
        let x0 = Tensor::<f32>::rand_uniform(&[2, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let zero = |x: &Tensor<f32>, _t: usize| Tensor::zeros(x.shape());
        let traj = ddim_invert(&x0, 7, &zero, &s);
        assert_eq!(traj.t_max(), 7);
        for t in 0..=7 {
            let want = x0.scale(s.alpha_bar(t).sqrt());
            assert!(traj.latent(t).max_abs_diff(&want) < 1e-6, "t={t}");
        }
    }

    #[test]
    fn constant_eps_roundtrip_is_exact() {
        let s = sched20();
        let x0 = Tensor::<f32>::rand_uniform(&[4, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let c = 0.37f64;
        let constant = move |x: &Tensor<f32>, _t: usize| Tensor::full(x.shape(), c);
        let traj = ddim_invert(&x0, 5, &constant, &s);
        let back = ddim_sample(traj.latent(5), 5, &constant, &s);
        assert!(back.max_abs_diff(&x0) < 1e-5);
    }

    #[test]
    #[should_panic(expected = "predict_x0 needs t in [1, T]")]
    fn predict_x0_rejects_t0() {
        let s = sched20();
        let x = Tensor::<f32>::zeros(&[2]);
        let _ = s.predict_x0(&x, 0, &x.clone());
    }
}
