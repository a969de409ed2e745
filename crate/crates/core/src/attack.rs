//! Timestep-wise adversarial latent optimization.
//!
//! The attack inverts a benign clip to the start timestep, then walks the
//! sampler back down. At each timestep it repeatedly: runs the denoiser on
//! the adversarial latent (tokens merged across frames when enabled), forms
//! the one-step clean-sample preview, scores it with the surrogate
//! classifier, regularizes the per-layer attention maps toward a benign
//! forward pass that reuses the very same merge plans, and takes an AdamW
//! step on the latent. Gradients never cross timestep boundaries: the
//! advance to the next timestep is a plain (non-recorded) sampler step.
//!
//! [`attack_wholechain_baseline`] is the ablation reference that optimizes
//! the start latent through the entire denoising chain instead, with the
//! same total iteration budget; its per-iteration tape grows with the chain
//! length while the timestep-wise attack's stays constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::VideoClassifier;
use crate::clip::VideoClip;
use crate::denoiser::{Denoiser, MergeMode};
use crate::scheduler::{ddim_invert, NoiseSchedule};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{AdamW, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AttackConfig {
    /// T: sampler steps in the schedule.
    pub ddim_steps: usize,
    /// t_s: timestep where adversarial optimization starts.
    pub start_timestep: usize,
    /// N_a: iterations at the start timestep.
    pub initial_iterations: usize,
    /// p: fraction of src tokens merged per level.
    pub merge_ratio: f64,
    /// B: frame stride of the dst partition.
    pub stride: usize,
    /// Weight of the misclassification term.
    pub gamma: f64,
    /// Weight of the attention-map structure term.
    pub beta: f64,
    pub lr: f64,
    pub retome_enabled: bool,
    /// Incremental iterations: N_a + 2 (t_s - t) per timestep; otherwise
    /// a fixed N_a everywhere.
    pub ii_enabled: bool,
    /// Compute merge plans once per timestep instead of every iteration.
    pub freeze_merge_plan: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            ddim_steps: 20,
            start_timestep: 5,
            initial_iterations: 4,
            merge_ratio: 0.5,
            stride: 2,
            gamma: 10.0,
            beta: 100.0,
            lr: 1e-2,
            retome_enabled: true,
            ii_enabled: true,
            freeze_merge_plan: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) {
        assert!(self.start_timestep >= 1 && self.start_timestep <= self.ddim_steps);
        assert!(self.initial_iterations >= 1);
        assert!((0.0..=1.0).contains(&self.merge_ratio));
        assert!(self.gamma >= 0.0 && self.beta >= 0.0);
        assert!(self.stride >= 1);
    }

    pub fn iterations_at(&self, t: usize) -> usize {
        if self.ii_enabled {
            self.initial_iterations + 2 * (self.start_timestep - t)
        } else {
            self.initial_iterations
        }
    }

    pub fn total_iterations(&self) -> usize {
        (1..=self.start_timestep).map(|t| self.iterations_at(t)).sum()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimestepRecord {
    pub timestep: usize,
    pub iterations: usize,
    pub attack_loss: f64,
    pub structure_loss: f64,
    pub total_loss: f64,
    pub surrogate_top1: usize,
    pub tape_nodes_per_iteration: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AttackTrace {
    pub per_timestep: Vec<TimestepRecord>,
    pub total_iterations: usize,
    pub final_linf: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("surrogate predicts {predicted}, not the stated label {label}")]
    Misclassified { predicted: usize, label: usize },
    #[error("non-finite loss at timestep {timestep}, iteration {iteration}")]
    NonFinite {
        timestep: usize,
        iteration: usize,
        trace: AttackTrace,
    },
}

pub struct AttackOutcome {
    pub adversarial: VideoClip,
    pub trace: AttackTrace,
}

struct LossParts {
    total: Var,
    attack: Var,
    structure: Var,
    logits: Var,
}

/// gamma * (-J(logits, label)) + beta * sum_j ||adv_map_j - benign_map_j||^2
fn compose_loss(
    tape: &mut Tape<f32>,
    logits: Var,
    label: usize,
    adv_maps: &[Var],
    benign_maps: &[Tensor<f32>],
    gamma: f64,
    beta: f64,
) -> LossParts {
    let ce = tape.cross_entropy(logits, vec![label]);
    let attack = tape.mul_scalar(ce, -1.0);
    assert_eq!(adv_maps.len(), benign_maps.len());
    let mut structure: Option<Var> = None;
    for (&adv, benign) in adv_maps.iter().zip(benign_maps.iter()) {
        assert_eq!(
            tape.value(adv).shape(),
            benign.shape(),
            "benign and adversarial maps must share the merged shape"
        );
        let bv = tape.input(benign);
        let diff = tape.sub(adv, bv);
        let sq = tape.square(diff);
        let ssq = tape.sum_all(sq);
        structure = Some(match structure {
            Some(acc) => tape.add(acc, ssq),
            None => ssq,
        });
    }
    let structure = structure.expect("at least one attention map");
    let weighted_attack = tape.mul_scalar(attack, gamma);
    let weighted_structure = tape.mul_scalar(structure, beta);
    let total = tape.add(weighted_attack, weighted_structure);
    LossParts { total, attack, structure, logits }
}

/// Timestep-wise adversarial latent optimization over a correctly
/// classified clip. Returns the adversarial clip (clamped to `[0, 1]`) and
/// a per-timestep trace.
pub fn attack(
    clip: &VideoClip,
    label: usize,
    surrogate: &VideoClassifier<f32>,
    denoiser: &Denoiser<f32>,
    sched: &NoiseSchedule,
    cfg: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    cfg.validate();
    let predicted = surrogate.predict(clip.tensor());
    if predicted != label {
        return Err(AttackError::Misclassified { predicted, label });
    }
    let t_s = cfg.start_timestep;
    let traj = ddim_invert(clip.tensor(), t_s, denoiser, sched);
    let mut adv = traj.latent(t_s).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = AttackTrace {
        total_iterations: cfg.total_iterations(),
        ..Default::default()
    };

    for t in (1..=t_s).rev() {
        let iters = cfg.iterations_at(t);
        let mut opt = AdamW::<f32>::new(cfg.lr);
        let benign_latent = traj.latent(t);
        let base_t = sched.base_timestep(t);
        let mut frozen_plans = None;

        for j in 0..iters {
            let mut tape = Tape::<f32>::new();
            let x_var = tape.param(&adv.clone().with_grad());
            let mode = adv_mode(cfg, &frozen_plans, &mut rng);
            let (eps, rec) = denoiser.forward(&mut tape, x_var, base_t, &mode);
            if cfg.retome_enabled && cfg.freeze_merge_plan && frozen_plans.is_none() {
                frozen_plans = Some(rec.plans.clone());
            }
            let x0 = sched.predict_x0_var(&mut tape, x_var, t, eps);
            let logits = surrogate.forward(&mut tape, x0);
            let benign_maps = benign_forward_maps(denoiser, benign_latent, base_t, &rec.plans, cfg);
            let parts = compose_loss(
                &mut tape, logits, label, &rec.maps, &benign_maps, cfg.gamma, cfg.beta,
            );

            let attack_loss = tape.value(parts.attack).data()[0] as f64;
            let structure_loss = tape.value(parts.structure).data()[0] as f64;
            let total_loss = tape.value(parts.total).data()[0] as f64;
            let top1 = tape.value(parts.logits).argmax();
            let nodes = tape.node_count();
            if !total_loss.is_finite() {
                return Err(AttackError::NonFinite { timestep: t, iteration: j, trace });
            }
            if j + 1 == iters {
                trace.per_timestep.push(TimestepRecord {
                    timestep: t,
                    iterations: iters,
                    attack_loss,
                    structure_loss,
                    total_loss,
                    surrogate_top1: top1,
                    tape_nodes_per_iteration: nodes,
                });
            }

            let grads = tape.backward(parts.total);
            let g = grads.get(x_var);
            opt.step(&mut [&mut adv], &[g]);
        }

        // Advance with gradients discarded (plain sampler step at the
        // optimized latent).
        let mode = advance_mode(cfg, &mut rng);
        let eps = denoiser.predict(&adv, base_t, &mode).eps;
        adv = sched.ddim_step(&adv, t, &eps);
    }

    let adversarial = VideoClip::new(adv.clamp(0.0, 1.0));
    trace.final_linf = adversarial.max_abs_diff(clip);
    Ok(AttackOutcome { adversarial, trace })
}

fn adv_mode<'a>(
    cfg: &AttackConfig,
    frozen: &'a Option<Vec<crate::retome::MergePlan>>,
    rng: &mut ChaCha8Rng,
) -> MergeMode<'a> {
    if !cfg.retome_enabled {
        return MergeMode::Off;
    }
    match frozen {
        Some(plans) => MergeMode::Reuse(plans),
        None => MergeMode::Retome {
            ratio: cfg.merge_ratio,
            stride: cfg.stride,
            anchor_seed: rng.gen(),
        },
    }
}

fn advance_mode(cfg: &AttackConfig, rng: &mut ChaCha8Rng) -> MergeMode<'static> {
    if cfg.retome_enabled {
        MergeMode::Retome {
            ratio: cfg.merge_ratio,
            stride: cfg.stride,
            anchor_seed: rng.gen(),
        }
    } else {
        MergeMode::Off
    }
}

/// Benign attention maps for the structure loss: a non-recorded forward on
/// the benign latent that reuses the adversarial pass's merge plans, so both
/// map stacks share shapes and token correspondences.
fn benign_forward_maps(
    denoiser: &Denoiser<f32>,
    benign_latent: &Tensor<f32>,
    base_t: usize,
    adv_plans: &[crate::retome::MergePlan],
    cfg: &AttackConfig,
) -> Vec<Tensor<f32>> {
    let mode = if cfg.retome_enabled {
        MergeMode::Reuse(adv_plans)
    } else {
        MergeMode::Off
    };
    denoiser.predict(benign_latent, base_t, &mode).maps
}

/// Ablation baseline: optimize the start latent through the whole denoising
/// chain down to the final sample, same total iteration budget. Structure
/// loss compares each chain step's maps against the benign trajectory's maps
/// at the same timestep.
pub fn attack_wholechain_baseline(
    clip: &VideoClip,
    label: usize,
    surrogate: &VideoClassifier<f32>,
    denoiser: &Denoiser<f32>,
    sched: &NoiseSchedule,
    cfg: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    cfg.validate();
    let predicted = surrogate.predict(clip.tensor());
    if predicted != label {
        return Err(AttackError::Misclassified { predicted, label });
    }
    let t_s = cfg.start_timestep;
    let traj = ddim_invert(clip.tensor(), t_s, denoiser, sched);
    let mut start = traj.latent(t_s).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total_iters = cfg.total_iterations();
    let mut trace = AttackTrace { total_iterations: total_iters, ..Default::default() };
    let mut opt = AdamW::<f32>::new(cfg.lr);

    let mut last = None;
    for j in 0..total_iters {
        let mut tape = Tape::<f32>::new();
        let x_var = tape.param(&start.clone().with_grad());
        let mut x = x_var;
        let mut adv_maps = Vec::new();
        let mut benign_maps = Vec::new();
        let mut x0 = None;
        for t in (1..=t_s).rev() {
            let base_t = sched.base_timestep(t);
            let mode = adv_mode(cfg, &None, &mut rng);
            let (eps, rec) = denoiser.forward(&mut tape, x, base_t, &mode);
            benign_maps.extend(benign_forward_maps(
                denoiser,
                traj.latent(t),
                base_t,
                &rec.plans,
                cfg,
            ));
            adv_maps.extend(rec.maps);
            if t > 1 {
                x = sched.ddim_step_var(&mut tape, x, t, eps);
            } else {
                x0 = Some(sched.predict_x0_var(&mut tape, x, 1, eps));
            }
        }
        let x0 = x0.expect("t_s >= 1 guarantees a final sample");
        let logits = surrogate.forward(&mut tape, x0);
        let parts = compose_loss(
            &mut tape, logits, label, &adv_maps, &benign_maps, cfg.gamma, cfg.beta,
        );

        let attack_loss = tape.value(parts.attack).data()[0] as f64;
        let structure_loss = tape.value(parts.structure).data()[0] as f64;
        let total_loss = tape.value(parts.total).data()[0] as f64;
        let top1 = tape.value(parts.logits).argmax();
        let nodes = tape.node_count();
        if !total_loss.is_finite() {
            return Err(AttackError::NonFinite { timestep: t_s, iteration: j, trace });
        }
        last = Some((attack_loss, structure_loss, total_loss, top1, nodes));

        let grads = tape.backward(parts.total);
        let g = grads.get(x_var);
        opt.step(&mut [&mut start], &[g]);
    }
    let (attack_loss, structure_loss, total_loss, top1, nodes) =
        last.expect("total iterations >= 1");
    trace.per_timestep.push(TimestepRecord {
        timestep: t_s,
        iterations: total_iters,
        attack_loss,
        structure_loss,
        total_loss,
        surrogate_top1: top1,
        tape_nodes_per_iteration: nodes,
    });

    // Materialize the final sample from the optimized start latent.
    let mut x = start;
    for t in (1..=t_s).rev() {
        let mode = advance_mode(cfg, &mut rng);
        let eps = denoiser.predict(&x, sched.base_timestep(t), &mode).eps;
        x = sched.ddim_step(&x, t, &eps);
    }
    let adversarial = VideoClip::new(x.clamp(0.0, 1.0));
    trace.final_linf = adversarial.max_abs_diff(clip);
    Ok(AttackOutcome { adversarial, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ArchKind, ClipDims};
    use crate::denoiser::DenoiserConfig;
    use crate::scheduler::ddim_sample;

    fn tiny_world() -> (VideoClip, usize, VideoClassifier<f32>, Denoiser<f32>, NoiseSchedule) {
        let dcfg = DenoiserConfig {
            frame_h: 8,
            frame_w: 8,
            channels: 3,
            patch_size: 4,
            embed_dim: 16,
            mlp_hidden: 12,
            n_layers: 2,
            seed: 5,
        };
        let denoiser = Denoiser::<f32>::new(dcfg);
        let dims = ClipDims { frames: 4, height: 8, width: 8, channels: 3 };
        let clf = VideoClassifier::<f32>::new(ArchKind::TemporalConv, 4, dims, 3);
        let clip = VideoClip::new(Tensor::rand_uniform(
            &[4, 8, 8, 3],
            0.0,
            1.0,
            &mut <ChaCha8Rng as SeedableRng>::seed_from_u64(1),
        ));
        let label = clf.predict(clip.tensor());
        (clip, label, clf, denoiser, NoiseSchedule::linear(20))
    }

    #[test]
    fn iteration_schedule_matches_algorithm() {
        let cfg = AttackConfig::default();
        let per_t: Vec<usize> = (1..=cfg.start_timestep)
            .rev()
            .map(|t| cfg.iterations_at(t))
            .collect();
        assert_eq!(per_t, vec![4, 6, 8, 10, 12]);
        assert_eq!(cfg.total_iterations(), 40);
        let fixed = AttackConfig { ii_enabled: false, ..AttackConfig::default() };
        assert_eq!(fixed.total_iterations(), 20);
    }

    #[test]
    fn zero_weights_reproduce_plain_reconstruction() {
        let (clip, label, clf, den, sched) = tiny_world();
        let cfg = AttackConfig {
            gamma: 0.0,
            beta: 0.0,
            retome_enabled: false,
            start_timestep: 3,
            ..AttackConfig::default()
        };
        let out = attack(&clip, label, &clf, &den, &sched, &cfg).unwrap();
        let traj = ddim_invert(clip.tensor(), 3, &den, &sched);
        let recon = ddim_sample(traj.latent(3), 3, &den, &sched).clamp(0.0, 1.0);
        assert!(out.adversarial.tensor().max_abs_diff(&recon) < 1e-6);
    }

    #[test]
    fn wholechain_zero_weights_reproduce_plain_reconstruction() {
        let (clip, label, clf, den, sched) = tiny_world();
        let cfg = AttackConfig {
            gamma: 0.0,
            beta: 0.0,
            retome_enabled: false,
            start_timestep: 3,
            ..AttackConfig::default()
        };
        let out = attack_wholechain_baseline(&clip, label, &clf, &den, &sched, &cfg).unwrap();
        let traj = ddim_invert(clip.tensor(), 3, &den, &sched);
        let recon = ddim_sample(traj.latent(3), 3, &den, &sched).clamp(0.0, 1.0);
        assert!(out.adversarial.tensor().max_abs_diff(&recon) < 1e-6);
    }

    #[test]
    fn wrong_label_rejected() {
        let (clip, label, clf, den, sched) = tiny_world();
        let wrong = (label + 1) % 4;
        let err = attack(&clip, wrong, &clf, &den, &sched, &AttackConfig::default());
        assert!(matches!(err, Err(AttackError::Misclassified { .. })));
    }

    #[test]
    fn talo_node_count_constant_per_timestep() {
        let (clip, label, clf, den, sched) = tiny_world();
        let cfg = AttackConfig {
            start_timestep: 4,
            initial_iterations: 1,
            ii_enabled: false,
            ..AttackConfig::default()
        };
        let out = attack(&clip, label, &clf, &den, &sched, &cfg).unwrap();
        let counts: Vec<usize> = out
            .trace
            .per_timestep
            .iter()
            .map(|r| r.tape_nodes_per_iteration)
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    }

    #[test]
    fn single_step_chain_coincides_with_talo_nodes() {
        let (clip, label, clf, den, sched) = tiny_world();
        let cfg = AttackConfig {
            start_timestep: 1,
            initial_iterations: 2,
            ii_enabled: false,
            retome_enabled: true,
            ..AttackConfig::default()
        };
        let talo = attack(&clip, label, &clf, &den, &sched, &cfg).unwrap();
        let chain = attack_wholechain_baseline(&clip, label, &clf, &den, &sched, &cfg).unwrap();
        assert_eq!(
            talo.trace.per_timestep[0].tape_nodes_per_iteration,
            chain.trace.per_timestep[0].tape_nodes_per_iteration
        );
    }

    #[test]
    fn trace_serializes_to_json() {
        let (clip, label, clf, den, sched) = tiny_world();
        let cfg = AttackConfig {
            start_timestep: 2,
            initial_iterations: 1,
            ..AttackConfig::default()
        };
        let out = attack(&clip, label, &clf, &den, &sched, &cfg).unwrap();
        let text = serde_json::to_string(&out.trace).unwrap();
        let back: AttackTrace = serde_json::from_str(&text).unwrap();
        assert_eq!(back.per_timestep.len(), out.trace.per_timestep.len());
        assert_eq!(back.total_iterations, 1 + 3);
    }
}
