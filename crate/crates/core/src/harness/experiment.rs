//! Train-or-load, filtered eval sets, attack variants, and report files.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::attack::{attack, attack_wholechain_baseline, AttackConfig, AttackError, AttackTrace};
use crate::checkpoint::CheckpointError;
use crate::classifier::{train_classifier, ArchKind, VideoClassifier};
use crate::clip::VideoClip;
use crate::dataset::{derive_seed, generate_dataset, Dataset, LabeledClip};
use crate::denoiser::{train_denoiser, Denoiser};
use crate::metrics::{self, EvalReport};
use crate::retome::build_merge_plan;
use crate::scheduler::NoiseSchedule;
use crate::tensor::Tensor;

use super::ExperimentConfig;

pub const SURROGATE_ARCH: ArchKind = ArchKind::TemporalConv;
pub const TARGET_ARCHS: [ArchKind; 2] = [ArchKind::TemporalAttention, ArchKind::WideMlp];

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("clip io: {0}")]
    Clip(#[from] crate::clip::ClipIoError),
    #[error("attack: {0}")]
    Attack(#[from] AttackError),
    #[error("{0}")]
    Invalid(String),
}

/// Everything a run needs: data, schedule, the trained denoiser, and the
/// trained classifiers keyed by architecture tag.
pub struct World {
    pub dataset: Dataset,
    pub sched: NoiseSchedule,
    pub denoiser: Denoiser<f32>,
    pub classifiers: BTreeMap<&'static str, VideoClassifier<f32>>,
}

impl World {
    pub fn surrogate(&self) -> &VideoClassifier<f32> {
        &self.classifiers[SURROGATE_ARCH.tag()]
    }
}

/// Load models from the checkpoint directory or train and save them there.
/// All attacks in a run share these checkpoints.
pub fn ensure_models(cfg: &ExperimentConfig) -> Result<World, HarnessError> {
    let dataset = generate_dataset(&cfg.dataset);
    let sched = NoiseSchedule::linear(cfg.attack.ddim_steps);
    let ckpt = cfg.checkpoint_dir();
    std::fs::create_dir_all(&ckpt)?;

    let denoiser = if ckpt.join("denoiser.json").exists() {
        Denoiser::<f32>::load(&ckpt)?
    } else {
        log::info!("training denoiser ({} steps)", cfg.denoiser_train.steps);
        let clips: Vec<VideoClip> = dataset.train.iter().map(|c| c.clip.clone()).collect();
        let (model, losses) =
            train_denoiser(&clips, &sched, cfg.denoiser.clone(), &cfg.denoiser_train);
        if losses.len() >= 2 {
            log::info!(
                "denoiser loss: first epoch {:.4}, last epoch {:.4}",
                losses[0],
                losses[losses.len() - 1]
            );
        }
        model.save(&ckpt)?;
        model
    };

    let mut classifiers = BTreeMap::new();
    let train_clips: Vec<VideoClip> = dataset.train.iter().map(|c| c.clip.clone()).collect();
    let train_labels: Vec<usize> = dataset.train.iter().map(|c| c.label).collect();
    for (i, arch) in ArchKind::ALL.into_iter().enumerate() {
        let tag = arch.tag();
        let model = if ckpt.join(format!("classifier_{tag}.json")).exists() {
            VideoClassifier::<f32>::load(&ckpt, arch)?
        } else {
            log::info!("training classifier {tag}");
            let mut opts = cfg.classifier_train.clone();
            opts.seed = derive_seed(cfg.classifier_train.seed, i as u64);
            let (model, _) = train_classifier(
                &train_clips,
                &train_labels,
                arch,
                cfg.dataset.k_classes,
                &opts,
            );
            model.save(&ckpt)?;
            model
        };
        classifiers.insert(tag, model);
    }
    Ok(World { dataset, sched, denoiser, classifiers })
}

/// Eval clips correctly classified by every trained model, in id order,
/// truncated to `count`. Mirrors the validation-set selection rule.
pub fn build_eval_set(world: &World, count: usize) -> Result<Vec<LabeledClip>, HarnessError> {
    let filtered: Vec<LabeledClip> = world
        .dataset
        .eval_pool
        .iter()
        .filter(|lc| {
            world
                .classifiers
                .values()
                .all(|m| m.predict(lc.clip.tensor()) == lc.label)
        })
        .cloned()
        .collect();
    if filtered.len() < count {
        return Err(HarnessError::Invalid(format!(
            "only {} of {} eval clips survive the all-models-correct filter, need {}",
            filtered.len(),
            world.dataset.eval_pool.len(),
            count
        )));
    }
    Ok(filtered.into_iter().take(count).collect())
}

/// One attack configuration to run over the eval set.
#[derive(Clone, Debug)]
pub struct VariantSpec {
    pub name: String,
    pub attack: AttackConfig,
    /// Use the whole-chain baseline optimizer instead of the timestep-wise
    /// attack.
    pub wholechain: bool,
}

impl VariantSpec {
    pub fn new(name: &str, attack: AttackConfig) -> Self {
        VariantSpec { name: name.to_string(), attack, wholechain: false }
    }
}

#[derive(Clone, Debug)]
pub struct ClipResult {
    pub id: usize,
    pub label: usize,
    pub adversarial: VideoClip,
    pub trace: AttackTrace,
    pub seconds: f64,
}

/// Attack every eval clip under one variant. Per-clip seeds derive from the
/// variant seed and the clip id, so parallel and serial runs produce
/// identical results; results are sorted by clip id before aggregation.
pub fn run_variant(
    world: &World,
    eval: &[LabeledClip],
    spec: &VariantSpec,
    parallel: bool,
) -> Result<(Vec<ClipResult>, EvalReport), HarnessError> {
    let one = |lc: &LabeledClip| -> Result<ClipResult, HarnessError> {
        let mut cfg = spec.attack.clone();
        cfg.seed = derive_seed(spec.attack.seed, lc.id as u64);
        let start = Instant::now();
        let outcome = if spec.wholechain {
            attack_wholechain_baseline(
                &lc.clip,
                lc.label,
                world.surrogate(),
                &world.denoiser,
                &world.sched,
                &cfg,
            )?
        } else {
            attack(
                &lc.clip,
                lc.label,
                world.surrogate(),
                &world.denoiser,
                &world.sched,
                &cfg,
            )?
        };
        Ok(ClipResult {
            id: lc.id,
            label: lc.label,
            adversarial: outcome.adversarial,
            trace: outcome.trace,
            seconds: start.elapsed().as_secs_f64(),
        })
    };

    let mut results: Vec<ClipResult> = if parallel {
        eval.par_iter().map(one).collect::<Result<_, _>>()?
    } else {
        eval.iter().map(one).collect::<Result<_, _>>()?
    };
    results.sort_by_key(|r| r.id);
    let report = summarize(world, eval, spec, &results);
    Ok((results, report))
}

fn summarize(
    world: &World,
    eval: &[LabeledClip],
    spec: &VariantSpec,
    results: &[ClipResult],
) -> EvalReport {
    let adv_clips: Vec<VideoClip> = results.iter().map(|r| r.adversarial.clone()).collect();
    let labels: Vec<usize> = results.iter().map(|r| r.label).collect();
    let mut asr_per_model = BTreeMap::new();
    for (tag, model) in &world.classifiers {
        asr_per_model.insert(tag.to_string(), metrics::asr(&adv_clips, &labels, model));
    }
    let by_id: BTreeMap<usize, &LabeledClip> = eval.iter().map(|lc| (lc.id, lc)).collect();
    let mean = |f: &dyn Fn(&ClipResult) -> f64| -> f64 {
        results.iter().map(|r| f(r)).sum::<f64>() / results.len() as f64
    };
    let report = EvalReport {
        variant: spec.name.clone(),
        clip_count: results.len(),
        asr_per_model,
        pixel_mse: mean(&|r| metrics::pixel_mse(&r.adversarial)),
        flicker: mean(&|r| metrics::flicker(&r.adversarial)),
        l_inf: mean(&|r| metrics::l_inf(&r.adversarial, &by_id[&r.id].clip)),
        l2: mean(&|r| metrics::l2(&r.adversarial, &by_id[&r.id].clip)),
        psnr: mean(&|r| metrics::psnr(&r.adversarial, &by_id[&r.id].clip)),
        mean_attack_seconds: mean(&|r| r.seconds),
        compressed_tokens: spec.attack.retome_enabled.then(|| {
            compressed_token_count(
                world.dataset.cfg.frames,
                world.denoiser.cfg.tokens_per_frame(),
                spec.attack.merge_ratio,
                spec.attack.stride,
            )
        }),
    };
    report.validate();
    report
}

/// Survivor count of the default-shape merge plan; depends only on the
/// frame/token geometry, the ratio, and the stride.
pub fn compressed_token_count(n_frames: usize, tokens: usize, ratio: f64, stride: usize) -> usize {
    let dummy = Tensor::<f32>::full(&[n_frames, tokens, 1], 1.0);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    build_merge_plan(&dummy, ratio, stride, &mut rng).final_token_count
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationGrid {
    /// whole-chain baseline vs timestep-wise vs timestep-wise + merging.
    Retome,
    /// fixed 4 vs incremental 4 to 12 vs fixed 12 iterations.
    IiStrategy,
    /// merge ratio sweep 0 / 0.25 / 0.5 / 0.75.
    Ratio,
}

impl AblationGrid {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "retome" => Some(AblationGrid::Retome),
            "ii" => Some(AblationGrid::IiStrategy),
            "ratio" => Some(AblationGrid::Ratio),
            _ => None,
        }
    }
}

pub fn ablation_variants(base: &AttackConfig, grid: AblationGrid) -> Vec<VariantSpec> {
    match grid {
        AblationGrid::Retome => vec![
            VariantSpec {
                name: "wholechain".into(),
                attack: AttackConfig { retome_enabled: false, ..base.clone() },
                wholechain: true,
            },
            VariantSpec::new(
                "talo",
                AttackConfig { retome_enabled: false, ..base.clone() },
            ),
            VariantSpec::new(
                "talo-retome",
                AttackConfig { retome_enabled: true, ..base.clone() },
            ),
        ],
        AblationGrid::IiStrategy => vec![
            VariantSpec::new(
                "fix-4",
                AttackConfig { ii_enabled: false, initial_iterations: 4, ..base.clone() },
            ),
            VariantSpec::new(
                "ii-4-12",
                AttackConfig { ii_enabled: true, initial_iterations: 4, ..base.clone() },
            ),
            VariantSpec::new(
                "fix-12",
                AttackConfig { ii_enabled: false, initial_iterations: 12, ..base.clone() },
            ),
        ],
        AblationGrid::Ratio => [0.0, 0.25, 0.5, 0.75]
            .into_iter()
            .map(|p| {
                VariantSpec::new(
                    &format!("p-{p:.2}"),
                    AttackConfig { retome_enabled: true, merge_ratio: p, ..base.clone() },
                )
            })
            .collect(),
    }
}

/// Fixed-precision CSV so identical runs produce identical bytes.
pub fn write_summary_csv(path: &Path, reports: &[EvalReport]) -> Result<(), HarnessError> {
    let mut out = String::new();
    out.push_str("variant,clips");
    for arch in ArchKind::ALL {
        out.push_str(&format!(",asr_{}", arch.tag()));
    }
    out.push_str(",pixel_mse,flicker,l_inf,l2,psnr,mean_seconds,compressed_tokens\n");
    for r in reports {
        out.push_str(&format!("{},{}", r.variant, r.clip_count));
        for arch in ArchKind::ALL {
            out.push_str(&format!(",{:.6}", r.asr_per_model[arch.tag()]));
        }
        out.push_str(&format!(
            ",{:.6},{:.6},{:.6},{:.6},{:.6},{:.3},{}\n",
            r.pixel_mse,
            r.flicker,
            r.l_inf,
            r.l2,
            r.psnr,
            r.mean_attack_seconds,
            r.compressed_tokens.map_or(String::from("-"), |c| c.to_string()),
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Full pipeline: train or load checkpoints, build the filtered eval set,
/// run the requested variants, and write traces, reports, clips, frame
/// dumps, and the summary CSV under the output directory.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    variants: &[VariantSpec],
) -> Result<Vec<EvalReport>, HarnessError> {
    let out = &cfg.output_dir;
    for sub in ["traces", "clips", "frames", "reports"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    let world = ensure_models(cfg)?;
    let eval = build_eval_set(&world, cfg.eval_clip_count)?;

    let mut reports = Vec::new();
    for spec in variants {
        log::info!("variant {}: attacking {} clips", spec.name, eval.len());
        let (results, report) = run_variant(&world, &eval, spec, cfg.parallel)?;
        for r in &results {
            let trace_path = out.join("traces").join(format!("{}_{:04}.json", spec.name, r.id));
            std::fs::write(trace_path, serde_json::to_string_pretty(&r.trace)?)?;
            r.adversarial
                .save_vclp(&out.join("clips").join(format!("{}_{:04}.vclp", spec.name, r.id)))?;
        }
        if let (Some(first), Some(benign)) = (results.first(), eval.first()) {
            for f in 0..benign.clip.frames() {
                benign
                    .clip
                    .save_ppm(f, &out.join("frames").join(format!("benign_{:04}_f{f}.ppm", benign.id)))?;
                first.adversarial.save_ppm(
                    f,
                    &out.join("frames").join(format!("{}_{:04}_f{f}.ppm", spec.name, first.id)),
                )?;
            }
        }
        std::fs::write(
            out.join("reports").join(format!("{}.json", spec.name)),
            serde_json::to_string_pretty(&report)?,
        )?;
        reports.push(report);
    }
    write_summary_csv(&out.join("summary.csv"), &reports)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compressed_counts_match_the_formulas() {
        // N=8, B=2, L=64: levels merge floor(p*256), floor(p*128), floor(p*64).
        assert_eq!(compressed_token_count(8, 64, 0.0, 2), 512);
        assert_eq!(compressed_token_count(8, 64, 0.5, 2), 512 - (128 + 64 + 32));
        assert_eq!(compressed_token_count(8, 16, 0.5, 2), 72);
    }

    #[test]
    fn ratio_grid_counts_strictly_decrease() {
        let base = AttackConfig::default();
        let variants = ablation_variants(&base, AblationGrid::Ratio);
        let counts: Vec<usize> = variants
            .iter()
            .map(|v| compressed_token_count(8, 64, v.attack.merge_ratio, v.attack.stride))
            .collect();
        assert!(counts.windows(2).all(|w| w[1] < w[0]), "{counts:?}");
    }

    #[test]
    fn ii_grid_iteration_budgets() {
        let base = AttackConfig::default();
        let variants = ablation_variants(&base, AblationGrid::IiStrategy);
        let totals: Vec<usize> = variants.iter().map(|v| v.attack.total_iterations()).collect();
        assert_eq!(totals, vec![20, 40, 60]);
    }
}
