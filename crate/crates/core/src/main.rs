//! Command-line front end for the attack lab.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use retome_va::classifier::ArchKind;
use retome_va::clip::VideoClip;
use retome_va::dataset::generate_dataset;
use retome_va::harness::{
    ablation_variants, build_eval_set, ensure_models, run_experiment, write_summary_csv,
    AblationGrid, ExperimentConfig, VariantSpec,
};
use retome_va::metrics::{self, EvalReport};

#[derive(Parser)]
#[command(name = "retome-va", about = "Video diffusion adversarial attack lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for dataset and attacks.
    #[arg(long)]
    seed: Option<u64>,
    /// Eval clip count override.
    #[arg(long)]
    eval_count: Option<usize>,
    /// Dispatch per-clip attacks to a worker pool.
    #[arg(long)]
    parallel: bool,
}

impl Common {
    fn config(&self) -> anyhow_lite::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.dataset.seed = seed;
            cfg.attack.seed = seed;
        }
        if let Some(n) = self.eval_count {
            cfg.eval_clip_count = n;
        }
        if self.parallel {
            cfg.parallel = true;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write clips plus a manifest.
    GenData(Common),
    /// Train the toy denoiser and save its checkpoint.
    TrainDenoiser(Common),
    /// Train all three classifiers and save their checkpoints.
    TrainClassifiers(Common),
    /// Run the configured attack over the filtered eval set.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Merge ratio override.
        #[arg(long)]
        ratio: Option<f64>,
        /// Disable recursive token merging.
        #[arg(long)]
        no_retome: bool,
        /// Use a fixed iteration count instead of incremental iterations.
        #[arg(long)]
        fixed_iterations: Option<usize>,
    },
    /// Re-evaluate stored adversarial clips against all models.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Variant name whose clips to score.
        #[arg(long, default_value = "default")]
        variant: String,
    },
    /// Run an ablation grid: retome | ii | ratio.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: String,
    },
    /// Collect per-variant reports into the summary CSV.
    Report(Common),
}

// Small local result alias; errors all render through Display.
mod anyhow_lite {
    pub type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> anyhow_lite::Result<()> {
    match Cli::parse().command {
        Command::GenData(common) => {
            let cfg = common.config()?;
            let data_dir = cfg.output_dir.join("data");
            std::fs::create_dir_all(&data_dir)?;
            let dataset = generate_dataset(&cfg.dataset);
            let mut manifest = Vec::new();
            for (split, clips) in [("train", &dataset.train), ("eval", &dataset.eval_pool)] {
                for lc in clips {
                    let name = format!("clip_{:04}.vclp", lc.id);
                    lc.clip.save_vclp(&data_dir.join(&name))?;
                    manifest.push(serde_json::json!({
                        "id": lc.id, "label": lc.label, "split": split, "file": name,
                    }));
                }
            }
            std::fs::write(
                data_dir.join("manifest.json"),
                serde_json::to_string_pretty(&manifest)?,
            )?;
            println!(
                "wrote {} clips to {}",
                dataset.train.len() + dataset.eval_pool.len(),
                data_dir.display()
            );
            Ok(())
        }
        Command::TrainDenoiser(common) => {
            let cfg = common.config()?;
            let ckpt = cfg.checkpoint_dir();
            if ckpt.join("denoiser.json").exists() {
                std::fs::remove_file(ckpt.join("denoiser.json"))?;
            }
            let world = ensure_models(&cfg)?;
            println!("denoiser checkpoint saved to {}", ckpt.display());
            drop(world);
            Ok(())
        }
        Command::TrainClassifiers(common) => {
            let cfg = common.config()?;
            let ckpt = cfg.checkpoint_dir();
            for arch in ArchKind::ALL {
                let stem = ckpt.join(format!("classifier_{}.json", arch.tag()));
                if stem.exists() {
                    std::fs::remove_file(stem)?;
                }
            }
            let world = ensure_models(&cfg)?;
            let eval = &world.dataset.eval_pool;
            let clips: Vec<VideoClip> = eval.iter().map(|c| c.clip.clone()).collect();
            let labels: Vec<usize> = eval.iter().map(|c| c.label).collect();
            for (tag, model) in &world.classifiers {
                println!("{tag}: held-out accuracy {:.3}", model.accuracy(&clips, &labels));
            }
            Ok(())
        }
        Command::Attack { common, ratio, no_retome, fixed_iterations } => {
            let mut cfg = common.config()?;
            if let Some(p) = ratio {
                cfg.attack.merge_ratio = p;
            }
            if no_retome {
                cfg.attack.retome_enabled = false;
            }
            if let Some(n) = fixed_iterations {
                cfg.attack.ii_enabled = false;
                cfg.attack.initial_iterations = n;
            }
            let variants = vec![VariantSpec::new("default", cfg.attack.clone())];
            let reports = run_experiment(&cfg, &variants)?;
            print_reports(&reports);
            Ok(())
        }
        Command::Eval { common, variant } => {
            let cfg = common.config()?;
            let world = ensure_models(&cfg)?;
            let eval = build_eval_set(&world, cfg.eval_clip_count)?;
            let mut clips = Vec::new();
            let mut labels = Vec::new();
            for lc in &eval {
                let path = cfg
                    .output_dir
                    .join("clips")
                    .join(format!("{}_{:04}.vclp", variant, lc.id));
                clips.push(VideoClip::load_vclp(&path)?);
                labels.push(lc.label);
            }
            for (tag, model) in &world.classifiers {
                println!("{tag}: ASR {:.3}", metrics::asr(&clips, &labels, model));
            }
            Ok(())
        }
        Command::Ablate { common, grid } => {
            let cfg = common.config()?;
            let grid = AblationGrid::parse(&grid)
                .ok_or_else(|| format!("unknown grid '{grid}', expected retome|ii|ratio"))?;
            let variants = ablation_variants(&cfg.attack, grid);
            let reports = run_experiment(&cfg, &variants)?;
            print_reports(&reports);
            Ok(())
        }
        Command::Report(common) => {
            let cfg = common.config()?;
            let dir = cfg.output_dir.join("reports");
            let mut reports = Vec::new();
            let mut entries: Vec<_> = std::fs::read_dir(&dir)?.collect::<Result<_, _>>()?;
            entries.sort_by_key(|e| e.file_name());
            for entry in entries {
                if entry.path().extension().is_some_and(|e| e == "json") {
                    let report: EvalReport =
                        serde_json::from_str(&std::fs::read_to_string(entry.path())?)?;
                    reports.push(report);
                }
            }
            let path = cfg.output_dir.join("summary.csv");
            write_summary_csv(&path, &reports)?;
            println!("{}", std::fs::read_to_string(&path)?);
            Ok(())
        }
    }
}

fn print_reports(reports: &[EvalReport]) {
    for r in reports {
        let asr: Vec<String> = r
            .asr_per_model
            .iter()
            .map(|(tag, rate)| format!("{tag} {rate:.3}"))
            .collect();
        println!(
            "{}: ASR [{}], pixel_mse {:.5}, flicker {:.5}, l_inf {:.4}, {:.1}s/clip",
            r.variant,
            asr.join(", "),
            r.pixel_mse,
            r.flicker,
            r.l_inf,
            r.mean_attack_seconds
        );
    }
}
