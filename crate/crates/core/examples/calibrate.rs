// Dev utility: trains the toy models with the default config and prints the
// measurements the acceptance thresholds depend on.

use std::time::Instant;

use retome_va::attack::{attack, AttackConfig};
use retome_va::classifier::{train_classifier, ArchKind};
use retome_va::clip::VideoClip;
use retome_va::dataset::{derive_seed, generate_dataset, noise_clip, DatasetConfig};
use retome_va::denoiser::{train_denoiser, DenoiserConfig, TrainOpts};
use retome_va::metrics;
use retome_va::scheduler::{ddim_invert, ddim_sample, NoiseSchedule};
use retome_va::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let stage = std::env::args().nth(1).unwrap_or_else(|| "all".to_string());
    let dcfg = DatasetConfig::default();
    let data = generate_dataset(&dcfg);
    println!("dataset: {} train, {} eval pool", data.train.len(), data.eval_pool.len());
    let train_clips: Vec<VideoClip> = data.train.iter().map(|c| c.clip.clone()).collect();
    let train_labels: Vec<usize> = data.train.iter().map(|c| c.label).collect();
    let eval_clips: Vec<VideoClip> = data.eval_pool.iter().map(|c| c.clip.clone()).collect();
    let eval_labels: Vec<usize> = data.eval_pool.iter().map(|c| c.label).collect();

    // classifiers
    let mut models = Vec::new();
    for (i, arch) in ArchKind::ALL.into_iter().enumerate() {
        let mut opts = retome_va::classifier::ClassifierTrainOpts::default();
        opts.seed = derive_seed(opts.seed, i as u64);
        let t0 = Instant::now();
        let (m, losses) = train_classifier(&train_clips, &train_labels, arch, 8, &opts);
        let train_acc = m.accuracy(&train_clips, &train_labels);
        let held = m.accuracy(&eval_clips, &eval_labels);
        println!(
            "{}: {:.1}s, loss {:.3}->{:.3}, train acc {:.3}, held-out acc {:.3}",
            arch.tag(),
            t0.elapsed().as_secs_f64(),
            losses[0],
            losses.last().unwrap(),
            train_acc,
            held
        );
        models.push(m);
    }

    // disagreement on noise
    let mut disagree = 0;
    for s in 0..200u64 {
        let nc = noise_clip(&dcfg, derive_seed(999, s));
        let p: Vec<usize> = models.iter().map(|m| m.predict(nc.tensor())).collect();
        if p[0] != p[1] || p[0] != p[2] {
            disagree += 1;
        }
    }
    println!("noise disagreement: {}/200", disagree);

    // filtered eval set
    let filtered: Vec<usize> = data
        .eval_pool
        .iter()
        .enumerate()
        .filter(|(_, lc)| models.iter().all(|m| m.predict(lc.clip.tensor()) == lc.label))
        .map(|(i, _)| i)
        .collect();
    println!("filtered eval clips: {}/{}", filtered.len(), data.eval_pool.len());
    if stage == "clf" {
        return;
    }

    // denoiser
    let sched = NoiseSchedule::linear(20);
    let topts = TrainOpts::default();
    let t0 = Instant::now();
    let (den, losses) = train_denoiser(&train_clips, &sched, DenoiserConfig::default(), &topts);
    println!(
        "denoiser: {:.1}s, epoch losses {:?}",
        t0.elapsed().as_secs_f64(),
        losses.iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>()
    );

    // held-out eps MSE vs zero predictor
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut mse_model, mut mse_zero) = (0f64, 0f64);
    let trials = 40;
    for i in 0..trials {
        let clip = &eval_clips[i % eval_clips.len()];
        let t = rng.gen_range(1..=20);
        let a = sched.alpha_bar(t);
        let noise = Tensor::<f32>::randn(clip.tensor().shape(), 1.0, &mut rng);
        let x_t = clip.tensor().scale(a.sqrt()).add(&noise.scale((1.0 - a).sqrt()));
        let eps_hat = den.predict(&x_t, sched.base_timestep(t), &retome_va::denoiser::MergeMode::Off).eps;
        mse_model += eps_hat.mse(&noise);
        mse_zero += noise.mse(&Tensor::zeros(noise.shape()));
    }
    println!(
        "eps MSE: model {:.4}, zero predictor {:.4}, ratio {:.3}",
        mse_model / trials as f64,
        mse_zero / trials as f64,
        mse_model / mse_zero
    );

    // roundtrip PSNR, T=20 ts=5 vs T=40 ts=10
    let mut p20 = 0f64;
    let mut p40 = 0f64;
    let sched40 = NoiseSchedule::linear(40);
    let n_rt = 8;
    for i in 0..n_rt {
        let clip = &eval_clips[i];
        let traj = ddim_invert(clip.tensor(), 5, &den, &sched);
        let back = ddim_sample(traj.latent(5), 5, &den, &sched);
        p20 += metrics::psnr(&VideoClip::new(back.clamp(0.0, 1.0)), clip);
        let traj40 = ddim_invert(clip.tensor(), 10, &den, &sched40);
        let back40 = ddim_sample(traj40.latent(10), 10, &den, &sched40);
        p40 += metrics::psnr(&VideoClip::new(back40.clamp(0.0, 1.0)), clip);
    }
    println!("roundtrip PSNR: T=20 {:.2} dB, T=40 {:.2} dB", p20 / n_rt as f64, p40 / n_rt as f64);

    // attacks on a few filtered clips
    let cfg = AttackConfig::default();
    let surrogate = &models[0];
    for &i in filtered.iter().take(4) {
        let lc = &data.eval_pool[i];
        let mut c = cfg.clone();
        c.seed = derive_seed(1, lc.id as u64);
        let t0 = Instant::now();
        let out = attack(&lc.clip, lc.label, surrogate, &den, &sched, &c).unwrap();
        let fooled = surrogate.predict(out.adversarial.tensor()) != lc.label;
        let t_att = models[1].predict(out.adversarial.tensor()) != lc.label;
        let t_mlp = models[2].predict(out.adversarial.tensor()) != lc.label;
        let last = out.trace.per_timestep.last().unwrap();
        println!(
            "clip {:02}: {:.1}s, fooled={} targets=({},{}) linf {:.3} l_att {:.3} l_str {:.4} nodes {}",
            lc.id,
            t0.elapsed().as_secs_f64(),
            fooled,
            t_att,
            t_mlp,
            out.trace.final_linf,
            last.attack_loss,
            last.structure_loss,
            last.tape_nodes_per_iteration,
        );
    }
}
