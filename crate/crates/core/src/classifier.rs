//! Toy video recognition models: the white-box surrogate and the transfer
//! targets. Three deliberately different architectures over `[N, H, W, C]`
//! clips, all differentiable with respect to the input clip.
//!
//! Nonlinearities are gated bilinear layers `(x W_a + b_a) * (x W_b + b_b)`,
//! which keeps the whole stack inside the tape's primitive set.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_tensors, save_tensors, CheckpointError};
use crate::clip::VideoClip;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{AdamW, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    /// Per-frame conv trunk, temporal average, linear head.
    TemporalConv,
    /// Per-frame conv trunk, self-attention pooling over frames.
    TemporalAttention,
    /// One wide gated layer over the flattened clip.
    WideMlp,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [
        ArchKind::TemporalConv,
        ArchKind::TemporalAttention,
        ArchKind::WideMlp,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ArchKind::TemporalConv => "temporal-conv",
            ArchKind::TemporalAttention => "temporal-attention",
            ArchKind::WideMlp => "wide-mlp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ClipDims {
    pub fn numel(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }
}

const C1: usize = 24;
const C2: usize = 32;
const FRAME_DIM: usize = 32;
const ATTN_DIM: usize = 16;
const MLP_HIDDEN: usize = 192;

pub struct VideoClassifier<S: Real = f32> {
    pub arch: ArchKind,
    pub k_classes: usize,
    pub dims: ClipDims,
    params: Vec<Tensor<S>>,
    names: Vec<String>,
}

impl<S: Real> VideoClassifier<S> {
    pub fn new(arch: ArchKind, k_classes: usize, dims: ClipDims, seed: u64) -> Self {
        assert!(k_classes >= 2);
        assert_eq!(dims.height % 4, 0, "two stride-2 convs need H % 4 == 0");
        assert_eq!(dims.width % 4, 0, "two stride-2 convs need W % 4 == 0");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut mat = |name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            // Zero-initialized heads keep the starting logits at zero, which
            // stops the gated layers from blowing up in early steps.
            let tensor = if name == "head" {
                Tensor::zeros(&[r, c])
            } else {
                Tensor::randn(&[r, c], 1.0 / (r as f64).sqrt(), rng)
            };
            params.push(tensor);
            names.push(format!("{name}_w"));
            params.push(Tensor::zeros(&[c]));
            names.push(format!("{name}_b"));
        };
        let k = k_classes;
        match arch {
            ArchKind::TemporalConv => {
                let p1 = 4 * dims.channels;
                let p2 = 4 * C1;
                let flat = (dims.height / 4) * (dims.width / 4) * C2;
                mat("c1a", p1, C1, &mut rng);
                mat("c1b", p1, C1, &mut rng);
                mat("c2a", p2, C2, &mut rng);
                mat("c2b", p2, C2, &mut rng);
                mat("frame", flat, FRAME_DIM, &mut rng);
                mat("head", FRAME_DIM, k, &mut rng);
            }
            ArchKind::TemporalAttention => {
                let p1 = 4 * dims.channels;
                let p2 = 4 * C1;
                let flat = (dims.height / 4) * (dims.width / 4) * C2;
                mat("c1a", p1, C1, &mut rng);
                mat("c1b", p1, C1, &mut rng);
                mat("c2a", p2, C2, &mut rng);
                mat("c2b", p2, C2, &mut rng);
                mat("frame", flat, FRAME_DIM, &mut rng);
                mat("attn_q", FRAME_DIM, ATTN_DIM, &mut rng);
                mat("attn_k", FRAME_DIM, ATTN_DIM, &mut rng);
                mat("attn_v", FRAME_DIM, ATTN_DIM, &mut rng);
                mat("head", ATTN_DIM, k, &mut rng);
            }
            ArchKind::WideMlp => {
                let flat = dims.numel();
                mat("m1a", flat, MLP_HIDDEN, &mut rng);
                mat("m1b", flat, MLP_HIDDEN, &mut rng);
                mat("head", MLP_HIDDEN, k, &mut rng);
            }
        }
        VideoClassifier { arch, k_classes, dims, params, names }
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        self.params.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.params.iter_mut().collect()
    }

    pub fn cast<T: Real>(&self) -> VideoClassifier<T> {
        VideoClassifier {
            arch: self.arch,
            k_classes: self.k_classes,
            dims: self.dims,
            params: self.params.iter().map(|p| p.cast()).collect(),
            names: self.names.clone(),
        }
    }

    /// Record logits for a bound clip variable; output shape `[1, K]`.
    pub fn forward(&self, tape: &mut Tape<S>, clip: Var) -> Var {
        let shape = tape.value(clip).shape().to_vec();
        assert_eq!(
            shape,
            vec![self.dims.frames, self.dims.height, self.dims.width, self.dims.channels],
            "clip shape does not match classifier dims"
        );
        let vars: Vec<Var> = self.params.iter().map(|p| tape.input(p)).collect();
        self.forward_with(tape, &vars, clip)
    }

    fn forward_with(&self, tape: &mut Tape<S>, vars: &[Var], clip: Var) -> Var {
        let d = self.dims;
        let gated = |tape: &mut Tape<S>, x: Var, wa: Var, ba: Var, wb: Var, bb: Var| {
            let a0 = tape.matmul(x, wa);
            let a = tape.add_row(a0, ba);
            let b0 = tape.matmul(x, wb);
            let b = tape.add_row(b0, bb);
            tape.mul(a, b)
        };
        let trunk = |tape: &mut Tape<S>, vars: &[Var], clip: Var| -> Var {
            // conv1: 2x2 stride-2 patches over pixels.
            let idx1 = im2col_2x2(d.frames, d.height, d.width, d.channels);
            let rows1 = d.frames * (d.height / 2) * (d.width / 2);
            let col1 = tape.gather_flat(clip, idx1, &[rows1, 4 * d.channels]);
            let h1 = gated(tape, col1, vars[0], vars[1], vars[2], vars[3]);
            // conv2 over the [N, H/2, W/2, C1] feature map.
            let idx2 = im2col_2x2(d.frames, d.height / 2, d.width / 2, C1);
            let rows2 = d.frames * (d.height / 4) * (d.width / 4);
            let col2 = tape.gather_flat(h1, idx2, &[rows2, 4 * C1]);
            let h2 = gated(tape, col2, vars[4], vars[5], vars[6], vars[7]);
            // Per-frame feature vector.
            let flat = (d.height / 4) * (d.width / 4) * C2;
            let per_frame = tape.reshape(h2, &[d.frames, flat]);
            let f0 = tape.matmul(per_frame, vars[8]);
            tape.add_row(f0, vars[9])
        };
        match self.arch {
            ArchKind::TemporalConv => {
                let frames = trunk(tape, vars, clip);
                let pool = tape.input(&temporal_mean_matrix(d.frames));
                let pooled = tape.matmul(pool, frames);
                let l0 = tape.matmul(pooled, vars[10]);
                tape.add_row(l0, vars[11])
            }
            ArchKind::TemporalAttention => {
                let mut frames = trunk(tape, vars, clip);
                let posemb = tape.input(&frame_position_embedding(d.frames, FRAME_DIM));
                frames = tape.add(frames, posemb);
                let q0 = tape.matmul(frames, vars[10]);
                let q = tape.add_row(q0, vars[11]);
                let k0 = tape.matmul(frames, vars[12]);
                let k = tape.add_row(k0, vars[13]);
                let v0 = tape.matmul(frames, vars[14]);
                let v = tape.add_row(v0, vars[15]);
                let logits = tape.matmul_nt(q, k);
                let scaled = tape.mul_scalar(logits, 1.0 / (ATTN_DIM as f64).sqrt());
                let att = tape.softmax(scaled);
                let ctx = tape.matmul(att, v);
                let pool = tape.input(&temporal_mean_matrix(d.frames));
                let pooled = tape.matmul(pool, ctx);
                let l0 = tape.matmul(pooled, vars[16]);
                tape.add_row(l0, vars[17])
            }
            ArchKind::WideMlp => {
                let flat = tape.reshape(clip, &[1, d.numel()]);
                let h = gated(tape, flat, vars[0], vars[1], vars[2], vars[3]);
                let l0 = tape.matmul(h, vars[4]);
                tape.add_row(l0, vars[5])
            }
        }
    }

    /// Plain logits of a clip, length K.
    pub fn classify(&self, clip: &Tensor<S>) -> Tensor<S> {
        let mut tape = Tape::new();
        let cv = tape.input(clip);
        let logits = self.forward(&mut tape, cv);
        tape.value(logits).clone().reshape(&[self.k_classes])
    }

    pub fn predict(&self, clip: &Tensor<S>) -> usize {
        self.classify(clip).argmax()
    }

    pub fn accuracy(&self, clips: &[VideoClip], labels: &[usize]) -> f64
    where
        S: Real,
    {
        assert_eq!(clips.len(), labels.len());
        assert!(!clips.is_empty());
        let correct = clips
            .iter()
            .zip(labels.iter())
            .filter(|(c, &y)| self.predict(&c.tensor().cast::<S>()) == y)
            .count();
        correct as f64 / clips.len() as f64
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        std::fs::create_dir_all(dir)?;
        let stem = format!("classifier_{}", self.arch.tag());
        let pairs: Vec<(&str, &Tensor<S>)> = self
            .names
            .iter()
            .map(String::as_str)
            .zip(self.params.iter())
            .collect();
        save_tensors(&dir.join(format!("{stem}.tnsr")), &pairs)?;
        let sidecar = serde_json::json!({
            "arch": self.arch,
            "k_classes": self.k_classes,
            "dims": self.dims,
            "params": self.names,
        });
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }
}

impl VideoClassifier<f32> {
    pub fn load(dir: &Path, arch: ArchKind) -> Result<VideoClassifier<f32>, CheckpointError> {
        let stem = format!("classifier_{}", arch.tag());
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let k: usize = serde_json::from_value(sidecar["k_classes"].clone())?;
        let dims: ClipDims = serde_json::from_value(sidecar["dims"].clone())?;
        let mut model = VideoClassifier::<f32>::new(arch, k, dims, 0);
        let loaded = load_tensors(&dir.join(format!("{stem}.tnsr")), model.params.len())?;
        for (i, tensor) in loaded.into_iter().enumerate() {
            if model.params[i].shape() != tensor.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{}: expected {:?}, found {:?}",
                    model.names[i],
                    model.params[i].shape(),
                    tensor.shape()
                )));
            }
            model.params[i] = tensor;
        }
        Ok(model)
    }
}

fn im2col_2x2(n: usize, h: usize, w: usize, ch: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * (h / 2) * (w / 2) * 4 * ch);
    for f in 0..n {
        let base = f * h * w * ch;
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        for cc in 0..ch {
                            idx.push(base + ((oy * 2 + dy) * w + ox * 2 + dx) * ch + cc);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn temporal_mean_matrix<S: Real>(n: usize) -> Tensor<S> {
    Tensor::full(&[1, n], 1.0 / n as f64)
}

fn frame_position_embedding<S: Real>(n: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(n * dim);
    for f in 0..n {
        data.extend(
            Tensor::<S>::sinusoidal_embedding(f as f64, dim)
                .into_data(),
        );
    }
    Tensor::new(vec![n, dim], data)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassifierTrainOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainOpts {
    fn default() -> Self {
        ClassifierTrainOpts { steps: 900, batch_size: 16, lr: 1e-3, seed: 11 }
    }
}

/// Cross-entropy training on labeled clips; returns the model and per-epoch
/// mean losses.
pub fn train_classifier(
    clips: &[VideoClip],
    labels: &[usize],
    arch: ArchKind,
    k_classes: usize,
    opts: &ClassifierTrainOpts,
) -> (VideoClassifier<f32>, Vec<f64>) {
    assert!(!clips.is_empty(), "training set must be nonempty");
    assert_eq!(clips.len(), labels.len());
    assert!(labels.iter().all(|&y| y < k_classes));
    let dims = ClipDims {
        frames: clips[0].frames(),
        height: clips[0].height(),
        width: clips[0].width(),
        channels: clips[0].channels(),
    };
    let mut model = VideoClassifier::<f32>::new(arch, k_classes, dims, opts.seed);
    let mut opt = AdamW::new(opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xC1A5);
    let epoch_len = (opts.steps / 10).max(1);
    let mut epoch_losses = Vec::new();
    let (mut acc, mut acc_n) = (0.0, 0usize);
    for step in 0..opts.steps {
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = model.params.iter().map(|p| tape.param(p)).collect();
        let mut total: Option<Var> = None;
        for _ in 0..opts.batch_size {
            use rand::Rng;
            let i = rng.gen_range(0..clips.len());
            let cv = tape.input(clips[i].tensor());
            let logits = model.forward_with(&mut tape, &vars, cv);
            let item = tape.cross_entropy(logits, vec![labels[i]]);
            total = Some(match total {
                Some(t0) => tape.add(t0, item),
                None => item,
            });
        }
        let total = total.expect("batch_size >= 1");
        let loss = tape.mul_scalar(total, 1.0 / opts.batch_size as f64);
        acc += tape.value(loss).data()[0] as f64;
        acc_n += 1;
        let grads = tape.backward(loss);
        let grad_refs: Vec<Option<&Tensor<f32>>> = vars.iter().map(|&v| grads.get(v)).collect();
        let mut params = model.params_mut();
        opt.step(&mut params, &grad_refs);
        if (step + 1) % epoch_len == 0 {
            epoch_losses.push(acc / acc_n as f64);
            log::info!(
                "classifier {} epoch {}: loss {:.4}",
                arch.tag(),
                epoch_losses.len(),
                acc / acc_n as f64
            );
            acc = 0.0;
            acc_n = 0;
        }
    }
    if acc_n > 0 {
        epoch_losses.push(acc / acc_n as f64);
    }
    (model, epoch_losses)
}
