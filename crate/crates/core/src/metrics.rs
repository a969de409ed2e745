//! Quantitative evaluation: attack success rate, block-matching warp error,
//! flicker proxy, and distortion measures.

use serde::{Deserialize, Serialize};

use crate::classifier::VideoClassifier;
use crate::clip::VideoClip;

pub const BLOCK_SIZE: usize = 8;
pub const SEARCH_RADIUS: isize = 4;

/// Fraction of clips whose top-1 prediction differs from the label.
pub fn asr(clips: &[VideoClip], labels: &[usize], model: &VideoClassifier<f32>) -> f64 {
    assert!(!clips.is_empty(), "asr over an empty set");
    assert_eq!(clips.len(), labels.len(), "clips and labels must align");
    let fooled = clips
        .iter()
        .zip(labels.iter())
        .filter(|(c, &y)| model.predict(c.tensor()) != y)
        .count();
    fooled as f64 / clips.len() as f64
}

/// Motion-compensated warp error. Frame i is warped onto frame i+1 by
/// exhaustive block matching (block 8, search radius 4, SSD criterion) and
/// the mean squared error between warped blocks and frame i+1 is averaged
/// over all consecutive pairs. Boundary blocks, whose search window would
/// leave the frame, are excluded.
pub fn pixel_mse(clip: &VideoClip) -> f64 {
    assert!(clip.frames() >= 2, "pixel_mse needs at least two frames");
    let (h, w, c) = (clip.height(), clip.width(), clip.channels());
    let mut total = 0f64;
    let mut count = 0usize;
    for f in 0..clip.frames() - 1 {
        let prev = clip.frame(f);
        let next = clip.frame(f + 1);
        let mut by = 0;
        while by + BLOCK_SIZE <= h {
            let mut bx = 0;
            while bx + BLOCK_SIZE <= w {
                let interior = by as isize - SEARCH_RADIUS >= 0
                    && bx as isize - SEARCH_RADIUS >= 0
                    && by as isize + (BLOCK_SIZE as isize) + SEARCH_RADIUS <= h as isize
                    && bx as isize + (BLOCK_SIZE as isize) + SEARCH_RADIUS <= w as isize;
                if interior {
                    let best = best_match_ssd(prev, next, h, w, c, by, bx);
                    total += best / (BLOCK_SIZE * BLOCK_SIZE * c) as f64;
                    count += 1;
                }
                bx += BLOCK_SIZE;
            }
            by += BLOCK_SIZE;
        }
    }
    assert!(count > 0, "frame too small for any interior block");
    total / count as f64
}

/// Smallest SSD between the target block of `next` at (by, bx) and any
/// displaced block of `prev` within the search radius. Scan order is
/// dy-major with strict improvement, so ties resolve deterministically.
fn best_match_ssd(
    prev: &[f32],
    next: &[f32],
    _h: usize,
    w: usize,
    c: usize,
    by: usize,
    bx: usize,
) -> f64 {
    let mut best = f64::INFINITY;
    for dy in -SEARCH_RADIUS..=SEARCH_RADIUS {
        for dx in -SEARCH_RADIUS..=SEARCH_RADIUS {
            let mut ssd = 0f64;
            for y in 0..BLOCK_SIZE {
                let py = (by + y) as isize + dy;
                for x in 0..BLOCK_SIZE {
                    let px = (bx + x) as isize + dx;
                    let p = ((py as usize) * w + px as usize) * c;
                    let q = ((by + y) * w + bx + x) * c;
                    for ch in 0..c {
                        let d = prev[p + ch] as f64 - next[q + ch] as f64;
                        ssd += d * d;
                    }
                }
            }
            if ssd < best {
                best = ssd;
            }
        }
    }
    best
}

/// Mean absolute inter-frame difference, averaged over consecutive pairs.
pub fn flicker(clip: &VideoClip) -> f64 {
    assert!(clip.frames() >= 2, "flicker needs at least two frames");
    let mut total = 0f64;
    for f in 0..clip.frames() - 1 {
        let a = clip.frame(f);
        let b = clip.frame(f + 1);
        let mut acc = 0f64;
        for (&x, &y) in a.iter().zip(b.iter()) {
            acc += (x as f64 - y as f64).abs();
        }
        total += acc / a.len() as f64;
    }
    total / (clip.frames() - 1) as f64
}

pub fn l_inf(a: &VideoClip, b: &VideoClip) -> f64 {
    a.max_abs_diff(b)
}

/// Root mean squared pixel difference.
pub fn l2(a: &VideoClip, b: &VideoClip) -> f64 {
    a.tensor().mse(b.tensor()).sqrt()
}

/// Peak signal-to-noise ratio against a peak of 1.0.
pub fn psnr(a: &VideoClip, b: &VideoClip) -> f64 {
    let mse = a.tensor().mse(b.tensor());
    if mse <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (1.0 / mse).log10()
}

/// Aggregate evaluation of one attack variant over a clip set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub clip_count: usize,
    /// model tag -> attack success rate
    pub asr_per_model: std::collections::BTreeMap<String, f64>,
    pub pixel_mse: f64,
    pub flicker: f64,
    pub l_inf: f64,
    pub l2: f64,
    pub psnr: f64,
    pub mean_attack_seconds: f64,
    /// survivors after merging in the default-shape plan, if merging ran
    pub compressed_tokens: Option<usize>,
}

impl EvalReport {
    pub fn validate(&self) {
        for (tag, rate) in &self.asr_per_model {
            assert!((0.0..=1.0).contains(rate), "{tag} rate out of range");
        }
        assert!(self.pixel_mse >= 0.0 && self.flicker >= 0.0);
        assert!(self.l_inf >= 0.0 && self.l2 >= 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{train_classifier, ArchKind, ClassifierTrainOpts};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn static_clip(n: usize, seed: u64) -> VideoClip {
        let frame = Tensor::<f32>::rand_uniform(
            &[1, 32, 32, 3],
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        VideoClip::new(frame).broadcast_frame(0, n)
    }

    #[test]
    fn static_clip_scores_zero() {
        let clip = static_clip(4, 1);
        assert_eq!(pixel_mse(&clip), 0.0);
        assert_eq!(flicker(&clip), 0.0);
    }

    #[test]
    fn translation_within_radius_is_recovered() {
        // frame i+1 = frame i shifted 2 px right: interior blocks match
        // exactly, so the warp error vanishes.
        let (h, w, c) = (24usize, 24usize, 1usize);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = Tensor::<f32>::rand_uniform(&[h, w], 0.0, 1.0, &mut rng);
        let n = 3;
        let mut data = vec![0f32; n * h * w * c];
        for f in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let sx = (x as isize - 2 * f as isize).rem_euclid(w as isize) as usize;
                    data[(f * h + y) * w + x] = base.data()[y * w + sx];
                }
            }
        }
        let clip = VideoClip::new(Tensor::new(vec![n, h, w, c], data));
        assert!(pixel_mse(&clip) < 1e-12);
    }

    #[test]
    fn flicker_constant_offset() {
        // Two frames differing by a constant delta everywhere -> delta.
        let a = Tensor::<f32>::full(&[1, 8, 8, 1], 0.3);
        let b = Tensor::<f32>::full(&[1, 8, 8, 1], 0.45);
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let clip = VideoClip::new(Tensor::new(vec![2, 8, 8, 1], data));
        assert!((flicker(&clip) - 0.15).abs() < 1e-6);
    }

    #[test]
    fn flicker_invariant_under_global_shift() {
        let clip = {
            let t = Tensor::<f32>::rand_uniform(
                &[3, 8, 8, 2],
                0.0,
                0.5,
                &mut ChaCha8Rng::seed_from_u64(5),
            );
            VideoClip::new(t)
        };
        let shifted = VideoClip::new(clip.tensor().map(|v| v + 0.25));
        assert!((flicker(&clip) - flicker(&shifted)).abs() < 1e-6);
    }

    #[test]
    fn asr_trivial_cases_and_reorder_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clips: Vec<VideoClip> = (0..6)
            .map(|_| {
                VideoClip::new(Tensor::rand_uniform(&[2, 8, 8, 3], 0.0, 1.0, &mut rng))
            })
            .collect();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let opts = ClassifierTrainOpts { steps: 60, batch_size: 6, lr: 2e-3, seed: 2 };
        let (model, _) = train_classifier(&clips, &labels, ArchKind::WideMlp, 3, &opts);

        let preds: Vec<usize> = clips.iter().map(|c| model.predict(c.tensor())).collect();
        // Against its own predictions the rate is zero.
        assert_eq!(asr(&clips, &preds, &model), 0.0);
        // Against labels that never match, the rate is one.
        let wrong: Vec<usize> = preds.iter().map(|&p| (p + 1) % 3).collect();
        assert_eq!(asr(&clips, &wrong, &model), 1.0);
        // Reordering clips does not change the rate.
        let mut pairs: Vec<(VideoClip, usize)> =
            clips.iter().cloned().zip(labels.iter().cloned()).collect();
        let before = asr(&clips, &labels, &model);
        pairs.reverse();
        let (rc, rl): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        assert_eq!(asr(&rc, &rl, &model), before);
    }

    #[test]
    #[should_panic(expected = "at least two frames")]
    fn pixel_mse_rejects_single_frame() {
        let clip = static_clip(1, 9);
        let _ = pixel_mse(&clip);
    }

    #[test]
    fn psnr_and_l2_basics() {
        let a = static_clip(2, 11);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
        let b = VideoClip::new(a.tensor().map(|v| v + 0.1));
        assert!((l2(&a, &b) - 0.1).abs() < 1e-6);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-4);
        assert!((l_inf(&a, &b) - 0.1).abs() < 1e-6);
    }
}
