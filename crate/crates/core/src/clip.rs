//! Video clips and their file formats.
//!
//! A clip is an `[N, H, W, C]` tensor of reals in `[0, 1]`. On disk:
//! `"VCLP"` magic, u32 N/H/W/C, then frame-major little-endian f32 values.
//! Individual frames dump to binary PPM (P6) for eyeballing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VCLP";

#[derive(Debug, thiserror::Error)]
pub enum ClipIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected VCLP")]
    BadMagic,
    #[error("header dims inconsistent with payload")]
    BadHeader,
}

/// N frames of H x W x C real values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    tensor: Tensor<f32>,
}

impl VideoClip {
    pub fn new(tensor: Tensor<f32>) -> Self {
        assert_eq!(tensor.shape().len(), 4, "clip shape must be [N, H, W, C]");
        VideoClip { tensor }
    }

    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        VideoClip { tensor: Tensor::zeros(&[n, h, w, c]) }
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.tensor
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn frame_numel(&self) -> usize {
        self.height() * self.width() * self.channels()
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_numel();
        &self.tensor.data()[i * n..(i + 1) * n]
    }

    /// Pixel value at (frame, y, x, channel).
    pub fn at(&self, f: usize, y: usize, x: usize, c: usize) -> f32 {
        let (h, w, ch) = (self.height(), self.width(), self.channels());
        self.tensor.data()[((f * h + y) * w + x) * ch + c]
    }

    /// Broadcast one frame to all N slots (used by identical-frame tests).
    pub fn broadcast_frame(&self, src: usize, n: usize) -> VideoClip {
        let frame = self.frame(src);
        let mut data = Vec::with_capacity(frame.len() * n);
        for _ in 0..n {
            data.extend_from_slice(frame);
        }
        VideoClip::new(Tensor::new(
            vec![n, self.height(), self.width(), self.channels()],
            data,
        ))
    }

    pub fn save_vclp(&self, path: &Path) -> Result<(), ClipIoError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        for &d in self.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in self.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_vclp(path: &Path) -> Result<VideoClip, ClipIoError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ClipIoError::BadMagic);
        }
        let mut buf = [0u8; 4];
        let mut shape = Vec::with_capacity(4);
        for _ in 0..4 {
            r.read_exact(&mut buf)?;
            shape.push(u32::from_le_bytes(buf) as usize);
        }
        let n: usize = shape.iter().product();
        if n == 0 || n > (1 << 28) {
            return Err(ClipIoError::BadHeader);
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let mut tail = [0u8; 1];
        if r.read(&mut tail)? != 0 {
            return Err(ClipIoError::BadHeader);
        }
        Ok(VideoClip::new(Tensor::new(shape, data)))
    }

    /// Write one frame as binary PPM; values clamped to [0, 1] then scaled
    /// to 8 bits. Channels beyond the first three are dropped, single
    /// channel is replicated to gray.
    pub fn save_ppm(&self, frame: usize, path: &Path) -> Result<(), ClipIoError> {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let mut out = BufWriter::new(File::create(path)?);
        write!(out, "P6\n{w} {h}\n255\n")?;
        let data = self.frame(frame);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = data[(y * w + x) * c + ch.min(c - 1)];
                    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    out.write_all(&[byte])?;
                }
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &VideoClip) -> f64 {
        self.tensor.max_abs_diff(&other.tensor)
    }

    /// Largest divergence between any two frames of this clip.
    pub fn max_interframe_divergence(&self) -> f64 {
        let first = self.frame(0);
        let mut worst = 0f64;
        for f in 1..self.frames() {
            for (&a, &b) in self.frame(f).iter().zip(first.iter()) {
                worst = worst.max((a as f64 - b as f64).abs());
            }
        }
        worst
    }
}
