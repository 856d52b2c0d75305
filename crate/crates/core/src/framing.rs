//! Waveform framing: center frames, sample-context frames, feature-context
//! stacks, and overlap-add reconstruction.
//!
//! A signal `[M, samples]` is cut into `T = ceil(samples / hop)` frames of
//! length `L` (frame `t` starting at `t * hop`), plus context frames that
//! extend `W` samples into past and future. Boundaries are zero-padded: the
//! physical reading is silence before and after the utterance.
//!
//! Reconstruction uses a half-sample-offset Hann synthesis window divided by
//! the summed window envelope. The offset keeps the envelope strictly
//! positive at the signal edges, so the analysis/synthesis pair reconstructs
//! exactly. The choice of synthesis window is a reproduction caveat: nothing
//! pins it besides the COLA requirement.

use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Frame geometry shared by every model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramingConfig {
    /// Center frame length L, samples.
    pub frame_len: usize,
    /// Hop between frames, samples (L/2 for the standard 50% overlap).
    pub hop: usize,
    /// Sample context W on each side of a center frame.
    pub sample_context: usize,
    /// Feature context C = W / hop, frames on each side.
    pub feature_context: usize,
}

impl FramingConfig {
    pub fn new(frame_len: usize, hop: usize, sample_context: usize) -> Result<Self> {
        if frame_len == 0 || sample_context == 0 || hop == 0 {
            return Err(TensorError::InvalidArgument {
                op: "FramingConfig",
                detail: "frame_len, hop and sample_context must be positive".into(),
            });
        }
        if hop > frame_len {
            return Err(TensorError::InvalidArgument {
                op: "FramingConfig",
                detail: format!("hop {} exceeds frame length {}", hop, frame_len),
            });
        }
        if sample_context % hop != 0 {
            return Err(TensorError::InvalidArgument {
                op: "FramingConfig",
                detail: format!(
                    "sample context {} must be a multiple of hop {} so the feature context is integral",
                    sample_context, hop
                ),
            });
        }
        Ok(FramingConfig {
            frame_len,
            hop,
            sample_context,
            feature_context: sample_context / hop,
        })
    }

    /// 16 ms frames and context at 16 kHz: L = W = 256, 50% overlap, C = 2.
    pub fn default_16k() -> Self {
        FramingConfig::new(256, 128, 256).expect("default config is valid")
    }

    pub fn context_len(&self) -> usize {
        self.frame_len + 2 * self.sample_context
    }

    /// Number of frames for a signal length; independent of channel count.
    pub fn n_frames(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop)
    }
}

/// Center frames `[M, T, L]` of a signal plus the padding bookkeeping needed
/// to undo the framing.
#[derive(Debug, Clone)]
pub struct FrameSet {
    pub frames: Tensor,
    pub original_len: usize,
    pub pad_front: usize,
    pub pad_back: usize,
}

/// Context frames `[M, T, L + 2W]`; the center slice `[W, W + L)` of each
/// context frame equals the corresponding center frame.
#[derive(Debug, Clone)]
pub struct ContextFrameSet {
    pub frames: Tensor,
}

/// Cut a `[M, samples]` signal into center and context frames.
pub fn split_frames(signal: &Tensor, cfg: &FramingConfig) -> Result<(FrameSet, ContextFrameSet)> {
    let shape = signal.shape();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "split_frames",
            detail: format!("expected [channels, samples], got {:?}", shape),
        });
    }
    let (m, samples) = (shape[0], shape[1]);
    if m == 0 || samples == 0 {
        return Err(TensorError::InvalidArgument {
            op: "split_frames",
            detail: "empty signal".into(),
        });
    }
    if !signal.is_finite() {
        return Err(TensorError::NonFinite { op: "split_frames" });
    }
    let (l, hop, w) = (cfg.frame_len, cfg.hop, cfg.sample_context);
    let t_frames = cfg.n_frames(samples);
    let ctx_len = cfg.context_len();
    let src = signal.data();

    let mut centers = vec![0.0; m * t_frames * l];
    let mut contexts = vec![0.0; m * t_frames * ctx_len];
    for ch in 0..m {
        let row = &src[ch * samples..(ch + 1) * samples];
        for t in 0..t_frames {
            let start = t * hop;
            let cdst = (ch * t_frames + t) * l;
            for i in 0..l {
                if start + i < samples {
                    centers[cdst + i] = row[start + i];
                }
            }
            let xdst = (ch * t_frames + t) * ctx_len;
            for i in 0..ctx_len {
                // Context sample index in signal coordinates; negative means
                // the zero-padded region before the utterance.
                let n = start as isize - w as isize + i as isize;
                if n >= 0 && (n as usize) < samples {
                    contexts[xdst + i] = row[n as usize];
                }
            }
        }
    }
    let pad_back = (t_frames - 1) * hop + l - samples;
    Ok((
        FrameSet {
            frames: Tensor::new(vec![m, t_frames, l], centers)?,
            original_len: samples,
            pad_front: 0,
            pad_back,
        },
        ContextFrameSet { frames: Tensor::new(vec![m, t_frames, ctx_len], contexts)? },
    ))
}

/// Synthesis window for overlap-add.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// Half-sample-offset Hann: `sin^2(pi (i + 0.5) / L)`. Strictly positive,
    /// sums to 1 across 50%-overlapped frames.
    Hann,
    /// All-ones; with hop = L this makes overlap-add an identity copy.
    Rect,
}

pub fn synthesis_window(kind: Window, len: usize) -> Vec<f64> {
    match kind {
        Window::Hann => (0..len)
            .map(|i| {
                let s = (std::f64::consts::PI * (i as f64 + 0.5) / len as f64).sin();
                s * s
            })
            .collect(),
        Window::Rect => vec![1.0; len],
    }
}

/// Overlap-add frames `[T, L]` back into a length-`out_len` waveform on the
/// tape (windowed, envelope-compensated; see the tape primitive).
pub fn overlap_add(tape: &mut Tape, frames: Var, hop: usize, window: Window, out_len: usize) -> Result<Var> {
    let frame_len = *tape
        .shape(frames)
        .last()
        .ok_or_else(|| TensorError::ShapeMismatch { op: "overlap_add", detail: "rank-0 input".into() })?;
    let w = synthesis_window(window, frame_len);
    tape.overlap_add(frames, hop, &w, out_len)
}

/// Tape-free overlap-add for tests and evaluation paths.
pub fn overlap_add_tensor(frames: &Tensor, hop: usize, window: Window, out_len: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(frames);
    let out = overlap_add(&mut tape, v, hop, window, out_len)?;
    Ok(tape.value(out).clone())
}

/// Stack `C` past and future feature frames around each frame:
/// `[M, T, N] -> [M, T, 1 + 2C, N]`, out-of-range rows zero.
pub fn stack_feature_context(tape: &mut Tape, features: Var, c: usize) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "stack_feature_context",
            detail: format!("expected [channels, frames, dim], got {:?}", shape),
        });
    }
    let (m, t, n) = (shape[0], shape[1], shape[2]);
    let mut layers = Vec::with_capacity(1 + 2 * c);
    for j in 0..(1 + 2 * c) {
        let shift = j as isize - c as isize;
        let layer = if shift == 0 {
            features
        } else if shift.unsigned_abs() >= t {
            tape.leaf(&Tensor::zeros(&[m, t, n]))
        } else if shift < 0 {
            let pad = shift.unsigned_abs();
            let zeros = tape.leaf(&Tensor::zeros(&[m, pad, n]));
            let body = tape.slice(features, 1, 0, t - pad)?;
            tape.concat(&[zeros, body], 1)?
        } else {
            let pad = shift as usize;
            let body = tape.slice(features, 1, pad, t - pad)?;
            let zeros = tape.leaf(&Tensor::zeros(&[m, pad, n]));
            tape.concat(&[body, zeros], 1)?
        };
        layers.push(tape.reshape(layer, vec![m, t, 1, n])?);
    }
    tape.concat(&layers, 2)
}
