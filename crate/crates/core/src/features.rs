//! Channel-wise latent encoding/decoding and the two cross-channel feature
//! extractors: sample-level normalized cross-correlation (tNCC) between the
//! reference center frame and every channel's context frame, and
//! feature-level NCC (fNCC) between stacked latent frame features. Also the
//! recurrent context codec that squeezes a feature-context stack into one
//! vector per frame and decodes per-context filters.
//!
//! All cosine denominators are guarded by `eps = 1e-8`: silence frames are
//! legal input and must produce 0, not NaN.

use crate::nn::{Blstm, Bound, Linear, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

pub const NCC_EPS: f64 = 1e-8;

/// Which cross-channel feature feeds the separator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Sample-level NCC, dimension 1 + 2W.
    Tncc,
    /// Feature-level NCC, dimension (1 + 2C)^2.
    Fncc,
}

impl FeatureKind {
    pub fn dim(&self, sample_context: usize, feature_context: usize) -> usize {
        match self {
            FeatureKind::Tncc => 1 + 2 * sample_context,
            FeatureKind::Fncc => (1 + 2 * feature_context) * (1 + 2 * feature_context),
        }
    }
}

/// Per-frame multiply count of one cross-channel feature extraction,
/// `L(1+2W)M` for tNCC versus `N(1+2C)^2 M` for fNCC.
pub fn count_ncc_multiplies(
    kind: FeatureKind,
    frame_len: usize,
    sample_context: usize,
    feature_context: usize,
    latent_dim: usize,
    n_channels: usize,
) -> u64 {
    match kind {
        FeatureKind::Tncc => (frame_len * (1 + 2 * sample_context) * n_channels) as u64,
        FeatureKind::Fncc => {
            let ctx = 1 + 2 * feature_context;
            (latent_dim * ctx * ctx * n_channels) as u64
        }
    }
}

fn frame_linear(tape: &mut Tape, frames: Var, weight: Var, op: &'static str) -> Result<Var> {
    let shape = tape.shape(frames).to_vec();
    let wshape = tape.shape(weight).to_vec();
    if shape.is_empty() || wshape.len() != 2 || shape[shape.len() - 1] != wshape[0] {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("frames {:?} x weight {:?}", shape, wshape),
        });
    }
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = tape.reshape(frames, vec![rows, wshape[0]])?;
    let out = tape.matmul(flat, weight)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = wshape[1];
    tape.reshape(out, out_shape)
}

/// `s^i = y_ctx^i W_ctx` per frame: `[M, T, L+2W] x [L+2W, N] -> [M, T, N]`.
pub fn encode_context_frames(tape: &mut Tape, ctx_frames: Var, w_ctx: Var) -> Result<Var> {
    frame_linear(tape, ctx_frames, w_ctx, "encode_context_frames")
}

/// `f^i = y^i W` per frame: `[M, T, L] x [L, N] -> [M, T, N]`.
pub fn encode_center_frames(tape: &mut Tape, center_frames: Var, w_center: Var) -> Result<Var> {
    frame_linear(tape, center_frames, w_center, "encode_center_frames")
}

/// `z U` per frame back to waveform frames: `[..., N] x [N, L] -> [..., L]`.
pub fn decode_frames(tape: &mut Tape, latents: Var, u: Var) -> Result<Var> {
    frame_linear(tape, latents, u, "decode_frames")
}

/// Sample-level NCC between the reference channel's center frames
/// `[1, T, L]` and every channel's context frames `[M, T, L+2W]`:
/// `q^i_j = <y_ref, y_ctx^i[j .. j+L)> / (|y_ref| |y_ctx^i_j| + eps)`,
/// giving `[M, T, 1+2W]` of cosines in [-1, 1].
pub fn tncc(tape: &mut Tape, ref_centers: Var, ctx_frames: Var) -> Result<Var> {
    let rshape = tape.shape(ref_centers).to_vec();
    let cshape = tape.shape(ctx_frames).to_vec();
    if rshape.len() != 3 || cshape.len() != 3 || rshape[0] != 1 || rshape[1] != cshape[1] {
        return Err(TensorError::ShapeMismatch {
            op: "tncc",
            detail: format!("reference {:?} vs contexts {:?}", rshape, cshape),
        });
    }
    let (m, t) = (cshape[0], cshape[1]);
    let l = rshape[2];
    let ref_exp = tape.expand(ref_centers, &[m, t, l])?;
    let num = tape.cross_corr(ctx_frames, ref_exp)?;
    // Reference frame norms [1, T, 1] broadcast over channels and lags.
    let ref_norm = tape.l2_norm_axis(ref_centers, 2)?;
    // Sliding-window norms of each context frame via corr(x^2, ones).
    let sq = tape.mul(ctx_frames, ctx_frames)?;
    let ones = tape.leaf(&Tensor::ones(&[m, t, l]));
    let win_sumsq = tape.cross_corr(sq, ones)?;
    let win_norm = tape.sqrt(win_sumsq)?;
    let denom = tape.mul(win_norm, ref_norm)?;
    let denom = tape.add_scalar(denom, NCC_EPS)?;
    tape.div(num, denom)
}

/// Feature-level NCC (Eq.-4 style): each of the 1+2C rows of the feature
/// context stack `[M, T, 1+2C, N]` is normalized to unit length
/// (eps-guarded), then the reference channel's stack is correlated against
/// every channel's: a (1+2C) x (1+2C) cosine matrix per (channel, frame),
/// flattened row-major (reference context index major) to `[M, T, (1+2C)^2]`.
pub fn fncc(tape: &mut Tape, feature_stack: Var, ref_channel: usize) -> Result<Var> {
    let shape = tape.shape(feature_stack).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "fncc",
            detail: format!("expected [channels, frames, context, latent], got {:?}", shape),
        });
    }
    let (m, t, ctx, n) = (shape[0], shape[1], shape[2], shape[3]);
    if ref_channel >= m {
        return Err(TensorError::InvalidArgument {
            op: "fncc",
            detail: format!("reference channel {ref_channel} out of range for {m} channels"),
        });
    }
    // max(norm, eps) rather than norm + eps: zero rows still map to 0, but
    // nonzero rows normalize exactly, keeping the feature scale-invariant
    // with a truly unit diagonal on the reference Gram block.
    let norms = tape.l2_norm_axis(feature_stack, 3)?;
    let norms = tape.clamp_min(norms, NCC_EPS)?;
    let unit = tape.div(feature_stack, norms)?;
    let reference = tape.slice(unit, 0, ref_channel, 1)?;
    let ref_rows = tape.reshape(reference, vec![1, t, ctx, 1, n])?;
    let all_rows = tape.reshape(unit, vec![m, t, 1, ctx, n])?;
    let prod = tape.mul(ref_rows, all_rows)?;
    let gram = tape.sum_axis(prod, 4, false)?;
    tape.reshape(gram, vec![m, t, ctx * ctx])
}

/// Recurrent context codec: two BLSTM layers for encoding a feature-context
/// stack into one latent per (channel, frame), and two BLSTM layers for
/// decoding the per-context filters from the reference stack and the
/// separator output.
#[derive(Debug, Clone)]
pub struct ContextCodec {
    enc_rnn1: Blstm,
    enc_rnn2: Blstm,
    enc_proj: Linear,
    dec_rnn1: Blstm,
    dec_rnn2: Blstm,
    dec_proj: Linear,
    latent_dim: usize,
}

impl ContextCodec {
    pub fn new(store: &mut ParamStore, prefix: &str, latent_dim: usize, hidden: usize, seed: u64) -> Self {
        ContextCodec {
            enc_rnn1: Blstm::new(store, &format!("{prefix}.enc.rnn1"), latent_dim, hidden, seed),
            enc_rnn2: Blstm::new(store, &format!("{prefix}.enc.rnn2"), 2 * hidden, hidden, seed + 1),
            enc_proj: Linear::new(store, &format!("{prefix}.enc.proj"), 2 * hidden, latent_dim, true, seed + 2),
            dec_rnn1: Blstm::new(store, &format!("{prefix}.dec.rnn1"), 2 * latent_dim, hidden, seed + 3),
            dec_rnn2: Blstm::new(store, &format!("{prefix}.dec.rnn2"), 2 * hidden, hidden, seed + 4),
            dec_proj: Linear::new(store, &format!("{prefix}.dec.proj"), 2 * hidden, latent_dim, true, seed + 5),
            latent_dim,
        }
    }

    /// Squeeze `[M, T, 1+2C, N]` into `[M, T, N]`: recurrent pass over the
    /// context positions, mean-pool, linear projection.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, feature_stack: Var) -> Result<Var> {
        let shape = tape.shape(feature_stack).to_vec();
        if shape.len() != 4 || shape[3] != self.latent_dim {
            return Err(TensorError::ShapeMismatch {
                op: "context_encode",
                detail: format!("expected [M, T, ctx, {}], got {:?}", self.latent_dim, shape),
            });
        }
        let (m, t, ctx, n) = (shape[0], shape[1], shape[2], shape[3]);
        let seqs = tape.reshape(feature_stack, vec![m * t, ctx, n])?;
        let h1 = self.enc_rnn1.apply(tape, bound, seqs)?;
        let h2 = self.enc_rnn2.apply(tape, bound, h1)?;
        let pooled = tape.mean_axis(h2, 1, false)?;
        let out = self.enc_proj.apply(tape, bound, pooled)?;
        tape.reshape(out, vec![m, t, n])
    }

    /// Decode per-context filters from the reference feature stack
    /// `[T, 1+2C, N]` and the separator output `[T, N]`: the separator vector
    /// is appended to each context row, two recurrent layers run over the
    /// rows, and a per-position head emits `[T, 1+2C, N]` filters.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, ref_stack: Var, summary: Var) -> Result<Var> {
        let sshape = tape.shape(ref_stack).to_vec();
        let gshape = tape.shape(summary).to_vec();
        if sshape.len() != 3 || gshape.len() != 2 || sshape[0] != gshape[0] || sshape[2] != self.latent_dim || gshape[1] != self.latent_dim {
            return Err(TensorError::ShapeMismatch {
                op: "context_decode",
                detail: format!("stack {:?} with summary {:?}", sshape, gshape),
            });
        }
        let (t, ctx, n) = (sshape[0], sshape[1], sshape[2]);
        let g_rows = tape.reshape(summary, vec![t, 1, n])?;
        let g_exp = tape.expand(g_rows, &[t, ctx, n])?;
        let joined = tape.concat(&[ref_stack, g_exp], 2)?;
        let h1 = self.dec_rnn1.apply(tape, bound, joined)?;
        let h2 = self.dec_rnn2.apply(tape, bound, h1)?;
        self.dec_proj.apply(tape, bound, h2)
    }
}
