//! Shape arithmetic shared by the tape ops.

use super::{Result, TensorError};

/// Row-major strides for a shape.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &dim) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= dim;
    }
    strides
}

/// NumPy-style broadcast of two shapes (align right, size-1 dims stretch).
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("cannot broadcast {:?} with {:?}", a, b),
            });
        };
    }
    Ok(out)
}

/// Strides of `shape` when broadcast into a `rank`-dim output: missing leading
/// dims and size-1 dims get stride 0.
pub fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let own = strides_for(shape);
    let mut out = vec![0; rank];
    let offset = rank - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    out
}

/// Walks a row-major index space of `shape`, yielding flat offsets into two
/// broadcast operands.
pub struct BroadcastIter {
    shape: Vec<usize>,
    idx: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    off_a: usize,
    off_b: usize,
    remaining: usize,
}

impl BroadcastIter {
    pub fn new(out_shape: &[usize], a_shape: &[usize], b_shape: &[usize]) -> Self {
        let rank = out_shape.len();
        BroadcastIter {
            shape: out_shape.to_vec(),
            idx: vec![0; rank],
            sa: broadcast_strides(a_shape, rank),
            sb: broadcast_strides(b_shape, rank),
            off_a: 0,
            off_b: 0,
            remaining: out_shape.iter().product(),
        }
    }
}

impl Iterator for BroadcastIter {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.remaining == 0 {
            return None;
        }
        let item = (self.off_a, self.off_b);
        self.remaining -= 1;
        // Increment the multi-index, rightmost dim fastest.
        for d in (0..self.shape.len()).rev() {
            self.idx[d] += 1;
            self.off_a += self.sa[d];
            self.off_b += self.sb[d];
            if self.idx[d] < self.shape[d] {
                break;
            }
            self.off_a -= self.sa[d] * self.shape[d];
            self.off_b -= self.sb[d] * self.shape[d];
            self.idx[d] = 0;
        }
        Some(item)
    }
}

/// Sum-reduce `grad` (shaped `from`) back to `to` by collapsing broadcast axes.
pub fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let to_numel: usize = to.iter().product();
    let mut out = vec![0.0; to_numel];
    let rank = from.len();
    let st = broadcast_strides(to, rank);
    let mut idx = vec![0usize; rank];
    let mut off_t = 0usize;
    for &g in grad {
        out[off_t] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            off_t += st[d];
            if idx[d] < from[d] {
                break;
            }
            off_t -= st[d] * from[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes("t", &[2, 1, 4], &[1, 3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shapes("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_iter_matches_manual_expansion() {
        // a: [2,1], b: [1,3] -> out [2,3]
        let offsets: Vec<(usize, usize)> = BroadcastIter::new(&[2, 3], &[2, 1], &[1, 3]).collect();
        assert_eq!(offsets, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        // grad shaped [2,3] reduced to [3] sums over rows; to [2,1] sums cols.
        let grad = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(reduce_to_shape(&grad, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_to_shape(&grad, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
        assert_eq!(reduce_to_shape(&grad, &[2, 3], &[1]), vec![21.0]);
    }
}
