//! Neural building blocks over the tape: named parameter store, linear
//! layers, feature-axis layer normalization, and LSTM/BLSTM recurrences
//! composed from primitive ops (two direction-opposed passes with a gated
//! cell), so the finite-difference checker sees through them.

use std::collections::HashMap;

use crate::tensor::tape::{Tape, Var};
use crate::tensor::{orthogonal, Result, Tensor, TensorError};

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named collection of learnable tensors. Names double as the
/// checkpoint tensor names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Record every parameter on a tape. `trainable` decides whether the
    /// leaves require gradients (training) or not (inference).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.leaf(t) })
            .collect();
        Bound { vars }
    }

    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Replace parameter values from named tensors; every parameter must be
    /// present with a matching shape.
    pub fn load(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, tensor) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = by_name.get(name.as_str()).ok_or_else(|| {
                TensorError::Checkpoint(format!("missing parameter {name}"))
            })?;
            if src.shape() != tensor.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    src.shape(),
                    tensor.shape()
                )));
            }
            *tensor = (*src).clone();
        }
        Ok(())
    }
}

/// Tape bindings of a [`ParamStore`], one `Var` per parameter.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Linear map on the last axis, `[..., in] -> [..., out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        seed: u64,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{prefix}.w"), Tensor::rand_uniform(&[in_dim, out_dim], -bound, bound, seed));
        let b = bias.then(|| store.add(format!("{prefix}.b"), Tensor::zeros(&[out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let last = *shape.last().ok_or(TensorError::ShapeMismatch {
            op: "linear",
            detail: "rank-0 input".into(),
        })?;
        if last != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("input dim {last} != weight in dim {}", self.in_dim),
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, vec![rows, self.in_dim])?;
        let mut y = tape.matmul(flat, bound.var(self.w))?;
        if let Some(b) = self.b {
            y = tape.add(y, bound.var(b))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, out_shape)
    }
}

/// Layer normalization over the last axis with learnable gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    dim: usize,
}

const LN_EPS: f64 = 1e-8;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gain = store.add(format!("{prefix}.gain"), Tensor::ones(&[dim]));
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
        LayerNorm { gain, bias, dim }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.dim) {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("last dim of {:?} != {}", shape, self.dim),
            });
        }
        let axis = shape.len() - 1;
        let mu = tape.mean_axis(x, axis, true)?;
        let centered = tape.sub(x, mu)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_axis(sq, axis, true)?;
        let var_eps = tape.add_scalar(var, LN_EPS)?;
        let std = tape.sqrt(var_eps)?;
        let normed = tape.div(centered, std)?;
        let scaled = tape.mul(normed, bound.var(self.gain))?;
        tape.add(scaled, bound.var(self.bias))
    }
}

/// Single-direction LSTM over `[B, T, in] -> [B, T, H]`, gates in i/f/g/o
/// order. Recurrent weights are orthogonal per gate, input weights uniform
/// in (-1/sqrt(H), 1/sqrt(H)), biases zero.
#[derive(Debug, Clone)]
pub struct Lstm {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    in_dim: usize,
    hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, seed: u64) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let wx = store.add(
            format!("{prefix}.wx"),
            Tensor::rand_uniform(&[in_dim, 4 * hidden], -bound, bound, seed),
        );
        let mut wh_data = vec![0.0; hidden * 4 * hidden];
        for gate in 0..4 {
            let q = orthogonal(hidden, seed.wrapping_add(1 + gate as u64));
            let qd = q.data();
            for r in 0..hidden {
                for c in 0..hidden {
                    wh_data[r * 4 * hidden + gate * hidden + c] = qd[r * hidden + c];
                }
            }
        }
        let wh = store.add(
            format!("{prefix}.wh"),
            Tensor::new(vec![hidden, 4 * hidden], wh_data).expect("wh shape"),
        );
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[4 * hidden]));
        Lstm { wx, wh, b, in_dim, hidden }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var, reverse: bool) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "lstm",
                detail: format!("expected [batch, time, {}], got {:?}", self.in_dim, shape),
            });
        }
        let (b_sz, t_len) = (shape[0], shape[1]);
        let h_dim = self.hidden;
        let mut h = tape.leaf(&Tensor::zeros(&[b_sz, h_dim]));
        let mut c = tape.leaf(&Tensor::zeros(&[b_sz, h_dim]));
        let (wx, wh, bias) = (bound.var(self.wx), bound.var(self.wh), bound.var(self.b));
        let mut outputs = Vec::with_capacity(t_len);
        let steps: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for t in steps {
            let xt = tape.slice(x, 1, t, 1)?;
            let xt = tape.reshape(xt, vec![b_sz, self.in_dim])?;
            let gx = tape.matmul(xt, wx)?;
            let gh = tape.matmul(h, wh)?;
            let pre = tape.add(gx, gh)?;
            let pre = tape.add(pre, bias)?;
            let i_gate = tape.slice(pre, 1, 0, h_dim)?;
            let f_gate = tape.slice(pre, 1, h_dim, h_dim)?;
            let g_gate = tape.slice(pre, 1, 2 * h_dim, h_dim)?;
            let o_gate = tape.slice(pre, 1, 3 * h_dim, h_dim)?;
            let i_act = tape.sigmoid(i_gate)?;
            let f_act = tape.sigmoid(f_gate)?;
            let g_act = tape.tanh(g_gate)?;
            let o_act = tape.sigmoid(o_gate)?;
            let keep = tape.mul(f_act, c)?;
            let write = tape.mul(i_act, g_act)?;
            c = tape.add(keep, write)?;
            let c_act = tape.tanh(c)?;
            h = tape.mul(o_act, c_act)?;
            outputs.push(tape.reshape(h, vec![b_sz, 1, h_dim])?);
        }
        if reverse {
            outputs.reverse();
        }
        tape.concat(&outputs, 1)
    }
}

/// Bidirectional LSTM: forward and reverse passes concatenated on the
/// feature axis, `[B, T, in] -> [B, T, 2H]`.
#[derive(Debug, Clone)]
pub struct Blstm {
    fwd: Lstm,
    bwd: Lstm,
}

impl Blstm {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, seed: u64) -> Self {
        Blstm {
            fwd: Lstm::new(store, &format!("{prefix}.fwd"), in_dim, hidden, seed),
            bwd: Lstm::new(store, &format!("{prefix}.bwd"), in_dim, hidden, seed.wrapping_add(101)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let f = self.fwd.apply(tape, bound, x, false)?;
        let b = self.bwd.apply(tape, bound, x, true)?;
        tape.concat(&[f, b], 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;

    #[test]
    fn param_store_names_and_counts() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "head", 4, 3, true, 1);
        assert_eq!(store.name_of(lin.w), "head.w");
        assert_eq!(store.total_params(), 4 * 3 + 3);
    }

    #[test]
    fn linear_matches_naive_loop() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, true, 7);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = Tensor::rand_uniform(&[2, 4, 3], -1.0, 1.0, 8);
        let xv = tape.leaf(&x);
        let y = lin.apply(&mut tape, &bound, xv).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 2]);
        let w = store.get(lin.w).data().to_vec();
        let b = store.get(lin.b.unwrap()).data().to_vec();
        let yd = tape.value(y).data();
        for row in 0..8 {
            for o in 0..2 {
                let mut acc = b[o];
                for i in 0..3 {
                    acc += x.data()[row * 3 + i] * w[i * 2 + o];
                }
                assert!((yd[row * 2 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_last_axis() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.leaf(&Tensor::rand_uniform(&[3, 6], -2.0, 2.0, 9));
        let y = ln.apply(&mut tape, &bound, x).unwrap();
        let d = tape.value(y).data();
        for r in 0..3 {
            let row = &d[r * 6..(r + 1) * 6];
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn lstm_shapes_and_zero_bias_zero_input() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "rnn", 3, 4, 11);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.leaf(&Tensor::zeros(&[2, 5, 3]));
        let y = lstm.apply(&mut tape, &bound, x, false).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 4]);
        // Zero input and zero biases: every gate preactivation is 0, so the
        // cell never charges and the output stays exactly 0.
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blstm_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let blstm = Blstm::new(&mut store, "b", 2, 3, 13);
        let x = Tensor::rand_uniform(&[1, 4, 2], -1.0, 1.0, 14);
        // d loss / d input through the full bidirectional recurrence.
        let report = check_gradients(
            |tape, v| {
                let bound = store.bind(tape, false);
                let y = blstm.apply(tape, &bound, v)?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn blstm_weight_gradients_match_finite_differences() {
        // Sweep one recurrent weight matrix rather than the input.
        let mut store = ParamStore::new();
        let blstm = Blstm::new(&mut store, "b", 2, 3, 15);
        let x = Tensor::rand_uniform(&[1, 4, 2], -1.0, 1.0, 16);
        let wh_name = "b.fwd.wh";
        let wh0 = store
            .iter()
            .find(|(n, _)| *n == wh_name)
            .map(|(_, t)| t.clone())
            .unwrap();
        let report = check_gradients(
            |tape, v| {
                // Rebind all params as leaves, substituting `v` for wh.
                let mut vars = Vec::new();
                for (name, t) in store.iter() {
                    if name == wh_name {
                        vars.push(v);
                    } else {
                        vars.push(tape.leaf(t));
                    }
                }
                let bound = Bound::from_vars(vars);
                let xv = tape.leaf(&x);
                let y = blstm.apply(tape, &bound, xv)?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            &wh0,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn load_rejects_shape_mismatch_and_missing() {
        let mut store = ParamStore::new();
        Linear::new(&mut store, "l", 3, 2, false, 1);
        let bad = vec![("l.w".to_string(), Tensor::zeros(&[2, 2]))];
        assert!(store.load(&bad).is_err());
        let missing: Vec<(String, Tensor)> = vec![];
        assert!(store.load(&missing).is_err());
        let good = vec![("l.w".to_string(), Tensor::zeros(&[3, 2]))];
        assert!(store.load(&good).is_ok());
    }
}
