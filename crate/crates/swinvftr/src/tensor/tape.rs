//! Dynamically recorded operation tape for reverse-mode differentiation.
//!
//! Every differentiable op appends a node holding its forward value and enough
//! context to replay the adjoint. [`Tape::backward`] walks the nodes in
//! reverse, freeing intermediate gradient buffers as soon as they are
//! consumed; leaf gradients stay available through [`Tape::grad`].

use std::sync::Arc;

use rayon::prelude::*;

use super::conv::{
    conv3d_backward_input, conv3d_backward_weight, conv3d_forward, conv3d_output_dims,
    conv_transpose2_backward_input, conv_transpose2_backward_weight, conv_transpose2_forward,
    conv_transpose2_output_dims, ConvSpec,
};
use super::math;
use super::{fmt_shape, Result, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: Val, b: Val },
    Mul { a: Val, b: Val },
    Div { a: Val, b: Val },
    Scale { x: Val, c: f32 },
    AddConst { x: Val },
    Gelu { x: Val },
    Softmax { x: Val, axis: usize },
    LayerNorm { x: Val, gamma: Val, beta: Val, eps: f32 },
    InstanceNorm { x: Val, gamma: Val, beta: Val, eps: f32 },
    Linear { x: Val, w: Val, b: Option<Val> },
    Bmm { a: Val, b: Val, ta: bool, tb: bool, dims: [usize; 4] },
    Conv3d { x: Val, w: Val, b: Option<Val>, spec: ConvSpec },
    ConvTranspose { x: Val, w: Val, b: Option<Val> },
    GatherRows { x: Val, mapping: Arc<Vec<i64>>, row_len: usize },
    TransposeLast2 { x: Val },
    Reshape { x: Val },
    QkvSlice { x: Val, which: usize, heads: usize },
    MergeHeads { x: Val, heads: usize },
    AddRelPosBias { x: Val, table: Val, index: Arc<Vec<u32>>, heads: usize },
    AddWindowMask { x: Val },
    SumAll { x: Val },
    MeanAll { x: Val },
    SumPerChannel { x: Val },
    ConcatChannels { a: Val, b: Val },
}

pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs: Vec<bool>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn debug_assert_finite(data: &[f32], what: &str) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "non-finite value produced by {what}"
    );
    let _ = (data, what);
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers an input tensor; it participates in backward iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Val {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor) -> Val {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Val) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> Val {
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        Val(self.values.len() - 1)
    }

    fn needs(&self, v: Val) -> bool {
        self.needs[v.0]
    }

    fn check_same_shape(&self, a: Val, b: Val, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape(format!(
                "{what}: shape {} vs {}",
                fmt_shape(self.shape(a)),
                fmt_shape(self.shape(b))
            )));
        }
        Ok(())
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_shape(a, b, "add")?;
        let data = binary_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x + y);
        debug_assert_finite(&data, "add");
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_shape(a, b, "mul")?;
        let data = binary_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x * y);
        debug_assert_finite(&data, "mul");
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    pub fn div(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_shape(a, b, "div")?;
        let data = binary_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x / y);
        debug_assert_finite(&data, "div");
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Scale { x: a, c: 0.0 }, needs)).map(|_| ())?;
        unreachable!()
    }

    pub fn scale(&mut self, x: Val, c: f32) -> Val {
        let data: Vec<f32> = self.values[x.0].data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Scale { x, c }, needs)
    }

    pub fn add_const(&mut self, x: Val, c: f32) -> Val {
        let data: Vec<f32> = self.values[x.0].data().iter().map(|v| v + c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::AddConst { x }, needs)
    }

    pub fn gelu(&mut self, x: Val) -> Val {
        let data = unary_map(self.values[x.0].data(), math::gelu);
        debug_assert_finite(&data, "gelu");
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Gelu { x }, needs)
    }

    // ---- normalization and activation ------------------------------------

    pub fn softmax(&mut self, x: Val, axis: usize) -> Result<Val> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::Axis { axis, rank });
        }
        let data = math::softmax(self.values[x.0].data(), self.shape(x), axis);
        debug_assert_finite(&data, "softmax");
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Softmax { x, axis }, needs))
    }

    /// Normalizes over the last dimension, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val, eps: f32) -> Result<Val> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| {
            TensorError::Shape("layer_norm requires rank >= 1".to_string())
        })?;
        if c == 0 {
            return Err(TensorError::Shape(
                "layer_norm: zero-length channel dim".to_string(),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::Shape(format!(
                "layer_norm: gamma {} / beta {} incompatible with input {}",
                fmt_shape(self.shape(gamma)),
                fmt_shape(self.shape(beta)),
                fmt_shape(&shape)
            )));
        }
        let xd = self.values[x.0].data();
        let gd = self.values[gamma.0].data();
        let bd = self.values[beta.0].data();
        let mut out = vec![0.0f32; xd.len()];
        for (lane, o_lane) in xd.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let (mean, inv_std) = math::mean_invstd(lane, eps);
            for j in 0..c {
                o_lane[j] = (lane[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        debug_assert_finite(&out, "layer_norm");
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, eps }, needs))
    }

    /// Normalizes each `(n, c)` slice over its spatial extent; `gamma`/`beta`
    /// are per-channel.
    pub fn instance_norm(&mut self, x: Val, gamma: Val, beta: Val, eps: f32) -> Result<Val> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 5 {
            return Err(TensorError::Shape(format!(
                "instance_norm expects [N,C,D,H,W], got {}",
                fmt_shape(&shape)
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if spatial == 0 || c == 0 {
            return Err(TensorError::Shape(format!(
                "instance_norm: empty input {}",
                fmt_shape(&shape)
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::Shape(format!(
                "instance_norm: gamma {} / beta {} incompatible with input {}",
                fmt_shape(self.shape(gamma)),
                fmt_shape(self.shape(beta)),
                fmt_shape(&shape)
            )));
        }
        let xd = self.values[x.0].data();
        let gd = self.values[gamma.0].data();
        let bd = self.values[beta.0].data();
        let mut out = vec![0.0f32; xd.len()];
        for (flat, (lane, o_lane)) in xd
            .chunks_exact(spatial)
            .zip(out.chunks_exact_mut(spatial))
            .enumerate()
        {
            let ci = flat % c;
            let _ = n;
            let (mean, inv_std) = math::mean_invstd(lane, eps);
            let (g, b) = (gd[ci], bd[ci]);
            for (o, &v) in o_lane.iter_mut().zip(lane) {
                *o = (v - mean) * inv_std * g + b;
            }
        }
        debug_assert_finite(&out, "instance_norm");
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::InstanceNorm { x, gamma, beta, eps }, needs))
    }

    // ---- linear algebra ---------------------------------------------------

    /// `x[..., K] @ w[K, N] (+ b[N])`.
    pub fn linear(&mut self, x: Val, w: Val, b: Option<Val>) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(TensorError::Shape(format!(
                "linear: input {} incompatible with weight {}",
                fmt_shape(&xs),
                fmt_shape(&ws)
            )));
        }
        let (k, n_out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(TensorError::Shape(format!(
                    "linear: bias {} incompatible with weight {}",
                    fmt_shape(self.shape(b)),
                    fmt_shape(&ws)
                )));
            }
        }
        let m = self.values[x.0].numel() / k;
        let mut out = vec![0.0f32; m * n_out];
        math::gemm(
            &mut out,
            self.values[x.0].data(),
            self.values[w.0].data(),
            m,
            n_out,
            k,
            false,
            false,
            false,
        );
        if let Some(bv) = b {
            let bd = self.values[bv.0].data();
            for row in out.chunks_exact_mut(n_out) {
                for (o, &bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        debug_assert_finite(&out, "linear");
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = n_out;
        let t = Tensor::new(oshape, out)?;
        let needs = self.needs(x) || self.needs(w) || b.map_or(false, |b| self.needs(b));
        Ok(self.push(t, Op::Linear { x, w, b }, needs))
    }

    /// Batched matmul `out[B,M,N] = op(a) @ op(b)` where the stored buffers
    /// are transposed when `ta`/`tb` are set.
    pub fn bmm(&mut self, a: Val, b: Val, ta: bool, tb: bool) -> Result<Val> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(TensorError::Shape(format!(
                "bmm: expected matching 3-d batches, got {} and {}",
                fmt_shape(&as_),
                fmt_shape(&bs)
            )));
        }
        let batch = as_[0];
        let (m, k_a) = if ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (k_b, n) = if tb { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if k_a != k_b {
            return Err(TensorError::Shape(format!(
                "bmm: inner dims {} vs {} (shapes {} ta={ta}, {} tb={tb})",
                k_a,
                k_b,
                fmt_shape(&as_),
                fmt_shape(&bs)
            )));
        }
        let mut out = vec![0.0f32; batch * m * n];
        math::bmm(
            &mut out,
            self.values[a.0].data(),
            self.values[b.0].data(),
            batch,
            m,
            n,
            k_a,
            ta,
            tb,
            false,
        );
        debug_assert_finite(&out, "bmm");
        let t = Tensor::new(vec![batch, m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            t,
            Op::Bmm {
                a,
                b,
                ta,
                tb,
                dims: [batch, m, n, k_a],
            },
            needs,
        ))
    }

    // ---- convolution -------------------------------------------------------

    pub fn conv3d(&mut self, x: Val, w: Val, b: Option<Val>, spec: ConvSpec) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        conv3d_output_dims(&xs, &ws, &spec)?;
        if let Some(bv) = b {
            if self.shape(bv) != [ws[0]] {
                return Err(TensorError::Shape(format!(
                    "conv3d: bias {} incompatible with weight {}",
                    fmt_shape(self.shape(bv)),
                    fmt_shape(&ws)
                )));
            }
        }
        let bias = b.map(|bv| self.values[bv.0].data().to_vec());
        let (out, oshape) = conv3d_forward(
            self.values[x.0].data(),
            &xs,
            self.values[w.0].data(),
            &ws,
            bias.as_deref(),
            &spec,
        )?;
        debug_assert_finite(&out, "conv3d");
        let t = Tensor::new(oshape, out)?;
        let needs = self.needs(x) || self.needs(w) || b.map_or(false, |bv| self.needs(bv));
        Ok(self.push(t, Op::Conv3d { x, w, b, spec }, needs))
    }

    /// Transposed conv with stride 2 and kernel 2: doubles every spatial dim.
    pub fn conv_transpose3d(
        &mut self,
        x: Val,
        w: Val,
        b: Option<Val>,
        stride: usize,
        kernel: usize,
    ) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let oshape = conv_transpose2_output_dims(&xs, &ws, stride, kernel)?;
        if let Some(bv) = b {
            if self.shape(bv) != [ws[1]] {
                return Err(TensorError::Shape(format!(
                    "transposed conv: bias {} incompatible with weight {}",
                    fmt_shape(self.shape(bv)),
                    fmt_shape(&ws)
                )));
            }
        }
        let bias = b.map(|bv| self.values[bv.0].data().to_vec());
        let (out, oshape2) = conv_transpose2_forward(
            self.values[x.0].data(),
            &xs,
            self.values[w.0].data(),
            bias.as_deref(),
        );
        debug_assert_eq!(oshape, oshape2);
        debug_assert_finite(&out, "conv_transpose3d");
        let t = Tensor::new(oshape2, out)?;
        let needs = self.needs(x) || self.needs(w) || b.map_or(false, |bv| self.needs(bv));
        Ok(self.push(t, Op::ConvTranspose { x, w, b }, needs))
    }

    // ---- data movement -----------------------------------------------------

    /// Row gather: views the input as `[rows, row_len]` and emits the rows
    /// named by `mapping` (entry `-1` emits a zero row). Backward scatter-adds.
    pub fn gather_rows(
        &mut self,
        x: Val,
        mapping: Arc<Vec<i64>>,
        row_len: usize,
        out_shape: Vec<usize>,
    ) -> Result<Val> {
        let numel = self.values[x.0].numel();
        if row_len == 0 || numel % row_len != 0 {
            return Err(TensorError::Shape(format!(
                "gather_rows: row_len {} does not divide input {}",
                row_len,
                fmt_shape(self.shape(x))
            )));
        }
        let rows_in = (numel / row_len) as i64;
        let out_numel: usize = out_shape.iter().product();
        if out_numel != mapping.len() * row_len {
            return Err(TensorError::Shape(format!(
                "gather_rows: out shape {} != {} rows of {}",
                fmt_shape(&out_shape),
                mapping.len(),
                row_len
            )));
        }
        let xd = self.values[x.0].data();
        let mut out = vec![0.0f32; out_numel];
        for (j, &src) in mapping.iter().enumerate() {
            debug_assert!(src < rows_in, "gather_rows: source row out of range");
            if src >= 0 {
                let s = src as usize * row_len;
                out[j * row_len..(j + 1) * row_len].copy_from_slice(&xd[s..s + row_len]);
            }
        }
        let t = Tensor::new(out_shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::GatherRows { x, mapping, row_len }, needs))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Val) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::Shape(format!(
                "transpose_last2 requires rank >= 2, got {}",
                fmt_shape(&xs)
            )));
        }
        let (a, b) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let out = transpose_batch(self.values[x.0].data(), a, b);
        let mut oshape = xs;
        let r = oshape.len();
        oshape.swap(r - 2, r - 1);
        let t = Tensor::new(oshape, out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::TransposeLast2 { x }, needs))
    }

    pub fn reshape(&mut self, x: Val, shape: Vec<usize>) -> Result<Val> {
        let numel: usize = shape.iter().product();
        if numel != self.values[x.0].numel() {
            return Err(TensorError::Shape(format!(
                "reshape: {} -> {}",
                fmt_shape(self.shape(x)),
                fmt_shape(&shape)
            )));
        }
        let t = Tensor::new(shape, self.values[x.0].data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// Extracts query/key/value heads from a fused projection:
    /// `[B, T, 3C] -> [B*heads, T, C/heads]` selecting `which` in `{0,1,2}`.
    pub fn qkv_slice(&mut self, x: Val, which: usize, heads: usize) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[2] % 3 != 0 {
            return Err(TensorError::Shape(format!(
                "qkv_slice expects [B,T,3C], got {}",
                fmt_shape(&xs)
            )));
        }
        let c = xs[2] / 3;
        if heads == 0 || c % heads != 0 {
            return Err(TensorError::Config(format!(
                "channels {c} not divisible by heads {heads}"
            )));
        }
        let (bsz, t_len) = (xs[0], xs[1]);
        let dh = c / heads;
        let xd = self.values[x.0].data();
        let mut out = vec![0.0f32; bsz * heads * t_len * dh];
        for bi in 0..bsz {
            for h in 0..heads {
                for t in 0..t_len {
                    let src = (bi * t_len + t) * 3 * c + which * c + h * dh;
                    let dst = ((bi * heads + h) * t_len + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let t = Tensor::new(vec![bsz * heads, t_len, dh], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::QkvSlice { x, which, heads }, needs))
    }

    /// Inverse of the head split: `[B*heads, T, dh] -> [B, T, heads*dh]`.
    pub fn merge_heads(&mut self, x: Val, heads: usize) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || heads == 0 || xs[0] % heads != 0 {
            return Err(TensorError::Shape(format!(
                "merge_heads: {} not divisible into {heads} heads",
                fmt_shape(&xs)
            )));
        }
        let (bsz, t_len, dh) = (xs[0] / heads, xs[1], xs[2]);
        let c = heads * dh;
        let xd = self.values[x.0].data();
        let mut out = vec![0.0f32; bsz * t_len * c];
        for bi in 0..bsz {
            for h in 0..heads {
                for t in 0..t_len {
                    let src = ((bi * heads + h) * t_len + t) * dh;
                    let dst = (bi * t_len + t) * c + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let t = Tensor::new(vec![bsz, t_len, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::MergeHeads { x, heads }, needs))
    }

    /// Adds a learned relative-position bias to attention scores.
    ///
    /// `x` is `[B*heads, T, T]`, `table` is `[num_offsets, heads]` and
    /// `index[t1*T + t2]` selects the offset row for each token pair.
    pub fn add_rel_pos_bias(
        &mut self,
        x: Val,
        table: Val,
        index: Arc<Vec<u32>>,
        heads: usize,
    ) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let ts = self.shape(table).to_vec();
        if xs.len() != 3 || xs[1] != xs[2] || xs[0] % heads != 0 {
            return Err(TensorError::Shape(format!(
                "rel_pos_bias: scores {} not [B*heads,T,T]",
                fmt_shape(&xs)
            )));
        }
        if ts.len() != 2 || ts[1] != heads || index.len() != xs[1] * xs[2] {
            return Err(TensorError::Shape(format!(
                "rel_pos_bias: table {} / index {} incompatible with scores {}",
                fmt_shape(&ts),
                index.len(),
                fmt_shape(&xs)
            )));
        }
        let t_sq = xs[1] * xs[2];
        let xd = self.values[x.0].data();
        let td = self.values[table.0].data();
        let mut out = vec![0.0f32; xd.len()];
        for (bh, (chunk, o_chunk)) in xd
            .chunks_exact(t_sq)
            .zip(out.chunks_exact_mut(t_sq))
            .enumerate()
        {
            let h = bh % heads;
            for (i, (&v, o)) in chunk.iter().zip(o_chunk.iter_mut()).enumerate() {
                *o = v + td[index[i] as usize * heads + h];
            }
        }
        debug_assert_finite(&out, "add_rel_pos_bias");
        let t = Tensor::new(xs, out)?;
        let needs = self.needs(x) || self.needs(table);
        Ok(self.push(t, Op::AddRelPosBias { x, table, index, heads }, needs))
    }

    /// Adds a constant per-window additive mask (0 or -1e9 entries) to scores
    /// shaped `[B*nW*heads, T, T]`, broadcasting over batch and heads.
    pub fn add_window_mask(&mut self, x: Val, mask: &Tensor, heads: usize) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let ms = mask.shape().to_vec();
        if xs.len() != 3 || ms.len() != 3 || ms[1] != xs[1] || ms[2] != xs[2] {
            return Err(TensorError::Shape(format!(
                "window mask {} incompatible with scores {}",
                fmt_shape(&ms),
                fmt_shape(&xs)
            )));
        }
        let num_windows = ms[0];
        if heads == 0 || xs[0] % heads != 0 || (xs[0] / heads) % num_windows != 0 {
            return Err(TensorError::Shape(format!(
                "window mask: {} score batches not divisible by heads {} x windows {}",
                xs[0], heads, num_windows
            )));
        }
        let t_sq = xs[1] * xs[2];
        let xd = self.values[x.0].data();
        let md = mask.data();
        let mut out = vec![0.0f32; xd.len()];
        for (bh, (chunk, o_chunk)) in xd
            .chunks_exact(t_sq)
            .zip(out.chunks_exact_mut(t_sq))
            .enumerate()
        {
            let w = (bh / heads) % num_windows;
            let m = &md[w * t_sq..(w + 1) * t_sq];
            for ((&v, &mv), o) in chunk.iter().zip(m).zip(o_chunk.iter_mut()) {
                *o = v + mv;
            }
        }
        let t = Tensor::new(xs, out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::AddWindowMask { x }, needs))
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum_all(&mut self, x: Val) -> Val {
        let s = math::sum_f64(self.values[x.0].data()) as f32;
        let t = Tensor::new(vec![1], vec![s]).unwrap();
        let needs = self.needs(x);
        self.push(t, Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: Val) -> Val {
        let n = self.values[x.0].numel().max(1);
        let s = (math::sum_f64(self.values[x.0].data()) / n as f64) as f32;
        let t = Tensor::new(vec![1], vec![s]).unwrap();
        let needs = self.needs(x);
        self.push(t, Op::MeanAll { x }, needs)
    }

    /// `[N, C, ...] -> [C]`, summing every axis except the channel axis.
    pub fn sum_per_channel(&mut self, x: Val) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::Shape(format!(
                "sum_per_channel expects rank >= 2, got {}",
                fmt_shape(&xs)
            )));
        }
        let (n, c) = (xs[0], xs[1]);
        let rest: usize = xs[2..].iter().product();
        let xd = self.values[x.0].data();
        let mut out = vec![0.0f32; c];
        for ci in 0..c {
            let mut acc = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * rest;
                for &v in &xd[base..base + rest] {
                    acc += v as f64;
                }
            }
            out[ci] = acc as f32;
        }
        let t = Tensor::new(vec![c], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SumPerChannel { x }, needs))
    }

    /// Concatenates two `[N, C, D, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Val, b: Val) -> Result<Val> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 5
            || bs.len() != 5
            || as_[0] != bs[0]
            || as_[2..] != bs[2..]
        {
            return Err(TensorError::Shape(format!(
                "concat_channels: {} vs {}",
                fmt_shape(&as_),
                fmt_shape(&bs)
            )));
        }
        let (n, ca, cb) = (as_[0], as_[1], bs[1]);
        let spatial: usize = as_[2..].iter().product();
        let ad = self.values[a.0].data();
        let bd = self.values[b.0].data();
        let mut out = vec![0.0f32; (ca + cb) * n * spatial];
        for ni in 0..n {
            let dst = ni * (ca + cb) * spatial;
            out[dst..dst + ca * spatial]
                .copy_from_slice(&ad[ni * ca * spatial..(ni + 1) * ca * spatial]);
            out[dst + ca * spatial..dst + (ca + cb) * spatial]
                .copy_from_slice(&bd[ni * cb * spatial..(ni + 1) * cb * spatial]);
        }
        let mut oshape = as_;
        oshape[1] = ca + cb;
        let t = Tensor::new(oshape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::ConcatChannels { a, b }, needs))
    }

    // ---- backward -----------------------------------------------------------

    /// Accumulates `contrib` into the gradient slot of `v`.
    fn add_grad(&mut self, v: Val, contrib: Vec<f32>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            slot @ None => *slot = Some(contrib),
            Some(existing) => {
                debug_assert_eq!(existing.len(), contrib.len());
                for (e, c) in existing.iter_mut().zip(&contrib) {
                    *e += c;
                }
            }
        }
    }

    /// Reverse pass from a scalar loss. Gradients of leaves remain readable
    /// via [`Tape::grad`]; intermediate buffers are freed as they are used.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::Shape(format!(
                "backward expects a scalar loss, got {}",
                fmt_shape(self.shape(loss))
            )));
        }
        if !self.needs[loss.0] {
            return Err(TensorError::Config(
                "backward: loss does not depend on any tracked input".to_string(),
            ));
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.values.len()).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = self.ops[i].clone();
            match op {
                Op::Leaf => {
                    self.grads[i] = Some(g);
                }
                Op::Add { a, b } => {
                    if self.needs(b) {
                        self.add_grad(b, g.clone());
                    }
                    self.add_grad(a, g);
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da = binary_map(&g, self.values[b.0].data(), |x, y| x * y);
                        self.add_grad(a, da);
                    }
                    if self.needs(b) {
                        let db = binary_map(&g, self.values[a.0].data(), |x, y| x * y);
                        self.add_grad(b, db);
                    }
                }
                Op::Div { a, b } => {
                    let bd = self.values[b.0].data();
                    if self.needs(a) {
                        let da = binary_map(&g, bd, |x, y| x / y);
                        self.add_grad(a, da);
                    }
                    if self.needs(b) {
                        let ad = self.values[a.0].data();
                        let db: Vec<f32> = g
                            .iter()
                            .zip(ad.iter().zip(bd))
                            .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                            .collect();
                        self.add_grad(b, db);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f32> = g.iter().map(|v| v * c).collect();
                    self.add_grad(x, dx);
                }
                Op::AddConst { x } => {
                    self.add_grad(x, g);
                }
                Op::Gelu { x } => {
                    let xd = self.values[x.0].data();
                    let dx = binary_map(&g, xd, |gv, xv| gv * math::gelu_grad(xv));
                    self.add_grad(x, dx);
                }
                Op::Softmax { x, axis } => {
                    let shape = self.shape(Val(i)).to_vec();
                    let dx =
                        math::softmax_backward(self.values[i].data(), &g, &shape, axis);
                    self.add_grad(x, dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    self.layer_norm_backward(x, gamma, beta, eps, &g);
                }
                Op::InstanceNorm { x, gamma, beta, eps } => {
                    self.instance_norm_backward(x, gamma, beta, eps, &g);
                }
                Op::Linear { x, w, b } => {
                    let k = self.shape(w)[0];
                    let n_out = self.shape(w)[1];
                    let m = self.values[x.0].numel() / k;
                    if self.needs(x) {
                        let mut dx = vec![0.0f32; m * k];
                        math::gemm(
                            &mut dx,
                            &g,
                            self.values[w.0].data(),
                            m,
                            k,
                            n_out,
                            false,
                            true,
                            false,
                        );
                        self.add_grad(x, dx);
                    }
                    if self.needs(w) {
                        let mut dw = vec![0.0f32; k * n_out];
                        math::gemm(
                            &mut dw,
                            self.values[x.0].data(),
                            &g,
                            k,
                            n_out,
                            m,
                            true,
                            false,
                            false,
                        );
                        self.add_grad(w, dw);
                    }
                    if let Some(bv) = b {
                        if self.needs(bv) {
                            let mut db = vec![0.0f64; n_out];
                            for row in g.chunks_exact(n_out) {
                                for (acc, &gv) in db.iter_mut().zip(row) {
                                    *acc += gv as f64;
                                }
                            }
                            self.add_grad(bv, db.into_iter().map(|v| v as f32).collect());
                        }
                    }
                }
                Op::Bmm { a, b, ta, tb, dims } => {
                    let [batch, m, n, k] = dims;
                    if self.needs(a) {
                        let mut da = vec![0.0f32; self.values[a.0].numel()];
                        if !ta {
                            math::bmm(
                                &mut da,
                                &g,
                                self.values[b.0].data(),
                                batch,
                                m,
                                k,
                                n,
                                false,
                                !tb,
                                false,
                            );
                        } else {
                            math::bmm(
                                &mut da,
                                self.values[b.0].data(),
                                &g,
                                batch,
                                k,
                                m,
                                n,
                                tb,
                                true,
                                false,
                            );
                        }
                        self.add_grad(a, da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0f32; self.values[b.0].numel()];
                        if !tb {
                            math::bmm(
                                &mut db,
                                self.values[a.0].data(),
                                &g,
                                batch,
                                k,
                                n,
                                m,
                                !ta,
                                false,
                                false,
                            );
                        } else {
                            math::bmm(
                                &mut db,
                                &g,
                                self.values[a.0].data(),
                                batch,
                                n,
                                k,
                                m,
                                true,
                                ta,
                                false,
                            );
                        }
                        self.add_grad(b, db);
                    }
                }
                Op::Conv3d { x, w, b, spec } => {
                    let out_shape = self.shape(Val(i)).to_vec();
                    let in_shape = self.shape(x).to_vec();
                    let w_shape = self.shape(w).to_vec();
                    if self.needs(x) {
                        let dx = conv3d_backward_input(
                            &g,
                            &out_shape,
                            self.values[w.0].data(),
                            &w_shape,
                            &in_shape,
                            &spec,
                        );
                        self.add_grad(x, dx);
                    }
                    let want_bias = b.map_or(false, |bv| self.needs(bv));
                    if self.needs(w) || want_bias {
                        let (dw, dbias) = conv3d_backward_weight(
                            self.values[x.0].data(),
                            &in_shape,
                            &g,
                            &out_shape,
                            &w_shape,
                            &spec,
                            want_bias,
                        );
                        if self.needs(w) {
                            self.add_grad(w, dw);
                        }
                        if let (Some(bv), Some(db)) = (b, dbias) {
                            self.add_grad(bv, db);
                        }
                    }
                }
                Op::ConvTranspose { x, w, b } => {
                    let in_shape = self.shape(x).to_vec();
                    let cout = self.shape(w)[1];
                    if self.needs(x) {
                        let dx = conv_transpose2_backward_input(
                            &g,
                            &in_shape,
                            self.values[w.0].data(),
                            cout,
                        );
                        self.add_grad(x, dx);
                    }
                    let want_bias = b.map_or(false, |bv| self.needs(bv));
                    if self.needs(w) || want_bias {
                        let (dw, dbias) = conv_transpose2_backward_weight(
                            self.values[x.0].data(),
                            &in_shape,
                            &g,
                            cout,
                            want_bias,
                        );
                        if self.needs(w) {
                            self.add_grad(w, dw);
                        }
                        if let (Some(bv), Some(db)) = (b, dbias) {
                            self.add_grad(bv, db);
                        }
                    }
                }
                Op::GatherRows { x, mapping, row_len } => {
                    let mut dx = vec![0.0f32; self.values[x.0].numel()];
                    for (j, &src) in mapping.iter().enumerate() {
                        if src >= 0 {
                            let s = src as usize * row_len;
                            let gr = &g[j * row_len..(j + 1) * row_len];
                            for (d, gv) in dx[s..s + row_len].iter_mut().zip(gr) {
                                *d += gv;
                            }
                        }
                    }
                    self.add_grad(x, dx);
                }
                Op::TransposeLast2 { x } => {
                    let oshape = self.shape(Val(i)).to_vec();
                    let r = oshape.len();
                    let dx = transpose_batch(&g, oshape[r - 2], oshape[r - 1]);
                    self.add_grad(x, dx);
                }
                Op::Reshape { x } => {
                    self.add_grad(x, g);
                }
                Op::QkvSlice { x, which, heads } => {
                    let xs = self.shape(x).to_vec();
                    let c = xs[2] / 3;
                    let dh = c / heads;
                    let (bsz, t_len) = (xs[0], xs[1]);
                    let mut dx = vec![0.0f32; self.values[x.0].numel()];
                    for bi in 0..bsz {
                        for h in 0..heads {
                            for t in 0..t_len {
                                let dst = (bi * t_len + t) * 3 * c + which * c + h * dh;
                                let src = ((bi * heads + h) * t_len + t) * dh;
                                for (d, gv) in
                                    dx[dst..dst + dh].iter_mut().zip(&g[src..src + dh])
                                {
                                    *d += gv;
                                }
                            }
                        }
                    }
                    self.add_grad(x, dx);
                }
                Op::MergeHeads { x, heads } => {
                    let xs = self.shape(x).to_vec();
                    let (bsz, t_len, dh) = (xs[0] / heads, xs[1], xs[2]);
                    let c = heads * dh;
                    let mut dx = vec![0.0f32; self.values[x.0].numel()];
                    for bi in 0..bsz {
                        for h in 0..heads {
                            for t in 0..t_len {
                                let dst = ((bi * heads + h) * t_len + t) * dh;
                                let src = (bi * t_len + t) * c + h * dh;
                                dx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                            }
                        }
                    }
                    self.add_grad(x, dx);
                }
                Op::AddRelPosBias { x, table, index, heads } => {
                    if self.needs(table) {
                        let t_sq = index.len();
                        let mut dt = vec![0.0f32; self.values[table.0].numel()];
                        for (bh, chunk) in g.chunks_exact(t_sq).enumerate() {
                            let h = bh % heads;
                            for (i2, &gv) in chunk.iter().enumerate() {
                                dt[index[i2] as usize * heads + h] += gv;
                            }
                        }
                        self.add_grad(table, dt);
                    }
                    self.add_grad(x, g);
                }
                Op::AddWindowMask { x } => {
                    self.add_grad(x, g);
                }
                Op::SumAll { x } => {
                    let n = self.values[x.0].numel();
                    self.add_grad(x, vec![g[0]; n]);
                }
                Op::MeanAll { x } => {
                    let n = self.values[x.0].numel();
                    self.add_grad(x, vec![g[0] / n as f32; n]);
                }
                Op::SumPerChannel { x } => {
                    let xs = self.shape(x).to_vec();
                    let (n, c) = (xs[0], xs[1]);
                    let rest: usize = xs[2..].iter().product();
                    let mut dx = vec![0.0f32; self.values[x.0].numel()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * rest;
                            dx[base..base + rest].fill(g[ci]);
                        }
                    }
                    self.add_grad(x, dx);
                }
                Op::ConcatChannels { a, b } => {
                    let as_ = self.shape(a).to_vec();
                    let bs = self.shape(b).to_vec();
                    let (n, ca, cb) = (as_[0], as_[1], bs[1]);
                    let spatial: usize = as_[2..].iter().product();
                    if self.needs(a) {
                        let mut da = vec![0.0f32; self.values[a.0].numel()];
                        for ni in 0..n {
                            let src = ni * (ca + cb) * spatial;
                            da[ni * ca * spatial..(ni + 1) * ca * spatial]
                                .copy_from_slice(&g[src..src + ca * spatial]);
                        }
                        self.add_grad(a, da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0f32; self.values[b.0].numel()];
                        for ni in 0..n {
                            let src = ni * (ca + cb) * spatial + ca * spatial;
                            db[ni * cb * spatial..(ni + 1) * cb * spatial]
                                .copy_from_slice(&g[src..src + cb * spatial]);
                        }
                        self.add_grad(b, db);
                    }
                }
            }
        }
        Ok(())
    }

    fn layer_norm_backward(&mut self, x: Val, gamma: Val, beta: Val, eps: f32, g: &[f32]) {
        let c = *self.shape(x).last().unwrap();
        let xd = self.values[x.0].data();
        let gd = self.values[gamma.0].data();
        let mut dx = vec![0.0f32; xd.len()];
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        let mut dxhat = vec![0.0f32; c];
        for ((lane, g_lane), dx_lane) in xd
            .chunks_exact(c)
            .zip(g.chunks_exact(c))
            .zip(dx.chunks_exact_mut(c))
        {
            let (mean, inv_std) = math::mean_invstd(lane, eps);
            for j in 0..c {
                let xhat = (lane[j] - mean) * inv_std;
                dgamma[j] += (g_lane[j] * xhat) as f64;
                dbeta[j] += g_lane[j] as f64;
                dxhat[j] = g_lane[j] * gd[j];
            }
            math::norm_lane_backward(lane, &dxhat, mean, inv_std, dx_lane);
        }
        if self.needs(x) {
            self.add_grad(x, dx);
        }
        if self.needs(gamma) {
            self.add_grad(gamma, dgamma.into_iter().map(|v| v as f32).collect());
        }
        if self.needs(beta) {
            self.add_grad(beta, dbeta.into_iter().map(|v| v as f32).collect());
        }
    }

    fn instance_norm_backward(&mut self, x: Val, gamma: Val, beta: Val, eps: f32, g: &[f32]) {
        let shape = self.shape(x).to_vec();
        let c = shape[1];
        let spatial: usize = shape[2..].iter().product();
        let xd = self.values[x.0].data();
        let gd = self.values[gamma.0].data();
        let mut dx = vec![0.0f32; xd.len()];
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        let mut dxhat = vec![0.0f32; spatial];
        for (flat, ((lane, g_lane), dx_lane)) in xd
            .chunks_exact(spatial)
            .zip(g.chunks_exact(spatial))
            .zip(dx.chunks_exact_mut(spatial))
            .enumerate()
        {
            let ci = flat % c;
            let (mean, inv_std) = math::mean_invstd(lane, eps);
            let gamma_c = gd[ci];
            let mut acc_g = 0.0f64;
            let mut acc_gx = 0.0f64;
            for j in 0..spatial {
                let xhat = (lane[j] - mean) * inv_std;
                acc_gx += (g_lane[j] * xhat) as f64;
                acc_g += g_lane[j] as f64;
                dxhat[j] = g_lane[j] * gamma_c;
            }
            dgamma[ci] += acc_gx;
            dbeta[ci] += acc_g;
            math::norm_lane_backward(lane, &dxhat, mean, inv_std, dx_lane);
        }
        if self.needs(x) {
            self.add_grad(x, dx);
        }
        if self.needs(gamma) {
            self.add_grad(gamma, dgamma.into_iter().map(|v| v as f32).collect());
        }
        if self.needs(beta) {
            self.add_grad(beta, dbeta.into_iter().map(|v| v as f32).collect());
        }
    }
}

fn unary_map(x: &[f32], f: impl Fn(f32) -> f32 + Sync) -> Vec<f32> {
    if x.len() < 65_536 {
        x.iter().map(|&v| f(v)).collect()
    } else {
        x.par_iter().map(|&v| f(v)).collect()
    }
}

fn binary_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32 + Sync) -> Vec<f32> {
    debug_assert_eq!(a.len(), b.len());
    if a.len() < 65_536 {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.par_iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    }
}

/// Transposes the trailing `[a, b]` matrix of every leading batch.
fn transpose_batch(data: &[f32], a: usize, b: usize) -> Vec<f32> {
    let mat = a * b;
    let mut out = vec![0.0f32; data.len()];
    for (chunk, o_chunk) in data.chunks_exact(mat).zip(out.chunks_exact_mut(mat)) {
        for i in 0..a {
            for j in 0..b {
                o_chunk[j * a + i] = chunk[i * b + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn layer_norm_constant_input_yields_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[1, 4], vec![3.0; 4]));
        let gamma = tape.constant(Tensor::full(&[4], 1.0));
        let beta = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn layer_norm_two_point_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[1, 2], vec![1.0, 3.0]));
        let gamma = tape.constant(Tensor::full(&[2], 1.0));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-4, "{out:?}");
        assert!((out[1] - 1.0).abs() < 1e-4, "{out:?}");
    }

    #[test]
    fn instance_norm_is_shift_invariant_per_channel() {
        let mut tape = Tape::new();
        let pattern: Vec<f32> = (0..8).map(|i| i as f32 * 0.25).collect();
        let mut data = pattern.clone();
        data.extend(pattern.iter().map(|v| v + 5.0));
        let x = tape.leaf(tensor(&[1, 2, 2, 2, 2], data));
        let gamma = tape.constant(Tensor::full(&[2], 1.0));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let y = tape.instance_norm(x, gamma, beta, 1e-5).unwrap();
        let out = tape.value(y).data();
        for j in 0..8 {
            assert!((out[j] - out[8 + j]).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2, 2], vec![0.0; 4]));
        let err = tape.softmax(x, 2).unwrap_err();
        assert!(matches!(err, TensorError::Axis { axis: 2, rank: 2 }));
    }

    #[test]
    fn softmax_overflow_guard() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[1, 2], vec![0.0, 1000.0]));
        let y = tape.softmax(x, 1).unwrap();
        let out = tape.value(y).data();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] + out[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn linear_identity_weight_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.constant(Tensor::from_fn(&[3, 3], |i| {
            if i / 3 == i % 3 {
                1.0
            } else {
                0.0
            }
        }));
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn gather_rows_round_trip_is_exact() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let perm = Arc::new(vec![2i64, 0, 3, 1]);
        let inv = Arc::new(vec![1i64, 3, 0, 2]);
        let y = tape.gather_rows(x, perm, 2, vec![4, 2]).unwrap();
        let z = tape.gather_rows(y, inv, 2, vec![4, 2]).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());
    }

    #[test]
    fn backward_through_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[3], vec![1.0, -2.0, 0.5]).requires_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g, &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2], vec![1.0, 2.0]).requires_grad());
        let y = tape.mul(x, x).unwrap();
        assert!(tape.backward(y).is_err());
    }
}
