//! Sequential layer graphs over a fixed layer vocabulary, with forward
//! evaluation and reverse-mode gradients.
//!
//! Image tensors are NHWC (`[batch, height, width, channels]`). Dense layers
//! act on the last axis and treat all leading axes as rows, so a dense layer
//! applied to `[N, 5, 5, D]` maps each of the 25 spatial vectors with shared
//! weights.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3 convolution, stride 1, edge-replicate padding 1 (a constant
    /// input stays constant up to the border).
    Conv3x3 { in_ch: usize, out_ch: usize },
    /// Non-overlapping max pooling with a square window.
    MaxPool { window: usize },
    Dense { fan_in: usize, fan_out: usize },
    Relu,
    /// Softmax over the last axis.
    Softmax,
    /// Flatten everything after the batch axis.
    Concat,
    /// Average over every axis between the batch axis and the last one.
    MeanPool,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv3x3 { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    /// Parameter path prefix, e.g. `encoder.conv1`.
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self.kind {
            LayerKind::Conv3x3 { in_ch, out_ch } => match input {
                &[n, h, w, c] if c == in_ch => Ok(vec![n, h, w, out_ch]),
                _ => Err(format!("conv3x3 expects [N,H,W,{in_ch}], got {input:?}")),
            },
            LayerKind::MaxPool { window } => match input {
                &[n, h, w, c] if window > 0 && h % window == 0 && w % window == 0 => {
                    Ok(vec![n, h / window, w / window, c])
                }
                _ => Err(format!("maxpool{window} cannot tile {input:?}")),
            },
            LayerKind::Dense { fan_in, fan_out } => match input.split_last() {
                Some((&last, lead)) if !lead.is_empty() && last == fan_in => {
                    let mut s = lead.to_vec();
                    s.push(fan_out);
                    Ok(s)
                }
                _ => Err(format!("dense expects [..,{fan_in}], got {input:?}")),
            },
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Softmax => {
                if input.len() >= 2 {
                    Ok(input.to_vec())
                } else {
                    Err(format!("softmax expects [N,..,C], got {input:?}"))
                }
            }
            LayerKind::Concat => {
                if input.len() >= 2 {
                    Ok(vec![input[0], input[1..].iter().product()])
                } else {
                    Err(format!("concat expects rank >= 2, got {input:?}"))
                }
            }
            LayerKind::MeanPool => {
                if input.len() >= 3 {
                    Ok(vec![input[0], input[input.len() - 1]])
                } else {
                    Err(format!("mean-pool expects rank >= 3, got {input:?}"))
                }
            }
        }
    }
}

/// Inputs of every layer plus the final output: `acts[k]` feeds layer `k`.
#[derive(Debug, Clone)]
pub struct Activations(pub Vec<Tensor>);

impl Activations {
    pub fn output(&self) -> &Tensor {
        self.0.last().expect("activations always hold the input")
    }

    pub fn into_output(mut self) -> Tensor {
        self.0.pop().expect("activations always hold the input")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Graph {
    layers: Vec<LayerSpec>,
}

impl Graph {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Graph { layers }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn push(&mut self, layer: LayerSpec) {
        self.layers.push(layer);
    }

    /// Propagate a shape through the graph, reporting the first layer that
    /// cannot accept its input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            shape = l
                .output_shape(&shape)
                .map_err(|msg| Error::Graph { layer: i, msg })?;
        }
        Ok(shape)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        for l in &self.layers {
            match l.kind {
                LayerKind::Conv3x3 { in_ch, out_ch } => {
                    store.insert_glorot(l.weight_path(), &[3, 3, in_ch, out_ch], 9 * in_ch, 9 * out_ch, rng);
                    store.insert(l.bias_path(), Tensor::zeros(&[out_ch]));
                }
                LayerKind::Dense { fan_in, fan_out } => {
                    store.insert_glorot(l.weight_path(), &[fan_in, fan_out], fan_in, fan_out, rng);
                    store.insert(l.bias_path(), Tensor::zeros(&[fan_out]));
                }
                _ => {}
            }
        }
    }

    pub fn forward(&self, params: &ParamStore, input: Tensor) -> Result<Activations> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        for (i, l) in self.layers.iter().enumerate() {
            let x = acts.last().expect("nonempty");
            let out_shape = l
                .output_shape(x.shape())
                .map_err(|msg| Error::Graph { layer: i, msg })?;
            let y = match l.kind {
                LayerKind::Conv3x3 { .. } => conv_forward(
                    x,
                    params.value(&l.weight_path())?,
                    params.value(&l.bias_path())?,
                    &out_shape,
                ),
                LayerKind::MaxPool { window } => maxpool_forward(x, window, &out_shape),
                LayerKind::Dense { .. } => dense_forward(
                    x,
                    params.value(&l.weight_path())?,
                    params.value(&l.bias_path())?,
                    &out_shape,
                ),
                LayerKind::Relu => {
                    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
                    Tensor::from_vec(&out_shape, data)?
                }
                LayerKind::Softmax => softmax_forward(x),
                LayerKind::Concat => x.clone().reshape(&out_shape)?,
                LayerKind::MeanPool => meanpool_forward(x, &out_shape),
            };
            acts.push(y);
        }
        Ok(Activations(acts))
    }

    /// Backpropagate `grad_out` (∂loss/∂output), adding parameter gradients
    /// into `params`. Returns ∂loss/∂input when `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &mut ParamStore,
        acts: &Activations,
        grad_out: Tensor,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        if acts.0.len() != self.layers.len() + 1 {
            return Err(Error::State(format!(
                "expected {} activations, got {}",
                self.layers.len() + 1,
                acts.0.len()
            )));
        }
        if grad_out.shape() != acts.output().shape() {
            return Err(Error::State(format!(
                "output gradient shape {:?} does not match output {:?}",
                grad_out.shape(),
                acts.output().shape()
            )));
        }
        let mut g = grad_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let x = &acts.0[i];
            let y = &acts.0[i + 1];
            let want_input = i > 0 || need_input_grad;
            g = match l.kind {
                LayerKind::Conv3x3 { .. } => {
                    let (wp, bp) = (l.weight_path(), l.bias_path());
                    let frozen = params.get(&wp)?.frozen;
                    let kernel = params.value(&wp)?.clone();
                    let (dk, db, dx) = conv_backward(x, &kernel, &g, !frozen, want_input);
                    if let (Some(dk), Some(db)) = (dk, db) {
                        params.get_mut(&wp)?.grad.add_assign(&dk);
                        params.get_mut(&bp)?.grad.add_assign(&db);
                    }
                    match dx {
                        Some(dx) => dx,
                        None => return Ok(None),
                    }
                }
                LayerKind::Dense { .. } => {
                    let (wp, bp) = (l.weight_path(), l.bias_path());
                    let frozen = params.get(&wp)?.frozen;
                    let weight = params.value(&wp)?.clone();
                    let (dw, db, dx) = dense_backward(x, &weight, &g, !frozen, want_input);
                    if let (Some(dw), Some(db)) = (dw, db) {
                        params.get_mut(&wp)?.grad.add_assign(&dw);
                        params.get_mut(&bp)?.grad.add_assign(&db);
                    }
                    match dx {
                        Some(dx) => dx,
                        None => return Ok(None),
                    }
                }
                _ if !want_input => return Ok(None),
                LayerKind::MaxPool { window } => maxpool_backward(x, window, &g),
                LayerKind::Relu => {
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    Tensor::from_vec(x.shape(), data)?
                }
                LayerKind::Softmax => softmax_backward(y, &g),
                LayerKind::Concat => g.reshape(x.shape())?,
                LayerKind::MeanPool => meanpool_backward(x, &g),
            };
        }
        Ok(if need_input_grad { Some(g) } else { None })
    }
}

/// C (m×n) = beta·C + op(A)·op(B), all row-major; `ta`/`tb` transpose the
/// stored operand (A stored k×m when `ta`, B stored n×k when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the stated dimensions and strides, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn im2col(x: &Tensor) -> Vec<f64> {
    let &[n, h, w, c] = x.shape() else { unreachable!("checked by output_shape") };
    let cols = 9 * c;
    let mut patches = vec![0.0; n * h * w * cols];
    let xd = x.data();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * cols;
                for ky in 0..3 {
                    let sy = (y + ky).saturating_sub(1).min(h - 1);
                    for kx in 0..3 {
                        let sx = (xx + kx).saturating_sub(1).min(w - 1);
                        let src = ((b * h + sy) * w + sx) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        patches[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    patches
}

fn col2im(patches: &[f64], shape: &[usize]) -> Tensor {
    let &[n, h, w, c] = shape else { unreachable!() };
    let cols = 9 * c;
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * cols;
                for ky in 0..3 {
                    let sy = (y + ky).saturating_sub(1).min(h - 1);
                    for kx in 0..3 {
                        let sx = (xx + kx).saturating_sub(1).min(w - 1);
                        let dst = ((b * h + sy) * w + sx) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for (o, p) in od[dst..dst + c].iter_mut().zip(&patches[src..src + c]) {
                            *o += p;
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn column_sums(g: &[f64], width: usize) -> Vec<f64> {
    let mut s = vec![0.0; width];
    for row in g.chunks_exact(width) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

fn conv_forward(x: &Tensor, kernel: &Tensor, bias: &Tensor, out_shape: &[usize]) -> Tensor {
    let patches = im2col(x);
    let cin9 = kernel.shape()[0] * kernel.shape()[1] * kernel.shape()[2];
    let cout = kernel.shape()[3];
    let rows = patches.len() / cin9;
    let mut out = Tensor::zeros(out_shape);
    gemm(rows, cin9, cout, &patches, false, kernel.data(), false, 0.0, out.data_mut());
    add_bias(out.data_mut(), bias.data());
    out
}

type ParamGrads = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

fn conv_backward(x: &Tensor, kernel: &Tensor, g: &Tensor, want_params: bool, want_input: bool) -> ParamGrads {
    let cin9 = kernel.len() / kernel.shape()[3];
    let cout = kernel.shape()[3];
    let rows = g.len() / cout;
    let (mut dk, mut db) = (None, None);
    if want_params {
        let patches = im2col(x);
        let mut k = Tensor::zeros(kernel.shape());
        gemm(cin9, rows, cout, &patches, true, g.data(), false, 0.0, k.data_mut());
        dk = Some(k);
        db = Some(Tensor::from_vec(&[cout], column_sums(g.data(), cout)).expect("sized"));
    }
    let dx = want_input.then(|| {
        let mut dp = vec![0.0; rows * cin9];
        gemm(rows, cout, cin9, g.data(), false, kernel.data(), true, 0.0, &mut dp);
        col2im(&dp, x.shape())
    });
    (dk, db, dx)
}

fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, out_shape: &[usize]) -> Tensor {
    let (fi, fo) = (weight.shape()[0], weight.shape()[1]);
    let rows = x.len() / fi;
    let mut out = Tensor::zeros(out_shape);
    gemm(rows, fi, fo, x.data(), false, weight.data(), false, 0.0, out.data_mut());
    add_bias(out.data_mut(), bias.data());
    out
}

fn dense_backward(x: &Tensor, weight: &Tensor, g: &Tensor, want_params: bool, want_input: bool) -> ParamGrads {
    let (fi, fo) = (weight.shape()[0], weight.shape()[1]);
    let rows = x.len() / fi;
    let (mut dw, mut db) = (None, None);
    if want_params {
        let mut w = Tensor::zeros(weight.shape());
        gemm(fi, rows, fo, x.data(), true, g.data(), false, 0.0, w.data_mut());
        dw = Some(w);
        db = Some(Tensor::from_vec(&[fo], column_sums(g.data(), fo)).expect("sized"));
    }
    let dx = want_input.then(|| {
        let mut d = Tensor::zeros(x.shape());
        gemm(rows, fo, fi, g.data(), false, weight.data(), true, 0.0, d.data_mut());
        d
    });
    (dw, db, dx)
}

fn maxpool_forward(x: &Tensor, k: usize, out_shape: &[usize]) -> Tensor {
    let &[n, h, w, c] = x.shape() else { unreachable!() };
    let (oh, ow) = (h / k, w / k);
    let mut out = Tensor::filled(out_shape, f64::NEG_INFINITY);
    let (xd, od) = (x.data(), out.data_mut());
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = ((b * h + y) * w + xx) * c;
                let dst = ((b * oh + y / k) * ow + xx / k) * c;
                for ch in 0..c {
                    if xd[src + ch] > od[dst + ch] {
                        od[dst + ch] = xd[src + ch];
                    }
                }
            }
        }
    }
    out
}

/// Routes each output gradient to the first maximal input of its window
/// (in row-major scan order).
fn maxpool_backward(x: &Tensor, k: usize, g: &Tensor) -> Tensor {
    let &[n, h, w, c] = x.shape() else { unreachable!() };
    let (oh, ow) = (h / k, w / k);
    let mut dx = Tensor::zeros(x.shape());
    let xd = x.data();
    let gd = g.data();
    let dd = dx.data_mut();
    for b in 0..n {
        for py in 0..oh {
            for px in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..k {
                        for dxi in 0..k {
                            let i = ((b * h + py * k + dy) * w + px * k + dxi) * c + ch;
                            if xd[i] > best {
                                best = xd[i];
                                at = i;
                            }
                        }
                    }
                    dd[at] += gd[((b * oh + py) * ow + px) * c + ch];
                }
            }
        }
    }
    dx
}

fn softmax_forward(x: &Tensor) -> Tensor {
    let width = *x.shape().last().expect("rank >= 2");
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(width) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let width = *y.shape().last().expect("rank >= 2");
    let mut dx = Tensor::zeros(y.shape());
    for ((d, p), gr) in dx
        .data_mut()
        .chunks_exact_mut(width)
        .zip(y.data().chunks_exact(width))
        .zip(g.data().chunks_exact(width))
    {
        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((di, pi), gi) in d.iter_mut().zip(p).zip(gr) {
            *di = pi * (gi - dot);
        }
    }
    dx
}

fn meanpool_forward(x: &Tensor, out_shape: &[usize]) -> Tensor {
    let n = x.shape()[0];
    let d = *x.shape().last().expect("rank >= 3");
    let r = x.len() / (n * d);
    let mut out = Tensor::zeros(out_shape);
    let od = out.data_mut();
    for b in 0..n {
        for v in x.row(b).chunks_exact(d) {
            for (o, a) in od[b * d..(b + 1) * d].iter_mut().zip(v) {
                *o += a;
            }
        }
        for o in od[b * d..(b + 1) * d].iter_mut() {
            *o /= r as f64;
        }
    }
    out
}

fn meanpool_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let d = *x.shape().last().expect("rank >= 3");
    let r = x.len() / (n * d);
    let mut dx = Tensor::zeros(x.shape());
    let row_len = x.row_len();
    let dd = dx.data_mut();
    for b in 0..n {
        let gr = g.row(b);
        for v in dd[b * row_len..(b + 1) * row_len].chunks_exact_mut(d) {
            for (o, gi) in v.iter_mut().zip(gr) {
                *o = gi / r as f64;
            }
        }
    }
    dx
}
