use std::collections::HashMap;

use crate::error::{shape_err, NnError, Result};
use crate::linalg::gemm;
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Pad2d {
        x: Var,
        pads: [usize; 4],
    },
    MeanPool2d {
        x: Var,
        k: usize,
    },
    Reshape(Var),
    Concat(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    PermuteCols {
        x: Var,
        perm: Vec<usize>,
    },
    GroupMean {
        x: Var,
        groups: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Mse {
        pred: Var,
        target: Var,
    },
    LogSumExp(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needs one.
pub struct Grads {
    nodes: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Vec<f64>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter, summed over every place it entered the graph.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => shape_err(op, format!("expected a 2-D tensor, got {s:?}")),
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => shape_err(op, format!("expected a 4-D tensor, got {s:?}")),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient (data, masks, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Param(id), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `x [B, in] * w [in, out] + b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, fin) = dims2("dense", self.value(x))?;
        let (win, fout) = dims2("dense", self.value(w))?;
        if win != fin {
            return shape_err("dense", format!("input width {fin} vs weight rows {win}"));
        }
        if self.value(b).shape() != [fout] {
            return shape_err(
                "dense",
                format!("bias {:?} vs output width {fout}", self.value(b).shape()),
            );
        }
        let mut out = vec![0.0; batch * fout];
        gemm(
            batch,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            0.0,
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(fout) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let ng = self.grad_any(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![batch, fout], out)?, Op::Dense { x, w, b }, ng))
    }

    /// Valid 2-D convolution: `x [B, C, H, W]`, `w [O, C, k, k]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let [batch, channels, height, width] = dims4("conv2d", self.value(x))?;
        let [outc, wc, k1, k2] = dims4("conv2d", self.value(w))?;
        if wc != channels || k1 != k2 || k1 == 0 {
            return shape_err(
                "conv2d",
                format!(
                    "input {:?} incompatible with kernel {:?}",
                    self.value(x).shape(),
                    self.value(w).shape()
                ),
            );
        }
        if self.value(b).shape() != [outc] {
            return shape_err("conv2d", format!("bias must have {outc} entries"));
        }
        if stride == 0 || height < k1 || width < k1 {
            return shape_err(
                "conv2d",
                format!("kernel {k1} stride {stride} does not fit a {height}x{width} input"),
            );
        }
        let geom = ConvGeom {
            batch,
            channels,
            height,
            width,
            kernel: k1,
            stride,
            out_h: (height - k1) / stride + 1,
            out_w: (width - k1) / stride + 1,
        };
        let (patch, pos) = (geom.patch(), geom.positions());
        let wide = batch * pos;
        let xs = self.value(x).data();
        let img = channels * height * width;
        // Columns of every image side by side: `[patch, batch * pos]`.
        let mut cols = vec![0.0; patch * wide];
        for bi in 0..batch {
            im2col(&geom, &xs[bi * img..(bi + 1) * img], &mut cols, wide, bi * pos);
        }
        let mut prod = vec![0.0; outc * wide];
        gemm(
            outc,
            patch,
            wide,
            self.value(w).data(),
            false,
            &cols,
            false,
            0.0,
            &mut prod,
        );
        let bias = self.value(b).data();
        let mut out = vec![0.0; batch * outc * pos];
        for bi in 0..batch {
            for oc in 0..outc {
                let src = &prod[oc * wide + bi * pos..][..pos];
                let dst = &mut out[(bi * outc + oc) * pos..][..pos];
                dst.iter_mut().zip(src).for_each(|(d, v)| *d = v + bias[oc]);
            }
        }
        let ng = self.grad_any(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![batch, outc, geom.out_h, geom.out_w], out)?,
            Op::Conv2d { x, w, b, geom, cols },
            ng,
        ))
    }

    /// Zero padding of the two spatial axes, `pads = [top, bottom, left, right]`.
    pub fn pad2d(&mut self, x: Var, pads: [usize; 4]) -> Result<Var> {
        let [b, c, h, w] = dims4("pad2d", self.value(x))?;
        let (nh, nw) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
        let xs = self.value(x).data();
        let mut out = vec![0.0; b * c * nh * nw];
        for plane in 0..b * c {
            for y in 0..h {
                let src = &xs[(plane * h + y) * w..(plane * h + y + 1) * w];
                let dst = (plane * nh + y + pads[0]) * nw + pads[2];
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        let ng = self.grad_any(&[x]);
        Ok(self.push(Tensor::new(vec![b, c, nh, nw], out)?, Op::Pad2d { x, pads }, ng))
    }

    /// Non-overlapping `k x k` average pooling; trailing rows/columns that do
    /// not fill a window are dropped.
    pub fn mean_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [b, c, h, w] = dims4("mean_pool2d", self.value(x))?;
        if k == 0 || h < k || w < k {
            return shape_err("mean_pool2d", format!("window {k} on a {h}x{w} input"));
        }
        let (oh, ow) = (h / k, w / k);
        let xs = self.value(x).data();
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        let base = (plane * h + oy * k + dy) * w + ox * k;
                        s += xs[base..base + k].iter().sum::<f64>();
                    }
                    out[(plane * oh + oy) * ow + ox] = s * norm;
                }
            }
        }
        let ng = self.grad_any(&[x]);
        Ok(self.push(Tensor::new(vec![b, c, oh, ow], out)?, Op::MeanPool2d { x, k }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.grad_any(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let b = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, vec![b, rest])
    }

    /// Column-wise concatenation of two `[B, _]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = dims2("concat", self.value(a))?;
        let (rb, cb) = dims2("concat", self.value(b))?;
        if ra != rb {
            return shape_err("concat", format!("row counts {ra} and {rb} differ"));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&xa[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&xb[r * cb..(r + 1) * cb]);
        }
        let ng = self.grad_any(&[a, b]);
        Ok(self.push(Tensor::new(vec![ra, ca + cb], out)?, Op::Concat(a, b), ng))
    }

    /// Columns `start..end` of a `[B, F]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_cols", self.value(x))?;
        if start >= end || end > c {
            return shape_err("slice_cols", format!("range {start}..{end} of {c} columns"));
        }
        let xs = self.value(x).data();
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in xs.chunks_exact(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let ng = self.grad_any(&[x]);
        Ok(self.push(Tensor::new(vec![r, w], out)?, Op::SliceCols { x, start }, ng))
    }

    /// `out[:, j] = x[:, perm[j]]`.
    pub fn permute_cols(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (r, c) = dims2("permute_cols", self.value(x))?;
        let mut seen = vec![false; c];
        if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute_cols", format!("{perm:?} is not a permutation of {c}"));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(r * c);
        for row in xs.chunks_exact(c) {
            out.extend(perm.iter().map(|&p| row[p]));
        }
        let ng = self.grad_any(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::PermuteCols { x, perm: perm.to_vec() },
            ng,
        ))
    }

    /// Averages consecutive groups of `groups` rows: `[B * G, F] -> [B, F]`.
    ///
    /// Each output is summed over its group in ascending value order, so the
    /// result is bit-identical under any reordering of rows within a group.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (r, c) = dims2("group_mean", self.value(x))?;
        if groups == 0 || r % groups != 0 {
            return shape_err("group_mean", format!("{r} rows in groups of {groups}"));
        }
        let b = r / groups;
        let xs = self.value(x).data();
        let mut out = vec![0.0; b * c];
        let mut buf = vec![0.0; groups];
        for bi in 0..b {
            for f in 0..c {
                for (g, slot) in buf.iter_mut().enumerate() {
                    *slot = xs[(bi * groups + g) * c + f];
                }
                buf.sort_by(f64::total_cmp);
                out[bi * c + f] = buf.iter().sum::<f64>() / groups as f64;
            }
        }
        let ng = self.grad_any(&[x]);
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::GroupMean { x, groups }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.grad_any(&[a, b]);
        self.push(t, op, ng)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let ng = self.grad_any(&[x]);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.grad_any(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let ng = self.grad_any(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// `[B, F] -> [B, 1]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("row_sum", self.value(x))?;
        let out = self
            .value(x)
            .data()
            .chunks_exact(c.max(1))
            .map(|row| row.iter().sum())
            .collect();
        let ng = self.grad_any(&[x]);
        Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::RowSum(x), ng))
    }

    /// Mean over rows of the squared Euclidean error: `(1/B) sum_b |p_b - t_b|^2`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (b, _) = dims2("mse", self.value(pred))?;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let ng = self.grad_any(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / b.max(1) as f64), Op::Mse { pred, target }, ng))
    }

    /// Row-wise log-sum-exp, `[B, K] -> [B, 1]`.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("logsumexp", self.value(x))?;
        if c == 0 {
            return shape_err("logsumexp", "empty rows");
        }
        let out = self
            .value(x)
            .data()
            .chunks_exact(c)
            .map(|row| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return m;
                }
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let ng = self.grad_any(&[x]);
        Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::LogSumExp(x), ng))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: HashMap<ParamId, Vec<f64>> = HashMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                match params.get_mut(id) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
                    None => {
                        params.insert(*id, g.clone());
                    }
                }
            }
        }
        Ok(Grads { nodes: grads, params })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        // Lazily allocates the parent's gradient; skipped for constants.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Dense { x, w, b } => {
                let (batch, fin) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let fout = self.value(*w).shape()[1];
                acc(*x, &mut |dx| gemm(batch, fout, fin, g, false, val(*w), true, 1.0, dx));
                acc(*w, &mut |dw| gemm(fin, batch, fout, val(*x), true, g, false, 1.0, dw));
                acc(*b, &mut |db| {
                    for row in g.chunks_exact(fout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (patch, pos) = (geom.patch(), geom.positions());
                let wide = geom.batch * pos;
                let outc = self.value(*w).shape()[0];
                // Output gradient regrouped as `[outc, batch * pos]`.
                let mut gw = vec![0.0; outc * wide];
                for bi in 0..geom.batch {
                    for oc in 0..outc {
                        gw[oc * wide + bi * pos..][..pos].copy_from_slice(&g[(bi * outc + oc) * pos..][..pos]);
                    }
                }
                acc(*w, &mut |dw| gemm(outc, wide, patch, &gw, false, cols, true, 1.0, dw));
                acc(*b, &mut |db| {
                    for (oc, row) in gw.chunks_exact(wide).enumerate() {
                        db[oc] += row.iter().sum::<f64>();
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dcol = vec![0.0; patch * wide];
                    gemm(patch, outc, wide, val(*w), true, &gw, false, 0.0, &mut dcol);
                    let img = geom.channels * geom.height * geom.width;
                    for bi in 0..geom.batch {
                        col2im(geom, &dcol, wide, bi * pos, &mut dx[bi * img..(bi + 1) * img]);
                    }
                });
            }
            Op::Pad2d { x, pads } => {
                let [_, _, h, w] = dims4("pad2d", self.value(*x)).unwrap();
                let [b, c, nh, nw] = dims4("pad2d", &node.value).unwrap();
                acc(*x, &mut |dx| {
                    for plane in 0..b * c {
                        for y in 0..h {
                            let src = (plane * nh + y + pads[0]) * nw + pads[2];
                            let dst = &mut dx[(plane * h + y) * w..(plane * h + y + 1) * w];
                            dst.iter_mut().zip(&g[src..src + w]).for_each(|(d, v)| *d += v);
                        }
                    }
                });
            }
            Op::MeanPool2d { x, k } => {
                let [b, c, h, w] = dims4("mean_pool2d", self.value(*x)).unwrap();
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                acc(*x, &mut |dx| {
                    for plane in 0..b * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(plane * oh + oy) * ow + ox] * norm;
                                for dy in 0..*k {
                                    let base = (plane * h + oy * k + dy) * w + ox * k;
                                    dx[base..base + k].iter_mut().for_each(|d| *d += gv);
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, g)),
            Op::Concat(a, b) => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                acc(*a, &mut |da| {
                    for (d, row) in da.chunks_exact_mut(ca).zip(g.chunks_exact(ca + cb)) {
                        add_into(d, &row[..ca]);
                    }
                });
                acc(*b, &mut |db| {
                    for (d, row) in db.chunks_exact_mut(cb).zip(g.chunks_exact(ca + cb)) {
                        add_into(d, &row[ca..]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape()[1];
                let w = node.value.shape()[1];
                acc(*x, &mut |dx| {
                    for (d, row) in dx.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                        add_into(&mut d[*start..start + w], row);
                    }
                });
            }
            Op::PermuteCols { x, perm } => {
                let c = perm.len();
                acc(*x, &mut |dx| {
                    for (d, row) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for (j, &p) in perm.iter().enumerate() {
                            d[p] += row[j];
                        }
                    }
                });
            }
            Op::GroupMean { x, groups } => {
                let c = node.value.shape()[1];
                let inv = 1.0 / *groups as f64;
                acc(*x, &mut |dx| {
                    for (r, d) in dx.chunks_exact_mut(c).enumerate() {
                        let src = &g[(r / groups) * c..(r / groups + 1) * c];
                        d.iter_mut().zip(src).for_each(|(d, v)| *d += v * inv);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((d, v), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += v * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, v), x) in d.iter_mut().zip(g).zip(va) {
                        *d += v * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v * c)),
            Op::AddScalar(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((d, v), x) in d.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *d += v;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((d, v), y) in d.iter_mut().zip(g).zip(y) {
                        *d += v * (1.0 - y * y);
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((d, v), y) in d.iter_mut().zip(g).zip(y) {
                        *d += v * y;
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((d, v), x) in d.iter_mut().zip(g).zip(xv) {
                        *d += v / x;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::RowSum(x) => {
                let c = self.value(*x).shape()[1];
                acc(*x, &mut |d| {
                    for (row, v) in d.chunks_exact_mut(c.max(1)).zip(g) {
                        row.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            Op::Mse { pred, target } => {
                let b = self.value(*pred).shape()[0].max(1) as f64;
                let (p, t) = (val(*pred), val(*target));
                let scale = 2.0 * g[0] / b;
                acc(*pred, &mut |d| {
                    for ((d, p), t) in d.iter_mut().zip(p).zip(t) {
                        *d += scale * (p - t);
                    }
                });
                acc(*target, &mut |d| {
                    for ((d, p), t) in d.iter_mut().zip(p).zip(t) {
                        *d -= scale * (p - t);
                    }
                });
            }
            Op::LogSumExp(x) => {
                let c = self.value(*x).shape()[1];
                let xv = val(*x);
                let lse = node.value.data();
                acc(*x, &mut |d| {
                    for (r, (drow, xrow)) in d.chunks_exact_mut(c).zip(xv.chunks_exact(c)).enumerate() {
                        if lse[r] == f64::NEG_INFINITY {
                            continue;
                        }
                        for (d, x) in drow.iter_mut().zip(xrow) {
                            *d += g[r] * (x - lse[r]).exp();
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Writes the patches of one image into columns `offset..offset + pos` of a
/// row-major matrix with `ld` columns.
fn im2col(geom: &ConvGeom, img: &[f64], cols: &mut [f64], ld: usize, offset: usize) {
    let (k, s, pos) = (geom.kernel, geom.stride, geom.positions());
    for c in 0..geom.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * ld + offset..][..pos];
                for oy in 0..geom.out_h {
                    let src = (c * geom.height + oy * s + ky) * geom.width + kx;
                    let dst = &mut row[oy * geom.out_w..(oy + 1) * geom.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = img[src + ox * s];
                    }
                }
            }
        }
    }
}

/// Adds columns `offset..offset + pos` of a row-major matrix with `ld`
/// columns back onto the pixels of one image.
fn col2im(geom: &ConvGeom, cols: &[f64], ld: usize, offset: usize, img: &mut [f64]) {
    let (k, s, pos) = (geom.kernel, geom.stride, geom.positions());
    for c in 0..geom.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * ld + offset..][..pos];
                for oy in 0..geom.out_h {
                    let dst = (c * geom.height + oy * s + ky) * geom.width + kx;
                    let src = &row[oy * geom.out_w..(oy + 1) * geom.out_w];
                    for (ox, v) in src.iter().enumerate() {
                        img[dst + ox * s] += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        assert_eq!(gr.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let z = g.scale(x, 0.0);
        let s = g.sum(z);
        let gr = g.backward(s).unwrap();
        assert!(gr.wrt(x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 3]));
        let w = g.constant(Tensor::zeros(vec![4, 5]));
        let b = g.constant(Tensor::zeros(vec![5]));
        let err = g.dense(x, w, b).unwrap_err().to_string();
        assert!(err.contains("dense"), "{err}");
        let y = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(g.add(x, y).unwrap_err().to_string().contains("add"));
        let img = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let k = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let kb = g.constant(Tensor::zeros(vec![1]));
        assert!(g.conv2d(img, k, kb, 1).unwrap_err().to_string().contains("conv2d"));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn group_mean_is_order_independent() {
        let rows = [[0.1, 1e16], [0.2, -1e16], [0.3, 1.0]];
        let perm = [[0.3, 1.0], [0.1, 1e16], [0.2, -1e16]];
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&rows).unwrap());
        let b = g.constant(Tensor::from_rows(&perm).unwrap());
        let ma = g.group_mean(a, 3).unwrap();
        let mb = g.group_mean(b, 3).unwrap();
        assert_eq!(g.value(ma).data(), g.value(mb).data());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut g = Graph::new();
        let xs: Vec<f64> = (0..2 * 5 * 6).map(|v| (v as f64 * 0.37).sin()).collect();
        let ws: Vec<f64> = (0..3 * 2 * 9).map(|v| (v as f64 * 0.11).cos()).collect();
        let x = g.constant(Tensor::new(vec![1, 2, 5, 6], xs.clone()).unwrap());
        let w = g.constant(Tensor::new(vec![3, 2, 3, 3], ws.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![3], vec![0.5, -1.0, 0.0]).unwrap());
        let y = g.conv2d(x, w, b, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 2, 2]);
        for o in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut s = [0.5, -1.0, 0.0][o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s += ws[((o * 2 + c) * 3 + ky) * 3 + kx] * xs[(c * 5 + oy * 2 + ky) * 6 + ox * 2 + kx];
                            }
                        }
                    }
                    let got = g.value(y).data()[(o * 2 + oy) * 2 + ox];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }
}
