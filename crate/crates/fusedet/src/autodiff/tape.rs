//! Eager tensor operations recorded on a tape for reverse-mode differentiation.
//!
//! A [`Tape`] owns every node of one computation graph. [`Tensor`] is a cheap
//! handle (tape + node id). Ops execute eagerly and record what backward needs.
//! A tape is single-writer and confined to one thread; distinct tapes are
//! independent.

use std::cell::RefCell;
use std::rc::Rc;

use crate::autodiff::kernels::{self, BorderMode};
use crate::autodiff::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Maximum { a: usize, b: usize },
    Neg { a: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Powf { a: usize, c: f64 },
    Abs { a: usize },
    Matmul { a: usize, b: usize },
    Transpose2d { a: usize },
    Concat { inputs: Vec<usize> },
    Slice { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    GatherRows { a: usize, indices: Vec<usize> },
    ScatterToGrid { a: usize, positions: Vec<(usize, usize)> },
    Sigmoid { a: usize },
    Relu { a: usize },
    Softplus { a: usize },
    Sin { a: usize },
    Cos { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Clamp01 { a: usize },
    Softmax { a: usize, axis: usize },
    LayerNormLast { a: usize, eps: f64 },
    SumAll { a: usize },
    SumAxis { a: usize, axis: usize },
    BilinearSample { featmap: usize, coords: usize, border: BorderMode },
    Conv2d { input: usize, weight: usize, stride: usize, pad: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    /// Populated by `backward`; index-aligned with `nodes`.
    grads: Vec<Option<Vec<f64>>>,
    /// (node id, parameter name) pairs recorded by `param`.
    bindings: Vec<(usize, String)>,
}

/// One computation graph. Cloning shares the underlying tape.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            shape: shape.clone(),
            data,
            requires_grad,
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// Non-differentiable input.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::invalid(format!(
                "constant: data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, false))
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.push(Op::Leaf, vec![], vec![value], false)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::invalid(format!(
                "leaf: data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, true))
    }

    /// Differentiable leaf bound to a named parameter; `accumulate_param_grads`
    /// adds the leaf's gradient back into the store.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Tensor> {
        let p = store.get(name)?;
        let t = self.push(Op::Leaf, p.shape.clone(), p.data.clone(), true);
        self.inner
            .borrow_mut()
            .bindings
            .push((t.id, name.to_string()));
        Ok(t)
    }

    /// Reverse pass from a scalar loss. Gradients from any previous backward
    /// call on this tape are discarded, so repeated calls are bit-identical.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.same_tape(self) {
            return Err(Error::invalid("backward: loss from a different tape"));
        }
        if numel(&loss.shape) != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape
            )));
        }
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !inner.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            backward_op(&inner.nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        inner.grads = grads;
        Ok(())
    }

    /// Add every bound parameter's gradient into the store. No-op for
    /// parameters that did not participate in the graph.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        let inner = self.inner.borrow();
        for (id, name) in &inner.bindings {
            if let Some(Some(g)) = inner.grads.get(*id) {
                let p = store.get_mut(name)?;
                for (acc, &gv) in p.grad.iter_mut().zip(g) {
                    *acc += gv;
                }
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn add_to(grads: &mut [Option<Vec<f64>>], nodes: &[Node], idx: usize, contrib: &[f64]) {
    if !nodes[idx].requires_grad {
        return;
    }
    let buf = grad_buf(grads, idx, nodes[idx].data.len());
    for (acc, &c) in buf.iter_mut().zip(contrib) {
        *acc += c;
    }
}

/// Outer extent before `axis`, the axis extent, and inner extent after it.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

fn backward_op(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            for idx in [*a, *b] {
                let contrib = kernels::reduce_to_shape(g, &node.shape, &nodes[idx].shape);
                add_to(grads, nodes, idx, &contrib);
            }
        }
        Op::Sub { a, b } => {
            let ca = kernels::reduce_to_shape(g, &node.shape, &nodes[*a].shape);
            add_to(grads, nodes, *a, &ca);
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            let cb = kernels::reduce_to_shape(&neg, &node.shape, &nodes[*b].shape);
            add_to(grads, nodes, *b, &cb);
        }
        Op::Mul { a, b } => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            if na.requires_grad {
                let full = kernels::broadcast_apply(
                    g,
                    &node.shape,
                    &nb.data,
                    &nb.shape,
                    &node.shape,
                    |gv, bv| gv * bv,
                );
                let c = kernels::reduce_to_shape(&full, &node.shape, &na.shape);
                add_to(grads, nodes, *a, &c);
            }
            if nb.requires_grad {
                let full = kernels::broadcast_apply(
                    g,
                    &node.shape,
                    &na.data,
                    &na.shape,
                    &node.shape,
                    |gv, av| gv * av,
                );
                let c = kernels::reduce_to_shape(&full, &node.shape, &nb.shape);
                add_to(grads, nodes, *b, &c);
            }
        }
        Op::Div { a, b } => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            if na.requires_grad {
                let full = kernels::broadcast_apply(
                    g,
                    &node.shape,
                    &nb.data,
                    &nb.shape,
                    &node.shape,
                    |gv, bv| gv / bv,
                );
                let c = kernels::reduce_to_shape(&full, &node.shape, &na.shape);
                add_to(grads, nodes, *a, &c);
            }
            if nb.requires_grad {
                // -g * out / b  (out = a/b already computed)
                let tmp = kernels::broadcast_apply(
                    g,
                    &node.shape,
                    &node.data,
                    &node.shape,
                    &node.shape,
                    |gv, ov| gv * ov,
                );
                let full = kernels::broadcast_apply(
                    &tmp,
                    &node.shape,
                    &nb.data,
                    &nb.shape,
                    &node.shape,
                    |t, bv| -t / bv,
                );
                let c = kernels::reduce_to_shape(&full, &node.shape, &nb.shape);
                add_to(grads, nodes, *b, &c);
            }
        }
        Op::Maximum { a, b } => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            // ties route to the first operand
            let ca: Vec<f64> = g
                .iter()
                .zip(na.data.iter().zip(&nb.data))
                .map(|(&gv, (&av, &bv))| if av >= bv { gv } else { 0.0 })
                .collect();
            let cb: Vec<f64> = g
                .iter()
                .zip(na.data.iter().zip(&nb.data))
                .map(|(&gv, (&av, &bv))| if av >= bv { 0.0 } else { gv })
                .collect();
            add_to(grads, nodes, *a, &ca);
            add_to(grads, nodes, *b, &cb);
        }
        Op::Neg { a } => {
            let c: Vec<f64> = g.iter().map(|x| -x).collect();
            add_to(grads, nodes, *a, &c);
        }
        Op::Scale { a, c } => {
            let contrib: Vec<f64> = g.iter().map(|x| x * c).collect();
            add_to(grads, nodes, *a, &contrib);
        }
        Op::AddScalar { a } => {
            add_to(grads, nodes, *a, g);
        }
        Op::Powf { a, c } => {
            let na = &nodes[*a];
            let contrib: Vec<f64> = g
                .iter()
                .zip(&na.data)
                .map(|(&gv, &x)| gv * c * x.powf(c - 1.0))
                .collect();
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Abs { a } => {
            let na = &nodes[*a];
            let contrib: Vec<f64> = g
                .iter()
                .zip(&na.data)
                .map(|(&gv, &x)| gv * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                .collect();
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Matmul { a, b } => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let (m, k) = (na.shape[0], na.shape[1]);
            let n = nb.shape[1];
            if na.requires_grad {
                let bt = kernels::transpose(&nb.data, k, n);
                let da = kernels::matmul(g, &bt, m, n, k);
                add_to(grads, nodes, *a, &da);
            }
            if nb.requires_grad {
                let at = kernels::transpose(&na.data, m, k);
                let db = kernels::matmul(&at, g, k, m, n);
                add_to(grads, nodes, *b, &db);
            }
        }
        Op::Transpose2d { a } => {
            let (r, c) = (node.shape[0], node.shape[1]);
            // g has shape [r, c] = [cols, rows] of the input
            let contrib = kernels::transpose(g, r, c);
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Concat { inputs } => {
            let last = *node.shape.last().unwrap();
            let rows = node.data.len() / last;
            let mut offsets = Vec::with_capacity(inputs.len());
            let mut acc = 0usize;
            for &i in inputs {
                offsets.push(acc);
                acc += *nodes[i].shape.last().unwrap();
            }
            for (&i, &off) in inputs.iter().zip(&offsets) {
                if !nodes[i].requires_grad {
                    continue;
                }
                let seg = *nodes[i].shape.last().unwrap();
                let mut contrib = vec![0.0; nodes[i].data.len()];
                for r in 0..rows {
                    contrib[r * seg..(r + 1) * seg]
                        .copy_from_slice(&g[r * last + off..r * last + off + seg]);
                }
                add_to(grads, nodes, i, &contrib);
            }
        }
        Op::Slice { a, axis, start } => {
            let na = &nodes[*a];
            let (outer, lane_in, inner) = axis_split(&na.shape, *axis);
            let lane_out = node.shape[*axis];
            let mut contrib = vec![0.0; na.data.len()];
            for o in 0..outer {
                for l in 0..lane_out {
                    let src = (o * lane_out + l) * inner;
                    let dst = (o * lane_in + l + start) * inner;
                    contrib[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                }
            }
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Reshape { a } => {
            add_to(grads, nodes, *a, g);
        }
        Op::GatherRows { a, indices } => {
            let na = &nodes[*a];
            let row = na.data.len() / na.shape[0];
            let mut contrib = vec![0.0; na.data.len()];
            for (r, &src_row) in indices.iter().enumerate() {
                for j in 0..row {
                    contrib[src_row * row + j] += g[r * row + j];
                }
            }
            add_to(grads, nodes, *a, &contrib);
        }
        Op::ScatterToGrid { a, positions } => {
            let na = &nodes[*a];
            let c = na.shape[1];
            let (h, w) = (node.shape[1], node.shape[2]);
            let mut contrib = vec![0.0; na.data.len()];
            for (r, &(row, col)) in positions.iter().enumerate() {
                for ch in 0..c {
                    contrib[r * c + ch] = g[ch * h * w + row * w + col];
                }
            }
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Sigmoid { a } => {
            let contrib: Vec<f64> = g
                .iter()
                .zip(&node.data)
                .map(|(&gv, &s)| gv * s * (1.0 - s))
                .collect();
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Relu { a } => {
            let na = &nodes[*a];
            let contrib: Vec<f64> = g
                .iter()
                .zip(&na.data)
                .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                .collect();
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Softplus { a } => {
            let na = &nodes[*a];
            let contrib: Vec<f64> = g
                .iter()
                .zip(&na.data)
                .map(|(&gv, &x)| gv * kernels::sigmoid(x))
                .collect();
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Sin { a } => {
            let na = &nodes[*a];
            let contrib: Vec<f64> = g.iter().zip(&na.data).map(|(&gv, &x)| gv * x.cos()).collect();
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Cos { a } => {
            let na = &nodes[*a];
            let contrib: Vec<f64> =
                g.iter().zip(&na.data).map(|(&gv, &x)| -gv * x.sin()).collect();
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Exp { a } => {
            let contrib: Vec<f64> = g.iter().zip(&node.data).map(|(&gv, &e)| gv * e).collect();
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Log { a } => {
            let na = &nodes[*a];
            let contrib: Vec<f64> = g.iter().zip(&na.data).map(|(&gv, &x)| gv / x).collect();
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Clamp01 { a } => {
            let na = &nodes[*a];
            let contrib: Vec<f64> = g
                .iter()
                .zip(&na.data)
                .map(|(&gv, &x)| if (0.0..=1.0).contains(&x) { gv } else { 0.0 })
                .collect();
            add_to(grads, nodes, *a, &contrib);
        }
        Op::Softmax { a, axis } => {
            let (outer, lane, inner) = axis_split(&node.shape, *axis);
            let p = &node.data;
            let mut contrib = vec![0.0; p.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut dot = 0.0;
                    for l in 0..lane {
                        let idx = base + l * inner;
                        dot += g[idx] * p[idx];
                    }
                    for l in 0..lane {
                        let idx = base + l * inner;
                        contrib[idx] = p[idx] * (g[idx] - dot);
                    }
                }
            }
            add_to(grads, nodes, *a, &contrib);
        }
        Op::LayerNormLast { a, eps } => {
            let na = &nodes[*a];
            let lane = *na.shape.last().unwrap();
            let rows = na.data.len() / lane;
            let mut contrib = vec![0.0; na.data.len()];
            for r in 0..rows {
                let x = &na.data[r * lane..(r + 1) * lane];
                let y = &node.data[r * lane..(r + 1) * lane];
                let gr = &g[r * lane..(r + 1) * lane];
                let mean = x.iter().sum::<f64>() / lane as f64;
                let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / lane as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                let g_mean = gr.iter().sum::<f64>() / lane as f64;
                let gy_mean = gr.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum::<f64>() / lane as f64;
                for l in 0..lane {
                    contrib[r * lane + l] = inv_std * (gr[l] - g_mean - y[l] * gy_mean);
                }
            }
            add_to(grads, nodes, *a, &contrib);
        }
        Op::SumAll { a } => {
            let na = &nodes[*a];
            let contrib = vec![g[0]; na.data.len()];
            add_to(grads, nodes, *a, &contrib);
        }
        Op::SumAxis { a, axis } => {
            let na = &nodes[*a];
            let (outer, lane, inner) = axis_split(&na.shape, *axis);
            let mut contrib = vec![0.0; na.data.len()];
            for o in 0..outer {
                for l in 0..lane {
                    for i in 0..inner {
                        contrib[(o * lane + l) * inner + i] = g[o * inner + i];
                    }
                }
            }
            add_to(grads, nodes, *a, &contrib);
        }
        Op::BilinearSample {
            featmap,
            coords,
            border,
        } => {
            let nf = &nodes[*featmap];
            let nc = &nodes[*coords];
            let (c, h, w) = (nf.shape[0], nf.shape[1], nf.shape[2]);
            let p = nc.shape[0];
            if nf.requires_grad {
                let mut gfeat = vec![0.0; nf.data.len()];
                for pi in 0..p {
                    let (u, v) = (nc.data[pi * 2], nc.data[pi * 2 + 1]);
                    kernels::bilinear_scatter(
                        &mut gfeat,
                        &g[pi * c..(pi + 1) * c],
                        c,
                        h,
                        w,
                        u,
                        v,
                        *border,
                    );
                }
                add_to(grads, nodes, *featmap, &gfeat);
            }
            if nc.requires_grad {
                let mut gcoords = vec![0.0; nc.data.len()];
                let mut val = vec![0.0; c];
                let mut du = vec![0.0; c];
                let mut dv = vec![0.0; c];
                for pi in 0..p {
                    let (u, v) = (nc.data[pi * 2], nc.data[pi * 2 + 1]);
                    kernels::bilinear_at(
                        &nf.data, c, h, w, u, v, *border, &mut val, &mut du, &mut dv,
                    );
                    let gr = &g[pi * c..(pi + 1) * c];
                    gcoords[pi * 2] = gr.iter().zip(&du).map(|(&gv, &d)| gv * d).sum();
                    gcoords[pi * 2 + 1] = gr.iter().zip(&dv).map(|(&gv, &d)| gv * d).sum();
                }
                add_to(grads, nodes, *coords, &gcoords);
            }
        }
        Op::Conv2d {
            input,
            weight,
            stride,
            pad,
        } => {
            let ni = &nodes[*input];
            let nw = &nodes[*weight];
            let (cin, h, w) = (ni.shape[0], ni.shape[1], ni.shape[2]);
            let (cout, kh, kw) = (nw.shape[0], nw.shape[2], nw.shape[3]);
            let mut ginput = vec![0.0; ni.data.len()];
            let mut gweight = vec![0.0; nw.data.len()];
            kernels::conv2d_backward(
                g,
                &ni.data,
                &nw.data,
                cin,
                h,
                w,
                cout,
                kh,
                kw,
                *stride,
                *pad,
                &mut ginput,
                &mut gweight,
            );
            add_to(grads, nodes, *input, &ginput);
            add_to(grads, nodes, *weight, &gweight);
        }
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Handle to the tape this tensor lives on.
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn same_tape(&self, tape: &Tape) -> bool {
        Rc::ptr_eq(&self.tape.inner, &tape.inner)
    }

    /// Snapshot of the forward values.
    pub fn data(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        debug_assert_eq!(node.data.len(), 1);
        node.data[0]
    }

    /// Gradient from the most recent `backward` call, if this tensor
    /// participated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape
            .inner
            .borrow()
            .grads
            .get(self.id)
            .and_then(|g| g.clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            return Err(Error::invalid(format!("{op}: operands belong to different tapes")));
        }
        Ok(())
    }

    fn binary_broadcast(
        &self,
        other: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.check_same(other, op_name)?;
        let out_shape = kernels::broadcast_shape(&self.shape, &other.shape).ok_or(
            Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            },
        )?;
        let inner = self.tape.inner.borrow();
        let (na, nb) = (&inner.nodes[self.id], &inner.nodes[other.id]);
        let data = kernels::broadcast_apply(
            &na.data,
            &na.shape,
            &nb.data,
            &nb.shape,
            &out_shape,
            f,
        );
        let rg = na.requires_grad || nb.requires_grad;
        drop(inner);
        Ok(self.tape.push(make(self.id, other.id), out_shape, data, rg))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(other, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(other, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(other, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(other, "div", |a, b| a / b, |a, b| Op::Div { a, b })
    }

    /// Elementwise maximum; shapes must match exactly. Tie gradients route to
    /// `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "maximum")?;
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "maximum",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let inner = self.tape.inner.borrow();
        let (na, nb) = (&inner.nodes[self.id], &inner.nodes[other.id]);
        let data: Vec<f64> = na.data.iter().zip(&nb.data).map(|(&a, &b)| a.max(b)).collect();
        let rg = na.requires_grad || nb.requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::Maximum {
                a: self.id,
                b: other.id,
            },
            self.shape.clone(),
            data,
            rg,
        ))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let data: Vec<f64> = node.data.iter().map(|&x| f(x)).collect();
        let rg = node.requires_grad;
        drop(inner);
        self.tape.push(op, self.shape.clone(), data, rg)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, Op::Neg { a: self.id })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|x| x * c, Op::Scale { a: self.id, c })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, Op::AddScalar { a: self.id })
    }

    pub fn powf(&self, c: f64) -> Tensor {
        self.unary(|x| x.powf(c), Op::Powf { a: self.id, c })
    }

    pub fn abs(&self) -> Tensor {
        self.unary(|x| x.abs(), Op::Abs { a: self.id })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(kernels::sigmoid, Op::Sigmoid { a: self.id })
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), Op::Relu { a: self.id })
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(kernels::softplus, Op::Softplus { a: self.id })
    }

    pub fn sin(&self) -> Tensor {
        self.unary(f64::sin, Op::Sin { a: self.id })
    }

    pub fn cos(&self) -> Tensor {
        self.unary(f64::cos, Op::Cos { a: self.id })
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp { a: self.id })
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, Op::Log { a: self.id })
    }

    pub fn clamp01(&self) -> Tensor {
        self.unary(|x| x.clamp(0.0, 1.0), Op::Clamp01 { a: self.id })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "matmul")?;
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let inner = self.tape.inner.borrow();
        let (na, nb) = (&inner.nodes[self.id], &inner.nodes[other.id]);
        let data = kernels::matmul(&na.data, &nb.data, m, k, n);
        let rg = na.requires_grad || nb.requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
            vec![m, n],
            data,
            rg,
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::invalid(format!(
                "transpose2d: expected rank 2, got shape {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let data = kernels::transpose(&node.data, r, c);
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.tape.push(Op::Transpose2d { a: self.id }, vec![c, r], data, rg))
    }

    /// Concatenate along the last axis. All inputs must share every other
    /// extent.
    pub fn concat(tensors: &[&Tensor]) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::invalid("concat: empty input list"))?;
        let tape = first.tape.clone();
        let rank = first.shape.len();
        if rank == 0 {
            return Err(Error::invalid("concat: scalars cannot be concatenated"));
        }
        let mut last_total = 0usize;
        for t in tensors {
            t.check_same(first, "concat")?;
            if t.shape.len() != rank || t.shape[..rank - 1] != first.shape[..rank - 1] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            last_total += t.shape[rank - 1];
        }
        let mut out_shape = first.shape.clone();
        out_shape[rank - 1] = last_total;
        let rows: usize = first.shape[..rank - 1].iter().product();
        let inner = tape.inner.borrow();
        let mut data = vec![0.0; rows * last_total];
        let mut rg = false;
        let mut off = 0usize;
        for t in tensors {
            let node = &inner.nodes[t.id];
            rg |= node.requires_grad;
            let seg = node.shape[rank - 1];
            for r in 0..rows {
                data[r * last_total + off..r * last_total + off + seg]
                    .copy_from_slice(&node.data[r * seg..(r + 1) * seg]);
            }
            off += seg;
        }
        drop(inner);
        Ok(tape.push(
            Op::Concat {
                inputs: tensors.iter().map(|t| t.id).collect(),
            },
            out_shape,
            data,
            rg,
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.shape.len() || start >= end || end > self.shape[axis] {
            return Err(Error::invalid(format!(
                "slice: range {start}..{end} on axis {axis} invalid for shape {:?}",
                self.shape
            )));
        }
        let (outer, lane, inner_ext) = axis_split(&self.shape, axis);
        let lane_out = end - start;
        let mut out_shape = self.shape.clone();
        out_shape[axis] = lane_out;
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let mut data = vec![0.0; outer * lane_out * inner_ext];
        for o in 0..outer {
            for l in 0..lane_out {
                let src = (o * lane + l + start) * inner_ext;
                let dst = (o * lane_out + l) * inner_ext;
                data[dst..dst + inner_ext].copy_from_slice(&node.data[src..src + inner_ext]);
            }
        }
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            out_shape,
            data,
            rg,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let data = node.data.clone();
        let rg = node.requires_grad;
        drop(inner);
        Ok(self
            .tape
            .push(Op::Reshape { a: self.id }, shape.to_vec(), data, rg))
    }

    /// Select rows (axis 0) by index; duplicates allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::invalid("gather_rows: scalar input"));
        }
        let n = self.shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of bounds for {n} rows"
            )));
        }
        let row = self.numel() / n;
        let mut out_shape = self.shape.clone();
        out_shape[0] = indices.len();
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&node.data[i * row..(i + 1) * row]);
        }
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::GatherRows {
                a: self.id,
                indices: indices.to_vec(),
            },
            out_shape,
            data,
            rg,
        ))
    }

    /// Scatter rows of `[N, C]` into a zero grid `[C, h, w]` at the given
    /// (row, col) cells. Positions must be unique and in range.
    pub fn scatter_to_grid(&self, positions: &[(usize, usize)], h: usize, w: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || self.shape[0] != positions.len() {
            return Err(Error::invalid(format!(
                "scatter_to_grid: input shape {:?} does not match {} positions",
                self.shape,
                positions.len()
            )));
        }
        let c = self.shape[1];
        let mut seen = vec![false; h * w];
        for &(r, col) in positions {
            if r >= h || col >= w {
                return Err(Error::invalid(format!(
                    "scatter_to_grid: position ({r}, {col}) outside {h}x{w} grid"
                )));
            }
            if seen[r * w + col] {
                return Err(Error::invalid(format!(
                    "scatter_to_grid: duplicate position ({r}, {col})"
                )));
            }
            seen[r * w + col] = true;
        }
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let mut data = vec![0.0; c * h * w];
        for (r, &(row, col)) in positions.iter().enumerate() {
            for ch in 0..c {
                data[ch * h * w + row * w + col] = node.data[r * c + ch];
            }
        }
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::ScatterToGrid {
                a: self.id,
                positions: positions.to_vec(),
            },
            vec![c, h, w],
            data,
            rg,
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::invalid(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let (outer, lane, inner_ext) = axis_split(&self.shape, axis);
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let mut data = node.data.clone();
        for o in 0..outer {
            for i in 0..inner_ext {
                let base = o * lane * inner_ext + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..lane {
                    max = max.max(data[base + l * inner_ext]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    let idx = base + l * inner_ext;
                    data[idx] = (data[idx] - max).exp();
                    sum += data[idx];
                }
                for l in 0..lane {
                    data[base + l * inner_ext] /= sum;
                }
            }
        }
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::Softmax { a: self.id, axis },
            self.shape.clone(),
            data,
            rg,
        ))
    }

    /// Normalize over the last axis: `(x - mean) / sqrt(var + eps)`.
    /// Affine scale/shift, when wanted, is composed with `mul`/`add`.
    pub fn layer_norm_last(&self, eps: f64) -> Result<Tensor> {
        let lane = *self
            .shape
            .last()
            .ok_or_else(|| Error::invalid("layer_norm_last: scalar input"))?;
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let rows = node.data.len() / lane;
        let mut data = vec![0.0; node.data.len()];
        for r in 0..rows {
            let x = &node.data[r * lane..(r + 1) * lane];
            let mean = x.iter().sum::<f64>() / lane as f64;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / lane as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for l in 0..lane {
                data[r * lane + l] = (x[l] - mean) * inv_std;
            }
        }
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::LayerNormLast { a: self.id, eps },
            self.shape.clone(),
            data,
            rg,
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let s: f64 = node.data.iter().sum();
        let rg = node.requires_grad;
        drop(inner);
        self.tape.push(Op::SumAll { a: self.id }, vec![], vec![s], rg)
    }

    /// Sum out one axis (the axis is removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::invalid(format!(
                "sum_axis: axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let (outer, lane, inner_ext) = axis_split(&self.shape, axis);
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let mut data = vec![0.0; outer * inner_ext];
        for o in 0..outer {
            for l in 0..lane {
                for i in 0..inner_ext {
                    data[o * inner_ext + i] += node.data[(o * lane + l) * inner_ext + i];
                }
            }
        }
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::SumAxis { a: self.id, axis },
            out_shape,
            data,
            rg,
        ))
    }

    /// Bilinear interpolation of a `[C, H, W]` feature map at `[P, 2]`
    /// continuous pixel coordinates stored as (u, v) = (col, row).
    /// Differentiable w.r.t. both the feature map and the coordinates.
    pub fn bilinear_sample(&self, coords: &Tensor, border: BorderMode) -> Result<Tensor> {
        self.check_same(coords, "bilinear_sample")?;
        if self.shape.len() != 3 {
            return Err(Error::invalid(format!(
                "bilinear_sample: feature map must be [C,H,W], got {:?}",
                self.shape
            )));
        }
        if coords.shape.len() != 2 || coords.shape[1] != 2 {
            return Err(Error::invalid(format!(
                "bilinear_sample: coords must be [P,2], got {:?}",
                coords.shape
            )));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let p = coords.shape[0];
        let inner = self.tape.inner.borrow();
        let nf = &inner.nodes[self.id];
        let nc = &inner.nodes[coords.id];
        let mut data = vec![0.0; p * c];
        let mut du = vec![0.0; c];
        let mut dv = vec![0.0; c];
        for pi in 0..p {
            let (u, v) = (nc.data[pi * 2], nc.data[pi * 2 + 1]);
            kernels::bilinear_at(
                &nf.data,
                c,
                h,
                w,
                u,
                v,
                border,
                &mut data[pi * c..(pi + 1) * c],
                &mut du,
                &mut dv,
            );
        }
        let rg = nf.requires_grad || nc.requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::BilinearSample {
                featmap: self.id,
                coords: coords.id,
                border,
            },
            vec![p, c],
            data,
            rg,
        ))
    }

    /// 2D convolution of `[Cin, H, W]` with `[Cout, Cin, KH, KW]`.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        self.check_same(weight, "conv2d")?;
        if self.shape.len() != 3 || weight.shape.len() != 4 || weight.shape[1] != self.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        let (cin, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (cout, kh, kw) = (weight.shape[0], weight.shape[2], weight.shape[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}+{pad}"
            )));
        }
        let inner = self.tape.inner.borrow();
        let ni = &inner.nodes[self.id];
        let nw = &inner.nodes[weight.id];
        let (data, hout, wout) =
            kernels::conv2d_forward(&ni.data, &nw.data, cin, h, w, cout, kh, kw, stride, pad);
        let rg = ni.requires_grad || nw.requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                stride,
                pad,
            },
            vec![cout, hout, wout],
            data,
            rg,
        ))
    }
}
