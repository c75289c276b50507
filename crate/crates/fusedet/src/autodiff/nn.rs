//! Composite neural primitives: linear/MLP stacks, multi-head self-attention,
//! conv blocks, and parameter initialization.

use rand::Rng;

use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::{Tape, Tensor};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A linear layer's parameters bound onto a tape.
#[derive(Clone)]
pub struct LinearRef {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearRef {
    pub fn bind(tape: &Tape, store: &ParamStore, name: &str) -> Result<LinearRef> {
        Ok(LinearRef {
            w: tape.param(store, &format!("{name}.w"))?,
            b: tape.param(store, &format!("{name}.b"))?,
        })
    }

    /// `x @ w + b` for x of shape `[N, In]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w)?.add(&self.b)
    }
}

/// Xavier-uniform weights plus zero bias under `<name>.w` / `<name>.b`.
pub fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    store.insert(format!("{name}.w"), w, vec![fan_in, fan_out]);
    store.insert(format!("{name}.b"), vec![0.0; fan_out], vec![fan_out]);
}

/// Zero-initialized linear layer with a chosen constant bias.
pub fn init_linear_zero(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: f64) {
    store.insert(format!("{name}.w"), vec![0.0; fan_in * fan_out], vec![fan_in, fan_out]);
    store.insert(format!("{name}.b"), vec![bias; fan_out], vec![fan_out]);
}

/// MLP parameters: `<name>.l{i}.w/.b` for dims `[d0, d1, ..., dk]`.
pub fn init_mlp(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) {
    for i in 0..dims.len() - 1 {
        init_linear(store, &format!("{name}.l{i}"), dims[i], dims[i + 1], rng);
    }
}

pub fn bind_mlp(tape: &Tape, store: &ParamStore, name: &str, n_layers: usize) -> Result<Vec<LinearRef>> {
    (0..n_layers)
        .map(|i| LinearRef::bind(tape, store, &format!("{name}.l{i}")))
        .collect()
}

/// Linear layers with ReLU between them and no activation after the last.
/// An empty layer list is the identity; a single layer is plain linear.
pub fn mlp_forward(x: &Tensor, layers: &[LinearRef]) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        h = layer.apply(&h)?;
        if i + 1 < layers.len() {
            h = h.relu();
        }
    }
    Ok(h)
}

/// Learned affine layer-norm parameters (`.g` gain, `.o` offset).
#[derive(Clone)]
pub struct LayerNormRef {
    pub g: Tensor,
    pub o: Tensor,
}

impl LayerNormRef {
    pub fn bind(tape: &Tape, store: &ParamStore, name: &str) -> Result<LayerNormRef> {
        Ok(LayerNormRef {
            g: tape.param(store, &format!("{name}.g"))?,
            o: tape.param(store, &format!("{name}.o"))?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm_last(LAYER_NORM_EPS)?.mul(&self.g)?.add(&self.o)
    }
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, width: usize) {
    store.insert(format!("{name}.g"), vec![1.0; width], vec![width]);
    store.insert(format!("{name}.o"), vec![0.0; width], vec![width]);
}

/// Multi-head self-attention block parameters.
pub struct AttentionRef {
    pub q: LinearRef,
    pub k: LinearRef,
    pub v: LinearRef,
    pub out: LinearRef,
    pub norm: LayerNormRef,
    pub heads: usize,
}

pub fn init_attention(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) {
    init_linear(store, &format!("{name}.q"), width, width, rng);
    init_linear(store, &format!("{name}.k"), width, width, rng);
    init_linear(store, &format!("{name}.v"), width, width, rng);
    init_linear(store, &format!("{name}.out"), width, width, rng);
    init_layer_norm(store, &format!("{name}.norm"), width);
}

impl AttentionRef {
    pub fn bind(tape: &Tape, store: &ParamStore, name: &str, heads: usize) -> Result<AttentionRef> {
        Ok(AttentionRef {
            q: LinearRef::bind(tape, store, &format!("{name}.q"))?,
            k: LinearRef::bind(tape, store, &format!("{name}.k"))?,
            v: LinearRef::bind(tape, store, &format!("{name}.v"))?,
            out: LinearRef::bind(tape, store, &format!("{name}.out"))?,
            norm: LayerNormRef::bind(tape, store, &format!("{name}.norm"))?,
            heads,
        })
    }

    /// `layer_norm(x + W_out * attention(x))` over `[N, C]` queries.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = *x.shape().last().ok_or_else(|| Error::invalid("attention: scalar input"))?;
        if c % self.heads != 0 {
            return Err(Error::invalid(format!(
                "attention: width {c} not divisible by {} heads",
                self.heads
            )));
        }
        let d = c / self.heads;
        let q = self.q.apply(x)?;
        let k = self.k.apply(x)?;
        let v = self.v.apply(x)?;
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(1, h * d, (h + 1) * d)?;
            let kh = k.slice(1, h * d, (h + 1) * d)?;
            let vh = v.slice(1, h * d, (h + 1) * d)?;
            let scores = qh.matmul(&kh.transpose2d()?)?.scale(1.0 / (d as f64).sqrt());
            let attn = scores.softmax(1)?;
            head_outs.push(attn.matmul(&vh)?);
        }
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        let merged = Tensor::concat(&refs)?;
        let projected = self.out.apply(&merged)?;
        self.norm.apply(&x.add(&projected)?)
    }
}

/// Feed-forward block parameters: two linear layers plus post-norm.
pub struct FfnRef {
    pub l0: LinearRef,
    pub l1: LinearRef,
    pub norm: LayerNormRef,
}

pub fn init_ffn(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) {
    init_linear(store, &format!("{name}.l0"), width, hidden, rng);
    init_linear(store, &format!("{name}.l1"), hidden, width, rng);
    init_layer_norm(store, &format!("{name}.norm"), width);
}

impl FfnRef {
    pub fn bind(tape: &Tape, store: &ParamStore, name: &str) -> Result<FfnRef> {
        Ok(FfnRef {
            l0: LinearRef::bind(tape, store, &format!("{name}.l0"))?,
            l1: LinearRef::bind(tape, store, &format!("{name}.l1"))?,
            norm: LayerNormRef::bind(tape, store, &format!("{name}.norm"))?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.l1.apply(&self.l0.apply(x)?.relu())?;
        self.norm.apply(&x.add(&h)?)
    }
}

/// Conv layer parameters; bias is stored `[Cout]` and broadcast as `[Cout,1,1]`.
#[derive(Clone)]
pub struct ConvRef {
    pub w: Tensor,
    pub b: Tensor,
}

pub fn init_conv(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    let fan_in = cin * k * k;
    let bound = (6.0 / fan_in as f64).sqrt();
    let w: Vec<f64> = (0..cout * cin * k * k)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    store.insert(format!("{name}.w"), w, vec![cout, cin, k, k]);
    store.insert(format!("{name}.b"), vec![0.0; cout], vec![cout]);
}

impl ConvRef {
    pub fn bind(tape: &Tape, store: &ParamStore, name: &str) -> Result<ConvRef> {
        Ok(ConvRef {
            w: tape.param(store, &format!("{name}.w"))?,
            b: tape.param(store, &format!("{name}.b"))?,
        })
    }

    pub fn apply(&self, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let cout = self.w.shape()[0];
        let y = x.conv2d(&self.w, stride, pad)?;
        y.add(&self.b.reshape(&[cout, 1, 1])?)
    }
}
