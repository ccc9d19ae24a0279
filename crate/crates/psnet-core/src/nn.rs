//! Reusable Transformer blocks: layer normalization, multi-head attention,
//! two-layer MLPs, and the standard encoding/decoding layers (post-norm
//! residuals).
//!
//! Parameter containers are generic over their slot type `P`: `Tensor<R>`
//! when holding values, [`Var`] when bound into a graph. Every container
//! walks its slots in one fixed order through `build` / `visit` /
//! `visit_mut`, which is what checkpoint naming, optimizer state, and
//! graph binding all rely on.

use crate::autodiff::{AttnMask, Graph, Var};
use crate::rng::DetRng;
use crate::tensor::{Real, Result, Tensor};

/// How a parameter slot should be initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Dense weight or embedding: uniform in +/- sqrt(6 / (fan_in + fan_out)).
    Weight,
    /// Bias vector: zeros.
    Bias,
    /// LayerNorm scale: ones.
    Gamma,
}

/// Supplier invoked once per parameter slot, in traversal order.
pub type SlotFn<'a, P> = dyn FnMut(String, SlotKind, &[usize]) -> P + 'a;

/// Uniform Xavier/Glorot draw for a rank >= 2 weight.
pub fn xavier<R: Real>(shape: &[usize], rng: &mut DetRng) -> Tensor<R> {
    let fan_in = shape[0] as f64;
    let fan_out: f64 = shape[1..].iter().product::<usize>() as f64;
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| R::from_f64(rng.next_uniform(-bound, bound)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree")
}

/// Standard slot supplier: Xavier weights, zero biases, unit gammas.
pub fn init_slots<'a, R: Real>(
    rng: &'a mut DetRng,
) -> impl FnMut(String, SlotKind, &[usize]) -> Tensor<R> + 'a {
    move |_, kind, shape| match kind {
        SlotKind::Weight => xavier(shape, rng),
        SlotKind::Bias => Tensor::zeros(shape),
        SlotKind::Gamma => Tensor::ones(shape),
    }
}

/// Supplier that replays a flat slice of graph handles.
pub(crate) fn slice_slots<'a>(vars: &'a [Var]) -> impl FnMut(String, SlotKind, &[usize]) -> Var + 'a {
    let mut it = vars.iter().copied();
    move |name, _, _| it.next().unwrap_or_else(|| panic!("missing slot {name}"))
}

/// Elementwise nonlinearity used between the two MLP linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map: `x W + b`.
#[derive(Debug, Clone)]
pub struct LinearParams<P> {
    pub w: P,
    pub b: P,
}

impl<P> LinearParams<P> {
    pub fn build(prefix: &str, d_in: usize, d_out: usize, f: &mut SlotFn<P>) -> Self {
        LinearParams {
            w: f(format!("{prefix}.w"), SlotKind::Weight, &[d_in, d_out]),
            b: f(format!("{prefix}.b"), SlotKind::Bias, &[d_out]),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

pub fn linear_forward<R: Real>(g: &mut Graph<R>, x: Var, p: &LinearParams<Var>) -> Result<Var> {
    let h = g.matmul(x, p.w)?;
    g.add_bias(h, p.b)
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-token normalization scale/shift.
#[derive(Debug, Clone)]
pub struct LayerNormParams<P> {
    pub gamma: P,
    pub beta: P,
    pub eps: f64,
}

impl<P> LayerNormParams<P> {
    pub fn build(prefix: &str, width: usize, f: &mut SlotFn<P>) -> Self {
        LayerNormParams {
            gamma: f(format!("{prefix}.gamma"), SlotKind::Gamma, &[width]),
            beta: f(format!("{prefix}.beta"), SlotKind::Bias, &[width]),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

pub fn layer_norm<R: Real>(g: &mut Graph<R>, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    g.layer_norm(x, p.gamma, p.beta, p.eps)
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

/// Per-head query/key/value projections plus the output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams<P> {
    pub w_q: Vec<P>,
    pub w_k: Vec<P>,
    pub w_v: Vec<P>,
    pub w_o: P,
    pub heads: usize,
    pub head_dim: usize,
}

impl<P> AttentionParams<P> {
    pub fn build(prefix: &str, width: usize, heads: usize, f: &mut SlotFn<P>) -> Self {
        debug_assert_eq!(width % heads, 0, "width must divide evenly into heads");
        let d = width / heads;
        let per_head = |tag: &str, f: &mut SlotFn<P>| -> Vec<P> {
            (0..heads)
                .map(|i| f(format!("{prefix}.{tag}.{i}"), SlotKind::Weight, &[width, d]))
                .collect()
        };
        let w_q = per_head("wq", f);
        let w_k = per_head("wk", f);
        let w_v = per_head("wv", f);
        let w_o = f(format!("{prefix}.wo"), SlotKind::Weight, &[heads * d, width]);
        AttentionParams {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
            head_dim: d,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (tag, list) in [("wq", &self.w_q), ("wk", &self.w_k), ("wv", &self.w_v)] {
            for (i, p) in list.iter().enumerate() {
                f(format!("{prefix}.{tag}.{i}"), p);
            }
        }
        f(format!("{prefix}.wo"), &self.w_o);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        for (tag, list) in [
            ("wq", &mut self.w_q),
            ("wk", &mut self.w_k),
            ("wv", &mut self.w_v),
        ] {
            for (i, p) in list.iter_mut().enumerate() {
                f(format!("{prefix}.{tag}.{i}"), p);
            }
        }
        f(format!("{prefix}.wo"), &mut self.w_o);
    }

}

impl<R: Real> AttentionParams<Tensor<R>> {
    pub fn init(width: usize, heads: usize, rng: &mut DetRng) -> Self {
        Self::build("attn", width, heads, &mut init_slots(rng))
    }

    pub fn init_tensors(width: usize, heads: usize, rng: &mut DetRng) -> Vec<Tensor<R>> {
        let mut out = Vec::new();
        Self::init(width, heads, rng).visit("", &mut |_, t| out.push(t.clone()));
        out
    }
}

impl AttentionParams<Var> {
    pub fn from_slice(width: usize, heads: usize, vars: &[Var]) -> Self {
        Self::build("attn", width, heads, &mut slice_slots(vars))
    }
}

/// Scaled dot-product attention over `heads` independent projections, heads
/// concatenated then mixed by the output projection. Masked score entries
/// receive exactly zero attention weight.
pub fn multi_head_attention<R: Real>(
    g: &mut Graph<R>,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionParams<Var>,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    let scale = R::from_f64(1.0 / (p.head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(p.heads);
    for i in 0..p.heads {
        let qh = g.matmul(q, p.w_q[i])?;
        let kh = g.matmul(k, p.w_k[i])?;
        let vh = g.matmul(v, p.w_v[i])?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale);
        heads.push(g.attn_apply(scaled, vh, mask)?);
    }
    let cat = g.concat(&heads, 1)?;
    g.matmul(cat, p.w_o)
}

/// Per-head attention weight matrices for the given inputs; forward-only.
pub fn multi_head_attention_probs<R: Real>(
    g: &mut Graph<R>,
    q: Var,
    k: Var,
    p: &AttentionParams<Var>,
    mask: Option<&AttnMask>,
) -> Result<Vec<Tensor<R>>> {
    let scale = R::from_f64(1.0 / (p.head_dim as f64).sqrt());
    let mut out = Vec::with_capacity(p.heads);
    for i in 0..p.heads {
        let qh = g.matmul(q, p.w_q[i])?;
        let kh = g.matmul(k, p.w_k[i])?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale);
        out.push(g.attn_probs(scaled, mask)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

/// Two linear layers with an elementwise activation between them.
#[derive(Debug, Clone)]
pub struct MlpParams<P> {
    pub fc1: LinearParams<P>,
    pub fc2: LinearParams<P>,
    pub activation: Activation,
}

impl<P> MlpParams<P> {
    pub fn build(
        prefix: &str,
        width: usize,
        hidden: usize,
        activation: Activation,
        f: &mut SlotFn<P>,
    ) -> Self {
        MlpParams {
            fc1: LinearParams::build(&format!("{prefix}.fc1"), width, hidden, f),
            fc2: LinearParams::build(&format!("{prefix}.fc2"), hidden, width, f),
            activation,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }

}

impl<R: Real> MlpParams<Tensor<R>> {
    pub fn init(width: usize, hidden: usize, activation: Activation, rng: &mut DetRng) -> Self {
        Self::build("mlp", width, hidden, activation, &mut init_slots(rng))
    }

    pub fn init_tensors(
        width: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut DetRng,
    ) -> Vec<Tensor<R>> {
        let mut out = Vec::new();
        Self::init(width, hidden, activation, rng).visit("", &mut |_, t| out.push(t.clone()));
        out
    }
}

impl MlpParams<Var> {
    pub fn from_slice(width: usize, hidden: usize, activation: Activation, vars: &[Var]) -> Self {
        Self::build("mlp", width, hidden, activation, &mut slice_slots(vars))
    }
}

pub fn mlp_forward<R: Real>(g: &mut Graph<R>, x: Var, p: &MlpParams<Var>) -> Result<Var> {
    let h = linear_forward(g, x, &p.fc1)?;
    let a = match p.activation {
        Activation::Relu => g.relu(h),
        Activation::Gelu => g.gelu(h),
    };
    linear_forward(g, a, &p.fc2)
}

// ---------------------------------------------------------------------------
// Encoding layer
// ---------------------------------------------------------------------------

/// Hidden width of the MLP inside encoding/decoding layers.
pub const LAYER_MLP_FACTOR: usize = 4;

/// Self-attention sublayer plus MLP sublayer, post-norm residuals.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams<P> {
    pub attn: AttentionParams<P>,
    pub ln1: LayerNormParams<P>,
    pub mlp: MlpParams<P>,
    pub ln2: LayerNormParams<P>,
}

impl<P> EncoderLayerParams<P> {
    pub fn build(prefix: &str, width: usize, heads: usize, f: &mut SlotFn<P>) -> Self {
        EncoderLayerParams {
            attn: AttentionParams::build(&format!("{prefix}.attn"), width, heads, f),
            ln1: LayerNormParams::build(&format!("{prefix}.ln1"), width, f),
            mlp: MlpParams::build(
                &format!("{prefix}.mlp"),
                width,
                width * LAYER_MLP_FACTOR,
                Activation::Relu,
                f,
            ),
            ln2: LayerNormParams::build(&format!("{prefix}.ln2"), width, f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
    }

}

impl<R: Real> EncoderLayerParams<Tensor<R>> {
    pub fn init(width: usize, heads: usize, rng: &mut DetRng) -> Self {
        Self::build("enc", width, heads, &mut init_slots(rng))
    }

    pub fn init_tensors(width: usize, heads: usize, rng: &mut DetRng) -> Vec<Tensor<R>> {
        let mut out = Vec::new();
        Self::init(width, heads, rng).visit("", &mut |_, t| out.push(t.clone()));
        out
    }
}

impl EncoderLayerParams<Var> {
    pub fn from_slice(width: usize, heads: usize, vars: &[Var]) -> Self {
        Self::build("enc", width, heads, &mut slice_slots(vars))
    }
}

/// `x <- LN(x + SelfAttn(x)); x <- LN(x + MLP(x))`.
pub fn encoding_layer_forward<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    p: &EncoderLayerParams<Var>,
) -> Result<Var> {
    let a = multi_head_attention(g, x, x, x, &p.attn, None)?;
    let s = g.add(x, a)?;
    let x1 = layer_norm(g, s, &p.ln1)?;
    let m = mlp_forward(g, x1, &p.mlp)?;
    let s2 = g.add(x1, m)?;
    layer_norm(g, s2, &p.ln2)
}

// ---------------------------------------------------------------------------
// Decoding layer
// ---------------------------------------------------------------------------

/// Masked self-attention, cross-attention over an encoder memory, MLP;
/// post-norm residuals throughout.
#[derive(Debug, Clone)]
pub struct DecoderLayerParams<P> {
    pub self_attn: AttentionParams<P>,
    pub ln1: LayerNormParams<P>,
    pub cross_attn: AttentionParams<P>,
    pub ln2: LayerNormParams<P>,
    pub mlp: MlpParams<P>,
    pub ln3: LayerNormParams<P>,
}

impl<P> DecoderLayerParams<P> {
    pub fn build(prefix: &str, width: usize, heads: usize, f: &mut SlotFn<P>) -> Self {
        DecoderLayerParams {
            self_attn: AttentionParams::build(&format!("{prefix}.self_attn"), width, heads, f),
            ln1: LayerNormParams::build(&format!("{prefix}.ln1"), width, f),
            cross_attn: AttentionParams::build(&format!("{prefix}.cross_attn"), width, heads, f),
            ln2: LayerNormParams::build(&format!("{prefix}.ln2"), width, f),
            mlp: MlpParams::build(
                &format!("{prefix}.mlp"),
                width,
                width * LAYER_MLP_FACTOR,
                Activation::Relu,
                f,
            ),
            ln3: LayerNormParams::build(&format!("{prefix}.ln3"), width, f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
        self.ln3.visit(&format!("{prefix}.ln3"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
        self.ln3.visit_mut(&format!("{prefix}.ln3"), f);
    }

}

impl<R: Real> DecoderLayerParams<Tensor<R>> {
    pub fn init(width: usize, heads: usize, rng: &mut DetRng) -> Self {
        Self::build("dec", width, heads, &mut init_slots(rng))
    }

    pub fn init_tensors(width: usize, heads: usize, rng: &mut DetRng) -> Vec<Tensor<R>> {
        let mut out = Vec::new();
        Self::init(width, heads, rng).visit("", &mut |_, t| out.push(t.clone()));
        out
    }
}

impl DecoderLayerParams<Var> {
    pub fn from_slice(width: usize, heads: usize, vars: &[Var]) -> Self {
        Self::build("dec", width, heads, &mut slice_slots(vars))
    }
}

/// Causal self-attention, then cross-attention with `memory` as keys/values,
/// then the MLP. Position j of the output depends only on tokens <= j.
pub fn decoding_layer_forward<R: Real>(
    g: &mut Graph<R>,
    t: Var,
    memory: Var,
    p: &DecoderLayerParams<Var>,
) -> Result<Var> {
    let len = g.value(t).rows();
    let mask = AttnMask::causal(len);
    let a = multi_head_attention(g, t, t, t, &p.self_attn, Some(&mask))?;
    let s = g.add(t, a)?;
    let t1 = layer_norm(g, s, &p.ln1)?;
    let c = multi_head_attention(g, t1, memory, memory, &p.cross_attn, None)?;
    let s2 = g.add(t1, c)?;
    let t2 = layer_norm(g, s2, &p.ln2)?;
    let m = mlp_forward(g, t2, &p.mlp)?;
    let s3 = g.add(t2, m)?;
    layer_norm(g, s3, &p.ln3)
}
