//! Trainable building blocks: linear layers, low-rank adapters, layer norm
//! parameters, and multi-head attention assembled from tape primitives.
//!
//! Every block follows the same lifecycle: `bind` copies its parameters onto
//! a fresh tape at the start of a step, `forward` builds the graph, and
//! `harvest` pulls the accumulated gradients back into the persistent
//! tensors after `backward`.

use rand::Rng;

use crate::error::{PipelineError, PipelineResult};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Tensor;

/// Low-rank adapter pair on a frozen base weight: effective weight is
/// `W + scale * A * B`. `A` starts small-random and `B` zero, so a fresh
/// adapter leaves the forward pass bit-identical.
#[derive(Debug, Clone)]
pub struct Lora {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

/// Linear layer with optional bias and optional adapter.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub bias: Option<Tensor>,
    pub adapter: Option<Lora>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    w: Var,
    bias: Option<Var>,
    ab: Option<(Var, Var)>,
    scale: f64,
}

impl LinearVars {
    /// Wrap an already-bound weight variable as a bias-free, adapter-free
    /// layer. Used by gradient checks that manage leaves themselves.
    pub fn from_weight(w: Var) -> Self {
        Self {
            w,
            bias: None,
            ab: None,
            scale: 0.0,
        }
    }

    /// Effective weight matrix (base plus scaled adapter product) as a tape
    /// value — for layers used as lookup tables rather than matmuls.
    pub fn table(&self, tape: &mut Tape) -> PipelineResult<Var> {
        let mut t = self.w;
        if let Some((a, b)) = self.ab {
            let ab = tape.matmul(a, b)?;
            let scaled = tape.scale(ab, self.scale);
            t = tape.add(t, scaled)?;
        }
        Ok(t)
    }
}

impl Linear {
    pub fn seeded(
        in_dim: usize,
        out_dim: usize,
        std: f64,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: Tensor::randn(vec![in_dim, out_dim], std, rng),
            bias: with_bias.then(|| Tensor::zeros(vec![out_dim])),
            adapter: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    /// Attach a low-rank adapter and freeze the base weight. The base must
    /// be 2-D and the rank strictly below its smaller dimension.
    pub fn apply_lora(&mut self, rank: usize, scale: f64, rng: &mut impl Rng) -> PipelineResult<()> {
        let (p, q) = (self.in_dim(), self.out_dim());
        let limit = p.min(q);
        if rank >= limit {
            return Err(PipelineError::LoraRankTooLarge { rank, limit });
        }
        self.w.set_requires_grad(false);
        if let Some(b) = self.bias.as_mut() {
            b.set_requires_grad(false);
        }
        self.adapter = Some(Lora {
            a: Tensor::randn(vec![p, rank], (1.0 / p as f64).sqrt(), rng).with_grad(),
            b: Tensor::zeros(vec![rank, q]).with_grad(),
            scale,
        });
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> LinearVars {
        LinearVars {
            w: tape.leaf(&self.w),
            bias: self.bias.as_ref().map(|b| tape.leaf(b)),
            ab: self
                .adapter
                .as_ref()
                .map(|l| (tape.leaf(&l.a), tape.leaf(&l.b))),
            scale: self.adapter.as_ref().map(|l| l.scale).unwrap_or(0.0),
        }
    }

    pub fn forward(tape: &mut Tape, vars: &LinearVars, x: Var) -> PipelineResult<Var> {
        let mut out = tape.matmul(x, vars.w)?;
        if let Some((a, b)) = vars.ab {
            let xa = tape.matmul(x, a)?;
            let xab = tape.matmul(xa, b)?;
            let scaled = tape.scale(xab, vars.scale);
            out = tape.add(out, scaled)?;
        }
        if let Some(bias) = vars.bias {
            out = tape.add_bias(out, bias)?;
        }
        Ok(out)
    }

    pub fn harvest(&mut self, tape: &Tape, vars: &LinearVars) {
        if let Some(g) = tape.grad(vars.w) {
            self.w.accumulate_grad(g);
        }
        if let (Some(bias), Some(bv)) = (self.bias.as_mut(), vars.bias) {
            if let Some(g) = tape.grad(bv) {
                bias.accumulate_grad(g);
            }
        }
        if let (Some(l), Some((av, bv))) = (self.adapter.as_mut(), vars.ab) {
            if let Some(g) = tape.grad(av) {
                l.a.accumulate_grad(g);
            }
            if let Some(g) = tape.grad(bv) {
                l.b.accumulate_grad(g);
            }
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
        if let Some(l) = &self.adapter {
            f(format!("{prefix}.lora_a"), &l.a);
            f(format!("{prefix}.lora_b"), &l.b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        if let Some(b) = self.bias.as_mut() {
            f(format!("{prefix}.bias"), b);
        }
        if let Some(l) = self.adapter.as_mut() {
            f(format!("{prefix}.lora_a"), &mut l.a);
            f(format!("{prefix}.lora_b"), &mut l.b);
        }
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.visit_mut("", &mut |_, t| t.set_requires_grad(flag));
    }
}

/// Layer-norm affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    gamma: Var,
    beta: Var,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::from_vec(vec![1.0; dim], vec![dim]).expect("shape matches"),
            beta: Tensor::zeros(vec![dim]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> LayerNormVars {
        LayerNormVars {
            gamma: tape.leaf(&self.gamma),
            beta: tape.leaf(&self.beta),
        }
    }

    pub fn forward(tape: &mut Tape, vars: &LayerNormVars, x: Var) -> PipelineResult<Var> {
        Ok(tape.layer_norm(x, vars.gamma, vars.beta, LN_EPS)?)
    }

    pub fn harvest(&mut self, tape: &Tape, vars: &LayerNormVars) {
        if let Some(g) = tape.grad(vars.gamma) {
            self.gamma.accumulate_grad(g);
        }
        if let Some(g) = tape.grad(vars.beta) {
            self.beta.accumulate_grad(g);
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.gamma.set_requires_grad(flag);
        self.beta.set_requires_grad(flag);
    }
}

/// Projection set for one attention block.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub wq: LinearVars,
    pub wk: LinearVars,
    pub wv: LinearVars,
    pub wo: LinearVars,
    n_heads: usize,
}

impl Attention {
    pub fn seeded(dim: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        Self {
            wq: Linear::seeded(dim, dim, std, false, rng),
            wk: Linear::seeded(dim, dim, std, false, rng),
            wv: Linear::seeded(dim, dim, std, false, rng),
            wo: Linear::seeded(dim, dim, std, false, rng),
            n_heads,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            wq: self.wq.bind(tape),
            wk: self.wk.bind(tape),
            wv: self.wv.bind(tape),
            wo: self.wo.bind(tape),
            n_heads: self.n_heads,
        }
    }

    /// Multi-head attention: queries from `q_in`, keys/values from `kv_in`,
    /// softmax over the key axis.
    pub fn forward(
        tape: &mut Tape,
        vars: &AttentionVars,
        q_in: Var,
        kv_in: Var,
    ) -> PipelineResult<Var> {
        let q = Linear::forward(tape, &vars.wq, q_in)?;
        let k = Linear::forward(tape, &vars.wk, kv_in)?;
        let v = Linear::forward(tape, &vars.wv, kv_in)?;
        let dim = tape.shape(q)[1];
        let head_dim = dim / vars.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(vars.n_heads);
        for h in 0..vars.n_heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat(&heads, 1)?;
        Linear::forward(tape, &vars.wo, merged)
    }

    pub fn harvest(&mut self, tape: &Tape, vars: &AttentionVars) {
        self.wq.harvest(tape, &vars.wq);
        self.wk.harvest(tape, &vars.wk);
        self.wv.harvest(tape, &vars.wv);
        self.wo.harvest(tape, &vars.wo);
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }

    pub fn apply_lora(&mut self, rank: usize, scale: f64, rng: &mut impl Rng) -> PipelineResult<()> {
        self.wq.apply_lora(rank, scale, rng)?;
        self.wk.apply_lora(rank, scale, rng)?;
        self.wv.apply_lora(rank, scale, rng)?;
        self.wo.apply_lora(rank, scale, rng)?;
        Ok(())
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.wq.set_trainable(flag);
        self.wk.set_trainable(flag);
        self.wv.set_trainable(flag);
        self.wo.set_trainable(flag);
    }
}

/// Sinusoidal position matrix (`len x dim`) as a tape constant.
pub fn position_constant(tape: &mut Tape, len: usize, dim: usize) -> Var {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = (pos as f64 * freq).sin();
            data[pos * dim + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    tape.constant(data, vec![len, dim]).expect("shape matches")
}
