//! Surrogate scorer: a single-layer transformer over three summary vectors
//! (input image, instruction text, editing masks) that predicts the
//! text-image similarity the full editing run would achieve.
//!
//! The editor's sampler is treated as non-differentiable by policy, so the
//! refinement phase maximizes this prediction instead: the frozen surrogate
//! scores the pipeline's mask proposals, and its error against the oracle
//! score (perfect alignment, 1.0) is added to the main loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::D_MODEL;
use crate::error::{PipelineError, PipelineResult};
use crate::layers::{Attention, LayerNorm, Linear};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Tensor;
use crate::seeds::derive_seed;

/// Oracle similarity target used during refinement: perfect alignment.
pub const ORACLE_SCORE: f64 = 1.0;

/// Fixed sinusoidal basis for pooling per-position mask coverage fractions
/// into a length-invariant summary vector: `m x D_MODEL`.
pub fn coverage_basis(tape: &mut Tape, m: usize) -> Var {
    let d = D_MODEL;
    let mut data = vec![0.0; m * d];
    for j in 0..m {
        let u = (j as f64 + 0.5) / m as f64;
        for k in 0..d / 2 {
            data[j * d + 2 * k] = (std::f64::consts::PI * (k + 1) as f64 * u).sin();
            data[j * d + 2 * k + 1] = (std::f64::consts::PI * k as f64 * u).cos();
        }
    }
    tape.constant(data, vec![m, d]).expect("shape matches")
}

/// Pool a `1 x m` coverage row into the fixed summary space: `(c / m) * B`.
pub fn pool_coverage(tape: &mut Tape, coverage: Var, basis: Var) -> PipelineResult<Var> {
    let m = tape.shape(coverage)[1];
    let prod = tape.matmul(coverage, basis)?;
    Ok(tape.scale(prod, 1.0 / m as f64))
}

/// Single-layer transformer scorer.
#[derive(Debug, Clone)]
pub struct Surrogate {
    type_embed: Tensor, // 3 x D_MODEL, one row per input slot
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp_up: Linear,
    mlp_down: Linear,
    head: Linear, // D_MODEL -> 1
}

pub struct SurrogateVars {
    type_embed: Var,
    ln1: crate::layers::LayerNormVars,
    attn: crate::layers::AttentionVars,
    ln2: crate::layers::LayerNormVars,
    mlp_up: crate::layers::LinearVars,
    mlp_down: crate::layers::LinearVars,
    head: crate::layers::LinearVars,
}

impl Surrogate {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "surrogate"));
        let std = (1.0 / D_MODEL as f64).sqrt();
        let mut s = Self {
            type_embed: Tensor::randn(vec![3, D_MODEL], 0.5, &mut rng),
            ln1: LayerNorm::new(D_MODEL),
            attn: Attention::seeded(D_MODEL, 4, &mut rng),
            ln2: LayerNorm::new(D_MODEL),
            mlp_up: Linear::seeded(D_MODEL, 2 * D_MODEL, std, true, &mut rng),
            mlp_down: Linear::seeded(2 * D_MODEL, D_MODEL, std, true, &mut rng),
            head: Linear::seeded(D_MODEL, 1, std, true, &mut rng),
        };
        s.set_trainable(true);
        s
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.type_embed.set_requires_grad(flag);
        self.ln1.set_trainable(flag);
        self.attn.set_trainable(flag);
        self.ln2.set_trainable(flag);
        self.mlp_up.set_trainable(flag);
        self.mlp_down.set_trainable(flag);
        self.head.set_trainable(flag);
    }

    /// Whether every parameter is excluded from gradient flow.
    pub fn is_frozen(&self) -> bool {
        let mut frozen = true;
        self.visit("s", &mut |_, t| frozen &= !t.requires_grad());
        frozen
    }

    pub fn bind(&self, tape: &mut Tape) -> SurrogateVars {
        SurrogateVars {
            type_embed: tape.leaf(&self.type_embed),
            ln1: self.ln1.bind(tape),
            attn: self.attn.bind(tape),
            ln2: self.ln2.bind(tape),
            mlp_up: self.mlp_up.bind(tape),
            mlp_down: self.mlp_down.bind(tape),
            head: self.head.bind(tape),
        }
    }

    /// Predict the similarity score from the three `1 x D_MODEL` summary
    /// rows. Output is a `[1]`-shaped value in `(-1, 1)`.
    pub fn predict(
        &self,
        tape: &mut Tape,
        vars: &SurrogateVars,
        img_embed: Var,
        instr_embed: Var,
        mask_summary: Var,
    ) -> PipelineResult<Var> {
        let stacked = tape.concat(&[img_embed, instr_embed, mask_summary], 0)?;
        let mut h = tape.add(stacked, vars.type_embed)?;
        let normed = LayerNorm::forward(tape, &vars.ln1, h)?;
        let attn = Attention::forward(tape, &vars.attn, normed, normed)?;
        h = tape.add(h, attn)?;
        let normed = LayerNorm::forward(tape, &vars.ln2, h)?;
        let up = Linear::forward(tape, &vars.mlp_up, normed)?;
        let act = tape.gelu(up);
        let down = Linear::forward(tape, &vars.mlp_down, act)?;
        h = tape.add(h, down)?;
        let pooled = tape.col_mean(h)?;
        let pooled = tape.reshape(pooled, vec![1, D_MODEL])?;
        let raw = Linear::forward(tape, &vars.head, pooled)?;
        let squashed = tape.tanh(raw);
        Ok(tape.reshape(squashed, vec![1])?)
    }

    pub fn harvest(&mut self, tape: &Tape, vars: &SurrogateVars) {
        if let Some(g) = tape.grad(vars.type_embed) {
            self.type_embed.accumulate_grad(g);
        }
        self.ln1.harvest(tape, &vars.ln1);
        self.attn.harvest(tape, &vars.attn);
        self.ln2.harvest(tape, &vars.ln2);
        self.mlp_up.harvest(tape, &vars.mlp_up);
        self.mlp_down.harvest(tape, &vars.mlp_down);
        self.head.harvest(tape, &vars.head);
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.type_embed"), &self.type_embed);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.mlp_up.visit(&format!("{prefix}.mlp_up"), f);
        self.mlp_down.visit(&format!("{prefix}.mlp_down"), f);
        self.head.visit(&format!("{prefix}.head"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.type_embed"), &mut self.type_embed);
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.mlp_up.visit_mut(&format!("{prefix}.mlp_up"), f);
        self.mlp_down.visit_mut(&format!("{prefix}.mlp_down"), f);
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

/// Mean squared error between actual scores and predictions (`[B]` vs
/// `B`-element constant), the surrogate training objective.
pub fn surrogate_mse_loss(
    tape: &mut Tape,
    predictions: Var,
    actuals: &[f64],
) -> PipelineResult<Var> {
    let n = tape.shape(predictions).iter().product::<usize>();
    if actuals.is_empty() || n != actuals.len() {
        return Err(PipelineError::LengthMismatch {
            left: n,
            right: actuals.len(),
        });
    }
    let target = tape.constant(actuals.to_vec(), tape.shape(predictions).to_vec())?;
    let diff = tape.sub(predictions, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// Refinement objective: `main_loss + lambda5 * (predicted - oracle)^2`.
/// The surrogate must be frozen; gradients flow only through `predicted`'s
/// inputs (the mask pipeline), never into the surrogate itself.
pub fn refine_step(
    tape: &mut Tape,
    main_loss: Var,
    predicted: Var,
    oracle: f64,
    lambda5: f64,
    surrogate: &Surrogate,
) -> PipelineResult<Var> {
    if !surrogate.is_frozen() {
        return Err(PipelineError::SurrogateNotFrozen);
    }
    let shifted = tape.offset(predicted, -oracle);
    let mse = tape.mul(shifted, shifted)?;
    let weighted = tape.scale(mse, lambda5);
    Ok(tape.add(main_loss, weighted)?)
}
