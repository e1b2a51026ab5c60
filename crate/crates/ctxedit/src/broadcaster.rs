//! Token broadcaster: aligns every prompt position with the output token
//! that matches it best in a shared projected space.
//!
//! Output tokens and text embeddings are projected by trainable maps, a
//! cosine similarity matrix `S` (n x m) is formed, and each text position
//! takes the argmax of its column's softmax. Training supervises the soft
//! column distributions; the hard argmax is applied only when masks are
//! assembled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::D_MODEL;
use crate::error::{PipelineError, PipelineResult};
use crate::layers::Linear;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Tensor;
use crate::seeds::derive_seed;

/// Added inside the square root of each norm, for gradient stability only;
/// an exactly zero-norm projected row is still an error.
pub const NORM_EPS: f64 = 1e-12;

/// Trainable projections into the shared alignment space.
#[derive(Debug, Clone)]
pub struct TokenBroadcaster {
    pub w_out: Linear,  // output-token side
    pub w_text: Linear, // text-embedding side
}

pub struct BroadcasterVars {
    w_out: crate::layers::LinearVars,
    w_text: crate::layers::LinearVars,
}

impl TokenBroadcaster {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "broadcaster"));
        let std = (1.0 / D_MODEL as f64).sqrt();
        let mut w_out = Linear::seeded(D_MODEL, D_MODEL, std, false, &mut rng);
        let mut w_text = Linear::seeded(D_MODEL, D_MODEL, std, false, &mut rng);
        w_out.w.set_requires_grad(true);
        w_text.w.set_requires_grad(true);
        Self { w_out, w_text }
    }

    pub fn bind(&self, tape: &mut Tape) -> BroadcasterVars {
        BroadcasterVars {
            w_out: self.w_out.bind(tape),
            w_text: self.w_text.bind(tape),
        }
    }

    /// Cosine similarity matrix between projected output tokens (rows) and
    /// projected text embeddings (columns).
    pub fn similarity(
        &self,
        tape: &mut Tape,
        vars: &BroadcasterVars,
        out_tokens: Var,
        text_emb: Var,
    ) -> PipelineResult<Var> {
        let n = tape.shape(out_tokens)[0];
        let m = tape.shape(text_emb)[0];
        if n == 0 || m == 0 {
            return Err(PipelineError::EmptyText);
        }
        let po = Linear::forward(tape, &vars.w_out, out_tokens)?;
        let pt = Linear::forward(tape, &vars.w_text, text_emb)?;

        let po_sq = tape.mul(po, po)?;
        let o_norm_sq = tape.row_sum(po_sq)?;
        for (row, &v) in tape.data(o_norm_sq).iter().enumerate() {
            if v == 0.0 {
                return Err(PipelineError::ZeroNormProjection {
                    side: "output-token",
                    row,
                });
            }
        }
        let pt_sq = tape.mul(pt, pt)?;
        let t_norm_sq = tape.row_sum(pt_sq)?;
        for (row, &v) in tape.data(t_norm_sq).iter().enumerate() {
            if v == 0.0 {
                return Err(PipelineError::ZeroNormProjection {
                    side: "text-embedding",
                    row,
                });
            }
        }

        let numer = {
            let ptt = tape.transpose(pt)?;
            tape.matmul(po, ptt)?
        };
        let o_norm = {
            let shifted = tape.offset(o_norm_sq, NORM_EPS);
            tape.sqrt(shifted)?
        };
        let t_norm = {
            let shifted = tape.offset(t_norm_sq, NORM_EPS);
            tape.sqrt(shifted)?
        };
        let o_col = tape.reshape(o_norm, vec![n, 1])?;
        let t_row = tape.reshape(t_norm, vec![1, m])?;
        let denom = tape.matmul(o_col, t_row)?;
        Ok(tape.div(numer, denom)?)
    }

    pub fn harvest(&mut self, tape: &Tape, vars: &BroadcasterVars) {
        self.w_out.harvest(tape, &vars.w_out);
        self.w_text.harvest(tape, &vars.w_text);
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.w_out.visit(&format!("{prefix}.w_out"), f);
        self.w_text.visit(&format!("{prefix}.w_text"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.w_out.visit_mut(&format!("{prefix}.w_out"), f);
        self.w_text.visit_mut(&format!("{prefix}.w_text"), f);
    }
}

/// Hard alignment: per column, softmax over rows then argmax — which, since
/// softmax is monotone, is the plain column argmax. Ties take the smallest
/// row index. Returned indices are 0-based.
pub fn align(similarity: &[f64], n: usize, m: usize) -> Vec<usize> {
    debug_assert_eq!(similarity.len(), n * m);
    (0..m)
        .map(|j| {
            let mut best = 0usize;
            for i in 1..n {
                if similarity[i * m + j] > similarity[best * m + j] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy between the column softmax of `S` and the
/// ground-truth alignment (0-based output-token index per text position).
pub fn broadcast_ce_loss(
    tape: &mut Tape,
    similarity: Var,
    gt_alignment: &[usize],
) -> PipelineResult<Var> {
    let m = tape.shape(similarity)[1];
    if m != gt_alignment.len() {
        return Err(PipelineError::LengthMismatch {
            left: m,
            right: gt_alignment.len(),
        });
    }
    Ok(tape.cross_entropy(similarity, gt_alignment, 0)?)
}
