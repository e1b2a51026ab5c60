//! Token decoder: turns editable output tokens into binary editing masks.
//!
//! Two cross-attention layers refine per-patch image features: layer one
//! attends over the text embeddings, layer two over the `[MASK]` token
//! embeddings. A scaled dot product between each refined patch feature and
//! each token embedding yields per-patch mask logits, which pass through
//! sigmoid, a 0.5 threshold, and nearest-neighbour upsampling to image
//! resolution. `[NEG]` tokens never reach the decoder — their masks are
//! all-zero by construction.
//!
//! Training losses (dice and pixel BCE) are computed on pre-threshold
//! probabilities; thresholding happens only at mask-assembly time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{ImageTokens, D_MODEL, N_PATCHES, PATCH, PATCH_GRID};
use crate::error::{PipelineError, PipelineResult};
use crate::image::Mask;
use crate::layers::{position_constant, Attention, LayerNorm, Linear};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Tensor, TensorError};
use crate::seeds::derive_seed;
use crate::world::IMG;

/// Mask resolution (image resolution).
pub const MASK_RES: usize = IMG;
/// Dice smoothing term: avoids 0/0 on empty masks.
pub const DICE_EPS: f64 = 1.0;

const DEC_HEADS: usize = 4;

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_q: LayerNorm,
    attn: Attention,
    ln_m: LayerNorm,
    mlp_up: Linear,
    mlp_down: Linear,
}

impl DecoderLayer {
    fn seeded(rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / D_MODEL as f64).sqrt();
        Self {
            ln_q: LayerNorm::new(D_MODEL),
            attn: Attention::seeded(D_MODEL, DEC_HEADS, rng),
            ln_m: LayerNorm::new(D_MODEL),
            mlp_up: Linear::seeded(D_MODEL, 2 * D_MODEL, std, true, rng),
            mlp_down: Linear::seeded(2 * D_MODEL, D_MODEL, std, true, rng),
        }
    }

    fn set_trainable(&mut self, flag: bool) {
        self.ln_q.set_trainable(flag);
        self.attn.set_trainable(flag);
        self.ln_m.set_trainable(flag);
        self.mlp_up.set_trainable(flag);
        self.mlp_down.set_trainable(flag);
    }
}

struct DecoderLayerVars {
    ln_q: crate::layers::LayerNormVars,
    attn: crate::layers::AttentionVars,
    ln_m: crate::layers::LayerNormVars,
    mlp_up: crate::layers::LinearVars,
    mlp_down: crate::layers::LinearVars,
}

/// The two-layer mask decoder.
#[derive(Debug, Clone)]
pub struct TokenDecoder {
    img_in: Linear,
    text_layer: DecoderLayer,
    token_layer: DecoderLayer,
    ln_f: LayerNorm,
}

pub struct DecoderVars {
    img_in: crate::layers::LinearVars,
    text_layer: DecoderLayerVars,
    token_layer: DecoderLayerVars,
    ln_f: crate::layers::LayerNormVars,
}

impl TokenDecoder {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "token-decoder"));
        let std = (1.0 / D_MODEL as f64).sqrt();
        let mut dec = Self {
            img_in: Linear::seeded(D_MODEL, D_MODEL, std, true, &mut rng),
            text_layer: DecoderLayer::seeded(&mut rng),
            token_layer: DecoderLayer::seeded(&mut rng),
            ln_f: LayerNorm::new(D_MODEL),
        };
        dec.set_trainable(true);
        dec
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.img_in.set_trainable(flag);
        self.text_layer.set_trainable(flag);
        self.token_layer.set_trainable(flag);
        self.ln_f.set_trainable(flag);
    }

    pub fn bind(&self, tape: &mut Tape) -> DecoderVars {
        let bind_layer = |l: &DecoderLayer, tape: &mut Tape| DecoderLayerVars {
            ln_q: l.ln_q.bind(tape),
            attn: l.attn.bind(tape),
            ln_m: l.ln_m.bind(tape),
            mlp_up: l.mlp_up.bind(tape),
            mlp_down: l.mlp_down.bind(tape),
        };
        DecoderVars {
            img_in: self.img_in.bind(tape),
            text_layer: bind_layer(&self.text_layer, tape),
            token_layer: bind_layer(&self.token_layer, tape),
            ln_f: self.ln_f.bind(tape),
        }
    }

    fn run_layer(
        tape: &mut Tape,
        vars: &DecoderLayerVars,
        mut h: Var,
        kv: Var,
    ) -> PipelineResult<Var> {
        let normed = LayerNorm::forward(tape, &vars.ln_q, h)?;
        let attn = Attention::forward(tape, &vars.attn, normed, kv)?;
        h = tape.add(h, attn)?;
        let normed = LayerNorm::forward(tape, &vars.ln_m, h)?;
        let up = Linear::forward(tape, &vars.mlp_up, normed)?;
        let act = tape.gelu(up);
        let down = Linear::forward(tape, &vars.mlp_down, act)?;
        Ok(tape.add(h, down)?)
    }

    /// Patch-resolution mask logits for the selected `[MASK]` tokens:
    /// `N_PATCHES x mask_rows.len()`. `out_tokens` is the full `n x d`
    /// output-token matrix; `mask_rows` selects the editable ones.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        vars: &DecoderVars,
        image_tokens: &ImageTokens,
        text_emb: Var,
        out_tokens: Var,
        mask_rows: &[usize],
    ) -> PipelineResult<Var> {
        if mask_rows.is_empty() {
            return Err(PipelineError::ZeroInstructions);
        }
        let img = tape.constant(image_tokens.data.clone(), vec![N_PATCHES, D_MODEL])?;
        let img = Linear::forward(tape, &vars.img_in, img)?;
        let pos = position_constant(tape, N_PATCHES, D_MODEL);
        let mut h = tape.add(img, pos)?;

        h = Self::run_layer(tape, &vars.text_layer, h, text_emb)?;
        let mask_tokens = tape.gather_rows(out_tokens, mask_rows)?;
        h = Self::run_layer(tape, &vars.token_layer, h, mask_tokens)?;
        h = LayerNorm::forward(tape, &vars.ln_f, h)?;

        // Scaled dot product of each patch feature with each token embedding.
        let tokens_t = tape.transpose(mask_tokens)?;
        let scores = tape.matmul(h, tokens_t)?;
        Ok(tape.scale(scores, 1.0 / (D_MODEL as f64).sqrt()))
    }

    /// Inference: one binary mask per instruction. `editable[i]` says
    /// whether instruction `i`'s token was classified `[MASK]`; the others
    /// receive all-zero masks without the decoder ever running. When no
    /// token is editable the decoder is not evaluated at all.
    pub fn decode(
        &self,
        tape: &mut Tape,
        vars: &DecoderVars,
        image_tokens: &ImageTokens,
        text_emb: Var,
        out_tokens: Var,
        editable: &[bool],
    ) -> PipelineResult<Vec<Mask>> {
        let n = tape.shape(out_tokens)[0];
        if n != editable.len() {
            return Err(PipelineError::LengthMismatch {
                left: n,
                right: editable.len(),
            });
        }
        let mask_rows: Vec<usize> = (0..n).filter(|&i| editable[i]).collect();
        let mut out = vec![Mask::zeros(MASK_RES, MASK_RES); n];
        if mask_rows.is_empty() {
            return Ok(out);
        }
        let logits =
            self.forward_logits(tape, vars, image_tokens, text_emb, out_tokens, &mask_rows)?;
        let data = tape.data(logits);
        let cols = mask_rows.len();
        for (j, &row) in mask_rows.iter().enumerate() {
            let col: Vec<f64> = (0..N_PATCHES).map(|p| data[p * cols + j]).collect();
            out[row] = mask_from_patch_logits(&col);
        }
        Ok(out)
    }

    pub fn harvest(&mut self, tape: &Tape, vars: &DecoderVars) {
        self.img_in.harvest(tape, &vars.img_in);
        for (l, v) in [
            (&mut self.text_layer, &vars.text_layer),
            (&mut self.token_layer, &vars.token_layer),
        ] {
            l.ln_q.harvest(tape, &v.ln_q);
            l.attn.harvest(tape, &v.attn);
            l.ln_m.harvest(tape, &v.ln_m);
            l.mlp_up.harvest(tape, &v.mlp_up);
            l.mlp_down.harvest(tape, &v.mlp_down);
        }
        self.ln_f.harvest(tape, &vars.ln_f);
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.img_in.visit(&format!("{prefix}.img_in"), f);
        for (name, l) in [("text_layer", &self.text_layer), ("token_layer", &self.token_layer)] {
            l.ln_q.visit(&format!("{prefix}.{name}.ln_q"), f);
            l.attn.visit(&format!("{prefix}.{name}.attn"), f);
            l.ln_m.visit(&format!("{prefix}.{name}.ln_m"), f);
            l.mlp_up.visit(&format!("{prefix}.{name}.mlp_up"), f);
            l.mlp_down.visit(&format!("{prefix}.{name}.mlp_down"), f);
        }
        self.ln_f.visit(&format!("{prefix}.ln_f"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.img_in.visit_mut(&format!("{prefix}.img_in"), f);
        for (name, l) in [
            ("text_layer", &mut self.text_layer),
            ("token_layer", &mut self.token_layer),
        ] {
            l.ln_q.visit_mut(&format!("{prefix}.{name}.ln_q"), f);
            l.attn.visit_mut(&format!("{prefix}.{name}.attn"), f);
            l.ln_m.visit_mut(&format!("{prefix}.{name}.ln_m"), f);
            l.mlp_up.visit_mut(&format!("{prefix}.{name}.mlp_up"), f);
            l.mlp_down.visit_mut(&format!("{prefix}.{name}.mlp_down"), f);
        }
        self.ln_f.visit_mut(&format!("{prefix}.ln_f"), f);
    }
}

/// Sigmoid, threshold at 0.5, nearest-upsample from the patch grid to a
/// full-resolution binary mask.
pub fn mask_from_patch_logits(patch_logits: &[f64]) -> Mask {
    debug_assert_eq!(patch_logits.len(), N_PATCHES);
    let mut mask = Mask::zeros(MASK_RES, MASK_RES);
    for py in 0..PATCH_GRID {
        for px in 0..PATCH_GRID {
            let p = 1.0 / (1.0 + (-patch_logits[py * PATCH_GRID + px]).exp());
            if p >= 0.5 {
                mask.set_rect(px * PATCH, py * PATCH, PATCH, PATCH);
            }
        }
    }
    mask
}

/// Upsample `N_PATCHES x k` patch logits to `MASK_RES^2 x k` image
/// resolution (nearest neighbour).
pub fn upsample_logits(tape: &mut Tape, patch_logits: Var) -> PipelineResult<Var> {
    Ok(tape.upsample_nearest(patch_logits, PATCH_GRID, PATCH)?)
}

/// Soft dice loss on probabilities: `1 - (2*sum(p*g) + eps) / (sum(p) +
/// sum(g) + eps)` with `eps = 1`.
pub fn dice_loss(tape: &mut Tape, probs: Var, gt: Var) -> PipelineResult<Var> {
    if tape.shape(probs) != tape.shape(gt) {
        return Err(PipelineError::Tensor(TensorError::ShapeMismatch {
            op: "dice_loss",
            left: tape.shape(probs).to_vec(),
            right: tape.shape(gt).to_vec(),
        }));
    }
    let inter = {
        let pg = tape.mul(probs, gt)?;
        tape.sum_all(pg)
    };
    let numer = {
        let doubled = tape.scale(inter, 2.0);
        tape.offset(doubled, DICE_EPS)
    };
    let denom = {
        let ps = tape.sum_all(probs);
        let gs = tape.sum_all(gt);
        let sum = tape.add(ps, gs)?;
        tape.offset(sum, DICE_EPS)
    };
    let ratio = tape.div(numer, denom)?;
    let neg = tape.neg(ratio);
    Ok(tape.offset(neg, 1.0))
}

/// Mean per-pixel binary cross-entropy on probabilities in the open
/// interval (0, 1).
pub fn mask_bce_loss(tape: &mut Tape, probs: Var, gt: Var) -> PipelineResult<Var> {
    if tape.shape(probs) != tape.shape(gt) {
        return Err(PipelineError::Tensor(TensorError::ShapeMismatch {
            op: "mask_bce_loss",
            left: tape.shape(probs).to_vec(),
            right: tape.shape(gt).to_vec(),
        }));
    }
    if tape.data(probs).iter().any(|&p| p <= 0.0 || p >= 1.0) {
        return Err(PipelineError::Tensor(TensorError::Degenerate {
            op: "mask_bce_loss",
            detail: "probabilities must lie strictly inside (0, 1)".into(),
        }));
    }
    let ln_p = tape.ln(probs)?;
    let g_lnp = tape.mul(gt, ln_p)?;
    let one_minus_p = {
        let neg = tape.neg(probs);
        tape.offset(neg, 1.0)
    };
    let ln_1mp = tape.ln(one_minus_p)?;
    let one_minus_g = {
        let neg = tape.neg(gt);
        tape.offset(neg, 1.0)
    };
    let g2_ln = tape.mul(one_minus_g, ln_1mp)?;
    let sum = tape.add(g_lnp, g2_ln)?;
    let mean = tape.mean_all(sum);
    Ok(tape.neg(mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Encoders;
    use crate::numerics::gradcheck;
    use crate::world::{gen_episode, EpisodeConfig, SceneConfig};
    use rand::Rng;

    #[test]
    fn all_neg_labels_skip_the_decoder_entirely() {
        let enc = Encoders::seeded(0);
        let dec = TokenDecoder::seeded(0);
        let ep = gen_episode(
            2,
            &EpisodeConfig {
                scene: SceneConfig::default(),
                n_applicable: 0,
                n_nonapplicable: 3,
            },
        )
        .unwrap();
        let toks = enc.vision.encode(&ep.scene.image);
        let text = enc.text.embed_tokens(&ep.prompt_tokens());
        let mut tape = Tape::new();
        let vars = dec.bind(&mut tape);
        let text_v = tape.constant(text.data.clone(), vec![text.m, D_MODEL]).unwrap();
        let out_v = tape.constant(vec![0.1; 3 * D_MODEL], vec![3, D_MODEL]).unwrap();
        let before = tape.len();
        let masks = dec
            .decode(&mut tape, &vars, &toks, text_v, out_v, &[false, false, false])
            .unwrap();
        assert_eq!(tape.len(), before, "decoder must not run for all-NEG");
        assert_eq!(masks.len(), 3);
        assert!(masks.iter().all(Mask::is_empty));
    }

    #[test]
    fn saturated_logits_give_all_ones_mask() {
        let mask = mask_from_patch_logits(&vec![10.0; N_PATCHES]);
        assert_eq!(mask.count_ones(), MASK_RES * MASK_RES);
        let mask = mask_from_patch_logits(&vec![-10.0; N_PATCHES]);
        assert!(mask.is_empty());
    }

    #[test]
    fn decode_produces_binary_patch_aligned_masks() {
        let enc = Encoders::seeded(0);
        let dec = TokenDecoder::seeded(0);
        let ep = gen_episode(
            4,
            &EpisodeConfig {
                scene: SceneConfig {
                    min_objects: 2,
                    ..SceneConfig::default()
                },
                n_applicable: 2,
                n_nonapplicable: 1,
            },
        )
        .unwrap();
        let toks = enc.vision.encode(&ep.scene.image);
        let text = enc.text.embed_tokens(&ep.prompt_tokens());
        let mut tape = Tape::new();
        let vars = dec.bind(&mut tape);
        let text_v = tape.constant(text.data.clone(), vec![text.m, D_MODEL]).unwrap();
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let o = Tensor::randn(vec![3, D_MODEL], 1.0, &mut rng);
        let out_v = tape.leaf(&o);
        let editable = [true, false, true];
        let masks = dec
            .decode(&mut tape, &vars, &toks, text_v, out_v, &editable)
            .unwrap();
        assert_eq!(masks.len(), 3);
        assert!(masks[1].is_empty());
        for m in &masks {
            assert!(m.data().iter().all(|&v| v <= 1));
        }
        // determinism
        let mut tape2 = Tape::new();
        let vars2 = dec.bind(&mut tape2);
        let text_v2 = tape2.constant(text.data.clone(), vec![text.m, D_MODEL]).unwrap();
        let out_v2 = tape2.leaf(&o);
        let masks2 = dec
            .decode(&mut tape2, &vars2, &toks, text_v2, out_v2, &editable)
            .unwrap();
        assert_eq!(masks, masks2);
    }

    #[test]
    fn dice_loss_perfect_prediction_is_zero() {
        let mut tape = Tape::new();
        let g = tape
            .constant(vec![1.0, 0.0, 1.0, 0.0], vec![4])
            .unwrap();
        let loss = dice_loss(&mut tape, g, g).unwrap();
        assert!(tape.value(loss).abs() < 1e-15);
    }

    #[test]
    fn dice_loss_disjoint_full_confidence() {
        let mut tape = Tape::new();
        let s = 8.0;
        let p = tape
            .constant(
                (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect(),
                vec![16],
            )
            .unwrap();
        let g = tape
            .constant(
                (0..16).map(|i| if i >= 8 { 1.0 } else { 0.0 }).collect(),
                vec![16],
            )
            .unwrap();
        let loss = dice_loss(&mut tape, p, g).unwrap();
        let want = 1.0 - DICE_EPS / (2.0 * s + DICE_EPS);
        assert!((tape.value(loss) - want).abs() <= 1e-12);
    }

    #[test]
    fn dice_half_overlap_matches_direct_formula_oracle() {
        // p = left half ones, g = top half ones on a 4x4 grid.
        let mut p = vec![0.0; 16];
        let mut g = vec![0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                if x < 2 {
                    p[y * 4 + x] = 1.0;
                }
                if y < 2 {
                    g[y * 4 + x] = 1.0;
                }
            }
        }
        // Direct formula oracle: inter = 4, sums = 8 + 8.
        let want = 1.0 - (2.0 * 4.0 + DICE_EPS) / (8.0 + 8.0 + DICE_EPS);
        let mut tape = Tape::new();
        let pv = tape.constant(p, vec![16]).unwrap();
        let gv = tape.constant(g, vec![16]).unwrap();
        let loss = dice_loss(&mut tape, pv, gv).unwrap();
        assert!((tape.value(loss) - want).abs() <= 1e-15);
    }

    #[test]
    fn bce_examples_and_oracle() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![0.5; 6], vec![6]).unwrap();
        let g = tape
            .constant(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0], vec![6])
            .unwrap();
        let loss = mask_bce_loss(&mut tape, p, g).unwrap();
        assert!((tape.value(loss) - std::f64::consts::LN_2).abs() <= 1e-12);

        // Perfect confident prediction.
        let p = tape
            .constant(vec![1.0 - 1e-12, 1e-12], vec![2])
            .unwrap();
        let g = tape.constant(vec![1.0, 0.0], vec![2]).unwrap();
        let loss = mask_bce_loss(&mut tape, p, g).unwrap();
        assert!(tape.value(loss) < 1e-10);

        // Random case against a per-pixel summation oracle.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let probs: Vec<f64> = (0..64).map(|_| rng.gen_range(0.01..0.99)).collect();
        let gts: Vec<f64> = (0..64).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let mut want = 0.0;
        for (p, g) in probs.iter().zip(&gts) {
            want -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
        }
        want /= 64.0;
        let pv = tape.constant(probs, vec![64]).unwrap();
        let gv = tape.constant(gts, vec![64]).unwrap();
        let loss = mask_bce_loss(&mut tape, pv, gv).unwrap();
        assert!((tape.value(loss) - want).abs() <= 1e-12);
    }

    #[test]
    fn bce_rejects_out_of_range_probabilities() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![0.0, 0.5], vec![2]).unwrap();
        let g = tape.constant(vec![0.0, 1.0], vec![2]).unwrap();
        assert!(mask_bce_loss(&mut tape, p, g).is_err());
    }

    #[test]
    fn mask_losses_pass_fd_checks() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        // Check gradients w.r.t. pre-sigmoid logits through both losses.
        let logits = Tensor::randn(vec![16], 1.0, &mut rng).with_grad();
        let gts: Vec<f64> = (0..16).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let report = gradcheck::check(
            &[logits],
            |tape, vars| {
                let gt = tape.constant(gts.clone(), vec![16])?;
                let p = tape.sigmoid(vars[0]);
                let d = dice_loss(tape, p, gt).unwrap();
                let b = mask_bce_loss(tape, p, gt).unwrap();
                Ok(tape.add(d, b)?)
            },
            gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        assert!(
            report.passed(gradcheck::DEFAULT_TOL),
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn fused_bce_with_logits_matches_composed_loss() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let logits: Vec<f64> = (0..32).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let gts: Vec<f64> = (0..32).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let mut tape = Tape::new();
        let lv = tape.constant(logits, vec![32]).unwrap();
        let gv = tape.constant(gts, vec![32]).unwrap();
        let fused = tape.bce_with_logits(lv, gv).unwrap();
        let p = tape.sigmoid(lv);
        let composed = mask_bce_loss(&mut tape, p, gv).unwrap();
        assert!((tape.value(fused) - tape.value(composed)).abs() <= 1e-12);
    }

    #[test]
    fn decoder_gradients_pass_fd_check() {
        let enc = Encoders::seeded(0);
        let dec = TokenDecoder::seeded(3);
        let ep = gen_episode(
            6,
            &EpisodeConfig {
                scene: SceneConfig::default(),
                n_applicable: 1,
                n_nonapplicable: 0,
            },
        )
        .unwrap();
        let toks = enc.vision.encode(&ep.scene.image);
        let text = enc.text.embed_tokens(&ep.prompt_tokens());
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let o = Tensor::randn(vec![1, D_MODEL], 1.0, &mut rng).with_grad();
        let gt_mask: Vec<f64> = ep.instructions[0]
            .target_mask
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let report = gradcheck::check(
            &[o],
            |tape, vars| {
                let dvars = dec.bind(tape);
                let text_v = tape.constant(text.data.clone(), vec![text.m, D_MODEL])?;
                let logits = dec
                    .forward_logits(tape, &dvars, &toks, text_v, vars[0], &[0])
                    .unwrap();
                let up = upsample_logits(tape, logits).unwrap();
                let gt = tape.constant(gt_mask.clone(), vec![MASK_RES * MASK_RES, 1])?;
                let p = tape.sigmoid(up);
                let d = dice_loss(tape, p, gt).unwrap();
                let b = tape.bce_with_logits(up, gt)?;
                Ok(tape.add(d, b)?)
            },
            gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        assert!(
            report.passed(gradcheck::DEFAULT_TOL),
            "max rel err {}",
            report.max_rel_err
        );
    }
}
