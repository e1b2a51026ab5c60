//! Instruction head: a small joint transformer over image patches and
//! prompt tokens that emits one output token per instruction, classified
//! as editable (`[MASK]`) or not (`[NEG]`).
//!
//! The prompt carries one boundary marker per instruction; the hidden state
//! at each marker is read out as that instruction's output token. Ties in
//! the class logits resolve to `[NEG]`: when uncertain, do not edit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{ImageTokens, D_MODEL, N_PATCHES};
use crate::error::{PipelineError, PipelineResult};
use crate::layers::{position_constant, Attention, LayerNorm, Linear};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Tensor;
use crate::seeds::derive_seed;
use crate::vocab::{self, TokenId, SEP};

pub const HEAD_BLOCKS: usize = 2;
pub const HEAD_HEADS: usize = 4;
pub const MLP_HIDDEN: usize = 2 * D_MODEL;

/// Per-instruction classification outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Mask,
    Neg,
}

impl Label {
    pub fn editable(self) -> bool {
        matches!(self, Label::Mask)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
}

impl Block {
    fn seeded(rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / D_MODEL as f64).sqrt();
        // Output-side projections start near zero so each block begins as
        // an identity map and the adapters write circuits onto a clean
        // residual stream.
        let mut attn = Attention::seeded(D_MODEL, HEAD_HEADS, rng);
        attn.wo = Linear::seeded(D_MODEL, D_MODEL, 0.02, false, rng);
        Self {
            ln1: LayerNorm::new(D_MODEL),
            attn,
            ln2: LayerNorm::new(D_MODEL),
            mlp1: Linear::seeded(D_MODEL, MLP_HIDDEN, std, true, rng),
            mlp2: Linear::seeded(MLP_HIDDEN, D_MODEL, 0.02, true, rng),
        }
    }
}

struct BlockVars {
    ln1: crate::layers::LayerNormVars,
    attn: crate::layers::AttentionVars,
    ln2: crate::layers::LayerNormVars,
    mlp1: crate::layers::LinearVars,
    mlp2: crate::layers::LinearVars,
}

/// The joint image+instruction transformer.
#[derive(Debug, Clone)]
pub struct InstructionHead {
    pub tok_embed: Linear, // vocab x D_MODEL table (lookup, not matmul)
    pub img_proj: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    pub class_head: Linear,
}

pub struct HeadVars {
    tok_embed: crate::layers::LinearVars,
    tok_table: Option<Var>,
    img_proj: crate::layers::LinearVars,
    blocks: Vec<BlockVars>,
    ln_f: crate::layers::LayerNormVars,
    class_head: crate::layers::LinearVars,
}

/// Output token set: one embedding row and one `[MASK]/[NEG]` logit pair
/// per instruction.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub embeddings: Var,   // n x D_MODEL
    pub class_logits: Var, // n x 2, columns ordered [MASK], [NEG]
    pub n: usize,
}

impl InstructionHead {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "instruction-head"));
        let std = (1.0 / D_MODEL as f64).sqrt();
        Self {
            tok_embed: Linear::seeded(vocab::vocab_size(), D_MODEL, 1.0, false, &mut rng),
            img_proj: Linear::seeded(D_MODEL, D_MODEL, std, true, &mut rng),
            blocks: (0..HEAD_BLOCKS).map(|_| Block::seeded(&mut rng)).collect(),
            ln_f: LayerNorm::new(D_MODEL),
            class_head: Linear::seeded(D_MODEL, 2, std, true, &mut rng),
        }
    }

    /// Mark every head parameter trainable (or frozen).
    pub fn set_trainable(&mut self, flag: bool) {
        self.tok_embed.set_trainable(flag);
        self.img_proj.set_trainable(flag);
        for b in &mut self.blocks {
            b.ln1.set_trainable(flag);
            b.attn.set_trainable(flag);
            b.ln2.set_trainable(flag);
            b.mlp1.set_trainable(flag);
            b.mlp2.set_trainable(flag);
        }
        self.ln_f.set_trainable(flag);
        self.class_head.set_trainable(flag);
    }

    /// Attach low-rank adapters to every pretrained-style 2-D weight and
    /// freeze the bases. The class head is a new task head with no base
    /// knowledge worth preserving, so it trains in full instead.
    pub fn apply_lora_all(&mut self, rank: usize, scale: f64, seed: u64) -> PipelineResult<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "head-lora"));
        self.tok_embed.apply_lora(rank, scale, &mut rng)?;
        self.img_proj.apply_lora(rank, scale, &mut rng)?;
        for b in &mut self.blocks {
            b.attn.apply_lora(rank, scale, &mut rng)?;
            b.mlp1.apply_lora(rank, scale, &mut rng)?;
            b.mlp2.apply_lora(rank, scale, &mut rng)?;
        }
        self.class_head.set_trainable(true);
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            tok_embed: self.tok_embed.bind(tape),
            tok_table: None,
            img_proj: self.img_proj.bind(tape),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    ln1: b.ln1.bind(tape),
                    attn: b.attn.bind(tape),
                    ln2: b.ln2.bind(tape),
                    mlp1: b.mlp1.bind(tape),
                    mlp2: b.mlp2.bind(tape),
                })
                .collect(),
            ln_f: self.ln_f.bind(tape),
            class_head: self.class_head.bind(tape),
        }
    }

    /// Effective embedding table (base plus adapter) as a tape value.
    fn embed_table(tape: &mut Tape, vars: &mut HeadVars) -> PipelineResult<Var> {
        if let Some(t) = vars.tok_table {
            return Ok(t);
        }
        let table = vars.tok_embed.table(tape)?;
        vars.tok_table = Some(table);
        Ok(table)
    }

    /// Run the joint transformer. `use_positions = false` is a diagnostic
    /// mode that drops the positional signal, making the forward pass
    /// equivariant to instruction permutations.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &mut HeadVars,
        image_tokens: &ImageTokens,
        prompt: &[TokenId],
        use_positions: bool,
    ) -> PipelineResult<HeadOutput> {
        let sep = vocab::token_id(SEP).expect("separator in vocabulary");
        let boundaries: Vec<usize> = prompt
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == sep)
            .map(|(i, _)| i)
            .collect();
        if boundaries.is_empty() {
            return Err(PipelineError::ZeroInstructions);
        }
        let m = prompt.len();

        let table = Self::embed_table(tape, vars)?;
        let text = tape.gather_rows(table, prompt)?;
        let img_const = tape.constant(image_tokens.data.clone(), vec![N_PATCHES, D_MODEL])?;
        let img = Linear::forward(tape, &vars.img_proj, img_const)?;
        let mut h = tape.concat(&[img, text], 0)?;
        if use_positions {
            let pos = position_constant(tape, N_PATCHES + m, D_MODEL);
            h = tape.add(h, pos)?;
        }

        for b in &vars.blocks {
            let normed = LayerNorm::forward(tape, &b.ln1, h)?;
            let attn = Attention::forward(tape, &b.attn, normed, normed)?;
            h = tape.add(h, attn)?;
            let normed = LayerNorm::forward(tape, &b.ln2, h)?;
            let up = Linear::forward(tape, &b.mlp1, normed)?;
            let act = tape.gelu(up);
            let down = Linear::forward(tape, &b.mlp2, act)?;
            h = tape.add(h, down)?;
        }
        let h = LayerNorm::forward(tape, &vars.ln_f, h)?;

        let out_rows: Vec<usize> = boundaries.iter().map(|&b| N_PATCHES + b).collect();
        let embeddings = tape.gather_rows(h, &out_rows)?;
        let class_logits = Linear::forward(tape, &vars.class_head, embeddings)?;
        Ok(HeadOutput {
            embeddings,
            class_logits,
            n: boundaries.len(),
        })
    }

    pub fn harvest(&mut self, tape: &Tape, vars: &HeadVars) {
        self.tok_embed.harvest(tape, &vars.tok_embed);
        self.img_proj.harvest(tape, &vars.img_proj);
        for (b, v) in self.blocks.iter_mut().zip(&vars.blocks) {
            b.ln1.harvest(tape, &v.ln1);
            b.attn.harvest(tape, &v.attn);
            b.ln2.harvest(tape, &v.ln2);
            b.mlp1.harvest(tape, &v.mlp1);
            b.mlp2.harvest(tape, &v.mlp2);
        }
        self.ln_f.harvest(tape, &vars.ln_f);
        self.class_head.harvest(tape, &vars.class_head);
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.tok_embed.visit(&format!("{prefix}.tok_embed"), f);
        self.img_proj.visit(&format!("{prefix}.img_proj"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.ln1.visit(&format!("{prefix}.block{i}.ln1"), f);
            b.attn.visit(&format!("{prefix}.block{i}.attn"), f);
            b.ln2.visit(&format!("{prefix}.block{i}.ln2"), f);
            b.mlp1.visit(&format!("{prefix}.block{i}.mlp1"), f);
            b.mlp2.visit(&format!("{prefix}.block{i}.mlp2"), f);
        }
        self.ln_f.visit(&format!("{prefix}.ln_f"), f);
        self.class_head.visit(&format!("{prefix}.class_head"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.tok_embed.visit_mut(&format!("{prefix}.tok_embed"), f);
        self.img_proj.visit_mut(&format!("{prefix}.img_proj"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.ln1.visit_mut(&format!("{prefix}.block{i}.ln1"), f);
            b.attn.visit_mut(&format!("{prefix}.block{i}.attn"), f);
            b.ln2.visit_mut(&format!("{prefix}.block{i}.ln2"), f);
            b.mlp1.visit_mut(&format!("{prefix}.block{i}.mlp1"), f);
            b.mlp2.visit_mut(&format!("{prefix}.block{i}.mlp2"), f);
        }
        self.ln_f.visit_mut(&format!("{prefix}.ln_f"), f);
        self.class_head.visit_mut(&format!("{prefix}.class_head"), f);
    }
}

/// Per-row argmax with ties resolved to `[NEG]`.
pub fn classify(class_logits: &[f64], n: usize) -> Vec<Label> {
    (0..n)
        .map(|i| {
            if class_logits[2 * i] > class_logits[2 * i + 1] {
                Label::Mask
            } else {
                Label::Neg
            }
        })
        .collect()
}

/// Mean cross-entropy between class logits and ground-truth applicability
/// (applicable maps to `[MASK]`, class index 0).
pub fn token_ce_loss(
    tape: &mut Tape,
    class_logits: Var,
    gt_applicable: &[bool],
) -> PipelineResult<Var> {
    let n = tape.shape(class_logits)[0];
    if n != gt_applicable.len() {
        return Err(PipelineError::LengthMismatch {
            left: n,
            right: gt_applicable.len(),
        });
    }
    let targets: Vec<usize> = gt_applicable.iter().map(|&a| usize::from(!a)).collect();
    Ok(tape.cross_entropy(class_logits, &targets, 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Encoders;
    use crate::world::{gen_episode, EpisodeConfig, SceneConfig};

    fn episode(seed: u64, n_app: usize, n_non: usize) -> crate::world::Episode {
        gen_episode(
            seed,
            &EpisodeConfig {
                scene: SceneConfig {
                    min_objects: 2,
                    ..SceneConfig::default()
                },
                n_applicable: n_app,
                n_nonapplicable: n_non,
            },
        )
        .unwrap()
    }

    #[test]
    fn one_instruction_yields_one_output_token() {
        let enc = Encoders::seeded(0);
        let head = InstructionHead::seeded(0);
        let ep = episode(1, 1, 0);
        let toks = enc.vision.encode(&ep.scene.image);
        let mut tape = Tape::new();
        let mut vars = head.bind(&mut tape);
        let out = head
            .forward(&mut tape, &mut vars, &toks, &ep.prompt_tokens(), true)
            .unwrap();
        assert_eq!(out.n, 1);
        assert_eq!(tape.shape(out.embeddings), &[1, D_MODEL]);
        assert_eq!(tape.shape(out.class_logits), &[1, 2]);
    }

    #[test]
    fn prompt_without_boundary_is_rejected() {
        let enc = Encoders::seeded(0);
        let head = InstructionHead::seeded(0);
        let ep = episode(1, 1, 0);
        let toks = enc.vision.encode(&ep.scene.image);
        let prompt = vocab::tokenize("remove the red box").unwrap();
        let mut tape = Tape::new();
        let mut vars = head.bind(&mut tape);
        assert!(matches!(
            head.forward(&mut tape, &mut vars, &toks, &prompt, true),
            Err(PipelineError::ZeroInstructions)
        ));
    }

    #[test]
    fn output_token_count_tracks_boundary_count() {
        let enc = Encoders::seeded(0);
        let head = InstructionHead::seeded(0);
        for (n_app, n_non) in [(1usize, 1usize), (2, 1), (3, 0)] {
            let ep = episode(7, n_app, n_non);
            let toks = enc.vision.encode(&ep.scene.image);
            let mut tape = Tape::new();
            let mut vars = head.bind(&mut tape);
            let out = head
                .forward(&mut tape, &mut vars, &toks, &ep.prompt_tokens(), true)
                .unwrap();
            assert_eq!(out.n, n_app + n_non);
        }
    }

    #[test]
    fn permuting_instructions_permutes_outputs_without_positions() {
        let enc = Encoders::seeded(0);
        let head = InstructionHead::seeded(0);
        let ep = episode(3, 2, 0);
        let toks = enc.vision.encode(&ep.scene.image);
        let prompt_a = format!(
            "{} {SEP} {} {SEP}",
            ep.instructions[0].text, ep.instructions[1].text
        );
        let prompt_b = format!(
            "{} {SEP} {} {SEP}",
            ep.instructions[1].text, ep.instructions[0].text
        );
        let run = |text: &str| {
            let mut tape = Tape::new();
            let mut vars = head.bind(&mut tape);
            let out = head
                .forward(
                    &mut tape,
                    &mut vars,
                    &toks,
                    &vocab::tokenize(text).unwrap(),
                    false,
                )
                .unwrap();
            tape.data(out.embeddings).to_vec()
        };
        let a = run(&prompt_a);
        let b = run(&prompt_b);
        let d = D_MODEL;
        for i in 0..d {
            assert!((a[i] - b[d + i]).abs() <= 1e-12, "row 0 vs row 1");
            assert!((a[d + i] - b[i]).abs() <= 1e-12, "row 1 vs row 0");
        }
    }

    #[test]
    fn classify_argmax_and_tie_rule() {
        let labels = classify(&[2.0, -1.0, 0.0, 0.0, -3.0, 1.0], 3);
        assert_eq!(labels, vec![Label::Mask, Label::Neg, Label::Neg]);
    }

    #[test]
    fn token_ce_examples() {
        let mut tape = Tape::new();
        let confident = tape
            .constant(vec![30.0, -30.0, -30.0, 30.0], vec![2, 2])
            .unwrap();
        let loss = token_ce_loss(&mut tape, confident, &[true, false]).unwrap();
        assert!(tape.value(loss) < 1e-12);

        let uniform = tape.constant(vec![0.0, 0.0], vec![1, 2]).unwrap();
        let loss = token_ce_loss(&mut tape, uniform, &[true]).unwrap();
        assert!((tape.value(loss) - std::f64::consts::LN_2).abs() <= 1e-12);

        assert!(matches!(
            token_ce_loss(&mut tape, uniform, &[true, false]),
            Err(PipelineError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn token_ce_matches_per_row_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 5;
        let logits: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let apps: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        // Independent oracle: per-row stabilized log-softmax, summed then
        // averaged.
        let mut want = 0.0;
        for i in 0..n {
            let (a, b) = (logits[2 * i], logits[2 * i + 1]);
            let m = a.max(b);
            let denom = ((a - m).exp() + (b - m).exp()).ln();
            let target = if apps[i] { a } else { b };
            want -= target - m - denom;
        }
        want /= n as f64;
        let mut tape = Tape::new();
        let lv = tape.constant(logits, vec![n, 2]).unwrap();
        let loss = token_ce_loss(&mut tape, lv, &apps).unwrap();
        assert!((tape.value(loss) - want).abs() <= 1e-12);
    }
}
