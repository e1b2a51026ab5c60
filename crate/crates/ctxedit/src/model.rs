//! The assembled editing pipeline and its inference path.

use crate::broadcaster::{align, broadcast_ce_loss, TokenBroadcaster};
use crate::checkpoint::Checkpoint;
use crate::decoder::{dice_loss, upsample_logits, TokenDecoder};
use crate::editor::{concat_masks, ConcatenatedMask, Editor, GuidanceConfig};
use crate::decoder::MASK_RES;
use crate::encoders::{Encoders, TextEmbeddings, D_MODEL};
use crate::error::{PipelineError, PipelineResult};
use crate::head::{classify, token_ce_loss, HeadOutput, InstructionHead, Label};
use crate::image::{Image, Mask};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Tensor;
use crate::world::Episode;

/// Low-rank adapter configuration used when a pipeline is built with
/// adapter-based head tuning (see [`Pipeline::seeded_with_adapters`]).
pub const LORA_RANK: usize = 4;
pub const LORA_SCALE: f64 = 2.0;

/// Everything trainable (and the frozen encoders), bundled.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub encoders: Encoders,
    pub head: InstructionHead,
    pub broadcaster: TokenBroadcaster,
    pub decoder: TokenDecoder,
    pub editor: Editor,
    pub surrogate: crate::surrogate::Surrogate,
}

/// Tape bindings for the modules trained in the main and refine phases.
pub struct PipeBindings {
    pub head: crate::head::HeadVars,
    pub broadcaster: crate::broadcaster::BroadcasterVars,
    pub decoder: crate::decoder::DecoderVars,
    pub editor: crate::editor::EditorVars,
}

/// Inference result for one episode.
#[derive(Debug, Clone)]
pub struct Inference {
    pub labels: Vec<Label>,
    pub masks: Vec<Mask>,
    pub alignment: Vec<usize>,
    pub unified_mask: ConcatenatedMask,
    pub edited: Image,
}

impl Pipeline {
    pub fn seeded(seed: u64) -> PipelineResult<Self> {
        let mut head = InstructionHead::seeded(seed);
        head.set_trainable(true);
        Ok(Self {
            encoders: Encoders::seeded(seed),
            head,
            broadcaster: TokenBroadcaster::seeded(seed),
            decoder: TokenDecoder::seeded(seed),
            editor: Editor::seeded(seed),
            surrogate: crate::surrogate::Surrogate::seeded(seed),
        })
    }

    /// Variant with the head's 2-D weights frozen behind low-rank adapters
    /// instead of trained in full.
    pub fn seeded_with_adapters(seed: u64, rank: usize, scale: f64) -> PipelineResult<Self> {
        let mut pipe = Self::seeded(seed)?;
        pipe.head = InstructionHead::seeded(seed);
        pipe.head.apply_lora_all(rank, scale, seed)?;
        Ok(pipe)
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.encoders.visit("encoders", f);
        self.head.visit("head", f);
        self.broadcaster.visit("broadcaster", f);
        self.decoder.visit("decoder", f);
        self.editor.visit("editor", f);
        self.surrogate.visit("surrogate", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoders.visit_mut("encoders", f);
        self.head.visit_mut("head", f);
        self.broadcaster.visit_mut("broadcaster", f);
        self.decoder.visit_mut("decoder", f);
        self.editor.visit_mut("editor", f);
        self.surrogate.visit_mut("surrogate", f);
    }

    /// Bind every module that trains in the main/refine phases onto a tape.
    pub fn bind_main(&self, tape: &mut Tape) -> PipeBindings {
        PipeBindings {
            head: self.head.bind(tape),
            broadcaster: self.broadcaster.bind(tape),
            decoder: self.decoder.bind(tape),
            editor: self.editor.bind(tape),
        }
    }

    /// Pull gradients back from a tape into the main-set modules.
    pub fn harvest_main(&mut self, tape: &Tape, b: &PipeBindings) {
        self.head.harvest(tape, &b.head);
        self.broadcaster.harvest(tape, &b.broadcaster);
        self.decoder.harvest(tape, &b.decoder);
        self.editor.harvest(tape, &b.editor);
    }

    pub fn to_checkpoint(&self, phase: &str) -> Checkpoint {
        let mut ck = Checkpoint {
            phase: phase.to_string(),
            blocks: Vec::new(),
        };
        self.visit(&mut |name, t| {
            ck.blocks.push((name, t.shape().to_vec(), t.data().to_vec()));
        });
        ck
    }

    /// Load parameter values from a checkpoint into a freshly seeded
    /// pipeline skeleton. Every block must match by name and shape; extra
    /// or missing blocks are errors.
    pub fn from_checkpoint(ck: &Checkpoint) -> PipelineResult<Self> {
        let mut pipe = Self::seeded(0)?;
        let mut remaining: std::collections::BTreeMap<&str, (&[usize], &[f64])> = ck
            .blocks
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s.as_slice(), d.as_slice())))
            .collect();
        let mut err: Option<PipelineError> = None;
        pipe.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match remaining.remove(name.as_str()) {
                Some((shape, data)) if shape == t.shape() => {
                    t.data_mut().copy_from_slice(data);
                }
                Some(_) => {
                    err = Some(PipelineError::Checkpoint(format!(
                        "shape mismatch for block {name}"
                    )));
                }
                None => {
                    err = Some(PipelineError::Checkpoint(format!("missing block {name}")));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some((name, _)) = remaining.into_iter().next() {
            return Err(PipelineError::Checkpoint(format!(
                "unexpected extra block {name}"
            )));
        }
        Ok(pipe)
    }

    /// Full inference on one scene + instruction set.
    pub fn infer(
        &self,
        scene_image: &Image,
        prompt_tokens: &[usize],
        cfg: GuidanceConfig,
        sample_seed: u64,
    ) -> PipelineResult<Inference> {
        let image_tokens = self.encoders.vision.encode(scene_image);
        let text = self.encoders.text.embed_tokens(prompt_tokens);
        if text.m == 0 {
            return Err(PipelineError::EmptyText);
        }

        let mut tape = Tape::new();
        let mut head_vars = self.head.bind(&mut tape);
        let out = self
            .head
            .forward(&mut tape, &mut head_vars, &image_tokens, prompt_tokens, true)?;
        let labels = classify(tape.data(out.class_logits), out.n);

        let text_var = tape.constant(text.data.clone(), vec![text.m, D_MODEL])?;
        let bvars = self.broadcaster.bind(&mut tape);
        let sim = self
            .broadcaster
            .similarity(&mut tape, &bvars, out.embeddings, text_var)?;
        let alignment = align(tape.data(sim), out.n, text.m);

        let editable: Vec<bool> = labels.iter().map(|l| l.editable()).collect();
        let dvars = self.decoder.bind(&mut tape);
        let masks = self.decoder.decode(
            &mut tape,
            &dvars,
            &image_tokens,
            text_var,
            out.embeddings,
            &editable,
        )?;

        let unified_mask = concat_masks(&masks, &alignment)?;
        let edited = self.editor.sample(
            &self.encoders.latent,
            scene_image,
            &text,
            &unified_mask,
            cfg,
            sample_seed,
        )?;
        Ok(Inference {
            labels,
            masks,
            alignment,
            unified_mask,
            edited,
        })
    }

    pub fn infer_episode(
        &self,
        episode: &Episode,
        cfg: GuidanceConfig,
        sample_seed: u64,
    ) -> PipelineResult<Inference> {
        self.infer(&episode.scene.image, &episode.prompt_tokens(), cfg, sample_seed)
    }
}

/// Weighted sum of the four main loss components.
pub fn main_loss(
    tape: &mut Tape,
    token_ce: Var,
    broadcast_ce: Var,
    dice: Var,
    bce: Var,
    lambda: [f64; 4],
) -> PipelineResult<Var> {
    let t1 = tape.scale(token_ce, lambda[0]);
    let t2 = tape.scale(broadcast_ce, lambda[1]);
    let t3 = tape.scale(dice, lambda[2]);
    let t4 = tape.scale(bce, lambda[3]);
    let s1 = tape.add(t1, t2)?;
    let s2 = tape.add(t3, t4)?;
    Ok(tape.add(s1, s2)?)
}

/// Teacher-forced training losses for one episode: token CE, broadcast CE,
/// mean dice, mean BCE. Mask losses run over the ground-truth-applicable
/// instructions, on pre-threshold probabilities.
pub struct EpisodeLosses {
    pub token_ce: Var,
    pub broadcast_ce: Var,
    pub dice: Var,
    pub bce: Var,
    pub head_out: HeadOutput,
    pub sim: Var,
    pub text: TextEmbeddings,
    pub text_var: Var,
    pub image_tokens: crate::encoders::ImageTokens,
    pub mask_logit_cols: Option<(Var, Vec<usize>)>, // upsampled logits + rows
}

pub fn episode_losses(
    pipe: &Pipeline,
    tape: &mut Tape,
    bindings: &mut PipeBindings,
    episode: &Episode,
) -> PipelineResult<EpisodeLosses> {
    let image_tokens = pipe.encoders.vision.encode(&episode.scene.image);
    let prompt = episode.prompt_tokens();
    let text = pipe.encoders.text.embed_tokens(&prompt);
    let out = pipe
        .head
        .forward(tape, &mut bindings.head, &image_tokens, &prompt, true)?;
    let applicability = episode.applicability();
    let token_ce = token_ce_loss(tape, out.class_logits, &applicability)?;

    let text_var = tape.constant(text.data.clone(), vec![text.m, D_MODEL])?;
    let sim = pipe
        .broadcaster
        .similarity(tape, &bindings.broadcaster, out.embeddings, text_var)?;
    let gt_align = episode.gt_alignment();
    let broadcast_ce = broadcast_ce_loss(tape, sim, &gt_align)?;

    let app_rows: Vec<usize> = (0..out.n).filter(|&i| applicability[i]).collect();
    let (dice, bce, mask_logit_cols) = if app_rows.is_empty() {
        (tape.constant_scalar(0.0), tape.constant_scalar(0.0), None)
    } else {
        let logits = pipe.decoder.forward_logits(
            tape,
            &bindings.decoder,
            &image_tokens,
            text_var,
            out.embeddings,
            &app_rows,
        )?;
        let up = upsample_logits(tape, logits)?;
        let k = app_rows.len();
        let res = MASK_RES * MASK_RES;
        let mut gt_flat = vec![0.0; res * k];
        for (col, &row) in app_rows.iter().enumerate() {
            for (px, &v) in episode.instructions[row].target_mask.data().iter().enumerate() {
                gt_flat[px * k + col] = v as f64;
            }
        }
        let gt = tape.constant(gt_flat, vec![res, k])?;
        let bce = tape.bce_with_logits(up, gt)?;
        // Dice is computed per mask, then averaged.
        let mut dice_sum = tape.constant_scalar(0.0);
        for col in 0..k {
            let p_col = {
                let logits_col = tape.slice_cols(up, col, 1)?;
                tape.sigmoid(logits_col)
            };
            let g_col = tape.slice_cols(gt, col, 1)?;
            let d = dice_loss(tape, p_col, g_col)?;
            dice_sum = tape.add(dice_sum, d)?;
        }
        let dice = tape.scale(dice_sum, 1.0 / k as f64);
        (dice, bce, Some((up, app_rows)))
    };

    Ok(EpisodeLosses {
        token_ce,
        broadcast_ce,
        dice,
        bce,
        head_out: out,
        sim,
        text,
        text_var,
        image_tokens,
        mask_logit_cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{gen_episode, EpisodeConfig, SceneConfig};

    fn episode(seed: u64) -> Episode {
        gen_episode(
            seed,
            &EpisodeConfig {
                scene: SceneConfig {
                    min_objects: 2,
                    ..SceneConfig::default()
                },
                n_applicable: 2,
                n_nonapplicable: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_restores_every_parameter() {
        let pipe = Pipeline::seeded(5).unwrap();
        let ck = pipe.to_checkpoint("main");
        let loaded = Pipeline::from_checkpoint(&ck).unwrap();
        let mut before = Vec::new();
        pipe.visit(&mut |n, t| before.push((n, t.data().to_vec())));
        let mut after = Vec::new();
        loaded.visit(&mut |n, t| after.push((n, t.data().to_vec())));
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_rejects_missing_blocks() {
        let pipe = Pipeline::seeded(5).unwrap();
        let mut ck = pipe.to_checkpoint("main");
        ck.blocks.pop();
        assert!(matches!(
            Pipeline::from_checkpoint(&ck),
            Err(PipelineError::Checkpoint(_))
        ));
    }

    #[test]
    fn infer_produces_consistent_shapes_and_is_deterministic() {
        let pipe = Pipeline::seeded(3).unwrap();
        let ep = episode(11);
        let cfg = GuidanceConfig::default();
        let a = pipe.infer_episode(&ep, cfg, 7).unwrap();
        let b = pipe.infer_episode(&ep, cfg, 7).unwrap();
        assert_eq!(a.labels.len(), ep.instructions.len());
        assert_eq!(a.masks.len(), ep.instructions.len());
        assert_eq!(a.alignment.len(), ep.prompt_tokens().len());
        assert_eq!(a.unified_mask.m, ep.prompt_tokens().len());
        assert_eq!(a.edited.to_ppm(), b.edited.to_ppm());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn main_loss_weighted_sum_is_exact() {
        let mut tape = Tape::new();
        let a = tape.constant_scalar(0.1);
        let b = tape.constant_scalar(0.2);
        let c = tape.constant_scalar(0.3);
        let d = tape.constant_scalar(0.4);
        let total = main_loss(&mut tape, a, b, c, d, [1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((tape.value(total) - 1.0).abs() <= 1e-15);
        let zero = main_loss(&mut tape, a, b, c, d, [0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(tape.value(zero), 0.0);
    }

    #[test]
    fn episode_losses_are_finite_and_reasonable() {
        let pipe = Pipeline::seeded(3).unwrap();
        let ep = episode(13);
        let mut tape = Tape::new();
        let mut bindings = pipe.bind_main(&mut tape);
        let losses = episode_losses(&pipe, &mut tape, &mut bindings, &ep).unwrap();
        for v in [losses.token_ce, losses.broadcast_ce, losses.dice, losses.bce] {
            assert!(tape.value(v).is_finite());
            assert!(tape.value(v) >= 0.0);
        }
    }
}
