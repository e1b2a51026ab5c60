//! Training phases and their freeze contracts.
//!
//! Three phases run in order. The main phase trains the instruction head's
//! adapters, the broadcaster, the decoder, and the denoiser against the
//! four-term weighted loss plus the denoiser's noise-prediction error. The
//! surrogate phase freezes all of that and regresses the scorer onto actual
//! editing outcomes. The refinement phase freezes the surrogate and adds
//! its (prediction - oracle)^2 error to the main loss, with a straight-
//! through estimator carrying gradients from the binarized masks back into
//! the mask pipeline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::editor::{concat_masks, Branch, GuidanceConfig};
use crate::encoders::{mean_pool, D_MODEL, LATENT_CH, LATENT_LEN};
use crate::error::{PipelineError, PipelineResult};
use crate::head::classify;
use crate::kvrecord::parse_config;
use crate::model::{episode_losses, main_loss, Pipeline};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{rand_normal, Tensor};
use crate::optim::AdamW;
use crate::seeds::derive_seed;
use crate::surrogate::{coverage_basis, pool_coverage, refine_step, surrogate_mse_loss, ORACLE_SCORE};
use crate::world::Episode;

/// Training phases, in required order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Main,
    Surrogate,
    Refine,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Main => "main",
            Phase::Surrogate => "surrogate",
            Phase::Refine => "refine",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "main" => Some(Phase::Main),
            "surrogate" => Some(Phase::Surrogate),
            "refine" => Some(Phase::Refine),
            _ => None,
        }
    }

    /// Phase tag the input checkpoint must carry.
    pub fn prerequisite(self) -> Option<&'static str> {
        match self {
            Phase::Main => None,
            Phase::Surrogate => Some("main"),
            Phase::Refine => Some("surrogate"),
        }
    }
}

/// Hyperparameters; defaults are the desk-scale training recipe.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda: [f64; 4],
    pub lambda5: f64,
    pub lr_main: f64,
    pub lr_surrogate: f64,
    pub lr_refine: f64,
    pub steps_main: usize,
    pub steps_surrogate: usize,
    pub steps_refine: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub s_img: f64,
    pub s_text: f64,
    pub noise_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: [1.0, 1.0, 1.0, 1.0],
            lambda5: 10.0,
            lr_main: 3e-4,
            lr_surrogate: 3e-4,
            lr_refine: 1e-4,
            steps_main: 2000,
            steps_surrogate: 500,
            steps_refine: 500,
            batch_size: 16,
            seed: 0,
            s_img: 1.5,
            s_text: 7.5,
            noise_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            s_img: self.s_img,
            s_text: self.s_text,
        }
    }

    /// Parse a `key = value` config file over the defaults. Unknown keys
    /// are rejected.
    pub fn from_config_text(text: &str) -> PipelineResult<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_config(text)? {
            let bad = || PipelineError::Config(format!("bad value {v:?} for key {k}"));
            let f = || v.parse::<f64>().map_err(|_| bad());
            let u = || v.parse::<usize>().map_err(|_| bad());
            match k.as_str() {
                "lambda1" => cfg.lambda[0] = f()?,
                "lambda2" => cfg.lambda[1] = f()?,
                "lambda3" => cfg.lambda[2] = f()?,
                "lambda4" => cfg.lambda[3] = f()?,
                "lambda5" => cfg.lambda5 = f()?,
                "lr_main" => cfg.lr_main = f()?,
                "lr_surrogate" => cfg.lr_surrogate = f()?,
                "lr_refine" => cfg.lr_refine = f()?,
                "steps_main" => cfg.steps_main = u()?,
                "steps_surrogate" => cfg.steps_surrogate = u()?,
                "steps_refine" => cfg.steps_refine = u()?,
                "batch_size" => cfg.batch_size = u()?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "s_img" => cfg.s_img = f()?,
                "s_text" => cfg.s_text = f()?,
                "noise_loss_weight" => cfg.noise_loss_weight = f()?,
                _ => return Err(PipelineError::Config(format!("unknown config key {k:?}"))),
            }
        }
        if cfg.batch_size == 0 || cfg.lr_main <= 0.0 || cfg.lr_surrogate <= 0.0 || cfg.lr_refine <= 0.0
        {
            return Err(PipelineError::Config("rates and batch size must be positive".into()));
        }
        if cfg.lambda.iter().any(|&l| l < 0.0) || cfg.lambda5 < 0.0 {
            return Err(PipelineError::Config("loss weights must be non-negative".into()));
        }
        Ok(cfg)
    }

    /// Stable-order key/value echo for reports.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: String| out.push((format!("config_{k}"), v));
        push("lambda1", self.lambda[0].to_string());
        push("lambda2", self.lambda[1].to_string());
        push("lambda3", self.lambda[2].to_string());
        push("lambda4", self.lambda[3].to_string());
        push("lambda5", self.lambda5.to_string());
        push("lr_main", self.lr_main.to_string());
        push("lr_surrogate", self.lr_surrogate.to_string());
        push("lr_refine", self.lr_refine.to_string());
        push("steps_main", self.steps_main.to_string());
        push("steps_surrogate", self.steps_surrogate.to_string());
        push("steps_refine", self.steps_refine.to_string());
        push("batch_size", self.batch_size.to_string());
        push("seed", self.seed.to_string());
        push("s_img", self.s_img.to_string());
        push("s_text", self.s_text.to_string());
        push("noise_loss_weight", self.noise_loss_weight.to_string());
        out
    }
}

/// Per-phase trainable sets: the instruction head, broadcaster, decoder,
/// and denoiser in the main and refine phases (frozen-based head weights
/// keep their adapters as the trainable part); the surrogate exclusively in
/// its own phase; the encoders never.
pub fn set_phase_trainability(pipe: &mut Pipeline, phase: Phase) {
    let surrogate_on = phase == Phase::Surrogate;
    let main_on = !surrogate_on;
    let head_adapted = pipe.head.tok_embed.adapter.is_some();
    pipe.visit_mut(&mut |name, t| {
        let flag = if name.starts_with("encoders.") {
            false
        } else if name.starts_with("surrogate.") {
            surrogate_on
        } else if name.starts_with("head.") && head_adapted {
            main_on && (name.contains(".lora_") || name.starts_with("head.class_head"))
        } else {
            main_on
        };
        t.set_requires_grad(flag);
    });
}

/// Names and mutable references of the currently trainable parameters, in
/// deterministic visit order.
fn trainable_params(pipe: &mut Pipeline) -> Vec<(String, *mut Tensor)> {
    let mut out = Vec::new();
    pipe.visit_mut(&mut |name, t| {
        if t.requires_grad() {
            out.push((name, t as *mut Tensor));
        }
    });
    out
}

fn optimizer_step(pipe: &mut Pipeline, opt: &mut AdamW) {
    let raw = trainable_params(pipe);
    // The raw pointers come from one exclusive borrow and are distinct
    // fields, so reborrowing them for the optimizer step is sound.
    let mut params: Vec<(String, &mut Tensor)> = raw
        .into_iter()
        .map(|(n, p)| (n, unsafe { &mut *p }))
        .collect();
    opt.step(&mut params);
}

/// Losses recorded at one trace point.
#[derive(Debug, Clone, Copy)]
pub struct TracePoint {
    pub step: usize,
    pub total: f64,
    pub token_ce: f64,
    pub broadcast_ce: f64,
    pub dice: f64,
    pub bce: f64,
    pub noise: f64,
    pub surrogate_term: f64,
}

/// Outcome of one training phase.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub trace: Vec<TracePoint>,
    /// Surrogate phase only: final validation MSE and the
    /// constant-mean-predictor baseline.
    pub surrogate_val_mse: Option<f64>,
    pub surrogate_val_baseline: Option<f64>,
}

/// Warmup then cosine decay to 10% of the base rate.
fn lr_schedule(step: usize, total: usize) -> f64 {
    let warmup = (total / 20).max(1);
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    0.1 + 0.9 * cosine
}

/// Ground-truth unified mask for the denoiser's training conditioning.
fn gt_unified_mask(ep: &Episode) -> PipelineResult<crate::editor::ConcatenatedMask> {
    let masks: Vec<crate::image::Mask> =
        ep.instructions.iter().map(|i| i.target_mask.clone()).collect();
    concat_masks(&masks, &ep.gt_alignment())
}

/// Noise-prediction MSE for one episode at a sampled timestep.
fn noise_loss(
    pipe: &Pipeline,
    tape: &mut Tape,
    bindings: &crate::model::PipeBindings,
    ep: &Episode,
    text_var: Var,
    rng: &mut ChaCha8Rng,
) -> PipelineResult<Var> {
    let steps = pipe.editor.schedule.steps();
    let t = rng.gen_range(0..steps);
    let z_goal = pipe.encoders.latent.encode(&ep.goal_image);
    let c_img = pipe.encoders.latent.encode(&ep.scene.image);
    let ab = pipe.editor.schedule.alpha_bar(t);
    let noise: Vec<f64> = (0..LATENT_LEN * LATENT_CH).map(|_| rand_normal(rng)).collect();
    let z_t: Vec<f64> = z_goal
        .data
        .iter()
        .zip(&noise)
        .map(|(z, n)| ab.sqrt() * z + (1.0 - ab).sqrt() * n)
        .collect();
    let z_var = tape.constant(z_t, vec![LATENT_LEN, LATENT_CH])?;
    let c_var = tape.constant(c_img.data, vec![LATENT_LEN, LATENT_CH])?;
    let mask = gt_unified_mask(ep)?;
    let pred = pipe.editor.score(
        tape,
        &bindings.editor,
        z_var,
        c_var,
        t,
        &Branch::Full {
            text: text_var,
            mask: &mask,
        },
    )?;
    let target = tape.constant(noise, vec![LATENT_LEN, LATENT_CH])?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// The surrogate's `1 x D_MODEL` constant inputs for an episode plus the
/// actual similarity score of a full editing run.
struct SurrogateSample {
    img_embed: Vec<f64>,
    instr_embed: Vec<f64>,
    summary: Vec<f64>,
    actual: f64,
}

fn surrogate_sample(
    pipe: &Pipeline,
    ep: &Episode,
    cfg: &TrainConfig,
    sample_seed: u64,
) -> PipelineResult<SurrogateSample> {
    let inf = pipe.infer_episode(ep, cfg.guidance(), sample_seed)?;
    let actual = pipe
        .encoders
        .text_image_score(&ep.goal_description, &inf.edited)?;
    let img_embed = pipe.encoders.clip_embed_image(&ep.scene.image);
    let prompt = ep.prompt_tokens();
    let text = pipe.encoders.text.embed_tokens(&prompt);
    let instr_embed = mean_pool(&text.data, text.m);
    // Coverage fractions per text position, pooled through the fixed basis.
    let m = inf.unified_mask.m;
    let mut coverage = vec![0.0; m];
    for j in 0..m {
        let mut acc = 0.0;
        for cell in 0..LATENT_LEN {
            acc += inf.unified_mask.data[cell * m + j];
        }
        coverage[j] = acc / LATENT_LEN as f64;
    }
    let mut tape = Tape::new();
    let basis = coverage_basis(&mut tape, m);
    let cov = tape.constant(coverage, vec![1, m])?;
    let pooled = pool_coverage(&mut tape, cov, basis)?;
    let summary = tape.data(pooled).to_vec();
    Ok(SurrogateSample {
        img_embed,
        instr_embed,
        summary,
        actual,
    })
}

fn surrogate_batch_mse(
    pipe: &Pipeline,
    samples: &[&SurrogateSample],
) -> PipelineResult<(Tape, Var, crate::surrogate::SurrogateVars)> {
    let mut tape = Tape::new();
    let vars = pipe.surrogate.bind(&mut tape);
    let mut preds = Vec::with_capacity(samples.len());
    let mut actuals = Vec::with_capacity(samples.len());
    for s in samples {
        let img = tape.constant(s.img_embed.clone(), vec![1, D_MODEL])?;
        let ins = tape.constant(s.instr_embed.clone(), vec![1, D_MODEL])?;
        let cov = tape.constant(s.summary.clone(), vec![1, D_MODEL])?;
        let p = pipe.surrogate.predict(&mut tape, &vars, img, ins, cov)?;
        let p = tape.reshape(p, vec![1, 1])?;
        preds.push(p);
        actuals.push(s.actual);
    }
    let stacked = tape.concat(&preds, 0)?;
    let flat = tape.reshape(stacked, vec![samples.len()])?;
    let loss = surrogate_mse_loss(&mut tape, flat, &actuals)?;
    Ok((tape, loss, vars))
}

/// Run one training phase in place. The caller is responsible for loading
/// the right starting checkpoint; this function enforces trainability and
/// returns the loss trace.
pub fn train_phase(
    pipe: &mut Pipeline,
    phase: Phase,
    cfg: &TrainConfig,
    train: &[Episode],
    val: &[Episode],
) -> PipelineResult<PhaseOutcome> {
    if train.is_empty() {
        return Err(PipelineError::EmptySplit);
    }
    set_phase_trainability(pipe, phase);
    match phase {
        Phase::Main => run_main_like(pipe, cfg, train, false),
        Phase::Refine => run_main_like(pipe, cfg, train, true),
        Phase::Surrogate => run_surrogate(pipe, cfg, train, val),
    }
}

fn run_main_like(
    pipe: &mut Pipeline,
    cfg: &TrainConfig,
    train: &[Episode],
    refine: bool,
) -> PipelineResult<PhaseOutcome> {
    let (steps, lr, tag) = if refine {
        (cfg.steps_refine, cfg.lr_refine, "refine")
    } else {
        (cfg.steps_main, cfg.lr_main, "main")
    };
    let mut opt = AdamW::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("train-{tag}")));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = train.len(); // trigger shuffle on first use
    let mut trace = Vec::new();
    let trace_every = (steps / 20).max(1);

    for step in 0..steps {
        opt.lr = lr * lr_schedule(step, steps);
        let mut point = TracePoint {
            step,
            total: 0.0,
            token_ce: 0.0,
            broadcast_ce: 0.0,
            dice: 0.0,
            bce: 0.0,
            noise: 0.0,
            surrogate_term: 0.0,
        };
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ep = &train[order[cursor]];
            cursor += 1;

            let mut tape = Tape::new();
            let mut bindings = pipe.bind_main(&mut tape);
            let losses = episode_losses(pipe, &mut tape, &mut bindings, ep)?;
            let main = main_loss(
                &mut tape,
                losses.token_ce,
                losses.broadcast_ce,
                losses.dice,
                losses.bce,
                cfg.lambda,
            )?;
            let noise = noise_loss(pipe, &mut tape, &bindings, ep, losses.text_var, &mut rng)?;
            let weighted_noise = tape.scale(noise, cfg.noise_loss_weight);
            let mut total = tape.add(main, weighted_noise)?;

            let mut surrogate_term_val = 0.0;
            if refine {
                let predicted = refinement_prediction(pipe, &mut tape, &bindings, ep, &losses)?;
                let before = tape.value(total);
                total = refine_step(
                    &mut tape,
                    total,
                    predicted,
                    ORACLE_SCORE,
                    cfg.lambda5,
                    &pipe.surrogate,
                )?;
                surrogate_term_val = tape.value(total) - before;
            }

            let scaled = tape.scale(total, 1.0 / cfg.batch_size as f64);
            tape.backward(scaled)?;
            pipe.harvest_main(&tape, &bindings);

            point.total += tape.value(total) / cfg.batch_size as f64;
            point.token_ce += tape.value(losses.token_ce) / cfg.batch_size as f64;
            point.broadcast_ce += tape.value(losses.broadcast_ce) / cfg.batch_size as f64;
            point.dice += tape.value(losses.dice) / cfg.batch_size as f64;
            point.bce += tape.value(losses.bce) / cfg.batch_size as f64;
            point.noise += tape.value(noise) / cfg.batch_size as f64;
            point.surrogate_term += surrogate_term_val / cfg.batch_size as f64;
        }
        optimizer_step(pipe, &mut opt);
        if step % trace_every == 0 || step + 1 == steps {
            trace.push(point);
        }
    }
    Ok(PhaseOutcome {
        trace,
        surrogate_val_mse: None,
        surrogate_val_baseline: None,
    })
}

/// Surrogate prediction for the refinement loss, with gradients flowing
/// through the straight-through-binarized mask coverage into the decoder
/// and head. Alignment and labels are the pipeline's hard decisions.
pub fn refinement_prediction(
    pipe: &Pipeline,
    tape: &mut Tape,
    bindings: &crate::model::PipeBindings,
    ep: &Episode,
    losses: &crate::model::EpisodeLosses,
) -> PipelineResult<Var> {
    let n = losses.head_out.n;
    let m = losses.text.m;
    let labels = classify(tape.data(losses.head_out.class_logits), n);
    let alignment = crate::broadcaster::align(tape.data(losses.sim), n, m);
    let pred_rows: Vec<usize> = (0..n).filter(|&i| labels[i].editable()).collect();

    // Coverage of each text position: the straight-through mask mean of the
    // aligned token, or exactly zero for non-editable tokens.
    let coverage_row = if pred_rows.is_empty() {
        tape.constant(vec![0.0; m], vec![1, m])?
    } else {
        let logits = pipe.decoder.forward_logits(
            tape,
            &bindings.decoder,
            &losses.image_tokens,
            losses.text_var,
            losses.head_out.embeddings,
            &pred_rows,
        )?;
        let probs = tape.sigmoid(logits);
        let hard = tape.straight_through_step(probs, 0.5);
        let per_token = tape.col_mean(hard)?; // one coverage per selected token
        let k = pred_rows.len();
        let cov_col = tape.reshape(per_token, vec![k, 1])?;
        let zero_row = tape.constant(vec![0.0], vec![1, 1])?;
        let extended = tape.concat(&[cov_col, zero_row], 0)?;
        let gather: Vec<usize> = alignment
            .iter()
            .map(|&a| pred_rows.iter().position(|&r| r == a).unwrap_or(k))
            .collect();
        let per_position = tape.gather_rows(extended, &gather)?;
        let col = tape.transpose(per_position)?;
        tape.reshape(col, vec![1, m])?
    };
    let basis = coverage_basis(tape, m);
    let summary = pool_coverage(tape, coverage_row, basis)?;

    let img_embed = pipe.encoders.clip_embed_image(&ep.scene.image);
    let instr_embed = mean_pool(&losses.text.data, m);
    let img = tape.constant(img_embed, vec![1, D_MODEL])?;
    let ins = tape.constant(instr_embed, vec![1, D_MODEL])?;
    let svars = pipe.surrogate.bind(tape);
    pipe.surrogate.predict(tape, &svars, img, ins, summary)
}

fn run_surrogate(
    pipe: &mut Pipeline,
    cfg: &TrainConfig,
    train: &[Episode],
    val: &[Episode],
) -> PipelineResult<PhaseOutcome> {
    // Build the regression dataset once: the pipeline's current masks and
    // the actual outcome score of the full editing run.
    let mut samples = Vec::with_capacity(train.len());
    for (i, ep) in train.iter().enumerate() {
        samples.push(surrogate_sample(
            pipe,
            ep,
            cfg,
            derive_seed(cfg.seed, &format!("surrogate-train-{i}")),
        )?);
    }
    let mut val_samples = Vec::with_capacity(val.len());
    for (i, ep) in val.iter().enumerate() {
        val_samples.push(surrogate_sample(
            pipe,
            ep,
            cfg,
            derive_seed(cfg.seed, &format!("surrogate-val-{i}")),
        )?);
    }

    let mut opt = AdamW::new(cfg.lr_surrogate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train-surrogate"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = samples.len();
    let mut trace = Vec::new();
    let trace_every = (cfg.steps_surrogate / 20).max(1);

    for step in 0..cfg.steps_surrogate {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let (mut tape, loss, vars) = surrogate_batch_mse(pipe, &batch)?;
        tape.backward(loss)?;
        pipe.surrogate.harvest(&tape, &vars);
        let loss_val = tape.value(loss);
        optimizer_step(pipe, &mut opt);
        if step % trace_every == 0 || step + 1 == cfg.steps_surrogate {
            trace.push(TracePoint {
                step,
                total: loss_val,
                token_ce: 0.0,
                broadcast_ce: 0.0,
                dice: 0.0,
                bce: 0.0,
                noise: 0.0,
                surrogate_term: loss_val,
            });
        }
    }

    // Validation MSE and the constant-mean-predictor baseline.
    let refs: Vec<&SurrogateSample> = val_samples.iter().collect();
    let (tape, loss, _) = surrogate_batch_mse(pipe, &refs)?;
    let val_mse = tape.value(loss);
    let mean_actual: f64 =
        val_samples.iter().map(|s| s.actual).sum::<f64>() / val_samples.len().max(1) as f64;
    let baseline: f64 = val_samples
        .iter()
        .map(|s| (s.actual - mean_actual) * (s.actual - mean_actual))
        .sum::<f64>()
        / val_samples.len().max(1) as f64;
    Ok(PhaseOutcome {
        trace,
        surrogate_val_mse: Some(val_mse),
        surrogate_val_baseline: Some(baseline),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::parameter_hashes;
    use crate::world::{gen_episode, EpisodeConfig, SceneConfig};

    fn episodes(n: usize, base: u64) -> Vec<Episode> {
        (0..n)
            .map(|i| {
                gen_episode(
                    base + i as u64,
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
            })
            .collect()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            steps_main: 3,
            steps_surrogate: 3,
            steps_refine: 2,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_parsing_rejects_unknown_keys() {
        assert!(TrainConfig::from_config_text("nonsense = 1").is_err());
        let cfg = TrainConfig::from_config_text("lambda5 = 2.5\nsteps_main = 7\n").unwrap();
        assert_eq!(cfg.lambda5, 2.5);
        assert_eq!(cfg.steps_main, 7);
    }

    #[test]
    fn main_phase_decreases_loss_and_freezes_head_bases() {
        let mut pipe = Pipeline::seeded(0).unwrap();
        let train = episodes(4, 100);
        let cfg = TrainConfig {
            steps_main: 12,
            batch_size: 4,
            ..tiny_config()
        };
        let before = parameter_hashes(|f| pipe.visit(f));
        let out = train_phase(&mut pipe, Phase::Main, &cfg, &train, &train).unwrap();
        let after = parameter_hashes(|f| pipe.visit(f));
        assert!(out.trace.last().unwrap().total < out.trace.first().unwrap().total);
        for (name, h) in &before {
            let changed = after[name] != *h;
            if name.starts_with("encoders.") || name.starts_with("surrogate.") {
                assert!(!changed, "{name} must stay frozen in the main phase");
            }
            if name.starts_with("head.") && !name.contains(".lora_") {
                assert!(!changed, "{name} (head base) must stay frozen");
            }
        }
        // Adapters must have moved.
        let moved = before
            .iter()
            .filter(|(n, h)| n.contains(".lora_b") && after[*n] != **h)
            .count();
        assert!(moved > 0, "some adapter B matrices must receive updates");
    }

    #[test]
    fn surrogate_phase_touches_only_surrogate_params() {
        let mut pipe = Pipeline::seeded(1).unwrap();
        let train = episodes(3, 200);
        let cfg = tiny_config();
        let before = parameter_hashes(|f| pipe.visit(f));
        let out = train_phase(&mut pipe, Phase::Surrogate, &cfg, &train, &train).unwrap();
        let after = parameter_hashes(|f| pipe.visit(f));
        for (name, h) in &before {
            let changed = after[name] != *h;
            if !name.starts_with("surrogate.") {
                assert!(!changed, "{name} must stay frozen in the surrogate phase");
            }
        }
        let moved = before
            .iter()
            .filter(|(n, h)| n.starts_with("surrogate.") && after[*n] != **h)
            .count();
        assert!(moved > 0);
        assert!(out.surrogate_val_mse.is_some());
    }

    #[test]
    fn refine_phase_keeps_surrogate_hash_identical() {
        let mut pipe = Pipeline::seeded(2).unwrap();
        let train = episodes(3, 300);
        let cfg = tiny_config();
        train_phase(&mut pipe, Phase::Surrogate, &cfg, &train, &train).unwrap();
        let before = parameter_hashes(|f| pipe.visit(f));
        train_phase(&mut pipe, Phase::Refine, &cfg, &train, &train).unwrap();
        let after = parameter_hashes(|f| pipe.visit(f));
        for (name, h) in &before {
            if name.starts_with("surrogate.") || name.starts_with("encoders.") {
                assert_eq!(after[name], *h, "{name} must not change during refine");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let train = episodes(3, 400);
        let cfg = tiny_config();
        let run = || {
            let mut pipe = Pipeline::seeded(3).unwrap();
            train_phase(&mut pipe, Phase::Main, &cfg, &train, &train).unwrap();
            pipe.to_checkpoint("main").to_bytes()
        };
        assert_eq!(run(), run());
    }
}
