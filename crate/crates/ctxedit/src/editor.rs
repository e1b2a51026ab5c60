//! Latent diffusion editor with two-condition classifier-free guidance and
//! mask-modulated cross-attention.
//!
//! The denoiser is a small down/up network over the 16x16 latent grid with
//! exactly one cross-attention block, placed at the 16x16 resolution — the
//! only point where text enters. The attention map is blended between its
//! text-conditioned and text-ablated forms under a per-(cell, position)
//! binary mask, and the attended values are blended under the same mask, so
//! a zero mask severs the text pathway exactly: the conditioned branch then
//! equals the image-only branch bit for bit, the guidance combination's
//! text term vanishes, and the sampled image is independent of the prompt.
//!
//! Sampling is deterministic: seeded initial noise mixed with the encoded
//! input image, then a fixed number of noise-free (eta = 0) denoising steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{Latent, LatentCodec, TextEmbeddings, D_MODEL, LATENT_CH, LATENT_GRID, LATENT_LEN};
use crate::error::{PipelineError, PipelineResult};
use crate::image::{Image, Mask};
use crate::layers::{LayerNorm, Linear};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{rand_normal, Tensor};
use crate::seeds::derive_seed;

/// Denoising steps.
pub const T_STEPS: usize = 10;
/// Downsampling factor from mask resolution (64) to the attention grid (16).
pub const MASK_POOL: usize = 4;

/// Linear signal schedule: `alpha_bar[t] = (T - t) / (T + 1)`, strictly
/// decreasing in t, never reaching zero.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(T_STEPS)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize) -> Self {
        let alpha_bar = (0..steps)
            .map(|t| (steps - t) as f64 / (steps + 1) as f64)
            .collect();
        Self { alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
}

/// Guidance scales for image and text conditioning.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceConfig {
    pub s_img: f64,
    pub s_text: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s_img: 1.5,
            s_text: 7.5,
        }
    }
}

/// Unified binary mask at attention resolution: `LATENT_LEN x m`, column j
/// holding the pooled mask of the output token aligned to text position j.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatenatedMask {
    pub data: Vec<f64>,
    pub m: usize,
}

impl ConcatenatedMask {
    pub fn zeros(m: usize) -> Self {
        Self {
            data: vec![0.0; LATENT_LEN * m],
            m,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Build the unified mask: column j is the mask of token `alignment[j]`,
/// max-pooled from image resolution to the attention grid (any edited pixel
/// marks its cell editable).
pub fn concat_masks(masks: &[Mask], alignment: &[usize]) -> PipelineResult<ConcatenatedMask> {
    let m = alignment.len();
    let mut pooled: Vec<Option<Vec<f64>>> = vec![None; masks.len()];
    let mut out = ConcatenatedMask::zeros(m);
    for (j, &a) in alignment.iter().enumerate() {
        if a >= masks.len() {
            return Err(PipelineError::Tensor(
                crate::numerics::TensorError::IndexOutOfRange {
                    op: "concat_masks",
                    index: a,
                    bound: masks.len(),
                },
            ));
        }
        if pooled[a].is_none() {
            let p = masks[a].max_pool(MASK_POOL);
            pooled[a] = Some(p.data().iter().map(|&v| v as f64).collect());
        }
        let col = pooled[a].as_ref().expect("filled above");
        for cell in 0..LATENT_LEN {
            out.data[cell * m + j] = col[cell];
        }
    }
    Ok(out)
}

/// The modulated attention map of the editing equation: blend the
/// text-conditioned logits `X` with the text-ablated logits `Y` under the
/// binary mask, scale by `1/sqrt(d)`, and softmax over the text axis.
pub fn modulate_attention(
    tape: &mut Tape,
    x: Var,
    y: Var,
    mask: Var,
    d: usize,
) -> PipelineResult<Var> {
    if tape.shape(x) != tape.shape(y) || tape.shape(x) != tape.shape(mask) {
        return Err(PipelineError::Tensor(
            crate::numerics::TensorError::ShapeMismatch {
                op: "modulate_attention",
                left: tape.shape(x).to_vec(),
                right: tape.shape(y).to_vec(),
            },
        ));
    }
    let xm = tape.mul(x, mask)?;
    let inv = {
        let neg = tape.neg(mask);
        tape.offset(neg, 1.0)
    };
    let ym = tape.mul(y, inv)?;
    let blended = tape.add(xm, ym)?;
    let scaled = tape.scale(blended, 1.0 / (d as f64).sqrt());
    Ok(tape.softmax(scaled, 1)?)
}

/// Conditioning applied to one denoiser evaluation.
pub enum Branch<'a> {
    /// Image and text conditioning with the unified mask (the editing path).
    Full {
        text: Var,
        mask: &'a ConcatenatedMask,
    },
    /// Image conditioning only: the text pathway fully masked out.
    ImageOnly { text: Var },
    /// No conditioning: image latent zeroed, text pathway masked out.
    Unconditioned { text: Var },
}

/// The denoiser network.
#[derive(Debug, Clone)]
pub struct Editor {
    in_proj: Linear,   // (2 * LATENT_CH) -> w
    t_embed: Linear,   // T_STEPS x w table
    ln_attn: LayerNorm,
    wq: Linear,        // w -> d_attn
    wk: Linear,        // D_MODEL -> d_attn
    wv: Linear,        // D_MODEL -> w
    wo: Linear,        // w -> w
    null_text: Tensor, // 1 x D_MODEL trainable null embedding
    mid: Linear,       // w -> w at 8x8
    fuse: Linear,      // 2w -> w after skip concat
    out_proj: Linear,  // w -> LATENT_CH
    pub schedule: NoiseSchedule,
}

const W_HIDDEN: usize = 32;
const D_ATTN: usize = 32;

pub struct EditorVars {
    in_proj: crate::layers::LinearVars,
    t_embed: crate::layers::LinearVars,
    ln_attn: crate::layers::LayerNormVars,
    wq: crate::layers::LinearVars,
    wk: crate::layers::LinearVars,
    wv: crate::layers::LinearVars,
    wo: crate::layers::LinearVars,
    null_text: Var,
    mid: crate::layers::LinearVars,
    fuse: crate::layers::LinearVars,
    out_proj: crate::layers::LinearVars,
}

impl Editor {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "editor"));
        let std = (1.0 / W_HIDDEN as f64).sqrt();
        let mut ed = Self {
            in_proj: Linear::seeded(2 * LATENT_CH, W_HIDDEN, 0.5, true, &mut rng),
            t_embed: Linear::seeded(T_STEPS, W_HIDDEN, 0.1, false, &mut rng),
            ln_attn: LayerNorm::new(W_HIDDEN),
            wq: Linear::seeded(W_HIDDEN, D_ATTN, std, false, &mut rng),
            wk: Linear::seeded(D_MODEL, D_ATTN, std, false, &mut rng),
            wv: Linear::seeded(D_MODEL, W_HIDDEN, std, false, &mut rng),
            wo: Linear::seeded(W_HIDDEN, W_HIDDEN, std, false, &mut rng),
            null_text: Tensor::randn(vec![1, D_MODEL], 0.1, &mut rng),
            mid: Linear::seeded(W_HIDDEN, W_HIDDEN, std, true, &mut rng),
            fuse: Linear::seeded(2 * W_HIDDEN, W_HIDDEN, std, true, &mut rng),
            out_proj: Linear::seeded(W_HIDDEN, LATENT_CH, std, true, &mut rng),
            schedule: NoiseSchedule::default(),
        };
        ed.set_trainable(true);
        ed
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.in_proj.set_trainable(flag);
        self.t_embed.set_trainable(flag);
        self.ln_attn.set_trainable(flag);
        self.wq.set_trainable(flag);
        self.wk.set_trainable(flag);
        self.wv.set_trainable(flag);
        self.wo.set_trainable(flag);
        self.null_text.set_requires_grad(flag);
        self.mid.set_trainable(flag);
        self.fuse.set_trainable(flag);
        self.out_proj.set_trainable(flag);
    }

    pub fn bind(&self, tape: &mut Tape) -> EditorVars {
        EditorVars {
            in_proj: self.in_proj.bind(tape),
            t_embed: self.t_embed.bind(tape),
            ln_attn: self.ln_attn.bind(tape),
            wq: self.wq.bind(tape),
            wk: self.wk.bind(tape),
            wv: self.wv.bind(tape),
            wo: self.wo.bind(tape),
            null_text: tape.leaf(&self.null_text),
            mid: self.mid.bind(tape),
            fuse: self.fuse.bind(tape),
            out_proj: self.out_proj.bind(tape),
        }
    }

    /// Predicted noise for one branch at timestep `t`. `z_t` and `c_img`
    /// are `LATENT_LEN x LATENT_CH` tape values.
    pub fn score(
        &self,
        tape: &mut Tape,
        vars: &EditorVars,
        z_t: Var,
        c_img: Var,
        t: usize,
        branch: &Branch<'_>,
    ) -> PipelineResult<Var> {
        if t >= self.schedule.steps() {
            return Err(PipelineError::Config(format!(
                "timestep {t} outside schedule of {} steps",
                self.schedule.steps()
            )));
        }
        // Image conditioning: zeroed in the unconditioned branch.
        let cond = match branch {
            Branch::Unconditioned { .. } => tape.constant(
                vec![0.0; LATENT_LEN * LATENT_CH],
                vec![LATENT_LEN, LATENT_CH],
            )?,
            _ => c_img,
        };
        let x_in = tape.concat(&[z_t, cond], 1)?;
        let mut h = Linear::forward(tape, &vars.in_proj, x_in)?;
        let t_table = vars.t_embed.table(tape)?;
        let t_row_mat = tape.gather_rows(t_table, &[t])?;
        let t_row = tape.reshape(t_row_mat, vec![W_HIDDEN])?;
        h = tape.add_bias(h, t_row)?;
        h = tape.gelu(h);

        // Cross-attention at the 16x16 grid: the only text pathway.
        let (text, mask) = match branch {
            Branch::Full { text, mask } => (*text, Some(*mask)),
            Branch::ImageOnly { text } | Branch::Unconditioned { text } => (*text, None),
        };
        let m = tape.shape(text)[0];
        if m == 0 {
            return Err(PipelineError::EmptyText);
        }
        let normed = LayerNorm::forward(tape, &vars.ln_attn, h)?;
        let q = Linear::forward(tape, &vars.wq, normed)?;
        let k_text = Linear::forward(tape, &vars.wk, text)?;
        let v_text = Linear::forward(tape, &vars.wv, text)?;
        let ones_m = tape.constant(vec![1.0; m], vec![m, 1])?;
        let null_k = Linear::forward(tape, &vars.wk, vars.null_text)?;
        let null_v = Linear::forward(tape, &vars.wv, vars.null_text)?;
        let k_null = tape.matmul(ones_m, null_k)?;
        let v_null = tape.matmul(ones_m, null_v)?;

        let k_text_t = tape.transpose(k_text)?;
        let x_map = tape.matmul(q, k_text_t)?;
        let k_null_t = tape.transpose(k_null)?;
        let y_map = tape.matmul(q, k_null_t)?;
        let mask_var = match mask {
            Some(cm) => {
                if cm.m != m {
                    return Err(PipelineError::LengthMismatch {
                        left: cm.m,
                        right: m,
                    });
                }
                tape.constant(cm.data.clone(), vec![LATENT_LEN, m])?
            }
            None => tape.constant(vec![0.0; LATENT_LEN * m], vec![LATENT_LEN, m])?,
        };
        let a_mod = modulate_attention(tape, x_map, y_map, mask_var, D_ATTN)?;
        // Values blend under the same mask so the zero-mask case reduces to
        // the null pathway exactly.
        let a_text = tape.mul(a_mod, mask_var)?;
        let inv_mask = {
            let neg = tape.neg(mask_var);
            tape.offset(neg, 1.0)
        };
        let a_null = tape.mul(a_mod, inv_mask)?;
        let attended_text = tape.matmul(a_text, v_text)?;
        let attended_null = tape.matmul(a_null, v_null)?;
        let attended = tape.add(attended_text, attended_null)?;
        let projected = Linear::forward(tape, &vars.wo, attended)?;
        h = tape.add(h, projected)?;

        // Down, mid, up with skip.
        let down = tape.pool_avg2(h, LATENT_GRID)?;
        let mid = Linear::forward(tape, &vars.mid, down)?;
        let mid = tape.gelu(mid);
        let up = tape.upsample_nearest(mid, LATENT_GRID / 2, 2)?;
        let cat = tape.concat(&[h, up], 1)?;
        let fused = Linear::forward(tape, &vars.fuse, cat)?;
        let fused = tape.gelu(fused);
        Ok(Linear::forward(tape, &vars.out_proj, fused)?)
    }

    pub fn harvest(&mut self, tape: &Tape, vars: &EditorVars) {
        self.in_proj.harvest(tape, &vars.in_proj);
        self.t_embed.harvest(tape, &vars.t_embed);
        self.ln_attn.harvest(tape, &vars.ln_attn);
        self.wq.harvest(tape, &vars.wq);
        self.wk.harvest(tape, &vars.wk);
        self.wv.harvest(tape, &vars.wv);
        self.wo.harvest(tape, &vars.wo);
        if let Some(g) = tape.grad(vars.null_text) {
            self.null_text.accumulate_grad(g);
        }
        self.mid.harvest(tape, &vars.mid);
        self.fuse.harvest(tape, &vars.fuse);
        self.out_proj.harvest(tape, &vars.out_proj);
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.in_proj.visit(&format!("{prefix}.in_proj"), f);
        self.t_embed.visit(&format!("{prefix}.t_embed"), f);
        self.ln_attn.visit(&format!("{prefix}.ln_attn"), f);
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        f(format!("{prefix}.null_text"), &self.null_text);
        self.mid.visit(&format!("{prefix}.mid"), f);
        self.fuse.visit(&format!("{prefix}.fuse"), f);
        self.out_proj.visit(&format!("{prefix}.out_proj"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.in_proj.visit_mut(&format!("{prefix}.in_proj"), f);
        self.t_embed.visit_mut(&format!("{prefix}.t_embed"), f);
        self.ln_attn.visit_mut(&format!("{prefix}.ln_attn"), f);
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
        f(format!("{prefix}.null_text"), &mut self.null_text);
        self.mid.visit_mut(&format!("{prefix}.mid"), f);
        self.fuse.visit_mut(&format!("{prefix}.fuse"), f);
        self.out_proj.visit_mut(&format!("{prefix}.out_proj"), f);
    }

    /// Evaluate all three guidance branches off-tape.
    fn score_triplet(
        &self,
        z_t: &[f64],
        c_img: &Latent,
        text: &TextEmbeddings,
        mask: &ConcatenatedMask,
        t: usize,
    ) -> PipelineResult<[Vec<f64>; 3]> {
        let mut out: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (i, kind) in [0usize, 1, 2].into_iter().enumerate() {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape);
            let z = tape.constant(z_t.to_vec(), vec![LATENT_LEN, LATENT_CH])?;
            let ci = tape.constant(c_img.data.clone(), vec![LATENT_LEN, LATENT_CH])?;
            let tv = tape.constant(text.data.clone(), vec![text.m, D_MODEL])?;
            let branch = match kind {
                0 => Branch::Unconditioned { text: tv },
                1 => Branch::ImageOnly { text: tv },
                _ => Branch::Full { text: tv, mask },
            };
            let s = self.score(&mut tape, &vars, z, ci, t, &branch)?;
            out[i] = tape.data(s).to_vec();
        }
        Ok(out)
    }

    /// Deterministic editing run: seeded noise mixed with the encoded input
    /// image, then `T_STEPS` noise-free denoising steps under guidance.
    pub fn sample(
        &self,
        codec: &LatentCodec,
        x_img: &Image,
        text: &TextEmbeddings,
        mask: &ConcatenatedMask,
        cfg: GuidanceConfig,
        seed: u64,
    ) -> PipelineResult<Image> {
        if text.m == 0 {
            return Err(PipelineError::EmptyText);
        }
        if mask.m != text.m {
            return Err(PipelineError::LengthMismatch {
                left: mask.m,
                right: text.m,
            });
        }
        let c_img = codec.encode(x_img);
        let steps = self.schedule.steps();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sample-noise"));
        let noise: Vec<f64> = (0..LATENT_LEN * LATENT_CH)
            .map(|_| rand_normal(&mut rng))
            .collect();
        let ab_last = self.schedule.alpha_bar(steps - 1);
        let mut z: Vec<f64> = c_img
            .data
            .iter()
            .zip(&noise)
            .map(|(s, n)| ab_last.sqrt() * s + (1.0 - ab_last).sqrt() * n)
            .collect();

        for t in (0..steps).rev() {
            let [e_uu, e_iu, e_it] = self.score_triplet(&z, &c_img, text, mask, t)?;
            let e = cfg_combine(&e_uu, &e_iu, &e_it, cfg)?;
            let ab = self.schedule.alpha_bar(t);
            let z0: Vec<f64> = z
                .iter()
                .zip(&e)
                .map(|(zt, et)| (zt - (1.0 - ab).sqrt() * et) / ab.sqrt())
                .collect();
            if t == 0 {
                z = z0;
            } else {
                let ab_prev = self.schedule.alpha_bar(t - 1);
                z = z0
                    .iter()
                    .zip(&e)
                    .map(|(z0, et)| ab_prev.sqrt() * z0 + (1.0 - ab_prev).sqrt() * et)
                    .collect();
            }
        }
        Ok(codec.decode(&Latent { data: z }))
    }
}

/// Two-condition classifier-free guidance combination:
/// `e(uncond) + s_img * (e(img) - e(uncond)) + s_text * (e(img,text) - e(img))`.
pub fn cfg_combine(
    e_uncond: &[f64],
    e_img: &[f64],
    e_full: &[f64],
    cfg: GuidanceConfig,
) -> PipelineResult<Vec<f64>> {
    if e_uncond.len() != e_img.len() || e_img.len() != e_full.len() {
        return Err(PipelineError::LengthMismatch {
            left: e_uncond.len(),
            right: e_full.len(),
        });
    }
    Ok(e_uncond
        .iter()
        .zip(e_img)
        .zip(e_full)
        .map(|((uu, iu), it)| uu + cfg.s_img * (iu - uu) + cfg.s_text * (it - iu))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn schedule_is_strictly_decreasing() {
        let s = NoiseSchedule::default();
        for t in 1..s.steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(s.steps() - 1) > 0.0);
    }

    #[test]
    fn concat_masks_all_zero_and_forced_single() {
        let masks = vec![Mask::zeros(64, 64)];
        let cm = concat_masks(&masks, &[0, 0, 0]).unwrap();
        assert!(cm.is_zero());
        assert_eq!(cm.m, 3);

        let mut m1 = Mask::zeros(64, 64);
        m1.set_rect(8, 8, 16, 16);
        let cm = concat_masks(&[m1.clone()], &[0, 0]).unwrap();
        let pooled = m1.max_pool(MASK_POOL);
        for j in 0..2 {
            for cell in 0..LATENT_LEN {
                assert_eq!(cm.data[cell * 2 + j], pooled.data()[cell] as f64);
            }
        }
    }

    #[test]
    fn concat_masks_rejects_bad_alignment() {
        let masks = vec![Mask::zeros(64, 64)];
        assert!(concat_masks(&masks, &[1]).is_err());
    }

    #[test]
    fn concat_masks_matches_gather_then_pool_oracle() {
        let mut r = rng(3);
        let mut masks = Vec::new();
        for _ in 0..3 {
            let mut m = Mask::zeros(64, 64);
            for _ in 0..4 {
                let x = 8 * r.gen_range(0..6);
                let y = 8 * r.gen_range(0..6);
                m.set_rect(x, y, 8, 8);
            }
            masks.push(m);
        }
        let alignment: Vec<usize> = (0..7).map(|_| r.gen_range(0..3)).collect();
        let cm = concat_masks(&masks, &alignment).unwrap();
        // Oracle: per column, gather the aligned mask then pool each 4x4
        // block independently.
        for (j, &a) in alignment.iter().enumerate() {
            for by in 0..LATENT_GRID {
                for bx in 0..LATENT_GRID {
                    let mut any = 0.0;
                    for dy in 0..MASK_POOL {
                        for dx in 0..MASK_POOL {
                            if masks[a].get(by * MASK_POOL + dy, bx * MASK_POOL + dx) == 1 {
                                any = 1.0;
                            }
                        }
                    }
                    assert_eq!(cm.data[(by * LATENT_GRID + bx) * alignment.len() + j], any);
                }
            }
        }
    }

    #[test]
    fn modulation_collapses_for_uniform_masks() {
        let mut r = rng(11);
        let (cells, m, d) = (6usize, 4usize, 32usize);
        let x: Vec<f64> = (0..cells * m).map(|_| r.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..cells * m).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone(), vec![cells, m]).unwrap();
        let yv = tape.constant(y.clone(), vec![cells, m]).unwrap();
        let ones = tape.constant(vec![1.0; cells * m], vec![cells, m]).unwrap();
        let zeros = tape.constant(vec![0.0; cells * m], vec![cells, m]).unwrap();

        let a_ones = modulate_attention(&mut tape, xv, yv, ones, d).unwrap();
        let x_scaled = tape.scale(xv, 1.0 / (d as f64).sqrt());
        let want_x = tape.softmax(x_scaled, 1).unwrap();
        assert_eq!(tape.data(a_ones), tape.data(want_x));

        let a_zeros = modulate_attention(&mut tape, xv, yv, zeros, d).unwrap();
        let y_scaled = tape.scale(yv, 1.0 / (d as f64).sqrt());
        let want_y = tape.softmax(y_scaled, 1).unwrap();
        assert_eq!(tape.data(a_zeros), tape.data(want_y));
    }

    #[test]
    fn modulation_checkerboard_matches_blend_oracle_and_rows_sum_to_one() {
        let mut r = rng(13);
        let (cells, m, d) = (5usize, 3usize, 32usize);
        let x: Vec<f64> = (0..cells * m).map(|_| r.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..cells * m).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mask: Vec<f64> = (0..cells * m).map(|i| ((i / m + i % m) % 2) as f64).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone(), vec![cells, m]).unwrap();
        let yv = tape.constant(y.clone(), vec![cells, m]).unwrap();
        let mv = tape.constant(mask.clone(), vec![cells, m]).unwrap();
        let a = modulate_attention(&mut tape, xv, yv, mv, d).unwrap();
        // Elementwise blend oracle with an independent softmax.
        for c in 0..cells {
            let blended: Vec<f64> = (0..m)
                .map(|j| {
                    let i = c * m + j;
                    (x[i] * mask[i] + y[i] * (1.0 - mask[i])) / (d as f64).sqrt()
                })
                .collect();
            let max = blended.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = blended.iter().map(|v| (v - max).exp()).sum();
            let mut row_sum = 0.0;
            for j in 0..m {
                let want = (blended[j] - max).exp() / denom;
                let got = tape.data(a)[c * m + j];
                assert!((got - want).abs() <= 1e-12);
                row_sum += got;
            }
            assert!((row_sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cfg_collapses_reproduce_branch_scores() {
        let mut r = rng(17);
        let n = 24;
        let uu: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let iu: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let it: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let combo = |si, st| {
            cfg_combine(&uu, &iu, &it, GuidanceConfig { s_img: si, s_text: st }).unwrap()
        };
        assert_eq!(combo(0.0, 0.0), uu);
        assert_eq!(combo(1.0, 0.0), iu);
        assert_eq!(combo(1.0, 1.0), it);
    }

    #[test]
    fn zero_mask_makes_full_branch_equal_image_branch_bitwise() {
        let ed = Editor::seeded(5);
        let mut r = rng(19);
        let z: Vec<f64> = (0..LATENT_LEN * LATENT_CH).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ci: Vec<f64> = (0..LATENT_LEN * LATENT_CH).map(|_| r.gen_range(-1.0..1.0)).collect();
        let m = 9;
        let text = TextEmbeddings {
            data: (0..m * D_MODEL).map(|_| r.gen_range(-1.0..1.0)).collect(),
            m,
        };
        let mask = ConcatenatedMask::zeros(m);
        let run = |branch_kind: u8| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = ed.bind(&mut tape);
            let zv = tape.constant(z.clone(), vec![LATENT_LEN, LATENT_CH]).unwrap();
            let cv = tape.constant(ci.clone(), vec![LATENT_LEN, LATENT_CH]).unwrap();
            let tv = tape.constant(text.data.clone(), vec![m, D_MODEL]).unwrap();
            let branch = match branch_kind {
                0 => Branch::Full { text: tv, mask: &mask },
                _ => Branch::ImageOnly { text: tv },
            };
            let s = ed.score(&mut tape, &vars, zv, cv, 3, &branch).unwrap();
            tape.data(s).to_vec()
        };
        assert_eq!(run(0), run(1), "zero mask must sever the text pathway");
    }

    #[test]
    fn score_is_deterministic_and_text_content_irrelevant_under_zero_mask() {
        let ed = Editor::seeded(6);
        let mut r = rng(23);
        let z: Vec<f64> = (0..LATENT_LEN * LATENT_CH).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ci: Vec<f64> = (0..LATENT_LEN * LATENT_CH).map(|_| r.gen_range(-1.0..1.0)).collect();
        let m = 7;
        let t1 = TextEmbeddings {
            data: (0..m * D_MODEL).map(|_| r.gen_range(-1.0..1.0)).collect(),
            m,
        };
        let t2 = TextEmbeddings {
            data: (0..m * D_MODEL).map(|_| r.gen_range(-1.0..1.0)).collect(),
            m,
        };
        let mask = ConcatenatedMask::zeros(m);
        let run = |text: &TextEmbeddings| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = ed.bind(&mut tape);
            let zv = tape.constant(z.clone(), vec![LATENT_LEN, LATENT_CH]).unwrap();
            let cv = tape.constant(ci.clone(), vec![LATENT_LEN, LATENT_CH]).unwrap();
            let tv = tape.constant(text.data.clone(), vec![m, D_MODEL]).unwrap();
            let s = ed
                .score(&mut tape, &vars, zv, cv, 2, &Branch::Full { text: tv, mask: &mask })
                .unwrap();
            tape.data(s).to_vec()
        };
        assert_eq!(run(&t1), run(&t1), "deterministic");
        assert_eq!(run(&t1), run(&t2), "text content must not matter under zero mask");
    }

    #[test]
    fn editor_gradients_pass_fd_check() {
        let ed = Editor::seeded(7);
        let mut r = rng(29);
        let m = 4;
        let text = Tensor::randn(vec![m, D_MODEL], 1.0, &mut r).with_grad();
        let z = Tensor::randn(vec![LATENT_LEN, LATENT_CH], 1.0, &mut r).with_grad();
        let ci: Vec<f64> = (0..LATENT_LEN * LATENT_CH).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mask_data: Vec<f64> = (0..LATENT_LEN * m).map(|_| f64::from(r.gen_bool(0.4))).collect();
        let mask = ConcatenatedMask {
            data: mask_data,
            m,
        };
        let report = gradcheck::check(
            &[text, z],
            |tape, vars| {
                let evars = ed.bind(tape);
                let cv = tape.constant(ci.clone(), vec![LATENT_LEN, LATENT_CH])?;
                let s = ed
                    .score(tape, &evars, vars[1], cv, 1, &Branch::Full { text: vars[0], mask: &mask })
                    .unwrap();
                let sq = tape.mul(s, s)?;
                Ok(tape.mean_all(sq))
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
    fn sampling_is_deterministic_and_zero_mask_ignores_text_scale() {
        use crate::encoders::LatentCodec;
        use crate::world::{gen_scene, SceneConfig};
        let ed = Editor::seeded(9);
        let codec = LatentCodec;
        let scene = gen_scene(12, &SceneConfig::default()).unwrap();
        let m = 11;
        let mut r = rng(31);
        let text = TextEmbeddings {
            data: (0..m * D_MODEL).map(|_| r.gen_range(-1.0..1.0)).collect(),
            m,
        };
        let mask = ConcatenatedMask::zeros(m);
        let base = ed
            .sample(&codec, &scene.image, &text, &mask, GuidanceConfig { s_img: 1.5, s_text: 0.0 }, 7)
            .unwrap();
        for s_text in [7.5, 20.0] {
            let out = ed
                .sample(&codec, &scene.image, &text, &mask, GuidanceConfig { s_img: 1.5, s_text }, 7)
                .unwrap();
            assert_eq!(out.to_ppm(), base.to_ppm(), "text scale must not matter");
        }
        let again = ed
            .sample(&codec, &scene.image, &text, &mask, GuidanceConfig { s_img: 1.5, s_text: 0.0 }, 7)
            .unwrap();
        assert_eq!(base.to_ppm(), again.to_ppm(), "same seed, same bytes");
    }
}
