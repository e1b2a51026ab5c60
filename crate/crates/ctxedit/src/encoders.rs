//! Deterministic stub encoders: text, vision, latent codec, and the
//! similarity-scoring projection space.
//!
//! These stand in for pretrained backbones. All parameters are seeded at
//! construction and frozen; every encoder is a pure function of
//! `(parameters, input)`. Outputs are plain `f64` buffers — gradient flow
//! starts downstream of the encoders, so nothing here runs on the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::seeds::derive_seed;
use crate::vocab::{self, OutOfVocabulary, TokenId};
use crate::world::{background_rgb, ColorName, BACKGROUNDS, IMG};
use crate::Tensor;

/// Shared embedding width for text, vision, and scoring spaces.
pub const D_MODEL: usize = 32;
/// Vision patch side in pixels.
pub const PATCH: usize = 8;
/// Patch grid side (IMG / PATCH).
pub const PATCH_GRID: usize = IMG / PATCH;
/// Number of vision tokens.
pub const N_PATCHES: usize = PATCH_GRID * PATCH_GRID;
/// Latent grid side.
pub const LATENT_GRID: usize = 16;
/// Latent channels.
pub const LATENT_CH: usize = 4;
/// Latent positions (LATENT_GRID^2).
pub const LATENT_LEN: usize = LATENT_GRID * LATENT_GRID;

/// Text embeddings: `m x D_MODEL`, one row per prompt position.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub data: Vec<f64>,
    pub m: usize,
}

/// Vision tokens: `N_PATCHES x D_MODEL`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokens {
    pub data: Vec<f64>,
}

/// Latent image: `LATENT_LEN x LATENT_CH`, row-major over the latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; LATENT_LEN * LATENT_CH],
        }
    }
}

// ── Small dense helpers (off-tape) ──────────────────────────────────

pub(crate) fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for k in 0..q {
            let av = a[i * q + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..r {
                out[i * r + j] += av * b[k * r + j];
            }
        }
    }
    out
}

fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
}

/// Sinusoidal position row of width `d`.
fn position_signal(pos: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = (pos as f64 * freq).sin();
        out[2 * i + 1] = (pos as f64 * freq).cos();
    }
    out
}

/// Gauss-Jordan inverse for small square matrices.
fn invert(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * 2 * n];
    for i in 0..n {
        for j in 0..n {
            m[i * 2 * n + j] = a[i * n + j];
        }
        m[i * 2 * n + n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| {
                m[a * 2 * n + col]
                    .abs()
                    .partial_cmp(&m[b * 2 * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if pivot != col {
            for j in 0..2 * n {
                m.swap(col * 2 * n + j, pivot * 2 * n + j);
            }
        }
        let p = m[col * 2 * n + col];
        for j in 0..2 * n {
            m[col * 2 * n + j] /= p;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m[i * 2 * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..2 * n {
                m[i * 2 * n + j] -= f * m[col * 2 * n + j];
            }
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = m[i * 2 * n + n + j];
        }
    }
    out
}

// ── Text encoder ────────────────────────────────────────────────────

/// Frozen text encoder: table lookup + sinusoidal positions + one
/// self-attention layer with residual connection.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: Tensor, // vocab x D_MODEL
    pub wq: Tensor,    // D_MODEL x D_MODEL
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl TextEncoder {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "text-encoder"));
        let v = vocab::vocab_size();
        // Attention weights are kept small so the residual dominates and
        // token identity stays recoverable from pooled embeddings.
        Self {
            embed: Tensor::randn(vec![v, D_MODEL], 1.0, &mut rng),
            wq: Tensor::randn(vec![D_MODEL, D_MODEL], 0.1, &mut rng),
            wk: Tensor::randn(vec![D_MODEL, D_MODEL], 0.1, &mut rng),
            wv: Tensor::randn(vec![D_MODEL, D_MODEL], 0.1, &mut rng),
            wo: Tensor::randn(vec![D_MODEL, D_MODEL], 0.1, &mut rng),
        }
    }

    /// Embed a token sequence. Empty input yields an `m = 0` matrix, which
    /// downstream consumers must reject.
    pub fn embed_tokens(&self, tokens: &[TokenId]) -> TextEmbeddings {
        let m = tokens.len();
        let d = D_MODEL;
        let mut x = vec![0.0; m * d];
        for (j, &t) in tokens.iter().enumerate() {
            let row = &self.embed.data()[t * d..(t + 1) * d];
            let pos = position_signal(j, d);
            for i in 0..d {
                x[j * d + i] = row[i] + pos[i];
            }
        }
        if m == 0 {
            return TextEmbeddings { data: x, m };
        }
        // Single-head self-attention with residual.
        let q = matmul(&x, self.wq.data(), m, d, d);
        let k = matmul(&x, self.wk.data(), m, d, d);
        let v = matmul(&x, self.wv.data(), m, d, d);
        let mut scores = vec![0.0; m * m];
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..m {
            for j in 0..m {
                let mut s = 0.0;
                for l in 0..d {
                    s += q[i * d + l] * k[j * d + l];
                }
                scores[i * m + j] = s * scale;
            }
        }
        softmax_rows(&mut scores, m, m);
        let mixed = matmul(&scores, &v, m, m, d);
        let proj = matmul(&mixed, self.wo.data(), m, d, d);
        for i in 0..m * d {
            x[i] += proj[i];
        }
        TextEmbeddings { data: x, m }
    }

    pub fn embed_text(&self, text: &str) -> Result<TextEmbeddings, OutOfVocabulary> {
        Ok(self.embed_tokens(&vocab::tokenize(text)?))
    }
}

/// Tokenize against the closed vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<TokenId>, OutOfVocabulary> {
    vocab::tokenize(text)
}

// ── Vision encoder ──────────────────────────────────────────────────

/// Frozen vision encoder: 8x8 patch mean colours projected linearly.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub proj: Tensor, // 3 x D_MODEL
}

impl VisionEncoder {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "vision-encoder"));
        Self {
            proj: Tensor::randn(vec![3, D_MODEL], 1.0, &mut rng),
        }
    }

    /// Mean RGB of each 8x8 patch, `N_PATCHES x 3`.
    pub fn patch_means(image: &Image) -> Vec<f64> {
        let mut means = vec![0.0; N_PATCHES * 3];
        for py in 0..PATCH_GRID {
            for px in 0..PATCH_GRID {
                let mut acc = [0.0f64; 3];
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let p = image.pixel(py * PATCH + dy, px * PATCH + dx);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                let idx = (py * PATCH_GRID + px) * 3;
                for c in 0..3 {
                    means[idx + c] = acc[c] / (PATCH * PATCH) as f64;
                }
            }
        }
        means
    }

    pub fn encode(&self, image: &Image) -> ImageTokens {
        let means = Self::patch_means(image);
        ImageTokens {
            data: matmul(&means, self.proj.data(), N_PATCHES, 3, D_MODEL),
        }
    }
}

// ── Latent codec ────────────────────────────────────────────────────

/// Fixed latent codec: each 4x4 pixel block maps to
/// `[mean R, mean G, mean B, mean luminance]`; decode paints each block
/// with its stored mean colour (clamped to `[0, 1]`).
#[derive(Debug, Clone, Default)]
pub struct LatentCodec;

impl LatentCodec {
    const BLOCK: usize = IMG / LATENT_GRID;

    pub fn encode(&self, image: &Image) -> Latent {
        let b = Self::BLOCK;
        let mut data = vec![0.0; LATENT_LEN * LATENT_CH];
        for by in 0..LATENT_GRID {
            for bx in 0..LATENT_GRID {
                let mut acc = [0.0f64; 3];
                for dy in 0..b {
                    for dx in 0..b {
                        let p = image.pixel(by * b + dy, bx * b + dx);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                let idx = (by * LATENT_GRID + bx) * LATENT_CH;
                let inv = 1.0 / (b * b) as f64;
                data[idx] = acc[0] * inv;
                data[idx + 1] = acc[1] * inv;
                data[idx + 2] = acc[2] * inv;
                data[idx + 3] = (0.299 * acc[0] + 0.587 * acc[1] + 0.114 * acc[2]) * inv;
            }
        }
        Latent { data }
    }

    pub fn decode(&self, latent: &Latent) -> Image {
        let b = Self::BLOCK;
        let mut img = Image::new(IMG, IMG);
        for by in 0..LATENT_GRID {
            for bx in 0..LATENT_GRID {
                let idx = (by * LATENT_GRID + bx) * LATENT_CH;
                let rgb = [
                    latent.data[idx].clamp(0.0, 1.0),
                    latent.data[idx + 1].clamp(0.0, 1.0),
                    latent.data[idx + 2].clamp(0.0, 1.0),
                ];
                img.fill_rect(bx * b, by * b, b, b, rgb);
            }
        }
        img
    }
}

// ── Scoring projection space ────────────────────────────────────────

/// Frozen projection space for image/text similarity scoring.
///
/// Both branches project their pooled encoder features into one shared
/// seeded semantic basis with one direction per palette colour. Each
/// branch's matrix is calibrated once at construction by probing the frozen
/// encoders with canonical single-object captions and scenes: the dual
/// basis of the probe responses maps "colour c present" onto the shared
/// direction for c. The matrices are constants of `(seed)` — nothing here
/// ever trains.
#[derive(Debug, Clone)]
pub struct ScoreSpace {
    pub p_img: Tensor, // D_MODEL x D_MODEL
    pub p_txt: Tensor, // D_MODEL x D_MODEL
}

/// Ridge-regularized linear detectors fitted to probe responses.
///
/// Solves `D = T (G + xI)^-1 R` where `R` holds one probe response per row,
/// `T` the desired detector outputs for each probe, and `G = R R^T`. Each
/// returned detector row answers with its target pattern on the probes (in
/// the least-norm ridge sense) — probes with an all-zero target act as
/// nuisance directions the detectors learn to ignore.
fn calibrated_detectors(rows: &[f64], targets: &[f64], n_rows: usize, n_det: usize) -> Vec<f64> {
    let d = D_MODEL;
    debug_assert_eq!(rows.len(), n_rows * d);
    debug_assert_eq!(targets.len(), n_det * n_rows);
    let mut gram = vec![0.0; n_rows * n_rows];
    let mut trace = 0.0;
    for i in 0..n_rows {
        for j in 0..n_rows {
            let mut s = 0.0;
            for l in 0..d {
                s += rows[i * d + l] * rows[j * d + l];
            }
            gram[i * n_rows + j] = s;
            if i == j {
                trace += s;
            }
        }
    }
    let ridge = 1e-3 * trace / n_rows as f64;
    for i in 0..n_rows {
        gram[i * n_rows + i] += ridge;
    }
    let weights = matmul(targets, &invert(&gram, n_rows), n_det, n_rows, n_rows);
    matmul(&weights, rows, n_det, n_rows, d)
}

impl ScoreSpace {
    pub fn seeded(seed: u64, text: &TextEncoder, vision: &VisionEncoder) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "score-space"));
        let colors = ColorName::ALL;
        let n = colors.len();
        let d = D_MODEL;

        // Shared semantic directions, one per colour.
        let q = Tensor::randn(vec![n, D_MODEL], 1.0, &mut rng);

        // Probe rows paired with their desired detector outputs. Singleton
        // probes target the colour's unit vector, pair probes the sum of the
        // two colours' unit vectors, nuisance probes (captions or scenes
        // with no colour information change) target zero.
        let mut rows_t: Vec<f64> = Vec::new();
        let mut tgts_t: Vec<Vec<f64>> = Vec::new();
        let mut rows_i: Vec<f64> = Vec::new();
        let mut tgts_i: Vec<Vec<f64>> = Vec::new();
        let unit = |i: usize| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        };
        let pair = |i: usize, j: usize| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v[j] = 1.0;
            v
        };

        // Text probes.
        let pool_text = |t: &str| {
            let e = text.embed_tokens(&vocab::tokenize(t).expect("probe words in vocabulary"));
            mean_pool(&e.data, e.m)
        };
        let base_t = pool_text("scene shows empty");
        let shapes = ["box", "disc"];
        let regions = ["topleft", "topright", "bottomleft", "bottomright", "center"];
        let sub = |u: Vec<f64>, b: &[f64]| -> Vec<f64> {
            u.iter().zip(b).map(|(a, b)| a - b).collect()
        };
        for (i, c) in colors.iter().enumerate() {
            let mut acc = vec![0.0; d];
            let mut count = 0.0;
            for s in shapes {
                for r in regions {
                    let u = pool_text(&format!("scene shows {} {s} at {r}", c.word()));
                    for l in 0..d {
                        acc[l] += u[l] - base_t[l];
                    }
                    count += 1.0;
                }
            }
            for v in &mut acc {
                *v /= count;
            }
            rows_t.extend(acc);
            tgts_t.push(unit(i));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let caps = [
                    format!(
                        "scene shows {} box at topleft and {} disc at bottomright",
                        colors[i].word(),
                        colors[j].word()
                    ),
                    format!(
                        "scene shows {} disc at center and {} box at topright",
                        colors[i].word(),
                        colors[j].word()
                    ),
                ];
                let mut acc = vec![0.0; d];
                for cap in &caps {
                    let u = pool_text(cap);
                    for l in 0..d {
                        acc[l] += (u[l] - base_t[l]) / caps.len() as f64;
                    }
                }
                rows_t.extend(acc);
                tgts_t.push(pair(i, j));
            }
        }
        rows_t.extend(base_t.iter());
        tgts_t.push(vec![0.0; n]);

        // Image probes: scenes rendered exactly like the world renders them,
        // max-pooled. Pair probes use the topleft/bottomright stamps.
        let probe_image = |spots: &[(ColorName, usize, usize)], bg: usize| -> Vec<f64> {
            let mut img = Image::new(IMG, IMG);
            img.fill_rect(0, 0, IMG, IMG, background_rgb(bg));
            for &(c, x0, y0) in spots {
                img.fill_rect(x0, y0, 16, 16, c.rgb());
            }
            let toks = vision.encode(&img);
            max_pool(&toks.data, N_PATCHES)
        };
        let nbg = BACKGROUNDS.len();
        let mut base_i = vec![0.0; d];
        for bg in 0..nbg {
            let u = probe_image(&[], bg);
            for l in 0..d {
                base_i[l] += u[l] / nbg as f64;
            }
        }
        for (i, c) in colors.iter().enumerate() {
            for bg in 0..nbg {
                let u = probe_image(&[(*c, 24, 24)], bg);
                rows_i.extend(sub(u, &base_i));
                tgts_i.push(unit(i));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                for bg in [0usize, 2] {
                    let u = probe_image(&[(colors[i], 8, 8), (colors[j], 40, 40)], bg);
                    rows_i.extend(sub(u, &base_i));
                    tgts_i.push(pair(i, j));
                }
            }
        }
        rows_i.extend(base_i.iter());
        tgts_i.push(vec![0.0; n]);
        for bg in 0..nbg {
            let u = probe_image(&[], bg);
            rows_i.extend(sub(u, &base_i));
            tgts_i.push(vec![0.0; n]);
        }

        // Fit detectors and map them onto the shared directions:
        // p = D^T q  (d x d), so pooled * p = sum_c detect_c(pooled) q_c.
        let to_proj = |rows: &[f64], tgts: &[Vec<f64>]| -> Tensor {
            let n_rows = tgts.len();
            let mut targets = vec![0.0; n * n_rows];
            for (r, t) in tgts.iter().enumerate() {
                for c in 0..n {
                    targets[c * n_rows + r] = t[c];
                }
            }
            let det = calibrated_detectors(rows, &targets, n_rows, n);
            let mut det_tr = vec![0.0; d * n];
            for i in 0..n {
                for j in 0..d {
                    det_tr[j * n + i] = det[i * d + j];
                }
            }
            let p = matmul(&det_tr, q.data(), d, n, D_MODEL);
            Tensor::from_vec(p, vec![D_MODEL, D_MODEL]).expect("shape fixed")
        };

        Self {
            p_img: to_proj(&rows_i, &tgts_i),
            p_txt: to_proj(&rows_t, &tgts_t),
        }
    }
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    } else {
        // Degenerate all-zero input: return an arbitrary fixed unit vector.
        v[0] = 1.0;
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean-pool rows of an `m x D_MODEL` buffer.
pub fn mean_pool(data: &[f64], rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; D_MODEL];
    if rows == 0 {
        return out;
    }
    for r in 0..rows {
        for i in 0..D_MODEL {
            out[i] += data[r * D_MODEL + i];
        }
    }
    for v in &mut out {
        *v /= rows as f64;
    }
    out
}

/// Elementwise max over rows of an `m x D_MODEL` buffer. Used for the image
/// scoring branch: the maximum response per channel detects colour presence
/// independently of object area.
pub fn max_pool(data: &[f64], rows: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; D_MODEL];
    if rows == 0 {
        return vec![0.0; D_MODEL];
    }
    for r in 0..rows {
        for i in 0..D_MODEL {
            out[i] = out[i].max(data[r * D_MODEL + i]);
        }
    }
    out
}

/// Bundle of all frozen encoders.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub latent: LatentCodec,
    pub score: ScoreSpace,
}

impl Encoders {
    pub fn seeded(seed: u64) -> Self {
        let text = TextEncoder::seeded(seed);
        let vision = VisionEncoder::seeded(seed);
        let score = ScoreSpace::seeded(seed, &text, &vision);
        Self {
            text,
            vision,
            latent: LatentCodec,
            score,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.text.embed"), &self.text.embed);
        f(format!("{prefix}.text.wq"), &self.text.wq);
        f(format!("{prefix}.text.wk"), &self.text.wk);
        f(format!("{prefix}.text.wv"), &self.text.wv);
        f(format!("{prefix}.text.wo"), &self.text.wo);
        f(format!("{prefix}.vision.proj"), &self.vision.proj);
        f(format!("{prefix}.score.p_img"), &self.score.p_img);
        f(format!("{prefix}.score.p_txt"), &self.score.p_txt);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.text.embed"), &mut self.text.embed);
        f(format!("{prefix}.text.wq"), &mut self.text.wq);
        f(format!("{prefix}.text.wk"), &mut self.text.wk);
        f(format!("{prefix}.text.wv"), &mut self.text.wv);
        f(format!("{prefix}.text.wo"), &mut self.text.wo);
        f(format!("{prefix}.vision.proj"), &mut self.vision.proj);
        f(format!("{prefix}.score.p_img"), &mut self.score.p_img);
        f(format!("{prefix}.score.p_txt"), &mut self.score.p_txt);
    }

    /// Unit-norm scoring embedding of an image.
    pub fn clip_embed_image(&self, image: &Image) -> Vec<f64> {
        let tokens = self.vision.encode(image);
        let pooled = max_pool(&tokens.data, N_PATCHES);
        let mut out = matmul(pooled.as_slice(), self.score.p_img.data(), 1, D_MODEL, D_MODEL);
        l2_normalize(&mut out);
        out
    }

    /// Unit-norm scoring embedding of a text.
    pub fn clip_embed_text(&self, text: &str) -> Result<Vec<f64>, OutOfVocabulary> {
        let emb = self.text.embed_text(text)?;
        let pooled = mean_pool(&emb.data, emb.m);
        let mut out = matmul(pooled.as_slice(), self.score.p_txt.data(), 1, D_MODEL, D_MODEL);
        l2_normalize(&mut out);
        Ok(out)
    }

    /// Cosine between the description embedding and the image embedding
    /// (the similarity score the surrogate learns to predict).
    pub fn text_image_score(&self, text: &str, image: &Image) -> Result<f64, OutOfVocabulary> {
        let t = self.clip_embed_text(text)?;
        let i = self.clip_embed_image(image);
        Ok(cosine(&t, &i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{gen_episode, gen_scene, EpisodeConfig, Scene, SceneConfig};

    fn enc() -> Encoders {
        Encoders::seeded(0)
    }

    #[test]
    fn empty_text_gives_zero_rows() {
        let e = enc();
        let emb = e.text.embed_text("").unwrap();
        assert_eq!(emb.m, 0);
        assert!(emb.data.is_empty());
    }

    #[test]
    fn same_text_twice_gives_identical_embeddings() {
        let e = enc();
        let a = e.text.embed_text("remove the red box").unwrap();
        let b = e.text.embed_text("remove the red box").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_word_change_alters_that_position() {
        let e = enc();
        let a = e.text.embed_text("remove the red box").unwrap();
        let b = e.text.embed_text("remove the blue box").unwrap();
        let d = D_MODEL;
        let differs = |p: usize| {
            (0..d).any(|i| (a.data[p * d + i] - b.data[p * d + i]).abs() > 1e-12)
        };
        assert!(differs(2), "changed position must differ");
    }

    #[test]
    fn constant_image_gives_identical_patch_tokens() {
        let e = enc();
        let mut img = Image::new(IMG, IMG);
        img.fill_rect(0, 0, IMG, IMG, [0.5, 0.5, 0.5]);
        let toks = e.vision.encode(&img);
        let first = &toks.data[..D_MODEL];
        for p in 1..N_PATCHES {
            assert_eq!(&toks.data[p * D_MODEL..(p + 1) * D_MODEL], first);
        }
    }

    #[test]
    fn patch_translation_permutes_tokens() {
        let e = enc();
        let mut a = Image::new(IMG, IMG);
        a.fill_rect(8, 8, 8, 8, [1.0, 0.0, 0.0]);
        let mut b = Image::new(IMG, IMG);
        b.fill_rect(16, 8, 8, 8, [1.0, 0.0, 0.0]);
        let ta = e.vision.encode(&a);
        let tb = e.vision.encode(&b);
        // patch (1,1) of a equals patch (1,2) of b
        let pa = &ta.data[(PATCH_GRID + 1) * D_MODEL..(PATCH_GRID + 2) * D_MODEL];
        let pb = &tb.data[(PATCH_GRID + 2) * D_MODEL..(PATCH_GRID + 3) * D_MODEL];
        assert_eq!(pa, pb);
    }

    #[test]
    fn latent_roundtrip_mae_is_small_on_scenes() {
        let e = enc();
        let mut total = 0.0;
        let mut count = 0.0;
        for seed in 0..100u64 {
            let scene = gen_scene(seed, &SceneConfig::default()).unwrap();
            let back = e.latent.decode(&e.latent.encode(&scene.image));
            for (x, y) in scene.image.data().iter().zip(back.data()) {
                total += (x - y).abs();
                count += 1.0;
            }
        }
        let mae = total / count;
        assert!(mae <= 0.05, "latent roundtrip MAE {mae}");
    }

    #[test]
    fn clip_embeddings_are_unit_norm() {
        let e = enc();
        let scene = gen_scene(1, &SceneConfig::default()).unwrap();
        let v = e.clip_embed_image(&scene.image);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-12);
        let t = e.clip_embed_text("scene shows empty").unwrap();
        let norm: f64 = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-12);
        assert!((cosine(&t, &t) - 1.0).abs() <= 1e-12);
    }

    /// The scoring space must rank a scene's own caption above the caption
    /// of a different scene for at least 90% of sampled scenes.
    #[test]
    fn own_caption_beats_mismatched_caption() {
        let e = enc();
        let n = 200;
        let scenes: Vec<Scene> = (0..n)
            .map(|s| {
                gen_episode(
                    s as u64,
                    &EpisodeConfig {
                        scene: SceneConfig::default(),
                        n_applicable: 1,
                        n_nonapplicable: 0,
                    },
                )
                .unwrap()
                .scene
            })
            .collect();
        let mut wins = 0;
        for i in 0..n {
            let own = e
                .text_image_score(&scenes[i].caption(), &scenes[i].image)
                .unwrap();
            let other = e
                .text_image_score(&scenes[(i + 1) % n].caption(), &scenes[i].image)
                .unwrap();
            if own > other {
                wins += 1;
            }
        }
        assert!(
            wins * 10 >= n * 9,
            "own caption won only {wins}/{n} comparisons"
        );
    }
}
