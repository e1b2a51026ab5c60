//! Evaluation metrics and the serialized run report.

use std::path::Path;

use crate::editor::GuidanceConfig;
use crate::encoders::cosine;
use crate::error::{PipelineError, PipelineResult};
use crate::image::Image;
use crate::kvrecord::KvRecord;
use crate::model::Pipeline;
use crate::seeds::derive_seed;
use crate::world::Episode;

const REPORT_MAGIC: &str = "ctxedit-report-v1";

/// Aggregate metrics over an evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Mean absolute pixel error against the goal image.
    pub l1: f64,
    /// Mean squared pixel error against the goal image.
    pub l2: f64,
    /// Cosine between edited-image and goal-image embeddings.
    pub sim_i: f64,
    /// Cosine between goal-description and edited-image embeddings.
    pub sim_t: f64,
    /// Cosine between image-change and caption-change embeddings
    /// (0 when either change is below 1e-9 in norm).
    pub sim_dir: f64,
    /// Fraction of instructions whose predicted label matches applicability.
    pub token_accuracy: f64,
    /// Mean IoU of predicted vs ground-truth masks over applicable
    /// instructions.
    pub iou: f64,
    /// Mean dice overlap over applicable instructions.
    pub dice: f64,
    pub episodes: usize,
    pub instructions: usize,
    pub applicable: usize,
}

/// Pixel L1/L2 between two images.
pub fn pixel_errors(a: &Image, b: &Image) -> (f64, f64) {
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        l1 += d.abs();
        l2 += d * d;
    }
    let n = a.data().len() as f64;
    (l1 / n, l2 / n)
}

/// Direction agreement between image change and caption change.
pub fn direction_similarity(
    img_before: &[f64],
    img_after: &[f64],
    txt_before: &[f64],
    txt_after: &[f64],
) -> f64 {
    let di: Vec<f64> = img_after.iter().zip(img_before).map(|(a, b)| a - b).collect();
    let dt: Vec<f64> = txt_after.iter().zip(txt_before).map(|(a, b)| a - b).collect();
    let ni: f64 = di.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt: f64 = dt.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ni < 1e-9 || nt < 1e-9 {
        0.0
    } else {
        cosine(&di, &dt)
    }
}

/// Run the full pipeline over a split and aggregate every metric.
pub fn evaluate(
    pipe: &Pipeline,
    episodes: &[Episode],
    cfg: GuidanceConfig,
    seed: u64,
) -> PipelineResult<Metrics> {
    if episodes.is_empty() {
        return Err(PipelineError::EmptySplit);
    }
    let enc = &pipe.encoders;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    let mut sim_i = 0.0;
    let mut sim_t = 0.0;
    let mut sim_dir = 0.0;
    let mut correct = 0usize;
    let mut instructions = 0usize;
    let mut iou = 0.0;
    let mut dice = 0.0;
    let mut applicable = 0usize;

    for (idx, ep) in episodes.iter().enumerate() {
        let inf = pipe.infer_episode(ep, cfg, derive_seed(seed, &format!("eval-{idx}")))?;
        let (e1, e2) = pixel_errors(&inf.edited, &ep.goal_image);
        l1 += e1;
        l2 += e2;
        let edited_emb = enc.clip_embed_image(&inf.edited);
        let goal_emb = enc.clip_embed_image(&ep.goal_image);
        sim_i += cosine(&edited_emb, &goal_emb);
        let desc_emb = enc.clip_embed_text(&ep.goal_description)?;
        sim_t += cosine(&desc_emb, &edited_emb);
        let scene_emb = enc.clip_embed_image(&ep.scene.image);
        let scene_cap = enc.clip_embed_text(&ep.scene.caption())?;
        sim_dir += direction_similarity(&scene_emb, &edited_emb, &scene_cap, &desc_emb);

        for (i, ins) in ep.instructions.iter().enumerate() {
            instructions += 1;
            if inf.labels[i].editable() == ins.applicable {
                correct += 1;
            }
            if ins.applicable {
                applicable += 1;
                iou += inf.masks[i].iou(&ins.target_mask);
                dice += inf.masks[i].dice(&ins.target_mask);
            }
        }
    }
    let n = episodes.len() as f64;
    Ok(Metrics {
        l1: l1 / n,
        l2: l2 / n,
        sim_i: sim_i / n,
        sim_t: sim_t / n,
        sim_dir: sim_dir / n,
        token_accuracy: correct as f64 / instructions.max(1) as f64,
        iou: iou / applicable.max(1) as f64,
        dice: dice / applicable.max(1) as f64,
        episodes: episodes.len(),
        instructions,
        applicable,
    })
}

/// Serialized record of one training or evaluation run: config echo, loss
/// traces, metrics. Key order is stable; write-then-parse is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    record: KvRecord,
}

impl RunReport {
    pub fn new(kind: &str) -> Self {
        let mut record = KvRecord::new();
        record.set("kind", kind);
        Self { record }
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.record.set(key, value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.record.get(key)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.record.get(key).and_then(|v| v.parse().ok())
    }

    pub fn set_metrics(&mut self, m: &Metrics) {
        self.set("metric_l1", m.l1);
        self.set("metric_l2", m.l2);
        self.set("metric_sim_i", m.sim_i);
        self.set("metric_sim_t", m.sim_t);
        self.set("metric_sim_dir", m.sim_dir);
        self.set("metric_token_accuracy", m.token_accuracy);
        self.set("metric_iou", m.iou);
        self.set("metric_dice", m.dice);
        self.set("metric_episodes", m.episodes);
        self.set("metric_instructions", m.instructions);
        self.set("metric_applicable", m.applicable);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.record.to_bytes(REPORT_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> PipelineResult<Self> {
        Ok(Self {
            record: KvRecord::from_bytes(bytes, REPORT_MAGIC)?,
        })
    }

    pub fn save(&self, path: &Path) -> PipelineResult<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> PipelineResult<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn pairs(&self) -> &[(String, String)] {
        self.record.pairs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Mask;

    #[test]
    fn pixel_errors_basic() {
        let mut a = Image::new(4, 4);
        let b = Image::new(4, 4);
        assert_eq!(pixel_errors(&a, &b), (0.0, 0.0));
        a.fill_rect(0, 0, 4, 4, [0.5, 0.5, 0.5]);
        let (l1, l2) = pixel_errors(&a, &b);
        assert!((l1 - 0.5).abs() < 1e-15);
        assert!((l2 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn iou_extremes() {
        let mut full = Mask::zeros(8, 8);
        full.set_rect(0, 0, 8, 8);
        assert_eq!(full.iou(&full), 1.0);
        let mut left = Mask::zeros(8, 8);
        left.set_rect(0, 0, 4, 8);
        let mut right = Mask::zeros(8, 8);
        right.set_rect(4, 0, 4, 8);
        assert_eq!(left.iou(&right), 0.0);
    }

    #[test]
    fn zero_direction_convention() {
        let a = vec![1.0, 0.0];
        let t1 = vec![0.0, 1.0];
        let t2 = vec![1.0, 1.0];
        assert_eq!(direction_similarity(&a, &a, &t1, &t2), 0.0);
    }

    #[test]
    fn report_roundtrip_is_exact() {
        let mut r = RunReport::new("eval");
        r.set("seed", 7u64);
        r.set("metric_l1", 0.012345678901234567f64);
        let bytes = r.to_bytes();
        let back = RunReport::from_bytes(&bytes).unwrap();
        assert_eq!(r, back);
        assert_eq!(back.get_f64("metric_l1"), Some(0.012345678901234567));
    }
}
