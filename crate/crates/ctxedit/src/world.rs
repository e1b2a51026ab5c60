//! Deterministic synthetic scenes, instructions, and ground truth.
//!
//! Scenes are 64x64 images of solid-colour boxes and discs on a dark
//! background. All object bounding boxes are aligned to the 8-pixel patch
//! grid, so ground-truth edit masks decompose exactly into vision patches.
//! Instructions come in four categories (add / remove / replace / recolor);
//! an instruction is applicable iff the object it references exists in the
//! scene (or, for add, iff the named region is empty). Non-applicable
//! instructions carry all-zero target masks and must leave the image
//! untouched.
//!
//! Everything is a pure function of `(seed, config)`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{Image, ImageError, Mask};
use crate::kvrecord::{KvRecord, RecordError};
use crate::seeds::derive_seed;
use crate::vocab::{self, OutOfVocabulary, TokenId, SEP};

/// Image side length.
pub const IMG: usize = 64;
/// Placement grid (object corners and sizes are multiples of this).
pub const ALIGN: usize = 8;

const EPISODE_MAGIC: &str = "ctxedit-episode-v1";
const MANIFEST_MAGIC: &str = "ctxedit-manifest-v1";

#[derive(Debug)]
pub enum WorldError {
    /// Object placement failed after bounded retries.
    Placement { attempts: usize },
    /// The requested instruction counts cannot be satisfied for the scene.
    Infeasible { detail: String },
    Vocab(OutOfVocabulary),
    Record(RecordError),
    Image(ImageError),
    Io(std::io::Error),
    BadInstruction(String),
    /// A loaded episode violates a structural invariant.
    Invariant(String),
}

impl fmt::Display for WorldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Placement { attempts } => {
                write!(f, "object placement failed after {attempts} attempts")
            }
            Self::Infeasible { detail } => write!(f, "infeasible generation request: {detail}"),
            Self::Vocab(e) => write!(f, "{e}"),
            Self::Record(e) => write!(f, "{e}"),
            Self::Image(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::BadInstruction(s) => write!(f, "unparseable instruction: {s:?}"),
            Self::Invariant(s) => write!(f, "episode invariant violated: {s}"),
        }
    }
}

impl std::error::Error for WorldError {}

impl From<OutOfVocabulary> for WorldError {
    fn from(e: OutOfVocabulary) -> Self {
        Self::Vocab(e)
    }
}
impl From<RecordError> for WorldError {
    fn from(e: RecordError) -> Self {
        Self::Record(e)
    }
}
impl From<ImageError> for WorldError {
    fn from(e: ImageError) -> Self {
        Self::Image(e)
    }
}
impl From<std::io::Error> for WorldError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

// ── Palette ─────────────────────────────────────────────────────────

/// Object colours. RGB values are exact 8-bit levels so PPM round-trips
/// are lossless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    White,
    Gray,
}

impl ColorName {
    pub const ALL: [ColorName; 8] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::Magenta,
        ColorName::Cyan,
        ColorName::White,
        ColorName::Gray,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Magenta => "magenta",
            ColorName::Cyan => "cyan",
            ColorName::White => "white",
            ColorName::Gray => "gray",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }

    pub fn rgb(self) -> [f64; 3] {
        let b = match self {
            ColorName::Red => [200u8, 40, 40],
            ColorName::Green => [40, 180, 60],
            ColorName::Blue => [40, 70, 200],
            ColorName::Yellow => [220, 200, 50],
            ColorName::Magenta => [190, 60, 190],
            ColorName::Cyan => [60, 190, 190],
            ColorName::White => [240, 240, 240],
            ColorName::Gray => [128, 128, 128],
        };
        [b[0] as f64 / 255.0, b[1] as f64 / 255.0, b[2] as f64 / 255.0]
    }
}

/// Dark background tones, distinct from every object colour.
pub const BACKGROUNDS: [[u8; 3]; 4] = [[20, 22, 28], [30, 26, 24], [24, 32, 26], [16, 16, 20]];

pub fn background_rgb(idx: usize) -> [f64; 3] {
    let b = BACKGROUNDS[idx % BACKGROUNDS.len()];
    [b[0] as f64 / 255.0, b[1] as f64 / 255.0, b[2] as f64 / 255.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ShapeKind {
    Box,
    Disc,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 2] = [ShapeKind::Box, ShapeKind::Disc];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::Disc => "disc",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }
}

/// Named 16x16 stamp regions used by add instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionName {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl RegionName {
    pub const ALL: [RegionName; 5] = [
        RegionName::TopLeft,
        RegionName::TopRight,
        RegionName::BottomLeft,
        RegionName::BottomRight,
        RegionName::Center,
    ];

    pub fn word(self) -> &'static str {
        match self {
            RegionName::TopLeft => "topleft",
            RegionName::TopRight => "topright",
            RegionName::BottomLeft => "bottomleft",
            RegionName::BottomRight => "bottomright",
            RegionName::Center => "center",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.word() == w)
    }

    /// The 16x16 box where an add stamps its object.
    pub fn stamp(self) -> PixBox {
        match self {
            RegionName::TopLeft => PixBox::new(8, 8, 16, 16),
            RegionName::TopRight => PixBox::new(40, 8, 16, 16),
            RegionName::BottomLeft => PixBox::new(8, 40, 16, 16),
            RegionName::BottomRight => PixBox::new(40, 40, 16, 16),
            RegionName::Center => PixBox::new(24, 24, 16, 16),
        }
    }

    /// Region word used when captioning an object centred at (cx, cy).
    pub fn containing(cx: f64, cy: f64) -> RegionName {
        if (24.0..40.0).contains(&cx) && (24.0..40.0).contains(&cy) {
            RegionName::Center
        } else {
            match (cx < 32.0, cy < 32.0) {
                (true, true) => RegionName::TopLeft,
                (false, true) => RegionName::TopRight,
                (true, false) => RegionName::BottomLeft,
                (false, false) => RegionName::BottomRight,
            }
        }
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl PixBox {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self { x0, y0, w, h }
    }

    pub fn intersects(&self, other: &PixBox) -> bool {
        self.x0 < other.x0 + other.w
            && other.x0 < self.x0 + self.w
            && self.y0 < other.y0 + other.h
            && other.y0 < self.y0 + self.h
    }

    pub fn in_bounds(&self, side: usize) -> bool {
        self.x0 + self.w <= side && self.y0 + self.h <= side
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x0 as f64 + self.w as f64 / 2.0,
            self.y0 as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn to_mask(&self, side: usize) -> Mask {
        let mut m = Mask::zeros(side, side);
        m.set_rect(self.x0, self.y0, self.w, self.h);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: ColorName,
    pub bbox: PixBox,
}

impl SceneObject {
    fn draw(&self, img: &mut Image) {
        let b = self.bbox;
        match self.shape {
            ShapeKind::Box => img.fill_rect(b.x0, b.y0, b.w, b.h, self.color.rgb()),
            ShapeKind::Disc => img.fill_ellipse(b.x0, b.y0, b.w, b.h, self.color.rgb()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<SceneObject>,
    pub background: usize,
}

impl Scene {
    pub fn has_pair(&self, color: ColorName, shape: ShapeKind) -> bool {
        self.objects
            .iter()
            .any(|o| o.color == color && o.shape == shape)
    }

    /// Re-render the image from objects and background.
    fn render(objects: &[SceneObject], background: usize) -> Image {
        let mut img = Image::new(IMG, IMG);
        img.fill_rect(0, 0, IMG, IMG, background_rgb(background));
        for o in objects {
            o.draw(&mut img);
        }
        img
    }

    /// Templated caption of the current object list.
    pub fn caption(&self) -> String {
        caption_for(&self.objects)
    }
}

fn caption_for(objects: &[SceneObject]) -> String {
    if objects.is_empty() {
        return "scene shows empty".to_string();
    }
    let mut parts = Vec::new();
    for o in objects {
        let (cx, cy) = o.bbox.center();
        parts.push(format!(
            "{} {} at {}",
            o.color.word(),
            o.shape.word(),
            RegionName::containing(cx, cy).word()
        ));
    }
    format!("scene shows {}", parts.join(" and "))
}

// ── Scene generation ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Smallest object side, in pixels (multiple of [`ALIGN`]).
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 4,
            min_size: 8,
            max_size: 24,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<(), WorldError> {
        let ok = self.min_objects >= 1
            && self.min_objects <= self.max_objects
            && self.max_objects <= 4
            && self.min_size >= ALIGN
            && self.min_size <= self.max_size
            && self.max_size <= IMG / 2
            && self.min_size % ALIGN == 0
            && self.max_size % ALIGN == 0;
        if ok {
            Ok(())
        } else {
            Err(WorldError::Infeasible {
                detail: format!("invalid scene config {self:?}"),
            })
        }
    }
}

const PLACEMENT_RETRIES: usize = 64;

/// Generate a scene: deterministic for a fixed `(seed, config)`.
pub fn gen_scene(seed: u64, config: &SceneConfig) -> Result<Scene, WorldError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scene"));
    let background = rng.gen_range(0..BACKGROUNDS.len());
    let n = rng.gen_range(config.min_objects..=config.max_objects);
    let size_steps = (config.max_size - config.min_size) / ALIGN + 1;

    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    let mut pairs: BTreeSet<(ColorName, ShapeKind)> = BTreeSet::new();
    for _ in 0..n {
        let mut placed = false;
        for _attempt in 0..PLACEMENT_RETRIES {
            let w = config.min_size + ALIGN * rng.gen_range(0..size_steps);
            let h = config.min_size + ALIGN * rng.gen_range(0..size_steps);
            let x0 = ALIGN * rng.gen_range(0..=(IMG - w) / ALIGN);
            let y0 = ALIGN * rng.gen_range(0..=(IMG - h) / ALIGN);
            let bbox = PixBox::new(x0, y0, w, h);
            let color = ColorName::ALL[rng.gen_range(0..ColorName::ALL.len())];
            let shape = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
            if pairs.contains(&(color, shape)) || objects.iter().any(|o| o.bbox.intersects(&bbox))
            {
                continue;
            }
            pairs.insert((color, shape));
            objects.push(SceneObject { shape, color, bbox });
            placed = true;
            break;
        }
        if !placed {
            return Err(WorldError::Placement {
                attempts: PLACEMENT_RETRIES,
            });
        }
    }
    let image = Scene::render(&objects, background);
    Ok(Scene {
        image,
        objects,
        background,
    })
}

// ── Instructions ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Add,
    Remove,
    Replace,
    ChangeAttribute,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Add,
        Category::Remove,
        Category::Replace,
        Category::ChangeAttribute,
    ];

    /// Sampling weights for instruction categories.
    pub fn weight(self) -> f64 {
        match self {
            Category::Add => 0.343,
            Category::Replace => 0.205,
            Category::Remove => 0.211,
            Category::ChangeAttribute => 0.241,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Add => "add",
            Category::Remove => "remove",
            Category::Replace => "replace",
            Category::ChangeAttribute => "change-attribute",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Structured form of an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Add {
        color: ColorName,
        shape: ShapeKind,
        region: RegionName,
    },
    Remove {
        color: ColorName,
        shape: ShapeKind,
    },
    Replace {
        color: ColorName,
        shape: ShapeKind,
        new_color: ColorName,
        new_shape: ShapeKind,
    },
    Recolor {
        color: ColorName,
        shape: ShapeKind,
        new_color: ColorName,
    },
}

impl EditOp {
    pub fn category(&self) -> Category {
        match self {
            EditOp::Add { .. } => Category::Add,
            EditOp::Remove { .. } => Category::Remove,
            EditOp::Replace { .. } => Category::Replace,
            EditOp::Recolor { .. } => Category::ChangeAttribute,
        }
    }

    pub fn text(&self) -> String {
        match self {
            EditOp::Add {
                color,
                shape,
                region,
            } => format!(
                "add a {} {} at {}",
                color.word(),
                shape.word(),
                region.word()
            ),
            EditOp::Remove { color, shape } => {
                format!("remove the {} {}", color.word(), shape.word())
            }
            EditOp::Replace {
                color,
                shape,
                new_color,
                new_shape,
            } => format!(
                "replace the {} {} with a {} {}",
                color.word(),
                shape.word(),
                new_color.word(),
                new_shape.word()
            ),
            EditOp::Recolor {
                color,
                shape,
                new_color,
            } => format!(
                "recolor the {} {} to {}",
                color.word(),
                shape.word(),
                new_color.word()
            ),
        }
    }

    /// Whether this op can be executed against the given scene.
    pub fn applicable_to(&self, scene: &Scene) -> bool {
        match *self {
            EditOp::Add { region, .. } => {
                let stamp = region.stamp();
                !scene.objects.iter().any(|o| o.bbox.intersects(&stamp))
            }
            EditOp::Remove { color, shape }
            | EditOp::Replace { color, shape, .. }
            | EditOp::Recolor { color, shape, .. } => scene.has_pair(color, shape),
        }
    }

    /// Ground-truth edit region for this op against the scene (empty when
    /// not applicable).
    pub fn target_mask(&self, scene: &Scene) -> Mask {
        if !self.applicable_to(scene) {
            return Mask::zeros(IMG, IMG);
        }
        match *self {
            EditOp::Add { region, .. } => region.stamp().to_mask(IMG),
            EditOp::Remove { color, shape }
            | EditOp::Replace { color, shape, .. }
            | EditOp::Recolor { color, shape, .. } => scene
                .objects
                .iter()
                .find(|o| o.color == color && o.shape == shape)
                .map(|o| o.bbox.to_mask(IMG))
                .unwrap_or_else(|| Mask::zeros(IMG, IMG)),
        }
    }
}

/// Parse an instruction text back into its structured form.
pub fn parse_instruction(text: &str) -> Result<EditOp, WorldError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let bad = || WorldError::BadInstruction(text.to_string());
    let color = |w: &str| ColorName::from_word(w).ok_or_else(bad);
    let shape = |w: &str| ShapeKind::from_word(w).ok_or_else(bad);
    match words.as_slice() {
        ["add", "a", c, s, "at", r] => Ok(EditOp::Add {
            color: color(c)?,
            shape: shape(s)?,
            region: RegionName::from_word(r).ok_or_else(bad)?,
        }),
        ["remove", "the", c, s] => Ok(EditOp::Remove {
            color: color(c)?,
            shape: shape(s)?,
        }),
        ["replace", "the", c, s, "with", "a", c2, s2] => Ok(EditOp::Replace {
            color: color(c)?,
            shape: shape(s)?,
            new_color: color(c2)?,
            new_shape: shape(s2)?,
        }),
        ["recolor", "the", c, s, "to", c2] => Ok(EditOp::Recolor {
            color: color(c)?,
            shape: shape(s)?,
            new_color: color(c2)?,
        }),
        _ => Err(bad()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub text: String,
    pub category: Category,
    pub applicable: bool,
    pub target_mask: Mask,
    pub op: EditOp,
}

impl Instruction {
    fn from_op(op: EditOp, scene: &Scene) -> Self {
        Self {
            text: op.text(),
            category: op.category(),
            applicable: op.applicable_to(scene),
            target_mask: op.target_mask(scene),
            op,
        }
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        vocab::tokenize(&self.text).expect("instruction text uses vocabulary words")
    }
}

fn sample_category(rng: &mut ChaCha8Rng, feasible: [bool; 4]) -> Option<Category> {
    let total: f64 = Category::ALL
        .iter()
        .zip(feasible)
        .filter(|(_, f)| *f)
        .map(|(c, _)| c.weight())
        .sum();
    if total == 0.0 {
        return None;
    }
    let mut draw = rng.gen::<f64>() * total;
    for (cat, f) in Category::ALL.into_iter().zip(feasible) {
        if !f {
            continue;
        }
        draw -= cat.weight();
        if draw <= 0.0 {
            return Some(cat);
        }
    }
    Category::ALL
        .into_iter()
        .zip(feasible)
        .rev()
        .find(|(_, f)| *f)
        .map(|(c, _)| c)
}

/// Generate `n_applicable` applicable and `n_nonapplicable` non-applicable
/// instructions for the scene, shuffled together.
///
/// Applicable object edits target distinct objects and applicable adds use
/// distinct empty regions, so all ground-truth edit regions are disjoint.
/// Non-applicable edits reference colour/shape pairs absent from both the
/// scene and the post-edit state, or (for add) regions that are occupied.
pub fn gen_instructions(
    scene: &Scene,
    n_applicable: usize,
    n_nonapplicable: usize,
    seed: u64,
) -> Result<Vec<Instruction>, WorldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "instructions"));
    let all_pairs: Vec<(ColorName, ShapeKind)> = ColorName::ALL
        .into_iter()
        .flat_map(|c| ShapeKind::ALL.into_iter().map(move |s| (c, s)))
        .collect();

    // Evolving state: which pairs will exist after all applicable edits.
    let mut post_pairs: BTreeSet<(ColorName, ShapeKind)> = scene
        .objects
        .iter()
        .map(|o| (o.color, o.shape))
        .collect();
    let mut untargeted: Vec<usize> = (0..scene.objects.len()).collect();
    let mut free_regions: Vec<RegionName> = RegionName::ALL
        .into_iter()
        .filter(|r| {
            let stamp = r.stamp();
            !scene.objects.iter().any(|o| o.bbox.intersects(&stamp))
        })
        .collect();
    let mut occupied_regions: Vec<RegionName> = RegionName::ALL
        .into_iter()
        .filter(|r| !free_regions.contains(r))
        .collect();

    let mut ops: Vec<EditOp> = Vec::new();

    for _ in 0..n_applicable {
        let add_ok = !free_regions.is_empty() && post_pairs.len() < all_pairs.len();
        let obj_ok = !untargeted.is_empty();
        let cat = sample_category(&mut rng, [add_ok, obj_ok, obj_ok, obj_ok]).ok_or_else(|| {
            WorldError::Infeasible {
                detail: format!(
                    "cannot build {n_applicable} applicable instructions: no feasible category"
                ),
            }
        })?;
        let op = match cat {
            Category::Add => {
                let ri = rng.gen_range(0..free_regions.len());
                let region = free_regions.swap_remove(ri);
                let avail: Vec<_> = all_pairs
                    .iter()
                    .filter(|p| !post_pairs.contains(p))
                    .collect();
                let &&(color, shape) = avail
                    .get(rng.gen_range(0..avail.len()))
                    .expect("checked non-empty");
                post_pairs.insert((color, shape));
                EditOp::Add {
                    color,
                    shape,
                    region,
                }
            }
            Category::Remove => {
                let oi = untargeted.swap_remove(rng.gen_range(0..untargeted.len()));
                let o = scene.objects[oi];
                post_pairs.remove(&(o.color, o.shape));
                EditOp::Remove {
                    color: o.color,
                    shape: o.shape,
                }
            }
            Category::Replace => {
                let oi = untargeted.swap_remove(rng.gen_range(0..untargeted.len()));
                let o = scene.objects[oi];
                post_pairs.remove(&(o.color, o.shape));
                let avail: Vec<_> = all_pairs
                    .iter()
                    .filter(|p| !post_pairs.contains(p))
                    .collect();
                let &&(new_color, new_shape) = avail
                    .get(rng.gen_range(0..avail.len()))
                    .expect("at least the removed pair is free");
                post_pairs.insert((new_color, new_shape));
                EditOp::Replace {
                    color: o.color,
                    shape: o.shape,
                    new_color,
                    new_shape,
                }
            }
            Category::ChangeAttribute => {
                let oi = untargeted.swap_remove(rng.gen_range(0..untargeted.len()));
                let o = scene.objects[oi];
                post_pairs.remove(&(o.color, o.shape));
                let avail: Vec<ColorName> = ColorName::ALL
                    .into_iter()
                    .filter(|&c| c != o.color && !post_pairs.contains(&(c, o.shape)))
                    .collect();
                if avail.is_empty() {
                    return Err(WorldError::Infeasible {
                        detail: "no recolor target available".into(),
                    });
                }
                let new_color = avail[rng.gen_range(0..avail.len())];
                post_pairs.insert((new_color, o.shape));
                EditOp::Recolor {
                    color: o.color,
                    shape: o.shape,
                    new_color,
                }
            }
        };
        ops.push(op);
    }

    let scene_pairs: BTreeSet<(ColorName, ShapeKind)> = scene
        .objects
        .iter()
        .map(|o| (o.color, o.shape))
        .collect();
    let mut used_absent: BTreeSet<(ColorName, ShapeKind)> = BTreeSet::new();

    for _ in 0..n_nonapplicable {
        // Absent pairs: never in the scene, never produced by an edit, and
        // not reused by another non-applicable instruction.
        let absent: Vec<(ColorName, ShapeKind)> = all_pairs
            .iter()
            .copied()
            .filter(|p| {
                !scene_pairs.contains(p) && !post_pairs.contains(p) && !used_absent.contains(p)
            })
            .collect();
        let obj_ok = !absent.is_empty();
        let add_ok = !occupied_regions.is_empty();
        let cat =
            sample_category(&mut rng, [add_ok, obj_ok, obj_ok, obj_ok]).ok_or_else(|| {
                WorldError::Infeasible {
                    detail: "cannot build a non-applicable instruction".into(),
                }
            })?;
        let op = match cat {
            Category::Add => {
                let ri = rng.gen_range(0..occupied_regions.len());
                let region = occupied_regions.swap_remove(ri);
                let (color, shape) = all_pairs[rng.gen_range(0..all_pairs.len())];
                EditOp::Add {
                    color,
                    shape,
                    region,
                }
            }
            Category::Remove => {
                let (color, shape) = absent[rng.gen_range(0..absent.len())];
                used_absent.insert((color, shape));
                EditOp::Remove { color, shape }
            }
            Category::Replace => {
                let (color, shape) = absent[rng.gen_range(0..absent.len())];
                used_absent.insert((color, shape));
                let (new_color, new_shape) = all_pairs[rng.gen_range(0..all_pairs.len())];
                EditOp::Replace {
                    color,
                    shape,
                    new_color,
                    new_shape,
                }
            }
            Category::ChangeAttribute => {
                let (color, shape) = absent[rng.gen_range(0..absent.len())];
                used_absent.insert((color, shape));
                let others: Vec<ColorName> =
                    ColorName::ALL.into_iter().filter(|&c| c != color).collect();
                let new_color = others[rng.gen_range(0..others.len())];
                EditOp::Recolor {
                    color,
                    shape,
                    new_color,
                }
            }
        };
        ops.push(op);
    }

    ops.shuffle(&mut rng);
    Ok(ops
        .into_iter()
        .map(|op| Instruction::from_op(op, scene))
        .collect())
}

// ── Goal rendering ──────────────────────────────────────────────────

/// Apply the applicable edits in list order and caption the result.
///
/// Pixels outside the union of applicable target masks are untouched.
pub fn render_goal(scene: &Scene, instructions: &[Instruction]) -> (Image, String) {
    let mut objects = scene.objects.clone();
    let bg = background_rgb(scene.background);
    let mut image = scene.image.clone();
    for ins in instructions.iter().filter(|i| i.applicable) {
        match ins.op {
            EditOp::Add {
                color,
                shape,
                region,
            } => {
                let obj = SceneObject {
                    shape,
                    color,
                    bbox: region.stamp(),
                };
                obj.draw(&mut image);
                objects.push(obj);
            }
            EditOp::Remove { color, shape } => {
                if let Some(pos) = objects
                    .iter()
                    .position(|o| o.color == color && o.shape == shape)
                {
                    let b = objects.remove(pos).bbox;
                    image.fill_rect(b.x0, b.y0, b.w, b.h, bg);
                }
            }
            EditOp::Replace {
                color,
                shape,
                new_color,
                new_shape,
            } => {
                if let Some(obj) = objects
                    .iter_mut()
                    .find(|o| o.color == color && o.shape == shape)
                {
                    let b = obj.bbox;
                    obj.color = new_color;
                    obj.shape = new_shape;
                    image.fill_rect(b.x0, b.y0, b.w, b.h, bg);
                    obj.draw(&mut image);
                }
            }
            EditOp::Recolor {
                color,
                shape,
                new_color,
            } => {
                if let Some(obj) = objects
                    .iter_mut()
                    .find(|o| o.color == color && o.shape == shape)
                {
                    obj.color = new_color;
                    obj.draw(&mut image);
                }
            }
        }
    }
    let description = caption_for(&objects);
    (image, description)
}

// ── Episodes ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scene: Scene,
    pub instructions: Vec<Instruction>,
    pub goal_image: Image,
    pub goal_description: String,
}

impl Episode {
    /// Prompt text: every instruction followed by the boundary marker.
    pub fn prompt_text(&self) -> String {
        self.instructions
            .iter()
            .map(|i| format!("{} {SEP}", i.text))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn prompt_tokens(&self) -> Vec<TokenId> {
        vocab::tokenize(&self.prompt_text()).expect("prompt uses vocabulary words")
    }

    /// Positions of the boundary markers within the prompt (one per
    /// instruction).
    pub fn boundary_positions(&self) -> Vec<usize> {
        let sep = vocab::token_id(SEP).expect("separator in vocabulary");
        self.prompt_tokens()
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == sep)
            .map(|(i, _)| i)
            .collect()
    }

    /// Ground-truth alignment: the instruction index owning each prompt
    /// position (boundary markers belong to the preceding instruction).
    pub fn gt_alignment(&self) -> Vec<usize> {
        let sep = vocab::token_id(SEP).expect("separator in vocabulary");
        let mut out = Vec::new();
        let mut current = 0usize;
        for &t in &self.prompt_tokens() {
            out.push(current);
            if t == sep {
                current += 1;
            }
        }
        out
    }

    pub fn applicability(&self) -> Vec<bool> {
        self.instructions.iter().map(|i| i.applicable).collect()
    }

    /// Check the structural invariants of the episode.
    pub fn validate(&self) -> Result<(), WorldError> {
        let err = |s: String| Err(WorldError::Invariant(s));
        if self.instructions.is_empty() {
            return err("episode has no instructions".into());
        }
        let mut union = Mask::zeros(IMG, IMG);
        for (i, ins) in self.instructions.iter().enumerate() {
            if ins.applicable != ins.op.applicable_to(&self.scene) {
                return err(format!("instruction {i}: applicable flag inconsistent"));
            }
            if ins.applicable == ins.target_mask.is_empty() {
                return err(format!(
                    "instruction {i}: mask emptiness does not match applicability"
                ));
            }
            if ins.applicable {
                union.union_with(&ins.target_mask);
            }
        }
        for o in &self.scene.objects {
            if !o.bbox.in_bounds(IMG) {
                return err("object out of bounds".into());
            }
        }
        for y in 0..IMG {
            for x in 0..IMG {
                if union.get(y, x) == 0 && self.goal_image.pixel(y, x) != self.scene.image.pixel(y, x)
                {
                    return err(format!("goal differs outside edit region at ({y},{x})"));
                }
            }
        }
        Ok(())
    }
}

/// Parameters for one generated episode.
#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub scene: SceneConfig,
    pub n_applicable: usize,
    pub n_nonapplicable: usize,
}

const EPISODE_RETRIES: usize = 16;

/// Generate a full episode, retrying with derived seeds if a sampled
/// configuration is unsatisfiable.
pub fn gen_episode(seed: u64, config: &EpisodeConfig) -> Result<Episode, WorldError> {
    let mut last = None;
    for attempt in 0..EPISODE_RETRIES {
        let s = derive_seed(seed, &format!("episode-attempt-{attempt}"));
        match try_gen_episode(s, config) {
            Ok(ep) => return Ok(ep),
            Err(e @ (WorldError::Placement { .. } | WorldError::Infeasible { .. })) => {
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(WorldError::Placement {
        attempts: EPISODE_RETRIES,
    }))
}

fn try_gen_episode(seed: u64, config: &EpisodeConfig) -> Result<Episode, WorldError> {
    let scene = gen_scene(seed, &config.scene)?;
    let instructions =
        gen_instructions(&scene, config.n_applicable, config.n_nonapplicable, seed)?;
    let (goal_image, goal_description) = render_goal(&scene, &instructions);
    Ok(Episode {
        scene,
        instructions,
        goal_image,
        goal_description,
    })
}

// ── Episode files ───────────────────────────────────────────────────

pub fn episode_to_record(ep: &Episode) -> KvRecord {
    let mut rec = KvRecord::new();
    rec.set("h", IMG);
    rec.set("w", IMG);
    rec.set("background", ep.scene.background);
    rec.set("object_count", ep.scene.objects.len());
    for (i, o) in ep.scene.objects.iter().enumerate() {
        rec.set(
            &format!("object_{i}"),
            format!(
                "{} {} {} {} {} {}",
                o.color.word(),
                o.shape.word(),
                o.bbox.x0,
                o.bbox.y0,
                o.bbox.w,
                o.bbox.h
            ),
        );
    }
    rec.set("instruction_count", ep.instructions.len());
    for (i, ins) in ep.instructions.iter().enumerate() {
        rec.set(&format!("instruction_{i}_text"), &ins.text);
        rec.set(&format!("instruction_{i}_category"), ins.category.name());
        rec.set(
            &format!("instruction_{i}_applicable"),
            u8::from(ins.applicable),
        );
    }
    rec.set("goal_description", &ep.goal_description);
    rec.add_blob("scene_ppm", ep.scene.image.to_ppm());
    rec.add_blob("goal_ppm", ep.goal_image.to_ppm());
    for (i, ins) in ep.instructions.iter().enumerate() {
        rec.add_blob(&format!("mask_{i}_pgm"), ins.target_mask.to_pgm());
    }
    rec
}

pub fn episode_from_record(rec: &KvRecord) -> Result<Episode, WorldError> {
    let background: usize = rec.require_parsed("background")?;
    let object_count: usize = rec.require_parsed("object_count")?;
    let mut objects = Vec::with_capacity(object_count);
    for i in 0..object_count {
        let line = rec.require(&format!("object_{i}"))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(WorldError::Invariant(format!("bad object line {line:?}")));
        }
        let parse = |s: &str| -> Result<usize, WorldError> {
            s.parse()
                .map_err(|_| WorldError::Invariant(format!("bad object field {s:?}")))
        };
        objects.push(SceneObject {
            color: ColorName::from_word(parts[0])
                .ok_or_else(|| WorldError::Invariant(format!("bad color {:?}", parts[0])))?,
            shape: ShapeKind::from_word(parts[1])
                .ok_or_else(|| WorldError::Invariant(format!("bad shape {:?}", parts[1])))?,
            bbox: PixBox::new(
                parse(parts[2])?,
                parse(parts[3])?,
                parse(parts[4])?,
                parse(parts[5])?,
            ),
        });
    }
    let image = Image::from_ppm(rec.require_blob("scene_ppm")?)?;
    let scene = Scene {
        image,
        objects,
        background,
    };
    let instruction_count: usize = rec.require_parsed("instruction_count")?;
    let mut instructions = Vec::with_capacity(instruction_count);
    for i in 0..instruction_count {
        let text = rec.require(&format!("instruction_{i}_text"))?.to_string();
        let category = Category::from_name(rec.require(&format!("instruction_{i}_category"))?)
            .ok_or_else(|| WorldError::Invariant("bad category".into()))?;
        let applicable = rec.require(&format!("instruction_{i}_applicable"))? == "1";
        let target_mask = Mask::from_pgm(rec.require_blob(&format!("mask_{i}_pgm"))?)?;
        let op = parse_instruction(&text)?;
        instructions.push(Instruction {
            text,
            category,
            applicable,
            target_mask,
            op,
        });
    }
    let goal_image = Image::from_ppm(rec.require_blob("goal_ppm")?)?;
    let goal_description = rec.require("goal_description")?.to_string();
    Ok(Episode {
        scene,
        instructions,
        goal_image,
        goal_description,
    })
}

pub fn save_episode(ep: &Episode, path: &Path) -> Result<(), WorldError> {
    std::fs::write(path, episode_to_record(ep).to_bytes(EPISODE_MAGIC))?;
    Ok(())
}

pub fn load_episode(path: &Path) -> Result<Episode, WorldError> {
    let bytes = std::fs::read(path)?;
    let rec = KvRecord::from_bytes(&bytes, EPISODE_MAGIC)?;
    episode_from_record(&rec)
}

// ── Splits ──────────────────────────────────────────────────────────

/// Episode counts per split.
#[derive(Debug, Clone, Copy)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 256,
            val: 32,
            test: 64,
        }
    }
}

/// Reference task-mixture totals the split proportions mirror
/// (single-turn / multi-turn / multi-instruction / context-aware).
pub const MIXTURE_REFERENCE_TOTALS: [usize; 4] = [1053, 535, 717, 2624];

/// Sample the per-episode instruction mixture: mostly context-aware
/// episodes (2-3 applicable edits plus one non-applicable instruction),
/// the rest multi-instruction only.
fn sample_mix(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let context_aware_share = MIXTURE_REFERENCE_TOTALS[3] as f64
        / (MIXTURE_REFERENCE_TOTALS[2] + MIXTURE_REFERENCE_TOTALS[3]) as f64;
    if rng.gen::<f64>() < context_aware_share {
        let two_share = 1053.0 / 2624.0;
        let k_app = if rng.gen::<f64>() < two_share { 2 } else { 3 };
        (k_app, 1)
    } else {
        let two_share = 120.0 / 717.0;
        let k_app = if rng.gen::<f64>() < two_share { 2 } else { 3 };
        (k_app, 0)
    }
}

/// Generate the per-split episode files plus a manifest. Returns the paths
/// of all written files.
pub fn build_split(
    counts: SplitCounts,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, WorldError> {
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(WorldError::Infeasible {
            detail: "split counts must be at least 1".into(),
        });
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (split, count) in [
        ("train", counts.train),
        ("val", counts.val),
        ("test", counts.test),
    ] {
        for idx in 0..count {
            let ep_seed = derive_seed(seed, &format!("{split}-{idx}"));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ep_seed, "mix"));
            let (n_app, n_nonapp) = sample_mix(&mut rng);
            let config = EpisodeConfig {
                scene: SceneConfig {
                    min_objects: n_app.min(4),
                    max_objects: 4,
                    ..SceneConfig::default()
                },
                n_applicable: n_app,
                n_nonapplicable: n_nonapp,
            };
            let ep = gen_episode(ep_seed, &config)?;
            let path = out_dir.join(format!("{split}_{idx:04}.episode"));
            save_episode(&ep, &path)?;
            written.push(path);
        }
    }
    let mut manifest = KvRecord::new();
    manifest.set("seed", seed);
    manifest.set("train", counts.train);
    manifest.set("val", counts.val);
    manifest.set("test", counts.test);
    manifest.set("mixture_reference_single_turn", MIXTURE_REFERENCE_TOTALS[0]);
    manifest.set("mixture_reference_multi_turn", MIXTURE_REFERENCE_TOTALS[1]);
    manifest.set(
        "mixture_reference_multi_instruction",
        MIXTURE_REFERENCE_TOTALS[2],
    );
    manifest.set(
        "mixture_reference_context_aware",
        MIXTURE_REFERENCE_TOTALS[3],
    );
    let manifest_path = out_dir.join("manifest.kv");
    std::fs::write(&manifest_path, manifest.to_bytes(MANIFEST_MAGIC))?;
    written.push(manifest_path);
    Ok(written)
}

/// Load every episode of a split, in index order.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Episode>, WorldError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with(&format!("{split}_")) && n.ends_with(".episode"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(WorldError::Infeasible {
            detail: format!("no {split} episodes under {dir:?}"),
        });
    }
    paths.iter().map(|p| load_episode(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_scene_is_deterministic_and_in_bounds() {
        let cfg = SceneConfig::default();
        let a = gen_scene(0, &cfg).unwrap();
        let b = gen_scene(0, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.objects.is_empty() && a.objects.len() <= 4);
        for o in &a.objects {
            assert!(o.bbox.in_bounds(IMG));
            assert_eq!(o.bbox.x0 % ALIGN, 0);
            assert_eq!(o.bbox.w % ALIGN, 0);
        }
    }

    #[test]
    fn single_object_config_yields_one_object() {
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            ..SceneConfig::default()
        };
        let scene = gen_scene(0, &cfg).unwrap();
        assert_eq!(scene.objects.len(), 1);
    }

    #[test]
    fn invalid_scene_config_is_rejected() {
        let cfg = SceneConfig {
            min_objects: 0,
            ..SceneConfig::default()
        };
        assert!(matches!(
            gen_scene(0, &cfg),
            Err(WorldError::Infeasible { .. })
        ));
    }

    #[test]
    fn nonapplicable_instructions_reference_absent_pairs() {
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            ..SceneConfig::default()
        };
        let scene = gen_scene(3, &cfg).unwrap();
        let ins = gen_instructions(&scene, 0, 2, 3).unwrap();
        assert_eq!(ins.len(), 2);
        for i in &ins {
            assert!(!i.applicable);
            assert!(i.target_mask.is_empty());
            match i.op {
                EditOp::Remove { color, shape }
                | EditOp::Replace { color, shape, .. }
                | EditOp::Recolor { color, shape, .. } => {
                    assert!(!scene.has_pair(color, shape));
                }
                EditOp::Add { region, .. } => {
                    let stamp = region.stamp();
                    assert!(scene.objects.iter().any(|o| o.bbox.intersects(&stamp)));
                }
            }
        }
    }

    #[test]
    fn all_nonapplicable_episode_keeps_goal_equal_to_scene() {
        let scene = gen_scene(9, &SceneConfig::default()).unwrap();
        let ins = gen_instructions(&scene, 0, 3, 9).unwrap();
        let (goal, _) = render_goal(&scene, &ins);
        assert_eq!(goal, scene.image);
    }

    #[test]
    fn recolor_touches_only_target_bbox() {
        let cfg = SceneConfig {
            min_objects: 2,
            max_objects: 2,
            ..SceneConfig::default()
        };
        let scene = gen_scene(5, &cfg).unwrap();
        let obj = scene.objects[0];
        let new_color = ColorName::ALL
            .into_iter()
            .find(|&c| !scene.has_pair(c, obj.shape) && c != obj.color)
            .unwrap();
        let op = EditOp::Recolor {
            color: obj.color,
            shape: obj.shape,
            new_color,
        };
        let ins = vec![Instruction::from_op(op, &scene)];
        assert!(ins[0].applicable);
        let (goal, _) = render_goal(&scene, &ins);
        for y in 0..IMG {
            for x in 0..IMG {
                if ins[0].target_mask.get(y, x) == 0 {
                    assert_eq!(goal.pixel(y, x), scene.image.pixel(y, x));
                }
            }
        }
        assert_ne!(goal, scene.image);
    }

    #[test]
    fn remove_then_add_matches_pixel_diff_oracle() {
        // Build a remove+add pair by hand and verify the goal against an
        // independently painted expectation.
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            min_size: 16,
            max_size: 16,
            ..SceneConfig::default()
        };
        let scene = gen_scene(21, &cfg).unwrap();
        let obj = scene.objects[0];
        let free_region = RegionName::ALL
            .into_iter()
            .find(|r| !obj.bbox.intersects(&r.stamp()))
            .unwrap();
        let add_color = ColorName::ALL.into_iter().find(|&c| c != obj.color).unwrap();
        let ops = [
            EditOp::Remove {
                color: obj.color,
                shape: obj.shape,
            },
            EditOp::Add {
                color: add_color,
                shape: ShapeKind::Box,
                region: free_region,
            },
        ];
        let ins: Vec<Instruction> = ops
            .iter()
            .map(|&op| Instruction::from_op(op, &scene))
            .collect();
        assert!(ins.iter().all(|i| i.applicable));
        let (goal, _) = render_goal(&scene, &ins);

        // Oracle: repaint from scratch.
        let mut expect = scene.image.clone();
        let b = obj.bbox;
        expect.fill_rect(b.x0, b.y0, b.w, b.h, background_rgb(scene.background));
        let s = free_region.stamp();
        expect.fill_rect(s.x0, s.y0, s.w, s.h, add_color.rgb());
        assert_eq!(goal, expect);
    }

    #[test]
    fn episode_prompt_alignment_and_boundaries_agree() {
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
        let n = ep.instructions.len();
        assert_eq!(ep.boundary_positions().len(), n);
        let align = ep.gt_alignment();
        assert_eq!(align.len(), ep.prompt_tokens().len());
        assert_eq!(*align.last().unwrap(), n - 1);
        assert!(align.windows(2).all(|w| w[1] >= w[0]));
        ep.validate().unwrap();
    }

    #[test]
    fn episode_file_roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ep = gen_episode(
            7,
            &EpisodeConfig {
                scene: SceneConfig::default(),
                n_applicable: 1,
                n_nonapplicable: 1,
            },
        )
        .unwrap();
        let path = dir.path().join("ep.episode");
        save_episode(&ep, &path).unwrap();
        let loaded = load_episode(&path).unwrap();
        assert_eq!(ep, loaded);
        let again = dir.path().join("ep2.episode");
        save_episode(&loaded, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn build_split_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let counts = SplitCounts {
            train: 2,
            val: 1,
            test: 1,
        };
        let w1 = build_split(counts, 0, d1.path()).unwrap();
        let w2 = build_split(counts, 0, d2.path()).unwrap();
        assert_eq!(w1.len(), w2.len());
        assert_eq!(w1.len(), 5); // 4 episodes + manifest
        for (a, b) in w1.iter().zip(&w2) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        let train = load_split(d1.path(), "train").unwrap();
        assert_eq!(train.len(), 2);
        for ep in &train {
            ep.validate().unwrap();
        }
    }

    #[test]
    fn instruction_text_parses_back() {
        let op = EditOp::Replace {
            color: ColorName::Red,
            shape: ShapeKind::Disc,
            new_color: ColorName::Blue,
            new_shape: ShapeKind::Box,
        };
        assert_eq!(parse_instruction(&op.text()).unwrap(), op);
        assert!(parse_instruction("make it pretty").is_err());
    }
}
