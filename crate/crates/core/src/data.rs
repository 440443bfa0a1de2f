//! Synthetic placement scenes, the caption embedding stub, box metrics and
//! the dataset manifest.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";
pub const SCENES: &str = "scenes.json";

const MAX_TRIES: usize = 100;
const GAP: f64 = 0.04;
const MIN_SIDE: f64 = 0.16;
const MAX_SIDE: f64 = 0.26;
const BACKGROUND: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::White,
        Color::Black,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    pub fn rgb8(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 25, 25],
            Color::Green => [25, 190, 50],
            Color::Blue => [40, 65, 230],
            Color::Yellow => [240, 230, 25],
            Color::Purple => [140, 50, 180],
            Color::Orange => [255, 140, 0],
            Color::White => [255, 255, 255],
            Color::Black => [0, 0, 0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
    Beside,
    Between,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
        Relation::Beside,
        Relation::Between,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Beside => "beside",
            Relation::Between => "between",
        }
    }

    pub fn anchors(self) -> usize {
        if self == Relation::Between {
            2
        } else {
            1
        }
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Shape(format!("invalid box {b}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        const TOL: f64 = 1e-12;
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.x >= -TOL
            && self.y >= -TOL
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0 + TOL
            && self.y + self.h <= 1.0 + TOL
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    fn grown(&self, m: f64) -> Self {
        Self {
            x: self.x - m,
            y: self.y - m,
            w: self.w + 2.0 * m,
            h: self.h + 2.0 * m,
        }
    }

    fn intersection(&self, o: &BBox) -> f64 {
        let iw = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let ih = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        iw.max(0.0) * ih.max(0.0)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6},{:.6},{:.6},{:.6}", self.x, self.y, self.w, self.h)
    }
}

impl std::str::FromStr for BBox {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("bad box {s:?}")))?;
        if v.len() != 4 {
            return Err(Error::Format(format!("box needs 4 fields, got {s:?}")));
        }
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `100·max(0, 1 − d/√2)` with `d` the distance between box centres.
pub fn dist_score(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let d = (ax - bx).hypot(ay - by);
    100.0 * (1.0 - d / std::f64::consts::SQRT_2).max(0.0)
}

/// `100·min(area)/max(area)`.
pub fn size_score(a: &BBox, b: &BBox) -> f64 {
    let (p, q) = (a.area(), b.area());
    100.0 * p.min(q) / p.max(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub side: usize,
    pub objects: Vec<SceneObject>,
    pub target: (Shape, Color),
    pub relation: Relation,
    pub anchors: Vec<usize>,
    pub caption: String,
    pub gt_box: BBox,
    /// Second legal placement for "beside".
    pub alt_box: Option<BBox>,
    #[serde(skip)]
    pub image: ImageTensor,
}

/// What training and evaluation consume.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub caption: String,
    pub gt_box: BBox,
    pub alt_box: Option<BBox>,
}

impl Scene {
    pub fn sample(&self) -> Sample {
        Sample {
            image: self.image.clone(),
            caption: self.caption.clone(),
            gt_box: self.gt_box,
            alt_box: self.alt_box,
        }
    }
}

fn inside(b: &BBox) -> bool {
    b.is_valid()
}

fn place_objects(rng: &mut ChaCha8Rng, n: usize) -> Option<Vec<SceneObject>> {
    let mut kinds: Vec<(Shape, Color)> = Shape::ALL
        .iter()
        .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
        .collect();
    kinds.shuffle(rng);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for &(shape, color) in kinds.iter().take(n) {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let s = rng.gen_range(MIN_SIDE..MAX_SIDE);
            let b = BBox {
                x: rng.gen_range(0.0..1.0 - s),
                y: rng.gen_range(0.0..1.0 - s),
                w: s,
                h: s,
            };
            if objects.iter().all(|o| o.bbox.grown(GAP).intersection(&b) == 0.0) {
                objects.push(SceneObject { shape, color, bbox: b });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

/// Box satisfying `rel` with respect to the anchor boxes. `side` picks the
/// left (`false`) or right (`true`) placement of "beside".
fn rule_box(rel: Relation, a: &BBox, b: Option<&BBox>, side: bool) -> BBox {
    let (acx, acy) = a.center();
    match rel {
        Relation::LeftOf => BBox::centered(a.x - GAP - a.w / 2.0, acy, a.w, a.h),
        Relation::RightOf => BBox::centered(a.x + a.w + GAP + a.w / 2.0, acy, a.w, a.h),
        Relation::Above => BBox::centered(acx, a.y - GAP - a.h / 2.0, a.w, a.h),
        Relation::Below => BBox::centered(acx, a.y + a.h + GAP + a.h / 2.0, a.w, a.h),
        Relation::Beside => {
            let r = if side { Relation::RightOf } else { Relation::LeftOf };
            rule_box(r, a, None, false)
        }
        Relation::Between => {
            let b = b.expect("between needs two anchors");
            let (bcx, bcy) = b.center();
            BBox::centered((acx + bcx) / 2.0, (acy + bcy) / 2.0, (a.w + b.w) / 2.0, (a.h + b.h) / 2.0)
        }
    }
}

fn legal(b: &BBox, objects: &[SceneObject]) -> bool {
    inside(b) && objects.iter().all(|o| iou(b, &o.bbox) <= 0.1)
}

fn caption_for(target: (Shape, Color), rel: Relation, objects: &[SceneObject], anchors: &[usize]) -> String {
    let name = |o: &SceneObject| format!("{} {}", o.color.word(), o.shape.word());
    let spatial = match rel {
        Relation::Between => format!(
            "between {} and {}",
            name(&objects[anchors[0]]),
            name(&objects[anchors[1]])
        ),
        _ => format!("{} {}", rel.phrase(), name(&objects[anchors[0]])),
    };
    format!("{} {} [{spatial}]", target.1.word(), target.0.word())
}

/// Draws a scene with `n_objects` shapes on a `side×side` image.
pub fn generate_scene(seed: u64, side: usize, n_objects: usize) -> Result<Scene> {
    if n_objects == 0 {
        return Err(Error::Config("a scene needs at least one object".into()));
    }
    if n_objects > Shape::ALL.len() * Color::ALL.len() - 1 {
        return Err(Error::Placement { tries: MAX_TRIES });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_TRIES {
        let Some(objects) = place_objects(&mut rng, n_objects) else {
            continue;
        };
        let rels: Vec<Relation> = Relation::ALL
            .iter()
            .copied()
            .filter(|r| r.anchors() <= n_objects)
            .collect();
        let rel = *rels.choose(&mut rng).expect("relations");
        let mut order: Vec<usize> = (0..n_objects).collect();
        order.shuffle(&mut rng);
        let anchors: Vec<usize> = order[..rel.anchors()].to_vec();
        let a = &objects[anchors[0]].bbox;
        let b = anchors.get(1).map(|&i| &objects[i].bbox);
        let (gt, alt) = if rel == Relation::Beside {
            let first: bool = rng.gen();
            let p = rule_box(rel, a, None, first);
            let q = rule_box(rel, a, None, !first);
            match (legal(&p, &objects), legal(&q, &objects)) {
                (true, true) => (p, Some(q)),
                (true, false) => (p, None),
                (false, true) => (q, None),
                (false, false) => continue,
            }
        } else {
            let p = rule_box(rel, a, b, false);
            if !legal(&p, &objects) {
                continue;
            }
            (p, None)
        };
        let taken: Vec<(Shape, Color)> = objects.iter().map(|o| (o.shape, o.color)).collect();
        let free: Vec<(Shape, Color)> = Shape::ALL
            .iter()
            .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
            .filter(|k| !taken.contains(k))
            .collect();
        let target = *free.choose(&mut rng).expect("free kind");
        let caption = caption_for(target, rel, &objects, &anchors);
        let mut scene = Scene {
            seed,
            side,
            objects,
            target,
            relation: rel,
            anchors,
            caption,
            gt_box: gt,
            alt_box: alt,
            image: ImageTensor::default(),
        };
        scene.image = render(&scene);
        return Ok(scene);
    }
    Err(Error::Placement { tries: MAX_TRIES })
}

fn covers(shape: Shape, b: &BBox, px: f64, py: f64) -> bool {
    let (cx, cy) = b.center();
    match shape {
        Shape::Square => px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h,
        Shape::Circle => {
            let r = b.w.min(b.h) / 2.0;
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        Shape::Triangle => {
            if py < b.y || py >= b.y + b.h {
                return false;
            }
            let half = (py - b.y) / b.h * b.w / 2.0;
            (px - cx).abs() <= half
        }
    }
}

/// Rasterizes the scene's objects over a grey background.
pub fn render(scene: &Scene) -> ImageTensor {
    let n = scene.side;
    let mut img = ImageTensor::filled(n, n, BACKGROUND.map(|v| v as f64 / 255.0));
    for r in 0..n {
        for c in 0..n {
            let (px, py) = ((c as f64 + 0.5) / n as f64, (r as f64 + 0.5) / n as f64);
            for o in &scene.objects {
                if covers(o.shape, &o.bbox, px, py) {
                    img.set_pixel(r, c, o.color.rgb8().map(|v| v as f64 / 255.0));
                }
            }
        }
    }
    img
}

/// Seed of scene `index` in a dataset drawn with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` scenes with between `min_objects` and `max_objects` shapes each.
pub fn generate_scenes(seed: u64, n: usize, side: usize, min_objects: usize, max_objects: usize) -> Result<Vec<Scene>> {
    if min_objects == 0 || max_objects < min_objects {
        return Err(Error::Config(format!(
            "object range {min_objects}..={max_objects} is empty"
        )));
    }
    (0..n)
        .map(|i| {
            let s = scene_seed(seed, i);
            let k = min_objects + (s % (max_objects - min_objects + 1) as u64) as usize;
            generate_scene(s, side, k)
        })
        .collect()
}

/// Cells of an `h×w` grid whose centres fall inside `b`; at least the cell
/// containing the box centre.
pub fn box_mask(b: &BBox, h: usize, w: usize) -> Vec<f64> {
    let mut m = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (px, py) = ((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
            if px >= b.x && px <= b.x + b.w && py >= b.y && py <= b.y + b.h {
                m[r * w + c] = 1.0;
            }
        }
    }
    if m.iter().all(|&v| v == 0.0) {
        let (cx, cy) = b.center();
        let r = ((cy * h as f64) as usize).min(h - 1);
        let c = ((cx * w as f64) as usize).min(w - 1);
        m[r * w + c] = 1.0;
    }
    m
}

/// Bounding rectangle of the cells with value `≥ beta_frac·max`.
pub fn predicted_box(h: usize, w: usize, values: &[f64], beta_frac: f64) -> Result<BBox> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let beta = beta_frac * max;
    if !(max > 0.0) || !max.is_finite() || values.len() != h * w {
        return Err(Error::GuidanceEmpty { beta });
    }
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
    for r in 0..h {
        for c in 0..w {
            if values[r * w + c] > beta {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    BBox::new(
        c0 as f64 / w as f64,
        r0 as f64 / h as f64,
        (c1 - c0 + 1) as f64 / w as f64,
        (r1 - r0 + 1) as f64 / h as f64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneMetrics {
    pub iou: f64,
    pub size_score: f64,
    pub dist_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<SceneMetrics>,
    pub mean: SceneMetrics,
}

impl EvalReport {
    /// One line per scene plus a final `mean` line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&format!("{i}\t{:.6}\t{:.6}\t{:.6}\n", e.iou, e.size_score, e.dist_score));
        }
        let m = &self.mean;
        out.push_str(&format!("mean\t{:.6}\t{:.6}\t{:.6}\n", m.iou, m.size_score, m.dist_score));
        out
    }
}

/// Scores each prediction against the better-matching legal placement.
pub fn evaluate_batch(samples: &[Sample], predictions: &[BBox]) -> Result<EvalReport> {
    if samples.len() != predictions.len() {
        return Err(Error::LengthMismatch(samples.len(), predictions.len()));
    }
    let entries: Vec<SceneMetrics> = samples
        .iter()
        .zip(predictions)
        .map(|(s, p)| {
            let mut gt = s.gt_box;
            if let Some(alt) = s.alt_box {
                if dist_score(p, &alt) > dist_score(p, &gt) {
                    gt = alt;
                }
            }
            SceneMetrics {
                iou: iou(p, &gt),
                size_score: size_score(p, &gt),
                dist_score: dist_score(p, &gt),
            }
        })
        .collect();
    let n = entries.len().max(1) as f64;
    let mean = SceneMetrics {
        iou: entries.iter().map(|e| e.iou).sum::<f64>() / n,
        size_score: entries.iter().map(|e| e.size_score).sum::<f64>() / n,
        dist_score: entries.iter().map(|e| e.dist_score).sum::<f64>() / n,
    };
    Ok(EvalReport { entries, mean })
}

/// Closed caption vocabulary.
pub const VOCAB: [&str; 40] = [
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black", "circle", "square", "triangle", "left",
    "right", "of", "above", "below", "beside", "between", "and", "a", "an", "the", "small", "large", "new", "one",
    "object", "shape", "near", "next", "to", "under", "over", "on", "at", "put", "place", "add", "draw", "there",
];

pub const EMBED_DIM: usize = 64;
const TABLE_SEED: u64 = 0x7E47_5EED;

/// Caption embedding: one row per token, split into the appearance tokens
/// (outside brackets) and spatial tokens (inside brackets).
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Vec<String>,
    pub data: Tensor,
    pub appearance: Range<usize>,
    pub spatial: Range<usize>,
}

impl TextEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Fixed-seed embedding table over [`VOCAB`].
#[derive(Debug, Clone)]
pub struct TextStub {
    table: Tensor,
}

impl Default for TextStub {
    fn default() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TABLE_SEED);
        Self {
            table: Tensor::randn(&[VOCAB.len(), EMBED_DIM], &mut rng),
        }
    }
}

/// Splits `appearance [spatial]` into tokens and the bracketed range.
pub fn tokenize(caption: &str) -> Result<(Vec<String>, Range<usize>)> {
    let spaced = caption.replace('[', " [ ").replace(']', " ] ");
    let mut tokens = Vec::new();
    let mut open = None;
    let mut close = None;
    for t in spaced.split_whitespace() {
        match t {
            "[" if open.is_none() => open = Some(tokens.len()),
            "]" if open.is_some() && close.is_none() => close = Some(tokens.len()),
            "[" | "]" => return Err(Error::Format(format!("unbalanced brackets in {caption:?}"))),
            _ if close.is_some() => {
                return Err(Error::Format(format!(
                    "spatial text must end the caption: {caption:?}"
                )))
            }
            _ => tokens.push(t.to_lowercase()),
        }
    }
    let spatial = match (open, close) {
        (Some(a), Some(b)) => a..b,
        (None, None) => tokens.len()..tokens.len(),
        _ => return Err(Error::Format(format!("unbalanced brackets in {caption:?}"))),
    };
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok((tokens, spatial))
}

impl TextStub {
    pub fn embed(&self, caption: &str) -> Result<TextEmbedding> {
        let (tokens, spatial) = tokenize(caption)?;
        let mut data = Vec::with_capacity(tokens.len() * EMBED_DIM);
        for t in &tokens {
            let i = VOCAB
                .iter()
                .position(|v| v == t)
                .ok_or_else(|| Error::Vocabulary(t.clone()))?;
            data.extend_from_slice(self.table.row(i));
        }
        Ok(TextEmbedding {
            data: Tensor::new(&[tokens.len(), EMBED_DIM], data)?,
            appearance: 0..spatial.start,
            spatial,
            tokens,
        })
    }
}

pub fn embed_text_stub(caption: &str) -> Result<TextEmbedding> {
    TextStub::default().embed(caption)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub caption: String,
    pub gt_box: BBox,
}

pub fn manifest_line(e: &ManifestEntry) -> String {
    format!("{}\t{}\t{}\n", e.path.display(), e.caption, e.gt_box)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Format(format!("manifest line {}: expected 3 fields", i + 1)));
            }
            Ok(ManifestEntry {
                path: PathBuf::from(f[0]),
                caption: f[1].to_string(),
                gt_box: f[2].parse()?,
            })
        })
        .collect()
}

fn image_name(i: usize) -> String {
    format!("scene_{i:05}.ppm")
}

/// Writes images, the manifest and the scene sidecar into `dir`.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in scenes.iter().enumerate() {
        let name = image_name(i);
        imageio::write_ppm(&dir.join(&name), &s.image)?;
        manifest.push_str(&manifest_line(&ManifestEntry {
            path: PathBuf::from(name),
            caption: s.caption.clone(),
            gt_box: s.gt_box,
        }));
    }
    let json = serde_json::to_vec_pretty(scenes).map_err(|e| Error::Format(e.to_string()))?;
    imageio::write_atomic(&dir.join(SCENES), &json)?;
    imageio::write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Loads a dataset directory. Alternate placements come from the scene
/// sidecar when present.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let entries = parse_manifest(&text)?;
    let spath = dir.join(SCENES);
    let scenes: Option<Vec<Scene>> = match fs::read(&spath) {
        Ok(b) => Some(serde_json::from_slice(&b).map_err(|e| Error::Format(format!("{}: {e}", spath.display())))?),
        Err(_) => None,
    };
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let path = if e.path.is_absolute() { e.path.clone() } else { dir.join(&e.path) };
            let alt_box = scenes
                .as_ref()
                .and_then(|s| s.get(i))
                .filter(|s| s.caption == e.caption)
                .and_then(|s| s.alt_box);
            Ok(Sample {
                image: imageio::read_ppm(&path)?,
                caption: e.caption,
                gt_box: e.gt_box,
                alt_box,
            })
        })
        .collect()
}
