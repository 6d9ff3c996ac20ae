//! Deterministic synthetic detection data: noisy cluttered backgrounds with
//! one to three rendered shapes per image, disjoint source and target
//! category sets, and PPM + JSON Lines storage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndgrad::Tensor;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LstdError, Result};
use crate::geometry::{iou, BBox, LabeledBox};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
    Diamond,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillStyle {
    Solid,
    Striped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub id: usize,
    pub family: ShapeFamily,
    pub fill: FillStyle,
    /// Per-channel inclusive lower and upper color bounds.
    #[serde(default = "default_color_lo")]
    pub color_lo: [u8; 3],
    #[serde(default = "default_color_hi")]
    pub color_hi: [u8; 3],
}

fn default_color_lo() -> [u8; 3] {
    [90, 90, 90]
}

fn default_color_hi() -> [u8; 3] {
    [255, 255, 255]
}

impl CategorySpec {
    fn new(id: usize, family: ShapeFamily, fill: FillStyle) -> Self {
        Self {
            id,
            family,
            fill,
            color_lo: default_color_lo(),
            color_hi: default_color_hi(),
        }
    }
}

pub fn default_source_categories() -> Vec<CategorySpec> {
    use FillStyle::*;
    use ShapeFamily::*;
    vec![
        CategorySpec::new(1, Circle, Solid),
        CategorySpec::new(2, Square, Striped),
        CategorySpec::new(3, Triangle, Solid),
        CategorySpec::new(4, Cross, Solid),
        CategorySpec::new(5, Ring, Solid),
    ]
}

pub fn default_target_categories() -> Vec<CategorySpec> {
    use FillStyle::*;
    use ShapeFamily::*;
    vec![
        CategorySpec::new(1, Star, Solid),
        CategorySpec::new(2, Diamond, Striped),
        CategorySpec::new(3, Bar, Solid),
    ]
}

/// Fails if any (family, fill) appears in both sets.
pub fn check_disjoint(a: &[CategorySpec], b: &[CategorySpec]) -> Result<()> {
    let keys: BTreeSet<_> = a.iter().map(|c| (c.family, c.fill)).collect();
    match b.iter().find(|c| keys.contains(&(c.family, c.fill))) {
        Some(c) => Err(LstdError::Config(format!(
            "category {:?}/{:?} appears in both domains",
            c.family, c.fill
        ))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub categories: Vec<CategorySpec>,
    pub n_images: usize,
    /// Number of distractor strokes per image.
    pub clutter: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            width: 64,
            height: 64,
            categories: default_source_categories(),
            n_images: 100,
            clutter: 6,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(LstdError::Config("n_images must be at least 1".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(LstdError::Config("images must be at least 16×16".into()));
        }
        if self.categories.is_empty() {
            return Err(LstdError::Config("need at least one category".into()));
        }
        let ids: BTreeSet<usize> = self.categories.iter().map(|c| c.id).collect();
        let expected: BTreeSet<usize> = (1..=self.categories.len()).collect();
        if ids != expected {
            return Err(LstdError::Config("category ids must be 1..=K without gaps".into()));
        }
        for c in &self.categories {
            if (0..3).any(|i| c.color_lo[i] > c.color_hi[i]) {
                return Err(LstdError::Config(format!("category {} has an empty color range", c.id)));
            }
        }
        Ok(())
    }
}

/// One image with its annotations. Pixels are interleaved 8-bit RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub boxes: Vec<LabeledBox>,
}

impl SampleRecord {
    /// 3×H×W tensor with values in [0,1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; 3 * w * h];
        for (i, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(vec![3, h, w], data).expect("pixel buffer matches size")
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(|b| b.bbox).collect()
    }

    pub fn has_class(&self, class_id: usize) -> bool {
        self.boxes.iter().any(|b| b.class_id == class_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub categories: Vec<CategorySpec>,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts: BTreeMap<usize, usize> = (1..=self.num_classes()).map(|c| (c, 0)).collect();
        for b in self.samples.iter().flat_map(|s| &s.boxes) {
            *counts.entry(b.class_id).or_default() += 1;
        }
        counts
    }
}

/// A rendered object: its full pixel mask and tight box.
#[derive(Clone, Debug)]
pub struct RenderedObject {
    pub class_id: usize,
    /// (x, y) pixel coordinates covered by the shape.
    pub mask: Vec<(usize, usize)>,
    pub bbox: BBox,
}

fn inside(family: ShapeFamily, u: f64, v: f64) -> bool {
    match family {
        ShapeFamily::Circle => u * u + v * v <= 1.0,
        ShapeFamily::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
        // apex up
        ShapeFamily::Triangle => v <= 1.0 && v >= 2.0 * u.abs() - 1.0,
        ShapeFamily::Cross => (u.abs() <= 0.33 && v.abs() <= 1.0) || (v.abs() <= 0.33 && u.abs() <= 1.0),
        ShapeFamily::Ring => {
            let r2 = u * u + v * v;
            (0.36..=1.0).contains(&r2)
        }
        ShapeFamily::Star => {
            let r = (u * u + v * v).sqrt();
            if r > 1.0 {
                return false;
            }
            let theta = v.atan2(u) + std::f64::consts::FRAC_PI_2;
            let sector = std::f64::consts::TAU / 5.0;
            let phase = (theta.rem_euclid(sector) / sector - 0.5).abs() * 2.0;
            // radius 1 at the points, 0.45 between them
            r <= 0.45 + 0.55 * (1.0 - phase)
        }
        ShapeFamily::Diamond => u.abs() + v.abs() <= 1.0,
        ShapeFamily::Bar => u.abs() <= 1.0 && v.abs() <= 0.35,
    }
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

fn random_color(rng: &mut impl Rng, lo: [u8; 3], hi: [u8; 3]) -> [u8; 3] {
    [0, 1, 2].map(|i| rng.random_range(lo[i]..=hi[i]))
}

fn background(rng: &mut impl Rng, width: usize, height: usize) -> Canvas {
    let base = [0, 1, 2].map(|_| rng.random_range(10..70i32));
    let mut pixels = Vec::with_capacity(3 * width * height);
    for _ in 0..width * height {
        for b in base {
            pixels.push((b + rng.random_range(-18..=18)).clamp(0, 255) as u8);
        }
    }
    Canvas { width, height, pixels }
}

fn stroke(rng: &mut impl Rng, canvas: &mut Canvas) {
    let (w, h) = (canvas.width as f64, canvas.height as f64);
    let x0 = rng.random_range(0.0..w);
    let y0 = rng.random_range(0.0..h);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let len = rng.random_range(6.0..24.0);
    let color = random_color(rng, [40, 40, 40], [200, 200, 200]);
    let steps = (len * 2.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / 2.0;
        let x = x0 + t * angle.cos();
        let y = y0 + t * angle.sin();
        if x >= 0.0 && y >= 0.0 && x < w && y < h {
            canvas.put(x as usize, y as usize, color);
        }
    }
}

/// Rasterizes one shape by sampling pixel centers. Returns `None` if no
/// pixel is covered.
#[allow(clippy::too_many_arguments)]
pub fn render_mask(
    family: ShapeFamily,
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    rotation: f64,
    width: usize,
    height: usize,
) -> Vec<(usize, usize)> {
    let reach = half_w.max(half_h) * 1.5 + 1.0;
    let x_lo = (cx - reach).floor().max(0.0) as usize;
    let x_hi = ((cx + reach).ceil() as usize).min(width);
    let y_lo = (cy - reach).floor().max(0.0) as usize;
    let y_hi = ((cy + reach).ceil() as usize).min(height);
    let (sin, cos) = rotation.sin_cos();
    let mut mask = Vec::new();
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos + dy * sin) / half_w;
            let v = (-dx * sin + dy * cos) / half_h;
            if inside(family, u, v) {
                mask.push((x, y));
            }
        }
    }
    mask
}

/// Tight normalized box around mask pixels.
pub fn mask_box(mask: &[(usize, usize)], width: usize, height: usize) -> Option<BBox> {
    let xmin = mask.iter().map(|p| p.0).min()?;
    let xmax = mask.iter().map(|p| p.0).max()?;
    let ymin = mask.iter().map(|p| p.1).min()?;
    let ymax = mask.iter().map(|p| p.1).max()?;
    BBox::new(
        xmin as f64 / width as f64,
        ymin as f64 / height as f64,
        (xmax + 1) as f64 / width as f64,
        (ymax + 1) as f64 / height as f64,
    )
    .ok()
}

const MIN_AREA: f64 = 0.04;
const MAX_AREA: f64 = 0.5;
const MAX_OVERLAP: f64 = 0.05;
const PLACEMENT_ATTEMPTS: usize = 100;

fn place_object(
    rng: &mut impl Rng,
    spec: &GenSpec,
    category: &CategorySpec,
    placed: &[RenderedObject],
) -> Option<RenderedObject> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let side = rng.random_range(0.24..0.62) * w.min(h);
        let aspect: f64 = rng.random_range(0.8..1.25);
        let half_w = side * aspect.sqrt() / 2.0;
        let half_h = side / aspect.sqrt() / 2.0;
        let rotation = rng.random_range(-30f64..30.0).to_radians();
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        let mask = render_mask(category.family, cx, cy, half_w, half_h, rotation, spec.width, spec.height);
        let Some(bbox) = mask_box(&mask, spec.width, spec.height) else {
            continue;
        };
        // keep the shape whole: its reach must stay inside the image
        let touches_edge = bbox.xmin <= 0.0 || bbox.ymin <= 0.0 || bbox.xmax >= 1.0 || bbox.ymax >= 1.0;
        if touches_edge || !(MIN_AREA..=MAX_AREA).contains(&bbox.area()) {
            continue;
        }
        if placed.iter().any(|o| iou(&o.bbox, &bbox) > MAX_OVERLAP) {
            continue;
        }
        return Some(RenderedObject {
            class_id: category.id,
            mask,
            bbox,
        });
    }
    None
}

fn paint(rng: &mut impl Rng, canvas: &mut Canvas, object: &RenderedObject, category: &CategorySpec) {
    let color = random_color(rng, category.color_lo, category.color_hi);
    let dark = color.map(|c| (c as f64 * 0.4) as u8);
    let stripe_period = rng.random_range(3..6usize);
    for &(x, y) in &object.mask {
        let rgb = match category.fill {
            FillStyle::Solid => color,
            FillStyle::Striped if ((x + y) / stripe_period) % 2 == 0 => color,
            FillStyle::Striped => dark,
        };
        canvas.put(x, y, rgb);
    }
}

/// Renders image `index` of a dataset, with the objects' full masks.
/// Retries with the next substream when an object cannot be placed.
pub fn render_image(spec: &GenSpec, seed: u64, index: usize) -> (SampleRecord, Vec<RenderedObject>) {
    for attempt in 0u64.. {
        let mut rng = substream(seed, "synth-image", ((index as u64) << 16) | attempt);
        let mut canvas = background(&mut rng, spec.width, spec.height);
        for _ in 0..spec.clutter {
            stroke(&mut rng, &mut canvas);
        }
        let n_objects = rng.random_range(1..=3usize);
        let mut objects: Vec<RenderedObject> = Vec::with_capacity(n_objects);
        let mut ok = true;
        for _ in 0..n_objects {
            let category = &spec.categories[rng.random_range(0..spec.categories.len())];
            match place_object(&mut rng, spec, category, &objects) {
                Some(o) => {
                    paint(&mut rng, &mut canvas, &o, category);
                    objects.push(o);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let boxes = objects
            .iter()
            .map(|o| LabeledBox {
                bbox: o.bbox,
                class_id: o.class_id,
            })
            .collect();
        let record = SampleRecord {
            id: format!("img_{index:06}"),
            width: spec.width,
            height: spec.height,
            pixels: canvas.pixels,
            boxes,
        };
        return (record, objects);
    }
    unreachable!("attempt counter is unbounded")
}

/// Generates `spec.n_images` images. Each image has its own substream, so
/// the output does not depend on how the work is scheduled.
pub fn generate(spec: &GenSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.n_images)
        .into_par_iter()
        .map(|i| render_image(spec, seed, i).0)
        .collect();
    Ok(Dataset {
        name: spec.name.clone(),
        seed,
        categories: spec.categories.clone(),
        samples,
    })
}

/// Source training set, target k-shot pool and held-out target test set.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub source: Dataset,
    pub target_pool: Dataset,
    pub target_test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub source_images_per_class: usize,
    pub target_pool_images: usize,
    pub test_images_per_class: usize,
    pub clutter: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            source_images_per_class: 2000,
            target_pool_images: 200,
            test_images_per_class: 100,
            clutter: 6,
        }
    }
}

pub fn generate_benchmark(spec: &BenchmarkSpec, seed: u64) -> Result<Benchmark> {
    let source_cats = default_source_categories();
    let target_cats = default_target_categories();
    check_disjoint(&source_cats, &target_cats)?;
    let gen = |name: &str, categories: &[CategorySpec], n: usize, stream: u64| {
        generate(
            &GenSpec {
                name: name.into(),
                categories: categories.to_vec(),
                n_images: n,
                clutter: spec.clutter,
                ..GenSpec::default()
            },
            crate::rng::substream_seed(seed, name, stream),
        )
    };
    Ok(Benchmark {
        source: gen("source", &source_cats, spec.source_images_per_class * source_cats.len(), 0)?,
        target_pool: gen("target-train", &target_cats, spec.target_pool_images, 0)?,
        target_test: gen("target-test", &target_cats, spec.test_images_per_class * target_cats.len(), 0)?,
    })
}

/// Exactly `k` images per class 1..=K. Classes are filled in id order and
/// an image chosen for one class is not reused for another.
pub fn sample_k_shot(pool: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 {
        return Err(LstdError::Dataset("shot count must be at least 1".into()));
    }
    let mut taken = vec![false; pool.samples.len()];
    let mut chosen = Vec::new();
    for class in 1..=pool.num_classes() {
        let mut rng = substream(seed, "k-shot", class as u64);
        let mut candidates: Vec<usize> = (0..pool.samples.len())
            .filter(|&i| !taken[i] && pool.samples[i].has_class(class))
            .collect();
        if candidates.len() < k {
            return Err(LstdError::Dataset(format!(
                "class {class} has only {} unused images, {k} requested",
                candidates.len()
            )));
        }
        for i in 0..k {
            let j = rng.random_range(i..candidates.len());
            candidates.swap(i, j);
            taken[candidates[i]] = true;
            chosen.push(candidates[i]);
        }
    }
    Ok(Dataset {
        name: format!("{}-{k}shot", pool.name),
        seed,
        categories: pool.categories.clone(),
        samples: chosen.into_iter().map(|i| pool.samples[i].clone()).collect(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    class: usize,
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    image: String,
    boxes: Vec<BoxRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub categories: Vec<CategorySpec>,
    pub counts: BTreeMap<String, usize>,
    pub seed: u64,
}

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Parses a binary 8-bit PPM into (width, height, rgb).
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    if next_token(bytes, &mut pos) != Some(b"P6") {
        return Err("not a binary PPM (P6)".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        next_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format!("bad PPM {what}"))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(format!("unsupported PPM maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let raster = bytes.get(start..start + 3 * w * h).ok_or("truncated PPM raster")?;
    Ok((w, h, raster.to_vec()))
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".into(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| LstdError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| LstdError::io(&tmp, e))?;
    f.sync_all().map_err(|e| LstdError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LstdError::io(path, e))
}

pub fn manifest(dataset: &Dataset) -> Manifest {
    let mut counts = BTreeMap::new();
    counts.insert("images".to_string(), dataset.samples.len());
    counts.insert(
        "boxes".to_string(),
        dataset.samples.iter().map(|s| s.boxes.len()).sum(),
    );
    for (c, n) in dataset.class_counts() {
        counts.insert(format!("class_{c}"), n);
    }
    Manifest {
        name: dataset.name.clone(),
        categories: dataset.categories.clone(),
        counts,
        seed: dataset.seed,
    }
}

/// Writes `<id>.ppm` images, the annotation JSON Lines file and the
/// manifest into `dir`.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LstdError::io(dir, e))?;
    let mut lines = String::new();
    for s in &dataset.samples {
        let file = format!("{}.ppm", s.id);
        write_atomic(&dir.join(&file), &encode_ppm(s.width, s.height, &s.pixels))?;
        let record = AnnotationRecord {
            image: file,
            boxes: s
                .boxes
                .iter()
                .map(|b| BoxRecord {
                    class: b.class_id,
                    xmin: b.bbox.xmin,
                    ymin: b.bbox.ymin,
                    xmax: b.bbox.xmax,
                    ymax: b.bbox.ymax,
                })
                .collect(),
        };
        lines.push_str(&serde_json::to_string(&record).expect("plain record serializes"));
        lines.push('\n');
    }
    write_atomic(&dir.join(ANNOTATIONS_FILE), lines.as_bytes())?;
    let m = serde_json::to_string_pretty(&manifest(dataset)).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), format!("{m}\n").as_bytes())
}

/// Reads a directory written by [`save`]. The manifest supplies the name,
/// seed and categories when present.
pub fn load(dir: &Path) -> Result<Dataset> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let file = fs::File::open(&ann_path).map_err(|e| LstdError::io(&ann_path, e))?;
    let mut samples = Vec::new();
    let mut max_class = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| LstdError::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| LstdError::Parse {
            path: ann_path.clone(),
            line: line_no,
            reason,
        };
        let record: AnnotationRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let img_path = dir.join(&record.image);
        let bytes = fs::read(&img_path).map_err(|e| LstdError::io(&img_path, e))?;
        let (width, height, pixels) = decode_ppm(&bytes).map_err(|e| parse_err(format!("{}: {e}", record.image)))?;
        let mut boxes = Vec::with_capacity(record.boxes.len());
        for b in record.boxes {
            if b.class == 0 {
                return Err(parse_err("class 0 is reserved for background".into()));
            }
            let bbox = BBox::new(b.xmin, b.ymin, b.xmax, b.ymax).map_err(|e| parse_err(e.to_string()))?;
            max_class = max_class.max(b.class);
            boxes.push(LabeledBox {
                bbox,
                class_id: b.class,
            });
        }
        let id = record.image.strip_suffix(".ppm").unwrap_or(&record.image).to_string();
        samples.push(SampleRecord {
            id,
            width,
            height,
            pixels,
            boxes,
        });
    }
    let man_path = dir.join(MANIFEST_FILE);
    let (name, seed, categories) = match fs::read_to_string(&man_path) {
        Ok(text) => {
            let m: Manifest = serde_json::from_str(&text).map_err(|e| LstdError::Parse {
                path: man_path.clone(),
                line: e.line(),
                reason: e.to_string(),
            })?;
            (m.name, m.seed, m.categories)
        }
        Err(_) => {
            let cats = (1..=max_class)
                .map(|id| CategorySpec::new(id, ShapeFamily::Square, FillStyle::Solid))
                .collect();
            (dir.display().to_string(), 0, cats)
        }
    };
    if max_class > categories.len() {
        return Err(LstdError::Dataset(format!(
            "annotations use class {max_class} but only {} categories are declared",
            categories.len()
        )));
    }
    Ok(Dataset {
        name,
        seed,
        categories,
        samples,
    })
}
