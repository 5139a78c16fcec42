//! Synthetic text scenes, part-mask selection and dataset directories.
//!
//! A [`SceneSample`] keeps the clean background and every text instance
//! separately, so any subset of instances can be rendered exactly. That is
//! what makes part-mask training targets exact: the ground truth for a
//! mask over some instances is the scene rendered with only the others.
//!
//! Dataset directory layout:
//!
//! ```text
//! <root>/images/<id>.png   input image
//! <root>/gts/<id>.png      image with all text removed
//! <root>/anns/<id>.json    [{"id": 0, "polygon": [[x, y], ...], "text": "..."}]
//! <root>/masks/<id>.png    optional 0/255 mask, overrides the annotations
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::metrics::composite_non_text;
use crate::tensor::Tensor;

/// Glyph cell size of the bundled bitmap font.
const GLYPH: usize = 8;

/// Extra border kept around rendered text inside its polygon, in pixels.
const POLYGON_MARGIN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Glyph height in pixels.
    pub font_size: f64,
    pub color: [u8; 3],
    pub rotation_deg: f64,
    /// Centre of the text box, pixel coordinates.
    pub center: [f64; 2],
}

/// One text instance. Polygon vertices are `(x, y)` in continuous pixel
/// coordinates, where pixel `(col, row)` covers `[col, col+1) × [row, row+1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextInstance {
    pub id: u32,
    pub polygon: Vec<[f64; 2]>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render: Option<RenderParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub background: RgbImage,
    pub instances: Vec<TextInstance>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.background.height() as usize
    }

    pub fn width(&self) -> usize {
        self.background.width() as usize
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.instances.iter().map(|i| i.id).collect()
    }
}

/// Input image, erase mask and target, all at the same resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub id: String,
    /// `I_0`, 3 channels in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `M_0`, 1 channel in `{0, 1}`; 1 marks pixels to erase.
    pub mask: Tensor<f32>,
    /// `I_gt`, 3 channels in `[0, 1]`.
    pub gt: Tensor<f32>,
    /// Union of the instances that must stay visible, when known.
    pub preserved_mask: Option<Tensor<f32>>,
    pub seed: u64,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        if self.image.channels() != 3 || self.gt.channels() != 3 || self.mask.channels() != 1 {
            return Err(Error::ShapeMismatch(format!("triplet {}: channel counts", self.id)));
        }
        if self.image.shape() != self.gt.shape() || !self.image.same_spatial(&self.mask) {
            return Err(Error::ShapeMismatch(format!(
                "triplet {}: image {:?}, gt {:?}, mask {:?}",
                self.id,
                self.image.shape(),
                self.gt.shape(),
                self.mask.shape()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- geometry

fn on_segment(p: (f64, f64), a: [f64; 2], b: [f64; 2]) -> bool {
    const EPS: f64 = 1e-9;
    let cross = (b[0] - a[0]) * (p.1 - a[1]) - (b[1] - a[1]) * (p.0 - a[0]);
    if cross.abs() > EPS * (1.0 + (b[0] - a[0]).abs() + (b[1] - a[1]).abs()) {
        return false;
    }
    p.0 >= a[0].min(b[0]) - EPS && p.0 <= a[0].max(b[0]) + EPS && p.1 >= a[1].min(b[1]) - EPS && p.1 <= a[1].max(b[1]) + EPS
}

/// Point-in-polygon with the boundary counted as inside.
pub fn point_in_polygon(p: (f64, f64), poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if on_segment(p, a, b) {
            return true;
        }
        if (a[1] > p.1) != (b[1] > p.1) {
            let x = a[0] + (p.1 - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p.0 < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn bbox(poly: &[[f64; 2]]) -> (f64, f64, f64, f64) {
    poly.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(x0, y0, x1, y1), p| (x0.min(p[0]), y0.min(p[1]), x1.max(p[0]), y1.max(p[1])),
    )
}

fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    (o1 * o2 < 0.0) && (o3 * o4 < 0.0)
}

/// No two non-adjacent edges cross.
pub fn polygon_is_simple(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// Binary mask of pixels whose centre lies inside (or on the boundary of)
/// any of the given polygons.
pub fn rasterize_mask(instances: &[&TextInstance], height: usize, width: usize) -> Tensor<f32> {
    let mut mask = Tensor::zeros(1, height, width);
    for inst in instances {
        let (x0, y0, x1, y1) = bbox(&inst.polygon);
        let cx0 = (x0 - 0.5).ceil().max(0.0) as usize;
        let cy0 = (y0 - 0.5).ceil().max(0.0) as usize;
        let cx1 = ((x1 - 0.5).floor() as i64).min(width as i64 - 1);
        let cy1 = ((y1 - 0.5).floor() as i64).min(height as i64 - 1);
        if cx1 < 0 || cy1 < 0 {
            continue;
        }
        for y in cy0..=cy1 as usize {
            for x in cx0..=cx1 as usize {
                if point_in_polygon((x as f64 + 0.5, y as f64 + 0.5), &inst.polygon) {
                    mask.set(0, y, x, 1.0);
                }
            }
        }
    }
    mask
}

/// Square dilation of a binary mask by `radius` pixels.
pub fn dilate_mask(mask: &Tensor<f32>, radius: usize) -> Tensor<f32> {
    if radius == 0 {
        return mask.clone();
    }
    let (_, h, w) = mask.shape();
    let r = radius as isize;
    Tensor::from_fn(1, h, w, |_, y, x| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w && mask.get(0, sy as usize, sx as usize) > 0.5 {
                    return 1.0;
                }
            }
        }
        0.0
    })
}

// --------------------------------------------------------------- rendering

fn glyph_bit(ch: char, row: usize, col: usize) -> bool {
    use font8x8::UnicodeFonts;
    let g = font8x8::BASIC_FONTS.get(ch).unwrap_or([0; 8]);
    (g[row] >> col) & 1 == 1
}

fn draw_instance(img: &mut RgbImage, inst: &TextInstance) {
    let Some(rp) = &inst.render else { return };
    let chars: Vec<char> = inst.text.chars().collect();
    let scale = rp.font_size / GLYPH as f64;
    let tw = chars.len() as f64 * GLYPH as f64 * scale;
    let th = rp.font_size;
    let (sin, cos) = rp.rotation_deg.to_radians().sin_cos();
    let (x0, y0, x1, y1) = bbox(&inst.polygon);
    let (w, h) = (img.width() as i64, img.height() as i64);
    let ys = (y0.floor() as i64).max(0)..=(y1.ceil() as i64).min(h - 1);
    for y in ys {
        for x in (x0.floor() as i64).max(0)..=(x1.ceil() as i64).min(w - 1) {
            let (px, py) = (x as f64 + 0.5 - rp.center[0], y as f64 + 0.5 - rp.center[1]);
            // rotate into the text frame
            let lx = cos * px + sin * py + tw / 2.0;
            let ly = -sin * px + cos * py + th / 2.0;
            if lx < 0.0 || ly < 0.0 || lx >= tw || ly >= th {
                continue;
            }
            let col = (lx / scale) as usize;
            let row = ((ly / scale) as usize).min(GLYPH - 1);
            let ci = col / GLYPH;
            if ci < chars.len() && glyph_bit(chars[ci], row, col % GLYPH) {
                img.put_pixel(x as u32, y as u32, Rgb(rp.color));
            }
        }
    }
}

/// Background with exactly the `include`d instances drawn on top.
pub fn render_scene(sample: &SceneSample, include: &BTreeSet<u32>) -> Result<RgbImage> {
    let known = sample.ids();
    if let Some(bad) = include.iter().find(|id| !known.contains(id)) {
        return Err(Error::InvalidArgument(format!("unknown instance id {bad}")));
    }
    let mut img = sample.background.clone();
    for inst in sample.instances.iter().filter(|i| include.contains(&i.id)) {
        draw_instance(&mut img, inst);
    }
    Ok(img)
}

/// Ids kept as erase targets: each instance is independently excluded
/// (left visible) with probability `alpha`.
pub fn select_instances(instances: &[TextInstance], alpha: f64, seed: u64) -> BTreeSet<u32> {
    let alpha = alpha.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    instances
        .iter()
        .filter(|_| rng.gen::<f64>() >= alpha)
        .map(|i| i.id)
        .collect()
}

/// Part-mask training triplet: `image` has every instance, `gt` only the
/// instances that were not selected, `mask` covers the selected ones.
pub fn make_triplet(sample: &SceneSample, alpha: f64, seed: u64) -> Triplet {
    let selected = select_instances(&sample.instances, alpha, seed);
    triplet_for_selection(sample, &selected, format!("synthetic-{seed}"), seed)
}

pub(crate) fn triplet_for_selection(sample: &SceneSample, selected: &BTreeSet<u32>, id: String, seed: u64) -> Triplet {
    let all = sample.ids();
    let kept: BTreeSet<u32> = all.difference(selected).copied().collect();
    let image = render_scene(sample, &all).expect("ids come from the sample");
    let gt = render_scene(sample, &kept).expect("ids come from the sample");
    let (h, w) = (sample.height(), sample.width());
    let sel: Vec<&TextInstance> = sample.instances.iter().filter(|i| selected.contains(&i.id)).collect();
    let keep: Vec<&TextInstance> = sample.instances.iter().filter(|i| kept.contains(&i.id)).collect();
    Triplet {
        id,
        image: io::rgb_to_tensor(&image),
        mask: rasterize_mask(&sel, h, w),
        gt: io::rgb_to_tensor(&gt),
        preserved_mask: Some(rasterize_mask(&keep, h, w)),
        seed,
    }
}

/// `mask ⊙ gt_all_removed + (1 − mask) ⊙ image`: ground truth for removing
/// only the masked text from a real image whose fully-erased version is
/// known.
pub fn compose_partial_gt(image: &Tensor<f32>, gt_all_removed: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    composite_non_text(gt_all_removed, image, mask)
}

// --------------------------------------------------------------- generator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_font: f64,
    pub max_font: f64,
    pub max_rotation_deg: f64,
    pub min_chars: usize,
    pub max_chars: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            min_instances: 1,
            max_instances: 3,
            min_font: 8.0,
            max_font: 12.0,
            max_rotation_deg: 12.0,
            min_chars: 2,
            max_chars: 5,
        }
    }
}

const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Seeded scene generator. Not shareable across threads; independent
/// generators may run in parallel.
pub struct SceneGenerator {
    config: SynthConfig,
    rng: ChaCha8Rng,
    textures: Vec<RgbImage>,
}

impl SceneGenerator {
    pub fn new(config: SynthConfig, seed: u64) -> Self {
        SceneGenerator {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            textures: Vec::new(),
        }
    }

    /// Adds photographs/textures to crop backgrounds from. Images smaller
    /// than the scene size are ignored.
    pub fn with_textures(mut self, textures: Vec<RgbImage>) -> Self {
        let (h, w) = (self.config.height as u32, self.config.width as u32);
        self.textures = textures.into_iter().filter(|t| t.width() >= w && t.height() >= h).collect();
        self
    }

    fn random_color(&mut self) -> [f64; 3] {
        [
            self.rng.gen_range(0.0..255.0),
            self.rng.gen_range(0.0..255.0),
            self.rng.gen_range(0.0..255.0),
        ]
    }

    fn procedural_background(&mut self) -> RgbImage {
        let (h, w) = (self.config.height, self.config.width);
        let c0 = self.random_color();
        let c1 = self.random_color();
        let angle: f64 = self.rng.gen_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        // coarse value-noise lattice, bilinearly interpolated
        let cells = 4usize;
        let amp = self.rng.gen_range(5.0..30.0);
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1) * 3).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        let diag = ((w * w + h * h) as f64).sqrt();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((xf - w as f64 / 2.0) * dx + (yf - h as f64 / 2.0) * dy) / diag + 0.5).clamp(0.0, 1.0);
            let gx = xf / w as f64 * cells as f64;
            let gy = yf / h as f64 * cells as f64;
            let (ix, iy) = ((gx as usize).min(cells - 1), (gy as usize).min(cells - 1));
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let at = |i: usize, j: usize| lattice[((j * (cells + 1)) + i) * 3 + c];
                let n = at(ix, iy) * (1.0 - fx) * (1.0 - fy)
                    + at(ix + 1, iy) * fx * (1.0 - fy)
                    + at(ix, iy + 1) * (1.0 - fx) * fy
                    + at(ix + 1, iy + 1) * fx * fy;
                px[c] = (c0[c] * (1.0 - t) + c1[c] * t + amp * n).round().clamp(0.0, 255.0) as u8;
            }
            Rgb(px)
        })
    }

    fn background(&mut self) -> RgbImage {
        if !self.textures.is_empty() && self.rng.gen_bool(0.5) {
            let (h, w) = (self.config.height as u32, self.config.width as u32);
            let t = &self.textures[self.rng.gen_range(0..self.textures.len())];
            let x0 = self.rng.gen_range(0..=t.width() - w);
            let y0 = self.rng.gen_range(0..=t.height() - h);
            return image::imageops::crop_imm(t, x0, y0, w, h).to_image();
        }
        self.procedural_background()
    }

    /// Text colour far enough in luminance from the local background.
    fn text_color(&mut self, bg: &RgbImage, poly: &[[f64; 2]]) -> [u8; 3] {
        let (x0, y0, x1, y1) = bbox(poly);
        let (mut sum, mut n) = (0.0, 0.0);
        for y in (y0.max(0.0) as u32)..(y1.min(bg.height() as f64) as u32) {
            for x in (x0.max(0.0) as u32)..(x1.min(bg.width() as f64) as u32) {
                let p = bg.get_pixel(x, y).0;
                sum += 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                n += 1.0;
            }
        }
        let bg_lum = if n > 0.0 { sum / n } else { 128.0 };
        loop {
            let c = self.random_color();
            let lum = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
            if (lum - bg_lum).abs() >= 80.0 {
                return [c[0] as u8, c[1] as u8, c[2] as u8];
            }
        }
    }

    pub fn next_scene(&mut self) -> SceneSample {
        let cfg = self.config.clone();
        let background = self.background();
        let target = self.rng.gen_range(cfg.min_instances..=cfg.max_instances);
        let mut instances: Vec<TextInstance> = Vec::new();
        let mut boxes: Vec<(f64, f64, f64, f64)> = Vec::new();
        let mut attempts = 0;
        while instances.len() < target && attempts < 200 {
            attempts += 1;
            let n_chars = self.rng.gen_range(cfg.min_chars..=cfg.max_chars);
            let text: String = (0..n_chars)
                .map(|_| *ALPHABET.choose(&mut self.rng).expect("non-empty alphabet") as char)
                .collect();
            let font = self.rng.gen_range(cfg.min_font..=cfg.max_font).round();
            let rot = if cfg.max_rotation_deg > 0.0 {
                self.rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
            } else {
                0.0
            };
            let tw = n_chars as f64 * font;
            let th = font;
            let cx = self.rng.gen_range(0.0..cfg.width as f64);
            let cy = self.rng.gen_range(0.0..cfg.height as f64);
            let polygon = text_polygon([cx, cy], tw, th, rot);
            let bb = bbox(&polygon);
            if bb.0 < 0.0 || bb.1 < 0.0 || bb.2 > cfg.width as f64 || bb.3 > cfg.height as f64 {
                continue;
            }
            const GAP: f64 = 2.0;
            if boxes
                .iter()
                .any(|b| bb.0 < b.2 + GAP && b.0 < bb.2 + GAP && bb.1 < b.3 + GAP && b.1 < bb.3 + GAP)
            {
                continue;
            }
            let color = self.text_color(&background, &polygon);
            boxes.push(bb);
            instances.push(TextInstance {
                id: instances.len() as u32,
                polygon,
                text,
                render: Some(RenderParams {
                    font_size: font,
                    color,
                    rotation_deg: rot,
                    center: [cx, cy],
                }),
            });
        }
        SceneSample { background, instances }
    }
}

/// Corners of a `tw × th` text box rotated about `center`, padded by the
/// polygon margin, in clockwise screen order.
fn text_polygon(center: [f64; 2], tw: f64, th: f64, rotation_deg: f64) -> Vec<[f64; 2]> {
    let (sin, cos) = rotation_deg.to_radians().sin_cos();
    let hw = tw / 2.0 + POLYGON_MARGIN;
    let hh = th / 2.0 + POLYGON_MARGIN;
    [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
        .iter()
        .map(|&(lx, ly)| [center[0] + cos * lx - sin * ly, center[1] + sin * lx + cos * ly])
        .collect()
}

// ----------------------------------------------------------- directories

/// A sample from disk with its fully erased ground truth and annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub gt_all_removed: Tensor<f32>,
    pub instances: Vec<TextInstance>,
    /// From `masks/<id>.png` when present.
    pub prepared_mask: Option<Tensor<f32>>,
}

impl AnnotatedSample {
    /// Triplet erasing all annotated text (or the prepared mask).
    pub fn full_triplet(&self) -> Triplet {
        let (h, w) = (self.image.height(), self.image.width());
        let mask = match &self.prepared_mask {
            Some(m) => m.clone(),
            None => rasterize_mask(&self.instances.iter().collect::<Vec<_>>(), h, w),
        };
        let gt = compose_partial_gt(&self.image, &self.gt_all_removed, &mask).expect("validated shapes");
        Triplet {
            id: self.id.clone(),
            image: self.image.clone(),
            mask,
            gt,
            preserved_mask: None,
            seed: 0,
        }
    }

    /// Part-mask triplet built by compositing: erase only the selected
    /// instances and keep the rest of the input as target.
    pub fn part_triplet(&self, alpha: f64, seed: u64) -> Triplet {
        let (h, w) = (self.image.height(), self.image.width());
        let selected = select_instances(&self.instances, alpha, seed);
        let sel: Vec<&TextInstance> = self.instances.iter().filter(|i| selected.contains(&i.id)).collect();
        let keep: Vec<&TextInstance> = self.instances.iter().filter(|i| !selected.contains(&i.id)).collect();
        let mask = rasterize_mask(&sel, h, w);
        let gt = compose_partial_gt(&self.image, &self.gt_all_removed, &mask).expect("validated shapes");
        Triplet {
            id: self.id.clone(),
            image: self.image.clone(),
            mask,
            gt,
            preserved_mask: Some(rasterize_mask(&keep, h, w)),
            seed,
        }
    }
}

fn sample_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("images");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn load_one(root: &Path, id: &str) -> std::result::Result<AnnotatedSample, String> {
    let image = io::load_image_tensor(&root.join("images").join(format!("{id}.png"))).map_err(|e| e.to_string())?;
    let gt = io::load_image_tensor(&root.join("gts").join(format!("{id}.png"))).map_err(|e| e.to_string())?;
    if image.shape() != gt.shape() {
        return Err(format!("image {:?} and gt {:?} differ in shape", image.shape(), gt.shape()));
    }
    let ann_path = root.join("anns").join(format!("{id}.json"));
    let mask_path = root.join("masks").join(format!("{id}.png"));
    let prepared_mask = if mask_path.exists() {
        let m = io::load_mask(&mask_path).map_err(|e| e.to_string())?;
        if !m.same_spatial(&image) {
            return Err(format!("mask {:?} does not match image {:?}", m.shape(), image.shape()));
        }
        Some(m)
    } else {
        None
    };
    let instances: Vec<TextInstance> = if ann_path.exists() {
        let text = std::fs::read_to_string(&ann_path).map_err(|e| format!("{}: {e}", ann_path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", ann_path.display()))?
    } else if prepared_mask.is_some() {
        Vec::new()
    } else {
        return Err(format!("missing {}", ann_path.display()));
    };
    for inst in &instances {
        if inst.polygon.len() < 3 {
            return Err(format!("instance {} has fewer than 3 vertices", inst.id));
        }
    }
    Ok(AnnotatedSample {
        id: id.to_string(),
        image,
        gt_all_removed: gt,
        instances,
        prepared_mask,
    })
}

/// All samples of a dataset directory, ordered by id.
pub fn load_annotated_dir(root: &Path) -> Result<Vec<AnnotatedSample>> {
    sample_ids(root)?
        .into_iter()
        .map(|id| load_one(root, &id).map_err(|reason| Error::SampleLoad { id, reason }))
        .collect()
}

/// Full-erasure triplets of a dataset directory, ordered by id.
pub fn load_dataset_dir(root: &Path) -> Result<Vec<Triplet>> {
    Ok(load_annotated_dir(root)?.iter().map(AnnotatedSample::full_triplet).collect())
}

/// Writes scenes in the dataset layout (`gts` hold the clean background).
pub fn write_dataset_dir(root: &Path, scenes: &[(String, SceneSample)]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (id, scene) in scenes {
        let image = render_scene(scene, &scene.ids())?;
        let img_path = root.join("images").join(format!("{id}.png"));
        io::save_rgb(&image, &img_path)?;
        io::save_rgb(&scene.background, &root.join("gts").join(format!("{id}.png")))?;
        let ann_dir = root.join("anns");
        std::fs::create_dir_all(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
        let ann_path = ann_dir.join(format!("{id}.json"));
        let json = serde_json::to_string_pretty(&scene.instances).expect("instances serialize");
        std::fs::write(&ann_path, json).map_err(|e| Error::io(&ann_path, e))?;
        written.push(img_path);
    }
    Ok(written)
}

/// Writes triplets with explicit masks: `gts` hold each triplet's target.
pub fn write_triplets_dir(root: &Path, triplets: &[Triplet]) -> Result<()> {
    for t in triplets {
        io::save_tensor_png(&t.image, &root.join("images").join(format!("{}.png", t.id)))?;
        io::save_tensor_png(&t.gt, &root.join("gts").join(format!("{}.png", t.id)))?;
        io::save_gray(&io::mask_to_gray(&t.mask), &root.join("masks").join(format!("{}.png", t.id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(id: u32, x0: f64, y0: f64, x1: f64, y1: f64) -> TextInstance {
        TextInstance {
            id,
            polygon: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
            text: String::new(),
            render: None,
        }
    }

    fn popcount(m: &Tensor<f32>) -> usize {
        m.data().iter().filter(|&&v| v == 1.0).count()
    }

    #[test]
    fn square_polygon_fills_sixteen_pixels() {
        let sq = rect(0, 2.0, 3.0, 6.0, 7.0);
        let m = rasterize_mask(&[&sq], 10, 10);
        assert_eq!(popcount(&m), 16);
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(popcount(&rasterize_mask(&[], 10, 10)), 0);
    }

    #[test]
    fn disjoint_rectangles_add_up() {
        // scanline count: 2x3 and 2x4 pixel-centre grids
        let a = rect(0, 0.0, 0.0, 2.0, 3.0);
        let b = rect(1, 5.0, 5.0, 7.0, 9.0);
        assert_eq!(popcount(&rasterize_mask(&[&a, &b], 12, 12)), 14);
    }

    #[test]
    fn boundary_pixel_centres_count_as_inside() {
        // edge exactly through pixel centres x = 2.5
        let r = rect(0, 0.5, 0.5, 2.5, 1.5);
        assert_eq!(popcount(&rasterize_mask(&[&r], 4, 4)), 6);
    }

    #[test]
    fn polygon_fill_is_orientation_independent() {
        let mut tri = TextInstance {
            id: 0,
            polygon: vec![[1.0, 1.0], [9.0, 2.0], [4.0, 8.0]],
            text: String::new(),
            render: None,
        };
        let a = rasterize_mask(&[&tri], 10, 10);
        tri.polygon.reverse();
        assert_eq!(a, rasterize_mask(&[&tri], 10, 10));
    }

    #[test]
    fn simple_polygon_check() {
        assert!(polygon_is_simple(&[[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]]));
        assert!(!polygon_is_simple(&[[0.0, 0.0], [2.0, 2.0], [2.0, 0.0], [0.0, 2.0]]));
    }

    #[test]
    fn selection_degenerate_probabilities() {
        let insts: Vec<TextInstance> = (0..20).map(|i| rect(i, 0.0, 0.0, 1.0, 1.0)).collect();
        assert_eq!(select_instances(&insts, 0.0, 1).len(), 20);
        assert!(select_instances(&insts, 1.0, 1).is_empty());
        assert_eq!(select_instances(&insts, 0.4, 7), select_instances(&insts, 0.4, 7));
    }

    #[test]
    fn generated_scenes_are_valid() {
        let mut gen = SceneGenerator::new(SynthConfig::default(), 11);
        for _ in 0..20 {
            let s = gen.next_scene();
            assert!(!s.instances.is_empty());
            for inst in &s.instances {
                assert!(polygon_is_simple(&inst.polygon));
                for p in &inst.polygon {
                    assert!(p[0] >= 0.0 && p[0] <= 64.0 && p[1] >= 0.0 && p[1] <= 64.0);
                }
            }
            for (i, a) in s.instances.iter().enumerate() {
                for b in &s.instances[i + 1..] {
                    let ma = rasterize_mask(&[a], 64, 64);
                    let mb = rasterize_mask(&[b], 64, 64);
                    assert!(ma.data().iter().zip(mb.data()).all(|(x, y)| !(*x == 1.0 && *y == 1.0)));
                }
            }
        }
    }

    #[test]
    fn render_single_instance_stays_inside_its_box() {
        let mut gen = SceneGenerator::new(SynthConfig { min_instances: 3, max_instances: 3, ..SynthConfig::default() }, 5);
        let s = gen.next_scene();
        assert_eq!(s.instances.len(), 3);
        let empty = render_scene(&s, &BTreeSet::new()).unwrap();
        assert_eq!(empty, s.background);
        let target = &s.instances[2];
        let img = render_scene(&s, &[target.id].into()).unwrap();
        let (x0, y0, x1, y1) = bbox(&target.polygon);
        let mut changed = 0;
        for (x, y, p) in img.enumerate_pixels() {
            if p != s.background.get_pixel(x, y) {
                changed += 1;
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                assert!(cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1);
            }
        }
        assert!(changed > 0);
        assert!(render_scene(&s, &[99].into()).is_err());
    }

    #[test]
    fn triplet_extremes() {
        let mut gen = SceneGenerator::new(SynthConfig::default(), 3);
        let s = gen.next_scene();
        let keep_all = make_triplet(&s, 1.0, 0);
        assert_eq!(popcount(&keep_all.mask), 0);
        assert_eq!(keep_all.gt, keep_all.image);
        let erase_all = make_triplet(&s, 0.0, 0);
        assert_eq!(erase_all.gt, io::rgb_to_tensor(&s.background));
        let polys: Vec<&TextInstance> = s.instances.iter().collect();
        assert_eq!(erase_all.mask, rasterize_mask(&polys, 64, 64));
        assert_eq!(make_triplet(&s, 0.4, 9), make_triplet(&s, 0.4, 9));
    }

    #[test]
    fn partial_gt_composition() {
        let img = Tensor::from_fn(3, 4, 4, |c, y, x| (c + y + x) as f32 / 10.0);
        let gt = Tensor::filled(3, 4, 4, 0.25f32);
        assert_eq!(compose_partial_gt(&img, &gt, &Tensor::zeros(1, 4, 4)).unwrap(), img);
        assert_eq!(compose_partial_gt(&img, &gt, &Tensor::filled(1, 4, 4, 1.0)).unwrap(), gt);
        assert!(compose_partial_gt(&img, &gt, &Tensor::zeros(1, 3, 4)).is_err());
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mut m = Tensor::<f32>::zeros(1, 7, 7);
        m.set(0, 3, 3, 1.0);
        assert_eq!(popcount(&dilate_mask(&m, 1)), 9);
        assert_eq!(popcount(&dilate_mask(&m, 0)), 1);
    }
}
