//! Procedural scenes with ground-truthed face-like targets.
//!
//! A target is a textured ellipse inscribed in its box: warm base tone,
//! two dark eye dots and a mouth bar, shaded towards the rim. Clutter
//! shares the low-level statistics (including warm plain ellipses) but
//! never the structure, so classification has to learn more than colour.
//! Everything is deterministic in the seed; per-scene streams derive as
//! seed + index so parallel generation gives identical batches.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::boxgeom::{iou, BBox};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Side-length bands (pixels) selected by the scale mix weights.
pub const SCALE_BANDS: [(f64, f64); 3] = [(12.0, 20.0), (20.0, 32.0), (32.0, 44.0)];

#[derive(Clone, Debug)]
pub struct SceneMeta {
    pub seed: u64,
    pub scale_mix: [f64; 3],
}

/// One generated image with its ground-truth boxes.
///
/// Invariants: every gt lies inside the image and has sides >= 2 px.
#[derive(Clone, Debug)]
pub struct Scene {
    /// `[3, H, W]` values in [0, 1].
    pub image: Tensor<f32>,
    pub gts: Vec<BBox>,
    pub meta: SceneMeta,
}

impl Scene {
    pub fn size(&self) -> (usize, usize) {
        let sh = self.image.shape();
        (sh[1], sh[2])
    }
}

/// Plain CHW pixel buffer used while drawing and augmenting.
#[derive(Clone)]
struct ImageBuf {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl ImageBuf {
    fn new(h: usize, w: usize) -> Self {
        ImageBuf { h, w, data: vec![0.0; 3 * h * w] }
    }

    #[inline]
    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    fn channel_means(&self) -> [f32; 3] {
        let plane = self.h * self.w;
        let mut means = [0.0f32; 3];
        for (c, m) in means.iter_mut().enumerate() {
            let s: f32 = self.data[c * plane..(c + 1) * plane].iter().sum();
            *m = s / plane as f32;
        }
        means
    }

    fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[3, self.h, self.w], self.data.clone())
    }

    fn from_tensor(t: &Tensor<f32>) -> Self {
        let sh = t.shape();
        assert_eq!(sh.len(), 3);
        ImageBuf { h: sh[1], w: sh[2], data: t.to_vec() }
    }
}

/// Generation knobs beyond the generate() arguments.
#[derive(Clone, Debug)]
pub struct SceneParams {
    pub min_objects: usize,
    pub max_objects: usize,
    pub clutter: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams { min_objects: 1, max_objects: 4, clutter: 8 }
    }
}

/// Deterministically generate `count` scenes of `size x size` pixels.
///
/// `scale_mix` weights the three side-length bands of [`SCALE_BANDS`];
/// `aspect_mix` lists admissible height/width ratios, sampled uniformly.
pub fn generate(
    seed: u64,
    count: usize,
    size: usize,
    scale_mix: &[f64; 3],
    aspect_mix: &[f64],
    params: &SceneParams,
) -> Vec<Scene> {
    (0..count)
        .map(|i| generate_scene(seed.wrapping_add(i as u64), size, scale_mix, aspect_mix, params))
        .collect()
}

fn pick_band(rng: &mut Rng, weights: &[f64; 3]) -> (f64, f64) {
    let total: f64 = weights.iter().sum();
    assert!(total > 0.0, "scale_mix weights must not all be zero");
    let mut u = rng.uniform() * total;
    for (band, &w) in SCALE_BANDS.iter().zip(weights) {
        if u < w {
            return *band;
        }
        u -= w;
    }
    SCALE_BANDS[2]
}

/// Same scenes as [`generate`], produced by `threads` workers. Per-scene
/// seeds make the output independent of the thread count.
pub fn generate_parallel(
    seed: u64,
    count: usize,
    size: usize,
    scale_mix: &[f64; 3],
    aspect_mix: &[f64],
    params: &SceneParams,
    threads: usize,
) -> Vec<Scene> {
    if threads <= 1 || count < 2 {
        return generate(seed, count, size, scale_mix, aspect_mix, params);
    }
    let chunk = count.div_ceil(threads);
    let mut raw: Vec<(u64, Vec<f32>, Vec<BBox>)> = Vec::with_capacity(count);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for t in 0..threads {
            let lo = t * chunk;
            let hi = ((t + 1) * chunk).min(count);
            if lo >= hi {
                break;
            }
            handles.push(scope.spawn(move || {
                (lo..hi)
                    .map(|i| {
                        let scene_seed = seed.wrapping_add(i as u64);
                        let (data, gts) =
                            generate_scene_raw(scene_seed, size, scale_mix, aspect_mix, params);
                        (scene_seed, data, gts)
                    })
                    .collect::<Vec<_>>()
            }));
        }
        for handle in handles {
            raw.extend(handle.join().expect("scene worker panicked"));
        }
    });
    raw.into_iter()
        .map(|(scene_seed, data, gts)| Scene {
            image: Tensor::from_vec(&[3, size, size], data),
            gts,
            meta: SceneMeta { seed: scene_seed, scale_mix: *scale_mix },
        })
        .collect()
}

fn generate_scene(
    scene_seed: u64,
    size: usize,
    scale_mix: &[f64; 3],
    aspect_mix: &[f64],
    params: &SceneParams,
) -> Scene {
    let (data, gts) = generate_scene_raw(scene_seed, size, scale_mix, aspect_mix, params);
    Scene {
        image: Tensor::from_vec(&[3, size, size], data),
        gts,
        meta: SceneMeta { seed: scene_seed, scale_mix: *scale_mix },
    }
}

fn generate_scene_raw(
    scene_seed: u64,
    size: usize,
    scale_mix: &[f64; 3],
    aspect_mix: &[f64],
    params: &SceneParams,
) -> (Vec<f32>, Vec<BBox>) {
    assert!(!aspect_mix.is_empty(), "aspect_mix must not be empty");
    let mut rng = Rng::new(scene_seed).fork(0x5ce7e);
    let mut img = ImageBuf::new(size, size);
    draw_background(&mut img, &mut rng);

    for _ in 0..params.clutter {
        draw_clutter(&mut img, &mut rng);
    }

    let n_objects = params.min_objects + rng.below(params.max_objects - params.min_objects + 1);
    let mut gts: Vec<BBox> = Vec::new();
    for _ in 0..n_objects {
        // Rejection placement: keep mutual IoU low and the box inside the
        // frame. Failed placements are skipped rather than retried forever.
        let mut placed = false;
        for _try in 0..40 {
            let (lo, hi) = pick_band(&mut rng, scale_mix);
            let scale = rng.range(lo, hi.min(size as f64 / 2.2));
            let aspect = *rng.choice(aspect_mix);
            let w = scale / aspect.sqrt();
            let h = scale * aspect.sqrt();
            if w < 2.0 || h < 2.0 || w >= size as f64 - 2.0 || h >= size as f64 - 2.0 {
                continue;
            }
            let cx = rng.range(w / 2.0 + 1.0, size as f64 - w / 2.0 - 1.0);
            let cy = rng.range(h / 2.0 + 1.0, size as f64 - h / 2.0 - 1.0);
            let candidate = BBox::from_cwh(cx, cy, w, h);
            if gts.iter().all(|g| iou(g, &candidate) < 0.15) {
                draw_face(&mut img, &candidate, &mut rng);
                gts.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            break;
        }
    }

    (img.data, gts)
}

fn draw_background(img: &mut ImageBuf, rng: &mut Rng) {
    let base = [
        rng.range(0.3, 0.55) as f32,
        rng.range(0.3, 0.55) as f32,
        rng.range(0.3, 0.55) as f32,
    ];
    let tau = std::f64::consts::TAU;
    let fx = rng.range(0.5, 2.5);
    let fy = rng.range(0.5, 2.5);
    let (px, py) = (rng.range(0.0, tau), rng.range(0.0, tau));
    let (h, w) = (img.h, img.w);
    for y in 0..h {
        let gy = (fy * y as f64 / h as f64 * tau + py).sin() * 0.06;
        for x in 0..w {
            let gx = (fx * x as f64 / w as f64 * tau + px).sin() * 0.06;
            let noise = (rng.uniform() as f32 - 0.5) * 0.06;
            for c in 0..3 {
                let v = base[c] + gx as f32 + gy as f32 + noise;
                img.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
}

/// Narrow-band skin tone of real targets. Clutter samples a broader
/// warm band that overlaps this one, so colour alone is a weak cue:
/// enough to spot a tiny face, not enough to trust a large one.
fn face_tone(rng: &mut Rng) -> [f32; 3] {
    let r = rng.range(0.78, 0.95) as f32;
    let g = r * rng.range(0.70, 0.80) as f32;
    let b = g * rng.range(0.70, 0.80) as f32;
    [r, g, b]
}

fn clutter_tone(rng: &mut Rng) -> [f32; 3] {
    let r = rng.range(0.60, 0.95) as f32;
    let g = r * rng.range(0.55, 0.95) as f32;
    let b = g * rng.range(0.55, 1.05).min(1.0) as f32;
    [r, g, b]
}

fn draw_face(img: &mut ImageBuf, bbox: &BBox, rng: &mut Rng) {
    let tone = face_tone(rng);
    let (cx, cy) = (bbox.cx(), bbox.cy());
    let (hw, hh) = (bbox.width() / 2.0, bbox.height() / 2.0);
    let x_lo = bbox.x1.floor().max(0.0) as usize;
    let x_hi = (bbox.x2.ceil() as usize).min(img.w);
    let y_lo = bbox.y1.floor().max(0.0) as usize;
    let y_hi = (bbox.y2.ceil() as usize).min(img.h);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let u = (x as f64 + 0.5 - cx) / hw;
            let v = (y as f64 + 0.5 - cy) / hh;
            let r2 = u * u + v * v;
            if r2 > 1.0 {
                continue;
            }
            // Eyes and mouth darken a rim-shaded warm base.
            let eye = ((u.abs() - 0.42).powi(2) + (v + 0.30).powi(2)) < 0.15f64.powi(2);
            let mouth = v > 0.30 && v < 0.55 && u.abs() < 0.45;
            let mut k = 1.0 - 0.3 * r2 as f32;
            if eye {
                k *= 0.22;
            } else if mouth {
                k *= 0.45;
            }
            let jitter = (rng.uniform() as f32 - 0.5) * 0.04;
            for c in 0..3 {
                img.set(c, y, x, (tone[c] * k + jitter).clamp(0.0, 1.0));
            }
        }
    }
}

fn draw_clutter(img: &mut ImageBuf, rng: &mut Rng) {
    match rng.below(3) {
        // Plain warm ellipse: same palette as a face, no structure.
        0 => {
            let s = rng.range(6.0, 40.0);
            let a = rng.range(0.5, 2.0);
            let w = s / a.sqrt();
            let h = s * a.sqrt();
            let cx = rng.range(0.0, img.w as f64);
            let cy = rng.range(0.0, img.h as f64);
            let tone = clutter_tone(rng);
            stamp_ellipse(img, cx, cy, w / 2.0, h / 2.0, tone, rng);
        }
        // Flat rectangle of any tone.
        1 => {
            let w = rng.range(4.0, 30.0);
            let h = rng.range(4.0, 30.0);
            let x0 = rng.range(-w, img.w as f64);
            let y0 = rng.range(-h, img.h as f64);
            let tone = [
                rng.range(0.1, 0.9) as f32,
                rng.range(0.1, 0.9) as f32,
                rng.range(0.1, 0.9) as f32,
            ];
            let y_lo = y0.max(0.0) as usize;
            let y_hi = ((y0 + h).min(img.h as f64)).max(0.0) as usize;
            let x_lo = x0.max(0.0) as usize;
            let x_hi = ((x0 + w).min(img.w as f64)).max(0.0) as usize;
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    for c in 0..3 {
                        img.set(c, y, x, tone[c]);
                    }
                }
            }
        }
        // Thin streak.
        _ => {
            let (x0, y0) = (rng.range(0.0, img.w as f64), rng.range(0.0, img.h as f64));
            let ang = rng.range(0.0, std::f64::consts::PI);
            let len = rng.range(10.0, 50.0);
            let tone = [
                rng.range(0.0, 1.0) as f32,
                rng.range(0.0, 1.0) as f32,
                rng.range(0.0, 1.0) as f32,
            ];
            let steps = len as usize * 2;
            for t in 0..steps {
                let d = t as f64 / 2.0;
                let x = x0 + ang.cos() * d;
                let y = y0 + ang.sin() * d;
                if x >= 0.0 && y >= 0.0 && (x as usize) < img.w && (y as usize) < img.h {
                    for c in 0..3 {
                        img.set(c, y as usize, x as usize, tone[c]);
                    }
                }
            }
        }
    }
}

fn stamp_ellipse(
    img: &mut ImageBuf,
    cx: f64,
    cy: f64,
    hw: f64,
    hh: f64,
    tone: [f32; 3],
    rng: &mut Rng,
) {
    let x_lo = (cx - hw).floor().max(0.0) as usize;
    let x_hi = ((cx + hw).ceil().max(0.0) as usize).min(img.w);
    let y_lo = (cy - hh).floor().max(0.0) as usize;
    let y_hi = ((cy + hh).ceil().max(0.0) as usize).min(img.h);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let u = (x as f64 + 0.5 - cx) / hw;
            let v = (y as f64 + 0.5 - cy) / hh;
            let r2 = u * u + v * v;
            if r2 > 1.0 {
                continue;
            }
            let k = 1.0 - 0.3 * r2 as f32;
            let jitter = (rng.uniform() as f32 - 0.5) * 0.04;
            for c in 0..3 {
                img.set(c, y, x, (tone[c] * k + jitter).clamp(0.0, 1.0));
            }
        }
    }
}

// ---- augmentation ------------------------------------------------------

/// All random draws of one augmentation, separated out so the geometric
/// path can be driven exactly in tests.
#[derive(Clone, Debug)]
pub struct AugmentSample {
    pub brightness: f64,
    pub contrast: f64,
    /// Canvas expansion factor in [1, 2].
    pub expand: f64,
    /// Placement of the original image inside the expanded canvas, in [0, 1].
    pub place: (f64, f64),
    /// Crop side as a fraction of the canvas shorter side: 1.0 for the
    /// first patch, in [0.5, 1.0] for the second.
    pub crop_frac: f64,
    /// Crop position inside the canvas, in [0, 1].
    pub crop_pos: (f64, f64),
    pub flip: bool,
}

impl AugmentSample {
    /// The identity transform (modulo the final resize, which is identity
    /// when sizes already match).
    pub fn identity() -> Self {
        AugmentSample {
            brightness: 0.0,
            contrast: 1.0,
            expand: 1.0,
            place: (0.0, 0.0),
            crop_frac: 1.0,
            crop_pos: (0.0, 0.0),
            flip: false,
        }
    }

    pub fn draw(rng: &mut Rng) -> Self {
        AugmentSample {
            brightness: rng.range(-0.2, 0.2),
            contrast: rng.range(0.8, 1.2),
            expand: rng.range(1.0, 2.0),
            place: (rng.uniform(), rng.uniform()),
            // Two square patches; pick one at random.
            crop_frac: if rng.flip() { 1.0 } else { rng.range(0.5, 1.0) },
            crop_pos: (rng.uniform(), rng.uniform()),
            flip: rng.flip(),
        }
    }
}

/// Photometric jitter, mean-padded expansion, square patch crop, random
/// flip, resize back to the training size. Ground truths follow the same
/// geometry; boxes whose centre leaves the crop are dropped, survivors
/// are clamped to the frame, and slivers under 2 px are discarded.
pub fn augment(scene: &Scene, seed: u64) -> Scene {
    let mut rng = Rng::new(seed).fork(0xa06);
    augment_with(scene, &AugmentSample::draw(&mut rng))
}

pub fn augment_with(scene: &Scene, sample: &AugmentSample) -> Scene {
    let src = ImageBuf::from_tensor(&scene.image);
    let (h, w) = (src.h, src.w);
    let out_size = h.max(w);

    // 1. photometric
    let mut photo = src.clone();
    for v in photo.data.iter_mut() {
        *v = (((*v - 0.5) * sample.contrast as f32) + 0.5 + sample.brightness as f32)
            .clamp(0.0, 1.0);
    }

    // 2. mean-padded expansion
    let ch = (h as f64 * sample.expand).round() as usize;
    let cw = (w as f64 * sample.expand).round() as usize;
    let means = photo.channel_means();
    let mut canvas = ImageBuf::new(ch, cw);
    for c in 0..3 {
        for y in 0..ch {
            for x in 0..cw {
                canvas.set(c, y, x, means[c]);
            }
        }
    }
    let ox = ((cw - w) as f64 * sample.place.0).round() as usize;
    let oy = ((ch - h) as f64 * sample.place.1).round() as usize;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                canvas.set(c, y + oy, x + ox, photo.at(c, y, x));
            }
        }
    }
    let mut boxes: Vec<BBox> = scene
        .gts
        .iter()
        .map(|b| BBox::new(b.x1 + ox as f64, b.y1 + oy as f64, b.x2 + ox as f64, b.y2 + oy as f64))
        .collect();

    // 3. square patch crop
    let shorter = ch.min(cw);
    let side = ((shorter as f64 * sample.crop_frac).round() as usize).clamp(2, shorter);
    let cx0 = ((cw - side) as f64 * sample.crop_pos.0).round() as usize;
    let cy0 = ((ch - side) as f64 * sample.crop_pos.1).round() as usize;
    let mut crop = ImageBuf::new(side, side);
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                crop.set(c, y, x, canvas.at(c, y + cy0, x + cx0));
            }
        }
    }
    boxes = boxes
        .iter()
        .filter(|b| {
            let (bx, by) = (b.cx() - cx0 as f64, b.cy() - cy0 as f64);
            bx >= 0.0 && bx < side as f64 && by >= 0.0 && by < side as f64
        })
        .map(|b| {
            BBox::new(b.x1 - cx0 as f64, b.y1 - cy0 as f64, b.x2 - cx0 as f64, b.y2 - cy0 as f64)
                .clamp_to(side as f64, side as f64)
        })
        .collect();

    // 4. horizontal flip
    if sample.flip {
        let mut flipped = ImageBuf::new(side, side);
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    flipped.set(c, y, x, crop.at(c, y, side - 1 - x));
                }
            }
        }
        crop = flipped;
        boxes = boxes
            .iter()
            .map(|b| BBox::new(side as f64 - b.x2, b.y1, side as f64 - b.x1, b.y2))
            .collect();
    }

    // 5. resize to the training size
    let scale = out_size as f64 / side as f64;
    let resized = resize_bilinear(&crop, out_size, out_size);
    let gts: Vec<BBox> = boxes
        .iter()
        .map(|b| {
            BBox::new(b.x1 * scale, b.y1 * scale, b.x2 * scale, b.y2 * scale)
                .clamp_to(out_size as f64, out_size as f64)
        })
        .filter(|b| b.width() >= 2.0 && b.height() >= 2.0)
        .collect();

    Scene { image: resized.to_tensor(), gts, meta: scene.meta.clone() }
}

fn resize_bilinear(src: &ImageBuf, oh: usize, ow: usize) -> ImageBuf {
    if src.h == oh && src.w == ow {
        return src.clone();
    }
    let mut out = ImageBuf::new(oh, ow);
    let sy = src.h as f64 / oh as f64;
    let sx = src.w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src.h - 1);
        let wy = (fy - y0 as f64) as f32;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src.w - 1);
            let wx = (fx - x0 as f64) as f32;
            for c in 0..3 {
                let top = src.at(c, y0, x0) * (1.0 - wx) + src.at(c, y0, x1) * wx;
                let bot = src.at(c, y1, x0) * (1.0 - wx) + src.at(c, y1, x1) * wx;
                out.set(c, y, x, top * (1.0 - wy) + bot * wy);
            }
        }
    }
    out
}

// ---- export ------------------------------------------------------------

/// Write each scene as a binary PPM (P6) plus one shared ground-truth
/// listing: `image_id x1 y1 x2 y2`, the detection-dump layout minus the
/// score column.
pub fn export_scenes(dir: &Path, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut gt_text = String::new();
    for (id, scene) in scenes.iter().enumerate() {
        let path = dir.join(format!("scene_{id:04}.ppm"));
        write_ppm(&path, scene)?;
        for b in &scene.gts {
            let _ = writeln!(gt_text, "{id} {:.6} {:.6} {:.6} {:.6}", b.x1, b.y1, b.x2, b.y2);
        }
    }
    let gt_path = dir.join("ground_truth.txt");
    std::fs::write(&gt_path, gt_text).map_err(|e| Error::io(gt_path.display().to_string(), e))
}

fn write_ppm(path: &Path, scene: &Scene) -> Result<()> {
    let (h, w) = scene.size();
    let data = scene.image.data();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((data[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}
