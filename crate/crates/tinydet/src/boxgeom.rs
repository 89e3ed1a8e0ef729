//! Axis-aligned boxes, IoU, anchor tiling, delta encoding and NMS.
//!
//! Everything here is a pure function over plain values, safe to call
//! from any thread.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Corner-form rectangle in image pixels. `x2 >= x1`, `y2 >= y1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x2 >= x1 && y2 >= y1, "degenerate box ({x1},{y1},{x2},{y2})");
        BBox { x1, y1, x2, y2 }
    }

    /// Centre/size form: (cx, cy, w, h).
    pub fn from_cwh(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn cx(&self) -> f64 {
        (self.x1 + self.x2) / 2.0
    }

    pub fn cy(&self) -> f64 {
        (self.y1 + self.y2) / 2.0
    }

    /// Geometric mean of the sides, the scale used by the margin loss.
    pub fn scale(&self) -> f64 {
        (self.width() * self.height()).sqrt()
    }

    pub fn clamp_to(&self, w: f64, h: f64) -> BBox {
        BBox {
            x1: self.x1.max(0.0).min(w),
            y1: self.y1.max(0.0).min(h),
            x2: self.x2.max(0.0).min(w),
            y2: self.y2.max(0.0).min(h),
        }
    }
}

/// Intersection over union; 0 when the union is empty. Zero-area boxes
/// are legal inputs and simply score 0 against everything.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Anchors of one pyramid level, row-major by grid cell then by
/// per-location anchor index.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub level: usize,
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Anchors per location (A).
    pub per_location: usize,
    pub boxes: Vec<BBox>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Map an anchor index to its (grid row, grid col, per-location slot).
    pub fn cell_of(&self, index: usize) -> (usize, usize, usize) {
        let cell = index / self.per_location;
        (cell / self.grid_w, cell % self.grid_w, index % self.per_location)
    }
}

/// Side scales used at a level of stride `s`: 2s and 2*sqrt(2)*s.
pub fn level_scales(stride: usize) -> [f64; 2] {
    let s = stride as f64;
    [2.0 * s, 2.0 * std::f64::consts::SQRT_2 * s]
}

/// Tile two anchors per grid cell, centred at ((j+0.5)s, (i+0.5)s).
///
/// `aspect` is the height/width ratio: an anchor of scale `s` keeps area
/// `s*s` with `w = s/sqrt(aspect)`, `h = s*sqrt(aspect)`.
pub fn tile_anchors(grid_h: usize, grid_w: usize, level: usize, stride: usize, aspect: f64) -> AnchorSet {
    assert!(stride > 0, "anchor stride must be positive");
    assert!(aspect > 0.0, "anchor aspect must be positive");
    let scales = level_scales(stride);
    let ra = aspect.sqrt();
    let mut boxes = Vec::with_capacity(grid_h * grid_w * scales.len());
    for i in 0..grid_h {
        for j in 0..grid_w {
            let cx = (j as f64 + 0.5) * stride as f64;
            let cy = (i as f64 + 0.5) * stride as f64;
            for &scale in &scales {
                boxes.push(BBox::from_cwh(cx, cy, scale / ra, scale * ra));
            }
        }
    }
    AnchorSet { level, stride, grid_h, grid_w, per_location: scales.len(), boxes }
}

/// (dx, dy, dw, dh) regression target of `gt` relative to `anchor`:
/// centre offsets normalised by the anchor size, log size ratios.
pub fn encode(gt: &BBox, anchor: &BBox) -> [f64; 4] {
    let (aw, ah) = (anchor.width(), anchor.height());
    assert!(aw > 0.0 && ah > 0.0, "encode against zero-size anchor");
    let (gw, gh) = (gt.width(), gt.height());
    assert!(
        gw > 0.0 && gh > 0.0,
        "encode of degenerate ground truth ({gw}x{gh}): log of non-positive size"
    );
    [
        (gt.cx() - anchor.cx()) / aw,
        (gt.cy() - anchor.cy()) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ]
}

/// Size deltas are clamped to this magnitude before exponentiation, so a
/// wild regression output cannot produce astronomically sized boxes.
/// Round-trips stay exact for size ratios under e^8 (about 3000x).
pub const DELTA_CLAMP: f64 = 8.0;

pub fn decode(delta: &[f64; 4], anchor: &BBox) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    assert!(aw > 0.0 && ah > 0.0, "decode against zero-size anchor");
    let cx = anchor.cx() + delta[0] * aw;
    let cy = anchor.cy() + delta[1] * ah;
    let w = aw * delta[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = ah * delta[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    BBox::from_cwh(cx, cy, w, h)
}

/// A scored box, with the pyramid level it came from. `score` is a
/// post-sigmoid probability.
#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub level: usize,
}

/// Greedy non-maximum suppression at the given overlap threshold.
/// Output is sorted by descending score; ties keep the lower input index
/// first, so the result is deterministic.
pub fn nms(dets: &[Detection], overlap: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b))
    });
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > overlap {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// One detection per line: `image_id x1 y1 x2 y2 score`, six decimals.
pub fn format_detections(image_id: usize, dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let _ = writeln!(
            out,
            "{image_id} {:.6} {:.6} {:.6} {:.6} {:.6}",
            d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score
        );
    }
    out
}

/// Write a detection dump covering all images (index = image id).
pub fn write_detection_dump(path: &Path, per_image: &[Vec<Detection>]) -> Result<()> {
    let mut out = String::new();
    for (id, dets) in per_image.iter().enumerate() {
        out.push_str(&format_detections(id, dets));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse a detection dump back into per-image lists. Unknown image ids
/// grow the output; levels are not stored in the dump and read back as 0.
pub fn read_detection_dump(path: &Path) -> Result<Vec<Vec<Detection>>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut per_image: Vec<Vec<Detection>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::Invalid(format!(
                "{} line {}: expected 6 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::Invalid(format!("{} line {}: bad number {s}", path.display(), lineno + 1))
            })
        };
        let id = fields[0].parse::<usize>().map_err(|_| {
            Error::Invalid(format!("{} line {}: bad image id", path.display(), lineno + 1))
        })?;
        while per_image.len() <= id {
            per_image.push(Vec::new());
        }
        per_image[id].push(Detection {
            bbox: BBox::new(parse(fields[1])?, parse(fields[2])?, parse(fields[3])?, parse(fields[4])?),
            score: parse(fields[5])?,
            level: 0,
        });
    }
    Ok(per_image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn iou_identical_is_one() {
        let b = BBox::new(1.0, 2.0, 5.0, 7.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_matches_direct_area_arithmetic() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        // intersection 1, union 4 + 4 - 1 = 7.
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_zero_area_boxes_are_legal() {
        let point = BBox::new(1.0, 1.0, 1.0, 1.0);
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&point, &b), 0.0);
        assert_eq!(iou(&point, &point), 0.0);
    }

    #[test]
    fn iou_properties_random() {
        let mut rng = Rng::new(9);
        for _ in 0..200 {
            let rand_box = |rng: &mut Rng| {
                let x1 = rng.range(0.0, 10.0);
                let y1 = rng.range(0.0, 10.0);
                BBox::new(x1, y1, x1 + rng.range(0.1, 8.0), y1 + rng.range(0.1, 8.0))
            };
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let v = iou(&a, &b);
            assert!((0.0..=1.0).contains(&v));
            assert!((v - iou(&b, &a)).abs() < 1e-12, "symmetry");
            assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            // translation invariance
            let (dx, dy) = (rng.range(-5.0, 5.0), rng.range(-5.0, 5.0));
            let shift = |c: &BBox| BBox::new(c.x1 + dx, c.y1 + dy, c.x2 + dx, c.y2 + dy);
            assert!((iou(&shift(&a), &shift(&b)) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn anchor_scales_match_stride_rule() {
        let [s0, s1] = level_scales(8);
        assert!((s0 - 16.0).abs() < 1e-12);
        assert!((s1 - 22.627416997969522).abs() < 1e-9);
    }

    #[test]
    fn single_cell_anchor_is_centred_at_half_stride() {
        let set = tile_anchors(1, 1, 0, 4, 1.25);
        assert_eq!(set.len(), 2);
        for b in &set.boxes {
            assert!((b.cx() - 2.0).abs() < 1e-12);
            assert!((b.cy() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_count_is_grid_times_per_location() {
        for (gh, gw, stride) in [(8, 8, 4), (5, 3, 8), (1, 7, 16)] {
            let set = tile_anchors(gh, gw, 0, stride, 1.25);
            assert_eq!(set.len(), gh * gw * set.per_location);
        }
    }

    #[test]
    fn anchors_keep_area_and_aspect() {
        let set = tile_anchors(2, 2, 0, 8, 1.25);
        let scales = level_scales(8);
        for (k, b) in set.boxes.iter().enumerate() {
            let s = scales[k % 2];
            assert!((b.area() - s * s).abs() < 1e-9, "area preserved");
            assert!((b.height() / b.width() - 1.25).abs() < 1e-9, "taller than wide");
        }
    }

    #[test]
    fn tiling_covers_expected_scale_span() {
        // Desk-scale strides reach 8..45.25 px; the 6-level ladder of
        // strides 4..128 spans 8..362 px.
        let desk: Vec<f64> = [4, 8, 16].iter().flat_map(|&s| level_scales(s)).collect();
        let lo = desk.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = desk.iter().cloned().fold(0.0, f64::max);
        assert!((lo - 8.0).abs() < 1e-9);
        assert!((hi - 45.254833995939045).abs() < 1e-9);

        let full: Vec<f64> = [4, 8, 16, 32, 64, 128].iter().flat_map(|&s| level_scales(s)).collect();
        let hi_full = full.iter().cloned().fold(0.0, f64::max);
        assert!((hi_full - 362.03867196751236).abs() < 1e-6);
    }

    #[test]
    fn encode_of_anchor_itself_is_zero() {
        let a = BBox::new(3.0, 4.0, 13.0, 24.0);
        assert_eq!(encode(&a, &a), [0.0; 4]);
    }

    #[test]
    fn encode_unit_shift_matches_hand_arithmetic() {
        let anchor = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gt = BBox::new(1.0, 0.0, 11.0, 10.0);
        let d = encode(&gt, &anchor);
        assert!((d[0] - 0.1).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12);
        assert!(d[2].abs() < 1e-12);
        assert!(d[3].abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "degenerate ground truth")]
    fn encode_rejects_zero_size_gt() {
        let anchor = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gt = BBox::new(5.0, 5.0, 5.0, 9.0);
        let _ = encode(&gt, &anchor);
    }

    #[test]
    fn decode_inverts_encode() {
        let mut rng = Rng::new(21);
        for _ in 0..1000 {
            let rand_box = |rng: &mut Rng| {
                let x1 = rng.range(0.0, 100.0);
                let y1 = rng.range(0.0, 100.0);
                BBox::new(x1, y1, x1 + rng.range(0.5, 60.0), y1 + rng.range(0.5, 60.0))
            };
            let anchor = rand_box(&mut rng);
            let gt = rand_box(&mut rng);
            let back = decode(&encode(&gt, &anchor), &anchor);
            for (a, b) in [
                (back.x1, gt.x1),
                (back.y1, gt.y1),
                (back.x2, gt.x2),
                (back.y2, gt.y2),
            ] {
                assert!((a - b).abs() < 1e-4, "round-trip error {a} vs {b}");
            }
        }
    }

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection { bbox: BBox::new(x1, y1, x2, y2), score, level: 0 }
    }

    #[test]
    fn nms_single_detection_survives() {
        let d = vec![det(0.0, 0.0, 4.0, 4.0, 0.7)];
        let kept = nms(&d, 0.4);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn nms_suppresses_identical_boxes() {
        let d = vec![det(0.0, 0.0, 4.0, 4.0, 0.9), det(0.0, 0.0, 4.0, 4.0, 0.8)];
        let kept = nms(&d, 0.4);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    /// Quadratic reference suppression, written independently of `nms`.
    fn nms_oracle(dets: &[Detection], overlap: f64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::new();
        'outer: for &i in &order {
            for &j in &kept {
                if iou(&dets[i].bbox, &dets[j].bbox) > overlap {
                    continue 'outer;
                }
            }
            kept.push(i);
        }
        kept
    }

    #[test]
    fn nms_matches_brute_force_on_random_sets() {
        let mut rng = Rng::new(33);
        let mut dets = Vec::new();
        for _ in 0..200 {
            let x1 = rng.range(0.0, 40.0);
            let y1 = rng.range(0.0, 40.0);
            dets.push(det(x1, y1, x1 + rng.range(1.0, 15.0), y1 + rng.range(1.0, 15.0), rng.uniform()));
        }
        let kept = nms(&dets, 0.4);
        let want = nms_oracle(&dets, 0.4);
        assert_eq!(kept.len(), want.len());
        for (k, &wi) in kept.iter().zip(&want) {
            assert_eq!(k.score, dets[wi].score);
            assert_eq!(k.bbox, dets[wi].bbox);
        }
        // Kept set is an antichain under the threshold.
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                assert!(iou(&kept[i].bbox, &kept[j].bbox) <= 0.4);
            }
        }
        // Output sorted by descending score.
        for pair in kept.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn detection_dump_roundtrip() {
        let dir = std::env::temp_dir().join("tinydet_boxgeom_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dets.txt");
        let per_image = vec![
            vec![det(1.0, 2.0, 3.0, 4.0, 0.5), det(0.25, 0.5, 9.75, 10.0, 0.125)],
            vec![],
            vec![det(5.0, 5.0, 6.0, 6.0, 0.875)],
        ];
        write_detection_dump(&path, &per_image).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("0 1.000000 2.000000 3.000000 4.000000 0.500000\n"));
        let back = read_detection_dump(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].len(), 2);
        assert!(back[1].is_empty());
        assert_eq!(back[2][0].score, 0.875);
        std::fs::remove_file(&path).ok();
    }
}
