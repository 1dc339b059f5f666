//! Deterministic synthetic stand-in for the paired visible/thermal face set.
//!
//! Each subject gets a perturbed 68-point face shape; each variation bends
//! it (expression, pose) and changes how the pair is rendered (lighting,
//! occlusions). Ground truth is exact by construction. Thermal renders are
//! smooth and low-contrast, visible renders carry edges and shading.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::face::{FaceImage, Spectrum, Variation};
use crate::landmarks::{LandmarkSet, Point, NUM_POINTS};
use crate::manifest::{write_manifest, SampleRecord};
use crate::masks::boundary_from_landmarks;
use crate::raster::Raster;

use super::preprocess::PairedSample;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: u32,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub variations: Vec<Variation>,
}

impl SynthConfig {
    pub fn new(n_subjects: u32, seed: u64) -> Self {
        Self {
            n_subjects,
            seed,
            width: 160,
            height: 128,
            variations: Variation::ALL.to_vec(),
        }
    }
}

/// Mean face in a face-centred frame: `u` in `[-1,1]` left to right across
/// the image, `v` downwards, chin near `v = 0.95`.
pub fn template() -> [Point; NUM_POINTS] {
    let mut t = [Point::default(); NUM_POINTS];
    for i in 0..17 {
        let a = std::f64::consts::PI * i as f64 / 16.0;
        t[i] = Point::new(-0.95 * a.cos(), -0.2 + 1.15 * a.sin());
    }
    for i in 0..5 {
        let s = i as f64 / 4.0;
        let arc = -0.58 - 0.08 * (s * std::f64::consts::PI).sin();
        t[17 + i] = Point::new(-0.78 + 0.62 * s, arc + 0.04 * s);
        t[26 - i] = Point::new(0.78 - 0.62 * s, arc + 0.04 * s);
    }
    for i in 0..4 {
        t[27 + i] = Point::new(0.0, -0.32 + 0.13 * i as f64);
    }
    let nostrils = [(-0.2, 0.18), (-0.1, 0.21), (0.0, 0.23), (0.1, 0.21), (0.2, 0.18)];
    for (i, (u, v)) in nostrils.into_iter().enumerate() {
        t[31 + i] = Point::new(u, v);
    }
    let eye = [
        (-0.58, -0.3),
        (-0.48, -0.36),
        (-0.36, -0.36),
        (-0.26, -0.3),
        (-0.36, -0.25),
        (-0.48, -0.25),
    ];
    for (i, (u, v)) in eye.into_iter().enumerate() {
        t[36 + i] = Point::new(u, v);
    }
    // Left eye mirrors the right one: 43..48 pair with 40, 39, 38, 37, 42, 41.
    for (dst, src) in [(42, 39), (43, 38), (44, 37), (45, 36), (46, 41), (47, 40)] {
        t[dst] = Point::new(-t[src].x, t[src].y);
    }
    let outer = [
        (-0.36, 0.5),
        (-0.22, 0.44),
        (-0.08, 0.41),
        (0.0, 0.43),
        (0.08, 0.41),
        (0.22, 0.44),
        (0.36, 0.5),
        (0.22, 0.59),
        (0.08, 0.62),
        (0.0, 0.63),
        (-0.08, 0.62),
        (-0.22, 0.59),
    ];
    for (i, (u, v)) in outer.into_iter().enumerate() {
        t[48 + i] = Point::new(u, v);
    }
    let inner = [
        (-0.28, 0.5),
        (-0.1, 0.48),
        (0.0, 0.485),
        (0.1, 0.48),
        (0.28, 0.5),
        (0.1, 0.53),
        (0.0, 0.535),
        (-0.1, 0.53),
    ];
    for (i, (u, v)) in inner.into_iter().enumerate() {
        t[60 + i] = Point::new(u, v);
    }
    t
}

struct Subject {
    shape: [Point; NUM_POINTS],
    half_w: f64,
    half_h: f64,
    skin: [f32; 3],
    warmth: f32,
    background: [f32; 3],
}

fn make_subject(rng: &mut ChaCha8Rng) -> Subject {
    let mut shape = template();
    let eye_spread = rng.random_range(-0.05..0.05);
    let mouth_w = rng.random_range(0.9..1.12);
    let nose_len = rng.random_range(-0.05..0.05);
    let brow_h = rng.random_range(-0.05..0.05);
    for (i, p) in shape.iter_mut().enumerate() {
        match i {
            17..=26 => p.y += brow_h,
            36..=47 => p.x += eye_spread * p.x.signum(),
            27..=35 => {
                if i >= 30 {
                    p.y += nose_len
                }
            }
            48..=67 => p.x *= mouth_w,
            _ => {}
        }
        p.x += rng.random_range(-0.015..0.015);
        p.y += rng.random_range(-0.015..0.015);
    }
    let tone = rng.random_range(0.45..0.85f32);
    Subject {
        shape,
        half_w: rng.random_range(0.20..0.26),
        half_h: rng.random_range(0.30..0.36),
        skin: [tone, tone * 0.82, tone * 0.7],
        warmth: rng.random_range(0.58..0.66),
        background: [
            rng.random_range(0.2..0.6),
            rng.random_range(0.2..0.6),
            rng.random_range(0.2..0.6),
        ],
    }
}

fn is_upper_lid(i: usize) -> bool {
    matches!(i, 37 | 38 | 43 | 44)
}

/// Applies expression and pose of a variation in the face frame.
fn pose_shape(base: &[Point; NUM_POINTS], variation: Variation) -> [Point; NUM_POINTS] {
    let mut s = *base;
    let lower_lip = |i: usize| matches!(i, 55..=59 | 64..=66);
    for (i, p) in s.iter_mut().enumerate() {
        match variation {
            Variation::Aom | Variation::Esp => {
                let open = if variation == Variation::Aom { 0.16 } else { 0.1 };
                if lower_lip(i) {
                    p.y += open;
                }
                if (5..=11).contains(&i) {
                    p.y += open * 0.5;
                }
                if variation == Variation::Esp && (17..=26).contains(&i) {
                    p.y -= 0.07;
                }
            }
            Variation::Eh => {
                if matches!(i, 48 | 54 | 60 | 64) {
                    p.x *= 1.15;
                    p.y -= 0.05;
                }
            }
            Variation::Es => {
                if matches!(i, 48 | 54 | 60 | 64) {
                    p.y += 0.04;
                }
            }
            Variation::Ea => {
                if matches!(i, 20 | 21 | 22 | 23) {
                    p.y += 0.06;
                }
            }
            Variation::Aec => {
                if is_upper_lid(i) {
                    p.y = -0.29;
                }
            }
            _ => {}
        }
    }
    let (yaw, pitch) = match variation {
        Variation::Pl => (-0.22, 0.0),
        Variation::Pr => (0.22, 0.0),
        Variation::Pu => (0.0, -0.12),
        Variation::Pd => (0.0, 0.12),
        _ => (0.0, 0.0),
    };
    if yaw != 0.0 || pitch != 0.0 {
        for (i, p) in s.iter_mut().enumerate() {
            // Interior features travel further than the jaw outline.
            let depth = if i < 17 { 0.35 } else { 1.0 };
            p.x += yaw * depth * (1.0 - 0.3 * p.x * p.x);
            p.y += pitch * depth;
            if i < 17 && (p.x * yaw) < 0.0 {
                p.x *= 1.0 - yaw.abs() * 0.5;
            }
        }
    }
    s
}

struct Placement {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    cos: f64,
    sin: f64,
}

impl Placement {
    // Face frame -> pixel coordinates.
    fn to_px(&self, p: Point) -> (f64, f64) {
        let (u, v) = (p.x * self.half_w, p.y * self.half_h);
        (
            self.cx + u * self.cos - v * self.sin,
            self.cy + u * self.sin + v * self.cos,
        )
    }

    // Pixel -> face frame.
    fn from_px(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (
            (dx * self.cos + dy * self.sin) / self.half_w,
            (-dx * self.sin + dy * self.cos) / self.half_h,
        )
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (wx - t * vx).hypot(wy - t * vy)
}

/// Blends `color` along a polyline with a soft edge of half-width `radius`.
fn stroke(r: &mut Raster, pts: &[(f64, f64)], closed: bool, radius: f64, color: &[f32], alpha: f32) {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let pad = radius + 1.5;
    let xs = (x0 - pad).floor().max(0.0) as usize..((x1 + pad).ceil() as usize).min(r.width);
    let ys = (y0 - pad).floor().max(0.0) as usize..((y1 + pad).ceil() as usize).min(r.height);
    let n = pts.len();
    let segs = if closed { n } else { n - 1 };
    for y in ys {
        for x in xs.clone() {
            let p = (x as f64, y as f64);
            let d = (0..segs)
                .map(|i| seg_dist(p, pts[i], pts[(i + 1) % n]))
                .fold(f64::MAX, f64::min);
            let a = alpha * (1.0 - smoothstep(radius - 0.75, radius + 0.75, d)) as f32;
            if a > 0.0 {
                for (c, &col) in color.iter().enumerate().take(r.channels) {
                    let v = r.get(x, y, c);
                    r.set(x, y, c, v + (col - v) * a);
                }
            }
        }
    }
}

/// Soft ellipse fill in pixel space.
fn blob(r: &mut Raster, c: (f64, f64), rx: f64, ry: f64, color: &[f32], alpha: f32) {
    let xs = (c.0 - rx - 2.0).floor().max(0.0) as usize..((c.0 + rx + 2.0).ceil() as usize).min(r.width);
    let ys = (c.1 - ry - 2.0).floor().max(0.0) as usize..((c.1 + ry + 2.0).ceil() as usize).min(r.height);
    for y in ys {
        for x in xs.clone() {
            let d = ((x as f64 - c.0) / rx).hypot((y as f64 - c.1) / ry);
            let a = alpha * (1.0 - smoothstep(0.8, 1.1, d)) as f32;
            if a > 0.0 {
                for (ch, &col) in color.iter().enumerate().take(r.channels) {
                    let v = r.get(x, y, ch);
                    r.set(x, y, ch, v + (col - v) * a);
                }
            }
        }
    }
}

fn chain(px: &[(f64, f64)], idx: std::ops::Range<usize>) -> Vec<(f64, f64)> {
    px[idx].to_vec()
}

fn centroid(px: &[(f64, f64)], idx: std::ops::Range<usize>) -> (f64, f64) {
    let n = idx.len() as f64;
    let (sx, sy) = px[idx].iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    (sx / n, sy / n)
}

fn render_th(
    subj: &Subject,
    place: &Placement,
    px: &[(f64, f64)],
    variation: Variation,
    size: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Raster {
    let (w, h) = size;
    let ambient = 0.3f32;
    let mut r = Raster::filled(w, h, 1, ambient);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = place.from_px(x as f64, y as f64);
            // Head ellipse reaches above the brows; neck below the chin.
            let head = (u / 1.08).hypot((v + 0.1) / 1.12);
            let neck = if v > 0.8 && u.abs() < 0.55 { 1.0 } else { 0.0 };
            let t = (1.0 - smoothstep(0.85, 1.05, head)).max(neck * 0.85);
            let temp = subj.warmth - 0.04 * (head as f32).min(1.0);
            r.set(x, y, 0, ambient + (temp - ambient) * t as f32);
        }
    }
    let warm = [subj.warmth + 0.07];
    let cool = [subj.warmth - 0.06];
    // Inner eye corners are the warmest spots of a face.
    for corner in [39, 42] {
        blob(&mut r, px[corner], 2.5, 2.5, &warm, 0.9);
    }
    for range in [36..42, 42..48] {
        let c = centroid(px, range.clone());
        blob(&mut r, c, place.half_w * 0.14, place.half_h * 0.05, &[subj.warmth + 0.04], 0.7);
    }
    stroke(&mut r, &chain(px, 27..31), false, 1.5, &cool, 0.6);
    blob(&mut r, px[33], place.half_w * 0.16, place.half_h * 0.06, &cool, 0.7);
    let mut lips = chain(px, 48..60);
    lips.push(px[48]);
    stroke(&mut r, &lips, true, 1.2, &[subj.warmth + 0.05], 0.8);
    if matches!(variation, Variation::Aom | Variation::Esp) {
        let c = centroid(px, 60..68);
        let open = (px[66].1 - px[62].1).abs() * 0.5;
        blob(&mut r, c, (px[64].0 - px[60].0).abs() * 0.45, open.max(1.0), &[subj.warmth + 0.08], 0.9);
    }
    stroke(&mut r, &chain(px, 0..17), false, 1.0, &[subj.warmth - 0.02], 0.5);
    occlude(&mut r, place, px, variation, Spectrum::Th, subj);
    add_noise(&mut r, 0.006, rng);
    r
}

fn render_vis(
    subj: &Subject,
    place: &Placement,
    px: &[(f64, f64)],
    variation: Variation,
    size: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Raster {
    let (w, h) = size;
    let mut r = Raster::filled(w, h, 3, 0.0);
    for y in 0..h {
        for x in 0..w {
            let stripe = if ((x / 9) + (y / 13)) % 2 == 0 { 1.0 } else { 0.85 };
            for c in 0..3 {
                r.set(x, y, c, subj.background[c] * stripe);
            }
            let (u, v) = place.from_px(x as f64, y as f64);
            let head = (u / 1.0).hypot((v + 0.05) / 1.06);
            let t = 1.0 - smoothstep(0.94, 1.0, head);
            if t > 0.0 {
                // Lambert-like falloff towards the face outline.
                let shade = (1.0 - 0.35 * head * head) as f32;
                for c in 0..3 {
                    let bg = r.get(x, y, c);
                    r.set(x, y, c, bg + (subj.skin[c] * shade - bg) * t as f32);
                }
            }
        }
    }
    let dark = [0.08, 0.06, 0.05];
    stroke(&mut r, &chain(px, 0..17), false, 1.0, &[0.25, 0.2, 0.18], 0.7);
    for range in [17..22, 22..27] {
        stroke(&mut r, &chain(px, range), false, 1.6, &dark, 0.85);
    }
    for range in [36..42, 42..48] {
        let pts = chain(px, range.clone());
        if variation == Variation::Aec {
            stroke(&mut r, &pts, true, 0.8, &dark, 0.9);
        } else {
            let c = centroid(px, range.clone());
            blob(&mut r, c, (pts[3].0 - pts[0].0).abs() * 0.5, place.half_h * 0.05, &[0.92, 0.92, 0.9], 0.9);
            blob(&mut r, c, place.half_w * 0.06, place.half_h * 0.045, &dark, 0.95);
            stroke(&mut r, &pts, true, 0.8, &dark, 0.8);
        }
    }
    stroke(&mut r, &chain(px, 27..31), false, 0.8, &[0.3, 0.22, 0.2], 0.5);
    stroke(&mut r, &chain(px, 31..36), false, 1.0, &[0.2, 0.12, 0.1], 0.8);
    let lip = [0.62, 0.22, 0.25];
    stroke(&mut r, &chain(px, 48..60), true, 1.6, &lip, 0.9);
    let mouth = if matches!(variation, Variation::Aom | Variation::Esp) {
        [0.15, 0.05, 0.05]
    } else {
        [0.35, 0.1, 0.12]
    };
    stroke(&mut r, &chain(px, 60..68), true, 1.0, &mouth, 0.9);
    if matches!(variation, Variation::Aom | Variation::Esp) {
        let c = centroid(px, 60..68);
        let open = (px[66].1 - px[62].1).abs() * 0.5;
        blob(&mut r, c, (px[64].0 - px[60].0).abs() * 0.45, open.max(1.0), &mouth, 0.9);
    }
    occlude(&mut r, place, px, variation, Spectrum::Vis, subj);
    light(&mut r, variation);
    add_noise(&mut r, 0.015, rng);
    r
}

fn occlude(
    r: &mut Raster,
    place: &Placement,
    px: &[(f64, f64)],
    variation: Variation,
    spectrum: Spectrum,
    subj: &Subject,
) {
    let th = spectrum == Spectrum::Th;
    let eye_l = centroid(px, 36..42);
    let eye_r = centroid(px, 42..48);
    let lens = (place.half_w * 0.24, place.half_h * 0.12);
    match variation {
        Variation::Oog | Variation::Osg => {
            // Glass blocks long-wave infrared: lenses read as cool patches.
            let color: &[f32] = match (th, variation) {
                (true, _) => &[0.34],
                (false, Variation::Osg) => &[0.05, 0.05, 0.06],
                (false, _) => &[0.8, 0.85, 0.9],
            };
            let alpha = if !th && variation == Variation::Oog { 0.25 } else { 0.95 };
            for c in [eye_l, eye_r] {
                blob(r, c, lens.0, lens.1, color, alpha);
            }
            let frame: &[f32] = if th { &[0.36] } else { &[0.1, 0.1, 0.1] };
            stroke(r, &[eye_l, eye_r], false, 1.0, frame, 0.8);
        }
        Variation::Oh => {
            let top = place.to_px(Point::new(0.0, -0.95));
            let color: &[f32] = if th { &[0.42] } else { &[0.15, 0.2, 0.45] };
            blob(r, top, place.half_w * 1.15, place.half_h * 0.28, color, 0.95);
        }
        Variation::Ohm | Variation::Ohe => {
            let c = if variation == Variation::Ohm {
                centroid(px, 48..60)
            } else {
                eye_r
            };
            let color: Vec<f32> = if th {
                vec![subj.warmth - 0.03]
            } else {
                subj.skin.iter().map(|v| v * 0.92).collect()
            };
            blob(r, (c.0 + 3.0, c.1 + 2.0), place.half_w * 0.42, place.half_h * 0.2, &color, 0.95);
        }
        _ => {}
    }
}

fn light(r: &mut Raster, variation: Variation) {
    let (w, h) = (r.width as f32, r.height as f32);
    for y in 0..r.height {
        for x in 0..r.width {
            let gain = match variation {
                Variation::Ld => 0.03,
                Variation::Llu => 1.15 - 0.4 * y as f32 / h,
                Variation::Llr => 0.55 + 0.6 * x as f32 / w,
                Variation::Lll => 1.15 - 0.6 * x as f32 / w,
                Variation::Lr => 0.9,
                _ => 1.0,
            };
            for c in 0..r.channels {
                let v = r.get(x, y, c);
                r.set(x, y, c, (v * gain).clamp(0.0, 1.0));
            }
        }
    }
}

fn add_noise(r: &mut Raster, amp: f32, rng: &mut ChaCha8Rng) {
    for v in &mut r.data {
        *v = (*v + rng.random_range(-amp..amp)).clamp(0.0, 1.0);
    }
}

/// Generates `n_subjects x variations` registered pairs at the configured
/// (non-square) frame size, annotated and calibrated.
pub fn synth_faces(cfg: &SynthConfig) -> Vec<PairedSample> {
    let mut out = Vec::new();
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    for subject_id in 1..=cfg.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (subject_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let subj = make_subject(&mut rng);
        for &variation in &cfg.variations {
            let shape = pose_shape(&subj.shape, variation);
            let scale = rng.random_range(0.94..1.06);
            let angle: f64 = rng.random_range(-0.08..0.08);
            let place = Placement {
                cx: w * 0.5 + rng.random_range(-0.14..0.14) * w,
                cy: h * 0.52 + rng.random_range(-0.04..0.04) * h,
                half_w: subj.half_w * h * scale,
                half_h: subj.half_h * h * scale,
                cos: angle.cos(),
                sin: angle.sin(),
            };
            let px: Vec<(f64, f64)> = shape.iter().map(|&p| place.to_px(p)).collect();
            let landmarks = LandmarkSet::from_fn(|i| {
                Point::new((px[i].0 / w).clamp(0.0, 1.0), (px[i].1 / h).clamp(0.0, 1.0))
            });
            let th = render_th(&subj, &place, &px, variation, (cfg.width, cfg.height), &mut rng);
            let vis = render_vis(&subj, &place, &px, variation, (cfg.width, cfg.height), &mut rng);

            let mut record = SampleRecord::new(
                subject_id,
                variation,
                format!("images/VIS_{subject_id:03}_{}.png", variation.acronym()).into(),
                format!("images/TH_{subject_id:03}_{}.png", variation.acronym()).into(),
            );
            record.boundary = Some(boundary_from_landmarks(&landmarks).expect("non-degenerate face"));
            record.landmarks = Some(landmarks);
            record.calibrated = true;
            out.push(PairedSample {
                record,
                vis: FaceImage::new(vis, Spectrum::Vis, subject_id, variation),
                th: FaceImage::new(th, Spectrum::Th, subject_id, variation),
            });
        }
    }
    let mut records: Vec<SampleRecord> = out.iter().map(|s| s.record.clone()).collect();
    super::assign_fold_groups(&mut records);
    for (s, r) in out.iter_mut().zip(records) {
        s.record = r;
    }
    out
}

/// Writes the images and `manifest.jsonl` under `dir`.
pub fn write_samples(dir: &Path, samples: &[PairedSample]) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        for (img, path) in [(&s.vis, &s.record.vis_path), (&s.th, &s.record.th_path)] {
            let full = dir.join(path);
            if let Some(parent) = full.parent() {
                std::fs::create_dir_all(parent).map_err(|e| crate::Error::io(parent, e))?;
            }
            img.raster.save_png(&full)?;
        }
        records.push(s.record.clone());
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
