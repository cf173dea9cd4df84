//! Scribble propagation over superpixels, synthetic scenes and scribbles, and
//! label-preserving augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::superpixels::SuperpixelMap;
use crate::types::{Image, LabelMask};

/// Scribble widths used by the experiment grid.
pub const SCRIBBLE_WIDTHS: [usize; 4] = [2, 5, 10, 20];

/// Labels every superpixel touched by a scribble with the majority scribble class inside it.
///
/// Ties go to the lowest class id; superpixels without scribble pixels stay unlabelled and
/// scribble pixels always keep their own class.
pub fn propagate_scribbles(scribbles: &LabelMask, superpixels: &SuperpixelMap) -> Result<LabelMask> {
    if !scribbles.same_size(superpixels.height(), superpixels.width()) {
        return Err(Error::DimensionMismatch(format!(
            "scribbles {}x{} vs superpixels {}x{}",
            scribbles.height(),
            scribbles.width(),
            superpixels.height(),
            superpixels.width()
        )));
    }
    let c = scribbles.class_count();
    let mut votes = vec![0usize; superpixels.segment_count() * c];
    for (&seg, label) in superpixels.segment_ids().iter().zip(scribbles.labels()) {
        if let Some(l) = label {
            votes[seg * c + usize::from(*l)] += 1;
        }
    }
    let winner: Vec<Option<u8>> = votes
        .chunks(c)
        .map(|v| {
            let (best, &count) = v
                .iter()
                .enumerate()
                .fold((0, &0), |acc, (i, n)| if n > acc.1 { (i, n) } else { acc });
            (count > 0).then_some(best as u8)
        })
        .collect();
    let labels = superpixels
        .segment_ids()
        .iter()
        .zip(scribbles.labels())
        .map(|(&seg, &own)| own.or(winner[seg]))
        .collect();
    LabelMask::new(scribbles.height(), scribbles.width(), c, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Ellipse,
    Rectangle,
    Blob,
}

/// Parameters of a synthetic scene: textured background (class 0) plus shapes for classes `1..C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub shapes_per_class: usize,
    pub kinds: Vec<ShapeKind>,
    /// Amplitude of the per-class texture pattern.
    pub texture: f64,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, class_count: usize) -> Self {
        Self {
            height,
            width,
            class_count,
            shapes_per_class: 1,
            kinds: vec![ShapeKind::Disk, ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Blob],
            texture: 0.08,
            noise: 0.04,
        }
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.55, 0.50, 0.42],
    [0.78, 0.30, 0.22],
    [0.25, 0.40, 0.75],
    [0.30, 0.68, 0.32],
    [0.82, 0.74, 0.25],
    [0.58, 0.32, 0.66],
];

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Rectangle { cy: f64, cx: f64, hy: f64, hx: f64 },
    Blob { a: (f64, f64, f64), b: (f64, f64, f64) },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rectangle { cy, cx, hy, hx } => (y - cy).abs() <= hy && (x - cx).abs() <= hx,
            Shape::Blob { a, b } => {
                (y - a.0).powi(2) + (x - a.1).powi(2) <= a.2 * a.2
                    || (y - b.0).powi(2) + (x - b.1).powi(2) <= b.2 * b.2
            }
        }
    }

    fn centre_and_radius(&self) -> (f64, f64, f64) {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, .. } => (cy, cx, ry.max(rx)),
            Shape::Rectangle { cy, cx, hy, hx } => (cy, cx, hy.max(hx)),
            Shape::Blob { a, b } => ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0, a.2.max(b.2) * 1.5),
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, kind: ShapeKind, h: f64, w: f64) -> Shape {
    let side = h.min(w);
    let r = rng.random_range(0.18..0.26) * side;
    let cy = rng.random_range(r.min(h / 2.0)..=(h - r).max(h / 2.0));
    let cx = rng.random_range(r.min(w / 2.0)..=(w - r).max(w / 2.0));
    match kind {
        ShapeKind::Disk => Shape::Ellipse { cy, cx, ry: r, rx: r, angle: 0.0 },
        ShapeKind::Ellipse => Shape::Ellipse {
            cy,
            cx,
            ry: r * rng.random_range(0.8..1.0),
            rx: r * rng.random_range(1.1..1.4),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        },
        ShapeKind::Rectangle => Shape::Rectangle {
            cy,
            cx,
            hy: r * rng.random_range(0.85..1.15),
            hx: r * rng.random_range(0.85..1.15),
        },
        ShapeKind::Blob => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let off = 0.6 * r;
            Shape::Blob {
                a: (cy + off * angle.sin(), cx + off * angle.cos(), r * 0.85),
                b: (cy - off * angle.sin(), cx - off * angle.cos(), r * 0.8),
            }
        }
    }
}

/// Generates a textured scene and its full ground-truth mask.
pub fn synth_scene(spec: &SceneSpec, seed: u64) -> Result<(Image, LabelMask)> {
    if !(2..=PALETTE.len()).contains(&spec.class_count) {
        return Err(Error::InvalidArgument(format!(
            "synthetic scenes support 2 to {} classes, got {}",
            PALETTE.len(),
            spec.class_count
        )));
    }
    if spec.height < 8 || spec.width < 8 || spec.kinds.is_empty() || spec.shapes_per_class == 0 {
        return Err(Error::InvalidArgument(
            "scene needs at least 8x8 pixels, one shape kind and one shape per class".into(),
        ));
    }
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut shapes: Vec<(u8, Shape)> = Vec::new();
    for class in 1..spec.class_count as u8 {
        for _ in 0..spec.shapes_per_class {
            let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
            let mut best: Option<(f64, Shape)> = None;
            for _ in 0..40 {
                let cand = random_shape(&mut rng, kind, h as f64, w as f64);
                let (cy, cx, r) = cand.centre_and_radius();
                let overlap = shapes
                    .iter()
                    .map(|(_, s)| {
                        let (oy, ox, or) = s.centre_and_radius();
                        (r + or - ((cy - oy).powi(2) + (cx - ox).powi(2)).sqrt()).max(0.0)
                    })
                    .fold(0.0, f64::max);
                if best.as_ref().is_none_or(|(o, _)| overlap < *o) {
                    best = Some((overlap, cand));
                }
                if overlap == 0.0 {
                    break;
                }
            }
            shapes.push((class, best.expect("at least one candidate").1));
        }
    }

    let mut labels = vec![Some(0u8); h * w];
    for (class, shape) in &shapes {
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    labels[y * w + x] = Some(*class);
                }
            }
        }
    }

    // Per-class colour jitter, texture frequencies and phases.
    struct Look {
        base: [f64; 3],
        freq: (f64, f64),
        phase: (f64, f64),
        tint: [f64; 3],
    }
    let looks: Vec<Look> = (0..spec.class_count)
        .map(|c| Look {
            base: PALETTE[c].map(|v| (v + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0)),
            freq: (rng.random_range(0.15..0.9), rng.random_range(0.15..0.9)),
            phase: (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)),
            tint: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
        })
        .collect();
    let light = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut planar = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let look = &looks[usize::from(labels[i].expect("scene is fully labelled"))];
            let pattern = (look.freq.0 * y as f64 + look.phase.0).sin() * (look.freq.1 * x as f64 + look.phase.1).sin();
            let shade = light.0 * (y as f64 / h as f64 - 0.5) + light.1 * (x as f64 / w as f64 - 0.5);
            for ch in 0..3 {
                let v = look.base[ch]
                    + spec.texture * pattern * (0.6 + 0.4 * look.tint[ch])
                    + shade
                    + noise.sample(&mut rng);
                planar[ch * h * w + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok((
        Image::from_planar(h, w, planar)?,
        LabelMask::new(h, w, spec.class_count, labels)?,
    ))
}

/// Offsets of a disk-shaped structuring element exactly `width` pixels across.
fn brush(width: usize) -> Vec<(isize, isize)> {
    let lo = -((width / 2) as isize);
    let hi = width.div_ceil(2) as isize - 1;
    let centre = (width as f64 - 1.0) / 2.0 - (width / 2) as f64;
    let r2 = (width as f64 / 2.0).powi(2);
    let mut out = Vec::new();
    for dy in lo..=hi {
        for dx in lo..=hi {
            if (dy as f64 - centre).powi(2) + (dx as f64 - centre).powi(2) <= r2 {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Chamfer (3-4) distance to the nearest pixel outside `inside`; the image border does not count as outside.
fn distance_inside(inside: &[bool], h: usize, w: usize) -> Vec<u32> {
    const FAR: u32 = u32::MAX / 2;
    let mut d: Vec<u32> = inside.iter().map(|&b| if b { FAR } else { 0 }).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut v = d[i];
            if x > 0 {
                v = v.min(d[i - 1] + 3);
            }
            if y > 0 {
                v = v.min(d[i - w] + 3);
                if x > 0 {
                    v = v.min(d[i - w - 1] + 4);
                }
                if x + 1 < w {
                    v = v.min(d[i - w + 1] + 4);
                }
            }
            d[i] = v;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let i = y * w + x;
            let mut v = d[i];
            if x + 1 < w {
                v = v.min(d[i + 1] + 3);
            }
            if y + 1 < h {
                v = v.min(d[i + w] + 3);
                if x + 1 < w {
                    v = v.min(d[i + w + 1] + 4);
                }
                if x > 0 {
                    v = v.min(d[i + w - 1] + 4);
                }
            }
            d[i] = v;
        }
    }
    d
}

/// Draws one scribble per class present in `full_mask`: a ridge-following random
/// stroke through the class interior, dilated to `width` pixels. Every other pixel is unlabelled.
pub fn synth_scribbles(full_mask: &LabelMask, width: usize, seed: u64) -> Result<LabelMask> {
    if !SCRIBBLE_WIDTHS.contains(&width) {
        return Err(Error::InvalidArgument(format!(
            "scribble width must be one of {SCRIBBLE_WIDTHS:?}, got {width}"
        )));
    }
    let (h, w) = (full_mask.height(), full_mask.width());
    let se = brush(width);
    let hist = full_mask.class_histogram();
    let mut out = vec![None; h * w];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, &area) in hist.iter().enumerate() {
        if area == 0 {
            continue;
        }
        let class = class as u8;
        if area < width * width {
            return Err(Error::RegionTooSmall { class, width });
        }
        let inside: Vec<bool> = full_mask.labels().iter().map(|&l| l == Some(class)).collect();
        let fits = |y: usize, x: usize| {
            se.iter().all(|&(dy, dx)| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || inside[yy as usize * w + xx as usize]
            })
        };
        let allowed: Vec<bool> = (0..h * w).map(|i| inside[i] && fits(i / w, i % w)).collect();
        let dist = distance_inside(&inside, h, w);

        let deepest = (0..h * w).filter(|&i| allowed[i]).map(|i| dist[i]).max();
        let Some(deepest) = deepest else {
            return Err(Error::RegionTooSmall { class, width });
        };
        let starts: Vec<usize> = (0..h * w).filter(|&i| allowed[i] && dist[i] == deepest).collect();
        let start = starts[rng.random_range(0..starts.len())];

        let steps = ((area as f64).sqrt() * 0.35).round().max(1.0) as usize;
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let mut visited = vec![false; h * w];
        visited[start] = true;
        let mut path = vec![start];
        for dir in [heading, heading + std::f64::consts::PI] {
            let walk = ridge_walk(start, dir, steps, &allowed, &dist, deepest, &mut visited, (h, w), &mut rng);
            path.extend(walk);
        }
        for &p in &path {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for &(dy, dx) in &se {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                    out[yy as usize * w + xx as usize] = Some(class);
                }
            }
        }
    }
    LabelMask::new(h, w, full_mask.class_count(), out)
}

/// Momentum walk over allowed pixels, preferring the distance ridge.
#[allow(clippy::too_many_arguments)]
fn ridge_walk(
    start: usize,
    mut heading: f64,
    steps: usize,
    allowed: &[bool],
    dist: &[u32],
    deepest: u32,
    visited: &mut [bool],
    (h, w): (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut path = Vec::new();
    let mut cur = start;
    for _ in 0..steps {
        let (y, x) = ((cur / w) as isize, (cur % w) as isize);
        let mut best: Option<(f64, usize, f64)> = None;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                if dy == 0 && dx == 0 {
                    continue;
                }
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if !allowed[j] || visited[j] {
                    continue;
                }
                let angle = (dy as f64).atan2(dx as f64);
                let score = 1.5 * (angle - heading).cos()
                    + 0.5 * f64::from(dist[j]) / f64::from(deepest.max(1))
                    + 0.3 * rng.random::<f64>();
                if best.is_none_or(|(s, _, _)| score > s) {
                    best = Some((score, j, angle));
                }
            }
        }
        let Some((_, next, angle)) = best else { break };
        visited[next] = true;
        path.push(next);
        heading = 0.7 * heading + 0.3 * angle;
        cur = next;
    }
    path
}

/// A geometric transform applied identically to an image and its masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    /// Counter-clockwise rotation by `quarter_turns × 90°`.
    Rotate { quarter_turns: u8 },
    /// Scaling about the centre, then centre crop or edge-replicating pad back to the original size.
    Scale { factor: f64 },
    /// Crop of the given window, resized back to the original size.
    Crop { top: usize, left: usize, height: usize, width: usize },
}

impl Transform {
    pub fn sample(rng: &mut impl Rng, height: usize, width: usize) -> Self {
        match rng.random_range(0..3) {
            0 => Transform::Rotate {
                // Odd turns would swap the sides of a non-square image.
                quarter_turns: if height == width {
                    rng.random_range(0..4)
                } else {
                    2 * rng.random_range(0..2)
                },
            },
            1 => Transform::Scale {
                factor: rng.random_range(0.8..=1.2),
            },
            _ => {
                let fy: f64 = rng.random_range(0.5f64.sqrt()..=1.0);
                let fx: f64 = rng.random_range(0.5f64.sqrt()..=1.0);
                let ch = ((height as f64 * fy).ceil() as usize).clamp(1, height);
                let cw = ((width as f64 * fx).ceil() as usize).clamp(1, width);
                Transform::Crop {
                    top: rng.random_range(0..=height - ch),
                    left: rng.random_range(0..=width - cw),
                    height: ch,
                    width: cw,
                }
            }
        }
    }

    /// Output size and the nearest source pixel of every output pixel.
    fn source_map(&self, h: usize, w: usize) -> (usize, usize, Vec<usize>) {
        match *self {
            Transform::Rotate { quarter_turns } => {
                let turns = quarter_turns % 4;
                let (oh, ow) = if turns % 2 == 0 { (h, w) } else { (w, h) };
                let map = (0..oh * ow)
                    .map(|i| {
                        let (y, x) = (i / ow, i % ow);
                        let (sy, sx) = match turns {
                            0 => (y, x),
                            1 => (x, w - 1 - y),
                            2 => (h - 1 - y, w - 1 - x),
                            _ => (h - 1 - x, y),
                        };
                        sy * w + sx
                    })
                    .collect();
                (oh, ow, map)
            }
            Transform::Scale { factor } => {
                let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
                let map = (0..h * w)
                    .map(|i| {
                        let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
                        let sy = ((y - cy) / factor + cy).floor().clamp(0.0, h as f64 - 1.0) as usize;
                        let sx = ((x - cx) / factor + cx).floor().clamp(0.0, w as f64 - 1.0) as usize;
                        sy * w + sx
                    })
                    .collect();
                (h, w, map)
            }
            Transform::Crop { top, left, height, width } => {
                let map = (0..h * w)
                    .map(|i| {
                        let (y, x) = (i / w, i % w);
                        let sy = top + (y * height / h).min(height - 1);
                        let sx = left + (x * width / w).min(width - 1);
                        sy * w + sx
                    })
                    .collect();
                (h, w, map)
            }
        }
    }

    pub fn apply(&self, image: &Image, masks: &[LabelMask]) -> Result<(Image, Vec<LabelMask>)> {
        let (h, w) = (image.height(), image.width());
        if let Transform::Crop { top, left, height, width } = *self {
            if height == 0 || width == 0 || top + height > h || left + width > w {
                return Err(Error::InvalidArgument("crop window outside the image".into()));
            }
        }
        if let Transform::Scale { factor } = *self {
            if factor.is_nan() || factor <= 0.0 {
                return Err(Error::InvalidArgument(format!("scale factor {factor}")));
            }
        }
        for m in masks {
            if !m.same_size(h, w) {
                return Err(Error::DimensionMismatch("mask does not match image".into()));
            }
        }
        let (oh, ow, map) = self.source_map(h, w);
        let plane = h * w;
        let mut planar = Vec::with_capacity(3 * oh * ow);
        for ch in 0..3 {
            let src = &image.planar()[ch * plane..(ch + 1) * plane];
            planar.extend(map.iter().map(|&s| src[s]));
        }
        let out_masks = masks
            .iter()
            .map(|m| {
                let labels = map.iter().map(|&s| m.labels()[s]).collect();
                LabelMask::new(oh, ow, m.class_count(), labels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((Image::from_planar(oh, ow, planar)?, out_masks))
    }
}

/// Applies one randomly drawn [`Transform`] to the image and every mask.
pub fn augment(image: &Image, masks: &[LabelMask], seed: u64) -> Result<(Image, Vec<LabelMask>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Transform::sample(&mut rng, image.height(), image.width()).apply(image, masks)
}
