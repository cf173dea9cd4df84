//! SLICO oversegmentation: SLIC clustering in CIELAB × image-plane space with
//! per-cluster adaptive colour compactness, followed by connectivity enforcement.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{Image, LabelMask};

const ITERATIONS: usize = 10;
const INITIAL_COMPACTNESS: f64 = 10.0;

/// Per-pixel segment ids forming a partition into 4-connected segments `0..segment_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    height: usize,
    width: usize,
    segment_ids: Vec<usize>,
    segment_count: usize,
}

impl SuperpixelMap {
    /// Validates an existing id map: ids must cover `0..n` and every segment must be 4-connected.
    pub fn from_ids(height: usize, width: usize, segment_ids: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 || segment_ids.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "segment map of {} ids cannot be {height}x{width}",
                segment_ids.len()
            )));
        }
        let segment_count = segment_ids.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; segment_count];
        for &s in &segment_ids {
            seen[s] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "segment ids are not contiguous: id {missing} unused"
            )));
        }
        let (_, count) = connected_components(height, width, &segment_ids);
        if count != segment_count {
            return Err(Error::InvalidArgument(format!(
                "{segment_count} segment ids but {count} 4-connected components"
            )));
        }
        Ok(Self {
            height,
            width,
            segment_ids,
            segment_count,
        })
    }

    /// Splits arbitrary region labels into 4-connected components, numbered in raster order.
    pub fn from_regions(height: usize, width: usize, region_ids: &[usize]) -> Result<Self> {
        if height == 0 || width == 0 || region_ids.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "region map of {} ids cannot be {height}x{width}",
                region_ids.len()
            )));
        }
        let (segment_ids, segment_count) = connected_components(height, width, region_ids);
        Ok(Self {
            height,
            width,
            segment_ids,
            segment_count,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn segment_ids(&self) -> &[usize] {
        &self.segment_ids
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.segment_ids[y * self.width + x]
    }

    /// True when every segment is a single 4-connected component.
    pub fn is_four_connected(&self) -> bool {
        connected_components(self.height, self.width, &self.segment_ids).1 == self.segment_count
    }
}

/// Pixel count of every segment, indexed by segment id.
pub fn segment_sizes(map: &SuperpixelMap) -> Vec<usize> {
    let mut sizes = vec![0; map.segment_count];
    for &s in &map.segment_ids {
        sizes[s] += 1;
    }
    sizes
}

/// Labels 4-connected components of equal-valued pixels in raster order.
fn connected_components(height: usize, width: usize, values: &[usize]) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; values.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..values.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / width, i % width);
            for j in neighbours4(y, x, height, width) {
                if comp[j] == usize::MAX && values[j] == values[start] {
                    comp[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    (comp, next)
}

fn neighbours4(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let up = (y > 0).then(|| (y - 1) * w + x);
    let down = (y + 1 < h).then(|| (y + 1) * w + x);
    let left = (x > 0).then(|| y * w + x - 1);
    let right = (x + 1 < w).then(|| y * w + x + 1);
    [up, down, left, right].into_iter().flatten()
}

/// sRGB in `[0, 1]` to CIELAB under D65.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    });
    let x = 0.412_456_4 * lin[0] + 0.357_576_1 * lin[1] + 0.180_437_5 * lin[2];
    let y = 0.212_672_9 * lin[0] + 0.715_152_2 * lin[1] + 0.072_175_0 * lin[2];
    let z = 0.019_333_9 * lin[0] + 0.119_192_0 * lin[1] + 0.950_304_1 * lin[2];
    let f = |t: f64| {
        const DELTA: f64 = 6.0 / 29.0;
        if t > DELTA * DELTA * DELTA {
            t.cbrt()
        } else {
            t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.950_47), f(y), f(z / 1.088_83));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[derive(Debug, Clone, Copy)]
struct Cluster {
    lab: [f64; 3],
    y: f64,
    x: f64,
    /// Squared colour normalizer (`m_k²`).
    compactness_sq: f64,
}

fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Grid shape `(rows, cols)` whose product approximates `requested` while following the image aspect ratio.
fn grid_shape(height: usize, width: usize, requested: usize) -> (usize, usize) {
    let rows = ((requested as f64 * height as f64 / width as f64).sqrt().round() as usize)
        .clamp(1, height);
    let cols = ((requested as f64 / rows as f64).round() as usize).clamp(1, width);
    (rows, cols)
}

/// SLICO oversegmentation of `image` into roughly `requested_segments` 4-connected superpixels.
///
/// The seed only decides between exactly tied lowest-gradient seed positions.
pub fn oversegment(image: &Image, requested_segments: usize, seed: u64) -> Result<SuperpixelMap> {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    if requested_segments == 0 || requested_segments > n {
        return Err(Error::InvalidArgument(format!(
            "requested {requested_segments} superpixels for an image of {n} pixels"
        )));
    }
    let lab: Vec<[f64; 3]> = (0..n).map(|i| srgb_to_lab(image.rgb(i / w, i % w))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (rows, cols) = grid_shape(h, w, requested_segments);
    let step = (n as f64 / (rows * cols) as f64).sqrt();
    let gradient = |y: usize, x: usize| {
        let at = |yy: usize, xx: usize| &lab[yy * w + xx];
        let (yl, yr) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        dist_sq(at(y, xr), at(y, xl)) + dist_sq(at(yr, x), at(yl, x))
    };
    let mut clusters = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let cy = ((r as f64 + 0.5) * h as f64 / rows as f64) as usize;
            let cx = ((c as f64 + 0.5) * w as f64 / cols as f64) as usize;
            let mut best = f64::INFINITY;
            let mut ties: Vec<(usize, usize)> = Vec::new();
            for yy in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for xx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    let g = gradient(yy, xx);
                    if g < best {
                        best = g;
                        ties.clear();
                        ties.push((yy, xx));
                    } else if g == best {
                        ties.push((yy, xx));
                    }
                }
            }
            let (y, x) = if ties.len() == 1 {
                ties[0]
            } else {
                ties[rng.random_range(0..ties.len())]
            };
            clusters.push(Cluster {
                lab: lab[y * w + x],
                y: y as f64,
                x: x as f64,
                compactness_sq: INITIAL_COMPACTNESS * INITIAL_COMPACTNESS,
            });
        }
    }

    let inv_step_sq = 1.0 / (step * step);
    let radius = (2.0 * step).ceil() as isize;
    let mut assignment = vec![usize::MAX; n];
    let mut best_dist = vec![f64::INFINITY; n];
    let mut colour_dist = vec![0.0; n];
    for _ in 0..ITERATIONS {
        best_dist.fill(f64::INFINITY);
        assignment.fill(usize::MAX);
        for (k, cl) in clusters.iter().enumerate() {
            let (cy, cx) = (cl.y.round() as isize, cl.x.round() as isize);
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius) as usize).min(h - 1);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius) as usize).min(w - 1);
            let inv_m = 1.0 / cl.compactness_sq;
            for y in y0..=y1 {
                let dy = y as f64 - cl.y;
                for x in x0..=x1 {
                    let i = y * w + x;
                    let dc = dist_sq(&lab[i], &cl.lab);
                    let dx = x as f64 - cl.x;
                    let d = dc * inv_m + (dy * dy + dx * dx) * inv_step_sq;
                    if d < best_dist[i] {
                        best_dist[i] = d;
                        assignment[i] = k;
                        colour_dist[i] = dc;
                    }
                }
            }
        }
        // Pixels outside every search window go to the spatially nearest centre.
        for i in 0..n {
            if assignment[i] == usize::MAX {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                let k = nearest_centre(&clusters, y, x);
                assignment[i] = k;
                colour_dist[i] = dist_sq(&lab[i], &clusters[k].lab);
            }
        }

        let mut sums = vec![[0.0f64; 6]; clusters.len()];
        let mut max_colour = vec![0.0f64; clusters.len()];
        for i in 0..n {
            let k = assignment[i];
            let s = &mut sums[k];
            s[0] += lab[i][0];
            s[1] += lab[i][1];
            s[2] += lab[i][2];
            s[3] += (i / w) as f64;
            s[4] += (i % w) as f64;
            s[5] += 1.0;
            max_colour[k] = max_colour[k].max(colour_dist[i]);
        }
        for (k, cl) in clusters.iter_mut().enumerate() {
            let s = sums[k];
            if s[5] > 0.0 {
                cl.lab = [s[0] / s[5], s[1] / s[5], s[2] / s[5]];
                cl.y = s[3] / s[5];
                cl.x = s[4] / s[5];
                // Floor of 1 (squared Lab units) keeps flat clusters from dividing by zero.
                cl.compactness_sq = max_colour[k].max(1.0);
            }
        }
    }

    let min_size = n as f64 / (4.0 * requested_segments as f64);
    let ids = enforce_connectivity(h, w, &assignment, min_size);
    Ok(SuperpixelMap {
        height: h,
        width: w,
        segment_count: ids.iter().max().map_or(0, |m| m + 1),
        segment_ids: ids,
    })
}

fn nearest_centre(clusters: &[Cluster], y: f64, x: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in clusters.iter().enumerate() {
        let d = (c.y - y).powi(2) + (c.x - x).powi(2);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Splits clusters into 4-connected components and merges every component
/// smaller than `min_size` into its largest neighbouring segment.
fn enforce_connectivity(h: usize, w: usize, assignment: &[usize], min_size: f64) -> Vec<usize> {
    let (comp, count) = connected_components(h, w, assignment);
    let mut size = vec![0usize; count];
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); count];
    for i in 0..comp.len() {
        size[comp[i]] += 1;
        let (y, x) = (i / w, i % w);
        for j in neighbours4(y, x, h, w) {
            if comp[j] != comp[i] {
                adjacency[comp[i]].insert(comp[j]);
            }
        }
    }

    let mut parent: Vec<usize> = (0..count).collect();
    fn find(parent: &mut [usize], mut c: usize) -> usize {
        while parent[c] != c {
            parent[c] = parent[parent[c]];
            c = parent[c];
        }
        c
    }

    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by_key(|&c| (size[c], c));
    for c in order {
        let root = find(&mut parent, c);
        if (size[root] as f64) >= min_size {
            continue;
        }
        let neighbours: Vec<usize> = adjacency[root].iter().copied().collect();
        let mut target: Option<usize> = None;
        for nb in neighbours {
            let r = find(&mut parent, nb);
            if r == root {
                continue;
            }
            target = match target {
                Some(t) if size[t] > size[r] || (size[t] == size[r] && t < r) => Some(t),
                _ => Some(r),
            };
        }
        let Some(target) = target else { continue };
        parent[root] = target;
        size[target] += size[root];
        let moved = std::mem::take(&mut adjacency[root]);
        adjacency[target].extend(moved);
    }

    let mut relabel = vec![usize::MAX; count];
    let mut next = 0;
    let mut out = Vec::with_capacity(comp.len());
    for &c in &comp {
        let r = find(&mut parent, c);
        if relabel[r] == usize::MAX {
            relabel[r] = next;
            next += 1;
        }
        out.push(relabel[r]);
    }
    out
}

/// Fraction of ground-truth boundary pixels lying within `tolerance` pixels
/// (Chebyshev distance) of a superpixel boundary.
///
/// A pixel is on a boundary when one of its 4-neighbours carries a different id.
/// Returns 1 when the ground truth has no boundary.
pub fn boundary_recall(map: &SuperpixelMap, truth: &LabelMask, tolerance: usize) -> Result<f64> {
    let (h, w) = (map.height, map.width);
    if !truth.same_size(h, w) {
        return Err(Error::DimensionMismatch(
            "superpixel map and ground truth differ in size".into(),
        ));
    }
    let sp_edge: Vec<bool> = (0..h * w)
        .map(|i| neighbours4(i / w, i % w, h, w).any(|j| map.segment_ids[j] != map.segment_ids[i]))
        .collect();
    let labels = truth.labels();
    let mut total = 0usize;
    let mut hit = 0usize;
    for i in 0..h * w {
        let (y, x) = (i / w, i % w);
        if !neighbours4(y, x, h, w).any(|j| labels[j] != labels[i]) {
            continue;
        }
        total += 1;
        let found = (y.saturating_sub(tolerance)..=(y + tolerance).min(h - 1)).any(|yy| {
            (x.saturating_sub(tolerance)..=(x + tolerance).min(w - 1)).any(|xx| sp_edge[yy * w + xx])
        });
        if found {
            hit += 1;
        }
    }
    Ok(if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(h: usize, w: usize, rgb: [f64; 3]) -> Image {
        Image::from_fn(h, w, |_, _| rgb).unwrap()
    }

    fn two_tone(h: usize, w: usize) -> (Image, LabelMask) {
        let img = Image::from_fn(h, w, |_, x| {
            if x < w / 2 {
                [0.85, 0.2, 0.15]
            } else {
                [0.1, 0.3, 0.8]
            }
        })
        .unwrap();
        let labels = (0..h * w).map(|i| Some(u8::from(i % w >= w / 2))).collect();
        (img, LabelMask::new(h, w, 2, labels).unwrap())
    }

    #[test]
    fn single_segment_request() {
        let img = Image::from_fn(20, 30, |y, x| [y as f64 / 20.0, x as f64 / 30.0, 0.5]).unwrap();
        let map = oversegment(&img, 1, 0).unwrap();
        assert_eq!(map.segment_count(), 1);
        assert!(map.segment_ids().iter().all(|&s| s == 0));
    }

    #[test]
    fn uniform_image_gives_near_regular_grid() {
        let map = oversegment(&uniform(60, 60, [0.4, 0.5, 0.6]), 36, 0).unwrap();
        assert!(map.is_four_connected());
        let k = map.segment_count() as f64;
        assert!((k - 36.0).abs() <= 0.3 * 36.0, "got {k} segments");
        let sizes = segment_sizes(&map);
        assert!(sizes.iter().all(|s| (50..=200).contains(s)), "{sizes:?}");
    }

    #[test]
    fn two_tone_segments_respect_the_edge() {
        let (img, truth) = two_tone(60, 60);
        let map = oversegment(&img, 8, 3).unwrap();
        assert!(map.is_four_connected());
        for s in 0..map.segment_count() {
            let mut tones = [0usize; 2];
            for (i, &id) in map.segment_ids().iter().enumerate() {
                if id == s {
                    tones[usize::from(truth.labels()[i].unwrap())] += 1;
                }
            }
            assert_eq!(tones.iter().min(), Some(&0), "segment {s} straddles: {tones:?}");
        }
        assert!(boundary_recall(&map, &truth, 2).unwrap() >= 0.95);
    }

    #[test]
    fn out_of_range_requests() {
        let img = uniform(4, 4, [0.5; 3]);
        assert!(oversegment(&img, 0, 0).is_err());
        assert!(oversegment(&img, 17, 0).is_err());
        assert!(oversegment(&img, 16, 0).is_ok());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let img = Image::from_fn(32, 32, |y, x| {
            let v = ((y * 7 + x * 13) % 17) as f64 / 17.0;
            [v, 1.0 - v, 0.5]
        })
        .unwrap();
        assert_eq!(oversegment(&img, 20, 9).unwrap(), oversegment(&img, 20, 9).unwrap());
    }

    #[test]
    fn segment_size_cases() {
        let one = SuperpixelMap::from_ids(2, 2, vec![0; 4]).unwrap();
        assert_eq!(segment_sizes(&one), vec![4]);
        let halves: Vec<usize> = (0..16).map(|i| usize::from(i % 4 >= 2)).collect();
        let map = SuperpixelMap::from_ids(4, 4, halves).unwrap();
        assert_eq!(segment_sizes(&map), vec![8, 8]);
    }

    #[test]
    fn from_ids_rejects_disconnected_or_gapped() {
        assert!(SuperpixelMap::from_ids(1, 3, vec![0, 1, 0]).is_err());
        assert!(SuperpixelMap::from_ids(1, 3, vec![0, 0, 2]).is_err());
        let split = SuperpixelMap::from_regions(1, 3, &[0, 1, 0]).unwrap();
        assert_eq!(split.segment_ids(), &[0, 1, 2]);
    }

    #[test]
    fn lab_reference_points() {
        let white = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        assert_eq!(srgb_to_lab([0.0; 3])[0], 0.0);
    }
}
