//! Image, label and prediction containers shared by every stage of the pipeline.

use crate::error::{Error, Result};

/// Encoding of an unlabelled pixel in indexed mask files.
pub const UNLABELLED_VALUE: u8 = 255;

/// Tolerance for the per-pixel normalization of segmentation probabilities.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-9;

/// An RGB image with channel values in `[0, 1]`, stored channel-planar (`3 × H × W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    /// Builds an image from planar data (`R` plane, then `G`, then `B`).
    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "image value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from a per-pixel function returning `[r, g, b]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let plane = height * width;
        let mut data = vec![0.0; Self::CHANNELS * plane];
        for y in 0..height {
            for x in 0..width {
                let rgb = f(y, x);
                for (c, v) in rgb.into_iter().enumerate() {
                    data[c * plane + y * width + x] = v;
                }
            }
        }
        Self::from_planar(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn planar(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.pixel_count();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        let plane = self.pixel_count();
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }
}

/// Per-pixel class ids with an explicit unlabelled state.
///
/// Used for scribble maps, propagated pseudo-masks and full ground truth alike.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    class_count: usize,
    labels: Vec<Option<u8>>,
}

impl LabelMask {
    pub fn new(
        height: usize,
        width: usize,
        class_count: usize,
        labels: Vec<Option<u8>>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask must be at least 1x1, got {height}x{width}"
            )));
        }
        if !(2..usize::from(UNLABELLED_VALUE)).contains(&class_count) {
            return Err(Error::InvalidArgument(format!(
                "class count must be in 2..255, got {class_count}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "expected {} labels for a {height}x{width} mask, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| usize::from(l) >= class_count) {
            return Err(Error::MalformedMask(format!(
                "label {bad} not below class count {class_count}"
            )));
        }
        Ok(Self {
            height,
            width,
            class_count,
            labels,
        })
    }

    pub fn unlabelled(height: usize, width: usize, class_count: usize) -> Result<Self> {
        Self::new(height, width, class_count, vec![None; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[Option<u8>] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Option<u8> {
        self.labels[y * self.width + x]
    }

    pub fn labelled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn is_fully_labelled(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    /// Pixel count per class (unlabelled pixels excluded).
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for l in self.labels.iter().flatten() {
            counts[usize::from(*l)] += 1;
        }
        counts
    }

    pub fn same_size(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    pub(crate) fn ensure_same_size(&self, other: &LabelMask, what: &str) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Per-pixel class probabilities, `C × H × W`, each pixel summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    class_count: usize,
    height: usize,
    width: usize,
    probabilities: Vec<f64>,
}

impl SegmentationOutput {
    pub fn new(
        class_count: usize,
        height: usize,
        width: usize,
        probabilities: Vec<f64>,
    ) -> Result<Self> {
        if probabilities.len() != class_count * height * width {
            return Err(Error::DimensionMismatch(format!(
                "expected {} probabilities, got {}",
                class_count * height * width,
                probabilities.len()
            )));
        }
        let plane = height * width;
        for p in 0..plane {
            let mut sum = 0.0;
            for c in 0..class_count {
                let v = probabilities[c * plane + p];
                if v.is_nan() || v < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "negative or NaN probability {v} at pixel {p}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "probabilities at pixel {p} sum to {sum}"
                )));
            }
        }
        Ok(Self {
            class_count,
            height,
            width,
            probabilities,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn probability(&self, class: usize, pixel: usize) -> f64 {
        self.probabilities[class * self.height * self.width + pixel]
    }
}

/// Predicted class centroids, one row of dimension `M` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    class_count: usize,
    dim: usize,
    values: Vec<f64>,
}

impl Centroids {
    pub fn new(class_count: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != class_count * dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {class_count}x{dim} centroid matrix, got {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite centroid entry".into()));
        }
        Ok(Self {
            class_count,
            dim,
            values,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.values[class * self.dim..(class + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-pixel feature vectors stored dimension-planar (`M × H × W`).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures {
    dim: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl PixelFeatures {
    pub fn new(dim: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dim * height * width {
            return Err(Error::DimensionMismatch(format!(
                "expected {} feature values, got {}",
                dim * height * width,
                values.len()
            )));
        }
        Ok(Self {
            dim,
            height,
            width,
            values,
        })
    }

    /// Softmax probabilities, optionally followed by the normalized RGB of each pixel.
    pub fn from_segmentation(seg: &SegmentationOutput, nrgb: Option<&NormalizedRgb>) -> Result<Self> {
        let mut values = seg.probabilities().to_vec();
        let mut dim = seg.class_count();
        if let Some(n) = nrgb {
            if n.height() != seg.height() || n.width() != seg.width() {
                return Err(Error::DimensionMismatch(
                    "normalized RGB field does not match segmentation size".into(),
                ));
            }
            values.extend_from_slice(n.planar());
            dim += 3;
        }
        Self::new(dim, seg.height(), seg.width(), values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn feature(&self, pixel: usize) -> Vec<f64> {
        let plane = self.pixel_count();
        (0..self.dim).map(|m| self.values[m * plane + pixel]).collect()
    }
}

/// Chromaticity field: every pixel's RGB divided by its channel sum.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRgb {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl NormalizedRgb {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Planar `3 × H × W` values.
    pub fn planar(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }
}

/// Maps each pixel `(R, G, B)` to `(R, G, B) / (R + G + B)`; black pixels map to zero.
pub fn normalized_rgb(image: &Image) -> NormalizedRgb {
    let plane = image.pixel_count();
    let src = image.planar();
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        let (r, g, b) = (src[i], src[plane + i], src[2 * plane + i]);
        let sum = r + g + b;
        if sum > 0.0 {
            data[i] = r / sum;
            data[plane + i] = g / sum;
            data[2 * plane + i] = b / sum;
        }
    }
    NormalizedRgb {
        height: image.height(),
        width: image.width(),
        data,
    }
}
