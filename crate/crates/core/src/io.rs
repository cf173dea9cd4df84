//! PNG reading and writing for images, label masks and superpixel maps.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::superpixels::SuperpixelMap;
use crate::types::{Image, LabelMask, UNLABELLED_VALUE};

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(u) => Error::UnsupportedFormat {
            path: path.into(),
            message: u.to_string(),
        },
        other => Error::Decode {
            path: path.into(),
            message: other.to_string(),
        },
    })
}

fn save(path: &Path, img: DynamicImage) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: path.into(),
            message: e.to_string(),
        })
}

/// Reads an 8-bit RGB (or RGBA, alpha ignored) raster into `[0, 1]` values.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let rgb: RgbImage = match open(path)? {
        DynamicImage::ImageRgb8(img) => img,
        DynamicImage::ImageRgba8(img) => DynamicImage::ImageRgba8(img).to_rgb8(),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.into(),
                message: format!("expected 8-bit RGB, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} is a zero-size image",
            path.display()
        )));
    }
    Image::from_fn(h, w, |y, x| {
        let Rgb(p) = *rgb.get_pixel(x as u32, y as u32);
        p.map(|v| f64::from(v) / 255.0)
    })
}

/// Writes an image as 8-bit RGB, rounding each channel to the nearest level.
pub fn save_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let buf = ImageBuffer::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let rgb = image.rgb(y as usize, x as usize);
        Rgb(rgb.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    });
    save(path.as_ref(), DynamicImage::ImageRgb8(buf))
}

/// Reads a single-channel indexed mask; value 255 marks unlabelled pixels.
pub fn load_mask(path: impl AsRef<Path>, class_count: usize) -> Result<LabelMask> {
    let path = path.as_ref();
    let gray: GrayImage = match open(path)? {
        DynamicImage::ImageLuma8(img) => img,
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.into(),
                message: format!("expected 8-bit single-channel mask, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut labels = Vec::with_capacity(w * h);
    for &v in gray.as_raw() {
        if v == UNLABELLED_VALUE {
            labels.push(None);
        } else if usize::from(v) < class_count {
            labels.push(Some(v));
        } else {
            return Err(Error::MalformedMask(format!(
                "{}: value {v} is neither a class below {class_count} nor {UNLABELLED_VALUE}",
                path.display()
            )));
        }
    }
    LabelMask::new(h, w, class_count, labels)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    let raw: Vec<u8> = mask
        .labels()
        .iter()
        .map(|l| l.unwrap_or(UNLABELLED_VALUE))
        .collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("mask buffer matches its dimensions");
    save(path.as_ref(), DynamicImage::ImageLuma8(buf))
}

/// Writes segment ids as 16-bit grayscale.
pub fn save_superpixels(path: impl AsRef<Path>, map: &SuperpixelMap) -> Result<()> {
    if map.segment_count() > usize::from(u16::MAX) + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} segments do not fit in 16 bits",
            map.segment_count()
        )));
    }
    let raw: Vec<u16> = map.segment_ids().iter().map(|&s| s as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, raw)
            .expect("segment buffer matches its dimensions");
    save(path.as_ref(), DynamicImage::ImageLuma16(buf))
}

/// Reads a 16-bit (or 8-bit) grayscale segment-id map.
pub fn load_superpixels(path: impl AsRef<Path>) -> Result<SuperpixelMap> {
    let path = path.as_ref();
    let (w, h, ids): (usize, usize, Vec<usize>) = match open(path)? {
        DynamicImage::ImageLuma16(img) => (
            img.width() as usize,
            img.height() as usize,
            img.as_raw().iter().map(|&v| usize::from(v)).collect(),
        ),
        DynamicImage::ImageLuma8(img) => (
            img.width() as usize,
            img.height() as usize,
            img.as_raw().iter().map(|&v| usize::from(v)).collect(),
        ),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.into(),
                message: format!("expected grayscale segment map, found {:?}", other.color()),
            })
        }
    };
    SuperpixelMap::from_ids(h, w, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_rgb(dir: &Path, name: &str, w: u32, h: u32, value: [u8; 3]) -> std::path::PathBuf {
        let path = dir.join(name);
        RgbImage::from_pixel(w, h, Rgb(value)).save(&path).unwrap();
        path
    }

    fn write_gray(dir: &Path, name: &str, raw: Vec<u8>, w: u32, h: u32) -> std::path::PathBuf {
        let path = dir.join(name);
        GrayImage::from_raw(w, h, raw).unwrap().save(&path).unwrap();
        path
    }

    #[test]
    fn black_white_and_midtone() {
        let dir = tempfile::tempdir().unwrap();
        let black = load_image(write_rgb(dir.path(), "b.png", 2, 2, [0, 0, 0])).unwrap();
        assert!(black.planar().iter().all(|&v| v == 0.0));
        let white = load_image(write_rgb(dir.path(), "w.png", 2, 2, [255, 255, 255])).unwrap();
        assert!(white.planar().iter().all(|&v| v == 1.0));
        let mid = load_image(write_rgb(dir.path(), "m.png", 1, 1, [128, 128, 128])).unwrap();
        assert_eq!(mid.rgb(0, 0)[0], 128.0 / 255.0);
        assert!((mid.rgb(0, 0)[1] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image("/nonexistent/nothing.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn sixteen_bit_image_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_pixel(2, 2, Rgb([1, 2, 3]));
        DynamicImage::ImageRgb16(buf).save(&path).unwrap();
        assert!(matches!(
            load_image(&path).unwrap_err(),
            Error::UnsupportedFormat { .. }
        ));
    }

    #[test]
    fn garbage_file_fails_to_decode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.png");
        std::fs::write(&path, b"definitely not a png").unwrap();
        assert!(load_image(&path).is_err());
    }

    #[test]
    fn mask_sentinel_and_zero() {
        let dir = tempfile::tempdir().unwrap();
        let all_unl = load_mask(write_gray(dir.path(), "u.png", vec![255; 4], 2, 2), 3).unwrap();
        assert_eq!(all_unl.labelled_count(), 0);
        let zeros = load_mask(write_gray(dir.path(), "z.png", vec![0; 4], 2, 2), 3).unwrap();
        assert!(zeros.labels().iter().all(|&l| l == Some(0)));
    }

    #[test]
    fn mask_value_out_of_range_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_gray(dir.path(), "bad.png", vec![0, 7, 1, 255], 2, 2);
        assert!(matches!(
            load_mask(path, 3).unwrap_err(),
            Error::MalformedMask(_)
        ));
    }

    #[test]
    fn superpixel_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = SuperpixelMap::from_ids(2, 3, vec![0, 0, 1, 2, 2, 1]).unwrap();
        let path = dir.path().join("sp.png");
        save_superpixels(&path, &map).unwrap();
        assert_eq!(load_superpixels(&path).unwrap(), map);
    }
}
