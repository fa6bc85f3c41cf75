//! PNG round trips for the array types the pipeline moves around: 8-bit RGB
//! images, 16-bit grayscale depth (with a plain-text range sidecar so the
//! quantization is invertible), and binary masks. All writes go through a
//! temp file and rename.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::{Error, Result};

fn write_atomic(path: &Path, img: DynamicImage) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        img.write_to(&mut w, ImageFormat::Png).map_err(|e| Error::image(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::image(path, e))
}

/// Save a (3, H, W) image with values in [0, 1] as 8-bit RGB.
pub fn save_image(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::InvalidArgument(format!("expected 3 channels, got {c}")));
    }
    if !image.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("image values must lie in [0, 1]".into()));
    }
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb([
            (image[[0, i, j]] * 255.0).round() as u8,
            (image[[1, i, j]] * 255.0).round() as u8,
            (image[[2, i, j]] * 255.0).round() as u8,
        ])
    });
    write_atomic(path, DynamicImage::ImageRgb8(buf))
}

pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32).0[c] as f64 / 255.0
    }))
}

fn range_sidecar(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".range");
    PathBuf::from(p)
}

/// Save an (H, W) depth map as 16-bit grayscale, quantized over its own
/// min..max and recorded in a `<file>.png.range` sidecar.
pub fn save_depth(path: &Path, depth: &Array2<f64>) -> Result<()> {
    if !depth.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("depth must be finite".into()));
    }
    let (h, w) = depth.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("depth map is empty".into()));
    }
    let lo = depth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = depth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = depth[[y as usize, x as usize]];
        let q = if span > 0.0 { ((v - lo) / span * 65535.0).round() as u16 } else { 0 };
        Luma([q])
    });
    write_atomic(path, DynamicImage::ImageLuma16(buf))?;
    let sidecar = range_sidecar(path);
    let tmp = range_sidecar(&sidecar);
    fs::write(&tmp, format!("{lo:.17e} {hi:.17e}\n")).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &sidecar).map_err(|e| Error::io(&sidecar, e))
}

pub fn load_depth(path: &Path) -> Result<Array2<f64>> {
    let sidecar = range_sidecar(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let mut parts = text.split_whitespace();
    let parse = |s: Option<&str>| -> Result<f64> {
        s.and_then(|t| t.parse().ok()).ok_or_else(|| {
            Error::Dataset(format!("{} does not hold two floats", sidecar.display()))
        })
    };
    let lo = parse(parts.next())?;
    let hi = parse(parts.next())?;
    if !(lo.is_finite() && hi.is_finite() && hi >= lo) {
        return Err(Error::Dataset(format!("{} holds an invalid range", sidecar.display())));
    }
    let img = decode(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let span = hi - lo;
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        lo + img.get_pixel(j as u32, i as u32).0[0] as f64 / 65535.0 * span
    }))
}

pub fn save_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255u8 } else { 0 }])
    });
    write_atomic(path, DynamicImage::ImageLuma8(buf))
}

pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = decode(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0] >= 128
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    #[test]
    fn image_round_trip_stays_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Array3::from_shape_fn((3, 9, 7), |(c, i, j)| {
            ((c * 31 + i * 7 + j * 3) % 97) as f64 / 96.0
        });
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.dim(), (3, 9, 7));
        let worst = img
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "round trip drifted by {worst}");

        // A second trip through the quantizer is exact.
        save_image(&path, &back).unwrap();
        assert_eq!(load_image(&path).unwrap(), back);
    }

    #[test]
    fn depth_round_trip_stays_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.png");
        let depth =
            Array2::from_shape_fn((8, 8), |(i, j)| 0.9 + 0.2 * ((i * 8 + j) as f64 / 63.0));
        save_depth(&path, &depth).unwrap();
        let back = load_depth(&path).unwrap();
        let worst = depth
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.2 / 65535.0 * 0.5 + 1e-12, "depth drifted by {worst}");

        // Constant maps survive despite their empty range.
        let flat = Array2::from_elem((4, 4), 1.25);
        save_depth(&path, &flat).unwrap();
        assert_eq!(load_depth(&path).unwrap(), flat);
    }

    #[test]
    fn mask_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask = Array2::from_shape_fn((6, 5), |(i, j)| (i + j) % 3 != 0);
        save_mask(&path, &mask).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
    }

    #[test]
    fn errors_name_the_offending_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.png");
        std::fs::write(&path, b"this is not a png").unwrap();
        let err = load_image(&path).unwrap_err().to_string();
        assert!(err.contains("broken.png"), "error should name the file: {err}");

        let missing_sidecar = dir.path().join("depth.png");
        let depth = Array2::from_elem((2, 2), 1.0);
        save_depth(&missing_sidecar, &depth).unwrap();
        std::fs::remove_file(range_sidecar(&missing_sidecar)).unwrap();
        assert!(load_depth(&missing_sidecar).is_err());
    }
}
