//! PNG/JPEG reading and writing for planes. Values are normalised to [0, 1]
//! (8-bit divided by 255, 16-bit by 65535); writes are 8-bit with
//! round-half-up quantisation.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{MatteError, Result};
use crate::plane::{MattingInput, Plane};
use crate::tensor::Real;

fn corrupt(path: &Path, e: impl std::fmt::Display) -> MatteError {
    MatteError::CorruptImage { path: path.to_path_buf(), reason: e.to_string() }
}

fn rgb_plane(img: &DynamicImage) -> Plane<f32> {
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    Plane::from_fn(3, h, w, |c, y, x| raw[(y * w + x) * 3 + c].clamp(0.0, 1.0)).expect("decoded pixels are finite")
}

fn gray_plane(img: &DynamicImage) -> Plane<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
        }
        _ => img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
    };
    Plane::new(1, h, w, data).expect("decoded pixels are finite")
}

fn decode(bytes: &[u8], path: &Path) -> Result<DynamicImage> {
    if bytes.is_empty() {
        return Err(corrupt(path, "empty file"));
    }
    image::load_from_memory(bytes).map_err(|e| corrupt(path, e))
}

/// Reads any supported image as RGB.
pub fn load_rgb(path: &Path) -> Result<Plane<f32>> {
    let bytes = std::fs::read(path).map_err(|e| corrupt(path, e))?;
    Ok(rgb_plane(&decode(&bytes, path)?))
}

/// Reads any supported image as a single gray channel.
pub fn load_gray(path: &Path) -> Result<Plane<f32>> {
    let bytes = std::fs::read(path).map_err(|e| corrupt(path, e))?;
    Ok(gray_plane(&decode(&bytes, path)?))
}

pub fn decode_rgb(bytes: &[u8]) -> Result<Plane<f32>> {
    Ok(rgb_plane(&decode(bytes, Path::new("<upload>"))?))
}

pub fn decode_gray(bytes: &[u8]) -> Result<Plane<f32>> {
    Ok(gray_plane(&decode(bytes, Path::new("<upload>"))?))
}

/// Image dimensions `(height, width)` without decoding pixels.
pub fn probe_dims(bytes: &[u8]) -> Result<(usize, usize)> {
    let reader = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| corrupt(Path::new("<upload>"), e))?;
    let (w, h) = reader.into_dimensions().map_err(|e| corrupt(Path::new("<upload>"), e))?;
    Ok((h as usize, w as usize))
}

/// Loads an image/trimap pair, snapping trimap gray levels.
pub fn load_input(image: &Path, trimap: &Path) -> Result<MattingInput<f32>> {
    MattingInput::with_snapped_trimap(load_rgb(image)?, load_gray(trimap)?)
}

/// `round(v * 255)` with halves rounded up, clamped to [0, 255].
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn gray_image<T: Real>(plane: &Plane<T>) -> Result<GrayImage> {
    if plane.channels() != 1 {
        return Err(MatteError::ShapeMismatch(format!("gray output needs 1 channel, got {}", plane.channels())));
    }
    let (h, w) = plane.dims();
    let raw = plane.data().iter().map(|v| quantize(v.f64())).collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
}

fn rgb_image<T: Real>(plane: &Plane<T>) -> Result<RgbImage> {
    if plane.channels() != 3 {
        return Err(MatteError::ShapeMismatch(format!("RGB output needs 3 channels, got {}", plane.channels())));
    }
    let (h, w) = plane.dims();
    let mut raw = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                raw.push(quantize(plane.get(c, y, x).f64()));
            }
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
}

fn png_bytes(img: DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| MatteError::Io(std::io::Error::other(e)))?;
    Ok(out.into_inner())
}

pub fn encode_gray_png<T: Real>(plane: &Plane<T>) -> Result<Vec<u8>> {
    png_bytes(DynamicImage::ImageLuma8(gray_image(plane)?))
}

pub fn encode_rgb_png<T: Real>(plane: &Plane<T>) -> Result<Vec<u8>> {
    png_bytes(DynamicImage::ImageRgb8(rgb_image(plane)?))
}

pub fn save_gray_png<T: Real>(path: &Path, plane: &Plane<T>) -> Result<()> {
    Ok(std::fs::write(path, encode_gray_png(plane)?)?)
}

pub fn save_rgb_png<T: Real>(path: &Path, plane: &Plane<T>) -> Result<()> {
    Ok(std::fs::write(path, encode_rgb_png(plane)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(-0.2), 0);
    }

    #[test]
    fn gray_round_trip_and_constant_half() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        save_gray_png(&path, &Plane::filled(1, 5, 7, 0.5f32)).unwrap();
        let back = load_gray(&path).unwrap();
        assert_eq!(back.dims(), (5, 7));
        assert!(back.data().iter().all(|v| (v - 0.5).abs() <= 1.0 / 255.0));
    }

    #[test]
    fn sixteen_bit_gray_is_scaled() {
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 1, vec![0u16, 65535]).unwrap();
        let bytes = png_bytes(DynamicImage::ImageLuma16(img)).unwrap();
        assert_eq!(decode_gray(&bytes).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn corrupt_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not an image").unwrap();
        match load_rgb(&path) {
            Err(MatteError::CorruptImage { path: p, .. }) => assert_eq!(p, path),
            other => panic!("{other:?}"),
        }
        assert!(decode_rgb(&[]).is_err());
    }

    #[test]
    fn rgb_round_trip() {
        let p = Plane::from_fn(3, 4, 6, |c, y, x| ((c * 40 + y * 20 + x * 10) as f32) / 255.0).unwrap();
        let back = decode_rgb(&encode_rgb_png(&p).unwrap()).unwrap();
        let err = p.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-6);
        assert_eq!(probe_dims(&encode_rgb_png(&p).unwrap()).unwrap(), (4, 6));
    }
}
