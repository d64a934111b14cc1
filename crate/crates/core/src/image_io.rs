//! RGB images, binary PPM (P6) encoding and seeded synthetic images.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("not a binary PPM: expected magic \"P6\"")]
    BadMagic,
    #[error("malformed PPM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PPM maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("truncated PPM payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image extents must be at least {min}, got {width}x{height}")]
    TooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("crop size {size} exceeds image {width}x{height}")]
    CropTooLarge {
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("tensor of shape {0} is not a single RGB image")]
    NotRgb(Shape),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Interleaved RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * 3, "RGB buffer length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[1, 3, H, W]` planar tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let shape = Shape::new(1, 3, self.height, self.width).expect("non-empty image");
        Tensor::from_fn(shape, |_, c, y, x| {
            T::from_f64_lossy(f64::from(self.data[(y * self.width + x) * 3 + c]))
        })
    }

    /// Converts a `[1, 3, H, W]` tensor back to an image without clamping.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self, ImageError> {
        let s = t.shape();
        if s.n != 1 || s.c != 3 {
            return Err(ImageError::NotRgb(s));
        }
        let mut data = Vec::with_capacity(s.numel());
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..3 {
                    data.push(t.get(0, c, y, x).to_f64_lossless() as f32);
                }
            }
        }
        Ok(Self::new(s.w, s.h, data))
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }
}

/// Parses a binary PPM with maxval 255; values become `raw / 255`.
pub fn read_ppm(bytes: &[u8]) -> Result<Image, ImageError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(ImageError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        skip_whitespace_and_comments(bytes, &mut pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::MalformedHeader(format!(
                "expected {} at byte {start}",
                ["width", "height", "maxval"][i]
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|e| ImageError::MalformedHeader(format!("{text}: {e}")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedHeader(format!(
            "zero extent {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(ImageError::MalformedHeader(
                "missing whitespace after maxval".into(),
            ))
        }
    }
    let expected = width as usize * height as usize * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    Ok(Image::new(width as usize, height as usize, data))
}

fn skip_whitespace_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

/// Encodes as `P6\n<w> <h>\n255\n` followed by `round(clamp(v, 0, 1) * 255)` bytes.
pub fn write_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| quantize(v)));
    out
}

/// Round-half-up to 8 bits.
fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn read_ppm_file(path: &Path) -> Result<Image, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_ppm(&bytes)
}

pub fn write_ppm_file(path: &Path, image: &Image) -> Result<(), ImageError> {
    std::fs::write(path, write_ppm(image)).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Procedural pattern families for synthetic training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Oriented triangle-wave stripes blending two colours.
    Stripes,
    /// Soft colour blobs over a background.
    Blobs,
    /// Two-colour checkerboard with square cells of `cell` pixels.
    Checker { cell: usize },
}

pub const MIN_SYNTH_EXTENT: usize = 8;

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Deterministic procedural image; identical arguments give identical pixels.
///
/// Only IEEE-exact arithmetic is used, so the output does not depend on the
/// platform's math library.
pub fn synth_image(
    seed: u64,
    width: usize,
    height: usize,
    kind: SynthKind,
) -> Result<Image, ImageError> {
    if width < MIN_SYNTH_EXTENT || height < MIN_SYNTH_EXTENT {
        return Err(ImageError::TooSmall {
            width,
            height,
            min: MIN_SYNTH_EXTENT,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(width, height, [0.0; 3]);
    match kind {
        SynthKind::Stripes => {
            let a = random_color(&mut rng);
            let b = random_color(&mut rng);
            let dx: f32 = rng.gen_range(-1.0..1.0);
            let dy: f32 = rng.gen_range(-1.0..1.0);
            let period: f32 = rng.gen_range(3.0..12.0);
            let phase: f32 = rng.gen_range(0.0..period);
            for y in 0..height {
                for x in 0..width {
                    let u = (x as f32 * dx + y as f32 * dy + phase).rem_euclid(period) / period;
                    let tri = 1.0 - (2.0 * u - 1.0).abs();
                    img.set_pixel(x, y, lerp(a, b, tri));
                }
            }
        }
        SynthKind::Blobs => {
            let bg = random_color(&mut rng);
            let count = rng.gen_range(3..7);
            let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..count)
                .map(|_| {
                    let cx = rng.gen_range(0.0..width as f32);
                    let cy = rng.gen_range(0.0..height as f32);
                    let r = rng.gen_range(2.0..(width.min(height) as f32 / 2.5).max(2.5));
                    (cx, cy, r, random_color(&mut rng))
                })
                .collect();
            for y in 0..height {
                for x in 0..width {
                    let mut px = bg;
                    for &(cx, cy, r, color) in &blobs {
                        let d2 = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)) / (r * r);
                        px = lerp(px, color, 1.0 / (1.0 + d2 * d2));
                    }
                    img.set_pixel(x, y, px);
                }
            }
        }
        SynthKind::Checker { cell } => {
            let cell = cell.max(1);
            let a = random_color(&mut rng);
            let b = random_color(&mut rng);
            for y in 0..height {
                for x in 0..width {
                    let odd = (x / cell + y / cell) % 2 == 1;
                    img.set_pixel(x, y, if odd { b } else { a });
                }
            }
        }
    }
    Ok(img)
}

/// Axis-aligned `size`×`size` crop at a seeded, uniformly drawn offset.
pub fn random_crop(image: &Image, size: usize, seed: u64) -> Result<Image, ImageError> {
    let (x0, y0) = crop_offset(image, size, seed)?;
    let mut out = Image::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            out.set_pixel(x, y, image.pixel(x0 + x, y0 + y));
        }
    }
    Ok(out)
}

/// Offset `(x, y)` that [`random_crop`] uses for these arguments.
pub fn crop_offset(image: &Image, size: usize, seed: u64) -> Result<(usize, usize), ImageError> {
    if size == 0 || size > image.width || size > image.height {
        return Err(ImageError::CropTooLarge {
            size,
            width: image.width,
            height: image.height,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.gen_range(0..=image.width - size);
    let y0 = rng.gen_range(0..=image.height - size);
    Ok((x0, y0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn single_red_pixel() {
        let img = read_ppm(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn comments_between_tokens() {
        let plain = read_ppm(b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        let commented =
            read_ppm(b"P6 # magic\n# a comment line\n2 # width\n1\n# before maxval\n255\n\x01\x02\x03\x04\x05\x06")
                .unwrap();
        assert_eq!(plain, commented);
    }

    #[test]
    fn distinct_parse_errors() {
        assert!(matches!(
            read_ppm(b"P3\n1 1\n255\n"),
            Err(ImageError::BadMagic)
        ));
        assert!(matches!(
            read_ppm(b"P6\nx 1\n255\n"),
            Err(ImageError::MalformedHeader(_))
        ));
        assert!(matches!(
            read_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(ImageError::UnsupportedMaxval(65535))
        ));
        assert!(matches!(
            read_ppm(b"P6\n2 2\n255\n\0\0\0"),
            Err(ImageError::Truncated {
                expected: 12,
                found: 3
            })
        ));
    }

    #[test]
    fn zero_image_and_half_rounding() {
        let img = Image::filled(2, 2, [0.0; 3]);
        let bytes = write_ppm(&img);
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert!(bytes[11..].iter().all(|&b| b == 0));
        let bytes = write_ppm(&Image::filled(1, 1, [0.5, 1.5, -0.2]));
        assert_eq!(&bytes[bytes.len() - 3..], &[128, 255, 0]);
    }

    #[test]
    fn write_is_idempotent_after_read() {
        let img = synth_image(3, 16, 12, SynthKind::Blobs).unwrap();
        let once = write_ppm(&img);
        let twice = write_ppm(&read_ppm(&once).unwrap());
        assert_eq!(once, twice);
    }

    proptest! {
        #[test]
        fn ppm_round_trip_is_byte_exact(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
            bytes.extend((0..w * h * 3).map(|_| rng.gen::<u8>()));
            prop_assert_eq!(write_ppm(&read_ppm(&bytes).unwrap()), bytes);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        for kind in [
            SynthKind::Stripes,
            SynthKind::Blobs,
            SynthKind::Checker { cell: 3 },
        ] {
            let a = synth_image(11, 24, 16, kind).unwrap();
            let b = synth_image(11, 24, 16, kind).unwrap();
            assert_eq!(write_ppm(&a), write_ppm(&b));
        }
        assert!(matches!(
            synth_image(1, 7, 16, SynthKind::Stripes),
            Err(ImageError::TooSmall { .. })
        ));
    }

    #[test]
    fn checker_has_four_pixel_cells() {
        let img = synth_image(5, 32, 32, SynthKind::Checker { cell: 4 }).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(img.pixel(x, y), img.pixel((x / 4) * 4, (y / 4) * 4));
                if x + 8 < 32 {
                    assert_eq!(img.pixel(x, y), img.pixel(x + 8, y));
                }
                if y + 8 < 32 {
                    assert_eq!(img.pixel(x, y), img.pixel(x, y + 8));
                }
                if x + 4 < 32 {
                    assert_ne!(img.pixel(x, y), img.pixel(x + 4, y));
                }
                if y + 4 < 32 {
                    assert_ne!(img.pixel(x, y), img.pixel(x, y + 4));
                }
            }
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_images() {
        for kind in [
            SynthKind::Stripes,
            SynthKind::Blobs,
            SynthKind::Checker { cell: 4 },
        ] {
            for s in 0..100u64 {
                let a = write_ppm(&synth_image(s, 32, 32, kind).unwrap());
                let b = write_ppm(&synth_image(s + 1000, 32, 32, kind).unwrap());
                let differing = a[11..]
                    .chunks(3)
                    .zip(b[11..].chunks(3))
                    .filter(|(p, q)| p != q)
                    .count();
                assert!(differing * 100 >= 32 * 32, "{kind:?} seed {s}: {differing}");
            }
        }
    }

    #[test]
    fn full_size_crop_is_identity() {
        let img = synth_image(2, 16, 16, SynthKind::Stripes).unwrap();
        assert_eq!(random_crop(&img, 16, 9).unwrap(), img);
        assert!(matches!(
            random_crop(&img, 17, 9),
            Err(ImageError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn crop_is_contiguous_sub_block() {
        let img = synth_image(4, 40, 24, SynthKind::Blobs).unwrap();
        let (x0, y0) = crop_offset(&img, 10, 77).unwrap();
        let crop = random_crop(&img, 10, 77).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(crop.pixel(x, y), img.pixel(x0 + x, y0 + y));
            }
        }
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 1000 draws over 11 admissible x offsets; chi-square with 10 dof,
        // critical value 23.21 at p = 0.01.
        let img = Image::filled(20, 20, [0.0; 3]);
        let mut counts = [0usize; 11];
        for seed in 0..1000u64 {
            counts[crop_offset(&img, 10, seed).unwrap().0] += 1;
        }
        let expected = 1000.0 / 11.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 23.21, "chi2 = {chi2}, counts = {counts:?}");
    }
}
