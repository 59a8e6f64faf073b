use std::io::Cursor;
use std::path::Path;

use super::{DataError, Manifest, StudySample};

/// At most this many images per study reach the encoder.
pub const MAX_STUDY_IMAGES: usize = 4;

/// 8-bit single-channel image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if width == 0 || height == 0 {
            return Err(DataError::Contract(format!("image extents must be positive, got {width}x{height}")));
        }
        if width * height != pixels.len() {
            return Err(DataError::Contract(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels).expect("from_fn with positive extents")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Nearest-neighbour resample; source index is `floor(i * src / dst)`.
    fn resample(&self, width: usize, height: usize) -> GrayImage {
        GrayImage::from_fn(width, height, |x, y| {
            self.get(x * self.width / width, y * self.height / height)
        })
    }
}

fn skip_ws_and_comments(bytes: &[u8], mut i: usize) -> usize {
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn header_int(bytes: &[u8], i: usize) -> Result<(usize, usize), DataError> {
    let start = skip_ws_and_comments(bytes, i);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(DataError::Decode("malformed PGM header".into()));
    }
    let v = std::str::from_utf8(&bytes[start..end])
        .unwrap()
        .parse::<usize>()
        .map_err(|e| DataError::Decode(format!("PGM header: {e}")))?;
    Ok((v, end))
}

/// Binary PGM (`P5`) with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, DataError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(DataError::UnsupportedFormat("not a binary PGM (P5)".into()));
    }
    let (width, i) = header_int(bytes, 2)?;
    let (height, i) = header_int(bytes, i)?;
    let (maxval, i) = header_int(bytes, i)?;
    if maxval != 255 {
        return Err(DataError::UnsupportedFormat(format!("PGM maxval {maxval} (only 255 is supported)")));
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(DataError::Decode("PGM header not terminated".into()));
    }
    let data = &bytes[i + 1..];
    let n = width * height;
    if data.len() < n {
        return Err(DataError::Decode(format!("PGM payload truncated: {} of {n} bytes", data.len())));
    }
    GrayImage::new(width, height, data[..n].to_vec())
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

/// 8-bit grayscale PNG; every other colour type or depth is rejected.
pub fn decode_png(bytes: &[u8]) -> Result<GrayImage, DataError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| DataError::Decode(e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Grayscale || depth != png::BitDepth::Eight {
        return Err(DataError::UnsupportedFormat(format!("PNG {color:?}/{depth:?} (need 8-bit grayscale)")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| DataError::Decode("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| DataError::Decode(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut pixels = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        pixels.extend_from_slice(&row[..w]);
    }
    GrayImage::new(w, h, pixels)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        Err(DataError::UnsupportedFormat(format!("{}: neither PGM (P5) nor PNG", path.display())))
    }
}

/// The first `min(4, n)` image paths, in manifest order.
pub fn select_images(sample: &StudySample) -> &[String] {
    let n = sample.image_paths.len().min(MAX_STUDY_IMAGES);
    &sample.image_paths[..n]
}

/// Rescale each image to `target_height` (aspect preserved, nearest
/// neighbour) and lay them out left to right.
pub fn stitch_horizontal(images: &[GrayImage], target_height: usize) -> Result<GrayImage, DataError> {
    if images.is_empty() || images.len() > MAX_STUDY_IMAGES {
        return Err(DataError::Contract(format!(
            "stitching needs 1..={MAX_STUDY_IMAGES} images, got {}",
            images.len()
        )));
    }
    if target_height == 0 {
        return Err(DataError::Contract("target height must be positive".into()));
    }
    let scaled: Vec<GrayImage> = images
        .iter()
        .map(|img| {
            // round(w * th / h), at least one column
            let w = ((2 * img.width * target_height + img.height) / (2 * img.height)).max(1);
            img.resample(w, target_height)
        })
        .collect();
    let total: usize = scaled.iter().map(|s| s.width).sum();
    let mut pixels = Vec::with_capacity(total * target_height);
    for y in 0..target_height {
        for s in &scaled {
            pixels.extend_from_slice(&s.pixels[y * s.width..(y + 1) * s.width]);
        }
    }
    GrayImage::new(total, target_height, pixels)
}

/// Nearest-neighbour resample to `side × side`, aspect not preserved.
pub fn resize_to_encoder(image: &GrayImage, side: usize) -> Result<GrayImage, DataError> {
    if side == 0 {
        return Err(DataError::Contract("encoder side must be positive".into()));
    }
    Ok(image.resample(side, side))
}

/// Stitch (at the encoder side as target height) and resize to the encoder
/// resolution.
pub fn encoder_input(images: &[GrayImage], side: usize) -> Result<GrayImage, DataError> {
    let stitched = stitch_horizontal(images, side)?;
    resize_to_encoder(&stitched, side)
}

/// Decode the selected (first four) images of a study.
pub fn load_study_images(manifest: &Manifest, sample: &StudySample) -> Result<Vec<GrayImage>, DataError> {
    select_images(sample)
        .iter()
        .map(|p| load_image(manifest.resolve(p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    #[test]
    fn pgm_direct_payload() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 255]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.pixels(), &[0, 64, 128, 255]);
    }

    #[test]
    fn pgm_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8]);
        assert_eq!(decode_pgm(&bytes).unwrap().pixels(), &[9, 8]);
    }

    #[test]
    fn pgm_16bit_unsupported() {
        let mut bytes = b"P5\n2 2\n65535\n".to_vec();
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_pgm(&bytes), Err(DataError::UnsupportedFormat(_))));
    }

    #[test]
    fn pgm_truncated() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2]);
        assert!(matches!(decode_pgm(&bytes), Err(DataError::Decode(_))));
    }

    #[test]
    fn png_and_pgm_decode_identically() {
        let img = GrayImage::from_fn(4, 4, |x, y| (16 * (y * 4 + x)) as u8);
        let mut png_bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut png_bytes, 4, 4);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(img.pixels()).unwrap();
        }
        let from_png = decode_png(&png_bytes).unwrap();
        let from_pgm = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(from_png, from_pgm);
        assert_eq!(from_png, img);
    }

    #[test]
    fn rgb_png_unsupported() {
        let mut png_bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut png_bytes, 1, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[1, 2, 3]).unwrap();
        }
        assert!(matches!(decode_png(&png_bytes), Err(DataError::UnsupportedFormat(_))));
    }

    fn sample(n: usize) -> StudySample {
        StudySample {
            study_id: "s".into(),
            image_paths: (1..=n).map(|i| format!("i{i}")).collect(),
            findings: Some("x".into()),
            impressions: None,
            split: Split::Training,
        }
    }

    #[test]
    fn selection_caps_at_four() {
        assert_eq!(select_images(&sample(1)), &["i1"]);
        assert_eq!(select_images(&sample(6)), &["i1", "i2", "i3", "i4"]);
        assert_eq!(select_images(&sample(4)).len(), 4);
    }

    #[test]
    fn stitch_two_without_rescale() {
        let a = GrayImage::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let b = GrayImage::new(2, 2, vec![5, 6, 7, 8]).unwrap();
        let s = stitch_horizontal(&[a, b], 2).unwrap();
        assert_eq!((s.width(), s.height()), (4, 2));
        assert_eq!(s.pixels(), &[1, 2, 5, 6, 3, 4, 7, 8]);
    }

    #[test]
    fn stitch_downscales_by_nearest_neighbour() {
        // 8 wide, 4 high; halving keeps even rows and columns
        let img = GrayImage::from_fn(8, 4, |x, y| (y * 8 + x) as u8);
        let s = stitch_horizontal(&[img], 2).unwrap();
        assert_eq!((s.width(), s.height()), (4, 2));
        assert_eq!(s.pixels(), &[0, 2, 4, 6, 16, 18, 20, 22]);
    }

    #[test]
    fn stitch_mixed_heights() {
        let short = GrayImage::from_fn(3, 2, |_, _| 1);
        let tall = GrayImage::from_fn(3, 4, |_, _| 2);
        let s = stitch_horizontal(&[short, tall], 4).unwrap();
        assert_eq!(s.width(), 6 + 3);
        assert_eq!(s.height(), 4);
        assert_eq!(s.get(5, 3), 1);
        assert_eq!(s.get(6, 0), 2);
    }

    #[test]
    fn stitch_rejects_empty() {
        assert!(matches!(stitch_horizontal(&[], 4), Err(DataError::Contract(_))));
    }

    #[test]
    fn resize_examples() {
        let sq = GrayImage::from_fn(3, 3, |x, y| (x + 3 * y) as u8);
        assert_eq!(resize_to_encoder(&sq, 3).unwrap(), sq);

        let two = GrayImage::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let up = resize_to_encoder(&two, 4).unwrap();
        assert_eq!(up.pixels(), &[1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);

        // 2 wide, 4 high: rows floor(i*4/2) = {0, 2}, columns unchanged
        let tall = GrayImage::from_fn(2, 4, |x, y| (10 * y + x) as u8);
        let down = resize_to_encoder(&tall, 2).unwrap();
        assert_eq!(down.pixels(), &[0, 1, 20, 21]);
    }
}
