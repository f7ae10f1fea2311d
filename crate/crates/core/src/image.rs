//! RGBA images, PNG codecs, the image backend boundary and the deterministic
//! mock renderer used for offline runs.

use std::io::Cursor;

use serde_json::json;
use thiserror::Error;

use crate::backend::BackendError;
use crate::digest::{digest_json, sha256_hex};
use crate::layout::CanvasSpec;
use crate::spatial::MaskRaster;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("png: {0}")]
    Png(String),
}

/// Row-major RGBA, 8 bits per channel.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("digest", &self.digest())
            .finish()
    }
}

impl Image {
    pub fn filled(width: u32, height: u32, rgba: [u8; 4]) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            pixels: rgba.iter().copied().cycle().take(n * 4).collect(),
        }
    }

    pub fn from_rgba(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        let expected = 4 * width as usize * height as usize;
        if pixels.len() != expected {
            return Err(ImageError::DimensionMismatch(format!(
                "{}x{} needs {expected} bytes, got {}",
                width,
                height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn canvas(&self) -> CanvasSpec {
        CanvasSpec::new(self.width, self.height)
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        4 * (y as usize * self.width as usize + x as usize)
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 4] {
        let o = self.offset(x, y);
        self.pixels[o..o + 4].try_into().unwrap()
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgba: [u8; 4]) {
        let o = self.offset(x, y);
        self.pixels[o..o + 4].copy_from_slice(&rgba);
    }

    /// Hex SHA-256 of dimensions and pixel data.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(8 + self.pixels.len());
        bytes.extend_from_slice(&self.width.to_le_bytes());
        bytes.extend_from_slice(&self.height.to_le_bytes());
        bytes.extend_from_slice(&self.pixels);
        sha256_hex(&bytes)
    }

    pub fn to_png(&self) -> Vec<u8> {
        encode_png(self.width, self.height, png::ColorType::Rgba, &self.pixels)
    }

    /// Decodes any 8/16-bit PNG into RGBA8.
    pub fn from_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let (width, height, color, data) = decode_png(bytes)?;
        let pixels = match color {
            png::ColorType::Rgba => data,
            png::ColorType::Rgb => data
                .chunks_exact(3)
                .flat_map(|c| [c[0], c[1], c[2], 255])
                .collect(),
            png::ColorType::Grayscale => data.iter().flat_map(|g| [*g, *g, *g, 255]).collect(),
            png::ColorType::GrayscaleAlpha => data
                .chunks_exact(2)
                .flat_map(|c| [c[0], c[0], c[0], c[1]])
                .collect(),
            png::ColorType::Indexed => {
                return Err(ImageError::Png("palette was not expanded".into()))
            }
        };
        Image::from_rgba(width, height, pixels)
    }
}

fn encode_png(width: u32, height: u32, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width, height);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("in-memory png header");
        writer.write_image_data(data).expect("in-memory png data");
    }
    out
}

fn decode_png(bytes: &[u8]) -> Result<(u32, u32, png::ColorType, Vec<u8>), ImageError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImageError::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageError::Png(e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, info.color_type, buf))
}

/// Single-channel PNG: 0 = keep, 255 = fill.
pub fn mask_to_png(mask: &MaskRaster) -> Vec<u8> {
    let data: Vec<u8> = mask
        .data
        .iter()
        .map(|v| if *v == 1 { 255 } else { 0 })
        .collect();
    encode_png(mask.width, mask.height, png::ColorType::Grayscale, &data)
}

/// Reads a mask PNG; any channel value of 128 or more counts as fill.
pub fn mask_from_png(bytes: &[u8]) -> Result<MaskRaster, ImageError> {
    let (width, height, color, data) = decode_png(bytes)?;
    let stride = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(ImageError::Png("palette was not expanded".into())),
    };
    let values = data
        .chunks_exact(stride)
        .map(|c| u8::from(c[0] >= 128))
        .collect();
    MaskRaster::from_data(width, height, values).map_err(|e| ImageError::Png(e.to_string()))
}

// ---------------------------------------------------------------------------
// Backend boundary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintRequest {
    pub background: Image,
    pub mask: MaskRaster,
    pub reference: Option<Image>,
    pub prompt: String,
    pub seed: u64,
}

impl InpaintRequest {
    pub fn check(&self) -> Result<(), BackendError> {
        if self.mask.width != self.background.width || self.mask.height != self.background.height {
            return Err(BackendError::MaskMismatch(format!(
                "mask is {}x{}, background is {}x{}",
                self.mask.width, self.mask.height, self.background.width, self.background.height
            )));
        }
        if self.mask.is_empty() {
            return Err(BackendError::MaskMismatch("mask is empty".into()));
        }
        Ok(())
    }
}

/// Background generation and image-guided inpainting.
pub trait ImageBackend: Send + Sync {
    fn generate(&self, prompt: &str, canvas: CanvasSpec, seed: u64) -> Result<Image, BackendError>;

    /// Output has the background's dimensions.
    fn inpaint(&self, request: &InpaintRequest) -> Result<Image, BackendError>;
}

/// Deterministic digest-driven renderer.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockImageBackend;

fn rgba(d: &[u8]) -> [u8; 4] {
    [d[0], d[1], d[2], 255]
}

/// 4x4 pattern bit for a pixel at `(x, y)` inside a `w x h` frame.
fn pattern_bit(bits: u16, x: u32, y: u32, w: u32, h: u32) -> bool {
    let cx = (x as u64 * 4 / w as u64) as u32;
    let cy = (y as u64 * 4 / h as u64) as u32;
    bits >> (cy * 4 + cx) & 1 == 1
}

pub fn mock_generate(prompt: &str, canvas: CanvasSpec, seed: u64) -> Image {
    let d = digest_json(&json!({
        "op": "generate",
        "prompt": prompt,
        "width": canvas.width,
        "height": canvas.height,
        "seed": seed,
    }));
    let fill = rgba(&d[0..3]);
    let accent = rgba(&d[3..6]);
    let bits = u16::from_le_bytes([d[6], d[7]]);
    let mut img = Image::filled(canvas.width, canvas.height, fill);
    for y in 0..canvas.height {
        for x in 0..canvas.width {
            if pattern_bit(bits, x, y, canvas.width, canvas.height) {
                img.set_pixel(x, y, accent);
            }
        }
    }
    img
}

pub fn mock_inpaint(request: &InpaintRequest) -> Result<Image, BackendError> {
    request.check()?;
    let d = digest_json(&json!({
        "op": "inpaint",
        "prompt": request.prompt,
        "seed": request.seed,
        "reference": request.reference.as_ref().map(Image::digest),
    }));
    let fill = rgba(&d[0..3]);
    let accent = rgba(&d[3..6]);
    let bits = u16::from_le_bytes([d[6], d[7]]);
    let frame = request.mask.bounding_rect().expect("checked non-empty");
    let (fw, fh) = (frame.width() as u32, frame.height() as u32);
    let mut out = request.background.clone();
    for y in 0..out.height {
        for x in 0..out.width {
            if request.mask.get(x, y) {
                let (lx, ly) = (x - frame.x_min as u32, y - frame.y_min as u32);
                let c = if pattern_bit(bits, lx, ly, fw, fh) {
                    accent
                } else {
                    fill
                };
                out.set_pixel(x, y, c);
            }
        }
    }
    Ok(out)
}

impl ImageBackend for MockImageBackend {
    fn generate(&self, prompt: &str, canvas: CanvasSpec, seed: u64) -> Result<Image, BackendError> {
        if !canvas.is_valid() {
            return Err(BackendError::InvalidRequest(format!("canvas {canvas}")));
        }
        Ok(mock_generate(prompt, canvas, seed))
    }

    fn inpaint(&self, request: &InpaintRequest) -> Result<Image, BackendError> {
        mock_inpaint(request)
    }
}

/// Mock whose inpaint returns the background untouched; exercises the
/// "region unchanged" consistency path.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoopInpaintBackend;

impl ImageBackend for NoopInpaintBackend {
    fn generate(&self, prompt: &str, canvas: CanvasSpec, seed: u64) -> Result<Image, BackendError> {
        MockImageBackend.generate(prompt, canvas, seed)
    }

    fn inpaint(&self, request: &InpaintRequest) -> Result<Image, BackendError> {
        request.check()?;
        Ok(request.background.clone())
    }
}

// ---------------------------------------------------------------------------
// Composite verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeReport {
    /// Fraction of mask pixels that changed; 0 for an empty mask.
    pub changed_inside: f64,
    /// Fraction of non-mask pixels that changed; 0 when the mask is total.
    pub changed_outside: f64,
}

/// Counts pixels whose channels differ by more than `tol`, inside and outside
/// the mask.
pub fn verify_composite(
    before: &Image,
    after: &Image,
    mask: &MaskRaster,
    tol: u8,
) -> Result<CompositeReport, ImageError> {
    if before.width != after.width || before.height != after.height {
        return Err(ImageError::DimensionMismatch(format!(
            "before {}x{}, after {}x{}",
            before.width, before.height, after.width, after.height
        )));
    }
    if mask.width != before.width || mask.height != before.height {
        return Err(ImageError::DimensionMismatch(format!(
            "mask {}x{}, image {}x{}",
            mask.width, mask.height, before.width, before.height
        )));
    }
    let (mut inside, mut inside_changed, mut outside, mut outside_changed) =
        (0usize, 0usize, 0usize, 0usize);
    for (i, m) in mask.data.iter().enumerate() {
        let a = &before.pixels[4 * i..4 * i + 4];
        let b = &after.pixels[4 * i..4 * i + 4];
        let changed = a.iter().zip(b).any(|(x, y)| x.abs_diff(*y) > tol);
        if *m == 1 {
            inside += 1;
            inside_changed += usize::from(changed);
        } else {
            outside += 1;
            outside_changed += usize::from(changed);
        }
    }
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(CompositeReport {
        changed_inside: frac(inside_changed, inside),
        changed_outside: frac(outside_changed, outside),
    })
}
