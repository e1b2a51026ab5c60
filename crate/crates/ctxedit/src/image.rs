//! RGB images, binary masks, and portable pixmap/graymap serialization.
//!
//! Images store f64 channels in `[0, 1]`. Scene rendering only ever writes
//! palette values of the form `k/255`, so a trip through 8-bit PPM is exact
//! for generated data.

use std::fmt;

/// Errors from pixmap parsing and construction.
#[derive(Debug)]
pub enum ImageError {
    Format(String),
    DataLength { expected: usize, got: usize },
}

impl fmt::Display for ImageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Format(msg) => write!(f, "pixmap format error: {msg}"),
            Self::DataLength { expected, got } => {
                write!(f, "pixmap payload length {got}, expected {expected}")
            }
        }
    }
}

impl std::error::Error for ImageError {}

/// RGB image, interleaved row-major, channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != h * w * 3 {
            return Err(ImageError::DataLength {
                expected: h * w * 3,
                got: data.len(),
            });
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fill an axis-aligned rectangle (clipped to bounds).
    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, rgb: [f64; 3]) {
        for y in y0..(y0 + h).min(self.h) {
            for x in x0..(x0 + w).min(self.w) {
                self.set_pixel(y, x, rgb);
            }
        }
    }

    /// Fill the ellipse inscribed in the given rectangle.
    pub fn fill_ellipse(&mut self, x0: usize, y0: usize, w: usize, h: usize, rgb: [f64; 3]) {
        let cx = x0 as f64 + w as f64 / 2.0;
        let cy = y0 as f64 + h as f64 / 2.0;
        let rx = w as f64 / 2.0;
        let ry = h as f64 / 2.0;
        for y in y0..(y0 + h).min(self.h) {
            for x in x0..(x0 + w).min(self.w) {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.set_pixel(y, x, rgb);
                }
            }
        }
    }

    /// Encode as binary PPM (P6, maxval 255). Channels are rounded to the
    /// nearest 8-bit level.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, ImageError> {
        let (w, h, payload) = parse_pnm_header(bytes, b"P6")?;
        if payload.len() != w * h * 3 {
            return Err(ImageError::DataLength {
                expected: w * h * 3,
                got: payload.len(),
            });
        }
        let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self { h, w, data })
    }
}

/// Binary mask with entries in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != h * w {
            return Err(ImageError::DataLength {
                expected: h * w,
                got: data.len(),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(ImageError::Format("mask entries must be 0 or 1".into()));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize) {
        for y in y0..(y0 + h).min(self.h) {
            for x in x0..(x0 + w).min(self.w) {
                self.data[y * self.w + x] = 1;
            }
        }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Union in place with another mask of the same size.
    pub fn union_with(&mut self, other: &Mask) {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// Max-pool by `factor`: an output cell is 1 if any covered input pixel
    /// is 1. Requires dimensions divisible by `factor`.
    pub fn max_pool(&self, factor: usize) -> Mask {
        debug_assert!(factor > 0 && self.h % factor == 0 && self.w % factor == 0);
        let oh = self.h / factor;
        let ow = self.w / factor;
        let mut out = Mask::zeros(oh, ow);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.data[y * self.w + x] == 1 {
                    out.data[(y / factor) * ow + x / factor] = 1;
                }
            }
        }
        out
    }

    /// Intersection-over-union against another mask; 1.0 when both empty.
    pub fn iou(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Dice overlap against another mask; 1.0 when both empty.
    pub fn dice(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
        }
        let total = self.count_ones() + other.count_ones();
        if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        }
    }

    /// Encode as binary PGM (P5), 1 -> 255, 0 -> 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(self.data.iter().map(|&v| if v == 1 { 255u8 } else { 0 }));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, ImageError> {
        let (w, h, payload) = parse_pnm_header(bytes, b"P5")?;
        if payload.len() != w * h {
            return Err(ImageError::DataLength {
                expected: w * h,
                got: payload.len(),
            });
        }
        let data = payload.iter().map(|&b| u8::from(b >= 128)).collect();
        Ok(Self { h, w, data })
    }
}

/// Parse a binary PNM header (`magic\nW H\n255\n`), returning (w, h, payload).
fn parse_pnm_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<(usize, usize, &'a [u8]), ImageError> {
    let mut fields: Vec<Vec<u8>> = Vec::new();
    let mut i = 0;
    // magic, width, height, maxval separated by single whitespace bytes
    while fields.len() < 4 && i < bytes.len() {
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(bytes[start..i].to_vec());
        if i < bytes.len() {
            i += 1; // consume one whitespace byte
        }
    }
    if fields.len() < 4 {
        return Err(ImageError::Format("truncated header".into()));
    }
    if fields[0] != magic {
        return Err(ImageError::Format(format!(
            "expected magic {:?}, got {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&fields[0])
        )));
    }
    let parse = |f: &[u8]| -> Result<usize, ImageError> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Format("bad integer field".into()))
    };
    let w = parse(&fields[1])?;
    let h = parse(&fields[2])?;
    let maxval = parse(&fields[3])?;
    if maxval != 255 {
        return Err(ImageError::Format(format!("unsupported maxval {maxval}")));
    }
    Ok((w, h, &bytes[i..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_exact_on_quantized_values() {
        let mut img = Image::new(4, 6);
        img.fill_rect(1, 1, 3, 2, [200.0 / 255.0, 40.0 / 255.0, 40.0 / 255.0]);
        let bytes = img.to_ppm();
        let back = Image::from_ppm(&bytes).unwrap();
        assert_eq!(img, back);
        assert_eq!(bytes, back.to_ppm());
    }

    #[test]
    fn pgm_roundtrip_preserves_mask() {
        let mut m = Mask::zeros(8, 8);
        m.set_rect(2, 3, 4, 2);
        let back = Mask::from_pgm(&m.to_pgm()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn max_pool_marks_any_covered_pixel() {
        let mut m = Mask::zeros(8, 8);
        m.set_rect(3, 3, 1, 1); // single pixel
        let pooled = m.max_pool(4);
        assert_eq!(pooled.get(0, 0), 1);
        assert_eq!(pooled.count_ones(), 1);
    }

    #[test]
    fn iou_and_dice_basic_cases() {
        let mut a = Mask::zeros(4, 4);
        a.set_rect(0, 0, 2, 4); // left half
        let mut b = Mask::zeros(4, 4);
        b.set_rect(0, 0, 4, 2); // top half
        assert!((a.iou(&a) - 1.0).abs() < 1e-15);
        assert!((a.iou(&b) - 4.0 / 12.0).abs() < 1e-15);
        assert!((a.dice(&b) - 8.0 / 16.0).abs() < 1e-15);
        let empty = Mask::zeros(4, 4);
        assert_eq!(a.iou(&empty), 0.0);
        assert_eq!(empty.iou(&empty), 1.0);
    }

    #[test]
    fn ellipse_stays_inside_bbox() {
        let mut img = Image::new(16, 16);
        img.fill_ellipse(4, 4, 8, 8, [1.0, 1.0, 1.0]);
        for y in 0..16 {
            for x in 0..16 {
                let inside_bbox = (4..12).contains(&x) && (4..12).contains(&y);
                if !inside_bbox {
                    assert_eq!(img.pixel(y, x), [0.0, 0.0, 0.0]);
                }
            }
        }
        // centre pixel painted
        assert_eq!(img.pixel(8, 8), [1.0, 1.0, 1.0]);
    }
}
