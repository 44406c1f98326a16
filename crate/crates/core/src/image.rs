//! Image and mask containers plus binary netpbm (P6/P5) codecs.

use std::fs;
use std::path::Path;

use crate::error::{Result, TmudError};

/// Height x width x 3 RGB image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl ImageTensor {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(TmudError::Domain(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                CHANNELS
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TmudError::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * CHANNELS;
        for c in 0..CHANNELS {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Round-trips the values through 8-bit storage, the precision of the
    /// on-disk format.
    pub fn quantized(&self) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| f32::from(to_u8(v)) / 255.0)
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Root mean squared difference over all values.
    pub fn rmse(&self, other: &ImageTensor) -> f64 {
        let ss: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = f64::from(*a) - f64::from(*b);
                d * d
            })
            .sum();
        (ss / self.data.len() as f64).sqrt()
    }

    /// Pixels (not channel values) whose colour differs between the images.
    pub fn diff_mask(&self, other: &ImageTensor) -> Mask {
        let mut mask = Mask::empty(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.pixel(r, c) != other.pixel(r, c) {
                    mask.set(r, c, true);
                }
            }
        }
        mask
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        self.to_ppm_with_comment(None)
    }

    /// PPM with an optional `#` comment line after the magic number.
    pub fn to_ppm_with_comment(&self, comment: Option<&str>) -> Vec<u8> {
        let mut out = netpbm_header(b"P6", self.width, self.height, comment);
        out.extend(self.data.iter().map(|&v| to_u8(v)));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (width, height, body) = parse_netpbm(bytes, b"P6")?;
        let need = width * height * CHANNELS;
        if body.len() < need {
            return Err(TmudError::Data(format!(
                "truncated PPM: {} bytes of {need}",
                body.len()
            )));
        }
        let data = body[..need].iter().map(|&b| f32::from(b) / 255.0).collect();
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| TmudError::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TmudError::io(path, e))?;
        Self::from_ppm(&bytes)
    }

    /// Mirror around the vertical axis.
    pub fn flipped_horizontal(&self) -> ImageTensor {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set_pixel(r, c, self.pixel(r, self.width - 1 - c));
            }
        }
        out
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    fn check_shape(&self, other: &Mask) {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "mask shapes differ"
        );
    }

    pub fn union(&self, other: &Mask) -> Mask {
        self.check_shape(other);
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn intersection(&self, other: &Mask) -> Mask {
        self.check_shape(other);
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.check_shape(other);
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.check_shape(other);
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Chebyshev (square) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let mut out = Mask::empty(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.get(r, c) {
                    continue;
                }
                let r0 = r.saturating_sub(radius);
                let r1 = (r + radius).min(self.height - 1);
                let c0 = c.saturating_sub(radius);
                let c1 = (c + radius).min(self.width - 1);
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        out.set(rr, cc, true);
                    }
                }
            }
        }
        out
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        self.to_pgm_with_comment(None)
    }

    pub fn to_pgm_with_comment(&self, comment: Option<&str>) -> Vec<u8> {
        let mut out = netpbm_header(b"P5", self.width, self.height, comment);
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    /// Any nonzero sample counts as inside the mask.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (width, height, body) = parse_netpbm(bytes, b"P5")?;
        if body.len() < width * height {
            return Err(TmudError::Data(format!(
                "truncated PGM: {} bytes of {}",
                body.len(),
                width * height
            )));
        }
        Ok(Mask {
            height,
            width,
            bits: body[..width * height].iter().map(|&b| b != 0).collect(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| TmudError::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TmudError::io(path, e))?;
        Self::from_pgm(&bytes)
    }
}

fn netpbm_header(magic: &[u8], width: usize, height: usize, comment: Option<&str>) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.push(b'\n');
    if let Some(c) = comment {
        out.extend(format!("# {}\n", c.replace('\n', " ")).bytes());
    }
    out.extend(format!("{width} {height}\n255\n").bytes());
    out
}

/// Parses the header of a binary netpbm file with maxval 255. Returns
/// `(width, height, raster)`.
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<(usize, usize, &'a [u8])> {
    if !bytes.starts_with(magic) {
        return Err(TmudError::Data(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TmudError::Data("malformed netpbm header".into()))?;
    }
    if fields[2] != 255 {
        return Err(TmudError::Data(format!(
            "unsupported netpbm maxval {}",
            fields[2]
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    Ok((fields[0], fields[1], bytes.get(pos..).unwrap_or(&[])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_after_quantization() {
        let data: Vec<f32> = (0..4 * 5 * 3).map(|i| (i as f32) / 59.0).collect();
        let img = ImageTensor::from_vec(4, 5, data).unwrap().quantized();
        let back = ImageTensor::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(img, back);
        assert!(img.to_ppm().starts_with(b"P6\n5 4\n255\n"));
    }

    #[test]
    fn pgm_uses_0_and_255() {
        let mut m = Mask::empty(2, 3);
        m.set(1, 2, true);
        let bytes = m.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 0, 0, 0, 0, 255]);
        assert_eq!(Mask::from_pgm(&bytes).unwrap(), m);
    }

    #[test]
    fn written_comments_round_trip() {
        let img = ImageTensor::filled(2, 3, 0.2).quantized();
        let bytes = img.to_ppm_with_comment(Some("config-hash abc"));
        assert!(bytes.starts_with(b"P6\n# config-hash abc\n3 2\n255\n"));
        assert_eq!(ImageTensor::from_ppm(&bytes).unwrap(), img);
        let m = Mask::full(2, 2);
        assert_eq!(Mask::from_pgm(&m.to_pgm_with_comment(Some("x"))).unwrap(), m);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 9]);
        let m = Mask::from_pgm(&bytes).unwrap();
        assert!(!m.get(0, 0));
        assert!(m.get(0, 1));
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(ImageTensor::from_vec(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageTensor::from_vec(1, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn dilation_grows_a_point_into_a_square() {
        let mut m = Mask::empty(7, 7);
        m.set(3, 3, true);
        let d = m.dilate(2);
        assert_eq!(d.count(), 25);
        assert!(d.get(1, 1) && d.get(5, 5) && !d.get(0, 3));
    }

    #[test]
    fn flip_is_an_involution() {
        let data: Vec<f32> = (0..3 * 4 * 3).map(|i| (i % 7) as f32 / 7.0).collect();
        let img = ImageTensor::from_vec(3, 4, data).unwrap();
        assert_ne!(img.flipped_horizontal(), img);
        assert_eq!(img.flipped_horizontal().flipped_horizontal(), img);
    }
}
