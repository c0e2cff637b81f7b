//! 2-D grayscale rasters in [0,1] and their binary masks, with 16-bit /
//! 8-bit PGM persistence (binary `P5`, most significant byte first).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::hash::Fnv1a;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(
                "image",
                format!("{h}x{w} implies {} values, got {}", h * w, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "image" });
        }
        Ok(ImageGrid { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ImageGrid {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Self {
        ImageGrid {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        ImageGrid { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_extents(&self, other: &ImageGrid) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// `[1, h, w]` tensor view for the convolutional paths.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.h, self.w], self.data.clone()).expect("image is a valid tensor")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [1, h, w] => ImageGrid::new(h, w, t.data().to_vec()),
            [h, w] => ImageGrid::new(h, w, t.data().to_vec()),
            _ => Err(Error::shape(
                "image",
                format!("cannot view {:?} as a single-channel raster", t.shape()),
            )),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update(&(self.h as u32).to_le_bytes());
        h.update(&(self.w as u32).to_le_bytes());
        h.update_f64s(&self.data);
        h.finish()
    }

    /// 2x box downsampling; extents must be even.
    pub fn downsample2(&self) -> Result<ImageGrid> {
        if self.h % 2 != 0 || self.w % 2 != 0 {
            return Err(Error::shape(
                "downsample2",
                format!("odd extents {}x{}", self.h, self.w),
            ));
        }
        let (oh, ow) = (self.h / 2, self.w / 2);
        Ok(ImageGrid::from_fn(oh, ow, |y, x| {
            0.25 * (self.get(2 * y, 2 * x)
                + self.get(2 * y + 1, 2 * x)
                + self.get(2 * y, 2 * x + 1)
                + self.get(2 * y + 1, 2 * x + 1))
        }))
    }

    /// Separable Gaussian blur with clamp-to-edge boundary.
    pub fn gaussian_blur(&self, sigma: f64) -> ImageGrid {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
        for i in -radius..=radius {
            kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
        }
        let norm: f64 = kernel.iter().sum();
        for k in &mut kernel {
            *k /= norm;
        }
        let horizontal = ImageGrid::from_fn(self.h, self.w, |y, x| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let sx = (x as isize + i as isize - radius).clamp(0, self.w as isize - 1);
                    k * self.get(y, sx as usize)
                })
                .sum()
        });
        ImageGrid::from_fn(self.h, self.w, |y, x| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let sy = (y as isize + i as isize - radius).clamp(0, self.h as isize - 1);
                    k * horizontal.get(sy as usize, x)
                })
                .sum()
        })
    }

    /// 16-bit binary PGM, values scaled by 65535.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n65535\n", self.w, self.h).into_bytes();
        for &v in &self.data {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            bytes.extend_from_slice(&q.to_be_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load_pgm(path: &Path) -> Result<ImageGrid> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let (w, h, maxval, payload) = parse_pgm_header(&bytes, path)?;
        if maxval != 65535 {
            return Err(Error::format(
                path,
                format!("expected 16-bit PGM (maxval 65535), got {maxval}"),
            ));
        }
        if payload.len() != 2 * w * h {
            return Err(Error::format(path, "truncated pixel payload"));
        }
        let data: Vec<f64> = payload
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / 65535.0)
            .collect();
        ImageGrid::new(h, w, data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Mask { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.h, self.w), (other.h, other.w));
        Mask {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a || b)
                .collect(),
        }
    }

    /// 8-bit binary PGM with 0/255 levels.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        bytes.extend(self.data.iter().map(|&b| if b { 255u8 } else { 0 }));
        fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load_pgm(path: &Path) -> Result<Mask> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let (w, h, maxval, payload) = parse_pgm_header(&bytes, path)?;
        if maxval != 255 {
            return Err(Error::format(
                path,
                format!("expected 8-bit PGM (maxval 255), got {maxval}"),
            ));
        }
        if payload.len() != w * h {
            return Err(Error::format(path, "truncated pixel payload"));
        }
        Ok(Mask {
            h,
            w,
            data: payload.iter().map(|&b| b >= 128).collect(),
        })
    }
}

fn parse_pgm_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, u32, &'a [u8])> {
    let fail = |d: &str| Error::format(path, d);
    if !bytes.starts_with(b"P5") {
        return Err(fail("not a binary PGM (missing P5 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // skip whitespace and `#` comment lines
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
        if start == pos {
            return Err(fail("malformed header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fail("header field out of range"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail("missing separator after maxval"));
    }
    pos += 1;
    Ok((fields[0] as usize, fields[1] as usize, fields[2], &bytes[pos..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pgm16_roundtrip_is_exact_on_quantized_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        // values on the 1/65535 grid survive the roundtrip exactly
        let img = ImageGrid::from_fn(5, 7, |y, x| ((y * 7 + x) as f64 * 901.0) % 65536.0 / 65535.0);
        img.save_pgm(&path).unwrap();
        let back = ImageGrid::load_pgm(&path).unwrap();
        assert_eq!(back.height(), 5);
        assert_eq!(back.width(), 7);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let mask = Mask::from_fn(4, 4, |y, x| (y + x) % 2 == 0);
        mask.save_pgm(&path).unwrap();
        assert_eq!(Mask::load_pgm(&path).unwrap(), mask);
    }

    #[test]
    fn load_rejects_malformed_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P6\n2 2\n255\nxxxx").unwrap();
        assert!(ImageGrid::load_pgm(&path).is_err());
        std::fs::write(&path, b"P5\n2 2\n65535\n\x00\x01").unwrap();
        assert!(ImageGrid::load_pgm(&path).is_err());
    }

    #[test]
    fn downsample_averages_quads() {
        let img = ImageGrid::new(2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(img.downsample2().unwrap().data(), &[4.0]);
        assert!(ImageGrid::zeros(3, 4).downsample2().is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let img = ImageGrid::constant(8, 8, 0.4);
        let blurred = img.gaussian_blur(2.0);
        for &v in blurred.data() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }
}
