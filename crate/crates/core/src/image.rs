//! RGB images with values in `[0, 1]` and binary PPM (P6) I/O.

use std::path::Path;

use crate::binio::{read_file, write_file};
use crate::error::{Error, Result};

/// Row-major interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&rgb);
        }
        RgbImage {
            width,
            height,
            data,
        }
    }

    /// Wraps interleaved data; every value must lie in `[0, 1]`.
    pub fn from_data(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::domain(format!(
                "{} values do not fill a {width}x{height} RGB image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Sets a pixel, clamping each channel into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect()
    }

    pub fn same_dims(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

fn to_byte(v: f32) -> u8 {
    // round half up
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_file(path, |w| {
        w.bytes(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes())?;
        let bytes: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
        w.bytes(&bytes)
    })
}

/// Reads an 8-bit binary PPM. Comments in the header are skipped.
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let data = read_file(path)?;
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::format(path, format!("unsupported PPM kind {:?}", fields[0])));
    }
    let parse = |s: &str| -> Result<u32> {
        s.parse()
            .map_err(|_| Error::format(path, format!("bad PPM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(path, format!("only maxval 255 is supported, got {maxval}")));
    }
    let n = width as usize * height as usize * 3;
    let raster = data
        .get(pos..pos + n)
        .ok_or_else(|| Error::format(path, format!("PPM raster truncated at byte {}", data.len())))?;
    let values = raster.iter().map(|&b| b as f32 / 255.0).collect();
    RgbImage::from_data(width, height, values)
}
