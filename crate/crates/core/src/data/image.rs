use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// 8-bit RGB image stored planar (`3×H×W`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::data(format!(
                "image {height}x{width} needs {} bytes, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let plane = self.height * self.width;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + y * self.width + x] = v;
        }
    }

    /// Values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn([3, self.height, self.width], |i| self.data[i] as f32 / 255.0)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_ppm_bytes())?;
        f.flush()?;
        Ok(())
    }

    /// Binary PPM (`P6`, maxval 255) with interleaved RGB.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.height * self.width;
        for i in 0..plane {
            for c in 0..3 {
                out.push(self.data[c * plane + i]);
            }
        }
        out
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_ppm_reader(BufReader::new(f)).map_err(|e| match e {
            Error::Data(msg) => Error::data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_ppm_reader(mut r: impl BufRead) -> Result<Self> {
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::data("truncated PPM header"));
            }
            let line = line.split('#').next().unwrap_or("");
            fields.extend(line.split_whitespace().map(str::to_string));
        }
        if fields[0] != "P6" {
            return Err(Error::data(format!("unsupported PPM magic {}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::data(format!("bad PPM header field {s}")));
        let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 {
            return Err(Error::data(format!("PPM maxval {max} is not 255")));
        }
        let mut raw = vec![0u8; 3 * w * h];
        r.read_exact(&mut raw).map_err(|_| Error::data("truncated PPM payload"))?;
        let plane = w * h;
        let mut data = vec![0u8; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = raw[3 * i + c];
            }
        }
        Self::new(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = Image::new(2, 3, (0..18).collect()).unwrap();
        let bytes = img.to_ppm_bytes();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(Image::from_ppm_reader(&bytes[..]).unwrap(), img);
        assert!(Image::from_ppm_reader(&bytes[..bytes.len() - 1]).is_err());
    }
}
