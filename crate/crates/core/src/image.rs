//! Single-channel float images and 8-bit dumps (PGM / PNG).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major grayscale image. Pixel `(x, y)` has its center at image
/// coordinates `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> GrayImage<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, T::zero())
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape<U>(&self, other: &GrayImage<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Quantize to 8 bits, clamping to [0, 1].
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| {
                let f = v.as_f64().clamp(0.0, 1.0);
                (f * 255.0).round() as u8
            })
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
        Self::from_vec(width, height, data)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.to_u8())?;
        Ok(())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .ok_or_else(|| Error::Dimension("png buffer size".into()))?;
        img.save(path)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// Write as PGM or PNG depending on the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => self.write_png(path),
            _ => self.write_pgm(path),
        }
    }

    /// Load an 8-bit grayscale PGM (binary `P5` or ASCII `P2`) or PNG.
    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => {
                let img = image::open(path)
                    .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
                    .to_luma8();
                let (w, h) = img.dimensions();
                Self::from_u8(w as usize, h as usize, img.as_raw())
            }
            _ => read_pgm(path),
        }
    }
}

fn read_pgm<T: Scalar>(path: &Path) -> Result<GrayImage<T>> {
    let bad = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    let mut r = BufReader::new(std::fs::File::open(path)?);

    // Header: magic, width, height, maxval, separated by whitespace, '#' comments allowed.
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("truncated header"));
        }
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    let magic = tokens[0].as_str();
    let width: usize = tokens[1].parse().map_err(|_| bad("width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("height"))?;
    let maxval: u32 = tokens[3].parse().map_err(|_| bad("maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let scale = maxval as f64;
    let data: Vec<T> = match magic {
        "P5" => {
            let mut buf = vec![0u8; width * height];
            r.read_exact(&mut buf).map_err(|_| bad("truncated pixel data"))?;
            buf.into_iter().map(|b| T::lit(b as f64 / scale)).collect()
        }
        "P2" => {
            let mut rest = String::new();
            r.read_to_string(&mut rest)?;
            rest.split_whitespace()
                .take(width * height)
                .map(|t| t.parse::<u32>().map(|v| T::lit(v as f64 / scale)))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("pixel value"))?
        }
        _ => return Err(bad("not a PGM file")),
    };
    GrayImage::from_vec(width, height, data)
}
