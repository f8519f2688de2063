//! Binary greyscale PGM (`P5`, maxval 255).

use std::fs;
use std::path::Path;

use crate::data::quantize;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    /// Row-major pixel bytes.
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Pgm> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Pgm::decode(&bytes, path)
    }

    /// Parses a `P5` file with maxval 255; `#` comments in the header are allowed.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Pgm> {
        let err = |offset: usize, msg: &str| Error::Format {
            path: path.display().to_string(),
            offset: offset as u64,
            msg: msg.to_string(),
        };
        if !bytes.starts_with(b"P5") {
            return Err(err(0, "not a binary PGM (missing P5 magic)"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(err(pos, "expected a decimal header field"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .expect("ascii digits")
                .parse()
                .map_err(|_| err(start, "header field out of range"))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(err(pos, "missing whitespace after maxval"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(err(pos, "only maxval 255 is supported"));
        }
        let pixels = &bytes[pos..];
        if pixels.len() != width * height {
            return Err(err(
                pos,
                &format!("expected {} pixel bytes, found {}", width * height, pixels.len()),
            ));
        }
        Ok(Pgm {
            width,
            height,
            pixels: pixels.to_vec(),
        })
    }
}

/// Tiles `h × w` images (each a row of `images`, values in `[0, 1]`) into a
/// grid with `cols` columns. Unused tiles stay black.
pub fn tile(images: &[&[f64]], h: usize, w: usize, cols: usize) -> Result<Pgm> {
    if images.iter().any(|im| im.len() != h * w) {
        return Err(Error::invalid(format!("grid tiles must have {h}x{w} pixels")));
    }
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols).max(1);
    let (width, height) = (cols * w, rows * h);
    let mut pixels = vec![0u8; width * height];
    for (k, im) in images.iter().enumerate() {
        let (tr, tc) = (k / cols, k % cols);
        for y in 0..h {
            let dst = (tr * h + y) * width + tc * w;
            for (d, &v) in pixels[dst..dst + w].iter_mut().zip(&im[y * w..(y + 1) * w]) {
                *d = quantize(v);
            }
        }
    }
    Ok(Pgm { width, height, pixels })
}
