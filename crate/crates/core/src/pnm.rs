//! Binary portable graymap / pixmap I/O (P5 read/write, P6 write).

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PnmError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed image {path}: {detail}")]
    Malformed { path: String, detail: String },
}

fn malformed(path: &Path, detail: impl Into<String>) -> PnmError {
    PnmError::Malformed {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Skip whitespace and '#' comments between header tokens.
    fn skip_separators(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn number(&mut self, path: &Path, what: &str) -> Result<usize, PnmError> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(malformed(path, format!("missing {what} in header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(path, format!("unreadable {what}")))
    }
}

/// Read a binary 8-bit grayscale P5 file: (width, height, maxval, pixels).
pub fn read_p5(path: &Path) -> Result<(usize, usize, u16, Vec<u8>), PnmError> {
    let bytes = std::fs::read(path).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(malformed(path, "not a binary graymap (P5)"));
    }
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 2,
    };
    let width = cur.number(path, "width")?;
    let height = cur.number(path, "height")?;
    let maxval = cur.number(path, "maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed(path, "zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(malformed(path, "missing raster separator"));
    }
    cur.pos += 1;
    let need = width * height;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err(malformed(
            path,
            format!("raster holds {} bytes, need {need}", raster.len()),
        ));
    }
    Ok((width, height, maxval as u16, raster[..need].to_vec()))
}

pub fn write_p5(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), PnmError> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write a binary color pixmap; `rgb` is interleaved, 3 bytes per pixel.
pub fn write_p6(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), PnmError> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    std::fs::write(path, out).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })
}
