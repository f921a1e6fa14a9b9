//! Binary netpbm: P6 colour images and P5 greymaps, maxval 255 only.

use std::fs;
use std::path::Path;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    /// Bytes per pixel: 3 for P6, 1 for P5.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Pixmap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Option<Self> {
        (matches!(channels, 1 | 3) && data.len() == width * height * channels).then_some(Pixmap {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let magic = token(bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            m => return Err(format!("unsupported netpbm magic `{m}`")),
        };
        let width = number(bytes, &mut pos)?;
        let height = number(bytes, &mut pos)?;
        let maxval = number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(format!("maxval {maxval} unsupported (only 255)"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if bytes.get(pos).is_none_or(|b| !b.is_ascii_whitespace()) {
            return Err("missing whitespace after maxval".into());
        }
        pos += 1;
        let want = width * height * channels;
        let raster = &bytes[pos..];
        if raster.len() < want {
            return Err(format!("truncated raster: {} of {want} bytes", raster.len()));
        }
        if raster.len() > want {
            return Err(format!("{} trailing bytes after raster", raster.len() - want));
        }
        Ok(Pixmap { width, height, channels, data: raster.to_vec() })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Pixmap::decode(&bytes).map_err(|m| HarnessError::format(path, m))
    }
}

fn token(bytes: &[u8], pos: &mut usize) -> std::result::Result<String, String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err("truncated header".into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn number(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    let t = token(bytes, pos)?;
    t.parse().map_err(|_| format!("bad header field `{t}`"))
}
