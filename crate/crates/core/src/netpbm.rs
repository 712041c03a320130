//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::checked(width, height, 1, data)
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::checked(width, height, 3, data)
    }

    fn checked(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "raster {width}x{height}x{channels} needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses P5 or P6 with `maxval ≤ 255`; comments are allowed in the header.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = HeaderReader { bytes, pos: 0 };
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(fmt_err(0, "expected magic P5 or P6")),
        };
        r.pos = 2;
        let width = r.number()?;
        let height = r.number()?;
        let maxval = r.number()?;
        if width == 0 || height == 0 {
            return Err(fmt_err(r.pos, "zero image dimension"));
        }
        if maxval == 0 || maxval > 255 {
            return Err(fmt_err(r.pos, format!("unsupported maxval {maxval}")));
        }
        match bytes.get(r.pos) {
            Some(c) if c.is_ascii_whitespace() => r.pos += 1,
            _ => return Err(fmt_err(r.pos, "expected a single whitespace byte before the payload")),
        }
        let need = width * height * channels;
        let payload = &bytes[r.pos..];
        if payload.len() < need {
            return Err(fmt_err(bytes.len(), format!("truncated payload: {} of {need} bytes", payload.len())));
        }
        if payload.len() > need {
            return Err(fmt_err(r.pos + need, "trailing bytes after payload"));
        }
        Ok(Self { width, height, channels, data: payload.to_vec() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { what: "netpbm", offset, msg: msg.into() }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(fmt_err(self.pos, "expected whitespace in header"));
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(fmt_err(start, "expected a decimal number in header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt_err(start, "header number out of range"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let g = Raster::gray(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        assert_eq!(g.encode()[..11], *b"P5\n3 2\n255\n");
        assert_eq!(Raster::decode(&g.encode()).unwrap(), g);
        let c = Raster::rgb(1, 2, vec![9, 8, 7, 6, 5, 4]).unwrap();
        assert_eq!(Raster::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn header_comments() {
        let bytes = b"P5 # made by hand\n2 # width\n1\n255\n\x07\x08";
        let r = Raster::decode(bytes).unwrap();
        assert_eq!((r.width, r.height, r.data.clone()), (2, 1, vec![7, 8]));
    }

    #[test]
    fn errors_carry_offsets() {
        let err = |b: &[u8]| match Raster::decode(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(err(b"P4\n1 1\n255\n\0"), 0);
        assert_eq!(err(b"P5\n2 2\n255\n\0\0"), 13);
        assert_eq!(err(b"P5\nx 2\n255\n"), 3);
        assert_eq!(err(b"P5\n1 1\n256\n\0"), 10);
        assert_eq!(err(b"P5\n1 1\n255\n\0\0"), 12);
    }
}
