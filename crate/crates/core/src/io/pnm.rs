//! Netpbm images. Writers emit binary `P5` (gray) and `P6` (RGB) with
//! maxval 255; the reader also accepts the plain `P2`/`P3` forms.

use std::fs;
use std::path::Path;

use crate::error::{Result, TatsError};

const KIND: &str = "PNM";

/// 8-bit image, row-major, `channels` interleaved samples per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, px: &[u8]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(px);
    }

    pub fn get(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Binary `P5`/`P6` encoding.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => {
                return Err(TatsError::invalid(format!(
                    "cannot encode {c}-channel image"
                )))
            }
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&str> {
        self.skip_space();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(TatsError::format(KIND, "unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| TatsError::format(KIND, "non-ASCII header"))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        t.parse()
            .map_err(|_| TatsError::format(KIND, format!("expected a number, found `{t}`")))
    }
}

/// Parses `P2`, `P3`, `P5` or `P6` data with maxval at most 255.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.token()?.to_string();
    let (channels, binary) = match magic.as_str() {
        "P2" => (1, false),
        "P3" => (3, false),
        "P5" => (1, true),
        "P6" => (3, true),
        m => return Err(TatsError::format(KIND, format!("unsupported magic `{m}`"))),
    };
    let (width, height, maxval) = (c.number()?, c.number()?, c.number()?);
    if maxval == 0 || maxval > 255 {
        return Err(TatsError::format(
            KIND,
            format!("maxval {maxval} outside 1..=255"),
        ));
    }
    let n = width * height * channels;
    let data = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = c.pos + 1;
        let raster = bytes.get(start..).filter(|r| r.len() == n);
        raster
            .ok_or_else(|| TatsError::format(KIND, format!("expected {n} raster bytes")))?
            .to_vec()
    } else {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(c.number()?);
        }
        c.skip_space();
        if c.pos != bytes.len() {
            return Err(TatsError::format(KIND, "trailing data after raster"));
        }
        v.into_iter()
            .map(|x| u8::try_from(x).map_err(|_| TatsError::format(KIND, "sample above 255")))
            .collect::<Result<_>>()?
    };
    if data.iter().any(|&s| s as usize > maxval) {
        return Err(TatsError::format(KIND, "sample above maxval"));
    }
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

pub fn load(path: &Path) -> Result<Image> {
    decode(&fs::read(path)?)
}
