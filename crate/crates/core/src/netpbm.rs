//! Binary Netpbm codecs: P6 (8-bit RGB) images and P5 graymaps with 8- or
//! 16-bit samples. Header comments are preserved on decode so callers can
//! carry metadata in them.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError(pub String);

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DecodeError {}

fn err<T>(msg: impl Into<String>) -> Result<T, DecodeError> {
    Err(DecodeError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// `P5`
    Gray,
    /// `P6`
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub kind: Kind,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Comment lines without the leading `#`, trimmed.
    pub comments: Vec<String>,
}

/// 8-bit interleaved RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
    pub comments: Vec<String>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    comments: Vec<String>,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                let start = self.pos + 1;
                let end = self.bytes[start..]
                    .iter()
                    .position(|&c| c == b'\n' || c == b'\r')
                    .map_or(self.bytes.len(), |n| start + n);
                self.comments
                    .push(String::from_utf8_lossy(&self.bytes[start..end]).trim().to_string());
                self.pos = end;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, DecodeError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return err(format!("malformed header: expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DecodeError(format!("malformed header: {what} out of range")))
    }
}

/// Parses the header and returns it with the offset of the first raster byte.
pub fn parse_header(bytes: &[u8]) -> Result<(Header, usize), DecodeError> {
    let kind = match bytes.get(..2) {
        Some(b"P5") => Kind::Gray,
        Some(b"P6") => Kind::Rgb,
        _ => return err("malformed header: expected magic P5 or P6"),
    };
    let mut cur = Cursor {
        bytes,
        pos: 2,
        comments: Vec::new(),
    };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return err(format!("malformed header: zero extent {width}x{height}"));
    }
    if maxval == 0 || maxval > 65535 {
        return err(format!("malformed header: maxval {maxval} outside 1..=65535"));
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return err("malformed header: missing separator before raster"),
    }
    Ok((
        Header {
            kind,
            width,
            height,
            maxval: maxval as u16,
            comments: cur.comments,
        },
        cur.pos,
    ))
}

fn header_text(magic: &str, width: usize, height: usize, maxval: u16, comments: &[String]) -> Vec<u8> {
    let mut out = format!("{magic}\n");
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    out.push_str(&format!("{width} {height}\n{maxval}\n"));
    out.into_bytes()
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    assert_eq!(image.pixels.len(), image.width * image.height * 3);
    let mut out = header_text("P6", image.width, image.height, 255, &[]);
    out.extend_from_slice(&image.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, DecodeError> {
    let (header, start) = parse_header(bytes)?;
    if header.kind != Kind::Rgb {
        return err("expected a P6 image");
    }
    if header.maxval != 255 {
        return err(format!("unsupported P6 maxval {} (only 255)", header.maxval));
    }
    let len = header.width * header.height * 3;
    let raster = &bytes[start..];
    if raster.len() < len {
        return err(format!(
            "truncated raster: {} of {len} bytes present",
            raster.len()
        ));
    }
    Ok(RgbImage {
        width: header.width,
        height: header.height,
        pixels: raster[..len].to_vec(),
    })
}

/// P5 encoding. Samples are written as one byte when `maxval < 256`, otherwise
/// as two bytes, most significant first.
pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    assert_eq!(image.samples.len(), image.width * image.height);
    let mut out = header_text("P5", image.width, image.height, image.maxval, &image.comments);
    if image.maxval < 256 {
        out.extend(image.samples.iter().map(|&s| s as u8));
    } else {
        for &s in &image.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, DecodeError> {
    let (header, start) = parse_header(bytes)?;
    if header.kind != Kind::Gray {
        return err("expected a P5 graymap");
    }
    let n = header.width * header.height;
    let wide = header.maxval >= 256;
    let len = if wide { 2 * n } else { n };
    let raster = &bytes[start..];
    if raster.len() < len {
        return err(format!(
            "truncated raster: {} of {len} bytes present",
            raster.len()
        ));
    }
    let samples: Vec<u16> = if wide {
        raster[..len]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raster[..len].iter().map(|&b| b as u16).collect()
    };
    if let Some(&s) = samples.iter().find(|&&s| s > header.maxval) {
        return err(format!("sample {s} exceeds maxval {}", header.maxval));
    }
    Ok(GrayImage {
        width: header.width,
        height: header.height,
        maxval: header.maxval,
        samples,
        comments: header.comments,
    })
}
