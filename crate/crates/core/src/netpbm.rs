//! Binary netpbm codecs: 16-bit P5 PGM for depth, 8-bit P6 PPM for color.
//!
//! PGM samples above 255 are two bytes, most significant first. Headers are
//! written in one fixed form so identical data yields identical bytes;
//! the parser additionally accepts comments and arbitrary whitespace.

use crate::depth::DepthMap;
use crate::error::{Error, Result};

pub const PGM_MAXVAL: u16 = 65535;

/// Encode a 16-bit grayscale image.
pub fn pgm16_bytes(width: usize, height: usize, samples: &[u16]) -> Result<Vec<u8>> {
    if samples.len() != width * height {
        return Err(Error::shape(format!(
            "pgm: {width}x{height} needs {} samples, got {}",
            width * height,
            samples.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n{PGM_MAXVAL}\n").into_bytes();
    out.reserve(samples.len() * 2);
    for &s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    Ok(out)
}

/// Encode an 8-bit RGB image from interleaved samples.
pub fn ppm8_bytes(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::shape(format!(
            "ppm: {width}x{height} needs {} bytes, got {}",
            width * height * 3,
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderReader { bytes, pos: 0 }
    }

    /// Next whitespace-delimited token, skipping '#' comments.
    fn token(&mut self) -> Result<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::data("netpbm: truncated header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::data("netpbm: non-ascii header"))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::data(format!("netpbm: bad {what} {tok:?}")))
    }

    /// Consume exactly one whitespace byte after the maxval, per the format.
    fn payload(mut self) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(Error::data("netpbm: missing separator before payload"));
        }
        self.pos += 1;
        Ok(&self.bytes[self.pos..])
    }
}

/// Decode a binary PGM. Returns (width, height, samples scaled as stored).
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::data(format!(
            "pgm: bad magic {:?}, expected \"P5\"",
            String::from_utf8_lossy(&bytes[..bytes.len().min(2)])
        )));
    }
    let mut hdr = HeaderReader::new(&bytes[2..]);
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if maxval == 0 || maxval > PGM_MAXVAL as usize {
        return Err(Error::data(format!("pgm: unsupported maxval {maxval}")));
    }
    let payload = hdr.payload()?;
    let n = width * height;
    let samples = if maxval > 255 {
        if payload.len() < n * 2 {
            return Err(Error::data(format!(
                "pgm: truncated payload, expected {} bytes, got {}",
                n * 2,
                payload.len()
            )));
        }
        payload[..n * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        if payload.len() < n {
            return Err(Error::data(format!(
                "pgm: truncated payload, expected {n} bytes, got {}",
                payload.len()
            )));
        }
        payload[..n].iter().map(|&b| b as u16).collect()
    };
    Ok((width, height, samples))
}

/// Decode a binary PPM into interleaved 8-bit RGB.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::data(format!(
            "ppm: bad magic {:?}, expected \"P6\"",
            String::from_utf8_lossy(&bytes[..bytes.len().min(2)])
        )));
    }
    let mut hdr = HeaderReader::new(&bytes[2..]);
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(Error::data(format!("ppm: unsupported maxval {maxval}")));
    }
    let payload = hdr.payload()?;
    let n = width * height * 3;
    if payload.len() < n {
        return Err(Error::data(format!(
            "ppm: truncated payload, expected {n} bytes, got {}",
            payload.len()
        )));
    }
    Ok((width, height, payload[..n].to_vec()))
}

/// Quantize a depth map to 16-bit PGM bytes.
pub fn depth_to_pgm16(d: &DepthMap) -> Result<Vec<u8>> {
    let samples: Vec<u16> = d
        .values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * PGM_MAXVAL as f32).round() as u16)
        .collect();
    pgm16_bytes(d.width, d.height, &samples)
}

/// Read a depth map back from PGM bytes (values scaled to [0, 1]).
pub fn depth_from_pgm(bytes: &[u8]) -> Result<DepthMap> {
    let (w, h, samples) = parse_pgm(bytes)?;
    let values = samples
        .iter()
        .map(|&s| s as f32 / PGM_MAXVAL as f32)
        .collect();
    DepthMap::from_values(h, w, values)
}

/// Quantize a planar [3, H, W] image in [0, 1] to PPM bytes.
pub fn rgb_to_ppm8(img: &crate::autodiff::Value) -> Result<Vec<u8>> {
    let s = &img.shape;
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("ppm: expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let hw = h * w;
    let mut rgb = Vec::with_capacity(hw * 3);
    for i in 0..hw {
        for c in 0..3 {
            rgb.push((img.data[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    ppm8_bytes(w, h, &rgb)
}

/// Read a planar [3, H, W] image in [0, 1] from PPM bytes.
pub fn rgb_from_ppm(bytes: &[u8]) -> Result<crate::autodiff::Value> {
    let (w, h, rgb) = parse_ppm(bytes)?;
    let hw = h * w;
    let mut data = vec![0.0f32; hw * 3];
    for i in 0..hw {
        for c in 0..3 {
            data[c * hw + i] = rgb[i * 3 + c] as f32 / 255.0;
        }
    }
    crate::autodiff::Value::new(vec![3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_roundtrip_within_quantization() {
        let d = DepthMap::from_values(3, 4, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let bytes = depth_to_pgm16(&d).unwrap();
        let back = depth_from_pgm(&bytes).unwrap();
        assert_eq!((back.height, back.width), (3, 4));
        for (a, b) in back.values.iter().zip(&d.values) {
            assert!((a - b).abs() <= 1.0 / PGM_MAXVAL as f32);
        }
    }

    #[test]
    fn bad_magic_and_truncation_are_described() {
        let err = parse_pgm(b"P6\n2 2\n255\n....").unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
        let short = pgm16_bytes(4, 4, &[0u16; 16]).unwrap();
        let err = parse_pgm(&short[..short.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        let err = parse_ppm(b"P5\n1 1\n255\nx").unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn parser_accepts_comments() {
        let mut bytes = b"P5\n# a comment\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&1000u16.to_be_bytes());
        bytes.extend_from_slice(&65535u16.to_be_bytes());
        let (w, h, s) = parse_pgm(&bytes).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(s, vec![1000, 65535]);
    }

    proptest! {
        #[test]
        fn pgm_u16_samples_roundtrip_exactly(samples in prop::collection::vec(0u16..=65535, 6)) {
            let bytes = pgm16_bytes(3, 2, &samples).unwrap();
            let (w, h, back) = parse_pgm(&bytes).unwrap();
            prop_assert_eq!((w, h), (3, 2));
            prop_assert_eq!(back, samples);
        }

        #[test]
        fn ppm_bytes_roundtrip_exactly(rgb in prop::collection::vec(0u8..=255, 12)) {
            let bytes = ppm8_bytes(2, 2, &rgb).unwrap();
            let (w, h, back) = parse_ppm(&bytes).unwrap();
            prop_assert_eq!((w, h), (2, 2));
            prop_assert_eq!(back, rgb);
        }
    }
}
