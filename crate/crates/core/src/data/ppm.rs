//! Binary PPM (`P6`, maxval 255) with the `[-1, 1] ↔ [0, 255]` mapping.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes a planar `[3, H, W]` image with values in `[-1, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("save_image", "[3, H, W]", format!("{s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    if let Some(bad) = d.iter().find(|v| !(v.abs() <= 1.0)) {
        return Err(Error::Domain {
            op: "save_image",
            reason: format!("pixel value {bad} outside [-1, 1]"),
        });
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_byte(d[c * plane + p]));
        }
    }
    Ok(out)
}

#[inline]
pub fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[inline]
pub fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::format(path, "missing P6 magic"));
    }
    let mut dim = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::format(path, format!("bad {what}")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = pos + 1;
    let plane = w * h;
    if bytes.len() != raster + 3 * plane {
        return Err(Error::format(
            path,
            format!("expected {} raster bytes, found {}", 3 * plane, bytes.len().saturating_sub(raster)),
        ));
    }
    let mut data = vec![0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = from_byte(bytes[raster + 3 * p + c]);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn save_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = encode_ppm(image)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_black_maps_to_zero_bytes() {
        let img = Tensor::full(&[3, 2, 2], -1.0f32);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.ends_with(&[0u8; 12]));
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let img = Tensor::full(&[3, 4, 4], 0.25f32);
        let bytes = encode_ppm(&img).unwrap();
        let p = Path::new("t.ppm");
        assert!(matches!(decode_ppm(&bytes[..bytes.len() - 1], p), Err(Error::Format { .. })));
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0", p), Err(Error::Format { .. })));
        assert!(matches!(decode_ppm(b"P6\n1", p), Err(Error::Format { .. })));
    }

    #[test]
    fn out_of_range_is_rejected() {
        let img = Tensor::full(&[3, 1, 1], 1.5f32);
        assert!(encode_ppm(&img).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_quantization(vals in proptest::collection::vec(-1.0f32..=1.0, 3 * 5 * 4)) {
            let img = Tensor::new(vec![3, 5, 4], vals).unwrap();
            let back = decode_ppm(&encode_ppm(&img).unwrap(), Path::new("x")).unwrap();
            prop_assert_eq!(back.shape(), img.shape());
            prop_assert!(img.max_abs_diff(&back) <= 1.0 / 255.0 + 1e-6);
            // decoded values re-encode to identical bytes
            prop_assert_eq!(encode_ppm(&back).unwrap(), encode_ppm(&img).unwrap());
        }
    }
}
