//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an `[H×W×3]` image in `[0,1]` as P6.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 3] = *img.shape() else {
        return Err(Error::Image(format!("PPM needs [H×W×3], got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Encodes an `[H×W×1]` image as P5.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 1] = *img.shape() else {
        return Err(Error::Image(format!("PGM needs [H×W×1], got {:?}", img.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("truncated header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Image("non-ASCII header".into()))
}

/// Decodes P5 or P6 into `[H×W×3]` values in `[0,1]`; grey maps are
/// replicated over the three channels.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    let channels = match magic {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::Image(format!("unsupported magic {other:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        header_token(bytes, &mut pos)?
            .parse()
            .map_err(|_| Error::Image(format!("bad {what} in header")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Image(format!("only maxval 255 is supported, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Image(format!("raster needs {need} bytes")))?;
    if bytes.len() != pos + need {
        return Err(Error::Image("trailing bytes after raster".into()));
    }
    let data = if channels == 3 {
        raster.iter().map(|&b| b as f64 / 255.0).collect()
    } else {
        raster.iter().flat_map(|&b| [b as f64 / 255.0; 3]).collect()
    };
    Tensor::new([h, w, 3], data)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pnm(&fs::read(path)?)
}
