//! Lossless space-to-depth latent codec.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn hwc(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Dimension(format!("{what} must be [H×W×C], got {:?}", t.shape()))),
    }
}

/// `[H×W×c] -> [(H/s)×(W/s)×(c·s²)]`. Each output vector lists the
/// `s × s` block in row-major order, channels innermost.
pub fn encode_latent(img: &Tensor, s: usize) -> Result<Tensor> {
    let (h, w, c) = hwc(img, "image")?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Dimension(format!("image {h}×{w} not divisible by stride {s}")));
    }
    let (lh, lw, lc) = (h / s, w / s, c * s * s);
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..lh {
        for x in 0..lw {
            for dy in 0..s {
                let row = ((y * s + dy) * w + x * s) * c;
                out.extend_from_slice(&src[row..row + s * c]);
            }
        }
    }
    Tensor::new([lh, lw, lc], out)
}

pub fn decode_latent(lat: &Tensor, s: usize) -> Result<Tensor> {
    let (lh, lw, lc) = hwc(lat, "latent")?;
    if s == 0 || lc % (s * s) != 0 {
        return Err(Error::Dimension(format!("latent width {lc} not divisible by {s}²")));
    }
    let (h, w, c) = (lh * s, lw * s, lc / (s * s));
    let src = lat.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..lh {
        for x in 0..lw {
            let v = &src[(y * lw + x) * lc..][..lc];
            for dy in 0..s {
                let row = ((y * s + dy) * w + x * s) * c;
                out[row..row + s * c].copy_from_slice(&v[dy * s * c..][..s * c]);
            }
        }
    }
    Tensor::new([h, w, c], out)
}

/// Pixels in `[0,1]` to model space `[-1,1]`.
pub fn to_signed(img: &Tensor) -> Tensor {
    Tensor::from_fn(img.shape().to_vec(), |i| img.data()[i] * 2.0 - 1.0)
}

/// Model space back to pixels, clamped to `[0,1]`.
pub fn to_unit(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape().to_vec(), |i| ((x.data()[i] + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Image in `[0,1]` straight to a model-space latent.
pub fn image_to_latent(img: &Tensor, s: usize) -> Result<Tensor> {
    encode_latent(&to_signed(img), s)
}

pub fn latent_to_image(lat: &Tensor, s: usize) -> Result<Tensor> {
    Ok(to_unit(&decode_latent(lat, s)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn stride_one_is_identity() {
        let x = Tensor::randn([4, 6, 3], 1.0, &mut Rng::new(1));
        assert!(encode_latent(&x, 1).unwrap().bitwise_eq(&x));
        assert!(decode_latent(&x, 1).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn blocks_are_row_major() {
        let x = Tensor::from_fn([4, 4, 1], |i| i as f64);
        let z = encode_latent(&x, 2).unwrap();
        assert_eq!(z.shape(), &[2, 2, 4]);
        assert_eq!(&z.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&z.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&z.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
        assert!(decode_latent(&z, 2).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let x = Tensor::randn([8, 12, 3], 1.0, &mut Rng::new(2));
        assert!(decode_latent(&encode_latent(&x, 2).unwrap(), 2).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn indivisible_extent_is_an_error() {
        assert!(matches!(encode_latent(&Tensor::zeros([5, 4, 1]), 2), Err(Error::Dimension(_))));
    }
}
