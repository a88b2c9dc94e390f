//! Replication patchify: each frame is repeated `p` times along time, so a
//! `p × p × p` token never mixes the condition frame with the target.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// A condition latent and a target latent of identical shape `[h×w×c]`.
#[derive(Clone, Debug)]
pub struct TwoFrameLatents {
    pub cond: Tensor,
    pub target: Tensor,
}

impl TwoFrameLatents {
    pub fn new(cond: Tensor, target: Tensor) -> Result<Self> {
        if cond.shape() != target.shape() || cond.rank() != 3 {
            return Err(Error::Dimension(format!(
                "frames must share one [h×w×c] shape, got {:?} and {:?}",
                cond.shape(),
                target.shape()
            )));
        }
        Ok(Self { cond, target })
    }
}

/// Geometry of one patchified frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
}

impl PatchGeometry {
    pub fn new(h: usize, w: usize, c: usize, p: usize) -> Result<Self> {
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Dimension(format!("latent {h}×{w} not divisible by patch {p}")));
        }
        Ok(Self { h, w, c, p })
    }

    pub fn of(lat: &Tensor, p: usize) -> Result<Self> {
        match *lat.shape() {
            [h, w, c] => Self::new(h, w, c, p),
            _ => Err(Error::Dimension(format!("latent must be [h×w×c], got {:?}", lat.shape()))),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h / self.p, self.w / self.p)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn width(&self) -> usize {
        self.p * self.p * self.p * self.c
    }

    pub fn latent_numel(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Latent element feeding token element `(n, e)`.
    fn source(&self, n: usize, e: usize) -> usize {
        let (_, gw) = self.grid();
        let (gy, gx) = (n / gw, n % gw);
        let ch = e % self.c;
        let rest = e / self.c;
        let dx = rest % self.p;
        let dy = (rest / self.p) % self.p;
        ((gy * self.p + dy) * self.w + gx * self.p + dx) * self.c + ch
    }

    /// Flat gather index from a latent to its `[tokens × width]` matrix.
    pub fn index(&self) -> Arc<[usize]> {
        let width = self.width();
        (0..self.tokens() * width).map(|i| self.source(i / width, i % width)).collect()
    }

    /// Gather index from tokens back to the latent, reading temporal copy `tau`.
    pub fn inverse_index(&self, tau: usize) -> Arc<[usize]> {
        let mut inv = vec![0; self.latent_numel()];
        let width = self.width();
        let per_copy = width / self.p;
        for n in 0..self.tokens() {
            for e in tau * per_copy..(tau + 1) * per_copy {
                inv[self.source(n, e)] = n * width + e;
            }
        }
        inv.into()
    }
}

/// Gather index from a stacked `[2 × h×w×c]` (cond, target) video to the
/// `[2N × width]` token matrix. Each frame is repeated `p` times in time
/// before the `p × p × p` grouping, so every token reads one frame only.
pub fn video_index(g: PatchGeometry) -> Arc<[usize]> {
    let per_frame = g.index();
    let n = g.latent_numel();
    (0..2).flat_map(|f| per_frame.iter().map(move |&i| f * n + i)).collect()
}

pub fn patchify_video_var(tape: &mut Tape, video: Var, g: PatchGeometry) -> Result<Var> {
    tape.gather(video, video_index(g), vec![2 * g.tokens(), g.width()])
}

pub fn patchify_frame(lat: &Tensor, p: usize) -> Result<Tensor> {
    let g = PatchGeometry::of(lat, p)?;
    let src = lat.data();
    let data = g.index().iter().map(|&i| src[i]).collect();
    Tensor::new([g.tokens(), g.width()], data)
}

pub fn patchify_var(tape: &mut Tape, lat: Var, g: PatchGeometry) -> Result<Var> {
    tape.gather(lat, g.index(), vec![g.tokens(), g.width()])
}

/// Token positions `(t, y, x)` on the patch grid.
pub fn frame_positions(g: PatchGeometry, t: usize) -> Vec<[usize; 3]> {
    let (gh, gw) = g.grid();
    (0..gh).flat_map(|y| (0..gw).map(move |x| [t, y, x])).collect()
}

/// Patchified frames plus per-token positions (cond first, at `t = 0`).
#[derive(Clone, Debug)]
pub struct Patchified {
    pub cond: Tensor,
    pub target: Tensor,
    pub positions: Vec<[usize; 3]>,
}

pub fn patchify_replicate(lat: &TwoFrameLatents, p: usize) -> Result<Patchified> {
    let g = PatchGeometry::of(&lat.cond, p)?;
    let mut positions = frame_positions(g, 0);
    positions.extend(frame_positions(g, 1));
    Ok(Patchified {
        cond: patchify_frame(&lat.cond, p)?,
        target: patchify_frame(&lat.target, p)?,
        positions,
    })
}

/// How to fold the temporal copies back together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fold {
    /// Copies must agree bitwise (reconstructing an input).
    Exact,
    /// Average the copies (inverting a model output).
    Mean,
}

pub fn unpatchify_frame(tokens: &Tensor, g: PatchGeometry, fold: Fold) -> Result<Tensor> {
    if tokens.shape() != [g.tokens(), g.width()] {
        return Err(Error::Dimension(format!(
            "tokens {:?} do not match layout [{}, {}]",
            tokens.shape(),
            g.tokens(),
            g.width()
        )));
    }
    let src = tokens.data();
    let first = g.inverse_index(0);
    let mut out: Vec<f64> = first.iter().map(|&i| src[i]).collect();
    for tau in 1..g.p {
        let idx = g.inverse_index(tau);
        for (o, &i) in out.iter_mut().zip(idx.iter()) {
            match fold {
                Fold::Exact if src[i].to_bits() != o.to_bits() => {
                    return Err(Error::Contract(format!(
                        "temporal copy {tau} disagrees with copy 0 at token element {i}"
                    )))
                }
                Fold::Exact => {}
                Fold::Mean => *o += src[i],
            }
        }
    }
    if fold == Fold::Mean && g.p > 1 {
        let inv = 1.0 / g.p as f64;
        out.iter_mut().for_each(|o| *o *= inv);
    }
    Tensor::new([g.h, g.w, g.c], out)
}

/// Averages the temporal copies of `tokens` into a `[h×w×c]` latent.
pub fn unpatchify_mean_var(tape: &mut Tape, tokens: Var, g: PatchGeometry) -> Result<Var> {
    let shape = vec![g.h, g.w, g.c];
    let mut acc = tape.gather(tokens, g.inverse_index(0), shape.clone())?;
    for tau in 1..g.p {
        let copy = tape.gather(tokens, g.inverse_index(tau), shape.clone())?;
        acc = tape.add(acc, copy)?;
    }
    Ok(if g.p > 1 { tape.scale(acc, 1.0 / g.p as f64) } else { acc })
}

pub fn unpatchify(p: &Patchified, g: PatchGeometry) -> Result<TwoFrameLatents> {
    TwoFrameLatents::new(
        unpatchify_frame(&p.cond, g, Fold::Exact)?,
        unpatchify_frame(&p.target, g, Fold::Exact)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn frames(h: usize, c: usize, seed: u64) -> TwoFrameLatents {
        let mut rng = Rng::new(seed);
        TwoFrameLatents::new(
            Tensor::randn([h, h, c], 1.0, &mut rng),
            Tensor::randn([h, h, c], 1.0, &mut rng),
        )
        .unwrap()
    }

    #[test]
    fn unit_patch_is_per_pixel() {
        let lat = frames(4, 3, 1);
        let p = patchify_replicate(&lat, 1).unwrap();
        assert_eq!(p.cond.shape(), &[16, 3]);
        assert_eq!(p.cond.data(), lat.cond.data());
    }

    #[test]
    fn first_token_holds_its_patch_twice() {
        // Values encode (y, x) so the oracle can read positions back.
        let cond = Tensor::from_fn([4, 4, 1], |i| 100.0 + i as f64);
        let target = Tensor::from_fn([4, 4, 1], |i| 200.0 + i as f64);
        let p = patchify_replicate(&TwoFrameLatents::new(cond, target).unwrap(), 2).unwrap();
        assert_eq!(p.cond.shape(), &[4, 8]);
        assert_eq!(p.target.shape(), &[4, 8]);
        let patch = [100.0, 101.0, 104.0, 105.0];
        assert_eq!(&p.cond.row(0)[..4], &patch);
        assert_eq!(&p.cond.row(0)[4..], &patch);
        assert!(p.target.row(0).iter().all(|&v| v >= 200.0));
        assert_eq!(p.positions[0], [0, 0, 0]);
        assert_eq!(p.positions[3], [0, 1, 1]);
        assert_eq!(p.positions[4], [1, 0, 0]);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let lat = frames(8, 12, 2);
        let g = PatchGeometry::of(&lat.cond, 2).unwrap();
        let back = unpatchify(&patchify_replicate(&lat, 2).unwrap(), g).unwrap();
        assert!(back.cond.bitwise_eq(&lat.cond));
        assert!(back.target.bitwise_eq(&lat.target));
    }

    #[test]
    fn exact_fold_rejects_disagreeing_copies_and_mean_averages() {
        let lat = frames(4, 1, 3);
        let g = PatchGeometry::of(&lat.cond, 2).unwrap();
        let mut t = patchify_frame(&lat.cond, 2).unwrap();
        t.data_mut()[4] += 1.0;
        assert!(unpatchify_frame(&t, g, Fold::Exact).is_err());
        let m = unpatchify_frame(&t, g, Fold::Mean).unwrap();
        assert!((m.data()[0] - (lat.cond.data()[0] + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn tape_fold_matches_eager() {
        let g = PatchGeometry::new(4, 4, 3, 2).unwrap();
        let t = Tensor::randn([4, 24], 1.0, &mut Rng::new(4));
        let mut tape = Tape::new();
        let v = tape.constant(&t);
        let out = unpatchify_mean_var(&mut tape, v, g).unwrap();
        let eager = unpatchify_frame(&t, g, Fold::Mean).unwrap();
        assert!(tape.tensor(out).max_abs_diff(&eager).unwrap() < 1e-15);
    }

    #[test]
    fn indivisible_extent_is_an_error() {
        assert!(patchify_frame(&Tensor::zeros([6, 4, 1]), 4).is_err());
    }
}
