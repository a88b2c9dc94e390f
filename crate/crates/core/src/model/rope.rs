//! Three-axis rotary position embedding.
//!
//! A head of width `hd` is split into `(t, y, x)` groups of `hd/4`,
//! `3hd/8` and `3hd/8` channels. Inside a group of `n` channels, the pair
//! `(2j, 2j+1)` turns by `pos · base^(-2j/n)`.

use std::sync::Arc;

use super::sequence::Position;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Channel counts of the `(t, y, x)` groups.
pub fn axis_split(head_dim: usize) -> Result<[usize; 3]> {
    if head_dim == 0 || head_dim % 16 != 0 {
        return Err(Error::Config(format!(
            "head_dim {head_dim} cannot be split 2:3:3 into channel pairs (needs a multiple of 16)"
        )));
    }
    let e = head_dim / 8;
    Ok([2 * e, 3 * e, 3 * e])
}

/// Per-row cos/sin tables of `rows × (n_heads·hd/2)` entries, one copy
/// per head, ready for [`Tape::rope`] on a `[rows × d]` input.
#[derive(Clone, Debug)]
pub struct RopeTables {
    pub cos: Arc<[f64]>,
    pub sin: Arc<[f64]>,
}

impl RopeTables {
    pub fn new(positions: &[Position], head_dim: usize, n_heads: usize, base: f64) -> Result<Self> {
        let split = axis_split(head_dim)?;
        let half = head_dim / 2;
        let mut angles = Vec::with_capacity(half);
        let mut cos = Vec::with_capacity(positions.len() * half * n_heads);
        let mut sin = Vec::with_capacity(cos.capacity());
        for pos in positions {
            angles.clear();
            for (axis, &n) in split.iter().enumerate() {
                let p = pos.map_or(0.0, |p| p[axis] as f64);
                for j in 0..n / 2 {
                    angles.push(p * base.powf(-2.0 * j as f64 / n as f64));
                }
            }
            for _ in 0..n_heads {
                for a in &angles {
                    // Exact identity for the text sentinel and for zero angles.
                    let (s, c) = if *a == 0.0 { (0.0, 1.0) } else { a.sin_cos() };
                    cos.push(c);
                    sin.push(s);
                }
            }
        }
        Ok(Self { cos: cos.into(), sin: sin.into() })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.rope(x, self.cos.clone(), self.sin.clone())
    }
}

/// Rotates `q` and `k` (`[L × n_heads·hd]`) at the given positions.
pub fn rope3d_apply(
    q: &Tensor,
    k: &Tensor,
    positions: &[Position],
    head_dim: usize,
    base: f64,
) -> Result<(Tensor, Tensor)> {
    let n_heads = q.last_dim() / head_dim.max(1);
    let tables = RopeTables::new(positions, head_dim, n_heads, base)?;
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q), tape.constant(k));
    let qr = tables.apply(&mut tape, qv)?;
    let kr = tables.apply(&mut tape, kv)?;
    Ok((tape.tensor(qr), tape.tensor(kr)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    const BASE: f64 = 10_000.0;

    fn norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn split_is_two_three_three() {
        assert_eq!(axis_split(16).unwrap(), [4, 6, 6]);
        assert_eq!(axis_split(32).unwrap(), [8, 12, 12]);
        assert!(matches!(axis_split(8), Err(Error::Config(_))));
    }

    #[test]
    fn origin_and_text_are_identity() {
        let mut rng = Rng::new(1);
        let q = Tensor::randn([2, 16], 1.0, &mut rng);
        let (qr, _) = rope3d_apply(&q, &q, &[Some([0, 0, 0]), None], 16, BASE).unwrap();
        assert!(qr.bitwise_eq(&q));
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = Rng::new(2);
        let q = Tensor::randn([3, 32], 1.0, &mut rng);
        let pos = [Some([1, 5, 3]), Some([0, 7, 2]), Some([1, 1, 1])];
        let (qr, _) = rope3d_apply(&q, &q, &pos, 16, BASE).unwrap();
        for r in 0..3 {
            assert!((norm(qr.row(r)) - norm(q.row(r))).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_depend_on_relative_position_only() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let q = Tensor::randn([1, 16], 1.0, &mut rng);
            let k = Tensor::randn([1, 16], 1.0, &mut rng);
            let a = [rng.below(4), rng.below(8), rng.below(8)];
            let b = [rng.below(4), rng.below(8), rng.below(8)];
            let delta = [rng.below(5), rng.below(9), rng.below(9)];
            let shift = |p: [usize; 3]| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]];
            let score = |pa: [usize; 3], pb: [usize; 3]| {
                let (qa, _) = rope3d_apply(&q, &q, &[Some(pa)], 16, BASE).unwrap();
                let (_, kb) = rope3d_apply(&k, &k, &[Some(pb)], 16, BASE).unwrap();
                dot(qa.data(), kb.data())
            };
            let s0 = score(a, b);
            let s1 = score(shift(a), shift(b));
            assert!((s0 - s1).abs() < 1e-9, "{s0} vs {s1}");
        }
    }
}
