//! Segment-level attention masks.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::sequence::{Layout, Segment};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, MASK_BIG};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskStrategy {
    /// Text and condition never see each other.
    A,
    /// A, and target queries cannot read condition keys.
    B,
    /// A, and condition queries cannot read condition keys.
    C,
    NoMask,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [Self::A, Self::B, Self::C, Self::NoMask];

    pub fn name(self) -> &'static str {
        match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::NoMask => "none",
        }
    }

    /// Whether a query in `q` may not attend a key in `k`. For MaskC the
    /// diagonal of the cond block is handled by [`Mask::blocked`].
    fn blocks_segments(self, q: Segment, k: Segment) -> bool {
        use Segment::*;
        let a = matches!((q, k), (Text, Cond) | (Cond, Text));
        match self {
            Self::NoMask => false,
            Self::A => a,
            Self::B => a || (q, k) == (Target, Cond),
            Self::C => a || (q, k) == (Cond, Cond),
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" | "maska" => Ok(Self::A),
            "b" | "maskb" => Ok(Self::B),
            "c" | "maskc" => Ok(Self::C),
            "none" | "nomask" => Ok(Self::NoMask),
            other => Err(Error::Config(format!(
                "unknown mask strategy {other:?} (expected a, b, c or none)"
            ))),
        }
    }
}

/// An additive `L × L` bias: 0 where attention is allowed, `-MASK_BIG`
/// where it is blocked.
#[derive(Clone, Debug)]
pub struct Mask {
    pub strategy: MaskStrategy,
    pub layout: Layout,
    pub c_diagonal: bool,
    bias: Arc<[f64]>,
}

impl Mask {
    pub fn blocked(&self, q: usize, k: usize) -> bool {
        blocked(self.strategy, self.layout, self.c_diagonal, q, k)
    }

    pub fn is_empty(&self) -> bool {
        self.bias.iter().all(|&b| b == 0.0)
    }

    pub fn bias(&self) -> &Arc<[f64]> {
        &self.bias
    }

    pub fn to_tensor(&self) -> Tensor {
        let l = self.layout.len();
        Tensor::new([l, l], self.bias.to_vec()).expect("square mask")
    }
}

fn blocked(s: MaskStrategy, layout: Layout, c_diagonal: bool, q: usize, k: usize) -> bool {
    let (sq, sk) = (layout.segment_of(q), layout.segment_of(k));
    if s == MaskStrategy::C && sq == Segment::Cond && sk == Segment::Cond && q == k {
        return c_diagonal;
    }
    s.blocks_segments(sq, sk)
}

/// `c_diagonal` selects whether MaskC also blocks a condition token from
/// attending to itself.
pub fn build_mask(strategy: MaskStrategy, layout: Layout, c_diagonal: bool) -> Result<Mask> {
    let l = layout.len();
    let mut bias = vec![0.0; l * l];
    for q in 0..l {
        let row = &mut bias[q * l..(q + 1) * l];
        for (k, b) in row.iter_mut().enumerate() {
            if blocked(strategy, layout, c_diagonal, q, k) {
                *b = -MASK_BIG;
            }
        }
        if row.iter().all(|&b| b != 0.0) {
            return Err(Error::Mask(format!(
                "strategy {strategy} with layout {layout:?} blocks every key of query {q}"
            )));
        }
    }
    Ok(Mask { strategy, layout, c_diagonal, bias: bias.into() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Layout {
        Layout::new(2, 3, 3).unwrap()
    }

    #[test]
    fn no_mask_is_zero() {
        assert!(build_mask(MaskStrategy::NoMask, layout(), true).unwrap().is_empty());
    }

    #[test]
    fn mask_a_blocks_exactly_text_cond_pairs() {
        let m = build_mask(MaskStrategy::A, layout(), true).unwrap().to_tensor();
        for i in 0..8 {
            for j in 0..8 {
                let want = (i < 2 && (2..5).contains(&j)) || (j < 2 && (2..5).contains(&i));
                let v = m.at(&[i, j]);
                assert_eq!(v == -MASK_BIG, want, "({i},{j})");
                assert!(v == 0.0 || v == -MASK_BIG);
            }
        }
    }

    #[test]
    fn b_and_c_extend_a() {
        let l = layout();
        let a = build_mask(MaskStrategy::A, l, true).unwrap();
        for s in [MaskStrategy::B, MaskStrategy::C] {
            let m = build_mask(s, l, true).unwrap();
            let mut extra = 0;
            for i in 0..8 {
                for j in 0..8 {
                    assert!(!a.blocked(i, j) || m.blocked(i, j));
                    extra += (m.blocked(i, j) && !a.blocked(i, j)) as usize;
                }
            }
            assert_eq!(extra, 9);
        }
    }

    #[test]
    fn c_diagonal_switch() {
        let l = layout();
        assert!(build_mask(MaskStrategy::C, l, true).unwrap().blocked(3, 3));
        let open = build_mask(MaskStrategy::C, l, false).unwrap();
        assert!(!open.blocked(3, 3) && open.blocked(3, 4));
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        // No target keys left for cond queries to read.
        let l = Layout { text: 1, cond: 2, target: 0 };
        assert!(matches!(build_mask(MaskStrategy::C, l, true), Err(Error::Mask(_))));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in MaskStrategy::ALL {
            assert_eq!(s.name().parse::<MaskStrategy>().unwrap(), s);
        }
        assert!("d".parse::<MaskStrategy>().is_err());
    }
}
