//! The unified token sequence `[text; cond; target]`.

use std::ops::Range;

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Text,
    Cond,
    Target,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Text, Segment::Cond, Segment::Target];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::Text => "text",
            Segment::Cond => "cond",
            Segment::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub text: usize,
    pub cond: usize,
    pub target: usize,
}

impl Layout {
    pub fn new(text: usize, cond: usize, target: usize) -> Result<Self> {
        if cond != target {
            return Err(Error::Dimension(format!(
                "cond and target segments differ: {cond} vs {target}"
            )));
        }
        Ok(Self { text, cond, target })
    }

    pub fn len(&self) -> usize {
        self.text + self.cond + self.target
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, s: Segment) -> Range<usize> {
        match s {
            Segment::Text => 0..self.text,
            Segment::Cond => self.text..self.text + self.cond,
            Segment::Target => self.text + self.cond..self.len(),
        }
    }

    pub fn segment_of(&self, i: usize) -> Segment {
        if i < self.text {
            Segment::Text
        } else if i < self.text + self.cond {
            Segment::Cond
        } else {
            Segment::Target
        }
    }
}

/// Rotary position of a token; text tokens carry none and stay unrotated.
pub type Position = Option<[usize; 3]>;

#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub layout: Layout,
    pub positions: Vec<Position>,
}

impl TokenSequence {
    pub fn segment(&self, s: Segment) -> Tensor {
        let d = self.tokens.last_dim();
        let r = self.layout.range(s);
        Tensor::new([r.len(), d], self.tokens.data()[r.start * d..r.end * d].to_vec())
            .expect("layout covers the tokens")
    }
}

/// Positions for a sequence whose frame tokens follow `frame_positions`.
pub fn sequence_positions(text: usize, frames: &[[usize; 3]]) -> Vec<Position> {
    std::iter::repeat(None).take(text).chain(frames.iter().copied().map(Some)).collect()
}

pub fn build_sequence(
    text: &Tensor,
    cond: &Tensor,
    target: &Tensor,
    frame_positions: &[[usize; 3]],
) -> Result<TokenSequence> {
    let d = text.last_dim();
    for (t, op) in [(cond, "build_sequence(cond)"), (target, "build_sequence(target)")] {
        if t.rank() != 2 || t.last_dim() != d || text.rank() != 2 {
            return Err(shape_mismatch(op, text.shape(), t.shape()));
        }
    }
    let layout = Layout::new(text.rows(), cond.rows(), target.rows())?;
    if frame_positions.len() != layout.cond + layout.target {
        return Err(Error::Dimension(format!(
            "{} frame positions for {} frame tokens",
            frame_positions.len(),
            layout.cond + layout.target
        )));
    }
    let mut data = Vec::with_capacity(layout.len() * d);
    for t in [text, cond, target] {
        data.extend_from_slice(t.data());
    }
    Ok(TokenSequence {
        tokens: Tensor::new([layout.len(), d], data)?,
        layout,
        positions: sequence_positions(layout.text, frame_positions),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn slicing_recovers_inputs() {
        let mut rng = Rng::new(1);
        let text = Tensor::randn([3, 4], 1.0, &mut rng);
        let cond = Tensor::randn([5, 4], 1.0, &mut rng);
        let target = Tensor::randn([5, 4], 1.0, &mut rng);
        let pos: Vec<[usize; 3]> = (0..10).map(|i| [i / 5, i % 5, 0]).collect();
        let seq = build_sequence(&text, &cond, &target, &pos).unwrap();
        assert_eq!(seq.layout.len(), 3 + 2 * 5);
        assert!(seq.segment(Segment::Text).bitwise_eq(&text));
        assert!(seq.segment(Segment::Cond).bitwise_eq(&cond));
        assert!(seq.segment(Segment::Target).bitwise_eq(&target));
        assert_eq!(seq.positions[2], None);
        assert_eq!(seq.positions[3], Some([0, 0, 0]));
    }

    #[test]
    fn padded_text_keeps_its_slots() {
        let text = Tensor::zeros([6, 2]);
        let f = Tensor::ones([1, 2]);
        let seq = build_sequence(&text, &f, &f, &[[0, 0, 0], [1, 0, 0]]).unwrap();
        assert_eq!(seq.layout.text, 6);
        assert_eq!(seq.layout.range(Segment::Cond), 6..7);
        assert_eq!(seq.layout.segment_of(7), Segment::Target);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let r = build_sequence(&Tensor::zeros([1, 2]), &Tensor::zeros([1, 3]), &Tensor::zeros([1, 3]), &[[0; 3]; 2]);
        assert!(r.is_err());
    }
}
