//! Procedural two-frame datasets: scenes with one coloured shape, and the
//! edge, depth and subject pairings built from them.

pub mod dataset;
pub mod pnm;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::diffusion::Example;
use crate::error::{Error, Result};
use crate::model::codec;
use crate::model::vocab::Vocabulary;
use crate::task::Task;
use crate::tensor::{Rng, Tensor};

pub use dataset::{load_dataset, write_dataset, Manifest};

/// Sobel magnitude threshold for the binary edge operator.
pub const EDGE_THRESHOLD: f64 = 0.25;
pub const NEAR_DEPTH: f64 = 0.25;
pub const FAR_DEPTH: f64 = 1.0;

pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [30, 150, 30]),
    ("blue", [40, 80, 220]),
    ("yellow", [230, 210, 40]),
    ("cyan", [40, 200, 210]),
    ("magenta", [180, 30, 180]),
];

pub const BACKGROUNDS: [(&str, [u8; 3]); 3] = [
    ("bg_black", [20, 20, 20]),
    ("bg_white", [235, 235, 235]),
    ("bg_gray", [128, 128, 128]),
];

/// Side lengths behind the `small` / `large` caption words.
pub const SMALL: usize = 10;
pub const LARGE: usize = 16;
const MARGIN: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape {s:?}")))
    }
}

/// One shape on a flat background. `(x, y)` is the top-left corner of
/// the shape's `size×size` bounding box; `shape: None` renders background only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub shape: Option<Shape>,
    pub color: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub background: usize,
}

impl SceneSpec {
    pub fn background_only(background: usize) -> Self {
        Self { shape: None, color: 0, x: 0, y: 0, size: 0, background }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.background >= BACKGROUNDS.len() {
            return Err(Error::Config(format!("background index {} out of range", self.background)));
        }
        if self.shape.is_none() {
            return Ok(());
        }
        if self.color >= COLORS.len() {
            return Err(Error::Config(format!("color index {} out of range", self.color)));
        }
        if self.size == 0 || self.x + self.size > w || self.y + self.size > h {
            return Err(Error::Config(format!(
                "shape box ({}, {}) size {} does not fit a {h}×{w} canvas",
                self.x, self.y, self.size
            )));
        }
        Ok(())
    }

    /// Whether pixel `(row, col)` belongs to the shape. Pixel centres are
    /// tested, so the pixel set is exact and antialiasing-free.
    fn covers(&self, row: usize, col: usize) -> bool {
        let Some(shape) = self.shape else { return false };
        let (x0, y0, s) = (self.x as f64, self.y as f64, self.size as f64);
        let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
        if px < x0 || py < y0 || px >= x0 + s || py >= y0 + s {
            return false;
        }
        let (cx, cy) = (x0 + s / 2.0, y0 + s / 2.0);
        match shape {
            Shape::Square => true,
            Shape::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= (s / 2.0).powi(2),
            // apex at the top centre, base along the bottom edge
            Shape::Triangle => (px - cx).abs() <= (py - y0) / 2.0,
        }
    }

    fn hpos(&self, w: usize) -> &'static str {
        third(2 * self.x + self.size, 2 * w, ["left", "center", "right"])
    }

    fn vpos(&self, h: usize) -> &'static str {
        third(2 * self.y + self.size, 2 * h, ["top", "middle", "bottom"])
    }
}

fn third(twice_centre: usize, twice_extent: usize, words: [&'static str; 3]) -> &'static str {
    let k = (3 * twice_centre / twice_extent).min(2);
    words[k]
}

/// Row-major `H×W` foreground mask.
pub fn shape_mask(spec: &SceneSpec, h: usize, w: usize) -> Result<Vec<bool>> {
    spec.validate(h, w)?;
    Ok((0..h * w).map(|i| spec.covers(i / w, i % w)).collect())
}

/// Rasterizes `spec` to an `[H×W×3]` image in `[0,1]`.
pub fn render_scene(spec: &SceneSpec, h: usize, w: usize) -> Result<Tensor> {
    let mask = shape_mask(spec, h, w)?;
    let bg = BACKGROUNDS[spec.background].1;
    let fg = COLORS.get(spec.color).map_or(bg, |c| c.1);
    let mut data = Vec::with_capacity(h * w * 3);
    for &m in &mask {
        let rgb = if m { fg } else { bg };
        data.extend(rgb.iter().map(|&v| v as f64 / 255.0));
    }
    Tensor::new([h, w, 3], data)
}

fn luminance(img: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let [h, w, c] = *img.shape() else {
        return Err(Error::Image(format!("expected [H×W×C], got {:?}", img.shape())));
    };
    let gray = match c {
        1 => img.data().to_vec(),
        3 => img.data().chunks(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect(),
        _ => return Err(Error::Image(format!("expected 1 or 3 channels, got {c}"))),
    };
    Ok((h, w, gray))
}

/// Sobel gradient magnitude of the luminance with clamp-to-edge padding.
pub fn sobel_magnitude(img: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w, gray) = luminance(img)?;
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        gray[r * w + c]
    };
    let mut mag = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            mag.push((gx * gx + gy * gy).sqrt());
        }
    }
    Ok((h, w, mag))
}

/// Binary edge image: Sobel magnitude above [`EDGE_THRESHOLD`], replicated
/// over three channels. This is a thresholded Sobel operator, not Canny.
pub fn edge_map(img: &Tensor) -> Result<Tensor> {
    let (h, w, mag) = sobel_magnitude(img)?;
    let data = mag
        .iter()
        .flat_map(|&m| [if m > EDGE_THRESHOLD { 1.0 } else { 0.0 }; 3])
        .collect();
    Tensor::new([h, w, 3], data)
}

/// Two-level depth: [`NEAR_DEPTH`] on the shape, [`FAR_DEPTH`] elsewhere.
pub fn depth_map(spec: &SceneSpec, h: usize, w: usize) -> Result<Tensor> {
    let mask = shape_mask(spec, h, w)?;
    let data = mask
        .iter()
        .flat_map(|&m| [if m { NEAR_DEPTH } else { FAR_DEPTH }; 3])
        .collect();
    Tensor::new([h, w, 3], data)
}

/// `color shape hpos vpos size bg` for the spatially aligned tasks.
pub fn scene_caption(spec: &SceneSpec, h: usize, w: usize) -> String {
    let Some(shape) = spec.shape else {
        return BACKGROUNDS[spec.background].0.to_string();
    };
    format!(
        "{} {shape} {} {} {} {}",
        COLORS[spec.color].0,
        spec.hpos(w),
        spec.vpos(h),
        size_word(spec.size),
        BACKGROUNDS[spec.background].0
    )
}

fn size_word(size: usize) -> &'static str {
    if size >= (SMALL + LARGE) / 2 {
        "large"
    } else {
        "small"
    }
}

/// A shape with random kind, colour, size, position and background.
pub fn random_scene(h: usize, w: usize, rng: &mut Rng) -> SceneSpec {
    let shape = Shape::ALL[rng.below(3)];
    let color = rng.below(COLORS.len());
    let size = rng.range_inclusive(SMALL.min(h.min(w)), LARGE.min(h.min(w)));
    let x = rng.range_inclusive(0, w - size);
    let y = rng.range_inclusive(0, h - size);
    let background = rng.below(BACKGROUNDS.len());
    SceneSpec { shape: Some(shape), color, x, y, size, background }
}

/// Re-places the subject of `spec` for the target frame: one of nine
/// anchors, one of two sizes, a fresh background. Shape and colour are kept.
pub fn resample_subject(spec: &SceneSpec, h: usize, w: usize, rng: &mut Rng) -> SceneSpec {
    let size = if rng.bernoulli(0.5) { SMALL } else { LARGE }.min(h.min(w) - 2 * MARGIN);
    let anchor = |extent: usize, k: usize| match k {
        0 => MARGIN,
        1 => (extent - size) / 2,
        _ => extent - size - MARGIN,
    };
    let x = anchor(w, rng.below(3));
    let y = anchor(h, rng.below(3));
    let background = rng.below(BACKGROUNDS.len());
    SceneSpec { x, y, size, background, ..*spec }
}

/// Subject pair: the cond frame shows the subject as drawn in `spec`, the
/// target re-places it. The caption names the noun and the target's layout
/// but not the colour, which must be read from the cond frame.
pub fn subject_pair(spec: &SceneSpec, h: usize, w: usize, rng: &mut Rng) -> Result<(Tensor, Tensor, String)> {
    let shape = spec
        .shape
        .ok_or_else(|| Error::Config("subject pair needs a shape".into()))?;
    let cond = render_scene(spec, h, w)?;
    let t = resample_subject(spec, h, w, rng);
    let target = render_scene(&t, h, w)?;
    let caption = format!(
        "{shape} {} {} {} {}",
        t.hpos(w),
        t.vpos(h),
        size_word(t.size),
        BACKGROUNDS[t.background].0
    );
    Ok((cond, target, caption))
}

/// One generated pair in image space.
#[derive(Clone, Debug)]
pub struct TwoFrameSample {
    pub cond: Tensor,
    pub target: Tensor,
    pub caption: String,
    pub ids: Vec<usize>,
    pub task: Task,
}

/// Bitwise equality of both images plus caption, ids and task.
impl PartialEq for TwoFrameSample {
    fn eq(&self, other: &Self) -> bool {
        self.cond.bitwise_eq(&other.cond)
            && self.target.bitwise_eq(&other.target)
            && self.caption == other.caption
            && self.ids == other.ids
            && self.task == other.task
    }
}

impl TwoFrameSample {
    /// Converts to model space with latent pixel-shuffle factor `s`.
    pub fn to_example(&self, s: usize) -> Result<Example> {
        Ok(Example {
            cond: codec::image_to_latent(&self.cond, s)?,
            target: codec::image_to_latent(&self.target, s)?,
            ids: self.ids.clone(),
            task: self.task,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataOptions {
    pub image_size: usize,
    pub text_len: usize,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self { image_size: 32, text_len: 6 }
    }
}

/// Generates sample `index` of a `(task, seed)` stream. Every sample owns
/// its random stream, so generation order does not matter.
pub fn generate_sample(task: Task, seed: u64, index: u64, opts: &DataOptions) -> Result<TwoFrameSample> {
    let (h, w) = (opts.image_size, opts.image_size);
    let mut rng = Rng::new(seed).derive_str(task.name()).derive(index);
    let spec = random_scene(h, w, &mut rng);
    let (cond, target, caption) = match task {
        Task::Canny => {
            let target = render_scene(&spec, h, w)?;
            (edge_map(&target)?, target, scene_caption(&spec, h, w))
        }
        Task::Depth => (
            depth_map(&spec, h, w)?,
            render_scene(&spec, h, w)?,
            scene_caption(&spec, h, w),
        ),
        Task::Subject => subject_pair(&spec, h, w, &mut rng)?,
    };
    let ids = Vocabulary::shipped().encode(&caption, opts.text_len)?;
    Ok(TwoFrameSample { cond, target, caption, ids, task })
}

/// A deterministic sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub seed: u64,
    pub options: DataOptions,
    pub samples: Vec<TwoFrameSample>,
}

impl Dataset {
    pub fn examples(&self, s: usize) -> Result<Vec<Example>> {
        self.samples.iter().map(|x| x.to_example(s)).collect()
    }
}

pub fn make_dataset(task: Task, n: usize, seed: u64) -> Result<Dataset> {
    make_dataset_with(task, n, seed, DataOptions::default())
}

/// Samples `offset..offset+n` of the stream; a held-out split is simply a
/// range past the training range.
pub fn make_dataset_range(task: Task, offset: u64, n: usize, seed: u64, options: DataOptions) -> Result<Dataset> {
    let samples = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_sample(task, seed, offset + i, &options))
        .collect::<Result<_>>()?;
    Ok(Dataset { task, seed, options, samples })
}

pub fn make_dataset_with(task: Task, n: usize, seed: u64, options: DataOptions) -> Result<Dataset> {
    make_dataset_range(task, 0, n, seed, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canvas() -> (usize, usize) {
        (32, 32)
    }

    #[test]
    fn background_only_is_constant() {
        let (h, w) = canvas();
        let img = render_scene(&SceneSpec::background_only(2), h, w).unwrap();
        let first = img.data()[0];
        assert!(img.data().iter().all(|&v| v == first));
    }

    #[test]
    fn centred_square_covers_size_squared_pixels() {
        let (h, w) = canvas();
        for size in [1, 7, 10, 16, 32] {
            let off = (32 - size) / 2;
            let spec = SceneSpec { shape: Some(Shape::Square), color: 0, x: off, y: off, size, background: 0 };
            let n = shape_mask(&spec, h, w).unwrap().iter().filter(|&&m| m).count();
            assert_eq!(n, size * size);
        }
    }

    #[test]
    fn out_of_canvas_is_rejected() {
        let spec = SceneSpec { shape: Some(Shape::Circle), color: 0, x: 20, y: 0, size: 13, background: 0 };
        assert!(render_scene(&spec, 32, 32).is_err());
        let spec = SceneSpec { background: 3, ..SceneSpec::background_only(0) };
        assert!(render_scene(&spec, 32, 32).is_err());
    }

    #[test]
    fn rendering_replays_bitwise() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let spec = random_scene(32, 32, &mut rng);
            let a = render_scene(&spec, 32, 32).unwrap();
            let b = render_scene(&spec, 32, 32).unwrap();
            assert!(a.bitwise_eq(&b));
        }
    }

    #[test]
    fn shapes_have_expected_pixel_sets() {
        let circle = SceneSpec { shape: Some(Shape::Circle), color: 0, x: 0, y: 0, size: 4, background: 0 };
        let m = shape_mask(&circle, 4, 4).unwrap();
        // radius 2 around (2,2): only the four corners fall outside
        let expect: Vec<bool> = (0..16).map(|i| ![0, 3, 12, 15].contains(&i)).collect();
        assert_eq!(m, expect);
        let tri = SceneSpec { shape: Some(Shape::Triangle), ..circle };
        let m = shape_mask(&tri, 4, 4).unwrap();
        let rows: Vec<usize> = m.chunks(4).map(|r| r.iter().filter(|&&b| b).count()).collect();
        assert_eq!(rows, vec![0, 2, 2, 4]);
    }

    #[test]
    fn every_colour_is_separated_from_every_background() {
        // the luminance step must clear the Sobel threshold (step × 4 > τ)
        let lum = |c: [u8; 3]| (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0;
        for (_, c) in COLORS {
            for (_, b) in BACKGROUNDS {
                assert!(4.0 * (lum(c) - lum(b)).abs() > EDGE_THRESHOLD * 1.2, "{c:?} on {b:?}");
            }
        }
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = Tensor::full([8, 8, 3], 0.7);
        assert!(edge_map(&img).unwrap().data().iter().all(|&v| v == 0.0));
    }

    fn convolve_oracle(gray: &[Vec<f64>], r: usize, c: usize) -> f64 {
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let h = gray.len() as isize;
        let w = gray[0].len() as isize;
        let (mut gx, mut gy) = (0.0, 0.0);
        for dr in 0..3 {
            for dc in 0..3 {
                let rr = (r as isize + dr as isize - 1).clamp(0, h - 1) as usize;
                let cc = (c as isize + dc as isize - 1).clamp(0, w - 1) as usize;
                gx += kx[dr][dc] * gray[rr][cc];
                gy += kx[dc][dr] * gray[rr][cc];
            }
        }
        (gx * gx + gy * gy).sqrt()
    }

    #[test]
    fn vertical_step_matches_direct_convolution() {
        let (h, w) = (6, 10);
        let img = Tensor::from_fn([h, w, 1], |i| if i % w >= 4 { 1.0 } else { 0.0 });
        let e = edge_map(&img).unwrap();
        let gray: Vec<Vec<f64>> = (0..h).map(|r| (0..w).map(|c| img.at(&[r, c, 0])).collect()).collect();
        for r in 0..h {
            for c in 0..w {
                let want = if convolve_oracle(&gray, r, c) > EDGE_THRESHOLD { 1.0 } else { 0.0 };
                assert_eq!(e.at(&[r, c, 0]), want);
            }
        }
        // the Sobel support straddles the step: columns 3 and 4 respond
        let cols: Vec<usize> = (0..w).filter(|&c| e.at(&[0, c, 0]) == 1.0).collect();
        assert_eq!(cols, vec![3, 4]);
    }

    #[test]
    fn depth_aligns_with_shape_mask() {
        let (h, w) = canvas();
        assert!(depth_map(&SceneSpec::background_only(0), h, w).unwrap().data().iter().all(|&v| v == 1.0));
        let mut rng = Rng::new(9);
        for _ in 0..10 {
            let spec = random_scene(h, w, &mut rng);
            let d = depth_map(&spec, h, w).unwrap();
            let m = shape_mask(&spec, h, w).unwrap();
            let img = render_scene(&spec, h, w).unwrap();
            let fg = COLORS[spec.color].1.map(|v| v as f64 / 255.0);
            for i in 0..h * w {
                assert_eq!(d.data()[3 * i] == NEAR_DEPTH, m[i]);
                assert_eq!(m[i], img.data()[3 * i..3 * i + 3] == fg[..]);
            }
        }
    }

    fn foreground_histogram(img: &Tensor, mask: &[bool]) -> std::collections::BTreeMap<[u64; 3], usize> {
        let mut hist = std::collections::BTreeMap::new();
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let p = &img.data()[3 * i..3 * i + 3];
            *hist.entry([p[0].to_bits(), p[1].to_bits(), p[2].to_bits()]).or_default() += 1;
        }
        hist
    }

    #[test]
    fn subject_pair_keeps_the_subject() {
        let (h, w) = canvas();
        let vocab = Vocabulary::shipped();
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let spec = random_scene(h, w, &mut rng);
            let mut r1 = rng.clone();
            let (c, t, cap) = subject_pair(&spec, h, w, &mut rng).unwrap();
            let (c2, t2, cap2) = subject_pair(&spec, h, w, &mut r1).unwrap();
            assert!(c.bitwise_eq(&c2) && t.bitwise_eq(&t2) && cap == cap2);

            let mut r2 = Rng::new(seed);
            let _ = random_scene(h, w, &mut r2);
            let tspec = resample_subject(&spec, h, w, &mut r2);
            let hc = foreground_histogram(&c, &shape_mask(&spec, h, w).unwrap());
            let ht = foreground_histogram(&t, &shape_mask(&tspec, h, w).unwrap());
            assert_eq!(hc.keys().collect::<Vec<_>>(), ht.keys().collect::<Vec<_>>());
            assert_eq!(hc.len(), 1);

            let ids = vocab.encode(&cap, 6).unwrap();
            assert_eq!(ids.iter().filter(|&&i| vocab.is_noun(i)).count(), 1);
        }
    }

    #[test]
    fn canny_cond_is_edge_map_of_target() {
        let ds = make_dataset(Task::Canny, 16, 3).unwrap();
        for s in &ds.samples {
            assert!(s.cond.bitwise_eq(&edge_map(&s.target).unwrap()));
        }
    }

    #[test]
    fn datasets_are_deterministic_and_valid() {
        let vocab = Vocabulary::shipped();
        for task in Task::ALL {
            let a = make_dataset(task, 12, 7).unwrap();
            let b = make_dataset(task, 12, 7).unwrap();
            assert_eq!(a, b);
            for s in &a.samples {
                assert_eq!(s.cond.shape(), s.target.shape());
                assert!(s.cond.data().iter().chain(s.target.data()).all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(vocab.decode(&s.ids).unwrap(), s.caption);
            }
        }
        let held = make_dataset_range(Task::Depth, 12, 2, 7, DataOptions::default()).unwrap();
        let more = make_dataset(Task::Depth, 14, 7).unwrap();
        assert_eq!(held.samples[..], more.samples[12..]);
    }
}
