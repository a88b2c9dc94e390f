//! SSIM, MSE, per-segment attention mass, held-out evaluation and the mask
//! ablation table.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::TwoFrameSample;
use crate::diffusion::{q_sample, sample, DiffusionSchedule, Example};
use crate::error::{shape_mismatch, Error, Result};
use crate::model::{Layout, MaskStrategy, Model, Segment};
use crate::tensor::{ParameterStore, Rng, Tape, Tensor};
use crate::train::{load_samples, to_examples, Trainer};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(i, t)| t * plane[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(i, t)| t * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Structural similarity of two `[H×W×C]` images with dynamic range 1:
/// 7×7 Gaussian window (σ = 1.5) over valid positions, averaged over the
/// map and then over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch("ssim", a.shape(), b.shape()));
    }
    let [h, w, ch] = *a.shape() else {
        return Err(Error::Image(format!("ssim expects [H×W×C], got {:?}", a.shape())));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Image(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data()[i * ch + c]).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data()[i * ch + c]).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
        total += sum / n as f64;
    }
    Ok(total / ch as f64)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch("mse", a.shape(), b.shape()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel().max(1) as f64)
}

/// 3×3 matrix indexed by (query segment, key segment) in text, cond,
/// target order.
pub type SegmentMass = [[f64; 3]; 3];

/// Mean post-softmax mass from each query segment to each key segment of
/// one `[L×L]` attention matrix.
pub fn segment_mass(probs: &Tensor, layout: &Layout) -> Result<SegmentMass> {
    let l = layout.len();
    if probs.shape() != [l, l] {
        return Err(shape_mismatch("segment_mass", probs.shape(), &[l, l]));
    }
    let mut m = [[0.0; 3]; 3];
    for sq in Segment::ALL {
        let rq = layout.range(sq);
        let nq = rq.len() as f64;
        for q in rq {
            let row = probs.row(q);
            for sk in Segment::ALL {
                m[sq.index()][sk.index()] += layout.range(sk).map(|k| row[k]).sum::<f64>() / nq;
            }
        }
    }
    Ok(m)
}

/// Per-layer segment mass averaged over heads and over `batch`, with each
/// target noised at timestep `t` from `seed`.
pub fn segment_attention_mass(
    model: &Model,
    store: &ParameterStore,
    batch: &[Example],
    sched: &DiffusionSchedule,
    t: usize,
    seed: u64,
) -> Result<Vec<SegmentMass>> {
    let n_blocks = model.cfg.n_blocks;
    let per_example = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| -> Result<Vec<SegmentMass>> {
            let mut rng = Rng::new(seed).derive_str("attention_mass").derive(i as u64);
            let eps = Tensor::randn(ex.target.shape().to_vec(), 1.0, &mut rng);
            let z = q_sample(&ex.target, t, &eps, sched)?;
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let c = tape.constant(&ex.cond);
            let zv = tape.constant(&z);
            let f = model.forward(&mut tape, &b, c, zv, &ex.ids, t, ex.task)?;
            f.probs
                .iter()
                .map(|heads| {
                    let mut acc = [[0.0; 3]; 3];
                    for &p in heads {
                        let m = segment_mass(&tape.tensor(p), &model.layout)?;
                        for (r, mr) in acc.iter_mut().zip(m) {
                            for (v, x) in r.iter_mut().zip(mr) {
                                *v += x / heads.len() as f64;
                            }
                        }
                    }
                    Ok(acc)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![[[0.0; 3]; 3]; n_blocks];
    for layers in &per_example {
        for (o, m) in out.iter_mut().zip(layers) {
            for (r, mr) in o.iter_mut().zip(m) {
                for (v, x) in r.iter_mut().zip(mr) {
                    *v += x / per_example.len() as f64;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub index: usize,
    pub ssim: f64,
    pub mse: f64,
}

/// Held-out scores plus the attention probe.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<SampleScore>,
    pub mean_ssim: f64,
    pub mean_mse: f64,
    pub attention: Vec<SegmentMass>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl EvalReport {
    /// Aggregates are always recomputed from `rows`.
    pub fn new(rows: Vec<SampleScore>, attention: Vec<SegmentMass>, seeds: Vec<u64>, config_hash: String) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        let mean_mse = rows.iter().map(|r| r.mse).sum::<f64>() / n;
        Self { rows, mean_ssim, mean_mse, attention, seeds, config_hash }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,ssim,mse\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:?},{:?}", r.index, r.ssim, r.mse);
        }
        let _ = writeln!(out, "mean,{:?},{:?}", self.mean_ssim, self.mean_mse);
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "samples: {}\nmean ssim: {:.4} (7x7 gaussian window, sigma 1.5, L=1)\nmean mse: {:.6}\nseeds: {:?}\nconfig: {}\n",
            self.rows.len(),
            self.mean_ssim,
            self.mean_mse,
            self.seeds,
            self.config_hash
        );
        for (i, m) in self.attention.iter().enumerate() {
            let _ = writeln!(out, "block {i} attention mass (rows: query text/cond/target):");
            for r in m {
                let _ = writeln!(out, "  {:.4} {:.4} {:.4}", r[0], r[1], r[2]);
            }
        }
        out
    }
}

/// Generates one image per held-out sample and scores it against the
/// reference target. Sample `i` uses sampler seed `seed + i`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    store: &ParameterStore,
    sched: &DiffusionSchedule,
    samples: &[TwoFrameSample],
    steps: usize,
    omega: f64,
    seed: u64,
) -> Result<Vec<SampleScore>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let out = sample(model, store, sched, &s.cond, &s.ids, s.task, steps, omega, seed + i as u64)?;
            Ok(SampleScore { index: i, ssim: ssim(&out.image, &s.target)?, mse: mse(&out.image, &s.target)? })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub strategy: MaskStrategy,
    pub seed: u64,
    pub ssim: f64,
    pub mse: f64,
    pub final_loss: f64,
    /// Set when training or sampling produced a non-finite value.
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    /// Rows ordered by strategy (a, b, c, none), then by ascending seed.
    pub cells: Vec<AblationCell>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn strategy_rank(s: MaskStrategy) -> usize {
    MaskStrategy::ALL.iter().position(|&x| x == s).unwrap_or(usize::MAX)
}

impl AblationTable {
    /// Medians over the non-diverged seeds of one strategy.
    pub fn median_ssim(&self, s: MaskStrategy) -> f64 {
        median(self.cells.iter().filter(|c| c.strategy == s && c.diverged.is_none()).map(|c| c.ssim).collect())
    }

    pub fn median_mse(&self, s: MaskStrategy) -> f64 {
        median(self.cells.iter().filter(|c| c.strategy == s && c.diverged.is_none()).map(|c| c.mse).collect())
    }

    pub fn strategies(&self) -> Vec<MaskStrategy> {
        let mut v: Vec<MaskStrategy> = Vec::new();
        for c in &self.cells {
            if !v.contains(&c.strategy) {
                v.push(c.strategy);
            }
        }
        v
    }

    /// Per-cell rows, then one median row per strategy in the comparison
    /// order B, C, none, A.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,seed,ssim,mse,final_loss,status\n");
        for c in &self.cells {
            let status = c.diverged.as_deref().map_or("ok".to_string(), |m| format!("diverged: {}", m.replace(',', ";")));
            let _ = writeln!(out, "{},{},{:?},{:?},{:?},{status}", c.strategy, c.seed, c.ssim, c.mse, c.final_loss);
        }
        let present = self.strategies();
        for s in [MaskStrategy::B, MaskStrategy::C, MaskStrategy::NoMask, MaskStrategy::A] {
            if present.contains(&s) {
                let diverged = self.cells.iter().filter(|c| c.strategy == s && c.diverged.is_some()).count();
                let _ = writeln!(
                    out,
                    "{s},median,{:?},{:?},,diverged={diverged}",
                    self.median_ssim(s),
                    self.median_mse(s)
                );
            }
        }
        out
    }
}

/// Trains and scores one (strategy, seed) cell in memory.
pub fn ablation_cell(base: &RunConfig, strategy: MaskStrategy, seed: u64) -> Result<AblationCell> {
    let mut cfg = base.clone();
    cfg.train.mask = strategy;
    cfg.train.seed = seed;
    let (train, held) = load_samples(&cfg)?;
    let mut tr = Trainer::new(&cfg, to_examples(&train, cfg.model.latent_factor)?)?;
    let mut final_loss = f64::NAN;
    let outcome = (|| -> Result<(f64, f64)> {
        tr.run_until(cfg.train.steps, |_, st| {
            final_loss = st.loss;
            Ok(())
        })?;
        let rows = evaluate(&tr.model, &tr.store, &tr.sched, &held, cfg.sample.steps, cfg.omega(), seed)?;
        let rep = EvalReport::new(rows, Vec::new(), vec![seed], cfg.hash());
        Ok((rep.mean_ssim, rep.mean_mse))
    })();
    match outcome {
        Ok((ssim, mse)) if ssim.is_finite() && mse.is_finite() => {
            Ok(AblationCell { strategy, seed, ssim, mse, final_loss, diverged: None })
        }
        Ok(_) => Ok(AblationCell {
            strategy,
            seed,
            ssim: f64::NAN,
            mse: f64::NAN,
            final_loss,
            diverged: Some("non-finite metric".into()),
        }),
        Err(Error::NonFinite(m)) => Ok(AblationCell {
            strategy,
            seed,
            ssim: f64::NAN,
            mse: f64::NAN,
            final_loss,
            diverged: Some(m),
        }),
        Err(e) => Err(e),
    }
}

/// One training run per (strategy, seed) with an otherwise identical
/// configuration. Cells run as independent parallel jobs; diverged cells
/// are kept and flagged.
pub fn ablate_masks(base: &RunConfig, strategies: &[MaskStrategy], seeds: &[u64]) -> Result<AblationTable> {
    let mut jobs: Vec<(MaskStrategy, u64)> =
        strategies.iter().flat_map(|&s| seeds.iter().map(move |&k| (s, k))).collect();
    jobs.sort_by_key(|&(s, k)| (strategy_rank(s), k));
    jobs.dedup();
    let cells = jobs
        .par_iter()
        .map(|&(s, k)| ablation_cell(base, s, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { cells })
}
