//! Parameters and forward pass of the two-frame diffusion transformer.

use super::config::ModelConfig;
use super::mask::{build_mask, Mask, MaskStrategy};
use super::patchify::{frame_positions, patchify_video_var, unpatchify_mean_var, PatchGeometry};
use super::rope::RopeTables;
use super::sequence::{sequence_positions, Layout, Segment};
use super::vocab::{embed_text_var, instance_embedding_var, Vocabulary};
use crate::error::{shape_mismatch, Error, Result};
use crate::task::Task;
use crate::tensor::{Bound, ParameterStore, Rng, Tape, Tensor, Var};

/// Width multiplier of each AdaLN branch output: (γ, β, g) for the
/// attention half and again for the MLP half.
const MOD_CHUNKS: usize = 6;

pub fn lora_a_name(base: &str) -> String {
    format!("lora.{base}.A")
}

pub fn lora_b_name(base: &str) -> String {
    format!("lora.{base}.B")
}

pub fn adaln_prefix(block: usize, seg: Segment) -> String {
    format!("blocks.{block}.adaln.{}", seg.name())
}

/// RNG key of a parameter. The cond and target AdaLN branches share one key
/// so they start as identical copies.
fn init_key(name: &str) -> String {
    name.replace(".adaln.cond.", ".adaln.video.")
        .replace(".adaln.target.", ".adaln.video.")
}

enum Init {
    Zeros,
    Normal(f64),
}

/// Fresh parameters. Every tensor draws from its own named RNG stream, so
/// the values do not depend on creation order.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let (d, w, f, hid, m) = (
        cfg.d_model,
        cfg.token_width(),
        cfg.time_dim,
        cfg.adaln_hidden,
        cfg.mlp_hidden(),
    );
    let fan_in = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
        ("text.table".into(), vec![cfg.vocab_size, d], Init::Normal(1.0)),
        ("latent_proj.weight".into(), vec![d, w], fan_in(w)),
        ("latent_proj.bias".into(), vec![d], Init::Zeros),
        ("uce.proj.weight".into(), vec![d, d], fan_in(d)),
    ];
    for task in Task::ALL {
        specs.push((format!("uce.bias.{task}"), vec![d], Init::Zeros));
    }
    for b in 0..cfg.n_blocks {
        for seg in Segment::ALL {
            let p = adaln_prefix(b, seg);
            specs.push((format!("{p}.fc1.weight"), vec![hid, f], fan_in(f)));
            specs.push((format!("{p}.fc1.bias"), vec![hid], Init::Zeros));
            specs.push((format!("{p}.fc2.weight"), vec![MOD_CHUNKS * d, hid], Init::Zeros));
            specs.push((format!("{p}.fc2.bias"), vec![MOD_CHUNKS * d], Init::Zeros));
        }
        for proj in ["q", "k", "v"] {
            specs.push((format!("blocks.{b}.attn.{proj}.weight"), vec![d, d], fan_in(d)));
        }
        specs.push((format!("blocks.{b}.attn.o.weight"), vec![d, d], Init::Zeros));
        specs.push((format!("blocks.{b}.mlp.fc1.weight"), vec![m, d], fan_in(d)));
        specs.push((format!("blocks.{b}.mlp.fc1.bias"), vec![m], Init::Zeros));
        specs.push((format!("blocks.{b}.mlp.fc2.weight"), vec![d, m], Init::Zeros));
        specs.push((format!("blocks.{b}.mlp.fc2.bias"), vec![d], Init::Zeros));
    }
    specs.push(("head.weight".into(), vec![w, d], Init::Zeros));
    specs.push(("head.bias".into(), vec![w], Init::Zeros));

    let mut store = ParameterStore::new();
    for (name, shape, init) in specs {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal(std) => Tensor::randn(shape, std, &mut root.derive_str(&init_key(&name))),
        };
        store.insert(name, t.with_requires_grad(true))?;
    }
    Ok(store)
}

/// `x · Wᵀ (+ b)`, plus `(α/r) · (x · Aᵀ) · Bᵀ` when an adapter for the
/// weight is bound.
pub fn linear(tape: &mut Tape, b: &Bound, prefix: &str, x: Var, bias: bool, lora_alpha: f64) -> Result<Var> {
    let wname = format!("{prefix}.weight");
    let mut y = tape.matmul_nt(x, b.get(&wname)?)?;
    if let Some(a) = b.try_get(&lora_a_name(&wname)) {
        let bb = b.get(&lora_b_name(&wname))?;
        let r = tape.shape(a)[0];
        let xa = tape.matmul_nt(x, a)?;
        let delta = tape.matmul_nt(xa, bb)?;
        let delta = tape.scale(delta, lora_alpha / r as f64);
        y = tape.add(y, delta)?;
    }
    if bias {
        y = tape.add_row(y, b.get(&format!("{prefix}.bias"))?)?;
    }
    Ok(y)
}

/// Sinusoidal features `[cos(t·ω_i), sin(t·ω_i)]`, `ω_i = 10000^(-i/(dim/2))`.
pub fn timestep_features(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn([1, dim], |i| {
        let j = i % half;
        let a = t as f64 * 10_000f64.powf(-(j as f64) / half as f64);
        if i < half {
            a.cos()
        } else {
            a.sin()
        }
    })
}

/// Modulation of one segment for one half of a block, each `[1 × d]`.
/// `gate` already includes the +1 offset.
#[derive(Clone, Copy, Debug)]
pub struct BranchModulation {
    pub gamma: Var,
    pub beta: Var,
    pub gate: Var,
}

/// Indexed by `Segment::index()`.
#[derive(Clone, Copy, Debug)]
pub struct BlockModulation {
    pub attn: [BranchModulation; 3],
    pub mlp: [BranchModulation; 3],
}

/// Runs the three branch MLPs of `block` at timestep `t`.
pub fn modulation_var(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, block: usize, t: usize) -> Result<BlockModulation> {
    if t >= cfg.t_max {
        return Err(Error::Timestep { t, t_max: cfg.t_max });
    }
    let temb = tape.constant(&timestep_features(t, cfg.time_dim));
    let d = cfg.d_model;
    let mut halves = Vec::with_capacity(3);
    for seg in Segment::ALL {
        let p = adaln_prefix(block, seg);
        let h = linear(tape, b, &format!("{p}.fc1"), temb, true, cfg.lora_alpha)?;
        let h = tape.silu(h);
        let out = linear(tape, b, &format!("{p}.fc2"), h, true, cfg.lora_alpha)?;
        let mut chunk = |i: usize| tape.slice_cols(out, i * d, d);
        let (g1, b1, r1) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (g2, b2, r2) = (chunk(3)?, chunk(4)?, chunk(5)?);
        let gate1 = tape.affine(r1, 1.0, 1.0);
        let gate2 = tape.affine(r2, 1.0, 1.0);
        halves.push((
            BranchModulation { gamma: g1, beta: b1, gate: gate1 },
            BranchModulation { gamma: g2, beta: b2, gate: gate2 },
        ));
    }
    Ok(BlockModulation {
        attn: [halves[0].0, halves[1].0, halves[2].0],
        mlp: [halves[0].1, halves[1].1, halves[2].1],
    })
}

/// Plain values of one segment's modulation.
#[derive(Clone, Debug)]
pub struct ModulationValues {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub gate: Tensor,
}

/// Eager modulation of `block`: `[attention half, MLP half]`, each indexed
/// by segment.
pub fn modulation(store: &ParameterStore, cfg: &ModelConfig, block: usize, t: usize) -> Result<[[ModulationValues; 3]; 2]> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let m = modulation_var(&mut tape, &b, cfg, block, t)?;
    let vals = |half: &[BranchModulation; 3]| {
        half.map(|bm| ModulationValues {
            gamma: tape.tensor(bm.gamma).reshape([cfg.d_model]).expect("d values"),
            beta: tape.tensor(bm.beta).reshape([cfg.d_model]).expect("d values"),
            gate: tape.tensor(bm.gate).reshape([cfg.d_model]).expect("d values"),
        })
    };
    Ok([vals(&m.attn), vals(&m.mlp)])
}

fn segment_parts(
    tape: &mut Tape,
    x: Var,
    layout: Layout,
    mut f: impl FnMut(&mut Tape, Var, Segment) -> Result<Var>,
) -> Result<Vec<(Segment, Var)>> {
    if tape.shape(x).first() != Some(&layout.len()) {
        return Err(Error::Dimension(format!(
            "sequence of shape {:?} does not match layout {layout:?}",
            tape.shape(x)
        )));
    }
    let mut parts = Vec::with_capacity(3);
    for seg in Segment::ALL {
        let r = layout.range(seg);
        if r.is_empty() {
            continue;
        }
        let part = tape.slice_rows(x, r.start, r.len())?;
        parts.push((seg, f(tape, part, seg)?));
    }
    Ok(parts)
}

fn per_segment(
    tape: &mut Tape,
    x: Var,
    layout: Layout,
    f: impl FnMut(&mut Tape, Var, Segment) -> Result<Var>,
) -> Result<Var> {
    let parts: Vec<Var> = segment_parts(tape, x, layout, f)?.into_iter().map(|(_, v)| v).collect();
    tape.concat_rows(&parts)
}

/// The modulated segments before concatenation, in sequence order.
pub fn sc_adaln_segments(
    tape: &mut Tape,
    x: Var,
    layout: Layout,
    m: &[BranchModulation; 3],
    eps: f64,
) -> Result<Vec<(Segment, Var)>> {
    let ln = tape.layer_norm(x, eps)?;
    segment_parts(tape, ln, layout, |tape, part, seg| {
        let bm = m[seg.index()];
        let one_plus = tape.affine(bm.gamma, 1.0, 1.0);
        let scaled = tape.mul_row(part, one_plus)?;
        tape.add_row(scaled, bm.beta)
    })
}

/// `LN(x_k) ⊙ (1 + γ_k) + β_k` with each segment `k` using its own branch.
pub fn sc_adaln_var(tape: &mut Tape, x: Var, layout: Layout, m: &[BranchModulation; 3], eps: f64) -> Result<Var> {
    let parts: Vec<Var> = sc_adaln_segments(tape, x, layout, m, eps)?.into_iter().map(|(_, v)| v).collect();
    tape.concat_rows(&parts)
}

/// Multiplies each segment of a residual branch by its own gate.
pub fn gate_var(tape: &mut Tape, x: Var, layout: Layout, m: &[BranchModulation; 3]) -> Result<Var> {
    per_segment(tape, x, layout, |tape, part, seg| tape.mul_row(part, m[seg.index()].gate))
}

/// Output of masked multi-head attention and its per-head probabilities.
pub struct AttentionOut {
    pub out: Var,
    pub probs: Vec<Var>,
}

/// `Softmax(Q Kᵀ/√hd + M) V` per head with rotary `Q`, `K`; heads are
/// concatenated and projected by `attn.o`.
pub fn fcd_attention_var(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    block: usize,
    x: Var,
    mask: Option<Var>,
    rope: &RopeTables,
) -> Result<AttentionOut> {
    let p = format!("blocks.{block}.attn");
    let alpha = cfg.lora_alpha;
    let q = linear(tape, b, &format!("{p}.q"), x, false, alpha)?;
    let k = linear(tape, b, &format!("{p}.k"), x, false, alpha)?;
    let v = linear(tape, b, &format!("{p}.v"), x, false, alpha)?;
    let q = rope.apply(tape, q)?;
    let k = rope.apply(tape, k)?;
    let hd = cfg.head_dim();
    let q = tape.scale(q, 1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let mut scores = tape.matmul_nt(qh, kh)?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let pr = tape.softmax(scores)?;
        heads.push(tape.matmul(pr, vh)?);
        probs.push(pr);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = linear(tape, b, &format!("{p}.o"), cat, false, alpha)?;
    Ok(AttentionOut { out, probs })
}

pub struct BlockOut {
    pub out: Var,
    pub probs: Vec<Var>,
    pub modulation: BlockModulation,
}

#[allow(clippy::too_many_arguments)]
pub fn dit_block_var(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    block: usize,
    h: Var,
    t: usize,
    layout: Layout,
    mask: Option<Var>,
    rope: &RopeTables,
) -> Result<BlockOut> {
    let m = modulation_var(tape, b, cfg, block, t)?;
    let x = sc_adaln_var(tape, h, layout, &m.attn, cfg.ln_eps)?;
    let att = fcd_attention_var(tape, b, cfg, block, x, mask, rope)?;
    let a = gate_var(tape, att.out, layout, &m.attn)?;
    let h = tape.add(h, a)?;

    let x = sc_adaln_var(tape, h, layout, &m.mlp, cfg.ln_eps)?;
    let p = format!("blocks.{block}.mlp");
    let y = linear(tape, b, &format!("{p}.fc1"), x, true, cfg.lora_alpha)?;
    let y = tape.gelu(y);
    let y = linear(tape, b, &format!("{p}.fc2"), y, true, cfg.lora_alpha)?;
    let y = gate_var(tape, y, layout, &m.mlp)?;
    let out = tape.add(h, y)?;
    Ok(BlockOut { out, probs: att.probs, modulation: m })
}

/// `cond + (W·instance)ᵀ + bias_c`, broadcast over condition tokens.
pub fn uce_apply(cond: &Tensor, instance: Option<&Tensor>, proj_w: &Tensor, bias_c: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = tape.constant(cond);
    let inst = instance.map(|i| tape.constant(i));
    let w = tape.constant(proj_w);
    let bias = tape.constant(bias_c);
    let out = uce_apply_var(&mut tape, c, inst, w, bias)?;
    Ok(tape.tensor(out))
}

pub fn uce_apply_var(tape: &mut Tape, cond: Var, instance: Option<Var>, proj_w: Var, bias_c: Var) -> Result<Var> {
    let d = tape.shape(cond).last().copied().unwrap_or(0);
    if tape.shape(proj_w) != [d, d] || tape.value(bias_c).len() != d {
        return Err(shape_mismatch("uce_apply", tape.shape(cond), tape.shape(proj_w)));
    }
    let mut out = cond;
    if let Some(inst) = instance {
        if tape.value(inst).len() != d {
            return Err(shape_mismatch("uce_apply", tape.shape(cond), tape.shape(inst)));
        }
        let row = tape.reshape(inst, vec![1, d])?;
        let wi = tape.matmul_nt(row, proj_w)?;
        out = tape.add_row(out, wi)?;
    }
    tape.add_row(out, bias_c)
}

/// Everything recorded by one forward pass.
pub struct Forward {
    /// Predicted noise, shaped like the target latent.
    pub eps: Var,
    /// `[2N × token_width]` patchified (cond; target) tokens.
    pub patches: Var,
    /// Sequence entering the first block, then each block's output.
    pub hidden: Vec<Var>,
    /// Post-softmax attention, per block then per head.
    pub probs: Vec<Vec<Var>>,
    pub modulation: Vec<BlockModulation>,
}

/// A configuration with its derived geometry, mask and rotary tables.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub mask: Mask,
    pub layout: Layout,
    pub geometry: PatchGeometry,
    rope: RopeTables,
    noun_flags: Vec<bool>,
}

impl Model {
    /// Rotary tables for the full `[text; cond; target]` sequence.
    pub fn rope(&self) -> &RopeTables {
        &self.rope
    }

    pub fn new(cfg: ModelConfig, strategy: MaskStrategy) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.latent_size();
        let geometry = PatchGeometry::new(n, n, cfg.latent_channels(), cfg.patch)?;
        let layout = Layout::new(cfg.text_len, geometry.tokens(), geometry.tokens())?;
        let mask = build_mask(strategy, layout, cfg.mask_c_blocks_diagonal)?;
        let mut frames = frame_positions(geometry, 0);
        frames.extend(frame_positions(geometry, 1));
        let positions = sequence_positions(cfg.text_len, &frames);
        let rope = RopeTables::new(&positions, cfg.head_dim(), cfg.n_heads, cfg.rope_base)?;
        let vocab = Vocabulary::shipped();
        let mut noun_flags = vocab.noun_flags().to_vec();
        noun_flags.resize(cfg.vocab_size, false);
        Ok(Self { cfg, mask, layout, geometry, rope, noun_flags })
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.mask.strategy
    }

    pub fn with_strategy(&self, strategy: MaskStrategy) -> Result<Self> {
        Self::new(self.cfg.clone(), strategy)
    }

    fn check_latent(&self, tape: &Tape, v: Var, what: &str) -> Result<()> {
        let want = [self.geometry.h, self.geometry.w, self.geometry.c];
        if tape.shape(v) != want {
            return Err(Error::Dimension(format!(
                "{what} latent has shape {:?}, expected {want:?}",
                tape.shape(v)
            )));
        }
        Ok(())
    }

    /// Text embedding, patchify, latent projection and UCE, concatenated
    /// into `[text; cond; target]`. Returns the sequence and the patches.
    pub fn embed(&self, tape: &mut Tape, b: &Bound, cond: Var, z_t: Var, ids: &[usize], task: Task) -> Result<(Var, Var)> {
        self.check_latent(tape, cond, "condition")?;
        self.check_latent(tape, z_t, "noisy target")?;
        if ids.len() != self.cfg.text_len {
            return Err(Error::Vocabulary(format!(
                "prompt has {} ids, text_len is {}",
                ids.len(),
                self.cfg.text_len
            )));
        }
        let table = b.get("text.table")?;
        let text = embed_text_var(tape, ids, table)?;
        let n = self.geometry.latent_numel();
        let c = tape.reshape(cond, vec![1, n])?;
        let z = tape.reshape(z_t, vec![1, n])?;
        let video = tape.concat_rows(&[c, z])?;
        let patches = patchify_video_var(tape, video, self.geometry)?;
        let proj = linear(tape, b, "latent_proj", patches, true, self.cfg.lora_alpha)?;
        let frame = self.geometry.tokens();
        let cond_tok = tape.slice_rows(proj, 0, frame)?;
        let target_tok = tape.slice_rows(proj, frame, frame)?;
        let instance = instance_embedding_var(tape, ids, &self.noun_flags, table)?;
        let cond_tok = uce_apply_var(
            tape,
            cond_tok,
            instance,
            b.get("uce.proj.weight")?,
            b.get(&format!("uce.bias.{task}"))?,
        )?;
        let seq = tape.concat_rows(&[text, cond_tok, target_tok])?;
        Ok((seq, patches))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        cond: Var,
        z_t: Var,
        ids: &[usize],
        t: usize,
        task: Task,
    ) -> Result<Forward> {
        if t >= self.cfg.t_max {
            return Err(Error::Timestep { t, t_max: self.cfg.t_max });
        }
        let (mut h, patches) = self.embed(tape, b, cond, z_t, ids, task)?;
        let mask = (!self.mask.is_empty()).then(|| tape.constant(&self.mask.to_tensor()));
        let mut hidden = vec![h];
        let mut probs = Vec::with_capacity(self.cfg.n_blocks);
        let mut modulation = Vec::with_capacity(self.cfg.n_blocks);
        for block in 0..self.cfg.n_blocks {
            let o = dit_block_var(tape, b, &self.cfg, block, h, t, self.layout, mask, &self.rope)?;
            h = o.out;
            hidden.push(h);
            probs.push(o.probs);
            modulation.push(o.modulation);
        }
        let fin = tape.layer_norm(h, self.cfg.ln_eps)?;
        let r = self.layout.range(Segment::Target);
        let target = tape.slice_rows(fin, r.start, r.len())?;
        let out = linear(tape, b, "head", target, true, self.cfg.lora_alpha)?;
        let eps = unpatchify_mean_var(tape, out, self.geometry)?;
        Ok(Forward { eps, patches, hidden, probs, modulation })
    }

    /// Noise prediction without recording gradients for the caller.
    pub fn predict(&self, store: &ParameterStore, cond: &Tensor, z_t: &Tensor, ids: &[usize], t: usize, task: Task) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let c = tape.constant(cond);
        let z = tape.constant(z_t);
        let f = self.forward(&mut tape, &b, c, z, ids, t, task)?;
        Ok(tape.tensor(f.eps))
    }
}
