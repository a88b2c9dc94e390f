//! Low-rank adapters on the modulation MLPs and attention projections.
//!
//! Adapters live in the parameter store as `lora.<base>.A` (`[r×in]`) and
//! `lora.<base>.B` (`[out×r]`); [`crate::model::dit::linear`] picks them up.

use crate::error::{shape_mismatch, Error, Result};
use crate::model::dit::{lora_a_name, lora_b_name};
use crate::tensor::{ops, ParameterStore, Rng, Tensor};

/// Modulation-MLP weights of every branch and the four attention projections.
pub const DEFAULT_TARGETS: [&str; 3] = [
    "blocks.*.adaln.*.fc1.weight",
    "blocks.*.adaln.*.fc2.weight",
    "blocks.*.attn.*.weight",
];

/// Parameters with no pretrained counterpart at toy scale; they stay
/// trainable after injection instead of receiving adapters.
pub const DIRECT_PREFIXES: [&str; 4] = ["text.", "latent_proj.", "uce.", "head."];

/// Dotted-name glob: `*` matches exactly one dot-free segment.
pub fn pattern_matches(pattern: &str, name: &str) -> bool {
    let mut p = pattern.split('.');
    let mut n = name.split('.');
    loop {
        match (p.next(), n.next()) {
            (None, None) => return true,
            (Some(ps), Some(ns)) if ps == "*" || ps == ns => {}
            _ => return false,
        }
    }
}

pub fn is_adapter(name: &str) -> bool {
    name.starts_with("lora.")
}

fn is_direct(name: &str) -> bool {
    DIRECT_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub base_name: String,
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraAdapter {
    /// `A ~ N(0, 1/√in)`, `B = 0`: an exact identity until `B` moves.
    pub fn new(base_name: &str, out_dim: usize, in_dim: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Self {
        Self {
            base_name: base_name.to_string(),
            a: Tensor::randn([rank, in_dim], 1.0 / (in_dim as f64).sqrt(), rng),
            b: Tensor::zeros([out_dim, rank]),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn from_store(store: &ParameterStore, base_name: &str, alpha: f64) -> Result<Self> {
        Ok(Self {
            base_name: base_name.to_string(),
            a: store.require(&lora_a_name(base_name))?.clone(),
            b: store.require(&lora_b_name(base_name))?.clone(),
            alpha,
        })
    }

    fn check(&self, base_w: &Tensor) -> Result<()> {
        let (out_dim, in_dim) = (base_w.shape()[0], base_w.last_dim());
        if self.a.shape() != [self.rank(), in_dim] || self.b.shape() != [out_dim, self.rank()] {
            return Err(shape_mismatch("lora", self.a.shape(), base_w.shape()));
        }
        Ok(())
    }
}

/// `x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ` for row-vector inputs `x: [n×in]`.
pub fn adapted_matmul(x: &Tensor, base_w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check(base_w)?;
    let y = ops::matmul_nt(x, base_w)?;
    let delta = ops::matmul_nt(&ops::matmul_nt(x, &adapter.a)?, &adapter.b)?;
    ops::add(&y, &ops::scale(&delta, adapter.scale()))
}

/// `W + (α/r)·B·A`. Pure: merging the same adapter again adds it again.
pub fn merge(adapter: &LoraAdapter, base_w: &Tensor) -> Result<Tensor> {
    adapter.check(base_w)?;
    let ba = ops::matmul(&adapter.b, &adapter.a)?;
    ops::add(base_w, &ops::scale(&ba, adapter.scale()))
}

/// Result of [`inject`]: which weights were adapted, and how.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub alpha: f64,
    pub base_names: Vec<String>,
}

impl AdapterSet {
    /// Recovers the set from adapter tensors already in `store`.
    pub fn from_store(store: &ParameterStore, alpha: f64) -> Option<Self> {
        let base_names: Vec<String> = store
            .names()
            .filter_map(|n| n.strip_prefix("lora.")?.strip_suffix(".A").map(str::to_string))
            .collect();
        let first = base_names.first()?;
        let rank = store.get(&lora_a_name(first))?.shape()[0];
        Some(Self { rank, alpha, base_names })
    }
}

/// Adds one adapter per weight matched by `patterns` and freezes every other
/// parameter except those under [`DIRECT_PREFIXES`].
pub fn inject(store: &mut ParameterStore, patterns: &[&str], rank: usize, alpha: f64, seed: u64) -> Result<AdapterSet> {
    if rank == 0 {
        return Err(Error::Config("lora rank must be positive".into()));
    }
    if store.names().any(is_adapter) {
        return Err(Error::Lora("store already carries adapters; stacking is not supported".into()));
    }
    let base_names: Vec<String> = store
        .names()
        .filter(|n| patterns.iter().any(|p| pattern_matches(p, n)))
        .map(str::to_string)
        .collect();
    if base_names.is_empty() {
        return Err(Error::Config(format!("lora target patterns {patterns:?} match no weight")));
    }
    check_exclusivity(&base_names)?;
    let root = Rng::new(seed).derive_str("lora");
    let mut adapters = Vec::with_capacity(base_names.len());
    for name in &base_names {
        let w = store.require(name)?;
        if w.rank() != 2 {
            return Err(Error::Lora(format!("{name} is not a matrix: {:?}", w.shape())));
        }
        let mut rng = root.derive_str(name);
        adapters.push(LoraAdapter::new(name, w.shape()[0], w.shape()[1], rank, alpha, &mut rng));
    }
    for ad in adapters {
        store.insert(lora_a_name(&ad.base_name), ad.a)?;
        store.insert(lora_b_name(&ad.base_name), ad.b)?;
    }
    set_trainable(store);
    Ok(AdapterSet { rank, alpha, base_names })
}

/// Marks what trains: with adapters present, the adapters plus the
/// [`DIRECT_PREFIXES`] parameters; without, every parameter.
pub fn set_trainable(store: &mut ParameterStore) {
    let adapted = store.names().any(is_adapter);
    for (name, t) in store.iter_mut() {
        t.set_requires_grad(!adapted || is_adapter(name) || is_direct(name));
    }
}

/// Adapted weights must never include the directly trained parameters.
pub fn check_exclusivity(base_names: &[String]) -> Result<()> {
    match base_names.iter().find(|n| is_direct(n)) {
        Some(n) => Err(Error::Lora(format!("{n} is trained directly and must not carry an adapter"))),
        None => Ok(()),
    }
}

/// Folds every adapter into its base weight and removes the adapter
/// tensors, so a second call fails instead of double-counting.
pub fn merge_into(store: &mut ParameterStore, set: &AdapterSet) -> Result<()> {
    for name in &set.base_names {
        let ad = LoraAdapter::from_store(store, name, set.alpha)
            .map_err(|_| Error::Lora(format!("adapter for {name} is missing (already merged?)")))?;
        let merged = merge(&ad, store.require(name)?)?;
        let w = store.get_mut(name).expect("checked above");
        w.data_mut().copy_from_slice(merged.data());
        store.remove(&lora_a_name(name));
        store.remove(&lora_b_name(name));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{train_step, AdamW, DiffusionSchedule, Example};
    use crate::model::{init_params, MaskStrategy, Model, ModelConfig};
    use crate::task::Task;

    fn expected_targets(cfg: &ModelConfig) -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..cfg.n_blocks {
            for seg in ["text", "cond", "target"] {
                for fc in ["fc1", "fc2"] {
                    v.push(format!("blocks.{i}.adaln.{seg}.{fc}.weight"));
                }
            }
            for p in ["q", "k", "v", "o"] {
                v.push(format!("blocks.{i}.attn.{p}.weight"));
            }
        }
        v.sort();
        v
    }

    #[test]
    fn glob_matches_whole_segments() {
        assert!(pattern_matches("blocks.*.attn.*.weight", "blocks.3.attn.q.weight"));
        assert!(!pattern_matches("blocks.*.attn.*.weight", "blocks.3.attn.q.bias"));
        assert!(!pattern_matches("blocks.*.weight", "blocks.3.attn.q.weight"));
        assert!(!pattern_matches("blocks.*", "blocks"));
    }

    #[test]
    fn default_targets_match_the_enumeration() {
        let cfg = ModelConfig::miniature();
        let mut store = init_params(&cfg, 1).unwrap();
        let set = inject(&mut store, &DEFAULT_TARGETS, 4, 4.0, 2).unwrap();
        let mut got = set.base_names.clone();
        got.sort();
        assert_eq!(got, expected_targets(&cfg));
        assert_eq!(got.len(), cfg.n_blocks * (3 * 2 + 4));
        check_exclusivity(&set.base_names).unwrap();

        let trainable = store.trainable_names();
        assert!(trainable.iter().all(|n| is_adapter(n) || is_direct(n)));
        assert_eq!(trainable.iter().filter(|n| is_adapter(n)).count(), 2 * got.len());
        for p in DIRECT_PREFIXES {
            assert!(trainable.iter().any(|n| n.starts_with(p)), "{p}");
        }
        assert_eq!(AdapterSet::from_store(&store, 4.0).unwrap(), set);
    }

    #[test]
    fn injection_errors() {
        let cfg = ModelConfig::miniature();
        let mut store = init_params(&cfg, 1).unwrap();
        assert!(matches!(inject(&mut store, &["nothing.*"], 4, 4.0, 0), Err(Error::Config(_))));
        inject(&mut store, &DEFAULT_TARGETS, 4, 4.0, 0).unwrap();
        assert!(matches!(inject(&mut store, &DEFAULT_TARGETS, 4, 4.0, 0), Err(Error::Lora(_))));
        assert!(check_exclusivity(&["head.weight".to_string()]).is_err());
    }

    fn random_adapter(rng: &mut Rng, out_dim: usize, in_dim: usize, r: usize, alpha: f64) -> LoraAdapter {
        let mut ad = LoraAdapter::new("w", out_dim, in_dim, r, alpha, rng);
        ad.b = Tensor::randn([out_dim, r], 1.0, rng);
        ad
    }

    #[test]
    fn adapted_matmul_identity_and_oracle() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn([5, 7], 1.0, &mut rng);
        let w = Tensor::randn([4, 7], 1.0, &mut rng);
        let base = ops::matmul_nt(&x, &w).unwrap();
        let fresh = LoraAdapter::new("w", 4, 7, 3, 2.0, &mut rng);
        assert!(adapted_matmul(&x, &w, &fresh).unwrap().bitwise_eq(&base));
        assert!(merge(&fresh, &w).unwrap().bitwise_eq(&w));

        let mut muted = random_adapter(&mut rng, 4, 7, 3, 0.0);
        assert!(adapted_matmul(&x, &w, &muted).unwrap().bitwise_eq(&base));
        muted.alpha = 6.0;
        let got = adapted_matmul(&x, &w, &muted).unwrap();
        // naive triple loop: y[n][o] = Σ_i x·W + 2·Σ_k B[o][k] Σ_i A[k][i] x[n][i]
        for n in 0..5 {
            for o in 0..4 {
                let mut want = 0.0;
                for i in 0..7 {
                    want += x.at(&[n, i]) * w.at(&[o, i]);
                }
                for k in 0..3 {
                    let ax: f64 = (0..7).map(|i| muted.a.at(&[k, i]) * x.at(&[n, i])).sum();
                    want += 2.0 * muted.b.at(&[o, k]) * ax;
                }
                assert!((got.at(&[n, o]) - want).abs() <= 1e-12);
            }
        }
        assert!(adapted_matmul(&x, &Tensor::zeros([4, 6]), &muted).is_err());
    }

    #[test]
    fn merge_agrees_with_adapted_forward_once() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn([6, 8], 1.0, &mut rng);
        let w = Tensor::randn([5, 8], 1.0, &mut rng);
        let ad = random_adapter(&mut rng, 5, 8, 2, 3.0);
        let merged = merge(&ad, &w).unwrap();
        let a = ops::matmul_nt(&x, &merged).unwrap();
        let b = adapted_matmul(&x, &w, &ad).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);
        let twice = merge(&ad, &merged).unwrap();
        assert!(twice.max_abs_diff(&merged).unwrap() > 1e-3);
    }

    #[test]
    fn merge_into_removes_adapters() {
        let cfg = ModelConfig::miniature();
        let mut store = init_params(&cfg, 1).unwrap();
        let set = inject(&mut store, &DEFAULT_TARGETS, 2, 2.0, 5).unwrap();
        merge_into(&mut store, &set).unwrap();
        assert!(!store.names().any(is_adapter));
        assert!(matches!(merge_into(&mut store, &set), Err(Error::Lora(_))));
    }

    fn tiny_batch(cfg: &ModelConfig, rng: &mut Rng) -> Vec<Example> {
        let [h, w, c] = cfg.latent_shape();
        (0..2)
            .map(|_| Example {
                cond: Tensor::randn([h, w, c], 0.5, rng),
                target: Tensor::randn([h, w, c], 0.5, rng),
                ids: vec![2, 8, 11, 14, 17, 19][..cfg.text_len].to_vec(),
                task: Task::Subject,
            })
            .collect()
    }

    #[test]
    fn fresh_adapters_are_identity_and_training_keeps_base_frozen() {
        let cfg = ModelConfig::miniature();
        let model = Model::new(cfg.clone(), MaskStrategy::A).unwrap();
        let mut base = init_params(&cfg, 8).unwrap();
        // move the zero-initialised output layers so the check is not vacuous
        let mut rng = Rng::new(12);
        for (_, t) in base.iter_mut() {
            let n = t.numel();
            let noise = Tensor::randn([n], 0.1, &mut rng);
            for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += e;
            }
        }
        let mut store = base.clone();
        inject(&mut store, &DEFAULT_TARGETS, 4, cfg.lora_alpha, 9).unwrap();
        let batch = tiny_batch(&cfg, &mut rng);
        let ex = &batch[0];
        let z = Tensor::randn(ex.target.shape().to_vec(), 1.0, &mut rng);
        let before = model.predict(&base, &ex.cond, &z, &ex.ids, 500, ex.task).unwrap();
        let after = model.predict(&store, &ex.cond, &z, &ex.ids, 500, ex.task).unwrap();
        assert!(before.bitwise_eq(&after));

        let sched = DiffusionSchedule::default();
        let mut opt = AdamW::new(1e-2, (0.9, 0.95), 0.01);
        let refs: Vec<&Example> = batch.iter().collect();
        for _ in 0..3 {
            train_step(&model, &mut store, &mut opt, &refs, &sched, 0.1, &mut rng).unwrap();
        }
        for (name, t) in base.iter() {
            let now = store.require(name).unwrap();
            if is_direct(name) {
                continue;
            }
            assert!(now.bitwise_eq(t), "{name} moved");
        }
        let moved = store
            .iter()
            .filter(|(n, _)| n.starts_with("lora.") && n.ends_with(".B"))
            .any(|(_, t)| t.data().iter().any(|&v| v != 0.0));
        assert!(moved);
    }
}
