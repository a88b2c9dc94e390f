//! Finite-difference audit of the model's gradients, block by block and
//! through the full noise-regression loss.

use std::sync::Arc;

use crate::diffusion::{q_sample, DiffusionSchedule};
use crate::error::Result;
use crate::model::dit::dit_block_var;
use crate::model::{init_params, MaskStrategy, Model, ModelConfig, Vocabulary};
use crate::task::Task;
use crate::tensor::gradcheck::{grad_check_params, GradCheckReport};
use crate::tensor::{Fault, ParameterStore, Rng, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Coordinates probed per tensor; `None` probes every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Standard deviation of the random parameters under test. Zero-initialized
    /// layers would otherwise hide whole paths.
    pub param_std: f64,
    pub strategy: MaskStrategy,
    /// Test hook: corrupts one backward rule on every tape.
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, max_coords: Some(8), seed: 0, param_std: 0.2, strategy: MaskStrategy::A, fault: None }
    }
}

#[derive(Clone, Debug)]
pub struct ScopeReport {
    pub scope: String,
    pub report: GradCheckReport,
}

/// Worst `(scope, parameter, error)` across all scopes.
pub fn worst(reports: &[ScopeReport]) -> Option<(String, String, f64)> {
    reports
        .iter()
        .filter_map(|r| r.report.worst().map(|(n, e)| (r.scope.clone(), n.to_string(), e)))
        .max_by(|a, b| a.2.total_cmp(&b.2))
}

fn random_params(cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<ParameterStore> {
    let mut store = init_params(cfg, opts.seed)?;
    let mut rng = Rng::new(opts.seed).derive_str("gradcheck.params");
    for (name, t) in store.iter_mut() {
        let s = if name == "text.table" { 1.0 } else { opts.param_std };
        for v in t.data_mut() {
            *v = rng.normal() * s;
        }
    }
    Ok(store)
}

/// One report per block (random input sequence, random linear readout of
/// the block output), then one for the end-to-end loss over all parameters.
pub fn model_gradcheck(cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<Vec<ScopeReport>> {
    let model = Model::new(cfg.clone(), opts.strategy)?;
    let store = random_params(cfg, opts)?;
    let mut rng = Rng::new(opts.seed).derive_str("gradcheck.inputs");
    let mask = model.mask.to_tensor();
    let mut out = Vec::new();

    for block in 0..cfg.n_blocks {
        let x = Tensor::randn([model.layout.len(), cfg.d_model], 1.0, &mut rng);
        let w: Arc<[f64]> = (0..x.numel()).map(|_| rng.normal()).collect();
        let prefix = format!("blocks.{block}.");
        let params = store.filtered(|n| n.starts_with(&prefix));
        let report = grad_check_params(
            &params,
            |tape, s| {
                tape.set_fault(opts.fault);
                let b = s.bind(tape);
                let xv = tape.constant(&x);
                let m = tape.constant(&mask);
                let o = dit_block_var(tape, &b, cfg, block, xv, 123, model.layout, Some(m), model.rope())?;
                Ok((tape.weighted_sum(o.out, w.clone())?, b))
            },
            opts.h,
            opts.max_coords,
            opts.seed,
        )?;
        out.push(ScopeReport { scope: format!("block {block}"), report });
    }

    let shape = cfg.latent_shape();
    let cond = Tensor::randn(shape, 1.0, &mut rng);
    let target = Tensor::randn(shape, 0.5, &mut rng);
    let eps = Tensor::randn(shape, 1.0, &mut rng);
    let t = 321.min(cfg.t_max - 1);
    let sched = DiffusionSchedule::linear(cfg.t_max, 1e-4, 2e-2)?;
    let z = q_sample(&target, t, &eps, &sched)?;
    let ids = Vocabulary::shipped().encode("circle left top small bg_gray", cfg.text_len)?;
    let report = grad_check_params(
        &store,
        |tape, s| {
            tape.set_fault(opts.fault);
            let b = s.bind(tape);
            let c = tape.constant(&cond);
            let zv = tape.constant(&z);
            let f = model.forward(tape, &b, c, zv, &ids, t, Task::Subject)?;
            let e = tape.constant(&eps);
            Ok((tape.mse(f.eps, e)?, b))
        },
        opts.h,
        opts.max_coords,
        opts.seed,
    )?;
    out.push(ScopeReport { scope: "end-to-end loss".into(), report });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miniature_passes_and_fault_is_caught() {
        let cfg = ModelConfig::miniature();
        let opts = GradCheckOptions { max_coords: Some(3), ..Default::default() };
        let reps = model_gradcheck(&cfg, &opts).unwrap();
        assert_eq!(reps.len(), cfg.n_blocks + 1);
        let (_, name, err) = worst(&reps).unwrap();
        assert!(err <= 1e-4, "{name}: {err}");

        let bad = GradCheckOptions { fault: Some(Fault::SiluBackward), ..opts };
        let (_, name, err) = worst(&model_gradcheck(&cfg, &bad).unwrap()).unwrap();
        assert!(err > 1e-2, "{name}: {err}");
        assert!(name.contains("adaln"), "{name}");
    }
}
