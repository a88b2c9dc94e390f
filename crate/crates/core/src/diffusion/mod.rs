//! Noising, the noise-regression objective, training step and guided
//! DDIM sampling.

pub mod optim;
pub mod schedule;

use rayon::prelude::*;

pub use optim::AdamW;
pub use schedule::{q_sample, DiffusionSchedule};

use crate::error::{shape_mismatch, Error, Result};
use crate::model::codec;
use crate::model::vocab::null_prompt;
use crate::model::Model;
use crate::task::Task;
use crate::tensor::{ParameterStore, Rng, Tape, Tensor};

/// One training pair in model space: clean condition and target latents.
#[derive(Clone, Debug)]
pub struct Example {
    pub cond: Tensor,
    pub target: Tensor,
    pub ids: Vec<usize>,
    pub task: Task,
}

/// A target latent noised at timestep `t`, with its text possibly dropped.
#[derive(Clone, Debug)]
pub struct NoisedSample {
    pub t: usize,
    pub eps: Tensor,
    pub z_t: Tensor,
    pub ids: Vec<usize>,
    pub dropped: bool,
}

/// Draws `t`, `ε` and the text-drop flag for `ex`, in that order.
pub fn noise_example(ex: &Example, sched: &DiffusionSchedule, cfg_drop: f64, rng: &mut Rng) -> Result<NoisedSample> {
    let t = rng.below(sched.t_max());
    let eps = Tensor::randn(ex.target.shape().to_vec(), 1.0, rng);
    let dropped = rng.bernoulli(cfg_drop);
    let z_t = q_sample(&ex.target, t, &eps, sched)?;
    let ids = if dropped { null_prompt(ex.ids.len()) } else { ex.ids.clone() };
    Ok(NoisedSample { t, eps, z_t, ids, dropped })
}

/// Mean squared error between predicted and true noise.
pub fn loss(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    if eps_hat.shape() != eps.shape() {
        return Err(shape_mismatch("loss", eps_hat.shape(), eps.shape()));
    }
    let n = eps.numel().max(1) as f64;
    Ok(eps_hat.data().iter().zip(eps.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Loss and trainable-parameter gradients of one noised example.
pub fn example_gradients(
    model: &Model,
    store: &ParameterStore,
    ex: &Example,
    ns: &NoisedSample,
) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let cond = tape.constant(&ex.cond);
    let z = tape.constant(&ns.z_t);
    let f = model.forward(&mut tape, &b, cond, z, &ns.ids, ns.t, ex.task)?;
    let eps = tape.constant(&ns.eps);
    let l = tape.mse(f.eps, eps)?;
    let value = tape.scalar(l)?;
    let mut g = tape.backward(l)?;
    let grads = store
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(name, t)| {
            let v = b.get(name)?;
            Ok((name.to_string(), g.take(v).unwrap_or_else(|| vec![0.0; t.numel()])))
        })
        .collect::<Result<_>>()?;
    Ok((value, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimizer step on `batch`. Samples are processed in parallel, but
/// their gradients are summed in batch order, so results do not depend on
/// the worker count. A non-finite loss or gradient leaves `store` untouched.
pub fn train_step(
    model: &Model,
    store: &mut ParameterStore,
    opt: &mut AdamW,
    batch: &[&Example],
    sched: &DiffusionSchedule,
    cfg_drop: f64,
    rng: &mut Rng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let noised = batch
        .iter()
        .map(|ex| noise_example(ex, sched, cfg_drop, rng))
        .collect::<Result<Vec<_>>>()?;
    let frozen: &ParameterStore = store;
    let per_sample = batch
        .par_iter()
        .zip(noised.par_iter())
        .map(|(ex, ns)| example_gradients(model, frozen, ex, ns))
        .collect::<Vec<_>>();

    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut sum: Vec<(String, Vec<f64>)> = Vec::new();
    for r in per_sample {
        let (l, grads) = r?;
        total += l;
        if sum.is_empty() {
            sum = grads;
        } else {
            for ((_, acc), (_, g)) in sum.iter_mut().zip(grads) {
                acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
        }
    }
    let loss = total * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss}")));
    }
    for (_, g) in &mut sum {
        g.iter_mut().for_each(|v| *v *= inv);
    }
    let grad_norm = opt.step(store, &sum)?;
    Ok(StepStats { loss, grad_norm })
}

/// Conditional and unconditional predictions. The condition frame is
/// present in both; only the text is replaced by the null prompt.
#[allow(clippy::too_many_arguments)]
pub fn guided_branches(
    model: &Model,
    store: &ParameterStore,
    z_t: &Tensor,
    t: usize,
    ids: &[usize],
    cond: &Tensor,
    task: Task,
) -> Result<(Tensor, Tensor)> {
    let c = model.predict(store, cond, z_t, ids, t, task)?;
    let u = model.predict(store, cond, z_t, &null_prompt(ids.len()), t, task)?;
    Ok((c, u))
}

/// `ε_u + ω(ε_c − ε_u)`, evaluated as `(1−ω)·ε_u + ω·ε_c` so that `ω = 0`
/// and `ω = 1` reproduce a single branch exactly.
pub fn combine_guidance(cond: &Tensor, uncond: &Tensor, omega: f64) -> Tensor {
    Tensor::from_fn(cond.shape().to_vec(), |i| {
        (1.0 - omega) * uncond.data()[i] + omega * cond.data()[i]
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cfg_predict(
    model: &Model,
    store: &ParameterStore,
    z_t: &Tensor,
    t: usize,
    ids: &[usize],
    cond: &Tensor,
    task: Task,
    omega: f64,
) -> Result<Tensor> {
    let (c, u) = guided_branches(model, store, z_t, t, ids, cond, task)?;
    Ok(combine_guidance(&c, &u, omega))
}

/// `steps` trailing, uniformly spaced timesteps, largest first.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::Config(format!("sampling steps must be in 1..={t_max}, got {steps}")));
    }
    let ratio = t_max as f64 / steps as f64;
    Ok((0..steps)
        .map(|i| ((t_max as f64 - i as f64 * ratio).round() as usize).saturating_sub(1))
        .collect())
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Decoded image in `[0,1]`.
    pub image: Tensor,
    pub latent: Tensor,
    /// Forward passes per guidance branch.
    pub evaluations: usize,
}

/// Deterministic DDIM (η = 0) with classifier-free guidance on the text.
/// `cond_image` is in `[0,1]`; the initial noise comes from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &Model,
    store: &ParameterStore,
    sched: &DiffusionSchedule,
    cond_image: &Tensor,
    ids: &[usize],
    task: Task,
    steps: usize,
    omega: f64,
    seed: u64,
) -> Result<SampleOutput> {
    let s = model.cfg.latent_factor;
    let cond = codec::image_to_latent(cond_image, s)?;
    let ts = ddim_timesteps(sched.t_max(), steps)?;
    let mut rng = Rng::new(seed).derive_str("sample.noise");
    let mut z = Tensor::randn(cond.shape().to_vec(), 1.0, &mut rng);
    let mut evaluations = 0;
    for (i, &t) in ts.iter().enumerate() {
        let (c, u) = guided_branches(model, store, &z, t, ids, &cond, task)?;
        evaluations += 1;
        let eps = combine_guidance(&c, &u, omega);
        let ab = sched.alpha_bar(t)?;
        let ab_prev = match ts.get(i + 1) {
            Some(&tp) => sched.alpha_bar(tp)?,
            None => 1.0,
        };
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        z = Tensor::from_fn(z.shape().to_vec(), |j| {
            let e = eps.data()[j];
            let x0 = ((z.data()[j] - sb * e) / sa).clamp(-1.0, 1.0);
            pa * x0 + pb * e
        });
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at t={t}")));
        }
    }
    let image = codec::latent_to_image(&z, s)?;
    Ok(SampleOutput { image, latent: z, evaluations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, MaskStrategy, ModelConfig, Vocabulary};

    fn setup() -> (Model, ParameterStore, Example) {
        let cfg = ModelConfig::miniature();
        let model = Model::new(cfg.clone(), MaskStrategy::A).unwrap();
        let mut store = init_params(&cfg, 3).unwrap();
        let mut rng = Rng::new(4);
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v += 0.05 * rng.normal();
            }
        }
        let s = cfg.latent_shape();
        let ex = Example {
            cond: Tensor::randn(s, 0.5, &mut rng),
            target: Tensor::randn(s, 0.5, &mut rng),
            ids: Vocabulary::shipped().encode("blue circle right bg_white", cfg.text_len).unwrap(),
            task: Task::Canny,
        };
        (model, store, ex)
    }

    #[test]
    fn loss_examples() {
        let mut rng = Rng::new(1);
        let e = Tensor::randn([3, 4], 1.0, &mut rng);
        assert_eq!(loss(&e, &e).unwrap(), 0.0);
        let z = Tensor::zeros([3, 4]);
        let want = e.data().iter().map(|v| v * v).sum::<f64>() / 12.0;
        assert!((loss(&z, &e).unwrap() - want).abs() < 1e-15);
        let a = Tensor::randn([3, 4], 1.0, &mut rng);
        let oracle: f64 = (0..12).map(|i| (a.data()[i] - e.data()[i]).powi(2)).sum::<f64>() / 12.0;
        assert!((loss(&a, &e).unwrap() - oracle).abs() < 1e-12);
        assert!(loss(&a, &z.reshape([12]).unwrap()).is_err());
    }

    #[test]
    fn zero_lr_step_changes_nothing() {
        let (model, mut store, ex) = setup();
        let before = store.clone();
        let mut opt = AdamW::new(0.0, (0.9, 0.95), 0.01);
        let sched = DiffusionSchedule::default();
        train_step(&model, &mut store, &mut opt, &[&ex, &ex], &sched, 0.1, &mut Rng::new(5)).unwrap();
        assert!(store.bitwise_eq(&before));
    }

    #[test]
    fn condition_pixels_receive_gradient_but_loss_reads_target_only() {
        let (model, store, ex) = setup();
        let sched = DiffusionSchedule::default();
        let ns = noise_example(&ex, &sched, 0.0, &mut Rng::new(6)).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let cond = tape.variable(&ex.cond);
        let z = tape.variable(&ns.z_t);
        let f = model.forward(&mut tape, &b, cond, z, &ns.ids, ns.t, ex.task).unwrap();
        let eps = tape.variable(&ns.eps);
        let l = tape.mse(f.eps, eps).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(cond).unwrap().iter().any(|&v| v != 0.0));
        assert!(g.get(eps).unwrap().iter().any(|&v| v != 0.0));
        assert_eq!(g.get(eps).unwrap().len(), model.geometry.latent_numel());
    }

    #[test]
    fn guidance_endpoints_are_exact() {
        let (model, store, ex) = setup();
        let z = Tensor::randn(ex.target.shape().to_vec(), 1.0, &mut Rng::new(7));
        let (c, u) = guided_branches(&model, &store, &z, 400, &ex.ids, &ex.cond, ex.task).unwrap();
        let one = cfg_predict(&model, &store, &z, 400, &ex.ids, &ex.cond, ex.task, 1.0).unwrap();
        let zero = cfg_predict(&model, &store, &z, 400, &ex.ids, &ex.cond, ex.task, 0.0).unwrap();
        assert!(one.max_abs_diff(&c).unwrap() <= 1e-12);
        assert!(zero.max_abs_diff(&u).unwrap() <= 1e-12);
        assert!(c.max_abs_diff(&u).unwrap() > 0.0);
        // affine in ω
        let w = |o: f64| combine_guidance(&c, &u, o);
        let mid = w(3.5);
        let lin = Tensor::from_fn(c.shape().to_vec(), |i| 0.5 * (w(3.0).data()[i] + w(4.0).data()[i]));
        assert!(mid.max_abs_diff(&lin).unwrap() < 1e-12);
    }

    #[test]
    fn ddim_timesteps_are_trailing_and_uniform() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert_eq!(ts[1], 979);
        assert_eq!(*ts.last().unwrap(), 19);
        assert!(ddim_timesteps(1000, 0).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_counts_evaluations() {
        let (model, store, ex) = setup();
        let cond_img = codec::latent_to_image(&ex.cond, 2).unwrap();
        let sched = DiffusionSchedule::default();
        let a = sample(&model, &store, &sched, &cond_img, &ex.ids, ex.task, 4, 2.0, 9).unwrap();
        let b = sample(&model, &store, &sched, &cond_img, &ex.ids, ex.task, 4, 2.0, 9).unwrap();
        assert!(a.image.bitwise_eq(&b.image));
        assert_eq!(a.evaluations, 4);
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
