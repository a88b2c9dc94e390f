//! Central-difference gradient checking.

use super::{ParameterStore, Rng, Tape, Tensor, Var};
use crate::error::Result;

/// Relative error used throughout: `|a - fd| / max(|a|, |fd|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of a scalar function `f`
/// at `x` and central differences with step `h`, over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.variable(x);
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.variable(probe);
        let l = f(&mut t, v)?;
        t.scalar(l)
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(a, (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

/// Outcome of checking many named parameters.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(name, worst relative error, coordinates checked)` per parameter.
    pub per_param: Vec<(String, f64, usize)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, e, _)| (n.as_str(), *e))
    }

    pub fn worst_error(&self) -> f64 {
        self.worst().map_or(0.0, |(_, e)| e)
    }
}

/// Checks `loss(store)` against central differences for every trainable
/// parameter. At most `max_coords` coordinates per tensor are probed,
/// chosen reproducibly from `seed`; `None` probes all of them.
pub fn grad_check_params<F>(
    store: &ParameterStore,
    loss: F,
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<(Var, super::Bound)>,
{
    let mut tape = Tape::new();
    let (l, bound) = loss(&mut tape, store)?;
    let grads = tape.backward(l)?;

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _) = loss(&mut t, s)?;
        t.scalar(l)
    };

    let mut rng = Rng::new(seed);
    let mut probe = store.clone();
    let mut per_param = Vec::new();
    for (name, t) in store.iter() {
        if !t.requires_grad() {
            continue;
        }
        let v = bound.get(name)?;
        let analytic = grads
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < t.numel() => (0..k).map(|_| rng.below(t.numel())).collect(),
            _ => (0..t.numel()).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = t.data()[i];
            probe.get_mut(name).expect("same names").data_mut()[i] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[i], (fp - fm) / (2.0 * h)));
        }
        per_param.push((name.to_string(), worst, coords.len()));
    }
    Ok(GradCheckReport { per_param })
}
