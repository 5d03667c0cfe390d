//! Central finite-difference oracle for checking tape gradients.
//!
//! The oracle only ever evaluates the forward pass; it shares no code with
//! the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Result, Tape, Var};
use crate::nn::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor of the relative error, so gradients that are zero on
/// both routes do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

/// Entries whose error at the base step exceeds this are re-probed with
/// smaller steps.
pub const REFINE_ABOVE: f64 = 1e-5;

/// Step divisors tried after the base step. A central difference whose
/// interval straddles a ReLU or max-pool kink is not a derivative estimate;
/// a smaller step usually avoids the kink, while a wrong backward rule
/// disagrees at every step.
const REFINE: [f64; 2] = [10.0, 100.0];

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input or parameter name, flat index, analytic, numeric) at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        }
    }

    fn record(&mut self, what: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((what.to_string(), index, analytic, numeric));
        }
    }
}

/// Numeric derivative closest to `analytic` over the step ladder, given
/// `at(x)` evaluating the function with the probed entry set to `x`. The
/// caller restores the entry afterwards.
fn central<E>(orig: f64, eps: f64, analytic: f64, mut at: impl FnMut(f64) -> Result<f64, E>) -> Result<f64, E> {
    let mut diff = |h: f64| -> Result<f64, E> { Ok((at(orig + h)? - at(orig - h)?) / (2.0 * h)) };
    let mut best = diff(eps)?;
    for div in REFINE {
        if relative_error(analytic, best) <= REFINE_ABOVE {
            break;
        }
        let n = diff(eps / div)?;
        if relative_error(analytic, n) < relative_error(analytic, best) {
            best = n;
        }
    }
    Ok(best)
}

/// Uniform random tensor in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any output to a scalar through a fixed pseudo-random weighting,
/// so every output element contributes a distinct sensitivity.
pub fn weighted_sum<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&out.shape(), &mut rng);
    out.mul(out.tape().constant(w))?.sum_all()
}

/// Checks d f / d inputs for a function of differentiable leaves.
pub fn check_inputs<F, E>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<AutodiffError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradCheck::new();
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let a = analytic[k].data()[i];
            let numeric = central(input.data()[i], eps, a, |x| {
                probe[k].data_mut()[i] = x;
                eval(&probe)
            })?;
            probe[k].data_mut()[i] = input.data()[i];
            report.record(&format!("input{k}"), i, a, numeric);
        }
    }
    Ok(report)
}

/// Which entries of each parameter tensor to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// Up to this many entries per tensor: the largest-gradient entry plus
    /// evenly spaced ones.
    PerTensor(usize),
}

/// Checks d f / d θ for every parameter tensor of `store`.
pub fn check_params<F, E>(store: &ParamStore, f: F, coverage: Coverage, eps: f64) -> Result<GradCheck, E>
where
    F: for<'t> Fn(&Ctx<'t>) -> Result<Var<'t>, E>,
    E: From<AutodiffError>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    // bind every parameter so unused ones report a zero gradient
    for id in store.ids() {
        ctx.param(id);
    }
    let loss = f(&ctx)?;
    tape.backward(loss)?;
    let grads = tape.param_grads(store);

    let mut probe = store.clone();
    let eval = |probe: &ParamStore| -> Result<f64, E> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, probe);
        Ok(f(&ctx)?.value().item())
    };

    let mut report = GradCheck::new();
    for id in store.ids() {
        let g = grads[id.index()].clone().expect("bound parameter");
        for i in entries(&g, coverage) {
            let a = g.data()[i];
            let numeric = central(store.get(id).data()[i], eps, a, |x| {
                set(&mut probe, id, i, x);
                eval(&probe)
            })?;
            set(&mut probe, id, i, store.get(id).data()[i]);
            report.record(store.name(id), i, a, numeric);
        }
    }
    Ok(report)
}

fn set(store: &mut ParamStore, id: ParamId, i: usize, v: f64) {
    store.get_mut(id).data_mut()[i] = v;
}

fn entries(g: &Tensor, coverage: Coverage) -> Vec<usize> {
    let n = g.len();
    match coverage {
        Coverage::All => (0..n).collect(),
        Coverage::PerTensor(k) if k >= n => (0..n).collect(),
        Coverage::PerTensor(k) => {
            let argmax = (0..n)
                .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
                .unwrap_or(0);
            let mut out = vec![argmax];
            let stride = n / k.max(1);
            out.extend((0..k.saturating_sub(1)).map(|j| (j * stride + stride / 2) % n));
            out.sort_unstable();
            out.dedup();
            out
        }
    }
}
