//! Central-difference verification of recorded adjoints.
//!
//! The op under test is reduced to a scalar by a fixed random projection,
//! differentiated by [`Graph::backward`], and compared coordinate by
//! coordinate against `(f(x + h) - f(x - h)) / 2h`. Relative error for an
//! input is the largest absolute discrepancy divided by the largest
//! gradient magnitude of that input (a norm-wise relative error).
//!
//! Piecewise-linear ops (relu, clamp) make a central difference invalid
//! when a perturbation crosses a kink. Each perturbed evaluation is tagged
//! with [`Graph::kink_signature`]; a coordinate whose two-sided stencil
//! leaves the base point's piece falls back to the one-sided difference
//! that stays on it, and is skipped when neither side does.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinates checked with a one-sided difference because of a nearby kink.
    pub one_sided: usize,
    /// Coordinates with kinks on both sides of the stencil.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.max_rel_error < self.tol)
    }
}

const PROJECTION_SEED: u64 = 0x6772_6164;

fn evaluate<F>(f: &F, inputs: &[Tensor], weights: &mut Option<Vec<f64>>) -> Result<(Graph, Var, Vec<Var>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let y = f(&mut g, &vars)?;
    let shape = g.shape(y).to_vec();
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        (0..g.value(y).len()).map(|_| rng.random_range(0.5..1.5)).collect()
    });
    if w.len() != g.value(y).len() {
        return Err(TensorError::Contract("op output size changed between evaluations".into()));
    }
    let wv = g.constant(&shape, w.clone())?;
    let prod = g.mul(y, wv)?;
    let loss = g.sum(prod);
    Ok((g, loss, vars))
}

/// Checks the analytic gradient of `f` with respect to every input that requires a gradient.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut weights = None;
    let (mut g, loss, vars) = evaluate(&f, inputs, &mut weights)?;
    let base_sig = g.kink_signature();
    let base_val = g.value(loss)[0];
    g.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut reports = Vec::new();
    for (idx, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let exact = analytic[idx].clone().unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        let mut valid = vec![true; input.numel()];
        let (mut one_sided, mut skipped) = (0, 0);
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[idx].data_mut()[j] = orig + step;
            let (gp, lp, _) = evaluate(&f, &work, &mut weights)?;
            work[idx].data_mut()[j] = orig - step;
            let (gm, lm, _) = evaluate(&f, &work, &mut weights)?;
            work[idx].data_mut()[j] = orig;
            let (fp, fm) = (gp.value(lp)[0], gm.value(lm)[0]);
            let (sp, sm) = (gp.kink_signature() == base_sig, gm.kink_signature() == base_sig);
            numeric[j] = match (sp, sm) {
                (true, true) => (fp - fm) / (2.0 * step),
                (true, false) => {
                    one_sided += 1;
                    (fp - base_val) / step
                }
                (false, true) => {
                    one_sided += 1;
                    (base_val - fm) / step
                }
                (false, false) => {
                    skipped += 1;
                    valid[j] = false;
                    0.0
                }
            };
        }
        let mut max_abs: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for j in 0..input.numel() {
            if !valid[j] {
                continue;
            }
            max_abs = max_abs.max((exact[j] - numeric[j]).abs());
            scale = scale.max(exact[j].abs()).max(numeric[j].abs());
        }
        let max_rel_error = if max_abs == 0.0 { 0.0 } else { max_abs / scale.max(1e-8) };
        reports.push(InputReport {
            index: idx,
            max_rel_error,
            max_abs_error: max_abs,
            one_sided,
            skipped,
        });
    }
    Ok(GradcheckReport { inputs: reports, tol })
}

/// Uniform random tensor in `[-1, 1)` that requires a gradient.
pub fn random_input(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("positive shape")
        .requiring_grad()
}

/// A named op exercised by [`op_suite`].
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub op: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
}

/// One random instance of every differentiable op, for the given seed.
pub fn op_suite(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_input(shape, &mut rng);
    let positive = |t: Tensor| {
        let data = t.data().iter().map(|v| v.abs() + 0.5).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap().requiring_grad()
    };
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], $body:expr) => {
            OpCase { name: $name, inputs: vec![$($inp),*], op: Box::new($body) }
        };
    }
    vec![
        case!("matmul", [r(&[3, 4]), r(&[4, 2])], |g, v| g.matmul(v[0], v[1])),
        case!("softmax_rows", [r(&[3, 5])], |g, v| g.softmax_rows(v[0])),
        case!("conv1d", [r(&[2, 9]), r(&[3, 2, 3])], |g, v| g.conv1d(v[0], v[1], 2, 1)),
        case!("conv1d_batched", [r(&[3, 2, 8]), r(&[2, 2, 3])], |g, v| g.conv1d(v[0], v[1], 1, 1)),
        case!("conv2d", [r(&[2, 6, 5]), r(&[3, 2, 3, 3])], |g, v| g.conv2d(v[0], v[1], 2, 1)),
        case!("relu", [r(&[4, 3])], |g, v| Ok(g.relu(v[0]))),
        case!("sigmoid", [r(&[4, 3])], |g, v| Ok(g.sigmoid(v[0]))),
        case!("ln", [positive(r(&[5]))], |g, v| Ok(g.ln(v[0]))),
        case!("clamp", [r(&[6])], |g, v| Ok(g.clamp(v[0], -0.5, 0.5))),
        case!("add", [r(&[2, 3]), r(&[2, 3])], |g, v| g.add(v[0], v[1])),
        case!("sub", [r(&[2, 3]), r(&[2, 3])], |g, v| g.sub(v[0], v[1])),
        case!("mul", [r(&[2, 3]), r(&[2, 3])], |g, v| g.mul(v[0], v[1])),
        case!("scale", [r(&[2, 3])], |g, v| Ok(g.affine(v[0], -1.7, 0.3))),
        case!("sum", [r(&[2, 3])], |g, v| Ok(g.sum(v[0]))),
        case!("mean_over_axis", [r(&[2, 3, 4])], |g, v| g.mean_over_axis(v[0], 1)),
        case!("global_avg_pool", [r(&[3, 5])], |g, v| g.global_avg_pool(v[0])),
        case!("transpose2d", [r(&[2, 5])], |g, v| g.transpose2d(v[0])),
        case!("reshape", [r(&[2, 6])], |g, v| g.reshape(v[0], &[3, 4])),
        case!("channel_norm", [r(&[2, 3, 5]), r(&[3]), r(&[3])], |g, v| g.channel_norm(v[0], v[1], v[2])),
        case!("group_norm", [r(&[2, 4, 3]), r(&[4]), r(&[4])], |g, v| g.group_norm(v[0], v[1], v[2], 2)),
        case!("avg_pool2d", [r(&[2, 5, 4])], |g, v| g.avg_pool2d(v[0], 2)),
        case!("adaptive_avg_pool1d", [r(&[3, 7])], |g, v| g.adaptive_avg_pool1d(v[0], 3)),
    ]
}
