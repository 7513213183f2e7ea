//! Central-difference verification of tape gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{reconstruction_loss, total_loss, ReconKind, TeacherDistribution};
use crate::model::{forward, forward_on_tape, sample_mask, GaeModel, ModelVars, PreparedGraph};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Largest acceptable relative error.
pub const THRESHOLD: f64 = 1e-4;

/// Compares the tape gradient of a scalar function against central
/// differences and returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
///
/// `f` receives a fresh tape and the input as a parameter and must return a
/// `1×1` variable on that tape.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&mut tape, input)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.param(point);
        let out = f(&mut tape, input)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("function value during finite differences".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
}

fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// `Σ r ⊙ v` with a fixed random `r`, so every output entry matters.
fn readout(tape: &mut Tape, v: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let prod = tape.mul(v, r)?;
    Ok(tape.sum(prod))
}

/// The 5-node fixture: a 4-cycle with one chord and a pendant node.
pub fn fixture_graph(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(5, 4, -1.0, 1.0, &mut rng);
    Graph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 0), (1, 3), (2, 4)], x).expect("valid fixture")
}

type Check = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Gradient checks of every primitive and of the full objective with respect
/// to each model parameter.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let g = fixture_graph(seed);
    let adj = Arc::new(g.add_self_loops().normalized_adjacency());
    let sources = g.edge_sources();
    let targets = g.targets().to_vec();
    let e = targets.len();

    let x54 = random(5, 4, -1.0, 1.0, &mut rng);
    let pos54 = random(5, 4, 0.5, 1.5, &mut rng);
    let c43 = random(4, 3, -1.0, 1.0, &mut rng);
    let a54 = random(5, 4, -1.0, 1.0, &mut rng);
    let r53 = random(5, 3, -1.0, 1.0, &mut rng);
    let r54 = random(5, 4, -1.0, 1.0, &mut rng);
    let r44 = random(4, 4, -1.0, 1.0, &mut rng);
    let re1 = random(e, 1, -1.0, 1.0, &mut rng);
    let r51 = random(5, 1, -1.0, 1.0, &mut rng);
    let row14 = random(1, 4, -1.0, 1.0, &mut rng);
    let slope = random(1, 1, 0.1, 0.4, &mut rng);
    let seg_x = random(6, 2, -1.0, 1.0, &mut rng);
    let seg_r = random(4, 2, -1.0, 1.0, &mut rng);
    let soft_x = random(6, 1, -1.0, 1.0, &mut rng);
    let soft_r = random(6, 1, -1.0, 1.0, &mut rng);
    let segments = vec![0, 0, 1, 3, 3, 3];

    let mut checks: Vec<(&str, Tensor, Check)> = Vec::new();
    macro_rules! check {
        ($name:expr, $point:expr, |$t:ident, $x:ident| $body:expr) => {
            checks.push(($name, $point.clone(), Box::new(move |$t: &mut Tape, $x: Var| $body)));
        };
    }
    {
        let (c, r) = (c43.clone(), r53.clone());
        check!("matmul/left", x54, |t, x| {
            let c = t.constant(c.clone());
            let y = t.matmul(x, c)?;
            readout(t, y, &r)
        });
    }
    {
        let (a, r) = (a54.clone(), r53.clone());
        check!("matmul/right", c43, |t, x| {
            let a = t.constant(a.clone());
            let y = t.matmul(a, x)?;
            readout(t, y, &r)
        });
    }
    {
        let (a, r) = (a54.clone(), r54.clone());
        check!("add", x54, |t, x| {
            let a = t.constant(a.clone());
            let y = t.add(x, a)?;
            let y = t.add(y, x)?;
            readout(t, y, &r)
        });
    }
    {
        let (a, r) = (a54.clone(), r54.clone());
        check!("sub", x54, |t, x| {
            let a = t.constant(a.clone());
            let y = t.sub(a, x)?;
            readout(t, y, &r)
        });
    }
    {
        let (a, r) = (a54.clone(), r54.clone());
        check!("mul", x54, |t, x| {
            let a = t.constant(a.clone());
            let y = t.mul(x, x)?;
            let y = t.mul(y, a)?;
            readout(t, y, &r)
        });
    }
    {
        let r = r54.clone();
        check!("scale", x54, |t, x| {
            let y = t.scale(x, -1.7)?;
            readout(t, y, &r)
        });
    }
    {
        let r = r54.clone();
        check!("normalize_rows", x54, |t, x| {
            let y = t.normalize_rows(x)?;
            readout(t, y, &r)
        });
    }
    {
        let r = r54.clone();
        check!("pow/integer", x54, |t, x| {
            let y = t.pow(x, 3.0)?;
            readout(t, y, &r)
        });
    }
    {
        let r = r54.clone();
        check!("pow/fractional", pos54, |t, x| {
            let y = t.pow(x, 2.5)?;
            readout(t, y, &r)
        });
    }
    {
        let r = r54.clone();
        check!("exp", x54, |t, x| {
            let y = t.exp(x)?;
            readout(t, y, &r)
        });
    }
    {
        let r = r54.clone();
        check!("log", pos54, |t, x| {
            let y = t.log(x)?;
            readout(t, y, &r)
        });
    }
    {
        let (s, r) = (slope.clone(), r54.clone());
        check!("prelu/input", x54, |t, x| {
            let s = t.constant(s.clone());
            let y = t.prelu(x, s)?;
            readout(t, y, &r)
        });
    }
    {
        let (a, r) = (a54.clone(), r54.clone());
        check!("prelu/slope", slope, |t, s| {
            let a = t.constant(a.clone());
            let y = t.prelu(a, s)?;
            readout(t, y, &r)
        });
    }
    {
        let r = r44.clone();
        check!("gather_rows", x54, |t, x| {
            let y = t.gather_rows(x, &[4, 0, 0, 2])?;
            readout(t, y, &r)
        });
    }
    {
        let (segs, r) = (segments.clone(), seg_r.clone());
        check!("segment_sum", seg_x, |t, x| {
            let y = t.segment_sum(x, &segs, 4)?;
            readout(t, y, &r)
        });
    }
    {
        let (segs, r) = (segments.clone(), soft_r.clone());
        check!("segment_softmax", soft_x, |t, x| {
            let y = t.segment_softmax(x, &segs, 4)?;
            readout(t, y, &r)
        });
    }
    check!("sum", x54, |t, x| {
        let y = t.mul(x, x)?;
        Ok(t.sum(y))
    });
    check!("mean_rows", x54, |t, x| {
        let y = t.exp(x)?;
        t.mean_rows(y, &[1, 3, 3])
    });
    {
        let (adj, r) = (adj.clone(), r54.clone());
        check!("spmm", x54, |t, x| {
            let y = t.spmm(&adj, x)?;
            readout(t, y, &r)
        });
    }
    {
        let (row, r) = (row14.clone(), r54.clone());
        check!("replace_rows/input", x54, |t, x| {
            let row = t.constant(row.clone());
            let y = t.replace_rows(x, &[1, 4], row)?;
            readout(t, y, &r)
        });
    }
    {
        let (a, r) = (a54.clone(), r54.clone());
        check!("replace_rows/row", row14, |t, row| {
            let a = t.constant(a.clone());
            let y = t.replace_rows(a, &[0, 2, 3], row)?;
            readout(t, y, &r)
        });
    }
    {
        let (s, d, r) = (sources.clone(), targets.clone(), re1.clone());
        check!("pair_dot/shared", x54, |t, x| {
            let y = t.pair_dot(x, x, &s, &d)?;
            readout(t, y, &r)
        });
    }
    {
        let (s, d, a, r) = (sources.clone(), targets.clone(), a54.clone(), re1.clone());
        check!("pair_dot/split", x54, |t, x| {
            let a = t.constant(a.clone());
            let y = t.pair_dot(a, x, &s, &d)?;
            readout(t, y, &r)
        });
    }
    {
        let r = r51.clone();
        check!("row_sum", x54, |t, x| {
            let y = t.row_sum(x)?;
            readout(t, y, &r)
        });
    }

    let mut results = Vec::with_capacity(checks.len() + 8);
    for (name, point, f) in &checks {
        let error = finite_diff_check(|t, x| f(t, x), point, DEFAULT_EPS)?;
        results.push(CheckResult { name: name.to_string(), error });
    }
    results.extend(objective_checks(seed, &g)?);
    Ok(results)
}

const PARAM_NAMES: [&str; 6] = ["w_enc", "w_dec", "mask_token", "remask_token", "act_slope_enc", "act_slope_dec"];

fn param_value(model: &GaeModel, k: usize) -> Tensor {
    match k {
        0 => model.w_enc.clone(),
        1 => model.w_dec.clone(),
        2 => model.mask_token.clone(),
        3 => model.remask_token.clone(),
        4 => Tensor::scalar(model.act_slope_enc),
        _ => Tensor::scalar(model.act_slope_dec),
    }
}

/// Full objective `l_rec + α·l_kl` differentiated with respect to each
/// parameter in turn, for SCE with remasking and for MSE without.
fn objective_checks(seed: u64, g: &Graph) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let prepared = PreparedGraph::new(g.clone());
    let plan = sample_mask(5, 0.4, seed)?;
    // Redraw until both rectifiers see negative inputs, otherwise the slope
    // gradients are identically zero and their checks prove nothing.
    let model = loop {
        let mut model = GaeModel::new(4, 3, rng.gen());
        model.mask_token = random(1, 4, -0.5, 0.5, &mut rng);
        model.remask_token = random(1, 3, -0.5, 0.5, &mut rng);
        model.act_slope_enc = rng.gen_range(0.1..0.4);
        model.act_slope_dec = rng.gen_range(0.1..0.4);
        let mixed = [false, true].iter().all(|&remask| {
            forward(&model, &prepared, 0.4, seed, remask)
                .map(|(h, xhat, _)| h.data().iter().any(|&v| v < 0.0) && xhat.data().iter().any(|&v| v < 0.0))
                .unwrap_or(false)
        });
        if mixed {
            break model;
        }
    };
    let teacher = TeacherDistribution::new(g.features(), g, 0.8)?;
    let target = g.features().select_rows(&plan.masked_ids);

    let mut out = Vec::new();
    for (kind, remask) in [(ReconKind::Sce, true), (ReconKind::Mse, false)] {
        for (k, name) in PARAM_NAMES.iter().enumerate() {
            if k == 3 && !remask {
                continue;
            }
            let objective = |t: &mut Tape, x: Var| -> Result<Var> {
                let frozen = model.register_frozen(t);
                let mut slots = [frozen.w_enc, frozen.w_dec, frozen.mask_token, frozen.remask_token, frozen.slope_enc, frozen.slope_dec];
                slots[k] = x;
                let vars = ModelVars {
                    w_enc: slots[0],
                    w_dec: slots[1],
                    mask_token: slots[2],
                    remask_token: slots[3],
                    slope_enc: slots[4],
                    slope_dec: slots[5],
                };
                let fwd = forward_on_tape(t, &vars, &prepared, &plan, remask)?;
                let tgt = t.constant(target.clone());
                let rows = t.gather_rows(fwd.recon, &plan.masked_ids)?;
                let l_rec = reconstruction_loss(t, tgt, rows, kind, 2.0)?;
                let l_kl = teacher.loss(t, fwd.recon)?;
                total_loss(t, l_rec, l_kl, 0.7)
            };
            let error = finite_diff_check(objective, &param_value(&model, k), DEFAULT_EPS)?;
            out.push(CheckResult { name: format!("objective/{kind}/{name}"), error });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let c = Tensor::from_vec(3, 1, vec![1.5, -2.0, 0.25]).unwrap();
        let x = Tensor::from_vec(1, 3, vec![0.3, 0.7, -1.1]).unwrap();
        let err = finite_diff_check(
            |tape, x| {
                let c = tape.constant(c.clone());
                tape.matmul(x, c)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::filled(2, 2, 0.5);
        let err = finite_diff_check(|tape, _| Ok(tape.constant(Tensor::scalar(3.0))), &x, DEFAULT_EPS).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn suite_passes_and_is_repeatable() {
        let a = run_suite(3).unwrap();
        assert!(a.len() > 25);
        for r in &a {
            assert!(r.error < THRESHOLD, "{}: {}", r.name, r.error);
        }
        assert_eq!(a, run_suite(3).unwrap());
    }

    #[test]
    fn corrupted_adjoint_is_caught() {
        crate::autodiff::inject_adjoint_fault(Some("segment_softmax"));
        let res = run_suite(0);
        crate::autodiff::inject_adjoint_fault(None);
        let worst = res.unwrap().iter().map(|r| r.error).fold(0.0, f64::max);
        assert!(worst >= THRESHOLD, "{worst}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(|tape, x| Ok(tape.sum(x)), &x, 0.0).is_err());
    }
}
