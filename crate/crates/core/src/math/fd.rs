//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used on the numeric side, so the check is
//! independent of every backward rule it validates.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Result of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `max|a - n| / max(max|a|, max|n|)`, with a tiny floor on the denominator.
    pub fn relative_error(&self) -> f64 {
        let diff = self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = self
            .analytic
            .iter()
            .chain(&self.numeric)
            .map(|v| v.abs())
            .fold(1e-8, f64::max);
        diff / scale
    }
}

/// Compares d f / d inputs[i] for every input against central differences.
///
/// `f` receives the graph and one leaf per input and must return a scalar.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.gradients(out)?;

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut checks = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        let mut work = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + step;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            numeric.push((fp - fm) / (2.0 * step));
        }
        checks.push(GradCheck { analytic, numeric });
    }
    Ok(checks)
}

/// Largest relative error over all inputs.
pub fn max_relative_error<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(check(inputs, step, f)?.iter().map(GradCheck::relative_error).fold(0.0, f64::max))
}

/// Worst relative error of every differentiable op over `trials` random
/// inputs, as `(op name, max relative error)`.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some((_, w)) => *w = w.max(err),
        None => worst.push((name, err)),
    };

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }
    fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = rng.gen_range(0.05..2.0);
                if rng.gen_bool(0.5) { m } else { -m }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }
    // Weighted sum turns any output into a scalar with generic gradients.
    fn project(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
        let w = g.constant(w.clone().reshape(g.shape(out).to_vec())?);
        let p = g.mul(out, w)?;
        Ok(g.sum(p))
    }

    for _ in 0..trials {
        let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let a = rand_t(&mut rng, &[m, k], -2.0, 2.0);
        let b = rand_t(&mut rng, &[k, n], -2.0, 2.0);
        let wmn = rand_t(&mut rng, &[m * n], -1.0, 1.0);
        let c = rand_t(&mut rng, &[m, n], -2.0, 2.0);

        record("matmul", max_relative_error(&[a.clone(), b.clone()], STEP, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, &wmn)
        })?);
        record("add", max_relative_error(&[c.clone(), rand_t(&mut rng, &[m, n], -2.0, 2.0)], STEP, |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, &wmn)
        })?);
        record("sub", max_relative_error(&[c.clone(), rand_t(&mut rng, &[m, n], -2.0, 2.0)], STEP, |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, &wmn)
        })?);
        record("mul", max_relative_error(&[c.clone(), rand_t(&mut rng, &[m, n], -2.0, 2.0)], STEP, |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, &wmn)
        })?);
        record("add_bias", max_relative_error(&[c.clone(), rand_t(&mut rng, &[n], -2.0, 2.0)], STEP, |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y, &wmn)
        })?);
        let s = rng.gen_range(-3.0..3.0);
        record("scale", max_relative_error(std::slice::from_ref(&c), STEP, |g, v| {
            let y = g.scale(v[0], s);
            project(g, y, &wmn)
        })?);
        record("relu", max_relative_error(&[away_from_zero(&mut rng, &[m, n])], STEP, |g, v| {
            let y = g.relu(v[0]);
            project(g, y, &wmn)
        })?);
        record("sigmoid", max_relative_error(std::slice::from_ref(&c), STEP, |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, &wmn)
        })?);
        let axis = rng.gen_range(0..2);
        record("softmax", max_relative_error(std::slice::from_ref(&c), STEP, |g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, &wmn)
        })?);
        // Two-element rows normalize to constant +-1, so keep each axis >= 3.
        let ln_in = rand_t(&mut rng, &[m + 2, n + 2], -2.0, 2.0);
        let wln = rand_t(&mut rng, &[(m + 2) * (n + 2)], -1.0, 1.0);
        record("layernorm", max_relative_error(&[ln_in], STEP, |g, v| {
            let y = g.layernorm(v[0], axis)?;
            project(g, y, &wln)
        })?);
        let other = if axis == 0 { rand_t(&mut rng, &[2, n], -2.0, 2.0) } else { rand_t(&mut rng, &[m, 2], -2.0, 2.0) };
        let wcat = rand_t(&mut rng, &[c.numel() + other.numel()], -1.0, 1.0);
        record("concat", max_relative_error(&[c.clone(), other], STEP, |g, v| {
            let y = g.concat(&[v[0], v[1]], axis)?;
            project(g, y, &wcat)
        })?);
        let idx: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..m)).collect();
        let wg = rand_t(&mut rng, &[idx.len() * n], -1.0, 1.0);
        record("gather", max_relative_error(std::slice::from_ref(&c), STEP, |g, v| {
            let y = g.gather(v[0], &idx)?;
            project(g, y, &wg)
        })?);
        record("transpose", max_relative_error(std::slice::from_ref(&c), STEP, |g, v| {
            let y = g.transpose(v[0])?;
            project(g, y, &wmn)
        })?);
        record("reshape", max_relative_error(std::slice::from_ref(&c), STEP, |g, v| {
            let y = g.reshape(v[0], &[m * n])?;
            project(g, y, &wmn)
        })?);
        record("sum", max_relative_error(std::slice::from_ref(&c), STEP, |g, v| Ok(g.sum(v[0])))?);
        record("mean", max_relative_error(std::slice::from_ref(&c), STEP, |g, v| Ok(g.mean(v[0])))?);
        let wred = rand_t(&mut rng, &[if axis == 0 { n } else { m }], -1.0, 1.0);
        record("mean_axis", max_relative_error(std::slice::from_ref(&c), STEP, |g, v| {
            let y = g.mean_axis(v[0], axis)?;
            project(g, y, &wred)
        })?);
        record("mse", max_relative_error(&[c.clone(), rand_t(&mut rng, &[m, n], -2.0, 2.0)], STEP, |g, v| {
            g.mse(v[0], v[1])
        })?);
        let wrow = rand_t(&mut rng, &[m], -1.0, 1.0);
        record("row_norm", max_relative_error(&[away_from_zero(&mut rng, &[m, k])], STEP, |g, v| {
            let y = g.row_norm(v[0])?;
            project(g, y, &wrow)
        })?);
        // Distinct values keep the minimum away from a tie.
        let mut vals: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        let mt = Tensor::new(vec![m, k], vals).unwrap();
        record("min", max_relative_error(&[mt], STEP, |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.min(y)
        })?);
        let pred = rand_t(&mut rng, &[m * n + 1], 0.01, 0.99);
        let mut target = rand_t(&mut rng, &[m * n + 1], 0.0, 1.0);
        let peak = rng.gen_range(0..target.numel());
        target.data_mut()[peak] = 1.0;
        record("focal_loss", max_relative_error(&[pred], STEP, |g, v| g.focal_loss(v[0], &target))?);
    }
    Ok(worst)
}
