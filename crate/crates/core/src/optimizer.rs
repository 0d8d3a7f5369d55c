//! Box-constrained limited-memory BFGS, used as a maximizer.
//!
//! Internally the negated objective is minimized. Problems without finite
//! bounds use a strong-Wolfe line search; problems with any finite bound use a
//! projected search path with Armijo backtracking, and the two-loop direction
//! is restricted to the free variables.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_SEARCH_EVALS: usize = 30;
const CURVATURE_EPS: f64 = 1e-10;

/// Outcome of one objective evaluation; `None` marks a failed evaluation
/// (for example a covariance that could not be factorized), which the line
/// search treats like a non-finite value.
pub type Evaluation = Option<(f64, Vec<f64>)>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Infinity-norm tolerance on the projected gradient.
    pub grad_tol: f64,
    /// Relative objective-change tolerance.
    pub ftol: f64,
    /// Number of stored correction pairs.
    pub memory: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_iterations: 120,
            grad_tol: 1e-5,
            ftol: 1e-9,
            memory: 10,
        }
    }
}

pub struct OptimizeProblem<F> {
    pub objective: F,
    pub initial: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub settings: OptimizerSettings,
}

impl<F> OptimizeProblem<F>
where
    F: FnMut(&[f64]) -> Evaluation,
{
    /// Unbounded problem with default settings.
    pub fn new(objective: F, initial: Vec<f64>) -> Self {
        let n = initial.len();
        OptimizeProblem {
            objective,
            initial,
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            settings: OptimizerSettings::default(),
        }
    }

    pub fn bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn settings(mut self, settings: OptimizerSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn max_iterations(mut self, n: usize) -> Self {
        self.settings.max_iterations = n;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ConvergedGrad,
    ConvergedFtol,
    MaxIter,
    LineSearchFailure,
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

/// Point on the search path, in minimization form.
struct Trial {
    step: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

struct Minimizer<'a, F> {
    objective: &'a mut F,
    lower: &'a [f64],
    upper: &'a [f64],
    evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

impl<F> Minimizer<'_, F>
where
    F: FnMut(&[f64]) -> Evaluation,
{
    /// Evaluates the negated objective; `None` if the value or gradient is unusable.
    fn eval(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        self.evaluations += 1;
        let (value, grad) = (self.objective)(x)?;
        if !value.is_finite() || grad.len() != x.len() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some((-value, grad.into_iter().map(|g| -g).collect()))
    }

    fn bounded(&self) -> bool {
        self.lower.iter().chain(self.upper).any(|b| b.is_finite())
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(self.lower).zip(self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(g)
            .zip(self.lower.iter().zip(self.upper))
            .map(|((&xi, &gi), (&lo, &hi))| {
                if (xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0) {
                    0.0
                } else {
                    gi
                }
            })
            .collect()
    }

    fn point(&self, x: &[f64], d: &[f64], step: f64) -> Vec<f64> {
        let mut p: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + step * b).collect();
        self.project(&mut p);
        p
    }

    fn trial(&mut self, x: &[f64], d: &[f64], step: f64) -> Option<Trial> {
        let p = self.point(x, d, step);
        let (f, g) = self.eval(&p)?;
        Some(Trial { step, x: p, f, g })
    }

    /// Projected Armijo backtracking.
    fn backtrack(&mut self, x: &[f64], f0: f64, g0: &[f64], d: &[f64], step0: f64) -> Option<Trial> {
        let mut step = step0;
        for _ in 0..MAX_LINE_SEARCH_EVALS {
            if let Some(t) = self.trial(x, d, step) {
                let moved: Vec<f64> = t.x.iter().zip(x).map(|(a, b)| a - b).collect();
                let decrease = dot(g0, &moved);
                if decrease < 0.0 && t.f <= f0 + ARMIJO_C1 * decrease {
                    return Some(t);
                }
                if inf_norm(&moved) == 0.0 {
                    return None;
                }
            }
            step *= 0.5;
        }
        None
    }

    /// Strong-Wolfe search with bracketing and safeguarded quadratic zoom.
    fn strong_wolfe(&mut self, x: &[f64], f0: f64, g0: &[f64], d: &[f64], step0: f64) -> Option<Trial> {
        let dphi0 = dot(g0, d);
        let sufficient = |t: &Trial| t.f <= f0 + ARMIJO_C1 * t.step * dphi0;
        let origin = Trial {
            step: 0.0,
            x: x.to_vec(),
            f: f0,
            g: g0.to_vec(),
        };
        let mut prev = origin;
        let mut step = step0;
        let mut evals = 0;
        while evals < MAX_LINE_SEARCH_EVALS {
            evals += 1;
            let Some(t) = self.trial(x, d, step) else {
                // overshoot into an invalid region: shrink toward the last good point
                step = prev.step + 0.5 * (step - prev.step);
                continue;
            };
            let dphi = dot(&t.g, d);
            if !sufficient(&t) || (prev.step > 0.0 && t.f >= prev.f) {
                return self.zoom(x, d, f0, dphi0, prev, t, evals);
            }
            if dphi.abs() <= -WOLFE_C2 * dphi0 {
                return Some(t);
            }
            if dphi >= 0.0 {
                return self.zoom(x, d, f0, dphi0, t, prev, evals);
            }
            step = t.step * 2.0;
            prev = t;
        }
        (prev.step > 0.0).then_some(prev)
    }

    #[allow(clippy::too_many_arguments)]
    fn zoom(
        &mut self,
        x: &[f64],
        d: &[f64],
        f0: f64,
        dphi0: f64,
        mut lo: Trial,
        mut hi: Trial,
        mut evals: usize,
    ) -> Option<Trial> {
        while evals < MAX_LINE_SEARCH_EVALS {
            evals += 1;
            let width = hi.step - lo.step;
            let dlo = dot(&lo.g, d);
            let mut step = {
                let denom = 2.0 * (hi.f - lo.f - dlo * width);
                lo.step - dlo * width * width / denom
            };
            let (a, b) = if lo.step < hi.step { (lo.step, hi.step) } else { (hi.step, lo.step) };
            let margin = 0.1 * (b - a);
            if !step.is_finite() || step < a + margin || step > b - margin {
                step = 0.5 * (a + b);
            }
            if (b - a) < 1e-16 * b.abs().max(1.0) {
                break;
            }
            let Some(t) = self.trial(x, d, step) else {
                hi = Trial {
                    step,
                    x: Vec::new(),
                    f: f64::INFINITY,
                    g: vec![0.0; d.len()],
                };
                continue;
            };
            let dphi = dot(&t.g, d);
            if t.f > f0 + ARMIJO_C1 * t.step * dphi0 || t.f >= lo.f {
                hi = t;
            } else {
                if dphi.abs() <= -WOLFE_C2 * dphi0 {
                    return Some(t);
                }
                if dphi * (hi.step - lo.step) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
        }
        // settle for a point with sufficient decrease
        (lo.step > 0.0 && lo.f < f0).then_some(lo)
    }
}

/// L-BFGS two-loop recursion applied to `q`.
fn two_loop(q: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = q.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q
}

/// Maximizes the problem's objective.
///
/// The accepted objective values never decrease and every returned point lies
/// inside the bounds. Evaluations that fail or return non-finite values are
/// rejected by the line search.
pub fn maximize<F>(mut problem: OptimizeProblem<F>) -> Result<OptimizeResult>
where
    F: FnMut(&[f64]) -> Evaluation,
{
    let n = problem.initial.len();
    if problem.lower.len() != n || problem.upper.len() != n {
        return Err(Error::dims("optimizer bounds", n, problem.lower.len().min(problem.upper.len())));
    }
    for (i, ((x, lo), hi)) in problem.initial.iter().zip(&problem.lower).zip(&problem.upper).enumerate() {
        if !(lo <= x && x <= hi) {
            return Err(Error::Optimizer(format!(
                "initial coordinate {i} = {x} violates bounds [{lo}, {hi}]"
            )));
        }
    }
    let settings = problem.settings;
    let mut m = Minimizer {
        objective: &mut problem.objective,
        lower: &problem.lower,
        upper: &problem.upper,
        evaluations: 0,
    };
    let mut x = problem.initial.clone();
    let (mut f, mut g) = m.eval(&x).ok_or_else(|| {
        Error::Optimizer("objective or gradient is not finite at the initial point".into())
    })?;

    let bounded = m.bounded();
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(settings.memory);
    let mut iterations = 0;
    let mut termination = Termination::MaxIter;
    let mut just_reset = false;

    while iterations < settings.max_iterations {
        let pg = m.projected_gradient(&x, &g);
        if inf_norm(&pg) <= settings.grad_tol {
            termination = Termination::ConvergedGrad;
            break;
        }
        let mut d: Vec<f64> = two_loop(&pg, &memory).into_iter().map(|v| -v).collect();
        for i in 0..n {
            if pg[i] == 0.0 && ((x[i] <= m.lower[i] && d[i] < 0.0) || (x[i] >= m.upper[i] && d[i] > 0.0)) {
                d[i] = 0.0;
            }
        }
        if dot(&pg, &d) >= 0.0 || d.iter().any(|v| !v.is_finite()) {
            memory.clear();
            d = pg.iter().map(|v| -v).collect();
        }
        let step0 = if memory.is_empty() {
            (1.0 / dot(&d, &d).sqrt()).min(1.0)
        } else {
            1.0
        };
        let found = if bounded {
            m.backtrack(&x, f, &g, &d, step0)
        } else {
            m.strong_wolfe(&x, f, &g, &d, step0)
        };
        let Some(t) = found else {
            if memory.is_empty() || just_reset {
                termination = Termination::LineSearchFailure;
                break;
            }
            memory.clear();
            just_reset = true;
            continue;
        };
        just_reset = false;

        let s: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = t.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > CURVATURE_EPS * dot(&y, &y).max(f64::MIN_POSITIVE) {
            if memory.len() == settings.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let rel = (f - t.f) / f.abs().max(t.f.abs()).max(1.0);
        x = t.x;
        f = t.f;
        g = t.g;
        iterations += 1;
        if rel <= settings.ftol {
            termination = Termination::ConvergedFtol;
            break;
        }
    }

    Ok(OptimizeResult {
        x,
        value: -f,
        iterations,
        evaluations: m.evaluations,
        termination,
    })
}
