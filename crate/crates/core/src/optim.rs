//! Limited-memory BFGS over flat `f64` vectors with a strong-Wolfe line
//! search (bracketing followed by safeguarded cubic zoom).

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    /// Number of curvature pairs kept.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the gradient sup-norm falls to this value.
    pub grad_tol: f64,
    /// Stop when an accepted step lowers the loss by less than this
    /// fraction of its magnitude.
    pub rel_loss_tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_linesearch_evals: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 20,
            max_iters: 1000,
            grad_tol: 1e-7,
            rel_loss_tol: 1e-9,
            c1: 1e-4,
            c2: 0.9,
            max_linesearch_evals: 25,
        }
    }
}

impl LbfgsOptions {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidOptions(m.to_string()));
        if self.memory == 0 {
            return bad("memory must be at least 1");
        }
        if !(self.grad_tol > 0.0) || !(self.rel_loss_tol >= 0.0) {
            return bad("grad_tol must be positive and rel_loss_tol non-negative");
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return bad("line search constants need 0 < c1 < c2 < 1");
        }
        if self.max_linesearch_evals == 0 {
            return bad("line search needs at least one evaluation");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradTol,
    RelLossTol,
    MaxIters,
    LineSearchFailure,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::GradTol => "grad_tol",
            Termination::RelLossTol => "rel_loss_tol",
            Termination::MaxIters => "max_iters",
            Termination::LineSearchFailure => "line_search_failure",
        })
    }
}

/// State after an accepted iteration (row 0 is the starting point).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_supnorm: f64,
    pub step: f64,
    /// Index of the objective evaluation that produced this iterate.
    pub evaluation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("invalid optimizer options: {0}")]
    InvalidOptions(String),
    #[error("objective returned a gradient of length {got}, expected {expected}")]
    GradientLength { expected: usize, got: usize },
    #[error("non-finite loss or gradient at iteration {iteration} (evaluation {evaluation})")]
    NonFinite {
        iteration: usize,
        evaluation: usize,
        /// Progress up to the last accepted iterate.
        partial: Box<OptimResult>,
    },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sup_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    evaluation: usize,
}

struct Evaluator<F> {
    f: F,
    n: usize,
    count: usize,
    iteration: usize,
}

enum EvalFailure {
    Length(usize),
    NonFinite(usize),
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Evaluator<F> {
    fn eval(&mut self, x: Vec<f64>) -> Result<Point, EvalFailure> {
        let (f, g) = (self.f)(&x);
        let evaluation = self.count;
        self.count += 1;
        if g.len() != self.n {
            return Err(EvalFailure::Length(g.len()));
        }
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(EvalFailure::NonFinite(evaluation));
        }
        Ok(Point { x, f, g, evaluation })
    }
}

enum Search {
    Found(Point, f64),
    Failed,
}

/// Minimizes `f` from `x0`. `f` returns the loss and its gradient and must
/// be deterministic.
pub fn lbfgs_minimize<F>(f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> Result<OptimResult, OptimError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    opts.validate()?;
    let n = x0.len();
    let mut ev = Evaluator {
        f,
        n,
        count: 0,
        iteration: 0,
    };
    let mut trace = Vec::new();

    let fail = |e: EvalFailure, iteration: usize, trace: &[TraceRow], best: Option<&Point>, evals: usize| match e {
        EvalFailure::Length(got) => OptimError::GradientLength { expected: n, got },
        EvalFailure::NonFinite(evaluation) => OptimError::NonFinite {
            iteration,
            evaluation,
            partial: Box::new(OptimResult {
                x: best.map(|p| p.x.clone()).unwrap_or_default(),
                loss: best.map(|p| p.f).unwrap_or(f64::NAN),
                iterations: iteration.saturating_sub(1),
                evaluations: evals,
                termination: Termination::LineSearchFailure,
                trace: trace.to_vec(),
            }),
        },
    };

    let mut cur = match ev.eval(x0) {
        Ok(p) => p,
        Err(e) => return Err(fail(e, 0, &trace, None, ev.count)),
    };
    trace.push(TraceRow {
        iteration: 0,
        loss: cur.f,
        grad_supnorm: sup_norm(&cur.g),
        step: 0.0,
        evaluation: cur.evaluation,
    });

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let finish = |cur: Point, iterations: usize, evaluations: usize, termination, trace: Vec<TraceRow>| OptimResult {
        x: cur.x,
        loss: cur.f,
        iterations,
        evaluations,
        termination,
        trace,
    };

    if sup_norm(&cur.g) <= opts.grad_tol {
        return Ok(finish(cur, 0, ev.count, Termination::GradTol, trace));
    }

    let mut iteration = 0;
    loop {
        if iteration >= opts.max_iters {
            return Ok(finish(cur, iteration, ev.count, Termination::MaxIters, trace));
        }
        ev.iteration = iteration + 1;

        let mut attempt = 0;
        let (next, step) = loop {
            let mut d = two_loop_direction(&cur.g, &history);
            let mut slope = dot(&cur.g, &d);
            if !(slope < 0.0) {
                history.clear();
                d = cur.g.iter().map(|v| -v).collect();
                slope = dot(&cur.g, &d);
            }
            let alpha0 = if history.is_empty() {
                (1.0 / norm(&cur.g)).min(1.0)
            } else {
                1.0
            };
            match line_search(&mut ev, &cur, &d, slope, alpha0, opts) {
                Ok(Search::Found(p, a)) => break (p, a),
                Ok(Search::Failed) if attempt == 0 && !history.is_empty() => {
                    // Retry once along steepest descent before giving up.
                    history.clear();
                    attempt += 1;
                }
                Ok(Search::Failed) => {
                    return Ok(finish(cur, iteration, ev.count, Termination::LineSearchFailure, trace));
                }
                Err(e) => return Err(fail(e, iteration + 1, &trace, Some(&cur), ev.count)),
            }
        };
        iteration += 1;

        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let prev_f = cur.f;
        cur = next;
        let gsup = sup_norm(&cur.g);
        trace.push(TraceRow {
            iteration,
            loss: cur.f,
            grad_supnorm: gsup,
            step,
            evaluation: cur.evaluation,
        });

        if gsup <= opts.grad_tol {
            return Ok(finish(cur, iteration, ev.count, Termination::GradTol, trace));
        }
        let scale = prev_f.abs().max(cur.f.abs());
        if prev_f - cur.f <= opts.rel_loss_tol * scale {
            return Ok(finish(cur, iteration, ev.count, Termination::RelLossTol, trace));
        }
    }
}

/// `-H g` from the stored `(s, y, 1/sᵀy)` pairs, oldest first.
fn two_loop_direction(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = vec![0.0; history.len()];
    for (i, (s, y, rho)) in history.iter().enumerate().rev() {
        let a = rho * dot(s, &q);
        alphas[i] = a;
        for (qj, yj) in q.iter_mut().zip(y) {
            *qj -= a * yj;
        }
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for v in &mut q {
            *v *= gamma;
        }
    }
    for (i, (s, y, rho)) in history.iter().enumerate() {
        let b = rho * dot(y, &q);
        for (qj, sj) in q.iter_mut().zip(s) {
            *qj += (alphas[i] - b) * sj;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Minimizer of the cubic interpolating values and slopes at `a` and `b`,
/// or `None` if it does not exist.
fn cubic_min(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> Option<f64> {
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    t.is_finite().then_some(t)
}

struct Trial {
    alpha: f64,
    point: Point,
    slope: f64,
}

fn line_search<F>(
    ev: &mut Evaluator<F>,
    start: &Point,
    d: &[f64],
    slope0: f64,
    alpha0: f64,
    opts: &LbfgsOptions,
) -> Result<Search, EvalFailure>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let f0 = start.f;
    let mut evals = 0;
    let probe = |ev: &mut Evaluator<F>, alpha: f64| -> Result<Trial, EvalFailure> {
        let x: Vec<f64> = start.x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let point = ev.eval(x)?;
        let slope = dot(&point.g, d);
        Ok(Trial { alpha, point, slope })
    };
    let armijo = |t: &Trial| t.point.f <= f0 + opts.c1 * t.alpha * slope0;
    let curvature = |t: &Trial| t.slope.abs() <= -opts.c2 * slope0;

    let mut prev: Option<Trial> = None;
    let mut alpha = alpha0;
    let (mut lo, mut hi) = loop {
        if evals >= opts.max_linesearch_evals {
            // Still descending when the budget ran out (negative curvature
            // along `d`): take the furthest sufficient-decrease step.
            return Ok(match prev {
                Some(p) => Search::Found(p.point, p.alpha),
                None => Search::Failed,
            });
        }
        let t = probe(ev, alpha)?;
        evals += 1;
        let worse_than_prev = prev.as_ref().is_some_and(|p| t.point.f >= p.point.f);
        if !armijo(&t) || worse_than_prev {
            match prev {
                Some(p) => break (p, t),
                None => break (zero_trial(start, slope0), t),
            }
        }
        if curvature(&t) {
            let a = t.alpha;
            return Ok(Search::Found(t.point, a));
        }
        if t.slope >= 0.0 {
            let lo = t;
            let hi = match prev {
                Some(p) => p,
                None => zero_trial(start, slope0),
            };
            break (lo, hi);
        }
        alpha = t.alpha * 2.0;
        prev = Some(t);
    };

    // Zoom: `lo` satisfies sufficient decrease and has the lowest value so
    // far; the minimizer lies between `lo` and `hi`.
    loop {
        if evals >= opts.max_linesearch_evals {
            break;
        }
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let width = b - a;
        if width <= f64::EPSILON * b.max(1e-300) {
            break;
        }
        let mut alpha = cubic_min(lo.alpha, lo.point.f, lo.slope, hi.alpha, hi.point.f, hi.slope)
            .unwrap_or(0.5 * (a + b));
        if alpha < a + 0.1 * width || alpha > b - 0.1 * width {
            alpha = 0.5 * (a + b);
        }
        let t = probe(ev, alpha)?;
        evals += 1;
        if !armijo(&t) || t.point.f >= lo.point.f {
            hi = t;
        } else {
            if curvature(&t) {
                let a = t.alpha;
                return Ok(Search::Found(t.point, a));
            }
            if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = std::mem::replace(&mut lo, t);
            } else {
                lo = t;
            }
        }
    }
    // Budget exhausted: settle for a sufficient-decrease step if one exists.
    if lo.alpha > 0.0 && lo.point.f < f0 {
        let a = lo.alpha;
        return Ok(Search::Found(lo.point, a));
    }
    Ok(Search::Failed)
}

fn zero_trial(start: &Point, slope0: f64) -> Trial {
    Trial {
        alpha: 0.0,
        point: Point {
            x: start.x.clone(),
            f: start.f,
            g: start.g.clone(),
            evaluation: start.evaluation,
        },
        slope: slope0,
    }
}
