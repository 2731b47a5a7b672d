//! BFGS minimization with a strong-Wolfe line search.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    /// Stop when the sup-norm of the gradient falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            grad_tol: 1e-7,
            max_iter: 500,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

struct Point {
    alpha: f64,
    f: f64,
    slope: f64,
    grad: DVector<f64>,
}

fn evaluate<F>(objective: &mut F, x: &DVector<f64>, p: &DVector<f64>, alpha: f64) -> Point
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let (f, grad) = objective(&(x + p * alpha));
    let slope = grad.dot(p);
    if f.is_finite() && slope.is_finite() {
        Point { alpha, f, slope, grad }
    } else {
        Point {
            alpha,
            f: f64::INFINITY,
            slope: f64::NAN,
            grad,
        }
    }
}

/// Minimizer of the cubic interpolating two points, safeguarded to the
/// interior of the bracket.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let (left, right) = (a.min(b), a.max(b));
    let bisect = 0.5 * (a + b);
    if !hi.f.is_finite() || !hi.slope.is_finite() {
        return bisect;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return bisect;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let margin = 0.1 * (right - left);
    if t.is_finite() && t > left + margin && t < right - margin {
        t
    } else {
        bisect
    }
}

/// Strong-Wolfe line search along `p`; `f0`, `slope0` are the value and
/// directional derivative at `alpha = 0`.
fn line_search<F>(objective: &mut F, x: &DVector<f64>, p: &DVector<f64>, f0: f64, slope0: f64, opts: &BfgsOptions) -> Option<Point>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let zero = Point {
        alpha: 0.0,
        f: f0,
        slope: slope0,
        grad: DVector::zeros(0),
    };
    let armijo = |pt: &Point| pt.f <= f0 + opts.c1 * pt.alpha * slope0;
    let curvature = |pt: &Point| pt.slope.abs() <= -opts.c2 * slope0;

    let mut prev = zero;
    let mut alpha = 1.0;
    let mut evals = 0;
    loop {
        let cur = evaluate(objective, x, p, alpha);
        evals += 1;
        if !armijo(&cur) || (evals > 1 && cur.f >= prev.f) {
            return zoom(objective, x, p, prev, cur, f0, slope0, opts, evals);
        }
        if curvature(&cur) {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            return zoom(objective, x, p, cur, prev, f0, slope0, opts, evals);
        }
        if evals >= opts.max_line_search {
            return None;
        }
        alpha *= 2.0;
        prev = cur;
    }
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    objective: &mut F,
    x: &DVector<f64>,
    p: &DVector<f64>,
    mut lo: Point,
    mut hi: Point,
    f0: f64,
    slope0: f64,
    opts: &BfgsOptions,
    mut evals: usize,
) -> Option<Point>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    while evals < opts.max_line_search {
        let alpha = interpolate(&lo, &hi);
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
        let cur = evaluate(objective, x, p, alpha);
        evals += 1;
        if cur.f > f0 + opts.c1 * alpha * slope0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.slope.abs() <= -opts.c2 * slope0 {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // Best sufficient-decrease point found, if it strictly improves.
    (lo.alpha > 0.0 && lo.f < f0).then_some(lo)
}

/// Minimizes `objective`, which returns the value and gradient.
pub fn minimize<F>(objective: F, x0: &DVector<f64>, opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    minimize_from(objective, x0, None, opts)
}

/// As [`minimize`], starting from the inverse-Hessian approximation `h0`
/// (symmetric positive definite) instead of a scaled identity.
pub fn minimize_from<F>(mut objective: F, x0: &DVector<f64>, h0: Option<&DMatrix<f64>>, opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0.clone();
    let (mut f, mut g) = objective(&x);
    let mut trace = vec![f];
    let mut h = h0.cloned().unwrap_or_else(|| DMatrix::<f64>::identity(n, n));
    let mut fresh = h0.is_none();

    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return BfgsResult {
            x,
            f,
            grad: g,
            iterations: 0,
            converged: false,
            message: "non-finite objective at the starting point".into(),
            trace,
        };
    }

    let mut iterations = 0;
    let message;
    loop {
        if g.amax() < opts.grad_tol {
            message = "gradient tolerance reached".to_string();
            break;
        }
        if iterations >= opts.max_iter {
            message = "iteration limit reached".to_string();
            break;
        }
        let mut p = -(&h * &g);
        let mut slope = g.dot(&p);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            fresh = true;
            p = -g.clone();
            slope = g.dot(&p);
        }
        if fresh {
            // Unit first step would be badly scaled; cap its length at 1.
            let scale = (1.0 / p.norm()).min(1.0);
            p *= scale;
            slope *= scale;
        }
        let Some(pt) = line_search(&mut objective, &x, &p, f, slope, opts) else {
            if fresh {
                message = "line search failed".to_string();
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        let s = &p * pt.alpha;
        let yk = &pt.grad - &g;
        x += &s;
        f = pt.f;
        g = pt.grad;
        trace.push(f);
        iterations += 1;

        let sy = s.dot(&yk);
        if sy > 1e-12 * s.norm() * yk.norm() {
            if fresh {
                h *= sy / yk.dot(&yk);
            }
            let rho = 1.0 / sy;
            let hy = &h * &yk;
            let yhy = yk.dot(&hy);
            // H+ = H - rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'
            h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            fresh = false;
        }
    }
    BfgsResult {
        converged: g.amax() < opts.grad_tol,
        x,
        f,
        grad: g,
        iterations,
        message,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
        (f, g)
    }

    #[test]
    fn rosenbrock_minimum() {
        let r = minimize(rosenbrock, &DVector::from_vec(vec![-1.2, 1.0]), &BfgsOptions::default());
        assert!(r.converged, "{}", r.message);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_with_known_minimizer() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let obj = |x: &DVector<f64>| (0.5 * x.dot(&(&a * x)) - b.dot(x), &a * x - &b);
        let r = minimize(obj, &DVector::zeros(3), &BfgsOptions::default());
        let exact = a.clone().lu().solve(&b).unwrap();
        assert!(r.converged);
        assert!((r.x - exact).amax() < 1e-8);
    }

    #[test]
    fn non_finite_region_is_avoided() {
        // log-barrier: infinite for x <= 0.
        let obj = |x: &DVector<f64>| {
            let v = x[0];
            if v <= 0.0 {
                (f64::INFINITY, DVector::from_vec(vec![f64::NAN]))
            } else {
                (v - v.ln(), DVector::from_vec(vec![1.0 - 1.0 / v]))
            }
        };
        let r = minimize(obj, &DVector::from_vec(vec![0.05]), &BfgsOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-7);
    }
}
