//! One-dimensional minimization over a control grid with optional
//! bracketed refinement.

/// Index of the smallest finite value; ties go to the lowest index, which
/// is the smallest control since control nodes are increasing.
pub fn grid_argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v < values[b]) {
            best = Some(j);
        }
    }
    best
}

/// Strict local minimum of the three-point pattern at an interior node.
pub fn is_bracketed(values: &[f64], j: usize) -> bool {
    j > 0 && j + 1 < values.len() && values[j - 1] > values[j] && values[j + 1] >= values[j]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub value: f64,
    pub evaluations: usize,
}

const GOLDEN: f64 = 0.381_966_011_250_105_1;

/// Brent's method on `[a, b]` starting from an interior point `x0` with
/// known value `f0`: golden-section steps, parabolic steps when they are
/// trustworthy. Stops when the bracket is narrower than `tol`.
pub fn brent(f: impl Fn(f64) -> f64, a: f64, b: f64, x0: f64, f0: f64, tol: f64, max_iter: usize) -> Minimum {
    let (mut a, mut b) = (a.min(b), a.max(b));
    let (mut x, mut w, mut v) = (x0, x0, x0);
    let (mut fx, mut fw, mut fv) = (f0, f0, f0);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    let mut evaluations = 0;
    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = 0.25 * tol + 4.0 * f64::EPSILON * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= m { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        evaluations += 1;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            (v, fv) = (w, fw);
            (w, fw) = (x, fx);
            (x, fx) = (u, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, fv) = (w, fw);
                (w, fw) = (u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    Minimum {
        x,
        value: fx,
        evaluations,
    }
}

const POLISH_SLACK: f64 = 1e-12;

/// Brent on `[a, b]`, then one parabolic step through three points a
/// quarter-bracket apart around the Brent point. When the objective is nearly flat relative to its
/// magnitude, comparisons between close points are decided by rounding and
/// Brent stalls a few `√ε` from the vertex; a parabola through widely
/// spaced points does not have that problem. The polished point is kept
/// only if its value is within rounding of the Brent value.
///
/// `POLISH_SLACK` bounds that rounding: long sums of large terms carry
/// noise well above a few ulps of their result.
pub fn refine_bracket(f: impl Fn(f64) -> f64, a: f64, b: f64, x0: f64, f0: f64, tol: f64, max_iter: usize) -> Minimum {
    let m = brent(&f, a, b, x0, f0, tol, max_iter);
    let (a, b) = (a.min(b), a.max(b));
    let s = 0.25 * (b - a);
    if !(s > 0.0) {
        return m;
    }
    // centre the stencil on the Brent point, shifted to stay inside the bracket
    let c = m.x.clamp(a + s, b - s);
    let f_c = if c == m.x { m.value } else { f(c) };
    let (f_lo, f_hi) = (f(c - s), f(c + s));
    let mut evaluations = m.evaluations + 2 + usize::from(c != m.x);
    let curvature = f_lo - 2.0 * f_c + f_hi;
    if !(curvature > 0.0) {
        return Minimum { evaluations, ..m };
    }
    let vertex = c + 0.5 * s * (f_lo - f_hi) / curvature;
    if !(vertex >= a && vertex <= b) || vertex == m.x {
        return Minimum { evaluations, ..m };
    }
    let fv = f(vertex);
    evaluations += 1;
    if fv <= m.value + POLISH_SLACK * (1.0 + m.value.abs()) {
        Minimum { x: vertex, value: fv.min(m.value), evaluations }
    } else {
        Minimum { evaluations, ..m }
    }
}

/// Outcome of minimizing over one node's control grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeMinimum {
    /// Grid argmin.
    pub j: usize,
    pub u: f64,
    pub value: f64,
    pub refined: bool,
}

/// Grid argmin, then Brent on `[u_{j−1}, u_{j+1}]` when the three-point
/// pattern brackets a minimum; the refined point is kept only if it does
/// not raise the objective.
pub fn minimize_node(
    nodes: &[f64],
    values: &[f64],
    refine: Option<(&dyn Fn(f64) -> f64, f64, usize)>,
) -> Option<NodeMinimum> {
    let j = grid_argmin(values)?;
    let mut best = NodeMinimum {
        j,
        u: nodes[j],
        value: values[j],
        refined: false,
    };
    if let Some((f, tol, max_iter)) = refine {
        if is_bracketed(values, j) {
            let m = refine_bracket(f, nodes[j - 1], nodes[j + 1], nodes[j], values[j], tol, max_iter);
            if m.value <= values[j] && m.x != nodes[j] {
                best.u = m.x;
                best.value = m.value;
                best.refined = true;
            }
        }
    }
    Some(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_the_smallest_control() {
        assert_eq!(grid_argmin(&[3.0, 1.0, 1.0, 2.0]), Some(1));
        assert_eq!(grid_argmin(&[f64::NAN, f64::INFINITY, 5.0]), Some(2));
        assert_eq!(grid_argmin(&[f64::NAN]), None);
    }

    #[test]
    fn brent_finds_quadratic_vertex() {
        let f = |x: f64| 0.01 * (x - 0.123_456_789).powi(2);
        let m = brent(f, 0.0, 0.5, 0.25, f(0.25), 1e-9, 200);
        assert!((m.x - 0.123_456_789).abs() < 1e-8, "{}", m.x);
    }

    #[test]
    fn polish_beats_rounding_on_flat_objectives() {
        // curvature 0.02 on top of a constant 300: value comparisons
        // cannot resolve the vertex below ~1e-6
        let f = |x: f64| 0.01 * (x - 0.123_456_789).powi(2) + 300.0;
        let m = refine_bracket(f, 0.11, 0.135, 0.1225, f(0.1225), 1e-9, 200);
        assert!((m.x - 0.123_456_789).abs() < 1e-8, "{}", m.x);
    }

    #[test]
    fn brent_handles_non_smooth_minimum() {
        let f = |x: f64| (x - 0.7).abs();
        let m = brent(f, 0.0, 2.0, 1.0, f(1.0), 1e-10, 500);
        assert!((m.x - 0.7).abs() < 1e-9);
    }

    #[test]
    fn refinement_needs_a_bracket() {
        let nodes = [0.0, 1.0, 2.0];
        let f = |u: f64| (u - 0.4) * (u - 0.4);
        let values: Vec<f64> = nodes.iter().map(|&u| f(u)).collect();
        // minimum at the left edge: no bracket, grid value stands
        let m = minimize_node(&nodes, &values, Some((&f, 1e-9, 100))).unwrap();
        assert_eq!((m.u, m.refined), (0.0, false));
        let g = |u: f64| (u - 1.3) * (u - 1.3);
        let values: Vec<f64> = nodes.iter().map(|&u| g(u)).collect();
        let m = minimize_node(&nodes, &values, Some((&g, 1e-9, 100))).unwrap();
        assert!(m.refined && (m.u - 1.3).abs() < 1e-8);
    }
}
