//! Independent numeric oracles for unit tests.

/// Adaptive Simpson quadrature of `f` over `[a, b]`, split at `breaks` that
/// fall inside the interval so each piece is smooth.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64]) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut points = vec![a];
    points.extend(breaks.iter().copied().filter(|&k| k > a && k < b));
    points.push(b);
    points.sort_by(f64::total_cmp);
    points.dedup();
    points
        .windows(2)
        .map(|w| adaptive_simpson(&f, w[0], w[1], 1e-13, 40))
        .sum()
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    // Stay strictly inside the piece so half-open basis conventions never
    // bite at the endpoints.
    let eps = (b - a) * 1e-15;
    let (a, b) = (a + eps, b - eps);
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials() {
        let v = integrate(|x| x * x * x, 0.0, 2.0, &[]);
        assert!((v - 4.0).abs() < 1e-12);
    }
}
