//! Adaptive Simpson quadrature on finite intervals, used for the improper
//! timing integrals after mapping `[1, ∞)` onto `(0, 1]`.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    /// Accumulated Richardson estimate of the absolute error.
    pub error: f64,
}

const MAX_DEPTH: u32 = 60;

struct Panel {
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn refine<F: Fn(f64) -> f64>(f: &F, p: Panel, eps: f64, depth: u32) -> Quadrature {
    let m = 0.5 * (p.a + p.b);
    let lm = 0.5 * (p.a + m);
    let rm = 0.5 * (m + p.b);
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(p.a, m, p.fa, flm, p.fm);
    let right = simpson(m, p.b, p.fm, frm, p.fb);
    let delta = left + right - p.whole;
    if depth == 0 || delta.abs() <= 15.0 * eps || m <= p.a || m >= p.b {
        return Quadrature {
            value: left + right + delta / 15.0,
            error: delta.abs() / 15.0,
        };
    }
    let l = refine(
        f,
        Panel { a: p.a, b: m, fa: p.fa, fm: flm, fb: p.fm, whole: left },
        0.5 * eps,
        depth - 1,
    );
    let r = refine(
        f,
        Panel { a: m, b: p.b, fa: p.fm, fm: frm, fb: p.fb, whole: right },
        0.5 * eps,
        depth - 1,
    );
    Quadrature {
        value: l.value + r.value,
        error: l.error + r.error,
    }
}

/// `∫_a^b f` to relative tolerance `rel_tol` (absolute when the integral is near zero).
/// `f` must be finite on the closed interval; endpoint limits are the caller's job.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Quadrature {
    // A coarse composite pass fixes the absolute scale, then each panel refines.
    const PANELS: usize = 16;
    let h = (b - a) / PANELS as f64;
    let xs: Vec<f64> = (0..=2 * PANELS).map(|i| a + 0.5 * h * i as f64).collect();
    let fs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let coarse: f64 = (0..PANELS)
        .map(|i| simpson(xs[2 * i], xs[2 * i + 2], fs[2 * i], fs[2 * i + 1], fs[2 * i + 2]))
        .sum();
    let eps = rel_tol * coarse.abs().max(f64::MIN_POSITIVE.sqrt()) / PANELS as f64;
    (0..PANELS)
        .map(|i| {
            let (j, k) = (2 * i, 2 * i + 2);
            refine(
                &f,
                Panel {
                    a: xs[j],
                    b: xs[k],
                    fa: fs[j],
                    fm: fs[j + 1],
                    fb: fs[k],
                    whole: simpson(xs[j], xs[k], fs[j], fs[j + 1], fs[k]),
                },
                eps,
                MAX_DEPTH,
            )
        })
        .fold(Quadrature { value: 0.0, error: 0.0 }, |acc, q| Quadrature {
            value: acc.value + q.value,
            error: acc.error + q.error,
        })
}

/// `∫_1^∞ f(x) dx` through `x = 1/s`, i.e. `∫_0^1 f(1/s)/s² ds`.
/// `at_zero` is the limit of `f(1/s)/s²` as `s → 0`.
pub fn integrate_tail<F: Fn(f64) -> f64>(f: F, at_zero: f64, rel_tol: f64) -> Quadrature {
    adaptive_simpson(
        |s| if s == 0.0 { at_zero } else { f(1.0 / s) / (s * s) },
        0.0,
        1.0,
        rel_tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_is_exact() {
        let q = adaptive_simpson(|x| 3.0 * x * x * x - x + 2.0, -1.0, 2.0, 1e-12);
        let exact = 0.75 * (16.0 - 1.0) - 0.5 * (4.0 - 1.0) + 2.0 * 3.0;
        assert!((q.value - exact).abs() < 1e-13);
    }

    #[test]
    fn smooth_integrand_meets_tolerance() {
        let q = adaptive_simpson(f64::exp, 0.0, 1.0, 1e-10);
        let exact = std::f64::consts::E - 1.0;
        assert!((q.value - exact).abs() < 1e-10 * exact);
        assert!(q.error < 1e-9);
    }

    #[test]
    fn root_singularity_converges() {
        let q = adaptive_simpson(f64::sqrt, 0.0, 1.0, 1e-10);
        assert!((q.value - 2.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn power_tail() {
        // ∫_1^∞ x^{-3} dx = 1/2; integrand in s is s, zero at s = 0.
        let q = integrate_tail(|x| x.powi(-3), 0.0, 1e-12);
        assert!((q.value - 0.5).abs() < 1e-13);
        // ∫_1^∞ 1/(1+x²) dx = π/4.
        let q = integrate_tail(|x| 1.0 / (1.0 + x * x), 1.0, 1e-12);
        assert!((q.value - std::f64::consts::FRAC_PI_4).abs() < 1e-11);
    }
}
