//! Closed-form predictions for the unimodal phase.
//!
//! All timing formulas relabel the modalities internally so that `A` is the one
//! with the larger `‖Σ_yx‖`. Times are in units of `τ` (pass `tau = 1` to
//! compare with `TrajectorySample::time`).

use nalgebra::DVector;

use crate::dynamics::loss_from_stats;
use crate::error::{Error, Modality, Result};
use crate::network::TotalMaps;
use crate::quadrature::{adaptive_simpson, Quadrature};
use crate::stats::{effective_correlation_b, CorrelationStats};

pub const DEFAULT_TOL: f64 = 1e-8;

/// Relative tolerance below which `‖Σ_yxA‖` and `‖Σ_yxB‖` count as equal.
const TIE_TOL: f64 = 1e-12;
/// Relative size of `‖Σ̃_yxB‖` below which the modalities count as collinear.
const COLLINEAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioValue {
    Finite(f64),
    /// The slower modality is never learned; carries the vanishing denominator.
    Divergent { denominator: f64 },
}

impl RatioValue {
    /// The ratio as a float, `+∞` when divergent.
    pub fn value(&self) -> f64 {
        match *self {
            RatioValue::Finite(v) => v,
            RatioValue::Divergent { .. } => f64::INFINITY,
        }
    }

    pub fn finite(&self) -> Result<f64> {
        match *self {
            RatioValue::Finite(v) => Ok(v),
            RatioValue::Divergent { .. } => Err(Error::CollinearModalities),
        }
    }

    pub fn is_divergent(&self) -> bool {
        matches!(self, RatioValue::Divergent { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifolds {
    pub m_star_a: DVector<f64>,
    pub m_star_b: DVector<f64>,
    pub m_a_saddle: DVector<f64>,
    pub m_b_saddle: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preference {
    pub first: Modality,
    pub superficial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthSpec {
    pub l: usize,
    pub l_f: usize,
    pub l_a: Option<usize>,
    pub l_b: Option<usize>,
    pub l_c: Option<usize>,
}

impl DepthSpec {
    pub fn new(l: usize, l_f: usize) -> DepthSpec {
        DepthSpec {
            l,
            l_f,
            l_a: None,
            l_b: None,
            l_c: None,
        }
    }

    /// Pre-fusion depths `l_a`, `l_b` and a shared post-fusion depth `l_c`.
    pub fn unequal(l_a: usize, l_b: usize, l_c: usize) -> DepthSpec {
        DepthSpec {
            l: l_a.max(l_b) + l_c,
            l_f: l_a.max(l_b),
            l_a: Some(l_a),
            l_b: Some(l_b),
            l_c: Some(l_c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryPrediction {
    pub first_modality: Modality,
    /// Time of the faster modality.
    pub t_a: f64,
    /// Time of the slower modality (`+∞` when divergent).
    pub t_b: f64,
    pub ratio: RatioValue,
    pub k: f64,
    pub eff_corr_norm: f64,
    pub misattribution: DVector<f64>,
    pub integral_value: Option<f64>,
}

pub fn fixed_points(stats: &CorrelationStats) -> Result<Manifolds> {
    let (m_star_a, m_star_b) = stats.global_solution();
    Ok(Manifolds {
        m_star_a,
        m_star_b,
        m_a_saddle: stats.saddle_solution(Modality::A)?,
        m_b_saddle: stats.saddle_solution(Modality::B)?,
    })
}

/// Losses at the unimodal saddles, `½(⟨y²⟩ − Σ_yx· Σ·⁻¹ Σ_yx·ᵀ)` for A and B.
pub fn saddle_losses(stats: &CorrelationStats) -> Result<(f64, f64)> {
    let ma = stats.saddle_solution(Modality::A)?;
    let mb = stats.saddle_solution(Modality::B)?;
    Ok((
        0.5 * (stats.y_sq - stats.sigma_yx_a.dot(&ma)),
        0.5 * (stats.y_sq - stats.sigma_yx_b.dot(&mb)),
    ))
}

fn is_tie(na: f64, nb: f64) -> bool {
    (na - nb).abs() <= TIE_TOL * na.max(nb)
}

pub fn superficial_preference(stats: &CorrelationStats) -> Result<Preference> {
    let (na, nb) = (stats.sigma_yx_a.norm(), stats.sigma_yx_b.norm());
    if is_tie(na, nb) {
        return Err(Error::Tie);
    }
    let first = if na > nb { Modality::A } else { Modality::B };
    let explained = |m: Modality| -> Result<f64> {
        Ok(stats.sigma_yx_of(m).dot(&stats.saddle_solution(m)?))
    };
    Ok(Preference {
        first,
        superficial: explained(first)? < explained(first.other())?,
    })
}

/// Plateau value of A minus its block of the global solution.
pub fn misattribution(stats: &CorrelationStats) -> Result<DVector<f64>> {
    let saddle = stats.saddle_solution(Modality::A)?;
    Ok(saddle - stats.global_solution().0)
}

/// Quantities shared by every timing formula, with the faster modality as A.
struct Ordered {
    first: Modality,
    na: f64,
    nb: f64,
    eff: f64,
    /// `‖Σ_yxA‖ − ‖Σ_yxB‖`, or the sum when `Σ_yxB` points against `Σ̃_yxB`.
    numerator: f64,
    /// `‖Σ_yxA Σ_A⁻¹‖`.
    m_a: f64,
    tie: bool,
    collinear: bool,
}

impl Ordered {
    fn new(stats: &CorrelationStats) -> Result<Ordered> {
        let first = stats.stronger();
        let s = match first {
            Modality::A => stats.clone(),
            Modality::B => stats.swapped(),
        };
        let (na, nb) = (s.sigma_yx_a.norm(), s.sigma_yx_b.norm());
        let eff_vec = effective_correlation_b(&s)?;
        let eff = eff_vec.norm();
        let collinear = eff <= COLLINEAR_TOL * na;
        let antiparallel = !collinear && nb > 0.0 && s.sigma_yx_b.dot(&eff_vec) / (nb * eff) < -1.0 + 1e-9;
        Ok(Ordered {
            first,
            na,
            nb,
            eff,
            numerator: if antiparallel { na + nb } else { na - nb },
            m_a: s.saddle_solution(Modality::A)?.norm(),
            tie: is_tie(na, nb),
            collinear,
        })
    }

    fn k(&self) -> f64 {
        if self.na > 0.0 {
            self.nb / self.na
        } else {
            1.0
        }
    }

    /// `1 + correction` unless tied or collinear.
    fn ratio_with(&self, correction: impl FnOnce() -> Result<f64>) -> Result<RatioValue> {
        if self.tie {
            return Ok(RatioValue::Finite(1.0));
        }
        if self.collinear {
            return Ok(RatioValue::Divergent {
                denominator: self.eff,
            });
        }
        Ok(RatioValue::Finite(1.0 + correction()?))
    }
}

fn check_u0(u0: f64) -> Result<()> {
    if u0 > 0.0 && u0 < 1.0 {
        Ok(())
    } else {
        Err(Error::BadDomain(format!("u0 must lie in (0, 1), got {u0}")))
    }
}

/// Two-layer late-fusion times `(t_fast, t_slow)`; `t_slow = +∞` for collinear modalities.
pub fn times_two_layer(stats: &CorrelationStats, u0: f64, tau: f64) -> Result<(f64, f64)> {
    check_u0(u0)?;
    let o = Ordered::new(stats)?;
    let log = (1.0 / u0).ln();
    let t_a = tau * log / o.na;
    let t_b = match o.ratio_with(|| Ok(o.numerator / o.eff))? {
        RatioValue::Finite(r) => t_a * r,
        RatioValue::Divergent { .. } => f64::INFINITY,
    };
    Ok((t_a, t_b))
}

/// `t_slow / t_fast = 1 + (‖Σ_yxA‖ − ‖Σ_yxB‖)/‖Σ̃_yxB‖` for two-layer late fusion.
pub fn ratio_two_layer(stats: &CorrelationStats) -> Result<RatioValue> {
    let o = Ordered::new(stats)?;
    o.ratio_with(|| Ok(o.numerator / o.eff))
}

/// The two-layer ratio with the unsigned numerator `‖Σ_yxA‖ − ‖Σ_yxB‖` in every case.
pub fn ratio_two_layer_unsigned(stats: &CorrelationStats) -> Result<RatioValue> {
    let o = Ordered::new(stats)?;
    o.ratio_with(|| Ok((o.na - o.nb) / o.eff))
}

fn check_k(k: f64) -> Result<()> {
    if k > 0.0 && k <= 1.0 {
        Ok(())
    } else {
        Err(Error::BadDomain(format!("k must lie in (0, 1], got {k}")))
    }
}

/// `I(L, L_f) = ∫_1^∞ x^{1−L} [1 + (k + (1−k) x^{L_f−2})^{2/(2−L_f)}]^{(L_f−L)/2} dx`
/// for `2 < L_f ≤ L`.
pub fn integral_i(l: usize, l_f: usize, k: f64, tol: f64) -> Result<Quadrature> {
    if l_f <= 2 || l_f > l {
        return Err(Error::BadDomain(format!(
            "integral requires 2 < L_f <= L, got L = {l}, L_f = {l_f}"
        )));
    }
    check_k(k)?;
    let (lf, lt) = (l_f as f64, l as f64);
    let power = (lf - lt) / 2.0;
    let at_zero = if l == 3 {
        if k == 1.0 {
            2f64.powf(power)
        } else {
            1.0
        }
    } else {
        0.0
    };
    // With x = 1/s the bracket term becomes s²(1 − k + k s^{L_f−2})^{−2/(L_f−2)}.
    let g = |s: f64| {
        if s == 0.0 {
            return at_zero;
        }
        let term = s * s * (1.0 - k + k * s.powi(l_f as i32 - 2)).powf(-2.0 / (lf - 2.0));
        s.powi(l as i32 - 3) * (1.0 + term).powf(power)
    };
    Ok(adaptive_simpson(g, 0.0, 1.0, tol))
}

/// `I(L, 2) = ∫_1^∞ x^{−1} (x² + x^{2k})^{1−L/2} dx` for `L > 2`.
pub fn integral_i_fusion2(l: usize, k: f64, tol: f64) -> Result<Quadrature> {
    if l <= 2 {
        return Err(Error::BadDomain(format!("integral requires L > 2, got {l}")));
    }
    check_k(k)?;
    let lt = l as f64;
    let power = 1.0 - lt / 2.0;
    let at_zero = if l == 3 {
        if k == 1.0 {
            2f64.powf(power)
        } else {
            1.0
        }
    } else {
        0.0
    };
    let g = |s: f64| {
        if s == 0.0 {
            return at_zero;
        }
        s.powi(l as i32 - 3) * (1.0 + s.powf(2.0 - 2.0 * k)).powf(power)
    };
    Ok(adaptive_simpson(g, 0.0, 1.0, tol))
}

/// Unequal-depth integral
/// `∫_1^∞ x^{1−L_A} [x² + (c(x^{2−L_A} − 1) + 1)^{2/(2−L_B)}]^{−L_c/2} dx`, `0 < c < 1`.
pub fn integral_i_unequal(l_a: usize, l_b: usize, l_c: usize, c: f64, tol: f64) -> Result<Quadrature> {
    if l_a <= 2 || l_b <= 2 {
        return Err(Error::BadDomain(format!(
            "unequal-depth integral requires L_A, L_B > 2, got {l_a}, {l_b}"
        )));
    }
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::BadDomain(format!("unequal-depth integral requires 0 < c < 1, got {c}")));
    }
    let lb = l_b as f64;
    let lc = l_c as f64;
    let lead = l_a as i32 - 3 + l_c as i32;
    let at_zero = if lead == 0 { 1.0 } else { 0.0 };
    let g = |s: f64| {
        if s == 0.0 {
            return at_zero;
        }
        let b = (1.0 - c + c * s.powi(l_a as i32 - 2)).powf(-2.0 / (lb - 2.0));
        s.powi(lead) * (1.0 + s * s * b).powf(-lc / 2.0)
    };
    Ok(adaptive_simpson(g, 0.0, 1.0, tol))
}

fn depth_domain(depth: &DepthSpec) -> Result<()> {
    if depth.l_f == 0 || depth.l_f > depth.l {
        return Err(Error::BadDomain(format!(
            "fusion layer must lie in [1, L], got L = {}, L_f = {}",
            depth.l, depth.l_f
        )));
    }
    Ok(())
}

fn deep_parts(stats: &CorrelationStats, depth: &DepthSpec, u0: f64, tol: f64) -> Result<(RatioValue, Option<f64>)> {
    depth_domain(depth)?;
    let (l, l_f) = (depth.l, depth.l_f);
    if l_f == 1 {
        return Ok((RatioValue::Finite(1.0), None));
    }
    if l == 2 {
        return Ok((ratio_two_layer(stats)?, None));
    }
    check_u0(u0)?;
    let o = Ordered::new(stats)?;
    let lt = l as f64;
    if l_f == 2 {
        let i = integral_i_fusion2(l, o.k(), tol)?.value;
        let r = o.ratio_with(|| {
            Ok(o.numerator * u0.powi(l as i32 - 2) * (1.0 / u0).ln()
                / (o.eff * o.m_a.powf(1.0 - 2.0 / lt) * i))
        })?;
        return Ok((r, Some(i)));
    }
    let lf = l_f as f64;
    let i = integral_i(l, l_f, o.k(), tol)?.value;
    let r = o.ratio_with(|| {
        Ok(o.numerator / o.eff * u0.powi((l - l_f) as i32)
            / ((lf - 2.0) * o.m_a.powf(1.0 - lf / lt))
            / i)
    })?;
    Ok((r, Some(i)))
}

/// Time ratio for depth `L` and fusion layer `L_f` from initial scale `u0`.
/// Early fusion (`L_f = 1`) has no unimodal phase and returns exactly 1.
pub fn ratio_deep(stats: &CorrelationStats, depth: &DepthSpec, u0: f64) -> Result<RatioValue> {
    Ok(deep_parts(stats, depth, u0, DEFAULT_TOL)?.0)
}

/// [`ratio_deep`] with an explicit quadrature tolerance.
pub fn ratio_deep_tol(stats: &CorrelationStats, depth: &DepthSpec, u0: f64, tol: f64) -> Result<RatioValue> {
    Ok(deep_parts(stats, depth, u0, tol)?.0)
}

/// Ratio for branches of different depths `L_A`, `L_B` joined by `L_c` shared layers.
pub fn ratio_unequal(stats: &CorrelationStats, depth: &DepthSpec, u0: f64) -> Result<RatioValue> {
    ratio_unequal_tol(stats, depth, u0, DEFAULT_TOL)
}

pub fn ratio_unequal_tol(stats: &CorrelationStats, depth: &DepthSpec, u0: f64, tol: f64) -> Result<RatioValue> {
    let (Some(l_a), Some(l_b), Some(l_c)) = (depth.l_a, depth.l_b, depth.l_c) else {
        return Err(Error::BadDomain("unequal depths need L_A, L_B and L_c".into()));
    };
    if l_a <= 2 || l_b <= 2 {
        return Err(Error::BadDomain(format!("requires L_A, L_B > 2, got {l_a}, {l_b}")));
    }
    check_u0(u0)?;
    let o = Ordered::new(stats)?;
    // Depths follow the faster modality after relabelling.
    let (l_a, l_b) = match o.first {
        Modality::A => (l_a, l_b),
        Modality::B => (l_b, l_a),
    };
    if o.tie && l_a == l_b {
        return Ok(RatioValue::Finite(1.0));
    }
    if o.collinear {
        return Ok(RatioValue::Divergent {
            denominator: o.eff,
        });
    }
    let (la, lb, lc) = (l_a as f64, l_b as f64, l_c as f64);
    let c = (lb - 2.0) * o.nb / ((la - 2.0) * o.na) * u0.powf(lb - la);
    let i = integral_i_unequal(l_a, l_b, l_c, c, tol)?.value;
    let sign = if o.numerator > o.na { -1.0 } else { 1.0 };
    let num = u0.powf(lc + la - lb) / (lb - 2.0) * o.na - sign * u0.powf(lc) / (la - 2.0) * o.nb;
    Ok(RatioValue::Finite(
        1.0 + num / (o.m_a.powf(lc / (la + lc)) * o.eff * i),
    ))
}

fn check_whitened(stats: &CorrelationStats) -> Result<(f64, f64)> {
    let scale = stats.sigma().amax();
    if stats.sigma_ab.amax() > 1e-12 * scale {
        return Err(Error::NotSolvable("modalities are correlated".into()));
    }
    let iso = |m: &nalgebra::DMatrix<f64>, name: &str| -> Result<f64> {
        let v = m[(0, 0)];
        let off = m.map_with_location(|i, j, x| if i == j { x - v } else { x });
        if off.amax() > 1e-12 * scale || v <= 0.0 {
            return Err(Error::NotSolvable(format!("{name} is not a positive multiple of the identity")));
        }
        Ok(v)
    };
    Ok((iso(&stats.sigma_a, "sigma_A")?, iso(&stats.sigma_b, "sigma_B")?))
}

/// Exact two-layer late-fusion total maps for whitened, uncorrelated modalities,
/// starting from balanced rank-one weights aligned with `Σ_yx·` with total-map
/// norms `u_a0`, `u_b0`.
pub fn exact_trajectory(
    stats: &CorrelationStats,
    u_a0: f64,
    u_b0: f64,
    tau: f64,
    times: &[f64],
) -> Result<Vec<TotalMaps>> {
    let (var_a, var_b) = check_whitened(stats)?;
    let path = |syx: &DVector<f64>, var: f64, u0: f64, t: f64| -> DVector<f64> {
        let n = syx.norm();
        if n == 0.0 {
            return DVector::zeros(syx.len());
        }
        let s = 1.0 / ((n / (var * u0) - 1.0) * (-2.0 * n * t / tau).exp() + 1.0);
        syx * (s / var)
    };
    Ok(times
        .iter()
        .map(|&t| TotalMaps {
            w_tot_a: path(&stats.sigma_yx_a, var_a, u_a0, t),
            w_tot_b: path(&stats.sigma_yx_b, var_b, u_b0, t),
        })
        .collect())
}

/// Full prediction. Early fusion uses the single-mode learning time of the
/// concatenated input for both modalities.
pub fn predict(stats: &CorrelationStats, depth: &DepthSpec, u0: f64, tau: f64) -> Result<TheoryPrediction> {
    depth_domain(depth)?;
    check_u0(u0)?;
    let o = Ordered::new(stats)?;
    let lt = depth.l as f64;
    let (ratio, integral) = if depth.l_a.is_some() {
        (ratio_unequal(stats, depth, u0)?, None)
    } else {
        deep_parts(stats, depth, u0, DEFAULT_TOL)?
    };
    let t_a = if depth.l_f == 1 {
        let n = stats.sigma_yx().norm();
        if depth.l == 2 {
            tau * (1.0 / u0).ln() / n
        } else {
            tau * u0.powf(2.0 - lt) / ((lt - 2.0) * n)
        }
    } else if depth.l == 2 {
        tau * (1.0 / u0).ln() / o.na
    } else {
        match integral {
            Some(i) => tau * u0.powf(2.0 - lt) * i / o.na,
            None => tau * u0.powf(2.0 - lt) / ((lt - 2.0) * o.na),
        }
    };
    Ok(TheoryPrediction {
        first_modality: o.first,
        t_a,
        t_b: t_a * ratio.value(),
        ratio,
        k: o.k(),
        eff_corr_norm: o.eff,
        misattribution: misattribution(stats)?,
        integral_value: integral,
    })
}

/// `loss_from_stats` at the two saddles, for cross-checking [`saddle_losses`].
pub fn saddle_losses_via_maps(stats: &CorrelationStats) -> Result<(f64, f64)> {
    let m = fixed_points(stats)?;
    let za = DVector::zeros(stats.dims_a());
    let zb = DVector::zeros(stats.dims_b());
    Ok((
        loss_from_stats(stats, &TotalMaps { w_tot_a: m.m_a_saddle, w_tot_b: zb }),
        loss_from_stats(stats, &TotalMaps { w_tot_a: za, w_tot_b: m.m_b_saddle }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{build_correlations, build_correlations_allow_singular, DatasetSpec};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn scalar(sa: f64, sb: f64, rho: f64, wa: f64, wb: f64) -> CorrelationStats {
        build_correlations_allow_singular(&DatasetSpec::scalar(sa, sb, rho, wa, wb)).unwrap()
    }

    fn diag(a: f64, b: f64, wa: f64, wb: f64) -> CorrelationStats {
        let spec = DatasetSpec::new(
            DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b]),
            DVector::from_element(1, wa),
            DVector::from_element(1, wb),
        )
        .unwrap();
        build_correlations(&spec).unwrap()
    }

    fn reduced_ratio(sa: f64, sb: f64, rho: f64) -> f64 {
        1.0 + (sa * sa / (sb * sb) - 1.0) / (1.0 - rho * rho)
    }

    #[test]
    fn fixed_point_examples() {
        let m = fixed_points(&diag(4.0, 1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(m.m_star_a[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.m_star_b[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.m_a_saddle[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.m_b_saddle[0], 1.0, epsilon = 1e-12);

        let m = fixed_points(&scalar(1.0, 1.0, 0.5, 1.0, 1.0)).unwrap();
        assert_relative_eq!(m.m_a_saddle[0], 1.5, epsilon = 1e-12);

        let m = fixed_points(&scalar(1.0, 2.0, 0.3, 0.0, 0.0)).unwrap();
        assert!(m.m_star_a.norm() + m.m_star_b.norm() + m.m_a_saddle.norm() + m.m_b_saddle.norm() == 0.0);
    }

    #[test]
    fn saddle_loss_examples() {
        let s = diag(9.0, 1.0, 1.0, 4.0);
        assert_eq!(s.y_sq, 25.0);
        let (la, lb) = saddle_losses(&s).unwrap();
        assert_relative_eq!(la, 8.0, epsilon = 1e-12);
        assert_relative_eq!(lb, 4.5, epsilon = 1e-12);
        let (ma, mb) = saddle_losses_via_maps(&s).unwrap();
        assert!((ma - la).abs() <= 1e-12 && (mb - lb).abs() <= 1e-12);

        let (la, _) = saddle_losses(&scalar(2.0, 1.0, 0.0, 1.0, 0.0)).unwrap();
        assert!(la.abs() <= 1e-12);
    }

    #[test]
    fn preference_examples() {
        assert_eq!(
            superficial_preference(&diag(9.0, 1.0, 1.0, 4.0)).unwrap(),
            Preference { first: Modality::A, superficial: true }
        );
        assert_eq!(
            superficial_preference(&diag(16.0, 1.0, 1.0, 3.0)).unwrap(),
            Preference { first: Modality::A, superficial: false }
        );
        assert!(matches!(superficial_preference(&scalar(1.0, 1.0, 0.2, 1.0, 1.0)), Err(Error::Tie)));
        let p = superficial_preference(&diag(9.0, 1.0, 1.0, 4.0).swapped()).unwrap();
        assert_eq!(p, Preference { first: Modality::B, superficial: true });
    }

    #[test]
    fn misattribution_examples() {
        assert!(misattribution(&scalar(2.0, 1.0, 0.0, 1.0, 1.0)).unwrap().norm() < 1e-12);
        assert_relative_eq!(misattribution(&scalar(1.0, 1.0, 0.5, 1.0, 1.0)).unwrap()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(misattribution(&scalar(1.0, 1.0, -0.5, 1.0, 1.0)).unwrap()[0], -0.5, epsilon = 1e-12);
        // Reduced scalar form ρ σ_B/σ_A w_B.
        for &(sa, sb, rho, wb) in &[(2.0, 1.0, 0.6, 1.0), (1.5, 0.8, -0.3, 2.0)] {
            let got = misattribution(&scalar(sa, sb, rho, 1.0, wb)).unwrap()[0];
            assert_relative_eq!(got, rho * sb / sa * wb, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_layer_times() {
        let s = scalar(2.0, 1.0, 0.0, 1.0, 1.0);
        let (ta, tb) = times_two_layer(&s, 1e-3, 25.0).unwrap();
        assert_relative_eq!(ta, 25.0 / 4.0 * 1000f64.ln(), max_relative = 1e-14);
        assert_relative_eq!(ta, 43.17, max_relative = 1e-3);
        assert_relative_eq!(tb / ta, 4.0, max_relative = 1e-14);

        let (ta, tb) = times_two_layer(&s, 1.0 - 1e-15, 25.0).unwrap();
        assert!(ta < 1e-12 && tb < 1e-12);

        let (ta, tb) = times_two_layer(&scalar(2.0, 1.0, 1.0, 1.0, 1.0), 1e-3, 25.0).unwrap();
        assert!(ta.is_finite() && tb == f64::INFINITY);
        assert!(matches!(times_two_layer(&s, 1.5, 25.0), Err(Error::BadDomain(_))));
    }

    #[test]
    fn two_layer_ratio_examples() {
        assert_relative_eq!(ratio_two_layer(&scalar(2.0, 1.0, 0.0, 1.0, 1.0)).unwrap().value(), 4.0, max_relative = 1e-14);
        assert_relative_eq!(ratio_two_layer(&scalar(2.0, 1.0, 0.5, 1.0, 1.0)).unwrap().value(), 5.0, max_relative = 1e-14);
        assert_eq!(ratio_two_layer(&scalar(1.0, 1.0, 0.3, 1.0, 1.0)).unwrap(), RatioValue::Finite(1.0));
        let r = ratio_two_layer(&scalar(2.0, 1.0, 1.0, 1.0, 1.0)).unwrap();
        assert!(r.is_divergent());
        assert!(matches!(r.finite(), Err(Error::CollinearModalities)));
    }

    #[test]
    fn signed_numerator_matches_reduced_form() {
        for i in 0..=14 {
            let rho = -0.7 + 0.1 * i as f64;
            let r = ratio_two_layer(&scalar(2.0, 1.0, rho, 1.0, 1.0)).unwrap().value();
            assert_relative_eq!(r, reduced_ratio(2.0, 1.0, rho), max_relative = 1e-12);
        }
        // Below ρ = −0.5 the unsigned form departs from it.
        let lit = ratio_two_layer_unsigned(&scalar(2.0, 1.0, -0.75, 1.0, 1.0)).unwrap().value();
        assert_relative_eq!(lit, 1.0 + 2.0 / 0.4375, max_relative = 1e-12);
    }

    #[test]
    fn integral_closed_forms() {
        for l in 3..=7 {
            let q = integral_i(l, l, 0.37, 1e-10).unwrap();
            assert_relative_eq!(q.value, 1.0 / (l as f64 - 2.0), max_relative = 1e-10);
            for l_f in 3..=l {
                let q = integral_i(l, l_f, 1.0, 1e-10).unwrap();
                let exact = 2f64.powf((l_f as f64 - l as f64) / 2.0) / (l as f64 - 2.0);
                assert_relative_eq!(q.value, exact, max_relative = 1e-9);
            }
        }
        assert_relative_eq!(integral_i(4, 4, 0.1, 1e-10).unwrap().value, 0.5, max_relative = 1e-12);
        assert!(matches!(integral_i(4, 2, 0.5, 1e-8), Err(Error::BadDomain(_))));
        assert!(matches!(integral_i(4, 5, 0.5, 1e-8), Err(Error::BadDomain(_))));
    }

    #[test]
    fn halving_tolerance_stays_within_error_estimate() {
        for &(l, l_f, k) in &[(4, 3, 0.25), (6, 4, 0.8), (5, 3, 0.05)] {
            let coarse = integral_i(l, l_f, k, 1e-6).unwrap();
            let fine = integral_i(l, l_f, k, 5e-7).unwrap();
            assert!((coarse.value - fine.value).abs() <= coarse.error.max(1e-6 * coarse.value));
        }
    }

    #[test]
    fn fusion2_integral_at_tie() {
        // k = 1: the integrand is 2^{1−L/2} x^{1−L}.
        for l in 3..=6 {
            let q = integral_i_fusion2(l, 1.0, 1e-10).unwrap();
            let exact = 2f64.powf(1.0 - l as f64 / 2.0) / (l as f64 - 2.0);
            assert_relative_eq!(q.value, exact, max_relative = 1e-9);
        }
        assert!(matches!(integral_i_fusion2(2, 0.5, 1e-8), Err(Error::BadDomain(_))));
    }

    #[test]
    fn deep_ratio_reduces_to_two_layer() {
        for &(sa, rho) in &[(2.0, 0.0), (1.5, 0.4), (3.0, -0.3)] {
            let s = scalar(sa, 1.0, rho, 1.0, 1.0);
            let two = ratio_two_layer(&s).unwrap().value();
            for l in 2..=6 {
                let r = ratio_deep(&s, &DepthSpec::new(l, l), 0.05).unwrap().value();
                assert!((r - two).abs() <= 1e-10 * two, "L = {l}: {r} vs {two}");
            }
        }
    }

    #[test]
    fn deep_ratio_trends() {
        let s = scalar(2.0, 1.0, 0.0, 1.0, 1.0);
        let r: Vec<f64> = (2..=4)
            .map(|l_f| ratio_deep(&s, &DepthSpec::new(4, l_f), 0.1).unwrap().value())
            .collect();
        assert!(r[0] < r[1] && r[1] < r[2], "{r:?}");
        for (got, want) in r.iter().zip([1.210, 1.739, 4.0]) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
        let r: Vec<f64> = [0.05, 0.1, 0.2]
            .iter()
            .map(|&u| ratio_deep(&s, &DepthSpec::new(4, 3), u).unwrap().value())
            .collect();
        assert!(r[0] < r[1] && r[1] < r[2], "{r:?}");
        assert_eq!(ratio_deep(&s, &DepthSpec::new(4, 1), 0.1).unwrap(), RatioValue::Finite(1.0));
        assert!(matches!(ratio_deep(&s, &DepthSpec::new(3, 4), 0.1), Err(Error::BadDomain(_))));
    }

    #[test]
    fn unequal_depth_reduces_to_equal() {
        for &(sa, rho, u0) in &[(2.0, 0.0, 0.1), (1.7, 0.3, 0.05), (2.5, -0.2, 0.2)] {
            let s = scalar(sa, 1.0, rho, 1.0, 1.0);
            for (l_f, l_c) in [(3, 1), (3, 0), (4, 2), (5, 1)] {
                let deep = ratio_deep_tol(&s, &DepthSpec::new(l_f + l_c, l_f), u0, 1e-12).unwrap().value();
                let uneq = ratio_unequal_tol(&s, &DepthSpec::unequal(l_f, l_f, l_c), u0, 1e-12).unwrap().value();
                assert!((deep - uneq).abs() <= 1e-8 * deep, "{deep} {uneq}");
            }
        }
        let s = scalar(1.0, 1.0, 0.0, 1.0, 1.0);
        assert_eq!(ratio_unequal(&s, &DepthSpec::unequal(3, 3, 1), 0.1).unwrap(), RatioValue::Finite(1.0));
        assert!(matches!(
            ratio_unequal(&s, &DepthSpec::unequal(2, 3, 1), 0.1),
            Err(Error::BadDomain(_))
        ));
    }

    #[test]
    fn ordering_invariance() {
        let s = scalar(1.0, 2.0, 0.35, 0.5, 1.0);
        let sw = s.swapped();
        assert_eq!(ratio_two_layer(&s).unwrap(), ratio_two_layer(&sw).unwrap());
        let d = DepthSpec::new(5, 3);
        assert_eq!(ratio_deep(&s, &d, 0.1).unwrap(), ratio_deep(&sw, &d, 0.1).unwrap());
        assert_eq!(times_two_layer(&s, 1e-3, 1.0).unwrap(), times_two_layer(&sw, 1e-3, 1.0).unwrap());
    }

    #[test]
    fn exact_solution_boundaries() {
        let s = diag(2.0, 0.5, 1.0, 1.0);
        let maps = exact_trajectory(&s, 1e-3, 2e-3, 1.0, &[0.0, 1e4]).unwrap();
        assert_relative_eq!(maps[0].w_tot_a.norm(), 1e-3, max_relative = 1e-12);
        assert_relative_eq!(maps[0].w_tot_b.norm(), 2e-3, max_relative = 1e-12);
        assert_relative_eq!(maps[1].w_tot_a[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(maps[1].w_tot_b[0], 1.0, max_relative = 1e-12);
        assert!(matches!(
            exact_trajectory(&scalar(1.0, 1.0, 0.5, 1.0, 1.0), 1e-3, 1e-3, 1.0, &[0.0]),
            Err(Error::NotSolvable(_))
        ));
        let aniso = build_correlations(&DatasetSpec::isotropic(2, 1, 1.0, 1.0, 1.0, 1.0)).unwrap();
        let mut bad = aniso.clone();
        bad.sigma_a[(1, 1)] = 2.0;
        assert!(exact_trajectory(&aniso, 1e-3, 1e-3, 1.0, &[1.0]).is_ok());
        assert!(matches!(exact_trajectory(&bad, 1e-3, 1e-3, 1.0, &[1.0]), Err(Error::NotSolvable(_))));
    }

    #[test]
    fn prediction_fields() {
        let s = scalar(2.0, 1.0, 0.5, 1.0, 1.0);
        let p = predict(&s, &DepthSpec::new(2, 2), 1e-3, 25.0).unwrap();
        assert_eq!(p.first_modality, Modality::A);
        assert_relative_eq!(p.ratio.value(), 5.0, max_relative = 1e-12);
        assert_relative_eq!(p.t_b / p.t_a, 5.0, max_relative = 1e-12);
        assert_relative_eq!(p.k, 2.0 / 5.0, max_relative = 1e-12);
        assert_relative_eq!(p.eff_corr_norm, 0.75, max_relative = 1e-12);
        assert_relative_eq!(p.misattribution[0], 0.25, max_relative = 1e-12);
        assert!(p.integral_value.is_none());

        let p = predict(&s, &DepthSpec::new(4, 3), 0.1, 1.0).unwrap();
        assert!(p.integral_value.is_some() && p.ratio.value() > 1.0);
    }

    #[test]
    fn scale_relation() {
        let s1 = scalar(2.0, 1.0, 0.3, 1.0, 1.0);
        let s3 = scalar(2.0, 1.0, 0.3, 3.0, 3.0);
        let (t1, _) = times_two_layer(&s1, 1e-3, 1.0).unwrap();
        let (t3, _) = times_two_layer(&s3, 1e-3, 1.0).unwrap();
        assert_relative_eq!(t1 / t3, 3.0, max_relative = 1e-12);
        assert_relative_eq!(
            ratio_two_layer(&s1).unwrap().value(),
            ratio_two_layer(&s3).unwrap().value(),
            max_relative = 1e-12
        );
    }
}
