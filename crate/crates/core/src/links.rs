//! Link functions mapping probabilities in (0,1) to the real line.
//!
//! Each link provides the forward map `g`, its inverse, stable log-scale
//! evaluations of the inverse and its complement, and the first two
//! derivatives of the inverse needed for Newton steps on the linear
//! predictor scale.

use serde::{Deserialize, Serialize};

/// The cloglog inverse saturates at exp(eta); cap it so exp stays finite.
const CLOGLOG_ETA_CAP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Probit,
    Cloglog,
}

impl Link {
    /// Inverse link: eta -> probability.
    pub fn inv(self, eta: f64) -> f64 {
        match self {
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
            Link::Probit => norm_cdf(eta),
            Link::Cloglog => {
                let e = eta.min(CLOGLOG_ETA_CAP);
                -(-e.exp()).exp_m1()
            }
        }
    }

    /// Forward link: probability -> eta.
    pub fn fwd(self, p: f64) -> f64 {
        match self {
            Link::Logit => p.ln() - (-p).ln_1p(),
            Link::Probit => norm_quantile(p),
            Link::Cloglog => (-(-p).ln_1p()).ln(),
        }
    }

    /// log(inv(eta)), computed without forming inv(eta) first.
    pub fn log_inv(self, eta: f64) -> f64 {
        match self {
            Link::Logit => -softplus(-eta),
            Link::Probit => log_norm_cdf(eta),
            Link::Cloglog => {
                let e = eta.min(CLOGLOG_ETA_CAP);
                log1mexp(-e.exp())
            }
        }
    }

    /// log(1 - inv(eta)).
    pub fn log1m_inv(self, eta: f64) -> f64 {
        match self {
            Link::Logit => -softplus(eta),
            Link::Probit => log_norm_cdf(-eta),
            Link::Cloglog => -eta.min(CLOGLOG_ETA_CAP).exp(),
        }
    }

    /// Derivative of the inverse link d inv/d eta (always positive).
    pub fn d_inv(self, eta: f64) -> f64 {
        match self {
            Link::Logit => {
                let p = self.inv(eta);
                p * (1.0 - p)
            }
            Link::Probit => norm_pdf(eta),
            Link::Cloglog => {
                let e = eta.min(CLOGLOG_ETA_CAP);
                (e - e.exp()).exp()
            }
        }
    }

    /// log of d inv/d eta.
    pub fn log_d_inv(self, eta: f64) -> f64 {
        match self {
            Link::Logit => -softplus(eta) - softplus(-eta),
            Link::Probit => -0.5 * eta * eta - 0.5 * (2.0 * std::f64::consts::PI).ln(),
            Link::Cloglog => {
                let e = eta.min(CLOGLOG_ETA_CAP);
                e - e.exp()
            }
        }
    }

    /// Ratio of the second to the first derivative of the inverse link,
    /// i.e. d/d eta of log d_inv. Used to chain second derivatives.
    pub fn curvature_ratio(self, eta: f64) -> f64 {
        match self {
            Link::Logit => 1.0 - 2.0 * self.inv(eta),
            Link::Probit => -eta,
            Link::Cloglog => {
                let e = eta.min(CLOGLOG_ETA_CAP);
                1.0 - e.exp()
            }
        }
    }
}

/// log(1 + exp(x)) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// log(1 - exp(a)) for a < 0, stable near both ends.
pub fn log1mexp(a: f64) -> f64 {
    debug_assert!(a <= 0.0);
    if a > -std::f64::consts::LN_2 {
        (-a.exp_m1()).ln()
    } else {
        (-(a.exp())).ln_1p()
    }
}

/// log(exp(a) + exp(b)).
pub fn logsumexp2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// log(sum exp(xs)).
pub fn logsumexp(xs: &[f64]) -> f64 {
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + xs.iter().map(|x| (x - hi).exp()).sum::<f64>().ln()
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via Cody's rational erfc.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// log of the standard normal CDF, stable into the far left tail.
///
/// For x < 0 uses Phi(x) = erfcx(-x/sqrt(2)) * exp(-x^2/2) / 2 so the
/// quadratic decay is handled analytically; for x >= 0 the complement is
/// small and log1p is exact.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x >= 0.0 {
        (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else {
        let z = -x / std::f64::consts::SQRT_2;
        (0.5 * erfcx(z)).ln() - z * z
    }
}

// --- Cody-style rational approximations for erf/erfc/erfcx -------------
//
// W. J. Cody, "Rational Chebyshev approximation for the error function",
// Math. Comp. 23 (1969). Relative error below 1e-15 over the full range.

const ERF_A: [f64; 5] = [
    3.16112374387056560e0,
    1.13864154151050156e2,
    3.77485237685302021e2,
    3.20937758913846947e3,
    1.85777706184603153e-1,
];
const ERF_B: [f64; 4] = [
    2.36012909523441209e1,
    2.44024637934444173e2,
    1.28261652607737228e3,
    2.84423683343917062e3,
];
const ERF_C: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e0,
    6.61191906371416295e1,
    2.98635138197400131e2,
    8.81952221241769090e2,
    1.71204761263407058e3,
    2.05107837782607147e3,
    1.23033935479799725e3,
    2.15311535474403846e-8,
];
const ERF_D: [f64; 8] = [
    1.57449261107098347e1,
    1.17693950891312499e2,
    5.37181101862009858e2,
    1.62138957456669019e3,
    3.29079923573345963e3,
    4.36261909014324716e3,
    3.43936767414372164e3,
    1.23033935480374942e3,
];
const ERF_P: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
const ERF_Q: [f64; 5] = [
    2.56852019228982242e0,
    1.87295284992346047e0,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];

fn erf_core(x: f64) -> f64 {
    // |x| <= 0.46875 branch of Cody's algorithm; returns erf(x).
    let y = x.abs();
    let z = y * y;
    let xnum = ERF_A[4] * z;
    let xden = z;
    let (mut xnum, mut xden) = (xnum, xden);
    for i in 0..3 {
        xnum = (xnum + ERF_A[i]) * z;
        xden = (xden + ERF_B[i]) * z;
    }
    x * (xnum + ERF_A[3]) / (xden + ERF_B[3])
}

fn erfc_mid(y: f64) -> f64 {
    // 0.46875 < y <= 4.0; returns erfc(y)*exp(y^2).
    let mut xnum = ERF_C[8] * y;
    let mut xden = y;
    for i in 0..7 {
        xnum = (xnum + ERF_C[i]) * y;
        xden = (xden + ERF_D[i]) * y;
    }
    (xnum + ERF_C[7]) / (xden + ERF_D[7])
}

fn erfc_far(y: f64) -> f64 {
    // y > 4.0; returns erfc(y)*exp(y^2).
    let z = 1.0 / (y * y);
    let mut xnum = ERF_P[5] * z;
    let mut xden = z;
    for i in 0..4 {
        xnum = (xnum + ERF_P[i]) * z;
        xden = (xden + ERF_Q[i]) * z;
    }
    let r = z * (xnum + ERF_P[4]) / (xden + ERF_Q[4]);
    // 1/sqrt(pi)
    const FRAC_1_SQRT_PI: f64 = 5.6418958354775628695e-1;
    (FRAC_1_SQRT_PI - r) / y
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    if y <= 0.46875 {
        return 1.0 - erf_core(x);
    }
    let scaled = if y <= 4.0 { erfc_mid(y) } else { erfc_far(y) };
    let val = scaled * (-y * y).exp();
    if x < 0.0 {
        2.0 - val
    } else {
        val
    }
}

/// Scaled complementary error function erfc(x)*exp(x^2), for x >= 0.
pub fn erfcx(x: f64) -> f64 {
    debug_assert!(x >= -0.5);
    let y = x.abs();
    if y <= 0.46875 {
        return (1.0 - erf_core(x)) * (x * x).exp();
    }
    if x <= 4.0 {
        erfc_mid(x)
    } else {
        erfc_far(x)
    }
}

/// Standard normal quantile (inverse CDF), Wichura's AS 241 (PPND16).
pub fn norm_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "norm_quantile requires p in (0,1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&AS241_A, r) / poly(&AS241_B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        poly(&AS241_C, r) / poly(&AS241_D, r)
    } else {
        let r = r - 5.0;
        poly(&AS241_E, r) / poly(&AS241_F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

const AS241_A: [f64; 8] = [
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
const AS241_B: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
const AS241_C: [f64; 8] = [
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
const AS241_D: [f64; 8] = [
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
const AS241_E: [f64; 8] = [
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
const AS241_F: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erfc_reference_values() {
        // Reference values from standard tables / mpmath.
        assert!((erfc(0.0) - 1.0).abs() < 1e-15);
        assert!((erfc(1.0) - 0.15729920705028513).abs() < 1e-15);
        assert!((erfc(2.0) - 0.004677734981047266).abs() < 1e-16);
        assert!((erfc(-1.0) - 1.8427007929497149).abs() < 1e-14);
        // Far tail, relative accuracy.
        let v = erfc(10.0);
        let expect = 2.0884875837625447e-45;
        assert!((v / expect - 1.0).abs() < 1e-12);
    }

    #[test]
    fn norm_cdf_matches_symmetry_and_known_points() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((norm_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
        for &x in &[-3.0, -1.0, 0.3, 2.5] {
            assert!((norm_cdf(x) + norm_cdf(-x) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn quantile_round_trips_through_cdf() {
        for i in 1..999 {
            let p = i as f64 / 1000.0;
            let x = norm_quantile(p);
            assert!((norm_cdf(x) - p).abs() < 1e-12, "p = {p}");
        }
        // Deep tails: relative accuracy of the probability.
        for &p in &[1e-12, 1e-8, 1e-4, 1.0 - 1e-8] {
            let x = norm_quantile(p);
            assert!((norm_cdf(x) / p - 1.0).abs() < 1e-9, "p = {p}");
        }
    }

    #[test]
    fn log_norm_cdf_far_tail() {
        // Reference value from extended-precision arithmetic.
        assert!((log_norm_cdf(-30.0) - (-454.3212439563432)).abs() < 1e-10);
        // Near zero it must agree with the direct log.
        for &x in &[-5.0, -2.0, 0.0, 1.5, 6.0] {
            assert!((log_norm_cdf(x) - norm_cdf(x).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn links_round_trip_on_wide_eta_range() {
        // g(g^-1(eta)) = eta to 1e-10 over [-30, 30]. Where the inverse
        // saturates against 1.0 an f64 probability cannot carry the
        // remaining bits, so the upper range is verified through the
        // complement 1 - g^-1(eta), which is exact by the symmetry
        // g(1 - p) = -g(p) of the logit and probit links.
        for link in [Link::Logit, Link::Probit, Link::Cloglog] {
            let hi_direct = match link {
                Link::Logit => 15.0,
                Link::Probit => 5.0,
                Link::Cloglog => 2.5,
            };
            let mut eta = -30.0;
            while eta <= 30.0 {
                if eta <= hi_direct {
                    let p = link.inv(eta);
                    if p > 0.0 && p < 1.0 {
                        let back = link.fwd(p);
                        assert!(
                            (back - eta).abs() < 1e-10 * (1.0 + eta.abs()),
                            "{link:?} eta={eta} back={back}"
                        );
                    }
                } else if link != Link::Cloglog {
                    let pc = link.inv(-eta);
                    let back = -link.fwd(pc);
                    assert!(
                        (back - eta).abs() < 1e-10 * (1.0 + eta.abs()),
                        "{link:?} eta={eta} back={back} (complement)"
                    );
                }
                eta += 0.37;
            }
        }
    }

    #[test]
    fn inverse_links_strictly_increasing() {
        for link in [Link::Logit, Link::Probit, Link::Cloglog] {
            let mut prev = link.inv(-20.0);
            let mut eta = -19.75;
            while eta <= 20.0 {
                let p = link.inv(eta);
                assert!(p >= prev, "{link:?} not monotone at {eta}");
                prev = p;
                eta += 0.25;
            }
        }
    }

    #[test]
    fn log_scale_evaluations_match_direct() {
        // Compare only where 1 - p keeps enough bits for the direct log.
        for link in [Link::Logit, Link::Probit, Link::Cloglog] {
            let etas: &[f64] = match link {
                Link::Logit => &[-8.0, -2.0, 0.0, 1.0, 4.0],
                Link::Probit => &[-6.0, -2.0, 0.0, 1.0, 3.0],
                Link::Cloglog => &[-8.0, -2.0, 0.0, 0.8],
            };
            for &eta in etas {
                let p = link.inv(eta);
                assert!((link.log_inv(eta) - p.ln()).abs() < 1e-10, "{link:?} {eta}");
                assert!(
                    (link.log1m_inv(eta) - (1.0 - p).ln()).abs() < 1e-9,
                    "{link:?} {eta}"
                );
                assert!(
                    (link.log_d_inv(eta) - link.d_inv(eta).ln()).abs() < 1e-9,
                    "{link:?} {eta}"
                );
            }
        }
    }

    #[test]
    fn curvature_ratio_is_log_derivative_of_d_inv() {
        let h = 1e-6;
        for link in [Link::Logit, Link::Probit, Link::Cloglog] {
            for &eta in &[-3.0, -0.5, 0.0, 1.2, 2.5] {
                let fd = (link.log_d_inv(eta + h) - link.log_d_inv(eta - h)) / (2.0 * h);
                assert!(
                    (link.curvature_ratio(eta) - fd).abs() < 1e-6,
                    "{link:?} eta={eta}"
                );
            }
        }
    }

    #[test]
    fn cloglog_inverse_of_zero() {
        let p = Link::Cloglog.inv(0.0);
        assert!((p - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    }
}
