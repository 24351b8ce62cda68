//! Normal, chi-square and bivariate normal distribution functions.

use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::OnceLock;

use libm::erfc;
use statrs::function::gamma::gamma_ur;

use crate::error::{Result, SmmError};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal distribution function Φ(x).
///
/// Evaluated through the complementary error function so that both tails keep
/// full relative precision.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Inverse of [`normal_cdf`] on the open unit interval.
///
/// A rational starting approximation is polished with three Halley steps on the
/// distribution function.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SmmError::Domain { what: "normal_quantile probability", value: p });
    }
    let mut x = initial_quantile(p);
    for _ in 0..3 {
        let err = normal_cdf(x) - p;
        let u = err * SQRT_2PI * (0.5 * x * x).exp();
        let next = x - u / (1.0 + 0.5 * x * u);
        if !next.is_finite() {
            break;
        }
        x = next;
    }
    Ok(x)
}

fn initial_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Upper tail P(χ²_df > x) via the regularized upper incomplete gamma function.
pub fn chisq_survival(x: f64, df: usize) -> f64 {
    assert!(df >= 1, "chi-square degrees of freedom must be positive");
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(0.5 * df as f64, 0.5 * x)
}

/// Logistic function 1 / (1 + e^{-t}).
#[inline]
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// P(U ≤ h, V ≤ k) for standard bivariate normal (U, V) with correlation `rho`.
///
/// Uses Plackett's identity ∂Φ₂/∂ρ = φ₂ with the substitution r = sin θ,
/// giving Φ(h)Φ(k) + (2π)⁻¹∫₀^{asin ρ} exp{−(h²+k²−2hk sin θ)/(2cos²θ)} dθ.
/// The smooth integrand is handled by composite Gauss–Legendre with panel
/// doubling until successive sums agree.
pub fn bivariate_normal_cdf(h: f64, k: f64, rho: f64) -> f64 {
    assert!((-1.0..=1.0).contains(&rho), "correlation must lie in [-1, 1]");
    if h == f64::NEG_INFINITY || k == f64::NEG_INFINITY {
        return 0.0;
    }
    if h == f64::INFINITY {
        return normal_cdf(k);
    }
    if k == f64::INFINITY {
        return normal_cdf(h);
    }
    if rho == 1.0 {
        return normal_cdf(h.min(k));
    }
    if rho == -1.0 {
        return (normal_cdf(h) - normal_cdf(-k)).max(0.0);
    }
    let base = normal_cdf(h) * normal_cdf(k);
    if rho == 0.0 {
        return base;
    }
    let hk = h * k;
    let ss = h * h + k * k;
    let f = |t: f64| {
        let (s, c) = t.sin_cos();
        (-(ss - 2.0 * hk * s) / (2.0 * c * c)).exp()
    };
    let upper = rho.asin();
    let mut panels = 1usize;
    let mut prev = gauss_legendre(&f, 0.0, upper, panels);
    loop {
        panels *= 2;
        let next = gauss_legendre(&f, 0.0, upper, panels);
        if (next - prev).abs() <= 1e-15 || panels >= 1024 {
            prev = next;
            break;
        }
        prev = next;
    }
    (base + prev / (2.0 * std::f64::consts::PI)).clamp(0.0, 1.0)
}

const GL_ORDER: usize = 20;

/// Nodes and weights of the 20-point Gauss–Legendre rule on [−1, 1].
fn gl_rule() -> &'static [(f64, f64); GL_ORDER] {
    static RULE: OnceLock<[(f64, f64); GL_ORDER]> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_ORDER;
        let mut rule = [(0.0, 0.0); GL_ORDER];
        for (i, slot) in rule.iter_mut().enumerate() {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for j in 2..=n {
                    let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            *slot = (x, 2.0 / ((1.0 - x * x) * dp * dp));
        }
        rule
    })
}

fn gauss_legendre<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, panels: usize) -> f64 {
    let rule = gl_rule();
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * width;
        let half = 0.5 * width;
        total += rule.iter().map(|&(x, w)| w * f(mid + half * x)).sum::<f64>() * half;
    }
    total
}
