//! Scalar math shared by the elementwise ops and the entropy models.

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Standard normal CDF, exact erf form.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// P(a < Z <= b) for a standard normal, computed in the tail-stable form so
/// deep tails keep their (tiny, positive) mass instead of cancelling to 0.
pub fn norm_interval(a: f64, b: f64) -> f64 {
    debug_assert!(a <= b);
    if a >= 0.0 {
        0.5 * (libm::erfc(a / SQRT_2) - libm::erfc(b / SQRT_2))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b / SQRT_2) - libm::erfc(-a / SQRT_2))
    } else {
        0.5 * (libm::erf(b / SQRT_2) + libm::erf(-a / SQRT_2))
    }
}

/// y = x * Phi(x), the exact-erf GELU.
pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    norm_cdf(x) + x * norm_pdf(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// d softplus / dx = sigmoid(x).
pub fn softplus_grad(x: f64) -> f64 {
    sigmoid(x)
}
