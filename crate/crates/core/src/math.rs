//! Scalar math routed through `libm` so results do not depend on the platform's libm.

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

pub fn round(x: f64) -> f64 {
    libm::round(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    ln(p / (1.0 - p))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(exp(-x))
    } else {
        libm::log1p(exp(x))
    }
}

/// Focal loss `-α_t (1 - p_t)^γ ln p_t` for probability `p` and binary target `y`.
pub fn focal(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let (pt, at) = if y >= 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    if pt >= 1.0 {
        return 0.0;
    }
    -at * powf(1.0 - pt, gamma) * ln(pt.max(1e-300))
}

/// Focal loss of `sigmoid(x)`, using log-sigmoid for stability.
pub fn focal_from_logit(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    if y >= 0.5 {
        alpha * powf(1.0 - p, gamma) * softplus(-x)
    } else {
        (1.0 - alpha) * powf(p, gamma) * softplus(x)
    }
}

/// Derivative of [`focal_from_logit`] with respect to the logit.
pub fn focal_grad_logit(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let q = 1.0 - p;
    if y >= 0.5 {
        // d/dx [α q^γ softplus(-x)] = α q^γ [-γ p softplus(-x) - q]
        alpha * powf(q, gamma) * (-gamma * p * softplus(-x) - q)
    } else {
        // d/dx [(1-α) p^γ softplus(x)] = (1-α) p^γ [γ q softplus(x) + p]
        (1.0 - alpha) * powf(p, gamma) * (gamma * q * softplus(x) + p)
    }
}
