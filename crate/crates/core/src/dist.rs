//! Scalar distributions used by the full conditionals and the prior.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma};
use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-density of `Gamma(shape, rate)` at `x`.
pub fn gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

pub fn normal_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln()) - 0.5 * d * d / var
}

pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters are positive and finite")
        .sample(rng)
}

/// Regularized lower incomplete gamma `P(a, x)`, defined as 0 at `x = 0`.
pub fn gamma_lr(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        statrs::function::gamma::gamma_lr(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_ur(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        statrs::function::gamma::gamma_ur(a, x)
    }
}

/// Exponential integral `E1(z)` for `z > 0`.
pub fn exp_int_e1(z: f64) -> f64 {
    const EULER: f64 = 0.577_215_664_901_532_9;
    if z <= 0.0 {
        return f64::INFINITY;
    }
    if z <= 1.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..200 {
            term *= -z / k as f64;
            let add = -term / k as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs().max(1e-300) {
                break;
            }
        }
        -EULER - z.ln() + sum
    } else {
        // Modified Lentz continued fraction.
        let tiny = 1e-300;
        let mut b = z + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (an * d + b);
            c = b + an / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-z).exp()
    }
}

/// `Gamma(shape, rate)` truncated to `[lower, upper]`; `shape` may be zero,
/// in which case the density is `x^{-1} exp(-rate x)` on the interval (proper
/// as long as `lower > 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedGamma {
    pub shape: f64,
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl TruncatedGamma {
    pub fn new(shape: f64, rate: f64, lower: f64, upper: f64) -> Self {
        debug_assert!(shape >= 0.0 && rate > 0.0 && lower >= 0.0 && upper > lower);
        Self {
            shape,
            rate,
            lower,
            upper,
        }
    }

    /// Unnormalized log-density (the full conditionals only need ratios).
    pub fn ln_kernel(&self, x: f64) -> f64 {
        if x < self.lower || x > self.upper || x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        (self.shape - 1.0) * x.ln() - self.rate * x
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let a = self.shape;
        let b = self.rate;
        let (lo, hi) = (self.lower * b, self.upper * b);
        if a == 0.0 {
            return self.sample_shape_zero(rng);
        }
        if self.lower == 0.0 && self.upper.is_infinite() {
            return sample_gamma(a, b, rng);
        }
        // Far right tail: the interval carries no resolvable CDF mass.
        if lo > a + 40.0 * a.sqrt().max(1.0) {
            return self.sample_right_tail(rng);
        }
        let p_lo = gamma_lr(a, lo);
        let y = if p_lo < 0.5 {
            let p_hi = if hi.is_finite() { gamma_lr(a, hi) } else { 1.0 };
            let u = p_lo + (p_hi - p_lo) * rng.gen::<f64>();
            invert_monotone(lo, hi, |y| gamma_lr(a, y) - u, true)
        } else {
            let q_lo = gamma_ur(a, lo);
            let q_hi = if hi.is_finite() { gamma_ur(a, hi) } else { 0.0 };
            let q = q_lo - (q_lo - q_hi) * rng.gen::<f64>();
            invert_monotone(lo, hi, |y| q - gamma_ur(a, y), true)
        };
        (y / b).clamp(self.lower, self.upper)
    }

    fn sample_shape_zero<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let b = self.rate;
        let (lo, hi) = (self.lower * b, self.upper * b);
        if lo > 500.0 {
            return self.sample_right_tail(rng);
        }
        let e_lo = exp_int_e1(lo);
        let e_hi = if hi.is_finite() { exp_int_e1(hi) } else { 0.0 };
        let target = e_lo - (e_lo - e_hi) * rng.gen::<f64>();
        // E1 is decreasing, so E1(lo) - E1(y) increases in y.
        let y = invert_monotone(lo, hi, |y| (e_lo - exp_int_e1(y)) - (e_lo - target), true);
        (y / b).clamp(self.lower, self.upper)
    }

    /// Exact rejection sampler with an exponential envelope anchored at the
    /// lower bound; used when the lower bound sits deep in the right tail.
    fn sample_right_tail<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let a = self.shape;
        let b = self.rate;
        let l = self.lower;
        // For a >= 1 the log-density is concave and the tangent at `l`
        // dominates it; for a < 1 the power factor is decreasing.
        let slope = if a >= 1.0 { b - (a - 1.0) / l } else { b };
        let env = Exp::new(slope).expect("positive envelope rate");
        loop {
            let x = l + env.sample(rng);
            if x > self.upper {
                continue;
            }
            let log_ratio = if a >= 1.0 {
                (a - 1.0) * (x / l).ln() - (a - 1.0) * (x - l) / l
            } else {
                (a - 1.0) * (x / l).ln()
            };
            if rng.gen::<f64>().ln() <= log_ratio {
                return x;
            }
        }
    }
}

/// Root of an increasing function `f` on `[lo, hi]` by bisection, in log
/// space when `log_space` is set and `lo > 0`.
fn invert_monotone(lo: f64, hi: f64, f: impl Fn(f64) -> f64, log_space: bool) -> f64 {
    let mut a = lo.max(1e-300);
    let mut b = if hi.is_finite() {
        hi
    } else {
        let mut b = (2.0 * a).max(1.0);
        while f(b) < 0.0 && b < 1e300 {
            b *= 2.0;
        }
        b
    };
    for _ in 0..200 {
        let mid = if log_space && a > 0.0 {
            (a * b).sqrt()
        } else {
            0.5 * (a + b)
        };
        if f(mid) < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
        if (b - a) <= 1e-15 * b {
            break;
        }
    }
    0.5 * (a + b)
}

/// Log of `∫ exp(log_f(y)) dy` over the real line for a unimodal integrand.
///
/// A coarse scan over `[lo, hi]` locates the mode, then a trapezoid rule is
/// applied over the region where the integrand is within `e^-45` of its peak.
pub fn log_integrate_1d(log_f: impl Fn(f64) -> f64, lo: f64, hi: f64, fine_points: usize) -> f64 {
    let coarse_step = 0.25;
    let n_coarse = ((hi - lo) / coarse_step).ceil() as usize + 1;
    let mut best = (lo, f64::NEG_INFINITY);
    let coarse: Vec<(f64, f64)> = (0..n_coarse)
        .map(|i| {
            let y = lo + i as f64 * coarse_step;
            (y, log_f(y))
        })
        .collect();
    for &(y, v) in &coarse {
        if v > best.1 {
            best = (y, v);
        }
    }
    if !best.1.is_finite() {
        return f64::NEG_INFINITY;
    }
    let cutoff = best.1 - 45.0;
    let left = coarse
        .iter()
        .rev()
        .find(|&&(y, v)| y < best.0 && v < cutoff)
        .map(|&(y, _)| y)
        .unwrap_or(lo);
    let right = coarse
        .iter()
        .find(|&&(y, v)| y > best.0 && v < cutoff)
        .map(|&(y, _)| y)
        .unwrap_or(hi);
    let n = fine_points.max(16);
    let h = (right - left) / (n - 1) as f64;
    let vals: Vec<f64> = (0..n).map(|i| log_f(left + i as f64 * h)).collect();
    let peak = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (i, v) in vals.iter().enumerate() {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        sum += w * (v - peak).exp();
    }
    peak + (sum * h).ln()
}
