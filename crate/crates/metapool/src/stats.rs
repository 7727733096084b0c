//! Small numeric helpers shared across modules: log-space accumulation and
//! empirical quantiles.

/// Running log-sum-exp accumulator: tracks `log Σ exp(xᵢ)` without overflow,
/// rescaling by the running maximum. Merging two accumulators is exact in the
/// same sense, so chunked sweeps can fold partial results in a fixed order.
#[derive(Debug, Clone, Copy)]
pub struct LogAccum {
    max: f64,
    sum: f64,
}

impl LogAccum {
    pub fn new() -> Self {
        LogAccum {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    pub fn merge(&mut self, other: &LogAccum) {
        if other.sum == 0.0 {
            return;
        }
        if other.max <= self.max {
            self.sum += other.sum * (other.max - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - other.max).exp() + other.sum;
            self.max = other.max;
        }
    }

    /// log Σ exp(xᵢ); −∞ if nothing was added.
    pub fn value(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

impl Default for LogAccum {
    fn default() -> Self {
        Self::new()
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (the common `(n−1)p` definition). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Mean and equal-tail interval of a sample at the given credible level.
pub fn mean_and_interval(values: &[f64], level: f64) -> (f64, f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    (
        mean,
        quantile_sorted(&sorted, alpha),
        quantile_sorted(&sorted, 1.0 - alpha),
    )
}
