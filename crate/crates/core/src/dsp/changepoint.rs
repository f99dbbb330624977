//! Greedy online change-point refinement of the pause time.

/// Running least-squares line fit; `cost()` is the sum of squared residuals.
#[derive(Debug, Clone, Default)]
pub struct LineFit {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
    syy: f64,
}

impl LineFit {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.sxy += x * y;
        self.syy += y * y;
    }

    pub fn cost(&self) -> f64 {
        if self.n < 3.0 {
            return 0.0;
        }
        let sxx = self.sxx - self.sx * self.sx / self.n;
        let sxy = self.sxy - self.sx * self.sy / self.n;
        let syy = self.syy - self.sy * self.sy / self.n;
        let ssr = if sxx > 0.0 { syy - sxy * sxy / sxx } else { syy };
        ssr.max(0.0)
    }
}

/// Sum of squared residuals of a line fitted to `ys` (x = 0, 1, ...).
pub fn regression_cost(ys: &[f64]) -> f64 {
    let mut fit = LineFit::default();
    for (i, &y) in ys.iter().enumerate() {
        fit.push(i as f64, y);
    }
    fit.cost()
}

/// Refines a pause index over the following `max_len` samples.
///
/// `streams[c][0]` is the sample at `t_end`. The fitted cost is summed over
/// streams; the first sample whose inclusion raises it by more than `beta`
/// stops the scan and the sample before it is returned (as an offset from
/// `t_end`). Without a violation the whole window is kept; a short stream
/// truncates it.
pub fn changepoint_refine(streams: &[&[f64]], max_len: usize, beta: f64) -> usize {
    let avail = streams.iter().map(|s| s.len()).min().unwrap_or(0);
    let last = max_len.min(avail.saturating_sub(1));
    let mut fits = vec![LineFit::default(); streams.len()];
    let mut prev = 0.0;
    for i in 0..=last {
        for (fit, s) in fits.iter_mut().zip(streams) {
            fit.push(i as f64, s[i]);
        }
        let err: f64 = fits.iter().map(LineFit::cost).sum();
        if i > 0 && err > prev + beta {
            return i - 1;
        }
        prev = err;
    }
    last
}

/// Default penalty: twice the residual variance of a line fitted to a
/// quiet stretch (summed over streams).
pub fn default_beta(quiet: &[&[f64]]) -> f64 {
    2.0 * quiet
        .iter()
        .map(|s| regression_cost(s) / s.len().max(1) as f64)
        .sum::<f64>()
}
