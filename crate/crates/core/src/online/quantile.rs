//! Sequential quantile prediction for real-valued outcomes on a bounded
//! interval.
//!
//! The round function is `S^q_t(p) = sum_{i<t} k((x_t,p),(x_i,p_i))
//! (1{y_i <= p_i} - q) + k((x_t,p),(x_t,p))(1-2q)/2`. Endpoint sign
//! agreement pins the prediction to an interval end (ties resolve to
//! `y_min`; the hedged product is 0 either way); otherwise a sign-preserving
//! bisection returns a two-point distribution of width at most
//! `1/(10 B_t t^3)` mixed so the expected S is exactly zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dist::PredictionDistribution;
use crate::error::{Error, Result};
use crate::kernel::{build_plan, Kernel};
use crate::online::binary::Forecast;
use crate::online::epsilon;
use crate::transcript::{QuantileRound, QuantileTranscript};

#[derive(Clone, Copy, Debug)]
pub struct QuantileConfig {
    pub q: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl QuantileConfig {
    pub fn new(q: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if !(0.0 < q && q < 1.0) {
            return Err(Error::domain(format!("target quantile must lie in (0,1), got {q}")));
        }
        if !(y_min < y_max) {
            return Err(Error::domain(format!("need y_min < y_max, got [{y_min}, {y_max}]")));
        }
        Ok(QuantileConfig { q, y_min, y_max })
    }
}

pub struct QuantilePredictor<X> {
    kernel: Kernel<X>,
    config: QuantileConfig,
    xs: Vec<X>,
    ps: Vec<f64>,
    residuals: Vec<f64>, // 1{y_i <= p_i} - q
    b_max: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<X: Clone> QuantilePredictor<X> {
    pub fn new(kernel: Kernel<X>, config: QuantileConfig, seed: u64) -> Self {
        QuantilePredictor {
            kernel,
            config,
            xs: Vec::new(),
            ps: Vec::new(),
            residuals: Vec::new(),
            b_max: 0.0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn round(&self) -> usize {
        self.xs.len() + 1
    }

    pub fn b_max(&self) -> f64 {
        self.b_max
    }

    pub fn config(&self) -> QuantileConfig {
        self.config
    }

    pub fn kernel(&self) -> &Kernel<X> {
        &self.kernel
    }

    /// S^q_t(p) for the upcoming round; exact O(t) kernel evaluations.
    pub fn s_function(&self, x: &X, p: f64) -> Result<f64> {
        if !(self.config.y_min..=self.config.y_max).contains(&p) {
            return Err(Error::domain(format!(
                "prediction {p} outside outcome range [{}, {}]",
                self.config.y_min, self.config.y_max
            )));
        }
        let plan = build_plan(&self.kernel, x, &self.xs, &self.ps, &self.residuals)?;
        Ok(plan.weighted(p)? + 0.5 * plan.diag(p)? * (1.0 - 2.0 * self.config.q))
    }

    pub fn predict(&mut self, x: &X) -> Result<Forecast> {
        let t = self.round();
        let q = self.config.q;
        let plan = build_plan(&self.kernel, x, &self.xs, &self.ps, &self.residuals)?;
        let mut b_max = self.b_max;
        let mut evals = 0u32;
        let mut s_eval = |p: f64, b: &mut f64, evals: &mut u32| -> Result<f64> {
            let diag = plan.diag(p)?;
            if diag > *b {
                *b = diag;
            }
            *evals += 1;
            Ok(plan.weighted(p)? + 0.5 * diag * (1.0 - 2.0 * q))
        };

        let (y_min, y_max) = (self.config.y_min, self.config.y_max);
        let s_min = s_eval(y_min, &mut b_max, &mut evals)?;
        let s_max = s_eval(y_max, &mut b_max, &mut evals)?;

        let forecast = if s_min >= 0.0 && s_max >= 0.0 {
            Forecast { dist: PredictionDistribution::point(y_min), s: (s_min, s_min), epsilon: epsilon(t, b_max), evals }
        } else if s_min <= 0.0 && s_max <= 0.0 {
            Forecast { dist: PredictionDistribution::point(y_max), s: (s_max, s_max), epsilon: epsilon(t, b_max), evals }
        } else {
            // Strictly opposite signs.
            let (mut lo, mut hi) = (y_min, y_max);
            let (mut s_lo, mut s_hi) = (s_min, s_max);
            let mut point = None;
            while hi - lo > epsilon(t, b_max) {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let s_mid = s_eval(mid, &mut b_max, &mut evals)?;
                if s_mid == 0.0 {
                    point = Some((mid, s_mid));
                    break;
                }
                if s_mid.signum() == s_lo.signum() {
                    lo = mid;
                    s_lo = s_mid;
                } else {
                    hi = mid;
                    s_hi = s_mid;
                }
            }
            let eps = epsilon(t, b_max);
            match point {
                Some((p, s)) => Forecast { dist: PredictionDistribution::point(p), s: (s, s), epsilon: eps, evals },
                None => {
                    let tau = s_hi.abs() / (s_lo.abs() + s_hi.abs());
                    Forecast {
                        dist: PredictionDistribution::two_point(lo, hi, tau),
                        s: (s_lo, s_hi),
                        epsilon: eps,
                        evals,
                    }
                }
            }
        };

        self.b_max = b_max;
        Ok(forecast)
    }

    /// Plays one round; the outcome callback sees (features, distribution)
    /// and must return y in [y_min, y_max].
    pub fn step(
        &mut self,
        x: X,
        x_ref: u64,
        mut nature: impl FnMut(&X, &PredictionDistribution) -> Result<f64>,
    ) -> Result<(QuantileRound<X>, Forecast)> {
        let t = self.round();
        let forecast = self.predict(&x)?;
        let sampled = forecast.dist.sample(&mut self.rng);
        let y = nature(&x, &forecast.dist)?;
        if !(self.config.y_min..=self.config.y_max).contains(&y) {
            return Err(Error::protocol(
                t,
                format!("outcome {y} outside [{}, {}]", self.config.y_min, self.config.y_max),
            ));
        }
        let round = QuantileRound { features: x.clone(), x_ref, dist: forecast.dist, sampled, outcome: y };
        self.xs.push(x);
        self.ps.push(sampled);
        self.residuals.push(if y <= sampled { 1.0 } else { 0.0 } - self.config.q);
        Ok((round, forecast))
    }

    pub fn into_transcript(self, rounds: Vec<QuantileRound<X>>) -> QuantileTranscript<X> {
        QuantileTranscript {
            rounds,
            seed: self.seed,
            kernel_desc: self.kernel.describe().to_string(),
            kernel_hash: self.kernel.config_hash(),
            q: self.config.q,
            y_min: self.config.y_min,
            y_max: self.config.y_max,
        }
    }
}
