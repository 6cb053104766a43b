//! Sequential binary prediction with per-round forecast hedging.
//!
//! Each round builds `S_t(p) = sum_{i<t} k((x_t,p),(x_i,p_i))(y_i - p_i)
//! + k((x_t,p),(x_t,p))(1-2p)/2` and chooses a forecast distribution that
//! keeps the hedged product `E[S_t(p)(y - p)]` below `1/(10 t^2)` for both
//! outcomes:
//!
//! 1. endpoint S values sharing a nonzero sign pin the prediction to 0 or 1;
//! 2. an exact zero at an endpoint returns that endpoint (the product is 0);
//! 3. kernels continuous in p: bisect until `|S(p)| <= eps_t`;
//! 4. otherwise: sign-preserving bisection to a two-point distribution of
//!    width at most `eps_t`, mixed so the expected S is exactly zero.
//!
//! The width floor in step 3 (adjacent floats reached before `|S|` drops
//! below `eps_t`, possible when a kernel is mis-declared continuous) falls
//! back to the two-point rule, which is valid unconditionally.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dist::PredictionDistribution;
use crate::error::{Error, Result};
use crate::kernel::{build_plan, Kernel};
use crate::online::epsilon;
use crate::transcript::{BinaryRound, BinaryTranscript};

/// The forecast for one round plus the diagnostics the guarantees are stated
/// in terms of: S at the support points and the round's tolerance.
#[derive(Clone, Debug)]
pub struct Forecast {
    pub dist: PredictionDistribution,
    /// S_t at (first, second) support points.
    pub s: (f64, f64),
    /// eps_t at return time.
    pub epsilon: f64,
    /// Number of S_t evaluations spent.
    pub evals: u32,
}

impl Forecast {
    fn point(p: f64, s: f64, epsilon: f64, evals: u32) -> Self {
        Forecast { dist: PredictionDistribution::point(p), s: (s, s), epsilon, evals }
    }

    /// max over y in {0,1} of E_{p ~ dist}[S(p) (y - p)].
    pub fn hedge_product(&self) -> f64 {
        let d = &self.dist;
        let (s1, s2) = self.s;
        let for_y = |y: f64| d.weight * s1 * (y - d.first) + (1.0 - d.weight) * s2 * (y - d.second);
        for_y(0.0).max(for_y(1.0))
    }

    /// tau S(q) + (1-tau) S(q'); zero up to rounding on two-point rounds.
    pub fn mix_residual(&self) -> f64 {
        self.dist.weight * self.s.0 + (1.0 - self.dist.weight) * self.s.1
    }
}

/// Sequential state of the binary predictor.
pub struct BinaryPredictor<X> {
    kernel: Kernel<X>,
    xs: Vec<X>,
    ps: Vec<f64>,
    ys: Vec<u8>,
    residuals: Vec<f64>,
    b_max: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<X: Clone> BinaryPredictor<X> {
    pub fn new(kernel: Kernel<X>, seed: u64) -> Self {
        BinaryPredictor {
            kernel,
            xs: Vec::new(),
            ps: Vec::new(),
            ys: Vec::new(),
            residuals: Vec::new(),
            b_max: 0.0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Round about to be played (1-based).
    pub fn round(&self) -> usize {
        self.xs.len() + 1
    }

    /// Running max of evaluated diagonal kernel values.
    pub fn b_max(&self) -> f64 {
        self.b_max
    }

    /// eps for the upcoming round at the current B.
    pub fn current_epsilon(&self) -> f64 {
        epsilon(self.round(), self.b_max)
    }

    pub fn kernel(&self) -> &Kernel<X> {
        &self.kernel
    }

    /// S_t(p) for the upcoming round given current features; exact O(t)
    /// kernel evaluations.
    pub fn s_function(&self, x: &X, p: f64) -> Result<f64> {
        let plan = build_plan(&self.kernel, x, &self.xs, &self.ps, &self.residuals)?;
        Ok(plan.weighted(p)? + 0.5 * plan.diag(p)? * (1.0 - 2.0 * p))
    }

    /// Runs steps 1-4 for the upcoming round. Total: every branch returns a
    /// distribution.
    pub fn predict(&mut self, x: &X) -> Result<Forecast> {
        let t = self.round();
        let plan = build_plan(&self.kernel, x, &self.xs, &self.ps, &self.residuals)?;
        let mut b_max = self.b_max;
        let mut evals = 0u32;
        let mut s_eval = |p: f64, b: &mut f64, evals: &mut u32| -> Result<f64> {
            let diag = plan.diag(p)?;
            if diag > *b {
                *b = diag;
            }
            *evals += 1;
            Ok(plan.weighted(p)? + 0.5 * diag * (1.0 - 2.0 * p))
        };

        let s0 = s_eval(0.0, &mut b_max, &mut evals)?;
        let s1 = s_eval(1.0, &mut b_max, &mut evals)?;

        let forecast = if s0 == 0.0 {
            Forecast::point(0.0, s0, epsilon(t, b_max), evals)
        } else if s1 == 0.0 {
            Forecast::point(1.0, s1, epsilon(t, b_max), evals)
        } else if s0.signum() == s1.signum() {
            let p = 0.5 * (1.0 + s0.signum());
            let s = if p == 0.0 { s0 } else { s1 };
            Forecast::point(p, s, epsilon(t, b_max), evals)
        } else {
            // Opposite strict signs: narrow the bracket [0,1].
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            let (mut s_lo, mut s_hi) = (s0, s1);
            let mut point = None;
            if self.kernel.continuous_in_p() {
                loop {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break; // width floor; fall back to the two-point rule
                    }
                    let s_mid = s_eval(mid, &mut b_max, &mut evals)?;
                    if s_mid.abs() <= epsilon(t, b_max) {
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
            }
            if point.is_none() {
                while hi - lo > epsilon(t, b_max) {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    let s_mid = s_eval(mid, &mut b_max, &mut evals)?;
                    if s_mid == 0.0 {
                        // Degenerate tau: all mass on the exact zero.
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
            }
            let eps = epsilon(t, b_max);
            match point {
                Some((p, s)) => Forecast::point(p, s, eps, evals),
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

    /// Plays one protocol round: predict, sample, query the outcome callback
    /// with (features, distribution), record. The callback may close the
    /// performative loop by reading the distribution.
    pub fn step(
        &mut self,
        x: X,
        x_ref: u64,
        mut nature: impl FnMut(&X, &PredictionDistribution) -> Result<u8>,
    ) -> Result<(BinaryRound<X>, Forecast)> {
        let t = self.round();
        let forecast = self.predict(&x)?;
        let sampled = forecast.dist.sample(&mut self.rng);
        let y = nature(&x, &forecast.dist)?;
        if y > 1 {
            return Err(Error::protocol(t, format!("outcome must be 0 or 1, got {y}")));
        }
        let round = BinaryRound { features: x.clone(), x_ref, dist: forecast.dist, sampled, outcome: y };
        self.xs.push(x);
        self.ps.push(sampled);
        self.ys.push(y);
        self.residuals.push(y as f64 - sampled);
        Ok((round, forecast))
    }

    /// Seeds history directly and folds the replayed diagonal values into the
    /// running B (used by online-to-batch replay).
    pub fn load_history(&mut self, rounds: impl IntoIterator<Item = (X, f64, u8)>) -> Result<()> {
        for (x, p, y) in rounds {
            let diag = self
                .kernel
                .evaluate(&crate::kernel::Point::new(x.clone(), p), &crate::kernel::Point::new(x.clone(), p))?;
            if diag > self.b_max {
                self.b_max = diag;
            }
            self.xs.push(x);
            self.ps.push(p);
            self.ys.push(y);
            self.residuals.push(y as f64 - p);
        }
        Ok(())
    }

    pub fn into_transcript(self, rounds: Vec<BinaryRound<X>>) -> BinaryTranscript<X> {
        BinaryTranscript {
            rounds,
            seed: self.seed,
            kernel_desc: self.kernel.describe().to_string(),
            kernel_hash: self.kernel.config_hash(),
        }
    }
}
