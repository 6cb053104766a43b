use rand::Rng;

/// A one- or two-point forecast distribution.
///
/// `first` carries probability `weight`, `second` the rest. A point mass is
/// represented with `second == first` and `weight == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionDistribution {
    pub first: f64,
    pub second: f64,
    pub weight: f64,
}

impl PredictionDistribution {
    pub fn point(p: f64) -> Self {
        PredictionDistribution { first: p, second: p, weight: 1.0 }
    }

    /// Two-point distribution placing `weight` on `first`.
    pub fn two_point(first: f64, second: f64, weight: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&weight));
        PredictionDistribution { first, second, weight }
    }

    pub fn is_point(&self) -> bool {
        self.weight == 1.0 || self.first == self.second
    }

    /// Width of the support interval.
    pub fn width(&self) -> f64 {
        (self.first - self.second).abs()
    }

    pub fn mean(&self) -> f64 {
        self.weight * self.first + (1.0 - self.weight) * self.second
    }

    /// Expectation of `f` over the support.
    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        if self.is_point() {
            f(self.first)
        } else {
            self.weight * f(self.first) + (1.0 - self.weight) * f(self.second)
        }
    }

    /// Draws one support point. Always consumes exactly one uniform draw so
    /// that replay stays aligned regardless of the branch taken.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if u < self.weight {
            self.first
        } else {
            self.second
        }
    }
}

/// Vector-outcome analogue. The solver ladder returns point predictions, so
/// this is a single point plus the achieved variational-inequality residual.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorPrediction {
    pub point: Vec<f64>,
    pub residual: f64,
    pub approximate: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn expectation_matches_mixture() {
        let d = PredictionDistribution::two_point(0.2, 0.8, 0.25);
        assert!((d.mean() - (0.25 * 0.2 + 0.75 * 0.8)).abs() < 1e-15);
        let e = d.expect(|p| p * p);
        assert!((e - (0.25 * 0.04 + 0.75 * 0.64)).abs() < 1e-15);
    }

    #[test]
    fn sampling_consumes_one_draw() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let point = PredictionDistribution::point(0.5);
        let pair = PredictionDistribution::two_point(0.4, 0.6, 0.5);
        point.sample(&mut a);
        pair.sample(&mut b);
        // Both consumed exactly one draw, streams stay aligned.
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }
}
