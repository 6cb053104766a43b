//! Vector-outcome prediction with matrix-valued kernels over a box.
//!
//! The round field is `S_t(p) = sum_{i<t} K((x_t,p),(x_i,p_i))(y_i - p_i)`
//! (no self term). A prediction is acceptable when the linear maximization of
//! `(y - p)^T S_t(p)` over the box is nonpositive; the solver ladder is:
//!
//! (a) kernels that ignore p: S is constant, so the bang-bang point solves
//!     the variational inequality exactly (residual 0);
//! (b) damped projected iteration `p <- clamp(p + eta_k S(p))` with
//!     `eta_k = D / (B sqrt(k))`, accepted at residual <= eps_t;
//! (c) on failure, the best iterate is returned flagged approximate and the
//!     achieved residual is recorded so downstream bounds can widen.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::dist::VectorPrediction;
use crate::error::{Error, Result};
use crate::online::epsilon;
use crate::transcript::{VectorRound, VectorTranscript};

/// A point with a vector-valued prediction.
#[derive(Clone, Debug)]
pub struct VPoint<X> {
    pub features: X,
    pub prediction: Vec<f64>,
}

impl<X> VPoint<X> {
    pub fn new(features: X, prediction: Vec<f64>) -> Self {
        VPoint { features, prediction }
    }
}

pub type MatrixFn<X> = Arc<dyn Fn(&VPoint<X>, &VPoint<X>) -> Result<DMatrix<f64>> + Send + Sync>;

/// Matrix-valued kernel: K(z, z') = K(z', z)^T and every block Gram matrix is
/// positive semidefinite.
#[derive(Clone)]
pub struct MatrixKernel<X> {
    eval: MatrixFn<X>,
    dim: usize,
    depends_on_p: bool,
    op_norm_bound: Option<f64>,
    desc: String,
}

impl<X> MatrixKernel<X> {
    pub fn from_fn(desc: &str, dim: usize, depends_on_p: bool, op_norm_bound: Option<f64>, eval: MatrixFn<X>) -> Self {
        MatrixKernel { eval, dim, depends_on_p, op_norm_bound, desc: desc.to_string() }
    }

    pub fn evaluate(&self, a: &VPoint<X>, b: &VPoint<X>) -> Result<DMatrix<f64>> {
        let m = (self.eval)(a, b)?;
        if m.nrows() != self.dim || m.ncols() != self.dim {
            return Err(Error::Eval(format!(
                "matrix kernel returned {}x{}, expected {}x{}",
                m.nrows(),
                m.ncols(),
                self.dim,
                self.dim
            )));
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depends_on_p(&self) -> bool {
        self.depends_on_p
    }

    pub fn op_norm_bound(&self) -> Option<f64> {
        self.op_norm_bound
    }

    pub fn describe(&self) -> &str {
        &self.desc
    }

    pub fn config_hash(&self) -> u64 {
        crate::kernel::fnv1a(self.desc.as_bytes())
    }

    /// k(x, x') * I for a feature-only scalar kernel.
    pub fn scalar_identity(
        desc: &str,
        dim: usize,
        bound: Option<f64>,
        k: Arc<dyn Fn(&X, &X) -> Result<f64> + Send + Sync>,
    ) -> Self
    where
        X: 'static,
    {
        let eval: MatrixFn<X> = Arc::new(move |a: &VPoint<X>, b: &VPoint<X>| {
            let v = k(&a.features, &b.features)?;
            Ok(DMatrix::from_diagonal_element(dim, dim, v))
        });
        MatrixKernel::from_fn(desc, dim, false, bound, eval)
    }

    /// Gaussian kernel over features and predictions, times the identity.
    pub fn gaussian_identity(dim: usize) -> Self
    where
        X: AsRef<[f64]> + 'static,
    {
        let eval: MatrixFn<X> = Arc::new(move |a: &VPoint<X>, b: &VPoint<X>| {
            let dx: f64 = a
                .features
                .as_ref()
                .iter()
                .zip(b.features.as_ref())
                .map(|(u, v)| (u - v) * (u - v))
                .sum();
            let dp: f64 =
                a.prediction.iter().zip(&b.prediction).map(|(u, v)| (u - v) * (u - v)).sum();
            Ok(DMatrix::from_diagonal_element(dim, dim, (-(dx + dp)).exp()))
        });
        MatrixKernel::from_fn(&format!("(vgaussian {dim})"), dim, true, Some(1.0), eval)
    }

    /// Rank-structured kernel over a finite family of vector-valued
    /// functions: K(z, z') = sum_i c_i(z) c_i(z')^T. Block-PSD by
    /// construction.
    pub fn finite_vector_family(
        dim: usize,
        depends_on_p: bool,
        declared_bound: f64,
        family: Vec<Arc<dyn Fn(&VPoint<X>) -> Result<Vec<f64>> + Send + Sync>>,
        desc: &str,
    ) -> Self
    where
        X: 'static,
    {
        let eval: MatrixFn<X> = Arc::new(move |a: &VPoint<X>, b: &VPoint<X>| {
            let mut m = DMatrix::zeros(dim, dim);
            for c in &family {
                let ca = c(a)?;
                let cb = c(b)?;
                if ca.len() != dim || cb.len() != dim {
                    return Err(Error::Eval("family member returned wrong dimension".into()));
                }
                for r in 0..dim {
                    for s in 0..dim {
                        m[(r, s)] += ca[r] * cb[s];
                    }
                }
            }
            Ok(m)
        });
        MatrixKernel::from_fn(desc, dim, depends_on_p, Some(declared_bound), eval)
    }
}

/// Compact box outcome set with componentwise bounds.
#[derive(Clone, Debug)]
pub struct OutcomeBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl OutcomeBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::domain("box bounds must be nonempty and of equal dimension"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::domain("box requires lower < upper componentwise"));
        }
        Ok(OutcomeBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Squared Euclidean diameter ||upper - lower||^2.
    pub fn diameter_sq(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l) * (u - l)).sum()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn clamp(&self, p: &mut [f64]) {
        for ((v, l), u) in p.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter().zip(&self.lower).zip(&self.upper).all(|((v, l), u)| *v >= *l && *v <= *u)
    }
}

/// Exact linear maximization of (y - p)^T s over the box: the closed form
/// sums the per-coordinate maxima at the box faces.
pub fn vi_residual(p: &[f64], s: &[f64], bounds: &OutcomeBox) -> Result<f64> {
    if p.len() != bounds.dim() || s.len() != bounds.dim() {
        return Err(Error::domain("dimension mismatch in vi_residual"));
    }
    if !bounds.contains(p) {
        return Err(Error::domain("prediction outside the outcome box"));
    }
    let mut acc = 0.0;
    for k in 0..p.len() {
        acc += ((bounds.upper[k] - p[k]) * s[k]).max((bounds.lower[k] - p[k]) * s[k]);
    }
    Ok(acc)
}

fn op_norm(m: &DMatrix<f64>) -> f64 {
    // K(z,z) is symmetric; the operator norm is the largest |eigenvalue|.
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.iter().fold(0.0f64, |a, &e| a.max(e.abs()))
}

pub struct VectorPredictor<X> {
    kernel: MatrixKernel<X>,
    bounds: OutcomeBox,
    xs: Vec<X>,
    ps: Vec<Vec<f64>>,
    residual_vecs: Vec<Vec<f64>>, // y_i - p_i
    b_max: f64,
    max_iter: usize,
    residual_sum: f64,
}

impl<X: Clone> VectorPredictor<X> {
    pub fn new(kernel: MatrixKernel<X>, bounds: OutcomeBox) -> Result<Self> {
        if kernel.dim() != bounds.dim() {
            return Err(Error::domain("kernel and box dimensions differ"));
        }
        Ok(VectorPredictor {
            kernel,
            bounds,
            xs: Vec::new(),
            ps: Vec::new(),
            residual_vecs: Vec::new(),
            b_max: 0.0,
            max_iter: 500,
            residual_sum: 0.0,
        })
    }

    pub fn round(&self) -> usize {
        self.xs.len() + 1
    }

    pub fn bounds(&self) -> &OutcomeBox {
        &self.bounds
    }

    pub fn kernel(&self) -> &MatrixKernel<X> {
        &self.kernel
    }

    /// Sum of recorded per-round residuals; downstream bounds widen by twice
    /// this amount.
    pub fn residual_sum(&self) -> f64 {
        self.residual_sum
    }

    /// S_t(p): exact O(t d^2) evaluation.
    pub fn s_function(&self, x: &X, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.bounds.dim() {
            return Err(Error::domain("prediction dimension mismatch"));
        }
        let d = self.bounds.dim();
        let a = VPoint::new(x.clone(), p.to_vec());
        let mut s = vec![0.0; d];
        for (i, xi) in self.xs.iter().enumerate() {
            let b = VPoint::new(xi.clone(), self.ps[i].clone());
            let m = self.kernel.evaluate(&a, &b)?;
            let r = &self.residual_vecs[i];
            for row in 0..d {
                let mut acc = 0.0;
                for col in 0..d {
                    acc += m[(row, col)] * r[col];
                }
                s[row] += acc;
            }
        }
        Ok(s)
    }

    fn bang_bang(&self, s: &[f64]) -> Vec<f64> {
        let mut p = Vec::with_capacity(s.len());
        for (k, &sk) in s.iter().enumerate() {
            p.push(if sk > 0.0 {
                self.bounds.upper[k]
            } else if sk < 0.0 {
                self.bounds.lower[k]
            } else {
                0.5 * (self.bounds.lower[k] + self.bounds.upper[k])
            });
        }
        p
    }

    /// Solver ladder for the round's variational inequality.
    pub fn predict(&mut self, x: &X) -> Result<VectorPrediction> {
        let t = self.round();

        if !self.kernel.depends_on_p() {
            // S constant in p: bang-bang is exact.
            let s = self.s_function(x, &self.bounds.midpoint())?;
            let p = self.bang_bang(&s);
            let diag = self.kernel.evaluate(&VPoint::new(x.clone(), p.clone()), &VPoint::new(x.clone(), p.clone()))?;
            self.b_max = self.b_max.max(op_norm(&diag));
            let residual = vi_residual(&p, &s, &self.bounds)?;
            return Ok(VectorPrediction { point: p, residual: residual.min(0.0), approximate: false });
        }

        // Damped projected iteration.
        let d = self.bounds.diameter_sq();
        let mut p = self.bounds.midpoint();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for iter in 1..=self.max_iter {
            let s = self.s_function(x, &p)?;
            let zp = VPoint::new(x.clone(), p.clone());
            let diag = self.kernel.evaluate(&zp, &zp)?;
            self.b_max = self.b_max.max(op_norm(&diag));
            let eps = epsilon(t, self.b_max);
            let residual = vi_residual(&p, &s, &self.bounds)?;
            if best.as_ref().map(|(r, _)| residual < *r).unwrap_or(true) {
                best = Some((residual, p.clone()));
            }
            if residual <= eps {
                return Ok(VectorPrediction { point: p, residual, approximate: false });
            }
            let b = self.kernel.op_norm_bound().unwrap_or(self.b_max).max(1e-12);
            let eta = d / (b * (iter as f64).sqrt());
            for (pk, sk) in p.iter_mut().zip(&s) {
                *pk += eta * sk;
            }
            self.bounds.clamp(&mut p);
        }
        let (residual, point) = best.expect("at least one iterate");
        Ok(VectorPrediction { point, residual, approximate: true })
    }

    /// Plays one round; the callback must return an outcome inside the box.
    pub fn step(
        &mut self,
        x: X,
        x_ref: u64,
        mut nature: impl FnMut(&X, &VectorPrediction) -> Result<Vec<f64>>,
    ) -> Result<VectorRound<X>> {
        let t = self.round();
        let pred = self.predict(&x)?;
        let y = nature(&x, &pred)?;
        if !self.bounds.contains(&y) {
            return Err(Error::protocol(t, "outcome outside the box".to_string()));
        }
        let residual_vec: Vec<f64> = y.iter().zip(&pred.point).map(|(yi, pi)| yi - pi).collect();
        self.residual_sum += pred.residual.max(0.0);
        let round = VectorRound {
            features: x.clone(),
            x_ref,
            prediction: pred.point.clone(),
            outcome: y,
            residual: pred.residual,
            approximate: pred.approximate,
        };
        self.xs.push(x);
        self.ps.push(pred.point);
        self.residual_vecs.push(residual_vec);
        Ok(round)
    }

    pub fn into_transcript(self, rounds: Vec<VectorRound<X>>, seed: u64) -> VectorTranscript<X> {
        VectorTranscript {
            rounds,
            seed,
            kernel_desc: self.kernel.describe().to_string(),
            kernel_hash: self.kernel.config_hash(),
            dim: self.bounds.dim(),
        }
    }
}
