//! Kernel abstraction, the scalar kernel catalog, and composition combinators.
//!
//! A [`Kernel`] is a symmetric positive-semidefinite similarity function over
//! [`Point`]s (features paired with a prediction). Kernels are pure values:
//! cloning is cheap and evaluation never mutates, so they can be shared across
//! threads freely. Positive semidefiniteness is enforced structurally by the
//! combinators and statistically by the Gram eigenvalue test in
//! [`GramMatrix::psd_ok`].

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A point in the evaluation domain: opaque features paired with a prediction.
#[derive(Clone, Debug)]
pub struct Point<X> {
    pub features: X,
    pub prediction: f64,
}

impl<X> Point<X> {
    pub fn new(features: X, prediction: f64) -> Self {
        Point { features, prediction }
    }
}

pub type XFn<X> = Arc<dyn Fn(&X, &X) -> Result<f64> + Send + Sync>;
pub type XPFn<X> = Arc<dyn Fn(&X, f64) -> Result<f64> + Send + Sync>;
pub type PairFn<X> = Arc<dyn Fn(&X, f64, &X, f64) -> Result<f64> + Send + Sync>;
pub type PFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

const SOBOLEV_DENOM: f64 = 2.0 * (std::f64::consts::E - 1.0 / std::f64::consts::E);

/// Sobolev kernel on the unit interval. The smaller argument goes into the
/// first factor, so the formula is written symmetrically.
pub fn sobolev_unit_kernel(p: f64, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("sobolev arguments must lie in [0,1], got ({p}, {q})")));
    }
    let (a, b) = if p <= q { (p, q) } else { (q, p) };
    Ok((a.exp() + (-a).exp()) * ((1.0 - b).exp() + (b - 1.0).exp()) / SOBOLEV_DENOM)
}

/// Index of the half-open grid bin containing `t in [0,1]`; the top bin
/// `[(n-1)/n, 1]` is closed.
fn grid_bin_index(t: f64, bins: u32) -> u32 {
    let n = bins as f64;
    if t >= (n - 1.0) / n {
        bins - 1
    } else {
        (t * n).floor() as u32
    }
}

/// Same-bin indicator on the unit-interval grid with `bins` cells.
pub fn grid_bin_kernel(p: f64, q: f64, bins: u32) -> Result<f64> {
    if bins == 0 {
        return Err(Error::domain("grid kernel needs at least one bin"));
    }
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("grid arguments must lie in [0,1], got ({p}, {q})")));
    }
    Ok(if grid_bin_index(p, bins) == grid_bin_index(q, bins) { 1.0 } else { 0.0 })
}

/// Low-degree monomial kernel over the +-1 hypercube, including the empty-set
/// (constant) term: sum over |S| <= d of prod_{i in S} x_i x'_i. Computed in
/// O(n d) via the elementary symmetric polynomial recurrence on z_i = x_i x'_i.
pub fn low_degree_boolean_kernel(x: &[f64], y: &[f64], d: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::domain(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if d > x.len() {
        return Err(Error::domain(format!("degree {} exceeds dimension {}", d, x.len())));
    }
    let mut e = vec![0.0; d + 1];
    e[0] = 1.0;
    for (xi, yi) in x.iter().zip(y) {
        if xi.abs() != 1.0 || yi.abs() != 1.0 {
            return Err(Error::domain("low-degree kernel inputs must have +-1 entries"));
        }
        let z = xi * yi;
        for k in (1..=d).rev() {
            e[k] += z * e[k - 1];
        }
    }
    Ok(e.iter().sum())
}

/// Kernels over the prediction coordinate only.
#[derive(Clone)]
pub enum PKernel {
    Const(f64),
    /// Sobolev kernel, affinely rescaled from `[lo, hi]` to the unit interval.
    Sobolev { lo: f64, hi: f64 },
    /// Same-bin grid indicator on `[lo, hi]`.
    Grid { bins: u32, lo: f64, hi: f64 },
    /// 1 + p p'
    Linear,
    /// exp(-|p - p'|)
    Laplace,
    /// exp(-(p - p')^2)
    Rbf,
    /// Rank-structured sum over a finite function family.
    Family(Vec<PFn>),
}

impl PKernel {
    fn normalize(&self, p: f64) -> Result<f64> {
        match self {
            PKernel::Sobolev { lo, hi } | PKernel::Grid { lo, hi, .. } => {
                let t = (p - lo) / (hi - lo);
                if !(-1e-12..=1.0 + 1e-12).contains(&t) {
                    return Err(Error::domain(format!("prediction {p} outside kernel domain [{lo}, {hi}]")));
                }
                Ok(t.clamp(0.0, 1.0))
            }
            _ => Ok(p),
        }
    }

    fn eval(&self, p: f64, q: f64) -> Result<f64> {
        match self {
            PKernel::Const(c) => Ok(*c),
            PKernel::Sobolev { .. } => sobolev_unit_kernel(self.normalize(p)?, self.normalize(q)?),
            PKernel::Grid { bins, .. } => grid_bin_kernel(self.normalize(p)?, self.normalize(q)?, *bins),
            PKernel::Linear => Ok(1.0 + p * q),
            PKernel::Laplace => Ok((-(p - q).abs()).exp()),
            PKernel::Rbf => Ok((-(p - q) * (p - q)).exp()),
            PKernel::Family(fs) => Ok(fs.iter().map(|f| f(p) * f(q)).sum()),
        }
    }

    fn continuous(&self) -> bool {
        !matches!(self, PKernel::Grid { .. } | PKernel::Family(_))
    }
}

#[derive(Clone)]
enum KernelImpl<X> {
    POnly(PKernel),
    XOnly(XFn<X>),
    /// sum_i f_i(x, p) f_i(x', p')
    Family(Vec<XPFn<X>>),
    Sum(Vec<Kernel<X>>),
    Product(Vec<Kernel<X>>),
    Scale(f64, Box<Kernel<X>>),
    Opaque(PairFn<X>),
}

/// A symmetric positive-semidefinite function over (features, prediction)
/// pairs, with continuity-in-p and diagonal-bound metadata.
#[derive(Clone)]
pub struct Kernel<X> {
    imp: KernelImpl<X>,
    continuous_in_p: bool,
    diag_bound: Option<f64>,
    cost_hint: f64,
    desc: String,
}

impl<X> std::fmt::Debug for Kernel<X> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kernel")
            .field("desc", &self.desc)
            .field("continuous_in_p", &self.continuous_in_p)
            .field("diag_bound", &self.diag_bound)
            .finish()
    }
}

impl<X> Kernel<X> {
    fn from_p(pk: PKernel, desc: String, diag_bound: Option<f64>) -> Self {
        let continuous = pk.continuous();
        Kernel { imp: KernelImpl::POnly(pk), continuous_in_p: continuous, diag_bound, cost_hint: 1.0, desc }
    }

    pub fn constant(c: f64) -> Self {
        Kernel::from_p(PKernel::Const(c), format!("(const {c})"), Some(c))
    }

    /// Sobolev kernel on predictions in [0,1]; diagonal below 3.
    pub fn sobolev() -> Self {
        Kernel::from_p(PKernel::Sobolev { lo: 0.0, hi: 1.0 }, "(sobolev)".into(), Some(3.0))
    }

    /// Sobolev kernel rescaled to predictions in `[lo, hi]`.
    pub fn sobolev_on(lo: f64, hi: f64) -> Self {
        Kernel::from_p(PKernel::Sobolev { lo, hi }, format!("(sobolev {lo} {hi})"), Some(3.0))
    }

    /// Same-bin grid indicator on predictions in [0,1].
    pub fn grid(bins: u32) -> Self {
        Kernel::from_p(PKernel::Grid { bins, lo: 0.0, hi: 1.0 }, format!("(grid {bins})"), Some(1.0))
    }

    pub fn grid_on(bins: u32, lo: f64, hi: f64) -> Self {
        Kernel::from_p(PKernel::Grid { bins, lo, hi }, format!("(grid {bins} {lo} {hi})"), Some(1.0))
    }

    /// 1 + p p' over predictions.
    pub fn linear_pred() -> Self {
        Kernel::from_p(PKernel::Linear, "(linear)".into(), Some(2.0))
    }

    /// exp(-|p - p'|) over predictions.
    pub fn laplace_pred() -> Self {
        Kernel::from_p(PKernel::Laplace, "(laplace)".into(), Some(1.0))
    }

    /// exp(-(p - p')^2) over predictions.
    pub fn rbf_pred() -> Self {
        Kernel::from_p(PKernel::Rbf, "(rbf)".into(), Some(1.0))
    }

    /// Rank-structured kernel over prediction-only functions.
    pub fn p_family(fs: Vec<PFn>, declared_bound: f64, desc: &str) -> Self {
        Kernel::from_p(PKernel::Family(fs), desc.to_string(), Some(declared_bound))
    }

    /// sum_i f_i(z) f_i(z') over a finite family of evaluable functions with
    /// caller-declared bound on sum_i f_i(z)^2.
    pub fn finite_family(fs: Vec<XPFn<X>>, declared_bound: f64, desc: &str) -> Self {
        Kernel {
            imp: KernelImpl::Family(fs),
            continuous_in_p: false,
            diag_bound: Some(declared_bound),
            cost_hint: 1.0,
            desc: desc.to_string(),
        }
    }

    /// Kernel depending on features only (constant in p, hence continuous).
    pub fn from_x_fn(desc: &str, diag_bound: Option<f64>, f: XFn<X>) -> Self {
        Kernel {
            imp: KernelImpl::XOnly(f),
            continuous_in_p: true,
            diag_bound,
            cost_hint: 1.0,
            desc: desc.to_string(),
        }
    }

    /// Fully custom kernel; the caller declares continuity in p.
    pub fn from_fn(desc: &str, continuous_in_p: bool, diag_bound: Option<f64>, f: PairFn<X>) -> Self {
        Kernel { imp: KernelImpl::Opaque(f), continuous_in_p, diag_bound, cost_hint: 1.0, desc: desc.to_string() }
    }

    /// Sum combinator; PSD is preserved, diagonal bounds add, continuity ANDs.
    pub fn sum(ks: Vec<Kernel<X>>) -> Self {
        let continuous = ks.iter().all(|k| k.continuous_in_p);
        let diag = ks.iter().map(|k| k.diag_bound).try_fold(0.0, |a, b| b.map(|b| a + b));
        let cost = ks.iter().map(|k| k.cost_hint).sum();
        let desc = format!("(sum {})", ks.iter().map(|k| k.desc.as_str()).collect::<Vec<_>>().join(" "));
        Kernel { imp: KernelImpl::Sum(ks), continuous_in_p: continuous, diag_bound: diag, cost_hint: cost, desc }
    }

    /// Pointwise product combinator; PSD by the Schur product theorem,
    /// diagonal bounds multiply, continuity ANDs.
    pub fn product(ks: Vec<Kernel<X>>) -> Self {
        let continuous = ks.iter().all(|k| k.continuous_in_p);
        let diag = ks.iter().map(|k| k.diag_bound).try_fold(1.0, |a, b| b.map(|b| a * b));
        let cost = ks.iter().map(|k| k.cost_hint).sum();
        let desc = format!("(product {})", ks.iter().map(|k| k.desc.as_str()).collect::<Vec<_>>().join(" "));
        Kernel { imp: KernelImpl::Product(ks), continuous_in_p: continuous, diag_bound: diag, cost_hint: cost, desc }
    }

    /// Nonnegative scaling; a negative factor would break PSD.
    pub fn scale(c: f64, k: Kernel<X>) -> Result<Self> {
        if c < 0.0 || !c.is_finite() {
            return Err(Error::domain(format!("scale factor must be nonnegative and finite, got {c}")));
        }
        let desc = format!("(scale {c} {})", k.desc);
        Ok(Kernel {
            continuous_in_p: k.continuous_in_p,
            diag_bound: k.diag_bound.map(|b| c * b),
            cost_hint: k.cost_hint,
            imp: KernelImpl::Scale(c, Box::new(k)),
            desc,
        })
    }

    pub fn evaluate(&self, a: &Point<X>, b: &Point<X>) -> Result<f64> {
        self.eval_parts(&a.features, a.prediction, &b.features, b.prediction)
    }

    fn eval_parts(&self, ax: &X, ap: f64, bx: &X, bp: f64) -> Result<f64> {
        match &self.imp {
            KernelImpl::POnly(pk) => pk.eval(ap, bp),
            KernelImpl::XOnly(f) => f(ax, bx),
            KernelImpl::Family(fs) => {
                let mut acc = 0.0;
                for f in fs {
                    acc += f(ax, ap)? * f(bx, bp)?;
                }
                Ok(acc)
            }
            KernelImpl::Sum(ks) => {
                let mut acc = 0.0;
                for k in ks {
                    acc += k.eval_parts(ax, ap, bx, bp)?;
                }
                Ok(acc)
            }
            KernelImpl::Product(ks) => {
                let mut acc = 1.0;
                for k in ks {
                    acc *= k.eval_parts(ax, ap, bx, bp)?;
                }
                Ok(acc)
            }
            KernelImpl::Scale(c, k) => Ok(c * k.eval_parts(ax, ap, bx, bp)?),
            KernelImpl::Opaque(f) => f(ax, ap, bx, bp),
        }
    }

    /// Diagonal value k(z, z).
    pub fn diag(&self, z: &Point<X>) -> Result<f64> {
        self.evaluate(z, z)
    }

    pub fn continuous_in_p(&self) -> bool {
        self.continuous_in_p
    }

    pub fn diag_bound(&self) -> Option<f64> {
        self.diag_bound
    }

    pub fn cost_hint(&self) -> f64 {
        self.cost_hint
    }

    pub fn describe(&self) -> &str {
        &self.desc
    }

    /// FNV-1a hash of the canonical description, used in transcript headers.
    pub fn config_hash(&self) -> u64 {
        fnv1a(self.desc.as_bytes())
    }

    pub fn with_diag_bound(mut self, b: f64) -> Self {
        self.diag_bound = Some(b);
        self
    }

    pub fn with_desc(mut self, desc: &str) -> Self {
        self.desc = desc.to_string();
        self
    }
}

/// Composition with a domain map: `k(phi(.), phi(.))`. The caller declares
/// whether `phi` is continuous in the prediction coordinate.
pub fn compose<X2, X: 'static>(
    base: Kernel<X>,
    phi: Arc<dyn Fn(&X2, f64) -> Point<X> + Send + Sync>,
    phi_continuous_in_p: bool,
    desc: &str,
) -> Kernel<X2> {
    let continuous = base.continuous_in_p() && phi_continuous_in_p;
    let diag = base.diag_bound();
    let f: PairFn<X2> = Arc::new(move |ax: &X2, ap: f64, bx: &X2, bp: f64| {
        let a = phi(ax, ap);
        let b = phi(bx, bp);
        base.evaluate(&a, &b)
    });
    Kernel::from_fn(desc, continuous, diag, f)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// Dense-feature catalog.

/// Inner product of dense feature vectors.
pub fn dot_features() -> Kernel<Vec<f64>> {
    Kernel::from_x_fn(
        "(xdot)",
        None,
        Arc::new(|x: &Vec<f64>, y: &Vec<f64>| {
            if x.len() != y.len() {
                return Err(Error::domain(format!("length mismatch: {} vs {}", x.len(), y.len())));
            }
            Ok(x.iter().zip(y).map(|(a, b)| a * b).sum())
        }),
    )
}

/// (1 + <x, x'>)^d over dense features.
pub fn polynomial(d: u32) -> Kernel<Vec<f64>> {
    Kernel::from_x_fn(
        &format!("(poly {d})"),
        None,
        Arc::new(move |x: &Vec<f64>, y: &Vec<f64>| {
            if x.len() != y.len() {
                return Err(Error::domain(format!("length mismatch: {} vs {}", x.len(), y.len())));
            }
            let s: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            Ok((1.0 + s).powi(d as i32))
        }),
    )
}

/// exp(-||x - x'||^2) over dense features.
pub fn gaussian() -> Kernel<Vec<f64>> {
    Kernel::from_x_fn(
        "(gaussian)",
        Some(1.0),
        Arc::new(|x: &Vec<f64>, y: &Vec<f64>| {
            if x.len() != y.len() {
                return Err(Error::domain(format!("length mismatch: {} vs {}", x.len(), y.len())));
            }
            let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((-s).exp())
        }),
    )
}

/// Low-degree monomial kernel over +-1 vectors of dimension `n`.
pub fn low_degree(n: usize, d: usize) -> Kernel<Vec<f64>> {
    let bound = 4.0 * (n as f64).powi(d as i32);
    Kernel::from_x_fn(
        &format!("(lowdeg {n} {d})"),
        Some(bound),
        Arc::new(move |x: &Vec<f64>, y: &Vec<f64>| {
            if x.len() != n || y.len() != n {
                return Err(Error::domain(format!("expected dimension {n}, got {} and {}", x.len(), y.len())));
            }
            low_degree_boolean_kernel(x, y, d)
        }),
    )
}

/// Gram matrix of a kernel over a point set, with the statistical PSD check.
pub struct GramMatrix<X> {
    pub entries: DMatrix<f64>,
    pub points: Vec<Point<X>>,
}

impl<X> GramMatrix<X> {
    pub fn build(kernel: &Kernel<X>, points: Vec<Point<X>>) -> Result<Self> {
        let n = points.len();
        let mut entries = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = kernel.evaluate(&points[i], &points[j])?;
                entries[(i, j)] = v;
                entries[(j, i)] = v;
            }
        }
        Ok(GramMatrix { entries, points })
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.entries.nrows() == 0 {
            return 0.0;
        }
        let eig = self.entries.clone().symmetric_eigen();
        eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    /// Minimum eigenvalue at least `-tol * (1 + trace)`.
    pub fn psd_ok(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol * (1.0 + self.trace())
    }
}

// Per-round evaluation plans.
//
// The online predictors evaluate S_t(p) = sum_i w_i k((x_t,p),(x_i,p_i)) many
// times per round with x_t and the history fixed. The plan flattens the
// kernel's combinator tree, folds feature-only factors into the weights once,
// and caches what the prediction-only parts allow (exponentials, grid bin
// sums, family coefficients).

pub(crate) enum PAux {
    None,
    /// Precomputed weighted sum for constant-in-p terms.
    Sum(f64),
    /// (sum w_i, sum w_i p_i) for the linear kernel.
    Lin(f64, f64),
    /// (e^{t_i}, e^{-t_i}) per history point, on the normalized domain.
    Exp(Vec<[f64; 2]>),
    /// Per-bin accumulated weights for the grid kernel.
    GridSums(Vec<f64>),
}

pub(crate) enum PlanTerm<'a, X> {
    Const { wsum: f64, diag: f64 },
    P { pk: &'a PKernel, weights: Vec<f64>, diag_coeff: f64, aux: PAux },
    Fam { funcs: &'a [XPFn<X>], gamma: Vec<f64>, scale: f64 },
    Opaque { k: &'a Kernel<X>, scale: f64 },
}

pub(crate) struct Plan<'a, X> {
    terms: Vec<PlanTerm<'a, X>>,
    x: &'a X,
    xs: &'a [X],
    ps: &'a [f64],
    ws: &'a [f64],
}

impl<'a, X> Plan<'a, X> {
    /// sum_i w_i k((x,p),(x_i,p_i))
    pub fn weighted(&self, p: f64) -> Result<f64> {
        let mut acc = 0.0;
        for term in &self.terms {
            acc += match term {
                PlanTerm::Const { wsum, .. } => *wsum,
                PlanTerm::P { pk, weights, aux, .. } => p_weighted(pk, p, self.ps, weights, aux)?,
                PlanTerm::Fam { funcs, gamma, scale } => {
                    let mut s = 0.0;
                    for (f, g) in funcs.iter().zip(gamma) {
                        s += f(self.x, p)? * g;
                    }
                    scale * s
                }
                PlanTerm::Opaque { k, scale } => {
                    let mut s = 0.0;
                    for ((xf, pf), w) in self.xs.iter().zip(self.ps).zip(self.ws) {
                        s += w * k.eval_parts(self.x, p, xf, *pf)?;
                    }
                    scale * s
                }
            };
        }
        Ok(acc)
    }

    /// k((x,p),(x,p))
    pub fn diag(&self, p: f64) -> Result<f64> {
        let mut acc = 0.0;
        for term in &self.terms {
            acc += match term {
                PlanTerm::Const { diag, .. } => *diag,
                PlanTerm::P { pk, diag_coeff, .. } => diag_coeff * pk.eval(p, p)?,
                PlanTerm::Fam { funcs, scale, .. } => {
                    let mut s = 0.0;
                    for f in funcs.iter() {
                        let v = f(self.x, p)?;
                        s += v * v;
                    }
                    scale * s
                }
                PlanTerm::Opaque { k, scale } => scale * k.eval_parts(self.x, p, self.x, p)?,
            };
        }
        Ok(acc)
    }
}

fn p_weighted(pk: &PKernel, p: f64, ps: &[f64], weights: &[f64], aux: &PAux) -> Result<f64> {
    match (pk, aux) {
        (_, PAux::Sum(s)) => Ok(*s),
        (PKernel::Linear, PAux::Lin(s0, s1)) => Ok(s0 + p * s1),
        (PKernel::Grid { bins, .. }, PAux::GridSums(sums)) => {
            let t = pk.normalize(p)?;
            Ok(sums[grid_bin_index(t, *bins) as usize])
        }
        (PKernel::Sobolev { .. }, PAux::Exp(exps)) => {
            let t = pk.normalize(p)?;
            let (u, v) = (t.exp(), (-t).exp());
            let e = std::f64::consts::E;
            let mut acc = 0.0;
            for (w, x) in weights.iter().zip(exps) {
                // x = (e^{t_i}, e^{-t_i}); the smaller argument takes the
                // (e^a + e^-a) factor. t <= t_i iff e^t <= e^{t_i}.
                acc += w * if u <= x[0] {
                    (u + v) * (e * x[1] + x[0] / e)
                } else {
                    (x[0] + x[1]) * (e * v + u / e)
                };
            }
            Ok(acc / SOBOLEV_DENOM)
        }
        (PKernel::Laplace, PAux::Exp(exps)) => {
            let (u, v) = (p.exp(), (-p).exp());
            let mut acc = 0.0;
            for (w, x) in weights.iter().zip(exps) {
                // e^{-|p - p_i|} = min(e^{p - p_i}, e^{p_i - p})
                acc += w * if u <= x[0] { u * x[1] } else { x[0] * v };
            }
            Ok(acc)
        }
        _ => {
            let mut acc = 0.0;
            for (w, pi) in weights.iter().zip(ps) {
                acc += w * pk.eval(p, *pi)?;
            }
            Ok(acc)
        }
    }
}

fn build_aux(pk: &PKernel, ps: &[f64], weights: &[f64]) -> Result<PAux> {
    Ok(match pk {
        PKernel::Const(c) => PAux::Sum(c * weights.iter().sum::<f64>()),
        PKernel::Linear => {
            let s0: f64 = weights.iter().sum();
            let s1: f64 = weights.iter().zip(ps).map(|(w, p)| w * p).sum();
            PAux::Lin(s0, s1)
        }
        PKernel::Grid { bins, .. } => {
            let mut sums = vec![0.0; *bins as usize];
            for (w, p) in weights.iter().zip(ps) {
                sums[grid_bin_index(pk.normalize(*p)?, *bins) as usize] += w;
            }
            PAux::GridSums(sums)
        }
        PKernel::Sobolev { .. } | PKernel::Laplace => {
            let mut exps = Vec::with_capacity(ps.len());
            for p in ps {
                let t = pk.normalize(*p)?;
                exps.push([t.exp(), (-t).exp()]);
            }
            PAux::Exp(exps)
        }
        _ => PAux::None,
    })
}

pub(crate) fn build_plan<'a, X>(
    kernel: &'a Kernel<X>,
    x: &'a X,
    xs: &'a [X],
    ps: &'a [f64],
    ws: &'a [f64],
) -> Result<Plan<'a, X>> {
    debug_assert_eq!(xs.len(), ps.len());
    debug_assert_eq!(xs.len(), ws.len());
    let mut terms = Vec::new();
    flatten(kernel, 1.0, x, xs, ps, ws, &mut terms)?;
    Ok(Plan { terms, x, xs, ps, ws })
}

fn flatten<'a, X>(
    k: &'a Kernel<X>,
    scale: f64,
    x: &X,
    xs: &[X],
    ps: &[f64],
    ws: &[f64],
    out: &mut Vec<PlanTerm<'a, X>>,
) -> Result<()> {
    match &k.imp {
        KernelImpl::Sum(ks) => {
            for child in ks {
                flatten(child, scale, x, xs, ps, ws, out)?;
            }
        }
        KernelImpl::Scale(c, inner) => flatten(inner, scale * c, x, xs, ps, ws, out)?,
        KernelImpl::POnly(pk) => {
            let weights: Vec<f64> = ws.iter().map(|w| scale * w).collect();
            let aux = build_aux(pk, ps, &weights)?;
            out.push(PlanTerm::P { pk, weights, diag_coeff: scale, aux });
        }
        KernelImpl::XOnly(f) => {
            let mut wsum = 0.0;
            for (xi, w) in xs.iter().zip(ws) {
                wsum += w * f(x, xi)?;
            }
            out.push(PlanTerm::Const { wsum: scale * wsum, diag: scale * f(x, x)? });
        }
        KernelImpl::Family(fs) => {
            let mut gamma = vec![0.0; fs.len()];
            for ((xi, pi), w) in xs.iter().zip(ps).zip(ws) {
                for (g, f) in gamma.iter_mut().zip(fs) {
                    *g += w * f(xi, *pi)?;
                }
            }
            out.push(PlanTerm::Fam { funcs: fs, gamma, scale });
        }
        KernelImpl::Product(_) => match expand_terms(k) {
            Some(parts) if parts.iter().all(|p| p.pks.len() <= 1) => {
                for part in parts {
                    // Fold feature-only factors into per-history coefficients.
                    let mut weights: Vec<f64> = ws.iter().map(|w| scale * part.scale * w).collect();
                    let mut diag_coeff = scale * part.scale;
                    for xf in &part.x_fns {
                        for (wi, xi) in weights.iter_mut().zip(xs) {
                            *wi *= xf(x, xi)?;
                        }
                        diag_coeff *= xf(x, x)?;
                    }
                    match part.pks.first() {
                        Some(pk) => {
                            let aux = build_aux(pk, ps, &weights)?;
                            out.push(PlanTerm::P { pk, weights, diag_coeff, aux });
                        }
                        None => {
                            let wsum = weights.iter().sum();
                            out.push(PlanTerm::Const { wsum, diag: diag_coeff });
                        }
                    }
                }
            }
            _ => out.push(PlanTerm::Opaque { k, scale }),
        },
        KernelImpl::Opaque(_) => out.push(PlanTerm::Opaque { k, scale }),
    }
    Ok(())
}

struct ProductParts<'a, X> {
    scale: f64,
    x_fns: Vec<&'a XFn<X>>,
    pks: Vec<&'a PKernel>,
}

/// Expands a kernel tree into a sum of products of feature-only and
/// prediction-only leaves, or `None` if it contains parts that do not factor.
fn expand_terms<X>(k: &Kernel<X>) -> Option<Vec<ProductParts<'_, X>>> {
    match &k.imp {
        KernelImpl::POnly(pk) => Some(vec![ProductParts { scale: 1.0, x_fns: vec![], pks: vec![pk] }]),
        KernelImpl::XOnly(f) => Some(vec![ProductParts { scale: 1.0, x_fns: vec![f], pks: vec![] }]),
        KernelImpl::Scale(c, inner) => {
            let mut parts = expand_terms(inner)?;
            for p in &mut parts {
                p.scale *= c;
            }
            Some(parts)
        }
        KernelImpl::Sum(ks) => {
            let mut all = Vec::new();
            for child in ks {
                all.extend(expand_terms(child)?);
            }
            Some(all)
        }
        KernelImpl::Product(ks) => {
            let mut acc = vec![ProductParts { scale: 1.0, x_fns: vec![], pks: vec![] }];
            for child in ks {
                let child_parts = expand_terms(child)?;
                let mut next = Vec::with_capacity(acc.len() * child_parts.len());
                for a in &acc {
                    for b in &child_parts {
                        next.push(ProductParts {
                            scale: a.scale * b.scale,
                            x_fns: a.x_fns.iter().chain(&b.x_fns).cloned().collect(),
                            pks: a.pks.iter().chain(&b.pks).cloned().collect(),
                        });
                    }
                }
                acc = next;
            }
            Some(acc)
        }
        KernelImpl::Family(_) | KernelImpl::Opaque(_) => None,
    }
}
