use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::chacha;

/// `F(w) = ½ (w − c)ᵀ A (w − c)` with `A` symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl Quadratic {
    pub fn value(&self, w: &DVector<f64>) -> f64 {
        let r = w - &self.c;
        0.5 * r.dot(&(&self.a * &r))
    }

    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.a * (w - &self.c)
    }
}

/// Per-user quadratics with bounded additive gradient noise of
/// `E‖ξ_u‖² = σ_u²` (uniform per coordinate), and the constants of the
/// convergence bound computed in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct StronglyConvexProblem {
    pub users: Vec<Quadratic>,
    pub sigma: Vec<f64>,
    /// Smallest eigenvalue over all `A_u`.
    pub mu: f64,
    /// Largest eigenvalue over all `A_u`.
    pub l_smooth: f64,
    pub w_opt: DVector<f64>,
    /// `F(w_opt) − (1/U) Σ_u min F_u`; every `min F_u` is zero.
    pub gamma_gap: f64,
}

impl StronglyConvexProblem {
    pub fn new(users: Vec<Quadratic>, sigma: Vec<f64>) -> Result<Self> {
        if users.is_empty() || users.len() != sigma.len() {
            return Err(Error::Usage("need one noise level per user and at least one user".into()));
        }
        let m = users[0].c.len();
        let (mut mu, mut l_smooth) = (f64::INFINITY, 0.0f64);
        let mut a_sum = DMatrix::zeros(m, m);
        let mut b_sum = DVector::zeros(m);
        for q in &users {
            if q.a.nrows() != m || q.a.ncols() != m || q.c.len() != m {
                return Err(Error::Usage("all quadratics must share one dimension".into()));
            }
            if (&q.a - q.a.transpose()).amax() > 1e-12 * q.a.amax() {
                return Err(Error::Usage("curvature matrices must be symmetric".into()));
            }
            let eig = q.a.clone().symmetric_eigen().eigenvalues;
            mu = mu.min(eig.min());
            l_smooth = l_smooth.max(eig.max());
            a_sum += &q.a;
            b_sum += &q.a * &q.c;
        }
        if !(mu > 0.0) {
            return Err(Error::Usage(format!("objectives must be strongly convex, smallest eigenvalue {mu}")));
        }
        if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Usage("noise levels must be finite and non-negative".into()));
        }
        let w_opt = a_sum
            .lu()
            .solve(&b_sum)
            .ok_or_else(|| Error::Numeric("singular aggregate curvature".into()))?;
        let mut p = Self { users, sigma, mu, l_smooth, w_opt, gamma_gap: 0.0 };
        p.gamma_gap = p.value(&p.w_opt.clone()).max(0.0);
        Ok(p)
    }

    /// `U` users in dimension `m`: random rotations of a spectrum spread over
    /// `[mu, l_smooth]` (both endpoints attained), centres drawn from
    /// `N(0, I)`, equal noise `sigma`.
    pub fn random(m: usize, users: usize, mu: f64, l_smooth: f64, sigma: f64, seed: u64) -> Result<Self> {
        let mut rng = chacha(seed);
        let qs = (0..users)
            .map(|_| {
                let a = random_spd(&mut rng, m, mu, l_smooth);
                let c = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                Quadratic { a, c }
            })
            .collect();
        Self::new(qs, vec![sigma; users])
    }

    /// Shared centre and no gradient noise, so `Γ = 0` and `σ_u = 0`.
    pub fn homogeneous(m: usize, users: usize, mu: f64, l_smooth: f64, seed: u64) -> Result<Self> {
        let mut rng = chacha(seed);
        let c = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qs = (0..users).map(|_| Quadratic { a: random_spd(&mut rng, m, mu, l_smooth), c: c.clone() }).collect();
        Self::new(qs, vec![0.0; users])
    }

    pub fn dim(&self) -> usize {
        self.w_opt.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Global objective `(1/U) Σ_u F_u(w)`.
    pub fn value(&self, w: &DVector<f64>) -> f64 {
        self.users.iter().map(|q| q.value(w)).sum::<f64>() / self.users.len() as f64
    }

    pub fn optimum_value(&self) -> f64 {
        self.value(&self.w_opt)
    }

    pub fn kappa(&self) -> f64 {
        self.l_smooth / self.mu
    }

    /// Stochastic gradient of user `u`: exact gradient plus zero-mean
    /// uniform noise with `E‖ξ‖² = σ_u²`.
    pub fn stochastic_gradient(&self, u: usize, w: &DVector<f64>, rng: &mut impl Rng) -> DVector<f64> {
        let mut g = self.users[u].gradient(w);
        let half_width = (3.0 * self.sigma[u] * self.sigma[u] / self.dim() as f64).sqrt();
        if half_width > 0.0 {
            for v in g.iter_mut() {
                *v += rng.random_range(-half_width..half_width);
            }
        }
        g
    }

    /// Sure bound on `‖ξ_u‖`.
    pub fn noise_bound(&self, u: usize) -> f64 {
        (3.0 * self.sigma[u] * self.sigma[u]).sqrt()
    }
}

fn random_spd(rng: &mut impl Rng, m: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let spectrum = DVector::from_fn(m, |i, _| {
        if m == 1 || i == 0 {
            lo
        } else if i == m - 1 {
            hi
        } else {
            rng.random_range(lo..hi)
        }
    });
    let a = &q * DMatrix::from_diagonal(&spectrum) * q.transpose();
    (&a + a.transpose()) * 0.5
}
