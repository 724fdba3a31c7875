use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Environment, EnvironmentBundle};
use crate::linalg::{cholesky_spd, sample_mvn};
use crate::{Error, Result};

/// Spurious-feature parameters of one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousEnv {
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

/// Anti-causal setting: `y ~ Bernoulli(eta)`, `x_ns | y ~ N((y - 1/2) mu_ns, sigma_ns)`
/// shared by all environments and `x_sp | y ~ N((y - 1/2) mu_i, sigma_i)` per environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEnvSpecA {
    pub eta: f64,
    pub mu_ns: Vec<f64>,
    pub sigma_ns: Vec<Vec<f64>>,
    pub envs: Vec<SpuriousEnv>,
}

/// Causal features under covariate shift plus anti-causal spurious features:
/// `x_c ~ N(mu_c, sigma_c)`, `y = w_c* . x_c + xi`, `x_sp = y mu_sp + eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEnvSpecB {
    pub w_c_star: Vec<f64>,
    pub sigma_y2: f64,
    pub envs: Vec<CausalEnv>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEnv {
    pub mu_c: Vec<f64>,
    pub sigma_c: Vec<Vec<f64>>,
    pub mu_sp: Vec<f64>,
    pub sigma_sp: Vec<Vec<f64>>,
}

/// Two-Bit environment: `Y ~ Rad(1/2)`, `X1 = Y Rad(alpha)`, `X2 = Y Rad(beta)`,
/// where `Rad(d)` is `-1` with probability `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoBitEnvSpec {
    pub alpha: f64,
    pub beta: f64,
}

pub(crate) fn matrix(rows: &[Vec<f64>], n: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Spec(format!("{name} must be {n}x{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn env_rng(seed: u64, env_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(env_index as u64);
    rng
}

fn env_id(i: usize) -> String {
    format!("e{i}")
}

struct PreparedA {
    mu_ns: DVector<f64>,
    chol_ns: DMatrix<f64>,
    envs: Vec<(DVector<f64>, DMatrix<f64>)>,
}

impl GaussianEnvSpecA {
    pub fn d_ns(&self) -> usize {
        self.mu_ns.len()
    }

    pub fn d_sp(&self) -> usize {
        self.envs.first().map_or(0, |e| e.mu.len())
    }

    pub fn k(&self) -> usize {
        self.envs.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.prepare().map(|_| ())
    }

    fn prepare(&self) -> Result<PreparedA> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Spec(format!(
                "eta must lie in [0,1], got {}",
                self.eta
            )));
        }
        let (dns, dsp) = (self.d_ns(), self.d_sp());
        if dns == 0 || dsp == 0 || self.envs.is_empty() {
            return Err(Error::Spec(
                "need d_ns >= 1, d_sp >= 1 and at least one environment".into(),
            ));
        }
        let chol_ns = cholesky_spd(&matrix(&self.sigma_ns, dns, "sigma_ns")?, "sigma_ns")?;
        let envs = self
            .envs
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let name = format!("sigma_sp[{i}]");
                if e.mu.len() != dsp {
                    return Err(Error::Spec(format!("mu_sp[{i}] must have length {dsp}")));
                }
                let l = cholesky_spd(&matrix(&e.sigma, dsp, &name)?, &name)?;
                Ok((DVector::from_column_slice(&e.mu), l))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedA {
            mu_ns: DVector::from_column_slice(&self.mu_ns),
            chol_ns,
            envs,
        })
    }

    /// Random spec with `k` environments.
    ///
    /// With `spurious_strength = 0` the spurious means are `N(0, I)`. Otherwise
    /// environment `i` gets `c_i * s * |mu_ns| * u + 0.3 |mu_ns| N(0, I)` for a
    /// random unit direction `u`, where the multipliers `c_i` are spaced evenly
    /// over `[-1, 3]`. On average the spurious mean is `s` times longer than
    /// the invariant one, but its strength and sign vary across environments.
    pub fn sample<R: Rng + ?Sized>(
        d_ns: usize,
        d_sp: usize,
        k: usize,
        spurious_strength: f64,
        rng: &mut R,
    ) -> Self {
        let mu_ns = normal_vec(d_ns, 1.0, rng);
        let ns_norm = mu_ns.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut dir = normal_vec(d_sp, 1.0, rng);
        let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        dir.iter_mut().for_each(|v| *v /= dn);
        let envs = (0..k)
            .map(|i| {
                let noise = normal_vec(d_sp, 1.0, rng);
                let mu = if spurious_strength == 0.0 {
                    noise
                } else {
                    let c = if k > 1 {
                        -1.0 + 4.0 * i as f64 / (k - 1) as f64
                    } else {
                        1.0
                    };
                    dir.iter()
                        .zip(&noise)
                        .map(|(u, z)| ns_norm * (c * spurious_strength * u + 0.3 * z))
                        .collect()
                };
                SpuriousEnv {
                    mu,
                    sigma: random_spd(d_sp, rng),
                }
            })
            .collect();
        Self {
            eta: 0.5,
            mu_ns,
            sigma_ns: random_spd(d_ns, rng),
            envs,
        }
    }
}

struct PreparedB {
    w: DVector<f64>,
    envs: Vec<(DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>)>,
}

impl GaussianEnvSpecB {
    pub fn d_c(&self) -> usize {
        self.w_c_star.len()
    }

    pub fn d_sp(&self) -> usize {
        self.envs.first().map_or(0, |e| e.mu_sp.len())
    }

    pub fn k(&self) -> usize {
        self.envs.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.prepare().map(|_| ())
    }

    fn prepare(&self) -> Result<PreparedB> {
        if !(self.sigma_y2 >= 0.0) || !self.sigma_y2.is_finite() {
            return Err(Error::Spec(format!(
                "sigma_y2 must be >= 0, got {}",
                self.sigma_y2
            )));
        }
        let (dc, dsp) = (self.d_c(), self.d_sp());
        if dc == 0 || dsp == 0 || self.envs.is_empty() {
            return Err(Error::Spec(
                "need d_c >= 1, d_sp >= 1 and at least one environment".into(),
            ));
        }
        let envs = self
            .envs
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if e.mu_c.len() != dc || e.mu_sp.len() != dsp {
                    return Err(Error::Spec(format!(
                        "environment {i}: mean dimension mismatch"
                    )));
                }
                let nc = format!("sigma_c[{i}]");
                let ns = format!("sigma_sp[{i}]");
                let lc = cholesky_spd(&matrix(&e.sigma_c, dc, &nc)?, &nc)?;
                let ls = cholesky_spd(&matrix(&e.sigma_sp, dsp, &ns)?, &ns)?;
                Ok((
                    DVector::from_column_slice(&e.mu_c),
                    lc,
                    DVector::from_column_slice(&e.mu_sp),
                    ls,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedB {
            w: DVector::from_column_slice(&self.w_c_star),
            envs,
        })
    }

    /// Random spec with `k` environments; all parameters drawn from standard normals
    /// and covariances from [`random_spd`].
    pub fn sample<R: Rng + ?Sized>(d_c: usize, d_sp: usize, k: usize, rng: &mut R) -> Self {
        let w_c_star = normal_vec(d_c, 1.0, rng);
        let envs = (0..k)
            .map(|_| CausalEnv {
                mu_c: normal_vec(d_c, 1.0, rng),
                sigma_c: random_spd(d_c, rng),
                mu_sp: normal_vec(d_sp, 1.0, rng),
                sigma_sp: random_spd(d_sp, rng),
            })
            .collect();
        Self {
            w_c_star,
            sigma_y2: 0.5,
            envs,
        }
    }
}

impl TwoBitEnvSpec {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let s = Self { alpha, beta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Spec(format!(
                "two-bit flip probabilities must lie in [0,1], got ({}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn normal_vec<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `B B^T + 0.5 I` with `B_ij ~ N(0, 0.5^2)`: eigenvalues bounded below by 0.5.
pub(crate) fn random_spd<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let b = DMatrix::from_fn(n, n, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    let m = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
    // exact symmetry
    (0..n)
        .map(|i| (0..n).map(|j| 0.5 * (m[(i, j)] + m[(j, i)])).collect())
        .collect()
}

pub fn generate_setting_a(
    spec: &GaussianEnvSpecA,
    n_per_env: usize,
    seed: u64,
) -> Result<EnvironmentBundle> {
    if n_per_env == 0 {
        return Err(Error::InvalidArgument("n_per_env must be >= 1".into()));
    }
    let p = spec.prepare()?;
    let zero_sp = DVector::zeros(spec.d_sp());
    let envs = p
        .envs
        .iter()
        .enumerate()
        .map(|(i, (mu, chol))| {
            let mut rng = env_rng(seed, i);
            let mut features = Vec::with_capacity(n_per_env);
            let mut labels = Vec::with_capacity(n_per_env);
            for _ in 0..n_per_env {
                let y = if rng.random::<f64>() < spec.eta {
                    1.0
                } else {
                    0.0
                };
                let xns = sample_mvn(&(&p.mu_ns * (y - 0.5)), &p.chol_ns, &mut rng);
                let xsp = sample_mvn(&zero_sp, chol, &mut rng) + mu * (y - 0.5);
                features.push(xns.iter().chain(xsp.iter()).copied().collect());
                labels.push(y);
            }
            Environment {
                id: env_id(i),
                features,
                labels,
            }
        })
        .collect();
    EnvironmentBundle::new(envs)
}

pub fn generate_setting_b(
    spec: &GaussianEnvSpecB,
    n_per_env: usize,
    seed: u64,
) -> Result<EnvironmentBundle> {
    if n_per_env == 0 {
        return Err(Error::InvalidArgument("n_per_env must be >= 1".into()));
    }
    let p = spec.prepare()?;
    let sd = spec.sigma_y2.sqrt();
    let zero_sp = DVector::zeros(spec.d_sp());
    let envs = p
        .envs
        .iter()
        .enumerate()
        .map(|(i, (mu_c, lc, mu_sp, ls))| {
            let mut rng = env_rng(seed, i);
            let mut features = Vec::with_capacity(n_per_env);
            let mut labels = Vec::with_capacity(n_per_env);
            for _ in 0..n_per_env {
                let xc = sample_mvn(mu_c, lc, &mut rng);
                let xi: f64 = rng.sample(StandardNormal);
                let y = p.w.dot(&xc) + sd * xi;
                let xsp = sample_mvn(&zero_sp, ls, &mut rng) + mu_sp * y;
                features.push(xc.iter().chain(xsp.iter()).copied().collect());
                labels.push(y);
            }
            Environment {
                id: env_id(i),
                features,
                labels,
            }
        })
        .collect();
    EnvironmentBundle::new(envs)
}

fn rad<R: Rng + ?Sized>(delta: f64, rng: &mut R) -> f64 {
    if rng.random::<f64>() < delta {
        -1.0
    } else {
        1.0
    }
}

fn two_bit_rows<R: Rng + ?Sized>(
    spec: &TwoBitEnvSpec,
    n: usize,
    rng: &mut R,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rad(0.5, rng);
        let x1 = y * rad(spec.alpha, rng);
        let x2 = y * rad(spec.beta, rng);
        features.push(vec![x1, x2]);
        labels.push(if y > 0.0 { 1.0 } else { 0.0 });
    }
    (features, labels)
}

/// Sample `n` Two-Bit rows: features in `{-1, +1}^2`, labels mapped to `{0, 1}`.
pub fn generate_two_bit(
    spec: &TwoBitEnvSpec,
    n: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    Ok(two_bit_rows(spec, n, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// One bundle with an independent RNG stream per Two-Bit environment.
pub fn two_bit_bundle(
    envs: &[(String, TwoBitEnvSpec)],
    n: usize,
    seed: u64,
) -> Result<EnvironmentBundle> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let envs = envs
        .iter()
        .enumerate()
        .map(|(i, (id, spec))| {
            spec.validate()?;
            let (features, labels) = two_bit_rows(spec, n, &mut env_rng(seed, i));
            Ok(Environment {
                id: id.clone(),
                features,
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EnvironmentBundle::new(envs)
}

/// Exact Bayes posterior `P(Y = +1 | X1 = x1, X2 = x2)`.
///
/// Patterns of probability zero (e.g. `alpha = 0` with `x1`, `x2` disagreeing
/// and `beta = 0`) return 1/2.
pub fn two_bit_posterior(spec: &TwoBitEnvSpec, x1: f64, x2: f64) -> Result<f64> {
    spec.validate()?;
    let q = |x: f64, delta: f64| -> Result<f64> {
        if x == 1.0 {
            Ok(1.0 - delta)
        } else if x == -1.0 {
            Ok(delta)
        } else {
            Err(Error::InvalidArgument(format!(
                "two-bit features must be +-1, got {x}"
            )))
        }
    };
    let (q1, q2) = (q(x1, spec.alpha)?, q(x2, spec.beta)?);
    let num = q1 * q2;
    let den = num + (1.0 - q1) * (1.0 - q2);
    Ok(if den > 0.0 { num / den } else { 0.5 })
}
