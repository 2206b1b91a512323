//! Monte Carlo machinery: plain estimation, two-level control variates with
//! optimal coefficient and sample allocation, and the multi-fidelity
//! estimator with optimal budget allocation.

use crate::error::{Error, Result};
use crate::types::{derive_seed, HomogenizedTensor};
use serde::{Deserialize, Serialize};

/// Scalar functional of a homogenised tensor used for variances and
/// correlations; the full matrix is still averaged and reported elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalarQoI {
    #[default]
    Entry11,
    Entry22,
    Entry12,
    Trace,
}

impl ScalarQoI {
    pub fn eval(&self, t: &HomogenizedTensor) -> f64 {
        match self {
            ScalarQoI::Entry11 => t.get(1, 1),
            ScalarQoI::Entry22 => t.get(2, 2),
            ScalarQoI::Entry12 => t.get(1, 2),
            ScalarQoI::Trace => t.get(1, 1) + t.get(2, 2),
        }
    }
}

/// Mean and unbiased sample variance of a slice; requires m ≥ 2.
pub fn sample_stats(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::SampleTooSmall(xs.len()));
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    Ok((mean, var))
}

/// Plain Monte Carlo estimate over m per-sample seeds derived from `seed`.
pub fn mc_estimate<F: FnMut(u64) -> f64>(
    mut sampler: F,
    m: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if m < 2 {
        return Err(Error::SampleTooSmall(m));
    }
    let samples: Vec<f64> = (0..m).map(|k| sampler(derive_seed(seed, k as u64))).collect();
    sample_stats(&samples)
}

/// Samples needed to push the estimator standard deviation below η:
/// ⌈variance / η²⌉, at least 1.
pub fn required_samples(variance: f64, eta: f64) -> Result<usize> {
    if eta <= 0.0 {
        return Err(Error::InvalidParameter(format!("tolerance {eta} must be positive")));
    }
    if variance < 0.0 {
        return Err(Error::InvalidParameter(format!("variance {variance} must be nonnegative")));
    }
    Ok(((variance / (eta * eta)).ceil() as usize).max(1))
}

/// Unbiased empirical covariance Σ(aᵢ−ā)(bᵢ−b̄)/(m−1).
pub fn empirical_cov(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidParameter(format!(
            "covariance sample lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::SampleTooSmall(a.len()));
    }
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    Ok(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64)
}

/// Variance-optimal control coefficient ρ = cov(Q,Z)/Var Z. When the Z
/// stream is longer, the covariance uses the paired prefix while Var Z uses
/// every Z sample.
pub fn cv_rho(q: &[f64], z: &[f64]) -> Result<f64> {
    let m = q.len().min(z.len());
    let cov = empirical_cov(&q[..m], &z[..m])?;
    let (_, var_z) = sample_stats(z)?;
    if var_z <= 0.0 {
        return Err(Error::ZeroVarianceControl);
    }
    Ok(cov / var_z)
}

/// Sample allocation for the two-level control-variate estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvPlan {
    pub rho: f64,
    /// controlled-variable samples (U = Q − ρZ); 0 never occurs, clamped ≥ 1
    pub n_u: usize,
    /// control samples on the independent stream; 0 means E[Z] is exact
    pub n_z: usize,
    pub c_u: f64,
    pub c_z: f64,
    pub var_u: f64,
    pub var_z: f64,
    pub predicted_variance: f64,
}

/// Cost-optimal (n_U, n_Z) for estimator variance Var U/n_U + ρ²Var Z/n_Z ≤ η².
/// ρ = 0 degrades to a plain Monte Carlo plan on Q (then Var U = Var Q).
pub fn cv_allocate(
    var_u: f64,
    var_z: f64,
    rho: f64,
    c_u: f64,
    c_z: f64,
    eta: f64,
) -> Result<CvPlan> {
    if eta <= 0.0 || c_u <= 0.0 || c_z <= 0.0 {
        return Err(Error::InvalidParameter("costs and tolerance must be positive".into()));
    }
    if var_u < 0.0 || var_z < 0.0 {
        return Err(Error::InvalidParameter("variances must be nonnegative".into()));
    }
    let eta2 = eta * eta;
    if rho == 0.0 || var_z == 0.0 {
        let n_u = required_samples(var_u, eta)?;
        return Ok(CvPlan {
            rho: 0.0,
            n_u,
            n_z: 0,
            c_u,
            c_z,
            var_u,
            var_z,
            predicted_variance: var_u / n_u as f64,
        });
    }
    let r2vz = rho * rho * var_z;
    let cross = (var_u * r2vz).sqrt();
    let n_z = ((r2vz + cross * (c_u / c_z).sqrt()) / eta2).ceil().max(1.0) as usize;
    let n_u = ((var_u + cross * (c_z / c_u).sqrt()) / eta2).ceil().max(1.0) as usize;
    let n_z = n_z.max(n_u);
    let predicted_variance = var_u / n_u as f64 + r2vz / n_z as f64;
    Ok(CvPlan { rho, n_u, n_z, c_u, c_z, var_u, var_z, predicted_variance })
}

/// Two-stream control-variate estimate
/// θ = n_U⁻¹ Σ U(ω_k) + ρ · n_Z⁻¹ Σ Z(ω'_k),
/// with independent streams ω, ω'. With n_z = 0 the exact expectation `e_z`
/// replaces the second stream.
pub fn cv_estimate<FU, FZ>(
    mut u_sampler: FU,
    mut z_sampler: FZ,
    e_z: f64,
    plan: &CvPlan,
    seed: u64,
) -> f64
where
    FU: FnMut(u64) -> f64,
    FZ: FnMut(u64) -> f64,
{
    let seed_u = derive_seed(seed, 0x5f);
    let seed_z = derive_seed(seed, 0xa3);
    let mean_u = (0..plan.n_u)
        .map(|k| u_sampler(derive_seed(seed_u, k as u64)))
        .sum::<f64>()
        / plan.n_u.max(1) as f64;
    let mean_z = if plan.n_z == 0 {
        e_z
    } else {
        (0..plan.n_z)
            .map(|k| z_sampler(derive_seed(seed_z, k as u64)))
            .sum::<f64>()
            / plan.n_z as f64
    };
    mean_u + plan.rho * mean_z
}

/// Allocation for the multi-fidelity estimator over models ζ_0..ζ_n.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MfmcPlan {
    /// per-sample costs γ_j, high fidelity first
    pub gammas: Vec<f64>,
    /// correlations r_j with the high-fidelity model; r_0 = 1
    pub rs: Vec<f64>,
    /// control coefficients ρ_j = r_j σ_0 / σ_j (ρ_0 unused)
    pub rhos: Vec<f64>,
    /// nondecreasing sample counts m_0 ≤ … ≤ m_n
    pub ms: Vec<usize>,
    pub budget: f64,
    pub predicted_variance: f64,
    /// predicted MSE ratio against plain MC at equal budget
    pub predicted_reduction: f64,
}

fn check_mfmc_conditions(gammas: &[f64], rs: &[f64]) -> Result<()> {
    let n = gammas.len();
    if rs.len() != n || n == 0 {
        return Err(Error::InvalidParameter("cost/correlation length mismatch".into()));
    }
    if (rs[0] - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParameter("high-fidelity correlation r_0 must be 1".into()));
    }
    let r_at = |j: usize| if j < n { rs[j] } else { 0.0 };
    for j in 0..n.saturating_sub(1) {
        if r_at(j).abs() <= r_at(j + 1).abs() {
            return Err(Error::MfmcConditionViolated(
                j,
                j + 1,
                format!("|r_{}| = {} not above |r_{}| = {}", j, r_at(j).abs(), j + 1, r_at(j + 1).abs()),
            ));
        }
        let num = r_at(j).powi(2) - r_at(j + 1).powi(2);
        let den = r_at(j + 1).powi(2) - r_at(j + 2).powi(2);
        if den <= 0.0 || gammas[j] / gammas[j + 1] <= num / den {
            return Err(Error::MfmcConditionViolated(
                j,
                j + 1,
                format!(
                    "cost ratio γ_{}/γ_{} = {} not above correlation ratio {}",
                    j,
                    j + 1,
                    gammas[j] / gammas[j + 1],
                    num / den.max(f64::MIN_POSITIVE)
                ),
            ));
        }
    }
    Ok(())
}

/// Predicted MSE ratio (Σ_j √((γ_j/γ_0)(r_j² − r_{j+1}²)))² of the
/// multi-fidelity estimator against plain MC at equal budget (r_{n+1} := 0).
pub fn mfmc_predicted_reduction(gammas: &[f64], rs: &[f64]) -> f64 {
    let n = gammas.len();
    let r_at = |j: usize| if j < n { rs[j] } else { 0.0 };
    let s: f64 = (0..n)
        .map(|j| ((gammas[j] / gammas[0]) * (r_at(j).powi(2) - r_at(j + 1).powi(2))).sqrt())
        .sum();
    s * s
}

fn mfmc_variance(sigmas: &[f64], rs: &[f64], rhos: &[f64], ms: &[usize]) -> f64 {
    let s0 = sigmas[0];
    let mut v = s0 * s0 / ms[0] as f64;
    for j in 1..ms.len() {
        let d = 1.0 / ms[j - 1] as f64 - 1.0 / ms[j] as f64;
        v += d * (rhos[j] * rhos[j] * sigmas[j] * sigmas[j]
            - 2.0 * rhos[j] * rs[j] * s0 * sigmas[j]);
    }
    v
}

/// Budget-constrained optimal allocation
/// m̆_0 = B / Σ_j √(γ_j γ_0 (r_j²−r_{j+1}²)/(1−r_1²)),
/// m̆_j = m̆_0 √((γ_0/γ_j)(r_j²−r_{j+1}²)/(1−r_1²)),
/// floored to integers (budget mode), with optimal ρ_j = r_j σ_0/σ_j.
pub fn mfmc_allocate(gammas: &[f64], rs: &[f64], sigmas: &[f64], budget: f64) -> Result<MfmcPlan> {
    check_mfmc_conditions(gammas, rs)?;
    let n = gammas.len();
    if sigmas.len() != n {
        return Err(Error::InvalidParameter("sigma length mismatch".into()));
    }
    if budget < gammas[0] {
        return Err(Error::InvalidParameter(format!(
            "budget {budget} below one high-fidelity sample ({})",
            gammas[0]
        )));
    }
    let r_at = |j: usize| if j < n { rs[j] } else { 0.0 };
    let ms: Vec<usize> = if n == 1 {
        vec![(budget / gammas[0]).floor().max(1.0) as usize]
    } else {
        let one_minus = 1.0 - rs[1] * rs[1];
        let denom: f64 = (0..n)
            .map(|j| (gammas[j] * gammas[0] * (r_at(j).powi(2) - r_at(j + 1).powi(2)) / one_minus).sqrt())
            .sum();
        let m0 = budget / denom;
        let mut ms: Vec<usize> = (0..n)
            .map(|j| {
                let mj = m0
                    * ((gammas[0] / gammas[j]) * (r_at(j).powi(2) - r_at(j + 1).powi(2)) / one_minus)
                        .sqrt();
                mj.floor().max(1.0) as usize
            })
            .collect();
        for j in 1..n {
            ms[j] = ms[j].max(ms[j - 1]);
        }
        ms
    };
    let rhos: Vec<f64> = (0..n)
        .map(|j| if j == 0 { 1.0 } else { rs[j] * sigmas[0] / sigmas[j] })
        .collect();
    let predicted_variance = mfmc_variance(sigmas, rs, &rhos, &ms);
    Ok(MfmcPlan {
        gammas: gammas.to_vec(),
        rs: rs.to_vec(),
        rhos,
        ms,
        budget,
        predicted_variance,
        predicted_reduction: mfmc_predicted_reduction(gammas, rs),
    })
}

/// Multi-fidelity estimate
/// ϑ = θ_{m_0}(ζ_0) + Σ_j ρ_j (θ_{m_j}(ζ_j) − θ_{m_{j-1}}(ζ_j)),
/// all models sharing the nested seed stream ω_1..ω_{m_n}.
pub fn mfmc_estimate<F>(models: &mut [F], plan: &MfmcPlan, seed: u64) -> Result<f64>
where
    F: FnMut(u64) -> f64,
{
    let n = models.len();
    if n != plan.ms.len() {
        return Err(Error::InvalidParameter(format!(
            "{} models but plan allocates {} levels",
            n,
            plan.ms.len()
        )));
    }
    let m_max = *plan.ms.last().unwrap();
    let seeds: Vec<u64> = (0..m_max).map(|k| derive_seed(seed, k as u64)).collect();
    let prefix_mean = |vals: &[f64], m: usize| vals[..m].iter().sum::<f64>() / m as f64;
    let z0: Vec<f64> = seeds[..plan.ms[0]].iter().map(|&s| models[0](s)).collect();
    let mut estimate = prefix_mean(&z0, plan.ms[0]);
    for j in 1..n {
        let zj: Vec<f64> = seeds[..plan.ms[j]].iter().map(|&s| models[j](s)).collect();
        estimate +=
            plan.rhos[j] * (prefix_mean(&zj, plan.ms[j]) - prefix_mean(&zj, plan.ms[j - 1]));
    }
    Ok(estimate)
}

/// Median of pilot wall times; robust per-sample cost measurement.
pub fn median_cost(mut times: Vec<f64>) -> f64 {
    if times.is_empty() {
        return 0.0;
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}
