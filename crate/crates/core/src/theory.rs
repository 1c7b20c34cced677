//! Closed-form convergence, staleness and sparsification bounds, plus the
//! trajectory accumulators used to evaluate them on simulated runs.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::controller::sparsification_degree;
use crate::error::{Error, Result};
use crate::mobility::{round_contact, sample_contact_trace, ContactParams};
use crate::protocol::RoundRecord;
use crate::sparsify::{element_bits, GradientVector};

/// Smoothness, gradient and variance constants plus run shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub l: f64,
    /// Bound `G^2` on the squared gradient norm.
    pub g2: f64,
    pub sigma: f64,
    pub eta: f64,
    pub delta: f64,
    pub rounds: usize,
    pub devices: usize,
    /// `F(w0) - F(w*)`.
    pub f0_gap: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("L", self.l),
            ("G2", self.g2),
            ("sigma", self.sigma),
            ("eta", self.eta),
            ("delta", self.delta),
            ("F0 gap", self.f0_gap),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        if self.rounds == 0 || self.devices == 0 {
            return Err(Error::param("rounds and devices must be positive"));
        }
        if self.sigma * self.sigma > self.g2 {
            return Err(Error::param("sigma^2 must not exceed G2"));
        }
        Ok(())
    }
}

/// `(e^{-4a} - 3e^{-3a} + 4e^{-2a}) / (1 - e^{-a})^2` with `a = delta / lambda`.
fn staleness_ratio(a: f64) -> f64 {
    let den = (-a).exp_m1().powi(2);
    if den == 0.0 {
        log::warn!("staleness bound diverges: delta/lambda = {a:e}");
        return f64::INFINITY;
    }
    ((-4.0 * a).exp() - 3.0 * (-3.0 * a).exp() + 4.0 * (-2.0 * a).exp()) / den
}

/// Second-moment staleness bound `Theta(lambda, c, delta)`.
/// Returns `+inf` when `delta / lambda` underflows the denominator.
pub fn staleness_bound(lambda: f64, c: f64, delta: f64) -> f64 {
    1.0 + lambda / (lambda + c) * staleness_ratio(delta / lambda)
}

/// `gamma = exp(-(u + ceil(log2 s)) / (A c))`.
pub fn gamma(rate: f64, c: f64, u: u32, s: usize) -> f64 {
    (-element_bits(s, u) / (rate * c)).exp()
}

/// Expected sparsification error bound `(1 - gamma) |x|^2`.
pub fn sparsification_error_bound(x_norm2: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * x_norm2
}

/// Local memory bound `4 (1 - gamma^2)/gamma^2 * Theta * eta^2 * G2`;
/// `+inf` for `gamma = 0`.
pub fn memory_bound(gamma: f64, theta: f64, eta: f64, g2: f64) -> f64 {
    if gamma <= 0.0 {
        log::warn!("memory bound diverges at gamma = 0");
        return f64::INFINITY;
    }
    4.0 * (1.0 - gamma * gamma) / (gamma * gamma) * theta * eta * eta * g2
}

/// Running sums for the trajectory-dependent bound.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectorySums {
    /// `sum_r sum_n zeta theta (5 - 3k/s) |x|^2`
    pub utility: f64,
    /// `sum_r sum_n theta^2`
    pub theta2: f64,
    pub rounds: usize,
}

impl TrajectorySums {
    pub fn push(&mut self, rec: &RoundRecord, s: usize) {
        for d in &rec.devices {
            if d.zeta {
                self.utility += d.theta as f64 * (5.0 - 3.0 * d.k as f64 / s as f64) * d.x_norm2;
            }
            self.theta2 += (d.theta * d.theta) as f64;
        }
        self.rounds += 1;
    }

    pub fn from_records(records: &[RoundRecord], s: usize) -> Self {
        let mut sums = Self::default();
        for r in records {
            sums.push(r, s);
        }
        sums
    }
}

/// `4 F/(eta R) + (4 L^2/(N R)) U + (8 eta^2 L^2 G^2/(N R)) T + 4 eta L sigma / N`.
pub fn theorem1_rhs(sums: &TrajectorySums, p: &BoundParams) -> f64 {
    let r = p.rounds as f64;
    let n = p.devices as f64;
    let l2 = p.l * p.l;
    4.0 * p.f0_gap / (p.eta * r)
        + 4.0 * l2 / (n * r) * sums.utility
        + 8.0 * p.eta * p.eta * l2 * p.g2 / (n * r) * sums.theta2
        + 4.0 * p.eta * p.l * p.sigma / n
}

/// Per-device contribution `(16 - 8g - 11g^2 + 6g^3) Theta / g^2`.
pub fn theorem2_device_term(gamma: f64, theta: f64) -> f64 {
    if gamma <= 0.0 {
        return f64::INFINITY;
    }
    let g = gamma;
    (16.0 - 8.0 * g - 11.0 * g * g + 6.0 * g * g * g) * theta / (g * g)
}

fn leading_terms(p: &BoundParams) -> f64 {
    let sr = (p.rounds as f64).sqrt();
    8.0 * p.l * p.f0_gap / sr + 2.0 * p.sigma / (p.devices as f64 * sr)
}

/// Contact-statistics bound: the `1/sqrt(R)` terms plus
/// `(G^2/(N R)) sum_n theorem2_device_term(gamma_n, Theta_n)`.
pub fn theorem2_rhs(p: &BoundParams, gammas: &[f64], thetas: &[f64]) -> Result<f64> {
    if gammas.len() != thetas.len() {
        return Err(Error::Dimension {
            expected: gammas.len(),
            got: thetas.len(),
        });
    }
    let sum: f64 = gammas
        .iter()
        .zip(thetas)
        .map(|(&g, &t)| theorem2_device_term(g, t))
        .sum();
    Ok(leading_terms(p) + p.g2 / (p.devices as f64 * p.rounds as f64) * sum)
}

/// Speed-scaled bound with `c = C/v`, `lambda = Lambda/v`:
/// `leading + 16 G^2 e^{2 b v/(A C)} / R * (1 + Lambda/(Lambda+C) f(delta v / Lambda))`.
pub fn corollary1_rhs(
    v: f64,
    big_c: f64,
    big_lambda: f64,
    rate: f64,
    u: u32,
    s: usize,
    p: &BoundParams,
) -> f64 {
    let b = element_bits(s, u);
    let growth = (2.0 * b * v / (rate * big_c)).exp();
    let stale = 1.0 + big_lambda / (big_lambda + big_c) * staleness_ratio(p.delta * v / big_lambda);
    leading_terms(p) + 16.0 * p.g2 * growth / p.rounds as f64 * stale
}

/// Energy slack `sqrt(2 R^2 Phi)` with `Phi = sum_n phi_n^2` and
/// `phi_n = max_r |E_n^r - E_n^con / R|`. The `-2 V sum U*` term of the
/// original guarantee is omitted: `U* >= 0`, so this slack is never smaller.
pub fn energy_slack(per_round_energy: &[Vec<f64>], budgets: &[f64]) -> f64 {
    let r = per_round_energy.len();
    if r == 0 {
        return 0.0;
    }
    let phi: f64 = budgets
        .iter()
        .enumerate()
        .map(|(n, &b)| {
            let per = b / r as f64;
            let m = per_round_energy
                .iter()
                .map(|row| (row[n] - per).abs())
                .fold(0.0, f64::max);
            m * m
        })
        .sum();
    (2.0 * (r as f64).powi(2) * phi).sqrt()
}

/// Virtual model `v = w0 - (1/N) sum_n sum_j eta grad_{n,j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualModelTracker {
    pub v: GradientVector,
    pub grad_sums: Vec<GradientVector>,
    devices: usize,
}

impl VirtualModelTracker {
    pub fn new(w0: &GradientVector, devices: usize) -> Self {
        Self {
            v: w0.clone(),
            grad_sums: vec![GradientVector::zeros(w0.len()); devices],
            devices,
        }
    }
}

/// `v -= (eta/N) grad`, recording the step in device `n`'s sum.
pub fn track_virtual_model(
    tracker: &mut VirtualModelTracker,
    device: usize,
    grad: &GradientVector,
    eta: f64,
) {
    tracker.v.axpy(-eta / tracker.devices as f64, grad);
    tracker.grad_sums[device].axpy(eta, grad);
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl Estimate {
    fn from_values(values: &[f64]) -> Estimate {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Estimate {
            mean,
            std_error: (var / n).sqrt(),
            samples: values.len(),
        }
    }

    /// `mean <= bound + 3 * std_error`
    pub fn within(&self, bound: f64) -> bool {
        self.mean <= bound + 3.0 * self.std_error
    }
}

/// Monte-Carlo `E[theta^2]` of a single device under the round-epoch contact
/// discretisation, sampling every round and using the staleness before that
/// round's download. Runs `traces` independent stationary traces of
/// `burn_in + rounds_per_trace` rounds; the standard error is over per-trace
/// means.
pub fn empirical_staleness<R: Rng + ?Sized>(
    params: &ContactParams,
    delta: f64,
    traces: usize,
    rounds_per_trace: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<Estimate> {
    params.validate()?;
    let total = burn_in + rounds_per_trace;
    let horizon = (total as f64 + 1.0) * delta;
    let mut means = Vec::with_capacity(traces);
    for _ in 0..traces {
        let trace = sample_contact_trace(params, horizon, rng)?;
        let mut last_sync = 0usize;
        let mut acc = 0.0;
        for r in 1..=total {
            let theta = (r - last_sync) as f64;
            if r > burn_in {
                acc += theta * theta;
            }
            if round_contact(&trace, r - 1, delta)?.0 {
                last_sync = r;
            }
        }
        means.push(acc / rounds_per_trace as f64);
    }
    Ok(Estimate::from_values(&means))
}

/// Monte-Carlo sparsification error `E |x - top_k(x)|^2` when the contact
/// time is `Exp(c)` and `k` fills the window at rate `rate`.
pub fn empirical_sparsification_error<R: Rng + ?Sized>(
    x: &GradientVector,
    rate: f64,
    c: f64,
    u: u32,
    draws: usize,
    rng: &mut R,
) -> Result<Estimate> {
    let s = x.len();
    let exp = Exp::new(1.0 / c).map_err(|e| Error::param(e.to_string()))?;
    // tail[k] = energy left after keeping the k largest magnitudes
    let mut sq: Vec<f64> = x.as_slice().iter().map(|v| v * v).collect();
    sq.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut tail = vec![0.0; s + 1];
    for k in (0..s).rev() {
        tail[k] = tail[k + 1] + sq[k];
    }
    let values: Vec<f64> = (0..draws)
        .map(|_| {
            let tau: f64 = exp.sample(rng);
            tail[sparsification_degree(tau, rate, u, s)]
        })
        .collect();
    Ok(Estimate::from_values(&values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> BoundParams {
        BoundParams {
            l: 1.0,
            g2: 4.0,
            sigma: 1.0,
            eta: 0.05,
            delta: 10.0,
            rounds: 400,
            devices: 10,
            f0_gap: 2.0,
        }
    }

    #[test]
    fn staleness_limits() {
        assert!((staleness_bound(10.0, 10.0, 1e4) - 1.0).abs() < 1e-12);
        assert!((staleness_bound(10.0, 1e15, 10.0) - 1.0).abs() < 1e-9);
        assert!(staleness_bound(1e300, 1.0, 1e-300).is_infinite());
        for &(l, c, d) in &[(1.0, 1.0, 1.0), (1000.0, 1.0, 1.0), (1.0, 100.0, 100.0)] {
            assert!(staleness_bound(l, c, d) >= 1.0);
        }
    }

    #[test]
    fn gamma_examples() {
        let s = 1024;
        let b = element_bits(s, 32);
        assert!((gamma(b, 1.0, 32, s) - (-1f64).exp()).abs() < 1e-15);
        assert!(gamma(1e300, 1.0, 32, s) > 1.0 - 1e-12);
        let g = gamma(1000.0, 2.0, 32, s);
        assert!((gamma(1000.0, 1.0, 32, s) - g * g).abs() < 1e-15);
    }

    #[test]
    fn simple_bounds() {
        assert_eq!(sparsification_error_bound(3.0, 1.0), 0.0);
        assert_eq!(sparsification_error_bound(3.0, 0.0), 3.0);
        assert_eq!(memory_bound(1.0, 5.0, 1.0, 1.0), 0.0);
        assert!((memory_bound(0.5, 1.0, 1.0, 1.0) - 12.0).abs() < 1e-12);
        assert!(memory_bound(0.0, 1.0, 1.0, 1.0).is_infinite());
    }

    #[test]
    fn convergence_bound_examples() {
        let p = params();
        let base = theorem2_rhs(&p, &[], &[]).unwrap();
        let full = theorem2_rhs(&p, &[1.0; 10], &[1.0; 10]).unwrap();
        let third = full - base;
        // each device contributes 3 G^2 / (N R)
        assert!((third - 3.0 * p.g2 / p.rounds as f64).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for i in 1..=100 {
            let t = theorem2_device_term(i as f64 / 100.0, 2.0);
            assert!(t < last);
            last = t;
        }
        assert!((theorem2_device_term(0.7, 3.0) - 3.0 * theorem2_device_term(0.7, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn trajectory_bound_terms() {
        let p = params();
        let zero = TrajectorySums::default();
        let a = theorem1_rhs(&zero, &p);
        assert!((a - (4.0 * 2.0 / (0.05 * 400.0) + 4.0 * 0.05 * 1.0 / 10.0)).abs() < 1e-12);
    }

    #[test]
    fn speed_bound_limits() {
        let p = params();
        let f = |v: f64| corollary1_rhs(v, 1.0, 100.0, 100.0, 32, 1000, &p);
        assert!(f(1e-3) > f(1.0));
        assert!(f(100.0) > f(1.0));
        let grid: Vec<f64> = (0..50)
            .map(|i| 10f64.powf(-1.0 + 3.0 * i as f64 / 49.0))
            .collect();
        let vals: Vec<f64> = grid.iter().map(|&v| f(v)).collect();
        let signs: Vec<bool> = vals.windows(2).map(|w| w[1] > w[0]).collect();
        let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(changes, 1);
        assert!(!signs[0] && *signs.last().unwrap());
    }

    #[test]
    fn energy_slack_is_conservative() {
        let rounds = vec![vec![1.0, 0.0], vec![0.0, 3.0]];
        // per-round budgets 0.5 and 1.0; phi = 0.5, 2.0
        let slack = energy_slack(&rounds, &[1.0, 2.0]);
        assert!((slack - (2.0 * 4.0 * (0.25 + 4.0_f64)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tracker_single_device() {
        let w0 = GradientVector::from_vec(vec![1.0, 2.0]);
        let mut t = VirtualModelTracker::new(&w0, 1);
        assert_eq!(t.v, w0);
        track_virtual_model(&mut t, 0, &GradientVector::from_vec(vec![1.0, -1.0]), 0.5);
        assert_eq!(t.v, GradientVector::from_vec(vec![0.5, 2.5]));
    }
}
