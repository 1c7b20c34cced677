//! Mobility-aware dynamic sparsification (MADS): per-device virtual energy
//! queues and closed-form (k, p) decisions, plus the baseline upload policies.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::channel::{transmission_rate, upload_energy, ChannelParams, LinkState};
use crate::sparsify::{element_bits, payload_bits};

/// Queues below this level price energy at zero.
pub const QUEUE_EPSILON: f64 = 1e-12;

/// Virtual energy queue of one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyQueue {
    pub q: f64,
    /// Long-term energy budget in J; `f64::INFINITY` disables the constraint.
    pub budget: f64,
    pub rounds: usize,
}

impl EnergyQueue {
    pub fn new(budget: f64, rounds: usize) -> Self {
        Self {
            q: 0.0,
            budget,
            rounds,
        }
    }

    pub fn per_round_budget(&self) -> f64 {
        self.budget / self.rounds.max(1) as f64
    }

    /// `q <- max(q + E - budget / R, 0)`
    pub fn update(&mut self, energy: f64) {
        self.q = (self.q + energy - self.per_round_budget()).max(0.0);
    }
}

/// Functional form of [`EnergyQueue::update`].
pub fn queue_update(q: &EnergyQueue, energy: f64) -> EnergyQueue {
    let mut next = *q;
    next.update(energy);
    next
}

/// Staleness-weighted sparsification penalty `zeta * theta * (5 - 3k/s) * |x|^2`.
pub fn utility_term(zeta: bool, theta: u64, k: usize, s: usize, x_norm2: f64) -> f64 {
    if !zeta {
        return 0.0;
    }
    theta as f64 * (5.0 - 3.0 * k as f64 / s as f64) * x_norm2
}

/// Power at which the whole model (`s` elements) fits exactly into `tau`
/// seconds: `(B N0 / |h|^2) (2^(s (u + ceil log2 s) / (tau B)) - 1)`.
pub fn full_model_power(link: &LinkState, params: &ChannelParams, tau: f64, s: usize, u: u32) -> f64 {
    let exponent = s as f64 * element_bits(s, u) / (tau * params.bandwidth);
    let factor = exponent.exp2() - 1.0;
    if !factor.is_finite() {
        return f64::INFINITY;
    }
    params.noise_power() / link.gain * factor
}

/// Upper limit on useful transmit power: `min(p_max, full_model_power)`.
pub fn power_cap(link: &LinkState, params: &ChannelParams, tau: f64, s: usize, u: u32) -> f64 {
    full_model_power(link, params, tau, s, u).min(params.p_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MadsParams {
    /// Drift-plus-penalty weight `V`.
    pub v: f64,
    pub u: u32,
    pub s: usize,
}

/// What a device knows when it decides an upload.
#[derive(Debug, Clone, Copy)]
pub struct UploadContext<'a> {
    pub zeta: bool,
    pub theta: u64,
    pub x_norm2: f64,
    pub tau: f64,
    pub link: LinkState,
    pub channel: &'a ChannelParams,
}

/// Minimiser of the per-device drift-plus-penalty objective over power once
/// the rate constraint is tight:
///
/// `-(3 V zeta theta tau B |x|^2 / (s b)) log2(1 + p |h|^2/(B N0)) + tau p q`
///
/// where `b = u + ceil(log2 s)`. Its stationary point is
/// `3 V zeta theta B |x|^2 / (q s b ln 2) - B N0 / |h|^2`, clamped to
/// `[0, power_cap]`.
pub fn optimal_power(params: &MadsParams, ctx: &UploadContext<'_>, q: f64) -> f64 {
    if !ctx.zeta || ctx.tau <= 0.0 {
        return 0.0;
    }
    let cap = power_cap(&ctx.link, ctx.channel, ctx.tau, params.s, params.u);
    if q < QUEUE_EPSILON {
        return cap;
    }
    let interior = 3.0 * params.v * ctx.theta as f64 * ctx.channel.bandwidth * ctx.x_norm2
        / (q * params.s as f64 * element_bits(params.s, params.u) * LN_2)
        - ctx.channel.noise_power() / ctx.link.gain;
    interior.clamp(0.0, cap)
}

/// Largest `k` whose payload fits into `tau * rate` bits, clamped to `[0, s]`.
pub fn sparsification_degree(tau: f64, rate: f64, u: u32, s: usize) -> usize {
    if !(tau > 0.0 && rate > 0.0) {
        return 0;
    }
    let budget = tau * rate;
    let per = element_bits(s, u);
    let raw = (budget / per).floor();
    if raw >= s as f64 {
        return s;
    }
    let mut k = raw.max(0.0) as usize;
    // guard against the division rounding up across an integer
    while k > 0 && payload_bits(k, s, u) > budget {
        k -= 1;
    }
    k
}

/// Outcome of one device's upload decision in one round.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlDecision {
    pub k: usize,
    pub p: f64,
    pub rate: f64,
    pub energy: f64,
    pub utility: f64,
    /// Bits the device must push through the link.
    pub payload: f64,
}

impl ControlDecision {
    pub fn idle() -> Self {
        Self::default()
    }

    /// Whether the payload fits into the contact window.
    pub fn fits(&self, tau: f64) -> bool {
        self.payload <= tau * self.rate
    }
}

/// Decision with tight rate constraint at a given power.
fn tight_decision(p: f64, ctx: &UploadContext<'_>, s: usize, u: u32) -> ControlDecision {
    let rate = transmission_rate(p, &ctx.link, ctx.channel);
    let k = sparsification_degree(ctx.tau, rate, u, s);
    let energy = upload_energy(p, k, s, u, rate).unwrap_or(0.0);
    ControlDecision {
        k,
        p: if k == 0 { 0.0 } else { p },
        rate,
        energy,
        utility: utility_term(ctx.zeta, ctx.theta, k, s, ctx.x_norm2),
        payload: payload_bits(k, s, u),
    }
}

/// Closed-form MADS decision for one device.
pub fn mads_decide(ctx: &UploadContext<'_>, q: f64, params: &MadsParams) -> ControlDecision {
    if !ctx.zeta {
        return ControlDecision::idle();
    }
    let (s, u) = (params.s, params.u);
    let p = optimal_power(params, ctx, q);
    let mut d = tight_decision(p, ctx, s, u);
    // when the full-model power binds, rounding in the rate can cost the last
    // element; nudge the power up by a relative 1e-9 if p_max allows it
    if d.k + 1 == s && p > 0.0 {
        let full = full_model_power(&ctx.link, ctx.channel, ctx.tau, s, u);
        if (p - full).abs() <= 1e-9 * full {
            let bumped = (full * (1.0 + 1e-9)).min(ctx.channel.p_max);
            let alt = tight_decision(bumped, ctx, s, u);
            if alt.k == s {
                d = alt;
            }
        }
    }
    d
}

/// How the fixed-power baselines pick their transmit power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePower {
    /// Always `p_max`.
    Max,
    /// A fixed power in W (clamped to `p_max`).
    Fixed(f64),
    /// Per-device constant power whose expected spend over the run matches
    /// the device's energy budget, given the contact statistics.
    BudgetMatched,
}

/// Power that spends `budget` in expectation when every contact round uses
/// its whole window: `budget / (R * c/(c+lambda) * c (1 - e^{-delta/c}))`.
pub fn budget_matched_power(
    budget: f64,
    rounds: usize,
    mean_contact: f64,
    mean_intercontact: f64,
    delta: f64,
    p_max: f64,
) -> f64 {
    if !budget.is_finite() {
        return p_max;
    }
    let contact_prob = mean_contact / (mean_contact + mean_intercontact);
    let window = mean_contact * (1.0 - (-delta / mean_contact).exp());
    let expected_airtime = rounds as f64 * contact_prob * window;
    if expected_airtime <= 0.0 {
        return p_max;
    }
    (budget / expected_airtime).min(p_max)
}

/// Upload policy selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    /// Closed-form drift-plus-penalty control.
    Mads { v: f64 },
    /// Energy-unconstrained benchmark: MADS with the queue pinned at zero.
    Optimal,
    /// Asynchronous uploads of the dense model at fixed power.
    Afl,
    /// Asynchronous top-k uploads at fixed power, `k` from the tight rate constraint.
    AflSpar,
    /// Synchronous barrier with top-k uploads at fixed power; devices only
    /// compute when they meet the server.
    SflSpar,
    /// Fixed `k` (None = all `s`) at fixed power `p`; for analysis and tests.
    Fixed { k: Option<usize>, p: f64 },
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Mads { .. } => "mads",
            Policy::Optimal => "optimal",
            Policy::Afl => "afl",
            Policy::AflSpar => "afl_spar",
            Policy::SflSpar => "sfl_spar",
            Policy::Fixed { .. } => "fixed",
        }
    }

    /// Look a policy up by its config name; `v` is used by `mads` only.
    pub fn from_name(name: &str, v: f64) -> Option<Policy> {
        Some(match name {
            "mads" => Policy::Mads { v },
            "optimal" => Policy::Optimal,
            "afl" => Policy::Afl,
            "afl_spar" => Policy::AflSpar,
            "sfl_spar" => Policy::SflSpar,
            _ => return None,
        })
    }

    pub fn is_synchronous(&self) -> bool {
        matches!(self, Policy::SflSpar)
    }

    /// Whether the policy prices energy through its virtual queue.
    pub fn uses_queue(&self) -> bool {
        matches!(self, Policy::Mads { .. })
    }

    /// Decide `(k, p)` for one contacting device. `baseline_power` is the
    /// device's resolved fixed power for the baseline policies.
    pub fn decide(
        &self,
        ctx: &UploadContext<'_>,
        q: f64,
        s: usize,
        u: u32,
        baseline_power: f64,
    ) -> ControlDecision {
        if !ctx.zeta {
            return ControlDecision::idle();
        }
        match *self {
            Policy::Mads { v } => mads_decide(ctx, q, &MadsParams { v, u, s }),
            Policy::Optimal => mads_decide(ctx, 0.0, &MadsParams { v: 1.0, u, s }),
            Policy::AflSpar | Policy::SflSpar => tight_decision(baseline_power, ctx, s, u),
            Policy::Afl => {
                // dense upload carries values only
                let p = baseline_power;
                let rate = transmission_rate(p, &ctx.link, ctx.channel);
                let payload = u as f64 * s as f64;
                let energy = if rate > 0.0 { p * payload / rate } else { 0.0 };
                ControlDecision {
                    k: s,
                    p,
                    rate,
                    energy,
                    utility: utility_term(true, ctx.theta, s, s, ctx.x_norm2),
                    payload,
                }
            }
            Policy::Fixed { k, p } => {
                let k = k.unwrap_or(s).min(s);
                let rate = transmission_rate(p, &ctx.link, ctx.channel);
                let energy = upload_energy(p, k, s, u, rate).unwrap_or(0.0);
                ControlDecision {
                    k,
                    p,
                    rate,
                    energy,
                    utility: utility_term(true, ctx.theta, k, s, ctx.x_norm2),
                    payload: payload_bits(k, s, u),
                }
            }
        }
    }
}
