//! Independent reference computations: brute-force power search, finite
//! difference gradients, and a plain dense synchronous SGD loop.

use rand::Rng;

use crate::channel::{sample_link, transmission_rate, ChannelParams, LinkState};
use crate::controller::{power_cap, MadsParams, UploadContext};
use crate::error::Result;
use crate::rng::{Domain, SeedTree};
use crate::sparsify::{element_bits, GradientVector};
use crate::workloads::{sample_batch, Dataset, Model};

/// Per-device drift-plus-penalty objective with the rate constraint tight:
/// `-(3 V zeta theta tau B |x|^2 / (s b)) log2(1 + p |h|^2/(B N0))
///  + 5 V zeta theta |x|^2 + tau p q`.
pub fn p3_objective(params: &MadsParams, ctx: &UploadContext<'_>, q: f64, p: f64) -> f64 {
    if !ctx.zeta {
        return 0.0;
    }
    let s = params.s as f64;
    let b = element_bits(params.s, params.u);
    let vt = params.v * ctx.theta as f64 * ctx.x_norm2;
    let rate = transmission_rate(p, &ctx.link, ctx.channel);
    // rate / B == log2(1 + p |h|^2 / (B N0))
    -3.0 * vt * ctx.tau * rate / (s * b) + 5.0 * vt + ctx.tau * p * q
}

/// Exhaustive search over `points` evenly spaced powers in `[0, power_cap]`.
/// Returns `(p, objective)` of the best grid point.
pub fn grid_search_power(params: &MadsParams, ctx: &UploadContext<'_>, q: f64, points: usize) -> (f64, f64) {
    let cap = power_cap(&ctx.link, ctx.channel, ctx.tau, params.s, params.u);
    let mut best = (0.0, p3_objective(params, ctx, q, 0.0));
    let steps = points.max(2) - 1;
    for i in 1..=steps {
        let p = cap * i as f64 / steps as f64;
        let f = p3_objective(params, ctx, q, p);
        if f < best.1 {
            best = (p, f);
        }
    }
    best
}

/// Central finite-difference gradient of the mean loss.
pub fn finite_difference_grad(
    model: &Model,
    w: &GradientVector,
    data: &Dataset,
    h: f64,
) -> Result<GradientVector> {
    let mut out = GradientVector::zeros(w.len());
    let mut probe = w.clone();
    for j in 0..w.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let up = model.loss(&probe, data)?;
        probe[j] = orig - h;
        let down = model.loss(&probe, data)?;
        probe[j] = orig;
        out[j] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Dense synchronous SGD over `rounds` rounds:
/// `w <- w - (1/N) sum_n eta * grad_n(w)`, drawing device `n`'s minibatch in
/// round `r` from the same stream the simulator uses. Returns the model
/// after every round.
pub fn dense_sgd_reference(
    model: &Model,
    device_data: &[Dataset],
    w0: &GradientVector,
    eta: f64,
    batch_size: usize,
    rounds: usize,
    seeds: &SeedTree,
) -> Result<Vec<GradientVector>> {
    let n = device_data.len() as f64;
    let mut w = w0.clone();
    let mut out = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let mut step = vec![0.0; w.len()];
        for (i, data) in device_data.iter().enumerate() {
            let mut rng = seeds.stream(Domain::Batch, i as u32, r as u32);
            let batch = sample_batch(data, batch_size, &mut rng)?;
            let g = model.grad(&w, &batch)?;
            for (acc, gj) in step.iter_mut().zip(g.as_slice()) {
                *acc += eta * gj;
            }
        }
        for (wj, sj) in w.as_mut_slice().iter_mut().zip(&step) {
            *wj -= sj / n;
        }
        out.push(w.clone());
    }
    Ok(out)
}

/// A random drift-plus-penalty power problem.
#[derive(Debug, Clone)]
pub struct P3Instance {
    pub params: MadsParams,
    pub channel: ChannelParams,
    pub theta: u64,
    pub x_norm2: f64,
    pub tau: f64,
    pub link: LinkState,
    pub q: f64,
}

impl P3Instance {
    pub fn ctx(&self) -> UploadContext<'_> {
        UploadContext {
            zeta: true,
            theta: self.theta,
            x_norm2: self.x_norm2,
            tau: self.tau,
            link: self.link,
            channel: &self.channel,
        }
    }

    /// Draw an instance; parameters are log-uniform over wide ranges so that
    /// interior, zero and capped solutions all occur.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Result<P3Instance> {
        let log_uniform = |rng: &mut R, lo: f64, hi: f64| -> f64 {
            (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
        };
        let channel = ChannelParams {
            bandwidth: log_uniform(rng, 1e2, 1e6),
            ..Default::default()
        };
        let s = rng.random_range(10..=20_000);
        let params = MadsParams {
            v: log_uniform(rng, 1e-7, 1e-1),
            u: 32,
            s,
        };
        let d = rng.random_range(5.0..300.0);
        let link = sample_link(&channel, d, rng)?;
        let q = if rng.random::<f64>() < 0.05 {
            0.0
        } else {
            log_uniform(rng, 1e-5, 1e2)
        };
        Ok(P3Instance {
            params,
            channel,
            theta: rng.random_range(1..=30),
            x_norm2: log_uniform(rng, 1e-4, 1e3),
            tau: rng.random_range(0.01..=10.0),
            link,
            q,
        })
    }
}
