//! Asynchronous FL rounds: local SGD with gradient accumulation, sparsified
//! uploads on contact, server aggregation, broadcast and staleness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_link, ChannelParams};
use crate::controller::{EnergyQueue, Policy, UploadContext};
use crate::error::{Error, Result};
use crate::mobility::{round_contact, ContactTrace};
use crate::rng::{Domain, SeedTree};
use crate::sparsify::{residual, top_k, GradientVector, SparseUpdate};
use crate::workloads::{sample_batch, Dataset, Model};

/// Per-device protocol state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub id: usize,
    /// Local model `w_n`.
    pub w: GradientVector,
    /// Gradients accumulated since the last download, `g_n`.
    pub g: GradientVector,
    /// Error-feedback memory `e_n`.
    pub e: GradientVector,
    /// Round of the last download, `kappa_n`.
    pub last_sync: usize,
}

impl DeviceState {
    pub fn new(id: usize, w0: &GradientVector) -> Self {
        Self {
            id,
            w: w0.clone(),
            g: GradientVector::zeros(w0.len()),
            e: GradientVector::zeros(w0.len()),
            last_sync: 0,
        }
    }

    /// `g += eta * grad`; devices out of contact also take the SGD step on `w`.
    pub fn local_step(&mut self, grad: &GradientVector, eta: f64, contacting: bool) {
        self.g.axpy(eta, grad);
        if !contacting {
            self.w.axpy(-eta, grad);
        }
    }

    /// `x = e + g`, without touching the state.
    pub fn prepare_upload(&self) -> GradientVector {
        self.e.add(&self.g)
    }

    /// Sparsify `x` and keep the residual as the new memory.
    pub fn commit_upload(&mut self, x: &GradientVector, k: usize) -> Result<SparseUpdate> {
        let sp = top_k(x, k)?;
        self.e = residual(x, &sp);
        Ok(sp)
    }

    /// Adopt the global model and clear the accumulated gradients.
    pub fn download(&mut self, server: &ServerState) {
        self.w.as_mut_slice().copy_from_slice(server.w.as_slice());
        self.g.fill_zero();
        self.last_sync = server.round;
    }

    /// Rounds since the last download, evaluated before this round's download.
    pub fn staleness(&self, r: usize) -> u64 {
        r.saturating_sub(self.last_sync) as u64
    }
}

/// Global model kept as `w0 - total / N`, where `total` is the sum of every
/// committed update in device order. Recomputing `w` from the running total
/// makes `w0 - w` reproducible from the update history alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub w: GradientVector,
    pub round: usize,
    w0: GradientVector,
    total: GradientVector,
    devices: usize,
}

impl ServerState {
    pub fn new(w0: GradientVector, devices: usize) -> Self {
        let s = w0.len();
        Self {
            w: w0.clone(),
            round: 0,
            w0,
            total: GradientVector::zeros(s),
            devices,
        }
    }

    pub fn initial_model(&self) -> &GradientVector {
        &self.w0
    }

    /// Sum of all committed updates so far.
    pub fn update_total(&self) -> &GradientVector {
        &self.total
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    /// Subtract `(1/N) * sum(updates)`; updates are summed in the given order.
    /// An empty list leaves the model untouched.
    pub fn aggregate(&mut self, updates: &[SparseUpdate]) {
        if updates.is_empty() {
            return;
        }
        for u in updates {
            u.add_scaled_into(1.0, &mut self.total);
        }
        let n = self.devices as f64;
        for j in 0..self.w.len() {
            self.w[j] = self.w0[j] - self.total[j] / n;
        }
    }
}

/// Per-device slice of a round record.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviceRound {
    pub zeta: bool,
    pub tau: f64,
    /// Staleness at this round (before any download).
    pub theta: u64,
    pub k: usize,
    pub p: f64,
    pub energy: f64,
    pub x_norm2: f64,
    pub utility: f64,
    pub grad_norm2: f64,
    /// Payload did not fit into the contact window, or the hard budget
    /// refused it.
    pub failed: bool,
    pub queue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub contacts: usize,
    pub devices: Vec<DeviceRound>,
    /// Loss of the global model on the union of the device datasets.
    pub global_loss: f64,
    pub test_loss: f64,
    /// Accuracy for classifiers, held-out loss for regression.
    pub test_metric: f64,
    /// Energy spent per device up to and including this round.
    pub cumulative_energy: Vec<f64>,
    /// Whether the server model changed this round.
    pub aggregated: bool,
}

impl RoundRecord {
    pub fn round_energy(&self) -> f64 {
        self.devices.iter().map(|d| d.energy).sum()
    }

    pub fn total_energy(&self) -> f64 {
        self.cumulative_energy.iter().sum()
    }

    fn contacting(&self) -> impl Iterator<Item = &DeviceRound> {
        self.devices.iter().filter(|d| d.zeta)
    }

    pub fn mean_theta(&self) -> f64 {
        mean(self.contacting().map(|d| d.theta as f64))
    }

    pub fn max_theta(&self) -> u64 {
        self.contacting().map(|d| d.theta).max().unwrap_or(0)
    }

    pub fn mean_k(&self) -> f64 {
        mean(self.contacting().map(|d| d.k as f64))
    }

    pub fn mean_p(&self) -> f64 {
        mean(self.contacting().map(|d| d.p))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Device-to-MES distance used for link sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum DistanceModel {
    /// Constant distance per device, in meters.
    Fixed(Vec<f64>),
    /// Distances sampled every `dt` seconds per device.
    Sampled { dt: f64, series: Vec<Vec<f64>> },
}

impl DistanceModel {
    fn at(&self, device: usize, t: f64) -> f64 {
        let d = match self {
            DistanceModel::Fixed(v) => v[device],
            DistanceModel::Sampled { dt, series } => {
                let s = &series[device];
                let i = ((t / dt).round() as usize).min(s.len().saturating_sub(1));
                s[i]
            }
        };
        // the path-loss model is only meaningful beyond 1 m
        d.max(1.0)
    }
}

/// Everything needed to build a [`World`].
#[derive(Debug, Clone)]
pub struct WorldSetup {
    pub model: Model,
    pub w0: GradientVector,
    pub device_data: Vec<Dataset>,
    pub test_data: Dataset,
    pub traces: Vec<ContactTrace>,
    pub distances: DistanceModel,
    pub channel: ChannelParams,
    pub policy: Policy,
    /// Fixed transmit power per device for the baseline policies.
    pub baseline_power: Vec<f64>,
    pub budgets: Vec<f64>,
    /// Refuse any upload that would push a device past its budget.
    pub hard_budget: bool,
    pub rounds: usize,
    pub round_duration: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub u_bits: u32,
    pub seeds: SeedTree,
}

/// Per-device running sums for the conservation check.
#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    /// `eta * sum of all minibatch gradients`.
    pub grad_sum: GradientVector,
    /// Sum of all densified uploads that reached the server.
    pub upload_sum: GradientVector,
}

/// A running simulation.
#[derive(Debug, Clone)]
pub struct World {
    pub model: Model,
    pub devices: Vec<DeviceState>,
    pub server: ServerState,
    pub queues: Vec<EnergyQueue>,
    pub traces: Vec<ContactTrace>,
    pub distances: DistanceModel,
    pub channel: ChannelParams,
    pub policy: Policy,
    pub baseline_power: Vec<f64>,
    pub device_data: Vec<Dataset>,
    pub test_data: Dataset,
    pub eta: f64,
    pub batch_size: usize,
    pub round_duration: f64,
    pub u_bits: u32,
    pub rounds: usize,
    pub seeds: SeedTree,
    pub cumulative_energy: Vec<f64>,
    pub hard_budget: bool,
    pub ledgers: Vec<Ledger>,
    /// Minibatch gradients of the most recent round (zero when not computed).
    pub last_grads: Vec<GradientVector>,
    train_union: Dataset,
    /// Synchronous barrier: devices that have contributed since the last aggregation.
    sync_pending: Vec<Option<SparseUpdate>>,
}

impl World {
    pub fn new(setup: WorldSetup) -> Result<World> {
        let n = setup.device_data.len();
        if n == 0 {
            return Err(Error::param("need at least one device"));
        }
        for (name, len) in [
            ("traces", setup.traces.len()),
            ("baseline powers", setup.baseline_power.len()),
            ("budgets", setup.budgets.len()),
        ] {
            if len != n {
                return Err(Error::param(format!("{name}: expected {n} entries, got {len}")));
            }
        }
        if let DistanceModel::Fixed(d) = &setup.distances {
            if d.len() != n {
                return Err(Error::param(format!(
                    "distances: expected {n} entries, got {}",
                    d.len()
                )));
            }
        }
        let s = setup.model.num_params();
        if setup.w0.len() != s {
            return Err(Error::Dimension {
                expected: s,
                got: setup.w0.len(),
            });
        }
        if !(setup.eta > 0.0) {
            return Err(Error::param("learning rate must be positive"));
        }
        if !(setup.round_duration > 0.0) {
            return Err(Error::param("round duration must be positive"));
        }
        setup.channel.validate()?;
        let needed = setup.rounds as f64 * setup.round_duration;
        for t in &setup.traces {
            if t.horizon() < needed {
                return Err(Error::Range(format!(
                    "trace horizon {} shorter than {needed} s",
                    t.horizon()
                )));
            }
        }
        let union: Vec<_> = setup
            .device_data
            .iter()
            .flat_map(|d| d.samples().iter().cloned())
            .collect();
        let classes = setup
            .device_data
            .iter()
            .map(|d| d.num_classes())
            .max()
            .unwrap_or(1);
        let train_union = Dataset::new(union, classes)?;
        Ok(World {
            devices: (0..n).map(|i| DeviceState::new(i, &setup.w0)).collect(),
            server: ServerState::new(setup.w0.clone(), n),
            queues: setup
                .budgets
                .iter()
                .map(|&b| EnergyQueue::new(b, setup.rounds))
                .collect(),
            cumulative_energy: vec![0.0; n],
            hard_budget: setup.hard_budget,
            ledgers: (0..n)
                .map(|_| Ledger {
                    grad_sum: GradientVector::zeros(s),
                    upload_sum: GradientVector::zeros(s),
                })
                .collect(),
            last_grads: vec![GradientVector::zeros(s); n],
            sync_pending: vec![None; n],
            train_union,
            model: setup.model,
            traces: setup.traces,
            distances: setup.distances,
            channel: setup.channel,
            policy: setup.policy,
            baseline_power: setup.baseline_power,
            device_data: setup.device_data,
            test_data: setup.test_data,
            eta: setup.eta,
            batch_size: setup.batch_size,
            round_duration: setup.round_duration,
            u_bits: setup.u_bits,
            rounds: setup.rounds,
            seeds: setup.seeds,
        })
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn model_size(&self) -> usize {
        self.model.num_params()
    }

    /// Minibatch gradient of device `n` at `w` for round `r`.
    fn minibatch_grad(&self, n: usize, w: &GradientVector, r: usize) -> Result<GradientVector> {
        let mut rng = self.seeds.stream(Domain::Batch, n as u32, r as u32);
        let batch = sample_batch(&self.device_data[n], self.batch_size, &mut rng)?;
        self.model.grad(w, &batch)
    }

    /// Whether spending `energy` now would exceed device `n`'s budget.
    fn over_budget(&self, n: usize, energy: f64) -> bool {
        self.hard_budget && self.cumulative_energy[n] + energy > self.queues[n].budget
    }

    /// Evaluate the global model: (train loss, test loss, test metric).
    pub fn evaluate(&self) -> Result<(f64, f64, f64)> {
        let w = &self.server.w;
        let train = self.model.loss(w, &self.train_union)?;
        let test = self.model.loss(w, &self.test_data)?;
        let metric = if self.model.is_classifier() {
            self.model.accuracy(w, &self.test_data)?
        } else {
            test
        };
        Ok((train, test, metric))
    }

    /// Execute protocol round `r` (1-based).
    pub fn run_round(&mut self, r: usize) -> Result<RoundRecord> {
        if r == 0 {
            return Err(Error::Range("protocol rounds are 1-based".into()));
        }
        let n = self.num_devices();
        let s = self.model_size();
        let epoch = r as f64 * self.round_duration;
        let contact: Vec<(bool, f64)> = self
            .traces
            .iter()
            .map(|t| round_contact(t, r - 1, self.round_duration))
            .collect::<Result<_>>()?;
        // links for every device every round keep draws aligned across policies
        let links = (0..n)
            .map(|i| {
                let mut rng = self.seeds.stream(Domain::Channel, i as u32, r as u32);
                sample_link(&self.channel, self.distances.at(i, epoch), &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut recs: Vec<DeviceRound> = (0..n)
            .map(|i| DeviceRound {
                zeta: contact[i].0,
                tau: contact[i].1,
                theta: self.devices[i].staleness(r),
                ..Default::default()
            })
            .collect();

        let aggregated = if self.policy.is_synchronous() {
            self.sync_round(r, &contact, &links, &mut recs, s)?
        } else {
            self.async_round(r, &contact, &links, &mut recs, s)?
        };
        self.server.round = r;

        for ((rec, queue), spent) in recs
            .iter_mut()
            .zip(&mut self.queues)
            .zip(&mut self.cumulative_energy)
        {
            queue.update(rec.energy);
            *spent += rec.energy;
            rec.queue = queue.q;
        }
        let (global_loss, test_loss, test_metric) = self.evaluate()?;
        Ok(RoundRecord {
            round: r,
            contacts: recs.iter().filter(|d| d.zeta).count(),
            devices: recs,
            global_loss,
            test_loss,
            test_metric,
            cumulative_energy: self.cumulative_energy.clone(),
            aggregated,
        })
    }

    fn async_round(
        &mut self,
        r: usize,
        contact: &[(bool, f64)],
        links: &[crate::channel::LinkState],
        recs: &mut [DeviceRound],
        s: usize,
    ) -> Result<bool> {
        let n = self.num_devices();
        let grads: Vec<GradientVector> = (0..n)
            .into_par_iter()
            .map(|i| self.minibatch_grad(i, &self.devices[i].w, r))
            .collect::<Result<_>>()?;
        for i in 0..n {
            self.devices[i].local_step(&grads[i], self.eta, contact[i].0);
            self.ledgers[i].grad_sum.axpy(self.eta, &grads[i]);
            recs[i].grad_norm2 = grads[i].norm2();
        }

        let mut updates = Vec::new();
        let mut synced = Vec::new();
        for i in 0..n {
            let (zeta, tau) = contact[i];
            if !zeta {
                continue;
            }
            let x = self.devices[i].prepare_upload();
            let x_norm2 = x.norm2();
            let ctx = UploadContext {
                zeta,
                theta: recs[i].theta,
                x_norm2,
                tau,
                link: links[i],
                channel: &self.channel,
            };
            let d = self
                .policy
                .decide(&ctx, self.queues[i].q, s, self.u_bits, self.baseline_power[i]);
            recs[i].x_norm2 = x_norm2;
            if d.k > 0 && (!d.fits(tau) || self.over_budget(i, d.energy)) {
                // failed or refused upload: nothing sent, no energy, fall back to local SGD
                recs[i].failed = true;
                self.devices[i].w.axpy(-self.eta, &grads[i]);
                continue;
            }
            recs[i].k = d.k;
            recs[i].p = d.p;
            recs[i].energy = d.energy;
            recs[i].utility = d.utility;
            let sp = self.devices[i].commit_upload(&x, d.k)?;
            sp.add_scaled_into(1.0, &mut self.ledgers[i].upload_sum);
            if sp.nnz() > 0 {
                updates.push(sp);
            }
            synced.push(i);
        }
        let aggregated = !updates.is_empty();
        self.server.round = r;
        self.server.aggregate(&updates);
        for i in synced {
            self.devices[i].download(&self.server);
        }
        self.last_grads = grads;
        Ok(aggregated)
    }

    /// Synchronous barrier: a contacting device refreshes its model; if it has
    /// not contributed since the last aggregation it computes one gradient on
    /// the fresh model and uploads it. The server aggregates once every device
    /// has contributed. Devices out of contact stay idle.
    fn sync_round(
        &mut self,
        r: usize,
        contact: &[(bool, f64)],
        links: &[crate::channel::LinkState],
        recs: &mut [DeviceRound],
        s: usize,
    ) -> Result<bool> {
        let n = self.num_devices();
        for g in self.last_grads.iter_mut() {
            g.fill_zero();
        }
        for i in 0..n {
            let (zeta, tau) = contact[i];
            if !zeta {
                continue;
            }
            if self.sync_pending[i].is_some() {
                self.devices[i].w = self.server.w.clone();
                self.devices[i].last_sync = r;
                continue;
            }
            let w = self.server.w.clone();
            let grad = self.minibatch_grad(i, &w, r)?;
            self.devices[i].w = w;
            self.devices[i].local_step(&grad, self.eta, true);
            self.ledgers[i].grad_sum.axpy(self.eta, &grad);
            recs[i].grad_norm2 = grad.norm2();
            let x = self.devices[i].prepare_upload();
            let x_norm2 = x.norm2();
            let ctx = UploadContext {
                zeta,
                theta: recs[i].theta,
                x_norm2,
                tau,
                link: links[i],
                channel: &self.channel,
            };
            let d = self
                .policy
                .decide(&ctx, self.queues[i].q, s, self.u_bits, self.baseline_power[i]);
            recs[i].x_norm2 = x_norm2;
            self.last_grads[i] = grad;
            if d.k > 0 && (!d.fits(tau) || self.over_budget(i, d.energy)) {
                recs[i].failed = true;
                continue;
            }
            recs[i].k = d.k;
            recs[i].p = d.p;
            recs[i].energy = d.energy;
            recs[i].utility = d.utility;
            let sp = self.devices[i].commit_upload(&x, d.k)?;
            sp.add_scaled_into(1.0, &mut self.ledgers[i].upload_sum);
            self.devices[i].g.fill_zero();
            self.devices[i].last_sync = r;
            self.sync_pending[i] = Some(sp);
        }
        if self.sync_pending.iter().all(Option::is_some) {
            let updates: Vec<SparseUpdate> =
                self.sync_pending.iter_mut().map(|u| u.take().unwrap()).collect();
            self.server.round = r;
            self.server.aggregate(&updates);
            return Ok(true);
        }
        Ok(false)
    }

    /// Run every remaining round.
    pub fn run(&mut self) -> Result<Vec<RoundRecord>> {
        (1..=self.rounds).map(|r| self.run_round(r)).collect()
    }
}
