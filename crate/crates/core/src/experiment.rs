//! Experiment harness: builds a world from a config, runs it, summarises
//! the trajectory and writes `rounds.csv` / `summary.json`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BudgetSetting, ExperimentConfig, MobilityModel};
use crate::controller::{budget_matched_power, BaselinePower, Policy};
use crate::error::{Error, Result};
use crate::mobility::{
    sample_contact_trace, trace_from_paths, waypoint_path, ContactParams, ContactTrace, IntervalKind,
    WaypointState,
};
use crate::protocol::{DistanceModel, RoundRecord, World, WorldSetup};
use crate::rng::{Domain, SeedTree};
use crate::workloads::{
    dirichlet_partition, gaussian_clusters, linear_regression, load_csv, Dataset, Model, ModelKind,
    PartitionSpec,
};

/// Column names of `rounds.csv`.
pub const ROUND_COLUMNS: [&str; 9] = [
    "round",
    "global_loss",
    "test_metric",
    "contacts",
    "mean_theta",
    "max_theta",
    "total_energy_j",
    "mean_k",
    "mean_p",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub seed: u64,
    pub rounds: usize,
    pub devices: usize,
    pub model_size: usize,
    pub final_global_loss: f64,
    pub final_test_loss: f64,
    pub final_test_metric: f64,
    /// First round whose held-out loss reaches `run.target_loss`.
    pub rounds_to_target: Option<usize>,
    pub energy_per_device_j: Vec<f64>,
    pub total_energy_j: f64,
    /// Budgets the queues were run against (`null` when unconstrained).
    pub budgets_j: Vec<f64>,
    pub baseline_power_w: Vec<f64>,
    /// Mean and max staleness over contact events.
    pub mean_theta: f64,
    pub max_theta: u64,
    pub contacts: usize,
    pub failed_uploads: usize,
    pub aggregations: usize,
}

#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

impl MetricsTable {
    /// Held-out loss per round.
    pub fn test_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.test_loss).collect()
    }
}

fn budgets(cfg: &ExperimentConfig, seeds: &SeedTree, policy: &Policy) -> Vec<f64> {
    let n = cfg.run.devices;
    if matches!(policy, Policy::Optimal) {
        return vec![f64::INFINITY; n];
    }
    (0..n)
        .map(|i| match cfg.controller.energy_budget_j {
            BudgetSetting::Fixed(b) => b,
            BudgetSetting::Range([lo, hi]) => {
                if hi > lo {
                    let mut rng = seeds.stream(Domain::Budget, i as u32, 0);
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            }
        })
        .collect()
}

/// Mean contact and gap durations of a trace, for the budget-matched power.
fn trace_means(trace: &ContactTrace) -> Option<(f64, f64)> {
    let (mut c, mut nc, mut g, mut ng) = (0.0, 0, 0.0, 0);
    for iv in trace.intervals() {
        match iv.kind {
            IntervalKind::Contact => {
                c += iv.duration;
                nc += 1;
            }
            IntervalKind::Gap => {
                g += iv.duration;
                ng += 1;
            }
        }
    }
    if nc == 0 {
        return None;
    }
    Some((
        c / nc as f64,
        if ng == 0 { f64::MIN_POSITIVE } else { g / ng as f64 },
    ))
}

struct TaskData {
    model: Model,
    train: Dataset,
    test: Dataset,
}

fn task_data(cfg: &ExperimentConfig, seeds: &SeedTree) -> Result<TaskData> {
    let t = &cfg.task;
    let mut rng = seeds.stream(Domain::Data, 0, 0);
    let (train, test) = if let Some(path) = &t.data_path {
        let all = load_csv(path)?;
        let classes = all.num_classes().max(t.classes);
        let mut samples = all.samples().to_vec();
        samples.shuffle(&mut rng);
        let n_test = ((samples.len() as f64) * t.test_fraction).round().max(1.0) as usize;
        if n_test >= samples.len() {
            return Err(Error::config("task.test_fraction", "leaves no training data"));
        }
        let train = samples.split_off(n_test);
        (Dataset::new(train, classes)?, Dataset::new(samples, classes)?)
    } else if t.kind == ModelKind::Quadratic {
        let (tr, te, _) = linear_regression(t.samples, t.test_samples, t.features, t.classes, &mut rng)?;
        (tr, te)
    } else {
        gaussian_clusters(
            t.samples,
            t.test_samples,
            t.features,
            t.classes,
            t.separation,
            &mut rng,
        )?
    };
    let model = Model::new(t.kind, train.dim(), train.num_classes(), t.hidden);
    if let Some(s) = t.s {
        if s != model.num_params() {
            return Err(Error::config(
                "task.s",
                format!(
                    "architecture has {} parameters, config says {s}",
                    model.num_params()
                ),
            ));
        }
    }
    Ok(TaskData { model, train, test })
}

fn mobility(
    cfg: &ExperimentConfig,
    seeds: &SeedTree,
    horizon: f64,
) -> Result<(Vec<ContactTrace>, DistanceModel)> {
    let m = &cfg.mobility;
    let n = cfg.run.devices;
    let mseeds = m.seed.map(SeedTree::new).unwrap_or(*seeds);
    match m.model {
        MobilityModel::Exponential => {
            let (c, lambda) = m.contact_means();
            let params = ContactParams::new(c, lambda)?;
            let traces = (0..n)
                .map(|i| {
                    let mut rng = mseeds.stream(Domain::Mobility, i as u32, 0);
                    sample_contact_trace(&params, horizon, &mut rng)
                })
                .collect::<Result<_>>()?;
            Ok((traces, DistanceModel::Fixed(vec![m.distance_m; n])))
        }
        MobilityModel::Waypoint => {
            let speed = m.speed_mps.unwrap_or(5.0);
            let pause = m.max_pause_s.unwrap_or(cfg.run.round_duration_s);
            let walk = |id: u32| -> Result<Vec<[f64; 2]>> {
                let mut rng = mseeds.stream(Domain::Mobility, id, 0);
                let start = WaypointState::spawn(m.area_m, m.range_m, speed, pause, &mut rng);
                waypoint_path(&start, horizon, m.step_s, &mut rng)
            };
            let mes = walk(u32::MAX)?;
            let mut traces = Vec::with_capacity(n);
            let mut series = Vec::with_capacity(n);
            for i in 0..n {
                let path = walk(i as u32)?;
                let (t, d) = trace_from_paths(&path, &mes, m.range_m, m.step_s, horizon)?;
                traces.push(t);
                series.push(d);
            }
            Ok((traces, DistanceModel::Sampled { dt: m.step_s, series }))
        }
    }
}

/// Build the simulation world for `cfg` under `policy`.
pub fn build_world(cfg: &ExperimentConfig, policy: Policy) -> Result<World> {
    cfg.validate()?;
    let seeds = SeedTree::new(cfg.run.seed);
    let data = task_data(cfg, &seeds)?;
    let n = cfg.run.devices;
    let spec = PartitionSpec::balanced(cfg.task.rho, n, data.train.num_classes());
    let mut prng = seeds.stream(Domain::Partition, 0, 0);
    let parts = dirichlet_partition(&data.train, &spec, &mut prng)?;
    if let Some(i) = parts.datasets.iter().position(|d| d.is_empty()) {
        return Err(Error::config(
            "task.samples",
            format!("device {i} received no samples"),
        ));
    }
    let mut irng = seeds.stream(Domain::Init, 0, 0);
    let w0 = data.model.init(&mut irng);

    let delta = cfg.run.round_duration_s;
    let horizon = (cfg.run.rounds as f64 + 1.0) * delta;
    let (traces, distances) = mobility(cfg, &seeds, horizon)?;
    let budgets = budgets(cfg, &seeds, &policy);
    let channel = cfg.channel.params();
    let baseline_power = match cfg.controller.baseline_power()? {
        BaselinePower::Max => vec![channel.p_max; n],
        BaselinePower::Fixed(w) => vec![w.min(channel.p_max); n],
        BaselinePower::BudgetMatched => (0..n)
            .map(|i| {
                let (c, lambda) = match cfg.mobility.model {
                    MobilityModel::Exponential => cfg.mobility.contact_means(),
                    MobilityModel::Waypoint => match trace_means(&traces[i]) {
                        Some(m) => m,
                        None => return channel.p_max,
                    },
                };
                budget_matched_power(budgets[i], cfg.run.rounds, c, lambda, delta, channel.p_max)
            })
            .collect(),
    };
    World::new(WorldSetup {
        model: data.model,
        w0,
        device_data: parts.datasets,
        test_data: data.test,
        traces,
        distances,
        channel,
        policy,
        baseline_power,
        budgets,
        hard_budget: cfg.controller.hard_budget,
        rounds: cfg.run.rounds,
        round_duration: delta,
        eta: cfg.task.eta,
        batch_size: cfg.task.batch_size,
        u_bits: cfg.controller.u_bits,
        seeds,
    })
}

/// Run `cfg` under its configured policy.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    run_with_policy(cfg, cfg.controller.policy()?)
}

pub fn run_with_policy(cfg: &ExperimentConfig, policy: Policy) -> Result<MetricsTable> {
    let mut world = build_world(cfg, policy)?;
    let records = world.run()?;
    let summary = summarize(cfg, &world, &records);
    Ok(MetricsTable { records, summary })
}

fn summarize(cfg: &ExperimentConfig, world: &World, records: &[RoundRecord]) -> Summary {
    let (loss, test_loss, metric) = match records.last() {
        Some(r) => (r.global_loss, r.test_loss, r.test_metric),
        None => world.evaluate().unwrap_or((f64::NAN, f64::NAN, f64::NAN)),
    };
    let rounds_to_target = cfg
        .run
        .target_loss
        .and_then(|t| records.iter().find(|r| r.test_loss <= t).map(|r| r.round));
    let (mut theta_sum, mut max_theta, mut contacts, mut failed) = (0.0, 0u64, 0usize, 0usize);
    for r in records {
        for d in r.devices.iter().filter(|d| d.zeta) {
            theta_sum += d.theta as f64;
            max_theta = max_theta.max(d.theta);
            contacts += 1;
            failed += usize::from(d.failed);
        }
    }
    Summary {
        policy: world.policy.name().to_string(),
        seed: cfg.run.seed,
        rounds: records.len(),
        devices: world.num_devices(),
        model_size: world.model_size(),
        final_global_loss: loss,
        final_test_loss: test_loss,
        final_test_metric: metric,
        rounds_to_target,
        energy_per_device_j: world.cumulative_energy.clone(),
        total_energy_j: world.cumulative_energy.iter().sum(),
        budgets_j: world.queues.iter().map(|q| q.budget).collect(),
        baseline_power_w: world.baseline_power.clone(),
        mean_theta: if contacts == 0 {
            0.0
        } else {
            theta_sum / contacts as f64
        },
        max_theta,
        contacts,
        failed_uploads: failed,
        aggregations: records.iter().filter(|r| r.aggregated).count(),
    }
}

/// `rounds.csv` contents.
pub fn rounds_csv(records: &[RoundRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ROUND_COLUMNS)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.global_loss.to_string(),
            r.test_metric.to_string(),
            r.contacts.to_string(),
            r.mean_theta().to_string(),
            r.max_theta().to_string(),
            r.total_energy().to_string(),
            r.mean_k().to_string(),
            r.mean_p().to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the canonical config and the round table.
pub fn fingerprint(cfg: &ExperimentConfig, csv: &[u8]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    h.update(csv);
    Ok(hex(&h.finalize()))
}

/// Write `rounds.csv` and `summary.json` into `dir`; returns the fingerprint.
pub fn emit(table: &MetricsTable, cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let csv = rounds_csv(&table.records)?;
    std::fs::write(dir.join("rounds.csv"), &csv)?;
    let fp = fingerprint(cfg, &csv)?;
    let summary = serde_json::json!({
        "config": cfg,
        "summary": table.summary,
        "fingerprint": fp,
    });
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(fp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Contact,
    Intercontact,
    Speed,
    V,
}

impl SweepAxis {
    pub fn key(&self) -> &'static str {
        match self {
            SweepAxis::Contact => "mobility.mean_contact_s",
            SweepAxis::Intercontact => "mobility.mean_intercontact_s",
            SweepAxis::Speed => "mobility.speed_mps",
            SweepAxis::V => "controller.V",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Contact => "contact",
            SweepAxis::Intercontact => "intercontact",
            SweepAxis::Speed => "speed",
            SweepAxis::V => "V",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contact" => Ok(SweepAxis::Contact),
            "intercontact" => Ok(SweepAxis::Intercontact),
            "speed" => Ok(SweepAxis::Speed),
            "V" | "v" => Ok(SweepAxis::V),
            other => Err(Error::param(format!(
                "unknown sweep axis `{other}` (expected contact, intercontact, speed or V)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: f64,
    pub repetition: usize,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub table: MetricsTable,
}

/// Seed of sweep repetition `k`. Every axis value and policy shares it, so
/// comparisons along the axis are paired. Kept below 2^63 so the seed
/// survives a TOML round trip.
pub fn repetition_seed(root: u64, k: usize) -> u64 {
    SeedTree::new(root).child(k as u64).root() >> 1
}

/// One run per (value, repetition, policy), executed in parallel. An empty
/// `policies` list uses the configured policy.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    repetitions: usize,
    policies: &[String],
) -> Result<Vec<SweepPoint>> {
    let policies: Vec<String> = if policies.is_empty() {
        vec![cfg.controller.policy.clone()]
    } else {
        policies.to_vec()
    };
    let mut jobs = Vec::new();
    for &value in values {
        for k in 0..repetitions.max(1) {
            for p in &policies {
                let seed = repetition_seed(cfg.run.seed, k);
                let c = cfg
                    .set(&format!("{}={value:?}", axis.key()))?
                    .set(&format!("controller.policy=\"{p}\""))?
                    .set(&format!("run.seed={seed}"))?;
                jobs.push((value, k, seed, c));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(value, repetition, seed, config)| {
            let table = run_experiment(&config)?;
            Ok(SweepPoint {
                axis,
                value,
                repetition,
                seed,
                config,
                table,
            })
        })
        .collect()
}

/// `sweep.csv`: one line per run.
pub fn sweep_csv(points: &[SweepPoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "axis",
        "value",
        "repetition",
        "seed",
        "policy",
        "final_global_loss",
        "final_test_loss",
        "final_test_metric",
        "rounds_to_target",
        "total_energy_j",
        "mean_theta",
    ])?;
    for p in points {
        let s = &p.table.summary;
        w.write_record([
            p.axis.name().to_string(),
            p.value.to_string(),
            p.repetition.to_string(),
            p.seed.to_string(),
            s.policy.clone(),
            s.final_global_loss.to_string(),
            s.final_test_loss.to_string(),
            s.final_test_metric.to_string(),
            s.rounds_to_target.map(|r| r.to_string()).unwrap_or_default(),
            s.total_energy_j.to_string(),
            s.mean_theta.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(
            r#"
[run]
rounds = 12
devices = 4
[task]
features = 9
classes = 4
samples = 200
test_samples = 50
[channel]
bandwidth_hz = 1000.0
[controller]
energy_budget_j = 2.0
"#,
            &[],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_csv() {
        let cfg = small();
        let a = rounds_csv(&run_experiment(&cfg).unwrap().records).unwrap();
        let b = rounds_csv(&run_experiment(&cfg).unwrap().records).unwrap();
        assert_eq!(a, b);
        let header = String::from_utf8(a).unwrap();
        assert_eq!(header.lines().next().unwrap().split(',').count(), 9);
    }

    #[test]
    fn zero_rounds_is_empty() {
        let cfg = small().set("run.rounds=0").unwrap();
        let t = run_experiment(&cfg).unwrap();
        assert!(t.records.is_empty());
        assert_eq!(t.summary.total_energy_j, 0.0);
    }

    #[test]
    fn waypoint_runs() {
        let cfg = small()
            .set("mobility.model=\"waypoint\"")
            .unwrap()
            .set("mobility.area_m=[300.0, 300.0]")
            .unwrap();
        let t = run_experiment(&cfg).unwrap();
        assert_eq!(t.records.len(), 12);
    }

    #[test]
    fn axis_names() {
        for a in ["contact", "intercontact", "speed", "V"] {
            assert_eq!(a.parse::<SweepAxis>().unwrap().name(), a);
        }
    }
}
