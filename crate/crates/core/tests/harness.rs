use mobafl::controller::{EnergyQueue, Policy};
use mobafl::experiment::{
    build_world, emit, repetition_seed, run_sweep, run_with_policy, SweepAxis, ROUND_COLUMNS,
};
use mobafl::{run_experiment, ExperimentConfig};

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");

fn small(extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = [
        "run.rounds=60",
        "run.devices=4",
        "task.samples=400",
        "task.test_samples=100",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::load(DESK, &o).unwrap()
}

#[test]
fn repeat_runs_are_byte_identical() {
    let cfg = small(&[]);
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    let fa = emit(&a, &cfg, dir.path().join("a")).unwrap();
    let fb = emit(&b, &cfg, dir.path().join("b")).unwrap();
    assert_eq!(fa, fb);
    let ra = std::fs::read(dir.path().join("a/rounds.csv")).unwrap();
    let rb = std::fs::read(dir.path().join("b/rounds.csv")).unwrap();
    assert_eq!(ra, rb);

    let other = run_experiment(&small(&["run.seed=8"])).unwrap();
    assert_ne!(other.summary.final_global_loss, a.summary.final_global_loss);
}

#[test]
fn emitted_files_have_the_documented_shape() {
    let cfg = small(&[]);
    let t = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let fp = emit(&t, &cfg, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), ROUND_COLUMNS.join(","));
    assert_eq!(lines.clone().count(), cfg.run.rounds);
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 9);
        assert_eq!(fields[0].parse::<usize>().unwrap(), i + 1);
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["fingerprint"], fp);
    assert_eq!(fp.len(), 64);
    assert_eq!(json["summary"]["rounds"], 60);
    let echoed: ExperimentConfig = serde_json::from_value(json["config"].clone()).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn zero_rounds_leave_the_model_untouched() {
    let cfg = small(&["run.rounds=0"]);
    let t = run_experiment(&cfg).unwrap();
    assert!(t.records.is_empty());
    let world = build_world(&cfg, Policy::Mads { v: cfg.controller.v }).unwrap();
    assert_eq!(&world.server.w, world.server.initial_model());
    assert_eq!(t.summary.total_energy_j, 0.0);
}

#[test]
fn optimal_matches_mads_with_unlimited_budget() {
    let cfg = small(&["controller.hard_budget=false"]);
    let mut mads = build_world(&cfg, Policy::Mads { v: cfg.controller.v }).unwrap();
    for q in mads.queues.iter_mut() {
        *q = EnergyQueue::new(f64::INFINITY, cfg.run.rounds);
    }
    let mut optimal = build_world(&cfg, Policy::Optimal).unwrap();
    for r in 1..=cfg.run.rounds {
        let a = mads.run_round(r).unwrap();
        let b = optimal.run_round(r).unwrap();
        assert_eq!(a.devices, b.devices, "round {r}");
        assert_eq!(mads.server.w, optimal.server.w, "round {r}");
    }
}

#[test]
fn huge_v_spends_like_the_benchmark() {
    let cfg = small(&["controller.hard_budget=false"]);
    let mads = run_with_policy(&cfg, Policy::Mads { v: 1e6 }).unwrap();
    let opt = run_with_policy(&cfg, Policy::Optimal).unwrap();
    let (a, b) = (mads.summary.total_energy_j, opt.summary.total_energy_j);
    assert!((a - b).abs() <= 1e-9 * b, "{a} vs {b}");
}

#[test]
fn afl_spar_ignores_the_queue() {
    let a = run_experiment(&small(&[
        "controller.policy=\"afl_spar\"",
        "controller.hard_budget=false",
    ]))
    .unwrap();
    let b = run_experiment(&small(&[
        "controller.policy=\"afl_spar\"",
        "controller.hard_budget=false",
        "controller.energy_budget_j=0.01",
    ]))
    .unwrap();
    for (x, y) in a.records.iter().zip(&b.records) {
        for (dx, dy) in x.devices.iter().zip(&y.devices) {
            assert_eq!((dx.k, dx.p, dx.energy), (dy.k, dy.p, dy.energy));
        }
    }
}

#[test]
fn hard_budget_is_never_exceeded() {
    for policy in ["mads", "afl", "afl_spar", "sfl_spar"] {
        let cfg = small(&[
            &format!("controller.policy=\"{policy}\""),
            "controller.energy_budget_j=[0.5,1.0]",
        ]);
        let t = run_experiment(&cfg).unwrap();
        for (e, b) in t.summary.energy_per_device_j.iter().zip(&t.summary.budgets_j) {
            assert!(e <= b, "{policy}: spent {e} of {b}");
        }
    }
}

#[test]
fn barrier_policy_aggregates_only_when_everyone_contributed() {
    let cfg = small(&["controller.policy=\"sfl_spar\"", "controller.hard_budget=false"]);
    let t = run_experiment(&cfg).unwrap();
    let n = cfg.run.devices;
    let mut contributed = vec![false; n];
    for rec in &t.records {
        for (i, d) in rec.devices.iter().enumerate() {
            if d.zeta && !d.failed && !contributed[i] {
                contributed[i] = true;
            }
        }
        if rec.aggregated {
            assert!(contributed.iter().all(|&c| c), "round {}", rec.round);
            contributed = vec![false; n];
        } else {
            assert!(
                !contributed.iter().all(|&c| c),
                "round {} should have aggregated",
                rec.round
            );
        }
    }
}

#[test]
fn sweep_repetitions_are_paired_across_values() {
    let cfg = small(&["run.rounds=10"]);
    let pts = run_sweep(
        &cfg,
        SweepAxis::Contact,
        &[2.0, 8.0],
        2,
        &["mads".into(), "afl".into()],
    )
    .unwrap();
    assert_eq!(pts.len(), 8);
    for p in &pts {
        assert_eq!(p.seed, repetition_seed(cfg.run.seed, p.repetition));
        assert_eq!(p.config.run.seed, p.seed);
        assert_eq!(p.config.mobility.mean_contact_s, p.value);
    }
    let again = run_sweep(
        &cfg,
        SweepAxis::Contact,
        &[2.0, 8.0],
        2,
        &["mads".into(), "afl".into()],
    )
    .unwrap();
    for (a, b) in pts.iter().zip(&again) {
        assert_eq!(a.table.summary, b.table.summary);
    }
}

#[test]
fn overrides_reject_unknown_and_invalid_keys() {
    let err = ExperimentConfig::load(DESK, &["run.nope=1".to_string()])
        .unwrap_err()
        .to_string();
    assert!(err.contains("nope"), "{err}");
    let err = ExperimentConfig::load(DESK, &["run.round_duration_s=-1".to_string()])
        .unwrap_err()
        .to_string();
    assert!(err.contains("run.round_duration_s"), "{err}");
    let err = ExperimentConfig::load(DESK, &["controller.policy=\"fast\"".to_string()])
        .unwrap_err()
        .to_string();
    assert!(err.contains("controller.policy"), "{err}");
}
