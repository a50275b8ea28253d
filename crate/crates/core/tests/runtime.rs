use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use actor_reasoner::environment::{build_scenario, step_world, ScenarioKind, World, TICK};
use actor_reasoner::evaluation::{evaluate_to, EvalOutput};
use actor_reasoner::hv_driver::{default_style_params, hv_decide, BeliefState};
use actor_reasoner::memory::save_store;
use actor_reasoner::model::{DrivingStyle, EpisodeOutcome, Intention, MetaAction};
use actor_reasoner::runtime::{
    baseline_decide, run_episode, run_episode_synchronous, train, BaselineKind, Clock, RunConfig, Session,
};

#[test]
fn fifty_intersection_episodes_fill_every_block() {
    let cfg = RunConfig { episodes: 50, seed: 3, ..Default::default() };
    let store = train(&cfg).unwrap();
    for block in store.blocks() {
        assert!(!block.is_empty());
    }
    let empty = actor_reasoner::memory::MemoryStore::new();
    let reasoner_only = RunConfig { mode: actor_reasoner::runtime::DecisionMode::ReasonerOnly, ..cfg.clone() };
    let mut failed = BTreeSet::new();
    for ep in 0..cfg.episodes {
        let (r, _) = run_episode_synchronous(&reasoner_only, &empty, ep).unwrap();
        if matches!(r.outcome, EpisodeOutcome::Collision | EpisodeOutcome::Deadlock) {
            failed.insert(ep as u64);
        }
    }
    assert!(store.units().all(|u| !failed.contains(&u.episode_id)));
}

#[test]
fn training_writes_identical_files() {
    let cfg = RunConfig { episodes: 5, scenario: ScenarioKind::Merging, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    save_store(&train(&cfg).unwrap(), &a).unwrap();
    save_store(&train(&cfg).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn slow_reasoner_leaves_actor_on_general() {
    let store = train(&RunConfig { episodes: 10, ..Default::default() }).unwrap();
    let cfg = RunConfig { reasoner_latency: 2.0, hv_styles: vec![DrivingStyle::Aggressive], ..Default::default() };
    let session = Session::new(&cfg, 0).unwrap();
    let board = session.board.clone();
    let (_, traj) = session.run(&cfg, &store).unwrap();
    let log = board.log();

    let first_reasoner = log.iter().find(|l| l.writer == "reasoner").expect("reasoner wrote");
    assert!((first_reasoner.t - 2.0).abs() < 1e-9, "first reasoner write at {}", first_reasoner.t);
    let early_actor: Vec<f64> = log
        .iter()
        .filter(|l| l.writer == "actor" && l.version < first_reasoner.version)
        .map(|l| l.t)
        .collect();
    assert_eq!(early_actor.len(), 20);
    for (k, t) in early_actor.iter().enumerate() {
        assert!((t - k as f64 * TICK).abs() < 1e-9);
    }
    for row in traj.rows.iter().filter(|r| r.role == "AV" && r.t < 2.0 - 1e-9) {
        assert_eq!(row.style, "general", "t={}", row.t);
    }
}

#[test]
fn log_versions_increase_and_actions_are_fresh() {
    let store = train(&RunConfig { episodes: 10, ..Default::default() }).unwrap();
    for (scenario, n_hv) in [(ScenarioKind::Intersection, 2), (ScenarioKind::Roundabout, 1)] {
        let cfg = RunConfig { scenario, n_hv, ..Default::default() };
        let session = Session::new(&cfg, 4).unwrap();
        let board = session.board.clone();
        session.run(&cfg, &store).unwrap();
        let log = board.log();
        assert!(log.windows(2).all(|w| w[0].version < w[1].version));
        let mut last_actor: Option<f64> = None;
        for line in &log {
            match line.writer {
                "actor" => last_actor = Some(line.t),
                "environment" => {
                    let written = last_actor.expect("actor wrote before the first step");
                    assert!(line.t - written <= TICK + cfg.actor_period + 1e-9, "stale action at {}", line.t);
                }
                _ => {}
            }
        }
    }
}

#[test]
fn stop_flag_ends_all_loops_promptly() {
    let store = train(&RunConfig { episodes: 5, ..Default::default() }).unwrap();
    let cfg = RunConfig { clock: Clock::RealTime, reasoner_latency: 5.0, ..Default::default() };
    let session = Session::new(&cfg, 0).unwrap();
    let board = session.board.clone();
    let stopper = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(400));
        board.stop();
        Instant::now()
    });
    let (result, traj) = session.run(&cfg, &store).unwrap();
    let returned = Instant::now();
    let stopped = stopper.join().unwrap();
    assert!(returned.duration_since(stopped) < Duration::from_millis(300));
    assert_eq!(result.outcome, EpisodeOutcome::Timeout);
    assert!(traj.rows.len() < 2 * 20);
}

#[test]
fn realtime_clock_completes_an_episode() {
    let store = train(&RunConfig { episodes: 10, ..Default::default() }).unwrap();
    let cfg = RunConfig { clock: Clock::RealTime, ..Default::default() };
    let (result, _) = run_episode(&cfg, &store, 1).unwrap();
    assert_eq!(result.outcome, EpisodeOutcome::Success);
}

#[test]
fn evaluation_totals_match_a_recount() {
    let store = train(&RunConfig { episodes: 30, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("eval.csv");
    let cfg = RunConfig { episodes: 100, n_hv: 2, seed: 500, ..Default::default() };
    let out = EvalOutput { csv: Some(csv.clone()), trajectories: None, annotated: false };
    let report = evaluate_to(&cfg, &store, &out).unwrap();

    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "episode,seed,outcome,pet,dangerous,mean_v,min_v,max_v");
    let (mut n, mut ok, mut dangerous, mut pets) = (0usize, 0usize, 0usize, 0usize);
    let mut seeds = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        n += 1;
        seeds.push(cols[1].parse::<u64>().unwrap());
        ok += (cols[2] == "success") as usize;
        dangerous += (cols[4] == "true") as usize;
        pets += (!cols[3].is_empty()) as usize;
    }
    assert_eq!(n, 100);
    assert_eq!(seeds, (500..600).collect::<Vec<_>>());
    assert_eq!(report.success_rate, ok as f64 / 100.0);
    assert_eq!(report.dangerous_rate, dangerous as f64 / 100.0);
    assert_eq!(report.pets.len(), pets);
}

/// Swaps the AV and the HV so the HV's decision rule can be run from the AV side.
fn mirrored(w: &World) -> World {
    let mut m = w.clone();
    let (a, b) = (m.vehicles[0].clone(), m.vehicles[1].clone());
    m.vehicles[0].path_id = b.path_id;
    m.vehicles[0].s = b.s;
    m.vehicles[0].v = b.v;
    m.vehicles[1].path_id = a.path_id;
    m.vehicles[1].s = a.s;
    m.vehicles[1].v = a.v;
    m
}

#[test]
fn game_baseline_agrees_with_driver_rule_on_mirrored_states() {
    let general = default_style_params(DrivingStyle::General);
    for seed in 0..40 {
        let mut w = build_scenario(ScenarioKind::Intersection, seed, 1);
        for _ in 0..(seed % 7) * 5 {
            let accel = w.vehicles.iter().map(|v| (v.id, 0.0)).collect();
            w = step_world(&w, &accel, TICK).unwrap();
        }
        let hv_id = w.vehicles[1].id;
        let m = mirrored(&w);
        let expected = hv_decide(&m, hv_id, &general, BeliefState { p_yield: 0.5 }, Intention::Rush).unwrap();
        assert_eq!(baseline_decide(BaselineKind::Game, &w).unwrap(), expected, "seed {seed}");
    }
}

#[test]
fn pidm_rules() {
    let mut w = build_scenario(ScenarioKind::Intersection, 0, 1);
    // HV one second ahead of the AV at the conflict point.
    let (d_av, d_hv) = (w.distance_to_conflict(0, w.vehicles[1].path_id).unwrap(), 5.0);
    let hv_s = w.paths[w.vehicles[1].path_id as usize].conflict_with(w.vehicles[0].path_id).unwrap() - d_hv;
    w.vehicles[1].s = hv_s;
    w.vehicles[1].v = 5.0;
    w.vehicles[0].v = d_av / 2.0;
    assert_eq!(baseline_decide(BaselineKind::Pidm, &w).unwrap(), MetaAction::Decelerate);
    w.vehicles.truncate(1);
    w.vehicles[0].v = 3.0;
    assert_eq!(baseline_decide(BaselineKind::Pidm, &w).unwrap(), MetaAction::Accelerate);
}
