//! Batch evaluation, aggregate metrics, and the retrieval benchmark.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::memory::{retrieve_embedded, MemoryStore, RetrievalConfig, RetrievalMode};
use crate::model::{
    DrivingStyle, EhmiMessage, EpisodeOutcome, ExperienceDescription, Intention, MemoryUnit, MetaAction,
    ScenarioDescription, MAX_SPEED, TTC_CAP,
};
use crate::runtime::{run_episode, EpisodeResult, RunConfig, RuntimeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub seed: u64,
    pub outcome: String,
    pub pet: Option<f64>,
    pub dangerous: bool,
    pub mean_v: f64,
    pub min_v: f64,
    pub max_v: f64,
}

impl From<&EpisodeResult> for EpisodeRow {
    fn from(r: &EpisodeResult) -> Self {
        EpisodeRow {
            episode: r.episode,
            seed: r.seed,
            outcome: r.outcome.as_str().to_string(),
            pet: r.pet,
            dangerous: r.dangerous,
            mean_v: r.mean_v,
            min_v: r.min_v,
            max_v: r.max_v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub dangerous_rate: f64,
    pub pets: Vec<f64>,
    /// Travel velocity over all AV ticks (m/s).
    pub mean_v: f64,
    pub max_v: f64,
    pub min_v: f64,
    pub outcomes: Vec<EpisodeOutcome>,
    pub rows: Vec<EpisodeRow>,
}

impl MetricsReport {
    pub fn from_results(results: &[EpisodeResult]) -> Self {
        let n = results.len().max(1) as f64;
        let count = |o: EpisodeOutcome| results.iter().filter(|r| r.outcome == o).count() as f64;
        let total_ticks: f64 = results.iter().map(|r| r.ticks as f64).sum();
        let mean_v = if total_ticks > 0.0 {
            results.iter().map(|r| r.mean_v * r.ticks as f64).sum::<f64>() / total_ticks
        } else {
            0.0
        };
        MetricsReport {
            episodes: results.len(),
            success_rate: count(EpisodeOutcome::Success) / n,
            collision_rate: count(EpisodeOutcome::Collision) / n,
            dangerous_rate: results.iter().filter(|r| r.dangerous).count() as f64 / n,
            pets: results.iter().filter_map(|r| r.pet).collect(),
            mean_v,
            max_v: results.iter().map(|r| r.max_v).fold(0.0, f64::max),
            min_v: results.iter().map(|r| r.min_v).reduce(f64::min).unwrap_or(0.0),
            outcomes: results.iter().map(|r| r.outcome).collect(),
            rows: results.iter().map(EpisodeRow::from).collect(),
        }
    }

    pub fn rate(&self, outcome: EpisodeOutcome) -> f64 {
        let hits = self.outcomes.iter().filter(|o| **o == outcome).count();
        hits as f64 / self.episodes.max(1) as f64
    }

    /// `episode,seed,outcome,pet,dangerous,mean_v,min_v,max_v`
    pub fn to_csv(&self) -> Result<String, RuntimeError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Where `evaluate` writes its files.
#[derive(Debug, Clone, Default)]
pub struct EvalOutput {
    pub csv: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    /// Append heading, eHMI text, style and intention to trajectory rows.
    pub annotated: bool,
}

/// Runs `cfg.episodes` episodes with seeds `seed..seed+episodes` in parallel.
pub fn evaluate(cfg: &RunConfig, store: &MemoryStore) -> Result<MetricsReport, RuntimeError> {
    evaluate_to(cfg, store, &EvalOutput::default())
}

pub fn evaluate_to(cfg: &RunConfig, store: &MemoryStore, out: &EvalOutput) -> Result<MetricsReport, RuntimeError> {
    if cfg.episodes == 0 {
        return Err(RuntimeError::Config("evaluation needs at least one episode".into()));
    }
    cfg.validate()?;
    if let Some(dir) = &out.trajectories {
        std::fs::create_dir_all(dir)?;
    }
    let results: Vec<EpisodeResult> = (0..cfg.episodes)
        .into_par_iter()
        .map(|episode| {
            let (result, trajectory) = run_episode(cfg, store, episode)?;
            if let Some(dir) = &out.trajectories {
                trajectory.write_csv(&dir.join(format!("episode_{episode:04}.csv")), out.annotated)?;
            }
            Ok(result)
        })
        .collect::<Result<_, RuntimeError>>()?;
    let report = MetricsReport::from_results(&results);
    if let Some(path) = &out.csv {
        std::fs::write(path, report.to_csv()?)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n_units: usize,
    pub mode: String,
    pub mean_us: f64,
    pub p95_us: f64,
    pub mean_scanned: f64,
}

const BENCH_TEXTS: [&str; 4] = ["", "I will be slower", "I will be faster", "go ahead"];

fn random_scenario(rng: &mut ChaCha8Rng) -> ScenarioDescription {
    let mut v = [0.0; 9];
    for (k, x) in v.iter_mut().enumerate() {
        *x = match k {
            2 | 3 | 6 | 7 => rng.gen_range(-MAX_SPEED..=MAX_SPEED),
            8 => rng.gen_range(0.0..=TTC_CAP),
            _ => rng.gen_range(-40.0..=40.0),
        };
    }
    ScenarioDescription::new(v)
}

fn random_experience(rng: &mut ChaCha8Rng, style: DrivingStyle) -> ExperienceDescription {
    let action = MetaAction::ALL[rng.gen_range(0..3)];
    ExperienceDescription {
        intention: if rng.gen_bool(0.5) { Intention::Yield } else { Intention::Rush },
        style,
        instruction: BENCH_TEXTS[rng.gen_range(0..BENCH_TEXTS.len())].to_string(),
        ehmi: EhmiMessage::for_action(action).as_str().to_string(),
    }
}

/// Uniform random store: scenarios uniform over their ranges, styles uniform.
pub fn synthetic_store(n: usize, seed: u64) -> MemoryStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = MemoryStore::new();
    for k in 0..n {
        let style = DrivingStyle::ALL[rng.gen_range(0..3)];
        let scenario = random_scenario(&mut rng);
        let experience = random_experience(&mut rng, style);
        store.insert(MemoryUnit {
            scenario,
            experience,
            action: MetaAction::ALL[rng.gen_range(0..3)],
            episode_id: k as u64,
            frame_index: 0,
        });
    }
    store
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank]
}

/// Times partitioned against pooled retrieval on synthetic stores.
pub fn bench_retrieval(sizes: &[usize], queries: usize, seed: u64) -> Vec<BenchRow> {
    let cfg = RetrievalConfig::default();
    let mut rows = Vec::new();
    for &n in sizes {
        let store = synthetic_store(n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let qs: Vec<_> = (0..queries)
            .map(|_| {
                let style = DrivingStyle::ALL[rng.gen_range(0..3)];
                let s = random_scenario(&mut rng);
                let e = random_experience(&mut rng, style);
                (style, s, store.embed(e.fields()))
            })
            .collect();
        for (name, mode) in [("partitioned", RetrievalMode::PARTITIONED), ("pooled", RetrievalMode::POOLED)] {
            let mut times = Vec::with_capacity(queries);
            let mut scanned = 0usize;
            for (style, s, q) in &qs {
                let start = Instant::now();
                let r = retrieve_embedded(&store, mode, *style, s, q, &cfg);
                times.push(start.elapsed().as_secs_f64() * 1e6);
                scanned += std::hint::black_box(r).scanned;
            }
            let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rows.push(BenchRow {
                n_units: n,
                mode: name.to_string(),
                mean_us: mean,
                p95_us: percentile(&times, 0.95),
                mean_scanned: scanned as f64 / queries.max(1) as f64,
            });
        }
    }
    rows
}

/// `n_units,mode,mean_us,p95_us,mean_scanned`
pub fn write_bench_csv(rows: &[BenchRow], out: impl Write) -> Result<(), RuntimeError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<(), RuntimeError> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(outcome: EpisodeOutcome, dangerous: bool, pet: Option<f64>) -> EpisodeResult {
        EpisodeResult {
            episode: 0,
            seed: 0,
            outcome,
            pet,
            dangerous,
            mean_v: 3.0,
            min_v: 1.0,
            max_v: 5.0,
            ticks: 10,
            reasoner_calls: 0,
            fallbacks: 0,
            units: Vec::new(),
            gaps: Vec::new(),
        }
    }

    #[test]
    fn report_aggregates() {
        let all_ok = vec![result(EpisodeOutcome::Success, false, Some(2.5)); 4];
        let r = MetricsReport::from_results(&all_ok);
        assert_eq!(r.success_rate, 1.0);
        assert_eq!(r.pets, vec![2.5; 4]);
        let mixed = vec![
            result(EpisodeOutcome::Success, true, Some(0.3)),
            result(EpisodeOutcome::Collision, true, None),
            result(EpisodeOutcome::Deadlock, false, None),
            result(EpisodeOutcome::Success, false, Some(4.0)),
        ];
        let r = MetricsReport::from_results(&mixed);
        assert_eq!(r.success_rate, 0.5);
        assert_eq!(r.collision_rate, 0.25);
        assert_eq!(r.dangerous_rate, 0.5);
        assert_eq!(r.rate(EpisodeOutcome::Deadlock), 0.25);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("episode,seed,outcome,pet,dangerous,mean_v,min_v,max_v\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn zero_episodes_is_an_error() {
        let cfg = RunConfig {
            episodes: 0,
            ..Default::default()
        };
        assert!(evaluate(&cfg, &MemoryStore::new()).is_err());
    }

    #[test]
    fn bench_is_well_formed_and_counts_repeat() {
        let a = bench_retrieval(&[1000], 20, 1);
        let b = bench_retrieval(&[1000], 20, 1);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].mean_scanned, b[0].mean_scanned);
        assert_eq!(a[1].mean_scanned, 1000.0);
        assert!(a[0].mean_scanned < a[1].mean_scanned);
        let mut buf = Vec::new();
        write_bench_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n_units,mode,mean_us,p95_us,mean_scanned\n"));
    }
}
