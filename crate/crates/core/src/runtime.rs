//! Episode orchestration: the Reasoner, Actor and Environment loops over a
//! shared session board, a synchronous single-loop reference, and training.

use std::collections::BTreeMap;
use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{
    build_scenario, check_termination, compute_pet, is_dangerous, observe, pair_conflict_gap, step_world, EnvError,
    Role, ScenarioKind, World, TICK, VEHICLE_LENGTH, ZONE_RADIUS,
};
use crate::hv_driver::{default_style_params, must_follow, Approach, HvMind, StyleParams};
use crate::memory::{curate_episode, retrieve_embedded, MemoryError, MemoryStore, RetrievalConfig, RetrievalMode};
use crate::model::{
    DrivingStyle, EpisodeOutcome, ExperienceDescription, Instruction, Intention, MemoryUnit, MetaAction,
    MAX_SPEED,
};
use crate::reasoner::{build_prompt, BackendConfig, BackendError, Prompt, Reasoner, ReasonerOutput};
use crate::snapshot::{SharedSnapshot, SnapshotCell};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    #[default]
    ActorReasoner,
    ReasonerOnly,
    BaselinePidm,
    BaselineGame,
}

/// How the HVs are driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HvControl {
    /// Game-theoretic driver model.
    #[default]
    Model,
    /// Brake to a stop short of the conflict point, wait silently until the
    /// AV is through, then drive on.
    StopAndWait,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Lockstep simulated time: loops run in Reasoner → Actor → Environment
    /// order each tick and reasoning latency is counted in ticks.
    #[default]
    Virtual,
    /// Free-running loops paced by the wall clock.
    RealTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioKind,
    pub n_hv: usize,
    pub episodes: usize,
    pub seed: u64,
    pub backend: BackendConfig,
    pub retrieval: RetrievalConfig,
    pub dt: f64,
    pub actor_period: f64,
    pub mode: DecisionMode,
    pub use_partition: bool,
    pub use_two_layer: bool,
    pub use_instructions: bool,
    /// Extra seconds added to every Reasoner call.
    pub reasoner_latency: f64,
    /// Styles assigned to HVs in rotation; empty keeps the seeded draw.
    pub hv_styles: Vec<DrivingStyle>,
    /// Per-style replacements for the built-in HV parameters.
    pub hv_params: BTreeMap<DrivingStyle, StyleParams>,
    pub hv_control: HvControl,
    pub clock: Clock,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: ScenarioKind::Intersection,
            n_hv: 1,
            episodes: 100,
            seed: 0,
            backend: BackendConfig::default(),
            retrieval: RetrievalConfig::default(),
            dt: TICK,
            actor_period: TICK,
            mode: DecisionMode::ActorReasoner,
            use_partition: true,
            use_two_layer: true,
            use_instructions: true,
            reasoner_latency: 0.0,
            hv_styles: Vec::new(),
            hv_params: BTreeMap::new(),
            hv_control: HvControl::Model,
            clock: Clock::Virtual,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if (self.dt - TICK).abs() > 1e-12 {
            return Err(RuntimeError::Config(format!("dt must be {TICK} s")));
        }
        let ratio = self.actor_period / self.dt;
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(RuntimeError::Config("actor_period must be a whole number of ticks".into()));
        }
        if !(1..=3).contains(&self.n_hv) {
            return Err(RuntimeError::Config("n_hv must be 1..=3".into()));
        }
        if !(self.reasoner_latency >= 0.0) {
            return Err(RuntimeError::Config("reasoner_latency must be non-negative".into()));
        }
        for (style, p) in &self.hv_params {
            p.validate().map_err(|e| RuntimeError::Config(format!("hv_params.{style}: {e}")))?;
        }
        self.backend.validate()?;
        self.retrieval.validate()?;
        Ok(())
    }

    pub fn retrieval_mode(&self) -> RetrievalMode {
        RetrievalMode {
            partitioned: self.use_partition,
            two_layer: self.use_two_layer,
        }
    }

    pub fn episode_seed(&self, episode: usize) -> u64 {
        self.seed.wrapping_add(episode as u64)
    }

    /// HV parameters for a style, after any configured override.
    pub fn style_params(&self, style: DrivingStyle) -> StyleParams {
        self.hv_params.get(&style).copied().unwrap_or_else(|| default_style_params(style))
    }

    fn actor_every(&self) -> u64 {
        (self.actor_period / self.dt).round() as u64
    }
}

/// One line of the structured run log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogLine {
    pub t: f64,
    pub writer: &'static str,
    pub field: String,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VehicleView {
    pub id: u32,
    pub role: &'static str,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
}

/// Environment state published for observers (the session server).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LiveView {
    pub t: f64,
    pub tick: u64,
    pub vehicles: Vec<VehicleView>,
    pub outcome: Option<EpisodeOutcome>,
    pub av_mean_v: f64,
    pub min_gap: Option<f64>,
}

/// Everything the loops share: the snapshot, a latest-wins instruction slot,
/// a control override slot and the monotone stop flag.
#[derive(Debug, Default)]
pub struct SessionBoard {
    snapshot: SnapshotCell,
    stop: AtomicBool,
    inbox: Mutex<Option<Instruction>>,
    control: Mutex<Option<f64>>,
    controlled: AtomicBool,
    log: Mutex<Vec<LogLine>>,
    prompts: Mutex<Vec<Prompt>>,
    view: RwLock<Arc<LiveView>>,
}

impl SessionBoard {
    pub fn new(initial: SharedSnapshot) -> Self {
        SessionBoard {
            snapshot: SnapshotCell::new(initial),
            ..Default::default()
        }
    }

    pub fn snapshot(&self) -> Arc<SharedSnapshot> {
        self.snapshot.read()
    }

    /// Publishes a snapshot change and logs it as one line.
    pub fn write(&self, t: f64, writer: &'static str, fields: &[&str], f: impl FnOnce(&mut SharedSnapshot)) -> u64 {
        let mut log = self.log.lock();
        let version = self.snapshot.update(f);
        log.push(LogLine {
            t,
            writer,
            field: fields.join("+"),
            version,
        });
        version
    }

    pub fn log(&self) -> Vec<LogLine> {
        self.log.lock().clone()
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Replaces any pending instruction.
    pub fn submit_instruction(&self, instruction: Instruction) {
        *self.inbox.lock() = Some(instruction);
    }

    pub fn take_instruction(&self) -> Option<Instruction> {
        self.inbox.lock().take()
    }

    /// Marks the first HV as externally driven; `None` accel holds speed.
    pub fn attach_controller(&self) {
        self.controlled.store(true, Ordering::SeqCst);
    }

    /// Returns the first HV to its driver model.
    pub fn detach_controller(&self) {
        self.controlled.store(false, Ordering::SeqCst);
        *self.control.lock() = None;
    }

    pub fn is_controlled(&self) -> bool {
        self.controlled.load(Ordering::SeqCst)
    }

    pub fn set_control(&self, accel: f64) {
        *self.control.lock() = Some(accel);
    }

    pub fn control(&self) -> Option<f64> {
        *self.control.lock()
    }

    pub fn prompts(&self) -> Vec<Prompt> {
        self.prompts.lock().clone()
    }

    pub fn last_prompt(&self) -> Option<Prompt> {
        self.prompts.lock().last().cloned()
    }

    pub fn view(&self) -> Arc<LiveView> {
        self.view.read().clone()
    }

    fn publish_view(&self, view: LiveView) {
        *self.view.write() = Arc::new(view);
    }
}

/// One row per vehicle per tick; AV rows also carry the display and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub vehicle_id: u32,
    pub role: String,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub action: MetaAction,
    pub heading: f64,
    pub ehmi: String,
    pub style: String,
    pub intention: String,
}

#[derive(Serialize)]
struct PlainRow<'a> {
    t: f64,
    vehicle_id: u32,
    role: &'a str,
    x: f64,
    y: f64,
    v: f64,
    action: MetaAction,
}

#[derive(Deserialize)]
struct ParsedRow {
    t: f64,
    vehicle_id: u32,
    role: String,
    x: f64,
    y: f64,
    v: f64,
    action: MetaAction,
    #[serde(default)]
    heading: Option<f64>,
    #[serde(default)]
    ehmi: String,
    #[serde(default)]
    style: String,
    #[serde(default)]
    intention: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    /// CSV with header `t,vehicle_id,role,x,y,v,action`.
    pub fn to_csv(&self) -> Result<String, RuntimeError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(PlainRow {
                t: r.t,
                vehicle_id: r.vehicle_id,
                role: &r.role,
                x: r.x,
                y: r.y,
                v: r.v,
                action: r.action,
            })?;
        }
        finish_csv(w)
    }

    /// The plain columns followed by `heading,ehmi,style,intention`.
    pub fn to_annotated_csv(&self) -> Result<String, RuntimeError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        finish_csv(w)
    }

    pub fn write_csv(&self, path: &std::path::Path, annotated: bool) -> Result<(), RuntimeError> {
        let text = if annotated { self.to_annotated_csv()? } else { self.to_csv()? };
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Parses either CSV form. Headings missing from the file are recovered
    /// from each vehicle's motion. Errors name the 1-based data row.
    pub fn from_csv(text: &str) -> Result<Trajectory, RuntimeError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut parsed = Vec::new();
        for (i, rec) in reader.deserialize::<ParsedRow>().enumerate() {
            let row = rec.map_err(|e| RuntimeError::Row { row: i + 1, reason: e.to_string() })?;
            if !row.t.is_finite() || !row.x.is_finite() || !row.y.is_finite() || !row.v.is_finite() {
                return Err(RuntimeError::Row { row: i + 1, reason: "non-finite value".into() });
            }
            parsed.push(row);
        }
        let mut rows: Vec<TrajectoryRow> = parsed
            .iter()
            .map(|r| TrajectoryRow {
                t: r.t,
                vehicle_id: r.vehicle_id,
                role: r.role.clone(),
                x: r.x,
                y: r.y,
                v: r.v,
                action: r.action,
                heading: r.heading.unwrap_or(f64::NAN),
                ehmi: r.ehmi.clone(),
                style: r.style.clone(),
                intention: r.intention.clone(),
            })
            .collect();
        fill_headings(&mut rows);
        Ok(Trajectory { rows })
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String, RuntimeError> {
    let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Replaces NaN headings with the direction of travel to the vehicle's next
/// distinct position, holding the last known heading when it stands still.
fn fill_headings(rows: &mut [TrajectoryRow]) {
    let mut by_vehicle: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_vehicle.entry(r.vehicle_id).or_default().push(i);
    }
    for idx in by_vehicle.values() {
        let mut last = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            if !rows[i].heading.is_nan() {
                last = rows[i].heading;
                continue;
            }
            let here = (rows[i].x, rows[i].y);
            let moved = idx[k + 1..]
                .iter()
                .map(|&j| (rows[j].x - here.0, rows[j].y - here.1))
                .find(|(dx, dy)| dx.hypot(*dy) > 1e-6)
                .map(|(dx, dy)| dy.atan2(dx));
            if let Some(h) = moved {
                last = h;
            }
            rows[i].heading = last;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode: usize,
    pub seed: u64,
    pub outcome: EpisodeOutcome,
    /// Smallest post-encroachment time over AV–HV pairs that both crossed.
    pub pet: Option<f64>,
    pub dangerous: bool,
    pub mean_v: f64,
    pub min_v: f64,
    pub max_v: f64,
    pub ticks: u64,
    pub reasoner_calls: usize,
    pub fallbacks: usize,
    /// Frames gathered while the Reasoner drove (reasoner_only mode).
    pub units: Vec<MemoryUnit>,
    /// Predicted arrival gap per tick, smallest over active pairs.
    pub gaps: Vec<(u64, f64)>,
}

/// Builds the seeded world for an episode, applying the configured HV style
/// rotation and the scripted driver.
pub fn episode_world(cfg: &RunConfig, episode: usize) -> World {
    let seed = cfg.episode_seed(episode);
    let mut world = build_scenario(cfg.scenario, seed, cfg.n_hv);
    if !cfg.hv_styles.is_empty() {
        for (k, hv) in world.vehicles.iter_mut().filter(|v| v.role == Role::Hv).enumerate() {
            let style = cfg.hv_styles[(seed as usize).wrapping_add(k) % cfg.hv_styles.len()];
            hv.style = Some(style);
            hv.intention = Some(match style {
                DrivingStyle::Conservative => Intention::Yield,
                DrivingStyle::Aggressive => Intention::Rush,
                DrivingStyle::General => hv.intention.unwrap_or(Intention::Rush),
            });
        }
    }
    if cfg.hv_control == HvControl::StopAndWait {
        for hv in world.vehicles.iter_mut().filter(|v| v.role == Role::Hv) {
            hv.style = Some(DrivingStyle::Conservative);
            hv.intention = Some(Intention::Yield);
        }
    }
    world
}

pub fn initial_snapshot(world: &World) -> Result<SharedSnapshot, RuntimeError> {
    let (state, opponent) = observe(world, world.av().id)?;
    Ok(SharedSnapshot {
        state,
        style: DrivingStyle::General,
        action: MetaAction::Maintain,
        opponent: Some(opponent),
        ..Default::default()
    })
}

/// Whether some HV still contests a conflict point the AV has not passed.
pub fn has_active_conflict(w: &World) -> bool {
    nearest_active_conflict(w).is_some()
}

/// AV distance to the closest conflict point it still has to negotiate.
fn nearest_active_conflict(w: &World) -> Option<f64> {
    let av = w.av();
    w.hvs()
        .filter_map(|hv| {
            let d_av = w.distance_to_conflict(av.id, hv.path_id).ok()?;
            let d_hv = w.distance_to_conflict(hv.id, av.path_id).ok()?;
            (d_av > 0.0 && d_hv > -(VEHICLE_LENGTH + ZONE_RADIUS)).then_some(d_av)
        })
        .min_by(f64::total_cmp)
}

/// Anything short of Accelerate holds the AV this far before a live conflict.
const HOLD_MARGIN: f64 = 3.0;

/// The AV's applied action: the decision while a conflict is open, free-road
/// acceleration afterwards, and braking behind a same-direction leader always.
/// A non-committing decision never rolls the AV past the hold line.
pub fn av_command(w: &World, decided: MetaAction) -> MetaAction {
    let av = w.av();
    if must_follow(w, av.id) {
        return MetaAction::Decelerate;
    }
    match nearest_active_conflict(w) {
        Some(d) if decided != MetaAction::Accelerate => {
            let brake = MetaAction::Decelerate.accel().abs();
            let needed = av.v * av.v / (2.0 * brake) + av.v * TICK;
            if d - HOLD_MARGIN <= needed {
                MetaAction::Decelerate
            } else {
                decided
            }
        }
        Some(_) => decided,
        None if av.v < MAX_SPEED => MetaAction::Accelerate,
        None => MetaAction::Maintain,
    }
}

/// Stop this far (m) before the conflict point.
const SCRIPT_STOP_MARGIN: f64 = 6.0;

fn stop_and_wait(w: &World, hv_id: u32) -> Result<MetaAction, EnvError> {
    let hv = w.vehicle(hv_id)?;
    let av = w.av();
    let av_through = w.distance_to_conflict(av.id, hv.path_id)? < -VEHICLE_LENGTH || w.finished(av);
    if av_through {
        return Ok(if must_follow(w, hv_id) {
            MetaAction::Decelerate
        } else {
            MetaAction::Accelerate
        });
    }
    let room = w.distance_to_conflict(hv_id, av.path_id)? - SCRIPT_STOP_MARGIN;
    let brake = MetaAction::Decelerate.accel().abs();
    // Brake when the stopping distance (with one tick of lag) uses up the room.
    let needed = hv.v * hv.v / (2.0 * brake) + hv.v * TICK;
    Ok(if room <= needed { MetaAction::Decelerate } else { MetaAction::Maintain })
}

/// The baselines the AV can run instead of the Actor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Pidm,
    Game,
}

impl std::str::FromStr for BaselineKind {
    type Err = RuntimeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pidm" => Ok(BaselineKind::Pidm),
            "game" => Ok(BaselineKind::Game),
            other => Err(RuntimeError::Config(format!("unsupported baseline `{other}`"))),
        }
    }
}

/// Arrival gap (s) under which the rule baseline yields.
pub const PIDM_GAP: f64 = 1.5;

pub fn baseline_decide(kind: BaselineKind, w: &World) -> Result<MetaAction, RuntimeError> {
    let av = w.av();
    let toward_cruise = if av.v < MAX_SPEED { MetaAction::Accelerate } else { MetaAction::Maintain };
    if !has_active_conflict(w) {
        return Ok(toward_cruise);
    }
    let (_, opponent) = observe(w, av.id)?;
    let hv = w.vehicle(opponent)?;
    let ego = Approach {
        distance: w.distance_to_conflict(av.id, hv.path_id)?,
        v: av.v,
    };
    let other = Approach {
        distance: w.distance_to_conflict(hv.id, av.path_id)?,
        v: hv.v,
    };
    match kind {
        BaselineKind::Pidm => {
            let t_av = crate::environment::conflict_time(ego.distance, ego.v);
            let t_hv = if other.distance < 0.0 {
                0.0
            } else {
                crate::environment::conflict_time(other.distance, other.v)
            };
            Ok(if t_hv < t_av || (t_av - t_hv).abs() < PIDM_GAP {
                MetaAction::Decelerate
            } else {
                toward_cruise
            })
        }
        BaselineKind::Game => {
            let params = default_style_params(DrivingStyle::General);
            Ok(crate::hv_driver::game_decide(ego, other, &params, 0.5, false))
        }
    }
}

/// Query the Actor builds from a snapshot, after the ablation switches.
pub fn actor_query(snap: &SharedSnapshot, cfg: &RunConfig) -> (DrivingStyle, [String; 4]) {
    // Without partitioning the Actor assumes one homogeneous population.
    let style = if cfg.use_partition { snap.style } else { DrivingStyle::General };
    let fields = [
        snap.intention.map(|i| i.as_str().to_string()).unwrap_or_default(),
        style.as_str().to_string(),
        snap.instruction.as_ref().map(|i| i.text.clone()).unwrap_or_default(),
        snap.ehmi.as_ref().map(|e| e.as_str().to_string()).unwrap_or_default(),
    ];
    (style, fields)
}

pub fn actor_decide(snap: &SharedSnapshot, store: &MemoryStore, cfg: &RunConfig) -> MetaAction {
    let (style, fields) = actor_query(snap, cfg);
    let q = store.embed([&fields[0], &fields[1], &fields[2], &fields[3]]);
    retrieve_embedded(store, cfg.retrieval_mode(), style, &snap.state, &q, &cfg.retrieval).action
}

struct PendingThought {
    due: u64,
    output: ReasonerOutput,
}

/// Reasoner-side state carried across ticks.
struct ReasonerLoop<'a> {
    cfg: &'a RunConfig,
    reasoner: &'a Reasoner,
    pending: Option<PendingThought>,
    episode: usize,
    calls: usize,
    fallbacks: usize,
    units: Vec<MemoryUnit>,
}

impl<'a> ReasonerLoop<'a> {
    fn new(cfg: &'a RunConfig, reasoner: &'a Reasoner, episode: usize) -> Self {
        ReasonerLoop {
            cfg,
            reasoner,
            pending: None,
            episode,
            calls: 0,
            fallbacks: 0,
            units: Vec::new(),
        }
    }

    fn active(&self) -> bool {
        matches!(self.cfg.mode, DecisionMode::ActorReasoner | DecisionMode::ReasonerOnly)
    }

    fn think(&mut self, board: &SessionBoard) -> ReasonerOutput {
        let snap = board.snapshot();
        let instruction = snap.instruction.clone().unwrap_or_else(Instruction::none);
        let mut prompt = build_prompt(&snap.state, &instruction, snap.ehmi.as_ref());
        prompt.built_from_version = snap.version;
        let output = self.reasoner.reason_with_prompt(&prompt, &snap.state, &instruction);
        board.prompts.lock().push(prompt);
        self.calls += 1;
        if output.is_fallback() {
            self.fallbacks += 1;
        }
        if self.cfg.mode == DecisionMode::ReasonerOnly {
            self.units.push(MemoryUnit {
                scenario: snap.state,
                experience: ExperienceDescription {
                    intention: output.intention,
                    style: output.style,
                    instruction: instruction.text.clone(),
                    ehmi: output.ehmi.as_str().to_string(),
                },
                action: output.action,
                episode_id: self.episode as u64,
                frame_index: snap.tick,
            });
        }
        output
    }

    fn publish(&self, board: &SessionBoard, t: f64, out: &ReasonerOutput) {
        let drives = self.cfg.mode == DecisionMode::ReasonerOnly;
        let fields: &[&str] = if drives {
            &["intention", "style", "ehmi", "action"]
        } else {
            &["intention", "style", "ehmi"]
        };
        board.write(t, "reasoner", fields, |s| {
            s.intention = Some(out.intention);
            s.style = out.style;
            s.ehmi = Some(out.ehmi.clone());
            if drives {
                s.action = out.action;
                s.action_tick = s.tick;
            }
        });
    }

    /// One lockstep slot: land a due result, then start a new call if idle.
    fn virtual_phase(&mut self, board: &SessionBoard, tick: u64) {
        if !self.active() {
            return;
        }
        let t = tick as f64 * self.cfg.dt;
        if let Some(p) = self.pending.take_if(|p| p.due <= tick) {
            self.publish(board, t, &p.output);
        }
        if self.pending.is_none() {
            let output = self.think(board);
            let latency = self.cfg.reasoner_latency + output.latency;
            let delay = (latency / self.cfg.dt - 1e-9).ceil().max(0.0) as u64;
            if delay == 0 {
                self.publish(board, t, &output);
            } else {
                self.pending = Some(PendingThought {
                    due: tick + delay,
                    output,
                });
            }
        }
    }
}

/// Environment-side state: the world, the HV drivers and the records.
struct EnvironmentLoop<'a> {
    cfg: &'a RunConfig,
    world: World,
    minds: BTreeMap<u32, HvMind>,
    last_av_accel: f64,
    trajectory: Trajectory,
    av_speeds: Vec<f64>,
    gaps: Vec<(u64, f64)>,
    outcome: Option<EpisodeOutcome>,
}

impl<'a> EnvironmentLoop<'a> {
    fn new(cfg: &'a RunConfig, world: World) -> Self {
        let minds = world
            .hvs()
            .map(|hv| {
                let style = hv.style.unwrap_or_default();
                let intent = hv.intention.unwrap_or(Intention::Rush);
                (hv.id, HvMind::new(cfg.style_params(style), intent))
            })
            .collect();
        let mut env = EnvironmentLoop {
            cfg,
            world,
            minds,
            last_av_accel: 0.0,
            trajectory: Trajectory::default(),
            av_speeds: Vec::new(),
            gaps: Vec::new(),
            outcome: None,
        };
        env.record_gap();
        env
    }

    fn record_gap(&mut self) {
        let av = self.world.av().id;
        let gap = self
            .world
            .hvs()
            .filter_map(|hv| pair_conflict_gap(&self.world, av, hv.id))
            .fold(f64::INFINITY, f64::min);
        self.gaps.push((self.world.tick(), gap));
    }

    fn live_view(&self) -> LiveView {
        let vehicles = self
            .world
            .vehicles
            .iter()
            .map(|v| {
                let (p, heading, _) = self.world.kinematics(v);
                VehicleView {
                    id: v.id,
                    role: v.role.as_str(),
                    x: p.x,
                    y: p.y,
                    heading,
                    v: v.v,
                }
            })
            .collect();
        let mean = if self.av_speeds.is_empty() {
            self.world.av().v
        } else {
            self.av_speeds.iter().sum::<f64>() / self.av_speeds.len() as f64
        };
        LiveView {
            t: self.world.time(),
            tick: self.world.tick(),
            vehicles,
            outcome: self.outcome,
            av_mean_v: mean,
            min_gap: self.gaps.iter().map(|g| g.1).filter(|g| g.is_finite()).reduce(f64::min),
        }
    }

    /// Applies one tick. Returns the outcome once the episode ends.
    fn phase(&mut self, board: &SessionBoard) -> Result<Option<EpisodeOutcome>, RuntimeError> {
        if self.outcome.is_some() {
            return Ok(self.outcome);
        }
        let snap = board.snapshot();
        let decided = match self.cfg.mode {
            DecisionMode::ActorReasoner | DecisionMode::ReasonerOnly => snap.action,
            DecisionMode::BaselinePidm => baseline_decide(BaselineKind::Pidm, &self.world)?,
            DecisionMode::BaselineGame => baseline_decide(BaselineKind::Game, &self.world)?,
        };
        let av_action = av_command(&self.world, decided);
        let mut accel = std::collections::HashMap::new();
        accel.insert(self.world.av().id, av_action.accel());
        let mut actions = BTreeMap::new();
        actions.insert(self.world.av().id, av_action);

        let ehmi = snap.ehmi.clone();
        let t = self.world.time();
        let hv_ids: Vec<u32> = self.world.hvs().map(|v| v.id).collect();
        for (k, id) in hv_ids.into_iter().enumerate() {
            let external = k == 0 && board.is_controlled();
            let action = if external {
                let a = board.control().unwrap_or(0.0).clamp(-3.0, 2.0);
                accel.insert(id, a);
                nearest_action(a)
            } else {
                let action = match self.cfg.hv_control {
                    HvControl::StopAndWait => stop_and_wait(&self.world, id)?,
                    HvControl::Model => {
                        let mind = self.minds.get_mut(&id).expect("every HV has a mind");
                        let tick = mind.tick(&self.world, id, self.last_av_accel, ehmi.as_ref())?;
                        if let Some(text) = tick.utterance {
                            board.submit_instruction(Instruction::new(text, t, id));
                        }
                        tick.action
                    }
                };
                accel.insert(id, action.accel());
                action
            };
            actions.insert(id, action);
        }

        self.record_rows(&snap, &actions);
        self.av_speeds.push(self.world.av().v);

        self.world = step_world(&self.world, &accel, self.cfg.dt)?;
        self.last_av_accel = av_action.accel();
        self.record_gap();

        let incoming = board.take_instruction().filter(|_| self.cfg.use_instructions);
        let (state, opponent) = observe(&self.world, self.world.av().id)?;
        let tick = self.world.tick();
        let t_now = self.world.time();
        let mut fields = vec!["state"];
        if incoming.is_some() {
            fields.push("instruction");
        }
        board.write(t_now, "environment", &fields, |s| {
            s.state = state;
            s.opponent = Some(opponent);
            s.tick = tick;
            if let Some(i) = incoming {
                s.instruction = Some(i);
            }
        });

        self.outcome = check_termination(&self.world);
        board.publish_view(self.live_view());
        if self.outcome.is_some() {
            board.stop();
        }
        Ok(self.outcome)
    }

    fn record_rows(&mut self, snap: &SharedSnapshot, actions: &BTreeMap<u32, MetaAction>) {
        let t = self.world.time();
        for v in &self.world.vehicles {
            let (p, heading, _) = self.world.kinematics(v);
            let is_av = v.role == Role::Av;
            let text = |present: bool, s: String| if present { s } else { String::new() };
            self.trajectory.rows.push(TrajectoryRow {
                t,
                vehicle_id: v.id,
                role: v.role.as_str().to_string(),
                x: p.x,
                y: p.y,
                heading,
                v: v.v,
                action: actions.get(&v.id).copied().unwrap_or_default(),
                ehmi: text(is_av, snap.ehmi.as_ref().map(|e| e.as_str().to_string()).unwrap_or_default()),
                style: text(is_av, snap.style.as_str().to_string()),
                intention: text(is_av, snap.intention.map(|i| i.as_str().to_string()).unwrap_or_default()),
            });
        }
    }

    fn finish(self, episode: usize, reasoner: ReasonerLoop<'_>) -> (EpisodeResult, Trajectory) {
        let outcome = self.outcome.unwrap_or(EpisodeOutcome::Timeout);
        let av = self.world.av().id;
        let mut pet: Option<f64> = None;
        let mut dangerous = false;
        for hv in self.world.hvs() {
            if let Some(p) = compute_pet(&self.world.events, (av, hv.id)) {
                pet = Some(pet.map_or(p, |q| q.min(p)));
            }
            dangerous |= is_dangerous(&self.world.events, (av, hv.id), &self.world);
        }
        let speeds = &self.av_speeds;
        let n = speeds.len().max(1) as f64;
        let result = EpisodeResult {
            episode,
            seed: self.world.seed,
            outcome,
            pet,
            dangerous,
            mean_v: speeds.iter().sum::<f64>() / n,
            min_v: speeds.iter().copied().reduce(f64::min).unwrap_or(0.0),
            max_v: speeds.iter().copied().reduce(f64::max).unwrap_or(0.0),
            ticks: self.world.tick(),
            reasoner_calls: reasoner.calls,
            fallbacks: reasoner.fallbacks,
            units: reasoner.units,
            gaps: self.gaps,
        };
        (result, self.trajectory)
    }
}

fn nearest_action(accel: f64) -> MetaAction {
    if accel > 0.0 {
        MetaAction::Accelerate
    } else if accel < 0.0 {
        MetaAction::Decelerate
    } else {
        MetaAction::Maintain
    }
}

fn actor_phase(board: &SessionBoard, store: &MemoryStore, cfg: &RunConfig, t: f64) {
    if cfg.mode != DecisionMode::ActorReasoner {
        return;
    }
    let snap = board.snapshot();
    let action = actor_decide(&snap, store, cfg);
    board.write(t, "actor", &["action"], |s| {
        s.action = action;
        s.action_tick = snap.tick;
    });
}

/// A prepared episode whose board can be shared with observers before it runs.
pub struct Session {
    pub board: Arc<SessionBoard>,
    world: World,
    episode: usize,
}

impl Session {
    pub fn new(cfg: &RunConfig, episode: usize) -> Result<Self, RuntimeError> {
        cfg.validate()?;
        let world = episode_world(cfg, episode);
        let board = Arc::new(SessionBoard::new(initial_snapshot(&world)?));
        Ok(Session { board, world, episode })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    /// Runs the three loops under the configured clock.
    pub fn run(self, cfg: &RunConfig, store: &MemoryStore) -> Result<(EpisodeResult, Trajectory), RuntimeError> {
        let reasoner = Reasoner::from_config(&cfg.backend)?;
        match cfg.clock {
            Clock::Virtual => run_lockstep(cfg, store, &reasoner, self),
            Clock::RealTime => run_realtime(cfg, store, &reasoner, self),
        }
    }

    /// Runs the same phases in one loop without threads.
    pub fn run_synchronous(
        self,
        cfg: &RunConfig,
        store: &MemoryStore,
    ) -> Result<(EpisodeResult, Trajectory), RuntimeError> {
        let reasoner = Reasoner::from_config(&cfg.backend)?;
        let board = &self.board;
        let mut r = ReasonerLoop::new(cfg, &reasoner, self.episode);
        let mut env = EnvironmentLoop::new(cfg, self.world);
        let every = cfg.actor_every();
        loop {
            let tick = env.world.tick();
            let t = tick as f64 * cfg.dt;
            r.virtual_phase(board, tick);
            if tick % every == 0 {
                actor_phase(board, store, cfg, t);
            }
            if env.phase(board)?.is_some() || board.is_stopped() {
                break;
            }
        }
        Ok(env.finish(self.episode, r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Reasoner,
    Actor,
    Environment,
}

struct Lockstep {
    slot: Mutex<(u64, Phase)>,
    turn: Condvar,
}

impl Lockstep {
    const POLL: Duration = Duration::from_millis(20);

    /// Blocks until `phase` is current; `None` once the board is stopped.
    fn wait(&self, phase: Phase, board: &SessionBoard) -> Option<u64> {
        let mut slot = self.slot.lock();
        loop {
            if board.is_stopped() {
                return None;
            }
            if slot.1 == phase {
                return Some(slot.0);
            }
            self.turn.wait_for(&mut slot, Self::POLL);
        }
    }

    fn pass(&self) {
        let mut slot = self.slot.lock();
        *slot = match slot.1 {
            Phase::Reasoner => (slot.0, Phase::Actor),
            Phase::Actor => (slot.0, Phase::Environment),
            Phase::Environment => (slot.0 + 1, Phase::Reasoner),
        };
        self.turn.notify_all();
    }

    fn wake(&self) {
        let _slot = self.slot.lock();
        self.turn.notify_all();
    }
}

fn run_lockstep(
    cfg: &RunConfig,
    store: &MemoryStore,
    reasoner: &Reasoner,
    session: Session,
) -> Result<(EpisodeResult, Trajectory), RuntimeError> {
    let Session { board, world, episode } = session;
    let board = &*board;
    let clock = Lockstep {
        slot: Mutex::new((world.tick(), Phase::Reasoner)),
        turn: Condvar::new(),
    };
    let every = cfg.actor_every();
    thread::scope(|scope| {
        let reasoner_loop = scope.spawn(|| {
            let mut r = ReasonerLoop::new(cfg, reasoner, episode);
            while let Some(tick) = clock.wait(Phase::Reasoner, board) {
                r.virtual_phase(board, tick);
                clock.pass();
            }
            r
        });
        let actor_loop = scope.spawn(|| {
            while let Some(tick) = clock.wait(Phase::Actor, board) {
                if tick % every == 0 {
                    actor_phase(board, store, cfg, tick as f64 * cfg.dt);
                }
                clock.pass();
            }
        });
        let env_loop = scope.spawn(|| -> Result<EnvironmentLoop<'_>, RuntimeError> {
            let mut env = EnvironmentLoop::new(cfg, world);
            while clock.wait(Phase::Environment, board).is_some() {
                let step = env.phase(board);
                if step.is_err() {
                    board.stop();
                }
                clock.pass();
                step?;
            }
            clock.wake();
            Ok(env)
        });
        let env = env_loop.join().expect("environment loop panicked");
        clock.wake();
        actor_loop.join().expect("actor loop panicked");
        let r = reasoner_loop.join().expect("reasoner loop panicked");
        Ok(env?.finish(episode, r))
    })
}

fn sleep_until(deadline: Instant, board: &SessionBoard) {
    while !board.is_stopped() {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        thread::sleep((deadline - now).min(Duration::from_millis(10)));
    }
}

fn run_realtime(
    cfg: &RunConfig,
    store: &MemoryStore,
    reasoner: &Reasoner,
    session: Session,
) -> Result<(EpisodeResult, Trajectory), RuntimeError> {
    let Session { board, world, episode } = session;
    let board = &*board;
    let start = Instant::now();
    let elapsed = || start.elapsed().as_secs_f64();
    thread::scope(|scope| {
        let reasoner_loop = scope.spawn(|| {
            let mut r = ReasonerLoop::new(cfg, reasoner, episode);
            if !r.active() {
                return r;
            }
            let mut last_tick = None;
            while !board.is_stopped() {
                let tick = board.snapshot().tick;
                if last_tick == Some(tick) {
                    thread::sleep(Duration::from_millis(5));
                    continue;
                }
                last_tick = Some(tick);
                let output = r.think(board);
                sleep_until(Instant::now() + Duration::from_secs_f64(cfg.reasoner_latency), board);
                if board.is_stopped() {
                    break;
                }
                r.publish(board, elapsed(), &output);
            }
            r
        });
        let actor_loop = scope.spawn(|| {
            let period = Duration::from_secs_f64(cfg.actor_period);
            let mut next = Instant::now();
            while !board.is_stopped() {
                actor_phase(board, store, cfg, elapsed());
                next += period;
                sleep_until(next, board);
            }
        });
        let env_loop = scope.spawn(|| -> Result<EnvironmentLoop<'_>, RuntimeError> {
            let period = Duration::from_secs_f64(cfg.dt);
            let mut env = EnvironmentLoop::new(cfg, world);
            // Let the first decision land before the world starts moving.
            let mut next = Instant::now() + period;
            sleep_until(next, board);
            while !board.is_stopped() {
                if let Err(e) = env.phase(board) {
                    board.stop();
                    return Err(e);
                }
                next += period;
                sleep_until(next, board);
            }
            Ok(env)
        });
        let env = env_loop.join().expect("environment loop panicked");
        actor_loop.join().expect("actor loop panicked");
        let r = reasoner_loop.join().expect("reasoner loop panicked");
        Ok(env?.finish(episode, r))
    })
}

/// Runs episode `episode` (seed `cfg.seed + episode`) on the three-loop runtime.
pub fn run_episode(
    cfg: &RunConfig,
    store: &MemoryStore,
    episode: usize,
) -> Result<(EpisodeResult, Trajectory), RuntimeError> {
    Session::new(cfg, episode)?.run(cfg, store)
}

/// Single-loop reference executing the same phases in the same order.
pub fn run_episode_synchronous(
    cfg: &RunConfig,
    store: &MemoryStore,
    episode: usize,
) -> Result<(EpisodeResult, Trajectory), RuntimeError> {
    Session::new(cfg, episode)?.run_synchronous(cfg, store)
}

/// Collects curated Reasoner-driven frames into a style-partitioned store.
pub fn train(cfg: &RunConfig) -> Result<MemoryStore, RuntimeError> {
    let cfg = RunConfig {
        mode: DecisionMode::ReasonerOnly,
        ..cfg.clone()
    };
    let empty = MemoryStore::new();
    let mut store = MemoryStore::new();
    for episode in 0..cfg.episodes {
        let (result, _) = run_episode_synchronous(&cfg, &empty, episode)?;
        store.extend(curate_episode(result.units, result.outcome, &result.gaps));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig {
            episodes: 4,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let c = RunConfig {
            scenario: ScenarioKind::Merging,
            hv_styles: vec![DrivingStyle::Aggressive],
            ..cfg()
        };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"scenario":"roundabout","n_hv":2}"#).unwrap();
        assert_eq!(partial.n_hv, 2);
        assert_eq!(partial.retrieval, RetrievalConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"frobnicate":1}"#).is_err());
        assert!(RunConfig { dt: 0.05, ..cfg() }.validate().is_err());
        assert!(RunConfig { actor_period: 0.15, ..cfg() }.validate().is_err());
        assert!(RunConfig { n_hv: 4, ..cfg() }.validate().is_err());
    }

    #[test]
    fn style_overrides_replace_defaults() {
        let c: RunConfig = serde_json::from_str(
            r#"{"hv_params":{"conservative":{"w_safety":0.5,"w_eff":0.5,"patience":2.0,"risk_gap":1.0}}}"#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.style_params(DrivingStyle::Conservative).patience, 2.0);
        assert_eq!(c.style_params(DrivingStyle::Aggressive), default_style_params(DrivingStyle::Aggressive));
        let bad: RunConfig = serde_json::from_str(
            r#"{"hv_params":{"general":{"w_safety":0.9,"w_eff":0.9,"patience":2.0,"risk_gap":1.0}}}"#,
        )
        .unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn board_contracts() {
        let board = SessionBoard::default();
        board.submit_instruction(Instruction::new("first", 0.0, 1));
        board.submit_instruction(Instruction::new("second", 0.1, 1));
        assert_eq!(board.take_instruction().unwrap().text, "second");
        assert!(board.take_instruction().is_none());
        assert!(!board.is_stopped());
        board.stop();
        board.stop();
        assert!(board.is_stopped());
        let v1 = board.write(0.0, "actor", &["action"], |s| s.action = MetaAction::Accelerate);
        let v2 = board.write(0.1, "reasoner", &["style", "ehmi"], |s| s.style = DrivingStyle::Aggressive);
        let log = board.log();
        assert_eq!((log[0].version, log[1].version), (v1, v2));
        assert_eq!(log[1].field, "style+ehmi");
    }

    #[test]
    fn style_rotation_sets_intentions() {
        let c = RunConfig {
            hv_styles: vec![DrivingStyle::Aggressive, DrivingStyle::Conservative],
            n_hv: 2,
            ..cfg()
        };
        let w = episode_world(&c, 0);
        let styles: Vec<_> = w.hvs().map(|v| (v.style.unwrap(), v.intention.unwrap())).collect();
        assert_eq!(styles.len(), 2);
        assert_ne!(styles[0].0, styles[1].0);
        for (s, i) in styles {
            let expected = if s == DrivingStyle::Aggressive { Intention::Rush } else { Intention::Yield };
            assert_eq!(i, expected);
        }
    }

    #[test]
    fn pidm_rules() {
        // AV 20 m out at 4 m/s (5 s); HV 4 m out at 4 m/s (1 s) → HV first.
        let mut w = build_scenario(ScenarioKind::Intersection, 1, 1);
        w.vehicles[0].s = 20.0;
        w.vehicles[0].v = 4.0;
        w.vehicles[1].s = 36.0;
        w.vehicles[1].v = 4.0;
        assert_eq!(baseline_decide(BaselineKind::Pidm, &w).unwrap(), MetaAction::Decelerate);
        // HV already through: clear road.
        w.vehicles[1].s = 55.0;
        assert_eq!(baseline_decide(BaselineKind::Pidm, &w).unwrap(), MetaAction::Accelerate);
        assert!("ppo".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn free_road_and_follow_guard() {
        let mut w = build_scenario(ScenarioKind::Intersection, 2, 1);
        w.vehicles[1].s = 58.0;
        w.vehicles[0].v = 3.0;
        assert!(!has_active_conflict(&w));
        assert_eq!(av_command(&w, MetaAction::Decelerate), MetaAction::Accelerate);
        w.vehicles[0].v = MAX_SPEED;
        assert_eq!(av_command(&w, MetaAction::Decelerate), MetaAction::Maintain);
        w.vehicles[1].s = 10.0;
        assert!(has_active_conflict(&w));
        assert_eq!(av_command(&w, MetaAction::Decelerate), MetaAction::Decelerate);
    }

    #[test]
    fn training_is_deterministic_and_curated() {
        let c = RunConfig { episodes: 6, ..cfg() };
        let a = train(&c).unwrap();
        let b = train(&c).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        assert!(train(&RunConfig { episodes: 0, ..cfg() }).unwrap().is_empty());
    }

    #[test]
    fn lockstep_matches_synchronous() {
        let c = cfg();
        let store = train(&RunConfig { episodes: 10, ..c.clone() }).unwrap();
        for ep in 0..3 {
            let (ra, ta) = run_episode(&c, &store, ep).unwrap();
            let (rb, tb) = run_episode_synchronous(&c, &store, ep).unwrap();
            assert_eq!(ta.to_annotated_csv().unwrap(), tb.to_annotated_csv().unwrap());
            assert_eq!(ra.outcome, rb.outcome);
        }
    }

    #[test]
    fn trajectory_csv_forms() {
        let store = train(&RunConfig { episodes: 2, ..cfg() }).unwrap();
        let (_, t) = run_episode_synchronous(&cfg(), &store, 0).unwrap();
        let plain = t.to_csv().unwrap();
        assert!(plain.starts_with("t,vehicle_id,role,x,y,v,action\n"));
        let annotated = t.to_annotated_csv().unwrap();
        assert!(annotated.starts_with("t,vehicle_id,role,x,y,v,action,heading,ehmi,style,intention\n"));
        assert_eq!(Trajectory::from_csv(&annotated).unwrap(), t);

        let back = Trajectory::from_csv(&plain).unwrap();
        assert_eq!(back.rows.len(), t.rows.len());
        for (a, b) in back.rows.iter().zip(&t.rows) {
            assert_eq!((a.t, a.vehicle_id, a.x, a.y, a.action), (b.t, b.vehicle_id, b.x, b.y, b.action));
            assert!(a.heading.is_finite());
        }
        // The AV drives along +x on the intersection's first approach.
        assert!(back.rows[0].heading.abs() < 1e-6);

        let mut lines: Vec<&str> = plain.lines().collect();
        lines[3] = "0.0,1,HV,1.0";
        match Trajectory::from_csv(&lines.join("\n")) {
            Err(RuntimeError::Row { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected row error, got {other:?}"),
        }
    }
}
