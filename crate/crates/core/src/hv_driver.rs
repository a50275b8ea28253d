//! Simulated human drivers: a non-cooperative Bayesian decision rule with
//! style-weighted payoffs, a belief over the AV's intent, and patience-based
//! intent switching.

use serde::{Deserialize, Serialize};

use crate::environment::{EnvError, World, STOPPED_SPEED, TICK, VEHICLE_LENGTH};
use crate::model::{DrivingStyle, EhmiMessage, Intention, MetaAction, MAX_SPEED};

pub const ROLLOUT_HORIZON: f64 = 2.0;
const BELIEF_STEP: f64 = 0.2;
const SIGNAL_ACCEL: f64 = 0.5;
const YIELD_ACCEL_PENALTY: f64 = 0.5;
/// Headway (s) and standstill gap (m) below which a driver brakes for a leader.
const FOLLOW_HEADWAY: f64 = 1.5;
const FOLLOW_STANDSTILL: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub w_safety: f64,
    pub w_eff: f64,
    pub patience: f64,
    pub risk_gap: f64,
}

impl StyleParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.w_safety < 0.0 || self.w_eff < 0.0 || (self.w_safety + self.w_eff - 1.0).abs() > 1e-9 {
            return Err(format!("weights must be non-negative and sum to 1: {self:?}"));
        }
        if self.patience <= 0.0 || self.risk_gap <= 0.0 {
            return Err(format!("patience and risk_gap must be positive: {self:?}"));
        }
        Ok(())
    }
}

pub fn default_style_params(style: DrivingStyle) -> StyleParams {
    match style {
        DrivingStyle::Aggressive => StyleParams {
            w_safety: 0.3,
            w_eff: 0.7,
            patience: 2.0,
            risk_gap: 1.0,
        },
        DrivingStyle::General => StyleParams {
            w_safety: 0.5,
            w_eff: 0.5,
            patience: 4.0,
            risk_gap: 1.5,
        },
        DrivingStyle::Conservative => StyleParams {
            w_safety: 0.7,
            w_eff: 0.3,
            patience: 8.0,
            risk_gap: 2.5,
        },
    }
}

/// Probability the driver assigns to the AV yielding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeliefState {
    pub p_yield: f64,
}

impl Default for BeliefState {
    fn default() -> Self {
        BeliefState { p_yield: 0.5 }
    }
}

pub fn update_belief(b: BeliefState, observed_av_accel: f64, ehmi: Option<&EhmiMessage>) -> BeliefState {
    let text = ehmi.map(|e| e.as_str().to_ascii_lowercase()).unwrap_or_default();
    let says_slower = text.contains("slower");
    let says_faster = text.contains("faster");
    let delta = match (says_slower, says_faster) {
        (true, false) => BELIEF_STEP,
        (false, true) => -BELIEF_STEP,
        (true, true) => 0.0,
        (false, false) => {
            if observed_av_accel <= -SIGNAL_ACCEL {
                BELIEF_STEP
            } else if observed_av_accel >= SIGNAL_ACCEL {
                -BELIEF_STEP
            } else {
                0.0
            }
        }
    };
    BeliefState {
        p_yield: (b.p_yield + delta).clamp(0.0, 1.0),
    }
}

/// One vehicle's approach to a conflict point: signed remaining distance (m)
/// and current speed (m/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Approach {
    pub distance: f64,
    pub v: f64,
}

/// Predicted arrival time at the conflict point under a constant acceleration,
/// simulated over the rollout horizon and extrapolated at the final speed.
/// A vehicle already past the point but within one length still occupies it
/// and gets a negative time; `None` means it never arrives or is clear.
pub fn predicted_arrival(a: Approach, accel: f64) -> (Option<f64>, f64) {
    if a.distance <= 0.0 {
        let v = a.v;
        let occupying = -a.distance < VEHICLE_LENGTH;
        let v_end = (v + accel * ROLLOUT_HORIZON).clamp(0.0, MAX_SPEED);
        return (occupying.then(|| a.distance / v.max(STOPPED_SPEED)), v_end);
    }
    let steps = (ROLLOUT_HORIZON / TICK).round() as usize;
    let (mut v, mut travelled) = (a.v, 0.0);
    for k in 1..=steps {
        v = (v + accel * TICK).clamp(0.0, MAX_SPEED);
        travelled += v * TICK;
        if travelled >= a.distance {
            return (Some(k as f64 * TICK), v);
        }
    }
    let arrival = (v > 0.0).then(|| ROLLOUT_HORIZON + (a.distance - travelled) / v.max(STOPPED_SPEED));
    (arrival, v)
}

/// Expected payoff of each candidate action, in tie-break order
/// (Decelerate, Maintain, Accelerate).
pub fn expected_payoffs(
    ego: Approach,
    other: Approach,
    params: &StyleParams,
    p_yield: f64,
    yield_intent: bool,
) -> [(MetaAction, f64); 3] {
    let (other_if_yield, _) = predicted_arrival(other, MetaAction::Decelerate.accel());
    let (other_if_rush, _) = predicted_arrival(other, MetaAction::Accelerate.accel());
    let order = [MetaAction::Decelerate, MetaAction::Maintain, MetaAction::Accelerate];
    order.map(|action| {
        let (mine, v_end) = predicted_arrival(ego, action.accel());
        let utility = |theirs: Option<f64>| {
            let risky = matches!((mine, theirs), (Some(m), Some(t)) if (m - t).abs() < params.risk_gap);
            params.w_eff * (v_end / MAX_SPEED) - params.w_safety * if risky { 1.0 } else { 0.0 }
        };
        let mut u = p_yield * utility(other_if_yield) + (1.0 - p_yield) * utility(other_if_rush);
        if yield_intent && action == MetaAction::Accelerate && ego.distance > 0.0 {
            u -= YIELD_ACCEL_PENALTY;
        }
        (action, u)
    })
}

/// Argmax of `expected_payoffs`; ties resolve toward the safer action.
pub fn game_decide(ego: Approach, other: Approach, params: &StyleParams, p_yield: f64, yield_intent: bool) -> MetaAction {
    let payoffs = expected_payoffs(ego, other, params, p_yield, yield_intent);
    let mut best = payoffs[0];
    for &(action, u) in &payoffs[1..] {
        if u > best.1 {
            best = (action, u);
        }
    }
    best.0
}

/// The HV's decision against the AV. Past its conflict point it just holds speed.
pub fn hv_decide(
    w: &World,
    hv_id: u32,
    params: &StyleParams,
    b: BeliefState,
    intent: Intention,
) -> Result<MetaAction, EnvError> {
    let hv = w.vehicle(hv_id)?;
    let av = w.av();
    let ego = Approach {
        distance: w.distance_to_conflict(hv_id, av.path_id)?,
        v: hv.v,
    };
    if ego.distance < 0.0 {
        return Ok(MetaAction::Maintain);
    }
    let other = Approach {
        distance: w.distance_to_conflict(av.id, hv.path_id)?,
        v: av.v,
    };
    Ok(game_decide(ego, other, params, b.p_yield, intent == Intention::Yield))
}

pub fn update_intent(intent: Intention, waiting_time: f64, params: &StyleParams) -> Intention {
    match intent {
        Intention::Yield if waiting_time > params.patience => Intention::Rush,
        other => other,
    }
}

/// The utterance a driver makes when settling on an intention.
pub fn instruction_for(intent: Intention) -> &'static str {
    match intent {
        Intention::Yield => "I will be slower",
        Intention::Rush => "I will be faster",
    }
}

/// Whether a vehicle is close enough behind another to have to brake.
pub fn must_follow(w: &World, id: u32) -> bool {
    let Ok(me) = w.vehicle(id) else { return false };
    let limit = FOLLOW_STANDSTILL + FOLLOW_HEADWAY * me.v;
    w.leader_gap(id, limit).is_some()
}

/// Per-driver state carried across ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct HvMind {
    pub params: StyleParams,
    pub belief: BeliefState,
    pub intent: Intention,
    decel_streak: u32,
    announced: Option<Intention>,
}

/// What a driver did this tick.
#[derive(Debug, Clone, PartialEq)]
pub struct HvTick {
    pub action: MetaAction,
    pub utterance: Option<&'static str>,
}

impl HvMind {
    pub fn new(params: StyleParams, intent: Intention) -> Self {
        HvMind {
            params,
            belief: BeliefState::default(),
            intent,
            decel_streak: 0,
            announced: Some(intent),
        }
    }

    /// Observes the AV, decides an action, updates intent, and announces any
    /// change of intention. Past the conflict point the driver cruises.
    pub fn tick(
        &mut self,
        w: &World,
        hv_id: u32,
        observed_av_accel: f64,
        ehmi: Option<&EhmiMessage>,
    ) -> Result<HvTick, EnvError> {
        self.belief = update_belief(self.belief, observed_av_accel, ehmi);
        let decided = hv_decide(w, hv_id, &self.params, self.belief, self.intent)?;
        if decided == MetaAction::Decelerate {
            self.decel_streak += 1;
        } else {
            self.decel_streak = 0;
        }
        if self.intent == Intention::Rush && self.decel_streak >= 2 {
            self.intent = Intention::Yield;
        }
        let av_path = w.av().path_id;
        let waiting = if w.distance_to_conflict(hv_id, av_path)? > 0.0 {
            w.stopped_for(hv_id)
        } else {
            0.0
        };
        self.intent = update_intent(self.intent, waiting, &self.params);
        let utterance = (self.announced != Some(self.intent)).then(|| {
            self.announced = Some(self.intent);
            instruction_for(self.intent)
        });
        let cleared = w.distance_to_conflict(hv_id, av_path)? <= 0.0;
        let action = if must_follow(w, hv_id) {
            MetaAction::Decelerate
        } else if cleared {
            // Back to cruising once the interaction is behind the driver.
            if w.vehicle(hv_id)?.v < MAX_SPEED { MetaAction::Accelerate } else { MetaAction::Maintain }
        } else {
            decided
        };
        Ok(HvTick { action, utterance })
    }
}
