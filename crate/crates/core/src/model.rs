//! Shared domain vocabulary: styles, intentions, actions, the memory unit and
//! its JSONL record form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard speed ceiling for every vehicle (m/s).
pub const MAX_SPEED: f64 = 5.0;
/// Cap applied to every time-to-conflict value (s).
pub const TTC_CAP: f64 = 10.0;
/// Maximum eHMI display length in characters.
pub const EHMI_MAX_CHARS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabError {
    #[error("unknown driving style `{0}`")]
    Style(String),
    #[error("unknown intention `{0}`")]
    Intention(String),
    #[error("unknown action `{0}`")]
    Action(String),
    #[error("eHMI text is {0} characters, limit is {EHMI_MAX_CHARS}")]
    EhmiTooLong(usize),
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("malformed record: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("scenario length {0} ≠ 9")]
    ScenarioLength(usize),
    #[error("scenario value {index} = {value} out of range")]
    ScenarioRange { index: usize, value: f64 },
    #[error("record style `{record}` disagrees with experience style `{experience}`")]
    StyleMismatch { record: String, experience: String },
}

/// Driving style of the opposing human driver. Also the key of a memory block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum DrivingStyle {
    #[default]
    General,
    Aggressive,
    Conservative,
}

impl DrivingStyle {
    /// Block order used everywhere a store is laid out.
    pub const ALL: [DrivingStyle; 3] = [
        DrivingStyle::General,
        DrivingStyle::Aggressive,
        DrivingStyle::Conservative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DrivingStyle::General => "general",
            DrivingStyle::Aggressive => "aggressive",
            DrivingStyle::Conservative => "conservative",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Case-insensitive style parsing. `normal` is an alias of `general`.
pub fn parse_style(label: &str) -> Result<DrivingStyle, VocabError> {
    match label.trim().to_ascii_lowercase().as_str() {
        "general" | "normal" => Ok(DrivingStyle::General),
        "aggressive" => Ok(DrivingStyle::Aggressive),
        "conservative" => Ok(DrivingStyle::Conservative),
        _ => Err(VocabError::Style(label.to_string())),
    }
}

impl FromStr for DrivingStyle {
    type Err = VocabError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_style(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Intention {
    Yield,
    Rush,
}

impl Intention {
    pub fn as_str(self) -> &'static str {
        match self {
            Intention::Yield => "yield",
            Intention::Rush => "rush",
        }
    }
}

impl FromStr for Intention {
    type Err = VocabError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yield" => Ok(Intention::Yield),
            "rush" => Ok(Intention::Rush),
            _ => Err(VocabError::Intention(s.to_string())),
        }
    }
}

/// Longitudinal meta-action. `Maintain` is the initial action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MetaAction {
    Accelerate,
    Decelerate,
    #[default]
    Maintain,
}

impl MetaAction {
    pub const ALL: [MetaAction; 3] = [
        MetaAction::Accelerate,
        MetaAction::Decelerate,
        MetaAction::Maintain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetaAction::Accelerate => "ACCELERATE",
            MetaAction::Decelerate => "DECELERATE",
            MetaAction::Maintain => "MAINTAIN",
        }
    }

    /// Commanded acceleration in m/s².
    pub fn accel(self) -> f64 {
        action_to_accel(self)
    }
}

pub fn action_to_accel(action: MetaAction) -> f64 {
    match action {
        MetaAction::Accelerate => 2.0,
        MetaAction::Decelerate => -3.0,
        MetaAction::Maintain => 0.0,
    }
}

impl FromStr for MetaAction {
    type Err = VocabError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ACCELERATE" => Ok(MetaAction::Accelerate),
            "DECELERATE" => Ok(MetaAction::Decelerate),
            "MAINTAIN" => Ok(MetaAction::Maintain),
            _ => Err(VocabError::Action(s.to_string())),
        }
    }
}

macro_rules! string_serde {
    ($ty:ty) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(d)?;
                raw.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(DrivingStyle);
string_serde!(Intention);
string_serde!(MetaAction);

/// Text shown on the AV's outward-facing display.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
#[serde(transparent)]
pub struct EhmiMessage(String);

impl EhmiMessage {
    pub const FASTER: &'static str = "I will be Faster";
    pub const SLOWER: &'static str = "I will be Slower";
    pub const MAINTAINING: &'static str = "Maintaining";

    pub fn new(text: impl Into<String>) -> Result<Self, VocabError> {
        let text = text.into();
        let n = text.chars().count();
        if n > EHMI_MAX_CHARS {
            return Err(VocabError::EhmiTooLong(n));
        }
        Ok(EhmiMessage(text))
    }

    /// The canonical display for an action.
    pub fn for_action(action: MetaAction) -> Self {
        let text = match action {
            MetaAction::Accelerate => Self::FASTER,
            MetaAction::Decelerate => Self::SLOWER,
            MetaAction::Maintain => Self::MAINTAINING,
        };
        EhmiMessage(text.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'de> Deserialize<'de> for EhmiMessage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        EhmiMessage::new(raw).map_err(serde::de::Error::custom)
    }
}

/// A human instruction. Empty text means "no instruction".
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub issued_at: f64,
    pub source: u32,
}

impl Instruction {
    pub fn new(text: impl Into<String>, issued_at: f64, source: u32) -> Self {
        Instruction {
            text: text.into(),
            issued_at,
            source,
        }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty()
    }
}

/// Standardized numeric state of the AV and its current opponent:
/// `[x_av, y_av, vx_av, vy_av, x_hv, y_hv, vx_hv, vy_hv, c]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScenarioDescription(pub [f64; 9]);

impl ScenarioDescription {
    pub const LEN: usize = 9;
    pub const LABELS: [&'static str; 9] = [
        "av_x", "av_y", "av_vx", "av_vy", "hv_x", "hv_y", "hv_vx", "hv_vy", "conflict_time",
    ];

    pub fn new(values: [f64; 9]) -> Self {
        ScenarioDescription(values)
    }

    /// Builds a description from a slice, checking length and value ranges.
    pub fn from_slice(values: &[f64]) -> Result<Self, RecordError> {
        let arr: [f64; 9] = values
            .try_into()
            .map_err(|_| RecordError::ScenarioLength(values.len()))?;
        for (index, &value) in arr.iter().enumerate() {
            let ok = match index {
                2 | 3 | 6 | 7 => value.is_finite() && value.abs() <= MAX_SPEED + 1e-9,
                8 => (0.0..=TTC_CAP).contains(&value),
                _ => value.is_finite(),
            };
            if !ok {
                return Err(RecordError::ScenarioRange { index, value });
            }
        }
        Ok(ScenarioDescription(arr))
    }

    pub fn values(&self) -> &[f64; 9] {
        &self.0
    }

    pub fn av_speed(&self) -> f64 {
        self.0[2].hypot(self.0[3])
    }

    pub fn hv_speed(&self) -> f64 {
        self.0[6].hypot(self.0[7])
    }

    pub fn conflict_time(&self) -> f64 {
        self.0[8]
    }
}

/// Textual experience tuple (intention, style, instruction, eHMI).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceDescription {
    pub intention: Intention,
    pub style: DrivingStyle,
    pub instruction: String,
    pub ehmi: String,
}

impl ExperienceDescription {
    pub fn fields(&self) -> [&str; 4] {
        [
            self.intention.as_str(),
            self.style.as_str(),
            &self.instruction,
            &self.ehmi,
        ]
    }
}

/// One stored interaction frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryUnit {
    pub scenario: ScenarioDescription,
    pub experience: ExperienceDescription,
    pub action: MetaAction,
    pub episode_id: u64,
    pub frame_index: u64,
}

impl MemoryUnit {
    pub fn style(&self) -> DrivingStyle {
        self.experience.style
    }

    pub fn key(&self) -> (u64, u64) {
        (self.episode_id, self.frame_index)
    }
}

// Field order here is the on-disk key order.
#[derive(Serialize, Deserialize)]
struct Record {
    episode: u64,
    frame: u64,
    style: String,
    scenario: Vec<f64>,
    experience: RecordExperience,
    action: MetaAction,
}

#[derive(Serialize, Deserialize)]
struct RecordExperience {
    intention: Intention,
    style: String,
    instruction: String,
    ehmi: String,
}

pub fn memory_to_record(m: &MemoryUnit) -> String {
    let record = Record {
        episode: m.episode_id,
        frame: m.frame_index,
        style: m.style().as_str().to_string(),
        scenario: m.scenario.0.to_vec(),
        experience: RecordExperience {
            intention: m.experience.intention,
            style: m.experience.style.as_str().to_string(),
            instruction: m.experience.instruction.clone(),
            ehmi: m.experience.ehmi.clone(),
        },
        action: m.action,
    };
    serde_json::to_string(&record).expect("record serialization is infallible")
}

pub fn record_to_memory(line: &str) -> Result<MemoryUnit, RecordError> {
    let record: Record = serde_json::from_str(line)?;
    let scenario = ScenarioDescription::from_slice(&record.scenario)?;
    let block_style = parse_style(&record.style)?;
    let style = parse_style(&record.experience.style)?;
    if block_style != style {
        return Err(RecordError::StyleMismatch {
            record: record.style,
            experience: record.experience.style,
        });
    }
    Ok(MemoryUnit {
        scenario,
        experience: ExperienceDescription {
            intention: record.experience.intention,
            style,
            instruction: record.experience.instruction,
            ehmi: record.experience.ehmi,
        },
        action: record.action,
        episode_id: record.episode,
        frame_index: record.frame,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeOutcome {
    Success,
    Collision,
    Deadlock,
    Timeout,
}

impl EpisodeOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeOutcome::Success => "success",
            EpisodeOutcome::Collision => "collision",
            EpisodeOutcome::Deadlock => "deadlock",
            EpisodeOutcome::Timeout => "timeout",
        }
    }

    pub fn is_success(self) -> bool {
        self == EpisodeOutcome::Success
    }
}

impl FromStr for EpisodeOutcome {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "success" => Ok(EpisodeOutcome::Success),
            "collision" => Ok(EpisodeOutcome::Collision),
            "deadlock" => Ok(EpisodeOutcome::Deadlock),
            "timeout" => Ok(EpisodeOutcome::Timeout),
            other => Err(format!("unknown outcome `{other}`")),
        }
    }
}

impl fmt::Display for EpisodeOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
