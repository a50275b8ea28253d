//! WebSocket session server and trajectory replay.

use std::io;
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use actor_reasoner::memory::MemoryStore;
use actor_reasoner::model::Instruction;
use actor_reasoner::runtime::{
    Clock, EpisodeResult, LiveView, RunConfig, RuntimeError, Session, SessionBoard, Trajectory,
};
use actor_reasoner::snapshot::SharedSnapshot;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tungstenite::{Message, WebSocket};

pub const FRAME_PERIOD: Duration = Duration::from_millis(100);
pub const ACCEL_MIN: f64 = -3.0;
pub const ACCEL_MAX: f64 = 2.0;
const READ_POLL: Duration = Duration::from_millis(5);

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("websocket error: {0}")]
    Socket(#[from] tungstenite::Error),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleFrame {
    pub id: u32,
    pub role: String,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub tick: u64,
    pub av_mean_v: f64,
    pub min_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerFrame {
    pub t: f64,
    pub vehicles: Vec<VehicleFrame>,
    pub ehmi: String,
    pub style: String,
    pub intention: String,
    pub metrics: FrameMetrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub outcome: Option<String>,
}

impl ServerFrame {
    pub fn live(view: &LiveView, snap: &SharedSnapshot) -> Self {
        ServerFrame {
            t: view.t,
            vehicles: view
                .vehicles
                .iter()
                .map(|v| VehicleFrame {
                    id: v.id,
                    role: v.role.to_string(),
                    x: v.x,
                    y: v.y,
                    heading: v.heading,
                    v: v.v,
                })
                .collect(),
            ehmi: snap.ehmi.as_ref().map(|e| e.as_str().to_string()).unwrap_or_default(),
            style: snap.style.as_str().to_string(),
            intention: snap.intention.map(|i| i.as_str().to_string()).unwrap_or_default(),
            metrics: FrameMetrics {
                tick: view.tick,
                av_mean_v: view.av_mean_v,
                min_gap: view.min_gap,
            },
            outcome: view.outcome.map(|o| o.to_string()),
        }
    }
}

/// What the server did with one client text frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Handled {
    Control(f64),
    Instruction(String),
    /// Reply with `{"error": ...}`.
    Error(&'static str),
}

/// Applies a client message to the board: control messages set the clamped
/// acceleration of the driven HV, instructions go to the inbox.
pub fn handle_client_text(text: &str, board: &SessionBoard, t: f64, hv_id: u32) -> Handled {
    let Ok(value) = serde_json::from_str::<Value>(text) else {
        return Handled::Error("malformed message");
    };
    match value.get("type").and_then(Value::as_str) {
        Some("control") => match value.get("accel").and_then(Value::as_f64) {
            Some(a) if a.is_finite() => {
                let a = a.clamp(ACCEL_MIN, ACCEL_MAX);
                board.set_control(a);
                Handled::Control(a)
            }
            _ => Handled::Error("control needs a numeric accel"),
        },
        Some("instruction") => match value.get("text").and_then(Value::as_str) {
            Some(s) if !s.trim().is_empty() => {
                board.submit_instruction(Instruction::new(s, t, hv_id));
                Handled::Instruction(s.to_string())
            }
            _ => Handled::Error("instruction needs text"),
        },
        _ => Handled::Error("unknown type"),
    }
}

fn error_frame(reason: &str) -> String {
    serde_json::json!({ "error": reason }).to_string()
}

fn handshake(stream: TcpStream) -> Result<WebSocket<TcpStream>, ServerError> {
    let ws = tungstenite::accept(stream).map_err(|e| ServerError::Handshake(e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(READ_POLL))?;
    ws.get_ref().set_nodelay(true)?;
    Ok(ws)
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
}

/// The instruction section of a prompt.
fn prompt_instruction(text: &str) -> &str {
    text.split("## HV instruction\n").nth(1).and_then(|rest| rest.lines().next()).unwrap_or("")
}

/// Accepts one client, runs a wall-clock episode in which the client drives
/// the first HV, and streams frames every 100 ms until the episode ends. A
/// disconnect hands the HV back to its driver model and the episode finishes
/// unobserved.
pub fn serve_session(
    cfg: &RunConfig,
    store: &MemoryStore,
    listener: TcpListener,
    episode: usize,
) -> Result<EpisodeResult, ServerError> {
    let cfg = RunConfig { clock: Clock::RealTime, ..cfg.clone() };
    let (stream, peer) = listener.accept()?;
    eprintln!("client connected from {peer}");
    let mut ws = handshake(stream)?;

    let session = Session::new(&cfg, episode)?;
    let hv_id = session.world().hvs().next().map(|v| v.id).unwrap_or(1);
    let board: Arc<SessionBoard> = session.board.clone();
    board.attach_controller();

    thread::scope(|scope| {
        let runner = scope.spawn(|| session.run(&cfg, store));
        let streamed = stream_live(&mut ws, &board, hv_id);
        if streamed.is_err() || board.is_controlled() {
            board.detach_controller();
        }
        let (result, _) = runner.join().expect("session panicked")?;
        if let Err(e) = streamed {
            eprintln!("client stream ended: {e}");
        }
        Ok(result)
    })
}

fn stream_live(ws: &mut WebSocket<TcpStream>, board: &SessionBoard, hv_id: u32) -> Result<(), ServerError> {
    let mut next_frame = Instant::now();
    let mut last_instruction = String::new();
    let mut seen_prompts = 0;
    loop {
        loop {
            match ws.read() {
                Ok(Message::Text(text)) => {
                    let t = board.view().t;
                    match handle_client_text(text.as_str(), board, t, hv_id) {
                        Handled::Error(reason) => ws.send(Message::text(error_frame(reason)))?,
                        Handled::Instruction(s) => eprintln!("t={t:.1} instruction queued: {s}"),
                        Handled::Control(_) => {}
                    }
                }
                Ok(Message::Close(_)) => {
                    board.detach_controller();
                    return Ok(());
                }
                Ok(_) => {}
                Err(e) if would_block(&e) => break,
                Err(e) => return Err(e.into()),
            }
        }

        let prompts = board.prompts();
        for p in &prompts[seen_prompts..] {
            let instruction = prompt_instruction(&p.text);
            if instruction != last_instruction {
                eprintln!("reasoner prompt v{} instruction: {instruction}", p.built_from_version);
                last_instruction = instruction.to_string();
            }
        }
        seen_prompts = prompts.len();

        let view = board.view();
        let finished = view.outcome.is_some() || board.is_stopped();
        if finished || Instant::now() >= next_frame {
            let frame = ServerFrame::live(&view, &board.snapshot());
            ws.send(Message::text(serde_json::to_string(&frame)?))?;
            next_frame += FRAME_PERIOD;
        }
        if finished {
            ws.close(None)?;
            // Drain until the client acknowledges the close.
            let deadline = Instant::now() + Duration::from_secs(1);
            while Instant::now() < deadline {
                match ws.read() {
                    Err(e) if would_block(&e) => continue,
                    Err(_) => break,
                    Ok(_) => {}
                }
            }
            return Ok(());
        }
    }
}

/// One frame per recorded tick.
pub fn replay_frames(trajectory: &Trajectory) -> Vec<ServerFrame> {
    let mut frames: Vec<ServerFrame> = Vec::new();
    let (mut v_sum, mut v_n) = (0.0, 0usize);
    for row in &trajectory.rows {
        let same_tick = frames.last().is_some_and(|f| (f.t - row.t).abs() < 1e-9);
        if !same_tick {
            frames.push(ServerFrame {
                t: row.t,
                vehicles: Vec::new(),
                ehmi: String::new(),
                style: String::new(),
                intention: String::new(),
                metrics: FrameMetrics {
                    tick: (row.t * 10.0).round() as u64,
                    av_mean_v: 0.0,
                    min_gap: None,
                },
                outcome: None,
            });
        }
        let frame = frames.last_mut().expect("frame pushed above");
        if row.role == "AV" {
            v_sum += row.v;
            v_n += 1;
            frame.metrics.av_mean_v = v_sum / v_n as f64;
            frame.ehmi = row.ehmi.clone();
            frame.style = row.style.clone();
            frame.intention = row.intention.clone();
        }
        frame.vehicles.push(VehicleFrame {
            id: row.vehicle_id,
            role: row.role.clone(),
            x: row.x,
            y: row.y,
            heading: row.heading,
            v: row.v,
        });
    }
    frames
}

/// Accepts one client and streams the frames at their recorded times divided
/// by `speed`. Returns the number of frames sent.
pub fn serve_replay(frames: &[ServerFrame], listener: TcpListener, speed: f64) -> Result<usize, ServerError> {
    let (stream, _) = listener.accept()?;
    let mut ws = handshake(stream)?;
    let Some(first) = frames.first() else {
        ws.close(None)?;
        return Ok(0);
    };
    let start = Instant::now();
    for frame in frames {
        let due = start + Duration::from_secs_f64(((frame.t - first.t) / speed).max(0.0));
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
        ws.send(Message::text(serde_json::to_string(frame)?))?;
    }
    ws.close(None)?;
    let deadline = Instant::now() + Duration::from_secs(1);
    while Instant::now() < deadline {
        match ws.read() {
            Err(e) if would_block(&e) => continue,
            Err(_) => break,
            Ok(_) => {}
        }
    }
    Ok(frames.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use actor_reasoner::snapshot::SharedSnapshot;

    #[test]
    fn client_messages() {
        let board = SessionBoard::new(SharedSnapshot::default());
        assert_eq!(handle_client_text(r#"{"type":"control","accel":9.0}"#, &board, 0.0, 1), Handled::Control(2.0));
        assert_eq!(board.control(), Some(2.0));
        assert_eq!(handle_client_text(r#"{"type":"control","accel":-7}"#, &board, 0.0, 1), Handled::Control(-3.0));
        assert_eq!(
            handle_client_text(r#"{"type":"dance"}"#, &board, 0.0, 1),
            Handled::Error("unknown type")
        );
        assert!(matches!(handle_client_text("{not json", &board, 0.0, 1), Handled::Error(_)));
        assert!(matches!(handle_client_text(r#"{"type":"control"}"#, &board, 0.0, 1), Handled::Error(_)));
        handle_client_text(r#"{"type":"instruction","text":"first"}"#, &board, 0.1, 1);
        handle_client_text(r#"{"type":"instruction","text":"I will be slower"}"#, &board, 0.2, 1);
        let got = board.take_instruction().unwrap();
        assert_eq!((got.text.as_str(), got.source), ("I will be slower", 1));
        assert_eq!(error_frame("unknown type"), r#"{"error":"unknown type"}"#);
    }

    #[test]
    fn prompt_instruction_section() {
        let text = "## Scenario\nx\n\n## HV instruction\nI will be slower\n\n## Sub-questions\n";
        assert_eq!(prompt_instruction(text), "I will be slower");
        assert_eq!(prompt_instruction("no sections"), "");
    }
}
