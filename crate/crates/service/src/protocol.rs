//! Wire protocol, version 1.
//!
//! Text messages are JSON objects carrying `"v": 1` and a `"type"` tag.
//!
//! Client to server:
//! - `force`: `{"v":1,"type":"force","force":[fx,fy,fz],"kernel_ids":[..]}` or
//!   with `"ray":{"origin":[..],"direction":[..],"radius":r}` instead of ids
//! - `control`: `{"v":1,"type":"control","action":"pause"|"resume"|"reset"}` or
//!   `{"action":"set-provider","provider":{"kind":"oscillator",..}}`
//! - `probe`: asks for the latest `state` as JSON, regardless of frame rate
//!
//! Server to client:
//! - `scene-info` (first message on every connection)
//! - `state`, as a binary frame (default) or JSON (`/ws?format=json`)
//! - `ack` after a force or control message has been applied
//! - `error` for a rejected message; the connection stays open
//!
//! Binary `state` frame, little-endian:
//! ```text
//! magic b"SPST", version u32 = 1, frame u64, time f64, count u32,
//! floats per kernel u32 = 12,
//! count × { px py pz, cx cy, major minor angle depth, r g b } f32
//! ```

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use splatsim::io::ProviderConfig;
use splatsim::projection::{CameraAxis, Ellipse};
use splatsim::Vec3;

pub const PROTOCOL_VERSION: u32 = 1;
pub const STATE_MAGIC: &[u8; 4] = b"SPST";
pub const FLOATS_PER_KERNEL: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickRay {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceRequest {
    pub force: [f64; 3],
    #[serde(default)]
    pub kernel_ids: Vec<usize>,
    #[serde(default)]
    pub ray: Option<PickRay>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum Control {
    Pause,
    Resume,
    Reset,
    SetProvider { provider: ProviderConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ClientMessage {
    Force(ForceRequest),
    Control(Control),
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub kernel_count: usize,
    pub bounds: Bounds,
    pub dt: f64,
    pub level_counts: Vec<usize>,
    pub camera_axis: CameraAxis,
    pub max_fps: f64,
    pub provider: String,
}

/// JSON form of a streamed frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub frame: u64,
    pub time: f64,
    pub paused: bool,
    pub positions: Vec<[f64; 3]>,
    /// `[cx, cy, major, minor, angle, depth]` per kernel.
    pub ellipses: Vec<[f64; 6]>,
    pub colors: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ServerMessage {
    SceneInfo(SceneInfo),
    State(StateMessage),
    Ack { request: String, detail: String },
    Error { message: String },
}

impl ServerMessage {
    pub fn error(message: impl Into<String>) -> Self {
        ServerMessage::Error { message: message.into() }
    }

    /// Serialized with the protocol version.
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("server messages serialize");
        v["v"] = json!(PROTOCOL_VERSION);
        v.to_string()
    }
}

/// Parses a client text message, checking the protocol version.
pub fn parse_client(text: &str) -> Result<ClientMessage, String> {
    let v: Value = serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))?;
    match v.get("v").and_then(Value::as_u64) {
        Some(n) if n == PROTOCOL_VERSION as u64 => {}
        Some(n) => return Err(format!("unsupported protocol version {n} (expected {PROTOCOL_VERSION})")),
        None => return Err("missing protocol version \"v\"".into()),
    }
    serde_json::from_value(v).map_err(|e| format!("malformed message: {e}"))
}

pub fn parse_server(text: &str) -> Result<ServerMessage, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

/// One rendered kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelView {
    pub position: Vec3,
    pub ellipse: Ellipse,
    pub rgb: Vec3,
}

pub fn state_json(frame: u64, time: f64, paused: bool, kernels: &[KernelView]) -> StateMessage {
    StateMessage {
        frame,
        time,
        paused,
        positions: kernels.iter().map(|k| k.position.into()).collect(),
        ellipses: kernels
            .iter()
            .map(|k| {
                let e = &k.ellipse;
                [e.center[0], e.center[1], e.axes[0], e.axes[1], e.angle, e.depth]
            })
            .collect(),
        colors: kernels.iter().map(|k| k.rgb.into()).collect(),
    }
}

pub fn encode_state(frame: u64, time: f64, kernels: &[KernelView]) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + kernels.len() * FLOATS_PER_KERNEL * 4);
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.extend_from_slice(&frame.to_le_bytes());
    out.extend_from_slice(&time.to_le_bytes());
    out.extend_from_slice(&(kernels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(FLOATS_PER_KERNEL as u32).to_le_bytes());
    for k in kernels {
        let e = &k.ellipse;
        let vals = [
            k.position.x,
            k.position.y,
            k.position.z,
            e.center[0],
            e.center[1],
            e.axes[0],
            e.axes[1],
            e.angle,
            e.depth,
            k.rgb.x,
            k.rgb.y,
            k.rgb.z,
        ];
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Decoded binary frame: `(frame, time, floats)` with 12 floats per kernel.
pub fn decode_state(buf: &[u8]) -> Result<(u64, f64, Vec<f32>), String> {
    if buf.len() < 32 || &buf[..4] != STATE_MAGIC {
        return Err("not a state frame".into());
    }
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
    if u32_at(4) != PROTOCOL_VERSION {
        return Err(format!("unsupported state frame version {}", u32_at(4)));
    }
    let frame = u64::from_le_bytes(buf[8..16].try_into().unwrap());
    let time = f64::from_le_bytes(buf[16..24].try_into().unwrap());
    let count = u32_at(24) as usize;
    let stride = u32_at(28) as usize;
    let body = &buf[32..];
    if body.len() != count * stride * 4 {
        return Err(format!("state frame body has {} bytes for {count} kernels", body.len()));
    }
    Ok((
        frame,
        time,
        body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
    ))
}
