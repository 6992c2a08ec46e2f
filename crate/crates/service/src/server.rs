//! Websocket server around one [`Engine`].
//!
//! The simulation runs on its own thread and is the only writer of the
//! engine. Client messages reach it through a bounded FIFO queue, so forces
//! and controls apply in arrival order between steps. Frames are published
//! through a watch channel; slow clients only ever see the newest one.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use serde::Deserialize;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::time::MissedTickBehavior;
use tower_http::services::ServeDir;

use splatsim::engine::{step, Engine};
use splatsim::projection::{kernel_rgb, project_ellipse, CameraAxis};
use splatsim::Vec3;

use crate::pick::pick_kernels;
use crate::protocol::{
    encode_state, parse_client, state_json, Bounds, ClientMessage, Control, ForceRequest, KernelView, SceneInfo,
    ServerMessage,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ServeOptions {
    pub bind: IpAddr,
    /// 0 picks a free port.
    pub port: u16,
    pub max_fps: f64,
    pub camera_axis: CameraAxis,
    /// Pace steps at `dt` of wall time; otherwise step as fast as possible.
    pub realtime: bool,
    pub start_paused: bool,
    /// Static files served at `/` (the viewer bundle).
    pub assets: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 8080,
            max_fps: 30.0,
            camera_axis: CameraAxis::Z,
            realtime: true,
            start_paused: false,
            assets: None,
        }
    }
}

/// One published frame.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub frame: u64,
    pub time: f64,
    pub paused: bool,
    pub kernels: Vec<KernelView>,
}

type Reply = oneshot::Sender<Result<ServerMessage, String>>;

enum Command {
    Force(ForceRequest, Reply),
    Control(Control, Reply),
    Probe(Reply),
    Stop,
}

fn snapshot(engine: &Engine, axis: CameraAxis, paused: bool) -> Snapshot {
    let cur = &engine.state.current;
    let kernels = (0..engine.scene.len())
        .map(|k| KernelView {
            position: cur.positions[k],
            ellipse: project_ellipse(&cur.positions[k], &cur.covariances[k], axis),
            rgb: kernel_rgb(&engine.scene.kernels[k].sh_coeffs, &cur.rotations[k], axis).unwrap_or_else(|_| Vec3::repeat(0.5)),
        })
        .collect();
    Snapshot {
        frame: engine.state.step,
        time: engine.state.time(),
        paused,
        kernels,
    }
}

struct Simulation {
    engine: Engine,
    axis: CameraAxis,
    paused: bool,
    publish: watch::Sender<Arc<Snapshot>>,
}

impl Simulation {
    fn publish(&self) {
        self.publish.send_replace(Arc::new(snapshot(&self.engine, self.axis, self.paused)));
    }

    /// False once the simulation should stop.
    fn handle(&mut self, cmd: Command) -> bool {
        match cmd {
            Command::Force(req, reply) => {
                let _ = reply.send(self.force(req));
            }
            Command::Control(c, reply) => {
                let _ = reply.send(self.control(c));
            }
            Command::Probe(reply) => {
                let s = snapshot(&self.engine, self.axis, self.paused);
                let _ = reply.send(Ok(ServerMessage::State(state_json(s.frame, s.time, s.paused, &s.kernels))));
            }
            Command::Stop => return false,
        }
        true
    }

    fn force(&mut self, req: ForceRequest) -> Result<ServerMessage, String> {
        let ids = match &req.ray {
            Some(ray) => pick_kernels(
                &ray.origin.into(),
                &ray.direction.into(),
                ray.radius,
                &self.engine.state.current.positions,
            )
            .map_err(|e| e.to_string())?,
            None => req.kernel_ids.clone(),
        };
        if ids.is_empty() {
            return Err("empty selection".into());
        }
        let n = ids.len();
        self.engine.apply_force(ids, req.force.into()).map_err(|e| e.to_string())?;
        self.publish();
        Ok(ServerMessage::Ack {
            request: "force".into(),
            detail: format!("force applied to {n} kernels at frame {}", self.engine.state.step),
        })
    }

    fn control(&mut self, c: Control) -> Result<ServerMessage, String> {
        let detail = match c {
            Control::Pause => {
                self.paused = true;
                "paused".to_string()
            }
            Control::Resume => {
                self.paused = false;
                "resumed".to_string()
            }
            Control::Reset => {
                self.engine.reset().map_err(|e| e.to_string())?;
                "reset".to_string()
            }
            Control::SetProvider { provider } => {
                let p = provider.build().map_err(|e| e.to_string())?;
                // a provider that cannot step this hierarchy is refused up front
                let e = &self.engine;
                step(&e.state, &e.hierarchy, p.as_ref(), &e.scene).map_err(|err| err.to_string())?;
                let name = p.name().to_string();
                self.engine.set_provider(p);
                format!("provider {name}")
            }
        };
        self.publish();
        Ok(ServerMessage::Ack { request: "control".into(), detail })
    }

    fn run(mut self, mut commands: mpsc::Receiver<Command>, realtime: bool) {
        let dt = Duration::from_secs_f64(self.engine.state.dt);
        let mut next_tick = Instant::now();
        loop {
            if self.paused {
                let Some(cmd) = commands.blocking_recv() else { return };
                if !self.handle(cmd) {
                    return;
                }
                next_tick = Instant::now();
                continue;
            }
            loop {
                match commands.try_recv() {
                    Ok(cmd) => {
                        if !self.handle(cmd) {
                            return;
                        }
                    }
                    Err(mpsc::error::TryRecvError::Empty) => break,
                    Err(mpsc::error::TryRecvError::Disconnected) => return,
                }
            }
            if self.paused {
                continue;
            }
            if let Err(e) = self.engine.step() {
                log::error!("simulation paused: {e}");
                self.paused = true;
            }
            self.publish();
            if realtime {
                next_tick += dt;
                let now = Instant::now();
                if next_tick > now {
                    std::thread::sleep(next_tick - now);
                } else {
                    next_tick = now;
                }
            }
        }
    }
}

#[derive(Clone)]
struct AppState {
    commands: mpsc::Sender<Command>,
    frames: watch::Receiver<Arc<Snapshot>>,
    info: Arc<SceneInfo>,
}

#[derive(Debug, Default, Deserialize)]
struct WsQuery {
    format: Option<String>,
}

/// A running server. Dropping it without [`ServerHandle::shutdown`] leaves
/// the tasks running until the runtime stops.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: oneshot::Sender<()>,
    commands: mpsc::Sender<Command>,
    serve: tokio::task::JoinHandle<std::io::Result<()>>,
    sim: JoinHandle<()>,
}

impl ServerHandle {
    /// Stops accepting connections and joins the simulation thread.
    pub async fn shutdown(self) -> std::io::Result<()> {
        let _ = self.shutdown.send(());
        let _ = self.commands.send(Command::Stop).await;
        let served = self.serve.await.map_err(std::io::Error::other)?;
        let sim = self.sim;
        tokio::task::spawn_blocking(move || sim.join())
            .await
            .map_err(std::io::Error::other)?
            .map_err(|_| std::io::Error::other("simulation thread panicked"))?;
        served
    }

    /// Resolves when the server stops on its own (it normally does not).
    pub async fn wait(&mut self) -> std::io::Result<()> {
        (&mut self.serve).await.map_err(std::io::Error::other)?
    }
}

pub fn scene_info(engine: &Engine, opts: &ServeOptions) -> SceneInfo {
    let (min, max) = engine.scene.bounds();
    SceneInfo {
        kernel_count: engine.scene.len(),
        bounds: Bounds { min: min.into(), max: max.into() },
        dt: engine.state.dt,
        level_counts: engine.hierarchy.level_counts(),
        camera_axis: opts.camera_axis,
        max_fps: opts.max_fps,
        provider: engine.provider.name().to_string(),
    }
}

/// Binds, starts the simulation thread and serves `/ws` (plus the assets
/// directory, if any). Must be called inside a multi-threaded tokio runtime.
pub async fn start(engine: Engine, opts: ServeOptions) -> std::io::Result<ServerHandle> {
    if !(opts.max_fps.is_finite() && opts.max_fps > 0.0) {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "max_fps must be positive"));
    }
    let listener = tokio::net::TcpListener::bind((opts.bind, opts.port)).await?;
    let addr = listener.local_addr()?;

    let info = Arc::new(scene_info(&engine, &opts));
    let (frame_tx, frame_rx) = watch::channel(Arc::new(snapshot(&engine, opts.camera_axis, opts.start_paused)));
    let (cmd_tx, cmd_rx) = mpsc::channel(256);
    let sim = Simulation {
        engine,
        axis: opts.camera_axis,
        paused: opts.start_paused,
        publish: frame_tx,
    };
    let realtime = opts.realtime;
    let sim = std::thread::Builder::new()
        .name("simulation".into())
        .spawn(move || sim.run(cmd_rx, realtime))?;

    let state = AppState {
        commands: cmd_tx.clone(),
        frames: frame_rx,
        info,
    };
    let mut app = Router::new().route("/ws", get(ws_handler)).with_state(state);
    if let Some(dir) = &opts.assets {
        app = app.fallback_service(ServeDir::new(dir));
    }
    let (shutdown, shutdown_rx) = oneshot::channel::<()>();
    let serve = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = shutdown_rx.await;
            })
            .await
    });
    log::info!("listening on {addr}");
    Ok(ServerHandle {
        addr,
        shutdown,
        commands: cmd_tx,
        serve,
        sim,
    })
}

async fn ws_handler(ws: WebSocketUpgrade, Query(q): Query<WsQuery>, State(state): State<AppState>) -> Response {
    let json = q.format.as_deref() == Some("json");
    ws.on_upgrade(move |socket| client(socket, state, json))
}

async fn submit(commands: &mpsc::Sender<Command>, make: impl FnOnce(Reply) -> Command) -> ServerMessage {
    let (tx, rx) = oneshot::channel();
    if commands.send(make(tx)).await.is_err() {
        return ServerMessage::error("simulation stopped");
    }
    match rx.await {
        Ok(Ok(msg)) => msg,
        Ok(Err(e)) => ServerMessage::error(e),
        Err(_) => ServerMessage::error("simulation stopped"),
    }
}

fn frame_message(s: &Snapshot, json: bool) -> Message {
    if json {
        Message::Text(ServerMessage::State(state_json(s.frame, s.time, s.paused, &s.kernels)).to_json().into())
    } else {
        Message::Binary(encode_state(s.frame, s.time, &s.kernels).into())
    }
}

async fn client(mut socket: WebSocket, state: AppState, json: bool) {
    let AppState { commands, mut frames, info } = state;
    let hello = ServerMessage::SceneInfo((*info).clone()).to_json();
    if socket.send(Message::Text(hello.into())).await.is_err() {
        return;
    }
    let first = frames.borrow_and_update().clone();
    if socket.send(frame_message(&first, json)).await.is_err() {
        return;
    }
    let mut tick = tokio::time::interval(Duration::from_secs_f64(1.0 / info.max_fps));
    tick.set_missed_tick_behavior(MissedTickBehavior::Skip);
    loop {
        tokio::select! {
            _ = tick.tick() => {
                match frames.has_changed() {
                    Ok(true) => {
                        let s = frames.borrow_and_update().clone();
                        if socket.send(frame_message(&s, json)).await.is_err() {
                            return;
                        }
                    }
                    Ok(false) => {}
                    Err(_) => {
                        let _ = socket.send(Message::Close(None)).await;
                        return;
                    }
                }
            }
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                let reply = match parse_client(&text) {
                    Err(e) => ServerMessage::error(e),
                    Ok(ClientMessage::Force(req)) => submit(&commands, |r| Command::Force(req, r)).await,
                    Ok(ClientMessage::Control(c)) => submit(&commands, |r| Command::Control(c, r)).await,
                    Ok(ClientMessage::Probe) => submit(&commands, Command::Probe).await,
                };
                if socket.send(Message::Text(reply.to_json().into())).await.is_err() {
                    return;
                }
            }
        }
    }
}
