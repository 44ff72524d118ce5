//! Frame service: one thread and one selective session per WebSocket client.

use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use flod_core::camera::Camera;
use flod_core::defaults::Defaults;
use flod_core::io::{load_model, Manifest};
use flod_core::model::MultiLevelModel;
use flod_core::selective::{RebuildMode, ReferencePolicy, SelectionConfig, Session};
use tungstenite::handshake::HandshakeError;
use tungstenite::{Message, WebSocket};

use crate::commands::shutdown_flag;
use crate::error::{CliError, CliResult};
use crate::protocol::{ClientMessage, ErrorCode, ServerMessage, PROTOCOL_VERSION};
use crate::ServeArgs;

/// How often blocked reads and the accept loop look at the shutdown flag.
const POLL: Duration = Duration::from_millis(50);

/// Read-only state shared by all client threads.
pub struct ServedModel {
    pub model: Arc<MultiLevelModel>,
    pub manifest: Manifest,
    pub defaults: Defaults,
    pub policy: ReferencePolicy,
    pub background: [f64; 3],
}

impl ServedModel {
    pub fn load(args: &ServeArgs, defaults: Defaults) -> CliResult<Self> {
        let (manifest, model) =
            load_model(&args.model).map_err(|e| CliError::Runtime(format!("{}: {e}", args.model.display())))?;
        Ok(Self {
            model: Arc::new(model),
            manifest,
            defaults,
            policy: args.reference.into(),
            background: args.background,
        })
    }

    fn default_lod(&self) -> SelectionConfig {
        let mut cfg = SelectionConfig::new(1, self.model.l_max, self.defaults.gamma);
        cfg.policy = self.policy;
        cfg.update_period = self.defaults.update_period;
        cfg
    }
}

pub fn serve_command(args: &ServeArgs, defaults: Defaults) -> CliResult<()> {
    let served = Arc::new(ServedModel::load(args, defaults)?);
    let listener =
        TcpListener::bind(&args.bind).map_err(|e| CliError::Runtime(format!("cannot bind {}: {e}", args.bind)))?;
    log::info!("serving {} on {}", args.model.display(), listener.local_addr()?);
    serve(listener, served, shutdown_flag())
}

/// Accepts clients until `stop` is set, then waits for every client thread.
pub fn serve(listener: TcpListener, served: Arc<ServedModel>, stop: Arc<AtomicBool>) -> CliResult<()> {
    listener.set_nonblocking(true)?;
    let mut clients: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, addr)) => {
                log::info!("client {addr} connected");
                let served = Arc::clone(&served);
                let stop = Arc::clone(&stop);
                clients.push(std::thread::spawn(move || {
                    if let Err(e) = handle_client(stream, served, stop) {
                        log::warn!("client {addr}: {e}");
                    }
                    log::info!("client {addr} disconnected");
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => log::warn!("accept failed: {e}"),
        }
        clients.retain(|h| !h.is_finished());
    }
    log::info!("shutting down, waiting for {} clients", clients.len());
    for h in clients {
        let _ = h.join();
    }
    Ok(())
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn accept(stream: TcpStream, stop: &AtomicBool) -> CliResult<WebSocket<TcpStream>> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(POLL))?;
    let mut attempt = tungstenite::accept(stream);
    loop {
        match attempt {
            Ok(ws) => return Ok(ws),
            Err(HandshakeError::Interrupted(mid)) => {
                if stop.load(Ordering::SeqCst) {
                    return Err(CliError::Runtime("shutdown during handshake".into()));
                }
                attempt = mid.handshake();
            }
            Err(HandshakeError::Failure(e)) => return Err(CliError::Runtime(format!("handshake: {e}"))),
        }
    }
}

/// Per-connection protocol state.
struct Client {
    served: Arc<ServedModel>,
    greeted: bool,
    view: Option<Camera>,
    lod: SelectionConfig,
    session: Option<Session>,
    frames: usize,
}

/// What a message produced: envelopes, an optional PNG after the last one,
/// and whether to close.
struct Reply {
    messages: Vec<ServerMessage>,
    png: Option<Vec<u8>>,
    close: bool,
}

impl Reply {
    fn one(m: ServerMessage) -> Self {
        Self { messages: vec![m], png: None, close: false }
    }

    fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Self::one(ServerMessage::Error { code, message: message.into() })
    }
}

impl Client {
    fn new(served: Arc<ServedModel>) -> Self {
        let lod = served.default_lod();
        Self { served, greeted: false, view: None, lod, session: None, frames: 0 }
    }

    fn handle_text(&mut self, text: &str) -> Reply {
        let msg: ClientMessage = match serde_json::from_str(text) {
            Ok(m) => m,
            Err(e) => return Reply::error(ErrorCode::BadMessage, e.to_string()),
        };
        match msg {
            ClientMessage::Hello { protocol_version } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Reply::error(
                        ErrorCode::UnsupportedVersion,
                        format!("server speaks protocol {PROTOCOL_VERSION}, client sent {protocol_version}"),
                    );
                }
                self.greeted = true;
                Reply::one(ServerMessage::Hello {
                    protocol_version: PROTOCOL_VERSION,
                    manifest: self.served.manifest.clone(),
                })
            }
            _ if !self.greeted => Reply::error(ErrorCode::HandshakeRequired, "send hello first"),
            ClientMessage::SetView(spec) => {
                let cam = spec.camera();
                if let Err(e) = cam.validate() {
                    return Reply::error(ErrorCode::InvalidView, e.to_string());
                }
                self.view = Some(cam);
                Reply { messages: Vec::new(), png: None, close: false }
            }
            ClientMessage::SetLod { l_start, l_end, gamma } => {
                let mut cfg = self.lod;
                cfg.l_start = l_start;
                cfg.l_end = l_end;
                cfg.gamma = gamma.unwrap_or(self.served.defaults.gamma);
                if let Err(e) = cfg.validate(self.served.model.l_max) {
                    return Reply::error(ErrorCode::InvalidLod, e.to_string());
                }
                if let (Some(session), Some(cam)) = (self.session.as_mut(), self.view.as_ref()) {
                    if let Err(e) = session.reconfigure(cfg, cam) {
                        return Reply::error(ErrorCode::InvalidLod, e.to_string());
                    }
                }
                self.lod = cfg;
                Reply { messages: Vec::new(), png: None, close: false }
            }
            ClientMessage::RequestFrame {} => self.frame(),
            ClientMessage::Bye {} => Reply { messages: vec![ServerMessage::Bye {}], png: None, close: true },
        }
    }

    fn frame(&mut self) -> Reply {
        let Some(cam) = self.view.clone() else {
            return Reply::error(ErrorCode::NoView, "send set_view before request_frame");
        };
        if self.session.is_none() {
            let reference = self.served.manifest.reference_position;
            match Session::new(Arc::clone(&self.served.model), self.lod, reference, &cam, RebuildMode::Background) {
                Ok(s) => self.session = Some(s),
                Err(e) => return Reply::error(ErrorCode::RenderFailed, e.to_string()),
            }
        }
        let session = self.session.as_mut().expect("session was just created");
        let frame = session.render_view(self.frames, &cam, self.served.background);
        self.frames += 1;
        match frame.output.image.encode_png() {
            Ok(png) => Reply {
                messages: vec![ServerMessage::Frame {
                    generation: frame.stats.generation,
                    png_bytes: png.len(),
                    stats: frame.stats,
                }],
                png: Some(png),
                close: false,
            },
            Err(e) => Reply::error(ErrorCode::RenderFailed, e.to_string()),
        }
    }
}

fn send(ws: &mut WebSocket<TcpStream>, reply: Reply) -> Result<bool, tungstenite::Error> {
    for m in &reply.messages {
        let text = serde_json::to_string(m).expect("server messages serialize");
        ws.send(Message::text(text))?;
    }
    if let Some(png) = reply.png {
        ws.send(Message::binary(png))?;
    }
    Ok(reply.close)
}

fn handle_client(stream: TcpStream, served: Arc<ServedModel>, stop: Arc<AtomicBool>) -> CliResult<()> {
    let mut ws = accept(stream, &stop)?;
    let mut client = Client::new(served);
    let ws_err = |e: tungstenite::Error| CliError::Runtime(e.to_string());
    loop {
        if stop.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        let msg = match ws.read() {
            Ok(m) => m,
            Err(e) if is_timeout(&e) => continue,
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(tungstenite::Error::Protocol(_)) => return Ok(()),
            Err(e) => return Err(ws_err(e)),
        };
        let reply = match msg {
            Message::Text(t) => client.handle_text(t.as_str()),
            Message::Binary(_) => Reply::error(ErrorCode::BadMessage, "binary messages are not accepted"),
            _ => continue,
        };
        if send(&mut ws, reply).map_err(ws_err)? {
            let _ = ws.close(None);
            // drain until the peer acknowledges the close
            loop {
                match ws.read() {
                    Err(e) if is_timeout(&e) && !stop.load(Ordering::SeqCst) => continue,
                    Ok(_) => continue,
                    Err(_) => return Ok(()),
                }
            }
        }
    }
}
