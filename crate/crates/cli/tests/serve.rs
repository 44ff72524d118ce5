use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use flod_cli::protocol::{ClientMessage, ErrorCode, ServerMessage, ViewSpec, PROTOCOL_VERSION};
use flod_cli::serve::{serve, ServedModel};
use flod_core::defaults::Defaults;
use flod_core::image::Image;
use flod_core::raster::render;
use flod_core::scene::{generate, SyntheticParams};
use flod_core::selective::ReferencePolicy;
use flod_core::trainer::{train, TrainConfig};
use flod_core::Camera;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

struct Server {
    addr: String,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    served: Arc<ServedModel>,
}

impl Server {
    fn start() -> Self {
        let scene = generate(SyntheticParams { seed: 5, gaussians: 4, views: 4, resolution: 16 }).unwrap();
        let out = train(&scene.dataset, TrainConfig::for_levels(3).scaled(0.01), 0.1, 4.0, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = flod_core::io::ModelMeta {
            config_digest: "test",
            defaults: Defaults::default(),
            reference_position: [0.0; 3],
            events: None,
        };
        flod_core::io::save_model(dir.path(), &out.model, meta).unwrap();
        let (manifest, model) = flod_core::io::load_model(dir.path()).unwrap();
        let served = Arc::new(ServedModel {
            model: Arc::new(model),
            manifest,
            defaults: Defaults::default(),
            policy: ReferencePolicy::CurrentCamera,
            background: [0.0; 3],
        });
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("ws://{}", listener.local_addr().unwrap());
        let stop = Arc::new(AtomicBool::new(false));
        let (s, st) = (Arc::clone(&served), Arc::clone(&stop));
        let handle = std::thread::spawn(move || serve(listener, s, st).unwrap());
        Self { addr, stop, handle: Some(handle), served }
    }

    fn connect(&self) -> Client {
        let (ws, _) = tungstenite::connect(&self.addr).unwrap();
        Client { ws }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            h.join().unwrap();
        }
    }
}

struct Client {
    ws: WebSocket<MaybeTlsStream<TcpStream>>,
}

impl Client {
    fn send(&mut self, m: &ClientMessage) {
        self.ws.send(Message::text(serde_json::to_string(m).unwrap())).unwrap();
    }

    fn send_raw(&mut self, text: &str) {
        self.ws.send(Message::text(text)).unwrap();
    }

    fn recv(&mut self) -> ServerMessage {
        match self.ws.read().unwrap() {
            Message::Text(t) => serde_json::from_str(t.as_str()).unwrap(),
            other => panic!("expected text, got {other:?}"),
        }
    }

    fn png(&mut self) -> Vec<u8> {
        match self.ws.read().unwrap() {
            Message::Binary(b) => b.to_vec(),
            other => panic!("expected binary, got {other:?}"),
        }
    }

    fn hello(&mut self) -> ServerMessage {
        self.send(&ClientMessage::Hello { protocol_version: PROTOCOL_VERSION });
        self.recv()
    }

    fn frame(&mut self) -> (ServerMessage, Image) {
        self.send(&ClientMessage::RequestFrame {});
        let env = self.recv();
        let ServerMessage::Frame { png_bytes, .. } = &env else { panic!("expected frame, got {env:?}") };
        let png = self.png();
        assert_eq!(png.len(), *png_bytes);
        (env, Image::decode_png(&png).unwrap())
    }

    fn expect_error(&mut self, code: ErrorCode) {
        match self.recv() {
            ServerMessage::Error { code: c, .. } => assert_eq!(c, code),
            other => panic!("expected error {code:?}, got {other:?}"),
        }
    }
}

fn camera() -> Camera {
    Camera::look_at([2.0, -2.0, 0.8], [0.0; 3], [0.0, 0.0, 1.0], 20.0, 24, 20).unwrap()
}

fn lod(l_start: u32, l_end: u32) -> ClientMessage {
    ClientMessage::SetLod { l_start, l_end, gamma: Some(8.0) }
}

#[test]
fn frame_with_level_range() {
    let server = Server::start();
    let mut c = server.connect();
    let ServerMessage::Hello { protocol_version, manifest } = c.hello() else { panic!() };
    assert_eq!(protocol_version, PROTOCOL_VERSION);
    assert_eq!(manifest, server.served.manifest);
    c.send(&ClientMessage::SetView(ViewSpec::from_camera(&camera())));
    c.send(&lod(1, 3));
    let (env, img) = c.frame();
    let ServerMessage::Frame { stats, generation, .. } = env else { unreachable!() };
    assert_eq!(stats.levels_used, [1, 2, 3]);
    assert_eq!(stats.gamma, 8.0);
    assert_eq!(generation, stats.generation);
    assert_eq!((img.width, img.height), (24, 20));
    c.send(&ClientMessage::Bye {});
    assert_eq!(c.recv(), ServerMessage::Bye {});
}

#[test]
fn single_level_frame_matches_plain_render() {
    let server = Server::start();
    let mut c = server.connect();
    c.hello();
    let cam = camera();
    c.send(&ClientMessage::SetView(ViewSpec::from_camera(&cam)));
    c.send(&lod(2, 2));
    let (_, img) = c.frame();
    let plain = render(server.served.model.level(2).unwrap(), &cam, [0.0; 3]).image;
    assert_eq!(img.encode_png().unwrap(), plain.encode_png().unwrap());
}

#[test]
fn errors_do_not_end_the_session() {
    let server = Server::start();
    let mut c = server.connect();
    c.send(&ClientMessage::RequestFrame {});
    c.expect_error(ErrorCode::HandshakeRequired);
    c.send(&ClientMessage::Hello { protocol_version: 99 });
    c.expect_error(ErrorCode::UnsupportedVersion);
    c.hello();
    c.send(&ClientMessage::RequestFrame {});
    c.expect_error(ErrorCode::NoView);
    c.send_raw("{not json");
    c.expect_error(ErrorCode::BadMessage);
    c.send_raw(r#"{"type":"teleport"}"#);
    c.expect_error(ErrorCode::BadMessage);
    let mut bad = ViewSpec::from_camera(&camera());
    bad.fx = -1.0;
    c.send(&ClientMessage::SetView(bad));
    c.expect_error(ErrorCode::InvalidView);
    c.send(&ClientMessage::SetView(ViewSpec::from_camera(&camera())));
    c.send(&lod(1, 4));
    c.expect_error(ErrorCode::InvalidLod);
    c.send(&lod(3, 2));
    c.expect_error(ErrorCode::InvalidLod);
    // still serving, with the last valid range
    let (env, _) = c.frame();
    let ServerMessage::Frame { stats, .. } = env else { unreachable!() };
    assert_eq!(stats.levels_used, [1, 2, 3]);
}

#[test]
fn clients_have_independent_sessions() {
    let server = Server::start();
    let counts = server.served.model.counts();
    let mut a = server.connect();
    let mut b = server.connect();
    a.hello();
    b.hello();
    for c in [&mut a, &mut b] {
        c.send(&ClientMessage::SetView(ViewSpec::from_camera(&camera())));
    }
    a.send(&lod(1, 1));
    b.send(&lod(3, 3));
    for _ in 0..3 {
        let (ea, _) = a.frame();
        let (eb, _) = b.frame();
        let (ServerMessage::Frame { stats: sa, .. }, ServerMessage::Frame { stats: sb, .. }) = (ea, eb) else {
            unreachable!()
        };
        assert_eq!((sa.gaussian_count, sa.levels_used), (counts[0], vec![1]));
        assert_eq!((sb.gaussian_count, sb.levels_used), (counts[2], vec![3]));
    }
    // reconfiguring one client leaves the other alone
    a.send(&lod(2, 2));
    let (ea, _) = a.frame();
    let (eb, _) = b.frame();
    let (ServerMessage::Frame { stats: sa, .. }, ServerMessage::Frame { stats: sb, .. }) = (ea, eb) else {
        unreachable!()
    };
    assert_eq!(sa.gaussian_count, counts[1]);
    assert_eq!(sb.gaussian_count, counts[2]);
}

#[test]
fn shutdown_closes_clients() {
    let mut server = Server::start();
    let mut c = server.connect();
    c.hello();
    server.stop.store(true, Ordering::SeqCst);
    server.handle.take().unwrap().join().unwrap();
    // the server sent a close frame
    loop {
        match c.ws.read() {
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    }
}
