//! WebSocket messages. Every message is a JSON text envelope tagged by
//! `type`; a `frame` envelope is followed by one binary message holding the
//! PNG image.

use flod_core::camera::{Camera, DEFAULT_NEAR};
use flod_core::io::Manifest;
use flod_core::selective::FrameStats;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

/// Camera pose and intrinsics sent by a client. The principal point
/// defaults to the image center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    /// World-to-camera rotation, `wxyz`.
    pub rotation: [f64; 4],
    /// World-to-camera translation.
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
}

impl ViewSpec {
    pub fn from_camera(cam: &Camera) -> Self {
        Self {
            rotation: cam.rotation,
            translation: cam.translation,
            fx: cam.fx,
            fy: cam.fy,
            width: cam.width,
            height: cam.height,
            cx: Some(cam.cx),
            cy: Some(cam.cy),
        }
    }

    pub fn camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx.unwrap_or((self.width as f64 - 1.0) / 2.0),
            cy: self.cy.unwrap_or((self.height as f64 - 1.0) / 2.0),
            rotation: self.rotation,
            translation: self.translation,
            width: self.width,
            height: self.height,
            near: DEFAULT_NEAR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello {
        protocol_version: u32,
    },
    SetView(ViewSpec),
    SetLod {
        l_start: u32,
        l_end: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
    },
    RequestFrame {},
    Bye {},
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not JSON, or not a known message.
    BadMessage,
    UnsupportedVersion,
    /// Anything but `hello` before the handshake.
    HandshakeRequired,
    InvalidView,
    InvalidLod,
    /// `request_frame` before any `set_view`.
    NoView,
    RenderFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    /// Handshake reply carrying the served model's manifest.
    Hello { protocol_version: u32, manifest: Manifest },
    /// Precedes a binary PNG message of `png_bytes` bytes.
    Frame { generation: u64, png_bytes: usize, stats: FrameStats },
    Error { code: ErrorCode, message: String },
    Bye {},
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_messages_parse() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"hello","protocol_version":1}"#).unwrap();
        assert_eq!(m, ClientMessage::Hello { protocol_version: 1 });
        let m: ClientMessage = serde_json::from_str(r#"{"type":"request_frame"}"#).unwrap();
        assert_eq!(m, ClientMessage::RequestFrame {});
        let m: ClientMessage = serde_json::from_str(r#"{"type":"set_lod","l_start":1,"l_end":3,"gamma":8}"#).unwrap();
        assert_eq!(m, ClientMessage::SetLod { l_start: 1, l_end: 3, gamma: Some(8.0) });
        let m: ClientMessage = serde_json::from_str(
            r#"{"type":"set_view","rotation":[1,0,0,0],"translation":[0,0,3],"fx":50,"fy":50,"width":32,"height":24}"#,
        )
        .unwrap();
        let ClientMessage::SetView(v) = m else { panic!() };
        assert_eq!(v.camera().cx, 15.5);
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"zoom"}"#).is_err());
    }

    #[test]
    fn view_round_trip() {
        let cam = Camera::look_at([1.0, 2.0, 3.0], [0.0; 3], [0.0, 0.0, 1.0], 40.0, 30, 20).unwrap();
        assert_eq!(ViewSpec::from_camera(&cam).camera(), cam);
    }
}
