//! Wire frames. Each frame is a JSON document preceded by its byte length as
//! a 4-byte big-endian integer.

use serde::{Deserialize, Serialize};

use super::{BusError, Envelope, Qos};

pub const MAX_FRAME_BYTES: usize = 4 * 1024 * 1024;
pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    MalformedFrame,
    InvalidTopic,
    InvalidFilter,
    InvalidPayload,
    NotConnected,
    ClientIdInUse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    Connect { client_id: String, #[serde(default = "default_protocol")] protocol: u32 },
    ConnAck { session: u64 },
    Subscribe { request_id: u64, filter: String, qos: Qos },
    SubAck { request_id: u64, filter: String },
    Publish { envelope: Envelope },
    PubAck { message_id: u64 },
    Deliver { delivery_id: u64, duplicate: bool, envelope: Envelope },
    Ack { delivery_id: u64 },
    Error { code: ErrorCode, message: String, #[serde(default, skip_serializing_if = "Option::is_none")] request_id: Option<u64> },
    Disconnect,
}

fn default_protocol() -> u32 {
    PROTOCOL_VERSION
}

impl Frame {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Frame::Error { code, message: message.into(), request_id: None }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, BusError> {
        serde_json::from_str(text).map_err(|e| BusError::Frame(e.to_string()))
    }

    /// Length-prefixed encoding.
    pub fn encode(&self) -> Vec<u8> {
        let body = self.to_json().into_bytes();
        let mut out = Vec::with_capacity(body.len() + 4);
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }
}

/// Reassembles frames from a byte stream fed in arbitrary chunks.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, if buffered. Oversized or non-UTF-8 frames are
    /// errors; the caller should drop the connection.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, BusError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize;
        if len > MAX_FRAME_BYTES {
            return Err(BusError::Frame(format!("frame of {len} bytes exceeds limit")));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let body: Vec<u8> = self.buf.drain(..4 + len).skip(4).collect();
        let text = std::str::from_utf8(&body).map_err(|e| BusError::Frame(e.to_string()))?;
        Frame::from_json(text).map(Some)
    }
}
