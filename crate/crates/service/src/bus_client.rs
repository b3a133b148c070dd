//! Async bus client over TCP. Deliveries are acknowledged as soon as they
//! are read, and repeats of an already received message are dropped.

use std::collections::HashMap;
use std::io;
use std::time::Duration;

use sitefleet_core::bus::frame::{FrameDecoder, PROTOCOL_VERSION};
use sitefleet_core::bus::{Envelope, Frame, Payload, Qos};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpStream, ToSocketAddrs};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tracing::warn;

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum BusClientError {
    #[error("bus i/o: {0}")]
    Io(#[from] io::Error),
    #[error("broker rejected request: {0}")]
    Rejected(String),
    #[error("bus connection closed")]
    Closed,
    #[error("timed out waiting for the broker")]
    Timeout,
}

pub struct BusClient {
    client_id: String,
    out: mpsc::UnboundedSender<Frame>,
    inbox: mpsc::UnboundedReceiver<Envelope>,
    control: mpsc::UnboundedReceiver<Frame>,
    next_request: u64,
    next_message: u64,
    tasks: Vec<JoinHandle<()>>,
}

impl BusClient {
    pub async fn connect(addr: impl ToSocketAddrs, client_id: &str) -> Result<Self, BusClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (rd, mut wr) = stream.into_split();
        let (out, mut out_rx) = mpsc::unbounded_channel::<Frame>();
        let (inbox_tx, inbox) = mpsc::unbounded_channel();
        let (control_tx, control) = mpsc::unbounded_channel();
        let writer = tokio::spawn(async move {
            while let Some(frame) = out_rx.recv().await {
                let last = matches!(frame, Frame::Disconnect);
                if wr.write_all(&frame.encode()).await.is_err() || last {
                    break;
                }
            }
            let _ = wr.shutdown().await;
        });
        let reader = tokio::spawn(read_loop(rd, out.clone(), inbox_tx, control_tx));
        // Message ids must keep increasing across reconnects of the same
        // client id, or the broker would treat new messages as repeats.
        let next_message = crate::epoch_ms() * 1000;
        let mut client = Self {
            client_id: client_id.to_string(),
            out,
            inbox,
            control,
            next_request: 0,
            next_message,
            tasks: vec![writer, reader],
        };
        client.send(Frame::Connect { client_id: client_id.to_string(), protocol: PROTOCOL_VERSION })?;
        match client.control_frame().await? {
            Frame::ConnAck { .. } => Ok(client),
            Frame::Error { message, .. } => Err(BusClientError::Rejected(message)),
            other => Err(BusClientError::Rejected(format!("unexpected {other:?}"))),
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    fn send(&self, frame: Frame) -> Result<(), BusClientError> {
        self.out.send(frame).map_err(|_| BusClientError::Closed)
    }

    async fn control_frame(&mut self) -> Result<Frame, BusClientError> {
        match tokio::time::timeout(HANDSHAKE_TIMEOUT, self.control.recv()).await {
            Ok(Some(f)) => Ok(f),
            Ok(None) => Err(BusClientError::Closed),
            Err(_) => Err(BusClientError::Timeout),
        }
    }

    /// Subscribes and waits for the broker's acknowledgement.
    pub async fn subscribe(&mut self, filter: &str, qos: Qos) -> Result<(), BusClientError> {
        self.next_request += 1;
        let request_id = self.next_request;
        self.send(Frame::Subscribe { request_id, filter: filter.to_string(), qos })?;
        loop {
            match self.control_frame().await? {
                Frame::SubAck { request_id: r, .. } if r == request_id => return Ok(()),
                Frame::Error { message, request_id: r, .. } if r.is_none_or(|r| r == request_id) => {
                    return Err(BusClientError::Rejected(message));
                }
                _ => {}
            }
        }
    }

    /// Queues a publish and returns its message id. Broker-side rejections
    /// are logged by the reader.
    pub fn publish(&mut self, topic: &str, qos: Qos, payload: Payload, timestamp: u64) -> Result<u64, BusClientError> {
        self.next_message += 1;
        let message_id = self.next_message;
        let envelope = Envelope { topic: topic.to_string(), publisher: self.client_id.clone(), message_id, qos, timestamp, payload };
        self.send(Frame::Publish { envelope })?;
        Ok(message_id)
    }

    /// Next delivered envelope; `None` once the connection is gone.
    pub async fn recv(&mut self) -> Option<Envelope> {
        self.inbox.recv().await
    }

    pub fn try_recv(&mut self) -> Option<Envelope> {
        self.inbox.try_recv().ok()
    }

    pub fn is_closed(&self) -> bool {
        self.out.is_closed()
    }

    pub async fn disconnect(mut self) {
        let _ = self.send(Frame::Disconnect);
        if let Some(writer) = self.tasks.first_mut() {
            let _ = tokio::time::timeout(Duration::from_secs(1), writer).await;
        }
    }
}

impl Drop for BusClient {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

async fn read_loop(
    mut rd: tokio::net::tcp::OwnedReadHalf,
    out: mpsc::UnboundedSender<Frame>,
    inbox: mpsc::UnboundedSender<Envelope>,
    control: mpsc::UnboundedSender<Frame>,
) {
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 16 * 1024];
    let mut last_seen: HashMap<(String, String), u64> = HashMap::new();
    loop {
        let n = match rd.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        decoder.extend(&buf[..n]);
        loop {
            let frame = match decoder.next_frame() {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) => {
                    warn!(%e, "undecodable frame from broker");
                    return;
                }
            };
            match frame {
                Frame::Deliver { delivery_id, envelope, .. } => {
                    if envelope.qos == Qos::AtLeastOnce {
                        let _ = out.send(Frame::Ack { delivery_id });
                    }
                    let key = (envelope.publisher.clone(), envelope.topic.clone());
                    if last_seen.get(&key).is_some_and(|&last| envelope.message_id <= last) {
                        continue;
                    }
                    last_seen.insert(key, envelope.message_id);
                    if inbox.send(envelope).is_err() {
                        return;
                    }
                }
                Frame::PubAck { .. } => {}
                Frame::Error { ref message, request_id: None, .. } => {
                    warn!(%message, "broker error");
                    let _ = control.send(frame);
                }
                other => {
                    let _ = control.send(other);
                }
            }
        }
    }
}
