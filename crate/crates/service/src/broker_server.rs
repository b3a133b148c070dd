//! TCP front end for the sans-IO broker. One task owns the [`Broker`];
//! each connection runs a reader and a writer that talk to it over channels,
//! so per-session delivery stays serialized.

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use sitefleet_core::bus::frame::FrameDecoder;
use sitefleet_core::bus::{Broker, BrokerConfig, BrokerStats, ErrorCode, Frame, SessionId};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

/// Redelivery check interval.
const TICK: Duration = Duration::from_millis(50);

enum Event {
    Open(mpsc::UnboundedSender<Frame>, oneshot::Sender<SessionId>),
    Frame(SessionId, Frame),
    Closed(SessionId),
    Stats(oneshot::Sender<BrokerStats>),
}

pub struct BrokerServer {
    local_addr: SocketAddr,
    events: mpsc::UnboundedSender<Event>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl BrokerServer {
    pub async fn bind(addr: SocketAddr, cfg: BrokerConfig) -> io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let local_addr = listener.local_addr()?;
        let (events, rx) = mpsc::unbounded_channel();
        let (shutdown, shutdown_rx) = watch::channel(false);
        let core = tokio::spawn(run_broker(Broker::new(cfg), rx));
        let accept = tokio::spawn(accept_loop(listener, events.clone(), shutdown_rx));
        info!(%local_addr, "bus broker listening");
        Ok(Self { local_addr, events, shutdown, tasks: vec![core, accept] })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub async fn stats(&self) -> Option<BrokerStats> {
        let (tx, rx) = oneshot::channel();
        self.events.send(Event::Stats(tx)).ok()?;
        rx.await.ok()
    }

    /// Stops accepting, closes every session and stops the broker task.
    pub fn shutdown(&self) {
        let _ = self.shutdown.send(true);
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn run_broker(mut broker: Broker, mut rx: mpsc::UnboundedReceiver<Event>) {
    let start = Instant::now();
    let now = || start.elapsed().as_millis() as u64;
    let mut outs: HashMap<SessionId, mpsc::UnboundedSender<Frame>> = HashMap::new();
    let mut ticker = tokio::time::interval(TICK);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                None => break,
                Some(Event::Open(out, reply)) => {
                    let sid = broker.open_session();
                    outs.insert(sid, out);
                    let _ = reply.send(sid);
                }
                Some(Event::Frame(sid, frame)) => match broker.handle(sid, frame, now()) {
                    Ok(out) => route(&outs, out),
                    Err(e) => debug!(session = sid.0, %e, "frame for closed session"),
                },
                Some(Event::Closed(sid)) => {
                    broker.close_session(sid);
                    outs.remove(&sid);
                }
                Some(Event::Stats(reply)) => {
                    let _ = reply.send(broker.stats());
                }
            },
            _ = ticker.tick() => route(&outs, broker.tick(now())),
        }
    }
}

fn route(outs: &HashMap<SessionId, mpsc::UnboundedSender<Frame>>, frames: Vec<(SessionId, Frame)>) {
    for (sid, frame) in frames {
        if let Some(tx) = outs.get(&sid) {
            let _ = tx.send(frame);
        }
    }
}

async fn accept_loop(listener: TcpListener, events: mpsc::UnboundedSender<Event>, shutdown: watch::Receiver<bool>) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                debug!(%peer, "bus connection");
                tokio::spawn(session(stream, events.clone(), shutdown.clone()));
            }
            Err(e) => {
                warn!(%e, "accept failed");
                tokio::time::sleep(Duration::from_millis(100)).await;
            }
        }
    }
}

async fn session(stream: TcpStream, events: mpsc::UnboundedSender<Event>, mut shutdown: watch::Receiver<bool>) {
    let _ = stream.set_nodelay(true);
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Frame>();
    let (reply_tx, reply_rx) = oneshot::channel();
    if events.send(Event::Open(out_tx.clone(), reply_tx)).is_err() {
        return;
    }
    let Ok(sid) = reply_rx.await else { return };
    let (mut rd, mut wr) = stream.into_split();
    let writer = tokio::spawn(async move {
        while let Some(frame) = out_rx.recv().await {
            if wr.write_all(&frame.encode()).await.is_err() {
                break;
            }
        }
        let _ = wr.shutdown().await;
    });

    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 16 * 1024];
    'read: loop {
        let n = tokio::select! {
            _ = shutdown.changed() => break,
            n = rd.read(&mut buf) => match n {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            },
        };
        decoder.extend(&buf[..n]);
        loop {
            match decoder.next_frame() {
                Ok(Some(frame)) => {
                    let bye = matches!(frame, Frame::Disconnect);
                    if events.send(Event::Frame(sid, frame)).is_err() || bye {
                        break 'read;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let _ = out_tx.send(Frame::error(ErrorCode::MalformedFrame, e.to_string()));
                    break 'read;
                }
            }
        }
    }
    let _ = events.send(Event::Closed(sid));
    drop(out_tx);
    // The writer drains what is already queued, then sees the channel close.
    let _ = tokio::time::timeout(Duration::from_secs(1), writer).await;
    debug!(session = sid.0, "bus session closed");
}
