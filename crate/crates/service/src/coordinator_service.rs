//! The coordinator loop: the only task that touches coordination state.
//! Bus envelopes and API requests reach it through ordered queues; events
//! leave through a broadcast channel.

use std::collections::VecDeque;
use std::time::Duration;

use futures::Stream;
use sitefleet_core::bus::topic::{fleet_filter, TopicKind};
use sitefleet_core::bus::{Envelope, Payload, Qos};
use sitefleet_core::coordinator::events::EventRecord;
use sitefleet_core::coordinator::{Command, CommandError, Coordinator, CoordinatorStats, Reply};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use crate::bus_client::{BusClient, BusClientError};
use crate::ServiceError;

pub const DEFAULT_TICK: Duration = Duration::from_millis(100);
const EVENT_BUFFER: usize = 4096;
const REQUEST_QUEUE: usize = 256;

enum Request {
    Command(Command, oneshot::Sender<Result<Reply, CommandError>>),
    Subscribe(u64, oneshot::Sender<Subscription>),
    Stats(oneshot::Sender<LoopStats>),
}

/// Retained events at or after the requested seq, plus a receiver that
/// starts exactly where the backlog ends.
pub struct Subscription {
    pub backlog: Vec<EventRecord>,
    pub live: broadcast::Receiver<EventRecord>,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct LoopStats {
    pub cycle: u64,
    pub now_ms: u64,
    pub latest_seq: u64,
    pub bus_connected: bool,
    pub coordinator: CoordinatorStats,
}

/// Time seen by the coordinator: wall-clock epoch milliseconds, pulled
/// forward by newer bus timestamps so an accelerated simulator stays
/// consistent with obstacle lifetimes and timeouts.
#[derive(Debug, Default)]
struct SiteClock {
    newest_bus_ms: u64,
}

impl SiteClock {
    fn observe(&mut self, ts: u64) {
        self.newest_bus_ms = self.newest_bus_ms.max(ts);
    }

    fn now(&self) -> u64 {
        crate::epoch_ms().max(self.newest_bus_ms)
    }
}

#[derive(Clone)]
pub struct CoordinatorHandle {
    tx: mpsc::Sender<Request>,
}

impl CoordinatorHandle {
    pub async fn command(&self, command: Command) -> Result<Result<Reply, CommandError>, ServiceError> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(Request::Command(command, tx)).await.map_err(|_| ServiceError::Stopped)?;
        rx.await.map_err(|_| ServiceError::Stopped)
    }

    pub async fn subscribe(&self, from_seq: u64) -> Result<Subscription, ServiceError> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(Request::Subscribe(from_seq, tx)).await.map_err(|_| ServiceError::Stopped)?;
        rx.await.map_err(|_| ServiceError::Stopped)
    }

    pub async fn stats(&self) -> Result<LoopStats, ServiceError> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(Request::Stats(tx)).await.map_err(|_| ServiceError::Stopped)?;
        rx.await.map_err(|_| ServiceError::Stopped)
    }

    /// Gapless event feed from `from_seq`. A subscriber that falls behind the
    /// broadcast buffer resubscribes from its next seq, so it only sees a gap
    /// marker if the log itself evicted what it missed.
    pub fn events(&self, from_seq: u64) -> impl Stream<Item = EventRecord> + Send + 'static {
        struct State {
            handle: CoordinatorHandle,
            next_seq: u64,
            backlog: VecDeque<EventRecord>,
            live: Option<broadcast::Receiver<EventRecord>>,
        }
        let init = State { handle: self.clone(), next_seq: from_seq, backlog: VecDeque::new(), live: None };
        futures::stream::unfold(init, |mut st| async move {
            loop {
                if let Some(rec) = st.backlog.pop_front() {
                    if rec.seq < st.next_seq {
                        continue;
                    }
                    st.next_seq = rec.seq + 1;
                    return Some((rec, st));
                }
                let Some(live) = st.live.as_mut() else {
                    let sub = st.handle.subscribe(st.next_seq).await.ok()?;
                    st.backlog = sub.backlog.into();
                    st.live = Some(sub.live);
                    continue;
                };
                match live.recv().await {
                    Ok(rec) if rec.seq < st.next_seq => continue,
                    Ok(rec) => {
                        st.next_seq = rec.seq + 1;
                        return Some((rec, st));
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        debug!(missed = n, "event subscriber lagged; resubscribing");
                        st.live = None;
                    }
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            }
        })
    }
}

pub struct CoordinatorTask {
    pub handle: CoordinatorHandle,
    pub join: JoinHandle<()>,
}

/// Subscribes `bus` to the fleet topics the coordinator consumes.
pub async fn subscribe_fleet(bus: &mut BusClient, manufacturer: &str) -> Result<(), BusClientError> {
    for kind in [TopicKind::Connection, TopicKind::State, TopicKind::Objects] {
        bus.subscribe(&fleet_filter(manufacturer, kind), Qos::AtLeastOnce).await?;
    }
    Ok(())
}

/// Starts the loop. Without a bus the coordinator still serves commands,
/// which is enough for planning previews and tests.
pub fn spawn(coordinator: Coordinator, bus: Option<BusClient>, tick: Duration) -> CoordinatorTask {
    let (tx, rx) = mpsc::channel(REQUEST_QUEUE);
    let (events, _) = broadcast::channel(EVENT_BUFFER);
    let join = tokio::spawn(run(coordinator, bus, rx, events, tick));
    CoordinatorTask { handle: CoordinatorHandle { tx }, join }
}

async fn next_envelope(bus: &mut Option<BusClient>) -> Option<Envelope> {
    match bus {
        Some(b) => b.recv().await,
        None => std::future::pending().await,
    }
}

async fn run(
    mut core: Coordinator,
    mut bus: Option<BusClient>,
    mut requests: mpsc::Receiver<Request>,
    events: broadcast::Sender<EventRecord>,
    tick: Duration,
) {
    let mut clock = SiteClock::default();
    let mut ticker = tokio::time::interval(tick);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    info!(connected = bus.is_some(), tick_ms = tick.as_millis() as u64, "coordinator loop started");
    loop {
        tokio::select! {
            biased;
            req = requests.recv() => match req {
                None => break,
                Some(Request::Command(cmd, reply)) => {
                    core.advance_clock(clock.now());
                    let _ = reply.send(core.apply(cmd));
                }
                Some(Request::Subscribe(from_seq, reply)) => {
                    let _ = reply.send(Subscription { backlog: core.log().since(from_seq), live: events.subscribe() });
                }
                Some(Request::Stats(reply)) => {
                    let _ = reply.send(LoopStats {
                        cycle: core.cycle(),
                        now_ms: clock.now(),
                        latest_seq: core.log().latest_seq(),
                        bus_connected: bus.is_some(),
                        coordinator: core.stats().clone(),
                    });
                }
            },
            env = next_envelope(&mut bus) => match env {
                Some(env) => {
                    clock.observe(env.timestamp);
                    core.handle_envelope(&env);
                }
                None => {
                    warn!("bus connection lost; coordinator continues without it");
                    bus = None;
                }
            },
            _ = ticker.tick() => {
                let now = clock.now();
                for o in core.step(now) {
                    let Some(b) = bus.as_mut() else { break };
                    if let Err(e) = b.publish(&o.topic, Qos::AtLeastOnce, Payload::Order(o.order), now) {
                        warn!(%e, "order publish failed");
                    }
                }
            }
        }
        // Flushed every iteration, so a subscription taken in the next one
        // sees everything up to now in its backlog and nothing twice.
        for rec in core.take_new_events() {
            let _ = events.send(rec);
        }
    }
    info!("coordinator loop stopped");
}
