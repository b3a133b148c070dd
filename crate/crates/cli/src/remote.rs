use std::path::PathBuf;

use clap::{Args, Subcommand};
use futures::StreamExt;
use sitefleet_client::{Client, ClientError};
use sitefleet_core::coordinator::InjectRequest;
use sitefleet_core::geo::EnuPoint;
use sitefleet_core::geolocator::ObjectClass;
use sitefleet_core::sitemap::ObstacleId;
use sitefleet_core::tasking::{OperationDoc, OperationId};
use tokio::io::AsyncWriteExt;

use crate::{read_path, CliResult, Failure};

#[derive(Debug, Subcommand)]
pub enum RemoteCmd {
    /// Print the coordinator's world snapshot.
    Snapshot,
    /// Submit an operation document.
    Submit(SubmitArgs),
    /// Cancel an operation by id.
    Cancel { operation: u64 },
    /// Add a supervisor obstacle at an ENU position.
    Inject(InjectArgs),
    /// Remove an obstacle by id.
    Clear { obstacle: u64 },
    /// Stop a vehicle in place.
    Pause { vehicle: String },
    /// Let a paused vehicle continue.
    Resume { vehicle: String },
    /// Preview a route between two ENU points.
    #[command(allow_negative_numbers = true)]
    Plan {
        east: f64,
        north: f64,
        #[arg(long, num_args = 2, required = true, value_names = ["EAST", "NORTH"])]
        to: Vec<f64>,
    },
    /// Print events as JSON lines.
    Events(EventsArgs),
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    /// JSON operation document; overrides the flags below.
    #[arg(long)]
    pub file: Option<PathBuf>,
    #[arg(long, default_value = "load_dump")]
    pub kind: String,
    #[arg(long)]
    pub load_zone: Option<String>,
    #[arg(long)]
    pub dump_zone: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub cycles: Option<i64>,
    /// Survey altitude above ground, meters.
    #[arg(long)]
    pub altitude: Option<f64>,
    /// Survey swath overlap fraction.
    #[arg(long)]
    pub overlap: Option<f64>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct InjectArgs {
    pub east: f64,
    pub north: f64,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Object class, e.g. person or vehicle.
    #[arg(long)]
    pub class: Option<String>,
}

#[derive(Debug, Args)]
pub struct EventsArgs {
    /// First seq to return. Defaults to every retained event, or to new
    /// events only with `--follow`.
    #[arg(long)]
    pub from_seq: Option<u64>,
    /// Keep streaming until interrupted.
    #[arg(long)]
    pub follow: bool,
}

fn client_failure(e: ClientError) -> Failure {
    Failure { code: e.exit_code() as u8, message: e.to_string() }
}

fn print_json(value: &impl serde::Serialize) -> CliResult {
    println!("{}", serde_json::to_string_pretty(value).map_err(Failure::runtime)?);
    Ok(())
}

fn submit_doc(args: SubmitArgs) -> Result<OperationDoc, Failure> {
    if let Some(path) = &args.file {
        return serde_json::from_str(&read_path(path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())));
    }
    let kind = serde_json::from_value(serde_json::Value::String(args.kind.clone()))
        .map_err(|_| Failure::invalid(format!("kind: unknown operation kind {:?}", args.kind)))?;
    Ok(OperationDoc {
        kind,
        load_zone: args.load_zone,
        dump_zone: args.dump_zone,
        cycles: args.cycles,
        survey_altitude_m: args.altitude,
        survey_overlap: args.overlap,
    })
}

pub async fn execute(api: &str, cmd: RemoteCmd) -> CliResult {
    let c = Client::new(api);
    match cmd {
        RemoteCmd::Snapshot => print_json(&c.snapshot().await.map_err(client_failure)?),
        RemoteCmd::Submit(args) => {
            let doc = submit_doc(args)?;
            print_json(&c.submit_operation(&doc).await.map_err(client_failure)?)
        }
        RemoteCmd::Cancel { operation } => print_json(&c.cancel_operation(OperationId(operation)).await.map_err(client_failure)?),
        RemoteCmd::Inject(a) => {
            let class = match a.class {
                Some(name) => Some(
                    serde_json::from_value::<ObjectClass>(serde_json::Value::String(name.clone()))
                        .map_err(|_| Failure::invalid(format!("unknown object class {name:?}")))?,
                ),
                None => None,
            };
            let req = InjectRequest { position: EnuPoint::planar(a.east, a.north), radius: a.radius, class };
            print_json(&c.inject_obstacle(&req).await.map_err(client_failure)?)
        }
        RemoteCmd::Clear { obstacle } => print_json(&c.clear_obstacle(ObstacleId(obstacle)).await.map_err(client_failure)?),
        RemoteCmd::Pause { vehicle } => print_json(&c.pause_vehicle(&vehicle).await.map_err(client_failure)?),
        RemoteCmd::Resume { vehicle } => print_json(&c.resume_vehicle(&vehicle).await.map_err(client_failure)?),
        RemoteCmd::Plan { east, north, to } => {
            let reply = c.plan(EnuPoint::planar(east, north), EnuPoint::planar(to[0], to[1])).await.map_err(client_failure)?;
            print_json(&reply)
        }
        RemoteCmd::Events(a) => events(&c, a).await,
    }
}

async fn events(c: &Client, args: EventsArgs) -> CliResult {
    let mut out = tokio::io::stdout();
    if !args.follow {
        let from = args.from_seq.unwrap_or(1);
        let batch = c.events_batch(from, Some(10_000), None).await.map_err(client_failure)?;
        for e in batch.events {
            let line = serde_json::to_string(&e).map_err(Failure::runtime)?;
            out.write_all(format!("{line}\n").as_bytes()).await.map_err(Failure::runtime)?;
        }
        return Ok(());
    }
    let stream = c.events(args.from_seq).await.map_err(client_failure)?;
    let mut stream = Box::pin(stream);
    while let Some(e) = stream.next().await {
        let e = e.map_err(client_failure)?;
        let line = serde_json::to_string(&e).map_err(Failure::runtime)?;
        out.write_all(format!("{line}\n").as_bytes()).await.map_err(Failure::runtime)?;
        out.flush().await.map_err(Failure::runtime)?;
    }
    Ok(())
}
