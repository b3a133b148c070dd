use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use sitefleet_core::scale_model::{
    degree_study as study, read_heldout_csv, read_samples_csv, study_fit_config, FitConfig, PinholeGenerator, ScaleError, MAX_DEGREE,
    STUDY_ALTITUDES,
};
use sitefleet_core::scenario::{Engine, Scenario, ScenarioError};

use crate::{CliResult, Failure};

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario document (JSON).
    pub scenario: PathBuf,
    /// Print only the metrics report.
    #[arg(long)]
    pub headless: bool,
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Simulated seconds per wall second when paced.
    #[arg(long)]
    pub time_scale: Option<f64>,
    /// Stop after this many simulated seconds.
    #[arg(long)]
    pub max_sim_time: Option<f64>,
    /// Also write the metrics report to this file.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    /// Run as fast as possible instead of pacing to wall time.
    #[arg(long)]
    pub fast: bool,
}

fn scenario_failure(e: ScenarioError) -> Failure {
    Failure { code: e.exit_code() as u8, message: e.to_string() }
}

pub fn load_scenario(path: &Path, seed: Option<u64>, time_scale: Option<f64>, max_sim_time: Option<f64>) -> Result<Scenario, Failure> {
    let scenario = Scenario::load(path).map_err(scenario_failure)?;
    if seed.is_none() && time_scale.is_none() && max_sim_time.is_none() {
        return Ok(scenario);
    }
    let mut doc = scenario.doc;
    if let Some(s) = seed {
        doc.seed = s;
    }
    if let Some(t) = time_scale {
        doc.sim.time_scale = t;
    }
    if let Some(m) = max_sim_time {
        doc.sim.max_sim_time_s = m;
    }
    let base = path.parent().unwrap_or(Path::new("."));
    Scenario::from_doc(doc, base).map_err(scenario_failure)
}

pub fn run(args: RunArgs) -> CliResult {
    let scenario = load_scenario(&args.scenario, args.seed, args.time_scale, args.max_sim_time)?;
    if !args.headless {
        eprintln!(
            "running {} (seed {}, time scale {}{})",
            scenario.doc.name,
            scenario.doc.seed,
            scenario.doc.sim.time_scale,
            if args.fast { ", unpaced" } else { "" }
        );
    }
    let started = Instant::now();
    let mut engine = Engine::new(scenario).map_err(scenario_failure)?;
    let outcome = engine.run(!args.fast).map_err(scenario_failure)?;
    let metrics = engine.metrics();
    let text = serde_json::to_string_pretty(&metrics).map_err(Failure::runtime)?;
    if let Some(path) = &args.metrics_out {
        std::fs::write(path, format!("{text}\n")).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    }
    println!("{text}");
    if !args.headless {
        eprintln!(
            "{} after {:.1} s simulated, {:.1} s wall; ground distance {:.1} m, {} replans",
            outcome.label(),
            metrics.sim_time_s,
            started.elapsed().as_secs_f64(),
            metrics.combined_ground_distance_m,
            metrics.replans.triggered
        );
    }
    match outcome.exit_code() {
        0 => Ok(()),
        code => Err(Failure { code: code as u8, message: format!("scenario {}: {}", outcome.label(), metrics.detail.unwrap_or_default()) }),
    }
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Training CSV with `altitude_m,pixels_per_meter` rows.
    #[arg(long, requires = "heldout", conflicts_with = "synthetic")]
    pub samples: Option<PathBuf>,
    /// Held-out CSV with `pixel_span_px,true_m,altitude_m` rows.
    #[arg(long, requires = "samples")]
    pub heldout: Option<PathBuf>,
    /// Generate pinhole data: f = 1000 px, 200 samples at 3-20 m, 3 px/m
    /// noise, 20% gross outliers, 25 held-out spans per altitude. This is
    /// the default without file input.
    #[arg(long)]
    pub synthetic: bool,
    /// Seeds the synthetic data and RANSAC sampling.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// RANSAC inlier threshold for file input, px/m.
    #[arg(long, default_value_t = 9.0)]
    pub inlier_threshold: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn study_failure(e: ScaleError) -> Failure {
    match e {
        ScaleError::Parse { .. } | ScaleError::EmptyFile(_) | ScaleError::Io { .. } | ScaleError::Csv(_) | ScaleError::InvalidSample { .. }
        | ScaleError::Config(_) => {
            Failure::invalid(e)
        }
        other => Failure::runtime(other),
    }
}

pub fn degree_study(args: StudyArgs) -> CliResult {
    let degrees: Vec<usize> = (1..=MAX_DEGREE).collect();
    let table = match (&args.samples, &args.heldout) {
        (Some(s), Some(h)) => {
            let samples = read_samples_csv(s).map_err(study_failure)?;
            let heldout = read_heldout_csv(h).map_err(study_failure)?;
            let cfg = FitConfig { inlier_threshold: args.inlier_threshold, min_inlier_fraction: 0.25, rng_seed: args.seed, ..FitConfig::default() };
            study(&samples, &heldout, &degrees, &cfg)
        }
        _ => {
            let generator = PinholeGenerator::default();
            let training = generator.training(args.seed);
            let heldout = generator.heldout(&STUDY_ALTITUDES, args.seed);
            study(&training.samples, &heldout, &degrees, &study_fit_config(&generator, args.seed))
        }
    }
    .map_err(study_failure)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf).map_err(Failure::runtime)?;
    match &args.out {
        Some(path) => std::fs::write(path, &buf).map_err(|e| Failure::runtime(format!("{}: {e}", path.display()))),
        None => std::io::stdout().write_all(&buf).map_err(Failure::runtime),
    }
}
