use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msam_core::align::{find_correspondences, ransac_align, AlignError, RansacConfig};
use msam_core::io::{
    export_map, fmt_sig9, load_dataset, load_map, measurements_csv, odometry_csv, render_svg, write_atomic, Dataset,
    MapLayer,
};
use msam_core::merge::{solve_global, solve_local, MergeError, MergePlan};
use msam_core::simgen::{generate, ScenarioConfig, Simulation};
use msam_core::{GlobalMap, NoiseModel, RobotParams, Se2Transform, SolveConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Parser)]
#[command(name = "msam", version, about = "Multi-robot smoothing and mapping from wheel odometry and tag sightings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-robot scenario with ground truth.
    Simulate {
        /// Scenario JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a single robot's map.
    Solve {
        #[arg(long)]
        odom: PathBuf,
        #[arg(long)]
        meas: PathBuf,
        #[arg(long, default_value_t = 1)]
        robot_id: u32,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Estimate the transform taking map 2 into map 1's frame.
    Align {
        #[arg(long)]
        map1: PathBuf,
        #[arg(long)]
        map2: PathBuf,
        /// Inlier distance threshold in meters.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Minimum distance between the two sampled tags, in meters.
        #[arg(long, default_value_t = 0.2)]
        min_separation: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly solve two robots, with robot 2's origin anchored by an alignment.
    Merge {
        /// Odometry and measurement CSV paths, comma separated.
        #[arg(long, value_parser = parse_pair)]
        robot1: (PathBuf, PathBuf),
        #[arg(long, value_parser = parse_pair)]
        robot2: (PathBuf, PathBuf),
        /// Transform file written by `align`.
        #[arg(long)]
        prior: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 0.5)]
    wheel_base: f64,
    /// Raw odometry rows merged into one interval.
    #[arg(long, default_value_t = 5)]
    subsample: usize,
    /// Noise model JSON with sigma_odom, sigma_meas and sigma_prior.
    #[arg(long)]
    noise: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    NotConverged(String),
    #[error("{0}")]
    Alignment(String),
    #[error("{0}")]
    Output(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Alignment(_) => 4,
            CliError::Output(_) => 1,
        }
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn output(e: impl std::fmt::Display) -> CliError {
    CliError::Output(e.to_string())
}

fn parse_pair(s: &str) -> Result<(PathBuf, PathBuf), String> {
    match s.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.into(), b.into())),
        _ => Err(format!("expected ODOM,MEAS, got {s:?}")),
    }
}

/// Transform file shared by `align` and `merge`.
#[derive(Debug, Serialize, Deserialize)]
struct TransformDoc {
    theta: f64,
    t_x: f64,
    t_y: f64,
    #[serde(default)]
    inliers: Vec<u32>,
    #[serde(default)]
    mean_inlier_error_m: f64,
}

impl ModelArgs {
    fn params(&self) -> Result<RobotParams, CliError> {
        RobotParams::new(self.wheel_base, self.subsample).map_err(input)
    }

    fn noise(&self) -> Result<NoiseModel, CliError> {
        let noise = match &self.noise {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))?
            }
            None => NoiseModel::default(),
        };
        noise.validate().map_err(input)?;
        Ok(noise)
    }

    fn solve_config(&self) -> Result<SolveConfig, CliError> {
        if self.max_iterations == 0 {
            return Err(input("--max-iterations must be at least 1"));
        }
        Ok(SolveConfig {
            max_iterations: self.max_iterations,
            ..SolveConfig::default()
        })
    }
}

fn simulate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<ScenarioConfig>(&text).map_err(|e| input(format!("{}: {e}", path.display())))?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let sim = generate(&cfg).map_err(input)?;
    fs::create_dir_all(out).map_err(|e| output(format!("{}: {e}", out.display())))?;
    for (r, d) in sim.datasets.iter().enumerate() {
        let n = r + 1;
        write_atomic(&out.join(format!("robot{n}_odometry.csv")), odometry_csv(&d.odometry).as_bytes())
            .map_err(output)?;
        write_atomic(
            &out.join(format!("robot{n}_measurements.csv")),
            measurements_csv(&d.measurements).as_bytes(),
        )
        .map_err(output)?;
    }
    write_atomic(&out.join("ground_truth.json"), ground_truth_json(&sim).as_bytes()).map_err(output)?;
    println!(
        "robots: {}\nlandmarks: {}\norigin_distance_m: {}",
        sim.datasets.len(),
        sim.truth.landmarks.len(),
        fmt_sig9(sim.truth.origin_distance)
    );
    Ok(())
}

/// True poses at every raw odometry state, in robot 1's starting frame.
fn ground_truth_json(sim: &Simulation) -> String {
    let t = &sim.truth;
    let robots: Vec<serde_json::Value> = t
        .poses
        .iter()
        .enumerate()
        .map(|(r, poses)| {
            serde_json::json!({
                "id": r + 1,
                "poses": poses.iter().map(|p| [p.x, p.y, p.theta]).collect::<Vec<_>>(),
            })
        })
        .collect();
    let landmarks: Vec<serde_json::Value> = t
        .landmarks
        .iter()
        .map(|l| serde_json::json!({ "tag_id": l.tag_id, "x": l.x, "y": l.y }))
        .collect();
    let offset = t.true_offset();
    let doc = serde_json::json!({
        "robots": robots,
        "landmarks": landmarks,
        "origin_distance_m": t.origin_distance,
        "true_offset": { "theta": offset.theta, "t_x": offset.t_x, "t_y": offset.t_y },
        "odom_per_measurement": t.subsample,
    });
    let mut text = serde_json::to_string(&doc).expect("ground truth serializes");
    text.push('\n');
    text
}

fn load(odom: &Path, meas: &Path, params: RobotParams, robot_id: u32) -> Result<Dataset, CliError> {
    load_dataset(odom, meas, params, robot_id).map_err(input)
}

/// Writes the map (and figure) whether or not the solve converged.
fn finish(map: &GlobalMap, out: &Path, svg: Option<&Path>, label: &str) -> Result<(), CliError> {
    export_map(map, out).map_err(output)?;
    if let Some(svg) = svg {
        render_svg(&MapLayer::from_map(map, label), svg).map_err(output)?;
    }
    Ok(())
}

fn solved(result: Result<GlobalMap, MergeError>) -> Result<GlobalMap, CliError> {
    match result {
        Ok(map) => Ok(map),
        Err(MergeError::Diverged { best }) => Ok(*best),
        Err(MergeError::Solve(e)) => Err(CliError::NotConverged(e.to_string())),
        Err(e) => Err(input(e)),
    }
}

fn report(map: &GlobalMap) -> Result<(), CliError> {
    if map.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!(
            "solver did not converge after {} iterations; best estimate written",
            map.iterations
        )))
    }
}

fn solve(odom: &Path, meas: &Path, robot_id: u32, model: &ModelArgs, out: &Path, svg: Option<&Path>) -> Result<(), CliError> {
    let dataset = load(odom, meas, model.params()?, robot_id)?;
    let map = solved(solve_local(&dataset, &model.noise()?, &model.solve_config()?))?;
    finish(&map, out, svg, "local")?;
    println!("iterations: {}\nfinal_residual: {:e}", map.iterations, map.final_cost);
    report(&map)
}

fn align(map1: &Path, map2: &Path, cfg: RansacConfig, out: &Path) -> Result<(), CliError> {
    let m1 = load_map(map1).map_err(input)?;
    let m2 = load_map(map2).map_err(input)?;
    let corrs = find_correspondences(&m1.landmarks, &m2.landmarks);
    let result = ransac_align(&corrs, &cfg).map_err(|e| match e {
        AlignError::Config(_) => input(e),
        other => CliError::Alignment(format!("alignment failed with {} shared tags: {other}", corrs.len())),
    })?;
    let t = result.transform;
    let doc = TransformDoc {
        theta: t.theta,
        t_x: t.t_x,
        t_y: t.t_y,
        inliers: result.inlier_ids,
        mean_inlier_error_m: result.mean_inlier_error,
    };
    let mut text = serde_json::to_string(&doc).map_err(output)?;
    text.push('\n');
    write_atomic(out, text.as_bytes()).map_err(output)?;
    println!(
        "theta: {}\nt_x: {}\nt_y: {}\ninliers: {}",
        fmt_sig9(t.theta),
        fmt_sig9(t.t_x),
        fmt_sig9(t.t_y),
        doc.inliers.len()
    );
    Ok(())
}

fn read_transform(path: &Path) -> Result<Se2Transform, CliError> {
    let text = fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let doc: TransformDoc = serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let t = Se2Transform::new(doc.theta, doc.t_x, doc.t_y);
    if !t.is_finite() {
        return Err(input(format!("{}: transform is not finite", path.display())));
    }
    Ok(t)
}

fn merge(
    robot1: &(PathBuf, PathBuf),
    robot2: &(PathBuf, PathBuf),
    prior: &Path,
    model: &ModelArgs,
    out: &Path,
    svg: Option<&Path>,
) -> Result<(), CliError> {
    let params = model.params()?;
    let d1 = load(&robot1.0, &robot1.1, params, 1)?;
    let d2 = load(&robot2.0, &robot2.1, params, 2)?;
    let plan = MergePlan::new(d1, d2, read_transform(prior)?);
    let map = solved(solve_global(&plan, &model.noise()?, &model.solve_config()?))?;
    finish(&map, out, svg, "merged")?;
    println!(
        "iterations: {}\nfinal_residual: {:e}\nlandmarks: {}\norigin_distance_m: {}",
        map.iterations,
        map.final_cost,
        map.landmarks.len(),
        fmt_sig9(map.origin_distance)
    );
    report(&map)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, seed, out } => simulate(config.as_deref(), seed, &out),
        Command::Solve {
            odom,
            meas,
            robot_id,
            model,
            out,
            svg,
        } => solve(&odom, &meas, robot_id, &model, &out, svg.as_deref()),
        Command::Align {
            map1,
            map2,
            threshold,
            iters,
            seed,
            min_separation,
            out,
        } => {
            let cfg = RansacConfig {
                iterations: iters,
                inlier_threshold: threshold,
                min_pair_separation: min_separation,
                seed,
            };
            align(&map1, &map2, cfg, &out)
        }
        Command::Merge {
            robot1,
            robot2,
            prior,
            model,
            out,
            svg,
        } => merge(&robot1, &robot2, &prior, &model, &out, svg.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msam: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
