use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use shoulder_core::harness::{self, ExperimentConfig};
use shoulder_core::ik::{ik_fixed_scapula, scapulohumeral_ik, IkRequest, IkSettings, RhythmParams};
use shoulder_core::jmm::JointMuscleMap;
use shoulder_core::kinematics::{default_model, default_model_file, Pose, RobotModel, Side};

#[derive(Parser)]
#[command(
    name = "shoulder",
    version,
    about = "Shoulder-complex IK, mapping learning and steering-wheel simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve hand IK and print the joint angles in degrees.
    Ik {
        /// Model JSON; the built-in model when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Hand pose in the trunk frame: x,y,z,qw,qx,qy,qz (m).
        #[arg(long, value_parser = parse_target, allow_hyphen_values = true)]
        target: Pose,
        #[arg(long, value_enum)]
        arm: Arm,
        /// Scapula-to-shoulder angle ratio.
        #[arg(long = "A", default_value_t = 1.0 / 2.7)]
        a: f64,
        /// Solve with the scapula held at the initial posture.
        #[arg(long)]
        no_rhythm: bool,
    },
    /// Run the steering-wheel experiment.
    Steer {
        /// Experiment config JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        learning: Option<Toggle>,
        /// Seed for marker noise and online updates.
        #[arg(long)]
        seed: Option<u64>,
        /// Start from this saved mapping instead of pre-training.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a run directory into wheel_angle.csv and grip_error.csv.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Pre-train a mapping on geometric data and save it.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in model as JSON.
    DumpModel {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the default experiment config as JSON.
    DumpConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Arm {
    Left,
    Right,
}

impl From<Arm> for Side {
    fn from(a: Arm) -> Self {
        match a {
            Arm::Left => Side::Left,
            Arm::Right => Side::Right,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

fn parse_target(s: &str) -> Result<Pose, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != 7 {
        return Err(format!("expected 7 comma-separated numbers, got {}", v.len()));
    }
    Pose::from_wxyz(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5], v[6])
        .ok_or_else(|| "quaternion must be finite and non-zero".to_string())
}

fn load_model(path: Option<&Path>) -> Result<RobotModel> {
    match path {
        Some(p) => RobotModel::load(p).with_context(|| format!("loading model {}", p.display())),
        None => Ok(default_model()),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn ik(model: Option<&Path>, target: Pose, side: Side, a: f64, no_rhythm: bool) -> Result<()> {
    let model = load_model(model)?;
    let req = IkRequest {
        target,
        hand: side,
        q_init: model.initial_posture().clone(),
        settings: IkSettings::default(),
    };
    let (q, first_pass, pos_err, rot_err) = if no_rhythm {
        let sol = ik_fixed_scapula(&model, &req)?;
        (sol.q, None, sol.position_error, sol.rotation_error)
    } else {
        let sol = scapulohumeral_ik(&model, &req, RhythmParams::new(a)?)?;
        (sol.q, Some(sol.first_pass), sol.position_error, sol.rotation_error)
    };
    match &first_pass {
        Some(_) => println!("{:<16} {:>10} {:>12}", "joint", "deg", "first pass"),
        None => println!("{:<16} {:>10}", "joint", "deg"),
    }
    for d in model.arm(side).all_joints() {
        let name = &model.dofs[d].name;
        match &first_pass {
            Some(f) => println!("{name:<16} {:>10.2} {:>12.2}", q[d].to_degrees(), f[d].to_degrees()),
            None => println!("{name:<16} {:>10.2}", q[d].to_degrees()),
        }
    }
    println!("position error {pos_err:.2e} m, rotation error {rot_err:.2e} rad");
    Ok(())
}

fn steer(config: Option<&Path>, learning: Option<Toggle>, seed: Option<u64>, map: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(t) = learning {
        cfg.learning.enabled = matches!(t, Toggle::On);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let model = cfg.load_model()?;
    let map = match map {
        Some(p) => JointMuscleMap::load(&model, p).with_context(|| format!("loading mapping {}", p.display()))?,
        None => harness::pretrain_map(&model, &cfg.jmm, &cfg.pretrain)?,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let (report, _) = harness::run_with_map(&cfg, &model, map, Some(out))?;
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    if let Some(reason) = &report.summary.aborted {
        bail!("run aborted: {reason}");
    }
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let steps = harness::write_report(dir).with_context(|| format!("reading run in {}", dir.display()))?;
    let task: Vec<_> = steps.iter().filter(|s| s.phase == harness::Phase::Task).collect();
    let max_err = task
        .iter()
        .filter_map(|s| s.achieved_deg.map(|a| (a - s.target_deg).abs()))
        .reduce(f64::max);
    let losses =
        task.windows(2).filter(|w| w[0].gripping && !w[1].gripping).count() + usize::from(task.first().is_some_and(|s| !s.gripping));
    println!("task steps: {}", task.len());
    match max_err {
        Some(e) => println!("max tracking error: {e:.3} deg"),
        None => println!("max tracking error: n/a (never gripped)"),
    }
    println!("grip losses: {losses}");
    println!(
        "wrote {} and {}",
        dir.join("wheel_angle.csv").display(),
        dir.join("grip_error.csv").display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ik {
            model,
            target,
            arm,
            a,
            no_rhythm,
        } => ik(model.as_deref(), target, arm.into(), a, no_rhythm),
        Command::Steer {
            config,
            learning,
            seed,
            map,
            out,
        } => steer(config.as_deref(), learning, seed, map.as_deref(), &out),
        Command::Report { input } => report(&input),
        Command::Pretrain { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let model = cfg.load_model()?;
            harness::pretrain_map(&model, &cfg.jmm, &cfg.pretrain)?.save(&out)?;
            Ok(())
        }
        Command::DumpModel { out } => write_or_print(out.as_deref(), &serde_json::to_string_pretty(&default_model_file())?),
        Command::DumpConfig { out } => write_or_print(out.as_deref(), &serde_json::to_string_pretty(&ExperimentConfig::default())?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
