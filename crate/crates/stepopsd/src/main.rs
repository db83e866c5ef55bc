use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stepopsd::config::RunConfig;
use stepopsd::diagnose::{self, DEFAULT_WINDOWS};
use stepopsd::error::{exit, Error, Result};
use stepopsd::{run, shape, snapshot, verify};
use stepopsd_core::diag::VarianceTestConfig;
use stepopsd_core::train::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "stepopsd", version, about = "Step-level hindsight advantage shaping for GRPO on toy environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a toy environment, writing metrics and snapshots.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Shape a rollout JSONL file with a teacher snapshot.
    Shape {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Training step whose λ is used.
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
    /// Windowed Std(Δ) from a metrics file or a shaped rollout file.
    Diagnose {
        #[arg(long, required_unless_present = "shaped", conflicts_with = "shaped")]
        metrics: Option<PathBuf>,
        #[arg(long)]
        shaped: Option<PathBuf>,
        /// Strictly increasing window starts.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_WINDOWS)]
        windows: Vec<u64>,
    },
    /// Check sign preservation, the variance bound or gradient alignment.
    Verify {
        #[arg(value_enum)]
        check: Check,
        /// Training config for the alignment probe; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = verify::SIGN_CASES)]
        cases: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Tidy `step,series,value` CSV from a metrics file.
    Plotdata {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Check {
    Sign,
    Variance,
    Alignment,
    All,
}

fn print_json<T: serde::Serialize>(label: &str, value: &T) {
    println!("{label}: {}", serde_json::to_string(value).expect("reports always serialize"));
}

fn train_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?.train),
        None => Ok(TrainConfig::default()),
    }
}

fn run_verify(check: Check, config: Option<&PathBuf>, cases: usize, seed: u64) -> Result<()> {
    let mut failures = Vec::new();
    if matches!(check, Check::Sign | Check::All) {
        let r = verify::sign(cases, seed)?;
        print_json("sign", &r);
        if !r.passed {
            failures.push("sign");
        }
    }
    if matches!(check, Check::Variance | Check::All) {
        let r = verify::variance(&VarianceTestConfig::default())?;
        print_json("variance", &r);
        if !r.passed {
            failures.push("variance");
        }
    }
    if matches!(check, Check::Alignment | Check::All) {
        let r = verify::alignment(&train_config(config)?)?;
        print_json("alignment", &r);
        if !r.passed {
            failures.push("alignment");
        }
    }
    match failures.is_empty() {
        true => Ok(()),
        false => Err(Error::Verification(failures.join(", "))),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            seed,
            steps,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let summary = run::run_training(&cfg)?;
            print_json("summary", &summary);
        }
        Command::Shape {
            input,
            teacher,
            config,
            output,
            step,
        } => {
            let cfg = RunConfig::load(&config)?;
            let snap = snapshot::load(&teacher)?;
            let summary = shape::shape_offline(&input, &output, &snap, &cfg.train, step)?;
            print_json("summary", &summary);
        }
        Command::Diagnose {
            metrics,
            shaped,
            windows,
        } => {
            let stats = match (metrics, shaped) {
                (Some(m), _) => diagnose::windows_from_metrics(&diagnose::read_metrics(&m)?, &windows)?,
                (None, Some(s)) => diagnose::windows_from_shaped_file(&s, &windows)?,
                (None, None) => unreachable!("clap requires one input"),
            };
            for w in &stats {
                print_json("window", w);
            }
        }
        Command::Verify {
            check,
            config,
            cases,
            seed,
        } => run_verify(check, config.as_ref(), cases, seed)?,
        Command::Plotdata { metrics, output } => {
            let n = diagnose::emit_plot_data_file(&metrics, &output)?;
            println!("wrote {n} steps to {}", output.display());
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
fn execute<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.use_stderr() {
                true => exit::USAGE,
                false => exit::OK,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(execute(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use std::path::Path;

    use super::*;

    fn code(args: &[&str]) -> u8 {
        execute(std::iter::once("stepopsd").chain(args.iter().copied()))
    }

    fn error_of(args: &[&str]) -> Error {
        let cli = Cli::try_parse_from(std::iter::once("stepopsd").chain(args.iter().copied())).unwrap();
        dispatch(cli.command).unwrap_err()
    }

    fn write_config(dir: &Path, extra: &str) -> String {
        let path = dir.join("run.toml");
        let text = format!(
            "out_dir = \"{}\"\nsave_rollouts = true\n\n[train]\nsteps = 3\ngroup_size = 4\nbatch_tasks = 2\n{extra}",
            dir.join("out").display()
        );
        std::fs::write(&path, text).unwrap();
        path.display().to_string()
    }

    #[test]
    fn train_shape_diagnose_plotdata() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "");
        let out = dir.path().join("out");
        assert_eq!(code(&["train", "--config", &cfg, "--steps", "4", "--seed", "3"]), exit::OK);
        let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 4);
        assert!(out.join("final_params.bin").exists());
        assert!(out.join("snapshots/teacher_000000.bin").exists());
        let saved = std::fs::read_to_string(out.join("config.toml")).unwrap();
        assert!(saved.contains("seed = 3"));

        let m = out.join("metrics.jsonl").display().to_string();
        assert_eq!(code(&["diagnose", "--metrics", &m, "--windows", "0,2"]), exit::OK);

        let csv = dir.path().join("plot.csv");
        assert_eq!(code(&["plotdata", "--metrics", &m, "--output", &csv.display().to_string()]), exit::OK);
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("step,series,value\n"));
        assert_eq!(text.lines().filter(|l| l.contains(",success_rate,")).count(), 4);

        let rollouts = out.join("rollouts.jsonl").display().to_string();
        let teacher = out.join("snapshots/teacher_000000.bin").display().to_string();
        let shaped_a = dir.path().join("a.jsonl");
        let shaped_b = dir.path().join("b.jsonl");
        for target in [&shaped_a, &shaped_b] {
            let target = target.display().to_string();
            let args = ["shape", "--input", &rollouts, "--teacher", &teacher, "--config", &cfg, "--output", &target];
            assert_eq!(code(&args), exit::OK);
        }
        assert_eq!(std::fs::read(&shaped_a).unwrap(), std::fs::read(&shaped_b).unwrap());
        assert_eq!(code(&["diagnose", "--shaped", &shaped_a.display().to_string()]), exit::OK);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [&a, &b] {
            let cfg = write_config(d.path(), "");
            assert_eq!(code(&["train", "--config", &cfg]), exit::OK);
        }
        for f in ["metrics.jsonl", "rollouts.jsonl", "final_params.bin", "snapshots/teacher_000000.bin"] {
            assert_eq!(
                std::fs::read(a.path().join("out").join(f)).unwrap(),
                std::fs::read(b.path().join("out").join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn exit_codes_by_category() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(code(&["train"]), exit::USAGE);
        assert_eq!(code(&["verify", "nonsense"]), exit::USAGE);
        assert_eq!(code(&["--help"]), exit::OK);

        let missing = dir.path().join("none.toml").display().to_string();
        assert_eq!(code(&["train", "--config", &missing]), exit::IO);

        let bad = write_config(dir.path(), "[train.shaping]\nalpha_clip = 1.5\n");
        assert_eq!(code(&["train", "--config", &bad]), exit::CONFIG);
        let unknown = write_config(dir.path(), "learning_rate = 0.1\n");
        assert_eq!(code(&["train", "--config", &unknown]), exit::CONFIG);

        let metrics = dir.path().join("m.jsonl");
        std::fs::write(&metrics, "{\"step\": 0}\n").unwrap();
        let m = metrics.display().to_string();
        assert_eq!(code(&["diagnose", "--metrics", &m]), exit::PARSE);
        assert!(error_of(&["diagnose", "--metrics", &m]).to_string().contains("line 1"));
        assert_ne!(code(&["diagnose", "--metrics", &m, "--windows", "5,1"]), exit::OK);
    }

    #[test]
    fn verify_sign_passes() {
        assert_eq!(code(&["verify", "sign", "--cases", "20000"]), exit::OK);
    }

    #[test]
    fn plotdata_missing_metrics_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("nope.jsonl").display().to_string();
        let csv = dir.path().join("p.csv").display().to_string();
        assert_eq!(code(&["plotdata", "--metrics", &m, "--output", &csv]), exit::IO);
    }

    #[test]
    fn empty_metrics_give_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        std::fs::write(&m, "").unwrap();
        let csv = dir.path().join("p.csv");
        assert_eq!(
            code(&["plotdata", "--metrics", &m.display().to_string(), "--output", &csv.display().to_string()]),
            exit::OK
        );
        assert_eq!(std::fs::read_to_string(&csv).unwrap(), "step,series,value\n");
    }
}
