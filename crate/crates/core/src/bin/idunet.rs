use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use idunet::checks::{run_suite, select, DEFAULT_SEEDS};
use idunet::commands::{cmd_eval, cmd_flowviz, cmd_interpolate, cmd_translate, write_text, EvalOptions, FLOW_PANELS};
use idunet::deform::SoftMode;
use idunet::synthdata::{generate_dataset, GenerateOptions};
use idunet::train::{cmd_train, TrainConfig};

#[derive(Parser)]
#[command(name = "idunet", version, about = "Iterative deformation view synthesis on synthetic sprites")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a sprite dataset with a train/test split.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 9)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Also store analytic ground-truth flows for every view pair.
        #[arg(long)]
        flows: bool,
    },
    /// Train a model; settings come from a key=value file plus --set overrides.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from out/latest.idu when present.
        #[arg(long)]
        resume: bool,
        /// Print losses every n steps.
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Score a checkpoint on the test split against the identity baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Fixed pseudo-random subset of the test pairs.
        #[arg(long)]
        max_pairs: Option<usize>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Also write the key=value report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Translate one image to one or more target views.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// View the image was taken from.
        #[arg(long)]
        from: usize,
        /// Target views, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        to: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Add rows with the generated image, the warped source and the mask.
        #[arg(long)]
        panels: bool,
    },
    /// Render frames between two views with mixed view labels.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        from: usize,
        /// The two views, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        views: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the flow of every deformation stage.
    Flowviz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        #[arg(long)]
        out: PathBuf,
        /// Replace the learned attention by the identity.
        #[arg(long)]
        identity_soft: bool,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// all, warpkit, deform, losses, mutant, or a case name.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
    },
}

fn split_pair(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected key=value, got {s:?}")),
    }
}

enum Failure {
    Usage(String),
    Runtime(idunet::Error),
}

impl From<idunet::Error> for Failure {
    fn from(e: idunet::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenData {
            out,
            count,
            seed,
            views,
            size,
            flows,
        } => {
            let opts = GenerateOptions {
                views,
                image_size: size,
                flows,
            };
            let m = generate_dataset(count, &out, seed, &opts)?;
            println!(
                "wrote {} sprites x {} views to {} ({} train, {} test)",
                m.count(),
                m.views,
                out.display(),
                m.train.len(),
                m.test.len()
            );
        }
        Cmd::Train {
            config,
            set,
            data,
            out,
            resume,
            log_every,
        } => {
            let mut overrides = Vec::new();
            if let Some(d) = data {
                overrides.push(("data".to_string(), d.display().to_string()));
            }
            if let Some(o) = out {
                overrides.push(("out".to_string(), o.display().to_string()));
            }
            for s in &set {
                overrides.push(split_pair(s).map_err(Failure::Usage)?);
            }
            let cfg = match config {
                Some(path) => TrainConfig::load(&path, &overrides)?,
                None => TrainConfig::from_pairs(&Default::default(), &overrides)?,
            };
            let start = Instant::now();
            let log_every = log_every.max(1);
            let summary = cmd_train(cfg, resume, |step, report| {
                if step % log_every == 0 {
                    let parts: Vec<String> = report
                        .ordered()
                        .iter()
                        .map(|(n, v)| format!("{n}={v:.4}"))
                        .collect();
                    eprintln!("step {step} [{:.0}s] {}", start.elapsed().as_secs_f64(), parts.join(" "));
                }
            })?;
            println!("trained steps {}..{}", summary.start_step, summary.end_step);
        }
        Cmd::Eval {
            checkpoint,
            data,
            max_pairs,
            batch,
            report,
        } => {
            let r = cmd_eval(&checkpoint, &data, &EvalOptions { max_pairs, batch })?;
            let text = r.to_text();
            print!("{text}");
            if let Some(path) = report {
                write_text(&path, &text)?;
            }
        }
        Cmd::Translate {
            checkpoint,
            image,
            from,
            to,
            out,
            panels,
        } => {
            cmd_translate(&checkpoint, &image, from, &to, &out, panels)?;
            println!("wrote {}", out.display());
        }
        Cmd::Interpolate {
            checkpoint,
            image,
            from,
            views,
            steps,
            out,
        } => {
            let [v1, v2] = views[..] else {
                return Err(Failure::Usage(format!("--views takes two views, got {}", views.len())));
            };
            if v1.abs_diff(v2) != 1 {
                eprintln!("warning: views {v1} and {v2} are not adjacent");
            }
            let it = cmd_interpolate(&checkpoint, &image, from, (v1, v2), steps, &out)?;
            print!("{}", it.report());
            println!("wrote {}", out.display());
        }
        Cmd::Flowviz {
            checkpoint,
            image,
            from,
            to,
            out,
            identity_soft,
        } => {
            let mode = if identity_soft { SoftMode::Identity } else { SoftMode::Learned };
            cmd_flowviz(&checkpoint, &image, from, to, &out, mode)?;
            println!("wrote {} (panels: {})", out.display(), FLOW_PANELS.join(", "));
        }
        Cmd::Gradcheck { scope, seeds } => {
            let cases = select(&scope).map_err(|e| Failure::Usage(e.to_string()))?;
            let results = run_suite(&cases, seeds.max(1), |r| println!("{}", r.line()))?;
            let bad = results.iter().filter(|r| !r.expected()).count();
            println!("{} cases, {} unexpected", results.len(), bad);
            if bad > 0 {
                return Err(Failure::Runtime(idunet::Error::InvalidArgument(format!(
                    "{bad} gradient check(s) did not behave as expected"
                ))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
