//! `ewir`: train, evaluate, sweep and deploy the split classifier.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ewir_core::config::ExperimentConfig;
use ewir_core::harness::{self, ImageSource, SweepAxis};
use ewir_core::link::Reply;
use ewir_core::train::MetricsRow;
use ewir_core::Error;

#[derive(Parser)]
#[command(name = "ewir", version, about = "Split image classification over a simulated wireless link")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train all three stages and write checkpoints and metrics.
    Train(Common),
    /// Top-1 and top-5 accuracy of the trained link.
    Eval(Common),
    /// Per-layer on-device MACs and parameters.
    CountMacs(Common),
    /// Accuracy and on-device cost along one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. `0,5,10,15,20,25`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Run the classification server.
    Serve(Common),
    /// Run the channel proxy in front of the server.
    Proxy(Common),
    /// Encode one image on the device side and print the returned top-5.
    Send {
        #[command(flatten)]
        common: Common,
        /// PNG, BMP or single-record `.bin` image.
        #[arg(long, conflicts_with = "index")]
        image: Option<PathBuf>,
        /// Index into the test split.
        #[arg(long)]
        index: Option<usize>,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(r: &MetricsRow) {
    eprintln!(
        "[{}] epoch {} lr {:e} loss {:.4} top1 {:.4} top5 {:.4}",
        r.stage, r.epoch, r.lr, r.loss, r.top1, r.top5
    );
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c)?;
            let run = harness::train(&cfg, &mut progress)?;
            if let Some(last) = run.metrics.last() {
                println!("top1={:.4} top5={:.4}", last.top1, last.top5);
            }
            println!("wrote {}", cfg.out_dir().display());
        }
        Command::Eval(c) => {
            let cfg = load(&c)?;
            let (top1, top5) = harness::eval(&cfg)?;
            println!("top1={top1:.6} top5={top5:.6}");
        }
        Command::CountMacs(c) => {
            let cfg = load(&c)?;
            let report = harness::count_macs(&cfg)?;
            println!("{}", report.totals_line());
        }
        Command::Sweep { common, axis, values } => {
            let cfg = load(&common)?;
            let res = harness::sweep(&cfg, axis, &values, &mut progress)?;
            for (v, why) in &res.skipped {
                eprintln!("skipped {axis} = {v}: {why}");
            }
            print!("{}", res.to_csv());
        }
        Command::Serve(c) => {
            let cfg = load(&c)?;
            let h = harness::serve(&cfg)?;
            eprintln!("serving on {}", h.local_addr());
            h.wait();
        }
        Command::Proxy(c) => {
            let cfg = load(&c)?;
            let h = harness::proxy(&cfg)?;
            eprintln!("proxy on {} forwarding to {}", h.local_addr(), cfg.listen);
            h.wait();
        }
        Command::Send { common, image, index } => {
            let cfg = load(&common)?;
            let src = match (image, index) {
                (Some(p), None) => ImageSource::Path(p),
                (None, Some(i)) => ImageSource::TestIndex(i),
                _ => return Err(Error::InvalidArgument("give exactly one of --image or --index".into())),
            };
            let (reply, label) = harness::send(&cfg, &src)?;
            match reply {
                Reply::Prediction(top) => {
                    if let Some(l) = label {
                        println!("label {l}");
                    }
                    for (rank, (class, p)) in top.iter().enumerate() {
                        println!("{} class {class} p={p:.6}", rank + 1);
                    }
                }
                Reply::Error(code) => return Err(Error::InvalidArgument(format!("server rejected the frame (code {code})"))),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::InvalidConfig(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
