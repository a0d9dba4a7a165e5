use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynprec::config::RunConfig;
use dynprec::pipeline;
use dynprec::runtime::PlanMethod;
use dynprec::Error;

#[derive(Parser)]
#[command(name = "dynprec", version, about = "Dynamic layer-wise precision for a byte-level transformer")]
struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true, default_value = "configs/toy.toml")]
    config: PathBuf,

    /// Override the fit seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the memory budget in bits per weight.
    #[arg(long, global = true)]
    budget: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a freshly initialized model.
    InitModel,
    /// Build the nested quantization store.
    Quantize,
    /// Accumulate sensitivity statistics over the calibration corpus.
    Profile,
    /// Produce a precision plan for one method and target.
    Plan {
        /// dp, llm_mq or hawq_v2.
        method: String,
        /// Target average bits; every configured target when omitted.
        target: Option<f64>,
    },
    /// Evaluate plans on the eval corpus and write the comparison report.
    Eval {
        /// Plan files; all plans in the plan directory when omitted.
        plans: Vec<PathBuf>,
    },
    /// Greedy decode under a plan and write the precision trace.
    Decode {
        plan: PathBuf,
        prompt: String,
        #[arg(short = 'n', long, default_value_t = 32)]
        tokens: usize,
    },
    /// Print a written report as a table.
    Report { path: Option<PathBuf> },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Infeasible(_) => 3,
        Error::Provenance(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seeds.fit = s;
    }
    if let Some(b) = cli.budget {
        cfg.budget_bits = b;
    }
    cfg.validate()?;
    match cli.command {
        Command::InitModel => {
            let hash = pipeline::cmd_init_model(&cfg)?;
            println!("model {hash}");
        }
        Command::Quantize => {
            let hash = pipeline::cmd_quantize(&cfg)?;
            println!("store {hash}");
        }
        Command::Profile => {
            let prof = pipeline::cmd_profile(&cfg)?;
            println!("profile {} over {} samples", prof.hash(), prof.n_samples);
        }
        Command::Plan { method, target } => {
            let method: PlanMethod = method.parse()?;
            let targets = match target {
                Some(t) => vec![t],
                None => cfg.targets.clone(),
            };
            for t in targets {
                let out = pipeline::cmd_plan(&cfg, method, t)?;
                println!(
                    "{method} target {t:.2}: avg {:.4} -> {} ({})",
                    out.plan.avg_p(),
                    out.path.display(),
                    &out.hash[..12]
                );
                for w in &out.plan.warnings {
                    println!("  warning: {w}");
                }
            }
        }
        Command::Eval { plans } => {
            let report = pipeline::cmd_eval(&cfg, &plans)?;
            print!("{}", pipeline::render_report(&report));
        }
        Command::Decode {
            plan,
            prompt,
            tokens,
        } => {
            let out = pipeline::cmd_decode(&cfg, &plan, &prompt, tokens)?;
            let bytes: Vec<u8> = out.generated.iter().map(|&t| t as u8).collect();
            println!("{}", String::from_utf8_lossy(&bytes));
            println!(
                "mean effective bits {:.4} over {} steps",
                out.trace.mean_effective_bits(),
                out.trace.steps.len()
            );
        }
        Command::Report { path } => {
            print!("{}", pipeline::cmd_report(&cfg, path.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
