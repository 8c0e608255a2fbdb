use clap::{Parser, Subcommand};
use std::path::PathBuf;

use dyad_harness::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_infer, cmd_report, cmd_train, load_config,
    resolve_out_root, Result, RunContext,
};

/// Dyadic audio-visual dialogue models: data, training, inference, reports.
#[derive(Parser)]
#[command(name = "dyad", version, about)]
struct Cli {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set t2s.train_steps=2000. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output root; falls back to $DYAD_OUT_ROOT, then ./runs.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dialogue corpus for this config.
    GenData,
    /// Train one stage: t2s, acoustic, visual, mapper-motion, mapper-speaker.
    Train {
        #[arg(value_name = "STAGE")]
        stage: String,
    },
    /// Synthesize speech and motion for the first configured dialogues.
    Infer,
    /// Train every mapper strategy across the replicate seeds and tabulate.
    Ablate,
    /// Score generated motion against the ground-truth corpus.
    Eval,
    /// Consolidate stage results and metric tables into one page.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.sets)?;
    let out_root = resolve_out_root(cli.out.as_deref());
    let ctx = RunContext::new(cfg, &out_root);
    match cli.cmd {
        Cmd::GenData => cmd_gen_data(&ctx),
        Cmd::Train { stage } => cmd_train(&ctx, &stage).map(|_| ()),
        Cmd::Infer => cmd_infer(&ctx).map(|_| ()),
        Cmd::Ablate => cmd_ablate(&ctx).map(|_| ()),
        Cmd::Eval => cmd_eval(&ctx).map(|_| ()),
        Cmd::Report => cmd_report(&ctx),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
