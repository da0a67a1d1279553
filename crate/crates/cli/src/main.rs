use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use d2d_core::denoiser::DenoiserKind;
use d2d_core::{Error, RunConfig};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "d2d", version, about = "Latent diffusion anomaly detection for wafer test data")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    opts: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic wafer dataset.
    Synth,
    /// Preprocess a raw dataset, train both phases and write a checkpoint.
    Train,
    /// Write one anomaly score per device.
    Score,
    /// Score devices and report AUROC, AUCPR and recall at yield.
    Eval,
    /// Per-program residual attribution and a ranking for flagged devices.
    Explain,
}

#[derive(Debug, Args)]
struct Overrides {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (also used for synthesis).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Input table. For score/eval/explain this is a preprocessed table
    /// unless --raw is given; defaults to the test split in the checkpoint.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Treat --data as raw and preprocess it with the checkpoint settings.
    #[arg(long, global = true)]
    raw: bool,
    #[arg(long, global = true)]
    feature_regex: Option<String>,
    #[arg(long, global = true)]
    r_na: Option<f64>,
    #[arg(long, global = true)]
    no_die_pe: bool,
    #[arg(long, global = true)]
    no_feature_pe: bool,
    #[arg(long, global = true)]
    no_autoencoder: bool,
    #[arg(long, global = true, value_parser = parse_denoiser)]
    denoiser: Option<DenoiserKind>,
    #[arg(long, global = true)]
    depth: Option<usize>,
    #[arg(long, global = true)]
    patch: Option<usize>,
    /// DiT hidden width.
    #[arg(long, global = true)]
    hidden: Option<usize>,
    #[arg(long, global = true)]
    ae_epochs: Option<usize>,
    #[arg(long, global = true)]
    dit_epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    t_start: Option<usize>,
    #[arg(long, global = true)]
    t_end: Option<usize>,
    #[arg(long, global = true)]
    t_step: Option<usize>,
    #[arg(long, global = true)]
    t_rec: Option<usize>,
    #[arg(long = "yield", global = true)]
    yield_frac: Option<f64>,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

fn parse_denoiser(s: &str) -> Result<DenoiserKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Overrides {
    fn resolve(&self) -> d2d_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.synth.seed = s;
        }
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.preprocess.feature_regex, self.feature_regex);
        set!(cfg.preprocess.r_na, self.r_na);
        set!(cfg.model.denoiser, self.denoiser);
        set!(cfg.model.depth, self.depth);
        set!(cfg.model.patch, self.patch);
        set!(cfg.model.hidden, self.hidden);
        set!(cfg.train.ae_epochs, self.ae_epochs);
        set!(cfg.train.dit_epochs, self.dit_epochs);
        set!(cfg.train.batch_size, self.batch_size);
        set!(cfg.train.lr, self.lr);
        set!(cfg.eval.grid.t_start, self.t_start);
        set!(cfg.eval.grid.t_end, self.t_end);
        set!(cfg.eval.grid.dt, self.t_step);
        set!(cfg.eval.t_rec, self.t_rec);
        set!(cfg.eval.yield_frac, self.yield_frac);
        set!(cfg.eval.top_k, self.top_k);
        if self.no_die_pe {
            cfg.train.die_pe_enabled = false;
        }
        if self.no_feature_pe {
            cfg.train.feature_pe_enabled = false;
        }
        if self.no_autoencoder {
            cfg.model.autoencoder = false;
        }
        if self.data.is_some() {
            cfg.paths.data = self.data.clone();
        }
        if self.checkpoint.is_some() {
            cfg.paths.checkpoint = self.checkpoint.clone();
        }
        if self.out.is_some() {
            cfg.paths.out = self.out.clone();
        }
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 2,
        Error::Io { .. } | Error::Csv(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = cli.opts.resolve().and_then(|cfg| {
        if cli.opts.print_config {
            return commands::emit(format!("{}\n", cfg.to_json()).as_bytes());
        }
        let raw = cli.opts.raw;
        match cli.command {
            Command::Synth => commands::synth(&cfg),
            Command::Train => commands::train(&cfg),
            Command::Score => commands::score(&cfg, raw),
            Command::Eval => commands::eval(&cfg, raw),
            Command::Explain => commands::explain(&cfg, raw),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
