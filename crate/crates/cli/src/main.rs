// SPDX-License-Identifier: MIT OR Apache-2.0

//! `numalign`: generate data, train models, search alignments, run probes
//! and export analyses.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use numalign::alignment::AlignmentKind;
use numalign::corpus::{generate_training_set, write_dataset};
use numalign::models::{Family, PosEncoding};
use numalign::rng::derive;
use numalign::symbolic::{sample_interventions, write_interventions, Program, Sites, Variable};
use numalign_cli::config::{DasSection, RunConfig, TaskSection};
use numalign_cli::pipeline::{self, ProbeKind};
use numalign_cli::{inspect, run_pipeline, CliError};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "numalign", version, about = "Counting-task models and their causal alignments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Args)]
struct OutArg {
    /// Output directory.
    #[arg(long, env = "NUMALIGN_OUT", default_value = "runs")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Dataset,
    Interventions,
}

#[derive(Subcommand)]
enum Command {
    /// Write a training set or an intervention set as JSONL.
    Gen {
        #[arg(long, value_enum, default_value = "dataset")]
        kind: GenKind,
        #[arg(long, default_value = "multi-object")]
        task: String,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "up-down")]
        program: Program,
        #[arg(long, default_value = "count")]
        variable: Variable,
        #[arg(long, default_value = "demo-or-resp", value_parser = parse_sites)]
        sites: Sites,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.json and curves.csv.
    Train {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        sequences: Option<usize>,
        #[command(flatten)]
        out: OutArg,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Search an alignment for one causal variable.
    DasTrain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        program: Program,
        #[arg(long)]
        variable: Variable,
        #[arg(long, default_value = "oaf")]
        kind: AlignmentKind,
        /// Subspace size; repeat to sweep.
        #[arg(long = "d-var")]
        d_var: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        layer: Option<usize>,
        /// Minimum trained-quantity accuracy of the checkpoint.
        #[arg(long)]
        gate: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Score a stored alignment on fresh interventions.
    DasEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        alignment: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value = "demo-or-resp", value_parser = parse_sites)]
        sites: Sites,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Alignment-free causal probes.
    Probe {
        #[arg(long, value_enum)]
        kind: ProbeKind,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Count alignment, for the gradience probe.
        #[arg(long)]
        alignment: Option<PathBuf>,
        /// Extra neuron group, comma separated; repeatable.
        #[arg(long = "neurons", value_parser = parse_group)]
        neurons: Vec<Vec<usize>>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// PCA, attention maps and aligned-variable projections.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        alignment: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run the stages listed in a config file and write a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output root.
        #[arg(long, env = "NUMALIGN_OUT")]
        out: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Artifacts under the output directory.
    List {
        #[command(flatten)]
        out: OutArg,
    },
    /// Metadata of one artifact file.
    Describe { path: PathBuf },
    /// Print the full default configuration.
    Config,
}

#[derive(Clone, Args)]
struct ModelFlags {
    #[arg(long, default_value = "gru")]
    family: Family,
    #[arg(long, default_value = "multi-object")]
    task: String,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    pos: Option<PosEncoding>,
}

fn parse_sites(s: &str) -> Result<Sites, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown sites `{s}`"))
}

fn parse_group(s: &str) -> Result<Vec<usize>, String> {
    s.split(',').map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"))).collect()
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
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Gen { kind, task, n, seed, program, variable, sites, out } => {
            let spec = TaskSection { variant: task, ..Default::default() }.spec()?;
            if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(p)?;
            }
            let w = BufWriter::new(File::create(&out)?);
            match kind {
                GenKind::Dataset => write_dataset(&generate_training_set(&spec, n, &mut derive(seed, "data"))?, w)?,
                GenKind::Interventions => {
                    let s = sample_interventions(program, variable, &spec, sites, n, &mut derive(seed, "gen"))?;
                    write_interventions(&spec, &s, w)?
                }
            }
            println!("{}", out.display());
            Ok(())
        }
        Command::Train { model, config, seed, lr, max_epochs, sequences, out, quiet } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            cfg.model.family = model.family;
            cfg.task.variant = model.task;
            if let Some(d) = model.d_model {
                cfg.model.d_model = d;
            }
            if let Some(l) = model.layers {
                cfg.model.n_layers = l;
            }
            if let Some(p) = model.pos {
                cfg.model.pos_encoding = p;
            }
            if let Some(lr) = lr {
                cfg.train.lr_max = lr;
            }
            if let Some(m) = max_epochs {
                cfg.train.max_epochs = m;
            }
            if let Some(n) = sequences {
                cfg.task.sequences = n;
            }
            cfg.validate()?;
            let spec = cfg.task.spec()?;
            let mc = cfg.model.config(spec.vocabulary().len());
            for p in pipeline::train_stage(&spec, &mc, &cfg.train, cfg.task.sequences, seed, &out.out, quiet)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::DasTrain { checkpoint, program, variable, kind, d_var, epochs, n_train, layer, gate, seed, out } => {
            let ckpt = pipeline::load_checkpoint(&checkpoint)?;
            let mut sec = DasSection::new(program, variable, kind);
            if let Some(e) = epochs {
                sec.epochs = e;
            }
            if let Some(n) = n_train {
                sec.n_train = n;
            }
            if let Some(l) = layer {
                sec.layer = l;
            }
            if let Some(g) = gate {
                sec.gate = g;
            }
            let (best, paths, _) = pipeline::das_stage(&ckpt, &sec.das_config(), &d_var, seed, &out.out, &out.out, true)?;
            print_json(&best.test)?;
            for p in paths {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::DasEval { checkpoint, alignment, n, sites, layer, seed, out } => {
            let ckpt = pipeline::load_checkpoint(&checkpoint)?;
            let rec = pipeline::load_alignment(&alignment)?;
            let rep = pipeline::das_eval(&ckpt, &rec, n, sites, layer, seed)?;
            numalign::analysis::append_report(&out.out, numalign::analysis::ReportKind::Iia, &[pipeline::iia_row(&ckpt, &rep, seed)])?;
            print_json(&rep)
        }
        Command::Probe { kind, checkpoint, alignment, neurons, samples, layer, seed, out } => {
            let ckpt = pipeline::load_checkpoint(&checkpoint)?;
            let rec = alignment.as_deref().map(pipeline::load_alignment).transpose()?;
            let args = pipeline::ProbeArgs { samples, layer, groups: &neurons, alignment: rec.as_ref() };
            let p = pipeline::probe_stage(&ckpt, kind, &args, seed, &out.out)?;
            println!("{}", p.display());
            Ok(())
        }
        Command::Analyze { checkpoint, alignment, layer, seed, out } => {
            let ckpt = pipeline::load_checkpoint(&checkpoint)?;
            let rec = alignment.as_deref().map(pipeline::load_alignment).transpose()?;
            let args = pipeline::AnalyzeArgs { pca: true, attention: true, layer, alignment: rec.as_ref() };
            for p in pipeline::analyze_stage(&ckpt, &args, seed, &out.out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Run { config, out, quiet } => {
            let cfg = RunConfig::load(&config)?;
            let root = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("runs"));
            let manifest = run_pipeline(&cfg, &root, quiet)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::List { out } => inspect::list(&out.out),
        Command::Describe { path } => inspect::describe(&path),
        Command::Config => {
            print!("{}", include_str!("../configs/default.toml"));
            Ok(())
        }
    }
}

