//! The `cnv2` command line. [`run`] parses arguments, dispatches and maps
//! failures to exit codes: 2 for usage errors, 3 for configuration errors
//! and 1 for everything else.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{ablation_sweep, connectivity, export_heatmap, sweep_csv, Aggregation, Axis, Granularity};
use crate::compile::{compile_network, verify_equivalence, InferencePlan};
use crate::config::ExperimentConfig;
use crate::container::{Container, PLAN_TAG};
use crate::error::{Error, Result};
use crate::network::{config_cost, network_cost, CostBreakdown, Network, Sparsity};
use crate::reference::reference_cost;
use crate::tensor::{Shape4, Tensor4};
use crate::train::trainer::{evaluate_with, write_metrics_csv};
use crate::train::train_on;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "cnv2",
    version,
    about = "Train, compile and analyse dense networks with sparse feature reactivation",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON or TOML), layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// toy, cifar-110, cifar-146, cnv2-a, cnv2-b or cnv2-c.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config value, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; nothing is written outside it.
    #[arg(long, default_value = "cnv2-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train with staged pruning; writes metrics.csv, checkpoint.cnv2 and config.json.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Loss and accuracy of a checkpoint or compiled plan on the configured data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compile a fully pruned checkpoint into group convolutions and index maps.
    Compile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fold batch norm into the convolutions (also `fold_bn` in the config).
        #[arg(long)]
        fold_bn: bool,
    },
    /// Compile a checkpoint and compare its logits with the training form.
    VerifyEquivalence {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Random inputs to compare on.
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f32,
    },
    /// Multiply-adds and parameters, beside the published figures when known.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Also count the live weights of this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Connection-strength matrix as CSV and PGM.
    Connectivity {
        #[command(flatten)]
        common: Common,
        /// Analyse this checkpoint instead of a freshly initialised network.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_granularity)]
        granularity: Option<Granularity>,
        #[arg(long, value_parser = parse_aggregation)]
        aggregation: Option<Aggregation>,
    },
    /// Sweep the sparse factor (S) or the reactivation group count (G).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: Option<Axis>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
        /// Force training on or off regardless of the config.
        #[arg(long)]
        train: Option<bool>,
    },
}

fn parse_granularity(s: &str) -> std::result::Result<Granularity, String> {
    match s {
        "per_group" | "per-group" => Ok(Granularity::PerGroup),
        "per_layer" | "per-layer" => Ok(Granularity::PerLayer),
        _ => Err(format!("expected per_group or per_layer, got `{s}`")),
    }
}

fn parse_aggregation(s: &str) -> std::result::Result<Aggregation, String> {
    match s {
        "mean" => Ok(Aggregation::Mean),
        "sum" => Ok(Aggregation::Sum),
        _ => Err(format!("expected mean or sum, got `{s}`")),
    }
}

/// Runs the CLI on `args` (including the program name), writing human
/// output to `out` and diagnostics to `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().ansi().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::load(common.config.as_deref(), common.preset.as_deref(), &common.overrides)
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out)?;
    Ok(&common.out)
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train { common } => train(&common, out),
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint, out),
        Command::Compile {
            common,
            checkpoint,
            fold_bn,
        } => compile(&common, &checkpoint, fold_bn, out),
        Command::VerifyEquivalence {
            common,
            checkpoint,
            samples,
            tolerance,
        } => verify(&common, &checkpoint, samples, tolerance, out),
        Command::Flops { common, checkpoint } => flops(&common, checkpoint.as_deref(), out),
        Command::Connectivity {
            common,
            checkpoint,
            granularity,
            aggregation,
        } => conn(&common, checkpoint.as_deref(), granularity, aggregation, out),
        Command::Sweep {
            common,
            axis,
            values,
            train,
        } => sweep(&common, axis, values, train, out),
    }
}

fn train(common: &Common, out: &mut dyn Write) -> Result<()> {
    let cfg = load(common)?;
    let data = cfg.train.dataset.load()?;
    let dir = out_dir(common)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    let mut net = Network::new(&cfg.network, cfg.seed)?;
    emit(out, "epoch      loss     acc  live_sfr  live_lgc        lr\n")?;
    let mut lines = String::new();
    let report = train_on(&mut net, &cfg.train, &data, &mut |m| {
        let line = format!(
            "{:>5} {:>9.4} {:>7.3} {:>9} {:>9} {:>9.5}\n",
            m.epoch, m.loss, m.acc, m.live_sfr, m.live_lgc, m.lr
        );
        let _ = out.write_all(line.as_bytes());
        lines.push_str(&line);
    })?;
    write_metrics_csv(dir.join("metrics.csv"), &report.metrics)?;
    net.save(dir.join("checkpoint.cnv2"))?;
    emit(
        out,
        &format!(
            "prune events fired: reactivation {}, condensation {}; masked weights frozen: {}\nwrote {}\n",
            report.sfr_events_fired,
            report.lgc_events_fired,
            report.masked_weights_frozen,
            dir.display()
        ),
    )
}

/// A checkpoint or a compiled plan, told apart by the container tag.
enum Model {
    Net(Box<Network>),
    Plan(Box<InferencePlan>),
}

fn load_model(path: &Path) -> Result<Model> {
    let c = Container::load(path)?;
    if c.tag == PLAN_TAG {
        Ok(Model::Plan(Box::new(InferencePlan::from_container(&c)?)))
    } else {
        Ok(Model::Net(Box::new(Network::from_container(&c)?)))
    }
}

fn eval(common: &Common, checkpoint: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = load(common)?;
    let data = cfg.train.dataset.load()?;
    let batch = cfg.train.batch_size.clamp(1, 256);
    let ev = match load_model(checkpoint)? {
        Model::Net(mut net) => evaluate_with(&data, batch, |x| {
            net.set_training(false);
            net.logits(x)
        })?,
        Model::Plan(plan) => evaluate_with(&data, batch, |x| plan.forward(x))?,
    };
    let dir = out_dir(common)?;
    fs::write(
        dir.join("eval.csv"),
        format!("samples,loss,acc\n{},{},{}\n", ev.samples, ev.loss, ev.acc),
    )?;
    emit(out, &format!("samples {}  loss {:.4}  acc {:.4}\n", ev.samples, ev.loss, ev.acc))
}

fn load_network(path: &Path) -> Result<Network> {
    match load_model(path)? {
        Model::Net(n) => Ok(*n),
        Model::Plan(_) => Err(Error::InvalidArgument(format!(
            "`{}` is a compiled plan, expected a training checkpoint",
            path.display()
        ))),
    }
}

fn compile(common: &Common, checkpoint: &Path, fold_bn: bool, out: &mut dyn Write) -> Result<()> {
    let cfg = load(common)?;
    let net = load_network(checkpoint)?;
    let plan = compile_network(&net, fold_bn || cfg.fold_bn)?;
    let dir = out_dir(common)?;
    let path = dir.join("plan.cnv2");
    plan.save(&path)?;
    let table = cost_table(&[("training", &network_cost(&net)), ("compiled", &plan.cost())]);
    fs::write(dir.join("compile_cost.csv"), cost_csv(&[("compiled", &plan.cost())]))?;
    emit(out, &format!("{table}wrote {}\n", path.display()))
}

fn verify(common: &Common, checkpoint: &Path, samples: usize, tolerance: f32, out: &mut dyn Write) -> Result<()> {
    let cfg = load(common)?;
    let mut net = load_network(checkpoint)?;
    let plan = compile_network(&net, cfg.fold_bn)?;
    let c = net.config();
    let shape = Shape4::new(samples.max(1), c.input_channels, c.input_resolution, c.input_resolution);
    let x = Tensor4::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let diff = verify_equivalence(&mut net, &plan, &x)?;
    emit(out, &format!("max |logit difference| over {} inputs: {diff:.3e}\n", shape.n))?;
    if diff.is_nan() || diff >= tolerance {
        return Err(Error::InvalidArgument(format!(
            "compiled plan differs by {diff:.3e}, tolerance {tolerance:.1e}"
        )));
    }
    emit(out, "equivalent\n")
}

fn cost_table(columns: &[(&str, &CostBreakdown)]) -> String {
    let mut s = format!("{:<12}", "part");
    for (name, _) in columns {
        let _ = write!(s, " {:>14} {:>12}", format!("{name} MACs"), "params");
    }
    s.push('\n');
    let rows: Vec<_> = columns.iter().map(|(_, c)| c.rows()).collect();
    for i in 0..rows[0].len() {
        let _ = write!(s, "{:<12}", rows[0][i].0);
        for r in &rows {
            let _ = write!(s, " {:>14} {:>12}", r[i].1.macs, r[i].1.params);
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<12}", "total");
    for (_, c) in columns {
        let t = c.total();
        let _ = write!(s, " {:>14} {:>12}", t.macs, t.params);
    }
    s.push('\n');
    s
}

fn cost_csv(columns: &[(&str, &CostBreakdown)]) -> String {
    let mut s = String::from("variant,part,macs,params\n");
    for (name, c) in columns {
        for (part, v) in c.rows() {
            let _ = writeln!(s, "{name},{part},{},{}", v.macs, v.params);
        }
        let t = c.total();
        let _ = writeln!(s, "{name},total,{},{}", t.macs, t.params);
    }
    s
}

fn millions(v: f64) -> String {
    format!("{:.1}M", v / 1e6)
}

fn flops(common: &Common, checkpoint: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let cfg = load(common)?;
    let dense = config_cost(&cfg.network, Sparsity::Dense);
    let fin = config_cost(&cfg.network, Sparsity::Final);
    let live = match checkpoint {
        Some(p) => Some(network_cost(&load_network(p)?)),
        None => None,
    };
    let mut columns = vec![("dense", &dense), ("deployed", &fin)];
    if let Some(l) = &live {
        columns.push(("checkpoint", l));
    }
    let mut text = format!("{}: {}\n", cfg.preset, cfg.network.name);
    text.push_str(&cost_table(&columns));
    let t = fin.total();
    let _ = writeln!(text, "\n{:<12} {:>10} {:>10}", "", "FLOPs", "params");
    let _ = writeln!(
        text,
        "{:<12} {:>10} {:>10}",
        "measured",
        millions(t.macs as f64),
        millions(t.params as f64)
    );
    match reference_cost(&cfg.preset) {
        Some(r) => {
            let _ = writeln!(text, "{:<12} {:>10} {:>10}", "reference", millions(r.flops), millions(r.params));
            let _ = writeln!(
                text,
                "{:<12} {:>+9.1}% {:>+9.1}%",
                "deviation",
                (t.macs as f64 / r.flops - 1.0) * 100.0,
                (t.params as f64 / r.params - 1.0) * 100.0
            );
        }
        None => text.push_str("reference    (none published for this preset)\n"),
    }
    let dir = out_dir(common)?;
    fs::write(dir.join("flops.csv"), cost_csv(&columns))?;
    emit(out, &text)
}

fn conn(
    common: &Common,
    checkpoint: Option<&Path>,
    granularity: Option<Granularity>,
    aggregation: Option<Aggregation>,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = load(common)?;
    let net = match checkpoint {
        Some(p) => load_network(p)?,
        None => Network::new(&cfg.network, cfg.seed)?,
    };
    let m = connectivity(
        &net,
        granularity.unwrap_or(cfg.analysis.granularity),
        aggregation.unwrap_or(cfg.analysis.aggregation),
    );
    let dir = out_dir(common)?;
    let (csv, pgm) = export_heatmap(&m, &dir.join("connectivity"))?;
    let (r, c) = m.shape();
    let pruned = m.cells.iter().filter(|c| **c == crate::analysis::Cell::Pruned).count();
    emit(
        out,
        &format!(
            "{r} sources x {c} targets ({}); {pruned} pruned cells\nwrote {} and {}\n",
            m.metadata(),
            csv.display(),
            pgm.display()
        ),
    )
}

fn sweep(
    common: &Common,
    axis: Option<Axis>,
    values: Option<Vec<usize>>,
    train: Option<bool>,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = load(common)?;
    let axis = axis.unwrap_or(cfg.sweep.axis);
    let values = values.unwrap_or_else(|| cfg.sweep.values.clone());
    let train = train.unwrap_or(cfg.sweep.train).then_some(&cfg.train);
    let rows = ablation_sweep(&cfg.network, axis, &values, train, cfg.seed)?;
    let mut text = format!(
        "{:>6} {:>14} {:>10} {:>12} {:>9}\n",
        axis.name(),
        "MACs",
        "params",
        "SFR MACs",
        "train acc"
    );
    for r in &rows {
        let acc = r.final_acc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            text,
            "{:>6} {:>14} {:>10} {:>12} {:>9}",
            r.value, r.flops, r.params, r.sfr_flops, acc
        );
    }
    let dir = out_dir(common)?;
    fs::write(dir.join("sweep.csv"), sweep_csv(axis, &rows))?;
    emit(out, &text)
}
