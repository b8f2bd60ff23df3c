use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use himode::config::{parse_resolution, Alignment, AttentionKind, RunConfig, Toggles};
use himode::data::{read_manifest, write_synthetic_dataset, Split};
use himode::harness::{
    ablate, evaluate, gradcheck_block, parse_op_kind, predict_to_dir, Checkpoint, ModelPredictor,
    Trainer, BLOCKS,
};
use himode::model::{count_params, HiMode};
use himode::{HimodeError, Result};

/// Monocular omnidirectional depth estimation.
///
/// Any config field can be overridden with `--key value`, where `key` is a
/// dotted path (`--model.embed_dim 128`) or a unique leaf name (`--lr 1e-4`).
#[derive(Parser, Debug)]
#[command(name = "himode", version)]
struct Cli {
    /// JSON run config; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// 256x512 or 512x1024.
    #[arg(long, global = true)]
    resolution: Option<String>,
    #[arg(long, global = true)]
    no_srb: bool,
    #[arg(long, global = true, value_enum)]
    attention: Option<AttentionArg>,
    #[arg(long, global = true)]
    no_stp: bool,
    #[arg(long, global = true, value_enum)]
    align: Option<AlignArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AttentionArg {
    Sca,
    Mhsa,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AlignArg {
    Median,
    None,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the train split of a manifest and save a checkpoint.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict depth for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the six module combinations.
    Ablate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// One of hnet, encoder, decoder, srb, cal, end2end-tiny; all when omitted.
        #[arg(long)]
        block: Option<String>,
        /// Corrupt the backward rule of this operation family.
        #[arg(long)]
        fault: Option<String>,
    },
    /// Parameter counts per block and per ablation arm.
    Params,
    /// Write a synthetic equirectangular room dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
}

/// Splits `--key value` config overrides out of argv, leaving flags clap
/// knows about in place.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut cmd = Cli::command();
    cmd.build();
    let mut known = HashSet::new();
    let mut takes_value = HashSet::new();
    let mut collect = |c: &clap::Command| {
        for a in c.get_arguments() {
            if let Some(l) = a.get_long() {
                known.insert(l.to_string());
                if a.get_action().takes_values() {
                    takes_value.insert(l.to_string());
                }
            }
        }
    };
    collect(&cmd);
    for sub in cmd.get_subcommands() {
        collect(sub);
    }
    known.extend(["help", "version"].map(String::from));

    let mut kept = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    if let Some(bin) = it.next() {
        kept.push(bin);
    }
    while let Some(arg) = it.next() {
        let Some(name) = arg.strip_prefix("--").filter(|n| !n.is_empty()) else {
            kept.push(arg);
            continue;
        };
        let (name, inline) = match name.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (name.to_string(), None),
        };
        if known.contains(&name) {
            let needs_value = takes_value.contains(&name) && inline.is_none();
            kept.push(arg);
            if needs_value {
                if let Some(v) = it.next() {
                    kept.push(v);
                }
            }
            continue;
        }
        match inline.or_else(|| it.next_if(|v| !v.starts_with("--"))) {
            Some(v) => overrides.push((name, v)),
            None => kept.push(arg),
        }
    }
    (kept, overrides)
}

fn run_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.apply_override(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(r) = &cli.resolution {
        let (h, w) = parse_resolution(r)?;
        cfg.model = cfg.model.with_resolution(h, w);
    }
    if cli.no_srb {
        cfg.model.use_srb = false;
    }
    if cli.no_stp {
        cfg.model.use_stp = false;
    }
    match cli.attention {
        Some(AttentionArg::Sca) => cfg.model.attention = AttentionKind::Sca,
        Some(AttentionArg::Mhsa) => cfg.model.attention = AttentionKind::Mhsa,
        None => {}
    }
    match cli.align {
        Some(AlignArg::Median) => cfg.align = Alignment::Median,
        Some(AlignArg::None) => cfg.align = Alignment::None,
        None => {}
    }
    Ok(cfg)
}

fn manifest_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.manifest.clone())
        .ok_or_else(|| {
            HimodeError::Config("no manifest given (--manifest or config `manifest`)".into())
        })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HimodeError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| HimodeError::io(path, e))
}

/// Loads a checkpoint, rebuilding the model at `resolution` when given.
fn load_checkpoint(path: &Path, cli: &Cli) -> Result<(Checkpoint, HiMode)> {
    let ck = Checkpoint::load(path)?;
    let mut model_cfg = ck.config.model.clone();
    if let Some(r) = &cli.resolution {
        let (h, w) = parse_resolution(r)?;
        model_cfg = model_cfg.with_resolution(h, w);
    }
    let (model, _) = HiMode::build(&model_cfg, ck.config.seed)?;
    Ok((ck, model))
}

fn run(cli: &Cli, overrides: &[(String, String)]) -> Result<()> {
    let mut cfg = run_config(cli, overrides)?;
    let target = (cfg.model.height, cfg.model.width);
    match &cli.command {
        Command::Train { manifest, out } => {
            let path = manifest_path(manifest, &cfg)?;
            cfg.manifest = Some(std::path::absolute(&path).unwrap_or(path));
            let manifest = read_manifest(cfg.manifest.as_deref().expect("just set"))?;
            let train = manifest.load_split(Split::Train, target)?;
            let out = out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let mut trainer = Trainer::new(&cfg)?;
            let log = trainer.fit(&train, |e, loss| println!("epoch {e:>3}  loss {loss:.5}"))?;
            Checkpoint::from_trainer(&trainer).save(&out.join("checkpoint.bin"))?;
            write_file(
                &out.join("train_log.json"),
                &serde_json::to_string_pretty(&log).expect("log serializes"),
            )?;
            write_file(&out.join("config.json"), &cfg.to_json())?;
            let val = manifest.load_split(Split::Val, target)?;
            if !val.is_empty() {
                let pred = ModelPredictor {
                    model: &trainer.model,
                    params: &trainer.params,
                };
                let report = evaluate(&pred, &val, cfg.align)?;
                report.write(&out, "val_metrics")?;
                println!("val {}", report.aggregate);
            }
            println!(
                "checkpoint written to {}",
                out.join("checkpoint.bin").display()
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            let (ck, model) = load_checkpoint(checkpoint, cli)?;
            let manifest = read_manifest(
                &manifest_path(manifest, &ck.config).or_else(|_| manifest_path(&None, &cfg))?,
            )?;
            let samples = manifest.load_split(*split, (model.config.height, model.config.width))?;
            if samples.is_empty() {
                return Err(HimodeError::Config(format!("split {split} is empty")));
            }
            let pred = ModelPredictor {
                model: &model,
                params: &ck.params,
            };
            let report = evaluate(&pred, &samples, cfg.align)?;
            let out = out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            report.write(&out, &format!("{split}_metrics"))?;
            println!("{}", report.aggregate);
            for e in &report.aggregate_edges {
                println!(
                    "edges@{:.2}  P {:.4}  R {:.4}  F1 {:.4}",
                    e.threshold, e.precision, e.recall, e.f1
                );
            }
        }
        Command::Predict {
            checkpoint,
            image,
            out,
        } => {
            let (ck, model) = load_checkpoint(checkpoint, cli)?;
            let o = predict_to_dir(&model, &ck.params, image, out)?;
            println!(
                "wrote {} {} {}",
                o.pfm.display(),
                o.png16.display(),
                o.color.display()
            );
        }
        Command::Ablate { manifest, out } => {
            let manifest = read_manifest(&manifest_path(manifest, &cfg)?)?;
            let train = manifest.load_split(Split::Train, target)?;
            let mut eval = manifest.load_split(Split::Test, target)?;
            if eval.is_empty() {
                eval = manifest.load_split(Split::Val, target)?;
            }
            let report = ablate(&cfg, &train, &eval, |r| match &r.failure {
                None => println!(
                    "{:<24} {:>10} params  {:.1}s",
                    r.label, r.params, r.wall_time_s
                ),
                Some(f) => println!("{:<24} {:>10} params  FAILED: {f}", r.label, r.params),
            })?;
            let out = out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            write_file(&out.join("ablation.csv"), &report.to_csv())?;
            write_file(
                &out.join("ablation.json"),
                &serde_json::to_string_pretty(&report).expect("report serializes"),
            )?;
            println!(
                "full model smallest: {}  stp audit: {} ({} vs {})",
                report.full_is_smallest,
                report.stp_audit_passes(),
                report.stp_delta.0,
                report.stp_delta.1
            );
        }
        Command::Gradcheck { block, fault } => {
            let fault = match fault {
                Some(f) => Some(
                    parse_op_kind(f)
                        .ok_or_else(|| HimodeError::Config(format!("unknown operation {f:?}")))?,
                ),
                None => None,
            };
            let blocks: Vec<&str> = match block {
                Some(b) => vec![b.as_str()],
                None => BLOCKS.to_vec(),
            };
            let mut failed = Vec::new();
            for b in blocks {
                let r = gradcheck_block(b, cfg.seed, fault)?;
                println!("{r}");
                if !r.passed {
                    failed.push(format!("{b} ({})", r.worst));
                }
            }
            if !failed.is_empty() {
                return Err(HimodeError::GradCheck(failed.join(", ")));
            }
        }
        Command::Params => {
            let (_, store) = HiMode::init::<f32>(&cfg.model, cfg.seed)?;
            for (group, n) in store.count_by_group() {
                println!("{group:<12} {n:>12}");
            }
            println!("{:<12} {:>12}", "total", store.count());
            println!();
            for t in Toggles::TABLE {
                println!(
                    "{:<24} {:>12}",
                    t.label(),
                    count_params(&t.apply(&cfg.model))?
                );
            }
        }
        Command::Synth { out, count } => {
            let path = write_synthetic_dataset(out, *count, target.0, target.1, cfg.seed)?;
            println!("wrote {count} rooms, manifest {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
