use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use l2rec::config::Config;
use l2rec::datagen::{generate, ingest, write_log};
use l2rec::evalkit::{evaluate, popularity_baseline};
use l2rec::experiments::{ablate, route_inspect, sweep, sweep_configs, sweep_means, SweepParam};
use l2rec::trainkit::{Checkpoint, Trainer};
use l2rec::Error;
use serde::Serialize;

const VERSION: &str = concat!("l2rec ", env!("CARGO_PKG_VERSION"));

#[derive(Parser)]
#[command(name = "l2rec", version, about = "Dual-view expert adaptation of a frozen Transformer for sequential recommendation")]
struct Cli {
    /// TOML config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set experts.rank=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic interaction log and its ground truth.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoint, metrics and config snapshot.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ablation flag: no_semantic, no_behavioral, no_bpc, no_pr, no_adapt.
        #[arg(long)]
        ablate: Vec<String>,
        /// Continue the run stored in this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (and checkpoint) once this many steps are done.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint with the leave-one-out protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write one rank per evaluated user to `ranks.jsonl`.
        #[arg(long)]
        dump_ranks: bool,
        /// Also report the popularity baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Train the full model and each ablation under identical seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per value of `rank` or `top_n`.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump every routing decision for the given users.
    RouteInspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        users: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::ShapeMismatch { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Res<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn base_config(cli: &Cli) -> Res<Config> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require(p)?;
            Config::load(p)?
        }
        None => Config::default(),
    };
    cfg.apply(&cli.overrides)?;
    Ok(cfg)
}

fn require(p: &Path) -> Res {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{} does not exist", p.display())))
    }
}

fn emit(v: &impl Serialize) -> Res {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Res {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn snapshot(dir: &Path, cfg: &Config) -> Res {
    fs::create_dir_all(dir)?;
    let body = cfg.to_toml()?;
    fs::write(dir.join("config.toml"), format!("# {VERSION}\n{body}"))?;
    Ok(())
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    version: &'a str,
    #[serde(flatten)]
    body: T,
}

fn tagged<T: Serialize>(body: T) -> Tagged<'static, T> {
    Tagged { version: VERSION, body }
}

fn run(cli: Cli) -> Res {
    let cfg = base_config(&cli)?;
    match cli.cmd {
        Cmd::GenData { out, seed } => {
            let mut cfg = cfg;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            cfg.data.validate()?;
            let (records, truth) = generate(&cfg.data)?;
            snapshot(&out, &cfg)?;
            let log = out.join("interactions.jsonl");
            write_log(&log, &records)?;
            write_json(&out.join("ground_truth.json"), &truth)?;
            emit(&serde_json::json!({
                "records": records.len(),
                "users": truth.users.len(),
                "items": truth.items.len(),
                "log": log,
            }))
        }
        Cmd::Train {
            data,
            out,
            ablate,
            resume,
            stop_after,
        } => {
            require(&data)?;
            let ds = ingest(&data)?;
            let mut tr = match &resume {
                Some(p) => {
                    require(p)?;
                    let ck = Checkpoint::load(p)?;
                    Trainer::resume(&ck, &ds)?
                }
                None => {
                    let mut cfg = cfg;
                    for a in &ablate {
                        cfg.train.ablation.enable(a)?;
                    }
                    Trainer::new(cfg, &ds)?
                }
            };
            snapshot(&out, &tr.cfg)?;
            let metrics = out.join("metrics.jsonl");
            let file = if resume.is_some() {
                OpenOptions::new().create(true).append(true).open(&metrics)?
            } else {
                File::create(&metrics)?
            };
            let mut w = BufWriter::new(file);
            let limit = stop_after.unwrap_or(u64::MAX);
            while !tr.done() && tr.step < limit {
                let r = tr.step()?;
                serde_json::to_writer(&mut w, &r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            tr.checkpoint()?.save(&out.join("checkpoint.l2r"))?;
            let val = tr.validate()?.without_ranks();
            write_json(&out.join("validation.json"), &tagged(&val))?;
            emit(&serde_json::json!({
                "step": tr.step,
                "done": tr.done(),
                "data_hash": format!("{:016x}", tr.data_hash()),
                "val_recall10": val.recall_at_k,
                "val_ndcg10": val.ndcg_at_k,
            }))
        }
        Cmd::Eval {
            checkpoint,
            data,
            out,
            dump_ranks,
            baseline,
        } => {
            require(&checkpoint)?;
            require(&data)?;
            let ds = ingest(&data)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let mut run_cfg = Config::from_toml(&ck.config)?;
            run_cfg.apply(&cli.overrides)?;
            let model = ck.restore_model()?;
            let rep = evaluate(&model, &ds, &run_cfg.eval, run_cfg.train.ablation.encode_options())?;
            let pop = if baseline { Some(popularity_baseline(&ds, &run_cfg.eval)?.without_ranks()) } else { None };
            if let Some(dir) = &out {
                snapshot(dir, &run_cfg)?;
                write_json(&dir.join("metrics.json"), &tagged(rep.clone().without_ranks()))?;
                if let Some(p) = &pop {
                    write_json(&dir.join("baseline.json"), &tagged(p))?;
                }
                if dump_ranks {
                    let mut w = BufWriter::new(File::create(dir.join("ranks.jsonl"))?);
                    for r in &rep.ranks {
                        serde_json::to_writer(&mut w, r)?;
                        w.write_all(b"\n")?;
                    }
                    w.flush()?;
                }
            } else if dump_ranks {
                return Err(Failure::Usage("--dump-ranks needs --out".into()));
            }
            emit(&rep.without_ranks())?;
            if let Some(p) = pop {
                emit(&serde_json::json!({ "baseline": "popularity", "report": p }))?;
            }
            Ok(())
        }
        Cmd::Ablate { data, out } => {
            require(&data)?;
            let ds = ingest(&data)?;
            snapshot(&out, &cfg)?;
            let mut w = BufWriter::new(File::create(out.join("ablation.jsonl"))?);
            let rows = ablate(&cfg, &ds, |r| {
                println!("{}", serde_json::to_string(r).expect("serializable row"));
            })?;
            for r in &rows {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            let mut table = String::from("variant\trecall@k\tndcg@k\n");
            for r in &rows {
                table.push_str(&format!("{}\t{:.4}\t{:.4}\n", r.variant, r.recall_at_k, r.ndcg_at_k));
            }
            fs::write(out.join("ablation.tsv"), table)?;
            Ok(())
        }
        Cmd::Sweep {
            param,
            values,
            seeds,
            data,
            out,
        } => {
            let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds };
            sweep_configs(&cfg, param, &values, &seeds)?;
            require(&data)?;
            let ds = ingest(&data)?;
            snapshot(&out, &cfg)?;
            let rows = sweep(&cfg, &ds, param, &values, &seeds, |r| {
                println!("{}", serde_json::to_string(r).expect("serializable row"));
            })?;
            let mut w = BufWriter::new(File::create(out.join("sweep.jsonl"))?);
            for r in &rows {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            let mut curve = String::from("value\tmean_ndcg@k\n");
            for (v, n) in sweep_means(&rows) {
                curve.push_str(&format!("{v}\t{n:.4}\n"));
            }
            fs::write(out.join("sweep.tsv"), curve)?;
            Ok(())
        }
        Cmd::RouteInspect {
            checkpoint,
            data,
            users,
            out,
        } => {
            require(&checkpoint)?;
            require(&data)?;
            let ds = ingest(&data)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let run_cfg = Config::from_toml(&ck.config)?;
            let model = ck.restore_model()?;
            let (records, hist) = route_inspect(&model, &ds, &users, run_cfg.train.ablation.encode_options())?;
            if let Some(dir) = &out {
                snapshot(dir, &run_cfg)?;
                let mut w = BufWriter::new(File::create(dir.join("routes.jsonl"))?);
                for r in &records {
                    serde_json::to_writer(&mut w, r)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
                write_json(&dir.join("usage.json"), &serde_json::json!({ "version": VERSION, "views": hist }))?;
            } else {
                for r in &records {
                    emit(r)?;
                }
            }
            for h in &hist {
                emit(h)?;
            }
            Ok(())
        }
    }
}
