//! Experiment runner: preprocessing generation, solo/collaborative training,
//! adversarial runs and metrics reporting.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crossweave::adversary::{
    detection_rate, run_training_with_adversary, AdversaryOutcome, DeltaKind, TamperStrategy,
};
use crossweave::config::RunConfig;
use crossweave::data::synthetic_idx_files;
use crossweave::dealer::{deal, write_party_file};
use crossweave::report::{read_jsonl, render_table, summarize, write_jsonl, EpochRecord};
use crossweave::sharing::PartyId;
use crossweave::train::{
    train_collaborative, train_domain, train_solo, PreprocPlan, RunOutcome, TrainResult,
};
use crossweave::transport::TcpTransport;
use crossweave::{Error, Result, ABORT_EXIT_CODE};

#[derive(Parser)]
#[command(
    name = "crossweave",
    about = "Collaborative CNN transfer learning over MAC-authenticated secret shares"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate per-party preprocessing files sized for a configured run.
    Deal {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for party1.vtlp … partyN.vtlp.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per the configuration; exits with code 3 on ⊥.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Metrics output (line-delimited JSON records).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Write trained model parameters here on completion.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-party protocol transcripts here.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Read preprocessing files from this directory instead of dealing
        /// in memory (required for tcp mode).
        #[arg(long)]
        preproc: Option<PathBuf>,
        /// In tcp mode: which party this process plays (1-based).
        #[arg(long)]
        party: Option<u16>,
    },
    /// Render a solo-vs-collaborative comparison table from metrics files.
    Report {
        /// One or more metrics files produced by `run`.
        files: Vec<PathBuf>,
    },
    /// Measure empirical MAC-check detection rates per tamper strategy.
    TamperSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Write a synthetic IDX train/test corpus for offline experiments.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12000)]
        train: usize,
        #[arg(long, default_value_t = 2000)]
        test: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            let kind = match &e {
                Error::MacCheckFailed { .. } | Error::RemoteAbort { .. } => "abort",
                Error::Config(_) => "config",
                Error::Io(_) => "io",
                _ => "error",
            };
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": kind })
            );
            std::process::exit(if e.is_abort() { ABORT_EXIT_CODE } else { 1 });
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Deal { config, out } => cmd_deal(&config, &out),
        Command::Run {
            config,
            metrics,
            out,
            transcript,
            preproc,
            party,
        } => cmd_run(
            &config,
            metrics.as_deref(),
            out.as_deref(),
            transcript.as_deref(),
            preproc.as_deref(),
            party,
        ),
        Command::Report { files } => cmd_report(&files),
        Command::TamperSweep { config, trials } => cmd_tamper_sweep(&config, trials),
        Command::SynthData {
            out,
            train,
            test,
            seed,
        } => {
            let paths = synthetic_idx_files(&out, train, test, seed)?;
            for p in paths {
                println!("{}", p.display());
            }
            Ok(0)
        }
    }
}

fn preproc_paths(dir: &Path, n: usize) -> Vec<PathBuf> {
    (1..=n)
        .map(|i| dir.join(format!("party{i}.vtlp")))
        .collect()
}

fn cmd_deal(config: &Path, out: &Path) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    if cfg.n < 2 {
        return Err(Error::Config("deal needs n >= 2".into()));
    }
    let triples = cfg.triple_demand()?;
    let masks = cfg.mask_demand_per_owner()?;
    std::fs::create_dir_all(out)?;
    let bundle = deal(cfg.n, triples, masks, cfg.seed ^ 0x0ff1_9e);
    for pp in &bundle.parties {
        let path = out.join(format!("party{}.vtlp", pp.party.index()));
        write_party_file(&path, pp)?;
        println!(
            "{}",
            serde_json::json!({
                "file": path.display().to_string(),
                "party": pp.party.index(),
                "triples": triples,
                "masks_per_owner": masks,
            })
        );
    }
    Ok(0)
}

fn solo_records(results: &[(PartyId, TrainResult)]) -> Vec<EpochRecord> {
    let mut records: Vec<EpochRecord> = results
        .iter()
        .flat_map(|(_, r)| r.records.clone())
        .collect();
    records.sort_by_key(|r| (r.epoch, r.domain));
    records
}

fn write_outputs(
    metrics: Option<&Path>,
    out: Option<&Path>,
    transcript: Option<&Path>,
    records: &[EpochRecord],
    models: &[crossweave::cnn::ModelParams],
    transcripts: &[String],
) -> Result<()> {
    if let Some(path) = metrics {
        write_jsonl(path, records)?;
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for (i, model) in models.iter().enumerate() {
            let path = dir.join(format!("model-domain{}.json", i + 1));
            let json = serde_json::to_string(model)
                .map_err(|e| Error::Config(format!("serializing model: {e}")))?;
            std::fs::write(path, json)?;
        }
    }
    if let Some(path) = transcript {
        let mut text = String::new();
        for (i, t) in transcripts.iter().enumerate() {
            text.push_str(&format!("# party {}\n{t}", i + 1));
        }
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn cmd_run(
    config: &Path,
    metrics: Option<&Path>,
    out: Option<&Path>,
    transcript: Option<&Path>,
    preproc: Option<&Path>,
    party: Option<u16>,
) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let domains = cfg.domain_data()?;
    let opts = cfg.collab_options()?;

    // Solo / single-domain runs never touch the network or preprocessing.
    if cfg.n == 1 {
        let result = train_solo(
            &opts.net,
            &domains[0],
            &opts.train_cfg,
            PartyId::new(1),
            cfg.fixed_clock,
        )?;
        let results = vec![(PartyId::new(1), result)];
        let records = solo_records(&results);
        for r in &records {
            println!("{}", serde_json::to_string(r).unwrap());
        }
        let models: Vec<_> = results.into_iter().map(|(_, r)| r.params).collect();
        write_outputs(metrics, out, transcript, &records, &models, &[String::new()])?;
        return Ok(0);
    }

    if cfg.mode == "tcp" {
        let party = party.ok_or_else(|| Error::Config("tcp mode requires --party".into()))?;
        let preproc_dir =
            preproc.ok_or_else(|| Error::Config("tcp mode requires --preproc files".into()))?;
        let me = PartyId::new(party);
        let roster = cfg.roster_addrs()?;
        let transport = TcpTransport::connect_mesh(me, &roster, opts.timeout)?;
        let pp =
            crossweave::dealer::read_party_file(&preproc_paths(preproc_dir, cfg.n)[me.slot()])?;
        let data = domains[me.slot()].clone();
        let (result, transcript_text) = train_domain(transport, pp, &data, &opts)?;
        for r in &result.records {
            println!("{}", serde_json::to_string(r).unwrap());
        }
        write_outputs(
            metrics,
            out,
            transcript,
            &result.records,
            std::slice::from_ref(&result.params),
            &[transcript_text],
        )?;
        return Ok(0);
    }

    // In-process collaborative run, optionally adversarial.
    let plan = cfg.tamper_plan()?;
    let preproc_plan = match preproc {
        Some(dir) => PreprocPlan::Files {
            paths: preproc_paths(dir, cfg.n),
        },
        None => PreprocPlan::Inline {
            seed: cfg.seed ^ 0x0ff1_9e,
        },
    };
    let outcome = match &plan {
        Some(plan) => {
            // Deviations are injected at the corrupted parties' transports;
            // material is streamed from the in-memory dealer.
            let report =
                run_training_with_adversary(Some(plan), domains, &opts, cfg.seed ^ 0x0ff1_9e)?;
            match report.outcome {
                AdversaryOutcome::Aborted { round } => {
                    println!(
                        "{}",
                        serde_json::json!({ "outcome": "abort", "round": round })
                    );
                    return Ok(ABORT_EXIT_CODE);
                }
                AdversaryOutcome::UndetectedDeviation { details } => {
                    println!(
                        "{}",
                        serde_json::json!({
                            "outcome": "undetected-deviation",
                            "details": details,
                        })
                    );
                }
                AdversaryOutcome::Completed => {}
            }
            report.run.expect("completed adversarial run carries results")
        }
        None => train_collaborative(domains, &opts, preproc_plan)?,
    };

    match outcome {
        RunOutcome::Completed {
            models,
            records,
            transcripts,
        } => {
            for r in &records {
                println!("{}", serde_json::to_string(r).unwrap());
            }
            write_outputs(metrics, out, transcript, &records, &models, &transcripts)?;
            Ok(0)
        }
        RunOutcome::Aborted { round, reason } => {
            println!(
                "{}",
                serde_json::json!({ "outcome": "abort", "round": round, "reason": reason })
            );
            Ok(ABORT_EXIT_CODE)
        }
    }
}

fn cmd_report(files: &[PathBuf]) -> Result<i32> {
    if files.is_empty() {
        return Err(Error::Config(
            "report needs at least one metrics file".into(),
        ));
    }
    let mut summaries = Vec::new();
    for path in files {
        let records = read_jsonl(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        summaries.push(summarize(&name, &records));
    }
    print!("{}", render_table(&summaries));
    Ok(0)
}

fn cmd_tamper_sweep(config: &Path, trials: usize) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let n = cfg.n.max(2);
    let sweeps = [
        (TamperStrategy::AddDeltaToValueShare, DeltaKind::OddRandom),
        (TamperStrategy::AddDeltaToValueShare, DeltaKind::UniformNonzero),
        (TamperStrategy::AddDeltaToValueShare, DeltaKind::HalfRing),
        (TamperStrategy::CorruptMacShare, DeltaKind::OddRandom),
        (TamperStrategy::SkewBeaverTriple, DeltaKind::OddRandom),
        (TamperStrategy::InconsistentBroadcast, DeltaKind::OddRandom),
        (TamperStrategy::AddDeltaToValueShare, DeltaKind::None),
    ];
    for (strategy, delta) in sweeps {
        let rate = detection_rate(strategy, delta, trials, n, cfg.seed)?;
        println!(
            "{}",
            serde_json::json!({
                "strategy": strategy.name(),
                "delta": format!("{delta:?}"),
                "trials": trials,
                "detection_rate": rate,
            })
        );
    }
    Ok(0)
}
