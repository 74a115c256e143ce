//! `dyrate` — train the toy decoder and rate predictor, generate with
//! pruning strategies, sweep benchmarks, analyze traces, and query the
//! FLOPs model.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::LabConfig;
use dyrate_core::costing::{
    analytic_dyrate_schedule, analytic_strategy_schedule, latency_proxy, schedule_flops,
    write_cost_csv, CostConfig, CostRow,
};
use dyrate_core::engine::{
    generate_observed, write_schedules, DecodeConfig, PruneMode, PruneSchedule, PruneStrategy,
};
use dyrate_core::error::{Error, Result};
use dyrate_core::harness::{
    heldout_accuracy, run_experiment, split_strategies, train_predictor, train_toy_model,
    ExperimentSpec, TrainConfig,
};
use dyrate_core::model::Params;
use dyrate_core::pruner::{GumbelConfig, PredictorParams};
use dyrate_core::workload::{gen_example, read_trace, trace_shares, write_trace, TraceBuilder};

#[derive(Parser)]
#[command(
    name = "dyrate",
    about = "Dynamic-rate KV-cache token pruning laboratory",
    version
)]
struct Cli {
    /// Key = value configuration file (model.*, task.*, train.*, ...).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every seed (model, task, training, sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; meaning depends on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the toy decoder on the synthetic task and save a checkpoint.
    TrainModel,
    /// Train the rate predictor against a frozen model checkpoint.
    TrainPredictor {
        /// Model checkpoint to freeze.
        #[arg(long)]
        model: PathBuf,
        /// Optional CSV of per-step loss and mean rate.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Generate with a pruning strategy; writes a schedule NDJSON per run.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// none | dyrate | fastv(K,R) | vtw(K) | fp(R,K) | dp(P,R')
        #[arg(long, default_value = "none")]
        strategy: String,
        /// hard (discard tokens) | soft (mask attention)
        #[arg(long, default_value = "hard")]
        mode: String,
        /// Number of generation runs (distinct evaluation prompts).
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Write an attention trace of the last run.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the experiment spec: every strategy, accuracy + FLOPs CSV.
    Bench,
    /// Summarize a trace file into a segment-share table CSV.
    AnalyzeTrace {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Query the analytical FLOPs model.
    Flops {
        /// llava7b or toy
        #[arg(long, default_value = "llava7b")]
        preset: String,
        /// Comma-separated strategy list.
        #[arg(long, default_value = "none,fastv(3,0.5),fastv(2,0.5),vtw(16)")]
        strategies: String,
        /// Mean realized rate for an additional dyrate row.
        #[arg(long)]
        dyrate_rate: Option<f64>,
        /// FLOPs-per-second budget for the latency proxy.
        #[arg(long, default_value_t = 1e12)]
        throughput: f64,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } | Error::NonFinite(_) => 3,
        Error::Io { .. } | Error::Format(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn require_out<'a>(out: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    out.as_deref()
        .ok_or_else(|| Error::Config(format!("{what} needs --out <path>")))
}

fn parse_mode(s: &str) -> Result<PruneMode> {
    match s {
        "hard" => Ok(PruneMode::InferHard),
        "soft" => Ok(PruneMode::TrainSoft),
        other => Err(Error::Config(format!("mode must be hard or soft, got {other}"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainModel => {
            let mut cfg =
                LabConfig::load(cli.config.as_deref(), TrainConfig::pretrain_defaults())?;
            if let Some(seed) = cli.seed {
                cfg.override_seed(seed);
            }
            let out = require_out(&cli.out, "train-model")?;
            eprintln!(
                "training model: {} layers, d={}, task n_img={}, {} steps x batch {}",
                cfg.model.n_layers, cfg.model.d_model, cfg.task.n_img, cfg.train.steps,
                cfg.train.batch
            );
            let (params, curves) = train_toy_model(&cfg.model, &cfg.task, &cfg.train)?;
            let acc = heldout_accuracy(&params, &cfg.task, 32)?;
            params.save(out)?;
            eprintln!(
                "final loss {:.4}, held-out accuracy {:.4}, saved {}",
                curves.losses.last().unwrap(),
                acc,
                out.display()
            );
            Ok(())
        }
        Cmd::TrainPredictor { model, curves } => {
            let mut cfg =
                LabConfig::load(cli.config.as_deref(), TrainConfig::predictor_defaults())?;
            if let Some(seed) = cli.seed {
                cfg.override_seed(seed);
            }
            let out = require_out(&cli.out, "train-predictor")?;
            let params = Params::load(&model)?;
            eprintln!(
                "training predictor: K={}, prune_layer={}, objective {}",
                cfg.rate_classes,
                cfg.prune_layer,
                cfg.train.objective_string()
            );
            let (predictor, c) =
                train_predictor(&params, &cfg.task, &cfg.train, cfg.prune_layer, cfg.rate_classes)?;
            predictor.save(out)?;
            if let Some(curves_path) = curves {
                let mut csv = format!("# objective={}\nstep,loss,mean_rate\n", cfg.train.objective_string());
                for (i, (l, r)) in c.losses.iter().zip(c.mean_rates.iter()).enumerate() {
                    csv.push_str(&format!("{i},{l:.6},{r:.6}\n"));
                }
                std::fs::write(&curves_path, csv)
                    .map_err(|e| Error::io(curves_path.display().to_string(), e))?;
            }
            eprintln!(
                "final loss {:.4}, mean rate {:.4}, saved {}",
                c.losses.last().unwrap(),
                c.mean_rates.last().unwrap(),
                out.display()
            );
            Ok(())
        }
        Cmd::Generate { model, predictor, strategy, mode, runs, trace } => {
            let mut cfg =
                LabConfig::load(cli.config.as_deref(), TrainConfig::predictor_defaults())?;
            if let Some(seed) = cli.seed {
                cfg.override_seed(seed);
            }
            let params = Params::load(&model)?;
            let predictor = predictor.as_deref().map(PredictorParams::load).transpose()?;
            let strat = PruneStrategy::parse(&strategy)?;
            let mode = parse_mode(&mode)?;
            let decode = DecodeConfig {
                strategy: cfg.decode.clone(),
                max_new_tokens: cfg.max_new_tokens.unwrap_or(cfg.task.response_len),
                prune_layer: cfg.prune_layer,
                rate_classes: cfg.rate_classes,
                gumbel: GumbelConfig { seed: cfg.train.seed, ..Default::default() },
            };
            let mut schedules: Vec<PruneSchedule> = Vec::with_capacity(runs);
            for i in 0..runs {
                let ex = gen_example(&cfg.task, 2_000_000 + i as u64)?;
                let mut builder =
                    TraceBuilder::new(params.config.n_heads, params.config.n_layers);
                let want_trace = trace.is_some() && i == runs - 1;
                let (tokens, schedule) = generate_observed(
                    &params,
                    predictor.as_ref(),
                    &ex.prompt,
                    &ex.seg,
                    &decode,
                    &strat,
                    mode,
                    want_trace.then_some(&mut builder as &mut dyn dyrate_core::engine::StepObserver),
                )?;
                let hits = tokens
                    .iter()
                    .zip(ex.targets.iter())
                    .filter(|(a, b)| a == b)
                    .count();
                println!(
                    "run {i}: tokens {:?} ({}/{} match targets), flops {:.2}%",
                    tokens,
                    hits,
                    ex.targets.len().min(tokens.len()),
                    schedule.flops_ratio_pct()
                );
                if want_trace {
                    let t = builder.finish()?;
                    let trace_path = trace.as_ref().unwrap();
                    write_trace(trace_path, &t)?;
                    eprintln!("trace written to {}", trace_path.display());
                }
                schedules.push(schedule);
            }
            if let Some(out) = &cli.out {
                write_schedules(out, &schedules)?;
                eprintln!("schedules written to {}", out.display());
            }
            Ok(())
        }
        Cmd::Bench => {
            let path = cli
                .config
                .as_deref()
                .ok_or_else(|| Error::Config("bench needs --config <experiment file>".into()))?;
            let mut spec = ExperimentSpec::load(path)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
                spec.task.seed = seed;
            }
            if let Some(out) = &cli.out {
                spec.out_csv = Some(out.clone());
            }
            let csv = run_experiment(&spec)?;
            print!("{csv}");
            Ok(())
        }
        Cmd::AnalyzeTrace { trace } => {
            let t = read_trace(&trace)?;
            let (_, table) = trace_shares(&t)?;
            let csv = table.to_csv();
            match &cli.out {
                Some(out) => std::fs::write(out, &csv)
                    .map_err(|e| Error::io(out.display().to_string(), e))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Cmd::Flops { preset, strategies, dyrate_rate, throughput } => {
            let cost_cfg = match preset.as_str() {
                "llava7b" => CostConfig::llava_7b(),
                "toy" => {
                    let cfg =
                        LabConfig::load(cli.config.as_deref(), TrainConfig::pretrain_defaults())?;
                    CostConfig {
                        n_layers: cfg.model.n_layers,
                        d_model: cfg.model.d_model,
                        d_ffn: cfg.model.d_ffn,
                        n_visual: cfg.task.n_img,
                        prompt_text_tokens: cfg.task.n_sys + cfg.task.n_ins,
                        generated_tokens: cfg.task.response_len,
                    }
                }
                other => return Err(Error::Config(format!("unknown preset: {other}"))),
            };
            let mut rows = Vec::new();
            for s in split_strategies(&strategies)? {
                let strat = PruneStrategy::parse(&s)?;
                let schedule = analytic_strategy_schedule(&cost_cfg, &strat)?;
                let report = schedule_flops(&schedule, &cost_cfg)?;
                let proxy = latency_proxy(&report, throughput)?;
                rows.push(CostRow {
                    strategy: strat.name().to_string(),
                    params: strat.params_string(),
                    report,
                    proxy_latency: proxy,
                });
            }
            if let Some(rate) = dyrate_rate {
                let schedule = analytic_dyrate_schedule(&cost_cfg, rate)?;
                let report = schedule_flops(&schedule, &cost_cfg)?;
                let proxy = latency_proxy(&report, throughput)?;
                rows.push(CostRow {
                    strategy: "dyrate".to_string(),
                    params: format!("mean_r={rate}"),
                    report,
                    proxy_latency: proxy,
                });
            }
            match &cli.out {
                Some(out) => write_cost_csv(out, &rows)?,
                None => {
                    println!("{}", dyrate_core::costing::COST_CSV_HEADER);
                    for r in rows {
                        println!(
                            "{},{},{},{:.4},{:.6}",
                            r.strategy,
                            r.params,
                            r.report.total_flops,
                            r.report.ratio_pct,
                            r.proxy_latency
                        );
                    }
                }
            }
            Ok(())
        }
    }
}
