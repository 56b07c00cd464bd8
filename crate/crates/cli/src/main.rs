//! `centro`: simulate contact maps, build references, train summary nets and
//! infer centromere positions.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use centro_core::flow::ConditionalFlow;
use centro_core::hic_io::{load_map, make_reference, normalize_map, save_map, IceOptions, MapMeta, ReferenceMode};
use centro_core::metrics::{evaluate, Bandwidth};
use centro_core::pipeline::{
    read_samples_csv, round_report, run_experiment, ExperimentConfig, Method, Mode, ReferenceSource, RoundResult,
};
use centro_core::rng::seeded;
use centro_core::simulator::simulate_map;
use centro_core::summary::{train_summary, SummaryArch, SummaryDataset, SummaryMode, SummaryNet, SummaryTrainConfig};
use centro_core::{CoreError, GenomeSpec};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "centro", version, about = "Centromere inference from trans-contact maps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefMode {
    Raw,
    Normalized,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetMode {
    Joint,
    PerChromosome,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    AbcPearson,
    AbcCnn,
    Snpe,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one contact map.
    Simulate {
        #[arg(long)]
        genome: PathBuf,
        /// Comma-separated positions (bp) or `prior`.
        #[arg(long, default_value = "prior")]
        theta: String,
        #[arg(long, env = "CENTRO_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a reference map and record its provenance.
    MakeReference {
        #[arg(long)]
        genome: PathBuf,
        #[arg(long)]
        theta: String,
        #[arg(long, env = "CENTRO_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "raw")]
        mode: RefMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// ICE-normalize a stored map.
    Normalize {
        #[arg(long)]
        genome: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = 200)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a summary network.
    TrainSummary {
        #[arg(long)]
        genome: PathBuf,
        #[arg(long, value_enum, default_value = "joint")]
        mode: NetMode,
        #[arg(long, default_value_t = 5000)]
        n_train: usize,
        #[arg(long, default_value_t = 5e-4)]
        lr: f64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, env = "CENTRO_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run inference; flags override the config file.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        genome: Option<PathBuf>,
        /// Stored reference map directory.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, value_enum)]
        mode: Option<NetMode>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        n_per_round: Option<usize>,
        #[arg(long)]
        accept: Option<f64>,
        /// Pretrained summary network.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, env = "CENTRO_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score samples against known centromeres.
    Evaluate {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        theta_ref: String,
        /// `median` or a positive bandwidth in bp.
        #[arg(long, default_value = "median")]
        bandwidth: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the per-round metric table of a results directory.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
    /// Evaluate a trained posterior flow at given positions.
    Logprob {
        #[arg(long)]
        flow: PathBuf,
        /// Comma-separated positions (bp); repeat for several points.
        #[arg(long, required = true)]
        theta: Vec<String>,
        /// Raw summary context; read from `posterior.json` next to the flow otherwise.
        #[arg(long)]
        context: Option<String>,
    },
}

fn parse_list(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("`{v}` is not a number"))
        })
        .collect::<Result<_, _>>()
        .map_err(|e| config_err(e.to_string()))
}

fn parse_theta(g: &GenomeSpec, s: &str) -> anyhow::Result<Vec<f64>> {
    let theta = parse_list(s)?;
    g.check_theta(&theta).map_err(|e| config_err(e.to_string()))?;
    Ok(theta)
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    CoreError::Config(msg.into()).into()
}

fn read_input(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| {
        CoreError::Load {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }
        .into()
    })
}

fn load_genome(path: &Path) -> anyhow::Result<GenomeSpec> {
    Ok(GenomeSpec::load(path)?)
}

fn ref_mode(m: RefMode) -> ReferenceMode {
    match m {
        RefMode::Raw => ReferenceMode::Raw,
        RefMode::Normalized => ReferenceMode::Normalized,
    }
}

fn net_mode(m: NetMode) -> Mode {
    match m {
        NetMode::Joint => Mode::Joint,
        NetMode::PerChromosome => Mode::PerChromosome,
    }
}

fn method(m: MethodArg) -> Method {
    match m {
        MethodArg::AbcPearson => Method::AbcPearson,
        MethodArg::AbcCnn => Method::AbcCnn,
        MethodArg::Snpe => Method::Snpe,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Simulate {
            genome,
            theta,
            seed,
            out,
        } => {
            let g = load_genome(&genome)?;
            let mut rng = seeded(seed);
            let theta = if theta == "prior" {
                g.sample_prior(&mut rng).0
            } else {
                parse_theta(&g, &theta)?
            };
            let map = simulate_map(&g, &theta, &mut rng)?;
            let mut meta = MapMeta::for_map(&map);
            meta.theta_ref = Some(theta);
            meta.seed = Some(seed);
            save_map(&out, &map, &meta)?;
        }
        Cmd::MakeReference {
            genome,
            theta,
            seed,
            mode,
            out,
        } => {
            let g = load_genome(&genome)?;
            let (map, meta) = make_reference(&g, &parse_theta(&g, &theta)?, seed, ref_mode(mode))?;
            save_map(&out, &map, &meta)?;
        }
        Cmd::Normalize {
            genome,
            map,
            max_iters,
            tol,
            out,
        } => {
            let g = load_genome(&genome)?;
            let (m, mut meta) = load_map(&map, &g)?;
            let (norm, res) = normalize_map(&m, IceOptions { max_iters, tol })?;
            log::info!(
                "ICE: {} sweeps, converged {}, {} zero rows",
                res.iterations,
                res.converged,
                res.zero_rows.len()
            );
            meta.mode = Some(ReferenceMode::Normalized);
            save_map(&out, &norm, &meta)?;
        }
        Cmd::TrainSummary {
            genome,
            mode,
            n_train,
            lr,
            epochs,
            seed,
            out,
        } => {
            let g = load_genome(&genome)?;
            let (sm, arch) = match mode {
                NetMode::Joint => (SummaryMode::Joint, SummaryArch::joint_default()),
                NetMode::PerChromosome => (SummaryMode::PerChromosome, SummaryArch::per_chromosome_default()),
            };
            let mut net = SummaryNet::new(&g, sm, arch, seed)?;
            let data = SummaryDataset::from_prior(&g, sm, n_train, seed.wrapping_add(1))?;
            let cfg = SummaryTrainConfig {
                epochs,
                lr,
                seed: seed.wrapping_add(2),
                ..SummaryTrainConfig::default()
            };
            let report = train_summary(&mut net, &data, &cfg)?;
            net.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Infer {
            config,
            genome,
            reference,
            method: m,
            mode,
            rounds,
            n_per_round,
            accept,
            summary,
            jobs,
            seed,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => {
                    let (Some(genome), Some(reference), Some(m)) = (genome.clone(), reference.clone(), m) else {
                        bail!(config_err(
                            "without --config, --genome, --reference and --method are required"
                        ));
                    };
                    ExperimentConfig {
                        genome,
                        reference: ReferenceSource::File { path: reference },
                        method: method(m),
                        mode: mode.map_or(Mode::Joint, net_mode),
                        rounds: 11,
                        n_per_round: 1000,
                        accept: 0.05,
                        summary: Default::default(),
                        snpe: Default::default(),
                        mmd_bandwidth: Bandwidth::Median,
                        density_points: 512,
                        chromosomes: None,
                        jobs: 1,
                        seed: seed.unwrap_or(0),
                    }
                }
            };
            if let Some(g) = genome {
                cfg.genome = g;
            }
            if let Some(r) = reference {
                cfg.reference = ReferenceSource::File { path: r };
            }
            if let Some(m) = m {
                cfg.method = method(m);
            }
            if let Some(m) = mode {
                cfg.mode = net_mode(m);
            }
            if let Some(v) = rounds {
                cfg.rounds = v;
            }
            if let Some(v) = n_per_round {
                cfg.n_per_round = v;
            }
            if let Some(v) = accept {
                cfg.accept = v;
            }
            if let Some(p) = summary {
                cfg.summary.checkpoint = Some(p);
            }
            if let Some(v) = jobs {
                cfg.jobs = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            let res = run_experiment(&cfg, &out)?;
            for t in &res.tasks {
                if let Some(m) = &t.final_round().metrics {
                    println!("{:?}: {}", t.target, serde_json::to_string(m)?);
                }
            }
        }
        Cmd::Evaluate {
            samples,
            theta_ref,
            bandwidth,
            out,
        } => {
            let (s, w) = read_samples_csv(&samples)?;
            let bw = if bandwidth == "median" {
                Bandwidth::Median
            } else {
                Bandwidth::Fixed(
                    bandwidth
                        .parse()
                        .map_err(|_| config_err(format!("bad bandwidth `{bandwidth}`")))?,
                )
            };
            let m = evaluate(&s, Some(&w), &parse_list(&theta_ref)?, bw)?;
            let json = serde_json::to_string_pretty(&m)?;
            match out {
                Some(p) => fs::write(p, json)?,
                None => println!("{json}"),
            }
        }
        Cmd::Report { results } => {
            let cfg: ExperimentConfig = serde_json::from_str(&read_input(&results.join("config.json"))?)
                .map_err(|e| config_err(e.to_string()))?;
            let metrics: serde_json::Value = serde_json::from_str(&read_input(&results.join("metrics.json"))?)?;
            for task in metrics["tasks"].as_array().into_iter().flatten() {
                let theta_ref: Vec<f64> = serde_json::from_value(task["theta_ref"].clone())?;
                let dir = match task["target"]["chrom"].as_u64() {
                    Some(i) => results.join(format!("chrom_{i:02}")),
                    None => results.clone(),
                };
                let mut rounds = Vec::new();
                for r in 0..cfg.rounds {
                    let (samples, weights) = read_samples_csv(&dir.join(format!("samples_round_{r:02}.csv")))?;
                    let metrics = Some(evaluate(&samples, Some(&weights), &theta_ref, cfg.mmd_bandwidth)?);
                    rounds.push(RoundResult {
                        round: r,
                        samples,
                        weights,
                        distances: None,
                        metrics,
                    });
                }
                print!("{}", round_report(cfg.method, &rounds));
            }
        }
        Cmd::Logprob { flow, theta, context } => {
            let f = ConditionalFlow::load(&flow)?;
            let ctx = match context {
                Some(c) => parse_list(&c)?,
                None => {
                    let p = flow.with_file_name("posterior.json");
                    let v: serde_json::Value = serde_json::from_str(&read_input(&p)?)?;
                    serde_json::from_value(v["context"].clone())?
                }
            };
            let thetas = theta
                .iter()
                .map(|t| parse_list(t))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let ctxs = vec![ctx; thetas.len()];
            for (t, lp) in thetas.iter().zip(f.log_prob(&thetas, &ctxs)?) {
                println!("{},{lp}", t.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
            }
        }
    }
    Ok(())
}

fn is_config_error(e: &CoreError) -> bool {
    match e {
        CoreError::Config(_) | CoreError::Load { .. } | CoreError::Json(_) => true,
        CoreError::Stage { source, .. } => is_config_error(source),
        _ => false,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            let config = e
                .chain()
                .any(|c| c.downcast_ref::<CoreError>().is_some_and(is_config_error))
                || e.chain().any(|c| c.downcast_ref::<serde_json::Error>().is_some());
            ExitCode::from(if config { 2 } else { 3 })
        }
    }
}
