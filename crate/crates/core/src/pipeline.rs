//! Experiment orchestration: reference construction, summary pretraining,
//! inference rounds and evaluation, with every artifact written to a
//! results directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::ContactMap;
use crate::error::{CoreError, Result};
use crate::flow::MafConfig;
use crate::genome::{BoxPrior, GenomeSpec};
use crate::hic_io::{load_map, make_reference, save_map, ReferenceMode};
use crate::metrics::{evaluate, Bandwidth, EvalMetrics};
use crate::rng::derive_seed;
use crate::smc_abc::{run_smc_abc, PearsonDistance, SmcConfig, SummaryDistance};
use crate::snpe::{run_snpe, Correction, NpeTrainConfig, SnpeConfig};
use crate::summary::{
    train_summary, SummaryArch, SummaryDataset, SummaryMode, SummaryNet, SummaryTrainConfig, TrainReport,
};
use crate::task::{Target, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    AbcPearson,
    AbcCnn,
    Snpe,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::AbcPearson => "abc-pearson",
            Method::AbcCnn => "abc-cnn",
            Method::Snpe => "snpe",
        }
    }

    pub fn needs_summary(self) -> bool {
        self != Method::AbcPearson
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Joint,
    PerChromosome,
}

impl Mode {
    pub fn summary_mode(self) -> SummaryMode {
        match self {
            Mode::Joint => SummaryMode::Joint,
            Mode::PerChromosome => SummaryMode::PerChromosome,
        }
    }
}

/// Where the observed map comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReferenceSource {
    /// A stored map directory; `theta_ref` is taken from its sidecar.
    File { path: PathBuf },
    /// A map simulated at `theta` with a fixed seed.
    Synthetic {
        theta: Vec<f64>,
        seed: u64,
        #[serde(default = "raw_mode")]
        mode: ReferenceMode,
    },
}

fn raw_mode() -> ReferenceMode {
    ReferenceMode::Raw
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummaryOptions {
    pub n_train: usize,
    pub train: SummaryTrainConfig,
    /// Architecture override; the mode default otherwise.
    pub arch: Option<SummaryArch>,
    /// Pretrained net to load instead of training one.
    pub checkpoint: Option<PathBuf>,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        Self {
            n_train: 5000,
            train: SummaryTrainConfig::default(),
            arch: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnpeOptions {
    pub flow: MafConfig,
    pub train: NpeTrainConfig,
    pub correction: Correction,
    pub reuse_rounds: bool,
    pub n_posterior: usize,
}

impl Default for SnpeOptions {
    fn default() -> Self {
        let c = SnpeConfig::new(0);
        Self {
            flow: c.flow,
            train: c.train,
            correction: c.correction,
            reuse_rounds: c.reuse_rounds,
            n_posterior: c.n_posterior,
        }
    }
}

fn default_rounds() -> usize {
    11
}
fn default_n() -> usize {
    1000
}
fn default_accept() -> f64 {
    0.05
}
fn default_points() -> usize {
    512
}
fn default_jobs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub genome: PathBuf,
    pub reference: ReferenceSource,
    pub method: Method,
    pub mode: Mode,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_n")]
    pub n_per_round: usize,
    #[serde(default = "default_accept")]
    pub accept: f64,
    #[serde(default)]
    pub summary: SummaryOptions,
    #[serde(default)]
    pub snpe: SnpeOptions,
    #[serde(default)]
    pub mmd_bandwidth: Bandwidth,
    #[serde(default = "default_points")]
    pub density_points: usize,
    /// Chromosomes to infer in per-chromosome mode; all when absent.
    #[serde(default)]
    pub chromosomes: Option<Vec<usize>>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::Load {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.genome);
        if let ReferenceSource::File { path } = &mut cfg.reference {
            fix(path);
        }
        if let Some(p) = &mut cfg.summary.checkpoint {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.into()));
        if self.rounds == 0 {
            return bad("rounds must be positive");
        }
        if self.n_per_round == 0 {
            return bad("n_per_round must be positive");
        }
        if self.density_points < 2 {
            return bad("density_points must be at least 2");
        }
        if self.jobs == 0 {
            return bad("jobs must be positive");
        }
        if self.method != Method::Snpe {
            crate::smc_abc::kept_count(self.n_per_round, self.accept)?;
        }
        Ok(())
    }
}

/// Samples of one round with their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundResult {
    pub round: usize,
    pub samples: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// ABC distances of the kept particles.
    pub distances: Option<Vec<f64>>,
    pub metrics: Option<EvalMetrics>,
}

#[derive(Clone, Debug)]
pub struct TaskResult {
    pub target: Target,
    pub theta_ref: Option<Vec<f64>>,
    pub rounds: Vec<RoundResult>,
    pub dir: PathBuf,
}

impl TaskResult {
    pub fn final_round(&self) -> &RoundResult {
        self.rounds.last().expect("at least one round")
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub tasks: Vec<TaskResult>,
    pub summary_report: Option<TrainReport>,
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct RoundMetrics<'a> {
    round: usize,
    #[serde(flatten)]
    metrics: &'a EvalMetrics,
}

#[derive(Serialize)]
struct TaskMetrics<'a> {
    target: Target,
    theta_ref: &'a [f64],
    rounds: Vec<RoundMetrics<'a>>,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    method: Method,
    mode: Mode,
    resolution_bp: u64,
    seed: u64,
    tasks: Vec<TaskMetrics<'a>>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| CoreError::Stage {
        stage: name.into(),
        source: Box::new(e),
    })
}

const TAG_SUMMARY: u64 = 0x5049_5045_0001;
const TAG_TASK: u64 = 0x5049_5045_0100;

/// The reference map and, when known, the true centromeres.
pub fn build_reference(genome: &GenomeSpec, src: &ReferenceSource) -> Result<(ContactMap, Option<Vec<f64>>)> {
    match src {
        ReferenceSource::File { path } => {
            let (map, meta) = load_map(path, genome)?;
            Ok((map, meta.theta_ref))
        }
        ReferenceSource::Synthetic { theta, seed, mode } => {
            let (map, _) = make_reference(genome, theta, *seed, *mode)?;
            Ok((map, Some(theta.clone())))
        }
    }
}

/// Loads or trains the summary net an experiment needs.
pub fn prepare_summary(genome: &GenomeSpec, cfg: &ExperimentConfig) -> Result<(SummaryNet, Option<TrainReport>)> {
    let mode = cfg.mode.summary_mode();
    if let Some(path) = &cfg.summary.checkpoint {
        let net = SummaryNet::load(path)?;
        if net.genome != *genome || net.mode != mode {
            return Err(CoreError::Config(format!(
                "summary checkpoint {} was trained for another genome or mode",
                path.display()
            )));
        }
        return Ok((net, None));
    }
    let seed = derive_seed(cfg.seed, TAG_SUMMARY);
    let arch = cfg.summary.arch.clone().unwrap_or_else(|| match mode {
        SummaryMode::Joint => SummaryArch::joint_default(),
        SummaryMode::PerChromosome => SummaryArch::per_chromosome_default(),
    });
    let mut net = SummaryNet::new(genome, mode, arch, seed)?;
    let data = SummaryDataset::from_prior(genome, mode, cfg.summary.n_train, derive_seed(seed, 1))?;
    let mut tc = cfg.summary.train.clone();
    tc.seed = derive_seed(seed, 2);
    let report = train_summary(&mut net, &data, &tc)?;
    Ok((net, Some(report)))
}

/// Inference rounds for one task.
pub fn infer_task(
    task: &Task,
    reference: &ContactMap,
    net: Option<&SummaryNet>,
    cfg: &ExperimentConfig,
    seed: u64,
    dir: Option<&Path>,
) -> Result<Vec<RoundResult>> {
    let obs = task.observe(reference)?;
    let prior = task.prior();
    let smc = SmcConfig {
        rounds: cfg.rounds,
        n_per_round: cfg.n_per_round,
        accept: cfg.accept,
        sigma: task.genome.resolution() as f64,
        seed,
    };
    let need_net = || net.ok_or_else(|| CoreError::Config(format!("{} needs a summary net", cfg.method.name())));
    let from_pops = |pops: Vec<crate::smc_abc::Population>| {
        pops.into_iter()
            .map(|p| RoundResult {
                round: p.round,
                samples: p.particles,
                weights: p.weights,
                distances: Some(p.distances),
                metrics: None,
            })
            .collect()
    };
    Ok(match cfg.method {
        Method::AbcPearson => {
            let d = PearsonDistance {
                task: task.clone(),
                reference: obs,
            };
            from_pops(run_smc_abc(&prior, &d, &smc)?)
        }
        Method::AbcCnn => {
            let d = SummaryDistance::new(task.clone(), need_net()?, &obs)?;
            from_pops(run_smc_abc(&prior, &d, &smc)?)
        }
        Method::Snpe => {
            let sc = SnpeConfig {
                rounds: cfg.rounds,
                n_per_round: cfg.n_per_round,
                flow: cfg.snpe.flow.clone(),
                train: cfg.snpe.train.clone(),
                correction: cfg.snpe.correction,
                reuse_rounds: cfg.snpe.reuse_rounds,
                n_posterior: cfg.snpe.n_posterior,
                seed,
            };
            let est = run_snpe(task, need_net()?, &obs, &sc)?;
            if let (Some(dir), Some(last)) = (dir, est.last()) {
                last.flow.save(&dir.join("flow.ckpt"))?;
                let post = serde_json::json!({
                    "context": last.context,
                    "prior": last.prior,
                });
                fs::write(dir.join("posterior.json"), serde_json::to_string_pretty(&post)?)?;
            }
            est.into_iter()
                .map(|e| {
                    let n = e.samples.len();
                    RoundResult {
                        round: e.round,
                        samples: e.samples,
                        weights: vec![1.0 / n as f64; n],
                        distances: None,
                        metrics: None,
                    }
                })
                .collect()
        }
    })
}

/// One estimated marginal density on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub dim: usize,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// Weighted Gaussian KDE of every marginal on `points` grid points spanning
/// the prior box. Bandwidth follows Silverman's rule `1.06 sd n_eff^(-1/5)`
/// with a floor of two grid steps; mass leaking past the bounds is
/// reflected back and the curve is renormalized by the trapezoid rule.
pub fn export_density(samples: &[Vec<f64>], weights: &[f64], prior: &BoxPrior, points: usize) -> Result<Vec<Density>> {
    if samples.is_empty() || samples.len() != weights.len() {
        return Err(CoreError::Domain(
            "density needs matching non-empty samples and weights".into(),
        ));
    }
    if points < 2 {
        return Err(CoreError::Domain("density grid needs at least 2 points".into()));
    }
    let ws: f64 = weights.iter().sum();
    let w: Vec<f64> = weights.iter().map(|v| v / ws).collect();
    let n_eff = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    (0..prior.dim())
        .map(|d| {
            let (lo, hi) = (prior.lower[d], prior.upper[d]);
            let step = (hi - lo) / (points - 1) as f64;
            let grid: Vec<f64> = (0..points).map(|k| lo + k as f64 * step).collect();
            let mean: f64 = samples.iter().zip(&w).map(|(s, w)| w * s[d]).sum();
            let var: f64 = samples.iter().zip(&w).map(|(s, w)| w * (s[d] - mean).powi(2)).sum();
            let h = (1.06 * var.sqrt() * n_eff.powf(-0.2)).max(2.0 * step);
            let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
            let phi = |z: f64| norm * (-0.5 * z * z).exp();
            let mut dens: Vec<f64> = grid
                .iter()
                .map(|x| {
                    samples
                        .iter()
                        .zip(&w)
                        .map(|(s, w)| {
                            let v = s[d];
                            w * (phi((x - v) / h) + phi((x - (2.0 * lo - v)) / h) + phi((x - (2.0 * hi - v)) / h))
                        })
                        .sum()
                })
                .collect();
            let area = trapezoid(&grid, &dens);
            if area > 0.0 {
                dens.iter_mut().for_each(|v| *v /= area);
            }
            Ok(Density {
                dim: d,
                bandwidth: h,
                grid,
                density: dens,
            })
        })
        .collect()
}

pub fn trapezoid_integral(d: &Density) -> f64 {
    trapezoid(&d.grid, &d.density)
}

/// Per-round metric table: `round,method,euclidean_mean,mmd,w2,err_0..`.
pub fn round_report(method: Method, rounds: &[RoundResult]) -> String {
    let dim = rounds
        .iter()
        .find_map(|r| r.metrics.as_ref().map(|m| m.per_dim_abs_error.len()))
        .unwrap_or(0);
    let mut s = String::from("round,method,euclidean_mean,mmd,w2");
    for d in 0..dim {
        write!(s, ",err_{d}").unwrap();
    }
    s.push('\n');
    for r in rounds {
        if let Some(m) = &r.metrics {
            write!(
                s,
                "{},{},{},{},{}",
                r.round,
                method.name(),
                m.euclidean_mean,
                m.mmd,
                m.w2
            )
            .unwrap();
            for e in &m.per_dim_abs_error {
                write!(s, ",{e}").unwrap();
            }
            s.push('\n');
        }
    }
    s
}

/// Samples as CSV with `theta_*`, `weight` and `distance` columns.
pub fn samples_csv(r: &RoundResult) -> String {
    let dim = r.samples.first().map_or(0, Vec::len);
    let mut s = String::new();
    for d in 0..dim {
        write!(s, "theta_{d},").unwrap();
    }
    s.push_str("weight,distance\n");
    for (k, t) in r.samples.iter().enumerate() {
        for v in t {
            write!(s, "{v},").unwrap();
        }
        write!(s, "{}", r.weights[k]).unwrap();
        match &r.distances {
            Some(d) => writeln!(s, ",{}", d[k]).unwrap(),
            None => s.push_str(",\n"),
        }
    }
    s
}

/// Reads samples written by [`samples_csv`]; weights default to uniform.
pub fn read_samples_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let err = |d: String| CoreError::Load {
        path: path.to_path_buf(),
        detail: d,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| err("empty file".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let theta_cols: Vec<usize> = (0..header.len()).filter(|&k| header[k].starts_with("theta")).collect();
    if theta_cols.is_empty() {
        return Err(err("no theta columns".into()));
    }
    let wcol = header.iter().position(|h| *h == "weight");
    let mut samples = Vec::new();
    let mut weights = Vec::new();
    for (ln, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |k: usize| -> Result<f64> {
            cells
                .get(k)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| err(format!("row {} column {k} is not a number", ln + 1)))
        };
        samples.push(theta_cols.iter().map(|&k| num(k)).collect::<Result<Vec<_>>>()?);
        weights.push(match wcol {
            Some(k) => num(k)?,
            None => 1.0,
        });
    }
    if samples.is_empty() {
        return Err(err("no samples".into()));
    }
    Ok((samples, weights))
}

fn task_dir(out: &Path, target: Target) -> PathBuf {
    match target {
        Target::Joint => out.to_path_buf(),
        Target::Chromosome(i) => out.join(format!("chrom_{i:02}")),
    }
}

fn write_task(dir: &Path, method: Method, rounds: &[RoundResult], prior: &BoxPrior, points: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in rounds {
        fs::write(dir.join(format!("samples_round_{:02}.csv", r.round)), samples_csv(r))?;
    }
    fs::write(dir.join("report.csv"), round_report(method, rounds))?;
    if let Some(last) = rounds.last() {
        let mut s = String::from("dim,x,density\n");
        for d in export_density(&last.samples, &last.weights, prior, points)? {
            for (x, y) in d.grid.iter().zip(&d.density) {
                writeln!(s, "{},{x},{y}", d.dim).unwrap();
            }
        }
        fs::write(dir.join("density.csv"), s)?;
    }
    Ok(())
}

/// Runs a full experiment and writes its results under `out_dir`:
/// `config.json`, `metrics.json`, per-task `samples_round_*.csv`,
/// `report.csv`, `density.csv`, and checkpoints of trained networks.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResult> {
    stage("config", cfg.validate())?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let genome = stage("genome", GenomeSpec::load(&cfg.genome))?;
    let (reference, theta_ref) = stage("reference", build_reference(&genome, &cfg.reference))?;
    let mut meta = crate::hic_io::MapMeta::for_map(&reference);
    meta.theta_ref = theta_ref.clone();
    stage("reference", save_map(&out_dir.join("reference"), &reference, &meta))?;

    let (net, summary_report) = if cfg.method.needs_summary() {
        let (net, report) = stage("train-summary", prepare_summary(&genome, cfg))?;
        stage("train-summary", net.save(&out_dir.join("summary.ckpt")))?;
        if let Some(r) = &report {
            fs::write(out_dir.join("summary_training.json"), serde_json::to_string_pretty(r)?)?;
        }
        (Some(net), report)
    } else {
        (None, None)
    };

    let targets: Vec<Target> = match cfg.mode {
        Mode::Joint => vec![Target::Joint],
        Mode::PerChromosome => {
            let all: Vec<usize> = (0..genome.num_chromosomes()).collect();
            let list = cfg.chromosomes.clone().unwrap_or(all);
            if let Some(bad) = list.iter().find(|&&i| i >= genome.num_chromosomes()) {
                return Err(CoreError::Config(format!("chromosome index {bad} out of range")));
            }
            list.into_iter().map(Target::Chromosome).collect()
        }
    };

    let run_one = |target: Target| -> Result<TaskResult> {
        let task = Task::new(genome.clone(), target)?;
        let seed = derive_seed(
            cfg.seed,
            TAG_TASK
                + match target {
                    Target::Joint => 0,
                    Target::Chromosome(i) => 1 + i as u64,
                },
        );
        let dir = task_dir(out_dir, target);
        fs::create_dir_all(&dir)?;
        let mut rounds = stage(
            &format!("infer {}", cfg.method.name()),
            infer_task(&task, &reference, net.as_ref(), cfg, seed, Some(&dir)),
        )?;
        let tref = theta_ref.as_ref().map(|t| task.project(t));
        if let Some(t) = &tref {
            for r in &mut rounds {
                r.metrics = Some(stage(
                    "evaluate",
                    evaluate(&r.samples, Some(&r.weights), t, cfg.mmd_bandwidth),
                )?);
            }
        }
        stage(
            "export",
            write_task(&dir, cfg.method, &rounds, &task.prior(), cfg.density_points),
        )?;
        Ok(TaskResult {
            target,
            theta_ref: tref,
            rounds,
            dir,
        })
    };

    let tasks: Vec<TaskResult> = if targets.len() == 1 {
        vec![run_one(targets[0])?]
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| CoreError::Runtime(e.to_string()))?;
        pool.install(|| targets.par_iter().map(|&t| run_one(t)).collect::<Result<Vec<_>>>())?
    };

    let metrics = MetricsFile {
        method: cfg.method,
        mode: cfg.mode,
        resolution_bp: genome.resolution(),
        seed: cfg.seed,
        tasks: tasks
            .iter()
            .filter_map(|t| {
                let tref = t.theta_ref.as_deref()?;
                Some(TaskMetrics {
                    target: t.target,
                    theta_ref: tref,
                    rounds: t
                        .rounds
                        .iter()
                        .filter_map(|r| {
                            Some(RoundMetrics {
                                round: r.round,
                                metrics: r.metrics.as_ref()?,
                            })
                        })
                        .collect(),
                })
            })
            .collect(),
    };
    fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    Ok(ExperimentResult {
        tasks,
        summary_report,
        out_dir: out_dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn density_of_point_mass() {
        let prior = BoxPrior::new(vec![1.0], vec![1000.0]);
        let d = &export_density(&vec![vec![400.0]; 20], &[1.0; 20], &prior, 512).unwrap()[0];
        assert!((trapezoid_integral(d) - 1.0).abs() < 1e-12);
        let h = d.bandwidth;
        let outside: f64 = d
            .grid
            .iter()
            .zip(&d.density)
            .filter(|(x, _)| (**x - 400.0).abs() > 3.0 * h)
            .map(|(_, y)| *y)
            .fold(0.0, f64::max);
        let peak = d.density.iter().copied().fold(0.0, f64::max);
        assert!(outside < 0.02 * peak);
    }

    #[test]
    fn density_of_uniform_is_flat() {
        let prior = BoxPrior::new(vec![1.0], vec![230217.0]);
        let mut rng = seeded(8);
        let s: Vec<Vec<f64>> = (0..10_000).map(|_| prior.sample(&mut rng)).collect();
        let d = &export_density(&s, &vec![1.0; s.len()], &prior, 512).unwrap()[0];
        let mx = d.density.iter().copied().fold(f64::MIN, f64::max);
        let mn = d.density.iter().copied().fold(f64::MAX, f64::min);
        assert!(mx / mn < 2.0, "max/min = {}", mx / mn);
    }

    #[test]
    fn samples_csv_round_trip() {
        let r = RoundResult {
            round: 0,
            samples: vec![vec![1.5, 2.0], vec![3.25, 4.0]],
            weights: vec![0.25, 0.75],
            distances: Some(vec![0.1, 0.2]),
            metrics: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(&p, samples_csv(&r)).unwrap();
        let (s, w) = read_samples_csv(&p).unwrap();
        assert_eq!(s, r.samples);
        assert_eq!(w, r.weights);
    }
}
