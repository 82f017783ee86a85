//! `netident`: identifiability certification and weight recovery for layered
//! feed-forward network systems.

mod demo;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use netident_core::exp_recovery::{self, ExpRecoveryError, ExpRecoveryOptions, NetworkOracle};
use netident_core::identifiability::{
    self, ActivationSpec, CertifyConfig, CoefficientTarget, GaussNewtonOptions, DEFAULT_RANK_TOL,
};
use netident_core::network::{random_weights, LayeredTopology, Network, WeightMatrix};
use netident_core::series::{propagate, propagate_jet, write_jet_csv, write_series_csv};
use netident_core::simulator::{self, ExperimentConfig, Pulse};
use netident_core::Parallelism;

#[derive(Parser)]
#[command(name = "netident", version, about = "Identifiability and weight recovery for layered network systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a network file and print a summary
    Validate {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sink MacLaurin coefficients A_1..A_N as CSV
    Coeffs {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        order: usize,
        /// Also emit gradients with respect to every edge weight
        #[arg(long)]
        jet: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized generic local identifiability certificate
    Certify {
        #[arg(long, conflicts_with = "net", required_unless_present = "net")]
        layers: Option<String>,
        /// Use this network's activation instead of random analytic ones
        #[arg(long)]
        net: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[command(flatten)]
        seed: SeedArg,
        /// Largest number of coefficients tried
        #[arg(long)]
        order: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
        tol: f64,
        #[command(flatten)]
        par: ParArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numerical rank of the coefficient Jacobian at the given weights
    RankAt {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        order: usize,
        #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a pulse experiment and write the `k,node_id,y` trace
    Simulate {
        #[arg(long)]
        net: PathBuf,
        /// Experiment JSON (excited set, pulses, horizon)
        #[arg(long, conflicts_with_all = ["amplitude", "horizon"])]
        config: Option<PathBuf>,
        /// Source pulse amplitude at k = 0
        #[arg(long, default_value_t = 0.1)]
        amplitude: f64,
        /// Defaults to depth + 1
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate A_1..A_N from simulated pulse responses
    FitCoeffs {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        order: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gauss–Newton coefficient matching from a perturbed start
    RecoverNewton {
        #[arg(long)]
        net: PathBuf,
        /// Coefficients matched; defaults to 2|E|
        #[arg(long)]
        order: Option<usize>,
        /// Relative perturbation of the starting weights
        #[arg(long, default_value_t = 0.05)]
        perturb: f64,
        #[command(flatten)]
        seed: SeedArg,
        /// Coefficient target JSON (`coeffs`, optional `weights`); defaults
        /// to the network's own coefficients
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Constructive recovery of an expm1 network with ordered weights
    RecoverExp {
        #[arg(long)]
        net: PathBuf,
        #[arg(long, value_delimiter = ',')]
        x_schedule: Option<Vec<f64>>,
        #[arg(long, default_value_t = exp_recovery::DEFAULT_PRECISION_BITS)]
        precision_bits: usize,
        #[arg(long, default_value_t = exp_recovery::DEFAULT_MAX_PRECISION_BITS)]
        max_precision_bits: usize,
        #[arg(long, default_value_t = exp_recovery::DEFAULT_TOL)]
        tol: f64,
        #[command(flatten)]
        par: ParArg,
        /// CSV of every accepted G evaluation
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reproduce the reference fixtures; fails if any check fails
    Demo,
}

#[derive(Args)]
struct SeedArg {
    #[arg(long, env = "NETIDENT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ParArg {
    /// Disable data parallelism
    #[arg(long)]
    sequential: bool,
}

impl ParArg {
    fn mode(&self) -> Parallelism {
        if self.sequential { Parallelism::Sequential } else { Parallelism::Parallel }
    }
}

/// Domain failure: reported on stderr, exit code 1.
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_net(path: &Path) -> Result<Network, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    Network::from_json(&text).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

/// Writes to `out` atomically (temp file in the same directory, then
/// rename), or to stdout.
fn emit(out: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), Failure> {
    match out {
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)?;
            lock.flush()?;
        }
        Some(path) => {
            let dir = match path.parent() {
                Some(d) if !d.as_os_str().is_empty() => d,
                _ => Path::new("."),
            };
            let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
            write(tmp.as_file_mut())?;
            tmp.as_file_mut().flush()?;
            tmp.persist(path).map_err(|e| Failure(format!("{}: {}", path.display(), e.error)))?;
        }
    }
    Ok(())
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)?;
    emit(out, |w| writeln!(w, "{text}"))
}

fn csv_io(e: impl std::error::Error + Send + Sync + 'static) -> io::Error {
    io::Error::other(e)
}

fn run(command: Command) -> Result<ExitCode, Failure> {
    match command {
        Command::Validate { net, out } => {
            let n = load_net(&net)?;
            let topo = n.topology();
            emit_json(
                out.as_deref(),
                &json!({
                    "valid": true,
                    "layers": topo.sizes(),
                    "edges": topo.edge_count(),
                    "nodes": topo.node_count(),
                    "activation": n.activation().kind(),
                    "ordered_positive": n.weights().is_ordered_positive(),
                    "content_hash": n.content_hash(),
                }),
            )?;
        }
        Command::Coeffs { net, order, jet, out } => {
            let n = load_net(&net)?;
            if jet {
                let s = propagate_jet(&n, order)?;
                emit(out.as_deref(), |w| write_jet_csv(w, &s).map_err(csv_io))?;
            } else {
                let s = propagate(&n, order)?;
                emit(out.as_deref(), |w| write_series_csv(w, &s).map_err(csv_io))?;
            }
        }
        Command::Certify { layers, net, trials, seed, order, tol, par, out } => {
            let (topo, activation) = match (layers, net) {
                (Some(l), _) => (LayeredTopology::parse(&l)?, ActivationSpec::RandomAnalytic),
                (None, Some(p)) => {
                    let n = load_net(&p)?;
                    (n.topology().clone(), ActivationSpec::Fixed(n.activation().clone()))
                }
                (None, None) => unreachable!("clap requires one of --layers / --net"),
            };
            let config = CertifyConfig { trials, seed: seed.seed, max_order: order, tol, parallelism: par.mode(), ..Default::default() };
            let cert = identifiability::certify(&topo, &activation, &config)?;
            emit_json(out.as_deref(), &cert)?;
        }
        Command::RankAt { net, order, tol, out } => {
            let n = load_net(&net)?;
            let info = identifiability::rank_at(&n, order, tol)?;
            emit_json(
                out.as_deref(),
                &json!({
                    "rank": info.rank,
                    "edges": n.topology().edge_count(),
                    "full_rank": info.rank == n.topology().edge_count(),
                    "order": order,
                    "tolerance": info.tolerance,
                    "singular_values": info.singular_values,
                }),
            )?;
        }
        Command::Simulate { net, config, amplitude, horizon, out } => {
            let n = load_net(&net)?;
            let cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Failure(format!("{}: {e}", p.display())))?;
                    serde_json::from_str::<ExperimentConfig>(&text)?
                }
                None => ExperimentConfig {
                    excited: vec![0],
                    pulses: vec![Pulse { node: 0, k: 0, amplitude }],
                    horizon: horizon.unwrap_or(n.topology().depth() + 1),
                    measured: None,
                },
            };
            let trace = simulator::run(&n, &cfg.excitation()?, cfg.horizon)?;
            emit(out.as_deref(), |w| trace.write_csv(w).map_err(csv_io))?;
        }
        Command::FitCoeffs { net, order, out } => {
            let n = load_net(&net)?;
            let samples = simulator::default_fit_grid(order)
                .into_iter()
                .map(|x| simulator::pulse_response(&n, x).map(|y| (x, y)))
                .collect::<Result<Vec<_>, _>>()?;
            let fit = simulator::estimate_coeffs_from_samples(&samples, order)?;
            if fit.ill_conditioned {
                eprintln!("warning: fit condition number {:.3e}", fit.condition_number);
            }
            emit_json(out.as_deref(), &fit)?;
        }
        Command::RecoverNewton { net, order, perturb, seed, target, out } => {
            let n = load_net(&net)?;
            let topo = n.topology();
            let target = match target {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Failure(format!("{}: {e}", p.display())))?;
                    parse_target(&text)?
                }
                None => {
                    let m = order.unwrap_or(2 * topo.edge_count());
                    CoefficientTarget::from_coeffs(propagate(&n, m)?.coeffs().to_vec())
                }
            };
            let init = perturbed(n.weights(), perturb, seed.seed)?;
            let rec = identifiability::coefficient_match_recover(
                topo,
                n.activation(),
                &target,
                &init,
                &GaussNewtonOptions::default(),
            )?;
            let err = rec.weight_matrix().max_relative_error(n.weights());
            emit_json(out.as_deref(), &json!({ "recovery": rec, "max_relative_error": err, "seed": seed.seed }))?;
        }
        Command::RecoverExp { net, x_schedule, precision_bits, max_precision_bits, tol, par, trace_out, out } => {
            let n = load_net(&net)?;
            let opts = ExpRecoveryOptions {
                schedule: x_schedule.unwrap_or_else(exp_recovery::default_schedule),
                precision_bits,
                max_precision_bits,
                tol,
                parallelism: par.mode(),
            };
            let report = match exp_recovery::recover_exp(&NetworkOracle(&n), n.topology(), &opts) {
                Ok(r) => r.with_ground_truth(n.weights()),
                Err(ExpRecoveryError::NotConverged { edge, score, trace }) => {
                    if let Some(p) = out.as_deref() {
                        emit_json(Some(p), &trace)?;
                    }
                    return Err(Failure(format!("weight {edge} did not converge (plateau score {score:.3e})")));
                }
                Err(ExpRecoveryError::OrderingViolationSuspected { reason, report }) => {
                    if let Some(p) = out.as_deref() {
                        emit_json(Some(p), &report.with_ground_truth(n.weights()))?;
                    }
                    return Err(Failure(format!("ordering violation suspected: {reason}")));
                }
                Err(e) => return Err(e.into()),
            };
            if let Some(p) = trace_out.as_deref() {
                emit(Some(p), |w| report.write_traces_csv(w).map_err(csv_io))?;
            }
            emit_json(out.as_deref(), &report)?;
        }
        Command::Demo => {
            return Ok(if demo::run() { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Accepts a `CoefficientTarget`, a coefficient fit report, or a bare list.
fn parse_target(text: &str) -> Result<CoefficientTarget, Failure> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    let v = v.get("target").cloned().unwrap_or(v);
    if let Ok(t) = serde_json::from_value::<CoefficientTarget>(v.clone()) {
        return Ok(t);
    }
    let coeffs: Vec<f64> = match v.get("coeffs") {
        Some(c) => serde_json::from_value(c.clone())?,
        None => serde_json::from_value(v)?,
    };
    Ok(CoefficientTarget::from_coeffs(coeffs))
}

/// Each weight scaled by an independent factor in `(1 - p, 1 + p)`.
fn perturbed(w: &WeightMatrix, p: f64, seed: u64) -> Result<WeightMatrix, Failure> {
    if p == 0.0 {
        return Ok(w.clone());
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Failure(format!("perturbation must lie in [0, 1), got {p}")));
    }
    let factors = random_weights(w.topology(), seed, (1.0 - p, 1.0 + p))?;
    let data = w.as_flat().iter().zip(factors.as_flat()).map(|(a, f)| a * f).collect();
    Ok(WeightMatrix::from_flat(w.topology(), data)?)
}
