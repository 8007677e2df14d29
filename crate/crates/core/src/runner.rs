//! Task execution behind the CLI: seed and launch training runs, sweeps,
//! constant fits, controller solves and physical-layer checks, and persist
//! their artifacts.
//!
//! Time series go to CSV (one row per round), scalar results to JSON. Every
//! artifact carries the configuration hash and root seed, and reruns with
//! the same configuration and seed produce byte-identical files. Sweep cells
//! are independent and run in parallel; output ordering is canonical (sorted
//! by cell key), so the worker count cannot change the artifact.

use crate::channel::{self, ChannelMode, PowerPolicy};
use crate::config::{ExperimentConfig, TaskKind};
use crate::convergence::{self, RoundModelConstants, RoundSample};
use crate::error::{Error, Result};
use crate::fl::{self, FlConfig, Scheme, TrainSetup, Trainer};
use crate::jcp::{self, JcpProblem};
use crate::learnkit::{self, ClientShard, Dataset, GradientVector};
use crate::modem;
use crate::quantizer::{self, QuantScale, ScaleRegime};
use crate::rng::{self, SeedTree};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Extra knobs passed from the command line.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Dump received constellation samples (symbol mode) to this CSV.
    pub constellation_csv: Option<PathBuf>,
}

/// What a run produced and whether everything it attempted converged.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub all_converged: bool,
    pub artifacts: Vec<PathBuf>,
}

pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    match cfg.task {
        TaskKind::Train => run_train(cfg, opts),
        TaskKind::Sweep => run_sweep(cfg),
        TaskKind::Fit => run_fit(cfg),
        TaskKind::Jcp => run_jcp(cfg),
        TaskKind::PhyCheck => run_phy_check(cfg, opts),
    }
}

fn artifact_header(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={:016x} seed={}\n", cfg.config_hash(), cfg.seed)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Materialize datasets and shards for a training-style task.
struct DataBundle {
    train: Dataset,
    test: Dataset,
    shards: Vec<ClientShard>,
}

fn build_data(cfg: &ExperimentConfig) -> Result<DataBundle> {
    let train = learnkit::generate_synthetic(&cfg.train_spec())?;
    let test = learnkit::generate_synthetic(&cfg.test_spec())?;
    let shards = learnkit::partition_non_iid(
        &train,
        cfg.fl.clients,
        cfg.data.non_iid_level,
        cfg.data.batch_size,
        cfg.seed,
    )?;
    Ok(DataBundle { train, test, shards })
}

fn setup_from<'a>(cfg: &ExperimentConfig, data: &'a DataBundle) -> TrainSetup<'a> {
    TrainSetup {
        train: &data.train,
        test: Some(&data.test),
        shards: &data.shards,
        arch: cfg.architecture(),
        channel: cfg.channel_config(),
        comm: cfg.comm_params(),
        comp: cfg.comp_params(),
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    config_hash: String,
    seed: u64,
    scheme: Scheme,
    rounds: usize,
    converged: bool,
    final_loss: f64,
    final_accuracy: f64,
    total_energy_j: f64,
    total_comm_units: f64,
}

fn run_train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let data = build_data(cfg)?;
    let setup = setup_from(cfg, &data);
    let mut trainer = Trainer::new(cfg.fl_config(), &setup)?;
    let capture =
        opts.constellation_csv.is_some() && cfg.channel.mode == ChannelMode::Symbol;
    trainer.capture_constellation(capture);
    let out = trainer.run()?;

    let mut csv = artifact_header(cfg);
    csv.push_str("round,loss,accuracy,comm_units,energy_j\n");
    for r in &out.trace.rows {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.round, r.train_loss, r.test_accuracy, r.comm_units, r.energy_j
        )
        .expect("string write");
    }
    let trace_path = cfg.out_dir.join("trace.csv");
    write_text(&trace_path, &csv)?;

    let last = out.trace.rows.last();
    let summary = TrainSummary {
        config_hash: format!("{:016x}", cfg.config_hash()),
        seed: cfg.seed,
        scheme: cfg.fl.scheme,
        rounds: out.trace.rows.len(),
        converged: out.trace.converged,
        final_loss: last.map(|r| r.train_loss).unwrap_or(f64::NAN),
        final_accuracy: last.map(|r| r.test_accuracy).unwrap_or(f64::NAN),
        total_energy_j: out.trace.total_energy(),
        total_comm_units: out.trace.total_comm_units(),
    };
    let summary_path = cfg.out_dir.join("summary.json");
    write_text(
        &summary_path,
        &serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?,
    )?;

    let mut artifacts = vec![trace_path, summary_path];
    if capture {
        let path = opts.constellation_csv.clone().expect("checked above");
        let mut dump = artifact_header(cfg);
        dump.push_str("round,coord,i,q\n");
        for (round, p) in &out.constellation {
            writeln!(dump, "{},{},{},{}", round, p.coord, p.i, p.q).expect("string write");
        }
        write_text(&path, &dump)?;
        artifacts.push(path);
    }

    Ok(RunReport {
        all_converged: out.trace.converged,
        artifacts,
    })
}

/// One sweep observation.
#[derive(Debug, Clone, Copy)]
struct SweepCell {
    local_iters: u32,
    tx_prob: f64,
    seed: u64,
    rounds: Option<u32>,
}

fn sweep_cells(cfg: &ExperimentConfig, data: &DataBundle) -> Result<Vec<SweepCell>> {
    let tree = SeedTree::new(cfg.seed);
    let mut keys = Vec::new();
    for (hi, &h) in cfg.sweep.local_iters.iter().enumerate() {
        for (pi, &p) in cfg.sweep.tx_probs.iter().enumerate() {
            for rep in 0..cfg.sweep.seeds_per_cell {
                keys.push((h, p, tree.key(&[900, hi as u64, pi as u64, rep as u64])));
            }
        }
    }
    let results: Vec<Result<SweepCell>> = keys
        .par_iter()
        .map(|&(h, p, cell_seed)| {
            let mut fl_cfg: FlConfig = cfg.fl_config();
            fl_cfg.scheme = Scheme::Esoafl;
            fl_cfg.local_iters = h;
            fl_cfg.tx_prob = p;
            fl_cfg.seed = cell_seed;
            let setup = setup_from(cfg, data);
            let out = fl::run_training(&fl_cfg, &setup)?;
            Ok(SweepCell {
                local_iters: h,
                tx_prob: p,
                seed: cell_seed,
                rounds: out.trace.rounds_to_target(),
            })
        })
        .collect();
    let mut cells = results.into_iter().collect::<Result<Vec<_>>>()?;
    cells.sort_by(|a, b| {
        (a.local_iters, a.tx_prob, a.seed)
            .partial_cmp(&(b.local_iters, b.tx_prob, b.seed))
            .expect("finite keys")
    });
    Ok(cells)
}

fn run_sweep(cfg: &ExperimentConfig) -> Result<RunReport> {
    let data = build_data(cfg)?;
    let cells = sweep_cells(cfg, &data)?;
    let all_converged = cells.iter().all(|c| c.rounds.is_some());

    let mut csv = artifact_header(cfg);
    csv.push_str("H,p_b,R_observed,seed,eps\n");
    for c in cells.iter().filter(|c| c.rounds.is_some()) {
        writeln!(
            csv,
            "{},{},{},{},{}",
            c.local_iters,
            c.tx_prob,
            c.rounds.expect("filtered"),
            c.seed,
            cfg.fl.target_loss
        )
        .expect("string write");
    }
    let path = cfg.out_dir.join("sweep.csv");
    write_text(&path, &csv)?;
    Ok(RunReport {
        all_converged,
        artifacts: vec![path],
    })
}

/// Parse a sweep CSV (comment lines and the header are skipped).
pub fn read_sweep_csv(path: &Path) -> Result<Vec<RoundSample>> {
    let text = std::fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('H') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Parse(format!("bad sweep row: `{line}`")));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad number `{s}`: {e}")))
        };
        samples.push(RoundSample {
            local_iters: parse(fields[0])?,
            tx_prob: parse(fields[1])?,
            rounds_observed: parse(fields[2])?,
        });
    }
    Ok(samples)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConstantsArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub q: f64,
    pub residual_norm: f64,
    pub samples: usize,
}

/// Empirical quantizer constant for the configured payload width and model
/// dimension.
pub fn estimate_quant_constant(cfg: &ExperimentConfig) -> Result<f64> {
    if let Some(q) = cfg.fit.quant_q {
        return Ok(q);
    }
    let mut rng = SeedTree::new(cfg.seed).rng(&[rng::stream::QUANT, 999]);
    let regime = ScaleRegime {
        dim: cfg.architecture().dim(),
        clients: cfg.fl.clients,
    };
    let (q, _) = quantizer::estimate_q(cfg.fl.bits, regime, 20_000, &mut rng)?;
    Ok(q)
}

fn run_fit(cfg: &ExperimentConfig) -> Result<RunReport> {
    let samples_path = cfg
        .fit
        .samples_csv
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("sweep.csv"));
    let samples = read_sweep_csv(&samples_path)?;
    let q = estimate_quant_constant(cfg)?;
    let fit = convergence::fit_constants(&samples, q)?;

    let artifact = ConstantsArtifact {
        config_hash: format!("{:016x}", cfg.config_hash()),
        seed: cfg.seed,
        a: fit.constants.a,
        b: fit.constants.b,
        c: fit.constants.c,
        q: fit.constants.q,
        residual_norm: fit.residual_norm,
        samples: samples.len(),
    };
    let path = cfg.out_dir.join("constants.json");
    write_text(
        &path,
        &serde_json::to_string_pretty(&artifact).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Ok(RunReport {
        all_converged: true,
        artifacts: vec![path],
    })
}

#[derive(Debug, Serialize)]
struct JcpArtifact {
    config_hash: String,
    seed: u64,
    tx_prob: f64,
    local_iters: u32,
    objective: f64,
    iterations: usize,
    converged: bool,
}

/// Build the controller problem from fitted constants plus the configured
/// link and compute models.
pub fn jcp_problem_from(cfg: &ExperimentConfig, constants: RoundModelConstants) -> JcpProblem {
    let comm = cfg.comm_params();
    JcpProblem {
        constants,
        rho: cfg.channel.rho,
        rate: cfg.channel.rate,
        comm_time: crate::energy::comm_time(comm.model_dim, comm.parallel_symbols, comm.symbol_time),
        comp_energy: crate::energy::comp_energy(&cfg.comp_params()),
        max_tx_prob: cfg.channel.max_tx_prob,
        min_local_iters: cfg.jcp.min_local_iters,
        max_local_iters: cfg.jcp.max_local_iters,
    }
}

fn run_jcp(cfg: &ExperimentConfig) -> Result<RunReport> {
    let constants_path = cfg
        .jcp
        .constants_json
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("constants.json"));
    let text = std::fs::read_to_string(&constants_path)?;
    let constants: ConstantsArtifact =
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    let problem = jcp_problem_from(
        cfg,
        RoundModelConstants {
            a: constants.a,
            b: constants.b,
            c: constants.c,
            q: constants.q,
        },
    );
    let solution = jcp::solve_jcp(
        &problem,
        cfg.jcp.initial_step,
        cfg.jcp.step_decay,
        cfg.jcp.move_tol,
    )?;

    let artifact = JcpArtifact {
        config_hash: format!("{:016x}", cfg.config_hash()),
        seed: cfg.seed,
        tx_prob: solution.tx_prob,
        local_iters: solution.local_iters,
        objective: solution.objective,
        iterations: solution.iterations,
        converged: solution.converged,
    };
    let path = cfg.out_dir.join("jcp.json");
    write_text(
        &path,
        &serde_json::to_string_pretty(&artifact).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Ok(RunReport {
        all_converged: solution.converged,
        artifacts: vec![path],
    })
}

#[derive(Debug, Serialize)]
struct PhyCheck {
    name: &'static str,
    pass: bool,
    detail: String,
}

#[derive(Debug, Serialize)]
struct PhyCheckArtifact {
    config_hash: String,
    seed: u64,
    all_pass: bool,
    checks: Vec<PhyCheck>,
}

/// Reduced-size versions of the channel and modem invariants, runnable from
/// the CLI as a quick self-test of the physical layer.
fn run_phy_check(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let tree = SeedTree::new(cfg.seed);
    let mut channel_cfg = cfg.channel_config();
    channel_cfg.mode = ChannelMode::Statistical;
    let tx_prob = cfg.fl.tx_prob.min(cfg.channel.max_tx_prob);
    let policy = PowerPolicy::from_probability(tx_prob, &channel_cfg)?;
    let clients = cfg.fl.clients.max(2);
    let dim = 4usize;
    let trials = 20_000u64;

    let mut checks = Vec::new();

    // fixed random inputs
    let mut data_rng = tree.rng(&[1]);
    let inputs: Vec<GradientVector> = (0..clients)
        .map(|_| {
            GradientVector(
                (0..dim)
                    .map(|_| rand::Rng::random_range(&mut data_rng, -1.0..1.0))
                    .collect(),
            )
        })
        .collect();
    let truth: Vec<f64> = (0..dim)
        .map(|j| inputs.iter().map(|x| x.as_slice()[j]).sum::<f64>() / clients as f64)
        .collect();
    let predicted = channel::air_variance(&inputs, tx_prob, &channel_cfg)?;

    let mut mean = vec![0.0; dim];
    let mut mean_sq = vec![0.0; dim];
    for t in 0..trials {
        let out = channel::air_aggregate(&inputs, &channel_cfg, &policy, tree.key(&[2, t]))?;
        for (j, v) in out.as_slice().iter().enumerate() {
            mean[j] += v;
            mean_sq[j] += v * v;
        }
    }
    let mut mean_ok = true;
    let mut var_ok = true;
    let mut worst_z: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for j in 0..dim {
        let m = mean[j] / trials as f64;
        let var = mean_sq[j] / trials as f64 - m * m;
        let se = (var / trials as f64).sqrt();
        let z = (m - truth[j]).abs() / se;
        worst_z = worst_z.max(z);
        if z > 4.0 {
            mean_ok = false;
        }
        let rel = (var - predicted[j]).abs() / predicted[j];
        worst_var = worst_var.max(rel);
        if rel > 0.10 {
            var_ok = false;
        }
    }
    checks.push(PhyCheck {
        name: "aircomp_unbiased",
        pass: mean_ok,
        detail: format!("worst z-score {worst_z:.2} over {dim} coordinates"),
    });
    checks.push(PhyCheck {
        name: "aircomp_variance_law",
        pass: var_ok,
        detail: format!("worst relative deviation {worst_var:.4}"),
    });

    // selection frequency
    let g_th = policy.gain_threshold();
    let mut rng = tree.rng(&[3]);
    let n = 200_000;
    let selected = (0..n)
        .filter(|_| channel::draw_gain(channel_cfg.rate, &mut rng) >= g_th)
        .count();
    let freq = selected as f64 / n as f64;
    let se = (tx_prob * (1.0 - tx_prob) / n as f64).sqrt();
    checks.push(PhyCheck {
        name: "selection_frequency",
        pass: (freq - tx_prob).abs() <= 4.0 * se,
        detail: format!("frequency {freq:.4} vs probability {tx_prob:.4}"),
    });

    // average transmit power within budget at the maximum probability
    let policy_max = PowerPolicy::from_probability(cfg.channel.max_tx_prob, &channel_cfg)?;
    let mut rng = tree.rng(&[4]);
    let mut total = 0.0;
    let n = 500_000;
    for _ in 0..n {
        let h = channel::draw_coefficient(channel_cfg.rate, &mut rng);
        total += channel::tx_scale(h, policy_max.gain_threshold(), channel_cfg.rho).norm_sqr();
    }
    let avg_power = total / n as f64;
    checks.push(PhyCheck {
        name: "power_budget",
        pass: avg_power <= channel_cfg.power_budget * 1.05,
        detail: format!(
            "average Tx power {avg_power:.4} W vs budget {:.4} W",
            channel_cfg.power_budget
        ),
    });

    // symbol path: noise-free decode exactness on a random payload subset
    let mut symbol_cfg = channel_cfg;
    symbol_cfg.mode = ChannelMode::Symbol;
    symbol_cfg.noise_var = 0.0;
    let bits = cfg.fl.bits.min(3);
    let scale = QuantScale::new(1.0, bits)?;
    let mut rng = tree.rng(&[5]);
    let mut exact_ok = true;
    let mut worst_err: f64 = 0.0;
    for _ in 0..50 {
        let payloads: Vec<quantizer::QuantizedUpdate> = (0..3)
            .map(|_| quantizer::QuantizedUpdate {
                levels: (0..dim)
                    .map(|_| rand::Rng::random_range(&mut rng, 0..(1u16 << bits)))
                    .collect(),
                scale,
            })
            .collect();
        let expected: Vec<f64> = (0..dim)
            .map(|j| {
                payloads
                    .iter()
                    .map(|p| scale.level_value(p.levels[j]))
                    .sum::<f64>()
                    / payloads.len() as f64
            })
            .collect();
        let out = modem::symbol_aggregate(
            &payloads,
            &symbol_cfg,
            &PowerPolicy::full_selection(),
            16,
            tree.key(&[6, rand::Rng::random::<u64>(&mut rng)]),
            None,
        )?;
        for (got, want) in out.as_slice().iter().zip(&expected) {
            let err = (got - want).abs();
            worst_err = worst_err.max(err);
            if err > 1e-3 {
                exact_ok = false;
            }
        }
    }
    checks.push(PhyCheck {
        name: "modem_noise_free_decode",
        pass: exact_ok,
        detail: format!("worst decode error {worst_err:.2e}"),
    });

    // constellation dump, when requested
    let mut artifacts = Vec::new();
    if let Some(path) = &opts.constellation_csv {
        let payloads: Vec<quantizer::QuantizedUpdate> = (0..clients)
            .map(|k| {
                let mut rng = tree.rng(&[7, k as u64]);
                quantizer::QuantizedUpdate {
                    levels: (0..dim)
                        .map(|_| rand::Rng::random_range(&mut rng, 0..(1u16 << bits)))
                        .collect(),
                    scale,
                }
            })
            .collect();
        let mut symbol_cfg = channel_cfg;
        symbol_cfg.mode = ChannelMode::Symbol;
        let mut rows = Vec::new();
        modem::symbol_aggregate(&payloads, &symbol_cfg, &policy, 16, tree.key(&[8]), Some(&mut rows))?;
        let mut dump = artifact_header(cfg);
        dump.push_str("round,coord,i,q\n");
        for p in rows {
            writeln!(dump, "0,{},{},{}", p.coord, p.i, p.q).expect("string write");
        }
        write_text(path, &dump)?;
        artifacts.push(path.clone());
    }

    let all_pass = checks.iter().all(|c| c.pass);
    let artifact = PhyCheckArtifact {
        config_hash: format!("{:016x}", cfg.config_hash()),
        seed: cfg.seed,
        all_pass,
        checks,
    };
    let path = cfg.out_dir.join("phy_check.json");
    write_text(
        &path,
        &serde_json::to_string_pretty(&artifact).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    artifacts.insert(0, path);
    Ok(RunReport {
        all_converged: all_pass,
        artifacts,
    })
}
