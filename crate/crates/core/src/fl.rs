//! Federated training loop and baselines.
//!
//! Every round, each client runs `local_iters` SGD steps from the current
//! global model and ships the accumulated update `eta * sum_h grad_h`. The
//! over-the-air scheme fits one common quantization scale across clients,
//! quantizes, and aggregates through the fading channel (statistical
//! operator or full symbol path); the orthogonal baselines average exactly
//! (one of them after per-client quantization). The server applies the
//! aggregate scaled by `server_scale`.
//!
//! Communication accounting normalizes one concurrent over-the-air round
//! (d/2 symbols) to one resource unit; orthogonal baselines pay per device
//! and per payload bit through the reference link's bits-per-resource-element
//! constant.

use crate::channel::{self, ChannelConfig, ChannelMode, PowerPolicy};
use crate::energy::{self, CommParams, CompParams};
use crate::error::{Error, Result};
use crate::learnkit::{Architecture, BatchStream, ClientShard, Dataset, GradientVector, ModelParams};
use crate::modem::{self, ConstellationPoint};
use crate::quantizer;
use crate::rng::{stream, SeedTree};

/// Uplink scheme of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Over-the-air aggregation of quantized updates with threshold power
    /// control.
    Esoafl,
    /// Orthogonal transport of exact updates, noise-free averaging.
    Fedavg,
    /// Orthogonal transport of per-client quantized updates.
    Fedpaq,
}

/// Convergence test driving termination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Stop once the global training loss reaches the target.
    TrainLoss,
    /// Stop once the running mean of the squared global gradient norm
    /// reaches the target.
    GradNorm,
}

/// Bits per payload element the full-precision baseline ships.
pub const FULL_PRECISION_BITS: u32 = 32;
/// Bits one resource element of the reference orthogonal link carries
/// (64QAM at code rate 0.8525).
pub const BITS_PER_RESOURCE_ELEMENT: f64 = 5.115;

/// Resource units one device consumes per round on the orthogonal link,
/// with one over-the-air round (d/2 elements) as the unit.
pub fn orthogonal_units_per_device(payload_bits: u32) -> f64 {
    2.0 * payload_bits as f64 / BITS_PER_RESOURCE_ELEMENT
}

/// Training-loop configuration.
#[derive(Debug, Clone, Copy)]
pub struct FlConfig {
    pub clients: usize,
    pub local_iters: u32,
    pub max_rounds: u32,
    pub learning_rate: f64,
    /// Per-round multiplicative learning-rate decay.
    pub lr_decay: f64,
    /// Server scale applied to the aggregate.
    pub server_scale: f64,
    pub bits: u8,
    pub tx_prob: f64,
    pub scheme: Scheme,
    /// Skip quantization entirely (full-precision payloads).
    pub infinite_precision: bool,
    pub termination: Termination,
    pub target_loss: f64,
    pub seed: u64,
}

impl FlConfig {
    pub fn validate(&self, channel: &ChannelConfig) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config {
                field: "clients".into(),
                message: "need at least one client".into(),
            });
        }
        if self.local_iters == 0 {
            return Err(Error::Config {
                field: "local_iters".into(),
                message: "need at least one local iteration".into(),
            });
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config {
                field: "learning_rate".into(),
                message: "must be positive".into(),
            });
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config {
                field: "lr_decay".into(),
                message: "must lie in (0, 1]".into(),
            });
        }
        if !(self.server_scale > 0.0) {
            return Err(Error::Config {
                field: "server_scale".into(),
                message: "must be positive".into(),
            });
        }
        if !(1..=quantizer::MAX_BITS).contains(&self.bits) {
            return Err(Error::Config {
                field: "bits".into(),
                message: format!("must lie in [1, {}]", quantizer::MAX_BITS),
            });
        }
        if self.scheme == Scheme::Esoafl && channel.mode != ChannelMode::Ideal {
            let p_max = channel::max_probability(channel);
            if !(self.tx_prob > 0.0 && self.tx_prob <= p_max + 1e-12) {
                return Err(Error::Config {
                    field: "tx_prob".into(),
                    message: format!("must lie in (0, {p_max:.4}] for this channel"),
                });
            }
        }
        if !(self.target_loss > 0.0) {
            return Err(Error::Config {
                field: "target_loss".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Immutable data/model/link environment of one training run.
pub struct TrainSetup<'a> {
    pub train: &'a Dataset,
    pub test: Option<&'a Dataset>,
    pub shards: &'a [ClientShard],
    pub arch: Architecture,
    pub channel: ChannelConfig,
    pub comm: CommParams,
    pub comp: CompParams,
}

/// One trace row.
#[derive(Debug, Clone, Copy)]
pub struct RoundRecord {
    pub round: u32,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Resource units consumed this round.
    pub comm_units: f64,
    /// Cumulative per-device energy through this round, joules.
    pub energy_j: f64,
}

/// Whole-run record.
#[derive(Debug, Clone)]
pub struct TrainingTrace {
    pub rows: Vec<RoundRecord>,
    pub converged: bool,
}

impl TrainingTrace {
    pub fn rounds_to_target(&self) -> Option<u32> {
        self.converged.then(|| self.rows.last().map(|r| r.round).unwrap_or(0))
    }

    pub fn total_comm_units(&self) -> f64 {
        self.rows.iter().map(|r| r.comm_units).sum()
    }

    pub fn total_energy(&self) -> f64 {
        self.rows.last().map(|r| r.energy_j).unwrap_or(0.0)
    }
}

/// Training output: the trace, the final model, and any captured
/// constellation samples.
pub struct TrainOutput {
    pub trace: TrainingTrace,
    pub params: ModelParams,
    pub constellation: Vec<(u32, ConstellationPoint)>,
}

/// Local SGD accumulation: runs `local_iters` steps from `start` on batches
/// from `batches` and returns `eta * sum_h grad_h`. The transient local
/// model is discarded; the next round re-seeds from the global model.
pub fn local_accumulate(
    start: &ModelParams,
    ds: &Dataset,
    batches: &mut BatchStream,
    local_iters: u32,
    eta: f64,
) -> Result<GradientVector> {
    let mut params = start.clone();
    let mut acc = GradientVector::zeros(start.dim());
    for _ in 0..local_iters {
        let batch = batches.next_batch().to_vec();
        let g = params.gradient(ds, &batch)?;
        acc.add_scaled(&g, eta)?;
        params = params.sgd_step(&g, eta)?;
    }
    Ok(acc)
}

/// Server update: `w - server_scale * aggregate`.
pub fn global_update(
    params: &ModelParams,
    aggregate: &GradientVector,
    server_scale: f64,
) -> Result<ModelParams> {
    params.sgd_step(aggregate, server_scale)
}

/// Mutable training state; one instance per run.
pub struct Trainer<'a> {
    cfg: FlConfig,
    setup: &'a TrainSetup<'a>,
    tree: SeedTree,
    params: ModelParams,
    policy: Option<PowerPolicy>,
    round: u32,
    eta: f64,
    cumulative_energy: f64,
    grad_norm_sum: f64,
    capture_constellation: bool,
    constellation: Vec<(u32, ConstellationPoint)>,
    all_train: Vec<usize>,
    all_test: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: FlConfig, setup: &'a TrainSetup<'a>) -> Result<Self> {
        cfg.validate(&setup.channel)?;
        if setup.shards.len() != cfg.clients {
            return Err(Error::InvalidSpec(format!(
                "{} shards for {} clients",
                setup.shards.len(),
                cfg.clients
            )));
        }
        if setup.comm.model_dim != setup.arch.dim() {
            return Err(Error::InvalidSpec(format!(
                "link model_dim {} does not match architecture dimension {}",
                setup.comm.model_dim,
                setup.arch.dim()
            )));
        }
        let tree = SeedTree::new(cfg.seed);
        let params = match setup.arch {
            Architecture::Mlp { .. } => {
                setup.arch.random_params(0.3, &mut tree.rng(&[stream::INIT]))
            }
            _ => setup.arch.zero_params(),
        };
        let policy = match (cfg.scheme, setup.channel.mode) {
            (Scheme::Esoafl, ChannelMode::Ideal) => Some(PowerPolicy::full_selection()),
            (Scheme::Esoafl, _) => Some(PowerPolicy::from_probability(cfg.tx_prob, &setup.channel)?),
            _ => None,
        };
        Ok(Trainer {
            cfg,
            setup,
            tree,
            params,
            policy,
            round: 0,
            eta: cfg.learning_rate,
            cumulative_energy: 0.0,
            grad_norm_sum: 0.0,
            capture_constellation: false,
            constellation: Vec::new(),
            all_train: (0..setup.train.n_samples()).collect(),
            all_test: setup
                .test
                .map(|t| (0..t.n_samples()).collect())
                .unwrap_or_default(),
        })
    }

    pub fn capture_constellation(&mut self, on: bool) {
        self.capture_constellation = on;
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    fn accumulate_clients(&mut self) -> Result<Vec<GradientVector>> {
        let mut updates = Vec::with_capacity(self.cfg.clients);
        for shard in self.setup.shards {
            let rng = self
                .tree
                .rng(&[stream::BATCH, self.round as u64, shard.client_id as u64]);
            let mut batches = BatchStream::new(shard, rng)?;
            let update = local_accumulate(
                &self.params,
                self.setup.train,
                &mut batches,
                self.cfg.local_iters,
                self.eta,
            )?;
            if !update.is_finite() {
                return Err(Error::DivergedClient {
                    client: shard.client_id,
                    round: self.round,
                });
            }
            updates.push(update);
        }
        Ok(updates)
    }

    /// Over-the-air transport: common scale, quantize, aggregate.
    fn esoafl_transport(&mut self, updates: &[GradientVector]) -> Result<GradientVector> {
        let policy = self.policy.as_ref().expect("policy set for this scheme");
        let channel_key = self.tree.key(&[stream::CHANNEL, self.round as u64]);

        if self.cfg.infinite_precision {
            return channel::air_aggregate(updates, &self.setup.channel, policy, channel_key);
        }

        let scale = match quantizer::fit_common_scale(updates, self.cfg.bits) {
            // reserved zero payload: nothing to transmit this round
            Err(Error::DegenerateScale) => {
                return Ok(GradientVector::zeros(updates[0].len()))
            }
            other => other?,
        };
        let payloads: Vec<quantizer::QuantizedUpdate> = updates
            .iter()
            .enumerate()
            .map(|(k, u)| {
                let mut rng =
                    self.tree
                        .rng(&[stream::QUANT, self.round as u64, k as u64]);
                quantizer::quantize(u, &scale, &mut rng)
            })
            .collect::<Result<_>>()?;

        match self.setup.channel.mode {
            ChannelMode::Symbol => {
                let mut rows = self.capture_constellation.then(Vec::new);
                let out = modem::symbol_aggregate(
                    &payloads,
                    &self.setup.channel,
                    policy,
                    16,
                    channel_key,
                    rows.as_mut(),
                )?;
                if let Some(rows) = rows {
                    let round = self.round;
                    self.constellation
                        .extend(rows.into_iter().map(|p| (round, p)));
                }
                Ok(out)
            }
            _ => {
                let sent: Vec<GradientVector> =
                    payloads.iter().map(quantizer::dequantize).collect();
                channel::air_aggregate(&sent, &self.setup.channel, policy, channel_key)
            }
        }
    }

    /// Exact mean over clients; shares the ideal-channel implementation so
    /// the degenerate over-the-air configuration stays bit-identical.
    fn mean_transport(updates: &[GradientVector]) -> Result<GradientVector> {
        channel::exact_mean(updates)
    }

    /// Per-client quantize/dequantize, then exact mean over orthogonal
    /// channels.
    fn fedpaq_transport(&self, updates: &[GradientVector]) -> Result<GradientVector> {
        let mut sent = Vec::with_capacity(updates.len());
        for (k, u) in updates.iter().enumerate() {
            if self.cfg.infinite_precision || u.max_abs() == 0.0 {
                sent.push(u.clone());
                continue;
            }
            let scale = quantizer::fit_common_scale(std::slice::from_ref(u), self.cfg.bits)?;
            let mut rng = self
                .tree
                .rng(&[stream::QUANT, self.round as u64, k as u64]);
            sent.push(quantizer::dequantize(&quantizer::quantize(u, &scale, &mut rng)?));
        }
        Self::mean_transport(&sent)
    }

    fn comm_units_this_round(&self) -> f64 {
        match self.cfg.scheme {
            Scheme::Esoafl => 1.0,
            Scheme::Fedavg => {
                self.cfg.clients as f64 * orthogonal_units_per_device(FULL_PRECISION_BITS)
            }
            Scheme::Fedpaq => {
                self.cfg.clients as f64 * orthogonal_units_per_device(self.cfg.bits as u32)
            }
        }
    }

    /// Per-device energy of this round.
    fn round_energy(&self) -> Result<f64> {
        let comp = energy::comp_energy(&self.setup.comp) * self.cfg.local_iters as f64;
        match self.cfg.scheme {
            Scheme::Esoafl => {
                if self.setup.channel.mode == ChannelMode::Ideal {
                    // no physical uplink is being modeled
                    Ok(comp)
                } else {
                    Ok(energy::comm_energy(self.cfg.tx_prob, &self.setup.comm)? + comp)
                }
            }
            Scheme::Fedavg | Scheme::Fedpaq => {
                let bits = if self.cfg.scheme == Scheme::Fedavg {
                    FULL_PRECISION_BITS
                } else {
                    self.cfg.bits as u32
                };
                let elements = (self.setup.comm.model_dim as f64 * bits as f64
                    / BITS_PER_RESOURCE_ELEMENT)
                    .ceil();
                let time = elements * self.setup.comm.symbol_time
                    / self.setup.comm.parallel_symbols as f64;
                Ok(self.setup.channel.power_budget * time + comp)
            }
        }
    }

    /// Execute one communication round and append its record.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        if self.cfg.termination == Termination::GradNorm {
            let g = self.params.gradient(self.setup.train, &self.all_train)?;
            self.grad_norm_sum += g.norm_sq();
        }

        let updates = self.accumulate_clients()?;
        let aggregate = match self.cfg.scheme {
            Scheme::Esoafl => self.esoafl_transport(&updates)?,
            Scheme::Fedavg => Self::mean_transport(&updates)?,
            Scheme::Fedpaq => self.fedpaq_transport(&updates)?,
        };
        self.params = global_update(&self.params, &aggregate, self.cfg.server_scale)?;

        self.round += 1;
        self.eta *= self.cfg.lr_decay;
        self.cumulative_energy += self.round_energy()?;

        let train_loss = self.params.loss(self.setup.train, &self.all_train)?;
        let test_accuracy = match self.setup.test {
            Some(test) => self.params.accuracy(test, &self.all_test),
            None => self.params.accuracy(self.setup.train, &self.all_train),
        };
        Ok(RoundRecord {
            round: self.round,
            train_loss,
            test_accuracy,
            comm_units: self.comm_units_this_round(),
            energy_j: self.cumulative_energy,
        })
    }

    fn reached_target(&self, record: &RoundRecord) -> bool {
        match self.cfg.termination {
            Termination::TrainLoss => record.train_loss <= self.cfg.target_loss,
            Termination::GradNorm => {
                self.round > 0 && self.grad_norm_sum / self.round as f64 <= self.cfg.target_loss
            }
        }
    }

    /// Train until the target is reached or the round cap; the trace is
    /// flagged non-converged in the latter case.
    pub fn run(mut self) -> Result<TrainOutput> {
        let mut rows = Vec::new();
        let mut converged = false;
        while self.round < self.cfg.max_rounds {
            let record = self.run_round()?;
            rows.push(record);
            if self.reached_target(&record) {
                converged = true;
                break;
            }
        }
        Ok(TrainOutput {
            trace: TrainingTrace { rows, converged },
            params: self.params,
            constellation: self.constellation,
        })
    }
}

/// Convenience wrapper: build a trainer and run it to completion.
pub fn run_training(cfg: &FlConfig, setup: &TrainSetup) -> Result<TrainOutput> {
    Trainer::new(*cfg, setup)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learnkit::{generate_synthetic, partition_non_iid, SyntheticSpec};
    use approx::assert_relative_eq;

    fn logistic_setup(seed: u64) -> (Dataset, Dataset, Vec<ClientShard>) {
        let train = generate_synthetic(&SyntheticSpec {
            n_classes: 2,
            n_features: 10,
            n_samples: 800,
            separation: 3.0,
            seed,
        })
        .unwrap();
        let test = generate_synthetic(&SyntheticSpec {
            n_classes: 2,
            n_features: 10,
            n_samples: 200,
            separation: 3.0,
            seed: seed ^ 0xABCD,
        })
        .unwrap();
        let shards = partition_non_iid(&train, 10, 0.0, 16, seed).unwrap();
        (train, test, shards)
    }

    fn base_cfg(scheme: Scheme, seed: u64) -> FlConfig {
        FlConfig {
            clients: 10,
            local_iters: 5,
            max_rounds: 60,
            learning_rate: 0.2,
            lr_decay: 0.99,
            server_scale: 1.0,
            bits: 4,
            tx_prob: 0.5,
            scheme,
            infinite_precision: false,
            termination: Termination::TrainLoss,
            target_loss: 0.25,
            seed,
        }
    }

    fn channel(mode: ChannelMode) -> ChannelConfig {
        ChannelConfig {
            rate: 1.0,
            noise_var: 0.052 * 10f64.powf(-1.5),
            rho: 0.052,
            power_budget: 0.2,
            mode,
        }
    }

    fn comm(dim: usize) -> CommParams {
        CommParams {
            rho: 0.052,
            rate: 1.0,
            symbol_time: 1.0 / 180e3,
            bandwidth: 180e3,
            parallel_symbols: 1,
            model_dim: dim,
        }
    }

    fn setup<'a>(
        train: &'a Dataset,
        test: &'a Dataset,
        shards: &'a [ClientShard],
        mode: ChannelMode,
    ) -> TrainSetup<'a> {
        let arch = Architecture::Logistic {
            n_features: 10,
            n_classes: 2,
        };
        TrainSetup {
            train,
            test: Some(test),
            shards,
            arch,
            channel: channel(mode),
            comm: comm(arch.dim()),
            comp: CompParams::small_learner(),
        }
    }

    #[test]
    fn local_accumulate_single_step_and_zero_rate() {
        let (train, _test, shards) = logistic_setup(1);
        let arch = Architecture::Logistic {
            n_features: 10,
            n_classes: 2,
        };
        let params = arch.zero_params();
        let tree = SeedTree::new(5);

        let mut batches = BatchStream::new(&shards[0], tree.rng(&[stream::BATCH, 0, 0])).unwrap();
        let acc = local_accumulate(&params, &train, &mut batches, 1, 0.2).unwrap();
        let mut batches = BatchStream::new(&shards[0], tree.rng(&[stream::BATCH, 0, 0])).unwrap();
        let batch = batches.next_batch().to_vec();
        let expected = params.gradient(&train, &batch).unwrap().scaled(0.2);
        assert_eq!(acc.as_slice(), expected.as_slice());

        let mut batches = BatchStream::new(&shards[0], tree.rng(&[stream::BATCH, 0, 0])).unwrap();
        let zero = local_accumulate(&params, &train, &mut batches, 4, 0.0).unwrap();
        assert!(zero.max_abs() == 0.0);
    }

    #[test]
    fn local_accumulate_matches_manual_unroll() {
        let (train, _test, shards) = logistic_setup(2);
        let arch = Architecture::Logistic {
            n_features: 10,
            n_classes: 2,
        };
        let start = arch.zero_params();
        let tree = SeedTree::new(9);
        let eta = 0.1;

        let mut batches = BatchStream::new(&shards[3], tree.rng(&[stream::BATCH, 7, 3])).unwrap();
        let acc = local_accumulate(&start, &train, &mut batches, 2, eta).unwrap();

        // manual two-step unroll with the same stream
        let mut batches = BatchStream::new(&shards[3], tree.rng(&[stream::BATCH, 7, 3])).unwrap();
        let b1 = batches.next_batch().to_vec();
        let g1 = start.gradient(&train, &b1).unwrap();
        let w1 = start.sgd_step(&g1, eta).unwrap();
        let b2 = batches.next_batch().to_vec();
        let g2 = w1.gradient(&train, &b2).unwrap();
        let mut expected = GradientVector::zeros(start.dim());
        expected.add_scaled(&g1, eta).unwrap();
        expected.add_scaled(&g2, eta).unwrap();
        assert_eq!(acc.as_slice(), expected.as_slice());
    }

    #[test]
    fn global_update_contract() {
        let arch = Architecture::Linear { n_features: 2 };
        let params = ModelParams::new(arch, vec![1.0, 2.0, 3.0]).unwrap();
        let zero = GradientVector::zeros(3);
        assert_eq!(
            global_update(&params, &zero, 1.0).unwrap().values(),
            params.values()
        );
        let agg = GradientVector(vec![0.5, -0.5, 1.0]);
        let out = global_update(&params, &agg, 2.0).unwrap();
        assert_eq!(out.values(), &[0.0, 3.0, 1.0]);
    }

    #[test]
    fn single_client_ideal_equals_plain_sgd() {
        let (train, test, _) = logistic_setup(3);
        let shards = partition_non_iid(&train, 1, 0.0, 16, 3).unwrap();
        let s = setup(&train, &test, &shards, ChannelMode::Ideal);
        let mut cfg = base_cfg(Scheme::Esoafl, 11);
        cfg.clients = 1;
        cfg.infinite_precision = true;
        cfg.max_rounds = 3;
        cfg.target_loss = 1e-12;
        cfg.lr_decay = 1.0;
        let out = run_training(&cfg, &s).unwrap();

        // reference: plain SGD over the same batch sequence (summation order
        // differs, so compare at floating-point resolution)
        let arch = s.arch;
        let mut params = arch.zero_params();
        let tree = SeedTree::new(11);
        for round in 0..3u64 {
            let mut batches =
                BatchStream::new(&shards[0], tree.rng(&[stream::BATCH, round, 0])).unwrap();
            for _ in 0..cfg.local_iters {
                let batch = batches.next_batch().to_vec();
                let g = params.gradient(&train, &batch).unwrap();
                params = params.sgd_step(&g, cfg.learning_rate).unwrap();
            }
        }
        for (a, b) in out.params.values().iter().zip(params.values()) {
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    #[test]
    fn degenerate_esoafl_is_bit_identical_to_fedavg() {
        let (train, test, shards) = logistic_setup(4);
        let s = setup(&train, &test, &shards, ChannelMode::Ideal);

        let mut esoafl = base_cfg(Scheme::Esoafl, 21);
        esoafl.infinite_precision = true;
        esoafl.tx_prob = 1.0;
        esoafl.max_rounds = 50;
        esoafl.target_loss = 1e-12; // run all 50 rounds

        let mut fedavg = base_cfg(Scheme::Fedavg, 21);
        fedavg.max_rounds = 50;
        fedavg.target_loss = 1e-12;

        let a = run_training(&esoafl, &s).unwrap();
        let b = run_training(&fedavg, &s).unwrap();
        assert_eq!(a.params.values(), b.params.values());
        assert_eq!(a.trace.rows.len(), b.trace.rows.len());
        for (x, y) in a.trace.rows.iter().zip(&b.trace.rows) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        }
        // accounting differs: 1 unit vs K * payload factor
        assert_eq!(a.trace.rows[0].comm_units, 1.0);
        assert_relative_eq!(
            b.trace.rows[0].comm_units,
            10.0 * orthogonal_units_per_device(FULL_PRECISION_BITS)
        );
    }

    #[test]
    fn traces_are_deterministic() {
        let (train, test, shards) = logistic_setup(5);
        let s = setup(&train, &test, &shards, ChannelMode::Statistical);
        let cfg = base_cfg(Scheme::Esoafl, 33);
        let a = run_training(&cfg, &s).unwrap();
        let b = run_training(&cfg, &s).unwrap();
        assert_eq!(a.trace.rows.len(), b.trace.rows.len());
        for (x, y) in a.trace.rows.iter().zip(&b.trace.rows) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.energy_j.to_bits(), y.energy_j.to_bits());
        }
    }

    #[test]
    fn trace_invariants_hold() {
        let (train, test, shards) = logistic_setup(6);
        let s = setup(&train, &test, &shards, ChannelMode::Statistical);
        let out = run_training(&base_cfg(Scheme::Esoafl, 41), &s).unwrap();
        assert!(!out.trace.rows.is_empty());
        for w in out.trace.rows.windows(2) {
            assert!(w[1].round == w[0].round + 1);
            assert!(w[1].energy_j >= w[0].energy_j);
        }
    }

    #[test]
    fn fedpaq_uses_orthogonal_accounting() {
        let (train, test, shards) = logistic_setup(7);
        let s = setup(&train, &test, &shards, ChannelMode::Ideal);
        let out = run_training(&base_cfg(Scheme::Fedpaq, 51), &s).unwrap();
        let expected = 10.0 * orthogonal_units_per_device(4);
        assert_relative_eq!(out.trace.rows[0].comm_units, expected);
    }

    #[test]
    fn esoafl_reaches_target_within_twice_fedavg_rounds() {
        let (train, test, shards) = logistic_setup(8);
        let stat = setup(&train, &test, &shards, ChannelMode::Statistical);
        let ideal = setup(&train, &test, &shards, ChannelMode::Ideal);

        let mut ratios = Vec::new();
        for seed in [101u64, 202, 303] {
            let mut e_cfg = base_cfg(Scheme::Esoafl, seed);
            e_cfg.max_rounds = 400;
            let mut f_cfg = base_cfg(Scheme::Fedavg, seed);
            f_cfg.max_rounds = 400;
            let e = run_training(&e_cfg, &stat).unwrap();
            let f = run_training(&f_cfg, &ideal).unwrap();
            assert!(e.trace.converged && f.trace.converged);
            ratios.push(
                e.trace.rounds_to_target().unwrap() as f64
                    / f.trace.rounds_to_target().unwrap() as f64,
            );
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ratios[ratios.len() / 2];
        assert!(median <= 2.0, "round ratio {median} (all {ratios:?})");
    }

    #[test]
    fn fedavg_full_batch_loss_non_increasing() {
        let (train, test, _) = logistic_setup(9);
        // full-batch: batch size equals shard size
        let shards = partition_non_iid(&train, 10, 0.0, 80, 9).unwrap();
        let s = setup(&train, &test, &shards, ChannelMode::Ideal);
        let mut cfg = base_cfg(Scheme::Fedavg, 61);
        cfg.learning_rate = 0.1;
        cfg.max_rounds = 40;
        cfg.target_loss = 1e-12;
        let out = run_training(&cfg, &s).unwrap();
        for w in out.trace.rows.windows(2) {
            assert!(
                w[1].train_loss <= w[0].train_loss + 1e-12,
                "loss rose: {} -> {}",
                w[0].train_loss,
                w[1].train_loss
            );
        }
    }

    #[test]
    fn grad_norm_termination_works() {
        let (train, test, shards) = logistic_setup(10);
        let s = setup(&train, &test, &shards, ChannelMode::Ideal);
        let mut cfg = base_cfg(Scheme::Fedavg, 71);
        cfg.termination = Termination::GradNorm;
        cfg.target_loss = 0.05;
        cfg.max_rounds = 200;
        let out = run_training(&cfg, &s).unwrap();
        assert!(out.trace.converged);
    }

    #[test]
    fn round_cap_flags_non_convergence() {
        let (train, test, shards) = logistic_setup(11);
        let s = setup(&train, &test, &shards, ChannelMode::Ideal);
        let mut cfg = base_cfg(Scheme::Fedavg, 81);
        cfg.max_rounds = 2;
        cfg.target_loss = 1e-9;
        let out = run_training(&cfg, &s).unwrap();
        assert!(!out.trace.converged);
        assert_eq!(out.trace.rows.len(), 2);
    }

    #[test]
    fn symbol_mode_trains() {
        let (train, test, shards) = logistic_setup(12);
        let s = setup(&train, &test, &shards, ChannelMode::Symbol);
        let mut cfg = base_cfg(Scheme::Esoafl, 91);
        cfg.max_rounds = 30;
        cfg.target_loss = 0.4;
        let mut trainer = Trainer::new(cfg, &s).unwrap();
        trainer.capture_constellation(true);
        let out = trainer.run().unwrap();
        assert!(!out.constellation.is_empty());
        // one point per symbol per round: ceil(d/2) = 11 for d = 22
        assert_eq!(
            out.constellation.len(),
            out.trace.rows.len() * s.arch.dim().div_ceil(2)
        );
    }
}
