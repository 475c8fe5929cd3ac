//! Experiment orchestration: configuration, the round loop, evaluation and
//! report files.
//!
//! Every random choice draws from its own ChaCha stream keyed by
//! `(seed, purpose, round, client)`, so a run is a pure function of its
//! [`ExperimentConfig`] regardless of worker-pool size.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackKind, AttackSpec, DbaShard, RoundContext};
use crate::baselines::{self, AggregatorKind};
use crate::data::{self, Dataset, TriggerSpec};
use crate::error::{Error, Result};
use crate::fera::{self, ClientUpdate, DetectionResult, FilterConfig, MetricSet};
use crate::nn::{self, MlpModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        num_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        dim: usize,
    },
    /// MNIST-format files.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            num_classes: 4,
            train_per_class: 1500,
            test_per_class: 250,
            dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    /// Index into the full layer-dims list of the layer probed for
    /// representations. Defaults to the last hidden layer.
    pub representation_layer: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            representation_layer: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootSource {
    /// Drawn from the clean test set.
    Test,
    /// Uniform noise inputs, unrelated to the task distribution.
    Ood,
}

fn default_attack() -> AttackSpec {
    AttackSpec::none(TriggerSpec {
        coordinates: Vec::new(),
        ..TriggerSpec::corner_patch(0, 0.2)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub malicious_fraction: f64,
    pub malicious_cap_per_round: f64,
    pub rounds: usize,
    /// Clean rounds before the attack window opens.
    pub warmup_rounds: usize,
    /// Length of the attack window; `None` keeps attacking to the end.
    pub attack_rounds: Option<usize>,
    /// An empty trigger coordinate list means the three last features.
    pub attack: AttackSpec,
    pub alpha_dirichlet: f64,
    pub iid: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub client_lr: f64,
    pub server_eta: f64,
    pub root_size: usize,
    pub root_source: RootSource,
    pub aggregator: AggregatorKind,
    pub filter: FilterConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_clients: 100,
            clients_per_round: 10,
            malicious_fraction: 0.10,
            malicious_cap_per_round: 0.40,
            rounds: 60,
            warmup_rounds: 20,
            attack_rounds: None,
            attack: default_attack(),
            alpha_dirichlet: 0.5,
            iid: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            local_epochs: 2,
            batch_size: 16,
            client_lr: 0.1,
            server_eta: 0.5,
            root_size: 64,
            root_source: RootSource::Test,
            aggregator: AggregatorKind::Fera,
            filter: FilterConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// The small benchmark used throughout the test-suite: 4-class blobs in
    /// 32 dimensions, a 32-64-32-4 MLP, 30 clients with 10 per round, 60
    /// rounds and a BadNet corner trigger from round 21 on.
    pub fn desk_benchmark(seed: u64) -> Self {
        Self {
            seed,
            num_clients: 30,
            attack: AttackSpec {
                kind: AttackKind::Badnet,
                ..default_attack()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_malicious(&self) -> usize {
        (self.malicious_fraction * self.num_clients as f64).round() as usize
    }

    /// Largest malicious count a sampled round may contain.
    pub fn malicious_cap(&self) -> usize {
        (self.malicious_cap_per_round * self.clients_per_round as f64 + 1e-9).floor() as usize
    }

    /// Trigger with defaults filled in for the configured feature width.
    pub fn trigger(&self, dim: usize) -> TriggerSpec {
        if self.attack.trigger.coordinates.is_empty() {
            TriggerSpec {
                coordinates: (dim.saturating_sub(3)..dim).collect(),
                ..self.attack.trigger.clone()
            }
        } else {
            self.attack.trigger.clone()
        }
    }

    pub fn attack_active(&self, round: usize) -> bool {
        self.attack.kind != AttackKind::None
            && round >= self.warmup_rounds
            && self.attack_rounds.is_none_or(|n| round < self.warmup_rounds + n)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_clients < 2 {
            return fail("num_clients must be >= 2".into());
        }
        if self.clients_per_round < 2 || self.clients_per_round > self.num_clients {
            return fail(format!(
                "clients_per_round {} must be in 2..={}",
                self.clients_per_round, self.num_clients
            ));
        }
        if !(0.0..0.5).contains(&self.malicious_fraction) {
            return fail(format!(
                "malicious_fraction {} must be in [0, 0.5)",
                self.malicious_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.malicious_cap_per_round) {
            return fail("malicious_cap_per_round must be in [0, 1]".into());
        }
        let benign = self.num_clients - self.num_malicious();
        if benign < self.clients_per_round - self.malicious_cap().min(self.clients_per_round) {
            return fail("malicious cap cannot be met: too few benign clients".into());
        }
        if !(self.alpha_dirichlet > 0.0) {
            return fail("alpha_dirichlet must be positive".into());
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return fail("local_epochs and batch_size must be positive".into());
        }
        if !(self.client_lr > 0.0) || !(self.server_eta > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.root_size == 0 {
            return fail("root_size must be positive".into());
        }
        if self.model.hidden.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        if let AggregatorKind::Multikrum { f, m } = self.aggregator {
            let n = self.clients_per_round;
            let f = f.unwrap_or_else(|| baselines::default_krum_f(n));
            let m = m.unwrap_or(n.saturating_sub(f));
            if n < 2 * f + 3 || m == 0 || m > n - f {
                return fail(format!("multi-krum infeasible for {n} clients with f = {f}, m = {m}"));
            }
        }
        self.filter.validate()?;
        self.attack.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    TrainData = 1,
    TestData,
    Partition,
    Malicious,
    Sample,
    LocalTrain,
    Poison,
    Root,
    Init,
    Proxy,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_seed(seed: u64, purpose: Stream, round: usize, client: usize) -> u64 {
    let mut h = splitmix(seed);
    for part in [purpose as u64, round as u64, client as u64] {
        h = splitmix(h ^ part);
    }
    h
}

fn stream(seed: u64, purpose: Stream, round: usize, client: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, purpose, round, client))
}

/// Uniform sample of `clients_per_round` distinct clients, redrawn until at
/// most `malicious_cap()` of them are malicious. Ascending ids.
pub fn sample_round(cfg: &ExperimentConfig, malicious: &[bool], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let cap = cfg.malicious_cap();
    loop {
        let mut ids = index::sample(rng, cfg.num_clients, cfg.clients_per_round).into_vec();
        if ids.iter().filter(|&&i| malicious[i]).count() <= cap {
            ids.sort_unstable();
            return ids;
        }
    }
}

/// The malicious client ids for a run; fixed for its whole duration.
pub fn malicious_clients(cfg: &ExperimentConfig) -> Vec<bool> {
    let mut rng = stream(cfg.seed, Stream::Malicious, 0, 0);
    let mut flags = vec![false; cfg.num_clients];
    for i in index::sample(&mut rng, cfg.num_clients, cfg.num_malicious()) {
        flags[i] = true;
    }
    flags
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RoundTimings {
    pub train_secs: f64,
    pub metrics_secs: f64,
    pub filter_secs: f64,
    pub aggregate_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Ground truth, aligned with `sampled`.
    pub malicious: Vec<bool>,
    pub attack_active: bool,
    /// Client ids the aggregator flagged or rejected.
    pub flagged: Vec<usize>,
    pub ma: f64,
    pub ba: f64,
    pub metrics: Option<MetricSet>,
    pub detection: Option<DetectionResult>,
    pub timings: RoundTimings,
}

/// Confusion counts over the sampled clients of one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

impl RoundRecord {
    pub fn confusion_for(&self, flagged: &[usize]) -> Confusion {
        let mut c = Confusion::default();
        for (id, &bad) in self.sampled.iter().zip(&self.malicious) {
            match (flagged.contains(id), bad) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn confusion(&self) -> Confusion {
        self.confusion_for(&self.flagged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub final_ma: f64,
    pub final_ba: f64,
    /// Means over attack rounds where the ratio is defined; `null` if never.
    pub mean_precision: Option<f64>,
    pub mean_tpr: Option<f64>,
    pub mean_fpr: Option<f64>,
    pub config_hash: String,
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Summary {
    pub fn from_records(cfg: &ExperimentConfig, initial: (f64, f64), records: &[RoundRecord]) -> Self {
        let (final_ma, final_ba) = records.last().map_or(initial, |r| (r.ma, r.ba));
        let attack: Vec<Confusion> = records
            .iter()
            .filter(|r| r.attack_active)
            .map(RoundRecord::confusion)
            .collect();
        Summary {
            final_ma,
            final_ba,
            mean_precision: mean_defined(attack.iter().map(Confusion::precision)),
            mean_tpr: mean_defined(attack.iter().map(Confusion::tpr)),
            mean_fpr: mean_defined(attack.iter().map(Confusion::fpr)),
            config_hash: cfg.hash(),
        }
    }
}

struct ClientState {
    clean: Dataset,
    /// Attack recipe and fixed poisoned copy for malicious clients.
    attack: Option<(AttackSpec, Dataset)>,
}

/// Everything a running experiment owns.
pub struct Simulation {
    cfg: ExperimentConfig,
    test: Dataset,
    backdoor: Option<Dataset>,
    root: Dataset,
    clients: Vec<ClientState>,
    malicious: Vec<bool>,
    global: MlpModel,
    round: usize,
}

/// A finished round plus the inputs the server saw, for offline checks.
pub struct RoundOutcome {
    pub record: RoundRecord,
    pub updates: Vec<ClientUpdate>,
    pub global_before: MlpModel,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = load_data(&cfg)?;
        let dim = train.dim();
        let trigger = cfg.trigger(dim);
        trigger.validate(dim, train.num_classes())?;

        let plan = if cfg.iid {
            data::iid_partition(train.len(), cfg.num_clients, stream_seed(cfg.seed, Stream::Partition, 0, 0))?
        } else {
            data::dirichlet_partition(
                &train,
                cfg.num_clients,
                cfg.alpha_dirichlet,
                stream_seed(cfg.seed, Stream::Partition, 0, 0),
            )?
        };

        let malicious = malicious_clients(&cfg);
        let colluders: Vec<usize> = (0..cfg.num_clients).filter(|&i| malicious[i]).collect();
        let scale_default = if colluders.is_empty() {
            1.0
        } else {
            cfg.num_clients as f64 / colluders.len() as f64
        };
        let mut clients = Vec::with_capacity(cfg.num_clients);
        for (id, idx) in plan.client_indices.iter().enumerate() {
            let clean = train.subset(idx)?;
            let attack = match colluders.iter().position(|&c| c == id) {
                Some(rank) if cfg.attack.kind != AttackKind::None => {
                    let mut spec = cfg.attack.clone();
                    spec.trigger = trigger.clone();
                    spec.scale_factor.get_or_insert(scale_default);
                    if spec.kind == AttackKind::Dba {
                        let total = spec
                            .dba_shard
                            .map_or(colluders.len().min(trigger.coordinates.len()), |s| s.total)
                            .max(1);
                        spec.dba_shard = Some(DbaShard { index: rank % total, total });
                    }
                    let poisoned = attacks::poison_local_data(
                        &spec,
                        &clean,
                        stream_seed(cfg.seed, Stream::Poison, 0, id),
                    )?;
                    Some((spec, poisoned))
                }
                _ => None,
            };
            clients.push(ClientState { clean, attack });
        }

        let root_source = match cfg.root_source {
            RootSource::Test => test.clone(),
            RootSource::Ood => data::uniform_noise_dataset(
                stream_seed(cfg.seed, Stream::Root, 1, 0),
                cfg.root_size.max(test.len()),
                dim,
                test.num_classes(),
            )?,
        };
        let root = data::make_root(&root_source, cfg.root_size, stream_seed(cfg.seed, Stream::Root, 0, 0))?;
        let backdoor = data::backdoor_test_set(&test, &trigger)?;

        let mut dims = vec![dim];
        dims.extend(&cfg.model.hidden);
        dims.push(train.num_classes());
        let mut global = MlpModel::init(&dims, &mut stream(cfg.seed, Stream::Init, 0, 0))?;
        if let Some(k) = cfg.model.representation_layer {
            global = global.with_representation_layer(k)?;
        }

        Ok(Self {
            cfg,
            test,
            backdoor,
            root,
            clients,
            malicious,
            global,
            round: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn global(&self) -> &MlpModel {
        &self.global
    }

    pub fn root(&self) -> &Dataset {
        &self.root
    }

    pub fn malicious(&self) -> &[bool] {
        &self.malicious
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// Clean accuracy and backdoor success rate of the current global model.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let ma = nn::evaluate(&self.global, self.test.as_batch())?;
        let ba = match &self.backdoor {
            Some(bd) => nn::evaluate(&self.global, bd.as_batch())?,
            None => 0.0,
        };
        Ok((ma, ba))
    }

    fn local_train(&self, data: &Dataset, rng_round: usize, client: usize, purpose: Stream) -> Result<MlpModel> {
        let mut rng = stream(self.cfg.seed, purpose, rng_round, client);
        let mut model = self.global.clone();
        for _ in 0..self.cfg.local_epochs {
            model = nn::sgd_epoch(&model, data.as_batch(), self.cfg.client_lr, self.cfg.batch_size, &mut rng)?;
        }
        Ok(model)
    }

    fn client_update(&self, id: usize, attack_on: bool) -> Result<ClientUpdate> {
        let t = self.round;
        let state = &self.clients[id];
        let num_samples = state.clean.len();
        let params = match (&state.attack, attack_on) {
            (Some((spec, poisoned)), true) => {
                let honest = self.local_train(poisoned, t, id, Stream::LocalTrain)?;
                let proxy = if spec.kind == AttackKind::AdaptiveBadnet {
                    Some(self.local_train(&state.clean, t, id, Stream::Proxy)?)
                } else {
                    None
                };
                let ctx = RoundContext {
                    round_index: t,
                    attack_round: t - self.cfg.warmup_rounds,
                    global_params: self.global.params(),
                    benign_proxy: proxy.as_ref().map(MlpModel::params),
                };
                attacks::transform_update(spec, honest.params(), &ctx)?
            }
            _ => self.local_train(&state.clean, t, id, Stream::LocalTrain)?.params().clone(),
        };
        Ok(ClientUpdate { params, num_samples })
    }

    /// Broadcast, local training, attack transforms, detection, aggregation
    /// and evaluation for one round.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let t = self.round;
        let cfg = &self.cfg;
        let sampled = sample_round(cfg, &self.malicious, &mut stream(cfg.seed, Stream::Sample, t, 0));
        let attack_on = cfg.attack_active(t);

        let start = Instant::now();
        let updates = sampled
            .par_iter()
            .map(|&id| self.client_update(id, attack_on))
            .collect::<Result<Vec<_>>>()?;
        let mut timings = RoundTimings {
            train_secs: start.elapsed().as_secs_f64(),
            ..RoundTimings::default()
        };

        let global = self.global.params();
        let eta = cfg.server_eta;
        let (next, metrics, detection, flagged_pos) = match cfg.aggregator {
            AggregatorKind::Fera => {
                let s = Instant::now();
                let m = fera::compute_metrics(&updates, &self.global, &self.root, &cfg.filter)?;
                timings.metrics_secs = s.elapsed().as_secs_f64();
                let s = Instant::now();
                let det = fera::apply_filters(&m, &cfg.filter);
                timings.filter_secs = s.elapsed().as_secs_f64();
                let s = Instant::now();
                let next = fera::aggregate(&updates, global, &det, eta)?;
                timings.aggregate_secs = s.elapsed().as_secs_f64();
                let flagged = det.flagged.clone();
                (next, Some(m), Some(det), flagged)
            }
            AggregatorKind::Fedavg => {
                let s = Instant::now();
                let next = baselines::fedavg(&updates, global, eta)?;
                timings.aggregate_secs = s.elapsed().as_secs_f64();
                (next, None, None, Vec::new())
            }
            AggregatorKind::Multikrum { f, m } => {
                let n = updates.len();
                let f = f.unwrap_or_else(|| baselines::default_krum_f(n));
                let m = m.unwrap_or(n - f);
                let s = Instant::now();
                let (next, selected) = baselines::multi_krum_aggregate(&updates, global, f, m, eta)?;
                timings.aggregate_secs = s.elapsed().as_secs_f64();
                let rejected = (0..n).filter(|i| !selected.contains(i)).collect();
                (next, None, None, rejected)
            }
            AggregatorKind::CoordwiseMedian => {
                let s = Instant::now();
                let next = baselines::coordwise_median(&updates, global, eta)?;
                timings.aggregate_secs = s.elapsed().as_secs_f64();
                (next, None, None, Vec::new())
            }
        };

        let global_before = self.global.clone();
        self.global = self.global.with_params(next)?;
        self.round += 1;
        let (ma, ba) = self.evaluate()?;
        let record = RoundRecord {
            round: t,
            malicious: sampled.iter().map(|&i| self.malicious[i]).collect(),
            flagged: flagged_pos.iter().map(|&p| sampled[p]).collect(),
            sampled,
            attack_active: attack_on,
            ma,
            ba,
            metrics,
            detection,
            timings,
        };
        Ok(RoundOutcome {
            record,
            updates,
            global_before,
        })
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::Synthetic {
            num_classes,
            train_per_class,
            test_per_class,
            dim,
        } => Ok((
            data::synth_dataset(stream_seed(cfg.seed, Stream::TrainData, 0, 0), *num_classes, *train_per_class, *dim)?,
            data::synth_dataset(stream_seed(cfg.seed, Stream::TestData, 0, 0), *num_classes, *test_per_class, *dim)?,
        )),
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = data::load_idx(train_images, train_labels)?;
            let test = data::load_idx(test_images, test_labels)?;
            let k = train.num_classes().max(test.num_classes());
            let widen = |d: Dataset| Dataset::new(d.inputs().clone(), d.labels().to_vec(), k);
            Ok((widen(train)?, widen(test)?))
        }
    }
}

pub struct ExperimentReport {
    pub initial: (f64, f64),
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

/// Worker-pool size from `FERA_THREADS` (unset or 0 means automatic).
pub fn thread_count_from_env() -> usize {
    std::env::var("FERA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

fn in_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count_from_env())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs all configured rounds in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    in_pool(|| {
        let mut sim = Simulation::new(cfg.clone())?;
        let initial = sim.evaluate()?;
        let mut records = Vec::with_capacity(cfg.rounds);
        for _ in 0..cfg.rounds {
            records.push(sim.run_round()?.record);
        }
        let summary = Summary::from_records(cfg, initial, &records);
        Ok(ExperimentReport {
            initial,
            records,
            summary,
        })
    })?
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

#[derive(Serialize)]
struct RoundRow<'a> {
    round: usize,
    sampled: &'a str,
    malicious_sampled: usize,
    attack_active: bool,
    flagged: &'a str,
    ma: f64,
    ba: f64,
}

const METRIC_COLUMNS: [&str; 14] = [
    "round",
    "client_id",
    "is_malicious_truth",
    "sigma",
    "delta",
    "sigma_norm",
    "delta_norm",
    "s_comb",
    "das",
    "mutual_sim",
    "r",
    "flagged_c",
    "flagged_n",
    "alpha",
];

#[derive(Serialize)]
struct MetricRow {
    round: usize,
    client_id: usize,
    is_malicious_truth: bool,
    sigma: f64,
    delta: f64,
    sigma_norm: f64,
    delta_norm: f64,
    s_comb: f64,
    das: f64,
    mutual_sim: f64,
    r: f64,
    flagged_c: bool,
    flagged_n: bool,
    alpha: f64,
}

#[derive(Serialize)]
struct TimingRow {
    round: usize,
    train_secs: f64,
    metrics_secs: f64,
    filter_secs: f64,
    aggregate_secs: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes `header` then one record per row; the header is present even when
/// there are no rows.
fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `rounds.csv`, `metrics.csv`, `timings.csv` and `summary.json`
/// into `dir`. Timings are kept out of the other files so that reruns are
/// byte-identical.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let labels: Vec<(String, String)> = report
        .records
        .iter()
        .map(|r| (join_ids(&r.sampled), join_ids(&r.flagged)))
        .collect();
    write_csv(
        &dir.join("rounds.csv"),
        &["round", "sampled", "malicious_sampled", "attack_active", "flagged", "ma", "ba"],
        report.records.iter().zip(&labels).map(|(r, (s, f))| RoundRow {
            round: r.round,
            sampled: s,
            malicious_sampled: r.malicious.iter().filter(|&&m| m).count(),
            attack_active: r.attack_active,
            flagged: f,
            ma: r.ma,
            ba: r.ba,
        }),
    )?;

    let metric_rows = report.records.iter().flat_map(|r| {
        let (m, det) = match (&r.metrics, &r.detection) {
            (Some(m), Some(d)) => (m, d),
            _ => return Vec::new(),
        };
        (0..m.len())
            .map(|k| MetricRow {
                round: r.round,
                client_id: r.sampled[k],
                is_malicious_truth: r.malicious[k],
                sigma: m.sigma[k],
                delta: m.delta[k],
                sigma_norm: m.sigma_norm[k],
                delta_norm: m.delta_norm[k],
                s_comb: m.s_comb[k],
                das: m.das[k],
                mutual_sim: m.mutual_sim[k],
                r: m.r[k],
                flagged_c: det.flagged_consistency.contains(&k),
                flagged_n: det.flagged_norm.contains(&k),
                alpha: det.alpha[k],
            })
            .collect()
    });
    write_csv(&dir.join("metrics.csv"), &METRIC_COLUMNS, metric_rows)?;

    write_csv(
        &dir.join("timings.csv"),
        &["round", "train_secs", "metrics_secs", "filter_secs", "aggregate_secs"],
        report.records.iter().map(|r| TimingRow {
            round: r.round,
            train_secs: r.timings.train_secs,
            metrics_secs: r.timings.metrics_secs,
            filter_secs: r.timings.filter_secs,
            aggregate_secs: r.timings.aggregate_secs,
        }),
    )?;

    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&report.summary).expect("summary serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Runs `cfg` and writes its outputs to `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<Summary> {
    let report = run_experiment(cfg)?;
    write_outputs(&report, dir)?;
    Ok(report.summary)
}

/// One sweep axis: a dotted config key and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    /// Parses `name=v1,v2,...`.
    fn from_str(s: &str) -> Result<Self> {
        let (key, vals) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("axis `{s}` is not name=v1,v2,...")))?;
        let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(Error::Config(format!("axis `{s}` needs a name and at least one value")));
        }
        Ok(SweepAxis {
            key: key.trim().to_string(),
            values,
        })
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Returns `base` with the dotted `key` set to `raw` (parsed as a TOML value,
/// falling back to a string).
pub fn override_key(base: &ExperimentConfig, key: &str, raw: &str) -> Result<ExperimentConfig> {
    let mut root = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = &mut root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not name a table field")))?
        .insert(parts[parts.len() - 1].to_string(), parse_scalar(raw));
    let cfg: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// One cell of a sweep grid.
pub struct SweepCell {
    pub label: String,
    pub assignments: Vec<(String, String)>,
    pub config: ExperimentConfig,
}

/// Cartesian product of the axes applied to `base`.
pub fn sweep_cells(base: &ExperimentConfig, axes: &[SweepAxis]) -> Result<Vec<SweepCell>> {
    let mut cells = vec![SweepCell {
        label: String::new(),
        assignments: Vec::new(),
        config: base.clone(),
    }];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for v in &axis.values {
                let mut assignments = cell.assignments.clone();
                assignments.push((axis.key.clone(), v.clone()));
                next.push(SweepCell {
                    label: assignments
                        .iter()
                        .map(|(k, v)| format!("{k}={v}"))
                        .collect::<Vec<_>>()
                        .join("_"),
                    config: override_key(&cell.config, &axis.key, v)?,
                    assignments,
                });
            }
        }
        cells = next;
    }
    Ok(cells)
}

/// Runs every grid cell into `dir/<label>/` and returns the summaries.
pub fn run_sweep(base: &ExperimentConfig, axes: &[SweepAxis], dir: &Path) -> Result<Vec<(SweepCell, Summary)>> {
    let mut out = Vec::new();
    for cell in sweep_cells(base, axes)? {
        let summary = run_to_dir(&cell.config, &dir.join(&cell.label))?;
        out.push((cell, summary));
    }
    Ok(out)
}

/// Replays `rounds` rounds of `cfg` and compares the fast metric path with
/// the slow oracle every round.
pub fn oracle_check(cfg: &ExperimentConfig, rounds: usize) -> Result<Vec<crate::oracle::OracleReport>> {
    let mut cfg = cfg.clone();
    cfg.aggregator = AggregatorKind::Fera;
    in_pool(|| {
        let mut sim = Simulation::new(cfg.clone())?;
        let mut reports = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let out = sim.run_round()?;
            let fast = out.record.metrics.expect("fera round records metrics");
            let slow = crate::oracle::slow_metrics(&out.updates, &out.global_before, sim.root(), &cfg.filter)?;
            reports.push(crate::oracle::compare(&fast, &slow));
        }
        Ok(reports)
    })?
}
