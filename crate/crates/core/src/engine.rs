//! Round orchestration: phase schedule, client selection, parallel local
//! training, anomaly detection, robust aggregation, evaluation, and run
//! artifacts (round log, detection log, checkpoints, summary).

use std::io::{BufRead, BufReader, Write as _};
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{
    malicious_train, neurotoxin_mask, optimize_trigger, replacement_factor, AttackContext,
    AttackError, MaliciousPlan,
};
use crate::config::{
    AttackKindConfig, ConfigError, DataSourceKind, DefenseRuleKind, DetectorKind,
    ExperimentConfig, ModelPoisonKind, PartitionKind, PatchConfig, RoundsConfig, SelectionScheme,
};
use crate::data::{
    gen_synthetic, gen_synthetic_ood, load_mnist_idx, make_fragments, partition_dirichlet,
    partition_uniform, rect_patch, DataError, Dataset, PartitionMap, TriggerKind, TriggerSpec,
};
use crate::defenses::{
    add_gaussian_noise, aggregate, apply_local_dp, AggregationRule, ClientUpdate, DefenseError,
    DetectorFn, DetectorRegistry, FoolsGoldState, UpdateView,
};
use crate::metrics::{summarize, MetricError, MetricSummary, RoundDetection, SummaryInputs};
use crate::model::{
    evaluate_acc, evaluate_asr, init_model, load_checkpoint, local_train, save_checkpoint,
    ModelError, TrainConfig,
};
use crate::params::{
    derive_rng, l2_norm, sample_without_replacement, ParamError, ParamVector, SeedSpec, StreamTag,
};

/// Client-id coordinate for server-side random streams (model init,
/// post-aggregation noise), chosen so they can never collide with a real
/// client's streams or with the data generator's internal streams.
pub const SERVER_STREAM_CLIENT: u64 = u64::MAX;

/// Checkpoints are written every this many completed rounds (plus at every
/// phase boundary and at the end of the run).
pub const CHECKPOINT_EVERY: u64 = 50;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("output directory {0} already exists (pass --force to replace it)")]
    OutputExists(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("worker thread panicked while simulating client {0}")]
    WorkerPanic(usize),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path, source: std::io::Error) -> EngineError {
    EngineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Which stage of the run a round belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Warmup,
    Attack,
    Post,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Warmup => "warmup",
            Phase::Attack => "attack",
            Phase::Post => "post",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Resolved phase lengths and the round ranges they cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub pretrain: u64,
    pub warmup: u64,
    pub attack_window: u64,
    pub post_attack: u64,
}

impl PhaseSchedule {
    pub fn from_rounds(rounds: &RoundsConfig) -> Self {
        Self {
            pretrain: rounds.pretrain,
            warmup: rounds.warmup_rounds(),
            attack_window: rounds.attack_window,
            post_attack: rounds.post_attack,
        }
    }

    pub fn total(&self) -> u64 {
        self.pretrain + self.warmup + self.attack_window + self.post_attack
    }

    /// First attack round (also the end of warmup).
    pub fn attack_start(&self) -> u64 {
        self.pretrain + self.warmup
    }

    /// One past the last attack round.
    pub fn attack_end(&self) -> u64 {
        self.attack_start() + self.attack_window
    }

    pub fn phase_of(&self, round: u64) -> Phase {
        if round < self.pretrain {
            Phase::Pretrain
        } else if round < self.attack_start() {
            Phase::Warmup
        } else if round < self.attack_end() {
            Phase::Attack
        } else {
            Phase::Post
        }
    }

    /// Completed-round counts at which one phase hands over to the next.
    pub fn boundaries(&self) -> [u64; 3] {
        [self.pretrain, self.attack_start(), self.attack_end()]
    }
}

/// Wall-clock measurements for one round. Excluded from determinism
/// comparisons: everything else in a round record is bit-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundTimings {
    pub clients: Vec<ClientTiming>,
    pub aggregation_ms: u64,
    pub round_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientTiming {
    pub client_id: usize,
    pub train_ms: u64,
}

/// One line of `rounds.jsonl`. Fields serialize in declaration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub phase: Phase,
    /// Participating client ids, ascending.
    pub selected: Vec<usize>,
    /// Subset of `selected` that acted maliciously this round.
    pub malicious_selected: Vec<usize>,
    pub acc: f64,
    pub asr: f64,
    /// Norm of the parameter movement the server applied.
    pub aggregate_norm: f64,
    /// True when every update was dropped and the model did not move.
    pub empty_round: bool,
    /// Clients dropped for exceeding the round's time budget.
    pub dropped_timeouts: Vec<usize>,
    /// Client ids the detector flagged (present only when a detector is
    /// configured and active this round).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<Vec<usize>>,
    pub timings: RoundTimings,
}

/// End-of-run report written to `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub total_rounds: u64,
    pub phases: PhaseSchedule,
    pub n_malicious: usize,
    pub metrics: MetricSummary,
}

/// Resumable engine state beyond the parameter vector, stored as a sidecar
/// next to each checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineState {
    pub completed_rounds: u64,
    pub foolsgold: FoolsGoldState,
    /// Flat values of the previous round's applied parameter movement.
    pub prev_delta: Option<Vec<f64>>,
    pub norm_bound: Option<f64>,
    pub warmup_norms: Vec<f64>,
    /// Patch values of the most recently published optimized trigger.
    pub optimized_patch: Option<Vec<f64>>,
}

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn rounds(&self) -> PathBuf {
        self.root.join("rounds.jsonl")
    }

    pub fn detections(&self) -> PathBuf {
        self.root.join("detections.jsonl")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_bin(&self, completed_rounds: u64) -> PathBuf {
        self.checkpoints()
            .join(format!("round_{completed_rounds}.bin"))
    }

    pub fn checkpoint_state(&self, completed_rounds: u64) -> PathBuf {
        self.checkpoints()
            .join(format!("round_{completed_rounds}.state.json"))
    }
}

/// The per-round behavior shared by every attacker in the cohort.
struct RoundAttack {
    /// Malicious participants this round, ascending.
    attackers: Vec<usize>,
    /// Trigger every attacker stamps this round (full pattern, optimized
    /// pattern, or edge-case pool; distributed attackers swap in their own
    /// fragment).
    trigger: Arc<TriggerSpec>,
    /// Task-loss weight when the constrain-and-scale blend is active.
    constrain_alpha: Option<f64>,
    /// Keep-mask restricting the attack to dormant coordinates.
    mask: Option<Vec<bool>>,
    /// Multiplier applied to each attacker's finished update.
    scale: f64,
}

/// A fully prepared simulation: datasets, partition, triggers, and the
/// mutable federation state. Rounds advance one at a time and every random
/// draw is a pure function of (master seed, round, client, purpose), so
/// identical configurations replay identically regardless of worker count.
pub struct Engine {
    cfg: ExperimentConfig,
    schedule: PhaseSchedule,
    train: Dataset,
    test: Dataset,
    partition: PartitionMap,
    eval_indices: Option<Vec<usize>>,
    malicious: Vec<usize>,
    base_trigger: TriggerSpec,
    fragments: Vec<TriggerSpec>,
    attacker_tc: TrainConfig,
    detector: Option<DetectorFn>,
    context: AttackContext,
    theta: ParamVector,
    next_round: u64,
    fg_state: FoolsGoldState,
    prev_delta: Option<ParamVector>,
    norm_bound: Option<f64>,
    warmup_norms: Vec<f64>,
    last_published: Option<TriggerSpec>,
    acc_series: Vec<f64>,
    asr_series: Vec<f64>,
    detections: Vec<RoundDetection>,
}

impl Engine {
    /// Builds datasets, partition, triggers, and the initial model for a
    /// validated configuration.
    pub fn new(cfg: ExperimentConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let schedule = PhaseSchedule::from_rounds(&cfg.rounds);
        let (train, test, partition) = plan_partition(&cfg)?;

        if cfg.model.layer_sizes[0] != train.n_features() {
            return Err(EngineError::Invalid(format!(
                "model.layer_sizes must start with the data feature count \
                 ({} features, model expects {})",
                train.n_features(),
                cfg.model.layer_sizes[0]
            )));
        }
        if cfg.model.output_size() != train.n_classes() {
            return Err(EngineError::Invalid(format!(
                "model.layer_sizes must end with the class count \
                 ({} classes, model outputs {})",
                train.n_classes(),
                cfg.model.output_size()
            )));
        }
        if cfg.attack.target_class >= train.n_classes() {
            return Err(EngineError::Invalid(format!(
                "attack.target_class must be below the class count {} (got {})",
                train.n_classes(),
                cfg.attack.target_class
            )));
        }

        let eval_indices = if cfg.data.eval_subsample > 0
            && cfg.data.eval_subsample < test.n_samples()
        {
            let mut rng = derive_rng(SeedSpec {
                master_seed: cfg.master_seed,
                round: 0,
                client_id: 0,
                stream_tag: StreamTag::EvalSubsample,
            });
            let mut idx =
                sample_without_replacement(test.n_samples(), cfg.data.eval_subsample, &mut rng);
            idx.sort_unstable();
            Some(idx)
        } else {
            None
        };

        let n_malicious = cfg.n_malicious();
        let malicious: Vec<usize> = (0..n_malicious).collect();
        let (base_trigger, fragments) = build_triggers(&cfg, &train, n_malicious)?;

        if cfg.defense.rule == DefenseRuleKind::NormClipping
            && cfg.defense.norm_bound.explicit().is_none()
            && schedule.warmup == 0
        {
            return Err(EngineError::Invalid(
                "defense.norm_bound = \"auto\" derives the bound from warmup updates; \
                 it needs rounds.warmup > 0"
                    .into(),
            ));
        }

        let attacker_tc = TrainConfig {
            local_epochs: cfg.attack.local_epochs.unwrap_or(cfg.train.local_epochs),
            learning_rate: cfg.attack.learning_rate.unwrap_or(cfg.train.learning_rate),
            ..cfg.train.clone()
        };

        let detector = match cfg.defense.detector {
            DetectorKind::None => None,
            DetectorKind::MkrumDetector => Some(
                DetectorRegistry::builtin()
                    .get("mkrum_detector")
                    .expect("builtin registry provides mkrum_detector"),
            ),
        };

        let theta = init_model(
            &cfg.model,
            derive_rng(SeedSpec {
                master_seed: cfg.master_seed,
                round: 0,
                client_id: SERVER_STREAM_CLIENT,
                stream_tag: StreamTag::Init,
            }),
        )?;
        let norm_bound = cfg.defense.norm_bound.explicit();

        Ok(Self {
            cfg,
            schedule,
            train,
            test,
            partition,
            eval_indices,
            malicious,
            base_trigger,
            fragments,
            attacker_tc,
            detector,
            context: AttackContext::new(),
            theta,
            next_round: 0,
            fg_state: FoolsGoldState::default(),
            prev_delta: None,
            norm_bound,
            warmup_norms: Vec::new(),
            last_published: None,
            acc_series: Vec::new(),
            asr_series: Vec::new(),
            detections: Vec::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> PhaseSchedule {
        self.schedule
    }

    pub fn next_round(&self) -> u64 {
        self.next_round
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn acc_series(&self) -> &[f64] {
        &self.acc_series
    }

    pub fn asr_series(&self) -> &[f64] {
        &self.asr_series
    }

    pub fn detections(&self) -> &[RoundDetection] {
        &self.detections
    }

    fn stream(&self, round: u64, client_id: u64, tag: StreamTag) -> ChaCha8Rng {
        derive_rng(SeedSpec {
            master_seed: self.cfg.master_seed,
            round,
            client_id,
            stream_tag: tag,
        })
    }

    /// Selects this round's participants and the subset acting maliciously.
    /// Both lists are ascending. Selection draws from one server-side
    /// stream per round, so it is independent of worker scheduling.
    fn select(&self, round: u64, phase: Phase) -> (Vec<usize>, Vec<usize>) {
        let n = self.cfg.num_clients;
        let k = self.cfg.clients_per_round;
        let mut rng = self.stream(round, 0, StreamTag::Selection);
        let pick_sorted = |pool: &[usize], take: usize, rng: &mut ChaCha8Rng| {
            let mut picked: Vec<usize> = sample_without_replacement(pool.len(), take, rng)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            picked.sort_unstable();
            picked
        };
        let all: Vec<usize> = (0..n).collect();
        let m = self.malicious.len();
        if phase != Phase::Attack || m == 0 {
            return (pick_sorted(&all, k, &mut rng), Vec::new());
        }
        let benign: Vec<usize> = (self.malicious.len()..n).collect();
        match self.cfg.selection_scheme {
            SelectionScheme::RandomSampling => {
                let selected = pick_sorted(&all, k, &mut rng);
                let attackers: Vec<usize> = selected
                    .iter()
                    .copied()
                    .filter(|c| *c < m)
                    .collect();
                (selected, attackers)
            }
            SelectionScheme::SingleShot => {
                if round == self.schedule.attack_start() {
                    let mut selected = self.malicious.clone();
                    selected.extend(pick_sorted(&benign, k - m, &mut rng));
                    selected.sort_unstable();
                    (selected, self.malicious.clone())
                } else {
                    (pick_sorted(&all, k, &mut rng), Vec::new())
                }
            }
            SelectionScheme::FixedFrequency => {
                let f = self.cfg.poison_frequency.expect("validated by config");
                let attack_idx = round - self.schedule.attack_start();
                if attack_idx % f == 0 {
                    let forced = self.malicious[(attack_idx / f) as usize % m];
                    let mut selected = vec![forced];
                    selected.extend(pick_sorted(&benign, k - 1, &mut rng));
                    selected.sort_unstable();
                    (selected, vec![forced])
                } else {
                    (pick_sorted(&benign, k, &mut rng), Vec::new())
                }
            }
            SelectionScheme::Continuous => {
                let mut selected = self.malicious.clone();
                selected.extend(pick_sorted(&benign, k - m, &mut rng));
                selected.sort_unstable();
                (selected, self.malicious.clone())
            }
        }
    }

    /// Resolves the cohort-wide attack behavior for this round and, for
    /// optimized patterns, publishes the round's trigger before any client
    /// trains.
    fn prepare_attack(
        &mut self,
        round: u64,
        phase: Phase,
        attackers: &[usize],
    ) -> Result<Option<RoundAttack>, EngineError> {
        if phase != Phase::Attack || attackers.is_empty() {
            return Ok(None);
        }
        let cohort = attackers.len();
        let gamma = self.cfg.attack.scale_factor.resolve_with(|| {
            replacement_factor(self.cfg.clients_per_round, self.cfg.server_lr, cohort)
        });
        let (constrain_alpha, mask, mut scale) = match self.cfg.attack.model_poison {
            ModelPoisonKind::None => (None, None, 1.0),
            ModelPoisonKind::ModelReplacement => (None, None, gamma),
            ModelPoisonKind::ConstrainAndScale => (Some(self.cfg.attack.alpha_blend), None, gamma),
            ModelPoisonKind::NeurotoxinMask => {
                let (mask, _had_no_history) = neurotoxin_mask(
                    self.prev_delta.as_ref(),
                    self.cfg.attack.mask_ratio,
                    self.theta.len(),
                )?;
                (None, Some(mask), 1.0)
            }
        };
        // The coordinated single-shot round always boosts for replacement.
        if self.cfg.selection_scheme == SelectionScheme::SingleShot
            && round == self.schedule.attack_start()
        {
            scale = gamma;
        }

        let trigger = if self.cfg.attack.attack_kind == AttackKindConfig::OptimizedPattern {
            let optimize_now = self.cfg.attack.trigger_opt_steps > 0
                && (self.cfg.attack.reoptimize_each_round || self.last_published.is_none());
            if optimize_now {
                let publisher = attackers[0];
                let indices = self.partition.client_indices(publisher);
                if !indices.is_empty() {
                    let local = self.local_dataset(indices)?;
                    let base = self
                        .last_published
                        .clone()
                        .unwrap_or_else(|| self.base_trigger.clone());
                    let mut rng = self.stream(round, publisher as u64, StreamTag::TriggerOpt);
                    match optimize_trigger(
                        &self.theta,
                        &self.cfg.model,
                        &local,
                        &base,
                        self.cfg.attack.trigger_opt_steps,
                        self.cfg.attack.trigger_opt_lr,
                        self.cfg.attack.trigger_opt_batch,
                        &mut rng,
                    ) {
                        Ok((optimized, _stats)) => {
                            self.context.publish(round, publisher, optimized.clone())?;
                            self.last_published = Some(optimized);
                        }
                        // A publisher whose local data is all target-class
                        // cannot optimize; the cohort keeps the previous
                        // trigger.
                        Err(AttackError::NoCandidates) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            if self.context.fetch(round).is_none() {
                if let Some(t) = &self.last_published {
                    self.context.publish(round, attackers[0], t.clone())?;
                }
            }
            self.context
                .fetch(round)
                .unwrap_or_else(|| Arc::new(self.base_trigger.clone()))
        } else {
            Arc::new(self.base_trigger.clone())
        };

        Ok(Some(RoundAttack {
            attackers: attackers.to_vec(),
            trigger,
            constrain_alpha,
            mask,
            scale,
        }))
    }

    /// A standalone dataset holding one client's samples.
    fn local_dataset(&self, indices: &[usize]) -> Result<Dataset, EngineError> {
        let (xs, ys) = self.train.gather(indices);
        Ok(Dataset::new(
            xs,
            ys,
            self.train.n_classes(),
            self.train.image_shape(),
        )?)
    }

    /// Runs one client's local pass. Pure in (round, client): every random
    /// draw comes from streams keyed by them, never by scheduling order.
    /// Returns `None` for a selected client with no data.
    fn simulate_client(
        &self,
        round: u64,
        phase: Phase,
        client: usize,
        attack: Option<&RoundAttack>,
    ) -> Result<Option<ClientUpdate>, EngineError> {
        let indices = self.partition.client_indices(client);
        if indices.is_empty() {
            return Ok(None);
        }
        let start = Instant::now();
        let rng = self.stream(round, client as u64, StreamTag::Shuffle);
        let is_attacker =
            attack.is_some_and(|a| a.attackers.binary_search(&client).is_ok());
        let out = if is_attacker {
            let a = attack.expect("attacker implies an attack plan");
            let fragment;
            let trigger: &TriggerSpec = if self.cfg.attack.attack_kind
                == AttackKindConfig::DistributedPattern
                && !self.fragments.is_empty()
            {
                let rank = self
                    .malicious
                    .binary_search(&client)
                    .expect("attackers are malicious ids");
                fragment = &self.fragments[rank % self.fragments.len()];
                fragment
            } else {
                &a.trigger
            };
            let plan = MaliciousPlan {
                trigger,
                poison_count: self.cfg.attack.poison_count_per_batch,
                constrain: a.constrain_alpha.map(|alpha| (alpha, &self.theta)),
                mask: a.mask.as_deref(),
                scale: a.scale,
            };
            malicious_train(
                &self.theta,
                &self.cfg.model,
                &self.attacker_tc,
                &self.train,
                indices,
                rng,
                &plan,
            )?
        } else {
            let mut out = local_train(
                &self.theta,
                &self.cfg.model,
                &self.cfg.train,
                &self.train,
                indices,
                rng,
            )?;
            // Honest clients apply local differential privacy outside the
            // pretraining phase; attackers do not follow the protocol.
            if phase != Phase::Pretrain {
                if let (Some(bound), Some(sigma)) =
                    (self.cfg.defense.ldp_bound, self.cfg.defense.ldp_sigma)
                {
                    let mut noise_rng = self.stream(round, client as u64, StreamTag::Noise);
                    apply_local_dp(&mut out.delta, bound, sigma, &mut noise_rng);
                }
            }
            out
        };
        let train_wall_ms = start.elapsed().as_millis() as u64;
        Ok(Some(ClientUpdate {
            client_id: client,
            delta: out.delta,
            declared_num_samples: out.n_samples,
            train_wall_ms,
            truth_is_malicious: is_attacker,
        }))
    }

    /// Simulates the selected clients on a pool of worker threads. Results
    /// come back in selection order no matter which worker ran what.
    fn dispatch(
        &self,
        round: u64,
        phase: Phase,
        selected: &[usize],
        attack: Option<&RoundAttack>,
    ) -> Vec<Result<Option<ClientUpdate>, EngineError>> {
        let n_tasks = selected.len();
        let workers = self.cfg.workers.min(n_tasks).max(1);
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Option<ClientUpdate>, EngineError>>>> =
            (0..n_tasks).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let next = &next;
                let slots = &slots;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n_tasks {
                        break;
                    }
                    let client = selected[i];
                    let result = std::panic::catch_unwind(AssertUnwindSafe(|| {
                        self.simulate_client(round, phase, client, attack)
                    }))
                    .unwrap_or(Err(EngineError::WorkerPanic(client)));
                    *slots[i].lock().expect("result slot") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .enumerate()
            .map(|(i, slot)| {
                slot.into_inner()
                    .expect("result slot")
                    .unwrap_or(Err(EngineError::WorkerPanic(selected[i])))
            })
            .collect()
    }

    /// The aggregation rule in force for a phase. Pretraining always uses
    /// the plain average; the clipping rule waits for its bound to resolve
    /// at the end of warmup.
    fn resolved_rule(&self, phase: Phase) -> AggregationRule {
        if phase == Phase::Pretrain {
            return AggregationRule::FedAvg;
        }
        let d = &self.cfg.defense;
        match d.rule {
            DefenseRuleKind::Fedavg => AggregationRule::FedAvg,
            DefenseRuleKind::Median => AggregationRule::Median,
            DefenseRuleKind::TrimmedMean => AggregationRule::TrimmedMean { trim_k: d.trim_k },
            DefenseRuleKind::Krum => AggregationRule::Krum { f: d.krum_f },
            DefenseRuleKind::MultiKrum => AggregationRule::MultiKrum {
                f: d.krum_f,
                m: d.krum_m,
            },
            DefenseRuleKind::Rfa => AggregationRule::Rfa {
                tol: d.rfa_tol,
                max_iter: d.rfa_max_iter,
            },
            DefenseRuleKind::Foolsgold => AggregationRule::FoolsGold,
            DefenseRuleKind::Rlr => AggregationRule::Rlr {
                threshold: d.rlr_threshold as f64,
            },
            DefenseRuleKind::NormClipping => match self.norm_bound {
                Some(bound) => AggregationRule::NormClipping { bound },
                None => AggregationRule::FedAvg,
            },
        }
    }

    /// The trigger the server-side evaluator stamps this round: the round's
    /// published optimized trigger when one exists, else the most recent
    /// one, else the static baseline.
    fn eval_trigger(&self, round: u64) -> TriggerSpec {
        if self.cfg.attack.attack_kind == AttackKindConfig::OptimizedPattern {
            if let Some(t) = self.context.fetch(round) {
                return (*t).clone();
            }
            if let Some(t) = &self.last_published {
                return t.clone();
            }
        }
        self.base_trigger.clone()
    }

    /// Advances the simulation one round: select, train, detect, aggregate,
    /// step, evaluate.
    pub fn run_round(&mut self) -> Result<RoundRecord, EngineError> {
        let round = self.next_round;
        let phase = self.schedule.phase_of(round);
        let round_start = Instant::now();

        let (selected, attackers) = self.select(round, phase);
        self.context.begin_round(round);
        let round_attack = self.prepare_attack(round, phase, &attackers)?;

        let results = self.dispatch(round, phase, &selected, round_attack.as_ref());
        let mut updates: Vec<ClientUpdate> = Vec::with_capacity(selected.len());
        let mut client_timings = Vec::with_capacity(selected.len());
        for result in results {
            if let Some(update) = result? {
                client_timings.push(ClientTiming {
                    client_id: update.client_id,
                    train_ms: update.train_wall_ms,
                });
                updates.push(update);
            }
        }

        let mut dropped_timeouts = Vec::new();
        if self.cfg.enforce_timeouts {
            if let Some(budget) = self.cfg.timeout_ms {
                updates.retain(|u| {
                    if u.train_wall_ms > budget {
                        dropped_timeouts.push(u.client_id);
                        false
                    } else {
                        true
                    }
                });
            }
        }

        let mut detection: Option<Vec<usize>> = None;
        if phase != Phase::Pretrain && !updates.is_empty() {
            if let Some(detector) = self.detector {
                let truth_count = updates.iter().filter(|u| u.truth_is_malicious).count();
                let wanted = self
                    .cfg
                    .defense
                    .detector_f
                    .resolve_with(|| truth_count);
                // The score-based detector needs at least one survivor.
                let f_eff = wanted.min(updates.len().saturating_sub(1));
                let flagged = if f_eff == 0 {
                    Vec::new()
                } else {
                    let views: Vec<UpdateView> = updates.iter().map(|u| u.view()).collect();
                    detector(&views, f_eff)?
                };
                updates.retain(|u| !flagged.contains(&u.client_id));
                detection = Some(flagged);
            }
        }

        if phase == Phase::Warmup {
            for u in &updates {
                self.warmup_norms.push(l2_norm(&u.delta)?);
            }
        }

        let agg_start = Instant::now();
        let empty_round = updates.is_empty();
        let mut aggregate_norm = 0.0;
        if !empty_round {
            let rule = self.resolved_rule(phase);
            let views: Vec<UpdateView> = updates.iter().map(|u| u.view()).collect();
            let outcome = aggregate(rule, &views, self.cfg.server_lr, &mut self.fg_state)?;
            let applied = if outcome.includes_server_lr {
                outcome.update
            } else {
                outcome.update.scaled(self.cfg.server_lr)
            };
            self.theta.add_assign(&applied)?;
            aggregate_norm = l2_norm(&applied)?;
            if self.cfg.defense.weakdp_sigma > 0.0 && phase != Phase::Pretrain {
                let mut rng = self.stream(round, SERVER_STREAM_CLIENT, StreamTag::ServerNoise);
                add_gaussian_noise(&mut self.theta, self.cfg.defense.weakdp_sigma, &mut rng);
            }
            self.prev_delta = Some(applied);
        }
        let aggregation_ms = agg_start.elapsed().as_millis() as u64;

        let eval_trigger = self.eval_trigger(round);
        let eval_idx = self.eval_indices.as_deref();
        let acc = evaluate_acc(&self.theta, &self.cfg.model, &self.test, eval_idx)?;
        let asr = evaluate_asr(&self.theta, &self.cfg.model, &self.test, eval_idx, &eval_trigger)?;
        self.acc_series.push(acc);
        self.asr_series.push(asr);

        let record = RoundRecord {
            round,
            phase,
            selected,
            malicious_selected: attackers,
            acc,
            asr,
            aggregate_norm,
            empty_round,
            dropped_timeouts,
            detection: detection.clone(),
            timings: RoundTimings {
                clients: client_timings,
                aggregation_ms,
                round_ms: round_start.elapsed().as_millis() as u64,
            },
        };
        if let Some(flagged) = detection {
            self.detections.push(RoundDetection {
                round,
                flagged,
                truth: record.malicious_selected.clone(),
                selected: record.selected.clone(),
            });
        }

        self.next_round += 1;
        if self.next_round == self.schedule.attack_start() {
            self.resolve_norm_bound()?;
        }
        Ok(record)
    }

    /// Fixes the clipping bound to the median benign update norm observed
    /// during warmup.
    fn resolve_norm_bound(&mut self) -> Result<(), EngineError> {
        if self.norm_bound.is_some() || self.cfg.defense.rule != DefenseRuleKind::NormClipping {
            return Ok(());
        }
        if self.warmup_norms.is_empty() {
            return Err(EngineError::Invalid(
                "defense.norm_bound = \"auto\" found no warmup updates to derive a bound from"
                    .into(),
            ));
        }
        let mut norms = self.warmup_norms.clone();
        norms.sort_by(f64::total_cmp);
        let n = norms.len();
        let median = if n % 2 == 1 {
            norms[n / 2]
        } else {
            0.5 * (norms[n / 2 - 1] + norms[n / 2])
        };
        self.norm_bound = Some(median);
        Ok(())
    }

    /// End-of-run summary over everything recorded so far.
    pub fn summary(&self) -> RunSummary {
        let s = self.schedule;
        let attack_range = (s.attack_window > 0)
            .then(|| (s.attack_start() as usize, s.attack_end() as usize));
        let post_range =
            (s.post_attack > 0).then(|| (s.attack_end() as usize, s.total() as usize));
        let metrics = summarize(
            SummaryInputs {
                asr: &self.asr_series,
                acc: &self.acc_series,
                attack_range,
                post_range,
                detections: &self.detections,
                detector_configured: self.cfg.defense.detector != DetectorKind::None,
            },
            &self.cfg.metrics,
        );
        RunSummary {
            name: self.cfg.name.clone(),
            total_rounds: s.total(),
            phases: s,
            n_malicious: self.malicious.len(),
            metrics,
        }
    }

    /// Resumable state beyond the parameter vector.
    pub fn snapshot_state(&self) -> EngineState {
        EngineState {
            completed_rounds: self.next_round,
            foolsgold: self.fg_state.clone(),
            prev_delta: self.prev_delta.as_ref().map(|d| d.values().to_vec()),
            norm_bound: self.norm_bound,
            warmup_norms: self.warmup_norms.clone(),
            optimized_patch: self
                .last_published
                .as_ref()
                .map(|t| t.patch().iter().map(|p| p.value).collect()),
        }
    }

    /// Restores a snapshot taken at `state.completed_rounds`, together with
    /// the parameter vector and the per-round series recorded up to that
    /// point.
    pub fn restore(
        &mut self,
        theta: ParamVector,
        state: EngineState,
        acc_series: Vec<f64>,
        asr_series: Vec<f64>,
        detections: Vec<RoundDetection>,
    ) -> Result<(), EngineError> {
        if theta.len() != self.theta.len() {
            return Err(EngineError::Resume(format!(
                "checkpoint has {} parameters but the model needs {}",
                theta.len(),
                self.theta.len()
            )));
        }
        if acc_series.len() as u64 != state.completed_rounds
            || asr_series.len() as u64 != state.completed_rounds
        {
            return Err(EngineError::Resume(format!(
                "round log holds {} rounds but the checkpoint is at round {}",
                acc_series.len(),
                state.completed_rounds
            )));
        }
        self.theta = ParamVector::new(theta.into_values(), self.cfg.model.layout())?;
        self.next_round = state.completed_rounds;
        self.fg_state = state.foolsgold;
        self.prev_delta = match state.prev_delta {
            Some(values) => Some(ParamVector::new(values, self.cfg.model.layout())?),
            None => None,
        };
        self.norm_bound = state.norm_bound.or(self.norm_bound);
        self.warmup_norms = state.warmup_norms;
        self.last_published = match state.optimized_patch {
            Some(values) => Some(self.base_trigger.with_patch_values(&values)?),
            None => None,
        };
        self.acc_series = acc_series;
        self.asr_series = asr_series;
        self.detections = detections;
        Ok(())
    }
}

/// Builds the datasets and the client partition a configuration produces,
/// without touching the model. A dry run of this function sees exactly the
/// same sample assignment as a real run with the same config.
pub fn plan_partition(
    cfg: &ExperimentConfig,
) -> Result<(Dataset, Dataset, PartitionMap), EngineError> {
    cfg.validate()?;
    let (train, test) = build_datasets(cfg)?;
    let mut partition = match cfg.data.partition {
        PartitionKind::Dirichlet => partition_dirichlet(
            &train,
            cfg.num_clients,
            cfg.data.alpha,
            cfg.master_seed,
            cfg.data.allow_empty_clients,
        )?,
        PartitionKind::Uniform => partition_uniform(&train, cfg.num_clients, cfg.master_seed)?,
    };
    truncate_partition(&mut partition, cfg.data.max_samples_per_client, cfg.master_seed);
    Ok((train, test, partition))
}

/// Builds the train/test datasets for a configuration.
fn build_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), EngineError> {
    match cfg.data.source {
        DataSourceKind::Synthetic => {
            let d = &cfg.data;
            // One deterministic pool split into train and held-out test.
            let n_test = (d.n_samples / 5).max(d.n_classes);
            let pool = gen_synthetic(
                d.n_samples + n_test,
                d.n_features,
                d.n_classes,
                d.spread,
                cfg.master_seed,
            )?;
            let train_idx: Vec<usize> = (0..d.n_samples).collect();
            let test_idx: Vec<usize> = (d.n_samples..d.n_samples + n_test).collect();
            let (train_x, train_y) = pool.gather(&train_idx);
            let (test_x, test_y) = pool.gather(&test_idx);
            let train = Dataset::new(train_x, train_y, d.n_classes, None)?;
            let test = Dataset::new(test_x, test_y, d.n_classes, None)?;
            Ok((train, test))
        }
        DataSourceKind::Mnist => {
            let dir = PathBuf::from(cfg.data.dir.as_deref().expect("validated by config"));
            let train = load_mnist_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_mnist_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            Ok((train, test))
        }
    }
}

/// Caps each client at `max_samples` training samples with a per-client
/// seeded draw; 0 disables the cap.
fn truncate_partition(partition: &mut PartitionMap, max_samples: usize, master_seed: u64) {
    if max_samples == 0 {
        return;
    }
    for (client, indices) in partition.assignments_mut().iter_mut().enumerate() {
        if indices.len() <= max_samples {
            continue;
        }
        let mut rng = derive_rng(SeedSpec {
            master_seed,
            round: 0,
            client_id: client as u64,
            stream_tag: StreamTag::Truncate,
        });
        let keep = sample_without_replacement(indices.len(), max_samples, &mut rng);
        let mut kept: Vec<usize> = keep.into_iter().map(|i| indices[i]).collect();
        kept.sort_unstable();
        *indices = kept;
    }
}

/// Builds the static trigger (and fragments for distributed patterns).
fn build_triggers(
    cfg: &ExperimentConfig,
    train: &Dataset,
    n_malicious: usize,
) -> Result<(TriggerSpec, Vec<TriggerSpec>), EngineError> {
    let target = cfg.attack.target_class;
    let image_shape = train.image_shape();
    let make_patch = || -> Vec<crate::data::PatchPixel> {
        let p = cfg.attack.patch.clone().unwrap_or_else(|| {
            if image_shape.is_some() {
                PatchConfig::default()
            } else {
                // Flat feature vectors are a 1-row space; stamp the
                // leading features instead.
                PatchConfig {
                    origin: [0, 0],
                    size: [1, 3.min(train.n_features())],
                    value: 1.0,
                }
            }
        });
        let channels = image_shape.map_or(1, |(_, _, ch)| ch);
        rect_patch(
            (p.origin[0], p.origin[1]),
            (p.size[0], p.size[1]),
            p.value,
            channels,
        )
    };
    match cfg.attack.attack_kind {
        AttackKindConfig::FixedPattern => {
            let trigger = TriggerSpec::pattern(TriggerKind::FixedPattern, target, make_patch())?;
            trigger.patch_feature_indices(image_shape, train.n_features())?;
            Ok((trigger, Vec::new()))
        }
        AttackKindConfig::OptimizedPattern => {
            let trigger =
                TriggerSpec::pattern(TriggerKind::OptimizedPattern, target, make_patch())?;
            trigger.patch_feature_indices(image_shape, train.n_features())?;
            Ok((trigger, Vec::new()))
        }
        AttackKindConfig::DistributedPattern => {
            let full =
                TriggerSpec::pattern(TriggerKind::DistributedFragment, target, make_patch())?;
            full.patch_feature_indices(image_shape, train.n_features())?;
            let pixels = full.patch().len();
            let count = match cfg.attack.fragment_count {
                Some(c) => c,
                // One fragment per malicious client when that divides the
                // patch evenly, otherwise the largest divisor that fits.
                None => {
                    let cap = n_malicious.max(1).min(pixels);
                    (1..=cap).rev().find(|d| pixels % d == 0).unwrap_or(1)
                }
            };
            let fragments = make_fragments(&full, count)?;
            Ok((full, fragments))
        }
        AttackKindConfig::EdgeCase => {
            let pool_cfg = cfg.attack.edge_pool.clone().unwrap_or_default();
            let ood_label = (target + 1) % train.n_classes();
            let pool = gen_synthetic_ood(
                pool_cfg.n_samples,
                train.n_features(),
                train.n_classes(),
                pool_cfg.spread,
                cfg.master_seed,
                ood_label,
            )?;
            Ok((
                TriggerSpec::edge_case(target, Arc::new(pool))?,
                Vec::new(),
            ))
        }
    }
}

/// Options for a file-producing run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// The run directory (artifacts land directly inside).
    pub run_dir: PathBuf,
    /// Replace an existing run directory instead of refusing.
    pub force: bool,
    /// Continue from the checkpoint with this many completed rounds.
    pub resume_from: Option<u64>,
    /// Pause after this many completed rounds (a checkpoint is written so
    /// the run can resume).
    pub stop_after: Option<u64>,
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub completed_rounds: u64,
    pub total_rounds: u64,
    /// Present only when the run reached its final round.
    pub summary: Option<RunSummary>,
}

fn write_json_line<T: Serialize>(
    file: &mut std::io::BufWriter<std::fs::File>,
    path: &Path,
    value: &T,
) -> Result<(), EngineError> {
    let line = serde_json::to_string(value)?;
    file.write_all(line.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .and_then(|_| file.flush())
        .map_err(|e| io_err(path, e))
}

/// Parses a JSON-lines file of round records.
pub fn read_rounds(path: &Path) -> Result<Vec<RoundRecord>, EngineError> {
    read_json_lines(path)
}

/// Parses a JSON-lines file of detection reports.
pub fn read_detections(path: &Path) -> Result<Vec<RoundDetection>, EngineError> {
    read_json_lines(path)
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EngineError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

fn read_raw_lines(path: &Path) -> Result<Vec<String>, EngineError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| io_err(path, e))
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), EngineError> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn save_checkpoint_with_state(
    paths: &RunPaths,
    engine: &Engine,
    completed: u64,
) -> Result<(), EngineError> {
    save_checkpoint(&paths.checkpoint_bin(completed), engine.theta())?;
    let state_path = paths.checkpoint_state(completed);
    let state = serde_json::to_string_pretty(&engine.snapshot_state())?;
    std::fs::write(&state_path, state).map_err(|e| io_err(&state_path, e))
}

fn checkpoint_due(schedule: PhaseSchedule, completed: u64) -> bool {
    completed == schedule.total()
        || (completed > 0 && completed % CHECKPOINT_EVERY == 0)
        || schedule.boundaries().contains(&completed)
}

/// Runs an experiment end to end, producing `rounds.jsonl`,
/// `detections.jsonl`, periodic checkpoints, and (when the final round is
/// reached) `summary.json` in the run directory. `observer` sees every
/// round record as it is written.
pub fn run_experiment(
    cfg: ExperimentConfig,
    opts: &RunOptions,
    mut observer: impl FnMut(&RoundRecord),
) -> Result<RunOutcome, EngineError> {
    cfg.validate()?;
    let paths = RunPaths::new(&opts.run_dir);
    let mut engine = Engine::new(cfg)?;
    let schedule = engine.schedule();
    let total = schedule.total();

    match opts.resume_from {
        None => {
            if paths.root.exists() {
                if !opts.force {
                    return Err(EngineError::OutputExists(paths.root.display().to_string()));
                }
                std::fs::remove_dir_all(&paths.root).map_err(|e| io_err(&paths.root, e))?;
            }
            std::fs::create_dir_all(paths.checkpoints())
                .map_err(|e| io_err(&paths.checkpoints(), e))?;
            let echo = engine.config().to_toml_string()?;
            std::fs::write(paths.config(), echo).map_err(|e| io_err(&paths.config(), e))?;
            save_checkpoint_with_state(&paths, &engine, 0)?;
            write_lines(&paths.rounds(), &[])?;
            write_lines(&paths.detections(), &[])?;
        }
        Some(resume_at) => {
            restore_for_resume(&paths, &mut engine, resume_at)?;
        }
    }

    let rounds_path = paths.rounds();
    let detections_path = paths.detections();
    let mut rounds_file = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .append(true)
            .open(&rounds_path)
            .map_err(|e| io_err(&rounds_path, e))?,
    );
    let mut detections_file = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .append(true)
            .open(&detections_path)
            .map_err(|e| io_err(&detections_path, e))?,
    );

    let stop = opts.stop_after.unwrap_or(total).min(total);
    while engine.next_round() < stop {
        let record = engine.run_round()?;
        write_json_line(&mut rounds_file, &rounds_path, &record)?;
        if record.detection.is_some() {
            let detection = engine
                .detections()
                .last()
                .expect("detection recorded this round");
            write_json_line(&mut detections_file, &detections_path, detection)?;
        }
        let completed = engine.next_round();
        if checkpoint_due(schedule, completed) || completed == stop {
            save_checkpoint_with_state(&paths, &engine, completed)?;
        }
        observer(&record);
    }

    let completed = engine.next_round();
    let summary = if completed == total {
        let summary = engine.summary();
        let text = serde_json::to_string_pretty(&summary)?;
        std::fs::write(paths.summary(), text).map_err(|e| io_err(&paths.summary(), e))?;
        Some(summary)
    } else {
        None
    };
    Ok(RunOutcome {
        run_dir: paths.root.clone(),
        completed_rounds: completed,
        total_rounds: total,
        summary,
    })
}

/// Rewinds the run directory to `resume_at` completed rounds and loads the
/// checkpoint into the engine: the round and detection logs are truncated
/// to that point (byte-for-byte) and the recorded series are rebuilt from
/// the kept lines.
fn restore_for_resume(
    paths: &RunPaths,
    engine: &mut Engine,
    resume_at: u64,
) -> Result<(), EngineError> {
    if !paths.root.exists() {
        return Err(EngineError::Resume(format!(
            "run directory {} does not exist",
            paths.root.display()
        )));
    }
    let echoed = crate::config::parse_config(&paths.config(), &[])?;
    let mut current = engine.config().clone();
    current.workers = echoed.workers; // worker count may change freely
    if echoed != current {
        return Err(EngineError::Resume(
            "the configuration differs from the one this run was started with \
             (only `workers` may change on resume)"
                .into(),
        ));
    }
    let bin = paths.checkpoint_bin(resume_at);
    if !bin.exists() {
        return Err(EngineError::Resume(format!(
            "no checkpoint at {} completed rounds ({} missing)",
            resume_at,
            bin.display()
        )));
    }
    let theta = load_checkpoint(&bin)?;
    let state_path = paths.checkpoint_state(resume_at);
    let state_text =
        std::fs::read_to_string(&state_path).map_err(|e| io_err(&state_path, e))?;
    let state: EngineState = serde_json::from_str(&state_text)?;
    if state.completed_rounds != resume_at {
        return Err(EngineError::Resume(format!(
            "state sidecar says {} completed rounds, expected {}",
            state.completed_rounds, resume_at
        )));
    }

    let raw_rounds = read_raw_lines(&paths.rounds())?;
    if (raw_rounds.len() as u64) < resume_at {
        return Err(EngineError::Resume(format!(
            "round log holds {} rounds, cannot resume from {}",
            raw_rounds.len(),
            resume_at
        )));
    }
    let kept_rounds: Vec<String> = raw_rounds[..resume_at as usize].to_vec();
    let mut acc = Vec::with_capacity(kept_rounds.len());
    let mut asr = Vec::with_capacity(kept_rounds.len());
    for line in &kept_rounds {
        let record: RoundRecord = serde_json::from_str(line)?;
        acc.push(record.acc);
        asr.push(record.asr);
    }
    write_lines(&paths.rounds(), &kept_rounds)?;

    let raw_detections = read_raw_lines(&paths.detections())?;
    let mut kept_detections = Vec::new();
    let mut detections = Vec::new();
    for line in raw_detections {
        let d: RoundDetection = serde_json::from_str(&line)?;
        if d.round < resume_at {
            detections.push(d);
            kept_detections.push(line);
        }
    }
    write_lines(&paths.detections(), &kept_detections)?;

    engine.restore(theta, state, acc, asr, detections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn tiny_toml() -> String {
        r#"
name = "engine-test"
master_seed = 11
num_clients = 8
clients_per_round = 4
server_lr = 0.5
malicious_fraction = 0.25
selection_scheme = "continuous"

[rounds]
pretrain = 2
warmup = 1
attack_window = 3
post_attack = 1

[data]
source = "synthetic"
n_samples = 240
n_features = 16
n_classes = 4
spread = 0.1
partition = "uniform"
max_samples_per_client = 0

[model]
layer_sizes = [16, 12, 4]
activation = "relu"
init_scale = 0.2

[train]
local_epochs = 1
batch_size = 16
learning_rate = 0.2
momentum = 0.0
weight_decay = 0.0

[attack]
attack_kind = "fixed_pattern"
target_class = 0
poison_count_per_batch = 4
patch = { origin = [0, 0], size = [1, 3], value = 1.0 }
"#
        .to_string()
    }

    fn cfg_with(overrides: &[&str]) -> ExperimentConfig {
        let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        parse_config_str(&tiny_toml(), &overrides).unwrap()
    }

    fn strip_timings(record: &RoundRecord) -> serde_json::Value {
        let mut v = serde_json::to_value(record).unwrap();
        v.as_object_mut().unwrap().remove("timings");
        v
    }

    #[test]
    fn phase_ladder_assigns_rounds_in_order() {
        let s = PhaseSchedule {
            pretrain: 2,
            warmup: 1,
            attack_window: 3,
            post_attack: 1,
        };
        let phases: Vec<Phase> = (0..s.total()).map(|r| s.phase_of(r)).collect();
        assert_eq!(
            phases,
            vec![
                Phase::Pretrain,
                Phase::Pretrain,
                Phase::Warmup,
                Phase::Attack,
                Phase::Attack,
                Phase::Attack,
                Phase::Post,
            ]
        );
        assert_eq!(s.attack_start(), 3);
        assert_eq!(s.attack_end(), 6);
        assert_eq!(s.boundaries(), [2, 3, 6]);
    }

    #[test]
    fn continuous_scheme_forces_every_malicious_client_each_attack_round() {
        let engine = Engine::new(cfg_with(&[])).unwrap();
        // 8 clients at 25% malicious: ids 0 and 1.
        assert_eq!(engine.malicious, vec![0, 1]);
        for round in 3..6 {
            let (selected, attackers) = engine.select(round, Phase::Attack);
            assert_eq!(attackers, vec![0, 1]);
            assert_eq!(selected.len(), 4);
            assert!(selected.windows(2).all(|w| w[0] < w[1]), "sorted");
            assert!(attackers.iter().all(|a| selected.contains(a)));
        }
        // Outside the window nobody attacks.
        let (_, attackers) = engine.select(1, Phase::Pretrain);
        assert!(attackers.is_empty());
    }

    #[test]
    fn single_shot_scheme_attacks_exactly_once() {
        let engine = Engine::new(cfg_with(&["selection_scheme=single_shot"])).unwrap();
        let mut attack_rounds = Vec::new();
        for round in 3..6 {
            let (selected, attackers) = engine.select(round, Phase::Attack);
            assert_eq!(selected.len(), 4);
            if !attackers.is_empty() {
                attack_rounds.push(round);
                assert_eq!(attackers, vec![0, 1]);
            }
        }
        assert_eq!(attack_rounds, vec![3], "only the designated round");
    }

    #[test]
    fn fixed_frequency_scheme_attacks_on_its_period() {
        let engine = Engine::new(cfg_with(&[
            "selection_scheme=fixed_frequency",
            "poison_frequency=2",
        ]))
        .unwrap();
        let mut per_round = Vec::new();
        for round in 3..6 {
            let (selected, attackers) = engine.select(round, Phase::Attack);
            assert_eq!(selected.len(), 4);
            per_round.push(attackers.len());
            // Off-schedule rounds draw from the benign pool only.
            if attackers.is_empty() {
                assert!(selected.iter().all(|&c| c >= 2));
            } else {
                assert_eq!(attackers.len(), 1);
                assert!(attackers[0] < 2);
            }
        }
        assert_eq!(per_round, vec![1, 0, 1]);
    }

    #[test]
    fn random_sampling_marks_sampled_malicious_ids_as_attackers() {
        let engine = Engine::new(cfg_with(&["selection_scheme=random_sampling"])).unwrap();
        for round in 3..6 {
            let (selected, attackers) = engine.select(round, Phase::Attack);
            let expected: Vec<usize> =
                selected.iter().copied().filter(|&c| c < 2).collect();
            assert_eq!(attackers, expected);
        }
    }

    #[test]
    fn selection_is_reproducible_per_round() {
        let engine = Engine::new(cfg_with(&[])).unwrap();
        let a = engine.select(4, Phase::Attack);
        let b = engine.select(4, Phase::Attack);
        assert_eq!(a, b);
        let c = engine.select(5, Phase::Attack);
        assert_ne!(a.0, c.0, "different rounds draw different cohorts");
    }

    #[test]
    fn full_runs_are_bit_deterministic() {
        let mut first = Engine::new(cfg_with(&[])).unwrap();
        let mut second = Engine::new(cfg_with(&[])).unwrap();
        let total = first.schedule().total();
        for _ in 0..total {
            let a = first.run_round().unwrap();
            let b = second.run_round().unwrap();
            assert_eq!(strip_timings(&a), strip_timings(&b));
        }
        let a_bits: Vec<u64> = first.theta().values().iter().map(|v| v.to_bits()).collect();
        let b_bits: Vec<u64> = second.theta().values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a_bits, b_bits);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut single = Engine::new(cfg_with(&["workers=1"])).unwrap();
        let mut pooled = Engine::new(cfg_with(&["workers=3"])).unwrap();
        let total = single.schedule().total();
        for _ in 0..total {
            let a = single.run_round().unwrap();
            let b = pooled.run_round().unwrap();
            assert_eq!(strip_timings(&a), strip_timings(&b));
        }
        let a_bits: Vec<u64> = single.theta().values().iter().map(|v| v.to_bits()).collect();
        let b_bits: Vec<u64> = pooled.theta().values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a_bits, b_bits);
    }

    #[test]
    fn detector_rounds_are_recorded_with_auto_budget() {
        // A large replacement boost makes the two attackers clear outliers.
        let cfg = cfg_with(&[
            "defense.detector=mkrum_detector",
            "attack.model_poison=model_replacement",
            "attack.scale_factor=8.0",
        ]);
        let mut engine = Engine::new(cfg).unwrap();
        let total = engine.schedule().total();
        let mut records = Vec::new();
        for _ in 0..total {
            records.push(engine.run_round().unwrap());
        }
        for r in &records {
            match r.phase {
                Phase::Pretrain => assert!(r.detection.is_none(), "no detector while pretraining"),
                _ => assert!(r.detection.is_some(), "detector active from warmup on"),
            }
            if r.phase == Phase::Attack {
                assert_eq!(
                    r.detection.as_deref(),
                    Some(&[0usize, 1][..]),
                    "boosted attackers flagged at round {}",
                    r.round
                );
            } else if let Some(flagged) = &r.detection {
                assert!(flagged.is_empty(), "auto budget flags nobody on clean rounds");
            }
        }
        assert_eq!(engine.detections().len(), (total - 2) as usize);
    }

    #[test]
    fn zero_timeout_budget_empties_every_round_and_freezes_the_model() {
        // Enough work per client that a round can never finish within 0 ms.
        let cfg = cfg_with(&[
            "enforce_timeouts=true",
            "timeout_ms=0",
            "model.layer_sizes=[16, 128, 128, 4]",
            "train.local_epochs=10",
            "train.batch_size=8",
        ]);
        let mut engine = Engine::new(cfg).unwrap();
        let before: Vec<u64> = engine.theta().values().iter().map(|v| v.to_bits()).collect();
        let record = engine.run_round().unwrap();
        assert!(record.empty_round);
        assert_eq!(record.dropped_timeouts.len(), 4);
        assert_eq!(record.aggregate_norm, 0.0);
        let after: Vec<u64> = engine.theta().values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after, "an empty round must not move the model");
    }

    #[test]
    fn norm_bound_resolves_to_median_warmup_norm() {
        let cfg = cfg_with(&["defense.rule=norm_clipping"]);
        let mut engine = Engine::new(cfg).unwrap();
        assert_eq!(engine.norm_bound, None);
        for _ in 0..3 {
            engine.run_round().unwrap();
        }
        // One warmup round with 4 clients: 4 collected norms.
        assert_eq!(engine.warmup_norms.len(), 4);
        let bound = engine.norm_bound.expect("bound resolved after warmup");
        let mut norms = engine.warmup_norms.clone();
        norms.sort_by(f64::total_cmp);
        let expected = 0.5 * (norms[1] + norms[2]);
        assert_eq!(bound, expected);
    }

    #[test]
    fn optimized_pattern_publishes_once_per_attack_round() {
        let cfg = cfg_with(&[
            "attack.attack_kind=optimized_pattern",
            "attack.trigger_opt_steps=3",
            "attack.trigger_opt_batch=16",
        ]);
        let mut engine = Engine::new(cfg).unwrap();
        for _ in 0..3 {
            engine.run_round().unwrap();
        }
        assert!(engine.last_published.is_none(), "nothing published before the window");
        engine.run_round().unwrap();
        let first = engine
            .last_published
            .clone()
            .expect("attack round publishes an optimized trigger");
        assert_ne!(
            first.patch().iter().map(|p| p.value).collect::<Vec<_>>(),
            engine
                .base_trigger
                .patch()
                .iter()
                .map(|p| p.value)
                .collect::<Vec<_>>(),
            "optimization moved the patch values"
        );
        for p in first.patch() {
            assert!((0.0..=1.0).contains(&p.value));
        }
    }

    #[test]
    fn distributed_fragments_cover_the_full_pattern() {
        let cfg = cfg_with(&[
            "attack.attack_kind=distributed_pattern",
            "attack.patch={ origin = [0, 0], size = [1, 4], value = 1.0 }",
        ]);
        let engine = Engine::new(cfg).unwrap();
        assert_eq!(engine.fragments.len(), 2, "two malicious clients, 4 pixels");
        let mut pixels = Vec::new();
        for f in &engine.fragments {
            pixels.extend(f.patch().iter().map(|p| (p.row, p.col)));
        }
        pixels.sort_unstable();
        let full: Vec<(usize, usize)> = engine
            .base_trigger
            .patch()
            .iter()
            .map(|p| (p.row, p.col))
            .collect();
        assert_eq!(pixels, full);
    }

    #[test]
    fn model_shape_must_match_the_data() {
        let reject = |overrides: &[&str]| {
            Engine::new(cfg_with(overrides))
                .err()
                .expect("engine must reject this config")
                .to_string()
        };
        assert!(reject(&["model.layer_sizes=[10, 12, 4]"]).contains("feature count"));
        assert!(reject(&["model.layer_sizes=[16, 12, 7]"]).contains("class count"));
        assert!(reject(&["attack.target_class=9"]).contains("target_class"));
    }

    #[test]
    fn snapshot_and_restore_reproduce_the_exact_trajectory() {
        let mut reference = Engine::new(cfg_with(&[])).unwrap();
        let total = reference.schedule().total();
        let mut reference_records = Vec::new();
        for _ in 0..total {
            reference_records.push(reference.run_round().unwrap());
        }

        let mut engine = Engine::new(cfg_with(&[])).unwrap();
        for _ in 0..3 {
            engine.run_round().unwrap();
        }
        let state = engine.snapshot_state();
        let theta = engine.theta().clone();
        let acc = engine.acc_series().to_vec();
        let asr = engine.asr_series().to_vec();

        let mut resumed = Engine::new(cfg_with(&[])).unwrap();
        resumed
            .restore(theta, state, acc, asr, Vec::new())
            .unwrap();
        for expected in reference_records.iter().skip(3) {
            let got = resumed.run_round().unwrap();
            assert_eq!(strip_timings(&got), strip_timings(expected));
        }
        let a: Vec<u64> = reference.theta().values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = resumed.theta().values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}
