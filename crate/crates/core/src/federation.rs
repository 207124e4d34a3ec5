//! Client/server protocol: local training, sample-weighted adapter averaging,
//! prototype re-weighting, and round/stage orchestration.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Aggregation, DatasetKind, ExperimentConfig, SoftmaxScope};
use crate::datagen::{
    load_feature_csv, split_tasks, synth_gaussian, train_test_split, ClientShard, LabeledSample,
    PartitionReport, TaskSchedule,
};
use crate::error::{Error, Result};
use crate::evaluation::{acc_all_seen, avg_metric, forgetting_report, task_accuracies, AccuracyMatrix};
use crate::lora::{LoraAdapter, LoraLedger};
use crate::numkit::{minmax_normalize, softmax_temp, sq_dist, RngStream, Vector};
use crate::optim::{Adam, CosineSchedule, ParamKey};
use crate::protomodel::{loss_and_grads, FrozenBackbone, HyperParams, LossBreakdown, ModelState, PrototypeSet};
use crate::ClassId;

/// Floor applied to summed distances before inversion.
pub const DIST_EPSILON: f64 = 1e-12;
/// Stddev of the server-side prototype initialization.
pub const PROTO_INIT_STDDEV: f64 = 0.02;

/// What a client sends the server at the end of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client_id: usize,
    /// Active adapter per attachment.
    pub adapters: BTreeMap<usize, LoraAdapter>,
    /// Prototypes for the current task's classes.
    pub prototypes: BTreeMap<ClassId, Vector>,
    /// Mean local feature per current class; zero vector when the client has none.
    pub class_means: BTreeMap<ClassId, Vector>,
    pub sample_count: usize,
    pub class_counts: BTreeMap<ClassId, usize>,
}

pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
    pub model: ModelState,
    optimizer: Adam,
    batch_rng: RngStream,
}

impl ClientState {
    pub fn new(shard: ClientShard, model: ModelState, batch_rng: RngStream) -> Self {
        Self {
            client_id: shard.client_id,
            shard,
            model,
            optimizer: Adam::new(),
            batch_rng,
        }
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer.steps_taken()
    }

    /// Overwrites the replica with the server's global state.
    pub fn receive(&mut self, server: &ModelState) {
        self.model.ledgers.clone_from(&server.ledgers);
        self.model.prototypes.clone_from(&server.prototypes);
        self.model.mode = server.mode;
        self.model.backbone = Arc::clone(&server.backbone);
    }

    /// Sets each held current-class prototype to the local class-mean feature.
    pub fn init_prototypes_from_data(&mut self, current: &[ClassId]) -> Result<()> {
        let means = class_means(&self.model, &self.shard.samples, current)?;
        for (c, (mean, n)) in means {
            if n > 0 && self.model.prototypes.is_trainable(c) {
                self.model.prototypes.set(c, mean)?;
            }
        }
        Ok(())
    }

    pub fn upload(&self, current: &[ClassId]) -> Result<ClientUpload> {
        let means = class_means(&self.model, &self.shard.samples, current)?;
        let mut prototypes = BTreeMap::new();
        for &c in current {
            prototypes.insert(c, self.model.prototypes.get(c)?.clone());
        }
        Ok(ClientUpload {
            client_id: self.client_id,
            adapters: self
                .model
                .ledgers
                .iter()
                .map(|(&at, l)| (at, l.active().clone()))
                .collect(),
            prototypes,
            class_counts: means.iter().map(|(&c, (_, n))| (c, *n)).collect(),
            class_means: means.into_iter().map(|(c, (m, _))| (c, m)).collect(),
            sample_count: self.shard.samples.len(),
        })
    }
}

fn class_means(
    model: &ModelState,
    samples: &[LabeledSample],
    classes: &[ClassId],
) -> Result<BTreeMap<ClassId, (Vector, usize)>> {
    let d = model.prototypes.dim();
    let mut acc: BTreeMap<ClassId, (Vector, usize)> =
        classes.iter().map(|&c| (c, (Vector::zeros(d), 0))).collect();
    let feats = model.features_batch(samples.iter().map(|s| s.features.as_slice()))?;
    for (s, f) in samples.iter().zip(feats) {
        if let Some((sum, n)) = acc.get_mut(&s.label) {
            for (a, b) in sum.iter_mut().zip(f.iter()) {
                *a += b;
            }
            *n += 1;
        }
    }
    for (sum, n) in acc.values_mut() {
        if *n > 0 {
            let inv = 1.0 / *n as f64;
            sum.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(acc)
}

/// Per-call training context.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub class_subset: Vec<ClassId>,
    /// Optimizer steps per stage for this client; the cosine schedule spans it.
    pub stage_steps: u64,
    pub stage: usize,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub steps: usize,
    pub first: LossBreakdown,
    pub mean: LossBreakdown,
    pub last: LossBreakdown,
}

fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// `E` epochs of mini-batch Adam on the client's shard. Returns `None` when
/// the shard is empty (client skipped for the round).
pub fn local_train(
    state: &mut ClientState,
    hp: &HyperParams,
    ctx: &TrainContext,
) -> Result<Option<LossTrace>> {
    let n = state.shard.samples.len();
    if n == 0 {
        return Ok(None);
    }
    let schedule = CosineSchedule {
        total_steps: ctx.stage_steps,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::new();
    for epoch in 0..hp.local_epochs {
        let mut rng = state.batch_rng.derive(
            "batch",
            &[ctx.stage as u64, ctx.round as u64, epoch as u64],
        );
        rng.shuffle(&mut order);
        for chunk in order.chunks(hp.batch_size) {
            let batch: Vec<LabeledSample> =
                chunk.iter().map(|&i| state.shard.samples[i].clone()).collect();
            let (loss, grads) = loss_and_grads(&batch, &state.model, hp, &ctx.class_subset)?;
            losses.push(loss);
            let factor = schedule.factor(state.optimizer.steps_taken());
            let opt = &mut state.optimizer;
            opt.begin_step();
            let lr_l = hp.lr_lora * factor;
            let lr_p = hp.lr_prototypes * factor;
            for (at, (ga, gb)) in &grads.adapters {
                let ledger = state.model.ledgers.get_mut(at).expect("grads follow ledgers");
                let active = ledger.active_mut();
                opt.update(ParamKey::LoraA(*at), active.a.as_mut_slice(), ga.as_slice(), lr_l);
                opt.update(ParamKey::LoraB(*at), active.b.as_mut_slice(), gb.as_slice(), lr_l);
            }
            for (c, g) in &grads.prototypes {
                let p = state.model.prototypes.get_mut(*c)?;
                opt.update(ParamKey::Prototype(*c), p, g, lr_p);
            }
        }
    }
    let mean = mean_loss(&losses);
    Ok(Some(LossTrace {
        steps: losses.len(),
        first: losses[0],
        mean,
        last: *losses.last().expect("at least one batch"),
    }))
}

fn mean_loss(losses: &[LossBreakdown]) -> LossBreakdown {
    let n = losses.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for l in losses {
        m.dce += l.dce / n;
        m.pl += l.pl / n;
        m.ort += l.ort / n;
        m.total += l.total / n;
    }
    m
}

/// Sample-count weights `N_k / Σ N`.
pub fn sample_weights(uploads: &[ClientUpload]) -> Result<Vec<f64>> {
    let total: usize = uploads.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::ZeroSampleCount);
    }
    Ok(uploads
        .iter()
        .map(|u| u.sample_count as f64 / total as f64)
        .collect())
}

/// Weighted average of the active `A` and `B` factors per attachment.
///
/// Computed as `x_0 + Σ_k γ_k (x_k - x_0)` around the first contributing
/// client, which equals `Σ_k γ_k x_k` and is exact when all clients agree.
pub fn aggregate_lora(uploads: &[ClientUpload]) -> Result<(BTreeMap<usize, LoraAdapter>, Vec<f64>)> {
    let weights = sample_weights(uploads)?;
    let anchor = weights.iter().position(|&w| w > 0.0).expect("weights sum to 1");
    let mut merged = uploads[anchor].adapters.clone();
    for (u, &w) in uploads.iter().zip(&weights) {
        if w == 0.0 || u.client_id == uploads[anchor].client_id {
            continue;
        }
        for (at, slot) in merged.iter_mut() {
            let ad = u.adapters.get(at).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "client {} uploaded no adapter for attachment {at}",
                    u.client_id
                ))
            })?;
            let base = &uploads[anchor].adapters[at];
            slot.a.add_scaled(&ad.a.add(&base.a.scale(-1.0))?, w)?;
            slot.b.add_scaled(&ad.b.add(&base.b.scale(-1.0))?, w)?;
        }
    }
    Ok((merged, weights))
}

/// Re-weighted global prototypes and the per-class client weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightResult {
    pub prototypes: BTreeMap<ClassId, Vector>,
    /// Class → weight per upload (upload order).
    pub weights: BTreeMap<ClassId, Vec<f64>>,
}

/// Server-side prototype re-weighting.
///
/// For class `c`, client `k`'s score is the summed squared distance from its
/// prototype to every client's class mean (zero means included). Inverse
/// scores are min-max normalized and passed through a softmax at
/// temperature `eta`; the global prototype is the weighted sum.
pub fn prototype_reweight(uploads: &[ClientUpload], eta: f64) -> Result<ReweightResult> {
    let first = uploads.first().ok_or(Error::Empty {
        op: "prototype_reweight",
    })?;
    let classes: Vec<ClassId> = first.prototypes.keys().copied().collect();
    let mut prototypes = BTreeMap::new();
    let mut weights = BTreeMap::new();
    for &c in &classes {
        let mut protos = Vec::with_capacity(uploads.len());
        let mut means = Vec::with_capacity(uploads.len());
        for u in uploads {
            let missing = || Error::MissingClassEntry {
                client: u.client_id,
                class: c,
            };
            protos.push(u.prototypes.get(&c).ok_or_else(missing)?);
            means.push(u.class_means.get(&c).ok_or_else(missing)?);
        }
        let inv: Vec<f64> = protos
            .iter()
            .map(|m| {
                let d = means
                    .iter()
                    .map(|mu| sq_dist(m, mu))
                    .sum::<Result<f64>>()?;
                Ok(1.0 / d.max(DIST_EPSILON))
            })
            .collect::<Result<_>>()?;
        let alpha = minmax_normalize(&inv);
        let w = softmax_temp(&alpha, eta)?;
        prototypes.insert(c, weighted_sum(&protos, &w));
        weights.insert(c, w.0);
    }
    Ok(ReweightResult {
        prototypes,
        weights,
    })
}

/// Plain average of the uploaded prototypes; the re-weight ablation.
pub fn prototype_uniform(uploads: &[ClientUpload]) -> Result<ReweightResult> {
    let first = uploads.first().ok_or(Error::Empty {
        op: "prototype_uniform",
    })?;
    let k = uploads.len();
    let w = Vector(vec![1.0 / k as f64; k]);
    let mut prototypes = BTreeMap::new();
    let mut weights = BTreeMap::new();
    for &c in first.prototypes.keys() {
        let protos = uploads
            .iter()
            .map(|u| {
                u.prototypes.get(&c).ok_or(Error::MissingClassEntry {
                    client: u.client_id,
                    class: c,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        prototypes.insert(c, weighted_sum(&protos, &w));
        weights.insert(c, w.0.clone());
    }
    Ok(ReweightResult {
        prototypes,
        weights,
    })
}

fn weighted_sum(protos: &[&Vector], w: &[f64]) -> Vector {
    // Anchored form, exact when all prototypes coincide.
    let base = protos[0];
    let mut out = base.clone();
    for (p, &wk) in protos.iter().zip(w).skip(1) {
        for ((o, v), b) in out.iter_mut().zip(p.iter()).zip(base.iter()) {
            *o += wk * (v - b);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client_id: usize,
    pub sample_count: usize,
    pub skipped: bool,
    pub trace: Option<LossTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub stage: usize,
    pub round: usize,
    pub client_losses: Vec<ClientLoss>,
    /// Adapter aggregation weights, client order.
    pub lora_weights: Vec<f64>,
    /// Re-weight coefficients per class (always computed, even under uniform aggregation).
    pub reweight: BTreeMap<ClassId, Vec<f64>>,
    pub aggregation: Aggregation,
    /// Accuracy over all seen classes on held-out data after the round.
    pub acc_all_seen: Option<f64>,
}

/// Both prototype aggregates from one round's uploads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAggregates {
    pub reweight: BTreeMap<ClassId, Vector>,
    pub uniform: BTreeMap<ClassId, Vector>,
}

pub struct ServerState {
    pub model: ModelState,
    /// 1-based stage index.
    pub stage: usize,
    pub round: usize,
    pub hp: HyperParams,
    pub current_classes: Vec<ClassId>,
    pub seen_classes: Vec<ClassId>,
    pub aggregation: Aggregation,
    pub softmax_scope: SoftmaxScope,
    pub parallel_clients: bool,
    root: RngStream,
}

impl ServerState {
    /// Stage-1 server: fresh adapters at every attachment and Gaussian
    /// prototypes for the first task's classes.
    pub fn new(
        backbone: Arc<FrozenBackbone>,
        cfg: &ExperimentConfig,
        first_task: &[ClassId],
    ) -> Result<Self> {
        let hp = cfg.hyper_params();
        let root = RngStream::new(cfg.seed);
        let mut ledgers = BTreeMap::new();
        if !cfg.freeze_all {
            for &at in backbone.attachments() {
                let (out, inp) = backbone.projection_shape(at).expect("validated attachment");
                let mut rng = root.derive("lora-init", &[1, at as u64]);
                let ad = LoraAdapter::new(out, inp, hp.rank, 1, hp.init_stddev, &mut rng)?;
                ledgers.insert(at, LoraLedger::new(at, ad));
            }
        }
        let mut server = Self {
            model: ModelState {
                prototypes: PrototypeSet::new(backbone.feature_dim()),
                backbone,
                ledgers,
                mode: cfg.ledger_mode,
            },
            stage: 1,
            round: 0,
            hp,
            current_classes: Vec::new(),
            seen_classes: Vec::new(),
            aggregation: cfg.aggregation,
            softmax_scope: cfg.softmax_scope,
            parallel_clients: cfg.parallel_clients,
            root,
        };
        server.add_classes(first_task)?;
        Ok(server)
    }

    fn add_classes(&mut self, classes: &[ClassId]) -> Result<()> {
        for &c in classes {
            if self.model.prototypes.contains(c) {
                return Err(Error::ClassCollision(c));
            }
        }
        self.model.prototypes.freeze_all();
        let d = self.model.prototypes.dim();
        for &c in classes {
            let mut rng = self.root.derive("proto-init", &[u64::from(c)]);
            let init = Vector((0..d).map(|_| rng.normal(0.0, PROTO_INIT_STDDEV)).collect());
            self.model.prototypes.insert(c, init, true)?;
        }
        let mut current = classes.to_vec();
        current.sort_unstable();
        self.current_classes = current;
        self.seen_classes.extend_from_slice(classes);
        self.seen_classes.sort_unstable();
        Ok(())
    }

    pub fn class_subset(&self) -> Vec<ClassId> {
        match self.softmax_scope {
            SoftmaxScope::Current => self.current_classes.clone(),
            SoftmaxScope::Seen => self.seen_classes.clone(),
        }
    }

    /// Per-client random stream for batching.
    pub fn client_stream(&self, client_id: usize) -> RngStream {
        self.root.derive("client", &[client_id as u64])
    }
}

/// Freezes every active adapter, opens fresh ones, freezes old prototypes and
/// adds Gaussian prototypes for `next_task_classes`.
pub fn stage_transition(server: &mut ServerState, next_task_classes: &[ClassId]) -> Result<()> {
    let next = server.stage + 1;
    for (&at, ledger) in server.model.ledgers.iter_mut() {
        let (d, k, r) = ledger.active().dims();
        let mut rng = server.root.derive("lora-init", &[next as u64, at as u64]);
        ledger.push_stage(LoraAdapter::new(d, k, r, next, server.hp.init_stddev, &mut rng)?)?;
    }
    server.add_classes(next_task_classes)?;
    server.stage = next;
    server.round = 0;
    Ok(())
}

/// One communication round: broadcast, local training, upload, aggregate.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    stage_steps: &BTreeMap<usize, u64>,
    eval: Option<&[LabeledSample]>,
) -> Result<(RoundReport, RoundAggregates)> {
    let current = server.current_classes.clone();
    let subset = server.class_subset();
    let hp = server.hp.clone();
    let first_round = server.round == 0;
    let (stage, round) = (server.stage, server.round);

    let work = |client: &mut ClientState| -> Result<(Option<LossTrace>, ClientUpload)> {
        client.receive(&server.model);
        if first_round {
            client.init_prototypes_from_data(&current)?;
        }
        let ctx = TrainContext {
            class_subset: subset.clone(),
            stage_steps: stage_steps.get(&client.client_id).copied().unwrap_or(0),
            stage,
            round,
        };
        let trace = local_train(client, &hp, &ctx)?;
        let upload = client.upload(&current)?;
        Ok((trace, upload))
    };
    let results: Vec<Result<(Option<LossTrace>, ClientUpload)>> = if server.parallel_clients {
        clients.par_iter_mut().map(work).collect()
    } else {
        clients.iter_mut().map(work).collect()
    };
    let mut results = results.into_iter().collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|(_, u)| u.client_id);
    let (traces, uploads): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let (merged, lora_weights) = aggregate_lora(&uploads)?;
    for (at, ad) in merged {
        if let Some(ledger) = server.model.ledgers.get_mut(&at) {
            *ledger.active_mut() = ad;
        }
    }
    let reweighted = prototype_reweight(&uploads, hp.eta)?;
    let uniform = prototype_uniform(&uploads)?;
    let chosen = match server.aggregation {
        Aggregation::Reweight => &reweighted.prototypes,
        Aggregation::Uniform => &uniform.prototypes,
    };
    for (c, p) in chosen {
        server.model.prototypes.set(*c, p.clone())?;
    }
    server.round += 1;

    let acc = match eval {
        Some(test) if !test.is_empty() => {
            Some(acc_all_seen(&server.model, test, &server.seen_classes)?)
        }
        _ => None,
    };
    let client_losses = uploads
        .iter()
        .zip(traces)
        .map(|(u, t)| ClientLoss {
            client_id: u.client_id,
            sample_count: u.sample_count,
            skipped: t.is_none(),
            trace: t,
        })
        .collect();
    Ok((
        RoundReport {
            stage,
            round: round + 1,
            client_losses,
            lora_weights,
            reweight: reweighted.weights,
            aggregation: server.aggregation,
            acc_all_seen: acc,
        },
        RoundAggregates {
            reweight: reweighted.prototypes,
            uniform: uniform.prototypes,
        },
    ))
}

/// Data prepared for a run: held-out split and the task schedule.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub schedule: TaskSchedule,
    pub input_dim: usize,
}

impl PreparedData {
    pub fn train_for(&self, classes: &[ClassId]) -> Vec<LabeledSample> {
        self.train
            .iter()
            .filter(|s| classes.contains(&s.label))
            .cloned()
            .collect()
    }

    pub fn test_for(&self, classes: &[ClassId]) -> Vec<LabeledSample> {
        self.test
            .iter()
            .filter(|s| classes.contains(&s.label))
            .cloned()
            .collect()
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let samples = match cfg.dataset {
        DatasetKind::Synthetic => synth_gaussian(
            cfg.num_classes,
            cfg.input_dim,
            cfg.per_class,
            cfg.center_scale,
            cfg.noise_stddev,
            crate::numkit::derive_seed(cfg.seed, "dataset", &[]),
        )?,
        DatasetKind::Csv => {
            let path = cfg.csv_path.as_ref().expect("validated");
            load_feature_csv(path)?
        }
    };
    let input_dim = samples[0].features.dim();
    let mut classes: Vec<ClassId> = samples.iter().map(|s| s.label).collect();
    classes.sort_unstable();
    classes.dedup();
    if !classes.len().is_multiple_of(cfg.tasks) {
        return Err(Error::Config(format!(
            "tasks: {} does not divide the {} classes in the dataset",
            cfg.tasks,
            classes.len()
        )));
    }
    let schedule = split_tasks(
        &classes,
        cfg.tasks,
        crate::numkit::derive_seed(cfg.seed, "tasks", &[]),
    )?;
    let (train, test) = train_test_split(
        &samples,
        cfg.test_fraction,
        crate::numkit::derive_seed(cfg.seed, "holdout", &[]),
    )?;
    Ok(PreparedData {
        train,
        test,
        schedule,
        input_dim,
    })
}

pub fn build_backbone(cfg: &ExperimentConfig, input_dim: usize) -> Result<FrozenBackbone> {
    let mut rng = RngStream::new(cfg.seed).derive("backbone", &[]);
    let attachments: Vec<usize> = if cfg.freeze_all {
        Vec::new()
    } else {
        cfg.attach_layers.clone()
    };
    FrozenBackbone::random(
        input_dim,
        cfg.feature_dim,
        cfg.depth,
        cfg.activation,
        attachments,
        &mut rng,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub classes: Vec<ClassId>,
    pub partition: PartitionReport,
    pub rounds: Vec<RoundReport>,
    /// Both prototype aggregates from the stage's last round.
    pub final_aggregates: RoundAggregates,
    /// Accuracy per task `1..=stage` over all seen classes.
    pub task_accuracies: Vec<f64>,
    pub acc_all_seen: f64,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub format: String,
    pub config: ExperimentConfig,
    pub aggregation: Aggregation,
    pub schedule: Vec<Vec<ClassId>>,
    pub stages: Vec<StageRecord>,
    pub accuracy_matrix: AccuracyMatrix,
    pub a_n: Option<f64>,
    pub avg: Option<f64>,
    pub forgetting: Vec<f64>,
    pub complete: bool,
}

pub const RECORD_FORMAT: &str = "fcil-record v1";

impl ExperimentRecord {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: ExperimentRecord = serde_json::from_str(text)?;
        if rec.format != RECORD_FORMAT {
            return Err(Error::Diagnostic(format!(
                "unsupported record format `{}`",
                rec.format
            )));
        }
        Ok(rec)
    }

    /// One row per stage: `stage,seen_classes,acc_all_seen,avg_to_date,forgetting_to_date`.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("stage,seen_classes,acc_all_seen,avg_to_date,mean_forgetting\n");
        let mut seen = 0;
        let mut accs = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            seen += st.classes.len();
            accs.push(st.acc_all_seen);
            let avg = avg_metric(&accs).unwrap_or(0.0);
            let sub = AccuracyMatrix {
                rows: self.accuracy_matrix.rows[..=i].to_vec(),
            };
            let f = forgetting_report(&sub);
            let mf = if f.is_empty() {
                0.0
            } else {
                f.iter().sum::<f64>() / f.len() as f64
            };
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                st.stage, seen, st.acc_all_seen, avg, mf
            ));
        }
        out
    }
}

/// In-memory result of a run, including the per-stage global models.
pub struct ExperimentOutcome {
    pub record: ExperimentRecord,
    pub stage_models: Vec<ModelState>,
    pub data: PreparedData,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with(cfg, |_, _| Ok(()))
}

/// Runs every stage; `on_stage` sees the partial record and the stage's
/// global model after each stage (used to flush artifacts incrementally).
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    mut on_stage: impl FnMut(&ExperimentRecord, &ModelState) -> Result<()>,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let backbone = Arc::new(build_backbone(cfg, data.input_dim)?);
    let schedule = data.schedule.clone();
    let spec = cfg.partition_spec();
    let hp = cfg.hyper_params();

    let mut server = ServerState::new(Arc::clone(&backbone), cfg, &schedule.tasks[0])?;
    let mut record = ExperimentRecord {
        format: RECORD_FORMAT.to_string(),
        config: cfg.clone(),
        aggregation: cfg.aggregation,
        schedule: schedule.tasks.clone(),
        stages: Vec::new(),
        accuracy_matrix: AccuracyMatrix::default(),
        a_n: None,
        avg: None,
        forgetting: Vec::new(),
        complete: false,
    };
    let mut stage_models = Vec::new();
    let task_tests: Vec<Vec<LabeledSample>> =
        schedule.tasks.iter().map(|t| data.test_for(t)).collect();

    for (s, classes) in schedule.tasks.iter().enumerate() {
        if s > 0 {
            stage_transition(&mut server, classes)?;
        }
        let train = data.train_for(classes);
        let shards = spec.partition(&train, classes, s)?;
        let partition = PartitionReport::from_shards(s + 1, classes, &shards);
        let mut clients: Vec<ClientState> = shards
            .into_iter()
            .map(|sh| {
                let rng = server.client_stream(sh.client_id);
                ClientState::new(sh, server.model.clone(), rng)
            })
            .collect();
        let stage_steps: BTreeMap<usize, u64> = clients
            .iter()
            .map(|c| {
                let per_epoch = batches_per_epoch(c.shard.samples.len(), hp.batch_size);
                (c.client_id, (per_epoch * hp.local_epochs * hp.rounds) as u64)
            })
            .collect();
        let seen_test: Vec<LabeledSample> =
            task_tests[..=s].iter().flatten().cloned().collect();

        let mut rounds = Vec::with_capacity(hp.rounds);
        let mut last_agg = None;
        for _ in 0..hp.rounds {
            let (report, agg) = run_round(&mut server, &mut clients, &stage_steps, Some(&seen_test))?;
            rounds.push(report);
            last_agg = Some(agg);
        }

        let accs = task_accuracies(&server.model, &task_tests[..=s], &server.seen_classes)?;
        let pooled = acc_all_seen(&server.model, &seen_test, &server.seen_classes)?;
        record.accuracy_matrix.rows.push(accs.clone());
        record.stages.push(StageRecord {
            stage: s + 1,
            classes: classes.clone(),
            partition,
            rounds,
            final_aggregates: last_agg.expect("rounds >= 1"),
            task_accuracies: accs,
            acc_all_seen: pooled,
            checkpoint: cfg
                .write_checkpoints
                .then(|| format!("checkpoints/stage_{}.ckpt", s + 1)),
        });
        let per_stage: Vec<f64> = record.stages.iter().map(|st| st.acc_all_seen).collect();
        record.a_n = Some(pooled);
        record.avg = Some(avg_metric(&per_stage)?);
        record.forgetting = forgetting_report(&record.accuracy_matrix);
        record.complete = s + 1 == schedule.len();
        on_stage(&record, &server.model)?;
        stage_models.push(server.model.clone());
    }
    Ok(ExperimentOutcome {
        record,
        stage_models,
        data,
    })
}
