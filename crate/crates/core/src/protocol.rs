//! Round orchestration as explicit messages between a server and clients.
//!
//! Clients only ever see a [`BroadcastPayload`] and the server only ever sees
//! [`UploadPayload`]s; raw data never crosses the boundary.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, summarize, Evaluation, RoundLog};
use crate::personalization::{
    adaptation_gap, build_mixed_dataset, optimize_alpha, sample_global_embeddings,
    synthetic_label_distribution, variance_scales, AdaptationState, AlphaRecord, MixedDataset,
};
use crate::prototypes::{
    aggregate_global_prototypes, compute_local_prototypes, estimate_gaussian_stats, ClientUploads,
    LocalClassStats, PrototypeStore,
};
use crate::rng::{self, Stream};
use crate::scheduler::{mean_alpha, ApaState};
use crate::split::{mix_heads, NoPrototypes, SplitModel, TrainConfig};
use crate::strategy::{StrategySpec, Training};
use crate::tensor::{weighted_average, Linear, Mlp, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadWeighting {
    Uniform,
    DataSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub train: TrainConfig,
    /// Global-sample ratio `r` of the mixed head-training set.
    pub synthetic_ratio: f64,
    pub normalize_gamma: bool,
    pub synthetic_label_smoothing: f64,
    pub head_weighting: HeadWeighting,
    pub participation: f64,
    pub tau0: u32,
    pub tau_min: u32,
    pub tau_max: u32,
    pub parallel: bool,
    pub record_wall_time: bool,
    pub master_seed: u64,
    pub strategy: StrategySpec,
}

impl ProtocolConfig {
    pub fn new(strategy: StrategySpec, master_seed: u64) -> Self {
        Self {
            train: TrainConfig::default(),
            synthetic_ratio: 0.5,
            normalize_gamma: false,
            synthetic_label_smoothing: 0.0,
            head_weighting: HeadWeighting::DataSize,
            participation: 1.0,
            tau0: 5,
            tau_min: 1,
            tau_max: 50,
            parallel: true,
            record_wall_time: false,
            master_seed,
            strategy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.strategy.validate()?;
        if !(self.synthetic_ratio > 0.0 && self.synthetic_ratio < 1.0) {
            return Err(Error::param("synthetic_ratio", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.synthetic_label_smoothing) {
            return Err(Error::param("synthetic_label_smoothing", "must lie in [0, 1]"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::param("participation", "must lie in (0, 1]"));
        }
        ApaState::new(self.strategy.head_sync, self.tau0, self.tau_min, self.tau_max)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastPayload {
    pub round: u64,
    pub theta_bar: Option<Mlp>,
    /// Global prototypes and Gaussian statistics over the same class set.
    pub class_stats: PrototypeStore,
    pub head: Option<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UploadPayload {
    pub client_id: usize,
    pub theta: Option<Mlp>,
    pub phi: Option<Linear>,
    pub local_stats: Vec<LocalClassStats>,
    pub alpha: Option<AlphaRecord>,
    pub train_size: usize,
}

fn param_bytes<P: Parameters>(p: Option<&P>) -> u64 {
    p.map_or(0, |p| 8 * p.num_values() as u64)
}

impl BroadcastPayload {
    pub fn parameter_bytes(&self) -> u64 {
        param_bytes(self.theta_bar.as_ref()) + param_bytes(self.head.as_ref())
    }
}

impl UploadPayload {
    pub fn parameter_bytes(&self) -> u64 {
        param_bytes(self.theta.as_ref()) + param_bytes(self.phi.as_ref())
    }
}

/// Client-side work items, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientStep {
    AdoptRepresentation,
    BuildMixedDataset,
    ComputeGap,
    OptimizeAlpha,
    MixHead,
    TrainHead,
    TrainRepresentation,
    TrainJoint,
    ComputePrototypes,
    Upload,
}

/// Client-side diagnostics; never sent to the server.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientTrace {
    pub steps: Vec<ClientStep>,
    pub local_embeddings: usize,
    pub synthetic_embeddings: usize,
    pub skipped_labels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub shard: ClientShard,
    pub model: SplitModel,
    pub adaptation: AdaptationState,
    pub last_round: Option<u64>,
}

impl ClientState {
    pub fn new(shard: ClientShard, model: SplitModel) -> Self {
        Self {
            shard,
            model,
            adaptation: AdaptationState::default(),
            last_round: None,
        }
    }

    pub fn id(&self) -> usize {
        self.shard.client_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta_bar: Mlp,
    /// Most recent aggregated head.
    pub global_head: Option<Linear>,
    pub store: PrototypeStore,
    pub apa: ApaState,
    pub round: u64,
    pub num_clients: usize,
}

impl ServerState {
    pub fn new(theta_bar: Mlp, num_clients: usize, cfg: &ProtocolConfig) -> Result<Self> {
        Ok(Self {
            theta_bar,
            global_head: None,
            store: PrototypeStore::default(),
            apa: ApaState::new(cfg.strategy.head_sync, cfg.tau0, cfg.tau_min, cfg.tau_max)?,
            round: 0,
            num_clients,
        })
    }
}

impl ServerState {
    pub fn broadcast(&self, spec: &StrategySpec, head: Option<Linear>) -> BroadcastPayload {
        BroadcastPayload {
            round: self.round,
            theta_bar: spec.share_repr.then(|| self.theta_bar.clone()),
            class_stats: if spec.uses_class_stats() {
                self.store.clone()
            } else {
                PrototypeStore::default()
            },
            head,
        }
    }
}

/// `round(fraction * K)` clients (at least one), uniformly without
/// replacement, sorted by id.
pub fn select_participants(clients: usize, fraction: f64, round: u64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param("participation", format!("must lie in (0, 1], got {fraction}")));
    }
    if clients == 0 {
        return Err(Error::param("clients", "need at least one client"));
    }
    let m = ((fraction * clients as f64).round() as usize).clamp(1, clients);
    if m == clients {
        return Ok((0..clients).collect());
    }
    let mut rng = rng::stream(seed, Stream::Participation, round, 0);
    let mut picked = index::sample(&mut rng, clients, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// `Σ D_i θ_i / Σ D_i` over uploads carrying a representation.
pub fn aggregate_representations(uploads: &[UploadPayload]) -> Result<Mlp> {
    let items: Vec<(&Mlp, f64)> = uploads
        .iter()
        .filter_map(|u| u.theta.as_ref().map(|t| (t, u.train_size as f64)))
        .collect();
    if items.iter().map(|(_, w)| w).sum::<f64>() <= 0.0 {
        return Err(Error::contract("representation aggregation with zero total data"));
    }
    weighted_average(&items)
}

pub fn aggregate_heads(uploads: &[UploadPayload], weighting: HeadWeighting) -> Result<Linear> {
    let items: Vec<(&Linear, f64)> = uploads
        .iter()
        .filter(|u| u.train_size > 0)
        .filter_map(|u| {
            u.phi.as_ref().map(|p| {
                let w = match weighting {
                    HeadWeighting::Uniform => 1.0,
                    HeadWeighting::DataSize => u.train_size as f64,
                };
                (p, w)
            })
        })
        .collect();
    if items.is_empty() {
        return Err(Error::contract("head aggregation without any eligible upload"));
    }
    weighted_average(&items)
}

fn build_mixed(
    shard: &ClientShard,
    theta: &Mlp,
    payload: &BroadcastPayload,
    cfg: &ProtocolConfig,
    trace: &mut ClientTrace,
) -> Result<MixedDataset> {
    let train = shard.train.samples();
    let synthetic = if cfg.strategy.use_gaussian_synth {
        let available = payload.class_stats.available_classes();
        let label_dist =
            synthetic_label_distribution(&shard.proportions, &available, cfg.synthetic_label_smoothing);
        let gamma = variance_scales(&shard.proportions, &available, cfg.normalize_gamma);
        let mut rng = rng::stream(
            cfg.master_seed,
            Stream::ClientSynthetic,
            shard.client_id as u64,
            payload.round,
        );
        let draw = sample_global_embeddings(
            &payload.class_stats.gaussians,
            &label_dist,
            &gamma,
            train.len(),
            cfg.synthetic_ratio,
            &mut rng,
        )?;
        trace.skipped_labels = draw.skipped;
        draw.samples
    } else {
        Vec::new()
    };
    trace.synthetic_embeddings = synthetic.len();
    trace.local_embeddings = train.len();
    build_mixed_dataset(theta, train, synthetic)
}

/// Result of the receive side of a round: representation adopted and, if a
/// head arrived, the mixed head in place.
struct Adaptation {
    alpha: Option<AlphaRecord>,
    /// The mixed set when the alpha search already had to build it.
    mixed: Option<MixedDataset>,
}

fn adapt(
    shard: &ClientShard,
    model: &mut SplitModel,
    state: &mut AdaptationState,
    payload: &BroadcastPayload,
    cfg: &ProtocolConfig,
    trace: &mut ClientTrace,
) -> Result<Adaptation> {
    let spec = &cfg.strategy;
    let t = payload.round;
    if spec.share_repr {
        let theta_bar = payload
            .theta_bar
            .as_ref()
            .ok_or_else(|| Error::contract("broadcast lacks the representation"))?;
        if !theta_bar.same_shape(&model.theta) {
            return Err(Error::contract("broadcast representation does not fit the client model"));
        }
        model.theta = theta_bar.clone();
        trace.steps.push(ClientStep::AdoptRepresentation);
    }
    let mut out = Adaptation { alpha: None, mixed: None };
    let Some(head) = &payload.head else {
        return Ok(out);
    };
    if !head.same_shape(&model.phi) {
        return Err(Error::contract("broadcast head does not fit the client model"));
    }
    if shard.train.is_empty() {
        return Ok(out);
    }
    let delta = adaptation_gap(t, state)?;
    trace.steps.push(ClientStep::ComputeGap);
    let alpha = match spec.fixed_alpha {
        Some(a) => a,
        None => {
            // The mixed set depends only on θ and the payload, so the copy
            // built here is reused for head training.
            let m = build_mixed(shard, &model.theta, payload, cfg, trace)?;
            let a = optimize_alpha(&model.phi, head, &m, delta, cfg.train.beta_reg, cfg.train.t_kd)?;
            out.mixed = Some(m);
            a
        }
    };
    trace.steps.push(ClientStep::OptimizeAlpha);
    model.phi = mix_heads(&model.phi, head, alpha)?;
    state.t_last = t as i64;
    trace.steps.push(ClientStep::MixHead);
    out.alpha = Some(AlphaRecord {
        client_id: shard.client_id,
        alpha,
        delta,
        round: t,
    });
    Ok(out)
}

/// The model `client` would hold right after receiving `payload`, before any
/// local training. Leaves the client untouched.
pub fn adapted_model(client: &ClientState, payload: &BroadcastPayload, cfg: &ProtocolConfig) -> Result<SplitModel> {
    let mut model = client.model.clone();
    let mut state = client.adaptation;
    adapt(&client.shard, &mut model, &mut state, payload, cfg, &mut ClientTrace::default())?;
    Ok(model)
}

/// One client's local update for `payload.round`.
pub fn client_round(
    client: &mut ClientState,
    payload: &BroadcastPayload,
    cfg: &ProtocolConfig,
) -> Result<(UploadPayload, ClientTrace)> {
    let t = payload.round;
    if client.last_round.is_some_and(|last| last >= t) {
        return Err(Error::contract(format!(
            "client {} already ran round {:?}, got payload for {t}",
            client.id(),
            client.last_round
        )));
    }
    let spec = &cfg.strategy;
    let id = client.id();
    let mut trace = ClientTrace::default();
    let adaptation = adapt(
        &client.shard,
        &mut client.model,
        &mut client.adaptation,
        payload,
        cfg,
        &mut trace,
    )?;
    let alpha_record = adaptation.alpha;
    let train = client.shard.train.samples();
    let has_data = !train.is_empty();

    let decoupled = spec.training == Training::Decoupled;
    let mixed = if has_data && decoupled {
        let m = match adaptation.mixed {
            Some(m) => m,
            None => build_mixed(&client.shard, &client.model.theta, payload, cfg, &mut trace)?,
        };
        trace.steps.push(ClientStep::BuildMixedDataset);
        m
    } else {
        MixedDataset::default()
    };

    if has_data {
        let mut rng = rng::stream(cfg.master_seed, Stream::ClientShuffle, id as u64, t);
        let tc = &cfg.train;
        match spec.training {
            Training::Decoupled => {
                client.model.train_head_epochs(
                    &mixed.entries,
                    tc.local_epochs,
                    tc.batch_size,
                    tc.eta_phi,
                    &mut rng,
                )?;
                trace.steps.push(ClientStep::TrainHead);
                if spec.use_prototype_reg {
                    client
                        .model
                        .train_repr_epochs(train, &payload.class_stats, tc, tc.lambda, &mut rng)?;
                } else {
                    client.model.train_repr_epochs(train, &NoPrototypes, tc, 0.0, &mut rng)?;
                }
                trace.steps.push(ClientStep::TrainRepresentation);
            }
            Training::Joint => {
                client.model.train_joint_epochs(train, tc.local_epochs, tc, &mut rng)?;
                trace.steps.push(ClientStep::TrainJoint);
            }
        }
    }

    if !client.model.theta.is_finite() || !client.model.phi.is_finite() {
        return Err(Error::contract(format!(
            "client {id} diverged in round {t}: non-finite parameters"
        )));
    }

    let local_stats = if spec.uses_class_stats() && has_data {
        trace.steps.push(ClientStep::ComputePrototypes);
        compute_local_prototypes(&client.model.theta, train)?
    } else {
        Vec::new()
    };

    client.last_round = Some(t);
    trace.steps.push(ClientStep::Upload);
    let upload = UploadPayload {
        client_id: id,
        theta: spec.share_repr.then(|| client.model.theta.clone()),
        phi: spec.share_head.then(|| client.model.phi.clone()),
        local_stats,
        alpha: alpha_record,
        train_size: client.shard.total,
    };
    Ok((upload, trace))
}

/// Per-round side information that is not part of the metrics stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundTrace {
    pub clients: BTreeMap<usize, ClientTrace>,
}

/// Executes one full communication round and evaluates the result.
pub fn server_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &ProtocolConfig,
) -> Result<(RoundLog, RoundTrace)> {
    let started = Instant::now();
    let t = server.round;
    let spec = &cfg.strategy;
    let participants = select_participants(clients.len(), cfg.participation, t, cfg.master_seed)?;
    if participants.is_empty() {
        return Err(Error::contract("round without participants"));
    }

    let head = server.apa.release_for_broadcast();
    let head_delivered = head.is_some();
    let payload = server.broadcast(spec, head);

    let mut selected = vec![false; clients.len()];
    for &i in &participants {
        selected[i] = true;
    }
    let work = |c: &mut ClientState| client_round(c, &payload, cfg);
    let results: Vec<Result<(UploadPayload, ClientTrace)>> = if cfg.parallel {
        clients
            .par_iter_mut()
            .enumerate()
            .filter(|(i, _)| selected[*i])
            .map(|(_, c)| work(c))
            .collect()
    } else {
        clients
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| selected[*i])
            .map(|(_, c)| work(c))
            .collect()
    };
    let mut uploads = Vec::with_capacity(results.len());
    let mut trace = RoundTrace::default();
    for r in results {
        let (u, tr) = r?;
        trace.clients.insert(u.client_id, tr);
        uploads.push(u);
    }
    let bytes_down = payload.parameter_bytes() * uploads.len() as u64;
    let bytes_up: u64 = uploads.iter().map(UploadPayload::parameter_bytes).sum();

    if spec.share_repr {
        if uploads.iter().any(|u| u.train_size > 0) {
            server.theta_bar = aggregate_representations(&uploads)?;
        } else {
            log::warn!("round {t}: no participant had data; keeping the previous representation");
        }
    }

    if spec.uses_class_stats() {
        let by_client: ClientUploads = uploads
            .iter()
            .map(|u| (u.client_id, u.local_stats.as_slice()))
            .collect();
        let prototypes = aggregate_global_prototypes(&by_client)?;
        let gaussians = estimate_gaussian_stats(&by_client, &prototypes)?;
        server.store.update(prototypes, gaussians);
    }

    let alphas: Vec<AlphaRecord> = uploads.iter().filter_map(|u| u.alpha).collect();
    let alpha_mean = mean_alpha(&alphas).ok();
    let outcome = server.apa.end_of_round(head_delivered, alpha_mean);
    let mut head_aggregated = false;
    if outcome.trigger && spec.share_head {
        match aggregate_heads(&uploads, cfg.head_weighting) {
            Ok(phi_bar) => {
                server.global_head = Some(phi_bar.clone());
                server.apa.stash(phi_bar)?;
                head_aggregated = true;
            }
            Err(Error::Contract(msg)) => log::warn!("round {t}: {msg}"),
            Err(e) => return Err(e),
        }
    }
    server.round += 1;

    let eval = evaluate_adapted(server, clients, cfg)?;
    let log = RoundLog {
        round: t + 1,
        participants,
        client_accuracy: eval.per_client,
        mean_accuracy: eval.mean,
        tau: server.apa.tau,
        s: server.apa.s,
        head_delivered,
        head_aggregated,
        interval_updated: outcome.interval_updated,
        alpha_mean: if outcome.interval_updated { alpha_mean } else { None },
        alphas,
        bytes_down,
        bytes_up,
        wall_time_ms: cfg
            .record_wall_time
            .then(|| started.elapsed().as_secs_f64() * 1e3),
    };
    Ok((log, trace))
}

/// Top-1 accuracy of every client's current model on its own test split.
pub fn evaluate(clients: &[ClientState]) -> Result<Evaluation> {
    let per_client = clients
        .iter()
        .map(|c| accuracy(&c.model, c.shard.test.samples()))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(per_client))
}

/// Accuracy of the models clients hold at the start of round
/// `server.round`: after receiving the broadcast and mixing any released
/// head, before local training. Every client is scored as if it received the
/// broadcast; no state changes.
pub fn evaluate_adapted(server: &ServerState, clients: &[ClientState], cfg: &ProtocolConfig) -> Result<Evaluation> {
    let payload = server.broadcast(&cfg.strategy, server.apa.tmp_head.clone());
    let score = |c: &ClientState| -> Result<Option<f64>> {
        let model = adapted_model(c, &payload, cfg)?;
        accuracy(&model, c.shard.test.samples())
    };
    let per_client = if cfg.parallel {
        clients.par_iter().map(score).collect::<Result<Vec<_>>>()?
    } else {
        clients.iter().map(score).collect::<Result<Vec<_>>>()?
    };
    Ok(summarize(per_client))
}

/// Server plus clients plus configuration: a complete simulated federation.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub cfg: ProtocolConfig,
}

impl Simulation {
    /// Every client starts from the same initial model.
    pub fn new(shards: Vec<ClientShard>, init: SplitModel, cfg: ProtocolConfig) -> Result<Self> {
        cfg.validate()?;
        if shards.is_empty() {
            return Err(Error::param("clients", "need at least one client"));
        }
        for (i, s) in shards.iter().enumerate() {
            if s.client_id != i {
                return Err(Error::contract("client ids must be 0..K in order"));
            }
        }
        let server = ServerState::new(init.theta.clone(), shards.len(), &cfg)?;
        let clients = shards
            .into_iter()
            .map(|s| ClientState::new(s, init.clone()))
            .collect();
        Ok(Self { server, clients, cfg })
    }

    pub fn initial_log(&self) -> Result<RoundLog> {
        let eval = evaluate_adapted(&self.server, &self.clients, &self.cfg)?;
        Ok(RoundLog {
            round: self.server.round,
            participants: Vec::new(),
            client_accuracy: eval.per_client,
            mean_accuracy: eval.mean,
            tau: self.server.apa.tau,
            s: self.server.apa.s,
            head_delivered: false,
            head_aggregated: false,
            interval_updated: false,
            alpha_mean: None,
            alphas: Vec::new(),
            bytes_down: 0,
            bytes_up: 0,
            wall_time_ms: None,
        })
    }

    pub fn step(&mut self) -> Result<(RoundLog, RoundTrace)> {
        server_round(&mut self.server, &mut self.clients, &self.cfg)
    }

    /// Each client starts from the global model, trains `epochs` local epochs
    /// jointly, and is then scored with its own model.
    pub fn finetune(&mut self, epochs: usize) -> Result<Evaluation> {
        let global_head = self.server.global_head.clone();
        for c in &mut self.clients {
            c.model.theta = self.server.theta_bar.clone();
            if let Some(h) = &global_head {
                c.model.phi = h.clone();
            }
            let mut rng = rng::stream(self.cfg.master_seed, Stream::Finetune, c.id() as u64, 0);
            let train = c.shard.train.samples();
            c.model
                .train_joint_epochs(train, epochs, &self.cfg.train, &mut rng)?;
        }
        evaluate(&self.clients)
    }
}
