//! The federated continual loop over the slices of a world: client updates,
//! server rounds, serving, evaluation and metrics.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, Candidate, FrozenScorer, LossKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, AccuracyMatrix, Exposure, MetricsReport, RankingSummary};
use crate::par::{self, Parallelism};
use crate::privacy::{self, Compressor, PrivacyAccountant};
use crate::prompt::{self, DualPromptState, PromptMatrix};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::routing::{self, Encoder};
use crate::server::{self, AggregateParams, PrototypeLibrary, ServerConfig, Upload};
use crate::world::{self, Event, Level, World};

/// Items per ranked list counted for exposure.
pub const EXPOSURE_K: usize = 10;

/// Frozen, shared components of a run.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: RunConfig,
    pub scorer: FrozenScorer,
    pub encoder: Encoder,
    pub query_encoder: Encoder,
    pub compressor: Compressor,
}

/// A served ranking: the top of the list and the positive's 1-based rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranked {
    pub top: Vec<usize>,
    pub positive_rank: usize,
}

fn ids(xs: &[u32]) -> Vec<usize> {
    xs.iter().map(|&x| x as usize).collect()
}

impl Model {
    pub fn new(cfg: &RunConfig, items: Vec<DVector<f64>>) -> Result<Self> {
        cfg.validate()?;
        let (r, d) = (&cfg.routing, cfg.backbone.d);
        if items.iter().any(|e| e.len() != d) {
            return Err(Error::Config(format!("backbone.d = {d} does not match the item embeddings")));
        }
        let encoder = Encoder::build(r.encoder, d, r.hidden, r.d_phi, derive_seed(cfg.seed, "encoder", &[]))?;
        let query_encoder = if r.share_query_encoder {
            encoder.clone()
        } else {
            Encoder::build(r.encoder, d, r.hidden, r.d_phi, derive_seed(cfg.seed, "query-encoder", &[]))?
        };
        Ok(Self {
            cfg: cfg.clone(),
            scorer: FrozenScorer::new(items, cfg.backbone.mixing_strength, derive_seed(cfg.seed, "backbone", &[])),
            compressor: Compressor::new(r.d_phi, cfg.dp.compress_dim, cfg.dp.quantize, derive_seed(cfg.seed, "compressor", &[])),
            encoder,
            query_encoder,
        })
    }

    pub fn fresh_state(&self) -> DualPromptState {
        DualPromptState::zeros(self.cfg.prompt.l_p, self.cfg.backbone.d, self.encoder.output_dim(), self.cfg.prompt.ema_decay)
    }

    /// Query context `h = g(mean history embedding)`.
    pub fn context(&self, ev: &Event) -> Result<DVector<f64>> {
        let hist = ids(&ev.history);
        let mut x = self.scorer.history_sum(&hist)?;
        if !hist.is_empty() {
            x /= hist.len() as f64;
        }
        self.query_encoder.encode_pooled(&x)
    }

    /// Route `h` into the library and compose `p_long + alpha p_short + sum w c`.
    pub fn compose(&self, state: &DualPromptState, alpha: f64, h: &DVector<f64>, library: &PrototypeLibrary) -> Result<PromptMatrix> {
        if library.is_empty() {
            return prompt::compose_prompt(state, alpha, &[]);
        }
        let r = &self.cfg.routing;
        let routed = routing::route_encoded(h, &library.encoded, r.top_m, r.tau, r.similarity)?;
        let retrieved: Vec<(f64, &PromptMatrix)> =
            routed.indices.iter().zip(&routed.weights).map(|(&k, &w)| (w, &library.prototypes[k])).collect();
        prompt::compose_prompt(state, alpha, &retrieved)
    }

    pub fn scores(&self, p: &PromptMatrix, ev: &Event) -> Result<Vec<f64>> {
        let hist = ids(&ev.history);
        let q = self.scorer.query(&p.sum_rows(), p.rows(), &self.scorer.history_sum(&hist)?, hist.len());
        self.scorer.scores(&q, &ids(&ev.candidates))
    }

    /// Loss of one event and its gradient with respect to any single row of
    /// the composed prompt (all rows share it).
    pub fn event_grad(&self, p: &PromptMatrix, ev: &Event) -> Result<(f64, DVector<f64>)> {
        let scores = self.scores(p, ev)?;
        let pos = ev.positive as usize;
        let (loss, coeffs) = match self.cfg.backbone.loss {
            LossKind::Bce => {
                let labelled: Vec<(f64, u8)> = scores.iter().enumerate().map(|(i, &s)| (s, u8::from(i == pos))).collect();
                backbone::bce_loss(&labelled)
            }
            LossKind::Bpr => {
                let negs: Vec<usize> = (0..scores.len()).filter(|&i| i != pos).collect();
                let pairs: Vec<(f64, f64)> = negs.iter().map(|&i| (scores[pos], scores[i])).collect();
                let (loss, g) = backbone::bpr_loss(&pairs);
                let mut coeffs = vec![0.0; scores.len()];
                for (&i, (gp, gn)) in negs.iter().zip(g) {
                    coeffs[pos] += gp;
                    coeffs[i] += gn;
                }
                (loss, coeffs)
            }
        };
        let mut weighted = DVector::zeros(self.scorer.dim());
        for (c, &item) in coeffs.iter().zip(&ev.candidates) {
            if *c != 0.0 {
                weighted.axpy(*c, self.scorer.item(item as usize)?, 1.0);
            }
        }
        Ok((loss, self.scorer.prompt_row_grad(&weighted, p.rows(), ev.history.len())))
    }

    /// Serve one query without feedback: route, compose, score, rank.
    pub fn rank_event(&self, state: &DualPromptState, alpha: f64, ev: &Event, library: &PrototypeLibrary) -> Result<Ranked> {
        let h = self.context(ev)?;
        let p = self.compose(state, alpha, &h, library)?;
        Ok(rank_scores(&self.scores(&p, ev)?, ev))
    }

    /// Gate for the short prompt, zero when short prompts are ablated.
    pub fn alpha(&self, state: &DualPromptState) -> f64 {
        if self.cfg.ablation.short_prompt {
            prompt::session_alpha(state)
        } else {
            0.0
        }
    }

    fn lambda_s(&self, state: &DualPromptState) -> Result<f64> {
        let p = &self.cfg.prompt;
        if !self.cfg.ablation.alignment {
            Ok(0.0)
        } else if p.adaptive_lambda {
            prompt::adaptive_lambda_s(state.drift.mean_drift(), p)
        } else {
            Ok(p.lambda_s_max)
        }
    }

    pub fn trainable_params(&self) -> usize {
        let p = 2 * self.cfg.prompt.l_p * self.cfg.backbone.d;
        if self.cfg.prompt.learn_alpha {
            p + self.encoder.output_dim()
        } else {
            p
        }
    }
}

fn rank_scores(scores: &[f64], ev: &Event) -> Ranked {
    let cands: Vec<Candidate> = scores
        .iter()
        .zip(&ev.candidates)
        .enumerate()
        .map(|(i, (&score, &item))| Candidate { item_id: item as usize, label: u8::from(i == ev.positive as usize), score })
        .collect();
    let order = backbone::rank(&cands);
    let positive_rank = 1 + order.iter().position(|&i| i == ev.positive as usize).unwrap_or(cands.len());
    Ranked { top: order.iter().take(EXPOSURE_K).map(|&i| cands[i].item_id).collect(), positive_rank }
}

/// Everything a client keeps between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub prompt: DualPromptState,
    /// Local gradient steps taken so far.
    pub steps: u64,
    pub releases: u64,
}

impl ClientState {
    pub fn new(model: &Model) -> Self {
        Self { prompt: model.fresh_state(), steps: 0, releases: 0 }
    }
}

/// One local minibatch step of a client. With `rng` present, a triggered upload is
/// released and returned (still in the compressed space).
pub fn local_step(
    model: &Model,
    client: &mut ClientState,
    batch: &[&Event],
    library: &PrototypeLibrary,
    rng: Option<&mut StreamRng>,
) -> Result<(f64, Option<DVector<f64>>)> {
    let cfg = &model.cfg;
    let ab = &cfg.ablation;
    let l_p = cfg.prompt.l_p;
    let mut hs = Vec::with_capacity(batch.len());
    for ev in batch {
        let h = model.context(ev)?;
        client.prompt.drift.observe(&h);
        hs.push(h);
    }
    let alpha = model.alpha(&client.prompt);
    let mut loss = 0.0;
    let mut g = DVector::zeros(cfg.backbone.d);
    for (ev, h) in batch.iter().zip(&hs) {
        let p = model.compose(&client.prompt, alpha, h, library)?;
        let (l, gr) = model.event_grad(&p, ev)?;
        loss += l;
        g += gr;
    }
    let n = batch.len().max(1) as f64;
    let grad = PromptMatrix::tiled(&(g / n), l_p);
    if ab.short_prompt {
        if cfg.prompt.learn_alpha {
            // dL/da = <G, p_short> * alpha (1 - alpha) * delta
            let dl_dalpha: f64 = grad.matrix().component_mul(client.prompt.p_short.matrix()).sum();
            let delta = client.prompt.drift.delta();
            client.prompt.alpha_params.axpy(-cfg.prompt.eta_s * dl_dalpha * alpha * (1.0 - alpha), &delta, 1.0);
        }
        prompt::short_update(&mut client.prompt, &grad.scaled(alpha), &cfg.prompt)?;
    }
    if ab.long_prompt {
        let lambda_s = model.lambda_s(&client.prompt)?;
        prompt::long_update(&mut client.prompt, &grad, library, lambda_s, &cfg.prompt, &cfg.alignment, &model.encoder, &hs)?;
    }
    if !client.prompt.p_long.is_finite() || !client.prompt.p_short.is_finite() {
        return Err(Error::State("client prompt became non-finite; lower the learning rates".into()));
    }
    client.steps += 1;
    let mut upload = None;
    if let Some(rng) = rng {
        if privacy::should_upload(client.steps, client.prompt.drift.drift_magnitude(), &cfg.dp) {
            upload = Some(privacy::make_upload(&client.prompt.p_long, &model.encoder, &model.compressor, &cfg.dp, rng)?);
            client.releases += 1;
        }
    }
    Ok((loss / n, upload))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRound {
    /// Releases in the compressed space, in the order they were made.
    pub uploads: Vec<DVector<f64>>,
    pub mean_loss: f64,
    pub steps: u64,
}

/// Client update for one sampled client: `local_epochs` shuffled passes over its
/// training events in minibatches, against a frozen library snapshot.
pub fn client_round(
    model: &Model,
    client: &mut ClientState,
    events: &[&Event],
    library: &PrototypeLibrary,
    rng: &mut StreamRng,
) -> Result<ClientRound> {
    let fed = &model.cfg.federation;
    let mut out = ClientRound { uploads: Vec::new(), mean_loss: 0.0, steps: 0 };
    let mut total = 0.0;
    for _ in 0..fed.local_epochs {
        let mut order: Vec<usize> = (0..events.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(fed.batch_size) {
            let batch: Vec<&Event> = chunk.iter().map(|&i| events[i]).collect();
            let (loss, up) = local_step(model, client, &batch, library, Some(rng))?;
            total += loss;
            out.steps += 1;
            out.uploads.extend(up);
        }
    }
    if out.steps > 0 {
        out.mean_loss = total / out.steps as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ServerRoundReport {
    pub uploads: usize,
    pub releases: usize,
    pub separation_moves: usize,
    pub reseeded: usize,
}

/// Server update: aggregate, enforce separation, prune or reinitialize, in that order.
pub fn server_round(
    uploads: &[Upload],
    library: &mut PrototypeLibrary,
    window: &mut VecDeque<DVector<f64>>,
    cfg: &ServerConfig,
    encoder: &Encoder,
    rng: &mut StreamRng,
) -> Result<ServerRoundReport> {
    if uploads.is_empty() {
        library.utilization.iter_mut().for_each(|u| *u = 0.0);
        return Ok(ServerRoundReport::default());
    }
    let agg = server::aggregate_step(uploads, library, &AggregateParams::from_config(cfg), rng)?;
    let sep = server::enforce_separation(&mut library.encoded, cfg.rho_sep, cfg.separation_max_sweeps, rng)?;
    if !sep.feasible {
        return Err(Error::State(format!(
            "prototype separation {} infeasible after {} sweeps",
            cfg.rho_sep, sep.sweeps
        )));
    }
    for u in uploads {
        window.push_back(server::clip(&u.vector, cfg.clip_radius));
        if window.len() > cfg.upload_window {
            window.pop_front();
        }
    }
    let flat: Vec<DVector<f64>> = window.iter().cloned().collect();
    let pruned = server::prune_or_reinit(library, &flat, rng);
    library.resync(encoder)?;
    Ok(ServerRoundReport {
        uploads: uploads.len(),
        releases: agg.releases,
        separation_moves: sep.moves,
        reseeded: pruned.reseeded.len(),
    })
}

/// Serve one query. The ranking is computed first; with `feedback`, one
/// short-prompt step on this event follows.
pub fn online_inference(
    model: &Model,
    client: &mut ClientState,
    ev: &Event,
    library: &PrototypeLibrary,
    feedback: bool,
) -> Result<Ranked> {
    let alpha = model.alpha(&client.prompt);
    let h = model.context(ev)?;
    let p = model.compose(&client.prompt, alpha, &h, library)?;
    let ranked = rank_scores(&model.scores(&p, ev)?, ev);
    if feedback && model.cfg.ablation.short_prompt {
        let (_, g) = model.event_grad(&p, ev)?;
        let grad = PromptMatrix::tiled(&(g * alpha), model.cfg.prompt.l_p);
        prompt::short_update(&mut client.prompt, &grad, &model.cfg.prompt)?;
    }
    Ok(ranked)
}

/// Train and test event positions of every user within one slice.
#[derive(Debug, Clone, Default)]
pub struct SliceIndex {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    /// Users with at least one training event, ascending.
    pub active: Vec<usize>,
    /// All test event positions, in slice order.
    pub test_events: Vec<usize>,
}

impl SliceIndex {
    pub fn build(events: &[Event], n_users: usize) -> Self {
        let mut idx = Self { train: vec![Vec::new(); n_users], test: vec![Vec::new(); n_users], ..Default::default() };
        for (i, ev) in events.iter().enumerate() {
            if ev.test {
                idx.test[ev.user as usize].push(i);
                idx.test_events.push(i);
            } else {
                idx.train[ev.user as usize].push(i);
            }
        }
        idx.active = (0..n_users).filter(|&u| !idx.train[u].is_empty()).collect();
        idx
    }
}

/// Per-slice log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub slice: usize,
    pub active_clients: usize,
    pub sampled_clients: usize,
    pub uploads: u64,
    pub mean_loss: f64,
    /// NDCG@10 of the previous model on this slice, before any training on it.
    pub ndcg10_before: Option<f64>,
    pub ndcg10_scratch: f64,
    /// `A[s][t]` for `s = 0..=t`.
    pub accuracy_row: Vec<f64>,
    pub current: RankingSummary,
    pub steps_to_95: u64,
    pub probe_trajectory: Vec<(u64, f64)>,
    pub min_separation: f64,
    pub reseeded: usize,
    pub releases_total: u64,
}

pub const CHECKPOINT_FORMAT: &str = "protofed-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Resumable state of a run after a whole number of slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    /// Next slice to train; never decreases.
    pub next_slice: usize,
    pub clients: Vec<ClientState>,
    pub library: PrototypeLibrary,
    pub window: VecDeque<DVector<f64>>,
    pub accountant: PrivacyAccountant,
    pub upload_calls: u64,
    pub upload_bytes: u64,
    pub accuracy: AccuracyMatrix,
    pub records: Vec<SliceRecord>,
}

impl RunState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut st: RunState = serde_json::from_slice(&std::fs::read(path)?)?;
        st.config.resolve();
        if st.format != CHECKPOINT_FORMAT || st.version != CHECKPOINT_VERSION {
            return Err(Error::State(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                st.format,
                st.version
            )));
        }
        Ok(st)
    }
}

/// Final-model evaluation over every slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalEval {
    /// Per slice, in test-event order.
    pub ranked: Vec<Vec<Ranked>>,
    /// Owner of each entry of `ranked`.
    pub users: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub state: RunState,
}

/// One world, one configuration, all slices.
pub struct Simulation<'w> {
    pub model: Model,
    pub world: &'w World,
    pub index: Vec<SliceIndex>,
    pub mode: Parallelism,
}

impl<'w> Simulation<'w> {
    pub fn new(cfg: &RunConfig, world: &'w World, mode: Parallelism) -> Result<Self> {
        if world.config.n_slices != world.slices.len() {
            return Err(Error::State("world slice count does not match its config".into()));
        }
        let model = Model::new(cfg, world.items.clone())?;
        let n = world.users.len();
        let index = world.slices.iter().map(|s| SliceIndex::build(&s.events, n)).collect();
        Ok(Self { model, world, index, mode })
    }

    fn cfg(&self) -> &RunConfig {
        &self.model.cfg
    }

    pub fn initial_state(&self) -> Result<RunState> {
        let cfg = self.cfg();
        let s = &cfg.server;
        let mut library = PrototypeLibrary::random(
            s.k,
            &self.model.encoder,
            cfg.prompt.l_p,
            s.init_scale,
            s.rho_sep,
            s.tau_util,
            derive_seed(cfg.seed, "library", &[]),
        )?;
        let mut rng = stream(cfg.seed, "library-separation", &[]);
        let sep = server::enforce_separation(&mut library.encoded, s.rho_sep, s.separation_max_sweeps, &mut rng)?;
        if !sep.feasible {
            return Err(Error::State("initial prototypes cannot be separated".into()));
        }
        library.resync(&self.model.encoder)?;
        let t = self.world.slices.len();
        Ok(RunState {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            next_slice: 0,
            clients: vec![ClientState::new(&self.model); self.world.users.len()],
            library,
            window: VecDeque::new(),
            accountant: PrivacyAccountant::default(),
            upload_calls: 0,
            upload_bytes: 0,
            accuracy: AccuracyMatrix::new(t),
            records: Vec::new(),
        })
    }

    /// Rank the test events at `positions` of slice `t`; `state_of` supplies
    /// each user's prompt state and gate.
    fn evaluate<F>(&self, t: usize, positions: &[usize], library: &PrototypeLibrary, state_of: F) -> Result<Vec<Ranked>>
    where
        F: Fn(usize) -> (DualPromptState, f64) + Sync + Send,
    {
        let events = &self.world.slices[t].events;
        par::map(self.mode, positions, |&i| {
            let ev = &events[i];
            let (st, alpha) = state_of(ev.user as usize);
            self.model.rank_event(&st, alpha, ev, library)
        })
        .into_iter()
        .collect()
    }

    fn evaluate_clients(&self, t: usize, clients: &[ClientState], library: &PrototypeLibrary, with_short: bool) -> Result<Vec<Ranked>> {
        let events = &self.world.slices[t].events;
        par::map(self.mode, &self.index[t].test_events, |&i| {
            let ev = &events[i];
            let st = &clients[ev.user as usize].prompt;
            let alpha = if with_short { self.model.alpha(st) } else { 0.0 };
            self.model.rank_event(st, alpha, ev, library)
        })
        .into_iter()
        .collect()
    }

    fn scratch(&self, t: usize) -> Result<f64> {
        let fresh = self.model.fresh_state();
        let empty = PrototypeLibrary::empty(self.cfg().server.rho_sep, self.cfg().server.tau_util);
        let r = self.evaluate(t, &self.index[t].test_events, &empty, |_| (fresh.clone(), 0.0))?;
        Ok(ndcg10(&r))
    }

    /// NDCG trajectory of cloned probe clients taking one local step at a
    /// time on slice `t`, with the library frozen and uploads off.
    fn probe(&self, t: usize, state: &RunState) -> Result<Vec<(u64, f64)>> {
        let fed = &self.cfg().federation;
        let idx = &self.index[t];
        let eligible: Vec<usize> = idx.active.iter().copied().filter(|&u| !idx.test[u].is_empty()).collect();
        if eligible.is_empty() {
            return Ok(Vec::new());
        }
        let mut rng = stream(self.cfg().seed, "probe", &[t as u64]);
        let take = fed.probe_users.min(eligible.len());
        let mut users: Vec<usize> = index::sample(&mut rng, eligible.len(), take).into_iter().map(|i| eligible[i]).collect();
        users.sort_unstable();
        let events = &self.world.slices[t].events;
        let mut probes: Vec<(usize, ClientState, usize)> = users.iter().map(|&u| (u, state.clients[u].clone(), 0)).collect();
        let mut traj = Vec::with_capacity(fed.probe_steps);
        for step in 1..=fed.probe_steps {
            let results: Vec<Result<f64>> = {
                let model = &self.model;
                let library = &state.library;
                let bs = fed.batch_size;
                let mut out = Vec::with_capacity(probes.len());
                let stepped: Vec<Result<(ClientState, usize, f64, usize)>> = par::map(self.mode, &probes, |(u, c, cursor)| {
                    let train = &idx.train[*u];
                    let batch: Vec<&Event> = (0..bs.min(train.len())).map(|j| &events[train[(cursor + j) % train.len()]]).collect();
                    let mut c = c.clone();
                    local_step(model, &mut c, &batch, library, None)?;
                    let mut sum = 0.0;
                    for &i in &idx.test[*u] {
                        let r = model.rank_event(&c.prompt, model.alpha(&c.prompt), &events[i], library)?;
                        sum += metrics::ndcg_at(r.positive_rank, 10);
                    }
                    Ok((c, (cursor + batch.len()) % train.len(), sum, idx.test[*u].len()))
                });
                for (p, s) in probes.iter_mut().zip(stepped) {
                    let (c, cursor, sum, n) = s?;
                    p.1 = c;
                    p.2 = cursor;
                    out.push(Ok(sum / n as f64));
                }
                out
            };
            let vals = results.into_iter().collect::<Result<Vec<f64>>>()?;
            traj.push((step as u64, vals.iter().sum::<f64>() / vals.len() as f64));
        }
        Ok(traj)
    }

    /// Train slice `state.next_slice` and record its accuracy row.
    pub fn run_slice(&self, state: &mut RunState) -> Result<SliceRecord> {
        let t = state.next_slice;
        if t >= self.world.slices.len() {
            return Err(Error::State(format!("slice {t} is past the end of the world")));
        }
        let started = Instant::now();
        let cfg = self.cfg().clone();
        let idx = &self.index[t];
        let events = &self.world.slices[t].events;
        for c in state.clients.iter_mut() {
            c.prompt.p_short = PromptMatrix::zeros(cfg.prompt.l_p, cfg.backbone.d);
        }

        let ndcg10_before = if t > 0 {
            let r = self.evaluate_clients(t, &state.clients, &state.library, false)?;
            let v = ndcg10(&r);
            state.accuracy.set(t, t - 1, v)?;
            Some(v)
        } else {
            None
        };
        let scratch = self.scratch(t)?;
        state.accuracy.scratch[t] = Some(scratch);
        let trajectory = self.probe(t, state)?;
        let steps_to_95 = if trajectory.is_empty() { metrics::NEVER } else { metrics::steps_to_95(&trajectory)? };

        let fed = &cfg.federation;
        let mut sampled_total = 0;
        let mut uploads_total = 0u64;
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        let mut reseeded = 0;
        for round in 0..fed.rounds_per_slice {
            if idx.active.is_empty() {
                break;
            }
            let mut rng = stream(cfg.seed, "sample", &[t as u64, round as u64]);
            let m = ((fed.client_fraction * idx.active.len() as f64).ceil() as usize).clamp(1, idx.active.len());
            let mut chosen: Vec<usize> = index::sample(&mut rng, idx.active.len(), m).into_iter().map(|i| idx.active[i]).collect();
            chosen.sort_unstable();
            sampled_total += chosen.len();
            let mut work: Vec<(usize, ClientState, Option<Result<ClientRound>>)> = chosen
                .iter()
                .map(|&u| (u, std::mem::replace(&mut state.clients[u], ClientState::new(&self.model)), None))
                .collect();
            let library = &state.library;
            let model = &self.model;
            par::for_each_mut(self.mode, &mut work, |_, (u, c, slot)| {
                let mut crng = stream(cfg.seed, "client", &[t as u64, round as u64, *u as u64]);
                let evs: Vec<&Event> = idx.train[*u].iter().map(|&i| &events[i]).collect();
                *slot = Some(client_round(model, c, &evs, library, &mut crng));
            });
            let mut uploads = Vec::new();
            for (u, c, slot) in work {
                state.clients[u] = c;
                let r = slot.expect("every sampled client ran")?;
                loss_sum += r.mean_loss;
                loss_n += 1;
                for z in r.uploads {
                    state.upload_calls += 1;
                    state.accountant.record(state.clients[u].releases);
                    state.upload_bytes += self.model.compressor.upload_bytes() as u64;
                    uploads.push(Upload::new(u as u64, self.model.compressor.lift(&z)));
                }
            }
            uploads_total += uploads.len() as u64;
            if !cfg.ablation.static_prototypes {
                let mut srng = stream(cfg.seed, "server", &[t as u64, round as u64]);
                let rep = server_round(&uploads, &mut state.library, &mut state.window, &cfg.server, &self.model.encoder, &mut srng)?;
                reseeded += rep.reseeded;
            }
            if state.accountant.releases != state.upload_calls {
                return Err(Error::State("privacy accountant release count diverged from uploads".into()));
            }
        }

        // Serving pass on the current slice; rankings precede any feedback step.
        let serve_users: Vec<usize> = (0..self.world.users.len()).filter(|&u| !idx.test[u].is_empty()).collect();
        let library = &state.library;
        let model = &self.model;
        let served: Vec<Result<Vec<(usize, Ranked)>>> = par::map(self.mode, &serve_users, |&u| {
            let mut c = state.clients[u].clone();
            let mut out = Vec::new();
            for &i in &idx.test[u] {
                let mut frng = stream(cfg.seed, "feedback", &[t as u64, i as u64]);
                let fb = fed.feedback_prob > 0.0 && rand::Rng::random::<f64>(&mut frng) < fed.feedback_prob;
                out.push((i, online_inference(model, &mut c, &events[i], library, fb)?));
            }
            Ok(out)
        });
        let mut by_event: Vec<Option<Ranked>> = vec![None; events.len()];
        for r in served {
            for (i, rk) in r? {
                by_event[i] = Some(rk);
            }
        }
        let current: Vec<Ranked> = idx.test_events.iter().map(|&i| by_event[i].clone().expect("served")).collect();
        let cur_ndcg = ndcg10(&current);
        state.accuracy.set(t, t, cur_ndcg)?;
        let mut row = Vec::with_capacity(t + 1);
        for s in 0..t {
            let v = ndcg10(&self.evaluate_clients(s, &state.clients, &state.library, false)?);
            state.accuracy.set(s, t, v)?;
            row.push(v);
        }
        row.push(cur_ndcg);

        for c in state.clients.iter_mut() {
            c.prompt.drift.end_period();
        }
        state.next_slice += 1;
        let rec = SliceRecord {
            slice: t,
            active_clients: idx.active.len(),
            sampled_clients: sampled_total,
            uploads: uploads_total,
            mean_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 },
            ndcg10_before,
            ndcg10_scratch: scratch,
            accuracy_row: row,
            current: RankingSummary::from_ranks(&current.iter().map(|r| r.positive_rank).collect::<Vec<_>>()),
            steps_to_95,
            probe_trajectory: trajectory,
            min_separation: state.library.min_separation(),
            reseeded,
            releases_total: state.accountant.releases,
        };
        state.records.push(rec.clone());
        log::info!(
            "slice {t}: ndcg@10 {:.4}, uploads {}, steps95 {}, {:.2}s",
            cur_ndcg,
            uploads_total,
            steps_to_95,
            started.elapsed().as_secs_f64()
        );
        Ok(rec)
    }

    /// Final model on every slice: the last slice with its short prompts,
    /// earlier slices without.
    pub fn final_eval(&self, state: &RunState) -> Result<FinalEval> {
        let last = self.world.slices.len() - 1;
        let mut ranked = Vec::new();
        let mut users = Vec::new();
        for t in 0..=last {
            ranked.push(self.evaluate_clients(t, &state.clients, &state.library, t == last)?);
            users.push(self.index[t].test_events.iter().map(|&i| self.world.slices[t].events[i].user as usize).collect());
        }
        Ok(FinalEval { ranked, users })
    }

    /// Run every remaining slice, calling `on_slice` after each.
    pub fn run(
        &self,
        mut state: RunState,
        mut on_slice: impl FnMut(&SliceRecord, &RunState) -> Result<()>,
    ) -> Result<RunOutput> {
        if state.config != *self.cfg() {
            return Err(Error::Config("checkpoint was written under a different configuration".into()));
        }
        while state.next_slice < self.world.slices.len() {
            let rec = self.run_slice(&mut state)?;
            on_slice(&rec, &state)?;
        }
        let eval = self.final_eval(&state)?;
        let head = metrics::head_items(&interaction_counts(self.world));
        let strata = world::stratify(&self.world.users, self.world.slices.len());
        let report = compute_metrics(&state, &eval, &head, &strata.activity, &self.model)?;
        Ok(RunOutput { report, state })
    }
}

fn ndcg10(r: &[Ranked]) -> f64 {
    if r.is_empty() {
        return 0.0;
    }
    r.iter().map(|x| metrics::ndcg_at(x.positive_rank, 10)).sum::<f64>() / r.len() as f64
}

/// Positive interactions per item over the whole world.
pub fn interaction_counts(world: &World) -> Vec<u64> {
    let mut counts = vec![0u64; world.items.len()];
    for s in &world.slices {
        for ev in &s.events {
            counts[ev.positive_item() as usize] += 1;
        }
    }
    counts
}

/// Metrics from a completed run: accuracy-matrix functionals, final-model
/// ranking summaries, exposure gaps and efficiency counters.
pub fn compute_metrics(state: &RunState, eval: &FinalEval, head: &[bool], activity: &[Level], model: &Model) -> Result<MetricsReport> {
    let acc = &state.accuracy;
    let n = acc.slices();
    if state.records.len() != n {
        return Err(Error::State(format!("{} of {n} slices recorded", state.records.len())));
    }
    let per_slice: Vec<RankingSummary> = eval
        .ranked
        .iter()
        .map(|r| RankingSummary::from_ranks(&r.iter().map(|x| x.positive_rank).collect::<Vec<_>>()))
        .collect();
    let mut exposure = Exposure::new(head.len(), EXPOSURE_K);
    let (mut hi, mut lo) = ((0.0, 0usize), (0.0, 0usize));
    for (ranked, users) in eval.ranked.iter().zip(&eval.users) {
        for (r, &u) in ranked.iter().zip(users) {
            exposure.record(&r.top);
            let hit = metrics::hr_at(r.positive_rank, 10);
            match activity[u] {
                Level::High => hi = (hi.0 + hit, hi.1 + 1),
                Level::Low => lo = (lo.0 + hit, lo.1 + 1),
                Level::Mid => {}
            }
        }
    }
    let expected: u64 = eval.ranked.iter().flatten().map(|r| r.top.len().min(EXPOSURE_K) as u64).sum();
    if exposure.total() != expected {
        return Err(Error::State("exposure does not sum to the top-K budget".into()));
    }
    let rate = |(s, c): (f64, usize)| if c == 0 { 0.0 } else { s / c as f64 };
    let steps: Vec<u64> = state.records.iter().map(|r| r.steps_to_95).collect();
    let reached: Vec<f64> = steps.iter().filter(|&&s| s != metrics::NEVER).map(|&s| s as f64).collect();
    let dp = &state.config.dp;
    Ok(MetricsReport {
        per_slice,
        final_ndcg10: acc.final_mean()?,
        af: acc.average_forgetting()?,
        bwt: acc.backward_transfer()?,
        fwt: acc.forward_transfer()?,
        mean_steps_to_95: if reached.is_empty() { f64::INFINITY } else { reached.iter().sum::<f64>() / reached.len() as f64 },
        steps_to_95: steps,
        disparity_item: exposure.disparity(head),
        disparity_user: (rate(hi) - rate(lo)).abs(),
        trainable_params_per_client: model.trainable_params(),
        upload_bytes: state.upload_bytes,
        uploads: state.upload_calls,
        epsilon: (dp.sigma > 0.0).then(|| state.accountant.epsilon(dp)),
    })
}
