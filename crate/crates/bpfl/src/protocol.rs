//! The federated round loop: per-client two-stage training against a shared
//! lightweight bypass model, server-side weight averaging of the bypass,
//! the fused inference path, ablation switches, and baselines.
//!
//! Stage a trains the local model (and fusion projections) with the bypass
//! frozen; stage b fine-tunes the bypass (and projections) with the local
//! model frozen. Only the bypass is communicated and averaged.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::{fuse_graph, FusionProjection};
use crate::graph::{Graph, NodeId};
use crate::nn::{
    body_specs, head_specs, init_mlp, mlp_forward, Bindings, LayerSpec, Param, ParamSet,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;
use crate::util::rng_from;

/// The shared body+head model, architecture-identical on every client.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBypass {
    pub body: ParamSet,
    pub head: ParamSet,
}

impl GlobalBypass {
    pub fn compatible_with(&self, other: &GlobalBypass) -> bool {
        self.body.compatible_with(&other.body) && self.head.compatible_with(&other.head)
    }

    pub fn bit_eq(&self, other: &GlobalBypass) -> bool {
        self.body.bit_eq(&other.body) && self.head.bit_eq(&other.head)
    }

    pub fn element_count(&self) -> usize {
        self.body.element_count() + self.head.element_count()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.body.set_trainable(trainable);
        self.head.set_trainable(trainable);
    }

    pub fn content_hash(&self) -> u64 {
        self.body.content_hash() ^ self.head.content_hash().rotate_left(1)
    }
}

/// Coefficients of the two loss terms in each training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_l_loc: f64,
    pub lambda_g_loc: f64,
    pub lambda_g_glob: f64,
    pub lambda_l_glob: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_l_loc: 0.9,
            lambda_g_loc: 0.1,
            lambda_g_glob: 0.9,
            lambda_l_glob: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationFlags {
    pub no_global_head: bool,
    pub no_global_body: bool,
    pub no_fusion: bool,
}

impl AblationFlags {
    pub fn all() -> Self {
        AblationFlags {
            no_global_head: true,
            no_global_body: true,
            no_fusion: true,
        }
    }

    /// All three switches set: the bypass is effectively absent.
    pub fn full(&self) -> bool {
        self.no_global_head && self.no_global_body && self.no_fusion
    }
}

/// A client's private data: features, labels, and the train/test index split.
#[derive(Debug, Clone)]
pub struct Shard {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl Shard {
    /// Seeded 80/20 train/test split over all rows.
    pub fn split(x: Tensor, y: Vec<usize>, seed: u64) -> Result<Self> {
        let n = y.len();
        if x.shape()[0] != n {
            return Err(Error::Shape(format!(
                "{} feature rows vs {} labels",
                x.shape()[0],
                n
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_from(&[seed, 0x73706c69]));
        let cut = ((n as f64) * 0.8).round() as usize;
        let cut = cut.clamp(1.min(n), n.saturating_sub(1).max(1));
        let (train, test) = idx.split_at(cut.min(n));
        Ok(Shard {
            x,
            y,
            train_idx: train.to_vec(),
            test_idx: test.to_vec(),
        })
    }

    pub fn sample_count(&self) -> usize {
        self.y.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Local,
    Global,
}

/// Protocol-level knobs, a subset of the experiment config.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs_local: usize,
    pub epochs_global: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub ablation: AblationFlags,
    pub seed: u64,
    pub uniform_aggregation: bool,
    pub finetune_epochs: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_local: 4,
            epochs_global: 1,
            batch_size: 8,
            loss_weights: LossWeights::default(),
            ablation: AblationFlags::default(),
            seed: 0,
            uniform_aggregation: false,
            finetune_epochs: 5,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub body_spec: Vec<LayerSpec>,
    pub head_spec: Vec<LayerSpec>,
    pub bypass_body_spec: Vec<LayerSpec>,
    pub bypass_head_spec: Vec<LayerSpec>,
    pub local_body: ParamSet,
    pub local_head: ParamSet,
    pub proj: FusionProjection,
    pub bypass: GlobalBypass,
    pub opt_local: Optimizer,
    pub opt_global: Optimizer,
    pub shard: Shard,
}

pub const COMPONENT_PREFIXES: [&str; 6] = [
    "local_body",
    "local_head",
    "proj.up",
    "proj.down",
    "bypass.body",
    "bypass.head",
];

impl ClientState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        in_dim: usize,
        classes: usize,
        body_widths: &[usize],
        bypass_widths: &[usize],
        opt_kind: OptimizerKind,
        lr_local: f64,
        lr_global: f64,
        shard: Shard,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if body_widths.is_empty() || bypass_widths.is_empty() {
            return Err(Error::Config("empty architecture spec".into()));
        }
        let body_spec = body_specs(in_dim, body_widths);
        let local_dim = *body_widths.last().expect("non-empty");
        let head_spec = head_specs(local_dim, classes);
        let bypass_body_spec = body_specs(in_dim, bypass_widths);
        let global_dim = *bypass_widths.last().expect("non-empty");
        let bypass_head_spec = head_specs(global_dim, classes);

        Ok(ClientState {
            id,
            local_body: init_mlp(&body_spec, rng)?,
            local_head: init_mlp(&head_spec, rng)?,
            proj: FusionProjection::seeded(global_dim, local_dim, rng),
            bypass: GlobalBypass {
                body: init_mlp(&bypass_body_spec, rng)?,
                head: init_mlp(&bypass_head_spec, rng)?,
            },
            body_spec,
            head_spec,
            bypass_body_spec,
            bypass_head_spec,
            opt_local: Optimizer::new(opt_kind, lr_local),
            opt_global: Optimizer::new(opt_kind, lr_global),
            shard,
        })
    }

    pub fn classes(&self) -> usize {
        self.head_spec.last().expect("head exists").out_dim
    }

    pub fn input_dim(&self) -> usize {
        self.body_spec.first().expect("body exists").in_dim
    }

    pub fn local_feature_dim(&self) -> usize {
        self.proj.local_dim
    }

    pub fn global_feature_dim(&self) -> usize {
        self.proj.global_dim
    }

    pub fn sample_count(&self) -> usize {
        self.shard.sample_count()
    }

    pub fn local_param_count(&self) -> usize {
        self.local_body.element_count() + self.local_head.element_count()
    }

    pub fn components(&self) -> [(&'static str, &ParamSet); 6] {
        [
            ("local_body", &self.local_body),
            ("local_head", &self.local_head),
            ("proj.up", &self.proj.up),
            ("proj.down", &self.proj.down),
            ("bypass.body", &self.bypass.body),
            ("bypass.head", &self.bypass.head),
        ]
    }

    pub fn components_mut(&mut self) -> [(&'static str, &mut ParamSet); 6] {
        [
            ("local_body", &mut self.local_body),
            ("local_head", &mut self.local_head),
            ("proj.up", &mut self.proj.up),
            ("proj.down", &mut self.proj.down),
            ("bypass.body", &mut self.bypass.body),
            ("bypass.head", &mut self.bypass.head),
        ]
    }

    /// All parameters in one set under qualified names, flags included.
    pub fn flat_params(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (prefix, set) in self.components() {
            for (name, p) in set.iter() {
                out.insert(&format!("{prefix}.{name}"), p.value.clone(), p.trainable)
                    .expect("qualified names are unique");
            }
        }
        out
    }

    /// Overwrites parameter values from a qualified flat set.
    pub fn load_flat(&mut self, flat: &ParamSet) -> Result<()> {
        for (prefix, set) in self.components_mut() {
            for (name, p) in set.iter_mut() {
                let q = format!("{prefix}.{name}");
                let src = flat.get(&q)?;
                if !src.value.same_shape(&p.value) {
                    return Err(Error::Shape(format!(
                        "loading {q}: {:?} into {:?}",
                        src.value.shape(),
                        p.value.shape()
                    )));
                }
                p.value = src.value.clone();
            }
        }
        Ok(())
    }

    fn set_stage_flags(&mut self, train_local: bool) {
        self.local_body.set_trainable(train_local);
        self.local_head.set_trainable(train_local);
        // projections bridge the frozen and unfrozen halves; trained in both stages
        self.proj.set_trainable(true);
        self.bypass.set_trainable(!train_local);
    }
}

fn with_client(id: usize, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("client {id}: {m}")),
        Error::Domain(m) => Error::Domain(format!("client {id}: {m}")),
        Error::NonFinite(m) => Error::NonFinite(format!("client {id}: {m}")),
        Error::Usage(m) => Error::Usage(format!("client {id}: {m}")),
        Error::Config(m) => Error::Config(format!("client {id}: {m}")),
        other => other,
    }
}

pub struct ForwardNodes {
    pub y_l: NodeId,
    pub y_g: Option<NodeId>,
    pub x_lf: NodeId,
}

/// Appends the client's full forward computation to the tape.
///
/// `with_global_head` gates the global-head branch independently of the
/// ablation flags; the inference path always disables it.
pub fn client_forward_graph(
    g: &mut Graph,
    client: &ClientState,
    x: &Tensor,
    ablation: &AblationFlags,
    with_global_head: bool,
    binds: &mut Bindings,
) -> Result<ForwardNodes> {
    let (batch, in_dim) = x.dims2().map_err(|e| with_client(client.id, e))?;
    if in_dim != client.input_dim() {
        return Err(Error::Shape(format!(
            "client {}: input width {in_dim}, model expects {}",
            client.id,
            client.input_dim()
        )));
    }
    let xin = g.leaf(x.clone(), false);
    let x_l = mlp_forward(g, &client.body_spec, &client.local_body, "local_body", xin, binds)
        .map_err(|e| with_client(client.id, e))?;

    let xg_hat = if ablation.no_global_body {
        g.leaf(Tensor::zeros(vec![batch, client.local_feature_dim()]), false)
    } else {
        let x_g = mlp_forward(
            g,
            &client.bypass_body_spec,
            &client.bypass.body,
            "bypass.body",
            xin,
            binds,
        )
        .map_err(|e| with_client(client.id, e))?;
        client
            .proj
            .resample_global_graph(g, x_g, "proj", binds)
            .map_err(|e| with_client(client.id, e))?
    };

    let x_lf = if ablation.no_fusion {
        x_l
    } else {
        fuse_graph(g, xg_hat, x_l).map_err(|e| with_client(client.id, e))?
    };

    let y_l = mlp_forward(g, &client.head_spec, &client.local_head, "local_head", x_lf, binds)
        .map_err(|e| with_client(client.id, e))?;

    let y_g = if ablation.no_global_head || !with_global_head {
        None
    } else {
        let x_gf = client
            .proj
            .resample_fused_graph(g, x_lf, "proj", binds)
            .map_err(|e| with_client(client.id, e))?;
        Some(
            mlp_forward(
                g,
                &client.bypass_head_spec,
                &client.bypass.head,
                "bypass.head",
                x_gf,
                binds,
            )
            .map_err(|e| with_client(client.id, e))?,
        )
    };

    Ok(ForwardNodes { y_l, y_g, x_lf })
}

pub struct ForwardOutput {
    pub y_l: Tensor,
    pub y_g: Option<Tensor>,
    pub features: Tensor,
}

/// Tape-free view of the client forward pass.
pub fn forward_pass(client: &ClientState, x: &Tensor, ablation: &AblationFlags) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let mut binds = Bindings::new();
    let nodes = client_forward_graph(&mut g, client, x, ablation, true, &mut binds)?;
    Ok(ForwardOutput {
        y_l: g.value(nodes.y_l).clone(),
        y_g: nodes.y_g.map(|id| g.value(id).clone()),
        features: g.value(nodes.x_lf).clone(),
    })
}

/// Ties break toward the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, c) = logits.dims2()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0;
        for j in 1..c {
            if logits.at2(i, j) > logits.at2(i, best) {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Local-head logits only; the global head is never on this path, so
/// predictions are bit-invariant under any change to `bypass.head`.
pub fn inference_logits(client: &ClientState, x: &Tensor, ablation: &AblationFlags) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut binds = Bindings::new();
    let nodes = client_forward_graph(&mut g, client, x, ablation, false, &mut binds)?;
    debug_assert!(nodes.y_g.is_none());
    Ok(g.value(nodes.y_l).clone())
}

pub fn inference_forward(client: &ClientState, x: &Tensor, ablation: &AblationFlags) -> Result<Vec<usize>> {
    argmax_rows(&inference_logits(client, x, ablation)?)
}

fn gather_batch(shard: &Shard, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let d = shard.x.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(&shard.x.data()[i * d..(i + 1) * d]);
        labels.push(shard.y[i]);
    }
    Ok((Tensor::matrix(idx.len(), d, data)?, labels))
}

fn stage_tag(stage: Stage) -> u64 {
    match stage {
        Stage::Local => 0xA,
        Stage::Global => 0xB,
    }
}

fn stage_loss(
    g: &mut Graph,
    nodes: &ForwardNodes,
    labels: &[usize],
    weights: &LossWeights,
    stage: Stage,
) -> Result<NodeId> {
    let ce_l = g.cross_entropy(nodes.y_l, labels)?;
    match nodes.y_g {
        Some(y_g) => {
            let ce_g = g.cross_entropy(y_g, labels)?;
            let (wl, wg) = match stage {
                Stage::Local => (weights.lambda_l_loc, weights.lambda_g_loc),
                Stage::Global => (weights.lambda_l_glob, weights.lambda_g_glob),
            };
            let tl = g.scale(ce_l, wl)?;
            let tg = g.scale(ce_g, wg)?;
            g.add(tl, tg)
        }
        // With the global head ablated the remaining term is the whole loss.
        None => Ok(ce_l),
    }
}

fn step_client_optimizer(
    client: &mut ClientState,
    stage: Stage,
    grads: &IndexMap<String, Tensor>,
) -> Result<()> {
    let ClientState {
        local_body,
        local_head,
        proj,
        bypass,
        opt_local,
        opt_global,
        ..
    } = client;
    let opt = match stage {
        Stage::Local => opt_local,
        Stage::Global => opt_global,
    };
    let mut entries: Vec<(String, &mut Param)> = Vec::new();
    let comps: [(&str, &mut ParamSet); 6] = [
        ("local_body", local_body),
        ("local_head", local_head),
        ("proj.up", &mut proj.up),
        ("proj.down", &mut proj.down),
        ("bypass.body", &mut bypass.body),
        ("bypass.head", &mut bypass.head),
    ];
    for (prefix, set) in comps {
        for (name, p) in set.iter_mut() {
            entries.push((format!("{prefix}.{name}"), p));
        }
    }
    opt.step_entries(entries, grads)
}

/// Runs one training stage over the client's shard and returns the mean
/// minibatch loss.
///
/// When every ablation flag is set there is no bypass to fine-tune; the
/// global stage then degenerates to continued local training at the global
/// learning rate, which keeps the epoch budget comparable to the baselines.
pub fn train_stage(
    client: &mut ClientState,
    stage: Stage,
    cfg: &TrainConfig,
    round: usize,
) -> Result<f64> {
    if client.shard.train_idx.is_empty() {
        return Err(Error::Config(format!("client {}: empty training shard", client.id)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let degenerate = stage == Stage::Global && cfg.ablation.full();
    let train_local = stage == Stage::Local || degenerate;
    client.set_stage_flags(train_local);

    let epochs = match stage {
        Stage::Local => cfg.epochs_local,
        Stage::Global => cfg.epochs_global,
    };
    let mut rng = rng_from(&[cfg.seed, 0x535447, round as u64, client.id as u64, stage_tag(stage)]);
    let mut order = client.shard.train_idx.clone();
    let mut total = 0.0;
    let mut batches = 0usize;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = gather_batch(&client.shard, chunk)?;
            let mut g = Graph::new();
            let mut binds = Bindings::new();
            let nodes = client_forward_graph(&mut g, client, &x, &cfg.ablation, true, &mut binds)?;
            let loss = stage_loss(&mut g, &nodes, &labels, &cfg.loss_weights, stage)
                .map_err(|e| with_client(client.id, e))?;
            total += g.scalar_value(loss)?;
            batches += 1;
            let grads = crate::nn::collect_grads(&g, loss, &binds)
                .map_err(|e| with_client(client.id, e))?;
            step_client_optimizer(client, stage, &grads).map_err(|e| with_client(client.id, e))?;
        }
    }
    Ok(total / batches as f64)
}

pub fn local_stage_train(client: &mut ClientState, cfg: &TrainConfig, round: usize) -> Result<f64> {
    train_stage(client, Stage::Local, cfg, round)
}

pub fn global_stage_train(client: &mut ClientState, cfg: &TrainConfig, round: usize) -> Result<f64> {
    train_stage(client, Stage::Global, cfg, round)
}

fn aggregate_sets(sets: &[&ParamSet], weights: &[f64], what: &str) -> Result<ParamSet> {
    let first = sets.first().ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    for (k, set) in sets.iter().enumerate().skip(1) {
        if !first.compatible_with(set) {
            let mismatched = first
                .iter()
                .zip(set.iter())
                .find(|((an, ap), (bn, bp))| an != bn || ap.value.shape() != bp.value.shape())
                .map(|((an, _), (bn, _))| format!("{an} vs {bn}"))
                .unwrap_or_else(|| "entry count".into());
            return Err(Error::Shape(format!(
                "{what}: client 0 and client {k} incompatible at {mismatched}"
            )));
        }
    }
    let mut out = ParamSet::new();
    for (name, p) in first.iter() {
        let mut acc = vec![0.0; p.value.len()];
        for (set, &w) in sets.iter().zip(weights) {
            for (a, &v) in acc.iter_mut().zip(set.get(name)?.value.data()) {
                *a += w * v;
            }
        }
        out.insert(name, Tensor::new(p.value.shape().to_vec(), acc)?, p.trainable)?;
    }
    Ok(out)
}

/// Sample-count-weighted mean of the bypass copies, body and head averaged
/// as separate groups. Callers pass clients in ascending id order, which
/// fixes the summation order.
pub fn aggregate_bypass(
    bypasses: &[(&GlobalBypass, usize)],
    uniform: bool,
) -> Result<GlobalBypass> {
    if bypasses.is_empty() {
        return Err(Error::Config("nothing to aggregate".into()));
    }
    if bypasses.iter().any(|(_, n)| *n == 0) {
        return Err(Error::Config("aggregation weight of zero samples".into()));
    }
    let weights: Vec<f64> = if uniform {
        vec![1.0 / bypasses.len() as f64; bypasses.len()]
    } else {
        let total: usize = bypasses.iter().map(|(_, n)| n).sum();
        bypasses.iter().map(|(_, n)| *n as f64 / total as f64).collect()
    };
    let bodies: Vec<&ParamSet> = bypasses.iter().map(|(b, _)| &b.body).collect();
    let heads: Vec<&ParamSet> = bypasses.iter().map(|(b, _)| &b.head).collect();
    Ok(GlobalBypass {
        body: aggregate_sets(&bodies, &weights, "bypass body")?,
        head: aggregate_sets(&heads, &weights, "bypass head")?,
    })
}

pub fn broadcast_bypass(server: &GlobalBypass, clients: &mut [ClientState]) {
    for client in clients {
        client.bypass = server.clone();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundMetrics {
    pub client_id: usize,
    pub stage_a_loss: f64,
    pub stage_b_loss: f64,
    pub acc: f64,
    pub mf1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRoundMetrics>,
}

impl RoundReport {
    fn mean(&self, f: impl Fn(&ClientRoundMetrics) -> f64) -> f64 {
        self.clients.iter().map(f).sum::<f64>() / self.clients.len() as f64
    }

    pub fn avg_acc(&self) -> f64 {
        self.mean(|c| c.acc)
    }

    pub fn avg_mf1(&self) -> f64 {
        self.mean(|c| c.mf1)
    }

    pub fn avg_stage_a_loss(&self) -> f64 {
        self.mean(|c| c.stage_a_loss)
    }

    pub fn avg_stage_b_loss(&self) -> f64 {
        self.mean(|c| c.stage_b_loss)
    }
}

/// Accuracy and macro-F1 on the client's held-out split via the inference
/// path.
pub fn evaluate_client(client: &ClientState, ablation: &AblationFlags) -> Result<(f64, f64)> {
    if client.shard.test_idx.is_empty() {
        return Err(Error::Config(format!("client {}: empty test split", client.id)));
    }
    let (x, labels) = gather_batch(&client.shard, &client.shard.test_idx)?;
    let preds = inference_forward(client, &x, ablation)?;
    let cm = crate::metrics::ConfusionMatrix::from_pairs(&labels, &preds, client.classes())?;
    Ok((crate::metrics::accuracy(&cm)?, crate::metrics::macro_f1(&cm)?))
}

/// Runs `f` over every client, fanning out over at most `threads` OS threads.
/// Clients are independent during a stage, and all client randomness is
/// derived from (seed, round, client id), so the fan-out width never changes
/// results.
fn for_each_client<T: Send>(
    clients: &mut [ClientState],
    threads: usize,
    f: impl Fn(&mut ClientState) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let threads = threads.max(1);
    if threads == 1 || clients.len() <= 1 {
        return clients.iter_mut().map(&f).collect();
    }
    let chunk = clients.len().div_ceil(threads);
    let mut results: Vec<Option<Result<T>>> = (0..clients.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (chunk_clients, chunk_results) in
            clients.chunks_mut(chunk).zip(results.chunks_mut(chunk))
        {
            let f = &f;
            scope.spawn(move || {
                for (client, slot) in chunk_clients.iter_mut().zip(chunk_results.iter_mut()) {
                    *slot = Some(f(client));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every client visited"))
        .collect()
}

/// One full protocol round: per-client stage a then stage b, bypass
/// aggregation, broadcast, and evaluation.
pub fn run_round(
    server: &mut GlobalBypass,
    clients: &mut [ClientState],
    cfg: &TrainConfig,
    round: usize,
) -> Result<RoundReport> {
    let losses = for_each_client(clients, cfg.threads, |client| {
        let a = local_stage_train(client, cfg, round)?;
        let b = global_stage_train(client, cfg, round)?;
        Ok((a, b))
    })?;

    let inputs: Vec<(&GlobalBypass, usize)> = clients
        .iter()
        .map(|c| (&c.bypass, c.sample_count()))
        .collect();
    *server = aggregate_bypass(&inputs, cfg.uniform_aggregation)?;
    broadcast_bypass(server, clients);

    let mut report = RoundReport {
        round,
        clients: Vec::with_capacity(clients.len()),
    };
    for (client, (a, b)) in clients.iter().zip(losses) {
        let (acc, mf1) = evaluate_client(client, &cfg.ablation)?;
        report.clients.push(ClientRoundMetrics {
            client_id: client.id,
            stage_a_loss: a,
            stage_b_loss: b,
            acc,
            mf1,
        });
    }
    Ok(report)
}

/// One round of the isolated baseline: each client trains its bare local
/// model on the same epoch schedule, with no bypass, fusion, or
/// communication.
pub fn baseline_local_only_round(
    clients: &mut [ClientState],
    cfg: &TrainConfig,
    round: usize,
) -> Result<RoundReport> {
    let cfg = TrainConfig {
        ablation: AblationFlags::all(),
        ..cfg.clone()
    };
    let losses = for_each_client(clients, cfg.threads, |client| {
        let a = local_stage_train(client, &cfg, round)?;
        let b = global_stage_train(client, &cfg, round)?;
        Ok((a, b))
    })?;
    let mut report = RoundReport {
        round,
        clients: Vec::with_capacity(clients.len()),
    };
    for (client, (a, b)) in clients.iter().zip(losses) {
        let (acc, mf1) = evaluate_client(client, &cfg.ablation)?;
        report.clients.push(ClientRoundMetrics {
            client_id: client.id,
            stage_a_loss: a,
            stage_b_loss: b,
            acc,
            mf1,
        });
    }
    Ok(report)
}

pub fn ensure_homogeneous(clients: &[ClientState]) -> Result<()> {
    let first = match clients.first() {
        Some(c) => c,
        None => return Err(Error::Config("no clients".into())),
    };
    for c in clients.iter().skip(1) {
        if c.body_spec != first.body_spec || c.head_spec != first.head_spec {
            return Err(Error::Config(format!(
                "FedAvg requires one shared architecture; client {} differs from client {}",
                c.id, first.id
            )));
        }
    }
    Ok(())
}

/// One FedAvg round over homogeneous clients: bare local training on the
/// full epoch budget, then sample-weighted averaging of the entire local
/// model.
pub fn fedavg_round(
    clients: &mut [ClientState],
    cfg: &TrainConfig,
    round: usize,
) -> Result<RoundReport> {
    ensure_homogeneous(clients)?;
    let cfg = TrainConfig {
        ablation: AblationFlags::all(),
        ..cfg.clone()
    };
    let losses = for_each_client(clients, cfg.threads, |client| {
        let a = local_stage_train(client, &cfg, round)?;
        let b = global_stage_train(client, &cfg, round)?;
        Ok((a, b))
    })?;

    let total: usize = clients.iter().map(|c| c.sample_count()).sum();
    let weights: Vec<f64> = if cfg.uniform_aggregation {
        vec![1.0 / clients.len() as f64; clients.len()]
    } else {
        clients.iter().map(|c| c.sample_count() as f64 / total as f64).collect()
    };
    let bodies: Vec<&ParamSet> = clients.iter().map(|c| &c.local_body).collect();
    let heads: Vec<&ParamSet> = clients.iter().map(|c| &c.local_head).collect();
    let avg_body = aggregate_sets(&bodies, &weights, "fedavg body")?;
    let avg_head = aggregate_sets(&heads, &weights, "fedavg head")?;
    for client in clients.iter_mut() {
        client.local_body = avg_body.clone();
        client.local_head = avg_head.clone();
    }

    let mut report = RoundReport {
        round,
        clients: Vec::with_capacity(clients.len()),
    };
    for (client, (a, b)) in clients.iter().zip(losses) {
        let (acc, mf1) = evaluate_client(client, &cfg.ablation)?;
        report.clients.push(ClientRoundMetrics {
            client_id: client.id,
            stage_a_loss: a,
            stage_b_loss: b,
            acc,
            mf1,
        });
    }
    Ok(report)
}

/// Post-training personalization pass for FedAvg+FT: extra local epochs on
/// each client, then a final evaluation.
pub fn fedavg_finetune(
    clients: &mut [ClientState],
    cfg: &TrainConfig,
    round: usize,
) -> Result<RoundReport> {
    let ft_cfg = TrainConfig {
        ablation: AblationFlags::all(),
        epochs_local: cfg.finetune_epochs,
        ..cfg.clone()
    };
    let losses = for_each_client(clients, ft_cfg.threads, |client| {
        local_stage_train(client, &ft_cfg, round)
    })?;
    let mut report = RoundReport {
        round,
        clients: Vec::with_capacity(clients.len()),
    };
    for (client, a) in clients.iter().zip(losses) {
        let (acc, mf1) = evaluate_client(client, &ft_cfg.ablation)?;
        report.clients.push(ClientRoundMetrics {
            client_id: client.id,
            stage_a_loss: a,
            stage_b_loss: 0.0,
            acc,
            mf1,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ParamCountRow {
    pub model: String,
    pub params: usize,
}

#[derive(Debug, Clone)]
pub struct ParamCountReport {
    pub rows: Vec<ParamCountRow>,
    pub bypass_params: usize,
    pub min_local_params: usize,
}

impl ParamCountReport {
    pub fn bypass_is_lighter(&self) -> bool {
        self.bypass_params < self.min_local_params
    }

    pub fn ratio(&self) -> f64 {
        self.bypass_params as f64 / self.min_local_params as f64
    }
}

impl std::fmt::Display for ParamCountReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<20} {:>10}", "model", "params")?;
        for row in &self.rows {
            writeln!(f, "{:<20} {:>10}", row.model, row.params)?;
        }
        writeln!(
            f,
            "bypass/min-local ratio: {:.4} ({})",
            self.ratio(),
            if self.bypass_is_lighter() { "bypass lighter" } else { "bypass NOT lighter" }
        )
    }
}

/// Exact trainable-parameter counts per local model and for the shared
/// bypass. Ablated bypass halves contribute zero.
pub fn param_count_report(clients: &[ClientState], ablation: &AblationFlags) -> ParamCountReport {
    let mut rows = Vec::new();
    let mut min_local = usize::MAX;
    for client in clients {
        let n = client.local_param_count();
        min_local = min_local.min(n);
        rows.push(ParamCountRow {
            model: format!("client{}-local", client.id),
            params: n,
        });
    }
    let bypass_params = clients
        .first()
        .map(|c| {
            let body = if ablation.no_global_body { 0 } else { c.bypass.body.element_count() };
            let head = if ablation.no_global_head { 0 } else { c.bypass.head.element_count() };
            body + head
        })
        .unwrap_or(0);
    rows.push(ParamCountRow {
        model: "bypass".into(),
        params: bypass_params,
    });
    ParamCountReport {
        rows,
        bypass_params,
        min_local_params: min_local,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dense_forward;

    fn random_shard(seed: u64, n: usize, d: usize, classes: usize) -> Shard {
        let mut rng = rng_from(&[seed, 0xDA7A]);
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        Shard::split(Tensor::matrix(n, d, data).unwrap(), labels, seed).unwrap()
    }

    fn test_client(id: usize, seed: u64, widths: &[usize]) -> ClientState {
        let mut rng = rng_from(&[seed, 0xC11E]);
        ClientState::new(
            id,
            6,
            3,
            widths,
            &[4],
            OptimizerKind::Adam,
            1e-3,
            1e-4,
            random_shard(seed, 24, 6, 3),
            &mut rng,
        )
        .unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs_local: 1,
            epochs_global: 1,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage_a_leaves_bypass_bit_identical() {
        let mut client = test_client(0, 1, &[8, 5]);
        let before = client.bypass.clone();
        local_stage_train(&mut client, &quick_cfg(), 0).unwrap();
        assert!(client.bypass.bit_eq(&before));
        assert_eq!(client.bypass.content_hash(), before.content_hash());
    }

    #[test]
    fn stage_b_leaves_local_bit_identical() {
        let mut client = test_client(0, 2, &[8, 5]);
        local_stage_train(&mut client, &quick_cfg(), 0).unwrap();
        let body = client.local_body.clone();
        let head = client.local_head.clone();
        let bypass_before = client.bypass.clone();
        global_stage_train(&mut client, &quick_cfg(), 0).unwrap();
        assert!(client.local_body.bit_eq(&body));
        assert!(client.local_head.bit_eq(&head));
        assert!(!client.bypass.bit_eq(&bypass_before));
    }

    #[test]
    fn stages_update_their_trainable_halves() {
        let mut client = test_client(0, 3, &[8, 5]);
        let body = client.local_body.clone();
        let proj = client.proj.up.clone();
        local_stage_train(&mut client, &quick_cfg(), 0).unwrap();
        assert!(!client.local_body.bit_eq(&body));
        assert!(!client.proj.up.bit_eq(&proj));
    }

    fn scalar_bypass(body_v: f64, head_v: f64) -> GlobalBypass {
        let mut body = ParamSet::new();
        body.insert("p", Tensor::scalar(body_v), true).unwrap();
        let mut head = ParamSet::new();
        head.insert("q", Tensor::scalar(head_v), true).unwrap();
        GlobalBypass { body, head }
    }

    #[test]
    fn aggregate_identical_inputs_is_fixed_point() {
        let b = scalar_bypass(0.123456789, -7.5);
        let out = aggregate_bypass(&[(&b, 5), (&b, 9), (&b, 1)], false).unwrap();
        for (name, p) in out.body.iter().chain(out.head.iter()) {
            let orig = if name == "p" { 0.123456789 } else { -7.5 };
            assert!((p.value.data()[0] - orig).abs() <= 1e-12);
        }
    }

    #[test]
    fn aggregate_hand_cases() {
        let a = scalar_bypass(1.0, 0.0);
        let b = scalar_bypass(3.0, 0.0);
        let out = aggregate_bypass(&[(&a, 7), (&b, 7)], false).unwrap();
        assert_eq!(out.body.get("p").unwrap().value.data()[0], 2.0);

        let a = scalar_bypass(0.0, 0.0);
        let b = scalar_bypass(4.0, 0.0);
        let out = aggregate_bypass(&[(&a, 1), (&b, 3)], false).unwrap();
        assert_eq!(out.body.get("p").unwrap().value.data()[0], 3.0);

        // uniform weighting ignores the counts
        let out = aggregate_bypass(&[(&a, 1), (&b, 3)], true).unwrap();
        assert_eq!(out.body.get("p").unwrap().value.data()[0], 2.0);
    }

    #[test]
    fn aggregate_stays_in_elementwise_envelope() {
        let clients: Vec<ClientState> = (0..3).map(|i| test_client(i, 10 + i as u64, &[8, 5])).collect();
        let inputs: Vec<(&GlobalBypass, usize)> =
            clients.iter().map(|c| (&c.bypass, c.sample_count())).collect();
        let out = aggregate_bypass(&inputs, false).unwrap();
        for (name, p) in out.body.iter() {
            for (j, &v) in p.value.data().iter().enumerate() {
                let vals: Vec<f64> = clients
                    .iter()
                    .map(|c| c.bypass.body.get(name).unwrap().value.data()[j])
                    .collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_incompatible_names_the_parameter() {
        let a = scalar_bypass(1.0, 0.0);
        let mut b = scalar_bypass(1.0, 0.0);
        b.body.get_mut("p").unwrap().value = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let err = aggregate_bypass(&[(&a, 1), (&b, 1)], false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('p') && msg.contains("client 1"), "{msg}");
    }

    #[test]
    fn aggregate_rejects_zero_counts_and_empty() {
        let a = scalar_bypass(1.0, 0.0);
        assert!(aggregate_bypass(&[(&a, 0)], false).is_err());
        assert!(aggregate_bypass(&[], false).is_err());
    }

    #[test]
    fn broadcast_copies_are_bit_identical() {
        let mut clients: Vec<ClientState> = (0..3).map(|i| test_client(i, 20 + i as u64, &[8, 5])).collect();
        let server = scalar_bypass(0.5, 0.25);
        // architectures differ from the clients' own bypasses on purpose:
        // broadcast replaces wholesale
        broadcast_bypass(&server, &mut clients);
        for c in &clients {
            assert!(c.bypass.bit_eq(&server));
        }
    }

    #[test]
    fn full_ablation_forward_equals_bare_local_model() {
        let client = test_client(0, 30, &[8, 5]);
        let x = {
            let mut rng = rng_from(&[31]);
            let data = (0..5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::matrix(5, 6, data).unwrap()
        };
        let out = forward_pass(&client, &x, &AblationFlags::all()).unwrap();
        assert!(out.y_g.is_none());

        // hand-composed chain through the pure ops
        let mut h = x.clone();
        for (k, spec) in client.body_spec.iter().enumerate() {
            let w = &client.local_body.get(&format!("l{k}.w")).unwrap().value;
            let b = &client.local_body.get(&format!("l{k}.b")).unwrap().value;
            h = dense_forward(&h, w, b).unwrap();
            if spec.kind == crate::nn::LayerKind::Relu {
                h = h.map(|v| v.max(0.0));
            }
        }
        assert!(out.features.bit_eq(&h));
        let w = &client.local_head.get("l0.w").unwrap().value;
        let b = &client.local_head.get("l0.b").unwrap().value;
        let logits = dense_forward(&h, w, b).unwrap();
        assert!(out.y_l.bit_eq(&logits));
    }

    #[test]
    fn no_fusion_makes_features_exactly_local() {
        let client = test_client(0, 32, &[8, 5]);
        let x = Tensor::matrix(1, 6, vec![0.3, -0.1, 0.7, 0.0, -0.9, 0.4]).unwrap();
        let flags = AblationFlags { no_fusion: true, ..Default::default() };
        let fused = forward_pass(&client, &x, &flags).unwrap();
        let bare = forward_pass(&client, &x, &AblationFlags::all()).unwrap();
        assert!(fused.features.bit_eq(&bare.features));
    }

    #[test]
    fn no_global_body_yields_silu_features() {
        // fusing x_l against zeros gives x_l * sigmoid(x_l) per channel
        let client = test_client(0, 33, &[8, 5]);
        let x = Tensor::matrix(2, 6, vec![0.3, -0.1, 0.7, 0.0, -0.9, 0.4, 1.0, 0.0, -1.0, 0.5, 0.2, -0.2]).unwrap();
        let flags = AblationFlags { no_global_body: true, ..Default::default() };
        let out = forward_pass(&client, &x, &flags).unwrap();
        let bare = forward_pass(&client, &x, &AblationFlags::all()).unwrap();
        // l + sigmoid(0 - l) * (0 - l) = l * sigmoid(l)
        let expect = bare.features.map(|v| v * (1.0 / (1.0 + (-v).exp())));
        for (a, b) in out.features.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn inference_is_invariant_to_bypass_head() {
        let mut client = test_client(0, 34, &[8, 5]);
        let cfg = quick_cfg();
        local_stage_train(&mut client, &cfg, 0).unwrap();
        global_stage_train(&mut client, &cfg, 0).unwrap();
        let x = {
            let mut rng = rng_from(&[35]);
            let data = (0..100 * 6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Tensor::matrix(100, 6, data).unwrap()
        };
        let flags = AblationFlags::default();
        let logits = inference_logits(&client, &x, &flags).unwrap();
        let preds = inference_forward(&client, &x, &flags).unwrap();

        let mut rng = rng_from(&[36]);
        for (_, p) in client.bypass.head.iter_mut() {
            let data = (0..p.value.len()).map(|_| rng.gen_range(-10.0..10.0)).collect();
            p.value = Tensor::new(p.value.shape().to_vec(), data).unwrap();
        }
        assert!(inference_logits(&client, &x, &flags).unwrap().bit_eq(&logits));
        assert_eq!(inference_forward(&client, &x, &flags).unwrap(), preds);
    }

    #[test]
    fn inference_matches_forward_pass_argmax() {
        let client = test_client(0, 37, &[8, 5]);
        let mut rng = rng_from(&[38]);
        let flags = AblationFlags::default();
        for _ in 0..100 {
            let data = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = Tensor::matrix(1, 6, data).unwrap();
            let full = forward_pass(&client, &x, &flags).unwrap();
            let pred = inference_forward(&client, &x, &flags).unwrap();
            assert_eq!(pred, argmax_rows(&full.y_l).unwrap());
        }
    }

    #[test]
    fn argmax_ties_break_to_lowest_index() {
        let z = Tensor::matrix(2, 3, vec![1.0, 1.0, 1.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&z).unwrap(), vec![0, 1]);
    }

    #[test]
    fn sgd_single_batch_step_matches_gradient_oracle() {
        let mut rng = rng_from(&[40, 0xC11E]);
        let shard = random_shard(40, 2, 6, 3); // 1 train row after the 80/20 clamp
        assert_eq!(shard.train_idx.len(), 1);
        let lr = 0.05;
        let mut client = ClientState::new(
            0, 6, 3, &[5, 4], &[4], OptimizerKind::Sgd, lr, lr, shard, &mut rng,
        )
        .unwrap();

        // expected gradients for the stage-a loss on that single sample
        let mut oracle = client.clone();
        oracle.local_body.set_trainable(true);
        oracle.local_head.set_trainable(true);
        oracle.proj.set_trainable(true);
        oracle.bypass.set_trainable(false);
        let (x, labels) = gather_batch(&oracle.shard, &oracle.shard.train_idx).unwrap();
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let nodes =
            client_forward_graph(&mut g, &oracle, &x, &AblationFlags::default(), true, &mut binds)
                .unwrap();
        let w = LossWeights::default();
        let loss = stage_loss(&mut g, &nodes, &labels, &w, Stage::Local).unwrap();
        let grads = crate::nn::collect_grads(&g, loss, &binds).unwrap();

        let cfg = quick_cfg();
        let before = client.flat_params();
        local_stage_train(&mut client, &cfg, 0).unwrap();
        let after = client.flat_params();
        for (name, p) in after.iter() {
            let prev = &before.get(name).unwrap().value;
            let expect = match grads.get(name) {
                Some(grad) => prev.zip_map(grad, |p, g| p - lr * g).unwrap(),
                None => prev.clone(),
            };
            for (a, e) in p.value.data().iter().zip(expect.data()) {
                assert!((a - e).abs() < 1e-14, "{name}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn full_ablation_round_equals_local_only_baseline() {
        let make = || -> Vec<ClientState> {
            (0..2).map(|i| test_client(i, 50 + i as u64, &[8, 5])).collect()
        };
        let mut via_protocol = make();
        let mut via_baseline = make();
        let cfg = TrainConfig {
            ablation: AblationFlags::all(),
            ..quick_cfg()
        };
        let mut server = aggregate_bypass(
            &via_protocol.iter().map(|c| (&c.bypass, 1)).collect::<Vec<_>>(),
            true,
        )
        .unwrap();
        let mut reports_a = Vec::new();
        let mut reports_b = Vec::new();
        for round in 0..2 {
            reports_a.push(run_round(&mut server, &mut via_protocol, &cfg, round).unwrap());
            reports_b.push(baseline_local_only_round(&mut via_baseline, &cfg, round).unwrap());
        }
        for (a, b) in via_protocol.iter().zip(&via_baseline) {
            assert!(a.local_body.bit_eq(&b.local_body));
            assert!(a.local_head.bit_eq(&b.local_head));
        }
        assert_eq!(reports_a, reports_b);
    }

    #[test]
    fn local_only_clients_are_isolated() {
        // client 0's trajectory must not depend on what client 1 holds
        let mut pair: Vec<ClientState> = vec![test_client(0, 60, &[8, 5]), test_client(1, 61, &[6, 4])];
        let mut solo: Vec<ClientState> = vec![test_client(0, 60, &[8, 5])];
        let cfg = quick_cfg();
        for round in 0..2 {
            baseline_local_only_round(&mut pair, &cfg, round).unwrap();
            baseline_local_only_round(&mut solo, &cfg, round).unwrap();
        }
        assert!(pair[0].local_body.bit_eq(&solo[0].local_body));
        assert!(pair[0].local_head.bit_eq(&solo[0].local_head));
    }

    #[test]
    fn fedavg_rejects_heterogeneous_clients() {
        let mut clients = vec![test_client(0, 70, &[8, 5]), test_client(1, 71, &[6, 4])];
        let err = fedavg_round(&mut clients, &quick_cfg(), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn fedavg_round_equalizes_local_models() {
        let mut clients = vec![test_client(0, 72, &[8, 5]), test_client(1, 73, &[8, 5])];
        fedavg_round(&mut clients, &quick_cfg(), 0).unwrap();
        assert!(clients[0].local_body.bit_eq(&clients[1].local_body));
        assert!(clients[0].local_head.bit_eq(&clients[1].local_head));
    }

    #[test]
    fn single_client_round_reduces_to_two_stage_training() {
        let mut clients = vec![test_client(0, 80, &[8, 5])];
        let mut alone = clients.clone();
        let cfg = quick_cfg();
        let mut server = GlobalBypass {
            body: clients[0].bypass.body.clone(),
            head: clients[0].bypass.head.clone(),
        };
        run_round(&mut server, &mut clients, &cfg, 0).unwrap();

        local_stage_train(&mut alone[0], &cfg, 0).unwrap();
        global_stage_train(&mut alone[0], &cfg, 0).unwrap();
        assert!(clients[0].local_body.bit_eq(&alone[0].local_body));
        // K=1 aggregation is the identity up to float summation with weight 1.0
        for (name, p) in server.body.iter() {
            let orig = &alone[0].bypass.body.get(name).unwrap().value;
            for (a, b) in p.value.data().iter().zip(orig.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rounds_are_deterministic() {
        let run = || {
            let mut clients: Vec<ClientState> =
                (0..2).map(|i| test_client(i, 90 + i as u64, &[8, 5])).collect();
            let mut server = GlobalBypass {
                body: clients[0].bypass.body.clone(),
                head: clients[0].bypass.head.clone(),
            };
            broadcast_bypass(&server.clone(), &mut clients);
            let mut reports = Vec::new();
            for round in 0..2 {
                reports.push(run_round(&mut server, &mut clients, &quick_cfg(), round).unwrap());
            }
            (reports, clients[0].flat_params())
        };
        let (ra, pa) = run();
        let (rb, pb) = run();
        assert_eq!(ra, rb);
        assert!(pa.bit_eq(&pb));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let make = || -> Vec<ClientState> {
            (0..3).map(|i| test_client(i, 100 + i as u64, &[8, 5])).collect()
        };
        let mut one = make();
        let mut many = make();
        let cfg1 = quick_cfg();
        let cfg4 = TrainConfig { threads: 4, ..quick_cfg() };
        let mut server1 = GlobalBypass { body: one[0].bypass.body.clone(), head: one[0].bypass.head.clone() };
        let mut server4 = server1.clone();
        broadcast_bypass(&server1.clone(), &mut one);
        broadcast_bypass(&server4.clone(), &mut many);
        let ra = run_round(&mut server1, &mut one, &cfg1, 0).unwrap();
        let rb = run_round(&mut server4, &mut many, &cfg4, 0).unwrap();
        assert_eq!(ra, rb);
        assert!(server1.bit_eq(&server4));
    }

    #[test]
    fn param_counts_match_hand_formula() {
        let clients = vec![test_client(0, 110, &[8, 5]), test_client(1, 111, &[6, 4])];
        let report = param_count_report(&clients, &AblationFlags::default());
        // client0: (6*8+8) + (8*5+5) + head (5*3+3) = 56+45+18 = 119
        assert_eq!(report.rows[0].params, 119);
        // client1: (6*6+6) + (6*4+4) + (4*3+3) = 42+28+15 = 85
        assert_eq!(report.rows[1].params, 85);
        // bypass: body (6*4+4) + head (4*3+3) = 28 + 15 = 43
        assert_eq!(report.bypass_params, 43);
        assert_eq!(report.min_local_params, 85);
        assert!(report.bypass_is_lighter());

        let ablated = param_count_report(&clients, &AblationFlags { no_global_body: true, ..Default::default() });
        assert_eq!(ablated.bypass_params, 15);
    }

    #[test]
    fn loss_weight_defaults_match_cited_values() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_l_loc, w.lambda_g_loc), (0.9, 0.1));
        assert_eq!((w.lambda_g_glob, w.lambda_l_glob), (0.9, 0.1));
    }

    #[test]
    fn zero_global_weight_matches_dropped_term_gradients() {
        let client = test_client(0, 120, &[8, 5]);
        let mut c = client.clone();
        c.local_body.set_trainable(true);
        c.local_head.set_trainable(true);
        c.proj.set_trainable(true);
        c.bypass.set_trainable(false);
        let (x, labels) = gather_batch(&c.shard, &c.shard.train_idx).unwrap();

        let grads_for = |weights: &LossWeights, with_global: bool| {
            let mut g = Graph::new();
            let mut binds = Bindings::new();
            let nodes =
                client_forward_graph(&mut g, &c, &x, &AblationFlags::default(), with_global, &mut binds)
                    .unwrap();
            let loss = if with_global {
                stage_loss(&mut g, &nodes, &labels, weights, Stage::Local).unwrap()
            } else {
                let ce = g.cross_entropy(nodes.y_l, &labels).unwrap();
                g.scale(ce, weights.lambda_l_loc).unwrap()
            };
            crate::nn::collect_grads(&g, loss, &binds).unwrap()
        };
        let zeroed = LossWeights { lambda_g_loc: 0.0, ..LossWeights::default() };
        let with = grads_for(&zeroed, true);
        let without = grads_for(&zeroed, false);
        for (name, grad) in &without {
            let other = &with[name];
            for (a, b) in grad.data().iter().zip(other.data()) {
                assert!((a - b).abs() < 1e-15, "{name}");
            }
        }
    }
}
