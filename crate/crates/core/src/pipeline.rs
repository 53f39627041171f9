//! End-to-end training: centralized (CL), FedAve and FedGS, plus evaluation sweeps.
//!
//! CL order: IDetNet and OAMPNet train concurrently, then both label the
//! route dataset, which is balanced, normalized and used to train RouteNet.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::channel::{
    generate_client_dataset, generate_sample, pool, ChannelError, ClientProfile, Dataset, Sample, SystemConfig,
};
use crate::config::{ExperimentConfig, TrainingMode};
use crate::ddnet::{self, DdNetError, DdNetModel, NormStats, RouteBatch, RouteNetParams, RouteSample};
use crate::detectors::{
    ber_evaluate, bit_errors, quantize, BerReport, ConditionAxis, ConditionPoint, DetectorError, DetectorHandle,
};
use crate::federated::{self, EpochRecord, FedError, FedRun, OverheadLedger};
use crate::idetnet::{self, IDetNetConfig, IDetNetError, IDetNetParams, IdBatch};
use crate::numerics::{AdamState, ParamSet, Plateau, Rng, Tensor};
use crate::oampnet::{self, OampNetConfig, OampNetError, OampNetParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0} training diverged: {1}")]
    Diverged(&'static str, String),
    #[error("empty training set for {0}")]
    Empty(&'static str),
    #[error(transparent)]
    IDetNet(#[from] IDetNetError),
    #[error(transparent)]
    OampNet(#[from] OampNetError),
    #[error(transparent)]
    DdNet(#[from] DdNetError),
    #[error(transparent)]
    Federated(#[from] FedError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Sink for JSON training-log records.
pub type Log<'a> = &'a mut (dyn FnMut(Value) + Send);

pub fn no_log() -> impl FnMut(Value) + Send {
    |_| {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub patience: u32,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

type Grad = Result<(f64, Vec<Tensor>), PipelineError>;
type ValFn<'a, P> = &'a (dyn Fn(&P) -> Result<f64, PipelineError> + Sync);

/// Minibatch ADAM over shuffled indices `0..n`. With a validation closure,
/// the plateau rule watches validation loss and the best-validation
/// parameters are returned; otherwise it watches the epoch's mean train loss.
pub fn adam_train<P, G>(
    mut params: P,
    n: usize,
    opts: &TrainOptions,
    rng: &mut Rng,
    grad: G,
    val: Option<ValFn<'_, P>>,
    on_epoch: &mut dyn FnMut(&EpochStat),
) -> Result<(P, Vec<EpochStat>), PipelineError>
where
    P: ParamSet + Clone,
    G: Fn(&P, &[usize]) -> Grad,
{
    assert!(opts.batch >= 1, "batch size must be positive");
    let mut adam = AdamState::new(&params, opts.lr);
    let mut plateau = Plateau::new(opts.patience, opts.factor);
    let mut history = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, P)> = None;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..opts.epochs {
        rng.shuffle(&mut order);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(opts.batch) {
            let (loss, g) = grad(&params, chunk)?;
            if !loss.is_finite() {
                return Err(PipelineError::Diverged("minibatch", format!("loss {loss} at epoch {}", epoch + 1)));
            }
            adam.step(&mut params, &g);
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let train_loss = sum / count.max(1) as f64;
        let val_loss = match val {
            Some(f) => Some(f(&params)?),
            None => None,
        };
        let watched = val_loss.unwrap_or(train_loss);
        if val_loss.is_some() && best.as_ref().is_none_or(|(b, _)| watched < *b) {
            best = Some((watched, params.clone()));
        }
        plateau.observe(watched, &mut adam);
        let stat = EpochStat { epoch: epoch + 1, train_loss, val_loss, lr: adam.lr };
        on_epoch(&stat);
        history.push(stat);
    }
    Ok((best.map_or(params, |b| b.1), history))
}

fn pick(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

pub fn train_idetnet(
    init: IDetNetParams,
    config: &IDetNetConfig,
    train: &[Sample],
    val: &[Sample],
    opts: &TrainOptions,
    rng: &mut Rng,
    on_epoch: &mut dyn FnMut(&EpochStat),
) -> Result<(IDetNetParams, Vec<EpochStat>), PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::Empty("IDetNet"));
    }
    let val_batch = (!val.is_empty()).then(|| IdBatch::from_samples(val));
    let val_fn = |p: &IDetNetParams| -> Result<f64, PipelineError> {
        let b = val_batch.as_ref().expect("validation batch");
        Ok(idetnet::idetnet_loss(&idetnet::forward_batch(p, config, b)?, &b.x))
    };
    let grad = |p: &IDetNetParams, idx: &[usize]| -> Grad {
        Ok(idetnet::loss_and_grad(p, config, &IdBatch::from_samples(&pick(train, idx)))?)
    };
    let val_ref: Option<ValFn<'_, IDetNetParams>> =
        if val_batch.is_some() { Some(&val_fn) } else { None };
    adam_train(init, train.len(), opts, rng, grad, val_ref, on_epoch)
}

pub fn train_oampnet(
    init: OampNetParams,
    config: &OampNetConfig,
    train: &[Sample],
    opts: &TrainOptions,
    rng: &mut Rng,
    on_epoch: &mut dyn FnMut(&EpochStat),
) -> Result<(OampNetParams, Vec<EpochStat>), PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::Empty("OAMPNet"));
    }
    let grad =
        |p: &OampNetParams, idx: &[usize]| -> Grad { Ok(oampnet::loss_and_grad(p, config, &pick(train, idx))?) };
    adam_train(init, train.len(), opts, rng, grad, None, on_epoch)
}

#[allow(clippy::too_many_arguments)]
pub fn train_routenet(
    init: RouteNetParams,
    train: &[RouteSample],
    val: &[RouteSample],
    stats: &NormStats,
    xi: f64,
    opts: &TrainOptions,
    rng: &mut Rng,
    on_epoch: &mut dyn FnMut(&EpochStat),
) -> Result<(RouteNetParams, Vec<EpochStat>), PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::Empty("RouteNet"));
    }
    let val_batch = (!val.is_empty()).then(|| RouteBatch::new(val, stats));
    let val_fn = |p: &RouteNetParams| -> Result<f64, PipelineError> {
        Ok(ddnet::loss_and_grad(p, val_batch.as_ref().expect("validation batch"), xi)?.0)
    };
    let grad = |p: &RouteNetParams, idx: &[usize]| -> Grad {
        let set: Vec<RouteSample> = idx.iter().map(|&i| train[i].clone()).collect();
        Ok(ddnet::loss_and_grad(p, &RouteBatch::new(&set, stats), xi)?)
    };
    let val_ref: Option<ValFn<'_, RouteNetParams>> =
        if val_batch.is_some() { Some(&val_fn) } else { None };
    adam_train(init, train.len(), opts, rng, grad, val_ref, on_epoch)
}

/// Bit error rate of IDetNet's final layer on `samples`.
pub fn idetnet_ber(params: &IDetNetParams, config: &IDetNetConfig, samples: &[Sample]) -> Result<f64, PipelineError> {
    let est = idetnet::detect_batch(params, config, samples)?;
    let errors: usize = est.iter().zip(samples).map(|(e, s)| bit_errors(&quantize(e), &s.x)).sum();
    Ok(errors as f64 / samples.iter().map(|s| s.x.len()).sum::<usize>() as f64)
}

/// Bit error rate of OAMPNet's final layer on `samples`.
pub fn oampnet_ber(params: &OampNetParams, config: &OampNetConfig, samples: &[Sample]) -> Result<f64, PipelineError> {
    let errors: usize = samples
        .par_iter()
        .map(|s| {
            let e = oampnet::oampnet_forward(&s.h, &s.y, s.sigma2, params, config)?;
            Ok(bit_errors(&quantize(e.last().expect("k_oa >= 1")), &s.x))
        })
        .collect::<Result<Vec<usize>, PipelineError>>()?
        .iter()
        .sum();
    Ok(errors as f64 / samples.iter().map(|s| s.x.len()).sum::<usize>() as f64)
}

/// Products of a centralized run.
#[derive(Debug, Clone)]
pub struct ClOutcome {
    pub model: DdNetModel,
    /// Route-label class counts before balancing.
    pub route_counts: [usize; 2],
    pub route_train: Vec<RouteSample>,
    pub route_holdout: Vec<RouteSample>,
    pub idetnet_history: Vec<EpochStat>,
    pub oampnet_history: Vec<EpochStat>,
    pub routenet_history: Vec<EpochStat>,
}

/// Server-side validation set used to pick the reported federated parameters.
pub const FED_VALIDATION_SAMPLES: usize = 2000;

const STREAM_SPLIT: u64 = 1;
const STREAM_ID_INIT: u64 = 2;
const STREAM_ID_TRAIN: u64 = 3;
const STREAM_OA_TRAIN: u64 = 4;
const STREAM_BALANCE: u64 = 5;
const STREAM_RO_INIT: u64 = 6;
const STREAM_RO_TRAIN: u64 = 7;
const STREAM_FED: u64 = 8;
const STREAM_FED_VAL: u64 = 9;
const STREAM_DATA: u64 = 10;

fn id_opts(cfg: &ExperimentConfig) -> TrainOptions {
    let t = &cfg.train;
    TrainOptions { epochs: t.id_epochs, batch: t.id_batch, lr: t.lr, patience: t.plateau_patience, factor: t.plateau_factor }
}

fn oa_opts(cfg: &ExperimentConfig) -> TrainOptions {
    let t = &cfg.train;
    TrainOptions { epochs: t.oa_epochs, batch: t.oa_batch, lr: t.lr, patience: t.plateau_patience, factor: t.plateau_factor }
}

fn ro_opts(cfg: &ExperimentConfig) -> TrainOptions {
    let t = &cfg.train;
    TrainOptions { epochs: t.ro_epochs, batch: t.ro_batch, lr: t.lr, patience: t.plateau_patience, factor: t.plateau_factor }
}

fn stat_record(phase: &str, s: &EpochStat) -> Value {
    json!({ "phase": phase, "epoch": s.epoch, "train_loss": s.train_loss, "val_loss": s.val_loss, "lr": s.lr })
}

/// Splits off the last `fraction` of `samples` (at least one when possible).
pub fn holdout_split<T: Clone>(samples: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let n = samples.len();
    let hold = if fraction <= 0.0 || n < 2 {
        0
    } else {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    };
    let (a, b) = samples.split_at(n - hold);
    (a.to_vec(), b.to_vec())
}

/// Centralized pipeline on a pooled dataset.
pub fn run_cl(cfg: &ExperimentConfig, data: &[Sample], log: Log<'_>) -> Result<ClOutcome, PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::Empty("centralized pipeline"));
    }
    let root = Rng::new(cfg.seed);
    let mut shuffled = data.to_vec();
    root.derive(&[STREAM_SPLIT]).shuffle(&mut shuffled);
    let (train, val) = holdout_split(&shuffled, cfg.data.validation_fraction);
    let id_cfg = cfg.idetnet();
    let oa_cfg = cfg.oampnet();

    let id_init = idetnet::init_idetnet(&id_cfg, &mut root.derive(&[STREAM_ID_INIT]));
    let oa_init = oampnet::init_oampnet(&oa_cfg);
    let oa_train: Vec<Sample> = train.iter().take(cfg.train.oa_samples).cloned().collect();
    let mut id_log = Vec::new();
    let mut oa_log = Vec::new();
    let (id_res, oa_res) = rayon::join(
        || {
            train_idetnet(id_init, &id_cfg, &train, &val, &id_opts(cfg), &mut root.derive(&[STREAM_ID_TRAIN]), &mut |s| {
                id_log.push(stat_record("idetnet", s))
            })
        },
        || {
            train_oampnet(oa_init, &oa_cfg, &oa_train, &oa_opts(cfg), &mut root.derive(&[STREAM_OA_TRAIN]), &mut |s| {
                oa_log.push(stat_record("oampnet", s))
            })
        },
    );
    id_log.into_iter().chain(oa_log).for_each(&mut *log);
    let (id_params, id_hist) = id_res?;
    let (oa_params, oa_hist) = oa_res?;

    let labelled = ddnet::build_route_dataset(&shuffled, (&id_params, &id_cfg), (&oa_params, &oa_cfg))?;
    let route_counts = ddnet::class_counts(&labelled);
    let mut balanced = ddnet::balance_route_dataset(labelled, &mut root.derive(&[STREAM_BALANCE]))?;
    root.derive(&[STREAM_BALANCE, 1]).shuffle(&mut balanced);
    let (route_train, route_holdout) = holdout_split(&balanced, cfg.data.validation_fraction);
    log(json!({ "phase": "route_dataset", "counts_before_balance": route_counts, "balanced": balanced.len() }));
    let stats = NormStats::fit(route_train.iter().map(|r| &r.features), "cl-route-train")?;
    let ro_init = ddnet::init_routenet(cfg.system.n_t, &mut root.derive(&[STREAM_RO_INIT]));
    let (ro_params, ro_hist) = train_routenet(
        ro_init,
        &route_train,
        &route_holdout,
        &stats,
        cfg.xi,
        &ro_opts(cfg),
        &mut root.derive(&[STREAM_RO_TRAIN]),
        &mut |s| log(stat_record("routenet", s)),
    )?;
    let model = DdNetModel {
        idetnet_config: id_cfg,
        idetnet: id_params,
        oampnet_config: oa_cfg,
        oampnet: oa_params,
        routenet: ro_params,
        stats,
    };
    Ok(ClOutcome {
        model,
        route_counts,
        route_train,
        route_holdout,
        idetnet_history: id_hist,
        oampnet_history: oa_hist,
        routenet_history: ro_hist,
    })
}

/// Products of a federated run.
#[derive(Debug, Clone)]
pub struct FedOutcome {
    pub model: DdNetModel,
    pub ledger: OverheadLedger,
    pub records: Vec<EpochRecord>,
}

fn fed_run(cfg: &ExperimentConfig, phase: &str, m: usize, epochs: usize) -> FedRun {
    FedRun {
        phase: phase.to_string(),
        clients_per_epoch: m,
        epochs,
        local_steps: cfg.fed.local_steps,
        lr: cfg.train.lr,
        bits: cfg.fed.bits,
        optimizer: cfg.fed.local_optimizer,
        delta: if cfg.mode == TrainingMode::Fedgs { cfg.fed.delta } else { 1.0 },
    }
}

/// Client datasets drawn from random per-client profiles, plus their shuffled pool.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<(Vec<Dataset>, Dataset), PipelineError> {
    let root = Rng::new(cfg.seed);
    let mut rng = root.derive(&[STREAM_DATA]);
    let clients = (0..cfg.data.clients)
        .map(|c| {
            let profile = ClientProfile::draw(&cfg.system, c, &mut rng);
            Ok(generate_client_dataset(cfg.system.n_t, &profile, cfg.data.samples_per_client, &mut rng)?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let pooled = pool(&clients, &mut root.derive(&[STREAM_DATA, 1]));
    Ok((clients, pooled))
}

/// Samples drawn over the full operating ranges.
pub fn global_samples(system: &SystemConfig, count: usize, rng: &mut Rng) -> Result<Vec<Sample>, PipelineError> {
    let profile = ClientProfile::global(system);
    Ok(crate::channel::generate_client_dataset(system.n_t, &profile, count.max(1), rng)?.samples)
}

/// Federated IDetNet training only (FedAve or FedGS per `cfg.mode`).
pub fn federated_idetnet(
    cfg: &ExperimentConfig,
    clients: &[Dataset],
    validation: &[Sample],
    ledger: &mut OverheadLedger,
    log: Log<'_>,
) -> Result<(IDetNetParams, Vec<EpochRecord>), PipelineError> {
    let id_cfg = cfg.idetnet();
    let root = Rng::new(cfg.seed);
    let init = idetnet::init_idetnet(&id_cfg, &mut root.derive(&[STREAM_ID_INIT]));
    let batches: Vec<IdBatch> = clients.iter().map(|d| IdBatch::from_samples(&d.samples)).collect();
    let sizes: Vec<usize> = clients.iter().map(Dataset::len).collect();
    let grad = |c: usize, p: &IDetNetParams| {
        idetnet::loss_and_grad(p, &id_cfg, &batches[c]).map_err(|e| FedError::client(c, e))
    };
    let mut records = Vec::new();
    let mut best: Option<(f64, IDetNetParams)> = None;
    let on_epoch = |r: &EpochRecord, p: &IDetNetParams| -> Result<(), FedError> {
        let ber = if validation.is_empty() {
            None
        } else {
            Some(idetnet_ber(p, &id_cfg, validation).map_err(|e| FedError::client(usize::MAX, e))?)
        };
        if let Some(b) = ber {
            if best.as_ref().is_none_or(|(v, _)| b < *v) {
                best = Some((b, p.clone()));
            }
        }
        log(json!({ "record": r, "validation_ber": ber }));
        records.push(r.clone());
        Ok(())
    };
    let run = fed_run(cfg, "idetnet", cfg.fed.m_id, cfg.fed.t_id);
    let mut rng = root.derive(&[STREAM_FED, 1]);
    let params = match cfg.mode {
        TrainingMode::Fedgs => federated::fedgs_train(init, &sizes, &run, &mut rng, ledger, grad, on_epoch)?,
        _ => federated::fedave_train(init, &sizes, &run, &mut rng, ledger, grad, on_epoch)?,
    };
    Ok((best.map_or(params, |(_, p)| p), records))
}

/// Full federated DDNet pipeline (FedAve or FedGS per `cfg.mode`).
pub fn run_federated(cfg: &ExperimentConfig, clients: &[Dataset], log: Log<'_>) -> Result<FedOutcome, PipelineError> {
    if clients.is_empty() || clients.iter().any(Dataset::is_empty) {
        return Err(PipelineError::Empty("federated clients"));
    }
    let root = Rng::new(cfg.seed);
    let id_cfg = cfg.idetnet();
    let oa_cfg = cfg.oampnet();
    let validation = global_samples(&cfg.system, FED_VALIDATION_SAMPLES, &mut root.derive(&[STREAM_FED_VAL]))?;
    let mut ledger = OverheadLedger::default();

    // OAMPNet: trained on each client, then averaged once.
    let oa_locals: Vec<OampNetParams> = clients
        .par_iter()
        .enumerate()
        .map(|(c, d)| {
            let local: Vec<Sample> = d.samples.iter().take(cfg.train.oa_samples).cloned().collect();
            let mut rng = root.derive(&[STREAM_OA_TRAIN, c as u64]);
            Ok(train_oampnet(oampnet::init_oampnet(&oa_cfg), &oa_cfg, &local, &oa_opts(cfg), &mut rng, &mut |_| {})?.0)
        })
        .collect::<Result<_, PipelineError>>()?;
    let oa_params = federated::average(&oa_locals)?;
    let q_oa = oa_params.param_len() as u64;
    let n = clients.len() as u64;
    ledger.record("oampnet", cfg.fed.bits * q_oa * n, cfg.fed.bits * q_oa * n, 0);

    let (id_params, mut records) = federated_idetnet(cfg, clients, &validation, &mut ledger, &mut *log)?;

    // Route datasets, balanced per client whenever both labels occur.
    let route_sets: Vec<Vec<RouteSample>> = clients
        .iter()
        .enumerate()
        .map(|(c, d)| {
            let set = ddnet::build_route_dataset(&d.samples, (&id_params, &id_cfg), (&oa_params, &oa_cfg))?;
            let counts = ddnet::class_counts(&set);
            if counts[0] > 0 && counts[1] > 0 {
                Ok(ddnet::balance_route_dataset(set, &mut root.derive(&[STREAM_BALANCE, c as u64]))?)
            } else {
                Ok(set)
            }
        })
        .collect::<Result<_, PipelineError>>()?;
    let stats = NormStats::fit(route_sets.iter().flatten().map(|r| &r.features), "federated-route")?;
    let stat_floats = 2 * (4 * cfg.system.n_t * cfg.system.n_t + 2) as u64;
    ledger.record("norm_stats", cfg.fed.bits * stat_floats * n, cfg.fed.bits * stat_floats * n, 0);
    log(json!({ "phase": "route_dataset", "sizes": route_sets.iter().map(Vec::len).collect::<Vec<_>>() }));

    let ro_batches: Vec<RouteBatch> = route_sets.iter().map(|s| RouteBatch::new(s, &stats)).collect();
    let ro_sizes: Vec<usize> = route_sets.iter().map(Vec::len).collect();
    let ro_init = ddnet::init_routenet(cfg.system.n_t, &mut root.derive(&[STREAM_RO_INIT]));
    let xi = cfg.xi;
    let grad = |c: usize, p: &RouteNetParams| ddnet::loss_and_grad(p, &ro_batches[c], xi).map_err(|e| FedError::client(c, e));
    let mut partial = DdNetModel {
        idetnet_config: id_cfg,
        idetnet: id_params,
        oampnet_config: oa_cfg,
        oampnet: oa_params,
        routenet: ro_init.clone(),
        stats,
    };
    let mut best: Option<(f64, RouteNetParams)> = None;
    let on_epoch = |r: &EpochRecord, p: &RouteNetParams| -> Result<(), FedError> {
        partial.routenet = p.clone();
        let ber = ddnet_ber(&partial, &validation).map_err(|e| FedError::client(usize::MAX, e))?;
        if best.as_ref().is_none_or(|(v, _)| ber < *v) {
            best = Some((ber, p.clone()));
        }
        log(json!({ "record": r, "validation_ber": ber }));
        records.push(r.clone());
        Ok(())
    };
    let run = fed_run(cfg, "routenet", cfg.fed.m_ro, cfg.fed.t_ro);
    let mut rng = root.derive(&[STREAM_FED, 2]);
    let ro_params = match cfg.mode {
        TrainingMode::Fedgs => federated::fedgs_train(ro_init, &ro_sizes, &run, &mut rng, &mut ledger, grad, on_epoch)?,
        _ => federated::fedave_train(ro_init, &ro_sizes, &run, &mut rng, &mut ledger, grad, on_epoch)?,
    };
    partial.routenet = best.map_or(ro_params, |(_, p)| p);
    Ok(FedOutcome { model: partial, ledger, records })
}

/// DDNet bit error rate on `samples`.
pub fn ddnet_ber(model: &DdNetModel, samples: &[Sample]) -> Result<f64, PipelineError> {
    let errors: usize = samples
        .par_iter()
        .map(|s| Ok(bit_errors(&ddnet::ddnet_detect(s, model, None)?.estimate, &s.x)))
        .collect::<Result<Vec<usize>, PipelineError>>()?
        .iter()
        .sum();
    Ok(errors as f64 / samples.iter().map(|s| s.x.len()).sum::<usize>() as f64)
}

/// Test points along `axis`; conditions not being swept are drawn from the global ranges.
pub fn sweep_points(cfg: &ExperimentConfig, axis: ConditionAxis, seed: u64) -> Result<Vec<ConditionPoint>, PipelineError> {
    let sys = &cfg.system;
    let e = &cfg.eval;
    let values: Vec<f64> = match axis {
        ConditionAxis::SnrDb => e.snr_points.clone(),
        ConditionAxis::NR => e.n_r_points.iter().map(|&v| v as f64).collect(),
        ConditionAxis::Rho => e.rho_points.clone(),
        ConditionAxis::Mixed => vec![0.0],
    };
    let root = Rng::new(seed);
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut rng = root.derive(&[axis as u64, i as u64]);
            let samples = (0..e.samples_per_point)
                .map(|_| {
                    let n_r = rng.uniform_int(sys.n_r_range.0, sys.n_r_range.1);
                    let rho = rng.uniform(sys.rho_range.0, sys.rho_range.1);
                    let snr = rng.uniform(sys.snr_db_range.0, sys.snr_db_range.1);
                    match axis {
                        ConditionAxis::SnrDb => generate_sample(sys.n_t, n_r, rho, v, &mut rng),
                        ConditionAxis::NR => generate_sample(sys.n_t, v as usize, rho, e.fixed_snr_db, &mut rng),
                        ConditionAxis::Rho => generate_sample(sys.n_t, n_r, v, e.fixed_snr_db, &mut rng),
                        ConditionAxis::Mixed => generate_sample(sys.n_t, n_r, rho, snr, &mut rng),
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ConditionPoint { value: v, samples })
        })
        .collect()
}

/// LMMSE, IDetNet, OAMPNet, DDNet (and ML when enabled and `N_t ≤ 8`) over `points`.
pub fn evaluate_model(
    model: &DdNetModel,
    include_ml: bool,
    axis: ConditionAxis,
    points: &[ConditionPoint],
    seed: u64,
) -> Result<Vec<BerReport>, PipelineError> {
    let mut detectors = vec![
        DetectorHandle::lmmse(),
        idetnet::detector("IDetNet", model.idetnet.clone(), model.idetnet_config),
        oampnet::detector("OAMPNet", model.oampnet.clone(), model.oampnet_config),
        ddnet::detector("DDNet", model.clone()),
    ];
    if include_ml && model.idetnet_config.n_t <= crate::detectors::ML_MAX_NT {
        detectors.push(DetectorHandle::ml());
    }
    detectors
        .iter()
        .map(|d| Ok(ber_evaluate(d, axis, points, seed)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_split_sizes() {
        let v: Vec<u32> = (0..10).collect();
        assert_eq!(holdout_split(&v, 0.1).1, vec![9]);
        assert_eq!(holdout_split(&v, 0.0).1.len(), 0);
        assert_eq!(holdout_split(&v[..1], 0.5).0.len(), 1);
    }

    #[test]
    fn adam_train_zero_gradient_is_noop() {
        let p = vec![Tensor::scalar(2.0)];
        let opts = TrainOptions { epochs: 3, batch: 2, lr: 0.1, patience: 20, factor: 0.9 };
        let (out, hist) = adam_train(
            p.clone(),
            5,
            &opts,
            &mut Rng::new(0),
            |_, _| Ok((1.0, vec![Tensor::scalar(0.0)])),
            None,
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(out, p);
        assert_eq!(hist.len(), 3);
    }

    #[test]
    fn adam_train_minimizes_quadratic() {
        let opts = TrainOptions { epochs: 400, batch: 1, lr: 0.05, patience: 20, factor: 0.9 };
        let (out, _) = adam_train(
            vec![Tensor::scalar(3.0)],
            1,
            &opts,
            &mut Rng::new(0),
            |p, _| {
                let x = p[0].item();
                Ok(((x - 1.0).powi(2), vec![Tensor::scalar(2.0 * (x - 1.0))]))
            },
            None,
            &mut |_| {},
        )
        .unwrap();
        assert!((out[0].item() - 1.0).abs() < 1e-2);
    }
}
