//! Walk-forward calibration: 5-year blocks, the early-stopped epoch loop,
//! the two-stage base-then-context training, and seeded uniform random
//! search over the per-model hyperparameter grids.
//!
//! Batching is listwise: every rebalance date is one list and one gradient
//! step. The validation split is chronological (latest 10% of train-window
//! dates), never shuffled. A block's parameters are functions of its train
//! window only.

use chrono::{Datelike, NaiveDate};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextModel, ContextSublist, EncoderParams};
use crate::features::{FeatureRow, ZScore, FEATURE_DIM};
use crate::numkernel::{KernelError, Parameterized, Tape};
use crate::rankers::{
    score_base, stage_snapshot, BaseModel, LossKind, ModelError, NetworkParams, ScorerKind,
    ScorerSpec,
};
use crate::rng::StreamKey;
use crate::strategy::SUBLIST_LEN;

/// Years per walk-forward train window and per test window.
pub const BLOCK_YEARS: i32 = 5;

/// Minimum calendar span for a usable plan.
pub const MIN_SPAN_YEARS: i32 = 2 * BLOCK_YEARS;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Context(#[from] crate::context::ContextError),
}

/// One rolling block: train on five calendar years, trade the next five
/// (the final test window may be shorter).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkForwardBlock {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkForwardPlan {
    pub blocks: Vec<WalkForwardBlock>,
}

/// Calendar-aligned rolling plan from the first date's year. Test windows
/// are disjoint and consecutive; each train window is the five years
/// immediately preceding its test window.
pub fn make_walk_forward_plan(dates: &[NaiveDate]) -> Result<WalkForwardPlan, TrainError> {
    let (Some(&first), Some(&last)) = (dates.first(), dates.last()) else {
        return Err(TrainError::Config("no dates".into()));
    };
    let span_years = last.year() - first.year() + 1;
    if span_years < MIN_SPAN_YEARS {
        return Err(TrainError::Config(format!(
            "span of {span_years} calendar years is below the {MIN_SPAN_YEARS}-year minimum"
        )));
    }
    let year_start = |y: i32| NaiveDate::from_ymd_opt(y, 1, 1).expect("valid year");
    let year_end = |y: i32| NaiveDate::from_ymd_opt(y, 12, 31).expect("valid year");
    let mut blocks = Vec::new();
    let mut train_y0 = first.year();
    loop {
        let test_y0 = train_y0 + BLOCK_YEARS;
        if year_start(test_y0) > last {
            break;
        }
        blocks.push(WalkForwardBlock {
            train_start: year_start(train_y0).max(first),
            train_end: year_end(train_y0 + BLOCK_YEARS - 1),
            test_start: year_start(test_y0),
            test_end: year_end(test_y0 + BLOCK_YEARS - 1).min(last),
        });
        train_y0 = test_y0;
    }
    Ok(WalkForwardPlan { blocks })
}

/// Epoch-loop settings. Defaults follow the calibration protocol:
/// at most 100 epochs, patience 25, chronological 90/10 split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            patience: 25,
            train_fraction: 0.90,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.patience >= self.max_epochs {
            return Err(TrainError::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(TrainError::Config(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Per-epoch record of one training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EpochTrace {
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Run up to `max_epochs` of `epoch_fn` (which trains one epoch and
/// returns the validation loss plus a parameter snapshot), stopping once
/// the validation loss has not strictly improved for `patience`
/// consecutive epochs. Returns the snapshot from the best epoch.
pub fn run_early_stopped<S, E>(
    max_epochs: usize,
    patience: usize,
    mut epoch_fn: impl FnMut(usize) -> Result<(f64, S), E>,
) -> Result<(S, EpochTrace), E> {
    let mut best: Option<(f64, S)> = None;
    let mut trace = EpochTrace::default();
    let mut stale = 0;
    for epoch in 0..max_epochs {
        let (val_loss, snapshot) = epoch_fn(epoch)?;
        trace.val_loss.push(val_loss);
        trace.epochs_run = epoch + 1;
        let improved = best.as_ref().map_or(true, |(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, snapshot));
            trace.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                break;
            }
        }
    }
    let (_, snapshot) = best.expect("max_epochs >= 1");
    Ok((snapshot, trace))
}

/// A trained base ranker with the statistics it expects at inference.
#[derive(Debug, Clone)]
pub struct TrainedBase {
    pub spec: ScorerSpec,
    pub base: BaseModel,
    pub zscore: ZScore,
    pub trace: EpochTrace,
    pub final_val_loss: f64,
}

type DateList<'a> = (NaiveDate, &'a [FeatureRow]);

fn split_chronological<'a>(
    lists: &'a [DateList<'a>],
    train_fraction: f64,
) -> (&'a [DateList<'a>], &'a [DateList<'a>]) {
    let n = lists.len();
    let n_train = ((n as f64) * train_fraction).floor() as usize;
    let n_train = n_train.clamp(1, n - 1);
    (&lists[..n_train], &lists[n_train..])
}

fn list_labels(rows: &[FeatureRow], loss: LossKind) -> Vec<f64> {
    match loss {
        LossKind::Mse => rows.iter().map(|r| r.next_vol_scaled_return).collect(),
        _ => rows.iter().map(|r| f64::from(r.label)).collect(),
    }
}

/// Train one neural base model on a train window with early stopping.
/// Z-score statistics come from the 90% train split and are applied
/// unchanged to validation (and later to test).
pub fn train_model(
    spec: &ScorerSpec,
    lists: &[DateList],
    config: &TrainConfig,
) -> Result<TrainedBase, TrainError> {
    config.validate()?;
    if !spec.kind.is_neural() {
        return Err(TrainError::Config(format!(
            "{} is not a trainable kind",
            spec.kind.shorthand()
        )));
    }
    if lists.len() < 2 {
        return Err(TrainError::Data(format!(
            "need at least 2 rebalance dates to train, have {}",
            lists.len()
        )));
    }
    let loss_kind = LossKind::for_base(spec.kind).expect("neural kind has a loss");
    let (train, val) = split_chronological(lists, config.train_fraction);
    let train_rows: Vec<FeatureRow> = train
        .iter()
        .flat_map(|(_, rows)| rows.iter().cloned())
        .collect();
    if train_rows.is_empty() {
        return Err(TrainError::Data("empty training split".into()));
    }
    let zscore = ZScore::fit(&train_rows);

    let init_key = StreamKey::root(spec.seed)
        .child("base-init")
        .child(spec.kind.shorthand());
    let mut params = NetworkParams::init(
        FEATURE_DIM,
        spec.hidden_width,
        spec.kind.activation(),
        init_key,
    );
    let dropout_key = StreamKey::root(spec.seed)
        .child("base-dropout")
        .child(spec.kind.shorthand());

    let epoch_fn = |epoch: usize| -> Result<(f64, (NetworkParams, f64)), TrainError> {
        let mut epoch_rng = dropout_key.child_idx(epoch as u64).rng();
        for (_, rows) in train {
            let labels = list_labels(rows, loss_kind);
            let mut tape = Tape::new();
            let x = stage_snapshot(&mut tape, &zscore, rows);
            let staged = params.stage(&mut tape);
            let scores = staged.forward(
                &mut tape,
                x,
                spec.dropout_rate,
                &mut epoch_rng,
                true,
            )?;
            let loss = loss_kind.on_tape(&mut tape, scores, &labels)?;
            let grads = tape.backward(loss)?;
            let grad_tensors: Vec<_> = staged.ids.iter().map(|&id| grads.tensor(id)).collect();
            params.sgd_step(&grad_tensors, spec.learning_rate)?;
        }
        let val_loss = eval_base_loss(&params, &zscore, loss_kind, val)?;
        Ok((val_loss, (params.clone(), val_loss)))
    };

    let ((best_params, final_val_loss), trace) =
        run_early_stopped(config.max_epochs, config.patience, epoch_fn)?;
    Ok(TrainedBase {
        spec: spec.clone(),
        base: BaseModel::Network(best_params),
        zscore,
        trace,
        final_val_loss,
    })
}

/// Mean evaluation-mode loss per list.
fn eval_base_loss(
    params: &NetworkParams,
    zscore: &ZScore,
    loss_kind: LossKind,
    lists: &[DateList],
) -> Result<f64, TrainError> {
    if lists.is_empty() {
        return Err(TrainError::Data("empty validation split".into()));
    }
    let mut total = 0.0;
    for (_, rows) in lists {
        let labels = list_labels(rows, loss_kind);
        let mut tape = Tape::new();
        let x = stage_snapshot(&mut tape, zscore, rows);
        let staged = params.stage(&mut tape);
        let scores = staged.forward_eval(&mut tape, x)?;
        let loss = loss_kind.on_tape(&mut tape, scores, &labels)?;
        total += tape.value(loss).item();
    }
    Ok(total / lists.len() as f64)
}

/// Encoder hyperparameters for the context stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

/// A trained context stage plus its validation trace.
#[derive(Debug, Clone)]
pub struct TrainedContext {
    pub model: ContextModel,
    pub trace: EpochTrace,
    pub final_val_loss: f64,
}

/// Build the long/short training sublists for every date using the frozen
/// base ranker. Dates whose cross-section is smaller than 2m are skipped
/// with a warning.
fn build_training_sublists(
    base: &TrainedBase,
    lists: &[DateList],
    m: usize,
) -> Result<Vec<ContextSublist>, TrainError> {
    let mut out = Vec::new();
    for (date, rows) in lists {
        if rows.len() < 2 * m {
            log::warn!(
                "{date}: cross-section {} below 2m={}, skipped for context training",
                rows.len(),
                2 * m
            );
            continue;
        }
        let scores = score_base(&base.base, &base.spec, &base.zscore, rows)?;
        let (long, short, _, _) = crate::strategy::context_sublists(*date, rows, &scores, m)
            .expect("length checked above");
        out.push(long);
        out.push(short);
    }
    if out.is_empty() {
        return Err(TrainError::Data(
            "every date was skipped: no sublists to train the context model".into(),
        ));
    }
    Ok(out)
}

/// Second training stage: freeze the base ranker, materialize its top-m and
/// bottom-m sublists over the train window, and fit the encoder re-ranker
/// on them (pairwise loss = `+P` variants, ListNet = `+L`).
pub fn train_context_stage(
    base: &TrainedBase,
    lists: &[DateList],
    m: usize,
    spec: &ContextSpec,
    loss_kind: LossKind,
    config: &TrainConfig,
) -> Result<TrainedContext, TrainError> {
    config.validate()?;
    if !matches!(loss_kind, LossKind::PairwiseLogistic | LossKind::ListNet) {
        return Err(TrainError::Config(
            "context re-rankers train with the pairwise or ListNet loss".into(),
        ));
    }
    if lists.len() < 2 {
        return Err(TrainError::Data(format!(
            "need at least 2 rebalance dates to train, have {}",
            lists.len()
        )));
    }
    let (train, val) = split_chronological(lists, config.train_fraction);
    let train_subs = build_training_sublists(base, train, m)?;
    let val_subs = build_training_sublists(base, val, m)?;

    let init_key = StreamKey::root(spec.seed).child("context-init");
    let mut params = EncoderParams::init(
        FEATURE_DIM,
        spec.d_model,
        spec.d_ff,
        spec.n_layers,
        spec.n_heads,
        spec.dropout_rate,
        init_key,
    )?;
    let dropout_key = StreamKey::root(spec.seed).child("context-dropout");

    let epoch_fn = |epoch: usize| -> Result<(f64, (EncoderParams, f64)), TrainError> {
        let mut epoch_rng = dropout_key.child_idx(epoch as u64).rng();
        for sub in &train_subs {
            let labels: Vec<f64> = sub.items.iter().map(|r| f64::from(r.label)).collect();
            let mut tape = Tape::new();
            let x = crate::context::stage_sublist(&mut tape, &base.zscore, sub);
            let staged = params.stage(&mut tape);
            let scores = staged.forward(&mut tape, x, true, &mut epoch_rng, true)?;
            let loss = loss_kind.on_tape(&mut tape, scores, &labels)?;
            let grads = tape.backward(loss)?;
            let leaf_ids = staged.leaf_ids();
            let grad_tensors: Vec<_> = leaf_ids.iter().map(|&id| grads.tensor(id)).collect();
            params.sgd_step(&grad_tensors, spec.learning_rate)?;
        }
        let val_loss = eval_context_loss(&params, &base.zscore, loss_kind, &val_subs)?;
        Ok((val_loss, (params.clone(), val_loss)))
    };

    let ((best_params, final_val_loss), trace) =
        run_early_stopped(config.max_epochs, config.patience, epoch_fn)?;
    Ok(TrainedContext {
        model: ContextModel {
            params: best_params,
            loss: loss_kind,
            learning_rate: spec.learning_rate,
        },
        trace,
        final_val_loss,
    })
}

fn eval_context_loss(
    params: &EncoderParams,
    zscore: &ZScore,
    loss_kind: LossKind,
    subs: &[ContextSublist],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut unused = StreamKey::root(0).rng();
    for sub in subs {
        let labels: Vec<f64> = sub.items.iter().map(|r| f64::from(r.label)).collect();
        let mut tape = Tape::new();
        let x = crate::context::stage_sublist(&mut tape, zscore, sub);
        let staged = params.stage(&mut tape);
        let scores = staged.forward(&mut tape, x, true, &mut unused, false)?;
        let loss = loss_kind.on_tape(&mut tape, scores, &labels)?;
        total += tape.value(loss).item();
    }
    Ok(total / subs.len() as f64)
}

/// Discrete hyperparameter grids. These default to the published per-model
/// grids; `n_trials` draws are made uniformly with replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dropout: Vec<f64>,
    pub hidden_width: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub d_fc: Vec<usize>,
    pub d_ff: Vec<usize>,
    pub n_layers: Vec<usize>,
    pub n_trials: usize,
}

const DROPOUT_GRID: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];

impl SearchSpace {
    /// Grid for one base model kind.
    pub fn for_base(kind: ScorerKind) -> SearchSpace {
        let (widths, lrs): (Vec<usize>, Vec<f64>) = match kind {
            ScorerKind::MlpRegress => (
                vec![16, 32, 64, 128, 256],
                vec![1e-7, 1e-6, 1e-5, 1e-4, 1e-3],
            ),
            ScorerKind::ListNetNet => (
                vec![8, 16, 32, 64, 128],
                vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            ),
            // ListMLE and pairwise logistic share a grid
            _ => (
                vec![8, 16, 32, 64, 128],
                vec![1e-7, 1e-6, 1e-5, 1e-4, 1e-3],
            ),
        };
        SearchSpace {
            dropout: DROPOUT_GRID.to_vec(),
            hidden_width: widths,
            learning_rate: lrs,
            d_fc: vec![],
            d_ff: vec![],
            n_layers: vec![],
            n_trials: 50,
        }
    }

    /// Grid for the encoder re-ranker (heads fixed at 1).
    pub fn for_context() -> SearchSpace {
        SearchSpace {
            dropout: DROPOUT_GRID.to_vec(),
            hidden_width: vec![],
            learning_rate: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            d_fc: vec![16, 32, 64, 128, 256],
            d_ff: vec![16, 32, 64, 128, 256],
            n_layers: vec![1, 2, 3, 4],
            n_trials: 50,
        }
    }
}

fn pick<T: Copy>(grid: &[T], rng: &mut impl Rng) -> Result<T, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::Config("empty hyperparameter grid".into()));
    }
    Ok(grid[rng.gen_range(0..grid.len())])
}

/// Index of the winning trial: lowest validation loss, ties to the earliest
/// trial. Non-finite losses never win unless every trial failed.
pub fn select_best(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Outcome of a hyperparameter search over base-model grids.
pub struct BaseSearchOutcome {
    pub winner: TrainedBase,
    pub winner_trial: usize,
    pub trial_losses: Vec<f64>,
}

/// Seeded uniform random search: `n_trials` draws with replacement from the
/// grid product, each trained with early stopping; lowest validation loss
/// wins. Trial draws come from independent streams, so execution order is
/// irrelevant.
pub fn hyperparameter_search(
    kind: ScorerKind,
    space: &SearchSpace,
    lists: &[DateList],
    config: &TrainConfig,
) -> Result<BaseSearchOutcome, TrainError> {
    let mut outcomes: Vec<(f64, Option<TrainedBase>)> = Vec::with_capacity(space.n_trials);
    for trial in 0..space.n_trials {
        let mut rng = StreamKey::root(config.seed)
            .child("search")
            .child(kind.shorthand())
            .child_idx(trial as u64)
            .rng();
        let spec = ScorerSpec {
            kind,
            hidden_width: pick(&space.hidden_width, &mut rng)?,
            dropout_rate: pick(&space.dropout, &mut rng)?,
            learning_rate: pick(&space.learning_rate, &mut rng)?,
            seed: config.seed,
        };
        match train_model(&spec, lists, config) {
            Ok(trained) => outcomes.push((trained.final_val_loss, Some(trained))),
            Err(TrainError::Kernel(e)) => {
                // a diverged trial loses automatically
                log::warn!("search trial {trial} for {} diverged: {e}", kind.shorthand());
                outcomes.push((f64::INFINITY, None));
            }
            Err(other) => return Err(other),
        }
    }
    let losses: Vec<f64> = outcomes.iter().map(|(l, _)| *l).collect();
    let winner_trial = select_best(&losses)
        .ok_or_else(|| TrainError::Data("every search trial diverged".into()))?;
    let winner = outcomes
        .into_iter()
        .nth(winner_trial)
        .and_then(|(_, t)| t)
        .expect("finite loss implies a trained model");
    Ok(BaseSearchOutcome {
        winner,
        winner_trial,
        trial_losses: losses,
    })
}

/// Outcome of a context-model search.
pub struct ContextSearchOutcome {
    pub winner: TrainedContext,
    pub winner_spec: ContextSpec,
    pub winner_trial: usize,
    pub trial_losses: Vec<f64>,
}

/// Random search over the encoder grids, sequential after the base stage.
pub fn context_hyperparameter_search(
    base: &TrainedBase,
    loss_kind: LossKind,
    space: &SearchSpace,
    lists: &[DateList],
    config: &TrainConfig,
) -> Result<ContextSearchOutcome, TrainError> {
    let mut outcomes: Vec<(f64, Option<(TrainedContext, ContextSpec)>)> =
        Vec::with_capacity(space.n_trials);
    for trial in 0..space.n_trials {
        let mut rng = StreamKey::root(config.seed)
            .child("context-search")
            .child(base.spec.kind.shorthand())
            .child_idx(trial as u64)
            .rng();
        let spec = ContextSpec {
            d_model: pick(&space.d_fc, &mut rng)?,
            d_ff: pick(&space.d_ff, &mut rng)?,
            n_layers: pick(&space.n_layers, &mut rng)?,
            n_heads: 1,
            dropout_rate: pick(&space.dropout, &mut rng)?,
            learning_rate: pick(&space.learning_rate, &mut rng)?,
            seed: config.seed,
        };
        match train_context_stage(base, lists, SUBLIST_LEN, &spec, loss_kind, config) {
            Ok(trained) => outcomes.push((trained.final_val_loss, Some((trained, spec)))),
            Err(TrainError::Kernel(e)) => {
                log::warn!("context search trial {trial} diverged: {e}");
                outcomes.push((f64::INFINITY, None));
            }
            Err(other) => return Err(other),
        }
    }
    let losses: Vec<f64> = outcomes.iter().map(|(l, _)| *l).collect();
    let winner_trial = select_best(&losses)
        .ok_or_else(|| TrainError::Data("every context search trial diverged".into()))?;
    let (winner, winner_spec) = outcomes
        .into_iter()
        .nth(winner_trial)
        .and_then(|(_, t)| t)
        .expect("finite loss implies a trained model");
    Ok(ContextSearchOutcome {
        winner,
        winner_spec,
        winner_trial,
        trial_losses: losses,
    })
}
