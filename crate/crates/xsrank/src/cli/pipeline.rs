//! The run pipeline: ingest -> features -> per-model walk-forward training
//! -> backtest -> artifact emission.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::Serialize;

use super::{artifacts, CliError, FixedBaseHyper, FixedContextHyper, ModelId, RunConfig};
use crate::features::{build_feature_frame, FeatureFrame, FeatureRow, ZScore};
use crate::marketdata::{
    classify_market_state, daily_returns, load_vix_csv, MarketStateSeries, PricePanel,
};
use crate::metrics::ndcg_of_selection;
use crate::rankers::{BaseModel, ScorerBundle, ScorerKind, ScorerSpec};
use crate::strategy::{
    select_portfolio_baseline, select_portfolio_context, strategy_return, RebalanceDecision,
    StrategyReturns, BOOK_SIZE,
};
use crate::training::{
    context_hyperparameter_search, hyperparameter_search, make_walk_forward_plan,
    train_context_stage, train_model, ContextSpec, SearchSpace, TrainConfig, TrainedBase,
    TrainedContext, WalkForwardPlan,
};

/// Everything the pipeline derives from input files, shared by all models.
pub struct PipelineInputs {
    pub panel: PricePanel,
    pub frame: FeatureFrame,
    pub states: Option<MarketStateSeries>,
    pub plan: WalkForwardPlan,
}

/// Per-block training record kept for the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct BlockRecord {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    pub base_hyper: Option<ScorerSpec>,
    pub base_winner_trial: Option<usize>,
    pub base_trial_losses: Vec<f64>,
    pub base_val_curve: Vec<f64>,
    pub context_hyper: Option<ContextSpec>,
    pub context_winner_trial: Option<usize>,
    pub context_trial_losses: Vec<f64>,
    pub context_val_curve: Vec<f64>,
}

/// One model's full out-of-sample record.
pub struct ModelRun {
    pub model: ModelId,
    pub strat: StrategyReturns,
    pub decisions: Vec<RebalanceDecision>,
    pub blocks: Vec<BlockRecord>,
    /// One persisted bundle per block: the trained base, its normalization
    /// statistics, and the context re-ranker when the model has one.
    pub bundles: Vec<ScorerBundle>,
}

/// Result of a whole `run` invocation.
pub struct RunOutcome {
    pub out_dir: std::path::PathBuf,
    /// model name -> files written, per-model summaries live in report.json
    pub files: Vec<std::path::PathBuf>,
}

pub fn load_inputs(config: &RunConfig) -> Result<PipelineInputs, CliError> {
    let file = File::open(&config.data.prices).map_err(super::io_err(&config.data.prices))?;
    let mut panel = PricePanel::from_csv(file)?;
    if !config.data.universe.is_empty() {
        panel = filter_universe(&panel, &config.data.universe)?;
    }
    let returns = daily_returns(&panel)?;
    let frame = build_feature_frame(&panel, &returns, config.label_target()?);
    let frame = frame
        .require_nonempty()
        .map_err(|e| CliError::BadData(e.to_string()))?;
    let states = match &config.data.vix {
        None => None,
        Some(path) => {
            let file = File::open(path).map_err(super::io_err(path))?;
            let (dates, closes) = load_vix_csv(file)?;
            Some(classify_market_state(&dates, &closes)?)
        }
    };
    let plan = make_walk_forward_plan(panel.dates())?;
    Ok(PipelineInputs {
        panel,
        frame,
        states,
        plan,
    })
}

fn filter_universe(panel: &PricePanel, universe: &[String]) -> Result<PricePanel, CliError> {
    let keep: std::collections::BTreeSet<String> = universe.iter().cloned().collect();
    for symbol in &keep {
        if !panel.assets().contains(symbol) {
            return Err(CliError::BadData(format!(
                "universe symbol '{symbol}' not present in the price panel"
            )));
        }
    }
    let mut rows = Vec::new();
    for (di, date) in panel.dates().iter().enumerate() {
        for (ai, asset) in panel.assets().iter().enumerate() {
            if keep.contains(asset) {
                if let Some(rate) = panel.rate(di, ai) {
                    rows.push((*date, asset.clone(), rate));
                }
            }
        }
    }
    Ok(PricePanel::from_rows(rows)?)
}

fn train_config(config: &RunConfig) -> TrainConfig {
    TrainConfig {
        max_epochs: config.training.max_epochs,
        patience: config.training.patience,
        train_fraction: config.training.train_fraction,
        seed: config.run.seed,
    }
}

fn fixed_base_spec(kind: ScorerKind, hyper: &FixedBaseHyper, seed: u64) -> ScorerSpec {
    ScorerSpec {
        kind,
        hidden_width: hyper.hidden_width,
        dropout_rate: hyper.dropout,
        learning_rate: hyper.learning_rate,
        seed,
    }
}

fn fixed_context_spec(hyper: &FixedContextHyper, seed: u64) -> ContextSpec {
    ContextSpec {
        d_model: hyper.d_fc,
        d_ff: hyper.d_ff,
        n_layers: hyper.n_layers,
        n_heads: 1,
        dropout_rate: hyper.dropout,
        learning_rate: hyper.learning_rate,
        seed,
    }
}

/// Train (or instantiate) the base model for one block.
fn block_base(
    model: ModelId,
    train_lists: &[(NaiveDate, &[FeatureRow])],
    config: &RunConfig,
    record: &mut BlockRecord,
) -> Result<TrainedBase, CliError> {
    let seed = config.run.seed;
    let kind = model.base;
    if !kind.is_neural() {
        let base = match kind {
            ScorerKind::Random => BaseModel::Random,
            ScorerKind::MacdHeuristic => BaseModel::MacdHeuristic,
            _ => unreachable!("neural kinds handled below"),
        };
        return Ok(TrainedBase {
            spec: ScorerSpec::heuristic(kind, seed),
            base,
            zscore: ZScore::identity(),
            trace: Default::default(),
            final_val_loss: f64::NAN,
        });
    }
    let tc = train_config(config);
    let trained = match config.hyper.base.get(kind.shorthand()) {
        Some(fixed) => {
            let spec = fixed_base_spec(kind, fixed, seed);
            train_model(&spec, train_lists, &tc)?
        }
        None => {
            let mut space = SearchSpace::for_base(kind);
            space.n_trials = config.training.search_trials;
            let outcome = hyperparameter_search(kind, &space, train_lists, &tc)?;
            record.base_winner_trial = Some(outcome.winner_trial);
            record.base_trial_losses = outcome.trial_losses;
            outcome.winner
        }
    };
    record.base_hyper = Some(trained.spec.clone());
    record.base_val_curve = trained.trace.val_loss.clone();
    Ok(trained)
}

/// Train the context stage for one block, when the model has one.
fn block_context(
    model: ModelId,
    base: &TrainedBase,
    train_lists: &[(NaiveDate, &[FeatureRow])],
    config: &RunConfig,
    record: &mut BlockRecord,
) -> Result<Option<TrainedContext>, CliError> {
    let Some(loss_kind) = model.context else {
        return Ok(None);
    };
    let tc = train_config(config);
    let m = config.portfolio.m;
    let suffix = match loss_kind {
        crate::rankers::LossKind::PairwiseLogistic => "P",
        _ => "L",
    };
    let trained = match config.hyper.context.get(suffix) {
        Some(fixed) => {
            let spec = fixed_context_spec(fixed, config.run.seed);
            record.context_hyper = Some(spec);
            train_context_stage(base, train_lists, m, &spec, loss_kind, &tc)?
        }
        None => {
            let mut space = SearchSpace::for_context();
            space.n_trials = config.training.search_trials;
            let outcome = context_hyperparameter_search(base, loss_kind, &space, train_lists, &tc)?;
            record.context_hyper = Some(outcome.winner_spec);
            record.context_winner_trial = Some(outcome.winner_trial);
            record.context_trial_losses = outcome.trial_losses;
            outcome.winner
        }
    };
    record.context_val_curve = trained.trace.val_loss.clone();
    Ok(Some(trained))
}

/// Walk one model through every block: train, then trade the test window.
pub fn run_model(
    model: ModelId,
    inputs: &PipelineInputs,
    config: &RunConfig,
) -> Result<ModelRun, CliError> {
    let mut strat = StrategyReturns::default();
    let mut decisions = Vec::new();
    let mut blocks = Vec::new();
    let mut bundles = Vec::new();
    let n_assets = inputs.panel.n_assets();

    for block in &inputs.plan.blocks {
        let mut record = BlockRecord {
            train_start: block.train_start,
            train_end: block.train_end,
            test_start: block.test_start,
            test_end: block.test_end,
            base_hyper: None,
            base_winner_trial: None,
            base_trial_losses: vec![],
            base_val_curve: vec![],
            context_hyper: None,
            context_winner_trial: None,
            context_trial_losses: vec![],
            context_val_curve: vec![],
        };
        let train_frame = inputs.frame.train_window(block.train_start, block.train_end);
        let train_lists = train_frame.date_lists();
        let base = block_base(model, &train_lists, config, &mut record)?;
        let context = block_context(model, &base, &train_lists, config, &mut record)?;
        bundles.push(ScorerBundle {
            spec: base.spec.clone(),
            base: base.base.clone(),
            zscore: base.zscore.clone(),
            context: context.as_ref().map(|c| c.model.clone()),
            train_start: block.train_start,
            train_end: block.train_end,
        });

        let test_frame = inputs.frame.between(block.test_start, block.test_end);
        for (date, rows) in test_frame.date_lists() {
            if rows.len() < 2 * BOOK_SIZE {
                log::warn!("{date}: only {} assets, date skipped", rows.len());
                continue;
            }
            let scores = crate::rankers::score_base(&base.base, &base.spec, &base.zscore, rows)
                .map_err(|e| CliError::Model(e.to_string()))?;
            let decision = match &context {
                None => select_portfolio_baseline(date, rows, &scores)
                    .map_err(|e| CliError::Model(e.to_string()))?,
                Some(ctx) => select_portfolio_context(
                    date,
                    rows,
                    &scores,
                    &ctx.model,
                    &base.zscore,
                    config.portfolio.m,
                )
                .map_err(|e| CliError::Model(e.to_string()))?,
            };

            // realized return: raw next-period returns of the traded legs
            let mut next_ret = vec![None; n_assets];
            for row in rows {
                next_ret[row.asset_idx] = Some(row.next_return);
            }
            let ret = strategy_return(
                &decision,
                |idx| next_ret.get(idx).copied().flatten(),
                config.portfolio.sigma_target,
            )
            .map_err(|e| CliError::Model(e.to_string()))?;

            // ranking accuracy of the traded books
            let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
            let mut pos_of = vec![usize::MAX; n_assets];
            for (pos, row) in rows.iter().enumerate() {
                pos_of[row.asset_idx] = pos;
            }
            let longs: Vec<usize> = decision.longs().map(|l| pos_of[l.asset_idx]).collect();
            let shorts: Vec<usize> = decision.shorts().map(|l| pos_of[l.asset_idx]).collect();
            let k = config.portfolio.k.min(longs.len());
            let ndcg_long = ndcg_of_selection(&labels, &longs[..k], crate::context::Side::Long)
                .map_err(|e| CliError::Model(e.to_string()))?;
            let ndcg_short = ndcg_of_selection(&labels, &shorts[..k], crate::context::Side::Short)
                .map_err(|e| CliError::Model(e.to_string()))?;

            strat.push(date, ret, ndcg_long, ndcg_short);
            decisions.push(decision);
        }
        blocks.push(record);
    }

    Ok(ModelRun {
        model,
        strat,
        decisions,
        blocks,
        bundles,
    })
}

/// Execute the full run and write every artifact. Model runs are scheduled
/// on a worker pool; outputs are assembled in deterministic model order.
pub fn run(config: &RunConfig) -> Result<RunOutcome, CliError> {
    let models = config.validate()?;
    let inputs = load_inputs(config)?;

    let runs: Result<Vec<ModelRun>, CliError> = if config.run.workers == 1 {
        models
            .iter()
            .map(|&m| run_model(m, &inputs, config))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.run.workers) // 0 = rayon default
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?;
        pool.install(|| {
            models
                .par_iter()
                .map(|&m| run_model(m, &inputs, config))
                .collect()
        })
    };
    let mut runs = runs?;
    runs.sort_by_key(|r| r.model.name());

    let by_name: BTreeMap<String, &ModelRun> =
        runs.iter().map(|r| (r.model.name(), r)).collect();
    artifacts::write_all(config, &inputs, &by_name)
}

/// Lightweight report reprint: load `report.json` from a run directory and
/// render the headline table.
pub fn print_report(out_dir: &Path) -> Result<String, CliError> {
    let path = out_dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(super::io_err(&path))?;
    let report: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::BadData(e.to_string()))?;
    let mut out = String::new();
    out.push_str(&format!(
        "{:<8} {:>9} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
        "model", "E[ret]", "vol", "sharpe", "mdd", "hit", "ndcg@3"
    ));
    if let Some(models) = report.get("models").and_then(|m| m.as_object()) {
        for (name, entry) in models {
            let perf = &entry["performance"];
            let fmt = |v: &serde_json::Value| match v.as_f64() {
                Some(x) => format!("{x:.3}"),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{:<8} {:>9} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
                name,
                fmt(&perf["expected_return"]),
                fmt(&perf["volatility"]),
                fmt(&perf["sharpe"]),
                fmt(&perf["max_drawdown"]),
                fmt(&perf["hit_rate"]),
                fmt(&entry["ndcg3_both"]),
            ));
        }
    }
    Ok(out)
}
