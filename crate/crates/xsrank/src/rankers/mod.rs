//! Base scoring models and their training losses.
//!
//! A base ranker scores each asset from its own features alone: a seeded
//! random baseline, the volatility-normalized MACD heuristic, a
//! regress-then-rank MLP, and neural rankers trained with the pairwise
//! logistic, ListMLE, and ListNet losses. The context re-ranker that
//! refines their top/bottom sublists lives in [`crate::context`].

pub mod losses;
mod network;

pub use network::{Activation, NetworkParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ContextModel;
use crate::features::{FeatureRow, ZScore, FEATURE_DIM};
use crate::numkernel::{KernelError, Tape, Tensor, TensorId};
use crate::rng::StreamKey;
use rand::Rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("feature dimension mismatch: model expects {expect}, rows carry {got}")]
    FeatureDim { expect: usize, got: usize },
    #[error("{0} requires a trained network")]
    NotTrained(String),
    #[error("empty cross-section")]
    EmptySnapshot,
}

/// The six base model kinds with their paper-table shorthand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScorerKind {
    /// `Rand` — seeded random scores.
    Random,
    /// `Baz` — score equals the final MACD indicator feature.
    MacdHeuristic,
    /// `MLP` — regress-then-rank on next-period vol-scaled returns.
    MlpRegress,
    /// `PW` — neural ranker, pairwise logistic loss.
    PairwiseNet,
    /// `ML` — neural ranker, ListMLE loss.
    ListMleNet,
    /// `LN` — neural ranker, ListNet loss.
    ListNetNet,
}

impl ScorerKind {
    pub fn shorthand(&self) -> &'static str {
        match self {
            ScorerKind::Random => "Rand",
            ScorerKind::MacdHeuristic => "Baz",
            ScorerKind::MlpRegress => "MLP",
            ScorerKind::PairwiseNet => "PW",
            ScorerKind::ListMleNet => "ML",
            ScorerKind::ListNetNet => "LN",
        }
    }

    pub fn from_shorthand(s: &str) -> Option<Self> {
        Some(match s {
            "Rand" => ScorerKind::Random,
            "Baz" => ScorerKind::MacdHeuristic,
            "MLP" => ScorerKind::MlpRegress,
            "PW" => ScorerKind::PairwiseNet,
            "ML" => ScorerKind::ListMleNet,
            "LN" => ScorerKind::ListNetNet,
            _ => return None,
        })
    }

    pub fn is_neural(&self) -> bool {
        matches!(
            self,
            ScorerKind::MlpRegress
                | ScorerKind::PairwiseNet
                | ScorerKind::ListMleNet
                | ScorerKind::ListNetNet
        )
    }

    /// Ranking nets use tanh hidden units; the MLP regressor uses rectifiers.
    pub fn activation(&self) -> Activation {
        match self {
            ScorerKind::MlpRegress => Activation::Relu,
            _ => Activation::Tanh,
        }
    }
}

/// The loss a trainable model minimizes, also used for context re-rankers
/// (pairwise gives the `+P` variants, ListNet the `+L`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    PairwiseLogistic,
    ListNet,
    ListMle,
    Mse,
}

impl LossKind {
    pub fn for_base(kind: ScorerKind) -> Option<LossKind> {
        match kind {
            ScorerKind::MlpRegress => Some(LossKind::Mse),
            ScorerKind::PairwiseNet => Some(LossKind::PairwiseLogistic),
            ScorerKind::ListMleNet => Some(LossKind::ListMle),
            ScorerKind::ListNetNet => Some(LossKind::ListNet),
            _ => None,
        }
    }

    /// Record the loss on the tape. `labels` are decile labels for ranking
    /// losses and regression targets for MSE.
    pub fn on_tape(
        &self,
        tape: &mut Tape,
        scores: TensorId,
        labels: &[f64],
    ) -> Result<TensorId, KernelError> {
        match self {
            LossKind::PairwiseLogistic => tape.pairwise_logistic(scores, labels),
            LossKind::ListNet => tape.listnet(scores, labels),
            LossKind::ListMle => tape.listmle(scores, labels),
            LossKind::Mse => tape.mse(scores, labels),
        }
    }
}

/// Hyperparameters of one base model; neural kinds use all fields, the
/// heuristics only what they need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerSpec {
    pub kind: ScorerKind,
    pub hidden_width: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl ScorerSpec {
    pub fn heuristic(kind: ScorerKind, seed: u64) -> Self {
        ScorerSpec {
            kind,
            hidden_width: 0,
            dropout_rate: 0.0,
            learning_rate: 0.0,
            seed,
        }
    }
}

/// A base model ready to score: either a closed-form heuristic or a
/// trained network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BaseModel {
    Random,
    MacdHeuristic,
    Network(NetworkParams),
}

/// A trained base ranker, its normalization statistics, optional context
/// re-ranker, and the window it was calibrated on. Serializes to a
/// self-describing JSON artifact that round-trips bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorerBundle {
    pub spec: ScorerSpec,
    pub base: BaseModel,
    pub zscore: ZScore,
    pub context: Option<ContextModel>,
    pub train_start: chrono::NaiveDate,
    pub train_end: chrono::NaiveDate,
}

impl ScorerBundle {
    /// One score per row of a single-date snapshot, in row order.
    /// Evaluation mode: deterministic for fixed parameters and seed.
    pub fn score_cross_section(&self, rows: &[FeatureRow]) -> Result<Vec<f64>, ModelError> {
        score_base(&self.base, &self.spec, &self.zscore, rows)
    }
}

/// Score a snapshot with a base model. The random baseline derives its
/// stream from (seed, date) so repeated calls agree; the MACD heuristic
/// reads the raw final-indicator feature; networks run in evaluation mode
/// on z-scored features.
pub fn score_base(
    base: &BaseModel,
    spec: &ScorerSpec,
    zscore: &ZScore,
    rows: &[FeatureRow],
) -> Result<Vec<f64>, ModelError> {
    if rows.is_empty() {
        return Err(ModelError::EmptySnapshot);
    }
    match base {
        BaseModel::Random => {
            let day = rows[0].date.to_string();
            let mut rng = StreamKey::root(spec.seed)
                .child("random-scorer")
                .child(&day)
                .rng();
            Ok(rows.iter().map(|_| rng.gen::<f64>()).collect())
        }
        BaseModel::MacdHeuristic => Ok(rows.iter().map(|r| r.features[FEATURE_DIM - 1]).collect()),
        BaseModel::Network(params) => {
            if params.input_dim() != FEATURE_DIM {
                return Err(ModelError::FeatureDim {
                    expect: params.input_dim(),
                    got: FEATURE_DIM,
                });
            }
            let mut tape = Tape::new();
            let x = stage_snapshot(&mut tape, zscore, rows);
            let staged = params.stage(&mut tape);
            let scores = staged.forward_eval(&mut tape, x)?;
            Ok(tape.value(scores).values().to_vec())
        }
    }
}

/// Put a z-scored snapshot on the tape as an m×FEATURE_DIM leaf.
pub fn stage_snapshot(tape: &mut Tape, zscore: &ZScore, rows: &[FeatureRow]) -> TensorId {
    let mut values = Vec::with_capacity(rows.len() * FEATURE_DIM);
    for row in rows {
        values.extend_from_slice(&zscore.apply(&row.features));
    }
    tape.leaf(Tensor::matrix(rows.len(), FEATURE_DIM, values).expect("finite features"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Parameterized;
    use chrono::NaiveDate;

    fn row(asset_idx: usize, macd_final: f64) -> FeatureRow {
        let mut features = [0.0; FEATURE_DIM];
        features[FEATURE_DIM - 1] = macd_final;
        FeatureRow {
            date: NaiveDate::from_ymd_opt(2015, 3, 2).unwrap(),
            date_idx: 400,
            next_date: NaiveDate::from_ymd_opt(2015, 3, 3).unwrap(),
            asset: format!("C{asset_idx:02}"),
            asset_idx,
            features,
            label: 0,
            next_return: 0.0,
            next_vol_scaled_return: 0.0,
            sigma: 0.01,
        }
    }

    #[test]
    fn random_scorer_is_deterministic_per_date() {
        let rows: Vec<FeatureRow> = (0..8).map(|i| row(i, 0.0)).collect();
        let spec = ScorerSpec::heuristic(ScorerKind::Random, 11);
        let a = score_base(&BaseModel::Random, &spec, &ZScore::identity(), &rows).unwrap();
        let b = score_base(&BaseModel::Random, &spec, &ZScore::identity(), &rows).unwrap();
        assert_eq!(a, b);
        let mut other_day = rows.clone();
        for r in &mut other_day {
            r.date = NaiveDate::from_ymd_opt(2015, 3, 3).unwrap();
        }
        let c = score_base(&BaseModel::Random, &spec, &ZScore::identity(), &other_day).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn macd_heuristic_reads_final_indicator() {
        let rows: Vec<FeatureRow> = (0..5).map(|i| row(i, i as f64 * 0.1)).collect();
        let spec = ScorerSpec::heuristic(ScorerKind::MacdHeuristic, 0);
        let scores =
            score_base(&BaseModel::MacdHeuristic, &spec, &ZScore::identity(), &rows).unwrap();
        for (i, s) in scores.iter().enumerate() {
            assert_eq!(*s, i as f64 * 0.1);
        }
    }

    #[test]
    fn zero_network_scores_constant() {
        let params = NetworkParams::zeros(FEATURE_DIM, 8, Activation::Tanh);
        let rows: Vec<FeatureRow> = (0..6).map(|i| row(i, i as f64)).collect();
        let spec = ScorerSpec {
            kind: ScorerKind::PairwiseNet,
            hidden_width: 8,
            dropout_rate: 0.0,
            learning_rate: 0.01,
            seed: 0,
        };
        let scores = score_base(
            &BaseModel::Network(params),
            &spec,
            &ZScore::identity(),
            &rows,
        )
        .unwrap();
        assert!(scores.iter().all(|&s| s == scores[0]));
    }

    #[test]
    fn empty_snapshot_is_an_error() {
        let spec = ScorerSpec::heuristic(ScorerKind::Random, 0);
        assert!(matches!(
            score_base(&BaseModel::Random, &spec, &ZScore::identity(), &[]),
            Err(ModelError::EmptySnapshot)
        ));
    }

    #[test]
    fn bundle_round_trips_bit_exactly() {
        let key = StreamKey::root(5).child("init");
        let params = NetworkParams::init(FEATURE_DIM, 16, Activation::Tanh, key);
        let bundle = ScorerBundle {
            spec: ScorerSpec {
                kind: ScorerKind::ListNetNet,
                hidden_width: 16,
                dropout_rate: 0.2,
                learning_rate: 1e-3,
                seed: 5,
            },
            base: BaseModel::Network(params),
            zscore: ZScore::identity(),
            context: None,
            train_start: NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(),
            train_end: NaiveDate::from_ymd_opt(2014, 12, 31).unwrap(),
        };
        let json = serde_json::to_string(&bundle).unwrap();
        let back: ScorerBundle = serde_json::from_str(&json).unwrap();
        let json2 = serde_json::to_string(&back).unwrap();
        assert_eq!(json, json2);
        match (&bundle.base, &back.base) {
            (BaseModel::Network(a), BaseModel::Network(b)) => {
                for (ta, tb) in a.tensors().iter().zip(b.tensors().iter()) {
                    assert_eq!(ta.values(), tb.values());
                }
            }
            _ => panic!("kind changed in round-trip"),
        }
    }
}
