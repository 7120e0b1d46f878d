//! Positions and realized strategy returns.
//!
//! Baseline selection trades the 3 most extreme assets per side of the
//! base ranking. Context selection re-scores the base top-m and bottom-m
//! sublists with the encoder model and picks the extremes of the re-ranked
//! lists. Realized returns follow the volatility-targeted identity
//! `(1/n) Σ S_i (σ_tgt / σ_i) r_i` with `n` the number of traded pairs.
//!
//! All orderings are strict: ties in any score break by asset identifier,
//! so the long and short books can never overlap.

use chrono::NaiveDate;
use serde::Serialize;
use thiserror::Error;

use crate::context::{ContextModel, ContextSublist, Side};
use crate::features::{FeatureRow, ZScore};
use crate::marketdata::TRADING_DAYS_PER_YEAR;

/// Annualized portfolio volatility target.
pub const SIGMA_TARGET: f64 = 0.15;

/// Traded names per side.
pub const BOOK_SIZE: usize = 3;

/// Default sublist length handed to the context re-ranker.
pub const SUBLIST_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("cross-section of {have} assets cannot fill two books of {need}")]
    TooFewAssets { have: usize, need: usize },
    #[error("traded asset {asset} has non-positive volatility {sigma}")]
    BadSigma { asset: String, sigma: f64 },
    #[error("return series has zero variance")]
    ZeroVariance,
    #[error("context error: {0}")]
    Context(#[from] crate::context::ContextError),
}

/// One traded name inside a rebalance decision.
#[derive(Debug, Clone, Serialize)]
pub struct TradedLeg {
    pub asset: String,
    pub asset_idx: usize,
    /// +1 long, -1 short.
    pub signal: i8,
    /// Daily ex-ante volatility at the decision date.
    pub sigma_daily: f64,
    /// Position in the full descending base ranking (0 = highest score).
    pub base_rank: usize,
    /// Position in the re-ranked sublist (0 = most extreme), when a
    /// context model drove the selection.
    pub context_rank: Option<usize>,
}

/// The books formed at one rebalance date: 3 longs then 3 shorts, most
/// extreme first. Signals are +1 on longs, -1 on shorts, 0 elsewhere.
#[derive(Debug, Clone, Serialize)]
pub struct RebalanceDecision {
    pub date: NaiveDate,
    pub legs: Vec<TradedLeg>,
    /// True when a context selection fell back to the baseline because the
    /// cross-section was smaller than 2m.
    pub fallback: bool,
}

impl RebalanceDecision {
    pub fn longs(&self) -> impl Iterator<Item = &TradedLeg> {
        self.legs.iter().filter(|l| l.signal > 0)
    }

    pub fn shorts(&self) -> impl Iterator<Item = &TradedLeg> {
        self.legs.iter().filter(|l| l.signal < 0)
    }
}

/// Indices ordered by descending score, ties by ascending asset index
/// (asset indices follow identifier order).
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Top 3 scores long, bottom 3 short, from one strict descending order.
pub fn select_portfolio_baseline(
    date: NaiveDate,
    rows: &[FeatureRow],
    scores: &[f64],
) -> Result<RebalanceDecision, StrategyError> {
    if rows.len() < 2 * BOOK_SIZE {
        return Err(StrategyError::TooFewAssets {
            have: rows.len(),
            need: 2 * BOOK_SIZE,
        });
    }
    let order = descending_order(scores);
    let mut legs = Vec::with_capacity(2 * BOOK_SIZE);
    for (rank, &idx) in order.iter().take(BOOK_SIZE).enumerate() {
        legs.push(leg(&rows[idx], 1, rank, None));
    }
    for (back, &idx) in order.iter().rev().take(BOOK_SIZE).enumerate() {
        legs.push(leg(&rows[idx], -1, order.len() - 1 - back, None));
    }
    Ok(RebalanceDecision {
        date,
        legs,
        fallback: false,
    })
}

fn leg(row: &FeatureRow, signal: i8, base_rank: usize, context_rank: Option<usize>) -> TradedLeg {
    TradedLeg {
        asset: row.asset.clone(),
        asset_idx: row.asset_idx,
        signal,
        sigma_daily: row.sigma,
        base_rank,
        context_rank,
    }
}

/// Build the two context sublists from base scores: top-m in descending
/// base order, bottom-m in ascending order, so position 0 is always the
/// most extreme name of its side.
pub fn context_sublists(
    date: NaiveDate,
    rows: &[FeatureRow],
    base_scores: &[f64],
    m: usize,
) -> Option<(ContextSublist, ContextSublist, Vec<usize>, Vec<usize>)> {
    if rows.len() < 2 * m {
        return None;
    }
    let order = descending_order(base_scores);
    let top: Vec<usize> = order[..m].to_vec();
    let bottom: Vec<usize> = order[order.len() - m..].iter().rev().copied().collect();
    let long = ContextSublist {
        side: Side::Long,
        date,
        items: top.iter().map(|&i| rows[i].clone()).collect(),
    };
    let short = ContextSublist {
        side: Side::Short,
        date,
        items: bottom.iter().map(|&i| rows[i].clone()).collect(),
    };
    Some((long, short, top, bottom))
}

/// Re-rank the base top-m/bottom-m with the context model and trade the
/// extremes of the refined lists. Falls back to the baseline when the
/// cross-section is smaller than 2m.
pub fn select_portfolio_context(
    date: NaiveDate,
    rows: &[FeatureRow],
    base_scores: &[f64],
    model: &ContextModel,
    zscore: &ZScore,
    m: usize,
) -> Result<RebalanceDecision, StrategyError> {
    let Some((long_sub, short_sub, top, bottom)) = context_sublists(date, rows, base_scores, m)
    else {
        log::warn!(
            "{date}: cross-section of {} assets < 2m={}; falling back to baseline selection",
            rows.len(),
            2 * m
        );
        let mut decision = select_portfolio_baseline(date, rows, base_scores)?;
        decision.fallback = true;
        return Ok(decision);
    };
    let long_scores = model.rerank(zscore, &long_sub)?;
    let short_scores = model.rerank(zscore, &short_sub)?;

    // positions within each sublist, re-ranked by context scores
    let long_order = descending_order(&long_scores);
    let short_order = {
        // most-short first: ascending context score, ties by position
        let mut idx: Vec<usize> = (0..short_scores.len()).collect();
        idx.sort_by(|&a, &b| {
            short_scores[a]
                .partial_cmp(&short_scores[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx
    };

    let n = rows.len();
    let mut legs = Vec::with_capacity(2 * BOOK_SIZE);
    for (rank, &pos) in long_order.iter().take(BOOK_SIZE).enumerate() {
        let row_idx = top[pos];
        legs.push(leg(&rows[row_idx], 1, pos, Some(rank)));
    }
    for (rank, &pos) in short_order.iter().take(BOOK_SIZE).enumerate() {
        let row_idx = bottom[pos];
        // bottom[pos] sits at base rank n-1-pos in descending order
        legs.push(leg(&rows[row_idx], -1, n - 1 - pos, Some(rank)));
    }
    Ok(RebalanceDecision {
        date,
        legs,
        fallback: false,
    })
}

/// Eq.-style realized return: `(1/n) Σ S_i (σ_tgt / σ_i) r_i` over traded
/// legs, with σ annualized to match the target's units. A leg whose next
/// return is missing (asset vanished at t+1) contributes zero.
pub fn strategy_return(
    decision: &RebalanceDecision,
    next_return: impl Fn(usize) -> Option<f64>,
    sigma_target: f64,
) -> Result<f64, StrategyError> {
    if decision.legs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for l in &decision.legs {
        if l.sigma_daily <= 0.0 {
            return Err(StrategyError::BadSigma {
                asset: l.asset.clone(),
                sigma: l.sigma_daily,
            });
        }
        let sigma_ann = l.sigma_daily * TRADING_DAYS_PER_YEAR.sqrt();
        if let Some(r) = next_return(l.asset_idx) {
            total += f64::from(l.signal) * (sigma_target / sigma_ann) * r;
        }
    }
    Ok(total / decision.legs.len() as f64)
}

/// Multiplicative full-period rescale so the annualized sample standard
/// deviation lands exactly on the target. Returns the scaled series and
/// the factor applied.
pub fn rescale_to_target(
    returns: &[f64],
    sigma_target: f64,
) -> Result<(Vec<f64>, f64), StrategyError> {
    if returns.len() < 2 {
        return Err(StrategyError::ZeroVariance);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|&r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    let ann = var.sqrt() * TRADING_DAYS_PER_YEAR.sqrt();
    if ann == 0.0 {
        return Err(StrategyError::ZeroVariance);
    }
    let factor = sigma_target / ann;
    Ok((returns.iter().map(|&r| r * factor).collect(), factor))
}

/// Daily strategy record over a backtest window.
#[derive(Debug, Clone, Default)]
pub struct StrategyReturns {
    pub dates: Vec<NaiveDate>,
    pub returns: Vec<f64>,
    pub ndcg_long: Vec<f64>,
    pub ndcg_short: Vec<f64>,
}

impl StrategyReturns {
    pub fn push(&mut self, date: NaiveDate, ret: f64, ndcg_long: f64, ndcg_short: f64) {
        self.dates.push(date);
        self.returns.push(ret);
        self.ndcg_long.push(ndcg_long);
        self.ndcg_short.push(ndcg_short);
    }

    /// Per-date mean of long- and short-side NDCG@3.
    pub fn ndcg_both(&self) -> Vec<f64> {
        self.ndcg_long
            .iter()
            .zip(&self.ndcg_short)
            .map(|(&a, &b)| 0.5 * (a + b))
            .collect()
    }

    pub fn mean_ndcg(&self) -> f64 {
        let both = self.ndcg_both();
        if both.is_empty() {
            return f64::NAN;
        }
        both.iter().sum::<f64>() / both.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::EncoderParams;
    use crate::features::FEATURE_DIM;
    use crate::rankers::LossKind;
    use crate::rng::StreamKey;

    fn rows(n: usize) -> Vec<FeatureRow> {
        (0..n)
            .map(|i| FeatureRow {
                date: NaiveDate::from_ymd_opt(2016, 5, 2).unwrap(),
                date_idx: 50,
                next_date: NaiveDate::from_ymd_opt(2016, 5, 3).unwrap(),
                asset: format!("C{i:02}"),
                asset_idx: i,
                features: [i as f64 * 0.01; FEATURE_DIM],
                label: (i % 10) as u8,
                next_return: 0.0,
                next_vol_scaled_return: 0.0,
                sigma: 0.01,
            })
            .collect()
    }

    #[test]
    fn baseline_books_31_assets() {
        let rows = rows(31);
        let scores: Vec<f64> = (0..31).map(|i| i as f64).collect();
        let d = select_portfolio_baseline(rows[0].date, &rows, &scores).unwrap();
        let longs: Vec<usize> = d.longs().map(|l| l.asset_idx).collect();
        let shorts: Vec<usize> = d.shorts().map(|l| l.asset_idx).collect();
        assert_eq!(longs, vec![30, 29, 28]);
        assert_eq!(shorts, vec![0, 1, 2]);
        assert_eq!(d.legs.len(), 6);
        // signals: +1 longs, -1 shorts, everyone else untraded
        assert!(d.longs().all(|l| l.signal == 1));
        assert!(d.shorts().all(|l| l.signal == -1));
    }

    #[test]
    fn baseline_scores_equal_labels_picks_top_labels() {
        let rows = rows(10);
        let scores: Vec<f64> = rows.iter().map(|r| f64::from(r.label)).collect();
        let d = select_portfolio_baseline(rows[0].date, &rows, &scores).unwrap();
        let long_labels: Vec<u8> = d.longs().map(|l| rows[l.asset_idx].label).collect();
        assert_eq!(long_labels, vec![9, 8, 7]);
    }

    #[test]
    fn baseline_tie_break_is_deterministic_and_disjoint() {
        let rows = rows(6);
        let scores = vec![1.0; 6];
        let d = select_portfolio_baseline(rows[0].date, &rows, &scores).unwrap();
        let longs: Vec<usize> = d.longs().map(|l| l.asset_idx).collect();
        let shorts: Vec<usize> = d.shorts().map(|l| l.asset_idx).collect();
        assert_eq!(longs, vec![0, 1, 2]);
        assert_eq!(shorts, vec![5, 4, 3]);
        assert!(longs.iter().all(|a| !shorts.contains(a)));
    }

    #[test]
    fn baseline_too_few_assets_errors() {
        let rows = rows(5);
        let scores = vec![1.0; 5];
        assert!(matches!(
            select_portfolio_baseline(rows[0].date, &rows, &scores),
            Err(StrategyError::TooFewAssets { .. })
        ));
    }

    fn context_model(seed: u64) -> ContextModel {
        ContextModel {
            params: EncoderParams::init(
                FEATURE_DIM,
                8,
                8,
                1,
                1,
                0.0,
                StreamKey::root(seed).child("ctx"),
            )
            .unwrap(),
            loss: LossKind::ListNet,
            learning_rate: 1e-3,
        }
    }

    #[test]
    fn context_falls_back_below_two_m() {
        let rows = rows(12);
        let scores: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let model = context_model(1);
        let d = select_portfolio_context(
            rows[0].date,
            &rows,
            &scores,
            &model,
            &ZScore::identity(),
            10,
        )
        .unwrap();
        assert!(d.fallback);
        let base = select_portfolio_baseline(rows[0].date, &rows, &scores).unwrap();
        let a: Vec<(usize, i8)> = d.legs.iter().map(|l| (l.asset_idx, l.signal)).collect();
        let b: Vec<(usize, i8)> = base.legs.iter().map(|l| (l.asset_idx, l.signal)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn context_membership_stays_inside_base_sublists() {
        let rows = rows(31);
        let scores: Vec<f64> = (0..31).map(|i| (i as f64 * 0.37).sin()).collect();
        let model = context_model(2);
        let d = select_portfolio_context(
            rows[0].date,
            &rows,
            &scores,
            &model,
            &ZScore::identity(),
            10,
        )
        .unwrap();
        let order = descending_order(&scores);
        let top: Vec<usize> = order[..10].to_vec();
        let bottom: Vec<usize> = order[21..].to_vec();
        for l in d.longs() {
            assert!(top.contains(&l.asset_idx));
        }
        for l in d.shorts() {
            assert!(bottom.contains(&l.asset_idx));
        }
    }

    #[test]
    fn context_with_m_equal_book_size_equals_baseline_membership() {
        let rows = rows(20);
        let scores: Vec<f64> = (0..20).map(|i| (i as f64 * 0.61).cos()).collect();
        let model = context_model(3);
        let d = select_portfolio_context(
            rows[0].date,
            &rows,
            &scores,
            &model,
            &ZScore::identity(),
            BOOK_SIZE,
        )
        .unwrap();
        let base = select_portfolio_baseline(rows[0].date, &rows, &scores).unwrap();
        let mut a: Vec<usize> = d.longs().map(|l| l.asset_idx).collect();
        let mut b: Vec<usize> = base.longs().map(|l| l.asset_idx).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        let mut a: Vec<usize> = d.shorts().map(|l| l.asset_idx).collect();
        let mut b: Vec<usize> = base.shorts().map(|l| l.asset_idx).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn strategy_return_hand_cases() {
        let rows = rows(8);
        let scores: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let d = select_portfolio_baseline(rows[0].date, &rows, &scores).unwrap();
        // all next returns zero
        assert_eq!(strategy_return(&d, |_| Some(0.0), SIGMA_TARGET).unwrap(), 0.0);

        // single long with sigma equal to the target: passes the return through
        let one_leg = RebalanceDecision {
            date: rows[0].date,
            legs: vec![TradedLeg {
                asset: "C00".into(),
                asset_idx: 0,
                signal: 1,
                sigma_daily: SIGMA_TARGET / TRADING_DAYS_PER_YEAR.sqrt(),
                base_rank: 0,
                context_rank: None,
            }],
            fallback: false,
        };
        let r = strategy_return(&one_leg, |_| Some(0.01), SIGMA_TARGET).unwrap();
        assert!((r - 0.01).abs() < 1e-15);
    }

    #[test]
    fn strategy_return_matches_hand_computed_identity() {
        // 2 longs + 2 shorts with hand-set sigmas and next returns
        let sqrt_ann = TRADING_DAYS_PER_YEAR.sqrt();
        let legs = vec![
            (0usize, 1i8, 0.10 / sqrt_ann, 0.02),
            (1, 1, 0.20 / sqrt_ann, -0.01),
            (2, -1, 0.15 / sqrt_ann, 0.03),
            (3, -1, 0.05 / sqrt_ann, -0.02),
        ];
        let decision = RebalanceDecision {
            date: NaiveDate::from_ymd_opt(2016, 5, 2).unwrap(),
            legs: legs
                .iter()
                .map(|&(idx, signal, sigma, _)| TradedLeg {
                    asset: format!("C{idx:02}"),
                    asset_idx: idx,
                    signal,
                    sigma_daily: sigma,
                    base_rank: idx,
                    context_rank: None,
                })
                .collect(),
            fallback: false,
        };
        let rets: Vec<f64> = legs.iter().map(|&(_, _, _, r)| r).collect();
        let got = strategy_return(&decision, |i| Some(rets[i]), 0.15).unwrap();
        let want = (1.0 / 4.0)
            * (1.0 * (0.15 / 0.10) * 0.02
                + 1.0 * (0.15 / 0.20) * (-0.01)
                + (-1.0) * (0.15 / 0.15) * 0.03
                + (-1.0) * (0.15 / 0.05) * (-0.02));
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn strategy_return_rejects_zero_sigma() {
        let decision = RebalanceDecision {
            date: NaiveDate::from_ymd_opt(2016, 5, 2).unwrap(),
            legs: vec![TradedLeg {
                asset: "C00".into(),
                asset_idx: 0,
                signal: 1,
                sigma_daily: 0.0,
                base_rank: 0,
                context_rank: None,
            }],
            fallback: false,
        };
        assert!(matches!(
            strategy_return(&decision, |_| Some(0.01), SIGMA_TARGET),
            Err(StrategyError::BadSigma { .. })
        ));
    }

    #[test]
    fn rescale_hits_target_exactly() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        let returns: Vec<f64> = (0..500).map(|_| (rng.gen::<f64>() - 0.5) * 0.03).collect();
        let (scaled, factor) = rescale_to_target(&returns, SIGMA_TARGET).unwrap();
        let n = scaled.len() as f64;
        let mean = scaled.iter().sum::<f64>() / n;
        let var = scaled.iter().map(|&r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
        let ann = var.sqrt() * TRADING_DAYS_PER_YEAR.sqrt();
        assert!((ann - SIGMA_TARGET).abs() < 1e-12, "annualized vol {ann}");
        assert!(factor.is_finite() && factor > 0.0);

        // already at target: factor 1
        let (rescaled, f2) = rescale_to_target(&scaled, SIGMA_TARGET).unwrap();
        assert!((f2 - 1.0).abs() < 1e-12);
        for (a, b) in scaled.iter().zip(&rescaled) {
            assert!((a - b).abs() < 1e-15);
        }

        // halving the target halves every return
        let (half, _) = rescale_to_target(&scaled, SIGMA_TARGET / 2.0).unwrap();
        for (a, b) in scaled.iter().zip(&half) {
            assert!((a / 2.0 - b).abs() < 1e-15);
        }

        // a dyadic constant series has exactly zero sample variance
        assert!(matches!(
            rescale_to_target(&[0.015625; 10], SIGMA_TARGET),
            Err(StrategyError::ZeroVariance)
        ));
    }

    #[test]
    fn sharpe_invariant_under_rescale() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(16);
        let returns: Vec<f64> = (0..400).map(|_| (rng.gen::<f64>() - 0.48) * 0.02).collect();
        let before = crate::metrics::performance_summary(&returns).unwrap();
        let (scaled, _) = rescale_to_target(&returns, SIGMA_TARGET).unwrap();
        let after = crate::metrics::performance_summary(&scaled).unwrap();
        assert!((before.sharpe.unwrap() - after.sharpe.unwrap()).abs() < 1e-12);
    }
}
