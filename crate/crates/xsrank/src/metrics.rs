//! Ranking and financial performance measures.
//!
//! NDCG@k uses exponential gains `2^rel - 1` and the `1/log2(rank+1)`
//! discount. On the long side relevance is the decile label itself; on the
//! short side it is `9 - label`, and "best-scored" means lowest score.
//! A degenerate list whose ideal DCG is zero scores 1 by convention.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::Side;
use crate::marketdata::{MarketState, MarketStateSeries, TRADING_DAYS_PER_YEAR};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("list of {have} items is shorter than k={k}")]
    ListTooShort { have: usize, k: usize },
    #[error("need at least {need} observations, have {have}")]
    TooFewObservations { need: usize, have: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

/// NDCG truncation used throughout the pipeline.
pub const NDCG_K: usize = 3;

fn gain(rel: f64) -> f64 {
    2f64.powf(rel) - 1.0
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank as f64 + 1.0).log2())
}

/// NDCG@k of one scored list. `labels[i]` and `scores[i]` describe the same
/// item; item index order is the deterministic tie-break (assets arrive in
/// identifier order).
pub fn ndcg_at_k(
    labels: &[u8],
    scores: &[f64],
    k: usize,
    side: Side,
) -> Result<f64, MetricError> {
    if labels.len() != scores.len() {
        return Err(MetricError::LengthMismatch(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if labels.len() < k {
        return Err(MetricError::ListTooShort {
            have: labels.len(),
            k,
        });
    }
    let rel: Vec<f64> = labels
        .iter()
        .map(|&l| match side {
            Side::Long => f64::from(l),
            Side::Short => 9.0 - f64::from(l),
        })
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        let cmp = match side {
            Side::Long => scores[j].partial_cmp(&scores[i]),
            Side::Short => scores[i].partial_cmp(&scores[j]),
        };
        cmp.unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .map(|(rank, &i)| gain(rel[i]) * discount(rank + 1))
        .sum();
    let mut ideal = rel.clone();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(rank, &r)| gain(r) * discount(rank + 1))
        .sum();
    if idcg == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg / idcg)
}

/// NDCG@k of an explicit selection: DCG over `chosen_in_order` (most
/// extreme first) normalized by the ideal DCG of the full cross-section.
/// Equals [`ndcg_at_k`] when the selection is the top-k by score.
pub fn ndcg_of_selection(
    labels: &[u8],
    chosen_in_order: &[usize],
    side: Side,
) -> Result<f64, MetricError> {
    if labels.len() < chosen_in_order.len() {
        return Err(MetricError::ListTooShort {
            have: labels.len(),
            k: chosen_in_order.len(),
        });
    }
    let rel_of = |l: u8| match side {
        Side::Long => f64::from(l),
        Side::Short => 9.0 - f64::from(l),
    };
    let dcg: f64 = chosen_in_order
        .iter()
        .enumerate()
        .map(|(rank, &i)| gain(rel_of(labels[i])) * discount(rank + 1))
        .sum();
    let mut ideal: Vec<f64> = labels.iter().map(|&l| rel_of(l)).collect();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg: f64 = ideal
        .iter()
        .take(chosen_in_order.len())
        .enumerate()
        .map(|(rank, &r)| gain(r) * discount(rank + 1))
        .sum();
    if idcg == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg / idcg)
}

/// The nine statistics of the performance tables. Ratios whose denominator
/// is zero are reported as absent rather than infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSummary {
    pub expected_return: f64,
    pub volatility: f64,
    pub sharpe: Option<f64>,
    pub downside_deviation: f64,
    pub max_drawdown: f64,
    pub sortino: Option<f64>,
    pub calmar: Option<f64>,
    pub hit_rate: f64,
    pub ap_al: Option<f64>,
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    var.max(0.0).sqrt()
}

/// Annualized summary of a daily return series.
pub fn performance_summary(returns: &[f64]) -> Result<PerformanceSummary, MetricError> {
    if returns.len() < 2 {
        return Err(MetricError::TooFewObservations {
            need: 2,
            have: returns.len(),
        });
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let expected_return = mean * TRADING_DAYS_PER_YEAR;
    let volatility = sample_std(returns) * TRADING_DAYS_PER_YEAR.sqrt();
    let downside_rms =
        (returns.iter().map(|&r| r.min(0.0).powi(2)).sum::<f64>() / n).sqrt();
    let downside_deviation = downside_rms * TRADING_DAYS_PER_YEAR.sqrt();

    let mut wealth: f64 = 1.0;
    let mut peak: f64 = 1.0;
    let mut max_drawdown: f64 = 0.0;
    for &r in returns {
        wealth *= 1.0 + r;
        peak = peak.max(wealth);
        max_drawdown = max_drawdown.max(1.0 - wealth / peak);
    }

    let positive: Vec<f64> = returns.iter().copied().filter(|&r| r > 0.0).collect();
    let negative: Vec<f64> = returns.iter().copied().filter(|&r| r < 0.0).collect();
    let hit_rate = positive.len() as f64 / n;
    let ap_al = if positive.is_empty() || negative.is_empty() {
        None
    } else {
        let avg_p = positive.iter().sum::<f64>() / positive.len() as f64;
        let avg_l = negative.iter().sum::<f64>() / negative.len() as f64;
        Some(avg_p / avg_l.abs())
    };

    let ratio = |num: f64, denom: f64| (denom > 0.0).then(|| num / denom);
    Ok(PerformanceSummary {
        expected_return,
        volatility,
        sharpe: ratio(expected_return, volatility),
        downside_deviation,
        max_drawdown,
        sortino: ratio(expected_return, downside_deviation),
        calmar: ratio(expected_return, max_drawdown),
        hit_rate,
        ap_al,
    })
}

/// Per-state slice of performance: day count, Sharpe, mean NDCG@3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeStats {
    pub n_days: usize,
    pub sharpe: Option<f64>,
    pub mean_ndcg3: Option<f64>,
}

/// Returns and ranking accuracy conditioned on the market state at the
/// decision date. States absent from the sample are reported as absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeBreakdown {
    pub normal: Option<RegimeStats>,
    pub risk_off: Option<RegimeStats>,
}

/// Partition daily observations by the market state at the decision date.
/// Dates not covered by the state series are excluded.
pub fn regime_breakdown(
    dates: &[chrono::NaiveDate],
    returns: &[f64],
    ndcg3: &[f64],
    states: &MarketStateSeries,
) -> Result<RegimeBreakdown, MetricError> {
    if dates.len() != returns.len() || dates.len() != ndcg3.len() {
        return Err(MetricError::LengthMismatch(format!(
            "{} dates, {} returns, {} ndcg entries",
            dates.len(),
            returns.len(),
            ndcg3.len()
        )));
    }
    let mut split: [(Vec<f64>, Vec<f64>); 2] = [(vec![], vec![]), (vec![], vec![])];
    for i in 0..dates.len() {
        match states.state(dates[i]) {
            Some(MarketState::Normal) => {
                split[0].0.push(returns[i]);
                split[0].1.push(ndcg3[i]);
            }
            Some(MarketState::RiskOff) => {
                split[1].0.push(returns[i]);
                split[1].1.push(ndcg3[i]);
            }
            None => {}
        }
    }
    let stats = |rets: &[f64], ndcgs: &[f64]| -> Option<RegimeStats> {
        if rets.is_empty() {
            return None;
        }
        let sharpe = if rets.len() >= 2 {
            let s = performance_summary(rets).ok()?;
            s.sharpe
        } else {
            None
        };
        let mean_ndcg3 = if ndcgs.is_empty() {
            None
        } else {
            Some(ndcgs.iter().sum::<f64>() / ndcgs.len() as f64)
        };
        Some(RegimeStats {
            n_days: rets.len(),
            sharpe,
            mean_ndcg3,
        })
    };
    Ok(RegimeBreakdown {
        normal: stats(&split[0].0, &split[0].1),
        risk_off: stats(&split[1].0, &split[1].1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::classify_market_state;
    use chrono::NaiveDate;

    #[test]
    fn ndcg_ideal_ordering_is_one() {
        let labels = [9u8, 7, 5, 3, 1];
        let scores = [5.0, 4.0, 3.0, 2.0, 1.0];
        let v = ndcg_at_k(&labels, &scores, 3, Side::Long).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        // short side: the lowest-scored items should carry the lowest labels,
        // which these descending scores arrange perfectly
        let v = ndcg_at_k(&labels, &scores, 3, Side::Short).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let worst = ndcg_at_k(&labels, &[1.0, 2.0, 3.0, 4.0, 5.0], 3, Side::Short).unwrap();
        assert!(worst < 1.0);
    }

    #[test]
    fn ndcg_all_equal_labels_is_one() {
        let labels = [4u8; 5];
        let scores = [0.1, 0.5, -0.3, 0.9, 0.0];
        assert_eq!(ndcg_at_k(&labels, &scores, 3, Side::Long).unwrap(), 1.0);
        // idcg zero: all labels 0 on the long side
        let zeros = [0u8; 4];
        assert_eq!(ndcg_at_k(&zeros, &scores[..4], 3, Side::Long).unwrap(), 1.0);
    }

    #[test]
    fn ndcg_too_short_errors() {
        assert!(matches!(
            ndcg_at_k(&[1, 2], &[0.0, 1.0], 3, Side::Long),
            Err(MetricError::ListTooShort { .. })
        ));
    }

    /// Brute-force oracle: DCG of the as-scored ordering divided by the
    /// maximum DCG over every permutation of the list.
    fn ndcg_oracle(labels: &[u8], scores: &[f64], k: usize, side: Side) -> f64 {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for slot in 0..n {
                    let mut q: Vec<usize> = p.iter().map(|&x| if x >= slot { x + 1 } else { x }).collect();
                    q.insert(0, slot);
                    // q[0] = slot, rest shifted
                    out.push(q);
                }
            }
            out
        }
        let rel: Vec<f64> = labels
            .iter()
            .map(|&l| match side {
                Side::Long => f64::from(l),
                Side::Short => 9.0 - f64::from(l),
            })
            .collect();
        let dcg_of = |order: &[usize]| -> f64 {
            order
                .iter()
                .take(k)
                .enumerate()
                .map(|(rank, &i)| gain(rel[i]) * discount(rank + 1))
                .sum()
        };
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&i, &j| {
            let cmp = match side {
                Side::Long => scores[j].partial_cmp(&scores[i]),
                Side::Short => scores[i].partial_cmp(&scores[j]),
            };
            cmp.unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
        });
        let dcg = dcg_of(&order);
        let best = permutations(rel.len())
            .into_iter()
            .map(|p| dcg_of(&p))
            .fold(f64::NEG_INFINITY, f64::max);
        if best == 0.0 {
            1.0
        } else {
            dcg / best
        }
    }

    #[test]
    fn ndcg_matches_permutation_oracle() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for trial in 0..300 {
            let n = rng.gen_range(3..=6);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=9)).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let side = if trial % 2 == 0 { Side::Long } else { Side::Short };
            let got = ndcg_at_k(&labels, &scores, 3, side).unwrap();
            let want = ndcg_oracle(&labels, &scores, 3, side);
            assert!(
                (got - want).abs() < 1e-12,
                "trial {trial}: got {got}, oracle {want}, labels {labels:?}, scores {scores:?}"
            );
        }
    }

    #[test]
    fn ndcg_reversed_four_item_list_is_oracle_minimum() {
        let labels = [3u8, 2, 1, 0];
        let reversed = [0.0, 1.0, 2.0, 3.0]; // worst possible long-side scores
        let got = ndcg_at_k(&labels, &reversed, 3, Side::Long).unwrap();
        let want = ndcg_oracle(&labels, &reversed, 3, Side::Long);
        assert!((got - want).abs() < 1e-12);
        // every other score assignment does at least as well
        let perms: [[f64; 4]; 3] = [
            [3.0, 2.0, 1.0, 0.0],
            [2.0, 3.0, 0.0, 1.0],
            [1.0, 0.0, 3.0, 2.0],
        ];
        for scores in perms {
            assert!(ndcg_at_k(&labels, &scores, 3, Side::Long).unwrap() >= got - 1e-12);
        }
    }

    #[test]
    fn selection_ndcg_agrees_with_topk_scoring() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.gen_range(4..10);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=9)).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            for side in [Side::Long, Side::Short] {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&i, &j| {
                    let cmp = match side {
                        Side::Long => scores[j].partial_cmp(&scores[i]),
                        Side::Short => scores[i].partial_cmp(&scores[j]),
                    };
                    cmp.unwrap().then(i.cmp(&j))
                });
                let a = ndcg_at_k(&labels, &scores, 3, side).unwrap();
                let b = ndcg_of_selection(&labels, &order[..3], side).unwrap();
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ndcg_invariant_to_monotone_score_transforms() {
        let labels = [5u8, 0, 9, 3, 7];
        let scores = [0.2, -0.5, 1.4, 0.0, 0.9];
        let transformed: Vec<f64> = scores.iter().map(|&s| (3.0f64 * s).exp()).collect();
        let a = ndcg_at_k(&labels, &scores, 3, Side::Long).unwrap();
        let b = ndcg_at_k(&labels, &transformed, 3, Side::Long).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn summary_constant_positive_returns() {
        // a dyadic constant keeps the sample variance exactly zero
        let returns = vec![0.0009765625; 30];
        let s = performance_summary(&returns).unwrap();
        assert_eq!(s.hit_rate, 1.0);
        assert_eq!(s.max_drawdown, 0.0);
        assert_eq!(s.calmar, None);
        assert_eq!(s.sharpe, None); // zero volatility
        assert_eq!(s.ap_al, None); // no losses
    }

    #[test]
    fn summary_symmetric_returns_ap_al_one() {
        let s = performance_summary(&[0.01, -0.01]).unwrap();
        assert_eq!(s.ap_al, Some(1.0));
        assert_eq!(s.hit_rate, 0.5);
    }

    #[test]
    fn summary_matches_independent_recomputation() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(252);
        let returns: Vec<f64> = (0..252).map(|_| (rng.gen::<f64>() - 0.49) * 0.02).collect();
        let s = performance_summary(&returns).unwrap();

        // spreadsheet-style recomputation
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let er = mean * 261.0;
        let sd = {
            let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
            var.sqrt() * 261f64.sqrt()
        };
        let dd = (returns.iter().map(|&r| if r < 0.0 { r * r } else { 0.0 }).sum::<f64>() / n)
            .sqrt()
            * 261f64.sqrt();
        let mut wealth = 1.0;
        let mut peak = 1.0f64;
        let mut mdd = 0.0f64;
        for &r in &returns {
            wealth *= 1.0 + r;
            peak = peak.max(wealth);
            mdd = mdd.max(1.0 - wealth / peak);
        }
        let pos: Vec<f64> = returns.iter().copied().filter(|&r| r > 0.0).collect();
        let neg: Vec<f64> = returns.iter().copied().filter(|&r| r < 0.0).collect();
        assert!((s.expected_return - er).abs() < 1e-10);
        assert!((s.volatility - sd).abs() < 1e-10);
        assert!((s.sharpe.unwrap() - er / sd).abs() < 1e-10);
        assert!((s.downside_deviation - dd).abs() < 1e-10);
        assert!((s.max_drawdown - mdd).abs() < 1e-10);
        assert!((s.sortino.unwrap() - er / dd).abs() < 1e-10);
        assert!((s.calmar.unwrap() - er / mdd).abs() < 1e-10);
        assert!((s.hit_rate - pos.len() as f64 / n).abs() < 1e-10);
        let apal = (pos.iter().sum::<f64>() / pos.len() as f64)
            / (neg.iter().sum::<f64>() / neg.len() as f64).abs();
        assert!((s.ap_al.unwrap() - apal).abs() < 1e-10);
    }

    #[test]
    fn summary_scaling_equivariance() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let returns: Vec<f64> = (0..100).map(|_| (rng.gen::<f64>() - 0.5) * 0.02).collect();
        let scaled: Vec<f64> = returns.iter().map(|r| r * 3.0).collect();
        let a = performance_summary(&returns).unwrap();
        let b = performance_summary(&scaled).unwrap();
        assert!((b.expected_return - 3.0 * a.expected_return).abs() < 1e-12);
        assert!((b.volatility - 3.0 * a.volatility).abs() < 1e-12);
        assert!((b.downside_deviation - 3.0 * a.downside_deviation).abs() < 1e-12);
        assert!((b.sharpe.unwrap() - a.sharpe.unwrap()).abs() < 1e-12);
        assert!((b.sortino.unwrap() - a.sortino.unwrap()).abs() < 1e-12);
        assert_eq!(a.hit_rate, b.hit_rate);
    }

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn states_with_one_spike(n: usize, spike_at: usize) -> (Vec<NaiveDate>, MarketStateSeries) {
        let dates: Vec<NaiveDate> = (0..n as u64)
            .map(|i| d("2020-01-01") + chrono::Days::new(i))
            .collect();
        let mut vix = vec![20.0; n];
        vix[spike_at] = 30.0;
        let states = classify_market_state(&dates, &vix).unwrap();
        (dates, states)
    }

    #[test]
    fn regime_all_normal_equals_unconditional() {
        let (dates, states) = states_with_one_spike(100, 99);
        // use only days before the spike
        let days = &dates[60..90];
        let returns: Vec<f64> = (0..30).map(|i| 0.001 * (i as f64 - 15.0)).collect();
        let ndcg = vec![0.6; 30];
        let b = regime_breakdown(days, &returns, &ndcg, &states).unwrap();
        let normal = b.normal.unwrap();
        assert!(b.risk_off.is_none());
        assert_eq!(normal.n_days, 30);
        let s = performance_summary(&returns).unwrap();
        assert_eq!(normal.sharpe, s.sharpe);
        assert!((normal.mean_ndcg3.unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn regime_partitions_are_exhaustive_and_hand_checked() {
        let (dates, states) = states_with_one_spike(100, 80);
        let days = vec![dates[79], dates[80], dates[81], dates[82]];
        let returns = vec![0.01, -0.02, 0.005, 0.0];
        let ndcg = vec![0.5, 0.9, 0.6, 0.7];
        let b = regime_breakdown(&days, &returns, &ndcg, &states).unwrap();
        let normal = b.normal.unwrap();
        let risk_off = b.risk_off.unwrap();
        assert_eq!(normal.n_days + risk_off.n_days, 4);
        assert_eq!(risk_off.n_days, 1);
        assert_eq!(risk_off.sharpe, None); // single observation
        assert!((risk_off.mean_ndcg3.unwrap() - 0.9).abs() < 1e-15);
        let expect = performance_summary(&[0.01, 0.005, 0.0]).unwrap();
        assert_eq!(normal.sharpe, expect.sharpe);
    }
}
