//! Predictor construction: the 10-dimensional feature vector per
//! (date, asset) and the next-period decile label.
//!
//! Features at date `t` use data up to and including `t` only; the label
//! ranks the move from `t` to `t+1` across the day's cross-section. Rows
//! exist only where every feature component and the label are computable.
//!
//! Division conventions for the doubly-standardized quantities: `0/0 = 0`
//! (a flat series is a zero signal), while `x/0` with `x != 0` marks the
//! feature missing for that (date, asset).

use chrono::NaiveDate;
use thiserror::Error;

use crate::marketdata::{PricePanel, ReturnPanel};

pub const FEATURE_DIM: usize = 10;

/// Column names, in row order, for exports and reports.
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "ret_1m",
    "norm_ret_1",
    "norm_ret_3",
    "norm_ret_5",
    "norm_ret_10",
    "norm_ret_21",
    "macd_8_24",
    "macd_16_48",
    "macd_32_96",
    "macd_final",
];

/// Trading days in "one month".
pub const MONTH_DAYS: usize = 21;

/// Horizons (days) of the volatility-normalized returns.
pub const NORM_RET_HORIZONS: [usize; 5] = [1, 3, 5, 10, 21];

/// Short/long EWMA half-life pairs of the MACD indicators.
pub const MACD_PAIRS: [(f64, f64); 3] = [(8.0, 24.0), (16.0, 48.0), (32.0, 96.0)];

/// Window (observations) of the rolling price standard deviation.
pub const MACD_PRICE_STD_WINDOW: usize = 63;

/// Window (observations) of the rolling signal standard deviation.
pub const MACD_SIGNAL_STD_WINDOW: usize = 252;

/// Minimum non-missing returns before an asset enters the cross-section.
pub const MIN_RETURN_HISTORY: usize = 63;

pub const N_DECILES: usize = 10;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("need at least {need} assets at {date}, have {have}")]
    InsufficientAssets {
        date: NaiveDate,
        need: usize,
        have: usize,
    },
    #[error("feature frame is empty (panel too short for warm-up?)")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

/// What the decile label ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LabelTarget {
    /// Next-period return divided by the asset's ex-ante daily volatility.
    VolScaled,
    /// Next-period raw return.
    Raw,
}

/// One (date, asset) observation: raw features, decile label, and the
/// realized next-period quantities the label was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub date: NaiveDate,
    /// Index into the price panel's date axis.
    pub date_idx: usize,
    /// The trading date the label's return arrives on (t+1).
    pub next_date: NaiveDate,
    pub asset: String,
    pub asset_idx: usize,
    pub features: [f64; FEATURE_DIM],
    /// Decile label in 0..=9; 9 is the best next-period outcome.
    pub label: u8,
    /// Raw next-period simple return (what a position realizes).
    pub next_return: f64,
    /// Winsorized next-period return scaled by ex-ante daily volatility.
    pub next_vol_scaled_return: f64,
    /// Ex-ante daily volatility at the decision date.
    pub sigma: f64,
}

/// All feature rows, sorted by (date, asset); one "list" per date.
#[derive(Debug, Clone, Default)]
pub struct FeatureFrame {
    rows: Vec<FeatureRow>,
}

impl FeatureFrame {
    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// Distinct dates carrying rows, ascending.
    pub fn dates(&self) -> Vec<NaiveDate> {
        let mut out: Vec<NaiveDate> = self.rows.iter().map(|r| r.date).collect();
        out.dedup();
        out
    }

    /// Rows for one date (a contiguous slice, since rows are date-sorted).
    pub fn date_slice(&self, date: NaiveDate) -> &[FeatureRow] {
        let start = self.rows.partition_point(|r| r.date < date);
        let end = self.rows.partition_point(|r| r.date <= date);
        &self.rows[start..end]
    }

    /// Rows grouped per date: one (date, contiguous slice) pair per
    /// rebalance date, ascending.
    pub fn date_lists(&self) -> Vec<(NaiveDate, &[FeatureRow])> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.rows.len() {
            let date = self.rows[start].date;
            let end = self.rows.partition_point(|r| r.date <= date);
            out.push((date, &self.rows[start..end]));
            start = end;
        }
        out
    }

    /// Rows with dates in `[from, to]`, as a new frame.
    pub fn between(&self, from: NaiveDate, to: NaiveDate) -> FeatureFrame {
        FeatureFrame {
            rows: self
                .rows
                .iter()
                .filter(|r| r.date >= from && r.date <= to)
                .cloned()
                .collect(),
        }
    }

    /// Rows fully contained in a training window: the decision date is in
    /// range and the label's arrival date does not leave it, so training
    /// never touches data beyond `to`.
    pub fn train_window(&self, from: NaiveDate, to: NaiveDate) -> FeatureFrame {
        FeatureFrame {
            rows: self
                .rows
                .iter()
                .filter(|r| r.date >= from && r.next_date <= to)
                .cloned()
                .collect(),
        }
    }

    /// Drop every row of one asset; labels are untouched (filtering is a
    /// view operation, not a relabeling).
    pub fn without_asset(&self, asset: &str) -> FeatureFrame {
        FeatureFrame {
            rows: self.rows.iter().filter(|r| r.asset != asset).cloned().collect(),
        }
    }

    pub fn require_nonempty(self) -> Result<Self, FeatureError> {
        if self.rows.is_empty() {
            return Err(FeatureError::Empty);
        }
        Ok(self)
    }
}

/// Per-feature affine normalization fitted on a training window and applied
/// unchanged elsewhere. Population statistics; a zero-variance feature is
/// centered and left unscaled.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ZScore {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
}

impl ZScore {
    pub fn identity() -> Self {
        ZScore {
            mean: [0.0; FEATURE_DIM],
            std: [1.0; FEATURE_DIM],
        }
    }

    pub fn fit(rows: &[FeatureRow]) -> Self {
        assert!(!rows.is_empty(), "cannot fit z-score on empty rows");
        let n = rows.len() as f64;
        let mut mean = [0.0; FEATURE_DIM];
        let mut std = [0.0; FEATURE_DIM];
        for row in rows {
            for (k, &f) in row.features.iter().enumerate() {
                mean[k] += f;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for row in rows {
            for (k, &f) in row.features.iter().enumerate() {
                std[k] += (f - mean[k]) * (f - mean[k]);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        ZScore { mean, std }
    }

    pub fn apply(&self, features: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        for k in 0..FEATURE_DIM {
            out[k] = (features[k] - self.mean[k]) / self.std[k];
        }
        out
    }
}

/// Return over the previous 21 trading days: `p_t / p_{t-21} - 1`.
/// Only the two endpoint prices must be present.
pub fn raw_monthly_return(panel: &PricePanel, date_idx: usize, asset_idx: usize) -> Option<f64> {
    if date_idx < MONTH_DAYS {
        return None;
    }
    let p0 = panel.rate(date_idx - MONTH_DAYS, asset_idx)?;
    let p1 = panel.rate(date_idx, asset_idx)?;
    Some(p1 / p0 - 1.0)
}

/// `(p_t/p_{t-h} - 1) / (sigma * sqrt(h))` with the division convention
/// described at module level.
fn normalized_return(raw: f64, sigma: f64, horizon: usize) -> Option<f64> {
    let denom = sigma * (horizon as f64).sqrt();
    safe_div(raw, denom)
}

fn safe_div(num: f64, denom: f64) -> Option<f64> {
    if denom != 0.0 {
        Some(num / denom)
    } else if num == 0.0 {
        Some(0.0)
    } else {
        None
    }
}

/// Returns over 1/3/5/10/21 days standardized by daily volatility and
/// rescaled to the horizon. `sigma` is the ex-ante daily EWM volatility at
/// the decision date.
pub fn normalized_returns(
    panel: &PricePanel,
    sigma: f64,
    date_idx: usize,
    asset_idx: usize,
) -> Option<[f64; 5]> {
    if date_idx < MONTH_DAYS {
        return None;
    }
    let p_now = panel.rate(date_idx, asset_idx)?;
    let mut out = [0.0; 5];
    for (k, &h) in NORM_RET_HORIZONS.iter().enumerate() {
        let p_past = panel.rate(date_idx - h, asset_idx)?;
        out[k] = normalized_return(p_now / p_past - 1.0, sigma, h)?;
    }
    Some(out)
}

/// Bell-shaped MACD response `u * exp(-u^2/4) / 0.89`.
pub fn macd_response(u: f64) -> f64 {
    u * (-u * u / 4.0).exp() / 0.89
}

/// Per-asset MACD series over the asset's observed prices. Windows count
/// observations, so sparse histories warm up later in calendar time.
#[derive(Debug)]
pub struct MacdSeries {
    /// date index of each observation
    date_indices: Vec<usize>,
    /// per observation: the three doubly-standardized signals, if defined
    signals: Vec<Option<[f64; 3]>>,
}

impl MacdSeries {
    pub fn compute(panel: &PricePanel, asset_idx: usize) -> Self {
        let mut date_indices = Vec::new();
        let mut prices = Vec::new();
        for i in 0..panel.n_dates() {
            if let Some(p) = panel.rate(i, asset_idx) {
                date_indices.push(i);
                prices.push(p);
            }
        }
        let n = prices.len();
        let mut per_pair: Vec<Vec<Option<f64>>> = Vec::with_capacity(MACD_PAIRS.len());
        for &(short_hl, long_hl) in &MACD_PAIRS {
            per_pair.push(macd_signal(&prices, short_hl, long_hl));
        }
        let mut signals = Vec::with_capacity(n);
        for k in 0..n {
            let trio = [per_pair[0][k], per_pair[1][k], per_pair[2][k]];
            signals.push(match trio {
                [Some(a), Some(b), Some(c)] => Some([a, b, c]),
                _ => None,
            });
        }
        MacdSeries {
            date_indices,
            signals,
        }
    }

    /// The three constituent signals plus the response-averaged final
    /// indicator at a panel date index, when defined.
    pub fn at_date(&self, date_idx: usize) -> Option<[f64; 4]> {
        let k = self.date_indices.binary_search(&date_idx).ok()?;
        let [a, b, c] = self.signals[k]?;
        let fin = (macd_response(a) + macd_response(b) + macd_response(c)) / 3.0;
        Some([a, b, c, fin])
    }
}

/// Doubly-standardized MACD for one half-life pair:
/// `m = EWMA_S(p) - EWMA_L(p)`, `q = m / std_63(p)`, `y = q / std_252(q)`.
/// The EWMA decay is `1 - 1/HL`, seeded with the first price.
fn macd_signal(prices: &[f64], short_hl: f64, long_hl: f64) -> Vec<Option<f64>> {
    let n = prices.len();
    let lambda_s = 1.0 - 1.0 / short_hl;
    let lambda_l = 1.0 - 1.0 / long_hl;
    let mut q = vec![None; n];
    let mut out = vec![None; n];
    if n == 0 {
        return out;
    }
    let (mut ewma_s, mut ewma_l) = (prices[0], prices[0]);
    // q history for the 252-window std; only defined entries are windowed
    for k in 0..n {
        if k > 0 {
            ewma_s = lambda_s * ewma_s + (1.0 - lambda_s) * prices[k];
            ewma_l = lambda_l * ewma_l + (1.0 - lambda_l) * prices[k];
        }
        let m = ewma_s - ewma_l;
        if k + 1 >= MACD_PRICE_STD_WINDOW {
            let std_p = sample_std(&prices[k + 1 - MACD_PRICE_STD_WINDOW..=k]);
            q[k] = safe_div(m, std_p);
        }
        if k + 1 >= MACD_PRICE_STD_WINDOW + MACD_SIGNAL_STD_WINDOW - 1 {
            let window = &q[k + 1 - MACD_SIGNAL_STD_WINDOW..=k];
            if window.iter().all(|v| v.is_some()) {
                let vals: Vec<f64> = window.iter().map(|v| v.unwrap()).collect();
                let std_q = sample_std(&vals);
                out[k] = q[k].and_then(|qk| safe_div(qk, std_q));
            }
        }
    }
    out
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    var.max(0.0).sqrt()
}

/// Sort ascending by target (ties by asset index, which follows asset
/// identifier order) and split into 10 contiguous bins as equal as
/// possible; the remainder goes to the lowest bins. Label 9 is best.
pub fn decile_labels(
    date: NaiveDate,
    targets: &[(usize, f64)],
) -> Result<Vec<(usize, u8)>, FeatureError> {
    let n = targets.len();
    if n < N_DECILES {
        return Err(FeatureError::InsufficientAssets {
            date,
            need: N_DECILES,
            have: n,
        });
    }
    let mut order: Vec<(usize, f64)> = targets.to_vec();
    order.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let base = n / N_DECILES;
    let rem = n % N_DECILES;
    let mut out = Vec::with_capacity(n);
    let mut pos = 0;
    for bin in 0..N_DECILES {
        let size = base + usize::from(bin < rem);
        for _ in 0..size {
            out.push((order[pos].0, bin as u8));
            pos += 1;
        }
    }
    Ok(out)
}

/// Build the full frame: one row per (date, asset) where all ten features,
/// the tradeability gate, and the next-period label exist. The result may
/// be empty when the panel is shorter than the feature warm-up.
pub fn build_feature_frame(
    panel: &PricePanel,
    returns: &ReturnPanel,
    target: LabelTarget,
) -> FeatureFrame {
    let n_assets = panel.n_assets();
    let macd: Vec<MacdSeries> = (0..n_assets)
        .map(|a| MacdSeries::compute(panel, a))
        .collect();
    let mut rows = Vec::new();
    // last decision date needs a next-period return: price date D-2 at most
    for date_idx in 1..panel.n_dates().saturating_sub(1) {
        let ret_idx = date_idx - 1; // returns arriving at `date_idx`
        let next_ret_idx = date_idx; // returns arriving at `date_idx + 1`
        let mut candidates: Vec<(usize, [f64; FEATURE_DIM], f64, f64, f64)> = Vec::new();
        for a in 0..n_assets {
            let Some(sigma) = returns.vol(ret_idx, a) else {
                continue;
            };
            if returns.history_len(ret_idx, a) < MIN_RETURN_HISTORY {
                continue;
            }
            let Some(ret_1m) = raw_monthly_return(panel, date_idx, a) else {
                continue;
            };
            let Some(norm) = normalized_returns(panel, sigma, date_idx, a) else {
                continue;
            };
            let Some(macd4) = macd[a].at_date(date_idx) else {
                continue;
            };
            let Some(next_raw) = returns.ret(next_ret_idx, a) else {
                continue;
            };
            let Some(next_clean) = returns.clean_ret(next_ret_idx, a) else {
                continue;
            };
            let Some(next_scaled) = safe_div(next_clean, sigma) else {
                continue;
            };
            let features = [
                ret_1m, norm[0], norm[1], norm[2], norm[3], norm[4], macd4[0], macd4[1],
                macd4[2], macd4[3],
            ];
            candidates.push((a, features, next_raw, next_scaled, sigma));
        }
        let date = panel.dates()[date_idx];
        let targets: Vec<(usize, f64)> = candidates
            .iter()
            .map(|&(a, _, raw, scaled, _)| {
                (
                    a,
                    match target {
                        LabelTarget::VolScaled => scaled,
                        LabelTarget::Raw => raw,
                    },
                )
            })
            .collect();
        let Ok(labels) = decile_labels(date, &targets) else {
            continue; // fewer than 10 labelable assets: no list that day
        };
        let mut label_of = vec![0u8; n_assets];
        for &(a, l) in &labels {
            label_of[a] = l;
        }
        for (a, features, next_raw, next_scaled, sigma) in candidates {
            rows.push(FeatureRow {
                date,
                date_idx,
                next_date: panel.dates()[date_idx + 1],
                asset: panel.assets()[a].clone(),
                asset_idx: a,
                features,
                label: label_of[a],
                next_return: next_raw,
                next_vol_scaled_return: next_scaled,
                sigma,
            });
        }
    }
    FeatureFrame { rows }
}
