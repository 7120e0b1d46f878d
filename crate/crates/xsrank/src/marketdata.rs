//! Price panels, daily returns, EWM volatility, and market-state labels.
//!
//! Loading is strict: duplicate (date, symbol) rows, non-positive rates, and
//! unparseable rows are data errors, not silent fixes. Missing prices stay
//! missing through every derived quantity — an asset absent at `t` simply
//! drops out of that day's cross-section. All estimators are causal: the
//! value at `t` depends only on observations at or before `t`.

use std::collections::BTreeMap;
use std::io::Read;

use chrono::NaiveDate;
use thiserror::Error;

/// Trading days per year used everywhere a quantity is annualized
/// (FX convention: ~261 weekdays).
pub const TRADING_DAYS_PER_YEAR: f64 = 261.0;

/// Span (days) of the EWM volatility estimator.
pub const VOL_SPAN: usize = 63;

/// Span (days) of the winsorization EWM statistics.
pub const WINSOR_SPAN: usize = 252;

/// Winsorization width in EWM standard deviations.
pub const WINSOR_SIGMAS: f64 = 5.0;

/// Risk-off threshold: VIX points above its 60-day moving average.
pub const RISK_OFF_THRESHOLD: f64 = 5.0;

/// Window length of the risk-off moving average.
pub const RISK_OFF_WINDOW: usize = 60;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("duplicate entry for {date} {symbol}")]
    Duplicate { date: NaiveDate, symbol: String },
    #[error("non-positive rate {rate} for {date} {symbol}")]
    NonPositiveRate {
        date: NaiveDate,
        symbol: String,
        rate: f64,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Date-sorted matrix of USD-quoted rates, one column per currency pair.
/// Cells may be missing; present rates are strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    rates: Vec<Option<f64>>, // date-major
}

impl PricePanel {
    /// Assemble a panel from (date, symbol, rate) rows. Dates and assets are
    /// sorted; duplicates and non-positive rates are rejected.
    pub fn from_rows(rows: Vec<(NaiveDate, String, f64)>) -> Result<Self, DataError> {
        let mut cells: BTreeMap<(NaiveDate, String), f64> = BTreeMap::new();
        for (date, symbol, rate) in rows {
            if rate <= 0.0 || !rate.is_finite() {
                return Err(DataError::NonPositiveRate { date, symbol, rate });
            }
            if cells.insert((date, symbol.clone()), rate).is_some() {
                return Err(DataError::Duplicate { date, symbol });
            }
        }
        if cells.is_empty() {
            return Err(DataError::Invalid("empty price panel".into()));
        }
        let mut dates: Vec<NaiveDate> = cells.keys().map(|(d, _)| *d).collect();
        dates.dedup();
        let mut assets: Vec<String> = cells.keys().map(|(_, s)| s.clone()).collect();
        assets.sort();
        assets.dedup();
        let mut rates = vec![None; dates.len() * assets.len()];
        for ((date, symbol), rate) in cells {
            let di = dates.binary_search(&date).expect("date present");
            let ai = assets.binary_search(&symbol).expect("asset present");
            rates[di * assets.len() + ai] = Some(rate);
        }
        Ok(PricePanel {
            dates,
            assets,
            rates,
        })
    }

    /// Parse `date,symbol,rate` CSV (ISO-8601 dates, UTF-8).
    pub fn from_csv(reader: impl Read) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        {
            let headers = rdr.headers().map_err(csv_err)?;
            let got: Vec<&str> = headers.iter().map(str::trim).collect();
            if got != ["date", "symbol", "rate"] {
                return Err(DataError::Parse {
                    line: 1,
                    msg: format!("expected header date,symbol,rate, found {}", got.join(",")),
                });
            }
        }
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(csv_err)?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 3 {
                return Err(DataError::Parse {
                    line,
                    msg: format!("expected 3 fields, found {}", record.len()),
                });
            }
            let date = NaiveDate::parse_from_str(record[0].trim(), "%Y-%m-%d").map_err(|e| {
                DataError::Parse {
                    line,
                    msg: format!("bad date '{}': {e}", &record[0]),
                }
            })?;
            let rate: f64 = record[2].trim().parse().map_err(|e| DataError::Parse {
                line,
                msg: format!("bad rate '{}': {e}", &record[2]),
            })?;
            rows.push((date, record[1].trim().to_string(), rate));
        }
        Self::from_rows(rows)
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn rate(&self, date_idx: usize, asset_idx: usize) -> Option<f64> {
        self.rates[date_idx * self.assets.len() + asset_idx]
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }
}

fn csv_err(e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    DataError::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Returns and ex-ante volatility derived from a [`PricePanel`].
///
/// Row `i` covers the move from price date `i` to `i+1` and is indexed by
/// the arrival date. `returns` holds raw simple returns (what a position
/// realizes); `clean_returns` holds the winsorized series that feeds every
/// estimator and model target; `vol` is the EWM(span 63) standard deviation
/// of the winsorized returns, in daily units.
#[derive(Debug, Clone)]
pub struct ReturnPanel {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    returns: Vec<Option<f64>>,
    clean_returns: Vec<Option<f64>>,
    vol: Vec<Option<f64>>,
}

impl ReturnPanel {
    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn ret(&self, date_idx: usize, asset_idx: usize) -> Option<f64> {
        self.returns[date_idx * self.assets.len() + asset_idx]
    }

    pub fn clean_ret(&self, date_idx: usize, asset_idx: usize) -> Option<f64> {
        self.clean_returns[date_idx * self.assets.len() + asset_idx]
    }

    /// Daily EWM volatility at `date_idx` (uses returns up to and including it).
    pub fn vol(&self, date_idx: usize, asset_idx: usize) -> Option<f64> {
        self.vol[date_idx * self.assets.len() + asset_idx]
    }

    /// Count of non-missing winsorized returns for an asset up to and
    /// including `date_idx`; gates tradeability downstream.
    pub fn history_len(&self, date_idx: usize, asset_idx: usize) -> usize {
        (0..=date_idx)
            .filter(|&i| self.clean_returns[i * self.assets.len() + asset_idx].is_some())
            .count()
    }
}

/// Simple returns `p_t / p_{t-1} - 1` per asset, plus winsorized returns and
/// EWM volatility. A return is missing when either endpoint price is.
pub fn daily_returns(panel: &PricePanel) -> Result<ReturnPanel, DataError> {
    if panel.n_dates() < 2 {
        return Err(DataError::Invalid(
            "need at least two dates to form returns".into(),
        ));
    }
    let n_dates = panel.n_dates() - 1;
    let n_assets = panel.n_assets();
    let mut returns = vec![None; n_dates * n_assets];
    for a in 0..n_assets {
        for i in 0..n_dates {
            if let (Some(p0), Some(p1)) = (panel.rate(i, a), panel.rate(i + 1, a)) {
                returns[i * n_assets + a] = Some(p1 / p0 - 1.0);
            }
        }
    }
    let mut clean_returns = vec![None; n_dates * n_assets];
    let mut vol = vec![None; n_dates * n_assets];
    for a in 0..n_assets {
        let series: Vec<Option<f64>> = (0..n_dates).map(|i| returns[i * n_assets + a]).collect();
        let w = winsorize(&series);
        let v = ewm_volatility(&w, VOL_SPAN);
        for i in 0..n_dates {
            clean_returns[i * n_assets + a] = w[i];
            vol[i * n_assets + a] = v[i];
        }
    }
    Ok(ReturnPanel {
        dates: panel.dates()[1..].to_vec(),
        assets: panel.assets().to_vec(),
        returns,
        clean_returns,
        vol,
    })
}

/// Streaming exponentially weighted mean/std with normalized weights
/// (weight `(1-alpha)^age` per observation) and reliability-weight
/// debiasing, matching the usual `adjust=True, bias=False` convention.
///
/// Moments accumulate mean-centered (West's incremental algorithm), so a
/// constant series reports exactly zero standard deviation.
#[derive(Debug, Clone)]
pub struct EwmStats {
    alpha: f64,
    sum_w: f64,
    sum_w2: f64,
    mean: f64,
    // Σ w_i (x_i - mean)²
    centered: f64,
    count: usize,
}

impl EwmStats {
    pub fn with_span(span: usize) -> Self {
        assert!(span >= 1, "span must be positive");
        EwmStats {
            alpha: 2.0 / (span as f64 + 1.0),
            sum_w: 0.0,
            sum_w2: 0.0,
            mean: 0.0,
            centered: 0.0,
            count: 0,
        }
    }

    pub fn push(&mut self, x: f64) {
        let decay = 1.0 - self.alpha;
        // decaying all existing weights leaves the mean untouched and scales
        // the centered moment linearly
        let prev_w = self.sum_w * decay;
        self.sum_w2 = self.sum_w2 * decay * decay + 1.0;
        self.sum_w = prev_w + 1.0;
        self.centered *= decay;
        if self.count == 0 {
            self.mean = x;
        } else {
            let delta = x - self.mean;
            self.mean += delta / self.sum_w;
            self.centered += delta * (x - self.mean);
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    /// Debiased weighted standard deviation; needs at least two observations.
    pub fn std(&self) -> Option<f64> {
        if self.count < 2 {
            return None;
        }
        let denom = self.sum_w * self.sum_w - self.sum_w2;
        if denom <= 0.0 {
            return None;
        }
        let var = self.centered.max(0.0) * self.sum_w / denom;
        Some(var.sqrt())
    }
}

/// Cap and floor a return series at `mean ± 5 std` of the EWM statistics
/// (252-day span) of the *already winsorized* values strictly before each
/// point, so the operation is causal and a fixed point of itself. The first
/// two observed values pass through (no std exists yet); missing entries
/// stay missing and do not advance the statistics.
pub fn winsorize(series: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut stats = EwmStats::with_span(WINSOR_SPAN);
    let mut out = Vec::with_capacity(series.len());
    for &obs in series {
        match obs {
            None => out.push(None),
            Some(x) => {
                let clipped = match (stats.mean(), stats.std()) {
                    (Some(mean), Some(std)) => {
                        x.clamp(mean - WINSOR_SIGMAS * std, mean + WINSOR_SIGMAS * std)
                    }
                    _ => x,
                };
                stats.push(clipped);
                out.push(Some(clipped));
            }
        }
    }
    out
}

/// EWM standard deviation over observations up to and including each point,
/// in the input's (daily) units. Missing entries yield missing estimates and
/// do not advance the weights; a lone first observation reports 0.
pub fn ewm_volatility(series: &[Option<f64>], span: usize) -> Vec<Option<f64>> {
    let mut stats = EwmStats::with_span(span);
    let mut out = Vec::with_capacity(series.len());
    for &obs in series {
        match obs {
            None => out.push(None),
            Some(x) => {
                stats.push(x);
                out.push(Some(stats.std().unwrap_or(0.0)));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MarketState {
    Normal,
    RiskOff,
}

/// Market state per date, defined only once the 60-day moving average
/// exists; earlier dates are absent rather than defaulted.
#[derive(Debug, Clone)]
pub struct MarketStateSeries {
    dates: Vec<NaiveDate>,
    states: Vec<MarketState>,
}

impl MarketStateSeries {
    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn state(&self, date: NaiveDate) -> Option<MarketState> {
        self.dates.binary_search(&date).ok().map(|i| self.states[i])
    }

    pub fn risk_off_fraction(&self) -> f64 {
        if self.states.is_empty() {
            return 0.0;
        }
        self.states
            .iter()
            .filter(|s| **s == MarketState::RiskOff)
            .count() as f64
            / self.states.len() as f64
    }
}

/// Risk-off at `t` iff `vix_t >= ma60_t + 5.0`, with the simple 60-day
/// moving average taken over the window ending at (and including) `t`.
pub fn classify_market_state(
    dates: &[NaiveDate],
    vix: &[f64],
) -> Result<MarketStateSeries, DataError> {
    if dates.len() != vix.len() {
        return Err(DataError::Invalid(
            "vix dates and values differ in length".into(),
        ));
    }
    if vix.len() < RISK_OFF_WINDOW {
        return Err(DataError::Invalid(format!(
            "need at least {RISK_OFF_WINDOW} VIX observations, have {}",
            vix.len()
        )));
    }
    let mut out_dates = Vec::with_capacity(vix.len() - RISK_OFF_WINDOW + 1);
    let mut states = Vec::with_capacity(vix.len() - RISK_OFF_WINDOW + 1);
    let mut window_sum: f64 = vix[..RISK_OFF_WINDOW].iter().sum();
    for t in RISK_OFF_WINDOW - 1..vix.len() {
        if t >= RISK_OFF_WINDOW {
            window_sum += vix[t] - vix[t - RISK_OFF_WINDOW];
        }
        let ma = window_sum / RISK_OFF_WINDOW as f64;
        out_dates.push(dates[t]);
        states.push(if vix[t] >= ma + RISK_OFF_THRESHOLD {
            MarketState::RiskOff
        } else {
            MarketState::Normal
        });
    }
    Ok(MarketStateSeries {
        dates: out_dates,
        states,
    })
}

/// Parse `date,close` CSV into aligned date/value vectors.
pub fn load_vix_csv(reader: impl Read) -> Result<(Vec<NaiveDate>, Vec<f64>), DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    {
        let headers = rdr.headers().map_err(csv_err)?;
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != ["date", "close"] {
            return Err(DataError::Parse {
                line: 1,
                msg: format!("expected header date,close, found {}", got.join(",")),
            });
        }
    }
    let mut rows: BTreeMap<NaiveDate, f64> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let date = NaiveDate::parse_from_str(record[0].trim(), "%Y-%m-%d").map_err(|e| {
            DataError::Parse {
                line,
                msg: format!("bad date '{}': {e}", &record[0]),
            }
        })?;
        let close: f64 = record[1].trim().parse().map_err(|e| DataError::Parse {
            line,
            msg: format!("bad close '{}': {e}", &record[1]),
        })?;
        if rows.insert(date, close).is_some() {
            return Err(DataError::Duplicate {
                date,
                symbol: "VIX".into(),
            });
        }
    }
    Ok(rows.into_iter().unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn loads_two_row_panel() {
        let csv = "date,symbol,rate\n2020-01-02,EUR,1.10\n2020-01-03,EUR,1.11\n";
        let panel = PricePanel::from_csv(csv.as_bytes()).unwrap();
        assert_eq!(panel.n_dates(), 2);
        assert_eq!(panel.n_assets(), 1);
        assert_eq!(panel.rate(0, 0), Some(1.10));
    }

    #[test]
    fn duplicate_cell_is_rejected() {
        let csv = "date,symbol,rate\n2020-01-02,EUR,1.10\n2020-01-02,EUR,1.11\n";
        assert!(matches!(
            PricePanel::from_csv(csv.as_bytes()),
            Err(DataError::Duplicate { .. })
        ));
    }

    #[test]
    fn non_positive_rate_is_rejected() {
        let csv = "date,symbol,rate\n2020-01-02,EUR,0.0\n";
        assert!(matches!(
            PricePanel::from_csv(csv.as_bytes()),
            Err(DataError::NonPositiveRate { .. })
        ));
    }

    #[test]
    fn bad_row_reports_line_number() {
        let csv = "date,symbol,rate\n2020-01-02,EUR,1.10\nnot-a-date,EUR,1.0\n";
        match PricePanel::from_csv(csv.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_order_rows_become_sorted_panel() {
        let csv = "date,symbol,rate\n2020-01-06,EUR,1.2\n2020-01-02,EUR,1.0\n2020-01-03,EUR,1.1\n";
        let panel = PricePanel::from_csv(csv.as_bytes()).unwrap();
        let mut sorted = panel.dates().to_vec();
        sorted.sort();
        assert_eq!(panel.dates(), &sorted[..]);
        assert_eq!(panel.rate(0, 0), Some(1.0));
        assert_eq!(panel.rate(2, 0), Some(1.2));
    }

    #[test]
    fn returns_hand_cases() {
        let rows = vec![
            (d("2020-01-02"), "EUR".to_string(), 100.0),
            (d("2020-01-03"), "EUR".to_string(), 110.0),
            (d("2020-01-06"), "EUR".to_string(), 99.0),
        ];
        let panel = PricePanel::from_rows(rows).unwrap();
        let rp = daily_returns(&panel).unwrap();
        assert_eq!(rp.n_dates(), 2);
        assert!((rp.ret(0, 0).unwrap() - 0.10).abs() < 1e-15);
        assert!((rp.ret(1, 0).unwrap() + 0.10).abs() < 1e-15);
    }

    #[test]
    fn flat_prices_zero_returns_and_vol() {
        let rows: Vec<_> = (0..90)
            .map(|i| {
                (
                    d("2020-01-01") + chrono::Days::new(i),
                    "EUR".to_string(),
                    1.25,
                )
            })
            .collect();
        let panel = PricePanel::from_rows(rows).unwrap();
        let rp = daily_returns(&panel).unwrap();
        for i in 0..rp.n_dates() {
            assert_eq!(rp.ret(i, 0), Some(0.0));
            assert_eq!(rp.vol(i, 0), Some(0.0));
        }
    }

    #[test]
    fn single_date_errors() {
        let panel = PricePanel::from_rows(vec![(d("2020-01-02"), "EUR".to_string(), 1.0)]).unwrap();
        assert!(daily_returns(&panel).is_err());
    }

    #[test]
    fn missing_price_propagates_to_returns() {
        let rows = vec![
            (d("2020-01-02"), "EUR".to_string(), 1.0),
            (d("2020-01-03"), "GBP".to_string(), 2.0),
            (d("2020-01-02"), "GBP".to_string(), 2.0),
            (d("2020-01-06"), "EUR".to_string(), 1.1),
            (d("2020-01-06"), "GBP".to_string(), 2.1),
        ];
        let panel = PricePanel::from_rows(rows).unwrap();
        let rp = daily_returns(&panel).unwrap();
        let eur = panel.assets().iter().position(|a| a == "EUR").unwrap();
        // EUR missing on 01-03: both adjacent returns missing
        assert_eq!(rp.ret(0, eur), None);
        assert_eq!(rp.ret(1, eur), None);
    }

    #[test]
    fn winsorize_constant_series_unchanged() {
        let series: Vec<Option<f64>> = vec![Some(0.01); 300];
        assert_eq!(winsorize(&series), series);
    }

    #[test]
    fn winsorize_clips_spike_to_band() {
        let mut series: Vec<Option<f64>> = vec![Some(0.0); 300];
        series.push(Some(10.0));
        let out = winsorize(&series);
        // all-zero history: band collapses to zero at the spike date
        let mut reference = EwmStats::with_span(WINSOR_SPAN);
        for _ in 0..300 {
            reference.push(0.0);
        }
        let hi = reference.mean().unwrap() + WINSOR_SIGMAS * reference.std().unwrap();
        assert_eq!(out[300], Some(hi));
    }

    #[test]
    fn winsorize_is_idempotent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let series: Vec<Option<f64>> = (0..600)
            .map(|i| {
                if i % 97 == 0 {
                    None
                } else {
                    Some(rng.gen::<f64>() * if i % 53 == 0 { 30.0 } else { 1.0 })
                }
            })
            .collect();
        let once = winsorize(&series);
        let twice = winsorize(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn ewm_vol_matches_direct_weighted_sums() {
        let series: Vec<Option<f64>> = (0..200)
            .map(|i| Some(if i % 2 == 0 { 0.02 } else { -0.02 }))
            .collect();
        let out = ewm_volatility(&series, VOL_SPAN);
        // direct weighted computation at the last point
        let alpha = 2.0 / (VOL_SPAN as f64 + 1.0);
        let n = series.len();
        let (mut sw, mut sw2, mut swx, mut swx2) = (0.0, 0.0, 0.0, 0.0);
        for (i, x) in series.iter().enumerate() {
            let x = x.unwrap();
            let w = (1.0 - alpha).powi((n - 1 - i) as i32);
            sw += w;
            sw2 += w * w;
            swx += w * x;
            swx2 += w * x * x;
        }
        let mean = swx / sw;
        let biased = swx2 / sw - mean * mean;
        let expect = (biased * sw * sw / (sw * sw - sw2)).sqrt();
        assert!((out[n - 1].unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ewm_vol_estimates_iid_sigma() {
        let sigma = 0.013;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let series: Vec<Option<f64>> = (0..10_000)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.gen::<f64>().max(1e-12);
                let u2: f64 = rng.gen();
                Some(sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
            })
            .collect();
        let out = ewm_volatility(&series, VOL_SPAN);
        let tail: Vec<f64> = out[8_000..].iter().map(|v| v.unwrap()).collect();
        let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(
            (tail_mean - sigma).abs() / sigma < 0.05,
            "tail estimate {tail_mean} vs sigma {sigma}"
        );
    }

    #[test]
    fn constant_vix_is_all_normal() {
        let dates: Vec<NaiveDate> = (0..80)
            .map(|i| d("2020-01-01") + chrono::Days::new(i))
            .collect();
        let vix = vec![20.0; 80];
        let states = classify_market_state(&dates, &vix).unwrap();
        assert_eq!(states.dates().len(), 80 - RISK_OFF_WINDOW + 1);
        assert!(states.states.iter().all(|s| *s == MarketState::Normal));
    }

    #[test]
    fn vix_jump_flags_risk_off() {
        let dates: Vec<NaiveDate> = (0..100)
            .map(|i| d("2020-01-01") + chrono::Days::new(i))
            .collect();
        let mut vix = vec![20.0; 100];
        vix[90] = 26.0;
        let states = classify_market_state(&dates, &vix).unwrap();
        // ma at the jump date: (59*20 + 26)/60 = 20.1; 26 >= 25.1
        assert_eq!(states.state(dates[90]), Some(MarketState::RiskOff));
        assert_eq!(states.state(dates[89]), Some(MarketState::Normal));
        assert_eq!(states.state(dates[91]), Some(MarketState::Normal));
    }

    #[test]
    fn early_dates_carry_no_state() {
        let dates: Vec<NaiveDate> = (0..70)
            .map(|i| d("2020-01-01") + chrono::Days::new(i))
            .collect();
        let vix = vec![20.0; 70];
        let states = classify_market_state(&dates, &vix).unwrap();
        assert_eq!(states.state(dates[0]), None);
        assert_eq!(states.state(dates[58]), None);
        assert!(states.state(dates[59]).is_some());
        assert!(classify_market_state(&dates[..59], &vix[..59]).is_err());
    }

    #[test]
    fn causality_perturbing_future_prices() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        for i in 0..400u64 {
            let date = d("2018-01-01") + chrono::Days::new(i);
            rows.push((date, "EUR".to_string(), 1.0 + rng.gen::<f64>() * 0.2));
        }
        let cutoff = 250;
        let base = PricePanel::from_rows(rows.clone()).unwrap();
        for r in rows.iter_mut().skip(cutoff + 1) {
            r.2 *= 1.5;
        }
        let bumped = PricePanel::from_rows(rows).unwrap();
        let rp_a = daily_returns(&base).unwrap();
        let rp_b = daily_returns(&bumped).unwrap();
        // arrival-date index cutoff-1 covers the move into price date cutoff
        for i in 0..cutoff {
            assert_eq!(rp_a.ret(i, 0), rp_b.ret(i, 0));
            assert_eq!(rp_a.clean_ret(i, 0), rp_b.clean_ret(i, 0));
            assert_eq!(rp_a.vol(i, 0), rp_b.vol(i, 0));
        }
        assert_ne!(rp_a.ret(cutoff, 0), rp_b.ret(cutoff, 0));
    }
}
