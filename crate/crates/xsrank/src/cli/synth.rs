//! Synthetic market generator for desk-scale experiments.
//!
//! Prices follow geometric random walks whose next-day moves carry two
//! optional predictable components:
//!
//! - a slow momentum term: a persistent per-asset state that trailing
//!   returns (and hence the monthly/MACD features) reveal, scaled by
//!   `momentum` strength;
//! - a planted *context* term: inside the day's true top/bottom groups the
//!   next return couples a fast trailing-return signal to the group's own
//!   mean of that signal. The product form makes it invisible to any
//!   per-asset scorer but recoverable by a model that sees the whole
//!   sublist, scaled by `context_strength`.
//!
//! The VIX series is a mean-reverting level plus occasional decaying spike
//! episodes, so the risk-off classifier has something to find.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{io_err, CliError};
use crate::rng::StreamKey;

/// Persistence of the slow momentum state (daily AR(1)).
const MOMENTUM_PERSISTENCE: f64 = 0.99;

/// Coupling from the slow state into next-day returns, in daily sigmas.
const MOMENTUM_COUPLING: f64 = 1.0;

/// Coupling of the planted context interaction, in daily sigmas.
const CONTEXT_COUPLING: f64 = 1.5;

/// Group size used when planting the context interaction. Slightly wider
/// than the re-ranked sublists so a decent base ranker's top-m stays inside
/// the planted group.
const CONTEXT_GROUP: usize = 13;

/// Lookback (days) of the fast trailing-return signal. One day keeps the
/// signal visible through the shortest normalized-return feature with the
/// least contamination from the momentum drift.
const FAST_WINDOW: usize = 1;

/// Lookback (days) of the group-forming momentum proxy.
const GROUP_WINDOW: usize = 21;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_assets: usize,
    pub n_days: usize,
    /// Strength of learnable per-asset momentum, 0 disables it.
    pub momentum: f64,
    /// Strength of the planted sublist-relative signal, 0 disables it.
    pub context_strength: f64,
    pub seed: u64,
    pub start: NaiveDate,
}

impl SynthSpec {
    pub fn new(n_assets: usize, n_days: usize, momentum: f64, context_strength: f64, seed: u64) -> Self {
        SynthSpec {
            n_assets,
            n_days,
            momentum,
            context_strength,
            seed,
            start: NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date"),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.n_assets < 10 {
            return Err(CliError::Config(format!(
                "synthetic panel needs at least 10 assets, got {}",
                self.n_assets
            )));
        }
        if self.n_days < 600 {
            return Err(CliError::Config(format!(
                "synthetic panel needs at least 600 days, got {}",
                self.n_days
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) || !(0.0..=2.0).contains(&self.context_strength) {
            return Err(CliError::Config(
                "momentum must lie in [0,1] and context strength in [0,2]".into(),
            ));
        }
        Ok(())
    }
}

/// A generated market: weekday dates, per-asset prices, and a VIX series.
#[derive(Debug, Clone)]
pub struct SyntheticMarket {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    /// date-major price matrix
    pub prices: Vec<f64>,
    pub vix: Vec<f64>,
    /// diagnostics: date-major momentum state and fast signal (scratch)
    pub debug_momentum: Vec<f64>,
    pub debug_fast: Vec<f64>,
    pub debug_proxy: Vec<f64>,
}

fn weekdays_from(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if d.weekday().num_days_from_monday() < 5 {
            out.push(d);
        }
        d += chrono::Duration::days(1);
    }
    out
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate the market in memory.
pub fn generate(spec: &SynthSpec) -> Result<SyntheticMarket, CliError> {
    spec.validate()?;
    let n = spec.n_assets;
    let t_max = spec.n_days;
    let dates = weekdays_from(spec.start, t_max);
    let assets: Vec<String> = (0..n).map(|i| format!("C{i:02}")).collect();

    let key = StreamKey::root(spec.seed).child("synth");
    let mut rng = key.child("market").rng();

    // per-asset daily volatility and initial state
    let sigmas: Vec<f64> = (0..n).map(|_| 0.006 + 0.008 * rng.gen::<f64>()).collect();
    let mut momentum_state: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
    let mut prices: Vec<f64> = (0..n).map(|_| 0.5 + 1.5 * rng.gen::<f64>()).collect();

    let mut out_prices = Vec::with_capacity(t_max * n);
    out_prices.extend_from_slice(&prices);
    let mut debug_momentum = vec![0.0; t_max * n];
    let mut debug_fast = vec![0.0; t_max * n];
    let mut debug_proxy = vec![f64::NAN; t_max * n];
    debug_momentum[..n].copy_from_slice(&momentum_state);
    // trailing idiosyncratic shocks; the fast signal is built from these
    // alone so it is independent of the quantity that forms groups
    let mut recent_shocks: Vec<Vec<f64>> = vec![Vec::with_capacity(t_max); n];
    // trailing standardized returns: the group-forming momentum proxy uses
    // these so that any decent trailing-return ranker retrieves nearly the
    // same top/bottom groups
    let mut recent_returns: Vec<Vec<f64>> = vec![Vec::with_capacity(t_max); n];

    for _t in 1..t_max {
        // fast signal per asset: standardized mean of the last few shocks;
        // observable through the short-horizon normalized-return features
        let fast: Vec<f64> = (0..n)
            .map(|i| {
                let hist = &recent_shocks[i];
                if hist.len() < FAST_WINDOW {
                    return 0.0;
                }
                let tail = &hist[hist.len() - FAST_WINDOW..];
                let mean = tail.iter().sum::<f64>() / FAST_WINDOW as f64;
                (mean * (FAST_WINDOW as f64).sqrt()).clamp(-3.0, 3.0)
            })
            .collect();

        // group-forming proxy: standardized 21-day trailing return, the
        // quantity momentum rankers recover best
        let group_proxy: Vec<f64> = (0..n)
            .map(|i| {
                let hist = &recent_returns[i];
                if hist.len() < GROUP_WINDOW {
                    return f64::NAN;
                }
                let tail = &hist[hist.len() - GROUP_WINDOW..];
                tail.iter().sum::<f64>() / (GROUP_WINDOW as f64).sqrt()
            })
            .collect();

        // context term: inside the top/bottom groups by the visible proxy,
        // next returns couple the fast signal to the *other* members' mean
        // fast signal. Excluding the own value keeps E[g | q_i] = 0, so no
        // per-asset scorer can see it.
        let mut context_term = vec![0.0; n];
        if spec.context_strength > 0.0
            && n >= 2 * CONTEXT_GROUP
            && group_proxy.iter().all(|v| v.is_finite())
        {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                group_proxy[b]
                    .partial_cmp(&group_proxy[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for group in [&order[..CONTEXT_GROUP], &order[n - CONTEXT_GROUP..]] {
                let sum: f64 = group.iter().map(|&i| fast[i]).sum();
                let loo_scale = ((CONTEXT_GROUP - 1) as f64).sqrt();
                for &i in group {
                    let loo_mean = (sum - fast[i]) / (CONTEXT_GROUP - 1) as f64;
                    let h = (loo_mean * loo_scale).clamp(-2.0, 2.0);
                    context_term[i] = (fast[i] * h).clamp(-3.0, 3.0);
                }
            }
        }

        for i in 0..n {
            debug_momentum[_t * n + i] = momentum_state[i];
            debug_fast[_t * n + i] = fast[i];
            debug_proxy[_t * n + i] = group_proxy[i];
            let shock = gauss(&mut rng);
            let predictable = spec.momentum * MOMENTUM_COUPLING * momentum_state[i]
                + spec.context_strength * CONTEXT_COUPLING * context_term[i];
            let ret = sigmas[i] * (predictable + shock);
            // floor keeps prices positive even in the deepest draw
            let ret = ret.max(-0.5);
            prices[i] *= 1.0 + ret;
            recent_shocks[i].push(shock);
            recent_returns[i].push(ret / sigmas[i]);
            momentum_state[i] = MOMENTUM_PERSISTENCE * momentum_state[i]
                + (1.0 - MOMENTUM_PERSISTENCE * MOMENTUM_PERSISTENCE).sqrt() * gauss(&mut rng);
        }
        out_prices.extend_from_slice(&prices);
    }

    // VIX: mean-reverting base plus sparse decaying spikes
    let mut vix_rng = key.child("vix").rng();
    let mut level: f64 = 17.0;
    let mut spike: f64 = 0.0;
    let mut vix = Vec::with_capacity(t_max);
    for _ in 0..t_max {
        level += 0.05 * (17.0 - level) + 0.6 * gauss(&mut vix_rng);
        if vix_rng.gen::<f64>() < 1.0 / 250.0 {
            spike += 10.0 + 8.0 * vix_rng.gen::<f64>();
        }
        spike *= 0.90;
        vix.push((level + spike).max(9.0));
    }

    Ok(SyntheticMarket {
        dates,
        assets,
        prices: out_prices,
        vix,
        debug_momentum,
        debug_fast,
        debug_proxy,
    })
}

/// Generate and write `prices.csv` and `vix.csv` under `out_dir`.
/// Fixed seeds produce identical files.
pub fn make_synthetic_panel(spec: &SynthSpec, out_dir: &Path) -> Result<(), CliError> {
    let market = generate(spec)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let prices_path = out_dir.join("prices.csv");
    let mut w = String::from("date,symbol,rate\n");
    for (t, date) in market.dates.iter().enumerate() {
        for (i, asset) in market.assets.iter().enumerate() {
            w.push_str(&format!(
                "{date},{asset},{}\n",
                market.prices[t * market.assets.len() + i]
            ));
        }
    }
    std::fs::write(&prices_path, w).map_err(io_err(&prices_path))?;

    let vix_path = out_dir.join("vix.csv");
    let mut w = String::from("date,close\n");
    for (date, v) in market.dates.iter().zip(&market.vix) {
        w.push_str(&format!("{date},{v}\n"));
    }
    std::fs::write(&vix_path, w).map_err(io_err(&vix_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_per_seed() {
        let spec = SynthSpec::new(12, 700, 0.3, 0.5, 7);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.prices, b.prices);
        assert_eq!(a.vix, b.vix);
        let other = generate(&SynthSpec::new(12, 700, 0.3, 0.5, 8)).unwrap();
        assert_ne!(a.prices, other.prices);
    }

    #[test]
    fn bounds_are_enforced() {
        assert!(generate(&SynthSpec::new(9, 700, 0.0, 0.0, 1)).is_err());
        assert!(generate(&SynthSpec::new(12, 500, 0.0, 0.0, 1)).is_err());
        assert!(generate(&SynthSpec::new(12, 700, 1.5, 0.0, 1)).is_err());
    }

    #[test]
    fn prices_stay_positive_and_finite() {
        let market = generate(&SynthSpec::new(15, 1200, 1.0, 2.0, 3)).unwrap();
        assert!(market.prices.iter().all(|&p| p > 0.0 && p.is_finite()));
        assert!(market.vix.iter().all(|&v| v >= 9.0 && v.is_finite()));
    }

    #[test]
    fn fixed_seed_writes_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(10, 650, 0.2, 0.0, 11);
        make_synthetic_panel(&spec, dir.path()).unwrap();
        let p1 = std::fs::read(dir.path().join("prices.csv")).unwrap();
        let v1 = std::fs::read(dir.path().join("vix.csv")).unwrap();
        make_synthetic_panel(&spec, dir.path()).unwrap();
        assert_eq!(p1, std::fs::read(dir.path().join("prices.csv")).unwrap());
        assert_eq!(v1, std::fs::read(dir.path().join("vix.csv")).unwrap());
    }
}
