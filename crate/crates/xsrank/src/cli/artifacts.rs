//! Artifact emission: CSV series, report.json, and the run manifest.
//!
//! Every file is built in memory and written once; the manifest records a
//! sha256 digest per emitted file and is written last. Map keys are sorted
//! and floats use the shortest round-trip formatting, so identical runs
//! produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::pipeline::{ModelRun, PipelineInputs, RunOutcome};
use super::{CliError, RunConfig};
use crate::features::FEATURE_NAMES;
use crate::metrics::{performance_summary, regime_breakdown, PerformanceSummary, RegimeBreakdown};
use crate::strategy::rescale_to_target;

#[derive(Serialize)]
struct ModelReport {
    n_days: usize,
    rescale_factor: f64,
    performance: PerformanceSummary,
    ndcg3_long: f64,
    ndcg3_short: f64,
    ndcg3_both: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    regimes: Option<RegimeBreakdown>,
}

#[derive(Serialize)]
struct Report<'a> {
    sigma_target: f64,
    models: BTreeMap<String, ModelReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    risk_off_fraction: Option<f64>,
    config: &'a RunConfig,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn write_all(
    config: &RunConfig,
    inputs: &PipelineInputs,
    runs: &BTreeMap<String, &ModelRun>,
) -> Result<RunOutcome, CliError> {
    let out_dir = &config.run.out_dir;
    std::fs::create_dir_all(out_dir).map_err(super::io_err(out_dir))?;

    let mut emitted: BTreeMap<String, String> = BTreeMap::new(); // name -> sha256
    let mut files = Vec::new();
    let mut write_file = |name: &str, contents: &str| -> Result<PathBuf, CliError> {
        let path = out_dir.join(name);
        std::fs::write(&path, contents).map_err(super::io_err(&path))?;
        emitted.insert(name.to_string(), hex_digest(contents.as_bytes()));
        Ok(path)
    };

    // per-model rescaled returns
    let mut rescaled: BTreeMap<String, (Vec<chrono::NaiveDate>, Vec<f64>, f64)> = BTreeMap::new();
    for (name, run) in runs {
        let (scaled, factor) = rescale_to_target(&run.strat.returns, config.portfolio.sigma_target)
            .map_err(|e| CliError::Model(format!("{name}: {e}")))?;
        rescaled.insert(name.clone(), (run.strat.dates.clone(), scaled, factor));
    }

    // returns.csv: date,model,return (rescaled to the target volatility)
    let mut returns_csv = String::from("date,model,return\n");
    for (name, (dates, scaled, _)) in &rescaled {
        for (date, r) in dates.iter().zip(scaled) {
            writeln!(returns_csv, "{date},{name},{r}").expect("string write");
        }
    }
    files.push(write_file("returns.csv", &returns_csv)?);

    // cumret.csv: compounded wealth minus one, for plotting
    let mut cumret_csv = String::from("date,model,cum_return\n");
    for (name, (dates, scaled, _)) in &rescaled {
        let mut wealth = 1.0;
        for (date, r) in dates.iter().zip(scaled) {
            wealth *= 1.0 + r;
            writeln!(cumret_csv, "{date},{name},{}", wealth - 1.0).expect("string write");
        }
    }
    files.push(write_file("cumret.csv", &cumret_csv)?);

    // ndcg.csv: date,model,side,ndcg3
    let mut ndcg_csv = String::from("date,model,side,ndcg3\n");
    for (name, run) in runs {
        for (i, date) in run.strat.dates.iter().enumerate() {
            writeln!(ndcg_csv, "{date},{name},long,{}", run.strat.ndcg_long[i])
                .expect("string write");
            writeln!(ndcg_csv, "{date},{name},short,{}", run.strat.ndcg_short[i])
                .expect("string write");
        }
    }
    files.push(write_file("ndcg.csv", &ndcg_csv)?);

    // decisions.csv: date,model,asset,signal,base_rank,context_rank
    let mut decisions_csv = String::from("date,model,asset,signal,base_rank,context_rank\n");
    for (name, run) in runs {
        for d in &run.decisions {
            for leg in &d.legs {
                let ctx = leg
                    .context_rank
                    .map(|r| r.to_string())
                    .unwrap_or_default();
                writeln!(
                    decisions_csv,
                    "{},{name},{},{},{},{ctx}",
                    d.date, leg.asset, leg.signal, leg.base_rank
                )
                .expect("string write");
            }
        }
    }
    files.push(write_file("decisions.csv", &decisions_csv)?);

    // regime.csv: model,state,n_days,sharpe,mean_ndcg3
    let mut regimes_by_model: BTreeMap<String, RegimeBreakdown> = BTreeMap::new();
    if let Some(states) = &inputs.states {
        let mut regime_csv = String::from("model,state,n_days,sharpe,mean_ndcg3\n");
        for (name, run) in runs {
            let (_, scaled, _) = &rescaled[name];
            let breakdown = regime_breakdown(
                &run.strat.dates,
                scaled,
                &run.strat.ndcg_both(),
                states,
            )
            .map_err(|e| CliError::Model(format!("{name}: {e}")))?;
            for (state, stats) in [("normal", &breakdown.normal), ("risk_off", &breakdown.risk_off)]
            {
                if let Some(s) = stats {
                    let sharpe = s.sharpe.map(|v| v.to_string()).unwrap_or_default();
                    let nd = s.mean_ndcg3.map(|v| v.to_string()).unwrap_or_default();
                    writeln!(regime_csv, "{name},{state},{},{sharpe},{nd}", s.n_days)
                        .expect("string write");
                }
            }
            regimes_by_model.insert(name.clone(), breakdown);
        }
        files.push(write_file("regime.csv", &regime_csv)?);
    }

    // report.json
    let mut model_reports = BTreeMap::new();
    for (name, run) in runs {
        let (_, scaled, factor) = &rescaled[name];
        let performance = performance_summary(scaled)
            .map_err(|e| CliError::Model(format!("{name}: {e}")))?;
        model_reports.insert(
            name.clone(),
            ModelReport {
                n_days: scaled.len(),
                rescale_factor: *factor,
                performance,
                ndcg3_long: mean(&run.strat.ndcg_long),
                ndcg3_short: mean(&run.strat.ndcg_short),
                ndcg3_both: mean(&run.strat.ndcg_both()),
                regimes: regimes_by_model.remove(name),
            },
        );
    }
    let report = Report {
        sigma_target: config.portfolio.sigma_target,
        models: model_reports,
        risk_off_fraction: inputs.states.as_ref().map(|s| s.risk_off_fraction()),
        config,
    };
    let report_json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Model(e.to_string()))?;
    files.push(write_file("report.json", &report_json)?);

    // optional feature export
    if config.run.export_features {
        let mut features_csv = String::from("date,asset,");
        features_csv.push_str(&FEATURE_NAMES.join(","));
        features_csv.push_str(",label,next_return,next_vol_scaled_return\n");
        for row in inputs.frame.rows() {
            write!(features_csv, "{},{}", row.date, row.asset).expect("string write");
            for f in row.features {
                write!(features_csv, ",{f}").expect("string write");
            }
            writeln!(
                features_csv,
                ",{},{},{}",
                row.label, row.next_return, row.next_vol_scaled_return
            )
            .expect("string write");
        }
        files.push(write_file("features.csv", &features_csv)?);
    }

    // trained model bundles, one self-describing JSON per block
    let models_dir = out_dir.join("models");
    std::fs::create_dir_all(&models_dir).map_err(super::io_err(&models_dir))?;
    for (name, run) in runs {
        for (i, bundle) in run.bundles.iter().enumerate() {
            let rel = format!("models/{name}-block{i:02}.json");
            let json = serde_json::to_string_pretty(bundle)
                .map_err(|e| CliError::Model(e.to_string()))?;
            files.push(write_file(&rel, &json)?);
        }
    }

    // manifest.json, written last so it can list every other artifact
    #[derive(Serialize)]
    struct Manifest<'a> {
        seed: u64,
        config: &'a RunConfig,
        blocks: &'a crate::training::WalkForwardPlan,
        models: BTreeMap<String, &'a Vec<super::pipeline::BlockRecord>>,
        files: BTreeMap<String, String>,
    }
    let manifest = Manifest {
        seed: config.run.seed,
        config,
        blocks: &inputs.plan,
        models: runs.iter().map(|(n, r)| (n.clone(), &r.blocks)).collect(),
        files: emitted.clone(),
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Model(e.to_string()))?;
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, &manifest_json).map_err(super::io_err(&manifest_path))?;
    files.push(manifest_path);

    Ok(RunOutcome {
        out_dir: out_dir.clone(),
        files,
    })
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("string write");
    }
    out
}
