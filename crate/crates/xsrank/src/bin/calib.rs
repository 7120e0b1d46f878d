// Scratch calibration harness: measures planted-signal learnability.
// Not part of the deliverable surface; used to pin acceptance settings.

use std::time::Instant;

use xsrank::cli::{make_synthetic_panel, RunConfig, SynthSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let momentum: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let context: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let n_seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    let models: String = args
        .get(4)
        .cloned()
        .unwrap_or_else(|| "Rand,PW,ML,LN".to_string());
    let max_epochs: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(100);

    for seed in 0..n_seeds {
        let t0 = Instant::now();
        let dir = std::env::temp_dir().join(format!("xsrank-calib-{seed}"));
        std::fs::create_dir_all(&dir).unwrap();
        let spec = SynthSpec::new(31, 2500, momentum, context, 1000 + seed);
        make_synthetic_panel(&spec, &dir).unwrap();

        let mut cfg = RunConfig::default();
        cfg.data.prices = dir.join("prices.csv");
        cfg.data.vix = Some(dir.join("vix.csv"));
        cfg.run.out_dir = dir.join("out");
        cfg.run.seed = 7000 + seed;
        cfg.run.models = models.split(',').map(|s| s.to_string()).collect();
        cfg.training.max_epochs = max_epochs;
        cfg.training.patience = std::env::var("PATIENCE")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(max_epochs - 1);
        for kind in ["PW", "ML", "LN"] {
            cfg.hyper.base.insert(
                kind.to_string(),
                xsrank::cli::FixedBaseHyper {
                    hidden_width: 16,
                    dropout: 0.0,
                    learning_rate: match kind {
                        "PW" => 1e-4,
                        "ML" => 1e-3,
                        "LN" => 1e-2,
                        _ => 1e-3,
                    },
                },
            );
        }
        cfg.hyper.base.insert(
            "MLP".to_string(),
            xsrank::cli::FixedBaseHyper {
                hidden_width: 16,
                dropout: 0.0,
                learning_rate: 1e-3,
            },
        );
        let ctx_layers: usize = std::env::var("CTX_LAYERS").ok().and_then(|s| s.parse().ok()).unwrap_or(1);
        let lr_p: f64 = std::env::var("CTX_LR_P").ok().and_then(|s| s.parse().ok()).unwrap_or(3e-3);
        let lr_l: f64 = std::env::var("CTX_LR_L").ok().and_then(|s| s.parse().ok()).unwrap_or(3e-2);
        for (suffix, lr) in [("P", lr_p), ("L", lr_l)] {
            cfg.hyper.context.insert(
                suffix.to_string(),
                xsrank::cli::FixedContextHyper {
                    d_fc: 16,
                    d_ff: 16,
                    n_layers: ctx_layers,
                    dropout: 0.0,
                    learning_rate: lr,
                },
            );
        }

        xsrank::cli::run(&cfg).unwrap();
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(cfg.run.out_dir.join("report.json")).unwrap(),
        )
        .unwrap();
        print!("seed {seed}:");
        for (name, entry) in report["models"].as_object().unwrap() {
            print!(
                " {name}={:.4}/shp{:+.2}",
                entry["ndcg3_both"].as_f64().unwrap(),
                entry["performance"]["sharpe"].as_f64().unwrap_or(f64::NAN)
            );
        }
        println!("  [{:.1}s]", t0.elapsed().as_secs_f64());
    }
}
