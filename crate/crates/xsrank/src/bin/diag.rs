// Scratch diagnostics for the planted-context signal chain.

use xsrank::cli::synth::{generate, SynthSpec};
use xsrank::features::{build_feature_frame, LabelTarget};
use xsrank::marketdata::{daily_returns, PricePanel};

fn corr(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cxy = 0.0;
    let mut cxx = 0.0;
    let mut cyy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cxy += (x - mx) * (y - my);
        cxx += (x - mx) * (x - mx);
        cyy += (y - my) * (y - my);
    }
    cxy / (cxx * cyy).sqrt()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let momentum: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let context: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let spec = SynthSpec::new(31, 2500, momentum, context, 1000);
    let market = generate(&spec).unwrap();
    let n = market.assets.len();

    let mut rows = Vec::new();
    for (t, date) in market.dates.iter().enumerate() {
        for (i, asset) in market.assets.iter().enumerate() {
            rows.push((*date, asset.clone(), market.prices[t * n + i]));
        }
    }
    let panel = PricePanel::from_rows(rows).unwrap();
    let rp = daily_returns(&panel).unwrap();
    let frame = build_feature_frame(&panel, &rp, LabelTarget::VolScaled);
    println!("frame rows: {}", frame.len());

    // visibility: norm_ret_1 vs the fast signal driving the next return
    let mut nr1 = Vec::new();
    let mut fast_next = Vec::new();
    let mut nr21 = Vec::new();
    let mut z_now = Vec::new();
    for row in frame.rows() {
        let t = row.date_idx;
        if t + 1 >= market.dates.len() {
            continue;
        }
        nr1.push(row.features[1]);
        fast_next.push(market.debug_fast[(t + 1) * n + row.asset_idx]);
        nr21.push(row.features[5]);
        z_now.push(market.debug_momentum[(t + 1) * n + row.asset_idx]);
    }
    println!("corr(norm_ret_1, fast_next) = {:.3}", corr(&nr1, &fast_next));
    println!("corr(norm_ret_21, z)        = {:.3}", corr(&nr21, &z_now));

    // group alignment: top-10 by a simple momentum proxy vs true top-13
    let mut overlaps = Vec::new();
    let mut within_corr_n = 0usize;
    let mut g_vals = Vec::new();
    let mut y_vals = Vec::new();
    for date in frame.dates() {
        let slice = frame.date_slice(date);
        if slice.len() < 31 {
            continue;
        }
        let t = slice[0].date_idx;
        if t + 1 >= market.dates.len() {
            continue;
        }
        let z_at = |i: usize| market.debug_proxy[(t + 1) * n + i];
        if (0..n).any(|i| !z_at(i).is_finite()) {
            continue;
        }
        let mut proxy: Vec<(usize, f64)> = slice
            .iter()
            .map(|r| (r.asset_idx, r.features[5]))
            .collect();
        proxy.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let model_top: Vec<usize> = proxy[..10].iter().map(|p| p.0).collect();
        let mut true_order: Vec<usize> = (0..n).collect();
        true_order.sort_by(|&a, &b| z_at(b).partial_cmp(&z_at(a)).unwrap());
        let true_top: Vec<usize> = true_order[..13].to_vec();
        overlaps.push(
            model_top
                .iter()
                .filter(|i| true_top.contains(i))
                .count() as f64,
        );

        // within the true top group: does g explain next vol-scaled returns?
        let fast_at = |i: usize| market.debug_fast[(t + 1) * n + i];
        let members: Vec<&xsrank::features::FeatureRow> = slice
            .iter()
            .filter(|r| true_top.contains(&r.asset_idx))
            .collect();
        if members.len() == 13 {
            let sum_fast: f64 = members.iter().map(|r| fast_at(r.asset_idx)).sum();
            for r in &members {
                let f = fast_at(r.asset_idx);
                let loo = (sum_fast - f) / 12.0;
                let h = (loo * 12f64.sqrt()).clamp(-2.0, 2.0);
                g_vals.push((f * h).clamp(-3.0, 3.0));
                y_vals.push(r.next_vol_scaled_return);
            }
            within_corr_n += 1;
        }
    }
    let mean_overlap = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
    println!("mean |proxy-top10 ∩ true-top13| = {mean_overlap:.2} over {} dates", overlaps.len());
    println!(
        "within true group: corr(g, next_vol_scaled) = {:.3} over {} groups",
        corr(&g_vals, &y_vals),
        within_corr_n
    );
}
