// Scratch probe: can the encoder learn a planted cross-item interaction
// from clean supervised sublists? Bypasses the market pipeline entirely.

use chrono::NaiveDate;
use rand::Rng;
use xsrank::context::{ContextModel, ContextSublist, EncoderParams, Side};
use xsrank::features::{FeatureRow, ZScore, FEATURE_DIM};
use xsrank::numkernel::{Parameterized, Tape};
use xsrank::rankers::LossKind;
use xsrank::rng::StreamKey;
use xsrank::training::{run_early_stopped, EpochTrace};

fn make_sublists(n_lists: usize, seed: u64, interaction: f64) -> Vec<ContextSublist> {
    let mut rng = StreamKey::root(seed).child("probe").rng();
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let noise_in: f64 = std::env::var("NOISE_IN").ok().and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let noise_label: f64 = std::env::var("NOISE_LABEL").ok().and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let date = NaiveDate::from_ymd_opt(2015, 1, 5).unwrap();
    let m = 10;
    (0..n_lists)
        .map(|_| {
            // latent per-item signal; the observed feature is a noisy view
            let q: Vec<f64> = (0..m).map(|_| gauss(&mut rng)).collect();
            let feats: Vec<[f64; FEATURE_DIM]> = q
                .iter()
                .map(|&qi| {
                    let mut f = [0.0; FEATURE_DIM];
                    for v in &mut f {
                        *v = rng.gen::<f64>() * 2.0 - 1.0;
                    }
                    f[3] = qi + noise_in * gauss(&mut rng);
                    f
                })
                .collect();
            let sum: f64 = q.iter().sum();
            let targets: Vec<f64> = q
                .iter()
                .map(|&qi| {
                    let loo = (sum - qi) / (m as f64 - 1.0);
                    interaction * qi * loo * 3.0 + noise_label * gauss(&mut rng)
                })
                .collect();
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| targets[a].partial_cmp(&targets[b]).unwrap());
            let mut label = vec![0u8; m];
            for (rank, &i) in order.iter().enumerate() {
                label[i] = rank as u8;
            }
            let items: Vec<FeatureRow> = (0..m)
                .map(|i| FeatureRow {
                    date,
                    date_idx: 0,
                    next_date: date,
                    asset: format!("C{i:02}"),
                    asset_idx: i,
                    features: feats[i],
                    label: label[i],
                    next_return: targets[i],
                    next_vol_scaled_return: targets[i],
                    sigma: 0.01,
                })
                .collect();
            ContextSublist {
                side: Side::Long,
                date,
                items,
            }
        })
        .collect()
}

fn mean_ndcg(model: &ContextModel, subs: &[ContextSublist]) -> f64 {
    let z = ZScore::identity();
    let mut total = 0.0;
    for sub in subs {
        let scores = model.rerank(&z, sub).unwrap();
        let labels: Vec<u8> = sub.items.iter().map(|r| r.label).collect();
        total += xsrank::metrics::ndcg_at_k(&labels, &scores, 3, Side::Long).unwrap();
    }
    total / subs.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let layers: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let d: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(150);
    let loss = match args.get(5).map(|s| s.as_str()) {
        Some("pw") => LossKind::PairwiseLogistic,
        _ => LossKind::ListNet,
    };

    let train = make_sublists(1500, 1, 1.0);
    let test = make_sublists(400, 2, 1.0);

    let mut params = EncoderParams::init(
        FEATURE_DIM,
        d,
        d,
        layers,
        1,
        0.0,
        StreamKey::root(9).child("enc"),
    )
    .unwrap();
    let zscore = ZScore::identity();

    let epoch_fn = |epoch: usize| -> Result<(f64, EncoderParams), xsrank::numkernel::KernelError> {
        let mut rng = StreamKey::root(10).child_idx(epoch as u64).rng();
        for sub in &train {
            let labels: Vec<f64> = sub.items.iter().map(|r| f64::from(r.label)).collect();
            let mut tape = Tape::new();
            let x = xsrank::context::stage_sublist(&mut tape, &zscore, sub);
            let staged = params.stage(&mut tape);
            let scores = staged.forward(&mut tape, x, true, &mut rng, true)?;
            let loss_id = loss.on_tape(&mut tape, scores, &labels)?;
            let grads = tape.backward(loss_id)?;
            let ids = staged.leaf_ids();
            let gt: Vec<_> = ids.iter().map(|&id| grads.tensor(id)).collect();
            params.sgd_step(&gt, lr)?;
        }
        // quick val loss on a slice of test lists
        let mut val = 0.0;
        let mut unused = StreamKey::root(0).rng();
        for sub in &test[..100] {
            let labels: Vec<f64> = sub.items.iter().map(|r| f64::from(r.label)).collect();
            let mut tape = Tape::new();
            let x = xsrank::context::stage_sublist(&mut tape, &zscore, sub);
            let staged = params.stage(&mut tape);
            let scores = staged.forward(&mut tape, x, true, &mut unused, false)?;
            let loss_id = loss.on_tape(&mut tape, scores, &labels)?;
            val += tape.value(loss_id).item();
        }
        Ok((val / 100.0, params.clone()))
    };
    let (best, trace) = run_early_stopped(epochs, epochs - 1, epoch_fn).unwrap();
    let model = ContextModel {
        params: best,
        loss,
        learning_rate: lr,
    };
    let base_like = ContextModel {
        params: EncoderParams::init(FEATURE_DIM, d, d, layers, 1, 0.0, StreamKey::root(99)).unwrap(),
        loss,
        learning_rate: lr,
    };
    println!(
        "lr={lr} layers={layers} d={d} loss={loss:?}: trained NDCG@3 {:.4} vs untrained {:.4}; val {:.4} -> {:.4} (best ep {})",
        mean_ndcg(&model, &test),
        mean_ndcg(&base_like, &test),
        trace.val_loss[0],
        trace.val_loss[trace.best_epoch],
        trace.best_epoch,
    );
}
