//! Context-aware re-ranker: an encoder-only attention model that re-scores
//! an m-item sublist using the whole sublist as its input.
//!
//! The pipeline is `scores = output_proj(encoder_stack(input_proj(x) + PE))`
//! with sinusoidal positional encodings indexed by the base ranker's
//! positions (0 = most extreme on either side). Encoder blocks follow
//! `z = LN(x + Drop(MHA(x)))`, `out = LN(z + Drop(FF(z)))` with a
//! two-layer rectifier feed-forward of inner width `d_ff`. Layers apply
//! input-side first. The attention scale is the width of the per-head
//! query block, which with the single head pinned by the hyperparameter
//! grid equals `d_model`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureRow, ZScore, FEATURE_DIM};
use crate::numkernel::{KernelError, Parameterized, Result as KResult, Tape, Tensor, TensorId};
use crate::rng::StreamKey;

/// Layer-norm epsilon (population variance in the denominator).
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty sublist")]
    EmptySublist,
}

/// Which side of the cross-section a sublist came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Long,
    Short,
}

/// The local ranking context: the m most extreme assets of one side on one
/// rebalance date, ordered by the base ranker (position 0 = most extreme).
#[derive(Debug, Clone)]
pub struct ContextSublist {
    pub side: Side,
    pub date: chrono::NaiveDate,
    /// Items in base-rank order; `items[p]` sits at position `p`.
    pub items: Vec<FeatureRow>,
}

impl ContextSublist {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Encoder hyperparameters and weights. `d_model` doubles as the input
/// fully-connected width; per-head widths are `d_model / n_heads` exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout_rate: f64,
    input_w: Tensor,
    input_b: Tensor,
    layers: Vec<EncoderLayerParams>,
    output_w: Tensor,
    output_b: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderLayerParams {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    ff_w1: Tensor,
    ff_b1: Tensor,
    ff_w2: Tensor,
    ff_b2: Tensor,
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
}

impl EncoderParams {
    /// Seeded uniform fan-in initialization; layer norms start at identity.
    pub fn init(
        input_dim: usize,
        d_model: usize,
        d_ff: usize,
        n_layers: usize,
        n_heads: usize,
        dropout_rate: f64,
        key: StreamKey,
    ) -> Result<Self, ContextError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(ContextError::Config(format!(
                "n_heads {n_heads} must divide d_model {d_model}"
            )));
        }
        if d_model % 2 != 0 {
            return Err(ContextError::Config(format!(
                "d_model {d_model} must be even for sinusoidal encodings"
            )));
        }
        if !(1..=4).contains(&n_layers) {
            return Err(ContextError::Config(format!(
                "n_layers {n_layers} outside 1..=4"
            )));
        }
        let mut counter = 0u64;
        let mut uniform = |rows: usize, cols: usize| -> Tensor {
            use rand::Rng;
            let mut rng = key.child_idx(counter).rng();
            counter += 1;
            let bound = 1.0 / (rows as f64).sqrt();
            let values: Vec<f64> = (0..rows * cols)
                .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
                .collect();
            Tensor::matrix(rows, cols, values).expect("finite init")
        };
        let layers = (0..n_layers)
            .map(|_| EncoderLayerParams {
                w_q: uniform(d_model, d_model),
                w_k: uniform(d_model, d_model),
                w_v: uniform(d_model, d_model),
                w_o: uniform(d_model, d_model),
                ff_w1: uniform(d_model, d_ff),
                ff_b1: Tensor::zeros(vec![d_ff]),
                ff_w2: uniform(d_ff, d_model),
                ff_b2: Tensor::zeros(vec![d_model]),
                ln1_gain: ones(d_model),
                ln1_bias: Tensor::zeros(vec![d_model]),
                ln2_gain: ones(d_model),
                ln2_bias: Tensor::zeros(vec![d_model]),
            })
            .collect();
        Ok(EncoderParams {
            d_model,
            d_ff,
            n_layers,
            n_heads,
            dropout_rate,
            input_w: uniform(input_dim, d_model),
            input_b: Tensor::zeros(vec![d_model]),
            layers,
            output_w: uniform(d_model, 1),
            output_b: Tensor::zeros(vec![1]),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_w.shape()[0]
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("ones")
}

impl Parameterized for EncoderParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.input_w, &self.input_b];
        for l in &self.layers {
            out.extend([
                &l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.ff_w1, &l.ff_b1, &l.ff_w2, &l.ff_b2,
                &l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias,
            ]);
        }
        out.extend([&self.output_w, &self.output_b]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.input_w, &mut self.input_b];
        for l in &mut self.layers {
            out.extend([
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.ff_w1,
                &mut l.ff_b1,
                &mut l.ff_w2,
                &mut l.ff_b2,
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
            ]);
        }
        out.extend([&mut self.output_w, &mut self.output_b]);
        out
    }
}

/// Sinusoidal positional encodings:
/// `PE(p, 2i) = sin(p / 10000^{2i/d})`, `PE(p, 2i+1) = cos(same)`.
pub fn positional_encoding(m: usize, d_model: usize) -> Result<Tensor, ContextError> {
    if d_model % 2 != 0 {
        return Err(ContextError::Config(format!(
            "positional encoding needs even width, got {d_model}"
        )));
    }
    let mut values = Vec::with_capacity(m * d_model);
    for p in 0..m {
        for i in 0..d_model / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            values.push(angle.sin());
            values.push(angle.cos());
        }
    }
    Ok(Tensor::matrix(m, d_model, values)?)
}

/// `softmax(Q K^T / sqrt(d)) V` with the softmax row-wise and `d` the
/// width of `Q`.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> KResult<TensorId> {
    let d = tape.value(q).dims2().1;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, v)
}

/// Handles to one staged encoder layer.
struct StagedLayer {
    w_q: TensorId,
    w_k: TensorId,
    w_v: TensorId,
    w_o: TensorId,
    ff_w1: TensorId,
    ff_b1: TensorId,
    ff_w2: TensorId,
    ff_b2: TensorId,
    ln1_gain: TensorId,
    ln1_bias: TensorId,
    ln2_gain: TensorId,
    ln2_bias: TensorId,
}

/// The whole model staged on a tape for one pass.
pub struct StagedEncoder {
    pub n_heads: usize,
    pub dropout_rate: f64,
    input_w: TensorId,
    input_b: TensorId,
    layers: Vec<StagedLayer>,
    output_w: TensorId,
    output_b: TensorId,
}

impl EncoderParams {
    pub fn stage(&self, tape: &mut Tape) -> StagedEncoder {
        StagedEncoder {
            n_heads: self.n_heads,
            dropout_rate: self.dropout_rate,
            input_w: tape.leaf(self.input_w.clone()),
            input_b: tape.leaf(self.input_b.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| StagedLayer {
                    w_q: tape.leaf(l.w_q.clone()),
                    w_k: tape.leaf(l.w_k.clone()),
                    w_v: tape.leaf(l.w_v.clone()),
                    w_o: tape.leaf(l.w_o.clone()),
                    ff_w1: tape.leaf(l.ff_w1.clone()),
                    ff_b1: tape.leaf(l.ff_b1.clone()),
                    ff_w2: tape.leaf(l.ff_w2.clone()),
                    ff_b2: tape.leaf(l.ff_b2.clone()),
                    ln1_gain: tape.leaf(l.ln1_gain.clone()),
                    ln1_bias: tape.leaf(l.ln1_bias.clone()),
                    ln2_gain: tape.leaf(l.ln2_gain.clone()),
                    ln2_bias: tape.leaf(l.ln2_bias.clone()),
                })
                .collect(),
            output_w: tape.leaf(self.output_w.clone()),
            output_b: tape.leaf(self.output_b.clone()),
        }
    }
}

/// Multi-head attention: per-head projections, scaled dot-product
/// attention per head, concatenation, output projection. With one head
/// and identity projections this is exactly [`scaled_dot_attention`].
pub fn multi_head_attention(
    tape: &mut Tape,
    x: TensorId,
    w_q: TensorId,
    w_k: TensorId,
    w_v: TensorId,
    w_o: TensorId,
    n_heads: usize,
) -> KResult<TensorId> {
    let d_model = tape.value(x).dims2().1;
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(KernelError::Config(format!(
            "n_heads {n_heads} must divide d_model {d_model}"
        )));
    }
    let d_head = d_model / n_heads;
    let q_all = tape.matmul(x, w_q)?;
    let k_all = tape.matmul(x, w_k)?;
    let v_all = tape.matmul(x, w_v)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = tape.slice_cols(q_all, h * d_head, d_head)?;
        let k = tape.slice_cols(k_all, h * d_head, d_head)?;
        let v = tape.slice_cols(v_all, h * d_head, d_head)?;
        heads.push(scaled_dot_attention(tape, q, k, v)?);
    }
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    tape.matmul(concat, w_o)
}

impl StagedEncoder {
    /// Leaf ids in the same order as [`Parameterized::tensors`].
    pub fn leaf_ids(&self) -> Vec<TensorId> {
        let mut out = vec![self.input_w, self.input_b];
        for l in &self.layers {
            out.extend([
                l.w_q, l.w_k, l.w_v, l.w_o, l.ff_w1, l.ff_b1, l.ff_w2, l.ff_b2, l.ln1_gain,
                l.ln1_bias, l.ln2_gain, l.ln2_bias,
            ]);
        }
        out.extend([self.output_w, self.output_b]);
        out
    }

    fn block(
        &self,
        tape: &mut Tape,
        layer: &StagedLayer,
        x: TensorId,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> KResult<TensorId> {
        let mha = multi_head_attention(
            tape, x, layer.w_q, layer.w_k, layer.w_v, layer.w_o, self.n_heads,
        )?;
        let mha = tape.dropout(mha, self.dropout_rate, rng, training)?;
        let res1 = tape.add(x, mha)?;
        let z = tape.layer_norm_rows(res1, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
        let ff = tape.matmul(z, layer.ff_w1)?;
        let ff = tape.add_row(ff, layer.ff_b1)?;
        let ff = tape.relu(ff)?;
        let ff = tape.matmul(ff, layer.ff_w2)?;
        let ff = tape.add_row(ff, layer.ff_b2)?;
        let ff = tape.dropout(ff, self.dropout_rate, rng, training)?;
        let res2 = tape.add(z, ff)?;
        tape.layer_norm_rows(res2, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)
    }

    /// Full pipeline over an m×input matrix already on the tape. Output
    /// order matches input order. `with_pe` switches the positional term.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: TensorId,
        with_pe: bool,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> KResult<TensorId> {
        let m = tape.value(x).dims2().0;
        let mut h = tape.matmul(x, self.input_w)?;
        h = tape.add_row(h, self.input_b)?;
        if with_pe {
            let d_model = tape.value(h).dims2().1;
            let pe = positional_encoding(m, d_model).map_err(|e| match e {
                ContextError::Kernel(k) => k,
                other => KernelError::Config(other.to_string()),
            })?;
            let pe_id = tape.leaf(pe);
            h = tape.add(h, pe_id)?;
        }
        for layer in &self.layers {
            h = self.block(tape, layer, h, rng, training)?;
        }
        let out = tape.matmul(h, self.output_w)?;
        let out = tape.add_row(out, self.output_b)?;
        tape.reshape(out, vec![m])
    }
}

/// A trained context re-ranker plus the normalization it was trained with.
/// One shared model re-scores both sides; short sublists arrive in
/// ascending base-score order so position 0 is always the most extreme.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextModel {
    pub params: EncoderParams,
    pub loss: crate::rankers::LossKind,
    pub learning_rate: f64,
}

impl ContextModel {
    /// Re-score a sublist in evaluation mode (deterministic).
    pub fn rerank(&self, zscore: &ZScore, sublist: &ContextSublist) -> Result<Vec<f64>, ContextError> {
        if sublist.is_empty() {
            return Err(ContextError::EmptySublist);
        }
        if self.params.input_dim() != FEATURE_DIM {
            return Err(ContextError::Config(format!(
                "encoder expects input width {}, features are {FEATURE_DIM}",
                self.params.input_dim()
            )));
        }
        let mut tape = Tape::new();
        let x = stage_sublist(&mut tape, zscore, sublist);
        let staged = self.params.stage(&mut tape);
        let mut unused = StreamKey::root(0).rng();
        let scores = staged.forward(&mut tape, x, true, &mut unused, false)?;
        Ok(tape.value(scores).values().to_vec())
    }
}

/// Stage a sublist's z-scored features as an m×FEATURE_DIM leaf, rows in
/// position order.
pub fn stage_sublist(tape: &mut Tape, zscore: &ZScore, sublist: &ContextSublist) -> TensorId {
    let mut values = Vec::with_capacity(sublist.len() * FEATURE_DIM);
    for item in &sublist.items {
        values.extend_from_slice(&zscore.apply(&item.features));
    }
    tape.leaf(Tensor::matrix(sublist.len(), FEATURE_DIM, values).expect("finite features"))
}
