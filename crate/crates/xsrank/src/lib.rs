//! Cross-sectional currency momentum with context-aware learning to rank.
//!
//! The pipeline turns a daily panel of USD-quoted currency rates into
//! long/short decile portfolios: returns-based features feed neural rankers
//! trained with pairwise and listwise losses, a Transformer-encoder model
//! re-ranks the top/bottom sublists using their local context, and a
//! walk-forward backtest reports volatility-targeted performance
//! unconditionally and per market regime.
//!
//! Module map:
//! - [`numkernel`] — dense tensors with reverse-mode gradients
//! - [`marketdata`] — price panels, returns, EWM volatility, market states
//! - [`features`] — predictor vectors and next-period decile labels
//! - [`rankers`] — base scoring models and ranking losses
//! - [`context`] — encoder-based re-ranker over top/bottom sublists
//! - [`training`] — walk-forward calibration, early stopping, random search
//! - [`strategy`] — portfolio selection and realized strategy returns
//! - [`metrics`] — NDCG@k and financial performance summaries
//! - [`cli`] — configuration, orchestration, artifact emission

pub mod cli;
pub mod context;
pub mod features;
pub mod marketdata;
pub mod metrics;
pub mod numkernel;
pub mod rankers;
pub mod rng;
pub mod strategy;
pub mod training;
