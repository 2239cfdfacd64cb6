//! The sequence model: token embeddings, learned-weight hourly aggregation,
//! a depth-1 LSTM, and a per-hour sigmoid output head, with exact manual
//! gradients through the whole stack.
//!
//! Each observed hour of a stay is a bag of token indices. The hour is
//! embedded as a weighted average of its token embeddings, where the weights
//! are a softmax over one learned scalar per vocabulary entry — this is what
//! makes the per-hour importance ranking well defined. The missing token
//! (index 0) has a frozen zero embedding and is excluded from the softmax
//! support, so inserting missing readings never changes an hour's aggregate.
//! Hours with no events advance the LSTM with a zero input so a prediction
//! still exists for every hour.
//!
//! Training minimizes mean binary cross entropy between every hourly
//! probability and the stay-level outcome (target 1.0 = died), with
//! probabilities clamped to `[1e-7, 1 - 1e-7]` before the log.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::TokenizedStay;
use crate::util::{derive_seed, fmt_f64};

/// Probability clamp applied before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Gate order in the packed LSTM weight layout.
const GATES: usize = 4; // input, forget, cell, output

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_units: usize,
    pub embedding_dropout: f64,
    pub horizon_hours: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if self.embed_dim == 0 || self.hidden_units == 0 {
            return Err(Error::config("embed_dim and hidden_units must be positive"));
        }
        if !(0.0..1.0).contains(&self.embedding_dropout) {
            return Err(Error::config("embedding_dropout must lie in [0, 1)"));
        }
        if self.horizon_hours == 0 {
            return Err(Error::config("horizon_hours must be positive"));
        }
        Ok(())
    }

    /// Total number of scalar parameters (used for grid-search tie breaks).
    pub fn parameter_count(&self) -> usize {
        let (v, e, h) = (self.vocab_size, self.embed_dim, self.hidden_units);
        v * e + v + GATES * h * (e + h + 1) + h + 1
    }
}

/// All learnable parameters. Also reused as the gradient container: a
/// gradient set has exactly the same block shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// vocab_size x embed_dim; row 0 is pinned to zero.
    pub embedding: Array2<f64>,
    /// One aggregation logit per vocabulary entry.
    pub agg_weight: Array1<f64>,
    /// Packed input-to-gate weights, (4*hidden) x embed_dim.
    pub wx: Array2<f64>,
    /// Packed hidden-to-gate weights, (4*hidden) x hidden.
    pub wh: Array2<f64>,
    /// Packed gate biases, 4*hidden.
    pub bias: Array1<f64>,
    /// Output head weights, hidden.
    pub head_w: Array1<f64>,
    pub head_b: f64,
}

pub type Gradients = ModelParams;

impl ModelParams {
    /// Zero-valued parameter set with the same shapes (gradient container).
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            config: self.config,
            embedding: Array2::zeros(self.embedding.raw_dim()),
            agg_weight: Array1::zeros(self.agg_weight.raw_dim()),
            wx: Array2::zeros(self.wx.raw_dim()),
            wh: Array2::zeros(self.wh.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            head_w: Array1::zeros(self.head_w.raw_dim()),
            head_b: 0.0,
        }
    }

    /// Named flat views over every parameter block, in a fixed order.
    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("embedding", self.embedding.as_slice_mut().expect("contiguous")),
            ("agg_weight", self.agg_weight.as_slice_mut().expect("contiguous")),
            ("lstm_wx", self.wx.as_slice_mut().expect("contiguous")),
            ("lstm_wh", self.wh.as_slice_mut().expect("contiguous")),
            ("lstm_bias", self.bias.as_slice_mut().expect("contiguous")),
            ("head_w", self.head_w.as_slice_mut().expect("contiguous")),
            ("head_b", std::slice::from_mut(&mut self.head_b)),
        ]
    }

    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("embedding", self.embedding.as_slice().expect("contiguous")),
            ("agg_weight", self.agg_weight.as_slice().expect("contiguous")),
            ("lstm_wx", self.wx.as_slice().expect("contiguous")),
            ("lstm_wh", self.wh.as_slice().expect("contiguous")),
            ("lstm_bias", self.bias.as_slice().expect("contiguous")),
            ("head_w", self.head_w.as_slice().expect("contiguous")),
            ("head_b", std::slice::from_ref(&self.head_b)),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// Add `other` (same shapes) into `self`.
    pub fn add_assign(&mut self, other: &ModelParams) {
        self.embedding += &other.embedding;
        self.agg_weight += &other.agg_weight;
        self.wx += &other.wx;
        self.wh += &other.wh;
        self.bias += &other.bias;
        self.head_w += &other.head_w;
        self.head_b += other.head_b;
    }

    /// Scale every block by a constant.
    pub fn scale(&mut self, factor: f64) {
        for (_, block) in self.blocks_mut() {
            for v in block {
                *v *= factor;
            }
        }
    }
}

/// Deterministic parameter initialization.
///
/// Embedding rows are small Gaussian draws with row 0 zeroed; gate weights
/// are uniform within +-1/sqrt(fan-in); biases start at zero except the
/// forget gate at 1.0; the output head starts at zero so an untrained model
/// emits exactly 0.5 every hour.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_units);

    let mut embedding = Array2::zeros((v, e));
    for row in 1..v {
        for col in 0..e {
            embedding[[row, col]] = 0.1 * normal_draw(&mut rng);
        }
    }

    let kx = 1.0 / (e as f64).sqrt();
    let mut wx = Array2::zeros((GATES * h, e));
    for val in wx.iter_mut() {
        *val = rng.gen_range(-kx..kx);
    }
    let kh = 1.0 / (h as f64).sqrt();
    let mut wh = Array2::zeros((GATES * h, h));
    for val in wh.iter_mut() {
        *val = rng.gen_range(-kh..kh);
    }
    let mut bias = Array1::zeros(GATES * h);
    bias.slice_mut(s![h..2 * h]).fill(1.0); // forget gate

    Ok(ModelParams {
        config,
        embedding,
        agg_weight: Array1::zeros(v),
        wx,
        wh,
        bias,
        head_w: Array1::zeros(h),
        head_b: 0.0,
    })
}

fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout obvious
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Non-missing token occurrences of an hour, sorted by token index. Sorting
/// fixes the summation order, so aggregation is invariant to permutations of
/// the hour's events.
pub fn support_slots(token_ids: &[u32]) -> Vec<u32> {
    let mut slots: Vec<u32> = token_ids.iter().copied().filter(|&id| id != 0).collect();
    slots.sort_unstable();
    slots
}

/// Softmax weights over the surviving support slots. Returns parallel
/// (token_id, weight) vectors; empty when nothing survives.
fn softmax_weights(slots: &[u32], mask: Option<&[bool]>, params: &ModelParams) -> (Vec<u32>, Vec<f64>) {
    let survivors: Vec<u32> = match mask {
        None => slots.to_vec(),
        Some(m) => slots
            .iter()
            .zip(m)
            .filter_map(|(&id, &keep)| keep.then_some(id))
            .collect(),
    };
    if survivors.is_empty() {
        return (survivors, Vec::new());
    }
    let logits: Vec<f64> = survivors
        .iter()
        .map(|&id| params.agg_weight[id as usize])
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    (survivors, weights)
}

/// Aggregate one hour of token ids into an embedding-space vector: the
/// softmax-weighted average of the surviving tokens' embeddings. An empty
/// hour (or one whose tokens are all dropped or missing) aggregates to the
/// zero vector. `mask`, when given, must align with [`support_slots`] order.
pub fn aggregate_hour(
    token_ids: &[u32],
    params: &ModelParams,
    mask: Option<&[bool]>,
) -> Array1<f64> {
    let slots = support_slots(token_ids);
    let (survivors, weights) = softmax_weights(&slots, mask, params);
    let mut x = Array1::zeros(params.config.embed_dim);
    for (&id, &a) in survivors.iter().zip(&weights) {
        x.scaled_add(a, &params.embedding.row(id as usize));
    }
    x
}

/// One LSTM transition. `x` has embed_dim entries; the state pair is
/// (hidden, cell). Standard gate equations with the packed layout
/// [input, forget, cell, output].
pub fn lstm_step(
    x: &Array1<f64>,
    state: (&Array1<f64>, &Array1<f64>),
    params: &ModelParams,
) -> (Array1<f64>, Array1<f64>) {
    let (h_prev, c_prev) = state;
    let hidden = params.config.hidden_units;
    let pre = params.wx.dot(x) + params.wh.dot(h_prev) + &params.bias;
    let mut h = Array1::zeros(hidden);
    let mut c = Array1::zeros(hidden);
    for u in 0..hidden {
        let i = sigmoid(pre[u]);
        let f = sigmoid(pre[hidden + u]);
        let g = pre[2 * hidden + u].tanh();
        let o = sigmoid(pre[3 * hidden + u]);
        c[u] = f * c_prev[u] + i * g;
        h[u] = o * c[u].tanh();
    }
    (h, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-hour outputs of one stay.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Mortality probability for each observed hour, clamped into (0, 1).
    pub probs: Vec<f64>,
    /// L2 norm of the hidden state each hour, for inspection.
    pub hidden_norms: Vec<f64>,
}

struct HourCache {
    survivors: Vec<u32>,
    weights: Vec<f64>,
    x: Array1<f64>,
    gate_i: Array1<f64>,
    gate_f: Array1<f64>,
    gate_g: Array1<f64>,
    gate_o: Array1<f64>,
    c: Array1<f64>,
    tanh_c: Array1<f64>,
    h: Array1<f64>,
    sigma: f64,
    clamped: bool,
}

/// Retained forward state for one stay, consumed by [`backward_stay`].
pub struct ForwardPass {
    hours: Vec<HourCache>,
}

impl ForwardPass {
    pub fn observed_hours(&self) -> usize {
        self.hours.len()
    }
}

fn run_forward(
    stay: &TokenizedStay,
    params: &ModelParams,
    dropout: Option<(f64, u64)>,
    mut cache: Option<&mut Vec<HourCache>>,
) -> Trajectory {
    let hidden = params.config.hidden_units;
    let observed = stay.observed_hours.min(stay.horizon) as usize;
    let mut h: Array1<f64> = Array1::zeros(hidden);
    let mut c: Array1<f64> = Array1::zeros(hidden);
    let mut probs = Vec::with_capacity(observed);
    let mut hidden_norms = Vec::with_capacity(observed);
    let mut rng = dropout.map(|(q, seed)| (q, ChaCha8Rng::seed_from_u64(seed)));

    for t in 0..observed {
        let ids: &[u32] = stay.hours.get(t).map_or(&[], Vec::as_slice);
        let slots = support_slots(ids);
        let mask: Option<Vec<bool>> = match &mut rng {
            Some((q, rng)) if *q > 0.0 => {
                Some(slots.iter().map(|_| rng.gen::<f64>() >= *q).collect())
            }
            _ => None,
        };
        let (survivors, weights) = softmax_weights(&slots, mask.as_deref(), params);
        let mut x = Array1::zeros(params.config.embed_dim);
        for (&id, &a) in survivors.iter().zip(&weights) {
            x.scaled_add(a, &params.embedding.row(id as usize));
        }

        let pre = params.wx.dot(&x) + params.wh.dot(&h) + &params.bias;
        let mut gate_i = Array1::zeros(hidden);
        let mut gate_f = Array1::zeros(hidden);
        let mut gate_g = Array1::zeros(hidden);
        let mut gate_o = Array1::zeros(hidden);
        let mut c_new = Array1::zeros(hidden);
        let mut tanh_c = Array1::zeros(hidden);
        let mut h_new = Array1::zeros(hidden);
        for u in 0..hidden {
            let gi = sigmoid(pre[u]);
            let gf = sigmoid(pre[hidden + u]);
            let gg = pre[2 * hidden + u].tanh();
            let go = sigmoid(pre[3 * hidden + u]);
            let cu = gf * c[u] + gi * gg;
            let tc = cu.tanh();
            gate_i[u] = gi;
            gate_f[u] = gf;
            gate_g[u] = gg;
            gate_o[u] = go;
            c_new[u] = cu;
            tanh_c[u] = tc;
            h_new[u] = go * tc;
        }

        let z = params.head_w.dot(&h_new) + params.head_b;
        let sigma = sigmoid(z);
        let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&sigma);
        probs.push(sigma.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
        hidden_norms.push(h_new.dot(&h_new).sqrt());

        if let Some(hours) = cache.as_deref_mut() {
            hours.push(HourCache {
                survivors,
                weights,
                x: x.clone(),
                gate_i,
                gate_f,
                gate_g,
                gate_o,
                c: c_new.clone(),
                tanh_c,
                h: h_new.clone(),
                sigma,
                clamped,
            });
        }
        h = h_new;
        c = c_new;
    }
    Trajectory { probs, hidden_norms }
}

/// Forward pass over one stay. Eval mode applies no dropout and is fully
/// deterministic; train mode derives per-hour dropout masks from `seed`.
/// Hour `t`'s probability depends only on hours `<= t`.
pub fn forward(stay: &TokenizedStay, params: &ModelParams, mode: Mode, seed: u64) -> Trajectory {
    let dropout = match mode {
        Mode::Train if params.config.embedding_dropout > 0.0 => {
            Some((params.config.embedding_dropout, seed))
        }
        _ => None,
    };
    run_forward(stay, params, dropout, None)
}

/// Forward pass retaining the state needed for [`backward_stay`].
pub fn forward_cached(
    stay: &TokenizedStay,
    params: &ModelParams,
    dropout: Option<(f64, u64)>,
) -> (Trajectory, ForwardPass) {
    let mut hours = Vec::new();
    let trajectory = run_forward(stay, params, dropout, Some(&mut hours));
    (trajectory, ForwardPass { hours })
}

fn bce_term(p: f64, died: bool) -> f64 {
    let target = if died { 1.0 } else { 0.0 };
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Mean binary cross entropy between every hourly probability and the
/// stay-level outcome, over all (stay, observed hour) terms in the batch.
/// Stays with no observed hours contribute no terms.
pub fn loss(trajectories: &[Trajectory], died: &[bool]) -> f64 {
    assert_eq!(trajectories.len(), died.len());
    let mut sum = 0.0;
    let mut terms = 0usize;
    for (traj, &d) in trajectories.iter().zip(died) {
        for &p in &traj.probs {
            sum += bce_term(p, d);
            terms += 1;
        }
    }
    if terms == 0 {
        0.0
    } else {
        sum / terms as f64
    }
}

/// Unnormalized per-stay gradient contribution: d(sum of the stay's BCE
/// terms)/d(params), plus the stay's term count and loss sum.
struct StayBackward {
    terms: usize,
    loss_sum: f64,
    grads: Gradients,
}

fn backward_stay(pass: &ForwardPass, died: bool, params: &ModelParams) -> StayBackward {
    let hidden = params.config.hidden_units;
    let target = if died { 1.0 } else { 0.0 };
    let mut grads = params.zeros_like();
    let mut loss_sum = 0.0;

    let mut dh_next: Array1<f64> = Array1::zeros(hidden);
    let mut dc_next: Array1<f64> = Array1::zeros(hidden);
    for t in (0..pass.hours.len()).rev() {
        let hour = &pass.hours[t];
        let p = hour.sigma.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss_sum += bce_term(p, died);
        // d(term)/dz; zero in the clamped region, matching the implemented loss
        let dz = if hour.clamped { 0.0 } else { hour.sigma - target };

        let mut dh = dh_next;
        dh.scaled_add(dz, &params.head_w);
        grads.head_w.scaled_add(dz, &hour.h);
        grads.head_b += dz;

        let (h_prev, c_prev) = if t == 0 {
            (None, None)
        } else {
            (Some(&pass.hours[t - 1].h), Some(&pass.hours[t - 1].c))
        };

        let mut dpre = Array1::zeros(GATES * hidden);
        let mut dc = dc_next;
        for u in 0..hidden {
            let tc = hour.tanh_c[u];
            dc[u] += dh[u] * hour.gate_o[u] * (1.0 - tc * tc);
            let d_o = dh[u] * tc;
            let (gi, gf, gg, go) = (
                hour.gate_i[u],
                hour.gate_f[u],
                hour.gate_g[u],
                hour.gate_o[u],
            );
            let cp = c_prev.map_or(0.0, |c| c[u]);
            dpre[u] = dc[u] * gg * gi * (1.0 - gi);
            dpre[hidden + u] = dc[u] * cp * gf * (1.0 - gf);
            dpre[2 * hidden + u] = dc[u] * gi * (1.0 - gg * gg);
            dpre[3 * hidden + u] = d_o * go * (1.0 - go);
        }

        for (r, &dp) in dpre.iter().enumerate() {
            if dp != 0.0 {
                grads.wx.row_mut(r).scaled_add(dp, &hour.x);
                if let Some(hp) = h_prev {
                    grads.wh.row_mut(r).scaled_add(dp, hp);
                }
            }
        }
        grads.bias += &dpre;

        let dx = params.wx.t().dot(&dpre);
        dh_next = params.wh.t().dot(&dpre);
        dc_next = Array1::zeros(hidden);
        for u in 0..hidden {
            dc_next[u] = dc[u] * hour.gate_f[u];
        }

        // aggregation backward: softmax-weighted average of embeddings
        if !hour.survivors.is_empty() {
            let da: Vec<f64> = hour
                .survivors
                .iter()
                .map(|&id| params.embedding.row(id as usize).dot(&dx))
                .collect();
            let mix: f64 = hour.weights.iter().zip(&da).map(|(a, d)| a * d).sum();
            for ((&id, &a), &d) in hour.survivors.iter().zip(&hour.weights).zip(&da) {
                grads.agg_weight[id as usize] += a * (d - mix);
                grads
                    .embedding
                    .row_mut(id as usize)
                    .scaled_add(a, &dx);
            }
        }
    }
    // the missing token's embedding is frozen at zero
    grads.embedding.row_mut(0).fill(0.0);
    StayBackward {
        terms: pass.hours.len(),
        loss_sum,
        grads,
    }
}

/// Batch loss and exact gradients of the mean-reduced loss.
///
/// Stays evaluate independently (in parallel) and accumulate in batch order,
/// so results are bit-identical regardless of thread count. `dropout`, when
/// set, carries (probability, base seed); each stay uses a seed derived from
/// its batch position.
pub fn loss_and_gradients(
    batch: &[&TokenizedStay],
    params: &ModelParams,
    dropout: Option<(f64, u64)>,
) -> (f64, Gradients) {
    use rayon::prelude::*;
    let per_stay: Vec<StayBackward> = batch
        .par_iter()
        .enumerate()
        .map(|(i, stay)| {
            let plan = dropout.map(|(q, seed)| (q, derive_seed(seed, i as u64)));
            let (_, pass) = forward_cached(stay, params, plan);
            backward_stay(&pass, stay.died, params)
        })
        .collect();

    let mut grads = params.zeros_like();
    let mut loss_sum = 0.0;
    let mut terms = 0usize;
    for sb in &per_stay {
        grads.add_assign(&sb.grads);
        loss_sum += sb.loss_sum;
        terms += sb.terms;
    }
    if terms == 0 {
        return (0.0, grads);
    }
    grads.scale(1.0 / terms as f64);
    (loss_sum / terms as f64, grads)
}

/// Batch loss only (no gradient bookkeeping), same reduction and dropout
/// seeding as [`loss_and_gradients`].
pub fn batch_loss(
    batch: &[&TokenizedStay],
    params: &ModelParams,
    dropout: Option<(f64, u64)>,
) -> f64 {
    let mut sum = 0.0;
    let mut terms = 0usize;
    for (i, stay) in batch.iter().enumerate() {
        let plan = dropout.map(|(q, seed)| (q, derive_seed(seed, i as u64)));
        let traj = run_forward(stay, params, plan, None);
        for &p in &traj.probs {
            sum += bce_term(p, stay.died);
            terms += 1;
        }
    }
    if terms == 0 {
        0.0
    } else {
        sum / terms as f64
    }
}

/// Rank one hour's tokens by descending softmax weight; ties break by
/// ascending token index. Missing tokens are excluded. No dropout: ranking
/// is an inspection surface.
pub fn rank_hour(token_ids: &[u32], params: &ModelParams) -> Vec<(u32, f64)> {
    let slots = support_slots(token_ids);
    let (survivors, weights) = softmax_weights(&slots, None, params);
    let mut ranked: Vec<(u32, f64)> = survivors.into_iter().zip(weights).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked
}

const CHECKPOINT_HEADER: &str = "#checkpoint v1";

/// Serialize parameters as a self-describing text container: a header with
/// the config and normalization choice, then named blocks in row-major order
/// with exact-roundtrip floats.
pub fn render_checkpoint(params: &ModelParams) -> String {
    let cfg = &params.config;
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_HEADER}");
    let _ = writeln!(out, "vocab_size={}", cfg.vocab_size);
    let _ = writeln!(out, "embed_dim={}", cfg.embed_dim);
    let _ = writeln!(out, "hidden_units={}", cfg.hidden_units);
    let _ = writeln!(out, "embedding_dropout={}", fmt_f64(cfg.embedding_dropout));
    let _ = writeln!(out, "horizon_hours={}", cfg.horizon_hours);
    let _ = writeln!(out, "aggregation=softmax-weighted-mean");
    let _ = writeln!(out, "precision=f64");
    for (name, block) in params.blocks() {
        let _ = writeln!(out, "block {name} {}", block.len());
        for chunk in block.chunks(8) {
            let line: Vec<String> = chunk.iter().map(|v| fmt_f64(*v)).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
    }
    out
}

pub fn parse_checkpoint(text: &str) -> Result<ModelParams> {
    let mut lines = text.lines().peekable();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(Error::data("checkpoint has an unrecognized header"));
    }
    let mut fields = std::collections::HashMap::new();
    while let Some(line) = lines.peek() {
        if line.starts_with("block ") {
            break;
        }
        let line = lines.next().unwrap();
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    let get = |key: &str| -> Result<&String> {
        fields
            .get(key)
            .ok_or_else(|| Error::data(format!("checkpoint header is missing {key}")))
    };
    let config = ModelConfig {
        vocab_size: get("vocab_size")?.parse().map_err(|_| Error::data("bad vocab_size"))?,
        embed_dim: get("embed_dim")?.parse().map_err(|_| Error::data("bad embed_dim"))?,
        hidden_units: get("hidden_units")?
            .parse()
            .map_err(|_| Error::data("bad hidden_units"))?,
        embedding_dropout: get("embedding_dropout")?
            .parse()
            .map_err(|_| Error::data("bad embedding_dropout"))?,
        horizon_hours: get("horizon_hours")?
            .parse()
            .map_err(|_| Error::data("bad horizon_hours"))?,
    };
    config.validate()?;
    let mut params = init_params(config, 0)?;
    // overwrite every block from the file
    for (name, block) in params.blocks_mut() {
        let decl = lines
            .next()
            .ok_or_else(|| Error::data(format!("checkpoint is missing block {name}")))?;
        let expected = format!("block {name} {}", block.len());
        if decl != expected {
            return Err(Error::data(format!(
                "checkpoint block mismatch: expected '{expected}', found '{decl}'"
            )));
        }
        let mut filled = 0usize;
        while filled < block.len() {
            let line = lines
                .next()
                .ok_or_else(|| Error::data(format!("checkpoint block {name} is truncated")))?;
            for field in line.split_whitespace() {
                if filled >= block.len() {
                    return Err(Error::data(format!("checkpoint block {name} has extra values")));
                }
                block[filled] = field
                    .parse()
                    .map_err(|_| Error::data(format!("checkpoint block {name}: bad float")))?;
                filled += 1;
            }
        }
    }
    if !params.all_finite() {
        return Err(Error::data("checkpoint contains non-finite values"));
    }
    if params.embedding.row(0).iter().any(|&v| v != 0.0) {
        return Err(Error::data("checkpoint violates the zero missing-embedding row"));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    crate::util::atomic_write(path, render_checkpoint(params).as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

/// Text sidecar tying a checkpoint to the vocabulary it was trained with.
pub fn render_checkpoint_meta(vocab_sha256: &str, seed: u64, extra: &[(&str, String)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "vocab_sha256={vocab_sha256}");
    let _ = writeln!(out, "training_seed={seed}");
    for (k, v) in extra {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            embed_dim: 3,
            hidden_units: 4,
            embedding_dropout: 0.0,
            horizon_hours: 4,
        }
    }

    fn stay(id: &str, died: bool, hours: Vec<Vec<u32>>) -> TokenizedStay {
        let observed_hours = hours
            .iter()
            .rposition(|h| !h.is_empty())
            .map_or(0, |p| p as u32 + 1);
        TokenizedStay {
            stay_id: id.to_string(),
            died,
            horizon: hours.len() as u32,
            observed_hours,
            hours,
        }
    }

    /// A stay whose observed window includes trailing empty hours.
    fn stay_full_window(id: &str, died: bool, hours: Vec<Vec<u32>>) -> TokenizedStay {
        TokenizedStay {
            stay_id: id.to_string(),
            died,
            horizon: hours.len() as u32,
            observed_hours: hours.len() as u32,
            hours,
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_params(tiny_config(), 9).unwrap();
        let b = init_params(tiny_config(), 9).unwrap();
        assert_eq!(a, b);
        let c = init_params(tiny_config(), 10).unwrap();
        assert_ne!(a, c);

        assert_eq!(a.embedding.shape(), &[8, 3]);
        assert!(a.embedding.row(0).iter().all(|&v| v == 0.0));
        // forget-gate bias 1, everything else 0
        for u in 0..4 {
            assert_eq!(a.bias[u], 0.0);
            assert_eq!(a.bias[4 + u], 1.0);
            assert_eq!(a.bias[8 + u], 0.0);
            assert_eq!(a.bias[12 + u], 0.0);
        }
        assert!(a.head_w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_single_token_is_its_embedding() {
        let params = init_params(tiny_config(), 1).unwrap();
        let x = aggregate_hour(&[3], &params, None);
        assert_eq!(x, params.embedding.row(3).to_owned());
    }

    #[test]
    fn aggregate_empty_hour_is_zero() {
        let params = init_params(tiny_config(), 1).unwrap();
        let x = aggregate_hour(&[], &params, None);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_equal_weights_is_mean() {
        let mut params = init_params(tiny_config(), 1).unwrap();
        params.agg_weight.fill(0.25);
        let x = aggregate_hour(&[2, 5], &params, None);
        let mean = (&params.embedding.row(2) + &params.embedding.row(5)) * 0.5;
        for (a, b) in x.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_ignores_missing_tokens_exactly() {
        let params = init_params(tiny_config(), 2).unwrap();
        let base = aggregate_hour(&[2, 5, 3], &params, None);
        let with_missing = aggregate_hour(&[0, 2, 0, 5, 3, 0, 0], &params, None);
        assert_eq!(base, with_missing);
    }

    #[test]
    fn aggregate_is_permutation_invariant_bitwise() {
        let params = init_params(tiny_config(), 3).unwrap();
        let a = aggregate_hour(&[5, 2, 2, 7, 3], &params, None);
        let b = aggregate_hour(&[7, 3, 2, 5, 2], &params, None);
        assert_eq!(a, b);
    }

    #[test]
    fn lstm_step_zero_everything_closed_form() {
        let mut params = init_params(tiny_config(), 4).unwrap();
        params.wx.fill(0.0);
        params.wh.fill(0.0);
        let x = Array1::zeros(3);
        let h0 = Array1::zeros(4);
        let c0 = Array1::zeros(4);
        let (h, c) = lstm_step(&x, (&h0, &c0), &params);
        // i=sigma(0), f=sigma(1), g=tanh(0)=0, o=sigma(0): c'=0, h'=0
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_matches_scalar_recurrence_oracle() {
        // hidden_units = 1: an independent scalar implementation of the
        // gate algebra must reproduce the cell trajectory exactly
        let config = ModelConfig {
            vocab_size: 4,
            embed_dim: 1,
            hidden_units: 1,
            embedding_dropout: 0.0,
            horizon_hours: 6,
        };
        let params = init_params(config, 5).unwrap();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let x_val = 0.37;
        let x = ndarray::arr1(&[x_val]);
        let (mut h, mut c) = (Array1::zeros(1), Array1::zeros(1));
        let (mut h_oracle, mut c_oracle) = (0.0f64, 0.0f64);
        for _ in 0..6 {
            let (hn, cn) = lstm_step(&x, (&h, &c), &params);
            let pre_i = params.wx[[0, 0]] * x_val + params.wh[[0, 0]] * h_oracle + params.bias[0];
            let pre_f = params.wx[[1, 0]] * x_val + params.wh[[1, 0]] * h_oracle + params.bias[1];
            let pre_g = params.wx[[2, 0]] * x_val + params.wh[[2, 0]] * h_oracle + params.bias[2];
            let pre_o = params.wx[[3, 0]] * x_val + params.wh[[3, 0]] * h_oracle + params.bias[3];
            c_oracle = sig(pre_f) * c_oracle + sig(pre_i) * pre_g.tanh();
            h_oracle = sig(pre_o) * c_oracle.tanh();
            assert!((cn[0] - c_oracle).abs() < 1e-15);
            assert!((hn[0] - h_oracle).abs() < 1e-15);
            h = hn;
            c = cn;
        }
    }

    #[test]
    fn lstm_cell_growth_is_bounded() {
        let params = init_params(tiny_config(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut h = Array1::zeros(4);
        let mut c = Array1::zeros(4);
        for _ in 0..50 {
            let x = Array1::from_iter((0..3).map(|_| rng.gen_range(-2.0..2.0)));
            let (hn, cn) = lstm_step(&x, (&h, &c), &params);
            for u in 0..4 {
                assert!(cn[u].abs() <= c[u].abs() + 1.0 + 1e-12);
            }
            h = hn;
            c = cn;
        }
    }

    #[test]
    fn untrained_model_emits_exactly_half() {
        let params = init_params(tiny_config(), 7).unwrap();
        let s = stay("s", true, vec![vec![2, 3], vec![4], vec![]]);
        let traj = forward(&s, &params, Mode::Eval, 0);
        assert_eq!(traj.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn eval_forward_is_deterministic_and_causal() {
        let mut params = init_params(tiny_config(), 8).unwrap();
        // give the head nonzero weights so probabilities move
        params.head_w.fill(0.3);
        params.agg_weight[3] = 0.7;
        let full = stay_full_window("s", false, vec![vec![2, 3], vec![4, 4], vec![5], vec![6]]);
        let t1 = forward(&full, &params, Mode::Eval, 0);
        let t2 = forward(&full, &params, Mode::Eval, 123);
        assert_eq!(t1, t2);

        // truncating future hours leaves the prefix bit-identical
        let truncated = stay_full_window("s", false, vec![vec![2, 3], vec![4, 4]]);
        let t3 = forward(&truncated, &params, Mode::Eval, 0);
        assert_eq!(&t1.probs[..2], t3.probs.as_slice());

        // mutating a future hour leaves earlier probabilities unchanged
        let mutated = stay_full_window("s", false, vec![vec![2, 3], vec![4, 4], vec![7, 7], vec![6]]);
        let t4 = forward(&mutated, &params, Mode::Eval, 0);
        assert_eq!(&t1.probs[..2], &t4.probs[..2]);
        assert_ne!(t1.probs[2], t4.probs[2]);
    }

    #[test]
    fn loss_closed_forms() {
        let perfect = Trajectory {
            probs: vec![1.0 - PROB_CLAMP; 3],
            hidden_norms: vec![0.0; 3],
        };
        assert!(loss(&[perfect], &[true]) < 1e-6);

        let half = Trajectory {
            probs: vec![0.5, 0.5],
            hidden_norms: vec![0.0; 2],
        };
        let l = loss(&[half], &[false]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_term_by_term_oracle() {
        // 2 stays x 2 hours, enumerated by hand
        let t1 = Trajectory {
            probs: vec![0.8, 0.6],
            hidden_norms: vec![0.0; 2],
        };
        let t2 = Trajectory {
            probs: vec![0.3, 0.1],
            hidden_norms: vec![0.0; 2],
        };
        let l = loss(&[t1, t2], &[true, false]);
        let oracle = (-(0.8f64.ln()) - 0.6f64.ln() - 0.7f64.ln() - 0.9f64.ln()) / 4.0;
        assert!((l - oracle).abs() < 1e-15);
    }

    #[test]
    fn unused_vocab_entries_have_zero_gradient() {
        let mut params = init_params(tiny_config(), 11).unwrap();
        params.head_w.fill(0.4);
        let s = stay("s", true, vec![vec![2, 3], vec![3]]);
        let (_, grads) = loss_and_gradients(&[&s], &params, None);
        for unused in [1usize, 4, 5, 6, 7] {
            assert!(grads.embedding.row(unused).iter().all(|&v| v == 0.0));
            assert_eq!(grads.agg_weight[unused], 0.0);
        }
        assert!(grads.embedding.row(0).iter().all(|&v| v == 0.0));
        assert!(grads.embedding.row(2).iter().any(|&v| v != 0.0));
    }

    /// Central finite differences over every parameter of a small config.
    fn finite_difference_max_rel_err(
        batch: &[&TokenizedStay],
        params: &ModelParams,
        dropout: Option<(f64, u64)>,
    ) -> f64 {
        let (_, grads) = loss_and_gradients(batch, params, dropout);
        let step = 1e-4;
        let mut max_rel = 0.0f64;
        let mut work = params.clone();
        let n_blocks = work.blocks_mut().len();
        for block_ix in 0..n_blocks {
            let len = work.blocks_mut()[block_ix].1.len();
            for i in 0..len {
                let original = work.blocks_mut()[block_ix].1[i];
                work.blocks_mut()[block_ix].1[i] = original + step;
                let up = batch_loss(batch, &work, dropout);
                work.blocks_mut()[block_ix].1[i] = original - step;
                let down = batch_loss(batch, &work, dropout);
                work.blocks_mut()[block_ix].1[i] = original;
                let numeric = (up - down) / (2.0 * step);
                let analytic = grads.blocks()[block_ix].1[i];
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                max_rel = max_rel.max((numeric - analytic).abs() / denom);
            }
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        let config = ModelConfig {
            vocab_size: 7,
            embed_dim: 3,
            hidden_units: 2,
            embedding_dropout: 0.0,
            horizon_hours: 3,
        };
        let mut params = init_params(config, 12).unwrap();
        // move the head off zero so head gradients are generic
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for v in params.head_w.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in params.agg_weight.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        // duplicate token in hour 0, a missing token, and an empty hour
        let s1 = stay_full_window("a", true, vec![vec![2, 2, 3, 0], vec![], vec![4]]);
        let s2 = stay_full_window("b", false, vec![vec![5], vec![6, 2], vec![]]);
        let err = finite_difference_max_rel_err(&[&s1, &s2], &params, None);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout() {
        // fixed dropout seed makes the masked loss a deterministic function
        let config = ModelConfig {
            vocab_size: 6,
            embed_dim: 2,
            hidden_units: 2,
            embedding_dropout: 0.5,
            horizon_hours: 2,
        };
        let mut params = init_params(config, 13).unwrap();
        params.head_w.fill(0.2);
        let s = stay_full_window("a", true, vec![vec![2, 3, 4, 5], vec![2, 2]]);
        let err = finite_difference_max_rel_err(&[&s], &params, Some((0.5, 77)));
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn dropout_mean_matches_enumeration_oracle() {
        // three tokens, q = 0.4: enumerate all survivor subsets exactly,
        // then check the Monte Carlo mean at 3 sigma
        let mut params = init_params(tiny_config(), 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in params.agg_weight.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let ids = [2u32, 3, 5];
        let q = 0.4;

        let slots = support_slots(&ids);
        let mut expected = Array1::<f64>::zeros(3);
        for subset in 0u32..8 {
            let mask: Vec<bool> = (0..3).map(|k| subset >> k & 1 == 1).collect();
            let p: f64 = mask
                .iter()
                .map(|&keep| if keep { 1.0 - q } else { q })
                .product();
            let agg = aggregate_hour(&slots, &params, Some(&mask));
            expected.scaled_add(p, &agg);
        }

        let n = 200_000;
        let mut mean = Array1::<f64>::zeros(3);
        let mut m2 = Array1::<f64>::zeros(3);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..n {
            let mask: Vec<bool> = (0..3).map(|_| mask_rng.gen::<f64>() >= q).collect();
            let agg = aggregate_hour(&slots, &params, Some(&mask));
            let count = (i + 1) as f64;
            for k in 0..3 {
                let delta = agg[k] - mean[k];
                mean[k] += delta / count;
                m2[k] += delta * (agg[k] - mean[k]);
            }
        }
        for k in 0..3 {
            let se = (m2[k] / (n as f64 - 1.0) / n as f64).sqrt();
            assert!(
                (mean[k] - expected[k]).abs() <= 3.0 * se.max(1e-12),
                "component {k}: mc {} vs exact {} (se {se})",
                mean[k],
                expected[k]
            );
        }
    }

    #[test]
    fn rank_hour_orders_by_weight_then_index() {
        let mut params = init_params(tiny_config(), 15).unwrap();
        params.agg_weight[2] = 0.1;
        params.agg_weight[3] = 0.9;
        params.agg_weight[5] = 0.1;
        let ranked = rank_hour(&[5, 3, 2], &params);
        assert_eq!(ranked.len(), 3);
        assert_eq!(ranked[0].0, 3);
        // tie between 2 and 5 breaks by ascending index
        assert_eq!(ranked[1].0, 2);
        assert_eq!(ranked[2].0, 5);
        let total: f64 = ranked.iter().map(|r| r.1).sum();
        assert!((total - 1.0).abs() < 1e-12);

        assert!(rank_hour(&[], &params).is_empty());
        assert!(rank_hour(&[0, 0], &params).is_empty());
    }

    #[test]
    fn checkpoint_roundtrips_bit_exactly() {
        let mut params = init_params(tiny_config(), 16).unwrap();
        params.head_b = -0.1234567890123456789;
        let text = render_checkpoint(&params);
        let back = parse_checkpoint(&text).unwrap();
        assert_eq!(back, params);
        assert_eq!(render_checkpoint(&back), text);
    }

    #[test]
    fn checkpoint_rejects_corrupt_input() {
        let params = init_params(tiny_config(), 17).unwrap();
        let text = render_checkpoint(&params);
        assert!(parse_checkpoint(&text.replace("block embedding", "block emb")).is_err());
        assert!(parse_checkpoint("#other v1\n").is_err());
    }
}
