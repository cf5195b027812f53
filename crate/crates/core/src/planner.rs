//! Masked latent-video planner.
//!
//! A factorized space-time transformer predicts rectified-flow velocities
//! over temporally compressed video tokens. During training a mask pattern
//! splits each window's tokens into conditioning (kept clean) and masked
//! (noised) frames; the loss is taken on masked tokens only. At test time
//! the first token row holds the encoded observation history and the rest
//! are integrated from noise, re-clamping the conditioning token after
//! every Euler step. Decoded future frames serve as goal images.

use crate::checkpoint::{ParamStore, ParamVars};
use crate::codec::Codec;
use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{psnr, ssim};
use crate::nn::{time_features, EmbeddingTable, LayerNormLayer, Linear, MultiHeadAttention};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::rectified_flow::sample_flow_time;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

// ── mask patterns ───────────────────────────────────────────────────────

/// Conditioning patterns over the latent time axis. `true` marks a frame
/// to generate; `false` marks a frame the model may condition on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Random,
    Interpolate,
    QuarterRandom,
    QuarterHead,
    QuarterTail,
    QuarterHeadTail,
    ImageRandom,
    ImageHead,
    ImageTail,
    ImageHeadTail,
}

pub const MASK_KINDS: [MaskKind; 10] = [
    MaskKind::Random,
    MaskKind::Interpolate,
    MaskKind::QuarterRandom,
    MaskKind::QuarterHead,
    MaskKind::QuarterTail,
    MaskKind::QuarterHeadTail,
    MaskKind::ImageRandom,
    MaskKind::ImageHead,
    MaskKind::ImageTail,
    MaskKind::ImageHeadTail,
];

/// Sampling weights; head-conditioned prediction dominates because it is
/// the pattern used at test time.
pub const MASK_WEIGHTS: [f32; 10] =
    [0.025, 0.025, 0.025, 0.75, 0.025, 0.05, 0.0, 0.025, 0.025, 0.05];

/// Draw a pattern for `t_lat` latent frames. Always returns at least one
/// masked frame.
pub fn sample_mask(
    rng: &mut StreamRng,
    t_lat: usize,
    weights: &[f32; 10],
) -> (MaskKind, Vec<bool>) {
    assert!(t_lat >= 2, "mask patterns need at least two latent frames");
    let kind = MASK_KINDS[rng.weighted(weights)];
    let mask = mask_for(kind, rng, t_lat);
    (kind, mask)
}

/// The pattern for one kind; exposed so tests can pin each kind's shape.
pub fn mask_for(kind: MaskKind, rng: &mut StreamRng, t_lat: usize) -> Vec<bool> {
    let quarter = (t_lat / 4).max(1);
    let mut mask = vec![true; t_lat];
    match kind {
        MaskKind::Random => {
            for m in mask.iter_mut() {
                *m = rng.uniform() < 0.5;
            }
        }
        MaskKind::Interpolate => {
            for (j, m) in mask.iter_mut().enumerate() {
                *m = j % 2 == 1;
            }
        }
        MaskKind::QuarterRandom => {
            let h = rng.int_in(1, quarter);
            for _ in 0..h {
                // Unmask h distinct positions.
                loop {
                    let j = rng.below(t_lat);
                    if mask[j] {
                        mask[j] = false;
                        break;
                    }
                }
            }
        }
        MaskKind::QuarterHead => {
            let h = rng.int_in(1, quarter);
            for m in mask.iter_mut().take(h) {
                *m = false;
            }
        }
        MaskKind::QuarterTail => {
            let h = rng.int_in(1, quarter);
            for m in mask.iter_mut().skip(t_lat - h) {
                *m = false;
            }
        }
        MaskKind::QuarterHeadTail => {
            // Cap so the middle keeps at least one generated frame.
            let h = rng.int_in(1, quarter).min((t_lat - 1) / 2);
            for m in mask.iter_mut().take(h) {
                *m = false;
            }
            for m in mask.iter_mut().skip(t_lat - h) {
                *m = false;
            }
        }
        MaskKind::ImageRandom => {
            mask[rng.below(t_lat)] = false;
        }
        MaskKind::ImageHead => {
            mask[0] = false;
        }
        MaskKind::ImageTail => {
            mask[t_lat - 1] = false;
        }
        MaskKind::ImageHeadTail => {
            mask[0] = false;
            mask[t_lat - 1] = false;
        }
    }
    if mask.iter().all(|&m| !m) {
        mask[t_lat / 2] = true;
    }
    mask
}

// ── model ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct PlannerConfig {
    pub n_layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Planning window in pixel frames; the first `n_cond` are history.
    pub horizon: usize,
    pub n_cond: usize,
    pub time_dim: usize,
    pub vocab: usize,
    /// Training-time mask-kind weights, in `MASK_KINDS` order.
    pub mask_weights: [f32; 10],
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            n_layers: 4,
            width: 128,
            heads: 4,
            horizon: 16,
            n_cond: 4,
            time_dim: 32,
            vocab: crate::world::VOCAB,
            mask_weights: MASK_WEIGHTS,
        }
    }
}

struct PlannerLayer {
    ln1: LayerNormLayer,
    ln2: LayerNormLayer,
    ln3: LayerNormLayer,
    spatial: MultiHeadAttention,
    temporal: MultiHeadAttention,
    mlp1: Linear,
    mlp2: Linear,
}

pub struct Planner {
    pub cfg: PlannerConfig,
    t_lat: usize,
    c_t: usize,
    side: usize,
    embed_in: Linear,
    spatial_pos: String,
    temporal_pos: String,
    mask_table: EmbeddingTable,
    time_proj: Linear,
    instr_table: EmbeddingTable,
    layers: Vec<PlannerLayer>,
    final_ln: LayerNormLayer,
    head: Linear,
}

type NResult<T> = std::result::Result<T, NumericsError>;

impl Planner {
    pub fn init(
        store: &mut ParamStore,
        seed: u64,
        cfg: PlannerConfig,
        codec_cfg: &crate::codec::CodecConfig,
    ) -> Result<Planner> {
        if cfg.horizon % codec_cfg.f_t != 0 || cfg.n_cond % codec_cfg.f_t != 0 {
            return Err(NumericsError::InvalidShape {
                op: "planner_init",
                shape: vec![cfg.horizon, cfg.n_cond],
                reason: format!("horizon/condition not divisible by f_t {}", codec_cfg.f_t),
            }
            .into());
        }
        let t_lat = cfg.horizon / codec_cfg.f_t;
        if t_lat < 2 {
            return Err(NumericsError::InvalidShape {
                op: "planner_init",
                shape: vec![t_lat],
                reason: "need at least two latent frames".into(),
            }
            .into());
        }
        let wsum: f32 = cfg.mask_weights.iter().sum();
        if cfg.mask_weights.iter().any(|&w| w < 0.0) || (wsum - 1.0).abs() > 1e-3 {
            return Err(NumericsError::InvalidShape {
                op: "planner_init",
                shape: vec![cfg.mask_weights.len()],
                reason: format!("mask weights must be nonnegative and sum to 1 (sum = {wsum})"),
            }
            .into());
        }
        let side = codec_cfg.latent_side();
        let s = side * side;
        let d = cfg.width;
        let mut init = |name: &str, shape: &[usize], scale: f32| {
            let mut rng = StreamRng::derive(seed, &format!("init/{name}"), 0);
            let t = Tensor::randn(shape, scale, &mut rng).expect("finite init");
            store.insert(name.to_string(), t);
        };
        init("planner.pos.spatial", &[s, d], 0.02);
        init("planner.pos.temporal", &[t_lat, d], 0.02);
        let embed_in = Linear::init(store, seed, "planner.embed_in", codec_cfg.c_t, d, true);
        let mask_table = EmbeddingTable::init(store, seed, "planner.mask_bit", 2, d);
        let time_proj = Linear::init(store, seed, "planner.time_proj", cfg.time_dim, d, true);
        let instr_table = EmbeddingTable::init(store, seed, "planner.instr", cfg.vocab, d);
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let p = format!("planner.layer{l}");
            layers.push(PlannerLayer {
                ln1: LayerNormLayer::init(store, &format!("{p}.ln1"), d),
                ln2: LayerNormLayer::init(store, &format!("{p}.ln2"), d),
                ln3: LayerNormLayer::init(store, &format!("{p}.ln3"), d),
                spatial: MultiHeadAttention::init(store, seed, &format!("{p}.spat"), d, cfg.heads),
                temporal: MultiHeadAttention::init(store, seed, &format!("{p}.temp"), d, cfg.heads),
                mlp1: Linear::init(store, seed, &format!("{p}.mlp1"), d, 4 * d, true),
                mlp2: Linear::init(store, seed, &format!("{p}.mlp2"), 4 * d, d, true),
            });
        }
        let final_ln = LayerNormLayer::init(store, "planner.final_ln", d);
        let head = Linear::init(store, seed, "planner.head", d, codec_cfg.c_t, true);
        Ok(Planner {
            cfg,
            t_lat,
            c_t: codec_cfg.c_t,
            side,
            embed_in,
            spatial_pos: "planner.pos.spatial".to_string(),
            temporal_pos: "planner.pos.temporal".to_string(),
            mask_table,
            time_proj,
            instr_table,
            layers,
            final_ln,
            head,
        })
    }

    pub fn t_lat(&self) -> usize {
        self.t_lat
    }

    /// Velocity prediction. `tokens` is `[B, T, c_t, side, side]`, `mask`
    /// is row-major `[B * T]` (true = generated frame), `times` has one
    /// flow time per sample, `instr` one instruction id per sample.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        tokens: Var,
        mask: &[bool],
        times: &[f32],
        instr: &[usize],
    ) -> NResult<Var> {
        let shape = g.value(tokens).shape().to_vec();
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let (h, w) = (shape[3], shape[4]);
        let s = h * w;
        let d = self.cfg.width;
        assert_eq!(mask.len(), b * t, "one mask bit per latent frame");
        assert_eq!(times.len(), b, "one flow time per sample");
        assert_eq!(instr.len(), b, "one instruction per sample");

        // [B,T,c,h,w] -> [B,T,S,c] tokens with channels last.
        let x = g.transpose(tokens, 2, 3)?; // [B,T,h,c,w]
        let x = g.transpose(x, 3, 4)?; // [B,T,h,w,c]
        let x = g.reshape(x, &[b, t, s, c])?;
        let mut x = self.embed_in.forward(g, vars, x)?;

        // Positional, mask-bit, and flow-time conditioning.
        let sp = vars.var(&self.spatial_pos);
        x = g.add(x, sp)?;
        let tp = vars.var(&self.temporal_pos);
        let tp = g.reshape(tp, &[t, 1, d])?;
        x = g.add(x, tp)?;
        let mask_ids: Vec<usize> = mask.iter().map(|&m| m as usize).collect();
        let mb = self.mask_table.lookup(g, vars, &mask_ids)?;
        let mb = g.reshape(mb, &[b, t, 1, d])?;
        x = g.add(x, mb)?;
        let tf = g.input(time_features(times, self.cfg.time_dim));
        let te = self.time_proj.forward(g, vars, tf)?;
        let te = g.reshape(te, &[b, 1, 1, d])?;
        x = g.add(x, te)?;

        // Instruction token used as a prefix in temporal attention.
        let ie = self.instr_table.lookup(g, vars, instr)?; // [B, D]
        let ie = g.reshape(ie, &[b, 1, d])?;
        let ie = g.repeat_axis(ie, 1, s)?; // [B, S, D]
        let prefix = g.reshape(ie, &[b * s, 1, d])?;

        for layer in &self.layers {
            // Attention across space within each frame.
            let n1 = layer.ln1.forward(g, vars, x)?;
            let flat = g.reshape(n1, &[b * t, s, d])?;
            let at = layer.spatial.forward(g, vars, flat)?;
            let at = g.reshape(at, &[b, t, s, d])?;
            x = g.add(x, at)?;

            // Attention across time (plus instruction prefix) per position.
            let n2 = layer.ln2.forward(g, vars, x)?;
            let tt = g.transpose(n2, 1, 2)?; // [B,S,T,D]
            let tt = g.reshape(tt, &[b * s, t, d])?;
            let seq = g.concat(&[prefix, tt], 1)?; // [B*S, T+1, D]
            let at = layer.temporal.forward(g, vars, seq)?;
            let at = g.narrow(at, 1, 1, t)?;
            let at = g.reshape(at, &[b, s, t, d])?;
            let at = g.transpose(at, 1, 2)?;
            x = g.add(x, at)?;

            let n3 = layer.ln3.forward(g, vars, x)?;
            let m = layer.mlp1.forward(g, vars, n3)?;
            let m = g.gelu(m)?;
            let m = layer.mlp2.forward(g, vars, m)?;
            x = g.add(x, m)?;
        }

        let out = self.final_ln.forward(g, vars, x)?;
        let out = self.head.forward(g, vars, out)?; // [B,T,S,c]
        let out = g.reshape(out, &[b, t, h, w, c])?;
        let out = g.transpose(out, 3, 4)?; // [B,T,h,c,w]
        let out = g.transpose(out, 2, 3)?; // [B,T,c,h,w]
        Ok(out)
    }
}

// ── training ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct PlannerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub grad_clip: f32,
    pub ema_decay: f32,
    pub log_every: usize,
}

impl Default for PlannerTrainConfig {
    fn default() -> Self {
        PlannerTrainConfig {
            steps: 3000,
            batch: 6,
            lr: 1e-4,
            grad_clip: 1.0,
            ema_decay: 0.99,
            log_every: 50,
        }
    }
}

/// Exponential moving average of every parameter, kept in a second store.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f32) {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let p = params.get(&name);
        let e = ema.get(&name);
        let data: Vec<f32> = e
            .data()
            .iter()
            .zip(p.data())
            .map(|(&ev, &pv)| decay * ev + (1.0 - decay) * pv)
            .collect();
        let t = Tensor::new(e.shape().to_vec(), data).expect("finite ema");
        ema.insert(name, t);
    }
}

/// Temporal tokens for a batch of latent windows, computed with the codec
/// frozen (the planner never backpropagates into the codec).
fn encode_windows(
    codec: &Codec,
    codec_params: &ParamStore,
    windows: Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = codec_params.attach_frozen(&mut g);
    let x = g.input(windows);
    let tok = codec.encode_temporal(&mut g, &vars, x)?;
    Ok(g.value(tok).clone())
}

pub struct PlannerBatch {
    pub tokens: Tensor,
    pub mask: Vec<bool>,
    pub times: Vec<f32>,
    pub instr: Vec<usize>,
    pub x_t: Tensor,
    pub target: Tensor,
    pub weights: Tensor,
    pub n_masked: usize,
}

/// Assemble one masked flow-matching batch from clean tokens.
pub fn make_flow_batch(
    clean: &Tensor,
    instr: Vec<usize>,
    mask_weights: &[f32; 10],
    rng: &mut StreamRng,
) -> Result<PlannerBatch> {
    let shape = clean.shape().to_vec();
    let (b, t) = (shape[0], shape[1]);
    let per = shape[2] * shape[3] * shape[4];
    let mut mask = Vec::with_capacity(b * t);
    let mut times = Vec::with_capacity(b);
    for _ in 0..b {
        let (_, m) = sample_mask(rng, t, mask_weights);
        mask.extend(m);
        times.push(sample_flow_time(rng));
    }
    let noise = Tensor::randn(&shape, 1.0, rng)?;
    let mut x_t = Vec::with_capacity(clean.numel());
    let mut target = Vec::with_capacity(clean.numel());
    let mut weights = Vec::with_capacity(clean.numel());
    let mut n_masked = 0usize;
    for bi in 0..b {
        let tt = times[bi];
        for ti in 0..t {
            let off = (bi * t + ti) * per;
            let c = &clean.data()[off..off + per];
            let n = &noise.data()[off..off + per];
            if mask[bi * t + ti] {
                n_masked += per;
                for i in 0..per {
                    x_t.push((1.0 - tt) * c[i] + tt * n[i]);
                    target.push(n[i] - c[i]);
                    weights.push(1.0);
                }
            } else {
                x_t.extend_from_slice(c);
                target.extend(std::iter::repeat(0.0).take(per));
                weights.extend(std::iter::repeat(0.0).take(per));
            }
        }
    }
    Ok(PlannerBatch {
        tokens: clean.clone(),
        mask,
        times,
        instr,
        x_t: Tensor::new(shape.clone(), x_t)?,
        target: Tensor::new(shape.clone(), target)?,
        weights: Tensor::new(shape, weights)?,
        n_masked,
    })
}

/// One optimization step on a prepared batch; returns the masked loss.
pub fn planner_train_step(
    planner: &Planner,
    params: &mut ParamStore,
    ema: &mut ParamStore,
    adam: &mut Adam,
    batch: &PlannerBatch,
    grad_clip: f32,
    ema_decay: f32,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.attach(&mut g);
    let x = g.input(batch.x_t.clone());
    let v = planner.forward(&mut g, &vars, x, &batch.mask, &batch.times, &batch.instr)?;
    let tgt = g.input(batch.target.clone());
    let wts = g.input(batch.weights.clone());
    let diff = g.sub(v, tgt)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, wts)?;
    let total = g.sum_all(weighted)?;
    let loss = g.scale(total, 1.0 / batch.n_masked.max(1) as f32)?;
    let loss_val = g.value(loss).item() as f64;
    let grads = g.backward(loss)?;
    let mut named = vars.grads(&grads);
    clip_global_norm(&mut named, grad_clip);
    adam.step(params, &named, None)?;
    ema_update(ema, params, ema_decay);
    Ok(loss_val)
}

/// Full training loop over a latent cache (`latents[i]` is episode i's
/// spatial mean latents `[T_ep, c_s, side, side]`). Returns the loss curve
/// and leaves EMA weights in `ema`.
#[allow(clippy::too_many_arguments)]
/// Largest window start whose generated segment still overlaps the active
/// (pre-success) phase of each episode. Windows past this point show a
/// finished, static scene.
pub fn active_window_limits(
    episodes: &[crate::dataset::Episode],
    frame: usize,
    horizon: usize,
    n_cond: usize,
) -> Vec<usize> {
    episodes
        .iter()
        .map(|ep| {
            let hi = ep.n_frames(frame) - horizon;
            match ep.first_success() {
                Some(s) => s.saturating_sub(n_cond).min(hi),
                None => hi,
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn train_planner(
    planner: &Planner,
    codec: &Codec,
    codec_params: &ParamStore,
    params: &mut ParamStore,
    ema: &mut ParamStore,
    latents: &[Tensor],
    instr_ids: &[usize],
    active_hi: &[usize],
    cfg: PlannerTrainConfig,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    assert_eq!(latents.len(), instr_ids.len());
    assert_eq!(latents.len(), active_hi.len());
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut curve = Vec::new();
    let horizon = planner.cfg.horizon;
    let c = codec.cfg.c_s;
    let side = codec.cfg.latent_side();
    for step in 0..cfg.steps {
        let mut rng = StreamRng::derive(seed, "planner/train", step as u64);
        let mut data = Vec::with_capacity(cfg.batch * horizon * c * side * side);
        let mut instr = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let ei = rng.below(latents.len());
            let lat = &latents[ei];
            let t_total = lat.shape()[0];
            // Mostly windows overlapping the active phase; a few uniform
            // draws keep static segments represented.
            let hi = if rng.uniform() < 0.8 {
                active_hi[ei].min(t_total - horizon)
            } else {
                t_total - horizon
            };
            let start = rng.int_in(0, hi);
            let plane = c * side * side;
            data.extend_from_slice(&lat.data()[start * plane..(start + horizon) * plane]);
            instr.push(instr_ids[ei]);
        }
        let windows = Tensor::new(vec![cfg.batch, horizon, c, side, side], data)?;
        let clean = encode_windows(codec, codec_params, windows)?;
        let batch = make_flow_batch(&clean, instr, &planner.cfg.mask_weights, &mut rng)?;
        let loss = planner_train_step(
            planner,
            params,
            ema,
            &mut adam,
            &batch,
            cfg.grad_clip,
            cfg.ema_decay,
        )?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push((step, loss));
        }
    }
    Ok(curve)
}

// ── sampling ────────────────────────────────────────────────────────────

/// Generate a full pixel window from observation history.
///
/// `history` holds `n_cond` frames (`[n_cond * 3 * S * S]` in [0,1]); the
/// result is `[horizon, 3, S, S]` where the first `n_cond` frames are the
/// codec's reconstruction of the history and the rest are generated.
#[allow(clippy::too_many_arguments)]
pub fn sample_plan(
    planner: &Planner,
    params: &ParamStore,
    codec: &Codec,
    codec_params: &ParamStore,
    history: &[f32],
    instr: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let s = codec.cfg.frame;
    let n_cond = planner.cfg.n_cond;
    assert_eq!(history.len(), n_cond * 3 * s * s, "bad history length");
    let cond_tokens = n_cond / codec.cfg.f_t;
    let t_lat = planner.t_lat;
    let side = planner.side;
    let c_t = planner.c_t;

    // Encode history to its clean conditioning tokens.
    let hist = Tensor::new(vec![1, n_cond, 3, s, s], history.to_vec())?;
    let clean = {
        let mut g = Graph::new();
        let vars = codec_params.attach_frozen(&mut g);
        let x = g.input(hist);
        let tok = codec.encode_video(&mut g, &vars, x)?;
        g.value(tok).clone()
    }; // [1, cond_tokens, c_t, side, side]

    let per = c_t * side * side;
    let mut rng = StreamRng::derive(seed, "planner/sample", 0);
    let noise = Tensor::randn(&[1, t_lat, c_t, side, side], 1.0, &mut rng)?;
    let mut x = noise.data().to_vec();
    x[..cond_tokens * per].copy_from_slice(clean.data());
    let mask: Vec<bool> = (0..t_lat).map(|j| j >= cond_tokens).collect();

    let dt = 1.0f32 / n_steps as f32;
    for i in 0..n_steps {
        let t = 1.0 - i as f32 * dt;
        let xt = Tensor::new(vec![1, t_lat, c_t, side, side], x.clone())?;
        let v = {
            let mut g = Graph::new();
            let vars = params.attach_frozen(&mut g);
            let xin = g.input(xt);
            let v = planner.forward(&mut g, &vars, xin, &mask, &[t], &[instr])?;
            g.value(v).clone()
        };
        for j in cond_tokens..t_lat {
            for i2 in 0..per {
                x[j * per + i2] -= dt * v.data()[j * per + i2];
            }
        }
        // Conditioning tokens stay clamped to the encoded history.
        x[..cond_tokens * per].copy_from_slice(clean.data());
    }

    let tokens = Tensor::new(vec![1, t_lat, c_t, side, side], x)?;
    let mut g = Graph::new();
    let vars = codec_params.attach_frozen(&mut g);
    let tin = g.input(tokens);
    let frames = codec.decode_video(&mut g, &vars, tin)?;
    let out = g.value(frames).clone();
    out.reshaped(vec![planner.cfg.horizon, 3, s, s]).map_err(Into::into)
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct PlanEval {
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub n_windows: usize,
}

/// Compare generated futures against ground truth on held-out episodes;
/// the baseline repeats the last observed frame.
#[allow(clippy::too_many_arguments)]
pub fn eval_planner(
    planner: &Planner,
    params: &ParamStore,
    codec: &Codec,
    codec_params: &ParamStore,
    episodes: &[crate::dataset::Episode],
    n_windows: usize,
    n_steps: usize,
    seed: u64,
) -> Result<PlanEval> {
    let s = codec.cfg.frame;
    let horizon = planner.cfg.horizon;
    let n_cond = planner.cfg.n_cond;
    let future = horizon - n_cond;
    let limits = active_window_limits(episodes, s, horizon, n_cond);
    let mut rng = StreamRng::derive(seed, "planner/eval", 0);
    let mut acc = [0.0f64; 4];
    for wi in 0..n_windows {
        let ei = rng.below(episodes.len());
        let ep = &episodes[ei];
        // Score only windows whose future frames still contain motion;
        // after the final placement the scene freezes and repeating the
        // last observation becomes a perfect predictor.
        let start = rng.int_in(0, limits[ei]);
        let mut history = Vec::with_capacity(n_cond * 3 * s * s);
        for t in start..start + n_cond {
            history.extend(ep.frame_f32(t, s));
        }
        let plan = sample_plan(
            planner,
            params,
            codec,
            codec_params,
            &history,
            ep.instruction,
            n_steps,
            seed ^ (wi as u64).wrapping_mul(0x9e37_79b9),
        )?;
        let frame_len = 3 * s * s;
        let last_obs = ep.frame_f32(start + n_cond - 1, s);
        for (k, t) in (start + n_cond..start + horizon).enumerate() {
            let truth = ep.frame_f32(t, s);
            let pred = &plan.data()[(n_cond + k) * frame_len..(n_cond + k + 1) * frame_len];
            acc[0] += psnr(pred, &truth);
            acc[1] += ssim(pred, &truth, 3, s, s);
            acc[2] += psnr(&last_obs, &truth);
            acc[3] += ssim(&last_obs, &truth, 3, s, s);
        }
    }
    let n = (n_windows * future) as f64;
    Ok(PlanEval {
        psnr: acc[0] / n,
        ssim: acc[1] / n,
        baseline_psnr: acc[2] / n,
        baseline_ssim: acc[3] / n,
        n_windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;

    #[test]
    fn mask_kind_frequencies_match_weights() {
        // Pearson chi-square against the weight table, 9 nonzero cells.
        let mut rng = StreamRng::derive(101, "mask", 0);
        let n = 100_000usize;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            let (kind, _) = sample_mask(&mut rng, 4, &MASK_WEIGHTS);
            counts[MASK_KINDS.iter().position(|&k| k == kind).unwrap()] += 1;
        }
        assert_eq!(counts[6], 0, "zero-weight kind must never be drawn");
        let mut chi2 = 0.0f64;
        for (i, &c) in counts.iter().enumerate() {
            let e = MASK_WEIGHTS[i] as f64 * n as f64;
            if e > 0.0 {
                chi2 += (c as f64 - e).powi(2) / e;
            }
        }
        // df = 8, alpha = 0.01.
        assert!(chi2 < 20.09, "chi-square {chi2} too large");
        let head_freq = counts[3] as f64 / n as f64;
        assert!((head_freq - 0.75).abs() < 0.01, "head frequency {head_freq}");
    }

    #[test]
    fn every_pattern_masks_at_least_one_frame() {
        let mut rng = StreamRng::derive(102, "mask", 0);
        for t_lat in 2..=12 {
            for &kind in &MASK_KINDS {
                for _ in 0..50 {
                    let m = mask_for(kind, &mut rng, t_lat);
                    assert_eq!(m.len(), t_lat);
                    assert!(m.iter().any(|&x| x), "{kind:?} masked nothing at T={t_lat}");
                }
            }
        }
    }

    #[test]
    fn fixed_patterns_have_expected_shape() {
        let mut rng = StreamRng::derive(103, "mask", 0);
        assert_eq!(
            mask_for(MaskKind::Interpolate, &mut rng, 4),
            vec![false, true, false, true]
        );
        assert_eq!(
            mask_for(MaskKind::QuarterHead, &mut rng, 4),
            vec![false, true, true, true]
        );
        assert_eq!(
            mask_for(MaskKind::QuarterTail, &mut rng, 4),
            vec![true, true, true, false]
        );
        assert_eq!(
            mask_for(MaskKind::ImageHeadTail, &mut rng, 4),
            vec![false, true, true, false]
        );
        assert_eq!(
            mask_for(MaskKind::QuarterHeadTail, &mut rng, 4),
            vec![false, true, true, false]
        );
    }

    fn tiny_setup() -> (Planner, ParamStore, Codec, ParamStore) {
        let mut cstore = ParamStore::new();
        let ccfg = CodecConfig::default();
        let codec = Codec::init(&mut cstore, 5, ccfg).unwrap();
        let mut pstore = ParamStore::new();
        let pcfg = PlannerConfig {
            n_layers: 2,
            width: 32,
            heads: 2,
            ..PlannerConfig::default()
        };
        let planner = Planner::init(&mut pstore, 6, pcfg, &ccfg).unwrap();
        (planner, pstore, codec, cstore)
    }

    #[test]
    fn forward_preserves_token_shape() {
        let (planner, store, _, _) = tiny_setup();
        let mut g = Graph::new();
        let vars = store.attach_frozen(&mut g);
        let mut rng = StreamRng::derive(7, "x", 0);
        let tok = g.input(Tensor::randn(&[2, 4, 8, 8, 8], 1.0, &mut rng).unwrap());
        let mask = vec![false, true, true, true, false, false, true, true];
        let v = planner
            .forward(&mut g, &vars, tok, &mask, &[0.5, 0.9], &[0, 7])
            .unwrap();
        assert_eq!(g.value(v).shape(), &[2, 4, 8, 8, 8]);
    }

    #[test]
    fn instruction_changes_prediction() {
        let (planner, store, _, _) = tiny_setup();
        let mut rng = StreamRng::derive(8, "x", 0);
        let tok = Tensor::randn(&[1, 4, 8, 8, 8], 1.0, &mut rng).unwrap();
        let mask = vec![false, true, true, true];
        let run = |id: usize| {
            let mut g = Graph::new();
            let vars = store.attach_frozen(&mut g);
            let t = g.input(tok.clone());
            let v = planner.forward(&mut g, &vars, t, &mask, &[0.5], &[id]).unwrap();
            g.value(v).clone()
        };
        let a = run(0);
        let b = run(9);
        assert_ne!(a.data(), b.data(), "instruction id had no effect");
    }

    #[test]
    fn train_step_is_finite_and_moves_ema() {
        let (planner, mut store, _, _) = tiny_setup();
        let mut ema = store.clone();
        let mut adam = Adam::new(AdamConfig::default());
        let mut rng = StreamRng::derive(9, "b", 0);
        let clean = Tensor::randn(&[2, 4, 8, 8, 8], 0.5, &mut rng).unwrap();
        let batch = make_flow_batch(&clean, vec![0, 3], &MASK_WEIGHTS, &mut rng).unwrap();
        assert!(batch.n_masked > 0);
        let loss =
            planner_train_step(&planner, &mut store, &mut ema, &mut adam, &batch, 1.0, 0.99)
                .unwrap();
        assert!(loss.is_finite());
        // EMA moved toward, but did not jump to, the updated parameters.
        let p = store.get("planner.head.w");
        let e = ema.get("planner.head.w");
        assert_ne!(p.data(), e.data());
        let moved = e
            .data()
            .iter()
            .zip(p.data())
            .any(|(&ev, &pv)| (ev - pv).abs() > 1e-9);
        assert!(moved);
    }

    #[test]
    fn flow_batch_keeps_conditioning_clean() {
        let mut rng = StreamRng::derive(10, "b", 0);
        let clean = Tensor::randn(&[3, 4, 2, 2, 2], 1.0, &mut rng).unwrap();
        let batch = make_flow_batch(&clean, vec![0, 1, 2], &MASK_WEIGHTS, &mut rng).unwrap();
        let per = 8;
        for bi in 0..3 {
            for ti in 0..4 {
                if !batch.mask[bi * 4 + ti] {
                    let off = (bi * 4 + ti) * per;
                    assert_eq!(
                        &batch.x_t.data()[off..off + per],
                        &clean.data()[off..off + per],
                        "conditioning token was noised"
                    );
                    assert!(batch.weights.data()[off..off + per].iter().all(|&w| w == 0.0));
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_respects_history() {
        let (planner, pstore, codec, cstore) = tiny_setup();
        let mut rng = StreamRng::derive(11, "h", 0);
        let history: Vec<f32> = (0..4 * 3 * 32 * 32).map(|_| rng.uniform()).collect();
        let a = sample_plan(&planner, &pstore, &codec, &cstore, &history, 2, 3, 42).unwrap();
        let b = sample_plan(&planner, &pstore, &codec, &cstore, &history, 2, 3, 42).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[16, 3, 32, 32]);
        assert!(a.data().iter().all(|v| v.is_finite()));
    }
}
