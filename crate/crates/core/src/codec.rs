//! Two-stage video compression.
//!
//! Stage one is a per-frame KL-regularized autoencoder that shrinks each
//! RGB frame by `f_s` per side. Stage two compresses time: causal 1D
//! convolutions (left padding only) turn every `f_t` consecutive spatial
//! latents into one token, so token `j` depends only on frames before
//! `(j+1)·f_t` — a structural property that holds for untrained weights.
//! Decoding restores the temporal axis first, then the spatial.

use crate::checkpoint::{ParamStore, ParamVars};
use crate::dataset::Episode;
use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::metrics::psnr;
use crate::nn::Conv2dLayer;
use crate::optim::{warmup_cosine, Adam, AdamConfig};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct CodecConfig {
    pub frame: usize,
    pub f_s: usize,
    pub f_t: usize,
    pub c_s: usize,
    pub c_t: usize,
    pub kl_weight: f32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            frame: 32,
            f_s: 4,
            f_t: 4,
            c_s: 4,
            c_t: 8,
            kl_weight: 1e-4,
        }
    }
}

impl CodecConfig {
    pub fn latent_side(&self) -> usize {
        self.frame / self.f_s
    }
}

pub struct Codec {
    pub cfg: CodecConfig,
    enc_stem: Conv2dLayer,
    enc_down: Vec<Conv2dLayer>,
    enc_trunk: Conv2dLayer,
    enc_mean: Conv2dLayer,
    enc_logvar: Conv2dLayer,
    dec_in: Conv2dLayer,
    dec_trunk: Conv2dLayer,
    dec_out: Conv2dLayer,
    tp_enc_pre: Conv2dLayer,
    tp_enc_down: Conv2dLayer,
    tp_dec_pre: Conv2dLayer,
    tp_dec_out: Conv2dLayer,
}

fn same_pad() -> ((usize, usize), (usize, usize)) {
    ((1, 1), (1, 1))
}

/// Left-only temporal padding for a causal kernel of width k.
fn causal_pad(k: usize) -> ((usize, usize), (usize, usize)) {
    ((0, 0), (k - 1, 0))
}

impl Codec {
    pub fn init(store: &mut ParamStore, seed: u64, cfg: CodecConfig) -> Result<Codec> {
        if cfg.frame % cfg.f_s != 0 {
            return Err(NumericsError::InvalidShape {
                op: "codec_init",
                shape: vec![cfg.frame, cfg.f_s],
                reason: "frame size not divisible by spatial factor".into(),
            }
            .into());
        }
        if !cfg.f_s.is_power_of_two() || cfg.f_s < 2 {
            return Err(NumericsError::InvalidShape {
                op: "codec_init",
                shape: vec![cfg.f_s],
                reason: "spatial factor must be a power of two >= 2".into(),
            }
            .into());
        }
        let n_down = cfg.f_s.trailing_zeros() as usize;
        // Full-resolution stem: edge positions must be coded to pixel
        // precision before any striding throws resolution away.
        let enc_stem = Conv2dLayer::init(
            store, seed, "codec.sp.enc.stem", 3, 16, (3, 3), (1, 1), same_pad(),
        );
        let mut enc_down = Vec::new();
        let mut c_in = 16;
        let mut width = 24;
        for i in 0..n_down {
            enc_down.push(Conv2dLayer::init(
                store,
                seed,
                &format!("codec.sp.enc.down{i}"),
                c_in,
                width,
                (4, 4),
                (2, 2),
                same_pad(),
            ));
            c_in = width;
            width = (width * 2).min(48);
        }
        let trunk_c = c_in;
        let enc_trunk = Conv2dLayer::init(
            store, seed, "codec.sp.enc.trunk", trunk_c, trunk_c, (3, 3), (1, 1), same_pad(),
        );
        let enc_mean = Conv2dLayer::init(
            store, seed, "codec.sp.enc.mean", trunk_c, cfg.c_s, (3, 3), (1, 1), same_pad(),
        );
        let enc_logvar = Conv2dLayer::init(
            store, seed, "codec.sp.enc.logvar", trunk_c, cfg.c_s, (3, 3), (1, 1), same_pad(),
        );
        // Start the posterior tight (sigma ~ 0.14). With a weak KL term the
        // reconstruction gradient must otherwise spend thousands of steps
        // walking logvar down from 0 while unit noise corrupts every latent.
        store.insert(
            "codec.sp.enc.logvar.b",
            Tensor::full(&[cfg.c_s, 1, 1], -4.0)?,
        );
        // The decoder works entirely at latent resolution and emits one
        // f_s x f_s pixel patch per latent cell (depth-to-space), which can
        // place hard object edges anywhere inside a patch; interpolating
        // upsamplers blur exactly those edges and cap reconstruction
        // quality well below what these scenes allow.
        let dec_in = Conv2dLayer::init(
            store, seed, "codec.sp.dec.in", cfg.c_s, trunk_c, (3, 3), (1, 1), same_pad(),
        );
        let dec_trunk = Conv2dLayer::init(
            store, seed, "codec.sp.dec.trunk", trunk_c, trunk_c, (3, 3), (1, 1), same_pad(),
        );
        let dec_out = Conv2dLayer::init(
            store,
            seed,
            "codec.sp.dec.out",
            trunk_c,
            3 * cfg.f_s * cfg.f_s,
            (3, 3),
            (1, 1),
            same_pad(),
        );

        let tp_enc_pre = Conv2dLayer::init(
            store, seed, "codec.tp.enc.pre", cfg.c_s, 32, (1, 3), (1, 1), causal_pad(3),
        );
        let tp_enc_down = Conv2dLayer::init(
            store,
            seed,
            "codec.tp.enc.down",
            32,
            cfg.c_t,
            (1, cfg.f_t),
            (1, cfg.f_t),
            ((0, 0), (0, 0)),
        );
        let tp_dec_pre = Conv2dLayer::init(
            store, seed, "codec.tp.dec.pre", cfg.c_t, 32, (1, 3), (1, 1), causal_pad(3),
        );
        let tp_dec_out = Conv2dLayer::init(
            store, seed, "codec.tp.dec.out", 32, cfg.c_s, (1, 3), (1, 1), causal_pad(3),
        );

        Ok(Codec {
            cfg,
            enc_stem,
            enc_down,
            enc_trunk,
            enc_mean,
            enc_logvar,
            dec_in,
            dec_trunk,
            dec_out,
            tp_enc_pre,
            tp_enc_down,
            tp_dec_pre,
            tp_dec_out,
        })
    }

    /// Spatial encoder: `[B, 3, S, S] -> (mean, logvar)`, each
    /// `[B, c_s, S/f_s, S/f_s]`; logvar clamped for stability.
    pub fn encode_spatial_dist(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        x: Var,
    ) -> Result<(Var, Var)> {
        let mut h = self.enc_stem.forward(g, vars, x)?;
        h = g.gelu(h)?;
        for layer in &self.enc_down {
            h = layer.forward(g, vars, h)?;
            h = g.gelu(h)?;
        }
        h = self.enc_trunk.forward(g, vars, h)?;
        h = g.gelu(h)?;
        let mean = self.enc_mean.forward(g, vars, h)?;
        let logvar = self.enc_logvar.forward(g, vars, h)?;
        let logvar = g.clamp(logvar, -8.0, 8.0)?;
        Ok((mean, logvar))
    }

    /// Spatial decoder: latent `[B, c_s, h, w] -> [B, 3, S, S]` in (0, 1).
    /// Each latent cell's `3 * f_s^2` output channels become its pixel patch.
    pub fn decode_spatial(&self, g: &mut Graph, vars: &ParamVars, z: Var) -> Result<Var> {
        let mut h = self.dec_in.forward(g, vars, z)?;
        h = g.gelu(h)?;
        h = self.dec_trunk.forward(g, vars, h)?;
        h = g.gelu(h)?;
        let out = self.dec_out.forward(g, vars, h)?; // [B, 3*r*r, hl, wl]
        let shape = g.value(out).shape().to_vec();
        let (b, hl, wl) = (shape[0], shape[2], shape[3]);
        let r = self.cfg.f_s;
        // Depth to space: channels factor as (color, ry, rx); reorder
        // [B, 3, ry, rx, hl, wl] -> [B, 3, hl, ry, wl, rx] so rows fold as
        // hl*ry and columns as wl*rx.
        let x = g.reshape(out, &[b, 3, r, r, hl, wl])?;
        let x = g.transpose(x, 2, 4)?; // [B, 3, hl, rx, ry, wl]
        let x = g.transpose(x, 3, 4)?; // [B, 3, hl, ry, rx, wl]
        let x = g.transpose(x, 4, 5)?; // [B, 3, hl, ry, wl, rx]
        let x = g.reshape(x, &[b, 3, hl * r, wl * r])?;
        Ok(g.sigmoid(x)?)
    }

    /// `[B, T, c, h, w] -> [B*h*w, c, 1, T]` so temporal convs see time as
    /// the last spatial axis.
    fn to_time_major(g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let x = g.transpose(x, 1, 3)?; // [B, h, c, T, w]
        let x = g.transpose(x, 3, 4)?; // [B, h, c, w, T]
        let x = g.transpose(x, 2, 3)?; // [B, h, w, c, T]
        Ok(g.reshape(x, &[b * h * w, c, 1, t])?)
    }

    fn from_time_major(g: &mut Graph, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        let (c, t) = (s[1], s[3]);
        let x = g.reshape(x, &[b, h, w, c, t])?;
        let x = g.transpose(x, 2, 3)?; // [B, h, c, w, T]
        let x = g.transpose(x, 3, 4)?; // [B, h, c, T, w]
        let x = g.transpose(x, 1, 3)?; // [B, T, c, h, w]
        Ok(x)
    }

    /// Temporal encoder: `[B, T, c_s, h, w] -> [B, T/f_t, c_t, h, w]`.
    pub fn encode_temporal(&self, g: &mut Graph, vars: &ParamVars, lat: Var) -> Result<Var> {
        let s = g.value(lat).shape().to_vec();
        let (b, t, h, w) = (s[0], s[1], s[3], s[4]);
        if t % self.cfg.f_t != 0 {
            return Err(NumericsError::InvalidShape {
                op: "encode_temporal",
                shape: s.clone(),
                reason: format!("length {t} not divisible by factor {}", self.cfg.f_t),
            }
            .into());
        }
        let x = Self::to_time_major(g, lat)?;
        let x = self.tp_enc_pre.forward(g, vars, x)?;
        let x = g.gelu(x)?;
        let x = self.tp_enc_down.forward(g, vars, x)?; // [B*h*w, c_t, 1, T/f_t]
        Self::from_time_major(g, x, b, h, w)
    }

    /// Temporal decoder: `[B, T_lat, c_t, h, w] -> [B, T_lat*f_t, c_s, h, w]`.
    pub fn decode_temporal(&self, g: &mut Graph, vars: &ParamVars, tokens: Var) -> Result<Var> {
        let s = g.value(tokens).shape().to_vec();
        let (b, h, w) = (s[0], s[3], s[4]);
        let x = Self::to_time_major(g, tokens)?; // [B*h*w, c_t, 1, T_lat]
        let sx = g.value(x).shape().to_vec();
        let x = g.reshape(x, &[sx[0], sx[1], sx[3], 1])?;
        let x = g.repeat_axis(x, 3, self.cfg.f_t)?; // [., c_t, T_lat, f_t]
        let x = g.reshape(x, &[sx[0], sx[1], 1, sx[3] * self.cfg.f_t])?;
        let x = self.tp_dec_pre.forward(g, vars, x)?;
        let x = g.gelu(x)?;
        let x = self.tp_dec_out.forward(g, vars, x)?;
        Self::from_time_major(g, x, b, h, w)
    }

    /// Full video encode in mean mode: frames `[B, T, 3, S, S]` (flattened
    /// batch handled by the caller) to temporal tokens.
    pub fn encode_video(&self, g: &mut Graph, vars: &ParamVars, frames: Var) -> Result<Var> {
        let s = g.value(frames).shape().to_vec();
        let (b, t, ss) = (s[0], s[1], s[3]);
        let flat = g.reshape(frames, &[b * t, 3, ss, ss])?;
        let (mean, _) = self.encode_spatial_dist(g, vars, flat)?;
        let side = self.cfg.latent_side();
        let lat = g.reshape(mean, &[b, t, self.cfg.c_s, side, side])?;
        self.encode_temporal(g, vars, lat)
    }

    /// Full video decode: temporal tokens to frames `[B, T, 3, S, S]`.
    pub fn decode_video(&self, g: &mut Graph, vars: &ParamVars, tokens: Var) -> Result<Var> {
        let lat = self.decode_temporal(g, vars, tokens)?;
        let s = g.value(lat).shape().to_vec();
        let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let flat = g.reshape(lat, &[b * t, c, h, w])?;
        let px = self.decode_spatial(g, vars, flat)?;
        let ps = g.value(px).shape().to_vec();
        Ok(g.reshape(px, &[b, t, 3, ps[2], ps[3]])?)
    }
}

// ── data-side helpers (no gradients) ────────────────────────────────────

/// Encode a batch of frames to spatial mean latents without building a
/// training graph.
pub fn spatial_means(codec: &Codec, params: &ParamStore, frames: Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.attach_frozen(&mut g);
    let x = g.input(frames);
    let (mean, _) = codec.encode_spatial_dist(&mut g, &vars, x)?;
    Ok(g.value(mean).clone())
}

/// Mean-mode spatial latents for every frame of an episode: `[T+1, c_s, h, w]`.
pub fn episode_means(codec: &Codec, params: &ParamStore, ep: &Episode) -> Result<Tensor> {
    let s = codec.cfg.frame;
    let t1 = ep.n_frames(s);
    let data: Vec<f32> = ep.frames_u8.iter().map(|&b| b as f32 / 255.0).collect();
    spatial_means(codec, params, Tensor::new(vec![t1, 3, s, s], data)?)
}

// ── training ────────────────────────────────────────────────────────────

pub struct StageLog {
    /// (step, primary loss) samples, every `log_every` steps.
    pub curve: Vec<(usize, f64)>,
}

fn batch_frames(episodes: &[Episode], frame: usize, rng: &mut StreamRng, b: usize) -> Tensor {
    let mut data = Vec::with_capacity(b * 3 * frame * frame);
    for _ in 0..b {
        let ep = &episodes[rng.int_in(0, episodes.len() - 1)];
        let t = rng.int_in(0, ep.n_frames(frame) - 1);
        data.extend(ep.frame_f32(t, frame));
    }
    Tensor::new(vec![b, 3, frame, frame], data).expect("frames finite")
}

/// Train the spatial stage on random frames; returns the loss curve.
#[allow(clippy::too_many_arguments)]
pub fn train_spatial(
    codec: &Codec,
    params: &mut ParamStore,
    episodes: &[Episode],
    steps: usize,
    batch: usize,
    lr: f32,
    seed: u64,
    log_every: usize,
) -> Result<StageLog> {
    let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() });
    let mut curve = Vec::new();
    let frame = codec.cfg.frame;
    for step in 0..steps {
        let mut rng = StreamRng::derive(seed, "codec/sp", step as u64);
        let x = batch_frames(episodes, frame, &mut rng, batch);
        let eps = Tensor::randn(
            &[batch, codec.cfg.c_s, codec.cfg.latent_side(), codec.cfg.latent_side()],
            1.0,
            &mut rng,
        )?;

        let mut g = Graph::new();
        let vars = params.attach(&mut g);
        let xin = g.input(x);
        let (mean, logvar) = codec.encode_spatial_dist(&mut g, &vars, xin)?;
        // Reparameterized sample z = mean + exp(logvar/2) * eps.
        let half_lv = g.scale(logvar, 0.5)?;
        let std = g.exp(half_lv)?;
        let noise = g.input(eps);
        let scaled = g.mul(std, noise)?;
        let z = g.add(mean, scaled)?;
        let recon = codec.decode_spatial(&mut g, &vars, z)?;
        let diff = g.sub(recon, xin)?;
        let sq = g.mul(diff, diff)?;
        let recon_loss = g.mean_all(sq)?;
        // KL(N(mean, var) || N(0, 1)) averaged per latent element.
        let mean_sq = g.mul(mean, mean)?;
        let var = g.exp(logvar)?;
        let neg = g.add(mean_sq, var)?;
        let kl_inner = g.sub(logvar, neg)?; // logvar - mean^2 - var
        let kl_inner = g.add_scalar(kl_inner, 1.0)?;
        let kl_sum = g.mean_all(kl_inner)?;
        let kl = g.scale(kl_sum, -0.5)?;
        let kl_w = g.scale(kl, codec.cfg.kl_weight)?;
        let loss = g.add(recon_loss, kl_w)?;
        let loss_val = g.value(loss).item() as f64;
        let grads = g.backward(loss)?;
        let named = vars.grads(&grads);
        let lr_t = warmup_cosine(lr, step as u64, 100, steps as u64, 0.1);
        adam.step(params, &named, Some(lr_t))?;
        if step % log_every == 0 || step + 1 == steps {
            curve.push((step, loss_val));
        }
    }
    Ok(StageLog { curve })
}

/// Train the temporal stage on windows of precomputed (frozen) spatial mean
/// latents; returns the latent-reconstruction loss curve.
#[allow(clippy::too_many_arguments)]
pub fn train_temporal(
    codec: &Codec,
    params: &mut ParamStore,
    latents: &[Tensor],
    horizon: usize,
    steps: usize,
    batch: usize,
    lr: f32,
    seed: u64,
    log_every: usize,
) -> Result<StageLog> {
    let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() });
    let mut curve = Vec::new();
    let side = codec.cfg.latent_side();
    let c = codec.cfg.c_s;
    // Only the temporal parameters receive gradients.
    let tp_names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("codec.tp."))
        .cloned()
        .collect();
    for step in 0..steps {
        let mut rng = StreamRng::derive(seed, "codec/tp", step as u64);
        let mut data = Vec::with_capacity(batch * horizon * c * side * side);
        for _ in 0..batch {
            let lat = &latents[rng.int_in(0, latents.len() - 1)];
            let t_total = lat.shape()[0];
            let start = rng.int_in(0, t_total - horizon);
            let plane = c * side * side;
            data.extend_from_slice(&lat.data()[start * plane..(start + horizon) * plane]);
        }
        let x = Tensor::new(vec![batch, horizon, c, side, side], data)?;

        let mut g = Graph::new();
        let vars = params.attach_selected(&mut g, &tp_names);
        let xin = g.input(x);
        let tokens = codec.encode_temporal(&mut g, &vars, xin)?;
        let recon = codec.decode_temporal(&mut g, &vars, tokens)?;
        let diff = g.sub(recon, xin)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean_all(sq)?;
        let loss_val = g.value(loss).item() as f64;
        let grads = g.backward(loss)?;
        let named = vars.grads(&grads);
        let lr_t = warmup_cosine(lr, step as u64, 100, steps as u64, 0.1);
        adam.step(params, &named, Some(lr_t))?;
        if step % log_every == 0 || step + 1 == steps {
            curve.push((step, loss_val));
        }
    }
    Ok(StageLog { curve })
}

// ── evaluation ──────────────────────────────────────────────────────────

/// Mean-mode spatial round-trip PSNR over sampled frames.
pub fn eval_spatial_psnr(
    codec: &Codec,
    params: &ParamStore,
    episodes: &[Episode],
    n_frames: usize,
    seed: u64,
) -> Result<f64> {
    let frame = codec.cfg.frame;
    let mut rng = StreamRng::derive(seed, "codec/eval_sp", 0);
    let x = batch_frames(episodes, frame, &mut rng, n_frames);
    let mut g = Graph::new();
    let vars = params.attach_frozen(&mut g);
    let xin = g.input(x.clone());
    let (mean, _) = codec.encode_spatial_dist(&mut g, &vars, xin)?;
    let recon = codec.decode_spatial(&mut g, &vars, mean)?;
    Ok(psnr(g.value(recon).data(), x.data()))
}

/// Full spatial+temporal round-trip PSNR over sampled windows.
#[allow(clippy::too_many_arguments)]
pub fn eval_video_psnr(
    codec: &Codec,
    params: &ParamStore,
    episodes: &[Episode],
    horizon: usize,
    n_windows: usize,
    seed: u64,
) -> Result<f64> {
    let frame = codec.cfg.frame;
    let mut rng = StreamRng::derive(seed, "codec/eval_tp", 0);
    let mut data = Vec::new();
    for _ in 0..n_windows {
        let ep = &episodes[rng.int_in(0, episodes.len() - 1)];
        let start = rng.int_in(0, ep.n_frames(frame) - horizon);
        for t in start..start + horizon {
            data.extend(ep.frame_f32(t, frame));
        }
    }
    let x = Tensor::new(vec![n_windows, horizon, 3, frame, frame], data)?;
    let mut g = Graph::new();
    let vars = params.attach_frozen(&mut g);
    let xin = g.input(x.clone());
    let tokens = codec.encode_video(&mut g, &vars, xin)?;
    let recon = codec.decode_video(&mut g, &vars, tokens)?;
    Ok(psnr(g.value(recon).data(), x.data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_split;

    fn tiny_codec(seed: u64) -> (Codec, ParamStore) {
        let mut store = ParamStore::new();
        let codec = Codec::init(&mut store, seed, CodecConfig::default()).unwrap();
        (codec, store)
    }

    #[test]
    fn spatial_shapes_roundtrip() {
        let (codec, store) = tiny_codec(0);
        let mut g = Graph::new();
        let vars = store.attach_frozen(&mut g);
        let mut rng = StreamRng::derive(0, "x", 0);
        let x = g.input(Tensor::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap());
        let (mean, logvar) = codec.encode_spatial_dist(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(mean).shape(), &[2, 4, 8, 8]);
        assert_eq!(g.value(logvar).shape(), &[2, 4, 8, 8]);
        let recon = codec.decode_spatial(&mut g, &vars, mean).unwrap();
        assert_eq!(g.value(recon).shape(), &[2, 3, 32, 32]);
        assert!(g.value(recon).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn temporal_shapes_roundtrip() {
        let (codec, store) = tiny_codec(1);
        let mut g = Graph::new();
        let vars = store.attach_frozen(&mut g);
        let mut rng = StreamRng::derive(1, "x", 0);
        let lat = g.input(Tensor::randn(&[2, 16, 4, 8, 8], 1.0, &mut rng).unwrap());
        let tokens = codec.encode_temporal(&mut g, &vars, lat).unwrap();
        assert_eq!(g.value(tokens).shape(), &[2, 4, 8, 8, 8]);
        let recon = codec.decode_temporal(&mut g, &vars, tokens).unwrap();
        assert_eq!(g.value(recon).shape(), &[2, 16, 4, 8, 8]);
    }

    #[test]
    fn indivisible_temporal_length_is_error() {
        let (codec, store) = tiny_codec(2);
        let mut g = Graph::new();
        let vars = store.attach_frozen(&mut g);
        let lat = g.input(Tensor::zeros(&[1, 15, 4, 8, 8]));
        assert!(codec.encode_temporal(&mut g, &vars, lat).is_err());
    }

    fn temporal_tokens(codec: &Codec, store: &ParamStore, lat: Tensor) -> Tensor {
        let mut g = Graph::new();
        let vars = store.attach_frozen(&mut g);
        let x = g.input(lat);
        let t = codec.encode_temporal(&mut g, &vars, x).unwrap();
        g.value(t).clone()
    }

    #[test]
    fn temporal_encoder_is_causal_structurally() {
        // Perturb frame t'; every token j with (j+1)*f_t <= t' must be
        // bit-identical. Holds for untrained (random) weights.
        let (codec, store) = tiny_codec(3);
        let mut rng = StreamRng::derive(3, "x", 0);
        let base = Tensor::randn(&[1, 16, 4, 8, 8], 1.0, &mut rng).unwrap();
        let tok_base = temporal_tokens(&codec, &store, base.clone());
        let token_sz = 8 * 8 * 8;
        for t_pert in [0usize, 5, 7, 11, 15] {
            let mut data = base.data().to_vec();
            let plane = 4 * 8 * 8;
            for v in &mut data[t_pert * plane..(t_pert + 1) * plane] {
                *v += 1.0;
            }
            let pert = Tensor::new(vec![1, 16, 4, 8, 8], data).unwrap();
            let tok = temporal_tokens(&codec, &store, pert);
            for j in 0..4 {
                let same = tok.data()[j * token_sz..(j + 1) * token_sz]
                    == tok_base.data()[j * token_sz..(j + 1) * token_sz];
                let must_be_same = (j + 1) * 4 <= t_pert;
                if must_be_same {
                    assert!(same, "token {j} changed by future frame {t_pert}");
                } else if t_pert >= j * 4 && t_pert < (j + 1) * 4 {
                    // The frame lies inside token j's own window; it must
                    // influence that token (sanity that the test has teeth).
                    assert!(!same, "token {j} ignored its own frame {t_pert}");
                }
            }
        }
    }

    #[test]
    fn spatial_training_reduces_loss() {
        let eps = generate_split(21, "codec_t", 6, &[0, 1], 32, 0.01).unwrap();
        let (codec, mut store) = tiny_codec(4);
        let log = train_spatial(&codec, &mut store, &eps, 30, 8, 1e-3, 0, 5).unwrap();
        let first = log.curve.first().unwrap().1;
        let last = log.curve.last().unwrap().1;
        assert!(last < first, "spatial loss did not improve: {first} -> {last}");
    }

    #[test]
    fn temporal_training_reduces_loss() {
        let eps = generate_split(22, "codec_u", 4, &[0], 32, 0.01).unwrap();
        let (codec, mut store) = tiny_codec(5);
        let lats: Vec<Tensor> = eps
            .iter()
            .map(|e| episode_means(&codec, &store, e).unwrap())
            .collect();
        let log =
            train_temporal(&codec, &mut store, &lats, 16, 30, 4, 1e-3, 0, 5).unwrap();
        let first = log.curve.first().unwrap().1;
        let last = log.curve.last().unwrap().1;
        assert!(last < first, "temporal loss did not improve: {first} -> {last}");
    }

    #[test]
    fn video_roundtrip_shapes() {
        let (codec, store) = tiny_codec(6);
        let mut g = Graph::new();
        let vars = store.attach_frozen(&mut g);
        let mut rng = StreamRng::derive(6, "x", 0);
        let x = g.input(Tensor::rand_uniform(&[1, 16, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap());
        let tok = codec.encode_video(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(tok).shape(), &[1, 4, 8, 8, 8]);
        let recon = codec.decode_video(&mut g, &vars, tok).unwrap();
        assert_eq!(g.value(recon).shape(), &[1, 16, 3, 32, 32]);
    }
}
