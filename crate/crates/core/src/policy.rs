//! Goal-conditioned diffusion policy.
//!
//! Actions are denoised from Gaussian noise by a small MLP conditioned on
//! the current observation embedding and the goal embedding (both from the
//! alignment encoders). Training is epsilon-prediction behavior cloning on
//! expert actions, jointly optimized with the state-alignment objective;
//! the prototype bank is re-normalized after every step.
//!
//! Action coordinates are normalized to [-1, 1] (displacement over the
//! per-step limit) and the gripper channel is trained toward +/-1.

use crate::align::{align_forward, renorm_prototypes, AlignModel};
use crate::checkpoint::{ParamStore, ParamVars};
use crate::dataset::Episode;
use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{time_features, Linear};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::world::{Action, DELTA_MAX};

pub const ACTION_DIM: usize = 3;

// ── noise schedule ──────────────────────────────────────────────────────

pub struct NoiseSchedule {
    /// `beta[k-1]` is the variance added at step k, k = 1..=K.
    pub beta: Vec<f32>,
    /// `alpha_bar[k]` for k = 0..=K, with `alpha_bar[0] = 1`, rebuilt from
    /// the clipped betas so the recursion is the single source of truth.
    pub alpha_bar: Vec<f32>,
}

/// Squared-cosine schedule with offset 0.008, betas clipped to
/// [1e-5, 0.999].
pub fn cosine_schedule(k_steps: usize) -> NoiseSchedule {
    assert!(k_steps >= 1);
    let s = 0.008f64;
    let f = |k: f64| ((k / k_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
        .cos()
        .powi(2);
    let f0 = f(0.0);
    let mut beta = Vec::with_capacity(k_steps);
    let mut prev = 1.0f64;
    for k in 1..=k_steps {
        let ab = f(k as f64) / f0;
        let b = (1.0 - ab / prev).clamp(1e-5, 0.999);
        beta.push(b as f32);
        prev = ab;
    }
    let mut alpha_bar = Vec::with_capacity(k_steps + 1);
    alpha_bar.push(1.0f32);
    for &b in &beta {
        let last = *alpha_bar.last().unwrap();
        alpha_bar.push(last * (1.0 - b));
    }
    NoiseSchedule { beta, alpha_bar }
}

impl NoiseSchedule {
    pub fn k_steps(&self) -> usize {
        self.beta.len()
    }

    /// Noise a clean action to diffusion step `k` (1..=K):
    /// `a_k = sqrt(ab_k) a_0 + sqrt(1 - ab_k) eps`.
    pub fn forward_noise(&self, a0: &[f32], eps: &[f32], k: usize) -> Result<Vec<f32>> {
        if k == 0 || k > self.k_steps() {
            return Err(NumericsError::StepOutOfRange {
                k,
                k_max: self.k_steps(),
            }
            .into());
        }
        let ab = self.alpha_bar[k];
        let sa = ab.sqrt();
        let sn = (1.0 - ab).sqrt();
        Ok(a0.iter().zip(eps).map(|(&a, &e)| sa * a + sn * e).collect())
    }
}

// ── network ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct PolicyConfig {
    pub k_steps: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            k_steps: 20,
            hidden: 256,
            blocks: 3,
            time_dim: 32,
            embed_dim: 64,
        }
    }
}

pub struct PolicyNet {
    pub cfg: PolicyConfig,
    layers: Vec<Linear>,
    out: Linear,
}

impl PolicyNet {
    pub fn init(store: &mut ParamStore, seed: u64, cfg: PolicyConfig) -> PolicyNet {
        let in_dim = ACTION_DIM + cfg.time_dim + 2 * cfg.embed_dim;
        let mut layers = Vec::new();
        let mut d = in_dim;
        for i in 0..cfg.blocks {
            layers.push(Linear::init(
                store,
                seed,
                &format!("policy.l{i}"),
                d,
                cfg.hidden,
                true,
            ));
            d = cfg.hidden;
        }
        let out = Linear::init(store, seed, "policy.out", d, ACTION_DIM, true);
        PolicyNet { cfg, layers, out }
    }

    /// Predict the noise in `noisy` given step ids and both embeddings.
    /// `noisy` is `[B, 3]`, `ks` are diffusion steps (1..=K), `z_obs` and
    /// `z_goal` are `[B, embed_dim]` graph vars.
    pub fn predict_eps(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        noisy: Var,
        ks: &[usize],
        z_obs: Var,
        z_goal: Var,
    ) -> Result<Var> {
        let kf: Vec<f32> = ks
            .iter()
            .map(|&k| k as f32 / self.cfg.k_steps as f32)
            .collect();
        let tf = g.input(time_features(&kf, self.cfg.time_dim));
        let x = g.concat(&[noisy, tf, z_obs, z_goal], 1)?;
        let mut h = x;
        for l in &self.layers {
            h = l.forward(g, vars, h)?;
            h = g.gelu(h)?;
        }
        Ok(self.out.forward(g, vars, h)?)
    }
}

// ── joint training ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct JointTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub grad_clip: f32,
    /// Weight on the alignment loss; 0 disables state alignment.
    pub lambda: f32,
    pub log_every: usize,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        JointTrainConfig {
            steps: 1500,
            batch: 64,
            lr: 1e-4,
            grad_clip: 1.0,
            lambda: 1.0,
            log_every: 25,
        }
    }
}

/// Normalized clean action for supervised denoising.
pub fn normalize_action(dx: f32, dy: f32, grip: f32) -> [f32; 3] {
    [
        dx / DELTA_MAX,
        dy / DELTA_MAX,
        if grip > 0.0 { 1.0 } else { -1.0 },
    ]
}

pub struct JointBatch {
    pub obs: Tensor,
    pub goals: Tensor,
    pub actions: Vec<[f32; 3]>,
}

/// Sample (observation, future goal, expert action) triples.
pub fn make_joint_batch(
    episodes: &[Episode],
    frame: usize,
    goal_near: usize,
    goal_far: usize,
    batch: usize,
    rng: &mut StreamRng,
) -> Result<JointBatch> {
    let mut obs = Vec::with_capacity(batch * 3 * frame * frame);
    let mut goals = Vec::with_capacity(batch * 3 * frame * frame);
    let mut actions = Vec::with_capacity(batch);
    for _ in 0..batch {
        let ep = &episodes[rng.below(episodes.len())];
        let t_max = ep.n_frames(frame) - 1; // actions exist for t < t_max
        let t = rng.int_in(0, t_max - 1);
        let k = rng.int_in(goal_near, goal_far);
        let gidx = (t + k).min(t_max);
        obs.extend(ep.frame_f32(t, frame));
        goals.extend(ep.frame_f32(gidx, frame));
        let a = &ep.actions[t * 3..t * 3 + 3];
        actions.push(normalize_action(a[0], a[1], a[2]));
    }
    Ok(JointBatch {
        obs: Tensor::new(vec![batch, 3, frame, frame], obs)?,
        goals: Tensor::new(vec![batch, 3, frame, frame], goals)?,
        actions,
    })
}

pub struct JointLosses {
    pub total: f64,
    pub bc: f64,
    pub align: f64,
}

/// One joint step: epsilon-prediction behavior cloning plus weighted
/// swapped-prototype alignment, then prototype re-normalization.
#[allow(clippy::too_many_arguments)]
pub fn joint_step(
    policy: &PolicyNet,
    align: &AlignModel,
    params: &mut ParamStore,
    adam: &mut Adam,
    schedule: &NoiseSchedule,
    batch: &JointBatch,
    cfg: &JointTrainConfig,
    rng: &mut StreamRng,
) -> Result<JointLosses> {
    let b = batch.actions.len();
    let kk = schedule.k_steps();
    let mut ks = Vec::with_capacity(b);
    let mut noisy = Vec::with_capacity(b * 3);
    let mut eps = Vec::with_capacity(b * 3);
    for a in &batch.actions {
        let k = rng.int_in(1, kk);
        let e = [rng.normal(), rng.normal(), rng.normal()];
        let n = schedule.forward_noise(a, &e, k)?;
        ks.push(k);
        noisy.extend(n);
        eps.extend(e);
    }

    let mut g = Graph::new();
    let vars = params.attach(&mut g);
    let obs = g.input(batch.obs.clone());
    let goals = g.input(batch.goals.clone());
    let fwd = align_forward(align, &mut g, &vars, goals, obs)?;
    let noisy_v = g.input(Tensor::new(vec![b, 3], noisy)?);
    let eps_hat = policy.predict_eps(&mut g, &vars, noisy_v, &ks, fwd.z_target, fwd.z_source)?;
    let eps_v = g.input(Tensor::new(vec![b, 3], eps)?);
    let diff = g.sub(eps_hat, eps_v)?;
    let sq = g.mul(diff, diff)?;
    let bc = g.mean_all(sq)?;
    let weighted_align = g.scale(fwd.loss, cfg.lambda)?;
    let total = g.add(bc, weighted_align)?;

    let bc_val = g.value(bc).item() as f64;
    let align_val = g.value(fwd.loss).item() as f64;
    let total_val = g.value(total).item() as f64;
    let grads = g.backward(total)?;
    let mut named = vars.grads(&grads);
    clip_global_norm(&mut named, cfg.grad_clip);
    adam.step(params, &named, None)?;
    renorm_prototypes(params);
    Ok(JointLosses {
        total: total_val,
        bc: bc_val,
        align: align_val,
    })
}

/// Full joint training loop; returns (step, total, bc, align) samples.
#[allow(clippy::too_many_arguments)]
pub fn train_joint(
    policy: &PolicyNet,
    align: &AlignModel,
    params: &mut ParamStore,
    episodes: &[Episode],
    frame: usize,
    cfg: JointTrainConfig,
    seed: u64,
) -> Result<Vec<(usize, f64, f64, f64)>> {
    let schedule = cosine_schedule(policy.cfg.k_steps);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let mut rng = StreamRng::derive(seed, "joint/train", step as u64);
        let batch = make_joint_batch(
            episodes,
            frame,
            align.cfg.goal_near,
            align.cfg.goal_far,
            cfg.batch,
            &mut rng,
        )?;
        let losses = joint_step(
            policy, align, params, &mut adam, &schedule, &batch, &cfg, &mut rng,
        )?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push((step, losses.total, losses.bc, losses.align));
        }
    }
    Ok(curve)
}

// ── sampling ────────────────────────────────────────────────────────────

/// Reverse-diffuse one action from embeddings (already computed outside).
/// Any non-finite value aborts with the offending step index.
pub fn sample_action(
    policy: &PolicyNet,
    params: &ParamStore,
    schedule: &NoiseSchedule,
    z_obs: &Tensor,
    z_goal: &Tensor,
    rng: &mut StreamRng,
) -> Result<Action> {
    let kk = schedule.k_steps();
    let mut a = [rng.normal(), rng.normal(), rng.normal()];
    for k in (1..=kk).rev() {
        let eps_hat = {
            let mut g = Graph::new();
            let vars = params.attach_frozen(&mut g);
            let noisy = g.input(Tensor::new(vec![1, 3], a.to_vec())?);
            let zo = g.input(z_obs.clone());
            let zg = g.input(z_goal.clone());
            let e = policy.predict_eps(&mut g, &vars, noisy, &[k], zo, zg)?;
            g.value(e).data().to_vec()
        };
        let beta = schedule.beta[k - 1];
        let alpha = 1.0 - beta;
        let ab = schedule.alpha_bar[k];
        let coef = beta / (1.0 - ab).sqrt();
        for i in 0..3 {
            let mean = (a[i] - coef * eps_hat[i]) / alpha.sqrt();
            let noise = if k > 1 { beta.sqrt() * rng.normal() } else { 0.0 };
            a[i] = mean + noise;
            if !a[i].is_finite() {
                return Err(NumericsError::SamplingDiverged { k }.into());
            }
        }
    }
    Ok(Action {
        dx: a[0].clamp(-1.0, 1.0) * DELTA_MAX,
        dy: a[1].clamp(-1.0, 1.0) * DELTA_MAX,
        grip: if a[2] > 0.0 { 1.0 } else { -1.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::AlignConfig;
    use crate::dataset::generate_split;

    #[test]
    fn schedule_shape_and_recursion_identity() {
        let s = cosine_schedule(20);
        assert_eq!(s.beta.len(), 20);
        assert_eq!(s.alpha_bar.len(), 21);
        assert_eq!(s.alpha_bar[0], 1.0);
        for k in 1..=20 {
            assert!(s.beta[k - 1] >= 1e-5 && s.beta[k - 1] <= 0.999);
            assert!(s.alpha_bar[k] > 0.0 && s.alpha_bar[k] < 1.0);
            assert!(s.alpha_bar[k] < s.alpha_bar[k - 1], "not monotone at {k}");
            // The stored cumulative product is exactly the recursion.
            let rebuilt = s.alpha_bar[k - 1] * (1.0 - s.beta[k - 1]);
            assert_eq!(s.alpha_bar[k], rebuilt, "recursion broken at {k}");
        }
        // Late steps are close to pure noise.
        assert!(s.alpha_bar[20] < 0.05, "final alpha_bar {}", s.alpha_bar[20]);
    }

    #[test]
    fn forward_noise_rejects_out_of_range_steps() {
        let s = cosine_schedule(10);
        let a = [0.1, 0.2, -0.3];
        let e = [0.0, 0.0, 0.0];
        assert!(s.forward_noise(&a, &e, 0).is_err());
        assert!(s.forward_noise(&a, &e, 11).is_err());
        assert!(s.forward_noise(&a, &e, 10).is_ok());
    }

    #[test]
    fn forward_noise_matches_closed_form_moments() {
        let s = cosine_schedule(20);
        let a0 = [0.5f32, -0.5, 1.0];
        let mut rng = StreamRng::derive(41, "n", 0);
        let k = 12;
        let n = 20_000;
        let mut mean = [0.0f64; 3];
        let mut var = [0.0f64; 3];
        for _ in 0..n {
            let e = [rng.normal(), rng.normal(), rng.normal()];
            let x = s.forward_noise(&a0, &e, k).unwrap();
            for i in 0..3 {
                mean[i] += x[i] as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut rng = StreamRng::derive(41, "n", 0);
        for _ in 0..n {
            let e = [rng.normal(), rng.normal(), rng.normal()];
            let x = s.forward_noise(&a0, &e, k).unwrap();
            for i in 0..3 {
                var[i] += (x[i] as f64 - mean[i]).powi(2);
            }
        }
        let ab = s.alpha_bar[k] as f64;
        for i in 0..3 {
            var[i] /= n as f64;
            assert!(
                (mean[i] - ab.sqrt() * a0[i] as f64).abs() < 0.02,
                "mean[{i}] {}",
                mean[i]
            );
            assert!((var[i] - (1.0 - ab)).abs() < 0.03, "var[{i}] {}", var[i]);
        }
    }

    fn tiny_models() -> (PolicyNet, AlignModel, ParamStore) {
        let mut store = ParamStore::new();
        let policy = PolicyNet::init(&mut store, 51, PolicyConfig::default());
        let align = AlignModel::init(&mut store, 52, AlignConfig::default(), 32);
        (policy, align, store)
    }

    #[test]
    fn joint_step_runs_and_keeps_prototypes_unit() {
        let eps = generate_split(61, "pol", 4, &[0], 32, 0.01).unwrap();
        let (policy, align, mut store) = tiny_models();
        let schedule = cosine_schedule(policy.cfg.k_steps);
        let cfg = JointTrainConfig {
            batch: 8,
            ..JointTrainConfig::default()
        };
        let mut adam = Adam::new(AdamConfig::default());
        let mut rng = StreamRng::derive(62, "t", 0);
        let batch = make_joint_batch(&eps, 32, 1, 16, 8, &mut rng).unwrap();
        let losses =
            joint_step(&policy, &align, &mut store, &mut adam, &schedule, &batch, &cfg, &mut rng)
                .unwrap();
        assert!(losses.total.is_finite() && losses.bc.is_finite() && losses.align.is_finite());
        let proto = store.get(crate::align::PROTO_PARAM);
        for row in proto.data().chunks(proto.shape()[1]) {
            let n: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn lambda_zero_removes_alignment_from_total() {
        let eps = generate_split(63, "pol0", 3, &[0], 32, 0.01).unwrap();
        let (policy, align, mut store) = tiny_models();
        let schedule = cosine_schedule(policy.cfg.k_steps);
        let cfg = JointTrainConfig {
            batch: 6,
            lambda: 0.0,
            ..JointTrainConfig::default()
        };
        let mut adam = Adam::new(AdamConfig::default());
        let mut rng = StreamRng::derive(64, "t", 0);
        let batch = make_joint_batch(&eps, 32, 1, 16, 6, &mut rng).unwrap();
        let losses =
            joint_step(&policy, &align, &mut store, &mut adam, &schedule, &batch, &cfg, &mut rng)
                .unwrap();
        assert!((losses.total - losses.bc).abs() < 1e-9);
    }

    #[test]
    fn sampled_actions_respect_bounds_and_are_deterministic() {
        let (policy, _, store) = tiny_models();
        let schedule = cosine_schedule(policy.cfg.k_steps);
        let mut rng = StreamRng::derive(65, "z", 0);
        let zo = Tensor::randn(&[1, 64], 1.0, &mut rng).unwrap();
        let zg = Tensor::randn(&[1, 64], 1.0, &mut rng).unwrap();
        let mut r1 = StreamRng::derive(66, "a", 0);
        let a1 = sample_action(&policy, &store, &schedule, &zo, &zg, &mut r1).unwrap();
        let mut r2 = StreamRng::derive(66, "a", 0);
        let a2 = sample_action(&policy, &store, &schedule, &zo, &zg, &mut r2).unwrap();
        assert_eq!((a1.dx, a1.dy, a1.grip), (a2.dx, a2.dy, a2.grip));
        assert!(a1.dx.abs() <= DELTA_MAX + 1e-6);
        assert!(a1.dy.abs() <= DELTA_MAX + 1e-6);
        assert!(a1.grip == 1.0 || a1.grip == -1.0);
    }

    #[test]
    fn non_finite_chain_reports_step_index() {
        let (policy, _, mut store) = tiny_models();
        // Poison one weight so the net emits NaN immediately.
        let w = store.get("policy.out.w").clone();
        let mut data = w.data().to_vec();
        data[0] = f32::MAX;
        data[1] = f32::MAX;
        store.insert("policy.out.w", Tensor::new(w.shape().to_vec(), data).unwrap());
        let w2 = store.get("policy.l0.w").clone();
        let d2: Vec<f32> = w2.data().iter().map(|_| 1e30).collect();
        store.insert("policy.l0.w", Tensor::new(w2.shape().to_vec(), d2).unwrap());
        let schedule = cosine_schedule(policy.cfg.k_steps);
        let mut rng = StreamRng::derive(67, "z", 0);
        let zo = Tensor::randn(&[1, 64], 1.0, &mut rng).unwrap();
        let zg = Tensor::randn(&[1, 64], 1.0, &mut rng).unwrap();
        let err = sample_action(&policy, &store, &schedule, &zo, &zg, &mut rng);
        assert!(err.is_err(), "poisoned net should fail");
    }

    #[test]
    fn behavior_cloning_overfits_tiny_data() {
        let eps = generate_split(68, "bc", 2, &[0], 32, 0.0).unwrap();
        let (policy, align, mut store) = tiny_models();
        let cfg = JointTrainConfig {
            steps: 40,
            batch: 8,
            lr: 1e-3,
            lambda: 0.0,
            log_every: 5,
            ..JointTrainConfig::default()
        };
        let curve = train_joint(&policy, &align, &mut store, &eps, 32, cfg, 69).unwrap();
        let first = curve.first().unwrap().2;
        let last = curve.last().unwrap().2;
        assert!(last < first, "cloning loss did not improve: {first} -> {last}");
    }
}
