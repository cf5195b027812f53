//! Rectified-flow primitives: straight-line noising, logit-normal time
//! sampling, and the deterministic Euler sampler shared by the video
//! planner and the self-contained 2-D toy flow used for sampler checks.
//!
//! Convention: `t = 0` is clean data, `t = 1` is pure noise, and the
//! forward interpolant is `x_t = (1 - t) * x_0 + t * x_1` with velocity
//! target `x_1 - x_0`. Sampling integrates from `t = 1` down to `0` with
//! `x <- x - dt * v(x, t)`.

use crate::checkpoint::ParamStore;
use crate::error::{NumericsError, Result};
use crate::graph::Graph;
use crate::nn::{time_features, Linear};
use crate::optim::{Adam, AdamConfig};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Draw a flow time in (0, 1) as the sigmoid of a standard normal, which
/// concentrates training signal at intermediate noise levels.
pub fn sample_flow_time(rng: &mut StreamRng) -> f32 {
    let n = rng.normal();
    1.0 / (1.0 + (-n).exp())
}

/// Straight-line interpolation with one time per leading-axis sample:
/// `out[i] = (1 - t[i]) * clean[i] + t[i] * noise[i]`.
pub fn flow_interpolate(clean: &Tensor, noise: &Tensor, times: &[f32]) -> Result<Tensor> {
    if clean.shape() != noise.shape() {
        return Err(NumericsError::InvalidShape {
            op: "flow_interpolate",
            shape: noise.shape().to_vec(),
            reason: format!("noise shape differs from clean {:?}", clean.shape()),
        }
        .into());
    }
    let b = clean.shape()[0];
    if times.len() != b {
        return Err(NumericsError::InvalidShape {
            op: "flow_interpolate",
            shape: vec![times.len()],
            reason: format!("expected one time per sample ({b})"),
        }
        .into());
    }
    let per = clean.numel() / b;
    let mut out = Vec::with_capacity(clean.numel());
    for (i, &t) in times.iter().enumerate() {
        let c = &clean.data()[i * per..(i + 1) * per];
        let n = &noise.data()[i * per..(i + 1) * per];
        out.extend(c.iter().zip(n).map(|(&cv, &nv)| (1.0 - t) * cv + t * nv));
    }
    Ok(Tensor::new(clean.shape().to_vec(), out)?)
}

/// Integrate `x' = v(x, t)` from `t = 1` to `t = 0` with `n_steps` Euler
/// steps, starting from noise `x1`. The closure is called with the current
/// state and the time at the start of each step.
pub fn euler_integrate<F>(x1: Tensor, n_steps: usize, mut velocity: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f32) -> Result<Tensor>,
{
    assert!(n_steps > 0, "need at least one integration step");
    let dt = 1.0f32 / n_steps as f32;
    let mut x = x1;
    for i in 0..n_steps {
        let t = 1.0 - i as f32 * dt;
        let v = velocity(&x, t)?;
        if v.shape() != x.shape() {
            return Err(NumericsError::InvalidShape {
                op: "euler_integrate",
                shape: v.shape().to_vec(),
                reason: format!("velocity shape differs from state {:?}", x.shape()),
            }
            .into());
        }
        let data: Vec<f32> = x
            .data()
            .iter()
            .zip(v.data())
            .map(|(&xv, &vv)| xv - dt * vv)
            .collect();
        x = Tensor::new(x.shape().to_vec(), data)?;
    }
    Ok(x)
}

// ── 2-D toy flow ────────────────────────────────────────────────────────

pub const TOY_MODES: [[f32; 2]; 2] = [[-2.0, 0.0], [2.0, 0.0]];
pub const TOY_SIGMA: f32 = 0.25;
const TOY_TIME_DIM: usize = 8;

/// One draw from the equal-weight two-Gaussian mixture.
pub fn toy_data_sample(rng: &mut StreamRng) -> [f32; 2] {
    let mode = TOY_MODES[rng.int_in(0, 1)];
    [
        mode[0] + TOY_SIGMA * rng.normal(),
        mode[1] + TOY_SIGMA * rng.normal(),
    ]
}

/// Tiny MLP velocity field `v(x, t)` for the 2-D toy distribution.
pub struct ToyFlow {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl ToyFlow {
    pub fn init(store: &mut ParamStore, seed: u64) -> ToyFlow {
        ToyFlow {
            l1: Linear::init(store, seed, "toy.l1", 2 + TOY_TIME_DIM, 64, true),
            l2: Linear::init(store, seed, "toy.l2", 64, 64, true),
            l3: Linear::init(store, seed, "toy.l3", 64, 2, true),
        }
    }

    /// Batched velocity input: rows are `[x, y, time features(t)]`.
    fn make_input(x: &Tensor, t: f32) -> Tensor {
        let b = x.shape()[0];
        let feats = time_features(&[t], TOY_TIME_DIM);
        let mut data = Vec::with_capacity(b * (2 + TOY_TIME_DIM));
        for i in 0..b {
            data.extend_from_slice(&x.data()[i * 2..(i + 1) * 2]);
            data.extend_from_slice(feats.data());
        }
        Tensor::new(vec![b, 2 + TOY_TIME_DIM], data).expect("finite toy input")
    }

    pub fn velocity(&self, store: &ParamStore, x: &Tensor, t: f32) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = store.attach_frozen(&mut g);
        let xin = g.input(Self::make_input(x, t));
        let h = self.l1.forward(&mut g, &vars, xin)?;
        let h = g.gelu(h)?;
        let h = self.l2.forward(&mut g, &vars, h)?;
        let h = g.gelu(h)?;
        let v = self.l3.forward(&mut g, &vars, h)?;
        Ok(g.value(v).clone())
    }
}

/// Train the toy velocity field by flow matching; returns the loss curve.
pub fn train_toy_flow(
    flow: &ToyFlow,
    store: &mut ParamStore,
    steps: usize,
    batch: usize,
    lr: f32,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() });
    let mut curve = Vec::new();
    for step in 0..steps {
        let mut rng = StreamRng::derive(seed, "toy/train", step as u64);
        // Single shared t per step keeps the input assembly simple; the
        // sampler still sees all noise levels across steps.
        let t = sample_flow_time(&mut rng);
        let mut clean = Vec::with_capacity(batch * 2);
        for _ in 0..batch {
            clean.extend(toy_data_sample(&mut rng));
        }
        let clean = Tensor::new(vec![batch, 2], clean)?;
        let noise = Tensor::randn(&[batch, 2], 1.0, &mut rng)?;
        let xt = flow_interpolate(&clean, &noise, &vec![t; batch])?;
        let target: Vec<f32> = noise
            .data()
            .iter()
            .zip(clean.data())
            .map(|(&n, &c)| n - c)
            .collect();

        let mut g = Graph::new();
        let vars = store.attach(&mut g);
        let xin = g.input(ToyFlow::make_input(&xt, t));
        let h = flow.l1.forward(&mut g, &vars, xin)?;
        let h = g.gelu(h)?;
        let h = flow.l2.forward(&mut g, &vars, h)?;
        let h = g.gelu(h)?;
        let v = flow.l3.forward(&mut g, &vars, h)?;
        let tgt = g.input(Tensor::new(vec![batch, 2], target)?);
        let diff = g.sub(v, tgt)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean_all(sq)?;
        let loss_val = g.value(loss).item() as f64;
        let grads = g.backward(loss)?;
        adam.step(store, &vars.grads(&grads), None)?;
        if step % 100 == 0 || step + 1 == steps {
            curve.push((step, loss_val));
        }
    }
    Ok(curve)
}

/// Sample `n` points from the trained toy flow with `n_steps` Euler steps.
pub fn sample_toy_flow(
    flow: &ToyFlow,
    store: &ParamStore,
    n: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = StreamRng::derive(seed, "toy/sample", 0);
    let x1 = Tensor::randn(&[n, 2], 1.0, &mut rng)?;
    euler_integrate(x1, n_steps, |x, t| flow.velocity(store, x, t))
}
