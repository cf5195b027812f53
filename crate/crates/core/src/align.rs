//! Prototype-based state alignment between observations and goal images.
//!
//! Two small conv encoders (one for generated goals, one for raw
//! observations) map frames onto the unit sphere in R^d. A shared bank of
//! prototypes turns each embedding into a soft assignment via a
//! temperature softmax; balanced targets come from a few Sinkhorn-Knopp
//! iterations over the batch, and each view is trained to predict the
//! *other* view's targets (swapped prediction). Prototype rows are
//! re-normalized to unit length after every optimizer step.

use crate::checkpoint::{ParamStore, ParamVars};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2dLayer, Linear};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, crate::error::CoreError>;

#[derive(Clone, Copy, Debug)]
pub struct AlignConfig {
    pub num_prototypes: usize,
    pub dim: usize,
    pub temperature: f32,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
    /// Positive pairs are frames `k` steps apart with
    /// `k ~ U[goal_near, goal_far]`.
    pub goal_near: usize,
    pub goal_far: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            num_prototypes: 64,
            dim: 64,
            temperature: 0.1,
            sinkhorn_eps: 0.05,
            sinkhorn_iters: 3,
            goal_near: 1,
            goal_far: 16,
        }
    }
}

pub const PROTO_PARAM: &str = "align.proto";

// ── encoders ────────────────────────────────────────────────────────────

pub struct ConvEncoder {
    c1: Conv2dLayer,
    c2: Conv2dLayer,
    c3: Conv2dLayer,
    fc: Linear,
}

impl ConvEncoder {
    fn init(store: &mut ParamStore, seed: u64, prefix: &str, frame: usize, dim: usize) -> Self {
        assert!(frame % 8 == 0, "encoder expects frame divisible by 8");
        let side = frame / 8;
        let p = ((1, 1), (1, 1));
        ConvEncoder {
            c1: Conv2dLayer::init(store, seed, &format!("{prefix}.c1"), 3, 16, (3, 3), (2, 2), p),
            c2: Conv2dLayer::init(store, seed, &format!("{prefix}.c2"), 16, 32, (3, 3), (2, 2), p),
            c3: Conv2dLayer::init(store, seed, &format!("{prefix}.c3"), 32, 64, (3, 3), (2, 2), p),
            fc: Linear::init(store, seed, &format!("{prefix}.fc"), 64 * side * side, dim, true),
        }
    }

    /// `[B, 3, S, S] -> [B, dim]`, rows on the unit sphere.
    pub fn forward(&self, g: &mut Graph, vars: &ParamVars, x: Var) -> Result<Var> {
        let h = self.c1.forward(g, vars, x)?;
        let h = g.gelu(h)?;
        let h = self.c2.forward(g, vars, h)?;
        let h = g.gelu(h)?;
        let h = self.c3.forward(g, vars, h)?;
        let h = g.gelu(h)?;
        let s = g.value(h).shape().to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
        let z = self.fc.forward(g, vars, flat)?;
        Ok(g.l2_normalize(z)?)
    }
}

pub struct AlignModel {
    pub cfg: AlignConfig,
    pub source: ConvEncoder,
    pub target: ConvEncoder,
}

impl AlignModel {
    pub fn init(store: &mut ParamStore, seed: u64, cfg: AlignConfig, frame: usize) -> AlignModel {
        let source = ConvEncoder::init(store, seed, "align.src", frame, cfg.dim);
        let target = ConvEncoder::init(store, seed, "align.tgt", frame, cfg.dim);
        let mut rng = StreamRng::derive(seed, "init/align.proto", 0);
        let raw = Tensor::randn(&[cfg.num_prototypes, cfg.dim], 1.0, &mut rng).expect("finite");
        let mut t = raw.data().to_vec();
        for row in t.chunks_mut(cfg.dim) {
            let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32;
            for v in row.iter_mut() {
                *v /= n.max(1e-12);
            }
        }
        store.insert(
            PROTO_PARAM,
            Tensor::new(vec![cfg.num_prototypes, cfg.dim], t).expect("finite"),
        );
        AlignModel { cfg, source, target }
    }

    /// Raw prototype scores `z @ E^T`, shape `[B, N]`.
    pub fn scores(&self, g: &mut Graph, vars: &ParamVars, z: Var) -> Result<Var> {
        let proto = vars.var(PROTO_PARAM);
        let et = g.transpose(proto, 0, 1)?;
        Ok(g.matmul(z, et)?)
    }

    /// Softmax assignment probabilities at the configured temperature.
    pub fn assign_probs(&self, g: &mut Graph, vars: &ParamVars, z: Var) -> Result<Var> {
        let s = self.scores(g, vars, z)?;
        let scaled = g.scale(s, 1.0 / self.cfg.temperature)?;
        Ok(g.softmax(scaled)?)
    }
}

/// Re-project every prototype row onto the unit sphere (call after each
/// optimizer step).
pub fn renorm_prototypes(store: &mut ParamStore) {
    let t = store.get(PROTO_PARAM).clone();
    let d = t.shape()[1];
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(d) {
        let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32;
        for v in row.iter_mut() {
            *v /= n.max(1e-12);
        }
    }
    store.insert(PROTO_PARAM, Tensor::new(t.shape().to_vec(), data).expect("finite"));
}

// ── balanced targets ────────────────────────────────────────────────────

pub struct SinkhornResult {
    /// Targets `[B, N]`; every row sums to 1.
    pub targets: Tensor,
    /// Column sums observed right after the final column step (each should
    /// equal B/N up to round-off).
    pub col_sums_after_col_step: Vec<f64>,
}

/// Sinkhorn-Knopp balanced assignment over a batch of prototype scores.
///
/// Internally f64. Starts from `exp(scores / eps)` (stabilized by
/// subtracting the global max, which cancels in the first column step),
/// then alternates column steps (column sums to B/N) and row steps (row
/// sums to 1) for `iters` rounds, returning right after a row step.
pub fn sinkhorn(scores: &Tensor, eps: f64, iters: usize) -> SinkhornResult {
    let b = scores.shape()[0];
    let n = scores.shape()[1];
    assert!(iters >= 1);
    let gmax = scores.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut q: Vec<f64> = scores
        .data()
        .iter()
        .map(|&s| ((s as f64 - gmax) / eps).exp())
        .collect();
    let mut col_sums = vec![0.0f64; n];
    for _ in 0..iters {
        // Column step: each prototype receives B/N total mass.
        for c in col_sums.iter_mut() {
            *c = 0.0;
        }
        for bi in 0..b {
            for ni in 0..n {
                col_sums[ni] += q[bi * n + ni];
            }
        }
        let want = b as f64 / n as f64;
        for bi in 0..b {
            for ni in 0..n {
                q[bi * n + ni] *= want / col_sums[ni].max(1e-300);
            }
        }
        for c in col_sums.iter_mut() {
            *c = 0.0;
        }
        for bi in 0..b {
            for ni in 0..n {
                col_sums[ni] += q[bi * n + ni];
            }
        }
        // Row step: each sample's assignment is a distribution.
        for bi in 0..b {
            let row = &mut q[bi * n..(bi + 1) * n];
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s.max(1e-300);
            }
        }
    }
    let targets = Tensor::new(
        vec![b, n],
        q.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
    )
    .expect("finite sinkhorn targets");
    SinkhornResult {
        targets,
        col_sums_after_col_step: col_sums,
    }
}

/// Balanced targets only (the common call).
pub fn sinkhorn_targets(scores: &Tensor, eps: f64, iters: usize) -> Tensor {
    sinkhorn(scores, eps, iters).targets
}

// ── swapped prediction loss ─────────────────────────────────────────────

/// `-(1/B) * sum_b sum_n [ q_s ln p_t + q_t ln p_s ]` with probabilities
/// floored at 1e-12. Targets enter as constants (no gradient).
pub fn swapped_loss(
    g: &mut Graph,
    p_source: Var,
    p_target: Var,
    q_source: &Tensor,
    q_target: &Tensor,
) -> Result<Var> {
    let b = q_source.shape()[0] as f32;
    let qs = g.input(q_source.clone());
    let qt = g.input(q_target.clone());
    let lpt = {
        let f = g.max_scalar(p_target, 1e-12)?;
        g.log(f)?
    };
    let lps = {
        let f = g.max_scalar(p_source, 1e-12)?;
        g.log(f)?
    };
    let a = g.mul(qs, lpt)?;
    let c = g.mul(qt, lps)?;
    let sum = {
        let s1 = g.sum_all(a)?;
        let s2 = g.sum_all(c)?;
        g.add(s1, s2)?
    };
    Ok(g.scale(sum, -1.0 / b)?)
}

/// Swapped-prediction loss for a batch of pixel pairs; `q` targets are
/// computed outside the graph. Returns the loss variable plus both
/// embeddings for callers that want them (e.g. the policy).
pub struct AlignForward {
    pub loss: Var,
    pub z_source: Var,
    pub z_target: Var,
}

pub fn align_forward(
    model: &AlignModel,
    g: &mut Graph,
    vars: &ParamVars,
    source_frames: Var,
    target_frames: Var,
) -> Result<AlignForward> {
    let z_s = model.source.forward(g, vars, source_frames)?;
    let z_t = model.target.forward(g, vars, target_frames)?;
    let p_s = model.assign_probs(g, vars, z_s)?;
    let p_t = model.assign_probs(g, vars, z_t)?;
    let s_s = model.scores(g, vars, z_s)?;
    let s_t = model.scores(g, vars, z_t)?;
    let q_s = sinkhorn_targets(
        g.value(s_s),
        model.cfg.sinkhorn_eps,
        model.cfg.sinkhorn_iters,
    );
    let q_t = sinkhorn_targets(
        g.value(s_t),
        model.cfg.sinkhorn_eps,
        model.cfg.sinkhorn_iters,
    );
    let loss = swapped_loss(g, p_s, p_t, &q_s, &q_t)?;
    Ok(AlignForward {
        loss,
        z_source: z_s,
        z_target: z_t,
    })
}

// ── inference helpers ───────────────────────────────────────────────────

/// Embed frames with the goal (source) encoder, no gradients.
pub fn embed_source(model: &AlignModel, params: &ParamStore, frames: Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.attach_frozen(&mut g);
    let x = g.input(frames);
    let z = model.source.forward(&mut g, &vars, x)?;
    Ok(g.value(z).clone())
}

/// Embed frames with the observation (target) encoder, no gradients.
pub fn embed_target(model: &AlignModel, params: &ParamStore, frames: Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.attach_frozen(&mut g);
    let x = g.input(frames);
    let z = model.target.forward(&mut g, &vars, x)?;
    Ok(g.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinkhorn_uniform_scores_give_uniform_targets() {
        let scores = Tensor::zeros(&[8, 16]);
        let r = sinkhorn(&scores, 0.05, 3);
        let want = 1.0 / 16.0;
        for &v in r.targets.data() {
            assert!((v - want).abs() < 1e-12, "got {v}, want {want}");
        }
    }

    #[test]
    fn sinkhorn_marginals_hold() {
        let mut rng = StreamRng::derive(31, "s", 0);
        let scores = Tensor::randn(&[12, 6], 1.0, &mut rng).unwrap();
        let r = sinkhorn(&scores, 0.05, 3);
        let want_col = 12.0 / 6.0;
        for &c in &r.col_sums_after_col_step {
            assert!((c - want_col).abs() < 1e-6, "column sum {c}");
        }
        for bi in 0..12 {
            let s: f64 = r.targets.data()[bi * 6..(bi + 1) * 6]
                .iter()
                .map(|&v| v as f64)
                .sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    /// Independent reference: the textbook normalization scales columns
    /// to 1/N and rows to 1/B; our batch-mass convention is exactly B
    /// times that matrix.
    fn textbook_sinkhorn(scores: &Tensor, eps: f64, iters: usize) -> Vec<f64> {
        let b = scores.shape()[0];
        let n = scores.shape()[1];
        let mut q: Vec<f64> = scores.data().iter().map(|&s| (s as f64 / eps).exp()).collect();
        for _ in 0..iters {
            for ni in 0..n {
                let mut cs = 0.0;
                for bi in 0..b {
                    cs += q[bi * n + ni];
                }
                for bi in 0..b {
                    q[bi * n + ni] *= (1.0 / n as f64) / cs;
                }
            }
            for bi in 0..b {
                let rs: f64 = q[bi * n..(bi + 1) * n].iter().sum();
                for v in &mut q[bi * n..(bi + 1) * n] {
                    *v *= (1.0 / b as f64) / rs;
                }
            }
        }
        q
    }

    #[test]
    fn sinkhorn_matches_textbook_reference_up_to_batch_mass() {
        let mut rng = StreamRng::derive(32, "s", 0);
        let scores = Tensor::randn(&[9, 5], 0.5, &mut rng).unwrap();
        let ours = sinkhorn_targets(&scores, 0.07, 3);
        let reference = textbook_sinkhorn(&scores, 0.07, 3);
        for (i, &v) in ours.data().iter().enumerate() {
            let want = reference[i] * 9.0;
            assert!(
                (v as f64 - want).abs() < 1e-6,
                "entry {i}: ours {v}, textbook*B {want}"
            );
        }
    }

    #[test]
    fn sinkhorn_large_eps_limits_to_uniform() {
        let mut rng = StreamRng::derive(33, "s", 0);
        let scores = Tensor::randn(&[6, 8], 2.0, &mut rng).unwrap();
        let q = sinkhorn_targets(&scores, 1e6, 3);
        for &v in q.data() {
            assert!((v - 1.0 / 8.0).abs() < 1e-4, "entry {v} not near uniform");
        }
    }

    #[test]
    fn assignment_temperature_anchor() {
        // Two orthogonal prototypes, embedding on the first: softmax at
        // temperature 0.1 puts 1/(1+e^-10) on the matching prototype.
        let mut store = ParamStore::new();
        let cfg = AlignConfig {
            num_prototypes: 2,
            dim: 2,
            temperature: 0.1,
            ..AlignConfig::default()
        };
        let model = AlignModel::init(&mut store, 0, cfg, 32);
        store.insert(
            PROTO_PARAM,
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let mut g = Graph::new();
        let vars = store.attach_frozen(&mut g);
        let z = g.input(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let p = model.assign_probs(&mut g, &vars, z).unwrap();
        let pv = g.value(p).data().to_vec();
        assert!((pv[0] - 0.999_954_6).abs() < 1e-6, "p0 {}", pv[0]);
        assert!((pv[1] - 4.539_787e-5).abs() < 1e-7, "p1 {}", pv[1]);
    }

    #[test]
    fn swapped_loss_uniform_probs_hit_closed_form() {
        // With uniform assignment probabilities the loss is 2 ln N for any
        // valid targets.
        let mut store = ParamStore::new();
        let model = AlignModel::init(&mut store, 1, AlignConfig::default(), 32);
        let n = model.cfg.num_prototypes;
        let b = 4;
        let mut g = Graph::new();
        let _vars = store.attach_frozen(&mut g);
        let uniform = Tensor::full(&[b, n], 1.0 / n as f32).unwrap();
        let p_s = g.input(uniform.clone());
        let p_t = g.input(uniform);
        let mut rng = StreamRng::derive(34, "q", 0);
        let q_s = sinkhorn_targets(&Tensor::randn(&[b, n], 1.0, &mut rng).unwrap(), 0.05, 3);
        let q_t = sinkhorn_targets(&Tensor::randn(&[b, n], 1.0, &mut rng).unwrap(), 0.05, 3);
        let loss = swapped_loss(&mut g, p_s, p_t, &q_s, &q_t).unwrap();
        let want = 2.0 * (n as f32).ln();
        let got = g.value(loss).item();
        assert!((got - want).abs() < 1e-4, "loss {got}, want {want}");
    }

    #[test]
    fn prototype_rows_are_unit_after_renorm() {
        let mut store = ParamStore::new();
        let _ = AlignModel::init(&mut store, 2, AlignConfig::default(), 32);
        // Scramble then renorm.
        let t = store.get(PROTO_PARAM).clone();
        let data: Vec<f32> = t.data().iter().map(|&v| v * 3.7 + 0.1).collect();
        store.insert(PROTO_PARAM, Tensor::new(t.shape().to_vec(), data).unwrap());
        renorm_prototypes(&mut store);
        let t = store.get(PROTO_PARAM);
        for row in t.data().chunks(t.shape()[1]) {
            let n: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            assert!((n.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn encoders_emit_unit_rows_and_train_signal_flows() {
        let mut store = ParamStore::new();
        let model = AlignModel::init(&mut store, 3, AlignConfig::default(), 32);
        let mut rng = StreamRng::derive(35, "x", 0);
        let xs = Tensor::rand_uniform(&[3, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap();
        let xt = Tensor::rand_uniform(&[3, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = store.attach(&mut g);
        let sx = g.input(xs);
        let tx = g.input(xt);
        let fwd = align_forward(&model, &mut g, &vars, sx, tx).unwrap();
        let z = g.value(fwd.z_source);
        assert_eq!(z.shape(), &[3, 64]);
        for row in z.data().chunks(64) {
            let n: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            assert!((n.sqrt() - 1.0).abs() < 1e-4);
        }
        let grads = g.backward(fwd.loss).unwrap();
        let named = vars.grads(&grads);
        let gp = named.get(PROTO_PARAM).expect("prototype gradient");
        assert!(gp.data().iter().any(|&v| v != 0.0));
        let gsrc = named.get("align.src.c1.w").expect("source conv gradient");
        assert!(gsrc.data().iter().any(|&v| v != 0.0));
    }
}
