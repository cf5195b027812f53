//! Small neural-net building blocks over the autodiff graph.
//!
//! Layers own the *names* of their parameters; tensors live in a
//! [`ParamStore`] and are attached to a fresh [`Graph`] every step. Each
//! layer's `init` draws from a stream derived from the parameter name, so
//! adding or reordering layers cannot shift another layer's initialization.

use crate::checkpoint::{ParamStore, ParamVars};
use crate::error::NumericsError;
use crate::graph::{Graph, Var};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, NumericsError>;

fn init_rng(seed: u64, name: &str) -> StreamRng {
    StreamRng::derive(seed, &format!("init/{name}"), 0)
}

// ── linear ──────────────────────────────────────────────────────────────

pub struct Linear {
    pub w: String,
    pub b: Option<String>,
}

impl Linear {
    /// Xavier-uniform weight `[in, out]` plus optional zero bias `[out]`.
    pub fn init(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Linear {
        let wname = format!("{name}.w");
        let bound = (6.0 / (in_dim + out_dim) as f32).sqrt();
        let w = Tensor::rand_uniform(&[in_dim, out_dim], -bound, bound, &mut init_rng(seed, &wname))
            .expect("finite init");
        store.insert(wname.clone(), w);
        let b = bias.then(|| {
            let bname = format!("{name}.b");
            store.insert(bname.clone(), Tensor::zeros(&[out_dim]));
            bname
        });
        Linear { w: wname, b }
    }

    /// `x: [.., in] -> [.., out]`.
    pub fn forward(&self, g: &mut Graph, vars: &ParamVars, x: Var) -> Result<Var> {
        let h = g.matmul(x, vars.var(&self.w))?;
        match &self.b {
            Some(b) => g.add(h, vars.var(b)),
            None => Ok(h),
        }
    }
}

// ── conv ────────────────────────────────────────────────────────────────

pub struct Conv2dLayer {
    pub w: String,
    pub b: String,
    pub stride: (usize, usize),
    pub pad: ((usize, usize), (usize, usize)),
}

impl Conv2dLayer {
    /// He-normal kernel `[cout, cin, kh, kw]` and zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: ((usize, usize), (usize, usize)),
    ) -> Conv2dLayer {
        let wname = format!("{name}.w");
        let scale = (2.0 / (cin * kernel.0 * kernel.1) as f32).sqrt();
        let w = Tensor::randn(
            &[cout, cin, kernel.0, kernel.1],
            scale,
            &mut init_rng(seed, &wname),
        )
        .expect("finite init");
        store.insert(wname.clone(), w);
        let bname = format!("{name}.b");
        store.insert(bname.clone(), Tensor::zeros(&[cout, 1, 1]));
        Conv2dLayer {
            w: wname,
            b: bname,
            stride,
            pad,
        }
    }

    /// `x: [B, cin, H, W] -> [B, cout, H', W']`.
    pub fn forward(&self, g: &mut Graph, vars: &ParamVars, x: Var) -> Result<Var> {
        let h = g.conv2d(x, vars.var(&self.w), self.stride, self.pad)?;
        g.add(h, vars.var(&self.b))
    }
}

// ── layer norm with affine ──────────────────────────────────────────────

pub struct LayerNormLayer {
    pub gamma: String,
    pub beta: String,
    pub eps: f32,
}

impl LayerNormLayer {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> LayerNormLayer {
        let gamma = format!("{name}.g");
        let beta = format!("{name}.b");
        store.insert(gamma.clone(), Tensor::full(&[dim], 1.0).expect("finite"));
        store.insert(beta.clone(), Tensor::zeros(&[dim]));
        LayerNormLayer {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &ParamVars, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, self.eps)?;
        let scaled = g.mul(n, vars.var(&self.gamma))?;
        g.add(scaled, vars.var(&self.beta))
    }
}

// ── multi-head self-attention ───────────────────────────────────────────

pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> MultiHeadAttention {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadAttention {
            wq: Linear::init(store, seed, &format!("{name}.q"), dim, dim, false),
            wk: Linear::init(store, seed, &format!("{name}.k"), dim, dim, false),
            wv: Linear::init(store, seed, &format!("{name}.v"), dim, dim, false),
            wo: Linear::init(store, seed, &format!("{name}.o"), dim, dim, true),
            heads,
            dim,
        }
    }

    /// Full self-attention over `x: [N, S, D]` (N = flattened batch).
    pub fn forward(&self, g: &mut Graph, vars: &ParamVars, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let (n, s, d) = (shape[0], shape[1], shape[2]);
        let dh = d / self.heads;
        let q = self.wq.forward(g, vars, x)?;
        let k = self.wk.forward(g, vars, x)?;
        let v = self.wv.forward(g, vars, x)?;

        let split = |g: &mut Graph, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[n, s, self.heads, dh])?;
            let t = g.transpose(t, 1, 2)?; // [N, H, S, dh]
            g.reshape(t, &[n * self.heads, s, dh])
        };
        let q = split(g, q)?;
        let k = split(g, k)?;
        let v = split(g, v)?;

        let kt = g.transpose(k, 1, 2)?; // [NH, dh, S]
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?; // [NH, S, dh]

        let ctx = g.reshape(ctx, &[n, self.heads, s, dh])?;
        let ctx = g.transpose(ctx, 1, 2)?; // [N, S, H, dh]
        let ctx = g.reshape(ctx, &[n, s, d])?;
        self.wo.forward(g, vars, ctx)
    }
}

// ── embedding table ─────────────────────────────────────────────────────

pub struct EmbeddingTable {
    pub name: String,
}

impl EmbeddingTable {
    pub fn init(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> EmbeddingTable {
        let t = Tensor::randn(&[vocab, dim], 0.02, &mut init_rng(seed, name)).expect("finite init");
        store.insert(name.to_string(), t);
        EmbeddingTable {
            name: name.to_string(),
        }
    }

    pub fn lookup(&self, g: &mut Graph, vars: &ParamVars, ids: &[usize]) -> Result<Var> {
        g.embedding(vars.var(&self.name), ids)
    }
}

// ── sinusoidal time features (data side, not differentiated) ────────────

/// Sinusoidal features for scalar times: `[B, dim]` with interleaved
/// sin/cos at geometrically spaced frequencies.
pub fn time_features(ts: &[f32], dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "time feature dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (10_000f32).powf(-(i as f32) / half as f32);
            data.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = (10_000f32).powf(-(i as f32) / half as f32);
            data.push((t * freq).cos());
        }
    }
    Tensor::new(vec![ts.len(), dim], data).expect("sin/cos are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_shapes_and_bias() {
        let mut store = ParamStore::new();
        let lin = Linear::init(&mut store, 0, "l", 4, 3, true);
        let mut g = Graph::new();
        let vars = store.attach(&mut g);
        let x = g.input(Tensor::zeros(&[2, 4]));
        let y = lin.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        // zero input + zero bias => zero output
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_preserves_shape_and_differentiates() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::init(&mut store, 1, "attn", 16, 4);
        let mut g = Graph::new();
        let vars = store.attach(&mut g);
        let mut rng = StreamRng::derive(2, "x", 0);
        let x = g.input(Tensor::randn(&[3, 5, 16], 1.0, &mut rng).unwrap());
        let y = mha.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 5, 16]);
        let loss = g.mean_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let gq = vars.grads(&grads);
        assert!(gq.contains_key("attn.q.w"));
        assert!(gq.contains_key("attn.o.b"));
    }

    #[test]
    fn layer_norm_affine_identity_at_init() {
        // gamma=1, beta=0 at init: output equals plain layer_norm.
        let mut store = ParamStore::new();
        let ln = LayerNormLayer::init(&mut store, "ln", 8);
        let mut g = Graph::new();
        let vars = store.attach(&mut g);
        let mut rng = StreamRng::derive(0, "x", 0);
        let x = g.input(Tensor::randn(&[4, 8], 2.0, &mut rng).unwrap());
        let y = ln.forward(&mut g, &vars, x).unwrap();
        let plain = g.layer_norm(x, 1e-5).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(plain).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn time_features_bounded_and_distinct() {
        let f = time_features(&[0.0, 0.5, 1.0], 32);
        assert_eq!(f.shape(), &[3, 32]);
        assert!(f.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let rows: Vec<&[f32]> = f.data().chunks_exact(32).collect();
        assert!(rows[0] != rows[1] && rows[1] != rows[2]);
    }

    #[test]
    fn init_streams_are_name_keyed() {
        // Same name => same init; different name => different init.
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        Linear::init(&mut s1, 7, "a", 8, 8, false);
        Linear::init(&mut s2, 7, "a", 8, 8, false);
        assert_eq!(s1.get("a.w"), s2.get("a.w"));
        let mut s3 = ParamStore::new();
        Linear::init(&mut s3, 7, "b", 8, 8, false);
        assert_ne!(s1.get("a.w").data(), s3.get("b.w").data());
    }
}
