//! Graph-transformer noise predictor over the complete directed region graph.
//!
//! Nodes carry projected region conditions, edges carry the noisy flow state
//! in both directions plus log distance. Each block runs multi-head node
//! attention whose logits are biased per head by the edge state, then
//! refreshes every edge from its own state and its two endpoint nodes. The
//! read-out maps each ordered pair's edge state to one noise value.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::ConditionSet;
use crate::nn::{Graph, LayerNorm, Linear, Mlp, ParamStore, Tensor, Var};

/// Raw per-edge channels: `z_ij`, `z_ji`, `log1p(d_ij)`, self-loop flag.
const EDGE_IN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Width of a region condition row (embedding dimension + 1).
    pub cond_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub edge_dim: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    pub fn new(cond_dim: usize) -> Self {
        DenoiserConfig {
            cond_dim,
            d_model: 64,
            heads: 4,
            layers: 3,
            edge_dim: 32,
            time_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cond_dim == 0 || self.d_model == 0 || self.edge_dim == 0 || self.heads == 0 {
            return Err(Error::Usage(
                "denoiser widths and head count must be positive".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Usage(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Usage(
                "time embedding width must be even and at least 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    edge_bias: Linear,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
    edge_self: Linear,
    edge_src: Linear,
    edge_dst: Linear,
    edge_out: Linear,
    edge_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    proj: Mlp,
    time: Mlp,
    time_edge: Linear,
    edge_in: Linear,
    edge_in_src: Linear,
    edge_in_dst: Linear,
    edge_in_norm: LayerNorm,
    blocks: Vec<Block>,
    read_self: Linear,
    read_src: Linear,
    read_dst: Linear,
    read_out: Linear,
}

impl Denoiser {
    pub fn new<R: Rng>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, de) = (config.d_model, config.edge_dim);
        let mut s = ParamStore::new();
        let proj = Mlp::new(&mut s, "proj", config.cond_dim, d, d, rng);
        let time = Mlp::new(&mut s, "time", config.time_dim, d, d, rng);
        let time_edge = Linear::new(&mut s, "time_edge", d, de, false, rng);
        let edge_in = Linear::new(&mut s, "edge_in", EDGE_IN, de, true, rng);
        let edge_in_src = Linear::new(&mut s, "edge_in_src", d, de, false, rng);
        let edge_in_dst = Linear::new(&mut s, "edge_in_dst", d, de, false, rng);
        let edge_in_norm = LayerNorm::new(&mut s, "edge_in_norm", de);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = |n: &str| format!("block{l}.{n}");
                Block {
                    q: Linear::new(&mut s, &p("q"), d, d, true, rng),
                    k: Linear::new(&mut s, &p("k"), d, d, true, rng),
                    v: Linear::new(&mut s, &p("v"), d, d, true, rng),
                    o: Linear::new(&mut s, &p("o"), d, d, true, rng),
                    edge_bias: Linear::new(&mut s, &p("edge_bias"), de, config.heads, false, rng),
                    norm1: LayerNorm::new(&mut s, &p("norm1"), d),
                    ffn: Mlp::new(&mut s, &p("ffn"), d, 2 * d, d, rng),
                    norm2: LayerNorm::new(&mut s, &p("norm2"), d),
                    edge_self: Linear::new(&mut s, &p("edge_self"), de, de, true, rng),
                    edge_src: Linear::new(&mut s, &p("edge_src"), d, de, false, rng),
                    edge_dst: Linear::new(&mut s, &p("edge_dst"), d, de, false, rng),
                    edge_out: Linear::new(&mut s, &p("edge_out"), de, de, true, rng),
                    edge_norm: LayerNorm::new(&mut s, &p("edge_norm"), de),
                }
            })
            .collect();
        let read_self = Linear::new(&mut s, "read_self", de, de, true, rng);
        let read_src = Linear::new(&mut s, "read_src", d, de, false, rng);
        let read_dst = Linear::new(&mut s, "read_dst", d, de, false, rng);
        let read_out = Linear::new(&mut s, "read_out", de, 1, true, rng);
        Ok(Denoiser {
            config,
            store: s,
            proj,
            time,
            time_edge,
            edge_in,
            edge_in_src,
            edge_in_dst,
            edge_in_norm,
            blocks,
            read_self,
            read_src,
            read_dst,
            read_out,
        })
    }

    /// Records the forward pass on `g`; the result has shape `[N, N]`.
    pub fn forward(&self, g: &mut Graph, z: &[f64], t: usize, cond: &ConditionSet) -> Result<Var> {
        let n = cond.n();
        let cfg = &self.config;
        if n == 0 {
            return Err(Error::Shape("condition set has no regions".into()));
        }
        if z.len() != n * n {
            return Err(Error::Shape(format!(
                "state has {} entries, {n} regions need {}",
                z.len(),
                n * n
            )));
        }
        if cond.cols() != cfg.cond_dim {
            return Err(Error::Shape(format!(
                "condition rows have {} columns, model expects {}",
                cond.cols(),
                cfg.cond_dim
            )));
        }
        let s = &self.store;

        let temb = g.constant(Tensor::new(
            vec![cfg.time_dim],
            time_embedding(t, cfg.time_dim),
        )?);
        let tn = self.time.forward(g, s, temb)?;
        let te = self.time_edge.forward(g, s, tn)?;

        let x = g.constant(Tensor::new(vec![n, cfg.cond_dim], cond.x.clone())?);
        let h = self.proj.forward(g, s, x)?;
        let mut h = g.add(h, tn)?;

        let mut raw = Vec::with_capacity(n * n * EDGE_IN);
        for i in 0..n {
            for j in 0..n {
                raw.extend_from_slice(&[
                    z[i * n + j],
                    z[j * n + i],
                    cond.distances[i * n + j].ln_1p(),
                    if i == j { 1.0 } else { 0.0 },
                ]);
            }
        }
        let raw = g.constant(Tensor::new(vec![n * n, EDGE_IN], raw)?);
        let e = self.edge_in.forward(g, s, raw)?;
        let e = self.add_endpoints(g, e, h, self.edge_in_src, self.edge_in_dst)?;
        let e = g.add(e, te)?;
        let mut e = self.edge_in_norm.forward(g, s, e)?;

        for b in &self.blocks {
            h = self.attend(g, b, h, e, n)?;
            let f = b.ffn.forward(g, s, h)?;
            let f = g.add(h, f)?;
            h = b.norm2.forward(g, s, f)?;

            let u = b.edge_self.forward(g, s, e)?;
            let u = self.add_endpoints(g, u, h, b.edge_src, b.edge_dst)?;
            let u = g.gelu(u);
            let u = b.edge_out.forward(g, s, u)?;
            let u = g.add(e, u)?;
            e = b.edge_norm.forward(g, s, u)?;
        }

        let r = self.read_self.forward(g, s, e)?;
        let r = self.add_endpoints(g, r, h, self.read_src, self.read_dst)?;
        let r = g.gelu(r);
        let out = self.read_out.forward(g, s, r)?;
        g.reshape(out, &[n, n])
    }

    /// `e + src(h_i) + dst(h_j)` for every edge `(i, j)`.
    fn add_endpoints(
        &self,
        g: &mut Graph,
        e: Var,
        h: Var,
        src: Linear,
        dst: Linear,
    ) -> Result<Var> {
        let a = src.forward(g, &self.store, h)?;
        let a = g.pair_origin(a)?;
        let b = dst.forward(g, &self.store, h)?;
        let b = g.pair_dest(b)?;
        let e = g.add(e, a)?;
        g.add(e, b)
    }

    fn attend(&self, g: &mut Graph, b: &Block, h: Var, e: Var, n: usize) -> Result<Var> {
        let s = &self.store;
        let (d, heads) = (self.config.d_model, self.config.heads);
        let dh = d / heads;
        let q = b.q.forward(g, s, h)?;
        let k = b.k.forward(g, s, h)?;
        let v = b.v.forward(g, s, h)?;
        let bias = b.edge_bias.forward(g, s, e)?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = g.slice(q, 1, lo, hi)?;
            let kh = g.slice(k, 1, lo, hi)?;
            let vh = g.slice(v, 1, lo, hi)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
            let bh = g.slice(bias, 1, hd, hd + 1)?;
            let bh = g.reshape(bh, &[n, n])?;
            let logits = g.add(logits, bh)?;
            let a = g.softmax(logits, 1)?;
            outs.push(g.matmul_sorted(a, vh)?);
        }
        let o = g.concat(&outs, 1)?;
        let o = b.o.forward(g, s, o)?;
        let r = g.add(h, o)?;
        b.norm1.forward(g, s, r)
    }
}

/// Sinusoidal embedding of the step index.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let w = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.push((t as f64 * w).sin());
    }
    for k in 0..half {
        let w = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.push((t as f64 * w).cos());
    }
    out
}

/// ε̂ for state `z` (row-major N×N) at step `t`.
pub fn predict_noise(
    model: &Denoiser,
    z: &[f64],
    t: usize,
    cond: &ConditionSet,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, z, t, cond)?;
    let v = g.value(out);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("noise prediction at step {t}")));
    }
    Ok(v.data().to_vec())
}
