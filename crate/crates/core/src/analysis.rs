//! Expert similarity, routing load, parameter/FLOP accounting and a small
//! sparse-path benchmark.

use std::fmt::Write as _;
use std::io;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{FineRConfig, RouterMode};
use crate::error::{Error, Result};
use crate::moe_layer::{sparse_experts_forward, MoEModel};
use crate::numerics::{Matrix, Rng, Scalar};
use crate::router::{route, RoutingDecision};

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub mean: f64,
    pub pairs: usize,
    /// `(i, j, cosine)` for `i < j`, in lexicographic order.
    pub values: Vec<(usize, usize, f64)>,
}

impl SimilarityReport {
    pub fn to_kv(&self) -> String {
        format!("mean_cosine={}\npairs={}\n", self.mean, self.pairs)
    }

    /// Columns: `i,j,cosine`.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        out.write_record(["i", "j", "cosine"]).map_err(io_err)?;
        for (i, j, c) in &self.values {
            out.serialize((i, j, c)).map_err(io_err)?;
        }
        out.flush().map_err(|e| Error::io("csv output", e))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y)
}

/// Cosine similarity, clamped to `[-1, 1]`. Zero vectors have similarity 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    cosine_with_norms(a, b, dot(a, a), dot(b, b))
}

fn cosine_with_norms(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Mean pairwise cosine similarity of the experts, each flattened as
/// `W1 ‖ Wg ‖ W2`.
pub fn expert_similarity<T: Scalar>(model: &MoEModel<T>) -> Result<SimilarityReport> {
    let n = model.experts.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("similarity needs at least 2 experts, got {n}")));
    }
    let flat: Vec<Vec<f64>> = model
        .experts
        .par_iter()
        .map(|e| e.flatten().into_iter().map(Scalar::as_f64).collect())
        .collect();
    let norms: Vec<f64> = flat.iter().map(|v| dot(v, v)).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values: Vec<(usize, usize, f64)> = pairs
        .par_iter()
        .map(|&(i, j)| (i, j, cosine_with_norms(&flat[i], &flat[j], norms[i], norms[j])))
        .collect();
    let mean = values.iter().map(|v| v.2).sum::<f64>() / values.len() as f64;
    Ok(SimilarityReport {
        mean,
        pairs: values.len(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub tokens: usize,
    pub n_active: usize,
    pub counts: Vec<usize>,
    pub f: Vec<f64>,
    /// `max(f) / mean(f)`; the mean is 1 by construction.
    pub imbalance: f64,
}

impl LoadReport {
    pub fn total_activations(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tokens={}", self.tokens);
        let _ = writeln!(s, "experts={}", self.counts.len());
        let _ = writeln!(s, "active_per_token={}", self.n_active);
        let _ = writeln!(s, "total_activations={}", self.total_activations());
        let _ = writeln!(s, "max_f={}", self.imbalance);
        let min = self.f.iter().copied().fold(f64::INFINITY, f64::min);
        let _ = writeln!(s, "min_f={min}");
        s
    }

    /// Columns: `expert,count,f`.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        out.write_record(["expert", "count", "f"]).map_err(io_err)?;
        for (k, (c, f)) in self.counts.iter().zip(&self.f).enumerate() {
            out.serialize((k, c, f)).map_err(io_err)?;
        }
        out.flush().map_err(|e| Error::io("csv output", e))
    }
}

/// Aggregate expert load over a stream of routing decisions.
pub fn route_stats<T: Scalar>(decisions: &[RoutingDecision<T>]) -> Result<LoadReport> {
    let first = decisions.first().ok_or(Error::EmptyInput("route_stats"))?;
    let n = first.n_experts();
    let k = first.n_active();
    let mut counts = vec![0usize; n];
    let mut tokens = 0;
    for d in decisions {
        if d.layout != first.layout {
            return Err(Error::InvalidArgument("route_stats: decisions use different layouts".into()));
        }
        tokens += d.tokens();
        for &e in &d.indices {
            counts[e] += 1;
        }
    }
    if tokens == 0 {
        return Err(Error::EmptyInput("route_stats"));
    }
    let f: Vec<f64> = counts.iter().map(|&c| (n * c) as f64 / (k * tokens) as f64).collect();
    let imbalance = f.iter().copied().fold(0.0, f64::max);
    Ok(LoadReport {
        tokens,
        n_active: k,
        counts,
        f,
        imbalance,
    })
}

/// Transformer weights outside the FFN, for turning per-layer counts into
/// whole-model counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backbone {
    pub layers: usize,
    pub hidden: usize,
    pub vocab: usize,
    /// Width of the key and value projections (grouped-query attention).
    pub kv_dim: usize,
    pub qkv_bias: bool,
    /// Count the output head separately from the input embedding.
    pub untied_head: bool,
}

/// Qwen2.5-1.5B, with the LM head counted separately from the embedding.
pub const REFERENCE_BACKBONE: Backbone = Backbone {
    layers: 28,
    hidden: 1536,
    vocab: 151_936,
    kv_dim: 256,
    qkv_bias: true,
    untied_head: true,
};

impl Backbone {
    pub fn attention_params(&self) -> u64 {
        let (h, kv) = (self.hidden as u64, self.kv_dim as u64);
        let bias = if self.qkv_bias { h + 2 * kv } else { 0 };
        2 * h * h + 2 * h * kv + bias
    }

    /// Embedding, head, attention and norms.
    pub fn non_ffn_params(&self) -> u64 {
        let h = self.hidden as u64;
        let embed = self.vocab as u64 * h;
        let head = if self.untied_head { embed } else { 0 };
        let norms = (2 * self.layers as u64 + 1) * h;
        embed + head + self.layers as u64 * self.attention_params() + norms
    }

    /// Whole-model `(total, activated)` with one FFN replaced per layer.
    pub fn model_params(&self, ffn: &CostReport) -> (u64, u64) {
        let base = self.non_ffn_params();
        let l = self.layers as u64;
        (base + l * ffn.total_params, base + l * ffn.activated_params)
    }
}

/// Per-layer cost of one FineRMoE FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub total_params: u64,
    pub activated_params: u64,
    pub shared_flops: u64,
    pub sparse_flops: u64,
    pub router_flops: u64,
    pub concat_proj_flops: u64,
    pub tokens: usize,
    pub wall_secs_per_token: Option<f64>,
}

impl CostReport {
    pub fn flops_per_token(&self) -> u64 {
        self.shared_flops + self.sparse_flops + self.router_flops + self.concat_proj_flops
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "total_params={}", self.total_params);
        let _ = writeln!(s, "activated_params={}", self.activated_params);
        let _ = writeln!(s, "flops_per_token={}", self.flops_per_token());
        let _ = writeln!(s, "shared_flops={}", self.shared_flops);
        let _ = writeln!(s, "sparse_flops={}", self.sparse_flops);
        let _ = writeln!(s, "router_flops={}", self.router_flops);
        let _ = writeln!(s, "concat_proj_flops={}", self.concat_proj_flops);
        if let Some(w) = self.wall_secs_per_token {
            let _ = writeln!(s, "tokens={}", self.tokens);
            let _ = writeln!(s, "wall_secs_per_token={w:.3e}");
        }
        s
    }
}

/// Parameter and FLOP counts of one layer; FLOPs are two per
/// multiply-accumulate. With `timed`, a random layer is built and its
/// forward pass over `tokens` random inputs is measured.
pub fn cost_report(cfg: &FineRConfig, tokens: usize, timed: bool) -> Result<CostReport> {
    let d = cfg.dims()?;
    let (h, hh) = (cfg.hidden as u64, cfg.intermediate as u64);
    let (he, ho) = (d.expert_intermediate as u64, d.expert_output as u64);
    let shared = if cfg.share_expert { 3 * h * hh } else { 0 };
    let per_expert = 2 * h * he + he * ho;
    let router = h * d.n_experts as u64
        + match cfg.router_mode {
            RouterMode::Single => 0,
            RouterMode::Separate => h * d.n_groups as u64,
        };
    let proj = if cfg.concat_proj { h * h } else { 0 };
    let total = shared + d.n_experts as u64 * per_expert + router + proj;
    let activated = shared + d.n_active as u64 * per_expert + router + proj;

    let wall = if timed {
        if tokens == 0 {
            return Err(Error::EmptyInput("cost_report timing"));
        }
        let mut rng = Rng::new(0);
        let model = MoEModel::<f32>::random(*cfg, 0.02, &mut rng)?;
        let x: Matrix = rng.normal_matrix(tokens, cfg.hidden, 1.0);
        let start = Instant::now();
        model.forward(&x)?;
        Some(start.elapsed().as_secs_f64() / tokens as f64)
    } else {
        None
    };

    Ok(CostReport {
        total_params: total,
        activated_params: activated,
        shared_flops: 2 * shared,
        sparse_flops: 2 * d.n_active as u64 * per_expert,
        router_flops: 2 * router,
        concat_proj_flops: 2 * proj,
        tokens,
        wall_secs_per_token: wall,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPoint {
    pub t_i: usize,
    pub n_active: usize,
    /// Best of the repetitions, sparse path only.
    pub secs: f64,
}

impl BenchPoint {
    pub fn secs_per_active(&self) -> f64 {
        self.secs / self.n_active as f64
    }
}

/// Time the sparse expert path for each `T_I` with the expert shape held
/// fixed (`G_I = group`, one component, one candidate).
pub fn bench_sparse_scaling(
    hidden: usize,
    intermediate: usize,
    group: usize,
    t_values: &[usize],
    tokens: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchPoint>> {
    let mut out = Vec::with_capacity(t_values.len());
    for &t_i in t_values {
        let cfg = FineRConfig::new(hidden, intermediate, group, 1, 1, 1, t_i).with_share_expert(false);
        let mut rng = Rng::new(seed);
        let model = MoEModel::<f32>::random(cfg, 0.05, &mut rng)?;
        let x: Matrix = rng.normal_matrix(tokens, hidden, 1.0);
        let decision = route(&crate::router::score(&x, &model.router)?, &cfg)?;
        let mut best = f64::INFINITY;
        for _ in 0..reps.max(1) {
            let start = Instant::now();
            sparse_experts_forward(&x, &model, &decision)?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        out.push(BenchPoint {
            t_i,
            n_active: t_i,
            secs: best,
        });
    }
    Ok(out)
}

/// Columns: `t_i,n_active,secs,secs_per_active`.
pub fn write_bench_csv<W: io::Write>(points: &[BenchPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    out.write_record(["t_i", "n_active", "secs", "secs_per_active"]).map_err(io_err)?;
    for p in points {
        out.serialize((p.t_i, p.n_active, p.secs, p.secs_per_active())).map_err(io_err)?;
    }
    out.flush().map_err(|e| Error::io("csv output", e))
}
