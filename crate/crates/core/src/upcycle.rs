//! Dense-to-MoE conversion.
//!
//! The shared expert is a verbatim copy of the dense FFN. Expert `k` takes
//! intermediate slice `i = (k mod G_I·R_I) mod G_I` and output slice
//! `j = ⌊k / (R_O·G_I·R_I)⌋`:
//!
//! ```text
//! W1e_k = W1p[:, i·H_e .. (i+1)·H_e]
//! Wge_k = Wgp[:, i·H_e .. (i+1)·H_e]
//! W2e_k = W2p[i·H_e .. (i+1)·H_e, j·h_e .. (j+1)·h_e]
//! ```
//!
//! With `G_I = G_O = R_O = 1` this is plain replication, with
//! `R_I = G_O = R_O = 1` plain intermediate-dimension splitting.

use crate::config::{FineRConfig, RouterMode};
use crate::error::{Error, Result};
use crate::experts::{DenseFfnWeights, ExpertWeights, SwiGluWeights};
use crate::moe_layer::MoEModel;
use crate::numerics::{Matrix, Rng, Scalar};
use crate::router::{RouterState, ROUTER_INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceAssignment {
    pub k: usize,
    /// Intermediate slice in `0..G_I`.
    pub i_slice: usize,
    /// Output slice in `0..G_O`.
    pub j_slice: usize,
}

pub fn expert_slice_indices(k: usize, cfg: &FineRConfig) -> Result<SliceAssignment> {
    let n = cfg.dims()?.n_experts;
    if k >= n {
        return Err(Error::InvalidArgument(format!("expert index {k} out of range 0..{n}")));
    }
    let group = cfg.g_i * cfg.r_i;
    Ok(SliceAssignment {
        k,
        i_slice: (k % group) % cfg.g_i,
        j_slice: k / (cfg.r_o * group),
    })
}

/// Slice one expert out of the dense FFN.
pub fn slice_expert<T: Scalar>(dense: &DenseFfnWeights<T>, cfg: &FineRConfig, k: usize) -> Result<ExpertWeights<T>> {
    let a = expert_slice_indices(k, cfg)?;
    let d = cfg.derive();
    let (he, ho) = (d.expert_intermediate, d.expert_output);
    let inter = a.i_slice * he..(a.i_slice + 1) * he;
    let out = a.j_slice * ho..(a.j_slice + 1) * ho;
    SwiGluWeights::new(
        dense.w1.slice_cols(inter.clone())?,
        dense.wg.slice_cols(inter.clone())?,
        dense.w2.slice_rows(inter)?.slice_cols(out)?,
    )
}

fn check_dense<T: Scalar>(dense: &DenseFfnWeights<T>, cfg: &FineRConfig) -> Result<()> {
    dense.check()?;
    let want = (cfg.hidden, cfg.intermediate);
    if (dense.input_dim(), dense.inter_dim()) != want || dense.output_dim() != cfg.hidden {
        return Err(Error::shape("upcycle dense/config", dense.w1.shape(), want));
    }
    Ok(())
}

/// Build a layer from a dense FFN. Routers are drawn from
/// `N(0, 0.02²)` with `seed` (the main router first); the concat
/// projection, if enabled, starts at the identity.
pub fn upcycle<T: Scalar>(dense: &DenseFfnWeights<T>, cfg: &FineRConfig, seed: u64) -> Result<MoEModel<T>> {
    let d = cfg.dims()?;
    check_dense(dense, cfg)?;
    let shared = cfg.share_expert.then(|| dense.clone());
    let experts = (0..d.n_experts)
        .map(|k| slice_expert(dense, cfg, k))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = Rng::new(seed);
    let router = RouterState::random(cfg.hidden, d.n_experts, ROUTER_INIT_STD, &mut rng);
    let cc_router = (cfg.router_mode == RouterMode::Separate)
        .then(|| RouterState::random(cfg.hidden, d.n_groups, ROUTER_INIT_STD, &mut rng));
    let concat_proj = cfg.concat_proj.then(|| Matrix::identity(cfg.hidden));
    MoEModel::new(*cfg, shared, experts, router, cc_router, concat_proj)
}

/// Replicate the dense FFN `n_experts` times, then in every expert redraw a
/// uniformly chosen `drop_ratio` share of each matrix's entries from
/// `N(0, σ²)`, `σ` being the donor matrix's empirical standard deviation.
/// The shared expert stays an exact copy.
pub fn drop_upcycle<T: Scalar>(
    dense: &DenseFfnWeights<T>,
    n_experts: usize,
    drop_ratio: f64,
    n_active: usize,
    seed: u64,
) -> Result<MoEModel<T>> {
    if !(0.0..=1.0).contains(&drop_ratio) {
        return Err(Error::InvalidArgument(format!("drop_ratio must be in [0, 1], got {drop_ratio}")));
    }
    let cfg = FineRConfig::new(dense.input_dim(), dense.inter_dim(), 1, n_experts, 1, 1, n_active);
    let mut model = upcycle(dense, &cfg, seed)?;
    let mut rng = Rng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    for expert in &mut model.experts {
        let mut er = rng.fork();
        for (m, donor) in [
            (&mut expert.w1, &dense.w1),
            (&mut expert.wg, &dense.wg),
            (&mut expert.w2, &dense.w2),
        ] {
            redraw(m, donor, drop_ratio, &mut er);
        }
    }
    Ok(model)
}

fn redraw<T: Scalar>(m: &mut Matrix<T>, donor: &Matrix<T>, ratio: f64, rng: &mut Rng) {
    let n = m.len();
    let k = (ratio * n as f64).round() as usize;
    let std = std_dev(donor.data());
    for idx in rng.sample_indices(n, k) {
        m.data_mut()[idx] = T::of(rng.normal(0.0, std));
    }
}

fn std_dev<T: Scalar>(v: &[T]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().map(|x| x.as_f64()).sum::<f64>() / n;
    (v.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
}
