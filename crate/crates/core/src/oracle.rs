//! Brute-force references the test suites compare against.
//!
//! Nothing here calls into the expert, router or layer code paths; only the
//! numeric primitives are shared.

use crate::config::FineRConfig;
use crate::error::{Error, Result};
use crate::experts::DenseFfnWeights;
use crate::numerics::{silu, Matrix, Scalar};
use crate::router::{GroupLayout, RoutingDecision};

/// Dense SwiGLU FFN, one token and one intermediate unit at a time, with
/// the down projection applied as rank-1 updates and `f64` accumulation.
pub fn dense_ffn_forward<T: Scalar>(x: &Matrix<T>, dense: &DenseFfnWeights<T>) -> Result<Matrix<T>> {
    let (h, hh) = dense.w1.shape();
    if x.cols() != h || dense.wg.shape() != (h, hh) || dense.w2.rows() != hh {
        return Err(Error::shape("dense_ffn_forward", x.shape(), dense.w1.shape()));
    }
    let out_dim = dense.w2.cols();
    let mut y = Matrix::zeros(x.rows(), out_dim);
    let mut acc = vec![0.0f64; out_dim];
    for t in 0..x.rows() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for j in 0..hh {
            let mut up = 0.0f64;
            let mut gate = 0.0f64;
            for i in 0..h {
                let xi = x.get(t, i).as_f64();
                up += xi * dense.w1.get(i, j).as_f64();
                gate += xi * dense.wg.get(i, j).as_f64();
            }
            let hidden = up * silu(gate);
            for (c, a) in acc.iter_mut().enumerate() {
                *a += hidden * dense.w2.get(j, c).as_f64();
            }
        }
        for (c, a) in acc.iter().enumerate() {
            y.set(t, c, T::of(*a));
        }
    }
    Ok(y)
}

/// Routing by enumeration: sort every group, scan every component's
/// candidates, intersect, and check the survivor count.
///
/// # Panics
/// If the number of survivors for a token differs from `G_O·T_I`.
pub fn route_reference<T: Scalar>(score: &Matrix<T>, cfg: &FineRConfig) -> Result<RoutingDecision<T>> {
    let (g_o, r_o, t_i) = (cfg.g_o, cfg.r_o, cfg.t_i);
    let group_size = cfg.g_i * cfg.r_i;
    let n_groups = g_o * r_o;
    let n = n_groups * group_size;
    if score.cols() != n {
        return Err(Error::shape("route_reference", score.shape(), (score.rows(), n)));
    }
    let tokens = score.rows();
    let mut sum_mask = Vec::new();
    let mut cc_vals = Vec::new();
    let mut cc_act = Vec::new();
    let mut final_mask = Vec::new();
    let mut indices = Vec::new();
    let mut probs = Vec::new();

    for t in 0..tokens {
        // in-group winners
        let mut winners: Vec<Vec<usize>> = Vec::new();
        for g in 0..n_groups {
            let mut members: Vec<(f64, usize)> = (0..group_size)
                .map(|l| (score.get(t, g * group_size + l).as_f64(), l))
                .collect();
            members.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            winners.push(members.iter().take(t_i).map(|m| g * group_size + m.1).collect());
        }

        // candidate scores and per-component best
        let mut chosen_groups = Vec::new();
        for i in 0..g_o {
            let mut best_j = 0;
            let mut best = None;
            for j in 0..r_o {
                let g = i * r_o + j;
                let mut total = T::zero();
                for l in 0..group_size {
                    total = total + score.get(t, g * group_size + l);
                }
                cc_vals.push(total);
                if best.is_none_or(|b| total > b) {
                    best = Some(total);
                    best_j = j;
                }
            }
            cc_act.push(best_j);
            chosen_groups.push(i * r_o + best_j);
        }

        let mut survivors = Vec::new();
        for k in 0..n {
            let in_sum = winners.iter().any(|w| w.contains(&k));
            let in_cc = chosen_groups.contains(&(k / group_size));
            sum_mask.push(in_sum);
            final_mask.push(in_sum && in_cc);
            if in_sum && in_cc {
                survivors.push(k);
            }
        }
        assert_eq!(survivors.len(), g_o * t_i, "token {t}: wrong number of activated experts");
        for k in survivors {
            indices.push(k);
            probs.push(score.get(t, k));
        }
    }

    Ok(RoutingDecision {
        layout: GroupLayout {
            g_o,
            r_o,
            group_size,
            t_i,
        },
        score: score.clone(),
        sum_mask,
        cc_score: Matrix::new(tokens, n_groups, cc_vals)?,
        cc_act,
        final_mask,
        indices,
        probs: Matrix::new(tokens, g_o * t_i, probs)?,
    })
}
