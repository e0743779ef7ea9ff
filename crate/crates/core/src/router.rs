//! Bi-level routing with a single router.
//!
//! The `N` router scores of a token are viewed as `G_O·R_O` groups of
//! `G_I·R_I` experts. Two masks are built from them:
//!
//! * the *sum mask* keeps the top-`T_I` experts of every group;
//! * the *candidate mask* keeps, for each of the `G_O` output components,
//!   the whole group (out of `R_O`) whose summed score is largest.
//!
//! Their intersection leaves exactly `G_O·T_I` experts per token. Selected
//! weights are the raw softmax scores, not renormalized. Ties always go to
//! the lowest index.

use std::cmp::Ordering;

use crate::config::FineRConfig;
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Matrix, Rng, Scalar};

/// Router standard deviation used for freshly upcycled layers.
pub const ROUTER_INIT_STD: f64 = 0.02;

/// Linear router `x·W`, `W` is `h × n_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterState<T: Scalar = f32> {
    pub weight: Matrix<T>,
}

impl<T: Scalar> RouterState<T> {
    pub fn new(weight: Matrix<T>) -> Self {
        Self { weight }
    }

    pub fn zeros(hidden: usize, n_out: usize) -> Self {
        Self::new(Matrix::zeros(hidden, n_out))
    }

    pub fn random(hidden: usize, n_out: usize, std: f64, rng: &mut Rng) -> Self {
        Self::new(rng.normal_matrix(hidden, n_out, std))
    }

    pub fn n_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn cast<U: Scalar>(&self) -> RouterState<U> {
        RouterState::new(self.weight.cast())
    }

    pub fn logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        x.matmul(&self.weight)
    }
}

/// Per-token softmax of the router logits, `L × n_out`.
pub fn score<T: Scalar>(x: &Matrix<T>, router: &RouterState<T>) -> Result<Matrix<T>> {
    let mut s = router.logits(x)?;
    softmax_rows(&mut s)?;
    Ok(s)
}

pub fn softmax_rows<T: Scalar>(m: &mut Matrix<T>) -> Result<()> {
    for r in 0..m.rows() {
        softmax_in_place(m.row_mut(r))?;
    }
    Ok(())
}

/// Group geometry of the score vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub g_o: usize,
    pub r_o: usize,
    pub group_size: usize,
    pub t_i: usize,
}

impl GroupLayout {
    pub fn from_config(cfg: &FineRConfig) -> Self {
        Self {
            g_o: cfg.g_o,
            r_o: cfg.r_o,
            group_size: cfg.g_i * cfg.r_i,
            t_i: cfg.t_i,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.g_o * self.r_o
    }

    pub fn n_experts(&self) -> usize {
        self.n_groups() * self.group_size
    }

    pub fn n_active(&self) -> usize {
        self.g_o * self.t_i
    }

    /// Group id of expert `k`.
    pub fn group_of(&self, k: usize) -> usize {
        k / self.group_size
    }

    /// Output component of expert `k`.
    pub fn component_of(&self, k: usize) -> usize {
        k / (self.group_size * self.r_o)
    }

    /// Candidate slot (within its component) of expert `k`.
    pub fn candidate_of(&self, k: usize) -> usize {
        (k % (self.group_size * self.r_o)) / self.group_size
    }
}

/// Everything the router decided for a batch of `L` tokens.
///
/// Masks are stored flat, token-major, with experts in group-major order,
/// i.e. the `L × G_O·R_O × G_I·R_I` view of an `L × N` array.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<T: Scalar = f32> {
    pub layout: GroupLayout,
    /// `L × N` scores the in-group selection and weights come from.
    pub score: Matrix<T>,
    /// `L × N`, exactly `T_I` per group.
    pub sum_mask: Vec<bool>,
    /// `L × G_O·R_O` candidate scores (`L × G_O × R_O`).
    pub cc_score: Matrix<T>,
    /// `L × G_O` chosen candidate per output component.
    pub cc_act: Vec<usize>,
    /// `L × N`, exactly `G_O·T_I` per token.
    pub final_mask: Vec<bool>,
    /// `L × G_O·T_I` activated experts, ascending per token.
    pub indices: Vec<usize>,
    /// `L × G_O·T_I` weights aligned with `indices`.
    pub probs: Matrix<T>,
}

impl<T: Scalar> RoutingDecision<T> {
    pub fn tokens(&self) -> usize {
        self.score.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.score.cols()
    }

    pub fn n_active(&self) -> usize {
        self.layout.n_active()
    }

    pub fn token_indices(&self, t: usize) -> &[usize] {
        let k = self.n_active();
        &self.indices[t * k..(t + 1) * k]
    }

    pub fn token_probs(&self, t: usize) -> &[T] {
        self.probs.row(t)
    }

    pub fn token_cc_act(&self, t: usize) -> &[usize] {
        &self.cc_act[t * self.layout.g_o..(t + 1) * self.layout.g_o]
    }

    pub fn group_score(&self, t: usize, g: usize, l: usize) -> T {
        self.score.get(t, g * self.layout.group_size + l)
    }

    pub fn is_active(&self, t: usize, k: usize) -> bool {
        self.final_mask[t * self.n_experts() + k]
    }

    /// Same selections, compared on masks and indices only.
    pub fn same_selection(&self, other: &RoutingDecision<T>) -> bool {
        self.sum_mask == other.sum_mask
            && self.cc_act == other.cc_act
            && self.final_mask == other.final_mask
            && self.indices == other.indices
    }
}

fn desc_then_index<T: Scalar>(v: &[T]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| v[b].as_f64().total_cmp(&v[a].as_f64()).then(a.cmp(&b))
}

/// Indices of the `k` largest entries of `v`, highest first, ties to the
/// lowest index.
pub fn top_k<T: Scalar>(v: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(desc_then_index(v));
    idx.truncate(k);
    idx
}

/// Index of the largest entry, first one on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Route from a single `L × N` score matrix.
pub fn route<T: Scalar>(score: &Matrix<T>, cfg: &FineRConfig) -> Result<RoutingDecision<T>> {
    let layout = GroupLayout::from_config(cfg);
    if score.cols() != layout.n_experts() {
        return Err(Error::shape("route", score.shape(), (score.rows(), layout.n_experts())));
    }
    let cc_score = group_sums(score, &layout);
    build_decision(score.clone(), cc_score, layout)
}

/// Route with a second router scoring the `G_O·R_O` groups directly.
/// The in-group selection and weights come from `score_sum`, the candidate
/// choice from `score_cc` alone.
pub fn route_separate<T: Scalar>(score_sum: &Matrix<T>, score_cc: &Matrix<T>, cfg: &FineRConfig) -> Result<RoutingDecision<T>> {
    let layout = GroupLayout::from_config(cfg);
    if score_sum.cols() != layout.n_experts() {
        return Err(Error::shape("route_separate", score_sum.shape(), (score_sum.rows(), layout.n_experts())));
    }
    if score_cc.shape() != (score_sum.rows(), layout.n_groups()) {
        return Err(Error::shape("route_separate", score_cc.shape(), (score_sum.rows(), layout.n_groups())));
    }
    build_decision(score_sum.clone(), score_cc.clone(), layout)
}

/// Sum of each group's scores, accumulated in ascending expert order.
fn group_sums<T: Scalar>(score: &Matrix<T>, layout: &GroupLayout) -> Matrix<T> {
    let gs = layout.group_size;
    Matrix::from_fn(score.rows(), layout.n_groups(), |t, g| {
        score.row(t)[g * gs..(g + 1) * gs].iter().fold(T::zero(), |acc, &v| acc + v)
    })
}

fn build_decision<T: Scalar>(score: Matrix<T>, cc_score: Matrix<T>, layout: GroupLayout) -> Result<RoutingDecision<T>> {
    let tokens = score.rows();
    let n = layout.n_experts();
    let gs = layout.group_size;
    let n_active = layout.n_active();

    let mut sum_mask = vec![false; tokens * n];
    let mut cc_act = vec![0usize; tokens * layout.g_o];
    let mut final_mask = vec![false; tokens * n];
    let mut indices = Vec::with_capacity(tokens * n_active);
    let mut probs = Vec::with_capacity(tokens * n_active);

    for t in 0..tokens {
        let row = score.row(t);
        let sm = &mut sum_mask[t * n..(t + 1) * n];
        for g in 0..layout.n_groups() {
            for l in top_k(&row[g * gs..(g + 1) * gs], layout.t_i) {
                sm[g * gs + l] = true;
            }
        }

        let cc_row = cc_score.row(t);
        let mut cc_mask = vec![false; layout.n_groups()];
        for i in 0..layout.g_o {
            let j = argmax(&cc_row[i * layout.r_o..(i + 1) * layout.r_o]);
            cc_act[t * layout.g_o + i] = j;
            cc_mask[i * layout.r_o + j] = true;
        }

        let fm = &mut final_mask[t * n..(t + 1) * n];
        for k in 0..n {
            fm[k] = sm[k] && cc_mask[k / gs];
        }

        let masked: Vec<T> = row
            .iter()
            .zip(fm.iter())
            .map(|(&s, &keep)| if keep { s } else { T::neg_infinity() })
            .collect();
        let mut chosen = top_k(&masked, n_active);
        debug_assert!(chosen.iter().all(|&k| fm[k]));
        chosen.sort_unstable();
        probs.extend(chosen.iter().map(|&k| row[k]));
        indices.extend(chosen);
    }

    Ok(RoutingDecision {
        layout,
        score,
        sum_mask,
        cc_score,
        cc_act,
        final_mask,
        indices,
        probs: Matrix::new(tokens, n_active, probs)?,
    })
}
