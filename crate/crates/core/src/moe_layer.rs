//! The assembled layer: route, dispatch tokens to experts, weighted-sum
//! within each group, pick one candidate per output component,
//! concatenate, then add the shared expert.

use rayon::prelude::*;

use crate::config::{DerivedDims, FineRConfig, RouterMode};
use crate::error::{Error, Result};
use crate::experts::{ExpertWeights, SharedExpertWeights, SwiGluWeights};
use crate::numerics::{Matrix, Rng, Scalar};
use crate::router::{self, GroupLayout, RouterState, RoutingDecision};

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel<T: Scalar = f32> {
    pub cfg: FineRConfig,
    /// Present iff `cfg.share_expert`.
    pub shared: Option<SharedExpertWeights<T>>,
    /// `N` experts, `h×H_e`, `h×H_e`, `H_e×h_e`.
    pub experts: Vec<ExpertWeights<T>>,
    /// `h × N`
    pub router: RouterState<T>,
    /// `h × G_O·R_O`, present iff `cfg.router_mode == Separate`.
    pub cc_router: Option<RouterState<T>>,
    /// `h × h`, present iff `cfg.concat_proj`.
    pub concat_proj: Option<Matrix<T>>,
}

impl<T: Scalar> MoEModel<T> {
    pub fn new(
        cfg: FineRConfig,
        shared: Option<SharedExpertWeights<T>>,
        experts: Vec<ExpertWeights<T>>,
        router: RouterState<T>,
        cc_router: Option<RouterState<T>>,
        concat_proj: Option<Matrix<T>>,
    ) -> Result<Self> {
        let m = Self {
            cfg,
            shared,
            experts,
            router,
            cc_router,
            concat_proj,
        };
        m.check()?;
        Ok(m)
    }

    /// Every weight drawn from `N(0, std²)`; the concat projection, when
    /// enabled, starts at the identity.
    pub fn random(cfg: FineRConfig, std: f64, rng: &mut Rng) -> Result<Self> {
        let d = cfg.dims()?;
        let (h, hh) = (cfg.hidden, cfg.intermediate);
        let shared = cfg
            .share_expert
            .then(|| SwiGluWeights::random(h, hh, h, std, rng));
        let experts = (0..d.n_experts)
            .map(|_| SwiGluWeights::random(h, d.expert_intermediate, d.expert_output, std, rng))
            .collect();
        let router = RouterState::random(h, d.n_experts, std, rng);
        let cc_router = (cfg.router_mode == RouterMode::Separate).then(|| RouterState::random(h, d.n_groups, std, rng));
        let concat_proj = cfg.concat_proj.then(|| Matrix::identity(h));
        Self::new(cfg, shared, experts, router, cc_router, concat_proj)
    }

    /// Checks that every tensor matches the config.
    pub fn check(&self) -> Result<()> {
        let d = self.cfg.dims()?;
        let h = self.cfg.hidden;
        let want = |name: &'static str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::shape(name, got, want))
            }
        };
        match (&self.shared, self.cfg.share_expert) {
            (Some(s), true) => {
                want("shared.w1", s.w1.shape(), (h, self.cfg.intermediate))?;
                want("shared.wg", s.wg.shape(), (h, self.cfg.intermediate))?;
                want("shared.w2", s.w2.shape(), (self.cfg.intermediate, h))?;
            }
            (None, false) => {}
            _ => return Err(Error::InvalidArgument("shared expert presence does not match share_expert".into())),
        }
        if self.experts.len() != d.n_experts {
            return Err(Error::InvalidArgument(format!(
                "expected {} experts, found {}",
                d.n_experts,
                self.experts.len()
            )));
        }
        for e in &self.experts {
            want("expert.w1", e.w1.shape(), (h, d.expert_intermediate))?;
            want("expert.wg", e.wg.shape(), (h, d.expert_intermediate))?;
            want("expert.w2", e.w2.shape(), (d.expert_intermediate, d.expert_output))?;
        }
        want("router.w", self.router.weight.shape(), (h, d.n_experts))?;
        match (&self.cc_router, self.cfg.router_mode) {
            (Some(r), RouterMode::Separate) => want("router_cc.w", r.weight.shape(), (h, d.n_groups))?,
            (None, RouterMode::Single) => {}
            _ => return Err(Error::InvalidArgument("second router presence does not match router_mode".into())),
        }
        match (&self.concat_proj, self.cfg.concat_proj) {
            (Some(p), true) => want("concat_proj.w", p.shape(), (h, h))?,
            (None, false) => {}
            _ => return Err(Error::InvalidArgument("concat projection presence does not match concat_proj".into())),
        }
        Ok(())
    }

    pub fn dims(&self) -> DerivedDims {
        self.cfg.derive()
    }

    pub fn layout(&self) -> GroupLayout {
        GroupLayout::from_config(&self.cfg)
    }

    pub fn param_count(&self) -> usize {
        self.shared.as_ref().map_or(0, SwiGluWeights::param_count)
            + self.experts.iter().map(SwiGluWeights::param_count).sum::<usize>()
            + self.router.weight.len()
            + self.cc_router.as_ref().map_or(0, |r| r.weight.len())
            + self.concat_proj.as_ref().map_or(0, Matrix::len)
    }

    pub fn cast<U: Scalar>(&self) -> MoEModel<U> {
        MoEModel {
            cfg: self.cfg,
            shared: self.shared.as_ref().map(SwiGluWeights::cast),
            experts: self.experts.iter().map(SwiGluWeights::cast).collect(),
            router: self.router.cast(),
            cc_router: self.cc_router.as_ref().map(RouterState::cast),
            concat_proj: self.concat_proj.as_ref().map(Matrix::cast),
        }
    }

    /// Router scores and the routing decision for `x`.
    pub fn route_tokens(&self, x: &Matrix<T>) -> Result<RoutingDecision<T>> {
        let s = router::score(x, &self.router)?;
        match &self.cc_router {
            None => router::route(&s, &self.cfg),
            Some(cc) => {
                let s_cc = router::score(x, cc)?;
                router::route_separate(&s, &s_cc, &self.cfg)
            }
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<LayerOutput<T>> {
        forward(x, self)
    }
}

/// Maps routed `(token, slot)` pairs to per-expert contiguous batches and back.
///
/// Pair `p = token·n_active + slot`. `order[offsets[k]..offsets[k+1]]` are
/// the pairs dispatched to expert `k`, in ascending token order, and
/// `inverse[p]` is the position of pair `p` inside `order`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchPlan {
    pub tokens: usize,
    pub n_active: usize,
    pub offsets: Vec<usize>,
    pub order: Vec<usize>,
    pub inverse: Vec<usize>,
}

impl DispatchPlan {
    pub fn n_experts(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn routed_pairs(&self) -> usize {
        self.order.len()
    }

    /// Tokens dispatched to expert `k`, ascending.
    pub fn expert_tokens(&self, k: usize) -> Vec<usize> {
        self.order[self.offsets[k]..self.offsets[k + 1]]
            .iter()
            .map(|p| p / self.n_active)
            .collect()
    }

    /// Token rows in dispatch order, `pairs × cols`.
    pub fn permute<T: Scalar>(&self, x: &Matrix<T>) -> Matrix<T> {
        let rows: Vec<usize> = self.order.iter().map(|p| p / self.n_active).collect();
        x.gather_rows(&rows)
    }

    /// Rows in dispatch order back to `(token, slot)` order.
    pub fn unpermute<T: Scalar>(&self, dispatched: &Matrix<T>) -> Matrix<T> {
        dispatched.gather_rows(&self.inverse)
    }
}

pub fn build_dispatch_plan<T: Scalar>(decision: &RoutingDecision<T>) -> DispatchPlan {
    let n = decision.n_experts();
    let n_active = decision.n_active();
    let pairs = decision.indices.len();
    let mut offsets = vec![0usize; n + 1];
    for &k in &decision.indices {
        offsets[k + 1] += 1;
    }
    for k in 0..n {
        offsets[k + 1] += offsets[k];
    }
    let mut cursor = offsets.clone();
    let mut order = vec![0usize; pairs];
    let mut inverse = vec![0usize; pairs];
    for (p, &k) in decision.indices.iter().enumerate() {
        order[cursor[k]] = p;
        inverse[p] = cursor[k];
        cursor[k] += 1;
    }
    DispatchPlan {
        tokens: decision.tokens(),
        n_active,
        offsets,
        order,
        inverse,
    }
}

#[derive(Debug, Clone)]
pub struct LayerOutput<T: Scalar = f32> {
    /// `L × h`
    pub y: Matrix<T>,
    pub decision: RoutingDecision<T>,
    /// `L × (G_O·R_O·h_e)`: every candidate vector, selected or not, in
    /// group order. Only filled by [`forward_verification`].
    pub candidate_vectors: Option<Matrix<T>>,
}

/// Expert outputs for every routed pair, `(L·n_active) × h_e` in
/// `(token, slot)` order. Experts run in parallel on their own batches.
pub fn dispatch_experts<T: Scalar>(x: &Matrix<T>, model: &MoEModel<T>, plan: &DispatchPlan) -> Result<Matrix<T>> {
    let xp = plan.permute(x);
    let outs: Vec<Matrix<T>> = (0..plan.n_experts())
        .into_par_iter()
        .map(|k| {
            let (a, b) = (plan.offsets[k], plan.offsets[k + 1]);
            let he = model.experts[k].output_dim();
            if a == b {
                return Ok(Matrix::zeros(0, he));
            }
            model.experts[k].forward(&xp.slice_rows(a..b)?)
        })
        .collect::<Result<_>>()?;
    let stacked = Matrix::vstack(&outs)?;
    Ok(plan.unpermute(&stacked))
}

/// Sparse path for a given decision: weighted sums inside the selected
/// groups, concatenated over the `G_O` components. Returns `L × h`, before
/// any concat projection.
pub fn sparse_experts_forward<T: Scalar>(x: &Matrix<T>, model: &MoEModel<T>, decision: &RoutingDecision<T>) -> Result<Matrix<T>> {
    check_input(x, model)?;
    check_decision(x, model, decision)?;
    let plan = build_dispatch_plan(decision);
    let pair_out = dispatch_experts(x, model, &plan)?;
    Ok(combine(&pair_out, decision, model))
}

/// Same result as [`sparse_experts_forward`], computed token by token
/// without any dispatch.
pub fn sparse_experts_forward_naive<T: Scalar>(x: &Matrix<T>, model: &MoEModel<T>, decision: &RoutingDecision<T>) -> Result<Matrix<T>> {
    check_input(x, model)?;
    check_decision(x, model, decision)?;
    let layout = model.layout();
    let he = model.dims().expert_output;
    let mut out = Matrix::zeros(x.rows(), model.cfg.hidden);
    for t in 0..x.rows() {
        let xt = x.slice_rows(t..t + 1)?;
        for (&k, &p) in decision.token_indices(t).iter().zip(decision.token_probs(t)) {
            let e = model.experts[k].forward(&xt)?;
            let i = layout.component_of(k);
            let dst = &mut out.row_mut(t)[i * he..(i + 1) * he];
            for (d, &v) in dst.iter_mut().zip(e.data()) {
                *d = *d + p * v;
            }
        }
    }
    Ok(out)
}

fn combine<T: Scalar>(pair_out: &Matrix<T>, decision: &RoutingDecision<T>, model: &MoEModel<T>) -> Matrix<T> {
    let layout = model.layout();
    let he = pair_out.cols();
    let na = decision.n_active();
    let mut out = Matrix::zeros(decision.tokens(), model.cfg.hidden);
    for t in 0..decision.tokens() {
        for (s, (&k, &p)) in decision.token_indices(t).iter().zip(decision.token_probs(t)).enumerate() {
            let i = layout.component_of(k);
            let src = pair_out.row(t * na + s);
            let dst = &mut out.row_mut(t)[i * he..(i + 1) * he];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = *d + p * v;
            }
        }
    }
    out
}

/// All `G_O·R_O` candidate vectors per token, each the weighted sum of its
/// group's top-`T_I` experts.
pub fn candidate_vectors<T: Scalar>(x: &Matrix<T>, model: &MoEModel<T>, decision: &RoutingDecision<T>) -> Result<Matrix<T>> {
    check_input(x, model)?;
    check_decision(x, model, decision)?;
    let layout = model.layout();
    let he = model.dims().expert_output;
    let n = layout.n_experts();
    let mut out = Matrix::zeros(x.rows(), layout.n_groups() * he);
    for t in 0..x.rows() {
        let xt = x.slice_rows(t..t + 1)?;
        for k in (0..n).filter(|&k| decision.sum_mask[t * n + k]) {
            let e = model.experts[k].forward(&xt)?;
            let g = layout.group_of(k);
            let p = decision.score.get(t, k);
            let dst = &mut out.row_mut(t)[g * he..(g + 1) * he];
            for (d, &v) in dst.iter_mut().zip(e.data()) {
                *d = *d + p * v;
            }
        }
    }
    Ok(out)
}

fn check_input<T: Scalar>(x: &Matrix<T>, model: &MoEModel<T>) -> Result<()> {
    if x.cols() != model.cfg.hidden {
        return Err(Error::shape("moe forward", x.shape(), (x.rows(), model.cfg.hidden)));
    }
    Ok(())
}

fn check_decision<T: Scalar>(x: &Matrix<T>, model: &MoEModel<T>, d: &RoutingDecision<T>) -> Result<()> {
    if d.tokens() != x.rows() || d.layout != model.layout() {
        return Err(Error::shape(
            "routing decision",
            d.score.shape(),
            (x.rows(), model.layout().n_experts()),
        ));
    }
    Ok(())
}

fn finish<T: Scalar>(x: &Matrix<T>, model: &MoEModel<T>, concat: Matrix<T>) -> Result<Matrix<T>> {
    let mut y = match &model.concat_proj {
        Some(p) => concat.matmul(p)?,
        None => concat,
    };
    if let Some(s) = &model.shared {
        y.add_assign(&s.forward(x)?)?;
    }
    Ok(y)
}

pub fn forward<T: Scalar>(x: &Matrix<T>, model: &MoEModel<T>) -> Result<LayerOutput<T>> {
    check_input(x, model)?;
    let decision = model.route_tokens(x)?;
    let concat = sparse_experts_forward(x, model, &decision)?;
    let y = finish(x, model, concat)?;
    Ok(LayerOutput {
        y,
        decision,
        candidate_vectors: None,
    })
}

/// [`forward`] that also keeps every candidate vector.
pub fn forward_verification<T: Scalar>(x: &Matrix<T>, model: &MoEModel<T>) -> Result<LayerOutput<T>> {
    let mut out = forward(x, model)?;
    out.candidate_vectors = Some(candidate_vectors(x, model, &out.decision)?);
    Ok(out)
}

/// Sparse path with the router bypassed: every expert of candidate 0 in
/// each component is active at weight 1. Concat projection applied if
/// present; no shared expert.
pub fn forward_forced_sparse<T: Scalar>(x: &Matrix<T>, model: &MoEModel<T>) -> Result<Matrix<T>> {
    check_input(x, model)?;
    let layout = model.layout();
    let he = model.dims().expert_output;
    let mut parts = Vec::with_capacity(layout.g_o);
    for i in 0..layout.g_o {
        let g = i * layout.r_o;
        let mut acc = Matrix::zeros(x.rows(), he);
        for k in g * layout.group_size..(g + 1) * layout.group_size {
            acc.add_assign(&model.experts[k].forward(x)?)?;
        }
        parts.push(acc);
    }
    let concat = Matrix::hstack(&parts)?;
    match &model.concat_proj {
        Some(p) => concat.matmul(p),
        None => Ok(concat),
    }
}

/// [`forward_forced_sparse`] plus the shared expert.
pub fn forward_forced<T: Scalar>(x: &Matrix<T>, model: &MoEModel<T>) -> Result<Matrix<T>> {
    let mut y = forward_forced_sparse(x, model)?;
    if let Some(s) = &model.shared {
        y.add_assign(&s.forward(x)?)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::shared_forward;

    fn model(cfg: FineRConfig, seed: u64) -> MoEModel<f32> {
        MoEModel::random(cfg, 0.3, &mut Rng::new(seed)).unwrap()
    }

    fn base_toy() -> FineRConfig {
        FineRConfig::new(8, 16, 4, 1, 2, 2, 1)
    }

    #[test]
    fn single_token_plan() {
        let m = model(base_toy(), 1);
        let x = Rng::new(2).normal_matrix(1, 8, 1.0);
        let d = m.route_tokens(&x).unwrap();
        let plan = build_dispatch_plan(&d);
        assert_eq!(plan.routed_pairs(), 2);
        let used: Vec<usize> = (0..plan.n_experts()).filter(|&k| !plan.expert_tokens(k).is_empty()).collect();
        assert_eq!(used, d.token_indices(0));
    }

    #[test]
    fn permute_round_trip() {
        let m = model(FineRConfig::new(8, 16, 2, 2, 2, 2, 2), 3);
        let mut rng = Rng::new(4);
        let x: Matrix = rng.normal_matrix(13, 8, 1.0);
        let d = m.route_tokens(&x).unwrap();
        let plan = build_dispatch_plan(&d);
        assert_eq!(plan.routed_pairs(), 13 * 4);
        let pairs: Matrix = rng.normal_matrix(plan.routed_pairs(), 3, 1.0);
        let dispatched = pairs.gather_rows(&plan.order);
        assert_eq!(plan.unpermute(&dispatched), pairs);
        for k in 0..plan.n_experts() {
            let toks = plan.expert_tokens(k);
            assert!(toks.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn shared_activation_batches_in_token_order() {
        // force both tokens onto expert 5 with a one-hot router
        let cfg = FineRConfig::new(2, 4, 2, 1, 1, 4, 1).with_share_expert(false);
        let mut m = model(cfg, 5);
        let mut w = Matrix::zeros(2, 8);
        w.set(0, 5, 10.0);
        w.set(1, 5, 10.0);
        m.router = RouterState::new(w);
        let x = Matrix::new(2, 2, vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let d = m.route_tokens(&x).unwrap();
        assert_eq!(d.indices, vec![5, 5]);
        let plan = build_dispatch_plan(&d);
        assert_eq!(plan.expert_tokens(5), vec![0, 1]);
    }

    #[test]
    fn dispatch_equals_naive_loop() {
        for cfg in [base_toy(), FineRConfig::new(8, 16, 2, 2, 4, 2, 3), FineRConfig::new(8, 8, 1, 4, 1, 1, 2)] {
            let m = model(cfg, 7);
            let x: Matrix = Rng::new(8).normal_matrix(21, 8, 1.0);
            let d = m.route_tokens(&x).unwrap();
            assert_eq!(
                sparse_experts_forward(&x, &m, &d).unwrap(),
                sparse_experts_forward_naive(&x, &m, &d).unwrap()
            );
        }
    }

    #[test]
    fn one_term_sum_per_group() {
        let m = model(base_toy(), 9);
        let x: Matrix = Rng::new(10).normal_matrix(1, 8, 1.0);
        let d = m.route_tokens(&x).unwrap();
        let y = sparse_experts_forward(&x, &m, &d).unwrap();
        for (&k, &p) in d.token_indices(0).iter().zip(d.token_probs(0)) {
            let i = m.layout().component_of(k);
            let e = m.experts[k].forward(&x).unwrap().scale(p);
            assert_eq!(&y.row(0)[i * 4..(i + 1) * 4], e.data());
        }
    }

    #[test]
    fn unselected_candidates_never_contribute() {
        let m = model(base_toy(), 11);
        let x: Matrix = Rng::new(12).normal_matrix(6, 8, 1.0);
        let before = forward(&x, &m).unwrap();
        let mut zeroed = m.clone();
        let layout = m.layout();
        for t in 0..6 {
            for k in 0..layout.n_experts() {
                let comp = layout.component_of(k);
                if layout.candidate_of(k) != before.decision.token_cc_act(t)[comp] && t == 0 {
                    zeroed.experts[k] = SwiGluWeights::zeros(8, 4, 4);
                }
            }
        }
        let x0 = x.slice_rows(0..1).unwrap();
        assert_eq!(forward(&x0, &zeroed).unwrap().y.row(0), before.y.row(0));
    }

    #[test]
    fn candidate_vectors_contain_selected_output() {
        let m = model(base_toy(), 13);
        let x: Matrix = Rng::new(14).normal_matrix(5, 8, 1.0);
        let out = forward_verification(&x, &m).unwrap();
        let cands = out.candidate_vectors.as_ref().unwrap();
        let sparse = sparse_experts_forward(&x, &m, &out.decision).unwrap();
        let layout = m.layout();
        for t in 0..5 {
            for i in 0..layout.g_o {
                let g = i * layout.r_o + out.decision.token_cc_act(t)[i];
                assert_eq!(&cands.row(t)[g * 4..(g + 1) * 4], &sparse.row(t)[i * 4..(i + 1) * 4]);
            }
        }
    }

    #[test]
    fn forward_variants() {
        let x: Matrix = Rng::new(15).normal_matrix(4, 8, 1.0);

        let mut m = model(base_toy(), 16);
        for e in &mut m.experts {
            *e = SwiGluWeights::zeros(8, 4, 4);
        }
        let y = forward(&x, &m).unwrap().y;
        assert_eq!(y, shared_forward(&x, m.shared.as_ref().unwrap()).unwrap());

        m.cfg.share_expert = false;
        m.shared = None;
        assert_eq!(forward(&x, &m).unwrap().y, Matrix::zeros(4, 8));

        let plain = model(base_toy(), 17);
        let mut proj = plain.clone();
        proj.cfg.concat_proj = true;
        proj.concat_proj = Some(Matrix::identity(8));
        proj.check().unwrap();
        assert_eq!(forward(&x, &plain).unwrap().y, forward(&x, &proj).unwrap().y);
    }

    #[test]
    fn separate_router_model_runs() {
        let cfg = base_toy().with_router_mode(RouterMode::Separate);
        let m = model(cfg, 18);
        let x: Matrix = Rng::new(19).normal_matrix(3, 8, 1.0);
        let out = forward(&x, &m).unwrap();
        assert_eq!(out.y.shape(), (3, 8));
        assert_eq!(out.decision.cc_score.shape(), (3, 4));
    }

    #[test]
    fn forced_zero_input() {
        let m = model(base_toy(), 20);
        assert_eq!(forward_forced(&Matrix::zeros(2, 8), &m).unwrap(), Matrix::zeros(2, 8));
    }

    #[test]
    fn shape_errors() {
        let m = model(base_toy(), 21);
        assert!(forward(&Matrix::<f32>::zeros(2, 7), &m).is_err());
        let mut bad = m.clone();
        bad.experts.pop();
        assert!(bad.check().is_err());
        let mut bad = m;
        bad.concat_proj = Some(Matrix::identity(8));
        assert!(bad.check().is_err());
    }

    #[test]
    fn deterministic_across_threads() {
        let m = model(FineRConfig::new(16, 32, 4, 1, 2, 2, 2), 22);
        let x: Matrix = Rng::new(23).normal_matrix(40, 16, 1.0);
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| forward(&x, &m).unwrap().y)
        };
        assert_eq!(run(1).data(), run(4).data());
    }
}
