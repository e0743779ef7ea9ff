//! Load-balancing loss, reverse-mode gradients through the layer, and a
//! central finite-difference checker.
//!
//! Balance loss over `L` tokens, `N` experts and `K = G_O·T_I` activations
//! per token:
//!
//! ```text
//! P_i  = (1/L) Σ_t s_{i,t}
//! f_i  = N / (K·L) · Σ_t 1[token t selects expert i]
//! loss = α Σ_i f_i · P_i
//! ```
//!
//! `s` is the full pre-mask softmax score. `f` is treated as a constant
//! when differentiating, and expert selection gets no gradient.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::experts::SwiGluWeights;
use crate::moe_layer::{build_dispatch_plan, forward, sparse_experts_forward, MoEModel};
use crate::numerics::{Matrix, Rng, Scalar};
use crate::router::RoutingDecision;

/// Balance-loss weight used throughout training.
pub const BALANCE_ALPHA: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceLossReport {
    /// Activation count per expert.
    pub counts: Vec<usize>,
    /// Load factor per expert.
    pub f: Vec<f64>,
    /// Mean score per expert.
    pub p: Vec<f64>,
    pub loss: f64,
    pub alpha: f64,
}

pub fn balance_loss<T: Scalar>(decision: &RoutingDecision<T>, alpha: f64) -> Result<BalanceLossReport> {
    let tokens = decision.tokens();
    if tokens == 0 {
        return Err(Error::EmptyInput("balance_loss"));
    }
    let n = decision.n_experts();
    let k = decision.n_active();
    let mut counts = vec![0usize; n];
    for &e in &decision.indices {
        counts[e] += 1;
    }
    let denom = (k * tokens) as f64;
    let f: Vec<f64> = counts.iter().map(|&c| (n * c) as f64 / denom).collect();
    let mut p = vec![0.0f64; n];
    for t in 0..tokens {
        for (pi, s) in p.iter_mut().zip(decision.score.row(t)) {
            *pi += s.as_f64();
        }
    }
    p.iter_mut().for_each(|v| *v /= tokens as f64);
    let loss = alpha * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    Ok(BalanceLossReport {
        counts,
        f,
        p,
        loss,
        alpha,
    })
}

/// `∂loss/∂s_{i,t} = α·f_i / L` for every token, with `f` held fixed.
pub fn balance_score_grad<T: Scalar>(report: &BalanceLossReport, tokens: usize) -> Matrix<T> {
    let scale = report.alpha / tokens as f64;
    Matrix::from_fn(tokens, report.f.len(), |_, i| T::of(scale * report.f[i]))
}

/// Pull a score gradient back through the row softmax: `dz = s ⊙ (ds − ⟨ds, s⟩)`.
pub fn softmax_backward<T: Scalar>(score: &Matrix<T>, d_score: &Matrix<T>) -> Result<Matrix<T>> {
    if score.shape() != d_score.shape() {
        return Err(Error::shape("softmax_backward", score.shape(), d_score.shape()));
    }
    let mut out = Matrix::zeros(score.rows(), score.cols());
    for t in 0..score.rows() {
        let (s, ds) = (score.row(t), d_score.row(t));
        let dot = s.iter().zip(ds).fold(T::zero(), |a, (&x, &y)| a + x * y);
        for ((o, &x), &y) in out.row_mut(t).iter_mut().zip(s).zip(ds) {
            *o = x * (y - dot);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients<T: Scalar = f32> {
    pub x: Matrix<T>,
    pub shared: Option<SwiGluWeights<T>>,
    pub experts: Vec<SwiGluWeights<T>>,
    pub router: Matrix<T>,
    /// Always zero: the candidate choice is an argmax.
    pub cc_router: Option<Matrix<T>>,
    pub concat_proj: Option<Matrix<T>>,
}

/// Gradients of a loss with `∂loss/∂y = upstream`.
pub fn backward<T: Scalar>(
    x: &Matrix<T>,
    model: &MoEModel<T>,
    upstream: &Matrix<T>,
    decision: &RoutingDecision<T>,
) -> Result<LayerGradients<T>> {
    backward_with_score_grad(x, model, upstream, decision, None)
}

/// [`backward`] with an extra gradient on the router scores (e.g. from
/// [`balance_score_grad`]).
pub fn backward_with_score_grad<T: Scalar>(
    x: &Matrix<T>,
    model: &MoEModel<T>,
    upstream: &Matrix<T>,
    decision: &RoutingDecision<T>,
    extra_score_grad: Option<&Matrix<T>>,
) -> Result<LayerGradients<T>> {
    let h = model.cfg.hidden;
    if upstream.shape() != (x.rows(), h) {
        return Err(Error::shape("backward upstream", upstream.shape(), (x.rows(), h)));
    }
    let layout = model.layout();
    let he = model.dims().expert_output;
    let tokens = x.rows();
    let n = layout.n_experts();

    let (d_concat, d_proj) = match &model.concat_proj {
        Some(p) => {
            let concat = sparse_experts_forward(x, model, decision)?;
            (upstream.matmul(&p.transpose())?, Some(concat.transpose().matmul(upstream)?))
        }
        None => (upstream.clone(), None),
    };

    let mut d_x = Matrix::zeros(tokens, h);
    let d_shared = match &model.shared {
        Some(s) => {
            let cache = s.forward_cached(x)?;
            let (g, gx) = s.backward(x, &cache, upstream)?;
            d_x.add_assign(&gx)?;
            Some(g)
        }
        None => None,
    };

    // per-expert backward on its dispatched batch
    let plan = build_dispatch_plan(decision);
    let na = decision.n_active();
    let per_expert: Vec<Option<(SwiGluWeights<T>, Matrix<T>, Vec<(usize, usize, T)>)>> = (0..n)
        .into_par_iter()
        .map(|k| -> Result<_> {
            let pairs = &plan.order[plan.offsets[k]..plan.offsets[k + 1]];
            if pairs.is_empty() {
                return Ok(None);
            }
            let toks: Vec<usize> = pairs.iter().map(|p| p / na).collect();
            let xk = x.gather_rows(&toks);
            let e = &model.experts[k];
            let cache = e.forward_cached(&xk)?;
            let comp = layout.component_of(k);
            let mut d_out = Matrix::zeros(pairs.len(), he);
            let mut d_scores = Vec::with_capacity(pairs.len());
            for (r, &pair) in pairs.iter().enumerate() {
                let (t, slot) = (pair / na, pair % na);
                let prob = decision.probs.get(t, slot);
                let g = &d_concat.row(t)[comp * he..(comp + 1) * he];
                let out = cache.output.row(r);
                let mut dot = T::zero();
                for ((d, &gv), &ov) in d_out.row_mut(r).iter_mut().zip(g).zip(out) {
                    *d = prob * gv;
                    dot = dot + gv * ov;
                }
                d_scores.push((t, k, dot));
            }
            let (gw, gx) = e.backward(&xk, &cache, &d_out)?;
            Ok(Some((gw, gx, d_scores)))
        })
        .collect::<Result<_>>()?;

    let mut d_score = match extra_score_grad {
        Some(g) => {
            if g.shape() != (tokens, n) {
                return Err(Error::shape("extra score grad", g.shape(), (tokens, n)));
            }
            g.clone()
        }
        None => Matrix::zeros(tokens, n),
    };
    let mut d_experts = Vec::with_capacity(n);
    for (k, item) in per_expert.into_iter().enumerate() {
        let e = &model.experts[k];
        match item {
            None => d_experts.push(SwiGluWeights::zeros(e.input_dim(), e.inter_dim(), e.output_dim())),
            Some((gw, gx, ds)) => {
                let toks = &plan.order[plan.offsets[k]..plan.offsets[k + 1]];
                for (r, &pair) in toks.iter().enumerate() {
                    let t = pair / na;
                    for (d, &v) in d_x.row_mut(t).iter_mut().zip(gx.row(r)) {
                        *d = *d + v;
                    }
                }
                for (t, k, v) in ds {
                    let cur = d_score.get(t, k);
                    d_score.set(t, k, cur + v);
                }
                d_experts.push(gw);
            }
        }
    }

    let d_logits = softmax_backward(&decision.score, &d_score)?;
    let d_router = x.transpose().matmul(&d_logits)?;
    d_x.add_assign(&d_logits.matmul(&model.router.weight.transpose())?)?;

    Ok(LayerGradients {
        x: d_x,
        shared: d_shared,
        experts: d_experts,
        router: d_router,
        cc_router: model.cc_router.as_ref().map(|r| Matrix::zeros(r.weight.rows(), r.weight.cols())),
        concat_proj: d_proj,
    })
}

/// Scalar training objective on the layer output.
pub trait Objective<T: Scalar>: Sync {
    fn value(&self, y: &Matrix<T>, decision: &RoutingDecision<T>) -> Result<f64>;
    /// `(∂/∂y, ∂/∂score)`; the second is `None` when the objective does not
    /// read the scores directly.
    fn grad(&self, y: &Matrix<T>, decision: &RoutingDecision<T>) -> Result<(Matrix<T>, Option<Matrix<T>>)>;
}

/// `mean(y²)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanSquare;

impl<T: Scalar> Objective<T> for MeanSquare {
    fn value(&self, y: &Matrix<T>, _: &RoutingDecision<T>) -> Result<f64> {
        Ok(y.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / y.len() as f64)
    }

    fn grad(&self, y: &Matrix<T>, _: &RoutingDecision<T>) -> Result<(Matrix<T>, Option<Matrix<T>>)> {
        let s = T::of(2.0 / y.len() as f64);
        Ok((y.scale(s), None))
    }
}

/// `mean((y − target)²) + balance_loss`.
#[derive(Debug, Clone)]
pub struct RegressionWithBalance<T: Scalar> {
    pub target: Matrix<T>,
    pub alpha: f64,
}

impl<T: Scalar> RegressionWithBalance<T> {
    pub fn mse(&self, y: &Matrix<T>) -> Result<f64> {
        let d = y.sub(&self.target)?;
        Ok(d.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / d.len() as f64)
    }
}

impl<T: Scalar> Objective<T> for RegressionWithBalance<T> {
    fn value(&self, y: &Matrix<T>, decision: &RoutingDecision<T>) -> Result<f64> {
        Ok(self.mse(y)? + balance_loss(decision, self.alpha)?.loss)
    }

    fn grad(&self, y: &Matrix<T>, decision: &RoutingDecision<T>) -> Result<(Matrix<T>, Option<Matrix<T>>)> {
        let d = y.sub(&self.target)?.scale(T::of(2.0 / y.len() as f64));
        let report = balance_loss(decision, self.alpha)?;
        Ok((d, Some(balance_score_grad(&report, decision.tokens()))))
    }
}

/// Loss value and full gradients for one step.
pub fn loss_and_grad<T: Scalar, O: Objective<T>>(
    x: &Matrix<T>,
    model: &MoEModel<T>,
    objective: &O,
) -> Result<(f64, LayerGradients<T>, RoutingDecision<T>)> {
    let out = forward(x, model)?;
    let value = objective.value(&out.y, &out.decision)?;
    let (dy, ds) = objective.grad(&out.y, &out.decision)?;
    let grads = backward_with_score_grad(x, model, &dy, &out.decision, ds.as_ref())?;
    Ok((value, grads, out.decision))
}

/// Plain gradient descent on every trainable tensor.
pub fn sgd_step<T: Scalar>(model: &mut MoEModel<T>, grads: &LayerGradients<T>, lr: f64) -> Result<()> {
    let lr = T::of(lr);
    let step = |w: &mut Matrix<T>, g: &Matrix<T>| w.add_assign(&g.scale(-lr));
    let step_ffn = |w: &mut SwiGluWeights<T>, g: &SwiGluWeights<T>| -> Result<()> {
        step(&mut w.w1, &g.w1)?;
        step(&mut w.wg, &g.wg)?;
        step(&mut w.w2, &g.w2)
    };
    if let (Some(w), Some(g)) = (model.shared.as_mut(), grads.shared.as_ref()) {
        step_ffn(w, g)?;
    }
    for (w, g) in model.experts.iter_mut().zip(&grads.experts) {
        step_ffn(w, g)?;
    }
    step(&mut model.router.weight, &grads.router)?;
    if let (Some(w), Some(g)) = (model.concat_proj.as_mut(), grads.concat_proj.as_ref()) {
        step(w, g)?;
    }
    Ok(())
}

/// `(f(x+ε) − f(x−ε)) / 2ε`
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    W1,
    Wg,
    W2,
}

/// A tensor of the layer (or its input) addressed by the checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    Input,
    Shared(Part),
    Expert(usize, Part),
    Router,
    ConcatProj,
}

fn part_mut<T: Scalar>(w: &mut SwiGluWeights<T>, p: Part) -> &mut Matrix<T> {
    match p {
        Part::W1 => &mut w.w1,
        Part::Wg => &mut w.wg,
        Part::W2 => &mut w.w2,
    }
}

fn part<T: Scalar>(w: &SwiGluWeights<T>, p: Part) -> &Matrix<T> {
    match p {
        Part::W1 => &w.w1,
        Part::Wg => &w.wg,
        Part::W2 => &w.w2,
    }
}

impl ParamId {
    pub fn all<T: Scalar>(model: &MoEModel<T>) -> Vec<ParamId> {
        let parts = [Part::W1, Part::Wg, Part::W2];
        let mut ids = vec![ParamId::Input];
        if model.shared.is_some() {
            ids.extend(parts.map(ParamId::Shared));
        }
        for k in 0..model.experts.len() {
            ids.extend(parts.map(|p| ParamId::Expert(k, p)));
        }
        ids.push(ParamId::Router);
        if model.concat_proj.is_some() {
            ids.push(ParamId::ConcatProj);
        }
        ids
    }

    fn tensor_mut<'a, T: Scalar>(self, x: &'a mut Matrix<T>, model: &'a mut MoEModel<T>) -> &'a mut Matrix<T> {
        match self {
            ParamId::Input => x,
            ParamId::Shared(p) => part_mut(model.shared.as_mut().expect("shared expert"), p),
            ParamId::Expert(k, p) => part_mut(&mut model.experts[k], p),
            ParamId::Router => &mut model.router.weight,
            ParamId::ConcatProj => model.concat_proj.as_mut().expect("concat projection"),
        }
    }

    pub fn grad<T: Scalar>(self, g: &LayerGradients<T>) -> &Matrix<T> {
        match self {
            ParamId::Input => &g.x,
            ParamId::Shared(p) => part(g.shared.as_ref().expect("shared expert"), p),
            ParamId::Expert(k, p) => part(&g.experts[k], p),
            ParamId::Router => &g.router,
            ParamId::ConcatProj => g.concat_proj.as_ref().expect("concat projection"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub epsilon: f64,
    /// A coordinate is checked only if routing is unchanged at
    /// `±margin·epsilon`.
    pub margin: f64,
    /// Coordinates sampled per tensor.
    pub samples_per_tensor: usize,
    /// Lower bound on the relative-error denominator.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            margin: 10.0,
            samples_per_tensor: 4,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose routing flipped inside the margin.
    pub skipped: usize,
    pub worst: Option<(ParamId, usize)>,
}

impl FdReport {
    pub fn stable_fraction(&self) -> f64 {
        let total = self.checked + self.skipped;
        if total == 0 {
            1.0
        } else {
            self.checked as f64 / total as f64
        }
    }
}

/// Compare analytic gradients with central differences on a random sample
/// of coordinates of every tensor.
pub fn fd_check<O: Objective<f64>>(x: &Matrix<f64>, model: &MoEModel<f64>, objective: &O, opts: FdOptions) -> Result<FdReport> {
    let (_, grads, base) = loss_and_grad(x, model, objective)?;
    let mut rng = Rng::new(opts.seed);
    let mut xw = x.clone();
    let mut mw = model.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };

    let eval = |x: &Matrix<f64>, m: &MoEModel<f64>| -> Result<(f64, RoutingDecision<f64>)> {
        let out = forward(x, m)?;
        Ok((objective.value(&out.y, &out.decision)?, out.decision))
    };
    let routes = |x: &Matrix<f64>, m: &MoEModel<f64>| m.route_tokens(x);

    for id in ParamId::all(model) {
        let len = id.grad(&grads).len();
        for idx in rng.sample_indices(len, opts.samples_per_tensor) {
            let orig = id.tensor_mut(&mut xw, &mut mw).data()[idx];
            let set = |v: f64, xw: &mut Matrix<f64>, mw: &mut MoEModel<f64>| {
                id.tensor_mut(xw, mw).data_mut()[idx] = v;
            };

            let wide = opts.margin * opts.epsilon;
            set(orig + wide, &mut xw, &mut mw);
            let up = routes(&xw, &mw)?;
            set(orig - wide, &mut xw, &mut mw);
            let down = routes(&xw, &mw)?;
            if !up.same_selection(&base) || !down.same_selection(&base) {
                set(orig, &mut xw, &mut mw);
                report.skipped += 1;
                continue;
            }

            set(orig + opts.epsilon, &mut xw, &mut mw);
            let (lp, dp) = eval(&xw, &mw)?;
            set(orig - opts.epsilon, &mut xw, &mut mw);
            let (lm, dm) = eval(&xw, &mw)?;
            set(orig, &mut xw, &mut mw);
            if !dp.same_selection(&base) || !dm.same_selection(&base) {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.epsilon);
            let analytic = id.grad(&grads).data()[idx];
            let err = relative_error(analytic, numeric, opts.abs_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((id, idx));
            }
        }
    }
    Ok(report)
}
