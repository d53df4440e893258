//! Descent modules and the full unrolled network.
//!
//! This is the per-instance reference implementation. The batched version
//! used for training lives in [`crate::train`] and is tested against this one.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, sigmoid};
use crate::penalty::{build_subproblem, PenaltyConfig, SubproblemData};
use crate::problem::{ProblemInstance, FEAS_TOL};
use crate::projection::{build_projector, ProjectorCache};

/// Directional derivatives at or below this do not count as moving toward a constraint.
pub const STEP_DENOM_FLOOR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepStrategy {
    /// `min(1/M, α_max)`.
    InvM,
    /// The full feasible step `α_max`.
    AlphaMax,
    /// `σ(β) α_max`.
    #[default]
    SigmoidScaled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// `T(u) = V ReLU(W u + b₁) + b₂`.
    #[default]
    Learned,
    /// `T(u) = u`; only γ is learned.
    Pgm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub stages: usize,
    pub layers: usize,
    pub hidden: usize,
    pub penalty: PenaltyConfig,
    /// Step used when no constraint limits the move.
    pub alpha_cap: f64,
    #[serde(default)]
    pub step: StepStrategy,
    #[serde(default)]
    pub layer_kind: LayerKind,
    /// One set of layer weights reused by every stage.
    #[serde(default)]
    pub shared_layers: bool,
    pub gamma_init: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        let penalty = PenaltyConfig::default();
        Self {
            stages: 8,
            layers: 3,
            hidden: 150,
            alpha_cap: 1e3 / penalty.m,
            penalty,
            step: StepStrategy::SigmoidScaled,
            layer_kind: LayerKind::Learned,
            shared_layers: false,
            gamma_init: 0.1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.penalty.validate()?;
        if self.stages == 0 || self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("stages, layers and hidden width must be at least 1".into()));
        }
        if !(self.alpha_cap > 0.0 && self.alpha_cap.is_finite()) {
            return Err(Error::Config("alpha_cap must be positive and finite".into()));
        }
        if !self.gamma_init.is_finite() {
            return Err(Error::Config("gamma_init must be finite".into()));
        }
        Ok(())
    }

    pub fn modules(&self) -> usize {
        if self.shared_layers {
            1
        } else {
            self.stages
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub b2: DVector<f64>,
    pub gamma: f64,
}

impl LayerParams {
    pub fn zeros(n: usize, q: usize) -> Self {
        Self {
            w: DMatrix::zeros(q, n),
            v: DMatrix::zeros(n, q),
            b1: DVector::zeros(q),
            b2: DVector::zeros(n),
            gamma: 0.0,
        }
    }

    pub fn init(n: usize, q: usize, gamma: f64, rng: &mut impl Rng) -> Self {
        let bw = 1.0 / (n as f64).sqrt();
        let bv = 1.0 / (q as f64).sqrt();
        Self {
            w: DMatrix::from_fn(q, n, |_, _| rng.random_range(-bw..bw)),
            v: DMatrix::from_fn(n, q, |_, _| rng.random_range(-bv..bv)),
            b1: DVector::zeros(q),
            b2: DVector::zeros(n),
            gamma,
        }
    }

    /// Weights for which the layer performs exactly the step `d − γₖ u`.
    ///
    /// `W` is a random `q × n` matrix (full column rank needs `q ≥ n`),
    /// `b₁ = shift·1`, `V = γₖ W†`, `b₂ = −γₖ W† b₁` and the layer's own γ is 1.
    /// `shift` must keep `W u + b₁` positive for every `u` the layer will see.
    pub fn pgm_equivalent(n: usize, q: usize, gamma_k: f64, shift: f64, rng: &mut impl Rng) -> Result<Self> {
        if q < n {
            return Err(Error::Config(format!("need q >= n for a full-column-rank W, got q={q}, n={n}")));
        }
        let w = DMatrix::from_fn(q, n, |_, _| rng.random_range(-1.0..1.0));
        if linalg::rank(&w) < n {
            return Err(Error::RankDeficient { rank: linalg::rank(&w), expected: n });
        }
        let w_pinv = linalg::pseudo_inverse(&w)?;
        let b1 = DVector::from_element(q, shift);
        let v = &w_pinv * gamma_k;
        let b2 = -(&v * &b1);
        Ok(Self { w, v, b1, b2, gamma: 1.0 })
    }

    pub fn n(&self) -> usize {
        self.w.ncols()
    }

    pub fn q(&self) -> usize {
        self.w.nrows()
    }

    fn all_finite(&self) -> bool {
        self.w.iter().chain(self.v.iter()).chain(self.b1.iter()).chain(self.b2.iter()).all(|x| x.is_finite())
            && self.gamma.is_finite()
    }

    /// `T(u)`.
    pub fn transform(&self, kind: LayerKind, u: &DVector<f64>) -> DVector<f64> {
        match kind {
            LayerKind::Learned => {
                let mut z = &self.w * u + &self.b1;
                z.apply(|x| *x = x.max(0.0));
                &self.v * z + &self.b2
            }
            LayerKind::Pgm => u.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub config: NetConfig,
    pub n: usize,
    pub l: usize,
    /// `modules[s]` are the layers of stage `s` (a single entry when layers are shared).
    pub modules: Vec<Vec<LayerParams>>,
    pub betas: Vec<f64>,
}

impl NetParams {
    pub fn init(config: NetConfig, n: usize, l: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let modules = (0..config.modules())
            .map(|_| {
                (0..config.layers)
                    .map(|_| LayerParams::init(n, config.hidden, config.gamma_init, &mut rng))
                    .collect()
            })
            .collect();
        Ok(Self { config, n, l, modules, betas: vec![0.0; config.stages] })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_tensor_mut(|t| t.fill(0.0));
        out
    }

    pub fn stage_layers(&self, s: usize) -> &[LayerParams] {
        if self.config.shared_layers {
            &self.modules[0]
        } else {
            &self.modules[s]
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        if self.modules.len() != c.modules() || self.betas.len() != c.stages {
            return Err(Error::Config("parameter count does not match stage configuration".into()));
        }
        for lp in self.modules.iter().flatten() {
            if lp.w.shape() != (c.hidden, self.n)
                || lp.v.shape() != (self.n, c.hidden)
                || lp.b1.len() != c.hidden
                || lp.b2.len() != self.n
            {
                return Err(Error::Config("layer parameter shapes are inconsistent".into()));
            }
            if !lp.all_finite() {
                return Err(Error::Numerical("non-finite layer parameter".into()));
            }
        }
        if self.modules.iter().any(|m| m.len() != c.layers) {
            return Err(Error::Config("wrong number of layers in a module".into()));
        }
        if self.betas.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numerical("non-finite step parameter".into()));
        }
        Ok(())
    }

    /// Layer tensors in declaration order: per module, per layer `W, V, b₁, b₂, γ`.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for lp in self.modules.iter_mut().flatten() {
            f(lp.w.as_mut_slice());
            f(lp.v.as_mut_slice());
            f(lp.b1.as_mut_slice());
            f(lp.b2.as_mut_slice());
            f(std::slice::from_mut(&mut lp.gamma));
        }
        f(&mut self.betas);
    }

    pub fn for_each_tensor(&self, mut f: impl FnMut(&[f64])) {
        for lp in self.modules.iter().flatten() {
            f(lp.w.as_slice());
            f(lp.v.as_slice());
            f(lp.b1.as_slice());
            f(lp.b2.as_slice());
            f(std::slice::from_ref(&lp.gamma));
        }
        f(&self.betas);
    }

    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.for_each_tensor(|t| total += t.len());
        total
    }

    pub fn gammas(&self) -> Vec<Vec<f64>> {
        self.modules.iter().map(|m| m.iter().map(|lp| lp.gamma).collect()).collect()
    }
}

/// `P(d − γ T(u))` with `u` the subgradient at `d`.
pub fn layer_forward(lp: &LayerParams, kind: LayerKind, sub: &SubproblemData<'_>, d: &DVector<f64>) -> DVector<f64> {
    let u = sub.subgradient(d);
    let t = lp.transform(kind, &u);
    sub.cache.project_with_branch(&(d - t * lp.gamma)).0
}

/// Runs the layers from `d₀ = −∇f`. Returns every iterate, `d₀` first.
pub fn module_iterates(layers: &[LayerParams], kind: LayerKind, sub: &SubproblemData<'_>) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(layers.len() + 1);
    out.push(-&sub.grad_f);
    for lp in layers {
        let next = layer_forward(lp, kind, sub, out.last().expect("nonempty"));
        out.push(next);
    }
    out
}

pub fn module_forward(layers: &[LayerParams], kind: LayerKind, sub: &SubproblemData<'_>) -> DVector<f64> {
    module_iterates(layers, kind, sub).pop().expect("nonempty")
}

/// Largest `α` with `g + α G d ≤ 0`, plus the index attaining it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxStep {
    pub alpha: f64,
    /// `None` when no constraint limits the move and `alpha` is the cap.
    pub argmin: Option<usize>,
    /// True when the ratio was outside `[0, cap]` and got clamped.
    pub clamped: bool,
}

pub fn max_step_info(grad_g: &DMatrix<f64>, g_vals: &DVector<f64>, d: &DVector<f64>, cap: f64) -> MaxStep {
    let s = grad_g * d;
    max_step_from_slopes(&s, g_vals.as_slice(), cap)
}

pub(crate) fn max_step_from_slopes(s: &DVector<f64>, g_vals: &[f64], cap: f64) -> MaxStep {
    let mut best = f64::INFINITY;
    let mut arg = None;
    for (j, (&sj, &gj)) in s.iter().zip(g_vals).enumerate() {
        if sj > STEP_DENOM_FLOOR {
            let r = -gj / sj;
            if r < best {
                best = r;
                arg = Some(j);
            }
        }
    }
    match arg {
        None => MaxStep { alpha: cap, argmin: None, clamped: false },
        Some(_) if best > cap => MaxStep { alpha: cap, argmin: arg, clamped: true },
        Some(_) if best < 0.0 => MaxStep { alpha: 0.0, argmin: arg, clamped: true },
        Some(_) => MaxStep { alpha: best, argmin: arg, clamped: false },
    }
}

pub fn max_feasible_step(grad_g: &DMatrix<f64>, g_vals: &DVector<f64>, d: &DVector<f64>, cap: f64) -> f64 {
    max_step_info(grad_g, g_vals, d, cap).alpha
}

/// `α_max` at the point the subproblem was built for.
pub fn max_step(sub: &SubproblemData<'_>, d: &DVector<f64>, alpha_cap: f64) -> f64 {
    max_feasible_step(sub.grad_g, &sub.g_vals, d, alpha_cap)
}

/// Step length actually taken for a given `α_max`.
pub fn step_length(strategy: StepStrategy, m: f64, beta: f64, alpha_max: f64) -> f64 {
    match strategy {
        StepStrategy::InvM => alpha_max.min(1.0 / m),
        StepStrategy::AlphaMax => alpha_max,
        StepStrategy::SigmoidScaled => sigmoid(beta) * alpha_max,
    }
}

#[derive(Clone, Debug)]
pub struct StageRecord {
    pub d: DVector<f64>,
    pub alpha_max: f64,
    pub step: f64,
    /// Objective after the update.
    pub f: f64,
}

#[derive(Clone, Debug)]
pub struct NetTrace {
    pub y: DVector<f64>,
    pub stages: Vec<StageRecord>,
}

pub fn net_forward(params: &NetParams, inst: &ProblemInstance, y0: &DVector<f64>) -> Result<NetTrace> {
    let cache = build_projector(&inst.constraints.a)?;
    net_forward_with(params, inst, &cache, y0)
}

pub fn net_forward_with(
    params: &NetParams,
    inst: &ProblemInstance,
    cache: &ProjectorCache,
    y0: &DVector<f64>,
) -> Result<NetTrace> {
    let cfg = &params.config;
    if inst.n() != params.n || inst.constraints.n_ineq() != params.l {
        return Err(Error::Config(format!(
            "network built for n={}, l={} but instance has n={}, l={}",
            params.n,
            params.l,
            inst.n(),
            inst.constraints.n_ineq()
        )));
    }
    inst.ensure_feasible(y0, FEAS_TOL)?;
    let mut y = y0.clone();
    let mut stages = Vec::with_capacity(cfg.stages);
    for s in 0..cfg.stages {
        let sub = build_subproblem(inst, &y, cache, &cfg.penalty)?;
        let d = module_forward(params.stage_layers(s), cfg.layer_kind, &sub);
        let alpha_max = max_step(&sub, &d, cfg.alpha_cap);
        let step = step_length(cfg.step, cfg.penalty.m, params.betas[s], alpha_max);
        y.axpy(step, &d, 1.0);
        let f = inst.objective.value(&y);
        if !f.is_finite() {
            return Err(Error::Numerical(format!("objective became non-finite at stage {s}")));
        }
        stages.push(StageRecord { d, alpha_max, step, f });
    }
    Ok(NetTrace { y, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::penalty::pgm_iterates;
    use crate::problem::random_instance_with_point;
    use approx::assert_relative_eq;

    fn small_sub(seed: u64) -> (ProblemInstance, DVector<f64>, ProjectorCache) {
        let (inst, y) = random_instance_with_point(10, 3, 5, seed).unwrap();
        let cache = build_projector(&inst.constraints.a).unwrap();
        (inst, y, cache)
    }

    #[test]
    fn zero_gamma_and_zero_weights_only_project() {
        let (inst, y, cache) = small_sub(1);
        let sub = build_subproblem(&inst, &y, &cache, &PenaltyConfig::default()).unwrap();
        let d = DVector::from_fn(10, |i, _| (i as f64 - 4.5) / 3.0);
        let expect = cache.project(&d).unwrap();
        let mut lp = LayerParams::init(10, 12, 0.0, &mut ChaCha20Rng::seed_from_u64(0));
        assert_eq!(layer_forward(&lp, LayerKind::Learned, &sub, &d), expect);
        lp = LayerParams::zeros(10, 12);
        lp.gamma = 0.7;
        assert_eq!(layer_forward(&lp, LayerKind::Learned, &sub, &d), expect);
        let one = module_forward(&[LayerParams::zeros(10, 12)], LayerKind::Learned, &sub);
        assert_eq!(one, cache.project(&(-&sub.grad_f)).unwrap());
    }

    #[test]
    fn pgm_equivalent_layers_reproduce_pgm() {
        let (inst, y, cache) = small_sub(3);
        let sub = build_subproblem(&inst, &y, &cache, &PenaltyConfig::default()).unwrap();
        let gammas = [0.3, 0.2, 0.1];
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let layers: Vec<_> = gammas
            .iter()
            .map(|&g| LayerParams::pgm_equivalent(10, 16, g, 1e4, &mut rng).unwrap())
            .collect();
        let net = module_iterates(&layers, LayerKind::Learned, &sub);
        let pgm = pgm_iterates(&sub, &(-&sub.grad_f), &gammas);
        assert_eq!(net.len(), pgm.len() + 1);
        for (a, b) in net[1..].iter().zip(&pgm) {
            assert!((a - b).amax() < 1e-9);
        }
    }

    #[test]
    fn max_step_examples() {
        let gg = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        let g = DVector::from_vec(vec![-1.0]);
        assert_relative_eq!(max_feasible_step(&gg, &g, &DVector::from_vec(vec![1.0, 0.0]), 1e3), 0.5);
        assert_eq!(max_feasible_step(&gg, &g, &DVector::from_vec(vec![-1.0, 3.0]), 1e3), 1e3);
        let info = max_step_info(&gg, &g, &DVector::from_vec(vec![1e-6, 0.0]), 1e3);
        assert_eq!(info.alpha, 1e3);
        assert!(info.clamped);
    }

    #[test]
    fn max_step_makes_binding_row_active() {
        for seed in 0..20 {
            let (inst, y, cache) = small_sub(seed);
            let sub = build_subproblem(&inst, &y, &cache, &PenaltyConfig::default()).unwrap();
            let d = cache.project(&(-&sub.grad_f)).unwrap();
            let info = max_step_info(sub.grad_g, &sub.g_vals, &d, 1e3);
            if info.argmin.is_some() && !info.clamped {
                let y1 = &y + &d * info.alpha;
                let worst = linalg::max_or_neg_inf(&inst.constraints.ineq_values(&y1));
                assert!(worst.abs() < 1e-10, "seed {seed}: {worst}");
            }
        }
    }

    #[test]
    fn very_negative_beta_keeps_start() {
        let (inst, y, _) = small_sub(4);
        let cfg = NetConfig { stages: 2, layers: 2, hidden: 8, ..NetConfig::default() };
        let mut params = NetParams::init(cfg, 10, 5, 1).unwrap();
        params.betas = vec![-800.0; 2];
        let out = net_forward(&params, &inst, &y).unwrap();
        assert_eq!(out.y, y);
    }

    #[test]
    fn untrained_net_stays_feasible() {
        for seed in 0..10 {
            let (inst, y, _) = small_sub(seed);
            let cfg = NetConfig { stages: 4, layers: 2, hidden: 8, ..NetConfig::default() };
            let mut params = NetParams::init(cfg, 10, 5, seed).unwrap();
            params.betas = vec![3.0, -1.0, 0.0, 5.0];
            let out = net_forward(&params, &inst, &y).unwrap();
            assert!(inst.max_violation(&out.y) <= 1e-8);
            for st in &out.stages {
                assert!(st.d.norm() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (inst, y, _) = small_sub(0);
        let params = NetParams::init(NetConfig { hidden: 4, ..NetConfig::default() }, 11, 5, 0).unwrap();
        assert!(matches!(net_forward(&params, &inst, &y), Err(Error::Config(_))));
    }
}
