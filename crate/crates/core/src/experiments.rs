//! Train-and-evaluate harness and the ablation sweeps built on it.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::classical::refine_direction;
use crate::error::{check_dim, Error, Result};
use crate::metrics::{evaluate, RunReport};
use crate::net::{module_iterates, LayerKind, NetConfig, NetParams, StepStrategy};
use crate::penalty::{build_subproblem, pgm_reference};
use crate::problem::ProblemInstance;
use crate::projection::build_projector;
use crate::train::{predict, train, BatchProblem, TrainConfig, TrainRecord, TrainSet};

/// Training and test data with optional reference solutions.
pub struct Workload {
    pub train: TrainSet,
    pub test_insts: Vec<ProblemInstance>,
    pub test: BatchProblem,
    pub test_truth: Option<Vec<DVector<f64>>>,
    /// Instances per forward call at evaluation time.
    pub eval_batch: usize,
}

impl Workload {
    pub fn new(
        train_insts: &[ProblemInstance],
        train_truth: Option<&[DVector<f64>]>,
        test_insts: Vec<ProblemInstance>,
        test_truth: Option<Vec<DVector<f64>>>,
    ) -> Result<Self> {
        let targets = match train_truth {
            Some(t) => {
                check_dim("training reference solutions", train_insts.len(), t.len())?;
                Some(train_insts.iter().zip(t).map(|(i, y)| i.objective.value(y)).collect())
            }
            None => None,
        };
        if let Some(t) = &test_truth {
            check_dim("test reference solutions", test_insts.len(), t.len())?;
        }
        let train = TrainSet { batch: BatchProblem::from_instances(train_insts)?, targets };
        let test = BatchProblem::from_instances(&test_insts)?;
        Ok(Self { train, test_insts, test, test_truth, eval_batch: 512 })
    }
}

pub struct RunResult {
    pub params: NetParams,
    pub history: Vec<TrainRecord>,
    pub report: RunReport,
    pub diverged: Option<String>,
}

/// Scores `params` on the test split, with per-batch timing.
pub fn evaluate_params(params: &NetParams, w: &Workload) -> Result<RunReport> {
    let started = Instant::now();
    let out = predict(params, &w.test, w.eval_batch)?;
    let ms = started.elapsed().as_secs_f64() * 1e3;
    let pred: Vec<DVector<f64>> = out.y.column_iter().map(|c| c.into_owned()).collect();
    let batches = w.test.len().div_ceil(w.eval_batch.max(1));
    Ok(evaluate(&pred, w.test_truth.as_deref(), &w.test_insts)?.with_timing(ms, batches, w.eval_batch))
}

pub fn run(net: NetConfig, tcfg: &TrainConfig, w: &Workload, init_seed: u64) -> Result<RunResult> {
    let st = &w.train.batch.structure;
    let params = NetParams::init(net, st.n, st.l, init_seed)?;
    let out = train(params, &w.train, tcfg, 0, |_, _| {})?;
    let report = evaluate_params(&out.params, w)?;
    Ok(RunResult { params: out.params, history: out.history, report, diverged: out.diverged })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub report: RunReport,
    /// Largest ℓ₁ penalty term of the loss seen during training.
    pub max_train_penalty: f64,
    pub diverged: Option<String>,
}

fn row(label: String, r: RunResult) -> AblationRow {
    let max_train_penalty = r.history.iter().map(|h| h.max_penalty).fold(0.0, f64::max);
    AblationRow { label, report: r.report, max_train_penalty, diverged: r.diverged }
}

/// One run per layer count `K`.
pub fn sweep_layers(base: NetConfig, tcfg: &TrainConfig, w: &Workload, ks: &[usize]) -> Result<Vec<AblationRow>> {
    ks.iter()
        .map(|&k| Ok(row(format!("K={k}"), run(NetConfig { layers: k, ..base }, tcfg, w, tcfg.seed)?)))
        .collect()
}

/// One run per stage count `S`.
pub fn sweep_stages(base: NetConfig, tcfg: &TrainConfig, w: &Workload, ss: &[usize]) -> Result<Vec<AblationRow>> {
    ss.iter()
        .map(|&s| Ok(row(format!("S={s}"), run(NetConfig { stages: s, ..base }, tcfg, w, tcfg.seed)?)))
        .collect()
}

/// Rows for `1/M`, `α_max` and `σ(β) α_max`, in that order.
pub fn compare_step_strategies(base: NetConfig, tcfg: &TrainConfig, w: &Workload) -> Result<Vec<AblationRow>> {
    [(StepStrategy::InvM, "1/M"), (StepStrategy::AlphaMax, "alpha_max"), (StepStrategy::SigmoidScaled, "sigmoid(beta)*alpha_max")]
        .into_iter()
        .map(|(step, label)| Ok(row(label.into(), run(NetConfig { step, ..base }, tcfg, w, tcfg.seed)?)))
        .collect()
}

/// The full network against the variant whose layers only learn `γ`.
pub fn compare_pgm_baseline(base: NetConfig, tcfg: &TrainConfig, w: &Workload) -> Result<Vec<AblationRow>> {
    [(LayerKind::Learned, "descent-net"), (LayerKind::Pgm, "learned-pgm")]
        .into_iter()
        .map(|(layer_kind, label)| Ok(row(label.into(), run(NetConfig { layer_kind, ..base }, tcfg, w, tcfg.seed)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubproblemRow {
    pub layer: usize,
    /// Mean `Φ(dₖ)` over the instances.
    pub descent_value: f64,
    /// Mean of `|Φ(dₖ) − Φ*| / |Φ*|`.
    pub rel_err: f64,
}

/// Per-layer subproblem objective of the first stage, against a reference
/// minimizer from long-run PGM polished by the exact active-set solve.
/// Layer 0 is the raw input `−∇f`, which is usually outside `D`.
pub fn subproblem_trace(params: &NetParams, insts: &[ProblemInstance], ref_iters: usize) -> Result<Vec<SubproblemRow>> {
    let first = insts.first().ok_or_else(|| Error::Config("no instances to trace".into()))?;
    let cache = build_projector(&first.constraints.a)?;
    let k = params.config.layers;
    let mut sums = vec![(0.0, 0.0); k + 1];
    for (i, inst) in insts.iter().enumerate() {
        let y0 = inst.feasible_init()?;
        let sub = build_subproblem(inst, &y0, &cache, &params.config.penalty)?;
        let reference = pgm_reference(&sub, ref_iters, 2, i as u64);
        let phi_star = refine_direction(&sub, &reference.d)
            .map(|d| sub.phi(&d))
            .map_or(reference.phi, |p| p.min(reference.phi));
        let denom = phi_star.abs().max(1e-12);
        for (layer, d) in module_iterates(params.stage_layers(0), params.config.layer_kind, &sub).iter().enumerate() {
            let phi = sub.phi(d);
            sums[layer].0 += phi;
            sums[layer].1 += (phi - phi_star).abs() / denom;
        }
    }
    let nf = insts.len() as f64;
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(layer, (v, e))| SubproblemRow { layer, descent_value: v / nf, rel_err: e / nf })
        .collect())
}

/// Learned `γ` per stage (rows) and layer (columns).
pub fn gamma_table(params: &NetParams) -> Vec<Vec<f64>> {
    params.gammas()
}

pub fn render_rows(rows: &[AblationRow]) -> String {
    let pairs: Vec<(String, RunReport)> = rows.iter().map(|r| (r.label.clone(), r.report.clone())).collect();
    crate::metrics::render_table(&pairs)
}

pub fn render_subproblem(rows: &[SubproblemRow]) -> String {
    let mut out = format!("{:>5}  {:>14}  {:>10}\n", "layer", "descent_value", "rel_err");
    for r in rows {
        out.push_str(&format!("{:>5}  {:>14.6}  {:>10.4e}\n", r.layer, r.descent_value, r.rel_err));
    }
    out
}

pub fn render_gammas(g: &[Vec<f64>]) -> String {
    let mut out = String::from("stage");
    for k in 0..g.first().map_or(0, Vec::len) {
        out.push_str(&format!("  {:>10}", format!("gamma_{}", k + 1)));
    }
    out.push('\n');
    for (s, row) in g.iter().enumerate() {
        out.push_str(&format!("{:>5}", s + 1));
        for v in row {
            out.push_str(&format!("  {v:>10.3e}"));
        }
        out.push('\n');
    }
    out
}
