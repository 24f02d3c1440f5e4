//! Oracle suites behind `omnimoe verify`.

use serde::Serialize;

use omnimoe::analysis::{load_stats, traffic_formulas};
use omnimoe::autograd::{fd_check, FdScenario};
use omnimoe::experts::{ExpertStore, Executor, ForwardOptions, LayerDims, OmniLayer};
use omnimoe::router::{route_batch, topk_bruteforce, topk_subgrid, topk_tiled, RouterDecision, RouterParams, Selector};
use omnimoe::scheduler::{build_plan, execute_grouped, execute_token_centric, flatten_tasks};
use omnimoe::tensor::{log_softmax, rng_normal, Matrix, Scalar, SeededRng};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: &'static str,
    pub status: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub instances: usize,
}

impl CheckRecord {
    fn new(name: &'static str, max_error: f64, tolerance: f64, instances: usize, extra_ok: bool) -> Self {
        let pass = extra_ok && max_error <= tolerance;
        Self { name, status: if pass { "pass" } else { "fail" }, max_error, tolerance, instances }
    }

    pub fn passed(&self) -> bool {
        self.status == "pass"
    }
}

/// Debug-only perturbation of the first grouped output element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FaultInjection(pub bool);

fn selector_equivalence(cfg: &RunConfig) -> omnimoe::Result<CheckRecord> {
    let mut rng = SeededRng::stream(cfg.seed, 11);
    let instances = 200;
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for i in 0..instances {
        let k = if i % 2 == 0 { 1 } else { cfg.k };
        let n_rows = rng.below(64) + 1;
        let n_cols = (rng.below(64) + 1).max(k.div_ceil(n_rows));
        let coarse = i % 3 == 0;
        let mut logits = |n: usize| -> omnimoe::Result<Vec<f64>> {
            let s: Vec<f64> = (0..n)
                .map(|_| {
                    let v = rng.normal() * 2.0;
                    if coarse { v.round() } else { v }
                })
                .collect();
            log_softmax(&s)
        };
        let p_r = logits(n_rows)?;
        let p_c = logits(n_cols)?;
        let oracle = topk_bruteforce(&p_r, &p_c, k)?;
        for got in [topk_tiled(&p_r, &p_c, k, cfg.select_block)?, topk_subgrid(&p_r, &p_c, k)?] {
            mismatches += usize::from(got.indices != oracle.indices);
            for (a, b) in got.scores.iter().zip(&oracle.scores) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(CheckRecord::new("selector_equivalence", worst, 1e-12, instances, mismatches == 0))
}

fn cast_decisions<T: Scalar>(decisions: &[RouterDecision<f64>]) -> Vec<RouterDecision<T>> {
    decisions
        .iter()
        .map(|d| RouterDecision {
            indices: d.indices.clone(),
            gates: d.gates.iter().map(|&g| T::from_f64(g)).collect(),
            scores: d.scores.iter().map(|&s| T::from_f64(s)).collect(),
        })
        .collect()
}

/// Largest grouped-vs-reference difference, relative to the output scale
/// when `relative` is set.
fn executor_gap<T: Scalar>(
    store: &ExpertStore<f64>,
    x: &Matrix<f64>,
    decisions: &[RouterDecision<f64>],
    cfg: &RunConfig,
    b: usize,
    fault: bool,
    relative: bool,
) -> omnimoe::Result<f64> {
    let store: ExpertStore<T> = store.cast();
    let x: Matrix<T> = x.cast();
    let decisions = cast_decisions::<T>(decisions);
    let tasks = flatten_tasks(&decisions);
    let plan = build_plan(&tasks, store.n_experts(), b)?;
    let (reference, _) = execute_token_centric(&decisions, &store, &x)?;
    let (mut grouped, _) = execute_grouped(&plan, &store, &x, &tasks, cfg.kernel)?;
    if fault {
        let v = grouped.get(0, 0);
        grouped.set(0, 0, v + T::from_f64(1e-3));
    }
    let diff = grouped.max_abs_diff(&reference)?;
    Ok(if relative { diff / reference.max_abs().max(f64::MIN_POSITIVE) } else { diff })
}

fn executor_equivalence(cfg: &RunConfig, fault: FaultInjection) -> omnimoe::Result<[CheckRecord; 2]> {
    let mut rng = SeededRng::stream(cfg.seed, 12);
    let instances = 100;
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let n_rows = rng.below(32) + 1;
        let n_cols = rng.below(32) + 1;
        let n = n_rows * n_cols;
        let k = rng.below(n.min(64)) + 1;
        let tokens = rng.below(128) + 1;
        let d = rng.below(16) + 1;
        let b = [1, 4, cfg.group_size][i % 3];
        let router = RouterParams::<f64>::init(&mut rng, d, n_rows, n_cols, 0.5)?;
        let store = ExpertStore::<f64>::init(&mut rng, n, d, 0.5)?;
        let x = rng_normal(&mut rng, tokens, d, 1.0)?;
        let decisions = route_batch(&x, &router, k, Selector::Subgrid)?.decisions;
        let inject = fault.0 && i == 0;
        worst64 = worst64.max(executor_gap::<f64>(&store, &x, &decisions, cfg, b, inject, false)?);
        worst32 = worst32.max(executor_gap::<f32>(&store, &x, &decisions, cfg, b, inject, true)?);
    }
    Ok([
        CheckRecord::new("executor_equivalence_f64", worst64, 1e-10, instances, true),
        CheckRecord::new("executor_equivalence_f32", worst32, 1e-5, instances, true),
    ])
}

fn fd_gradients(cfg: &RunConfig) -> omnimoe::Result<CheckRecord> {
    let instances = 10;
    let mut worst = 0.0f64;
    let mut sparsity = true;
    for i in 0..instances {
        let r = fd_check(&FdScenario::standard(cfg.seed.wrapping_add(i as u64))?, 1e-6)?;
        worst = worst.max(r.max_rel_error);
        sparsity &= r.sparsity_exact;
    }
    Ok(CheckRecord::new("fd_gradients", worst, 1e-4, instances, sparsity))
}

fn formula_counters(cfg: &RunConfig) -> omnimoe::Result<CheckRecord> {
    let mut rng = SeededRng::stream(cfg.seed, 13);
    let instances = 20;
    let mut mismatches = 0usize;
    for i in 0..instances {
        let grid = rng.below(12) + 1;
        let dims = LayerDims { d: rng.below(12) + 1, n_rows: grid, n_cols: grid, d_ffn: 3, k: rng.below(grid * grid).min(9) + 1 };
        let layer = OmniLayer::<f32>::init(dims, cfg.seed.wrapping_add(i as u64))?;
        let tokens = rng.below(64) + 1;
        let x: Matrix<f32> = rng_normal(&mut rng, tokens, dims.d, 1.0)?;
        let opts = ForwardOptions { group_size: [1, 4, cfg.group_size][i % 3], kernel: cfg.kernel, ..ForwardOptions::default() };
        let sched = layer.forward(&x, &opts)?;
        let refr = layer.forward(&x, &opts.with_executor(Executor::Reference))?;
        let n_active = sched.routing.counts.iter().filter(|&&c| c > 0).count() as u64;
        let f = traffic_formulas(dims.d as u64, tokens as u64, dims.k as u64, n_active)?;
        mismatches += usize::from(refr.traffic.param_elements_loaded != f.d_token);
        mismatches += usize::from(sched.traffic.param_elements_loaded != f.d_expert);
    }
    Ok(CheckRecord::new("formula_counters", mismatches as f64, 0.0, instances, true))
}

fn load_metric_formulas() -> omnimoe::Result<CheckRecord> {
    let n = 1024;
    let uniform = load_stats(&vec![2; n])?;
    let mut one = vec![0u64; n];
    one[5] = 3;
    let single = load_stats(&one)?;
    let err = uniform.unevenness.abs().max((single.unevenness - (n as f64).ln()).abs());
    Ok(CheckRecord::new("load_metric_formulas", err, 1e-12, 2, uniform.usage == 1.0))
}

pub fn run_checks(cfg: &RunConfig, fault: FaultInjection) -> omnimoe::Result<Vec<CheckRecord>> {
    let mut out = vec![selector_equivalence(cfg)?];
    out.extend(executor_equivalence(cfg, fault)?);
    out.push(fd_gradients(cfg)?);
    out.push(formula_counters(cfg)?);
    out.push(load_metric_formulas()?);
    Ok(out)
}
