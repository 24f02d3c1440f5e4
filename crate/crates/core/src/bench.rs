//! Wall-clock comparison of the token-centric and expert-centric executors
//! on one seeded routing realization.

use std::time::{Duration, Instant};

use crate::error::{invalid, Result};
use crate::experts::{ExpertStore, INIT_STD};
use crate::router::{route_batch, RouterParams, Selector};
use crate::scheduler::{build_plan, execute_grouped, execute_token_centric, flatten_tasks, GroupedKernel, Traffic};
use crate::tensor::{rng_normal, Matrix, Scalar, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeedConfig {
    pub d: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub tokens: usize,
    pub k: usize,
    pub group_size: usize,
    pub kernel: GroupedKernel,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        Self {
            d: 1024,
            n_rows: 256,
            n_cols: 256,
            tokens: 4096,
            k: 64,
            group_size: 64,
            kernel: GroupedKernel::Masked,
            warmup: 1,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedReport {
    pub config: SpeedConfig,
    pub n_active: usize,
    /// Median wall time over the timed repeats.
    pub t_token: Duration,
    /// Median wall time including task flattening and plan construction.
    pub t_expert: Duration,
    pub traffic_token: Traffic,
    pub traffic_expert: Traffic,
    /// `L·K / |active|`.
    pub eta: f64,
    /// Largest elementwise difference between the two outputs, relative to
    /// the largest output magnitude.
    pub max_rel_diff: f64,
}

impl SpeedReport {
    pub fn speedup(&self) -> f64 {
        self.t_token.as_secs_f64() / self.t_expert.as_secs_f64()
    }
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Runs both executors on seeded weights and inputs; `T = f32` is runtime
/// precision. Routing uses the subgrid selector and is not timed.
pub fn run_speed<T: Scalar>(cfg: &SpeedConfig) -> Result<SpeedReport> {
    if cfg.repeats == 0 {
        return Err(invalid("speed run needs at least one timed repeat"));
    }
    let n = cfg.n_rows * cfg.n_cols;
    let mut rng = SeededRng::new(cfg.seed);
    let router = RouterParams::<T>::init(&mut rng, cfg.d, cfg.n_rows, cfg.n_cols, INIT_STD)?;
    let store = ExpertStore::<T>::init(&mut rng, n, cfg.d, INIT_STD)?;
    let x: Matrix<T> = rng_normal(&mut SeededRng::stream(cfg.seed, 1), cfg.tokens, cfg.d, 1.0)?;
    let decisions = route_batch(&x, &router, cfg.k, Selector::Subgrid)?.decisions;

    let mut token_times = Vec::with_capacity(cfg.repeats);
    let mut expert_times = Vec::with_capacity(cfg.repeats);
    let mut last = None;
    for rep in 0..cfg.warmup + cfg.repeats {
        let t = Instant::now();
        let token = execute_token_centric(&decisions, &store, &x)?;
        let dt_token = t.elapsed();

        let t = Instant::now();
        let tasks = flatten_tasks(&decisions);
        let plan = build_plan(&tasks, n, cfg.group_size)?;
        let expert = execute_grouped(&plan, &store, &x, &tasks, cfg.kernel)?;
        let dt_expert = t.elapsed();

        if rep >= cfg.warmup {
            token_times.push(dt_token);
            expert_times.push(dt_expert);
        }
        last = Some((token, expert, plan.active_experts.len()));
    }
    let ((y_token, traffic_token), (y_expert, traffic_expert), n_active) =
        last.expect("at least one repeat ran");
    let scale = y_token.max_abs().max(f64::MIN_POSITIVE);
    Ok(SpeedReport {
        config: *cfg,
        n_active,
        t_token: median(token_times),
        t_expert: median(expert_times),
        traffic_token,
        traffic_expert,
        eta: (cfg.tokens * cfg.k) as f64 / n_active as f64,
        max_rel_diff: y_token.max_abs_diff(&y_expert)? / scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_agrees() {
        let cfg = SpeedConfig { d: 16, n_rows: 16, n_cols: 16, tokens: 64, k: 4, group_size: 8, repeats: 3, ..SpeedConfig::default() };
        let r = run_speed::<f32>(&cfg).unwrap();
        assert!(r.max_rel_diff < 1e-5);
        assert_eq!(r.traffic_token.param_elements_loaded, 2 * 16 * 64 * 4);
        assert_eq!(r.traffic_expert.param_elements_loaded, 2 * 16 * r.n_active as u64);
        assert!(run_speed::<f32>(&SpeedConfig { repeats: 0, ..cfg }).is_err());
    }
}
