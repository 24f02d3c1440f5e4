//! Closed-form cost models, load-distribution metrics and an expert-parallel
//! communication model.

use crate::error::{invalid, Result};
use crate::tensor::SeededRng;

/// Projection FLOPs of a dense `d × N` router: `2·d·N`.
pub fn flops_router_standard(d: u64, n: u64) -> u64 {
    2 * d * n
}

/// Projection FLOPs of the factorized router: `2·d·(N_r + N_c)`.
pub fn flops_router_cartesian(d: u64, n_rows: u64, n_cols: u64) -> u64 {
    2 * d * (n_rows + n_cols)
}

pub fn reduction_factor_for(d: u64, n_rows: u64, n_cols: u64) -> f64 {
    flops_router_standard(d, n_rows * n_cols) as f64 / flops_router_cartesian(d, n_rows, n_cols) as f64
}

/// Dense-over-factorized projection cost for a balanced `√N × √N` grid,
/// which equals `√N / 2`.
pub fn reduction_factor(n: u64) -> Result<f64> {
    let r = n.isqrt();
    if n == 0 || r * r != n {
        return Err(invalid(format!("balanced grid needs a perfect-square N, got {n}")));
    }
    Ok(reduction_factor_for(1, r, r))
}

/// Selection cost of block-wise merge selection:
/// `⌈N/B_sel⌉ · (B_sel·K + K²)`.
pub fn flops_select(n: u64, block: u64, k: u64) -> Result<u64> {
    if k == 0 || block < k {
        return Err(invalid(format!("selection cost needs B_sel >= K >= 1, got B_sel={block}, K={k}")));
    }
    Ok(n.div_ceil(block) * (block * k + k * k))
}

/// Parameter traffic of the two execution orders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficModel {
    /// `2·d·L·K` elements.
    pub d_token: u64,
    /// `2·d·|active|` elements.
    pub d_expert: u64,
    /// `L·K / |active|`, zero when there is no work.
    pub eta: f64,
}

pub fn traffic_formulas(d: u64, l: u64, k: u64, n_active: u64) -> Result<TrafficModel> {
    let tasks = l * k;
    if n_active == 0 && tasks > 0 {
        return Err(invalid("no active experts for a non-empty batch"));
    }
    if n_active > tasks {
        return Err(invalid(format!("{n_active} active experts exceed the {tasks} tasks")));
    }
    Ok(TrafficModel {
        d_token: 2 * d * tasks,
        d_expert: 2 * d * n_active,
        eta: if n_active == 0 { 0.0 } else { tasks as f64 / n_active as f64 },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub flops_router_std: u64,
    pub flops_router_cart: u64,
    pub flops_select: u64,
    pub reduction_factor: f64,
    pub traffic_token: u64,
    pub traffic_expert: u64,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CostInputs {
    pub d: u64,
    pub n_rows: u64,
    pub n_cols: u64,
    pub k: u64,
    pub select_block: u64,
    pub tokens: u64,
    pub n_active: u64,
}

pub fn cost_report(c: CostInputs) -> Result<CostReport> {
    let n = c.n_rows * c.n_cols;
    let traffic = traffic_formulas(c.d, c.tokens, c.k, c.n_active)?;
    let flops_router_std = flops_router_standard(c.d, n);
    let flops_router_cart = flops_router_cartesian(c.d, c.n_rows, c.n_cols);
    Ok(CostReport {
        flops_router_std,
        flops_router_cart,
        flops_select: flops_select(n, c.select_block, c.k)?,
        reduction_factor: flops_router_std as f64 / flops_router_cart as f64,
        traffic_token: traffic.d_token,
        traffic_expert: traffic.d_expert,
        eta: traffic.eta,
    })
}

/// Expert selection frequencies and the derived balance metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadStats {
    /// Normalized selection frequency per expert.
    pub z: Vec<f64>,
    /// Fraction of experts selected at least once.
    pub usage: f64,
    /// KL divergence of `z` from uniform, in nats: `Σ z·ln(N·z)`.
    pub unevenness: f64,
}

pub fn load_stats(counts: &[u64]) -> Result<LoadStats> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(invalid("load statistics need at least one selection"));
    }
    let n = counts.len() as f64;
    let z: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let used = counts.iter().filter(|&&c| c > 0).count();
    let unevenness = z
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (n * p).ln())
        .sum::<f64>()
        // rounding can leave a tiny negative value for near-uniform z
        .max(0.0);
    Ok(LoadStats {
        z,
        usage: used as f64 / n,
        unevenness,
    })
}

/// Expected distinct experts hit by `tasks` uniform draws from `n`:
/// `N·(1 − (1 − 1/N)^tasks)`.
pub fn expected_active_experts(n: u64, tasks: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    -n * (tasks as f64 * (-1.0 / n).ln_1p()).exp_m1()
}

/// Expert-parallel placement and volume inputs.
///
/// Experts live on ranks in contiguous id blocks of `⌈N/R⌉`; token `l` lives
/// on rank `l mod R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommConfig {
    pub ranks: usize,
    pub n_experts: usize,
    pub tokens: usize,
    pub k: usize,
    pub d: usize,
    pub bytes_per_element: usize,
    pub seed: u64,
}

impl CommConfig {
    pub fn experts_per_rank(&self) -> usize {
        self.n_experts.div_ceil(self.ranks)
    }

    pub fn expert_rank(&self, expert: usize) -> usize {
        expert / self.experts_per_rank()
    }

    pub fn token_rank(&self, token: usize) -> usize {
        token % self.ranks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommReport {
    pub config: CommConfig,
    /// Token rows dispatched for every task, `L·K·d·bytes`.
    pub fwd_bytes: u64,
    /// Part of `fwd_bytes` that crosses ranks.
    pub fwd_cross_rank_bytes: u64,
    /// Cross-rank dispatch bytes received by each expert rank.
    pub fwd_bytes_per_rank: Vec<u64>,
    /// Gradient rows of `W` and `V` for every active expert,
    /// `2·d·bytes·|active|`.
    pub bwd_bytes: u64,
    pub bwd_bytes_per_rank: Vec<u64>,
    pub n_active: u64,
    /// Uniform-routing expectation of `n_active`.
    pub expected_active: f64,
    pub expected_bwd_bytes: f64,
}

/// Simulates one seeded uniform routing realization: each token draws `K`
/// distinct experts.
pub fn comm_simulate(cfg: CommConfig) -> Result<CommReport> {
    validate_comm(&cfg)?;
    let mut rng = SeededRng::new(cfg.seed);
    let selections: Vec<Vec<usize>> = (0..cfg.tokens)
        .map(|_| rng.distinct(cfg.n_experts, cfg.k))
        .collect();
    comm_from_selections(cfg, &selections)
}

fn validate_comm(cfg: &CommConfig) -> Result<()> {
    if cfg.ranks == 0 {
        return Err(invalid("communication model needs at least one rank"));
    }
    if cfg.k == 0 || cfg.k > cfg.n_experts {
        return Err(invalid(format!(
            "communication model needs 1 <= K <= N, got K={}, N={}",
            cfg.k, cfg.n_experts
        )));
    }
    Ok(())
}

/// Counts volumes for a given routing realization (one id list per token).
pub fn comm_from_selections(cfg: CommConfig, selections: &[Vec<usize>]) -> Result<CommReport> {
    validate_comm(&cfg)?;
    if selections.len() != cfg.tokens {
        return Err(invalid(format!(
            "{} selections for {} tokens",
            selections.len(),
            cfg.tokens
        )));
    }
    let row_bytes = (cfg.d * cfg.bytes_per_element) as u64;
    let mut fwd_bytes_per_rank = vec![0u64; cfg.ranks];
    let mut active = vec![false; cfg.n_experts];
    let mut tasks = 0u64;
    for (l, experts) in selections.iter().enumerate() {
        let home = cfg.token_rank(l);
        for &n in experts {
            if n >= cfg.n_experts {
                return Err(invalid(format!("expert {n} out of range {}", cfg.n_experts)));
            }
            tasks += 1;
            active[n] = true;
            let dest = cfg.expert_rank(n);
            if dest != home {
                fwd_bytes_per_rank[dest] += row_bytes;
            }
        }
    }
    let mut bwd_bytes_per_rank = vec![0u64; cfg.ranks];
    let mut n_active = 0u64;
    for (n, _) in active.iter().enumerate().filter(|(_, &a)| a) {
        n_active += 1;
        bwd_bytes_per_rank[cfg.expert_rank(n)] += 2 * row_bytes;
    }
    let expected_active = expected_active_experts(cfg.n_experts as u64, (cfg.tokens * cfg.k) as u64);
    Ok(CommReport {
        config: cfg,
        fwd_bytes: tasks * row_bytes,
        fwd_cross_rank_bytes: fwd_bytes_per_rank.iter().sum(),
        fwd_bytes_per_rank,
        bwd_bytes: bwd_bytes_per_rank.iter().sum(),
        bwd_bytes_per_rank,
        n_active,
        expected_active,
        expected_bwd_bytes: 2.0 * row_bytes as f64 * expected_active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn router_flops() {
        assert_eq!(flops_router_standard(1024, 1_000_000), 2_048_000_000);
        assert_eq!(flops_router_standard(1, 1), 2);
        assert_eq!(flops_router_standard(8, 16), 256);
        assert_eq!(flops_router_cartesian(16, 32, 32), 2048);
        assert_eq!(flops_router_cartesian(5, 1, 1), 20);
        assert_eq!(reduction_factor_for(16, 32, 32), 16.0);
    }

    #[test]
    fn reduction_factor_values() {
        assert_eq!(reduction_factor(1_000_000).unwrap(), 500.0);
        assert_eq!(reduction_factor(1).unwrap(), 0.5);
        assert_eq!(reduction_factor(1024).unwrap(), 16.0);
        assert!(reduction_factor(1000).is_err());
        for r in 1..300u64 {
            assert_eq!(reduction_factor(r * r).unwrap(), r as f64 / 2.0);
        }
    }

    #[test]
    fn selection_flops() {
        assert_eq!(flops_select(4096, 4096, 1).unwrap(), 4097);
        assert_eq!(flops_select(4096, 4096, 16).unwrap(), 65_792);
        assert!(flops_select(16, 2, 4).is_err());
        // the K² merge term never grows with the block size
        let merge = |b: u64| 100_000u64.div_ceil(b) * 16 * 16;
        for b in [16u64, 32, 100, 4096] {
            assert!(merge(2 * b) <= merge(b));
        }
    }

    #[test]
    fn traffic_model() {
        let t = traffic_formulas(8, 4, 2, 2).unwrap();
        assert_eq!((t.d_token, t.d_expert, t.eta), (128, 32, 4.0));
        assert_eq!(traffic_formulas(3, 5, 2, 10).unwrap().eta, 1.0);
        assert!(traffic_formulas(3, 5, 2, 0).is_err());
        assert!(traffic_formulas(3, 5, 2, 11).is_err());
        assert_eq!(traffic_formulas(3, 0, 2, 0).unwrap().eta, 0.0);
    }

    #[test]
    fn load_metric_closed_forms() {
        let s = load_stats(&[5; 64]).unwrap();
        assert_eq!(s.usage, 1.0);
        assert!(s.unevenness.abs() <= 1e-12);

        let mut one = vec![0u64; 64];
        one[17] = 9;
        let s = load_stats(&one).unwrap();
        assert_eq!(s.usage, 1.0 / 64.0);
        assert!((s.unevenness - 64f64.ln()).abs() <= 1e-12);
        assert!(load_stats(&[0, 0]).is_err());
    }

    #[test]
    fn expected_active_limits() {
        assert!((expected_active_experts(1 << 21, 1 << 14) - 16320.0).abs() < 5.0);
        assert!((expected_active_experts(10, 1_000_000) - 10.0).abs() < 1e-9);
        assert_eq!(expected_active_experts(100, 0), 0.0);
    }

    #[test]
    fn single_rank_has_no_cross_traffic() {
        let cfg = CommConfig { ranks: 1, n_experts: 4096, tokens: 64, k: 8, d: 16, bytes_per_element: 2, seed: 1 };
        let r = comm_simulate(cfg).unwrap();
        assert_eq!(r.fwd_cross_rank_bytes, 0);
        assert_eq!(r.fwd_bytes, 64 * 8 * 16 * 2);
        assert_eq!(r.bwd_bytes, 2 * 16 * 2 * r.n_active);
    }

    #[test]
    fn hand_placement() {
        // 2 ranks, experts {0,1} on rank 0 and {2,3} on rank 1
        let cfg = CommConfig { ranks: 2, n_experts: 4, tokens: 2, k: 2, d: 1, bytes_per_element: 1, seed: 0 };
        let r = comm_from_selections(cfg, &[vec![0, 3], vec![1, 3]]).unwrap();
        // token 0 on rank 0 sends to expert 3; token 1 on rank 1 sends to expert 1
        assert_eq!(r.fwd_bytes_per_rank, vec![1, 1]);
        assert_eq!(r.fwd_bytes, 4);
        assert_eq!(r.n_active, 3);
        assert_eq!(r.bwd_bytes_per_rank, vec![4, 2]);
    }

    #[test]
    fn backward_volume_tracks_expectation_and_bound() {
        let lk = 1u64 << 12;
        let mut prev = 0;
        for shift in 10..20 {
            let n = 1usize << shift;
            let cfg = CommConfig { ranks: 8, n_experts: n, tokens: 64, k: 64, d: 4, bytes_per_element: 2, seed: 5 };
            let r = comm_simulate(cfg).unwrap();
            let bound = 2 * 4 * 2 * lk;
            assert!(r.bwd_bytes <= bound);
            assert!(r.bwd_bytes >= prev, "non-monotone at N=2^{shift}");
            prev = r.bwd_bytes;
            // per-token draws are without replacement, so the i.i.d. curve is
            // only approximate near N ≈ L·K
            let rel = (r.n_active as f64 - r.expected_active).abs() / r.expected_active;
            assert!(rel < 0.03, "N=2^{shift}: {} vs {}", r.n_active, r.expected_active);
            if n as u64 >= 32 * lk {
                assert!(r.bwd_bytes as f64 >= 0.98 * bound as f64);
            }
        }
    }

    #[test]
    fn forward_volume_is_linear_in_tokens() {
        let base = CommConfig { ranks: 4, n_experts: 1 << 16, tokens: 128, k: 16, d: 8, bytes_per_element: 4, seed: 3 };
        let a = comm_simulate(base).unwrap();
        let b = comm_simulate(CommConfig { tokens: 256, ..base }).unwrap();
        assert_eq!(b.fwd_bytes, 2 * a.fwd_bytes);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn unevenness_is_bounded(counts in proptest::collection::vec(0u64..50, 1..300)) {
                prop_assume!(counts.iter().any(|&c| c > 0));
                let s = load_stats(&counts).unwrap();
                let ln_n = (counts.len() as f64).ln();
                prop_assert!(s.unevenness >= 0.0 && s.unevenness <= ln_n + 1e-12);
                prop_assert!((s.z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
