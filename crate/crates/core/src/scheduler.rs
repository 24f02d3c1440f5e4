//! Expert-centric scheduling.
//!
//! Routed work is flattened into `(token, expert, gate)` tasks. The unique
//! active experts, in ascending id order, are cut into contiguous groups of
//! `B`; the `τ`-th active expert belongs to group `⌊τ/B⌋`. Tasks are then
//! stably sorted by `(group, token)` and each group runs as one dense block
//! whose rows are scattered back into the output.
//!
//! [`execute_token_centric`] is the per-token oracle the grouped path is
//! checked against. Both executors report logical load counters
//! ([`Traffic`]), counted at each load site rather than derived from formulas.

use crate::error::{invalid, Error, Result};
use crate::experts::{assemble_forward, retrieve, ExpertStore};
use crate::router::RouterDecision;
use crate::tensor::{axpy, dot, Matrix, Scalar};

pub const DEFAULT_GROUP_SIZE: usize = 64;

const INACTIVE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Task<T> {
    pub token: usize,
    pub expert: usize,
    pub gate: T,
}

/// Token-major, k-minor flattening of the routing decisions.
pub fn flatten_tasks<T: Scalar>(decisions: &[RouterDecision<T>]) -> Vec<Task<T>> {
    decisions
        .iter()
        .enumerate()
        .flat_map(|(token, dec)| {
            dec.indices
                .iter()
                .zip(&dec.gates)
                .map(move |(&expert, &gate)| Task { token, expert, gate })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPlan {
    /// Unique selected expert ids, ascending.
    pub active_experts: Vec<usize>,
    pub group_size: usize,
    pub n_groups: usize,
    /// Task indices sorted by `(group, token)`, stable in the original order.
    pub task_order: Vec<usize>,
    /// `task_order[group_offsets[q]..group_offsets[q + 1]]` are the tasks of group `q`.
    pub group_offsets: Vec<usize>,
    /// Rank of each expert in `active_experts`, `u32::MAX` when inactive.
    expert_rank: Vec<u32>,
    n_tokens: usize,
}

impl GroupPlan {
    pub fn n_tasks(&self) -> usize {
        self.task_order.len()
    }

    pub fn n_experts(&self) -> usize {
        self.expert_rank.len()
    }

    /// Position `τ` of `expert` among the active experts.
    pub fn rank_of(&self, expert: usize) -> Option<usize> {
        match self.expert_rank.get(expert) {
            Some(&r) if r != INACTIVE => Some(r as usize),
            _ => None,
        }
    }

    pub fn group_of_expert(&self, expert: usize) -> Option<usize> {
        self.rank_of(expert).map(|tau| tau / self.group_size)
    }

    pub fn group_experts(&self, q: usize) -> &[usize] {
        let start = q * self.group_size;
        let end = (start + self.group_size).min(self.active_experts.len());
        &self.active_experts[start..end]
    }

    pub fn group_tasks(&self, q: usize) -> &[usize] {
        &self.task_order[self.group_offsets[q]..self.group_offsets[q + 1]]
    }
}

/// Builds the group plan for `tasks` over `n_experts` experts.
///
/// Sorting is two stable counting passes: first by token id, then by group
/// id. Tasks sharing both keys keep their flattened order. The token pass is
/// skipped when the tasks already arrive in token order.
pub fn build_plan<T: Scalar>(tasks: &[Task<T>], n_experts: usize, group_size: usize) -> Result<GroupPlan> {
    if group_size == 0 {
        return Err(invalid("group size B must be at least 1"));
    }
    if n_experts >= INACTIVE as usize {
        return Err(invalid(format!("too many experts for a plan: {n_experts}")));
    }
    let mut active = vec![false; n_experts];
    let mut n_tokens = 0;
    for t in tasks {
        if t.expert >= n_experts {
            return Err(Error::IndexOutOfRange {
                what: "task expert",
                index: t.expert,
                bound: n_experts,
            });
        }
        active[t.expert] = true;
        n_tokens = n_tokens.max(t.token + 1);
    }

    let mut expert_rank = vec![INACTIVE; n_experts];
    let mut active_experts = Vec::new();
    for (n, _) in active.iter().enumerate().filter(|(_, &a)| a) {
        expert_rank[n] = active_experts.len() as u32;
        active_experts.push(n);
    }
    let n_groups = active_experts.len().div_ceil(group_size);

    let group_of = |t: &Task<T>| expert_rank[t.expert] as usize / group_size;
    let identity: Vec<usize> = (0..tasks.len()).collect();
    // flattened tasks are already token-major, making the first pass a no-op
    let by_token = if tasks.windows(2).all(|w| w[0].token <= w[1].token) {
        identity
    } else {
        counting_sort(identity, n_tokens, |i| tasks[i].token)
    };
    let task_order = counting_sort(by_token, n_groups, |i| group_of(&tasks[i]));

    let mut group_offsets = vec![0; n_groups + 1];
    for t in tasks {
        group_offsets[group_of(t) + 1] += 1;
    }
    for q in 0..n_groups {
        group_offsets[q + 1] += group_offsets[q];
    }

    Ok(GroupPlan {
        active_experts,
        group_size,
        n_groups,
        task_order,
        group_offsets,
        expert_rank,
        n_tokens,
    })
}

/// Stable counting sort of `items` by `key(item) < n_keys`.
fn counting_sort(items: Vec<usize>, n_keys: usize, key: impl Fn(usize) -> usize) -> Vec<usize> {
    let mut starts = vec![0usize; n_keys + 1];
    for &i in &items {
        starts[key(i) + 1] += 1;
    }
    for b in 0..n_keys {
        starts[b + 1] += starts[b];
    }
    let mut out = vec![0; items.len()];
    for &i in &items {
        let k = key(i);
        out[starts[k]] = i;
        starts[k] += 1;
    }
    out
}

/// Dense operands for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch<T> {
    /// Stacked token rows, `T_q × d`.
    pub x_q: Matrix<T>,
    /// Gate mask, `T_q × B_q`.
    pub g_q: Matrix<T>,
    /// Group expert rows in ascending id order, `B_q × d`.
    pub w_q: Matrix<T>,
    pub v_q: Matrix<T>,
    /// Token id of each row of `x_q`.
    pub tokens: Vec<usize>,
    pub experts: Vec<usize>,
}

impl<T: Scalar> GroupBatch<T> {
    pub fn n_rows(&self) -> usize {
        self.tokens.len()
    }

    /// Non-zero entries of `g_q`.
    pub fn nonzeros(&self) -> usize {
        self.g_q.data().iter().filter(|&&v| v != T::zero()).count()
    }
}

fn check_plan<T>(plan: &GroupPlan, tasks: &[Task<T>], x_rows: usize) -> Result<()> {
    if plan.n_tasks() != tasks.len() {
        return Err(invalid(format!(
            "plan covers {} tasks but {} were supplied",
            plan.n_tasks(),
            tasks.len()
        )));
    }
    if plan.n_tokens > x_rows {
        return Err(invalid(format!(
            "plan references token {} but the batch has {x_rows} rows",
            plan.n_tokens - 1
        )));
    }
    Ok(())
}

fn check_store<T: Scalar>(plan: &GroupPlan, store: &ExpertStore<T>, x: &Matrix<T>) -> Result<()> {
    if plan.n_experts() != store.n_experts() {
        return Err(invalid(format!(
            "plan built for {} experts, store holds {}",
            plan.n_experts(),
            store.n_experts()
        )));
    }
    if x.cols() != store.d() {
        return Err(Error::ShapeMismatch {
            op: "grouped execution",
            left: x.shape(),
            right: store.w_in.shape(),
        });
    }
    Ok(())
}

/// Gathers the dense operands of group `q`.
///
/// Without coalescing every task is one row of `x_q` with a single gate in
/// `g_q`. With coalescing, consecutive tasks of the same token share a row.
pub fn gather_group<T: Scalar>(
    plan: &GroupPlan,
    q: usize,
    store: &ExpertStore<T>,
    x: &Matrix<T>,
    tasks: &[Task<T>],
    coalesce: bool,
) -> Result<GroupBatch<T>> {
    if q >= plan.n_groups {
        return Err(Error::IndexOutOfRange {
            what: "group",
            index: q,
            bound: plan.n_groups,
        });
    }
    check_plan(plan, tasks, x.rows())?;
    check_store(plan, store, x)?;
    let experts = plan.group_experts(q).to_vec();
    let (w_q, v_q) = retrieve(store, &experts)?;
    let first_rank = q * plan.group_size;

    let mut tokens: Vec<usize> = Vec::new();
    let mut gate_rows: Vec<Vec<T>> = Vec::new();
    for &ti in plan.group_tasks(q) {
        let task = &tasks[ti];
        let col = plan.rank_of(task.expert).expect("task expert is active") - first_rank;
        if !(coalesce && tokens.last() == Some(&task.token)) {
            tokens.push(task.token);
            gate_rows.push(vec![T::zero(); experts.len()]);
        }
        gate_rows.last_mut().expect("row pushed")[col] = task.gate;
    }
    let rows: Vec<Vec<T>> = tokens.iter().map(|&l| x.row(l).to_vec()).collect();
    let x_q = if rows.is_empty() {
        Matrix::zeros(0, x.cols())
    } else {
        Matrix::from_rows(&rows)?
    };
    let g_q = if gate_rows.is_empty() {
        Matrix::zeros(0, experts.len())
    } else {
        Matrix::from_rows(&gate_rows)?
    };
    Ok(GroupBatch {
        x_q,
        g_q,
        w_q,
        v_q,
        tokens,
        experts,
    })
}

/// Logical load and arithmetic counters of one executor run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    /// Expert parameter elements read (rows of `W` and `V`).
    pub param_elements_loaded: u64,
    /// Token elements read.
    pub token_elements_loaded: u64,
    /// Floating-point operations, counting a multiply-add as two.
    pub flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupedKernel {
    /// Each task evaluates only its own column of the group block; masked
    /// columns would contribute exact zeros.
    #[default]
    Masked,
    /// Literal `(G_q ⊙ act(X_q W_qᵀ)) V_q` on the full block.
    Dense,
    /// Dense, with tasks of the same token merged into one row.
    DenseCoalesced,
}

/// Grouped execution of the routed branch, returned with its load counters.
///
/// Output rows accumulate in plan order: groups ascending, then tasks in
/// sorted order within each group.
pub fn execute_grouped<T: Scalar>(
    plan: &GroupPlan,
    store: &ExpertStore<T>,
    x: &Matrix<T>,
    tasks: &[Task<T>],
    kernel: GroupedKernel,
) -> Result<(Matrix<T>, Traffic)> {
    check_plan(plan, tasks, x.rows())?;
    check_store(plan, store, x)?;
    for t in tasks {
        if plan.rank_of(t.expert).is_none() {
            return Err(invalid(format!("task expert {} is not in the plan", t.expert)));
        }
    }
    let d = store.d();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut traffic = Traffic::default();
    match kernel {
        GroupedKernel::Masked => {
            let act = store.activation;
            let mut w_q: Vec<T> = Vec::with_capacity(plan.group_size * d);
            let mut v_q: Vec<T> = Vec::with_capacity(plan.group_size * d);
            for q in 0..plan.n_groups {
                let experts = plan.group_experts(q);
                w_q.clear();
                v_q.clear();
                for &n in experts {
                    w_q.extend_from_slice(store.w_in.row(n));
                    v_q.extend_from_slice(store.w_out.row(n));
                }
                traffic.param_elements_loaded += 2 * (d * experts.len()) as u64;
                let first_rank = q * plan.group_size;
                let mut last_token = usize::MAX;
                for &ti in plan.group_tasks(q) {
                    let task = &tasks[ti];
                    if task.token != last_token {
                        traffic.token_elements_loaded += d as u64;
                        last_token = task.token;
                    }
                    let col = plan.expert_rank[task.expert] as usize - first_rank;
                    let w = &w_q[col * d..(col + 1) * d];
                    let v = &v_q[col * d..(col + 1) * d];
                    let a = task.gate * act.apply(dot(x.row(task.token), w));
                    axpy(a, v, out.row_mut(task.token));
                    traffic.flops += 4 * d as u64;
                }
            }
        }
        GroupedKernel::Dense | GroupedKernel::DenseCoalesced => {
            let coalesce = kernel == GroupedKernel::DenseCoalesced;
            for q in 0..plan.n_groups {
                let batch = gather_group(plan, q, store, x, tasks, coalesce)?;
                let b_q = batch.experts.len();
                traffic.param_elements_loaded += 2 * (d * b_q) as u64;
                traffic.token_elements_loaded += (d * batch.n_rows()) as u64;
                traffic.flops += 4 * (batch.n_rows() * b_q * d) as u64;
                let o_q = group_output(&batch, store.activation)?;
                for (r, &l) in batch.tokens.iter().enumerate() {
                    axpy(T::one(), o_q.row(r), out.row_mut(l));
                }
            }
        }
    }
    Ok((out, traffic))
}

/// `O_q = (G_q ⊙ act(X_q W_qᵀ)) V_q`
pub fn group_output<T: Scalar>(batch: &GroupBatch<T>, act: crate::experts::Activation) -> Result<Matrix<T>> {
    let pre = batch.x_q.matmul_transposed(&batch.w_q)?;
    let mut h = pre.map(|z| act.apply(z));
    h.data_mut()
        .iter_mut()
        .zip(batch.g_q.data())
        .for_each(|(a, &g)| *a = g * *a);
    h.matmul(&batch.v_q)
}

/// Per-token oracle: each token retrieves its own expert rows and assembles.
pub fn execute_token_centric<T: Scalar>(
    decisions: &[RouterDecision<T>],
    store: &ExpertStore<T>,
    x: &Matrix<T>,
) -> Result<(Matrix<T>, Traffic)> {
    if decisions.len() != x.rows() {
        return Err(invalid(format!(
            "{} decisions for a batch of {} tokens",
            decisions.len(),
            x.rows()
        )));
    }
    if x.cols() != store.d() {
        return Err(Error::ShapeMismatch {
            op: "execute_token_centric",
            left: x.shape(),
            right: store.w_in.shape(),
        });
    }
    let d = store.d() as u64;
    let mut out = Matrix::zeros(x.rows(), store.d());
    let mut traffic = Traffic::default();
    for (l, dec) in decisions.iter().enumerate() {
        let (w_x, v_x) = retrieve(store, &dec.indices)?;
        traffic.param_elements_loaded += 2 * d * dec.k() as u64;
        traffic.token_elements_loaded += d;
        traffic.flops += 4 * d * dec.k() as u64;
        let y = assemble_forward(x.row(l), &w_x, &v_x, &dec.gates, store.activation)?;
        out.row_mut(l).copy_from_slice(&y);
    }
    Ok((out, traffic))
}
