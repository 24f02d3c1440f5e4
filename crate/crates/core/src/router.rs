//! Factorized grid router.
//!
//! Expert `n` lives at grid cell `(n / N_c, n % N_c)`. A token is projected
//! onto row and column logits, each normalized with log-softmax, and the score
//! of cell `(i, j)` is `p_r[i] + p_c[j]`. The `N_r × N_c` score matrix is only
//! ever materialized by [`topk_bruteforce`], which exists as an oracle.
//!
//! All selectors share one strict total order: higher score first, then lower
//! flat id. Scores are compared with IEEE total ordering, so the order is
//! well-defined even for signed zeros.

use std::cmp::Ordering;

use crate::error::{invalid, Error, Result};
use crate::tensor::{log_softmax, rng_normal, softmax, Matrix, Scalar, SeededRng};

/// Default block size for tiled selection.
pub const DEFAULT_SELECT_BLOCK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams<T> {
    /// `d × N_r`
    pub w_row: Matrix<T>,
    /// `d × N_c`
    pub w_col: Matrix<T>,
}

impl<T: Scalar> RouterParams<T> {
    pub fn new(w_row: Matrix<T>, w_col: Matrix<T>) -> Result<Self> {
        if w_row.rows() != w_col.rows() {
            return Err(Error::ShapeMismatch {
                op: "RouterParams::new",
                left: w_row.shape(),
                right: w_col.shape(),
            });
        }
        if w_row.cols() == 0 || w_col.cols() == 0 {
            return Err(invalid("router grid needs N_r >= 1 and N_c >= 1"));
        }
        Ok(Self { w_row, w_col })
    }

    pub fn init(rng: &mut SeededRng, d: usize, n_rows: usize, n_cols: usize, std: f64) -> Result<Self> {
        let w_row = rng_normal(rng, d, n_rows, std)?;
        let w_col = rng_normal(rng, d, n_cols, std)?;
        Self::new(w_row, w_col)
    }

    pub fn d(&self) -> usize {
        self.w_row.rows()
    }

    pub fn n_rows(&self) -> usize {
        self.w_row.cols()
    }

    pub fn n_cols(&self) -> usize {
        self.w_col.cols()
    }

    pub fn n_experts(&self) -> usize {
        self.n_rows() * self.n_cols()
    }

    pub fn cast<U: Scalar>(&self) -> RouterParams<U> {
        RouterParams {
            w_row: self.w_row.cast(),
            w_col: self.w_col.cast(),
        }
    }
}

/// Balanced grid for `n` experts when `n` is a perfect square.
pub fn suggest_grid(n: usize) -> Option<(usize, usize)> {
    let r = (n as f64).sqrt().round() as usize;
    (r >= 1 && r * r == n).then_some((r, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridCoord {
    pub row: usize,
    pub col: usize,
}

impl GridCoord {
    pub fn from_flat(n: usize, n_cols: usize) -> Self {
        Self {
            row: n / n_cols,
            col: n % n_cols,
        }
    }

    pub fn flat(self, n_cols: usize) -> usize {
        self.row * n_cols + self.col
    }
}

/// Routing result for one token. Entries are stored best-first.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterDecision<T> {
    pub indices: Vec<usize>,
    pub gates: Vec<T>,
    pub scores: Vec<T>,
}

impl<T: Scalar> RouterDecision<T> {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Builds a decision from selected scores, deriving gates by softmax.
    pub fn from_topk(top: TopK<T>) -> Result<Self> {
        let gates = gates_from_scores(&top.scores)?;
        Ok(Self {
            indices: top.indices,
            gates,
            scores: top.scores,
        })
    }
}

/// Selected flat ids with their implicit scores, best-first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK<T> {
    pub indices: Vec<usize>,
    pub scores: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    /// Block-wise merge selection with the given block size.
    Tiled { block: usize },
    /// Search restricted to the top-K rows × top-K columns candidate grid.
    Subgrid,
    BruteForce,
}

impl Default for Selector {
    fn default() -> Self {
        Selector::Tiled {
            block: DEFAULT_SELECT_BLOCK,
        }
    }
}

/// Row and column logits `x·W_r`, `x·W_c`.
pub fn project<T: Scalar>(x: &[T], params: &RouterParams<T>) -> Result<(Vec<T>, Vec<T>)> {
    Ok((params.w_row.vec_mul(x)?, params.w_col.vec_mul(x)?))
}

/// Multiply-add count of [`project`] for one token: `2·d·(N_r + N_c)`.
pub fn projection_flops(d: usize, n_rows: usize, n_cols: usize) -> u64 {
    2 * d as u64 * (n_rows + n_cols) as u64
}

pub fn log_marginals<T: Scalar>(s_row: &[T], s_col: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    Ok((log_softmax(s_row)?, log_softmax(s_col)?))
}

pub fn implicit_score<T: Scalar>(p_row: &[T], p_col: &[T], coord: GridCoord) -> Result<T> {
    let r = *p_row.get(coord.row).ok_or(Error::IndexOutOfRange {
        what: "grid row",
        index: coord.row,
        bound: p_row.len(),
    })?;
    let c = *p_col.get(coord.col).ok_or(Error::IndexOutOfRange {
        what: "grid column",
        index: coord.col,
        bound: p_col.len(),
    })?;
    Ok(r + c)
}

/// `a` ranks strictly before `b`: higher score, then lower id.
#[inline]
pub fn ranks_before<T: Scalar>(a: (T, usize), b: (T, usize)) -> bool {
    rank_order(a, b) == Ordering::Less
}

#[inline]
fn rank_order<T: Scalar>(a: (T, usize), b: (T, usize)) -> Ordering {
    b.0.as_f64()
        .total_cmp(&a.0.as_f64())
        .then_with(|| a.1.cmp(&b.1))
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(invalid(format!("top-k requires 1 <= K <= N, got K={k}, N={n}")));
    }
    Ok(())
}

fn check_marginals<T>(p_row: &[T], p_col: &[T]) -> Result<()> {
    if p_row.is_empty() {
        return Err(Error::Empty { op: "top-k (rows)" });
    }
    if p_col.is_empty() {
        return Err(Error::Empty { op: "top-k (columns)" });
    }
    Ok(())
}

/// Materializes every score, sorts them, keeps the first `k`.
pub fn topk_bruteforce<T: Scalar>(p_row: &[T], p_col: &[T], k: usize) -> Result<TopK<T>> {
    check_marginals(p_row, p_col)?;
    let n_cols = p_col.len();
    check_k(k, p_row.len() * n_cols)?;
    let mut all: Vec<(T, usize)> = Vec::with_capacity(p_row.len() * n_cols);
    for (i, &r) in p_row.iter().enumerate() {
        for (j, &c) in p_col.iter().enumerate() {
            all.push((r + c, i * n_cols + j));
        }
    }
    all.sort_unstable_by(|&a, &b| rank_order(a, b));
    all.truncate(k);
    Ok(unzip(all))
}

fn unzip<T>(v: Vec<(T, usize)>) -> TopK<T> {
    let (scores, indices) = v.into_iter().unzip();
    TopK { indices, scores }
}

/// Fixed-capacity buffer kept sorted under the ranking order.
struct TopKBuffer<T> {
    cap: usize,
    items: Vec<(T, usize)>,
}

impl<T: Scalar> TopKBuffer<T> {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            items: Vec::with_capacity(cap + 1),
        }
    }

    /// Insertion step; returns false when the candidate did not enter.
    fn insert(&mut self, cand: (T, usize)) -> bool {
        if self.items.len() == self.cap {
            match self.items.last() {
                Some(&last) if ranks_before(cand, last) => {}
                _ => return false,
            }
        }
        let mut pos = self.items.len();
        while pos > 0 && ranks_before(cand, self.items[pos - 1]) {
            pos -= 1;
        }
        self.items.insert(pos, cand);
        self.items.truncate(self.cap);
        true
    }
}

/// Block-wise merge selection.
///
/// The flat id space is cut into blocks of `block` ids. Within a block the
/// local top-K is extracted by `K` rounds of max-reduction, each round taking
/// the best score ranked strictly after the previous round's winner. Local
/// winners are then inserted into a global sorted buffer of capacity `K`.
pub fn topk_tiled<T: Scalar>(p_row: &[T], p_col: &[T], k: usize, block: usize) -> Result<TopK<T>> {
    check_marginals(p_row, p_col)?;
    let n_cols = p_col.len();
    let n = p_row.len() * n_cols;
    check_k(k, n)?;
    if block < k {
        return Err(invalid(format!(
            "tiled selection needs block size >= K, got block={block}, K={k}"
        )));
    }

    let mut global = TopKBuffer::new(k);
    let mut local: Vec<(T, usize)> = Vec::with_capacity(k);
    let mut start = 0;
    while start < n {
        let end = (start + block).min(n);
        local.clear();
        let mut prev: Option<(T, usize)> = None;
        for _ in 0..k.min(end - start) {
            let mut best: Option<(T, usize)> = None;
            let (mut i, mut j) = (start / n_cols, start % n_cols);
            for id in start..end {
                let cand = (p_row[i] + p_col[j], id);
                let after_prev = prev.is_none_or(|p| ranks_before(p, cand));
                if after_prev && best.is_none_or(|b| ranks_before(cand, b)) {
                    best = Some(cand);
                }
                j += 1;
                if j == n_cols {
                    j = 0;
                    i += 1;
                }
            }
            // a block of length >= rounds always yields a winner
            let best = best.expect("non-empty block");
            local.push(best);
            prev = Some(best);
        }
        for &cand in &local {
            // local winners are sorted, so later ones cannot enter either
            if !global.insert(cand) {
                break;
            }
        }
        start = end;
    }
    Ok(unzip(global.items))
}

/// Top `k` positions of `v` under the ranking order.
fn top_positions<T: Scalar>(v: &[T], k: usize) -> Vec<usize> {
    let mut buf = TopKBuffer::new(k.min(v.len()));
    for (i, &s) in v.iter().enumerate() {
        buf.insert((s, i));
    }
    buf.items.into_iter().map(|(_, i)| i).collect()
}

/// Selection over the candidate grid spanned by the best `K` rows and best
/// `K` columns.
///
/// Every global top-K cell lies in that grid for exact arithmetic. Because
/// rounded sums can tie across rows that differ in their marginals, the
/// candidate sets are then widened with any row (column) whose best possible
/// cell still reaches the K-th candidate score; rounding is monotone, so the
/// widened grid is guaranteed to contain the exact answer.
pub fn topk_subgrid<T: Scalar>(p_row: &[T], p_col: &[T], k: usize) -> Result<TopK<T>> {
    check_marginals(p_row, p_col)?;
    let n_cols = p_col.len();
    check_k(k, p_row.len() * n_cols)?;

    let mut rows = top_positions(p_row, k);
    let mut cols = top_positions(p_col, k);
    let best_row = p_row[rows[0]];
    let best_col = p_col[cols[0]];

    let select = |rows: &[usize], cols: &[usize]| {
        let mut buf = TopKBuffer::new(k);
        for &i in rows {
            for &j in cols {
                buf.insert((p_row[i] + p_col[j], i * n_cols + j));
            }
        }
        buf.items
    };

    let first = select(&rows, &cols);
    let threshold = first[k - 1].0.as_f64();
    let reaches = |s: T| s.as_f64().total_cmp(&threshold) != Ordering::Less;

    let mut widened = false;
    let row_set: Vec<bool> = mark(&rows, p_row.len());
    for (i, &r) in p_row.iter().enumerate() {
        if !row_set[i] && reaches(r + best_col) {
            rows.push(i);
            widened = true;
        }
    }
    let col_set: Vec<bool> = mark(&cols, n_cols);
    for (j, &c) in p_col.iter().enumerate() {
        if !col_set[j] && reaches(best_row + c) {
            cols.push(j);
            widened = true;
        }
    }
    let items = if widened { select(&rows, &cols) } else { first };
    Ok(unzip(items))
}

fn mark(ids: &[usize], n: usize) -> Vec<bool> {
    let mut m = vec![false; n];
    ids.iter().for_each(|&i| m[i] = true);
    m
}

pub fn select_topk<T: Scalar>(p_row: &[T], p_col: &[T], k: usize, selector: Selector) -> Result<TopK<T>> {
    match selector {
        Selector::Tiled { block } => topk_tiled(p_row, p_col, k, block),
        Selector::Subgrid => topk_subgrid(p_row, p_col, k),
        Selector::BruteForce => topk_bruteforce(p_row, p_col, k),
    }
}

/// Softmax over the selected scores.
pub fn gates_from_scores<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    softmax(scores)
}

/// Per-token intermediate values of the router, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TokenRouting<T> {
    pub p_row: Vec<T>,
    pub p_col: Vec<T>,
    pub decision: RouterDecision<T>,
}

pub fn route_token<T: Scalar>(
    x: &[T],
    params: &RouterParams<T>,
    k: usize,
    selector: Selector,
) -> Result<TokenRouting<T>> {
    let (s_row, s_col) = project(x, params)?;
    let (p_row, p_col) = log_marginals(&s_row, &s_col)?;
    let top = select_topk(&p_row, &p_col, k, selector)?;
    Ok(TokenRouting {
        decision: RouterDecision::from_topk(top)?,
        p_row,
        p_col,
    })
}

#[derive(Debug, Clone)]
pub struct RoutedBatch<T> {
    pub decisions: Vec<RouterDecision<T>>,
    /// How often each expert was selected in this batch.
    pub counts: Vec<u64>,
    /// Multiply-adds spent in the row/column projections, ×2.
    pub projection_flops: u64,
}

pub fn route_batch<T: Scalar>(
    x: &Matrix<T>,
    params: &RouterParams<T>,
    k: usize,
    selector: Selector,
) -> Result<RoutedBatch<T>> {
    if x.cols() != params.d() {
        return Err(Error::ShapeMismatch {
            op: "route_batch",
            left: x.shape(),
            right: params.w_row.shape(),
        });
    }
    let mut counts = vec![0u64; params.n_experts()];
    let mut decisions = Vec::with_capacity(x.rows());
    for l in 0..x.rows() {
        let routed = route_token(x.row(l), params, k, selector)?;
        for &n in &routed.decision.indices {
            counts[n] += 1;
        }
        decisions.push(routed.decision);
    }
    Ok(RoutedBatch {
        decisions,
        counts,
        projection_flops: x.rows() as u64 * projection_flops(params.d(), params.n_rows(), params.n_cols()),
    })
}
