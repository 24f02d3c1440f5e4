//! Backward pass of the layer with top-K selection held fixed, central
//! finite-difference verification and a small SGD trainer.
//!
//! Everything here runs in `f64`.

use std::collections::BTreeMap;

use crate::analysis::{load_stats, LoadStats};
use crate::error::{invalid, Error, Result};
use crate::experts::{Activation, Executor, ForwardOptions, LayerDims, OmniLayer};
use crate::router::{
    gates_from_scores, log_marginals, project, route_batch, GridCoord, RouterDecision, Selector,
};
use crate::scheduler::DEFAULT_GROUP_SIZE;
use crate::tensor::{axpy, dot, rng_normal, Matrix, SeededRng};

/// Whether gate gradients propagate into the router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateGradient {
    /// Through the gate softmax, the log-marginals and both projections.
    #[default]
    Router,
    /// Gates are constants (externally chosen routing).
    Frozen,
}

/// Gradients of every parameter group and of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub dx: Matrix<f64>,
    /// Rows of `dW`, keyed by expert id; absent rows are exactly zero.
    pub dw_rows: BTreeMap<usize, Vec<f64>>,
    pub dv_rows: BTreeMap<usize, Vec<f64>>,
    pub dw_row: Matrix<f64>,
    pub dw_col: Matrix<f64>,
    pub d_gate: Matrix<f64>,
    pub d_up: Matrix<f64>,
    pub d_down: Matrix<f64>,
}

impl LayerGrads {
    fn zeros(layer: &OmniLayer<f64>, tokens: usize) -> Self {
        let dims = layer.dims();
        Self {
            dx: Matrix::zeros(tokens, dims.d),
            dw_rows: BTreeMap::new(),
            dv_rows: BTreeMap::new(),
            dw_row: Matrix::zeros(dims.d, dims.n_rows),
            dw_col: Matrix::zeros(dims.d, dims.n_cols),
            d_gate: Matrix::zeros(dims.d, dims.d_ffn),
            d_up: Matrix::zeros(dims.d, dims.d_ffn),
            d_down: Matrix::zeros(dims.d_ffn, dims.d),
        }
    }

    pub fn dw_dense(&self, n_experts: usize) -> Matrix<f64> {
        densify(&self.dw_rows, n_experts, self.dx.cols())
    }

    pub fn dv_dense(&self, n_experts: usize) -> Matrix<f64> {
        densify(&self.dv_rows, n_experts, self.dx.cols())
    }
}

fn densify(rows: &BTreeMap<usize, Vec<f64>>, n: usize, d: usize) -> Matrix<f64> {
    let mut m = Matrix::zeros(n, d);
    for (&i, r) in rows {
        m.row_mut(i).copy_from_slice(r);
    }
    m
}

fn check_decisions(
    layer: &OmniLayer<f64>,
    x: &Matrix<f64>,
    decisions: &[RouterDecision<f64>],
    gates: GateGradient,
) -> Result<()> {
    if decisions.len() != x.rows() {
        return Err(invalid(format!(
            "{} decisions for a batch of {} tokens",
            decisions.len(),
            x.rows()
        )));
    }
    let n = layer.store.n_experts();
    for (l, dec) in decisions.iter().enumerate() {
        if dec.gates.len() != dec.k() || dec.scores.len() != dec.k() {
            return Err(invalid(format!("token {l}: malformed decision")));
        }
        if let Some(&bad) = dec.indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { what: "expert", index: bad, bound: n });
        }
        if gates == GateGradient::Frozen {
            continue;
        }
        if dec.k() != layer.k {
            return Err(invalid(format!("token {l}: decision has K={}, layer has K={}", dec.k(), layer.k)));
        }
        let (s_r, s_c) = project(x.row(l), &layer.router)?;
        let (p_r, p_c) = log_marginals(&s_r, &s_c)?;
        for (&i, &s) in dec.indices.iter().zip(&dec.scores) {
            let c = GridCoord::from_flat(i, p_c.len());
            let expect = p_r[c.row] + p_c[c.col];
            if (expect - s).abs() > 1e-9 * (1.0 + s.abs()) {
                return Err(invalid(format!(
                    "token {l}: decision score {s} for expert {i} does not match the input ({expect})"
                )));
            }
        }
    }
    Ok(())
}

/// Gradients of `Σ⟨dY, layer(X)⟩` with the selected index sets held fixed.
pub fn layer_backward(
    layer: &OmniLayer<f64>,
    x: &Matrix<f64>,
    decisions: &[RouterDecision<f64>],
    dy: &Matrix<f64>,
    gates: GateGradient,
) -> Result<LayerGrads> {
    let d = layer.store.d();
    if x.cols() != d {
        return Err(Error::ShapeMismatch { op: "layer_backward", left: x.shape(), right: (x.rows(), d) });
    }
    if dy.shape() != x.shape() {
        return Err(Error::ShapeMismatch { op: "layer_backward", left: dy.shape(), right: x.shape() });
    }
    check_decisions(layer, x, decisions, gates)?;

    let act = layer.store.activation;
    let n_cols = layer.router.n_cols();
    let mut g = LayerGrads::zeros(layer, x.rows());
    for (l, dec) in decisions.iter().enumerate() {
        let xr = x.row(l);
        let dyr = dy.row(l);
        let mut dx = vec![0.0; d];

        // routed experts
        let mut dgate = Vec::with_capacity(dec.k());
        for (&n, &gk) in dec.indices.iter().zip(&dec.gates) {
            let w = layer.store.w_in.row(n);
            let v = layer.store.w_out.row(n);
            let z = dot(xr, w);
            let a = act.apply(z);
            let v_dy = dot(v, dyr);
            axpy(gk * a, dyr, g.dv_rows.entry(n).or_insert_with(|| vec![0.0; d]));
            let dz = gk * v_dy * act.grad(z);
            axpy(dz, xr, g.dw_rows.entry(n).or_insert_with(|| vec![0.0; d]));
            axpy(dz, w, &mut dx);
            dgate.push(a * v_dy);
        }

        if gates == GateGradient::Router {
            let mean: f64 = dec.gates.iter().zip(&dgate).map(|(&gk, &dg)| gk * dg).sum();
            let mut dp_r = vec![0.0; layer.router.n_rows()];
            let mut dp_c = vec![0.0; n_cols];
            for ((&n, &gk), &dg) in dec.indices.iter().zip(&dec.gates).zip(&dgate) {
                let ds = gk * (dg - mean);
                let c = GridCoord::from_flat(n, n_cols);
                dp_r[c.row] += ds;
                dp_c[c.col] += ds;
            }
            let (s_r, s_c) = project(xr, &layer.router)?;
            let (p_r, p_c) = log_marginals(&s_r, &s_c)?;
            let ds_r = log_softmax_backward(&p_r, &dp_r);
            let ds_c = log_softmax_backward(&p_c, &dp_c);
            accumulate_projection(&layer.router.w_row, &mut g.dw_row, xr, &ds_r, &mut dx);
            accumulate_projection(&layer.router.w_col, &mut g.dw_col, xr, &ds_c, &mut dx);
        }

        // shared MLP
        let sh = &layer.shared;
        let h_g = sh.w_gate.vec_mul(xr)?;
        let h_u = sh.w_up.vec_mul(xr)?;
        let sact = sh.activation;
        let m: Vec<f64> = h_g.iter().zip(&h_u).map(|(&a, &b)| sact.apply(a) * b).collect();
        let dm: Vec<f64> = (0..sh.d_ffn()).map(|f| dot(sh.w_down.row(f), dyr)).collect();
        for (f, &mf) in m.iter().enumerate() {
            axpy(mf, dyr, g.d_down.row_mut(f));
        }
        let dh_u: Vec<f64> = dm.iter().zip(&h_g).map(|(&a, &hg)| a * sact.apply(hg)).collect();
        let dh_g: Vec<f64> = dm
            .iter()
            .zip(&h_g)
            .zip(&h_u)
            .map(|((&a, &hg), &hu)| a * hu * sact.grad(hg))
            .collect();
        accumulate_projection(&sh.w_up, &mut g.d_up, xr, &dh_u, &mut dx);
        accumulate_projection(&sh.w_gate, &mut g.d_gate, xr, &dh_g, &mut dx);

        g.dx.row_mut(l).copy_from_slice(&dx);
    }
    Ok(g)
}

/// `ds = dp − softmax(s)·Σdp`, using `p = log_softmax(s)`.
fn log_softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let total: f64 = dp.iter().sum();
    p.iter().zip(dp).map(|(&pi, &dpi)| dpi - pi.exp() * total).collect()
}

/// For `h = x·M`: `dM += xᵀ·dh` and `dx += M·dh`.
fn accumulate_projection(m: &Matrix<f64>, dm: &mut Matrix<f64>, x: &[f64], dh: &[f64], dx: &mut [f64]) {
    for (a, &xa) in x.iter().enumerate() {
        axpy(xa, dh, dm.row_mut(a));
        dx[a] += dot(m.row(a), dh);
    }
}

/// `θ ← θ − lr·∇θ` for every parameter group; sparse rows in place.
pub fn sgd_step(layer: &mut OmniLayer<f64>, grads: &LayerGrads, lr: f64) -> Result<()> {
    if !lr.is_finite() {
        return Err(invalid(format!("learning rate must be finite, got {lr}")));
    }
    let dims = layer.dims();
    let dense = [
        (&grads.dw_row, layer.router.w_row.shape()),
        (&grads.dw_col, layer.router.w_col.shape()),
        (&grads.d_gate, layer.shared.w_gate.shape()),
        (&grads.d_up, layer.shared.w_up.shape()),
        (&grads.d_down, layer.shared.w_down.shape()),
    ];
    for (gm, shape) in dense {
        if gm.shape() != shape {
            return Err(Error::ShapeMismatch { op: "sgd_step", left: gm.shape(), right: shape });
        }
    }
    for rows in [&grads.dw_rows, &grads.dv_rows] {
        for (&n, r) in rows {
            if n >= dims.n_experts() || r.len() != dims.d {
                return Err(invalid(format!("gradient row {n} does not fit the expert store")));
            }
        }
    }
    let step = |p: &mut [f64], gr: &[f64]| axpy(-lr, gr, p);
    for (&n, r) in &grads.dw_rows {
        step(layer.store.w_in.row_mut(n), r);
    }
    for (&n, r) in &grads.dv_rows {
        step(layer.store.w_out.row_mut(n), r);
    }
    step(layer.router.w_row.data_mut(), grads.dw_row.data());
    step(layer.router.w_col.data_mut(), grads.dw_col.data());
    step(layer.shared.w_gate.data_mut(), grads.d_gate.data());
    step(layer.shared.w_up.data_mut(), grads.d_up.data());
    step(layer.shared.w_down.data_mut(), grads.d_down.data());
    Ok(())
}

/// Mean squared error over all elements, with its gradient w.r.t. `y`.
pub fn mse_loss(y: &Matrix<f64>, target: &Matrix<f64>) -> Result<(f64, Matrix<f64>)> {
    if y.shape() != target.shape() {
        return Err(Error::ShapeMismatch { op: "mse_loss", left: y.shape(), right: target.shape() });
    }
    let count = y.data().len().max(1) as f64;
    let diff: Vec<f64> = y.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
    let loss = diff.iter().map(|e| e * e).sum::<f64>() / count;
    let grad = Matrix::from_vec(y.rows(), y.cols(), diff.iter().map(|e| 2.0 * e / count).collect())?;
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// finite differences

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    ExpertIn,
    ExpertOut,
    RouterRow,
    RouterCol,
    SharedGate,
    SharedUp,
    SharedDown,
    Input,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::ExpertIn,
        ParamGroup::ExpertOut,
        ParamGroup::RouterRow,
        ParamGroup::RouterCol,
        ParamGroup::SharedGate,
        ParamGroup::SharedUp,
        ParamGroup::SharedDown,
        ParamGroup::Input,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::ExpertIn => "W",
            ParamGroup::ExpertOut => "V",
            ParamGroup::RouterRow => "W_r",
            ParamGroup::RouterCol => "W_c",
            ParamGroup::SharedGate => "W_gate",
            ParamGroup::SharedUp => "W_up",
            ParamGroup::SharedDown => "W_down",
            ParamGroup::Input => "X",
        }
    }
}

/// Fixed layer, input and upstream gradient defining the scalar loss
/// `Σ⟨dY, layer(X)⟩`.
#[derive(Debug, Clone)]
pub struct FdScenario {
    pub layer: OmniLayer<f64>,
    pub x: Matrix<f64>,
    pub upstream: Matrix<f64>,
    pub selector: Selector,
}

impl FdScenario {
    /// Random layer, inputs and upstream gradient.
    pub fn seeded(seed: u64, dims: LayerDims, tokens: usize, weight_std: f64) -> Result<Self> {
        let layer = OmniLayer::init_with_std(dims, seed, weight_std)?;
        let mut rng = SeededRng::stream(seed, 1);
        let x = rng_normal(&mut rng, tokens, dims.d, 1.0)?;
        let upstream = rng_normal(&mut rng, tokens, dims.d, 1.0)?;
        Ok(Self { layer, x, upstream, selector: Selector::BruteForce })
    }

    /// d=4 on a 3×3 grid, K=4, three tokens. K exceeds both grid sides, so
    /// every token spans at least two rows and two columns; otherwise a
    /// shared row (or column) offset cancels in the gate softmax and the true
    /// router gradient is exactly zero, leaving only rounding noise to compare.
    pub fn standard(seed: u64) -> Result<Self> {
        let dims = LayerDims { d: 4, n_rows: 3, n_cols: 3, d_ffn: 5, k: 4 };
        Self::seeded(seed, dims, 3, 0.5)
    }

    /// Identity activation and K=1 (gate fixed at 1): the loss is at most
    /// quadratic in any single entry, so central differences are exact up to
    /// rounding.
    pub fn linear(seed: u64) -> Result<Self> {
        let dims = LayerDims { d: 4, n_rows: 3, n_cols: 4, d_ffn: 5, k: 1 };
        let mut s = Self::seeded(seed, dims, 3, 0.5)?;
        s.layer.set_activation(Activation::Identity);
        Ok(s)
    }

    /// Two row logits that differ by 1e-9, so any ε-perturbation of them
    /// changes the winning row.
    pub fn near_tie() -> Result<Self> {
        let dims = LayerDims { d: 2, n_rows: 2, n_cols: 2, d_ffn: 2, k: 1 };
        let mut s = Self::seeded(7, dims, 1, 0.5)?;
        s.layer.router.w_row = Matrix::from_rows(&[vec![1.0, 1.0 + 1e-9], vec![0.0, 0.0]])?;
        s.x = Matrix::from_rows(&[vec![1.0, 0.5]])?;
        Ok(s)
    }

    fn opts(&self) -> ForwardOptions {
        ForwardOptions { selector: self.selector, executor: Executor::Reference, ..ForwardOptions::default() }
    }

    fn eval(&self) -> Result<(f64, Vec<Vec<usize>>)> {
        let out = self.layer.forward(&self.x, &self.opts())?;
        let loss = dot(out.output.data(), self.upstream.data());
        let sets = out
            .routing
            .decisions
            .iter()
            .map(|dec| {
                let mut s = dec.indices.clone();
                s.sort_unstable();
                s
            })
            .collect();
        Ok((loss, sets))
    }

    fn param_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        let layer = &mut self.layer;
        match group {
            ParamGroup::ExpertIn => layer.store.w_in.data_mut(),
            ParamGroup::ExpertOut => layer.store.w_out.data_mut(),
            ParamGroup::RouterRow => layer.router.w_row.data_mut(),
            ParamGroup::RouterCol => layer.router.w_col.data_mut(),
            ParamGroup::SharedGate => layer.shared.w_gate.data_mut(),
            ParamGroup::SharedUp => layer.shared.w_up.data_mut(),
            ParamGroup::SharedDown => layer.shared.w_down.data_mut(),
            ParamGroup::Input => self.x.data_mut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub group: ParamGroup,
    /// `max|fd − analytic| / max(max|fd|, max|analytic|)`; 0 for an all-zero group.
    pub max_rel_error: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    /// Every unselected expert row had an FD gradient of exactly zero and no
    /// analytical row.
    pub sparsity_exact: bool,
}

/// Central-difference check of every parameter group against
/// [`layer_backward`]. Rejects the scenario if any perturbation changes a
/// token's selected set.
pub fn fd_check(scenario: &FdScenario, eps: f64) -> Result<FdReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid(format!("FD step must be positive, got {eps}")));
    }
    let base = scenario.layer.forward(&scenario.x, &scenario.opts())?;
    let (_, base_sets) = scenario.eval()?;
    let grads = layer_backward(
        &scenario.layer,
        &scenario.x,
        &base.routing.decisions,
        &scenario.upstream,
        GateGradient::Router,
    )?;
    let n = scenario.layer.store.n_experts();
    let selected: Vec<bool> = (0..n).map(|i| base_sets.iter().any(|s| s.contains(&i))).collect();

    let mut work = scenario.clone();
    let mut groups = Vec::new();
    let mut sparsity_exact = grads.dw_rows.keys().chain(grads.dv_rows.keys()).all(|&i| selected[i]);
    for group in ParamGroup::ALL {
        let analytic = match group {
            ParamGroup::ExpertIn => grads.dw_dense(n),
            ParamGroup::ExpertOut => grads.dv_dense(n),
            ParamGroup::RouterRow => grads.dw_row.clone(),
            ParamGroup::RouterCol => grads.dw_col.clone(),
            ParamGroup::SharedGate => grads.d_gate.clone(),
            ParamGroup::SharedUp => grads.d_up.clone(),
            ParamGroup::SharedDown => grads.d_down.clone(),
            ParamGroup::Input => grads.dx.clone(),
        };
        let row_len = analytic.cols();
        let len = analytic.data().len();
        let mut fd = vec![0.0; len];
        for (e, slot) in fd.iter_mut().enumerate() {
            let orig = work.param_mut(group)[e];
            work.param_mut(group)[e] = orig + eps;
            let (plus, sets_plus) = work.eval()?;
            work.param_mut(group)[e] = orig - eps;
            let (minus, sets_minus) = work.eval()?;
            work.param_mut(group)[e] = orig;
            for sets in [&sets_plus, &sets_minus] {
                if let Some(token) = sets.iter().zip(&base_sets).position(|(a, b)| a != b) {
                    return Err(Error::SelectionFlip {
                        token,
                        param: format!("{}[{}]", group.name(), e),
                    });
                }
            }
            *slot = (plus - minus) / (2.0 * eps);
            if matches!(group, ParamGroup::ExpertIn | ParamGroup::ExpertOut) && !selected[e / row_len] {
                sparsity_exact &= *slot == 0.0;
            }
        }
        let scale = fd
            .iter()
            .chain(analytic.data())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = fd
            .iter()
            .zip(analytic.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        groups.push(GroupError {
            group,
            max_rel_error: if scale == 0.0 { 0.0 } else { diff / scale },
            entries: len,
        });
    }
    let max_rel_error = groups.iter().fold(0.0f64, |m, g| m.max(g.max_rel_error));
    Ok(FdReport { groups, max_rel_error, sparsity_exact })
}

// ---------------------------------------------------------------------------
// toy training

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ToyTask {
    /// Noisy keys in, stored values out.
    #[default]
    KeyValueRetrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ToyRouting {
    #[default]
    Learned,
    /// `K` distinct experts drawn uniformly per token, equal gates.
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTrainConfig {
    pub d: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub k: usize,
    pub d_ffn: usize,
    pub group_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub tokens: usize,
    pub seed: u64,
    /// Dictionary size; `None` means `4·N/K`.
    pub pairs: Option<usize>,
    /// Standard deviation of the noise added to keys.
    pub key_noise: f64,
    /// Standard deviation of every initial weight.
    pub init_std: f64,
    pub task: ToyTask,
    pub routing: ToyRouting,
    pub selector: Selector,
    pub executor: Executor,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n_rows: 32,
            n_cols: 32,
            k: 8,
            d_ffn: 8,
            group_size: DEFAULT_GROUP_SIZE,
            lr: TOY_DEFAULT_LR,
            steps: 500,
            tokens: 256,
            seed: 0,
            pairs: None,
            key_noise: 0.1,
            init_std: TOY_INIT_STD,
            task: ToyTask::KeyValueRetrieval,
            routing: ToyRouting::Learned,
            selector: Selector::Subgrid,
            executor: Executor::Scheduled,
        }
    }
}

pub const TOY_DEFAULT_LR: f64 = 8.0;
/// Larger than the layer default so expert activations start at O(1);
/// with 0.02 the expert path barely moves within 500 SGD steps.
pub const TOY_INIT_STD: f64 = 0.2;

impl ToyTrainConfig {
    pub fn n_experts(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims { d: self.d, n_rows: self.n_rows, n_cols: self.n_cols, d_ffn: self.d_ffn, k: self.k }
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.unwrap_or((4 * self.n_experts() / self.k.max(1)).max(1))
    }

    fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.n_pairs() == 0 {
            return Err(invalid("toy training needs tokens and dictionary entries"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.key_noise >= 0.0 && self.key_noise.is_finite()) {
            return Err(invalid("key noise must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Loss on the fixed evaluation batch after `step` updates.
    pub loss: f64,
    pub usage: f64,
    pub unevenness: f64,
}

#[derive(Debug, Clone)]
pub struct ToyRun {
    /// Evaluation-batch curve, one record per update plus the initial state.
    pub curve: Vec<StepRecord>,
    /// Load on the evaluation batch with the untrained router.
    pub eval_before: LoadStats,
    pub eval_after: LoadStats,
    pub layer: OmniLayer<f64>,
}

impl ToyRun {
    pub fn initial_loss(&self) -> f64 {
        self.curve.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,loss,usage,unevenness\n");
        for r in &self.curve {
            s.push_str(&format!("{},{:.12e},{:.6},{:.12e}\n", r.step, r.loss, r.usage, r.unevenness));
        }
        s
    }
}

struct Dictionary {
    keys: Matrix<f64>,
    values: Matrix<f64>,
}

impl Dictionary {
    fn sample(&self, rng: &mut SeededRng, tokens: usize, noise: f64) -> (Matrix<f64>, Matrix<f64>) {
        let d = self.keys.cols();
        let mut x = Matrix::zeros(tokens, d);
        let mut t = Matrix::zeros(tokens, d);
        for l in 0..tokens {
            let p = rng.below(self.keys.rows());
            for (xi, &ki) in x.row_mut(l).iter_mut().zip(self.keys.row(p)) {
                *xi = ki + noise * rng.normal();
            }
            t.row_mut(l).copy_from_slice(self.values.row(p));
        }
        (x, t)
    }
}

fn random_decisions(rng: &mut SeededRng, tokens: usize, n: usize, k: usize) -> Result<Vec<RouterDecision<f64>>> {
    (0..tokens)
        .map(|_| {
            let scores = vec![0.0; k];
            Ok(RouterDecision { indices: rng.distinct(n, k), gates: gates_from_scores(&scores)?, scores })
        })
        .collect()
}

fn counts_of(decisions: &[RouterDecision<f64>], n: usize) -> Vec<u64> {
    let mut c = vec![0u64; n];
    for dec in decisions {
        for &i in &dec.indices {
            c[i] += 1;
        }
    }
    c
}

/// Trains a freshly initialized layer on seeded key-value retrieval with SGD.
pub fn train_toy(cfg: &ToyTrainConfig) -> Result<ToyRun> {
    cfg.validate()?;
    let n = cfg.n_experts();
    let mut layer = OmniLayer::init_with_std(cfg.dims(), cfg.seed, cfg.init_std)?;
    let mut data_rng = SeededRng::stream(cfg.seed, 1);
    let dict = Dictionary {
        keys: rng_normal(&mut data_rng, cfg.n_pairs(), cfg.d, 1.0)?,
        values: rng_normal(&mut data_rng, cfg.n_pairs(), cfg.d, 1.0)?,
    };
    let mut batch_rng = SeededRng::stream(cfg.seed, 2);
    let mut select_rng = SeededRng::stream(cfg.seed, 3);
    let (eval_x, eval_t) = dict.sample(&mut SeededRng::stream(cfg.seed, 4), cfg.tokens, cfg.key_noise);
    // Random routing is evaluated on one fixed draw so that lr = 0 gives a flat curve.
    let eval_random = match cfg.routing {
        ToyRouting::Learned => None,
        ToyRouting::UniformRandom => Some(random_decisions(&mut SeededRng::stream(cfg.seed, 5), cfg.tokens, n, cfg.k)?),
    };
    let opts = ForwardOptions {
        selector: cfg.selector,
        executor: cfg.executor,
        group_size: cfg.group_size,
        ..ForwardOptions::default()
    };
    let evaluate = |layer: &OmniLayer<f64>, step: usize| -> Result<(StepRecord, LoadStats)> {
        let decisions = match &eval_random {
            Some(d) => d.clone(),
            None => route_batch(&eval_x, &layer.router, layer.k, cfg.selector)?.decisions,
        };
        let (y, _, _) = layer.forward_with(&eval_x, &decisions, &opts)?;
        let (loss, _) = mse_loss(&y, &eval_t)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let load = load_stats(&counts_of(&decisions, n))?;
        Ok((StepRecord { step, loss, usage: load.usage, unevenness: load.unevenness }, load))
    };

    let mut curve = Vec::with_capacity(cfg.steps + 1);
    let (first, eval_before) = evaluate(&layer, 0)?;
    curve.push(first);
    for step in 0..cfg.steps {
        let (x, target) = dict.sample(&mut batch_rng, cfg.tokens, cfg.key_noise);
        let (decisions, gate_grad) = match cfg.routing {
            ToyRouting::Learned => (route_batch(&x, &layer.router, layer.k, cfg.selector)?.decisions, GateGradient::Router),
            ToyRouting::UniformRandom => (random_decisions(&mut select_rng, cfg.tokens, n, cfg.k)?, GateGradient::Frozen),
        };
        let (y, _, _) = layer.forward_with(&x, &decisions, &opts)?;
        let (loss, dy) = mse_loss(&y, &target)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if cfg.lr > 0.0 {
            let grads = layer_backward(&layer, &x, &decisions, &dy, gate_grad)?;
            sgd_step(&mut layer, &grads, cfg.lr)?;
        }
        curve.push(evaluate(&layer, step + 1)?.0);
    }
    let eval_after = evaluate(&layer, cfg.steps)?.1;
    Ok(ToyRun { curve, eval_before, eval_after, layer })
}
