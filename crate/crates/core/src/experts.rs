//! Atomic experts, dynamic expert assembly and the composed layer.
//!
//! Expert `n` is the pair of rows `W[n]`, `V[n]`; on input `x` it produces
//! `act(x·W[n]) · V[n]`. A token's routed output is the gate-weighted sum over
//! its selected experts, and a dense gated MLP is added on top.

use crate::error::{invalid, Error, Result};
use crate::router::{route_batch, RoutedBatch, RouterDecision, RouterParams, Selector};
use crate::scheduler::{self, GroupedKernel, Traffic, DEFAULT_GROUP_SIZE};
use crate::tensor::{axpy, dot, rng_normal, silu, silu_grad, Matrix, Scalar, SeededRng};

/// Standard deviation of every weight at initialization.
pub const INIT_STD: f64 = 0.02;

/// Nonlinearity applied to expert pre-activations and the shared MLP gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Silu,
    /// Debug mode: the layer becomes multilinear in its parameters.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Silu => silu(z),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn grad<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Silu => silu_grad(z),
            Activation::Identity => T::one(),
        }
    }
}

/// Global expert parameters: row `n` of `w_in` / `w_out` belongs to expert `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertStore<T> {
    /// `N × d`
    pub w_in: Matrix<T>,
    /// `N × d`
    pub w_out: Matrix<T>,
    pub activation: Activation,
}

impl<T: Scalar> ExpertStore<T> {
    pub fn new(w_in: Matrix<T>, w_out: Matrix<T>) -> Result<Self> {
        if w_in.shape() != w_out.shape() {
            return Err(Error::ShapeMismatch {
                op: "ExpertStore::new",
                left: w_in.shape(),
                right: w_out.shape(),
            });
        }
        Ok(Self {
            w_in,
            w_out,
            activation: Activation::Silu,
        })
    }

    pub fn init(rng: &mut SeededRng, n: usize, d: usize, std: f64) -> Result<Self> {
        let w_in = rng_normal(rng, n, d, std)?;
        let w_out = rng_normal(rng, n, d, std)?;
        Self::new(w_in, w_out)
    }

    pub fn n_experts(&self) -> usize {
        self.w_in.rows()
    }

    pub fn d(&self) -> usize {
        self.w_in.cols()
    }

    fn check_id(&self, i: usize) -> Result<()> {
        if i >= self.n_experts() {
            return Err(Error::IndexOutOfRange {
                what: "expert",
                index: i,
                bound: self.n_experts(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ExpertStore<U> {
        ExpertStore {
            w_in: self.w_in.cast(),
            w_out: self.w_out.cast(),
            activation: self.activation,
        }
    }
}

/// Dense gated MLP without biases: `(act(x·W_gate) ⊙ (x·W_up)) · W_down`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedMlp<T> {
    /// `d × d_ffn`
    pub w_gate: Matrix<T>,
    /// `d × d_ffn`
    pub w_up: Matrix<T>,
    /// `d_ffn × d`
    pub w_down: Matrix<T>,
    pub activation: Activation,
}

impl<T: Scalar> SharedMlp<T> {
    pub fn new(w_gate: Matrix<T>, w_up: Matrix<T>, w_down: Matrix<T>) -> Result<Self> {
        if w_gate.shape() != w_up.shape() {
            return Err(Error::ShapeMismatch {
                op: "SharedMlp::new",
                left: w_gate.shape(),
                right: w_up.shape(),
            });
        }
        if w_down.shape() != (w_gate.cols(), w_gate.rows()) {
            return Err(Error::ShapeMismatch {
                op: "SharedMlp::new",
                left: w_gate.shape(),
                right: w_down.shape(),
            });
        }
        Ok(Self {
            w_gate,
            w_up,
            w_down,
            activation: Activation::Silu,
        })
    }

    pub fn init(rng: &mut SeededRng, d: usize, d_ffn: usize, std: f64) -> Result<Self> {
        let w_gate = rng_normal(rng, d, d_ffn, std)?;
        let w_up = rng_normal(rng, d, d_ffn, std)?;
        let w_down = rng_normal(rng, d_ffn, d, std)?;
        Self::new(w_gate, w_up, w_down)
    }

    pub fn d(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn d_ffn(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn cast<U: Scalar>(&self) -> SharedMlp<U> {
        SharedMlp {
            w_gate: self.w_gate.cast(),
            w_up: self.w_up.cast(),
            w_down: self.w_down.cast(),
            activation: self.activation,
        }
    }
}

/// Single-expert output `act(x·W[i]) · V[i]`.
pub fn atomic_forward<T: Scalar>(x: &[T], store: &ExpertStore<T>, i: usize) -> Result<Vec<T>> {
    store.check_id(i)?;
    check_len("atomic_forward", x, store.d())?;
    let a = store.activation.apply(dot(x, store.w_in.row(i)));
    Ok(store.w_out.row(i).iter().map(|&v| a * v).collect())
}

/// Gathers `W[indices]` and `V[indices]` into token-local `K × d` blocks.
pub fn retrieve<T: Scalar>(store: &ExpertStore<T>, indices: &[usize]) -> Result<(Matrix<T>, Matrix<T>)> {
    let d = store.d();
    let mut w = Vec::with_capacity(indices.len() * d);
    let mut v = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        store.check_id(i)?;
        w.extend_from_slice(store.w_in.row(i));
        v.extend_from_slice(store.w_out.row(i));
    }
    Ok((
        Matrix::from_vec(indices.len(), d, w)?,
        Matrix::from_vec(indices.len(), d, v)?,
    ))
}

/// `(gates ⊙ act(x·w_xᵀ)) · v_x`, summed over k in stored order.
pub fn assemble_forward<T: Scalar>(
    x: &[T],
    w_x: &Matrix<T>,
    v_x: &Matrix<T>,
    gates: &[T],
    activation: Activation,
) -> Result<Vec<T>> {
    if w_x.shape() != v_x.shape() || gates.len() != w_x.rows() {
        return Err(Error::ShapeMismatch {
            op: "assemble_forward",
            left: w_x.shape(),
            right: (gates.len(), v_x.cols()),
        });
    }
    check_len("assemble_forward", x, w_x.cols())?;
    let mut y = vec![T::zero(); w_x.cols()];
    for (k, &g) in gates.iter().enumerate() {
        let a = g * activation.apply(dot(x, w_x.row(k)));
        axpy(a, v_x.row(k), &mut y);
    }
    Ok(y)
}

pub fn shared_mlp_forward<T: Scalar>(x: &[T], shared: &SharedMlp<T>) -> Result<Vec<T>> {
    check_len("shared_mlp_forward", x, shared.d())?;
    let gate = shared.w_gate.vec_mul(x)?;
    let up = shared.w_up.vec_mul(x)?;
    let hidden: Vec<T> = gate
        .iter()
        .zip(&up)
        .map(|(&g, &u)| shared.activation.apply(g) * u)
        .collect();
    shared.w_down.vec_mul(&hidden)
}

fn check_len<T>(op: &'static str, x: &[T], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::ShapeMismatch {
            op,
            left: (1, x.len()),
            right: (1, d),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub d: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub d_ffn: usize,
    pub k: usize,
}

impl LayerDims {
    pub fn n_experts(&self) -> usize {
        self.n_rows * self.n_cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmniLayer<T> {
    pub store: ExpertStore<T>,
    pub router: RouterParams<T>,
    pub shared: SharedMlp<T>,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Executor {
    /// Per-token retrieve-and-assemble.
    Reference,
    /// Expert-centric grouped execution.
    #[default]
    Scheduled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub selector: Selector,
    pub executor: Executor,
    pub group_size: usize,
    pub kernel: GroupedKernel,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            selector: Selector::default(),
            executor: Executor::default(),
            group_size: DEFAULT_GROUP_SIZE,
            kernel: GroupedKernel::default(),
        }
    }
}

impl ForwardOptions {
    pub fn with_executor(mut self, executor: Executor) -> Self {
        self.executor = executor;
        self
    }
}

#[derive(Debug, Clone)]
pub struct LayerOutput<T> {
    /// Routed branch plus shared MLP, `L × d`.
    pub output: Matrix<T>,
    /// Routed branch only.
    pub routed: Matrix<T>,
    pub routing: RoutedBatch<T>,
    pub traffic: Traffic,
}

impl<T: Scalar> OmniLayer<T> {
    pub fn new(store: ExpertStore<T>, router: RouterParams<T>, shared: SharedMlp<T>, k: usize) -> Result<Self> {
        if store.n_experts() != router.n_experts() {
            return Err(invalid(format!(
                "expert count {} does not match router grid {}x{}",
                store.n_experts(),
                router.n_rows(),
                router.n_cols()
            )));
        }
        if store.d() != router.d() || store.d() != shared.d() {
            return Err(invalid(format!(
                "hidden sizes disagree: experts {}, router {}, shared {}",
                store.d(),
                router.d(),
                shared.d()
            )));
        }
        if k == 0 || k > store.n_experts() {
            return Err(invalid(format!(
                "K must satisfy 1 <= K <= N, got K={k}, N={}",
                store.n_experts()
            )));
        }
        Ok(Self {
            store,
            router,
            shared,
            k,
        })
    }

    /// Gaussian init (std [`INIT_STD`]) drawn in the order router, experts, shared MLP.
    pub fn init(dims: LayerDims, seed: u64) -> Result<Self> {
        Self::init_with_std(dims, seed, INIT_STD)
    }

    pub fn init_with_std(dims: LayerDims, seed: u64, std: f64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let router = RouterParams::init(&mut rng, dims.d, dims.n_rows, dims.n_cols, std)?;
        let store = ExpertStore::init(&mut rng, dims.n_experts(), dims.d, std)?;
        let shared = SharedMlp::init(&mut rng, dims.d, dims.d_ffn, std)?;
        Self::new(store, router, shared, dims.k)
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims {
            d: self.store.d(),
            n_rows: self.router.n_rows(),
            n_cols: self.router.n_cols(),
            d_ffn: self.shared.d_ffn(),
            k: self.k,
        }
    }

    pub fn set_activation(&mut self, activation: Activation) {
        self.store.activation = activation;
        self.shared.activation = activation;
    }

    pub fn activation(&self) -> Activation {
        self.store.activation
    }

    /// Unique parameters touched by one token: routed rows, shared MLP, router.
    pub fn active_params_per_token(&self) -> u64 {
        let d = self.store.d() as u64;
        2 * self.k as u64 * d
            + 3 * d * self.shared.d_ffn() as u64
            + d * (self.router.n_rows() + self.router.n_cols()) as u64
    }

    pub fn cast<U: Scalar>(&self) -> OmniLayer<U> {
        OmniLayer {
            store: self.store.cast(),
            router: self.router.cast(),
            shared: self.shared.cast(),
            k: self.k,
        }
    }

    pub fn forward(&self, x: &Matrix<T>, opts: &ForwardOptions) -> Result<LayerOutput<T>> {
        if x.cols() != self.store.d() {
            return Err(Error::ShapeMismatch {
                op: "layer_forward",
                left: x.shape(),
                right: (x.rows(), self.store.d()),
            });
        }
        let routing = route_batch(x, &self.router, self.k, opts.selector)?;
        let (output, routed, traffic) = self.forward_with(x, &routing.decisions, opts)?;
        Ok(LayerOutput {
            output,
            routed,
            routing,
            traffic,
        })
    }

    /// Forward pass with externally supplied routing decisions.
    /// Returns `(output, routed part, traffic)`.
    pub fn forward_with(
        &self,
        x: &Matrix<T>,
        decisions: &[RouterDecision<T>],
        opts: &ForwardOptions,
    ) -> Result<(Matrix<T>, Matrix<T>, Traffic)> {
        let (routed, traffic) = match opts.executor {
            Executor::Reference => scheduler::execute_token_centric(decisions, &self.store, x)?,
            Executor::Scheduled => {
                let tasks = scheduler::flatten_tasks(decisions);
                let plan = scheduler::build_plan(&tasks, self.store.n_experts(), opts.group_size)?;
                scheduler::execute_grouped(&plan, &self.store, x, &tasks, opts.kernel)?
            }
        };
        let mut output = routed.clone();
        for l in 0..x.rows() {
            let s = shared_mlp_forward(x.row(l), &self.shared)?;
            output.row_mut(l).iter_mut().zip(&s).for_each(|(o, &v)| *o = *o + v);
        }
        Ok((output, routed, traffic))
    }
}

/// Full layer output with default routing and grouping settings.
pub fn layer_forward<T: Scalar>(x: &Matrix<T>, layer: &OmniLayer<T>, executor: Executor) -> Result<Matrix<T>> {
    let opts = ForwardOptions::default().with_executor(executor);
    Ok(layer.forward(x, &opts)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_store(seed: u64, n: usize, d: usize) -> ExpertStore<f64> {
        ExpertStore::init(&mut SeededRng::new(seed), n, d, 0.5).unwrap()
    }

    #[test]
    fn atomic_forward_cases() {
        let store = seeded_store(1, 4, 3);
        assert!(atomic_forward(&[0.0; 3], &store, 2).unwrap().iter().all(|&v| v == 0.0));
        assert!(atomic_forward(&[0.0; 3], &store, 4).is_err());

        let w = Matrix::from_f64_rows(&[&[2.0, 0.0], &[1.0, 1.0]]).unwrap();
        let v = Matrix::from_f64_rows(&[&[1.0, 1.0], &[0.0, 0.0]]).unwrap();
        let store = ExpertStore::new(w, v).unwrap();
        let y = atomic_forward(&[1.0, 0.0], &store, 0).unwrap();
        // silu(2) = 2·sigmoid(2)
        let want = 2.0 / (1.0 + (-2.0f64).exp());
        assert!((y[0] - want).abs() < 1e-15 && (y[1] - want).abs() < 1e-15);
        assert!((want - 1.7616).abs() < 1e-4);
        // x orthogonal to W[1]
        assert_eq!(atomic_forward(&[1.0, -1.0], &store, 1).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn retrieve_matches_direct_lookup() {
        let store = seeded_store(2, 12, 5);
        let (w, v) = retrieve(&store, &[7, 2, 9]).unwrap();
        for (k, &i) in [7, 2, 9].iter().enumerate() {
            assert_eq!(w.row(k), store.w_in.row(i));
            assert_eq!(v.row(k), store.w_out.row(i));
        }
        let eye = ExpertStore::new(Matrix::<f64>::identity(4), Matrix::identity(4)).unwrap();
        let (w, _) = retrieve(&eye, &[0, 1, 2]).unwrap();
        assert_eq!(w.row(1), &[0.0, 1.0, 0.0, 0.0]);
        assert!(retrieve(&store, &[3, 12]).is_err());
    }

    #[test]
    fn assemble_equals_sum_of_atomic() {
        let store = seeded_store(3, 16, 6);
        let mut rng = SeededRng::new(4);
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let ids = [11, 0, 5];
        let gates = [0.5, 0.3, 0.2];
        let (w, v) = retrieve(&store, &ids).unwrap();
        let y = assemble_forward(&x, &w, &v, &gates, Activation::Silu).unwrap();
        let mut want = vec![0.0; 6];
        for (&i, &g) in ids.iter().zip(&gates) {
            axpy(g, &atomic_forward(&x, &store, i).unwrap(), &mut want);
        }
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }

        let zero = assemble_forward(&x, &w, &v, &[0.0; 3], Activation::Silu).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let (w1, v1) = retrieve(&store, &[5]).unwrap();
        let single = assemble_forward(&x, &w1, &v1, &[0.4], Activation::Silu).unwrap();
        let atomic = atomic_forward(&x, &store, 5).unwrap();
        for (a, b) in single.iter().zip(&atomic) {
            assert!((a - 0.4 * b).abs() <= 1e-15);
        }
        assert!(assemble_forward(&x, &w, &v, &[1.0], Activation::Silu).is_err());
    }

    #[test]
    fn gate_convexity() {
        // every selected expert returns the same vector u
        let w = Matrix::from_f64_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        let v = Matrix::from_f64_rows(&[&[0.3, -0.7], &[0.3, -0.7], &[0.3, -0.7]]).unwrap();
        let x = [1.3, 0.2];
        let a = silu(1.3f64);
        for gates in [[0.2, 0.3, 0.5], [0.9, 0.05, 0.05], [1.0 / 3.0; 3]] {
            let y = assemble_forward(&x, &w, &v, &gates, Activation::Silu).unwrap();
            assert!((y[0] - 0.3 * a).abs() < 1e-15 && (y[1] + 0.7 * a).abs() < 1e-15);
        }
    }

    #[test]
    fn shared_mlp_cases() {
        let shared = SharedMlp::<f64>::init(&mut SeededRng::new(5), 3, 4, 0.3).unwrap();
        assert!(shared_mlp_forward(&[0.0; 3], &shared).unwrap().iter().all(|&v| v == 0.0));

        // large positive gate saturates silu to identity
        let big = Matrix::identity(2).map(|v| v * 1.0e3);
        let sat = SharedMlp::new(big, Matrix::identity(2), Matrix::identity(2)).unwrap();
        let y = shared_mlp_forward(&[1.0f64, 2.0], &sat).unwrap();
        assert!((y[0] - 1000.0).abs() < 1e-9 && (y[1] - 4000.0).abs() < 1e-9);

        let g = Matrix::from_f64_rows(&[&[1.0, 0.0], &[0.0, -1.0]]).unwrap();
        let u = Matrix::from_f64_rows(&[&[0.5, 1.0], &[2.0, 0.0]]).unwrap();
        let dn = Matrix::from_f64_rows(&[&[1.0, 1.0], &[0.0, 2.0]]).unwrap();
        let mlp = SharedMlp::new(g, u, dn).unwrap();
        let x = [1.0, 1.0];
        // gate = [1, -1], up = [2.5, 1.0], hidden = [silu(1)·2.5, silu(-1)·1]
        let h0 = silu(1.0f64) * 2.5;
        let h1 = silu(-1.0f64);
        let y = shared_mlp_forward(&x, &mlp).unwrap();
        assert!((y[0] - h0).abs() < 1e-15);
        assert!((y[1] - (h0 + 2.0 * h1)).abs() < 1e-15);
        assert!(shared_mlp_forward(&[1.0], &mlp).is_err());
    }

    #[test]
    fn layer_zero_input_and_single_expert() {
        let dims = LayerDims { d: 4, n_rows: 2, n_cols: 3, d_ffn: 4, k: 2 };
        let layer = OmniLayer::<f64>::init(dims, 9).unwrap();
        let y = layer_forward(&Matrix::zeros(3, 4), &layer, Executor::Scheduled).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let one = LayerDims { d: 3, n_rows: 1, n_cols: 1, d_ffn: 3, k: 1 };
        let layer = OmniLayer::<f64>::init(one, 10).unwrap();
        let x = Matrix::from_f64_rows(&[&[0.4, -1.0, 2.0]]).unwrap();
        for exec in [Executor::Reference, Executor::Scheduled] {
            let y = layer_forward(&x, &layer, exec).unwrap();
            let a = atomic_forward(x.row(0), &layer.store, 0).unwrap();
            let s = shared_mlp_forward(x.row(0), &layer.shared).unwrap();
            for j in 0..3 {
                assert!((y.get(0, j) - (a[j] + s[j])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn layer_validates_configuration() {
        let mut rng = SeededRng::new(0);
        let store = ExpertStore::<f64>::init(&mut rng, 6, 4, 0.1).unwrap();
        let router = RouterParams::init(&mut rng, 4, 2, 3, 0.1).unwrap();
        let shared = SharedMlp::init(&mut rng, 4, 4, 0.1).unwrap();
        assert!(OmniLayer::new(store.clone(), router.clone(), shared.clone(), 0).is_err());
        assert!(OmniLayer::new(store.clone(), router.clone(), shared.clone(), 7).is_err());
        let bad_router = RouterParams::init(&mut rng, 4, 2, 2, 0.1).unwrap();
        assert!(OmniLayer::new(store.clone(), bad_router, shared.clone(), 2).is_err());
        assert!(OmniLayer::new(store, router, shared, 6).is_ok());
    }

    #[test]
    fn active_parameter_count() {
        let dims = LayerDims { d: 32, n_rows: 32, n_cols: 32, d_ffn: 32, k: 8 };
        let layer = OmniLayer::<f32>::init(dims, 1).unwrap();
        assert_eq!(layer.active_params_per_token(), 2 * 8 * 32 + 3 * 32 * 32 + 32 * 64);
    }

    #[test]
    fn routed_branch_is_linear_in_v() {
        let dims = LayerDims { d: 8, n_rows: 4, n_cols: 4, d_ffn: 8, k: 3 };
        let layer = OmniLayer::<f64>::init(dims, 12).unwrap();
        let x: Matrix<f64> = rng_normal(&mut SeededRng::new(13), 5, 8, 1.0).unwrap();
        let opts = ForwardOptions::default();
        let base = layer.forward(&x, &opts).unwrap();
        for c in [0.0, 2.0, -1.0] {
            let mut scaled = layer.clone();
            scaled.store.w_out.scale(c);
            let out = scaled.forward(&x, &opts).unwrap();
            let mut want = base.routed.clone();
            want.scale(c);
            assert!(out.routed.max_abs_diff(&want).unwrap() <= 1e-10);
            let shared_before = base.output.max_abs_diff(&base.routed).unwrap();
            let shared_after = out.output.max_abs_diff(&out.routed).unwrap();
            assert!((shared_before - shared_after).abs() <= 1e-12);
        }
    }
}
