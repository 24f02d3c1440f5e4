//! Subcommand bodies. Each returns the report text; `main` decides where it
//! goes.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use omnimoe::analysis::{comm_simulate, traffic_formulas, CommConfig};
use omnimoe::autograd::train_toy;
use omnimoe::bench::{run_speed, SpeedConfig, SpeedReport};
use omnimoe::experts::OmniLayer;
use omnimoe::router::{route_batch, GridCoord};
use omnimoe::tensor::{rng_normal, Matrix, Precision, Scalar, SeededRng};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::verify::{run_checks, CheckRecord, FaultInjection};
use crate::weights::{encode, load_weights};

pub const BENCH_SCHEMA: &str = "# omnimoe-bench v1";
pub const BENCH_COLUMNS: &str = "K,L,n_active,t_token_ms,t_expert_ms,speedup,D_token,D_expert,eta";
pub const TOY_SCHEMA: &str = "# omnimoe-toy-curve v1";
pub const COMM_SCHEMA: &str = "# omnimoe-comm v1";
pub const COMM_COLUMNS: &str = "R,N,L,K,d,bytes_per_element,fwd_bytes,fwd_cross_rank_bytes,bwd_bytes,n_active,expected_active";
pub const ROUTE_COLUMNS: &str = "token,rank,flat_id,row,col,score,gate";

/// JSON-lines check records and whether every check passed.
pub fn verify(cfg: &RunConfig, fault: FaultInjection) -> Result<(String, bool), CliError> {
    let records = run_checks(cfg, fault)?;
    let mut out = String::new();
    for r in &records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    Ok((out, records.iter().all(CheckRecord::passed)))
}

fn speed_cell(cfg: &RunConfig, k: usize, l: usize) -> Result<SpeedReport, CliError> {
    let sc = SpeedConfig {
        d: cfg.d,
        n_rows: cfg.n_rows,
        n_cols: cfg.n_cols,
        tokens: l,
        k,
        group_size: cfg.group_size,
        kernel: cfg.kernel,
        warmup: cfg.warmup,
        repeats: cfg.repeats,
        seed: cfg.seed,
    };
    Ok(match cfg.precision {
        Precision::Runtime => run_speed::<f32>(&sc)?,
        Precision::Verification => run_speed::<f64>(&sc)?,
    })
}

pub fn bench(cfg: &RunConfig) -> Result<String, CliError> {
    let mut out = format!(
        "{BENCH_SCHEMA} d={} N={} B={} precision={}\n{BENCH_COLUMNS}\n",
        cfg.d,
        cfg.n_experts(),
        cfg.group_size,
        cfg.precision.bits()
    );
    for &k in &cfg.bench_ks {
        for &l in &cfg.bench_ls {
            let r = speed_cell(cfg, k, l)?;
            let f = traffic_formulas(cfg.d as u64, l as u64, k as u64, r.n_active as u64)?;
            let (d_token, d_expert) = (r.traffic_token.param_elements_loaded, r.traffic_expert.param_elements_loaded);
            if (d_token, d_expert) != (f.d_token, f.d_expert) {
                return Err(CliError::Core(omnimoe::Error::InvalidArgument(format!(
                    "traffic counters ({d_token}, {d_expert}) disagree with the formulas ({}, {}) at K={k}, L={l}",
                    f.d_token, f.d_expert
                ))));
            }
            writeln!(
                out,
                "{k},{l},{},{:.3},{:.3},{:.3},{d_token},{d_expert},{:.6}",
                r.n_active,
                r.t_token.as_secs_f64() * 1e3,
                r.t_expert.as_secs_f64() * 1e3,
                r.speedup(),
                f.eta
            )
            .expect("write to string");
        }
    }
    Ok(out)
}

/// Where `route` takes its tokens from.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenSource {
    /// One all-zero token.
    Zero,
    /// Seeded standard-normal tokens.
    Random(usize),
    /// Whitespace- or comma-separated values, one token per line.
    Text(String),
}

pub fn parse_tokens(text: &str, d: usize) -> Result<Matrix<f64>, CliError> {
    let mut rows = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| CliError::Usage(format!("token line {}: `{s}`: {e}", no + 1))))
            .collect::<Result<_, _>>()?;
        if row.len() != d {
            return Err(CliError::Usage(format!("token line {} has {} values, the layer has d={d}", no + 1, row.len())));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Usage("token source is empty".into()));
    }
    Ok(Matrix::from_rows(&rows)?)
}

fn route_listing<T: Scalar>(cfg: &RunConfig, layer: &OmniLayer<T>, x: &Matrix<T>) -> Result<String, CliError> {
    let routed = route_batch(x, &layer.router, layer.k, cfg.selector())?;
    let n_cols = layer.router.n_cols();
    let mut out = format!("{ROUTE_COLUMNS}\n");
    for (l, dec) in routed.decisions.iter().enumerate() {
        for (rank, ((&n, &s), &g)) in dec.indices.iter().zip(&dec.scores).zip(&dec.gates).enumerate() {
            let c = GridCoord::from_flat(n, n_cols);
            writeln!(out, "{l},{rank},{n},{},{},{s},{g}", c.row, c.col).expect("write to string");
        }
    }
    Ok(out)
}

pub fn route(cfg: &RunConfig, weights: &Path, source: &TokenSource) -> Result<String, CliError> {
    let layer = load_weights(weights)?;
    if layer.k > cfg.select_block && matches!(cfg.selector, crate::config::SelectorKind::Tiled) {
        return Err(CliError::config("select_block", format!("B_sel={} is smaller than the file's K={}", cfg.select_block, layer.k)));
    }
    let d = layer.store.d();
    let x = match source {
        TokenSource::Zero => Matrix::zeros(1, d),
        TokenSource::Random(count) => rng_normal(&mut SeededRng::stream(cfg.seed, 20), *count, d, 1.0)?,
        TokenSource::Text(text) => parse_tokens(text, d)?,
    };
    match cfg.precision {
        Precision::Runtime => route_listing(cfg, &layer, &x.cast::<f32>()),
        Precision::Verification => route_listing(cfg, &layer.cast::<f64>(), &x),
    }
}

pub fn train_toy_report(cfg: &RunConfig) -> Result<String, CliError> {
    let run = train_toy(&cfg.toy())?;
    Ok(format!("{TOY_SCHEMA}\n{}", run.curve_csv()))
}

pub fn comm_sim(cfg: &RunConfig) -> Result<String, CliError> {
    let mut out = format!("{COMM_SCHEMA}\n{COMM_COLUMNS}\n");
    for &n in &cfg.comm_ns {
        let r = comm_simulate(CommConfig {
            ranks: cfg.ranks,
            n_experts: n,
            tokens: cfg.tokens,
            k: cfg.k,
            d: cfg.d,
            bytes_per_element: cfg.bytes_per_element,
            seed: cfg.seed,
        })?;
        writeln!(
            out,
            "{},{n},{},{},{},{},{},{},{},{},{:.3}",
            cfg.ranks,
            cfg.tokens,
            cfg.k,
            cfg.d,
            cfg.bytes_per_element,
            r.fwd_bytes,
            r.fwd_cross_rank_bytes,
            r.bwd_bytes,
            r.n_active,
            r.expected_active
        )
        .expect("write to string");
    }
    Ok(out)
}

/// Seeded layer in the weight-file format.
pub fn export(cfg: &RunConfig) -> Result<Vec<u8>, CliError> {
    let layer = OmniLayer::<f32>::init(cfg.dims(), cfg.seed)?;
    Ok(encode(&layer))
}

#[derive(Debug, Serialize)]
struct WeightSummary {
    d: usize,
    n: usize,
    n_rows: usize,
    n_cols: usize,
    d_ffn: usize,
    k: usize,
    active_params_per_token: u64,
}

/// Validates a weight file; returns a JSON summary and the re-encoded bytes.
pub fn import(path: &Path) -> Result<(String, Vec<u8>), CliError> {
    let layer = load_weights(path)?;
    let dims = layer.dims();
    let summary = WeightSummary {
        d: dims.d,
        n: dims.n_experts(),
        n_rows: dims.n_rows,
        n_cols: dims.n_cols,
        d_ffn: dims.d_ffn,
        k: dims.k,
        active_params_per_token: layer.active_params_per_token(),
    };
    let json = serde_json::to_string(&summary).expect("summary serializes") + "\n";
    Ok((json, encode(&layer)))
}
