//! Flat `key=value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the config file, the
//! `OMNIMOE_SEED` environment variable, `--set key=value` overrides, then
//! dedicated flags.

use std::fmt;
use std::str::FromStr;

use omnimoe::autograd::{ToyRouting, ToyTrainConfig, TOY_DEFAULT_LR, TOY_INIT_STD};
use omnimoe::experts::{Executor, LayerDims};
use omnimoe::router::{Selector, DEFAULT_SELECT_BLOCK};
use omnimoe::scheduler::{GroupedKernel, DEFAULT_GROUP_SIZE};
use omnimoe::tensor::Precision;

use crate::error::CliError;

pub const SEED_ENV: &str = "OMNIMOE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorKind {
    Tiled,
    Subgrid,
    BruteForce,
}

impl FromStr for SelectorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tiled" => Ok(Self::Tiled),
            "subgrid" => Ok(Self::Subgrid),
            "bruteforce" => Ok(Self::BruteForce),
            _ => Err(format!("expected tiled, subgrid or bruteforce, got `{s}`")),
        }
    }
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tiled => "tiled",
            Self::Subgrid => "subgrid",
            Self::BruteForce => "bruteforce",
        })
    }
}

fn parse_executor(s: &str) -> Result<Executor, String> {
    match s {
        "reference" => Ok(Executor::Reference),
        "scheduled" => Ok(Executor::Scheduled),
        _ => Err(format!("expected reference or scheduled, got `{s}`")),
    }
}

fn parse_kernel(s: &str) -> Result<GroupedKernel, String> {
    match s {
        "masked" => Ok(GroupedKernel::Masked),
        "dense" => Ok(GroupedKernel::Dense),
        "dense-coalesced" => Ok(GroupedKernel::DenseCoalesced),
        _ => Err(format!("expected masked, dense or dense-coalesced, got `{s}`")),
    }
}

fn parse_routing(s: &str) -> Result<ToyRouting, String> {
    match s {
        "learned" => Ok(ToyRouting::Learned),
        "random" => Ok(ToyRouting::UniformRandom),
        _ => Err(format!("expected learned or random, got `{s}`")),
    }
}

pub fn parse_precision(s: &str) -> Result<Precision, String> {
    let bits: u32 = s.parse().map_err(|_| format!("expected 32 or 64, got `{s}`"))?;
    Precision::from_bits(bits).ok_or_else(|| format!("expected 32 or 64, got `{s}`"))
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad list entry `{p}`: {e}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub k: usize,
    pub d_ffn: usize,
    /// Experts per scheduling group (`B`).
    pub group_size: usize,
    /// Selection block size (`B_sel`).
    pub select_block: usize,
    pub kernel: GroupedKernel,
    pub selector: SelectorKind,
    pub executor: Executor,
    pub precision: Precision,
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub tokens: usize,
    pub pairs: Option<usize>,
    pub key_noise: f64,
    pub init_std: f64,
    pub toy_routing: ToyRouting,
    pub ranks: usize,
    pub bytes_per_element: usize,
    pub bench_ks: Vec<usize>,
    pub bench_ls: Vec<usize>,
    pub comm_ns: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ToyTrainConfig::default();
        Self {
            d: toy.d,
            n_rows: toy.n_rows,
            n_cols: toy.n_cols,
            k: toy.k,
            d_ffn: toy.d_ffn,
            group_size: DEFAULT_GROUP_SIZE,
            select_block: DEFAULT_SELECT_BLOCK,
            kernel: GroupedKernel::Masked,
            selector: SelectorKind::Tiled,
            executor: Executor::Scheduled,
            precision: Precision::Runtime,
            seed: 0,
            lr: TOY_DEFAULT_LR,
            steps: toy.steps,
            tokens: toy.tokens,
            pairs: None,
            key_noise: toy.key_noise,
            init_std: TOY_INIT_STD,
            toy_routing: ToyRouting::Learned,
            ranks: 8,
            bytes_per_element: 2,
            bench_ks: vec![1, 8],
            bench_ls: vec![1, 256],
            comm_ns: vec![1 << 10, 1 << 12, 1 << 14, 1 << 16, 1 << 18, 1 << 20],
            repeats: 5,
            warmup: 1,
        }
    }
}

fn field<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| CliError::config(key, format!("cannot parse `{value}`: {e}")))
}

fn with<T>(key: &str, r: Result<T, String>) -> Result<T, CliError> {
    r.map_err(|e| CliError::config(key, e))
}

impl RunConfig {
    pub fn n_experts(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims { d: self.d, n_rows: self.n_rows, n_cols: self.n_cols, d_ffn: self.d_ffn, k: self.k }
    }

    pub fn selector(&self) -> Selector {
        match self.selector {
            SelectorKind::Tiled => Selector::Tiled { block: self.select_block },
            SelectorKind::Subgrid => Selector::Subgrid,
            SelectorKind::BruteForce => Selector::BruteForce,
        }
    }

    pub fn toy(&self) -> ToyTrainConfig {
        ToyTrainConfig {
            d: self.d,
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            k: self.k,
            d_ffn: self.d_ffn,
            group_size: self.group_size,
            lr: self.lr,
            steps: self.steps,
            tokens: self.tokens,
            seed: self.seed,
            pairs: self.pairs,
            key_noise: self.key_noise,
            init_std: self.init_std,
            routing: self.toy_routing,
            selector: self.selector(),
            executor: self.executor,
            ..ToyTrainConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key {
            "d" => self.d = field(key, value)?,
            "n_rows" => self.n_rows = field(key, value)?,
            "n_cols" => self.n_cols = field(key, value)?,
            "k" => self.k = field(key, value)?,
            "d_ffn" => self.d_ffn = field(key, value)?,
            "group_size" => self.group_size = field(key, value)?,
            "select_block" => self.select_block = field(key, value)?,
            "kernel" => self.kernel = with(key, parse_kernel(value))?,
            "selector" => self.selector = with(key, value.parse())?,
            "executor" => self.executor = with(key, parse_executor(value))?,
            "precision" => self.precision = with(key, parse_precision(value))?,
            "seed" => self.seed = field(key, value)?,
            "lr" => self.lr = field(key, value)?,
            "steps" => self.steps = field(key, value)?,
            "tokens" => self.tokens = field(key, value)?,
            "pairs" => self.pairs = Some(field(key, value)?),
            "key_noise" => self.key_noise = field(key, value)?,
            "init_std" => self.init_std = field(key, value)?,
            "toy_routing" => self.toy_routing = with(key, parse_routing(value))?,
            "ranks" => self.ranks = field(key, value)?,
            "bytes_per_element" => self.bytes_per_element = field(key, value)?,
            "bench_ks" => self.bench_ks = with(key, parse_list(value))?,
            "bench_ls" => self.bench_ls = with(key, parse_list(value))?,
            "comm_ns" => self.comm_ns = with(key, parse_list(value))?,
            "repeats" => self.repeats = field(key, value)?,
            "warmup" => self.warmup = field(key, value)?,
            _ => return Err(CliError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies a `key=value` text: one pair per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got `{line}`", no + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, pair: &str) -> Result<(), CliError> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{pair}`")))?;
        self.set(key.trim(), value)
    }

    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<(), CliError> {
        if let Some(v) = value {
            self.seed = field(SEED_ENV, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("d", self.d),
            ("n_rows", self.n_rows),
            ("n_cols", self.n_cols),
            ("k", self.k),
            ("d_ffn", self.d_ffn),
            ("group_size", self.group_size),
            ("tokens", self.tokens),
            ("ranks", self.ranks),
            ("repeats", self.repeats),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(CliError::config(key, "must be at least 1"));
            }
        }
        if self.k > self.n_experts() {
            return Err(CliError::config("k", format!("K={} exceeds N={}", self.k, self.n_experts())));
        }
        if self.select_block < self.k {
            return Err(CliError::config(
                "select_block",
                format!("B_sel={} is smaller than K={}", self.select_block, self.k),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CliError::config("lr", "must be finite and >= 0"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(CliError::config("init_std", "must be finite and > 0"));
        }
        if !(self.key_noise >= 0.0 && self.key_noise.is_finite()) {
            return Err(CliError::config("key_noise", "must be finite and >= 0"));
        }
        if self.pairs == Some(0) {
            return Err(CliError::config("pairs", "must be at least 1"));
        }
        if self.bench_ks.iter().any(|&k| k == 0 || k > self.n_experts()) {
            return Err(CliError::config("bench_ks", format!("every K must be in 1..={}", self.n_experts())));
        }
        if self.bench_ls.contains(&0) {
            return Err(CliError::config("bench_ls", "every L must be at least 1"));
        }
        if self.comm_ns.iter().any(|&n| n < self.k) {
            return Err(CliError::config("comm_ns", format!("every N must be at least K={}", self.k)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nd = 8\nselector=subgrid # trailing\n\nk=2").unwrap();
        c.apply_override("d=16").unwrap();
        assert_eq!((c.d, c.k, c.selector), (16, 2, SelectorKind::Subgrid));
        c.validate().unwrap();
    }

    #[test]
    fn errors_name_the_field() {
        let mut c = RunConfig::default();
        let e = c.apply_text("lr=fast").unwrap_err();
        assert!(e.to_string().contains("`lr`"), "{e}");
        let e = c.apply_override("nope=1").unwrap_err();
        assert!(e.to_string().contains("`nope`"));
        assert!(c.apply_text("just words").is_err());
    }

    #[test]
    fn validation() {
        let c = RunConfig { select_block: 4, k: 8, ..RunConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("select_block"));
        let c = RunConfig { n_rows: 2, n_cols: 2, k: 5, ..RunConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("`k`"));
        assert!(RunConfig { d: 0, ..RunConfig::default() }.validate().is_err());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn seed_env() {
        let mut c = RunConfig::default();
        c.apply_seed_env(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        c.apply_seed_env(None).unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.apply_seed_env(Some("x")).is_err());
    }
}
