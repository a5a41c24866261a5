//! Latency measurement and per-block profiling.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audit::{block_costs, BlockCost};
use crate::blocks::Observer;
use crate::error::{Error, Result};
use crate::kernels::kernel_macs;
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_RUNS: usize = 300;
pub const DEFAULT_WARMUP: usize = 20;
pub const DEFAULT_INPUT_SEED: u64 = 0;

/// Kernel threading for a measurement or inference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecConfig {
    /// `None` uses every logical core.
    pub threads: Option<usize>,
    /// Forces a single thread so outputs are bitwise reproducible.
    pub deterministic: bool,
}

impl ExecConfig {
    pub fn threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        }
    }

    /// Runs `f` inside a dedicated pool of [`ExecConfig::threads`] workers.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be >= 1"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads())
            .build()
            .map_err(|e| Error::config("threads", e.to_string()))?;
        Ok(pool.install(f))
    }
}

/// Seeded standard-normal image `[1, 3, hw, hw]`.
pub fn random_input(hw: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![1, 3, hw, hw], |_| StandardNormal.sample(&mut rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostInfo {
    pub cpu: String,
    pub os: String,
    pub logical_cores: usize,
}

impl HostInfo {
    pub fn detect() -> Self {
        let cpu = fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| std::env::consts::ARCH.to_string());
        Self {
            cpu,
            os: std::env::consts::OS.to_string(),
            logical_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub mean_ms: f64,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub variant: String,
    pub runs: usize,
    pub warmup: usize,
    pub threads: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub host: HostInfo,
    pub blocks: Vec<BlockReport>,
}

/// Summary statistics of a non-empty sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub min: f64,
}

/// Nearest-rank percentile of an ascending sample.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn summarize(samples: &[f64]) -> Stats {
    assert!(!samples.is_empty(), "summarize needs at least one sample");
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Stats {
        mean: samples.iter().sum::<f64>() / samples.len() as f64,
        p50: percentile(&sorted, 50.0),
        p95: percentile(&sorted, 95.0),
        min: sorted[0],
    }
}

/// Accumulates wall time and executed MACs per block name.
#[derive(Debug, Default)]
pub struct BlockTimer {
    pub blocks: Vec<(String, Duration, u64)>,
    last_macs: Option<u64>,
}

impl BlockTimer {
    /// Marks the start of a forward pass for MAC attribution.
    pub fn start(&mut self) {
        self.last_macs = Some(kernel_macs());
    }
}

impl Observer for BlockTimer {
    fn record(&mut self, name: &str, _: &Tensor, elapsed: Duration) {
        let now = kernel_macs();
        let macs = now - self.last_macs.unwrap_or(now);
        self.last_macs = Some(now);
        match self.blocks.iter_mut().find(|(n, _, _)| n == name) {
            Some(entry) => {
                entry.1 += elapsed;
                entry.2 += macs;
            }
            None => self.blocks.push((name.to_string(), elapsed, macs)),
        }
    }
}

/// Anything that can be profiled block by block.
pub trait Profiled: Sync {
    fn label(&self) -> String;
    fn input_hw(&self) -> usize;
    fn forward_observed(&self, x: &Tensor, obs: &mut dyn Observer) -> Result<Tensor>;
    /// Analytic cost of every block the forward pass reports.
    fn block_costs(&self) -> Vec<BlockCost>;
}

impl Profiled for Model {
    fn label(&self) -> String {
        self.spec.name.clone()
    }

    fn input_hw(&self) -> usize {
        self.spec.input_hw
    }

    fn forward_observed(&self, x: &Tensor, obs: &mut dyn Observer) -> Result<Tensor> {
        Model::forward_observed(self, x, obs)
    }

    fn block_costs(&self) -> Vec<BlockCost> {
        block_costs(&self.spec, self.ablation)
    }
}

/// Times `runs` forward passes at batch 1 on one fixed random input, after
/// `warmup` untimed passes. Only the forward pass is inside the timed region.
pub fn measure_latency(
    model: &dyn Profiled,
    runs: usize,
    warmup: usize,
    exec: &ExecConfig,
) -> Result<LatencyReport> {
    if runs == 0 {
        return Err(Error::config("runs", "must be >= 1"));
    }
    let input = random_input(model.input_hw(), DEFAULT_INPUT_SEED);
    let (times, timer) = exec.install(|| -> Result<_> {
        for _ in 0..warmup {
            model.forward_observed(&input, &mut ())?;
        }
        let mut timer = BlockTimer::default();
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            timer.start();
            let start = Instant::now();
            model.forward_observed(&input, &mut timer)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok((times, timer))
    })??;
    let stats = summarize(&times);
    let costs = model.block_costs();
    let blocks = timer
        .blocks
        .iter()
        .map(|(name, total, _)| {
            let cost = costs.iter().find(|c| &c.name == name);
            BlockReport {
                name: name.clone(),
                mean_ms: total.as_secs_f64() * 1e3 / runs as f64,
                macs: cost.map_or(0, |c| c.macs),
                params: cost.map_or(0, |c| c.params),
            }
        })
        .collect();
    Ok(LatencyReport {
        variant: model.label(),
        runs,
        warmup,
        threads: exec.threads(),
        mean_ms: stats.mean,
        p50_ms: stats.p50,
        p95_ms: stats.p95,
        min_ms: stats.min,
        host: HostInfo::detect(),
        blocks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub blocks: Vec<BlockCost>,
    pub total_macs: u64,
    pub total_params: u64,
}

impl MacReport {
    pub fn from_blocks(blocks: Vec<BlockCost>) -> Self {
        Self {
            total_macs: blocks.iter().map(|b| b.macs).sum(),
            total_params: blocks.iter().map(|b| b.params).sum(),
            blocks,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockProfile {
    pub name: String,
    pub ms: f64,
    /// Multiply-accumulates the kernels actually executed in this block.
    pub executed_macs: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Profile {
    pub costs: MacReport,
    pub blocks: Vec<BlockProfile>,
    pub total_ms: f64,
}

/// One instrumented forward pass on `input`.
pub fn profile_blocks(model: &dyn Profiled, input: &Tensor) -> Result<Profile> {
    let mut timer = BlockTimer::default();
    timer.start();
    let start = Instant::now();
    model.forward_observed(input, &mut timer)?;
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(Profile {
        costs: MacReport::from_blocks(model.block_costs()),
        blocks: timer
            .blocks
            .into_iter()
            .map(|(name, d, macs)| BlockProfile {
                name,
                ms: d.as_secs_f64() * 1e3,
                executed_macs: macs,
            })
            .collect(),
        total_ms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub const CSV_HEADER: [&str; 4] = ["name", "mean_ms", "macs", "params"];

pub fn report_to_json(report: &LatencyReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// One row per block, then a `total` row with the end-to-end mean.
pub fn report_to_csv(report: &LatencyReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for b in &report.blocks {
        w.write_record([b.name.clone(), b.mean_ms.to_string(), b.macs.to_string(), b.params.to_string()])
            .map_err(csv_err)?;
    }
    let macs: u64 = report.blocks.iter().map(|b| b.macs).sum();
    let params: u64 = report.blocks.iter().map(|b| b.params).sum();
    w.write_record(["total".to_string(), report.mean_ms.to_string(), macs.to_string(), params.to_string()])
        .map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn render_report(report: &LatencyReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => report_to_json(report),
        ReportFormat::Csv => report_to_csv(report),
    }
}

pub fn emit_report(report: &LatencyReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    fs::write(path, render_report(report, format)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_statistics() {
        let s = summarize(&[4.0]);
        assert_eq!((s.mean, s.p50, s.p95, s.min), (4.0, 4.0, 4.0, 4.0));
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        let s = summarize(&v);
        assert_eq!((s.p50, s.p95, s.min), (10.0, 19.0, 1.0));
        assert_eq!(s.mean, 10.5);
    }

    #[test]
    fn deterministic_pins_one_thread() {
        let exec = ExecConfig {
            threads: Some(8),
            deterministic: true,
        };
        assert_eq!(exec.threads(), 1);
        assert_eq!(exec.install(rayon::current_num_threads).unwrap(), 1);
    }
}
