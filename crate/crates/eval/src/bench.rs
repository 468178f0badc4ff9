//! Single-stream latency benchmark of the full inference pipeline
//! (forward, decode, NMS) at batch 1.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use kfg_core::Model;
use kfg_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decode::decode;
use crate::error::Result;
use crate::nms::nms;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub imgsz: usize,
    pub warmup: usize,
    pub iters: usize,
    pub conf: f32,
    pub nms_iou: f32,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            imgsz: 320,
            warmup: 2,
            iters: 10,
            conf: 0.25,
            nms_iou: 0.7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardwareInfo {
    pub cpu: String,
    pub logical_cpus: usize,
    pub os: &'static str,
    pub arch: &'static str,
    /// The benchmark never uses more than one thread.
    pub threads_used: usize,
}

impl HardwareInfo {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|t| {
                t.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        HardwareInfo {
            cpu,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            threads_used: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub variant: String,
    pub params: usize,
    pub imgsz: usize,
    pub iters: usize,
    pub total: Duration,
    pub fps: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

pub fn fps(iters: usize, total_secs: f64) -> f64 {
    iters as f64 / total_secs
}

/// Nearest-rank percentile of ascending `sorted`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Per-iteration latencies in order to a result.
pub fn summarize(variant: &str, params: usize, imgsz: usize, latencies: &[Duration]) -> BenchResult {
    let total: Duration = latencies.iter().sum();
    let mut ms: Vec<f64> = latencies.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    BenchResult {
        variant: variant.to_string(),
        params,
        imgsz,
        iters: latencies.len(),
        total,
        fps: fps(latencies.len(), total.as_secs_f64()),
        mean_ms: ms.iter().sum::<f64>() / ms.len().max(1) as f64,
        p50_ms: percentile(&ms, 50.0),
        p95_ms: percentile(&ms, 95.0),
    }
}

pub fn bench_model(model: &Model, cfg: &BenchConfig) -> Result<BenchResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.imgsz;
    let x = Tensor::from_fn([1, 3, s, s], |_| rng.random::<f32>());
    let run = || -> Result<usize> {
        let maps = model.predict(&x)?;
        let dets = decode(&maps, cfg.conf).pop().unwrap_or_default();
        Ok(nms(&dets, cfg.nms_iou).len())
    };
    for _ in 0..cfg.warmup.max(1) {
        run()?;
    }
    let mut latencies = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters.max(1) {
        let t = Instant::now();
        std::hint::black_box(run()?);
        latencies.push(t.elapsed());
    }
    Ok(summarize(&model.cfg.variant_name(), model.audit().dedup_total, s, &latencies))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub hardware: HardwareInfo,
    /// The first entry is the reference for relative FPS.
    pub results: Vec<BenchResult>,
}

impl BenchReport {
    pub fn relative_fps(&self) -> Vec<f64> {
        let base = self.results.first().map_or(1.0, |r| r.fps);
        self.results.iter().map(|r| r.fps / base).collect()
    }

    pub fn table(&self) -> String {
        let h = &self.hardware;
        let mut s = format!(
            "cpu: {} ({} logical, {} used), {}-{}\n",
            h.cpu, h.logical_cpus, h.threads_used, h.os, h.arch
        );
        let _ = writeln!(s, "{:<28} {:>8} {:>6} {:>9} {:>9} {:>9} {:>9} {:>8}", "variant", "params", "imgsz", "fps", "mean ms", "p50 ms", "p95 ms", "rel fps");
        for (r, rel) in self.results.iter().zip(self.relative_fps()) {
            let _ = writeln!(
                s,
                "{:<28} {:>7.2}M {:>6} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>8.3}",
                r.variant,
                r.params as f64 / 1e6,
                r.imgsz,
                r.fps,
                r.mean_ms,
                r.p50_ms,
                r.p95_ms,
                rel
            );
        }
        s
    }

    pub fn key_values(&self) -> String {
        let h = &self.hardware;
        let mut s = format!(
            "hw.cpu={}\nhw.logical_cpus={}\nhw.threads_used={}\nhw.os={}\nhw.arch={}\n",
            h.cpu, h.logical_cpus, h.threads_used, h.os, h.arch
        );
        for (r, rel) in self.results.iter().zip(self.relative_fps()) {
            let v = &r.variant;
            let _ = writeln!(
                s,
                "{v}.params={}\n{v}.imgsz={}\n{v}.iters={}\n{v}.fps={:.3}\n{v}.mean_ms={:.3}\n{v}.p50_ms={:.3}\n{v}.p95_ms={:.3}\n{v}.relative_fps={:.4}",
                r.params, r.imgsz, r.iters, r.fps, r.mean_ms, r.p50_ms, r.p95_ms, rel
            );
        }
        s
    }
}
