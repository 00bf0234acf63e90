//! Latency / RTF benchmarking with a concurrent RAM and CPU-temperature sampler.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::audio::AudioClip;
use crate::flops::flops_model;
use crate::model::{transcribe, ByteTokenizer, ModelBundle, ModelError, Tokenizer};
use crate::tensor::FlopCounter;

pub const THROTTLE_TEMP_C: f64 = 80.0;
pub const CRITICAL_TEMP_C: f64 = 85.0;
pub const DEFAULT_PERIOD_S: f64 = 0.5;
pub const DEFAULT_RUNS: usize = 10;
pub const DEFAULT_MAX_TOKENS: usize = 224;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("nothing to benchmark: {0}")]
    Empty(&'static str),
    #[error("n_runs must be at least 1")]
    NoRuns,
    #[error("clip {0} has zero duration")]
    ZeroDuration(String),
    #[error("telemetry period must be positive, got {0}")]
    BadPeriod(f64),
    #[error("telemetry read failed: {0}")]
    Telemetry(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Result of the timed section of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineOutput {
    pub text: String,
    pub n_decoded_tokens: usize,
    pub gflops: f64,
}

/// Something that transcribes a clip. `run` is the timed section; anything
/// in it counts towards latency.
pub trait Engine: Sync {
    fn name(&self) -> &str;
    fn run(&self, clip: &AudioClip, max_tokens: usize) -> Result<EngineOutput, BenchError>;
    /// Analytic GFLOPs for a run that produced `n_decoded_tokens`; called outside the timer.
    fn gflops(&self, n_decoded_tokens: usize) -> f64;
}

/// Sleeps for a fixed time instead of computing.
#[derive(Debug, Clone)]
pub struct SleepStub {
    pub name: String,
    pub compute: Duration,
    pub n_decoded_tokens: usize,
    pub gflops: f64,
}

impl SleepStub {
    pub fn new(compute: Duration) -> Self {
        Self {
            name: "sleep-stub".into(),
            compute,
            n_decoded_tokens: 0,
            gflops: 0.0,
        }
    }
}

impl Engine for SleepStub {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(&self, _clip: &AudioClip, _max_tokens: usize) -> Result<EngineOutput, BenchError> {
        std::thread::sleep(self.compute);
        Ok(EngineOutput {
            text: String::new(),
            n_decoded_tokens: self.n_decoded_tokens,
            gflops: self.gflops,
        })
    }

    fn gflops(&self, _n: usize) -> f64 {
        self.gflops
    }
}

/// A loaded model: log-mel, encode, greedy decode and detokenize.
/// Token budgets larger than the text context are clipped to it.
pub struct BundleEngine {
    pub name: String,
    pub bundle: ModelBundle,
    pub tokenizer: Box<dyn Tokenizer>,
}

impl BundleEngine {
    pub fn new(name: impl Into<String>, bundle: ModelBundle) -> Self {
        let tokenizer = Box::new(ByteTokenizer::new(bundle.config.n_vocab));
        Self {
            name: name.into(),
            bundle,
            tokenizer,
        }
    }
}

impl Engine for BundleEngine {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(&self, clip: &AudioClip, max_tokens: usize) -> Result<EngineOutput, BenchError> {
        let max_tokens = max_tokens.min(self.bundle.config.n_text_ctx);
        let t = transcribe(&self.bundle, clip, self.tokenizer.as_ref(), max_tokens, &mut FlopCounter::new())?;
        Ok(EngineOutput {
            text: t.text,
            n_decoded_tokens: t.n_decoded_tokens,
            gflops: 0.0,
        })
    }

    fn gflops(&self, n: usize) -> f64 {
        flops_model(&self.bundle, n).gflops
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub run_index: usize,
    pub audio_duration_s: f64,
    pub latency_s: f64,
    pub rtf: f64,
    pub n_decoded_tokens: usize,
    pub gflops: f64,
}

/// One timed run. The engine must already be warm.
pub fn bench_once(engine: &dyn Engine, clip: &AudioClip, max_tokens: usize, run_index: usize) -> Result<BenchRecord, BenchError> {
    let audio_duration_s = clip.duration_s();
    if !(audio_duration_s > 0.0) {
        return Err(BenchError::ZeroDuration(engine.name().to_string()));
    }
    let start = Instant::now();
    let out = engine.run(clip, max_tokens)?;
    let latency_s = start.elapsed().as_secs_f64();
    Ok(BenchRecord {
        run_index,
        audio_duration_s,
        latency_s,
        rtf: latency_s / audio_duration_s,
        n_decoded_tokens: out.n_decoded_tokens,
        gflops: engine.gflops(out.n_decoded_tokens),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TelemetrySample {
    pub t_monotonic_s: f64,
    pub ram_used_pct: f64,
    pub cpu_temp_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThermalState {
    Normal,
    ThrottlingRange,
    Critical,
}

impl ThermalState {
    pub fn of(temp_c: f64) -> Self {
        if temp_c >= CRITICAL_TEMP_C {
            ThermalState::Critical
        } else if temp_c >= THROTTLE_TEMP_C {
            ThermalState::ThrottlingRange
        } else {
            ThermalState::Normal
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ThermalState::Normal => "normal",
            ThermalState::ThrottlingRange => "throttling range",
            ThermalState::Critical => "critical",
        }
    }
}

/// Returns `(ram_used_pct, cpu_temp_c)`.
pub trait TelemetryProvider: Send {
    fn read(&mut self) -> Result<(f64, f64), BenchError>;
}

/// Reads a meminfo-style file and a thermal sensor file in millidegrees.
#[derive(Debug, Clone)]
pub struct SysfsProvider {
    pub meminfo: PathBuf,
    pub thermal: PathBuf,
}

pub const MEMINFO_ENV: &str = "EDGEASR_MEMINFO";
pub const THERMAL_ENV: &str = "EDGEASR_THERMAL";

impl Default for SysfsProvider {
    fn default() -> Self {
        Self {
            meminfo: "/proc/meminfo".into(),
            thermal: "/sys/class/thermal/thermal_zone0/temp".into(),
        }
    }
}

impl SysfsProvider {
    /// Defaults, overridden by `EDGEASR_MEMINFO` / `EDGEASR_THERMAL`.
    pub fn from_env() -> Self {
        let mut p = Self::default();
        if let Some(v) = std::env::var_os(MEMINFO_ENV) {
            p.meminfo = v.into();
        }
        if let Some(v) = std::env::var_os(THERMAL_ENV) {
            p.thermal = v.into();
        }
        p
    }
}

fn meminfo_kb(text: &str, key: &str) -> Option<f64> {
    text.lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix(':'))
        .and_then(|rest| rest.split_whitespace().next()?.parse().ok())
}

/// Used share of RAM from meminfo: `1 − MemAvailable/MemTotal`.
pub fn parse_meminfo(text: &str) -> Result<f64, BenchError> {
    let total = meminfo_kb(text, "MemTotal").ok_or_else(|| BenchError::Telemetry("MemTotal missing".into()))?;
    let avail = meminfo_kb(text, "MemAvailable").ok_or_else(|| BenchError::Telemetry("MemAvailable missing".into()))?;
    if !(total > 0.0) {
        return Err(BenchError::Telemetry("MemTotal is zero".into()));
    }
    Ok((100.0 * (1.0 - avail / total)).clamp(0.0, 100.0))
}

pub fn parse_millidegrees(text: &str) -> Result<f64, BenchError> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| BenchError::Telemetry(format!("bad thermal reading {:?}", text.trim())))?;
    Ok(v / 1000.0)
}

impl TelemetryProvider for SysfsProvider {
    fn read(&mut self) -> Result<(f64, f64), BenchError> {
        let read = |p: &PathBuf| {
            std::fs::read_to_string(p).map_err(|e| BenchError::Telemetry(format!("{}: {e}", p.display())))
        };
        let ram = parse_meminfo(&read(&self.meminfo)?)?;
        let temp = parse_millidegrees(&read(&self.thermal)?)?;
        Ok((ram, temp))
    }
}

/// Replays a fixed series, repeating the last value; `None` entries fail.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    series: Vec<Option<(f64, f64)>>,
    pos: usize,
}

impl SyntheticProvider {
    pub fn new(series: Vec<Option<(f64, f64)>>) -> Self {
        Self { series, pos: 0 }
    }

    pub fn constant(ram_pct: f64, temp_c: f64) -> Self {
        Self::new(vec![Some((ram_pct, temp_c))])
    }

    /// Temperature rising linearly from `from_c` to `to_c` over `steps` reads.
    pub fn ramp(ram_pct: f64, from_c: f64, to_c: f64, steps: usize) -> Self {
        let n = steps.max(2);
        Self::new(
            (0..n)
                .map(|i| Some((ram_pct, from_c + (to_c - from_c) * i as f64 / (n - 1) as f64)))
                .collect(),
        )
    }
}

impl TelemetryProvider for SyntheticProvider {
    fn read(&mut self) -> Result<(f64, f64), BenchError> {
        let idx = self.pos.min(self.series.len().saturating_sub(1));
        self.pos += 1;
        self.series
            .get(idx)
            .copied()
            .flatten()
            .ok_or_else(|| BenchError::Telemetry("synthetic failure".into()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TelemetrySeries {
    pub period_s: f64,
    pub samples: Vec<TelemetrySample>,
    pub skipped: usize,
}

impl TelemetrySeries {
    pub fn throttle_events(&self) -> usize {
        self.samples.iter().filter(|s| s.cpu_temp_c >= THROTTLE_TEMP_C).count()
    }

    pub fn critical_events(&self) -> usize {
        self.samples.iter().filter(|s| s.cpu_temp_c >= CRITICAL_TEMP_C).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_monotonic_s,ram_used_pct,cpu_temp_c,thermal_state\n");
        for x in &self.samples {
            let _ = writeln!(
                s,
                "{:.6},{:.3},{:.3},{}",
                x.t_monotonic_s,
                x.ram_used_pct,
                x.cpu_temp_c,
                ThermalState::of(x.cpu_temp_c).as_str()
            );
        }
        s
    }
}

#[derive(Default)]
struct Sink {
    samples: Vec<TelemetrySample>,
    skipped: usize,
}

/// Background sampler thread. Samples are taken on a fixed schedule
/// `origin + k·period`; a failed read is logged and skipped.
pub struct TelemetrySampler {
    stop: mpsc::Sender<()>,
    handle: JoinHandle<()>,
    sink: Arc<Mutex<Sink>>,
    period_s: f64,
}

impl TelemetrySampler {
    pub fn start(mut provider: Box<dyn TelemetryProvider>, period_s: f64, origin: Instant) -> Result<Self, BenchError> {
        if !(period_s > 0.0) || !period_s.is_finite() {
            return Err(BenchError::BadPeriod(period_s));
        }
        let (stop, rx) = mpsc::channel::<()>();
        let sink = Arc::new(Mutex::new(Sink::default()));
        let shared = Arc::clone(&sink);
        let period = Duration::from_secs_f64(period_s);
        let handle = std::thread::spawn(move || {
            let mut next = Instant::now();
            loop {
                let t = origin.elapsed().as_secs_f64();
                let read = provider.read();
                let mut s = shared.lock().expect("telemetry sink poisoned");
                match read {
                    Ok((ram, temp)) => s.samples.push(TelemetrySample {
                        t_monotonic_s: t,
                        ram_used_pct: ram,
                        cpu_temp_c: temp,
                    }),
                    Err(e) => {
                        log::warn!("telemetry sample skipped: {e}");
                        s.skipped += 1;
                    }
                }
                drop(s);
                next += period;
                let wait = next.saturating_duration_since(Instant::now());
                match rx.recv_timeout(wait) {
                    Err(RecvTimeoutError::Timeout) => {}
                    _ => break,
                }
            }
        });
        Ok(Self {
            stop,
            handle,
            sink,
            period_s,
        })
    }

    pub fn finish(self) -> TelemetrySeries {
        let _ = self.stop.send(());
        let _ = self.handle.join();
        let sink = std::mem::take(&mut *self.sink.lock().expect("telemetry sink poisoned"));
        TelemetrySeries {
            period_s: self.period_s,
            samples: sink.samples,
            skipped: sink.skipped,
        }
    }
}

/// Samples `provider` for `duration` and returns the series.
pub fn sample_telemetry(provider: Box<dyn TelemetryProvider>, period_s: f64, duration: Duration) -> Result<TelemetrySeries, BenchError> {
    let s = TelemetrySampler::start(provider, period_s, Instant::now())?;
    std::thread::sleep(duration);
    Ok(s.finish())
}

/// Population mean and variance.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchCell {
    pub model: String,
    pub audio: String,
    pub audio_duration_s: f64,
    pub records: Vec<BenchRecord>,
    pub mean_rtf: Option<f64>,
    pub var_rtf: Option<f64>,
    pub mean_latency_s: Option<f64>,
    pub var_latency_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchMeta {
    pub n_runs: usize,
    pub warmup_runs: usize,
    pub max_tokens: usize,
    pub variance: &'static str,
    pub clock: &'static str,
    pub throttle_temp_c: f64,
    pub critical_temp_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub schema_version: u32,
    pub meta: BenchMeta,
    pub cells: Vec<BenchCell>,
    pub telemetry: TelemetrySeries,
    pub throttle_events: usize,
    pub critical_events: usize,
}

impl BenchSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn records_csv(&self) -> String {
        let mut s = String::from("model,audio,run_index,audio_duration_s,latency_s,rtf,n_decoded_tokens,gflops\n");
        for c in &self.cells {
            for r in &c.records {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    c.model, c.audio, r.run_index, r.audio_duration_s, r.latency_s, r.rtf, r.n_decoded_tokens, r.gflops
                );
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n_runs: usize,
    pub max_tokens: usize,
    pub telemetry_period_s: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_runs: DEFAULT_RUNS,
            max_tokens: DEFAULT_MAX_TOKENS,
            telemetry_period_s: DEFAULT_PERIOD_S,
        }
    }
}

fn run_cell(engine: &dyn Engine, name: &str, clip: &AudioClip, cfg: &BenchConfig) -> BenchCell {
    let mut cell = BenchCell {
        model: engine.name().to_string(),
        audio: name.to_string(),
        audio_duration_s: clip.duration_s(),
        records: Vec::new(),
        mean_rtf: None,
        var_rtf: None,
        mean_latency_s: None,
        var_latency_s: None,
        error: None,
    };
    let outcome = (|| {
        if !(clip.duration_s() > 0.0) {
            return Err(BenchError::ZeroDuration(name.to_string()));
        }
        engine.run(clip, cfg.max_tokens)?;
        for i in 0..cfg.n_runs {
            cell.records.push(bench_once(engine, clip, cfg.max_tokens, i)?);
        }
        Ok(())
    })();
    match outcome {
        Ok(()) => {
            let rtf: Vec<f64> = cell.records.iter().map(|r| r.rtf).collect();
            let lat: Vec<f64> = cell.records.iter().map(|r| r.latency_s).collect();
            let (m, v) = mean_variance(&rtf);
            cell.mean_rtf = Some(m);
            cell.var_rtf = Some(v);
            let (m, v) = mean_variance(&lat);
            cell.mean_latency_s = Some(m);
            cell.var_latency_s = Some(v);
        }
        Err(e) => {
            log::warn!("bench cell {}/{name} failed: {e}", engine.name());
            cell.records.clear();
            cell.error = Some(e.to_string());
        }
    }
    cell
}

/// Every engine against every clip, sequentially, with one untimed warm-up
/// run per cell and the sampler running throughout.
pub fn bench_suite(
    engines: &[&dyn Engine],
    clips: &[(String, AudioClip)],
    cfg: &BenchConfig,
    provider: Option<Box<dyn TelemetryProvider>>,
) -> Result<BenchSummary, BenchError> {
    if engines.is_empty() {
        return Err(BenchError::Empty("no models"));
    }
    if clips.is_empty() {
        return Err(BenchError::Empty("no clips"));
    }
    if cfg.n_runs == 0 {
        return Err(BenchError::NoRuns);
    }
    let origin = Instant::now();
    let sampler = provider
        .map(|p| TelemetrySampler::start(p, cfg.telemetry_period_s, origin))
        .transpose()?;
    let mut cells = Vec::new();
    for engine in engines {
        for (name, clip) in clips {
            cells.push(run_cell(*engine, name, clip, cfg));
        }
    }
    let telemetry = sampler.map(TelemetrySampler::finish).unwrap_or(TelemetrySeries {
        period_s: cfg.telemetry_period_s,
        ..Default::default()
    });
    Ok(BenchSummary {
        schema_version: 1,
        meta: BenchMeta {
            n_runs: cfg.n_runs,
            warmup_runs: 1,
            max_tokens: cfg.max_tokens,
            variance: "population",
            clock: "monotonic",
            throttle_temp_c: THROTTLE_TEMP_C,
            critical_temp_c: CRITICAL_TEMP_C,
        },
        throttle_events: telemetry.throttle_events(),
        critical_events: telemetry.critical_events(),
        cells,
        telemetry,
    })
}
