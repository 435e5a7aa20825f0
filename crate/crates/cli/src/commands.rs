use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use proliferation::cure::{CancerHook, CancerPayload, CancerSpec, CureConfig, CureHooks, CureMode};
use proliferation::detector::{eta_from_report, exact_domination_set, risk_scores, DEFAULT_RHO};
use proliferation::generator::{
    estimate_w_avg, generate, random_init, FeatureHook, GenerateOptions, GenerationTrace, GeneratorConfig,
    GeneratorModel, NoHooks, NormalizationMode,
};
use proliferation::metrics::{difference_map, psnr, ssim, ImagePair};
use proliferation::rng::sample_latent;
use proliferation::stats::{
    load_stats, merge_stats, partial_from_means, sample_means, save_stats, stats_fingerprint, ChannelStats,
    DEFAULT_NUM_SAMPLES,
};
use proliferation::tensor::UpsampleMode;
use proliferation::weight_io::{read_container, write_container};

use crate::config::{absolute, usage, Run};
use crate::render;

const W_AVG_SAMPLES: usize = 10_000;
const W_AVG_SEED: u64 = 0;

fn default_t() -> f64 {
    proliferation::detector::DEFAULT_T
}
fn default_p() -> f64 {
    proliferation::cure::DEFAULT_P
}
fn default_c() -> f64 {
    proliferation::detector::DEFAULT_C
}
fn default_t_prime() -> f64 {
    proliferation::cure::DEFAULT_T_PRIME
}

// ---------------------------------------------------------------- shared

/// Which latent and noise draw to render, and whether to truncate.
#[derive(Args, Debug, Serialize)]
pub struct SampleFlags {
    /// Weight container.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Latent seed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Noise seed (defaults to the latent seed).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
    /// Truncation strength; omitted means no truncation.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi: Option<f32>,
}

/// Detection and cure thresholds.
#[derive(Args, Debug, Serialize)]
pub struct CureFlags {
    /// Statistics file from `estimate-stats`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_prime: Option<f64>,
    /// Inclusive `first,last` layer range the cure may touch.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_range: Option<Vec<usize>>,
}

#[derive(Args, Debug, Serialize)]
pub struct OutFlag {
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| usage(format!("--{what} is required")))
}

fn load_model(path: &Path, run: &mut Run) -> Result<GeneratorModel> {
    let model = read_container(path).with_context(|| format!("loading model {}", path.display()))?;
    run.model_fingerprint = Some(model.fingerprint().to_string());
    Ok(model)
}

fn load_stats_for(path: &Path, model: &GeneratorModel, run: &mut Run) -> Result<ChannelStats> {
    let stats = load_stats(path, model).with_context(|| format!("loading stats {}", path.display()))?;
    run.stats_fingerprint = Some(stats_fingerprint(&stats));
    Ok(stats)
}

fn ensure_w_avg(model: &mut GeneratorModel, psi: Option<f32>, run: &mut Run) -> Result<()> {
    if psi.is_some() && model.w_avg().is_none() {
        warn!("model has no w_avg; estimating from {W_AVG_SAMPLES} samples (seed {W_AVG_SEED})");
        estimate_w_avg(model, W_AVG_SAMPLES, W_AVG_SEED)?;
        run.seeds.insert("w_avg_seed".into(), W_AVG_SEED);
    }
    Ok(())
}

fn render_trace(
    model: &GeneratorModel,
    seed: u64,
    noise_seed: u64,
    psi: Option<f32>,
    hooks: &mut dyn FeatureHook,
    run: &mut Run,
) -> Result<GenerationTrace> {
    let z = sample_latent(model.config().latent_dim, seed);
    let options = GenerateOptions { psi, noise_seed };
    run.timed(1, || generate(model, &z, &options, hooks)).map_err(Into::into)
}

fn cure_config(mode: CureMode, t: f64, p: f64, c: f64, t_prime: f64, range: &Option<Vec<usize>>) -> Result<CureConfig> {
    let layer_range = match range.as_deref() {
        None => None,
        Some([a, b]) => Some((*a, *b)),
        Some(other) => return Err(usage(format!("layer_range needs two entries, got {other:?}"))),
    };
    let config = CureConfig { mode, t, p, c, t_prime, layer_range };
    config.validate()?;
    Ok(config)
}

fn write_heatmaps(run: &mut Run, prefix: &str, trace: &GenerationTrace) -> Result<()> {
    for rec in &trace.layers {
        let path = run.output(&format!("heatmaps/{prefix}layer{}.png", rec.info.layer_id))?;
        render::heatmap_grid(&rec.map).save(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn parse_normalization(s: &str) -> Result<NormalizationMode, String> {
    match s {
        "demod" | "demodulation" => Ok(NormalizationMode::Demodulation),
        "adain" => Ok(NormalizationMode::Adain),
        _ => Err(format!("unknown normalization {s:?}; expected demodulation or adain")),
    }
}

fn parse_upsample(s: &str) -> Result<UpsampleMode, String> {
    match s {
        "nearest" => Ok(UpsampleMode::Nearest),
        "bilinear" => Ok(UpsampleMode::Bilinear),
        _ => Err(format!("unknown upsample mode {s:?}; expected nearest or bilinear")),
    }
}

fn float_name(v: f64) -> String {
    format!("{v}")
}

// ---------------------------------------------------------------- init-model

#[derive(Args, Debug, Serialize)]
pub struct InitModelArgs {
    /// `demodulation` (or `demod`) or `adain`.
    #[arg(long, value_parser = parse_normalization)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormalizationMode>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// `nearest` or `bilinear`.
    #[arg(long, value_parser = parse_upsample)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upsample: Option<UpsampleMode>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_avg_samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_avg_seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlag,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitModelConfig {
    pub normalization: NormalizationMode,
    pub seed: u64,
    pub upsample: UpsampleMode,
    pub w_avg_samples: usize,
    pub w_avg_seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for InitModelConfig {
    fn default() -> Self {
        Self {
            normalization: NormalizationMode::Demodulation,
            seed: 42,
            upsample: UpsampleMode::Nearest,
            w_avg_samples: W_AVG_SAMPLES,
            w_avg_seed: W_AVG_SEED,
            out: None,
        }
    }
}

pub fn init_model(cfg: &InitModelConfig, run: &mut Run) -> Result<()> {
    let mut config = GeneratorConfig::toy(cfg.normalization);
    config.upsample = cfg.upsample;
    let mut model = random_init(&config, cfg.seed)?;
    if cfg.w_avg_samples > 0 {
        estimate_w_avg(&mut model, cfg.w_avg_samples, cfg.w_avg_seed)?;
    }
    run.seeds.insert("seed".into(), cfg.seed);
    run.seeds.insert("w_avg_seed".into(), cfg.w_avg_seed);
    run.model_fingerprint = Some(model.fingerprint().to_string());
    let path = run.output("model.fpt")?;
    write_container(&model, &path)?;
    info!("wrote {} ({})", path.display(), model.fingerprint());
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub sample: SampleFlags,
    /// channel_wise, layer_wise, pixel_wise, zero or off.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cure: Option<CureMode>,
    #[command(flatten)]
    #[serde(flatten)]
    pub cure_flags: CureFlags,
    /// Also write per-layer feature heatmaps.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlag,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub noise_seed: Option<u64>,
    pub psi: Option<f32>,
    pub cure: CureMode,
    pub stats: Option<PathBuf>,
    pub t: f64,
    pub p: f64,
    pub c: f64,
    pub t_prime: f64,
    pub layer_range: Option<Vec<usize>>,
    pub heatmaps: bool,
    pub out: Option<PathBuf>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            model: None,
            seed: 0,
            noise_seed: None,
            psi: None,
            cure: CureMode::Off,
            stats: None,
            t: default_t(),
            p: default_p(),
            c: default_c(),
            t_prime: default_t_prime(),
            layer_range: None,
            heatmaps: false,
            out: None,
        }
    }
}

pub fn synth(cfg: &SynthConfig, run: &mut Run) -> Result<()> {
    let mut model = load_model(require(&cfg.model, "model")?, run)?;
    ensure_w_avg(&mut model, cfg.psi, run)?;
    let noise_seed = cfg.noise_seed.unwrap_or(cfg.seed);
    run.seeds.insert("seed".into(), cfg.seed);
    run.seeds.insert("noise_seed".into(), noise_seed);
    let cure = cure_config(cfg.cure, cfg.t, cfg.p, cfg.c, cfg.t_prime, &cfg.layer_range)?;
    let (trace, log) = if cfg.cure == CureMode::Off {
        (render_trace(&model, cfg.seed, noise_seed, cfg.psi, &mut NoHooks, run)?, vec![])
    } else {
        let stats_path = require(&cfg.stats, "stats").map_err(|_| usage("--stats is required when --cure is not off"))?;
        let stats = load_stats_for(stats_path, &model, run)?;
        let mut hooks = CureHooks::new(cure, &stats, &model)?;
        let trace = render_trace(&model, cfg.seed, noise_seed, cfg.psi, &mut hooks, run)?;
        (trace, hooks.into_log())
    };
    render::save_rgb(&render::generated_to_rgb(&trace.image), &run.output("image.png")?)?;
    run.write_json("cure_log.json", &log)?;
    if cfg.heatmaps {
        write_heatmaps(run, "", &trace)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- estimate-stats

#[derive(Args, Debug, Serialize)]
pub struct EstimateStatsArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Number of sampled generations.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Also dump per-channel histograms of the sampled means.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlag,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateStatsConfig {
    pub model: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub histogram: bool,
    pub bins: usize,
    pub out: Option<PathBuf>,
}

impl Default for EstimateStatsConfig {
    fn default() -> Self {
        Self { model: None, n: DEFAULT_NUM_SAMPLES, seed: 0, histogram: false, bins: 20, out: None }
    }
}

fn histogram_csv(means: &[Vec<Vec<f64>>], bins: usize) -> String {
    let mut out = String::from("layer,channel,bin,lo,hi,count\n");
    for l in 0..means[0].len() {
        for j in 0..means[0][l].len() {
            let values: Vec<f64> = means.iter().map(|m| m[l][j]).collect();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
            let mut counts = vec![0usize; bins];
            for v in values {
                counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
            }
            for (b, n) in counts.iter().enumerate() {
                let a = lo + b as f64 * width;
                writeln!(out, "{l},{j},{b},{a},{},{n}", a + width).unwrap();
            }
        }
    }
    out
}

pub fn estimate_stats(cfg: &EstimateStatsConfig, run: &mut Run) -> Result<()> {
    let model = load_model(require(&cfg.model, "model")?, run)?;
    if cfg.n < 2 {
        return Err(usage(format!("--n must be at least 2, got {}", cfg.n)));
    }
    if cfg.histogram && cfg.bins == 0 {
        return Err(usage("--bins must be positive"));
    }
    run.seeds.insert("seed".into(), cfg.seed);
    let means = run.timed(cfg.n, || sample_means(&model, 0..cfg.n, cfg.seed))?;
    let stats = merge_stats(&[partial_from_means(&model, cfg.seed, 0, &means)])?;
    run.stats_fingerprint = Some(stats_fingerprint(&stats));
    save_stats(&stats, &run.output("stats.bin")?)?;
    if cfg.histogram {
        run.write("histograms.csv", histogram_csv(&means, cfg.bins))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- detect

#[derive(Args, Debug, Serialize)]
pub struct DetectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub sample: SampleFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlag,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub noise_seed: Option<u64>,
    pub psi: Option<f32>,
    pub stats: Option<PathBuf>,
    pub t: f64,
    pub c: f64,
    pub heatmaps: bool,
    pub out: Option<PathBuf>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            model: None,
            seed: 0,
            noise_seed: None,
            psi: None,
            stats: None,
            t: default_t(),
            c: default_c(),
            heatmaps: false,
            out: None,
        }
    }
}

/// One row per `(layer, channel)` cell, coloured by `r / max(r, 2t)`.
fn risk_image(report: &proliferation::detector::RiskReport) -> image::RgbImage {
    let cols = report.layers.iter().map(|l| l.r.len()).max().unwrap_or(1) as u32;
    let max_r = report.layers.iter().flat_map(|l| l.r.iter().cloned()).fold(2.0 * report.t, f64::max);
    let cell = 6;
    let mut img = image::RgbImage::from_pixel(cols * cell, report.layers.len() as u32 * cell, image::Rgb([255, 255, 255]));
    for (row, layer) in report.layers.iter().enumerate() {
        for (j, &r) in layer.r.iter().enumerate() {
            let mut color = render::viridis((r / max_r) as f32);
            if layer.flagged[j] {
                color = image::Rgb([220, 30, 30]);
            }
            for dy in 0..cell - 1 {
                for dx in 0..cell - 1 {
                    img.put_pixel(j as u32 * cell + dx, row as u32 * cell + dy, color);
                }
            }
        }
    }
    img
}

pub fn detect(cfg: &DetectConfig, run: &mut Run) -> Result<()> {
    let mut model = load_model(require(&cfg.model, "model")?, run)?;
    let stats = load_stats_for(require(&cfg.stats, "stats")?, &model, run)?;
    ensure_w_avg(&mut model, cfg.psi, run)?;
    let noise_seed = cfg.noise_seed.unwrap_or(cfg.seed);
    run.seeds.insert("seed".into(), cfg.seed);
    run.seeds.insert("noise_seed".into(), noise_seed);
    let trace = render_trace(&model, cfg.seed, noise_seed, cfg.psi, &mut NoHooks, run)?;
    let report = risk_scores(&trace, &stats, cfg.t, cfg.c)?;
    let mut csv = format!("# t={} c={}\nlayer,channel,r,flagged\n", cfg.t, cfg.c);
    for layer in &report.layers {
        for (j, (r, f)) in layer.r.iter().zip(&layer.flagged).enumerate() {
            writeln!(csv, "{},{j},{r},{f}", layer.layer_id).unwrap();
        }
    }
    run.write("risk.csv", csv)?;
    run.write_json(
        "summary.json",
        &serde_json::json!({
            "t": cfg.t,
            "c": cfg.c,
            "flagged_count": report.flagged_count(),
            "flagged": report.flagged(),
            "eta_proxy": eta_from_report(&report).eta,
        }),
    )?;
    render::save_rgb(&risk_image(&report), &run.output("risk.png")?)?;
    render::save_rgb(&render::generated_to_rgb(&trace.image), &run.output("image.png")?)?;
    if cfg.heatmaps {
        write_heatmaps(run, "", &trace)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- eta-trace

#[derive(Args, Debug, Serialize)]
pub struct EtaTraceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub sample: SampleFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// `layer,channel` for the exact correlation oracle.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Synthetic injection magnitude at the source position.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inject_m: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlag,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtaTraceConfig {
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub noise_seed: Option<u64>,
    pub psi: Option<f32>,
    pub stats: Option<PathBuf>,
    pub t: f64,
    pub c: f64,
    pub source: Option<Vec<usize>>,
    pub rho: f64,
    pub inject_m: Option<f64>,
    pub out: Option<PathBuf>,
}

impl Default for EtaTraceConfig {
    fn default() -> Self {
        Self {
            model: None,
            seed: 0,
            noise_seed: None,
            psi: None,
            stats: None,
            t: default_t(),
            c: default_c(),
            source: None,
            rho: DEFAULT_RHO,
            inject_m: None,
            out: None,
        }
    }
}

fn position(v: &Option<Vec<usize>>, what: &str) -> Result<Option<(usize, usize)>> {
    match v.as_deref() {
        None => Ok(None),
        Some([a, b]) => Ok(Some((*a, *b))),
        Some(other) => Err(usage(format!("{what} needs layer,channel, got {other:?}"))),
    }
}

pub fn eta_trace(cfg: &EtaTraceConfig, run: &mut Run) -> Result<()> {
    let mut model = load_model(require(&cfg.model, "model")?, run)?;
    let stats = load_stats_for(require(&cfg.stats, "stats")?, &model, run)?;
    ensure_w_avg(&mut model, cfg.psi, run)?;
    let noise_seed = cfg.noise_seed.unwrap_or(cfg.seed);
    run.seeds.insert("seed".into(), cfg.seed);
    run.seeds.insert("noise_seed".into(), noise_seed);
    let source = position(&cfg.source, "source")?;
    let trace = match (cfg.inject_m, source) {
        (Some(m), Some((layer, channel))) => {
            let spec = CancerSpec { layer, channel, payload: CancerPayload::Synthetic { m } };
            let mut hook = CancerHook::new(spec, &model, &stats, cfg.c)?;
            render_trace(&model, cfg.seed, noise_seed, cfg.psi, &mut hook, run)?
        }
        (Some(_), None) => return Err(usage("--inject-m needs --source")),
        _ => render_trace(&model, cfg.seed, noise_seed, cfg.psi, &mut NoHooks, run)?,
    };
    let proxy = eta_from_report(&risk_scores(&trace, &stats, cfg.t, cfg.c)?);
    let exact = source.map(|s| exact_domination_set(&trace, s, cfg.rho)).transpose()?;
    let mut csv = format!("# t={} c={} rho={}\nlayer,eta_proxy,eta_exact\n", cfg.t, cfg.c, cfg.rho);
    for (&id, e) in proxy.layer_ids.iter().zip(&proxy.eta) {
        let x = exact
            .as_ref()
            .and_then(|ex| ex.layer_ids.iter().position(|&l| l == id).map(|k| ex.eta[k].to_string()))
            .unwrap_or_default();
        writeln!(csv, "{id},{e},{x}").unwrap();
    }
    run.write("eta.csv", csv)?;
    Ok(())
}

// ---------------------------------------------------------------- inject

#[derive(Args, Debug, Serialize)]
pub struct InjectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub sample: SampleFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel: Option<usize>,
    /// Synthetic offset in units of max(σ, c).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    /// Copy the target map from the generation with this latent seed instead.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cure: Option<CureMode>,
    #[command(flatten)]
    #[serde(flatten)]
    pub cure_flags: CureFlags,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlag,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectConfig {
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub noise_seed: Option<u64>,
    pub psi: Option<f32>,
    pub layer: usize,
    pub channel: usize,
    pub m: f64,
    pub payload_seed: Option<u64>,
    pub cure: CureMode,
    pub stats: Option<PathBuf>,
    pub t: f64,
    pub p: f64,
    pub c: f64,
    pub t_prime: f64,
    pub layer_range: Option<Vec<usize>>,
    pub heatmaps: bool,
    pub out: Option<PathBuf>,
}

impl Default for InjectConfig {
    fn default() -> Self {
        Self {
            model: None,
            seed: 0,
            noise_seed: None,
            psi: None,
            layer: 1,
            channel: 0,
            m: 5.0,
            payload_seed: None,
            cure: CureMode::ChannelWise,
            stats: None,
            t: default_t(),
            p: default_p(),
            c: default_c(),
            t_prime: default_t_prime(),
            layer_range: None,
            heatmaps: false,
            out: None,
        }
    }
}

pub fn inject(cfg: &InjectConfig, run: &mut Run) -> Result<()> {
    let mut model = load_model(require(&cfg.model, "model")?, run)?;
    let stats = load_stats_for(require(&cfg.stats, "stats")?, &model, run)?;
    ensure_w_avg(&mut model, cfg.psi, run)?;
    let noise_seed = cfg.noise_seed.unwrap_or(cfg.seed);
    run.seeds.insert("seed".into(), cfg.seed);
    run.seeds.insert("noise_seed".into(), noise_seed);
    let payload = match cfg.payload_seed {
        None => CancerPayload::Synthetic { m: cfg.m },
        Some(ps) => {
            run.seeds.insert("payload_seed".into(), ps);
            let donor = render_trace(&model, ps, ps, cfg.psi, &mut NoHooks, run)?;
            let rec = donor
                .layers
                .get(cfg.layer)
                .filter(|r| cfg.channel < r.info.channels)
                .ok_or(proliferation::Error::InvalidPosition { layer: cfg.layer, channel: cfg.channel })?;
            let res = rec.info.resolution;
            CancerPayload::Stored(proliferation::Tensor::new(vec![res, res], rec.map.plane(0, cfg.channel).to_vec())?)
        }
    };
    let spec = CancerSpec { layer: cfg.layer, channel: cfg.channel, payload };
    let hook = CancerHook::new(spec, &model, &stats, cfg.c)?;

    let baseline = render_trace(&model, cfg.seed, noise_seed, cfg.psi, &mut NoHooks, run)?;
    let injected = render_trace(&model, cfg.seed, noise_seed, cfg.psi, &mut hook.clone(), run)?;
    let eta = |t: &GenerationTrace| -> Result<Vec<f64>> { Ok(eta_from_report(&risk_scores(t, &stats, cfg.t, cfg.c)?).eta) };
    let (eta_base, eta_inj) = (eta(&baseline)?, eta(&injected)?);
    render::save_rgb(&render::generated_to_rgb(&baseline.image), &run.output("baseline.png")?)?;
    render::save_rgb(&render::generated_to_rgb(&injected.image), &run.output("injected.png")?)?;

    let mut eta_cured = None;
    if cfg.cure != CureMode::Off {
        let cure = cure_config(cfg.cure, cfg.t, cfg.p, cfg.c, cfg.t_prime, &cfg.layer_range)?;
        let mut hooks = (hook, CureHooks::new(cure, &stats, &model)?);
        let cured = render_trace(&model, cfg.seed, noise_seed, cfg.psi, &mut hooks, run)?;
        render::save_rgb(&render::generated_to_rgb(&cured.image), &run.output("cured.png")?)?;
        run.write_json("cure_log.json", &hooks.1.log())?;
        eta_cured = Some(eta(&cured)?);
    }
    let mut csv = format!("# t={} c={}\nlayer,baseline,injected,cured\n", cfg.t, cfg.c);
    for l in 0..eta_base.len() {
        let cured = eta_cured.as_ref().map(|e| e[l].to_string()).unwrap_or_default();
        writeln!(csv, "{l},{},{},{cured}", eta_base[l], eta_inj[l]).unwrap();
    }
    run.write("eta.csv", csv)?;
    if cfg.heatmaps {
        write_heatmaps(run, "baseline_", &baseline)?;
        write_heatmaps(run, "injected_", &injected)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
    /// Thresholds to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    /// Truncation strengths for the baseline row.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi: Option<Vec<f32>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cure: Option<CureMode>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_prime: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlag,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub model: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub seed: u64,
    pub noise_seed: Option<u64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub psi: Vec<f32>,
    pub cure: CureMode,
    pub c: f64,
    pub t_prime: f64,
    pub out: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            model: None,
            stats: None,
            seed: 0,
            noise_seed: None,
            t: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            p: vec![1.0, 2.0, 3.0],
            psi: vec![0.55, 0.65, 0.75, 0.85, 0.95],
            cure: CureMode::ChannelWise,
            c: default_c(),
            t_prime: default_t_prime(),
            out: None,
        }
    }
}

pub fn sweep(cfg: &SweepConfig, run: &mut Run) -> Result<()> {
    let mut model = load_model(require(&cfg.model, "model")?, run)?;
    let stats = load_stats_for(require(&cfg.stats, "stats")?, &model, run)?;
    if cfg.cure == CureMode::Off {
        return Err(usage("sweep needs a cure mode other than off"));
    }
    ensure_w_avg(&mut model, (!cfg.psi.is_empty()).then_some(1.0), run)?;
    let noise_seed = cfg.noise_seed.unwrap_or(cfg.seed);
    run.seeds.insert("seed".into(), cfg.seed);
    run.seeds.insert("noise_seed".into(), noise_seed);

    let uncured = render_trace(&model, cfg.seed, noise_seed, None, &mut NoHooks, run)?;
    let uncured_rgb = render::generated_to_rgb(&uncured.image);
    render::save_rgb(&uncured_rgb, &run.output("uncured.png")?)?;
    let mut summary = String::from("# images in [0,1]; psnr_db and ssim against uncured.png\nkind,t,p,psi,psnr_db,ssim,actions\n");
    let score = |trace: &GenerationTrace| -> Result<(f64, f64)> {
        let pair = ImagePair::from_generated(&uncured.image, &trace.image)?;
        Ok((psnr(&pair), ssim(&pair)?))
    };

    let mut grid = vec![];
    for &t in &cfg.t {
        let mut row = vec![];
        for &p in &cfg.p {
            let cure = cure_config(cfg.cure, t, p, cfg.c, cfg.t_prime, &None)?;
            let mut hooks = CureHooks::new(cure, &stats, &model)?;
            let trace = render_trace(&model, cfg.seed, noise_seed, None, &mut hooks, run)?;
            let rgb = render::generated_to_rgb(&trace.image);
            render::save_rgb(&rgb, &run.output(&format!("cure_t{}_p{}.png", float_name(t), float_name(p)))?)?;
            let (db, s) = score(&trace)?;
            writeln!(summary, "cure,{t},{p},,{db},{s},{}", hooks.log().len()).unwrap();
            row.push(rgb);
        }
        grid.push(row);
    }
    render::save_rgb(&render::tile_images(&grid), &run.output("grid_cure.png")?)?;

    let mut psi_row = vec![];
    for &psi in &cfg.psi {
        let trace = render_trace(&model, cfg.seed, noise_seed, Some(psi), &mut NoHooks, run)?;
        let rgb = render::generated_to_rgb(&trace.image);
        render::save_rgb(&rgb, &run.output(&format!("psi_{}.png", float_name(psi as f64)))?)?;
        let (db, s) = score(&trace)?;
        writeln!(summary, "truncation,,,{psi},{db},{s},").unwrap();
        psi_row.push(rgb);
    }
    if !psi_row.is_empty() {
        render::save_rgb(&render::tile_images(&[psi_row]), &run.output("grid_psi.png")?)?;
    }
    run.write("summary.csv", summary)?;
    Ok(())
}

// ---------------------------------------------------------------- compare

#[derive(Args, Debug, Serialize)]
pub struct CompareArgs {
    /// Reference PNG.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    /// Candidate PNG.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlag,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub reference: Option<PathBuf>,
    pub candidate: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn compare(cfg: &CompareConfig, run: &mut Run) -> Result<()> {
    let a = render::rgb_to_unit(&render::load_rgb(require(&cfg.reference, "reference")?)?);
    let b = render::rgb_to_unit(&render::load_rgb(require(&cfg.candidate, "candidate")?)?);
    let pair = ImagePair::new(&a, &b)?;
    let report = serde_json::json!({
        "range": "[0,1]",
        "psnr_db": psnr(&pair),
        "ssim": ssim(&pair)?,
    });
    run.write_json("report.json", &report)?;
    render::save_gray(&render::unit_to_gray(&difference_map(&pair)), &run.output("diff.png")?)?;
    Ok(())
}

/// Makes every input path in a resolved config absolute so a manifest can be
/// replayed from any working directory.
pub fn absolutize(value: &mut serde_json::Value) -> Result<()> {
    const PATH_KEYS: [&str; 4] = ["model", "stats", "reference", "candidate"];
    if let serde_json::Value::Object(map) = value {
        for key in PATH_KEYS {
            if let Some(serde_json::Value::String(s)) = map.get(key) {
                let abs = absolute(Path::new(s))?;
                map.insert(key.into(), serde_json::Value::String(abs.to_string_lossy().into_owned()));
            }
        }
    }
    Ok(())
}
