//! `roadgps` command-line front end.
//!
//! Every subcommand resolves a flat JSON config: built-in defaults, then the
//! `--config` file, then flags. The resolved config (minus the output
//! directory) is embedded in each artifact as provenance, which is what
//! `verify` replays.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 verification failure. Failures also print one JSON line on stderr.

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::augment::{apply_pipeline, AugmentConfig, AugmentTrace};
use crate::error::Error;
use crate::eval::{
    degradation_curve, mean_iou, split_dataset, write_curve_csv, DegradationAxis, Extractor,
    LabeledPoints, Split, SweepGrid,
};
use crate::extract::{kde_extract, sweep_params, write_sweep_csv, ExtractionParams, LabeledRaster, Mask};
use crate::geo::{read_manifest, write_manifest, SpatialIndex, TileSpec, DEFAULT_RESOLUTION};
use crate::ingest::{parse_samples, read_tracks, GpsSample, Schema};
use crate::nn::{
    adjoint_check, dir_tconv1d, dir_tconv1d_strided, finite_diff_check, parity_check, BaselineBank,
    DecoderBlock, DecoderBlockParams, Direction, DirectionalTConv, Filter1D, Tensor4, TConv3x3,
};
use crate::png_io::{read_mask, write_mask};
use crate::render::{render_tile, Feature, Raster, RenderConfig, RenderMode, Scale, DENSITY};
use crate::rfr::{read_raster, write_raster};
use crate::stats::{write_histogram_csv, StatsAccumulator};
use crate::synth::{generate_dataset, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Verify(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(Error::Json(e))
    }
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Lib(Error::Config(_)) => EXIT_USAGE,
            CliError::Verify(_) => EXIT_VERIFY,
            CliError::Lib(_) => EXIT_DATA,
        }
    }

    fn line(&self) -> Value {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Verify(m) => ("verification", m.clone()),
            CliError::Lib(e) => (e.kind(), e.to_string()),
        };
        json!({"error": kind, "exit_code": self.code(), "message": msg})
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "roadgps", version, about = "GPS feeds to road rasters and masks")]
struct Cli {
    /// JSON file of flag defaults (flags override it).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-tile work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, validate and per-vehicle sort a sample file.
    Ingest(IoArgs),
    /// Interval/speed histograms and measurement resolution.
    Stats(IoArgs),
    /// Rasterize samples onto every tile of a manifest.
    Render(RenderArgs),
    /// Render with seeded point-set augmentation.
    Augment(AugmentArgs),
    /// Threshold a smoothed count raster into a road mask.
    ExtractKde(ExtractArgs),
    /// Grid-search KDE parameters against labels.
    Sweep(SweepArgs),
    /// IoU of predicted masks against labels.
    EvalIou(EvalArgs),
    /// Held-out IoU as the input is subsampled or coarsened.
    Curve(CurveArgs),
    /// Re-run the config recorded in an artifact and compare bytes.
    Verify(VerifyArgs),
    /// Gradient, adjoint and parameter parity checks of the conv kernels.
    ConvCheck(ConvCheckArgs),
    /// Generate the labelled synthetic road dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct IoArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// The first line is a header.
    #[arg(long)]
    header: bool,
}

#[derive(Args, Debug)]
struct RenderFlags {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    tiles: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    header: bool,
    /// binary, count or gaussian.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    kernel: Option<u32>,
    /// linear or log.
    #[arg(long)]
    scale: Option<String>,
    /// Comma-separated feature channels: interval, speed, bearing_sin.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<String>>,
    /// Add the line segment channel.
    #[arg(long)]
    segments: bool,
    #[arg(long)]
    max_segment_interval: Option<f64>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    render: RenderFlags,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[command(flatten)]
    render: RenderFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// `lo,hi` subsampling ratio range.
    #[arg(long, value_delimiter = ',')]
    subsample_range: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    factors: Option<Vec<u32>>,
    /// Perturbation standard deviation in meters.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    omit_probability: Option<f64>,
    #[arg(long)]
    omit_size: Option<u32>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// An RFR1 count raster or a directory of them.
    #[arg(long)]
    rasters: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    kernel: Option<u32>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    scale: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    rasters: Option<PathBuf>,
    /// Directory of `<tile_id>.png` label masks.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    kernels: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    scale: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of `<tile_id>.png` predicted masks.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    tiles: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CurveArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    tiles: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    header: bool,
    /// subsample_ratio or resolution_factor.
    #[arg(long)]
    axis: Option<String>,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed KDE kernel; with `--threshold` disables tuning.
    #[arg(long)]
    kernel: Option<u32>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Re-tune KDE parameters at every level.
    #[arg(long)]
    retune: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// RFR1 artifact to reproduce.
    #[arg(long)]
    artifact: Option<PathBuf>,
    /// Scratch directory for the re-run.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConvCheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Coordinates sampled per finite difference check.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tiles: Option<usize>,
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Flag overrides as a JSON object; absent flags are left out.
#[derive(Default)]
struct Overrides(Map<String, Value>);

impl Overrides {
    fn put<T: Serialize>(&mut self, key: &str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.insert(key.into(), serde_json::to_value(v).expect("plain value"));
        }
        self
    }

    fn flag(&mut self, key: &str, set: bool) -> &mut Self {
        if set {
            self.0.insert(key.into(), Value::Bool(true));
        }
        self
    }
}

/// `defaults <- file <- flags`, keeping only keys the config type knows.
fn resolve<T: Serialize + DeserializeOwned>(defaults: T, file: &Map<String, Value>, flags: Overrides) -> CliResult<T> {
    let Value::Object(mut base) = serde_json::to_value(defaults)? else {
        unreachable!("configs serialize to objects");
    };
    for layer in [file, &flags.0] {
        for (k, v) in layer {
            if base.contains_key(k) {
                base.insert(k.clone(), v.clone());
            }
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn require(path: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    match path {
        Some(p) if !p.as_os_str().is_empty() => Ok(p.clone()),
        _ => Err(CliError::Usage(format!("--{name} is required"))),
    }
}

fn require_existing(path: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    let p = require(path, name)?;
    if !p.exists() {
        return Err(CliError::Usage(format!("--{name} {} does not exist", p.display())));
    }
    Ok(p)
}

fn out_dir(path: &Option<PathBuf>) -> CliResult<PathBuf> {
    let p = require(path, "out")?;
    fs::create_dir_all(&p)?;
    Ok(p)
}

fn provenance(command: &str, config: &impl Serialize) -> CliResult<Value> {
    let mut cfg = serde_json::to_value(config)?;
    if let Value::Object(m) = &mut cfg {
        m.remove("out");
    }
    Ok(json!({
        "tool": "roadgps",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg,
    }))
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    Ok(())
}

// ---- ingest / stats ----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IoConfig {
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    header: bool,
    schema: Schema,
}

impl IoConfig {
    fn resolve(a: &IoArgs, file: &Map<String, Value>) -> CliResult<Self> {
        let mut o = Overrides::default();
        o.put("input", &a.input).put("out", &a.out).flag("header", a.header);
        let cfg: IoConfig = resolve(
            IoConfig {
                input: None,
                out: None,
                header: false,
                schema: Schema::default(),
            },
            file,
            o,
        )?;
        require_existing(&cfg.input, "input")?;
        Ok(cfg)
    }

    fn schema(&self) -> Schema {
        self.schema.clone().with_header(self.header)
    }
}

fn open(path: &Path) -> CliResult<BufReader<fs::File>> {
    Ok(BufReader::with_capacity(1 << 16, fs::File::open(path)?))
}

fn cmd_ingest(cfg: IoConfig) -> CliResult<Value> {
    let input = cfg.input.clone().expect("checked");
    let out = out_dir(&cfg.out)?;
    let (tracks, summary) = read_tracks(open(&input)?, cfg.schema())?;
    let mut w = BufWriter::new(fs::File::create(out.join("samples.csv"))?);
    for s in tracks.iter().flat_map(|t| &t.samples) {
        writeln!(w, "{}", s.to_csv_record())?;
    }
    w.flush()?;
    let report = json!({
        "summary": summary,
        "vehicles": tracks.len(),
        "provenance": provenance("ingest", &cfg)?,
    });
    write_json(&out.join("ingest.json"), &report)?;
    Ok(json!({"command": "ingest", "summary": summary, "vehicles": tracks.len()}))
}

fn cmd_stats(cfg: IoConfig) -> CliResult<Value> {
    let input = cfg.input.clone().expect("checked");
    let out = out_dir(&cfg.out)?;
    let mut reader = parse_samples(open(&input)?, cfg.schema());
    let mut acc = StatsAccumulator::new();
    for s in reader.by_ref() {
        let _ = acc.observe_streamed(&s?);
    }
    acc.add_rejected(reader.summary().rejected);
    let report = acc.finish();
    let mut doc = serde_json::to_value(&report)?;
    doc["provenance"] = provenance("stats", &cfg)?;
    write_json(&out.join("stats.json"), &doc)?;
    write_histogram_csv(
        BufWriter::new(fs::File::create(out.join("interval_histogram.csv"))?),
        &report.interval_histogram,
    )?;
    write_histogram_csv(
        BufWriter::new(fs::File::create(out.join("speed_histogram.csv"))?),
        &report.speed_histogram,
    )?;
    Ok(json!({
        "command": "stats",
        "samples": report.sample_count,
        "vehicles": report.vehicle_count,
        "rejected": report.rejected_count,
        "lat_lon_resolution": report.lat_lon_resolution.overall,
    }))
}

// ---- render / augment ----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RenderCmdConfig {
    input: Option<PathBuf>,
    tiles: Option<PathBuf>,
    out: Option<PathBuf>,
    header: bool,
    schema: Schema,
    mode: RenderMode,
    kernel: u32,
    scale: Scale,
    channels: Vec<Feature>,
    segments: bool,
    max_segment_interval: f64,
}

impl RenderCmdConfig {
    fn defaults() -> Self {
        let r = RenderConfig::default();
        RenderCmdConfig {
            input: None,
            tiles: None,
            out: None,
            header: false,
            schema: Schema::default(),
            mode: r.mode,
            kernel: r.kernel_size,
            scale: r.scale,
            channels: r.feature_channels,
            segments: r.segments,
            max_segment_interval: r.max_segment_interval,
        }
    }

    fn overrides(f: &RenderFlags) -> Overrides {
        let mut o = Overrides::default();
        o.put("input", &f.input)
            .put("tiles", &f.tiles)
            .put("out", &f.out)
            .flag("header", f.header)
            .put("mode", &f.mode)
            .put("kernel", &f.kernel)
            .put("scale", &f.scale)
            .put("channels", &f.channels)
            .flag("segments", f.segments)
            .put("max_segment_interval", &f.max_segment_interval);
        o
    }

    fn check(&self) -> CliResult<()> {
        require_existing(&self.input, "input")?;
        require_existing(&self.tiles, "tiles")?;
        self.render_config().validate()?;
        Ok(())
    }

    fn render_config(&self) -> RenderConfig {
        RenderConfig {
            mode: self.mode,
            kernel_size: self.kernel,
            scale: self.scale,
            feature_channels: self.channels.clone(),
            segments: self.segments,
            max_segment_interval: self.max_segment_interval,
        }
    }
}

/// Samples with derived intervals, the tile list, and each tile's samples.
fn load_tiled(
    input: &Path,
    tiles_path: &Path,
    schema: Schema,
) -> CliResult<(Vec<TileSpec>, Vec<Vec<GpsSample>>)> {
    let tiles = read_manifest(tiles_path)?;
    let (tracks, _) = read_tracks(open(input)?, schema)?;
    let samples: Vec<GpsSample> = tracks.into_iter().flat_map(|t| t.samples).collect();
    let (index, _) = SpatialIndex::from_samples(&samples, SpatialIndex::DEFAULT_CELL_SIZE)?;
    let per_tile = tiles
        .iter()
        .map(|t| index.query_tile(t).into_iter().map(|i| samples[i].clone()).collect())
        .collect();
    Ok((tiles, per_tile))
}

fn cmd_render(cfg: RenderCmdConfig) -> CliResult<Value> {
    cfg.check()?;
    let out = out_dir(&cfg.out)?;
    let (tiles, per_tile) = load_tiled(
        cfg.input.as_deref().expect("checked"),
        cfg.tiles.as_deref().expect("checked"),
        cfg.schema.clone().with_header(cfg.header),
    )?;
    let prov = provenance("render", &cfg)?;
    let rc = cfg.render_config();
    tiles
        .par_iter()
        .zip(&per_tile)
        .map(|(tile, samples)| {
            let points = tile.project_samples(samples);
            let raster = render_tile(&rc, tile, &points, samples)?;
            write_raster(&out.join(format!("{}.rfr", tile.tile_id)), &raster, Some(prov.clone()))?;
            Ok(())
        })
        .collect::<crate::Result<()>>()?;
    Ok(json!({"command": "render", "tiles": tiles.len(), "channels": 1 + rc.feature_channels.len() + rc.segments as usize}))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AugmentCmdConfig {
    #[serde(flatten)]
    render: RenderCmdConfig,
    seed: u64,
    subsample_range: [f64; 2],
    factors: Vec<u32>,
    sigma: f64,
    omit_probability: f64,
    omit_size: Option<u32>,
}

impl AugmentCmdConfig {
    fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            subsample_ratio_range: self.subsample_range,
            resolution_factors: self.factors.clone(),
            perturb_sigma: self.sigma,
            omit_probability: self.omit_probability,
            omit_size: self.omit_size,
            master_seed: self.seed,
        }
    }
}

fn cmd_augment(cfg: AugmentCmdConfig) -> CliResult<Value> {
    cfg.render.check()?;
    let ac = cfg.augment_config();
    ac.validate()?;
    let out = out_dir(&cfg.render.out)?;
    let (tiles, per_tile) = load_tiled(
        cfg.render.input.as_deref().expect("checked"),
        cfg.render.tiles.as_deref().expect("checked"),
        cfg.render.schema.clone().with_header(cfg.render.header),
    )?;
    let prov = provenance("augment", &cfg)?;
    let rc = cfg.render.render_config();
    let traces = tiles
        .par_iter()
        .zip(&per_tile)
        .map(|(tile, samples)| {
            let points = tile.project_samples(samples);
            let (aug, trace) = apply_pipeline(&ac, tile, &points)?;
            let raster = render_tile(&rc, tile, &aug, samples)?;
            let mut p = prov.clone();
            p["trace"] = serde_json::to_value(&trace)?;
            write_raster(&out.join(format!("{}.rfr", tile.tile_id)), &raster, Some(p))?;
            Ok((tile.tile_id.clone(), trace))
        })
        .collect::<crate::Result<Vec<(String, AugmentTrace)>>>()?;
    let doc: Map<String, Value> = traces
        .iter()
        .map(|(id, t)| Ok((id.clone(), serde_json::to_value(t)?)))
        .collect::<CliResult<_>>()?;
    write_json(&out.join("augment_trace.json"), &json!({"tiles": doc, "provenance": prov}))?;
    Ok(json!({"command": "augment", "tiles": tiles.len()}))
}

// ---- extract / sweep / eval ----

fn rfr_files(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut v: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "rfr"))
        .collect();
    v.sort();
    Ok(v)
}

/// The density channel of an RFR1 raster as a single-channel raster.
fn density_channel(path: &Path) -> CliResult<Raster> {
    let (r, _) = read_raster(path)?;
    let c = r.channel_names.iter().position(|n| n == DENSITY).unwrap_or(0);
    Ok(Raster {
        tile: r.tile.clone(),
        channels: 1,
        data: r.channel(c).to_vec(),
        channel_names: vec![DENSITY.into()],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExtractConfig {
    rasters: Option<PathBuf>,
    out: Option<PathBuf>,
    kernel: u32,
    threshold: f64,
    scale: Scale,
}

fn cmd_extract(cfg: ExtractConfig) -> CliResult<Value> {
    let src = require_existing(&cfg.rasters, "rasters")?;
    let params = ExtractionParams {
        kernel_size: cfg.kernel,
        threshold: cfg.threshold,
        scale: cfg.scale,
    };
    params.validate()?;
    let out = out_dir(&cfg.out)?;
    let files = rfr_files(&src)?;
    files
        .par_iter()
        .map(|f| {
            let r = density_channel(f).map_err(|e| match e {
                CliError::Lib(e) => e,
                other => Error::data(format!("{other:?}")),
            })?;
            let m = kde_extract(&r, &params)?;
            write_mask(&out.join(format!("{}.png", r.tile.tile_id)), &m)
        })
        .collect::<crate::Result<()>>()?;
    write_json(&out.join("extract.json"), &json!({"params": params, "provenance": provenance("extract-kde", &cfg)?}))?;
    Ok(json!({"command": "extract-kde", "masks": files.len()}))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SweepConfig {
    rasters: Option<PathBuf>,
    labels: Option<PathBuf>,
    out: Option<PathBuf>,
    kernels: Vec<u32>,
    thresholds: Vec<f64>,
    scale: Scale,
}

fn load_labeled(rasters: &Path, labels: &Path) -> CliResult<Vec<LabeledRaster>> {
    rfr_files(rasters)?
        .iter()
        .map(|f| {
            let count = density_channel(f)?;
            let truth = read_mask(&labels.join(format!("{}.png", count.tile.tile_id)), &count.tile)?;
            Ok(LabeledRaster { count, truth })
        })
        .collect()
}

fn cmd_sweep(cfg: SweepConfig) -> CliResult<Value> {
    let rasters = require_existing(&cfg.rasters, "rasters")?;
    let labels = require_existing(&cfg.labels, "labels")?;
    let out = out_dir(&cfg.out)?;
    let tiles = load_labeled(&rasters, &labels)?;
    let r = sweep_params(&tiles, &cfg.kernels, &cfg.thresholds, cfg.scale)?;
    write_sweep_csv(BufWriter::new(fs::File::create(out.join("sweep.csv"))?), &r.table)?;
    write_json(
        &out.join("best.json"),
        &json!({"best": r.best, "mean_iou": r.best_iou, "tiles": tiles.len(), "provenance": provenance("sweep", &cfg)?}),
    )?;
    Ok(json!({"command": "sweep", "best": r.best, "mean_iou": r.best_iou}))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalConfig {
    pred: Option<PathBuf>,
    labels: Option<PathBuf>,
    tiles: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn cmd_eval(cfg: EvalConfig) -> CliResult<Value> {
    let pred = require_existing(&cfg.pred, "pred")?;
    let labels = require_existing(&cfg.labels, "labels")?;
    let tiles = read_manifest(&require_existing(&cfg.tiles, "tiles")?)?;
    let out = out_dir(&cfg.out)?;
    let masks = tiles
        .iter()
        .map(|t| {
            let name = format!("{}.png", t.tile_id);
            Ok((read_mask(&pred.join(&name), t)?, read_mask(&labels.join(&name), t)?))
        })
        .collect::<CliResult<Vec<(Mask, Mask)>>>()?;
    let pairs: Vec<(&Mask, &Mask)> = masks.iter().map(|(p, t)| (p, t)).collect();
    let report = mean_iou(&pairs)?
        .with_config(serde_json::to_value(&cfg)?)
        .with_provenance(provenance("eval-iou", &cfg)?);
    write_json(&out.join("eval.json"), &report)?;
    report.write_csv(BufWriter::new(fs::File::create(out.join("eval.csv"))?))?;
    Ok(json!({"command": "eval-iou", "tiles": pairs.len(), "mean_iou": report.mean_iou}))
}

// ---- curve ----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CurveConfig {
    input: Option<PathBuf>,
    tiles: Option<PathBuf>,
    labels: Option<PathBuf>,
    out: Option<PathBuf>,
    header: bool,
    schema: Schema,
    axis: DegradationAxis,
    levels: Vec<f64>,
    seed: u64,
    split: [f64; 3],
    kernel: Option<u32>,
    threshold: Option<f64>,
    retune: bool,
    kernels: Vec<u32>,
    thresholds: Vec<f64>,
    scale: Scale,
}

fn cmd_curve(cfg: CurveConfig) -> CliResult<Value> {
    let input = require_existing(&cfg.input, "input")?;
    let tiles_path = require_existing(&cfg.tiles, "tiles")?;
    let labels = require_existing(&cfg.labels, "labels")?;
    let extractor = match (cfg.kernel, cfg.threshold) {
        (Some(k), Some(t)) => Extractor::Fixed(ExtractionParams {
            kernel_size: k,
            threshold: t,
            scale: cfg.scale,
        }),
        (None, None) => {
            let grid = SweepGrid {
                kernels: cfg.kernels.clone(),
                thresholds: cfg.thresholds.clone(),
                scale: cfg.scale,
            };
            if cfg.retune {
                Extractor::TunedPerLevel(grid)
            } else {
                Extractor::TunedOnce(grid)
            }
        }
        _ => return Err(CliError::Usage("--kernel and --threshold go together".into())),
    };
    let out = out_dir(&cfg.out)?;
    let (tiles, per_tile) = load_tiled(&input, &tiles_path, cfg.schema.clone().with_header(cfg.header))?;
    let labeled = tiles
        .iter()
        .zip(&per_tile)
        .map(|(t, s)| {
            Ok(LabeledPoints {
                tile: t.clone(),
                points: t.project_samples(s),
                truth: read_mask(&labels.join(format!("{}.png", t.tile_id)), t)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let ids: Vec<String> = tiles.iter().map(|t| t.tile_id.clone()).collect();
    let split = split_dataset(&ids, cfg.split, cfg.seed)?;
    let pick = |s: Split| -> Vec<LabeledPoints> {
        labeled
            .iter()
            .filter(|l| split.get(&l.tile.tile_id) == Some(s))
            .cloned()
            .collect()
    };
    let (tuning, heldout) = (pick(Split::Train), pick(Split::Test));
    let rows = degradation_curve(&extractor, &tuning, &heldout, cfg.axis, &cfg.levels, cfg.seed)?;
    write_curve_csv(BufWriter::new(fs::File::create(out.join("curve.csv"))?), &rows)?;
    split.write_csv(BufWriter::new(fs::File::create(out.join("split.csv"))?))?;
    write_json(&out.join("curve.json"), &json!({"rows": rows, "provenance": provenance("curve", &cfg)?}))?;
    Ok(json!({"command": "curve", "rows": rows.len()}))
}

// ---- conv-check ----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvCheckConfig {
    seed: u64,
    samples: usize,
    out: Option<PathBuf>,
}

pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const ADJOINT_TOLERANCE: f64 = 1e-10;

fn conv_report(seed: u64, samples: usize) -> crate::Result<(Value, bool)> {
    let mut checks = Vec::new();
    let mut ok = true;
    let mut push = |name: String, value: f64, tol: f64, exact: bool| {
        let pass = if exact { value == 0.0 } else { value < tol };
        ok &= pass;
        checks.push(json!({"check": name, "value": value, "tolerance": tol, "pass": pass}));
    };
    let taps: Vec<f64> = (0..9).map(|i| ((i as f64 + 1.0) * 0.61).sin()).collect();
    for d in Direction::ALL {
        for s in [1usize, 2] {
            let layer = DirectionalTConv {
                filter: Filter1D::new(d, taps.clone())?,
                stride: s,
            };
            let fd = finite_diff_check(&layer, [1, 2, 12, 10], seed, samples)?;
            push(format!("dir_tconv1d {d:?} s={s} gradient"), fd.max_rel(), GRADIENT_TOLERANCE, false);
            push(format!("dir_tconv1d {d:?} s={s} adjoint"), adjoint_check(&layer, [1, 2, 12, 10], seed)?, ADJOINT_TOLERANCE, false);
        }
        let x = Tensor4::<f64>::from_fn([1, 1, 11, 13], |i| ((i * 37 % 17) as f64) - 8.0);
        let f = Filter1D::new(d, taps.clone())?;
        let g = dir_tconv1d(&x.data, 11, 13, &f)?;
        let sc = dir_tconv1d_strided(&x.data, 11, 13, &f, 1)?;
        let gap = g.iter().zip(&sc).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        push(format!("dir_tconv1d {d:?} gather/scatter"), gap, 0.0, true);
    }
    let mut rng = crate::augment::RngStream::from_seed(seed);
    let weights = Tensor4::from_fn([3, 2, 3, 3], |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
    for s in [1usize, 2] {
        let layer = TConv3x3 { weights: weights.clone(), stride: s };
        let fd = finite_diff_check(&layer, [2, 3, 7, 6], seed, samples)?;
        push(format!("tconv3x3 s={s} gradient"), fd.max_rel(), GRADIENT_TOLERANCE, false);
        push(format!("tconv3x3 s={s} adjoint"), adjoint_check(&layer, [2, 3, 7, 6], seed)?, ADJOINT_TOLERANCE, false);
    }
    for s in [1usize, 2] {
        let p = DecoderBlockParams::random(3, 8, 2, 4, s, 0.5, &mut rng)?;
        let layer = DecoderBlock(p);
        let fd = finite_diff_check(&layer, [1, 3, 8, 7], seed, samples)?;
        push(format!("decoder_block s={s} gradient"), fd.max_rel(), GRADIENT_TOLERANCE, false);
    }
    let mut parity = Vec::new();
    for c_mid in [4usize, 16, 64] {
        let p = DecoderBlockParams::<f64>::zeros(c_mid, c_mid, c_mid, 4, 2)?;
        let base = BaselineBank { c_in: c_mid, c_out: c_mid };
        let pass = parity_check(&p, base);
        ok &= pass;
        parity.push(json!({
            "c_mid": c_mid,
            "directional": p.directional_param_count(),
            "baseline": base.param_count(),
            "pass": pass,
        }));
    }
    Ok((json!({"pass": ok, "checks": checks, "parity": parity}), ok))
}

fn cmd_conv_check(cfg: ConvCheckConfig) -> CliResult<Value> {
    let (mut report, ok) = conv_report(cfg.seed, cfg.samples)?;
    report["provenance"] = provenance("conv-check", &cfg)?;
    if cfg.out.is_some() {
        let out = out_dir(&cfg.out)?;
        write_json(&out.join("conv_check.json"), &report)?;
    }
    if !ok {
        let _ = writeln!(std::io::stdout(), "{report}");
        return Err(CliError::Verify("conv-check failed".into()));
    }
    Ok(report)
}

// ---- synth ----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SynthCmdConfig {
    out: Option<PathBuf>,
    #[serde(flatten)]
    synth: SynthConfig,
}

fn cmd_synth(cfg: SynthCmdConfig) -> CliResult<Value> {
    cfg.synth.validate()?;
    let out = out_dir(&cfg.out)?;
    let tiles = generate_dataset(&cfg.synth)?;
    let labels = out.join("labels");
    fs::create_dir_all(&labels)?;
    let mut w = BufWriter::new(fs::File::create(out.join("samples.csv"))?);
    for s in tiles.iter().flat_map(|t| &t.samples) {
        writeln!(w, "{}", s.to_csv_record())?;
    }
    w.flush()?;
    for t in &tiles {
        write_mask(&labels.join(format!("{}.png", t.tile.tile_id)), &t.truth)?;
    }
    let specs: Vec<TileSpec> = tiles.iter().map(|t| t.tile.clone()).collect();
    write_manifest(&out.join("tiles.json"), &specs)?;
    write_json(&out.join("synth.json"), &provenance("synth", &cfg)?)?;
    Ok(json!({
        "command": "synth",
        "tiles": tiles.len(),
        "samples": tiles.iter().map(|t| t.samples.len()).sum::<usize>(),
    }))
}

// ---- verify ----

fn cmd_verify(a: &VerifyArgs) -> CliResult<Value> {
    let artifact = require_existing(&a.artifact, "artifact")?;
    let scratch = out_dir(&a.out)?;
    let (_, prov) = read_raster(&artifact)?;
    let prov = prov.ok_or_else(|| CliError::Verify("artifact has no provenance".into()))?;
    let command = prov["command"].as_str().unwrap_or_default().to_string();
    let Value::Object(mut config) = prov["config"].clone() else {
        return Err(CliError::Verify("provenance has no config".into()));
    };
    config.insert("out".into(), serde_json::to_value(&scratch)?);
    let rerun = Overrides::default();
    match command.as_str() {
        "render" => {
            cmd_render(resolve(RenderCmdConfig::defaults(), &config, rerun)?)?;
        }
        "augment" => {
            cmd_augment(resolve(augment_defaults(), &config, rerun)?)?;
        }
        other => return Err(CliError::Verify(format!("cannot replay command {other:?}"))),
    }
    let name = artifact.file_name().expect("file");
    let original = fs::read(&artifact)?;
    let replayed = fs::read(scratch.join(name))?;
    if original != replayed {
        return Err(CliError::Verify(format!(
            "{} differs from its replay",
            artifact.display()
        )));
    }
    Ok(json!({"command": "verify", "artifact": artifact, "reproduced": true}))
}

fn augment_defaults() -> AugmentCmdConfig {
    let a = AugmentConfig::default();
    AugmentCmdConfig {
        render: RenderCmdConfig::defaults(),
        seed: a.master_seed,
        subsample_range: a.subsample_ratio_range,
        factors: a.resolution_factors,
        sigma: a.perturb_sigma,
        omit_probability: a.omit_probability,
        omit_size: a.omit_size,
    }
}

fn read_config_file(path: &Option<PathBuf>) -> CliResult<Map<String, Value>> {
    let Some(p) = path else {
        return Ok(Map::new());
    };
    let text = fs::read_to_string(p)
        .map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::Usage("config file must hold a JSON object".into())),
        Err(e) => Err(CliError::Usage(format!("config file: {e}"))),
    }
}

fn dispatch(cli: Cli) -> CliResult<Value> {
    let file = read_config_file(&cli.config)?;
    match cli.command {
        Command::Ingest(a) => cmd_ingest(IoConfig::resolve(&a, &file)?),
        Command::Stats(a) => cmd_stats(IoConfig::resolve(&a, &file)?),
        Command::Render(a) => {
            cmd_render(resolve(RenderCmdConfig::defaults(), &file, RenderCmdConfig::overrides(&a.render))?)
        }
        Command::Augment(a) => {
            let mut o = RenderCmdConfig::overrides(&a.render);
            o.put("seed", &a.seed)
                .put("subsample_range", &a.subsample_range)
                .put("factors", &a.factors)
                .put("sigma", &a.sigma)
                .put("omit_probability", &a.omit_probability)
                .put("omit_size", &a.omit_size);
            cmd_augment(resolve(augment_defaults(), &file, o)?)
        }
        Command::ExtractKde(a) => {
            let mut o = Overrides::default();
            o.put("rasters", &a.rasters)
                .put("out", &a.out)
                .put("kernel", &a.kernel)
                .put("threshold", &a.threshold)
                .put("scale", &a.scale);
            let d = ExtractConfig {
                rasters: None,
                out: None,
                kernel: 5,
                threshold: 0.0065,
                scale: Scale::Linear,
            };
            cmd_extract(resolve(d, &file, o)?)
        }
        Command::Sweep(a) => {
            let mut o = Overrides::default();
            o.put("rasters", &a.rasters)
                .put("labels", &a.labels)
                .put("out", &a.out)
                .put("kernels", &a.kernels)
                .put("thresholds", &a.thresholds)
                .put("scale", &a.scale);
            let g = SweepGrid::default();
            let d = SweepConfig {
                rasters: None,
                labels: None,
                out: None,
                kernels: g.kernels,
                thresholds: g.thresholds,
                scale: g.scale,
            };
            cmd_sweep(resolve(d, &file, o)?)
        }
        Command::EvalIou(a) => {
            let mut o = Overrides::default();
            o.put("pred", &a.pred)
                .put("labels", &a.labels)
                .put("tiles", &a.tiles)
                .put("out", &a.out);
            let d = EvalConfig {
                pred: None,
                labels: None,
                tiles: None,
                out: None,
            };
            cmd_eval(resolve(d, &file, o)?)
        }
        Command::Curve(a) => {
            let mut o = Overrides::default();
            o.put("input", &a.input)
                .put("tiles", &a.tiles)
                .put("labels", &a.labels)
                .put("out", &a.out)
                .flag("header", a.header)
                .put("axis", &a.axis)
                .put("levels", &a.levels)
                .put("seed", &a.seed)
                .put("kernel", &a.kernel)
                .put("threshold", &a.threshold)
                .flag("retune", a.retune);
            let g = SweepGrid::default();
            let d = CurveConfig {
                input: None,
                tiles: None,
                labels: None,
                out: None,
                header: false,
                schema: Schema::default(),
                axis: DegradationAxis::SubsampleRatio,
                levels: vec![1.0, 0.5, 0.25, 0.1],
                seed: 0,
                split: [0.7, 0.1, 0.2],
                kernel: None,
                threshold: None,
                retune: false,
                kernels: g.kernels,
                thresholds: g.thresholds,
                scale: g.scale,
            };
            cmd_curve(resolve(d, &file, o)?)
        }
        Command::Verify(a) => cmd_verify(&a),
        Command::ConvCheck(a) => {
            let mut o = Overrides::default();
            o.put("seed", &a.seed).put("samples", &a.samples).put("out", &a.out);
            cmd_conv_check(resolve(
                ConvCheckConfig {
                    seed: 0,
                    samples: 64,
                    out: None,
                },
                &file,
                o,
            )?)
        }
        Command::Synth(a) => {
            let mut o = Overrides::default();
            o.put("out", &a.out)
                .put("tiles", &a.tiles)
                .put("size", &a.size)
                .put("seed", &a.seed);
            let d = SynthCmdConfig {
                out: None,
                synth: SynthConfig {
                    resolution: DEFAULT_RESOLUTION,
                    ..SynthConfig::default()
                },
            };
            cmd_synth(resolve(d, &file, o)?)
        }
    }
}

/// Runs the CLI on explicit arguments (the first is the program name) and
/// returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprint!("{e}");
            let err = CliError::Usage(e.kind().to_string());
            eprintln!("{}", err.line());
            return EXIT_USAGE;
        }
    };
    let result = match cli.jobs {
        Some(0) => Err(CliError::Usage("--jobs must be >= 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli)),
            Err(e) => Err(CliError::Usage(e.to_string())),
        },
        None => dispatch(cli),
    };
    match result {
        Ok(v) => {
            let _ = writeln!(std::io::stdout(), "{v}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{}", e.line());
            e.code()
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
