//! Pipeline driver: simulate, fit-noise, track, eval, calibrate-prior, btr.
//!
//! Every command that writes results also writes the effective config next to
//! them, so a run can be repeated with `--config <that file>`. Failures print a
//! single `error kind=<kind> msg=<quoted message>` line on stderr and exit 1.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sonar_tkbd::array::{btr, BearingGrid};
use sonar_tkbd::config::{PipelineConfig, Profile};
use sonar_tkbd::eval::{evaluate_run, median, write_bands_csv, write_run_csv, RunReport, TrackLog};
use sonar_tkbd::noise::{fit_var, order_criteria, VarModel};
use sonar_tkbd::pipeline::{calibrate, prepare, run_tracker, spatial_only, PreparedBatch, TrackOutput, Variant};
use sonar_tkbd::seed::{stream, Purpose};
use sonar_tkbd::sim::{generate_dataset, Dataset, ScenarioTruth};

const CONFIG_FILE: &str = "config.toml";
const MODEL_FILE: &str = "noise_model.varm";
const TRACK_FILE: &str = "track.csv";
const DETECTIONS_FILE: &str = "detections.csv";

#[derive(Parser, Debug)]
#[command(name = "sonar-tkbd", version, about = "Track-before-detect on passive hydrophone array data")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML config; keys it omits take the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the simulation parameter profile instead of the real-data one.
    #[arg(long, global = true)]
    sim_profile: bool,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate datasets from the configured scenario.
    Simulate(SimulateArgs),
    /// Fit a VAR noise model to a dataset.
    FitNoise(FitNoiseArgs),
    /// Run a tracker over one or more datasets.
    Track(TrackArgs),
    /// Score track logs against ground truth.
    Eval(EvalArgs),
    /// Find the most sensitive prior that keeps target-free data free of tracks.
    CalibratePrior(CalibrateArgs),
    /// Write the bearing-time record of a dataset as CSV.
    Btr(BtrArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Output directory; with `--runs > 1` it holds one `run_NNN` per run.
    #[arg(long)]
    out: PathBuf,
    /// Simulate ambient noise only (zero SNR throughout).
    #[arg(long)]
    target_free: bool,
    /// Traverse the reference path in this many seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Number of Monte-Carlo datasets; overrides the config.
    #[arg(long)]
    runs: Option<usize>,
    /// Index of the first run; selects the random streams.
    #[arg(long, default_value_t = 0)]
    first_run: u64,
    /// Noise model to simulate from; defaults to the built-in synthetic ambient model.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitNoiseArgs {
    #[arg(long)]
    data: PathBuf,
    /// Noise model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Model order; overrides the config.
    #[arg(long, conflicts_with = "auto_order")]
    order: Option<usize>,
    /// Pick the order in `0..=P` by AIC.
    #[arg(long, value_name = "P")]
    auto_order: Option<usize>,
}

#[derive(Args, Debug)]
struct TrackArgs {
    /// Dataset directories; each is one Monte-Carlo run.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    /// Noise model for the whitening variants.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Tracker variant; overrides the config.
    #[arg(long)]
    variant: Option<Variant>,
    /// Output directory; one `run_NNN` per dataset when there are several.
    #[arg(long)]
    out: PathBuf,
    /// Run index of the first dataset; selects the filter's random stream.
    #[arg(long, default_value_t = 0)]
    first_run: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Track logs, one per run.
    #[arg(long, num_args = 1.., required = true)]
    track: Vec<PathBuf>,
    /// Truth files: one shared by all runs, or one per run.
    #[arg(long, num_args = 1.., required = true)]
    truth: Vec<PathBuf>,
    /// Directory for per-run metrics, the summary and quantile bands.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Target-free dataset directories.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Calibrated config to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BtrArgs {
    #[arg(long)]
    data: PathBuf,
    /// Whiten with this model before beamforming.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Scale so that the largest entry is 1.
    #[arg(long)]
    normalize: bool,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.global.verbose {
        env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| {
                    if let Some(e) = c.downcast_ref::<sonar_tkbd::Error>() {
                        Some(e.kind())
                    } else if c.is::<std::io::Error>() {
                        Some("io")
                    } else if c.is::<csv::Error>() {
                        Some("format")
                    } else {
                        None
                    }
                })
                .unwrap_or("cli");
            let msg = format!("{e:#}");
            eprintln!("error kind={kind} msg={msg:?}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Simulate(a) => simulate(&mut cfg, a),
        Command::FitNoise(a) => fit_noise(&mut cfg, a),
        Command::Track(a) => track(&mut cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::CalibratePrior(a) => calibrate_prior(&mut cfg, a),
        Command::Btr(a) => write_btr(&cfg, a),
    }
}

fn load_config(g: &GlobalArgs) -> Result<PipelineConfig> {
    let profile = if g.sim_profile { Profile::Sim } else { Profile::Real };
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path, profile)?,
        None => PipelineConfig::for_profile(profile),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn save_config(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml_string()?).with_context(|| format!("writing {}", path.display()))
}

fn run_dir(out: &Path, run: usize, runs: usize) -> PathBuf {
    if runs == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("run_{run:03}"))
    }
}

fn simulate(cfg: &mut PipelineConfig, a: SimulateArgs) -> Result<()> {
    if let Some(d) = a.duration {
        cfg.scenario = cfg.scenario.clone().traversed_in(d);
    }
    if a.target_free {
        cfg.scenario.target_present = false;
    }
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    cfg.paths.output = Some(a.out.clone());
    let geom = cfg.geometry()?;
    let model = match &a.model {
        Some(p) => VarModel::load(p)?,
        None => VarModel::synthetic_ambient(geom.elements(), cfg.noise.order)?,
    };
    if model.channels() != geom.elements() {
        bail!(sonar_tkbd::Error::DimensionMismatch(format!(
            "noise model has {} channels, array has {}",
            model.channels(),
            geom.elements()
        )));
    }
    cfg.validate()?;
    for i in 0..cfg.runs {
        let run = a.first_run + i as u64;
        let mut rng = stream(cfg.seed, run, Purpose::Data);
        let (batches, truth) = generate_dataset(&cfg.scenario, &geom, &model, &mut rng)?;
        let ds = Dataset::from_batches(&geom, &batches, Some(truth), Some(cfg.seed), Some(cfg.scenario.clone()))?;
        let dir = run_dir(&a.out, i, cfg.runs);
        ds.save(&dir)?;
        model.save(&dir.join(MODEL_FILE))?;
        println!("run {run}: {} batches -> {}", batches.len(), dir.display());
    }
    save_config(cfg, &a.out)
}

fn fit_noise(cfg: &mut PipelineConfig, a: FitNoiseArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let order = match (a.order, a.auto_order) {
        (Some(p), _) => p,
        (None, Some(p_max)) => {
            let aic = order_criteria(&ds.samples, p_max)?;
            let best = aic
                .iter()
                .enumerate()
                .min_by(|x, y| x.1.total_cmp(y.1))
                .map_or(0, |(p, _)| p);
            for (p, v) in aic.iter().enumerate() {
                println!("aic p={p} value={v:.3}");
            }
            best
        }
        (None, None) => cfg.noise.order,
    };
    let model = fit_var(&ds.samples, order).map_err(|e| match e {
        sonar_tkbd::Error::SingularFit(_) | sonar_tkbd::Error::InsufficientData(_) => anyhow::Error::new(e)
            .context("try a lower --order or a longer noise recording"),
        other => other.into(),
    })?;
    let radius = model.spectral_radius();
    println!("order={} channels={}", model.order(), model.channels());
    println!("spectral_radius={radius:.6} stability_margin={:.6}", 1.0 - radius);
    let diag: Vec<String> = model.innovation_cov().diagonal().iter().map(|v| format!("{v:.6}")).collect();
    println!("sigma_w_diag=[{}]", diag.join(", "));
    model.save(&a.out)?;
    cfg.noise.order = order;
    cfg.paths.dataset = Some(a.data.clone());
    cfg.paths.model = Some(a.out.clone());
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    save_config(cfg, dir)
}

/// Model for a whitening variant: the file's, reduced to spatial-only for
/// `tvar0`.
fn variant_model(variant: Variant, path: Option<&Path>) -> Result<Option<VarModel>> {
    if !variant.whitens() {
        return Ok(None);
    }
    let Some(path) = path else {
        bail!(sonar_tkbd::Error::Config(format!("variant {variant} needs --model")));
    };
    let model = VarModel::load(path)?;
    Ok(Some(if variant == Variant::Tvar0 && model.order() > 0 {
        spatial_only(&model)?
    } else {
        model
    }))
}

fn load_prepared(path: &Path, variant: Variant, model: Option<&VarModel>) -> Result<Vec<PreparedBatch>> {
    let ds = Dataset::load(path)?;
    Ok(prepare(variant, &ds.samples, ds.metadata.batch_len, model)?)
}

fn geometry_of(cfg: &PipelineConfig, data: &Path) -> Result<sonar_tkbd::array::ArrayGeometry> {
    let text = fs::read_to_string(data.join(sonar_tkbd::sim::METADATA_FILE))
        .with_context(|| format!("reading dataset metadata in {}", data.display()))?;
    let meta = sonar_tkbd::sim::DatasetMetadata::from_toml_str(&text)?;
    let geom = cfg.geometry()?;
    if meta.geometry != geom {
        bail!(sonar_tkbd::Error::Config(format!(
            "dataset {} was recorded with a different array than the config describes",
            data.display()
        )));
    }
    Ok(geom)
}

fn track(cfg: &mut PipelineConfig, a: TrackArgs) -> Result<()> {
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    cfg.runs = a.data.len();
    cfg.paths.model = a.model.clone();
    cfg.paths.output = Some(a.out.clone());
    cfg.paths.dataset = a.data.first().cloned();
    let variant = cfg.variant;
    let model = variant_model(variant, a.model.as_deref())?;
    let settings = cfg.tracker_settings()?;
    let geom = geometry_of(cfg, &a.data[0])?;
    for d in &a.data[1..] {
        geometry_of(cfg, d)?;
    }
    save_config(cfg, &a.out)?;

    // Runs are independent; fan them out over the available cores.
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(a.data.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| -> Result<()> {
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(path) = a.data.get(i) else {
                            return Ok(());
                        };
                        let batches = load_prepared(path, variant, model.as_ref())?;
                        let mut rng = stream(cfg.seed, a.first_run + i as u64, Purpose::Filter);
                        let out = run_tracker(variant, &geom, &settings, &batches, &mut rng, None)?;
                        write_track_output(&out, &run_dir(&a.out, i, a.data.len()))?;
                        let confirmed = out.log.rows.iter().filter(|r| r.confirmed).count();
                        println!("run {i}: {} batches, {confirmed} confirmed", out.log.len());
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    results.into_iter().collect()
}

fn write_track_output(out: &TrackOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(TRACK_FILE);
    let f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    out.log.write_csv(BufWriter::new(f))?;
    let path = dir.join(DETECTIONS_FILE);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["batch_index", "bearing_deg"])?;
    for (k, b) in &out.detections {
        w.write_record([k.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn read_truth(path: &Path) -> Result<ScenarioTruth> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(ScenarioTruth::read_csv(BufReader::new(f))?)
}

fn eval(cfg: &PipelineConfig, a: EvalArgs) -> Result<()> {
    if a.truth.len() != 1 && a.truth.len() != a.track.len() {
        bail!(sonar_tkbd::Error::DimensionMismatch(format!(
            "{} track logs but {} truth files; pass one truth file or one per log",
            a.track.len(),
            a.truth.len()
        )));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut reports: Vec<RunReport> = Vec::with_capacity(a.track.len());
    for (i, path) in a.track.iter().enumerate() {
        let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let log = TrackLog::read_csv(BufReader::new(f))?;
        let truth = read_truth(&a.truth[if a.truth.len() == 1 { 0 } else { i }])?;
        let report = evaluate_run(&log, &truth, &cfg.eval.ospa, cfg.eval.sustain)
            .with_context(|| format!("evaluating {}", path.display()))?;
        let out = a.out.join(format!("metrics_run_{i:03}.csv"));
        let f = fs::File::create(&out).with_context(|| format!("writing {}", out.display()))?;
        write_run_csv(BufWriter::new(f), &report)?;
        reports.push(report);
    }

    let path = a.out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["run", "detected", "detection_batch", "detection_range_m", "detection_snr_db", "flips", "median_ospa"])?;
    for (i, r) in reports.iter().enumerate() {
        let d = r.detection;
        w.write_record([
            i.to_string(),
            u8::from(d.is_some()).to_string(),
            d.map_or(String::new(), |d| d.batch_index.to_string()),
            d.map_or(String::new(), |d| d.range_m.to_string()),
            d.map_or(String::new(), |d| d.snr_db.to_string()),
            r.flips.to_string(),
            median(&r.ospa).to_string(),
        ])?;
    }
    w.flush()?;

    let path = a.out.join("bands.csv");
    let f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    write_bands_csv(BufWriter::new(f), &reports, &cfg.eval.quantiles)?;

    let snrs: Vec<f64> = reports.iter().filter_map(|r| r.detection.map(|d| d.snr_db)).collect();
    let flips: Vec<f64> = reports.iter().map(|r| r.flips as f64).collect();
    let detection = if snrs.is_empty() {
        "none".to_string()
    } else {
        format!("{:.2}", median(&snrs))
    };
    println!(
        "runs={} detected={} median_detection_snr_db={detection} median_flips={:.1}",
        reports.len(),
        snrs.len(),
        median(&flips)
    );
    Ok(())
}

fn calibrate_prior(cfg: &mut PipelineConfig, a: CalibrateArgs) -> Result<()> {
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    let variant = cfg.variant;
    let model = variant_model(variant, a.model.as_deref())?;
    let geom = geometry_of(cfg, &a.data[0])?;
    let data: Vec<Vec<PreparedBatch>> = a
        .data
        .iter()
        .map(|p| {
            geometry_of(cfg, p)?;
            load_prepared(p, variant, model.as_ref())
        })
        .collect::<Result<_>>()?;
    let base = cfg.tracker_settings()?;
    let seed = cfg.seed;
    let result = calibrate(variant, &geom, &base, &data, &cfg.calibration.sweep, |r| {
        stream(seed, r as u64, Purpose::Calibration)
    })?;
    for (level, failures) in &result.trials {
        println!("level_db={level} false_track={}", failures > &0);
    }
    let Some(settings) = result.settings else {
        bail!(sonar_tkbd::Error::Config(format!(
            "false tracks already at the least sensitive level {} dB; lower calibration.sweep.start_db",
            cfg.calibration.sweep.start_db
        )));
    };
    cfg.apply_settings(&settings);
    cfg.paths.model = a.model.clone();
    println!(
        "variant={variant} level_db={} applied_db={} snr_prior=[{}, {}] clutter_intensity={}",
        result.level_db.unwrap_or(f64::NAN),
        result.applied_db.unwrap_or(f64::NAN),
        cfg.filter.snr_prior.0,
        cfg.filter.snr_prior.1,
        cfg.clutter.intensity
    );
    cfg.validate()?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&a.out, cfg.to_toml_string()?).with_context(|| format!("writing {}", a.out.display()))
}

fn write_btr(cfg: &PipelineConfig, a: BtrArgs) -> Result<()> {
    let geom = geometry_of(cfg, &a.data)?;
    let variant = if a.model.is_some() { Variant::Tvar } else { Variant::Cfar };
    let model = a.model.as_deref().map(VarModel::load).transpose()?;
    let batches: Vec<_> = load_prepared(&a.data, variant, model.as_ref())?
        .into_iter()
        .map(|b| b.batch)
        .collect();
    let grid = BearingGrid::uniform(cfg.grid.start, cfg.grid.end, cfg.grid.step)?;
    let mut record = btr(&geom, &batches, &grid)?;
    if a.normalize {
        record = record.normalized();
    }
    let f = fs::File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut w = BufWriter::new(f);
    let header: Vec<String> = record.bearings.iter().map(|b| b.to_string()).collect();
    writeln!(w, "batch_index,{}", header.join(","))?;
    for (k, row) in record.rows.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{k},{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}
