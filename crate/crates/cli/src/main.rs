use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctkit::config::RunConfig;
use ctkit::evaluation::{self, Method, TestSet};
use ctkit::model::{FnoBpModel, Pipeline};
use ctkit::phantoms::generate_dataset;
use ctkit::raster::Raster;
use ctkit::training::{self, TrainState};
use ctkit::{FanGeometry, Image, KnownMask};

/// Fan-beam CT toolkit: synthetic data, FBP, range-condition extrapolation
/// and FNO-BP reconstruction.
#[derive(Parser)]
#[command(name = "ctkit", version)]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run on a single worker so every reduction is sequential.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default run configuration.
    Config,
    /// Generate a synthetic phantom dataset.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        count: usize,
        /// Known wedge span in degrees.
        #[arg(long)]
        span: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also store full-circle sinograms (needed to score other spans).
        #[arg(long)]
        keep_full: bool,
        /// Overrides `phantom.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an FNO-BP model on a generated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Total epoch count; overrides `training.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct one sinogram.
    Reconstruct {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        sino: PathBuf,
        /// Known-angle mask; required by fbp-range and fnobp.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Geometry JSON; overrides the configured geometry.
        #[arg(long)]
        geometry: Option<PathBuf>,
        /// Model checkpoint; required by fnobp.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output raster, `-` for standard output.
        #[arg(long)]
        out: PathBuf,
        /// Also write an 8-bit grayscale preview.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Score methods on a test set over a range of spans.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "fbp,fbp-range")]
        methods: Vec<Method>,
        /// Spans in degrees.
        #[arg(long, value_delimiter = ',', default_value = "90,80,70,60,50,40,30")]
        spans: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
        /// A checkpoint, or a directory of `span_XX` checkpoints.
        #[arg(long)]
        ckpt_dir: Option<PathBuf>,
        /// CSV report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ctkit::Error> for Failure {
    fn from(e: ctkit::Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse::<Method>().map_err(|e| match e {
        ctkit::Error::Config(msg) => msg,
        other => other.to_string(),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Config => {
            println!("{}", RunConfig::default().to_json());
            Ok(())
        }
        Command::Generate { config, count, span, out, keep_full, seed } => {
            let cfg = load_config(&config)?;
            let mut spec = cfg.phantom.clone();
            if let Some(s) = seed {
                spec.seed = s;
            }
            let m = generate_dataset(&spec, count, &cfg.geometry, cfg.grid, span, keep_full, &out)?;
            println!("wrote {} samples to {}", m.samples.len(), out.display());
            Ok(())
        }
        Command::Train { config, data, out, epochs, resume } => cmd_train(&config, &data, &out, epochs, resume.as_deref()),
        Command::Reconstruct { config, method, sino, mask, geometry, ckpt, out, png } => {
            let cfg = load_config(&config)?;
            cmd_reconstruct(&cfg, method, &sino, mask.as_deref(), geometry.as_deref(), ckpt.as_deref(), &out, png.as_deref())
        }
        Command::Evaluate { config, methods, spans, data, ckpt_dir, report } => {
            let cfg = load_config(&config)?;
            cmd_evaluate(&cfg, &methods, &spans, &data, ckpt_dir.as_deref(), report.as_deref())
        }
    }
}

fn load_config(arg: &ConfigArg) -> CliResult<RunConfig> {
    let cfg = match &arg.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{what} directory {} does not exist", path.display())))
    }
}

fn cmd_train(config: &ConfigArg, data: &Path, out: &Path, epochs: Option<usize>, resume: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(config)?;
    require_dir(data, "data")?;
    let mut tcfg = cfg.training;
    if let Some(e) = epochs {
        tcfg.epochs = e;
    }
    let (mut model, state) = match resume {
        Some(dir) => {
            require_dir(dir, "checkpoint")?;
            let model = FnoBpModel::load(dir, cfg.cache_dir())?;
            let state = TrainState::load(dir, model.params().clone())?;
            println!("resuming at epoch {}", state.epoch);
            (model, Some(state))
        }
        None => (cfg.model()?, None),
    };
    let mut report = |epoch: usize, loss: f64| println!("epoch {:>3}  mean loss {loss:.6e}", epoch + 1);
    let state = training::train(data, &tcfg, &mut model, out, state, &mut report)?;
    println!("checkpoint written to {} after {} epochs", out.display(), state.epoch);
    Ok(())
}

fn read_raster(path: &Path) -> CliResult<Raster> {
    if !path.exists() {
        return Err(Failure::Runtime(format!("{} does not exist", path.display())));
    }
    Ok(Raster::load(path)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_reconstruct(
    cfg: &RunConfig,
    method: Method,
    sino: &Path,
    mask: Option<&Path>,
    geometry: Option<&Path>,
    ckpt: Option<&Path>,
    out: &Path,
    png: Option<&Path>,
) -> CliResult<()> {
    if method == Method::FnoBp && ckpt.is_none() {
        return Err(Failure::Usage("--method fnobp needs --ckpt".into()));
    }
    let g = read_raster(sino)?.to_sinogram()?;
    let mask = match mask {
        Some(p) => read_raster(p)?.to_mask()?,
        None if method == Method::Fbp => KnownMask::full(g.rows(), g.cols()),
        None => return Err(Failure::Usage(format!("--method {method} needs --mask"))),
    };
    mask.check_shape(&g)?;
    let model = match ckpt {
        Some(dir) => {
            require_dir(dir, "checkpoint")?;
            Some(FnoBpModel::load(dir, cfg.cache_dir())?)
        }
        None => None,
    };
    let pipeline = match &model {
        Some(m) => m.pipeline().clone(),
        None => {
            let mut c = cfg.clone();
            if let Some(p) = geometry {
                c.geometry = read_geometry(p)?;
                c.validate()?;
            }
            c.pipeline()?
        }
    };
    if let (Some(p), Some(m)) = (geometry, &model) {
        if &read_geometry(p)? != m.pipeline().geometry() {
            return Err(Failure::Usage("--geometry differs from the checkpoint geometry".into()));
        }
    }
    g.check_geometry(pipeline.geometry())?;
    let img = evaluation::reconstruct_with(method, &pipeline, model.as_ref(), &g, &mask)?;
    write_image(&img, out)?;
    if let Some(p) = png {
        write_png(&img, p)?;
    }
    Ok(())
}

fn read_geometry(path: &Path) -> CliResult<FanGeometry> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_image(img: &Image, out: &Path) -> CliResult<()> {
    let raster = Raster::from_image(img);
    if out == Path::new("-") {
        let stdout = io::stdout();
        let mut w = BufWriter::new(stdout.lock());
        raster
            .write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Failure::Runtime(format!("standard output: {e}")))
    } else {
        Ok(raster.save(out)?)
    }
}

/// Min-max normalized 8-bit grayscale preview.
fn write_png(img: &Image, path: &Path) -> CliResult<()> {
    let v = img.values();
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = v.iter().map(|&x| ((x - lo) / range * 255.0).round() as u8).collect();
    let side = img.side() as u32;
    image::GrayImage::from_raw(side, side, bytes)
        .expect("buffer matches image size")
        .save(path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn span_dir(root: &Path, span: f64) -> PathBuf {
    root.join(format!("span_{}", span.round() as i64))
}

fn cmd_evaluate(
    cfg: &RunConfig,
    methods: &[Method],
    spans: &[f64],
    data: &Path,
    ckpt_dir: Option<&Path>,
    report: Option<&Path>,
) -> CliResult<()> {
    if methods.is_empty() || spans.is_empty() {
        return Err(Failure::Usage("--methods and --spans must not be empty".into()));
    }
    if let Some(bad) = spans.iter().find(|s| !(**s > 0.0 && **s <= 360.0)) {
        return Err(Failure::Usage(format!("span {bad} must lie in (0, 360]")));
    }
    require_dir(data, "data")?;
    let set = TestSet::load(data)?;
    let mut c = cfg.clone();
    c.geometry = set.manifest.geometry.clone();
    c.grid = set.manifest.grid;
    c.validate()?;
    let pipeline: Pipeline = c.pipeline()?;

    let mut models: BTreeMap<i64, FnoBpModel> = BTreeMap::new();
    if methods.contains(&Method::FnoBp) {
        let root = ckpt_dir.ok_or_else(|| Failure::Usage("fnobp needs --ckpt-dir".into()))?;
        require_dir(root, "checkpoint")?;
        let shared = root.join("model.json").is_file();
        for &span in spans {
            let dir = if shared { root.to_path_buf() } else { span_dir(root, span) };
            if !dir.join("model.json").is_file() {
                return Err(Failure::Runtime(format!("no checkpoint for {span} degrees at {}", dir.display())));
            }
            let model = FnoBpModel::load(&dir, c.cache_dir())?;
            if model.pipeline().geometry() != &set.manifest.geometry || model.pipeline().grid() != set.manifest.grid {
                return Err(Failure::Usage(format!("checkpoint {} does not match the test set geometry", dir.display())));
            }
            models.insert(span.round() as i64, model);
        }
    }
    let lookup = |span: f64| models.get(&(span.round() as i64)).cloned();
    let result = evaluation::evaluate(methods, &set, spans, &pipeline, &lookup)?;
    print!("{}", result.to_table());
    if let Some(p) = report {
        fs::write(p, result.to_csv()).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctkit::evaluation::DEFAULT_SPANS;

    #[test]
    fn method_names() {
        assert_eq!(parse_method("fbp-range").unwrap(), Method::FbpRange);
        let err = parse_method("sirt").unwrap_err();
        assert!(err.contains("fbp, fbp-range, fnobp"), "{err}");
    }

    #[test]
    fn default_spans_match_cli_default() {
        let cli = Cli::try_parse_from(["ctkit", "evaluate", "--data", "x"]).unwrap();
        match cli.command {
            Command::Evaluate { spans, methods, .. } => {
                assert_eq!(spans, DEFAULT_SPANS.to_vec());
                assert_eq!(methods, vec![Method::Fbp, Method::FbpRange]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn span_dirs() {
        assert_eq!(span_dir(Path::new("c"), 60.0), Path::new("c").join("span_60"));
    }
}
