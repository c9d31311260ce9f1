use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctkit::config::RunConfig;
use ctkit::evaluation::DEFAULT_SPANS;
use ctkit::extrapolation::BasisSpec;
use ctkit::fno::FnoSpec;
use ctkit::phantoms::{load_sample, DatasetManifest};
use ctkit::raster::{Raster, RasterData};
use ctkit::{FanGeometry, ImageGrid, KnownMask};
use tempfile::TempDir;

fn ctkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctkit"))
        .args(args)
        .env_remove("CTKIT_CACHE_DIR")
        .output()
        .expect("spawn ctkit")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig {
        geometry: FanGeometry::full_scan(4.0, 32, 2.3, 36, 0.95).unwrap(),
        grid: ImageGrid::covering(32, 1.0).unwrap(),
        basis: BasisSpec { orders: 12, ..Default::default() },
        fno: FnoSpec { width: 4, modes: 8, layers: 2, ..Default::default() },
        ..Default::default()
    };
    cfg.phantom.hole_count = [1, 2];
    cfg.phantom.hole_size_range = [0.2, 0.4];
    cfg.training.batch_size = 4;
    cfg.training.learning_rate = 1e-3;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, config: &Path, count: usize, span: f64, keep_full: bool) -> PathBuf {
    let out = dir.join(format!("data_{count}_{span}"));
    let count = count.to_string();
    let span = span.to_string();
    let mut args = vec!["generate", "--config", p(config), "--count", &count, "--span", &span, "--out", p(&out)];
    if keep_full {
        args.push("--keep-full");
    }
    ok(ctkit(&args));
    out
}

#[test]
fn generate_writes_samples_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let data = generate(tmp.path(), &config, 10, 60.0, false);
    let m = DatasetManifest::load(&data).unwrap();
    assert_eq!(m.samples.len(), 10);
    assert_eq!(m.span_deg, 60.0);
    for e in &m.samples {
        let s = load_sample(&data, e.index).unwrap();
        assert_eq!(s.mask, KnownMask::wedge(&m.geometry, e.wedge_start, 60.0).unwrap());
        assert_eq!(s.sinogram, s.sinogram.masked(&s.mask));
    }
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&small_config().to_json()).unwrap();
    v["phantom"]["disc_valu"] = 1.0.into();
    let path = tmp.path().join("bad.json");
    fs::write(&path, v.to_string()).unwrap();
    let o = ctkit(&["generate", "--config", p(&path), "--count", "1", "--span", "60", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("disc_valu"), "{}", stderr(&o));

    let mut cfg = small_config();
    cfg.training.batch_size = 0;
    fs::write(&path, cfg.to_json()).unwrap();
    let o = ctkit(&["generate", "--config", p(&path), "--count", "1", "--span", "60", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("training.batch_size"), "{}", stderr(&o));
}

#[test]
fn train_missing_data_dir_fails() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let o = ctkit(&["train", "--config", p(&config), "--data", p(&tmp.path().join("nope")), "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"));
}

fn epoch_means(csv: &Path) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for line in fs::read_to_string(csv).unwrap().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let epoch: usize = f[1].parse().unwrap();
        let loss: f64 = f[2].parse().unwrap();
        if sums.len() <= epoch {
            sums.resize(epoch + 1, (0.0, 0));
        }
        sums[epoch].0 += loss;
        sums[epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n as f64).collect()
}

#[test]
fn train_reduces_loss_and_resume_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let data = generate(tmp.path(), &config, 100, 90.0, false);

    let straight = tmp.path().join("straight");
    let o = ok(ctkit(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&straight), "--epochs", "2"]));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("mean loss").count(), 2);
    let header = fs::read_to_string(straight.join("loss.csv")).unwrap();
    assert!(header.starts_with("step,epoch,loss\n"));
    let means = epoch_means(&straight.join("loss.csv"));
    let first_batch: f64 = header.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!(means[1] <= 0.5 * first_batch, "epoch means {means:?}, first batch {first_batch}");

    let half = tmp.path().join("half");
    ok(ctkit(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&half), "--epochs", "1"]));
    let resumed = tmp.path().join("resumed");
    ok(ctkit(&[
        "train", "--config", p(&config), "--data", p(&data), "--out", p(&resumed), "--epochs", "2", "--resume", p(&half),
    ]));
    for entry in fs::read_dir(straight.join("fno")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(straight.join("fno").join(&name)).unwrap();
        let b = fs::read(resumed.join("fno").join(&name)).unwrap();
        assert!(a == b, "{name:?} differs after resume");
    }
    assert_eq!(fs::read(straight.join("loss.csv")).unwrap(), fs::read(resumed.join("loss.csv")).unwrap());
}

#[test]
fn reconstruct_fnobp_needs_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let data = generate(tmp.path(), &config, 1, 90.0, false);
    let o = ctkit(&[
        "reconstruct", "--config", p(&config), "--method", "fnobp",
        "--sino", p(&data.join("sample_00000.sino")), "--mask", p(&data.join("sample_00000.mask")),
        "--out", p(&tmp.path().join("x.raster")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--ckpt"));
}

#[test]
fn reconstruct_fbp_matches_library_bitwise_and_streams() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config();
    let config = write_config(tmp.path(), &cfg);
    let data = generate(tmp.path(), &config, 1, 90.0, false);
    let sino = data.join("sample_00000.sino");
    let mask = data.join("sample_00000.mask");
    let out = tmp.path().join("fbp.raster");
    let png = tmp.path().join("fbp.png");
    ok(ctkit(&[
        "reconstruct", "--config", p(&config), "--method", "fbp", "--sino", p(&sino), "--out", p(&out), "--png", p(&png),
    ]));
    let got = Raster::load(&out).unwrap().to_image().unwrap();
    let sample = load_sample(&data, 0).unwrap();
    let expected = cfg.pipeline().unwrap().fbp(&sample.sinogram).unwrap();
    assert_eq!(got.values(), expected.values());
    assert_eq!(&fs::read(&png).unwrap()[..8], b"\x89PNG\r\n\x1a\n");

    let o = ok(ctkit(&[
        "reconstruct", "--config", p(&config), "--method", "fbp-range", "--sino", p(&sino), "--mask", p(&mask), "--out", "-",
    ]));
    let streamed = Raster::read_from(BufReader::new(&o.stdout[..]), Path::new("-")).unwrap();
    let file_out = tmp.path().join("range.raster");
    ok(ctkit(&[
        "reconstruct", "--config", p(&config), "--method", "fbp-range", "--sino", p(&sino), "--mask", p(&mask),
        "--out", p(&file_out),
    ]));
    assert_eq!(o.stdout, fs::read(&file_out).unwrap());
    assert_eq!(streamed.shape, vec![32, 32]);
}

/// Files laid out the way the converter writes them: an f32 sinogram, a u8
/// mask and a geometry JSON with the source radius under "R".
#[test]
fn reconstruct_accepts_converter_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config();
    let config = write_config(tmp.path(), &cfg);
    let data = generate(tmp.path(), &config, 1, 90.0, false);
    let sample = load_sample(&data, 0).unwrap();

    let g32: Vec<f32> = sample.sinogram.values().iter().map(|&v| v as f32).collect();
    let sino = tmp.path().join("converted.sino");
    Raster::new(vec![36, 32], RasterData::F32(g32)).unwrap().save(&sino).unwrap();
    let mask = tmp.path().join("converted.mask");
    Raster::from_mask(&sample.mask).save(&mask).unwrap();
    let angles: Vec<f64> = (0..36).map(|i| i as f64 * 10.0).collect();
    let geometry = tmp.path().join("geometry.json");
    let json = serde_json::json!({"R": 4.0, "bins": 32, "extent": 2.3, "angles_deg": angles, "fov": 0.95});
    fs::write(&geometry, json.to_string()).unwrap();

    let out = tmp.path().join("img.raster");
    ok(ctkit(&[
        "reconstruct", "--config", p(&config), "--method", "fbp-range", "--sino", p(&sino), "--mask", p(&mask),
        "--geometry", p(&geometry), "--out", p(&out),
    ]));
    let img = Raster::load(&out).unwrap().to_image().unwrap();
    assert_eq!(img.side(), 32);

    let bad = serde_json::json!({"R": 4.0, "bins": 32, "extent": 2.3, "angles_deg": angles});
    fs::write(&geometry, bad.to_string()).unwrap();
    let o = ctkit(&[
        "reconstruct", "--config", p(&config), "--method", "fbp", "--sino", p(&sino), "--geometry", p(&geometry),
        "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fov"), "{}", stderr(&o));
}

#[test]
fn evaluate_unknown_method_lists_valid_ones() {
    let o = ctkit(&["evaluate", "--methods", "fbp,sart", "--data", "unused"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("fbp, fbp-range, fnobp"), "{err}");
}

#[test]
fn evaluate_default_spans_and_report_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config();
    let config = write_config(tmp.path(), &cfg);
    let test = generate(tmp.path(), &config, 4, 90.0, true);
    let train = generate(tmp.path(), &config, 8, 90.0, false);
    let ckpt = tmp.path().join("ckpt");
    ok(ctkit(&["train", "--config", p(&config), "--data", p(&train), "--out", p(&ckpt), "--epochs", "1"]));

    let report = tmp.path().join("report.csv");
    let o = ok(ctkit(&[
        "evaluate", "--config", p(&config), "--methods", "fbp,fbp-range,fnobp", "--data", p(&test),
        "--ckpt-dir", p(&ckpt), "--report", p(&report),
    ]));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    let header = table.lines().next().unwrap();
    for span in DEFAULT_SPANS {
        assert!(header.contains(&format!("{}", span as i64)), "{table}");
    }
    let csv = fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "method,span_deg,mean_mcc,samples");
    assert_eq!(rows.len() - 1, 3 * DEFAULT_SPANS.len());

    let o = ctkit(&["evaluate", "--config", p(&config), "--methods", "fnobp", "--data", p(&test)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn default_config_is_valid() {
    let o = ok(ctkit(&["config"]));
    let cfg = RunConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}
