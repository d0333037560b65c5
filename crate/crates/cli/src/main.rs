use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use phaseloc::baseline::{load_trajectory, BaselineConfig};
use phaseloc::calibration::{load_bundles, save_bundles, CalibrationBundle};
use phaseloc::channel::{cfr_to_cir, synthesize_cfr, UPSAMPLING};
use phaseloc::eval::{
    calibrate_scene, records_csv, run_experiment, run_tracking, run_trial, summarize, summarize_tracking, tracking_csv,
    ExperimentSpec, Summary, SweepPoint,
};
use phaseloc::likelihood::evaluate_field;
use phaseloc::phasemodel::{observation_deltas, simulate_observation};
use phaseloc::refine::stage_query;
use phaseloc::rng::{domain, stream};
use phaseloc::scene::{read_scenario_value, scene_from_value, Pose, Scene};

/// Environment variable giving the default worker count.
const THREADS_ENV: &str = "PHASELOC_THREADS";

#[derive(Parser, Debug)]
#[command(name = "phaseloc", version, about = "Multi-band carrier-phase localization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate phase observations (and channel responses) at one pose.
    Simulate(Common),
    /// Fit calibration surfaces from simulated known-location measurements.
    Calibrate(Common),
    /// Refine a single perturbed initial estimate.
    Refine(Common),
    /// Track a trajectory with the TDoA/odometry baseline and refine it.
    Baseline(Common),
    /// Monte-Carlo sweep over initial error, phase noise, heading noise and calibration size.
    Evaluate(Common),
    /// Write the likelihood field of one band around a point.
    DumpLikelihood(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario JSON file.
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: $PHASELOC_THREADS, else all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Initial-error medians, mm.
    #[arg(long, value_delimiter = ',')]
    eps_mm: Option<Vec<f64>>,
    /// Extra phase noise, degrees.
    #[arg(long, value_delimiter = ',')]
    sigma_p_deg: Option<Vec<f64>>,
    /// Heading noise, degrees.
    #[arg(long, value_delimiter = ',')]
    sigma_o_deg: Option<Vec<f64>>,
    /// Calibration point counts (0: no calibration).
    #[arg(long, value_delimiter = ',')]
    nc: Option<Vec<usize>>,
    /// Band index, 1-based (default: highest band).
    #[arg(long)]
    band: Option<usize>,
    /// Target location "x,y" in metres (default: area centre).
    #[arg(long, value_parser = parse_xy, allow_hyphen_values = true)]
    at: Option<[f64; 2]>,
    /// Calibration file written by `calibrate`.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Trajectory JSON for `baseline` (default: built-in loop).
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Scenario override, `dotted.path=value` (value parsed as JSON, else string).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

fn parse_xy(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected x,y but got {s:?}"));
    }
    let p = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    Ok([p(parts[0])?, p(parts[1])?])
}

/// Set `path` (dot separated, numeric segments index arrays) in `root`.
fn apply_override(root: &mut Value, spec: &str) -> Result<(), phaseloc::Error> {
    let bad = |m: String| phaseloc::Error::Validation(format!("override {spec:?}: {m}"));
    let (path, raw) = spec.split_once('=').ok_or_else(|| bad("expected PATH=VALUE".into()))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(bad("empty path segment".into()));
    }
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        cur = match cur {
            Value::Array(a) => {
                let idx: usize = k.parse().map_err(|_| bad(format!("{k:?} is not an array index")))?;
                a.get_mut(idx).ok_or_else(|| bad(format!("index {idx} out of range")))?
            }
            Value::Object(m) => m.entry(k.to_string()).or_insert(if last { Value::Null } else { json!({}) }),
            Value::Null => {
                *cur = json!({});
                cur.as_object_mut().expect("object").entry(k.to_string()).or_insert(Value::Null)
            }
            _ => return Err(bad(format!("{k:?} descends into a scalar"))),
        };
    }
    *cur = value;
    Ok(())
}

struct Loaded {
    value: Value,
    scene: Scene,
    spec: ExperimentSpec,
    out: PathBuf,
}

fn load(c: &Common) -> anyhow::Result<Loaded> {
    let mut value = read_scenario_value(&c.scenario)?;
    for o in &c.overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(seed) = c.seed {
        value["seed"] = json!(seed);
    }
    let scene = scene_from_value(value.clone())?;
    let mut spec = ExperimentSpec::from_value(&scene, value.get("evaluate"), value.get("refine"))?;
    if let Some(v) = &c.eps_mm {
        spec.eps_mm = v.clone();
    }
    if let Some(v) = &c.sigma_p_deg {
        spec.sigma_p_deg = v.clone();
    }
    if let Some(v) = &c.sigma_o_deg {
        spec.sigma_o_deg = v.clone();
    }
    if let Some(v) = &c.nc {
        spec.n_cal = v.clone();
    }
    spec.validate()?;
    std::fs::create_dir_all(&c.out).map_err(|source| phaseloc::Error::Io { path: c.out.clone(), source })?;
    Ok(Loaded { value, scene, spec, out: c.out.clone() })
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|source| phaseloc::Error::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

fn target(c: &Common, scene: &Scene) -> anyhow::Result<[f64; 2]> {
    let xy = c.at.unwrap_or_else(|| scene.area.center());
    if !xy.iter().all(|v| v.is_finite()) {
        return Err(phaseloc::Error::Validation("--at must be finite".into()).into());
    }
    Ok(xy)
}

fn band_index(c: &Common, scene: &Scene) -> anyhow::Result<usize> {
    let k = c.band.unwrap_or(scene.n_bands());
    scene.band(k).map_err(|_| phaseloc::Error::Validation(format!("--band {k}: scene has bands 1..={}", scene.n_bands())))?;
    Ok(k)
}

/// Calibration from `--calibration`, else fitted from the first positive `--nc`.
fn calibration(c: &Common, ctx: &Loaded) -> anyhow::Result<Option<Vec<CalibrationBundle>>> {
    if let Some(p) = &c.calibration {
        let b = load_bundles(p)?;
        if b.len() != ctx.scene.n_bands() {
            return Err(phaseloc::Error::BandMismatch(format!("{} has {} bundles", p.display(), b.len())).into());
        }
        return Ok(Some(b));
    }
    match ctx.spec.n_cal.iter().copied().find(|&n| n > 0) {
        Some(n) => Ok(Some(calibrate_scene(
            &ctx.scene,
            n,
            ctx.spec.heading_rad,
            ctx.spec.calibration_span,
            ctx.spec.calibration_degree,
            ctx.spec.seed,
        )?)),
        None => Ok(None),
    }
}

fn simulate(c: &Common) -> anyhow::Result<String> {
    let ctx = load(c)?;
    let [x, y] = target(c, &ctx.scene)?;
    let pose = Pose::new(ctx.scene.plane_point(x, y), ctx.spec.heading_rad);
    let mut rng = stream(ctx.spec.seed, domain::SCENE, 0);
    let extra = ctx.spec.sigma_p_deg[0].to_radians();
    let obs = simulate_observation(&ctx.scene, &pose, &mut rng, extra)?;
    let deltas = observation_deltas(&ctx.scene, &obs);
    let bands: Vec<Value> = obs
        .iter()
        .zip(&deltas)
        .map(|(o, d)| json!({ "band": o.band_index, "phases_rad": o.phases, "deltas_rad": d.deltas }))
        .collect();
    let doc = json!({ "position_m": [x, y, pose.position.z], "heading_rad": pose.heading(), "bands": bands });
    write(&ctx.out.join("observations.json"), &serde_json::to_string_pretty(&doc)?)?;
    let k = band_index(c, &ctx.scene)?;
    let band = ctx.scene.band(k)?;
    let mut rng = stream(ctx.spec.seed, domain::SCENE, 1);
    for n in 0..band.n_anchors() {
        let cfr = synthesize_cfr(&ctx.scene, band, n, &pose, 0.0, None, &mut rng);
        let cir = cfr_to_cir(&cfr, UPSAMPLING);
        let mut a = Vec::new();
        cfr.write_csv(&mut a)?;
        write(&ctx.out.join(format!("cfr_band{k}_anchor{}.csv", n + 1)), &String::from_utf8(a)?)?;
        let mut b = Vec::new();
        cir.write_csv(&mut b)?;
        write(&ctx.out.join(format!("cir_band{k}_anchor{}.csv", n + 1)), &String::from_utf8(b)?)?;
    }
    Ok(format!("simulated {} bands at ({x:.4}, {y:.4}) m", obs.len()))
}

fn calibrate(c: &Common) -> anyhow::Result<String> {
    let ctx = load(c)?;
    let n = c.nc.as_ref().and_then(|v| v.first().copied()).unwrap_or(50);
    let b = calibrate_scene(&ctx.scene, n, ctx.spec.heading_rad, ctx.spec.calibration_span, ctx.spec.calibration_degree, ctx.spec.seed)?;
    save_bundles(&ctx.out.join("calibration.json"), &b)?;
    let cycles: usize = b.iter().flat_map(|x| x.inconsistent_cycles.iter()).sum();
    Ok(format!("calibrated {} bands from {n} points, {cycles} inconsistent unwrap cycles", b.len()))
}

fn refine_one(c: &Common) -> anyhow::Result<String> {
    let ctx = load(c)?;
    let xy = target(c, &ctx.scene)?;
    let cal = calibration(c, &ctx)?;
    let sweep = SweepPoint {
        eps_mm: ctx.spec.eps_mm[0],
        sigma_p_deg: ctx.spec.sigma_p_deg[0],
        sigma_o_deg: ctx.spec.sigma_o_deg[0],
        n_cal: cal.as_ref().and_then(|b| b.first()?.surfaces.first().map(|s| s.n_points())).unwrap_or(0),
    };
    let r = run_trial(&ctx.scene, &ctx.spec, 0, sweep, xy, cal.as_deref());
    if let Some(f) = &r.failure {
        return Err(anyhow!("refinement failed: {f}"));
    }
    let doc = json!({
        "truth_m": [r.truth.x, r.truth.y, r.truth.z],
        "estimates_m": r.estimates.iter().map(|e| [e.x, e.y, e.z]).collect::<Vec<_>>(),
        "errors_mm": r.errors_mm,
        "margins_mm": r.margins_mm,
        "weak_peak": r.flags.iter().map(|f| f.weak_peak).collect::<Vec<_>>(),
        "calibration_out_of_hull": r.flags.iter().map(|f| f.calibration_out_of_hull).collect::<Vec<_>>(),
    });
    write(&ctx.out.join("refine.json"), &serde_json::to_string_pretty(&doc)?)?;
    Ok(format!(
        "refined: initial error {:.3} mm, final error {:.3} mm",
        r.initial_error_mm().unwrap_or(f64::NAN),
        r.final_error_mm().unwrap_or(f64::NAN)
    ))
}

fn baseline(c: &Common) -> anyhow::Result<String> {
    let ctx = load(c)?;
    let cfg = BaselineConfig::from_value(ctx.value.get("baseline"))?;
    let traj = match &c.trajectory {
        Some(p) => load_trajectory(p)?,
        None => cfg.trajectory.build(&ctx.scene.area)?,
    };
    let cal = calibration(c, &ctx)?;
    let steps = run_tracking(&ctx.scene, &traj, &cfg, &ctx.spec.refine, cal.as_deref(), ctx.spec.seed)?;
    let s = summarize_tracking(&steps)?;
    write(&ctx.out.join("tracking.csv"), &tracking_csv(&steps))?;
    write(&ctx.out.join("tracking_summary.json"), &serde_json::to_string_pretty(&s)?)?;
    Ok(format!(
        "steps {}, baseline median {:.3} mm, refined median {:.3} mm, ratio {:.1}",
        s.steps, s.baseline_median_mm, s.refined_median_mm, s.ratio
    ))
}

fn evaluate(c: &Common) -> anyhow::Result<String> {
    let ctx = load(c)?;
    let records = run_experiment(&ctx.scene, &ctx.spec)?;
    let summary = summarize(&records)?;
    write(&ctx.out.join("records.csv"), &records_csv(&records, ctx.scene.n_bands() + 1))?;
    write(&ctx.out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    let failed = records.iter().filter(|r| r.failure.is_some()).count();
    Ok(match Summary::overall_final(&records) {
        Some(f) => format!("trials {}, failed {failed}, median {:.3} mm, p90 {:.3} mm", records.len(), f.median_mm, f.p90_mm),
        None => format!("trials {}, failed {failed}", records.len()),
    })
}

fn dump_likelihood(c: &Common) -> anyhow::Result<String> {
    let ctx = load(c)?;
    let [x, y] = target(c, &ctx.scene)?;
    let k = band_index(c, &ctx.scene)?;
    let pose = Pose::new(ctx.scene.plane_point(x, y), ctx.spec.heading_rad);
    let mut rng = stream(ctx.spec.seed, domain::SCENE, 0);
    let obs = simulate_observation(&ctx.scene, &pose, &mut rng, ctx.spec.sigma_p_deg[0].to_radians())?;
    let deltas = observation_deltas(&ctx.scene, &obs);
    let cal = calibration(c, &ctx)?;
    let q = stage_query(
        &ctx.scene,
        k,
        &deltas[k - 1],
        ctx.spec.heading_rad,
        &pose.position,
        cal.as_ref().map(|b| &b[k - 1]),
        &ctx.spec.refine,
    )?;
    let field = evaluate_field(&q)?;
    let mut buf = Vec::new();
    field.write_csv(&mut buf)?;
    write(&ctx.out.join(format!("likelihood_band{k}.csv")), &String::from_utf8(buf)?)?;
    let strong = field.strong_peaks().count();
    Ok(format!("band {k}: {} grid points, {} peaks ({strong} strong)", field.values.len(), field.peaks.len()))
}

fn init_threads(c: &Common) -> anyhow::Result<()> {
    let n = match c.threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| phaseloc::Error::Validation(format!("{THREADS_ENV}={s:?} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(phaseloc::Error::Validation("thread count must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let common = match &cli.command {
        Command::Simulate(c)
        | Command::Calibrate(c)
        | Command::Refine(c)
        | Command::Baseline(c)
        | Command::Evaluate(c)
        | Command::DumpLikelihood(c) => c,
    };
    init_threads(common)?;
    match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Calibrate(c) => calibrate(c),
        Command::Refine(c) => refine_one(c),
        Command::Baseline(c) => baseline(c),
        Command::Evaluate(c) => evaluate(c),
        Command::DumpLikelihood(c) => dump_likelihood(c),
    }
}

/// 1 for bad input (unreadable or invalid scenario, bad flags), 2 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<phaseloc::Error>() {
        Some(p) if p.is_validation() => 1,
        _ => 2,
    }
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
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_paths() {
        let mut v = json!({ "bands": [{ "f_hz": 1.0 }, { "f_hz": 2.0 }], "noise": null });
        apply_override(&mut v, "bands.1.f_hz=3.5").unwrap();
        apply_override(&mut v, "noise.sigma_deg=7").unwrap();
        apply_override(&mut v, "description=hello world").unwrap();
        assert_eq!(v["bands"][1]["f_hz"], json!(3.5));
        assert_eq!(v["noise"]["sigma_deg"], json!(7));
        assert_eq!(v["description"], json!("hello world"));
        assert!(apply_override(&mut v, "bands.5.f_hz=1").is_err());
        assert!(apply_override(&mut v, "bands.x=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "bands.0.f_hz.deeper=1").is_err());
    }

    #[test]
    fn xy_parsing() {
        assert_eq!(parse_xy("0.6,-0.25").unwrap(), [0.6, -0.25]);
        assert!(parse_xy("0.6").is_err());
        assert!(parse_xy("a,b").is_err());
    }
}
