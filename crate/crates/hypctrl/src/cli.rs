//! Command-line interface: argument parsing, dispatch, and artifact writing.
//!
//! All file outputs are deterministic: floating-point values are written
//! with 17 significant digits, rows are emitted in a fixed order, and no
//! wall-clock data enters any artifact.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::backstepping::BacksteppingDesign;
use crate::flatness::{FlatStructure, InputFunctional, PlanAt, ReferenceSampler, TauGrid};
use crate::model::{Grid, System};
use crate::scenario::Scenario;
use crate::simulator::{self, ControllerSpec, Metrics, SimResult};
use crate::transforms::{Decoupling, KernelComponent, KernelTables};
use crate::{Error, Result};

/// Normal-form tracking controllers for boundary-actuated transport
/// systems coupled to dynamics at the unactuated end.
#[derive(Debug, Parser)]
#[command(name = "hypctrl", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Subcommands.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one closed-loop simulation and write its artifacts
    Simulate(RunArgs),
    /// Solve the transformation kernels and write tables plus a residual report
    Kernels(RunArgs),
    /// Tabulate the reference trajectory without simulating
    Plan(RunArgs),
    /// Run matched controllers on the same scenario and compare their inputs
    Compare(RunArgs),
}

/// Arguments shared by all subcommands.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario file (JSON)
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory (overrides the scenario's output.directory)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Validate the scenario, print derived quantities, and exit
    #[arg(long)]
    pub dry_run: bool,
    /// Refine the grid and the time step by this integer factor
    #[arg(long, default_value_t = 1, value_name = "FACTOR")]
    pub refine: u32,
}

/// Binary entry point: parse, dispatch, map errors to exit codes
/// (0 success, 2 configuration/IO, 3 numerics).
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Runs one parsed command.
pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Kernels(args) => cmd_kernels(&args),
        Command::Plan(args) => cmd_plan(&args),
        Command::Compare(args) => cmd_compare(&args),
    }
}

fn load_scenario(args: &RunArgs) -> Result<Scenario> {
    if args.refine == 0 {
        return Err(Error::invalid_input("--refine must be at least 1"));
    }
    Ok(Scenario::from_path(&args.config)?.refined(args.refine))
}

fn output_dir(args: &RunArgs, sc: &Scenario) -> Result<PathBuf> {
    args.out
        .clone()
        .or_else(|| sc.output.directory.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            Error::invalid_input("no output directory: set output.directory or pass --out")
        })
}

/// Prints the derived quantities a valid scenario implies, without running.
fn print_dry_run(sc: &Scenario, sys: &System) -> Result<()> {
    let ch = sys.characteristics()?;
    println!(
        "system: ode_dim = {}, grid m = {}, dt = {}, t_end = {}",
        sys.ode_dim,
        sys.grid().intervals(),
        sc.sim.dt,
        sc.sim.t_end
    );
    println!("travel times: tau1 = {:.6}, tau2 = {:.6}", ch.tau1, ch.tau2);
    let mut eigs: Vec<(f64, f64)> = sys
        .f
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|e| (e.re, e.im))
        .collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    let printed: Vec<String> = eigs
        .iter()
        .map(|(re, im)| {
            if im.abs() < 1e-12 {
                format!("{re:.6}")
            } else {
                format!("{re:.6}{im:+.6}i")
            }
        })
        .collect();
    println!("F eigenvalues: [{}]", printed.join(", "));
    let spec = sc.resolve_controller(sys)?;
    println!("controller: {}", controller_label(&spec));
    Ok(())
}

fn controller_label(spec: &ControllerSpec) -> String {
    match spec {
        ControllerSpec::None => "none".into(),
        ControllerSpec::Feedforward => "feedforward".into(),
        ControllerSpec::Flatness { kappa, gamma } => {
            format!("flatness (gamma = {gamma}, kappa = {kappa:?})")
        }
        ControllerSpec::Backstepping { q1_cl, gain, kappa } => match gain {
            Some(k) => format!("backstepping (q1_cl = {q1_cl}, gain = {k:?})"),
            None => format!("backstepping (q1_cl = {q1_cl}, kappa = {kappa:?})"),
        },
    }
}

fn kind_name(spec: &ControllerSpec) -> &'static str {
    match spec {
        ControllerSpec::None => "none",
        ControllerSpec::Feedforward => "feedforward",
        ControllerSpec::Flatness { .. } => "flatness",
        ControllerSpec::Backstepping { .. } => "backstepping",
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RunDocument<'a> {
    command: &'a str,
    refine: u32,
    tau1: f64,
    tau2: f64,
    metrics: &'a Metrics,
    config: &'a Scenario,
}

fn cmd_simulate(args: &RunArgs) -> Result<()> {
    let sc = load_scenario(args)?;
    let (sys, dec, cfg) = sc.build()?;
    if args.dry_run {
        return print_dry_run(&sc, &sys);
    }
    let dir = output_dir(args, &sc)?;
    let result = simulator::run(&sys, &dec, &cfg)?;
    std::fs::create_dir_all(&dir)?;
    write_run_artifacts(&dir, &sc, &sys, &dec, &result, "simulate", args.refine)?;
    println!(
        "wrote {} (u_rms = {:.6}, tail tracking error = {:.6})",
        dir.display(),
        result.metrics.u_rms,
        result.metrics.tracking_error_tail
    );
    Ok(())
}

/// Writes the artifact set of one closed-loop run into `dir`.
fn write_run_artifacts(
    dir: &Path,
    sc: &Scenario,
    sys: &System,
    dec: &Decoupling,
    result: &SimResult,
    command: &str,
    refine: u32,
) -> Result<()> {
    write_timeseries(&dir.join("timeseries.csv"), result)?;
    if !result.snapshots.is_empty() {
        write_profiles(&dir.join("profiles.csv"), result, &sys.grid())?;
    }
    if result.snapshots.iter().any(|s| s.target_error.is_some()) {
        write_target_error(&dir.join("target_error.csv"), result, &sys.grid())?;
    }
    let doc = RunDocument {
        command,
        refine,
        tau1: dec.chars.tau1,
        tau2: dec.chars.tau2,
        metrics: &result.metrics,
        config: sc,
    };
    write_json(&dir.join("metrics.json"), &doc)
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ResidualQuad {
    k11: f64,
    k12: f64,
    k21: f64,
    k22: f64,
}

#[derive(Serialize)]
struct BoundaryQuad {
    diag_k12: f64,
    diag_k21: f64,
    edge_k11: f64,
    edge_k22: f64,
}

#[derive(Serialize)]
struct BsReport {
    gain: Vec<f64>,
    q1_cl: f64,
    ode_feedback_row: Vec<f64>,
}

#[derive(Serialize)]
struct KernelsDocument<'a> {
    command: &'a str,
    refine: u32,
    tau1: f64,
    tau2: f64,
    sweeps: usize,
    interior_residual: ResidualQuad,
    boundary_residual: BoundaryQuad,
    roundtrip_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    backstepping: Option<BsReport>,
    config: &'a Scenario,
}

fn cmd_kernels(args: &RunArgs) -> Result<()> {
    let sc = load_scenario(args)?;
    let sys = sc.build_system()?;
    sys.validate()?;
    if args.dry_run {
        return print_dry_run(&sc, &sys);
    }
    let dir = output_dir(args, &sc)?;
    let dec = Decoupling::new(&sys)?;
    let grid = sys.grid();

    let interior = dec
        .kernel
        .interior_residual_by_component(&sys, &dec.scaling);
    let boundary = dec.kernel.boundary_residual(&sys, &dec.scaling);
    let roundtrip = roundtrip_residual(&dec, &grid);

    // The decoupling stage exists only for tracking controllers; reuse the
    // scenario's tuning when one is given.
    let design = match sc.resolve_controller(&sys)? {
        ControllerSpec::Flatness { kappa, gamma } => Some(BacksteppingDesign::new(
            &sys,
            &dec,
            &kappa,
            -gamma / sys.q0,
        )?),
        ControllerSpec::Backstepping { kappa, q1_cl, gain } => Some(match gain {
            Some(k) => BacksteppingDesign::with_gain(
                &sys,
                &dec,
                nalgebra::DVector::from_column_slice(&k),
                q1_cl,
            )?,
            None => BacksteppingDesign::new(&sys, &dec, &kappa, q1_cl)?,
        }),
        _ => None,
    };

    std::fs::create_dir_all(&dir)?;
    write_kernel_tables(&dir.join("kernels.csv"), &dec.kernel, &grid)?;
    write_kernel_tables(&dir.join("kernels_inverse.csv"), &dec.inverse, &grid)?;
    if let Some(design) = &design {
        write_decoupling(&dir.join("decoupling.csv"), design, &grid)?;
    }
    let doc = KernelsDocument {
        command: "kernels",
        refine: args.refine,
        tau1: dec.chars.tau1,
        tau2: dec.chars.tau2,
        sweeps: dec.kernel.sweeps,
        interior_residual: ResidualQuad {
            k11: interior[0],
            k12: interior[1],
            k21: interior[2],
            k22: interior[3],
        },
        boundary_residual: BoundaryQuad {
            diag_k12: boundary[0],
            diag_k21: boundary[1],
            edge_k11: boundary[2],
            edge_k22: boundary[3],
        },
        roundtrip_residual: roundtrip,
        backstepping: design.as_ref().map(|d| BsReport {
            gain: d.gain.iter().copied().collect(),
            q1_cl: d.q1_cl,
            ode_feedback_row: d.r.iter().copied().collect(),
        }),
        config: &sc,
    };
    write_json(&dir.join("kernels_report.json"), &doc)?;
    println!(
        "wrote {} (interior residual max = {:.3e}, boundary residual max = {:.3e}, \
         roundtrip = {:.3e})",
        dir.display(),
        interior.iter().fold(0.0f64, |a, &v| a.max(v)),
        boundary.iter().fold(0.0f64, |a, &v| a.max(v)),
        roundtrip,
    );
    Ok(())
}

/// Forward-then-inverse deviation of the kernel pair on probe profiles.
fn roundtrip_residual(dec: &Decoupling, grid: &Grid) -> f64 {
    let p1: Vec<f64> = grid
        .nodes()
        .map(|z| (std::f64::consts::PI * z).sin())
        .collect();
    let p2: Vec<f64> = grid
        .nodes()
        .map(|z| (2.0 * std::f64::consts::PI * z).cos())
        .collect();
    let (b1, b2) = dec.kernel.apply(-1.0, &p1, &p2);
    let (r1, r2) = dec.inverse.apply(1.0, &b1, &b2);
    let mut worst = 0.0f64;
    for k in 0..p1.len() {
        worst = worst.max((r1[k] - p1[k]).abs());
        worst = worst.max((r2[k] - p2[k]).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

fn cmd_plan(args: &RunArgs) -> Result<()> {
    let sc = load_scenario(args)?;
    let sys = sc.build_system()?;
    sys.validate()?;
    if args.dry_run {
        return print_dry_run(&sc, &sys);
    }
    let dir = output_dir(args, &sc)?;
    let dec = Decoupling::new(&sys)?;
    let fs = FlatStructure::new(&sys)?;
    let plan = sc.build_plan(&fs, dec.chars.tau1, dec.chars.tau2)?;
    let sampler = ReferenceSampler::new(&sys, &dec, &fs, plan.clone(), sc.sim.t_end, sc.sim.dt)?;
    let plant_form =
        InputFunctional::plant(&fs, &dec, TauGrid::new(&dec.chars, sys.grid().intervals()))
            .reduce()?;

    std::fs::create_dir_all(&dir)?;
    let mut w = csv_writer(&dir.join("reference.csv"))?;
    let n = sys.ode_dim;
    let mut header = vec!["t".to_string()];
    for d in 0..=n {
        header.push(format!("y_r_d{d}"));
    }
    for i in 1..=n {
        header.push(format!("xi_r_{i}"));
    }
    header.push("u_r".into());
    writeln!(w, "{}", header.join(","))?;
    let steps = (sc.sim.t_end / sc.sim.dt).round() as usize;
    for k in 0..=steps {
        let t = k as f64 * sc.sim.dt;
        let mut row = vec![fmt_f(t)];
        for d in 0..=n {
            row.push(fmt_f(plan.eval(d, t)));
        }
        let xi_r = sampler.ode_state(t);
        for i in 0..n {
            row.push(fmt_f(xi_r[i]));
        }
        let ubar_r = plant_form.apply(&PlanAt { plan: &plan, t });
        let (r1, r2) = sampler.profiles(t);
        let (s1, s2) = dec.inverse.apply(1.0, &r1, &r2);
        row.push(fmt_f(dec.physical_input(ubar_r, &s1, &s2)));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    println!("wrote {}", dir.join("reference.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CompareDocument<'a> {
    command: &'a str,
    refine: u32,
    main_kind: &'a str,
    counterpart_kind: &'a str,
    /// `max_t |u_main(t) − u_counterpart(t)|` along the main trajectory.
    input_deviation_max: f64,
    /// L∞ distance between the two closed-loop trajectories
    /// (ODE states and boundary traces).
    state_distance_linf: f64,
    u_rms_main: f64,
    u_rms_counterpart: f64,
    config: &'a Scenario,
}

fn cmd_compare(args: &RunArgs) -> Result<()> {
    let sc = load_scenario(args)?;
    let (sys, dec, cfg) = sc.build()?;
    if args.dry_run {
        return print_dry_run(&sc, &sys);
    }
    let dir = output_dir(args, &sc)?;

    let mut cfg_main = cfg.clone();
    cfg_main.dual_eval = true;
    let counterpart = simulator::matched_counterpart(&sys, &cfg.controller)?;
    let mut cfg_other = cfg.clone();
    cfg_other.controller = counterpart.clone();

    let threads = sub_run_threads();
    let (res_main, res_other) = if threads >= 2 {
        let (a, b) = std::thread::scope(|scope| {
            let ha = scope.spawn(|| simulator::run(&sys, &dec, &cfg_main));
            let hb = scope.spawn(|| simulator::run(&sys, &dec, &cfg_other));
            (ha.join(), hb.join())
        });
        let unwind = |r: std::thread::Result<Result<SimResult>>| -> Result<SimResult> {
            match r {
                Ok(inner) => inner,
                Err(p) => std::panic::resume_unwind(p),
            }
        };
        (unwind(a)?, unwind(b)?)
    } else {
        (
            simulator::run(&sys, &dec, &cfg_main)?,
            simulator::run(&sys, &dec, &cfg_other)?,
        )
    };

    std::fs::create_dir_all(&dir)?;
    let main_dir = dir.join("main");
    let other_dir = dir.join("counterpart");
    std::fs::create_dir_all(&main_dir)?;
    std::fs::create_dir_all(&other_dir)?;
    write_run_artifacts(
        &main_dir,
        &sc,
        &sys,
        &dec,
        &res_main,
        "compare",
        args.refine,
    )?;
    write_run_artifacts(
        &other_dir,
        &sc,
        &sys,
        &dec,
        &res_other,
        "compare",
        args.refine,
    )?;

    // Per-step input deviation along the main trajectory.
    let alt = res_main
        .u_alt
        .as_ref()
        .expect("dual evaluation recorded the counterpart input");
    let mut w = csv_writer(&dir.join("compare.csv"))?;
    writeln!(w, "t,u_main,u_counterpart,deviation")?;
    for k in 0..res_main.t.len() {
        writeln!(
            w,
            "{},{},{},{}",
            fmt_f(res_main.t[k]),
            fmt_f(res_main.u[k]),
            fmt_f(alt[k]),
            fmt_f((res_main.u[k] - alt[k]).abs()),
        )?;
    }
    w.flush()?;

    let doc = CompareDocument {
        command: "compare",
        refine: args.refine,
        main_kind: kind_name(&cfg.controller),
        counterpart_kind: kind_name(&counterpart),
        input_deviation_max: res_main.metrics.controller_deviation_max.unwrap_or(0.0),
        state_distance_linf: state_distance(&res_main, &res_other),
        u_rms_main: res_main.metrics.u_rms,
        u_rms_counterpart: res_other.metrics.u_rms,
        config: &sc,
    };
    let dev = doc.input_deviation_max;
    let dist = doc.state_distance_linf;
    write_json(&dir.join("metrics.json"), &doc)?;
    println!(
        "wrote {} (input deviation max = {:.3e}, state distance = {:.3e})",
        dir.display(),
        dev,
        dist,
    );
    Ok(())
}

/// Number of parallel sub-runs allowed (capped by `HYPCTRL_THREADS`).
fn sub_run_threads() -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var("HYPCTRL_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(available);
    cap.clamp(1, 2)
}

/// L∞ distance between two runs of equal length: ODE states and boundary
/// traces.
fn state_distance(a: &SimResult, b: &SimResult) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..a.t.len().min(b.t.len()) {
        for (va, vb) in a.xi[k].iter().zip(&b.xi[k]) {
            worst = worst.max((va - vb).abs());
        }
        worst = worst.max((a.x1_at_0[k] - b.x1_at_0[k]).abs());
        worst = worst.max((a.x2_at_1[k] - b.x2_at_1[k]).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// writers
// ---------------------------------------------------------------------------

/// Formats a float with 17 significant digits (lossless round trip).
fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes the per-step series of one run.
pub fn write_timeseries(path: &Path, res: &SimResult) -> Result<()> {
    let n = res.xi.first().map(|v| v.len()).unwrap_or(0);
    let mut w = csv_writer(path)?;
    let mut header = vec!["t".to_string()];
    for i in 1..=n {
        header.push(format!("xi_{i}"));
    }
    header.extend(
        ["u", "u_r", "x1_at_0", "x2_at_1", "y", "y_r"]
            .iter()
            .map(|s| s.to_string()),
    );
    if res.u_alt.is_some() {
        header.push("u_alt".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for k in 0..res.t.len() {
        let mut row = vec![fmt_f(res.t[k])];
        for v in &res.xi[k] {
            row.push(fmt_f(*v));
        }
        for v in [
            res.u[k],
            res.u_r[k],
            res.x1_at_0[k],
            res.x2_at_1[k],
            res.y[k],
            res.y_r[k],
        ] {
            row.push(fmt_f(v));
        }
        if let Some(alt) = &res.u_alt {
            row.push(fmt_f(alt[k]));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the recorded profile snapshots in long format.
pub fn write_profiles(path: &Path, res: &SimResult, grid: &Grid) -> Result<()> {
    let mut w = csv_writer(path)?;
    writeln!(w, "t,z,x1,x2,x1_ref,x2_ref")?;
    for snap in &res.snapshots {
        for k in 0..grid.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                fmt_f(snap.t),
                fmt_f(grid.node(k)),
                fmt_f(snap.x1[k]),
                fmt_f(snap.x2[k]),
                fmt_f(snap.x1_ref[k]),
                fmt_f(snap.x2_ref[k]),
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the target-coordinate error profiles of backstepping snapshots.
pub fn write_target_error(path: &Path, res: &SimResult, grid: &Grid) -> Result<()> {
    let mut w = csv_writer(path)?;
    writeln!(w, "t,z,err1,err2")?;
    for snap in &res.snapshots {
        if let Some((e1, e2)) = &snap.target_error {
            for k in 0..grid.len() {
                writeln!(
                    w,
                    "{},{},{},{}",
                    fmt_f(snap.t),
                    fmt_f(grid.node(k)),
                    fmt_f(e1[k]),
                    fmt_f(e2[k]),
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a kernel table on the triangle `ζ ≤ z`.
pub fn write_kernel_tables(path: &Path, tables: &KernelTables, grid: &Grid) -> Result<()> {
    let mut w = csv_writer(path)?;
    writeln!(w, "z,zeta,k11,k12,k21,k22")?;
    for j in 0..grid.len() {
        for i in 0..=j {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                fmt_f(grid.node(j)),
                fmt_f(grid.node(i)),
                fmt_f(tables.entry(KernelComponent::K11, j, i)),
                fmt_f(tables.entry(KernelComponent::K12, j, i)),
                fmt_f(tables.entry(KernelComponent::K21, j, i)),
                fmt_f(tables.entry(KernelComponent::K22, j, i)),
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the ODE-decoupling stage: `N(z)` and the distributed feedback
/// weights derived from the boundary kernels.
pub fn write_decoupling(path: &Path, design: &BacksteppingDesign, grid: &Grid) -> Result<()> {
    let n = design.gain.len();
    let mut w = csv_writer(path)?;
    let mut header = vec!["z".to_string()];
    for i in 1..=n {
        header.push(format!("n1_{i}"));
    }
    for i in 1..=n {
        header.push(format!("n2_{i}"));
    }
    header.push("w1".into());
    header.push("w2".into());
    writeln!(w, "{}", header.join(","))?;
    for k in 0..grid.len() {
        let mut row = vec![fmt_f(grid.node(k))];
        for i in 0..n {
            row.push(fmt_f(design.n_table[k][(0, i)]));
        }
        for i in 0..n {
            row.push(fmt_f(design.n_table[k][(1, i)]));
        }
        row.push(fmt_f(design.w1[k]));
        row.push(fmt_f(design.w2[k]));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_keeps_seventeen_significant_digits() {
        for &x in &[2.5e-3f64, -1.0 / 3.0, 6.02214076e23, 0.0] {
            let s = fmt_f(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s} did not round-trip");
        }
    }

    #[test]
    fn thread_cap_is_at_most_two() {
        assert!(sub_run_threads() <= 2);
        assert!(sub_run_threads() >= 1);
    }
}
