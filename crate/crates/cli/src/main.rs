use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use emctl_core::certifier::{self, Certificate};
use emctl_core::faulton::{self, DesignFile, DesignMode, DesignOptions, FaultOnProblem, VerifyOptions};
use emctl_core::network::{format_line_key, parse_line_key, SusceptanceBounds};
use emctl_core::postfault::{self, PostFaultFile, StateFile};
use emctl_core::powerflow::{self, EquilibriumResult};
use emctl_core::simulator::{self, ScenarioSpec, DEFAULT_DT};
use emctl_core::{assemble_matrices, load_network, model, Error, PowerNetwork, Result, State, SystemMatrices};

/// Transient stability certificates and emergency susceptance control.
#[derive(Parser, Debug)]
#[command(name = "emctl", version)]
struct Cli {
    /// Seed for randomized restarts.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the power-flow equations for the equilibrium angles.
    Equilibrium(EquilibriumArgs),
    /// Find (or import and check) a quadratic Lyapunov certificate.
    Certify(CertifyArgs),
    /// Tune susceptances for the fault-on stage of a line trip.
    DesignFaulton(FaultOnArgs),
    /// Retune susceptances so a fault-cleared state is certified stable.
    DesignPostfault(PostFaultArgs),
    /// Integrate the swing dynamics and write the trajectory as CSV.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct EquilibriumArgs {
    #[arg(long)]
    network: PathBuf,
}

#[derive(Args, Debug)]
struct CertifyArgs {
    #[arg(long)]
    network: PathBuf,
    /// Uniform bound |δ*_kj| ≤ gamma used for the sector gain.
    #[arg(long, conflicts_with = "from_equilibrium")]
    gamma: Option<f64>,
    /// Take the sector gain from the equilibrium's edge angles.
    #[arg(long)]
    from_equilibrium: bool,
    /// Check this certificate instead of solving for one.
    #[arg(long = "import-P", value_name = "FILE")]
    import_p: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FaultOnArgs {
    #[arg(long)]
    network: PathBuf,
    /// Tripped line(s) `u-v`; several lines are designed independently.
    #[arg(long, value_delimiter = ',', required = true)]
    trip: Vec<String>,
    /// Adjustable lines, e.g. `1-2,2-3`.
    #[arg(long, value_delimiter = ',', required = true)]
    lines: Vec<String>,
    #[arg(long, default_value_t = 50.0)]
    bound_pct: f64,
    #[arg(long, default_value_t = 0.1)]
    clearing: f64,
    #[arg(long, default_value = "fixed-matrix")]
    mode: DesignMode,
    /// Start from this certificate instead of solving for one.
    #[arg(long = "import-P", value_name = "FILE")]
    import_p: Option<PathBuf>,
    #[arg(long, default_value_t = faulton::DEFAULT_RESTARTS)]
    restarts: usize,
    /// Simulate each design and report the soundness checks.
    #[arg(long)]
    verify: bool,
    /// Worker threads for several tripped lines.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PostFaultArgs {
    #[arg(long)]
    network: PathBuf,
    /// Fault-cleared state file.
    #[arg(long)]
    state: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    lines: Vec<String>,
    /// `min:max` per adjustable line; defaults to the bounds in the network file.
    #[arg(long, value_delimiter = ',')]
    boxes: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Post-fault certificate, usable with `simulate --lyapunov`.
    #[arg(long)]
    cert_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    network: PathBuf,
    /// Fault-on or post-fault design file.
    #[arg(long)]
    design: Option<PathBuf>,
    /// Initial state; defaults to rest at the base equilibrium.
    #[arg(long)]
    x0: Option<PathBuf>,
    /// Overrides the clearing time of a fault-on design.
    #[arg(long)]
    clearing: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
    #[arg(long, default_value_t = 20.0)]
    t_end: f64,
    /// Trajectory CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Certificate for the V column, checked against the post-fault network.
    #[arg(long, value_name = "FILE")]
    lyapunov: Option<PathBuf>,
    /// Downsampled (t, V) series for plotting.
    #[arg(long, requires = "lyapunov")]
    plot_out: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    plot_points: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Equilibrium(a) => cmd_equilibrium(a),
        Command::Certify(a) => cmd_certify(a),
        Command::DesignFaulton(a) => cmd_design_faulton(a, cli.seed),
        Command::DesignPostfault(a) => cmd_design_postfault(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Equilibrium and matrices, rejecting equilibria outside the polytope.
fn operating_point(net: &PowerNetwork, guess: Option<&nalgebra::DVector<f64>>) -> Result<(EquilibriumResult, SystemMatrices)> {
    let eq = powerflow::solve_equilibrium(net, guess)?;
    let mats = assemble_matrices(net, &eq.angles)?;
    Ok((eq, mats))
}

fn cmd_equilibrium(a: EquilibriumArgs) -> Result<()> {
    let net = load_network(&a.network)?;
    let eq = powerflow::solve_equilibrium(&net, None)?;
    println!("angles:");
    for (b, v) in net.buses().iter().zip(eq.angles.iter()) {
        println!("  {:>4}  {:+.6}", b.id, v);
    }
    println!("differences:");
    for (l, d) in net.lines().iter().zip(eq.differences(&net)) {
        println!("  {:>7}  {:+.6}", format_line_key(l.key()), d);
    }
    println!("residual: {:.3e}", eq.residual);
    println!("iterations: {}", eq.iterations);
    println!("in_polytope: {}", eq.in_polytope);
    Ok(())
}

fn print_check(mats: &SystemMatrices, cert: &Certificate) -> Result<bool> {
    let check = certifier::check_certificate(mats, cert.g, &cert.p)?;
    let rel = check.full_lambda_max / check.block_scale.max(f64::MIN_POSITIVE);
    println!("g: {:.6}", cert.g);
    if let Some(gamma) = cert.gamma {
        println!("gamma: {gamma:.6}");
    }
    println!("V_min: {:.6}", cert.v_min);
    println!("lambda_min(P): {:.6e}", check.p_lambda_min);
    println!("lambda_max(LMI): {:.6e} (relative {:.3e})", check.full_lambda_max, rel);
    println!("lambda_max(reduced LMI): {:.6e}", check.reduced_lambda_max);
    Ok(check.p_lambda_min > 0.0 && rel <= 1e-4)
}

fn cmd_certify(a: CertifyArgs) -> Result<()> {
    let net = load_network(&a.network)?;
    let (_, mats) = operating_point(&net, None)?;
    let cert = if let Some(path) = &a.import_p {
        let mut cert = Certificate::import(&read(path)?, &mats)?;
        if let Some(gamma) = a.gamma {
            cert = Certificate::new(cert.p, model::uniform_sector_gain(gamma)?, Some(gamma), &mats)?;
        } else if a.from_equilibrium {
            cert = Certificate::new(cert.p, model::sector_gain(&mats)?, Some(model::max_edge_angle(&mats)), &mats)?;
        }
        cert
    } else {
        let (g, gamma) = match a.gamma {
            Some(gamma) => (model::uniform_sector_gain(gamma)?, gamma),
            None if a.from_equilibrium => (model::sector_gain(&mats)?, model::max_edge_angle(&mats)),
            None => {
                return Err(Error::InvalidInput(
                    "give --gamma, --from-equilibrium or --import-P".into(),
                ))
            }
        };
        certifier::certify(&mats, g, Some(gamma), None)?
    };
    let ok = print_check(&mats, &cert)?;
    if let Some(out) = &a.out {
        write(out, &cert.to_json_string())?;
    }
    if !ok {
        return Err(Error::Infeasible("the certificate does not satisfy the LMI".into()));
    }
    Ok(())
}

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
fn fan_out<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.unwrap()).collect()
}

fn cmd_design_faulton(a: FaultOnArgs, seed: u64) -> Result<()> {
    let net = load_network(&a.network)?;
    let (_, mats) = operating_point(&net, None)?;
    let cert = match &a.import_p {
        Some(path) => Some(Certificate::import(&read(path)?, &mats)?),
        None => None,
    };
    let adjustable = faulton::percent_boxes(&net, &a.lines, a.bound_pct)?;
    let opts = DesignOptions {
        restarts: a.restarts,
        seed,
        gain: match &cert {
            Some(c) => c.g,
            None => model::sector_gain(&mats)?,
        },
        gamma: match &cert {
            Some(c) => c.gamma,
            None => Some(model::max_edge_angle(&mats)),
        },
    };
    let trips = a
        .trip
        .iter()
        .map(|k| net.find_line(k))
        .collect::<Result<Vec<_>>>()?;
    let results = fan_out(&trips, a.jobs, |&tripped| {
        let problem = FaultOnProblem {
            network: net.clone(),
            mats: mats.clone(),
            tripped,
            adjustable: adjustable.clone(),
            clearing_time: a.clearing,
            mode: a.mode,
        };
        let design = faulton::design(&problem, cert.as_ref(), &opts)?;
        let report = if a.verify {
            Some(faulton::verify(&net, &mats, &design, &VerifyOptions::default())?)
        } else {
            None
        };
        Ok((design, report))
    });

    let mut files = Vec::new();
    let mut first_err = None;
    for (&tripped, res) in trips.iter().zip(results) {
        let key = format_line_key(net.lines()[tripped].key());
        match res {
            Ok((design, report)) => {
                println!("trip {key}:");
                for (&k, &(_, v)) in design.tuned_keys.iter().zip(&design.tuned) {
                    println!("  B {:>7} = {:.6}", format_line_key(k), v);
                }
                println!("  mu = {:.6}", design.mu);
                println!("  V_min = {:.6}", design.certificate.v_min);
                println!("  margin = {:.6e}", design.margin);
                println!("  restarts = {}", design.restarts);
                if let Some(r) = report {
                    println!("  max dV/dt = {:.6e} (bound {:.6e}) {}", r.max_rate, r.rate_bound, pass(r.rate_ok));
                    println!("  V(tau) = {:.6e} (V_min {:.6}) {}", r.v_clearing, r.v_min, pass(r.clearing_ok));
                    match r.converged_at {
                        Some(t) => println!("  converged at t = {t:.3} s"),
                        None => println!("  not converged by t = 20 s"),
                    }
                }
                files.push(design.to_file());
            }
            Err(e) => {
                eprintln!("trip {key}: error: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(out) = &a.out {
        let text = match files.as_slice() {
            [one] if trips.len() == 1 => one.to_json_string(),
            _ => serde_json::to_string_pretty(&files).expect("designs serialize"),
        };
        if !files.is_empty() {
            write(out, &text)?;
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

fn parse_box(s: &str) -> Result<SusceptanceBounds> {
    let bad = || Error::InvalidInput(format!("box must look like min:max, got {s:?}"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    Ok(SusceptanceBounds {
        min: lo.trim().parse().map_err(|_| bad())?,
        max: hi.trim().parse().map_err(|_| bad())?,
    })
}

fn cmd_design_postfault(a: PostFaultArgs) -> Result<()> {
    let net = load_network(&a.network)?;
    let x0 = StateFile::from_json_str(&read(&a.state)?)?.to_state(&net)?;
    let lines = a
        .lines
        .iter()
        .map(|k| net.find_line(k))
        .collect::<Result<Vec<_>>>()?;
    let boxes = if a.boxes.is_empty() {
        lines
            .iter()
            .map(|&e| {
                let l = &net.lines()[e];
                l.bounds.ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "line {} has no bounds; pass --boxes",
                        format_line_key(l.key())
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else if a.boxes.len() == lines.len() {
        a.boxes.iter().map(|s| parse_box(s)).collect::<Result<Vec<_>>>()?
    } else {
        return Err(Error::InvalidInput(format!(
            "{} boxes for {} lines",
            a.boxes.len(),
            lines.len()
        )));
    };
    let design = postfault::design_postfault(&net, &x0, &lines, &boxes)?;
    for &(e, v) in &design.tuned {
        println!("B {:>7} = {:.6}", format_line_key(design.network.lines()[e].key()), v);
    }
    println!("differences:");
    for (l, d) in design.network.lines().iter().zip(design.new_equilibrium.differences(&design.network)) {
        println!("  {:>7}  {:+.6}", format_line_key(l.key()), d);
    }
    println!("V(x0) = {:.6}", design.v_x0);
    println!("V_min = {:.6}", design.certificate.v_min);
    println!("contained = {}", design.contained);
    if let Some(out) = &a.out {
        write(out, &design.to_file().to_json_string())?;
    }
    if let Some(out) = &a.cert_out {
        write(out, &design.certificate.to_json_string())?;
    }
    Ok(())
}

/// Either design format; a fault-on design names the tripped line.
enum AnyDesign {
    FaultOn(DesignFile),
    PostFault(PostFaultFile),
}

fn load_design(path: &Path) -> Result<AnyDesign> {
    let text = read(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
    if value.get("tripped").is_some() {
        DesignFile::from_json_str(&text).map(AnyDesign::FaultOn)
    } else {
        PostFaultFile::from_json_str(&text).map(AnyDesign::PostFault)
    }
}

fn tuned_positions(net: &PowerNetwork, tuned: &std::collections::BTreeMap<String, f64>) -> Result<Vec<(usize, f64)>> {
    tuned
        .iter()
        .map(|(k, &v)| {
            let (a, b) = parse_line_key(k)?;
            let e = net
                .line_position(a, b)
                .ok_or_else(|| Error::InvalidInput(format!("line {k} not in network")))?;
            Ok((e, v))
        })
        .collect()
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let base = load_network(&a.network)?;
    let (base_eq, _) = operating_point(&base, None)?;
    let x0 = match &a.x0 {
        Some(path) => StateFile::from_json_str(&read(path)?)?.to_state(&base)?,
        None => State::at_rest(base_eq.angles.clone(), base.num_generators()),
    };
    let (spec, post_net, guess) = match a.design.as_deref().map(load_design).transpose()? {
        Some(AnyDesign::FaultOn(d)) => {
            let (u, v) = parse_line_key(&d.tripped)?;
            let tripped = base
                .line_position(u, v)
                .ok_or_else(|| Error::InvalidInput(format!("line {} not in network", d.tripped)))?;
            let spec = ScenarioSpec {
                base: base.clone(),
                tripped_line: Some(tripped),
                tuned_susceptances: tuned_positions(&base, &d.tuned)?,
                clearing_time: a.clearing.unwrap_or(d.clearing_time),
                t_end: a.t_end,
                dt: a.dt,
            };
            (spec, base.clone(), base_eq.angles.clone())
        }
        Some(AnyDesign::PostFault(d)) => {
            // the design may have used boxes wider than the file bounds
            let overrides: Vec<(usize, f64, SusceptanceBounds)> = tuned_positions(&base, &d.tuned)?
                .into_iter()
                .map(|(e, v)| {
                    let old = base.lines()[e].bounds.unwrap_or(SusceptanceBounds { min: v, max: v });
                    (e, v, SusceptanceBounds { min: old.min.min(v), max: old.max.max(v) })
                })
                .collect();
            let net = base.retuned(&overrides)?;
            let guess = nalgebra::DVector::from_iterator(
                net.num_buses(),
                net.buses().iter().map(|b| d.equilibrium.get(&b.id.to_string()).copied().unwrap_or(0.0)),
            );
            (ScenarioSpec::steady(net.clone(), a.t_end, a.dt), net, guess)
        }
        None => (ScenarioSpec::steady(base.clone(), a.t_end, a.dt), base.clone(), base_eq.angles.clone()),
    };
    let mut traj = simulator::simulate(&spec, &x0)?;
    let (post_eq, mats) = operating_point(&post_net, Some(&guess))?;
    if let Some(path) = &a.lyapunov {
        let cert = Certificate::import(&read(path)?, &mats)?;
        traj.attach_lyapunov(&cert.p, &mats);
    }

    match &a.out {
        Some(path) => traj.write_csv(io::BufWriter::new(create(path)?))?,
        None => traj.write_csv(io::stdout().lock())?,
    }
    if let Some(path) = &a.plot_out {
        let stride = (traj.times.len() / a.plot_points.max(1)).max(1);
        traj.write_series_csv(io::BufWriter::new(create(path)?), stride)?;
    }

    let mut log: Box<dyn Write> = if a.out.is_some() { Box::new(io::stdout()) } else { Box::new(io::stderr()) };
    let diffs = powerflow::edge_differences(&post_net, &post_eq.angles);
    let end = *traj.times.last().unwrap_or(&0.0);
    let _ = writeln!(log, "steps: {}", traj.times.len().saturating_sub(1));
    let _ = writeln!(log, "diverged: {}", traj.diverged);
    if let Some(v) = &traj.lyapunov {
        if let Some(i) = traj.clearing_index() {
            let _ = writeln!(log, "V(tau) = {:.6e}", v[i]);
        }
        let _ = writeln!(log, "V(end) = {:.6e}", v.last().copied().unwrap_or(f64::NAN));
    }
    match traj.converged_since(&mats.edge_endpoints, &diffs, &Default::default()) {
        Some(t) => {
            let _ = writeln!(log, "converged at t = {t:.3} s");
        }
        None => {
            let _ = writeln!(log, "not converged by t = {end} s");
        }
    }
    Ok(())
}
