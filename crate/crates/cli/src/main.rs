//! `immunegrid` command-line entry points.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use immunegrid::analysis::{events_from_records, multiscale_analyze, shuffle_times, AnalysisParams};
use immunegrid::eventlog::{read_log, LogWriter};
use immunegrid::ode::{fixed_point, integrate_strided, Method};
use immunegrid::scenario::{builtin, build_model, load_scenario, Axis, Builtin, KineticsSetup, BUILTIN_NAMES};
use immunegrid::World;

#[derive(Parser)]
#[command(name = "immunegrid", version, about = "Lattice immune-system simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario headless and write its log, census and slices.
    Run(RunArgs),
    /// Integrate the infection kinetics model.
    Ode(OdeArgs),
    /// Multiscale correlation analysis of an event log.
    Analyze(AnalyzeArgs),
    /// Serve the steering protocol over HTTP and WebSocket.
    Serve(ServeArgs),
    /// List the built-in scenarios.
    Scenarios,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Built-in name or scenario file.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    seed: u64,
    /// Defaults to the scenario's run length.
    #[arg(long)]
    ticks: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Extra final-state slice, `compartment:agent:axis:index`. Repeatable.
    #[arg(long = "slice", value_name = "SPEC")]
    slices: Vec<String>,
    /// Per-slice agent-per-cell profile along an axis, `compartment:agent:axis`.
    /// Written every `--profile-every` ticks. Repeatable.
    #[arg(long = "profile", value_name = "SPEC")]
    profiles: Vec<String>,
    #[arg(long, default_value_t = 0)]
    profile_every: u64,
}

#[derive(clap::Args)]
struct OdeArgs {
    /// Built-in kinetics set or a JSON file with `params` and `init`.
    #[arg(value_name = "PARAMS", conflicts_with = "params")]
    name: Option<String>,
    #[arg(long)]
    params: Option<String>,
    #[arg(long, default_value_t = 400.0)]
    t_end: f64,
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    #[arg(long, default_value = "rk4")]
    method: Method,
    /// Print every n-th step.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Print only the analytic fixed point.
    #[arg(long)]
    fixed_point: bool,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    r0: f64,
    #[arg(long, default_value_t = 10.0)]
    t0: f64,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 200)]
    perms: usize,
    #[arg(long, default_value_t = 0.05)]
    significance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Permute event times with this seed before analysis.
    #[arg(long, value_name = "SEED")]
    shuffle: Option<u64>,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
}

/// Exit 2 for bad input, 1 for everything else.
enum Fail {
    Input(String),
    Other(String),
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Other(e.to_string())
    }
}

fn input(e: impl std::fmt::Display) -> Fail {
    Fail::Input(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => run(a),
        Cmd::Ode(a) => ode(a),
        Cmd::Analyze(a) => analyze(a),
        Cmd::Serve(a) => serve(a),
        Cmd::Scenarios => scenarios(),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn parse_axis(s: &str) -> Result<Axis, Fail> {
    match s {
        "x" => Ok(Axis::X),
        "y" => Ok(Axis::Y),
        "z" => Ok(Axis::Z),
        _ => Err(input(format!("axis must be x, y or z, got {s:?}"))),
    }
}

fn axis_name(a: Axis) -> &'static str {
    match a {
        Axis::X => "x",
        Axis::Y => "y",
        Axis::Z => "z",
    }
}

struct ProfileSpec {
    comp: usize,
    agent: immunegrid::scenario::AgentRef,
    axis: Axis,
    file: String,
}

fn run(a: RunArgs) -> Result<(), Fail> {
    let sc = load_scenario(&a.scenario).map_err(input)?;
    let model = std::sync::Arc::new(build_model(&sc).map_err(input)?);
    let ticks = a.ticks.unwrap_or(sc.run.ticks);

    let slices = immunegrid_server::parse_slices(&a.slices.join(";")).map_err(input)?;
    for s in &slices {
        let c = model
            .compartment(&s.compartment)
            .ok_or_else(|| input(format!("unknown compartment {:?}", s.compartment)))?;
        model.agent(&s.agent).ok_or_else(|| input(format!("unknown agent {:?}", s.agent)))?;
        immunegrid::lattice::Grid::new(model.compartments[c.index()].dims)
            .check_slice(s.axis, s.index)
            .map_err(input)?;
    }
    let mut profiles = Vec::new();
    for p in &a.profiles {
        let f: Vec<&str> = p.split(':').collect();
        let [comp, agent, axis] = f[..] else {
            return Err(input(format!("profile {p:?}: expected compartment:agent:axis")));
        };
        profiles.push(ProfileSpec {
            comp: model.compartment(comp).ok_or_else(|| input(format!("unknown compartment {comp:?}")))?.index(),
            agent: model.agent(agent).ok_or_else(|| input(format!("unknown agent {agent:?}")))?,
            axis: parse_axis(axis)?,
            file: format!("profile_{comp}_{agent}_{axis}.tsv"),
        });
    }

    std::fs::create_dir_all(&a.out)?;
    let mut world = World::new(model.clone(), a.seed);
    let mut log = LogWriter::new(BufWriter::new(File::create(a.out.join("events.ndjson"))?), &sc, model.clone(), a.seed)?;
    let mut census = BufWriter::new(File::create(a.out.join("census.tsv"))?);
    write_census_header(&mut census, &world)?;
    write_census_row(&mut census, &world, &world.census())?;
    let mut prof_out = Vec::new();
    for p in &profiles {
        let mut f = BufWriter::new(File::create(a.out.join(&p.file))?);
        let n = model.compartments[p.comp].dims[p.axis.index()];
        let head: Vec<String> = (0..n).map(|i| format!("{}{i}", axis_name(p.axis))).collect();
        writeln!(f, "tick\t{}", head.join("\t"))?;
        prof_out.push(f);
    }
    for _ in 0..ticks {
        let rep = world.step();
        log.write_events(&rep.events)?;
        write_census_row(&mut census, &world, &rep.census)?;
        let last = world.tick() == ticks;
        if last || (a.profile_every > 0 && world.tick() % a.profile_every == 0) {
            for (p, f) in profiles.iter().zip(&mut prof_out) {
                let v = world.profile_along(p.comp, p.agent, p.axis);
                let row: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
                writeln!(f, "{}\t{}", world.tick(), row.join("\t"))?;
            }
        }
    }
    log.finish(&world)?.flush()?;
    census.flush()?;
    for mut f in prof_out {
        f.flush()?;
    }

    for (ci, c) in model.compartments.iter().enumerate() {
        let z = c.dims[2] / 2;
        let labels = label_slice(&world, ci, z);
        let path = a.out.join(format!("cells_{}_z{z}.tsv", c.name));
        let mut legend = String::from("# labels 0=empty");
        for (i, l) in model.labels.iter().enumerate() {
            let _ = write!(legend, " {}={l}", i + 1);
        }
        write_grid(&path, &c.name, "cells", Axis::Z, &labels, &legend)?;
    }
    for s in &slices {
        let comp = model.compartment(&s.compartment).expect("checked").index();
        let agent = model.agent(&s.agent).expect("checked");
        let grid = world.slice(comp, agent, s.axis, s.index).map_err(|e| Fail::Other(e.to_string()))?;
        let path = a.out.join(format!("slice_{}_{}_{}{}.tsv", s.compartment, s.agent, axis_name(s.axis), s.index));
        write_grid(&path, &s.compartment, &s.agent, s.axis, &grid, "")?;
    }
    eprintln!("{} ticks, hash {}", world.tick(), world.hash());
    Ok(())
}

fn label_slice(world: &World, comp: usize, z: u32) -> immunegrid::lattice::Slice {
    let grid = world.compartments()[comp].grid;
    grid.slice(Axis::Z, z, |s| {
        world
            .cell_at(comp, grid.coords(s))
            .map_or(0.0, |c| c.label.index() as f64 + 1.0)
    })
    .expect("mid slice in range")
}

fn write_grid(path: &Path, comp: &str, agent: &str, axis: Axis, s: &immunegrid::lattice::Slice, extra: &str) -> std::io::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(
        f,
        "# compartment {comp} agent {agent} axis {} index {} rows {} cols {}",
        axis_name(axis),
        s.index,
        s.rows,
        s.cols
    )?;
    if !extra.is_empty() {
        writeln!(f, "{extra}")?;
    }
    for r in 0..s.rows {
        let row: Vec<String> = (0..s.cols).map(|c| format!("{}", s.get(r, c))).collect();
        writeln!(f, "{}", row.join("\t"))?;
    }
    f.flush()
}

fn census_columns(world: &World) -> Vec<String> {
    let m = world.model();
    let multi = m.compartments.len() > 1;
    let mut out = Vec::new();
    for c in &m.compartments {
        let names = m.labels.iter().chain(m.molecules.iter().map(|x| &x.name));
        for n in names {
            out.push(if multi { format!("{}.{n}", c.name) } else { n.clone() });
        }
    }
    out
}

fn write_census_header(w: &mut impl Write, world: &World) -> std::io::Result<()> {
    writeln!(w, "tick\t{}", census_columns(world).join("\t"))
}

fn write_census_row(w: &mut impl Write, world: &World, c: &immunegrid::Census) -> std::io::Result<()> {
    let mut line = world.tick().to_string();
    for cc in &c.compartments {
        for v in cc.cells.iter().chain(&cc.molecules) {
            let _ = write!(line, "\t{v}");
        }
    }
    writeln!(w, "{line}")
}

fn kinetics_setup(name: &str) -> Result<KineticsSetup, Fail> {
    if BUILTIN_NAMES.contains(&name) {
        return match builtin(name).map_err(input)? {
            Builtin::Kinetics(k) => Ok(k),
            Builtin::Scenario(_) => Err(input(format!("{name:?} is an agent scenario, not a kinetics parameter set"))),
        };
    }
    let text = std::fs::read_to_string(name).map_err(|e| {
        input(format!(
            "{name}: {e}; built-in kinetics sets: kinetics_fig1, kinetics_fig2"
        ))
    })?;
    serde_json::from_str(&text).map_err(|e| input(format!("{name}: {e}")))
}

/// Twelve significant digits with trailing zeros dropped.
fn short(x: f64) -> String {
    let s = format!("{:.*e}", 11, x);
    let v: f64 = s.parse().expect("round trip");
    format!("{v}")
}

fn ode(a: OdeArgs) -> Result<(), Fail> {
    let name = a
        .name
        .or(a.params)
        .ok_or_else(|| input("missing kinetics parameters (a built-in name or --params FILE)"))?;
    let k = kinetics_setup(&name)?;
    k.params.validate().map_err(input)?;
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    if a.fixed_point {
        let fp = fixed_point(&k.params).map_err(input)?;
        let s = fp.state;
        writeln!(out, "{} {} {}", short(s.i), short(s.k), short(s.c))?;
        if fp.infection_free {
            eprintln!("note: K* < 0, the infection-free state governs");
        }
        return Ok(out.flush()?);
    }
    let tr = integrate_strided(&k.params, k.init, a.t_end, a.dt, a.method, a.stride).map_err(input)?;
    writeln!(out, "t\tI\tK\tC")?;
    for (t, s) in &tr.points {
        writeln!(out, "{}\t{}\t{}\t{}", short(*t), s.i, s.k, s.c)?;
    }
    Ok(out.flush()?)
}

fn analyze(a: AnalyzeArgs) -> Result<(), Fail> {
    let f = File::open(&a.log).map_err(|e| input(format!("{}: {e}", a.log.display())))?;
    let log = read_log(BufReader::new(f)).map_err(|e| input(format!("{}: {e}", a.log.display())))?;
    let params = AnalysisParams {
        r0: a.r0,
        t0: a.t0,
        alpha: a.alpha,
        perms: a.perms,
        significance: a.significance,
        max_levels: a.levels,
        seed: a.seed,
    };
    params.validate().map_err(input)?;
    let mut events = events_from_records(&log.records);
    if let Some(s) = a.shuffle {
        events = shuffle_times(&events, s);
    }
    let sig = multiscale_analyze(&events, &params);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, &sig).map_err(|e| Fail::Other(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), Fail> {
    let addr = format!("{}:{}", a.host, a.port);
    let std_listener = std::net::TcpListener::bind(&addr).map_err(|e| input(format!("cannot bind {addr}: {e}")))?;
    std_listener.set_nonblocking(true)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let paths = rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(std_listener)?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        immunegrid_server::serve(listener, a.data_dir, immunegrid_server::shutdown_signal()).await
    })?;
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn scenarios() -> Result<(), Fail> {
    for name in BUILTIN_NAMES {
        let desc = match builtin(name).map_err(|e| Fail::Other(e.to_string()))? {
            Builtin::Scenario(sc) => {
                let dims: Vec<String> = sc
                    .compartments
                    .iter()
                    .map(|c| format!("{} {}x{}x{}", c.name, c.dims[0], c.dims[1], c.dims[2]))
                    .collect();
                format!("scenario, {} ticks, {}", sc.run.ticks, dims.join(", "))
            }
            Builtin::Kinetics(_) => "kinetics parameters".to_string(),
        };
        println!("{name}\t{desc}");
    }
    Ok(())
}
