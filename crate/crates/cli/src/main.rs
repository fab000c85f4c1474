//! `otpf`: scalar ensemble transform experiments, the Lorenz-63 filter sweep
//! and a standalone transport solver. Every run writes CSV outputs and the
//! resolved configuration (`config.toml`) into `--out-dir`.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use etpf::defaults;
use etpf::experiments::{
    lorenz_sweep, moment_table, support_pattern_export, transform_map_export, write_map_csv,
    write_support_csv, ScalarPrior, SweepConfig,
};
use etpf::filters::FilterMethod;
use etpf::transport::{solve_transport, CostMatrix, MarginalPair};

const THREADS_ENV: &str = "OTPF_THREADS";
const CONFIG_ECHO: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(name = "otpf", version, about, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Gaussian prior: moment table, transform map and coupling support.
    ScalarGaussian(ScalarArgs),
    /// Uniform prior on [0, 1]: moment table.
    ScalarUniform(ScalarArgs),
    /// ETPF and ESRF on Lorenz-63 over ensemble sizes and inflation factors.
    LorenzSweep(SweepArgs),
    /// Solve a transport problem read from CSV files.
    TransportSolve(TransportArgs),
}

#[derive(Args, Debug)]
struct Output {
    /// Directory for CSV outputs and the resolved config.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScalarArgs {
    /// Ensemble sizes of the moment table, comma separated.
    #[arg(long = "M", value_delimiter = ',')]
    m: Option<Vec<usize>>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Ensemble sizes, comma separated.
    #[arg(long = "M", value_delimiter = ',')]
    m: Option<Vec<usize>>,
    /// Assimilation steps per run.
    #[arg(long)]
    steps: Option<usize>,
    /// First seed; the remaining seeds follow consecutively.
    #[arg(long)]
    seed: Option<u64>,
    /// Inflation factors, comma separated.
    #[arg(long, value_delimiter = ',')]
    inflation_grid: Option<Vec<f64>>,
    /// Filters to run: etpf, esrf (comma separated).
    #[arg(long, value_delimiter = ',')]
    method: Option<Vec<FilterMethod>>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct TransportArgs {
    /// Square cost matrix, one row per line.
    #[arg(long)]
    cost: Option<PathBuf>,
    /// Row marginal.
    #[arg(long)]
    row: Option<PathBuf>,
    /// Column marginal.
    #[arg(long)]
    col: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GaussianConfig {
    sizes: Vec<usize>,
    map_size: usize,
    support_size: usize,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        Self {
            sizes: defaults::TABLE_SIZES.to_vec(),
            map_size: defaults::MAP_SIZE,
            support_size: defaults::SUPPORT_SIZE,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct UniformConfig {
    sizes: Vec<usize>,
}

impl Default for UniformConfig {
    fn default() -> Self {
        Self {
            sizes: defaults::TABLE_SIZES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TransportConfig {
    cost: Option<PathBuf>,
    row: Option<PathBuf>,
    col: Option<PathBuf>,
}

/// Usage errors exit with 2, everything else with 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<etpf::Error> for Failure {
    fn from(e: etpf::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(e: anyhow::Error) -> Failure {
    Failure::Usage(e)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        usage(anyhow!(
            "{THREADS_ENV} must be a positive integer, got '{raw}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::ScalarGaussian(args) => scalar_gaussian(args),
        Command::ScalarUniform(args) => scalar_uniform(args),
        Command::LorenzSweep(args) => sweep(args),
        Command::TransportSolve(args) => transport(args),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(usage)?;
    toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(usage)
}

fn prepare_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_file<F>(dir: &Path, name: &str, body: F) -> CliResult<PathBuf>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>,
{
    let path = dir.join(name);
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    body(&mut out)
        .and_then(|()| out.flush())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn echo_config<T: Serialize>(dir: &Path, config: &T) -> CliResult<()> {
    let text = toml::to_string(config).context("serializing the resolved config")?;
    write_file(dir, CONFIG_ECHO, |out| out.write_all(text.as_bytes()))?;
    Ok(())
}

fn scalar_gaussian(args: ScalarArgs) -> CliResult<()> {
    let mut config: GaussianConfig = load_config(args.output.config.as_deref())?;
    if let Some(m) = args.m {
        config.sizes = m;
    }
    let dir = &args.output.out_dir;
    prepare_out_dir(dir)?;
    let table = moment_table(&config.sizes, ScalarPrior::default_gaussian())?;
    let map = transform_map_export(config.map_size)?;
    let support = support_pattern_export(config.support_size)?;
    write_file(dir, "table1.csv", |out| table.write_csv(out))?;
    write_file(dir, "fig1b_map.csv", |out| write_map_csv(&map, out))?;
    write_file(dir, "fig2_support.csv", |out| {
        write_support_csv(&support, out)
    })?;
    echo_config(dir, &config)?;
    table
        .write_csv(io::stdout().lock())
        .context("writing to stdout")?;
    println!(
        "# support entries at M={}: {}",
        config.support_size, support.count
    );
    Ok(())
}

fn scalar_uniform(args: ScalarArgs) -> CliResult<()> {
    let mut config: UniformConfig = load_config(args.output.config.as_deref())?;
    if let Some(m) = args.m {
        config.sizes = m;
    }
    let dir = &args.output.out_dir;
    prepare_out_dir(dir)?;
    let table = moment_table(&config.sizes, ScalarPrior::Uniform01)?;
    write_file(dir, "table2.csv", |out| table.write_csv(out))?;
    echo_config(dir, &config)?;
    table
        .write_csv(io::stdout().lock())
        .context("writing to stdout")?;
    Ok(())
}

fn sweep(args: SweepArgs) -> CliResult<()> {
    let mut config: SweepConfig = load_config(args.output.config.as_deref())?;
    if let Some(m) = args.m {
        config.ensemble_sizes = m;
    }
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(seed) = args.seed {
        let n = config.seeds.len().max(1) as u64;
        config.seeds = (0..n).map(|k| seed.wrapping_add(k)).collect();
    }
    if let Some(grid) = args.inflation_grid {
        config.inflation_grid = grid;
    }
    if let Some(methods) = args.method {
        config.methods = methods;
    }
    config.validate().map_err(|e| usage(e.into()))?;
    let dir = &args.output.out_dir;
    prepare_out_dir(dir)?;
    let result = lorenz_sweep(&config)?;
    write_file(dir, "fig3_sweep.csv", |out| result.write_csv(out))?;
    write_file(dir, "fig3_cells.csv", |out| result.write_grid_csv(out))?;
    echo_config(dir, &config)?;
    result
        .write_csv(io::stdout().lock())
        .context("writing to stdout")?;
    Ok(())
}

fn read_numbers(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("reading {}", path.display()))?;
        let row = record
            .iter()
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>().with_context(|| {
                    format!(
                        "{}: record {}: '{f}' is not a number",
                        path.display(),
                        line + 1
                    )
                })
            })
            .collect::<anyhow::Result<Vec<f64>>>()?;
        if !row.is_empty() {
            rows.push(row);
        }
    }
    Ok(rows)
}

fn read_matrix(path: &Path) -> CliResult<DMatrix<f64>> {
    let rows = read_numbers(path)?;
    let n = rows.len();
    if n == 0 {
        return Err(anyhow!("{} holds no numbers", path.display()).into());
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != rows[0].len()) {
        return Err(anyhow!("{}: row {} has a different length", path.display(), bad + 1).into());
    }
    let cols = rows[0].len();
    Ok(DMatrix::from_row_iterator(
        n,
        cols,
        rows.into_iter().flatten(),
    ))
}

/// Accepts one value per line or a single comma-separated line.
fn read_vector(path: &Path) -> CliResult<DVector<f64>> {
    let values: Vec<f64> = read_numbers(path)?.into_iter().flatten().collect();
    if values.is_empty() {
        return Err(anyhow!("{} holds no numbers", path.display()).into());
    }
    Ok(DVector::from_vec(values))
}

fn transport(args: TransportArgs) -> CliResult<()> {
    let mut config: TransportConfig = load_config(args.output.config.as_deref())?;
    config.cost = args.cost.or(config.cost);
    config.row = args.row.or(config.row);
    config.col = args.col.or(config.col);
    let (Some(cost), Some(row), Some(col)) = (&config.cost, &config.row, &config.col) else {
        return Err(usage(anyhow!(
            "transport-solve needs --cost, --row and --col"
        )));
    };
    let cost = CostMatrix::new(read_matrix(cost)?)?;
    let marginals = MarginalPair::new(read_vector(row)?, read_vector(col)?)?;
    if marginals.len() != cost.size() {
        return Err(anyhow!(
            "marginals have length {} but the cost matrix is {}x{}",
            marginals.len(),
            cost.size(),
            cost.size()
        )
        .into());
    }
    let coupling = solve_transport(&cost, &marginals)?;
    let dir = &args.output.out_dir;
    prepare_out_dir(dir)?;
    let t = coupling.matrix();
    write_file(dir, "coupling.csv", |out| {
        writeln!(out, "i,j,t")?;
        for &(i, j) in coupling.support() {
            writeln!(out, "{i},{j},{}", t[(i, j)])?;
        }
        writeln!(out, "# objective,{}", coupling.objective())
    })?;
    echo_config(dir, &config)?;
    println!(
        "objective,{} support,{} pivots,{}",
        coupling.objective(),
        coupling.support().len(),
        coupling.pivots()
    );
    Ok(())
}
