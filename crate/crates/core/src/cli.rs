//! Command-line interface. Exit codes: 0 success, 2 invalid input, 3
//! numerical failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evalsim::{adjusted_rand_index, run_study, Method, Study, StudyCell};
use crate::pipeline::{fit_file, render_slice, Axis, ClusterVolume, RunConfig, VolumeFormat};
use crate::selection::{select_k, Penalty, SelectionTrace};

#[derive(Debug, Parser)]
#[command(name = "fdclust", version, about = "Two-stage clustering of sampled time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster a volume and write labels, mean functions and reports.
    Fit(FitArgs),
    /// Run the simulation studies and write an ARI report.
    Simulate(SimulateArgs),
    /// Select k from a saved trace.
    Select(SelectArgs),
    /// Adjusted Rand index between two label files.
    Ari(AriArgs),
    /// Render one slice of a label volume as a PPM image.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Input format; inferred from the extension when absent.
    #[arg(long, value_enum)]
    pub format: Option<VolumeFormat>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Candidate cluster counts: `a..b` (inclusive) or a comma list.
    #[arg(long, value_parser = parse_k_set)]
    pub k_set: Option<KSet>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub penalty: Option<Penalty>,
    /// Fixed slope instead of estimating it.
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub no_detrend: bool,
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub study: Study,
    /// Cells as `MxN` pairs, comma separated.
    #[arg(long, value_parser = parse_grid, value_delimiter = ',', default_value = "100x500,100x1000,100x2500,100x5000")]
    pub grid: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 50)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Recompute the penalty column; needs `--d`.
    #[arg(long, value_enum, requires = "d")]
    pub penalty: Option<Penalty>,
    #[arg(long, requires = "penalty")]
    pub d: Option<usize>,
    /// Fixed slope; estimated from the trace when absent.
    #[arg(long)]
    pub kappa: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AriArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// CIVL file (or a labels CSV, by extension).
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum, default_value = "z")]
    pub axis: Axis,
    #[arg(long)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parsed `--k-set` value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KSet(pub Vec<usize>);

fn parse_k_set(s: &str) -> std::result::Result<KSet, String> {
    let bad = || format!("expected `a..b` or a comma list, got {s:?}");
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok(KSet((a..=b).collect()));
    }
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| bad()))
        .collect::<std::result::Result<_, _>>()
        .map(KSet)
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (m, n) = s
        .trim()
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected MxN, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("expected MxN, got {s:?}"));
    Ok((parse(m)?, parse(n)?))
}

impl FitArgs {
    /// Config file values overridden by flags.
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(d, alpha, restarts, max_iter, seed, lambda, penalty);
        if let Some(KSet(ks)) = &self.k_set {
            cfg.k_set = ks.clone();
        }
        if self.kappa.is_some() {
            cfg.kappa = self.kappa;
        }
        if self.input.is_some() {
            cfg.input = self.input.clone();
        }
        if self.format.is_some() {
            cfg.format = self.format;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if self.no_detrend {
            cfg.detrend = false;
        }
        if self.no_normalize {
            cfg.normalize = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn infer_format(path: &Path) -> Result<VolumeFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("civt") => Ok(VolumeFormat::Civt),
        Some("csv") => Ok(VolumeFormat::Csv),
        _ => Err(Error::InvalidConfig(format!(
            "cannot infer the format of {}; pass --format",
            path.display()
        ))),
    }
}

fn fit(args: &FitArgs) -> Result<()> {
    let cfg = args.config()?;
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| Error::InvalidConfig("no input volume (--input)".into()))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::InvalidConfig("no output directory (--out)".into()))?;
    let format = match cfg.format {
        Some(f) => f,
        None => infer_format(&input)?,
    };
    let output = fit_file(&input, format, &cfg, &out)?;
    println!("selected k = {}", output.report.k);
    if let Some(kappa) = output.report.kappa {
        println!("kappa = {kappa:e}");
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let cells: Vec<StudyCell> = args
        .grid
        .iter()
        .map(|&(m, n)| StudyCell::new(args.study, m, n))
        .collect();
    let report = run_study(&cells, args.replicates, &Method::standard(), args.seed)?;
    match &args.out {
        Some(path) => report.save(path),
        None => report.write_csv(std::io::stdout().lock()),
    }
}

fn select(args: &SelectArgs) -> Result<()> {
    let mut trace = SelectionTrace::load(&args.trace)?;
    if let (Some(penalty), Some(d)) = (args.penalty, args.d) {
        trace = trace.with_penalty(penalty, d);
    }
    let slope = crate::pipeline::choose_slope(&trace, args.kappa)?;
    let k = match slope.kappa() {
        Some(kappa) => {
            eprintln!("kappa = {kappa:e}");
            select_k(&trace, kappa)?
        }
        None => trace.records()[0].k,
    };
    println!("{k}");
    Ok(())
}

/// Labels from the `label` column, or the first column when there is none.
fn read_labels(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(path)?;
    let column = reader
        .headers()?
        .iter()
        .position(|h| h.trim() == "label")
        .unwrap_or(0);
    reader
        .records()
        .map(|r| {
            let r = r?;
            r.get(column).map(|v| v.trim().to_string()).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                msg: "row is missing the label column".into(),
            })
        })
        .collect()
}

fn ari(args: &AriArgs) -> Result<()> {
    let a = read_labels(&args.a)?;
    let b = read_labels(&args.b)?;
    println!("{:.6}", adjusted_rand_index(&a, &b)?);
    Ok(())
}

fn render(args: &RenderArgs) -> Result<()> {
    let is_csv = args
        .labels
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let cv = if is_csv {
        ClusterVolume::load_csv(&args.labels)?
    } else {
        ClusterVolume::load_civl(&args.labels)?
    };
    render_slice(&cv, args.axis, args.index, &args.out)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Simulate(a) => simulate(a),
        Command::Select(a) => select(a),
        Command::Ari(a) => ari(a),
        Command::Render(a) => render(a),
    }
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_set_syntax() {
        assert_eq!(parse_k_set("2..6").unwrap().0, vec![2, 3, 4, 5, 6]);
        assert_eq!(parse_k_set("2..=4").unwrap().0, vec![2, 3, 4]);
        assert_eq!(parse_k_set("3,5,9").unwrap().0, vec![3, 5, 9]);
        assert!(parse_k_set("6..2").is_err());
        assert!(parse_k_set("a..b").is_err());
    }

    #[test]
    fn simulate_grid_list() {
        let cli = Cli::try_parse_from(["fdclust", "simulate", "--study", "s2", "--grid", "100x500,200x1000"])
            .unwrap();
        let Command::Simulate(args) = cli.command else {
            panic!("expected simulate");
        };
        assert_eq!(args.grid, vec![(100, 500), (200, 1000)]);
        assert_eq!(args.study, Study::S2);
    }

    #[test]
    fn grid_syntax() {
        assert_eq!(parse_grid("100x500").unwrap(), (100, 500));
        assert!(parse_grid("100-500").is_err());
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"d": 20, "alpha": 0.5, "seed": 4}"#).unwrap();
        let cli = Cli::try_parse_from([
            "fdclust", "fit", "--config", path.to_str().unwrap(), "--alpha", "0.25", "--no-detrend",
            "--k-set", "2..4",
        ])
        .unwrap();
        let Command::Fit(args) = cli.command else {
            panic!("expected fit");
        };
        let cfg = args.config().unwrap();
        assert_eq!((cfg.d, cfg.alpha, cfg.seed), (20, 0.25, 4));
        assert_eq!(cfg.k_set, vec![2, 3, 4]);
        assert!(!cfg.detrend && cfg.normalize);
    }

    #[test]
    fn select_needs_penalty_and_d_together() {
        assert!(Cli::try_parse_from(["fdclust", "select", "--trace", "t.csv", "--d", "4"]).is_err());
        assert!(Cli::try_parse_from([
            "fdclust", "select", "--trace", "t.csv", "--d", "4", "--penalty", "full"
        ])
        .is_ok());
    }
}
