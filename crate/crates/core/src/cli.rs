//! Command-line front end: scenario/config loading, cached set
//! pre-computation, single runs and Monte Carlo batches, CSV/JSON artifacts.

use crate::sim::{
    check_run_invariants, precompute_sets, run_landing, LandingConfig, LandingOutcome,
    ManeuverScenario, ManeuverTag, Phase, PrecomputedSets, SimError,
};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
/// Scenario rejection: the initial optimization problem is infeasible or an
/// offline set is empty — a modeling outcome, not a bug.
pub const EXIT_REJECTED: i32 = 2;
/// Guarantee violation after a feasible start — indicates a defect.
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("toml parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("simulation error: {0}")]
    Sim(#[from] SimError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration file
// ---------------------------------------------------------------------------

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}

/// On-disk configuration: controller parameters plus optional per-maneuver
/// scenario overrides keyed by `a`/`b`/`c`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub landing: LandingConfig,
    pub scenarios: BTreeMap<String, ManeuverScenario>,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            landing: LandingConfig::default(),
            scenarios: BTreeMap::new(),
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: FileConfig = toml::from_str(&text)?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Scenario for a maneuver: the file override if present, else the preset.
    pub fn scenario(&self, tag: ManeuverTag) -> ManeuverScenario {
        let key = match tag {
            ManeuverTag::A => "a",
            ManeuverTag::B => "b",
            ManeuverTag::C => "c",
        };
        self.scenarios
            .get(key)
            .cloned()
            .unwrap_or_else(|| ManeuverScenario::preset(tag))
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Everything one invocation will do, resolved from flags and config.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub config: FileConfig,
    pub out_dir: PathBuf,
    pub maneuvers: Vec<ManeuverTag>,
    pub seeds: Vec<u64>,
    pub precompute_only: bool,
    pub check_invariants: bool,
    pub threads: usize,
}

impl RunManifest {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("at least one seed is required".into()));
        }
        if self.maneuvers.is_empty() {
            return Err(CliError::Config("no maneuver selected".into()));
        }
        std::fs::create_dir_all(&self.out_dir).map_err(io_err(&self.out_dir))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Set cache
// ---------------------------------------------------------------------------

/// Cache directory: `SHMPC_CACHE_DIR` when set, else `<out>/cache`.
pub fn cache_dir(out_dir: &Path) -> PathBuf {
    std::env::var_os("SHMPC_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir.join("cache"))
}

/// Key over everything the offline pipeline depends on: the controller
/// configuration and the scenario fields that shape the sets.
pub fn cache_key(cfg: &LandingConfig, scenario: &ManeuverScenario) -> Result<String, CliError> {
    #[derive(Serialize)]
    struct KeyMaterial<'a> {
        cfg: &'a LandingConfig,
        dv_box: [f64; 3],
        ship_speed: f64,
        tau: f64,
    }
    let bytes = serde_json::to_vec(&KeyMaterial {
        cfg,
        dv_box: scenario.dv_box,
        ship_speed: scenario.ship_speed,
        tau: scenario.tau,
    })?;
    let digest = Sha256::digest(&bytes);
    Ok(format!("{digest:x}"))
}

/// Load the offline sets from cache or compute and store them.
/// Returns the sets and whether the cache was hit.
pub fn load_or_compute_sets(
    cfg: &LandingConfig,
    scenario: &ManeuverScenario,
    cache: &Path,
) -> Result<(PrecomputedSets, bool), CliError> {
    std::fs::create_dir_all(cache).map_err(io_err(cache))?;
    let path = cache.join(format!("sets-{}.json", cache_key(cfg, scenario)?));
    if path.is_file() {
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        match serde_json::from_str(&text) {
            Ok(sets) => return Ok((sets, true)),
            Err(e) => log::warn!("ignoring unreadable cache file {}: {e}", path.display()),
        }
    }
    let sets = precompute_sets(cfg, scenario)?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec(&sets)?).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
    Ok((sets, false))
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ManeuverArg {
    A,
    B,
    C,
    All,
}

impl ManeuverArg {
    fn tags(self) -> Vec<ManeuverTag> {
        match self {
            ManeuverArg::A => vec![ManeuverTag::A],
            ManeuverArg::B => vec![ManeuverTag::B],
            ManeuverArg::C => vec![ManeuverTag::C],
            ManeuverArg::All => vec![ManeuverTag::A, ManeuverTag::B, ManeuverTag::C],
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "decklander",
    version,
    about = "Robust shrinking-horizon MPC ship-deck landing simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute and cache the disturbance tube, terminal set, and tightened
    /// envelope; print their statistics.
    Precompute {
        #[arg(long, value_enum, default_value_t = ManeuverArg::All)]
        maneuver: ManeuverArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run landing maneuvers (single seeds or a Monte Carlo batch) and write
    /// CSV logs plus JSON reports.
    Run {
        #[arg(long, value_enum, default_value_t = ManeuverArg::All)]
        maneuver: ManeuverArg,
        /// Seed(s) for the disturbance realizations; repeatable.
        #[arg(long)]
        seed: Vec<u64>,
        /// Run seeds 1..=N instead of the explicit seed list.
        #[arg(long)]
        monte_carlo: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Audit every step against the tube and envelope guarantees.
        #[arg(long)]
        check_invariants: bool,
        /// Worker threads for batch runs.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}

pub fn manifest_from_cli(cli: Cli) -> Result<RunManifest, CliError> {
    let manifest = match cli.command {
        Command::Precompute {
            maneuver,
            config,
            out,
        } => RunManifest {
            config: load_config(&config)?,
            out_dir: out,
            maneuvers: maneuver.tags(),
            seeds: vec![1],
            precompute_only: true,
            check_invariants: false,
            threads: 1,
        },
        Command::Run {
            maneuver,
            seed,
            monte_carlo,
            out,
            config,
            check_invariants,
            threads,
        } => {
            let seeds = match monte_carlo {
                Some(n) => (1..=n).collect(),
                None if seed.is_empty() => vec![1],
                None => seed,
            };
            RunManifest {
                config: load_config(&config)?,
                out_dir: out,
                maneuvers: maneuver.tags(),
                seeds,
                precompute_only: false,
                check_invariants,
                threads: threads.max(1),
            }
        }
    };
    manifest.validate()?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn tag_str(tag: ManeuverTag) -> &'static str {
    match tag {
        ManeuverTag::A => "a",
        ManeuverTag::B => "b",
        ManeuverTag::C => "c",
    }
}

pub fn cmd_precompute(manifest: &RunManifest) -> Result<i32, CliError> {
    let cache = cache_dir(&manifest.out_dir);
    let mut code = EXIT_OK;
    for &tag in &manifest.maneuvers {
        let scenario = manifest.config.scenario(tag);
        let t0 = std::time::Instant::now();
        let (sets, hit) = match load_or_compute_sets(&manifest.config.landing, &scenario, &cache) {
            Ok(v) => v,
            Err(CliError::Sim(SimError::InfeasibleStart(msg))) => {
                println!(
                    "maneuver {}: offline pipeline rejected the configuration: {msg}",
                    tag_str(tag)
                );
                println!(
                    "  (empty sets mean the touchdown window, envelope, and disturbance \
                     tube are out of balance; relax one of them)"
                );
                code = EXIT_REJECTED;
                continue;
            }
            Err(e) => return Err(e),
        };
        let radii = sets.state_tube.interval_radii();
        println!(
            "maneuver {}: sets {} in {:.2} s",
            tag_str(tag),
            if hit { "loaded from cache" } else { "computed" },
            t0.elapsed().as_secs_f64()
        );
        println!(
            "  tube outer box: p ({:.3}, {:.3}, {:.3}) m, v ({:.3}, {:.3}, {:.3}) m/s",
            radii[crate::model::P_X],
            radii[crate::model::P_Y],
            radii[crate::model::P_Z],
            radii[crate::model::V_X],
            radii[crate::model::V_Y],
            radii[crate::model::V_Z],
        );
        println!(
            "  terminal set: {} facets, nonempty; tightened envelope: {} rows",
            sets.terminal_set.num_rows(),
            sets.f_bar.num_rows()
        );
    }
    Ok(code)
}

/// Outcome of one seeded run, with derived statistics for the summary.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub maneuver: String,
    pub seed: u64,
    pub report: crate::sim::TouchdownReport,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub max_qp_iters: usize,
    pub violations: Vec<String>,
}

fn execute_run(
    manifest: &RunManifest,
    tag: ManeuverTag,
    seed: u64,
    sets: &PrecomputedSets,
) -> Result<RunRecord, CliError> {
    let mut scenario = manifest.config.scenario(tag);
    scenario.seed = seed;
    let out = run_landing(&scenario, &manifest.config.landing, sets)?;
    let stem = format!("maneuver_{}_seed{seed}", tag_str(tag));
    let csv_path = manifest.out_dir.join(format!("{stem}.csv"));
    let file = std::fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    out.log.write_csv(std::io::BufWriter::new(file))?;
    write_timing_csv(&out, &manifest.out_dir.join(format!("{stem}_timing.csv")))?;
    let mpc_times: Vec<f64> = out
        .log
        .steps
        .iter()
        .filter(|s| s.phase == Phase::Mpc)
        .map(|s| s.solve_ms)
        .collect();
    let violations = if manifest.check_invariants {
        check_run_invariants(&out, sets, &scenario)
    } else {
        Vec::new()
    };
    let record = RunRecord {
        maneuver: tag_str(tag).to_string(),
        seed,
        report: out.report.clone(),
        mean_solve_ms: mpc_times.iter().sum::<f64>() / mpc_times.len().max(1) as f64,
        max_solve_ms: mpc_times.iter().cloned().fold(0.0, f64::max),
        max_qp_iters: out.log.steps.iter().map(|s| s.qp_iters).max().unwrap_or(0),
        violations,
    };
    let json_path = manifest.out_dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_vec_pretty(&record)?).map_err(io_err(&json_path))?;
    Ok(record)
}

fn write_timing_csv(out: &LandingOutcome, path: &Path) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(["step", "solve_ms"]).map_err(SimError::from)?;
    for s in out.log.steps.iter().filter(|s| s.phase == Phase::Mpc) {
        w.write_record([s.step.to_string(), format!("{:.4}", s.solve_ms)])
            .map_err(SimError::from)?;
    }
    w.flush().map_err(|e| CliError::Sim(csv::Error::from(e).into()))?;
    Ok(())
}

fn print_record(rec: &RunRecord) {
    let r = &rec.report;
    println!(
        "maneuver {} seed {:>3}: |roll| {:>5.2} deg  |pitch| {:>5.2} deg  |p_h| {:>5.3} m  \
         |v_h| {:>5.3} m/s  |v_z| {:>5.3} m/s  T {:>6.3} s  qp {:>5.2}/{:>5.2} ms  [{}]",
        rec.maneuver,
        rec.seed,
        r.delta_roll_deg,
        r.delta_pitch_deg,
        r.delta_p_h,
        r.delta_v_h,
        r.delta_v_z,
        r.t_maneuver,
        rec.mean_solve_ms,
        rec.max_solve_ms,
        if r.success && rec.violations.is_empty() {
            "ok"
        } else {
            "FAIL"
        }
    );
    for v in &rec.violations {
        println!("    violation: {v}");
    }
}

fn print_batch_summary(tag: ManeuverTag, records: &[&RunRecord]) {
    let n = records.len();
    let ok = records
        .iter()
        .filter(|r| r.report.success && r.violations.is_empty())
        .count();
    let max_of = |f: &dyn Fn(&RunRecord) -> f64| records.iter().map(|r| f(r)).fold(0.0, f64::max);
    println!(
        "maneuver {} batch: {ok}/{n} ok  worst |roll| {:.2} deg  |pitch| {:.2} deg  \
         |p_h| {:.3} m  |v_h| {:.3} m/s  |v_z| {:.3} m/s  solve max {:.2} ms",
        tag_str(tag),
        max_of(&|r| r.report.delta_roll_deg),
        max_of(&|r| r.report.delta_pitch_deg),
        max_of(&|r| r.report.delta_p_h),
        max_of(&|r| r.report.delta_v_h),
        max_of(&|r| r.report.delta_v_z),
        max_of(&|r| r.max_solve_ms),
    );
}

pub fn cmd_run(manifest: &RunManifest) -> Result<i32, CliError> {
    let cache = cache_dir(&manifest.out_dir);
    let mut code = EXIT_OK;
    let raise = |code: &mut i32, c: i32| *code = (*code).max(c);
    for &tag in &manifest.maneuvers {
        let scenario = manifest.config.scenario(tag);
        let (sets, hit) = match load_or_compute_sets(&manifest.config.landing, &scenario, &cache) {
            Ok(v) => v,
            Err(CliError::Sim(SimError::InfeasibleStart(msg))) => {
                println!("maneuver {}: rejected: {msg}", tag_str(tag));
                raise(&mut code, EXIT_REJECTED);
                continue;
            }
            Err(e) => return Err(e),
        };
        log::info!(
            "maneuver {}: sets {}",
            tag_str(tag),
            if hit { "cached" } else { "computed" }
        );
        // fan the seeds out over worker threads; results keep seed order
        let workers = manifest.threads.min(manifest.seeds.len()).max(1);
        let mut results: Vec<Option<Result<RunRecord, CliError>>> =
            (0..manifest.seeds.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let chunk = manifest.seeds.len().div_ceil(workers);
            for (w, out_chunk) in results.chunks_mut(chunk).enumerate() {
                let seeds = &manifest.seeds[w * chunk..(w * chunk + out_chunk.len())];
                let sets = &sets;
                scope.spawn(move || {
                    for (slot, &seed) in out_chunk.iter_mut().zip(seeds) {
                        *slot = Some(execute_run(manifest, tag, seed, sets));
                    }
                });
            }
        });
        let mut records = Vec::new();
        for (i, res) in results.into_iter().enumerate() {
            match res.expect("worker did not fill its slot") {
                Ok(rec) => {
                    print_record(&rec);
                    if !rec.report.success || !rec.violations.is_empty() {
                        raise(&mut code, EXIT_FAILURE);
                    }
                    records.push(rec);
                }
                Err(CliError::Sim(SimError::InfeasibleStart(msg))) => {
                    println!(
                        "maneuver {} seed {}: initial problem infeasible: {msg}",
                        tag_str(tag),
                        manifest.seeds[i]
                    );
                    raise(&mut code, EXIT_REJECTED);
                }
                Err(CliError::Sim(e)) => {
                    println!("maneuver {} seed {}: {e}", tag_str(tag), manifest.seeds[i]);
                    raise(&mut code, EXIT_FAILURE);
                }
                Err(e) => return Err(e),
            }
        }
        if manifest.seeds.len() > 1 {
            print_batch_summary(tag, &records.iter().collect::<Vec<_>>());
        }
    }
    Ok(code)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let manifest = match manifest_from_cli(cli) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let result = if manifest.precompute_only {
        cmd_precompute(&manifest)
    } else {
        cmd_run(&manifest)
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_config() -> FileConfig {
        let mut sc = ManeuverScenario::preset(ManeuverTag::A);
        sc.start_pos = [-8.0, 0.0, 8.0];
        sc.ship_speed = 0.0;
        sc.wind_speed = 0.0;
        sc.d_bar_override = Some([0.0; 3]);
        sc.att_err_deg = 0.0;
        sc.n0 = 250;
        let mut cfg = FileConfig::default();
        cfg.scenarios.insert("a".into(), sc);
        cfg
    }

    #[test]
    fn manifest_rejects_empty_seed_list() {
        let m = RunManifest {
            config: FileConfig::default(),
            out_dir: std::env::temp_dir(),
            maneuvers: vec![ManeuverTag::A],
            seeds: vec![],
            precompute_only: false,
            check_invariants: false,
            threads: 1,
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn config_toml_roundtrip_and_version_gate() {
        let cfg = quiet_config();
        let text = toml::to_string(&cfg).unwrap();
        let back: FileConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.version, CONFIG_VERSION);
        assert_eq!(back.scenarios["a"].n0, 250);
        assert_eq!(back.landing.nbar, cfg.landing.nbar);
        // empty file parses into pure defaults
        let defaults: FileConfig = toml::from_str("").unwrap();
        assert_eq!(defaults.version, CONFIG_VERSION);
        // unknown version is refused at load
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, "version = 99").unwrap();
        assert!(matches!(FileConfig::load(&p), Err(CliError::Config(_))));
    }

    #[test]
    fn cache_key_tracks_relevant_inputs() {
        let cfg = LandingConfig::default();
        let sc = ManeuverScenario::preset(ManeuverTag::A);
        let k0 = cache_key(&cfg, &sc).unwrap();
        assert_eq!(k0, cache_key(&cfg, &sc).unwrap());
        // seed does not shape the sets
        let mut sc2 = sc.clone();
        sc2.seed = 99;
        assert_eq!(k0, cache_key(&cfg, &sc2).unwrap());
        // the disturbance box does
        let mut sc3 = sc.clone();
        sc3.dv_box[2] = 0.2;
        assert_ne!(k0, cache_key(&cfg, &sc3).unwrap());
        let mut cfg2 = cfg.clone();
        cfg2.observer_pole = 0.7;
        assert_ne!(k0, cache_key(&cfg2, &sc).unwrap());
    }

    #[test]
    fn end_to_end_run_is_deterministic_and_cached() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let cfg_path = dir.path().join("cfg.toml");
        std::fs::write(&cfg_path, toml::to_string(&quiet_config()).unwrap()).unwrap();
        let args = |o: &Path| {
            vec![
                "decklander".to_string(),
                "run".into(),
                "--maneuver".into(),
                "a".into(),
                "--seed".into(),
                "1".into(),
                "--config".into(),
                cfg_path.to_string_lossy().into_owned(),
                "--out".into(),
                o.to_string_lossy().into_owned(),
                "--check-invariants".into(),
            ]
        };
        assert_eq!(run_cli(args(&out)), EXIT_OK);
        let csv = out.join("maneuver_a_seed1.csv");
        let json = out.join("maneuver_a_seed1.json");
        assert!(csv.is_file() && json.is_file());
        let cache_files: Vec<_> = std::fs::read_dir(out.join("cache"))
            .unwrap()
            .collect::<Result<Vec<_>, _>>()
            .unwrap();
        assert_eq!(cache_files.len(), 1, "expected exactly one cached set file");
        let first = std::fs::read(&csv).unwrap();
        // second invocation: cache hit (no recomputation) and byte-identical log
        let t0 = std::time::Instant::now();
        assert_eq!(run_cli(args(&out)), EXIT_OK);
        let warm = t0.elapsed();
        assert!(
            warm.as_secs_f64() < 20.0,
            "warm run took {warm:?}; cache probably missed"
        );
        assert_eq!(std::fs::read(&csv).unwrap(), first);
        let rec: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(rec["report"]["success"], serde_json::Value::Bool(true));
        assert!(rec["violations"].as_array().unwrap().is_empty());
    }

    #[test]
    fn precompute_subcommand_reports_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let cfg_path = dir.path().join("cfg.toml");
        std::fs::write(&cfg_path, toml::to_string(&quiet_config()).unwrap()).unwrap();
        let code = run_cli([
            "decklander",
            "precompute",
            "--maneuver",
            "a",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(std::fs::read_dir(out.join("cache")).unwrap().count(), 1);
    }
}
