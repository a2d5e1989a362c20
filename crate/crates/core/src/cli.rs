//! Command-line front end. Every subcommand writes its outputs and a
//! `<command>.manifest.json` under `--out`; expensive intermediates (bases,
//! geodesic matrices, features) live content-addressed under `--cache`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::descriptors::{
    heat_kernel_signature, hks_log_times, restrict_features, wave_kernel_signature, wave_kernel_signature_at,
    wks_energies, xyz_normal_features, FeatureMatrix,
};
use crate::error::{Error, Result};
use crate::eval::{emit_pck_csv, evaluate, EvalReport};
use crate::fmaps::{error_vs_area_sweep, fm_decompose, random_features, SweepFeatures};
use crate::geodesics::{geodesic_matrix, GeodesicMatrix};
use crate::losses::{write_loss_csv, LossContext, LossMode};
use crate::matching::{nearest_neighbor_map, spectrally_smoothed_map, MapMethod, PointMap};
use crate::mesh::{load_mesh, normalize_area, TriangleMesh, VertexSubset};
use crate::optimize::{basis_size, initial_features, optimize_pair, OptimizationConfig};
use crate::partialgen::{carve_holes, export_pair, plane_cut, plane_cut_removing};
use crate::spectral::{eigenbasis, SpectralBasis};
use crate::store;

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const LOCK_FILE: &str = ".shapecorr.lock";

#[derive(Debug, Parser)]
#[command(name = "shapecorr", version, about = "Partial-to-full shape correspondence")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Cache directory; defaults to the output directory.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Recompute everything; cached files are neither read nor required.
    #[arg(long, global = true)]
    pub no_cache: bool,
    /// Print a JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// TOML file of optimization settings; its values win over flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Spectral basis of a mesh.
    Eig {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, default_value_t = 200)]
        k: usize,
    },
    /// All-pairs geodesic distances of a mesh.
    Geodesics {
        #[arg(long)]
        mesh: PathBuf,
    },
    /// Per-vertex descriptors.
    Features {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, value_enum, default_value_t = FeatureKind::Wks)]
        kind: FeatureKind,
        /// Energy bins (WKS) or time samples (HKS).
        #[arg(long, default_value_t = 128)]
        bins: usize,
        #[arg(long, default_value_t = 200)]
        k: usize,
    },
    /// Cut a partial shape with exact ground truth.
    GenPartial(GenPartialArgs),
    /// Point map from features by nearest cosine similarity.
    Match(PairArgs),
    /// Optimize features of a pair from the WKS initialization.
    Train(PairArgs),
    /// Short optimization, by default starting from trained features.
    Refine(PairArgs),
    /// Decompose the functional-map layer output into ideal and error parts.
    FmAnalyze(FmAnalyzeArgs),
    /// Relative error of the layer output against missing area.
    Sweep(SweepArgs),
    /// Geodesic error of a predicted map.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Full mesh the maps point into.
        #[arg(long)]
        mesh: PathBuf,
    },
    /// Collect the manifests under --out into one table.
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureKind {
    Wks,
    Hks,
    Xyz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeFeatures {
    /// Random features on the full shape, restricted to the part.
    Random,
    /// Coordinates and normals of the full shape, restricted to the part.
    Xyz,
    /// Wave kernel signatures on a shared energy grid.
    Wks,
}

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("recipe").required(true).args(["holes", "plane", "plane_missing"])))]
pub struct GenPartialArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    /// `m,r`: m holes of geodesic radius r.
    #[arg(long, value_parser = parse_holes)]
    pub holes: Option<(usize, f64)>,
    /// `nx,ny,nz,offset`: keep the side the normal points to.
    #[arg(long, value_parser = parse_four, allow_hyphen_values = true)]
    pub plane: Option<[f64; 4]>,
    /// `nx,ny,nz,fraction`: plane cut removing the given area fraction.
    #[arg(long, value_parser = parse_four, allow_hyphen_values = true)]
    pub plane_missing: Option<[f64; 4]>,
    /// Scale the full mesh to unit area first.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub full: PathBuf,
    #[arg(long)]
    pub part: PathBuf,
    /// Ground-truth map of the part into the full shape.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Feature container for the full shape (defaults to WKS).
    #[arg(long)]
    pub fx: Option<PathBuf>,
    /// Feature container for the part (defaults to WKS).
    #[arg(long)]
    pub fy: Option<PathBuf>,
    #[command(flatten)]
    pub opt: OptArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OptArgs {
    /// Use the hole-partiality settings as the base.
    #[arg(long)]
    pub holes_preset: bool,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda_orth: Option<f64>,
    #[arg(long)]
    pub lambda_lpf: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<LossMode>,
}

#[derive(Debug, Clone, Args)]
pub struct FmAnalyzeArgs {
    #[arg(long)]
    pub full: PathBuf,
    #[arg(long)]
    pub part: PathBuf,
    /// Ground-truth map; must list full-shape vertices in increasing order.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = AnalyzeFeatures::Random)]
    pub features: AnalyzeFeatures,
    /// Width of random features (default k + 10).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 128)]
    pub bins: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5")]
    pub fractions: Vec<f64>,
    /// Cut direction shared by all (nested) cuts.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1,0.3,0.1")]
    pub normal: Vec<f64>,
    #[arg(long, default_value_t = 30)]
    pub k: usize,
    /// Width of the random features (default 2k).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
}

fn floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect()
}

fn parse_holes(s: &str) -> std::result::Result<(usize, f64), String> {
    let (m, r) = s.split_once(',').ok_or("expected m,r")?;
    let m = m.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let r = r.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((m, r))
}

fn parse_four(s: &str) -> std::result::Result<[f64; 4], String> {
    let v = floats(s)?;
    v.try_into().map_err(|_| "expected four comma-separated numbers".to_string())
}

fn parse_mode(s: &str) -> std::result::Result<LossMode, String> {
    s.parse::<LossMode>().map_err(|e| e.to_string())
}

/// Record of one subcommand run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Digest of command, configuration and input hashes.
    pub request: String,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
    pub summary: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl RunManifest {
    pub fn path(out: &Path, command: &str) -> PathBuf {
        out.join(format!("{command}.manifest.json"))
    }

    /// True when every listed artifact exists with its recorded hash.
    pub fn artifacts_intact(&self) -> bool {
        self.artifacts
            .iter()
            .all(|a| sha256_file(Path::new(&a.path)).map_or(false, |h| h == a.sha256))
    }
}

/// What a subcommand run produced, as printed on stdout.
#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub command: String,
    pub cache_hit: bool,
    pub manifest: String,
    pub summary: Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn sha256_str(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Exclusive lock on a cache directory, released on drop.
#[derive(Debug)]
pub struct CacheLock {
    path: PathBuf,
}

impl CacheLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for CacheLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Paths and cache policy shared by all subcommands.
struct Workspace {
    out: PathBuf,
    cache: PathBuf,
    no_cache: bool,
}

fn short(hash: &str) -> &str {
    &hash[..16.min(hash.len())]
}

impl Workspace {
    fn basis_path(&self, mesh: &TriangleMesh, k: usize) -> PathBuf {
        self.cache.join(format!("basis-{}-k{k}.bin", short(&mesh.content_hash())))
    }

    fn geodesics_path(&self, mesh: &TriangleMesh) -> PathBuf {
        self.cache.join(format!("geodesics-{}.bin", short(&mesh.content_hash())))
    }

    fn missing(&self, path: PathBuf, command: String) -> Error {
        Error::MissingCache {
            path,
            command: format!("{TOOL} {command} --cache {}", self.cache.display()),
        }
    }

    /// Cached basis, or a fresh one under `--no-cache`.
    fn basis(&self, mesh_path: &Path, mesh: &TriangleMesh, k: usize) -> Result<SpectralBasis> {
        if self.no_cache {
            return eigenbasis(mesh, k);
        }
        let path = self.basis_path(mesh, k);
        if !path.exists() {
            return Err(self.missing(path, format!("eig --mesh {} --k {k}", mesh_path.display())));
        }
        let (basis, meta) = store::load_basis(&path)?;
        if meta.mesh_sha256 != mesh.content_hash() || basis.k() != k {
            return Err(Error::Container {
                path,
                message: "cached basis does not belong to this mesh".into(),
            });
        }
        Ok(basis)
    }

    fn geodesics(&self, mesh_path: &Path, mesh: &TriangleMesh) -> Result<GeodesicMatrix> {
        if self.no_cache {
            return geodesic_matrix(mesh);
        }
        let path = self.geodesics_path(mesh);
        if !path.exists() {
            return Err(self.missing(path, format!("geodesics --mesh {}", mesh_path.display())));
        }
        let g = store::load_geodesics(&path)?;
        if g.source_mesh_hash() != mesh.content_hash() {
            return Err(Error::Container {
                path,
                message: "cached geodesics do not belong to this mesh".into(),
            });
        }
        Ok(g)
    }
}

/// Collects artifacts of one run.
struct Recorder {
    artifacts: Vec<Artifact>,
}

impl Recorder {
    fn new() -> Self {
        Self { artifacts: Vec::new() }
    }

    fn add(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        std::fs::write(path, bytes)?;
        self.add(path)
    }

    fn json(&mut self, path: &Path, v: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.write(path, s.as_bytes())
    }
}

/// Parses `args` and runs the subcommand; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let json_mode = cli.global.json;
    match run(&cli) {
        Ok(outcome) => {
            if json_mode {
                println!("{}", serde_json::to_string(&outcome).expect("serializable outcome"));
            } else {
                print_human(&outcome);
            }
            0
        }
        Err(e) => {
            if json_mode {
                eprintln!("{}", json!({"error": {"code": e.code(), "message": e.to_string()}}));
            } else {
                eprintln!("error: {e}");
            }
            e.code()
        }
    }
}

fn print_human(o: &Outcome) {
    let hit = if o.cache_hit { " (cache hit)" } else { "" };
    println!("{}{hit}: manifest {}", o.command, o.manifest);
    if let Value::Object(m) = &o.summary {
        for (k, v) in m {
            match v {
                Value::String(s) => println!("  {k}: {s}"),
                other => println!("  {k}: {other}"),
            }
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Eig { .. } => "eig",
        Command::Geodesics { .. } => "geodesics",
        Command::Features { .. } => "features",
        Command::GenPartial(_) => "gen-partial",
        Command::Match(_) => "match",
        Command::Train(_) => "train",
        Command::Refine(_) => "refine",
        Command::FmAnalyze(_) => "fm-analyze",
        Command::Sweep(_) => "sweep",
        Command::Eval { .. } => "eval",
        Command::Report => "report",
    }
}

/// Optimization settings: base preset, then flags, then the config file.
pub fn effective_config(base: OptimizationConfig, opt: &OptArgs, global: &GlobalArgs) -> Result<OptimizationConfig> {
    let mut c = if opt.holes_preset {
        OptimizationConfig {
            tau: OptimizationConfig::holes().tau,
            ..base
        }
    } else {
        base
    };
    if let Some(v) = opt.tau {
        c.tau = v;
    }
    if let Some(v) = opt.lambda_orth {
        c.lambda_orth = v;
    }
    if let Some(v) = opt.lambda_lpf {
        c.lambda_lpf = v;
    }
    if let Some(v) = opt.k {
        c.k = v;
    }
    if let Some(v) = opt.d {
        c.d = v;
    }
    if let Some(v) = opt.lr {
        c.lr = v;
    }
    if let Some(v) = opt.iterations {
        c.iterations = v;
    }
    if let Some(v) = opt.mode {
        c.mode = v;
    }
    if let Some(v) = global.seed {
        c.seed = v;
    }
    if let Some(path) = &global.config {
        let text = std::fs::read_to_string(path)?;
        let file: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut merged = toml::Table::try_from(&c).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in file {
            merged.insert(k, v);
        }
        c = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    c.validate()?;
    Ok(c)
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let g = &cli.global;
    let ws = Workspace {
        out: g.out.clone(),
        cache: g.cache.clone().unwrap_or_else(|| g.out.clone()),
        no_cache: g.no_cache,
    };
    std::fs::create_dir_all(&ws.out)?;
    let name = command_name(&cli.command);

    let (config, inputs) = describe(&cli.command, g)?;
    if let Some(c) = config_of(&cli.command, g)? {
        eprintln!("{name} settings: {}", serde_json::to_string(&c)?);
    }
    let request = sha256_str(&serde_json::to_string(&json!({
        "command": name,
        "config": config,
        "inputs": inputs,
        "cache": ws.cache.display().to_string(),
    }))?);
    let manifest_path = RunManifest::path(&ws.out, name);

    if !ws.no_cache && !matches!(cli.command, Command::Report) {
        if let Ok(text) = std::fs::read_to_string(&manifest_path) {
            if let Ok(m) = serde_json::from_str::<RunManifest>(&text) {
                if m.request == request && m.version == VERSION && m.artifacts_intact() {
                    log::info!("{name}: outputs up to date");
                    return Ok(Outcome {
                        command: name.into(),
                        cache_hit: true,
                        manifest: manifest_path.display().to_string(),
                        summary: m.summary,
                    });
                }
            }
        }
    }

    let _lock = CacheLock::acquire(&ws.cache)?;
    let mut rec = Recorder::new();
    let summary = execute(&cli.command, g, &ws, &mut rec)?;
    let manifest = RunManifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: name.into(),
        request,
        config,
        inputs,
        artifacts: rec.artifacts,
        summary: summary.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&manifest_path, text)?;
    Ok(Outcome {
        command: name.into(),
        cache_hit: false,
        manifest: manifest_path.display().to_string(),
        summary,
    })
}

fn config_of(c: &Command, g: &GlobalArgs) -> Result<Option<OptimizationConfig>> {
    Ok(match c {
        Command::Match(a) | Command::Train(a) => Some(effective_config(OptimizationConfig::default(), &a.opt, g)?),
        Command::Refine(a) => Some(effective_config(OptimizationConfig::refinement(), &a.opt, g)?),
        _ => None,
    })
}

/// Configuration snapshot and input file hashes of a command.
fn describe(c: &Command, g: &GlobalArgs) -> Result<(Value, BTreeMap<String, String>)> {
    let mut inputs = BTreeMap::new();
    let mut add = |p: &Path| -> Result<()> {
        inputs.insert(p.display().to_string(), sha256_file(p)?);
        Ok(())
    };
    let seed = g.seed.unwrap_or(0);
    let config = match c {
        Command::Eig { mesh, k } => {
            add(mesh)?;
            json!({ "k": k })
        }
        Command::Geodesics { mesh } => {
            add(mesh)?;
            json!({})
        }
        Command::Features { mesh, kind, bins, k } => {
            add(mesh)?;
            json!({ "kind": format!("{kind:?}").to_lowercase(), "bins": bins, "k": k })
        }
        Command::GenPartial(a) => {
            add(&a.mesh)?;
            json!({
                "holes": a.holes,
                "plane": a.plane,
                "plane_missing": a.plane_missing,
                "normalize": a.normalize,
                "seed": seed,
            })
        }
        Command::Match(a) | Command::Train(a) | Command::Refine(a) => {
            for p in [Some(&a.full), Some(&a.part), a.gt.as_ref(), a.fx.as_ref(), a.fy.as_ref()].into_iter().flatten() {
                add(p)?;
            }
            serde_json::to_value(config_of(c, g)?)?
        }
        Command::FmAnalyze(a) => {
            for p in [&a.full, &a.part, &a.gt] {
                add(p)?;
            }
            json!({
                "features": format!("{:?}", a.features).to_lowercase(),
                "dim": a.dim,
                "ridge": a.ridge,
                "k": a.k,
                "bins": a.bins,
                "seed": seed,
            })
        }
        Command::Sweep(a) => {
            add(&a.mesh)?;
            json!({
                "fractions": a.fractions,
                "normal": a.normal,
                "k": a.k,
                "dim": a.dim,
                "ridge": a.ridge,
                "seed": seed,
            })
        }
        Command::Eval { pred, gt, mesh } => {
            for p in [pred, gt, mesh] {
                add(p)?;
            }
            json!({})
        }
        Command::Report => json!({}),
    };
    Ok((config, inputs))
}

fn execute(c: &Command, g: &GlobalArgs, ws: &Workspace, rec: &mut Recorder) -> Result<Value> {
    let seed = g.seed.unwrap_or(0);
    match c {
        Command::Eig { mesh: mp, k } => {
            let mesh = load_mesh(mp, None)?;
            let path = ws.basis_path(&mesh, *k);
            let reused = !ws.no_cache && path.exists() && store::load_basis(&path).is_ok();
            if !reused {
                let basis = eigenbasis(&mesh, *k)?;
                store::save_basis(&basis, &mesh.content_hash(), &path)?;
            }
            rec.add(&path)?;
            let (basis, _) = store::load_basis(&path)?;
            Ok(json!({
                "basis": path.display().to_string(),
                "k": basis.k(),
                "vertices": basis.vertex_count(),
                "max_eigenvalue": basis.max_eigenvalue(),
                "reused": reused,
            }))
        }
        Command::Geodesics { mesh: mp } => {
            let mesh = load_mesh(mp, None)?;
            let path = ws.geodesics_path(&mesh);
            let reused = !ws.no_cache && path.exists() && store::load_geodesics(&path).is_ok();
            if !reused {
                store::save_geodesics(&geodesic_matrix(&mesh)?, &path)?;
            }
            rec.add(&path)?;
            Ok(json!({
                "geodesics": path.display().to_string(),
                "vertices": mesh.vertex_count(),
                "reused": reused,
            }))
        }
        Command::Features { mesh: mp, kind, bins, k } => {
            let mesh = load_mesh(mp, None)?;
            let hash = mesh.content_hash();
            let (f, tag) = match kind {
                FeatureKind::Xyz => (xyz_normal_features(&mesh), "xyz".to_string()),
                FeatureKind::Wks => {
                    let basis = ws.basis(mp, &mesh, *k)?;
                    (wave_kernel_signature(&basis, *bins)?, format!("wks-k{k}-b{bins}"))
                }
                FeatureKind::Hks => {
                    let basis = ws.basis(mp, &mesh, *k)?;
                    let times = hks_log_times(&basis, *bins)?;
                    (heat_kernel_signature(&basis, &times)?, format!("hks-k{k}-b{bins}"))
                }
            };
            let path = ws.cache.join(format!("features-{tag}-{}.bin", short(&hash)));
            let mut params = BTreeMap::new();
            params.insert("k".into(), k.to_string());
            params.insert("bins".into(), bins.to_string());
            store::save_features(&f, &hash, params, &path)?;
            rec.add(&path)?;
            Ok(json!({ "features": path.display().to_string(), "rows": f.rows(), "dim": f.dim() }))
        }
        Command::GenPartial(a) => gen_partial(a, seed, ws, rec),
        Command::Match(a) => run_match(a, g, ws, rec),
        Command::Train(a) => run_train(a, effective_config(OptimizationConfig::default(), &a.opt, g)?, ws, rec),
        Command::Refine(a) => run_train(a, effective_config(OptimizationConfig::refinement(), &a.opt, g)?, ws, rec),
        Command::FmAnalyze(a) => fm_analyze(a, seed, ws, rec),
        Command::Sweep(a) => sweep(a, seed, ws, rec),
        Command::Eval { pred, gt, mesh } => {
            let full = load_mesh(mesh, None)?;
            let geo = ws.geodesics(mesh, &full)?;
            let n = full.vertex_count();
            let pred_map = PointMap::load_text(pred, n, MapMethod::NearestNeighbor)?;
            let gt_map = PointMap::load_text(gt, n, MapMethod::GroundTruth)?;
            let report = evaluate(&pred_map, &gt_map.targets, &geo, full.total_area())?;
            write_eval(&report, ws, rec)
        }
        Command::Report => report(ws, rec),
    }
}

fn write_eval(report: &EvalReport, ws: &Workspace, rec: &mut Recorder) -> Result<Value> {
    let path = ws.out.join("eval.json");
    rec.json(&path, report)?;
    let pck = ws.out.join("pck.csv");
    emit_pck_csv(report, &pck)?;
    rec.add(&pck)?;
    Ok(json!({
        "mean_error": report.mean_error,
        "mean_error_x100": report.mean_error_x100,
        "vertices": report.per_vertex.len(),
    }))
}

fn gen_partial(a: &GenPartialArgs, seed: u64, ws: &Workspace, rec: &mut Recorder) -> Result<Value> {
    let mut full = load_mesh(&a.mesh, None)?;
    if a.normalize {
        full = normalize_area(&full)?;
    }
    let part = if let Some((m, r)) = a.holes {
        carve_holes(&full, m, r, seed)?
    } else if let Some([x, y, z, o]) = a.plane {
        plane_cut(&full, [x, y, z], o)?
    } else if let Some([x, y, z, f]) = a.plane_missing {
        plane_cut_removing(&full, [x, y, z], f)?
    } else {
        return Err(Error::InvalidArgument("one of --holes, --plane or --plane-missing is required".into()));
    };
    let meta = export_pair(&full, &part, &ws.out)?;
    for f in ["full.off", "part.off", "gt.txt", "meta.json"] {
        rec.add(&ws.out.join(f))?;
    }
    Ok(json!({
        "area_fraction": meta.area_fraction,
        "full_vertices": meta.full_vertices,
        "part_vertices": meta.part_vertices,
    }))
}

struct LoadedPair {
    full: TriangleMesh,
    part: TriangleMesh,
    basis_x: SpectralBasis,
    basis_y: SpectralBasis,
    gt: Option<Vec<usize>>,
    k: usize,
}

fn load_pair_inputs(a: &PairArgs, config: &OptimizationConfig, ws: &Workspace) -> Result<LoadedPair> {
    let full = load_mesh(&a.full, None)?;
    let part = load_mesh(&a.part, None)?;
    let k = basis_size(config.k, full.vertex_count(), part.vertex_count());
    let basis_x = ws.basis(&a.full, &full, k)?;
    let basis_y = ws.basis(&a.part, &part, k)?;
    let gt = match &a.gt {
        Some(p) => {
            let m = PointMap::load_text(p, full.vertex_count(), MapMethod::GroundTruth)?;
            if m.len() != part.vertex_count() {
                return Err(Error::dims("ground-truth length", part.vertex_count(), m.len()));
            }
            Some(m.targets)
        }
        // A mesh matched against itself has the identity as ground truth.
        None if full.content_hash() == part.content_hash() => Some((0..full.vertex_count()).collect()),
        None => None,
    };
    Ok(LoadedPair {
        full,
        part,
        basis_x,
        basis_y,
        gt,
        k,
    })
}

fn pair_features(a: &PairArgs, p: &LoadedPair, config: &OptimizationConfig) -> Result<(FeatureMatrix, FeatureMatrix)> {
    match (&a.fx, &a.fy) {
        (Some(px), Some(py)) => {
            let (fx, _) = store::load_features(px)?;
            let (fy, _) = store::load_features(py)?;
            if fx.rows() != p.full.vertex_count() {
                return Err(Error::dims("full-shape feature rows", p.full.vertex_count(), fx.rows()));
            }
            if fy.rows() != p.part.vertex_count() {
                return Err(Error::dims("part feature rows", p.part.vertex_count(), fy.rows()));
            }
            Ok((fx, fy))
        }
        (None, None) => initial_features(&p.basis_x, &p.basis_y, config.wks_bins, config.d),
        _ => Err(Error::InvalidArgument("--fx and --fy must be given together".into())),
    }
}

fn map_json(map: &PointMap, tau: f64, k: usize) -> Value {
    json!({
        "method": map.method,
        "target_count": map.target_count,
        "tau": tau,
        "k": k,
        "targets": map.targets,
    })
}

fn write_maps(
    nearest: &PointMap,
    smoothed: &PointMap,
    config: &OptimizationConfig,
    k: usize,
    ws: &Workspace,
    rec: &mut Recorder,
) -> Result<()> {
    let p = ws.out.join("map.txt");
    smoothed.save_text(&p)?;
    rec.add(&p)?;
    let p = ws.out.join("map_nn.txt");
    nearest.save_text(&p)?;
    rec.add(&p)?;
    rec.json(&ws.out.join("map.json"), &map_json(smoothed, config.tau, k))
}

fn run_match(a: &PairArgs, g: &GlobalArgs, ws: &Workspace, rec: &mut Recorder) -> Result<Value> {
    let config = effective_config(OptimizationConfig::default(), &a.opt, g)?;
    let p = load_pair_inputs(a, &config, ws)?;
    let (fx, fy) = pair_features(a, &p, &config)?;
    let nearest = nearest_neighbor_map(fy.values(), fx.values())?;
    let smoothed = spectrally_smoothed_map(&nearest, &p.basis_x, &p.basis_y)?;
    write_maps(&nearest, &smoothed, &config, p.k, ws, rec)?;
    let mut summary = json!({ "k": p.k, "part_vertices": smoothed.len() });
    if let Some(gt) = &p.gt {
        let geo = ws.geodesics(&a.full, &p.full)?;
        let report = evaluate(&smoothed, gt, &geo, p.full.total_area())?;
        let nn = evaluate(&nearest, gt, &geo, p.full.total_area())?;
        summary = merge(summary, write_eval(&report, ws, rec)?);
        summary["nearest_mean_error"] = json!(nn.mean_error);
    }
    Ok(summary)
}

fn run_train(a: &PairArgs, config: OptimizationConfig, ws: &Workspace, rec: &mut Recorder) -> Result<Value> {
    let p = load_pair_inputs(a, &config, ws)?;
    let (fx0, fy0) = pair_features(a, &p, &config)?;
    let geo_x = ws.geodesics(&a.full, &p.full)?;
    let geo_y = ws.geodesics(&a.part, &p.part)?;
    let mut ctx = LossContext::new(
        &p.basis_x,
        &p.basis_y,
        &geo_x,
        &geo_y,
        config.loss_settings(),
        config.subsampling,
        config.seed,
    )?;
    let out = optimize_pair(&fy0, &fx0, &mut ctx, &config)?;
    let report = &out.report;

    let hx = p.full.content_hash();
    let hy = p.part.content_hash();
    let px = ws.out.join("features_x.bin");
    store::save_features(&out.fx, &hx, BTreeMap::new(), &px)?;
    rec.add(&px)?;
    let py = ws.out.join("features_y.bin");
    store::save_features(&out.fy, &hy, BTreeMap::new(), &py)?;
    rec.add(&py)?;
    let mut csv = Vec::new();
    write_loss_csv(&report.losses, &mut csv)?;
    rec.write(&ws.out.join("losses.csv"), &csv)?;
    write_maps(&report.nearest_map, &report.final_map, &config, p.k, ws, rec)?;
    rec.json(&ws.out.join("report.json"), report)?;

    let mut summary = json!({
        "k": p.k,
        "iterations": report.iterations_run(),
        "initial_loss": report.initial_loss(),
        "final_loss": report.final_loss(),
        "warnings": report.warnings.len(),
    });
    if let Some(gt) = &p.gt {
        let ev = evaluate(&report.final_map, gt, &geo_x, p.full.total_area())?;
        summary = merge(summary, write_eval(&ev, ws, rec)?);
    }
    log::info!("optimization took {:.2} s", report.wall_time_secs);
    Ok(summary)
}

fn merge(mut a: Value, b: Value) -> Value {
    if let (Value::Object(x), Value::Object(y)) = (&mut a, b) {
        x.extend(y);
    }
    a
}

fn fm_analyze(a: &FmAnalyzeArgs, seed: u64, ws: &Workspace, rec: &mut Recorder) -> Result<Value> {
    let full = load_mesh(&a.full, None)?;
    let part = load_mesh(&a.part, None)?;
    let gt = PointMap::load_text(&a.gt, full.vertex_count(), MapMethod::GroundTruth)?;
    let subset = VertexSubset::new(full.vertex_count(), gt.targets.clone())?;
    let kx = a.k.min(full.vertex_count());
    let ky = a.k.min(part.vertex_count().saturating_sub(1)).max(1);
    let basis_x = ws.basis(&a.full, &full, kx)?;
    let basis_y = ws.basis(&a.part, &part, ky)?;
    let (fx, fy) = match a.features {
        AnalyzeFeatures::Random => {
            let fx = random_features(full.vertex_count(), a.dim.unwrap_or(kx + 10), seed);
            let fy = restrict_features(&fx, &subset)?;
            (fx, fy)
        }
        AnalyzeFeatures::Xyz => {
            let fx = xyz_normal_features(&full);
            let fy = restrict_features(&fx, &subset)?;
            (fx, fy)
        }
        AnalyzeFeatures::Wks => {
            let e = wks_energies(&basis_x, a.bins)?;
            (wave_kernel_signature_at(&basis_x, &e)?, wave_kernel_signature_at(&basis_y, &e)?)
        }
    };
    let dec = fm_decompose(&subset, &basis_x, &basis_y, &fx, &fy, a.ridge)?;
    dec.export(&ws.out)?;
    for f in ["total.csv", "ideal.csv", "error.csv", "decomposition.json"] {
        rec.add(&ws.out.join(f))?;
    }
    Ok(json!({
        "missing_area_fraction": dec.missing_area_fraction,
        "relative_error": dec.relative_error(),
        "total_norm": dec.total.matrix.norm(),
        "ideal_norm": dec.ideal.matrix.norm(),
        "error_norm": dec.error.matrix.norm(),
    }))
}

fn sweep(a: &SweepArgs, seed: u64, ws: &Workspace, rec: &mut Recorder) -> Result<Value> {
    let normal: [f64; 3] = a
        .normal
        .clone()
        .try_into()
        .map_err(|_| Error::InvalidArgument("--normal takes three numbers".into()))?;
    let mesh = load_mesh(&a.mesh, None)?;
    let k = a.k.min(mesh.vertex_count());
    let basis = ws.basis(&a.mesh, &mesh, k)?;
    let mut parts = Vec::with_capacity(a.fractions.len());
    for &f in &a.fractions {
        parts.push(plane_cut_removing(&mesh, normal, f)?.kept);
    }
    let fx = random_features(mesh.vertex_count(), a.dim.unwrap_or(2 * k), seed);
    let points = error_vs_area_sweep(&mesh, &basis, &parts, &SweepFeatures::Restricted(fx), a.ridge)?;
    let mut csv = String::from("missing_area_fraction,relative_error,ideal_norm,error_norm,part_vertices\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p.missing_area_fraction, p.relative_error, p.ideal_norm, p.error_norm, p.part_vertices
        ));
    }
    let path = ws.out.join("sweep.csv");
    rec.write(&path, csv.as_bytes())?;
    let monotone = points.windows(2).all(|w| w[0].relative_error < w[1].relative_error);
    Ok(json!({
        "rows": points.len(),
        "relative_error": points.iter().map(|p| p.relative_error).collect::<Vec<_>>(),
        "strictly_increasing": monotone,
    }))
}

fn report(ws: &Workspace, rec: &mut Recorder) -> Result<Value> {
    let mut rows = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&ws.out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let mut candidates = Vec::new();
    for e in entries {
        if e.is_dir() {
            let mut sub: Vec<PathBuf> = std::fs::read_dir(&e)?.filter_map(|x| x.ok().map(|x| x.path())).collect();
            sub.sort();
            candidates.extend(sub);
        } else {
            candidates.push(e);
        }
    }
    for path in candidates {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !name.ends_with(".manifest.json") || name == "report.manifest.json" {
            continue;
        }
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        rows.push(json!({
            "manifest": path.display().to_string(),
            "command": m.command,
            "artifacts": m.artifacts.len(),
            "mean_error": m.summary.get("mean_error").cloned().unwrap_or(Value::Null),
        }));
    }
    let mut csv = String::from("manifest,command,artifacts,mean_error\n");
    for r in &rows {
        let err = r["mean_error"].as_f64().map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{err}\n",
            r["manifest"].as_str().unwrap_or(""),
            r["command"].as_str().unwrap_or(""),
            r["artifacts"]
        ));
    }
    rec.write(&ws.out.join("report.csv"), csv.as_bytes())?;
    rec.json(&ws.out.join("report.json"), &rows)?;
    Ok(json!({ "runs": rows.len() }))
}
