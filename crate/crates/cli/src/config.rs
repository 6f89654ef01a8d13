use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use pmlab::cache::sha256_hex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Every option is optional here; unset values come from the config file and
/// then from [`Settings::default`].
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// TOML file with the same keys as the long flags (dashes as underscores).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated α grid for `sweep`.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Number of mesh nodes.
    #[arg(long)]
    pub mesh: Option<usize>,
    /// Length L of the backward orbit of 1 inserted into the mesh.
    #[arg(long)]
    pub orbit_len: Option<usize>,
    #[arg(long)]
    pub x_min: Option<f64>,
    /// Density solver tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// `induced` or `power`.
    #[arg(long)]
    pub solver: Option<String>,

    /// Observable ψ: const[:c], x, x^k, cos[:m], ind:a,b, tent:a,b, bump:a,b, step:a,w.
    #[arg(long)]
    pub obs: Option<String>,
    /// `series`, `forward`, `susceptibility` or `all`.
    #[arg(long)]
    pub method: Option<String>,
    /// Maximal number of backward series terms.
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub series_tol: Option<f64>,
    /// Terms of the forward series.
    #[arg(long)]
    pub forward_terms: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Cylinder depth of the susceptibility sum.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Finite-difference steps, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Relative disagreement tolerated by `validate`.
    #[arg(long)]
    pub gate: Option<f64>,

    /// `cstar`, `cstar1`, `c2`, `c3`, `omega` or `all`.
    #[arg(long)]
    pub cone: Option<String>,
    /// Iterates L^k 1 checked by `cones`.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Points of the y-grid for the Ω factors.
    #[arg(long)]
    pub grid: Option<usize>,

    /// Second observable φ for `decay`.
    #[arg(long)]
    pub phi: Option<String>,
    /// Largest lag N for `decay`.
    #[arg(long)]
    pub lags: Option<usize>,
    /// `operator` or `montecarlo`.
    #[arg(long)]
    pub decay_method: Option<String>,
    #[arg(long)]
    pub ell_max: Option<usize>,
    /// Orbits for Birkhoff averages and Monte Carlo correlations (0 skips Birkhoff).
    #[arg(long)]
    pub orbits: Option<usize>,
    #[arg(long)]
    pub orbit_length: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Skip the density cache
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_cache: Option<bool>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

macro_rules! merge_fields {
    ($a:expr, $b:expr, $($f:ident),*) => {
        RunConfig { config: $a.config.or($b.config), $($f: $a.$f.or($b.$f)),* }
    };
}

impl RunConfig {
    /// Field-wise `self` over `other`.
    pub fn over(self, other: RunConfig) -> RunConfig {
        merge_fields!(
            self, other, alpha, alphas, mesh, orbit_len, x_min, tol, solver, obs, method, k_max, series_tol,
            forward_terms, samples, replicates, depth, eps, gate, cone, iterations, grid, phi, lags, decay_method,
            ell_max, orbits, orbit_length, burn_in, seed, cache_dir, no_cache, out, format
        )
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Flags, then the config file named by the flags, then defaults.
    pub fn resolve(self) -> Result<Settings> {
        let merged = match &self.config {
            Some(path) => {
                let file = RunConfig::from_file(path)?;
                self.over(file)
            }
            None => self,
        };
        Settings::from_config(merged)
    }
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub alpha: f64,
    pub alphas: Vec<f64>,
    pub mesh: usize,
    pub orbit_len: Option<usize>,
    pub x_min: f64,
    pub tol: f64,
    pub solver: String,
    pub obs: String,
    pub method: String,
    pub k_max: usize,
    pub series_tol: f64,
    pub forward_terms: usize,
    pub samples: usize,
    pub replicates: usize,
    pub depth: usize,
    pub eps: Vec<f64>,
    pub gate: f64,
    pub cone: String,
    pub iterations: usize,
    pub grid: usize,
    pub phi: String,
    pub lags: usize,
    pub decay_method: String,
    pub ell_max: usize,
    pub orbits: usize,
    pub orbit_length: Option<usize>,
    pub burn_in: usize,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub no_cache: bool,
    pub out: PathBuf,
    pub format: Format,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            alpha: 0.25,
            alphas: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            mesh: 4096,
            orbit_len: None,
            x_min: pmlab::grid::DEFAULT_X_MIN,
            tol: 1e-13,
            solver: "induced".into(),
            obs: "x".into(),
            method: "series".into(),
            k_max: 20_000,
            series_tol: 1e-10,
            forward_terms: 60,
            samples: 1 << 15,
            replicates: 32,
            depth: 14,
            eps: vec![1e-2, 5e-3],
            gate: 0.03,
            cone: "all".into(),
            iterations: 20,
            grid: 512,
            phi: "bump:0.5,1".into(),
            lags: 200,
            decay_method: "operator".into(),
            ell_max: 10_000,
            orbits: 16,
            orbit_length: None,
            burn_in: 10_000,
            seed: 0x5eed,
            cache_dir: None,
            no_cache: false,
            out: PathBuf::from("pmlab-out"),
            format: Format::Csv,
        }
    }
}

const METHODS: [&str; 4] = ["series", "forward", "susceptibility", "all"];
const CONES: [&str; 6] = ["cstar", "cstar1", "c2", "c3", "omega", "all"];

impl Settings {
    pub fn from_config(c: RunConfig) -> Result<Settings> {
        let d = Settings::default();
        let s = Settings {
            alpha: c.alpha.unwrap_or(d.alpha),
            alphas: c.alphas.unwrap_or(d.alphas),
            mesh: c.mesh.unwrap_or(d.mesh),
            orbit_len: c.orbit_len.or(d.orbit_len),
            x_min: c.x_min.unwrap_or(d.x_min),
            tol: c.tol.unwrap_or(d.tol),
            solver: c.solver.unwrap_or(d.solver),
            obs: c.obs.unwrap_or(d.obs),
            method: c.method.unwrap_or(d.method),
            k_max: c.k_max.unwrap_or(d.k_max),
            series_tol: c.series_tol.unwrap_or(d.series_tol),
            forward_terms: c.forward_terms.unwrap_or(d.forward_terms),
            samples: c.samples.unwrap_or(d.samples),
            replicates: c.replicates.unwrap_or(d.replicates),
            depth: c.depth.unwrap_or(d.depth),
            eps: c.eps.unwrap_or(d.eps),
            gate: c.gate.unwrap_or(d.gate),
            cone: c.cone.unwrap_or(d.cone),
            iterations: c.iterations.unwrap_or(d.iterations),
            grid: c.grid.unwrap_or(d.grid),
            phi: c.phi.unwrap_or(d.phi),
            lags: c.lags.unwrap_or(d.lags),
            decay_method: c.decay_method.unwrap_or(d.decay_method),
            ell_max: c.ell_max.unwrap_or(d.ell_max),
            orbits: c.orbits.unwrap_or(d.orbits),
            orbit_length: c.orbit_length.or(d.orbit_length),
            burn_in: c.burn_in.unwrap_or(d.burn_in),
            seed: c.seed.unwrap_or(d.seed),
            cache_dir: c.cache_dir.or(d.cache_dir),
            no_cache: c.no_cache.unwrap_or(d.no_cache),
            out: c.out.unwrap_or(d.out),
            format: c.format.unwrap_or(d.format),
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| -> Result<()> {
            if !(0.0..1.0).contains(&v) {
                bail!("{name} must lie in [0, 1), got {v}");
            }
            Ok(())
        };
        unit("alpha", self.alpha)?;
        for a in &self.alphas {
            unit("alphas entry", *a)?;
        }
        if self.alphas.is_empty() {
            bail!("alphas must not be empty");
        }
        if !(self.tol > 0.0 && self.tol < 1e-2) {
            bail!("tol must lie in (0, 1e-2), got {}", self.tol);
        }
        if !(self.series_tol > 0.0) || !(self.gate > 0.0) {
            bail!("series_tol and gate must be positive");
        }
        if self.eps.is_empty() || self.eps.iter().any(|e| !(*e > 0.0 && *e < 0.5)) {
            bail!("eps entries must lie in (0, 0.5)");
        }
        if !["induced", "power"].contains(&self.solver.as_str()) {
            bail!("solver must be 'induced' or 'power', got '{}'", self.solver);
        }
        if !METHODS.contains(&self.method.as_str()) {
            bail!("method must be one of {METHODS:?}, got '{}'", self.method);
        }
        if !CONES.contains(&self.cone.as_str()) {
            bail!("cone must be one of {CONES:?}, got '{}'", self.cone);
        }
        if !["operator", "montecarlo"].contains(&self.decay_method.as_str()) {
            bail!("decay_method must be 'operator' or 'montecarlo', got '{}'", self.decay_method);
        }
        if self.k_max == 0 || self.forward_terms == 0 || self.iterations == 0 || self.grid == 0 || self.lags == 0 {
            bail!("k_max, forward_terms, iterations, grid and lags must be positive");
        }
        if self.replicates < 2 || self.samples == 0 {
            bail!("forward series needs samples ≥ 1 and replicates ≥ 2");
        }
        if self.ell_max == 0 {
            bail!("ell_max must be positive");
        }
        self.obs.parse::<pmlab::Observable>()?;
        self.phi.parse::<pmlab::Observable>()?;
        Ok(())
    }

    /// Birkhoff orbit length: `10^5`, growing tenfold per 0.2 of α above 0.2.
    pub fn birkhoff_length(&self) -> usize {
        self.orbit_length.unwrap_or_else(|| {
            let e = ((self.alpha - 0.2) / 0.2).max(0.0);
            (1e5 * 10f64.powf(e)).round() as usize
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(&self.as_config())?)
    }

    pub fn as_config(&self) -> RunConfig {
        RunConfig {
            config: None,
            alpha: Some(self.alpha),
            alphas: Some(self.alphas.clone()),
            mesh: Some(self.mesh),
            orbit_len: self.orbit_len,
            x_min: Some(self.x_min),
            tol: Some(self.tol),
            solver: Some(self.solver.clone()),
            obs: Some(self.obs.clone()),
            method: Some(self.method.clone()),
            k_max: Some(self.k_max),
            series_tol: Some(self.series_tol),
            forward_terms: Some(self.forward_terms),
            samples: Some(self.samples),
            replicates: Some(self.replicates),
            depth: Some(self.depth),
            eps: Some(self.eps.clone()),
            gate: Some(self.gate),
            cone: Some(self.cone.clone()),
            iterations: Some(self.iterations),
            grid: Some(self.grid),
            phi: Some(self.phi.clone()),
            lags: Some(self.lags),
            decay_method: Some(self.decay_method.clone()),
            ell_max: Some(self.ell_max),
            orbits: Some(self.orbits),
            orbit_length: self.orbit_length,
            burn_in: Some(self.burn_in),
            seed: Some(self.seed),
            cache_dir: self.cache_dir.clone(),
            no_cache: Some(self.no_cache),
            out: Some(self.out.clone()),
            format: Some(self.format),
        }
    }

    /// SHA-256 of the command name and the resolved settings.
    pub fn hash(&self, command: &str) -> String {
        let body = serde_json::json!({ "command": command, "settings": self });
        sha256_hex(body.to_string().as_bytes())
    }
}
