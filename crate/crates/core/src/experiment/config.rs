use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::lyapunov::{NEUTRAL_TOL, TRANSIENT_FRACTION};
use crate::models::{default_entry_scale, Lorenz95Config, ObsMode, SequenceConfig, SuiteKind};
use crate::{Error, Result};

/// The three experiment families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    /// Autonomous random system.
    Exp1,
    /// Random non-autonomous system.
    Exp2,
    /// Lorenz-95 tangent-linear propagators.
    Exp3,
}

impl Suite {
    pub fn kind(self) -> SuiteKind {
        match self {
            Suite::Exp1 => SuiteKind::AutonomousRandom,
            Suite::Exp2 => SuiteKind::NonautonomousRandom,
            Suite::Exp3 => SuiteKind::Lorenz95,
        }
    }

    /// Default `(n, d)`.
    pub fn default_dims(self) -> (usize, usize) {
        match self {
            Suite::Exp1 | Suite::Exp2 => (30, 10),
            Suite::Exp3 => (40, 15),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Exp1 => "exp1",
            Suite::Exp2 => "exp2",
            Suite::Exp3 => "exp3",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp1" => Ok(Suite::Exp1),
            "exp2" => Ok(Suite::Exp2),
            "exp3" => Ok(Suite::Exp3),
            other => Err(Error::Config(format!("unknown suite '{other}' (expected exp1, exp2 or exp3)"))),
        }
    }
}

/// Rank of an initial covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitialRank {
    Full,
    Rank(usize),
}

impl InitialRank {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            InitialRank::Full => n,
            InitialRank::Rank(r) => r,
        }
    }
}

impl fmt::Display for InitialRank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialRank::Full => write!(f, "full"),
            InitialRank::Rank(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for InitialRank {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(InitialRank::Full);
        }
        s.parse()
            .map(InitialRank::Rank)
            .map_err(|_| Error::Config(format!("rank must be a positive integer or 'full', got '{s}'")))
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub suite: Suite,
    pub n: usize,
    pub d: usize,
    pub steps: usize,
    pub seed: u64,
    pub rank: InitialRank,
    pub rank2: Option<InitialRank>,
    pub obs: ObsMode,
    /// Standard deviation of random propagator entries.
    pub scale: f64,
    /// `Q_k = noise * I`.
    pub noise: f64,
    pub rank_threshold: f64,
    pub neutral_tol: f64,
    /// Fraction of `steps` added before and after the filter window for Lyapunov transients.
    pub transient: f64,
    pub forcing: f64,
    pub dt: f64,
    pub substeps: usize,
    pub spinup: usize,
    /// Audit the Loewner bounds at every step.
    pub bounds: bool,
    /// Track the asymptotic sequence and Conditions 2 and 3.
    pub asymptote: bool,
    pub out: PathBuf,
}

/// Default number of filter steps for convergence runs.
pub const DEFAULT_STEPS: usize = 5000;
/// Default number of steps for oracle cross-checks.
pub const CROSS_CHECK_STEPS: usize = 50;

const KEYS: &[&str] = &[
    "suite", "n", "d", "steps", "seed", "rank", "rank2", "obs", "scale", "noise", "rank_threshold", "neutral_tol",
    "transient", "forcing", "dt", "substeps", "spinup", "bounds", "asymptote", "out",
];

impl ExperimentConfig {
    pub fn defaults(suite: Suite) -> Self {
        let (n, d) = suite.default_dims();
        let lorenz = Lorenz95Config::default();
        Self {
            suite,
            n,
            d,
            steps: DEFAULT_STEPS,
            seed: 0,
            rank: InitialRank::Full,
            rank2: None,
            obs: ObsMode::Dense,
            scale: default_entry_scale(n),
            noise: 0.0,
            rank_threshold: 1e-10,
            neutral_tol: NEUTRAL_TOL,
            transient: TRANSIENT_FRACTION,
            forcing: lorenz.forcing,
            dt: lorenz.dt,
            substeps: lorenz.substeps,
            spinup: lorenz.spinup,
            bounds: true,
            asymptote: true,
            out: PathBuf::from("out"),
        }
    }

    /// Build from ordered `key = value` pairs. `suite` is read first since it sets the
    /// defaults; a later `n` without `scale` re-derives the default scale.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let suite = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "suite")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(Suite::Exp2);
        let mut cfg = Self::defaults(suite);
        let mut scale_set = false;
        for (k, v) in pairs {
            cfg.set(k, v)?;
            scale_set |= k == "scale";
        }
        if !scale_set {
            cfg.scale = default_entry_scale(cfg.n);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
            }
        }
        match key {
            "suite" => self.suite = value.parse()?,
            "n" => self.n = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "rank" => self.rank = value.parse()?,
            "rank2" => {
                self.rank2 = match value {
                    "" | "none" => None,
                    v => Some(v.parse()?),
                }
            }
            "obs" => {
                self.obs = match value {
                    "dense" => ObsMode::Dense,
                    "first" => ObsMode::FirstComponent,
                    _ => return Err(Error::Config(format!("obs must be 'dense' or 'first', got '{value}'"))),
                }
            }
            "scale" => self.scale = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "rank_threshold" => self.rank_threshold = num(key, value)?,
            "neutral_tol" => self.neutral_tol = num(key, value)?,
            "transient" => self.transient = num(key, value)?,
            "forcing" => self.forcing = num(key, value)?,
            "dt" => self.dt = num(key, value)?,
            "substeps" => self.substeps = num(key, value)?,
            "spinup" => self.spinup = num(key, value)?,
            "bounds" => self.bounds = flag(key, value)?,
            "asymptote" => self.asymptote = flag(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key '{key}' (known: {})", KEYS.join(", ")))),
        }
        Ok(())
    }

    /// All keys with their current values, in a fixed order; feeding these back through
    /// [`ExperimentConfig::from_pairs`] reproduces the configuration.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let obs = match self.obs {
            ObsMode::Dense => "dense",
            ObsMode::FirstComponent => "first",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("suite", self.suite.name().into()),
            ("n", self.n.to_string()),
            ("d", self.d.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("rank", self.rank.to_string()),
            ("rank2", self.rank2.map_or("none".into(), |r| r.to_string())),
            ("obs", obs.into()),
            ("scale", format!("{:e}", self.scale)),
            ("noise", format!("{:e}", self.noise)),
            ("rank_threshold", format!("{:e}", self.rank_threshold)),
            ("neutral_tol", format!("{:e}", self.neutral_tol)),
            ("transient", format!("{:e}", self.transient)),
            ("forcing", format!("{:e}", self.forcing)),
            ("dt", format!("{:e}", self.dt)),
            ("substeps", self.substeps.to_string()),
            ("spinup", self.spinup.to_string()),
            ("bounds", self.bounds.to_string()),
            ("asymptote", self.asymptote.to_string()),
            ("out", self.out.display().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Render as a config file.
    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        for (name, r) in [("rank", Some(self.rank)), ("rank2", self.rank2)] {
            if let Some(r) = r {
                let r = r.resolve(self.n);
                if r == 0 || r > self.n {
                    return bad(format!("{name} must satisfy 1 <= r <= n = {}, got {r}", self.n));
                }
            }
        }
        if !(self.rank_threshold > 0.0) {
            return bad("rank_threshold must be positive".into());
        }
        if !(self.neutral_tol >= 0.0) {
            return bad("neutral_tol must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.transient) {
            return bad("transient must lie in [0, 1)".into());
        }
        self.sequence_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Steps added before and after the filter window.
    pub fn transient_steps(&self) -> usize {
        (self.transient * self.steps as f64).ceil() as usize
    }

    /// Sequence covering the leading transient, the `K + 1` filter cycles and the trailing
    /// transient.
    pub fn sequence_config(&self) -> SequenceConfig {
        let total = self.steps + 1 + 2 * self.transient_steps();
        let mut seq = SequenceConfig::new(self.suite.kind(), self.n, self.d, self.seed, total);
        seq.obs_mode = self.obs;
        seq.entry_scale = self.scale;
        seq.model_noise = self.noise;
        seq.lorenz = Lorenz95Config {
            n: self.n,
            forcing: self.forcing,
            dt: self.dt,
            substeps: self.substeps,
            spinup: self.spinup,
        };
        seq
    }
}

/// Parse a flat config file: one `key = value` per line, `#` comments, blank lines ignored.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
        let key = k.trim();
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("line {}: unknown key '{key}'", i + 1)));
        }
        pairs.push((key.to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}
