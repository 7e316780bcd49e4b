//! Run configuration: an optional TOML/JSON run file overlaid by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use kvroute_core::cache::DEFAULT_EVICTION_PERIOD;
use kvroute_core::calibration::{Composition, MetricKind, DEFAULT_HELDOUT_LENGTH, DEFAULT_HELDOUT_SEQUENCES};
use kvroute_core::solver::Policy;
use kvroute_core::{Error, ModelSpec, ScorerKind, SpaceKind};
use serde::Deserialize;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_BUDGETS: [u64; 4] = [64, 128, 256, 512];
pub const DEFAULT_PROMPT_LENS: [usize; 2] = [64, 256];
pub const DEFAULT_STEPS: usize = 256;
pub const DEFAULT_T_CACHE: usize = 512;

/// Flags shared by every command. Each one overrides the run file's value.
#[derive(Debug, Clone, Default, Args)]
pub struct SharedArgs {
    /// Run file (TOML or JSON) supplying defaults for any flag below
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model spec JSON file (default: the desk model seeded with --seed)
    #[arg(long, global = true)]
    pub model_spec: Option<PathBuf>,
    /// Master seed for model weights, prompts and random scorers
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for all artifacts
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Calibration config space: full | table2 | calib11
    #[arg(long, global = true)]
    pub space: Option<SpaceKind>,
    /// Comma-separated: full,1d,2d_uniform,2d,2d_hetero
    #[arg(long, global = true, value_delimiter = ',')]
    pub policies: Option<Vec<Policy>>,
    /// Comma-separated token budgets b
    #[arg(long, global = true, value_delimiter = ',')]
    pub budgets: Option<Vec<u64>>,
    /// Sensitivity metric: l2 | kl
    #[arg(long, global = true)]
    pub metric: Option<MetricKind>,
    /// Eviction scorer: attn_accum | trig | random_perm
    #[arg(long, global = true)]
    pub scorer: Option<ScorerKind>,
    /// Also calibrate a KL table and correlate it with the L2 table
    #[arg(long, global = true)]
    pub validate_kl: bool,
    /// Verify routed policies against the exhaustive oracle (L <= 4 only)
    #[arg(long, global = true)]
    pub oracle_check: bool,
    /// Sensitivity table to solve from (default: <out>/calibration/table_<metric>.json)
    #[arg(long, global = true)]
    pub table: Option<PathBuf>,
    /// Plan files to simulate (default: every plan in <out>/plans)
    #[arg(long, global = true, value_delimiter = ',')]
    pub plans: Option<Vec<PathBuf>>,
    /// Cached tokens per layer assumed when converting budgets to configs
    #[arg(long, global = true)]
    pub t_cache: Option<usize>,
    /// Generated tokens per simulated decode
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Comma-separated synthetic prompt lengths
    #[arg(long, global = true, value_delimiter = ',')]
    pub prompt_lens: Option<Vec<usize>>,
    /// Eviction period beta in generated tokens
    #[arg(long, global = true)]
    pub eviction_period: Option<usize>,
    /// Held-out calibration sequences
    #[arg(long, global = true)]
    pub heldout_sequences: Option<usize>,
    /// Tokens per held-out calibration sequence
    #[arg(long, global = true)]
    pub heldout_length: Option<usize>,
    /// Tuple sensitivity composition: direct | additive
    #[arg(long, global = true)]
    pub composition: Option<CompositionArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CompositionArg {
    Direct,
    Additive,
}

impl From<CompositionArg> for Composition {
    fn from(c: CompositionArg) -> Self {
        match c {
            CompositionArg::Direct => Composition::Direct,
            CompositionArg::Additive => Composition::Additive,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ModelSpecSource {
    File(PathBuf),
    Inline(ModelSpec),
}

/// Run file contents; every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    model_spec: Option<ModelSpecSource>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    space: Option<SpaceKind>,
    policies: Option<Vec<Policy>>,
    budgets: Option<Vec<u64>>,
    metric: Option<String>,
    scorer: Option<ScorerKind>,
    validate_kl: Option<bool>,
    oracle_check: Option<bool>,
    table: Option<PathBuf>,
    plans: Option<Vec<PathBuf>>,
    t_cache: Option<usize>,
    steps: Option<usize>,
    prompt_lens: Option<Vec<usize>>,
    eviction_period: Option<usize>,
    heldout_sequences: Option<usize>,
    heldout_length: Option<usize>,
    composition: Option<CompositionArg>,
}

impl RunFile {
    fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parsed: Result<RunFile, String> = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => toml::from_str(&text).map_err(|e| e.to_string()),
        };
        let mut file = parsed.map_err(|e| Error::Config(format!("run file {}: {e}", path.display())))?;
        // relative paths in a run file are relative to the file itself
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(ModelSpecSource::File(p)) = &mut file.model_spec {
            rebase(p);
        }
        file.out.as_mut().map(rebase);
        file.table.as_mut().map(rebase);
        file.plans.iter_mut().flatten().for_each(rebase);
        Ok(file)
    }
}

/// Fully resolved settings for one command invocation.
#[derive(Debug, Clone)]
pub struct Settings {
    pub spec: ModelSpec,
    pub seed: u64,
    pub out: PathBuf,
    pub space: SpaceKind,
    pub policies: Vec<Policy>,
    pub budgets: Vec<u64>,
    pub metric: MetricKind,
    /// `None` means the command's own default scorer.
    pub scorer: Option<ScorerKind>,
    pub validate_kl: bool,
    pub oracle_check: bool,
    pub table: Option<PathBuf>,
    pub plans: Option<Vec<PathBuf>>,
    pub t_cache: usize,
    pub steps: usize,
    pub prompt_lens: Vec<usize>,
    pub eviction_period: usize,
    pub heldout_sequences: usize,
    pub heldout_length: usize,
    pub composition: Composition,
}

fn load_spec(path: &Path) -> Result<ModelSpec, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ModelSpec::from_json(&text)
}

impl Settings {
    pub fn resolve(args: &SharedArgs) -> Result<Self, Error> {
        let file = match &args.config {
            Some(p) => RunFile::load(p)?,
            None => RunFile::default(),
        };
        let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
        let spec = match (&args.model_spec, file.model_spec) {
            (Some(p), _) => load_spec(p)?,
            (None, Some(ModelSpecSource::File(p))) => load_spec(&p)?,
            (None, Some(ModelSpecSource::Inline(s))) => s,
            (None, None) => ModelSpec::desk(seed),
        };
        spec.validate()?;
        let metric = match (args.metric, file.metric) {
            (Some(m), _) => m,
            (None, Some(m)) => m.parse()?,
            (None, None) => MetricKind::L2Proxy,
        };
        let settings = Settings {
            spec,
            seed,
            out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("run")),
            space: args.space.or(file.space).unwrap_or(SpaceKind::Full),
            policies: args
                .policies
                .clone()
                .or(file.policies)
                .unwrap_or_else(|| Policy::ALL.to_vec()),
            budgets: args
                .budgets
                .clone()
                .or(file.budgets)
                .unwrap_or_else(|| DEFAULT_BUDGETS.to_vec()),
            metric,
            scorer: args.scorer.or(file.scorer),
            validate_kl: args.validate_kl || file.validate_kl.unwrap_or(false),
            oracle_check: args.oracle_check || file.oracle_check.unwrap_or(false),
            table: args.table.clone().or(file.table),
            plans: args.plans.clone().or(file.plans),
            t_cache: args.t_cache.or(file.t_cache).unwrap_or(DEFAULT_T_CACHE),
            steps: args.steps.or(file.steps).unwrap_or(DEFAULT_STEPS),
            prompt_lens: args
                .prompt_lens
                .clone()
                .or(file.prompt_lens)
                .unwrap_or_else(|| DEFAULT_PROMPT_LENS.to_vec()),
            eviction_period: args
                .eviction_period
                .or(file.eviction_period)
                .unwrap_or(DEFAULT_EVICTION_PERIOD),
            heldout_sequences: args
                .heldout_sequences
                .or(file.heldout_sequences)
                .unwrap_or(DEFAULT_HELDOUT_SEQUENCES),
            heldout_length: args
                .heldout_length
                .or(file.heldout_length)
                .unwrap_or(DEFAULT_HELDOUT_LENGTH),
            composition: args
                .composition
                .or(file.composition)
                .map(Into::into)
                .unwrap_or_default(),
        };
        settings.validate()?;
        Ok(settings)
    }

    fn validate(&self) -> Result<(), Error> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.policies.is_empty() {
            return bad("at least one policy is required");
        }
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return bad("budgets must be a non-empty list of positive token counts");
        }
        if self.prompt_lens.is_empty() || self.prompt_lens.contains(&0) {
            return bad("prompt lengths must be a non-empty list of positive lengths");
        }
        if self.t_cache == 0 || self.eviction_period == 0 {
            return bad("t_cache and eviction_period must be positive");
        }
        if self.heldout_sequences == 0 || self.heldout_length < 2 {
            return bad("KL calibration needs at least one held-out sequence of 2+ tokens");
        }
        Ok(())
    }

    pub fn calibration_dir(&self) -> PathBuf {
        self.out.join("calibration")
    }

    pub fn plans_dir(&self) -> PathBuf {
        self.out.join("plans")
    }

    pub fn simulate_dir(&self) -> PathBuf {
        self.out.join("simulate")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_run_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 7\nbudgets = [10, 20]\nout = \"artifacts\"\nmetric = \"kl\"\n",
        )
        .unwrap();
        let args = SharedArgs {
            config: Some(path),
            budgets: Some(vec![99]),
            ..Default::default()
        };
        let s = Settings::resolve(&args).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.spec, ModelSpec::desk(7));
        assert_eq!(s.budgets, vec![99]);
        assert_eq!(s.metric, MetricKind::Kl);
        assert_eq!(s.out, dir.path().join("artifacts"));
    }

    #[test]
    fn inline_model_spec_in_json_run_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let spec = ModelSpec {
            num_layers: 2,
            ..ModelSpec::desk(3)
        };
        std::fs::write(&path, format!("{{\"model_spec\": {}}}", spec.to_json())).unwrap();
        let s = Settings::resolve(&SharedArgs {
            config: Some(path),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.spec, spec);
    }

    #[test]
    fn rejects_unknown_keys_and_zero_budgets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "sead = 1\n").unwrap();
        let args = SharedArgs {
            config: Some(path),
            ..Default::default()
        };
        assert!(matches!(Settings::resolve(&args), Err(Error::Config(_))));
        let args = SharedArgs {
            budgets: Some(vec![64, 0]),
            ..Default::default()
        };
        assert!(matches!(Settings::resolve(&args), Err(Error::Config(_))));
    }
}
