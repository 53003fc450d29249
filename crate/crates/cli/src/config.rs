//! Run configuration: one TOML file, `${VAR}` interpolation in string
//! values, command-line overrides on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cropthink::backend::toy::{ToyPolicyConfig, ToyTaskConfig};
use cropthink::chat::EndpointConfig;
use cropthink::rollout::PerturbKind;
use cropthink::types::PolicyConfig;
use cropthink::vlir::filter::RetryPolicy;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub policy: PolicyConfig,
    pub episode: EpisodeSection,
    pub train: TrainSection,
    pub toy: ToySection,
    pub backend: BackendSection,
    pub generator: GeneratorSection,
    pub filters: FilterSection,
    pub perturb: PerturbSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub output_dir: PathBuf,
    /// Build manifest: one JSON job per line.
    pub jobs: Option<PathBuf>,
    /// Store written by `build-data`.
    pub build_dir: PathBuf,
    /// Store written by `filter-data`.
    pub filtered_dir: PathBuf,
    /// Corpus read by `stats`; defaults to the filtered store's corpus.
    pub corpus: Option<PathBuf>,
    /// Evaluation manifest (same line format as the build manifest). The
    /// toy evaluation split is used when absent and the backend is local.
    pub eval_set: Option<PathBuf>,
    /// Toy checkpoint to start from.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            output_dir: "runs/default".into(),
            jobs: None,
            build_dir: "data/vlir/build".into(),
            filtered_dir: "data/vlir/filtered".into(),
            corpus: None,
            eval_set: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub max_total_tokens: usize,
    /// Sampling temperature for rollouts; evaluation is always greedy.
    pub temperature: f64,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        EpisodeSection {
            max_total_tokens: 4096,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub groups_per_step: usize,
    pub eval_every: usize,
    pub sft_steps: usize,
    pub skip_sft: bool,
    pub skip_rgrpo: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 300,
            groups_per_step: 16,
            eval_every: 50,
            sft_steps: 50,
            skip_sft: false,
            skip_rgrpo: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub task: ToyTaskConfig,
    pub policy: ToyPolicyConfig,
    pub fixture_seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    /// Demonstrations collected from the crop oracle for the cold start.
    pub demos: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        ToySection {
            task: ToyTaskConfig::default(),
            policy: ToyPolicyConfig::default(),
            fixture_seed: 0,
            train_size: 2000,
            eval_size: 200,
            demos: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Toy,
    Oracle,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub endpoint: EndpointConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Offline stand-in that writes a fixed rationale around the job's box.
    #[default]
    Template,
    /// As `template`, but always answers wrongly (exercises rejection).
    TemplateWrong,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    pub endpoint: EndpointConfig,
    pub attempts: Option<u32>,
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    /// Accept everything (dry runs without model access).
    #[default]
    AcceptAll,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub kind: FilterKind,
    pub region: EndpointConfig,
    pub reasoning: EndpointConfig,
    pub retry: RetryPolicy,
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSection {
    pub grid: Vec<f64>,
    pub kind: PerturbKind,
    pub jitter: f64,
}

impl Default for PerturbSection {
    fn default() -> Self {
        PerturbSection {
            grid: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            kind: PerturbKind::ReplaceRandom,
            jitter: 0.5,
        }
    }
}

/// Replace `${NAME}` in every string of the tree with the variable's value.
fn interpolate(value: &mut toml::Value, lookup: &dyn Fn(&str) -> Option<String>) -> anyhow::Result<()> {
    match value {
        toml::Value::String(s) => {
            let mut out = String::with_capacity(s.len());
            let mut rest = s.as_str();
            while let Some(i) = rest.find("${") {
                out.push_str(&rest[..i]);
                let tail = &rest[i + 2..];
                let end = tail.find('}').with_context(|| format!("unterminated ${{ in {s:?}"))?;
                let name = &tail[..end];
                let v = lookup(name).with_context(|| format!("environment variable {name} is not set"))?;
                out.push_str(&v);
                rest = &tail[end + 1..];
            }
            out.push_str(rest);
            *s = out;
        }
        toml::Value::Array(items) => {
            for v in items {
                interpolate(v, lookup)?;
            }
        }
        toml::Value::Table(t) => {
            for (_, v) in t.iter_mut() {
                interpolate(v, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str, lookup: &dyn Fn(&str) -> Option<String>) -> anyhow::Result<Self> {
        let mut value: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
        interpolate(&mut value, lookup)?;
        let cfg: RunConfig = value.try_into().context("config does not match the expected schema")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text, &|k| std::env::var(k).ok())
            .with_context(|| format!("in {}", path.display()))?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Resolve relative paths against the config file's directory.
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        fix(&mut p.output_dir);
        fix(&mut p.build_dir);
        fix(&mut p.filtered_dir);
        for o in [&mut p.jobs, &mut p.corpus, &mut p.eval_set, &mut p.checkpoint] {
            if let Some(x) = o.as_mut() {
                fix(x);
            }
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.policy.validate()?;
        if self.episode.temperature <= 0.0 || !self.episode.temperature.is_finite() {
            bail!("episode.temperature must be positive, got {}", self.episode.temperature);
        }
        if self.perturb.grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
            bail!("perturb.grid values must lie in [0, 1]");
        }
        if self.train.groups_per_step == 0 {
            bail!("train.groups_per_step must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration, as canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Fail with a config error unless `path` exists.
pub fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}
