//! Stage commands. Each writes its artifacts under the output directory,
//! stamped with the config hash and seed.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use serde::Serialize;

use cropthink::backend::remote::RemoteBackend;
use cropthink::backend::toy::{CropOracle, ToyFixture, ToyPolicy, ToyTask};
use cropthink::backend::{Decoding, PolicyBackend};
use cropthink::chat::{ChatClient, ClientError, EndpointConfig, FnChatClient, HttpChatClient};
use cropthink::rewards::JudgeConfig;
use cropthink::rgrpo::StepMetrics;
use cropthink::rollout::{
    collect_demonstrations, evaluate, perturbation_sweep, train_rgrpo, EpisodeConfig, EvalReport, PerturbKind,
    RolloutError, RolloutSample, SweepPoint, TrainConfig,
};
use cropthink::types::InjectionMode;
use cropthink::vision::{load_image, normalize_pixels_with};
use cropthink::vlir::fixtures::reference_corpus;
use cropthink::vlir::pipeline::{load_jobs, run_build, run_filter, template_generator, BuildConfig};
use cropthink::vlir::store::{load_corpus, write_corpus};
use cropthink::vlir::{corpus_stats, CorpusStore};

use crate::config::{require, BackendKind, FilterKind, GeneratorKind, RunConfig};

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Stage(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration error: {e:#}"),
            Failure::Stage(e) => write!(f, "stage failed: {e:#}"),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn stage_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Stage(e.into())
}

fn rollout_err(e: RolloutError) -> Failure {
    match e {
        RolloutError::Config(_) => Failure::Config(e.into()),
        other => Failure::Stage(other.into()),
    }
}

fn client_err(e: ClientError) -> Failure {
    match e {
        ClientError::MissingCredentials(_) => Failure::Config(e.into()),
        other => Failure::Stage(other.into()),
    }
}

/// Everything a command needs: the effective config and its hash.
pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
    pub command: &'static str,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

impl Run {
    pub fn new(cfg: RunConfig, command: &'static str) -> Self {
        let hash = cfg.hash();
        Run { cfg, hash, command }
    }

    fn out_dir(&self) -> Result<&Path, Failure> {
        let dir = &self.cfg.paths.output_dir;
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))
            .map_err(stage_err)?;
        Ok(dir)
    }

    fn stamp<'a, T: Serialize>(&'a self, body: &'a T) -> Stamped<'a, T> {
        Stamped {
            command: self.command,
            config_hash: &self.hash,
            seed: self.cfg.seed,
            body,
        }
    }

    /// Write `body` as `<output_dir>/<name>` and echo it on stdout.
    fn artifact<T: Serialize>(&self, name: &str, body: &T) -> Result<PathBuf, Failure> {
        let path = self.out_dir()?.join(name);
        let json = serde_json::to_string_pretty(&self.stamp(body)).map_err(stage_err)?;
        std::fs::write(&path, format!("{json}\n"))
            .with_context(|| format!("writing {}", path.display()))
            .map_err(stage_err)?;
        println!("{json}");
        Ok(path)
    }

    fn episode(&self, decoding: Decoding) -> EpisodeConfig {
        let p = &self.cfg.policy;
        EpisodeConfig {
            injection_mode: p.injection_mode,
            max_crop_turns: p.max_crop_turns,
            max_total_tokens: self.cfg.episode.max_total_tokens,
            iou_threshold: p.iou_redundancy_threshold,
            decoding,
            ..EpisodeConfig::default()
        }
    }

    fn toy_task(&self) -> Result<ToyTask, Failure> {
        ToyTask::new(self.cfg.toy.task.clone()).map_err(config_err)
    }

    fn toy_fixture(&self) -> ToyFixture {
        let t = &self.cfg.toy;
        ToyFixture {
            grid: t.task.grid,
            symbols: t.task.symbols,
            cell_px: t.task.cell_px,
            seed: t.fixture_seed,
            train_size: t.train_size,
            eval_size: t.eval_size,
        }
    }

    fn toy_policy(&self) -> Result<ToyPolicy, Failure> {
        match &self.cfg.paths.checkpoint {
            Some(path) => {
                require(path, "checkpoint").map_err(config_err)?;
                ToyPolicy::load(path)
                    .with_context(|| format!("loading checkpoint {}", path.display()))
                    .map_err(config_err)
            }
            None => {
                let mut pc = self.cfg.toy.policy.clone();
                pc.seed = self.cfg.seed;
                Ok(ToyPolicy::new(self.toy_task()?, pc))
            }
        }
    }

    fn http_client(&self, endpoint: &EndpointConfig) -> Result<HttpChatClient, Failure> {
        HttpChatClient::new(endpoint.clone()).map_err(client_err)
    }

    fn backend(&self) -> Result<Box<dyn PolicyBackend>, Failure> {
        Ok(match self.cfg.backend.kind {
            BackendKind::Toy => {
                if self.cfg.paths.checkpoint.is_none() {
                    log::warn!("no checkpoint configured; evaluating an untrained toy policy");
                }
                Box::new(self.toy_policy()?)
            }
            BackendKind::Oracle => Box::new(CropOracle::new(self.toy_task()?)),
            BackendKind::Remote => Box::new(RemoteBackend::new(Arc::new(
                self.http_client(&self.cfg.backend.endpoint)?,
            ))),
        })
    }

    /// The configured evaluation manifest, or the toy split for local
    /// backends.
    fn eval_set(&self) -> Result<Vec<RolloutSample>, Failure> {
        match &self.cfg.paths.eval_set {
            Some(path) => load_eval_manifest(path, &self.cfg),
            None if self.cfg.backend.kind == BackendKind::Remote => Err(config_err(anyhow!(
                "a remote backend needs paths.eval_set (a JSONL manifest of image/question/answer lines)"
            ))),
            None => Ok(self.toy_task()?.splits(&self.toy_fixture()).1),
        }
    }
}

fn load_eval_manifest(path: &Path, cfg: &RunConfig) -> Result<Vec<RolloutSample>, Failure> {
    require(path, "evaluation manifest").map_err(config_err)?;
    let jobs = load_jobs(path).map_err(config_err)?;
    let base = path.parent().unwrap_or(Path::new("."));
    jobs.into_iter()
        .map(|j| {
            let img_path = if j.image.is_absolute() { j.image.clone() } else { base.join(&j.image) };
            let raw = load_image(&img_path).map_err(|e| stage_err(anyhow!("{}: {e}", img_path.display())))?;
            let image = normalize_pixels_with(&raw, cfg.policy.min_pixels, cfg.policy.max_pixels).map_err(stage_err)?;
            Ok(RolloutSample {
                id: j.sample_id,
                image,
                question: j.question,
                answer: j.answer,
            })
        })
        .collect()
}

pub fn build_data(run: &Run) -> CmdResult {
    let cfg = &run.cfg;
    let jobs_path = cfg
        .paths
        .jobs
        .as_ref()
        .ok_or_else(|| config_err(anyhow!("paths.jobs (the build manifest) is not set")))?;
    require(jobs_path, "build manifest").map_err(config_err)?;
    let jobs = load_jobs(jobs_path).map_err(config_err)?;
    let generator: Box<dyn ChatClient> = match cfg.generator.kind {
        GeneratorKind::Template => Box::new(template_generator(&jobs, false)),
        GeneratorKind::TemplateWrong => Box::new(template_generator(&jobs, true)),
        GeneratorKind::Remote => Box::new(run.http_client(&cfg.generator.endpoint)?),
    };
    let defaults = BuildConfig::default();
    let build_cfg = BuildConfig {
        attempts: cfg.generator.attempts.unwrap_or(defaults.attempts),
        batch: cfg.generator.batch.unwrap_or(defaults.batch),
        judge: JudgeConfig::default(),
    };
    let store = CorpusStore::open(&cfg.paths.build_dir).map_err(stage_err)?;
    let base = jobs_path.parent().unwrap_or(Path::new("."));
    let summary = run_build(&store, &jobs, base, generator.as_ref(), &build_cfg).map_err(stage_err)?;

    #[derive(Serialize)]
    struct Report<'a> {
        corpus: PathBuf,
        generator: String,
        summary: &'a cropthink::vlir::pipeline::BuildSummary,
    }
    let failures = summary.failures.len();
    run.artifact(
        "build_summary.json",
        &Report {
            corpus: store.path(CorpusStore::CORPUS),
            generator: generator.id(),
            summary: &summary,
        },
    )?;
    if failures > 0 {
        return Err(stage_err(anyhow!("{failures} job(s) failed and were parked for retry")));
    }
    Ok(())
}

fn accept_all() -> FnChatClient<impl Fn(&[cropthink::chat::ChatMessage]) -> Result<String, ClientError> + Send + Sync> {
    FnChatClient::new("accept-all", |_: &[cropthink::chat::ChatMessage]| Ok("Yes".to_string()))
}

pub fn filter_data(run: &Run) -> CmdResult {
    let cfg = &run.cfg;
    let input_path = cfg.paths.build_dir.join(CorpusStore::CORPUS);
    require(&input_path, "unfiltered corpus").map_err(config_err)?;
    let images = CorpusStore::open(&cfg.paths.build_dir).map_err(stage_err)?;
    let input = images.load_corpus().map_err(stage_err)?;
    let out = CorpusStore::open(&cfg.paths.filtered_dir).map_err(stage_err)?;
    let (region, reasoning): (Box<dyn ChatClient>, Box<dyn ChatClient>) = match cfg.filters.kind {
        FilterKind::AcceptAll => (Box::new(accept_all()), Box::new(accept_all())),
        FilterKind::Remote => (
            Box::new(run.http_client(&cfg.filters.region)?),
            Box::new(run.http_client(&cfg.filters.reasoning)?),
        ),
    };
    let summary = run_filter(
        &input,
        &images,
        &out,
        region.as_ref(),
        reasoning.as_ref(),
        &cfg.filters.retry,
        cfg.filters.batch.unwrap_or(8),
    )
    .map_err(stage_err)?;

    #[derive(Serialize)]
    struct Report<'a> {
        corpus: PathBuf,
        summary: &'a cropthink::vlir::pipeline::FilterSummary,
    }
    run.artifact(
        "filter_summary.json",
        &Report {
            corpus: out.path(CorpusStore::CORPUS),
            summary: &summary,
        },
    )?;
    if summary.parked > 0 {
        return Err(stage_err(anyhow!(
            "{} sample(s) parked in {}; rerun to retry them",
            summary.parked,
            out.path(CorpusStore::RETRY).display()
        )));
    }
    Ok(())
}

fn ablation_label(cfg: &RunConfig) -> Option<String> {
    let mut tags = Vec::new();
    if cfg.policy.injection_mode == InjectionMode::TextOnly {
        tags.push("text_only");
    }
    if cfg.train.skip_sft {
        tags.push("no_sft");
    }
    if cfg.train.skip_rgrpo {
        tags.push("no_rgrpo");
    }
    (!tags.is_empty()).then(|| tags.join("+"))
}

/// Mean reward over the first and last tenth of the run.
#[derive(Debug, Serialize)]
struct Trend {
    early_mean_reward: f64,
    late_mean_reward: f64,
    improved: bool,
}

fn trend(metrics: &[StepMetrics]) -> Option<Trend> {
    if metrics.is_empty() {
        return None;
    }
    let w = (metrics.len() / 10).max(1);
    let mean = |s: &[StepMetrics]| s.iter().map(|m| m.mean_reward).sum::<f64>() / s.len() as f64;
    let early = mean(&metrics[..w]);
    let late = mean(&metrics[metrics.len() - w..]);
    Some(Trend {
        early_mean_reward: early,
        late_mean_reward: late,
        improved: late > early,
    })
}

pub fn train(run: &Run) -> CmdResult {
    let cfg = &run.cfg;
    if cfg.backend.kind != BackendKind::Toy {
        return Err(config_err(anyhow!(
            "train needs a trainable backend; backend.kind = {:?} is inference-only",
            cfg.backend.kind
        )));
    }
    let label = ablation_label(cfg);
    if cfg.train.skip_sft && cfg.train.skip_rgrpo {
        eprintln!("notice: both --skip-sft and --skip-rgrpo are set; nothing to train");
        #[derive(Serialize)]
        struct Noop {
            noop: bool,
            label: Option<String>,
        }
        run.artifact("train_summary.json", &Noop { noop: true, label })?;
        return Ok(());
    }

    let task = run.toy_task()?;
    let (train_set, eval_set) = task.splits(&run.toy_fixture());
    let mut policy = run.toy_policy()?;
    let rollout_cfg = run.episode(Decoding::Sample {
        temperature: cfg.episode.temperature,
    });

    let demos = if cfg.train.skip_sft {
        Vec::new()
    } else {
        let oracle = CropOracle::new(task.clone()).with_think_budget(policy.config().max_think_tokens);
        let pool = &train_set[..cfg.toy.demos.min(train_set.len())];
        let demos = collect_demonstrations(&oracle, pool, &rollout_cfg).map_err(rollout_err)?;
        log::info!("collected {} demonstrations", demos.len());
        demos
    };
    let demo_refs: Vec<_> = demos.iter().map(|(s, t)| (*s, t)).collect();
    let train_cfg = TrainConfig {
        steps: if cfg.train.skip_rgrpo { 0 } else { cfg.train.steps },
        groups_per_step: cfg.train.groups_per_step,
        group_size: cfg.policy.group_size,
        beta: cfg.policy.beta,
        seed: cfg.seed,
        eval_every: cfg.train.eval_every,
        sft_steps: if cfg.train.skip_sft { 0 } else { cfg.train.sft_steps },
        label: label.clone(),
    };

    let out = run.out_dir()?;
    let metrics_path = out.join("metrics.jsonl");
    let metrics_file = File::create(&metrics_path).map_err(stage_err)?;
    let writer = RefCell::new(BufWriter::new(metrics_file));
    let write_error: RefCell<Option<std::io::Error>> = RefCell::new(None);
    let outcome = train_rgrpo(&mut policy, &train_set, &eval_set, &rollout_cfg, &train_cfg, &demo_refs, |m| {
        let mut w = writer.borrow_mut();
        let line = serde_json::to_string(&run.stamp(m)).expect("metrics serialize");
        if let Err(e) = writeln!(w, "{line}") {
            write_error.borrow_mut().get_or_insert(e);
        }
        if m.step % 10 == 0 {
            log::info!("step {}: mean reward {:.4}, accuracy {:.3}", m.step, m.mean_reward, m.mean_r_acc);
        }
    })
    .map_err(rollout_err)?;
    writer.borrow_mut().flush().map_err(stage_err)?;
    if let Some(e) = write_error.take() {
        return Err(stage_err(e));
    }
    let ckpt = out.join("checkpoint.json");
    policy.save(&ckpt).map_err(stage_err)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        label: Option<String>,
        injection_mode: InjectionMode,
        sft_steps: usize,
        demonstrations: usize,
        rgrpo_steps: usize,
        initial_accuracy: Option<f64>,
        final_accuracy: Option<f64>,
        trend: Option<Trend>,
        evals: &'a [(usize, EvalReport)],
        checkpoint: PathBuf,
        metrics: PathBuf,
    }
    run.artifact(
        "train_summary.json",
        &Summary {
            label,
            injection_mode: cfg.policy.injection_mode,
            sft_steps: train_cfg.sft_steps,
            demonstrations: demos.len(),
            rgrpo_steps: train_cfg.steps,
            initial_accuracy: outcome.initial_accuracy(),
            final_accuracy: outcome.final_accuracy(),
            trend: trend(&outcome.metrics),
            evals: &outcome.evals,
            checkpoint: ckpt,
            metrics: metrics_path,
        },
    )?;
    Ok(())
}

pub fn eval(run: &Run) -> CmdResult {
    let backend = run.backend()?;
    let data = run.eval_set()?;
    let report = evaluate(backend.as_ref(), &data, &run.episode(Decoding::Greedy)).map_err(rollout_err)?;
    #[derive(Serialize)]
    struct Report<'a> {
        backend: String,
        injection_mode: InjectionMode,
        report: &'a EvalReport,
    }
    run.artifact(
        "eval_report.json",
        &Report {
            backend: backend.name(),
            injection_mode: run.cfg.policy.injection_mode,
            report: &report,
        },
    )?;
    Ok(())
}

pub fn perturb(run: &Run) -> CmdResult {
    let cfg = &run.cfg;
    if cfg.perturb.grid.is_empty() {
        return Err(config_err(anyhow!("the perturbation grid is empty")));
    }
    let backend = run.backend()?;
    let data = run.eval_set()?;
    let points = perturbation_sweep(
        backend.as_ref(),
        &data,
        &run.episode(Decoding::Greedy),
        &cfg.perturb.grid,
        cfg.perturb.kind,
        cfg.seed,
    )
    .map_err(rollout_err)?;
    for p in &points {
        eprintln!("p = {:.2}: accuracy {:.3}", p.grounding_accuracy, p.report.accuracy);
    }
    #[derive(Serialize)]
    struct Report<'a> {
        backend: String,
        kind: PerturbKind,
        points: &'a [SweepPoint],
        non_decreasing: bool,
    }
    let non_decreasing = points
        .windows(2)
        .all(|w| w[1].report.accuracy >= w[0].report.accuracy);
    run.artifact(
        "perturb_sweep.json",
        &Report {
            backend: backend.name(),
            kind: cfg.perturb.kind,
            points: &points,
            non_decreasing,
        },
    )?;
    Ok(())
}

pub fn stats(run: &Run, reference_fixture: bool) -> CmdResult {
    let (source, corpus) = if reference_fixture {
        ("reference-fixture".to_string(), reference_corpus())
    } else {
        let path = run
            .cfg
            .paths
            .corpus
            .clone()
            .unwrap_or_else(|| run.cfg.paths.filtered_dir.join(CorpusStore::CORPUS));
        require(&path, "corpus").map_err(config_err)?;
        (path.display().to_string(), load_corpus(&path).map_err(stage_err)?)
    };
    let stats = corpus_stats(&corpus).map_err(|e| stage_err(anyhow!("{}: {}", e.sample_id, e.reason)))?;
    #[derive(Serialize)]
    struct Report<'a> {
        corpus: String,
        stats: &'a cropthink::vlir::CorpusStats,
    }
    run.artifact("stats.json", &Report { corpus: source, stats: &stats })?;
    Ok(())
}

pub fn fixtures(run: &Run, corpus_out: Option<&Path>) -> CmdResult {
    run.toy_task()?;
    let fixture = run.toy_fixture();
    run.artifact("toy_fixture.json", &fixture)?;
    if let Some(path) = corpus_out {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(stage_err)?;
        }
        write_corpus(path, &reference_corpus()).map_err(stage_err)?;
        eprintln!("wrote the reference fixture corpus to {}", path.display());
    }
    Ok(())
}
