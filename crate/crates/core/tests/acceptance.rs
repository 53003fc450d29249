//! Acceptance criteria AC1-AC10. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits non-zero if any criterion fails.
//!
//! `cargo test --test acceptance -- AC3 AC7` runs a subset.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use cropthink::backend::scripted::ScriptedBackend;
use cropthink::backend::toy::{CropOracle, ToyPolicy, ToyPolicyConfig, ToyTask, ToyTaskConfig};
use cropthink::backend::{Decoding, PolicyBackend};
use cropthink::prompts;
use cropthink::rewards::{total_reward, JudgeConfig, LENGTH_REWARD_CAP, REGION_VALIDITY_REWARD};
use cropthink::rgrpo::{action_mask, kl_estimate, normalize_advantages, rgrpo_loss, surrogate_loss, ScoredGroup};
use cropthink::rollout::{
    perturbation_sweep, run_episode, train_rgrpo, EpisodeConfig, PerturbKind, RolloutSample, TrainConfig,
};
use cropthink::types::{InjectionMode, SegmentKind, Trajectory};
use cropthink::vision::{zoom_scale, zoomed_dims, WorkingImage};
use cropthink::vlir::fixtures::{reference_corpus, CROPS_PER_IMAGE, FIRST_CROP_SIZES, SOURCES};
use cropthink::vlir::pipeline::{run_build, template_generator, BuildConfig, BuildJob};
use cropthink::vlir::{corpus_stats, CorpusStore, SizeCategory, SourceDataset};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn stable_argsort(xs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    idx
}

fn ac1_advantages() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lattice = [0.0, 0.5, 1.25, 1.5, 2.0, 2.75];
    let (mut zero_groups, mut worst_mean, mut worst_std) = (0, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let m = rng.random_range(2..=8);
        let discrete = rng.random_bool(0.5);
        let r: Vec<f64> = (0..m)
            .map(|_| {
                if discrete {
                    lattice[rng.random_range(0..lattice.len())]
                } else {
                    rng.random_range(0.0..2.75)
                }
            })
            .collect();
        let a = normalize_advantages(&r).map_err(|e| e.to_string())?;
        if r.iter().all(|&x| x == r[0]) {
            zero_groups += 1;
            ensure!(a.iter().all(|&x| x == 0.0), "all-equal rewards {r:?} gave {a:?}");
            continue;
        }
        let n = m as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
        ensure!(mean.abs() <= 1e-9, "mean {mean} for {r:?}");
        ensure!((std - 1.0).abs() <= 1e-9, "std {std} for {r:?}");
        ensure!(stable_argsort(&a) == stable_argsort(&r), "order changed for {r:?}");
    }
    ensure!(normalize_advantages(&[1.0]).is_err(), "a group of one must be rejected");
    Ok(format!(
        "10000 groups, {zero_groups} zero-variance; max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}"
    ))
}

fn ac2_kl() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut min_pos = f64::INFINITY;
    for i in 0..10_000 {
        let lp: f64 = rng.random_range(-50.0..0.0);
        let lr: f64 = if i % 10 == 0 { lp } else { rng.random_range(-50.0..0.0) };
        let k = kl_estimate(lp, lr);
        ensure!(k.is_finite() && k >= 0.0, "k({lp}, {lr}) = {k}");
        if lp == lr {
            ensure!(k == 0.0, "equal inputs gave {k}");
        } else {
            ensure!(k > 0.0, "unequal inputs {lp}, {lr} gave 0");
            min_pos = min_pos.min(k);
        }
    }
    let e = kl_estimate(0.0, 1.0);
    ensure!((e - (std::f64::consts::E - 2.0)).abs() < 1e-9, "x = e gave {e}");
    let h = kl_estimate(0.0, 0.5f64.ln());
    let want = 0.5 + 2f64.ln() - 1.0;
    ensure!((h - want).abs() < 1e-9, "x = 0.5 gave {h}, want {want}");
    Ok(format!("10000 pairs non-negative; k(x=e) = {e:.12}, k(x=0.5) = {h:.12}"))
}

/// Summed action-token log-probabilities of `trajs` under `policy`.
fn masked_logps(policy: &ToyPolicy, sample: &RolloutSample, trajs: &[Trajectory]) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut cur = Vec::new();
    let mut reference = Vec::new();
    for t in trajs {
        let s = policy
            .score_sequence(sample.context(prompts::SYSTEM_INSTRUCTION), t)
            .map_err(|e| e.to_string())?;
        let mask = action_mask(t).map_err(|e| e.to_string())?;
        cur.push(mask.masked_sum(&s.current).map_err(|e| e.to_string())?);
        reference.push(mask.masked_sum(&s.reference).map_err(|e| e.to_string())?);
    }
    Ok((cur, reference))
}

fn random_params(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn ac3_masking_and_gradient() -> Outcome {
    let task = ToyTask::new(ToyTaskConfig::default()).map_err(|e| e.to_string())?;
    let samples = task.generate("fd", 3, 100, false);
    let (mut checked, mut worst, mut shifted) = (0usize, 0.0f64, 0usize);
    for (cfg_i, sample) in samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + cfg_i as u64);
        let mut policy = ToyPolicy::new(
            task.clone(),
            ToyPolicyConfig {
                hidden: rng.random_range(2..8),
                max_think_tokens: rng.random_range(1..4),
                seed: cfg_i as u64,
                ..ToyPolicyConfig::default()
            },
        );
        let n = policy.parameter_count();
        policy.set_params(random_params(&mut rng, n, 0.8)).map_err(|e| e.to_string())?;
        policy.set_reference(Some(random_params(&mut rng, n, 0.8)));
        let beta = if cfg_i % 2 == 0 { 0.0 } else { rng.random_range(0.01..0.5) };
        let m = rng.random_range(2..6);
        let ep = EpisodeConfig::default();
        let trajs: Vec<Trajectory> = (0..m)
            .map(|k| run_episode(&policy, sample, &ep, (cfg_i * 10 + k) as u64))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let mut rewards: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.75)).collect();
        rewards[0] += 0.5;
        let advantages = normalize_advantages(&rewards).map_err(|e| e.to_string())?;

        let (lp0, lr0) = masked_logps(&policy, sample, &trajs)?;
        let group = |lp: Vec<f64>, lr: Vec<f64>| ScoredGroup {
            advantages: advantages.clone(),
            logp_theta: lp,
            logp_ref: Some(lr),
        };
        let base = rgrpo_loss(&group(lp0.clone(), lr0.clone()), beta).map_err(|e| e.to_string())?;

        // Masking: shifting injected-position logits leaves the loss intact.
        if trajs.iter().any(|t| t.injected_count() > 0) {
            shifted += 1;
        }
        for shift in [10.0, -10.0] {
            policy.injected_logit_shift = shift;
            let (lp, lr) = masked_logps(&policy, sample, &trajs)?;
            let l = rgrpo_loss(&group(lp, lr), beta).map_err(|e| e.to_string())?;
            ensure!(
                l.value == base.value,
                "config {cfg_i}: shift {shift} moved the loss from {} to {}",
                base.value,
                l.value
            );
        }
        policy.injected_logit_shift = 0.0;

        // Analytic gradient.
        let mut grad = vec![0.0; n];
        for (t, g) in trajs.iter().zip(&base.grad_logp) {
            let mask = action_mask(t).map_err(|e| e.to_string())?;
            let w: Vec<f64> = mask.0.iter().map(|&k| if k { *g } else { 0.0 }).collect();
            policy
                .accumulate_gradient(sample.context(prompts::SYSTEM_INSTRUCTION), t, &w, &mut grad)
                .map_err(|e| e.to_string())?;
        }

        // Central differences with the detached copy frozen at theta_0.
        let theta0 = policy.params().to_vec();
        let loss_at = |policy: &mut ToyPolicy, theta: Vec<f64>| -> Result<f64, String> {
            policy.set_params(theta).map_err(|e| e.to_string())?;
            let (lp, lr) = masked_logps(policy, sample, &trajs)?;
            Ok(surrogate_loss(&group(lp, lr), &lp0, beta).map_err(|e| e.to_string())?.value)
        };
        let mut coords: Vec<usize> = (0..n).collect();
        coords.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
        let mut pick: Vec<usize> = coords[..4].to_vec();
        pick.extend((0..4).map(|_| rng.random_range(0..n)));
        let h = 1e-5;
        for &c in &pick {
            let mut plus = theta0.clone();
            plus[c] += h;
            let mut minus = theta0.clone();
            minus[c] -= h;
            let fd = (loss_at(&mut policy, plus)? - loss_at(&mut policy, minus)?) / (2.0 * h);
            let scale = grad[c].abs().max(fd.abs());
            let err = (grad[c] - fd).abs();
            if scale > 1e-6 {
                worst = worst.max(err / scale);
            }
            ensure!(
                err <= 1e-4 * scale + 1e-9,
                "config {cfg_i}, parameter {c}: analytic {} vs finite difference {fd}",
                grad[c]
            );
            checked += 1;
        }
        policy.set_params(theta0).map_err(|e| e.to_string())?;
    }
    ensure!(shifted > 0, "no configuration injected a region; the masking check was vacuous");
    Ok(format!(
        "100 configurations ({shifted} with injected regions): loss unchanged under +/-10 shifts; {checked} coordinates, max relative error {worst:.1e}"
    ))
}

fn ac4_zoom() -> Outcome {
    let z = |r: f64| zoom_scale(r).map_err(|e| e.to_string());
    ensure!(z(0.10)? == 2.0, "r = 0.10 gave {}", z(0.10)?);
    ensure!(z(0.50)? == 1.0, "r = 0.50 gave {}", z(0.50)?);
    let eps = 1e-12;
    ensure!((z(0.125)? - z(0.125 - eps)?).abs() < 1e-9, "discontinuous at 0.125");
    ensure!((z(0.5)? - z(0.5 - eps)?).abs() < 1e-9, "discontinuous at 0.5");
    let mut prev = f64::INFINITY;
    for i in 1..=10_000 {
        let r = i as f64 / 10_000.0;
        let s = z(r)?;
        ensure!((1.0..=2.0).contains(&s), "scale {s} at r = {r}");
        ensure!(s <= prev, "increase at r = {r}");
        prev = s;
    }
    ensure!(zoom_scale(0.0).is_err() && zoom_scale(1.5).is_err(), "out-of-domain ratios must be rejected");
    Ok("branch values, continuity, monotonicity and range hold on 10000 points".into())
}

fn solid_image(w: u32, h: u32) -> WorkingImage {
    WorkingImage::from_normalized(RgbImage::from_fn(w, h, |x, y| Rgb([(x * 2) as u8, (y * 3) as u8, 7])))
}

fn sample(id: &str, image: &WorkingImage, answer: &str) -> RolloutSample {
    RolloutSample {
        id: id.into(),
        image: image.clone(),
        question: "What is shown?".into(),
        answer: answer.into(),
    }
}

/// A think block of exactly `chars` code points holding `crops` commands.
fn think_with(chars: usize, crops: &[&str]) -> String {
    let mut body = crops.join(" ");
    assert!(body.chars().count() <= chars);
    while body.chars().count() < chars {
        body.push('a');
    }
    format!("<think>{body}</think><answer>")
}

fn scored(script: String, answer: &str) -> Result<cropthink::types::RewardBreakdown, String> {
    let image = solid_image(100, 100);
    let backend = ScriptedBackend::new(script);
    let mut t = run_episode(&backend, &sample("r", &image, answer), &EpisodeConfig::default(), 0)
        .map_err(|e| e.to_string())?;
    Ok(total_reward(&mut t, answer, &JudgeConfig::default()))
}

fn ac5_rewards() -> Outcome {
    let crop = r#"{"bbox_2d": [10, 10, 60, 60]}"#;
    let crop2 = r#"{"bbox_2d": [0, 0, 30, 30]}"#;
    let crop3 = r#"{"bbox_2d": [50, 50, 99, 99]}"#;

    let best = scored(format!("{}yes</answer>", think_with(300, &[crop])), "yes")?;
    ensure!(best.total == 2.75, "worked total: {best:?}");
    let wrong = scored(format!("{}no</answer>", think_with(100, &[crop])), "yes")?;
    ensure!((wrong.total - 1.6).abs() < 1e-12, "worked total: {wrong:?}");

    for (n, want) in [(100, 0.1), (249, 0.249), (250, LENGTH_REWARD_CAP), (251, LENGTH_REWARD_CAP), (1000, LENGTH_REWARD_CAP)] {
        let r = scored(format!("{}yes</answer>", think_with(n, &[crop])), "yes")?;
        ensure!((r.r_length - want).abs() < 1e-12, "{n} chars gave length reward {}", r.r_length);
    }
    let many = scored(format!("{}yes</answer>", think_with(200, &[crop, crop2, crop3])), "yes")?;
    ensure!(many.r_valid == REGION_VALIDITY_REWARD, "three valid crops gave {}", many.r_valid);
    let none = scored(format!("{}yes</answer>", think_with(50, &[])), "yes")?;
    ensure!(none.r_valid == 0.0, "no crop gave {}", none.r_valid);
    let broken = scored(format!("{crop} yes"), "yes")?;
    ensure!(broken.r_format == 0.0 && broken.r_acc == 0.0, "malformed transcript scored {broken:?}");

    for r in [best, wrong, many, none, broken] {
        ensure!((0.0..=2.75).contains(&r.total), "total {} out of range", r.total);
        ensure!(r.r_acc == 0.0 || r.r_acc == 1.0, "accuracy {}", r.r_acc);
        ensure!(r.r_format == 0.0 || r.r_format == 1.0, "format {}", r.r_format);
        ensure!((0.0..=0.5).contains(&r.r_valid) && (0.0..=0.25).contains(&r.r_length), "{r:?}");
        ensure!(r.total == r.r_acc + r.r_format + r.r_valid + r.r_length, "total is not the sum: {r:?}");
    }
    Ok("worked totals 2.75 and 1.6; caps bind at 250 chars and after the first valid crop".into())
}

fn ac6_pipeline() -> Outcome {
    let image = solid_image(100, 80);
    let cmd = r#"{"bbox_2d": [10, 10, 60, 40]}"#;
    let script = format!("<think>Look. {cmd} Then read it.</think><answer>x</answer>");
    let backend = ScriptedBackend::new(script.clone()).with_feature_len(4);
    let s = sample("p", &image, "x");
    let t = run_episode(&backend, &s, &EpisodeConfig::default(), 0).map_err(|e| e.to_string())?;
    let split = script.find(cmd).unwrap() + cmd.len();
    ensure!(t.segments.len() == 3, "expected text/image/text, got {:?}", t.segments);
    match (&t.segments[0].kind, &t.segments[1].kind, &t.segments[2].kind) {
        (
            SegmentKind::ModelText { char_span: a },
            SegmentKind::InjectedImage { region },
            SegmentKind::ModelText { char_span: b },
        ) => {
            ensure!(*a == (0, split) && *b == (split, script.len()), "text spans {a:?} {b:?}");
            // 50x30 of 100x80: ratio 0.1875, scale 2 - 0.0625/0.375.
            let scale = 2.0 - (0.1875 - 0.125) / 0.375;
            ensure!((region.scale - scale).abs() < 1e-12, "scale {}", region.scale);
            ensure!(
                (region.width, region.height) == zoomed_dims(50, 30, scale) && (region.width, region.height) == (92, 55),
                "zoomed region {}x{}",
                region.width,
                region.height
            );
        }
        other => return Err(format!("segment kinds {other:?}")),
    }
    ensure!(t.segments[1].token_len() == 4, "injected length {}", t.segments[1].token_len());
    t.check_partition().map_err(|e| e.to_string())?;

    // Budget: ten valid commands, eight turns.
    let cmds: Vec<String> = (0..10)
        .map(|i| format!(r#"{{"bbox_2d": [{}, 0, {}, 20]}}"#, i * 9, i * 9 + 9))
        .collect();
    let long = format!("<think>{}</think><answer>x</answer>", cmds.join(" "));
    let cfg = EpisodeConfig {
        max_crop_turns: 8,
        ..EpisodeConfig::default()
    };
    let t = run_episode(&ScriptedBackend::new(long.clone()), &s, &cfg, 0).map_err(|e| e.to_string())?;
    ensure!(t.injected_count() == 8, "{} regions injected under a budget of 8", t.injected_count());
    ensure!(t.flags.crop_budget_hit, "budget flag not set");
    ensure!(t.crop_actions.iter().filter(|a| a.executed).count() == 8, "executed count");

    // Text-only: same text handling, nothing injected.
    let text_cfg = EpisodeConfig {
        injection_mode: InjectionMode::TextOnly,
        ..cfg.clone()
    };
    let backend = ScriptedBackend::new(long).text_only();
    let u = run_episode(&backend, &s, &text_cfg, 0).map_err(|e| e.to_string())?;
    ensure!(u.injected_count() == 0, "text-only run injected {}", u.injected_count());
    ensure!(u.transcript == t.transcript, "transcripts differ between modes");
    ensure!(u.crop_actions == t.crop_actions, "crop actions differ between modes");
    let text_spans = |x: &Trajectory| -> Vec<(usize, usize)> {
        x.segments
            .iter()
            .filter_map(|s| match s.kind {
                SegmentKind::ModelText { char_span } => Some(char_span),
                _ => None,
            })
            .collect()
    };
    ensure!(text_spans(&u) == text_spans(&t), "text segmentation differs between modes");
    ensure!(
        ScriptedBackend::new("x").text_only().capabilities().can_inject_images == false
            && run_episode(&ScriptedBackend::new("x").text_only(), &s, &EpisodeConfig::default(), 0).is_err(),
        "interleaved mode must refuse a backend that cannot inject"
    );
    Ok("segment structure, 92x55 zoomed region, 8-turn budget and text-only equivalence".into())
}

struct ToyRun {
    initial: f64,
    final_acc: f64,
}

fn toy_run(seed: u64, mode: InjectionMode) -> Result<ToyRun, String> {
    let task = ToyTask::new(ToyTaskConfig::default()).map_err(|e| e.to_string())?;
    let train = task.generate("train", 10_000 + seed, 2000, false);
    let eval = task.generate("eval", 20_000, 200, true);
    let mut policy = ToyPolicy::new(
        task,
        ToyPolicyConfig {
            seed,
            ..ToyPolicyConfig::default()
        },
    );
    let ep = EpisodeConfig {
        injection_mode: mode,
        decoding: Decoding::Sample { temperature: 1.0 },
        ..EpisodeConfig::default()
    };
    let cfg = TrainConfig {
        steps: 300,
        seed,
        ..TrainConfig::default()
    };
    let out = train_rgrpo(&mut policy, &train, &eval, &ep, &cfg, &[], |_| {}).map_err(|e| e.to_string())?;
    Ok(ToyRun {
        initial: out.initial_accuracy().unwrap_or(f64::NAN),
        final_acc: out.final_accuracy().unwrap_or(f64::NAN),
    })
}

fn ac7_toy_training() -> Outcome {
    let seeds: Vec<u64> = (0..5).collect();
    let runs: Vec<(u64, InjectionMode)> = seeds
        .iter()
        .flat_map(|&s| [(s, InjectionMode::Interleaved), (s, InjectionMode::TextOnly)])
        .collect();
    let results: Vec<Result<ToyRun, String>> = runs.par_iter().map(|&(s, m)| toy_run(s, m)).collect();
    let mut by_mode: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((_, m), r) in runs.iter().zip(results) {
        let r = r?;
        let e = by_mode.entry(m.to_string()).or_default();
        e.0.push(r.initial);
        e.1.push(r.final_acc);
    }
    let (mut i0, mut i1) = by_mode.remove("interleaved").unwrap();
    let (_, mut t1) = by_mode.remove("text_only").unwrap();
    let finals = i1.clone();
    let (start, end, text_end) = (median(&mut i0), median(&mut i1), median(&mut t1));
    let detail = format!(
        "interleaved median accuracy {start:.3} -> {end:.3} (finals {finals:?}); text-only median final {text_end:.3}"
    );
    ensure!(start <= 0.175, "step-0 median {start:.3} above 0.175; {detail}");
    ensure!(end >= 0.30, "final median {end:.3} below 0.30; {detail}");
    ensure!(end > text_end, "interleaved {end:.3} does not beat text-only {text_end:.3}; {detail}");
    Ok(detail)
}

fn ac8_perturbation() -> Outcome {
    let task = ToyTask::new(ToyTaskConfig::default()).map_err(|e| e.to_string())?;
    let data = task.generate("sweep", 8, 400, true);
    let oracle = CropOracle::new(task);
    let grid = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let cfg = EpisodeConfig {
        decoding: Decoding::Greedy,
        ..EpisodeConfig::default()
    };
    let mut lines = Vec::new();
    for kind in [PerturbKind::ReplaceRandom, PerturbKind::Jitter] {
        let points = perturbation_sweep(&oracle, &data, &cfg, &grid, kind, 5).map_err(|e| e.to_string())?;
        let acc: Vec<f64> = points.iter().map(|p| p.report.accuracy).collect();
        ensure!(acc[5] > acc[0], "{kind:?}: accuracy at 0.9 ({}) not above 0.4 ({})", acc[5], acc[0]);
        for w in acc.windows(2) {
            ensure!(w[1] >= w[0] - 0.02, "{kind:?}: drop beyond tolerance in {acc:?}");
        }
        lines.push(format!("{kind:?} {:?}", acc.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()));
    }
    Ok(lines.join("; "))
}

fn ac9_vlir() -> Outcome {
    let corpus = reference_corpus();
    let stats = corpus_stats(&corpus).map_err(|e| format!("{}: {}", e.sample_id, e.reason))?;
    let hist: BTreeMap<usize, usize> = CROPS_PER_IMAGE.iter().copied().collect();
    ensure!(stats.crops_per_image == hist, "crops per image {:?}", stats.crops_per_image);
    ensure!(
        hist == BTreeMap::from([(1, 11105), (2, 607), (3, 68), (4, 16), (5, 8), (6, 3), (7, 3)]),
        "fixture constants drifted"
    );
    let want_sources = [
        (SourceDataset::GQA, 4057),
        (SourceDataset::TextVQA, 3267),
        (SourceDataset::DocVQA, 1497),
        (SourceDataset::InfographicsVQA, 1497),
        (SourceDataset::VSR, 1492),
    ];
    ensure!(SOURCES == want_sources, "source constants drifted");
    for (s, n) in want_sources {
        ensure!(stats.sources.get(&s) == Some(&n), "{s}: {:?}", stats.sources.get(&s));
    }
    let want_sizes = [
        (SizeCategory::VerySmall, 5280),
        (SizeCategory::Small, 4043),
        (SizeCategory::Medium, 1914),
        (SizeCategory::Large, 573),
    ];
    ensure!(FIRST_CROP_SIZES == want_sizes, "size constants drifted");
    for (c, n) in want_sizes {
        ensure!(stats.size_categories.get(&c) == Some(&n), "{c:?}: {:?}", stats.size_categories.get(&c));
    }
    ensure!(stats.samples == 11_810, "samples {}", stats.samples);

    let judge = JudgeConfig::default();
    for s in &corpus {
        s.validate(&judge).map_err(|e| format!("{}: {}", e.sample_id, e.reason))?;
    }

    let cases = [
        (0.0499, SizeCategory::VerySmall),
        (0.05, SizeCategory::Small),
        (0.2499, SizeCategory::Small),
        (0.25, SizeCategory::Medium),
        (0.4999, SizeCategory::Medium),
        (0.5, SizeCategory::Large),
    ];
    for (r, c) in cases {
        ensure!(SizeCategory::from_ratio(r) == c, "ratio {r} classified as {:?}", SizeCategory::from_ratio(r));
    }

    // A small end-to-end build: every accepted sample re-validates.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut jobs = Vec::new();
    for i in 0..12u32 {
        let name = format!("img{i}.png");
        RgbImage::from_fn(120 + i, 90, |x, y| Rgb([(x + i) as u8, y as u8, 0]))
            .save(dir.path().join(&name))
            .map_err(|e| e.to_string())?;
        jobs.push(BuildJob {
            sample_id: format!("job{i}"),
            image: name.into(),
            source: SourceDataset::ALL[i as usize % 5],
            question: format!("What is in region {i}?"),
            answer: format!("thing {i}"),
            bbox: (i % 2 == 0).then_some([5, 5, 40 + i as i64, 50]),
        });
    }
    let store = CorpusStore::open(dir.path().join("store")).map_err(|e| e.to_string())?;
    let summary = run_build(&store, &jobs, dir.path(), &template_generator(&jobs, false), &BuildConfig::default())
        .map_err(|e| e.to_string())?;
    let built = store.load_corpus().map_err(|e| e.to_string())?;
    ensure!(summary.accepted == 12 && built.len() == 12, "built {summary:?}");
    for s in &built {
        s.validate(&judge).map_err(|e| format!("{}: {}", e.sample_id, e.reason))?;
    }
    Ok(format!(
        "reference fixture counts exact over {} samples / {} crops; {} fixture and {} built samples re-validated",
        stats.samples,
        stats.crops,
        corpus.len(),
        built.len()
    ))
}

fn ac10_golden() -> Outcome {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let pairs = [
        ("system_instruction.txt", prompts::SYSTEM_INSTRUCTION),
        ("construct_from_qa.txt", prompts::CONSTRUCT_FROM_QA),
        ("construct_from_bbox.txt", prompts::CONSTRUCT_FROM_BBOX),
        ("filter_region.txt", prompts::FILTER_REGION),
        ("filter_reasoning.txt", prompts::FILTER_REASONING),
    ];
    let mut bytes = 0;
    for (file, embedded) in pairs {
        let golden = std::fs::read(dir.join(file)).map_err(|e| format!("{file}: {e}"))?;
        ensure!(golden == embedded.as_bytes(), "{file} differs from the embedded prompt");
        bytes += golden.len();
    }
    Ok(format!("5 prompts, {bytes} bytes, byte-identical"))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, Duration, fn() -> Outcome); 10] = [
        ("AC1", "advantage normalization", Duration::from_secs(5), ac1_advantages),
        ("AC2", "KL estimator", Duration::from_secs(1), ac2_kl),
        ("AC3", "injected-token masking and gradient", Duration::from_secs(120), ac3_masking_and_gradient),
        ("AC4", "zoom rule", Duration::from_secs(1), ac4_zoom),
        ("AC5", "reward suite", Duration::from_secs(1), ac5_rewards),
        ("AC6", "pipeline conformance", Duration::from_secs(10), ac6_pipeline),
        ("AC7", "toy training", Duration::from_secs(1800), ac7_toy_training),
        ("AC8", "perturbation trend", Duration::from_secs(300), ac8_perturbation),
        ("AC9", "rationale corpus", Duration::from_secs(30), ac9_vlir),
        ("AC10", "golden prompts", Duration::from_secs(1), ac10_golden),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let over = took > budget;
        match (&result, over) {
            (Ok(detail), false) => println!("{id} PASS {name} ({:.2}s): {detail}", took.as_secs_f64()),
            (Ok(detail), true) => {
                failed += 1;
                println!(
                    "{id} FAIL {name} ({:.2}s, budget {}s): {detail}",
                    took.as_secs_f64(),
                    budget.as_secs()
                );
            }
            (Err(why), _) => {
                failed += 1;
                println!("{id} FAIL {name} ({:.2}s): {why}", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
