use image::{Rgb, RgbImage};

use cropthink::backend::scripted::ScriptedBackend;
use cropthink::backend::toy::{CropOracle, ToyPolicy, ToyPolicyConfig, ToyTask, ToyTaskConfig};
use cropthink::backend::{Decoding, PolicyBackend};
use cropthink::prompts::SYSTEM_INSTRUCTION;
use cropthink::rgrpo::action_mask;
use cropthink::rollout::{
    collect_demonstrations, evaluate, run_episode, run_group, sft_step, train_step, write_trajectories,
    EpisodeConfig, RolloutError, RolloutSample, SampledGroup,
};
use cropthink::types::{InjectionMode, SegmentKind};
use cropthink::vision::WorkingImage;

fn blank(id: &str, answer: &str) -> RolloutSample {
    RolloutSample {
        id: id.into(),
        image: WorkingImage::from_normalized(RgbImage::from_pixel(100, 100, Rgb([200, 10, 10]))),
        question: "q".into(),
        answer: answer.into(),
    }
}

fn toy() -> (ToyTask, ToyPolicy) {
    let task = ToyTask::new(ToyTaskConfig::default()).unwrap();
    let policy = ToyPolicy::new(task.clone(), ToyPolicyConfig::default());
    (task, policy)
}

#[test]
fn commands_outside_think_are_not_executed() {
    let script = r#"{"bbox_2d": [0, 0, 50, 50]} <think>fine {"bbox_2d": [0, 0, 40, 40]}</think><answer>a</answer>"#;
    let t = run_episode(&ScriptedBackend::new(script), &blank("o", "a"), &EpisodeConfig::default(), 0).unwrap();
    assert_eq!(t.crop_actions.len(), 2);
    assert!(!t.crop_actions[0].in_think && !t.crop_actions[0].valid && !t.crop_actions[0].executed);
    assert!(t.crop_actions[1].in_think && t.crop_actions[1].valid && t.crop_actions[1].executed);
    assert_eq!(t.injected_count(), 1);
    t.check_partition().unwrap();
}

#[test]
fn redundant_and_degenerate_crops_are_flagged() {
    let script = r#"<think>{"bbox_2d": [0, 0, 50, 50]} {"bbox_2d": [0, 0, 50, 51]} {"bbox_2d": [30, 30, 30, 60]}</think><answer>a</answer>"#;
    let t = run_episode(&ScriptedBackend::new(script), &blank("r", "a"), &EpisodeConfig::default(), 0).unwrap();
    let a = &t.crop_actions;
    assert_eq!(a.len(), 3);
    assert!(a[0].valid && !a[0].redundant);
    assert!(a[1].valid && a[1].redundant && a[1].executed);
    assert!(a[2].bbox.is_none() && !a[2].valid && !a[2].executed);
    assert_eq!(t.injected_count(), t.executed_valid_crops());
}

#[test]
fn token_budget_ends_the_episode() {
    let cfg = EpisodeConfig {
        max_total_tokens: 20,
        ..EpisodeConfig::default()
    };
    let t = run_episode(&ScriptedBackend::new("<think>".to_string() + &"x".repeat(100)), &blank("b", "a"), &cfg, 0).unwrap();
    assert!(t.flags.token_budget_hit && !t.flags.finished);
    assert_eq!(t.token_count(), 20);
    assert!(!t.format_ok);
}

#[test]
fn trajectory_log_is_line_json() {
    let t = run_episode(&ScriptedBackend::new("<think>a</think><answer>a</answer>"), &blank("l", "a"), &EpisodeConfig::default(), 3).unwrap();
    let mut buf = Vec::new();
    write_trajectories(&mut buf, &[t.clone(), t], Some(&[0.5, -0.5])).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["question_id"], "l");
    assert_eq!(lines[0]["seed"], 3);
    assert_eq!(lines[1]["advantage"], -0.5);
    assert_eq!(lines[0]["segments"][0]["kind"], "model_text");
}

#[test]
fn groups_use_distinct_seeds_and_attach_advantages() {
    let scripts = vec![
        "<think>long reasoning here</think><answer>a</answer>".to_string(),
        "<think>x</think><answer>b</answer>".to_string(),
        "no format".to_string(),
    ];
    let backend = ScriptedBackend::per_seed(scripts);
    let out = run_group(&backend, &blank("g", "a"), 6, &EpisodeConfig::default(), 11).unwrap();
    let batch = out.batch.unwrap();
    assert_eq!(batch.len(), 6);
    let mut seeds: Vec<u64> = batch.trajectories.iter().map(|t| t.seed).collect();
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds.len(), 6);
    let adv = batch.advantages.unwrap();
    assert!(adv.iter().sum::<f64>().abs() < 1e-9);
    assert!(matches!(
        run_group(&backend, &blank("g", "a"), 1, &EpisodeConfig::default(), 0),
        Err(RolloutError::Config(_))
    ));
}

#[test]
fn toy_generation_logprobs_match_rescoring() {
    let (task, policy) = toy();
    let samples = task.generate("c", 4, 20, false);
    for mode in [InjectionMode::Interleaved, InjectionMode::TextOnly] {
        let cfg = EpisodeConfig {
            injection_mode: mode,
            ..EpisodeConfig::default()
        };
        for (i, s) in samples.iter().enumerate() {
            let t = run_episode(&policy, s, &cfg, i as u64).unwrap();
            t.check_partition().unwrap();
            let gen = t.token_logprobs.clone().unwrap();
            let scores = policy.score_sequence(s.context(SYSTEM_INSTRUCTION), &t).unwrap();
            assert_eq!(scores.current.len(), t.token_count());
            let mask = action_mask(&t).unwrap();
            let rescored: Vec<f64> = scores
                .current
                .iter()
                .zip(&mask.0)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .collect();
            assert_eq!(rescored.len(), gen.len());
            for (a, b) in gen.iter().zip(&rescored) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn toy_episodes_are_reproducible_by_seed() {
    let (task, policy) = toy();
    let s = &task.generate("d", 5, 1, false)[0];
    let cfg = EpisodeConfig::default();
    let a = run_episode(&policy, s, &cfg, 42).unwrap();
    let b = run_episode(&policy, s, &cfg, 42).unwrap();
    assert_eq!(a, b);
    let differs = (0..20).any(|k| run_episode(&policy, s, &cfg, k).unwrap().transcript != a.transcript);
    assert!(differs, "sampling ignores the seed");
}

#[test]
fn oracle_reads_every_cell_and_fails_without_zoom() {
    let task = ToyTask::new(ToyTaskConfig::default()).unwrap();
    let data = task.generate("o", 6, 64, true);
    let oracle = CropOracle::new(task);
    let greedy = EpisodeConfig {
        decoding: Decoding::Greedy,
        ..EpisodeConfig::default()
    };
    assert_eq!(evaluate(&oracle, &data, &greedy).unwrap().accuracy, 1.0);
    let blind = EpisodeConfig {
        injection_mode: InjectionMode::TextOnly,
        ..greedy.clone()
    };
    assert!(evaluate(&oracle, &data, &blind).unwrap().accuracy < 0.5);
    assert!(matches!(evaluate(&oracle, &[], &greedy), Err(RolloutError::Config(_))));
}

#[test]
fn injected_segments_follow_crop_commands() {
    let task = ToyTask::new(ToyTaskConfig::default()).unwrap();
    let s = &task.generate("i", 7, 1, false)[0];
    let oracle = CropOracle::new(task.clone());
    let t = run_episode(&oracle, s, &EpisodeConfig::default(), 0).unwrap();
    for (i, seg) in t.segments.iter().enumerate() {
        if let SegmentKind::InjectedImage { region } = &seg.kind {
            let before = t.segment_text(&t.segments[i - 1]).unwrap();
            assert!(before.trim_end().ends_with('}'), "{before:?}");
            assert_eq!(region.bbox, task.cell_bbox(task.highlighted_cell(&s.image.pixels)));
        }
    }
    assert_eq!(t.injected_count(), 1);
}

#[test]
fn training_steps_move_the_policy() {
    let (task, mut policy) = toy();
    let train = task.generate("t", 8, 16, false);
    let cfg = EpisodeConfig::default();

    let oracle = CropOracle::new(task.clone()).with_think_budget(policy.config().max_think_tokens);
    let demos = collect_demonstrations(&oracle, &train, &cfg).unwrap();
    assert_eq!(demos.len(), train.len());
    let refs: Vec<_> = demos.iter().map(|(s, t)| (*s, t)).collect();
    let before = policy.params().to_vec();
    let l0 = sft_step(&mut policy, &refs, &cfg).unwrap();
    let l1 = sft_step(&mut policy, &refs, &cfg).unwrap();
    assert!(l1 < l0, "{l1} !< {l0}");
    assert_ne!(policy.params(), &before[..]);

    let groups: Vec<SampledGroup> = train[..4]
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            run_group(&policy, s, 5, &cfg, i as u64)
                .unwrap()
                .batch
                .map(|batch| SampledGroup { sample: s, batch })
        })
        .collect();
    let v = policy.version();
    let m = train_step(&mut policy, &groups, &cfg, 0.04, 0).unwrap();
    assert!(m.loss.is_finite());
    assert_eq!(m.groups, groups.len());
    assert!(m.param_version >= v && m.param_version == policy.version());

    let mut scripted = ScriptedBackend::new("x");
    assert!(train_step(&mut scripted, &groups, &cfg, 0.0, 0).is_err());
}
