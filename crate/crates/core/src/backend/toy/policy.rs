//! Trainable toy policy.
//!
//! A one-hidden-layer sequence model. At each position the input is the
//! previous token and a visual context vector (global per-cell features
//! plus the fine features of the most recently injected region):
//!
//! ```text
//! h = tanh(E[prev] + U v + b_h)
//! z = W h + b + D v  (+ P . g_c for the crop token of cell c)
//! log p(t) = z_t - logsumexp(z over the grammar's legal set)
//! ```
//!
//! `g_c` holds cell c's own global features, so the two weights in `P`
//! are shared by every crop token: a location embedding tying each box
//! to what the global view shows at that place.
//!
//! Gradients are written out by hand. Injected region positions are
//! scored over the feature slots only, so text-token probabilities never
//! depend on feature-slot logits.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::{ToyTask, ToyTaskConfig, FEATURE_LEN};
use super::vocab::{Grammar, Phase, ToyVocab};
use crate::backend::{
    BackendError, Capabilities, Decoding, EpisodeContext, Generation, PolicyBackend, PolicySession, SequenceScores,
    StopPredicate,
};
use crate::types::{SegmentKind, Trajectory};
use crate::vision::RegionEvidence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyPolicyConfig {
    pub hidden: usize,
    pub max_think_tokens: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Standard deviation of the input-side initial weights; the output
    /// side starts at zero so the initial policy is uniform.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ToyPolicyConfig {
    fn default() -> Self {
        ToyPolicyConfig {
            hidden: 16,
            max_think_tokens: 2,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init_scale: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    hidden: usize,
    dv: usize,
    e: usize,
    u: usize,
    bh: usize,
    w: usize,
    b: usize,
    d: usize,
    p: usize,
    total: usize,
}

impl Layout {
    fn new(vocab: usize, hidden: usize, dv: usize) -> Self {
        let e = 0;
        let u = e + (vocab + 1) * hidden;
        let bh = u + hidden * dv;
        let w = bh + hidden;
        let b = w + vocab * hidden;
        let d = b + vocab;
        let p = d + vocab * dv;
        let total = p + 2;
        Layout {
            hidden,
            dv,
            e,
            u,
            bh,
            w,
            b,
            d,
            p,
            total,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyCheckpoint {
    pub task: ToyTaskConfig,
    pub policy: ToyPolicyConfig,
    pub version: u64,
    pub params: Vec<f64>,
    pub reference: Option<Vec<f64>>,
}

/// The trainable toy backend.
#[derive(Debug, Clone)]
pub struct ToyPolicy {
    task: ToyTask,
    vocab: ToyVocab,
    grammar: Grammar,
    config: ToyPolicyConfig,
    layout: Layout,
    params: Vec<f64>,
    reference: Option<Vec<f64>>,
    adam: AdamState,
    version: u64,
    /// Added to the target logit at every injected position. Only
    /// injected-token log-probabilities move when this changes.
    pub injected_logit_shift: f64,
}

/// Decoder state shared by generation and re-scoring.
#[derive(Debug, Clone)]
struct DecodeState {
    phase: Phase,
    prev: usize,
    context: Vec<f64>,
}

struct Position<'a> {
    prev: usize,
    context: &'a [f64],
    legal: &'a [usize],
    target: usize,
    injected: bool,
}

impl ToyPolicy {
    pub fn new(task: ToyTask, config: ToyPolicyConfig) -> Self {
        let vocab = ToyVocab::new(&task);
        let grammar = Grammar::new(&vocab, config.max_think_tokens);
        let dv = 2 * task.cells() + FEATURE_LEN + 1;
        let layout = Layout::new(vocab.size(), config.hidden, dv);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // Uniform on [-a, a] with a = sqrt(3) * init_scale has standard
        // deviation init_scale.
        let a = 3f64.sqrt() * config.init_scale;
        let mut params = vec![0.0; layout.total];
        for p in &mut params[layout.e..layout.bh] {
            *p = if a > 0.0 { rng.random_range(-a..a) } else { 0.0 };
        }
        ToyPolicy {
            adam: AdamState {
                m: vec![0.0; layout.total],
                v: vec![0.0; layout.total],
                t: 0,
            },
            task,
            vocab,
            grammar,
            config,
            layout,
            params,
            reference: None,
            version: 0,
            injected_logit_shift: 0.0,
        }
    }

    pub fn task(&self) -> &ToyTask {
        &self.task
    }

    pub fn vocab(&self) -> &ToyVocab {
        &self.vocab
    }

    pub fn config(&self) -> &ToyPolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<(), BackendError> {
        if params.len() != self.layout.total {
            return Err(BackendError::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn reference_params(&self) -> Option<&[f64]> {
        self.reference.as_deref()
    }

    pub fn set_reference(&mut self, reference: Option<Vec<f64>>) {
        self.reference = reference;
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn checkpoint(&self) -> ToyCheckpoint {
        ToyCheckpoint {
            task: self.task.config().clone(),
            policy: self.config.clone(),
            version: self.version,
            params: self.params.clone(),
            reference: self.reference.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: ToyCheckpoint) -> Result<Self, BackendError> {
        let task = ToyTask::new(ckpt.task).map_err(|e| BackendError::InvalidInput(e.to_string()))?;
        let mut policy = ToyPolicy::new(task, ckpt.policy);
        policy.set_params(ckpt.params)?;
        policy.reference = ckpt.reference;
        policy.version = ckpt.version;
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.checkpoint())?)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let ckpt: ToyCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        ToyPolicy::from_checkpoint(ckpt).map_err(std::io::Error::other)
    }

    fn initial_state(&self, ctx: &EpisodeContext<'_>) -> DecodeState {
        let cells = self.task.cells();
        let mut context = vec![0.0; self.layout.dv];
        let global = self.task.global_features(&ctx.image.pixels);
        context[..2 * cells].copy_from_slice(&global);
        DecodeState {
            phase: Phase::Start,
            prev: self.vocab.bos(),
            context,
        }
    }

    fn load_region(&self, state: &mut DecodeState, features: &[f64; FEATURE_LEN]) {
        let off = 2 * self.task.cells();
        state.context[off..off + FEATURE_LEN].copy_from_slice(features);
        state.context[off + FEATURE_LEN] = 1.0;
    }

    fn crop_cell(&self, token: usize) -> Option<usize> {
        let crops = self.vocab.crops();
        crops.contains(&token).then(|| token - crops.start)
    }

    /// Hidden activations and legal-set logits at one position.
    fn forward(&self, params: &[f64], pos: &Position<'_>) -> (Vec<f64>, Vec<f64>) {
        let l = &self.layout;
        let v = pos.context;
        let mut h = vec![0.0; l.hidden];
        for (k, hk) in h.iter_mut().enumerate() {
            let mut a = params[l.e + pos.prev * l.hidden + k] + params[l.bh + k];
            let row = &params[l.u + k * l.dv..l.u + (k + 1) * l.dv];
            a += row.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
            *hk = a.tanh();
        }
        let z = pos
            .legal
            .iter()
            .map(|&j| {
                let wj = &params[l.w + j * l.hidden..l.w + (j + 1) * l.hidden];
                let dj = &params[l.d + j * l.dv..l.d + (j + 1) * l.dv];
                let mut zj = params[l.b + j];
                zj += wj.iter().zip(&h).map(|(x, y)| x * y).sum::<f64>();
                zj += dj.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
                if let Some(c) = self.crop_cell(j) {
                    zj += params[l.p] * v[c] + params[l.p + 1] * v[self.task.cells() + c];
                }
                if pos.injected && j == pos.target {
                    zj += self.injected_logit_shift;
                }
                zj
            })
            .collect();
        (h, z)
    }

    fn log_softmax(z: &[f64]) -> Vec<f64> {
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        z.iter().map(|x| x - lse).collect()
    }

    fn target_logprob(&self, params: &[f64], pos: &Position<'_>) -> Result<f64, BackendError> {
        let idx = pos
            .legal
            .iter()
            .position(|&j| j == pos.target)
            .ok_or_else(|| BackendError::Alignment(format!("token {:?} is not legal here", self.vocab.text(pos.target))))?;
        if pos.legal.len() == 1 {
            return Ok(0.0);
        }
        let (_, z) = self.forward(params, pos);
        Ok(Self::log_softmax(&z)[idx])
    }

    /// Add `weight * grad log p(target)` into `grad`.
    fn backward(&self, params: &[f64], pos: &Position<'_>, weight: f64, grad: &mut [f64]) {
        if pos.legal.len() == 1 || weight == 0.0 {
            return;
        }
        let l = &self.layout;
        let v = pos.context;
        let (h, z) = self.forward(params, pos);
        let logp = Self::log_softmax(&z);
        let mut dh = vec![0.0; l.hidden];
        for (i, &j) in pos.legal.iter().enumerate() {
            let indicator = if j == pos.target { 1.0 } else { 0.0 };
            let dz = weight * (indicator - logp[i].exp());
            if dz == 0.0 {
                continue;
            }
            grad[l.b + j] += dz;
            for k in 0..l.hidden {
                grad[l.w + j * l.hidden + k] += dz * h[k];
                dh[k] += dz * params[l.w + j * l.hidden + k];
            }
            for (m, vm) in v.iter().enumerate() {
                grad[l.d + j * l.dv + m] += dz * vm;
            }
            if let Some(c) = self.crop_cell(j) {
                grad[l.p] += dz * v[c];
                grad[l.p + 1] += dz * v[self.task.cells() + c];
            }
        }
        for k in 0..l.hidden {
            let da = dh[k] * (1.0 - h[k] * h[k]);
            if da == 0.0 {
                continue;
            }
            grad[l.e + pos.prev * l.hidden + k] += da;
            grad[l.bh + k] += da;
            for (m, vm) in v.iter().enumerate() {
                grad[l.u + k * l.dv + m] += da * vm;
            }
        }
    }

    /// Walk a finished trajectory position by position.
    fn replay(
        &self,
        ctx: &EpisodeContext<'_>,
        trajectory: &Trajectory,
        mut visit: impl FnMut(usize, &Position<'_>) -> Result<(), BackendError>,
    ) -> Result<(), BackendError> {
        let mut state = self.initial_state(ctx);
        let mut t = 0;
        for seg in &trajectory.segments {
            match &seg.kind {
                SegmentKind::ModelText { char_span } => {
                    let text = trajectory
                        .transcript
                        .get(char_span.0..char_span.1)
                        .ok_or_else(|| BackendError::Alignment("text span outside transcript".into()))?;
                    let ids = self.vocab.tokenize(text)?;
                    if ids.len() != seg.token_len() {
                        return Err(BackendError::Alignment(format!(
                            "segment retokenizes to {} tokens, recorded {}",
                            ids.len(),
                            seg.token_len()
                        )));
                    }
                    for id in ids {
                        let legal = self.grammar.legal(state.phase);
                        visit(
                            t,
                            &Position {
                                prev: state.prev,
                                context: &state.context,
                                legal,
                                target: id,
                                injected: false,
                            },
                        )?;
                        state.phase = self.grammar.advance(state.phase, id);
                        state.prev = id;
                        t += 1;
                    }
                }
                SegmentKind::InjectedImage { region } => {
                    let evidence = RegionEvidence::extract(ctx.image, &region.bbox)
                        .map_err(|e| BackendError::Alignment(e.to_string()))?;
                    if (evidence.width, evidence.height) != (region.width, region.height) {
                        return Err(BackendError::Alignment(format!(
                            "region re-renders at {}x{}, recorded {}x{}",
                            evidence.width, evidence.height, region.width, region.height
                        )));
                    }
                    if seg.token_len() != FEATURE_LEN {
                        return Err(BackendError::Alignment(format!(
                            "injected segment of {} tokens, expected {FEATURE_LEN}",
                            seg.token_len()
                        )));
                    }
                    let features = self.task.fine_features(evidence.image().expect("extracted evidence has pixels"));
                    self.load_region(&mut state, &features);
                    for j in 0..FEATURE_LEN {
                        let target = self.vocab.feature_id(j);
                        visit(
                            t,
                            &Position {
                                prev: state.prev,
                                context: &state.context,
                                legal: self.grammar.feature_positions(),
                                target,
                                injected: true,
                            },
                        )?;
                        state.prev = target;
                        t += 1;
                    }
                }
            }
        }
        Ok(())
    }

    fn score_with(&self, params: &[f64], ctx: &EpisodeContext<'_>, trajectory: &Trajectory) -> Result<Vec<f64>, BackendError> {
        let mut out = Vec::with_capacity(trajectory.token_count());
        self.replay(ctx, trajectory, |_, pos| {
            out.push(self.target_logprob(params, pos)?);
            Ok(())
        })?;
        Ok(out)
    }
}

struct ToySession<'a> {
    policy: &'a ToyPolicy,
    state: DecodeState,
    rng: ChaCha8Rng,
    decoding: Decoding,
}

impl ToySession<'_> {
    fn choose(&mut self, z: &[f64]) -> usize {
        match self.decoding {
            Decoding::Greedy => {
                let mut best = 0;
                for (i, &zi) in z.iter().enumerate() {
                    if zi > z[best] {
                        best = i;
                    }
                }
                best
            }
            Decoding::Sample { temperature } => {
                let scaled: Vec<f64> = z.iter().map(|x| x / temperature.max(1e-6)).collect();
                let probs: Vec<f64> = ToyPolicy::log_softmax(&scaled).into_iter().map(f64::exp).collect();
                let u: f64 = self.rng.random();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
                probs.len() - 1
            }
        }
    }
}

impl PolicySession for ToySession<'_> {
    fn generate_until(&mut self, stop: &StopPredicate<'_>, max_tokens: usize) -> Result<Generation, BackendError> {
        let policy = self.policy;
        let mut out = Generation::default();
        let mut logprobs = Vec::new();
        while out.token_count < max_tokens && self.state.phase != Phase::Done {
            let legal = policy.grammar.legal(self.state.phase);
            let (idx, lp) = if legal.len() == 1 {
                (0, 0.0)
            } else {
                let pos = Position {
                    prev: self.state.prev,
                    context: &self.state.context,
                    legal,
                    target: usize::MAX,
                    injected: false,
                };
                let (_, z) = policy.forward(&policy.params, &pos);
                let idx = self.choose(&z);
                (idx, ToyPolicy::log_softmax(&z)[idx])
            };
            let token = legal[idx];
            out.text.push_str(policy.vocab.text(token));
            out.token_count += 1;
            logprobs.push(lp);
            self.state.phase = policy.grammar.advance(self.state.phase, token);
            self.state.prev = token;
            if stop(&out.text) {
                break;
            }
        }
        out.finished = self.state.phase == Phase::Done;
        out.logprobs = Some(logprobs);
        Ok(out)
    }

    fn inject_image(&mut self, evidence: &RegionEvidence) -> Result<usize, BackendError> {
        let pixels = evidence
            .image()
            .ok_or_else(|| BackendError::InvalidInput("region evidence without pixels".into()))?;
        let features = self.policy.task.fine_features(pixels);
        self.policy.load_region(&mut self.state, &features);
        self.state.prev = self.policy.vocab.feature_id(FEATURE_LEN - 1);
        Ok(FEATURE_LEN)
    }
}

impl PolicyBackend for ToyPolicy {
    fn name(&self) -> String {
        "toy".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            can_train: true,
            can_inject_images: true,
            concurrent_safe: true,
        }
    }

    fn start_episode<'a>(
        &'a self,
        ctx: EpisodeContext<'a>,
        seed: u64,
        decoding: Decoding,
    ) -> Result<Box<dyn PolicySession + 'a>, BackendError> {
        Ok(Box::new(ToySession {
            policy: self,
            state: self.initial_state(&ctx),
            rng: ChaCha8Rng::seed_from_u64(seed),
            decoding,
        }))
    }

    fn score_sequence(&self, ctx: EpisodeContext<'_>, trajectory: &Trajectory) -> Result<SequenceScores, BackendError> {
        let current = self.score_with(&self.params, &ctx, trajectory)?;
        let reference = match &self.reference {
            Some(r) => self.score_with(r, &ctx, trajectory)?,
            None => current.clone(),
        };
        Ok(SequenceScores { current, reference })
    }

    fn accumulate_gradient(
        &self,
        ctx: EpisodeContext<'_>,
        trajectory: &Trajectory,
        token_weights: &[f64],
        grad: &mut [f64],
    ) -> Result<(), BackendError> {
        if grad.len() != self.layout.total {
            return Err(BackendError::InvalidInput(format!(
                "gradient buffer of {} for {} parameters",
                grad.len(),
                self.layout.total
            )));
        }
        if token_weights.len() != trajectory.token_count() {
            return Err(BackendError::InvalidInput(format!(
                "{} weights for {} tokens",
                token_weights.len(),
                trajectory.token_count()
            )));
        }
        self.replay(&ctx, trajectory, |t, pos| {
            self.backward(&self.params, pos, token_weights[t], grad);
            Ok(())
        })
    }

    fn parameter_count(&self) -> usize {
        self.layout.total
    }

    /// One Adam step on `grad` (a loss gradient). An all-zero gradient
    /// leaves parameters and moments untouched.
    fn apply_update(&mut self, grad: &[f64]) -> Result<u64, BackendError> {
        if grad.len() != self.layout.total {
            return Err(BackendError::InvalidInput(format!(
                "gradient of {} for {} parameters",
                grad.len(),
                self.layout.total
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(BackendError::NonFiniteGradient);
        }
        self.version += 1;
        if grad.iter().all(|&g| g == 0.0) || self.config.learning_rate == 0.0 {
            return Ok(self.version);
        }
        let c = &self.config;
        let a = &mut self.adam;
        a.t += 1;
        let bc1 = 1.0 - c.adam_beta1.powi(a.t as i32);
        let bc2 = 1.0 - c.adam_beta2.powi(a.t as i32);
        for i in 0..grad.len() {
            a.m[i] = c.adam_beta1 * a.m[i] + (1.0 - c.adam_beta1) * grad[i];
            a.v[i] = c.adam_beta2 * a.v[i] + (1.0 - c.adam_beta2) * grad[i] * grad[i];
            let mhat = a.m[i] / bc1;
            let vhat = a.v[i] / bc2;
            self.params[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.adam_eps);
        }
        Ok(self.version)
    }

    fn snapshot_reference(&mut self) -> Result<(), BackendError> {
        self.reference = Some(self.params.clone());
        Ok(())
    }

    fn version(&self) -> u64 {
        self.version
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::task::ToyTaskConfig;

    fn policy() -> ToyPolicy {
        ToyPolicy::new(ToyTask::new(ToyTaskConfig::default()).unwrap(), ToyPolicyConfig::default())
    }

    #[test]
    fn initial_policy_is_uniform_over_legal_tokens() {
        let p = policy();
        let sample = &p.task().generate("s", 0, 1, true)[0];
        let ctx = EpisodeContext {
            system_prompt: "",
            image: &sample.image,
            question: &sample.question,
        };
        let mut session = p.start_episode(ctx, 0, Decoding::default()).unwrap();
        let g = session.generate_until(&|_| false, 2).unwrap();
        let lps = g.logprobs.unwrap();
        assert_eq!(lps[0], 0.0);
        let n_legal = p.grammar.legal(Phase::Think(0)).len() as f64;
        assert!((lps[1] + n_legal.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_and_lr_zero_updates_keep_params() {
        let mut p = policy();
        let before = p.params().to_vec();
        let v0 = p.version();
        p.apply_update(&vec![0.0; p.parameter_count()]).unwrap();
        assert_eq!(p.params(), &before[..]);
        assert_eq!(p.version(), v0 + 1);
        p.set_learning_rate(0.0);
        p.apply_update(&vec![1.0; p.parameter_count()]).unwrap();
        assert_eq!(p.params(), &before[..]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = policy();
        let mut g = vec![0.0; p.parameter_count()];
        g[3] = f64::NAN;
        assert_eq!(p.apply_update(&g), Err(BackendError::NonFiniteGradient));
    }

    #[test]
    fn identical_steps_are_deterministic() {
        let mut a = policy();
        let mut b = policy();
        let g: Vec<f64> = (0..a.parameter_count()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        a.apply_update(&g).unwrap();
        b.apply_update(&g).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = policy();
        p.snapshot_reference().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        p.save(&path).unwrap();
        let q = ToyPolicy::load(&path).unwrap();
        assert_eq!(p.params(), q.params());
        assert_eq!(p.reference_params(), q.reference_params());
    }
}
