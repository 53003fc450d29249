//! Interleaved crop-and-zoom visual reasoning.
//!
//! A policy reasons in text and, when it needs a closer look, emits a
//! `{"bbox_2d": [x1, y1, x2, y2]}` command. The rollout engine intercepts
//! the command, crops and zooms that region of the image, injects it back
//! into the context and lets the policy continue. Training uses
//! group-relative advantages with the injected region tokens masked out
//! of the gradient.
//!
//! Modules:
//! - [`types`]: shared domain types (boxes, crop actions, segments,
//!   trajectories, reward breakdowns).
//! - [`toolcall`]: tag and command parsing, redundancy checks.
//! - [`vision`]: pixel bounds, cropping, the area-dependent zoom rule.
//! - [`rewards`]: accuracy, format, region validity and length rewards.
//! - [`rgrpo`]: advantages, masked surrogate loss, KL estimate.
//! - [`backend`]: policy interface, a trainable toy policy, a scripted
//!   backend and a hosted-model client.
//! - [`rollout`]: the episode loop, groups, training, evaluation and the
//!   grounding perturbation harness.
//! - [`vlir`]: rationale corpus construction, filters and statistics.

pub mod backend;
pub mod chat;
pub mod prompts;
pub mod rewards;
pub mod rgrpo;
pub mod rollout;
pub mod toolcall;
pub mod types;
pub mod vision;
pub mod vlir;
