//! Inference-only backend driving a hosted chat model.
//!
//! Each generation call streams an assistant turn and stops as soon as
//! the caller's predicate fires. Injected regions become a new user turn
//! carrying the zoomed crop, so the next call resumes after the evidence.

use std::sync::Arc;

use crate::backend::{
    BackendError, Capabilities, Decoding, EpisodeContext, Generation, PolicyBackend, PolicySession, StopPredicate,
};
use crate::chat::{ChatClient, ChatMessage, ClientError, EndpointConfig, HttpChatClient};
use crate::vision::{encode_png, RegionEvidence};

/// Side length of one visual token for the injected-token estimate.
pub const DEFAULT_IMAGE_PATCH: u32 = 28;

impl From<ClientError> for BackendError {
    fn from(e: ClientError) -> Self {
        BackendError::Failure(e.to_string())
    }
}

pub struct RemoteBackend {
    client: Arc<dyn ChatClient>,
    image_patch: u32,
}

impl RemoteBackend {
    pub fn new(client: Arc<dyn ChatClient>) -> Self {
        RemoteBackend {
            client,
            image_patch: DEFAULT_IMAGE_PATCH,
        }
    }

    pub fn from_config(config: EndpointConfig) -> Result<Self, BackendError> {
        Ok(Self::new(Arc::new(HttpChatClient::new(config)?)))
    }

    pub fn with_image_patch(mut self, patch: u32) -> Self {
        self.image_patch = patch.max(1);
        self
    }

    /// Visual tokens a region of `w x h` pixels is assumed to occupy.
    pub fn image_tokens(&self, width: u32, height: u32) -> usize {
        (width.div_ceil(self.image_patch) * height.div_ceil(self.image_patch)) as usize
    }
}

struct RemoteSession<'a> {
    backend: &'a RemoteBackend,
    messages: Vec<ChatMessage>,
    /// Assistant text generated since the last injected region.
    pending: String,
}

impl RemoteSession<'_> {
    fn request(&self) -> Vec<ChatMessage> {
        let mut msgs = self.messages.clone();
        if !self.pending.is_empty() {
            msgs.push(ChatMessage::text("assistant", self.pending.clone()));
        }
        msgs
    }
}

impl PolicySession for RemoteSession<'_> {
    fn generate_until(&mut self, stop: &StopPredicate<'_>, max_tokens: usize) -> Result<Generation, BackendError> {
        let out = self
            .backend
            .client
            .complete_streaming(&self.request(), &|t: &str| stop(t), max_tokens)?;
        self.pending.push_str(&out.text);
        Ok(Generation {
            text: out.text,
            token_count: out.chunks,
            logprobs: None,
            finished: out.finished && !out.stopped,
        })
    }

    fn inject_image(&mut self, evidence: &RegionEvidence) -> Result<usize, BackendError> {
        let pixels = evidence
            .image()
            .ok_or_else(|| BackendError::InvalidInput("region evidence without pixels".into()))?;
        let png = encode_png(pixels).map_err(|e| BackendError::Failure(e.to_string()))?;
        if !self.pending.is_empty() {
            self.messages
                .push(ChatMessage::text("assistant", std::mem::take(&mut self.pending)));
        }
        self.messages.push(ChatMessage::with_image("user", png, ""));
        Ok(self.backend.image_tokens(evidence.width, evidence.height))
    }
}

impl PolicyBackend for RemoteBackend {
    fn name(&self) -> String {
        format!("remote:{}", self.client.id())
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            can_train: false,
            can_inject_images: true,
            concurrent_safe: true,
        }
    }

    fn start_episode<'a>(
        &'a self,
        ctx: EpisodeContext<'a>,
        _seed: u64,
        _decoding: Decoding,
    ) -> Result<Box<dyn PolicySession + 'a>, BackendError> {
        let png = encode_png(&ctx.image.pixels).map_err(|e| BackendError::Failure(e.to_string()))?;
        Ok(Box::new(RemoteSession {
            backend: self,
            messages: vec![
                ChatMessage::text("system", ctx.system_prompt),
                ChatMessage::with_image("user", png, ctx.question),
            ],
            pending: String::new(),
        }))
    }
}
