use std::ops::Sub;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Pipeline phase a provider call is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// One-off explanation generation over the candidate pool.
    Warmup,
    /// Per-test-sample work: query embedding and surrogate prediction.
    Inference,
}

#[derive(Debug, Default)]
struct Counters {
    chat_calls: AtomicU64,
    embed_calls: AtomicU64,
    cached_hits: AtomicU64,
}

impl Counters {
    fn load(&self) -> StageUsage {
        StageUsage {
            chat_calls: self.chat_calls.load(Ordering::SeqCst),
            embed_calls: self.embed_calls.load(Ordering::SeqCst),
            cached_hits: self.cached_hits.load(Ordering::SeqCst),
        }
    }
}

/// Monotone call counters, shared across threads.
#[derive(Debug, Default)]
pub struct UsageMeter {
    warmup: Counters,
    inference: Counters,
}

impl UsageMeter {
    fn stage(&self, stage: Stage) -> &Counters {
        match stage {
            Stage::Warmup => &self.warmup,
            Stage::Inference => &self.inference,
        }
    }

    pub fn record_chat_call(&self, stage: Stage) {
        self.stage(stage).chat_calls.fetch_add(1, Ordering::SeqCst);
    }

    pub fn record_embed_call(&self, stage: Stage) {
        self.stage(stage).embed_calls.fetch_add(1, Ordering::SeqCst);
    }

    pub fn record_cache_hit(&self, stage: Stage) {
        self.stage(stage).cached_hits.fetch_add(1, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> UsageSnapshot {
        UsageSnapshot {
            warmup: self.warmup.load(),
            inference: self.inference.load(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageUsage {
    pub chat_calls: u64,
    pub embed_calls: u64,
    pub cached_hits: u64,
}

impl Sub for StageUsage {
    type Output = StageUsage;

    fn sub(self, rhs: Self) -> Self {
        StageUsage {
            chat_calls: self.chat_calls - rhs.chat_calls,
            embed_calls: self.embed_calls - rhs.embed_calls,
            cached_hits: self.cached_hits - rhs.cached_hits,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageSnapshot {
    pub warmup: StageUsage,
    pub inference: StageUsage,
}

impl UsageSnapshot {
    pub fn chat_calls(&self) -> u64 {
        self.warmup.chat_calls + self.inference.chat_calls
    }

    pub fn embed_calls(&self) -> u64 {
        self.warmup.embed_calls + self.inference.embed_calls
    }

    pub fn cached_hits(&self) -> u64 {
        self.warmup.cached_hits + self.inference.cached_hits
    }
}

/// Usage accrued between two snapshots of the same meter.
impl Sub for UsageSnapshot {
    type Output = UsageSnapshot;

    fn sub(self, rhs: Self) -> Self {
        UsageSnapshot {
            warmup: self.warmup - rhs.warmup,
            inference: self.inference - rhs.inference,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_are_separate() {
        let m = UsageMeter::default();
        m.record_chat_call(Stage::Warmup);
        m.record_chat_call(Stage::Inference);
        m.record_embed_call(Stage::Inference);
        let before = m.snapshot();
        m.record_cache_hit(Stage::Inference);
        let delta = m.snapshot() - before;
        assert_eq!(before.chat_calls(), 2);
        assert_eq!(before.warmup.embed_calls, 0);
        assert_eq!(delta.cached_hits(), 1);
        assert_eq!(delta.chat_calls(), 0);
    }
}
