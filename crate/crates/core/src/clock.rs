//! Timestamp source for persisted records.

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

/// Where record timestamps come from.
///
/// Scripted and replay runs use a fixed instant so that run directories are
/// byte-identical across executions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Clock {
    #[default]
    System,
    Fixed(String),
}

impl Clock {
    pub const EPOCH: &'static str = "1970-01-01T00:00:00Z";

    pub fn fixed_epoch() -> Self {
        Clock::Fixed(Self::EPOCH.to_string())
    }

    pub fn now(&self) -> String {
        match self {
            Clock::System => Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
            Clock::Fixed(ts) => ts.clone(),
        }
    }
}
