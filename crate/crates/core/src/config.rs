//! The one JSON config file shared by every subcommand.
//!
//! ```json
//! { "federation": { ... }, "simulation": { ... } }
//! ```
//!
//! `simulation` is only needed by `simulate`. Unknown keys are rejected, and
//! every error names a line of the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::server::FederationConfig;
use crate::simulator::{SimScenario, SimSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub federation: FederationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimSettings>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses and validates `text`; `origin` prefixes error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let file: ConfigFile = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            // serde_json appends " at line L column C"; move it to the front.
            let msg = match msg.rfind(" at line ") {
                Some(i) => msg[..i].to_string(),
                None => msg,
            };
            Error::Config(format!("{origin}:{}:{}: {msg}", e.line(), e.column()))
        })?;
        let checked = match &file.simulation {
            Some(sim) => SimScenario::new(file.federation.clone(), sim.clone()).map(drop),
            None => file.federation.validate(),
        };
        checked.map_err(|e| anchor(e, text, origin))?;
        Ok(file)
    }

    pub fn scenario(&self) -> Result<SimScenario> {
        let sim =
            self.simulation.clone().ok_or_else(|| Error::Config("the config has no \"simulation\" section".into()))?;
        SimScenario::new(self.federation.clone(), sim)
    }
}

/// Prefixes a validation error with the line of the first key it mentions.
fn anchor(e: Error, text: &str, origin: &str) -> Error {
    let Error::Config(msg) = e else { return e };
    let line = msg
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .find_map(|w| key_line(text, w));
    match line {
        Some(l) => Error::Config(format!("{origin}:{l}: {msg}")),
        None => Error::Config(format!("{origin}: {msg}")),
    }
}

fn key_line(text: &str, key: &str) -> Option<usize> {
    let quoted = format!("\"{key}\"");
    text.lines()
        .position(|l| l.find(&quoted).is_some_and(|i| l[i + quoted.len()..].trim_start().starts_with(':')))
        .map(|i| i + 1)
}
