use crate::error::{Error, Result};
use crate::model::EmotionLabel;

const ASSET: &str = include_str!("../../assets/emotion_labels.txt");

/// Version tag of the bundled label asset.
pub const LABEL_ASSET_VERSION: u32 = 1;

/// The bundled 32 emotion names, in index order.
pub fn emotion_labels() -> Vec<&'static str> {
    ASSET
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

/// The first `k` bundled labels; `k = 32` is the full set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn full() -> Self {
        Self {
            names: emotion_labels().into_iter().map(str::to_string).collect(),
        }
    }

    pub fn first(k: usize) -> Result<Self> {
        let all = emotion_labels();
        if k < 2 || k > all.len() {
            return Err(Error::Config(format!(
                "num_emotions must be in 2..={}, got {k}",
                all.len()
            )));
        }
        Ok(Self {
            names: all[..k].iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Resolves a label name (case-insensitive).
    pub fn resolve(&self, name: &str) -> Result<EmotionLabel> {
        let wanted = name.trim().to_ascii_lowercase();
        self.names
            .iter()
            .position(|n| *n == wanted)
            .map(|i| EmotionLabel::new(i, self.k()).expect("index within set"))
            .ok_or_else(|| Error::UnknownEmotion {
                label: name.to_string(),
                valid: self.names.join(", "),
            })
    }
}
