use super::ModelError;

/// Known task prompts, in embedding-row order.
pub const PROMPTS: [&str; 3] = [
    "The task is to predict the 3D occupancy of the current scene",
    "The task is to detect the dynamic objects of the next frame",
    "The task is to segment the static map layout of the current scene",
];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskPrompt {
    pub text: String,
    pub token: usize,
}

/// Lowercase, single-spaced, without surrounding whitespace or a final period.
pub fn normalize(text: &str) -> String {
    let joined = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    joined.trim_end_matches('.').trim_end().to_string()
}

impl TaskPrompt {
    pub fn new(text: &str) -> Result<Self, ModelError> {
        let text = normalize(text);
        PROMPTS
            .iter()
            .position(|p| normalize(p) == text)
            .map(|token| Self { text: text.clone(), token })
            .ok_or(ModelError::UnknownPrompt(text))
    }

    pub fn occupancy() -> Self {
        Self::new(PROMPTS[0]).unwrap()
    }

    pub fn detect_dynamic() -> Self {
        Self::new(PROMPTS[1]).unwrap()
    }

    pub fn map_static() -> Self {
        Self::new(PROMPTS[2]).unwrap()
    }

    pub fn vocabulary() -> usize {
        PROMPTS.len()
    }
}
