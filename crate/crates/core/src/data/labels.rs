use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Downstream classification task; each gets its own head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sentiment,
    Emotion,
    Desire,
}

pub const SENTIMENT_LABELS: [&str; 3] = ["positive", "neutral", "negative"];
pub const EMOTION_LABELS: [&str; 6] = ["happiness", "sad", "neutral", "disgust", "anger", "fear"];
pub const DESIRE_LABELS: [&str; 7] =
    ["vengeance", "curiosity", "social-contact", "family", "tranquility", "romance", "none"];

impl Task {
    pub const ALL: [Task; 3] = [Task::Sentiment, Task::Emotion, Task::Desire];

    pub fn name(self) -> &'static str {
        match self {
            Task::Sentiment => "sentiment",
            Task::Emotion => "emotion",
            Task::Desire => "desire",
        }
    }

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Task::Sentiment => &SENTIMENT_LABELS,
            Task::Emotion => &EMOTION_LABELS,
            Task::Desire => &DESIRE_LABELS,
        }
    }

    pub fn num_classes(self) -> usize {
        self.labels().len()
    }

    /// Case-insensitive lookup of a label name.
    pub fn label_index(self, label: &str) -> Option<usize> {
        let l = label.trim().to_lowercase();
        self.labels().iter().position(|&x| x == l)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task {s:?}; expected one of sentiment, emotion, desire"))
    }
}

/// Label indices for all three tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Labels {
    pub sentiment: usize,
    pub emotion: usize,
    pub desire: usize,
}

impl Labels {
    pub fn get(&self, task: Task) -> usize {
        match task {
            Task::Sentiment => self.sentiment,
            Task::Emotion => self.emotion,
            Task::Desire => self.desire,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_counts() {
        assert_eq!(Task::Sentiment.num_classes(), 3);
        assert_eq!(Task::Emotion.num_classes(), 6);
        assert_eq!(Task::Desire.num_classes(), 7);
    }

    #[test]
    fn lookup() {
        assert_eq!(Task::Desire.label_index("Social-Contact"), Some(2));
        assert_eq!(Task::Emotion.label_index("joy"), None);
        assert_eq!("desire".parse::<Task>(), Ok(Task::Desire));
        assert!("mood".parse::<Task>().is_err());
    }
}
