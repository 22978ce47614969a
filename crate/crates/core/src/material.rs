use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Presentation material of an impression. `live` denotes a bona fide finger;
/// every other label is a spoof material.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MaterialLabel(String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MaterialError {
    #[error("material label is empty")]
    Empty,
    #[error("material label {0:?} contains characters outside [a-z0-9_]")]
    InvalidChars(String),
    #[error("material {0:?} is not in the configured vocabulary")]
    NotInVocabulary(String),
}

impl MaterialLabel {
    pub const LIVE: &'static str = "live";

    /// Normalizes to trimmed lowercase, mapping spaces and dashes to `_`.
    pub fn new(name: &str) -> Result<Self, MaterialError> {
        let norm: String = name
            .trim()
            .chars()
            .map(|c| match c {
                ' ' | '-' => '_',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        if norm.is_empty() {
            return Err(MaterialError::Empty);
        }
        if !norm.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
            return Err(MaterialError::InvalidChars(name.to_string()));
        }
        Ok(Self(norm))
    }

    pub fn live() -> Self {
        Self(Self::LIVE.to_string())
    }

    pub fn is_live(&self) -> bool {
        self.0 == Self::LIVE
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MaterialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for MaterialLabel {
    type Err = MaterialError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl Serialize for MaterialLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for MaterialLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::new(&s).map_err(serde::de::Error::custom)
    }
}

/// The set of material labels a deployment accepts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaterialVocabulary(Vec<MaterialLabel>);

impl Default for MaterialVocabulary {
    fn default() -> Self {
        let names = [
            "live",
            "ecoflex",
            "body_double",
            "gelatine",
            "playdoh",
            "oomoo",
            "latex",
            "wood_glue",
            "paper",
            "transparency",
            "tattoo",
        ];
        Self(names.iter().map(|n| MaterialLabel::new(n).unwrap()).collect())
    }
}

impl MaterialVocabulary {
    pub fn new(labels: Vec<MaterialLabel>) -> Self {
        Self(labels)
    }

    pub fn contains(&self, label: &MaterialLabel) -> bool {
        self.0.contains(label)
    }

    pub fn check(&self, label: &MaterialLabel) -> Result<(), MaterialError> {
        if self.contains(label) {
            Ok(())
        } else {
            Err(MaterialError::NotInVocabulary(label.to_string()))
        }
    }

    pub fn labels(&self) -> &[MaterialLabel] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_lowercase_normalized() {
        assert_eq!(MaterialLabel::new(" Body Double ").unwrap().as_str(), "body_double");
        assert_eq!(MaterialLabel::new("PlayDoh").unwrap().as_str(), "playdoh");
        assert!(MaterialLabel::new("LIVE").unwrap().is_live());
    }

    #[test]
    fn empty_and_odd_labels_are_rejected() {
        assert_eq!(MaterialLabel::new("  "), Err(MaterialError::Empty));
        assert!(matches!(MaterialLabel::new("a/b"), Err(MaterialError::InvalidChars(_))));
    }

    #[test]
    fn vocabulary_membership() {
        let vocab = MaterialVocabulary::default();
        assert!(vocab.check(&MaterialLabel::new("ecoflex").unwrap()).is_ok());
        assert!(vocab.check(&MaterialLabel::new("unobtainium").unwrap()).is_err());
    }
}
