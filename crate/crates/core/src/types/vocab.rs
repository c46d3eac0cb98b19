use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::FORMAT_VERSION;

/// Index of a category inside a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub u32);

impl CategoryId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for CategoryId {
    fn from(i: usize) -> Self {
        CategoryId(i as u32)
    }
}

#[derive(Debug, Error)]
pub enum VocabularyError {
    #[error("vocabulary is empty")]
    Empty,
    #[error("category name at position {0} is blank")]
    Blank(usize),
    #[error("duplicate category name {name:?} (positions {first} and {second})")]
    Duplicate { name: String, first: usize, second: usize },
    #[error("unsupported vocabulary format_version {0}")]
    Version(u32),
    #[error("reading vocabulary: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing vocabulary: {0}")]
    Json(#[from] serde_json::Error),
}

/// Lowercases and collapses whitespace, hyphens and underscores to single spaces.
pub fn normalize_name(name: &str) -> String {
    name.split(|c: char| c.is_whitespace() || c == '-' || c == '_')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Ordered set of category names; ids are positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
    lookup: HashMap<String, CategoryId>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    format_version: u32,
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new<I, S>(names: I) -> Result<Self, VocabularyError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(VocabularyError::Empty);
        }
        let mut lookup = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            let key = normalize_name(name);
            if key.is_empty() {
                return Err(VocabularyError::Blank(i));
            }
            if let Some(prev) = lookup.insert(key, CategoryId::from(i)) {
                return Err(VocabularyError::Duplicate {
                    name: name.clone(),
                    first: prev.index(),
                    second: i,
                });
            }
        }
        Ok(Vocabulary { names, lookup })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: CategoryId) -> Option<&str> {
        self.names.get(id.index()).map(String::as_str)
    }

    pub fn contains(&self, id: CategoryId) -> bool {
        id.index() < self.names.len()
    }

    /// Looks a name up after normalization.
    pub fn id_of(&self, name: &str) -> Option<CategoryId> {
        self.lookup.get(&normalize_name(name)).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = CategoryId> + '_ {
        (0..self.names.len()).map(CategoryId::from)
    }

    pub fn to_json(&self) -> String {
        let file = VocabularyFile {
            format_version: FORMAT_VERSION,
            names: self.names.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("vocabulary serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, VocabularyError> {
        let file: VocabularyFile = serde_json::from_str(s)?;
        if file.format_version != FORMAT_VERSION {
            return Err(VocabularyError::Version(file.format_version));
        }
        Vocabulary::new(file.names)
    }

    pub fn load(path: &Path) -> Result<Self, VocabularyError> {
        Vocabulary::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabularyError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_follow_position() {
        let v = Vocabulary::new(["cat", "dog", "school bus"]).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id_of("Dog"), Some(CategoryId(1)));
        assert_eq!(v.id_of("school_bus"), Some(CategoryId(2)));
        assert_eq!(v.name(CategoryId(0)), Some("cat"));
        assert_eq!(v.name(CategoryId(3)), None);
    }

    #[test]
    fn rejects_duplicates_after_normalization() {
        let err = Vocabulary::new(["Traffic Light", "traffic   light"]).unwrap_err();
        assert!(matches!(err, VocabularyError::Duplicate { first: 0, second: 1, .. }));
        assert!(matches!(Vocabulary::new(Vec::<String>::new()), Err(VocabularyError::Empty)));
        assert!(matches!(Vocabulary::new(["a", "  "]), Err(VocabularyError::Blank(1))));
    }

    #[test]
    fn json_roundtrip() {
        let v = Vocabulary::new(["cat", "dog"]).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
        assert!(v.to_json().contains("\"format_version\": 1"));
    }
}
