use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index into the vocabulary. The value `vocab.len()` is the ignore sentinel.
pub type ClassId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

/// Category names partitioned into annotated base classes and novel classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    base_ids: BTreeSet<ClassId>,
    novel_ids: BTreeSet<ClassId>,
}

impl ClassVocabulary {
    pub fn new(classes: &[(&str, Split)]) -> Result<Self> {
        let owned: Vec<(String, Split)> = classes
            .iter()
            .map(|(n, s)| (n.to_string(), *s))
            .collect();
        Self::from_owned(owned)
    }

    pub fn from_owned(classes: Vec<(String, Split)>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::config("vocabulary is empty"));
        }
        let mut names = Vec::with_capacity(classes.len());
        let mut base_ids = BTreeSet::new();
        let mut novel_ids = BTreeSet::new();
        for (id, (name, split)) in classes.into_iter().enumerate() {
            if names.contains(&name) {
                return Err(Error::config(format!("duplicate class name '{name}'")));
            }
            names.push(name);
            match split {
                Split::Base => base_ids.insert(id),
                Split::Novel => novel_ids.insert(id),
            };
        }
        Ok(Self {
            names,
            base_ids,
            novel_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ignore(&self) -> ClassId {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ClassId) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn base_ids(&self) -> &BTreeSet<ClassId> {
        &self.base_ids
    }

    pub fn novel_ids(&self) -> &BTreeSet<ClassId> {
        &self.novel_ids
    }

    pub fn is_base(&self, id: ClassId) -> bool {
        self.base_ids.contains(&id)
    }

    pub fn is_novel(&self, id: ClassId) -> bool {
        self.novel_ids.contains(&id)
    }

    pub fn split(&self, id: ClassId) -> Split {
        if self.is_base(id) {
            Split::Base
        } else {
            Split::Novel
        }
    }
}
