use std::fmt;

use serde::{Deserialize, Serialize};

use super::vocab::tokenize;
use crate::error::{Error, Result};

/// The closed 13-way topical taxonomy used for knowledge pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CategoryLabel {
    GeneralReference,
    CultureAndTheArts,
    GeographyAndPlaces,
    HealthAndFitness,
    HistoryAndEvents,
    HumanActivities,
    MathematicsAndLogic,
    NaturalAndPhysicalSciences,
    PeopleAndSelf,
    PhilosophyAndThinking,
    ReligionAndBeliefSystems,
    SocietyAndSocialSciences,
    TechnologyAndAppliedSciences,
}

impl CategoryLabel {
    pub const COUNT: usize = 13;

    pub const ALL: [CategoryLabel; 13] = [
        Self::GeneralReference,
        Self::CultureAndTheArts,
        Self::GeographyAndPlaces,
        Self::HealthAndFitness,
        Self::HistoryAndEvents,
        Self::HumanActivities,
        Self::MathematicsAndLogic,
        Self::NaturalAndPhysicalSciences,
        Self::PeopleAndSelf,
        Self::PhilosophyAndThinking,
        Self::ReligionAndBeliefSystems,
        Self::SocietyAndSocialSciences,
        Self::TechnologyAndAppliedSciences,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GeneralReference => "General reference",
            Self::CultureAndTheArts => "Culture and the arts",
            Self::GeographyAndPlaces => "Geography and places",
            Self::HealthAndFitness => "Health and fitness",
            Self::HistoryAndEvents => "History and events",
            Self::HumanActivities => "Human activities",
            Self::MathematicsAndLogic => "Mathematics and logic",
            Self::NaturalAndPhysicalSciences => "Natural and physical sciences",
            Self::PeopleAndSelf => "People and self",
            Self::PhilosophyAndThinking => "Philosophy and thinking",
            Self::ReligionAndBeliefSystems => "Religion and belief systems",
            Self::SocietyAndSocialSciences => "Society and social sciences",
            Self::TechnologyAndAppliedSciences => "Technology and applied sciences",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Parses the exact category name.
    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::UnknownCategory {
                got: name.to_string(),
                allowed: Self::ALL.map(Self::name).join("; "),
            })
    }

    /// Lowercased word tokens of the category name.
    pub fn phrase_tokens(self) -> Vec<String> {
        tokenize(self.name())
    }
}

impl fmt::Display for CategoryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for CategoryLabel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<CategoryLabel> for String {
    fn from(c: CategoryLabel) -> Self {
        c.name().to_string()
    }
}

/// A text tagged with its source's category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryExample {
    pub text: String,
    pub category: CategoryLabel,
}
