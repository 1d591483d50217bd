//! Instruction-mixture data: synthetic sources, formatting, mixing and on-disk datasets.

pub mod corpus;
pub mod dataset;
pub mod mixture;

use serde::{Deserialize, Serialize};

pub use corpus::{
    generate_synthetic_corpus, held_out_captions, held_out_edits, held_out_renders, held_out_vqa, invert_captions, Corpus, CorpusSpec, EditTriple, ImageStore,
    Scene, Shape,
};
pub use dataset::{read_corpus, read_dataset, validate_record, write_corpus, write_dataset, DatasetFiles, Manifest};
pub use mixture::{
    build_mixture, filter_and_truncate, format_record, largest_remainder, record_id, InstructionDataset,
    MixtureConfig, REFERENCE_RATIOS,
};

use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    NaturalLanguage,
    Editing,
    Generation,
    Understanding,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::NaturalLanguage, Family::Editing, Family::Generation, Family::Understanding];

    pub fn name(self) -> &'static str {
        match self {
            Family::NaturalLanguage => "natural_language",
            Family::Editing => "editing",
            Family::Generation => "generation",
            Family::Understanding => "understanding",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn task(self) -> Task {
        match self {
            Family::NaturalLanguage => Task::TextOnly,
            Family::Editing => Task::Edit,
            Family::Generation => Task::T2i,
            Family::Understanding => Task::I2t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    I2t,
    T2i,
    Edit,
    TextOnly,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::I2t, Task::T2i, Task::Edit, Task::TextOnly];

    pub fn name(self) -> &'static str {
        match self {
            Task::I2t => "i2t",
            Task::T2i => "t2i",
            Task::Edit => "edit",
            Task::TextOnly => "text_only",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn family(self) -> Family {
        match self {
            Task::TextOnly => Family::NaturalLanguage,
            Task::Edit => Family::Editing,
            Task::T2i => Family::Generation,
            Task::I2t => Family::Understanding,
        }
    }

    /// Whether records of this task carry an image block and a target image.
    pub fn generates(self) -> bool {
        matches!(self, Task::T2i | Task::Edit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSourceRecord {
    pub family: Family,
    pub text_turns: Vec<(Role, String)>,
    pub input_image_ref: Option<String>,
    pub target_image_ref: Option<String>,
}

impl RawSourceRecord {
    /// The image-reference pattern each family requires.
    pub fn refs_consistent(&self) -> bool {
        let (i, t) = (self.input_image_ref.is_some(), self.target_image_ref.is_some());
        match self.family {
            Family::Editing => i && t,
            Family::Generation => !i && t,
            Family::Understanding => i && !t,
            Family::NaturalLanguage => !i && !t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionRecord {
    pub record_id: String,
    pub task: Task,
    pub tokens: TokenSequence,
    pub input_image: Option<String>,
    pub target_image: Option<String>,
}
