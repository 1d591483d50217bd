//! Prompt templates per evaluation task family, with parse-back.
//!
//! | family      | template                                                   |
//! |-------------|------------------------------------------------------------|
//! | short-vqa   | `[I2T] <IMAGE> {question} answer with a single word.`      |
//! | long-vqa    | `[I2T] <IMAGE> {question} options: {o1} | {o2} | ...`      |
//! | advanced    | `[I2T] <IMAGE> {question}`                                 |
//! | generation  | `[T2I] Please generate an image of {description}`          |
//! | editing     | `[T2I] <IMAGE> {description}`                              |

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

const SHORT_SUFFIX: &str = " answer with a single word.";
const OPTIONS: &str = " options: ";
const OPTION_SEP: &str = " | ";
const GENERATION_PREFIX: &str = "[T2I] Please generate an image of ";
const I2T_PREFIX: &str = "[I2T] <IMAGE> ";
const EDIT_PREFIX: &str = "[T2I] <IMAGE> ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TemplateFamily {
    ShortVqa,
    LongVqa,
    Advanced,
    Generation,
    Editing,
}

impl TemplateFamily {
    pub const ALL: [TemplateFamily; 5] = [Self::ShortVqa, Self::LongVqa, Self::Advanced, Self::Generation, Self::Editing];

    pub fn name(self) -> &'static str {
        match self {
            Self::ShortVqa => "short-vqa",
            Self::LongVqa => "long-vqa",
            Self::Advanced => "advanced",
            Self::Generation => "generation",
            Self::Editing => "editing",
        }
    }
}

impl fmt::Display for TemplateFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Template(format!("unknown template family `{s}`")))
    }
}

/// Slot values recovered from (or used to fill) a template.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateSlots {
    pub question: Option<String>,
    pub options: Option<Vec<String>>,
    pub description: Option<String>,
}

fn required<'a>(v: Option<&'a str>, family: TemplateFamily, slot: &str) -> Result<&'a str> {
    v.ok_or_else(|| Error::Template(format!("{family} template needs a {slot}")))
}

fn reject(value: &str, delims: &[&str], slot: &str) -> Result<()> {
    if value.contains('\n') || delims.iter().any(|d| value.contains(d.trim())) {
        return Err(Error::Template(format!("{slot} `{value}` contains a template delimiter")));
    }
    Ok(())
}

pub fn apply_prompt_template(
    family: TemplateFamily,
    question: Option<&str>,
    options: Option<&[String]>,
    description: Option<&str>,
) -> Result<String> {
    use TemplateFamily::*;
    match family {
        ShortVqa => {
            let q = required(question, family, "question")?;
            reject(q, &[], "question")?;
            Ok(format!("{I2T_PREFIX}{q}{SHORT_SUFFIX}"))
        }
        LongVqa => {
            let q = required(question, family, "question")?;
            let opts = options.filter(|o| !o.is_empty()).ok_or_else(|| Error::Template("long-vqa template needs options".into()))?;
            reject(q, &["options:"], "question")?;
            for o in opts {
                reject(o, &["|"], "option")?;
                if o.trim().is_empty() || o.trim() != o {
                    return Err(Error::Template(format!("option `{o}` must be non-empty and trimmed")));
                }
            }
            Ok(format!("{I2T_PREFIX}{q}{OPTIONS}{}", opts.join(OPTION_SEP)))
        }
        Advanced => {
            let q = required(question, family, "question")?;
            reject(q, &[], "question")?;
            Ok(format!("{I2T_PREFIX}{q}"))
        }
        Generation => {
            let d = required(description, family, "description")?;
            reject(d, &[], "description")?;
            Ok(format!("{GENERATION_PREFIX}{d}"))
        }
        Editing => {
            let d = required(description, family, "description")?;
            reject(d, &[], "description")?;
            Ok(format!("{EDIT_PREFIX}{d}"))
        }
    }
}

pub fn parse_prompt_template(family: TemplateFamily, prompt: &str) -> Result<TemplateSlots> {
    use TemplateFamily::*;
    let bad = || Error::Template(format!("prompt does not match the {family} template"));
    let strip = |p: &str| prompt.strip_prefix(p).map(str::to_string).ok_or_else(bad);
    Ok(match family {
        ShortVqa => {
            let rest = strip(I2T_PREFIX)?;
            let q = rest.strip_suffix(SHORT_SUFFIX).ok_or_else(bad)?;
            TemplateSlots { question: Some(q.into()), ..Default::default() }
        }
        LongVqa => {
            let rest = strip(I2T_PREFIX)?;
            let (q, opts) = rest.rsplit_once(OPTIONS).ok_or_else(bad)?;
            let options = opts.split(OPTION_SEP).map(str::to_string).collect();
            TemplateSlots { question: Some(q.into()), options: Some(options), description: None }
        }
        Advanced => TemplateSlots { question: Some(strip(I2T_PREFIX)?), ..Default::default() },
        Generation => TemplateSlots { description: Some(strip(GENERATION_PREFIX)?), ..Default::default() },
        Editing => TemplateSlots { description: Some(strip(EDIT_PREFIX)?), ..Default::default() },
    })
}
