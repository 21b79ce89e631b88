// SPDX-License-Identifier: MIT OR Apache-2.0

//! Profession lists and source/guidance prompt expansion.
//!
//! A guidance prompt is the source template with its `{profession}` slot
//! filled by the profession wrapped in one category template per attribute.
//! With the default `"{category} {profession}"` templates, gender × race
//! for "a photo of a {profession}" gives "a photo of a female Asian nurse".

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::AttributeSpec;

pub const PROFESSION_SLOT: &str = "{profession}";
pub const CATEGORY_SLOT: &str = "{category}";
pub const DEFAULT_SOURCE_TEMPLATE: &str = "a photo of a {profession}";
pub const DEFAULT_CATEGORY_TEMPLATE: &str = "{category} {profession}";

/// The 36 WinoBias occupations.
pub const WINOBIAS_PROFESSIONS_CSV: &str = include_str!("../data/winobias_professions.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPlan {
    #[serde(default = "default_source_template")]
    pub source_template: String,
    #[serde(default)]
    pub professions: Vec<String>,
    #[serde(default)]
    pub attributes: Vec<AttributeSpec>,
    /// Category → template with one `{profession}` slot (and optionally
    /// `{category}`). Categories not listed use
    /// [`DEFAULT_CATEGORY_TEMPLATE`].
    #[serde(default)]
    pub guidance_templates: IndexMap<String, String>,
}

fn default_source_template() -> String {
    DEFAULT_SOURCE_TEMPLATE.to_string()
}

impl Default for PromptPlan {
    fn default() -> Self {
        Self {
            source_template: default_source_template(),
            professions: Vec::new(),
            attributes: Vec::new(),
            guidance_templates: IndexMap::new(),
        }
    }
}

fn check_slot(template: &str, what: &str) -> Result<()> {
    match template.matches(PROFESSION_SLOT).count() {
        1 => Ok(()),
        n => Err(Error::Template(format!(
            "{what} `{template}` has {n} `{PROFESSION_SLOT}` slots, expected exactly one"
        ))),
    }
}

impl PromptPlan {
    pub fn validate(&self) -> Result<()> {
        check_slot(&self.source_template, "source template")?;
        for (category, template) in &self.guidance_templates {
            check_slot(template, &format!("template for `{category}`"))?;
        }
        Ok(())
    }

    /// Number of guidances per profession: `Π Lᵢ` (0 with no attributes).
    pub fn guidance_count(&self) -> usize {
        if self.attributes.is_empty() {
            0
        } else {
            self.attributes.iter().map(AttributeSpec::len).product()
        }
    }

    fn category_template(&self, category: &str) -> &str {
        self.guidance_templates
            .get(category)
            .map(String::as_str)
            .unwrap_or(DEFAULT_CATEGORY_TEMPLATE)
    }

    /// Loads a JSON plan. A `professions_csv` entry (relative to the plan
    /// file) is merged into `professions`; with neither, the built-in
    /// WinoBias list is used.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct PlanFile {
            #[serde(flatten)]
            plan: PromptPlan,
            #[serde(default)]
            professions_csv: Option<PathBuf>,
        }
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let PlanFile {
            mut plan,
            professions_csv,
        } = serde_json::from_str(&text)?;
        if let Some(csv) = professions_csv {
            let csv = path.parent().unwrap_or(Path::new("")).join(csv);
            plan.professions.extend(load_professions(csv)?);
        }
        if plan.professions.is_empty() {
            plan.professions = winobias_professions();
        }
        plan.validate()?;
        Ok(plan)
    }
}

/// Parses a one-column profession list: trimmed, blank rows skipped,
/// duplicates dropped (first occurrence wins). A first row reading
/// `profession`/`professions`/`occupation` is treated as a header.
pub fn parse_professions(text: &str) -> Result<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::InvalidArgument(format!("professions CSV: {e}")))?;
        let Some(name) = record.get(0).map(str::trim).filter(|s| !s.is_empty()) else {
            continue;
        };
        if row == 0
            && matches!(
                name.to_ascii_lowercase().as_str(),
                "profession" | "professions" | "occupation"
            )
        {
            continue;
        }
        if seen.insert(name.to_string()) {
            out.push(name.to_string());
        } else {
            warn!("duplicate profession `{name}` dropped");
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("profession list is empty".into()));
    }
    Ok(out)
}

pub fn load_professions(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_professions(&text)
}

pub fn winobias_professions() -> Vec<String> {
    parse_professions(WINOBIAS_PROFESSIONS_CSV).expect("bundled list parses")
}

/// `(source prompt, guidance prompts)` for one profession. Guidances
/// enumerate the cartesian product of categories with the first attribute
/// varying slowest.
pub fn expand_guidances(plan: &PromptPlan, profession: &str) -> Result<(String, Vec<String>)> {
    plan.validate()?;
    let source = plan.source_template.replace(PROFESSION_SLOT, profession);
    if plan.attributes.is_empty() {
        return Ok((source, Vec::new()));
    }
    let total = plan.guidance_count();
    let mut guidances = Vec::with_capacity(total);
    let mut index = vec![0usize; plan.attributes.len()];
    for _ in 0..total {
        let mut phrase = profession.to_string();
        for (attr, &i) in plan.attributes.iter().zip(&index).rev() {
            let category = &attr.categories()[i];
            phrase = plan
                .category_template(category)
                .replace(CATEGORY_SLOT, category)
                .replace(PROFESSION_SLOT, &phrase);
        }
        guidances.push(plan.source_template.replace(PROFESSION_SLOT, &phrase));
        // odometer, last attribute fastest
        for (slot, attr) in index.iter_mut().zip(&plan.attributes).rev() {
            *slot += 1;
            if *slot < attr.len() {
                break;
            }
            *slot = 0;
        }
    }
    Ok((source, guidances))
}
