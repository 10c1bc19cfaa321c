//! Depression templates: first-person sentences condensed from clinical
//! scale dimensions, used as similarity anchors for post screening.
//!
//! The bundled bank lives in `data/templates.jsonl` (one
//! `{scale, id, dimension, text}` record per line) and is verified against a
//! pinned SHA-256 digest the first time it is accessed.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const BANK_DATA: &str = include_str!("../data/templates.jsonl");
const BANK_SHA256: &str = "00b32e23f944dae0d9db2ca0010a506e1cef8f25736bb08d5afbb584d321bc09";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scale {
    /// Explicit self-reports of depression, diagnosis or treatment.
    Direct,
    BDI2,
    HDRS,
    CESD,
    PHQ9,
}

impl Scale {
    pub const ALL: [Scale; 5] = [Scale::Direct, Scale::BDI2, Scale::HDRS, Scale::CESD, Scale::PHQ9];

    pub fn preset_name(self) -> &'static str {
        match self {
            Scale::Direct => "depress",
            Scale::BDI2 => "bdi2",
            Scale::HDRS => "hdrs",
            Scale::CESD => "cesd",
            Scale::PHQ9 => "phq9",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Direct => "Direct",
            Scale::BDI2 => "BDI-II",
            Scale::HDRS => "HDRS",
            Scale::CESD => "CES-D",
            Scale::PHQ9 => "PHQ-9",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "depress" | "direct" => Ok(Scale::Direct),
            "bdi2" | "bdiii" => Ok(Scale::BDI2),
            "hdrs" | "hamd" => Ok(Scale::HDRS),
            "cesd" => Ok(Scale::CESD),
            "phq9" => Ok(Scale::PHQ9),
            _ => Err(Error::UnknownPreset(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub scale: Scale,
    pub id: String,
    pub dimension: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub name: String,
    templates: Vec<Template>,
}

impl TemplateSet {
    pub fn new(name: impl Into<String>, templates: Vec<Template>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("template set must not be empty".into()));
        }
        check_unique(&templates)?;
        Ok(Self {
            name: name.into(),
            templates,
        })
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Template> {
        self.templates.iter()
    }
}

fn check_unique(templates: &[Template]) -> Result<()> {
    let mut keys: Vec<(Scale, &str)> = templates.iter().map(|t| (t.scale, t.id.as_str())).collect();
    keys.sort_unstable();
    if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!(
            "duplicate template ({}, {})",
            w[0].0, w[0].1
        )));
    }
    Ok(())
}

/// Parses a template data file body.
pub fn parse_bank(data: &str) -> Result<Vec<Template>> {
    let mut bank = Vec::new();
    for (i, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: Template = serde_json::from_str(line).map_err(|e| Error::Record {
            path: "templates".into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if t.text.trim().is_empty() || t.id.is_empty() {
            return Err(Error::Record {
                path: "templates".into(),
                line: i + 1,
                message: "template id and text must be non-empty".into(),
            });
        }
        bank.push(t);
    }
    check_unique(&bank)?;
    Ok(bank)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<Vec<Template>> {
    parse_bank(&fs::read_to_string(path)?)
}

/// Checks the bundled bank against its pinned digest and parses it.
pub fn verify_builtin_bank() -> Result<Vec<Template>> {
    let digest = hex::encode(Sha256::digest(BANK_DATA.as_bytes()));
    if digest != BANK_SHA256 {
        return Err(Error::Integrity(format!(
            "bundled templates digest {digest} does not match {BANK_SHA256}"
        )));
    }
    parse_bank(BANK_DATA)
}

/// The bundled template bank: 3 Direct, 21 BDI-II, 27 HDRS, 21 CES-D and
/// 20 PHQ-9 templates.
///
/// Panics if the bundled data fails its integrity check, which can only
/// happen if the crate was built from a modified data file.
pub fn builtin_bank() -> &'static [Template] {
    static BANK: OnceLock<Vec<Template>> = OnceLock::new();
    BANK.get_or_init(|| verify_builtin_bank().unwrap_or_else(|e| panic!("{e}")))
}

/// Resolves a named preset against the bundled bank.
pub fn preset(name: &str) -> Result<TemplateSet> {
    preset_from(builtin_bank(), name)
}

/// Resolves a preset name against an arbitrary bank.
///
/// * `depress`: the Direct templates only.
/// * `bdi2`, `hdrs`, `cesd`, `phq9`: that scale alone, without Direct.
/// * `full`: Direct followed by BDI-II.
/// * `a+b+...`: Direct followed by each named scale, in the order given.
pub fn preset_from(bank: &[Template], name: &str) -> Result<TemplateSet> {
    let name = name.trim().to_ascii_lowercase();
    let scales: Vec<Scale> = if name.contains('+') {
        let mut scales = vec![Scale::Direct];
        for part in name.split('+') {
            let part = part.trim();
            let scale = if part == "full" {
                Scale::BDI2
            } else {
                part.parse::<Scale>()
                    .map_err(|_| Error::UnknownPreset(name.clone()))?
            };
            if !scales.contains(&scale) {
                scales.push(scale);
            }
        }
        scales
    } else if name == "full" {
        vec![Scale::Direct, Scale::BDI2]
    } else {
        vec![name.parse::<Scale>().map_err(|_| Error::UnknownPreset(name.clone()))?]
    };

    let templates: Vec<Template> = scales
        .iter()
        .flat_map(|s| bank.iter().filter(move |t| t.scale == *s))
        .cloned()
        .collect();
    if templates.is_empty() {
        return Err(Error::Config(format!("preset {name:?} selects no templates from the bank")));
    }
    TemplateSet::new(name, templates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(scale: Scale) -> usize {
        builtin_bank().iter().filter(|t| t.scale == scale).count()
    }

    #[test]
    fn bank_sizes() {
        assert_eq!(count(Scale::Direct), 3);
        assert_eq!(count(Scale::BDI2), 21);
        assert_eq!(count(Scale::HDRS), 27);
        assert_eq!(count(Scale::CESD), 21);
        assert_eq!(count(Scale::PHQ9), 20);
    }

    #[test]
    fn bank_contains_known_rows() {
        let find = |text: &str| builtin_bank().iter().find(|t| t.text == text).cloned();
        let diag = find("I am diagnosed with depression.").unwrap();
        assert_eq!(diag.scale, Scale::Direct);
        assert_eq!(diag.dimension, "Diagnosis");
        let cry = find("I always cry.").unwrap();
        assert_eq!((cry.scale, cry.dimension.as_str()), (Scale::BDI2, "Crying"));
        let sad = find("I feel sad.").unwrap();
        assert_eq!(sad.dimension, "Sadness");
    }

    #[test]
    fn presets() {
        assert_eq!(preset("depress").unwrap().len(), 3);
        assert_eq!(preset("bdi2").unwrap().len(), 21);
        assert!(preset("bdi2").unwrap().iter().all(|t| t.scale == Scale::BDI2));
        let full = preset("full").unwrap();
        assert_eq!(full.len(), 24);
        assert_eq!(full.templates()[0].scale, Scale::Direct);
        assert_eq!(full.templates()[3].scale, Scale::BDI2);
        assert_eq!(preset("depress+bdi2").unwrap(), TemplateSet { name: "depress+bdi2".into(), ..full });
    }

    #[test]
    fn combination_order_and_direct() {
        let set = preset("hdrs+bdi2+phq9").unwrap();
        assert_eq!(set.len(), 3 + 27 + 21 + 20);
        let order: Vec<Scale> = set.iter().map(|t| t.scale).fold(Vec::new(), |mut acc, s| {
            if acc.last() != Some(&s) {
                acc.push(s);
            }
            acc
        });
        assert_eq!(order, [Scale::Direct, Scale::HDRS, Scale::BDI2, Scale::PHQ9]);
    }

    #[test]
    fn unknown_presets_rejected() {
        assert!(matches!(preset("madrs"), Err(Error::UnknownPreset(_))));
        assert!(matches!(preset("hdrs+madrs"), Err(Error::UnknownPreset(_))));
        assert!(matches!(preset(""), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn presets_draw_from_bank() {
        for name in ["depress", "bdi2", "full", "hdrs", "cesd", "phq9", "hdrs+bdi2+cesd"] {
            let set = preset(name).unwrap();
            assert!(set.iter().all(|t| builtin_bank().contains(t)), "{name}");
            assert_eq!(set, preset(name).unwrap());
        }
    }

    #[test]
    fn tampered_bank_detected() {
        let dup = format!("{}{}", BANK_DATA, BANK_DATA.lines().next().unwrap());
        assert!(parse_bank(&dup).is_err());
        assert!(verify_builtin_bank().is_ok());
    }
}
