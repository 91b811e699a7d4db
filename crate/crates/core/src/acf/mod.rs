//! Instruction set: the five foundational cores, their instruction types and
//! trust classes, plus registration of custom cores.

mod binding;
mod schema;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub(crate) use binding::is_template_path;
pub use binding::{load_binding, BindingParseError, InstructionBinding, SchemaRegistry};
pub use schema::{validate_schema, Defect, SchemaError, SchemaKind, SchemaSpec, ValidationReport};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AcfError {
    #[error("unknown instruction `{0}`")]
    UnknownInstruction(String),
    #[error("core `{0}` is already registered")]
    DuplicateCore(String),
    #[error("instruction `{0}` is already registered")]
    DuplicateInstruction(String),
    #[error("invalid core name `{0}`")]
    InvalidCoreName(String),
    #[error("invalid trust class `{0}`")]
    InvalidTrust(String),
}

/// One of the five foundational cores, or a named extension core.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CoreId {
    Cognitive,
    Memory,
    Execution,
    Metacognitive,
    Normative,
    Custom(String),
}

impl CoreId {
    pub const FOUNDATIONAL: [CoreId; 5] = [
        CoreId::Cognitive,
        CoreId::Memory,
        CoreId::Execution,
        CoreId::Metacognitive,
        CoreId::Normative,
    ];

    pub fn name(&self) -> &str {
        match self {
            CoreId::Cognitive => "Cognitive",
            CoreId::Memory => "Memory",
            CoreId::Execution => "Execution",
            CoreId::Metacognitive => "Metacognitive",
            CoreId::Normative => "Normative",
            CoreId::Custom(name) => name,
        }
    }

    /// Normative and Metacognitive steps produce signals the arbiter trusts.
    pub fn emits_trusted_signal(&self) -> bool {
        matches!(self, CoreId::Normative | CoreId::Metacognitive)
    }

    fn reserved(name: &str) -> Option<CoreId> {
        CoreId::FOUNDATIONAL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoreId {
    type Err = AcfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(core) = CoreId::reserved(s) {
            return Ok(core);
        }
        if is_identifier(s) {
            Ok(CoreId::Custom(s.to_string()))
        } else {
            Err(AcfError::InvalidCoreName(s.to_string()))
        }
    }
}

impl Serialize for CoreId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for CoreId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrustClass {
    /// Untrusted model output; must pass the output schema before landing in memory.
    Probabilistic,
    Deterministic,
    /// Ends the run.
    Terminal,
    /// Spawns a child run.
    Handoff,
}

impl FromStr for TrustClass {
    type Err = AcfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "probabilistic" => Ok(TrustClass::Probabilistic),
            "deterministic" => Ok(TrustClass::Deterministic),
            "terminal" => Ok(TrustClass::Terminal),
            "handoff" => Ok(TrustClass::Handoff),
            _ => Err(AcfError::InvalidTrust(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstructionType {
    pub name: String,
    pub core: CoreId,
    pub trust: TrustClass,
}

const FOUNDATIONAL: &[(&str, CoreId, TrustClass)] = &[
    ("GENERATE", CoreId::Cognitive, TrustClass::Probabilistic),
    ("DECOMPOSE", CoreId::Cognitive, TrustClass::Probabilistic),
    ("REFLECT", CoreId::Cognitive, TrustClass::Probabilistic),
    ("LOAD", CoreId::Memory, TrustClass::Deterministic),
    ("STORE", CoreId::Memory, TrustClass::Deterministic),
    ("COMPRESS", CoreId::Memory, TrustClass::Probabilistic),
    ("FILTER", CoreId::Memory, TrustClass::Probabilistic),
    ("STRUCTURE", CoreId::Memory, TrustClass::Probabilistic),
    ("RENDER", CoreId::Memory, TrustClass::Probabilistic),
    ("TOOL_CALL", CoreId::Execution, TrustClass::Deterministic),
    ("TOOL_BUILD", CoreId::Execution, TrustClass::Probabilistic),
    ("DELEGATE", CoreId::Execution, TrustClass::Handoff),
    ("RESPOND", CoreId::Execution, TrustClass::Terminal),
    ("PREDICT_SUCCESS", CoreId::Metacognitive, TrustClass::Probabilistic),
    ("EVALUATE_PROGRESS", CoreId::Metacognitive, TrustClass::Probabilistic),
    ("MONITOR_RESOURCES", CoreId::Metacognitive, TrustClass::Deterministic),
    ("VERIFY", CoreId::Normative, TrustClass::Deterministic),
    ("CONSTRAIN", CoreId::Normative, TrustClass::Deterministic),
    ("FALLBACK", CoreId::Normative, TrustClass::Deterministic),
    ("INTERRUPT", CoreId::Normative, TrustClass::Deterministic),
];

/// Registry of instruction types. Built once while a constitution loads and
/// read-only afterwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionSet {
    types: BTreeMap<String, InstructionType>,
    custom_cores: Vec<String>,
}

impl Default for InstructionSet {
    fn default() -> Self {
        Self::foundational()
    }
}

impl InstructionSet {
    pub fn foundational() -> Self {
        let types = FOUNDATIONAL
            .iter()
            .map(|(name, core, trust)| {
                let ty = InstructionType { name: name.to_string(), core: core.clone(), trust: *trust };
                (name.to_string(), ty)
            })
            .collect();
        InstructionSet { types, custom_cores: Vec::new() }
    }

    pub fn classify_instruction(&self, name: &str) -> Result<InstructionType, AcfError> {
        self.types.get(name).cloned().ok_or_else(|| AcfError::UnknownInstruction(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.types.contains_key(name)
    }

    pub fn custom_cores(&self) -> &[String] {
        &self.custom_cores
    }

    pub fn iter(&self) -> impl Iterator<Item = &InstructionType> {
        self.types.values()
    }

    /// Adds a custom core with its instructions. Nothing is registered when
    /// any name collides.
    pub fn register_custom_core(
        &mut self,
        name: &str,
        instructions: &[(&str, TrustClass)],
    ) -> Result<&mut Self, AcfError> {
        if CoreId::reserved(name).is_some() || self.custom_cores.iter().any(|c| c == name) {
            return Err(AcfError::DuplicateCore(name.to_string()));
        }
        if !is_identifier(name) {
            return Err(AcfError::InvalidCoreName(name.to_string()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (inst, _) in instructions {
            if self.types.contains_key(*inst) || !seen.insert(*inst) {
                return Err(AcfError::DuplicateInstruction(inst.to_string()));
            }
        }
        self.custom_cores.push(name.to_string());
        for (inst, trust) in instructions {
            let ty = InstructionType {
                name: inst.to_string(),
                core: CoreId::Custom(name.to_string()),
                trust: *trust,
            };
            self.types.insert(inst.to_string(), ty);
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foundational_classification() {
        let set = InstructionSet::foundational();
        let g = set.classify_instruction("GENERATE").unwrap();
        assert_eq!((g.core, g.trust), (CoreId::Cognitive, TrustClass::Probabilistic));
        let m = set.classify_instruction("MONITOR_RESOURCES").unwrap();
        assert_eq!((m.core, m.trust), (CoreId::Metacognitive, TrustClass::Deterministic));
        let r = set.classify_instruction("RESPOND").unwrap();
        assert_eq!((r.core, r.trust), (CoreId::Execution, TrustClass::Terminal));
        assert_eq!(
            set.classify_instruction("FROBNICATE"),
            Err(AcfError::UnknownInstruction("FROBNICATE".into()))
        );
    }

    #[test]
    fn every_table_entry_lands_in_its_core() {
        let set = InstructionSet::foundational();
        let tables: [(CoreId, &[&str]); 5] = [
            (CoreId::Cognitive, &["GENERATE", "DECOMPOSE", "REFLECT"]),
            (CoreId::Memory, &["LOAD", "STORE", "COMPRESS", "FILTER", "STRUCTURE", "RENDER"]),
            (CoreId::Execution, &["TOOL_CALL", "TOOL_BUILD", "DELEGATE", "RESPOND"]),
            (CoreId::Metacognitive, &["PREDICT_SUCCESS", "EVALUATE_PROGRESS", "MONITOR_RESOURCES"]),
            (CoreId::Normative, &["VERIFY", "CONSTRAIN", "FALLBACK", "INTERRUPT"]),
        ];
        let mut total = 0;
        for (core, names) in tables {
            for name in names {
                assert_eq!(set.classify_instruction(name).unwrap().core, core, "{name}");
                total += 1;
            }
        }
        assert_eq!(total, set.iter().count());
        // classification is stable
        assert_eq!(set.classify_instruction("VERIFY"), set.classify_instruction("VERIFY"));
    }

    #[test]
    fn custom_core_registration() {
        let mut set = InstructionSet::foundational();
        set.register_custom_core("QuantitativeCore", &[("EXECUTE_BACKTEST", TrustClass::Probabilistic)])
            .unwrap();
        let ty = set.classify_instruction("EXECUTE_BACKTEST").unwrap();
        assert_eq!(ty.core, CoreId::Custom("QuantitativeCore".into()));
        assert_eq!(ty.trust, TrustClass::Probabilistic);
        assert_eq!("QuantitativeCore".parse::<CoreId>().unwrap(), ty.core);

        assert_eq!(
            set.register_custom_core("Normative", &[("X", TrustClass::Deterministic)]).unwrap_err(),
            AcfError::DuplicateCore("Normative".into())
        );
        assert_eq!(
            set.register_custom_core("Other", &[("EXECUTE_BACKTEST", TrustClass::Deterministic)])
                .unwrap_err(),
            AcfError::DuplicateInstruction("EXECUTE_BACKTEST".into())
        );
        assert_eq!(
            set.register_custom_core("Dupes", &[("A", TrustClass::Deterministic), ("A", TrustClass::Deterministic)])
                .unwrap_err(),
            AcfError::DuplicateInstruction("A".into())
        );
        assert!(!set.contains("A"));
        assert!(matches!(
            set.register_custom_core("9bad", &[]),
            Err(AcfError::InvalidCoreName(_))
        ));
    }
}
