use std::collections::BTreeMap;

use serde_json::{json, Map, Value};
use thiserror::Error;

use super::schema::{SchemaError, SchemaSpec};
use super::{InstructionSet, InstructionType};
use crate::verify::VerificationConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BindingParseError {
    #[error("binding is missing required field `{0}`")]
    MissingField(&'static str),
    #[error("binding `{id}`: unknown instruction type `{name}`")]
    UnknownType { id: String, name: String },
    #[error("binding `{id}`: {field}: {source}")]
    MalformedSchema {
        id: String,
        field: &'static str,
        #[source]
        source: SchemaError,
    },
    #[error("binding `{id}`: {message}")]
    Invalid { id: String, message: String },
}

/// Package-level named schemas (for example `ApiResponseOutput`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchemaRegistry {
    named: BTreeMap<String, SchemaSpec>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&SchemaSpec> {
        self.named.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, schema: SchemaSpec) {
        self.named.insert(name.into(), schema);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named.keys().map(String::as_str)
    }

    /// Parses a schema document, resolving names against this registry.
    pub fn parse(&self, doc: &Value) -> Result<SchemaSpec, SchemaError> {
        SchemaSpec::parse(doc, &|n| self.named.get(n).cloned())
    }

    /// Registers every entry of a `name: schema` mapping. Entries may refer
    /// to names defined earlier in the same mapping or already registered.
    pub fn load_document(&mut self, doc: &Value) -> Result<(), SchemaError> {
        let map = doc.as_object().ok_or_else(|| SchemaError("schema file must be a mapping".into()))?;
        let mut pending: Vec<(&String, &Value)> = map.iter().collect();
        while !pending.is_empty() {
            let before = pending.len();
            let mut last_err = None;
            pending.retain(|(name, body)| match self.parse(body) {
                Ok(schema) => {
                    self.named.insert((*name).clone(), schema);
                    false
                }
                Err(e) => {
                    last_err = Some(SchemaError(format!("{name}: {}", e.0)));
                    true
                }
            });
            if pending.len() == before {
                return Err(last_err.expect("nonempty pending set"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionBinding {
    pub id: String,
    pub instruction_type: InstructionType,
    pub implementation_ref: String,
    pub input_schema: SchemaSpec,
    pub output_schema: SchemaSpec,
    pub verification: Option<VerificationConfig>,
    pub async_check: bool,
    /// Trace stores only a digest of this binding's outputs.
    pub redact: bool,
    /// Output field read as the PASS/FAIL signal of a check binding.
    pub signal_field: Option<String>,
}

const KNOWN_KEYS: &[&str] = &[
    "id",
    "type",
    "implementation_ref",
    "input_schema",
    "output_schema",
    "verification",
    "async_check",
    "redact",
    "signal_field",
    "description",
];

impl InstructionBinding {
    /// Canonical document form; `load_binding` of it yields an equal binding.
    pub fn to_document(&self) -> Value {
        let mut out = Map::new();
        out.insert("id".into(), json!(self.id));
        out.insert("type".into(), json!(self.instruction_type.name));
        out.insert("implementation_ref".into(), json!(self.implementation_ref));
        out.insert("input_schema".into(), self.input_schema.to_document());
        out.insert("output_schema".into(), self.output_schema.to_document());
        if let Some(v) = &self.verification {
            out.insert("verification".into(), v.to_document());
        }
        out.insert("async_check".into(), json!(self.async_check));
        out.insert("redact".into(), json!(self.redact));
        if let Some(f) = &self.signal_field {
            out.insert("signal_field".into(), json!(f));
        }
        Value::Object(out)
    }

    pub fn is_template_ref(&self) -> bool {
        is_template_path(&self.implementation_ref)
    }
}

pub(crate) fn is_template_path(s: &str) -> bool {
    [".j2", ".txt", ".tmpl", ".md"].iter().any(|ext| s.ends_with(ext))
}

fn bool_field(map: &Map<String, Value>, key: &str, id: &str) -> Result<bool, BindingParseError> {
    match map.get(key) {
        None => Ok(false),
        Some(Value::Bool(b)) => Ok(*b),
        Some(_) => Err(BindingParseError::Invalid { id: id.into(), message: format!("`{key}` must be boolean") }),
    }
}

pub fn load_binding(
    doc: &Value,
    instructions: &InstructionSet,
    schemas: &SchemaRegistry,
) -> Result<InstructionBinding, BindingParseError> {
    let map = doc.as_object().ok_or(BindingParseError::MissingField("id"))?;
    let text = |key: &'static str| -> Result<String, BindingParseError> {
        match map.get(key) {
            Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
            _ => Err(BindingParseError::MissingField(key)),
        }
    };
    let id = text("id")?;
    let type_name = text("type")?;
    let implementation_ref = text("implementation_ref")?;
    let input_doc = map.get("input_schema").ok_or(BindingParseError::MissingField("input_schema"))?;
    let output_doc = map.get("output_schema").ok_or(BindingParseError::MissingField("output_schema"))?;
    if let Some(key) = map.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
        return Err(BindingParseError::Invalid { id, message: format!("unknown key `{key}`") });
    }
    let instruction_type = instructions
        .classify_instruction(&type_name)
        .map_err(|_| BindingParseError::UnknownType { id: id.clone(), name: type_name })?;
    let input_schema = schemas
        .parse(input_doc)
        .map_err(|source| BindingParseError::MalformedSchema { id: id.clone(), field: "input_schema", source })?;
    let output_schema = schemas
        .parse(output_doc)
        .map_err(|source| BindingParseError::MalformedSchema { id: id.clone(), field: "output_schema", source })?;
    let verification = match map.get("verification") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            VerificationConfig::from_document(v)
                .map_err(|message| BindingParseError::Invalid { id: id.clone(), message })?,
        ),
    };
    let signal_field = match map.get("signal_field") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            return Err(BindingParseError::Invalid { id, message: "`signal_field` must be a string".into() })
        }
    };
    Ok(InstructionBinding {
        async_check: bool_field(map, "async_check", &id)?,
        redact: bool_field(map, "redact", &id)?,
        id,
        instruction_type,
        implementation_ref,
        input_schema,
        output_schema,
        verification,
        signal_field,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acf::{CoreId, TrustClass};

    fn market_schemas() -> SchemaRegistry {
        let mut reg = SchemaRegistry::new();
        let doc: Value = serde_yaml::from_str(
            r#"
ApiResponseOutput: {api_response: any}
VerificationOutput:
  result: {type: enum, values: [PASS, FAIL]}
  error_message: {type: string, nullable: true}
SalesQueryInput: {query: string}
"#,
        )
        .unwrap();
        reg.load_document(&doc).unwrap();
        reg
    }

    fn yaml(src: &str) -> Value {
        serde_yaml::from_str(src).unwrap()
    }

    #[test]
    fn verify_binding_loads() {
        let doc = yaml(
            r#"
id: verify_api_response
type: VERIFY
implementation_ref: validators.is_valid_json_response
input_schema: ApiResponseOutput
output_schema: VerificationOutput
"#,
        );
        let b = load_binding(&doc, &InstructionSet::foundational(), &market_schemas()).unwrap();
        assert_eq!(b.instruction_type.name, "VERIFY");
        assert_eq!(b.instruction_type.core, CoreId::Normative);
        assert_eq!(b.implementation_ref, "validators.is_valid_json_response");
        assert_eq!(b.output_schema.field_names(), vec!["error_message", "result"]);
    }

    #[test]
    fn fallback_binding_loads() {
        let doc = yaml(
            r#"
id: get_cached_sales_data
type: FALLBACK
implementation_ref: cached_api.get_cached_sales_data
input_schema: SalesQueryInput
output_schema: ApiResponseOutput
"#,
        );
        let b = load_binding(&doc, &InstructionSet::foundational(), &market_schemas()).unwrap();
        assert_eq!(b.instruction_type.name, "FALLBACK");
        assert_eq!(b.instruction_type.trust, TrustClass::Deterministic);
    }

    #[test]
    fn template_binding_and_round_trip() {
        let doc = yaml(
            r#"
id: summarize_document
type: GENERATE
implementation_ref: prompt/summarize.j2
input_schema: {document: STRING}
output_schema: {summary: STRING}
verification: {level: 1, rubric: rubrics/fidelity.txt, threshold: 0.8}
"#,
        );
        let set = InstructionSet::foundational();
        let reg = SchemaRegistry::new();
        let b = load_binding(&doc, &set, &reg).unwrap();
        assert!(b.is_template_ref());
        let again = load_binding(&b.to_document(), &set, &reg).unwrap();
        assert_eq!(again, b);
    }

    #[test]
    fn incomplete_or_bad_documents_rejected() {
        let set = InstructionSet::foundational();
        let reg = SchemaRegistry::new();
        let missing = yaml("{id: x, type: GENERATE, implementation_ref: p.j2, input_schema: {}}");
        assert_eq!(load_binding(&missing, &set, &reg), Err(BindingParseError::MissingField("output_schema")));
        let unknown = yaml("{id: x, type: FROB, implementation_ref: p, input_schema: {}, output_schema: {}}");
        assert!(matches!(load_binding(&unknown, &set, &reg), Err(BindingParseError::UnknownType { .. })));
        let bad_schema = yaml("{id: x, type: GENERATE, implementation_ref: p, input_schema: {a: Nope}, output_schema: {}}");
        assert!(matches!(load_binding(&bad_schema, &set, &reg), Err(BindingParseError::MalformedSchema { .. })));
        let extra = yaml("{id: x, type: GENERATE, implementation_ref: p, input_schema: {}, output_schema: {}, colour: red}");
        assert!(matches!(load_binding(&extra, &set, &reg), Err(BindingParseError::Invalid { .. })));
    }

    #[test]
    fn registry_resolves_forward_references() {
        let mut reg = SchemaRegistry::new();
        reg.load_document(&yaml("{Outer: {inner: Inner}, Inner: {x: number}}")).unwrap();
        assert!(reg.get("Outer").is_some());
        assert!(SchemaRegistry::new().load_document(&yaml("{A: {x: Missing}}")).is_err());
    }
}
