//! Structural schema language used by instruction bindings.
//!
//! Kinds: `string`, `number`, `boolean`, `enum`, `list`, `record` and `any`.
//! A schema document is either a type name (`string`, `NUMBER`, ...), the name
//! of a package-level schema, a full form mapping with a `type` key, or a
//! record shorthand (a mapping of field name to schema, every field required).
//! Inside a record shorthand a type name ending in `?` marks the field optional.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use regex::Regex;
use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed schema: {0}")]
pub struct SchemaError(pub String);

fn bad(msg: impl Into<String>) -> SchemaError {
    SchemaError(msg.into())
}

#[derive(Clone)]
pub struct Pattern(Regex);

impl Pattern {
    pub fn new(src: &str) -> Result<Self, SchemaError> {
        Regex::new(src).map(Pattern).map_err(|e| bad(format!("bad pattern `{src}`: {e}")))
    }

    pub fn as_str(&self) -> &str {
        self.0.as_str()
    }

    pub fn is_match(&self, s: &str) -> bool {
        self.0.is_match(s)
    }
}

impl fmt::Debug for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "/{}/", self.as_str())
    }
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        self.as_str() == other.as_str()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub schema: SchemaSpec,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchemaKind {
    Any,
    String { pattern: Option<Pattern> },
    Number { min: Option<f64>, max: Option<f64> },
    Boolean,
    Enum { values: Vec<Value> },
    List { items: Box<SchemaSpec> },
    Record { fields: BTreeMap<String, FieldSpec>, additional_fields: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaSpec {
    pub kind: SchemaKind,
    pub nullable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Defect {
    pub path: String,
    pub reason: String,
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationReport {
    Conforms,
    Defects(Vec<Defect>),
}

impl ValidationReport {
    pub fn conforms(&self) -> bool {
        matches!(self, ValidationReport::Conforms)
    }

    pub fn defects(&self) -> &[Defect] {
        match self {
            ValidationReport::Conforms => &[],
            ValidationReport::Defects(d) => d,
        }
    }

    pub fn summary(&self) -> String {
        self.defects().iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
    }
}

impl SchemaSpec {
    pub fn new(kind: SchemaKind) -> Self {
        SchemaSpec { kind, nullable: false }
    }

    pub fn any() -> Self {
        Self::new(SchemaKind::Any)
    }

    pub fn string() -> Self {
        Self::new(SchemaKind::String { pattern: None })
    }

    pub fn number() -> Self {
        Self::new(SchemaKind::Number { min: None, max: None })
    }

    pub fn boolean() -> Self {
        Self::new(SchemaKind::Boolean)
    }

    pub fn list(items: SchemaSpec) -> Self {
        Self::new(SchemaKind::List { items: Box::new(items) })
    }

    pub fn enumeration<I: IntoIterator<Item = Value>>(values: I) -> Self {
        Self::new(SchemaKind::Enum { values: values.into_iter().collect() })
    }

    /// Closed record with every listed field required.
    pub fn record<'a, I: IntoIterator<Item = (&'a str, SchemaSpec)>>(fields: I) -> Self {
        let fields = fields
            .into_iter()
            .map(|(k, schema)| (k.to_string(), FieldSpec { schema, required: true }))
            .collect();
        Self::new(SchemaKind::Record { fields, additional_fields: false })
    }

    pub fn nullable(mut self) -> Self {
        self.nullable = true;
        self
    }

    /// Field names of a record schema, empty for every other kind.
    pub fn field_names(&self) -> Vec<&str> {
        match &self.kind {
            SchemaKind::Record { fields, .. } => fields.keys().map(String::as_str).collect(),
            _ => Vec::new(),
        }
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        match &self.kind {
            SchemaKind::Record { fields, .. } => fields.get(name),
            _ => None,
        }
    }

    pub fn parse(doc: &Value, named: &dyn Fn(&str) -> Option<SchemaSpec>) -> Result<Self, SchemaError> {
        parse_schema(doc, named)
    }

    /// Canonical full-form document. `parse(to_document(s)) == s`.
    pub fn to_document(&self) -> Value {
        let mut out = Map::new();
        match &self.kind {
            SchemaKind::Any => {
                out.insert("type".into(), json!("any"));
            }
            SchemaKind::String { pattern } => {
                out.insert("type".into(), json!("string"));
                if let Some(p) = pattern {
                    out.insert("pattern".into(), json!(p.as_str()));
                }
            }
            SchemaKind::Number { min, max } => {
                out.insert("type".into(), json!("number"));
                if let Some(m) = min {
                    out.insert("min".into(), json!(m));
                }
                if let Some(m) = max {
                    out.insert("max".into(), json!(m));
                }
            }
            SchemaKind::Boolean => {
                out.insert("type".into(), json!("boolean"));
            }
            SchemaKind::Enum { values } => {
                out.insert("type".into(), json!("enum"));
                out.insert("values".into(), Value::Array(values.clone()));
            }
            SchemaKind::List { items } => {
                out.insert("type".into(), json!("list"));
                out.insert("items".into(), items.to_document());
            }
            SchemaKind::Record { fields, additional_fields } => {
                out.insert("type".into(), json!("record"));
                let mut fs = Map::new();
                for (name, field) in fields {
                    let mut doc = field.schema.to_document();
                    if let Value::Object(m) = &mut doc {
                        m.insert("required".into(), json!(field.required));
                    }
                    fs.insert(name.clone(), doc);
                }
                out.insert("fields".into(), Value::Object(fs));
                if *additional_fields {
                    out.insert("additional_fields".into(), json!(true));
                }
            }
        }
        if self.nullable {
            out.insert("nullable".into(), json!(true));
        }
        Value::Object(out)
    }
}

fn primitive(name: &str) -> Option<SchemaSpec> {
    match name.to_ascii_lowercase().as_str() {
        "string" => Some(SchemaSpec::string()),
        "number" => Some(SchemaSpec::number()),
        "boolean" | "bool" => Some(SchemaSpec::boolean()),
        "any" => Some(SchemaSpec::any()),
        _ => None,
    }
}

fn parse_named(name: &str, named: &dyn Fn(&str) -> Option<SchemaSpec>) -> Result<SchemaSpec, SchemaError> {
    primitive(name).or_else(|| named(name)).ok_or_else(|| bad(format!("unknown schema `{name}`")))
}

const FULL_FORM_KEYS: &[&str] = &[
    "type",
    "nullable",
    "pattern",
    "min",
    "max",
    "values",
    "items",
    "fields",
    "additional_fields",
    "description",
];

fn parse_schema(doc: &Value, named: &dyn Fn(&str) -> Option<SchemaSpec>) -> Result<SchemaSpec, SchemaError> {
    match doc {
        Value::String(name) => parse_named(name, named),
        Value::Object(map) if map.contains_key("type") => parse_full(map, named),
        Value::Object(map) => {
            let mut fields = BTreeMap::new();
            for (name, field_doc) in map {
                fields.insert(name.clone(), parse_field(field_doc, named)?);
            }
            Ok(SchemaSpec::new(SchemaKind::Record { fields, additional_fields: false }))
        }
        other => Err(bad(format!("expected a type name or mapping, found {other}"))),
    }
}

fn parse_field(doc: &Value, named: &dyn Fn(&str) -> Option<SchemaSpec>) -> Result<FieldSpec, SchemaError> {
    match doc {
        Value::String(name) => match name.strip_suffix('?') {
            Some(base) => Ok(FieldSpec { schema: parse_named(base, named)?, required: false }),
            None => Ok(FieldSpec { schema: parse_named(name, named)?, required: true }),
        },
        Value::Object(map) if map.contains_key("type") => {
            let required = match map.get("required") {
                None => true,
                Some(Value::Bool(b)) => *b,
                Some(other) => return Err(bad(format!("`required` must be boolean, found {other}"))),
            };
            let mut rest = map.clone();
            rest.remove("required");
            Ok(FieldSpec { schema: parse_full(&rest, named)?, required })
        }
        other => Ok(FieldSpec { schema: parse_schema(other, named)?, required: true }),
    }
}

fn number_opt(map: &Map<String, Value>, key: &str) -> Result<Option<f64>, SchemaError> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| bad(format!("`{key}` must be a number"))),
    }
}

fn parse_full(map: &Map<String, Value>, named: &dyn Fn(&str) -> Option<SchemaSpec>) -> Result<SchemaSpec, SchemaError> {
    if let Some(key) = map.keys().find(|k| !FULL_FORM_KEYS.contains(&k.as_str())) {
        return Err(bad(format!("unknown schema key `{key}`")));
    }
    let ty = map
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("`type` must be a string"))?
        .to_ascii_lowercase();
    let nullable = match map.get("nullable") {
        None => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(bad("`nullable` must be boolean")),
    };
    let allowed: &[&str] = match ty.as_str() {
        "string" => &["pattern"],
        "number" => &["min", "max"],
        "enum" => &["values"],
        "list" => &["items"],
        "record" => &["fields", "additional_fields"],
        _ => &[],
    };
    for key in map.keys() {
        if !["type", "nullable", "description"].contains(&key.as_str()) && !allowed.contains(&key.as_str()) {
            return Err(bad(format!("`{key}` is not valid for type `{ty}`")));
        }
    }
    let kind = match ty.as_str() {
        "any" => SchemaKind::Any,
        "boolean" | "bool" => SchemaKind::Boolean,
        "string" => {
            let pattern = match map.get("pattern") {
                None => None,
                Some(Value::String(p)) => Some(Pattern::new(p)?),
                Some(_) => return Err(bad("`pattern` must be a string")),
            };
            SchemaKind::String { pattern }
        }
        "number" => {
            let min = number_opt(map, "min")?;
            let max = number_opt(map, "max")?;
            if let (Some(lo), Some(hi)) = (min, max) {
                if lo > hi {
                    return Err(bad(format!("min {lo} exceeds max {hi}")));
                }
            }
            SchemaKind::Number { min, max }
        }
        "enum" => {
            let values = map
                .get("values")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("enum requires a `values` list"))?
                .clone();
            if values.is_empty() {
                return Err(bad("enum requires at least one value"));
            }
            let mut seen = BTreeSet::new();
            for v in &values {
                if !seen.insert(v.to_string()) {
                    return Err(bad(format!("duplicate enum value {v}")));
                }
            }
            SchemaKind::Enum { values }
        }
        "list" => {
            let items = match map.get("items") {
                Some(doc) => parse_schema(doc, named)?,
                None => SchemaSpec::any(),
            };
            SchemaKind::List { items: Box::new(items) }
        }
        "record" => {
            let mut fields = BTreeMap::new();
            match map.get("fields") {
                None => {}
                Some(Value::Object(fm)) => {
                    for (name, doc) in fm {
                        fields.insert(name.clone(), parse_field(doc, named)?);
                    }
                }
                Some(_) => return Err(bad("`fields` must be a mapping")),
            }
            let additional_fields = match map.get("additional_fields") {
                None => false,
                Some(Value::Bool(b)) => *b,
                Some(_) => return Err(bad("`additional_fields` must be boolean")),
            };
            SchemaKind::Record { fields, additional_fields }
        }
        other => return Err(bad(format!("unknown type `{other}`"))),
    };
    Ok(SchemaSpec { kind, nullable })
}

fn join(path: &str, field: &str) -> String {
    if path == "$" {
        field.to_string()
    } else {
        format!("{path}.{field}")
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "list",
        Value::Object(_) => "record",
    }
}

fn check(value: &Value, schema: &SchemaSpec, path: &str, out: &mut Vec<Defect>) {
    let mut defect = |reason: String| out.push(Defect { path: path.to_string(), reason });
    if value.is_null() {
        if !schema.nullable && !matches!(schema.kind, SchemaKind::Any) {
            defect("null not allowed".into());
        }
        return;
    }
    match &schema.kind {
        SchemaKind::Any => {}
        SchemaKind::Boolean => {
            if !value.is_boolean() {
                defect(format!("expected boolean, found {}", type_name(value)));
            }
        }
        SchemaKind::String { pattern } => match value.as_str() {
            None => defect(format!("expected string, found {}", type_name(value))),
            Some(s) => {
                if let Some(p) = pattern {
                    if !p.is_match(s) {
                        defect(format!("does not match pattern /{}/", p.as_str()));
                    }
                }
            }
        },
        SchemaKind::Number { min, max } => match value.as_f64() {
            None => defect(format!("expected number, found {}", type_name(value))),
            Some(n) => {
                if let Some(lo) = min {
                    if n < *lo {
                        defect(format!("{n} below minimum {lo}"));
                    }
                }
                if let Some(hi) = max {
                    if n > *hi {
                        defect(format!("{n} above maximum {hi}"));
                    }
                }
            }
        },
        SchemaKind::Enum { values } => {
            if !values.contains(value) {
                defect(format!("{value} not in enum"));
            }
        }
        SchemaKind::List { items } => match value.as_array() {
            None => defect(format!("expected list, found {}", type_name(value))),
            Some(arr) => {
                for (i, item) in arr.iter().enumerate() {
                    let p = if path == "$" { format!("[{i}]") } else { format!("{path}[{i}]") };
                    check(item, items, &p, out);
                }
            }
        },
        SchemaKind::Record { fields, additional_fields } => match value.as_object() {
            None => defect(format!("expected record, found {}", type_name(value))),
            Some(obj) => {
                for (name, field) in fields {
                    match obj.get(name) {
                        None if field.required => out.push(Defect {
                            path: join(path, name),
                            reason: "missing required".into(),
                        }),
                        None => {}
                        Some(v) => check(v, &field.schema, &join(path, name), out),
                    }
                }
                if !additional_fields {
                    for key in obj.keys().filter(|k| !fields.contains_key(*k)) {
                        out.push(Defect { path: join(path, key), reason: "unexpected field".into() });
                    }
                }
            }
        },
    }
}

/// Total, side-effect free structural check.
pub fn validate_schema(value: &Value, schema: &SchemaSpec) -> ValidationReport {
    let mut defects = Vec::new();
    check(value, schema, "$", &mut defects);
    if defects.is_empty() {
        ValidationReport::Conforms
    } else {
        ValidationReport::Defects(defects)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn none(_: &str) -> Option<SchemaSpec> {
        None
    }

    fn summary_schema() -> SchemaSpec {
        SchemaSpec::record([("summary", SchemaSpec::string())])
    }

    #[test]
    fn exact_record_conforms() {
        assert!(validate_schema(&json!({"summary": "x"}), &summary_schema()).conforms());
    }

    #[test]
    fn list_field_conforms() {
        let schema = SchemaSpec::record([("sales_trends", SchemaSpec::list(SchemaSpec::any()))]);
        let doc = json!({"sales_trends": [{"month": "2024-01", "units": 1200}]});
        assert!(validate_schema(&doc, &schema).conforms());
    }

    #[test]
    fn missing_required_field() {
        let report = validate_schema(&json!({}), &summary_schema());
        assert_eq!(
            report,
            ValidationReport::Defects(vec![Defect { path: "summary".into(), reason: "missing required".into() }])
        );
    }

    #[test]
    fn nested_paths_and_bounds() {
        let doc = json!({"type": "record", "fields": {
            "scores": {"type": "list", "items": {"type": "number", "min": 0, "max": 1}},
            "label": {"type": "string", "pattern": "^[a-z]+$", "required": false},
            "mode": {"type": "enum", "values": ["a", "b"]}
        }});
        let schema = SchemaSpec::parse(&doc, &none).unwrap();
        let report = validate_schema(&json!({"scores": [0.5, 1.2], "label": "ABC", "mode": "c", "x": 1}), &schema);
        let paths: Vec<_> = report.defects().iter().map(|d| d.path.as_str()).collect();
        assert_eq!(paths, vec!["label", "mode", "scores[1]", "x"]);
        assert!(validate_schema(&json!({"scores": [], "mode": "a"}), &schema).conforms());
    }

    #[test]
    fn shorthand_and_named_schemas() {
        let named = |n: &str| (n == "Query").then(|| SchemaSpec::record([("q", SchemaSpec::string())]));
        let schema = SchemaSpec::parse(&json!({"document": "STRING", "query": "Query", "note": "string?"}), &named)
            .unwrap();
        assert!(schema.field("document").unwrap().required);
        assert!(!schema.field("note").unwrap().required);
        assert!(validate_schema(&json!({"document": "d", "query": {"q": "x"}}), &schema).conforms());
        assert!(SchemaSpec::parse(&json!("Nope"), &named).is_err());
    }

    #[test]
    fn malformed_schemas_rejected() {
        for doc in [
            json!({"type": "enum", "values": ["a", "a"]}),
            json!({"type": "enum", "values": []}),
            json!({"type": "number", "min": 2, "max": 1}),
            json!({"type": "string", "pattern": "("}),
            json!({"type": "string", "items": "string"}),
            json!({"type": "frob"}),
            json!(3),
        ] {
            assert!(SchemaSpec::parse(&doc, &none).is_err(), "{doc}");
        }
    }

    #[test]
    fn null_handling() {
        let schema = SchemaSpec::record([
            ("result", SchemaSpec::enumeration([json!("PASS"), json!("FAIL")])),
            ("error_message", SchemaSpec::string().nullable()),
        ]);
        assert!(validate_schema(&json!({"result": "PASS", "error_message": null}), &schema).conforms());
        assert!(!validate_schema(&json!({"result": null, "error_message": null}), &schema).conforms());
    }

    fn arb_schema() -> impl Strategy<Value = SchemaSpec> {
        let leaf = prop_oneof![
            Just(SchemaSpec::string()),
            Just(SchemaSpec::boolean()),
            Just(SchemaSpec::any()),
            (any::<Option<i16>>(), any::<Option<i16>>()).prop_map(|(a, b)| {
                let (min, max) = match (a, b) {
                    (Some(x), Some(y)) if x > y => (Some(y as f64), Some(x as f64)),
                    (x, y) => (x.map(f64::from), y.map(f64::from)),
                };
                SchemaSpec::new(SchemaKind::Number { min, max })
            }),
            Just(SchemaSpec::enumeration([json!("a"), json!(1), json!(true)])),
            Just(SchemaSpec::new(SchemaKind::String { pattern: Some(Pattern::new("^x+$").unwrap()) })),
        ];
        leaf.prop_recursive(3, 16, 4, |inner| {
            prop_oneof![
                inner.clone().prop_map(SchemaSpec::list),
                proptest::collection::btree_map("[a-z]{1,4}", (inner, any::<bool>()), 0..4).prop_map(|m| {
                    let fields = m
                        .into_iter()
                        .map(|(k, (schema, required))| (k, FieldSpec { schema, required }))
                        .collect();
                    SchemaSpec::new(SchemaKind::Record { fields, additional_fields: false })
                }),
            ]
        })
        .prop_flat_map(|s| any::<bool>().prop_map(move |n| SchemaSpec { nullable: n, ..s.clone() }))
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i16>().prop_map(|n| json!(n)),
            "[a-z]{0,3}".prop_map(Value::String),
        ];
        leaf.prop_recursive(3, 16, 4, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..3).prop_map(Value::Array),
                proptest::collection::btree_map("[a-z]{1,4}", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn document_round_trip(schema in arb_schema()) {
            let doc = schema.to_document();
            prop_assert_eq!(SchemaSpec::parse(&doc, &none).unwrap(), schema);
        }

        #[test]
        fn validation_is_deterministic_and_total(schema in arb_schema(), value in arb_value()) {
            let before = value.clone();
            let a = validate_schema(&value, &schema);
            let b = validate_schema(&value, &schema);
            prop_assert_eq!(&value, &before);
            match &a {
                ValidationReport::Conforms => {}
                ValidationReport::Defects(d) => prop_assert!(!d.is_empty()),
            }
            prop_assert_eq!(a, b);
        }
    }
}
