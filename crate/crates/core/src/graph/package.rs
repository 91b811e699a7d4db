use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use super::{route_successor, validate_graph, ExecutionGraph, RouteError, StructureReport, Successor};
use crate::acf::{load_binding, InstructionBinding, InstructionSet, SchemaRegistry, TrustClass};
use crate::canonical::{digest_bytes, digest_value};
use crate::policy::{parse_policy_document, PolicySet};
use crate::state::Signal;
use crate::verify::{EscalationAction, ValidatorRegistry};

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("missing {0}")]
    Missing(String),
    #[error("{file}: {message}")]
    Parse { file: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(msg: impl Into<String>) -> PackageError {
    PackageError::Invalid(msg.into())
}

/// A tool the package declares. Tools with `builtin` run in-process;
/// everything else goes through the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Value>,
}

/// Parsed-but-unvalidated package contents. `Constitution::assemble` turns
/// them into a constitution; `load_constitution` fills them from a directory.
#[derive(Debug, Clone, Default)]
pub struct ConstitutionParts {
    pub graph: Value,
    pub bindings: Vec<Value>,
    pub schemas: Vec<Value>,
    pub policies: Vec<Value>,
    pub validators: Option<Value>,
    pub tools: Vec<Value>,
    /// Prompt templates and rubrics keyed by the reference used in bindings.
    pub texts: BTreeMap<String, String>,
    /// Sub-packages for DELEGATE bindings, keyed by implementation_ref.
    pub children: BTreeMap<String, Arc<Constitution>>,
}

/// An immutable, fully cross-referenced agent package.
#[derive(Debug, Clone)]
pub struct Constitution {
    root: Option<PathBuf>,
    graph: ExecutionGraph,
    instructions: InstructionSet,
    schemas: SchemaRegistry,
    bindings: BTreeMap<String, InstructionBinding>,
    policies: BTreeMap<String, PolicySet>,
    tools: BTreeMap<String, ToolSpec>,
    validators: ValidatorRegistry,
    texts: BTreeMap<String, String>,
    children: BTreeMap<String, Arc<Constitution>>,
    default_environment: Option<String>,
    structure: StructureReport,
    version_hash: String,
}

impl PartialEq for Constitution {
    fn eq(&self, other: &Self) -> bool {
        self.graph == other.graph
            && self.bindings == other.bindings
            && self.policies == other.policies
            && self.tools == other.tools
            && self.texts == other.texts
            && self.default_environment == other.default_environment
            && self.version_hash == other.version_hash
    }
}

fn parse_err(file: &str, e: impl ToString) -> PackageError {
    PackageError::Parse { file: file.to_string(), message: e.to_string() }
}

impl Constitution {
    /// Validates in-memory parts. The version hash is computed over the
    /// canonical form of the parts.
    pub fn assemble(parts: ConstitutionParts) -> Result<Self, PackageError> {
        let child_hashes: BTreeMap<&String, &str> =
            parts.children.iter().map(|(k, c)| (k, c.version_hash())).collect();
        let hash = digest_value(&json!({
            "graph": parts.graph,
            "bindings": parts.bindings,
            "schemas": parts.schemas,
            "policies": parts.policies,
            "validators": parts.validators,
            "tools": parts.tools,
            "texts": parts.texts,
            "children": child_hashes,
        }));
        Self::build(parts, hash, None)
    }

    fn build(parts: ConstitutionParts, version_hash: String, root: Option<PathBuf>) -> Result<Self, PackageError> {
        let graph_doc = parts.graph.as_object().ok_or_else(|| parse_err("graph", "graph must be a mapping"))?;

        let mut instructions = InstructionSet::foundational();
        if let Some(cores) = graph_doc.get("custom_cores") {
            let cores = cores.as_object().ok_or_else(|| parse_err("graph", "`custom_cores` must be a mapping"))?;
            for (core, insts) in cores {
                let insts = insts
                    .as_object()
                    .ok_or_else(|| parse_err("graph", format!("custom core `{core}` must map instruction to trust")))?;
                let mut list = Vec::new();
                for (name, trust) in insts {
                    let trust: TrustClass = trust
                        .as_str()
                        .unwrap_or_default()
                        .parse()
                        .map_err(|e| parse_err("graph", format!("custom core `{core}`: {e}")))?;
                    list.push((name.as_str(), trust));
                }
                instructions.register_custom_core(core, &list).map_err(|e| parse_err("graph", e))?;
            }
        }

        let mut schemas = SchemaRegistry::new();
        for doc in &parts.schemas {
            schemas.load_document(doc).map_err(|e| parse_err("schemas", e))?;
        }

        let mut bindings = BTreeMap::new();
        for doc in &parts.bindings {
            let b = load_binding(doc, &instructions, &schemas).map_err(|e| parse_err("bindings", e))?;
            if bindings.contains_key(&b.id) {
                return Err(invalid(format!("duplicate binding id `{}`", b.id)));
            }
            bindings.insert(b.id.clone(), b);
        }

        let mut policies = BTreeMap::new();
        for doc in &parts.policies {
            let set = parse_policy_document(doc).map_err(|e| parse_err("policies", e))?;
            if policies.contains_key(&set.environment) {
                return Err(invalid(format!("two policy sets for environment `{}`", set.environment)));
            }
            policies.insert(set.environment.clone(), set);
        }

        let validators = match &parts.validators {
            Some(doc) => ValidatorRegistry::from_document(doc, schemas.clone()).map_err(|e| parse_err("validators", e))?,
            None => ValidatorRegistry::new(schemas.clone()),
        };

        let mut tools = BTreeMap::new();
        for doc in &parts.tools {
            let t: ToolSpec = serde_json::from_value(doc.clone()).map_err(|e| parse_err("tools", e))?;
            tools.insert(t.id.clone(), t);
        }

        let graph = ExecutionGraph::from_document(&parts.graph).map_err(|e| parse_err("graph", e))?;
        let structure = validate_graph(&graph, &bindings);
        if let Some(err) = structure.errors().next() {
            return Err(invalid(err.message.clone()));
        }

        for b in bindings.values() {
            let check_ref = |r: &str, what: &str| {
                validators.resolve(r).map(|_| ()).map_err(|e| invalid(format!("binding `{}`: {what}: {e}", b.id)))
            };
            match b.instruction_type.name.as_str() {
                "VERIFY" | "CONSTRAIN" => check_ref(&b.implementation_ref, "implementation_ref")?,
                "DELEGATE" if !parts.children.contains_key(&b.implementation_ref) => {
                    return Err(PackageError::Missing(format!("sub-package `{}` for binding `{}`", b.implementation_ref, b.id)))
                }
                _ => {}
            }
            if b.is_template_ref() && !parts.texts.contains_key(&b.implementation_ref) {
                return Err(PackageError::Missing(format!("template `{}` for binding `{}`", b.implementation_ref, b.id)));
            }
            if let Some(v) = &b.verification {
                if let Some(r) = &v.validator_ref {
                    check_ref(r, "validator_ref")?;
                }
                if let Some(EscalationAction::RunCheck(r)) = &v.escalation_action {
                    check_ref(r, "escalation validator")?;
                }
                if let Some(r) = &v.rubric {
                    if !parts.texts.contains_key(r) {
                        return Err(PackageError::Missing(format!("rubric `{r}` for binding `{}`", b.id)));
                    }
                }
            }
        }

        let default_environment = match graph_doc.get("environment").and_then(Value::as_str) {
            Some(env) => {
                if !policies.contains_key(env) {
                    return Err(invalid(format!("graph environment `{env}` has no policy set")));
                }
                Some(env.to_string())
            }
            None if policies.len() == 1 => policies.keys().next().cloned(),
            None => None,
        };

        Ok(Constitution {
            root,
            graph,
            instructions,
            schemas,
            bindings,
            policies,
            tools,
            validators,
            texts: parts.texts,
            children: parts.children,
            default_environment,
            structure,
            version_hash,
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }
    pub fn graph(&self) -> &ExecutionGraph {
        &self.graph
    }
    pub fn instructions(&self) -> &InstructionSet {
        &self.instructions
    }
    pub fn schemas(&self) -> &SchemaRegistry {
        &self.schemas
    }
    pub fn bindings(&self) -> &BTreeMap<String, InstructionBinding> {
        &self.bindings
    }
    pub fn binding(&self, id: &str) -> Option<&InstructionBinding> {
        self.bindings.get(id)
    }
    /// Binding executed at `node_id`.
    pub fn node_binding(&self, node_id: &str) -> Option<&InstructionBinding> {
        self.graph.nodes.get(node_id).and_then(|n| self.bindings.get(&n.binding_id))
    }
    pub fn policies(&self) -> &BTreeMap<String, PolicySet> {
        &self.policies
    }
    pub fn policy(&self, environment: &str) -> Option<&PolicySet> {
        self.policies.get(environment)
    }
    pub fn tools(&self) -> &BTreeMap<String, ToolSpec> {
        &self.tools
    }
    pub fn validators(&self) -> &ValidatorRegistry {
        &self.validators
    }
    pub fn text(&self, reference: &str) -> Option<&str> {
        self.texts.get(reference).map(String::as_str)
    }
    pub fn child(&self, reference: &str) -> Option<&Arc<Constitution>> {
        self.children.get(reference)
    }
    /// Environment from the graph file, or the only policy set's.
    pub fn default_environment(&self) -> Option<&str> {
        self.default_environment.as_deref()
    }
    pub fn structure(&self) -> &StructureReport {
        &self.structure
    }
    pub fn version_hash(&self) -> &str {
        &self.version_hash
    }

    pub fn route(&self, node_id: &str, signal: &Signal, user_memory: &Map<String, Value>) -> Result<Successor, RouteError> {
        let terminal = self
            .node_binding(node_id)
            .is_some_and(|b| b.instruction_type.trust == TrustClass::Terminal);
        route_successor(&self.graph, node_id, signal, user_memory, terminal)
    }
}

fn read_doc(path: &Path, root: &Path, files: &mut Vec<(String, Vec<u8>)>) -> Result<Value, PackageError> {
    let rel = path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/");
    let bytes = std::fs::read(path).map_err(|source| PackageError::Io { path: rel.clone(), source })?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| parse_err(&rel, e))?;
    let doc: Value = serde_yaml::from_str(&text).map_err(|e| parse_err(&rel, e))?;
    files.push((rel, bytes));
    Ok(doc)
}

fn docs_in(dir: &Path, root: &Path, files: &mut Vec<(String, Vec<u8>)>) -> Result<Vec<Value>, PackageError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| PackageError::Io { path: dir.display().to_string(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "yaml" || x == "yml" || x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_doc(p, root, files)).collect()
}

/// Expands a file that holds one item, a list, or a list under `key`.
fn flatten(doc: Value, key: &str) -> Vec<Value> {
    match doc {
        Value::Array(items) => items,
        Value::Object(mut m) if m.len() == 1 && m.contains_key(key) => match m.remove(key) {
            Some(Value::Array(items)) => items,
            Some(other) => vec![other],
            None => Vec::new(),
        },
        other => vec![other],
    }
}

const MAX_DEPTH: usize = 4;

fn load_at(root: &Path, depth: usize) -> Result<Constitution, PackageError> {
    if depth > MAX_DEPTH {
        return Err(invalid(format!("sub-packages nested deeper than {MAX_DEPTH} levels")));
    }
    let mut files = Vec::new();
    let graph_path = ["graph.yaml", "graph.yml", "graph.json"]
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| PackageError::Missing(format!("graph.yaml in {}", root.display())))?;
    let graph = read_doc(&graph_path, root, &mut files)?;
    if !root.join("bindings").is_dir() {
        return Err(PackageError::Missing(format!("bindings/ in {}", root.display())));
    }
    if !root.join("policies").is_dir() {
        return Err(PackageError::Missing(format!("policies/ in {}", root.display())));
    }
    let bindings: Vec<Value> =
        docs_in(&root.join("bindings"), root, &mut files)?.into_iter().flat_map(|d| flatten(d, "bindings")).collect();
    let schemas = docs_in(&root.join("schemas"), root, &mut files)?;
    let policies = docs_in(&root.join("policies"), root, &mut files)?;
    let tools: Vec<Value> = docs_in(&root.join("tools"), root, &mut files)?.into_iter().flat_map(|d| flatten(d, "tools")).collect();
    let validators = ["validators.yaml", "validators.yml", "validators.json"]
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.is_file())
        .map(|p| read_doc(&p, root, &mut files))
        .transpose()?;

    let mut texts = BTreeMap::new();
    let mut children = BTreeMap::new();
    let mut child_hashes = Vec::new();
    for b in &bindings {
        let Some(r) = b.get("implementation_ref").and_then(Value::as_str) else { continue };
        let mut refs = Vec::new();
        if crate::acf::is_template_path(r) {
            refs.push(r.to_string());
        }
        if let Some(rubric) = b.get("verification").and_then(|v| v.get("rubric")).and_then(Value::as_str) {
            refs.push(rubric.to_string());
        }
        for r in refs {
            if texts.contains_key(&r) {
                continue;
            }
            let path = root.join(&r);
            let bytes = std::fs::read(&path).map_err(|_| PackageError::Missing(format!("file `{r}` referenced by a binding")))?;
            let text = String::from_utf8(bytes.clone()).map_err(|e| parse_err(&r, e))?;
            files.push((r.clone(), bytes));
            texts.insert(r, text);
        }
        if b.get("type").and_then(Value::as_str) == Some("DELEGATE") && !children.contains_key(r) {
            let child = load_at(&root.join(r), depth + 1)?;
            child_hashes.push((r.to_string(), child.version_hash().to_string()));
            children.insert(r.to_string(), Arc::new(child));
        }
    }

    files.sort();
    files.dedup_by(|a, b| a.0 == b.0);
    let mut manifest = String::new();
    for (path, bytes) in &files {
        manifest.push_str(&format!("{path}\t{}\n", digest_bytes(bytes)));
    }
    child_hashes.sort();
    for (path, hash) in &child_hashes {
        manifest.push_str(&format!("{path}/\t{hash}\n"));
    }
    let hash = digest_bytes(manifest.as_bytes());
    let parts = ConstitutionParts { graph, bindings, schemas, policies, validators, tools, texts, children };
    Constitution::build(parts, hash, Some(root.to_path_buf()))
}

/// Loads a package directory: `graph.yaml`, `bindings/`, `policies/`, and
/// optionally `schemas/`, `tools/`, `validators.yaml`, plus any template,
/// rubric or sub-package the bindings reference.
pub fn load_constitution(path: &Path) -> Result<Constitution, PackageError> {
    if !path.is_dir() {
        return Err(PackageError::Missing(format!("package directory {}", path.display())));
    }
    load_at(path, 0)
}
