//! JSON sample format and dataset directories.
//!
//! Serialization is canonical: sorted keys, nodes and edges in id order,
//! compact separators, reals with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{validate_with_meta, GraphEdge, GraphNode, LayerTag, MemoryGraph, TaskSample};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub vocab_size: usize,
    pub n_relations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_node: Option<usize>,
}

/// A directory of samples plus its vocabulary metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub names: Vec<String>,
    pub samples: Vec<TaskSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn d_node(&self) -> Option<usize> {
        self.meta
            .d_node
            .or_else(|| self.samples.first().map(|s| s.graph.d_node))
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

fn object<'a>(v: &'a Value, field: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::schema(field, "expected an object"))
}

fn array<'a>(obj: &'a Map<String, Value>, field: &str, path: &str) -> Result<&'a Vec<Value>> {
    obj.get(field)
        .ok_or_else(|| Error::schema(path, "missing"))?
        .as_array()
        .ok_or_else(|| Error::schema(path, "expected an array"))
}

fn integer(v: &Value, path: &str) -> Result<i64> {
    v.as_i64()
        .ok_or_else(|| Error::schema(path, format!("expected an integer, got {v}")))
}

fn unsigned(v: &Value, path: &str) -> Result<usize> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| Error::schema(path, format!("expected a non-negative integer, got {v}")))
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, path: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::schema(format!("{path}.{name}"), "missing"))
}

fn no_extra_keys(obj: &Map<String, Value>, allowed: &[&str], path: &str) -> Result<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::schema(
            if path.is_empty() { k.clone() } else { format!("{path}.{k}") },
            "unknown key",
        )),
        None => Ok(()),
    }
}

/// Parses and validates one sample document.
pub fn parse_sample(text: &str) -> Result<TaskSample> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Syntax {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let top = object(&root, "<root>")?;
    no_extra_keys(top, &["d_node", "nodes", "edges", "question", "labels"], "")?;

    let d_node = unsigned(
        top.get("d_node").ok_or_else(|| Error::schema("d_node", "missing"))?,
        "d_node",
    )?;

    let mut nodes = Vec::new();
    for (i, n) in array(top, "nodes", "nodes")?.iter().enumerate() {
        let path = format!("nodes[{i}]");
        let obj = object(n, &path)?;
        no_extra_keys(obj, &["id", "layer", "features"], &path)?;
        let id = integer(field(obj, "id", &path)?, &format!("{path}.id"))?;
        let layer_v = field(obj, "layer", &path)?;
        let layer = layer_v
            .as_str()
            .and_then(LayerTag::parse)
            .ok_or_else(|| {
                Error::schema(
                    format!("{path}.layer"),
                    format!("expected \"visual\", \"semantic\" or \"fact\", got {layer_v}"),
                )
            })?;
        let feats = field(obj, "features", &path)?
            .as_array()
            .ok_or_else(|| Error::schema(format!("{path}.features"), "expected an array"))?;
        let features = feats
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.as_f64()
                    .ok_or_else(|| Error::schema(format!("{path}.features[{j}]"), "expected a number"))
            })
            .collect::<Result<Vec<f64>>>()?;
        nodes.push(GraphNode { id, layer, features });
    }

    let mut edges = Vec::new();
    for (i, e) in array(top, "edges", "edges")?.iter().enumerate() {
        let path = format!("edges[{i}]");
        let obj = object(e, &path)?;
        no_extra_keys(obj, &["src", "dst", "relation_id"], &path)?;
        edges.push(GraphEdge {
            src: integer(field(obj, "src", &path)?, &format!("{path}.src"))?,
            dst: integer(field(obj, "dst", &path)?, &format!("{path}.dst"))?,
            relation_id: unsigned(field(obj, "relation_id", &path)?, &format!("{path}.relation_id"))?,
        });
    }

    let question = array(top, "question", "question")?
        .iter()
        .enumerate()
        .map(|(i, t)| unsigned(t, &format!("question[{i}]")))
        .collect::<Result<Vec<_>>>()?;

    let labels = array(top, "labels", "labels")?
        .iter()
        .enumerate()
        .map(|(i, l)| match l.as_u64() {
            Some(0) => Ok(0u8),
            Some(1) => Ok(1u8),
            _ => Err(Error::schema(format!("labels[{i}]"), format!("expected 0 or 1, got {l}"))),
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sample = TaskSample {
        graph: MemoryGraph { d_node, nodes, edges },
        question,
        labels,
    };
    sample.canonicalize();
    let violations = validate_with_meta(&sample, None);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    Ok(sample)
}

fn push_real(out: &mut String, v: f64) {
    // 17 significant digits: one before the point, sixteen after.
    write!(out, "{v:.16e}").expect("write to String");
}

fn push_list<T>(out: &mut String, items: &[T], mut f: impl FnMut(&mut String, &T)) {
    out.push('[');
    for (i, it) in items.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        f(out, it);
    }
    out.push(']');
}

/// Canonical JSON text for a sample, newline-terminated.
pub fn serialize_sample(s: &TaskSample) -> String {
    let s = s.canonical();
    let g = &s.graph;
    let mut out = String::with_capacity(64 + g.nodes.len() * (24 * g.d_node + 40));
    write!(out, "{{\"d_node\":{},\"edges\":", g.d_node).unwrap();
    push_list(&mut out, &g.edges, |o, e| {
        write!(o, "{{\"dst\":{},\"relation_id\":{},\"src\":{}}}", e.dst, e.relation_id, e.src).unwrap();
    });
    out.push_str(",\"labels\":");
    push_list(&mut out, &s.labels, |o, l| write!(o, "{l}").unwrap());
    out.push_str(",\"nodes\":");
    push_list(&mut out, &g.nodes, |o, n| {
        o.push_str("{\"features\":");
        push_list(o, &n.features, |o, v| push_real(o, *v));
        write!(o, ",\"id\":{},\"layer\":\"{}\"}}", n.id, n.layer).unwrap();
    });
    out.push_str(",\"question\":");
    push_list(&mut out, &s.question, |o, t| write!(o, "{t}").unwrap());
    out.push_str("}\n");
    out
}

fn sample_file_name(i: usize) -> String {
    format!("sample_{i:06}.json")
}

/// Writes `meta.json` and one file per sample into `dir` (created if needed).
pub fn write_dataset(dir: &Path, meta: &DatasetMeta, samples: &[TaskSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join(META_FILE);
    let mut meta_text = serde_json::to_string(meta).expect("meta serializes");
    meta_text.push('\n');
    fs::write(&meta_path, meta_text).map_err(|e| Error::io(&meta_path, e))?;
    for (i, s) in samples.iter().enumerate() {
        let p = dir.join(sample_file_name(i));
        fs::write(&p, serialize_sample(s)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Loads every `*.json` file except `meta.json`, in file-name order, and
/// validates each against the metadata.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", meta_path.display())))?;

    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json") && n != META_FILE)
        .collect();
    names.sort();

    let mut samples = Vec::with_capacity(names.len());
    for name in &names {
        let p = dir.join(name);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let s = parse_sample(&text).map_err(|e| Error::Dataset(format!("{name}: {e}")))?;
        let v = validate_with_meta(&s, Some(&meta));
        if !v.is_empty() {
            return Err(Error::Dataset(format!("{name}: {}", Error::Invalid(v))));
        }
        samples.push(s);
    }
    let d = samples.first().map(|s| s.graph.d_node);
    if let Some(bad) = samples.iter().position(|s| Some(s.graph.d_node) != d) {
        return Err(Error::Dataset(format!("{}: d_node differs from first sample", names[bad])));
    }
    Ok(Dataset { meta, names, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::tiny_sample;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"{"d_node":2,
        "nodes":[{"id":0,"layer":"visual","features":[1,0]},
                 {"id":1,"layer":"semantic","features":[0,1]},
                 {"id":2,"layer":"fact","features":[0.5,0.5]}],
        "edges":[{"src":0,"dst":2,"relation_id":0}],
        "question":[0],"labels":[1]}"#;

    #[test]
    fn minimal_document() {
        let s = parse_sample(MINIMAL).unwrap();
        assert_eq!(s.graph.nodes.len(), 3);
        assert_eq!(s, tiny_sample());
    }

    #[test]
    fn dangling_endpoint() {
        let text = MINIMAL.replace(r#""src":0"#, r#""src":99"#);
        match parse_sample(&text) {
            Err(Error::Invalid(v)) => assert!(v[0].rule.contains("dangling source 99"), "{v:?}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_length_mismatch() {
        let text = MINIMAL.replace(r#""labels":[1]"#, r#""labels":[1,0]"#);
        match parse_sample(&text) {
            Err(Error::Invalid(v)) => assert_eq!(v[0].subject, "labels"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_byte_offset() {
        let text = "{\"d_node\": 2,\n \"nodes\": [,]}";
        match parse_sample(text) {
            Err(Error::Syntax { offset, .. }) => assert_eq!(&text[offset..offset + 1], ","),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let text = MINIMAL.replace(r#""layer":"semantic""#, r#""layer":"audio""#);
        match parse_sample(&text) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "nodes[1].layer"),
            other => panic!("unexpected {other:?}"),
        }
        let text = MINIMAL.replace(r#""labels":[1]"#, r#""labels":[2]"#);
        match parse_sample(&text) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "labels[0]"),
            other => panic!("unexpected {other:?}"),
        }
        let text = MINIMAL.replace(r#""question":[0],"#, "");
        match parse_sample(&text) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "question"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn serialization_is_canonical() {
        let s = parse_sample(MINIMAL).unwrap();
        let a = serialize_sample(&s);
        assert_eq!(a, serialize_sample(&s));
        assert!(a.starts_with("{\"d_node\":2,\"edges\":[{\"dst\":2,\"relation_id\":0,\"src\":0}]"));

        let mut shuffled = s.clone();
        shuffled.graph.nodes.reverse();
        assert_eq!(serialize_sample(&shuffled), a);

        let reordered = r#"{"labels":[1],"question":[0],"d_node":2,
            "edges":[{"relation_id":0,"dst":2,"src":0}],
            "nodes":[{"id":2,"layer":"fact","features":[0.5,0.5]},
                     {"features":[0,1],"id":1,"layer":"semantic"},
                     {"id":0,"layer":"visual","features":[1,0]}]}"#;
        assert_eq!(serialize_sample(&parse_sample(reordered).unwrap()), a);
    }

    fn arb_sample() -> impl Strategy<Value = TaskSample> {
        (1usize..4, 1usize..6, 1usize..4).prop_flat_map(|(d, n_other, n_fact)| {
            let n = n_other + n_fact;
            (
                prop::collection::vec(prop::collection::vec(-1e6f64..1e6, d), n),
                prop::collection::vec((0..n, 0..n, 0usize..5), 0..8),
                prop::collection::vec(0usize..50, 1..5),
                prop::collection::vec(0u8..2, n_fact),
                Just((d, n_other)),
            )
                .prop_map(|(feats, raw_edges, question, labels, (d, n_other))| {
                    let nodes = feats
                        .into_iter()
                        .enumerate()
                        .map(|(i, features)| GraphNode {
                            id: (i as i64) * 3 - 4,
                            layer: if i < n_other { LayerTag::ALL[i % 2] } else { LayerTag::Fact },
                            features,
                        })
                        .collect::<Vec<_>>();
                    let edges = raw_edges
                        .into_iter()
                        .filter(|(a, b, _)| a != b)
                        .map(|(a, b, r)| GraphEdge { src: nodes[a].id, dst: nodes[b].id, relation_id: r })
                        .collect();
                    TaskSample { graph: MemoryGraph { d_node: d, nodes, edges }, question, labels }
                })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(s in arb_sample()) {
            let text = serialize_sample(&s);
            let back = parse_sample(&text).unwrap();
            prop_assert_eq!(&back, &*s.canonical());
            prop_assert_eq!(serialize_sample(&back), text);
        }
    }
}
