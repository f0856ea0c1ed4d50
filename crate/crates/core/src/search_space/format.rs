//! Architecture files: JSON with a fixed key order and one dag node per line.
//!
//! ```text
//! {
//!   "version": 1,
//!   "layers": [
//!     {"type": "conv", "kernel": 65},
//!     {
//!       "type": "attention",
//!       "inputs": ["Q", "K", "V"],
//!       "nodes": [
//!         {"op": "scale", "args": ["Q"]},
//!         {"op": "matmul", "args": [0, 1]}
//!       ]
//!     }
//!   ]
//! }
//! ```

use std::fmt::Write;

use serde::Deserialize;

use super::{AttentionDag, BackboneSpec, DagNode, InputNode, LayerSpec, NodeRef, PrimitiveOp, Result, SearchSpaceError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    version: u32,
    layers: Vec<RawLayer>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    #[serde(rename = "type")]
    kind: String,
    inputs: Option<Vec<String>>,
    nodes: Option<Vec<RawNode>>,
    kernel: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    op: String,
    args: Vec<RawArg>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawArg {
    Node(usize),
    Input(String),
}

fn field_err(path: String, message: impl Into<String>) -> SearchSpaceError {
    SearchSpaceError::Field {
        path,
        message: message.into(),
    }
}

pub fn to_json(spec: &BackboneSpec) -> String {
    let mut s = String::new();
    s.push_str("{\n");
    let _ = writeln!(s, "  \"version\": {FORMAT_VERSION},");
    s.push_str("  \"layers\": [\n");
    for (li, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv(k) => {
                let _ = write!(s, "    {{\"type\": \"conv\", \"kernel\": {k}}}");
            }
            LayerSpec::Attention(dag) => {
                s.push_str("    {\n      \"type\": \"attention\",\n");
                let inputs: Vec<String> = dag.inputs().iter().map(|i| format!("\"{i}\"")).collect();
                let _ = writeln!(s, "      \"inputs\": [{}],", inputs.join(", "));
                s.push_str("      \"nodes\": [\n");
                for (ni, node) in dag.nodes().iter().enumerate() {
                    let args: Vec<String> = node
                        .args
                        .iter()
                        .map(|a| match a {
                            NodeRef::Input(i) => format!("\"{i}\""),
                            NodeRef::Node(j) => j.to_string(),
                        })
                        .collect();
                    let sep = if ni + 1 < dag.len() { "," } else { "" };
                    let _ = writeln!(s, "        {{\"op\": \"{}\", \"args\": [{}]}}{sep}", node.op, args.join(", "));
                }
                s.push_str("      ]\n    }");
            }
        }
        s.push_str(if li + 1 < spec.len() { ",\n" } else { "\n" });
    }
    s.push_str("  ]\n}\n");
    s
}

pub fn from_json(text: &str) -> Result<BackboneSpec> {
    let raw: RawSpec = serde_json::from_str(text).map_err(|e| SearchSpaceError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if raw.version != FORMAT_VERSION {
        return Err(field_err("version".into(), format!("unsupported version {}", raw.version)));
    }
    let mut layers = Vec::with_capacity(raw.layers.len());
    for (li, l) in raw.layers.into_iter().enumerate() {
        let at = |f: &str| format!("layers[{li}].{f}");
        let layer = match l.kind.as_str() {
            "conv" => {
                if l.inputs.is_some() || l.nodes.is_some() {
                    return Err(field_err(at("type"), "conv layers take only `kernel`"));
                }
                LayerSpec::Conv(l.kernel.ok_or_else(|| field_err(at("kernel"), "missing"))?)
            }
            "attention" => {
                if l.kernel.is_some() {
                    return Err(field_err(at("kernel"), "attention layers have no kernel"));
                }
                let inputs = l
                    .inputs
                    .ok_or_else(|| field_err(at("inputs"), "missing"))?
                    .iter()
                    .map(|s| InputNode::from_name(s).ok_or_else(|| field_err(at("inputs"), format!("unknown input {s:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                let mut nodes = Vec::new();
                for (ni, n) in l.nodes.ok_or_else(|| field_err(at("nodes"), "missing"))?.into_iter().enumerate() {
                    let op = PrimitiveOp::from_name(&n.op)
                        .ok_or_else(|| field_err(at(&format!("nodes[{ni}].op")), format!("unknown op {:?}", n.op)))?;
                    let args = n
                        .args
                        .into_iter()
                        .map(|a| match a {
                            RawArg::Node(j) => Ok(NodeRef::Node(j)),
                            RawArg::Input(s) => InputNode::from_name(&s)
                                .map(NodeRef::Input)
                                .ok_or_else(|| field_err(at(&format!("nodes[{ni}].args")), format!("unknown input {s:?}"))),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    nodes.push(DagNode { op, args });
                }
                let dag = AttentionDag::new(inputs, nodes).map_err(|e| field_err(at("nodes"), e.to_string()))?;
                LayerSpec::Attention(dag)
            }
            other => return Err(field_err(at("type"), format!("unknown layer type {other:?}"))),
        };
        layers.push(layer);
    }
    BackboneSpec::new(layers)
}

/// The architecture as a JSON value, for embedding in other records.
pub fn to_value(spec: &BackboneSpec) -> serde_json::Value {
    serde_json::from_str(&to_json(spec)).expect("canonical writer emits valid JSON")
}

pub fn from_value(value: &serde_json::Value) -> Result<BackboneSpec> {
    from_json(&value.to_string())
}

impl serde::Serialize for BackboneSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_value(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for BackboneSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        from_value(&v).map_err(serde::de::Error::custom)
    }
}
