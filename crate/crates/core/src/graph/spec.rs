//! Line-oriented model-spec format.
//!
//! ```text
//! # comment
//! <name>: <kind>(<key>=<value>, ...) [<- <input>[, <input>]]
//! ```
//!
//! | kind       | arguments                                                         |
//! |------------|-------------------------------------------------------------------|
//! | `input`    | `channels`, `height`, `width` (all required)                      |
//! | `conv2d`   | `out`, `kernel` or `kernel_h`+`kernel_w`, `stride`=1, `padding`=0, `bn`=false |
//! | `dwconv2d` | `kernel`, `stride`=1, `padding`=0, `bn`=false                     |
//! | `fc`       | `out`                                                             |
//! | `maxpool`  | `kernel`, `stride`=kernel                                         |
//! | `relu`, `gap`, `add`, `flatten`, `output` | none                               |
//!
//! Node ids follow line order. Inputs may name any node in the file; unknown
//! names and unknown arguments are rejected.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::{Graph, LayerKind, Node};
use crate::error::{Error, Result};

struct Line<'a> {
    number: usize,
    name: &'a str,
    kind: LayerKind,
    inputs: Vec<&'a str>,
}

fn syntax(line: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        message: message.into(),
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
}

struct Args<'a> {
    line: usize,
    kind: &'a str,
    values: BTreeMap<&'a str, &'a str>,
}

impl<'a> Args<'a> {
    fn parse(line: usize, kind: &'a str, text: &'a str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| syntax(line, format!("expected key=value, found `{part}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !is_ident(k) || v.is_empty() {
                return Err(syntax(line, format!("malformed argument `{part}`")));
            }
            if values.insert(k, v).is_some() {
                return Err(syntax(line, format!("duplicate argument `{k}`")));
            }
        }
        Ok(Args { line, kind, values })
    }

    fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.values
            .remove(key)
            .map(|v| {
                v.parse::<usize>().map_err(|_| {
                    syntax(
                        self.line,
                        format!("`{key}` must be a non-negative integer, found `{v}`"),
                    )
                })
            })
            .transpose()
    }

    fn require(&mut self, key: &str) -> Result<usize> {
        self.take_usize(key)?.ok_or_else(|| {
            syntax(
                self.line,
                format!("{} requires argument `{key}`", self.kind),
            )
        })
    }

    fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        self.values
            .remove(key)
            .map(|v| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(syntax(
                    self.line,
                    format!("`{key}` must be true or false, found `{v}`"),
                )),
            })
            .transpose()
    }

    fn finish(self) -> Result<()> {
        match self.values.keys().next() {
            None => Ok(()),
            Some(k) => Err(syntax(
                self.line,
                format!("unknown argument `{k}` for {}", self.kind),
            )),
        }
    }
}

fn parse_kind(line: usize, kind: &str, args: &str) -> Result<LayerKind> {
    let mut a = Args::parse(line, kind, args)?;
    let parsed = match kind {
        "input" => LayerKind::Input {
            channels: a.require("channels")?,
            height: a.require("height")?,
            width: a.require("width")?,
        },
        "conv2d" => {
            let kernel = a.take_usize("kernel")?;
            let kh = a.take_usize("kernel_h")?;
            let kw = a.take_usize("kernel_w")?;
            let (kernel_h, kernel_w) = match (kernel, kh, kw) {
                (Some(k), None, None) => (k, k),
                (None, Some(h), Some(w)) => (h, w),
                _ => {
                    return Err(syntax(
                        line,
                        "conv2d needs either `kernel` or both `kernel_h` and `kernel_w`",
                    ))
                }
            };
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                out_channels: a.require("out")?,
                stride: a.take_usize("stride")?.unwrap_or(1),
                padding: a.take_usize("padding")?.unwrap_or(0),
                batch_norm: a.take_bool("bn")?.unwrap_or(false),
            }
        }
        "dwconv2d" => LayerKind::DepthwiseConv2d {
            kernel: a.require("kernel")?,
            stride: a.take_usize("stride")?.unwrap_or(1),
            padding: a.take_usize("padding")?.unwrap_or(0),
            batch_norm: a.take_bool("bn")?.unwrap_or(false),
        },
        "fc" => LayerKind::FullyConnected {
            out_units: a.require("out")?,
        },
        "maxpool" => {
            let kernel = a.require("kernel")?;
            LayerKind::MaxPool {
                kernel,
                stride: a.take_usize("stride")?.unwrap_or(kernel),
            }
        }
        "relu" => LayerKind::Relu,
        "gap" => LayerKind::GlobalAvgPool,
        "add" => LayerKind::Add,
        "flatten" => LayerKind::Flatten,
        "output" => LayerKind::Output,
        other => return Err(syntax(line, format!("unknown layer kind `{other}`"))),
    };
    a.finish()?;
    Ok(parsed)
}

fn parse_line(number: usize, text: &str) -> Result<Line<'_>> {
    let (name, rest) = text
        .split_once(':')
        .ok_or_else(|| syntax(number, "expected `<name>: <kind>(...)`"))?;
    let name = name.trim();
    if !is_ident(name) {
        return Err(syntax(number, format!("invalid node name `{name}`")));
    }
    let (call, inputs) = match rest.split_once("<-") {
        Some((c, i)) => (c.trim(), Some(i.trim())),
        None => (rest.trim(), None),
    };
    let open = call
        .find('(')
        .ok_or_else(|| syntax(number, "expected `(` after layer kind"))?;
    if !call.ends_with(')') {
        return Err(syntax(number, "expected `)` to close the argument list"));
    }
    let kind_name = call[..open].trim();
    let args = &call[open + 1..call.len() - 1];
    if args.contains('(') || args.contains(')') {
        return Err(syntax(number, "unbalanced parentheses"));
    }
    let kind = parse_kind(number, kind_name, args)?;
    let inputs = match inputs {
        None => Vec::new(),
        Some(list) => {
            let names: Vec<&str> = list.split(',').map(str::trim).collect();
            if names.iter().any(|n| !is_ident(n)) {
                return Err(syntax(number, format!("malformed input list `{list}`")));
            }
            names
        }
    };
    Ok(Line {
        number,
        name,
        kind,
        inputs,
    })
}

/// Parses a model spec into a validated graph.
pub fn parse_model_spec(text: &str) -> Result<Graph> {
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        lines.push(parse_line(i + 1, content)?);
    }

    let mut ids = HashMap::new();
    for (id, l) in lines.iter().enumerate() {
        if ids.insert(l.name, id).is_some() {
            return Err(Error::InvalidGraph(format!(
                "line {}: duplicate node name `{}`",
                l.number, l.name
            )));
        }
    }
    let mut nodes = Vec::with_capacity(lines.len());
    for l in &lines {
        let mut inputs = Vec::with_capacity(l.inputs.len());
        for name in &l.inputs {
            let id = ids.get(name).ok_or_else(|| {
                Error::InvalidGraph(format!(
                    "line {}: `{}` references unknown node `{name}`",
                    l.number, l.name
                ))
            })?;
            inputs.push(*id);
        }
        nodes.push(Node::new(l.name, l.kind.clone(), inputs));
    }
    Graph::new(nodes)
}

/// Serialises a graph back to model-spec text. `parse_model_spec` of the result
/// reproduces the graph exactly.
pub fn write_model_spec(graph: &Graph) -> String {
    let mut out = String::new();
    for node in graph.nodes() {
        let args = match &node.kind {
            LayerKind::Input {
                channels,
                height,
                width,
            } => format!("channels={channels}, height={height}, width={width}"),
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                stride,
                padding,
                out_channels,
                batch_norm,
            } => {
                let kernel = if kernel_h == kernel_w {
                    format!("kernel={kernel_h}")
                } else {
                    format!("kernel_h={kernel_h}, kernel_w={kernel_w}")
                };
                format!(
                    "out={out_channels}, {kernel}, stride={stride}, padding={padding}, bn={batch_norm}"
                )
            }
            LayerKind::DepthwiseConv2d {
                kernel,
                stride,
                padding,
                batch_norm,
            } => format!("kernel={kernel}, stride={stride}, padding={padding}, bn={batch_norm}"),
            LayerKind::FullyConnected { out_units } => format!("out={out_units}"),
            LayerKind::MaxPool { kernel, stride } => format!("kernel={kernel}, stride={stride}"),
            _ => String::new(),
        };
        let _ = write!(out, "{}: {}({args})", node.name, node.kind.name());
        if !node.inputs.is_empty() {
            let inputs: Vec<&str> = node
                .inputs
                .iter()
                .map(|&p| graph.node(p).name.as_str())
                .collect();
            let _ = write!(out, " <- {}", inputs.join(", "));
        }
        out.push('\n');
    }
    out
}
