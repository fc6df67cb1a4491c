//! Architecture description language: grammar, AST, structural validation,
//! and shape inference.
//!
//! The language is line-oriented:
//!
//! ```text
//! # comment
//! input 1x64x64
//! node stem conv k=3,s=2,c=8
//! node b1 resblock
//! node d1 aads k=3
//! node pool gap
//! node head dualhead c=2
//! edge input stem
//! edge stem b1
//! edge b1 d1
//! edge d1 pool
//! edge pool head
//! output head
//! ```
//!
//! `input` is a pseudo node id: exactly one node consumes it and that node is
//! the designated input layer (the only place unrestricted downsampling is
//! allowed). A node with several incoming edges sums them elementwise, so all
//! its predecessors must produce equal shapes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};

/// Pseudo id for the raw input inside edge declarations.
pub const INPUT_ID: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// Standard conv, same padding `k/2`.
    Conv { k: usize, s: usize, c: usize, g: usize },
    /// Depthwise 3x3-style conv (groups = channels), same padding.
    DwConv { k: usize, s: usize },
    /// 1x1 conv.
    PwConv { c: usize, s: usize },
    /// Anti-aliased downsample, filter size 3 or 5, fixed stride 2.
    Aads { k: usize },
    /// Attention condenser; `embed` is the condensed embedding width
    /// (`None` = derived at compile time as max(2, C/4)).
    Acond { embed: Option<usize> },
    ResBlock,
    Relu,
    Bn,
    MaxPool { k: usize, s: usize },
    Gap,
    DualHead { classes: usize },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv { .. } => "conv",
            OpKind::DwConv { .. } => "dwconv",
            OpKind::PwConv { .. } => "pwconv",
            OpKind::Aads { .. } => "aads",
            OpKind::Acond { .. } => "acond",
            OpKind::ResBlock => "resblock",
            OpKind::Relu => "relu",
            OpKind::Bn => "bn",
            OpKind::MaxPool { .. } => "maxpool",
            OpKind::Gap => "gap",
            OpKind::DualHead { .. } => "dualhead",
        }
    }

    fn params_text(&self) -> String {
        match self {
            OpKind::Conv { k, s, c, g } => format!(" k={k},s={s},c={c},g={g}"),
            OpKind::DwConv { k, s } => format!(" k={k},s={s}"),
            OpKind::PwConv { c, s } => format!(" c={c},s={s}"),
            OpKind::Aads { k } => format!(" k={k}"),
            OpKind::Acond { embed: Some(e) } => format!(" c={e}"),
            OpKind::Acond { embed: None } => String::new(),
            OpKind::MaxPool { k, s } => format!(" k={k},s={s}"),
            OpKind::DualHead { classes } => format!(" c={classes}"),
            OpKind::ResBlock | OpKind::Relu | OpKind::Bn | OpKind::Gap => String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchNode {
    pub id: String,
    pub op: OpKind,
}

/// Architecture genome: a DAG of typed nodes over a declared input shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    /// C, H, W of the single input.
    pub input: (usize, usize, usize),
    pub nodes: Vec<ArchNode>,
    /// (src, dst); src may be [`INPUT_ID`].
    pub edges: Vec<(String, String)>,
    /// Optional parallel-column groupings (used by the mutation operators).
    pub columns: Vec<Vec<String>>,
    pub output: String,
}

/// Value shape flowing along an edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial { c, h, w } => write!(f, "{c}x{h}x{w}"),
            Shape::Flat { d } => write!(f, "flat {d}"),
        }
    }
}

/// Everything shape inference learns about a spec, reused by the cost model,
/// the constraint checker, and the graph compiler.
#[derive(Clone, Debug)]
pub struct Analysis {
    /// Topological order as indices into `spec.nodes`; ties broken by node id.
    pub order: Vec<usize>,
    /// Output shape per node id.
    pub shapes: BTreeMap<String, Shape>,
    /// Post-join input shape per node id.
    pub in_shapes: BTreeMap<String, Shape>,
    /// Predecessors per node id in edge declaration order (may contain
    /// [`INPUT_ID`]).
    pub preds: BTreeMap<String, Vec<String>>,
    /// Resolved attention-condenser embedding widths.
    pub embed: BTreeMap<String, usize>,
    /// Id of the node that consumes the raw input.
    pub stem: String,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn valid_id(s: &str) -> bool {
    !s.is_empty()
        && s != INPUT_ID
        && s.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

struct KeyVals {
    k: Option<usize>,
    s: Option<usize>,
    c: Option<usize>,
    g: Option<usize>,
}

fn parse_keyvals(text: &str, line: usize) -> Result<KeyVals> {
    let mut kv = KeyVals { k: None, s: None, c: None, g: None };
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(parse_err(line, "empty parameter entry"));
        }
        let Some((key, val)) = part.split_once('=') else {
            return Err(parse_err(line, format!("expected key=value, got `{part}`")));
        };
        let val: usize = val
            .parse()
            .map_err(|_| parse_err(line, format!("parameter `{key}` needs a positive integer, got `{val}`")))?;
        if val == 0 {
            return Err(parse_err(line, format!("parameter `{key}` must be >= 1")));
        }
        let slot = match key {
            "k" => &mut kv.k,
            "s" => &mut kv.s,
            "c" => &mut kv.c,
            "g" => &mut kv.g,
            other => return Err(parse_err(line, format!("unknown parameter `{other}`"))),
        };
        if slot.is_some() {
            return Err(parse_err(line, format!("parameter `{key}` given twice")));
        }
        *slot = Some(val);
    }
    Ok(kv)
}

fn build_op(op_name: &str, kv: KeyVals, line: usize) -> Result<OpKind> {
    let reject = |cond: bool, what: &str| -> Result<()> {
        if cond {
            Err(parse_err(line, format!("`{op_name}` does not take parameter `{what}`")))
        } else {
            Ok(())
        }
    };
    let op = match op_name {
        "conv" => {
            let c = kv.c.ok_or_else(|| parse_err(line, "`conv` requires c=<out channels>"))?;
            OpKind::Conv { k: kv.k.unwrap_or(3), s: kv.s.unwrap_or(1), c, g: kv.g.unwrap_or(1) }
        }
        "dwconv" => {
            reject(kv.c.is_some(), "c")?;
            reject(kv.g.is_some(), "g")?;
            OpKind::DwConv { k: kv.k.unwrap_or(3), s: kv.s.unwrap_or(1) }
        }
        "pwconv" => {
            reject(kv.k.is_some(), "k")?;
            reject(kv.g.is_some(), "g")?;
            let c = kv.c.ok_or_else(|| parse_err(line, "`pwconv` requires c=<out channels>"))?;
            OpKind::PwConv { c, s: kv.s.unwrap_or(1) }
        }
        "aads" => {
            reject(kv.s.is_some(), "s")?;
            reject(kv.c.is_some(), "c")?;
            reject(kv.g.is_some(), "g")?;
            OpKind::Aads { k: kv.k.unwrap_or(3) }
        }
        "acond" => {
            reject(kv.k.is_some(), "k")?;
            reject(kv.s.is_some(), "s")?;
            reject(kv.g.is_some(), "g")?;
            OpKind::Acond { embed: kv.c }
        }
        "resblock" | "relu" | "bn" | "gap" => {
            reject(kv.k.is_some(), "k")?;
            reject(kv.s.is_some(), "s")?;
            reject(kv.c.is_some(), "c")?;
            reject(kv.g.is_some(), "g")?;
            match op_name {
                "resblock" => OpKind::ResBlock,
                "relu" => OpKind::Relu,
                "bn" => OpKind::Bn,
                _ => OpKind::Gap,
            }
        }
        "maxpool" => {
            reject(kv.c.is_some(), "c")?;
            reject(kv.g.is_some(), "g")?;
            OpKind::MaxPool { k: kv.k.unwrap_or(2), s: kv.s.unwrap_or(2) }
        }
        "dualhead" => {
            reject(kv.k.is_some(), "k")?;
            reject(kv.s.is_some(), "s")?;
            reject(kv.g.is_some(), "g")?;
            OpKind::DualHead { classes: kv.c.unwrap_or(2) }
        }
        other => return Err(parse_err(line, format!("unknown op `{other}`"))),
    };
    Ok(op)
}

/// Parse DSL source into an [`ArchSpec`]; performs full structural validation
/// (unique ids, known endpoints, single input consumer, acyclicity,
/// reachability) before returning.
pub fn parse_arch(text: &str) -> Result<ArchSpec> {
    let mut input: Option<(usize, usize, usize)> = None;
    let mut nodes: Vec<ArchNode> = Vec::new();
    let mut ids: BTreeSet<String> = BTreeSet::new();
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut edge_lines: Vec<usize> = Vec::new();
    let mut columns: Vec<Vec<String>> = Vec::new();
    let mut output: Option<(String, usize)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let keyword = tokens.next().expect("non-empty line has a token");
        match keyword {
            "input" => {
                if input.is_some() {
                    return Err(parse_err(line, "duplicate `input` declaration"));
                }
                let shape = tokens.next().ok_or_else(|| parse_err(line, "`input` requires CxHxW"))?;
                if tokens.next().is_some() {
                    return Err(parse_err(line, "trailing tokens after input shape"));
                }
                let dims: Vec<usize> = shape
                    .split('x')
                    .map(|p| p.parse::<usize>().map_err(|_| parse_err(line, format!("bad input shape `{shape}`"))))
                    .collect::<Result<_>>()?;
                let [c, h, w] = dims[..] else {
                    return Err(parse_err(line, format!("input shape needs 3 extents, got `{shape}`")));
                };
                if c == 0 || h == 0 || w == 0 {
                    return Err(parse_err(line, "input extents must be >= 1"));
                }
                input = Some((c, h, w));
            }
            "node" => {
                let id = tokens.next().ok_or_else(|| parse_err(line, "`node` requires an id"))?;
                let op_name = tokens.next().ok_or_else(|| parse_err(line, "`node` requires an op"))?;
                if !valid_id(id) {
                    return Err(parse_err(line, format!("invalid node id `{id}`")));
                }
                if !ids.insert(id.to_string()) {
                    return Err(parse_err(line, format!("duplicate node id `{id}`")));
                }
                let rest: Vec<&str> = tokens.collect();
                let kv = if rest.is_empty() {
                    KeyVals { k: None, s: None, c: None, g: None }
                } else {
                    parse_keyvals(&rest.join(""), line)?
                };
                let op = build_op(op_name, kv, line)?;
                nodes.push(ArchNode { id: id.to_string(), op });
            }
            "edge" => {
                let src = tokens.next().ok_or_else(|| parse_err(line, "`edge` requires src and dst"))?;
                let dst = tokens.next().ok_or_else(|| parse_err(line, "`edge` requires src and dst"))?;
                if tokens.next().is_some() {
                    return Err(parse_err(line, "trailing tokens after edge"));
                }
                edges.push((src.to_string(), dst.to_string()));
                edge_lines.push(line);
            }
            "column" => {
                let members: Vec<String> = tokens.map(str::to_string).collect();
                if members.is_empty() {
                    return Err(parse_err(line, "`column` requires at least one node id"));
                }
                columns.push(members);
            }
            "output" => {
                if output.is_some() {
                    return Err(parse_err(line, "duplicate `output` declaration"));
                }
                let id = tokens.next().ok_or_else(|| parse_err(line, "`output` requires a node id"))?;
                output = Some((id.to_string(), line));
            }
            other => return Err(parse_err(line, format!("unknown keyword `{other}`"))),
        }
    }

    let input = input.ok_or_else(|| parse_err(0, "missing `input` declaration"))?;
    let (output, _out_line) = output.ok_or_else(|| parse_err(0, "missing `output` declaration"))?;
    let spec = ArchSpec { input, nodes, edges, columns, output };
    validate_structure_with_lines(&spec, Some(&edge_lines))?;
    Ok(spec)
}

/// Canonical text form; `parse_arch(print_arch(spec))` reproduces `spec`
/// structurally (all defaults materialized, declaration order preserved).
pub fn print_arch(spec: &ArchSpec) -> String {
    let mut out = String::new();
    let (c, h, w) = spec.input;
    out.push_str(&format!("input {c}x{h}x{w}\n"));
    for node in &spec.nodes {
        out.push_str(&format!("node {} {}{}\n", node.id, node.op.name(), node.op.params_text()));
    }
    for (src, dst) in &spec.edges {
        out.push_str(&format!("edge {src} {dst}\n"));
    }
    for col in &spec.columns {
        out.push_str(&format!("column {}\n", col.join(" ")));
    }
    out.push_str(&format!("output {}\n", spec.output));
    out
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_arch(self))
    }
}

/// Structural validation for programmatically built specs.
pub fn validate_structure(spec: &ArchSpec) -> Result<()> {
    validate_structure_with_lines(spec, None)
}

fn graph_err(lines: Option<&[usize]>, edge_idx: Option<usize>, msg: String) -> Error {
    match (lines, edge_idx) {
        (Some(lines), Some(i)) => Error::Parse { line: lines[i], msg },
        _ => Error::Graph(msg),
    }
}

fn validate_structure_with_lines(spec: &ArchSpec, edge_lines: Option<&[usize]>) -> Result<()> {
    let mut ids = BTreeSet::new();
    for node in &spec.nodes {
        if !ids.insert(node.id.as_str()) {
            return Err(Error::Graph(format!("duplicate node id `{}`", node.id)));
        }
    }
    if spec.nodes.is_empty() {
        return Err(Error::Graph("spec has no nodes".into()));
    }

    let mut input_consumers: Vec<&str> = Vec::new();
    for (i, (src, dst)) in spec.edges.iter().enumerate() {
        if src != INPUT_ID && !ids.contains(src.as_str()) {
            return Err(graph_err(edge_lines, Some(i), format!("edge source `{src}` is not a node")));
        }
        if !ids.contains(dst.as_str()) {
            return Err(graph_err(edge_lines, Some(i), format!("edge target `{dst}` is not a node")));
        }
        if src == dst {
            return Err(graph_err(edge_lines, Some(i), format!("self edge on `{src}`")));
        }
        if src == INPUT_ID {
            input_consumers.push(dst);
        }
    }
    for (i, (src, dst)) in spec.edges.iter().enumerate() {
        if spec.edges[..i].contains(&(src.clone(), dst.clone())) {
            return Err(graph_err(edge_lines, Some(i), format!("duplicate edge {src} -> {dst}")));
        }
    }

    match input_consumers.len() {
        0 => return Err(Error::Graph("no node consumes `input`".into())),
        1 => {}
        _ => {
            return Err(Error::Graph(format!(
                "`input` must feed exactly one node, feeds {}",
                input_consumers.join(", ")
            )))
        }
    }
    let stem = input_consumers[0];
    let stem_extra = spec.edges.iter().any(|(src, dst)| dst == stem && src != INPUT_ID);
    if stem_extra {
        return Err(Error::Graph(format!("input layer `{stem}` cannot have other incoming edges")));
    }

    if !ids.contains(spec.output.as_str()) {
        return Err(Error::Graph(format!("output node `{}` does not exist", spec.output)));
    }

    for col in &spec.columns {
        let mut seen = BTreeSet::new();
        for id in col {
            if !ids.contains(id.as_str()) {
                return Err(Error::Graph(format!("column member `{id}` is not a node")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Graph(format!("column repeats member `{id}`")));
            }
        }
    }
    let mut in_any_column = BTreeSet::new();
    for col in &spec.columns {
        for id in col {
            if !in_any_column.insert(id.as_str()) {
                return Err(Error::Graph(format!("node `{id}` appears in two columns")));
            }
        }
    }

    // Kahn's algorithm; leftovers mean a cycle.
    let order = try_topo_order(spec);
    if order.len() < spec.nodes.len() {
        let in_order: BTreeSet<usize> = order.into_iter().collect();
        let stuck: Vec<&str> = spec
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_order.contains(i))
            .map(|(_, n)| n.id.as_str())
            .collect();
        // Point the diagnostic at an edge inside the cycle when line info exists.
        let cyc_edge = spec
            .edges
            .iter()
            .position(|(src, dst)| stuck.contains(&src.as_str()) && stuck.contains(&dst.as_str()));
        return Err(graph_err(
            edge_lines,
            cyc_edge,
            format!("cycle through nodes: {}", stuck.join(", ")),
        ));
    }

    // Every node must be reachable from the input and reach the output;
    // orphans would silently distort the cost model.
    let index: BTreeMap<&str, usize> = spec.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let n = spec.nodes.len();
    let mut fwd = vec![false; n];
    let mut stack = vec![index[stem]];
    while let Some(i) = stack.pop() {
        if fwd[i] {
            continue;
        }
        fwd[i] = true;
        let id = spec.nodes[i].id.as_str();
        for (src, dst) in &spec.edges {
            if src == id {
                stack.push(index[dst.as_str()]);
            }
        }
    }
    let mut back = vec![false; n];
    let mut stack = vec![index[spec.output.as_str()]];
    while let Some(i) = stack.pop() {
        if back[i] {
            continue;
        }
        back[i] = true;
        let id = spec.nodes[i].id.as_str();
        for (src, dst) in &spec.edges {
            if dst == id && src != INPUT_ID {
                stack.push(index[src.as_str()]);
            }
        }
    }
    for i in 0..n {
        if !fwd[i] {
            return Err(Error::Graph(format!("node `{}` unreachable from the input", spec.nodes[i].id)));
        }
        if !back[i] {
            return Err(Error::Graph(format!("node `{}` does not reach the output", spec.nodes[i].id)));
        }
    }
    Ok(())
}

/// Kahn topological order over node indices, ready set sorted by node id.
/// Returns fewer than `nodes.len()` entries when the graph has a cycle.
fn try_topo_order(spec: &ArchSpec) -> Vec<usize> {
    let index: BTreeMap<&str, usize> = spec.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let n = spec.nodes.len();
    let mut indegree = vec![0usize; n];
    for (src, dst) in &spec.edges {
        if src == INPUT_ID {
            continue;
        }
        if let (Some(_), Some(&d)) = (index.get(src.as_str()), index.get(dst.as_str())) {
            indegree[d] += 1;
        }
    }
    // Ready set keyed by id for the deterministic tie-break.
    let mut ready: BTreeSet<(&str, usize)> =
        indegree.iter().enumerate().filter(|(_, &d)| d == 0).map(|(i, _)| (spec.nodes[i].id.as_str(), i)).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&(id, i)) = ready.iter().next() {
        ready.remove(&(id, i));
        order.push(i);
        for (src, dst) in &spec.edges {
            if src == id {
                if let Some(&d) = index.get(dst.as_str()) {
                    indegree[d] -= 1;
                    if indegree[d] == 0 {
                        ready.insert((spec.nodes[d].id.as_str(), d));
                    }
                }
            }
        }
    }
    order
}

/// Shape-check a structurally valid spec and return everything later passes
/// need. Fails with endpoint-naming diagnostics on any inconsistency.
pub fn analyze(spec: &ArchSpec) -> Result<Analysis> {
    validate_structure(spec)?;
    let order = try_topo_order(spec);
    debug_assert_eq!(order.len(), spec.nodes.len());

    let mut preds: BTreeMap<String, Vec<String>> = spec.nodes.iter().map(|n| (n.id.clone(), Vec::new())).collect();
    for (src, dst) in &spec.edges {
        preds.get_mut(dst).expect("validated endpoint").push(src.clone());
    }
    let stem = spec
        .edges
        .iter()
        .find(|(src, _)| src == INPUT_ID)
        .map(|(_, dst)| dst.clone())
        .expect("validated input consumer");

    let (ic, ih, iw) = spec.input;
    let input_shape = Shape::Spatial { c: ic, h: ih, w: iw };
    let mut shapes: BTreeMap<String, Shape> = BTreeMap::new();
    let mut in_shapes: BTreeMap<String, Shape> = BTreeMap::new();
    let mut embed: BTreeMap<String, usize> = BTreeMap::new();

    for &i in &order {
        let node = &spec.nodes[i];
        let node_preds = &preds[&node.id];
        // Resolve the post-join input shape.
        let mut in_shape: Option<(Shape, &str)> = None;
        for p in node_preds {
            let sh = if p == INPUT_ID { input_shape } else { shapes[p.as_str()] };
            match in_shape {
                None => in_shape = Some((sh, p)),
                Some((prev, prev_id)) => {
                    if prev != sh {
                        return Err(Error::Graph(format!(
                            "join at `{}`: `{prev_id}` yields {prev} but `{p}` yields {sh}",
                            node.id
                        )));
                    }
                }
            }
        }
        let (in_shape, _) = in_shape.expect("reachable node has a predecessor");
        in_shapes.insert(node.id.clone(), in_shape);

        let (out, acond_embed) = op_out_shape(node, in_shape)?;
        if let Some(width) = acond_embed {
            embed.insert(node.id.clone(), width);
        }
        shapes.insert(node.id.clone(), out);
    }

    Ok(Analysis { order, shapes, in_shapes, preds, embed, stem })
}

/// Output shape of one node given its (post-join) input shape; the second
/// element is the resolved embedding width for acond nodes.
fn op_out_shape(node: &ArchNode, in_shape: Shape) -> Result<(Shape, Option<usize>)> {
    let spatial = |what: &str| -> Result<(usize, usize, usize)> {
        match in_shape {
            Shape::Spatial { c, h, w } => Ok((c, h, w)),
            Shape::Flat { .. } => {
                Err(Error::Graph(format!("`{}` ({what}) needs a spatial input, got {in_shape}", node.id)))
            }
        }
    };

    let mut acond_embed = None;
    let out = match node.op {
            OpKind::Conv { k, s, c, g } => {
                let (cin, h, w) = spatial("conv")?;
                if cin % g != 0 || c % g != 0 {
                    return Err(Error::Graph(format!(
                        "`{}`: groups {g} must divide in channels {cin} and out channels {c}",
                        node.id
                    )));
                }
                let pad = k / 2;
                conv_out(&node.id, h, w, k, s, pad).map(|(h, w)| Shape::Spatial { c, h, w })?
            }
            OpKind::DwConv { k, s } => {
                let (cin, h, w) = spatial("dwconv")?;
                let pad = k / 2;
                conv_out(&node.id, h, w, k, s, pad).map(|(h, w)| Shape::Spatial { c: cin, h, w })?
            }
            OpKind::PwConv { c, s } => {
                let (_, h, w) = spatial("pwconv")?;
                conv_out(&node.id, h, w, 1, s, 0).map(|(h, w)| Shape::Spatial { c, h, w })?
            }
            OpKind::Aads { k } => {
                let (c, h, w) = spatial("aads")?;
                if k != 3 && k != 5 {
                    return Err(Error::Graph(format!("`{}`: aads filter size must be 3 or 5, got {k}", node.id)));
                }
                if h < 2 || w < 2 {
                    return Err(Error::Graph(format!("`{}`: aads needs H,W >= 2, got {h}x{w}", node.id)));
                }
                Shape::Spatial { c, h: h.div_ceil(2), w: w.div_ceil(2) }
            }
            OpKind::Acond { embed: e } => {
                let (c, h, w) = spatial("acond")?;
                if h < 2 || w < 2 {
                    return Err(Error::Graph(format!("`{}`: acond needs H,W >= 2, got {h}x{w}", node.id)));
                }
                acond_embed = Some(e.unwrap_or_else(|| (c / 4).max(2)));
                in_shape
            }
            OpKind::ResBlock => {
                let _ = spatial("resblock")?;
                in_shape
            }
            OpKind::Relu => in_shape,
            OpKind::Bn => {
                let _ = spatial("bn")?;
                in_shape
            }
            OpKind::MaxPool { k, s } => {
                let (c, h, w) = spatial("maxpool")?;
                if h < k || w < k {
                    return Err(Error::Graph(format!(
                        "`{}`: maxpool window {k} exceeds input {h}x{w}",
                        node.id
                    )));
                }
                Shape::Spatial { c, h: (h - k) / s + 1, w: (w - k) / s + 1 }
            }
            OpKind::Gap => {
                let (c, _, _) = spatial("gap")?;
                Shape::Flat { d: c }
            }
            OpKind::DualHead { classes } => {
                if classes < 2 {
                    return Err(Error::Graph(format!("`{}`: dualhead needs >= 2 classes", node.id)));
                }
                match in_shape {
                    Shape::Flat { .. } => Shape::Flat { d: classes },
                    Shape::Spatial { .. } => {
                        return Err(Error::Graph(format!(
                            "`{}` (dualhead) needs flat features, got {in_shape}; pool first",
                            node.id
                        )))
                    }
                }
            }
        };
    Ok((out, acond_embed))
}

/// Tolerant shape walk for the mutation repairer. At a join whose inputs are
/// spatial with equal extent but different channel counts, returns the first
/// such conflict as `(pred id, join id, pred channels, wanted channels)` and
/// otherwise keeps walking with the first predecessor's shape. Any other
/// inconsistency (or a structurally invalid spec) yields `None`: not
/// repairable by a channel adapter.
pub(crate) fn first_join_channel_mismatch(spec: &ArchSpec) -> Option<(String, String, usize, usize)> {
    if validate_structure(spec).is_err() {
        return None;
    }
    let order = try_topo_order(spec);
    if order.len() != spec.nodes.len() {
        return None;
    }
    let mut preds: BTreeMap<&str, Vec<&str>> = spec.nodes.iter().map(|n| (n.id.as_str(), Vec::new())).collect();
    for (src, dst) in &spec.edges {
        preds.get_mut(dst.as_str()).expect("validated endpoint").push(src);
    }
    let (ic, ih, iw) = spec.input;
    let input_shape = Shape::Spatial { c: ic, h: ih, w: iw };
    let mut shapes: BTreeMap<&str, Shape> = BTreeMap::new();
    for &i in &order {
        let node = &spec.nodes[i];
        let mut in_shape: Option<Shape> = None;
        for &p in &preds[node.id.as_str()] {
            let sh = if p == INPUT_ID { input_shape } else { shapes[p] };
            match in_shape {
                None => in_shape = Some(sh),
                Some(prev) if prev == sh => {}
                Some(prev) => match (prev, sh) {
                    (Shape::Spatial { c: want, h, w }, Shape::Spatial { c: have, h: h2, w: w2 })
                        if h == h2 && w == w2 =>
                    {
                        return Some((p.to_string(), node.id.clone(), have, want));
                    }
                    _ => return None,
                },
            }
        }
        let in_shape = in_shape.expect("reachable node has a predecessor");
        match op_out_shape(node, in_shape) {
            Ok((out, _)) => {
                shapes.insert(node.id.as_str(), out);
            }
            Err(_) => return None,
        }
    }
    None
}

fn conv_out(id: &str, h: usize, w: usize, k: usize, s: usize, pad: usize) -> Result<(usize, usize)> {
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Graph(format!("`{id}`: kernel {k} exceeds padded input {h}x{w}")));
    }
    Ok(((h + 2 * pad - k) / s + 1, (w + 2 * pad - k) / s + 1))
}
