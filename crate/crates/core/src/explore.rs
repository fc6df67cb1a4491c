//! Constrained design exploration: a deterministic seed prototype, a
//! mutation-based candidate generator, the feasibility indicator, a
//! NetScore-style objective, and an elitist refinement loop driven by
//! short proxy-training runs.
//!
//! The loop is a seeded evolutionary search: each iteration evaluates a
//! population, keeps the best-scoring feasible candidates as elites, and
//! fills the next population with mutants of those elites. Infeasible
//! candidates are recorded but never proxy-trained and never become elites.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::constraints::{validate_constraints, Violation, DEFAULT_BUDGET_FLOPS};
use crate::cost::{cost, CostReport};
use crate::data::PlateSample;
use crate::dsl::{
    analyze, first_join_channel_mismatch, parse_arch, print_arch, ArchNode, ArchSpec, OpKind, Shape,
    INPUT_ID,
};
use crate::error::{Error, Result};
use crate::graph::{compile, Graph};
use crate::rng::{derive_seed, derive_seed_indexed, seeded_rng};
use crate::train::{evaluate, train, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct SearchConfig {
    /// Seeds of Eq-style exploration; a candidate's proxy accuracy is the
    /// mean over these seeds. The first seed also drives mutation.
    pub seeds: Vec<u64>,
    pub budget_flops: u64,
    pub iterations: usize,
    pub population: usize,
    pub elite: usize,
    pub proxy_epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            seeds: vec![0],
            budget_flops: DEFAULT_BUDGET_FLOPS,
            iterations: 10,
            population: 8,
            elite: 2,
            proxy_epochs: 3,
            alpha: 2.0,
            beta: 0.5,
            gamma: 0.5,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("search needs at least one seed".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.population == 0 {
            return Err(Error::Config("population must be >= 1".into()));
        }
        if self.elite == 0 || self.elite > self.population {
            return Err(Error::Config(format!(
                "elite must be in 1..=population, got {} of {}",
                self.elite, self.population
            )));
        }
        if self.budget_flops == 0 {
            return Err(Error::Config("budget_flops must be > 0".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One evaluated (or rejected) architecture in the search log.
#[derive(Clone, Debug, Serialize)]
pub struct Candidate {
    #[serde(skip)]
    pub spec: ArchSpec,
    pub spec_text: String,
    pub iteration: usize,
    pub params: u64,
    pub flops: u64,
    pub feasible: bool,
    pub violations: Vec<Violation>,
    /// Present only for feasible candidates (infeasible ones are never
    /// proxy-trained).
    pub proxy_acc: Option<f64>,
    /// Proxy training left the finite range; the candidate scores accuracy 0
    /// and ranks last.
    pub diverged: bool,
    /// Present only for feasible candidates with positive proxy accuracy.
    pub u_value: Option<f64>,
}

/// `20 * log10(acc^alpha / (params_M^beta * flops_M^gamma))`.
pub fn netscore(acc_pct: f64, params_m: f64, flops_m: f64, alpha: f64, beta: f64, gamma: f64) -> Result<f64> {
    for (name, v) in [
        ("accuracy", acc_pct),
        ("params", params_m),
        ("flops", flops_m),
        ("alpha", alpha),
        ("beta", beta),
        ("gamma", gamma),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("netscore {name} must be positive and finite, got {v}")));
        }
    }
    Ok(20.0 * (alpha * acc_pct.log10() - beta * params_m.log10() - gamma * flops_m.log10()))
}

/// Deterministic residual starter network: strided input conv, then
/// residual-block/AADS stages while spatial extent allows, then the pooled
/// dual head. No RNG involved.
pub fn seed_prototype(input: (usize, usize, usize)) -> Result<ArchSpec> {
    let (c, h, w) = input;
    let mut text = format!("input {c}x{h}x{w}\nnode stem conv k=3,s=2,c=8\n");
    let mut edges = String::from("edge input stem\n");
    let (mut ch, mut cw) = ((h + 1) / 2, (w + 1) / 2);
    let mut prev = "stem".to_string();
    let mut stage = 0;
    while ch.min(cw) >= 4 && stage < 2 {
        stage += 1;
        text.push_str(&format!("node b{stage} resblock\nnode d{stage} aads k=3\n"));
        edges.push_str(&format!("edge {prev} b{stage}\nedge b{stage} d{stage}\n"));
        prev = format!("d{stage}");
        (ch, cw) = (ch.div_ceil(2), cw.div_ceil(2));
    }
    text.push_str("node pool gap\nnode head dualhead c=2\n");
    edges.push_str(&format!("edge {prev} pool\nedge pool head\n"));
    parse_arch(&format!("{text}{edges}output head\n"))
}

/// The hand-designed reference network used by the training harness:
/// attention condensers early and mid-network, anti-aliased downsampling for
/// every spatial reduction after the stem, pointwise widenings between
/// stages, and the dual softmax head. Needs at least a 16x16 input.
pub fn reference_arch(input: (usize, usize, usize)) -> Result<ArchSpec> {
    let (c, h, w) = input;
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("reference architecture needs >= 16x16 input, got {h}x{w}")));
    }
    // Full-resolution stem: the first spatial reduction is an AADS node, so
    // low-contrast single-pixel-scale defects are blurred, never aliased,
    // on their way down.
    let text = format!(
        "input {c}x{h}x{w}\n\
         node stem conv k=3,s=1,c=16\n\
         node a1 acond\n\
         node b1 resblock\n\
         node d1 aads k=3\n\
         node w1 pwconv c=24\n\
         node b2 resblock\n\
         node a2 acond\n\
         node d2 aads k=3\n\
         node w2 pwconv c=32\n\
         node b3 resblock\n\
         node a3 acond\n\
         node d3 aads k=5\n\
         node pool gap\n\
         node head dualhead c=2\n\
         edge input stem\nedge stem a1\nedge a1 b1\nedge b1 d1\nedge d1 w1\n\
         edge w1 b2\nedge b2 a2\nedge a2 d2\nedge d2 w2\nedge w2 b3\nedge b3 a3\n\
         edge a3 d3\nedge d3 pool\nedge pool head\noutput head\n"
    );
    parse_arch(&text)
}

fn fresh_id(spec: &ArchSpec, rng: &mut ChaCha8Rng, prefix: &str) -> String {
    loop {
        let id = format!("{prefix}{:04x}", rng.gen::<u16>());
        if id != INPUT_ID && !spec.nodes.iter().any(|n| n.id == id) {
            return id;
        }
    }
}

/// Splice `node` into the middle of edge index `ei`.
fn insert_on_edge(spec: &mut ArchSpec, ei: usize, node: ArchNode) {
    let (src, dst) = spec.edges[ei].clone();
    spec.edges[ei] = (src, node.id.clone());
    spec.edges.push((node.id.clone(), dst));
    spec.nodes.push(node);
}

/// Remove `id`, connecting every predecessor to every successor.
fn bypass_node(spec: &mut ArchSpec, id: &str) {
    let preds: Vec<String> =
        spec.edges.iter().filter(|(_, d)| d == id).map(|(s, _)| s.clone()).collect();
    let succs: Vec<String> =
        spec.edges.iter().filter(|(s, _)| s == id).map(|(_, d)| d.clone()).collect();
    spec.edges.retain(|(s, d)| s != id && d != id);
    for p in &preds {
        for q in &succs {
            if !spec.edges.iter().any(|(s, d)| s == p && d == q) {
                spec.edges.push((p.clone(), q.clone()));
            }
        }
    }
    spec.nodes.retain(|n| n.id != id);
    for col in &mut spec.columns {
        col.retain(|n| n != id);
    }
    spec.columns.retain(|c| !c.is_empty());
}

/// Insert pointwise adapters until every join's inputs agree on channels.
/// Bounded; gives up silently (the caller re-validates anyway).
fn repair_joins(spec: &mut ArchSpec, rng: &mut ChaCha8Rng) {
    for _ in 0..8 {
        let Some((pred, join, _have, want)) = first_join_channel_mismatch(spec) else {
            return;
        };
        let Some(ei) = spec.edges.iter().position(|(s, d)| *s == pred && *d == join) else {
            return;
        };
        let id = fresh_id(spec, rng, "fix");
        insert_on_edge(spec, ei, ArchNode { id, op: OpKind::PwConv { c: want, s: 1 } });
    }
}

fn shape_preserving(op: OpKind) -> bool {
    matches!(op, OpKind::ResBlock | OpKind::Acond { .. } | OpKind::Relu | OpKind::Bn)
}

/// One mutation attempt; `None` when the drawn kind is inapplicable.
fn try_mutation(spec: &ArchSpec, rng: &mut ChaCha8Rng) -> Option<ArchSpec> {
    let analysis = analyze(spec).ok()?;
    let mut out = spec.clone();

    // Edge positions where a body node can be spliced in (never ahead of the
    // input layer), with the shape flowing through them.
    let spliceable: Vec<(usize, Shape)> = spec
        .edges
        .iter()
        .enumerate()
        .filter(|(_, (s, _))| s != INPUT_ID)
        .map(|(i, (s, _))| (i, analysis.shapes[s.as_str()]))
        .collect();
    let spatial_edges: Vec<(usize, usize, usize)> = spliceable
        .iter()
        .filter_map(|&(i, sh)| match sh {
            Shape::Spatial { h, w, .. } => Some((i, h, w)),
            Shape::Flat { .. } => None,
        })
        .collect();

    match rng.gen_range(0..10u32) {
        // Insert an attention condenser.
        0 => {
            let fits: Vec<usize> =
                spatial_edges.iter().filter(|&&(_, h, w)| h >= 2 && w >= 2).map(|&(i, ..)| i).collect();
            let &ei = pick(rng, &fits)?;
            let id = fresh_id(&out, rng, "ac");
            insert_on_edge(&mut out, ei, ArchNode { id, op: OpKind::Acond { embed: None } });
        }
        // Insert a residual block.
        1 => {
            let ids: Vec<usize> = spatial_edges.iter().map(|&(i, ..)| i).collect();
            let &ei = pick(rng, &ids)?;
            let id = fresh_id(&out, rng, "rb");
            insert_on_edge(&mut out, ei, ArchNode { id, op: OpKind::ResBlock });
        }
        // Remove a residual block or condenser.
        2 => {
            let victims: Vec<String> = spec
                .nodes
                .iter()
                .filter(|n| matches!(n.op, OpKind::ResBlock | OpKind::Acond { .. }))
                .map(|n| n.id.clone())
                .collect();
            let id = pick(rng, &victims)?.clone();
            bypass_node(&mut out, &id);
        }
        // Widen a convolution stage.
        3 => {
            let idx = pick_conv(spec, rng)?;
            out.nodes[idx].op = with_channels(out.nodes[idx].op, conv_channels(out.nodes[idx].op)? * 2);
            repair_joins(&mut out, rng);
        }
        // Narrow a convolution stage (floor at 4 channels).
        4 => {
            let idx = pick_conv(spec, rng)?;
            let c = conv_channels(out.nodes[idx].op)?;
            if c / 2 < 4 {
                return None;
            }
            out.nodes[idx].op = with_channels(out.nodes[idx].op, c / 2);
            repair_joins(&mut out, rng);
        }
        // Insert an AADS downsampling stage.
        5 => {
            let fits: Vec<usize> =
                spatial_edges.iter().filter(|&&(_, h, w)| h >= 2 && w >= 2).map(|&(i, ..)| i).collect();
            let &ei = pick(rng, &fits)?;
            let k = if rng.gen_bool(0.5) { 3 } else { 5 };
            let id = fresh_id(&out, rng, "ds");
            insert_on_edge(&mut out, ei, ArchNode { id, op: OpKind::Aads { k } });
        }
        // Remove an AADS stage.
        6 => {
            let victims: Vec<String> = spec
                .nodes
                .iter()
                .filter(|n| matches!(n.op, OpKind::Aads { .. }))
                .map(|n| n.id.clone())
                .collect();
            let id = pick(rng, &victims)?.clone();
            bypass_node(&mut out, &id);
        }
        // Duplicate a shape-preserving node as a parallel column.
        7 => {
            let sources: Vec<&ArchNode> = spec
                .nodes
                .iter()
                .filter(|n| {
                    shape_preserving(n.op) && n.id != analysis.stem && n.id != spec.output
                })
                .collect();
            let original = pick(rng, &sources)?;
            let id = fresh_id(&out, rng, "col");
            let preds: Vec<String> = spec
                .edges
                .iter()
                .filter(|(_, d)| *d == original.id)
                .map(|(s, _)| s.clone())
                .collect();
            let succs: Vec<String> = spec
                .edges
                .iter()
                .filter(|(s, _)| *s == original.id)
                .map(|(_, d)| d.clone())
                .collect();
            out.nodes.push(ArchNode { id: id.clone(), op: original.op });
            for p in preds {
                out.edges.push((p, id.clone()));
            }
            for q in succs {
                out.edges.push((id.clone(), q));
            }
            out.columns.push(vec![id]);
        }
        // Add a cross-column edge.
        8 => {
            let ids: Vec<&str> = spec.nodes.iter().map(|n| n.id.as_str()).collect();
            let u = *pick(rng, &ids)?;
            let v = *pick(rng, &ids)?;
            if u == v || v == analysis.stem || spec.edges.iter().any(|(s, d)| s == u && d == v) {
                return None;
            }
            out.edges.push((u.to_string(), v.to_string()));
        }
        // Remove a cross-column edge (never a join's last input).
        _ => {
            let removable: Vec<usize> = spec
                .edges
                .iter()
                .enumerate()
                .filter(|(_, (_, d))| spec.edges.iter().filter(|(_, d2)| d2 == d).count() >= 2)
                .map(|(i, _)| i)
                .collect();
            let &ei = pick(rng, &removable)?;
            out.edges.remove(ei);
        }
    }
    Some(out)
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> Option<&'a T> {
    if items.is_empty() {
        None
    } else {
        Some(&items[rng.gen_range(0..items.len())])
    }
}

fn pick_conv(spec: &ArchSpec, rng: &mut ChaCha8Rng) -> Option<usize> {
    let idxs: Vec<usize> = spec
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.op, OpKind::Conv { .. } | OpKind::PwConv { .. }))
        .map(|(i, _)| i)
        .collect();
    pick(rng, &idxs).copied()
}

fn conv_channels(op: OpKind) -> Option<usize> {
    match op {
        OpKind::Conv { c, .. } | OpKind::PwConv { c, .. } => Some(c),
        _ => None,
    }
}

fn with_channels(op: OpKind, c: usize) -> OpKind {
    match op {
        OpKind::Conv { k, s, g, .. } => OpKind::Conv { k, s, c, g },
        OpKind::PwConv { s, .. } => OpKind::PwConv { c, s },
        other => other,
    }
}

/// Apply exactly one structural mutation. Retries internally up to 20 times
/// for a mutant that parses and shape-checks; failing that, returns the
/// input unchanged. Same `(spec, seed)` always yields the same result.
pub fn mutate(spec: &ArchSpec, seed: u64) -> ArchSpec {
    let mut rng = seeded_rng(seed);
    for _ in 0..20 {
        if let Some(cand) = try_mutation(spec, &mut rng) {
            if analyze(&cand).is_ok() {
                return cand;
            }
        }
    }
    spec.clone()
}

#[derive(Clone, Copy, Debug)]
pub struct ProxyOutcome {
    pub accuracy_pct: f64,
    pub diverged: bool,
}

/// Short training run as an indirect quality probe: compile with a derived
/// seed, train `proxy_epochs` with harness defaults, report held-out
/// accuracy. Training divergence is not an error here: the candidate scores
/// 0 and is flagged.
pub fn proxy_evaluate(
    spec: &ArchSpec,
    train_set: &[PlateSample],
    test_set: &[PlateSample],
    proxy_epochs: usize,
    seed: u64,
) -> Result<ProxyOutcome> {
    let mut graph: Graph<f32> = compile(spec, derive_seed(seed, "compile"))?;
    // Proxy runs are too short for a settling phase to mean anything.
    let cfg = TrainConfig {
        epochs: proxy_epochs,
        cooldown_epochs: 0,
        seed: derive_seed(seed, "train"),
        ..TrainConfig::default()
    };
    match train(&mut graph, train_set, &cfg) {
        Ok(_) => {}
        Err(Error::Numeric(_)) => return Ok(ProxyOutcome { accuracy_pct: 0.0, diverged: true }),
        Err(e) => return Err(e),
    }
    let metrics = evaluate(&graph, test_set)?;
    Ok(ProxyOutcome { accuracy_pct: metrics.accuracy_pct, diverged: false })
}

/// The refinement loop. Returns every candidate record, best U first;
/// candidates that earned no U (infeasible, diverged, or zero accuracy) sort
/// last. Purely a function of `(cfg, train_set, test_set)`.
pub fn explore(
    cfg: &SearchConfig,
    train_set: &[PlateSample],
    test_set: &[PlateSample],
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Config("search needs nonempty train and test sets".into()));
    }
    let master = cfg.seeds[0];
    let input = (1usize, train_set[0].height, train_set[0].width);
    let prototype = seed_prototype(input)?;

    let mut population: Vec<ArchSpec> = vec![prototype.clone()];
    for i in 1..cfg.population {
        population.push(mutate(&prototype, derive_seed_indexed(master, "mutate:0", i as u64)));
    }

    // Proxy results per spec text, so elites are never retrained.
    let mut cache: BTreeMap<String, (f64, bool)> = BTreeMap::new();
    let mut all: Vec<Candidate> = Vec::new();

    for iteration in 0..cfg.iterations {
        for spec in &population {
            let spec_text = print_arch(spec);
            let cost_report: CostReport = cost(spec)?;
            let feas = validate_constraints(spec, cfg.budget_flops)?;
            let (proxy_acc, diverged) = if feas.feasible {
                let (acc, div) = match cache.get(&spec_text) {
                    Some(&hit) => hit,
                    None => {
                        let mut sum = 0.0;
                        let mut any_diverged = false;
                        for &s in &cfg.seeds {
                            let o = proxy_evaluate(spec, train_set, test_set, cfg.proxy_epochs, s)?;
                            sum += o.accuracy_pct;
                            any_diverged |= o.diverged;
                        }
                        let fresh = (sum / cfg.seeds.len() as f64, any_diverged);
                        cache.insert(spec_text.clone(), fresh);
                        fresh
                    }
                };
                (Some(acc), div)
            } else {
                (None, false)
            };
            let u_value = match proxy_acc {
                Some(acc) if !diverged && acc > 0.0 => Some(netscore(
                    acc,
                    cost_report.params_m(),
                    cost_report.flops_m(),
                    cfg.alpha,
                    cfg.beta,
                    cfg.gamma,
                )?),
                _ => None,
            };
            all.push(Candidate {
                spec: spec.clone(),
                spec_text,
                iteration,
                params: cost_report.params,
                flops: cost_report.flops,
                feasible: feas.feasible,
                violations: feas.violations,
                proxy_acc,
                diverged,
                u_value,
            });
        }

        if iteration + 1 == cfg.iterations {
            break;
        }

        // Elites: best distinct feasible candidates seen so far.
        let mut ranked: Vec<&Candidate> = all.iter().filter(|c| c.u_value.is_some()).collect();
        ranked.sort_by(|a, b| rank_key(a, b));
        let mut elites: Vec<ArchSpec> = Vec::new();
        for c in ranked {
            if !elites.iter().any(|e| print_arch(e) == c.spec_text) {
                elites.push(c.spec.clone());
            }
            if elites.len() == cfg.elite {
                break;
            }
        }
        if elites.is_empty() {
            elites.push(prototype.clone());
        }

        population = elites.clone();
        population.truncate(cfg.population);
        let tag = format!("mutate:{}", iteration + 1);
        let mut k = 0u64;
        while population.len() < cfg.population {
            let parent = &elites[k as usize % elites.len()];
            population.push(mutate(parent, derive_seed_indexed(master, &tag, k)));
            k += 1;
        }
    }

    all.sort_by(rank_key_owned);
    Ok(all)
}

fn rank_key(a: &&Candidate, b: &&Candidate) -> std::cmp::Ordering {
    rank_key_owned(a, b)
}

fn rank_key_owned(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    let ua = a.u_value.unwrap_or(f64::NEG_INFINITY);
    let ub = b.u_value.unwrap_or(f64::NEG_INFINITY);
    ub.partial_cmp(&ua)
        .expect("netscore values are finite")
        .then_with(|| a.spec_text.cmp(&b.spec_text))
        .then_with(|| a.iteration.cmp(&b.iteration))
}
