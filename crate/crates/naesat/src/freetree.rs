//! Canonical free trees with boundary labels.
//!
//! A free piece of a frozen configuration, viewed abstractly, is a bipartite
//! tree of free variables and unseparated clauses.  Internal edges carry
//! literals; clause-side boundary slots record a frozen neighbour (its value
//! and the literal it is read through); variable-side boundary slots mark
//! edges into separating clauses.  Two such trees are *the same free tree*
//! when some isomorphism matches the message pair on every internal edge and
//! the boundary spins at every clause — the literals are then pinned up to
//! the global flip, which leaves every message unchanged.
//!
//! This module canonicalizes raw labelled trees into classes, enumerates the
//! complete catalog of classes up to a variable cutoff, and caches per-class
//! statistics: the exact extension count (computed twice, by brute force and
//! as a product of local message factors), the embedding constant describing
//! how many ways the class lands in the infinite biregular tree, boundary
//! tallies, and the Hamming/overlap moments of its solution set.  It also
//! bridges instance pieces to catalog keys and verifies the identity tying
//! the per-class constants to a sum over labelled, literal-decorated
//! components.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use itertools::Itertools;
use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coloring::{
    bethe_clause_factor, bethe_edge_factor, bethe_var_factor, literal_validity_fraction,
    ColorSpin, DotId, DotKind, HatId, HatKind, SpinTable, HAT_SEP,
};
use crate::exact::{factorial, multinomial, pow_lambda_uint, Lambda};
use crate::frozen::{self, FrozenConfig};
use crate::instance::Instance;

/// Largest tree handled by the exhaustive extension enumerator.
pub const MAX_TREE_VARS: usize = 20;

/// Default cap on decorated candidates processed by catalog enumeration.
pub const DEFAULT_CATALOG_BUDGET: usize = 1_000_000;

/// Errors for raw-tree validation, canonicalization, and enumeration.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    /// A clause keeps fewer than two internal slots.
    #[error("clause {0} has internal degree below two")]
    ThinClause(usize),
    /// A clause's slot count does not add up to the clause width.
    #[error("clause {clause} lists {slots} slots, expected {expected}")]
    WrongClauseWidth {
        clause: usize,
        slots: usize,
        expected: usize,
    },
    /// A variable appears on more internal edges than its degree allows.
    #[error("variable {0} exceeds its degree budget")]
    DegreeExceeded(usize),
    /// A clause references a variable index that does not exist.
    #[error("variable index {0} out of range")]
    BadVariable(usize),
    /// The internal edges do not connect all variables and clauses.
    #[error("raw tree is not connected")]
    Disconnected,
    /// The edge count is wrong for a tree (a cycle or a parallel edge).
    #[error("edge count does not match a tree")]
    NotATree,
    /// Boundary slots of one clause show both adjusted values, so the clause
    /// would be separated and could not sit inside a free piece.
    #[error("clause {0} reads both adjusted values from its boundary")]
    MixedClauseBoundary(usize),
    /// The message recursion froze an internal edge: some variable would be
    /// forced, so the input is not a free tree.
    #[error("messages freeze an internal edge; the input is not a free tree")]
    NotFree,
    /// Catalog enumeration hit its candidate budget before finishing.
    #[error("enumeration budget exceeded after {candidates} candidates (budget {budget})")]
    BudgetExceeded { candidates: usize, budget: usize },
    /// Too many variables for the exhaustive enumerators.
    #[error("{0} variables exceed the exact-enumeration guard")]
    TooManyVars(usize),
}

// ---------------------------------------------------------------------------
// Raw labelled trees.
// ---------------------------------------------------------------------------

/// One clause of a raw labelled tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawClause {
    /// Internal slots: (variable index, edge literal).
    pub internal: Vec<(usize, bool)>,
    /// Boundary slots: (frozen neighbour's value, edge literal).
    pub stubs: Vec<(bool, bool)>,
}

impl RawClause {
    /// Adjusted value shown by every boundary slot, when there are any.
    pub fn boundary_value(&self) -> Option<bool> {
        self.stubs.first().map(|&(b, l)| b ^ l)
    }

    /// Boundary tallies by the neighbour's raw value.
    pub fn stub_counts(&self) -> (usize, usize) {
        let n1 = self.stubs.iter().filter(|&&(b, _)| b).count();
        (self.stubs.len() - n1, n1)
    }
}

/// A labelled bipartite tree of free variables and unseparated clauses, with
/// boundary decorations, before canonicalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTree {
    /// Variable degree of the ambient model.
    pub d: usize,
    /// Clause width of the ambient model.
    pub k: usize,
    /// Number of variables (indices `0..vars`).
    pub vars: usize,
    /// Clauses with their internal and boundary slots.
    pub clauses: Vec<RawClause>,
}

impl RawTree {
    pub fn v(&self) -> usize {
        self.vars
    }

    pub fn f(&self) -> usize {
        self.clauses.len()
    }

    /// Number of internal edges.
    pub fn e(&self) -> usize {
        self.clauses.iter().map(|c| c.internal.len()).sum()
    }

    fn var_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.vars];
        for clause in &self.clauses {
            for &(v, _) in &clause.internal {
                if let Some(slot) = deg.get_mut(v) {
                    *slot += 1;
                }
            }
        }
        deg
    }

    /// Validates widths, degrees, boundary consistency, and tree shape.
    pub fn check(&self) -> Result<(), TreeError> {
        if self.vars == 0 {
            return Err(TreeError::NotATree);
        }
        for (c, clause) in self.clauses.iter().enumerate() {
            if clause.internal.len() < 2 {
                return Err(TreeError::ThinClause(c));
            }
            let slots = clause.internal.len() + clause.stubs.len();
            if slots != self.k {
                return Err(TreeError::WrongClauseWidth {
                    clause: c,
                    slots,
                    expected: self.k,
                });
            }
            for &(v, _) in &clause.internal {
                if v >= self.vars {
                    return Err(TreeError::BadVariable(v));
                }
            }
            if let Some(value) = clause.boundary_value() {
                if clause.stubs.iter().any(|&(b, l)| b ^ l != value) {
                    return Err(TreeError::MixedClauseBoundary(c));
                }
            }
        }
        for (v, &deg) in self.var_degrees().iter().enumerate() {
            if deg > self.d {
                return Err(TreeError::DegreeExceeded(v));
            }
        }
        if self.e() != self.vars + self.clauses.len() - 1 {
            return Err(TreeError::NotATree);
        }
        // Connectivity over the bipartite incidence.
        let mut var_seen = vec![false; self.vars];
        let mut clause_seen = vec![false; self.clauses.len()];
        let mut var_clauses = vec![Vec::new(); self.vars];
        for (c, clause) in self.clauses.iter().enumerate() {
            for &(v, _) in &clause.internal {
                var_clauses[v].push(c);
            }
        }
        let mut queue = vec![0usize];
        var_seen[0] = true;
        while let Some(v) = queue.pop() {
            for &c in &var_clauses[v] {
                if !clause_seen[c] {
                    clause_seen[c] = true;
                    for &(u, _) in &self.clauses[c].internal {
                        if !var_seen[u] {
                            var_seen[u] = true;
                            queue.push(u);
                        }
                    }
                }
            }
        }
        if var_seen.iter().all(|&s| s) && clause_seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err(TreeError::Disconnected)
        }
    }

    /// The value-flipped twin: every boundary spin negated, literals kept.
    pub fn negated(&self) -> RawTree {
        let clauses = self
            .clauses
            .iter()
            .map(|clause| RawClause {
                internal: clause.internal.clone(),
                stubs: clause.stubs.iter().map(|&(b, l)| (!b, l)).collect(),
            })
            .collect();
        RawTree {
            d: self.d,
            k: self.k,
            vars: self.vars,
            clauses,
        }
    }
}

// ---------------------------------------------------------------------------
// Messages on the internal edges.
// ---------------------------------------------------------------------------

/// One internal edge of a raw tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeRef {
    pub clause: usize,
    pub slot: usize,
    pub var: usize,
    pub literal: bool,
}

/// Solved message pairs on the internal edges of a raw tree, plus the shared
/// outgoing message each variable sends along its boundary slots.
#[derive(Debug, Clone)]
pub struct TreeMessages {
    edges: Vec<EdgeRef>,
    var_edges: Vec<Vec<usize>>,
    clause_edges: Vec<Vec<usize>>,
    dots: Vec<DotId>,
    hats: Vec<HatId>,
    stub_dots: Vec<Option<DotId>>,
}

impl TreeMessages {
    pub fn edges(&self) -> &[EdgeRef] {
        &self.edges
    }

    pub fn var_edges(&self, v: usize) -> &[usize] {
        &self.var_edges[v]
    }

    /// Variable-to-clause message on internal edge `e`, unadjusted.
    pub fn dot(&self, e: usize) -> DotId {
        self.dots[e]
    }

    /// Clause-to-variable message on internal edge `e`, unadjusted.
    pub fn hat(&self, e: usize) -> HatId {
        self.hats[e]
    }

    /// Message a variable sends along its boundary slots, if it has any.
    pub fn stub_dot(&self, v: usize) -> Option<DotId> {
        self.stub_dots[v]
    }
}

/// Computes the message pair on every internal edge by propagating from the
/// leaves, then rejects anything that is not a genuine free tree: a forced or
/// separated internal edge means some variable could not actually be free.
pub fn solve_messages(raw: &RawTree, table: &mut SpinTable) -> Result<TreeMessages, TreeError> {
    raw.check()?;
    let mut edges = Vec::new();
    let mut var_edges = vec![Vec::new(); raw.vars];
    let mut clause_edges = Vec::with_capacity(raw.clauses.len());
    for (c, clause) in raw.clauses.iter().enumerate() {
        let mut ids = Vec::new();
        for (slot, &(var, literal)) in clause.internal.iter().enumerate() {
            let id = edges.len();
            edges.push(EdgeRef {
                clause: c,
                slot,
                var,
                literal,
            });
            var_edges[var].push(id);
            ids.push(id);
        }
        clause_edges.push(ids);
    }

    let ecount = edges.len();
    let mut dots: Vec<Option<DotId>> = vec![None; ecount];
    let mut hats: Vec<Option<HatId>> = vec![None; ecount];
    let mut done = 0usize;
    while done < 2 * ecount {
        let before = done;
        for id in 0..ecount {
            let er = edges[id];
            if dots[id].is_none()
                && var_edges[er.var]
                    .iter()
                    .all(|&o| o == id || hats[o].is_some())
            {
                let mut inputs: Vec<HatId> = var_edges[er.var]
                    .iter()
                    .filter(|&&o| o != id)
                    .map(|&o| hats[o].unwrap())
                    .collect();
                inputs.extend(std::iter::repeat(HAT_SEP).take(raw.d - var_edges[er.var].len()));
                let dot = table.dot_t(&inputs).map_err(|_| TreeError::NotFree)?;
                dots[id] = Some(dot);
                done += 1;
            }
            if hats[id].is_none()
                && clause_edges[er.clause]
                    .iter()
                    .all(|&o| o == id || dots[o].is_some())
            {
                let mut inputs: Vec<DotId> = clause_edges[er.clause]
                    .iter()
                    .filter(|&&o| o != id)
                    .map(|&o| table.adjust_dot(dots[o].unwrap(), edges[o].literal))
                    .collect();
                for &(b, l) in &raw.clauses[er.clause].stubs {
                    inputs.push(table.dot_atom(b ^ l));
                }
                let hat = table.hat_t(&inputs);
                hats[id] = Some(table.adjust_hat(hat, er.literal));
                done += 1;
            }
        }
        assert!(done > before, "a tree always exposes a ready edge");
    }

    let dots: Vec<DotId> = dots.into_iter().map(Option::unwrap).collect();
    let hats: Vec<HatId> = hats.into_iter().map(Option::unwrap).collect();
    for id in 0..ecount {
        let dot_free = matches!(table.dot_kind(dots[id]), DotKind::Join(_));
        let hat_free = matches!(table.hat_kind(hats[id]), HatKind::Join(_));
        if !dot_free || !hat_free {
            return Err(TreeError::NotFree);
        }
    }
    let mut stub_dots = vec![None; raw.vars];
    for v in 0..raw.vars {
        let deg = var_edges[v].len();
        if deg < raw.d {
            let mut inputs: Vec<HatId> = var_edges[v].iter().map(|&o| hats[o]).collect();
            inputs.extend(std::iter::repeat(HAT_SEP).take(raw.d - deg - 1));
            let dot = table.dot_t(&inputs).map_err(|_| TreeError::NotFree)?;
            stub_dots[v] = Some(dot);
        }
    }
    Ok(TreeMessages {
        edges,
        var_edges,
        clause_edges,
        dots,
        hats,
        stub_dots,
    })
}

// ---------------------------------------------------------------------------
// Canonical keys.
// ---------------------------------------------------------------------------

/// Table-independent structural encoder for interned messages: children are
/// re-sorted by their encoded strings, so equal strings mean isomorphic
/// boundary-labelled message trees no matter which table interned them.
struct SpinEncoder<'a> {
    table: &'a SpinTable,
    dots: HashMap<DotId, String>,
    hats: HashMap<HatId, String>,
}

impl<'a> SpinEncoder<'a> {
    fn new(table: &'a SpinTable) -> SpinEncoder<'a> {
        SpinEncoder {
            table,
            dots: HashMap::new(),
            hats: HashMap::new(),
        }
    }

    fn dot(&mut self, id: DotId) -> String {
        if let Some(s) = self.dots.get(&id) {
            return s.clone();
        }
        let table = self.table;
        let s = match table.dot_kind(id) {
            DotKind::Zero => "0".to_string(),
            DotKind::One => "1".to_string(),
            DotKind::Star => "*".to_string(),
            DotKind::Join(children) => {
                let children = children.to_vec();
                let mut parts: Vec<String> = children
                    .iter()
                    .map(|&(h, m)| format!("{}^{}", self.hat(h), m))
                    .collect();
                parts.sort();
                format!("D({})", parts.join(""))
            }
        };
        self.dots.insert(id, s.clone());
        s
    }

    fn hat(&mut self, id: HatId) -> String {
        if let Some(s) = self.hats.get(&id) {
            return s.clone();
        }
        let table = self.table;
        let s = match table.hat_kind(id) {
            HatKind::Zero => "0".to_string(),
            HatKind::One => "1".to_string(),
            HatKind::Star => "*".to_string(),
            HatKind::Sep => "S".to_string(),
            HatKind::Join(children) => {
                let children = children.to_vec();
                let mut parts: Vec<String> = children
                    .iter()
                    .map(|&(d, m)| format!("{}^{}", self.dot(d), m))
                    .collect();
                parts.sort();
                format!("H({})", parts.join(""))
            }
        };
        self.hats.insert(id, s.clone());
        s
    }
}

struct KeyCtx<'a> {
    raw: &'a RawTree,
    msgs: &'a TreeMessages,
    enc: SpinEncoder<'a>,
}

impl KeyCtx<'_> {
    fn pair(&mut self, e: usize) -> String {
        format!(
            "({};{})",
            self.enc.dot(self.msgs.dots[e]),
            self.enc.hat(self.msgs.hats[e])
        )
    }

    /// Encode of the branch hanging from variable `v` through edge `e`.
    fn var_branch(&mut self, v: usize, e: usize) -> String {
        debug_assert_eq!(self.msgs.edges[e].var, v);
        let clause = self.msgs.edges[e].clause;
        format!("{}>{}", self.pair(e), self.clause(clause, e))
    }

    /// Encode of the branch hanging from clause `c` through edge `e`.
    fn clause_branch(&mut self, c: usize, e: usize) -> String {
        debug_assert_eq!(self.msgs.edges[e].clause, c);
        let var = self.msgs.edges[e].var;
        format!("{}>{}", self.pair(e), self.var(var, Some(e)))
    }

    fn var(&mut self, v: usize, parent: Option<usize>) -> String {
        let spare = self.raw.d - self.msgs.var_edges[v].len();
        let edge_ids: Vec<usize> = self.msgs.var_edges[v]
            .iter()
            .copied()
            .filter(|&e| Some(e) != parent)
            .collect();
        let mut parts: Vec<String> = edge_ids
            .into_iter()
            .map(|e| self.var_branch(v, e))
            .collect();
        parts.sort();
        format!("{{{}:{}}}", spare, parts.join("|"))
    }

    fn clause(&mut self, c: usize, via: usize) -> String {
        let (n0, n1) = self.raw.clauses[c].stub_counts();
        let edge_ids: Vec<usize> = self.msgs.clause_edges[c]
            .iter()
            .copied()
            .filter(|&e| e != via)
            .collect();
        let mut parts: Vec<String> = edge_ids
            .into_iter()
            .map(|e| self.clause_branch(c, e))
            .collect();
        parts.sort();
        format!("[{},{}:{}]", n0, n1, parts.join("|"))
    }
}

/// Order-independent digest of the class: the lexicographic minimum over all
/// rooted traversals, with every internal edge labelled by its message pair
/// and every clause by its boundary spin tallies.  Literals appear nowhere:
/// they are recoverable from the messages exactly up to the global flip.
fn canonical_key(raw: &RawTree, msgs: &TreeMessages, table: &SpinTable) -> String {
    let mut ctx = KeyCtx {
        raw,
        msgs,
        enc: SpinEncoder::new(table),
    };
    let mut best: Option<String> = None;
    for v in 0..raw.vars {
        let s = ctx.var(v, None);
        if best.as_ref().map_or(true, |b| s < *b) {
            best = Some(s);
        }
    }
    format!("d{}k{}:{}", raw.d, raw.k, best.unwrap())
}

// ---------------------------------------------------------------------------
// Statistics.
// ---------------------------------------------------------------------------

/// Exhaustive extension count plus per-variable ones-counts over the
/// solution set.
fn enumerate_extensions(raw: &RawTree) -> Result<(u64, Vec<u64>), TreeError> {
    if raw.vars > MAX_TREE_VARS {
        return Err(TreeError::TooManyVars(raw.vars));
    }
    let mut count = 0u64;
    let mut ones = vec![0u64; raw.vars];
    'outer: for mask in 0u64..(1u64 << raw.vars) {
        for clause in &raw.clauses {
            let bound = clause.boundary_value();
            let mut seen0 = bound == Some(false);
            let mut seen1 = bound == Some(true);
            for &(v, l) in &clause.internal {
                if ((mask >> v) & 1 == 1) ^ l {
                    seen1 = true;
                } else {
                    seen0 = true;
                }
            }
            if !(seen0 && seen1) {
                continue 'outer;
            }
        }
        count += 1;
        for (v, slot) in ones.iter_mut().enumerate() {
            *slot += (mask >> v) & 1;
        }
    }
    Ok((count, ones))
}

/// Extension count as the product of local message factors: one marginal
/// mass per variable, one per clause on adjusted messages, and one overlap
/// correction per edge incident to a variable (boundary slots included).
fn product_route(
    raw: &RawTree,
    msgs: &TreeMessages,
    table: &SpinTable,
) -> Result<BigRational, TreeError> {
    let mut total = BigRational::one();
    for v in 0..raw.vars {
        let spare = raw.d - msgs.var_edges[v].len();
        let mut hats: Vec<HatId> = msgs.var_edges[v].iter().map(|&e| msgs.hats[e]).collect();
        hats.extend(std::iter::repeat(HAT_SEP).take(spare));
        total *= bethe_var_factor(table, &hats);
        for &e in &msgs.var_edges[v] {
            total *= bethe_edge_factor(table, msgs.dots[e], msgs.hats[e])
                .map_err(|_| TreeError::NotFree)?;
        }
        if spare > 0 {
            let stub = msgs.stub_dots[v].expect("boundary slots carry a message");
            let factor =
                bethe_edge_factor(table, stub, HAT_SEP).map_err(|_| TreeError::NotFree)?;
            for _ in 0..spare {
                total *= &factor;
            }
        }
    }
    for (c, clause) in raw.clauses.iter().enumerate() {
        let mut adjusted: Vec<DotId> = msgs.clause_edges[c]
            .iter()
            .map(|&e| table.adjust_dot(msgs.dots[e], msgs.edges[e].literal))
            .collect();
        for &(b, l) in &clause.stubs {
            adjusted.push(table.dot_atom(b ^ l));
        }
        total *= bethe_clause_factor(table, &adjusted);
    }
    Ok(total)
}

/// Mean pairwise Hamming distance and overlap of the solution set.
fn overlap_stats(vars: usize, count: u64, ones: &[u64]) -> (BigRational, BigRational) {
    let w = BigInt::from(count);
    let mut ham = BigRational::zero();
    for &n in ones {
        let n = BigInt::from(n);
        ham += BigRational::new(BigInt::from(2) * &n * (&w - &n), &w * &w);
    }
    let overlap =
        BigRational::from_integer(BigInt::from(vars)) - BigRational::from_integer(2.into()) * &ham;
    (ham, overlap)
}

/// Per-vertex multiplicities of interchangeable branches.  Two edges at a
/// common vertex count as one kind exactly when the branches hanging through
/// them are isomorphic as labelled trees — equal message pairs alone do not
/// suffice, since equal pairs can hide boundary data diverging deeper down.
fn branch_multiplicities(
    raw: &RawTree,
    msgs: &TreeMessages,
    table: &SpinTable,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut ctx = KeyCtx {
        raw,
        msgs,
        enc: SpinEncoder::new(table),
    };
    let var_groups = (0..raw.vars)
        .map(|v| {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for &e in &msgs.var_edges[v] {
                *counts.entry(ctx.var_branch(v, e)).or_insert(0) += 1;
            }
            counts.into_values().collect()
        })
        .collect();
    let clause_groups = (0..raw.clauses.len())
        .map(|c| {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for &e in &msgs.clause_edges[c] {
                *counts.entry(ctx.clause_branch(c, e)).or_insert(0) += 1;
            }
            counts.into_values().collect()
        })
        .collect();
    (var_groups, clause_groups)
}

/// Multinomial placement constant: how many ways the class sits around each
/// of its vertices inside the infinite biregular tree, divided by the
/// variable-rooted normalization.  At every vertex the incident edges are
/// counted up to interchangeable branches, and boundary slots up to equal
/// spins.
fn embedding_constant(raw: &RawTree, msgs: &TreeMessages, table: &SpinTable) -> BigRational {
    let (var_groups, clause_groups) = branch_multiplicities(raw, msgs, table);
    let mut num = BigUint::one();
    for (v, groups) in var_groups.iter().enumerate() {
        let mut parts = groups.clone();
        let spare = raw.d - msgs.var_edges[v].len();
        if spare > 0 {
            parts.push(spare);
        }
        num *= multinomial(raw.d, &parts);
    }
    for (c, groups) in clause_groups.iter().enumerate() {
        let mut parts = groups.clone();
        let (n0, n1) = raw.clauses[c].stub_counts();
        if n0 > 0 {
            parts.push(n0);
        }
        if n1 > 0 {
            parts.push(n1);
        }
        num *= multinomial(raw.k, &parts);
    }
    let den = num_traits::pow(BigUint::from(raw.d), raw.vars - 1)
        * num_traits::pow(BigUint::from(raw.k), raw.clauses.len());
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

// ---------------------------------------------------------------------------
// The canonical class.
// ---------------------------------------------------------------------------

/// A canonicalized free tree with cached statistics.  Equality is equality
/// of canonical keys.
#[derive(Debug, Clone)]
pub struct FreeTree {
    key: String,
    v: usize,
    f: usize,
    e: usize,
    eta_b0: usize,
    eta_b1: usize,
    eta_s: usize,
    j: BigRational,
    w_lit: BigUint,
    ham: BigRational,
    overlap: BigRational,
    rep: RawTree,
}

impl PartialEq for FreeTree {
    fn eq(&self, other: &FreeTree) -> bool {
        self.key == other.key
    }
}

impl Eq for FreeTree {}

impl FreeTree {
    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn e(&self) -> usize {
        self.e
    }

    /// Boundary slots showing a frozen neighbour of value zero.
    pub fn eta_b0(&self) -> usize {
        self.eta_b0
    }

    /// Boundary slots showing a frozen neighbour of value one.
    pub fn eta_b1(&self) -> usize {
        self.eta_b1
    }

    /// Variable-side boundary slots (edges into separating clauses).
    pub fn eta_s(&self) -> usize {
        self.eta_s
    }

    /// Embedding constant of the class.
    pub fn j(&self) -> &BigRational {
        &self.j
    }

    /// Number of solutions honouring the boundary, at fixed literals.
    pub fn w_lit(&self) -> &BigUint {
        &self.w_lit
    }

    /// Mean pairwise Hamming distance of the solution set.
    pub fn ham(&self) -> &BigRational {
        &self.ham
    }

    /// Mean pairwise overlap of the solution set.
    pub fn overlap(&self) -> &BigRational {
        &self.overlap
    }

    /// The representative this class was canonicalized from.
    pub fn rep(&self) -> &RawTree {
        &self.rep
    }

    /// Re-solves the representative's messages in the given table.
    pub fn messages(&self, table: &mut SpinTable) -> TreeMessages {
        solve_messages(&self.rep, table).expect("canonical representative stays solvable")
    }
}

/// Brute-force extension count of a raw tree (one of the two size routes).
pub fn brute_force_size(raw: &RawTree) -> Result<BigUint, TreeError> {
    raw.check()?;
    let (count, _) = enumerate_extensions(raw)?;
    Ok(BigUint::from(count))
}

/// Extension count via the product of local message factors (the other size
/// route).
pub fn product_route_size(raw: &RawTree, table: &mut SpinTable) -> Result<BigRational, TreeError> {
    let msgs = solve_messages(raw, table)?;
    product_route(raw, &msgs, table)
}

/// Validates a raw tree, solves its messages, and assembles the canonical
/// class with all cached statistics.  The two size routes are recomputed and
/// compared on every call.
pub fn canonicalize(raw: &RawTree, table: &mut SpinTable) -> Result<FreeTree, TreeError> {
    let msgs = solve_messages(raw, table)?;
    let (count, ones) = enumerate_extensions(raw)?;
    let product = product_route(raw, &msgs, table)?;
    assert!(product.is_integer(), "local product must be an integer");
    assert_eq!(
        product.to_integer(),
        BigInt::from(count),
        "size routes disagree"
    );
    assert!(count >= 1, "a free tree always has extensions");
    for &n in &ones {
        assert!(
            n > 0 && n < count,
            "every free variable takes both values across extensions"
        );
    }
    let j = embedding_constant(raw, &msgs, table);
    let (ham, overlap) = overlap_stats(raw.vars, count, &ones);
    let key = canonical_key(raw, &msgs, table);
    let (eta_b0, eta_b1) = raw
        .clauses
        .iter()
        .map(RawClause::stub_counts)
        .fold((0, 0), |(a0, a1), (n0, n1)| (a0 + n0, a1 + n1));
    let e = raw.e();
    debug_assert!(raw.clauses.len() + 1 <= raw.vars + raw.clauses.len());
    Ok(FreeTree {
        key,
        v: raw.vars,
        f: raw.clauses.len(),
        e,
        eta_b0,
        eta_b1,
        eta_s: raw.d * raw.vars - e,
        j,
        w_lit: BigUint::from(count),
        ham,
        overlap,
        rep: raw.clone(),
    })
}

/// Per-clause neighbourhood spin tuples of the class: internal edges as free
/// pairs, boundary slots as unforced frozen marks with their raw value.
pub fn clause_spin_tuples(raw: &RawTree, msgs: &TreeMessages) -> Vec<Vec<ColorSpin>> {
    raw.clauses
        .iter()
        .enumerate()
        .map(|(c, clause)| {
            let mut spins: Vec<ColorSpin> = msgs.clause_edges[c]
                .iter()
                .map(|&e| ColorSpin::Free {
                    dot: msgs.dots[e],
                    hat: msgs.hats[e],
                })
                .collect();
            for &(b, _) in &clause.stubs {
                spins.push(if b { ColorSpin::B1 } else { ColorSpin::B0 });
            }
            spins
        })
        .collect()
}

/// Class weight at tilt `lambda`: the tilted extension count times one
/// literal-averaged validity fraction per clause of the tree.
pub fn tree_weight_lambda(tree: &FreeTree, lambda: Lambda, table: &mut SpinTable) -> BigRational {
    let msgs = tree.messages(table);
    let mut weight = pow_lambda_uint(tree.w_lit(), lambda);
    for tuple in clause_spin_tuples(&tree.rep, &msgs) {
        weight *= literal_validity_fraction(table, &tuple);
    }
    weight
}

// ---------------------------------------------------------------------------
// Explicit embedding counts (the oracle for the multinomial constant).
// ---------------------------------------------------------------------------

/// Truncated biregular tree with enough levels to host any map from a tree
/// of the given eccentricity.
struct Target {
    children: Vec<Vec<usize>>,
}

fn build_target(d: usize, k: usize, root_is_var: bool, depth: usize) -> Target {
    let mut children: Vec<Vec<usize>> = vec![Vec::new()];
    let mut frontier = vec![(0usize, root_is_var, true)];
    for _ in 0..depth {
        let mut next = Vec::new();
        for &(node, is_var, is_root) in &frontier {
            let fan = if is_var {
                if is_root {
                    d
                } else {
                    d - 1
                }
            } else if is_root {
                k
            } else {
                k - 1
            };
            for _ in 0..fan {
                let id = children.len();
                children.push(Vec::new());
                children[node].push(id);
                next.push((id, !is_var, false));
            }
        }
        frontier = next;
    }
    Target { children }
}

struct ShapeAdj {
    /// Per variable: incident clause indices.
    var_clauses: Vec<Vec<usize>>,
    /// Per clause: incident variable indices.
    clause_vars: Vec<Vec<usize>>,
}

fn shape_adjacency(raw: &RawTree) -> ShapeAdj {
    let mut var_clauses = vec![Vec::new(); raw.vars];
    let mut clause_vars = vec![Vec::new(); raw.clauses.len()];
    for (c, clause) in raw.clauses.iter().enumerate() {
        for &(v, _) in &clause.internal {
            var_clauses[v].push(c);
            clause_vars[c].push(v);
        }
    }
    ShapeAdj {
        var_clauses,
        clause_vars,
    }
}

/// Longest alternating path (in edges) from the given root.
fn eccentricity(adj: &ShapeAdj, root_var: Option<usize>, root_clause: Option<usize>) -> usize {
    fn from_var(adj: &ShapeAdj, v: usize, parent: Option<usize>) -> usize {
        adj.var_clauses[v]
            .iter()
            .filter(|&&c| Some(c) != parent)
            .map(|&c| 1 + from_clause(adj, c, Some(v)))
            .max()
            .unwrap_or(0)
    }
    fn from_clause(adj: &ShapeAdj, c: usize, parent: Option<usize>) -> usize {
        adj.clause_vars[c]
            .iter()
            .filter(|&&v| Some(v) != parent)
            .map(|&v| 1 + from_var(adj, v, Some(c)))
            .max()
            .unwrap_or(0)
    }
    match (root_var, root_clause) {
        (Some(v), None) => from_var(adj, v, None),
        (None, Some(c)) => from_clause(adj, c, None),
        _ => unreachable!("exactly one root"),
    }
}

fn count_maps_from_var(
    adj: &ShapeAdj,
    target: &Target,
    v: usize,
    parent: Option<usize>,
    node: usize,
) -> u64 {
    let children: Vec<usize> = adj.var_clauses[v]
        .iter()
        .copied()
        .filter(|&c| Some(c) != parent)
        .collect();
    if children.is_empty() {
        return 1;
    }
    let slots = &target.children[node];
    let mut total = 0u64;
    for assignment in slots.iter().permutations(children.len()) {
        let mut product = 1u64;
        for (&c, &slot) in children.iter().zip(assignment) {
            product *= count_maps_from_clause(adj, target, c, Some(v), slot);
            if product == 0 {
                break;
            }
        }
        total += product;
    }
    total
}

fn count_maps_from_clause(
    adj: &ShapeAdj,
    target: &Target,
    c: usize,
    parent: Option<usize>,
    node: usize,
) -> u64 {
    let children: Vec<usize> = adj.clause_vars[c]
        .iter()
        .copied()
        .filter(|&v| Some(v) != parent)
        .collect();
    if children.is_empty() {
        return 1;
    }
    let slots = &target.children[node];
    let mut total = 0u64;
    for assignment in slots.iter().permutations(children.len()) {
        let mut product = 1u64;
        for (&v, &slot) in children.iter().zip(assignment) {
            product *= count_maps_from_var(adj, target, v, Some(c), slot);
            if product == 0 {
                break;
            }
        }
        total += product;
    }
    total
}

/// Number of injective incidence-preserving maps of the tree's shape into
/// the infinite biregular tree that send `root_var` to a fixed variable
/// vertex, counted by explicit backtracking in a truncated copy.
pub fn var_rooted_embeddings(raw: &RawTree, root_var: usize) -> BigUint {
    let adj = shape_adjacency(raw);
    let depth = eccentricity(&adj, Some(root_var), None);
    let target = build_target(raw.d, raw.k, true, depth);
    BigUint::from(count_maps_from_var(&adj, &target, root_var, None, 0))
}

/// Same count rooted at a clause, sent to a fixed clause vertex.
pub fn clause_rooted_embeddings(raw: &RawTree, root_clause: usize) -> BigUint {
    let adj = shape_adjacency(raw);
    let depth = eccentricity(&adj, None, Some(root_clause));
    let target = build_target(raw.d, raw.k, false, depth);
    BigUint::from(count_maps_from_clause(&adj, &target, root_clause, None, 0))
}

/// Product over all vertices of the factorials of interchangeable-branch
/// multiplicities.  Explicit rooted map counts treat the slots of the target
/// tree as distinguishable, so they overcount the embedding constant by
/// exactly this symmetry mass.
pub fn local_symmetry_mass(raw: &RawTree, table: &mut SpinTable) -> Result<BigUint, TreeError> {
    let msgs = solve_messages(raw, table)?;
    let (var_groups, clause_groups) = branch_multiplicities(raw, &msgs, table);
    let mut mass = BigUint::one();
    for groups in var_groups.iter().chain(&clause_groups) {
        for &mult in groups {
            mass *= factorial(mult);
        }
    }
    Ok(mass)
}

// ---------------------------------------------------------------------------
// Catalog enumeration.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Shape {
    vars: usize,
    clauses: Vec<Vec<usize>>,
}

impl Shape {
    fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.vars];
        for clause in &self.clauses {
            for &v in clause {
                deg[v] += 1;
            }
        }
        deg
    }
}

fn shape_key(shape: &Shape) -> String {
    fn enc_var(
        var_clauses: &[Vec<usize>],
        clause_vars: &[Vec<usize>],
        v: usize,
        parent: Option<usize>,
    ) -> String {
        let mut parts: Vec<String> = var_clauses[v]
            .iter()
            .filter(|&&c| Some(c) != parent)
            .map(|&c| enc_clause(var_clauses, clause_vars, c, v))
            .collect();
        parts.sort();
        format!("({})", parts.join(""))
    }
    fn enc_clause(
        var_clauses: &[Vec<usize>],
        clause_vars: &[Vec<usize>],
        c: usize,
        via: usize,
    ) -> String {
        let width = clause_vars[c].len();
        let mut parts: Vec<String> = clause_vars[c]
            .iter()
            .filter(|&&u| u != via)
            .map(|&u| enc_var(var_clauses, clause_vars, u, Some(c)))
            .collect();
        parts.sort();
        format!("[{}:{}]", width, parts.join(""))
    }
    let mut var_clauses = vec![Vec::new(); shape.vars];
    for (c, clause) in shape.clauses.iter().enumerate() {
        for &v in clause {
            var_clauses[v].push(c);
        }
    }
    (0..shape.vars)
        .map(|v| enc_var(&var_clauses, &shape.clauses, v, None))
        .min()
        .unwrap()
}

/// Every tree shape with the given cutoff arises by repeatedly attaching a
/// clause to one existing variable together with fresh leaf variables, so a
/// deduplicated breadth-first growth enumerates them all.
fn enumerate_shapes(d: usize, k: usize, cutoff: usize) -> Vec<Shape> {
    let mut seen = HashSet::new();
    let mut queue = VecDeque::new();
    let mut out = Vec::new();
    let root = Shape {
        vars: 1,
        clauses: Vec::new(),
    };
    seen.insert(shape_key(&root));
    queue.push_back(root);
    while let Some(shape) = queue.pop_front() {
        out.push(shape.clone());
        let degrees = shape.degrees();
        for host in 0..shape.vars {
            if degrees[host] >= d {
                continue;
            }
            for fresh in 1..=(k - 1) {
                if shape.vars + fresh > cutoff {
                    continue;
                }
                let mut clause = vec![host];
                clause.extend(shape.vars..shape.vars + fresh);
                let mut grown = Shape {
                    vars: shape.vars + fresh,
                    clauses: shape.clauses.clone(),
                };
                grown.clauses.push(clause);
                if seen.insert(shape_key(&grown)) {
                    queue.push_back(grown);
                }
            }
        }
    }
    out
}

/// The complete set of classes with at most `cutoff` variables.
#[derive(Debug, Clone)]
pub struct TreeCatalog {
    d: usize,
    k: usize,
    cutoff: usize,
    trees: Vec<FreeTree>,
    index: HashMap<String, usize>,
    complete: Vec<bool>,
    /// Decorated candidates processed during enumeration.
    pub candidates: usize,
}

impl TreeCatalog {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    /// All classes, sorted by (variable count, key).
    pub fn trees(&self) -> &[FreeTree] {
        &self.trees
    }

    pub fn get(&self, key: &str) -> Option<&FreeTree> {
        self.index.get(key).map(|&i| &self.trees[i])
    }

    pub fn count_at(&self, v: usize) -> usize {
        self.trees.iter().filter(|t| t.v() == v).count()
    }

    pub fn trees_at(&self, v: usize) -> impl Iterator<Item = &FreeTree> {
        self.trees.iter().filter(move |t| t.v() == v)
    }

    pub fn is_complete(&self, v: usize) -> bool {
        v >= 1 && v <= self.cutoff && self.complete[v - 1]
    }

    /// One record per class, as JSON lines.
    pub fn to_jsonl(&self) -> String {
        self.trees
            .iter()
            .map(|t| {
                serde_json::to_string(&CatalogRecord::of(t)).expect("catalog records serialize")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Flat export row for one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogRecord {
    pub key: String,
    pub v: usize,
    pub f: usize,
    pub e: usize,
    pub eta_b0: usize,
    pub eta_b1: usize,
    pub eta_s: usize,
    pub j_num: String,
    pub j_den: String,
    pub w_lit: String,
    pub ham_num: String,
    pub ham_den: String,
}

impl CatalogRecord {
    pub fn of(tree: &FreeTree) -> CatalogRecord {
        CatalogRecord {
            key: tree.key().to_string(),
            v: tree.v(),
            f: tree.f(),
            e: tree.e(),
            eta_b0: tree.eta_b0(),
            eta_b1: tree.eta_b1(),
            eta_s: tree.eta_s(),
            j_num: tree.j().numer().to_string(),
            j_den: tree.j().denom().to_string(),
            w_lit: tree.w_lit().to_string(),
            ham_num: tree.ham().numer().to_string(),
            ham_den: tree.ham().denom().to_string(),
        }
    }
}

/// Enumerates every class with at most `cutoff` variables: all shapes grown
/// by clause attachment, decorated by internal literals and boundary
/// patterns (each clause shows one adjusted value to its boundary), then
/// deduplicated by canonical key.
pub fn enumerate_catalog(
    d: usize,
    k: usize,
    cutoff: usize,
    budget: usize,
) -> Result<TreeCatalog, TreeError> {
    assert!(d >= 2 && k >= 3 && cutoff >= 1, "degenerate model");
    let mut table = SpinTable::new();
    let mut classes: BTreeMap<String, FreeTree> = BTreeMap::new();
    let mut candidates = 0usize;
    for shape in enumerate_shapes(d, k, cutoff) {
        let e: usize = shape.clauses.iter().map(Vec::len).sum();
        // Boundary patterns per clause: how many slots show each raw value,
        // and which adjusted value the clause reads from all of them.
        let stub_options: Vec<Vec<Vec<(bool, bool)>>> = shape
            .clauses
            .iter()
            .map(|clause| {
                let spare = k - clause.len();
                if spare == 0 {
                    return vec![Vec::new()];
                }
                let mut options = Vec::new();
                for zeros in 0..=spare {
                    for shown in [false, true] {
                        let mut stubs = Vec::with_capacity(spare);
                        for _ in 0..zeros {
                            stubs.push((false, shown));
                        }
                        for _ in zeros..spare {
                            stubs.push((true, !shown));
                        }
                        options.push(stubs);
                    }
                }
                options
            })
            .collect();
        for literal_mask in 0u64..(1u64 << e) {
            let mut combos: Vec<Vec<Vec<(bool, bool)>>> = vec![Vec::new()];
            for options in &stub_options {
                let mut next = Vec::with_capacity(combos.len() * options.len());
                for combo in &combos {
                    for option in options {
                        let mut grown = combo.clone();
                        grown.push(option.clone());
                        next.push(grown);
                    }
                }
                combos = next;
            }
            for combo in combos {
                candidates += 1;
                if candidates > budget {
                    return Err(TreeError::BudgetExceeded { candidates, budget });
                }
                let mut bit = 0usize;
                let clauses: Vec<RawClause> = shape
                    .clauses
                    .iter()
                    .zip(combo)
                    .map(|(vars, stubs)| {
                        let internal = vars
                            .iter()
                            .map(|&v| {
                                let lit = (literal_mask >> bit) & 1 == 1;
                                bit += 1;
                                (v, lit)
                            })
                            .collect();
                        RawClause { internal, stubs }
                    })
                    .collect();
                let raw = RawTree {
                    d,
                    k,
                    vars: shape.vars,
                    clauses,
                };
                let tree = canonicalize(&raw, &mut table)
                    .expect("grown decorations always form free trees");
                match classes.entry(tree.key.clone()) {
                    std::collections::btree_map::Entry::Vacant(slot) => {
                        slot.insert(tree);
                    }
                    std::collections::btree_map::Entry::Occupied(slot) => {
                        let seen = slot.get();
                        assert!(
                            seen.v == tree.v
                                && seen.f == tree.f
                                && seen.e == tree.e
                                && seen.eta_b0 == tree.eta_b0
                                && seen.eta_b1 == tree.eta_b1
                                && seen.j == tree.j
                                && seen.w_lit == tree.w_lit
                                && seen.ham == tree.ham,
                            "key collision with mismatched statistics"
                        );
                    }
                }
            }
        }
    }
    let mut trees: Vec<FreeTree> = classes.into_values().collect();
    trees.sort_by(|a, b| (a.v, &a.key).cmp(&(b.v, &b.key)));
    let index = trees
        .iter()
        .enumerate()
        .map(|(i, t)| (t.key.clone(), i))
        .collect();
    Ok(TreeCatalog {
        d,
        k,
        cutoff,
        trees,
        index,
        complete: vec![true; cutoff],
        candidates,
    })
}

// ---------------------------------------------------------------------------
// Instance pieces.
// ---------------------------------------------------------------------------

/// Reads one free piece of a frozen configuration off its instance and
/// canonicalizes it.  The configuration must be valid; the piece must be a
/// tree.
pub fn piece_tree(
    inst: &Instance,
    fc: &FrozenConfig,
    piece: &frozen::FreePiece,
    table: &mut SpinTable,
) -> Result<FreeTree, TreeError> {
    if !piece.is_tree() {
        return Err(TreeError::NotATree);
    }
    let position: HashMap<usize, usize> = piece
        .vars
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, i))
        .collect();
    let clauses: Vec<RawClause> = piece
        .clauses
        .iter()
        .map(|&a| {
            let mut internal = Vec::new();
            let mut stubs = Vec::new();
            for j in inst.clause_half_edges(a) {
                let i = inst.var_side(j);
                let u = inst.var_of(i);
                let literal = inst.literal(i);
                match fc.label(u).bit() {
                    None => internal.push((position[&u], literal)),
                    Some(value) => stubs.push((value, literal)),
                }
            }
            RawClause { internal, stubs }
        })
        .collect();
    let raw = RawTree {
        d: inst.d(),
        k: inst.k(),
        vars: piece.vars.len(),
        clauses,
    };
    canonicalize(&raw, table)
}

/// Canonical key of one free piece, for catalog lookups.
pub fn instance_piece_key(
    inst: &Instance,
    fc: &FrozenConfig,
    piece: &frozen::FreePiece,
    table: &mut SpinTable,
) -> Result<String, TreeError> {
    piece_tree(inst, fc, piece, table).map(|t| t.key)
}

// ---------------------------------------------------------------------------
// The labelled-component identity.
// ---------------------------------------------------------------------------

/// Both sides of the identity tying a class's embedding constant and tilted
/// weight to the weighted count of labelled, literal-decorated components in
/// the class.
#[derive(Debug, Clone)]
pub struct ComponentIdentity {
    pub lhs: BigRational,
    pub rhs: BigRational,
    /// Ordered decorations of the fixed shape that landed in the class.
    pub matched: usize,
}

/// Automorphisms of the bare shape (no messages, no boundary data).
fn shape_automorphisms(vars: usize, clauses: &[Vec<usize>]) -> usize {
    let mut clause_by_vars: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for (c, clause) in clauses.iter().enumerate() {
        let mut sorted = clause.clone();
        sorted.sort_unstable();
        let previous = clause_by_vars.insert(sorted, c);
        assert!(previous.is_none(), "clauses of a tree have distinct slots");
    }
    let mut count = 0usize;
    'perm: for perm in (0..vars).permutations(vars) {
        let mut used = vec![false; clauses.len()];
        for clause in clauses {
            let mut image: Vec<usize> = clause.iter().map(|&v| perm[v]).collect();
            image.sort_unstable();
            match clause_by_vars.get(&image) {
                Some(&target) if !used[target] => used[target] = true,
                _ => continue 'perm,
            }
        }
        count += 1;
    }
    count
}

/// Computes both sides of the identity for a class with few variables.  The
/// left side multiplies the embedding constant into the tilted class weight;
/// the right side sweeps every ordered decoration of one fixed labelled
/// shape — internal literals free, boundary slots free over value and
/// literal — keeps those landing in the class, and normalizes by the
/// half-edge labellings of the shape and the uniform literal measure.
pub fn component_sum_sides(
    tree: &FreeTree,
    lambda: Lambda,
    table: &mut SpinTable,
) -> Result<ComponentIdentity, TreeError> {
    let raw = tree.rep();
    let d = raw.d;
    let k = raw.k;
    let e = raw.e();
    let shape: Vec<Vec<usize>> = raw
        .clauses
        .iter()
        .map(|c| c.internal.iter().map(|&(v, _)| v).collect())
        .collect();
    let spare_slots: usize = shape.iter().map(|c| k - c.len()).sum();
    if e + 2 * spare_slots > 24 {
        return Err(TreeError::TooManyVars(raw.vars));
    }

    let lhs = BigRational::from_integer(BigInt::from(num_traits::pow(
        BigUint::from(d),
        raw.vars - 1,
    ))) * BigRational::from_integer(BigInt::from(num_traits::pow(
        BigUint::from(k),
        raw.clauses.len(),
    ))) * tree.j()
        * tree_weight_lambda(tree, lambda, table);

    // Half-edge labellings of the bare shape: vertex automorphisms times the
    // interchangeable boundary slots at every vertex.
    let mut aut_half = BigUint::from(shape_automorphisms(raw.vars, &shape));
    let degrees = {
        let mut deg = vec![0usize; raw.vars];
        for clause in &shape {
            for &v in clause {
                deg[v] += 1;
            }
        }
        deg
    };
    for &deg in &degrees {
        aut_half *= factorial(d - deg);
    }
    for clause in &shape {
        aut_half *= factorial(k - clause.len());
    }

    let mut matched = 0usize;
    let mut sum = BigRational::zero();
    let stub_choices: Vec<Vec<(bool, bool)>> = (0..spare_slots)
        .map(|_| vec![(false, false), (false, true), (true, false), (true, true)])
        .collect();
    let mut stub_iter: Vec<Vec<(bool, bool)>> = if spare_slots == 0 {
        vec![Vec::new()]
    } else {
        stub_choices
            .into_iter()
            .multi_cartesian_product()
            .collect()
    };
    for literal_mask in 0u64..(1u64 << e) {
        for stubs_flat in &mut stub_iter {
            let mut bit = 0usize;
            let mut cursor = 0usize;
            let clauses: Vec<RawClause> = shape
                .iter()
                .map(|vars| {
                    let internal = vars
                        .iter()
                        .map(|&v| {
                            let lit = (literal_mask >> bit) & 1 == 1;
                            bit += 1;
                            (v, lit)
                        })
                        .collect();
                    let spare = k - vars.len();
                    let stubs = stubs_flat[cursor..cursor + spare].to_vec();
                    cursor += spare;
                    RawClause { internal, stubs }
                })
                .collect();
            let candidate = RawTree {
                d,
                k,
                vars: raw.vars,
                clauses,
            };
            let Ok(found) = canonicalize(&candidate, table) else {
                continue;
            };
            if found.key != tree.key {
                continue;
            }
            assert_eq!(
                found.w_lit, tree.w_lit,
                "every member of a class has the same extension count"
            );
            sum += pow_lambda_uint(&found.w_lit, lambda);
            matched += 1;
        }
    }

    let labellings = num_traits::pow(factorial(d), raw.vars)
        * num_traits::pow(factorial(k), raw.clauses.len());
    let literal_measure = BigRational::new(
        BigInt::one(),
        BigInt::from(BigUint::one() << (k * raw.clauses.len())),
    );
    let rhs = BigRational::new(BigInt::from(labellings), BigInt::from(aut_half))
        * sum
        * literal_measure;
    Ok(ComponentIdentity { lhs, rhs, matched })
}

/// Checks the identity: exact equality at exact tilts, relative agreement to
/// 1e-12 otherwise.
pub fn component_sum_check(
    tree: &FreeTree,
    lambda: Lambda,
    table: &mut SpinTable,
) -> Result<bool, TreeError> {
    let sides = component_sum_sides(tree, lambda, table)?;
    if lambda.is_exact() {
        return Ok(sides.lhs == sides.rhs);
    }
    let tolerance = BigRational::new(BigInt::one(), BigInt::from(1_000_000_000_000u64));
    Ok((&sides.lhs - &sides.rhs).abs() <= tolerance * &sides.rhs)
}

// ---------------------------------------------------------------------------
