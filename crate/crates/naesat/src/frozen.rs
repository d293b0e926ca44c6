//! Frozen configurations: the {0,1,free} encoding of solution clusters.
//!
//! A frozen configuration labels each variable 0, 1, or free, where free
//! absorbs literals (free ⊕ L = free). It is *valid* when (a) no clause sees
//! all-equal Boolean values, and (b) a variable is Boolean precisely when
//! some single edge pins it: negating that edge's literal would violate its
//! clause. Coarsening maps a solution to such a configuration by repeatedly
//! freeing any variable whose flip violates nothing.
//!
//! The free subgraph (free variables plus non-separating clauses) splits
//! into pieces whose extension counts multiply, which is what the census and
//! the Bethe-formula checks consume. Everything here is exhaustive,
//! guard-railed ground truth; the scalable machinery lives in the coloring,
//! free-tree, and belief-propagation modules.

use crate::exact::{pow_lambda_uint, Lambda};
use crate::instance::{Assignment, Instance};
use crate::oracle::{average_over_instances, OracleError, PartitionValue};
use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Per-piece extension enumeration guard: 2^bits assignments.
pub const MAX_EXTENSION_BITS: usize = 20;
/// Frozen-configuration enumeration guard: 3^n sweeps.
pub const MAX_FROZEN_ENUM_VARS: usize = 12;

#[derive(Debug, Error)]
pub enum FrozenError {
    #[error("coarsening must start from a solution")]
    NotASolution,
    #[error("labels length {got} does not match n = {n}")]
    BadLength { got: usize, n: usize },
    #[error("a free piece has {0} variables, over the 2^{MAX_EXTENSION_BITS} extension guard")]
    TooManyFreeVars(usize),
    #[error("n = {0} exceeds the 3^n frozen-enumeration guard of {MAX_FROZEN_ENUM_VARS}")]
    TooManyVars(usize),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// One variable's state in a frozen configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarLabel {
    Zero,
    One,
    Free,
}

impl VarLabel {
    pub fn from_bit(b: bool) -> VarLabel {
        if b {
            VarLabel::One
        } else {
            VarLabel::Zero
        }
    }

    /// Boolean value, or None for free.
    pub fn bit(self) -> Option<bool> {
        match self {
            VarLabel::Zero => Some(false),
            VarLabel::One => Some(true),
            VarLabel::Free => None,
        }
    }

    pub fn is_free(self) -> bool {
        self == VarLabel::Free
    }

    /// 0 <-> 1; free is a fixed point.
    pub fn negated(self) -> VarLabel {
        match self {
            VarLabel::Zero => VarLabel::One,
            VarLabel::One => VarLabel::Zero,
            VarLabel::Free => VarLabel::Free,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FrozenConfig {
    labels: Vec<VarLabel>,
}

impl FrozenConfig {
    pub fn from_labels(labels: Vec<VarLabel>) -> FrozenConfig {
        FrozenConfig { labels }
    }

    pub fn all_free(n: usize) -> FrozenConfig {
        FrozenConfig {
            labels: vec![VarLabel::Free; n],
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, v: usize) -> VarLabel {
        self.labels[v]
    }

    pub fn labels(&self) -> &[VarLabel] {
        &self.labels
    }

    pub fn free_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_free()).count()
    }

    pub fn is_all_free(&self) -> bool {
        self.labels.iter().all(|l| l.is_free())
    }

    /// Global negation: flips every Boolean label, keeps free variables.
    pub fn negated(&self) -> FrozenConfig {
        FrozenConfig {
            labels: self.labels.iter().map(|l| l.negated()).collect(),
        }
    }

    /// True when the assignment agrees with every Boolean label.
    pub fn extends(&self, x: &Assignment) -> bool {
        self.labels
            .iter()
            .zip(&x.bits)
            .all(|(l, &b)| l.bit().map_or(true, |lb| lb == b))
    }

    /// Stable 64-bit FNV-1a digest of the label vector, as fixed-width hex.
    pub fn digest(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.labels {
            let byte = match l {
                VarLabel::Zero => 0u8,
                VarLabel::One => 1,
                VarLabel::Free => 2,
            };
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

impl std::fmt::Display for FrozenConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for l in &self.labels {
            f.write_str(match l {
                VarLabel::Zero => "0",
                VarLabel::One => "1",
                VarLabel::Free => "f",
            })?;
        }
        Ok(())
    }
}

/// Literal-adjusted value edge i (a variable-side half-edge) shows its
/// clause; None when the variable is free.
pub fn edge_value(inst: &Instance, fc: &FrozenConfig, i: usize) -> Option<bool> {
    fc.label(inst.var_of(i)).bit().map(|b| b ^ inst.literal(i))
}

/// True when clause a sees k Boolean values that are all equal, with the
/// option of negating the literal of one variable-side half-edge first.
fn clause_violated(inst: &Instance, fc: &FrozenConfig, a: usize, negate_edge: Option<usize>) -> bool {
    let mut first: Option<bool> = None;
    for j in inst.clause_half_edges(a) {
        let i = inst.var_side(j);
        let val = match edge_value(inst, fc, i) {
            None => return false,
            Some(v) => v ^ (negate_edge == Some(i)),
        };
        match first {
            None => first = Some(val),
            Some(f) if f != val => return false,
            Some(_) => {}
        }
    }
    true
}

/// No clause is violated (free values never violate anything).
pub fn nae_ok(inst: &Instance, fc: &FrozenConfig) -> bool {
    (0..inst.m()).all(|a| !clause_violated(inst, fc, a, None))
}

/// Edge i is forcing: every other value in its clause is Boolean and equal,
/// and edge i currently shows the opposite value. Equivalently, negating
/// L_i would violate the clause.
pub fn is_forcing_edge(inst: &Instance, fc: &FrozenConfig, i: usize) -> bool {
    clause_violated(inst, fc, inst.clause_of(inst.clause_side(i)), Some(i))
}

/// Forcing indicator for every variable-side half-edge.
pub fn forcing_edges(inst: &Instance, fc: &FrozenConfig) -> Vec<bool> {
    (0..inst.edges())
        .map(|i| is_forcing_edge(inst, fc, i))
        .collect()
}

/// Validity: no violated clause, each variable is Boolean iff one of its
/// edges is forcing, and every clause that is not separated by its frozen
/// neighbours keeps at least two free slots.
///
/// The last condition rules out a clause whose frozen slots all agree and
/// whose remaining slot holds a lone free variable: such a clause would pin
/// that variable to one value in every extension, contradicting its freedom,
/// and the message recursion around it would re-freeze the variable.
pub fn validate(inst: &Instance, fc: &FrozenConfig) -> bool {
    if fc.n() != inst.n() {
        return false;
    }
    if !nae_ok(inst, fc) {
        return false;
    }
    if !(0..inst.n()).all(|v| {
        let witnessed = inst
            .var_half_edges(v)
            .any(|i| is_forcing_edge(inst, fc, i));
        witnessed == !fc.label(v).is_free()
    }) {
        return false;
    }
    (0..inst.m()).all(|a| {
        let mut seen0 = false;
        let mut seen1 = false;
        let mut free_slots = 0usize;
        for j in inst.clause_half_edges(a) {
            match edge_value(inst, fc, inst.var_side(j)) {
                Some(false) => seen0 = true,
                Some(true) => seen1 = true,
                None => free_slots += 1,
            }
        }
        (seen0 && seen1) || free_slots >= 2
    })
}

/// True when flipping variable v's Boolean value violates no clause. All of
/// v's occurrences flip at once, so parallel edges are handled faithfully.
fn can_flip_var(inst: &Instance, labels: &[VarLabel], v: usize) -> bool {
    debug_assert!(!labels[v].is_free());
    for i in inst.var_half_edges(v) {
        let a = inst.clause_of(inst.clause_side(i));
        let mut first: Option<bool> = None;
        let mut violated = true;
        for j in inst.clause_half_edges(a) {
            let iv = inst.var_side(j);
            let u = inst.var_of(iv);
            let lbl = if u == v { labels[u].negated() } else { labels[u] };
            let val = match lbl.bit() {
                None => {
                    violated = false;
                    break;
                }
                Some(b) => b ^ inst.literal(iv),
            };
            match first {
                None => first = Some(val),
                Some(f) if f != val => {
                    violated = false;
                    break;
                }
                Some(_) => {}
            }
        }
        if violated {
            return false;
        }
    }
    true
}

/// Coarsens a solution: repeatedly frees, in ascending variable order, any
/// Boolean variable whose flip violates nothing, until a full pass changes
/// nothing. The fixed point does not depend on the scan order because the
/// flippability of a variable is monotone under freeing others.
pub fn coarsen(inst: &Instance, x: &Assignment) -> Result<FrozenConfig, FrozenError> {
    if x.bits.len() != inst.n() {
        return Err(FrozenError::BadLength {
            got: x.bits.len(),
            n: inst.n(),
        });
    }
    if !inst.eval_nae(x).map_err(OracleError::from)? {
        return Err(FrozenError::NotASolution);
    }
    let order: Vec<usize> = (0..inst.n()).collect();
    Ok(coarsen_in_order(inst, x, &order))
}

/// Scan-order-explicit coarsening; `coarsen` uses ascending order and tests
/// confirm the fixed point is order-independent.
pub(crate) fn coarsen_in_order(inst: &Instance, x: &Assignment, order: &[usize]) -> FrozenConfig {
    let mut labels: Vec<VarLabel> = x.bits.iter().map(|&b| VarLabel::from_bit(b)).collect();
    loop {
        let mut changed = false;
        for &v in order {
            if !labels[v].is_free() && can_flip_var(inst, &labels, v) {
                labels[v] = VarLabel::Free;
                changed = true;
            }
        }
        if !changed {
            return FrozenConfig { labels };
        }
    }
}

/// A clause either separates (sees both Boolean values among its frozen
/// neighbors) or it does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClauseKind {
    Separating,
    NonSeparating,
}

/// Classification of every clause under a frozen configuration.
pub fn classify_clauses(inst: &Instance, fc: &FrozenConfig) -> Vec<ClauseKind> {
    (0..inst.m())
        .map(|a| {
            let mut seen0 = false;
            let mut seen1 = false;
            for j in inst.clause_half_edges(a) {
                match edge_value(inst, fc, inst.var_side(j)) {
                    Some(false) => seen0 = true,
                    Some(true) => seen1 = true,
                    None => {}
                }
            }
            if seen0 && seen1 {
                ClauseKind::Separating
            } else {
                ClauseKind::NonSeparating
            }
        })
        .collect()
}

/// One connected component of the free subgraph, with its boundary.
///
/// Edges are identified by variable-side half-edge index throughout.
/// `boundary_frozen` are the edges from this piece's clauses to frozen
/// variables (labelled by the frozen value before the literal is applied);
/// `boundary_separating` are the edges from this piece's variables to
/// separating clauses.
#[derive(Debug, Clone)]
pub struct FreePiece {
    pub vars: Vec<usize>,
    pub clauses: Vec<usize>,
    pub internal_edges: Vec<usize>,
    pub boundary_frozen: Vec<usize>,
    pub boundary_separating: Vec<usize>,
    /// Boundary-spin tallies over `boundary_frozen`, keyed by frozen value.
    pub eta_b0: usize,
    pub eta_b1: usize,
}

impl FreePiece {
    pub fn v(&self) -> usize {
        self.vars.len()
    }

    pub fn f(&self) -> usize {
        self.clauses.len()
    }

    pub fn e(&self) -> usize {
        self.internal_edges.len()
    }

    /// gamma = e - v - f: one less than the number of independent cycles;
    /// -1 exactly when the piece is a tree.
    pub fn gamma(&self) -> i64 {
        self.e() as i64 - self.v() as i64 - self.f() as i64
    }

    pub fn is_tree(&self) -> bool {
        self.gamma() == -1
    }

    pub fn eta_s(&self) -> usize {
        self.boundary_separating.len()
    }
}

/// All free pieces of a configuration plus membership maps.
#[derive(Debug, Clone)]
pub struct FreeStructure {
    pub pieces: Vec<FreePiece>,
    pub piece_of_var: Vec<Option<usize>>,
    pub piece_of_clause: Vec<Option<usize>>,
}

impl FreeStructure {
    pub fn has_free_cycle(&self) -> bool {
        self.pieces.iter().any(|p| p.gamma() >= 0)
    }

    /// Pieces carrying at least one cycle.
    pub fn cyclic_piece_count(&self) -> usize {
        self.pieces.iter().filter(|p| p.gamma() >= 0).count()
    }
}

/// Decomposes the free subgraph (free variables and non-separating clauses)
/// into connected pieces. Precondition: `nae_ok` holds, so a non-separating
/// clause always touches at least one free variable.
pub fn free_structure(inst: &Instance, fc: &FrozenConfig) -> FreeStructure {
    debug_assert!(nae_ok(inst, fc));
    let kinds = classify_clauses(inst, fc);
    let mut piece_of_var: Vec<Option<usize>> = vec![None; inst.n()];
    let mut piece_of_clause: Vec<Option<usize>> = vec![None; inst.m()];
    let mut pieces = Vec::new();

    for start in 0..inst.n() {
        if !fc.label(start).is_free() || piece_of_var[start].is_some() {
            continue;
        }
        let id = pieces.len();
        let mut vars = vec![start];
        let mut clauses = Vec::new();
        piece_of_var[start] = Some(id);
        let mut queue_v = vec![start];
        let mut queue_a = Vec::new();
        while !queue_v.is_empty() || !queue_a.is_empty() {
            if let Some(v) = queue_v.pop() {
                for i in inst.var_half_edges(v) {
                    let a = inst.clause_of(inst.clause_side(i));
                    if kinds[a] == ClauseKind::NonSeparating && piece_of_clause[a].is_none() {
                        piece_of_clause[a] = Some(id);
                        clauses.push(a);
                        queue_a.push(a);
                    }
                }
            } else if let Some(a) = queue_a.pop() {
                for j in inst.clause_half_edges(a) {
                    let u = inst.var_of(inst.var_side(j));
                    if fc.label(u).is_free() && piece_of_var[u].is_none() {
                        piece_of_var[u] = Some(id);
                        vars.push(u);
                        queue_v.push(u);
                    }
                }
            }
        }
        vars.sort_unstable();
        clauses.sort_unstable();

        let mut internal_edges = Vec::new();
        let mut boundary_separating = Vec::new();
        for &v in &vars {
            for i in inst.var_half_edges(v) {
                let a = inst.clause_of(inst.clause_side(i));
                if kinds[a] == ClauseKind::NonSeparating {
                    internal_edges.push(i);
                } else {
                    boundary_separating.push(i);
                }
            }
        }
        let mut boundary_frozen = Vec::new();
        let mut eta_b0 = 0;
        let mut eta_b1 = 0;
        for &a in &clauses {
            for j in inst.clause_half_edges(a) {
                let i = inst.var_side(j);
                match fc.label(inst.var_of(i)) {
                    VarLabel::Free => {}
                    VarLabel::Zero => {
                        boundary_frozen.push(i);
                        eta_b0 += 1;
                    }
                    VarLabel::One => {
                        boundary_frozen.push(i);
                        eta_b1 += 1;
                    }
                }
            }
        }
        boundary_frozen.sort_unstable();

        pieces.push(FreePiece {
            vars,
            clauses,
            internal_edges,
            boundary_frozen,
            boundary_separating,
            eta_b0,
            eta_b1,
        });
    }

    FreeStructure {
        pieces,
        piece_of_var,
        piece_of_clause,
    }
}

/// Number of ways to fill one piece's free variables with Booleans so every
/// clause of the piece sees both values (frozen boundary values included).
pub fn piece_extension_count(
    inst: &Instance,
    fc: &FrozenConfig,
    piece: &FreePiece,
) -> Result<BigUint, FrozenError> {
    let nv = piece.v();
    if nv > MAX_EXTENSION_BITS {
        return Err(FrozenError::TooManyFreeVars(nv));
    }
    // Pre-resolve each clause into (positions into piece.vars, literal) plus
    // the fixed boundary contribution.
    let var_pos: BTreeMap<usize, usize> = piece
        .vars
        .iter()
        .enumerate()
        .map(|(idx, &v)| (v, idx))
        .collect();
    struct ClauseView {
        free_slots: Vec<(usize, bool)>,
        frozen_seen0: bool,
        frozen_seen1: bool,
    }
    let views: Vec<ClauseView> = piece
        .clauses
        .iter()
        .map(|&a| {
            let mut view = ClauseView {
                free_slots: Vec::new(),
                frozen_seen0: false,
                frozen_seen1: false,
            };
            for j in inst.clause_half_edges(a) {
                let i = inst.var_side(j);
                match edge_value(inst, fc, i) {
                    Some(false) => view.frozen_seen0 = true,
                    Some(true) => view.frozen_seen1 = true,
                    None => view
                        .free_slots
                        .push((var_pos[&inst.var_of(i)], inst.literal(i))),
                }
            }
            view
        })
        .collect();
    let mut count: u64 = 0;
    for mask in 0u64..1 << nv {
        let ok = views.iter().all(|view| {
            let mut seen0 = view.frozen_seen0;
            let mut seen1 = view.frozen_seen1;
            for &(pos, lit) in &view.free_slots {
                if (mask >> pos & 1 == 1) ^ lit {
                    seen1 = true;
                } else {
                    seen0 = true;
                }
            }
            seen0 && seen1
        });
        count += ok as u64;
    }
    Ok(BigUint::from(count))
}

/// Number of solutions extending the configuration: the product of the
/// piece extension counts. Zero when some clause is already violated.
pub fn count_extensions(inst: &Instance, fc: &FrozenConfig) -> Result<BigUint, FrozenError> {
    if !nae_ok(inst, fc) {
        return Ok(BigUint::zero());
    }
    let structure = free_structure(inst, fc);
    let mut acc = BigUint::one();
    for piece in &structure.pieces {
        acc *= piece_extension_count(inst, fc, piece)?;
        if acc.is_zero() {
            return Ok(acc);
        }
    }
    Ok(acc)
}

/// Every valid frozen configuration, by exhaustive 3^n sweep in ascending
/// ternary order (variable 0 is the least-significant trit).
pub fn enumerate_valid_frozen(inst: &Instance) -> Result<Vec<FrozenConfig>, FrozenError> {
    let n = inst.n();
    if n > MAX_FROZEN_ENUM_VARS {
        return Err(FrozenError::TooManyVars(n));
    }
    let total = 3usize.pow(n as u32);
    let mut out = Vec::new();
    for code in 0..total {
        let mut c = code;
        let labels: Vec<VarLabel> = (0..n)
            .map(|_| {
                let trit = c % 3;
                c /= 3;
                match trit {
                    0 => VarLabel::Zero,
                    1 => VarLabel::One,
                    _ => VarLabel::Free,
                }
            })
            .collect();
        let fc = FrozenConfig { labels };
        if validate(inst, &fc) {
            out.push(fc);
        }
    }
    Ok(out)
}

/// size^λ with the counting convention 0^0 = 1, so λ = 0 counts valid
/// configurations whether or not they extend to a solution.
pub fn size_pow(size: &BigUint, lambda: Lambda) -> BigRational {
    if size.is_zero() {
        if lambda.is_zero() {
            BigRational::one()
        } else {
            BigRational::zero()
        }
    } else {
        pow_lambda_uint(size, lambda)
    }
}

/// Σ over valid frozen configurations of (extension count)^λ for one
/// instance. Exact at λ ∈ {0,1}.
pub fn frozen_partition_sum(inst: &Instance, lambda: Lambda) -> Result<PartitionValue, FrozenError> {
    let mut value = BigRational::zero();
    for fc in enumerate_valid_frozen(inst)? {
        let size = count_extensions(inst, &fc)?;
        value += size_pow(&size, lambda);
    }
    Ok(PartitionValue {
        lambda,
        value,
        exact: lambda.is_exact(),
    })
}

/// E over every (matching, literals) draw of Σ_{valid frozen x} size(x)^λ.
/// This is the ground truth the first-moment product formula must reproduce.
pub fn exact_expected_frozen_partition(
    n: usize,
    d: usize,
    k: usize,
    lambda: Lambda,
) -> Result<PartitionValue, FrozenError> {
    // Aggregate an exact histogram of extension counts so fractional powers
    // are taken once per distinct size.
    let (hist, count) = average_over_instances(
        n,
        d,
        k,
        |inst| {
            let mut h: BTreeMap<BigUint, u64> = BTreeMap::new();
            for fc in enumerate_valid_frozen(inst).expect("guarded n") {
                let size = count_extensions(inst, &fc).expect("guarded piece");
                *h.entry(size).or_insert(0) += 1;
            }
            h
        },
        |mut a, b| {
            for (size, c) in b {
                *a.entry(size).or_insert(0) += c;
            }
            a
        },
        BTreeMap::new(),
    )?;
    let mut value = BigRational::zero();
    for (size, mult) in &hist {
        value += size_pow(size, lambda) * BigRational::from_integer(BigInt::from(*mult));
    }
    value /= BigRational::from_integer(BigInt::from(count));
    Ok(PartitionValue {
        lambda,
        value,
        exact: lambda.is_exact(),
    })
}
