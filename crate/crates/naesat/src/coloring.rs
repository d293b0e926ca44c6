//! Message configurations and coloring projections.
//!
//! A frozen configuration whose free subgraph is acyclic can be re-encoded
//! edge by edge: each edge carries a pair of messages (variable-to-clause and
//! clause-to-variable) describing the shape of the free tree hanging off that
//! edge.  Messages are rooted trees with boundary labels, built from the atoms
//! `0`, `1`, a separating marker, and a cycle marker, closed under joining.
//! Attaching belief-propagation marginals to every message turns the number of
//! solutions extending the frozen configuration into a product of local
//! factors, one per variable, clause, and edge.
//!
//! Projecting each message pair to a coarser palette (red for forced edges,
//! blue for unforced frozen edges, and the free pairs themselves) yields the
//! coloring configuration, whose local validity indicators and weights are
//! what the moment computations consume.  All weights here are exact
//! rationals; the large-degree floating-point pipeline lives in [`crate::bp`].

use std::collections::{BTreeMap, HashMap};

use itertools::Itertools;
use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use thiserror::Error;

use crate::frozen::{self, FrozenConfig};
use crate::instance::Instance;

/// Errors for message construction and coloring evaluation.
#[derive(Debug, Error)]
pub enum ColoringError {
    /// The frozen configuration fails its pointwise validity conditions.
    #[error("frozen configuration is not valid on this instance")]
    InvalidFrozenConfig,
    /// Messages carry contradictory forced values into one variable.
    #[error("messages force contradictory values at a variable")]
    ContradictoryMessages,
    /// The free subgraph contains a cycle, so no finite message assignment
    /// (and no well-defined cluster weight) exists for its edges.
    #[error("free subgraph contains a cycle; messages and weights are undefined")]
    FreeCycle,
    /// A cycle marker appeared where a fully resolved message is required.
    #[error("cycle marker encountered where a resolved message is required")]
    UnresolvedCycle,
    /// A local weight has a vanishing normalizer.
    #[error("degenerate local weight (zero normalizer)")]
    DegenerateWeight,
    /// A free piece exceeds the exact-enumeration guard.
    #[error("free piece too large for exact enumeration")]
    PieceTooLarge,
}

/// Interned variable-to-clause message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DotId(u32);

/// Interned clause-to-variable message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HatId(u32);

/// The variable-to-clause atom `0`.
pub const DOT_ZERO: DotId = DotId(0);
/// The variable-to-clause atom `1`.
pub const DOT_ONE: DotId = DotId(1);
/// The variable-to-clause cycle marker.
pub const DOT_STAR: DotId = DotId(2);
/// The clause-to-variable atom `0` (a forcing message).
pub const HAT_ZERO: HatId = HatId(0);
/// The clause-to-variable atom `1` (a forcing message).
pub const HAT_ONE: HatId = HatId(1);
/// The clause-to-variable cycle marker.
pub const HAT_STAR: HatId = HatId(2);
/// The clause-to-variable separating marker.
pub const HAT_SEP: HatId = HatId(3);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum DotNode {
    Zero,
    One,
    Star,
    /// Join of clause-to-variable subtrees, as a sorted multiset.
    Join(Vec<(HatId, u32)>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum HatNode {
    Zero,
    One,
    Star,
    Sep,
    /// Join of variable-to-clause subtrees, as a sorted multiset.
    Join(Vec<(DotId, u32)>),
}

/// Structural view of a variable-to-clause message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DotKind<'a> {
    Zero,
    One,
    Star,
    Join(&'a [(HatId, u32)]),
}

/// Structural view of a clause-to-variable message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HatKind<'a> {
    Zero,
    One,
    Star,
    Sep,
    Join(&'a [(DotId, u32)]),
}

/// Belief-propagation data attached to one interned message.
#[derive(Debug, Clone)]
struct SpinInfo {
    /// Number of variables carried by the rooted tree (clause-rooted trees do
    /// not count a root variable; variable-rooted trees do).
    vars: u64,
    /// Marginal mass on value 0.
    m0: BigRational,
    /// Marginal mass on value 1.
    m1: BigRational,
    /// Normalizer of the defining product, where meaningful.
    z: Option<BigRational>,
}

/// Hash-consed store of messages.
///
/// Joins keep their children as sorted multisets of already-interned ids, so
/// structural equality of ids is exactly isomorphism of the underlying
/// boundary-labelled trees, and every message is interned together with its
/// global boundary flip.  Marginals and normalizers are computed once per
/// message, as exact rationals.
#[derive(Debug)]
pub struct SpinTable {
    dot_nodes: Vec<DotNode>,
    hat_nodes: Vec<HatNode>,
    dot_lookup: HashMap<DotNode, DotId>,
    hat_lookup: HashMap<HatNode, HatId>,
    dot_info: Vec<SpinInfo>,
    hat_info: Vec<SpinInfo>,
    dot_flip: Vec<DotId>,
    hat_flip: Vec<HatId>,
}

impl Default for SpinTable {
    fn default() -> Self {
        SpinTable::new()
    }
}

fn half() -> BigRational {
    BigRational::new(BigInt::from(1), BigInt::from(2))
}

impl SpinTable {
    pub fn new() -> SpinTable {
        let mut table = SpinTable {
            dot_nodes: Vec::new(),
            hat_nodes: Vec::new(),
            dot_lookup: HashMap::new(),
            hat_lookup: HashMap::new(),
            dot_info: Vec::new(),
            hat_info: Vec::new(),
            dot_flip: Vec::new(),
            hat_flip: Vec::new(),
        };
        assert_eq!(table.intern_dot(DotNode::Zero), DOT_ZERO);
        assert_eq!(table.dot_lookup[&DotNode::One], DOT_ONE);
        assert_eq!(table.intern_dot(DotNode::Star), DOT_STAR);
        assert_eq!(table.intern_hat(HatNode::Zero), HAT_ZERO);
        assert_eq!(table.hat_lookup[&HatNode::One], HAT_ONE);
        assert_eq!(table.intern_hat(HatNode::Star), HAT_STAR);
        assert_eq!(table.intern_hat(HatNode::Sep), HAT_SEP);
        table
    }

    pub fn dot_count(&self) -> usize {
        self.dot_nodes.len()
    }

    pub fn hat_count(&self) -> usize {
        self.hat_nodes.len()
    }

    pub fn dot_atom(&self, bit: bool) -> DotId {
        if bit {
            DOT_ONE
        } else {
            DOT_ZERO
        }
    }

    pub fn hat_atom(&self, bit: bool) -> HatId {
        if bit {
            HAT_ONE
        } else {
            HAT_ZERO
        }
    }

    pub fn dot_kind(&self, id: DotId) -> DotKind<'_> {
        match &self.dot_nodes[id.0 as usize] {
            DotNode::Zero => DotKind::Zero,
            DotNode::One => DotKind::One,
            DotNode::Star => DotKind::Star,
            DotNode::Join(children) => DotKind::Join(children),
        }
    }

    pub fn hat_kind(&self, id: HatId) -> HatKind<'_> {
        match &self.hat_nodes[id.0 as usize] {
            HatNode::Zero => HatKind::Zero,
            HatNode::One => HatKind::One,
            HatNode::Star => HatKind::Star,
            HatNode::Sep => HatKind::Sep,
            HatNode::Join(children) => HatKind::Join(children),
        }
    }

    pub fn is_dot_atom(&self, id: DotId) -> bool {
        id == DOT_ZERO || id == DOT_ONE
    }

    pub fn is_hat_atom(&self, id: HatId) -> bool {
        id == HAT_ZERO || id == HAT_ONE
    }

    /// Atom value carried by a variable-to-clause message, if any.
    pub fn dot_bit(&self, id: DotId) -> Option<bool> {
        match id {
            DOT_ZERO => Some(false),
            DOT_ONE => Some(true),
            _ => None,
        }
    }

    /// Atom value carried by a clause-to-variable message, if any.
    pub fn hat_bit(&self, id: HatId) -> Option<bool> {
        match id {
            HAT_ZERO => Some(false),
            HAT_ONE => Some(true),
            _ => None,
        }
    }

    /// Number of variables of the rooted tree behind a variable-to-clause
    /// message (the root variable counts; a clause-rooted atom carries none).
    pub fn dot_vars(&self, id: DotId) -> u64 {
        self.dot_info[id.0 as usize].vars
    }

    /// Number of variables of the rooted tree behind a clause-to-variable
    /// message (variable-rooted, so the root variable counts).
    pub fn hat_vars(&self, id: HatId) -> u64 {
        self.hat_info[id.0 as usize].vars
    }

    /// Marginal attached to a variable-to-clause message.
    pub fn dot_measure(&self, id: DotId) -> (&BigRational, &BigRational) {
        let info = &self.dot_info[id.0 as usize];
        (&info.m0, &info.m1)
    }

    /// Marginal attached to a clause-to-variable message.
    pub fn hat_measure(&self, id: HatId) -> (&BigRational, &BigRational) {
        let info = &self.hat_info[id.0 as usize];
        (&info.m0, &info.m1)
    }

    /// Normalizer of the defining product at a variable, where defined.
    pub fn dot_z(&self, id: DotId) -> Option<&BigRational> {
        self.dot_info[id.0 as usize].z.as_ref()
    }

    /// Normalizer of the defining product at a clause, where defined.
    pub fn hat_z(&self, id: HatId) -> Option<&BigRational> {
        self.hat_info[id.0 as usize].z.as_ref()
    }

    /// Global boundary flip of a variable-to-clause message.
    pub fn flip_dot(&self, id: DotId) -> DotId {
        self.dot_flip[id.0 as usize]
    }

    /// Global boundary flip of a clause-to-variable message.
    pub fn flip_hat(&self, id: HatId) -> HatId {
        self.hat_flip[id.0 as usize]
    }

    /// Applies a literal to a variable-to-clause message.
    pub fn adjust_dot(&self, id: DotId, literal: bool) -> DotId {
        if literal {
            self.flip_dot(id)
        } else {
            id
        }
    }

    /// Applies a literal to a clause-to-variable message.
    pub fn adjust_hat(&self, id: HatId, literal: bool) -> HatId {
        if literal {
            self.flip_hat(id)
        } else {
            id
        }
    }

    fn intern_dot(&mut self, node: DotNode) -> DotId {
        if let Some(&id) = self.dot_lookup.get(&node) {
            return id;
        }
        let id = DotId(u32::try_from(self.dot_nodes.len()).expect("message table overflow"));
        self.dot_lookup.insert(node.clone(), id);
        self.dot_info.push(self.dot_spin_info(&node));
        self.dot_nodes.push(node.clone());
        self.dot_flip.push(id);
        let flipped = self.flip_dot_node(&node);
        let fid = if flipped == node {
            id
        } else {
            self.intern_dot(flipped)
        };
        self.dot_flip[id.0 as usize] = fid;
        self.dot_flip[fid.0 as usize] = id;
        id
    }

    fn intern_hat(&mut self, node: HatNode) -> HatId {
        if let Some(&id) = self.hat_lookup.get(&node) {
            return id;
        }
        let id = HatId(u32::try_from(self.hat_nodes.len()).expect("message table overflow"));
        self.hat_lookup.insert(node.clone(), id);
        self.hat_info.push(self.hat_spin_info(&node));
        self.hat_nodes.push(node.clone());
        self.hat_flip.push(id);
        let flipped = self.flip_hat_node(&node);
        let fid = if flipped == node {
            id
        } else {
            self.intern_hat(flipped)
        };
        self.hat_flip[id.0 as usize] = fid;
        self.hat_flip[fid.0 as usize] = id;
        id
    }

    fn flip_dot_node(&self, node: &DotNode) -> DotNode {
        match node {
            DotNode::Zero => DotNode::One,
            DotNode::One => DotNode::Zero,
            DotNode::Star => DotNode::Star,
            DotNode::Join(children) => {
                let mut flipped: Vec<(HatId, u32)> = children
                    .iter()
                    .map(|&(child, mult)| (self.flip_hat(child), mult))
                    .collect();
                flipped.sort_unstable();
                DotNode::Join(flipped)
            }
        }
    }

    fn flip_hat_node(&self, node: &HatNode) -> HatNode {
        match node {
            HatNode::Zero => HatNode::One,
            HatNode::One => HatNode::Zero,
            HatNode::Star => HatNode::Star,
            HatNode::Sep => HatNode::Sep,
            HatNode::Join(children) => {
                let mut flipped: Vec<(DotId, u32)> = children
                    .iter()
                    .map(|&(child, mult)| (self.flip_dot(child), mult))
                    .collect();
                flipped.sort_unstable();
                HatNode::Join(flipped)
            }
        }
    }

    fn dot_spin_info(&self, node: &DotNode) -> SpinInfo {
        match node {
            DotNode::Zero => SpinInfo {
                vars: 0,
                m0: BigRational::one(),
                m1: BigRational::zero(),
                z: None,
            },
            DotNode::One => SpinInfo {
                vars: 0,
                m0: BigRational::zero(),
                m1: BigRational::one(),
                z: None,
            },
            DotNode::Star => SpinInfo {
                vars: 0,
                m0: half(),
                m1: half(),
                z: None,
            },
            DotNode::Join(children) => {
                // Joining at the shared root variable: children overlap in
                // exactly that variable, and the product of their marginals
                // renormalized is the marginal of the joined tree.
                let mut vars = 1u64;
                let mut p0 = BigRational::one();
                let mut p1 = BigRational::one();
                for &(child, mult) in children {
                    let info = &self.hat_info[child.0 as usize];
                    vars += u64::from(mult) * (info.vars - 1);
                    p0 *= pow_u(&info.m0, mult);
                    p1 *= pow_u(&info.m1, mult);
                }
                let z = &p0 + &p1;
                assert!(!z.is_zero(), "contradictory subtrees joined at a variable");
                SpinInfo {
                    vars,
                    m0: &p0 / &z,
                    m1: &p1 / &z,
                    z: Some(z),
                }
            }
        }
    }

    fn hat_spin_info(&self, node: &HatNode) -> SpinInfo {
        match node {
            HatNode::Zero => SpinInfo {
                vars: 1,
                m0: BigRational::one(),
                m1: BigRational::zero(),
                z: Some(BigRational::one()),
            },
            HatNode::One => SpinInfo {
                vars: 1,
                m0: BigRational::zero(),
                m1: BigRational::one(),
                z: Some(BigRational::one()),
            },
            HatNode::Star => SpinInfo {
                vars: 1,
                m0: half(),
                m1: half(),
                z: None,
            },
            HatNode::Sep => SpinInfo {
                vars: 1,
                m0: half(),
                m1: half(),
                z: Some(BigRational::from_integer(BigInt::from(2))),
            },
            HatNode::Join(children) => {
                // Joining at the clause: the not-all-equal constraint forbids
                // the value taken by every child simultaneously.
                let mut vars = 1u64;
                let mut p0 = BigRational::one();
                let mut p1 = BigRational::one();
                for &(child, mult) in children {
                    let info = &self.dot_info[child.0 as usize];
                    vars += u64::from(mult) * info.vars;
                    p0 *= pow_u(&info.m0, mult);
                    p1 *= pow_u(&info.m1, mult);
                }
                let z = BigRational::from_integer(BigInt::from(2)) - &p0 - &p1;
                assert!(!z.is_zero(), "degenerate clause join");
                SpinInfo {
                    vars,
                    m0: (BigRational::one() - p0) / &z,
                    m1: (BigRational::one() - p1) / &z,
                    z: Some(z),
                }
            }
        }
    }

    /// Combines the variable-to-clause messages on all but one slot of a
    /// clause (already literal-adjusted) into the outgoing message before the
    /// outgoing literal is applied.
    pub fn hat_t(&mut self, inputs: &[DotId]) -> HatId {
        let mut has0 = false;
        let mut has1 = false;
        let mut has_star = false;
        let mut all0 = true;
        let mut all1 = true;
        for &d in inputs {
            match d {
                DOT_ZERO => {
                    has0 = true;
                    all1 = false;
                }
                DOT_ONE => {
                    has1 = true;
                    all0 = false;
                }
                DOT_STAR => {
                    has_star = true;
                    all0 = false;
                    all1 = false;
                }
                _ => {
                    all0 = false;
                    all1 = false;
                }
            }
        }
        if all1 {
            return HAT_ZERO;
        }
        if all0 {
            return HAT_ONE;
        }
        if has0 && has1 {
            return HAT_SEP;
        }
        if has_star {
            return HAT_STAR;
        }
        self.intern_hat(HatNode::Join(multiset(inputs)))
    }

    /// Combines the clause-to-variable messages on all but one edge of a
    /// variable into the outgoing message.  Fails when two forcing messages
    /// disagree.
    pub fn dot_t(&mut self, inputs: &[HatId]) -> Result<DotId, ColoringError> {
        let mut has0 = false;
        let mut has1 = false;
        let mut has_star = false;
        for &h in inputs {
            match h {
                HAT_ZERO => has0 = true,
                HAT_ONE => has1 = true,
                HAT_STAR => has_star = true,
                _ => {}
            }
        }
        if has0 && has1 {
            return Err(ColoringError::ContradictoryMessages);
        }
        if has0 {
            return Ok(DOT_ZERO);
        }
        if has1 {
            return Ok(DOT_ONE);
        }
        if has_star {
            return Ok(DOT_STAR);
        }
        Ok(self.intern_dot(DotNode::Join(multiset(inputs))))
    }
}

fn pow_u(base: &BigRational, exp: u32) -> BigRational {
    let mut acc = BigRational::one();
    let mut sq = base.clone();
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            acc *= &sq;
        }
        e >>= 1;
        if e > 0 {
            sq = &sq * &sq;
        }
    }
    acc
}

fn multiset<T: Copy + Ord>(items: &[T]) -> Vec<(T, u32)> {
    let mut counts: BTreeMap<T, u32> = BTreeMap::new();
    for &item in items {
        *counts.entry(item).or_insert(0) += 1;
    }
    counts.into_iter().collect()
}

/// A full assignment of message pairs, indexed by variable-side half-edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageConfig {
    pub dots: Vec<DotId>,
    pub hats: Vec<HatId>,
    /// Half-edges where at least one side had to be filled with the cycle
    /// marker (sorted). Free cycles are refused outright, so markers appear
    /// only on frozen edges, when a ring of mutually forcing clauses leaves
    /// the recursion nowhere to start.
    pub star_edges: Vec<usize>,
}

impl MessageConfig {
    pub fn has_stars(&self) -> bool {
        !self.star_edges.is_empty()
    }
}

/// Builds the message configuration of a valid frozen configuration whose
/// free subgraph is acyclic.
///
/// Seeds forcing edges with their forced atoms, marks clause-to-variable
/// messages as separating wherever two other slots already exhibit both
/// values, then closes under the local propagation equations. Frozen edges
/// caught in a ring of mutually forcing clauses stay unresolved and become
/// cycle markers; a cycle through the free subgraph would leave weights
/// undefined, so those configurations are refused instead.
pub fn build_messages(
    inst: &Instance,
    fc: &FrozenConfig,
    table: &mut SpinTable,
) -> Result<MessageConfig, ColoringError> {
    if fc.n() != inst.n() || !frozen::validate(inst, fc) {
        return Err(ColoringError::InvalidFrozenConfig);
    }
    if frozen::free_structure(inst, fc).has_free_cycle() {
        return Err(ColoringError::FreeCycle);
    }
    let nd = inst.edges();
    let mut dots: Vec<Option<DotId>> = vec![None; nd];
    let mut hats: Vec<Option<HatId>> = vec![None; nd];

    // Forcing edges carry the frozen value toward the variable, and a frozen
    // variable answers with its value on every edge witnessed by another
    // forced message.
    let forcing = frozen::forcing_edges(inst, fc);
    for (i, &is_forcing) in forcing.iter().enumerate() {
        if is_forcing {
            let bit = fc
                .label(inst.var_of(i))
                .bit()
                .expect("forcing edge at a free variable");
            hats[i] = Some(table.hat_atom(bit));
        }
    }
    for v in 0..inst.n() {
        if let Some(bit) = fc.label(v).bit() {
            for i in inst.var_half_edges(v) {
                let witnessed = inst
                    .var_half_edges(v)
                    .any(|e| e != i && hats[e].map_or(false, |h| table.is_hat_atom(h)));
                if witnessed {
                    dots[i] = Some(table.dot_atom(bit));
                }
            }
        }
    }

    // Two other slots showing both values make the outgoing message
    // separating.
    for a in 0..inst.m() {
        let slots: Vec<usize> = inst.clause_half_edges(a).map(|j| inst.var_side(j)).collect();
        let values: Vec<Option<bool>> = slots
            .iter()
            .map(|&i| {
                dots[i]
                    .and_then(|d| table.dot_bit(d))
                    .map(|b| b ^ inst.literal(i))
            })
            .collect();
        for (pos, &i) in slots.iter().enumerate() {
            if hats[i].is_some() {
                continue;
            }
            let mut seen0 = false;
            let mut seen1 = false;
            for (other, value) in values.iter().enumerate() {
                if other != pos {
                    match value {
                        Some(false) => seen0 = true,
                        Some(true) => seen1 = true,
                        None => {}
                    }
                }
            }
            if seen0 && seen1 {
                hats[i] = Some(HAT_SEP);
            }
        }
    }

    // Close under the local equations.
    loop {
        let mut changed = false;
        for i in 0..nd {
            if dots[i].is_none() {
                let v = inst.var_of(i);
                let others: Option<Vec<HatId>> = inst
                    .var_half_edges(v)
                    .filter(|&e| e != i)
                    .map(|e| hats[e])
                    .collect();
                if let Some(inputs) = others {
                    dots[i] = Some(table.dot_t(&inputs)?);
                    changed = true;
                }
            }
            if hats[i].is_none() {
                let a = inst.clause_of(inst.clause_side(i));
                let others: Option<Vec<DotId>> = inst
                    .clause_half_edges(a)
                    .map(|j| inst.var_side(j))
                    .filter(|&e| e != i)
                    .map(|e| dots[e].map(|d| table.adjust_dot(d, inst.literal(e))))
                    .collect();
                if let Some(inputs) = others {
                    let h = table.hat_t(&inputs);
                    hats[i] = Some(table.adjust_hat(h, inst.literal(i)));
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    // A ring of mutually forcing clauses deadlocks the recursion on its
    // frozen edges; whatever stays undetermined takes the cycle marker.
    let mut star_edges = Vec::new();
    for i in 0..nd {
        if dots[i].is_none() || hats[i].is_none() {
            star_edges.push(i);
        }
        dots[i].get_or_insert(DOT_STAR);
        hats[i].get_or_insert(HAT_STAR);
    }
    Ok(MessageConfig {
        dots: dots.into_iter().map(Option::unwrap).collect(),
        hats: hats.into_iter().map(Option::unwrap).collect(),
        star_edges,
    })
}

/// Checks that every edge reproduces its own messages from its neighbours'.
pub fn satisfies_local_equations(
    inst: &Instance,
    mc: &MessageConfig,
    table: &mut SpinTable,
) -> Result<bool, ColoringError> {
    for i in 0..inst.edges() {
        let v = inst.var_of(i);
        let inputs: Vec<HatId> = inst
            .var_half_edges(v)
            .filter(|&e| e != i)
            .map(|e| mc.hats[e])
            .collect();
        match table.dot_t(&inputs) {
            Ok(expected) if expected == mc.dots[i] => {}
            _ => return Ok(false),
        }
        let a = inst.clause_of(inst.clause_side(i));
        let inputs: Vec<DotId> = inst
            .clause_half_edges(a)
            .map(|j| inst.var_side(j))
            .filter(|&e| e != i)
            .map(|e| table.adjust_dot(mc.dots[e], inst.literal(e)))
            .collect();
        let combined = table.hat_t(&inputs);
        let expected = table.adjust_hat(combined, inst.literal(i));
        if expected != mc.hats[i] {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Recovers the frozen configuration from its messages: a variable is frozen
/// to the unique atom value visible on its incident messages, free when none
/// is visible.
pub fn messages_to_frozen(
    inst: &Instance,
    mc: &MessageConfig,
    table: &SpinTable,
) -> Result<FrozenConfig, ColoringError> {
    let mut labels = Vec::with_capacity(inst.n());
    for v in 0..inst.n() {
        let mut seen: Option<bool> = None;
        for i in inst.var_half_edges(v) {
            for bit in [table.dot_bit(mc.dots[i]), table.hat_bit(mc.hats[i])]
                .into_iter()
                .flatten()
            {
                match seen {
                    None => seen = Some(bit),
                    Some(prev) if prev == bit => {}
                    Some(_) => return Err(ColoringError::ContradictoryMessages),
                }
            }
        }
        labels.push(match seen {
            Some(bit) => frozen::VarLabel::from_bit(bit),
            None => frozen::VarLabel::Free,
        });
    }
    Ok(FrozenConfig::from_labels(labels))
}

/// One edge of a coloring configuration: red edges are forced, blue edges are
/// frozen but unforced, and free edges keep their message pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ColorSpin {
    R0,
    R1,
    B0,
    B1,
    Free { dot: DotId, hat: HatId },
}

impl ColorSpin {
    pub fn is_red(self) -> bool {
        matches!(self, ColorSpin::R0 | ColorSpin::R1)
    }

    pub fn is_blue(self) -> bool {
        matches!(self, ColorSpin::B0 | ColorSpin::B1)
    }

    pub fn is_frozen(self) -> bool {
        self.is_red() || self.is_blue()
    }

    pub fn is_free(self) -> bool {
        matches!(self, ColorSpin::Free { .. })
    }

    /// Frozen value carried by a red or blue edge.
    pub fn frozen_bit(self) -> Option<bool> {
        match self {
            ColorSpin::R0 | ColorSpin::B0 => Some(false),
            ColorSpin::R1 | ColorSpin::B1 => Some(true),
            ColorSpin::Free { .. } => None,
        }
    }
}

/// Projects one message pair to its color.  The forced cases win over the
/// frozen ones, and any remaining pair must be fully resolved.
pub fn project_spin(table: &SpinTable, dot: DotId, hat: HatId) -> Result<ColorSpin, ColoringError> {
    if hat == HAT_ZERO {
        return Ok(ColorSpin::R0);
    }
    if hat == HAT_ONE {
        return Ok(ColorSpin::R1);
    }
    if dot == DOT_ZERO {
        return Ok(ColorSpin::B0);
    }
    if dot == DOT_ONE {
        return Ok(ColorSpin::B1);
    }
    if dot == DOT_STAR || hat == HAT_STAR {
        return Err(ColoringError::UnresolvedCycle);
    }
    let _ = table;
    Ok(ColorSpin::Free { dot, hat })
}

/// Applies a literal to a color.
pub fn flip_spin(table: &SpinTable, spin: ColorSpin, literal: bool) -> ColorSpin {
    if !literal {
        return spin;
    }
    match spin {
        ColorSpin::R0 => ColorSpin::R1,
        ColorSpin::R1 => ColorSpin::R0,
        ColorSpin::B0 => ColorSpin::B1,
        ColorSpin::B1 => ColorSpin::B0,
        ColorSpin::Free { dot, hat } => ColorSpin::Free {
            dot: table.flip_dot(dot),
            hat: table.flip_hat(hat),
        },
    }
}

/// A coloring configuration, indexed by variable-side half-edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coloring {
    pub spins: Vec<ColorSpin>,
}

/// Projects a message configuration edge by edge. Cycle markers may sit
/// inside forced or frozen edges, whose colors do not depend on them; a
/// marker on any other edge is refused.
pub fn project_coloring(
    inst: &Instance,
    mc: &MessageConfig,
    table: &SpinTable,
) -> Result<Coloring, ColoringError> {
    let spins = (0..inst.edges())
        .map(|i| project_spin(table, mc.dots[i], mc.hats[i]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Coloring { spins })
}

/// Builds the coloring of a valid frozen configuration without free cycles.
pub fn coloring_of_frozen(
    inst: &Instance,
    fc: &FrozenConfig,
    table: &mut SpinTable,
) -> Result<Coloring, ColoringError> {
    let mc = build_messages(inst, fc, table)?;
    project_coloring(inst, &mc, table)
}

/// Colors on the edges around one variable, in half-edge order.
pub fn var_spins(inst: &Instance, col: &Coloring, v: usize) -> Vec<ColorSpin> {
    inst.var_half_edges(v).map(|i| col.spins[i]).collect()
}

/// Literal-adjusted colors on the edges around one clause, in slot order.
pub fn adjusted_clause_spins(
    inst: &Instance,
    col: &Coloring,
    table: &SpinTable,
    a: usize,
) -> Vec<ColorSpin> {
    inst.clause_half_edges(a)
        .map(|j| {
            let i = inst.var_side(j);
            flip_spin(table, col.spins[i], inst.literal(i))
        })
        .collect()
}

/// Local validity at a variable: a forced value with blue companions of the
/// same value, or an all-free neighbourhood reproducing its own messages.
pub fn var_colors_valid(table: &mut SpinTable, spins: &[ColorSpin]) -> bool {
    let all_zero = spins
        .iter()
        .all(|s| matches!(s, ColorSpin::R0 | ColorSpin::B0));
    if all_zero && spins.iter().any(|&s| s == ColorSpin::R0) {
        return true;
    }
    let all_one = spins
        .iter()
        .all(|s| matches!(s, ColorSpin::R1 | ColorSpin::B1));
    if all_one && spins.iter().any(|&s| s == ColorSpin::R1) {
        return true;
    }
    if !spins.iter().all(|s| s.is_free()) {
        return false;
    }
    for (pos, &spin) in spins.iter().enumerate() {
        let ColorSpin::Free { dot, .. } = spin else {
            unreachable!()
        };
        let inputs: Vec<HatId> = spins
            .iter()
            .enumerate()
            .filter(|&(other, _)| other != pos)
            .map(|(_, s)| {
                let ColorSpin::Free { hat, .. } = s else {
                    unreachable!()
                };
                *hat
            })
            .collect();
        match table.dot_t(&inputs) {
            Ok(expected) if expected == dot => {}
            _ => return false,
        }
    }
    true
}

/// Local validity at a clause, on literal-adjusted colors: a forcing pattern,
/// a separating pattern, or a one-sided frozen neighbourhood whose free edges
/// reproduce their own messages.
pub fn clause_colors_valid_adjusted(table: &mut SpinTable, spins: &[ColorSpin]) -> bool {
    let k = spins.len();
    let n_r0 = spins.iter().filter(|&&s| s == ColorSpin::R0).count();
    let n_r1 = spins.iter().filter(|&&s| s == ColorSpin::R1).count();
    let n_b0 = spins.iter().filter(|&&s| s == ColorSpin::B0).count();
    let n_b1 = spins.iter().filter(|&&s| s == ColorSpin::B1).count();
    let frees: Vec<usize> = spins
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_free())
        .map(|(pos, _)| pos)
        .collect();

    // One forced edge, all others frozen to the opposite value.
    if n_r0 == 1 && n_b1 == k - 1 {
        return true;
    }
    if n_r1 == 1 && n_b0 == k - 1 {
        return true;
    }
    // Both values present among frozen edges; free edges must see this clause
    // as separating.
    if n_r0 + n_r1 == 0
        && n_b0 >= 1
        && n_b1 >= 1
        && frees
            .iter()
            .all(|&pos| matches!(spins[pos], ColorSpin::Free { hat, .. } if hat == HAT_SEP))
    {
        return true;
    }
    // All frozen edges share one value; at least two free edges carry the
    // constraint, and each reproduces its own message with the frozen edges
    // entering as atoms of that value.
    for (atom, blues) in [(DOT_ZERO, n_b1), (DOT_ONE, n_b0)] {
        if n_r0 + n_r1 > 0 || blues > 0 || frees.len() < 2 {
            continue;
        }
        let consistent = frees.iter().all(|&pos| {
            let ColorSpin::Free { hat, .. } = spins[pos] else {
                unreachable!()
            };
            let inputs: Vec<DotId> = spins
                .iter()
                .enumerate()
                .filter(|&(other, _)| other != pos)
                .map(|(_, s)| match s {
                    ColorSpin::Free { dot, .. } => *dot,
                    _ => atom,
                })
                .collect();
            table.hat_t(&inputs) == hat
        });
        if consistent {
            return true;
        }
    }
    false
}

/// Checks every local validity indicator of a coloring.
pub fn is_valid_coloring(inst: &Instance, col: &Coloring, table: &mut SpinTable) -> bool {
    (0..inst.n()).all(|v| var_colors_valid(table, &var_spins(inst, col, v)))
        && (0..inst.m()).all(|a| {
            let spins = adjusted_clause_spins(inst, col, table, a);
            clause_colors_valid_adjusted(table, &spins)
        })
}

/// Local partition mass at a variable: total marginal weight its incoming
/// messages put on a common value.
pub fn bethe_var_factor(table: &SpinTable, hats: &[HatId]) -> BigRational {
    let mut p0 = BigRational::one();
    let mut p1 = BigRational::one();
    for &h in hats {
        let (m0, m1) = table.hat_measure(h);
        p0 *= m0;
        p1 *= m1;
    }
    p0 + p1
}

/// Local partition mass at a clause on literal-adjusted incoming messages:
/// everything except the two all-equal patterns the constraint forbids.
pub fn bethe_clause_factor(table: &SpinTable, dots: &[DotId]) -> BigRational {
    let mut p0 = BigRational::one();
    let mut p1 = BigRational::one();
    for &d in dots {
        let (m0, m1) = table.dot_measure(d);
        p0 *= m0;
        p1 *= m1;
    }
    BigRational::one() - p0 - p1
}

/// Edge correction factor: reciprocal overlap of the two directed marginals.
pub fn bethe_edge_factor(
    table: &SpinTable,
    dot: DotId,
    hat: HatId,
) -> Result<BigRational, ColoringError> {
    let (d0, d1) = table.dot_measure(dot);
    let (h0, h1) = table.hat_measure(hat);
    let overlap = d0 * h0 + d1 * h1;
    if overlap.is_zero() {
        return Err(ColoringError::DegenerateWeight);
    }
    Ok(overlap.recip())
}

/// Variable weight of a coloring neighbourhood: the local partition mass for
/// an all-free neighbourhood, one for a valid frozen one, zero when invalid.
pub fn color_var_weight(table: &mut SpinTable, spins: &[ColorSpin]) -> BigRational {
    if !var_colors_valid(table, spins) {
        return BigRational::zero();
    }
    if spins.iter().all(|s| s.is_free()) {
        let hats: Vec<HatId> = spins
            .iter()
            .map(|s| match s {
                ColorSpin::Free { hat, .. } => *hat,
                _ => unreachable!(),
            })
            .collect();
        bethe_var_factor(table, &hats)
    } else {
        BigRational::one()
    }
}

/// Message entering a clause from one literal-adjusted color.
fn clause_input(spin: ColorSpin) -> Option<DotId> {
    match spin {
        ColorSpin::B0 => Some(DOT_ZERO),
        ColorSpin::B1 => Some(DOT_ONE),
        ColorSpin::Free { dot, .. } => Some(dot),
        ColorSpin::R0 | ColorSpin::R1 => None,
    }
}

/// Clause weight on literal-adjusted colors: the local partition mass when no
/// edge is forced, one for a valid forcing pattern, zero when invalid.
pub fn color_clause_weight_adjusted(table: &mut SpinTable, spins: &[ColorSpin]) -> BigRational {
    if !clause_colors_valid_adjusted(table, spins) {
        return BigRational::zero();
    }
    if spins.iter().any(|s| s.is_red()) {
        return BigRational::one();
    }
    let dots: Vec<DotId> = spins
        .iter()
        .map(|&s| clause_input(s).expect("no forced edge present"))
        .collect();
    bethe_clause_factor(table, &dots)
}

/// Edge weight of a coloring: the edge correction on free edges, one on
/// frozen edges.
pub fn color_edge_weight(table: &SpinTable, spin: ColorSpin) -> Result<BigRational, ColoringError> {
    match spin {
        ColorSpin::Free { dot, hat } => bethe_edge_factor(table, dot, hat),
        _ => Ok(BigRational::one()),
    }
}

/// Largest clause weight over all literal assignments, computed locally: one
/// for an all-frozen neighbourhood, otherwise the clause normalizer divided
/// by the edge correction of any free slot.
pub fn color_clause_weight_max(
    table: &SpinTable,
    spins: &[ColorSpin],
) -> Result<BigRational, ColoringError> {
    let Some(spin) = spins.iter().copied().find(|s| s.is_free()) else {
        return Ok(BigRational::one());
    };
    let ColorSpin::Free { dot, hat } = spin else {
        unreachable!()
    };
    let z = table
        .hat_z(hat)
        .ok_or(ColoringError::UnresolvedCycle)?
        .clone();
    let (d0, d1) = table.dot_measure(dot);
    let (h0, h1) = table.hat_measure(hat);
    Ok(z * (d0 * h0 + d1 * h1))
}

/// Fraction of literal assignments on one clause keeping its colors valid.
pub fn literal_validity_fraction(table: &mut SpinTable, spins: &[ColorSpin]) -> BigRational {
    let k = spins.len();
    assert!(k < usize::BITS as usize, "clause too wide");
    let mut valid = 0u64;
    for mask in 0u64..(1u64 << k) {
        let adjusted: Vec<ColorSpin> = spins
            .iter()
            .enumerate()
            .map(|(pos, &s)| flip_spin(table, s, mask >> pos & 1 == 1))
            .collect();
        if clause_colors_valid_adjusted(table, &adjusted) {
            valid += 1;
        }
    }
    BigRational::new(BigInt::from(valid), BigInt::from(1u64) << k)
}

/// Closed form of [`literal_validity_fraction`] for neighbourhoods without
/// free edges entering non-separating clauses.
pub fn literal_validity_closed_form(spins: &[ColorSpin]) -> Option<BigRational> {
    let k = spins.len();
    let reds = spins.iter().filter(|s| s.is_red()).count();
    let blues = spins.iter().filter(|s| s.is_blue()).count();
    let frees_sep = spins
        .iter()
        .filter(|s| matches!(s, ColorSpin::Free { hat, .. } if *hat == HAT_SEP))
        .count();
    if reds >= 2 {
        return Some(BigRational::zero());
    }
    if reds == 1 {
        // Only the forcing pattern can occur, in two polarities.
        return Some(if blues == k - 1 {
            BigRational::new(BigInt::from(2), BigInt::from(1u64) << k)
        } else {
            BigRational::zero()
        });
    }
    if blues + frees_sep == k {
        // Only the separating pattern can occur: the frozen edges must show
        // both values.
        return Some(if blues >= 2 {
            BigRational::new(
                BigInt::from((1u64 << blues) - 2),
                BigInt::from(1u64 << blues),
            )
        } else {
            BigRational::zero()
        });
    }
    None
}

/// Number of solutions extending a frozen configuration, as the product of
/// local message factors.
pub fn bethe_cluster_size(
    inst: &Instance,
    mc: &MessageConfig,
    table: &SpinTable,
) -> Result<BigRational, ColoringError> {
    if mc.has_stars() {
        return Err(ColoringError::UnresolvedCycle);
    }
    let mut total = BigRational::one();
    for v in 0..inst.n() {
        let hats: Vec<HatId> = inst.var_half_edges(v).map(|i| mc.hats[i]).collect();
        total *= bethe_var_factor(table, &hats);
    }
    for a in 0..inst.m() {
        let dots: Vec<DotId> = inst
            .clause_half_edges(a)
            .map(|j| inst.var_side(j))
            .map(|i| table.adjust_dot(mc.dots[i], inst.literal(i)))
            .collect();
        total *= bethe_clause_factor(table, &dots);
    }
    for i in 0..inst.edges() {
        total *= bethe_edge_factor(table, mc.dots[i], mc.hats[i])?;
    }
    Ok(total)
}

/// Number of solutions extending a frozen configuration, as the product of
/// local coloring weights.
pub fn coloring_cluster_size(
    inst: &Instance,
    col: &Coloring,
    table: &mut SpinTable,
) -> Result<BigRational, ColoringError> {
    let mut total = BigRational::one();
    for v in 0..inst.n() {
        total *= color_var_weight(table, &var_spins(inst, col, v));
    }
    for a in 0..inst.m() {
        let spins = adjusted_clause_spins(inst, col, table, a);
        total *= color_clause_weight_adjusted(table, &spins);
    }
    for &spin in &col.spins {
        total *= color_edge_weight(table, spin)?;
    }
    Ok(total)
}

/// Number of variables of the free tree seen by a free edge; frozen edges see
/// none.
pub fn spin_size(table: &SpinTable, spin: ColorSpin) -> Option<u64> {
    match spin {
        ColorSpin::Free { dot, hat } => Some(table.dot_vars(dot) + table.hat_vars(hat) - 1),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Component model: per-edge classification and empirical profiles.
// ---------------------------------------------------------------------------

/// Single-edge labels of the component model's boundary alphabet: forced and
/// unforced frozen edges carrying their variable's value, plus the mark for
/// free edges entering separating clauses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BoundarySpin {
    R0,
    R1,
    B0,
    B1,
    S,
}

/// The five boundary labels, in their canonical order.
pub const BOUNDARY_SPINS: [BoundarySpin; 5] = [
    BoundarySpin::R0,
    BoundarySpin::R1,
    BoundarySpin::B0,
    BoundarySpin::B1,
    BoundarySpin::S,
];

impl BoundarySpin {
    pub fn forced(bit: bool) -> BoundarySpin {
        if bit {
            BoundarySpin::R1
        } else {
            BoundarySpin::R0
        }
    }

    pub fn unforced(bit: bool) -> BoundarySpin {
        if bit {
            BoundarySpin::B1
        } else {
            BoundarySpin::B0
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BoundarySpin::R0 => "R0",
            BoundarySpin::R1 => "R1",
            BoundarySpin::B0 => "B0",
            BoundarySpin::B1 => "B1",
            BoundarySpin::S => "S",
        }
    }
}

/// Per-edge value of the component model: a boundary label, or membership of
/// a free piece (an index into the accompanying [`frozen::FreeStructure`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentSpin {
    Boundary(BoundarySpin),
    Piece(usize),
}

/// The component re-encoding of a frozen configuration: every edge carries
/// either a boundary label or a reference to the free piece it lies in.
/// Unlike the per-edge message model, this encoding stays defined when the
/// free subgraph has cycles.
#[derive(Debug, Clone)]
pub struct ComponentColoring {
    /// Per var-side half-edge.
    pub spins: Vec<ComponentSpin>,
    /// The free pieces referenced by `spins`.
    pub structure: frozen::FreeStructure,
}

/// Re-encodes a valid frozen configuration edge by edge.
pub fn component_coloring(
    inst: &Instance,
    fc: &FrozenConfig,
) -> Result<ComponentColoring, ColoringError> {
    if !frozen::validate(inst, fc) {
        return Err(ColoringError::InvalidFrozenConfig);
    }
    let kinds = frozen::classify_clauses(inst, fc);
    let structure = frozen::free_structure(inst, fc);
    let spins = (0..inst.edges())
        .map(|i| match fc.label(inst.var_of(i)).bit() {
            Some(b) => {
                if frozen::is_forcing_edge(inst, fc, i) {
                    ComponentSpin::Boundary(BoundarySpin::forced(b))
                } else {
                    ComponentSpin::Boundary(BoundarySpin::unforced(b))
                }
            }
            None => {
                let a = inst.clause_of(inst.clause_side(i));
                if kinds[a] == frozen::ClauseKind::Separating {
                    ComponentSpin::Boundary(BoundarySpin::S)
                } else {
                    ComponentSpin::Piece(
                        structure.piece_of_clause[a].expect("non-separating clause joins a piece"),
                    )
                }
            }
        })
        .collect();
    Ok(ComponentColoring { spins, structure })
}

/// Inverse of [`component_coloring`]: the labels pin the frozen configuration
/// down exactly (frozen values from the label subscripts, free variables from
/// piece membership and separating marks), so the re-encoding is one-to-one.
pub fn component_to_frozen(inst: &Instance, cc: &ComponentColoring) -> FrozenConfig {
    let mut labels = vec![frozen::VarLabel::Free; inst.n()];
    for (i, spin) in cc.spins.iter().enumerate() {
        let v = inst.var_of(i);
        labels[v] = match spin {
            ComponentSpin::Boundary(BoundarySpin::R0) | ComponentSpin::Boundary(BoundarySpin::B0) => {
                frozen::VarLabel::Zero
            }
            ComponentSpin::Boundary(BoundarySpin::R1) | ComponentSpin::Boundary(BoundarySpin::B1) => {
                frozen::VarLabel::One
            }
            ComponentSpin::Boundary(BoundarySpin::S) | ComponentSpin::Piece(_) => {
                frozen::VarLabel::Free
            }
        };
    }
    FrozenConfig::from_labels(labels)
}

/// Guard for the brute-force canonical form of decorated pieces.
pub const MAX_DIGEST_VARS: usize = 9;

/// Canonical digest of a literal-decorated free piece: the minimum, over all
/// orderings of the piece's variables, of a structural encoding listing each
/// clause's slots (internal edges by variable index and literal, frozen
/// boundary slots by value and literal) together with each variable's count
/// of edges into separating clauses.  Isomorphic decorated pieces — equal
/// shapes, literals, and boundary labels — get equal digests, on any host
/// instance.
pub fn piece_digest(inst: &Instance, fc: &FrozenConfig, piece: &frozen::FreePiece) -> String {
    assert!(
        piece.v() <= MAX_DIGEST_VARS,
        "free piece too large for brute-force canonicalization"
    );
    // Slot data in piece-local variable positions, computed once.
    let position: HashMap<usize, usize> = piece
        .vars
        .iter()
        .enumerate()
        .map(|(idx, &v)| (v, idx))
        .collect();
    let clause_slots: Vec<Vec<(Option<usize>, bool, Option<bool>)>> = piece
        .clauses
        .iter()
        .map(|&a| {
            inst.clause_half_edges(a)
                .map(|j| {
                    let i = inst.var_side(j);
                    let v = inst.var_of(i);
                    match fc.label(v).bit() {
                        Some(b) => (None, inst.literal(i), Some(b)),
                        None => (Some(position[&v]), inst.literal(i), None),
                    }
                })
                .collect()
        })
        .collect();
    let sep_counts: Vec<usize> = piece
        .vars
        .iter()
        .map(|&v| {
            piece
                .boundary_separating
                .iter()
                .filter(|&&i| inst.var_of(i) == v)
                .count()
        })
        .collect();

    let mut best: Option<String> = None;
    for perm in (0..piece.v()).permutations(piece.v()) {
        // `perm[pos]` is the local index assigned to the variable at `pos`.
        let mut clauses: Vec<String> = clause_slots
            .iter()
            .map(|slots| {
                let mut rendered: Vec<String> = slots
                    .iter()
                    .map(|&(var, lit, frozen_bit)| match (var, frozen_bit) {
                        (Some(pos), None) => format!("I{}:{}", perm[pos], u8::from(lit)),
                        (None, Some(b)) => format!("B{}:{}", u8::from(b), u8::from(lit)),
                        _ => unreachable!("slot is either internal or frozen"),
                    })
                    .collect();
                rendered.sort_unstable();
                rendered.join(",")
            })
            .collect();
        clauses.sort_unstable();
        let mut seps = vec![0usize; piece.v()];
        for (pos, &count) in sep_counts.iter().enumerate() {
            seps[perm[pos]] = count;
        }
        let encoding = format!(
            "v{};f{};d{};k{};s{:?};{}",
            piece.v(),
            piece.f(),
            inst.d(),
            inst.k(),
            seps,
            clauses.join("|")
        );
        if best.as_ref().map_or(true, |b| encoding < *b) {
            best = Some(encoding);
        }
    }
    best.expect("a piece has at least one variable")
}

/// Empirical profile of a component coloring: frozen variables keyed by the
/// ordered label tuple of their edges, separating clauses likewise, every
/// non-piece edge by its label, piece boundary half-edges by label, and the
/// pieces themselves as a multiset of canonical digests.  All entries are raw
/// counts; the normalized measures divide by `n`, `m`, and `nd`.
#[derive(Debug, Clone)]
pub struct ComponentProfile {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub k: usize,
    /// Frozen variables by the labels of their `d` edges, in half-edge order.
    pub var_tuples: BTreeMap<Vec<BoundarySpin>, usize>,
    /// Separating clauses by the labels of their `k` edges, in half-edge
    /// order.
    pub clause_tuples: BTreeMap<Vec<BoundarySpin>, usize>,
    /// Non-piece edges by label.
    pub edge_marks: BTreeMap<BoundarySpin, usize>,
    /// Piece boundary half-edges: frozen slots of piece clauses by value.
    pub boundary_b0: usize,
    pub boundary_b1: usize,
    /// Piece boundary half-edges: free edges into separating clauses.
    pub boundary_s: usize,
    /// Pieces by canonical digest, with the count and a cycle flag.
    pub piece_multiset: BTreeMap<String, (usize, bool)>,
    pub piece_count: usize,
}

/// Collects the empirical profile of a component coloring.
pub fn component_profile(inst: &Instance, cc: &ComponentColoring) -> ComponentProfile {
    let fc = component_to_frozen(inst, cc);
    let mut var_tuples: BTreeMap<Vec<BoundarySpin>, usize> = BTreeMap::new();
    for v in 0..inst.n() {
        if fc.label(v).is_free() {
            continue;
        }
        let tuple: Vec<BoundarySpin> = inst
            .var_half_edges(v)
            .map(|i| match cc.spins[i] {
                ComponentSpin::Boundary(b) => b,
                ComponentSpin::Piece(_) => unreachable!("frozen edges carry boundary labels"),
            })
            .collect();
        *var_tuples.entry(tuple).or_insert(0) += 1;
    }

    let kinds = frozen::classify_clauses(inst, &fc);
    let mut clause_tuples: BTreeMap<Vec<BoundarySpin>, usize> = BTreeMap::new();
    for a in 0..inst.m() {
        if kinds[a] != frozen::ClauseKind::Separating {
            continue;
        }
        let tuple: Vec<BoundarySpin> = inst
            .clause_half_edges(a)
            .map(|j| match cc.spins[inst.var_side(j)] {
                ComponentSpin::Boundary(b) => b,
                ComponentSpin::Piece(_) => unreachable!("separating edges carry boundary labels"),
            })
            .collect();
        *clause_tuples.entry(tuple).or_insert(0) += 1;
    }

    let mut edge_marks: BTreeMap<BoundarySpin, usize> = BTreeMap::new();
    for spin in &cc.spins {
        if let ComponentSpin::Boundary(b) = spin {
            *edge_marks.entry(*b).or_insert(0) += 1;
        }
    }

    let mut boundary_b0 = 0;
    let mut boundary_b1 = 0;
    let mut boundary_s = 0;
    let mut piece_multiset: BTreeMap<String, (usize, bool)> = BTreeMap::new();
    for piece in &cc.structure.pieces {
        boundary_b0 += piece.eta_b0;
        boundary_b1 += piece.eta_b1;
        boundary_s += piece.eta_s();
        let entry = piece_multiset
            .entry(piece_digest(inst, &fc, piece))
            .or_insert((0, !piece.is_tree()));
        entry.0 += 1;
        debug_assert_eq!(entry.1, !piece.is_tree(), "digest determines the cycle flag");
    }

    ComponentProfile {
        n: inst.n(),
        m: inst.m(),
        d: inst.d(),
        k: inst.k(),
        var_tuples,
        clause_tuples,
        edge_marks,
        boundary_b0,
        boundary_b1,
        boundary_s,
        piece_multiset,
        piece_count: cc.structure.pieces.len(),
    }
}

impl ComponentProfile {
    fn edge_count(&self, x: BoundarySpin) -> usize {
        self.edge_marks.get(&x).copied().unwrap_or(0)
    }

    fn boundary_count(&self, x: BoundarySpin) -> usize {
        match x {
            BoundarySpin::B0 => self.boundary_b0,
            BoundarySpin::B1 => self.boundary_b1,
            BoundarySpin::S => self.boundary_s,
            _ => 0,
        }
    }

    /// Density of pieces per variable.
    pub fn h_circ(&self) -> BigRational {
        BigRational::new(BigInt::from(self.piece_count), BigInt::from(self.n))
    }

    /// Density of piece boundary half-edges carrying label `x`, per variable.
    pub fn h(&self, x: BoundarySpin) -> BigRational {
        BigRational::new(BigInt::from(self.boundary_count(x)), BigInt::from(self.n))
    }

    /// Both double counts of non-piece edges: through the frozen variables'
    /// tuples plus the pieces' separating boundary, and through the
    /// separating clauses' tuples plus the pieces' frozen boundary.
    pub fn compatibility_holds(&self) -> bool {
        BOUNDARY_SPINS.iter().all(|&x| {
            let direct = self.edge_count(x);
            let via_vars: usize = self
                .var_tuples
                .iter()
                .map(|(tuple, count)| count * tuple.iter().filter(|&&y| y == x).count())
                .sum::<usize>()
                + if x == BoundarySpin::S {
                    self.boundary_s
                } else {
                    0
                };
            let via_clauses: usize = self
                .clause_tuples
                .iter()
                .map(|(tuple, count)| count * tuple.iter().filter(|&&y| y == x).count())
                .sum::<usize>()
                + match x {
                    BoundarySpin::B0 => self.boundary_b0,
                    BoundarySpin::B1 => self.boundary_b1,
                    _ => 0,
                };
            direct == via_vars && direct == via_clauses
        })
    }

    /// Piece density recovered from the profile's total masses alone, by
    /// summing Euler characteristics: free variables minus internal edges
    /// plus piece clauses, per variable.  Equals [`ComponentProfile::h_circ`]
    /// exactly when every piece is a tree.
    pub fn h_circ_from_euler(&self) -> BigRational {
        let one = BigRational::one();
        let frozen_vars: usize = self.var_tuples.values().sum();
        let sep_clauses: usize = self.clause_tuples.values().sum();
        let non_piece_edges: usize = self.edge_marks.values().sum();
        let d = BigRational::from_integer(BigInt::from(self.d));
        let k = BigRational::from_integer(BigInt::from(self.k));
        let dot_mass = BigRational::new(BigInt::from(frozen_vars), BigInt::from(self.n));
        let hat_mass = BigRational::new(BigInt::from(sep_clauses), BigInt::from(self.m));
        let bar_mass = BigRational::new(
            BigInt::from(non_piece_edges),
            BigInt::from(self.n * self.d),
        );
        (one.clone() - dot_mass) + (&d / &k) * (one.clone() - hat_mass)
            - d * (one - bar_mass)
    }
}

/// Exact integer cluster size together with the variable count: the product
/// of per-piece extension counts, i.e. the exponential of `n` times the
/// per-variable log-size.  Refuses free cycles; the float log is available
/// via [`weight_log_per_var`].
pub fn cluster_weight_s(
    inst: &Instance,
    fc: &FrozenConfig,
) -> Result<(BigUint, usize), ColoringError> {
    if !frozen::validate(inst, fc) {
        return Err(ColoringError::InvalidFrozenConfig);
    }
    let structure = frozen::free_structure(inst, fc);
    if structure.has_free_cycle() {
        return Err(ColoringError::FreeCycle);
    }
    let mut product = BigUint::one();
    for piece in &structure.pieces {
        product *= frozen::piece_extension_count(inst, fc, piece)
            .map_err(|_| ColoringError::PieceTooLarge)?;
    }
    Ok((product, inst.n()))
}

/// Per-variable log-size for the pair returned by [`cluster_weight_s`].
pub fn weight_log_per_var(weight: &BigUint, n: usize) -> f64 {
    let log = big_uint_ln(weight);
    log / n as f64
}

/// Natural log of a positive big integer, stable for values far beyond the
/// float range: mantissa of the high bits plus a power-of-two offset.
fn big_uint_ln(value: &BigUint) -> f64 {
    assert!(!value.is_zero(), "log of zero");
    let bits = value.bits();
    if bits <= 52 {
        return (value.to_u64().expect("fits in 52 bits") as f64).ln();
    }
    let shift = bits - 52;
    let top = (value >> shift).to_u64().expect("52 bits remain");
    (top as f64).ln() + shift as f64 * std::f64::consts::LN_2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frozen::{coarsen, count_extensions, enumerate_valid_frozen, free_structure};
    use crate::oracle::enumerate_solutions;
    use num_bigint::BigUint;

    fn ratio(n: u64, d: u64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    /// Small shapes for round trips and cycle handling; their coarsenings are
    /// almost always entirely free.
    fn small_instances() -> Vec<Instance> {
        let mut instances = vec![
            crate::fixtures::two_regular_three_sat(),
            crate::fixtures::forcing_ring(),
        ];
        for (n, d, k, seeds) in [
            (4usize, 3usize, 3usize, 6u64),
            (4, 3, 4, 6),
            (4, 2, 4, 4),
            (6, 2, 3, 4),
            (3, 2, 3, 4),
        ] {
            for seed in 0..seeds {
                instances.push(Instance::generate(n, d, k, 1000 * n as u64 + seed).unwrap());
            }
        }
        instances
    }

    /// Shapes dense enough to carry forcing cores, so some coarsenings are
    /// fully or partially frozen without free cycles.
    fn frozen_rich_instances() -> Vec<Instance> {
        let mut instances = vec![
            crate::fixtures::forcing_ring(),
            crate::fixtures::lone_free_variable(),
        ];
        for (n, d, k, seeds) in [
            (6usize, 4usize, 3usize, 30u64),
            (12, 4, 3, 40),
            (12, 5, 3, 40),
            // A dense small shape: enough clauses per variable for some
            // variables to be forced twice, which unblocks the recursion on
            // fully frozen configurations.
            (6, 6, 3, 20),
        ] {
            for seed in 0..seeds {
                instances.push(Instance::generate(n, d, k, 777 * n as u64 + seed).unwrap());
            }
        }
        instances
    }

    /// The component re-encoding covers every valid configuration — free
    /// cycles included — inverts exactly, and its empirical profile closes
    /// both double-counting identities; on tree-only configurations the Euler
    /// sum of the total masses recovers the piece density.
    #[test]
    fn component_profiles_close_the_double_counts() {
        let mut all_frozen = 0usize;
        let mut single_free = 0usize;
        let mut cyclic = 0usize;
        let mut lone_digests: std::collections::HashMap<(usize, usize), String> =
            std::collections::HashMap::new();
        for inst in small_instances()
            .into_iter()
            .chain(frozen_rich_instances().into_iter().filter(|i| i.n() <= 6))
        {
            for fc in enumerate_valid_frozen(&inst).unwrap() {
                let cc = component_coloring(&inst, &fc).unwrap();
                assert_eq!(component_to_frozen(&inst, &cc), fc);
                let profile = component_profile(&inst, &cc);
                assert!(profile.compatibility_holds());
                if cc.structure.pieces.iter().all(|p| p.is_tree()) {
                    assert_eq!(profile.h_circ_from_euler(), profile.h_circ());
                } else {
                    cyclic += 1;
                }
                let piece_total: usize =
                    profile.piece_multiset.values().map(|(c, _)| *c).sum();
                assert_eq!(piece_total, profile.piece_count);
                for piece in &cc.structure.pieces {
                    if piece.v() == 1 && piece.f() == 0 {
                        // Lone free variables are one isomorphism class per
                        // degree shape, whatever the host instance.
                        let digest = piece_digest(&inst, &fc, piece);
                        let entry = lone_digests
                            .entry((inst.d(), inst.k()))
                            .or_insert_with(|| digest.clone());
                        assert_eq!(*entry, digest);
                    }
                }
                if fc.free_count() == 0 {
                    all_frozen += 1;
                    assert_eq!(profile.h_circ(), BigRational::zero());
                    assert!(profile.piece_multiset.is_empty());
                    let frozen_vars: usize = profile.var_tuples.values().sum();
                    assert_eq!(frozen_vars, inst.n());
                    let sep_clauses: usize = profile.clause_tuples.values().sum();
                    assert_eq!(sep_clauses, inst.m());
                    let edges: usize = profile.edge_marks.values().sum();
                    assert_eq!(edges, inst.edges());
                }
                if fc.free_count() == 1 && cc.structure.pieces[0].f() == 0 {
                    single_free += 1;
                    assert_eq!(profile.h_circ(), ratio(1, inst.n() as u64));
                    assert_eq!(
                        profile.h(BoundarySpin::S),
                        ratio(inst.d() as u64, inst.n() as u64)
                    );
                    assert!(profile.h(BoundarySpin::B0).is_zero());
                    assert!(profile.h(BoundarySpin::B1).is_zero());
                }
            }
        }
        assert!(all_frozen >= 5, "want fully frozen profiles, saw {all_frozen}");
        assert!(single_free >= 1, "want lone-free profiles, saw {single_free}");
        assert!(cyclic >= 5, "want cyclic profiles, saw {cyclic}");
    }

    /// The exact cluster size splits as a product of per-piece extension
    /// counts: the integer agrees with the enumeration oracle and with the
    /// coloring product, all-frozen configurations give one, and a pair of
    /// lone free variables gives four.
    #[test]
    fn piece_products_match_cluster_sizes() {
        let mut checked = 0usize;
        for inst in small_instances()
            .into_iter()
            .chain(frozen_rich_instances().into_iter().filter(|i| i.n() <= 6))
        {
            let mut table = SpinTable::new();
            for fc in enumerate_valid_frozen(&inst).unwrap() {
                if free_structure(&inst, &fc).has_free_cycle() {
                    assert!(matches!(
                        cluster_weight_s(&inst, &fc),
                        Err(ColoringError::FreeCycle)
                    ));
                    continue;
                }
                let (weight, vars) = cluster_weight_s(&inst, &fc).unwrap();
                assert_eq!(vars, inst.n());
                assert_eq!(weight, count_extensions(&inst, &fc).unwrap());
                let mc = build_messages(&inst, &fc, &mut table).unwrap();
                let col = project_coloring(&inst, &mc, &table).unwrap();
                let size = coloring_cluster_size(&inst, &col, &mut table).unwrap();
                assert_eq!(
                    BigRational::from_integer(BigInt::from(weight.clone())),
                    size
                );
                let per_var = weight_log_per_var(&weight, vars);
                let direct = weight.to_f64().unwrap().ln() / vars as f64;
                assert!((per_var - direct).abs() <= 1e-12);
                if fc.free_count() == 0 {
                    assert!(weight.is_one());
                    assert_eq!(per_var, 0.0);
                }
                checked += 1;
            }
        }
        assert!(checked >= 90, "want broad coverage, saw {checked}");

        // A pair of lone free variables contributes a factor of two each.
        let inst = crate::fixtures::two_lone_free_variables();
        let mut labels = vec![frozen::VarLabel::Zero; inst.n()];
        labels[0] = frozen::VarLabel::Free;
        labels[1] = frozen::VarLabel::Free;
        let fc = FrozenConfig::from_labels(labels);
        assert!(frozen::validate(&inst, &fc));
        let pieces = free_structure(&inst, &fc);
        assert_eq!(pieces.pieces.len(), 2);
        assert!(pieces.pieces.iter().all(|p| p.v() == 1 && p.f() == 0));
        let (weight, vars) = cluster_weight_s(&inst, &fc).unwrap();
        assert_eq!(weight, BigUint::from(4u32));
        assert_eq!(weight, count_extensions(&inst, &fc).unwrap());
        let cc = component_coloring(&inst, &fc).unwrap();
        let profile = component_profile(&inst, &cc);
        assert_eq!(profile.h_circ(), BigRational::new(BigInt::from(2), BigInt::from(10)));
        assert_eq!(weight_log_per_var(&weight, vars), (4.0f64).ln() / 10.0);
    }

    #[test]
    fn atoms_and_flips_are_wired_correctly() {
        let mut table = SpinTable::new();
        assert_eq!(table.flip_dot(DOT_ZERO), DOT_ONE);
        assert_eq!(table.flip_dot(DOT_STAR), DOT_STAR);
        assert_eq!(table.flip_hat(HAT_SEP), HAT_SEP);
        assert_eq!(table.hat_measure(HAT_SEP), (&ratio(1, 2), &ratio(1, 2)));
        assert_eq!(table.hat_z(HAT_SEP).unwrap(), &ratio(2, 1));
        assert_eq!(table.hat_z(HAT_ZERO).unwrap(), &ratio(1, 1));
        assert_eq!(table.dot_measure(DOT_ONE), (&ratio(0, 1), &ratio(1, 1)));

        // A small join: two separating markers entering a variable.
        let dot = table.dot_t(&[HAT_SEP, HAT_SEP]).unwrap();
        assert_eq!(table.flip_dot(dot), dot);
        assert_eq!(table.dot_measure(dot), (&ratio(1, 2), &ratio(1, 2)));
        assert_eq!(table.dot_z(dot).unwrap(), &ratio(1, 2));
        assert_eq!(table.dot_vars(dot), 1);

        // Asymmetric clause join: one frozen zero and one free input.
        let hat = table.hat_t(&[DOT_ZERO, dot]);
        let flipped = table.flip_hat(hat);
        assert_ne!(hat, flipped);
        assert_eq!(table.flip_hat(flipped), hat);
        let (m0, m1) = table.hat_measure(hat);
        let (f0, f1) = table.hat_measure(flipped);
        assert_eq!(m0, f1);
        assert_eq!(m1, f0);
        assert_eq!(table.hat_vars(hat), table.hat_vars(flipped));
        // Not-all-equal with a half-half companion: z = 2 - 1/2 - 0 = 3/2.
        assert_eq!(table.hat_z(hat).unwrap(), &ratio(3, 2));
        assert_eq!(table.hat_vars(hat), 2);
    }

    #[test]
    fn combination_rules_follow_their_case_analysis() {
        let mut table = SpinTable::new();
        assert_eq!(table.hat_t(&[DOT_ONE, DOT_ONE]), HAT_ZERO);
        assert_eq!(table.hat_t(&[DOT_ZERO, DOT_ZERO]), HAT_ONE);
        assert_eq!(table.hat_t(&[DOT_ZERO, DOT_ONE]), HAT_SEP);
        assert_eq!(table.hat_t(&[DOT_ZERO, DOT_ONE, DOT_STAR]), HAT_SEP);
        assert_eq!(table.hat_t(&[DOT_ZERO, DOT_STAR]), HAT_STAR);

        assert!(matches!(
            table.dot_t(&[HAT_ZERO, HAT_ONE]),
            Err(ColoringError::ContradictoryMessages)
        ));
        assert_eq!(table.dot_t(&[HAT_ZERO, HAT_STAR]).unwrap(), DOT_ZERO);
        assert_eq!(table.dot_t(&[HAT_ONE, HAT_SEP]).unwrap(), DOT_ONE);
        assert_eq!(table.dot_t(&[HAT_STAR, HAT_SEP]).unwrap(), DOT_STAR);

        // Multiset semantics: input order never matters.
        let dot = table.dot_t(&[HAT_SEP, HAT_SEP]).unwrap();
        let a = table.hat_t(&[DOT_ZERO, dot, DOT_ZERO]);
        let b = table.hat_t(&[DOT_ZERO, DOT_ZERO, dot]);
        assert_eq!(a, b);
        // A join with an atom present stays a join (mixed frozen/free input).
        assert!(matches!(table.hat_kind(a), HatKind::Join(_)));
    }

    /// Every solution's coarsening yields messages that satisfy the local
    /// equations, invert back to the frozen configuration, and (without free
    /// cycles) reproduce the extension count through both product formulas.
    #[test]
    fn messages_and_weights_agree_with_extension_counts() {
        let mut checked_formula = 0usize;
        let mut checked_frozen_rich = 0usize;
        for inst in small_instances().into_iter().chain(frozen_rich_instances()) {
            let mut table = SpinTable::new();
            let solutions = enumerate_solutions(&inst).unwrap();
            let mut seen = std::collections::HashSet::new();
            for x in &solutions {
                let fc = coarsen(&inst, x).unwrap();
                if !seen.insert(fc.digest()) || !frozen::validate(&inst, &fc) {
                    continue;
                }
                if free_structure(&inst, &fc).has_free_cycle() {
                    assert!(matches!(
                        build_messages(&inst, &fc, &mut table),
                        Err(ColoringError::FreeCycle)
                    ));
                    continue;
                }
                let mc = build_messages(&inst, &fc, &mut table).unwrap();
                assert!(satisfies_local_equations(&inst, &mc, &mut table).unwrap());
                let recovered = messages_to_frozen(&inst, &mc, &table).unwrap();
                assert_eq!(recovered, fc);
                let size = BigRational::from_integer(BigInt::from(
                    count_extensions(&inst, &fc).unwrap(),
                ));
                let col = project_coloring(&inst, &mc, &table).unwrap();
                assert!(is_valid_coloring(&inst, &col, &mut table));
                assert_eq!(coloring_cluster_size(&inst, &col, &mut table).unwrap(), size);
                if mc.has_stars() {
                    // A forcing deadlock leaves the per-message product
                    // undefined, but the coloring weight above still works.
                    assert!(matches!(
                        bethe_cluster_size(&inst, &mc, &table),
                        Err(ColoringError::UnresolvedCycle)
                    ));
                } else {
                    assert_eq!(bethe_cluster_size(&inst, &mc, &table).unwrap(), size);
                }
                checked_formula += 1;
                if fc.labels().iter().any(|l| !l.is_free()) && fc.free_count() > 0 {
                    checked_frozen_rich += 1;
                }
            }
        }
        assert!(checked_formula >= 20, "saw {checked_formula} formula checks");
        assert!(
            checked_frozen_rich >= 3,
            "saw {checked_frozen_rich} mixed frozen/free configurations"
        );
    }

    /// The same guarantees hold across every valid frozen configuration of
    /// small instances, not only coarsening images.
    #[test]
    fn enumerated_frozen_configurations_round_trip() {
        let mut star_free = 0usize;
        for inst in small_instances()
            .into_iter()
            .chain(frozen_rich_instances())
            .filter(|i| i.n() <= 6)
        {
            let mut table = SpinTable::new();
            for fc in enumerate_valid_frozen(&inst).unwrap() {
                if free_structure(&inst, &fc).has_free_cycle() {
                    assert!(matches!(
                        build_messages(&inst, &fc, &mut table),
                        Err(ColoringError::FreeCycle)
                    ));
                    continue;
                }
                let mc = build_messages(&inst, &fc, &mut table).unwrap();
                assert!(satisfies_local_equations(&inst, &mc, &mut table).unwrap());
                assert_eq!(messages_to_frozen(&inst, &mc, &table).unwrap(), fc);
                let size = BigRational::from_integer(BigInt::from(
                    count_extensions(&inst, &fc).unwrap(),
                ));
                let col = project_coloring(&inst, &mc, &table).unwrap();
                assert!(is_valid_coloring(&inst, &col, &mut table));
                assert_eq!(coloring_cluster_size(&inst, &col, &mut table).unwrap(), size);
                if !mc.has_stars() {
                    star_free += 1;
                    assert_eq!(bethe_cluster_size(&inst, &mc, &table).unwrap(), size);
                }
            }
        }
        assert!(star_free >= 10, "saw {star_free} star-free configurations");
    }

    /// Edge colors mirror the frozen-side classification: forced edges are
    /// red, frozen edges blue, separating boundaries carry the separating
    /// marker, and free-tree sizes match the piece decomposition.
    #[test]
    fn colors_mirror_the_frozen_classification() {
        let mut free_edges = 0usize;
        for inst in frozen_rich_instances() {
            let mut table = SpinTable::new();
            for x in enumerate_solutions(&inst).unwrap() {
                let fc = coarsen(&inst, &x).unwrap();
                if !frozen::validate(&inst, &fc) {
                    continue;
                }
                let structure = free_structure(&inst, &fc);
                if structure.has_free_cycle() {
                    continue;
                }
                let mc = build_messages(&inst, &fc, &mut table).unwrap();
                let col = project_coloring(&inst, &mc, &table).unwrap();
                let forcing = frozen::forcing_edges(&inst, &fc);
                for (i, &spin) in col.spins.iter().enumerate() {
                    let v = inst.var_of(i);
                    match fc.label(v).bit() {
                        Some(bit) => {
                            if forcing[i] {
                                assert!(spin.is_red());
                            } else {
                                assert!(spin.is_blue());
                            }
                            assert_eq!(spin.frozen_bit(), Some(bit));
                        }
                        None => {
                            let piece = structure.piece_of_var[v].unwrap();
                            let piece = &structure.pieces[piece];
                            if piece.boundary_separating.contains(&i) {
                                assert!(
                                    matches!(spin, ColorSpin::Free { hat, .. } if hat == HAT_SEP)
                                );
                            } else {
                                assert!(piece.internal_edges.contains(&i));
                                assert!(
                                    matches!(spin, ColorSpin::Free { hat, .. } if hat != HAT_SEP)
                                );
                            }
                            assert_eq!(
                                spin_size(&table, spin).unwrap(),
                                piece.v() as u64,
                                "free edge sees exactly its piece's variables"
                            );
                            free_edges += 1;
                        }
                    }
                }
            }
        }
        assert!(free_edges >= 4, "saw {free_edges} free edges");
    }

    /// The edge factor times the variable factor telescopes to the defining
    /// normalizer on free edges.
    #[test]
    fn edge_factor_telescopes_to_the_normalizer() {
        let mut checked = 0usize;
        for inst in frozen_rich_instances() {
            let mut table = SpinTable::new();
            for x in enumerate_solutions(&inst).unwrap() {
                let fc = coarsen(&inst, &x).unwrap();
                if !frozen::validate(&inst, &fc)
                    || free_structure(&inst, &fc).has_free_cycle()
                {
                    continue;
                }
                let mc = build_messages(&inst, &fc, &mut table).unwrap();
                for i in 0..inst.edges() {
                    let dot = mc.dots[i];
                    if table.is_dot_atom(dot) || dot == DOT_STAR {
                        continue;
                    }
                    let v = inst.var_of(i);
                    let hats: Vec<HatId> = inst.var_half_edges(v).map(|e| mc.hats[e]).collect();
                    let lhs = bethe_edge_factor(&table, dot, mc.hats[i]).unwrap()
                        * bethe_var_factor(&table, &hats);
                    assert_eq!(&lhs, table.dot_z(dot).unwrap());
                    checked += 1;
                }
            }
        }
        assert!(checked >= 10, "saw {checked} free edges");
    }

    /// Literal averaging: the clause weight factors into its maximum times
    /// the validity indicator, the maximum is slot-independent, and the
    /// validity fraction matches its closed forms.
    #[test]
    fn literal_averages_factor_through_the_maximum() {
        let mut saw_free_clause = false;
        for inst in frozen_rich_instances() {
            let mut table = SpinTable::new();
            for x in enumerate_solutions(&inst).unwrap() {
                let fc = coarsen(&inst, &x).unwrap();
                if !frozen::validate(&inst, &fc)
                    || free_structure(&inst, &fc).has_free_cycle()
                {
                    continue;
                }
                let mc = build_messages(&inst, &fc, &mut table).unwrap();
                let col = project_coloring(&inst, &mc, &table).unwrap();
                for a in 0..inst.m() {
                    // Work from the unadjusted clause colors.
                    let spins: Vec<ColorSpin> = inst
                        .clause_half_edges(a)
                        .map(|j| col.spins[inst.var_side(j)])
                        .collect();
                    let maximum = color_clause_weight_max(&table, &spins).unwrap();
                    let k = spins.len();
                    let mut best = BigRational::zero();
                    for mask in 0u64..(1u64 << k) {
                        let adjusted: Vec<ColorSpin> = spins
                            .iter()
                            .enumerate()
                            .map(|(pos, &s)| flip_spin(&table, s, mask >> pos & 1 == 1))
                            .collect();
                        let weight = color_clause_weight_adjusted(&mut table, &adjusted);
                        let indicator = clause_colors_valid_adjusted(&mut table, &adjusted);
                        assert_eq!(
                            weight,
                            if indicator {
                                maximum.clone()
                            } else {
                                BigRational::zero()
                            },
                            "clause weight is the indicator times the maximum"
                        );
                        if weight > best {
                            best = weight;
                        }
                    }
                    assert_eq!(best, maximum, "the maximum is attained");

                    // Slot-independence of the maximum.
                    for (pos, spin) in spins.iter().enumerate() {
                        if spin.is_free() {
                            let mut rotated = spins.clone();
                            rotated.swap(0, pos);
                            assert_eq!(
                                color_clause_weight_max(&table, &rotated).unwrap(),
                                maximum
                            );
                            saw_free_clause = true;
                        }
                    }

                    // Validity fraction: flip invariance and closed forms.
                    let fraction = literal_validity_fraction(&mut table, &spins);
                    let all_flipped: Vec<ColorSpin> = spins
                        .iter()
                        .map(|&s| flip_spin(&table, s, true))
                        .collect();
                    assert_eq!(
                        literal_validity_fraction(&mut table, &all_flipped),
                        fraction,
                        "global flips preserve validity"
                    );
                    if let Some(closed) = literal_validity_closed_form(&spins) {
                        assert_eq!(closed, fraction);
                    }
                    if spins.iter().filter(|s| s.is_red()).count() == 1
                        && spins.iter().all(|s| s.is_frozen())
                    {
                        assert_eq!(
                            fraction,
                            BigRational::new(BigInt::from(2), BigInt::from(1u64) << k),
                            "a forcing clause keeps two of the 2^k literal patterns"
                        );
                    }
                }
            }
        }
        assert!(saw_free_clause, "never exercised a clause with free edges");
    }

    /// Coarsenings of every solution in a cluster share one coloring, and
    /// clusters whose coarsening avoids free cycles get colorings whose
    /// weights reproduce the census sizes exactly.
    #[test]
    fn census_clusters_match_coloring_sizes() {
        for inst in frozen_rich_instances().into_iter().take(35) {
            let mut table = SpinTable::new();
            let sols = enumerate_solutions(&inst).unwrap();
            let census = crate::oracle::cluster_census(&sols).unwrap();
            for cluster in &census.clusters {
                let fc = coarsen(&inst, &cluster.representative).unwrap();
                if !frozen::validate(&inst, &fc)
                    || free_structure(&inst, &fc).has_free_cycle()
                {
                    continue;
                }
                let mc = build_messages(&inst, &fc, &mut table).unwrap();
                let col = project_coloring(&inst, &mc, &table).unwrap();
                let size = coloring_cluster_size(&inst, &col, &mut table).unwrap();
                assert_eq!(
                    size,
                    BigRational::from_integer(BigInt::from(cluster.size)),
                    "coloring weight equals the census cluster size"
                );
            }
            // Sanity: total census mass is the solution count.
            let total: BigUint = census.clusters.iter().map(|c| BigUint::from(c.size)).sum();
            assert_eq!(total, BigUint::from(census.z()));
        }
    }

    /// Hand-built neighbourhoods pin down each validity case, including the
    /// one-sided frozen clauses whose two polarities must behave as mirror
    /// images.
    #[test]
    fn synthetic_neighbourhoods_cover_every_validity_case() {
        let mut table = SpinTable::new();

        // Frozen variable neighbourhoods: a forced edge plus blue companions
        // of the same value, and nothing else.
        assert!(var_colors_valid(
            &mut table,
            &[ColorSpin::R0, ColorSpin::B0, ColorSpin::B0]
        ));
        assert!(var_colors_valid(
            &mut table,
            &[ColorSpin::R0, ColorSpin::R0, ColorSpin::B0]
        ));
        assert!(!var_colors_valid(
            &mut table,
            &[ColorSpin::B0, ColorSpin::B0, ColorSpin::B0]
        ));
        assert!(!var_colors_valid(
            &mut table,
            &[ColorSpin::R0, ColorSpin::B1, ColorSpin::B0]
        ));

        // Forcing and separating clause neighbourhoods.
        assert!(clause_colors_valid_adjusted(
            &mut table,
            &[ColorSpin::R0, ColorSpin::B1, ColorSpin::B1]
        ));
        assert!(!clause_colors_valid_adjusted(
            &mut table,
            &[ColorSpin::R0, ColorSpin::B1, ColorSpin::B0]
        ));
        assert!(!clause_colors_valid_adjusted(
            &mut table,
            &[ColorSpin::R0, ColorSpin::R0, ColorSpin::B1]
        ));
        let any_join = table.dot_t(&[HAT_SEP, HAT_SEP]).unwrap();
        let sep_free = ColorSpin::Free {
            dot: any_join,
            hat: HAT_SEP,
        };
        assert!(clause_colors_valid_adjusted(
            &mut table,
            &[ColorSpin::B0, ColorSpin::B1, sep_free]
        ));
        assert!(clause_colors_valid_adjusted(
            &mut table,
            &[ColorSpin::B0, ColorSpin::B1, ColorSpin::B1]
        ));
        assert!(!clause_colors_valid_adjusted(
            &mut table,
            &[ColorSpin::B0, ColorSpin::B0, sep_free]
        ));

        // A one-sided clause: one frozen-zero edge and two free edges whose
        // outgoing messages are rebuilt from the local equations, so the
        // neighbourhood is valid by construction.
        let hat_aux = table.hat_t(&[DOT_ZERO, any_join]);
        let dot1 = any_join;
        let dot2 = table.dot_t(&[HAT_SEP, hat_aux]).unwrap();
        assert_ne!(dot1, dot2);
        let hat1 = table.hat_t(&[DOT_ZERO, dot2]);
        let hat2 = table.hat_t(&[DOT_ZERO, dot1]);
        assert_ne!(hat1, hat2);
        let one_sided = [
            ColorSpin::B0,
            ColorSpin::Free {
                dot: dot1,
                hat: hat1,
            },
            ColorSpin::Free {
                dot: dot2,
                hat: hat2,
            },
        ];
        assert!(clause_colors_valid_adjusted(&mut table, &one_sided));

        // Swapping the two hats breaks the local equations.
        let scrambled = [
            ColorSpin::B0,
            ColorSpin::Free {
                dot: dot1,
                hat: hat2,
            },
            ColorSpin::Free {
                dot: dot2,
                hat: hat1,
            },
        ];
        assert!(!clause_colors_valid_adjusted(&mut table, &scrambled));

        // The mirrored polarity (frozen-one edge, flipped messages) must be
        // exactly as valid.
        let mirrored: Vec<ColorSpin> = one_sided
            .iter()
            .map(|&s| flip_spin(&table, s, true))
            .collect();
        assert!(clause_colors_valid_adjusted(&mut table, &mirrored));
        assert_eq!(
            color_clause_weight_adjusted(&mut table, &mirrored),
            color_clause_weight_adjusted(&mut table, &one_sided)
        );

        // Weight factorization and the literal average on the unadjusted
        // tuple (here the adjusted tuple doubles as the unadjusted one).
        let weight = color_clause_weight_adjusted(&mut table, &one_sided);
        let dots = [DOT_ZERO, dot1, dot2];
        assert_eq!(weight, bethe_clause_factor(&table, &dots));
        let maximum = color_clause_weight_max(&table, &one_sided).unwrap();
        assert_eq!(weight, maximum);
        let fraction = literal_validity_fraction(&mut table, &one_sided);
        assert!(fraction > BigRational::zero());
        assert!(literal_validity_closed_form(&one_sided).is_none());
        let flipped_fraction = {
            let all_flipped: Vec<ColorSpin> = one_sided
                .iter()
                .map(|&s| flip_spin(&table, s, true))
                .collect();
            literal_validity_fraction(&mut table, &all_flipped)
        };
        assert_eq!(fraction, flipped_fraction);

        // An all-free variable neighbourhood rebuilt from its own messages.
        let h3 = hat_aux;
        let hats = [HAT_SEP, HAT_SEP, h3];
        let mut spins = Vec::new();
        for pos in 0..3 {
            let inputs: Vec<HatId> = (0..3).filter(|&o| o != pos).map(|o| hats[o]).collect();
            let dot = table.dot_t(&inputs).unwrap();
            spins.push(ColorSpin::Free {
                dot,
                hat: hats[pos],
            });
        }
        assert!(var_colors_valid(&mut table, &spins));
        assert_eq!(
            color_var_weight(&mut table, &spins),
            bethe_var_factor(&table, &hats)
        );
        // Permuting whole edge spins only relabels the neighbourhood, but
        // moving a hat without its matching dot breaks the local equations.
        let mut permuted = spins.clone();
        permuted.swap(0, 2);
        assert!(var_colors_valid(&mut table, &permuted));
        let grab = |s: &ColorSpin| match *s {
            ColorSpin::Free { dot, hat } => (dot, hat),
            _ => unreachable!(),
        };
        let (d0, h0) = grab(&spins[0]);
        let (d2, h2) = grab(&spins[2]);
        let mut broken = spins.clone();
        broken[0] = ColorSpin::Free { dot: d0, hat: h2 };
        broken[2] = ColorSpin::Free { dot: d2, hat: h0 };
        assert!(!var_colors_valid(&mut table, &broken));
    }

    /// Free cycles are refused outright, while a ring of mutually forcing
    /// clauses deadlocks the recursion and leaves cycle markers on frozen
    /// edges — where the coloring weight still applies but the per-message
    /// product does not.
    #[test]
    fn free_cycles_are_refused_and_forcing_rings_leave_markers() {
        // An all-free configuration on a cycle-shaped instance has a free
        // cycle, so the construction refuses it.
        let inst = crate::fixtures::two_regular_three_sat();
        let mut table = SpinTable::new();
        let fc = FrozenConfig::all_free(inst.n());
        assert!(frozen::validate(&inst, &fc));
        assert!(free_structure(&inst, &fc).has_free_cycle());
        assert!(matches!(
            build_messages(&inst, &fc, &mut table),
            Err(ColoringError::FreeCycle)
        ));

        // The forcing ring: fully frozen, every variable forced by exactly
        // one clause, arranged so no edge can start the recursion. All
        // markers sit on frozen edges, the messages still solve the local
        // equations, and the coloring absorbs the markers into red and blue.
        let ring = crate::fixtures::forcing_ring();
        let sols = enumerate_solutions(&ring).unwrap();
        // Exactly the two-against-two splits: each clause omits one variable
        // and the lone dissenter inside it is forced, so every solution is
        // its own fully frozen cluster.
        assert_eq!(sols.len(), 6);
        for x in &sols {
            let fc = coarsen(&ring, x).unwrap();
            assert!(frozen::validate(&ring, &fc));
            assert!(fc.labels().iter().all(|l| !l.is_free()));
            assert!(!free_structure(&ring, &fc).has_free_cycle());
            let mc = build_messages(&ring, &fc, &mut table).unwrap();
            assert!(mc.has_stars());
            // Nothing can seed the recursion, so every edge keeps a marker on
            // one side: forced edges on the variable side, the rest on the
            // clause side. All of them sit on frozen variables.
            assert_eq!(mc.star_edges.len(), ring.edges());
            assert!(mc
                .star_edges
                .iter()
                .all(|&i| !fc.label(ring.var_of(i)).is_free()));
            assert!(satisfies_local_equations(&ring, &mc, &mut table).unwrap());
            assert_eq!(messages_to_frozen(&ring, &mc, &table).unwrap(), fc);
            assert!(matches!(
                bethe_cluster_size(&ring, &mc, &table),
                Err(ColoringError::UnresolvedCycle)
            ));
            let col = project_coloring(&ring, &mc, &table).unwrap();
            assert!(is_valid_coloring(&ring, &col, &mut table));
            assert_eq!(
                coloring_cluster_size(&ring, &col, &mut table).unwrap(),
                BigRational::one(),
            );
            assert_eq!(count_extensions(&ring, &fc).unwrap(), BigUint::one());
        }
    }
}
