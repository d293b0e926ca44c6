//! d-regular k-NAE-SAT instances as half-edge matchings.
//!
//! Variable-side half-edge `i` belongs to variable `i / d`; clause-side
//! half-edge `j` belongs to clause `j / k`. The matching is a permutation of
//! `{0..nd-1}` sending variable-side to clause-side indices, and each edge
//! carries a literal bit indexed by its variable-side half-edge. Parallel
//! edges (a variable matched into one clause twice) are legal and kept
//! distinct, as the configuration model requires.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("nd = {nd} is not divisible by k = {k}")]
    NotDivisible { nd: usize, k: usize },
    #[error("n, d, k must all be at least 1")]
    ZeroParameter,
    #[error("field `{field}`: expected length {expected}, got {got}")]
    BadLength {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("field `matching`: not a permutation of 0..{0}")]
    NotPermutation(usize),
    #[error("field `literals`: entry {0} is not 0 or 1")]
    BadLiteral(usize),
    #[error("assignment length {got} does not match n = {n}")]
    AssignmentLength { got: usize, n: usize },
    #[error("malformed instance document: {0}")]
    Malformed(#[from] serde_json::Error),
}

/// An assignment x in {0,1}^V.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    pub bits: Vec<bool>,
}

impl Assignment {
    pub fn from_mask(mask: u64, n: usize) -> Self {
        Assignment {
            bits: (0..n).map(|v| mask >> v & 1 == 1).collect(),
        }
    }

    pub fn to_mask(&self) -> u64 {
        assert!(self.bits.len() <= 64);
        self.bits
            .iter()
            .enumerate()
            .fold(0, |m, (v, &b)| m | (b as u64) << v)
    }

    pub fn negated(&self) -> Self {
        Assignment {
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub fn hamming(&self, other: &Assignment) -> usize {
        assert_eq!(self.bits.len(), other.bits.len());
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance", into = "RawInstance")]
pub struct Instance {
    n: usize,
    d: usize,
    k: usize,
    /// variable-side half-edge -> clause-side half-edge
    matching: Vec<usize>,
    /// clause-side half-edge -> variable-side half-edge
    #[serde(skip)]
    inverse: Vec<usize>,
    /// literal bit per edge, indexed by variable-side half-edge
    literals: Vec<u8>,
}

/// Serialized form: canonical field order, no derived fields.
#[derive(Serialize, Deserialize)]
struct RawInstance {
    n: usize,
    d: usize,
    k: usize,
    matching: Vec<usize>,
    literals: Vec<u8>,
}

impl From<Instance> for RawInstance {
    fn from(inst: Instance) -> RawInstance {
        RawInstance {
            n: inst.n,
            d: inst.d,
            k: inst.k,
            matching: inst.matching,
            literals: inst.literals,
        }
    }
}

impl TryFrom<RawInstance> for Instance {
    type Error = InstanceError;

    fn try_from(raw: RawInstance) -> Result<Instance, InstanceError> {
        Instance::from_parts(raw.n, raw.d, raw.k, raw.matching, raw.literals)
    }
}

impl Instance {
    /// Builds an instance from explicit wiring, enforcing every invariant.
    pub fn from_parts(
        n: usize,
        d: usize,
        k: usize,
        matching: Vec<usize>,
        literals: Vec<u8>,
    ) -> Result<Instance, InstanceError> {
        if n == 0 || d == 0 || k == 0 {
            return Err(InstanceError::ZeroParameter);
        }
        let nd = n * d;
        if nd % k != 0 {
            return Err(InstanceError::NotDivisible { nd, k });
        }
        if matching.len() != nd {
            return Err(InstanceError::BadLength {
                field: "matching",
                expected: nd,
                got: matching.len(),
            });
        }
        if literals.len() != nd {
            return Err(InstanceError::BadLength {
                field: "literals",
                expected: nd,
                got: literals.len(),
            });
        }
        if let Some(&bad) = literals.iter().find(|&&b| b > 1) {
            return Err(InstanceError::BadLiteral(bad as usize));
        }
        let mut inverse = vec![usize::MAX; nd];
        for (i, &j) in matching.iter().enumerate() {
            if j >= nd || inverse[j] != usize::MAX {
                return Err(InstanceError::NotPermutation(nd));
            }
            inverse[j] = i;
        }
        Ok(Instance {
            n,
            d,
            k,
            matching,
            inverse,
            literals,
        })
    }

    /// Uniform matching plus i.i.d. literals, from split ChaCha12 streams
    /// (stream 0 drives the shuffle, stream 1 the literal bits) so the two
    /// draws are independent and the output is portable across platforms.
    pub fn generate(n: usize, d: usize, k: usize, seed: u64) -> Result<Instance, InstanceError> {
        if n == 0 || d == 0 || k == 0 {
            return Err(InstanceError::ZeroParameter);
        }
        let nd = n * d;
        if nd % k != 0 {
            return Err(InstanceError::NotDivisible { nd, k });
        }
        let mut rng_match = ChaCha12Rng::seed_from_u64(seed);
        rng_match.set_stream(0);
        let mut rng_lit = ChaCha12Rng::seed_from_u64(seed);
        rng_lit.set_stream(1);

        let mut matching: Vec<usize> = (0..nd).collect();
        matching.shuffle(&mut rng_match);
        let literals: Vec<u8> = (0..nd).map(|_| rng_lit.gen::<bool>() as u8).collect();
        Instance::from_parts(n, d, k, matching, literals)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.n * self.d / self.k
    }

    pub fn edges(&self) -> usize {
        self.n * self.d
    }

    pub fn var_of(&self, var_half_edge: usize) -> usize {
        var_half_edge / self.d
    }

    pub fn clause_of(&self, clause_half_edge: usize) -> usize {
        clause_half_edge / self.k
    }

    /// Variable-side half-edges of variable v.
    pub fn var_half_edges(&self, v: usize) -> std::ops::Range<usize> {
        v * self.d..(v + 1) * self.d
    }

    /// Clause-side half-edges of clause a.
    pub fn clause_half_edges(&self, a: usize) -> std::ops::Range<usize> {
        a * self.k..(a + 1) * self.k
    }

    /// Clause-side half-edge matched to variable-side half-edge i.
    pub fn clause_side(&self, i: usize) -> usize {
        self.matching[i]
    }

    /// Variable-side half-edge matched to clause-side half-edge j.
    pub fn var_side(&self, j: usize) -> usize {
        self.inverse[j]
    }

    pub fn literal(&self, var_half_edge: usize) -> bool {
        self.literals[var_half_edge] == 1
    }

    /// Literal-adjusted value this edge shows its clause: x_{v(e)} XOR L_e.
    pub fn edge_value(&self, var_half_edge: usize, x: &Assignment) -> bool {
        x.bits[self.var_of(var_half_edge)] ^ self.literal(var_half_edge)
    }

    /// I_NAE(x; G): every clause sees both a 0 and a 1 among its
    /// literal-adjusted values.
    pub fn eval_nae(&self, x: &Assignment) -> Result<bool, InstanceError> {
        if x.bits.len() != self.n {
            return Err(InstanceError::AssignmentLength {
                got: x.bits.len(),
                n: self.n,
            });
        }
        Ok((0..self.m()).all(|a| !self.clause_constant(a, x)))
    }

    /// True iff clause a's literal-adjusted values are all equal under x.
    pub fn clause_constant(&self, a: usize, x: &Assignment) -> bool {
        let mut vals = self
            .clause_half_edges(a)
            .map(|j| self.edge_value(self.var_side(j), x));
        let first = vals.next().expect("k >= 1");
        vals.all(|v| v == first)
    }

    /// Fast path for enumeration: evaluates on a bitmask assignment.
    pub fn eval_nae_mask(&self, mask: u64) -> bool {
        (0..self.m()).all(|a| {
            let mut seen0 = false;
            let mut seen1 = false;
            for j in self.clause_half_edges(a) {
                let i = self.inverse[j];
                let val = (mask >> (i / self.d) & 1 == 1) ^ (self.literals[i] == 1);
                if val {
                    seen1 = true;
                } else {
                    seen0 = true;
                }
            }
            seen0 && seen1
        })
    }

    /// True when some variable meets some clause through two or more edges.
    /// The configuration model allows this; a few structural results (e.g.
    /// validity of coarsened configurations) only hold on simple instances.
    pub fn has_parallel_edges(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        (0..self.edges()).any(|i| !seen.insert((self.var_of(i), self.clause_of(self.matching[i]))))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("instance serializes")
    }

    pub fn from_json(text: &str) -> Result<Instance, InstanceError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Extended DIMACS-like text for eyeballing: a comment header carrying
    /// d and k, then one line per clause of signed 1-based variable indices.
    pub fn to_dimacs(&self) -> String {
        let mut out = format!("c d={} k={}\np nae {} {}\n", self.d, self.k, self.n, self.m());
        for a in 0..self.m() {
            let mut line = String::new();
            for j in self.clause_half_edges(a) {
                let i = self.inverse[j];
                let v = self.var_of(i) as i64 + 1;
                let signed = if self.literal(i) { -v } else { v };
                line.push_str(&signed.to_string());
                line.push(' ');
            }
            line.push_str("0\n");
            out.push_str(&line);
        }
        out
    }
}
