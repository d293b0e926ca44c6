//! Exhaustive ground truth at tiny n: solution enumeration, Hamming-1
//! cluster census, tilted partition sums, overlaps, and exact expectations
//! over every (matching, literal) draw of the model.

use crate::exact::{pow_lambda_uint, round_bits, Lambda};
use crate::instance::{Assignment, Instance, InstanceError};
use itertools::Itertools;
use num_bigint::{BigInt, BigUint};
use num_rational::{BigRational, Ratio};
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// Enumeration guard: 2^n assignment sweeps.
pub const MAX_ENUM_VARS: usize = 32;
/// Expectation guard: (nd)! 2^(nd) instance sweeps.
pub const MAX_EXPECT_EDGES: usize = 12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("n = {0} exceeds the 2^n enumeration guard of {MAX_ENUM_VARS}")]
    TooManyVars(usize),
    #[error("nd = {0} exceeds the (nd)!*2^nd expectation guard of {MAX_EXPECT_EDGES}")]
    TooManyEdges(usize),
    #[error("solution list contains duplicates")]
    DuplicateSolutions,
    #[error(transparent)]
    Instance(#[from] InstanceError),
}

/// One Hamming-1 connected component of the solution set.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub representative: Assignment,
    pub size: u64,
    /// Indices into the census's solution list.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ClusterCensus {
    pub solutions: Vec<Assignment>,
    pub clusters: Vec<Cluster>,
}

impl ClusterCensus {
    /// Total solution count Z = sum of cluster sizes.
    pub fn z(&self) -> u64 {
        self.clusters.iter().map(|c| c.size).sum()
    }

    /// Histogram cluster size -> multiplicity; partition sums only see this.
    pub fn size_histogram(&self) -> BTreeMap<u64, u64> {
        let mut h = BTreeMap::new();
        for c in &self.clusters {
            *h.entry(c.size).or_insert(0u64) += 1;
        }
        h
    }
}

/// Σ_clusters |cluster|^λ restricted to an optional window
/// |cluster| ∈ [e^(ns), e^(ns+1)); exact for λ ∈ {0,1}.
#[derive(Debug, Clone)]
pub struct PartitionValue {
    pub lambda: Lambda,
    pub value: BigRational,
    pub exact: bool,
}

impl PartitionValue {
    pub fn to_f64(&self) -> f64 {
        crate::exact::rational_to_f64(&self.value)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so components keep their lowest index stable.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// All solutions of the instance in lexicographic order (x_0 major).
pub fn enumerate_solutions(inst: &Instance) -> Result<Vec<Assignment>, OracleError> {
    let n = inst.n();
    if n > MAX_ENUM_VARS {
        return Err(OracleError::TooManyVars(n));
    }
    let total: u64 = 1u64 << n;
    // Chunked sweep with deterministic merge order, so worker count never
    // changes the output.
    let chunk: u64 = 1 << n.min(16);
    let mut masks: Vec<u64> = (0..total.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            (c * chunk..((c + 1) * chunk).min(total))
                .filter(|&m| inst.eval_nae_mask(m))
                .collect::<Vec<u64>>()
        })
        .flatten()
        .collect();
    masks.sort_by_key(|m| m.reverse_bits() >> (64 - n));
    Ok(masks
        .into_iter()
        .map(|m| Assignment::from_mask(m, n))
        .collect())
}

/// Partition into Hamming-1 connected components.
pub fn cluster_census(sols: &[Assignment]) -> Result<ClusterCensus, OracleError> {
    census_with_radius(sols, 1)
}

/// Census variant merging components within a Hamming radius (radius 1 is
/// the standard cluster definition; larger radii give the merged-cluster
/// variant). Radius 1 probes neighbors in a hash map; larger radii fall back
/// to the quadratic pairwise scan.
pub fn census_with_radius(sols: &[Assignment], radius: usize) -> Result<ClusterCensus, OracleError> {
    let index: HashMap<&Assignment, usize> =
        sols.iter().enumerate().map(|(i, x)| (x, i)).collect();
    if index.len() != sols.len() {
        return Err(OracleError::DuplicateSolutions);
    }
    let mut uf = UnionFind::new(sols.len());
    if radius == 1 {
        for (i, x) in sols.iter().enumerate() {
            let mut probe = x.clone();
            for v in 0..x.bits.len() {
                probe.bits[v] = !probe.bits[v];
                if let Some(&j) = index.get(&probe) {
                    uf.union(i, j);
                }
                probe.bits[v] = !probe.bits[v];
            }
        }
    } else {
        for i in 0..sols.len() {
            for j in i + 1..sols.len() {
                if sols[i].hamming(&sols[j]) <= radius {
                    uf.union(i, j);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..sols.len() {
        groups.entry(uf.find(i)).or_default().push(i);
    }
    let clusters = groups
        .into_values()
        .map(|members| Cluster {
            representative: sols[members[0]].clone(),
            size: members.len() as u64,
            members,
        })
        .collect();
    Ok(ClusterCensus {
        solutions: sols.to_vec(),
        clusters,
    })
}

/// Σ |cluster|^λ, optionally windowed to |cluster| ∈ [e^(ns), e^(ns+1)).
pub fn partition_function(
    census: &ClusterCensus,
    lambda: Lambda,
    s_window: Option<f64>,
) -> PartitionValue {
    let n = census
        .solutions
        .first()
        .map(|x| x.bits.len())
        .unwrap_or(0);
    let in_window = |size: u64| -> bool {
        match s_window {
            None => true,
            Some(s) => {
                let log = (size as f64).ln();
                let ns = n as f64 * s;
                ns <= log && log < ns + 1.0
            }
        }
    };
    let mut value = BigRational::zero();
    let mut exact = true;
    for (&size, &count) in &census.size_histogram() {
        if !in_window(size) {
            continue;
        }
        let term = if lambda.is_exact() {
            pow_lambda_uint(&BigUint::from(size), lambda)
        } else {
            exact = false;
            pow_lambda_uint(&BigUint::from(size), lambda)
        };
        value += term * BigRational::from_integer(BigInt::from(count));
    }
    if !exact {
        value = round_bits(&value, crate::exact::PREC_BITS);
    }
    PartitionValue {
        lambda,
        value,
        exact,
    }
}

/// Exact overlap ρ(x¹,x²) = (n − 2·Hamming)/n ∈ [−1, 1].
pub fn overlap(x1: &Assignment, x2: &Assignment) -> Ratio<i64> {
    assert_eq!(x1.bits.len(), x2.bits.len(), "overlap needs equal lengths");
    let n = x1.bits.len() as i64;
    let h = x1.hamming(x2) as i64;
    Ratio::new(n - 2 * h, n)
}

/// Two independent uniform draws from SOL with their overlap; None when the
/// instance is unsatisfiable.
pub fn sample_solution_pair(
    inst: &Instance,
    seed: u64,
) -> Result<Option<(Assignment, Assignment, Ratio<i64>)>, OracleError> {
    let sols = enumerate_solutions(inst)?;
    Ok(sample_pair_from(&sols, seed))
}

/// Pair sampler over a pre-enumerated solution list.
pub fn sample_pair_from(
    sols: &[Assignment],
    seed: u64,
) -> Option<(Assignment, Assignment, Ratio<i64>)> {
    if sols.is_empty() {
        return None;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x1 = sols[rng.gen_range(0..sols.len())].clone();
    let x2 = sols[rng.gen_range(0..sols.len())].clone();
    let rho = overlap(&x1, &x2);
    Some((x1, x2, rho))
}

/// Visits every instance of the (n,d,k) model exactly once: all (nd)!
/// matchings times all 2^(nd) literal vectors. The caller's fold must be a
/// pure function of the instance; partial sums merge in deterministic
/// chunk order.
pub fn average_over_instances<T, F, M>(
    n: usize,
    d: usize,
    k: usize,
    map: F,
    merge: M,
    empty: T,
) -> Result<(T, BigUint), OracleError>
where
    T: Send,
    F: Fn(&Instance) -> T + Sync,
    M: Fn(T, T) -> T + Sync + Send,
{
    let nd = n * d;
    if nd > MAX_EXPECT_EDGES {
        return Err(OracleError::TooManyEdges(nd));
    }
    // Validate divisibility once up front.
    Instance::generate(n, d, k, 0)?;
    let perms: Vec<Vec<usize>> = (0..nd).permutations(nd).collect();
    let lit_total = 1u64 << nd;
    let result = perms
        .par_iter()
        .map(|perm| {
            let mut acc: Option<T> = None;
            for lits in 0..lit_total {
                let literals: Vec<u8> = (0..nd).map(|i| (lits >> i & 1) as u8).collect();
                let inst = Instance::from_parts(n, d, k, perm.clone(), literals)
                    .expect("permutation wiring is valid");
                let v = map(&inst);
                acc = Some(match acc {
                    None => v,
                    Some(a) => merge(a, v),
                });
            }
            acc.expect("at least one literal vector")
        })
        .reduce_with(&merge);
    let count = BigUint::from(perms.len()) * BigUint::from(lit_total);
    Ok((result.unwrap_or(empty), count))
}

/// E Z_λ over the whole model: average of Σ |cluster|^λ across every
/// (matching, literals) pair. Exact rational at λ ∈ {0,1}; 128-bit rounded
/// otherwise. The unrestricted λ=1 value must equal 2^n (1−2^(1−k))^m.
pub fn exact_expected_partition(
    n: usize,
    d: usize,
    k: usize,
    lambda: Lambda,
) -> Result<PartitionValue, OracleError> {
    // Aggregate the exact histogram of cluster sizes first so the irrational
    // powers are taken once per distinct size, not once per instance.
    let (hist, count) = average_over_instances(
        n,
        d,
        k,
        |inst| {
            let sols = enumerate_solutions(inst).expect("guarded n");
            let census = cluster_census(&sols).expect("distinct solutions");
            census.size_histogram()
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
    for (&size, &mult) in &hist {
        value += pow_lambda_uint(&BigUint::from(size), lambda)
            * BigRational::from_integer(BigInt::from(mult));
    }
    value /= BigRational::from_integer(BigInt::from(count));
    let exact = lambda.is_exact();
    if !exact {
        value = round_bits(&value, crate::exact::PREC_BITS);
    }
    Ok(PartitionValue {
        lambda,
        value,
        exact,
    })
}

/// Closed form E Z = 2^n (1 − 2^(1−k))^m.
pub fn expected_z_closed_form(n: usize, k: usize, m: usize) -> BigRational {
    let two = BigRational::from_integer(BigInt::from(2));
    let mut acc = BigRational::one();
    for _ in 0..n {
        acc *= &two;
    }
    let mut factor = BigRational::one() - two.pow(1 - k as i32);
    let mut pow = BigRational::one();
    let mut e = m;
    while e > 0 {
        if e & 1 == 1 {
            pow *= &factor;
        }
        factor = &factor * &factor;
        e >>= 1;
    }
    acc * pow
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::two_regular_three_sat;
    use std::collections::{HashSet, VecDeque};

    /// Independent clause-by-clause filter used as the second evaluator.
    fn filter_oracle(inst: &Instance) -> Vec<u64> {
        let clauses: Vec<Vec<(usize, bool)>> = (0..inst.m())
            .map(|a| {
                inst.clause_half_edges(a)
                    .map(|j| {
                        let i = inst.var_side(j);
                        (inst.var_of(i), inst.literal(i))
                    })
                    .collect()
            })
            .collect();
        (0..1u64 << inst.n())
            .filter(|&mask| {
                clauses.iter().all(|cl| {
                    let vals: Vec<bool> =
                        cl.iter().map(|&(v, l)| (mask >> v & 1 == 1) ^ l).collect();
                    vals.iter().any(|&b| b) && vals.iter().any(|&b| !b)
                })
            })
            .collect()
    }

    /// Independent BFS clustering used against the union-find census.
    fn bfs_clusters(sols: &[Assignment]) -> Vec<Vec<usize>> {
        let index: HashMap<&Assignment, usize> =
            sols.iter().enumerate().map(|(i, x)| (x, i)).collect();
        let mut seen = vec![false; sols.len()];
        let mut out = Vec::new();
        for start in 0..sols.len() {
            if seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                comp.push(i);
                let mut probe = sols[i].clone();
                for v in 0..probe.bits.len() {
                    probe.bits[v] = !probe.bits[v];
                    if let Some(&j) = index.get(&probe) {
                        if !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                    probe.bits[v] = !probe.bits[v];
                }
            }
            comp.sort();
            out.push(comp);
        }
        out.sort();
        out
    }

    #[test]
    fn fig_one_solutions_match_filter() {
        let inst = two_regular_three_sat();
        let sols = enumerate_solutions(&inst).unwrap();
        let mut masks: Vec<u64> = sols.iter().map(|x| x.to_mask()).collect();
        masks.sort();
        let mut expected = filter_oracle(&inst);
        expected.sort();
        assert_eq!(masks, expected);
        assert!(!sols.is_empty());
        // Closed under global negation.
        let set: HashSet<u64> = masks.iter().copied().collect();
        for &m in &masks {
            assert!(set.contains(&(!m & 0x3f)));
        }
        // Lexicographic order on the bit vectors.
        for w in sols.windows(2) {
            assert!(w[0].bits < w[1].bits);
        }
    }

    #[test]
    fn parallel_edge_clause_unsatisfiable() {
        let inst = Instance::from_parts(1, 3, 3, vec![0, 1, 2], vec![0, 0, 0]).unwrap();
        assert!(enumerate_solutions(&inst).unwrap().is_empty());
        assert!(sample_solution_pair(&inst, 0).unwrap().is_none());
    }

    #[test]
    fn census_trivial_cases() {
        // Negation pair at distance n >= 2: two singleton clusters.
        let sols = vec![
            Assignment::from_mask(0b00, 2),
            Assignment::from_mask(0b11, 2),
        ];
        let census = cluster_census(&sols).unwrap();
        assert_eq!(census.clusters.len(), 2);
        assert!(census.clusters.iter().all(|c| c.size == 1));
        // The full hypercube is one cluster.
        let all: Vec<Assignment> = (0..16).map(|m| Assignment::from_mask(m, 4)).collect();
        let census = cluster_census(&all).unwrap();
        assert_eq!(census.clusters.len(), 1);
        assert_eq!(census.clusters[0].size, 16);
    }

    #[test]
    fn census_matches_bfs_on_random_instances() {
        for seed in 0..40 {
            let inst = Instance::generate(5, 2, 5, seed).unwrap();
            let sols = enumerate_solutions(&inst).unwrap();
            let census = cluster_census(&sols).unwrap();
            let mut got: Vec<Vec<usize>> = census
                .clusters
                .iter()
                .map(|c| {
                    let mut m = c.members.clone();
                    m.sort();
                    m
                })
                .collect();
            got.sort();
            assert_eq!(got, bfs_clusters(&sols));
            assert_eq!(census.z(), sols.len() as u64);
        }
    }

    #[test]
    fn merged_census_radius() {
        // 000 and 011 are at distance 2: separate at radius 1, merged at 2.
        let sols = vec![
            Assignment::from_mask(0b000, 3),
            Assignment::from_mask(0b110, 3),
        ];
        assert_eq!(cluster_census(&sols).unwrap().clusters.len(), 2);
        assert_eq!(census_with_radius(&sols, 2).unwrap().clusters.len(), 1);
    }

    #[test]
    fn partition_values() {
        let sols: Vec<Assignment> = (0..13).map(|m| Assignment::from_mask(m, 4)).collect();
        let census = cluster_census(&sols).unwrap();
        let z1 = partition_function(&census, Lambda::ONE, None);
        assert_eq!(z1.value, BigRational::from_integer(BigInt::from(13)));
        assert!(z1.exact);
        // λ=1/2 on a census with cluster sizes {4, 9} gives 2 + 3.
        let sols = vec![
            Assignment::from_mask(0b0000, 4), // cluster {0,1,2,3} below
            Assignment::from_mask(0b1000, 4),
            Assignment::from_mask(0b0100, 4),
            Assignment::from_mask(0b1100, 4),
        ];
        let mut more: Vec<Assignment> = (0..9).map(|m| Assignment::from_mask(m << 1, 5)).collect();
        // Separate exact-size check: {4}-cluster census plus a 9-chain.
        let census4 = cluster_census(&sols).unwrap();
        assert_eq!(census4.clusters.len(), 1);
        assert_eq!(census4.clusters[0].size, 4);
        more.truncate(9);
        let half = Lambda::new(1, 2).unwrap();
        let hist_value = |sizes: &[u64]| -> f64 { sizes.iter().map(|&s| (s as f64).sqrt()).sum() };
        let v4 = partition_function(&census4, half, None);
        assert!((v4.to_f64() - hist_value(&[4])).abs() < 1e-12);
        assert!(!v4.exact);
    }

    #[test]
    fn partition_window() {
        let all: Vec<Assignment> = (0..16).map(|m| Assignment::from_mask(m, 4)).collect();
        let census = cluster_census(&all).unwrap();
        // One cluster of size 16; s-window containing log(16)/4 keeps it.
        let s_in = (16f64).ln() / 4.0 - 0.1;
        let s_out = (16f64).ln() / 4.0 + 0.5;
        assert_eq!(
            partition_function(&census, Lambda::ZERO, Some(s_in)).value,
            BigRational::one()
        );
        assert_eq!(
            partition_function(&census, Lambda::ZERO, Some(s_out)).value,
            BigRational::zero()
        );
    }

    #[test]
    fn overlap_values() {
        let x = Assignment::from_mask(0b0000, 4);
        assert_eq!(overlap(&x, &x), Ratio::new(1, 1));
        assert_eq!(overlap(&x, &x.negated()), Ratio::new(-1, 1));
        let y = Assignment::from_mask(0b1100, 4);
        assert_eq!(overlap(&x, &y), Ratio::new(0, 1));
    }

    #[test]
    fn expected_partition_closed_form() {
        // (n,d,k) = (3,2,3): E Z = 8 (3/4)^2 = 9/2.
        let got = exact_expected_partition(3, 2, 3, Lambda::ONE).unwrap();
        assert_eq!(got.value, BigRational::new(BigInt::from(9), BigInt::from(2)));
        assert_eq!(got.value, expected_z_closed_form(3, 3, 2));
        // (n,d,k) = (2,2,4): E Z = 4 (7/8) = 7/2.
        let got = exact_expected_partition(2, 2, 4, Lambda::ONE).unwrap();
        assert_eq!(got.value, BigRational::new(BigInt::from(7), BigInt::from(2)));
        assert_eq!(got.value, expected_z_closed_form(2, 4, 1));
    }

    #[test]
    fn expected_partition_tilt_ordering() {
        // λ=0 counts clusters, λ=1 counts solutions: E N ≤ E Z.
        let n0 = exact_expected_partition(3, 2, 3, Lambda::ZERO).unwrap();
        let n1 = exact_expected_partition(3, 2, 3, Lambda::ONE).unwrap();
        assert!(n0.value <= n1.value);
        // And λ=1/2 sits between them.
        let nh = exact_expected_partition(3, 2, 3, Lambda::new(1, 2).unwrap()).unwrap();
        assert!(n0.value <= nh.value && nh.value <= n1.value);
    }

    #[test]
    fn expectation_guard() {
        assert!(matches!(
            exact_expected_partition(7, 2, 7, Lambda::ONE),
            Err(OracleError::TooManyEdges(14))
        ));
    }

    #[test]
    fn sampler_is_uniform_enough() {
        let inst = two_regular_three_sat();
        let sols = enumerate_solutions(&inst).unwrap();
        let mut counts = vec![0u64; sols.len()];
        let trials = 20_000;
        for seed in 0..trials {
            let (x1, _, _) = sample_pair_from(&sols, seed).unwrap();
            let idx = sols.iter().position(|s| *s == x1).unwrap();
            counts[idx] += 1;
        }
        let expected = trials as f64 / sols.len() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // Very loose: dof = |SOL| - 1, reject only wild nonuniformity.
        assert!(chi2 < 4.0 * sols.len() as f64, "chi2 = {chi2}");
    }
}
