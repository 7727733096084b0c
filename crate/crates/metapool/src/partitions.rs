//! Set partitions of {1,…,L} in restricted-growth encoding, their enumeration,
//! and the two partition priors used by the pooling and RJMCMC models.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported L. Bell(14) ≈ 1.9×10⁸ already strains exhaustive sweeps.
pub const MAX_STUDIES: usize = 14;

/// A partition in restricted-growth form: block labels appear in first-use
/// order, so `assignment[0] == 0` and each entry is at most one more than the
/// running maximum. This makes the encoding a unique key per partition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<u8>,
    num_blocks: u8,
}

impl Partition {
    pub fn from_assignment(assignment: &[usize]) -> Result<Self> {
        if assignment.is_empty() || assignment.len() > MAX_STUDIES {
            return Err(Error::Domain(format!(
                "partition length must be in 1..={MAX_STUDIES}"
            )));
        }
        let mut max_seen: i32 = -1;
        let mut encoded = Vec::with_capacity(assignment.len());
        for &a in assignment {
            if a as i32 > max_seen + 1 {
                return Err(Error::Domain(format!(
                    "assignment {assignment:?} is not in restricted-growth form"
                )));
            }
            max_seen = max_seen.max(a as i32);
            encoded.push(a as u8);
        }
        Ok(Partition {
            assignment: encoded,
            num_blocks: (max_seen + 1) as u8,
        })
    }

    pub fn pool_all(l: usize) -> Self {
        Partition {
            assignment: vec![0; l],
            num_blocks: 1,
        }
    }

    pub fn singletons(l: usize) -> Self {
        Partition {
            assignment: (0..l as u8).collect(),
            num_blocks: l as u8,
        }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks as usize
    }

    pub fn assignment(&self) -> &[u8] {
        &self.assignment
    }

    pub fn block_of(&self, i: usize) -> usize {
        self.assignment[i] as usize
    }

    /// Member indices of every block, in label order.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut blocks = vec![Vec::new(); self.num_blocks()];
        for (i, &b) in self.assignment.iter().enumerate() {
            blocks[b as usize].push(i);
        }
        blocks
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_blocks()];
        for &b in &self.assignment {
            sizes[b as usize] += 1;
        }
        sizes
    }

    /// Block notation with caller-supplied study ids, e.g. `{1,2,5}{3,4}`.
    pub fn render(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for block in self.blocks() {
            out.push('{');
            for (j, &i) in block.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&ids[i].to_string());
            }
            out.push('}');
        }
        out
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for block in self.blocks() {
            write!(f, "{{")?;
            for (j, &i) in block.iter().enumerate() {
                if j > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{}", i + 1)?;
            }
            write!(f, "}}")?;
        }
        Ok(())
    }
}

/// Completion counts for restricted-growth strings: `table[i][m]` is the number
/// of ways to extend a prefix of length `i` whose running maximum label is `m`.
/// Row 0 column 0 recovers the Bell number.
#[derive(Debug, Clone)]
pub struct RgsCounts {
    l: usize,
    table: Vec<Vec<u64>>,
}

impl RgsCounts {
    pub fn new(l: usize) -> Result<Self> {
        if l == 0 || l > MAX_STUDIES {
            return Err(Error::ResourceLimit(format!(
                "partition enumeration supports 1..={MAX_STUDIES} studies, got {l}"
            )));
        }
        let mut table = vec![vec![0u64; l + 1]; l + 1];
        for m in 0..=l {
            table[l][m] = 1;
        }
        for i in (1..l).rev() {
            for m in 0..=i {
                table[i][m] = (m as u64 + 1) * table[i + 1][m] + table[i + 1][m + 1];
            }
        }
        // the first position is always label 0, leaving a length-1 prefix
        // with running maximum 0
        table[0][0] = table[1][0];
        Ok(RgsCounts { l, table })
    }

    pub fn bell(&self) -> u64 {
        self.table[0][0]
    }

    /// Partition at `rank` in lexicographic restricted-growth order.
    pub fn unrank(&self, rank: u64) -> Result<Partition> {
        if rank >= self.bell() {
            return Err(Error::Domain(format!(
                "rank {rank} out of range for Bell({}) = {}",
                self.l,
                self.bell()
            )));
        }
        let mut assignment = vec![0u8; self.l];
        let mut remaining = rank;
        let mut max_label = 0usize;
        for i in 1..self.l {
            let per_old_label = self.table[i + 1][max_label];
            let old_total = (max_label as u64 + 1) * per_old_label;
            if remaining < old_total {
                assignment[i] = (remaining / per_old_label) as u8;
                remaining %= per_old_label;
            } else {
                remaining -= old_total;
                max_label += 1;
                assignment[i] = max_label as u8;
            }
        }
        Ok(Partition {
            assignment,
            num_blocks: max_label as u8 + 1,
        })
    }
}

pub fn bell_number(l: usize) -> Result<u64> {
    Ok(RgsCounts::new(l)?.bell())
}

/// Number of partitions of L items into exactly d blocks (Stirling numbers of
/// the second kind).
pub fn stirling_count(l: usize, d: usize) -> Result<u64> {
    if l == 0 || l > MAX_STUDIES {
        return Err(Error::ResourceLimit(format!(
            "stirling_count supports 1..={MAX_STUDIES} items, got {l}"
        )));
    }
    if d == 0 || d > l {
        return Err(Error::Domain(format!(
            "block count {d} out of range 1..={l}"
        )));
    }
    let mut row = vec![0u64; l + 1];
    row[0] = 1; // S(0,0)
    for n in 1..=l {
        for k in (1..=n).rev() {
            row[k] = k as u64 * row[k] + row[k - 1];
        }
        row[0] = 0;
    }
    Ok(row[d])
}

/// Lexicographic stream of all partitions of {1,…,L}. Resumable: it can start
/// at any rank, so sweep workers can claim disjoint ranges.
#[derive(Debug, Clone)]
pub struct PartitionIter {
    next: Option<Partition>,
    remaining: u64,
}

impl PartitionIter {
    fn advance(assignment: &mut [u8]) -> bool {
        let l = assignment.len();
        // rightmost position that can be incremented without breaking the
        // restricted-growth property
        for i in (1..l).rev() {
            let max_prefix = assignment[..i].iter().copied().max().unwrap_or(0);
            if assignment[i] <= max_prefix {
                assignment[i] += 1;
                for a in assignment[i + 1..].iter_mut() {
                    *a = 0;
                }
                return true;
            }
        }
        false
    }
}

impl Iterator for PartitionIter {
    type Item = Partition;

    fn next(&mut self) -> Option<Partition> {
        if self.remaining == 0 {
            return None;
        }
        let current = self.next.take()?;
        self.remaining -= 1;
        if self.remaining > 0 {
            let mut assignment = current.assignment.clone();
            if PartitionIter::advance(&mut assignment) {
                let num_blocks = assignment.iter().copied().max().unwrap() + 1;
                self.next = Some(Partition {
                    assignment,
                    num_blocks,
                });
            }
        }
        Some(current)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.remaining as usize;
        (n, Some(n))
    }
}

pub fn enumerate_partitions(l: usize) -> Result<PartitionIter> {
    let counts = RgsCounts::new(l)?;
    Ok(PartitionIter {
        next: Some(Partition::pool_all(l)),
        remaining: counts.bell(),
    })
}

/// Stream over ranks `start..end` in lexicographic order.
pub fn enumerate_range(counts: &RgsCounts, start: u64, end: u64) -> Result<PartitionIter> {
    let end = end.min(counts.bell());
    if start >= end {
        return Ok(PartitionIter {
            next: None,
            remaining: 0,
        });
    }
    Ok(PartitionIter {
        next: Some(counts.unrank(start)?),
        remaining: end - start,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionPrior {
    /// p(g) = 1/B_L.
    Uniform,
    /// p(g) ∝ d(g)⁻¹ / #{g′ : d(g′) = d(g)}: each block-count level gets total
    /// mass proportional to 1/d, split evenly among its partitions.
    SizeBiased,
}

pub fn prior_log_mass(prior: PartitionPrior, g: &Partition) -> Result<f64> {
    prior_log_mass_for_block_count(prior, g.len(), g.num_blocks())
}

/// Both priors depend on a partition only through its block count, so sweeps
/// can precompute the mass for every d once.
pub fn prior_log_mass_for_block_count(
    prior: PartitionPrior,
    l: usize,
    d: usize,
) -> Result<f64> {
    match prior {
        PartitionPrior::Uniform => Ok(-(bell_number(l)? as f64).ln()),
        PartitionPrior::SizeBiased => {
            let harmonic: f64 = (1..=l).map(|k| 1.0 / k as f64).sum();
            Ok(-(d as f64).ln() - (stirling_count(l, d)? as f64).ln() - harmonic.ln())
        }
    }
}

/// True iff `g` has exactly one block of size ≥ `min_block` and every other
/// block is a singleton.
pub fn dominant_block_predicate(g: &Partition, min_block: usize) -> bool {
    let sizes = g.block_sizes();
    let large = sizes.iter().filter(|&&s| s >= min_block).count();
    let non_singleton = sizes.iter().filter(|&&s| s > 1).count();
    large == 1 && non_singleton <= 1
}

/// Default dominant-cluster threshold: at least 4 studies, and within 5 of L
/// so a lone large block still dominates when L is large.
pub fn default_min_block(l: usize) -> usize {
    4.max(l.saturating_sub(5))
}
