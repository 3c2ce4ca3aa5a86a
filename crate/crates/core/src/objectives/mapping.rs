use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Heuristic layer-mapping strategies for hidden-state transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MappingStrategy {
    #[serde(rename = "single")]
    Single,
    #[serde(rename = "last")]
    Last,
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "uniform-cons")]
    UniformCons,
    #[serde(rename = "uniform+last")]
    UniformPlusLast,
}

impl MappingStrategy {
    pub const ALL: [MappingStrategy; 5] = [
        MappingStrategy::Single,
        MappingStrategy::Last,
        MappingStrategy::Uniform,
        MappingStrategy::UniformCons,
        MappingStrategy::UniformPlusLast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MappingStrategy::Single => "single",
            MappingStrategy::Last => "last",
            MappingStrategy::Uniform => "uniform",
            MappingStrategy::UniformCons => "uniform-cons",
            MappingStrategy::UniformPlusLast => "uniform+last",
        }
    }

    pub fn build(self, ls: usize, lt: usize) -> Result<LayerMapping> {
        match self {
            MappingStrategy::Single => LayerMapping::single(ls, lt),
            MappingStrategy::Last => LayerMapping::last(ls, lt),
            MappingStrategy::Uniform => LayerMapping::uniform(ls, lt),
            MappingStrategy::UniformCons => LayerMapping::uniform_cons(ls, lt),
            MappingStrategy::UniformPlusLast => LayerMapping::uniform_plus_last(ls, lt),
        }
    }
}

impl fmt::Display for MappingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MappingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MappingStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidMapping(format!("unknown strategy {s:?}")))
    }
}

/// `φ`: student layer `i ∈ [1, L^S]` to a set of teacher layers in `[1, L^T]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMapping {
    teacher_layers: usize,
    sets: Vec<BTreeSet<usize>>,
}

fn check_sizes(ls: usize, lt: usize, need_le: bool) -> Result<()> {
    if ls == 0 || lt == 0 {
        return Err(Error::InvalidMapping(format!("layer counts must be positive (L^S={ls}, L^T={lt})")));
    }
    if need_le && ls > lt {
        return Err(Error::InvalidMapping(format!("student deeper than teacher (L^S={ls} > L^T={lt})")));
    }
    Ok(())
}

impl LayerMapping {
    /// Explicit mapping; `sets[i - 1]` is `φ(i)`.
    pub fn new(teacher_layers: usize, sets: Vec<BTreeSet<usize>>) -> Result<Self> {
        check_sizes(sets.len(), teacher_layers, false)?;
        if let Some(&j) = sets.iter().flatten().find(|&&j| j == 0 || j > teacher_layers) {
            return Err(Error::InvalidMapping(format!("teacher layer {j} outside [1, {teacher_layers}]")));
        }
        Ok(Self { teacher_layers, sets })
    }

    fn from_fn(ls: usize, lt: usize, f: impl Fn(usize) -> BTreeSet<usize>) -> Result<Self> {
        Self::new(lt, (1..=ls).map(f).collect())
    }

    /// Last student layer to last teacher layer only.
    pub fn single(ls: usize, lt: usize) -> Result<Self> {
        check_sizes(ls, lt, false)?;
        Self::from_fn(ls, lt, |i| if i == ls { BTreeSet::from([lt]) } else { BTreeSet::new() })
    }

    /// `φ(i) = {L^T − L^S + i}`.
    pub fn last(ls: usize, lt: usize) -> Result<Self> {
        check_sizes(ls, lt, true)?;
        Self::from_fn(ls, lt, |i| BTreeSet::from([lt - ls + i]))
    }

    /// `φ(i) = {min(k·i, L^T)}` with `k = ⌈L^T / L^S⌉`.
    pub fn uniform(ls: usize, lt: usize) -> Result<Self> {
        check_sizes(ls, lt, true)?;
        let k = lt.div_ceil(ls);
        Self::from_fn(ls, lt, |i| BTreeSet::from([(k * i).min(lt)]))
    }

    /// `φ(i) = {k(i−1)+1, …, min(k·i, L^T)}`; empty once `k(i−1) ≥ L^T`.
    pub fn uniform_cons(ls: usize, lt: usize) -> Result<Self> {
        check_sizes(ls, lt, true)?;
        let k = lt.div_ceil(ls);
        Self::from_fn(ls, lt, |i| (k * (i - 1) + 1..=(k * i).min(lt)).collect())
    }

    /// Union of the uniform and last choices.
    pub fn uniform_plus_last(ls: usize, lt: usize) -> Result<Self> {
        let (u, l) = (Self::uniform(ls, lt)?, Self::last(ls, lt)?);
        Self::new(lt, u.sets.iter().zip(&l.sets).map(|(a, b)| a | b).collect())
    }

    pub fn student_layers(&self) -> usize {
        self.sets.len()
    }

    pub fn teacher_layers(&self) -> usize {
        self.teacher_layers
    }

    /// `φ(i)`, 1-based.
    pub fn phi(&self, i: usize) -> &BTreeSet<usize> {
        &self.sets[i - 1]
    }

    /// All mapped `(i, j)` pairs in ascending order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.sets.iter().enumerate().flat_map(|(i, s)| s.iter().map(move |&j| (i + 1, j))).collect()
    }

    /// Whether every teacher layer is mapped exactly once.
    pub fn is_partition(&self) -> bool {
        let pairs = self.pairs();
        let covered: BTreeSet<usize> = pairs.iter().map(|&(_, j)| j).collect();
        pairs.len() == self.teacher_layers && covered.len() == self.teacher_layers
    }
}

impl fmt::Display for LayerMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .sets
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(i, s)| {
                let js: Vec<String> = s.iter().map(usize::to_string).collect();
                format!("{}:{{{}}}", i + 1, js.join(","))
            })
            .collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(m: &LayerMapping) -> Vec<Vec<usize>> {
        (1..=m.student_layers()).map(|i| m.phi(i).iter().copied().collect()).collect()
    }

    #[test]
    fn single_examples() {
        assert_eq!(sets(&LayerMapping::single(6, 12).unwrap())[5], vec![12]);
        assert_eq!(sets(&LayerMapping::single(1, 12).unwrap()), vec![vec![12]]);
        assert_eq!(sets(&LayerMapping::single(3, 12).unwrap()), vec![vec![], vec![], vec![12]]);
    }

    #[test]
    fn last_examples() {
        assert_eq!(sets(&LayerMapping::last(3, 12).unwrap()), vec![vec![10], vec![11], vec![12]]);
        let id = LayerMapping::last(12, 12).unwrap();
        assert!((1..=12).all(|i| id.phi(i) == &BTreeSet::from([i])));
        assert_eq!(LayerMapping::last(6, 12).unwrap().phi(1), &BTreeSet::from([7]));
        assert!(LayerMapping::last(4, 3).is_err());
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(sets(&LayerMapping::uniform(4, 12).unwrap()), vec![vec![3], vec![6], vec![9], vec![12]]);
        let m = LayerMapping::uniform(5, 12).unwrap();
        assert_eq!(m.phi(4), &BTreeSet::from([12]));
        assert_eq!(m.phi(5), &BTreeSet::from([12]));
    }

    #[test]
    fn uniform_cons_examples() {
        let m = LayerMapping::uniform_cons(4, 12).unwrap();
        assert_eq!(sets(&m), vec![vec![1, 2, 3], vec![4, 5, 6], vec![7, 8, 9], vec![10, 11, 12]]);
        assert!(m.is_partition());
        assert_eq!(LayerMapping::uniform_cons(6, 12).unwrap().phi(6), &BTreeSet::from([11, 12]));
    }

    #[test]
    fn uniform_plus_last_examples() {
        let m = LayerMapping::uniform_plus_last(6, 12).unwrap();
        assert_eq!(m.phi(1), &BTreeSet::from([2, 7]));
        assert_eq!(m.phi(2), &BTreeSet::from([4, 8]));
        assert_eq!(m.phi(6), &BTreeSet::from([12]));
        let same = LayerMapping::uniform_plus_last(12, 12).unwrap();
        assert!((1..=12).all(|i| same.phi(i) == &BTreeSet::from([i])));
    }

    #[test]
    fn names_roundtrip_and_display() {
        for s in MappingStrategy::ALL {
            assert_eq!(s.name().parse::<MappingStrategy>().unwrap(), s);
        }
        assert!("uniform_last".parse::<MappingStrategy>().is_err());
        assert_eq!(LayerMapping::last(2, 4).unwrap().to_string(), "{1:{3}, 2:{4}}");
    }

    #[test]
    fn explicit_mapping_validated() {
        assert!(LayerMapping::new(4, vec![BTreeSet::from([5])]).is_err());
        assert!(LayerMapping::new(4, vec![BTreeSet::from([0])]).is_err());
        assert!(LayerMapping::new(4, vec![]).is_err());
    }
}
