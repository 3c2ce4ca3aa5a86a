use std::collections::BTreeSet;

use kdbench_core::objectives::{LayerMapping, MappingStrategy};
use proptest::prelude::*;

/// Literal reading of each strategy, written independently of the crate.
fn oracle(strategy: MappingStrategy, ls: usize, lt: usize) -> Vec<Vec<usize>> {
    let k = (lt as f64 / ls as f64).ceil() as usize;
    let mut out = vec![Vec::new(); ls];
    for i in 1..=ls {
        let set = &mut out[i - 1];
        match strategy {
            MappingStrategy::Single => {
                if i == ls {
                    set.push(lt);
                }
            }
            MappingStrategy::Last => set.push(lt - ls + i),
            MappingStrategy::Uniform => set.push(if k * i > lt { lt } else { k * i }),
            MappingStrategy::UniformCons => {
                let mut j = k * (i - 1) + 1;
                while j <= k * i && j <= lt {
                    set.push(j);
                    j += 1;
                }
            }
            MappingStrategy::UniformPlusLast => {
                let u = if k * i > lt { lt } else { k * i };
                set.push(u);
                let l = lt - ls + i;
                if l != u {
                    set.push(l);
                }
                set.sort();
            }
        }
    }
    out
}

fn as_vecs(m: &LayerMapping) -> Vec<Vec<usize>> {
    (1..=m.student_layers()).map(|i| m.phi(i).iter().copied().collect()).collect()
}

#[test]
fn every_strategy_matches_the_oracle_up_to_sixteen_layers() {
    for lt in 1..=16 {
        for ls in 1..=lt {
            for s in MappingStrategy::ALL {
                let m = s.build(ls, lt).unwrap();
                assert_eq!(as_vecs(&m), oracle(s, ls, lt), "{s} for ({ls}, {lt})");
            }
            assert!(LayerMapping::uniform_cons(ls, lt).unwrap().is_partition(), "({ls}, {lt})");
        }
    }
}

#[test]
fn deeper_students_are_rejected_except_for_single() {
    for s in MappingStrategy::ALL {
        assert_eq!(s.build(5, 4).is_ok(), s == MappingStrategy::Single, "{s}");
    }
}

proptest! {
    #[test]
    fn mapped_layers_stay_in_range(lt in 1usize..40, frac in 0.0f64..1.0) {
        let ls = 1 + ((lt - 1) as f64 * frac) as usize;
        for s in MappingStrategy::ALL {
            let m = s.build(ls, lt).unwrap();
            prop_assert_eq!(m.student_layers(), ls);
            for (i, j) in m.pairs() {
                prop_assert!((1..=ls).contains(&i) && (1..=lt).contains(&j));
            }
            // Uniform-Cons can run out of teacher layers before the last student layer.
            if s != MappingStrategy::UniformCons {
                prop_assert!(m.phi(ls).contains(&lt));
            }
        }
        let cons = LayerMapping::uniform_cons(ls, lt).unwrap();
        let covered: BTreeSet<usize> = cons.pairs().into_iter().map(|(_, j)| j).collect();
        prop_assert_eq!(covered.len(), lt);
    }
}
