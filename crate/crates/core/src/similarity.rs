//! Class-centre representations and the assignment of similar old classes to
//! each new class.

use std::collections::BTreeMap;

use crate::data::ClassId;
use crate::error::{input_err, Result};
use crate::matrix::Matrix;

/// Mean feature vector per class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassCentres(BTreeMap<ClassId, Vec<f64>>);

impl ClassCentres {
    pub fn new(map: BTreeMap<ClassId, Vec<f64>>) -> Self {
        Self(map)
    }

    pub fn get(&self, class: ClassId) -> Option<&[f64]> {
        self.0.get(&class).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &[f64])> {
        self.0.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn class_centres(features_by_class: &BTreeMap<ClassId, Matrix>) -> Result<ClassCentres> {
    features_by_class
        .iter()
        .map(|(&c, feats)| {
            if feats.rows() == 0 {
                Err(input_err!("class {c} has no samples"))
            } else {
                Ok((c, feats.column_mean()))
            }
        })
        .collect::<Result<_>>()
        .map(ClassCentres)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For each new class, up to `m_per_new` nearest old classes, with no old class
/// used twice.
///
/// All (new, old) pairs are visited by ascending centre distance (ties by new
/// id, then old id); a pair is kept if the new class still has room and the old
/// class is still free.
pub fn select_similar(
    new_centres: &ClassCentres,
    old_centres: &ClassCentres,
    m_per_new: usize,
) -> BTreeMap<ClassId, Vec<ClassId>> {
    let mut out: BTreeMap<ClassId, Vec<ClassId>> =
        new_centres.iter().map(|(c, _)| (c, Vec::new())).collect();
    if m_per_new == 0 || old_centres.is_empty() {
        return out;
    }
    let mut pairs: Vec<(f64, ClassId, ClassId)> = new_centres
        .iter()
        .flat_map(|(n, nc)| {
            old_centres
                .iter()
                .map(move |(o, oc)| (squared_distance(nc, oc), n, o))
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut used = std::collections::BTreeSet::new();
    let mut open = new_centres.len();
    for (_, n, o) in pairs {
        if open == 0 || used.len() == old_centres.len() {
            break;
        }
        let list = out.get_mut(&n).expect("new class present");
        if list.len() >= m_per_new || used.contains(&o) {
            continue;
        }
        list.push(o);
        used.insert(o);
        if list.len() == m_per_new {
            open -= 1;
        }
    }
    out
}
