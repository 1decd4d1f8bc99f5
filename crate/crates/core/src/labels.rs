//! Fixed-width multi-label target vectors.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
#[error("class id {id} out of range for {n_classes} classes")]
pub struct InvalidClassId {
    pub id: usize,
    pub n_classes: usize,
}

/// Binary vector over the fixed class set. Per-person targets are constant
/// across sequence positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelVector {
    bits: Vec<bool>,
}

impl LabelVector {
    pub fn new(n_classes: usize) -> Self {
        LabelVector {
            bits: vec![false; n_classes],
        }
    }

    pub fn from_class_ids(ids: &[usize], n_classes: usize) -> Result<Self, InvalidClassId> {
        let mut v = LabelVector::new(n_classes);
        for &id in ids {
            if id >= n_classes {
                return Err(InvalidClassId { id, n_classes });
            }
            v.bits[id] = true;
        }
        Ok(v)
    }

    pub fn n_classes(&self) -> usize {
        self.bits.len()
    }

    pub fn get(&self, class: usize) -> bool {
        self.bits[class]
    }

    pub fn set(&mut self, class: usize, value: bool) {
        self.bits[class] = value;
    }

    pub fn count_positive(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when `class` is the single positive entry.
    pub fn is_only(&self, class: usize) -> bool {
        self.bits[class] && self.count_positive() == 1
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.bits.iter().copied()
    }

    /// 0/1 targets in the requested precision.
    pub fn to_targets<S: Scalar>(&self) -> Vec<S> {
        self.bits
            .iter()
            .map(|&b| if b { S::one() } else { S::zero() })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_ids_and_queries() {
        let v = LabelVector::from_class_ids(&[0, 3], 5).unwrap();
        assert!(v.get(0) && v.get(3));
        assert_eq!(v.count_positive(), 2);
        assert_eq!(v.class_ids(), vec![0, 3]);
        assert!(!v.is_only(0));
        assert!(LabelVector::from_class_ids(&[5], 5).is_err());
        let only = LabelVector::from_class_ids(&[4], 5).unwrap();
        assert!(only.is_only(4));
        assert_eq!(only.to_targets::<f32>(), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
