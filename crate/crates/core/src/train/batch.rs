//! Batch assembly and epoch-level subsampling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::labels::LabelVector;
use crate::model::InputSequence;

/// One training example: a person's model input plus their fixed forecast
/// labels.
#[derive(Clone, Debug)]
pub struct LabeledSequence {
    pub person_id: u64,
    pub seq: InputSequence,
    pub labels: LabelVector,
}

/// Padded id matrices for a group of persons. Padding replicates each
/// person's last event; `lengths` bounds the true positions, and loss is
/// only ever evaluated on them, so padded positions contribute exactly zero.
#[derive(Clone, Debug)]
pub struct Batch {
    pub n_persons: usize,
    pub t_max: usize,
    pub n_classes: usize,
    pub codes: Vec<usize>,
    pub ages: Vec<usize>,
    pub t2f: Vec<usize>,
    pub lengths: Vec<usize>,
    pub labels: Vec<LabelVector>,
}

impl Batch {
    pub fn assemble(items: &[&LabeledSequence]) -> Batch {
        assert!(!items.is_empty());
        let t_max = items.iter().map(|i| i.seq.len()).max().unwrap();
        let n = items.len();
        let n_classes = items[0].labels.n_classes();
        let mut codes = Vec::with_capacity(n * t_max);
        let mut ages = Vec::with_capacity(n * t_max);
        let mut t2f = Vec::with_capacity(n * t_max);
        let mut lengths = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for item in items {
            let t = item.seq.len();
            codes.extend_from_slice(item.seq.codes());
            ages.extend_from_slice(item.seq.ages());
            t2f.extend_from_slice(item.seq.t2f());
            for _ in t..t_max {
                codes.push(*item.seq.codes().last().unwrap());
                ages.push(*item.seq.ages().last().unwrap());
                t2f.push(*item.seq.t2f().last().unwrap());
            }
            lengths.push(t);
            labels.push(item.labels.clone());
        }
        Batch {
            n_persons: n,
            t_max,
            n_classes,
            codes,
            ages,
            t2f,
            lengths,
            labels,
        }
    }

    /// True for positions that carry a real event.
    pub fn padding_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_persons * self.t_max];
        for (p, &len) in self.lengths.iter().enumerate() {
            for t in 0..len {
                mask[p * self.t_max + t] = true;
            }
        }
        mask
    }

    /// Person `i`'s true-length input sequence.
    pub fn person_seq(&self, i: usize) -> InputSequence {
        let len = self.lengths[i];
        let base = i * self.t_max;
        InputSequence::new(
            self.codes[base..base + len].to_vec(),
            self.ages[base..base + len].to_vec(),
            self.t2f[base..base + len].to_vec(),
        )
        .expect("batch rows come from valid sequences")
    }
}

/// Epoch subset: persons labeled only with `none_class` are kept with
/// probability `rate`; everyone else is always kept. Returns indices into
/// `items` in their original order (shuffling happens separately).
pub fn downsample_none(
    items: &[LabeledSequence],
    none_class: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    items
        .iter()
        .enumerate()
        .filter_map(|(i, item)| {
            if item.labels.is_only(none_class) {
                (rng.gen::<f64>() < rate).then_some(i)
            } else {
                Some(i)
            }
        })
        .collect()
}

/// Seeded in-place shuffle of epoch indices.
pub fn shuffle_indices(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    indices.shuffle(rng);
}
