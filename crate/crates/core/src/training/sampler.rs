//! Epoch plans with minority-class oversampling.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};

/// Shuffled batches of item indices for one epoch.
///
/// With `oversample`, the minority class is repeated until both classes fill
/// the same number of slots: whole copies first, then a draw without
/// replacement for the remainder, so multiplicities differ by at most one.
pub fn build_epoch_plan(labels: &[u8], batch_size: usize, oversample: bool, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let class = |c: u8| -> Vec<usize> { (0..labels.len()).filter(|&i| labels[i] == c).collect() };
    let (real, fake) = (class(0), class(1));
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidInput(format!(
            "both classes need clips, got {} real and {} fake",
            real.len(),
            fake.len()
        )));
    }
    if real.len() + fake.len() != labels.len() {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    let mut slots: Vec<usize> = (0..labels.len()).collect();
    if oversample && real.len() != fake.len() {
        let (minority, target) = if real.len() < fake.len() {
            (&real, fake.len())
        } else {
            (&fake, real.len())
        };
        let extra = target - minority.len();
        for _ in 0..extra / minority.len() {
            slots.extend_from_slice(minority);
        }
        slots.extend(minority.choose_multiple(rng, extra % minority.len()));
    }
    slots.shuffle(rng);
    Ok(slots.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn counts(plan: &[Vec<usize>]) -> BTreeMap<usize, usize> {
        let mut c = BTreeMap::new();
        for &i in plan.iter().flatten() {
            *c.entry(i).or_insert(0) += 1;
        }
        c
    }

    #[test]
    fn minority_class_is_repeated_to_parity() {
        let mut labels = vec![0u8; 10];
        labels.extend([1u8; 40]);
        let plan = build_epoch_plan(&labels, 4, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let c = counts(&plan);
        let real: usize = (0..10).map(|i| c[&i]).sum();
        let fake: usize = (10..50).map(|i| c[&i]).sum();
        assert_eq!((real, fake), (40, 40));
        assert!((0..10).all(|i| c[&i] == 4));
        assert!((10..50).all(|i| c[&i] == 1));
        assert_eq!(plan.len(), 20);

        let mut uneven = vec![0u8; 3];
        uneven.extend([1u8; 8]);
        let c = counts(&build_epoch_plan(&uneven, 4, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap());
        assert_eq!((0..3).map(|i| c[&i]).sum::<usize>(), 8);
        assert!((0..3).all(|i| (2..=3).contains(&c[&i])));
        // The set of distinct clips never changes.
        assert_eq!(c.len(), 11);
    }

    #[test]
    fn balanced_corpus_is_a_plain_shuffle() {
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let plan = build_epoch_plan(&labels, 3, true, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(counts(&plan).values().all(|&n| n == 1));
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 3, 3, 3, 3, 2]);
        let flat: Vec<usize> = plan.concat();
        assert_ne!(flat, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_plan_and_empty_class_rejected() {
        let labels = [0u8, 1, 1, 1, 0, 1];
        let a = build_epoch_plan(&labels, 2, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = build_epoch_plan(&labels, 2, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(build_epoch_plan(&[1, 1, 1], 2, true, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(build_epoch_plan(&[0, 1, 2], 2, true, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let plain = build_epoch_plan(&labels, 2, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(counts(&plain).len(), 6);
        assert_eq!(plain.concat().len(), 6);
    }
}
