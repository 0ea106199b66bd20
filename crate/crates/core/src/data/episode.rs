use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Sample indices grouped by class; classes iterate in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePool {
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl SamplePool {
    pub fn new(by_class: BTreeMap<usize, Vec<usize>>) -> Result<Self> {
        if by_class.is_empty() {
            return Err(invalid!("sample pool has no classes"));
        }
        Ok(Self { by_class })
    }

    pub fn classes(&self) -> Vec<usize> {
        self.by_class.keys().copied().collect()
    }

    pub fn samples(&self, class: usize) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn all_samples(&self) -> Vec<usize> {
        self.by_class.values().flatten().copied().collect()
    }
}

/// One few-shot task, as indices into the dataset's sample list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub class_id: usize,
    pub query: usize,
    pub supports: Vec<usize>,
}

/// Picks a class uniformly, then `k + 1` distinct samples of it; the first
/// is the query.
pub fn sample_episode(pool: &SamplePool, k: usize, rng: &mut impl Rng) -> Result<Episode> {
    if k == 0 {
        return Err(invalid!("k must be at least 1"));
    }
    let classes = pool.classes();
    let class_id = classes[rng.gen_range(0..classes.len())];
    let members = pool.samples(class_id);
    if members.len() < k + 1 {
        return Err(invalid!(
            "class {class_id} has {} samples, a {k}-shot episode needs {}",
            members.len(),
            k + 1
        ));
    }
    let picked = sample(rng, members.len(), k + 1);
    let mut it = picked.iter().map(|i| members[i]);
    let query = it.next().expect("k + 1 ≥ 2");
    Ok(Episode {
        class_id,
        query,
        supports: it.collect(),
    })
}

/// `p0 · 2^(−epoch / half_life)`.
pub fn switch_prob_schedule(epoch: usize, p0: f64, half_life: f64) -> f64 {
    p0 * (-(epoch as f64) / half_life).exp2()
}

/// With probability `switch_prob`, replaces every channel with the
/// per-pixel channel mean. Returns the image and whether the switch fired.
/// A draw is consumed on every call so the random stream does not depend
/// on the probability.
pub fn ica_augment(image: &Tensor, switch_prob: f64, rng: &mut impl Rng) -> Result<(Tensor, bool)> {
    if !(0.0..=1.0).contains(&switch_prob) {
        return Err(invalid!("switch probability {switch_prob} is outside [0,1]"));
    }
    let (c, h, w) = image.chw()?;
    let fire = rng.gen::<f64>() < switch_prob;
    if !fire {
        return Ok((image.clone(), false));
    }
    let n = h * w;
    let d = image.data();
    let mut out = vec![0.0f32; c * n];
    for i in 0..n {
        let mean = ((0..c).map(|ch| d[ch * n + i] as f64).sum::<f64>() / c as f64) as f32;
        for ch in 0..c {
            out[ch * n + i] = mean;
        }
    }
    Ok((Tensor::new(image.shape().to_vec(), out)?, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool() -> SamplePool {
        let mut m = BTreeMap::new();
        m.insert(2, (0..10).collect());
        m.insert(4, (10..16).collect());
        SamplePool::new(m).unwrap()
    }

    #[test]
    fn episodes_are_distinct_and_reproducible() {
        let p = pool();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 5] {
            let e = sample_episode(&p, k, &mut a).unwrap();
            assert_eq!(e, sample_episode(&p, k, &mut b).unwrap());
            assert_eq!(e.supports.len(), k);
            let mut ids = e.supports.clone();
            ids.push(e.query);
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), k + 1);
            assert!(ids.iter().all(|i| p.samples(e.class_id).contains(i)));
        }
        let small = SamplePool::new(BTreeMap::from([(4, (10..16).collect())])).unwrap();
        assert!(sample_episode(&small, 5, &mut a).is_ok());
        assert!(sample_episode(&small, 6, &mut a).is_err());
        assert!(sample_episode(&p, 0, &mut a).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(switch_prob_schedule(0, 0.25, 45.0), 0.25);
        assert_eq!(switch_prob_schedule(45, 0.25, 45.0), 0.125);
        assert!(switch_prob_schedule(46, 0.25, 45.0) < switch_prob_schedule(45, 0.25, 45.0));
    }

    #[test]
    fn ica_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::from_fn(&[3, 4, 4], |i| (i as f32 * 0.37).sin());
        let (same, fired) = ica_augment(&img, 0.0, &mut rng).unwrap();
        assert!(!fired);
        assert_eq!(same, img);
        let (gray, fired) = ica_augment(&img, 1.0, &mut rng).unwrap();
        assert!(fired);
        let d = gray.data();
        for i in 0..16 {
            assert_eq!(d[i], d[16 + i]);
            assert_eq!(d[i], d[32 + i]);
        }
        let (again, _) = ica_augment(&gray, 1.0, &mut rng).unwrap();
        assert_eq!(again, gray);
        assert!(ica_augment(&img, 1.5, &mut rng).is_err());
    }
}
