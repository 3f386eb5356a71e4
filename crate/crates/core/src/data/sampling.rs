use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Modality, SampleRecord, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotSpec {
    /// Zero disables few-shot subsetting.
    pub shots_per_class: usize,
    pub seed: u64,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        Self { shots_per_class: 0, seed: 0 }
    }
}

/// Keeps `K` seeded train records per category (all test records pass through)
/// and marks the kept train records for online augmentation.
pub fn few_shot_subset(records: &[SampleRecord], spec: &FewShotSpec) -> Result<Vec<SampleRecord>> {
    let k = spec.shots_per_class;
    if k == 0 {
        return Err(Error::config("few-shot subsetting needs shots_per_class >= 1"));
    }
    let mut by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate().filter(|(_, r)| r.split == Split::Train) {
        by_cat.entry(r.category.as_str()).or_default().push(i);
    }
    let short: Vec<String> =
        by_cat.iter().filter(|(_, v)| v.len() < k).map(|(c, v)| format!("{c} ({} available)", v.len())).collect();
    if !short.is_empty() {
        return Err(Error::Data(format!("fewer than {k} training images for {}", short.join(", "))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut keep = vec![false; records.len()];
    for idx in by_cat.values_mut() {
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            keep[i] = true;
        }
    }
    Ok(records
        .iter()
        .enumerate()
        .filter(|(i, r)| r.split == Split::Test || keep[*i])
        .map(|(_, r)| {
            let mut r = r.clone();
            r.augment = r.split == Split::Train;
            r
        })
        .collect())
}

/// Views and modalities of one physical object.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectGroup {
    pub object_id: String,
    pub category: String,
    /// Maximum over member labels.
    pub label: u8,
    pub members: Vec<SampleRecord>,
}

impl ObjectGroup {
    pub fn modalities(&self) -> Vec<Modality> {
        let mut m: Vec<Modality> = self.members.iter().map(|r| r.modality).collect();
        m.sort();
        m.dedup();
        m
    }
}

/// Groups records by `object_id` in order of first appearance; records
/// without one form singleton groups keyed by their own id.
pub fn group_views(records: &[SampleRecord]) -> Result<Vec<ObjectGroup>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, ObjectGroup> = BTreeMap::new();
    for r in records {
        let key = r.object_id.clone().unwrap_or_else(|| r.id.clone());
        match groups.get_mut(&key) {
            Some(g) => {
                if g.category != r.category {
                    return Err(Error::Data(format!(
                        "object {key} mixes categories {} and {}",
                        g.category, r.category
                    )));
                }
                g.label = g.label.max(r.label);
                g.members.push(r.clone());
            }
            None => {
                order.push(key.clone());
                groups.insert(
                    key.clone(),
                    ObjectGroup { object_id: key, category: r.category.clone(), label: r.label, members: vec![r.clone()] },
                );
            }
        }
    }
    Ok(order.into_iter().map(|k| groups.remove(&k).expect("inserted above")).collect())
}

/// Seeded stream of exactly `iterations` batches of record indices.
///
/// Indices are drawn without replacement from a shuffled epoch; a batch that
/// straddles an epoch boundary continues into the next reshuffled epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pool: usize,
    batch_size: usize,
    remaining: usize,
    rng: ChaCha8Rng,
    epoch: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    /// Rejects empty pools and anomalous training samples.
    pub fn new(records: &[SampleRecord], batch_size: usize, seed: u64, iterations: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("cannot sample batches from an empty training set".into()));
        }
        if batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if let Some(r) = records.iter().find(|r| r.label != 0) {
            return Err(Error::Data(format!("anomalous sample {} offered for training", r.id)));
        }
        Ok(Self::over(records.len(), batch_size, seed, iterations))
    }

    /// Sampler over indices `0..pool` without record checks.
    pub fn over(pool: usize, batch_size: usize, seed: u64, iterations: usize) -> Self {
        Self {
            pool,
            batch_size,
            remaining: iterations,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: Vec::new(),
            cursor: 0,
        }
    }

    /// Advances past `n` batches, as after resuming at iteration `n`.
    pub fn skip_batches(&mut self, n: usize) {
        for _ in 0..n {
            if self.next().is_none() {
                break;
            }
        }
    }
}

impl Iterator for BatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if self.cursor == self.epoch.len() {
                self.epoch = (0..self.pool).collect();
                self.epoch.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.epoch[self.cursor]);
            self.cursor += 1;
        }
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn rec(id: &str, cat: &str, split: Split, label: u8, obj: Option<&str>, modality: Modality) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            image_path: PathBuf::from(format!("{id}.png")),
            category: cat.into(),
            split,
            label,
            mask_path: None,
            view: None,
            modality,
            object_id: obj.map(Into::into),
            augment: false,
        }
    }

    fn train_set(classes: usize, per: usize) -> Vec<SampleRecord> {
        (0..classes)
            .flat_map(|c| (0..per).map(move |i| rec(&format!("c{c}/{i}"), &format!("c{c}"), Split::Train, 0, None, Modality::Rgb)))
            .collect()
    }

    #[test]
    fn few_shot_counts_and_determinism() {
        let recs = train_set(15, 10);
        let spec = FewShotSpec { shots_per_class: 4, seed: 3 };
        let a = few_shot_subset(&recs, &spec).unwrap();
        assert_eq!(a.len(), 60);
        assert!(a.iter().all(|r| r.augment));
        assert_eq!(a, few_shot_subset(&recs, &spec).unwrap());
        let full = few_shot_subset(&recs, &FewShotSpec { shots_per_class: 10, seed: 9 }).unwrap();
        assert_eq!(full.iter().map(|r| &r.id).collect::<Vec<_>>(), recs.iter().map(|r| &r.id).collect::<Vec<_>>());
        match few_shot_subset(&recs, &FewShotSpec { shots_per_class: 11, seed: 0 }) {
            Err(Error::Data(m)) => assert!(m.contains("c0") && m.contains("c14")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grouping_rules() {
        let views: Vec<_> =
            (0..5).map(|v| rec(&format!("v{v}"), "gear", Split::Test, 0, Some("o1"), Modality::Rgb)).collect();
        let g = group_views(&views).unwrap();
        assert_eq!((g.len(), g[0].label, g[0].members.len()), (1, 0, 5));
        let mut bad = views.clone();
        bad[3].label = 1;
        assert_eq!(group_views(&bad).unwrap()[0].label, 1);
        let pair = vec![
            rec("rgb", "cup", Split::Test, 0, Some("p"), Modality::Rgb),
            rec("ir", "cup", Split::Test, 1, Some("p"), Modality::Ir),
            rec("solo", "cup", Split::Test, 0, None, Modality::Rgb),
        ];
        let g = group_views(&pair).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].modalities(), vec![Modality::Rgb, Modality::Ir]);
        assert_eq!(g[1].object_id, "solo");
        let mixed = vec![rec("a", "cup", Split::Test, 0, Some("x"), Modality::Rgb), rec("b", "mug", Split::Test, 0, Some("x"), Modality::Rgb)];
        assert!(matches!(group_views(&mixed), Err(Error::Data(_))));
    }

    #[test]
    fn sampler_stream() {
        let recs = train_set(3, 7);
        let batches: Vec<_> = BatchSampler::new(&recs, 16, 5, 100).unwrap().collect();
        assert_eq!(batches.len(), 100);
        assert!(batches.iter().all(|b| b.len() == 16 && b.iter().all(|&i| i < 21)));
        let again: Vec<_> = BatchSampler::new(&recs, 16, 5, 100).unwrap().collect();
        assert_eq!(batches, again);
        // every epoch is a permutation
        let flat: Vec<usize> = batches.concat();
        for epoch in flat.chunks_exact(21).take(10) {
            let mut e = epoch.to_vec();
            e.sort_unstable();
            assert_eq!(e, (0..21).collect::<Vec<_>>());
        }
        let mut skipped = BatchSampler::new(&recs, 16, 5, 100).unwrap();
        skipped.skip_batches(40);
        assert_eq!(skipped.next().unwrap(), batches[40]);
    }

    #[test]
    fn sampler_rejects_anomalies_and_empty_sets() {
        let mut recs = train_set(1, 4);
        assert!(BatchSampler::new(&[], 4, 0, 1).is_err());
        recs[2].label = 1;
        assert!(matches!(BatchSampler::new(&recs, 2, 0, 3), Err(Error::Data(_))));
    }
}
