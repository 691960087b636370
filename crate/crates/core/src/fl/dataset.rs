use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::chacha;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Idx,
    Synthetic,
}

/// Row-major feature matrix in `[0, 1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
    source: DataSource,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize, source: DataSource) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Dataset("dataset has no samples".into()));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Dataset(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {classes} classes")));
        }
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset("feature values must lie in [0, 1]".into()));
        }
        Ok(Self { features, labels, dim, classes, source })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn source(&self) -> DataSource {
        self.source
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.dim, self.classes, self.source)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Dataset(format!("{what}: truncated header")))
}

/// Reads an IDX image file (magic `0x803`, `u8` pixels, scaled by 1/255) and
/// its label file (magic `0x801`).
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;
    let name = images.display().to_string();
    if be_u32(&img, 0, &name)? != 0x803 {
        return Err(Error::Dataset(format!("{name}: not an IDX image file")));
    }
    let n = be_u32(&img, 4, &name)? as usize;
    let rows = be_u32(&img, 8, &name)? as usize;
    let cols = be_u32(&img, 12, &name)? as usize;
    let dim = rows * cols;
    if img.len() != 16 + n * dim {
        return Err(Error::Dataset(format!("{name}: expected {} pixel bytes, found {}", n * dim, img.len() - 16)));
    }
    let lname = labels.display().to_string();
    if be_u32(&lab, 0, &lname)? != 0x801 {
        return Err(Error::Dataset(format!("{lname}: not an IDX label file")));
    }
    let ln = be_u32(&lab, 4, &lname)? as usize;
    if ln != n || lab.len() != 8 + n {
        return Err(Error::Dataset(format!("{lname}: {ln} labels for {n} images")));
    }
    let features = img[16..].iter().map(|&p| p as f64 / 255.0).collect();
    let labels = lab[8..].iter().map(|&y| y as usize).collect();
    Dataset::new(features, labels, dim, classes, DataSource::Idx)
}

/// Writes `ds` as an IDX pair with a single row of pixels per image.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let mut img = Vec::with_capacity(16 + ds.features.len());
    for v in [0x803u32, ds.len() as u32, 1, ds.dim as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.features.iter().map(|v| (v * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [0x801u32, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|&y| y as u8));
    fs::write(images, img)?;
    fs::write(labels, lab)?;
    Ok(())
}

/// Seeded Gaussian-mixture corpus: one random centre per class in
/// `[0.2, 0.8]^d`, isotropic noise, values clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub train: usize,
    pub test: usize,
    pub dim: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { train: 6000, test: 1000, dim: 64, classes: 10, noise: 0.35, seed: 0 }
    }
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 || spec.dim == 0 || spec.train == 0 || spec.test == 0 {
        return Err(Error::Dataset("synthetic corpus needs positive sizes".into()));
    }
    if !spec.noise.is_finite() || spec.noise < 0.0 {
        return Err(Error::Dataset(format!("invalid noise level {}", spec.noise)));
    }
    let mut rng = chacha(spec.seed);
    let centres: Vec<f64> = (0..spec.classes * spec.dim)
        .map(|_| 0.2 + 0.6 * rand::Rng::random::<f64>(&mut rng))
        .collect();
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut draw = |n: usize| {
        let mut features = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % spec.classes;
            for j in 0..spec.dim {
                let v = centres[y * spec.dim + j] + if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                features.push(v.clamp(0.0, 1.0));
            }
            labels.push(y);
        }
        Dataset::new(features, labels, spec.dim, spec.classes, DataSource::Synthetic)
    };
    let train = draw(spec.train)?;
    let test = draw(spec.test)?;
    Ok((train, test))
}

/// Classes held by client `u`: `{2u, 2u+1, 2u+2} mod C`.
pub fn client_classes(u: usize, classes: usize) -> [usize; 3] {
    [(2 * u) % classes, (2 * u + 1) % classes, (2 * u + 2) % classes]
}

/// Disjoint shards for `users` clients under the sliding three-class rule.
/// Samples of a class claimed by several clients are shuffled (seeded) and
/// dealt out in near-equal contiguous parts, lowest client id first.
pub fn partition_dataset(ds: &Dataset, users: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let c = ds.classes();
    if c < 3 {
        return Err(Error::Partition(format!("the three-class partition needs at least 3 classes, got {c}")));
    }
    if users == 0 {
        return Err(Error::Partition("at least one client is required".into()));
    }
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); c];
    for u in 0..users {
        for k in client_classes(u, c) {
            if !owners[k].contains(&u) {
                owners[k].push(u);
            }
        }
    }
    let mut shards = vec![Vec::new(); users];
    let mut rng = chacha(seed);
    for (k, who) in owners.iter().enumerate() {
        if who.is_empty() {
            continue;
        }
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == k).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let parts = who.len();
        let mut start = 0;
        for (p, &u) in who.iter().enumerate() {
            let size = n / parts + usize::from(p < n % parts);
            shards[u].extend_from_slice(&members[start..start + size]);
            start += size;
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, classes: usize) -> Dataset {
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        Dataset::new(vec![0.5; n], labels, 1, classes, DataSource::Synthetic).unwrap()
    }

    #[test]
    fn paper_partition_classes() {
        assert_eq!(client_classes(0, 10), [0, 1, 2]);
        assert_eq!(client_classes(4, 10), [8, 9, 0]);
    }

    #[test]
    fn shards_are_disjoint_and_shared_classes_split_evenly() {
        let ds = tiny(1001, 10);
        let shards = partition_dataset(&ds, 5, 3).unwrap();
        let mut seen = vec![false; ds.len()];
        for s in &shards {
            for &i in s {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        let class0 = |u: usize| shards[u].iter().filter(|&&i| ds.label(i) == 0).count();
        assert!(class0(0).abs_diff(class0(4)) <= 1);
        assert_eq!(class0(0) + class0(4), 101);
        for u in 0..5 {
            let want = client_classes(u, 10);
            assert!(shards[u].iter().all(|&i| want.contains(&ds.label(i))));
        }
    }

    #[test]
    fn too_few_classes() {
        assert!(matches!(partition_dataset(&tiny(10, 2), 2, 0), Err(Error::Partition(_))));
    }

    #[test]
    fn rejects_bad_data() {
        assert!(Dataset::new(vec![1.5], vec![0], 1, 2, DataSource::Idx).is_err());
        assert!(Dataset::new(vec![0.5], vec![3], 1, 2, DataSource::Idx).is_err());
        assert!(Dataset::new(vec![], vec![], 1, 2, DataSource::Idx).is_err());
    }

    #[test]
    fn idx_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = synthetic(&SyntheticSpec { train: 30, test: 5, dim: 6, ..Default::default() }).unwrap();
        let (a, b) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&train, &a, &b).unwrap();
        let back = load_idx(&a, &b, 10).unwrap();
        assert_eq!(back.labels(), train.labels());
        for i in 0..train.len() {
            for (x, y) in back.row(i).iter().zip(train.row(i)) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        let mut bytes = std::fs::read(&a).unwrap();
        bytes[3] = 0x01;
        std::fs::write(&a, bytes).unwrap();
        assert!(matches!(load_idx(&a, &b, 10), Err(Error::Dataset(_))));
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SyntheticSpec { train: 50, test: 10, dim: 4, ..Default::default() };
        assert_eq!(synthetic(&spec).unwrap(), synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(synthetic(&spec).unwrap().0, synthetic(&other).unwrap().0);
    }
}
