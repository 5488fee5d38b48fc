//! Frozen feature library and exact k-nearest-neighbor search over it.
//!
//! Distances are Euclidean on raw representations. Neighbor order is
//! `(distance, row index)`, so ties always resolve to the lower index.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LIBRARY_MAGIC: &[u8; 4] = b"SATL";

/// Rows encoded per forward pass when building a library.
const ENCODE_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLibrary {
    reps: Vec<f64>,
    rep_dim: usize,
    labels: Vec<usize>,
    fingerprint: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnPrediction {
    pub label: usize,
    /// Neighbor row indices, nearest first.
    pub neighbors: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_dist(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl FeatureLibrary {
    pub fn new(
        reps: Vec<f64>,
        rep_dim: usize,
        labels: Vec<usize>,
        fingerprint: [u8; 32],
    ) -> Result<Self> {
        if rep_dim == 0 || reps.len() != labels.len() * rep_dim {
            return Err(Error::Data(format!(
                "library of {} values does not hold {} rows of width {rep_dim}",
                reps.len(),
                labels.len()
            )));
        }
        Ok(Self {
            reps,
            rep_dim,
            labels,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rep_dim(&self) -> usize {
        self.rep_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.reps[i * self.rep_dim..(i + 1) * self.rep_dim]
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    /// Same representations under different labels.
    pub fn relabel(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.reps.clone(), self.rep_dim, labels, self.fingerprint)
    }

    /// The selected rows as an `[m, rep_dim]` matrix.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.rep_dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), self.rep_dim, data).expect("rows have width rep_dim")
    }

    /// Fails unless the library was built from `model`.
    pub fn check_model(&self, model: &EncoderModel) -> Result<()> {
        if model.fingerprint() != self.fingerprint {
            return Err(Error::Model(
                "feature library was built from a different model".into(),
            ));
        }
        Ok(())
    }

    fn distances(&self, z: &[f64]) -> Result<Vec<(f64, usize)>> {
        if z.len() != self.rep_dim {
            return Err(Error::Data(format!(
                "query width {} does not match library width {}",
                z.len(),
                self.rep_dim
            )));
        }
        Ok(self
            .reps
            .chunks_exact(self.rep_dim)
            .enumerate()
            .map(|(i, row)| (sq_dist(row, z), i))
            .collect())
    }
}

/// Encodes every example of `dataset` with the frozen `model`.
pub fn build_library(model: &EncoderModel, dataset: &Dataset) -> Result<FeatureLibrary> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot build a feature library from an empty dataset".into()));
    }
    let rep_dim = model.rep_dim();
    let mut reps = Vec::with_capacity(dataset.len() * rep_dim);
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(ENCODE_CHUNK) {
        let z = model.encode(&dataset.batch(chunk))?;
        reps.extend_from_slice(z.data());
    }
    FeatureLibrary::new(reps, rep_dim, dataset.labels().to_vec(), model.fingerprint())
}

/// Majority vote among the `k` nearest library rows.
///
/// Vote ties go to the class whose tied neighbors have the smaller mean
/// distance, then to the lower class id.
pub fn knn_predict(library: &FeatureLibrary, z: &[f64], k: usize) -> Result<KnnPrediction> {
    if k == 0 || k > library.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            library.len()
        )));
    }
    let mut d = library.distances(z)?;
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, by_dist);
        d.truncate(k);
    }
    d.sort_unstable_by(by_dist);

    let classes = library.labels.iter().max().map_or(0, |&m| m + 1);
    let mut votes = vec![0usize; classes];
    let mut dist_sum = vec![0.0f64; classes];
    for &(dist, i) in &d {
        let l = library.labels[i];
        votes[l] += 1;
        dist_sum[l] += dist.sqrt();
    }
    let top = *votes.iter().max().expect("k >= 1");
    let label = (0..classes)
        .filter(|&c| votes[c] == top)
        .min_by(|&a, &b| {
            let ma = dist_sum[a] / top as f64;
            let mb = dist_sum[b] / top as f64;
            ma.total_cmp(&mb).then(a.cmp(&b))
        })
        .expect("at least one class has the top vote");
    Ok(KnnPrediction {
        label,
        neighbors: d.into_iter().map(|(_, i)| i).collect(),
    })
}

/// The `m` members of the nearest other class, nearest first.
///
/// The target class is the class other than `true_label`, among those with
/// at least `m` members, whose single closest member is closest to `z`.
pub fn nearest_group(
    library: &FeatureLibrary,
    z: &[f64],
    m: usize,
    true_label: usize,
) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::InvalidArgument("group size must be at least 1".into()));
    }
    let d = library.distances(z)?;
    let classes = library.labels.iter().max().map_or(0, |&c| c + 1);
    let mut counts = vec![0usize; classes];
    let mut closest: Vec<Option<(f64, usize)>> = vec![None; classes];
    for &(dist, i) in &d {
        let l = library.labels[i];
        counts[l] += 1;
        if closest[l].is_none_or(|c| by_dist(&(dist, i), &c) == Ordering::Less) {
            closest[l] = Some((dist, i));
        }
    }
    let target = (0..classes)
        .filter(|&c| c != true_label && counts[c] >= m)
        .filter_map(|c| closest[c].map(|best| (best, c)))
        .min_by(|a, b| by_dist(&a.0, &b.0).then(a.1.cmp(&b.1)))
        .map(|(_, c)| c)
        .ok_or_else(|| {
            Error::Data(format!(
                "no class other than {true_label} has at least {m} library members"
            ))
        })?;
    let mut members: Vec<(f64, usize)> = d
        .into_iter()
        .filter(|&(_, i)| library.labels[i] == target)
        .collect();
    if m < members.len() {
        members.select_nth_unstable_by(m - 1, by_dist);
        members.truncate(m);
    }
    members.sort_unstable_by(by_dist);
    Ok(members.into_iter().map(|(_, i)| i).collect())
}

pub fn encode_library(lib: &FeatureLibrary) -> Vec<u8> {
    let mut out = Vec::with_capacity(44 + lib.len() * (4 + 8 * lib.rep_dim));
    out.extend_from_slice(LIBRARY_MAGIC);
    out.extend_from_slice(&(lib.len() as u32).to_le_bytes());
    out.extend_from_slice(&(lib.rep_dim as u32).to_le_bytes());
    out.extend_from_slice(&lib.fingerprint);
    for &l in &lib.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for v in &lib.reps {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_library(bytes: &[u8]) -> Result<FeatureLibrary> {
    if bytes.len() < 44 || &bytes[..4] != LIBRARY_MAGIC {
        return Err(Error::Format("not a SATL library file".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let rep_dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let fingerprint: [u8; 32] = bytes[12..44].try_into().unwrap();
    let expected = 44 + 4 * n + 8 * n * rep_dim;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "library file is {} bytes, header promises {expected}",
            bytes.len()
        )));
    }
    let labels_end = 44 + 4 * n;
    let labels = bytes[44..labels_end]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    let reps = bytes[labels_end..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FeatureLibrary::new(reps, rep_dim, labels, fingerprint)
}

pub fn save_library(lib: &FeatureLibrary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_library(lib)).map_err(|e| Error::io(path, e))
}

pub fn load_library(path: impl AsRef<Path>) -> Result<FeatureLibrary> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_library(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderSpec, LayerSpec};

    fn lib(points: &[(f64, f64, usize)]) -> FeatureLibrary {
        let reps = points.iter().flat_map(|&(x, y, _)| [x, y]).collect();
        let labels = points.iter().map(|p| p.2).collect();
        FeatureLibrary::new(reps, 2, labels, [0; 32]).unwrap()
    }

    #[test]
    fn exact_match_with_k1() {
        let l = lib(&[(0.0, 0.0, 0), (1.0, 1.0, 1), (2.0, 0.0, 2)]);
        let p = knn_predict(&l, &[1.0, 1.0], 1).unwrap();
        assert_eq!(p.label, 1);
        assert_eq!(p.neighbors, vec![1]);
    }

    #[test]
    fn k_out_of_range() {
        let l = lib(&[(0.0, 0.0, 0), (1.0, 1.0, 1)]);
        assert!(knn_predict(&l, &[0.0, 0.0], 3).is_err());
        assert!(knn_predict(&l, &[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn distance_ties_prefer_lower_index() {
        let l = lib(&[(1.0, 0.0, 1), (-1.0, 0.0, 0), (0.0, 1.0, 0)]);
        let p = knn_predict(&l, &[0.0, 0.0], 1).unwrap();
        assert_eq!(p.neighbors, vec![0]);
        assert_eq!(p.label, 1);
    }

    #[test]
    fn vote_ties_prefer_smaller_mean_distance() {
        // k = 2: one neighbor of each class; class 1 is closer
        let l = lib(&[(3.0, 0.0, 0), (1.0, 0.0, 1), (9.0, 9.0, 0)]);
        let p = knn_predict(&l, &[0.0, 0.0], 2).unwrap();
        assert_eq!(p.label, 1);
        // equal distances and votes: lower class id
        let l = lib(&[(0.0, 1.0, 1), (0.0, -1.0, 0)]);
        let p = knn_predict(&l, &[0.0, 0.0], 2).unwrap();
        assert_eq!(p.label, 0);
    }

    #[test]
    fn nearest_group_two_classes_m1() {
        let l = lib(&[(0.0, 0.0, 0), (0.5, 0.0, 1), (0.2, 0.0, 1), (0.1, 0.0, 0)]);
        assert_eq!(nearest_group(&l, &[0.0, 0.0], 1, 0).unwrap(), vec![2]);
    }

    #[test]
    fn nearest_group_whole_class_sorted() {
        let l = lib(&[(0.0, 0.0, 0), (0.9, 0.0, 1), (0.2, 0.0, 1), (0.5, 0.0, 1)]);
        assert_eq!(nearest_group(&l, &[0.0, 0.0], 3, 0).unwrap(), vec![2, 3, 1]);
    }

    #[test]
    fn nearest_group_skips_small_classes() {
        // class 1 is closest but has a single member
        let l = lib(&[(0.0, 0.0, 0), (0.1, 0.0, 1), (2.0, 0.0, 2), (3.0, 0.0, 2)]);
        assert_eq!(nearest_group(&l, &[0.0, 0.0], 2, 0).unwrap(), vec![2, 3]);
        assert!(nearest_group(&l, &[0.0, 0.0], 3, 0).is_err());
    }

    #[test]
    fn identity_encoder_library_equals_examples() {
        let spec = EncoderSpec::new(vec![LayerSpec::linear(2, 2)]);
        let mut m = EncoderModel::zeros(&spec).unwrap();
        m.body_mut()
            .set_layer(
                0,
                Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                Tensor::zeros(vec![2]),
            )
            .unwrap();
        let ds = Dataset::new(vec![0.1, 0.2, 0.3, 0.4], vec![0, 1], 2, 2, "t").unwrap();
        let l = build_library(&m, &ds).unwrap();
        assert_eq!(l.row(0), &[0.1, 0.2]);
        assert_eq!(l.row(1), &[0.3, 0.4]);
        assert!(l.check_model(&m).is_ok());
        assert_eq!(l, build_library(&m, &ds).unwrap());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let m = EncoderModel::init(&EncoderSpec::default_for(2), 0).unwrap();
        let ds = Dataset::new(vec![], vec![], 2, 2, "t").unwrap();
        assert!(build_library(&m, &ds).is_err());
    }

    #[test]
    fn library_file_round_trip() {
        let l = lib(&[(0.25, -1.5, 0), (3.0, 1e-300, 4)]);
        let bytes = encode_library(&l);
        assert_eq!(decode_library(&bytes).unwrap(), l);
        assert!(decode_library(&bytes[..bytes.len() - 1]).is_err());
    }
}
