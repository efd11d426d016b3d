use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// k-nearest-neighbor classifier with Euclidean distance. Votes are
/// counted over the `k` closest training points (earlier points win
/// distance ties); vote ties go to the smallest label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    k: usize,
    dims: usize,
    points: Vec<(Vec<f64>, usize)>,
}

impl KnnModel {
    pub fn train(dataset: Vec<(Vec<f64>, usize)>, k: usize) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Data("kNN training set is empty".into()));
        }
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::Config(format!("k = {k} must be odd")));
        }
        if k > dataset.len() {
            return Err(Error::Config(format!("k = {k} exceeds {} training points", dataset.len())));
        }
        let dims = dataset[0].0.len();
        if let Some((v, _)) = dataset.iter().find(|(v, _)| v.len() != dims) {
            return Err(Error::Dimension {
                expected: dims,
                got: v.len(),
            });
        }
        Ok(KnnModel { k, dims, points: dataset })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn classify(&self, v: &[f64]) -> Result<usize> {
        let votes = self.votes(v)?;
        let best = votes.iter().map(|(_, n)| *n).max().unwrap_or(0);
        Ok(votes.iter().filter(|(_, n)| *n == best).map(|(l, _)| *l).min().unwrap())
    }

    /// Labels among the `k` nearest points with their vote counts.
    pub fn votes(&self, v: &[f64]) -> Result<Vec<(usize, usize)>> {
        if v.len() != self.dims {
            return Err(Error::Dimension {
                expected: self.dims,
                got: v.len(),
            });
        }
        let mut dist: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, (p, _))| (squared_distance(p, v), i))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes: Vec<(usize, usize)> = Vec::new();
        for (_, i) in dist.into_iter().take(self.k) {
            let label = self.points[i].1;
            match votes.iter_mut().find(|(l, _)| *l == label) {
                Some((_, n)) => *n += 1,
                None => votes.push((label, 1)),
            }
        }
        Ok(votes)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_cluster_wins() {
        let data = vec![
            (vec![0.0, 0.0], 0),
            (vec![0.1, 0.0], 0),
            (vec![0.0, 0.2], 0),
            (vec![5.0, 5.0], 1),
            (vec![5.1, 4.9], 1),
            (vec![4.9, 5.2], 1),
        ];
        let m = KnnModel::train(data, 3).unwrap();
        assert_eq!(m.classify(&[0.3, 0.1]).unwrap(), 0);
        assert_eq!(m.classify(&[4.0, 4.0]).unwrap(), 1);
    }

    #[test]
    fn vote_tie_goes_to_smallest_label() {
        let data = vec![(vec![0.0], 2), (vec![1.0], 1), (vec![-1.0], 0)];
        let m = KnnModel::train(data, 3).unwrap();
        assert_eq!(m.classify(&[0.0]).unwrap(), 0);
    }

    #[test]
    fn training_preconditions() {
        assert!(KnnModel::train(vec![], 1).is_err());
        assert!(KnnModel::train(vec![(vec![0.0], 0), (vec![1.0], 1)], 2).is_err());
        assert!(KnnModel::train(vec![(vec![0.0], 0)], 3).is_err());
        assert!(matches!(
            KnnModel::train(vec![(vec![0.0], 0), (vec![0.0, 1.0], 1), (vec![2.0], 0)], 1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_on_classify() {
        let m = KnnModel::train(vec![(vec![0.0, 0.0], 0)], 1).unwrap();
        assert!(matches!(m.classify(&[1.0]), Err(Error::Dimension { expected: 2, got: 1 })));
    }
}
