//! Exact k-nearest-neighbour classification in feature space.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Knn {
    pub k: usize,
    features: Vec<Vec<f32>>,
    labels: Vec<usize>,
    classes: usize,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum()
}

impl Knn {
    pub fn fit(features: Vec<Vec<f32>>, labels: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} features for {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::dim("features of unequal length"));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Knn {
            k,
            features,
            labels,
            classes,
        })
    }

    /// Every class ranked for `query`: by votes among the `k` nearest
    /// neighbours, then by nearest distance to the class, then by index.
    pub fn rank(&self, query: &[f32]) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = self
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| (sq_dist(f, query), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; self.classes];
        for (_, i) in order.iter().take(self.k) {
            votes[self.labels[*i]] += 1;
        }
        let mut nearest = vec![f64::INFINITY; self.classes];
        for (d, i) in &order {
            let c = self.labels[*i];
            if nearest[c].is_infinite() {
                nearest[c] = *d;
            }
        }
        let mut ranked: Vec<usize> = (0..self.classes)
            .filter(|c| nearest[*c].is_finite())
            .collect();
        ranked.sort_by(|a, b| {
            votes[*b]
                .cmp(&votes[*a])
                .then(nearest[*a].total_cmp(&nearest[*b]))
                .then(a.cmp(b))
        });
        ranked
    }
}
