//! Pretraining and personalization datasets: isotropic Gaussian classes at
//! the vertices of a regular pentagon, plus a new class for finetuning.
//!
//! Defaults follow the toy protocol: 1000 samples per class, std 0.5,
//! pentagon radius 4.0 (well-separated modes), new class 5 at the origin.

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PENTAGON_CLASSES: usize = 5;
pub const NEW_CLASS_ID: usize = 5;
pub const DEFAULT_RADIUS: f64 = 4.0;
pub const DEFAULT_STD: f64 = 0.5;
pub const DEFAULT_N_PER_CLASS: usize = 1000;

/// 2D points with integer class labels and the generating mixture geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub class_means: Vec<[f64; 2]>,
    pub class_std: f64,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points belonging to one class.
    pub fn class_points(&self, class: usize) -> Vec<[f64; 2]> {
        self.points
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == class)
            .map(|(p, _)| *p)
            .collect()
    }

    /// Subset containing only the given class, keeping the mean table.
    pub fn filter_class(&self, class: usize) -> LabeledDataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
        LabeledDataset {
            points: keep.iter().map(|&i| self.points[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            class_means: self.class_means.clone(),
            class_std: self.class_std,
        }
    }
}

/// Mean of pentagon class `k` at the given radius: the first vertex points up
/// and the rest follow at 72-degree increments.
pub fn pentagon_mean(k: usize, radius: f64) -> [f64; 2] {
    let angle = 2.0 * std::f64::consts::PI * k as f64 / PENTAGON_CLASSES as f64
        + std::f64::consts::FRAC_PI_2;
    [radius * angle.cos(), radius * angle.sin()]
}

/// Five Gaussian classes (labels 0..4) at regular pentagon vertices.
pub fn pentagon_dataset(
    n_per_class: usize,
    radius: f64,
    std: f64,
    rng: &mut Rng,
) -> Result<LabeledDataset> {
    if n_per_class < 1 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }
    if radius <= 0.0 || std <= 0.0 {
        return Err(Error::Config("radius and std must be > 0".into()));
    }
    let class_means: Vec<[f64; 2]> = (0..PENTAGON_CLASSES)
        .map(|k| pentagon_mean(k, radius))
        .collect();
    let mut points = Vec::with_capacity(PENTAGON_CLASSES * n_per_class);
    let mut labels = Vec::with_capacity(PENTAGON_CLASSES * n_per_class);
    for (k, mean) in class_means.iter().enumerate() {
        for _ in 0..n_per_class {
            let z = rng.normal2();
            points.push([mean[0] + std * z[0], mean[1] + std * z[1]]);
            labels.push(k);
        }
    }
    Ok(LabeledDataset {
        points,
        labels,
        class_means,
        class_std: std,
    })
}

/// `n` isotropic Gaussian points around `mean`, all carrying `label`.
pub fn new_class_dataset(
    n: usize,
    mean: [f64; 2],
    std: f64,
    label: usize,
    rng: &mut Rng,
) -> Result<LabeledDataset> {
    if std <= 0.0 {
        return Err(Error::Config("std must be > 0".into()));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let z = rng.normal2();
        points.push([mean[0] + std * z[0], mean[1] + std * z[1]]);
    }
    let mut class_means = vec![[0.0, 0.0]; label + 1];
    class_means[label] = mean;
    Ok(LabeledDataset {
        labels: vec![label; n],
        points,
        class_means,
        class_std: std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pentagon_counts_and_labels() {
        let mut rng = Rng::for_phase(1, "data");
        let ds = pentagon_dataset(1000, 4.0, 0.5, &mut rng).unwrap();
        assert_eq!(ds.len(), 5000);
        for k in 0..5 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == k).count(), 1000);
        }
    }

    #[test]
    fn pentagon_single_point_per_class() {
        let mut rng = Rng::for_phase(2, "data");
        let ds = pentagon_dataset(1, 4.0, 0.5, &mut rng).unwrap();
        assert_eq!(ds.labels, vec![0, 1, 2, 3, 4]);
        for (p, &l) in ds.points.iter().zip(&ds.labels) {
            let m = ds.class_means[l];
            let d = ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt();
            assert!(d < 5.0 * 0.5, "class {l} point {d} away from its mean");
        }
    }

    #[test]
    fn pentagon_symmetry_is_exact() {
        let means: Vec<[f64; 2]> = (0..5).map(|k| pentagon_mean(k, 4.0)).collect();
        for m in &means {
            let r = (m[0] * m[0] + m[1] * m[1]).sqrt();
            assert!((r - 4.0).abs() < 1e-12);
        }
        for k in 0..5 {
            let a = means[k];
            let b = means[(k + 1) % 5];
            let dot = (a[0] * b[0] + a[1] * b[1]) / 16.0;
            let expect = (2.0 * std::f64::consts::PI / 5.0).cos();
            assert!((dot - expect).abs() < 1e-12, "adjacent angle off at {k}");
        }
        // Adjacent means sit farther apart than 9 stds of 0.5.
        let d01 = ((means[0][0] - means[1][0]).powi(2) + (means[0][1] - means[1][1]).powi(2))
            .sqrt();
        assert!(d01 > 9.0 * 0.5);
    }

    #[test]
    fn per_class_moments_match_monte_carlo() {
        let mut rng = Rng::for_phase(3, "data");
        let n = 20_000;
        let ds = pentagon_dataset(n, 4.0, 0.5, &mut rng).unwrap();
        for k in 0..5 {
            let pts = ds.class_points(k);
            let mean_x: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / n as f64;
            let mean_y: f64 = pts.iter().map(|p| p[1]).sum::<f64>() / n as f64;
            let m = ds.class_means[k];
            assert!((mean_x - m[0]).abs() < 3.0 * 0.5 / (n as f64).sqrt() * 3.0);
            assert!((mean_y - m[1]).abs() < 3.0 * 0.5 / (n as f64).sqrt() * 3.0);
            let var_x: f64 = pts.iter().map(|p| (p[0] - mean_x).powi(2)).sum::<f64>() / n as f64;
            let var_y: f64 = pts.iter().map(|p| (p[1] - mean_y).powi(2)).sum::<f64>() / n as f64;
            let cov_xy: f64 = pts
                .iter()
                .map(|p| (p[0] - mean_x) * (p[1] - mean_y))
                .sum::<f64>()
                / n as f64;
            assert!((var_x - 0.25).abs() < 0.05 * 0.25, "class {k} var_x {var_x}");
            assert!((var_y - 0.25).abs() < 0.05 * 0.25, "class {k} var_y {var_y}");
            assert!(cov_xy.abs() < 0.05 * 0.25, "class {k} cov {cov_xy}");
        }
    }

    #[test]
    fn new_class_basics() {
        let mut rng = Rng::for_phase(4, "data");
        let ds = new_class_dataset(1000, [0.0, 0.0], 0.5, NEW_CLASS_ID, &mut rng).unwrap();
        assert_eq!(ds.len(), 1000);
        assert!(ds.labels.iter().all(|&l| l == 5));
        let mean_x: f64 = ds.points.iter().map(|p| p[0]).sum::<f64>() / 1000.0;
        let mean_y: f64 = ds.points.iter().map(|p| p[1]).sum::<f64>() / 1000.0;
        // SE = 0.5/sqrt(1000) ~ 0.0158; 0.05 is ~3 sigma.
        assert!(mean_x.abs() < 0.05 && mean_y.abs() < 0.05);

        let empty = new_class_dataset(0, [1.0, 1.0], 0.5, 5, &mut rng).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn generation_is_pure_in_seed_and_parameters() {
        let a = pentagon_dataset(100, 4.0, 0.5, &mut Rng::for_phase(9, "data")).unwrap();
        let b = pentagon_dataset(100, 4.0, 0.5, &mut Rng::for_phase(9, "data")).unwrap();
        assert_eq!(a, b);
    }
}
