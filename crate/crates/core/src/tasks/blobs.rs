use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{Dataset, Geometry, Split, TaskKind, TaskSpec};
use crate::autodiff::RngStream;
use crate::error::{Result, SpgError};

fn blob_params(spec: &TaskSpec) -> Result<(usize, usize, f64, Vec<f64>)> {
    spec.validate()?;
    match &spec.geometry {
        Geometry::Blobs {
            classes,
            dim,
            separation,
            scales,
        } => {
            let sigma = if scales.is_empty() {
                vec![spec.noise; *dim]
            } else {
                scales.iter().map(|s| s * spec.noise).collect()
            };
            Ok((*classes, *dim, *separation, sigma))
        }
        _ => Err(SpgError::invalid("not a blobs task")),
    }
}

/// Balanced Gaussian clusters. Sample `i` belongs to class `i mod K`; class
/// `k` is centred at `separation * e_k` with diagonal covariance.
pub fn gen_blobs_classification(spec: &TaskSpec, split: Split) -> Result<Dataset> {
    let (classes, dim, separation, sigma) = blob_params(spec)?;
    let n = spec.counts.get(split);
    let mut rng = RngStream::new(spec.seed, split.stream());
    let mut features = Vec::with_capacity(n * dim);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        for (j, s) in sigma.iter().enumerate() {
            let mean = if j == k { separation } else { 0.0 };
            features.push(mean + s * rng.normal());
        }
        targets.push(k);
    }
    Ok(Dataset {
        kind: TaskKind::Classification,
        split,
        samples: n,
        units_per_sample: 1,
        feature_dim: dim,
        classes,
        grid: None,
        features,
        targets,
        clean: None,
    })
}

/// Accuracy of the Bayes classifier for the blobs task.
///
/// With a shared diagonal covariance the optimal rule picks the nearest mean
/// in Mahalanobis distance. Conditioning on the noise along the true class
/// axis makes the pairwise comparisons independent, which leaves a
/// one-dimensional integral per class.
pub fn bayes_accuracy(spec: &TaskSpec) -> Result<f64> {
    let (classes, _, a, sigma) = blob_params(spec)?;
    let std = Normal::standard();
    let (lo, hi, steps) = (-12.0_f64, 12.0_f64, 6000usize);
    let h = (hi - lo) / steps as f64;
    let mut total = 0.0;
    for k in 0..classes {
        let integrand = |z: f64| {
            let mut p = std.pdf(z);
            for j in (0..classes).filter(|&j| j != k) {
                let (sk, sj) = (sigma[k], sigma[j]);
                let bound = sj * a / 2.0 * (1.0 / (sk * sk) + 1.0 / (sj * sj)) + sj * z / sk;
                p *= std.cdf(bound);
            }
            p
        };
        // composite Simpson
        let mut acc = integrand(lo) + integrand(hi);
        for s in 1..steps {
            let w = if s % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(lo + s as f64 * h);
        }
        total += acc * h / 3.0;
    }
    Ok(total / classes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Monte Carlo estimate of nearest-mean (Mahalanobis) accuracy.
    fn monte_carlo(spec: &TaskSpec, n: usize) -> f64 {
        let (classes, dim, a, sigma) = blob_params(spec).unwrap();
        let mut rng = RngStream::new(99, 5);
        let mut hits = 0usize;
        for i in 0..n {
            let k = i % classes;
            let x: Vec<f64> = (0..dim)
                .map(|j| if j == k { a } else { 0.0 } + sigma[j] * rng.normal())
                .collect();
            let dist = |c: usize| -> f64 {
                (0..dim)
                    .map(|j| {
                        let d = x[j] - if j == c { a } else { 0.0 };
                        d * d / (sigma[j] * sigma[j])
                    })
                    .sum()
            };
            let best = (0..classes)
                .min_by(|&p, &q| dist(p).partial_cmp(&dist(q)).unwrap())
                .unwrap();
            hits += usize::from(best == k);
        }
        hits as f64 / n as f64
    }

    #[test]
    fn bayes_matches_monte_carlo() {
        let mut specs = vec![TaskSpec::blobs_preset(1)];
        let mut aniso = TaskSpec::blobs_preset(1);
        aniso.geometry = Geometry::Blobs {
            classes: 4,
            dim: 5,
            separation: 1.5,
            scales: vec![0.6, 1.3, 0.9, 1.1, 2.0],
        };
        specs.push(aniso);
        for spec in specs {
            let exact = bayes_accuracy(&spec).unwrap();
            let n = 200_000;
            let mc = monte_carlo(&spec, n);
            let sd = (exact * (1.0 - exact) / n as f64).sqrt();
            assert!((exact - mc).abs() < 4.0 * sd, "exact {exact} mc {mc}");
        }
    }

    #[test]
    fn two_class_closed_form() {
        // two isotropic classes: accuracy is Φ(a / (σ√2))
        let mut spec = TaskSpec::blobs_preset(0);
        spec.geometry = Geometry::Blobs {
            classes: 2,
            dim: 2,
            separation: 1.7,
            scales: Vec::new(),
        };
        spec.noise = 0.8;
        let expect = Normal::standard().cdf(1.7 / (0.8 * 2f64.sqrt()));
        assert!((bayes_accuracy(&spec).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn deterministic_and_balanced() {
        let spec = TaskSpec::blobs_preset(3);
        let a = gen_blobs_classification(&spec, Split::Train).unwrap();
        let b = gen_blobs_classification(&spec, Split::Train).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = gen_blobs_classification(&spec, Split::Test).unwrap();
        assert_ne!(a.features[..8], c.features[..8]);
        for k in 0..3 {
            assert_eq!(a.targets.iter().filter(|&&t| t == k).count(), 1000);
        }
    }
}
