use super::{Dataset, Geometry, Split, TaskKind, TaskSpec};
use crate::autodiff::RngStream;
use crate::error::{Result, SpgError};

/// Side of the square neighbourhood each pixel sees.
pub const PATCH: usize = 5;

pub const BACKGROUND: usize = 0;
pub const RECTANGLE: usize = 1;
pub const CROSS: usize = 2;

/// Draw one label image. Each shape claims a distinct 4x4 cell.
fn draw_labels(height: usize, width: usize, shapes: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut labels = vec![BACKGROUND; height * width];
    let cols = width / 4;
    let cells = rng.permutation((height / 4) * cols);
    for &cell in cells.iter().take(shapes) {
        let (r0, c0) = ((cell / cols) * 4, (cell % cols) * 4);
        if rng.below(2) == 0 {
            let h = 2 + rng.below(3) as usize;
            let w = 2 + rng.below(3) as usize;
            let dr = rng.below((5 - h) as u64) as usize;
            let dc = rng.below((5 - w) as u64) as usize;
            for r in r0 + dr..r0 + dr + h {
                for c in c0 + dc..c0 + dc + w {
                    labels[r * width + c] = RECTANGLE;
                }
            }
        } else {
            let cr = r0 + 1 + rng.below(2) as usize;
            let cc = c0 + 1 + rng.below(2) as usize;
            for (r, c) in [(cr, cc), (cr - 1, cc), (cr + 1, cc), (cr, cc - 1), (cr, cc + 1)] {
                labels[r * width + c] = CROSS;
            }
        }
    }
    labels
}

/// Rectangles and plus-shaped crosses of equal brightness on a noisy
/// background. Every pixel is a unit whose features are its zero-padded
/// `PATCH x PATCH` neighbourhood, so telling the shapes apart needs context.
pub fn gen_shapes_segmentation(spec: &TaskSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let Geometry::Shapes { height, width, shapes } = spec.geometry else {
        return Err(SpgError::invalid("not a segmentation task"));
    };
    let n = spec.counts.get(split);
    let mut rng = RngStream::new(spec.seed, split.stream());
    let units = height * width;
    let fdim = PATCH * PATCH;
    let half = (PATCH / 2) as isize;
    let mut features = Vec::with_capacity(n * units * fdim);
    let mut targets = Vec::with_capacity(n * units);
    for _ in 0..n {
        let labels = draw_labels(height, width, shapes, &mut rng);
        let image: Vec<f64> = labels
            .iter()
            .map(|&l| f64::from(u8::from(l != BACKGROUND)) + spec.noise * rng.normal())
            .collect();
        for r in 0..height as isize {
            for c in 0..width as isize {
                for dr in -half..=half {
                    for dc in -half..=half {
                        let (y, x) = (r + dr, c + dc);
                        let inside = (0..height as isize).contains(&y) && (0..width as isize).contains(&x);
                        features.push(if inside { image[y as usize * width + x as usize] } else { 0.0 });
                    }
                }
            }
        }
        targets.extend_from_slice(&labels);
    }
    Ok(Dataset {
        kind: TaskKind::Segmentation,
        split,
        samples: n,
        units_per_sample: units,
        feature_dim: fdim,
        classes: 3,
        grid: Some((height, width)),
        features,
        targets,
        clean: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::SplitCounts;

    fn spec(shapes: usize, noise: f64) -> TaskSpec {
        TaskSpec {
            geometry: Geometry::Shapes {
                height: 16,
                width: 16,
                shapes,
            },
            counts: SplitCounts {
                train: 6,
                val: 2,
                test: 2,
            },
            noise,
            seed: 11,
        }
    }

    #[test]
    fn all_background() {
        let d = gen_shapes_segmentation(&spec(0, 0.3), Split::Train).unwrap();
        assert!(d.targets.iter().all(|&t| t == BACKGROUND));
        assert_eq!(d.targets.len(), 6 * 256);
    }

    #[test]
    fn shapes_have_expected_areas() {
        let d = gen_shapes_segmentation(&spec(16, 0.0), Split::Train).unwrap();
        for img in d.targets.chunks(256) {
            let crosses = img.iter().filter(|&&t| t == CROSS).count();
            assert_eq!(crosses % 5, 0);
            assert!(img.iter().any(|&t| t != BACKGROUND));
        }
        // noiseless centre pixel of each patch is the indicator of a shape
        for (u, &t) in d.targets.iter().enumerate() {
            let centre = d.features[u * PATCH * PATCH + PATCH * PATCH / 2];
            assert_eq!(centre, f64::from(u8::from(t != BACKGROUND)));
        }
    }

    #[test]
    fn deterministic() {
        let a = gen_shapes_segmentation(&spec(4, 0.3), Split::Val).unwrap();
        let b = gen_shapes_segmentation(&spec(4, 0.3), Split::Val).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
