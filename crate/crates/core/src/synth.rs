//! Labeled synthetic data with known class geometry.
//!
//! Class centroids are unit vectors with a guaranteed minimum mutual angle,
//! and every sample is its centroid rotated by a bounded angle. Because the
//! class structure is exact, mining precision can be measured directly.
//! [`Renderer`] turns those vectors into small images so the same structure
//! can be pushed through the image encoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{EmbeddingMatrix, ImageRecord};
use crate::error::{Error, Result};
use crate::float::{self, Float};
use crate::rng::{self, ChaCha8Rng};

/// How far samples are rotated away from their centroid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AngleSpread {
    /// Angle uniform in `[0, intra_angle]`.
    Uniform,
    /// Angle exactly `intra_angle` (samples lie on a cone around the centroid).
    Fixed,
}

/// Unit-norm class centroids.
#[derive(Clone, Debug)]
pub struct BlobGeometry {
    pub dim: usize,
    pub intra_angle: f64,
    centroids: Vec<Vec<Float>>,
}

/// Samples drawn from a [`BlobGeometry`]. Row `i` has class `labels[i]`.
#[derive(Clone, Debug)]
pub struct Blobs {
    pub labels: Vec<u32>,
    pub embeddings: EmbeddingMatrix,
}

impl BlobGeometry {
    /// Draws `num_classes` centroids whose pairwise angle is at least
    /// `2 * intra_angle`.
    ///
    /// When `num_classes <= dim` the centroids form an orthonormal frame;
    /// otherwise they are rejection-sampled.
    pub fn new(num_classes: usize, dim: usize, intra_angle: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if dim < 2 || !(0.0..core::f64::consts::FRAC_PI_2).contains(&intra_angle) {
            return Err(Error::InfeasibleGeometry(format!(
                "dim {dim}, intra_angle {intra_angle}"
            )));
        }
        let mut rng = rng::rng_for(&[seed, 0xB10B]);
        let min_cos = libm::cos(2.0 * intra_angle);
        let mut centroids: Vec<Vec<Float>> = Vec::with_capacity(num_classes);
        if num_classes <= dim {
            while centroids.len() < num_classes {
                let mut v = rng::unit_vector(&mut rng, dim);
                for c in &centroids {
                    let p = float::dot(&v, c);
                    v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
                }
                let n = float::norm(&v);
                if n > 1e-3 {
                    v.iter_mut().for_each(|x| *x /= n);
                    centroids.push(v);
                }
            }
        } else {
            let mut attempts = 0usize;
            while centroids.len() < num_classes {
                attempts += 1;
                if attempts > 100_000 {
                    return Err(Error::InfeasibleGeometry(format!(
                        "cannot place {num_classes} centroids in dim {dim} at angle {}",
                        2.0 * intra_angle
                    )));
                }
                let v = rng::unit_vector(&mut rng, dim);
                if centroids
                    .iter()
                    .all(|c| (float::dot(&v, c) as f64) <= min_cos)
                {
                    centroids.push(v);
                }
            }
        }
        Ok(Self {
            dim,
            intra_angle,
            centroids,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroid(&self, class: usize) -> &[Float] {
        &self.centroids[class]
    }

    /// `per_class` samples per class; sample `i` belongs to class
    /// `i % num_classes`, so every prefix is close to balanced.
    pub fn sample(&self, per_class: usize, spread: AngleSpread, seed: u64) -> Result<Blobs> {
        let c = self.num_classes();
        let n = c * per_class;
        let mut rows = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % c;
            let mut rng = rng::rng_for(&[seed, 0x5A3F, i as u64]);
            let angle = match spread {
                AngleSpread::Uniform => self.intra_angle * rng.gen::<f64>(),
                AngleSpread::Fixed => self.intra_angle,
            };
            rows.extend(self.rotate_towards_random(class, angle, &mut rng));
            labels.push(class as u32);
        }
        Ok(Blobs {
            labels,
            embeddings: EmbeddingMatrix::normalized_from(n, self.dim, rows)?,
        })
    }

    fn rotate_towards_random(&self, class: usize, angle: f64, rng: &mut ChaCha8Rng) -> Vec<Float> {
        let mu = &self.centroids[class];
        if angle == 0.0 {
            return mu.clone();
        }
        // Random direction orthogonal to the centroid.
        let mut dir = rng::unit_vector(rng, self.dim);
        loop {
            let p = float::dot(&dir, mu);
            dir.iter_mut().zip(mu).for_each(|(x, y)| *x -= p * y);
            let nrm = float::norm(&dir);
            if nrm > 1e-3 {
                dir.iter_mut().for_each(|x| *x /= nrm);
                break;
            }
            dir = rng::unit_vector(rng, self.dim);
        }
        let (s, co) = (libm::sin(angle) as Float, libm::cos(angle) as Float);
        mu.iter().zip(&dir).map(|(m, d)| co * m + s * d).collect()
    }
}

/// Samples from freshly drawn centroids.
pub fn gen_synthetic_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    intra_angle: f64,
    spread: AngleSpread,
    seed: u64,
) -> Result<(BlobGeometry, Blobs)> {
    let geometry = BlobGeometry::new(num_classes, dim, intra_angle, seed)?;
    let blobs = geometry.sample(per_class, spread, seed)?;
    Ok((geometry, blobs))
}

/// Maps embedding vectors to images: a fixed random linear "decoder" carries
/// the class signal, and a per-image random nuisance pattern from a low-rank
/// basis carries instance-specific variation. Pixels are squashed with a
/// logistic so they stay in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Renderer {
    pub shape: (usize, usize, usize),
    pub signal_gain: Float,
    pub nuisance_gain: Float,
    dim: usize,
    rank: usize,
    decoder: Vec<Float>,
    nuisance_basis: Vec<Float>,
}

impl Renderer {
    pub fn new(
        dim: usize,
        shape: (usize, usize, usize),
        nuisance_rank: usize,
        signal_gain: Float,
        nuisance_gain: Float,
        seed: u64,
    ) -> Self {
        let pix = shape.0 * shape.1 * shape.2;
        let mut rng = rng::rng_for(&[seed, 0xDEC0]);
        let scale = 1.0 / float::sqrt(dim as Float);
        let decoder = (0..pix * dim).map(|_| rng::normal(&mut rng) * scale).collect();
        let nscale = 1.0 / float::sqrt(nuisance_rank.max(1) as Float);
        let nuisance_basis = (0..pix * nuisance_rank)
            .map(|_| rng::normal(&mut rng) * nscale)
            .collect();
        Self {
            shape,
            signal_gain,
            nuisance_gain,
            dim,
            rank: nuisance_rank,
            decoder,
            nuisance_basis,
        }
    }

    /// One image per embedding row. `seed` drives the nuisance coefficients.
    pub fn render(&self, blobs: &Blobs, seed: u64) -> Result<Vec<ImageRecord>> {
        let emb = &blobs.embeddings;
        if emb.d() != self.dim {
            return Err(Error::Shape {
                op: "render",
                left: alloc::vec![emb.d()],
                right: alloc::vec![self.dim],
            });
        }
        let pix = self.shape.0 * self.shape.1 * self.shape.2;
        (0..emb.n())
            .map(|i| {
                let mut rng = rng::rng_for(&[seed, 0x1A6E, i as u64]);
                let coeffs: Vec<Float> = (0..self.rank).map(|_| rng::normal(&mut rng)).collect();
                let e = emb.row(i);
                let pixels = (0..pix)
                    .map(|p| {
                        let s = float::dot(&self.decoder[p * self.dim..(p + 1) * self.dim], e);
                        let n = float::dot(
                            &self.nuisance_basis[p * self.rank..(p + 1) * self.rank],
                            &coeffs,
                        );
                        let v = self.signal_gain * s + self.nuisance_gain * n;
                        1.0 / (1.0 + float::exp(-v))
                    })
                    .collect();
                ImageRecord::new(i, self.shape, pixels, Some(blobs.labels[i]))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[Float], b: &[Float]) -> f64 {
        float::dot(a, b) as f64
    }

    #[test]
    fn zero_angle_collapses_each_class() {
        let (_, b) = gen_synthetic_blobs(2, 5, 8, 0.0, AngleSpread::Uniform, 3).unwrap();
        let e = &b.embeddings;
        for i in 0..e.n() {
            for j in 0..e.n() {
                let c = cos(e.row(i), e.row(j));
                if b.labels[i] == b.labels[j] {
                    assert!((c - 1.0).abs() < 1e-6, "{c}");
                } else {
                    assert!(c.abs() < 1e-6, "{c}");
                }
            }
        }
    }

    #[test]
    fn fixed_spread_lands_on_the_cone() {
        let g = BlobGeometry::new(3, 16, 0.2, 9).unwrap();
        let b = g.sample(4, AngleSpread::Fixed, 1).unwrap();
        for i in 0..b.embeddings.n() {
            let c = cos(b.embeddings.row(i), g.centroid(b.labels[i] as usize));
            assert!((c - libm::cos(0.2)).abs() < 1e-5);
        }
    }

    #[test]
    fn too_many_classes_is_infeasible() {
        let r = BlobGeometry::new(50, 2, 0.7, 0);
        assert!(matches!(r, Err(Error::InfeasibleGeometry(_))));
        assert!(BlobGeometry::new(1, 4, 0.1, 0).is_err());
    }

    #[test]
    fn rendered_pixels_are_in_range_and_deterministic() {
        let (_, b) = gen_synthetic_blobs(2, 3, 8, 0.1, AngleSpread::Uniform, 5).unwrap();
        let r = Renderer::new(8, (1, 4, 4), 4, 2.0, 1.0, 7);
        let a = r.render(&b, 11).unwrap();
        let c = r.render(&b, 11).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|im| im.pixels.iter().all(|p| (0.0..=1.0).contains(p))));
        assert_eq!(a[4].label, Some(0));
    }
}
