//! Synthetic planted-feature exams.
//!
//! Every exam gets a smooth background of drifting Gaussian blobs plus pixel
//! noise. Positive exams additionally carry a bright diagonal band (random
//! orientation and offset) on their middle slices. Background draws do not
//! depend on the label, so the two classes differ only by the band.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Volume, DEFAULT_PLANE};
use crate::rng::{derive, stream};
use crate::tensor::{standard_normal, Scalar, Tensor};

/// Planted contrast at or above which the band-mean discriminant separates
/// the classes perfectly under the default background law.
pub const SEPARABLE_CONTRAST: Scalar = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub exams: usize,
    pub min_slices: usize,
    pub max_slices: usize,
    pub image_size: usize,
    pub positive_rate: Scalar,
    /// Per-class fraction of exams routed to the validation split.
    pub valid_fraction: Scalar,
    /// Band width in pixels, measured perpendicular to the band.
    pub band_width: Scalar,
    pub band_contrast: Scalar,
    pub noise_std: Scalar,
    pub blobs: usize,
    pub plane: String,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            exams: 200,
            min_slices: 4,
            max_slices: 8,
            image_size: 32,
            positive_rate: 0.3,
            valid_fraction: 0.25,
            band_width: 4.0,
            band_contrast: 0.6,
            noise_std: 0.05,
            blobs: 3,
            plane: DEFAULT_PLANE.to_string(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(format!("positive_rate {} must lie in (0, 1)", self.positive_rate));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(format!("valid_fraction {} must lie in [0, 1)", self.valid_fraction));
        }
        if self.exams == 0 || self.image_size < 4 {
            return Err("exams must be positive and image_size at least 4".into());
        }
        if self.min_slices == 0 || self.min_slices > self.max_slices {
            return Err(format!(
                "slice range [{}, {}] is invalid",
                self.min_slices, self.max_slices
            ));
        }
        if !(self.band_width > 0.0) || self.band_contrast < 0.0 || self.noise_std < 0.0 {
            return Err("band_width must be positive; band_contrast and noise_std non-negative".into());
        }
        Ok(())
    }

    pub fn positives(&self) -> usize {
        (self.positive_rate * self.exams as Scalar).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandGeometry {
    /// `true`: band along the main diagonal (x − y = offset);
    /// `false`: along the anti-diagonal (x + y − (size−1) = offset).
    pub main_diagonal: bool,
    pub offset: Scalar,
    pub width: Scalar,
}

impl BandGeometry {
    pub fn contains(&self, size: usize, y: usize, x: usize) -> bool {
        let (y, x) = (y as Scalar, x as Scalar);
        let d = if self.main_diagonal {
            x - y - self.offset
        } else {
            x + y - (size - 1) as Scalar - self.offset
        };
        d.abs() / std::f64::consts::SQRT_2 <= self.width / 2.0
    }
}

/// Half-open range of slices carrying the band: the middle third, never empty.
pub fn mid_slices(f: usize) -> std::ops::Range<usize> {
    let lo = f / 3;
    let hi = (f - f / 3).max(lo + 1);
    lo..hi
}

#[derive(Debug, Clone)]
pub struct SynthExam {
    pub volume: Volume,
    /// Band placement; drawn for every exam, painted only on positives.
    pub band: BandGeometry,
    pub split: &'static str,
}

fn render_exam(spec: &SynthSpec, index: usize, positive: bool) -> (Tensor, BandGeometry) {
    let mut rng = derive(spec.seed, &[stream::SYNTH, index as u64]);
    let n = spec.image_size;
    let nf = n as Scalar;
    let f = rng.gen_range(spec.min_slices..=spec.max_slices);

    struct Blob {
        cy: Scalar,
        cx: Scalar,
        dy: Scalar,
        dx: Scalar,
        radius: Scalar,
        amp: Scalar,
    }
    let blobs: Vec<Blob> = (0..spec.blobs)
        .map(|_| Blob {
            cy: rng.gen::<Scalar>() * nf,
            cx: rng.gen::<Scalar>() * nf,
            dy: rng.gen_range(-0.5..0.5),
            dx: rng.gen_range(-0.5..0.5),
            radius: rng.gen_range(nf / 8.0..nf / 3.0),
            amp: rng.gen_range(0.1..0.3),
        })
        .collect();
    let base = rng.gen_range(0.1..0.2);
    let band = BandGeometry {
        main_diagonal: rng.gen::<bool>(),
        offset: rng.gen_range(-nf / 4.0..nf / 4.0),
        width: spec.band_width,
    };

    let mids = mid_slices(f);
    let mut data = Vec::with_capacity(f * n * n);
    for s in 0..f {
        let t = s as Scalar;
        for y in 0..n {
            for x in 0..n {
                let mut v = base;
                for b in &blobs {
                    let ry = y as Scalar - (b.cy + b.dy * t);
                    let rx = x as Scalar - (b.cx + b.dx * t);
                    v += b.amp * (-(ry * ry + rx * rx) / (2.0 * b.radius * b.radius)).exp();
                }
                v += spec.noise_std * standard_normal(&mut rng);
                if positive && mids.contains(&s) && band.contains(n, y, x) {
                    v += spec.band_contrast;
                }
                data.push((v.clamp(0.0, 1.0) as f32) as Scalar);
            }
        }
    }
    (Tensor::new(vec![f, n, n], data).expect("volume shape"), band)
}

/// Deterministic in `spec`. Exactly `round(positive_rate · exams)` exams are
/// positive; each class is split between train and valid in proportion
/// `valid_fraction`. Exams are returned in id order.
pub fn generate_synthetic(spec: &SynthSpec) -> Vec<SynthExam> {
    let mut order: Vec<usize> = (0..spec.exams).collect();
    order.shuffle(&mut derive(spec.seed, &[stream::SPLIT, 0]));
    let positives = spec.positives();
    let mut labels = vec![0u8; spec.exams];
    for &i in &order[..positives] {
        labels[i] = 1;
    }

    let mut split = vec!["train"; spec.exams];
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..spec.exams).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut derive(spec.seed, &[stream::SPLIT, 1 + class as u64]));
        let n_valid = (spec.valid_fraction * members.len() as Scalar).round() as usize;
        for &i in &members[..n_valid] {
            split[i] = "valid";
        }
    }

    (0..spec.exams)
        .map(|i| {
            let (slices, band) = render_exam(spec, i, labels[i] == 1);
            SynthExam {
                volume: Volume {
                    exam_id: format!("{i:04}"),
                    slices,
                    label: labels[i],
                    plane: spec.plane.clone(),
                },
                band,
                split: split[i],
            }
        })
        .collect()
}

/// Mean intensity inside the band region over the middle slices.
pub fn band_discriminant(volume: &Volume, band: &BandGeometry) -> Scalar {
    let n = volume.height();
    let d = volume.slices.data();
    let (mut sum, mut count) = (0.0, 0usize);
    for s in mid_slices(volume.num_slices()) {
        for y in 0..n {
            for x in 0..n {
                if band.contains(n, y, x) {
                    sum += d[(s * n + y) * n + x];
                    count += 1;
                }
            }
        }
    }
    sum / count.max(1) as Scalar
}

/// Write both splits under `root` in the standard layout.
pub fn write_synthetic(root: &std::path::Path, exams: &[SynthExam]) -> Result<(), super::DataError> {
    for split in ["train", "valid"] {
        let vols: Vec<Volume> = exams
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.volume.clone())
            .collect();
        super::write_split(root, split, &vols)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            exams: 100,
            positive_rate: 0.2,
            image_size: 16,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn exact_positive_count_and_stratified_split() {
        let exams = generate_synthetic(&small());
        assert_eq!(exams.iter().filter(|e| e.volume.label == 1).count(), 20);
        let valid_pos = exams.iter().filter(|e| e.split == "valid" && e.volume.label == 1).count();
        let valid_neg = exams.iter().filter(|e| e.split == "valid" && e.volume.label == 0).count();
        assert_eq!((valid_pos, valid_neg), (5, 20));
    }

    #[test]
    fn shapes_and_range() {
        let spec = small();
        for e in generate_synthetic(&spec) {
            let s = e.volume.slices.shape();
            assert!((spec.min_slices..=spec.max_slices).contains(&s[0]));
            assert_eq!(&s[1..], &[16, 16]);
            assert!(e.volume.slices.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small());
        let b = generate_synthetic(&small());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.volume, y.volume);
        }
    }

    #[test]
    fn mid_range_never_empty() {
        assert_eq!(mid_slices(1), 0..1);
        assert_eq!(mid_slices(3), 1..2);
        assert_eq!(mid_slices(17), 5..12);
    }

    #[test]
    fn band_discriminant_separates_at_documented_contrast() {
        for seed in 0..3 {
            let spec = SynthSpec {
                band_contrast: SEPARABLE_CONTRAST,
                seed,
                ..SynthSpec::default()
            };
            let exams = generate_synthetic(&spec);
            let scores: Vec<Scalar> = exams.iter().map(|e| band_discriminant(&e.volume, &e.band)).collect();
            let labels: Vec<u8> = exams.iter().map(|e| e.volume.label).collect();
            assert_eq!(crate::metrics::pair_counting_auc(&scores, &labels).unwrap(), 1.0, "seed {seed}");
        }
    }

    #[test]
    fn invalid_rate_rejected() {
        for rate in [0.0, 1.0, -0.1] {
            let spec = SynthSpec {
                positive_rate: rate,
                ..SynthSpec::default()
            };
            assert!(spec.validate().is_err());
        }
    }
}
