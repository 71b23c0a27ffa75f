//! Synthetic open-world image data.
//!
//! Each class is a smooth prototype image: three sinusoidal gratings with
//! random frequency, orientation and phase, plus a brightness code over the
//! four image quadrants that is unique per class id. Samples are circularly
//! translated copies of the prototype with additive Gaussian noise. Every
//! class draws from its own seed, so a class regenerates identically no
//! matter which other classes are requested.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_for;
use crate::tensor::Tensor;

const DATASET_MAGIC: &[u8; 4] = b"OWDS";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_train_classes: usize,
    pub num_test_classes: usize,
    /// Samples per class (`M`).
    pub samples_per_class: usize,
    pub image_side: usize,
    /// Grating frequencies are drawn from this range, in cycles per image.
    pub freq_min: f64,
    pub freq_max: f64,
    pub noise_sigma: f64,
    /// Largest circular shift, in pixels, along each axis.
    pub max_shift: usize,
    /// Spread of the quadrant brightness levels.
    pub code_amplitude: f64,
    /// Id of the first class; train ids follow, then test ids. Set by the
    /// caller rather than read from configuration files.
    #[serde(skip)]
    pub first_class: u32,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_train_classes: 120,
            num_test_classes: 60,
            samples_per_class: 20,
            image_side: 32,
            freq_min: 1.0,
            freq_max: 6.0,
            noise_sigma: 0.05,
            max_shift: 2,
            code_amplitude: 0.3,
            first_class: 0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_train_classes + self.num_test_classes == 0 {
            return Err(Error::Config("dataset needs at least one class".into()));
        }
        if self.samples_per_class == 0 || self.image_side == 0 {
            return Err(Error::Config("samples_per_class and image_side must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.freq_min > 0.0 && self.freq_max >= self.freq_min) {
            return Err(Error::Config("frequency range must satisfy 0 < min <= max".into()));
        }
        if self.max_shift >= self.image_side {
            return Err(Error::Config("max_shift must be smaller than the image side".into()));
        }
        Ok(())
    }

    fn total_classes(&self) -> usize {
        self.num_train_classes + self.num_test_classes
    }
}

/// All samples of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSamples {
    pub class_id: u32,
    pub images: Vec<Tensor>,
}

/// Open-world split: training and test class ids never overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub image_side: usize,
    pub samples_per_class: usize,
    pub train: Vec<ClassSamples>,
    pub test: Vec<ClassSamples>,
}

impl DatasetSplit {
    pub fn train_class_ids(&self) -> Vec<u32> {
        self.train.iter().map(|c| c.class_id).collect()
    }

    pub fn test_class_ids(&self) -> Vec<u32> {
        self.test.iter().map(|c| c.class_id).collect()
    }

    pub fn train_class(&self, id: u32) -> Option<&ClassSamples> {
        self.train.iter().find(|c| c.class_id == id)
    }

    /// Flattened `(image, label)` view of the test classes.
    pub fn test_samples(&self) -> Vec<(&Tensor, u32)> {
        self.test
            .iter()
            .flat_map(|c| c.images.iter().map(move |img| (img, c.class_id)))
            .collect()
    }
}

struct Grating {
    amplitude: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

fn quadrant_levels(class_index: usize, total: usize, amplitude: f64) -> [f64; 4] {
    // Smallest base whose fourth power covers every class.
    let mut base = 2usize;
    while base.pow(4) < total {
        base += 1;
    }
    let mut code = class_index;
    let mut out = [0.0; 4];
    for level in &mut out {
        let digit = code % base;
        code /= base;
        *level = amplitude * (digit as f64 / (base - 1) as f64 - 0.5);
    }
    out
}

/// The noiseless, untranslated image that defines a class.
pub fn class_prototype(spec: &SyntheticSpec, class_id: u32) -> Tensor {
    let side = spec.image_side;
    let mut rng = rng_for(spec.seed, "class", u64::from(class_id));
    let gratings: Vec<Grating> = (0..3)
        .map(|_| {
            let freq = rng.random_range(spec.freq_min..=spec.freq_max);
            let theta = rng.random_range(0.0..PI);
            Grating {
                amplitude: rng.random_range(0.5..1.0),
                fx: freq * theta.cos(),
                fy: freq * theta.sin(),
                phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();
    let index = (class_id - spec.first_class) as usize;
    let levels = quadrant_levels(index, spec.total_classes(), spec.code_amplitude);
    let half = side / 2;
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
            let wave: f64 = gratings
                .iter()
                .map(|g| g.amplitude * (2.0 * PI * (g.fx * u + g.fy * v) + g.phase).sin())
                .sum::<f64>()
                / 3.0;
            let quadrant = usize::from(y >= half) * 2 + usize::from(x >= half);
            data.push(wave + levels[quadrant]);
        }
    }
    Tensor::new(&[side, side], data).expect("side*side elements")
}

fn class_samples(spec: &SyntheticSpec, class_id: u32) -> ClassSamples {
    let side = spec.image_side;
    let proto = class_prototype(spec, class_id);
    let mut rng = rng_for(spec.seed, "samples", u64::from(class_id));
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let shift = spec.max_shift as i64;
    let images = (0..spec.samples_per_class)
        .map(|_| {
            let dx = rng.random_range(-shift..=shift);
            let dy = rng.random_range(-shift..=shift);
            let mut data = Vec::with_capacity(side * side);
            for y in 0..side as i64 {
                for x in 0..side as i64 {
                    let sy = (y - dy).rem_euclid(side as i64) as usize;
                    let sx = (x - dx).rem_euclid(side as i64) as usize;
                    let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push(proto.data()[sy * side + sx] + n);
                }
            }
            Tensor::new(&[side, side], data).expect("side*side elements")
        })
        .collect();
    ClassSamples { class_id, images }
}

/// Class ids `[first, first+num_train)` train and the following
/// `num_test` ids test.
pub fn open_world_split(spec: &SyntheticSpec) -> (Vec<u32>, Vec<u32>) {
    let first = spec.first_class;
    let n_train = spec.num_train_classes as u32;
    let n_test = spec.num_test_classes as u32;
    let train = (first..first + n_train).collect();
    let test = (first + n_train..first + n_train + n_test).collect();
    (train, test)
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let (train_ids, test_ids) = open_world_split(spec);
    Ok(DatasetSplit {
        image_side: spec.image_side,
        samples_per_class: spec.samples_per_class,
        train: train_ids.into_iter().map(|id| class_samples(spec, id)).collect(),
        test: test_ids.into_iter().map(|id| class_samples(spec, id)).collect(),
    })
}

/// Accuracy of assigning each sample to the class whose prototype, under
/// the best circular shift within `max_shift`, is nearest in L2. Runs over
/// all classes in `split`.
pub fn nearest_prototype_accuracy(spec: &SyntheticSpec, split: &DatasetSplit) -> f64 {
    let all: Vec<&ClassSamples> = split.train.iter().chain(&split.test).collect();
    let protos: Vec<(u32, Tensor)> = all
        .iter()
        .map(|c| (c.class_id, class_prototype(spec, c.class_id)))
        .collect();
    let mut hits = 0usize;
    let mut total = 0usize;
    for class in &all {
        for img in &class.images {
            let best = protos
                .iter()
                .map(|(id, p)| (shifted_distance(p, img, spec.max_shift), *id))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, id)| id);
            hits += usize::from(best == Some(class.class_id));
            total += 1;
        }
    }
    hits as f64 / total as f64
}

fn shifted_distance(proto: &Tensor, img: &Tensor, max_shift: usize) -> f64 {
    let side = proto.shape()[0] as i64;
    let s = max_shift as i64;
    let mut best = f64::INFINITY;
    for dy in -s..=s {
        for dx in -s..=s {
            let mut d = 0.0;
            for y in 0..side {
                for x in 0..side {
                    let sy = (y - dy).rem_euclid(side);
                    let sx = (x - dx).rem_euclid(side);
                    let diff = img.data()[(y * side + x) as usize] - proto.data()[(sy * side + sx) as usize];
                    d += diff * diff;
                }
            }
            best = best.min(d);
        }
    }
    best
}

pub fn serialize_dataset(split: &DatasetSplit) -> Vec<u8> {
    let side = split.image_side;
    let m = split.samples_per_class;
    let n = split.train.len() + split.test.len();
    let mut out = Vec::with_capacity(24 + n * (4 + m * side * side * 8));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(split.train.len() as u32).to_le_bytes());
    out.extend_from_slice(&(split.test.len() as u32).to_le_bytes());
    out.extend_from_slice(&(side as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    for class in split.train.iter().chain(&split.test) {
        out.extend_from_slice(&class.class_id.to_le_bytes());
        for img in &class.images {
            for v in img.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                context: "dataset",
                offset: self.bytes.len(),
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn deserialize_dataset(bytes: &[u8]) -> Result<DatasetSplit> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if &magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            context: "dataset",
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::BadVersion {
            context: "dataset",
            found: version,
        });
    }
    let n_train = r.u32()? as usize;
    let n_test = r.u32()? as usize;
    let side = r.u32()? as usize;
    let m = r.u32()? as usize;
    let mut classes = Vec::with_capacity(n_train + n_test);
    for _ in 0..n_train + n_test {
        let class_id = r.u32()?;
        let mut images = Vec::with_capacity(m);
        for _ in 0..m {
            let raw = r.take(side * side * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            images.push(Tensor::new(&[side, side], data).map_err(Error::from)?);
        }
        classes.push(ClassSamples { class_id, images });
    }
    let test = classes.split_off(n_train);
    Ok(DatasetSplit {
        image_side: side,
        samples_per_class: m,
        train: classes,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_train_classes: 6,
            num_test_classes: 4,
            samples_per_class: 4,
            image_side: 16,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn split_is_disjoint() {
        let spec = small_spec();
        let (train, test) = open_world_split(&spec);
        assert!(train.iter().all(|c| !test.contains(c)));
        let cars = SyntheticSpec {
            num_train_classes: 98,
            num_test_classes: 98,
            ..spec
        };
        let (train, test) = open_world_split(&cars);
        assert_eq!((train.len(), test.len()), (98, 98));
        assert_eq!((train[0], test[0]), (0, 98));
        assert!(train.iter().all(|c| !test.contains(c)));
    }

    #[test]
    fn noiseless_samples_differ_only_by_translation() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let data = generate_dataset(&spec).unwrap();
        let proto = class_prototype(&spec, 0);
        let side = spec.image_side as i64;
        for img in &data.train[0].images {
            let found = (-2..=2).any(|dy: i64| {
                (-2..=2).any(|dx: i64| {
                    (0..side).all(|y| {
                        (0..side).all(|x| {
                            let sy = (y - dy).rem_euclid(side) as usize;
                            let sx = (x - dx).rem_euclid(side) as usize;
                            img.data()[(y * side + x) as usize]
                                == proto.data()[sy * spec.image_side + sx]
                        })
                    })
                })
            });
            assert!(found);
        }
    }

    #[test]
    fn generation_is_deterministic_and_classes_independent() {
        let spec = small_spec();
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(serialize_dataset(&a), serialize_dataset(&b));

        let more = SyntheticSpec {
            num_test_classes: 9,
            ..spec.clone()
        };
        let c = generate_dataset(&more).unwrap();
        assert_eq!(a.train, c.train);
    }

    #[test]
    fn quadrant_codes_are_unique() {
        let total = 180;
        let codes: Vec<[u64; 4]> = (0..total)
            .map(|i| quadrant_levels(i, total, 1.0).map(f64::to_bits))
            .collect();
        for i in 0..total {
            for j in i + 1..total {
                assert_ne!(codes[i], codes[j]);
            }
        }
    }

    #[test]
    fn few_shot_sizes_supported() {
        for m in [2, 4, 8, 16] {
            let spec = SyntheticSpec {
                samples_per_class: m,
                ..small_spec()
            };
            let data = generate_dataset(&spec).unwrap();
            assert!(data.train.iter().all(|c| c.images.len() == m));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            SyntheticSpec { samples_per_class: 0, ..small_spec() },
            SyntheticSpec { noise_sigma: -1.0, ..small_spec() },
            SyntheticSpec { num_train_classes: 0, num_test_classes: 0, ..small_spec() },
        ];
        for spec in bad {
            assert!(generate_dataset(&spec).is_err());
        }
    }

    #[test]
    fn serialization_round_trip_and_truncation() {
        let data = generate_dataset(&small_spec()).unwrap();
        let bytes = serialize_dataset(&data);
        assert_eq!(deserialize_dataset(&bytes).unwrap(), data);

        let cut = &bytes[..bytes.len() - 5];
        match deserialize_dataset(cut) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("expected truncation error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize_dataset(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(deserialize_dataset(&bad), Err(Error::BadVersion { found: 9, .. })));
    }

    #[test]
    fn nearest_prototype_separates_fifty_classes() {
        let spec = SyntheticSpec {
            num_train_classes: 50,
            num_test_classes: 0,
            samples_per_class: 4,
            noise_sigma: 0.05,
            ..SyntheticSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let acc = nearest_prototype_accuracy(&spec, &data);
        assert!(acc > 0.95, "{acc}");
    }
}
