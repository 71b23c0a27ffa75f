use rand::seq::SliceRandom;
use rand::Rng;

use super::StageRounding;
use crate::error::{Error, Result};

/// Disjoint class lists, one per stage, covering every training class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSchedule {
    pub stages: Vec<Vec<u32>>,
}

impl StageSchedule {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Classes of 1-based stage `t`.
    pub fn classes(&self, stage: usize) -> Result<&[u32]> {
        stage
            .checked_sub(1)
            .and_then(|i| self.stages.get(i))
            .map(Vec::as_slice)
            .ok_or(Error::EmptyStage(stage))
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.stages.iter().map(Vec::len).collect()
    }
}

/// Stage sizes: every stage after the first gets the same size and the
/// first stage absorbs the remainder.
pub fn stage_sizes(total: usize, num_stages: usize, rounding: StageRounding) -> Result<Vec<usize>> {
    if num_stages == 0 || total < num_stages {
        return Err(Error::Config(format!(
            "cannot split {total} classes into {num_stages} stages"
        )));
    }
    if num_stages == 1 {
        return Ok(vec![total]);
    }
    let (t, n) = (total, num_stages);
    let floor = t / n;
    let other = match rounding {
        StageRounding::Floor => floor,
        StageRounding::Ceil => t.div_ceil(n),
        StageRounding::Round => (2 * t + n) / (2 * n),
    };
    // Keep the first stage nonempty; floor always does.
    let other = if other * (n - 1) >= t { floor } else { other };
    let mut sizes = vec![other; n];
    sizes[0] = t - other * (n - 1);
    Ok(sizes)
}

/// Assigns `classes` (in the given order) to stages of [`stage_sizes`].
pub fn split_classes(classes: &[u32], num_stages: usize, rounding: StageRounding) -> Result<StageSchedule> {
    let sizes = stage_sizes(classes.len(), num_stages, rounding)?;
    let mut stages = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        stages.push(classes[start..start + s].to_vec());
        start += s;
    }
    Ok(StageSchedule { stages })
}

/// Seeded random permutation of the class order.
pub fn shuffle_classes<R: Rng + ?Sized>(classes: &[u32], rng: &mut R) -> Vec<u32> {
    let mut out = classes.to_vec();
    out.shuffle(rng);
    out
}

/// `lr0 · ½(1 + cos(π·step/total))`, restarted every stage.
pub fn lr_schedule(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(lr_schedule(0, 100, 1e-3), 1e-3);
        assert!(lr_schedule(100, 100, 1e-3).abs() < 1e-18);
        assert!((lr_schedule(50, 100, 1e-3) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn single_stage_takes_everything() {
        let ids: Vec<u32> = (0..100).collect();
        let s = split_classes(&ids, 1, StageRounding::Round).unwrap();
        assert_eq!(s.sizes(), vec![100]);
        assert!(split_classes(&ids[..3], 4, StageRounding::Round).is_err());
    }

    #[test]
    fn split_is_a_disjoint_cover() {
        let ids: Vec<u32> = (0..123).collect();
        let s = split_classes(&ids, 10, StageRounding::Round).unwrap();
        let mut all: Vec<u32> = s.stages.concat();
        all.sort_unstable();
        assert_eq!(all, ids);
        assert_eq!(s.classes(1).unwrap().len(), 15);
        assert!(s.classes(0).is_err() && s.classes(11).is_err());
    }

    #[test]
    fn tiny_splits_keep_first_stage_nonempty() {
        for total in 10..40 {
            for rounding in [StageRounding::Round, StageRounding::Floor, StageRounding::Ceil] {
                let sizes = stage_sizes(total, 10, rounding).unwrap();
                assert!(sizes[0] >= 1);
                assert_eq!(sizes.iter().sum::<usize>(), total);
            }
        }
    }
}
