//! ArcFace prototype loss with prototypes carried across stages.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::tensor::{Param, Tape, Tensor, Var};

pub const PROTOTYPES_NAME: &str = "loss.prototypes";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcFaceParams {
    pub scale: f64,
    /// Additive angular margin in radians.
    pub margin: f64,
}

impl Default for ArcFaceParams {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.5,
        }
    }
}

impl ArcFaceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("ArcFace scale must be > 0, got {}", self.scale)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!(
                "ArcFace margin must lie in [0, pi/2), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Which rows a stage added.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Birth {
    pub stage: usize,
    pub first_row: usize,
    pub count: usize,
}

/// One unnormalized prototype row per class seen so far.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub prototypes: Param,
    classes: Vec<u32>,
    class_to_row: HashMap<u32, usize>,
    births: Vec<Birth>,
}

/// Serializable class layout of a bank; values travel separately.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankLayout {
    pub classes: Vec<u32>,
    pub births: Vec<Birth>,
}

impl PrototypeBank {
    pub fn new(width: usize) -> Self {
        Self {
            prototypes: Param::new(PROTOTYPES_NAME, Tensor::zeros(&[0, width])),
            classes: Vec::new(),
            class_to_row: HashMap::new(),
            births: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.prototypes.value().shape()[1]
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn births(&self) -> &[Birth] {
        &self.births
    }

    pub fn row_of(&self, class: u32) -> Result<usize> {
        self.class_to_row.get(&class).copied().ok_or(Error::UnknownClass(class))
    }

    /// Appends one seeded-normal row per new class. Existing rows are kept
    /// as they are and stay trainable.
    pub fn extend<R: Rng + ?Sized>(&mut self, stage: usize, new_classes: &[u32], std: f64, rng: &mut R) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for &c in new_classes {
            if self.class_to_row.contains_key(&c) || !seen.insert(c) {
                return Err(Error::DuplicateClass(c));
            }
        }
        if new_classes.is_empty() {
            return Ok(());
        }
        let fresh = Tensor::randn(&[new_classes.len(), self.width()], std, rng);
        self.append(stage, new_classes, &fresh)
    }

    fn append(&mut self, stage: usize, new_classes: &[u32], fresh: &Tensor) -> Result<()> {
        let width = self.width();
        let first_row = self.len();
        let mut data = self.prototypes.value().data().to_vec();
        data.extend_from_slice(fresh.data());
        self.prototypes
            .set(Tensor::new(&[first_row + new_classes.len(), width], data)?);
        for (i, &c) in new_classes.iter().enumerate() {
            self.class_to_row.insert(c, first_row + i);
            self.classes.push(c);
        }
        self.births.push(Birth {
            stage,
            first_row,
            count: new_classes.len(),
        });
        Ok(())
    }

    pub fn layout(&self) -> BankLayout {
        BankLayout {
            classes: self.classes.clone(),
            births: self.births.clone(),
        }
    }

    /// Rebuilds the class layout with zero-valued rows.
    pub fn restore(&mut self, layout: &BankLayout) -> Result<()> {
        let width = self.width();
        let mut fresh = Self::new(width);
        for b in &layout.births {
            let classes = layout
                .classes
                .get(b.first_row..b.first_row + b.count)
                .ok_or_else(|| Error::Config("bank layout births exceed class list".into()))?;
            if classes.iter().any(|c| fresh.class_to_row.contains_key(c)) {
                return Err(Error::Config("bank layout repeats a class".into()));
            }
            fresh.append(b.stage, classes, &Tensor::zeros(&[b.count, width]))?;
        }
        if fresh.len() != layout.classes.len() {
            return Err(Error::Config("bank layout births do not cover every class".into()));
        }
        *self = fresh;
        Ok(())
    }
}

impl Parameterized for PrototypeBank {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.prototypes);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.prototypes);
    }
}

/// ArcFace loss of a `[1×C]` embedding against bound prototype rows.
///
/// `cos θ_j = ⟨ê, ŵ_j⟩`; the target logit becomes `cos(θ_y + m)`, all
/// logits are scaled by `s` and fed to softmax cross-entropy. Once
/// `θ_y + m` would pass π the target switches to `cos θ_y − m·sin(π − m)`,
/// which keeps the loss monotone in `θ_y`.
pub fn arcface_loss(
    tape: &mut Tape,
    embedding: Var,
    label_row: usize,
    prototypes: Var,
    params: ArcFaceParams,
) -> Result<Var> {
    let e = tape.normalize_rows(embedding)?;
    let w = tape.normalize_rows(prototypes)?;
    let cos = tape.matmul_nt(e, w)?;
    let logits = tape.arc_margin(cos, label_row, params.margin)?;
    let logits = tape.scale(logits, params.scale)?;
    Ok(tape.cross_entropy(logits, label_row)?)
}

/// [`arcface_loss`] with the label given as a class id of `bank`.
pub fn arcface_loss_for_class(
    tape: &mut Tape,
    embedding: Var,
    label: u32,
    bank: &PrototypeBank,
    params: ArcFaceParams,
) -> Result<Var> {
    let row = bank.row_of(label)?;
    let w = tape.param(&bank.prototypes);
    arcface_loss(tape, embedding, row, w, params)
}
