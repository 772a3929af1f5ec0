use std::collections::BTreeMap;

use super::FactorizedModel;
use crate::numerics::{Scalar, Tape, Var};

/// Address of one learnable tensor inside a [`FactorizedModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    /// Cross-scene matrix of encoder layer `l`, `rank × out(l)`.
    CrossScene(usize),
    /// Shared bias of encoder layer `l`.
    EncoderBias(usize),
    GeneratorW1(usize),
    GeneratorB1(usize),
    GeneratorW2(usize),
    GeneratorB2(usize),
    DecoderW1,
    DecoderB1,
    DecoderW2,
    DecoderB2,
    /// Per-scene `rank × rank` coefficient matrix.
    Coefficient {
        scene: usize,
        layer: usize,
    },
    /// Per-scene matrix learned directly when the generator is disabled.
    DirectSswm {
        scene: usize,
        layer: usize,
    },
    /// Log of the uncertainty weight β₁ (0) or β₂ (1).
    LogBeta(usize),
}

/// Optimizer grouping; each group has its own learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Matrices,
    Generator,
    Uncertainty,
}

impl ParamId {
    pub fn group(self) -> ParamGroup {
        match self {
            ParamId::GeneratorW1(_) | ParamId::GeneratorB1(_) | ParamId::GeneratorW2(_) | ParamId::GeneratorB2(_) => {
                ParamGroup::Generator
            }
            ParamId::LogBeta(_) => ParamGroup::Uncertainty,
            _ => ParamGroup::Matrices,
        }
    }

    /// Scene index for scene-specific parameters.
    pub fn scene(self) -> Option<usize> {
        match self {
            ParamId::Coefficient { scene, .. } | ParamId::DirectSswm { scene, .. } => Some(scene),
            _ => None,
        }
    }

    pub fn is_shared(self) -> bool {
        self.scene().is_none() && !matches!(self, ParamId::LogBeta(_))
    }
}

/// Lazily registers model parameters on a tape, each at most once per tape.
///
/// The predicate decides which parameters become gradient-carrying leaves;
/// everything else enters the tape as a constant.
pub struct Binding<'a> {
    vars: BTreeMap<ParamId, Var>,
    trainable: Box<dyn Fn(ParamId) -> bool + 'a>,
}

impl<'a> Binding<'a> {
    pub fn new(trainable: impl Fn(ParamId) -> bool + 'a) -> Self {
        Self { vars: BTreeMap::new(), trainable: Box::new(trainable) }
    }

    /// Every parameter is trainable.
    pub fn all() -> Self {
        Self::new(|_| true)
    }

    /// Nothing is trainable.
    pub fn frozen() -> Self {
        Self::new(|_| false)
    }

    pub fn var<T: Scalar>(&mut self, tape: &mut Tape<T>, model: &FactorizedModel<T>, id: ParamId) -> Var {
        if let Some(&v) = self.vars.get(&id) {
            return v;
        }
        let mut t = model.param(id).unwrap_or_else(|| panic!("parameter {id:?} does not exist")).clone();
        t.requires_grad = (self.trainable)(id);
        let v = tape.leaf(t);
        self.vars.insert(id, v);
        v
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars.get(&id).copied()
    }

    /// Bound parameters in a stable order.
    pub fn entries(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().map(|(&k, &v)| (k, v))
    }
}
