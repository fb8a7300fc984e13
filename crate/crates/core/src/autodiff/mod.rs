//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The design is define-by-run: a [`Tape`] records every operation that
//! touches a tracked tensor during the forward pass and is rebuilt from
//! scratch on the next pass. [`Tape::backward`] replays the recording in
//! reverse to accumulate gradients. Untracked (constant) tensors flow through
//! the same operations without recording anything, so evaluation-mode code
//! pays no tape cost.

mod tape;

pub mod gradcheck;

pub use tape::{Gradients, Tape};

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, SlapError};

/// Numeric mode of a tape. `F32` quantizes every operation result (and every
/// gradient contribution) through single precision; `F64` is the default and
/// what all tight test tolerances assume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

/// How row norms below epsilon are handled inside cosine terms.
///
/// Training code clamps so a stray zero activation cannot produce infinities;
/// metric code uses `Strict`, where a degenerate norm is an error rather than
/// a silently perturbed number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormPolicy {
    Clamp(f64),
    Strict(f64),
}

impl NormPolicy {
    pub const TRAIN: NormPolicy = NormPolicy::Clamp(1e-12);
    pub const METRIC: NormPolicy = NormPolicy::Strict(1e-12);

    pub(crate) fn eps(&self) -> f64 {
        match self {
            NormPolicy::Clamp(e) | NormPolicy::Strict(e) => *e,
        }
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major tensor of 64-bit floats.
///
/// A tensor is immutable after creation. If it was produced by a recorded
/// operation (or created as a trainable leaf) it carries the index of its
/// tape node; constants and stop-gradient results carry none.
#[derive(Clone, Debug)]
pub struct Tensor {
    data: Rc<Vec<f64>>,
    shape: Vec<usize>,
    node: Option<usize>,
    tape_id: u64,
}

impl Tensor {
    pub(crate) fn new_internal(
        data: Rc<Vec<f64>>,
        shape: Vec<usize>,
        node: Option<usize>,
        tape_id: u64,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { data, shape, node, tape_id }
    }

    /// Constant tensor, not attached to any tape.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(SlapError::Dimension(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            data: Rc::new(data),
            shape: shape.to_vec(),
            node: None,
            tape_id: 0,
        })
    }

    /// Rank-0 constant.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            data: Rc::new(vec![v]),
            shape: Vec::new(),
            node: None,
            tape_id: 0,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            data: Rc::new(vec![0.0; n]),
            shape: shape.to_vec(),
            node: None,
            tape_id: 0,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Whether gradients flow into this tensor's ancestors.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node
    }

    pub(crate) fn tape_id(&self) -> u64 {
        self.tape_id
    }

    /// Scalar value; rank error otherwise.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(SlapError::Rank(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(SlapError::Rank(format!(
                "expected rank-2 tensor, got shape {:?}",
                other
            ))),
        }
    }

    /// Same data, detached from the tape: no gradient flows through the
    /// result into this tensor's ancestors.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor {
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
            node: None,
            tape_id: 0,
        }
    }
}

/// Stop-gradient operator as a free function.
pub fn stop_gradient(t: &Tensor) -> Tensor {
    t.stop_gradient()
}
