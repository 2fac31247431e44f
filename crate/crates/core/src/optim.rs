//! Adam over per-Gaussian parameter blocks with one learning rate and step
//! counter per parameter group.

use crate::geom::PARAMS_PER_GAUSSIAN;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Parameter groups as slices of the per-Gaussian block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Position,
    Rotation,
    Scale,
    Opacity,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Position, Group::Rotation, Group::Scale, Group::Opacity];

    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            Group::Position => 0..3,
            Group::Rotation => 3..7,
            Group::Scale => 7..10,
            Group::Opacity => 10..11,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub type Block<T> = [T; PARAMS_PER_GAUSSIAN];

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub m: Vec<Block<T>>,
    pub v: Vec<Block<T>>,
    /// Completed update count per group.
    pub steps: [u64; 4],
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![[T::zero(); PARAMS_PER_GAUSSIAN]; n],
            v: vec![[T::zero(); PARAMS_PER_GAUSSIAN]; n],
            steps: [0; 4],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update of `group` across all parameter blocks.
    pub fn step(&mut self, group: Group, lr: T, params: &mut [Block<T>], grads: &[Block<T>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let t = &mut self.steps[group.index()];
        *t += 1;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let bc1 = T::one() - b1.powi(*t as i32);
        let bc2 = T::one() - b2.powi(*t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in group.range() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                p[k] -= update(lr, m[k], v[k], bc1, bc2);
            }
        }
    }

    /// Keep the moments of entries where `keep` is true, in order.
    pub fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.m.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.v.retain(|_| *it.next().unwrap());
    }

    /// Append `n` entries with zeroed moments.
    pub fn extend_zeroed(&mut self, n: usize) {
        self.m.extend(std::iter::repeat_n([T::zero(); PARAMS_PER_GAUSSIAN], n));
        self.v.extend(std::iter::repeat_n([T::zero(); PARAMS_PER_GAUSSIAN], n));
    }
}

/// Parameter decrement given updated moments and bias-correction denominators.
#[inline]
pub fn update<T: Scalar>(lr: T, m: T, v: T, bc1: T, bc2: T) -> T {
    lr * (m / bc1) / ((v / bc2).sqrt() + T::lit(EPSILON))
}
