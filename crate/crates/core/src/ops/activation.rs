use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Matrix};

/// Elementwise nonlinearity. ELU uses alpha = 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Relu,
    /// `elu(x) + 1`, strictly positive; the default attention feature map.
    EluPlusOne,
}

impl Activation {
    #[inline]
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Elu => elu(x),
            Activation::EluPlusOne => {
                // elu(x) + 1 == exp(x) for x < 0; floored so underflow stays positive
                if x >= T::zero() {
                    x + T::one()
                } else {
                    x.exp().max(T::min_positive_value())
                }
            }
        }
    }

    pub fn apply_slice<T: Element>(self, xs: &mut [T]) {
        for v in xs {
            *v = self.apply(*v);
        }
    }

    pub fn apply_matrix<T: Element>(self, m: &Matrix<T>) -> Matrix<T> {
        m.map(|v| self.apply(v))
    }
}

#[inline]
fn elu<T: Element>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Element>(row: &mut [T]) {
    let Some(max) = row.iter().copied().reduce(T::max) else {
        return;
    };
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Element>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    let cols = out.cols();
    if cols > 0 {
        for row in out.data_mut().chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Elu.apply(0.0f32), 0.0);
        assert_eq!(Activation::Relu.apply(-2.0f32), 0.0);
        assert_eq!(Activation::Relu.apply(1.5f32), 1.5);
        assert_abs_diff_eq!(
            Activation::Elu.apply(-1.0f64),
            (-1.0f64).exp() - 1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(Activation::Elu.apply(-1.0f32), -0.6321, epsilon = 1e-4);
        assert_eq!(Activation::EluPlusOne.apply(2.0f32), 3.0);
        assert!(Activation::EluPlusOne.apply(-80.0f32) > 0.0);
    }

    #[test]
    fn softmax_examples() {
        let one = softmax_rows(&Matrix::<f32>::from_vec(1, 1, vec![7.0]).unwrap());
        assert_eq!(one.data(), &[1.0]);
        let half = softmax_rows(&Matrix::<f32>::from_vec(1, 2, vec![0.0, 0.0]).unwrap());
        assert_eq!(half.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Matrix::<f64>::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        // closed form e^i / (e + e^2 + e^3)
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, want) in [0.0900, 0.2447, 0.6652].iter().enumerate() {
            assert_abs_diff_eq!(s.get(0, i), *want, epsilon = 1e-4);
            assert_abs_diff_eq!(s.get(0, i), ((i + 1) as f64).exp() / z, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = softmax_rows(&Matrix::<f32>::from_vec(1, 2, vec![1e30, 1e30]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f32..50.0, 1..40)) {
            let n = vals.len();
            let s = softmax_rows(&Matrix::from_vec(1, n, vals).unwrap());
            let sum: f64 = s.data().iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn elu_plus_one_positive(x in -1e4f32..1e4) {
            prop_assert!(Activation::EluPlusOne.apply(x) > 0.0);
        }
    }
}
