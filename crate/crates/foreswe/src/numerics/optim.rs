//! First-order optimizers over the named parameters of a gradient tape.
//!
//! Both training loops in the crate follow the same pattern: evaluate the
//! scalar objective, run `backward`, clip the global gradient norm, and apply
//! an update to every named parameter in place. GP hyperparameter fitting
//! uses [`Adam`]; encoder pretraining uses plain [`GradientDescent`] with a
//! fixed learning rate. This module owns that pattern so the loops stay small
//! and identical in behavior.

use std::collections::BTreeMap;

use super::{GradientTape, Matrix, NumericsError};
use crate::scalar::Scalar;

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    /// Gradients are rescaled so their global L2 norm never exceeds this.
    pub clip_norm: T,
    step: usize,
    first_moment: BTreeMap<String, Matrix<T>>,
    second_moment: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: T, clip_norm: T) -> Self {
        Adam {
            learning_rate,
            beta1: T::from_real(0.9),
            beta2: T::from_real(0.999),
            epsilon: T::from_real(1e-8),
            clip_norm,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Apply one update from the gradients currently held by the tape.
    ///
    /// Returns the pre-clip global gradient norm. Fails if any gradient entry
    /// is non-finite, which training loops treat as divergence.
    pub fn step(&mut self, tape: &mut GradientTape<T>) -> Result<T, NumericsError> {
        let names = tape.param_names();
        let mut grads: BTreeMap<String, Matrix<T>> = BTreeMap::new();
        let mut sq_norm = T::zero();
        for name in &names {
            let g = tape.grad(name)?;
            if !g.all_finite() {
                return Err(NumericsError::NonFinite { context: "gradient" });
            }
            sq_norm += g.data().iter().map(|&x| x * x).sum::<T>();
            grads.insert(name.clone(), g);
        }
        let norm = sq_norm.sqrt();
        let scale =
            if norm > self.clip_norm { self.clip_norm / norm } else { T::one() };

        self.step += 1;
        let t = T::from_real(self.step as f64);
        let bias1 = T::one() - self.beta1.powf(t);
        let bias2 = T::one() - self.beta2.powf(t);

        for name in &names {
            let g = &grads[name];
            let mut value = tape.param_value(name)?.clone();
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for ((mv, vv), (out, &ge)) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(value.data_mut().iter_mut().zip(g.data()))
            {
                let ge = ge * scale;
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * ge;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * ge * ge;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *out -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            tape.set_param(name, value)?;
        }
        Ok(norm)
    }
}

/// Plain gradient descent with a fixed learning rate and global-norm
/// gradient clipping.
#[derive(Debug, Clone)]
pub struct GradientDescent<T: Scalar> {
    pub learning_rate: T,
    /// Gradients are rescaled so their global L2 norm never exceeds this.
    pub clip_norm: T,
}

impl<T: Scalar> GradientDescent<T> {
    pub fn new(learning_rate: T, clip_norm: T) -> Self {
        GradientDescent { learning_rate, clip_norm }
    }

    /// Apply one update from the gradients currently held by the tape.
    ///
    /// Returns the pre-clip global gradient norm. Fails if any gradient entry
    /// is non-finite, which training loops treat as divergence.
    pub fn step(&self, tape: &mut GradientTape<T>) -> Result<T, NumericsError> {
        let names = tape.param_names();
        let mut grads: BTreeMap<String, Matrix<T>> = BTreeMap::new();
        let mut sq_norm = T::zero();
        for name in &names {
            let g = tape.grad(name)?;
            if !g.all_finite() {
                return Err(NumericsError::NonFinite { context: "gradient" });
            }
            sq_norm += g.data().iter().map(|&x| x * x).sum::<T>();
            grads.insert(name.clone(), g);
        }
        let norm = sq_norm.sqrt();
        let factor =
            if norm > self.clip_norm { self.clip_norm / norm } else { T::one() };
        for name in &names {
            let g = &grads[name];
            let mut value = tape.param_value(name)?.clone();
            for (out, &ge) in value.data_mut().iter_mut().zip(g.data()) {
                *out -= self.learning_rate * factor * ge;
            }
            tape.set_param(name, value)?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mat;

    /// Minimize ||x - target||^2 + (s - 3)^2 over a matrix and a scalar.
    #[test]
    fn converges_on_a_quadratic() {
        let mut tape = crate::Tape::new();
        let x = tape.param("x", Mat::zeros(2, 2));
        let s = tape.param("s", Mat::scalar(0.0));
        let target = tape.constant(Mat::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]]));
        let dx = tape.sub(x, target);
        let dx2 = tape.hadamard(dx, dx);
        let qx = tape.sum_all(dx2);
        let three = tape.constant_scalar(3.0);
        let ds = tape.sub(s, three);
        let ds2 = tape.hadamard(ds, ds);
        let qs = tape.sum_all(ds2);
        let obj = tape.add(qx, qs);
        tape.mark_output(obj).unwrap();

        let mut adam = Adam::new(0.05, 10.0);
        for _ in 0..600 {
            tape.forward().unwrap();
            tape.backward().unwrap();
            adam.step(&mut tape).unwrap();
        }
        tape.forward().unwrap();
        assert!(tape.output_value() < 1e-6, "objective {}", tape.output_value());
        let x_final = tape.param_value("x").unwrap();
        assert!((x_final[(1, 1)] - 4.0).abs() < 1e-3);
        assert!((tape.param_value("s").unwrap().as_scalar() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn gradient_descent_converges_and_clips() {
        let mut tape = crate::Tape::new();
        let x = tape.param("x", Mat::scalar(8.0));
        let five = tape.constant_scalar(5.0);
        let d = tape.sub(x, five);
        let d2 = tape.hadamard(d, d);
        let obj = tape.sum_all(d2);
        tape.mark_output(obj).unwrap();

        let gd = GradientDescent::new(0.2, 1.0);
        for _ in 0..200 {
            tape.forward().unwrap();
            tape.backward().unwrap();
            let norm = gd.step(&mut tape).unwrap();
            assert!(norm >= 0.0);
        }
        tape.forward().unwrap();
        // Clipped steps move at most learning_rate per iteration, so after
        // enough iterations x settles at the minimum.
        assert!((tape.param_value("x").unwrap().as_scalar() - 5.0).abs() < 1e-6);

        // A single clipped step from a steep start moves exactly lr * clip.
        let mut tape2 = crate::Tape::new();
        let y = tape2.param("y", Mat::scalar(0.0));
        let obj2 = tape2.scale(y, 1e9);
        tape2.mark_output(obj2).unwrap();
        tape2.forward().unwrap();
        tape2.backward().unwrap();
        let norm = gd.step(&mut tape2).unwrap();
        assert!((norm - 1e9).abs() < 1.0);
        let moved = tape2.param_value("y").unwrap().as_scalar().abs();
        assert!((moved - 0.2).abs() < 1e-12, "moved {moved}");
    }

    #[test]
    fn clipping_bounds_the_applied_update() {
        let mut tape = crate::Tape::new();
        // Steep objective: 1e6 * x, gradient 1e6.
        let x = tape.param("x", Mat::scalar(0.0));
        let obj = tape.scale(x, 1e6);
        tape.mark_output(obj).unwrap();
        tape.forward().unwrap();
        tape.backward().unwrap();
        let mut adam = Adam::new(0.1, 1.0);
        let norm = adam.step(&mut tape).unwrap();
        assert!((norm - 1e6).abs() < 1.0);
        // First Adam step magnitude is at most learning_rate regardless of
        // gradient scale; clipping keeps the moments sane too.
        let moved = tape.param_value("x").unwrap().as_scalar().abs();
        assert!(moved <= 0.1 + 1e-12, "moved {moved}");
    }
}
