use serde::{Deserialize, Serialize};

use super::tape::Backward;
use super::{NnError, Real, Tape, Tensor, Var};

/// Pointwise nonlinearity used by the embedder and the feed-forward stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[derive(Clone, Copy)]
enum Pointwise {
    Sigmoid,
    Relu,
    Gelu,
}

impl<T: Real> Backward<T> for Pointwise {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let data: Vec<T> = match self {
            Pointwise::Sigmoid => out.data().iter().zip(g.data()).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
            Pointwise::Relu => x.data().iter().zip(g.data()).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect(),
            Pointwise::Gelu => x.data().iter().zip(g.data()).map(|(&x, &g)| g * gelu_grad(x)).collect(),
        };
        vec![Some(Tensor::from_vec(x.shape(), data).unwrap())]
    }
}

struct SoftmaxBackward {
    outer: usize,
    len: usize,
    inner: usize,
}

impl<T: Real> Backward<T> for SoftmaxBackward {
    fn backward(&self, _inputs: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let mut dx = vec![T::zero(); y.len()];
        let (yd, gd) = (y.data(), g.data());
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |k: usize| (o * self.len + k) * self.inner + i;
                let dot: T = (0..self.len).map(|k| yd[at(k)] * gd[at(k)]).sum();
                for k in 0..self.len {
                    dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                }
            }
        }
        vec![Some(Tensor::from_vec(y.shape(), dx).unwrap())]
    }
}

/// Max-shifted softmax over one axis.
pub fn softmax_forward<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NnError> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(NnError::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..len {
                let e = (xd[at(k)] - max).exp();
                out[at(k)] = e;
                total = total + e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / total;
            }
        }
    }
    Tensor::from_vec(shape, out)
}

impl<T: Real> Tape<T> {
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        self.push(&[x], out, Pointwise::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(&[x], out, Pointwise::Relu)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        self.push(&[x], out, Pointwise::Gelu)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        let out = softmax_forward(xv, axis)?;
        let shape = xv.shape();
        let op = SoftmaxBackward {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        };
        Ok(self.push(&[x], out, op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnops::testutil::{check_input_grad, rand_tensor};

    fn run(f: impl Fn(&mut Tape<f64>, Var) -> Var, x: Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = f(&mut tape, v);
        tape.value(y).clone()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let y = run(|t, v| t.sigmoid(v), Tensor::zeros(&[1]));
        assert_eq!(y.item(), 0.5);
        let y = run(|t, v| t.sigmoid(v), Tensor::from_vec(&[2], vec![-800.0, 800.0]).unwrap());
        assert!(y.data()[0] >= 0.0 && y.data()[0] < 1e-300 && y.data()[1] == 1.0);
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = run(|t, v| t.relu(v), Tensor::from_vec(&[3], vec![-2.0, -1e-9, 4.0]).unwrap());
        assert_eq!(y.data(), &[0.0, 0.0, 4.0]);
    }

    #[test]
    fn gelu_reference_values() {
        let y = run(|t, v| t.gelu(v), Tensor::from_vec(&[3], vec![0.0, 1.0, -1.0]).unwrap());
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((y.data()[2] + 0.158_655_253_931_457).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = run(|t, v| t.softmax(v, 0).unwrap(), Tensor::full(&[4], 2.0));
        assert_eq!(y.data(), &[0.25; 4]);
        let y = run(|t, v| t.softmax(v, 0).unwrap(), Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap());
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-12);
        let y = run(|t, v| t.softmax(v, 0).unwrap(), Tensor::from_vec(&[3], vec![1e4, -1e4, 1e4]).unwrap());
        assert!(y.is_finite());
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let y = run(|t, v| t.softmax(v, 1).unwrap(), rand_tensor(&[2, 5, 3], 31).map(|v| 30.0 * v));
        for o in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..5).map(|k| y.data()[(o * 5 + k) * 3 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activation_gradients() {
        let x = rand_tensor::<f64>(&[8], 32).map(|v| 3.0 * v);
        check_input_grad(&[x.clone()], |t, v| t.sigmoid(v[0]), 1e-3);
        check_input_grad(&[x.clone()], |t, v| t.gelu(v[0]), 1e-3);
        // keep relu probes away from the kink
        let xr = x.map(|v| if v.abs() < 0.05 { 0.5 } else { v });
        check_input_grad(&[xr], |t, v| t.relu(v[0]), 1e-3);
        check_input_grad(&[x], |t, v| t.softmax(v[0], 0).unwrap(), 1e-3);
        check_input_grad(&[rand_tensor(&[2, 3, 4], 33)], |t, v| t.softmax(v[0], 1).unwrap(), 1e-3);
    }
}
