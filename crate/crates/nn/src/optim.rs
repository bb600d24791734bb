use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam optimizer state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Parameters whose gradient
    /// is `None` keep their value, and their moments are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = crate::ParamId(i);
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }

    /// Serializes step count and moments (little endian).
    pub fn write_blob(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.step.to_le_bytes());
        for t in self.m.iter().chain(&self.v) {
            for &x in t.data() {
                x.write_le(out);
            }
        }
    }

    pub fn read_blob(&mut self, bytes: &[u8]) -> Result<usize, crate::NnError> {
        let scalars: usize = self.m.iter().map(Tensor::len).sum::<usize>() * 2;
        let need = 8 + scalars * T::BYTES;
        if bytes.len() < need {
            return Err(crate::NnError::Blob(format!(
                "optimizer blob has {} bytes, expected {need}",
                bytes.len()
            )));
        }
        self.step = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let mut off = 8;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in t.data_mut() {
                *x = T::read_le(&bytes[off..off + T::BYTES]);
                off += T::BYTES;
            }
        }
        Ok(off)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut adam = Adam::new(&store, 0.5, 0.999);
        for _ in 0..2000 {
            let g: Vec<f64> = store.get(id).data().iter().map(|x| 2.0 * x).collect();
            adam.step(&mut store, &[Some(Tensor::new(&[2], g))], 0.01);
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step has magnitude lr regardless of gradient scale
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(&[1], vec![1.0]));
        let mut adam = Adam::new(&store, 0.5, 0.999);
        adam.step(&mut store, &[Some(Tensor::new(&[1], vec![123.0]))], 0.1);
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-6);
    }
}
