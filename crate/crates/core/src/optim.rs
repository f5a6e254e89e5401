use crate::tensor::Float;

/// Adam with bias correction over a fixed set of flat parameter buffers.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(learning_rate: f64, sizes: &[usize]) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update. `grads[i]` of `None` leaves buffer `i` untouched
    /// but still advances the shared step counter.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Option<&[T]>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::of(self.learning_rate);
        let eps = T::of(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
