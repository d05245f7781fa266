/// Classic fourth-order Runge-Kutta with reusable buffers.
#[derive(Debug, Clone)]
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    /// Advances the autonomous system `x' = f(x)` by `h`.
    pub(crate) fn step<F>(&mut self, x: &mut [f64], h: f64, mut f: F)
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let n = x.len();
        f(x, &mut self.k1);
        for k in 0..n {
            self.tmp[k] = x[k] + 0.5 * h * self.k1[k];
        }
        f(&self.tmp, &mut self.k2);
        for k in 0..n {
            self.tmp[k] = x[k] + 0.5 * h * self.k2[k];
        }
        f(&self.tmp, &mut self.k3);
        for k in 0..n {
            self.tmp[k] = x[k] + h * self.k3[k];
        }
        f(&self.tmp, &mut self.k4);
        for k in 0..n {
            x[k] += h / 6.0 * (self.k1[k] + 2.0 * self.k2[k] + 2.0 * self.k3[k] + self.k4[k]);
        }
    }
}
