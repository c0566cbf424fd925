//! Fixed-step classical Runge-Kutta over flat `f64` state slices.

/// Scratch buffers for [`rk4_step`], sized once per integration.
#[derive(Clone, Debug)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.k1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k1.is_empty()
    }

    /// Advances `y` from `t` to `t + h` for `y' = f(t, y)`.
    pub fn step<F>(&mut self, f: &mut F, t: f64, y: &mut [f64], h: f64)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        debug_assert_eq!(n, self.k1.len());
        f(t, y, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k1[i];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k2[i];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = y[i] + h * self.k3[i];
        }
        f(t + h, &self.tmp, &mut self.k4);
        for i in 0..n {
            y[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Integrates `y' = f(t, y)` over `[t0, t1]` with `steps` equal RK4 steps,
/// calling `after_step(step_index, t, y)` after each step; a `false` return
/// aborts and reports the step index.
pub fn rk4_integrate<F, G>(mut f: F, y: &mut [f64], t0: f64, t1: f64, steps: usize, mut after_step: G) -> Result<(), usize>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    G: FnMut(usize, f64, &[f64]) -> bool,
{
    let steps = steps.max(1);
    let h = (t1 - t0) / steps as f64;
    let mut rk = Rk4::new(y.len());
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        rk.step(&mut f, t, y, h);
        if !after_step(s + 1, t + h, y) {
            return Err(s + 1);
        }
    }
    Ok(())
}
