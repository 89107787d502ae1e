//! Fixed-step explicit integration.

/// A state that can be advanced by a scaled rate of the same shape.
pub trait OdeState: Clone {
    /// `self + h · rate`
    fn axpy(&self, h: f64, rate: &Self) -> Self;
}

impl OdeState for Vec<f64> {
    fn axpy(&self, h: f64, rate: &Self) -> Self {
        debug_assert_eq!(self.len(), rate.len());
        self.iter().zip(rate).map(|(x, d)| x + h * d).collect()
    }
}

impl<const N: usize> OdeState for [f64; N] {
    fn axpy(&self, h: f64, rate: &Self) -> Self {
        let mut out = *self;
        for (o, d) in out.iter_mut().zip(rate) {
            *o += h * d;
        }
        out
    }
}

/// One classical fourth-order Runge–Kutta step of `ẋ = f(t, x)`.
pub fn rk4<S, E, F>(t: f64, state: &S, dt: f64, mut f: F) -> Result<S, E>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S, E>,
{
    let half = 0.5 * dt;
    let k1 = f(t, state)?;
    let k2 = f(t + half, &state.axpy(half, &k1))?;
    let k3 = f(t + half, &state.axpy(half, &k2))?;
    let k4 = f(t + dt, &state.axpy(dt, &k3))?;
    // x + dt/6 (k1 + 2 k2 + 2 k3 + k4), accumulated stage by stage
    Ok(state.axpy(dt / 6.0, &k1).axpy(dt / 3.0, &k2).axpy(dt / 3.0, &k3).axpy(dt / 6.0, &k4))
}
