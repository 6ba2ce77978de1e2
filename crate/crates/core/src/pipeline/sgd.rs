//! Stochastic gradient descent with heavy-ball momentum and L2 weight decay.

use sfda_tensor::{Gradients, Real};

use crate::error::{CoreError, Result};
use crate::model::ModelState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// One update of every trainable parameter:
    /// `g ← ∇ + wd·θ`, `v ← μ·v + g` (`v ← g` on the first step), `θ ← θ − lr·v`.
    ///
    /// `vars[i]` is the tape handle of parameter `i`. Frozen parameters and
    /// parameters without a gradient are left untouched.
    #[allow(clippy::needless_range_loop)]
    pub fn step<T: Real>(
        &self,
        state: &mut ModelState<T>,
        vars: &[sfda_tensor::Var],
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        if vars.len() != state.params().len() {
            return Err(CoreError::Invariant("parameter handles out of sync with state".into()));
        }
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for i in 0..vars.len() {
            if state.params()[i].frozen {
                continue;
            }
            let Some(g) = grads.get(vars[i]) else { continue };
            let mut d: Vec<T> = g
                .data()
                .iter()
                .zip(state.params()[i].value.data())
                .map(|(&g, &p)| g + wd * p)
                .collect();
            let slot = &mut state.momentum_mut()[i];
            match slot {
                Some(v) => {
                    for (v, d) in v.data_mut().iter_mut().zip(d.iter_mut()) {
                        *v = mu * *v + *d;
                        *d = *v;
                    }
                }
                None if self.momentum != 0.0 => {
                    *slot = Some(sfda_tensor::Tensor::new(g.shape().to_vec(), d.clone())?);
                }
                None => {}
            }
            let p = &mut state.params_mut()[i].value;
            for (p, d) in p.data_mut().iter_mut().zip(&d) {
                *p = *p - lr * *d;
            }
        }
        Ok(())
    }
}
