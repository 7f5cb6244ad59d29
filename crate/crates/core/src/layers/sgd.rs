use crate::error::{check_dim, Result};
use crate::layers::network::{Gradients, Network};

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Gradients>,
}

impl Default for Sgd {
    fn default() -> Self {
        Self::new(0.001, 0.9, 0.0005)
    }
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        let v = self
            .velocity
            .get_or_insert_with(|| Gradients::zeros_like(net));
        check_dim(v.layers.len(), grads.layers.len())?;
        for ((params, gl), vl) in net
            .params_mut()
            .into_iter()
            .zip(&grads.layers)
            .zip(&mut v.layers)
        {
            check_dim(params.len(), gl.len())?;
            for ((w, g), vel) in params.into_iter().zip(gl).zip(vl) {
                check_dim(w.len(), g.len())?;
                for ((wi, gi), vi) in w.iter_mut().zip(g).zip(vel.iter_mut()) {
                    *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                    *wi -= self.lr * *vi;
                }
            }
        }
        Ok(())
    }
}
