//! Stochastic gradient descent with momentum, decoupled-from-nothing classic
//! L2 weight decay, and a cosine-annealed learning rate.

use crate::nn::Params;
use ndarray::ArrayD;
use std::collections::HashMap;

/// Cosine-annealed learning rate at `epoch` out of `cap` total epochs:
/// `initial` at epoch 0, decaying along a half cosine to 0 at `epoch == cap`.
pub fn cosine_lr(initial: f64, epoch: usize, cap: usize) -> f64 {
    if cap == 0 {
        return initial;
    }
    let t = (epoch.min(cap)) as f64 / cap as f64;
    initial * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Momentum SGD over a [`Params`] store.
///
/// The update per trainable tensor is the standard one:
/// `g ← ∇w + weight_decay · w`, `v ← momentum · v + g`, `w ← w − lr · v`,
/// with `lr` taken from the cosine schedule at the current epoch.  Frozen
/// name prefixes are skipped entirely — neither the value nor the velocity
/// moves, so unfreezing later resumes from a clean slate.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch count the cosine schedule anneals over.
    pub epoch_cap: usize,
    epoch: usize,
    velocity: HashMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(initial_lr: f64, momentum: f64, weight_decay: f64, epoch_cap: usize) -> Self {
        Sgd {
            initial_lr,
            momentum,
            weight_decay,
            epoch_cap,
            epoch: 0,
            velocity: HashMap::new(),
        }
    }

    /// Positions the schedule; affects every subsequent [`Sgd::step`].
    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// Learning rate in force at the current epoch.
    pub fn lr(&self) -> f64 {
        cosine_lr(self.initial_lr, self.epoch, self.epoch_cap)
    }

    /// Applies one update from the accumulated gradients.  Tensors marked
    /// non-trainable (running statistics) and tensors under any prefix in
    /// `frozen_prefixes` are left untouched.
    pub fn step(&mut self, params: &mut Params, frozen_prefixes: &[&str]) {
        let lr = self.lr();
        let wd = self.weight_decay;
        let mu = self.momentum;
        let names: Vec<String> = params
            .iter()
            .filter(|(name, p)| {
                p.trainable && !frozen_prefixes.iter().any(|pre| name.starts_with(pre))
            })
            .map(|(name, _)| name.to_string())
            .collect();
        for name in names {
            let param = params.get_param(&name);
            let mut g = param.grad.clone();
            if wd != 0.0 {
                g.zip_mut_with(&param.value, |gi, &wi| *gi += wd * wi);
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            v.zip_mut_with(&g, |vi, &gi| *vi = mu * *vi + gi);
            let new_value = &param.value - &v.mapv(|vi| lr * vi);
            params.set(&name, new_value).expect("shape preserved");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn store_with(name: &str, vals: &[f64], trainable: bool) -> Params {
        let mut p = Params::new();
        p.declare(name, arr1(vals).into_dyn(), trainable);
        p
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-15);
        // Monotone decrease across the whole range.
        let lrs: Vec<f64> = (0..=100).map(|e| cosine_lr(0.007, e, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn plain_step_matches_the_hand_formula() {
        let mut p = store_with("w", &[1.0, -2.0], true);
        p.accumulate_grad("w", &arr1(&[0.5, 0.25]).into_dyn());
        let mut opt = Sgd::new(0.1, 0.0, 0.0, 10);
        opt.step(&mut p, &[]);
        assert_eq!(p.get("w"), &arr1(&[1.0 - 0.05, -2.0 - 0.025]).into_dyn());
    }

    #[test]
    fn momentum_and_decay_match_a_two_step_hand_simulation() {
        let mut p = store_with("w", &[2.0], true);
        let mut opt = Sgd::new(0.5, 0.9, 0.1, 100);

        // Step 1: g = 1 + 0.1·2 = 1.2, v = 1.2, w = 2 − lr·1.2.
        p.accumulate_grad("w", &arr1(&[1.0]).into_dyn());
        let lr0 = opt.lr();
        opt.step(&mut p, &[]);
        let w1 = 2.0 - lr0 * 1.2;
        assert!((p.get("w")[[0]] - w1).abs() < 1e-12);

        // Step 2 at the next epoch: g = 0.5 + 0.1·w1, v = 0.9·1.2 + g.
        p.zero_grads();
        p.accumulate_grad("w", &arr1(&[0.5]).into_dyn());
        opt.set_epoch(1);
        let lr1 = opt.lr();
        opt.step(&mut p, &[]);
        let v2 = 0.9 * 1.2 + (0.5 + 0.1 * w1);
        assert!((p.get("w")[[0]] - (w1 - lr1 * v2)).abs() < 1e-12);
        assert!(lr1 < lr0);
    }

    #[test]
    fn frozen_prefixes_and_non_trainables_do_not_move() {
        let mut p = Params::new();
        p.declare("encoder/w", arr1(&[1.0]).into_dyn(), true);
        p.declare("head/w", arr1(&[1.0]).into_dyn(), true);
        p.declare("head/bn/running_mean", arr1(&[0.5]).into_dyn(), false);
        for name in ["encoder/w", "head/w", "head/bn/running_mean"] {
            p.accumulate_grad(name, &arr1(&[1.0]).into_dyn());
        }
        let mut opt = Sgd::new(0.1, 0.9, 0.0, 10);
        opt.step(&mut p, &["encoder/"]);
        assert_eq!(p.get("encoder/w")[[0]], 1.0);
        assert_eq!(p.get("head/bn/running_mean")[[0]], 0.5);
        assert!(p.get("head/w")[[0]] < 1.0);
        assert!(
            !opt.velocity.contains_key("encoder/w"),
            "frozen tensors accumulate no velocity"
        );
    }

    #[test]
    fn descends_a_quadratic_to_its_minimum() {
        // f(w) = ½‖w − 3‖², ∇f = w − 3.
        let mut p = store_with("w", &[0.0], true);
        let mut opt = Sgd::new(0.3, 0.9, 0.0, 200);
        for epoch in 0..200 {
            opt.set_epoch(epoch);
            p.zero_grads();
            let g = p.get("w")[[0]] - 3.0;
            p.accumulate_grad("w", &arr1(&[g]).into_dyn());
            opt.step(&mut p, &[]);
        }
        assert!((p.get("w")[[0]] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn weight_decay_shrinks_an_unused_weight() {
        let mut p = store_with("w", &[4.0], true);
        let mut opt = Sgd::new(0.5, 0.0, 0.1, 1000);
        for epoch in 0..50 {
            opt.set_epoch(epoch);
            p.zero_grads(); // gradient stays zero: only decay acts
            opt.step(&mut p, &[]);
        }
        let w = p.get("w")[[0]];
        assert!(w > 0.0 && w < 4.0 * (1.0 - 0.5 * 0.1f64).powi(49));
    }
}
