//! Fully-connected layer.

use super::{he_normal, Params};
use ndarray::{Array2, ArrayD, Ix2, IxDyn};
use rand_chacha::ChaCha8Rng;

/// `y = x Wᵀ + b` on `(N, in) → (N, out)`. Weight layout `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    /// When true, weight and bias start at zero (used for final heads that
    /// must begin with uniform predictions).
    pub zero_init: bool,
}

#[derive(Debug)]
pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Linear {
            name: name.into(),
            in_features,
            out_features,
            zero_init: false,
        }
    }

    pub fn with_zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    fn weight_name(&self) -> String {
        format!("{}/weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    pub fn declare(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        let w = if self.zero_init {
            ArrayD::zeros(IxDyn(&[self.out_features, self.in_features]))
        } else {
            he_normal(
                rng,
                &[self.out_features, self.in_features],
                self.in_features,
            )
        };
        params.declare(&self.weight_name(), w, true);
        params.declare(&self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_features])), true);
    }

    pub fn forward(&self, params: &Params, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        assert_eq!(x.dim().1, self.in_features, "{}: input features", self.name);
        let w = params
            .get(&self.weight_name())
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let b = params.get(&self.bias_name());
        let mut y = x.dot(&w.t());
        for o in 0..self.out_features {
            y.column_mut(o).mapv_inplace(|v| v + b[[o]]);
        }
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        params: &mut Params,
        cache: &LinearCache,
        gy: &Array2<f64>,
    ) -> Array2<f64> {
        let w = params
            .get(&self.weight_name())
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let dw = gy.t().dot(&cache.x); // (out, in)
        let db = gy.sum_axis(ndarray::Axis(0));
        params.accumulate_grad(&self.weight_name(), &dw.into_dyn());
        params.accumulate_grad(&self.bias_name(), &db.into_dyn());
        gy.dot(&w)
    }
}
