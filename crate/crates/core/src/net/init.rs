use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::HasParams;
use crate::Scalar;

pub const INIT_STD: f64 = 0.02;

/// Convolution weights from `N(0, std^2)`, normalization scale 1, all shifts and biases 0.
/// Running normalization statistics restart at mean 0, variance 1.
pub fn init_gaussian<T: Scalar>(net: &mut impl HasParams<T>, std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("finite std");
    for (name, p) in net.params_mut() {
        if name.ends_with("weight") {
            p.value
                .iter_mut()
                .for_each(|v| *v = T::c(normal.sample(rng)));
        } else if name.ends_with("scale") || name.ends_with("running_var") {
            p.value.iter_mut().for_each(|v| *v = T::one());
        } else {
            p.value.iter_mut().for_each(|v| *v = T::zero());
        }
        p.zero_grad();
    }
}

/// He-normal weights, `std = sqrt(2 / fan_in)`, zero biases.
pub fn init_he<T: Scalar>(net: &mut impl HasParams<T>, rng: &mut impl Rng) {
    for (name, p) in net.params_mut() {
        if name.ends_with("weight") {
            // (out, in, k, k) for convolutions
            let fan_in: usize = p.shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            p.value
                .iter_mut()
                .for_each(|v| *v = T::c(normal.sample(rng)));
        } else {
            p.value.iter_mut().for_each(|v| *v = T::zero());
        }
        p.zero_grad();
    }
}
