//! Named parameter tensors shared by every learned component.

use std::sync::Arc;

use avguard_nn::{Real, Tensor};
use rand::Rng;

/// Something that owns trainable tensors.
///
/// `visit` and `visit_mut` must walk the same tensors in the same order;
/// checkpoints and optimizer state rely on it.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor<T>>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor<T>>));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.shape().to_vec())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn uniform_init<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

/// Copies every parameter of `src` into a module of another precision with
/// the same structure.
pub fn cast_module<S: Real, D: Real>(src: &impl Module<S>, dst: &mut impl Module<D>) {
    let mut values = Vec::new();
    src.visit("", &mut |name, t| values.push((name, t.cast::<D>())));
    let mut it = values.into_iter();
    dst.visit_mut("", &mut |name, t| {
        let (src_name, v) = it.next().expect("modules have the same structure");
        assert_eq!(src_name, name, "modules have the same structure");
        assert_eq!(v.shape(), t.shape());
        *t = Arc::new(v);
    });
}
