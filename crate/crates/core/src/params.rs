//! Parameter structs generic over their leaf type.
//!
//! The same struct holds `Tensor`s for storage and checkpoints, and graph
//! `Var`s during a differentiable forward pass (`params.map(|t| g.leaf(..))`).
//! `visit` yields leaves in a fixed, named order used for optimizer state and
//! checkpoint file names.

use rand::Rng;

use crate::tensor::Tensor;

/// Leaf visitor: receives the dotted parameter name and the leaf.
pub type Visitor<'a, 'b, T> = dyn FnMut(String, &'a T) + 'b;
pub type VisitorMut<'b, T> = dyn FnMut(String, &mut T) + 'b;

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = $crate::tensor::Tensor> {
            $($(#[$fmeta])* pub $field: T,)+
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)+ }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut $crate::params::Visitor<'a, '_, T>) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)+
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut $crate::params::VisitorMut<'_, T>) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)+
            }
        }
    };
}

pub(crate) use param_struct;

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Collects `(name, tensor)` pairs from any visit function.
pub fn named<'a, T>(visit: impl FnOnce(&mut Visitor<'a, '_, T>)) -> Vec<(String, &'a T)> {
    let mut out = Vec::new();
    visit(&mut |name, t| out.push((name, t)));
    out
}
