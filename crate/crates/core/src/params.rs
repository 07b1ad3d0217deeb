//! Named parameter collections and their binding onto a [`Tape`].
//!
//! Parameter structs are generic over the slot type: `Foo<Tensor>` owns the
//! values, `Foo<Var>` is the same structure bound onto a tape for one forward
//! pass. Names are dot-joined paths such as `projector.emotion.w_in`.

use std::collections::BTreeMap;

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// A structure whose leaves are named tensors.
pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _| out.push(name));
        out
    }

    /// Name to value, in canonical (sorted) order.
    fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, t| {
            out.insert(name, t.clone());
        });
        out
    }

    /// Per-tensor bitwise checksums.
    fn checksums(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, t| {
            out.insert(name, t.checksum());
        });
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Binds named tensors as tape leaves, deciding trainability by name.
pub struct Binding {
    trainable: Box<dyn Fn(&str) -> bool>,
    bound: Vec<(String, Var)>,
}

impl Binding {
    pub fn new(trainable: impl Fn(&str) -> bool + 'static) -> Self {
        Binding {
            trainable: Box::new(trainable),
            bound: Vec::new(),
        }
    }

    /// Every parameter receives a gradient.
    pub fn all() -> Self {
        Self::new(|_| true)
    }

    /// No parameter receives a gradient (evaluation).
    pub fn frozen() -> Self {
        Self::new(|_| false)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        (self.trainable)(name)
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, value: &Tensor) -> Var {
        if self.is_trainable(name) {
            let var = tape.param(value.clone());
            self.bound.push((name.to_string(), var));
            var
        } else {
            tape.constant(value.clone())
        }
    }

    /// Trainable parameters bound so far.
    pub fn trainable_vars(&self) -> &[(String, Var)] {
        &self.bound
    }

    /// Collects the gradient of every trainable parameter by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Types that can be bound onto a tape as a structure of [`Var`]s.
pub trait Bind {
    type Bound;
    fn bind(&self, prefix: &str, tape: &mut Tape, binding: &mut Binding) -> Self::Bound;
}

/// Declares a flat parameter struct generic over its slot type, with
/// [`ParamSet`] and [`Bind`] implementations whose names are the field names.
macro_rules! param_struct {
    (
        $(#[$meta:meta])*
        pub struct $name:ident { $( $(#[$fmeta:meta])* pub $field:ident ),* $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = $crate::tensor::Tensor> {
            $( $(#[$fmeta])* pub $field: T, )*
        }

        impl $crate::params::ParamSet for $name<$crate::tensor::Tensor> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::tensor::Tensor),
            ) {
                $( f($crate::params::join(prefix, stringify!($field)), &self.$field); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &mut $crate::tensor::Tensor),
            ) {
                $( f($crate::params::join(prefix, stringify!($field)), &mut self.$field); )*
            }
        }

        impl $crate::params::Bind for $name<$crate::tensor::Tensor> {
            type Bound = $name<$crate::autograd::Var>;

            fn bind(
                &self,
                prefix: &str,
                tape: &mut $crate::autograd::Tape,
                binding: &mut $crate::params::Binding,
            ) -> Self::Bound {
                $name {
                    $( $field: binding.bind(
                        tape,
                        &$crate::params::join(prefix, stringify!($field)),
                        &self.$field,
                    ), )*
                }
            }
        }
    };
}

pub(crate) use param_struct;

impl ParamSet for Vec<Tensor> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, t) in self.iter().enumerate() {
            f(join(prefix, &i.to_string()), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(join(prefix, &i.to_string()), t);
        }
    }
}

impl Bind for Vec<Tensor> {
    type Bound = Vec<Var>;

    fn bind(&self, prefix: &str, tape: &mut Tape, binding: &mut Binding) -> Vec<Var> {
        self.iter()
            .enumerate()
            .map(|(i, t)| binding.bind(tape, &join(prefix, &i.to_string()), t))
            .collect()
    }
}

impl ParamSet for BTreeMap<String, Tensor> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (name, t) in self {
            f(join(prefix, name), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (name, t) in self.iter_mut() {
            f(join(prefix, name), t);
        }
    }
}
