//! Parameter trees: structs generic over their leaf type so the same layout
//! holds tensors, tape handles, gradients or optimizer momenta.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest as _, Sha256};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Visits the leaves of a parameter tree in a fixed order with stable names.
pub trait ParamTree<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T));
}

/// Structures whose layout can be rebuilt over a different leaf type.
pub trait MapLeaves<T> {
    type Mapped<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U>;
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Declares a flat parameter struct generic over its leaf type.
macro_rules! param_struct {
    ($(#[$meta:meta])* pub struct $name:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $($(#[$fmeta])* pub $field: T,)*
        }

        impl<T> $crate::params::ParamTree<T> for $name<T> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $(f($crate::params::join(prefix, stringify!($field)), &self.$field);)*
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
                $(f($crate::params::join(prefix, stringify!($field)), &mut self.$field);)*
            }
        }

        impl<T> $crate::params::MapLeaves<T> for $name<T> {
            type Mapped<U> = $name<U>;
            fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)* }
            }
        }
    };
}
pub(crate) use param_struct;

impl<T, P: ParamTree<T>> ParamTree<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T, P: MapLeaves<T>> MapLeaves<T> for Vec<P> {
    type Mapped<U> = Vec<P::Mapped<U>>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U> {
        self.iter().map(|p| p.map_leaves(f)).collect()
    }
}

/// A single tensor is a one-leaf tree.
impl ParamTree<Tensor> for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(prefix.to_string(), self);
    }
}

impl MapLeaves<Tensor> for Tensor {
    type Mapped<U> = U;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&Tensor) -> U) -> U {
        f(self)
    }
}

impl<'t> MapLeaves<Var<'t>> for Var<'t> {
    type Mapped<U> = U;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&Var<'t>) -> U) -> U {
        f(self)
    }
}

pub fn leaves<T, P: ParamTree<T> + ?Sized>(tree: &P) -> Vec<(String, &T)> {
    let mut out = Vec::new();
    tree.visit("", &mut |name, t| out.push((name, t)));
    out
}

pub fn leaves_mut<T, P: ParamTree<T> + ?Sized>(tree: &mut P) -> Vec<(String, &mut T)> {
    let mut out = Vec::new();
    tree.visit_mut("", &mut |name, t| out.push((name, t)));
    out
}

pub fn count_params<P: ParamTree<Tensor> + ?Sized>(tree: &P) -> usize {
    leaves(tree).iter().map(|(_, t)| t.len()).sum()
}

/// Records every leaf of `tree` on `tape`, trainable or frozen.
pub fn bind<'t, P>(tape: &'t Tape, tree: &P, trainable: bool) -> P::Mapped<Var<'t>>
where
    P: MapLeaves<Tensor>,
{
    tree.map_leaves(&mut |t: &Tensor| tape.leaf(t.clone(), trainable))
}

/// Gradients of a bound tree; leaves that received none get zeros.
pub fn grads_of<'t, P>(bound: &P, grads: &Gradients) -> P::Mapped<Tensor>
where
    P: MapLeaves<Var<'t>>,
{
    bound.map_leaves(&mut |v: &Var<'t>| grads.get_or_zeros(*v))
}

pub fn zeros_like<P: MapLeaves<Tensor>>(tree: &P) -> P::Mapped<Tensor> {
    tree.map_leaves(&mut |t: &Tensor| Tensor::zeros(t.shape().to_vec()))
}

/// SHA-256 over names, shapes and little-endian values of every leaf.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ParamDigest(pub [u8; 32]);

impl ParamDigest {
    pub fn of<P: ParamTree<Tensor> + ?Sized>(tree: &P) -> Self {
        let mut h = Sha256::new();
        for (name, t) in leaves(tree) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        ParamDigest(h.finalize().into())
    }

    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for ParamDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ParamDigest({})", &self.hex()[..16])
    }
}

impl fmt::Display for ParamDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

/// Flattens a tree into a name → tensor map, with `prefix` on every name.
pub fn export<P: ParamTree<Tensor> + ?Sized>(tree: &P, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
    tree.visit(prefix, &mut |name, t| {
        out.insert(name, t.clone());
    });
}

/// Fills an already-shaped tree from a name → tensor map.
pub fn import<P: ParamTree<Tensor> + ?Sized>(
    tree: &mut P,
    prefix: &str,
    src: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut missing = None;
    tree.visit_mut(prefix, &mut |name, t| {
        if missing.is_some() {
            return;
        }
        match src.get(&name) {
            Some(v) if v.shape() == t.shape() => *t = v.clone(),
            Some(v) => {
                missing = Some(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                ))
            }
            None => missing = Some(format!("tensor {name} missing")),
        }
    });
    match missing {
        Some(reason) => Err(Error::Config(reason)),
        None => Ok(()),
    }
}
