//! Minimal layer toolkit with hand-written backward passes.
//!
//! Every trainable structure implements [`Params`]; its gradient is a value
//! of the same type, so accumulation, optimization and checkpointing all work
//! through the same visitor.

pub mod act;
pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod linear;
pub mod norm;

use ndarray::{Array1, Array2};

pub use adam::Adam;
pub use linear::Linear;
pub use norm::LayerNorm;

/// Named-parameter visitor. Names are dot-joined paths, shapes row-major.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn visit_array1(
    name: &str,
    a: &Array1<f64>,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(name, &[a.len()], a.as_slice().expect("contiguous"));
}

pub fn visit_array1_mut(
    name: &str,
    a: &mut Array1<f64>,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = [a.len()];
    f(name, &shape, a.as_slice_mut().expect("contiguous"));
}

pub fn visit_array2(
    name: &str,
    a: &Array2<f64>,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    let (r, c) = a.dim();
    f(name, &[r, c], a.as_slice().expect("contiguous"));
}

pub fn visit_array2_mut(
    name: &str,
    a: &mut Array2<f64>,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let (r, c) = a.dim();
    f(name, &[r, c], a.as_slice_mut().expect("contiguous"));
}

impl Params for Array1<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array1(prefix, self, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array1_mut(prefix, self, f);
    }
}

impl<P: Params> Params for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

pub fn num_params<P: Params + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, d| n += d.len());
    n
}

pub fn flatten<P: Params + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, d| out.extend_from_slice(d));
    out
}

/// Overwrites all parameters from a flat vector produced by [`flatten`].
pub fn load_flat<P: Params + ?Sized>(p: &mut P, flat: &[f64]) {
    let mut off = 0;
    p.visit_mut("", &mut |_, _, d| {
        d.copy_from_slice(&flat[off..off + d.len()]);
        off += d.len();
    });
    assert_eq!(off, flat.len(), "flat parameter length mismatch");
}

/// Same structure, every value zero. Used as a gradient accumulator.
pub fn zeros_like<P: Params + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, _, d| d.fill(0.0));
    z
}

/// `dst += src`, element-wise over matching structures.
pub fn add_assign<P: Params>(dst: &mut P, src: &P) {
    let flat = flatten(src);
    let mut off = 0;
    dst.visit_mut("", &mut |_, _, d| {
        let n = d.len();
        for (x, y) in d.iter_mut().zip(&flat[off..off + n]) {
            *x += y;
        }
        off += n;
    });
}

/// Deterministic content hash of all parameter values (names included).
pub fn param_hash<P: Params + ?Sized>(p: &P) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    p.visit("", &mut |name, shape, d| {
        h.update(name.as_bytes());
        for s in shape {
            h.update((*s as u64).to_le_bytes());
        }
        for x in d {
            h.update(x.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

pub fn all_finite<P: Params + ?Sized>(p: &P) -> bool {
    let mut ok = true;
    p.visit("", &mut |_, _, d| ok &= d.iter().all(|x| x.is_finite()));
    ok
}
