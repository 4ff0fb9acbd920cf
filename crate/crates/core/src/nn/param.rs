use alloc::vec;
use alloc::vec::Vec;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self { value, grad: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters. Visitation order must be stable; the
/// optimizer keys its moment buffers on it.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));
}

pub fn zero_grad(m: &mut dyn Parameters) {
    m.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
}

pub fn grad_norm(m: &dyn Parameters) -> f64 {
    let mut s = 0.0;
    m.visit(&mut |p| s += p.grad.iter().map(|g| g * g).sum::<f64>());
    crate::math::sqrt(s)
}

pub fn num_params(m: &dyn Parameters) -> usize {
    let mut n = 0;
    m.visit(&mut |p| n += p.len());
    n
}

/// FNV-1a over the bit patterns of every parameter value. Bit-exact: any
/// change to any weight changes the checksum with overwhelming probability.
pub fn checksum(m: &dyn Parameters) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    m.visit(&mut |p| {
        for v in &p.value {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    });
    h
}
