use num_complex::Complex64;

use crate::error::{Error, Result};

/// Complex vector of length `len` stored as `2 len` reals: all real parts,
/// then all imaginary parts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexPacking {
    len: usize,
}

impl ComplexPacking {
    pub fn new(len: usize) -> Self {
        ComplexPacking { len }
    }

    pub fn complex_len(&self) -> usize {
        self.len
    }

    pub fn real_len(&self) -> usize {
        2 * self.len
    }

    pub fn pack(&self, z: &[Complex64]) -> Vec<f64> {
        assert_eq!(z.len(), self.len, "complex vector length");
        z.iter().map(|c| c.re).chain(z.iter().map(|c| c.im)).collect()
    }

    pub fn unpack(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        if x.len() != 2 * self.len {
            return Err(Error::Dimension {
                expected: 2 * self.len,
                found: x.len(),
            });
        }
        let (re, im) = x.split_at(self.len);
        Ok(re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_real_then_imaginary() {
        let p = ComplexPacking::new(2);
        let z = [Complex64::new(1.0, 2.0), Complex64::new(3.0, -4.0)];
        assert_eq!(p.pack(&z), vec![1.0, 3.0, 2.0, -4.0]);
        assert!(p.unpack(&[1.0, 2.0, 3.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_preserves_values_and_norm(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20)) {
            let z: Vec<Complex64> = v.iter().map(|&(a, b)| Complex64::new(a, b)).collect();
            let p = ComplexPacking::new(z.len());
            let packed = p.pack(&z);
            prop_assert_eq!(p.unpack(&packed).unwrap(), z.clone());
            let complex_norm: f64 = z.iter().map(|c| c.norm_sqr()).sum();
            let real_norm: f64 = packed.iter().map(|x| x * x).sum();
            prop_assert!((complex_norm - real_norm).abs() <= 1e-12 * complex_norm.max(1.0));
        }
    }
}
