use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit-depth reduction: every coordinate snaps to the nearest multiple of the
/// bin width. Bins are anchored at zero and ties round away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bdr {
    bin_width: f64,
}

impl Bdr {
    pub fn new(bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width.is_finite()) {
            return Err(Error::Config(format!(
                "bin width must be positive and finite, got {bin_width}"
            )));
        }
        Ok(Self { bin_width })
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    #[inline]
    pub fn quantize(&self, v: f64) -> f64 {
        self.bin_width * (v / self.bin_width).round()
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter().map(|&v| self.quantize(v)).collect()
    }

    pub fn apply_in_place(&self, s: &mut [f64]) {
        s.iter_mut().for_each(|v| *v = self.quantize(*v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nearest_multiples() {
        let bdr = Bdr::new(0.1).unwrap();
        assert_eq!(bdr.apply(&[0.234, -0.06]), vec![0.2, -0.1]);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let bdr = Bdr::new(1.0).unwrap();
        assert_eq!(bdr.apply(&[0.5, -0.5, 1.5, -2.5]), vec![1.0, -1.0, 2.0, -3.0]);
    }

    #[test]
    fn rejects_non_positive_width() {
        assert!(Bdr::new(0.0).is_err());
        assert!(Bdr::new(-0.1).is_err());
        assert!(Bdr::new(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn idempotent(bw in 0.01f64..1.0, s in prop::collection::vec(-10.0f64..10.0, 1..8)) {
            let bdr = Bdr::new(bw).unwrap();
            let once = bdr.apply(&s);
            prop_assert_eq!(bdr.apply(&once), once);
        }

        #[test]
        fn bounded_sensitivity(
            bw in 0.02f64..1.0,
            frac in 0.0f64..1.0,
            s in prop::collection::vec(-10.0f64..10.0, 1..8),
            u in prop::collection::vec(-1.0f64..1.0, 8),
        ) {
            let bdr = Bdr::new(bw).unwrap();
            let eps = frac * bw * 3.0;
            let t: Vec<f64> = s.iter().zip(&u).map(|(a, b)| a + eps * b).collect();
            let gap = bdr.apply(&s).iter().zip(bdr.apply(&t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let bound = bw * (1.0 + (eps / bw).ceil());
            prop_assert!(gap <= bound * (1.0 + 1e-12));
        }
    }
}
