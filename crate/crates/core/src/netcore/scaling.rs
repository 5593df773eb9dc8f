use super::ScalePattern;
use crate::error::{arg_err, Result};
use crate::subnet::GatePattern;

/// Square-root gap scaling of a gate pattern.
///
/// Each active layer `j` gets `√(next − j)` where `next` is the following
/// active layer (or `L + 1` past the last one); inactive layers get 0. For a
/// pattern whose first layer is active the squared scales sum to `L`.
pub fn h_sqrt(g: &GatePattern) -> Result<ScalePattern> {
    let bits = g.bits();
    let depth = bits.len();
    if !bits.iter().any(|&b| b) {
        return arg_err("h_sqrt needs at least one active layer");
    }
    let mut scales = vec![0.0; depth];
    let mut next = depth;
    for j in (0..depth).rev() {
        if bits[j] {
            scales[j] = ((next - j) as f64).sqrt();
            next = j;
        }
    }
    Ok(ScalePattern(scales))
}

/// Scale 1 on active layers and 0 elsewhere. Unlike [`h_sqrt`], an empty
/// pattern is allowed and yields the bypassed network.
pub fn unit_scales(g: &GatePattern) -> ScalePattern {
    ScalePattern(g.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gp(bits: &[u8]) -> GatePattern {
        GatePattern::from_bits(bits.iter().map(|&b| b == 1).collect(), vec![]).unwrap()
    }

    #[test]
    fn full_pattern_is_all_ones() {
        assert_eq!(h_sqrt(&gp(&[1, 1, 1, 1])).unwrap().0, vec![1.0; 4]);
    }

    #[test]
    fn gap_after_first_layer() {
        let s = h_sqrt(&gp(&[1, 0, 1, 1])).unwrap().0;
        assert_eq!(s, vec![2f64.sqrt(), 0.0, 1.0, 1.0]);
        let sum: f64 = s.iter().map(|x| x * x).sum();
        assert!((sum - 4.0).abs() < 1e-15);
    }

    #[test]
    fn skipped_prefix() {
        let s = h_sqrt(&gp(&[0, 1, 0, 1])).unwrap().0;
        assert_eq!(s, vec![0.0, 2f64.sqrt(), 0.0, 1.0]);
        let sum: f64 = s.iter().map(|x| x * x).sum();
        assert!((sum - 3.0).abs() < 1e-15);
    }

    #[test]
    fn trailing_gap_uses_end() {
        assert_eq!(h_sqrt(&gp(&[1, 1, 0, 0])).unwrap().0, vec![1.0, 3f64.sqrt(), 0.0, 0.0]);
    }

    #[test]
    fn empty_pattern_rejected() {
        assert!(h_sqrt(&gp(&[0, 0, 0])).is_err());
        assert_eq!(unit_scales(&gp(&[0, 0])).0, vec![0.0, 0.0]);
    }
}
