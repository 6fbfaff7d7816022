//! Bit-packed and fixed-point tensor primitives.
//!
//! `BitTensor` stores {-1,+1} values one bit each (+1 is bit 1, -1 is bit 0),
//! packed LSB-first into `u64` words along the innermost axis. Every packed row
//! starts on a fresh word and trailing padding bits are kept at zero.
//!
//! `FixedTensor` holds signed 32-bit fixed-point values with `frac_bits`
//! fractional bits. All arithmetic on it saturates and reports how many
//! elements were clamped.

use crate::error::{Error, Result};

/// Default number of fractional bits (Q15.16).
pub const DEFAULT_FRAC_BITS: u8 = 16;

/// Dense real-valued tensor used by the training side.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl FloatTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Narrow to 32-bit storage (datasets are kept in this form on disk).
    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

/// Binarization used throughout: sign(0) = +1.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Bit-packed {-1,+1} tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    row_len: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

#[inline]
pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Mask selecting the low `n` bits of a word (`n` in 0..=64).
#[inline]
fn low_mask(n: usize) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

impl BitTensor {
    /// All -1 (all bits clear) tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let row_len = shape.last().copied().unwrap_or(1);
        let rows = Self::row_count_of(&shape);
        let words_per_row = words_for(row_len);
        Self {
            shape,
            row_len,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    fn row_count_of(shape: &[usize]) -> usize {
        if shape.is_empty() {
            1
        } else {
            shape[..shape.len() - 1].iter().product()
        }
    }

    /// Rebuild from raw words, validating that padding bits are zero.
    pub fn from_words(shape: Vec<usize>, words: Vec<u64>) -> Result<Self> {
        let mut t = Self::zeros(shape);
        if words.len() != t.words.len() {
            return Err(Error::Shape(format!(
                "bit tensor {:?} needs {} words, got {}",
                t.shape,
                t.words.len(),
                words.len()
            )));
        }
        t.words = words;
        if t.pad_bits() > 0 {
            let keep = low_mask(64 - t.pad_bits());
            for r in 0..t.rows() {
                let last = t.words[(r + 1) * t.words_per_row - 1];
                if last & !keep != 0 {
                    return Err(Error::Contract(format!("row {r} has non-zero padding bits")));
                }
            }
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn rows(&self) -> usize {
        Self::row_count_of(&self.shape)
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    /// Trailing padding bits in the last word of each row.
    pub fn pad_bits(&self) -> usize {
        self.words_per_row * 64 - self.row_len
    }

    pub fn len(&self) -> usize {
        self.rows() * self.row_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    #[inline]
    fn locate(&self, flat: usize) -> (usize, u64) {
        let (r, c) = (flat / self.row_len, flat % self.row_len);
        (r * self.words_per_row + c / 64, 1u64 << (c % 64))
    }

    /// Set the element at flat (row-major) index to +1 (`true`) or -1.
    pub fn set(&mut self, flat: usize, positive: bool) {
        let (w, bit) = self.locate(flat);
        if positive {
            self.words[w] |= bit;
        } else {
            self.words[w] &= !bit;
        }
    }

    pub fn get(&self, flat: usize) -> bool {
        let (w, bit) = self.locate(flat);
        self.words[w] & bit != 0
    }

    /// Element as ±1.
    pub fn value(&self, flat: usize) -> i32 {
        if self.get(flat) {
            1
        } else {
            -1
        }
    }

    pub fn unpack(&self) -> FloatTensor {
        let values = (0..self.len())
            .map(|i| if self.get(i) { 1.0 } else { -1.0 })
            .collect();
        FloatTensor {
            shape: self.shape.clone(),
            values,
        }
    }
}

/// Pack the signs of `v` into bits: bit i is 1 iff `v[i] >= 0`.
pub fn pack_signs(v: &FloatTensor) -> BitTensor {
    let mut out = BitTensor::zeros(v.shape.clone());
    for (i, &x) in v.values.iter().enumerate() {
        if x >= 0.0 {
            out.set(i, true);
        }
    }
    out
}

/// ±1 dot product of two packed rows of logical length `n`:
/// `2 * popcount(xnor(a, b)) - n`, with bits past `n` masked off.
pub fn xnor_popcount_dot(a: &[u64], b: &[u64], n: usize) -> Result<i64> {
    let need = words_for(n);
    if a.len() < need || b.len() < need || a.len() != b.len() {
        return Err(Error::Contract(format!(
            "xnor_popcount_dot: rows of {} and {} words cannot hold {} bits each",
            a.len(),
            b.len(),
            n
        )));
    }
    Ok(xnor_dot_unchecked(&a[..need], &b[..need], n))
}

#[inline]
pub(crate) fn xnor_dot_unchecked(a: &[u64], b: &[u64], n: usize) -> i64 {
    let mut matches = 0u32;
    let full = n / 64;
    for i in 0..full {
        matches += (!(a[i] ^ b[i])).count_ones();
    }
    let rem = n % 64;
    if rem > 0 {
        matches += (!(a[full] ^ b[full]) & low_mask(rem)).count_ones();
    }
    2 * matches as i64 - n as i64
}

/// Clamp a widened value into i32, counting the clamp.
#[inline]
pub fn saturate(v: i64, saturations: &mut u64) -> i32 {
    if v > i32::MAX as i64 {
        *saturations += 1;
        i32::MAX
    } else if v < i32::MIN as i64 {
        *saturations += 1;
        i32::MIN
    } else {
        v as i32
    }
}

/// Multiply by `2^k` with shifts only. Negative `k` is an arithmetic right
/// shift (floor); positive `k` saturates.
#[inline]
pub fn shift_i32(v: i32, k: i32, saturations: &mut u64) -> i32 {
    if k >= 0 {
        saturate((v as i64) << k, saturations)
    } else {
        v >> (-k)
    }
}

/// Like [`shift_i32`] but on a wide accumulator; the shift may exceed 31.
#[inline]
pub fn shift_i64(v: i64, k: i32) -> i64 {
    if k >= 0 {
        v.checked_shl(k as u32)
            .filter(|r| r >> k == v)
            .unwrap_or(if v < 0 { i64::MIN } else { i64::MAX })
    } else if k <= -64 {
        if v < 0 {
            -1
        } else {
            0
        }
    } else {
        v >> (-k)
    }
}

/// Signed 32-bit fixed-point tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
    pub frac_bits: u8,
}

impl FixedTensor {
    pub fn new(shape: Vec<usize>, values: Vec<i32>, frac_bits: u8) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                values.len()
            )));
        }
        if frac_bits > 30 {
            return Err(Error::Contract(format!("frac_bits {frac_bits} exceeds 30")));
        }
        Ok(Self {
            shape,
            values,
            frac_bits,
        })
    }

    /// Quantize with round-to-nearest (ties to even). Returns the number of
    /// elements that had to be clamped into range.
    pub fn from_float(t: &FloatTensor, frac_bits: u8) -> (Self, u64) {
        let mut sats = 0;
        let values = t
            .values
            .iter()
            .map(|&x| quantize_saturating(x, frac_bits, &mut sats))
            .collect();
        (
            Self {
                shape: t.shape.clone(),
                values,
                frac_bits,
            },
            sats,
        )
    }

    pub fn to_float(&self) -> FloatTensor {
        FloatTensor {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .map(|&v| to_real(v, self.frac_bits))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn to_real(raw: i32, frac_bits: u8) -> f64 {
    raw as f64 / (1u64 << frac_bits) as f64
}

/// Nearest representable raw value, or `None` when `x` is out of range.
pub fn quantize(x: f64, frac_bits: u8) -> Option<i32> {
    let scaled = (x * (1u64 << frac_bits) as f64).round_ties_even();
    if scaled.is_finite() && scaled >= i32::MIN as f64 && scaled <= i32::MAX as f64 {
        Some(scaled as i32)
    } else {
        None
    }
}

fn quantize_saturating(x: f64, frac_bits: u8, sats: &mut u64) -> i32 {
    match quantize(x, frac_bits) {
        Some(v) => v,
        None => {
            *sats += 1;
            if x.is_nan() || x < 0.0 {
                i32::MIN
            } else {
                i32::MAX
            }
        }
    }
}

/// Multiply every element by `2^k` using arithmetic shifts.
pub fn shift_scale(x: &FixedTensor, k: i32) -> Result<(FixedTensor, u64)> {
    if !(-31..=31).contains(&k) {
        return Err(Error::Contract(format!("shift exponent {k} outside -31..=31")));
    }
    let mut sats = 0;
    let values = x.values.iter().map(|&v| shift_i32(v, k, &mut sats)).collect();
    Ok((
        FixedTensor {
            shape: x.shape.clone(),
            values,
            frac_bits: x.frac_bits,
        },
        sats,
    ))
}

/// Elementwise saturating add.
pub fn fixed_add(x: &FixedTensor, y: &FixedTensor) -> Result<(FixedTensor, u64)> {
    if x.shape != y.shape {
        return Err(Error::Shape(format!(
            "fixed_add: {:?} vs {:?}",
            x.shape, y.shape
        )));
    }
    if x.frac_bits != y.frac_bits {
        return Err(Error::Contract(format!(
            "fixed_add: frac_bits {} vs {}",
            x.frac_bits, y.frac_bits
        )));
    }
    let mut sats = 0;
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(&a, &b)| saturate(a as i64 + b as i64, &mut sats))
        .collect();
    Ok((
        FixedTensor {
            shape: x.shape.clone(),
            values,
            frac_bits: x.frac_bits,
        },
        sats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dot(a: &[f64], b: &[f64]) -> i64 {
        a.iter().zip(b).map(|(x, y)| (x * y) as i64).sum()
    }

    #[test]
    fn pack_signs_examples() {
        let v = FloatTensor::new(vec![4], vec![1.5, -0.2, 0.0, -7.0]).unwrap();
        let b = pack_signs(&v);
        assert_eq!(b.words(), &[0b0101]);
        assert_eq!(b.pad_bits(), 60);

        let pos = FloatTensor::new(vec![64], vec![0.3; 64]).unwrap();
        assert_eq!(pack_signs(&pos).words(), &[u64::MAX]);
    }

    #[test]
    fn pack_unpack_matches_scalar_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = FloatTensor::new(vec![100], vals.clone()).unwrap();
        let back = pack_signs(&v).unpack();
        let expect: Vec<f64> = vals.iter().map(|&x| sign(x)).collect();
        assert_eq!(back.values, expect);
    }

    #[test]
    fn padding_is_zero_per_row() {
        let v = FloatTensor::new(vec![3, 70], vec![1.0; 210]).unwrap();
        let b = pack_signs(&v);
        assert_eq!(b.words_per_row(), 2);
        for r in 0..3 {
            assert_eq!(b.row(r)[1], (1u64 << 6) - 1);
        }
        let mut words = b.words().to_vec();
        words[1] |= 1 << 63;
        assert!(BitTensor::from_words(vec![3, 70], words).is_err());
    }

    #[test]
    fn xnor_dot_examples() {
        let a = pack_signs(&FloatTensor::new(vec![8], vec![1., -1., 1., 1., -1., -1., 1., 1.]).unwrap());
        assert_eq!(xnor_popcount_dot(a.words(), a.words(), 8).unwrap(), 8);

        let a = pack_signs(&FloatTensor::new(vec![4], vec![1., 1., -1., 1.]).unwrap());
        let b = pack_signs(&FloatTensor::new(vec![4], vec![1., -1., -1., -1.]).unwrap());
        assert_eq!(xnor_popcount_dot(a.words(), b.words(), 4).unwrap(), 0);

        let x = FloatTensor::new(vec![8], vec![1., -1., 1., 1., -1., -1., 1., 1.]).unwrap();
        let neg = FloatTensor::new(vec![8], x.values.iter().map(|v| -v).collect()).unwrap();
        let (a, b) = (pack_signs(&x), pack_signs(&neg));
        assert_eq!(xnor_popcount_dot(a.words(), b.words(), 8).unwrap(), -8);
    }

    #[test]
    fn xnor_dot_length_mismatch_is_error() {
        assert!(matches!(
            xnor_popcount_dot(&[0], &[0, 0], 10),
            Err(Error::Contract(_))
        ));
        assert!(xnor_popcount_dot(&[0], &[0], 65).is_err());
    }

    #[test]
    fn xnor_dot_random_pairs_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2023);
        for _ in 0..1000 {
            let n = rng.random_range(1..=300);
            let a: Vec<f64> = (0..n).map(|_| if rng.random() { 1.0 } else { -1.0 }).collect();
            let b: Vec<f64> = (0..n).map(|_| if rng.random() { 1.0 } else { -1.0 }).collect();
            let pa = pack_signs(&FloatTensor::new(vec![n], a.clone()).unwrap());
            let pb = pack_signs(&FloatTensor::new(vec![n], b.clone()).unwrap());
            assert_eq!(
                xnor_popcount_dot(pa.words(), pb.words(), n).unwrap(),
                naive_dot(&a, &b)
            );
        }
    }

    #[test]
    fn shift_scale_examples() {
        let t = FixedTensor::new(vec![3], vec![40, 3, -3], 16).unwrap();
        let (r, _) = shift_scale(&t, -2).unwrap();
        assert_eq!(r.values[0], 10);
        let (r, _) = shift_scale(&t, -1).unwrap();
        assert_eq!(&r.values[1..], &[1, -2]);
        assert!(shift_scale(&t, 32).is_err());
        assert!(shift_scale(&t, -32).is_err());

        let big = FixedTensor::new(vec![2], vec![i32::MAX / 2 + 1, -(1 << 30) - 1], 16).unwrap();
        let (r, sats) = shift_scale(&big, 1).unwrap();
        assert_eq!(r.values, vec![i32::MAX, i32::MIN]);
        assert_eq!(sats, 2);
    }

    #[test]
    fn fixed_add_examples() {
        let zero = FixedTensor::new(vec![3], vec![0; 3], 16).unwrap();
        let x = FixedTensor::new(vec![3], vec![5, -7, 123456], 16).unwrap();
        assert_eq!(fixed_add(&zero, &x).unwrap(), (x.clone(), 0));

        let a = FixedTensor::new(vec![1], vec![i32::MAX], 16).unwrap();
        let b = FixedTensor::new(vec![1], vec![1], 16).unwrap();
        let (r, sats) = fixed_add(&a, &b).unwrap();
        assert_eq!(r.values, vec![i32::MAX]);
        assert_eq!(sats, 1);

        let other = FixedTensor::new(vec![1], vec![1], 12).unwrap();
        assert!(fixed_add(&a, &other).is_err());
        assert!(fixed_add(&a, &x).is_err());
    }

    #[test]
    fn fixed_add_matches_widened_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<i32> = (0..500).map(|_| rng.random_range(-(1 << 29)..(1 << 29))).collect();
        let ys: Vec<i32> = (0..500).map(|_| rng.random_range(-(1 << 29)..(1 << 29))).collect();
        let a = FixedTensor::new(vec![500], xs.clone(), 16).unwrap();
        let b = FixedTensor::new(vec![500], ys.clone(), 16).unwrap();
        let (r, sats) = fixed_add(&a, &b).unwrap();
        assert_eq!(sats, 0);
        for i in 0..500 {
            assert_eq!(r.values[i] as i64, xs[i] as i64 + ys[i] as i64);
        }
    }

    #[test]
    fn shift_i64_handles_large_shifts() {
        assert_eq!(shift_i64(5, 3), 40);
        assert_eq!(shift_i64(-5, -1), -3);
        assert_eq!(shift_i64(-5, -70), -1);
        assert_eq!(shift_i64(1, 70), i64::MAX);
        assert_eq!(shift_i64(-1, 63), i64::MIN);
    }

    proptest! {
        #[test]
        fn pack_roundtrip(signs in proptest::collection::vec(any::<bool>(), 0..400)) {
            let n = signs.len();
            let vals: Vec<f64> = signs.iter().map(|&s| if s { 1.0 } else { -1.0 }).collect();
            let t = FloatTensor::new(vec![n], vals.clone()).unwrap();
            prop_assert_eq!(pack_signs(&t).unpack().values, vals);
        }

        #[test]
        fn float_fixed_roundtrip_within_half_ulp(x in -30000.0f64..30000.0, f in 0u8..=16) {
            let t = FloatTensor::new(vec![1], vec![x]).unwrap();
            let (q, sats) = FixedTensor::from_float(&t, f);
            prop_assert_eq!(sats, 0);
            let back = q.to_float().values[0];
            prop_assert!((back - x).abs() <= 2f64.powi(-(f as i32) - 1));
        }

        #[test]
        fn shift_left_then_right_is_identity(v in -(1i32 << 20)..(1i32 << 20), k in 0i32..=10) {
            let t = FixedTensor::new(vec![1], vec![v], 16).unwrap();
            let (up, sats) = shift_scale(&t, k).unwrap();
            prop_assert_eq!(sats, 0);
            let (down, _) = shift_scale(&up, -k).unwrap();
            prop_assert_eq!(down.values[0], v);
        }
    }
}
