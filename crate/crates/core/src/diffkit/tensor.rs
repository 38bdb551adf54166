use rand::Rng;
use rand_distr::StandardNormal;

use super::DiffError;

/// Dense row-major `f64` array.
///
/// A `Tensor` is plain data. Gradient tracking happens when it is placed on a
/// [`Tape`](super::Tape), which hands back a [`Var`](super::Var) handle.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        if shape.contains(&0) {
            return Err(DiffError::Shape {
                op: "tensor",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DiffError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {numel} values, data has {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for callers that have already validated extents.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::from_parts(vec![values.len()], values.to_vec())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Self {
        Self::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, DiffError> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Correctly rounded sum of finite values (Shewchuk partials with a
/// half-even final step). The result does not depend on term order.
/// Falls back to plain summation if any term is not finite.
pub fn exact_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    ExactSummer::default().sum(terms)
}

/// Sum whose result is independent of term order, bit for bit. Terms are
/// truncated onto a fixed-point grid anchored at the largest magnitude and
/// added as integers, so the error is below `len * 2^-100` of the largest
/// term. Falls back to [`exact_sum`] for non-finite or extreme inputs.
pub fn order_free_sum(terms: &[f64]) -> f64 {
    if terms.len() >= 1 << 20 || terms.iter().any(|x| !x.is_finite()) {
        return exact_sum(terms.iter().copied());
    }
    let max = terms.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return 0.0;
    }
    if !max.is_normal() {
        return exact_sum(terms.iter().copied());
    }
    let exponent = ((max.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let headroom = 126 - (usize::BITS - terms.len().leading_zeros()) as i32;
    let shift = headroom - exponent - 1;
    if !(-1000..=1000).contains(&shift) {
        return exact_sum(terms.iter().copied());
    }
    let scale = 2f64.powi(shift);
    let acc: i128 = terms.iter().map(|x| (x * scale) as i128).sum();
    acc as f64 / scale
}

/// [`exact_sum`] with a reusable partials buffer.
#[derive(Debug, Default)]
struct ExactSummer {
    partials: Vec<f64>,
}

impl ExactSummer {
    pub fn sum(&mut self, terms: impl IntoIterator<Item = f64>) -> f64 {
        let partials = &mut self.partials;
        partials.clear();
        let mut naive = 0.0;
        let mut finite = true;
        for mut x in terms {
            naive += x;
            if !x.is_finite() {
                finite = false;
                continue;
            }
            let mut i = 0;
            for j in 0..partials.len() {
                let mut y = partials[j];
                if x.abs() < y.abs() {
                    std::mem::swap(&mut x, &mut y);
                }
                let hi = x + y;
                let lo = y - (hi - x);
                if lo != 0.0 {
                    partials[i] = lo;
                    i += 1;
                }
                x = hi;
            }
            partials.truncate(i);
            partials.push(x);
        }
        if !finite {
            return naive;
        }
        let Some(mut n) = partials.len().checked_sub(1) else {
            return 0.0;
        };
        let mut hi = partials[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = partials[n];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materializes `data` (laid out as `shape`) permuted so that output axis `i`
/// is input axis `perm[i]`.
pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 || n == 0 {
        return (data.to_vec(), out_shape);
    }
    // Innermost output axis is walked as a strided run; the rest by odometer.
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if run_stride == 1 {
            out.extend_from_slice(&data[base..base + run]);
        } else {
            out.extend((0..run).map(|j| data[base + j * run_stride]));
        }
        // advance odometer over axes [0, last)
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_sum_cases() {
        assert_eq!(exact_sum([]), 0.0);
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert!(exact_sum([1.0, f64::NAN]).is_nan());
    }

    proptest! {
        #[test]
        fn exact_sum_is_order_free(mut xs in prop::collection::vec(-1e6f64..1e6, 0..40), seed in any::<u64>()) {
            let a = exact_sum(xs.iter().copied());
            let n = xs.len();
            if n > 1 {
                let k = (seed as usize) % n;
                xs.rotate_left(k);
                xs.swap(0, n - 1);
            }
            prop_assert_eq!(a, exact_sum(xs.iter().copied()));
        }

        #[test]
        fn order_free_sum_is_order_free(mut xs in prop::collection::vec(-1e3f64..1e3, 0..64), seed in any::<u64>()) {
            let a = order_free_sum(&xs);
            let n = xs.len();
            if n > 1 {
                let k = (seed as usize) % n;
                xs.rotate_left(k);
                xs.swap(0, n - 1);
            }
            prop_assert_eq!(a, order_free_sum(&xs));
            prop_assert!((a - exact_sum(xs.iter().copied())).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn order_free_sum_cases() {
        assert_eq!(order_free_sum(&[]), 0.0);
        assert_eq!(order_free_sum(&[0.5, 0.25, -0.125]), 0.625);
        assert_eq!(order_free_sum(&[1e300, -1e300, 2.0]), 0.0);
        assert_eq!(order_free_sum(&[1e20, -1e20, 2.0]), 2.0);
        assert!(order_free_sum(&[1.0, f64::INFINITY]).is_infinite());
        assert!(order_free_sum(&[1.0, f64::NAN]).is_nan());
    }

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (out, out_shape) = permute_data(&data, &shape, &[2, 0, 1]);
        assert_eq!(out_shape, vec![4, 2, 3]);
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[k * 6 + i * 3 + j], data[i * 12 + j * 4 + k]);
                }
            }
        }
    }
}
