use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 5;

/// Storage precision of a tensor payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::Single => 0,
            Precision::Double => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::Single),
            1 => Some(Precision::Double),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }
}

/// Scalar element type of a [`Tensor`]; implemented for `f32` and `f64`.
pub trait Element:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("element converts to f64")
    }
}

impl Element for f32 {
    const PRECISION: Precision = Precision::Single;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::Double;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense row-major array of rank at most five. Values are immutable once built.
///
/// Video activations use the channels-last layout `[B, T, H, W, C]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<F = f64> {
    dims: Vec<usize>,
    elems: Vec<F>,
}

impl<F: Element> Tensor<F> {
    pub fn new(dims: impl Into<Vec<usize>>, elems: Vec<F>) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        let n: usize = dims.iter().product();
        if n != elems.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {n} elements, got {}", elems.len()),
            ));
        }
        Ok(Self { dims, elems })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: F) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        let n = dims.iter().product();
        Ok(Self {
            dims,
            elems: vec![value; n],
        })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, F::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, F::one())
    }

    pub fn scalar(value: F) -> Self {
        Self {
            dims: Vec::new(),
            elems: vec![value],
        }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> F) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        let n = dims.iter().product();
        Ok(Self {
            dims,
            elems: (0..n).map(&mut f).collect(),
        })
    }

    pub(crate) fn from_parts(dims: Vec<usize>, elems: Vec<F>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), elems.len());
        debug_assert!(dims.len() <= MAX_RANK);
        Self { dims, elems }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn elems(&self) -> &[F] {
        &self.elems
    }

    pub(crate) fn elems_mut(&mut self) -> &mut [F] {
        &mut self.elems
    }

    pub fn into_elems(self) -> Vec<F> {
        self.elems
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.elems.len()
    }

    pub fn precision(&self) -> Precision {
        F::PRECISION
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.dims)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank");
        index
            .iter()
            .zip(&self.dims)
            .zip(self.strides())
            .map(|((&i, &d), s)| {
                assert!(i < d, "index {i} out of bounds for extent {d}");
                i * s
            })
            .sum()
    }

    pub fn at(&self, index: &[usize]) -> F {
        self.elems[self.offset(index)]
    }

    pub fn item(&self) -> F {
        assert_eq!(self.elems.len(), 1, "item() on a non-scalar tensor");
        self.elems[0]
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        if dims.iter().product::<usize>() != self.numel() {
            return Err(Error::mismatch("reshape", &self.dims, &dims));
        }
        Ok(Self {
            dims,
            elems: self.elems.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            dims: self.dims.clone(),
            elems: self.elems.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor {
            dims: self.dims.clone(),
            elems: self
                .elems
                .iter()
                .map(|&x| G::from_f64(x.as_f64()).expect("finite cast"))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.elems.iter().all(|x| x.is_finite())
    }

    /// Pairwise summation, so rounding error grows with `log n` rather than `n`.
    pub fn sum(&self) -> F {
        pairwise_sum(&self.elems)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on differing dims");
        self.elems
            .iter()
            .zip(&other.elems)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<F: Element> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{:?}>{:?}", F::PRECISION, self.dims)?;
        if self.elems.len() <= 16 {
            write!(f, " {:?}", self.elems)?;
        }
        Ok(())
    }
}

pub fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    strides
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() > MAX_RANK {
        return Err(Error::shape(
            "tensor",
            format!("rank {} exceeds {MAX_RANK} for dims {dims:?}", dims.len()),
        ));
    }
    if dims.contains(&0) {
        return Err(Error::shape("tensor", format!("zero extent in {dims:?}")));
    }
    Ok(())
}

fn pairwise_sum<F: Element>(xs: &[F]) -> F {
    if xs.len() <= 16 {
        return xs.iter().copied().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}
