//! Dense n-dimensional arrays in double precision.
//!
//! Values are stored contiguously in row-major order. Broadcasting follows
//! trailing-dimension alignment: shapes are compared from the last axis
//! backwards, and an axis of extent 1 stretches to match the other operand.

pub mod kernels;
pub mod special;
pub mod tape;

/// Contiguous row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            expect,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data reinterpreted under a new shape of equal volume.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            expect,
            self.data.len(),
            "reshape to {:?} from {:?}",
            shape,
            self.shape
        );
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

/// Result shape of broadcasting `a` against `b`, or a panic naming both
/// shapes if the trailing-dimension rule rejects them.
pub fn broadcast_shape(op: &str, a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        assert!(
            da == db || da == 1 || db == 1,
            "{op}: shapes {a:?} and {b:?} are not broadcast-compatible"
        );
        out[i] = da.max(db);
    }
    out
}

fn dim_from_end(shape: &[usize], back: usize) -> usize {
    if back < shape.len() {
        shape[shape.len() - 1 - back]
    } else {
        1
    }
}

/// Row-major strides, with zeros on axes the shape broadcasts over.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut raw = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        raw[i] = acc;
        acc *= shape[i];
    }
    let mut strides = vec![0usize; rank];
    for i in offset..rank {
        if shape[i - offset] != 1 || out_shape[i] == 1 {
            strides[i] = raw[i - offset];
        }
    }
    strides
}

/// Element-wise combination of two tensors under broadcasting.
pub fn binary_broadcast(op: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor {
            shape: a.shape.clone(),
            data,
        };
    }
    let out_shape = broadcast_shape(op, &a.shape, &b.shape);
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let n: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data[ia], b.data[ib]));
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    Tensor {
        shape: out_shape,
        data,
    }
}

/// Sums a gradient of `grad_shape` down to `target`, undoing broadcasting.
pub fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape == target {
        return grad.clone();
    }
    let st = broadcast_strides(target, &grad.shape);
    let mut out = Tensor::zeros(target.to_vec());
    let mut idx = vec![0usize; grad.shape.len()];
    let mut it = 0usize;
    for i in 0..grad.data.len() {
        out.data[it] += grad.data[i];
        for d in (0..grad.shape.len()).rev() {
            idx[d] += 1;
            it += st[d];
            if idx[d] < grad.shape[d] {
                break;
            }
            idx[d] = 0;
            it -= st[d] * grad.shape[d];
        }
    }
    out
}
