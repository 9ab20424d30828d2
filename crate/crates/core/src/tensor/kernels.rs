// Raw loops shared by the forward and backward passes.

use super::Real;

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &a_il) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_il == T::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (c_ij, &b_lj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_il * b_lj;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with independent partial sums so the loop vectorises.
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (p, q) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += p[l] * q[l];
        }
    }
    let mut tail = T::zero();
    for (&p, &q) in xr.iter().zip(yr) {
        tail += p * q;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &a_il) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_il == T::zero() {
                continue;
            }
            let c_row = &mut c[l * n..(l + 1) * n];
            for (c_lj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_lj += a_il * b_ij;
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How a broadcast source is laid out against `out`.
pub(crate) enum Broadcast {
    /// Output index `j` reads source `j % len`.
    Cycle(usize),
    /// Output index `j` reads source `(j / inner) % len`.
    Repeat {
        inner: usize,
        len: usize,
    },
    Map(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Self {
        let offset = out.len() - src.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, offset)
            .chain(src.iter().copied())
            .collect();
        let lead = padded.iter().take_while(|&&d| d == 1).count();
        if padded[lead..] == out[lead..] {
            return Self::Cycle(out[lead..].iter().product());
        }
        let trail = padded[lead..].iter().rev().take_while(|&&d| d == 1).count();
        let mid = out.len() - trail;
        if padded[lead..mid] == out[lead..mid] {
            return Self::Repeat {
                inner: out[mid..].iter().product(),
                len: out[lead..mid].iter().product(),
            };
        }
        Self::Map(broadcast_map(src, out))
    }

    #[inline]
    pub(crate) fn index(&self, j: usize) -> usize {
        match self {
            Self::Cycle(len) => j % len,
            Self::Repeat { inner, len } => (j / inner) % len,
            Self::Map(m) => m[j],
        }
    }
}

/// For every flat index of `out`, the flat index of the broadcast source.
pub(crate) fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    // Source strides, zero on broadcast axes.
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            pos -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Splits `shape` around `axis` into (outer, len, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

/// For every flat index of the permuted output, the flat index in the source.
pub(crate) fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let out_shape = permuted_shape(shape, perm);
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
