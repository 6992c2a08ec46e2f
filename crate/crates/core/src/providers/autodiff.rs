//! Small reverse-mode tape over dense row-major matrices.
//!
//! Values are computed eagerly when an op is recorded; `backward_from` walks
//! the tape once in reverse.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// `c = a·b` for strided operands of shape `m×k` and `k×n`; `c` is row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize)) -> Tensor {
    let mut out = Tensor::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: the strides address only elements inside `a`, `b` and `out`,
    // which the callers size from the tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `a (n×k) · b (k×m)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shapes");
    gemm(a.rows, a.cols, b.cols, &a.data, (a.cols, 1), &b.data, (b.cols, 1))
}

/// `aᵀ · b`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows);
    gemm(a.cols, a.rows, b.cols, &a.data, (1, a.cols), &b.data, (b.cols, 1))
}

/// `a · bᵀ`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols);
    gemm(a.rows, a.cols, b.rows, &a.data, (a.cols, 1), &b.data, (1, b.cols))
}

pub type Var = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Tanh(Var),
    Mul(Var, Var),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Mean of input rows per output row; `counts[j]` rows map to `j`.
    ScatterMean(Var, Vec<usize>, Vec<usize>),
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(&self.values[a], &self.values[b]);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.values[a].clone();
        assert!(v.same_shape(&self.values[b]), "add shapes");
        v.add_assign(&self.values[b]);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = &self.values[bias];
        assert!(b.rows == 1 && b.cols == self.values[a].cols, "bias shape");
        let mut v = self.values[a].clone();
        for row in v.data.chunks_mut(b.cols) {
            row.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        self.push(v, Op::AddRowBias(a, bias))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut v = self.values[a].clone();
        v.data.iter_mut().for_each(|x| *x = x.tanh());
        self.push(v, Op::Tanh(a))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.values[a].clone();
        assert!(v.same_shape(&self.values[b]), "mul shapes");
        v.data.iter_mut().zip(&self.values[b].data).for_each(|(x, y)| *x *= y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.values[a].clone();
        v.data.iter_mut().for_each(|x| *x += s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.values[parts[0]].rows;
        let cols: usize = parts.iter().map(|p| self.values[*p].cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = &self.values[*p];
                assert_eq!(t.rows, rows, "concat rows");
                data.extend_from_slice(t.row(r));
            }
        }
        self.push(Tensor::new(rows, cols, data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = &self.values[a];
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(idx.len(), t.cols, data);
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    /// Row `j` of the output is the mean of rows `i` of `a` with
    /// `idx[i] == j` (zero if none).
    pub fn scatter_mean(&mut self, a: Var, idx: &[usize], n_out: usize) -> Var {
        let t = &self.values[a];
        assert_eq!(t.rows, idx.len(), "scatter index length");
        let mut counts = vec![0usize; n_out];
        let mut out = Tensor::zeros(n_out, t.cols);
        for (i, &j) in idx.iter().enumerate() {
            counts[j] += 1;
            out.data[j * t.cols..(j + 1) * t.cols]
                .iter_mut()
                .zip(t.row(i))
                .for_each(|(o, x)| *o += x);
        }
        for (j, &c) in counts.iter().enumerate() {
            if c > 1 {
                out.data[j * t.cols..(j + 1) * t.cols].iter_mut().for_each(|o| *o /= c as f64);
            }
        }
        self.push(out, Op::ScatterMean(a, idx.to_vec(), counts))
    }

    /// Reverse pass seeded with `grad` at `out`. Returns one gradient per
    /// recorded value (`None` where nothing flowed).
    pub fn backward_from(&self, out: Var, grad: Tensor) -> Vec<Option<Tensor>> {
        assert!(grad.same_shape(&self.values[out]), "seed gradient shape");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[out] = Some(grad);
        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        for v in (0..=out).rev() {
            let Some(g) = grads[v].take() else { continue };
            match &self.ops[v] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&g, &self.values[*b]);
                    let gb = matmul_tn(&self.values[*a], &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRowBias(a, bias) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        gb.data.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *bias, gb);
                }
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    ga.data
                        .iter_mut()
                        .zip(&self.values[v].data)
                        .for_each(|(x, y)| *x *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    ga.data.iter_mut().zip(&self.values[*b].data).for_each(|(x, y)| *x *= y);
                    let mut gb = g.clone();
                    gb.data.iter_mut().zip(&self.values[*a].data).for_each(|(x, y)| *x *= y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = self.values[*p].cols;
                        let mut gp = Tensor::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            gp.data[r * cols..(r + 1) * cols].copy_from_slice(&g.row(r)[start..start + cols]);
                        }
                        start += cols;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let src = &self.values[*a];
                    let mut ga = Tensor::zeros(src.rows, src.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        ga.data[i * src.cols..(i + 1) * src.cols]
                            .iter_mut()
                            .zip(g.row(r))
                            .for_each(|(x, y)| *x += y);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ScatterMean(a, idx, counts) => {
                    let cols = g.cols;
                    let mut ga = Tensor::zeros(idx.len(), cols);
                    for (i, &j) in idx.iter().enumerate() {
                        let scale = 1.0 / counts[j] as f64;
                        ga.data[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(g.row(j))
                            .for_each(|(x, y)| *x = y * scale);
                    }
                    acc(&mut grads, *a, ga);
                }
            }
            grads[v] = Some(g);
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Builds a graph using every op, returns `Σ w ⊙ out` and the leaf ids.
    fn program(tape: &mut Tape, leaves: &[Tensor], w: &Tensor) -> (f64, Vec<Var>) {
        let ids: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let (x, wm, bias, y) = (ids[0], ids[1], ids[2], ids[3]);
        let a = tape.matmul(x, wm);
        let a = tape.add_row_bias(a, bias);
        let t = tape.tanh(a);
        let s = tape.add_scalar(t, 1.0);
        let m = tape.mul(s, y);
        let g = tape.gather_rows(m, &[0, 2, 2, 1, 3]);
        let sm = tape.scatter_mean(g, &[1, 0, 1, 1, 0], 4);
        let c = tape.concat_cols(&[sm, y]);
        let yy = tape.concat_cols(&[y, y]);
        let out = tape.add(c, yy);
        let val = tape.value(out).data.iter().zip(&w.data).map(|(a, b)| a * b).sum();
        (val, ids)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![random(&mut rng, 4, 3), random(&mut rng, 3, 2), random(&mut rng, 1, 2), random(&mut rng, 4, 2)];
        let w = random(&mut rng, 4, 4);
        let mut tape = Tape::new();
        let (_, ids) = program(&mut tape, &leaves, &w);
        let out = tape.values.len() - 1;
        let grads = tape.backward_from(out, w.clone());
        for (li, leaf) in leaves.iter().enumerate() {
            for e in 0..leaf.data.len() {
                let eval = |delta: f64| {
                    let mut ls = leaves.clone();
                    ls[li].data[e] += delta;
                    program(&mut Tape::new(), &ls, &w).0
                };
                let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                let an = grads[ids[li]].as_ref().map_or(0.0, |g| g.data[e]);
                assert!((fd - an).abs() < 1e-8 * fd.abs().max(1.0), "leaf {li}[{e}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 5, 3);
        let b = random(&mut rng, 5, 4);
        let c = random(&mut rng, 6, 3);
        let at = Tensor::new(3, 5, (0..15).map(|i| a.data[(i % 5) * 3 + i / 5]).collect());
        let ct = Tensor::new(3, 6, (0..18).map(|i| c.data[(i % 6) * 3 + i / 6]).collect());
        assert_eq!(matmul_tn(&a, &b), matmul(&at, &b));
        let x = matmul_nt(&a, &c);
        let y = matmul(&a, &ct);
        assert!(x.data.iter().zip(&y.data).all(|(p, q)| (p - q).abs() < 1e-15));
    }
}
