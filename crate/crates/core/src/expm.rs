//! Matrix exponential by scaling and squaring with diagonal Padé approximants,
//! following Higham (2005), "The Scaling and Squaring Method for the Matrix
//! Exponential Revisited".
//!
//! The Fréchet derivative `L(A, E)` is read off the upper-right block of
//! `exp([[A, E], [0, A]])`, and the adjoint used for reverse-mode gradients is
//! `L*(A, G) = L(Aᵀ, G)` under the Frobenius inner product.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense real square matrix. Row/column semantics follow `nalgebra`.
pub type Matrix = DMatrix<f64>;

const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068e0;
const THETA_13: f64 = 5.371920351148152e0;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn check_square(a: &Matrix, what: &str) -> Result<()> {
    if a.nrows() == 0 || a.nrows() != a.ncols() {
        return Err(Error::invalid(format!(
            "{what} must be a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Induced 1-norm (max absolute column sum).
pub fn norm1(a: &Matrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Frobenius inner product `⟨A, B⟩ = Σ A_ij B_ij`.
pub fn frobenius_dot(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn to_row_major(a: &Matrix) -> Vec<f64> {
    a.transpose().as_slice().to_vec()
}

fn from_row_major(n: usize, v: &[f64]) -> Matrix {
    Matrix::from_row_slice(n, n, v)
}

/// `e^A`.
pub fn expm(a: &Matrix) -> Result<Matrix> {
    check_square(a, "expm argument")?;
    Ok(expm_unchecked(a))
}

pub(crate) fn expm_unchecked(a: &Matrix) -> Matrix {
    let n = a.nrows();
    from_row_major(n, &expm_rm(&to_row_major(a), n))
}

/// `e^A` for a row-major `n × n` buffer.
pub(crate) fn expm_rm(a: &[f64], n: usize) -> Vec<f64> {
    fn run<S: Storage>(a: &[f64], n: usize) -> Vec<f64> {
        expm_generic(&Sq(S::from_slice(n, a))).0.s().to_vec()
    }
    match n {
        1 => run::<Fix<1>>(a, n),
        2 => run::<Fix<2>>(a, n),
        3 => run::<Fix<3>>(a, n),
        4 => run::<Fix<4>>(a, n),
        _ => run::<Dyn>(a, n),
    }
}

/// Returns `(e^A, L(A, E))`, the exponential and its Fréchet derivative at `A`
/// in direction `E`.
pub fn expm_frechet(a: &Matrix, e: &Matrix) -> Result<(Matrix, Matrix)> {
    check_square(a, "expm_frechet A")?;
    check_square(e, "expm_frechet E")?;
    if a.nrows() != e.nrows() {
        return Err(Error::invalid(format!(
            "expm_frechet dimension mismatch: A is {0}x{0}, E is {1}x{1}",
            a.nrows(),
            e.nrows()
        )));
    }
    Ok(frechet_unchecked(a, e))
}

pub(crate) fn frechet_unchecked(a: &Matrix, e: &Matrix) -> (Matrix, Matrix) {
    let n = a.nrows();
    let (x, l) = frechet_rm(&to_row_major(a), &to_row_major(e), n);
    (from_row_major(n, &x), from_row_major(n, &l))
}

/// Row-major `(e^A, L(A, E))`.
pub(crate) fn frechet_rm(a: &[f64], e: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    match n {
        1 => frechet_with::<Fix<1>>(a, e, n),
        2 => frechet_with::<Fix<2>>(a, e, n),
        3 => frechet_with::<Fix<3>>(a, e, n),
        4 => frechet_with::<Fix<4>>(a, e, n),
        _ => frechet_with::<Dyn>(a, e, n),
    }
}

fn frechet_with<S: Storage>(a: &[f64], e: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let a = Sq(S::from_slice(n, a));
    let e = Sq(S::from_slice(n, e));
    let e_norm = e.norm1();
    if e_norm == 0.0 {
        return (expm_generic(&a).0.s().to_vec(), vec![0.0; n * n]);
    }
    // L is linear in E; rescale E so the augmented matrix norm is driven by A.
    let a_norm = a.norm1();
    let scale = if a_norm > 0.0 { a_norm / e_norm } else { 1.0 / e_norm };
    let big = Aug {
        x: a,
        y: e.scaled(scale),
    };
    let r = expm_generic(&big);
    let l = r.y.0.s().iter().map(|v| v / scale).collect();
    (r.x.0.s().to_vec(), l)
}

/// Adjoint of the Fréchet derivative: the unique `L*(A, G)` with
/// `⟨G, L(A, E)⟩ = ⟨L*(A, G), E⟩` for every `E`.
pub fn expm_vjp(a: &Matrix, g: &Matrix) -> Result<Matrix> {
    check_square(a, "expm_vjp A")?;
    check_square(g, "expm_vjp G")?;
    if a.nrows() != g.nrows() {
        return Err(Error::invalid(format!(
            "expm_vjp dimension mismatch: A is {0}x{0}, G is {1}x{1}",
            a.nrows(),
            g.nrows()
        )));
    }
    Ok(vjp_unchecked(a, g))
}

pub(crate) fn vjp_unchecked(a: &Matrix, g: &Matrix) -> Matrix {
    frechet_unchecked(&a.transpose(), g).1
}

/// Row-major `L*(A, G)`.
pub(crate) fn vjp_rm(a: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    frechet_rm(&transpose_rm(a, n), g, n).1
}

pub(crate) fn transpose_rm(a: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

// The Padé evaluation is written once over a small algebra so that the
// augmented Fréchet matrix [[A, E], [0, A]] can be exponentiated through its
// block upper-triangular structure: each product costs three n×n products
// instead of one dense 2n×2n product, and the result is the same matrix.
trait PadeAlgebra: Sized {
    fn identity(&self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    /// `self += s · o`
    fn axpy(&mut self, s: f64, o: &Self);
    fn scaled(&self, s: f64) -> Self;
    fn norm1(&self) -> f64;
    /// `Q⁻¹ P`, NaN-filled when `Q` is numerically singular.
    fn solve(q: &Self, p: &Self) -> Self;
}

/// Square row-major storage. `Fix` lets the compiler unroll small blocks.
trait Storage: Clone {
    fn zeros(n: usize) -> Self;
    fn n(&self) -> usize;
    fn s(&self) -> &[f64];
    fn s_mut(&mut self) -> &mut [f64];

    fn from_slice(n: usize, v: &[f64]) -> Self {
        let mut r = Self::zeros(n);
        r.s_mut().copy_from_slice(v);
        r
    }
}

#[derive(Debug, Clone)]
struct Dyn {
    n: usize,
    v: Vec<f64>,
}

impl Storage for Dyn {
    fn zeros(n: usize) -> Self {
        Dyn { n, v: vec![0.0; n * n] }
    }
    fn n(&self) -> usize {
        self.n
    }
    fn s(&self) -> &[f64] {
        &self.v
    }
    fn s_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }
}

#[derive(Debug, Clone, Copy)]
struct Fix<const N: usize>([[f64; N]; N]);

impl<const N: usize> Storage for Fix<N> {
    #[inline]
    fn zeros(_: usize) -> Self {
        Fix([[0.0; N]; N])
    }
    #[inline]
    fn n(&self) -> usize {
        N
    }
    #[inline]
    fn s(&self) -> &[f64] {
        self.0.as_flattened()
    }
    #[inline]
    fn s_mut(&mut self) -> &mut [f64] {
        self.0.as_flattened_mut()
    }
}

#[derive(Debug, Clone)]
struct Sq<S>(S);

impl<S: Storage> Sq<S> {
    fn zeros(n: usize) -> Self {
        Sq(S::zeros(n))
    }

    fn n(&self) -> usize {
        self.0.n()
    }

    fn sub(&self, o: &Self) -> Self {
        let mut r = self.clone();
        for (a, b) in r.0.s_mut().iter_mut().zip(o.0.s()) {
            *a -= b;
        }
        r
    }

    /// Absolute sum of column `j`.
    fn col_sum(&self, j: usize) -> f64 {
        let (n, v) = (self.n(), self.0.s());
        (0..n).map(|i| v[i * n + j].abs()).sum()
    }
}

/// LU factors with partial pivoting, packed in place.
struct Lu<S> {
    f: S,
    perm: Vec<usize>,
    singular: bool,
}

impl<S: Storage> Lu<S> {
    fn new(q: &Sq<S>) -> Self {
        let n = q.n();
        let mut fs = q.0.clone();
        let f = fs.s_mut();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut singular = false;
        for k in 0..n {
            let mut p = k;
            for i in k + 1..n {
                if f[i * n + k].abs() > f[p * n + k].abs() {
                    p = i;
                }
            }
            if f[p * n + k] == 0.0 {
                singular = true;
                break;
            }
            if p != k {
                for j in 0..n {
                    f.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let piv = f[k * n + k];
            for i in k + 1..n {
                let l = f[i * n + k] / piv;
                f[i * n + k] = l;
                if l != 0.0 {
                    for j in k + 1..n {
                        f[i * n + j] -= l * f[k * n + j];
                    }
                }
            }
        }
        Self { f: fs, perm, singular }
    }

    fn solve(&self, p: &Sq<S>) -> Sq<S> {
        let n = self.f.n();
        let mut x = Sq::<S>::zeros(n);
        if self.singular {
            x.0.s_mut().fill(f64::NAN);
            return x;
        }
        let f = self.f.s();
        let (pv, xv) = (p.0.s(), x.0.s_mut());
        for (i, &pi) in self.perm.iter().enumerate() {
            xv[i * n..(i + 1) * n].copy_from_slice(&pv[pi * n..(pi + 1) * n]);
        }
        for i in 0..n {
            for k in 0..i {
                let l = f[i * n + k];
                if l != 0.0 {
                    for j in 0..n {
                        xv[i * n + j] -= l * xv[k * n + j];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = f[i * n + k];
                if u != 0.0 {
                    for j in 0..n {
                        xv[i * n + j] -= u * xv[k * n + j];
                    }
                }
            }
            let d = f[i * n + i];
            for j in 0..n {
                xv[i * n + j] /= d;
            }
        }
        x
    }
}

impl<S: Storage> PadeAlgebra for Sq<S> {
    fn identity(&self) -> Self {
        let n = self.n();
        let mut r = Sq::<S>::zeros(n);
        let v = r.0.s_mut();
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        r
    }

    fn mul(&self, o: &Self) -> Self {
        let n = self.n();
        let mut out = Sq::<S>::zeros(n);
        let (a, b, c) = (self.0.s(), o.0.s(), out.0.s_mut());
        for i in 0..n {
            for k in 0..n {
                let aik = a[i * n + k];
                for j in 0..n {
                    c[i * n + j] += aik * b[k * n + j];
                }
            }
        }
        out
    }

    fn axpy(&mut self, s: f64, o: &Self) {
        for (a, b) in self.0.s_mut().iter_mut().zip(o.0.s()) {
            *a += s * b;
        }
    }

    fn scaled(&self, s: f64) -> Self {
        let mut r = self.clone();
        for v in r.0.s_mut() {
            *v *= s;
        }
        r
    }

    fn norm1(&self) -> f64 {
        (0..self.n()).map(|j| self.col_sum(j)).fold(0.0, f64::max)
    }

    fn solve(q: &Self, p: &Self) -> Self {
        Lu::new(q).solve(p)
    }
}

/// `[[x, y], [0, x]]`
#[derive(Debug, Clone)]
struct Aug<S> {
    x: Sq<S>,
    y: Sq<S>,
}

impl<S: Storage> PadeAlgebra for Aug<S> {
    fn identity(&self) -> Self {
        Aug {
            x: self.x.identity(),
            y: Sq::zeros(self.x.n()),
        }
    }

    fn mul(&self, o: &Self) -> Self {
        let mut y = self.x.mul(&o.y);
        y.axpy(1.0, &self.y.mul(&o.x));
        Aug { x: self.x.mul(&o.x), y }
    }

    fn axpy(&mut self, s: f64, o: &Self) {
        self.x.axpy(s, &o.x);
        self.y.axpy(s, &o.y);
    }

    fn scaled(&self, s: f64) -> Self {
        Aug {
            x: self.x.scaled(s),
            y: self.y.scaled(s),
        }
    }

    fn norm1(&self) -> f64 {
        (0..self.x.n())
            .map(|j| {
                let cx = self.x.col_sum(j);
                cx.max(cx + self.y.col_sum(j))
            })
            .fold(0.0, f64::max)
    }

    fn solve(q: &Self, p: &Self) -> Self {
        let lu = Lu::new(&q.x);
        let x = lu.solve(&p.x);
        let y = lu.solve(&p.y.sub(&q.y.mul(&x)));
        Aug { x, y }
    }
}

fn pade_low<T: PadeAlgebra>(a: &T, b: &[f64]) -> T {
    // b has even length m + 1 with m odd.
    let ident = a.identity();
    let a2 = a.mul(a);
    let mut u_inner = ident.scaled(b[1]);
    let mut v = ident.scaled(b[0]);
    let mut power = a2.identity();
    for k in 1..b.len() / 2 {
        power = power.mul(&a2);
        u_inner.axpy(b[2 * k + 1], &power);
        v.axpy(b[2 * k], &power);
    }
    let u = a.mul(&u_inner);
    solve_pade(u, v)
}

fn pade_13<T: PadeAlgebra>(a: &T) -> T {
    let b = &PADE_13;
    let ident = a.identity();
    let a2 = a.mul(a);
    let a4 = a2.mul(&a2);
    let a6 = a4.mul(&a2);
    let mut w = a6.scaled(b[13]);
    w.axpy(b[11], &a4);
    w.axpy(b[9], &a2);
    let mut u_inner = a6.mul(&w);
    u_inner.axpy(b[7], &a6);
    u_inner.axpy(b[5], &a4);
    u_inner.axpy(b[3], &a2);
    u_inner.axpy(b[1], &ident);
    let u = a.mul(&u_inner);
    let mut z = a6.scaled(b[12]);
    z.axpy(b[10], &a4);
    z.axpy(b[8], &a2);
    let mut v = a6.mul(&z);
    v.axpy(b[6], &a6);
    v.axpy(b[4], &a4);
    v.axpy(b[2], &a2);
    v.axpy(b[0], &ident);
    solve_pade(u, v)
}

fn solve_pade<T: PadeAlgebra>(u: T, v: T) -> T {
    // p = v + u, q = v - u
    let mut p = v.scaled(1.0);
    p.axpy(1.0, &u);
    let mut q = v;
    q.axpy(-1.0, &u);
    T::solve(&q, &p)
}

fn expm_generic<T: PadeAlgebra>(a: &T) -> T {
    let norm = a.norm1();
    if norm == 0.0 {
        return a.identity();
    }
    if norm <= THETA_3 {
        return pade_low(a, &PADE_3);
    }
    if norm <= THETA_5 {
        return pade_low(a, &PADE_5);
    }
    if norm <= THETA_7 {
        return pade_low(a, &PADE_7);
    }
    if norm <= THETA_9 {
        return pade_low(a, &PADE_9);
    }
    let s = (norm / THETA_13).log2().ceil().max(0.0) as i32;
    let scaled = a.scaled(1.0 / 2f64.powi(s));
    let mut r = pade_13(&scaled);
    for _ in 0..s {
        r = r.mul(&r);
    }
    r
}

/// Block-diagonal matrix stored as its diagonal blocks, all of size `b × b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagMatrix {
    block_size: usize,
    blocks: Vec<Matrix>,
}

impl BlockDiagMatrix {
    pub fn new(blocks: Vec<Matrix>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::invalid("block-diagonal matrix needs at least one block"))?;
        let b = first.nrows();
        for (j, blk) in blocks.iter().enumerate() {
            if blk.nrows() != b || blk.ncols() != b {
                return Err(Error::invalid(format!(
                    "block {j} is {}x{}, expected {b}x{b}",
                    blk.nrows(),
                    blk.ncols()
                )));
            }
        }
        Ok(Self {
            block_size: b,
            blocks,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn dim(&self) -> usize {
        self.block_size * self.blocks.len()
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn to_dense(&self) -> Matrix {
        let b = self.block_size;
        let mut out = Matrix::zeros(self.dim(), self.dim());
        for (j, blk) in self.blocks.iter().enumerate() {
            out.view_mut((j * b, j * b), (b, b)).copy_from(blk);
        }
        out
    }

    /// Blockwise exponential.
    pub fn expm(&self) -> Result<BlockDiagMatrix> {
        let blocks = self.blocks.iter().map(expm).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            block_size: self.block_size,
            blocks,
        })
    }
}
