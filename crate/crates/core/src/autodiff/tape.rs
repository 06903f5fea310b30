//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every recorded value is a `rows x cols` matrix (scalars are `1 x 1`).
//! Element-wise binary operations broadcast dimensions of size one, and the
//! backward pass sums gradients back over the broadcast axes.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::flow::spline;
use crate::scalar::{log_normal_interval, Real};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddConst(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    Square(usize),
    SumAll(usize),
    MeanAll(usize),
    SumCols(usize),
    Cols(usize, Vec<usize>),
    Concat(Vec<usize>),
    Spline {
        raw: usize,
        input: usize,
        bins: usize,
        bound: T,
        inverse: bool,
    },
    LogNormalInterval(usize, usize),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations so that gradients can be pulled back from a scalar.
pub struct Tape<T: Real> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to the leaf `v`; `None` for constants, non-leaf
    /// values and leaves that did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::LogNormalInterval(a, b) => vec![*a, *b],
        Op::Spline { raw, input, .. } => vec![*raw, *input],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddConst(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sigmoid(a)
        | Op::Square(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::SumCols(a)
        | Op::Cols(a, _) => vec![*a],
        Op::Concat(parts) => parts.clone(),
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Result<usize> {
        match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        }
    };
    Ok((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to<T: Real>(g: &Array2<T>, shape: (usize, usize)) -> Array2<T> {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn zip_broadcast<T: Real>(a: &Array2<T>, b: &Array2<T>, f: impl Fn(T, T) -> T) -> Result<Array2<T>> {
    let shape = broadcast_shape(a.dim(), b.dim())?;
    let a = a.broadcast(shape).expect("checked");
    let b = b.broadcast(shape).expect("checked");
    Ok(Zip::from(&a).and(&b).map_collect(|x, y| f(*x, *y)))
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf => true,
            other => inputs(other).iter().any(|i| nodes[*i].needs_grad),
        };
        nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.idx < self.len() {
            Ok(v.idx)
        } else {
            Err(Error::NotOnTape)
        }
    }

    /// Records an input (parameter or data). Gradients are available for every leaf.
    pub fn leaf(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records data that never needs a gradient; backward skips it and
    /// everything computed from constants alone.
    pub fn constant(&self, value: Array2<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    pub fn scalar(&self, value: T) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> Result<Array2<T>> {
        let i = self.idx(v)?;
        Ok(self.nodes.borrow()[i].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<(usize, usize)> {
        let i = self.idx(v)?;
        Ok(self.nodes.borrow()[i].value.dim())
    }

    /// Value of a `1 x 1` variable.
    pub fn scalar_value(&self, v: Var) -> Result<T> {
        let i = self.idx(v)?;
        let nodes = self.nodes.borrow();
        let value = &nodes[i].value;
        if value.dim() != (1, 1) {
            return Err(Error::Shape(format!("expected a scalar, found {:?}", value.dim())));
        }
        Ok(value[[0, 0]])
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let i = self.idx(a)?;
        let value = self.nodes.borrow()[i].value.mapv(f);
        Ok(self.push(value, op(i)))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: impl FnOnce(usize, usize) -> Op<T>) -> Result<Var> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            zip_broadcast(&nodes[i].value, &nodes[j].value, f)?
        };
        Ok(self.push(value, op(i, j)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[i].value, &nodes[j].value);
            if x.ncols() != y.nrows() {
                return Err(Error::Shape(format!("matmul {:?} x {:?}", x.dim(), y.dim())));
            }
            x.dot(y)
        };
        Ok(self.push(value, Op::MatMul(i, j)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x * c, |i| Op::Scale(i, c))
    }

    pub fn add_const(&self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddConst)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(T::zero()), Op::Relu)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, T::exp, Op::Exp)
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        self.unary(a, T::ln, Op::Ln)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, T::sigmoid, Op::Sigmoid)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let s = self.nodes.borrow()[i].value.sum();
        Ok(self.push(Array2::from_elem((1, 1), s), Op::SumAll(i)))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[i].value;
            if v.is_empty() {
                return Err(Error::Shape("mean of an empty matrix".into()));
            }
            v.sum() / T::from_usize(v.len()).unwrap()
        };
        Ok(self.push(Array2::from_elem((1, 1), value), Op::MeanAll(i)))
    }

    /// Row sums as a column.
    pub fn sum_cols(&self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let value = self.nodes.borrow()[i].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(value, Op::SumCols(i)))
    }

    pub fn cols(&self, a: Var, cols: &[usize]) -> Result<Var> {
        let i = self.idx(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[i].value;
            if let Some(c) = cols.iter().find(|c| **c >= v.ncols()) {
                return Err(Error::Shape(format!("column {c} of a {:?} matrix", v.dim())));
            }
            v.select(Axis(1), cols)
        };
        Ok(self.push(value, Op::Cols(i, cols.to_vec())))
    }

    pub fn col(&self, a: Var, c: usize) -> Result<Var> {
        self.cols(a, &[c])
    }

    /// Concatenates along columns; all parts need the same number of rows.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|p| self.idx(*p)).collect::<Result<_>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = idx.iter().map(|i| nodes[*i].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?
        };
        Ok(self.push(value, Op::Concat(idx)))
    }

    /// Row-wise spline transform of the column `input` with parameters `raw`
    /// (`rows x raw_len(bins)`). The result has two columns: the transformed
    /// value and `ln |d out / d in|`.
    pub fn spline(&self, raw: Var, input: Var, bins: usize, bound: T, inverse: bool) -> Result<Var> {
        let (r, x) = (self.idx(raw)?, self.idx(input)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (rv, xv) = (&nodes[r].value, &nodes[x].value);
            if rv.ncols() != spline::raw_len(bins) || xv.ncols() != 1 || rv.nrows() != xv.nrows() {
                return Err(Error::Shape(format!(
                    "spline raw {:?} / input {:?} for {bins} bins",
                    rv.dim(),
                    xv.dim()
                )));
            }
            let mut out = Array2::zeros((xv.nrows(), 2));
            for (row, (params, mut o)) in rv.rows().into_iter().zip(out.rows_mut()).enumerate() {
                let params = params.to_vec();
                let (y, l) = spline::eval_raw(&params, bound, bins, xv[[row, 0]], inverse);
                o[0] = y;
                o[1] = l;
            }
            out
        };
        Ok(self.push(
            value,
            Op::Spline {
                raw: r,
                input: x,
                bins,
                bound,
                inverse,
            },
        ))
    }

    /// Element-wise `ln(Phi(b) - Phi(a))` for the standard normal CDF `Phi`.
    pub fn log_normal_interval(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| T::lit(log_normal_interval(x.val(), y.val())),
            Op::LogNormalInterval,
        )
    }

    /// Pulls gradients back from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.idx(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[root].value.dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, found {:?}",
                nodes[root].value.dim()
            )));
        }
        let mut grads: Vec<Option<Array2<T>>> = vec![None; root + 1];
        grads[root] = Some(Array2::from_elem((1, 1), T::one()));

        let need = |i: usize| nodes[i].needs_grad;
        fn acc<T: Real>(grads: &mut [Option<Array2<T>>], i: usize, g: Array2<T>) {
            match &mut grads[i] {
                Some(existing) => *existing = &*existing + &g,
                slot => *slot = Some(g),
            }
        }

        for n in (0..=root).rev() {
            if !need(n) {
                grads[n] = None;
                continue;
            }
            let Some(g) = grads[n].take() else { continue };
            let node = &nodes[n];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if need(*b) {
                        acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to(&g, val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(&g, val(*b).dim()));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to(&g, val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(&g.mapv(|x| -x), val(*b).dim()));
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        let ga = zip_broadcast(&g, val(*b), |x, y| x * y)?;
                        acc(&mut grads, *a, reduce_to(&ga, val(*a).dim()));
                    }
                    if need(*b) {
                        let gb = zip_broadcast(&g, val(*a), |x, y| x * y)?;
                        acc(&mut grads, *b, reduce_to(&gb, val(*b).dim()));
                    }
                }
                Op::Neg(a) => acc(&mut grads, *a, g.mapv(|x| -x)),
                Op::Scale(a, c) => acc(&mut grads, *a, g.mapv(|x| x * *c)),
                Op::AddConst(a) => acc(&mut grads, *a, g.clone()),
                Op::Relu(a) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|g, x| if *x > T::zero() { *g } else { T::zero() });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Ln(a) => acc(&mut grads, *a, Zip::from(&g).and(val(*a)).map_collect(|g, x| *g / *x)),
                Op::Sigmoid(a) => {
                    let ga = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|g, s| *g * *s * (T::one() - *s));
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|g, x| *g * (*x + *x));
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => acc(&mut grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::MeanAll(a) => {
                    let n = T::from_usize(val(*a).len()).unwrap();
                    acc(&mut grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]] / n));
                }
                Op::SumCols(a) => {
                    let shape = val(*a).dim();
                    acc(&mut grads, *a, g.broadcast(shape).expect("column broadcast").to_owned());
                }
                Op::Cols(a, cols) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    for (k, c) in cols.iter().enumerate() {
                        for (dst, src) in ga.column_mut(*c).iter_mut().zip(g.column(k)) {
                            *dst = *dst + *src;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(&mut grads, *p, g.slice(ndarray::s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Spline {
                    raw,
                    input,
                    bins,
                    bound,
                    inverse,
                } => {
                    let (rv, xv) = (val(*raw), val(*input));
                    let mut g_raw = Array2::zeros(rv.dim());
                    let mut g_in = Array2::zeros(xv.dim());
                    for row in 0..rv.nrows() {
                        let params = rv.row(row).to_vec();
                        let mut gr = vec![T::zero(); params.len()];
                        g_in[[row, 0]] = spline::eval_raw_vjp(
                            &params,
                            *bound,
                            *bins,
                            xv[[row, 0]],
                            *inverse,
                            g[[row, 0]],
                            g[[row, 1]],
                            &mut gr,
                        );
                        for (dst, src) in g_raw.row_mut(row).iter_mut().zip(gr) {
                            *dst = src;
                        }
                    }
                    acc(&mut grads, *raw, g_raw);
                    acc(&mut grads, *input, g_in);
                }
                Op::LogNormalInterval(a, b) => {
                    // d/db ln(Phi(b) - Phi(a)) = phi(b) / (Phi(b) - Phi(a)), and -phi(a) / (...) for a
                    let shape = node.value.dim();
                    let av = val(*a).broadcast(shape).expect("forward broadcast");
                    let bv = val(*b).broadcast(shape).expect("forward broadcast");
                    let mut ga = Array2::zeros(shape);
                    let mut gb = Array2::zeros(shape);
                    Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(&g)
                        .and(&av)
                        .and(&bv)
                        .and(&node.value)
                        .for_each(|ga, gb, g, a, b, l| {
                            let log_pdf = |t: f64| crate::scalar::LOG_INV_SQRT_2PI - 0.5 * t * t;
                            let (a, b, l) = (a.val(), b.val(), l.val());
                            let da = if a.is_finite() { -(log_pdf(a) - l).exp() } else { 0.0 };
                            let db = if b.is_finite() { (log_pdf(b) - l).exp() } else { 0.0 };
                            *ga = *g * T::lit(da);
                            *gb = *g * T::lit(db);
                        });
                    acc(&mut grads, *a, reduce_to(&ga, val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(&gb, val(*b).dim()));
                }
            }
            // only leaf gradients are kept
            if matches!(node.op, Op::Leaf) {
                grads[n] = Some(g);
            }
        }
        grads.resize(nodes.len(), None);
        Ok(Gradients { tape: self.id, grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient() {
        let tape = Tape::<f64>::new();
        let w = tape.scalar(3.0);
        let y = tape.square(w).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(w).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn log_sigmoid_gradient_at_zero() {
        let tape = Tape::<f64>::new();
        let w = tape.scalar(0.0);
        let s = tape.sigmoid(w).unwrap();
        let y = tape.ln(s).unwrap();
        let g = tape.backward(y).unwrap();
        assert!((g.wrt(w).unwrap()[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let a = Tape::<f64>::new();
        let b = Tape::<f64>::new();
        let w = a.scalar(1.0);
        assert!(matches!(b.backward(w), Err(Error::NotOnTape)));
        assert!(matches!(b.square(w), Err(Error::NotOnTape)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(Array2::zeros((2, 2)));
        assert!(matches!(tape.backward(w), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let row = tape.leaf(array![[10.0, 20.0]]);
        let col = tape.leaf(array![[1.0], [2.0], [3.0]]);
        let s = tape.scalar(2.0);
        let x = tape.add(a, row).unwrap();
        let x = tape.mul(x, col).unwrap();
        let x = tape.mul(x, s).unwrap();
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(row).unwrap(), &array![[12.0, 12.0]]);
        assert_eq!(g.wrt(col).unwrap(), &array![[66.0], [74.0], [82.0]]);
        // d/ds = sum((a + row) * col)
        assert_eq!(g.wrt(s).unwrap()[[0, 0]], 33.0 + 2.0 * 37.0 + 3.0 * 41.0);
    }

    /// A random program touching every differentiable op, checked against
    /// central differences on every input coordinate.
    #[test]
    fn random_programs_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bins = 4;
        for trial in 0..20 {
            let rows = 5;
            let inputs: Vec<Array2<f64>> = vec![
                Array2::from_shape_fn((rows, 3), |_| rng.random_range(-1.0..1.0)),
                Array2::from_shape_fn((3, spline::raw_len(bins)), |_| rng.random_range(-1.0..1.0)),
                Array2::from_shape_fn((1, spline::raw_len(bins)), |_| rng.random_range(-1.0..1.0)),
                Array2::from_shape_fn((rows, 1), |_| rng.random_range(-2.5..2.5)),
                Array2::from_shape_fn((1, 1), |_| rng.random_range(0.5..1.5)),
            ];
            let inverse = trial % 2 == 1;
            let program = |tape: &Tape<f64>, vars: &[Var]| -> Var {
                let h = tape.matmul(vars[0], vars[1]).unwrap();
                let h = tape.add(h, vars[2]).unwrap();
                let h = tape.relu(h).unwrap();
                let s = tape.spline(h, vars[3], bins, 3.0, inverse).unwrap();
                let y = tape.col(s, 0).unwrap();
                let l = tape.col(s, 1).unwrap();
                let y2 = tape.square(y).unwrap();
                let e = tape.exp(tape.scale(l, 0.3).unwrap()).unwrap();
                let both = tape.concat(&[y2, e]).unwrap();
                let rs = tape.sum_cols(both).unwrap();
                let sig = tape.sigmoid(tape.mul(rs, vars[4]).unwrap()).unwrap();
                let lg = tape.ln(tape.add_const(sig, 1.0).unwrap()).unwrap();
                let hi = tape.add_const(y, 0.7).unwrap();
                let lni = tape.log_normal_interval(y, hi).unwrap();
                let tot = tape.sub(lg, tape.neg(lni).unwrap()).unwrap();
                tape.mean(tot).unwrap()
            };
            let eval = |inputs: &[Array2<f64>]| -> f64 {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
                let out = program(&tape, &vars);
                tape.scalar_value(out).unwrap()
            };
            let tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = program(&tape, &vars);
            let grads = tape.backward(out).unwrap();
            let h = 1e-6;
            for (k, input) in inputs.iter().enumerate() {
                let g = grads.wrt(vars[k]).unwrap();
                for idx in 0..input.len() {
                    let (r, c) = (idx / input.ncols(), idx % input.ncols());
                    let mut up = inputs.clone();
                    up[k][[r, c]] += h;
                    let mut dn = inputs.clone();
                    dn[k][[r, c]] -= h;
                    let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
                    let err = (g[[r, c]] - fd).abs() / fd.abs().max(1e-2);
                    assert!(err < 1e-4, "trial {trial} input {k} [{r},{c}]: {} vs {fd}", g[[r, c]]);
                }
            }
        }
    }
}
