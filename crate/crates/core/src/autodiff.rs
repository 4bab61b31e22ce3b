//! Tape-based reverse-mode automatic differentiation over [`Scalar`] values.
//!
//! Operations on [`Var`] are recorded on a shared [`Tape`]; calling
//! [`Var::backward`] replays the tape in reverse to accumulate exact
//! gradients with respect to every recorded variable.
//!
//! ```
//! use seqflow_core::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.var(3.0_f64);
//! let y = x.clone() * x.clone() + x.clone();
//! let grads = y.backward();
//! assert_eq!(grads.get(&x), 7.0); // d/dx (x^2 + x) = 2x + 1
//! ```

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::scalar::Scalar;

/// Records values and operations for a single loss evaluation.
#[derive(Clone)]
pub struct Tape<T> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                vals: Vec::new(),
                grads: Vec::new(),
                ops: Vec::new(),
            })),
        }
    }

    /// Differentiable leaf variable.
    pub fn var(&self, value: T) -> Var<T> {
        Var {
            tape: self.clone(),
            idx: self.inner.borrow_mut().push_value(value),
        }
    }

    /// Constant: participates in arithmetic, receives no meaningful gradient.
    pub fn constant(&self, value: T) -> Var<T> {
        self.var(value)
    }

    /// Number of recorded values (diagnostic).
    pub fn len(&self) -> usize {
        self.inner.borrow().vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sum of a slice of variables; zero constant when empty.
    pub fn sum(&self, terms: &[Var<T>]) -> Var<T> {
        match terms.len() {
            0 => self.constant(T::zero()),
            _ => {
                let mut acc = terms[0].clone();
                for t in &terms[1..] {
                    acc = acc + t.clone();
                }
                acc
            }
        }
    }

    /// Max-shifted log of the sum of exponentials. The shift is chosen from
    /// current values and treated as a constant, which leaves the gradient
    /// exact. Entries at -inf contribute nothing.
    pub fn log_sum_exp(&self, terms: &[Var<T>]) -> Var<T> {
        let m = terms
            .iter()
            .map(Var::value)
            .fold(T::neg_infinity(), |acc, x| if x > acc { x } else { acc });
        if m == T::neg_infinity() {
            return self.constant(T::neg_infinity());
        }
        let shifted: Vec<Var<T>> = terms
            .iter()
            .filter(|v| v.value() > T::neg_infinity())
            .map(|v| (v.clone() - m).exp())
            .collect();
        self.sum(&shifted).ln() + m
    }
}

/// Differentiable scalar bound to a tape.
#[derive(Clone)]
pub struct Var<T> {
    tape: Tape<T>,
    idx: usize,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> T {
        self.tape.inner.borrow().vals[self.idx]
    }

    /// Back-propagates from this variable; returns all gradients.
    pub fn backward(&self) -> Gradients<T> {
        self.tape.inner.borrow_mut().backward_from(self.idx);
        Gradients {
            tape: self.tape.clone(),
        }
    }

    pub fn exp(self) -> Self {
        unary(self, OpKind::Exp, |a| a.exp())
    }

    pub fn ln(self) -> Self {
        unary(self, OpKind::Ln, |a| a.ln())
    }

    pub fn tanh(self) -> Self {
        unary(self, OpKind::Tanh, |a| a.tanh())
    }

    pub fn square(self) -> Self {
        self.clone() * self
    }
}

/// Gradients produced by [`Var::backward`].
pub struct Gradients<T> {
    tape: Tape<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> T {
        self.tape.inner.borrow().grads[var.idx]
    }
}

struct TapeInner<T> {
    vals: Vec<T>,
    grads: Vec<T>,
    ops: Vec<Op>,
}

struct Op {
    kind: OpKind,
    out: usize,
    a: usize,
    b: usize,
}

enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Tanh,
}

impl<T: Scalar> TapeInner<T> {
    fn push_value(&mut self, v: T) -> usize {
        let idx = self.vals.len();
        self.vals.push(v);
        self.grads.push(T::zero());
        idx
    }

    fn backward_from(&mut self, out: usize) {
        for g in &mut self.grads {
            *g = T::zero();
        }
        self.grads[out] = T::one();
        for op in self.ops.iter().rev() {
            let go = self.grads[op.out];
            if go == T::zero() {
                continue;
            }
            match op.kind {
                OpKind::Add => {
                    self.grads[op.a] += go;
                    self.grads[op.b] += go;
                }
                OpKind::Sub => {
                    self.grads[op.a] += go;
                    self.grads[op.b] -= go;
                }
                OpKind::Mul => {
                    let (a, b) = (self.vals[op.a], self.vals[op.b]);
                    self.grads[op.a] += go * b;
                    self.grads[op.b] += go * a;
                }
                OpKind::Div => {
                    let (a, b) = (self.vals[op.a], self.vals[op.b]);
                    self.grads[op.a] += go / b;
                    self.grads[op.b] += go * (-a / (b * b));
                }
                OpKind::Neg => {
                    self.grads[op.a] -= go;
                }
                OpKind::Exp => {
                    let out_val = self.vals[op.out];
                    self.grads[op.a] += go * out_val;
                }
                OpKind::Ln => {
                    let a = self.vals[op.a];
                    self.grads[op.a] += go / a;
                }
                OpKind::Tanh => {
                    let out_val = self.vals[op.out];
                    self.grads[op.a] += go * (T::one() - out_val * out_val);
                }
            }
        }
    }
}

fn unary<T: Scalar>(x: Var<T>, kind: OpKind, f: impl FnOnce(T) -> T) -> Var<T> {
    let tape = x.tape.clone();
    let out_val = f(x.value());
    let out = {
        let mut inner = tape.inner.borrow_mut();
        let out = inner.push_value(out_val);
        inner.ops.push(Op {
            kind,
            out,
            a: x.idx,
            b: 0,
        });
        out
    };
    Var { tape, idx: out }
}

fn binary<T: Scalar>(lhs: Var<T>, rhs: Var<T>, kind: OpKind, f: impl FnOnce(T, T) -> T) -> Var<T> {
    assert!(
        Rc::ptr_eq(&lhs.tape.inner, &rhs.tape.inner),
        "variables must share a tape"
    );
    let tape = lhs.tape.clone();
    let out_val = f(lhs.value(), rhs.value());
    let out = {
        let mut inner = tape.inner.borrow_mut();
        let out = inner.push_value(out_val);
        inner.ops.push(Op {
            kind,
            out,
            a: lhs.idx,
            b: rhs.idx,
        });
        out
    };
    Var { tape, idx: out }
}

impl<T: Scalar> Add for Var<T> {
    type Output = Var<T>;
    fn add(self, rhs: Self) -> Var<T> {
        binary(self, rhs, OpKind::Add, |a, b| a + b)
    }
}

impl<T: Scalar> Sub for Var<T> {
    type Output = Var<T>;
    fn sub(self, rhs: Self) -> Var<T> {
        binary(self, rhs, OpKind::Sub, |a, b| a - b)
    }
}

impl<T: Scalar> Mul for Var<T> {
    type Output = Var<T>;
    fn mul(self, rhs: Self) -> Var<T> {
        binary(self, rhs, OpKind::Mul, |a, b| a * b)
    }
}

impl<T: Scalar> Div for Var<T> {
    type Output = Var<T>;
    fn div(self, rhs: Self) -> Var<T> {
        binary(self, rhs, OpKind::Div, |a, b| a / b)
    }
}

impl<T: Scalar> Neg for Var<T> {
    type Output = Var<T>;
    fn neg(self) -> Var<T> {
        unary(self, OpKind::Neg, |a| -a)
    }
}

impl<T: Scalar> Add<T> for Var<T> {
    type Output = Var<T>;
    fn add(self, c: T) -> Var<T> {
        let c = self.tape.constant(c);
        self + c
    }
}

impl<T: Scalar> Sub<T> for Var<T> {
    type Output = Var<T>;
    fn sub(self, c: T) -> Var<T> {
        let c = self.tape.constant(c);
        self - c
    }
}

impl<T: Scalar> Mul<T> for Var<T> {
    type Output = Var<T>;
    fn mul(self, c: T) -> Var<T> {
        let c = self.tape.constant(c);
        self * c
    }
}
