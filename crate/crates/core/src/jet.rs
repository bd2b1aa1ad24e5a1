//! Second-order forward-mode derivatives in three variables.
//!
//! A [`Jet`] carries a value together with its gradient and Hessian with
//! respect to a point in space. Writing a potential once, generic over
//! [`Real`], gives exact first and second derivatives without finite
//! differences.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};

/// Scalar operations needed by the electrode potentials.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(x: f64) -> Self;
    fn re(&self) -> f64;
    fn sqrt(self) -> Self;
    fn atan(self) -> Self;
}

impl Real for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn re(&self) -> f64 {
        *self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub g: Vector3<f64>,
    pub h: Matrix3<f64>,
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Self {
            v,
            g: Vector3::zeros(),
            h: Matrix3::zeros(),
        }
    }

    /// The three coordinate functions seeded at `p`.
    pub fn point(p: &Vector3<f64>) -> [Jet; 3] {
        let mut out = [Jet::constant(0.0); 3];
        for (k, o) in out.iter_mut().enumerate() {
            o.v = p[k];
            o.g[k] = 1.0;
        }
        out
    }

    /// Applies a scalar function given its value and first two derivatives at `self.v`.
    fn chain(self, f: f64, df: f64, d2f: f64) -> Self {
        Self {
            v: f,
            g: self.g * df,
            h: self.h * df + self.g * self.g.transpose() * d2f,
        }
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            g: self.g + o.g,
            h: self.h + o.h,
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        Jet {
            v: self.v - o.v,
            g: self.g - o.g,
            h: self.h - o.h,
        }
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let cross = self.g * o.g.transpose();
        Jet {
            v: self.v * o.v,
            g: self.g * o.v + o.g * self.v,
            h: self.h * o.v + o.h * self.v + cross + cross.transpose(),
        }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        let inv = o.v.recip();
        self * o.chain(inv, -inv * inv, 2.0 * inv * inv * inv)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet {
            v: -self.v,
            g: -self.g,
            h: -self.h,
        }
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, o: f64) -> Jet {
        self.v += o;
        self
    }
}

impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(mut self, o: f64) -> Jet {
        self.v -= o;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, o: f64) -> Jet {
        Jet {
            v: self.v * o,
            g: self.g * o,
            h: self.h * o,
        }
    }
}

impl Div<f64> for Jet {
    type Output = Jet;
    fn div(self, o: f64) -> Jet {
        self * o.recip()
    }
}

impl Real for Jet {
    fn cst(x: f64) -> Self {
        Jet::constant(x)
    }
    fn re(&self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }
    fn atan(self) -> Self {
        let d = 1.0 / (1.0 + self.v * self.v);
        self.chain(self.v.atan(), d, -2.0 * self.v * d * d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<T: Real>(p: [T; 3]) -> T {
        let [x, y, z] = p;
        (x * y / (z * (x * x + y * y + z * z).sqrt())).atan() + x * z * 3.0 - y / z
    }

    #[test]
    fn matches_central_differences() {
        let p = Vector3::new(0.3, -0.7, 1.1);
        let j = f(Jet::point(&p));
        let h = 1e-5;
        for a in 0..3 {
            let e = |k: usize| Vector3::from_fn(|i, _| if i == k { h } else { 0.0 });
            let ev = |q: Vector3<f64>| f([q.x, q.y, q.z]);
            let g = (ev(p + e(a)) - ev(p - e(a))) / (2.0 * h);
            assert!((g - j.g[a]).abs() < 1e-8, "grad {a}");
            for b in 0..3 {
                let hh = (ev(p + e(a) + e(b)) - ev(p + e(a) - e(b)) - ev(p - e(a) + e(b))
                    + ev(p - e(a) - e(b)))
                    / (4.0 * h * h);
                assert!((hh - j.h[(a, b)]).abs() < 1e-5, "hess {a}{b}");
            }
        }
        assert!((j.v - f([p.x, p.y, p.z])).abs() < 1e-15);
    }

    #[test]
    fn hessian_is_symmetric() {
        let j = f(Jet::point(&Vector3::new(1.3, 0.2, 0.4)));
        assert!((j.h - j.h.transpose()).norm() < 1e-12);
    }
}
