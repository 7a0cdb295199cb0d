//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Var`] owns its value and, when any input requires a gradient, the
//! closure that maps its output gradient to input gradients. Graphs built from
//! constants keep no history, so inference frees intermediates eagerly.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::tensor::{self, ConvGeometry, Real, Shape, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[Var<T>]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    grad: RefCell<Option<Tensor<T>>>,
    requires_grad: bool,
}

#[derive(Clone)]
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, grad={})", self.shape(), self.0.requires_grad)
    }
}

impl<T: Real> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            value,
            parents: Vec::new(),
            backward: None,
            grad: RefCell::new(None),
            requires_grad: false,
        }))
    }

    /// A leaf that accumulates a gradient.
    pub fn leaf(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            value,
            parents: Vec::new(),
            backward: None,
            grad: RefCell::new(None),
            requires_grad: true,
        }))
    }

    fn op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Tensor<T>, &[Var<T>]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        if !requires_grad {
            return Var::constant(value);
        }
        Var(Rc::new(Node {
            value,
            parents,
            backward: Some(Box::new(backward)),
            grad: RefCell::new(None),
            requires_grad: true,
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> Shape {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Back-propagates from this scalar. Leaf gradients accumulate.
    pub fn backward(&self) {
        assert_eq!(self.shape().numel(), 1, "backward needs a scalar");
        if !self.0.requires_grad {
            return;
        }
        let order = self.topo_order();
        *self.0.grad.borrow_mut() = Some(Tensor::full(self.shape(), T::one()));
        for var in order.iter().rev() {
            let node = &var.0;
            let Some(f) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = node.grad.borrow_mut().take() else {
                continue;
            };
            let grads = f(&g, &node.parents);
            for (p, pg) in node.parents.iter().zip(grads) {
                if let (true, Some(pg)) = (p.0.requires_grad, pg) {
                    let mut slot = p.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&pg),
                        None => *slot = Some(pg),
                    }
                }
            }
        }
    }

    /// Post-order over nodes that require gradients (parents before children).
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.id()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.0.requires_grad && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

pub fn conv2d<T: Real>(x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, g: ConvGeometry) -> Var<T> {
    let y = tensor::conv2d(x.value(), w.value(), b.map(|b| b.value()), &g);
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Var::op(y, parents, move |dy, p| {
        let (dx, dw, db) =
            tensor::conv2d_backward(p[0].value(), p[1].value(), dy, &g, p[0].requires_grad());
        let mut out = vec![dx, Some(dw)];
        if p.len() == 3 {
            out.push(Some(db.reshape(p[2].shape())));
        }
        out
    })
}

/// Batch statistics computed by a training-mode normalization.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel behind each statistic.
    pub count: usize,
}

/// Normalization with statistics over batch and spatial axes. `gamma` and
/// `beta` have shape `(1, C, 1, 1)`. Returns the biased batch statistics.
pub fn batch_norm_train<T: Real>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    eps: f64,
) -> (Var<T>, BatchStats) {
    let s = x.shape();
    let hw = s.plane();
    let count = (s.n * hw) as f64;
    let xd = x.value().data();
    let mut mean = vec![0.0f64; s.c];
    let mut var = vec![0.0f64; s.c];
    for c in 0..s.c {
        let mut acc = 0.0;
        for n in 0..s.n {
            acc += xd[(n * s.c + c) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        mean[c] = acc / count;
        let mut sq = 0.0;
        for n in 0..s.n {
            sq += xd[(n * s.c + c) * hw..][..hw]
                .iter()
                .map(|v| (v.as_f64() - mean[c]).powi(2))
                .sum::<f64>();
        }
        var[c] = sq / count;
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    {
        let g = gamma.value().data();
        let b = beta.value().data();
        let xh = xhat.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * hw;
                for i in off..off + hw {
                    xh[i] = (xd[i] - mean_t[c]) * inv_std[c];
                }
            }
        }
        let yd = y.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * hw;
                for i in off..off + hw {
                    yd[i] = xh[i] * g[c] + b[c];
                }
            }
        }
    }
    let stats = BatchStats {
        mean,
        var,
        count: s.n * s.plane(),
    };
    let out = Var::op(y, vec![x.clone(), gamma.clone(), beta.clone()], move |dy, p| {
        let g = p[1].value().data();
        let dyd = dy.data();
        let xh = xhat.data();
        let m = T::from_f64(count);
        let mut dgamma = Tensor::zeros(p[1].shape());
        let mut dbeta = Tensor::zeros(p[2].shape());
        let mut dx = Tensor::zeros(s);
        for c in 0..s.c {
            let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
            for n in 0..s.n {
                let off = (n * s.c + c) * hw;
                for i in off..off + hw {
                    sum_dy = sum_dy + dyd[i];
                    sum_dy_xh = sum_dy_xh + dyd[i] * xh[i];
                }
            }
            dgamma.data_mut()[c] = sum_dy_xh;
            dbeta.data_mut()[c] = sum_dy;
            let k = g[c] * inv_std[c] / m;
            let dxd = dx.data_mut();
            for n in 0..s.n {
                let off = (n * s.c + c) * hw;
                for i in off..off + hw {
                    dxd[i] = k * (m * dyd[i] - sum_dy - xh[i] * sum_dy_xh);
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    });
    (out, stats)
}

/// Per-channel affine `y = x * scale + shift`, the inference form of normalization.
/// `scale` and `shift` have shape `(1, C, 1, 1)`.
pub fn channel_affine<T: Real>(x: &Var<T>, scale: &Var<T>, shift: &Var<T>) -> Var<T> {
    let s = x.shape();
    let hw = s.plane();
    let mut y = x.value().clone();
    {
        let (a, b) = (scale.value().data(), shift.value().data());
        let yd = y.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                for v in &mut yd[(n * s.c + c) * hw..][..hw] {
                    *v = *v * a[c] + b[c];
                }
            }
        }
    }
    Var::op(y, vec![x.clone(), scale.clone(), shift.clone()], move |dy, p| {
        let a = p[1].value().data();
        let xd = p[0].value().data();
        let dyd = dy.data();
        let mut dx = dy.clone();
        let mut da = Tensor::zeros(p[1].shape());
        let mut db = Tensor::zeros(p[2].shape());
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * hw;
                let (mut sa, mut sb) = (T::zero(), T::zero());
                for i in off..off + hw {
                    sa = sa + dyd[i] * xd[i];
                    sb = sb + dyd[i];
                }
                da.data_mut()[c] = da.data()[c] + sa;
                db.data_mut()[c] = db.data()[c] + sb;
                for v in &mut dx.data_mut()[off..off + hw] {
                    *v = *v * a[c];
                }
            }
        }
        vec![Some(dx), Some(da), Some(db)]
    })
}

pub fn relu<T: Real>(x: &Var<T>) -> Var<T> {
    let y = x.value().map(|v| if v > T::zero() { v } else { T::zero() });
    Var::op(y, vec![x.clone()], |dy, p| {
        vec![Some(dy.zip_map(p[0].value(), |g, v| {
            if v > T::zero() {
                g
            } else {
                T::zero()
            }
        }))]
    })
}

pub fn sigmoid<T: Real>(x: &Var<T>) -> Var<T> {
    let y = x.value().map(|v| T::one() / (T::one() + (-v).exp()));
    let saved = y.clone();
    Var::op(y, vec![x.clone()], move |dy, _| {
        vec![Some(dy.zip_map(&saved, |g, s| g * s * (T::one() - s)))]
    })
}

/// `1 - x`.
pub fn one_minus<T: Real>(x: &Var<T>) -> Var<T> {
    let y = x.value().map(|v| T::one() - v);
    Var::op(y, vec![x.clone()], |dy, _| vec![Some(dy.map(|g| -g))])
}

pub fn add<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_eq!(a.shape(), b.shape(), "add shapes");
    let y = a.value().zip_map(b.value(), |p, q| p + q);
    Var::op(y, vec![a.clone(), b.clone()], |dy, _| {
        vec![Some(dy.clone()), Some(dy.clone())]
    })
}

/// Elementwise product; a single-channel `gate` broadcasts across `x`'s channels.
pub fn mul<T: Real>(x: &Var<T>, gate: &Var<T>) -> Var<T> {
    let (s, gs) = (x.shape(), gate.shape());
    assert!(
        gs == s || (gs.c == 1 && gs.n == s.n && gs.h == s.h && gs.w == s.w),
        "mul shapes {s} and {gs}"
    );
    let hw = s.plane();
    let gidx = move |n: usize, c: usize| if gs.c == 1 { n * hw } else { (n * s.c + c) * hw };
    let mut y = x.value().clone();
    {
        let gd = gate.value().data();
        let yd = y.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                let (yo, go) = ((n * s.c + c) * hw, gidx(n, c));
                for i in 0..hw {
                    yd[yo + i] = yd[yo + i] * gd[go + i];
                }
            }
        }
    }
    Var::op(y, vec![x.clone(), gate.clone()], move |dy, p| {
        let xd = p[0].value().data();
        let gd = p[1].value().data();
        let dyd = dy.data();
        let mut dx = Tensor::zeros(s);
        let mut dg = Tensor::zeros(gs);
        for n in 0..s.n {
            for c in 0..s.c {
                let (yo, go) = ((n * s.c + c) * hw, gidx(n, c));
                for i in 0..hw {
                    dx.data_mut()[yo + i] = dyd[yo + i] * gd[go + i];
                    let acc = dg.data()[go + i] + dyd[yo + i] * xd[yo + i];
                    dg.data_mut()[go + i] = acc;
                }
            }
        }
        vec![Some(dx), Some(dg)]
    })
}

pub fn resize<T: Real>(x: &Var<T>, h: usize, w: usize) -> Var<T> {
    let s = x.shape();
    if s.h == h && s.w == w {
        return x.clone();
    }
    let y = tensor::resize_bilinear(x.value(), h, w);
    Var::op(y, vec![x.clone()], move |dy, _| {
        vec![Some(tensor::resize_bilinear_backward(dy, s.h, s.w))]
    })
}

pub fn concat<T: Real>(xs: &[Var<T>]) -> Var<T> {
    let values: Vec<&Tensor<T>> = xs.iter().map(|v| v.value()).collect();
    let y = tensor::concat_channels(&values);
    let channels: Vec<usize> = xs.iter().map(|v| v.shape().c).collect();
    Var::op(y, xs.to_vec(), move |dy, _| {
        let mut start = 0;
        channels
            .iter()
            .map(|&c| {
                let idx: Vec<usize> = (start..start + c).collect();
                start += c;
                Some(tensor::select_channels(dy, &idx))
            })
            .collect()
    })
}

pub fn select_channels<T: Real>(x: &Var<T>, idx: &[usize]) -> Var<T> {
    let s = x.shape();
    let y = tensor::select_channels(x.value(), idx);
    let idx = idx.to_vec();
    Var::op(y, vec![x.clone()], move |dy, _| {
        let hw = s.plane();
        let mut dx = Tensor::zeros(s);
        let dyd = dy.data();
        for n in 0..s.n {
            for (j, &c) in idx.iter().enumerate() {
                let src = &dyd[(n * idx.len() + j) * hw..][..hw];
                let dst = &mut dx.data_mut()[(n * s.c + c) * hw..][..hw];
                for (d, &g) in dst.iter_mut().zip(src) {
                    *d = *d + g;
                }
            }
        }
        vec![Some(dx)]
    })
}

/// Label value excluded from loss and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Mean pixelwise cross-entropy over non-ignored pixels. `labels` is laid out
/// `(n, h, w)`. Zero (with zero gradient) when every pixel is ignored.
pub fn cross_entropy<T: Real>(logits: &Var<T>, labels: &[u8]) -> Var<T> {
    let s = logits.shape();
    let hw = s.plane();
    assert_eq!(labels.len(), s.n * hw, "label count");
    let ld = logits.value().data();
    let mut probs = Tensor::zeros(s);
    let mut total = 0.0f64;
    let mut valid = 0usize;
    for n in 0..s.n {
        for p in 0..hw {
            let at = |c: usize| (n * s.c + c) * hw + p;
            let mut mx = T::neg_infinity();
            for c in 0..s.c {
                mx = mx.max(ld[at(c)]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (ld[at(c)] - mx).exp();
                probs.data_mut()[at(c)] = e;
                z = z + e;
            }
            for c in 0..s.c {
                let v = probs.data()[at(c)] / z;
                probs.data_mut()[at(c)] = v;
            }
            let label = labels[n * hw + p];
            if label != IGNORE_INDEX {
                let l = label as usize;
                assert!(l < s.c, "label {l} out of range for {} classes", s.c);
                total -= (ld[at(l)] - mx - z.ln()).as_f64();
                valid += 1;
            }
        }
    }
    let loss = if valid == 0 { 0.0 } else { total / valid as f64 };
    let value = Tensor::full(Shape::new(1, 1, 1, 1), T::from_f64(loss));
    let labels = labels.to_vec();
    Var::op(value, vec![logits.clone()], move |dy, _| {
        let mut dx = Tensor::zeros(s);
        if valid == 0 {
            return vec![Some(dx)];
        }
        let scale = dy.data()[0] / T::from_f64(valid as f64);
        let pd = probs.data();
        let dxd = dx.data_mut();
        for n in 0..s.n {
            for p in 0..hw {
                let label = labels[n * hw + p];
                if label == IGNORE_INDEX {
                    continue;
                }
                for c in 0..s.c {
                    let i = (n * s.c + c) * hw + p;
                    let target = if c == label as usize { T::one() } else { T::zero() };
                    dxd[i] = (pd[i] - target) * scale;
                }
            }
        }
        vec![Some(dx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Central-difference check of d(sum(w * f(x)))/dx for every input element.
    fn check(
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&[Var<f64>]) -> Var<f64>,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vars: Vec<Var<f64>> = inputs.iter().cloned().map(Var::leaf).collect();
        let out = f(&vars);
        let weights = random(out.shape(), &mut rng);
        let scalar = |o: &Var<f64>| -> f64 {
            o.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let wv = Var::constant(weights.clone());
        sum_all(&mul(&out, &wv)).backward();
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let g = vars[k].grad().unwrap();
            for i in 0..input.data().len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fp = scalar(&f(&plus.into_iter().map(Var::constant).collect::<Vec<_>>()));
                let fm = scalar(&f(&minus.into_iter().map(Var::constant).collect::<Vec<_>>()));
                let num = (fp - fm) / (2.0 * h);
                let ana = g.data()[i];
                assert!(
                    (num - ana).abs() <= 1e-5 * (1.0 + num.abs()),
                    "input {k} element {i}: numeric {num} analytic {ana}"
                );
            }
        }
    }

    fn sum_all(x: &Var<f64>) -> Var<f64> {
        let s = x.shape();
        let total: f64 = x.value().data().iter().sum();
        Var::op(
            Tensor::full(Shape::new(1, 1, 1, 1), total),
            vec![x.clone()],
            move |dy, _| vec![Some(Tensor::full(s, dy.data()[0]))],
        )
    }

    #[test]
    fn gradients_of_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Shape::new(2, 3, 4, 5);
        let a = random(s, &mut rng);
        let b = random(s, &mut rng);
        let gate = random(Shape::new(2, 1, 4, 5), &mut rng);
        check(vec![a.clone(), b.clone()], |v| add(&v[0], &v[1]), 2);
        check(vec![a.clone(), b.clone()], |v| mul(&v[0], &v[1]), 3);
        check(vec![a.clone(), gate], |v| mul(&v[0], &v[1]), 4);
        check(vec![a.clone()], |v| sigmoid(&v[0]), 5);
        check(vec![a.clone()], |v| one_minus(&v[0]), 6);
        check(vec![a.clone()], |v| relu(&v[0]), 7);
        check(vec![a.clone(), b], |v| concat(&[v[0].clone(), v[1].clone()]), 8);
        check(vec![a], |v| select_channels(&v[0], &[2, 0, 2]), 9);
    }

    #[test]
    fn gradients_of_conv_resize_and_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = ConvGeometry {
            in_channels: 4,
            out_channels: 6,
            kernel: 3,
            stride: 2,
            padding: 1,
            groups: 2,
        };
        let x = random(Shape::new(2, 4, 5, 6), &mut rng);
        let w = random(g.weight_shape(), &mut rng);
        let b = random(Shape::new(1, 6, 1, 1), &mut rng);
        check(vec![x.clone(), w, b], |v| conv2d(&v[0], &v[1], Some(&v[2]), g), 12);
        check(vec![x.clone()], |v| resize(&v[0], 9, 4), 13);
        let gamma = random(Shape::new(1, 4, 1, 1), &mut rng);
        let beta = random(Shape::new(1, 4, 1, 1), &mut rng);
        check(
            vec![x.clone(), gamma.clone(), beta.clone()],
            |v| batch_norm_train(&v[0], &v[1], &v[2], 1e-5).0,
            14,
        );
        check(vec![x, gamma, beta], |v| channel_affine(&v[0], &v[1], &v[2]), 15);
    }

    #[test]
    fn cross_entropy_gradient_and_ignore() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = random(Shape::new(2, 3, 2, 2), &mut rng);
        let labels = [0u8, 1, 2, 255, 1, 1, 0, 2];
        check(vec![logits.clone()], |v| cross_entropy(&v[0], &labels), 22);

        let all_ignored = [IGNORE_INDEX; 8];
        let x = Var::leaf(logits);
        let loss = cross_entropy(&x, &all_ignored);
        assert_eq!(loss.value().data()[0], 0.0);
        loss.backward();
        assert!(x.grad().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constants_keep_no_history() {
        let a = Var::constant(Tensor::full(Shape::new(1, 1, 2, 2), 1.0f32));
        let b = relu(&add(&a, &a));
        assert!(!b.requires_grad());
        assert!(b.0.parents.is_empty());
    }
}
