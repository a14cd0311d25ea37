//! Differentiable building blocks with hand-written backward passes.
//!
//! Backward functions *accumulate* into the gradient buffers and input
//! gradients they are given; callers zero them.

use crate::error::{Error, Result};
use crate::math::{axpy, relu, relu_grad, sigmoid, softmax, Matrix};

/// Context sizes: `d_w` words on each side, `d_l` previous labels, `d_c`
/// characters on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub d_w: usize,
    pub d_l: usize,
    pub d_c: usize,
}

impl WindowSpec {
    pub fn new(d_w: usize, d_l: usize, d_c: usize) -> Result<Self> {
        if d_l == 0 {
            return Err(Error::config("label context d_l must be at least 1"));
        }
        Ok(WindowSpec { d_w, d_l, d_c })
    }

    pub fn word_slots(&self) -> usize {
        2 * self.d_w + 1
    }

    pub fn char_slots(&self) -> usize {
        2 * self.d_c + 1
    }
}

/// Table rows for the window `t-d .. t+d`, left to right. Positions before
/// the start read `pad.0`, positions past the end read `pad.1`.
pub fn window_rows(indices: &[usize], t: usize, d: usize, pad: (usize, usize)) -> Vec<usize> {
    (0..2 * d + 1)
        .map(|k| {
            let pos = t as isize + k as isize - d as isize;
            if pos < 0 {
                pad.0
            } else if pos as usize >= indices.len() {
                pad.1
            } else {
                indices[pos as usize]
            }
        })
        .collect()
}

/// Rows for the `d_l` labels preceding `t`: slot `k` holds `history[t-d_l+k]`,
/// or `bol` where that index is negative.
pub fn label_rows(history: &[usize], t: usize, d_l: usize, bol: usize) -> Vec<usize> {
    (0..d_l)
        .map(|k| {
            let pos = t as isize - d_l as isize + k as isize;
            if pos < 0 {
                bol
            } else {
                history[pos as usize]
            }
        })
        .collect()
}

pub fn gather_rows(table: &Matrix, rows: &[usize], out: &mut Vec<f64>) {
    for &r in rows {
        out.extend_from_slice(table.row(r));
    }
}

/// Adds consecutive `table.cols()`-sized chunks of `grad` into the listed rows.
pub fn scatter_rows(grad_table: &mut Matrix, rows: &[usize], grad: &[f64], touched: &mut Vec<usize>) {
    let d = grad_table.cols();
    for (&r, g) in rows.iter().zip(grad.chunks_exact(d)) {
        axpy(1.0, g, grad_table.row_mut(r));
        touched.push(r);
    }
}

pub fn word_window(words: &[usize], t: usize, d_w: usize, pad: (usize, usize), table: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity((2 * d_w + 1) * table.cols());
    gather_rows(table, &window_rows(words, t, d_w, pad), &mut out);
    out
}

pub fn label_window(history: &[usize], t: usize, d_l: usize, bol: usize, table: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(d_l * table.cols());
    gather_rows(table, &label_rows(history, t, d_l, bol), &mut out);
    out
}

/// Pre-activation and activation of one affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseCache {
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

pub fn dense_forward(w: &Matrix, b: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    let mut pre = vec![0.0; w.rows()];
    w.affine(x, b.as_slice(), &mut pre)?;
    Ok(pre)
}

/// Backward of `pre = w x + b` given `dpre`.
pub fn dense_backward(
    w: &Matrix,
    x: &[f64],
    dpre: &[f64],
    gw: &mut Matrix,
    gb: &mut Matrix,
    dx: Option<&mut [f64]>,
) -> Result<()> {
    gw.add_outer(dpre, x)?;
    axpy(1.0, dpre, gb.as_mut_slice());
    if let Some(dx) = dx {
        w.transpose_mul_acc(dpre, dx)?;
    }
    Ok(())
}

/// `h = relu(w x + b)`.
pub fn relu_hidden_forward(w: &Matrix, b: &Matrix, x: &[f64]) -> Result<DenseCache> {
    let pre = dense_forward(w, b, x)?;
    let out = pre.iter().map(|&p| relu(p)).collect();
    Ok(DenseCache { pre, out })
}

pub fn relu_hidden_backward(
    w: &Matrix,
    x: &[f64],
    cache: &DenseCache,
    dh: &[f64],
    gw: &mut Matrix,
    gb: &mut Matrix,
    dx: Option<&mut [f64]>,
) -> Result<()> {
    let dpre: Vec<f64> = dh.iter().zip(&cache.pre).map(|(g, &p)| g * relu_grad(p)).collect();
    dense_backward(w, x, &dpre, gw, gb, dx)
}

/// Softmax output distribution.
pub fn output_forward(o: &Matrix, b: &Matrix, h: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&dense_forward(o, b, h)?))
}

/// Gradient of `-log y[gold]` with respect to the pre-softmax activations.
pub fn output_backward(y: &[f64], gold: usize) -> Vec<f64> {
    let mut d = y.to_vec();
    d[gold] -= 1.0;
    d
}

#[derive(Clone, Copy)]
pub struct GruParams<'a> {
    pub wz: &'a Matrix,
    pub uz: &'a Matrix,
    pub bz: &'a Matrix,
    pub wr: &'a Matrix,
    pub ur: &'a Matrix,
    pub br: &'a Matrix,
    pub wh: &'a Matrix,
    pub uh: &'a Matrix,
    pub bh: &'a Matrix,
}

pub struct GruGrads<'a> {
    pub wz: &'a mut Matrix,
    pub uz: &'a mut Matrix,
    pub bz: &'a mut Matrix,
    pub wr: &'a mut Matrix,
    pub ur: &'a mut Matrix,
    pub br: &'a mut Matrix,
    pub wh: &'a mut Matrix,
    pub uh: &'a mut Matrix,
    pub bh: &'a mut Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    /// `r ⊙ h_prev`
    pub rh: Vec<f64>,
    pub candidate: Vec<f64>,
    pub h: Vec<f64>,
}

fn gate(w: &Matrix, u: &Matrix, b: &Matrix, h: &[f64], x: &[f64], f: fn(f64) -> f64) -> Result<Vec<f64>> {
    let mut a = dense_forward(w, b, h)?;
    let ux = dense_forward(u, &Matrix::zeros(u.rows(), 1), x)?;
    a.iter_mut().zip(ux).for_each(|(a, v)| *a = f(*a + v));
    Ok(a)
}

/// One GRU step:
/// `z = σ(Wz h + Uz x + bz)`, `r = σ(Wr h + Ur x + br)`,
/// `ĥ = tanh(Wh (r ⊙ h) + Uh x + bh)`, `h' = (1 - z) ⊙ h + z ⊙ ĥ`.
pub fn gru_forward(p: &GruParams, x: &[f64], h_prev: &[f64]) -> Result<GruCache> {
    let z = gate(p.wz, p.uz, p.bz, h_prev, x, sigmoid)?;
    let r = gate(p.wr, p.ur, p.br, h_prev, x, sigmoid)?;
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let candidate = gate(p.wh, p.uh, p.bh, &rh, x, f64::tanh)?;
    let h = (0..z.len())
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * candidate[i])
        .collect();
    Ok(GruCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        z,
        r,
        rh,
        candidate,
        h,
    })
}

/// Backward of one GRU step. Returns the gradient for `h_prev`.
pub fn gru_backward(p: &GruParams, c: &GruCache, dh: &[f64], g: &mut GruGrads, dx: &mut [f64]) -> Result<Vec<f64>> {
    let n = c.h.len();
    let mut dh_prev: Vec<f64> = (0..n).map(|i| dh[i] * (1.0 - c.z[i])).collect();

    let da_h: Vec<f64> = (0..n)
        .map(|i| dh[i] * c.z[i] * (1.0 - c.candidate[i] * c.candidate[i]))
        .collect();
    g.wh.add_outer(&da_h, &c.rh)?;
    g.uh.add_outer(&da_h, &c.x)?;
    axpy(1.0, &da_h, g.bh.as_mut_slice());
    let mut d_rh = vec![0.0; n];
    p.wh.transpose_mul_acc(&da_h, &mut d_rh)?;
    p.uh.transpose_mul_acc(&da_h, dx)?;

    let da_z: Vec<f64> = (0..n)
        .map(|i| dh[i] * (c.candidate[i] - c.h_prev[i]) * c.z[i] * (1.0 - c.z[i]))
        .collect();
    let da_r: Vec<f64> = (0..n)
        .map(|i| d_rh[i] * c.h_prev[i] * c.r[i] * (1.0 - c.r[i]))
        .collect();
    for i in 0..n {
        dh_prev[i] += d_rh[i] * c.r[i];
    }
    for (da, w, u, gw, gu, gb) in [
        (&da_z, p.wz, p.uz, &mut *g.wz, &mut *g.uz, &mut *g.bz),
        (&da_r, p.wr, p.ur, &mut *g.wr, &mut *g.ur, &mut *g.br),
    ] {
        gw.add_outer(da, &c.h_prev)?;
        gu.add_outer(da, &c.x)?;
        axpy(1.0, da, gb.as_mut_slice());
        w.transpose_mul_acc(da, &mut dh_prev)?;
        u.transpose_mul_acc(da, dx)?;
    }
    Ok(dh_prev)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharConvCache {
    /// Character-table rows of every window, one entry per character position.
    pub windows: Vec<Vec<usize>>,
    pub inputs: Vec<Vec<f64>>,
    /// For each output unit, the first position holding its maximum.
    pub argmax: Vec<usize>,
}

/// Convolution of width `2 d_c + 1` over a word's characters followed by
/// max-pooling along the word; the result size is `w.rows()` for any length.
pub fn char_conv_forward(
    chars: &[usize],
    table: &Matrix,
    w: &Matrix,
    b: &Matrix,
    d_c: usize,
    pad: usize,
) -> Result<(Vec<f64>, CharConvCache)> {
    if chars.is_empty() {
        return Err(Error::data("character convolution over an empty word"));
    }
    let mut out = vec![f64::NEG_INFINITY; w.rows()];
    let mut argmax = vec![0; w.rows()];
    let mut windows = Vec::with_capacity(chars.len());
    let mut inputs = Vec::with_capacity(chars.len());
    for i in 0..chars.len() {
        let rows = window_rows(chars, i, d_c, (pad, pad));
        let mut x = Vec::with_capacity(rows.len() * table.cols());
        gather_rows(table, &rows, &mut x);
        let conv = dense_forward(w, b, &x)?;
        for (j, v) in conv.into_iter().enumerate() {
            if v > out[j] {
                out[j] = v;
                argmax[j] = i;
            }
        }
        windows.push(rows);
        inputs.push(x);
    }
    Ok((out, CharConvCache { windows, inputs, argmax }))
}

/// Routes `dout` to the argmax column of each row: a `units x len` matrix.
pub fn max_pool_backward(argmax: &[usize], dout: &[f64], len: usize) -> Matrix {
    let mut d = Matrix::zeros(argmax.len(), len);
    for (j, (&p, &g)) in argmax.iter().zip(dout).enumerate() {
        d.set(j, p, g);
    }
    d
}

pub fn char_conv_backward(
    w: &Matrix,
    cache: &CharConvCache,
    dout: &[f64],
    gw: &mut Matrix,
    gb: &mut Matrix,
    gtable: &mut Matrix,
    touched: &mut Vec<usize>,
) -> Result<()> {
    let routed = max_pool_backward(&cache.argmax, dout, cache.inputs.len());
    for (p, (x, rows)) in cache.inputs.iter().zip(&cache.windows).enumerate() {
        let dconv: Vec<f64> = (0..routed.rows()).map(|j| routed.get(j, p)).collect();
        if dconv.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut dx = vec![0.0; x.len()];
        dense_backward(w, x, &dconv, gw, gb, Some(&mut dx))?;
        scatter_rows(gtable, rows, &dx, touched);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{rng_from_seed, xavier_init, Rng};
    use rand::Rng as _;

    fn rand_matrix(r: usize, c: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
    }

    /// Central difference of `f` w.r.t. every entry of `v`.
    fn numeric_grad(v: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..v.len())
            .map(|i| {
                let orig = v[i];
                v[i] = orig + h;
                let up = f(v);
                v[i] = orig - h;
                let down = f(v);
                v[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            assert!(rel_err(*a, *n) < 1e-5, "{what}[{i}]: analytic {a} numeric {n}");
        }
    }

    #[test]
    fn window_padding_one_word() {
        assert_eq!(window_rows(&[7], 0, 2, (1, 2)), vec![1, 1, 7, 2, 2]);
        assert_eq!(window_rows(&[7, 8, 9], 1, 0, (1, 2)), vec![8]);
        let ws: Vec<usize> = (10..30).collect();
        assert_eq!(window_rows(&ws, 10, 5, (1, 2)).len(), 11);
    }

    #[test]
    fn label_window_layout() {
        let hist = [5, 6, 7];
        assert_eq!(label_rows(&hist, 0, 3, 9), vec![9, 9, 9]);
        assert_eq!(label_rows(&hist, 2, 5, 9), vec![9, 9, 9, 5, 6]);
        assert_eq!(label_rows(&hist, 3, 1, 9), vec![7]);
    }

    #[test]
    fn window_slots_are_position_stable() {
        let mut rng = rng_from_seed(2);
        let table = rand_matrix(12, 3, &mut rng);
        let words = [3, 4, 5, 6, 7];
        let base = word_window(&words, 2, 2, (1, 2), &table);
        for k in 0..5 {
            let mut changed = words;
            let pos = 2 + k - 2;
            changed[pos] = 11;
            let w = word_window(&changed, 2, 2, (1, 2), &table);
            for c in 0..w.len() {
                let inside = c >= 3 * k && c < 3 * (k + 1);
                assert_eq!(w[c] != base[c], inside, "slot {k} coord {c}");
            }
        }
    }

    #[test]
    fn relu_zero_weights_give_zero() {
        let w = Matrix::zeros(4, 3);
        let b = Matrix::zeros(4, 1);
        assert_eq!(relu_hidden_forward(&w, &b, &[1.0, -2.0, 3.0]).unwrap().out, vec![0.0; 4]);
    }

    #[test]
    fn relu_hand_worked_case() {
        // [[1, -1, 2], [0.5, 0.5, -3]] * [1, 2, 3] + [0.5, 1] = [5.5, -6.5] -> [5.5, 0]
        let w = Matrix::from_vec(2, 3, vec![1.0, -1.0, 2.0, 0.5, 0.5, -3.0]).unwrap();
        let b = Matrix::column(vec![0.5, 1.0]);
        let c = relu_hidden_forward(&w, &b, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c.pre, vec![5.5, -6.5]);
        assert_eq!(c.out, vec![5.5, 0.0]);
        assert!(relu_hidden_forward(&w, &b, &[1.0]).is_err());
    }

    #[test]
    fn relu_hidden_gradients() {
        let mut rng = rng_from_seed(31);
        for _ in 0..20 {
            let (n, m) = (4, 6);
            let mut w = rand_matrix(n, m, &mut rng);
            let mut b = Matrix::column(rand_vec(n, &mut rng));
            let mut x = rand_vec(m, &mut rng);
            let proj = rand_vec(n, &mut rng);
            let loss = |w: &Matrix, b: &Matrix, x: &[f64]| -> f64 {
                let c = relu_hidden_forward(w, b, x).unwrap();
                c.out.iter().zip(&proj).map(|(a, p)| a * p).sum()
            };
            let cache = relu_hidden_forward(&w, &b, &x).unwrap();
            if cache.pre.iter().any(|p| p.abs() < 1e-3) {
                continue;
            }
            let (mut gw, mut gb, mut dx) = (Matrix::zeros(n, m), Matrix::zeros(n, 1), vec![0.0; m]);
            relu_hidden_backward(&w, &x, &cache, &proj, &mut gw, &mut gb, Some(&mut dx)).unwrap();

            let (wc, bc) = (w.clone(), b.clone());
            assert_close(&dx, &numeric_grad(&mut x, |x| loss(&wc, &bc, x)), "dx");
            let xc = x.clone();
            let nw = numeric_grad(w.as_mut_slice(), |v| loss(&Matrix::from_vec(n, m, v.to_vec()).unwrap(), &bc, &xc));
            assert_close(gw.as_slice(), &nw, "dW");
            let nb = numeric_grad(b.as_mut_slice(), |v| loss(&wc, &Matrix::column(v.to_vec()), &xc));
            assert_close(gb.as_slice(), &nb, "db");
        }
    }

    #[test]
    fn output_layer_cases() {
        let o = Matrix::zeros(4, 3);
        let b = Matrix::zeros(4, 1);
        assert_eq!(output_forward(&o, &b, &[1.0, 2.0, 3.0]).unwrap(), vec![0.25; 4]);

        let mut rng = rng_from_seed(4);
        let mut logits = rand_vec(5, &mut rng);
        let y = softmax(&logits);
        let analytic = output_backward(&y, 2);
        let numeric = numeric_grad(&mut logits, |v| -softmax(v)[2].ln());
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-8);
        }
        let shifted: Vec<f64> = logits.iter().map(|x| x + 3.0).collect();
        assert_eq!(crate::math::argmax(&softmax(&shifted)), crate::math::argmax(&y));
    }

    fn gru_set(n: usize, m: usize, rng: &mut Rng) -> Vec<Matrix> {
        let mut v = Vec::new();
        for _ in 0..3 {
            v.push(rand_matrix(n, n, rng));
            v.push(rand_matrix(n, m, rng));
            v.push(Matrix::column(rand_vec(n, rng)));
        }
        v
    }

    fn params(v: &[Matrix]) -> GruParams<'_> {
        GruParams {
            wz: &v[0],
            uz: &v[1],
            bz: &v[2],
            wr: &v[3],
            ur: &v[4],
            br: &v[5],
            wh: &v[6],
            uh: &v[7],
            bh: &v[8],
        }
    }

    fn grads(v: &mut [Matrix]) -> GruGrads<'_> {
        let [wz, uz, bz, wr, ur, br, wh, uh, bh] = v else { panic!() };
        GruGrads { wz, uz, bz, wr, ur, br, wh, uh, bh }
    }

    #[test]
    fn gru_zero_fixed_point() {
        let v: Vec<Matrix> = (0..9)
            .map(|i| if i % 3 == 2 { Matrix::zeros(3, 1) } else if i % 3 == 0 { Matrix::zeros(3, 3) } else { Matrix::zeros(3, 2) })
            .collect();
        let mut h = vec![0.0; 3];
        for _ in 0..5 {
            let c = gru_forward(&params(&v), &[0.0, 0.0], &h).unwrap();
            assert_eq!(c.z, vec![0.5; 3]);
            assert_eq!(c.r, vec![0.5; 3]);
            assert_eq!(c.candidate, vec![0.0; 3]);
            h = c.h;
        }
        assert_eq!(h, vec![0.0; 3]);
    }

    #[test]
    fn gru_single_unit_hand_arithmetic() {
        // Wz=0.5 Uz=1 bz=0; Wr=-1 Ur=2 br=0.5; Wh=2 Uh=-1 bh=0; x=0.3, h=0.4
        let m = |v: f64| Matrix::from_vec(1, 1, vec![v]).unwrap();
        let v = vec![m(0.5), m(1.0), m(0.0), m(-1.0), m(2.0), m(0.5), m(2.0), m(-1.0), m(0.0)];
        let c = gru_forward(&params(&v), &[0.3], &[0.4]).unwrap();
        let z = 1.0 / (1.0 + (-(0.5 * 0.4 + 0.3f64)).exp());
        let r = 1.0 / (1.0 + (-(-0.4 + 0.6 + 0.5f64)).exp());
        let hh = (2.0 * r * 0.4 - 0.3f64).tanh();
        let h = (1.0 - z) * 0.4 + z * hh;
        assert!((c.z[0] - 0.622_459_331_201_854_6).abs() < 1e-12);
        assert!((c.z[0] - z).abs() < 1e-15);
        assert!((c.r[0] - r).abs() < 1e-15);
        assert!((c.h[0] - h).abs() < 1e-15);
    }

    #[test]
    fn gru_sequence_gradients() {
        let mut rng = rng_from_seed(77);
        let (n, m, steps) = (3, 4, 4);
        for _ in 0..20 {
            let v = gru_set(n, m, &mut rng);
            let mut xs: Vec<f64> = rand_vec(m * steps, &mut rng);
            let proj: Vec<Vec<f64>> = (0..steps).map(|_| rand_vec(n, &mut rng)).collect();
            let loss = |v: &[Matrix], xs: &[f64]| -> f64 {
                let mut h = vec![0.0; n];
                let mut total = 0.0;
                for (t, p) in proj.iter().enumerate() {
                    h = gru_forward(&params(v), &xs[t * m..(t + 1) * m], &h).unwrap().h;
                    total += h.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
                }
                total
            };
            // analytic, full backprop through time
            let mut caches = Vec::new();
            let mut h = vec![0.0; n];
            for t in 0..steps {
                let c = gru_forward(&params(&v), &xs[t * m..(t + 1) * m], &h).unwrap();
                h = c.h.clone();
                caches.push(c);
            }
            let mut g: Vec<Matrix> = v.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            let mut dxs = vec![0.0; m * steps];
            let mut carry = vec![0.0; n];
            for t in (0..steps).rev() {
                let dh: Vec<f64> = proj[t].iter().zip(&carry).map(|(a, b)| a + b).collect();
                let pv = v.clone();
                carry = gru_backward(&params(&pv), &caches[t], &dh, &mut grads(&mut g), &mut dxs[t * m..(t + 1) * m]).unwrap();
            }
            let vc = v.clone();
            assert_close(&dxs, &numeric_grad(&mut xs, |x| loss(&vc, x)), "dx");
            for k in 0..9 {
                let shape = v[k].shape();
                let numeric = numeric_grad(v[k].clone().as_mut_slice(), |vals| {
                    let mut p = vc.clone();
                    p[k] = Matrix::from_vec(shape.0, shape.1, vals.to_vec()).unwrap();
                    loss(&p, &xs)
                });
                assert_close(g[k].as_slice(), &numeric, &format!("gru tensor {k}"));
            }
        }
    }

    #[test]
    fn gru_state_stays_bounded() {
        let mut rng = rng_from_seed(5);
        let v = gru_set(6, 3, &mut rng);
        let mut h = vec![0.0; 6];
        for _ in 0..100 {
            let x = rand_vec(3, &mut rng).iter().map(|x| x * 10.0).collect::<Vec<_>>();
            h = gru_forward(&params(&v), &x, &h).unwrap().h;
            assert!(h.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn char_conv_cases() {
        let mut rng = rng_from_seed(9);
        let table = rand_matrix(6, 3, &mut rng);
        let w = rand_matrix(4, 3, &mut rng);
        let b = Matrix::column(rand_vec(4, &mut rng));
        let (out, _) = char_conv_forward(&[2], &table, &w, &b, 0, 1).unwrap();
        assert_eq!(out, dense_forward(&w, &b, table.row(2)).unwrap());

        let (out, cache) = char_conv_forward(&[2, 4], &table, &w, &b, 0, 1).unwrap();
        let c0 = dense_forward(&w, &b, table.row(2)).unwrap();
        let c1 = dense_forward(&w, &b, table.row(4)).unwrap();
        for j in 0..4 {
            assert_eq!(out[j], c0[j].max(c1[j]));
            assert_eq!(cache.argmax[j], if c1[j] > c0[j] { 1 } else { 0 });
        }
        assert!(char_conv_forward(&[], &table, &w, &b, 0, 1).is_err());

        let wide = rand_matrix(5, 9, &mut rng);
        for len in 1..8 {
            let chars: Vec<usize> = (0..len).map(|i| 2 + i % 4).collect();
            let (out, _) = char_conv_forward(&chars, &table, &wide, &Matrix::zeros(5, 1), 1, 1).unwrap();
            assert_eq!(out.len(), 5);
        }
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let argmax = [2, 0, 2];
        let dout = [0.5, -1.0, 2.0];
        let d = max_pool_backward(&argmax, &dout, 4);
        for j in 0..3 {
            for p in 0..4 {
                assert_eq!(d.get(j, p) != 0.0, p == argmax[j]);
            }
            let row_sum: f64 = d.row(j).iter().sum();
            assert_eq!(row_sum, dout[j]);
        }
    }

    #[test]
    fn char_conv_gradients() {
        let mut rng = rng_from_seed(15);
        for _ in 0..20 {
            let mut table = xavier_init(7, 3, &mut rng).unwrap();
            let d_c = 1;
            let mut w = rand_matrix(4, 3 * (2 * d_c + 1), &mut rng);
            let mut b = Matrix::column(rand_vec(4, &mut rng));
            let chars = [2, 5, 3, 6];
            let proj = rand_vec(4, &mut rng);
            let loss = |table: &Matrix, w: &Matrix, b: &Matrix| -> f64 {
                let (o, _) = char_conv_forward(&chars, table, w, b, d_c, 1).unwrap();
                o.iter().zip(&proj).map(|(a, p)| a * p).sum()
            };
            let (_, cache) = char_conv_forward(&chars, &table, &w, &b, d_c, 1).unwrap();
            let (mut gw, mut gb, mut gt) = (Matrix::zeros(4, 9), Matrix::zeros(4, 1), Matrix::zeros(7, 3));
            let mut touched = Vec::new();
            char_conv_backward(&w, &cache, &proj, &mut gw, &mut gb, &mut gt, &mut touched).unwrap();
            let (tc, wc, bc) = (table.clone(), w.clone(), b.clone());
            let nt = numeric_grad(table.as_mut_slice(), |v| loss(&Matrix::from_vec(7, 3, v.to_vec()).unwrap(), &wc, &bc));
            assert_close(gt.as_slice(), &nt, "dE_ch");
            let nw = numeric_grad(w.as_mut_slice(), |v| loss(&tc, &Matrix::from_vec(4, 9, v.to_vec()).unwrap(), &bc));
            assert_close(gw.as_slice(), &nw, "dW_ch");
            let nb = numeric_grad(b.as_mut_slice(), |v| loss(&tc, &wc, &Matrix::column(v.to_vec())));
            assert_close(gb.as_slice(), &nb, "db_ch");
        }
    }
}
