use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::finite_diff_check;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let eye = tape.constant(Tensor::eye(2));
    assert_eq!(eye.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);
    let z = tape.constant(Tensor::zeros(&[2, 2]));
    assert_eq!(m.matmul(z).unwrap().value().data(), &[0.; 4]);
    let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    assert_eq!(m.matmul(b).unwrap().value().data(), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = a.matmul(b).unwrap_err().to_string();
    assert!(
        msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2,
        "{msg}"
    );
}

#[test]
fn batched_matmul_matches_per_batch() {
    let tape = Tape::new();
    let a = random(&[3, 2, 4], 1);
    let b = random(&[3, 4, 5], 2);
    let out = tape
        .constant(a.clone())
        .matmul(tape.constant(b.clone()))
        .unwrap()
        .value();
    assert_eq!(out.shape(), &[3, 2, 5]);
    for bi in 0..3 {
        let ai = t(&[2, 4], &a.data()[bi * 8..(bi + 1) * 8]);
        let bm = t(&[4, 5], &b.data()[bi * 20..(bi + 1) * 20]);
        let expect = ai.matmul(&bm).unwrap();
        assert_eq!(&out.data()[bi * 10..(bi + 1) * 10], expect.data());
    }
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let y = tape
        .constant(t(&[3], &[0., 0., 0.]))
        .softmax()
        .unwrap()
        .value();
    assert_close(y.data(), &[1. / 3.; 3], 1e-15);
    let y = tape
        .constant(t(&[2], &[1000., 0.]))
        .softmax()
        .unwrap()
        .value();
    assert!((y.data()[0] - 1.0).abs() < 1e-15 && y.data()[1] < 1e-300);
    // mpmath, 40 digits
    let y = tape
        .constant(t(&[3], &[1., 2., 3.]))
        .softmax()
        .unwrap()
        .value();
    assert_close(
        y.data(),
        &[0.09003057317038046, 0.24472847105479765, 0.6652409557748219],
        1e-15,
    );
}

#[test]
fn softmax_rows_normalised_at_large_magnitude() {
    let tape = Tape::new();
    let x = random(&[16, 7], 3).map(|v| v * 1000.0);
    let y = tape.constant(x).softmax().unwrap().value();
    for row in y.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let ones = tape.constant(Tensor::ones(&[3]));
    let zeros = tape.constant(Tensor::zeros(&[3]));
    let y = tape
        .constant(t(&[3], &[1., 1., 1.]))
        .layer_norm(ones, zeros, 1e-6)
        .unwrap();
    assert_eq!(y.value().data(), &[0., 0., 0.]);

    let g2 = tape.constant(Tensor::ones(&[2]));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let y = tape
        .constant(t(&[2], &[0., 2.]))
        .layer_norm(g2, b2, 1e-14)
        .unwrap();
    assert_close(y.value().data(), &[-1., 1.], 1e-12);

    // mpmath, eps = 1e-6
    let gamma = tape.constant(t(&[3], &[2., 2., 2.]));
    let beta = tape.constant(t(&[3], &[1., 1., 1.]));
    let y = tape
        .constant(t(&[3], &[1., 2., 3.]))
        .layer_norm(gamma, beta, 1e-6)
        .unwrap();
    assert_close(
        y.value().data(),
        &[-1.449487905667938, 1.0, 3.449487905667938],
        1e-12,
    );
}

#[test]
fn layer_norm_standardises_rows() {
    let tape = Tape::new();
    let ones = tape.constant(Tensor::ones(&[9]));
    let zeros = tape.constant(Tensor::zeros(&[9]));
    let y = tape
        .constant(random(&[5, 9], 4).map(|v| 3.0 * v + 2.0))
        .layer_norm(ones, zeros, 1e-12)
        .unwrap()
        .value();
    for row in y.data().chunks(9) {
        let mean = row.iter().sum::<f64>() / 9.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn gelu_examples() {
    let tape = Tape::new();
    let y = tape
        .constant(t(&[4], &[0., 1., 40., -40.]))
        .gelu()
        .unwrap()
        .value();
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 0.8413447460685429).abs() < 1e-15);
    assert!((y.data()[2] - 40.0).abs() < 1e-12);
    assert!(y.data()[3].abs() < 1e-12);
}

fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (ci, h, wd) = x.dims3().unwrap();
    let s = w.shape();
    let (co, cpg, kh, kw) = (s[0], s[1], s[2], s[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let opg = co / groups;
    let _ = ci;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for cl in 0..cpg {
                    let c = (o / opg) * cpg + cl;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc +=
                                    w.get(&[o, cl, ky, kx]) * x.get(&[c, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                out.data_mut()[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_examples() {
    let tape = Tape::new();
    let x = random(&[1, 3, 3], 5);
    let id = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = tape.constant(x.clone()).conv2d(id, None, 1, 0, 1).unwrap();
    assert_eq!(y.value().data(), x.data());

    let zero = tape.constant(Tensor::zeros(&[2, 1, 2, 2]));
    let y = tape
        .constant(x.clone())
        .conv2d(zero, None, 1, 0, 1)
        .unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));

    let w = random(&[1, 1, 2, 2], 6);
    let y = tape
        .constant(x.clone())
        .conv2d(tape.constant(w.clone()), None, 1, 0, 1)
        .unwrap();
    assert_eq!(y.shape(), vec![1, 2, 2]);
    assert_close(y.value().data(), conv_oracle(&x, &w, 1, 0, 1).data(), 1e-14);
}

#[test]
fn conv2d_matches_oracle_strided_padded_grouped() {
    let tape = Tape::new();
    for &(ci, co, k, s, p, g, hw) in &[
        (3, 4, 3, 2, 1, 1, 7),
        (4, 4, 3, 1, 1, 4, 5),
        (2, 6, 4, 2, 1, 2, 8),
        (3, 8, 4, 4, 0, 1, 8),
    ] {
        let x = random(&[ci, hw, hw], 7);
        let w = random(&[co, ci / g, k, k], 8);
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), None, s, p, g)
            .unwrap();
        assert_close(y.value().data(), conv_oracle(&x, &w, s, p, g).data(), 1e-13);
    }
}

#[test]
fn conv2d_rejects_nonpositive_output() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[1, 2, 2]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    assert!(matches!(x.conv2d(w, None, 2, 0, 1), Err(Error::Shape(_))));
}

fn upsample_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (c, h, w) = x.dims3().unwrap();
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n_in - 1);
        (lo, (lo + 1).min(n_in - 1), s - lo as f64)
    };
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, oy, ox) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let (y0, y1, fy) = coord(oy, h, oh);
        let (x0, x1, fx) = coord(ox, w, ow);
        let p = |y, xx| x.get(&[ch, y, xx]);
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
            + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
    })
}

#[test]
fn upsample_examples() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::full(&[2, 3, 5], 5.0_f64));
    let y = c.upsample_bilinear(12, 17).unwrap().value();
    assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-14));

    let x = random(&[2, 3, 4], 9);
    let y = tape.constant(x.clone()).upsample_bilinear(3, 4).unwrap();
    assert_eq!(y.value().data(), x.data());

    let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
    let y = tape
        .constant(x.clone())
        .upsample_bilinear(4, 4)
        .unwrap()
        .value();
    assert_close(y.data(), upsample_oracle(&x, 4, 4).data(), 1e-15);
    assert_close(
        y.data(),
        &[
            1., 1.25, 1.75, 2., 1.5, 1.75, 2.25, 2.5, 2.5, 2.75, 3.25, 3.5, 3., 3.25, 3.75, 4.,
        ],
        1e-15,
    );
    let x = random(&[3, 2, 3], 10);
    let y = tape
        .constant(x.clone())
        .upsample_bilinear(16, 24)
        .unwrap()
        .value();
    assert_close(y.data(), upsample_oracle(&x, 16, 24).data(), 1e-14);
}

#[test]
fn backward_identity_and_square() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    assert_eq!(x.backward().unwrap().wrt(x).unwrap().data(), &[1.0]);

    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1., 2., 3.]));
    let y = x.mul(x).unwrap().sum().unwrap();
    let g = y.backward().unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2., 4., 6.]);
}

#[test]
fn backward_root_of_itself_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = x.scale(3.0).unwrap();
    // the root's own gradient is the implicit seed; leaves receive dy/dx
    assert_eq!(y.backward().unwrap().wrt(x).unwrap().data(), &[3.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::zeros(&[2]));
    assert!(matches!(x.backward(), Err(Error::Contract(_))));
}

#[test]
fn fan_out_gradients_accumulate() {
    // y = sum(x * exp-free branch) : y = sum(2x) + sum(x∘x) → dy/dx = 2 + 2x
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[0.5, -1., 2.]));
    let a = x.scale(2.0).unwrap();
    let b = x.mul(x).unwrap();
    let y = a.add(b).unwrap().sum().unwrap();
    let g = y.backward().unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[3., 0., 6.]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2], 1e308));
    assert!(matches!(x.scale(10.0), Err(Error::NonFinite { .. })));
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(t(&[2], &[1., 2.]));
    let x = tape.leaf(t(&[2], &[3., 4.]));
    let y = c.mul(x).unwrap().sum().unwrap();
    let g = y.backward().unwrap();
    assert!(g.wrt(c).is_none());
    assert_eq!(g.wrt(x).unwrap().data(), &[1., 2.]);
}

const H: f64 = 1e-5;

fn check(f: impl for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>, x: &Tensor<f64>) {
    let err = finite_diff_check(f, x, H).unwrap();
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn fd_sum_is_exact() {
    let err = finite_diff_check(|x| x.sum(), &random(&[10], 11), H).unwrap();
    assert!(err < 1e-10);
}

#[test]
fn fd_softmax_cross_entropy() {
    let mut target = Tensor::zeros(&[4, 5]);
    for r in 0..4 {
        target.data_mut()[r * 5 + (r * 2) % 5] = 1.0;
    }
    check(
        move |x| {
            let tg = x.tape().constant(target.clone());
            x.log_softmax()?.mul(tg)?.sum()?.neg()
        },
        &random(&[4, 5], 12).map(|v| 3.0 * v),
    );
}

#[test]
fn fd_elementwise_ops() {
    let w = random(&[6], 13);
    check(
        move |x| {
            let c = x.tape().constant(w.clone());
            let a = x.gelu()?.mul(c)?;
            let b = x.softplus()?.sub(x.scale(0.3)?)?;
            let l = x.add_scalar(0.1)?.leaky_relu(0.2)?;
            a.add(b)?.add(l)?.mul(x)?.sum()
        },
        &random(&[6], 14),
    );
}

#[test]
fn fd_matmul_transpose_bias() {
    let b = random(&[4, 3], 15);
    let bias = random(&[3], 16);
    check(
        move |x| {
            let tape = x.tape();
            let y = x
                .matmul(tape.leaf(b.clone()))?
                .add_bias(tape.leaf(bias.clone()))?;
            let z = y.matmul(y.transpose()?)?;
            z.mul(z)?.mean()
        },
        &random(&[5, 4], 17),
    );
}

#[test]
fn fd_batched_matmul_shared_rhs() {
    let b = random(&[3, 2], 18);
    check(
        move |x| {
            let y = x.matmul(x.tape().constant(b.clone()))?;
            y.softmax()?.mul(y)?.sum()
        },
        &random(&[2, 4, 3], 19),
    );
}

#[test]
fn fd_layer_norm_all_inputs() {
    // gradient w.r.t. x
    let g = random(&[6], 20).map(|v| v + 1.5);
    let b = random(&[6], 21);
    let (g1, b1) = (g.clone(), b.clone());
    check(
        move |x| {
            let tape = x.tape();
            let y = x.layer_norm(tape.constant(g1.clone()), tape.constant(b1.clone()), 1e-6)?;
            y.mul(y)?.add(y)?.sum()
        },
        &random(&[3, 6], 22),
    );
    // gradient w.r.t. gamma
    let xs = random(&[3, 6], 23);
    check(
        move |gamma| {
            let tape = gamma.tape();
            let y = tape
                .constant(xs.clone())
                .layer_norm(gamma, tape.constant(b.clone()), 1e-6)?;
            y.mul(y)?.sum()
        },
        &g,
    );
}

#[test]
fn fd_conv_and_upsample() {
    let w = random(&[4, 2, 3, 3], 24);
    check(
        move |x| {
            let tape = x.tape();
            let y = x.conv2d(tape.constant(w.clone()), None, 2, 1, 1)?;
            let u = y.upsample_bilinear(5, 7)?;
            u.mul(u)?.sum()
        },
        &random(&[2, 5, 6], 25),
    );
    let x = random(&[2, 5, 6], 26);
    check(
        move |w| {
            let tape = w.tape();
            let bias = tape.constant(Tensor::from_f64(&[2], &[0.1, -0.2]).unwrap());
            let y = tape.constant(x.clone()).conv2d(w, Some(bias), 1, 1, 2)?;
            y.mul(y)?.sum()
        },
        &random(&[2, 1, 3, 3], 27),
    );
}

#[test]
fn fd_concat_narrow_reshape() {
    check(
        |x| {
            let a = x.narrow_last(1, 2)?;
            let b = x.narrow_last(0, 3)?;
            let c = Var::concat_last(&[a, b, x])?;
            let r = c.reshape(&[c.value().len()])?;
            r.mul(r)?.sum()
        },
        &random(&[4, 3], 28),
    );
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let tape = Tape::new();
        let x = tape.constant(random(&[3, 8, 8], 29));
        let w = tape.constant(random(&[4, 3, 3, 3], 30));
        let y = x
            .conv2d(w, None, 1, 1, 1)
            .unwrap()
            .gelu()
            .unwrap()
            .softmax()
            .unwrap();
        Tensor::clone(&y.value())
    };
    let (a, b) = (run(), run());
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn injected_fault_breaks_gelu_gradient() {
    let x = random(&[5], 31);
    set_backward_fault(true);
    let err = finite_diff_check(|v| v.gelu()?.sum(), &x, H).unwrap();
    set_backward_fault(false);
    assert!(err > 1e-3);
}

#[test]
fn generic_over_f32() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::<f32>::from_f64(&[3], &[1., 2., 3.]).unwrap());
    let y = x.softmax().unwrap().mul(x).unwrap().sum().unwrap();
    let g = y.backward().unwrap();
    assert_eq!(g.wrt(x).unwrap().shape(), &[3]);
}
