use ndgrad::gradcheck::{check_gradients, relative_error};
use ndgrad::{CellRegion, Graph, NdError, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| v.abs() + 0.5)
}

fn assert_gradcheck<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&Graph, &[Var]) -> ndgrad::Result<Var>,
{
    let report = check_gradients(inputs, f).unwrap();
    assert!(
        report.passes(TOL),
        "{name}: max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn relu_at_negative_input() {
    let g = Graph::new();
    let x = g.param(Tensor::scalar(-1.0));
    let y = g.relu(x);
    assert_eq!(g.value(y).item(), 0.0);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 0.0);
}


#[test]
fn nan_propagates_through_relu_and_pooling() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_slice(&[1, 2, 2], &[1.0, f64::NAN, -3.0, 2.0]).unwrap());
    let r = g.value(g.relu(x));
    assert!(r.data()[1].is_nan());
    assert_eq!(r.data()[2], 0.0);
    assert!(g.value(g.maxpool2d(x, 2, 2).unwrap()).item().is_nan());
    let whole = CellRegion { y0: 0, y1: 2, x0: 0, x1: 2 };
    assert!(g.value(g.roi_max_pool(x, &[whole], 1).unwrap()).data()[0].is_nan());
}
#[test]
fn identity_kernel_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 5, 4]);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w);
    let y = g.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(*g.value(y), x);
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 2, 5, 6]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let b = random(&mut rng, &[3]);
    let (stride, pad) = (2, 1);
    let g = Graph::new();
    let y = g
        .conv2d(g.constant(x.clone()), g.constant(w.clone()), Some(g.constant(b.clone())), stride, pad)
        .unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), &[2, 3, 3, 3]);
    let xd = |n: usize, c: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= 5 || j >= 6 {
            0.0
        } else {
            x.data()[((n * 2 + c) * 5 + i as usize) * 6 + j as usize]
        }
    };
    for n in 0..2 {
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                acc += w.data()[((o * 2 + c) * 3 + ky) * 3 + kx] * xd(n, c, iy, ix);
                            }
                        }
                    }
                    let got = y.data()[((n * 3 + o) * 3 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn softmax_closed_forms() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_slice(&[2], &[2.0, 0.0]).unwrap());
    let p1 = g.value(g.softmax_with_temperature(x, 1.0).unwrap());
    let e2 = 2f64.exp();
    assert!((p1.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
    assert!((p1.data()[0] - 0.8808).abs() < 1e-4);
    assert!((p1.data()[1] - 0.1192).abs() < 1e-4);
    let p2 = g.value(g.softmax_with_temperature(x, 2.0).unwrap());
    let e = 1f64.exp();
    assert!((p2.data()[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((p2.data()[0] - 0.7311).abs() < 1e-4);
    assert!((p2.data()[1] - 0.2689).abs() < 1e-4);

    let same = g.constant(Tensor::full(&[2, 5], 3.3));
    let u = g.value(g.softmax_with_temperature(same, 0.7).unwrap());
    assert!(u.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn softmax_rejects_non_positive_temperature() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3]));
    for tau in [0.0, -1.0, f64::NAN] {
        assert!(matches!(
            g.softmax_with_temperature(x, tau),
            Err(NdError::InvalidArgument { .. })
        ));
    }
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    assert!(g.matmul(a, a).is_err());
    let w = g.constant(Tensor::zeros(&[4, 5, 3, 3]));
    let x = g.constant(Tensor::zeros(&[3, 8, 8]));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(err.to_string().contains("[3, 8, 8]"));
}

#[test]
fn backward_populates_all_reachable_params() {
    let g = Graph::new();
    let a = g.param(Tensor::from_slice(&[2], &[-1.0, -2.0]).unwrap());
    let b = g.param(Tensor::from_slice(&[2], &[0.5, 0.5]).unwrap());
    let unused = g.param(Tensor::scalar(1.0));
    // relu kills every path from `a`, but it is still reachable
    let y = g.sum(g.add(g.relu(a), b).unwrap());
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(y).unwrap().item(), 1.0);
    assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    assert!(grads.get(unused).is_none());
}

#[test]
fn maxpool_and_roi_pool_values() {
    let g = Graph::new();
    let x = g.constant(
        Tensor::from_slice(
            &[1, 4, 4],
            &[
                1.0, 5.0, 2.0, 0.0, //
                3.0, 4.0, 7.0, 1.0, //
                0.0, 2.0, 9.0, 8.0, //
                6.0, 1.0, 3.0, 4.0,
            ],
        )
        .unwrap(),
    );
    let p = g.value(g.maxpool2d(x, 2, 2).unwrap());
    assert_eq!(p.shape(), &[1, 2, 2]);
    assert_eq!(p.data(), &[5.0, 7.0, 6.0, 9.0]);

    let whole = CellRegion { y0: 0, y1: 4, x0: 0, x1: 4 };
    let r = g.value(g.roi_max_pool(x, &[whole], 2).unwrap());
    assert_eq!(r.shape(), &[1, 1, 2, 2]);
    assert_eq!(r.data(), &[5.0, 7.0, 6.0, 9.0]);

    let identity = g.value(g.roi_max_pool(x, &[whole], 4).unwrap());
    assert_eq!(identity.data(), g.value(x).data());
}

#[test]
fn determinism_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[2, 6, 6]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let g = Graph::new();
        let wv = g.param(w);
        let y = g.conv2d(g.constant(x), wv, None, 1, 1).unwrap();
        let z = g.sum(g.smooth_l1(g.relu(y)));
        let grads = g.backward(z).unwrap();
        (g.value(z).item().to_bits(), grads.get(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn gradcheck_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = rng.random_range(3..=5);
        let a = random(&mut rng, &[n]);
        let b = random(&mut rng, &[n]);
        let p = positive(&mut rng, &[n]);
        assert_gradcheck("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        assert_gradcheck("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
        assert_gradcheck("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
        assert_gradcheck("div", &[a.clone(), p.clone()], |g, v| g.div(v[0], v[1]));
        assert_gradcheck("scale", std::slice::from_ref(&a), |g, v| Ok(g.scale(v[0], -1.7)));
        assert_gradcheck("relu", std::slice::from_ref(&a), |g, v| Ok(g.relu(v[0])));
        assert_gradcheck("exp", std::slice::from_ref(&a), |g, v| Ok(g.exp(v[0])));
        assert_gradcheck("log", std::slice::from_ref(&p), |g, v| Ok(g.log(v[0])));
        assert_gradcheck("smooth_l1", &[a.map(|x| 3.0 * x)], |g, v| Ok(g.smooth_l1(v[0])));
        assert_gradcheck("sum", &[a.clone(), b.clone()], |g, v| {
            let m = g.mul(v[0], v[1])?;
            Ok(g.sum(m))
        });
        assert_gradcheck("mean", &[a.clone(), b.clone()], |g, v| {
            let m = g.mul(v[0], v[1])?;
            Ok(g.mean(m))
        });
        assert_gradcheck("l2_norm", std::slice::from_ref(&a), |g, v| Ok(g.l2_norm(v[0])));
    }
}

#[test]
fn gradcheck_structural() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = random(&mut rng, &[2, 3]);
        let b = random(&mut rng, &[3, 2]);
        let c = random(&mut rng, &[2, 3]);
        let bias = random(&mut rng, &[3]);
        // weight the output so the upstream gradient is not all ones
        let wout = random(&mut rng, &[2, 2]);
        assert_gradcheck("matmul", &[a.clone(), b.clone(), wout.clone()], |g, v| {
            let m = g.matmul(v[0], v[1])?;
            g.mul(m, v[2])
        });
        assert_gradcheck("add_bias", &[a.clone(), bias.clone(), c.clone()], |g, v| {
            let s = g.add_bias(v[0], v[1])?;
            g.mul(s, v[2])
        });
        assert_gradcheck("reshape", &[a.clone(), b.clone()], |g, v| {
            let r = g.reshape(v[0], &[3, 2])?;
            g.mul(r, v[1])
        });
        assert_gradcheck("slice", std::slice::from_ref(&a), |g, v| {
            let s = g.slice(v[0], 1, 1, 3)?;
            let e = g.exp(s);
            Ok(g.sum(e))
        });
        assert_gradcheck("concat", &[a.clone(), c.clone()], |g, v| {
            let cat = g.concat(&[v[0], v[1]], 1)?;
            let sq = g.mul(cat, cat)?;
            let w = g.exp(cat);
            g.mul(sq, w)
        });
        assert_gradcheck("gather", std::slice::from_ref(&a), |g, v| {
            let picked = g.gather(v[0], vec![5, 0, 0, 3], &[2, 2])?;
            let e = g.exp(picked);
            Ok(g.sum(e))
        });
        for tau in [1.0, 2.0, 0.5] {
            assert_gradcheck("softmax", &[a.clone(), c.clone()], |g, v| {
                let s = g.softmax_with_temperature(v[0], tau)?;
                g.mul(s, v[1])
            });
            assert_gradcheck("log_softmax", &[a.clone(), c.clone()], |g, v| {
                let s = g.log_softmax_with_temperature(v[0], tau)?;
                g.mul(s, v[1])
            });
        }
    }
}

#[test]
fn gradcheck_conv_and_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..20 {
        let x = random(&mut rng, &[2, 4, 4]);
        let w = random(&mut rng, &[2, 2, 3, 3]);
        let b = random(&mut rng, &[2]);
        let stride = 1 + i % 2;
        let outw = random(&mut rng, &[2, 4, 4]);
        assert_gradcheck("conv2d", &[x.clone(), w.clone(), b.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
            let e = g.exp(y);
            Ok(g.sum(e))
        });
        let xb = random(&mut rng, &[2, 2, 3, 3]);
        assert_gradcheck("conv2d_batched", &[xb, w.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 0)?;
            let e = g.exp(y);
            Ok(g.sum(e))
        });
        assert_gradcheck("maxpool2d", &[x.clone(), outw.clone()], |g, v| {
            let p = g.maxpool2d(v[0], 2, 2)?;
            let w = g.slice(v[1], 1, 0, 2)?;
            let w = g.slice(w, 2, 0, 2)?;
            g.mul(p, w)
        });
        let regions = [
            CellRegion { y0: 0, y1: 4, x0: 0, x1: 4 },
            CellRegion { y0: 1, y1: 3, x0: 0, x1: 3 },
            CellRegion { y0: 2, y1: 3, x0: 3, x1: 4 },
        ];
        assert_gradcheck("roi_max_pool", std::slice::from_ref(&x), |g, v| {
            let p = g.roi_max_pool(v[0], &regions, 2)?;
            let e = g.exp(p);
            Ok(g.sum(e))
        });
    }
}

#[test]
fn relative_error_definition() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!((relative_error(0.0, 1e-9) - 1e-6).abs() < 1e-18);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 4), 1..6),
        tau in 0.1f64..10.0,
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![n, 4], flat).unwrap());
        let p = g.value(g.softmax_with_temperature(x, tau).unwrap());
        for row in p.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn slice_concat_round_trip(data in prop::collection::vec(-10.0f64..10.0, 12), cut in 1usize..4) {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let left = g.slice(x, 1, 0, cut).unwrap();
        let right = g.slice(x, 1, cut, 4).unwrap();
        let joined = g.concat(&[left, right], 1).unwrap();
        prop_assert_eq!(&*g.value(joined), &*g.value(x));
    }
}
