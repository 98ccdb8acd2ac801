mod common;

use common::*;
use ftn_core::kernels;
use ftn_core::{Error, Graph, Tensor, Var};

/// `Σ out ⊙ P` for a fixed random `P`, turning any tensor into a scalar with
/// a generic gradient.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let p = g.constant(randt(g.value(out).shape(), seed));
    let m = g.mul(out, p).unwrap();
    g.sum(m)
}

const FD_TOL: f64 = 1e-4;

#[test]
fn conv_identity_and_zero_kernels() {
    let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
    let w = Tensor::<f64>::ones(&[1, 1, 1, 1]);
    assert_eq!(kernels::conv2d(&x, &w, 1, 0).unwrap(), x);
    let x = randt(&[2, 3, 5, 5], 1);
    let z = kernels::conv2d(&x, &Tensor::zeros(&[4, 3, 3, 3]), 1, 1).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_loop_oracle() {
    let x = randt(&[1, 2, 5, 5], 2);
    let w = randt(&[3, 2, 3, 3], 3);
    let got = kernels::conv2d(&x, &w, 1, 1).unwrap();
    assert!(max_diff(&got, &conv_oracle(&x, &w, 1, 1)) <= 1e-12);
}

#[test]
fn conv_matches_loop_oracle_over_small_shapes() {
    let mut seed = 10;
    for n in [1, 2] {
        for c_in in [1, 3] {
            for c_out in [1, 4] {
                for h in [3, 4, 7, 8] {
                    for k in [1, 2, 3] {
                        for stride in [1, 2] {
                            for pad in [0, 1] {
                                if (h + 2 * pad) < k || (h + 2 * pad - k) % stride != 0 {
                                    continue;
                                }
                                seed += 1;
                                let x = randt(&[n, c_in, h, h], seed);
                                let w = randt(&[c_out, c_in, k, k], seed + 1000);
                                let got = kernels::conv2d(&x, &w, stride, pad).unwrap();
                                let want = conv_oracle(&x, &w, stride, pad);
                                assert!(max_diff(&got, &want) <= 1e-12, "n{n} c{c_in}->{c_out} h{h} k{k} s{stride} p{pad}");
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn conv_is_linear_in_weight() {
    let x = randt(&[2, 3, 6, 6], 4);
    let (w1, w2) = (randt(&[4, 3, 3, 3], 5), randt(&[4, 3, 3, 3], 6));
    let (a, b) = (0.7, -1.3);
    let mix = w1.scale(a).add(&w2.scale(b)).unwrap();
    let lhs = kernels::conv2d(&x, &mix, 1, 1).unwrap();
    let rhs = kernels::conv2d(&x, &w1, 1, 1)
        .unwrap()
        .scale(a)
        .add(&kernels::conv2d(&x, &w2, 1, 1).unwrap().scale(b))
        .unwrap();
    assert!(max_diff(&lhs, &rhs) <= 1e-10);
}

#[test]
fn conv_rejects_bad_shapes() {
    let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]);
    let err = kernels::conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), 1, 1).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
    assert!(err.to_string().contains("C_in"), "{err}");
    // (5 + 0 - 2) / 2 is not an integer
    assert!(kernels::conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), 2, 0).is_err());
    assert!(kernels::conv2d(&x, &Tensor::zeros(&[1, 2, 3, 2]), 1, 0).is_err());
}

#[test]
fn matmul_cases() {
    let b = randt(&[3, 2], 7);
    assert_eq!(kernels::matmul(&Tensor::eye(3), &b).unwrap(), b);
    let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let one = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
    assert_eq!(kernels::matmul(&a, &one).unwrap().data(), &[3.0, 7.0]);
    let (a, b) = (randt(&[4, 5], 8), randt(&[5, 6], 9));
    assert!(max_diff(&kernels::matmul(&a, &b).unwrap(), &matmul_oracle(&a, &b)) <= 1e-12);
    assert!(kernels::matmul(&a, &a).is_err());
    for m in 1..=8 {
        for k in [1, 3, 8] {
            for n in [1, 5, 8] {
                let (a, b) = (randt(&[m, k], m as u64), randt(&[k, n], 100 + n as u64));
                assert!(max_diff(&kernels::matmul(&a, &b).unwrap(), &matmul_oracle(&a, &b)) <= 1e-12);
            }
        }
    }
}

#[test]
fn softmax_cases() {
    let s = kernels::softmax(&Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(), 0).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s: Tensor<f64> = kernels::softmax(&Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap(), 0).unwrap();
    assert!(s.all_finite());
    assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
    let x = randt(&[7], 11);
    let tot: f64 = x.data().iter().map(|v| v.exp()).sum();
    let want = x.map(|v| v.exp() / tot);
    assert!(max_diff(&kernels::softmax(&x, 0).unwrap(), &want) <= 1e-12);
    assert!(kernels::softmax(&x, 1).is_err());
    let m = randt(&[3, 4], 12);
    let rows = kernels::softmax(&m, 1).unwrap();
    for r in rows.data().chunks(4) {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let w = g.param(randt(&[3, 4], 13));
    let s = g.sum(w);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(w).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn least_squares_gradient_is_analytic() {
    let x = randt(&[6, 3], 14);
    let y = randt(&[6, 1], 15);
    let w0 = randt(&[3, 1], 16);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let w = g.param(w0.clone());
    let p = g.matmul(xv, w).unwrap();
    let r = g.sub(p, yv).unwrap();
    let sq = g.square(r);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    // 2 Xᵀ (X w − y)
    let resid = matmul_oracle(&x, &w0).sub(&y).unwrap();
    let xt = kernels::permute(&x, &[1, 0]).unwrap();
    let want = matmul_oracle(&xt, &resid).scale(2.0);
    assert!(max_diff(grads.get(w).unwrap(), &want) <= 1e-10);
    assert!(grads.get(xv).is_none(), "constants must not receive gradients");
}

#[test]
fn non_scalar_root_rejected() {
    let mut g = Graph::new();
    let w = g.param(randt(&[2, 2], 17));
    assert!(matches!(g.backward(w), Err(Error::NonScalarRoot(_))));
}

#[test]
fn elementwise_gradients_match_fd() {
    let ps = [randt(&[3, 4], 20), randt(&[3, 4], 21), randt(&[4], 22)];
    let (e, _) = gradcheck(&ps, 20, 1, |g, v| {
        let a = g.add(v[0], v[1]).unwrap();
        let b = g.sub(a, v[1]).unwrap();
        let c = g.mul(b, v[1]).unwrap();
        let d = g.scale(c, 1.7);
        let r = g.relu(d);
        let s = g.square(r);
        let t = g.add_row_bias(s, v[2]).unwrap();
        let u = g.add(t, c).unwrap();
        probe(g, u, 30)
    });
    assert!(e <= FD_TOL, "{e}");
}

#[test]
fn structural_gradients_match_fd() {
    let ps = [randt(&[2, 3, 4], 23), randt(&[2, 3, 2], 24)];
    let (e, _) = gradcheck(&ps, 24, 2, |g, v| {
        let p = g.permute(v[0], &[2, 0, 1]).unwrap();
        let r = g.reshape(p, &[4, 2, 3]).unwrap();
        let n = g.narrow(r, 0, 1, 2).unwrap();
        let q = g.permute(v[1], &[2, 0, 1]).unwrap();
        let c = g.concat(&[n, q], 0).unwrap();
        let m = g.mean_axis(c, 1).unwrap();
        let s = probe(g, m, 31);
        let mean = g.mean(v[0]);
        g.add(s, mean).unwrap()
    });
    assert!(e <= FD_TOL, "{e}");
}

#[test]
fn matmul_softmax_gradients_match_fd() {
    let ps = [randt(&[3, 5], 25), randt(&[5, 4], 26)];
    let (e, _) = gradcheck(&ps, 20, 3, |g, v| {
        let m = g.matmul(v[0], v[1]).unwrap();
        let s = g.softmax(m, 1).unwrap();
        let t = g.transpose(s).unwrap();
        let s0 = g.softmax(t, 0).unwrap();
        probe(g, s0, 32)
    });
    assert!(e <= FD_TOL, "{e}");
}

#[test]
fn conv_gradients_match_fd() {
    for (stride, pad, k, h) in [(1, 1, 3, 5), (2, 1, 4, 6), (2, 0, 3, 7), (1, 0, 1, 4)] {
        let ps = [randt(&[2, 3, h, h], 27), randt(&[4, 3, k, k], 28)];
        let (e, n) = gradcheck(&ps, 30, 4, |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad).unwrap();
            probe(g, y, 33)
        });
        assert!(e <= FD_TOL, "s{stride} p{pad} k{k}: {e}");
        assert!(n >= 42);
    }
}

#[test]
fn cp_reconstruct_gradients_match_fd() {
    let ps = [randt(&[3, 4], 34), randt(&[3, 5], 35), randt(&[3, 6], 36)];
    let (e, n) = gradcheck(&ps, 100, 5, |g, v| {
        let t = g.cp_reconstruct([v[0], v[1], v[2]], 0.8).unwrap();
        probe(g, t, 37)
    });
    assert!(e <= FD_TOL, "{e}");
    assert_eq!(n, 12 + 15 + 18);
}

#[test]
fn batch_norm_gradients_match_fd() {
    let ps = [randt(&[3, 2, 3, 3], 38), randt(&[2], 39), randt(&[2], 40)];
    let (e, _) = gradcheck(&ps, 60, 6, |g, v| {
        let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
        probe(g, y, 41)
    });
    assert!(e <= FD_TOL, "train: {e}");
    let (e, _) = gradcheck(&ps, 60, 7, |g, v| {
        let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5).unwrap();
        probe(g, y, 42)
    });
    assert!(e <= FD_TOL, "eval: {e}");
}

#[test]
fn cross_entropy_gradients_match_fd() {
    let ps = [randt(&[5, 4], 43)];
    let (e, _) = gradcheck(&ps, 20, 8, |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1, 1, 2]).unwrap());
    assert!(e <= FD_TOL, "{e}");
}

#[test]
fn composite_graph_gradients_match_fd() {
    let ps = [randt(&[2, 2, 6, 6], 44), randt(&[3, 2, 3, 3], 45), randt(&[3], 46), randt(&[3], 47), randt(&[3, 4], 48), randt(&[4], 49)];
    let (e, n) = gradcheck(&ps, 25, 9, |g, v| {
        let c = g.conv2d(v[0], v[1], 1, 1).unwrap();
        let (b, _) = g.batch_norm_train(c, v[2], v[3], 1e-5).unwrap();
        let r = g.relu(b);
        let f = g.reshape(r, &[2, 3, 36]).unwrap();
        let m = g.mean_axis(f, 2).unwrap();
        let m = g.reshape(m, &[2, 3]).unwrap();
        let z = g.matmul(m, v[4]).unwrap();
        let z = g.add_row_bias(z, v[5]).unwrap();
        g.softmax_cross_entropy(z, &[1, 3]).unwrap()
    });
    assert!(e <= FD_TOL, "{e}");
    assert_eq!(n, 25 + 25 + 3 + 3 + 12 + 4);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(randt(&[2, 3, 6, 6], 50));
        let w = g.param(randt(&[4, 3, 3, 3], 51));
        let c = g.conv2d(x, w, 1, 1).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let l = probe(&mut g, s, 52);
        let grads = g.backward(l).unwrap();
        (g.value(l).clone(), grads.get(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bit_eq(&b) && ga.bit_eq(&gb));
}

#[test]
fn tensors_do_not_alias() {
    let a = randt(&[3], 53);
    let mut b = a.clone();
    b.data_mut()[0] = 99.0;
    assert_ne!(a.data()[0], 99.0);
    assert!(Tensor::<f64>::from_vec(&[2, 0], vec![]).is_err());
    assert!(Tensor::<f64>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn relu_propagates_nan() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(&[3], vec![-1.0, f64::NAN, 2.0]).unwrap());
    let y = g.relu(x);
    let v = g.value(y).data().to_vec();
    assert_eq!(v[0], 0.0);
    assert!(v[1].is_nan());
    assert_eq!(v[2], 2.0);
}
