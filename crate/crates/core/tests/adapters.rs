mod common;

use common::*;
use ftn_core::adapters::{self, conv_weight_as_cube, delta_as_weight, init_attn_adapter, init_conv_adapter, CpVars};
use ftn_core::{CpAdapter, Graph, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn random_adapter(dims: [usize; 3], rank: usize, scale: f64, seed: u64) -> CpAdapter<f64> {
    let f = [0, 1, 2].map(|m| randt(&[rank, dims[m]], seed + m as u64));
    CpAdapter::new(f, scale).unwrap()
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

#[test]
fn basis_outer_product() {
    let a = CpAdapter::from_vectors([vec![unit(3, 2)], vec![unit(2, 1)], vec![unit(4, 3)]], 1.0).unwrap();
    let t = a.reconstruct();
    assert_eq!(t.shape(), &[3, 2, 4]);
    for i in 0..3 {
        for j in 0..2 {
            for l in 0..4 {
                let want = if (i, j, l) == (2, 1, 3) { 1.0 } else { 0.0 };
                assert_eq!(t.get(&[i, j, l]).unwrap(), want);
            }
        }
    }
}

#[test]
fn superposition_of_ones() {
    let ones = |n| vec![vec![1.0; n]; 2];
    let a = CpAdapter::from_vectors([ones(2), ones(3), ones(4)], 1.0).unwrap();
    assert!(a.reconstruct().data().iter().all(|&v| v == 2.0));
}

#[test]
fn reconstruct_matches_loop_oracle() {
    let a = random_adapter([4, 5, 6], 3, 1.7, 1);
    let f = a.factor_matrices();
    let want = cp_oracle(&f[0], &f[1], &f[2], 1.7);
    assert!(max_diff(&a.reconstruct(), &want) <= 1e-12);
}

#[test]
fn inconsistent_factors_rejected() {
    let bad = CpAdapter::from_vectors([vec![vec![1.0; 2], vec![1.0; 3]], vec![vec![1.0; 2]; 2], vec![vec![1.0; 2]; 2]], 1.0);
    assert!(bad.is_err());
    let bad = CpAdapter::new([randt(&[2, 3], 1), randt(&[3, 3], 2), randt(&[2, 3], 3)], 1.0);
    assert!(bad.is_err());
}

#[test]
fn conv_init_is_deterministic_and_bounded() {
    let a = init_conv_adapter::<f64>([9, 64, 64], 1, 5).unwrap();
    let b = init_conv_adapter::<f64>([9, 64, 64], 1, 5).unwrap();
    for m in 0..3 {
        assert!(a.factor_matrices()[m].bit_eq(&b.factor_matrices()[m]));
    }
    assert_eq!(a.scale(), 1.0);
    for (m, &n) in [9usize, 64, 64].iter().enumerate() {
        let bound = (6.0 / n as f64).sqrt();
        assert!(a.factor_matrices()[m].data().iter().all(|v| v.abs() < bound));
    }
    assert!(init_conv_adapter::<f64>([9, 4, 4], 0, 1).is_err());
    assert!(init_conv_adapter::<f64>([0, 4, 4], 1, 1).is_err());
}

#[test]
fn conv_init_mean_is_zero_over_seeds() {
    // Each entry is a sum of R products of independent zero-mean uniforms,
    // so σ² = R·Π_m (a_m²/3) = R·Π_m (2/n_m). The sum over one adapter has
    // variance R·8 = σ²·(entries), so the usual σ/√samples bound is exact
    // despite the shared factors.
    let (dims, rank, seeds) = ([9usize, 16, 16], 4usize, 1000u64);
    let per = dims.iter().product::<usize>();
    let sum: f64 = (0..seeds).map(|s| init_conv_adapter::<f64>(dims, rank, s).unwrap().reconstruct().sum()).sum();
    let samples = (per as u64 * seeds) as f64;
    let mean = sum / samples;
    let sigma = (rank as f64 * dims.iter().map(|&n| 2.0 / n as f64).product::<f64>()).sqrt();
    assert!(mean.abs() < 3.0 * sigma / samples.sqrt(), "mean {mean}, sigma {sigma}");
}

#[test]
fn conv_delta_is_small_next_to_backbone_weight() {
    let (co, ci, k) = (64, 64, 3);
    let adapter = init_conv_adapter::<f64>([k * k, ci, co], 1, 3).unwrap();
    let mut r = rng(4);
    let std = (2.0 / (ci * k * k) as f64).sqrt();
    let w = Tensor::rand_normal(&[co, ci, k, k], 0.0, std, &mut r);
    assert!(adapter.reconstruct().frobenius_norm() < 0.5 * w.frobenius_norm());
}

#[test]
fn attn_init_statistics() {
    let a = init_attn_adapter::<f64>([768, 64, 12], 4, 100.0, 9).unwrap();
    assert_eq!(a.scale(), 25.0);
    assert_eq!(adapters::ALPHA_QUERY_VALUE, 10.0);
    assert_eq!(adapters::ALPHA_OUTPUT, 100.0);
    let mut entries: Vec<f64> = Vec::new();
    let mut seed = 0;
    while entries.len() < 100_000 {
        let a = init_attn_adapter::<f64>([768, 64, 12], 4, 100.0, seed).unwrap();
        for f in a.factor_matrices() {
            entries.extend_from_slice(f.data());
        }
        seed += 1;
    }
    entries.truncate(100_000);
    let n = entries.len() as f64;
    let mean = entries.iter().sum::<f64>() / n;
    let sd = (entries.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd - 0.05).abs() <= 0.05 * 0.05, "sd {sd}");
    assert!(init_attn_adapter::<f64>([4, 2, 2], 0, 1.0, 0).is_err());
    assert!(init_attn_adapter::<f64>([4, 2, 2], 1, 0.0, 0).is_err());
    assert!(init_attn_adapter::<f64>([4, 2, 2], 1, -1.0, 0).is_err());
}

#[test]
fn apply_cases() {
    let base = randt(&[5, 3, 3, 3], 10);
    let zero = CpAdapter::<f64>::zeros([9, 3, 5], 2, 1.0).unwrap();
    assert!(zero.apply(&base).unwrap().bit_eq(&base));

    let a = random_adapter([9, 3, 5], 2, 1.0, 11);
    let from_zero = a.apply(&Tensor::zeros(&[5, 3, 3, 3])).unwrap();
    assert!(conv_weight_as_cube(&from_zero).unwrap().bit_eq(&a.reconstruct()));

    // independent: W[o, c, u, v] + Σ_r a_r[u·k + v] b_r[c] c_r[o]
    let f = a.factor_matrices();
    let cube = cp_oracle(&f[0], &f[1], &f[2], 1.0);
    let mut want = base.clone();
    for o in 0..5 {
        for c in 0..3 {
            for u in 0..3 {
                for v in 0..3 {
                    let w = base.get(&[o, c, u, v]).unwrap() + cube.get(&[u * 3 + v, c, o]).unwrap();
                    want.set(&[o, c, u, v], w).unwrap();
                }
            }
        }
    }
    assert!(max_diff(&a.apply(&base).unwrap(), &want) <= 1e-12);
    assert!(a.apply(&Tensor::zeros(&[5, 4, 3, 3])).is_err());

    let attn_base = randt(&[6, 2, 3], 12);
    let b = random_adapter([6, 2, 3], 2, 0.5, 13);
    let want = attn_base.add(&cp_oracle(&b.factor_matrices()[0], &b.factor_matrices()[1], &b.factor_matrices()[2], 0.5)).unwrap();
    assert!(max_diff(&b.apply(&attn_base).unwrap(), &want) <= 1e-12);
}

#[test]
fn conv_reshape_round_trips() {
    let w = randt(&[4, 3, 2, 2], 14);
    let cube = conv_weight_as_cube(&w).unwrap();
    assert_eq!(cube.shape(), &[4, 3, 4]);
    assert!(delta_as_weight(&cube, w.shape()).unwrap().bit_eq(&w));
}

#[test]
fn factor_gradients_match_fd() {
    let base = randt(&[4, 3, 3, 3], 15);
    let x = randt(&[2, 3, 5, 5], 16);
    let a = random_adapter([9, 3, 4], 2, 0.7, 17);
    let ps = a.factor_matrices().to_vec();
    let (e, n) = gradcheck(&ps, 200, 1, |g, v| {
        let cp = CpVars { modes: [v[0], v[1], v[2]], scale: 0.7 };
        let w = g.constant(base.clone());
        let w = cp.apply(g, w).unwrap();
        let xv = g.constant(x.clone());
        let y = g.conv2d(xv, w, 1, 1).unwrap();
        let s = g.square(y);
        g.mean(s)
    });
    assert!(e <= 1e-4, "{e}");
    assert_eq!(n, 2 * (9 + 3 + 4));
}

#[test]
fn frozen_base_gets_no_gradient() {
    let a = random_adapter([9, 2, 3], 1, 1.0, 18);
    let mut g = Graph::new();
    let base = g.constant(randt(&[3, 2, 3, 3], 19));
    let cp = CpVars::bind(&mut g, &a, true);
    let w = cp.apply(&mut g, base).unwrap();
    let s = g.sum(w);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(base).is_none());
    assert!(cp.modes.iter().all(|&m| grads.get(m).is_some()));
}

fn unfolding_rank(t: &Tensor<f64>, mode: usize) -> usize {
    let s = t.shape();
    let rows = s[mode];
    let cols = t.len() / rows;
    let m = DMatrix::from_fn(rows, cols, |i, c| {
        let (a, b) = match mode {
            0 => (c / s[2], c % s[2]),
            1 => (c / s[2], c % s[2]),
            _ => (c / s[1], c % s[1]),
        };
        match mode {
            0 => t.get(&[i, a, b]).unwrap(),
            1 => t.get(&[a, i, b]).unwrap(),
            _ => t.get(&[a, b, i]).unwrap(),
        }
    });
    let sv = m.singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&v| v > 1e-9 * top.max(1e-300)).count()
}

fn adapter_strategy() -> impl Strategy<Value = (CpAdapter<f64>, u64)> {
    (1usize..5, 1usize..6, 1usize..6, 1usize..6, -3.0f64..3.0, any::<u64>())
        .prop_map(|(r, d1, d2, d3, scale, seed)| (random_adapter([d1, d2, d3], r, scale, seed), seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn multilinear_in_each_mode((a, seed) in adapter_strategy(), c in -4.0f64..4.0) {
        let mode = (seed % 3) as usize;
        let r = (seed / 3 % a.rank() as u64) as usize;
        let term = |ad: &CpAdapter<f64>| {
            let f = ad.factor_matrices();
            let pick = |m: usize| ftn_core::kernels::narrow(&f[m], 0, r, 1).unwrap();
            cp_oracle(&pick(0), &pick(1), &pick(2), ad.scale())
        };
        let mut b = a.clone();
        let d = b.dims()[mode];
        for v in &mut b.factor_matrices_mut()[mode].data_mut()[r * d..(r + 1) * d] {
            *v *= c;
        }
        // new total = old total + (c − 1)·term_r
        let want = a.reconstruct().add(&term(&a).scale(c - 1.0)).unwrap();
        prop_assert!(max_diff(&b.reconstruct(), &want) <= 1e-12);
        prop_assert!(max_diff(&term(&b), &term(&a).scale(c)) <= 1e-12);
    }

    #[test]
    fn permuting_terms_changes_nothing((a, seed) in adapter_strategy()) {
        let r = a.rank();
        let mut perm: Vec<usize> = (0..r).collect();
        let mut rr = rng(seed);
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rr);
        let f = a.factor_matrices();
        let permuted = [0, 1, 2].map(|m| {
            let parts: Vec<Tensor<f64>> = perm.iter().map(|&p| ftn_core::kernels::narrow(&f[m], 0, p, 1).unwrap()).collect();
            let refs: Vec<&Tensor<f64>> = parts.iter().collect();
            ftn_core::kernels::concat(&refs, 0).unwrap()
        });
        let b = CpAdapter::new(permuted, a.scale()).unwrap();
        prop_assert!(max_diff(&a.reconstruct(), &b.reconstruct()) <= 1e-12);
    }

    #[test]
    fn unfoldings_have_rank_at_most_r((a, _) in adapter_strategy()) {
        prop_assume!(a.scale().abs() > 1e-6);
        let t = a.reconstruct().scale(1.0 / a.scale());
        for mode in 0..3 {
            prop_assert!(unfolding_rank(&t, mode) <= a.rank());
        }
    }

    #[test]
    fn apply_leaves_base_untouched((a, seed) in adapter_strategy()) {
        let d = a.dims();
        let base = randt(&d, seed ^ 1);
        let before = base.clone();
        let out = a.apply(&base).unwrap();
        prop_assert!(base.bit_eq(&before));
        prop_assert_eq!(out.shape(), base.shape());
    }
}
