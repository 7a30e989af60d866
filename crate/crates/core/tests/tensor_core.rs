use adsm::tensor::gradcheck::grad_check;
use adsm::tensor::{Graph, Tensor, Var};
use adsm::wavelet::WaveletFilter;
use adsm::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(y ⊙ r)` with a fixed random `r`, so every output coordinate matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(g.shape(y).to_vec(), &mut rng(seed ^ 0x5eed));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

#[test]
fn matmul_identity_and_annihilator() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(Tensor::from_slice([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::from_slice([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let z = g.constant(Tensor::zeros([2, 2]));
    let y = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let y = g.matmul(m, z).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([3, 4]));
    let b = g.constant(Tensor::zeros([5, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[3, 4]") && msg.contains("[5, 2]"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let a = Tensor::<f64>::randn([3, 4], &mut rng(1));
    let b = Tensor::<f64>::randn([4, 2], &mut rng(2));
    let (a2, b2) = (a.clone(), b.clone());
    let wrt_a = grad_check(
        move |g, x| {
            let b = g.constant(b2.clone());
            let y = g.matmul(x, b)?;
            g.sum(y)
        },
        &a,
        1e-5,
    )
    .unwrap();
    let wrt_b = grad_check(
        move |g, x| {
            let a = g.constant(a2.clone());
            let y = g.matmul(a, x)?;
            g.sum(y)
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(wrt_a < 1e-6, "{wrt_a}");
    assert!(wrt_b < 1e-6, "{wrt_b}");
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let (ci, h, wd) = x.dims3().unwrap();
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let p = (k / 2) as isize;
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - p;
                            let ix = xx as isize + kx as isize - p;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.data()[((o * ci + c) * k + ky) * k + kx]
                                    * x.data()[(c * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_identity_and_zero_kernels() {
    let x = Tensor::<f64>::randn([1, 5, 3], &mut rng(4));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let one = g.constant(Tensor::ones([1, 1, 1, 1]));
    let y = g.conv2d(xv, one, None, 1).unwrap();
    assert_eq!(g.value(y), &x);

    let x3 = Tensor::<f64>::randn([3, 4, 4], &mut rng(5));
    let xv = g.constant(x3);
    let zw = g.constant(Tensor::zeros([2, 3, 3, 3]));
    let zb = g.constant(Tensor::zeros([2]));
    let y = g.conv2d(xv, zw, Some(zb), 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_direct_summation() {
    let x = Tensor::<f64>::randn([1, 4, 4], &mut rng(6));
    let w = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng(7));
    let b = [0.25];
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(Tensor::from_slice([1], &b).unwrap()));
    let y = g.conv2d(xv, wv, Some(bv), 1).unwrap();
    let oracle = conv_oracle(&x, &w, &b);
    for (a, o) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - o).abs() < 1e-12);
    }

    // multi-channel
    let x = Tensor::<f64>::randn([3, 5, 6], &mut rng(8));
    let w = Tensor::<f64>::randn([2, 3, 3, 3], &mut rng(9));
    let b = [0.1, -0.2];
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(Tensor::from_slice([2], &b).unwrap()));
    let y = g.conv2d(xv, wv, Some(bv), 1).unwrap();
    let oracle = conv_oracle(&x, &w, &b);
    for (a, o) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - o).abs() < 1e-12);
    }
}

#[test]
fn conv_channel_mismatch_and_even_kernel() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([3, 4, 4]));
    let w = g.constant(Tensor::zeros([2, 4, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1), Err(Error::Dimension(_))));
    let w2 = g.constant(Tensor::zeros([2, 3, 2, 2]));
    assert!(matches!(g.conv2d(x, w2, None, 1), Err(Error::Contract(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([2]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let v = Tensor::<f64>::randn([7], &mut rng(10));
    let shifted = v.map(|z| z + 123.456);
    let a = g.constant(v.clone());
    let b = g.constant(shifted);
    let ya = g.softmax(a).unwrap();
    let yb = g.softmax(b).unwrap();
    assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);

    let total: f64 = g.value(ya).data().iter().sum();
    assert!((total - 1.0).abs() < 1e-7);
    let denom: f64 = v.data().iter().map(|z| z.exp()).sum();
    for (got, z) in g.value(ya).data().iter().zip(v.data()) {
        assert!((got - z.exp() / denom).abs() < 1e-12);
    }
}

#[test]
fn backward_examples() {
    let x = Tensor::<f64>::randn([3, 2], &mut rng(11));
    let y = Tensor::<f64>::randn([3, 2], &mut rng(12));
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let s = g.sum(xv).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(xv).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let xv = g.input(x);
    let yv = g.constant(y.clone());
    let p = g.mul(xv, yv).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(xv).unwrap(), y);

    let err = g.backward(p).err().unwrap();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn grad_check_examples() {
    let x = Tensor::<f64>::randn([10], &mut rng(13));
    let e = grad_check(|g, v| {
        let sq = g.mul(v, v)?;
        g.sum(sq)
    }, &x, 1e-5)
    .unwrap();
    assert!(e < 1e-9, "{e}");

    let e = grad_check(|g, _| Ok(g.constant(Tensor::scalar(4.2))), &x, 1e-5).unwrap();
    assert_eq!(e, 0.0);
}

#[test]
fn reused_tensor_accumulates_per_use_gradients() {
    let x = Tensor::<f64>::randn([4], &mut rng(14));
    let a = Tensor::<f64>::randn([4], &mut rng(15));
    let b = Tensor::<f64>::randn([4], &mut rng(16));
    let single = |w: &Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.constant(w.clone());
        let p = g.mul(xv, wv).unwrap();
        let s = g.silu(p).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap().get(xv).unwrap()
    };
    let ga = single(&a);
    let gb = single(&b);

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let (av, bv) = (g.constant(a), g.constant(b));
    let pa = g.mul(xv, av).unwrap();
    let pb = g.mul(xv, bv).unwrap();
    let sa = g.silu(pa).unwrap();
    let sb = g.silu(pb).unwrap();
    let both = g.add(sa, sb).unwrap();
    let l = g.sum(both).unwrap();
    let gboth = g.backward(l).unwrap().get(xv).unwrap();
    let expect = ga.zip_map(&gb, |p, q| p + q).unwrap();
    assert!(gboth.max_abs_diff(&expect) < 1e-14);
}

#[test]
fn tape_is_topological_and_visited_once() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::randn([2, 3], &mut rng(17)));
    let w = g.input(Tensor::randn([3, 2], &mut rng(18)));
    let y = g.matmul(x, w).unwrap();
    let s = g.softmax(y).unwrap();
    let z = g.mul(s, s).unwrap();
    let l = g.sum(z).unwrap();
    for i in 0..g.len() {
        let v = adsm::tensor::Var::clone(&[x, w, y, s, z, l][i]);
        assert!(g.inputs_of(v).iter().all(|inp| inp.index() < v.index()));
    }
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.visited(), 4);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::randn([2, 6, 6], &mut rng(19)));
        let w = g.input(Tensor::randn([4, 2, 3, 3], &mut rng(20)));
        let y = g.conv2d(x, w, None, 1).unwrap();
        let d = g.dwt2(y, &WaveletFilter::haar()).unwrap();
        let s = g.silu(d).unwrap();
        let l = g.mean(s).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).clone(), grads.get(x).unwrap(), grads.get(w).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data()[0].to_bits(), b.0.data()[0].to_bits());
    assert!(a.1.data().iter().zip(b.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.2.data().iter().zip(b.2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn overflow_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full([2], 1e30f32));
    assert!(matches!(g.mul(x, x), Err(Error::NonFinite(_))));
}

type UnaryCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph<f64>, Var, u64) -> Result<Var>>);

fn primitive_cases() -> Vec<UnaryCase> {
    fn other(g: &mut Graph<f64>, shape: &[usize], seed: u64) -> Var {
        g.constant(Tensor::randn(shape.to_vec(), &mut rng(seed ^ 0xabc)))
    }
    vec![
        ("add", vec![3, 4], Box::new(|g, x, s| { let o = other(g, &[3, 4], s); g.add(x, o) })),
        ("sub_lhs", vec![3, 4], Box::new(|g, x, s| { let o = other(g, &[3, 4], s); g.sub(x, o) })),
        ("sub_rhs", vec![3, 4], Box::new(|g, x, s| { let o = other(g, &[3, 4], s); g.sub(o, x) })),
        ("mul", vec![3, 4], Box::new(|g, x, s| { let o = other(g, &[3, 4], s); g.mul(x, o) })),
        ("scale", vec![5], Box::new(|g, x, _| g.scale(x, -1.7))),
        ("add_scalar", vec![5], Box::new(|g, x, _| g.add_scalar(x, 0.3))),
        ("scale_by_x", vec![5], Box::new(|g, x, s| { let o = other(g, &[1], s); g.scale_by(x, o) })),
        ("scale_by_s", vec![1], Box::new(|g, x, s| { let o = other(g, &[5], s); g.scale_by(o, x) })),
        ("matmul_a", vec![3, 4], Box::new(|g, x, s| { let o = other(g, &[4, 2], s); g.matmul(x, o) })),
        ("matmul_b", vec![4, 2], Box::new(|g, x, s| { let o = other(g, &[3, 4], s); g.matmul(o, x) })),
        ("matmul_nt_a", vec![3, 4], Box::new(|g, x, s| { let o = other(g, &[2, 4], s); g.matmul_nt(x, o) })),
        ("matmul_nt_b", vec![2, 4], Box::new(|g, x, s| { let o = other(g, &[3, 4], s); g.matmul_nt(o, x) })),
        ("matmul_tn_a", vec![4, 3], Box::new(|g, x, s| { let o = other(g, &[4, 2], s); g.matmul_tn(x, o) })),
        ("matmul_tn_b", vec![4, 2], Box::new(|g, x, s| { let o = other(g, &[4, 3], s); g.matmul_tn(o, x) })),
        ("row_bias_x", vec![3, 4], Box::new(|g, x, s| { let o = other(g, &[4], s); g.add_row_bias(x, o) })),
        ("row_bias_b", vec![4], Box::new(|g, x, s| { let o = other(g, &[3, 4], s); g.add_row_bias(o, x) })),
        ("reshape", vec![2, 6], Box::new(|g, x, _| g.reshape(x, &[3, 4]))),
        ("softmax", vec![3, 5], Box::new(|g, x, _| g.softmax(x))),
        ("silu", vec![7], Box::new(|g, x, _| g.silu(x))),
        ("conv3_x", vec![2, 5, 4], Box::new(|g, x, s| {
            let w = other(g, &[3, 2, 3, 3], s);
            let b = other(g, &[3], s + 1);
            g.conv2d(x, w, Some(b), 1)
        })),
        ("conv3_w", vec![3, 2, 3, 3], Box::new(|g, x, s| { let i = other(g, &[2, 5, 4], s); g.conv2d(i, x, None, 1) })),
        ("conv3_b", vec![3], Box::new(|g, x, s| {
            let i = other(g, &[2, 4, 4], s);
            let w = other(g, &[3, 2, 3, 3], s + 1);
            g.conv2d(i, w, Some(x), 1)
        })),
        ("conv1_x", vec![3, 4, 4], Box::new(|g, x, s| { let w = other(g, &[2, 3, 1, 1], s); g.conv2d(x, w, None, 1) })),
        ("conv1_w", vec![2, 3, 1, 1], Box::new(|g, x, s| { let i = other(g, &[3, 4, 4], s); g.conv2d(i, x, None, 1) })),
        ("conv_stride2_x", vec![2, 6, 6], Box::new(|g, x, s| { let w = other(g, &[3, 2, 3, 3], s); g.conv2d(x, w, None, 2) })),
        ("conv_stride2_w", vec![3, 2, 3, 3], Box::new(|g, x, s| { let i = other(g, &[2, 6, 5], s); g.conv2d(i, x, None, 2) })),
        ("dwt2", vec![2, 4, 6], Box::new(|g, x, _| g.dwt2(x, &WaveletFilter::haar()))),
        ("idwt2", vec![8, 2, 3], Box::new(|g, x, _| g.idwt2(x, &WaveletFilter::haar()))),
        ("concat", vec![2, 3], Box::new(|g, x, s| { let o = other(g, &[1, 3], s); g.concat(&[o, x, x]) })),
        ("channel_mul_x", vec![3, 2, 2], Box::new(|g, x, s| { let v = other(g, &[3], s); g.channel_mul(x, v) })),
        ("channel_mul_v", vec![3], Box::new(|g, x, s| { let i = other(g, &[3, 2, 2], s); g.channel_mul(i, x) })),
        ("channel_add_x", vec![3, 2, 2], Box::new(|g, x, s| { let v = other(g, &[3], s); g.channel_add(x, v) })),
        ("channel_add_v", vec![3], Box::new(|g, x, s| { let i = other(g, &[3, 2, 2], s); g.channel_add(i, x) })),
        ("sum", vec![4], Box::new(|g, x, _| g.sum(x))),
        ("mean", vec![4], Box::new(|g, x, _| g.mean(x))),
        ("mean_inner", vec![3, 2, 2], Box::new(|g, x, _| g.mean_inner(x))),
        ("mean_outer", vec![3, 4], Box::new(|g, x, _| g.mean_outer(x))),
        ("cross_entropy", vec![3, 5], Box::new(|g, x, _| g.cross_entropy(x, &[0, 4, 2]))),
    ]
}

#[test]
fn every_primitive_passes_grad_check_over_twenty_seeds() {
    for (name, shape, op) in primitive_cases() {
        let mut worst = 0.0f64;
        for seed in 0..20u64 {
            let x = Tensor::<f64>::randn(shape.clone(), &mut rng(1000 + seed));
            let e = grad_check(
                |g, v| {
                    let y = op(g, v, seed)?;
                    probe(g, y, seed)
                },
                &x,
                1e-5,
            )
            .unwrap();
            worst = worst.max(e);
        }
        assert!(worst < 1e-4, "{name}: max rel err {worst:e}");
    }
}

proptest::proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-80.0f64..80.0, 1..32)) {
        let n = v.len();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_slice([n], &v).unwrap());
        let y = g.softmax(x).unwrap();
        let total: f64 = g.value(y).data().iter().sum();
        proptest::prop_assert!((total - 1.0).abs() < 1e-6);
    }
}
