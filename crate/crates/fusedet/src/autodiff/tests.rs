//! Unit tests for the tape: per-op examples and the gradient-check oracle on
//! fixed seeds. The broad randomized-shape sweep lives in the acceptance
//! suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::assert_gradients;
use crate::autodiff::nn::{self, LinearRef};
use crate::autodiff::{BorderMode, ParamStore, Tape, Tensor};

const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Fixed weights so scalar readouts have informative gradients.
fn readout(t: &Tensor) -> Tensor {
    let n = t.numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 + 13) % 23) as f64 / 11.0 - 1.0).collect();
    let wt = t.tape().constant(w, &[n]).unwrap();
    t.reshape(&[n]).unwrap().mul(&wt).unwrap().sum_all()
}

#[test]
fn matmul_identity_and_cancellation() {
    let tape = Tape::new();
    let eye = tape
        .constant(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3])
        .unwrap();
    let a = tape
        .constant((1..=9).map(f64::from).collect(), &[3, 3])
        .unwrap();
    let prod = eye.matmul(&a).unwrap();
    assert_eq!(prod.data(), a.data());

    let x = tape.constant(vec![0.5, -2.0, 3.25], &[3]).unwrap();
    let z = x.add(&x.neg()).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let a = randv(&mut r, 20);
    let b = randv(&mut r, 15);
    assert_gradients(&[(vec![4, 5], a), (vec![5, 3], b)], H, 1e-6, |_, leaves| {
        let prod = leaves[0].matmul(&leaves[1]).unwrap();
        readout(&prod)
    });
}

#[test]
fn elementwise_ops_gradients() {
    let mut r = rng(2);
    let x = randv(&mut r, 12);
    let y: Vec<f64> = (0..12).map(|_| r.gen_range(0.5..2.0)).collect();
    assert_gradients(&[(vec![3, 4], x.clone()), (vec![3, 4], y.clone())], H, 1e-5, |_, l| {
        let s = l[0].mul(&l[1]).unwrap().add(&l[0].sub(&l[1]).unwrap()).unwrap();
        let d = l[0].div(&l[1]).unwrap();
        readout(&s.add(&d).unwrap())
    });

    let pos: Vec<f64> = (0..10).map(|_| r.gen_range(0.2..2.5)).collect();
    assert_gradients(&[(vec![10], pos)], H, 1e-5, |_, l| {
        let t = l[0]
            .log()
            .add(&l[0].powf(1.7))
            .unwrap()
            .add(&l[0].exp())
            .unwrap()
            .add(&l[0].sin().mul(&l[0].cos()).unwrap())
            .unwrap()
            .add(&l[0].sigmoid())
            .unwrap()
            .add(&l[0].softplus())
            .unwrap();
        readout(&t)
    });
}

#[test]
fn broadcast_add_mul_gradients() {
    let mut r = rng(3);
    let x = randv(&mut r, 12);
    let b = randv(&mut r, 4);
    assert_gradients(&[(vec![3, 4], x), (vec![4], b)], H, 1e-5, |_, l| {
        let y = l[0].add(&l[1]).unwrap().mul(&l[1]).unwrap();
        readout(&y)
    });
}

#[test]
fn softmax_rows_sum_to_one_and_grad() {
    let mut r = rng(4);
    let x = randv(&mut r, 15);
    let tape = Tape::new();
    let t = tape.constant(x.clone(), &[3, 5]).unwrap();
    let p = t.softmax(1).unwrap();
    for row in p.data().chunks(5) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
    }
    assert_gradients(&[(vec![3, 5], x)], H, 1e-5, |_, l| {
        readout(&l[0].softmax(1).unwrap())
    });
}

#[test]
fn layer_norm_grad() {
    let mut r = rng(5);
    let x = randv(&mut r, 12);
    assert_gradients(&[(vec![3, 4], x)], H, 1e-4, |_, l| {
        readout(&l[0].layer_norm_last(1e-5).unwrap())
    });
}

#[test]
fn concat_slice_reshape_grads_and_roundtrip() {
    let mut r = rng(6);
    let a = randv(&mut r, 6);
    let b = randv(&mut r, 9);
    assert_gradients(&[(vec![3, 2], a), (vec![3, 3], b)], H, 1e-5, |_, l| {
        let cat = Tensor::concat(&[&l[0], &l[1]]).unwrap();
        let back = cat.slice(1, 2, 5).unwrap();
        let r2 = back.reshape(&[9]).unwrap();
        readout(&r2)
    });

    let tape = Tape::new();
    let a = tape.constant(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
    let b = tape.constant(vec![5., 6.], &[2, 1]).unwrap();
    let cat = Tensor::concat(&[&a, &b]).unwrap();
    assert_eq!(cat.slice(1, 0, 2).unwrap().data(), a.data());
    assert_eq!(cat.slice(1, 2, 3).unwrap().data(), b.data());
}

#[test]
fn gather_scatter_grads() {
    let mut r = rng(7);
    let x = randv(&mut r, 8);
    assert_gradients(&[(vec![4, 2], x.clone())], H, 1e-5, |_, l| {
        let g = l[0].gather_rows(&[2, 0, 2]).unwrap();
        readout(&g)
    });
    assert_gradients(&[(vec![4, 2], x)], H, 1e-5, |_, l| {
        let grid = l[0]
            .scatter_to_grid(&[(0, 0), (1, 2), (2, 1), (0, 2)], 3, 3)
            .unwrap();
        readout(&grid)
    });
}

#[test]
fn reduction_and_clamp_grads() {
    let mut r = rng(8);
    let x = randv(&mut r, 24);
    assert_gradients(&[(vec![2, 3, 4], x)], H, 1e-5, |_, l| {
        let s = l[0].sum_axis(1).unwrap();
        readout(&s)
    });
    let interior: Vec<f64> = (0..6).map(|_| r.gen_range(0.1..0.9)).collect();
    assert_gradients(&[(vec![6], interior)], H, 1e-5, |_, l| {
        readout(&l[0].clamp01())
    });
    // out-of-range values have zero gradient through the clamp
    let tape = Tape::new();
    let t = tape.leaf(vec![-0.5, 0.5, 1.5], &[3]).unwrap();
    let loss = t.clamp01().sum_all();
    tape.backward(&loss).unwrap();
    assert_eq!(t.grad().unwrap(), vec![0.0, 1.0, 0.0]);
}

#[test]
fn relu_abs_maximum_grads_away_from_kinks() {
    let mut r = rng(9);
    let x: Vec<f64> = (0..10)
        .map(|_| {
            let v: f64 = r.gen_range(0.1..1.5);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let y: Vec<f64> = x.iter().map(|&v| v + 0.3).collect();
    assert_gradients(&[(vec![10], x), (vec![10], y)], H, 1e-5, |_, l| {
        let t = l[0].relu().add(&l[0].abs()).unwrap().add(&l[0].maximum(&l[1]).unwrap()).unwrap();
        readout(&t)
    });
}

#[test]
fn bilinear_sample_values_and_gradients() {
    let tape = Tape::new();
    // 2 channels, 3x4 map
    let fm: Vec<f64> = (0..24).map(|i| i as f64 * 0.5).collect();
    let featmap = tape.constant(fm, &[2, 3, 4]).unwrap();
    // exact grid point (2, 1): value = featmap[c, 1, 2]
    let coords = tape.constant(vec![2.0, 1.0], &[1, 2]).unwrap();
    let s = featmap.bilinear_sample(&coords, BorderMode::Clamp).unwrap();
    assert_eq!(s.data(), vec![(1 * 4 + 2) as f64 * 0.5, (12 + 6) as f64 * 0.5]);

    // center of a 2x2 cell: mean of 4 corners
    let coords = tape.constant(vec![0.5, 0.5], &[1, 2]).unwrap();
    let s = featmap.bilinear_sample(&coords, BorderMode::Clamp).unwrap();
    let expect0 = (0.0 + 0.5 + 2.0 + 2.5) / 4.0;
    assert!((s.data()[0] - expect0).abs() < 1e-12);

    // gradients w.r.t. both inputs, away from the integer lattice
    let mut r = rng(10);
    let fm = randv(&mut r, 24);
    let coords = vec![1.3, 0.6, 2.4, 1.7, 0.2, 0.9];
    assert_gradients(
        &[(vec![2, 3, 4], fm), (vec![3, 2], coords)],
        H,
        1e-5,
        |_, l| {
            let s = l[0].bilinear_sample(&l[1], BorderMode::Clamp).unwrap();
            readout(&s)
        },
    );
}

#[test]
fn conv2d_grad() {
    let mut r = rng(11);
    let x = randv(&mut r, 3 * 5 * 6);
    let w = randv(&mut r, 2 * 3 * 3 * 3);
    for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
        assert_gradients(
            &[(vec![3, 5, 6], x.clone()), (vec![2, 3, 3, 3], w.clone())],
            H,
            1e-5,
            |_, l| {
                let y = l[0].conv2d(&l[1], stride, pad).unwrap();
                readout(&y)
            },
        );
    }
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(vec![0.0; 6], &[2, 3]).unwrap();
    let b = tape.constant(vec![0.0; 4], &[4]).unwrap();
    let err = a.matmul(&b.reshape(&[2, 2]).unwrap()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    let err = a.add(&b).unwrap_err();
    assert!(err.to_string().contains("[2, 3]"), "{err}");
}

#[test]
fn backward_is_deterministic_and_repeatable() {
    let mut r = rng(12);
    let tape = Tape::new();
    let x = tape.leaf(randv(&mut r, 12), &[3, 4]).unwrap();
    let w = tape.leaf(randv(&mut r, 8), &[4, 2]).unwrap();
    let loss = x.matmul(&w).unwrap().sigmoid().sum_all();
    tape.backward(&loss).unwrap();
    let g1 = (x.grad().unwrap(), w.grad().unwrap());
    tape.backward(&loss).unwrap();
    let g2 = (x.grad().unwrap(), w.grad().unwrap());
    assert_eq!(g1, g2);
}

#[test]
fn mlp_forward_contract() {
    // zero weights and bias -> zero output
    let mut store = ParamStore::new();
    nn::init_linear_zero(&mut store, "m.l0", 3, 4, 0.0);
    nn::init_linear_zero(&mut store, "m.l1", 4, 2, 0.0);
    let tape = Tape::new();
    let layers = nn::bind_mlp(&tape, &store, "m", 2).unwrap();
    let x = tape.constant(vec![1.0, -2.0, 0.5], &[1, 3]).unwrap();
    let y = nn::mlp_forward(&x, &layers).unwrap();
    assert_eq!(y.data(), vec![0.0, 0.0]);

    // single layer equals matmul + bias
    let mut store = ParamStore::new();
    let mut r = rng(13);
    nn::init_linear(&mut store, "s.l0", 3, 2, &mut r);
    let tape = Tape::new();
    let layers = nn::bind_mlp(&tape, &store, "s", 1).unwrap();
    let x = tape.constant(vec![0.3, 0.7, -1.1], &[1, 3]).unwrap();
    let y = nn::mlp_forward(&x, &layers).unwrap();
    let l0 = LinearRef::bind(&tape, &store, "s.l0").unwrap();
    let direct = x.matmul(&l0.w).unwrap().add(&l0.b).unwrap();
    assert_eq!(y.data(), direct.data());

    // gradient of summed output w.r.t. every weight
    let mut r = rng(14);
    let w0 = randv(&mut r, 12);
    let b0 = randv(&mut r, 4);
    let w1 = randv(&mut r, 8);
    let b1 = randv(&mut r, 2);
    let xv = randv(&mut r, 6);
    assert_gradients(
        &[
            (vec![3, 4], w0),
            (vec![4], b0),
            (vec![4, 2], w1),
            (vec![2], b1),
            (vec![2, 3], xv),
        ],
        H,
        1e-5,
        |_, l| {
            let h = l[4].matmul(&l[0]).unwrap().add(&l[1]).unwrap().relu();
            let y = h.matmul(&l[2]).unwrap().add(&l[3]).unwrap();
            y.sum_all()
        },
    );
}

#[test]
fn self_attention_contract() {
    use crate::autodiff::nn::AttentionRef;

    // single query: attention weight is 1, output = out-proj(v-proj(x)) + x, normed
    let mut store = ParamStore::new();
    let mut r = rng(15);
    nn::init_attention(&mut store, "att", 8, &mut r);
    let tape = Tape::new();
    let att = AttentionRef::bind(&tape, &store, "att", 2).unwrap();
    let x = tape.constant(randv(&mut r, 8), &[1, 8]).unwrap();
    let y = att.apply(&x).unwrap();
    let v = att.v.apply(&x).unwrap();
    let expected = att.norm.apply(&x.add(&att.out.apply(&v).unwrap()).unwrap()).unwrap();
    for (a, b) in y.data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    // permutation equivariance
    let x3 = tape.constant(randv(&mut r, 24), &[3, 8]).unwrap();
    let y3 = att.apply(&x3).unwrap();
    let perm = [2usize, 0, 1];
    let xp = x3.gather_rows(&perm).unwrap();
    let yp = att.apply(&xp).unwrap();
    let y3d = y3.data();
    let ypd = yp.data();
    for (new_row, &old_row) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((ypd[new_row * 8 + c] - y3d[old_row * 8 + c]).abs() < 1e-9);
        }
    }

    // width not divisible by heads is rejected
    let att3 = AttentionRef::bind(&tape, &store, "att", 3).unwrap();
    assert!(att3.apply(&x3).is_err());

    // gradient check on a 3x8 input through the whole block
    let mut weights: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    let mut names = Vec::new();
    for part in ["q", "k", "v", "out"] {
        names.push(format!("att.{part}.w"));
        names.push(format!("att.{part}.b"));
    }
    names.push("att.norm.g".into());
    names.push("att.norm.o".into());
    for n in &names {
        let p = store.get(n).unwrap();
        weights.push((p.shape.clone(), p.data.clone()));
    }
    let xv = randv(&mut r, 24);
    weights.push((vec![3, 8], xv));
    assert_gradients(&weights, H, 1e-5, |tape, l| {
        let att = AttentionRef {
            q: LinearRef { w: l[0].clone(), b: l[1].clone() },
            k: LinearRef { w: l[2].clone(), b: l[3].clone() },
            v: LinearRef { w: l[4].clone(), b: l[5].clone() },
            out: LinearRef { w: l[6].clone(), b: l[7].clone() },
            norm: nn::LayerNormRef { g: l[8].clone(), o: l[9].clone() },
            heads: 2,
        };
        let _ = tape;
        readout(&att.apply(&l[10]).unwrap())
    });
}
