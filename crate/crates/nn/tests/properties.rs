use centro_nn::{Checkpoint, Graph, ParamSet, Tensor};
use proptest::prelude::*;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n)
}

/// Direct six-loop valid convolution.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(x: &[f64], w: &[f64], b: &[f64], [bn, c, h, wd]: [usize; 4], o: usize, k: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = ((h - k) / s + 1, (wd - k) / s + 1);
    let mut out = vec![0.0; bn * o * oh * ow];
    for n in 0..bn {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                acc += x[((n * c + ic) * h + i * s + u) * wd + j * s + v]
                                    * w[((oc * c + ic) * k + u) * k + v];
                            }
                        }
                    }
                    out[((n * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

/// Input dims, output channels, kernel, stride, input, weights, bias.
type ConvCase = ([usize; 4], usize, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>);

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..4, 1usize..3)
        .prop_flat_map(|(bn, c, o, k, s)| (Just((bn, c, o, k, s)), k..k + 7, k..k + 7))
        .prop_flat_map(|((bn, c, o, k, s), h, wd)| {
            (
                Just([bn, c, h, wd]),
                Just(o),
                Just(k),
                Just(s),
                values(bn * c * h * wd),
                values(o * c * k * k),
                values(o),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_convolution((dims, o, k, s, x, w, b) in conv_case()) {
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(dims.to_vec(), x.clone()).unwrap());
        let wv = g.input(Tensor::new(vec![o, dims[1], k, k], w.clone()).unwrap());
        let bv = g.input(Tensor::new(vec![o], b.clone()).unwrap());
        let y = g.conv2d(xv, wv, bv, s).unwrap();
        let want = conv_oracle(&x, &w, &b, dims, o, k, s);
        prop_assert_eq!(g.value(y).len(), want.len());
        for (a, e) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_input_gradient_is_the_adjoint((dims, o, k, s, x, w, _b) in conv_case()) {
        // With zero bias conv is linear, so <conv(x), r> = <x, J^T r>.
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(dims.to_vec(), x.clone()).unwrap());
        let wv = g.constant(Tensor::new(vec![o, dims[1], k, k], w.clone()).unwrap());
        let bv = g.constant(Tensor::zeros(vec![o]));
        let y = g.conv2d(xv, wv, bv, s).unwrap();
        let shape = g.value(y).shape().to_vec();
        let r: Vec<f64> = (0..g.value(y).len()).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let rv = g.constant(Tensor::new(shape, r.clone()).unwrap());
        let prod = g.mul(y, rv).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let lhs: f64 = g.value(y).data().iter().zip(&r).map(|(a, b)| a * b).sum();
        let rhs: f64 = grads.wrt(xv).unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn dense_matches_naive_product(
        (n, fin, fout) in (1usize..6, 1usize..8, 1usize..8),
        seed in values(200),
    ) {
        let x: Vec<f64> = seed.iter().cycle().take(n * fin).copied().collect();
        let w: Vec<f64> = seed.iter().rev().cycle().take(fin * fout).copied().collect();
        let b: Vec<f64> = seed[..fout].to_vec();
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(vec![n, fin], x.clone()).unwrap());
        let wv = g.input(Tensor::new(vec![fin, fout], w.clone()).unwrap());
        let bv = g.input(Tensor::new(vec![fout], b.clone()).unwrap());
        let y = g.dense(xv, wv, bv).unwrap();
        for r in 0..n {
            for c in 0..fout {
                let e: f64 = b[c] + (0..fin).map(|i| x[r * fin + i] * w[i * fout + c]).sum::<f64>();
                prop_assert!((g.value(y).data()[r * fout + c] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logsumexp_is_stable_and_shift_equivariant(
        row in prop::collection::vec(-50.0..50.0f64, 1..10),
        shift in -700.0..700.0f64,
    ) {
        let eval = |v: &[f64]| {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap());
            let y = g.logsumexp(x).unwrap();
            g.value(y).item()
        };
        let base = eval(&row);
        let naive = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        prop_assert!((base - naive).abs() < 1e-10);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let s = eval(&shifted);
        prop_assert!(s.is_finite());
        prop_assert!((s - base - shift).abs() < 1e-9 * shift.abs().max(1.0));
    }

    #[test]
    fn group_mean_ignores_row_order_within_groups(
        groups in 1usize..6,
        data in values(5 * 6 * 3),
        rot in 0usize..6,
    ) {
        let rows = 3 * groups;
        let x: Vec<f64> = data[..rows * 5].to_vec();
        let mut y = x.clone();
        for b in 0..3 {
            let block = &mut y[b * groups * 5..(b + 1) * groups * 5];
            block.rotate_left((rot % groups) * 5);
        }
        let eval = |v: Vec<f64>| {
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(vec![rows, 5], v).unwrap());
            let m = g.group_mean(xv, groups).unwrap();
            g.value(m).data().to_vec()
        };
        let (a, b) = (eval(x.clone()), eval(y));
        prop_assert_eq!(&a, &b);
        for bi in 0..3 {
            for f in 0..5 {
                let e: f64 = (0..groups).map(|r| x[(bi * groups + r) * 5 + f]).sum::<f64>() / groups as f64;
                prop_assert!((a[bi * 5 + f] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_at_f32_precision(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..5),
        seed in values(64),
        tag in any::<u64>(),
    ) {
        let mut set = ParamSet::new();
        for (i, s) in shapes.iter().enumerate() {
            let n: usize = s.iter().product();
            let data: Vec<f64> = seed.iter().cycle().skip(i).take(n).copied().collect();
            set.add(format!("p{i}"), Tensor::new(s.clone(), data).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let arch = serde_json::json!({ "layers": shapes.len() });
        Checkpoint::save(&path, arch.clone(), tag, &set).unwrap();
        let (ck, back) = Checkpoint::load(&path).unwrap();
        prop_assert_eq!(ck.seed, tag);
        prop_assert_eq!(ck.architecture, arch);
        prop_assert_eq!(back.shapes(), set.shapes());
        for id in set.ids() {
            for (a, b) in set.get(id).data().iter().zip(back.get(id).data()) {
                prop_assert_eq!(*b, *a as f32 as f64);
            }
        }
    }
}
