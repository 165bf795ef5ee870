use super::gradcheck::{check_all, check_sampled};
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn unreached_parameter_gets_no_grad() {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let x = g.leaf(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap(), true);
    let loss = g.sum_all(x);
    g.backward(loss).unwrap();
    assert!(g.grad(p).is_none(), "unreachable parameter grad must stay untouched");
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::vector(vec![2.0]), true);
    let loss = g.sum_all(x);
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn nan_in_graph_detected() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::vector(vec![f64::NAN]), true);
    let loss = g.sum_all(x);
    assert!(matches!(g.backward(loss), Err(TensorError::NaNInGraph(_))));
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = randn_tensor(vec![3, 4], &mut rng);
    let b = randn_tensor(vec![4, 2], &mut rng);
    let report = check_all(
        &|g, ids| {
            let prod = g.matmul(ids[0], ids[1])?;
            Ok(g.sum_all(prod))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn layer_norm_constant_row_outputs_beta() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
    let gamma = g.constant(Tensor::vector(vec![2.0; 4]));
    let beta = g.constant(Tensor::vector(vec![0.25, -0.5, 1.0, 0.0]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    for (out, b) in g.value(y).data().iter().zip([0.25, -0.5, 1.0, 0.0]) {
        assert!((out - b).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let d = 16;
    let x = g.constant(randn_tensor(vec![2, d], &mut rng));
    let gamma = g.constant(Tensor::vector(vec![1.0; d]));
    let beta = g.constant(Tensor::vector(vec![0.0; d]));
    let y = g.layer_norm(x, gamma, beta, 1e-8).unwrap();
    for r in 0..2 {
        let row = &g.value(y).data()[r * d..(r + 1) * d];
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn_tensor(vec![3, 6], &mut rng);
    let gamma = randn_tensor(vec![6], &mut rng);
    let beta = randn_tensor(vec![6], &mut rng);
    let report = check_all(
        &|g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        },
        &[x, gamma, beta],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
}

#[test]
fn single_token_attention_is_value_output_path() {
    // softmax over one key is 1, so output = (v W_o) + b_o with v = token W_v + b_v
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 4;
    let mut g = Graph::<f64>::new();
    let tokens = g.constant(randn_tensor(vec![1, d], &mut rng));
    let mats: Vec<NodeId> =
        (0..4).map(|_| g.constant(randn_tensor(vec![d, d], &mut rng))).collect();
    let zeros = Tensor::vector(vec![0.0; d]);
    let bias: Vec<NodeId> = (0..4).map(|_| g.constant(zeros.clone())).collect();
    let w = AttentionWeights {
        wq: mats[0],
        bq: bias[0],
        wk: mats[1],
        bk: bias[1],
        wv: mats[2],
        bv: bias[2],
        wo: mats[3],
        bo: bias[3],
    };
    let out = multi_head_attention(&mut g, tokens, &w, 2, None).unwrap();

    let v = g.matmul(tokens, mats[2]).unwrap();
    let expect = g.matmul(v, mats[3]).unwrap();
    for (a, b) in g.value(out).data().iter().zip(g.value(expect).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant_without_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, d) = (5, 6);
    let tokens = randn_tensor(vec![n, d], &mut rng);
    let perm = [3usize, 0, 4, 1, 2];
    let mut permuted = vec![0.0; n * d];
    for (dst, &src) in perm.iter().enumerate() {
        permuted[dst * d..(dst + 1) * d].copy_from_slice(&tokens.data()[src * d..(src + 1) * d]);
    }
    let mask = [true, true, false, true, true];
    let perm_mask: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();

    let run = |toks: Tensor<f64>, mask: &[bool]| {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::<f64>::new();
        let t = g.constant(toks);
        let mats: Vec<NodeId> =
            (0..4).map(|_| g.constant(randn_tensor(vec![d, d], &mut rng))).collect();
        let vecs: Vec<NodeId> =
            (0..4).map(|_| g.constant(randn_tensor(vec![d], &mut rng))).collect();
        let w = AttentionWeights {
            wq: mats[0],
            bq: vecs[0],
            wk: mats[1],
            bk: vecs[1],
            wv: mats[2],
            bv: vecs[2],
            wo: mats[3],
            bo: vecs[3],
        };
        let out = multi_head_attention(&mut g, t, &w, 3, Some(mask)).unwrap();
        g.value(out).data().to_vec()
    };

    let base = run(tokens.clone(), &mask);
    let shuffled = run(Tensor::matrix(n, d, permuted).unwrap(), &perm_mask);
    for (dst, &src) in perm.iter().enumerate() {
        for j in 0..d {
            assert!((shuffled[dst * d + j] - base[src * d + j]).abs() < 1e-10);
        }
    }
}

#[test]
fn two_token_single_head_attention_matches_hand_computation() {
    // d=2, identity-ish weights sized by hand
    let t = [[1.0, 0.0], [0.0, 2.0]];
    let wq = [[1.0, 0.5], [0.0, 1.0]];
    let wk = [[1.0, 0.0], [0.5, 1.0]];
    let wv = [[2.0, 0.0], [0.0, 0.5]];
    let wo = [[1.0, 1.0], [1.0, -1.0]];

    let matv = |m: &[[f64; 2]; 2], x: &[f64; 2]| {
        [x[0] * m[0][0] + x[1] * m[1][0], x[0] * m[0][1] + x[1] * m[1][1]]
    };
    let q: Vec<[f64; 2]> = t.iter().map(|row| matv(&wq, row)).collect();
    let k: Vec<[f64; 2]> = t.iter().map(|row| matv(&wk, row)).collect();
    let v: Vec<[f64; 2]> = t.iter().map(|row| matv(&wv, row)).collect();
    let scale = 1.0 / (2.0f64).sqrt();
    let mut expect = Vec::new();
    for qi in &q {
        let s0 = (qi[0] * k[0][0] + qi[1] * k[0][1]) * scale;
        let s1 = (qi[0] * k[1][0] + qi[1] * k[1][1]) * scale;
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        let z = e0 + e1;
        let mixed = [
            (e0 * v[0][0] + e1 * v[1][0]) / z,
            (e0 * v[0][1] + e1 * v[1][1]) / z,
        ];
        expect.push(matv(&wo, &mixed));
    }

    let mut g = Graph::<f64>::new();
    let flat = |m: &[[f64; 2]; 2]| Tensor::matrix(2, 2, m.iter().flatten().copied().collect()).unwrap();
    let tokens = g.constant(flat(&t));
    let zeros = Tensor::vector(vec![0.0; 2]);
    let w = AttentionWeights {
        wq: g.constant(flat(&wq)),
        bq: g.constant(zeros.clone()),
        wk: g.constant(flat(&wk)),
        bk: g.constant(zeros.clone()),
        wv: g.constant(flat(&wv)),
        bv: g.constant(zeros.clone()),
        wo: g.constant(flat(&wo)),
        bo: g.constant(zeros),
    };
    let out = multi_head_attention(&mut g, tokens, &w, 1, None).unwrap();
    let got = g.value(out).data();
    for i in 0..2 {
        for j in 0..2 {
            assert!((got[i * 2 + j] - expect[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one_and_respect_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f64>::new();
    let x = g.constant(randn_tensor(vec![4, 6], &mut rng));
    let mask = [true, false, true, true, false, true];
    let p = g.softmax_rows(x, Some(&mask)).unwrap();
    let data = g.value(p).data();
    for r in 0..4 {
        let row = &data[r * 6..(r + 1) * 6];
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(row[1], 0.0);
        assert_eq!(row[4], 0.0);
    }
}

#[test]
fn composite_block_gradient_matches_finite_differences() {
    // layer norm -> attention -> cross-entropy, the spec's composite case
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (n, d) = (3, 4);
    let mut inputs = vec![randn_tensor(vec![n, d], &mut rng)];
    inputs.push(randn_tensor(vec![d], &mut rng)); // gamma
    inputs.push(randn_tensor(vec![d], &mut rng)); // beta
    for _ in 0..4 {
        inputs.push(randn_tensor(vec![d, d], &mut rng));
        inputs.push(randn_tensor(vec![d], &mut rng));
    }
    let report = check_all(
        &|g, ids| {
            let normed = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            let w = AttentionWeights {
                wq: ids[3],
                bq: ids[4],
                wk: ids[5],
                bk: ids[6],
                wv: ids[7],
                bv: ids[8],
                wo: ids[9],
                bo: ids[10],
            };
            let attended = multi_head_attention(g, normed, &w, 2, None)?;
            let pooled = g.mean_rows(attended)?;
            g.cross_entropy(pooled, 1)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
}

#[test]
fn gelu_and_misc_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn_tensor(vec![2, 5], &mut rng);
    let y = randn_tensor(vec![2, 5], &mut rng);
    let report = check_all(
        &|g, ids| {
            let a = g.gelu(ids[0]);
            let b = g.mul(a, ids[1])?;
            let c = g.add(b, ids[0])?;
            let s = g.scale(c, 0.7);
            let sl = g.slice_cols(s, 1, 3)?;
            let gr = g.gather_rows(sl, &[1, 0, 1])?;
            Ok(g.sum_all(gr))
        },
        &[x, y],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn soft_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let logits = randn_tensor(vec![1, 5], &mut rng);
    let targets = [0.1, 0.3, 0.05, 0.35, 0.2];
    let report = check_all(
        &|g, ids| g.soft_cross_entropy(ids[0], &targets, 1.0 / 0.1),
        &[logits],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
}

#[test]
fn cox_loss_matches_hand_partial_likelihood() {
    let mut g = Graph::<f64>::new();
    let (r1, r2) = (0.4, -0.9);
    let risks = g.leaf(Tensor::vector(vec![r1, r2]), true);
    let loss = g.cox_loss(risks, &[1.0, 5.0], &[true, false]).unwrap();
    let expect = -(r1 - (r1.exp() + r2.exp()).ln());
    assert!((g.value(loss).data()[0] - expect).abs() < 1e-12);
}

#[test]
fn cox_loss_order_and_shift_invariant() {
    let risks = vec![0.3, -0.2, 1.1, 0.0];
    let times = vec![3.0, 1.0, 4.0, 2.0];
    let events = vec![true, false, true, true];

    let eval = |r: &[f64], t: &[f64], e: &[bool]| {
        let mut g = Graph::<f64>::new();
        let id = g.constant(Tensor::vector(r.to_vec()));
        let l = g.cox_loss(id, t, e).unwrap();
        g.value(l).data()[0]
    };
    let base = eval(&risks, &times, &events);

    let perm = [2usize, 0, 3, 1];
    let rp: Vec<f64> = perm.iter().map(|&i| risks[i]).collect();
    let tp: Vec<f64> = perm.iter().map(|&i| times[i]).collect();
    let ep: Vec<bool> = perm.iter().map(|&i| events[i]).collect();
    assert!((eval(&rp, &tp, &ep) - base).abs() < 1e-10);

    let shifted: Vec<f64> = risks.iter().map(|r| r + 7.5).collect();
    assert!((eval(&shifted, &times, &events) - base).abs() < 1e-9);
}

#[test]
fn cox_loss_requires_an_event() {
    let mut g = Graph::<f64>::new();
    let id = g.constant(Tensor::vector(vec![0.1, 0.2]));
    assert!(matches!(
        g.cox_loss(id, &[1.0, 2.0], &[false, false]),
        Err(TensorError::NoEventsInBatch)
    ));
}

#[test]
fn cox_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let risks = randn_tensor(vec![6], &mut rng);
    let times = [2.0, 2.0, 5.0, 1.0, 4.0, 3.0];
    let events = [true, true, false, true, false, true];
    let report =
        check_all(&|g, ids| g.cox_loss(ids[0], &times, &events), &[risks], 1e-6).unwrap();
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn attention_rejects_bad_head_count() {
    let mut g = Graph::<f64>::new();
    let t = g.constant(Tensor::matrix(2, 6, vec![0.0; 12]).unwrap());
    let m = g.constant(Tensor::matrix(6, 6, vec![0.0; 36]).unwrap());
    let b = g.constant(Tensor::vector(vec![0.0; 6]));
    let w = AttentionWeights { wq: m, bq: b, wk: m, bk: b, wv: m, bv: b, wo: m, bo: b };
    assert!(matches!(
        multi_head_attention(&mut g, t, &w, 4, None),
        Err(TensorError::DimNotDivisibleByHeads { dim: 6, heads: 4 })
    ));
}

#[test]
fn transformer_block_gradient_sampled() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (n, d, hidden) = (4, 6, 12);
    let mut inputs = vec![randn_tensor(vec![n, d], &mut rng)];
    // ln1 g/b, 4x(w,b) attn, ln2 g/b, mlp w1 b1 w2 b2
    inputs.push(randn_tensor(vec![d], &mut rng));
    inputs.push(randn_tensor(vec![d], &mut rng));
    for _ in 0..4 {
        inputs.push(randn_tensor(vec![d, d], &mut rng));
        inputs.push(randn_tensor(vec![d], &mut rng));
    }
    inputs.push(randn_tensor(vec![d], &mut rng));
    inputs.push(randn_tensor(vec![d], &mut rng));
    inputs.push(randn_tensor(vec![d, hidden], &mut rng));
    inputs.push(randn_tensor(vec![hidden], &mut rng));
    inputs.push(randn_tensor(vec![hidden, d], &mut rng));
    inputs.push(randn_tensor(vec![d], &mut rng));

    let mut sample_rng = ChaCha8Rng::seed_from_u64(99);
    let report = check_sampled(
        &|g, ids| {
            let w = TransformerBlockWeights {
                ln1: LayerNormWeights { gamma: ids[1], beta: ids[2] },
                attn: AttentionWeights {
                    wq: ids[3],
                    bq: ids[4],
                    wk: ids[5],
                    bk: ids[6],
                    wv: ids[7],
                    bv: ids[8],
                    wo: ids[9],
                    bo: ids[10],
                },
                ln2: LayerNormWeights { gamma: ids[11], beta: ids[12] },
                mlp: MlpWeights { w1: ids[13], b1: ids[14], w2: ids[15], b2: ids[16] },
            };
            let y = transformer_block(g, ids[0], &w, 3, None)?;
            let pooled = g.mean_rows(y)?;
            g.cross_entropy(pooled, 0)
        },
        &inputs,
        1e-5,
        120,
        &mut sample_rng,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut g = Graph::<f32>::new();
        let x = g.constant(
            Tensor::matrix(8, 8, (0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap(),
        );
        let y = g.matmul(x, x).unwrap();
        let z = g.gelu(y);
        let s = g.softmax_rows(z, None).unwrap();
        g.value(s).data().to_vec()
    };
    assert_eq!(run(), run());
}
