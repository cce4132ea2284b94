use mps::autodiff::{Graph, KeyBias, PairTarget, Segment, Var};
use mps::gradcheck::{grad_check, GradCheckConfig, Objective};
use mps::mask::BinaryMask;
use mps::params::ParamSet;
use mps::tensor::{Scalar, Tensor};
use mps::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new([r, c], data).unwrap()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.at(i, l) * b.at(l, j);
            }
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::from_f64_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap()).unwrap();
    let b = g.constant(Tensor::from_f64_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap()).unwrap();
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(Tensor::from_f64_rows(&[&[1.0, 2.0]]).unwrap()).unwrap();
    let b = g.constant(Tensor::from_f64_rows(&[&[3.0], &[4.0]]).unwrap()).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let expected = naive_matmul(&a, &b);
        let mut g = Graph::<f64>::new();
        let (va, vb) = (g.constant(a).unwrap(), g.constant(b).unwrap());
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([2, 3])).unwrap();
    let b = g.constant(Tensor::zeros([2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn matmul_chain_with_identity_is_associative() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let mut g = Graph::<f32>::new();
        let a = g.constant(random(&mut rng, 4, 4).cast()).unwrap();
        let b = g.constant(random(&mut rng, 4, 4).cast()).unwrap();
        let c = g.constant(random(&mut rng, 4, 4).cast()).unwrap();
        let mut eye = Tensor::<f32>::zeros([4, 4]);
        for k in 0..4 {
            eye.data_mut()[k * 5] = 1.0;
        }
        let i = g.constant(eye).unwrap();
        let ab = g.matmul(a, b).unwrap();
        let left = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let right = g.matmul(a, bc).unwrap();
        let right_i = g.matmul(right, i).unwrap();
        for (x, y) in g.value(left).data().iter().zip(g.value(right_i).data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

fn softmax_of(row: &[f64], keep: &[bool]) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([1, row.len()], row.to_vec()).unwrap()).unwrap();
    let m = BinaryMask::new(1, row.len(), keep.to_vec()).unwrap();
    let y = g.masked_softmax_rows(x, &m).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn masked_softmax_examples() {
    assert_eq!(softmax_of(&[1.0, 1.0], &[true, true]), vec![0.5, 0.5]);
    assert_eq!(softmax_of(&[2.0, 0.0], &[true, false]), vec![1.0, 0.0]);
    let got = softmax_of(&[1.0, 2.0, 3.0], &[true; 3]);
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
    for (k, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((got[k] - x.exp() / z).abs() < 1e-6);
    }
}

#[test]
fn masked_softmax_accepts_additive_masks() {
    let additive = Tensor::<f64>::new([1, 2], vec![0.0, f64::NEG_INFINITY]).unwrap();
    let mask = BinaryMask::from_additive(&additive).unwrap();
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([1, 2], vec![2.0, 0.0]).unwrap()).unwrap();
    let y = g.masked_softmax_rows(x, &mask).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn fully_masked_row_is_signalled() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([2, 2])).unwrap();
    let m = BinaryMask::new(2, 2, vec![true, false, false, false]).unwrap();
    match g.masked_softmax_rows(x, &m) {
        Err(Error::FullyMasked { rows }) => assert_eq!(rows, vec![1]),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

proptest! {
    #[test]
    fn masked_softmax_rows_sum_to_one(
        r in 1usize..6,
        c in 1usize..9,
        seed in 0u64..10_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..r * c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut keep: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.6)).collect();
        for i in 0..r {
            keep[i * c + rng.random_range(0..c)] = true;
        }
        let mask = BinaryMask::new(r, c, keep.clone()).unwrap();
        let mut g = Graph::<f32>::new();
        let xv = g.constant(Tensor::new([r, c], x).unwrap()).unwrap();
        let y = g.masked_softmax_rows(xv, &mask).unwrap();
        let y = g.value(y);
        for i in 0..r {
            let s: f64 = y.row(i).iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            for j in 0..c {
                if !keep[i * c + j] {
                    prop_assert_eq!(y.at(i, j), 0.0);
                }
            }
        }
    }
}

#[test]
fn backward_linear_map() {
    let mut g = Graph::<f64>::new();
    let w = g.constant(Tensor::from_f64_rows(&[&[1.0, 1.0]]).unwrap()).unwrap();
    let x = g.param(Tensor::from_f64_rows(&[&[2.0], &[3.0]]).unwrap()).unwrap();
    let y = g.matmul(w, x).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_product_rule() {
    let (u, v) = (1.5, -4.0);
    let mut g = Graph::<f64>::new();
    let alpha = g.param(Tensor::scalar(0.7)).unwrap();
    let uv = g.constant(Tensor::scalar(u)).unwrap();
    let vv = g.constant(Tensor::scalar(v)).unwrap();
    let p = g.mul(uv, vv).unwrap();
    let loss = g.scale_by(p, alpha).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(alpha).unwrap(), &[u * v]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros([2, 2])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Graph(_))));
}

/// `sum(op(inputs) ⊙ W)` for a fixed random `W`, so every output entry matters.
struct OpCase {
    kind: &'static str,
    weight_seed: u64,
}

impl OpCase {
    fn params(&self) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.weight_seed ^ 0xABCD);
        let mut ps = ParamSet::new();
        let shapes: &[(&str, usize, usize)] = match self.kind {
            "matmul" => &[("a", 3, 4), ("b", 4, 5)],
            "matmul_t" => &[("a", 3, 4), ("b", 5, 4)],
            "transpose" | "gelu" | "sum" | "mean_rows" => &[("a", 3, 4)],
            "add" | "sub" | "mul" | "row_dot" => &[("a", 3, 4), ("b", 3, 4)],
            "add_row" | "layer_norm" => &[("a", 3, 4), ("b", 1, 4), ("c", 1, 4)],
            "scale_by" | "shift_by" => &[("a", 3, 4), ("b", 1, 1)],
            "gather" | "concat" | "slice" => &[("a", 3, 4), ("b", 2, 4)],
            "softmax" => &[("a", 3, 5)],
            "attention" | "attention_hard_st" | "attention_soft" => {
                &[("q", 5, 4), ("k", 6, 4), ("v", 6, 4), ("m", 1, 6)]
            }
            "pair_kl" => &[("s", 4, 1)],
            other => panic!("unknown op {other}"),
        };
        for &(n, r, c) in shapes {
            ps.push(n, random(&mut rng, r, c), false);
        }
        ps
    }
}

impl Objective for OpCase {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, _p: &ParamSet<T>, v: &[Var]) -> mps::Result<Var> {
        let out = match self.kind {
            "matmul" => g.matmul(v[0], v[1])?,
            "matmul_t" => g.matmul_t(v[0], v[1])?,
            "transpose" => g.transpose(v[0])?,
            "gelu" => g.gelu(v[0])?,
            "sum" => g.sum(v[0])?,
            "mean_rows" => g.mean_rows(v[0])?,
            "add" => g.add(v[0], v[1])?,
            "sub" => g.sub(v[0], v[1])?,
            "mul" => g.mul(v[0], v[1])?,
            "row_dot" => g.row_dot(v[0], v[1])?,
            "add_row" => g.add_row(v[0], v[1])?,
            "layer_norm" => g.layer_norm(v[0], v[1], v[2], T::lit(1e-5))?,
            "scale_by" => g.scale_by(v[0], v[1])?,
            "shift_by" => g.shift_by(v[0], v[1])?,
            "gather" => g.gather_rows(v[0], &[2, 0, 2, 1])?,
            "concat" => {
                let r = g.concat_rows(&[v[0], v[1]])?;
                let c = g.concat_cols(&[v[0], v[0]])?;
                let cs = g.slice_cols(c, 2..6)?;
                let both = g.concat_rows(&[r, cs])?;
                g.scale(both, T::lit(0.5))?
            }
            "slice" => g.slice_cols(v[0], 1..3)?,
            "softmax" => {
                let keep = vec![
                    true, false, true, true, false, //
                    false, false, true, false, false, //
                    true, true, true, true, true,
                ];
                let m = BinaryMask::new(3, 5, keep).unwrap();
                g.masked_softmax_rows(v[0], &m)?
            }
            "attention" | "attention_hard_st" | "attention_soft" => {
                let segs = [
                    Segment { queries: 0..2, keys: 0..4 },
                    Segment { queries: 2..5, keys: 2..6 },
                ];
                let bias = match self.kind {
                    "attention" => KeyBias::None,
                    "attention_soft" => KeyBias::Soft { scores: v[3], lambda: T::lit(0.7) },
                    // Straight-through is not the true derivative; with
                    // `straight_through: false` the hard mask is piecewise
                    // constant and has zero gradient, which is checked here.
                    _ => KeyBias::Hard { scores: v[3], tau: T::lit(0.0), straight_through: false },
                };
                g.attention(v[0], v[1], v[2], 2, &segs, bias)?
            }
            "pair_kl" => {
                let targets = [
                    PairTarget { first: 0, second: 1, label: [1.0, 0.0] },
                    PairTarget { first: 2, second: 3, label: [5.0 / 6.0, 1.0 / 6.0] },
                    PairTarget { first: 1, second: 3, label: [0.5, 0.5] },
                ];
                return g.pair_kl(v[0], &targets, 2.0);
            }
            other => panic!("unknown op {other}"),
        };
        let (r, c) = g.value(out).dims2()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.weight_seed);
        let w: Vec<T> = (0..r * c).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
        let w = g.constant(Tensor::new([r, c], w)?)?;
        let prod = g.mul(out, w)?;
        g.sum(prod)
    }
}

const OPS: &[&str] = &[
    "matmul",
    "matmul_t",
    "transpose",
    "gelu",
    "sum",
    "mean_rows",
    "add",
    "sub",
    "mul",
    "row_dot",
    "add_row",
    "layer_norm",
    "scale_by",
    "shift_by",
    "gather",
    "concat",
    "slice",
    "softmax",
    "attention",
    "attention_hard_st",
    "attention_soft",
    "pair_kl",
];

#[test]
fn every_op_matches_finite_differences() {
    for (i, &kind) in OPS.iter().enumerate() {
        for seed in 0..3u64 {
            let case = OpCase {
                kind,
                weight_seed: seed * 31 + i as u64,
            };
            let params = case.params();
            let cfg64 = GradCheckConfig {
                probes: 24,
                eps: 1e-5,
                seed,
                ..Default::default()
            };
            let rep = grad_check::<f64, _>(&case, &params, &cfg64).unwrap();
            assert!(rep.max_rel_error < 1e-5, "{kind} f64: {:?}", rep.worst());
            let cfg32 = GradCheckConfig {
                probes: 24,
                eps: 1e-4,
                seed,
                ..Default::default()
            };
            let rep = grad_check::<f32, _>(&case, &params, &cfg32).unwrap();
            assert!(rep.max_rel_error < 1e-3, "{kind} f32: {:?}", rep.worst());
        }
    }
}

#[test]
fn straight_through_uses_soft_bias_surrogate() {
    // One query, three keys, one head; key 1 is dropped (score below tau).
    let build = |bias: &dyn Fn(Var) -> KeyBias<f64>, scores: &[f64]| {
        let mut g = Graph::<f64>::new();
        let q = g.param(Tensor::from_f64_rows(&[&[0.3, -0.2]]).unwrap()).unwrap();
        let k = g
            .param(Tensor::from_f64_rows(&[&[0.5, 0.1], &[-0.4, 0.9], &[0.2, 0.2]]).unwrap())
            .unwrap();
        let v = g
            .param(Tensor::from_f64_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, -1.0]]).unwrap())
            .unwrap();
        let m = g.param(Tensor::from_f64_rows(&[scores]).unwrap()).unwrap();
        let segs = [Segment { queries: 0..1, keys: 0..3 }];
        let out = g.attention(q, k, v, 1, &segs, bias(m)).unwrap();
        let w = g.constant(Tensor::from_f64_rows(&[&[1.0, 2.0]]).unwrap()).unwrap();
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        (g.grad(m).map(<[f64]>::to_vec), g.grad(q).unwrap().to_vec())
    };
    let hard = |st| move |m| KeyBias::Hard { scores: m, tau: 0.0, straight_through: st };
    let soft = |m| KeyBias::Soft { scores: m, lambda: 1.0 };
    for scores in [[0.4, -0.1, 0.2], [-0.4, -0.1, -0.2], [0.5, 0.0, 0.0]] {
        let (gm, gq_st) = build(&hard(true), &scores);
        let (gm_soft, _) = build(&soft, &scores);
        let (gm, gm_soft) = (gm.unwrap(), gm_soft.unwrap());
        for (a, b) in gm.iter().zip(&gm_soft) {
            assert!((a - b).abs() < 1e-15, "{gm:?} vs {gm_soft:?}");
        }
        // Dropped keys still receive gradient, so they can come back.
        assert!(gm.iter().all(|&x| x != 0.0));
        let (gm_off, gq) = build(&hard(false), &scores);
        assert!(gm_off.is_none());
        assert_eq!(gq, gq_st, "the query gradient follows the hard forward pass");
    }
}

/// Hand-rolled single-segment attention: softmax(Q Kᵀ/√d_h + mask) V per head.
fn reference_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    heads: usize,
    keep: &[bool],
) -> Vec<f64> {
    let (nq, d) = q.dims2().unwrap();
    let nk = k.rows();
    let dh = d / heads;
    let mut out = vec![0.0; nq * d];
    for h in 0..heads {
        for i in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|j| {
                    (0..dh).map(|t| q.at(i, h * dh + t) * k.at(j, h * dh + t)).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = (0..nk).filter(|&j| keep[j]).map(|j| logits[j]).fold(f64::MIN, f64::max);
            let e: Vec<f64> = (0..nk)
                .map(|j| if keep[j] { (logits[j] - m).exp() } else { 0.0 })
                .collect();
            let z: f64 = e.iter().sum();
            for t in 0..dh {
                out[i * d + h * dh + t] = (0..nk).map(|j| e[j] / z * v.at(j, h * dh + t)).sum();
            }
        }
    }
    out
}

#[test]
fn fused_attention_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // 2 query rows, 3 keys, one masked key, one head.
    let q = random(&mut rng, 2, 4);
    let k = random(&mut rng, 3, 4);
    let v = random(&mut rng, 3, 4);
    let scores = Tensor::from_f64_rows(&[&[0.5, -0.3, 0.1]]).unwrap();
    let mut g = Graph::<f64>::new();
    let (qv, kv, vv) = (
        g.constant(q.clone()).unwrap(),
        g.constant(k.clone()).unwrap(),
        g.constant(v.clone()).unwrap(),
    );
    let sv = g.constant(scores).unwrap();
    let segs = [Segment { queries: 0..2, keys: 0..3 }];
    let bias = KeyBias::Hard { scores: sv, tau: 0.0, straight_through: true };
    let out = g.attention(qv, kv, vv, 1, &segs, bias).unwrap();
    let expected = reference_attention(&q, &k, &v, 1, &[true, false, true]);
    for (x, y) in g.value(out).data().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-6);
    }
    let probs = &g.attention_probs(out).unwrap()[0];
    assert!(!probs.fallback);
    assert_eq!(probs.probs[1], 0.0);

    // Multi-head, multi-segment against per-segment reference runs.
    let q = random(&mut rng, 7, 8);
    let k = random(&mut rng, 9, 8);
    let v = random(&mut rng, 9, 8);
    let mut g = Graph::<f64>::new();
    let (qv, kv, vv) = (
        g.constant(q.clone()).unwrap(),
        g.constant(k.clone()).unwrap(),
        g.constant(v.clone()).unwrap(),
    );
    let segs = [
        Segment { queries: 0..3, keys: 0..4 },
        Segment { queries: 3..7, keys: 4..9 },
    ];
    let out = g.attention(qv, kv, vv, 4, &segs, KeyBias::None).unwrap();
    for s in &segs {
        let sub = |t: &Tensor<f64>, r: std::ops::Range<usize>| {
            Tensor::new([r.len(), 8], t.data()[r.start * 8..r.end * 8].to_vec()).unwrap()
        };
        let exp = reference_attention(
            &sub(&q, s.queries.clone()),
            &sub(&k, s.keys.clone()),
            &sub(&v, s.keys.clone()),
            4,
            &vec![true; s.keys.len()],
        );
        let got = &g.value(out).data()[s.queries.start * 8..s.queries.end * 8];
        for (x, y) in got.iter().zip(&exp) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn fully_masked_segment_falls_back_to_unmasked() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random(&mut rng, 2, 4);
    let k = random(&mut rng, 3, 4);
    let v = random(&mut rng, 3, 4);
    let run = |bias_val: Option<f64>| {
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (
            g.constant(q.clone()).unwrap(),
            g.constant(k.clone()).unwrap(),
            g.constant(v.clone()).unwrap(),
        );
        let segs = [Segment { queries: 0..2, keys: 0..3 }];
        let bias = match bias_val {
            None => KeyBias::None,
            Some(s) => {
                let sv = g.constant(Tensor::filled([1, 3], s)).unwrap();
                KeyBias::Hard { scores: sv, tau: 0.0, straight_through: true }
            }
        };
        let out = g.attention(qv, kv, vv, 2, &segs, bias).unwrap();
        let fb = g.attention_probs(out).unwrap()[0].fallback;
        (g.value(out).data().to_vec(), fb)
    };
    let (plain, fb_plain) = run(None);
    let (masked, fb) = run(Some(-1.0));
    assert!(fb && !fb_plain);
    assert_eq!(plain, masked);
}
