use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xpeft::adapter::mask::{hard_row_weights, topk_indices};
use xpeft::codec::bits::BitMatrix;
use xpeft::codec::profile::{HeadPayload, MaskMode, ProfileRecord};
use xpeft::Tape64;

/// Hand-derived gradient of `sum(g · softmax(z / tau))` with respect to `z`.
fn softmax_grad(z: &[f64], g: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - max) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    let y: Vec<f64> = e.iter().map(|v| v / total).collect();
    let dot: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
    y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot) / tau).collect()
}

fn triple() -> impl Strategy<Value = (Vec<f64>, usize, f64, Vec<f64>)> {
    (1usize..=40).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            1..=n,
            0.1f64..5.0,
            prop::collection::vec(-1.0f64..1.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hard_topk_forward_and_straight_through_gradient((z, k, tau, g) in triple()) {
        let n = z.len();
        let mut tape = Tape64::new();
        let x = tape.variable(vec![n], z.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = hard_row_weights(&mut tape, x, k, tau, 0.0, &mut rng).unwrap();

        let values = tape.value(y).to_vec();
        let nonzero: Vec<usize> = (0..n).filter(|&i| values[i] != 0.0).collect();
        prop_assert_eq!(nonzero.len(), k);
        for &i in &nonzero {
            prop_assert!((values[i] - 1.0 / k as f64).abs() <= 1e-6);
        }
        prop_assert_eq!(nonzero, topk_indices(&z, k));

        let w = tape.constant(vec![n], g.clone()).unwrap();
        let prod = tape.mul(y, w).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let expected = softmax_grad(&z, &g, tau);
        for (a, e) in tape.grad(x).unwrap().iter().zip(&expected) {
            prop_assert!((a - e).abs() <= 1e-6, "{} vs {}", a, e);
        }
    }

    #[test]
    fn noisy_selection_repeats_under_a_seed((z, k, tau, _g) in triple(), seed in any::<u64>(), nu in 0.1f64..2.0) {
        let run = || {
            let mut tape = Tape64::new();
            let x = tape.constant(vec![z.len()], z.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = hard_row_weights(&mut tape, x, k, tau, nu, &mut rng).unwrap();
            tape.value(y).to_vec()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

fn record() -> impl Strategy<Value = ProfileRecord> {
    (1usize..=64, 1usize..=4, 1usize..=4, any::<bool>(), any::<bool>(), "[a-z0-9_]{1,12}").prop_flat_map(
        |(n, l, b, hard, with_head, id)| {
            let k = 1..=n;
            let seeds = any::<(u64, u64)>();
            let logits = prop::collection::vec(any::<f32>(), 2 * n * l);
            let ln = prop::collection::vec(any::<f32>(), 2 * l * b);
            let head = prop::collection::vec(any::<f32>(), if with_head { 3 * 4 + 3 } else { 0 });
            (Just((n, l, b, hard, with_head, id)), k, seeds, logits, ln, head).prop_map(
                |((n, l, b, hard, with_head, id), k, seeds, logits, ln, head)| {
                    let head = with_head.then_some(HeadPayload { classes: 3, values: head });
                    if hard {
                        // two independent k-hot selections per row
                        let pick = |seed: u64| -> Vec<Vec<usize>> {
                            (0..l)
                                .map(|r| {
                                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
                                    rand::seq::index::sample(&mut rng, n, k).into_vec()
                                })
                                .collect()
                        };
                        let a = BitMatrix::from_rows(n, &pick(seeds.0));
                        let bm = BitMatrix::from_rows(n, &pick(seeds.1));
                        ProfileRecord::hard(id, k, &a, &bm, b, ln, head).unwrap()
                    } else {
                        let (la, lb) = logits.split_at(n * l);
                        ProfileRecord::soft(id, n, l, la, lb, b, ln, head).unwrap()
                    }
                },
            )
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn records_round_trip_bitwise(rec in record()) {
        let bytes = rec.encode().unwrap();
        let back = ProfileRecord::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &rec);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn truncated_records_are_rejected(rec in record(), cut in any::<prop::sample::Index>()) {
        let bytes = rec.encode().unwrap();
        let cut = cut.index(bytes.len());
        prop_assert!(ProfileRecord::decode(&bytes[..cut]).is_err());
    }
}

#[test]
fn hard_payload_sizes_exhaustive() {
    for n in 1..=257usize {
        for l in [1usize, 3, 12] {
            let rows: Vec<Vec<usize>> = (0..l).map(|r| vec![r % n]).collect();
            let bits = BitMatrix::from_rows(n, &rows);
            let b = 2;
            let rec = ProfileRecord::hard("p", 1, &bits, &bits, b, vec![0.0; 2 * l * b], None).unwrap();
            let expected = 2 * n.div_ceil(8) * l;
            assert_eq!(rec.mask_payload.len(), expected, "N={n} L={l}");
            assert_eq!(ProfileRecord::mask_len(MaskMode::Hard, n, l) * 2, expected);
            // magic, version, id length, id, mode, four dims, masks, LN, head flag
            let fixed = 4 + 4 + 4 + 1 + 1 + 16 + 4 * 2 * l * b + 1;
            assert_eq!(rec.encode().unwrap().len(), fixed + expected, "N={n} L={l}");
        }
    }
}
