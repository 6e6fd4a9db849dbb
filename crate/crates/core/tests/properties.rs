use ndarray::Array2;
use packed_he::encode::{self, MatrixShape};
use packed_he::engine::LayoutTag;
use packed_he::matmul;
use packed_he::oracle::oracle_matmul;
use packed_he::serialize;
use packed_he::{Backend, OpMeter, SimEngine};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-50i32..=50, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v.into_iter().map(f64::from).collect()).unwrap())
}

fn pow2(max_log: u32) -> impl Strategy<Value = usize> {
    (0..=max_log).prop_map(|l| 1usize << l)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rotations_compose(log_slots in 1u32..8, a in -300i64..300, b in -300i64..300, seed in any::<u64>()) {
        let e = SimEngine::with_slots(1 << log_slots).unwrap();
        let values: Vec<f64> = (0..e.slots()).map(|i| ((seed >> (i % 60)) & 0xff) as f64 + i as f64).collect();
        let ct = e.enc(&values).unwrap();
        prop_assert_eq!(e.dec(&e.rot(&e.rot(&ct, a), b)), e.dec(&e.rot(&ct, a + b)));
        prop_assert_eq!(e.dec(&e.rot(&ct, e.slots() as i64)), values);
    }

    #[test]
    fn revolver_layout_matches_definition(n in pow2(3), p in pow2(3), reps in 1usize..4) {
        let b = Array2::from_shape_fn((n, p), |(i, j)| (i * 10 + j) as f64);
        let rows = p * reps;
        let e = SimEngine::with_slots((rows * n).next_power_of_two().max(2)).unwrap();
        let pm = encode::encode_tau_b(&e, &b, rows).unwrap();
        let slots = e.dec(&pm.ct);
        for k in 0..rows * n {
            prop_assert_eq!(slots[k], b[[k % n, (k / n) % p]]);
        }
    }

    #[test]
    fn padded_products_match_reference(m in 1usize..7, n in 1usize..7, p in 1usize..7, seed in any::<u64>()) {
        let a = Array2::from_shape_fn((m, n), |(i, j)| ((seed >> ((i * 7 + j) % 50)) & 0xf) as f64 - 7.0);
        let b = Array2::from_shape_fn((n, p), |(i, j)| ((seed >> ((i * 5 + j * 3) % 50)) & 0x7) as f64 - 3.0);
        let e = SimEngine::with_slots(1024).unwrap();
        let (ca, cb, _) = matmul::prepare_operands(&e, &a, &b).unwrap();
        let got = matmul::decode_block(&e, &matmul::matmul(&e, &ca, &cb).unwrap(), m, p);
        prop_assert_eq!(got, oracle_matmul(&a, &b).unwrap());
    }

    #[test]
    fn row_major_round_trip(rows in 1usize..9, cols in 1usize..9, m in matrix(8, 8)) {
        let e = SimEngine::with_slots(128).unwrap();
        let sub = m.slice(ndarray::s![..rows, ..cols]).to_owned();
        let pm = encode::encode_db(&e, &sub, MatrixShape::new(rows, cols)).unwrap();
        prop_assert_eq!(encode::decode(&e, &pm), sub);
    }

    #[test]
    fn meter_merge_is_commutative(a in any::<[u16; 6]>(), b in any::<[u16; 6]>()) {
        let meter = |v: [u16; 6]| OpMeter {
            add_count: v[0].into(),
            mul_count: v[1].into(),
            cmul_count: v[2].into(),
            rot_count: v[3].into(),
            enc_count: v[4].into(),
            max_depth: v[5].into(),
        };
        prop_assert_eq!(meter(a).merge(&meter(b)), meter(b).merge(&meter(a)));
        prop_assert_eq!(meter(a).merge(&OpMeter::default()), meter(a));
    }

    #[test]
    fn ciphertext_files_round_trip(values in proptest::collection::vec(any::<f64>(), 1..64), depth in 0usize..5) {
        let e = SimEngine::with_slots(64).unwrap();
        let mut ct = e.enc(&values).unwrap();
        for _ in 0..depth {
            ct = e.cmul(&packed_he::PlainMask::constant(vec![1.0; 64]), &ct).unwrap();
        }
        let ct = ct.with_layout(LayoutTag::Matrix { rows: 8, cols: 8 });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.SIMULATED.ct");
        serialize::write_ciphertext(&path, &ct).unwrap();
        let back = serialize::read_ciphertext(&path).unwrap();
        prop_assert_eq!(back.depth(), depth);
        prop_assert_eq!(back.layout(), ct.layout());
        let bits = |c: &packed_he::Ciphertext| c.raw_slots().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&ct));
    }
}
