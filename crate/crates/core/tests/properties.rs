use cammac::scenegen::{
    generate_from_seed, read_dataset_from, reanswer, write_dataset_to, DatasetHeader,
};
use cammac::{Dataset, GenConfig, Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |data| Tensor::new(vec![rows, cols], data).unwrap())
}

fn product_operands() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    (1usize..7, 1usize..10, 1usize..7).prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_dialogs_replay_to_their_labels(seed in any::<u64>()) {
        let cfg = GenConfig::default();
        if let Some(record) = generate_from_seed(&cfg, seed).unwrap() {
            let labels: Vec<String> = record.turns.iter().map(|t| t.answer.clone()).collect();
            prop_assert_eq!(reanswer(&record).unwrap(), labels);
        }
    }

    #[test]
    fn datasets_survive_a_write_read_cycle(seed in any::<u64>()) {
        let cfg = GenConfig::default();
        let ds = Dataset {
            header: DatasetHeader::new(cfg.clone()),
            records: generate_from_seed(&cfg, seed).unwrap().into_iter().collect(),
        };
        let mut buf = Vec::new();
        write_dataset_to(&ds, &mut buf).unwrap();
        let back = read_dataset_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back.header, ds.header);
        prop_assert_eq!(back.records, ds.records);
    }

    #[test]
    fn transposed_product_is_bitwise_the_product_of_transposes((a, b) in product_operands()) {
        let mut t = Tape::<f64>::new();
        let (a, b) = (t.constant(a), t.constant(b));
        let ab = t.matmul(a, b).unwrap();
        let lhs = t.transpose(ab).unwrap();
        let (at, bt) = (t.transpose(a).unwrap(), t.transpose(b).unwrap());
        let rhs = t.matmul(bt, at).unwrap();
        prop_assert_eq!(t.value(lhs).shape(), t.value(rhs).shape());
        prop_assert_eq!(t.value(lhs).data(), t.value(rhs).data());
    }

    #[test]
    fn product_gradient_is_row_sums_of_the_other_factor((a, b) in product_operands()) {
        let (k, n) = (b.shape()[0], b.shape()[1]);
        let m = a.shape()[0];
        let row_sums: Vec<f64> = b.data().chunks(n).map(|r| r.iter().sum()).collect();
        let mut t = Tape::<f64>::new();
        let (av, bv) = (t.param(a), t.constant(b));
        let ab = t.matmul(av, bv).unwrap();
        let loss = t.sum(ab).unwrap();
        let grads = t.backward(loss).unwrap();
        let g = grads.get(av).unwrap();
        prop_assert_eq!(g.shape(), &[m, k][..]);
        for row in g.data().chunks(k) {
            for (x, y) in row.iter().zip(&row_sums) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in matrix(3, 7)) {
        let mut t = Tape::<f64>::new();
        let v = t.constant(x);
        let s = t.softmax(v).unwrap();
        for row in t.value(s).data().chunks(7) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
