//! Property tests over the container format, glob filtering, and the
//! recomposition arithmetic.

use std::collections::BTreeMap;

use proptest::prelude::*;

use readapt_core::arith::{extract_readapter, readapt, AdapterSource, PartialAdaptation, ReAdapter};
use readapt_core::checkpoint::{align_keys, filter_keys, Checkpoint, FilterMode};
use readapt_core::Tensor;

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..5)
        .prop_flat_map(|(rows, cols)| {
            proptest::collection::vec(-1.0e3f32..1.0e3, rows * cols)
                .prop_map(move |data| Tensor::new(vec![rows, cols], data).unwrap())
        })
}

fn name_strategy() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-z]{1,6}(\\.[a-z]{1,4}){0,2}").unwrap()
}

fn checkpoint_strategy() -> impl Strategy<Value = Checkpoint> {
    (
        proptest::collection::btree_map(name_strategy(), tensor_strategy(), 0..8),
        proptest::collection::btree_map("[a-z]{1,8}", "[ -~]{0,12}", 0..4),
    )
        .prop_map(|(tensors, metadata)| {
            let mut ckpt = Checkpoint::new();
            for (name, tensor) in tensors {
                ckpt.insert(name, tensor).unwrap();
            }
            for (k, v) in metadata {
                ckpt.set_metadata(k, v);
            }
            ckpt
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Save then load reproduces the checkpoint bit for bit, and serialized
    /// bytes are a pure function of content.
    #[test]
    fn container_round_trip(ckpt in checkpoint_strategy()) {
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert!(back.bit_eq(&ckpt));
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    /// keep(P) and drop(P) partition the tensor set for any pattern list.
    #[test]
    fn filter_partitions(
        ckpt in checkpoint_strategy(),
        patterns in proptest::collection::vec("[a-z.*]{1,8}", 1..4),
    ) {
        let keep = filter_keys(&ckpt, &patterns, FilterMode::Keep).unwrap();
        let drop = filter_keys(&ckpt, &patterns, FilterMode::Drop).unwrap();
        prop_assert_eq!(keep.len() + drop.len(), ckpt.len());
        for name in ckpt.names() {
            prop_assert!(keep.contains(name) != drop.contains(name));
        }
    }

    /// The four alignment lists are disjoint and cover both name sets.
    #[test]
    fn alignment_partitions(a in checkpoint_strategy(), b in checkpoint_strategy()) {
        let al = align_keys(&a, &b);
        let mut seen = std::collections::BTreeSet::new();
        for name in al.shared.iter().chain(&al.only_a).chain(&al.only_b).chain(&al.shape_mismatch) {
            prop_assert!(seen.insert(name.clone()), "{} appears twice", name);
        }
        let union: std::collections::BTreeSet<String> = a
            .names()
            .chain(b.names())
            .map(|s| s.to_string())
            .collect();
        prop_assert_eq!(seen, union);
    }

    /// Recomposing the extracted delta at beta = 1 reconstructs the
    /// fine-tuned weights, and alpha = beta = 0 is bit-exact neutral.
    #[test]
    fn reconstruction_and_neutrality(
        base in checkpoint_strategy().prop_filter("non-empty", |c| !c.is_empty()),
        alpha in -2.0f32..2.0,
        offsets in proptest::collection::vec(-10.0f32..10.0, 64),
    ) {
        // derive a fine-tuned variant by shifting every element
        let mut ft = Checkpoint::new();
        for (i, (name, t)) in base.tensors().enumerate() {
            let off = offsets[i % offsets.len()];
            let data: Vec<f32> = t.data().iter().map(|v| v + off).collect();
            ft.insert(name.to_string(), Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
        }
        let delta = extract_readapter(&ft, &base).unwrap();
        let empty = ReAdapter::new(AdapterSource::Knowledge);
        let rebuilt = readapt(&base, &empty, &delta, PartialAdaptation { alpha, beta: 1.0 }).unwrap();
        for (name, t) in rebuilt.tensors() {
            let want = ft.get(name).unwrap();
            for (x, y) in t.data().iter().zip(want.data()) {
                prop_assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
        }
        let neutral = readapt(&base, &empty, &delta, PartialAdaptation { alpha: 0.0, beta: 0.0 }).unwrap();
        prop_assert!(neutral.bit_eq(&base));
    }

    /// Metadata survives the container format exactly.
    #[test]
    fn metadata_round_trip(meta in proptest::collection::btree_map("[a-z]{1,8}", "[ -~]{0,16}", 0..6)) {
        let mut ckpt = Checkpoint::new();
        for (k, v) in &meta {
            ckpt.set_metadata(k.clone(), v.clone());
        }
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        let got: BTreeMap<String, String> = back.metadata().clone();
        prop_assert_eq!(got, meta);
    }
}
