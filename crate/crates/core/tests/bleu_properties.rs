mod common;

use cemat::eval::bleu;
use proptest::prelude::*;

#[test]
fn bleu_oracles() {
    let o = common::bleu_oracles();
    assert!(o.pass, "{o}");
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 1..12)
        .prop_map(|w| w.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn invariant_to_pair_order(
        pairs in prop::collection::vec((sentence(), sentence()), 1..8),
        seed in any::<u64>(),
        smooth in any::<bool>(),
    ) {
        let hyps: Vec<String> = pairs.iter().map(|p| p.0.join(" ")).collect();
        let refs: Vec<String> = pairs.iter().map(|p| p.1.join(" ")).collect();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by_key(|&i| cemat::seed::derive(&[seed, i as u64]));
        let ph: Vec<&String> = order.iter().map(|&i| &hyps[i]).collect();
        let pr: Vec<&String> = order.iter().map(|&i| &refs[i]).collect();
        let a = bleu(&hyps, &refs, smooth).unwrap();
        let b = bleu(&ph, &pr, smooth).unwrap();
        prop_assert_eq!(a.matches, b.matches);
        prop_assert_eq!(a.totals, b.totals);
        prop_assert_eq!(a.bleu.to_bits(), b.bleu.to_bits());
        prop_assert!((0.0..=100.0).contains(&a.bleu));
    }

    #[test]
    fn contiguous_slice_of_reference_has_full_precision(
        r in sentence(),
        start in 0usize..12,
        len in 4usize..12,
    ) {
        let start = start.min(r.len() - 1);
        let end = (start + len).min(r.len());
        prop_assume!(end - start >= 4);
        let hyp = r[start..end].join(" ");
        let b = bleu(&[hyp], &[r.join(" ")], false).unwrap();
        prop_assert_eq!(b.precisions, [1.0; 4]);
        let bp = (1.0 - r.len() as f64 / (end - start) as f64).exp().min(1.0);
        prop_assert!((b.bleu - 100.0 * bp).abs() < 1e-9);
    }
}
