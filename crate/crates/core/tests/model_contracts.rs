mod common;

use cemat::model::{Forward, Padded};
use common::{tiny_model, Fixture};

#[test]
fn causal_and_padding_contracts() {
    let o = common::architecture_contracts(20);
    assert!(o.pass, "{o}");
}

#[test]
fn causal_equals_bidirectional_at_length_one() {
    let p = tiny_model(20, 2);
    let mut f = Forward::new(&p, false, false, 0);
    let enc = f.encode(&Padded::new(&[vec![7u32, 8, 9]])).unwrap();
    let tgt = Padded::new(&[vec![11u32]]);
    let a = f.decode(&tgt, &enc, true).unwrap();
    let b = f.decode(&tgt, &enc, false).unwrap();
    assert_eq!(f.graph.value(a).data(), f.graph.value(b).data());
}

#[test]
fn gradients_match_central_differences() {
    let fx = Fixture::small(1);
    let o = common::grad_check(&fx, 256);
    assert!(o.pass, "{o}");
}
