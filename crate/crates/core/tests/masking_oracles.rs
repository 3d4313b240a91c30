mod common;

use common::Fixture;

#[test]
fn dual_masking_statistics() {
    let fx = Fixture::small(2);
    let o = common::masking_stats(&fx, 20_000, 5_000);
    assert!(o.pass, "{o}");
}

#[test]
fn code_switching_is_exact() {
    let fx = Fixture::small(3);
    let o = common::cs_exactness(&fx, 10_000);
    assert!(o.pass, "{o}");
}
