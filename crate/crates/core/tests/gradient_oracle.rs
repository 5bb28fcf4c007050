//! Every field against central differences of an independently written loss.

mod common;

use common::{oracle_case, ORACLE_KINDS};

const STATES: usize = 100;

fn check(kind: &str) {
    let mut worst = (0.0, 0);
    for i in 0..STATES {
        let p = 2 + i % 9;
        let e = oracle_case(kind, p, 7919 * i as u64 + 17);
        if e > worst.0 {
            worst = (e, p);
        }
    }
    assert!(worst.0 < 1e-6, "{kind}: relative error {:e} at p = {}", worst.0, worst.1);
}

macro_rules! oracle_tests {
    ($($name:ident => $kind:literal),+ $(,)?) => {
        $( #[test] fn $name() { check($kind); } )+

        #[test]
        fn every_kind_is_covered() {
            let listed = [$($kind),+];
            assert_eq!(listed.len(), ORACLE_KINDS.len());
            for k in ORACLE_KINDS {
                assert!(listed.contains(&k), "{k} has no test");
            }
        }
    };
}

oracle_tests! {
    logistic_full => "logistic-full",
    regression_full => "regression-full",
    regression_conditioned => "regression-conditioned",
    kl => "kl",
    elementwise_sigmoid => "elementwise-sigmoid",
    elementwise_relu => "elementwise-relu",
    tied => "tied",
    multirow => "multirow",
    logistic_reduced => "logistic-reduced",
    regression_reduced => "regression-reduced",
    general_norm_exp => "general-norm-exp",
    general_norm_square => "general-norm-square",
    general_norm_identity => "general-norm-identity",
}
