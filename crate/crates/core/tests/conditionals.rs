mod common;

use common::{conditional_spreads, toy_sample, warm_state};
use ftsgc_core::model::ModelSpec;

#[test]
fn every_full_conditional_matches_the_joint_up_to_a_constant() {
    let data = toy_sample(5, 4, 21);
    for spec in [ModelSpec::unrestricted(), ModelSpec::restricted()] {
        let (sampler, state) = warm_state(&data, &spec, 3, 4);
        for (block, dev) in conditional_spreads(&sampler, &state, 3, 8) {
            println!("{block}: {dev:.3e}");
            assert!(dev < 1e-6, "{block}: deviation {dev}");
        }
    }
}
