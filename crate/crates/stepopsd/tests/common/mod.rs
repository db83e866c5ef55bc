#![allow(dead_code)]

use proptest::prelude::*;
use stepopsd_core::trajectory::{Role, TokenRecord, Trajectory};
use stepopsd_core::RolloutGroup;

pub fn role() -> impl Strategy<Value = Role> {
    prop_oneof![
        Just(Role::Observation),
        Just(Role::Action),
        Just(Role::Reasoning),
        Just(Role::Answer),
        Just(Role::Structural),
    ]
}

pub fn logprob() -> impl Strategy<Value = f64> {
    prop_oneof![
        6 => -60.0f64..=0.0,
        1 => Just(0.0),
        1 => Just(-30.0),
        1 => -1e-300f64..0.0,
    ]
}

pub fn token() -> impl Strategy<Value = (String, Role, f64, u32)> {
    ("\\PC{0,8}", role(), logprob(), 0u32..3)
}

pub fn trajectory() -> impl Strategy<Value = Trajectory> {
    (
        "\\PC{0,12}",
        any::<bool>(),
        -2.0f64..0.0,
        0u32..6,
        prop::collection::vec(token(), 1..24),
    )
        .prop_map(|(id, success, fail_reward, invalid, raw)| {
            let mut turn = 0;
            let tokens = raw
                .into_iter()
                .map(|(text, role, lp, step)| {
                    turn += step;
                    TokenRecord::new(text, role, lp, turn)
                })
                .collect();
            Trajectory {
                id,
                reward: if success { 1.0 } else { fail_reward },
                success,
                invalid_action_count: invalid,
                tokens,
            }
        })
}

/// Valid rollout groups with arbitrary text, including quotes and escapes.
pub fn group() -> impl Strategy<Value = RolloutGroup> {
    ("\\PC{0,16}", "\\PC{0,40}", prop::collection::vec(trajectory(), 2..6)).prop_map(
        |(group_id, prompt, members)| RolloutGroup {
            group_id,
            prompt,
            members,
        },
    )
}
