use proptest::prelude::*;
use stepopsd_core::diag::{check_sign_case, shape_single};
use stepopsd_core::extract::{extract_steps, ExtractionMode, StepSegment};
use stepopsd_core::grpo::{group_advantage, kl_token_penalty};
use stepopsd_core::rescore::GapRecord;
use stepopsd_core::shaping::{
    clip_weight, normalize_equal_step, raw_weight, shape_trajectory, sign, Normalization, ShapingConfig,
    ELIGIBILITY_EPS,
};
use stepopsd_core::trajectory::{Role, TokenRecord, Trajectory};

#[derive(Debug, Clone)]
struct TurnShape {
    obs: usize,
    think: usize,
    action: usize,
    search: bool,
    answer: usize,
}

fn turn_shape() -> impl Strategy<Value = TurnShape> {
    (0usize..4, 0usize..3, 1usize..5, any::<bool>(), 0usize..2).prop_map(|(obs, think, action, search, answer)| {
        TurnShape {
            obs,
            think,
            action,
            search,
            answer,
        }
    })
}

fn push_block(tokens: &mut Vec<TokenRecord>, tag: &str, role: Role, n: usize, turn: u32, lp: &mut impl FnMut() -> f64) {
    tokens.push(TokenRecord::new(format!("<{tag}>"), Role::Structural, lp(), turn));
    for i in 0..n {
        tokens.push(TokenRecord::new(format!("w{i}"), role, lp(), turn));
    }
    tokens.push(TokenRecord::new(format!("</{tag}>"), Role::Structural, lp(), turn));
}

fn build(turns: &[TurnShape], lps: &[f64]) -> Trajectory {
    let mut k = 0;
    let mut lp = || {
        k += 1;
        lps[k % lps.len()]
    };
    let mut tokens = Vec::new();
    tokens.push(TokenRecord::new("<obs>", Role::Observation, 0.0, 0));
    tokens.push(TokenRecord::new("start", Role::Observation, 0.0, 0));
    tokens.push(TokenRecord::new("</obs>", Role::Observation, 0.0, 0));
    for (t, s) in turns.iter().enumerate() {
        let turn = t as u32;
        if s.think > 0 {
            push_block(&mut tokens, "think", Role::Reasoning, s.think, turn, &mut lp);
        }
        let tag = if s.search { "search" } else { "action" };
        push_block(&mut tokens, tag, Role::Action, s.action, turn, &mut lp);
        if s.answer > 0 {
            push_block(&mut tokens, "answer", Role::Answer, s.answer, turn, &mut lp);
        }
        if s.obs > 0 {
            tokens.push(TokenRecord::new("<obs>", Role::Observation, 0.0, turn + 1));
            for _ in 0..s.obs {
                tokens.push(TokenRecord::new("seen", Role::Observation, 0.0, turn + 1));
            }
            tokens.push(TokenRecord::new("</obs>", Role::Observation, 0.0, turn + 1));
        }
    }
    Trajectory {
        id: "p".into(),
        reward: 0.0,
        success: false,
        invalid_action_count: 0,
        tokens,
    }
}

fn trajectory() -> impl Strategy<Value = Trajectory> {
    (
        prop::collection::vec(turn_shape(), 1..7),
        prop::collection::vec(-6.0f64..0.0, 1..16),
    )
        .prop_map(|(t, lps)| build(&t, &lps))
}

fn included(len: usize, segs: &[StepSegment]) -> Vec<bool> {
    let mut out = vec![false; len];
    for s in segs {
        for i in s.included_indices() {
            out[i] = true;
        }
    }
    out
}

fn mean_abs(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x.abs()).sum::<f64>() / xs.len() as f64
}

/// Gaps for every included token, drawn from `deltas` cyclically.
fn gaps_for(segs: &[StepSegment], deltas: &[f64]) -> Vec<Vec<GapRecord>> {
    let mut k = 0;
    segs.iter()
        .map(|s| {
            s.included_indices()
                .map(|index| {
                    let d = deltas[k % deltas.len()];
                    k += 1;
                    GapRecord {
                        index,
                        step: s.step_index,
                        position: index - s.span.start,
                        teacher_logprob: -1.0,
                        student_logprob: -1.0 - d,
                        delta: d,
                    }
                })
                .collect()
        })
        .collect()
}

fn delta() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => -30.0f64..=30.0,
        1 => Just(30.0),
        1 => Just(-30.0),
        1 => Just(0.0),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn extraction_segments_disjoint_sorted_deterministic(t in trajectory()) {
        for mode in [ExtractionMode::ActionOnly, ExtractionMode::CleanStepNoObservation] {
            let segs = extract_steps(&t, mode).unwrap();
            prop_assert_eq!(&segs, &extract_steps(&t, mode).unwrap());
            for (k, s) in segs.iter().enumerate() {
                prop_assert_eq!(s.step_index, k);
                prop_assert_eq!(s.included_mask.len(), s.span.len());
                prop_assert!(s.span.end <= t.len());
                for i in s.included_indices() {
                    prop_assert!(t.tokens[i].role.is_policy());
                }
            }
            for w in segs.windows(2) {
                prop_assert!(w[0].span.end <= w[1].span.start);
            }
        }
    }

    #[test]
    fn action_only_subset_of_clean_step(t in trajectory()) {
        let a = included(t.len(), &extract_steps(&t, ExtractionMode::ActionOnly).unwrap());
        let c = included(t.len(), &extract_steps(&t, ExtractionMode::CleanStepNoObservation).unwrap());
        for (x, y) in a.iter().zip(&c) {
            prop_assert!(!x || *y);
        }
        let actions = t.tokens.iter().filter(|r| r.role == Role::Action).count();
        prop_assert_eq!(a.iter().filter(|&&x| x).count(), actions);
    }

    #[test]
    fn budget_equality_before_clipping(
        t in trajectory(),
        deltas in prop::collection::vec(delta(), 1..40),
        a in prop_oneof![-3.0f64..3.0, Just(0.0)],
    ) {
        let segs = extract_steps(&t, ExtractionMode::CleanStepNoObservation).unwrap();
        let gaps = gaps_for(&segs, &deltas);
        let mods: Vec<Vec<f64>> = gaps
            .iter()
            .map(|g| g.iter().map(|r| raw_weight(sign(a), r.delta) - 1.0).collect())
            .collect();
        let out = normalize_equal_step(&mods);
        let means: Vec<f64> = mods.iter().map(|m| mean_abs(m)).collect();
        let eligible: Vec<usize> = (0..mods.len()).filter(|&k| means[k] >= ELIGIBILITY_EPS).collect();
        let budget = eligible.iter().map(|&k| means[k]).sum::<f64>() / eligible.len().max(1) as f64;
        for k in 0..mods.len() {
            if eligible.contains(&k) {
                prop_assert!((mean_abs(&out[k]) - budget).abs() <= 1e-12);
                for (x, y) in mods[k].iter().zip(&out[k]) {
                    prop_assert!(x.signum() == y.signum() || *x == 0.0);
                }
            } else {
                prop_assert_eq!(&out[k], &mods[k]);
            }
        }
        for (i, &k) in eligible.iter().enumerate() {
            for &j in &eligible[i + 1..] {
                prop_assert!((mean_abs(&out[k]) - mean_abs(&out[j])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pipeline_trust_region_and_sign(
        t in trajectory(),
        deltas in prop::collection::vec(delta(), 1..40),
        a in prop_oneof![-3.0f64..3.0, Just(0.0)],
        lambda in 0.0f64..1.0,
        alpha in 1e-6f64..1.0,
        normalize in any::<bool>(),
    ) {
        let cfg = ShapingConfig {
            lambda_mix_initial: lambda,
            alpha_clip: alpha,
            normalization: if normalize { Normalization::EqualStepMeanAbs } else { Normalization::None },
            ..ShapingConfig::default()
        };
        let segs = extract_steps(&t, ExtractionMode::CleanStepNoObservation).unwrap();
        let gaps = gaps_for(&segs, &deltas);
        let adv: Vec<f64> = t.tokens.iter().map(|r| if r.role.is_policy() { a } else { 0.0 }).collect();
        let shaped = shape_trajectory(&segs, &gaps, &adv, lambda, &cfg, true).unwrap();
        let inc = included(t.len(), &segs);
        for (s, &is_in) in shaped.iter().zip(&inc) {
            prop_assert!(s.w_final >= 1.0 - alpha && s.w_final <= 1.0 + alpha);
            prop_assert!(s.psi > 0.0);
            prop_assert!(s.psi >= 1.0 - lambda * alpha - 1e-12);
            prop_assert_eq!(sign(s.a_shaped), sign(s.a_base));
            prop_assert_eq!(s.a_shaped, s.psi * s.a_base);
            if !is_in {
                prop_assert_eq!(s.psi, 1.0);
                prop_assert!(s.delta.is_none());
            }
        }
        if !normalize {
            return Ok(());
        }
        // Without clipping, the applied weights carry the equal budget too.
        if shaped.iter().all(|s| !s.clipped) {
            let per_step: Vec<Vec<f64>> = gaps
                .iter()
                .map(|g| g.iter().map(|r| shaped[r.index].w_final - 1.0).collect())
                .collect();
            let means: Vec<f64> = per_step.iter().map(|m| mean_abs(m)).filter(|&m| m >= ELIGIBILITY_EPS).collect();
            for m in &means {
                prop_assert!((m - means[0]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_token_sign_and_bound(
        a in prop_oneof![-1e3f64..1e3, Just(0.0), Just(-1.0), Just(1.0)],
        d in delta(),
        lambda in prop_oneof![0.0f64..1.0, Just(0.999)],
        alpha in prop_oneof![1e-9f64..1.0, Just(0.999)],
    ) {
        let c = shape_single(a, d, lambda, alpha);
        prop_assert!(check_sign_case(&c));
        let w = clip_weight(raw_weight(sign(a), d), alpha);
        prop_assert!(w >= 1.0 - alpha && w <= 1.0 + alpha);
        if a == 0.0 {
            prop_assert_eq!(c.a_shaped, 0.0);
        }
    }

    #[test]
    fn magnitude_monotone_in_delta(
        a in prop_oneof![0.01f64..5.0, -5.0f64..-0.01],
        d1 in -30.0f64..30.0,
        d2 in -30.0f64..30.0,
        lambda in 0.0f64..1.0,
        alpha in 0.0f64..1.0,
    ) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let x = shape_single(a, lo, lambda, alpha).a_shaped;
        let y = shape_single(a, hi, lambda, alpha).a_shaped;
        if a > 0.0 {
            prop_assert!(y >= x);
        } else {
            prop_assert!(y.abs() <= x.abs());
        }
    }

    #[test]
    fn group_advantage_standardizes(
        rewards in prop::collection::vec(-1.0f64..2.0, 2..17),
    ) {
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let adv = group_advantage(&rewards).unwrap();
        if std <= 1e-8 {
            prop_assert!(adv.iter().all(|&x| x == 0.0));
            return Ok(());
        }
        let m = adv.iter().sum::<f64>() / n;
        let v = adv.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        prop_assert!(m.abs() <= 1e-6);
        // (std / (std + 1e-8))² deviates from 1 by about 2e-8 / std.
        prop_assert!((v - (std / (std + 1e-8)).powi(2)).abs() <= 1e-9);
        if std >= 2e-2 {
            prop_assert!((v - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn lattice_rewards_unit_variance(
        wins in prop::collection::vec(any::<bool>(), 2..17),
        invalid in prop::collection::vec(0u32..5, 16),
    ) {
        let rewards: Vec<f64> = wins
            .iter()
            .zip(&invalid)
            .map(|(&w, &k)| w as u8 as f64 - 0.1 * k as f64)
            .collect();
        let adv = group_advantage(&rewards).unwrap();
        let n = adv.len() as f64;
        let m = adv.iter().sum::<f64>() / n;
        let v = adv.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        if adv.iter().any(|&x| x != 0.0) {
            prop_assert!(m.abs() <= 1e-6);
            prop_assert!((v - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn k3_non_negative(p in -30.0f64..0.0, r in -30.0f64..0.0) {
        let k = kl_token_penalty(p, r);
        prop_assert!(k >= 0.0);
        prop_assert_eq!(kl_token_penalty(p, p), 0.0);
    }
}
