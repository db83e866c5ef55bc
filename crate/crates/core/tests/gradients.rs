use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepopsd_core::env::{Environment, LatchWorld};
use stepopsd_core::policy::{features, grad_logprob, log_prob, masked_log_probs, PolicyInput, PolicyParams, SparseGrad};
use stepopsd_core::trajectory::Role;
use stepopsd_core::vocab::{ContextToken, TokenId};

const DIM: usize = 64;

fn random_params(rng: &mut ChaCha8Rng, scale: f64) -> PolicyParams {
    let env = LatchWorld::default();
    let mut p = PolicyParams::zeros(env.vocab(), DIM, rng.random(), 1.0).unwrap();
    for w in p.weights_mut() {
        *w = rng.random_range(-scale..scale);
    }
    p
}

fn random_context(rng: &mut ChaCha8Rng, v: usize, params: &PolicyParams) -> (Vec<ContextToken>, u32) {
    let turn = rng.random_range(0..4u32);
    let mut ctx = Vec::new();
    if rng.random_bool(0.3) {
        let words = params.vocab();
        let open = words.iter().position(|w| w == "<hindsight>").unwrap() as u16;
        let close = words.iter().position(|w| w == "</hindsight>").unwrap() as u16;
        ctx.push(ContextToken { id: TokenId(open), role: Role::Structural, turn: 0 });
        for _ in 0..rng.random_range(1..6) {
            let id = TokenId(rng.random_range(0..v as u16));
            ctx.push(ContextToken { id, role: Role::Action, turn });
        }
        ctx.push(ContextToken { id: TokenId(close), role: Role::Structural, turn: 0 });
    }
    for _ in 0..rng.random_range(0..12) {
        let role = if rng.random_bool(0.5) { Role::Action } else { Role::Observation };
        ctx.push(ContextToken { id: TokenId(rng.random_range(0..v as u16)), role, turn });
    }
    (ctx, turn)
}

fn random_allowed(rng: &mut ChaCha8Rng, v: usize, token: TokenId) -> Option<Vec<TokenId>> {
    if rng.random_bool(0.5) {
        return None;
    }
    let mut a: Vec<TokenId> = (0..v as u16).map(TokenId).filter(|&t| t == token || rng.random_bool(0.4)).collect();
    if a.len() == 1 {
        a.push(TokenId(((token.0 as usize + 1) % v) as u16));
        a.sort();
    }
    Some(a)
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let mut params = random_params(&mut rng, 0.5);
        let v = params.vocab_size();
        let (ctx, turn) = random_context(&mut rng, v, &params);
        let token = TokenId(rng.random_range(0..v as u16));
        let allowed = random_allowed(&mut rng, v, token);
        let input = PolicyInput { context: &ctx, turn };
        let g = grad_logprob(&params, input, token, allowed.as_deref()).unwrap();
        let mut rows = features(&params, input).rows;
        rows.sort_unstable();
        rows.dedup();
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for &r in &rows {
            for c in 0..v {
                let k = r as usize * v + c;
                let w0 = params.weights()[k];
                params.weights_mut()[k] = w0 + h;
                let up = log_prob(&params, input, token, allowed.as_deref()).unwrap();
                params.weights_mut()[k] = w0 - h;
                let down = log_prob(&params, input, token, allowed.as_deref()).unwrap();
                params.weights_mut()[k] = w0;
                let fd = (up - down) / (2.0 * h);
                let an = g.get(r as usize, c);
                assert!((an - fd).abs() <= 1e-7, "case {case} row {r} col {c}: {an} vs {fd}");
                diff2 += (an - fd) * (an - fd);
                norm2 += fd * fd;
            }
        }
        let rel = (diff2 / norm2).sqrt();
        assert!(rel <= 1e-5, "case {case}: relative error {rel}");
        worst = worst.max(rel);
        let touched: Vec<u32> = g.rows.keys().copied().collect();
        assert_eq!(touched, rows, "gradient must be sparse in the active rows");
    }
    println!("worst relative error over 100 cases: {worst:e}");
}

fn sample(rng: &mut ChaCha8Rng, allowed: &[TokenId], lps: &[f64]) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (t, lp) in allowed.iter().zip(lps) {
        acc += lp.exp();
        if u < acc {
            return *t;
        }
    }
    *allowed.last().unwrap()
}

#[test]
fn score_function_has_zero_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5c0e);
    let n = 100_000;
    for _ in 0..3 {
        let params = random_params(&mut rng, 1.0);
        let v = params.vocab_size();
        let (ctx, turn) = random_context(&mut rng, v, &params);
        let input = PolicyInput { context: &ctx, turn };
        let allowed: Vec<TokenId> = (0..v as u16).map(TokenId).collect();
        let lps = masked_log_probs(&params, input, &allowed);

        // Exact expectation.
        let mut exact = SparseGrad::new();
        for (t, lp) in allowed.iter().zip(&lps) {
            exact.add_scaled(&grad_logprob(&params, input, *t, None).unwrap(), lp.exp());
        }
        assert!(exact.rows.values().flatten().all(|x| x.abs() < 1e-12));

        // Monte-Carlo along a fixed random direction.
        let row = *features(&params, input).rows.first().unwrap();
        let dir: Vec<f64> = (0..v).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let y = sample(&mut rng, &allowed, &lps);
            let g = grad_logprob(&params, input, y, None).unwrap();
            let s: f64 = g.rows[&row].iter().zip(&dir).map(|(a, b)| a * b).sum();
            sum += s;
            sum2 += s * s;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(se > 0.0);
        assert!(mean.abs() <= 3.0 * se, "mean {mean} exceeds 3 SE ({se})");
    }
}

#[test]
fn gradient_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = random_params(&mut rng, 0.5);
    let (ctx, turn) = random_context(&mut rng, params.vocab_size(), &params);
    let input = PolicyInput { context: &ctx, turn };
    let a = grad_logprob(&params, input, TokenId(2), None).unwrap();
    let b = grad_logprob(&params, input, TokenId(2), None).unwrap();
    assert_eq!(a, b);
}
