use proptest::prelude::*;

use noisetrap::theory::{
    eta, exact_ntp_loss, f_epsilon, f_prime, k_from_losses, lemma1_check, optimal_model, DiscreteJoint, ModelTable, PropositionParams,
    OPTIMAL_FLOOR,
};

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// Joint on `x × v` cells with mass only on prefixes `lo..hi`.
fn joint_on(x: usize, v: usize, lo: usize, hi: usize, weights: &[f64]) -> DiscreteJoint {
    let mut table = vec![0.0; x * v];
    for p in lo..hi {
        for w in 0..v {
            table[p * v + w] = weights[p * v + w];
        }
    }
    DiscreteJoint::new(x, v, normalized(&table)).unwrap()
}

fn model(x: usize, v: usize, weights: &[f64]) -> ModelTable {
    ModelTable::new(v, (0..x).map(|p| Some(normalized(&weights[p * v..(p + 1) * v]))).collect()).unwrap()
}

/// `(|X|, V, split, joint weights, model weights)` with disjoint clean and noise prefixes.
fn instance() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (2usize..=6, 2usize..=8).prop_flat_map(|(x, v)| {
        (Just(x), Just(v), 1..x, prop::collection::vec(0.01f64..1.0, x * v), prop::collection::vec(0.01f64..1.0, x * v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mixture_loss_splits((x, v, split, jw, hw) in instance(), alpha in 0.0f64..=1.0) {
        let pc = joint_on(x, v, 0, split, &jw);
        let pn = joint_on(x, v, split, x, &jw);
        let r = lemma1_check(&pc, &pn, alpha, &model(x, v, &hw)).unwrap();
        prop_assert!(r.residual <= 1e-12, "residual {}", r.residual);
    }

    #[test]
    fn conditional_model_is_optimal((x, v, _split, jw, hw) in instance()) {
        let p = DiscreteJoint::new(x, v, normalized(&jw)).unwrap();
        let best = exact_ntp_loss(&p, &optimal_model(&p, OPTIMAL_FLOOR)).unwrap();
        let other = exact_ntp_loss(&p, &model(x, v, &hw)).unwrap();
        prop_assert!(best <= other + 1e-12, "{best} > {other}");
    }

    #[test]
    fn uniform_model_loss_is_ln_v((x, v, _split, jw, _hw) in instance()) {
        let p = DiscreteJoint::new(x, v, normalized(&jw)).unwrap();
        let l = exact_ntp_loss(&p, &ModelTable::uniform(x, v)).unwrap();
        prop_assert!((l - (v as f64).ln()).abs() < 1e-12);
    }

    // f is concave with f(0) = 0 and its peak at eta, so the slope at zero
    // has the sign of eta and f is non-negative between 0 and eta.
    #[test]
    fn slope_at_zero_follows_eta(alpha in 0.001f64..0.999, p_c in 0.001f64..1.0, p_n in 1e-6f64..1.0, k in 0.01f64..1e4) {
        let pp = PropositionParams::new(alpha, p_c, p_n, k);
        let e = eta(alpha, p_c, p_n, k);
        let slope = f_prime(&pp);
        prop_assert!(slope.signum() == e.signum() || e.abs() < 1e-12 || slope.abs() < 1e-9);
        let scale = 1.0 / (p_c + k * p_n);
        prop_assert!(f_prime(&pp.with_epsilon(e)).abs() <= 1e-9 * scale / alpha.min(1.0 - alpha), "slope at eta {}", f_prime(&pp.with_epsilon(e)));
        if e > 0.0 {
            let f = f_epsilon(&pp.with_epsilon(e / 2.0)).unwrap();
            prop_assert!(f >= -1e-15, "f(eta/2) = {f}");
        }
    }

    #[test]
    fn k_recovered_from_losses(pc_star in 0.05f64..0.95, pn_star in 1e-4f64..0.5, eps_frac in 0.01f64..0.9, k in 0.5f64..1e3) {
        let eps = eps_frac * pc_star;
        let pn = pn_star + eps / k;
        prop_assume!(pn < 1.0);
        let est = k_from_losses(-pc_star.ln(), -(pc_star - eps).ln(), -pn_star.ln(), -pn.ln()).unwrap();
        prop_assert!((est.k - k).abs() / k < 1e-6, "k {} vs {k}", est.k);
        prop_assert!(est.exp_lower_bound <= est.k * (1.0 + 1e-9));
    }
}
