use contrastive_dynamics::infinite_width::{
    closed_forms, convergence_order, gronwall_verify, hyperbolic_identity, integrate_iw, iw_rates,
    GronwallWitness, InfiniteWidthState, Temperature,
};

const UNIT: Temperature = Temperature::Constant { tau_sq: 1.0 };

fn state(kappa: &[f64], hat: &[f64]) -> InfiniteWidthState {
    InfiniteWidthState::new(kappa.to_vec(), hat.to_vec()).unwrap()
}

/// The rate formulas written out per coordinate from their definitions.
fn rates_by_hand(s: &InfiniteWidthState, sigma: &[f64], tau_sq: f64, k: f64) -> (Vec<f64>, Vec<f64>) {
    let r = s.kappa_sq.len();
    let norm: f64 = s.kappa_sq.iter().sum();
    let hat_norm: f64 = s.hat_kappa_sq.iter().sum();
    let t: Vec<f64> = (0..r).map(|p| (tau_sq * s.hat_kappa_sq[p] / norm).tanh()).collect();
    let zc: f64 = (0..r).map(|p| (tau_sq * s.hat_kappa_sq[p] / norm).cosh()).product();
    let t_tilde: f64 = (0..r).map(|p| s.hat_kappa_sq[p] / norm * t[p]).sum();
    let e = (tau_sq * hat_norm / norm).exp();
    let s_tilde = e / (e + k * zc);
    let mut dk = vec![0.0; r];
    let mut dh = vec![0.0; r];
    for p in 0..r {
        let kp = s.kappa_sq[p] / norm;
        let hp = s.hat_kappa_sq[p] / norm;
        let first = hp - (hat_norm / norm) * kp;
        let second = hp * t[p] - kp * t_tilde;
        dk[p] = 4.0 * (1.0 - s_tilde) * first * sigma[p] - 4.0 * (1.0 - s_tilde) * second * sigma[p];
        let first = kp - (hat_norm / norm) * hp;
        let second = kp * t[p] - hp * t_tilde;
        dh[p] = 4.0 * (1.0 - s_tilde) * first * sigma[p] - 4.0 * (1.0 - s_tilde) * second * sigma[p];
    }
    (dk, dh)
}

#[test]
fn rates_match_independent_algebra() {
    let s = state(&[0.9, 1.7, 0.4], &[0.5, -0.2, 0.39]);
    let sigma = [1.0, 2.0, 0.5];
    for (tau_sq, k) in [(1.0, 1.0), (0.01, 5.0), (2.0, 0.3)] {
        let (a, b) = iw_rates(&s, &sigma, tau_sq, k).unwrap();
        let (c, d) = rates_by_hand(&s, &sigma, tau_sq, k);
        for p in 0..3 {
            assert!((a[p] - c[p]).abs() < 1e-12 && (b[p] - d[p]).abs() < 1e-12);
        }
    }
}

#[test]
fn fixed_point_is_constant() {
    let s = state(&[0.5; 3], &[0.5; 3]);
    let tr = integrate_iw(&s, &[1.0; 3], 1.0, UNIT, 0.1, 20.0).unwrap();
    for st in &tr.states {
        for (x, y) in st.kappa_sq.iter().chain(&st.hat_kappa_sq).zip(s.kappa_sq.iter().chain(&s.hat_kappa_sq)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn fourth_order_convergence() {
    let s = state(&[1.0, 2.5, 0.6], &[0.4, 1.0, 0.1]);
    let order = convergence_order(&s, &[1.0, 1.5, 0.8], 1.0, UNIT, 0.4, 8.0).unwrap();
    assert!((order - 4.0).abs() < 0.3, "observed order {order}");
}

#[test]
fn nearly_aligned_state_aligns_monotonically() {
    let kappa = [1.0, 1.3, 0.8, 1.1];
    let hat: Vec<f64> = kappa.iter().map(|k| 0.9 * k).collect();
    let tr = integrate_iw(&state(&kappa, &hat), &[1.0; 4], 1.0, UNIT, 0.05, 60.0).unwrap();
    let gap = |s: &InfiniteWidthState, p: usize| 1.0 - s.hat_kappa_sq[p] / s.kappa_sq[p];
    for p in 0..4 {
        for w in tr.states.windows(2) {
            assert!(gap(&w[1], p) <= gap(&w[0], p) + 1e-15);
        }
        assert!(gap(tr.last(), p) < 0.1 * gap(&tr.states[0], p));
    }
}

#[test]
fn aligned_state_pushes_toward_average() {
    let kappa = [0.5, 1.0, 2.0, 1.2];
    let s = state(&kappa, &kappa);
    let cf = closed_forms(&s, 1.0, 1.0).unwrap();
    let (dk, _) = iw_rates(&s, &[1.0; 4], 1.0, 1.0).unwrap();
    for p in 0..4 {
        let expect = -(cf.t[p] - cf.t_tilde).signum();
        assert_eq!(dk[p].signum(), expect, "coordinate {p}");
    }
}

#[test]
fn total_mass_stays_bounded() {
    let s = state(&[0.3, 1.0, 2.0, 0.7], &[0.1, 0.9, 1.5, 0.0]);
    let r = 4.0;
    let total0 = s.total();
    let tr = integrate_iw(&s, &[1.0, 1.2, 0.9, 1.1], 1.0, UNIT, 0.05, 100.0).unwrap();
    for st in &tr.states {
        let ratio = st.total() / total0;
        assert!(ratio >= 1.0 / r && ratio <= r);
    }
}

#[test]
fn switch_schedule_changes_temperature() {
    let s = state(&[1.0, 2.0], &[0.5, 1.5]);
    let t = Temperature::Switch {
        tau0_sq: 1e-2,
        switch_time: 1.0,
    };
    let tr = integrate_iw(&s, &[1.0; 2], 1.0, t, 0.25, 2.0).unwrap();
    assert_eq!(tr.tau_sq, vec![1e-2, 1e-2, 1e-2, 1e-2, 1.0, 1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn hyperbolic_identity_holds() {
    for x in [-3.0, -0.4, 0.0, 0.01, 1.0, 5.0] {
        assert!((hyperbolic_identity(x) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gronwall_without_coupling_keeps_y_below_start() {
    let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
    let xs: Vec<f64> = times.iter().map(|t| (-2.0 * t).exp()).collect();
    let ys: Vec<f64> = times.iter().map(|t| 3.0 - 0.01 * t).collect();
    let w = GronwallWitness::from_traces(0.0, times, xs, ys).unwrap();
    let out = gronwall_verify(&w).unwrap();
    assert!(out.pass && out.y_final <= 3.0);
}

#[test]
fn gronwall_rejects_growth_beyond_hypothesis() {
    let times: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
    let xs: Vec<f64> = times.iter().map(|t| (-t).exp()).collect();
    let ys: Vec<f64> = times.iter().map(|t| (5.0 * t).exp()).collect();
    let w = GronwallWitness::from_traces(1.0, times, xs, ys).unwrap();
    assert!(matches!(
        gronwall_verify(&w),
        Err(contrastive_dynamics::Error::Inapplicable { index: 0, .. })
    ));
}
