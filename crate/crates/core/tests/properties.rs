use contrastive_dynamics::expectation::{
    alignment_score, contrastive_loss, population_moments, softmax_score, MomentRequest, PositivePair,
};
use contrastive_dynamics::gradients::{compute_qset, krates_from_qset};
use contrastive_dynamics::infinite_width::{
    closed_forms, hyperbolic_identity, integrate_iw, iw_rates, InfiniteWidthState, Temperature,
};
use contrastive_dynamics::lemma_checks::{audit_stage2_q1_diag, FittedConstants};
use contrastive_dynamics::metrics::{balance_score, condition_numbers, ratios};
use contrastive_dynamics::model::{
    build_encoders, compute_kstate, feature_map, init_weights, rng_for, sample_quad, Stream,
};
use contrastive_dynamics::training::{run, RecorderSpec, Schedule, Termination};
use contrastive_dynamics::{
    EncoderSet, ExpectationStrategy, KState, LossKind, Matrix, ModelConfig, Side, SigmaSpec, WeightState,
};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

/// `(d, r, m, seed)` for instances small enough to enumerate.
fn small_dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (3usize..=5).prop_flat_map(|d| (Just(d), 1..=d, 2usize..=4, any::<u64>()))
}

fn instance(d: usize, r: usize, m: usize, seed: u64) -> (ModelConfig, EncoderSet, WeightState) {
    let mut c = ModelConfig::flat(d, r, m, seed);
    c.signal_variances = SigmaSpec::Values((0..r).map(|i| 1.0 + 0.3 * i as f64).collect());
    c.noise_variance = 0.6;
    c.assumption_c = 1e6;
    let enc = build_encoders(&c, &mut rng_for(seed, Stream::Encoders)).unwrap();
    let w = init_weights(&c, &mut rng_for(seed, Stream::Weights));
    (c, enc, w)
}

fn kstate_of(d: usize, r: usize, m: usize, seed: u64) -> KState {
    let (_, enc, w) = instance(d, r, m, seed);
    compute_kstate(&w, &enc).unwrap()
}

fn signs(bits: u64, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|j| if bits >> j & 1 == 1 { scale } else { -scale }).collect()
}

/// Fixed generator seed so every run exercises the same cases.
fn pinned(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed_cafe),
        ..ProptestConfig::default()
    }
}

fn swapped(k: &KState) -> KState {
    KState::from_full(k.full_b.clone(), k.full_a.clone(), k.signal_dim).unwrap()
}

proptest! {
    #![proptest_config(pinned(24))]

    #[test]
    fn encoders_are_orthogonal_with_prescribed_scales((d, r, m, seed) in small_dims()) {
        let (_, enc, _) = instance(d, r, m, seed);
        let variances = enc.column_variances();
        for side in [Side::A, Side::B] {
            let a = enc.full(side);
            let g = a.transpose() * a;
            for i in 0..d {
                for j in 0..d {
                    let expect = if i == j { variances[i] } else { 0.0 };
                    prop_assert!((g[(i, j)] - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn features_have_unit_expected_norm((d, r, m, seed) in small_dims()) {
        let k = kstate_of(d, r, m, seed);
        let scale = 1.0 / (d as f64).sqrt();
        for side in [Side::A, Side::B] {
            let mut total = 0.0;
            for bits in 0..1u64 << d {
                let u = signs(bits, d, scale);
                total += feature_map(&k, side, &u[..r], &u[r..]).unwrap().norm_squared();
            }
            prop_assert!((total / (1u64 << d) as f64 - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn feature_map_is_scale_invariant((d, r, m, seed) in small_dims(), pick in 0usize..2) {
        let (_, enc, w) = instance(d, r, m, seed);
        let c = [0.1, 10.0][pick];
        let scaled = WeightState { w_a: &w.w_a * c, w_b: &w.w_b * c };
        let k0 = compute_kstate(&w, &enc).unwrap();
        let k1 = compute_kstate(&scaled, &enc).unwrap();
        let u = signs(seed, d, 1.0 / (d as f64).sqrt());
        for side in [Side::A, Side::B] {
            let f0 = feature_map(&k0, side, &u[..r], &u[r..]).unwrap();
            let f1 = feature_map(&k1, side, &u[..r], &u[r..]).unwrap();
            prop_assert!((f0 - f1).amax() < 1e-10);
        }
    }

    #[test]
    fn construction_is_deterministic((d, r, m, seed) in small_dims()) {
        let (c, e1, w1) = instance(d, r, m, seed);
        let (_, e2, w2) = instance(d, r, m, seed);
        prop_assert_eq!(&e1.full_a, &e2.full_a);
        prop_assert_eq!(&e1.full_b, &e2.full_b);
        prop_assert_eq!(w1, w2);
        let mut g1 = rng_for(seed, Stream::Batches);
        let mut g2 = rng_for(seed, Stream::Batches);
        for _ in 0..5 {
            prop_assert_eq!(sample_quad(&c, &mut g1), sample_quad(&c, &mut g2));
        }
    }

    #[test]
    fn softmax_scores_are_probabilities((d, r, m, seed) in small_dims(), tau_sq in 0.0f64..4.0, k in 0.1f64..8.0) {
        let (c, enc, w) = instance(d, r, m, seed);
        let kstate = compute_kstate(&w, &enc).unwrap();
        let pair = PositivePair::from_quad(&sample_quad(&c, &mut rng_for(seed, Stream::Batches)));
        let exact = ExpectationStrategy::exact();
        for side in [Side::A, Side::B] {
            let s = softmax_score(&kstate, tau_sq, k, &pair, side, &exact).unwrap().value;
            prop_assert!(s > 0.0 && s < 1.0);
        }
        let shared = KState::from_full(kstate.full_a.clone(), kstate.full_a.clone(), r).unwrap();
        let sa = softmax_score(&shared, tau_sq, k, &pair, Side::A, &exact).unwrap().value;
        let sb = softmax_score(&shared, tau_sq, k, &pair, Side::B, &exact).unwrap().value;
        // Equal states make the two sides mirror images only when the noises agree.
        if pair.xi_a == pair.xi_b {
            prop_assert!((sa - sb).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_bounded_below_at_unit_temperature((d, r, m, seed) in small_dims()) {
        let k = kstate_of(d, r, m, seed);
        let l = contrastive_loss(&k, 1.0, 1.0, &ExpectationStrategy::exact()).unwrap().value;
        prop_assert!(l >= -1.0);
    }

    #[test]
    fn sampled_moments_are_bit_reproducible((d, r, m, seed) in small_dims(), mc_seed in any::<u64>()) {
        let k = kstate_of(d, r, m, seed);
        let s = ExpectationStrategy::monte_carlo(3000, mc_seed);
        let a = population_moments(&k, 0.8, 2.0, LossKind::Contrastive, &s, 4, MomentRequest::Q).unwrap();
        let b = population_moments(&k, 0.8, 2.0, LossKind::Contrastive, &s, 4, MomentRequest::Q).unwrap();
        prop_assert_eq!(a.loss.value.to_bits(), b.loss.value.to_bits());
        prop_assert_eq!(a.q_matrix, b.q_matrix);
    }

    #[test]
    fn relabeling_sides_swaps_the_rates((d, r, m, seed) in small_dims(), tau_sq in 0.0f64..2.0) {
        let (_, enc, w) = instance(d, r, m, seed);
        let k = compute_kstate(&w, &enc).unwrap();
        let ks = swapped(&k);
        let exact = ExpectationStrategy::exact();
        let l0 = contrastive_loss(&k, tau_sq, 1.0, &exact).unwrap().value;
        let l1 = contrastive_loss(&ks, tau_sq, 1.0, &exact).unwrap().value;
        prop_assert!((l0 - l1).abs() < 1e-12 * l0.abs().max(1.0));
        let rates = krates_from_qset(&k, &compute_qset(&k, tau_sq, 1.0, &exact).unwrap(), &enc.sigma_sq, enc.noise_variance).unwrap();
        let rates_s = krates_from_qset(&ks, &compute_qset(&ks, tau_sq, 1.0, &exact).unwrap(), &enc.sigma_sq, enc.noise_variance).unwrap();
        prop_assert!((rates.full(Side::A) - rates_s.full(Side::B)).amax() < 1e-10);
        prop_assert!((rates.full(Side::B) - rates_s.full(Side::A)).amax() < 1e-10);
    }

    #[test]
    fn alignment_ignores_weight_scale((d, r, m, seed) in small_dims(), ca in 0.05f64..20.0, cb in 0.05f64..20.0) {
        let (_, enc, w) = instance(d, r, m, seed);
        let scaled = WeightState { w_a: &w.w_a * ca, w_b: &w.w_b * cb };
        let exact = ExpectationStrategy::exact();
        let g0 = alignment_score(&compute_kstate(&w, &enc).unwrap(), &exact).unwrap().value;
        let g1 = alignment_score(&compute_kstate(&scaled, &enc).unwrap(), &exact).unwrap().value;
        prop_assert_eq!(g0, g1);
    }

    #[test]
    fn balance_lies_between_one_and_rank((d, r, m, seed) in small_dims()) {
        let k = kstate_of(d, r, m, seed);
        let b = balance_score(&k).unwrap();
        prop_assert!(b >= 1.0 - 1e-12 && b <= d.min(m) as f64 + 1e-12);
    }

    #[test]
    fn aligned_and_balanced_states_score_well(
        r in 1usize..=4,
        extra in 0usize..=2,
        seed in any::<u64>(),
        spread in 0.0f64..0.1,
    ) {
        let d = r + extra;
        let m = d + 2;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let gauss = Matrix::from_fn(m, d, |_, _| StandardNormal.sample(&mut rng));
        let q = gauss.qr().q();
        let norms: Vec<f64> = (0..d)
            .map(|j| if j < r { 1.0 + spread * j as f64 / r as f64 } else { 1e-4 })
            .collect();
        let mut k_a = q.clone();
        for (j, n) in norms.iter().enumerate() {
            k_a.column_mut(j).scale_mut(*n);
        }
        let wobble = Matrix::from_fn(m, d, |_, _| { let g: f64 = StandardNormal.sample(&mut rng); 1e-5 * g });
        let k_b = &k_a + wobble;
        let k = KState::from_full(k_a, k_b, r).unwrap();
        let (rho_minus, rho_ns, _) = ratios(&k).unwrap();
        let (kappa0, _) = condition_numbers(&k).unwrap();
        prop_assume!(rho_minus <= 1e-3 && rho_ns <= 1e-3 && kappa0 <= 1.05);
        let align = alignment_score(&k, &ExpectationStrategy::exact()).unwrap().value;
        let ceiling = 1.0 - 0.5f64.powi(r as i32);
        prop_assert!(align >= 0.99 * ceiling, "alignment {align} below {ceiling}");
        prop_assert!(balance_score(&k).unwrap() >= 0.9 * r as f64);
    }

    #[test]
    fn balanced_aligned_state_is_stationary(r in 1usize..=6, level in 0.1f64..5.0, tau_sq in 0.0f64..3.0, k in 0.1f64..5.0) {
        let s = InfiniteWidthState::new(vec![level; r], vec![level; r]).unwrap();
        let sigma: Vec<f64> = (0..r).map(|i| 1.0 + i as f64).collect();
        let (dk, dh) = iw_rates(&s, &sigma, tau_sq, k).unwrap();
        for v in dk.iter().chain(&dh) {
            prop_assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn hyperbolic_identity_holds_entrywise(kappa in prop::collection::vec(0.1f64..3.0, 1..6), tau_sq in 0.0f64..4.0) {
        let hat: Vec<f64> = kappa.iter().map(|x| 0.7 * x).collect();
        let s = InfiniteWidthState::new(kappa.clone(), hat.clone()).unwrap();
        let cf = closed_forms(&s, tau_sq, 1.0).unwrap();
        let total: f64 = kappa.iter().sum();
        for (t, h) in cf.t.iter().zip(&hat) {
            let arg = tau_sq * h / total;
            prop_assert!((t * t + 1.0 / (arg.cosh() * arg.cosh()) - 1.0).abs() < 1e-12);
            prop_assert!((hyperbolic_identity(arg) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn infinite_width_mass_stays_bounded(
        kappa in prop::collection::vec(0.2f64..3.0, 2..5),
        frac in 0.0f64..1.0,
    ) {
        let r = kappa.len();
        let hat: Vec<f64> = kappa.iter().map(|x| frac * x).collect();
        let s = InfiniteWidthState::new(kappa, hat).unwrap();
        let sigma: Vec<f64> = (0..r).map(|i| 1.0 + 0.2 * i as f64).collect();
        let tr = integrate_iw(&s, &sigma, 1.0, Temperature::Constant { tau_sq: 1.0 }, 0.05, 20.0).unwrap();
        let m0 = s.total();
        for st in &tr.states {
            let ratio = st.total() / m0;
            prop_assert!(ratio >= 1.0 / r as f64 && ratio <= r as f64);
        }
    }

    #[test]
    fn audits_are_deterministic(values in prop::collection::vec(0.3f64..2.0, 2..5)) {
        let r = values.len();
        let k = Matrix::from_diagonal(&contrastive_dynamics::Vector::from_column_slice(&values));
        let ks = KState::from_full(k.clone(), k, r).unwrap();
        let c = FittedConstants::default();
        let s = ExpectationStrategy::exact();
        let a = audit_stage2_q1_diag(&ks, 1.0, 1.0, &s, &c).unwrap();
        let b = audit_stage2_q1_diag(&ks, 1.0, 1.0, &s, &c).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(pinned(8))]

    #[test]
    fn non_contrastive_loss_never_increases(seed in any::<u64>(), eta in 1e-4f64..=1e-2) {
        let mut c = ModelConfig::flat(6, 3, 8, seed);
        c.noise_variance = 0.5;
        let schedule = Schedule::constant(eta, 200);
        let rec = RecorderSpec { stride: 1, alignment_samples: 256 };
        let tr = run(&c, &schedule, LossKind::NonContrastive, &ExpectationStrategy::exact(), &rec).unwrap();
        for w in tr.records.windows(2) {
            prop_assert!(w[1].loss <= w[0].loss + 1e-14, "step {}: {} -> {}", w[1].step, w[0].loss, w[1].loss);
        }
    }

    #[test]
    fn sampled_q_matches_population((d, r, m, seed) in small_dims(), mc_seed in any::<u64>()) {
        let k = kstate_of(d, r, m, seed);
        let exact = population_moments(&k, 0.9, 1.0, LossKind::Contrastive, &ExpectationStrategy::exact(), 0, MomentRequest::Q).unwrap();
        let batch = population_moments(
            &k, 0.9, 1.0, LossKind::Contrastive,
            &ExpectationStrategy::monte_carlo(100_000, mc_seed), 1, MomentRequest::Q_WITH_VARIANCE,
        ).unwrap();
        let qe = exact.q_matrix.unwrap();
        let qb = batch.q_matrix.unwrap();
        let se = batch.q_matrix_std_err.unwrap();
        for i in 0..d {
            for j in 0..d {
                prop_assert!((qe[(i, j)] - qb[(i, j)]).abs() <= 4.0 * se[(i, j)] + 1e-12, "entry ({i},{j})");
            }
        }
        prop_assert!((exact.q0.value - batch.q0.value).abs() <= 4.0 * batch.q0.std_err + 1e-12);
    }

    #[test]
    fn early_stop_reports_small_gradient(seed in any::<u64>()) {
        let mut c = ModelConfig::flat(4, 2, 6, seed);
        c.noise_variance = 0.5;
        let mut schedule = Schedule::constant(0.5, 20_000);
        schedule.stop_grad_norm = 1e-6;
        let rec = RecorderSpec { stride: 1000, alignment_samples: 256 };
        let tr = run(&c, &schedule, LossKind::NonContrastive, &ExpectationStrategy::exact(), &rec).unwrap();
        if let Termination::Converged { step, grad_norm } = tr.termination {
            prop_assert!(grad_norm <= 1e-6);
            let last = tr.records.last().unwrap();
            prop_assert_eq!(last.step, step);
            prop_assert!(last.grad_norm <= 1e-6);
        }
    }
}
