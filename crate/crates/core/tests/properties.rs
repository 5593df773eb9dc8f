use ndarray::{Array1, Array2, ArrayView2};
use proptest::prelude::*;

use raptr_lab::boolpoly::{enumerate_cube, fourier_coeffs_exact, full_spectrum, sample_target, SparsePolynomial};
use raptr_lab::netcore::{gradient_check, h_sqrt, read_checkpoint, write_checkpoint, ResidualNet, ScalePattern};
use raptr_lab::numkit::{gauss_matrix, gauss_vector, RngStream};
use raptr_lab::sharedbase::{coeffs_for_gates, equivalence_check, equivalence_check_scaled, make_shared, scatter_grads};
use raptr_lab::sinelab::{gradient_discrepancy, Cube, SineNetParams, SinePhase, SineTarget};
use raptr_lab::subnet::{relative_flops, sample_gates, stage_lengths, GatePattern, LengthMode, ScheduleSpec, StageSize};
use raptr_lab::trainers::{pld_alpha, pld_keep_probs, pld_mean_keep, FinalDecay, LrSchedule};

fn pattern() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 1..40).prop_filter("needs an active layer", |b| b.iter().any(|&x| x))
}

fn small_net(seed: u64, depth: usize) -> ResidualNet {
    let mut rng = RngStream::new(seed, 0);
    ResidualNet::relu_mlp(4, 6, depth, seed % 2 == 0, 0.5, &mut rng).unwrap()
}

proptest! {
    #[test]
    fn sqrt_scales_follow_gaps(bits in pattern()) {
        let depth = bits.len();
        let g = GatePattern::from_bits(bits.clone(), vec![]).unwrap();
        let s = h_sqrt(&g).unwrap();
        let active = g.active_indices();
        for (i, &j) in active.iter().enumerate() {
            let next = active.get(i + 1).copied().unwrap_or(depth);
            prop_assert!((s.0[j] - ((next - j) as f64).sqrt()).abs() < 1e-12);
        }
        for j in 0..depth {
            if !bits[j] {
                prop_assert_eq!(s.0[j], 0.0);
            }
        }
        let sq: f64 = s.0.iter().map(|v| v * v).sum();
        prop_assert!((sq - (depth - active[0]) as f64).abs() < 1e-9);
    }

    #[test]
    fn fixed_layers_always_survive(p in 0.0f64..=1.0, depth in 1usize..30, seed in any::<u64>(), picks in prop::collection::vec(any::<prop::sample::Index>(), 0..5)) {
        let fixed: Vec<usize> = picks.iter().map(|i| i.index(depth)).collect();
        let mut rng = RngStream::new(seed, 3);
        let g = sample_gates(p, &fixed, depth, &mut rng).unwrap();
        for &i in &fixed {
            prop_assert!(g.bits()[i]);
        }
        prop_assert_eq!(g.depth(), depth);
    }

    #[test]
    fn gate_extremes(depth in 1usize..30, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 3);
        prop_assert_eq!(sample_gates(1.0, &[], depth, &mut rng).unwrap().active_count(), depth);
        prop_assert_eq!(sample_gates(0.0, &[0], depth, &mut rng).unwrap().active_indices(), vec![0]);
    }

    #[test]
    fn relative_flops_is_monotone_and_bounded(p in 0.0f64..=1.0, q in 0.0f64..=1.0, depth in 1usize..50, fixed in 0usize..50) {
        let fixed = fixed.min(depth);
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = relative_flops(lo, fixed, depth);
        let b = relative_flops(hi, fixed, depth);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        prop_assert!(a <= b + 1e-12);
        prop_assert!((relative_flops(1.0, fixed, depth) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stage_lengths_cover_the_run(k in 1usize..8, total in 100usize..1_000_000) {
        for mode in [LengthMode::Equal, LengthMode::Proportional] {
            let v = stage_lengths(mode, k, total);
            prop_assert_eq!(v.len(), k);
            prop_assert_eq!(v.iter().sum::<usize>(), total);
        }
        let v = stage_lengths(LengthMode::Proportional, k, total);
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn schedules_are_monotone(raw in prop::collection::vec(0.0f64..1.0, 1..5), depth in 2usize..25, total in 1000usize..100_000, proportional in any::<bool>()) {
        let mut sizes: Vec<f64> = raw.iter().map(|r| 1.0 + r * (depth as f64 - 1.0)).collect();
        sizes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sizes.push(depth as f64);
        let spec = ScheduleSpec {
            stages: sizes.iter().map(|&s| StageSize::new(s, &[])).collect(),
            mode: if proportional { LengthMode::Proportional } else { LengthMode::Equal },
            target_avg: None,
            warmup_steps: 0,
            quantum: 1,
        };
        let built = spec.build(depth, total).unwrap();
        let b = built.schedule.boundaries();
        prop_assert!(b.windows(2).all(|w| w[0] < w[1]));
        let mut last = 0.0;
        for t in (0..total).step_by(97) {
            let (p, _) = built.schedule.stage_at(t).unwrap();
            prop_assert!(p + 1e-12 >= last);
            last = p;
        }
        let avg = built.schedule.avg_length();
        prop_assert!(avg >= sizes[0] - 1e-9 && avg <= depth as f64 + 1e-9);
    }

    #[test]
    fn pld_keep_is_bounded(t in 0.0f64..1e5, floor in 0.0f64..1.0, gamma in 1e-6f64..1e-2, depth in 1usize..64) {
        let a = pld_alpha(t, floor, gamma);
        prop_assert!(a >= floor - 1e-12 && a <= 1.0 + 1e-12);
        prop_assert!(pld_alpha(t + 1.0, floor, gamma) <= a + 1e-15);
        let probs = pld_keep_probs(a, depth);
        prop_assert_eq!(probs[0], 1.0);
        prop_assert!(probs.iter().all(|&p| p >= a - 1e-12 && p <= 1.0));
        let mean = probs.iter().sum::<f64>() / depth as f64;
        prop_assert!((mean - pld_mean_keep(a, depth)).abs() < 1e-12);
    }

    #[test]
    fn lr_never_exceeds_peak(peak in 0.0f64..1.0, warm in 0usize..100, t in 0usize..1000, start in 0usize..1000) {
        for decay in [FinalDecay::None, FinalDecay::Linear, FinalDecay::Cosine] {
            let s = LrSchedule { peak_lr: peak, warmup_steps: warm, final_decay: decay };
            let v = s.at(t, start, 1000);
            prop_assert!(v >= -1e-15 && v <= peak + 1e-15);
        }
    }

    #[test]
    fn shared_combination_is_adjoint_to_scatter(seed in any::<u64>(), k in 1usize..5, depth in 1usize..7) {
        let mut rng = RngStream::new(seed, 9);
        let c = gauss_matrix(k, depth, 1.0, &mut rng).unwrap();
        let theta: Vec<Array2<f64>> = (0..depth).map(|_| gauss_matrix(3, 2, 1.0, &mut rng).unwrap()).collect();
        let g: Vec<Array2<f64>> = (0..k).map(|_| gauss_matrix(3, 2, 1.0, &mut rng).unwrap()).collect();
        let tv: Vec<ArrayView2<f64>> = theta.iter().map(|a| a.view()).collect();
        let gv: Vec<ArrayView2<f64>> = g.iter().map(|a| a.view()).collect();
        let shared = make_shared(&tv, c.view()).unwrap();
        let back = scatter_grads(c.view(), &gv).unwrap();
        let lhs: f64 = shared.iter().zip(&g).map(|(a, b)| (a * b).sum()).sum();
        let rhs: f64 = theta.iter().zip(&back).map(|(a, b)| (a * b).sum()).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn parseval_on_planted_polynomials(seed in any::<u64>(), d in 4usize..11) {
        let mut rng = RngStream::new(seed, 1);
        let k = 3.min(d);
        let poly = sample_target(d, k, 2, d.min(6), &mut rng).unwrap();
        let f = |x: ArrayView2<f64>| poly.eval_batch(x);
        let spec = full_spectrum(&f, d).unwrap();
        let values = enumerate_cube(&f, d).unwrap();
        let energy = values.mapv(|v| v * v).mean().unwrap();
        prop_assert!((spec.mapv(|c| c * c).sum() - energy).abs() < 1e-10);
        let subsets: Vec<Vec<usize>> = poly.terms.iter().map(|t| t.subset.clone()).collect();
        let exact = fourier_coeffs_exact(&f, &subsets, d).unwrap();
        for (t, c) in poly.terms.iter().zip(exact) {
            prop_assert!((t.coeff - c).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shared_base_matches_gated(seed in any::<u64>(), bits in prop::collection::vec(any::<bool>(), 2..7)) {
        prop_assume!(bits.iter().any(|&b| b));
        let net = small_net(seed, bits.len());
        let mut rng = RngStream::new(seed, 5);
        let x = gauss_matrix(3, 4, 1.0, &mut rng).unwrap();
        let g = GatePattern::from_bits(bits, vec![]).unwrap();
        prop_assert!(equivalence_check(&net, x.view(), &g).unwrap() <= 1e-12);
        prop_assert!(equivalence_check_scaled(&net, x.view(), &g).unwrap() <= 1e-12);
        prop_assert_eq!(coeffs_for_gates(&g).unwrap().nonzeros(), g.active_count());
    }

    #[test]
    fn network_gradients_match_finite_differences(seed in any::<u64>(), depth in 1usize..5, keep in any::<u8>()) {
        let net = small_net(seed, depth);
        let mut rng = RngStream::new(seed, 6);
        let x = gauss_matrix(2, 4, 1.0, &mut rng).unwrap();
        let w = gauss_matrix(2, 1, 1.0, &mut rng).unwrap();
        let bits: Vec<bool> = (0..depth).map(|i| (keep >> i) & 1 == 1 || i == 0).collect();
        let scales = h_sqrt(&GatePattern::from_bits(bits, vec![]).unwrap()).unwrap();
        let err = gradient_check(&net, x.view(), &scales, &vec![None; depth], &w, 1e-5).unwrap();
        prop_assert!(err <= 1e-5, "relative error {}", err);
    }

    #[test]
    fn sine_gradients_are_exact(seed in any::<u64>(), extra_p0 in any::<bool>()) {
        let mut rng = RngStream::new(seed, 7);
        let p = SineNetParams {
            p0: rng.gauss(),
            w1: gauss_vector(5, 1.0, &mut rng).unwrap(),
            w2: gauss_vector(5, 1.0, &mut rng).unwrap(),
            b1: rng.gauss(),
            b2: rng.gauss(),
            extra_p0,
        };
        let cube = Cube::new(5).unwrap();
        for phase in [None, Some(SinePhase::BiasOnly), Some(SinePhase::Phase1(0)), Some(SinePhase::Phase1(1)), Some(SinePhase::Phase2)] {
            prop_assert!(gradient_discrepancy(&p, phase, &cube, &SineTarget::standard(), 1e-5).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), depth in 1usize..6) {
        let net = small_net(seed, depth);
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &net);
        let x = Array2::from_elem((1, 4), 0.3);
        let ones = ScalePattern::ones(depth);
        prop_assert_eq!(back.forward(x.view(), &ones).unwrap().output, net.forward(x.view(), &ones).unwrap().output);
    }
}

#[test]
fn empty_polynomial_has_empty_spectrum() {
    let poly = SparsePolynomial::empty(6);
    let f = |x: ArrayView2<f64>| poly.eval_batch(x);
    assert_eq!(full_spectrum(&f, 6).unwrap(), Array1::<f64>::zeros(64));
    assert!(enumerate_cube(&f, 6).unwrap().iter().all(|&v| v == 0.0));
}
