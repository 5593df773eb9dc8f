use super::*;
use crate::numkit::gauss_matrix;
use crate::subnet::{build_equal, StageSize};

struct Teacher {
    rng: RngStream,
    d: usize,
}

impl DataSource for Teacher {
    fn width(&self) -> usize {
        self.d
    }

    fn sample(&mut self, n: usize) -> Result<(Array2<f64>, Array1<f64>)> {
        let x = gauss_matrix(n, self.d, 1.0, &mut self.rng)?;
        let y = x.map_axis(ndarray::Axis(1), |r| r[0] * r[1] + 0.5 * r[2]);
        Ok((x, y))
    }
}

fn teacher(d: usize) -> Teacher {
    Teacher {
        rng: RngStream::new(5, 1),
        d,
    }
}

fn eval_set(d: usize) -> EvalSet {
    let mut t = Teacher {
        rng: RngStream::new(5, 2),
        d,
    };
    EvalSet::from_source(&mut t, 64).unwrap()
}

fn settings(opt: OptimizerConfig, lr: f64) -> TrainSettings {
    TrainSettings {
        batch_size: 8,
        eval_every: 10,
        optimizer: opt,
        lr: LrSchedule::constant(lr),
        seed: 3,
    }
}

fn small_net(depth: usize) -> ResidualNet {
    ResidualNet::relu_mlp(4, 16, depth, true, 0.1, &mut RngStream::new(1, 0)).unwrap()
}

#[test]
fn full_probability_matches_baseline() {
    let s = settings(OptimizerConfig::adam(), 1e-3);
    let mut a = small_net(4);
    let mut b = a.clone();
    let sched = StageSchedule::full(4, 40).unwrap();
    let ma = train_raptr(&mut a, &mut teacher(4), &eval_set(4), &sched, GateScaling::Sqrt, &s, None).unwrap();
    let mb = train_baseline(&mut b, &mut teacher(4), &eval_set(4), 40, &s, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(ma.final_eval_loss(), mb.final_eval_loss());
    assert_eq!(ma.final_flops_ratio(), Some(1.0));
}

#[test]
fn zero_steps_and_zero_lr_leave_net_unchanged() {
    let start = small_net(3);
    let mut net = start.clone();
    train_baseline(&mut net, &mut teacher(4), &eval_set(4), 0, &settings(OptimizerConfig::sgd(0.0), 0.1), None).unwrap();
    assert_eq!(net, start);
    train_baseline(&mut net, &mut teacher(4), &eval_set(4), 25, &settings(OptimizerConfig::sgd(0.9), 0.0), None).unwrap();
    assert_eq!(net, start);
}

#[test]
fn dropped_layers_untouched() {
    for opt_cfg in [OptimizerConfig::sgd(0.5), OptimizerConfig::adam()] {
        let mut net = small_net(4);
        let start = net.clone();
        let mut opt = OptimizerState::new(opt_cfg, &net).unwrap();
        let mut data = teacher(4);
        let eval = eval_set(4);
        let s = settings(opt_cfg, 1e-2);
        let mut session = Session::new(&mut data, &eval, &s, 3, &[], None).unwrap();
        let active = vec![true, false, true, false];
        for t in 0..3 {
            let plan = StepPlan {
                scales: ScalePattern(active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()),
                masks: None,
                active: active.clone(),
                charge: 0.5,
                active_count: 2.0,
                stage: 0,
            };
            session.step(t, &mut net, &mut opt, plan).unwrap();
        }
        assert_eq!(net.blocks()[1], start.blocks()[1]);
        assert_eq!(net.blocks()[3], start.blocks()[3]);
        assert_ne!(net.blocks()[0], start.blocks()[0]);
        assert_eq!(opt.block_steps(1), 0);
        assert_eq!(opt.block_steps(0), 3);
    }
}

#[test]
fn flops_ledger_matches_schedule() {
    let depth = 20;
    let sizes: Vec<StageSize> = [8., 12., 16., 20.].iter().map(|&s| StageSize::new(s, &[])).collect();
    let sched = crate::subnet::build_proportional(&sizes, depth, 2000).unwrap();
    let expected = sched.avg_length() / depth as f64;
    assert!((expected - 0.8).abs() < 1e-12);
    let mut net = ResidualNet::relu_mlp(3, 4, depth, true, 0.1, &mut RngStream::new(2, 0)).unwrap();
    let s = TrainSettings {
        batch_size: 1,
        eval_every: 500,
        ..settings(OptimizerConfig::sgd(0.0), 1e-3)
    };
    let m = train_raptr(&mut net, &mut teacher(3), &eval_set(3), &sched, GateScaling::Sqrt, &s, None).unwrap();
    let got = m.final_flops_ratio().unwrap();
    assert!((got - expected).abs() / expected < 0.01, "{got}");
    // cumulative ratio never decreases and steps strictly increase
    for w in m.records.windows(2) {
        assert!(w[1].step > w[0].step);
        assert!(w[1].flops_ratio >= w[0].flops_ratio);
    }
    // records around every boundary
    for b in sched.boundaries().into_iter().skip(1) {
        for p in [b - 50, b - 1, b + 1, b + 50] {
            assert!(m.at_step(p).is_some(), "missing record at {p}");
        }
    }
}

#[test]
fn stacking_flops_and_growth() {
    let plan = StackingPlan {
        sizes: vec![6, 9, 12],
        op: GrowthOp::Topstack,
        mode: crate::subnet::LengthMode::Equal,
        steps: 300,
    };
    let mut make = |depth| ResidualNet::relu_mlp(4, 8, depth, true, 0.1, &mut RngStream::new(4, 0));
    let s = settings(OptimizerConfig::adam(), 1e-3);
    let (net, m) = train_stacking(&mut make, &plan, &mut teacher(4), &eval_set(4), &s, None).unwrap();
    assert_eq!(net.depth(), 12);
    assert!((m.final_flops_ratio().unwrap() - 0.75).abs() < 1e-12);
    assert!(m.at_step(101).unwrap().eval_loss.is_finite());
}

#[test]
fn single_stage_stacking_is_baseline() {
    let plan = StackingPlan {
        sizes: vec![4],
        op: GrowthOp::Topstack,
        mode: crate::subnet::LengthMode::Equal,
        steps: 30,
    };
    let s = settings(OptimizerConfig::adam(), 1e-3);
    let mut make = |_| Ok(small_net(4));
    let (a, _) = train_stacking(&mut make, &plan, &mut teacher(4), &eval_set(4), &s, None).unwrap();
    let mut b = small_net(4);
    train_baseline(&mut b, &mut teacher(4), &eval_set(4), 30, &s, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn width_full_groups_is_baseline_and_half_charges_half() {
    let s = settings(OptimizerConfig::adam(), 1e-3);
    let full = WidthSchedule {
        groups: 4,
        kept: vec![4],
        mode: crate::subnet::LengthMode::Equal,
        steps: 30,
    };
    let mut a = small_net(3);
    let mut b = a.clone();
    train_width_raptr(&mut a, &mut teacher(4), &eval_set(4), &full, &s, None).unwrap();
    train_baseline(&mut b, &mut teacher(4), &eval_set(4), 30, &s, None).unwrap();
    assert_eq!(a, b);
    let half = WidthSchedule {
        kept: vec![2],
        ..full
    };
    let m = train_width_raptr(&mut a, &mut teacher(4), &eval_set(4), &half, &s, None).unwrap();
    assert_eq!(m.final_flops_ratio(), Some(0.5));
    let mut odd = ResidualNet::relu_mlp(4, 6, 2, true, 0.1, &mut RngStream::new(1, 0)).unwrap();
    assert!(train_width_raptr(&mut odd, &mut teacher(4), &eval_set(4), &half, &s, None).is_err());
}

#[test]
fn pld_starts_full_and_saves_flops() {
    let cfg = PldConfig {
        keep_floor: 0.5,
        gamma_f: 100.0,
        steps: 1000,
    };
    let mut net = small_net(8);
    let s = TrainSettings {
        batch_size: 1,
        ..settings(OptimizerConfig::sgd(0.0), 1e-4)
    };
    let m = train_pld(&mut net, &mut teacher(4), &eval_set(4), &cfg, &s, None).unwrap();
    let got = m.final_flops_ratio().unwrap();
    let expected = pld_expected_flops(&cfg, 8);
    assert!((got - expected).abs() < 0.02, "{got} vs {expected}");
}

#[test]
fn divergence_is_reported() {
    let mut net = small_net(4);
    let s = settings(OptimizerConfig::sgd(0.0), 1e12);
    let err = train_baseline(&mut net, &mut teacher(4), &eval_set(4), 50, &s, None).unwrap_err();
    assert!(matches!(err, LabError::Divergence { .. }), "{err:?}");
}

#[test]
fn stage_boundary_steps_recorded_with_stage() {
    let sizes: Vec<StageSize> = [2., 4.].iter().map(|&s| StageSize::new(s, &[1])).collect();
    let sched = build_equal(&sizes, 4, 200).unwrap();
    let mut net = small_net(4);
    let s = settings(OptimizerConfig::adam(), 1e-3);
    let mut calls = vec![];
    let mut hook = |step: usize, _: &ResidualNet| {
        calls.push(step);
        Ok(())
    };
    let m = train_raptr(&mut net, &mut teacher(4), &eval_set(4), &sched, GateScaling::Unit, &s, Some(&mut hook)).unwrap();
    assert_eq!(m.at_step(100).unwrap().stage, 0);
    assert_eq!(m.at_step(101).unwrap().stage, 1);
    assert_eq!(calls.first(), Some(&0));
    assert_eq!(calls.last(), Some(&200));
    assert_eq!(calls.len(), 21);
}
