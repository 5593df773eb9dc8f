use super::*;
use crate::numkit::{gauss_matrix, RngStream};
use crate::subnet::GatePattern;
use ndarray::{array, Array2};

fn linear_blocks(l: usize, d: usize, ln: bool, std: f64, rng: &mut RngStream) -> Vec<BlockKind> {
    (0..l)
        .map(|_| {
            let w = gauss_matrix(d, d, std, rng).unwrap();
            if ln {
                BlockKind::LinearLn { w }
            } else {
                BlockKind::Linear { w }
            }
        })
        .collect()
}

fn mlp_blocks(l: usize, d: usize, m: usize, prenorm: bool, rng: &mut RngStream) -> Vec<BlockKind> {
    (0..l)
        .map(|_| BlockKind::ReluMlp {
            w: gauss_matrix(m, d, 0.5, rng).unwrap(),
            c: gauss_matrix(d, m, 0.3, rng).unwrap(),
            prenorm,
        })
        .collect()
}

/// Max relative error between analytic and central-difference gradients.
fn gradient_check(net: ResidualNet, s: ScalePattern, masks: Vec<Option<HiddenMask>>, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 99);
    let x = gauss_matrix(3, net.width(), 1.0, &mut rng).unwrap();
    let weights = gauss_matrix(3, net.out_dim(), 1.0, &mut rng).unwrap();
    super::gradient_check(&net, x.view(), &s, &masks, &weights, 1e-5).unwrap()
}

#[test]
fn zero_parameters_are_identity() {
    let d = 4;
    let blocks = vec![
        BlockKind::Linear { w: Array2::zeros((d, d)) },
        BlockKind::ReluMlp {
            w: Array2::zeros((8, d)),
            c: Array2::zeros((d, 8)),
            prenorm: false,
        },
    ];
    let net = ResidualNet::new(blocks, Composition::Residual, Head::Identity).unwrap();
    let x = array![[1.0, -2.0, 0.5, 3.0]];
    let tape = net.forward(x.view(), &ScalePattern::ones(2)).unwrap();
    assert_eq!(tape.output, x);
}

#[test]
fn all_dropped_is_bypass() {
    let mut rng = RngStream::new(3, 0);
    let net = ResidualNet::new(linear_blocks(3, 5, false, 1.0, &mut rng), Composition::Plain, Head::Identity).unwrap();
    let x = gauss_matrix(2, 5, 1.0, &mut rng).unwrap();
    let tape = net.forward(x.view(), &ScalePattern(vec![0.0; 3])).unwrap();
    assert_eq!(tape.last_state(), &x);
}

#[test]
fn identity_weights_double_each_layer() {
    let eye = Array2::<f64>::eye(3);
    let blocks = vec![BlockKind::Linear { w: eye.clone() }, BlockKind::Linear { w: eye }];
    let net = ResidualNet::new(blocks, Composition::Residual, Head::Identity).unwrap();
    let tape = net.forward_one(array![1.0, 0.0, 0.0].view(), &ScalePattern::ones(2)).unwrap();
    assert_eq!(tape.output, array![[4.0, 0.0, 0.0]]);
}

#[test]
fn shape_and_value_errors() {
    let mut rng = RngStream::new(1, 0);
    let net = ResidualNet::new(linear_blocks(2, 3, false, 1.0, &mut rng), Composition::Residual, Head::Identity).unwrap();
    assert!(net.forward(Array2::zeros((1, 4)).view(), &ScalePattern::ones(2)).is_err());
    assert!(net.forward(Array2::ones((1, 3)).view(), &ScalePattern::ones(3)).is_err());
    assert!(net.forward(Array2::ones((1, 3)).view(), &ScalePattern(vec![1.0, -1.0])).is_err());
    assert!(ResidualNet::new(vec![], Composition::Residual, Head::Identity).is_err());
    let mlp = mlp_blocks(1, 3, 4, false, &mut rng);
    assert!(ResidualNet::new(mlp, Composition::Plain, Head::Identity).is_err());
    let tape = net.forward(Array2::ones((2, 3)).view(), &ScalePattern::ones(2)).unwrap();
    assert!(net.backward(&tape, Array2::ones((2, 2)).view()).is_err());
    let other = ResidualNet::new(linear_blocks(3, 3, false, 1.0, &mut rng), Composition::Residual, Head::Identity).unwrap();
    assert!(other.backward(&tape, Array2::ones((2, 3)).view()).is_err());
}

#[test]
fn non_finite_reports_layer() {
    let big = Array2::from_elem((2, 2), 1e200);
    let blocks = vec![BlockKind::Linear { w: Array2::eye(2) }, BlockKind::Linear { w: big.clone() }, BlockKind::Linear { w: big }];
    let net = ResidualNet::new(blocks, Composition::Residual, Head::Identity).unwrap();
    let err = net.forward(array![[1e200, 1e200]].view(), &ScalePattern::ones(3)).unwrap_err();
    assert!(matches!(err, LabError::NonFinite { layer: 2 }), "{err:?}");
}

#[test]
fn gradients_relu_mlp_scalar_head() {
    let mut rng = RngStream::new(10, 0);
    for prenorm in [false, true] {
        let mut net = ResidualNet::relu_mlp(8, 32, 4, prenorm, 0.5, &mut rng).unwrap();
        for b in net.blocks_mut() {
            if let BlockKind::ReluMlp { c, .. } = b {
                c.mapv_inplace(|x| x * 3.0);
            }
        }
        let s = ScalePattern(vec![1.0, 0.7, 0.0, 2f64.sqrt()]);
        let err = gradient_check(net, s, vec![None; 4], 1);
        assert!(err <= 1e-5, "prenorm={prenorm}: {err}");
    }
}

#[test]
fn gradients_linear_blocks_all_heads() {
    let mut rng = RngStream::new(11, 0);
    let heads = |rng: &mut RngStream| {
        vec![
            Head::ScalarReadout {
                v: crate::numkit::gauss_vector(8, 1.0, rng).unwrap(),
            },
            Head::NormalizedLinear {
                v: gauss_matrix(3, 8, 1.0, rng).unwrap(),
            },
            Head::Identity,
        ]
    };
    for composition in [Composition::Residual, Composition::Plain] {
        for ln in [false, true] {
            for head in heads(&mut rng) {
                let blocks = linear_blocks(4, 8, ln, 0.4, &mut rng);
                let net = ResidualNet::new(blocks, composition, head).unwrap();
                let err = gradient_check(net, ScalePattern(vec![1.0, 0.0, 1.3, 1.0]), vec![None; 4], 2);
                assert!(err <= 1e-5, "{composition:?} ln={ln}: {err}");
            }
        }
    }
}

#[test]
fn gradients_with_hidden_masks() {
    let mut rng = RngStream::new(12, 0);
    let net = ResidualNet::relu_mlp(6, 8, 3, false, 0.5, &mut rng).unwrap();
    let mask = HiddenMask {
        keep: array![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0],
        gain: 2.0,
    };
    let err = gradient_check(net, ScalePattern::ones(3), vec![Some(mask.clone()), None, Some(mask)], 3);
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn dropped_block_gradient_is_exactly_zero() {
    let mut rng = RngStream::new(4, 0);
    let net = ResidualNet::relu_mlp(5, 20, 3, true, 0.3, &mut rng).unwrap();
    let x = gauss_matrix(4, 5, 1.0, &mut rng).unwrap();
    let tape = net.forward(x.view(), &ScalePattern(vec![1.0, 0.0, 1.0])).unwrap();
    let g = net.backward(&tape, Array2::ones((4, 1)).view()).unwrap();
    assert!(g.blocks[1].iter().all(|m| m.iter().all(|&v| v == 0.0)));
    assert!(g.blocks[0][0].iter().any(|&v| v != 0.0));
}

#[test]
fn backward_is_linear_in_upstream() {
    let mut rng = RngStream::new(5, 0);
    let net = ResidualNet::relu_mlp(5, 20, 3, false, 0.3, &mut rng).unwrap();
    let x = gauss_matrix(4, 5, 1.0, &mut rng).unwrap();
    let tape = net.forward(x.view(), &ScalePattern::ones(3)).unwrap();
    let up = gauss_matrix(4, 1, 1.0, &mut rng).unwrap();
    let g1 = net.backward(&tape, up.view()).unwrap();
    let mut g2 = net.backward(&tape, (&up * 2.0).view()).unwrap();
    g2.scale(0.5);
    assert_eq!(g1, g2);
}

#[test]
fn gated_forward_matches_deleted_layers() {
    let mut rng = RngStream::new(6, 0);
    let net = ResidualNet::relu_mlp(6, 24, 5, true, 0.5, &mut rng).unwrap();
    let gates = GatePattern::from_bits(vec![true, false, true, false, true], vec![]).unwrap();
    let x = gauss_matrix(3, 6, 1.0, &mut rng).unwrap();
    let gated = net.forward(x.view(), &unit_scales(&gates)).unwrap();
    let small = net.sub_network(gates.bits()).unwrap();
    let direct = small.forward(x.view(), &ScalePattern::ones(3)).unwrap();
    let diff = (&gated.output - &direct.output).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff <= 1e-12);
}

#[test]
fn squared_loss_convention() {
    assert_eq!(loss_squared(1.0, 1.0), (0.0, 0.0));
    assert_eq!(loss_squared(2.0, 0.0), (4.0, 4.0));
    let (l, g) = batch_squared_loss(array![[2.0], [0.0]].view(), array![0.0, 0.0].view()).unwrap();
    assert_eq!(l, 2.0);
    assert_eq!(g, array![[2.0], [0.0]]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = RngStream::new(8, 0);
    let nets = vec![
        ResidualNet::relu_mlp(4, 16, 3, true, 0.2, &mut rng).unwrap(),
        ResidualNet::new(
            linear_blocks(2, 4, true, 1.0, &mut rng),
            Composition::Plain,
            Head::NormalizedLinear {
                v: gauss_matrix(2, 4, 1.0, &mut rng).unwrap(),
            },
        )
        .unwrap(),
        ResidualNet::new(linear_blocks(1, 4, false, 1.0, &mut rng), Composition::Residual, Head::Identity).unwrap(),
    ];
    for net in nets {
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        let mut truncated = buf.clone();
        truncated.pop();
        assert!(read_checkpoint(truncated.as_slice()).is_err());
        buf.push(0);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
    assert!(read_checkpoint(&b"NOTANET!"[..]).is_err());
}
