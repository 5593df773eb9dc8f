//! Central-difference gradient checking against [`ResidualNet::backward`].

use ndarray::{Array2, ArrayView2};

use super::{Gradients, HiddenMask, ResidualNet, ScalePattern};
use crate::error::Result;

fn probe_loss(net: &ResidualNet, x: ArrayView2<f64>, s: &ScalePattern, masks: &[Option<HiddenMask>], weights: &Array2<f64>) -> Result<f64> {
    let tape = net.forward_masked(x, s, masks)?;
    Ok((&tape.output * weights).sum())
}

fn param_sizes(net: &ResidualNet, b: usize) -> Vec<usize> {
    if b < net.depth() {
        net.blocks()[b].params().iter().map(|p| p.len()).collect()
    } else {
        net.head().params().iter().map(|p| p.len()).collect()
    }
}

fn nudge(net: &mut ResidualNet, b: usize, pi: usize, e: usize, delta: f64) {
    let depth = net.depth();
    let mut params = if b < depth {
        net.blocks_mut()[b].params_mut()
    } else {
        net.head_mut().params_mut()
    };
    let p = &mut params[pi];
    let cols = p.ncols();
    p[[e / cols, e % cols]] += delta;
}

fn grad_entry(g: &Gradients, depth: usize, b: usize, pi: usize, e: usize) -> f64 {
    let m = if b < depth { &g.blocks[b][pi] } else { &g.head[pi] };
    m[[e / m.ncols(), e % m.ncols()]]
}

/// Largest `|analytic − fd| / (|analytic| + 1e-8)` over every parameter and
/// input entry, for the objective `Σ weights ⊙ F(x)`.
pub fn gradient_check(
    net: &ResidualNet,
    x: ArrayView2<f64>,
    scales: &ScalePattern,
    masks: &[Option<HiddenMask>],
    weights: &Array2<f64>,
    h: f64,
) -> Result<f64> {
    let mut net = net.clone();
    let tape = net.forward_masked(x, scales, masks)?;
    let grads = net.backward(&tape, weights.view())?;
    let depth = net.depth();
    let rel = |an: f64, fd: f64| (an - fd).abs() / (an.abs() + 1e-8);
    let mut worst = 0.0f64;
    for b in 0..=depth {
        for (pi, n) in param_sizes(&net, b).into_iter().enumerate() {
            for e in 0..n {
                nudge(&mut net, b, pi, e, h);
                let up = probe_loss(&net, x, scales, masks, weights)?;
                nudge(&mut net, b, pi, e, -2.0 * h);
                let down = probe_loss(&net, x, scales, masks, weights)?;
                nudge(&mut net, b, pi, e, h);
                worst = worst.max(rel(grad_entry(&grads, depth, b, pi, e), (up - down) / (2.0 * h)));
            }
        }
    }
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut xp = x.to_owned();
            xp[[i, j]] += h;
            let mut xm = x.to_owned();
            xm[[i, j]] -= h;
            let fd = (probe_loss(&net, xp.view(), scales, masks, weights)? - probe_loss(&net, xm.view(), scales, masks, weights)?) / (2.0 * h);
            worst = worst.max(rel(grads.input[[i, j]], fd));
        }
    }
    Ok(worst)
}
