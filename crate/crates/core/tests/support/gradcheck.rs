use ddm_core::nn::{Graph, Heads, NetConfig, RestorationNet, Var};
use ddm_core::{RngStream, Tensor};

const H: f64 = 1e-4;
/// Largest acceptable relative error between backward and central differences.
pub const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares backward against central differences for every entry of every
/// leaf. `f` must build a scalar from the leaves it is handed.
fn check(leaves: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |ls: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
        let root = f(&mut g, &vars);
        g.value(root).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&mut g, &vars);
    let grads = g.backward(root).unwrap();
    let mut worst = 0.0f64;
    for (k, (v, t)) in vars.iter().zip(leaves).enumerate() {
        let analytic = grads.get_or_zeros(*v, t.dims());
        for i in 0..t.numel() {
            let mut ls = leaves.to_vec();
            ls[k].data_mut()[i] = t.data()[i] + H;
            let up = eval(&ls);
            ls[k].data_mut()[i] = t.data()[i] - H;
            let down = eval(&ls);
            let numeric = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// `Σ y ⊙ r` for a fixed random weighting `r`, so every output entry matters.
fn weigh(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let r = RngStream::new(seed).gaussian::<f64>(g.value(y).dims());
    let r = g.leaf(r);
    let p = g.mul(y, r).unwrap();
    g.sum(p)
}

/// Worst error of `case` over three random instances.
fn over_instances(case: impl Fn(usize, RngStream) -> f64) -> f64 {
    (0..3)
        .map(|i| case(i, RngStream::new(1000 + i as u64)))
        .fold(0.0, f64::max)
}

pub fn conv2d() -> f64 {
    over_instances(|_, mut rng| {
        let leaves = [
            rng.gaussian(&[2, 5, 6]),
            rng.gaussian(&[3, 2, 3, 3]),
            rng.gaussian(&[3]),
        ];
        check(&leaves, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2]).unwrap();
            weigh(g, y, 1)
        })
    })
}

pub fn linear() -> f64 {
    over_instances(|_, mut rng| {
        let leaves = [rng.gaussian(&[7]), rng.gaussian(&[4, 7]), rng.gaussian(&[4])];
        check(&leaves, |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            weigh(g, y, 2)
        })
    })
}

pub fn matmul() -> f64 {
    over_instances(|_, mut rng| {
        let leaves = [rng.gaussian(&[3, 5]), rng.gaussian(&[5, 2])];
        check(&leaves, |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weigh(g, y, 3)
        })
    })
}

pub fn silu() -> f64 {
    over_instances(|_, mut rng| {
        let leaves = [rng.gaussian::<f64>(&[4, 4]).scale(3.0)];
        check(&leaves, |g, v| {
            let y = g.silu(v[0]);
            weigh(g, y, 4)
        })
    })
}

pub fn avg_pool2() -> f64 {
    over_instances(|_, mut rng| {
        check(&[rng.gaussian(&[2, 4, 6])], |g, v| {
            let y = g.avg_pool2(v[0]).unwrap();
            weigh(g, y, 5)
        })
    })
}

pub fn upsample2() -> f64 {
    over_instances(|_, mut rng| {
        check(&[rng.gaussian(&[2, 3, 4])], |g, v| {
            let y = g.upsample2(v[0]).unwrap();
            weigh(g, y, 6)
        })
    })
}

pub fn concat_and_channel_bias() -> f64 {
    over_instances(|_, mut rng| {
        let leaves = [rng.gaussian(&[2, 3, 3]), rng.gaussian(&[1, 3, 3]), rng.gaussian(&[3])];
        check(&leaves, |g, v| {
            let c = g.concat_channels(v[0], v[1]).unwrap();
            let y = g.channel_bias(c, v[2]).unwrap();
            weigh(g, y, 7)
        })
    })
}

pub fn dropout_with_a_fixed_mask() -> f64 {
    over_instances(|i, mut rng| {
        check(&[rng.gaussian(&[5, 5])], |g, v| {
            let mut mask_rng = RngStream::new(50 + i as u64);
            let y = g.dropout(v[0], 0.3, &mut mask_rng).unwrap();
            weigh(g, y, 8)
        })
    })
}

pub fn elementwise_ops() -> f64 {
    over_instances(|_, mut rng| {
        let leaves = [rng.gaussian(&[3, 4]), rng.gaussian(&[3, 4])];
        check(&leaves, |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let b = g.sub(v[0], v[1]).unwrap();
            let c = g.mul(a, b).unwrap();
            let c = g.scale(c, 0.7);
            let e = g.exp(v[1]);
            let s = g.square(v[0]);
            let t = g.add(c, e).unwrap();
            let t = g.add(t, s).unwrap();
            let m = g.mean(t);
            let w = weigh(g, t, 9);
            g.add(m, w).unwrap()
        })
    })
}

pub fn clamp_away_from_its_bounds() -> f64 {
    over_instances(|_, mut rng| {
        // keep every entry at least 0.05 from ±1
        let x = rng
            .uniform::<f64>(&[20])
            .map(|u| if u < 0.5 { -1.8 + 1.5 * u } else { -0.7 + 2.4 * u });
        check(&[x], |g, v| {
            let y = g.clamp(v[0], -1.0, 1.0);
            weigh(g, y, 10)
        })
    })
}

pub fn mae_loss() -> f64 {
    over_instances(|_, mut rng| {
        let pred: Tensor<f64> = rng.gaussian(&[4, 4]);
        let offset = rng.uniform::<f64>(&[4, 4]);
        let sign = rng.uniform::<f64>(&[4, 4]);
        let target = Tensor::from_fn(&[4, 4], |i| {
            let d = 0.05 + offset.data()[i];
            pred.data()[i] + if sign.data()[i] < 0.5 { d } else { -d }
        });
        check(&[pred], |g, v| g.mae(v[0], &target).unwrap())
    })
}

pub fn gaussian_nll() -> f64 {
    over_instances(|_, mut rng| {
        let target = rng.gaussian::<f64>(&[3, 3]);
        let leaves = [rng.gaussian(&[3, 3]), rng.gaussian::<f64>(&[3, 3]).scale(0.5)];
        check(&leaves, |g, v| g.gaussian_nll(v[0], v[1], &target).unwrap())
    })
}

/// Every parameter of the full network through each loss.
fn check_net(heads: Heads, dropout: bool, seed: u64) -> f64 {
    let cfg = NetConfig {
        in_channels: 1,
        base_width: 2,
        time_embed_width: 4,
        dropout: 0.2,
        heads,
    };
    let mut rng = RngStream::new(seed);
    let net = RestorationNet::<f64>::new(cfg, &mut rng).unwrap().with_dropout(dropout);
    let input = rng.uniform::<f64>(&[1, 4, 4]);
    let target = rng.uniform::<f64>(&[1, 4, 4]);
    let mask_seed = seed + 7;
    let loss_of = |net: &RestorationNet<f64>, g: &mut Graph<f64>| -> (Var, Vec<(String, Var)>) {
        let pv = net.param_vars(g);
        let x = g.leaf(input.clone());
        let mut mask_rng = RngStream::new(mask_seed);
        let out = net.build(g, &pv, x, 0.37, Some(&mut mask_rng)).unwrap();
        let root = match out.log_sigma {
            Some(ls) => g.gaussian_nll(out.mu, ls, &target).unwrap(),
            None => g.mae(out.mu, &target).unwrap(),
        };
        (root, pv.into_iter().collect())
    };
    let mut g = Graph::new();
    let (root, vars) = loss_of(&net, &mut g);
    let grads = g.backward(root).unwrap();
    let mut worst = 0.0f64;
    for (name, v) in vars {
        let theta = net.params().get(&name).unwrap().clone();
        let analytic = grads.get_or_zeros(v, theta.dims());
        for i in 0..theta.numel() {
            let eval = |delta: f64| {
                let mut n = net.clone();
                n.params_mut().get_mut(&name).unwrap().data_mut()[i] = theta.data()[i] + delta;
                let mut g = Graph::new();
                let (root, _) = loss_of(&n, &mut g);
                g.value(root).item().unwrap()
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

pub fn network_under_nll() -> f64 {
    (0..3)
        .map(|s| check_net(Heads::MeanLogVar, false, 20 + s))
        .fold(0.0, f64::max)
}

pub fn network_under_mae_with_dropout() -> f64 {
    (0..3)
        .map(|s| check_net(Heads::MeanOnly, true, 30 + s))
        .fold(0.0, f64::max)
}

/// A named check returning its worst relative error.
pub type Case = (&'static str, fn() -> f64);

/// Every case, by name.
pub const CASES: &[Case] = &[
    ("conv2d", conv2d),
    ("linear", linear),
    ("matmul", matmul),
    ("silu", silu),
    ("avg_pool2", avg_pool2),
    ("upsample2", upsample2),
    ("concat_channels+channel_bias", concat_and_channel_bias),
    ("dropout", dropout_with_a_fixed_mask),
    ("elementwise", elementwise_ops),
    ("clamp", clamp_away_from_its_bounds),
    ("mae", mae_loss),
    ("gaussian_nll", gaussian_nll),
    ("network/nll", network_under_nll),
    ("network/mae+dropout", network_under_mae_with_dropout),
];
