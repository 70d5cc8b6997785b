//! Independent reference implementations used by the integration suites.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use poimlab::analysis;
use poimlab::inference::{ModelArch, QuantizedModel, TreeNode};
use rand::Rng;

/// Truncating `w * x / s` with plain `i128` arithmetic.
fn term(w: i128, x: i128, s: i128) -> i128 {
    w.checked_mul(x).expect("oracle operands stay small") / s
}

fn dense(w: &[i128], b: i128, x: &[i128], s: i128) -> i128 {
    let mut z = b;
    for (wi, xi) in w.iter().zip(x) {
        z += term(*wi, *xi, s);
    }
    z
}

/// Integer forward pass written directly from the layer layouts.
pub fn oracle_logit(m: &QuantizedModel, x: &[i128]) -> i128 {
    let s = m.scale.value();
    let (w, b) = (&m.weights, &m.biases);
    match &m.arch {
        ModelArch::Linear { .. } => dense(w, b[0], x, s),
        ModelArch::Mlp { layers, .. } => {
            let mut a = x.to_vec();
            let (mut wo, mut bo) = (0, 0);
            for (l, &width) in layers.iter().enumerate() {
                let fan = a.len();
                let z: Vec<i128> = (0..width)
                    .map(|i| dense(&w[wo + i * fan..wo + (i + 1) * fan], b[bo + i], &a, s))
                    .collect();
                wo += width * fan;
                bo += width;
                if l == layers.len() - 1 {
                    return z[0];
                }
                a = z.into_iter().map(|v| v.max(0)).collect();
            }
            unreachable!()
        }
        ModelArch::Cnn1d { inputs, filters, kernel } => {
            let o = inputs - kernel + 1;
            let mut feats = Vec::new();
            for f in 0..*filters {
                for p in 0..o {
                    feats.push(dense(&w[f * kernel..(f + 1) * kernel], b[f], &x[p..p + kernel], s).max(0));
                }
            }
            dense(&w[filters * kernel..], b[*filters], &feats, s)
        }
        ModelArch::Rnn { inputs, units, timesteps } => {
            let width = inputs.div_ceil(*timesteps);
            let mut padded = x.to_vec();
            padded.resize(width * timesteps, 0);
            let wx = &w[..units * width];
            let wh = &w[units * width..units * width + units * units];
            let wo = &w[units * width + units * units..];
            let mut h = vec![0i128; *units];
            for t in 0..*timesteps {
                let xt = &padded[t * width..(t + 1) * width];
                h = (0..*units)
                    .map(|u| {
                        let z = dense(&wx[u * width..(u + 1) * width], b[u], xt, s);
                        dense(&wh[u * units..(u + 1) * units], z, &h, s).max(0)
                    })
                    .collect();
            }
            dense(wo, b[*units], &h, s)
        }
        ModelArch::DecisionTree { .. } => panic!("trees have no logit"),
    }
}

pub fn oracle_label(m: &QuantizedModel, x: &[i128]) -> u8 {
    if let ModelArch::DecisionTree { nodes, .. } = &m.arch {
        let mut i = 0;
        loop {
            match nodes[i] {
                TreeNode::Leaf { label } => return label,
                TreeNode::Split { feature, left, right } => {
                    i = if x[feature] <= m.weights[i] { left } else { right };
                }
            }
        }
    }
    u8::from(oracle_logit(m, x) > 0)
}

/// Every architecture with `d` inputs and a few hidden units.
pub fn small_archs(d: usize) -> Vec<ModelArch> {
    let mut out = vec![
        ModelArch::Linear { inputs: d },
        ModelArch::Mlp {
            inputs: d,
            layers: vec![2, 1],
        },
        ModelArch::Mlp {
            inputs: d,
            layers: vec![3, 2, 1],
        },
        ModelArch::Rnn {
            inputs: d,
            units: 2,
            timesteps: d,
        },
        ModelArch::DecisionTree {
            inputs: d,
            nodes: vec![
                TreeNode::Split {
                    feature: 0,
                    left: 1,
                    right: 2,
                },
                TreeNode::Split {
                    feature: d - 1,
                    left: 3,
                    right: 4,
                },
                TreeNode::Leaf { label: 1 },
                TreeNode::Leaf { label: 0 },
                TreeNode::Leaf { label: 1 },
            ],
        },
    ];
    for k in 1..=d {
        out.push(ModelArch::Cnn1d {
            inputs: d,
            filters: 2,
            kernel: k,
        });
    }
    if d > 1 {
        out.push(ModelArch::Rnn {
            inputs: d,
            units: 2,
            timesteps: 1,
        });
    }
    out
}

/// Random raws in `[-bound, bound]` for every parameter of `arch`.
pub fn random_model(arch: ModelArch, s: poimlab::fixedpoint::Scale, bound: i128, rng: &mut impl Rng) -> QuantizedModel {
    let w = (0..arch.weight_count()).map(|_| rng.random_range(-bound..=bound)).collect();
    let b = (0..arch.bias_count()).map(|_| rng.random_range(-bound..=bound)).collect();
    QuantizedModel::new(arch, w, b, s).unwrap()
}

/// Every point of `{lo..=hi}^d`.
pub fn grid(d: usize, lo: i128, hi: i128) -> impl Iterator<Item = Vec<i128>> {
    let side = (hi - lo + 1) as usize;
    (0..side.pow(d as u32)).map(move |mut n| {
        (0..d)
            .map(|_| {
                let v = lo + (n % side) as i128;
                n /= side;
                v
            })
            .collect()
    })
}

const ROUND_CONSTANTS: [u64; 24] = [
    0x0000000000000001,
    0x0000000000008082,
    0x800000000000808a,
    0x8000000080008000,
    0x000000000000808b,
    0x0000000080000001,
    0x8000000080008081,
    0x8000000000008009,
    0x000000000000008a,
    0x0000000000000088,
    0x0000000080008009,
    0x000000008000000a,
    0x000000008000808b,
    0x800000000000008b,
    0x8000000000008089,
    0x8000000000008003,
    0x8000000000008002,
    0x8000000000000080,
    0x000000000000800a,
    0x800000008000000a,
    0x8000000080008081,
    0x8000000000008080,
    0x0000000080000001,
    0x8000000080008008,
];

fn keccak_f(a: &mut [u64; 25]) {
    for rc in ROUND_CONSTANTS {
        // theta
        let c: Vec<u64> = (0..5).map(|x| (0..5).fold(0, |acc, y| acc ^ a[x + 5 * y])).collect();
        for x in 0..5 {
            let d = c[(x + 4) % 5] ^ c[(x + 1) % 5].rotate_left(1);
            for y in 0..5 {
                a[x + 5 * y] ^= d;
            }
        }
        // rho and pi
        let mut b = [0u64; 25];
        let (mut x, mut y) = (1usize, 0usize);
        let mut current = a[1];
        for t in 0..24u32 {
            let (nx, ny) = (y, (2 * x + 3 * y) % 5);
            let next = a[nx + 5 * ny];
            b[nx + 5 * ny] = current.rotate_left(((t + 1) * (t + 2) / 2) % 64);
            current = next;
            x = nx;
            y = ny;
        }
        b[0] = a[0];
        // chi
        for y in 0..5 {
            for x in 0..5 {
                a[x + 5 * y] = b[x + 5 * y] ^ (!b[(x + 1) % 5 + 5 * y] & b[(x + 2) % 5 + 5 * y]);
            }
        }
        // iota
        a[0] ^= rc;
    }
}

/// Keccak-256 with the original `0x01` domain padding.
pub fn keccak256_oracle(data: &[u8]) -> [u8; 32] {
    const RATE: usize = 136;
    let mut msg = data.to_vec();
    msg.push(0x01);
    while !msg.len().is_multiple_of(RATE) {
        msg.push(0);
    }
    *msg.last_mut().unwrap() |= 0x80;
    let mut state = [0u64; 25];
    for block in msg.chunks(RATE) {
        for (i, lane) in block.chunks(8).enumerate() {
            state[i] ^= u64::from_le_bytes(lane.try_into().unwrap());
        }
        keccak_f(&mut state);
    }
    let mut out = [0u8; 32];
    for (i, chunk) in out.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&state[i].to_le_bytes());
    }
    out
}

/// Explained variance ratios from nalgebra's dense symmetric solver.
pub fn nalgebra_ratios(points: &[Vec<f64>]) -> Vec<f64> {
    let z = analysis::standardize(points);
    let (n, d) = (z.len(), z[0].len());
    let m = DMatrix::from_fn(n, d, |i, j| z[i][j]);
    let cov = m.transpose() * &m / (n as f64 - 1.0);
    let mut values: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    values.iter().map(|v| v.max(0.0) / total).collect()
}
