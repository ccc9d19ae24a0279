//! Central finite differences and the block-by-block gradient check harness.
//!
//! The finite-difference path only ever calls forward code, so it stays an
//! independent oracle for everything `Graph::backward` produces.

use crate::autodiff::{AttnMask, Graph, Var};
use crate::model::{ModelConfig, PsNet};
use crate::nn::{self, AttentionParams, LayerNormParams, MlpParams};
use crate::rng::{derive_seed, DetRng};
use crate::tensor::{Real, Result, Tensor};

/// Central finite difference of a scalar function at every coordinate of `x`.
pub fn fd_gradient<R: Real>(
    f: impl Fn(&Tensor<R>) -> R,
    x: &Tensor<R>,
    eps: f64,
) -> Tensor<R> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    let vals = fd_gradient_sampled(f, x, eps, &coords);
    let mut out = Tensor::zeros(x.shape());
    for (&c, &v) in coords.iter().zip(&vals) {
        out.data_mut()[c] = R::from_f64(v);
    }
    out
}

/// Central finite difference at a chosen subset of coordinates.
pub fn fd_gradient_sampled<R: Real>(
    f: impl Fn(&Tensor<R>) -> R,
    x: &Tensor<R>,
    eps: f64,
    coords: &[usize],
) -> Vec<f64> {
    let eps_r = R::from_f64(eps);
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + eps_r;
        let above = f(&probe).to_f64();
        probe.data_mut()[c] = orig - eps_r;
        let below = f(&probe).to_f64();
        probe.data_mut()[c] = orig;
        out.push((above - below) / (2.0 * eps));
    }
    out
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Outcome of checking one block.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    /// (leaf index, coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

impl BlockReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Options for a harness run.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Max coordinates sampled per leaf tensor.
    pub max_coords_per_leaf: usize,
    /// Name of a block whose analytic gradient is deliberately corrupted
    /// before comparison; exercises the failure-reporting path.
    pub inject_fault: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 11,
            eps: 1e-5,
            tolerance: 1e-4,
            max_coords_per_leaf: 24,
            inject_fault: None,
        }
    }
}

/// A differentiable block under test: leaf tensors plus a builder that turns
/// them into a scalar readout on a fresh graph.
struct BlockCase {
    name: &'static str,
    leaves: Vec<Tensor<f64>>,
    build: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
}

impl BlockCase {
    fn loss_at(&self, leaves: &[Tensor<f64>]) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = (self.build)(&mut g, &vars).expect("block builds on valid shapes");
        g.value(loss).item()
    }

    fn analytic_grads(&self) -> Vec<Tensor<f64>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = (self.build)(&mut g, &vars).expect("block builds on valid shapes");
        let grads = g.backward(loss).expect("scalar loss");
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }

    fn check(&self, cfg: &GradCheckConfig) -> BlockReport {
        let mut analytic = self.analytic_grads();
        if cfg
            .inject_fault
            .as_deref()
            .is_some_and(|f| f == self.name)
        {
            analytic[0].data_mut()[0] += 1.0;
        }
        let mut rng = DetRng::new(derive_seed(cfg.seed, self.name));
        let mut max_rel = 0.0f64;
        let mut worst = (0usize, 0usize);
        let mut checked = 0usize;
        for (li, leaf) in self.leaves.iter().enumerate() {
            let coords = sample_coords(leaf.numel(), cfg.max_coords_per_leaf, &mut rng);
            let loss_fn = |probe: &Tensor<f64>| {
                let mut leaves: Vec<Tensor<f64>> = self.leaves.clone();
                leaves[li] = probe.clone();
                self.loss_at(&leaves)
            };
            let fd = fd_gradient_sampled(loss_fn, leaf, cfg.eps, &coords);
            for (&c, &fd_val) in coords.iter().zip(&fd) {
                let err = rel_error(analytic[li].data()[c], fd_val);
                if err > max_rel {
                    max_rel = err;
                    worst = (li, c);
                }
                checked += 1;
            }
        }
        BlockReport {
            name: self.name,
            max_rel_error: max_rel,
            worst,
            coords_checked: checked,
        }
    }
}

fn sample_coords(numel: usize, max: usize, rng: &mut DetRng) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    let mut picked = std::collections::BTreeSet::new();
    picked.insert(0);
    picked.insert(numel - 1);
    while picked.len() < max {
        picked.insert(rng.next_range(numel));
    }
    picked.into_iter().collect()
}

fn rand_tensor(shape: &[usize], rng: &mut DetRng, scale: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.next_uniform(-scale, scale)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree")
}

/// Weighted-sum readout; non-uniform weights catch transposition bugs that a
/// plain sum would miss.
fn readout(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = DetRng::new(derive_seed(seed, "readout"));
    let w = rand_tensor(g.value(out).shape(), &mut rng, 1.0);
    let wv = g.leaf(w);
    let prod = g.mul(out, wv)?;
    Ok(g.sum_all(prod))
}

/// Run sampled finite-difference checks over every block of the
/// architecture at a reduced 64-bit configuration.
pub fn run_block_checks(cfg: &GradCheckConfig) -> Vec<BlockReport> {
    block_cases(cfg.seed)
        .iter()
        .map(|case| case.check(cfg))
        .collect()
}

/// Reduced configuration used by the gradient-check harness.
pub fn reduced_config() -> ModelConfig {
    let mut cfg = ModelConfig::reduced();
    cfg.precision_bits = 64;
    cfg
}

fn block_cases(seed: u64) -> Vec<BlockCase> {
    let mut cases = Vec::new();
    let s = seed;

    cases.push(BlockCase {
        name: "matmul",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "matmul"));
            vec![
                rand_tensor(&[3, 4], &mut rng, 1.0),
                rand_tensor(&[4, 2], &mut rng, 1.0),
            ]
        },
        build: Box::new(move |g, v| {
            let c = g.matmul(v[0], v[1])?;
            readout(g, c, s)
        }),
    });

    cases.push(BlockCase {
        name: "elementwise_mul",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "elementwise_mul"));
            vec![
                rand_tensor(&[3, 3], &mut rng, 2.0),
                rand_tensor(&[3, 3], &mut rng, 2.0),
            ]
        },
        build: Box::new(move |g, v| {
            let c = g.mul(v[0], v[1])?;
            readout(g, c, s)
        }),
    });

    cases.push(BlockCase {
        name: "gelu",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "gelu"));
            vec![rand_tensor(&[2, 5], &mut rng, 2.0)]
        },
        build: Box::new(move |g, v| {
            let c = g.gelu(v[0]);
            readout(g, c, s)
        }),
    });

    cases.push(BlockCase {
        name: "relu",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "relu"));
            // Keep inputs away from the kink so central differences are valid.
            let mut t = rand_tensor(&[2, 5], &mut rng, 2.0);
            for v in t.data_mut() {
                if v.abs() < 1e-3 {
                    *v += 0.1;
                }
            }
            vec![t]
        },
        build: Box::new(move |g, v| {
            let c = g.relu(v[0]);
            readout(g, c, s)
        }),
    });

    cases.push(BlockCase {
        name: "softmax",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "softmax"));
            vec![rand_tensor(&[3, 5], &mut rng, 2.0)]
        },
        build: Box::new(move |g, v| {
            let c = g.softmax_rows(v[0])?;
            readout(g, c, s)
        }),
    });

    cases.push(BlockCase {
        name: "concat",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "concat"));
            vec![
                rand_tensor(&[2, 3], &mut rng, 1.0),
                rand_tensor(&[4, 3], &mut rng, 1.0),
            ]
        },
        build: Box::new(move |g, v| {
            let c = g.concat(&[v[0], v[1]], 0)?;
            readout(g, c, s)
        }),
    });

    cases.push(BlockCase {
        name: "layer_norm",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "layer_norm"));
            vec![
                rand_tensor(&[4, 6], &mut rng, 1.5),
                rand_tensor(&[6], &mut rng, 1.0),
                rand_tensor(&[6], &mut rng, 0.5),
            ]
        },
        build: Box::new(move |g, v| {
            let c = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            readout(g, c, s)
        }),
    });

    // Neural blocks at the reduced width: C=8, h=2.
    let cfg = reduced_config();
    let c = cfg.width;
    let h = cfg.heads;

    cases.push(BlockCase {
        name: "mlp",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "mlp"));
            let p = MlpParams::init_tensors(c, c, nn::Activation::Relu, &mut rng);
            let mut leaves = vec![rand_tensor(&[4, c], &mut rng, 1.0)];
            leaves.extend(p);
            leaves
        },
        build: Box::new(move |g, v| {
            let p = MlpParams::from_slice(c, c, nn::Activation::Relu, g, &v[1..]);
            let out = nn::mlp_forward(g, v[0], &p)?;
            readout(g, out, s)
        }),
    });

    cases.push(BlockCase {
        name: "attention",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "attention"));
            let p = AttentionParams::init_tensors(c, h, &mut rng);
            let mut leaves = vec![
                rand_tensor(&[3, c], &mut rng, 1.0),
                rand_tensor(&[5, c], &mut rng, 1.0),
                rand_tensor(&[5, c], &mut rng, 1.0),
            ];
            leaves.extend(p);
            leaves
        },
        build: Box::new(move |g, v| {
            let p = AttentionParams::from_slice(c, h, g, &v[3..]);
            let mask = AttnMask::new(
                3,
                5,
                vec![
                    true, true, false, true, true, //
                    true, true, true, true, false, //
                    false, true, true, true, true,
                ],
            )?;
            let out = nn::multi_head_attention(g, v[0], v[1], v[2], &p, Some(&mask))?;
            readout(g, out, s)
        }),
    });

    cases.push(BlockCase {
        name: "encoder_layer",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "encoder_layer"));
            let p = nn::EncoderLayerParams::init_tensors(c, h, &mut rng);
            let mut leaves = vec![rand_tensor(&[4, c], &mut rng, 1.0)];
            leaves.extend(p);
            leaves
        },
        build: Box::new(move |g, v| {
            let p = nn::EncoderLayerParams::from_slice(c, h, g, &v[1..]);
            let out = nn::encoding_layer_forward(g, v[0], &p)?;
            readout(g, out, s)
        }),
    });

    cases.push(BlockCase {
        name: "decoder_layer",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "decoder_layer"));
            let p = nn::DecoderLayerParams::init_tensors(c, h, &mut rng);
            let mut leaves = vec![
                rand_tensor(&[3, c], &mut rng, 1.0),
                rand_tensor(&[4, c], &mut rng, 1.0),
            ];
            leaves.extend(p);
            leaves
        },
        build: Box::new(move |g, v| {
            let p = nn::DecoderLayerParams::from_slice(c, h, g, &v[2..]);
            let out = nn::decoding_layer_forward(g, v[0], v[1], &p)?;
            readout(g, out, s)
        }),
    });

    let n = cfg.tokens();
    cases.push(BlockCase {
        name: "pdp_layer",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "pdp_layer"));
            let p = crate::model::PdpLayerParams::init_tensors(&cfg, &mut rng);
            let mut leaves = vec![
                rand_tensor(&[n, c], &mut rng, 1.0),
                rand_tensor(&[n, c], &mut rng, 1.0),
            ];
            leaves.extend(p);
            leaves
        },
        build: Box::new(move |g, v| {
            let cfg = reduced_config();
            let p = crate::model::PdpLayerParams::from_slice(&cfg, g, &v[2..]);
            let (_, _, fused) = crate::model::pdp_layer_forward(g, v[0], v[1], &p)?;
            readout(g, fused, s)
        }),
    });

    cases.push(BlockCase {
        name: "sr_module",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "sr_module"));
            let p = crate::model::SrModuleParams::init_tensors(&cfg, &mut rng);
            let mut leaves = vec![
                rand_tensor(&[n, c], &mut rng, 1.0),
                rand_tensor(&[n, c], &mut rng, 1.0),
            ];
            leaves.extend(p);
            leaves
        },
        build: Box::new(move |g, v| {
            let cfg = reduced_config();
            let p = crate::model::SrModuleParams::from_slice(&cfg, g, &v[2..]);
            let out = crate::model::sr_module_forward(g, 1, &[v[0], v[1]], &p)?;
            readout(g, out, s)
        }),
    });

    cases.push(BlockCase {
        name: "cross_entropy",
        leaves: {
            let mut rng = DetRng::new(derive_seed(s, "cross_entropy"));
            vec![rand_tensor(&[4, 11], &mut rng, 1.5)]
        },
        build: Box::new(move |g, v| g.cross_entropy(v[0], &[2, 7, 0, 10], 0)),
    });

    cases.push(BlockCase {
        name: "full_model",
        leaves: full_model_leaves(s),
        build: Box::new(move |g, v| full_model_loss(g, v, s)),
    });

    cases
}

fn full_model_leaves(seed: u64) -> Vec<Tensor<f64>> {
    let cfg = reduced_config();
    let model: PsNet<f64> = PsNet::init(&cfg, derive_seed(seed, "full_model_init"));
    model
        .params()
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect()
}

fn full_model_loss(g: &mut Graph<f64>, leaves: &[Var], seed: u64) -> Result<Var> {
    let cfg = reduced_config();
    let vars = crate::model::PsNetParams::from_leaf_slice(&cfg, leaves);
    let mut rng = DetRng::new(derive_seed(seed, "full_model_pair"));
    let pair = crate::data::ImagePair::random(cfg.image_h, cfg.image_w, &mut rng);
    let enc = crate::model::encode_on(g, &cfg, &vars, &pair)?;
    // Teacher-forced tokens over the reduced vocabulary.
    let input = [1usize, 4, 6, 5, 8];
    let targets = [4usize, 6, 5, 8, 2];
    let logits = crate::model::decode_train_on(g, &cfg, &vars, &enc.memories, &input)?;
    g.cross_entropy(logits, &targets, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_sum_is_all_ones() {
        let x = Tensor::from_vec(vec![2, 2], vec![0.3, -1.0, 2.0, 0.7]).unwrap();
        let g = fd_gradient(|t| t.data().iter().sum::<f64>(), &x, 1e-5);
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_of_square_at_three_is_six() {
        let x = Tensor::from_vec(vec![1], vec![3.0]).unwrap();
        let g = fd_gradient(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_agrees_with_backward_on_two_layer_mlp() {
        let mut rng = DetRng::new(derive_seed(3, "mlp_cross"));
        let tensors = MlpParams::init_tensors(6, 12, nn::Activation::Relu, &mut rng);
        let x = rand_tensor(&[3, 6], &mut rng, 1.0);
        let loss_of = |xt: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(xt.clone());
            let pv: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
            let p = MlpParams::from_slice(6, 12, nn::Activation::Relu, &mut g, &pv);
            let out = nn::mlp_forward(&mut g, xv, &p).unwrap();
            let loss = g.sum_all(out);
            g.value(loss).item()
        };
        let fd = fd_gradient(loss_of, &x, 1e-5);

        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let pv: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let p = MlpParams::from_slice(6, 12, nn::Activation::Relu, &mut g, &pv);
        let out = nn::mlp_forward(&mut g, xv, &p).unwrap();
        let loss = g.sum_all(out);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(xv).unwrap();
        for (a, f) in analytic.data().iter().zip(fd.data()) {
            assert!(rel_error(*a, *f) < 1e-4);
        }
    }
}
