//! Analytic gradients against central finite differences in float64.
//!
//! Each check panics on the first mismatch.

use moefield::autodiff::{Module, Stencil, Tape, Tensor, Var};
use moefield::expert::{Expert, ExpertBank};
use moefield::gate::Gate;
use moefield::grid::VoxelGrid;
use moefield::losses::{photometric_on, rw_aux_on, total_on, PenaltyKind, PenaltySchedule};
use moefield::mlp::Mlp;
use moefield::moe::{DensityFilter, Moe};
use moefield::renderer::{normalize, sample_ray, Ray, Sampling};
use moefield::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 100;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Floor keeps round-off in vanishing gradients from reading as relative error.
    diff / na.max(nb).max(1e-6)
}

/// Contracts `build`'s output with fixed random weights and compares the
/// gradient of every input with central differences.
fn check<F>(name: &str, seed: u64, inputs: Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let shape = tape.value(out).shape().to_vec();
        let mut wr = rng(seed ^ 0xabcdef);
        let w = tape.constant(rand_tensor(&mut wr, &shape, -1.0, 1.0));
        let prod = tape.mul(out, w).unwrap();
        let root = tape.sum(prod);
        let value = tape.value(root).data()[0];
        if !want_grads {
            return (value, Vec::new());
        }
        let grads = tape.backward(root).unwrap();
        (value, vars.iter().map(|&v| grads.get(v).unwrap().to_vec()).collect())
    };
    let (_, analytic) = eval(&inputs, true);
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, nv) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            *nv = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
        }
        let e = rel_err(&analytic[i], &numeric);
        assert!(e < TOL, "{name} seed {seed} input {i}: relative error {e:e}");
    }
}

pub fn elementwise_ops() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
        check("add/sub/mul/scale/square", seed, vec![a, b], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let p = t.mul(s, d)?;
            let q = t.square(v[1]);
            let q = t.scale(q, 0.7);
            t.add(p, q)
        });
        let a = rand_tensor(&mut r, &[5], -2.0, 2.0);
        check("sum/mean", seed, vec![a], |t, v| {
            let sq = t.square(v[0]);
            let s = t.sum(sq);
            let m = t.mean(v[0])?;
            let m = t.square(m);
            t.add(s, m)
        });
    }
}

pub fn activations() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = rand_tensor(&mut r, &[4, 3], -6.0, 6.0);
        check("softplus", seed, vec![a.clone()], |t, v| Ok(t.softplus(v[0])));
        check("sigmoid", seed, vec![a], |t, v| Ok(t.sigmoid(v[0])));
        // keep clear of the kink so the differences do not straddle it
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let x: f64 = r.gen_range(0.01..3.0);
                if r.gen_bool(0.5) {
                    -x
                } else {
                    x
                }
            })
            .collect();
        check("relu", seed, vec![Tensor::matrix(4, 3, data).unwrap()], |t, v| Ok(t.relu(v[0])));
    }
}

pub fn matmul_and_rows() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[3, 5], -1.0, 1.0);
        let row = rand_tensor(&mut r, &[5], -1.0, 1.0);
        check("matmul/add_row", seed, vec![a, b, row], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            t.add_row(m, v[2])
        });
        let a = rand_tensor(&mut r, &[4, 3], -3.0, 3.0);
        check("softmax_rows", seed, vec![a.clone()], |t, v| t.softmax_rows(v[0]));
        check("sum_rows", seed, vec![a.clone()], |t, v| {
            let sq = t.square(v[0]);
            t.sum_rows(sq)
        });
        let b = rand_tensor(&mut r, &[4, 2], -3.0, 3.0);
        check("concat_cols/reshape", seed, vec![a, b], |t, v| {
            let c = t.concat_cols(v[0], v[1])?;
            let sq = t.square(c);
            t.reshape(sq, vec![2, 10])
        });
    }
}

pub fn gather_and_scatter() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let probs = rand_tensor(&mut r, &[4, 3], 0.0, 1.0);
        let src = rand_tensor(&mut r, &[5, 3], -1.0, 1.0);
        let idx: Vec<usize> = (0..5).map(|_| r.gen_range(0..12)).collect();
        let rows: Vec<usize> = (0..5).map(|_| r.gen_range(0..5)).collect();
        let slots: Vec<usize> = (0..5).map(|_| r.gen_range(0..7)).collect();
        check("gather_elems/gather_scale/scatter_add_rows", seed, vec![probs, src], |t, v| {
            let w = t.gather_elems(v[0], idx.clone())?;
            let g = t.gather_scale(v[1], rows.clone(), w)?;
            let sq = t.square(g);
            t.scatter_add_rows(sq, slots.clone(), 7)
        });
    }
}

pub fn interpolation() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let res = [r.gen_range(2..5), r.gen_range(2..5), r.gen_range(2..5)];
        let c = r.gen_range(1..4);
        let grid = VoxelGrid::<f64>::from_values(res, c, vec![0.0; res.iter().product::<usize>() * c]).unwrap();
        let stencils: Vec<Stencil<f64>> =
            (0..6).map(|_| grid.stencil([r.gen_range(-0.1..1.1), r.gen(), r.gen()])).collect();
        let values = rand_tensor(&mut r, &[res[0], res[1], res[2], c], -2.0, 2.0);
        check("interp", seed, vec![values], |t, v| {
            let i = t.interp(v[0], stencils.clone())?;
            Ok(t.softplus(i))
        });
    }
}

pub fn compositing() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (rays, n) = (3, r.gen_range(2..9));
        let sigma = rand_tensor(&mut r, &[rays, n], 0.0, 8.0);
        let rgb = rand_tensor(&mut r, &[rays * n, 3], 0.0, 1.0);
        let delta: Vec<f64> = (0..rays * n).map(|_| r.gen_range(0.01..0.3)).collect();
        check("composite", seed, vec![sigma, rgb], |t, v| t.composite(v[0], v[1], delta.clone()));
    }
}

pub fn mlp() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let net = Mlp::<f64>::new(&[5, 7, 6, 3], &mut r).unwrap();
        // resample inputs until no hidden pre-activation sits near the ReLU kink
        let input = loop {
            let x = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);
            let mut h = x.data().to_vec();
            let mut width = 5;
            let mut clear = true;
            for layer in &net.layers()[..2] {
                let out = layer.fan_out();
                let mut z = vec![0.0; 4 * out];
                for row in 0..4 {
                    for o in 0..out {
                        z[row * out + o] = layer.bias.data()[o]
                            + (0..width).map(|i| h[row * width + i] * layer.weight.data()[i * out + o]).sum::<f64>();
                    }
                }
                clear &= z.iter().all(|v| v.abs() > 1e-3);
                h = z.into_iter().map(|v| v.max(0.0)).collect();
                width = out;
            }
            if clear {
                break x;
            }
        };
        let mut inputs = vec![input];
        inputs.extend(net.parameters().into_iter().cloned());
        check("mlp", seed, inputs, |t, v| {
            let mut h = v[0];
            for l in 0..3 {
                let z = t.matmul(h, v[1 + 2 * l])?;
                let z = t.add_row(z, v[2 + 2 * l])?;
                h = if l < 2 { t.relu(z) } else { z };
            }
            Ok(h)
        });
    }
}

pub fn losses() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let rgb = rand_tensor(&mut r, &[6, 3], 0.0, 1.0);
        let truth: Vec<f64> = (0..18).map(|_| r.gen()).collect();
        check("photometric", seed, vec![rgb.clone()], |t, v| photometric_on(t, v[0], &truth));

        let m = r.gen_range(3..6);
        let b = r.gen_range(2..9);
        let k = r.gen_range(1..=m);
        let logits = rand_tensor(&mut r, &[b, m], -2.0, 2.0);
        let mut counts = vec![0u64; m];
        for _ in 0..b * k {
            counts[r.gen_range(0..m)] += 1;
        }
        let kind = PenaltyKind::ALL[r.gen_range(0..4)];
        let weights = PenaltySchedule::new(kind, m).unwrap().weights;
        check("rw_aux", seed, vec![logits.clone()], |t, v| {
            let p = t.softmax_rows(v[0])?;
            rw_aux_on(t, p, &counts, &weights)
        });
        let lambda = r.gen_range(0.0..0.1);
        check("total", seed, vec![rgb, logits], |t, v| {
            let ln = photometric_on(t, v[0], &truth)?;
            let p = t.softmax_rows(v[1])?;
            let la = rw_aux_on(t, p, &counts, &weights)?;
            total_on(t, ln, la, lambda)
        });
    }
}

/// True when every hidden pre-activation of `net` on `rows` is at least
/// `margin` away from the ReLU kink.
fn clear_of_kinks(net: &Mlp<f64>, rows: &[Vec<f64>], margin: f64) -> bool {
    let hidden = net.layers().len() - 1;
    rows.iter().all(|row| {
        let mut h = row.clone();
        net.layers()[..hidden].iter().all(|layer| {
            let z: Vec<f64> = (0..layer.fan_out())
                .map(|o| {
                    layer.bias.data()[o]
                        + h.iter()
                            .enumerate()
                            .map(|(i, v)| v * layer.weight.data()[i * layer.fan_out() + o])
                            .sum::<f64>()
                })
                .collect();
            let ok = z.iter().all(|v| v.abs() > margin);
            h = z.into_iter().map(|v| v.max(0.0)).collect();
            ok
        })
    })
}

fn expert_rows(e: &Expert<f64>, pts: &[[f64; 3]], enc: &[[f64; 12]]) -> Vec<Vec<f64>> {
    pts.iter()
        .zip(enc)
        .map(|(&x, d)| {
            let mut row = e.feature_grid().interpolate(x);
            row.extend_from_slice(d);
            row
        })
        .collect()
}

fn random_points(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect()
}

fn random_encodings(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 12]> {
    (0..n)
        .map(|_| {
            let d = normalize([r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]);
            moefield::expert::encode_direction(d)
        })
        .collect()
}

/// Central differences of `loss` over a sample of coordinates of every parameter.
fn check_module<M: Module<f64>>(
    name: &str,
    seed: u64,
    module: &mut M,
    coords: usize,
    loss: impl Fn(&M, bool) -> (f64, Vec<Vec<f64>>),
) {
    let (_, analytic) = loss(module, true);
    let mut r = rng(seed ^ 0x5eed);
    let sizes: Vec<usize> = module.parameters().iter().map(|p| p.numel()).collect();
    for (p, &size) in sizes.iter().enumerate() {
        let picks: Vec<usize> = (0..coords.min(size)).map(|_| r.gen_range(0..size)).collect();
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &j in &picks {
            let orig = module.parameters()[p].data()[j];
            module.parameters_mut()[p].data_mut()[j] = orig + H;
            let up = loss(module, false).0;
            module.parameters_mut()[p].data_mut()[j] = orig - H;
            let down = loss(module, false).0;
            module.parameters_mut()[p].data_mut()[j] = orig;
            a.push(analytic[p][j]);
            n.push((up - down) / (2.0 * H));
        }
        let e = rel_err(&a, &n);
        assert!(e < TOL, "{name} seed {seed} parameter {p}: relative error {e:e}\n{a:?}\n{n:?}");
    }
}

pub fn expert_forward() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut expert = Expert::<f64>::new(0, [3, 4, 3], 3, &mut r).unwrap();
        for v in expert.density_grid_mut().values_mut().data_mut() {
            *v = r.gen_range(-2.0..2.0);
        }
        let (pts, enc) = loop {
            let pts = random_points(&mut r, 5);
            let enc = random_encodings(&mut r, 5);
            if clear_of_kinks(expert.color_mlp(), &expert_rows(&expert, &pts, &enc), 1e-3) {
                break (pts, enc);
            }
        };
        let enc = Tensor::matrix(5, 12, enc.concat()).unwrap();
        let w: Vec<f64> = (0..20).map(|_| r.gen_range(-1.0..1.0)).collect();
        check_module("expert", seed, &mut expert, 12, |e, grads| {
            let mut t = Tape::new();
            let vars = e.bind(&mut t);
            let enc = t.constant(enc.clone());
            let (s, c) = e.forward_on(&mut t, &vars, &pts, enc).unwrap();
            let both = t.concat_cols(s, c).unwrap();
            let wv = t.constant(Tensor::matrix(5, 4, w.clone()).unwrap());
            let prod = t.mul(both, wv).unwrap();
            let root = t.sum(prod);
            let value = t.value(root).data()[0];
            if !grads {
                return (value, Vec::new());
            }
            let g = t.backward(root).unwrap();
            (value, vars.vars().iter().map(|&v| g.get(v).unwrap().to_vec()).collect())
        });
    }
}

fn randomize_gate(gate: &mut Gate<f64>, r: &mut ChaCha8Rng) {
    for p in gate.parameters_mut() {
        for v in p.data_mut() {
            *v = r.gen_range(-0.8..0.8);
        }
    }
}

pub fn gate_probabilities() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut gate = Gate::<f64>::new(3, 4, seed).unwrap();
        randomize_gate(&mut gate, &mut r);
        let pts = random_points(&mut r, 4);
        check_module("gate", seed, &mut gate, 10, |g, grads| {
            let mut t = Tape::new();
            let vars = g.bind(&mut t, true);
            let p = g.probs_on(&mut t, &vars, &pts).unwrap();
            let col = t.gather_elems(p, (0..4).map(|i| i * 3).collect()).unwrap();
            let root = t.sum(col);
            let value = t.value(root).data()[0];
            if !grads {
                return (value, Vec::new());
            }
            let gr = t.backward(root).unwrap();
            (value, vars.vars().iter().map(|&v| gr.get(v).unwrap().to_vec()).collect())
        });
    }
}

/// The whole mixture, wrapped so the difference helper sees every parameter.
struct Whole(Moe<f64>);

impl Module<f64> for Whole {
    fn parameters(&self) -> Vec<&Tensor<f64>> {
        let mut p = self.0.bank.parameters();
        p.extend(self.0.gate.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut p = self.0.bank.parameters_mut();
        p.extend(self.0.gate.parameters_mut());
        p
    }
}

pub fn mixture_total_loss() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let bank = ExpertBank::<f64>::build_with_features(12, 3, 2, seed).unwrap();
        let mut gate = Gate::<f64>::new(3, 4, seed).unwrap();
        randomize_gate(&mut gate, &mut r);
        let bank_ref = &bank;
        let gate_ref = &gate;
        let rays: Vec<_> = loop {
            let rays: Vec<_> = (0..3)
                .map(|_| {
                    let o = [r.gen_range(0.2..0.8), r.gen_range(0.2..0.8), -0.5];
                    let d = normalize([r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2), 1.0]);
                    let ray = Ray::through_unit_cube(o, d).unwrap();
                    sample_ray(&ray, 6, Sampling::Stratified(seed)).unwrap()
                })
                .collect();
            let pts: Vec<[f64; 3]> = rays.iter().flat_map(|s| s.positions.clone()).collect();
            let enc: Vec<[f64; 12]> =
                rays.iter().flat_map(|s| vec![moefield::expert::encode_direction(s.dir); 6]).collect();
            let gate_rows: Vec<Vec<f64>> = pts.iter().map(|&x| gate_ref.grid().interpolate(x)).collect();
            let clear = clear_of_kinks(gate_ref.mlp(), &gate_rows, 2e-4)
                && bank_ref.experts().iter().all(|e| clear_of_kinks(e.color_mlp(), &expert_rows(e, &pts, &enc), 2e-4));
            if clear {
                break rays;
            }
        };
        let filter = DensityFilter::new(VoxelGrid::filled([2, 2, 2], 1, 0.0).unwrap(), 1e-3).unwrap();
        let k = 1 + (seed as usize % 3);
        let mut whole = Whole(Moe::new(bank, gate, filter, k).unwrap());
        let truth: Vec<f64> = (0..9).map(|_| r.gen()).collect();
        let weights = PenaltySchedule::new(PenaltyKind::Geometric, 3).unwrap().weights;
        let base_counts = {
            let mut t = Tape::new();
            let vars = whole.0.bind(&mut t, true);
            whole.0.forward_batch(&mut t, &vars, &rays).unwrap().counts
        };
        check_module("mixture", seed, &mut whole, 6, |w, grads| {
            let mut t = Tape::new();
            let vars = w.0.bind(&mut t, true);
            let out = w.0.forward_batch(&mut t, &vars, &rays).unwrap();
            assert_eq!(out.counts, base_counts, "routing changed under a tiny perturbation");
            let ln = photometric_on(&mut t, out.rgb, &truth).unwrap();
            let la = rw_aux_on(&mut t, out.probs.unwrap(), &out.counts, &weights).unwrap();
            let root = total_on(&mut t, ln, la, 0.1).unwrap();
            let value = t.value(root).data()[0];
            if !grads {
                return (value, Vec::new());
            }
            let g = t.backward(root).unwrap();
            let mut all = vars.expert_vars();
            all.extend(vars.gate.vars());
            (value, all.iter().map(|&v| g.get(v).unwrap().to_vec()).collect())
        });
    }
}

/// Every check with a short name.
#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("elementwise_ops", elementwise_ops),
    ("activations", activations),
    ("matmul_and_rows", matmul_and_rows),
    ("gather_and_scatter", gather_and_scatter),
    ("interpolation", interpolation),
    ("compositing", compositing),
    ("mlp", mlp),
    ("losses", losses),
    ("expert_forward", expert_forward),
    ("gate_probabilities", gate_probabilities),
    ("mixture_total_loss", mixture_total_loss),
];
