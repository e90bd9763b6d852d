use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phytf::fdops::{d1, d2, laplacian, Axis, Boundary, DomainSpec};
use phytf::field::FieldSequence;
use phytf::harness::{decode_grid, encode_grid, relative_mse, Checkpoint, TrainConfig};
use phytf::losses::{assemble_total, causal_penalty, per_step_pde_loss, CausalState, LossWeights, PinnMse};
use phytf::model::{Model, ModelConfig};
use phytf::numcore::{Adam, AdamConfig, Lbfgs, LbfgsConfig};
use phytf::problems::{PDEProblem, ProblemName};
use phytf::sampler::{
    baseline_sample, cell_index, disc_loss_from_scores, filter_by_scores, gen_loss_from_scores,
    label_points, residual_features, Baseline, Gan, GanConfig, LabelStrategy, PointBatch,
};
use phytf::{Graph, Padding, ParamSet, Tensor, Var};

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

const OPS: usize = 12;

/// Applies op `k` to `x [r, c]`, possibly with random constant operands.
fn apply(k: usize, g: &mut Graph, x: Var, r: usize, c: usize, rng: &mut ChaCha8Rng) -> Var {
    match k {
        0 => g.tanh(x),
        1 => g.sigmoid(x),
        2 => g.square(x),
        3 => {
            let w = g.constant(&random_tensor(&[c, 3], rng));
            g.matmul(x, w).unwrap()
        }
        4 => g.softmax_rows(x, r <= c).unwrap(),
        5 => {
            let gam = g.constant(&random_tensor(&[c], rng));
            let bet = g.constant(&random_tensor(&[c], rng));
            g.layer_norm(x, gam, bet).unwrap()
        }
        6 => {
            let y = g.constant(&random_tensor(&[r, c], rng));
            g.mul(x, y).unwrap()
        }
        7 => {
            let f = g.reshape(x, &[1, r, c]).unwrap();
            let kern = g.constant(&random_tensor(&[1, 1, 3, 3], rng));
            g.conv2d(f, kern, Some(Padding::Periodic)).unwrap()
        }
        8 => {
            let b = g.constant(&random_tensor(&[c], rng));
            g.add_row(x, b).unwrap()
        }
        9 => g.transpose(x).unwrap(),
        10 => g.reduce_mean(x, &[0]).unwrap(),
        _ => {
            let xt = g.transpose(x).unwrap();
            g.matmul(x, xt).unwrap()
        }
    }
}

/// `sum(R * op(x))` for a fixed random read-out `R`.
fn op_loss(k: usize, x: &Tensor, seed: u64, trainable: bool) -> (f64, Option<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut g = Graph::new();
    let xv = if trainable {
        g.param(x.shape(), x.data().to_vec()).unwrap()
    } else {
        g.constant(x)
    };
    let y = apply(k, &mut g, xv, r, c, &mut rng);
    let ro = g.constant(&random_tensor(g.shape(y).to_vec().as_slice(), &mut rng));
    let p = g.mul(ro, y).unwrap();
    let l = g.sum(p);
    let v = g.scalar(l);
    if !trainable {
        return (v, None);
    }
    g.backward(l).unwrap();
    (v, Some(g.grad(xv).unwrap().to_vec()))
}

fn field(h: usize, w: usize, seed: u64) -> Tensor {
    random_tensor(&[h, w], &mut ChaCha8Rng::seed_from_u64(seed))
}

fn roll(t: &Tensor, di: usize, dj: usize) -> Tensor {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[h, w], |ix| t.at(&[(ix[0] + h - di) % h, (ix[1] + w - dj) % w]))
}

fn quadratic_step(seed: u64, memory: usize, steps: usize) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let diag: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..20.0)).collect();
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut opt = Lbfgs::new(LbfgsConfig {
        memory,
        ..LbfgsConfig::default()
    });
    let mut hist = Vec::new();
    for _ in 0..steps {
        let _ = opt.step(&mut x, |p: &[f64]| {
            let f = p.iter().zip(&diag).map(|(v, d)| 0.5 * d * v * v).sum();
            Ok((f, p.iter().zip(&diag).map(|(v, d)| d * v).collect()))
        });
        hist.push(opt.history_len());
    }
    (x, hist)
}

fn kg_small() -> PDEProblem {
    let d = DomainSpec::square(6, 1.0, 5, 0.2, Boundary::Dirichlet).unwrap();
    PDEProblem::klein_gordon(d, phytf::problems::KGParams { m: 3.0 }).unwrap()
}

fn spec_small() -> DomainSpec {
    DomainSpec::square(8, 1.0, 6, 0.5, Boundary::Periodic).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn op_gradients_match_finite_differences(k in 0..OPS, r in 2usize..5, c in 2usize..5, seed in any::<u64>()) {
        let x = random_tensor(&[r, c], &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let (_, ad) = op_loss(k, &x, seed, true);
        let ad = ad.unwrap();
        for i in 0..x.len() {
            let at = |d: f64| {
                let mut y = x.clone();
                y.data_mut()[i] += d;
                op_loss(k, &y, seed, false).0
            };
            // two steps: layer norm over near-equal entries needs the small
            // one, roundoff on tiny gradients the large one
            let err = [1e-3, 1e-4]
                .map(|h| {
                    let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                    (ad[i] - fd).abs() / ad[i].abs().max(fd.abs()).max(1e-6)
                })
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            prop_assert!(err <= 1e-5, "op {} entry {}: ad {} relative error {}", k, i, ad[i], err);
        }
    }

    #[test]
    fn periodic_conv_commutes_with_shifts(h in 3usize..9, w in 3usize..9, di in 0usize..9, dj in 0usize..9, seed in any::<u64>()) {
        let f = field(h, w, seed);
        let kern = random_tensor(&[1, 1, 3, 3], &mut ChaCha8Rng::seed_from_u64(seed ^ 7));
        let conv = |t: &Tensor| {
            let mut g = Graph::new();
            let fv = g.constant(&t.clone().reshape(&[1, h, w]).unwrap());
            let kv = g.constant(&kern);
            let o = g.conv2d(fv, kv, Some(Padding::Periodic)).unwrap();
            g.tensor(o).reshape(&[h, w]).unwrap()
        };
        let a = conv(&roll(&f, di % h, dj % w));
        let b = roll(&conv(&f), di % h, dj % w);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-13);
        }
    }

    #[test]
    fn graph_replay_is_bitwise(k in 0..OPS, r in 2usize..5, c in 2usize..5, seed in any::<u64>()) {
        let x = random_tensor(&[r, c], &mut ChaCha8Rng::seed_from_u64(seed));
        let a = op_loss(k, &x, seed, true);
        let b = op_loss(k, &x, seed, true);
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
    }

    #[test]
    fn adam_is_deterministic(seed in any::<u64>(), steps in 1usize..6) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamSet::new();
            p.push("w", random_tensor(&[3, 2], &mut rng));
            let mut opt = Adam::new(AdamConfig::default());
            for _ in 0..steps {
                let g: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                p.zero_grad();
                p.get_mut("w").unwrap().accumulate_grad(&g).unwrap();
                opt.step(&mut p).unwrap();
            }
            (p.flatten(), opt.export("a"))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn lbfgs_deterministic_with_bounded_history(seed in any::<u64>(), memory in 1usize..5, steps in 1usize..12) {
        let a = quadratic_step(seed, memory, steps);
        prop_assert_eq!(&a, &quadratic_step(seed, memory, steps));
        prop_assert!(a.1.iter().all(|&n| n <= memory));
    }

    #[test]
    fn stencils_annihilate_constants(v in -10.0f64..10.0, n in 3usize..12) {
        let spec = DomainSpec::square(n, 1.0, 3, 1.0, Boundary::Periodic).unwrap();
        let f = Tensor::full(&[n, n], v);
        for mode in [Padding::Periodic, Padding::Replicate] {
            prop_assert!(laplacian(&f, &spec, &mode).unwrap().data().iter().all(|&x| x == 0.0));
            for axis in [Axis::X, Axis::Y] {
                prop_assert!(d1(&f, axis, &spec, &mode).unwrap().data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn stencils_exact_on_low_degree(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, q in -3.0f64..3.0) {
        let spec = DomainSpec::square(9, 2.0, 3, 1.0, Boundary::Dirichlet).unwrap();
        let f = spec.sample(|x, y| a * x + b * y + c);
        let dx = d1(&f, Axis::X, &spec, &Padding::Replicate).unwrap();
        let dy = d1(&f, Axis::Y, &spec, &Padding::Replicate).unwrap();
        let quad = spec.sample(|x, y| q * (x * x + y * y) + a * x);
        let lap = laplacian(&quad, &spec, &Padding::Halo(spec.halo(|x, y| q * (x * x + y * y) + a * x))).unwrap();
        for i in 1..8 {
            for j in 1..8 {
                prop_assert!((dx.at(&[i, j]) - a).abs() < 1e-12);
                prop_assert!((dy.at(&[i, j]) - b).abs() < 1e-12);
            }
        }
        prop_assert!(lap.data().iter().all(|v| (v - 4.0 * q).abs() < 1e-10));
    }

    #[test]
    fn laplacian_is_sum_of_second_differences(n in 3usize..12, seed in any::<u64>()) {
        let spec = DomainSpec::square(n, 1.0, 3, 1.0, Boundary::Periodic).unwrap();
        let f = field(n, n, seed);
        let mode = Padding::Periodic;
        let l = laplacian(&f, &spec, &mode).unwrap();
        let s = d2(&f, Axis::X, &spec, &mode).unwrap().zip_map(&d2(&f, Axis::Y, &spec, &mode).unwrap(), |a, b| a + b).unwrap();
        prop_assert_eq!(l.data(), s.data());
    }

    #[test]
    fn allen_cahn_equilibria_have_zero_residual(k in 0usize..3, nt in 3usize..6) {
        let v = [-1.0, 0.0, 1.0][k];
        let prob = PDEProblem::allen_cahn_desk().unwrap();
        let d = prob.domain;
        let seq = FieldSequence::from_tensor(Tensor::full(&[nt, 1, d.ny, d.nx], v)).unwrap();
        let prob = prob.on_domain(DomainSpec { nt, ..d }).unwrap();
        prop_assert!(prob.residual(&seq).unwrap().tensor().data().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn hard_constraints_idempotent_and_local(seed in any::<u64>()) {
        let prob = kg_small();
        let d = prob.domain;
        let raw = FieldSequence::from_tensor(random_tensor(&[d.nt, 1, d.ny, d.nx], &mut ChaCha8Rng::seed_from_u64(seed))).unwrap();
        let once = prob.apply_hard_constraints(&raw).unwrap();
        let twice = prob.apply_hard_constraints(&once).unwrap();
        prop_assert_eq!(&once, &twice);
        let fixed = prob.fixed_slices();
        for t in fixed..d.nt {
            for i in 1..d.ny - 1 {
                for j in 1..d.nx - 1 {
                    prop_assert_eq!(once.at(t, 0, i, j).to_bits(), raw.at(t, 0, i, j).to_bits());
                }
            }
        }
    }

    #[test]
    fn penalty_zero_iff_prefix_satisfied(mask in proptest::collection::vec(0u8..2, 0..16)) {
        let sorted = mask.windows(2).all(|w| w[0] >= w[1]);
        prop_assert_eq!(causal_penalty(&mask) == 0, sorted);
    }

    #[test]
    fn per_step_loss_ignores_cell_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_tensor(&[3, 2, 4, 5], &mut rng);
        let a = FieldSequence::from_tensor(t.clone()).unwrap();
        let mut b = a.clone();
        for s in 0..3 {
            for c in 0..2 {
                let p = b.plane_mut(s, c);
                for i in (1..p.len()).rev() {
                    p.swap(i, rng.random_range(0..=i));
                }
            }
        }
        let (la, lb) = (per_step_pde_loss(&a).unwrap(), per_step_pde_loss(&b).unwrap());
        for (x, y) in la.iter().zip(&lb) {
            prop_assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
        }
    }

    #[test]
    fn total_loss_monotone_in_components(base in proptest::collection::vec(0.0f64..10.0, 5), which in 0usize..5, bump in 0.0f64..5.0) {
        let w = LossWeights::default();
        let build = |v: &[f64]| {
            let pinn = PinnMse { mse_i: v[0], mse_b: v[1], mse_f: v[2], total: 0.0 };
            let causal = CausalState { per_step_loss: vec![], mask: vec![], epsilon: 1.0, penalty: v[4] as u64 };
            assemble_total(&pinn, &causal, v[3], &w, &[0.7, 0.9]).unwrap()
        };
        let mut up = base.clone();
        up[which] += bump;
        prop_assert!(build(&up) >= build(&base));
    }

    #[test]
    fn filter_accepts_exactly_above_beta(scores in proptest::collection::vec(0.0f64..1.0, 1..40), beta in 0.01f64..0.99) {
        let coords = vec![(0.1, 0.2, 0.3); scores.len()];
        let b = filter_by_scores(PointBatch::from_coords(coords), &scores, beta);
        for (acc, s) in b.accepted.iter().zip(&scores) {
            prop_assert_eq!(*acc, *s > beta);
        }
    }

    #[test]
    fn rar_matches_full_sort(seed in any::<u64>(), n in 1usize..40) {
        let spec = spec_small();
        let len = (spec.nt - 2) * spec.plane_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // coarse values force ties
        let mags: Vec<f64> = (0..len).map(|_| rng.random_range(0..6) as f64).collect();
        let b = baseline_sample(Baseline::Rar, &mags, &spec, n, 0).unwrap();
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| mags[b].partial_cmp(&mags[a]).unwrap().then(a.cmp(&b)));
        let got: Vec<usize> = b.coords.iter().map(|&c| cell_index(c, &spec)).collect();
        prop_assert_eq!(got, order[..n].to_vec());
    }

    #[test]
    fn gan_losses_match_scalar_oracle(real in proptest::collection::vec(0.0f64..1.0, 1..20), fake in proptest::collection::vec(0.0f64..1.0, 1..20)) {
        let cl = |d: f64| d.clamp(1e-7, 1.0 - 1e-7);
        let mut lr = 0.0;
        for d in &real {
            lr += cl(*d).ln();
        }
        let mut lf = 0.0;
        let mut lg = 0.0;
        for d in &fake {
            lf += (1.0 - cl(*d)).ln();
            lg += cl(*d).ln();
        }
        let disc = -lr / real.len() as f64 - lf / fake.len() as f64;
        prop_assert!((disc_loss_from_scores(&real, &fake).unwrap() - disc).abs() <= 1e-12);
        prop_assert!((gen_loss_from_scores(&fake).unwrap() + lg / fake.len() as f64).abs() <= 1e-12);
    }

    #[test]
    fn label_codomains(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mags: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
        let multi = label_points(&mags, LabelStrategy::MultiLabel).unwrap().unwrap();
        prop_assert!(multi.iter().all(|l| [0.0, 0.25, 0.5, 0.75, 1.0].contains(l)));
        let sparse = label_points(&mags, LabelStrategy::Sparse).unwrap().unwrap();
        prop_assert!(sparse.iter().all(|&l| l == 0.0 || l == 1.0));
        prop_assert!(sparse.iter().filter(|&&l| l == 1.0).count() <= 15);
        let norm = label_points(&mags, LabelStrategy::Normalization).unwrap().unwrap();
        prop_assert!(norm.iter().all(|&l| (0.0..=1.0).contains(&l)));
    }

    #[test]
    fn generated_points_deterministic_and_inside(seed in any::<u64>(), noise in any::<u64>()) {
        let spec = spec_small();
        let gan = Gan::new(GanConfig { seed, width: 8, n_points: 12, ..GanConfig::default() }).unwrap();
        let res = FieldSequence::from_tensor(random_tensor(&[spec.nt - 2, 1, 8, 8], &mut ChaCha8Rng::seed_from_u64(seed))).unwrap();
        let feats = residual_features(&res).unwrap();
        let a = gan.generate_points(&feats, 12, noise, &spec).unwrap();
        prop_assert_eq!(&a, &gan.generate_points(&feats, 12, noise, &spec).unwrap());
        for &(t, x, y) in &a.coords {
            prop_assert!((0.0..=spec.horizon()).contains(&t));
            prop_assert!((spec.x0..=spec.x0 + spec.length_x()).contains(&x));
            prop_assert!((spec.y0..=spec.y0 + spec.length_y()).contains(&y));
        }
    }

    #[test]
    fn grid_round_trip_is_bitwise(dims in proptest::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&dims, |_| f64::from_bits(rng.random::<u64>() >> 2));
        let bytes = encode_grid(&t).unwrap();
        let back = decode_grid(&bytes).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(encode_grid(&back).unwrap(), bytes.clone());
        if !bytes.is_empty() {
            prop_assert!(decode_grid(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(names in proptest::collection::vec("[a-z.]{1,12}", 0..5), hash in any::<[u8; 8]>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors: Vec<(String, Tensor)> = names
            .iter()
            .map(|n| (n.clone(), random_tensor(&[rng.random_range(0..3), 2], &mut rng)))
            .collect();
        let c = Checkpoint { config_hash: hash, tensors: tensors.clone(), optimizer: tensors };
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn relative_mse_matches_loop(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_tensor(&[3, 2, 3, 4], &mut rng);
        let r = random_tensor(&[3, 2, 3, 4], &mut rng);
        let (mut num, mut den) = (0.0, 0.0);
        for t in 0..3 {
            for c in 0..2 {
                for i in 0..3 {
                    for j in 0..4 {
                        let (a, b) = (p.at(&[t, c, i, j]), r.at(&[t, c, i, j]));
                        num += (a - b) * (a - b);
                        den += b * b;
                    }
                }
            }
        }
        let got = relative_mse(&FieldSequence::from_tensor(p).unwrap(), &FieldSequence::from_tensor(r).unwrap()).unwrap();
        prop_assert!((got - num / den).abs() <= 1e-12 * (num / den));
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), n in 4usize..64, lr in 1e-6f64..1.0, lambda in 0.0f64..2.0, skip in 1usize..50) {
        let mut c = TrainConfig::desk(ProblemName::NavierStokes);
        c.seed = seed;
        c.problem.n = n;
        c.lr = lr;
        c.weights.lambda_causal = lambda;
        c.skip = skip;
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), c.to_text());
        prop_assert_eq!(back.hash(), c.hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rollout_is_deterministic_and_causal(seed in any::<u64>(), j in 2usize..5) {
        let prob = kg_small();
        let model = Model::new(ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 8, seed, ..ModelConfig::for_problem(&prob) }).unwrap();
        let a = model.rollout(&prob, 4).unwrap();
        prop_assert_eq!(&a, &model.rollout(&prob, 4).unwrap());
        let mut g = Graph::new();
        let mv = model.bind(&mut g, false);
        let delta = g.constant(&Tensor::full(&[6, 6], 5.0));
        let seq = model.rollout_vars(&mut g, &mv, &prob, 4, &[(j, vec![delta])]).unwrap();
        let b = seq.values(&g).unwrap();
        for t in 0..j {
            prop_assert_eq!(a.slice(t), b.slice(t));
        }
        prop_assert_ne!(a.slice(j), b.slice(j));
    }
}
