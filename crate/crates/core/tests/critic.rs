mod common;

use common::{check_block, random_store, weighted_sum};
use longscape::critic::{
    critic_losses, critic_terms, draw_u, generator_adv_loss, gradient_penalty, gradient_penalty_with, BoundCritic, Critic,
    CriticConfig,
};
use longscape::params::init_params;
use longscape::ParamStore;
use longscape_tensor::{Tape, Tensor, Var};

const FULL: [usize; 5] = [64, 128, 256, 512, 1024];
const TINY: [usize; 2] = [4, 6];

fn tiny(global: bool) -> Critic {
    let cfg = if global {
        CriticConfig::global(8, &TINY)
    } else {
        CriticConfig::local(8, &TINY)
    };
    Critic::new(if global { "global" } else { "local" }, cfg).unwrap()
}

/// Zero convolution and head weights, head bias `b`.
fn constant_store(c: &Critic, b: f64) -> ParamStore<f64> {
    let mut store = init_params::<f64>(&c.param_specs(), 0).unwrap();
    store.zero_all();
    let name = format!("{}.head.bias", c.prefix);
    store.set_value(&name, Tensor::from_vec(&[1], vec![b]).unwrap()).unwrap();
    store
}

fn img(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, seed).unwrap()
}

#[test]
fn full_size_critics_score_one_value_per_sample() {
    for (cfg, batch, depth) in [(CriticConfig::global(128, &FULL), 1, 5), (CriticConfig::local(128, &FULL), 2, 5)] {
        assert_eq!(cfg.depth(), depth);
        let c = Critic::new("c", cfg.clone()).unwrap();
        let store = init_params::<f32>(&c.param_specs(), 3).unwrap();
        let tape = Tape::new();
        let (h, w) = cfg.input;
        let x = tape.constant(Tensor::<f32>::rand_uniform(&[batch, 3, h, w], -1.0, 1.0, 4).unwrap());
        let s = c.forward(&x, &store.bind(&tape, false)).unwrap();
        assert_eq!(s.shape(), &[batch, 1]);
    }
}

#[test]
fn critics_reject_the_other_input_shape() {
    let (g, l) = (tiny(true), tiny(false));
    let store = init_params::<f64>(&l.param_specs(), 0).unwrap();
    let tape = Tape::new();
    let x = tape.constant(img(&[1, 3, 8, 16], 1));
    assert!(l.forward(&x, &store.bind(&tape, false)).is_err());
    let store = init_params::<f64>(&g.param_specs(), 0).unwrap();
    let x = tape.constant(img(&[1, 3, 8, 8], 1));
    assert!(g.forward(&x, &store.bind(&tape, false)).is_err());
}

#[test]
fn critic_configs_too_small_are_rejected() {
    assert!(Critic::new("c", CriticConfig::local(2, &TINY)).is_err());
    assert!(Critic::new("c", CriticConfig { input: (10, 10), channels: vec![4, 4] }).is_err());
}

#[test]
fn zero_weights_score_the_bias() {
    let c = tiny(true);
    let store = constant_store(&c, 0.37);
    let tape = Tape::new();
    let s = c.forward(&tape.constant(img(&[3, 3, 8, 16], 5)), &store.bind(&tape, false)).unwrap();
    assert!(s.value().data().iter().all(|&v| v == 0.37));
}

#[test]
fn head_bias_shifts_every_score() {
    let c = tiny(false);
    let mut store = random_store(&c.param_specs(), 6);
    let x = img(&[4, 3, 8, 8], 7);
    let scores = |store: &ParamStore<f64>| {
        let tape = Tape::new();
        c.forward(&tape.constant(x.clone()), &store.bind(&tape, false)).unwrap().value().clone()
    };
    let before = scores(&store);
    let bias = store.value("local.head.bias").unwrap().map(|b| b + 0.5);
    store.set_value("local.head.bias", bias).unwrap();
    let after = scores(&store);
    for (a, b) in after.data().iter().zip(before.data()) {
        assert!((a - b - 0.5).abs() <= 1e-12);
    }
    let diff = |store: &ParamStore<f64>| {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let t = critic_terms(&tape, BoundCritic::new(&c, &p), &x, &img(&[4, 3, 8, 8], 8), 10.0, 1).unwrap();
        t.mean_fake.value().item() - t.mean_real.value().item()
    };
    let shifted = diff(&store);
    let bias = store.value("local.head.bias").unwrap().map(|b| b - 0.5);
    store.set_value("local.head.bias", bias).unwrap();
    assert!((shifted - diff(&store)).abs() <= 1e-12);
}

fn flat(x: &Var<f64>) -> Var<f64> {
    let b = x.shape()[0];
    x.reshape(&[b, x.value().len() / b]).unwrap()
}

#[test]
fn penalty_of_sum_critic_is_ten() {
    let tape = Tape::new();
    let (r, f) = (img(&[3, 1, 2, 2], 1), img(&[3, 1, 2, 2], 2));
    let gp = gradient_penalty(&tape, &r, &f, |x| flat(x).sum_to(&[3, 1]), 10.0, 4).unwrap();
    assert!((gp.value().item() - 10.0).abs() <= 1e-12);
}

#[test]
fn penalty_of_first_element_critic_is_zero() {
    let tape = Tape::new();
    let (r, f) = (img(&[2, 1, 2, 2], 1), img(&[2, 1, 2, 2], 2));
    let gp = gradient_penalty(&tape, &r, &f, |x| flat(x).slice(1, 0, 1), 10.0, 4).unwrap();
    assert_eq!(gp.value().item(), 0.0);
}

#[test]
fn penalty_of_linear_critic_matches_vector_norm() {
    for seed in 0..20 {
        let n = 12;
        let w = Tensor::<f64>::randn(&[n, 1], 0.3 + 0.05 * seed as f64, 50 + seed).unwrap();
        let norm = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let expected = 10.0 * (norm - 1.0).powi(2);
        let tape = Tape::new();
        let wv = tape.constant(w);
        let (r, f) = (img(&[4, 3, 2, 2], seed), img(&[4, 3, 2, 2], 100 + seed));
        let gp = gradient_penalty(&tape, &r, &f, |x| flat(x).matmul(&wv, false, false), 10.0, seed).unwrap();
        assert!((gp.value().item() - expected).abs() <= 1e-6, "seed {seed}");
    }
}

#[test]
fn penalty_rejects_mismatched_batches() {
    let tape = Tape::new();
    let r = img(&[2, 1, 2, 2], 1);
    let f = img(&[3, 1, 2, 2], 2);
    assert!(gradient_penalty(&tape, &r, &f, |x| flat(x).sum_to(&[2, 1]), 10.0, 0).is_err());
    assert!(gradient_penalty_with(&tape, &r, &r, |x| flat(x).sum_to(&[2, 1]), 10.0, &[0.5]).is_err());
}

#[test]
fn interpolation_draws_are_uniform_per_sample() {
    let u = draw_u(10_000, 9);
    assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
    assert_eq!(u, draw_u(10_000, 9));
}

#[test]
fn penalty_is_symmetric_under_swap_and_complement() {
    let c = tiny(false);
    let store = random_store(&c.param_specs(), 3);
    let (r, f) = (img(&[3, 3, 8, 8], 1), img(&[3, 3, 8, 8], 2));
    let u = draw_u(3, 5);
    let v: Vec<f64> = u.iter().map(|x| 1.0 - x).collect();
    let gp = |a: &Tensor<f64>, b: &Tensor<f64>, u: &[f64]| {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        gradient_penalty_with(&tape, a, b, |x| c.forward(x, &p), 10.0, u).unwrap().value().item()
    };
    assert!((gp(&r, &f, &u) - gp(&f, &r, &v)).abs() <= 1e-10);
}

struct Pair {
    g: Critic,
    l: Critic,
    sg: ParamStore<f64>,
    sl: ParamStore<f64>,
    real: Tensor<f64>,
    fake: Tensor<f64>,
}

impl Pair {
    fn random(seed: u64) -> Self {
        let (g, l) = (tiny(true), tiny(false));
        let sg = random_store(&g.param_specs(), seed);
        let sl = random_store(&l.param_specs(), seed + 1);
        Pair {
            g,
            l,
            sg,
            sl,
            real: img(&[2, 3, 8, 16], seed + 2),
            fake: img(&[2, 3, 8, 16], seed + 3),
        }
    }

    fn right(t: &Tensor<f64>) -> Tensor<f64> {
        longscape_tensor::kernels::slice_axis(t, 3, 8, 8).unwrap()
    }

    /// `(total, global total, local total)` at `beta`.
    fn losses(&self, beta: f64) -> (f64, f64, f64) {
        let tape = Tape::new();
        let (pg, pl) = (self.sg.bind(&tape, false), self.sl.bind(&tape, false));
        let out = critic_losses(
            &tape,
            BoundCritic::new(&self.g, &pg),
            BoundCritic::new(&self.l, &pl),
            &self.real,
            &self.fake,
            &Self::right(&self.real),
            &Self::right(&self.fake),
            beta,
            10.0,
            42,
        )
        .unwrap();
        (
            out.total.value().item(),
            out.global.total().unwrap().value().item(),
            out.local.total().unwrap().value().item(),
        )
    }
}

#[test]
fn constant_critics_give_total_lambda() {
    let mut p = Pair::random(0);
    p.sg = constant_store(&p.g, 0.8);
    p.sl = constant_store(&p.l, -1.3);
    assert_eq!(p.losses(0.9).0, 10.0);
}

#[test]
fn beta_mixing_is_linear_with_exact_endpoints() {
    let p = Pair::random(10);
    let (t1, g, _) = p.losses(1.0);
    let (t0, _, l) = p.losses(0.0);
    assert_eq!(t1, g);
    assert_eq!(t0, l);
    for beta in [0.1, 0.5, 0.9] {
        let (t, g, l) = p.losses(beta);
        assert!((t - (beta * t1 + (1.0 - beta) * t0)).abs() <= 1e-10);
        assert!((t - (beta * g + (1.0 - beta) * l)).abs() <= 1e-10);
    }
}

#[test]
fn critic_terms_recompose_the_total() {
    let p = Pair::random(20);
    let tape = Tape::new();
    let pg = p.sg.bind(&tape, false);
    let t = critic_terms(&tape, BoundCritic::new(&p.g, &pg), &p.real, &p.fake, 10.0, 3).unwrap();
    let by_hand = t.mean_fake.value().item() - t.mean_real.value().item() + t.penalty.value().item();
    assert!((t.total().unwrap().value().item() - by_hand).abs() <= 1e-12);
}

#[test]
fn generator_adversarial_loss() {
    let mut p = Pair::random(30);
    let tape = Tape::new();
    let (pg, pl) = (p.sg.bind(&tape, true), p.sl.bind(&tape, true));
    let (fg, fl) = (tape.constant(p.fake.clone()), tape.constant(Pair::right(&p.fake)));
    let (bg, bl) = (BoundCritic::new(&p.g, &pg), BoundCritic::new(&p.l, &pl));
    let loss = generator_adv_loss(bg, bl, &fg, &fl, 0.9).unwrap();
    let mg = bg.score(&fg).unwrap().mean().unwrap().value().item();
    let ml = bl.score(&fl).unwrap().mean().unwrap().value().item();
    assert!((loss.value().item() + (0.9 * mg + 0.1 * ml)).abs() <= 1e-7);

    // beta = 0 leaves the global critic without gradient
    let loss = generator_adv_loss(bg, bl, &fg, &fl, 0.0).unwrap();
    let grads = tape.backward(&loss).unwrap();
    for name in p.sg.names() {
        if let Some(g) = grads.get(name) {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    p.sg = constant_store(&p.g, 0.25);
    p.sl = constant_store(&p.l, 0.25);
    let tape = Tape::new();
    let (pg, pl) = (p.sg.bind(&tape, false), p.sl.bind(&tape, false));
    let loss = generator_adv_loss(
        BoundCritic::new(&p.g, &pg),
        BoundCritic::new(&p.l, &pl),
        &tape.constant(p.fake.clone()),
        &tape.constant(Pair::right(&p.fake)),
        0.9,
    )
    .unwrap();
    assert!((loss.value().item() + 0.25).abs() <= 1e-15);
}

#[test]
fn critic_gradients_match_finite_differences() {
    for global in [true, false] {
        let c = tiny(global);
        let shape = if global { [2, 3, 8, 16] } else { [2, 3, 8, 8] };
        for seed in 0..20 {
            let x = img(&shape, 200 + seed);
            let (real, fake) = (img(&shape, 300 + seed), img(&shape, 400 + seed));
            let r = check_block(&c.param_specs(), seed, vec![x], 10, |v, p| {
                let critic = BoundCritic::new(&c, p);
                let scores = weighted_sum(&critic.score(&v[0])?, seed)?;
                let terms = critic_terms(v[0].tape(), critic, &real, &fake, 10.0, seed)
                    .map_err(|e| match e {
                        longscape::Error::Tensor(t) => t,
                        other => panic!("{other}"),
                    })?;
                scores.add(&terms.total()?)
            });
            assert!(r.max_rel_err <= 1e-5, "global {global} seed {seed}: {r:?}");
        }
    }
}
