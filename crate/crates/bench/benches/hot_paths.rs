use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng as _;
use workbench::attacks::{make_adversary, AttackBundle, AttackKind, AttackMode, AttackSpec};
use workbench::diffcore::{Activation, Mlp, Tape, Tensor};
use workbench::envs::make_env;
use workbench::rng::{derive_seed, seeded};
use workbench::sac::{Learner, ReplayBuffer, SacAgent, SacConfig};
use workbench::transforms::Codebook;

fn states(n: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::matrix(n, 3, (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn mlp(c: &mut Criterion) {
    let net = Mlp::new(&[3, 64, 64, 2], Activation::Relu, Activation::Identity, &mut seeded(0));
    let x = states(256, 1);
    c.bench_function("mlp forward 256x(3-64-64-2)", |b| b.iter(|| net.predict(black_box(&x)).unwrap()));
    c.bench_function("mlp forward+backward 256", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (y, vars) = net.forward(tape.constant(x.clone())).unwrap();
            let g = tape.backward(y.square().mean()).unwrap();
            black_box(vars.grads(&g))
        })
    });
}

fn sac_update(c: &mut Criterion) {
    let env = make_env("pendulum-balance").unwrap();
    let mut buffer = ReplayBuffer::new(10_000, 3, 1).unwrap();
    let mut rng = seeded(2);
    for _ in 0..5000 {
        let s: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        buffer.push(&s, &[rng.gen_range(-1.0..1.0)], rng.gen(), &s, false);
    }
    let mut learner = Learner::new(SacAgent::new(env.spec(), 64, 1.0, 0), SacConfig::default());
    c.bench_function("sac update, batch 256", |b| {
        b.iter(|| {
            let batch = buffer.sample(256, &mut rng).unwrap();
            learner.update(&batch, &mut rng, None).unwrap()
        })
    });
}

fn attacks(c: &mut Criterion) {
    let env = make_env("pendulum-balance").unwrap();
    let agent = SacAgent::new(env.spec(), 64, 1.0, 0);
    let bundle = AttackBundle::from_agent(&agent);
    let x = states(64, 3);
    for kind in [AttackKind::ActionDiff, AttackKind::MinQ] {
        let adv = make_adversary(&AttackSpec::new(kind, 0.1, AttackMode::GrayBox), &bundle).unwrap();
        c.bench_function(&format!("{} pgd, 64 states", kind.column()), |b| {
            b.iter(|| {
                let mut rngs: Vec<_> = (0..64).map(|i| seeded(derive_seed(7, i))).collect();
                adv.perturb_batch(&x, &mut rngs).unwrap()
            })
        });
    }
}

fn codebook(c: &mut Criterion) {
    let data = states(4096, 4);
    let mut cb = Codebook::init(&data, 1024, 0, false).unwrap();
    let batch = states(256, 5);
    let probe = [0.3, -0.2, 0.9];
    c.bench_function("vq assign, K=1024", |b| b.iter(|| cb.quantize(black_box(&probe))));
    let mut rng = seeded(6);
    c.bench_function("vq minibatch update, 256 rows, K=1024", |b| {
        b.iter(|| cb.kmeans_update(&batch, &mut rng).unwrap())
    });
}

criterion_group!(benches, mlp, sac_update, attacks, codebook);
criterion_main!(benches);
