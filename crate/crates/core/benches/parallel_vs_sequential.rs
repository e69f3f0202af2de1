use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use diffprune::graph::Architecture;
use diffprune::memplan::{precise_pmu, tensor_sizes, PlannerOptions};
use diffprune::nn::{cross_entropy, BnMode, Masks, Model, Tensor};
use diffprune::par::Parallelism;
use diffprune::zoo::{random_dag, RESNET6_SYNTH, VGG16_CIFAR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

const MODES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("parallel", Parallelism::Parallel),
];

fn batch(rng: &mut ChaCha8Rng, arch: &Architecture, n: usize) -> Tensor<f32> {
    let s = arch.shapes[arch.graph.input()];
    let data = (0..n * s.elements())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor::from_vec([n, s.channels, s.height, s.width], data).unwrap()
}

fn forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let arch = Architecture::from_spec(VGG16_CIFAR).unwrap();
    let model: Model<f32> = Model::init(arch.clone(), &mut rng);
    let masks = Masks::ones(&arch);
    let x = batch(&mut rng, &arch, 8);
    let mut group = c.benchmark_group("vgg16_forward_batch8");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.predict(black_box(&x), &masks, par).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let arch = Architecture::from_spec(RESNET6_SYNTH).unwrap();
    let model: Model<f32> = Model::init(arch.clone(), &mut rng);
    let masks = Masks::ones(&arch);
    let x = batch(&mut rng, &arch, 32);
    let labels: Vec<usize> = (0..32).map(|i| i % 4).collect();
    let mut group = c.benchmark_group("resnet6_train_step_batch32");
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let pass = model.forward(&x, &masks, BnMode::Batch, par).unwrap();
                let (_, dlogits) = cross_entropy(pass.logits(), &labels);
                model.backward(&pass, &dlogits, &masks, par)
            })
        });
    }
    group.finish();
}

fn planner(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_dag(&mut rng, 40);
    let sizes: Vec<u64> = (0..g.len()).map(|_| rng.gen_range(1..1 << 20)).collect();
    let vgg = Architecture::from_spec(VGG16_CIFAR).unwrap();
    let vgg_sizes = tensor_sizes(&vgg, &vgg.unpruned(), 1);
    let mut group = c.benchmark_group("precise_pmu");
    for (name, par) in MODES {
        let opts = PlannerOptions {
            parallelism: par,
            ..Default::default()
        };
        group.bench_function(BenchmarkId::new("random_dag_40", name), |b| {
            b.iter(|| precise_pmu(black_box(&g), &sizes, &opts).unwrap())
        });
        group.bench_function(BenchmarkId::new("vgg16", name), |b| {
            b.iter(|| precise_pmu(black_box(&vgg.graph), &vgg_sizes, &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, train_step, planner);
criterion_main!(benches);
