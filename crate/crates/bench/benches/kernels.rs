use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use neupde_core::baselines::{build_problem, lasso_component, LassoConfig};
use neupde_core::gradient::{adjoint_gradient, bptt_gradient};
use neupde_core::odeint::Dynamics;
use neupde_core::pde::{Channel, Field2D, Grid2D, PdeModel};
use neupde_core::systems::generate;
use neupde_core::{
    Activation, DictionarySpec, GeneratorConfig, LossSpec, MlpParams, NormalizationBounds, Scheme, SolverConfig,
    TimeScale, VectorField,
};

fn dictionary(c: &mut Criterion) {
    let mut g = c.benchmark_group("dictionary_eval");
    for degree in [2u32, 4] {
        let spec = DictionarySpec::new(3, degree, true).unwrap();
        let z = [0.3, -0.7, 0.1];
        g.bench_with_input(BenchmarkId::from_parameter(degree), &spec, |b, s| {
            b.iter(|| s.eval(Some(0.5), black_box(&z)).unwrap())
        });
    }
    g.finish();
}

fn perceptron(c: &mut Criterion) {
    let p = MlpParams::init(34, 50, 3, Activation::Elu, 1).unwrap();
    let z: Vec<f64> = (0..34).map(|i| (i as f64 * 0.37).sin()).collect();
    c.bench_function("mlp_forward_34x50x3", |b| b.iter(|| p.forward(black_box(&z)).unwrap()));
    c.bench_function("mlp_vjp_params_34x50x3", |b| {
        b.iter(|| p.vjp_params(black_box(&z), &[1.0, -0.5, 0.25]).unwrap())
    });
}

fn gradients(c: &mut Criterion) {
    let (_, noisy) = generate(&GeneratorConfig::spiral()).unwrap();
    let window = noisy.window(0, 11).unwrap();
    let bounds = NormalizationBounds::fit(noisy.values()).unwrap();
    let ts = TimeScale::new(noisy.times()[0], *noisy.times().last().unwrap()).unwrap();
    let spec = DictionarySpec::new(3, 4, true).unwrap();
    let field = VectorField::with_network(spec, bounds, Some(ts), 4, Activation::Elu, 3).unwrap();
    let solver = SolverConfig::new(Scheme::Rk4, 1);
    let loss = LossSpec::default();
    let mut g = c.benchmark_group("window_gradient");
    g.bench_function("bptt", |b| {
        b.iter(|| bptt_gradient(&field, &window, &solver, &loss).unwrap())
    });
    g.bench_function("adjoint", |b| {
        b.iter(|| adjoint_gradient(&field, &window, &solver, &loss, 10).unwrap())
    });
    g.finish();
}

fn pde_rhs(c: &mut Criterion) {
    let grid = Grid2D::unit_square(32).unwrap();
    let channels = Channel::DEFAULT.to_vec();
    let bounds = vec![NormalizationBounds::new(-10.0, 10.0).unwrap(); channels.len()];
    let model = PdeModel::new(grid, channels, 2, bounds, 50, Activation::Elu, 0).unwrap();
    let u = Field2D::from_fn(grid, |x, y| (6.0 * x).sin() * (4.0 * y).cos()).values;
    let mut out = vec![0.0; u.len()];
    c.bench_function("pde_rhs_32x32", |b| b.iter(|| model.rhs(0.0, black_box(&u), &mut out)));
}

fn lasso(c: &mut Criterion) {
    let (clean, _) = generate(&GeneratorConfig::spiral()).unwrap();
    let problem = build_problem(&clean, &DictionarySpec::new(3, 4, true).unwrap(), true).unwrap();
    let cfg = LassoConfig::default();
    c.bench_function("lasso_spiral_component", |b| {
        b.iter(|| lasso_component(&problem, 0, 0.05, &cfg).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = dictionary, perceptron, gradients, pde_rhs, lasso
}
criterion_main!(benches);
