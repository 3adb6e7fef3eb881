use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gatefill_core::checkpoint::Checkpoint;
use gatefill_core::config::{ModelConfig, Profile, TrainConfig};
use gatefill_core::evaluation::{eval_inputs, fid, FeatureSet};
use gatefill_core::masking::MaskBand;
use gatefill_core::model::Model;
use gatefill_core::stylegan::sample_z;
use gatefill_core::training::Trainer;
use gatefill_tensor::{par, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn pipeline(c: &mut Criterion) {
    let cfg = ModelConfig::profile(Profile::Cpu);
    let model = Model::<f32>::new(&cfg, true, 0).unwrap();
    let (images, masks) = eval_inputs(cfg.resolution, 0, MaskBand::FULL, 8, 0).unwrap();
    let z = sample_z::<f32, _>(8, cfg.z_dim, &mut ChaCha8Rng::seed_from_u64(1));
    let mut g = c.benchmark_group("complete_batch8");
    g.sample_size(10);
    for (name, on) in MODES {
        par::set_enabled(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| model.complete_with(&images, &masks, &z, None, true).unwrap()));
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let model = Model::<f32>::new(&ModelConfig::profile(Profile::Cpu), true, 0).unwrap();
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    let mut t = Trainer::new(Checkpoint::new(model), cfg).unwrap();
    let batch = t.sample_batch().unwrap();
    let mut g = c.benchmark_group("stage1_step_batch4");
    g.sample_size(10);
    for (name, on) in MODES {
        par::set_enabled(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| t.step_on(&batch).unwrap()));
    }
    g.finish();
}

fn frechet(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = FeatureSet::from_tensor(&Tensor::<f64>::uniform(&[2000, 64], -1.0, 1.0, &mut rng)).unwrap();
    let b = FeatureSet::from_tensor(&Tensor::<f64>::uniform(&[2000, 64], -1.0, 2.0, &mut rng)).unwrap();
    let mut g = c.benchmark_group("fid_2000x64");
    for (name, on) in MODES {
        par::set_enabled(on);
        g.bench_function(BenchmarkId::from_parameter(name), |bch| bch.iter(|| fid(&a, &b).unwrap()));
    }
    g.finish();
    par::set_enabled(true);
}

criterion_group!(benches, pipeline, training_step, frechet);
criterion_main!(benches);
