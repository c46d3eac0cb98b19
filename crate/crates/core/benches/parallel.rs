use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use magicforge_core::ablation::{desk_vocabulary, synthesize_split};
use magicforge_core::backends::{Backends, MockNoise};
use magicforge_core::losses::LossWeights;
use magicforge_core::metrics;
use magicforge_core::pipeline::{Pipeline, PipelineConfig};
use magicforge_core::prompt::ConditionSet;
use magicforge_core::sampler::SubsetSize;
use magicforge_core::trainer::{self, Adam, TrainConfig, ToyModel};
use magicforge_core::{seed, Execution};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn pipeline(c: &mut Criterion) {
    let vocab = desk_vocabulary();
    let cfg = PipelineConfig { samples_target: 16, width: 128, height: 128, seed: 1, ..Default::default() };
    let p = Pipeline::new(vocab.clone(), cfg, ConditionSet::default(), Backends::mock(&vocab, MockNoise::default()));
    let mut g = c.benchmark_group("pipeline_16x128");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| p.run(exec, |_| Ok(())).unwrap()));
    }
    g.finish();
}

fn train_and_eval(c: &mut Criterion) {
    let vocab = desk_vocabulary();
    let cfg = PipelineConfig { samples_target: 32, width: 64, height: 64, seed: 2, ..Default::default() };
    let samples =
        synthesize_split(&vocab, &cfg, &ConditionSet::default(), Backends::mock(&vocab, MockNoise::default()), Execution::Parallel)
            .unwrap();
    let tc = TrainConfig { lr: 0.1, m_subset: SubsetSize::Fixed(8), ..Default::default() };
    let batch: Vec<_> = samples.iter().take(8).collect();
    let cats: Vec<_> = vocab.ids().collect();
    let model = ToyModel::init(vocab.len(), tc.embed_dim, 0);

    let mut g = c.benchmark_group("train_step_bs8");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut m = model.clone();
            let mut adam = Adam::new(&m, tc.adam());
            let mut rng = seed::rng(0);
            b.iter(|| trainer::train_step(&mut m, &mut adam, &batch, tc.m_subset, &LossWeights::default(), &mut rng, exec).unwrap())
        });
    }
    g.finish();

    let preds: Vec<_> = samples.iter().map(|s| trainer::predict_labels(&model, &s.x, &cats, 0.5).unwrap()).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.gt_labels()).collect();
    let mut g = c.benchmark_group("pmiou_32x64");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| metrics::p_miou(&preds, &gts, &cats, 256, 0, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, pipeline, train_and_eval);
criterion_main!(benches);
