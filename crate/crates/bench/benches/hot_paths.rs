use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use xlda_bench::{corpus, mask, queues, sequence, stats};
use xlda_core::packer::pack_all;
use xlda_core::sampler::language_distribution;
use xlda_core::toy_model::forward;
use xlda_core::{MaskPolicy, MaskSpec, ModelConfig, PackerConfig, Parameters, SamplerConfig};

fn masks(c: &mut Criterion) {
    let mut g = c.benchmark_group("mask");
    for seq_len in [512, 4096] {
        for policy in MaskPolicy::ALL {
            let m = mask(policy, seq_len, 200);
            let id = format!("{policy}/{seq_len}");
            g.bench_with_input(BenchmarkId::new("row_ranges", &id), &m, |b, m| {
                b.iter(|| (0..m.seq_len()).map(|q| m.row_ranges(q).len()).sum::<usize>())
            });
            g.bench_with_input(BenchmarkId::new("allowed_pair_count", &id), &m, |b, m| b.iter(|| m.allowed_pair_count()));
            if seq_len <= 512 {
                g.bench_with_input(BenchmarkId::new("dense", &id), &m, |b, m: &MaskSpec| {
                    b.iter(|| m.materialize_dense(m.seq_len()).unwrap().count())
                });
            }
        }
    }
    g.finish();
}

fn packing(c: &mut Criterion) {
    let docs = corpus(2000, 300, 32_000, 1);
    let st = stats(&docs);
    let langs: Vec<&str> = st.languages.keys().map(String::as_str).collect();
    let mut g = c.benchmark_group("pack_all");
    g.sample_size(20);
    for rho in [0.0, 0.5] {
        let sampler = SamplerConfig::proportional(&langs, rho, 0).unwrap();
        let dist = language_distribution(&sampler, &st).unwrap();
        let cfg = PackerConfig::with_seq_len(4096);
        g.bench_function(BenchmarkId::from_parameter(rho), |b| {
            b.iter(|| pack_all(queues(&docs), &sampler, &dist, &cfg).unwrap().0.len())
        });
    }
    g.finish();
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig { n_layers: 2, d_model: 32, d_ff: 64, n_heads: 4, vocab_size: 64, ..Default::default() };
    let params = Parameters::init(&cfg).unwrap();
    let seq = sequence(64, 12, 64);
    let mut g = c.benchmark_group("forward");
    for policy in MaskPolicy::ALL {
        let m = MaskSpec::for_sequence(policy, &seq).unwrap();
        g.bench_function(BenchmarkId::from_parameter(policy), |b| {
            b.iter(|| forward(&params, black_box(&seq.tokens), &m).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, masks, packing, model);
criterion_main!(benches);
