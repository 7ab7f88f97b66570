use coconut_autodiff::{par, Graph};
use coconut_core::embedding::{encode_audio, AudioBatch, Model, ModelConfig, ModelDims};
use coconut_core::rng::{stream, tags};
use coconut_core::seq2seq::decoder::decode_all_sequential;
use coconut_core::seq2seq::{asr_cross_entropy, decode_all, TokenSequence};
use coconut_core::synth::{generate_corpus, Corpus, CorpusSpec, FeatureSequence};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn setup() -> (Corpus, Model) {
    let corpus = generate_corpus(&CorpusSpec {
        num_intents: 6,
        class_sizes: Some(vec![12; 6]),
        ..CorpusSpec::default()
    })
    .unwrap();
    let dims = ModelDims::for_corpus(&corpus, &ModelConfig::default());
    let model = Model::init(dims, &mut stream(0, tags::INIT)).unwrap();
    (corpus, model)
}

fn decoding(c: &mut Criterion) {
    let (corpus, model) = setup();
    let xs: Vec<&FeatureSequence> = corpus.examples.iter().map(|e| &e.audio).collect();
    let max_len = model.dims.max_tokens;
    let mut group = c.benchmark_group("decode_all");
    for width in [1, 3] {
        group.bench_with_input(BenchmarkId::new("parallel", width), &width, |b, &w| {
            b.iter(|| decode_all(&model, black_box(&xs), w, max_len).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", width), &width, |b, &w| {
            b.iter(|| decode_all_sequential(&model, black_box(&xs), w, max_len).unwrap())
        });
    }
    group.finish();
}

/// One perturbed-parameter loss per probe, the unit of work of the
/// finite-difference suite.
fn probes(c: &mut Criterion) {
    let (corpus, model) = setup();
    let ids: Vec<usize> = (0..16).collect();
    let audio: Vec<&FeatureSequence> = ids.iter().map(|&i| &corpus.examples[i].audio).collect();
    let targets: Vec<&TokenSequence> = ids.iter().map(|&i| &corpus.examples[i].transcript).collect();
    let batch = AudioBatch::new(&audio).unwrap();
    let id = model.params.id("decoder.wout").unwrap();
    let work: Vec<usize> = (0..64).collect();
    let probe = |&e: &usize| {
        let mut m = model.clone();
        m.params.get_mut(id).value.data_mut()[e] += 1e-4;
        let mut g = Graph::no_grad();
        let h = encode_audio(&mut g, &m, &batch).unwrap();
        let l = asr_cross_entropy(&mut g, &m, h, batch.lengths(), &targets).unwrap();
        g.value(l).item().unwrap()
    };
    let mut group = c.benchmark_group("loss_probes");
    group.bench_function("parallel", |b| b.iter(|| par::map(black_box(&work), probe)));
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_sequential(black_box(&work), probe))
    });
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = decoding, probes
}
criterion_main!(benches);
