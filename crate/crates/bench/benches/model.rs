use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nse_bench::{model, sentence};
use nse_core::encoder::{EncoderKind, Mode};
use nse_core::search::BeamConfig;
use nse_core::Tape;

const DIM: usize = 64;
const VOCAB: usize = 500;

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_backward");
    let (src, tgt) = (sentence(20, VOCAB, 1), sentence(15, VOCAB, 2));
    for kind in [EncoderKind::Lstm, EncoderKind::Nse] {
        let m = model(kind, DIM, VOCAB);
        group.bench_with_input(BenchmarkId::from_parameter(kind), &kind, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new(&m.params);
                let (loss, _) = m.loss(&mut tape, &src, &tgt, &mut Mode::Eval).unwrap();
                black_box(tape.backward(loss).unwrap())
            })
        });
    }
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode");
    group.sample_size(20);
    let src = sentence(20, VOCAB, 3);
    let m = model(EncoderKind::Nse, DIM, VOCAB);
    for beam in [1, 5, 10] {
        let search = BeamConfig {
            beam,
            max_len: 30,
            length_normalize: false,
        };
        group.bench_with_input(BenchmarkId::new("beam", beam), &search, |b, s| {
            b.iter(|| black_box(m.decode(&src, s).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, training_step, decoding);
criterion_main!(benches);
