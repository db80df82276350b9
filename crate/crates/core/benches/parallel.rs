use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use vsplit_core::codec::{Evaluator, PlainTensor};
use vsplit_core::par::{self, Mode};
use vsplit_core::phe::keygen;

const KEY_BITS: u32 = 1024;
const FRAC_BITS: u32 = 16;

fn modes() -> [(&'static str, Mode); 2] {
    [("sequential", Mode::Sequential), ("parallel", Mode::Parallel)]
}

fn encrypt(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let (pk, _) = keygen(KEY_BITS, &mut rng).unwrap();
    let ev = Evaluator::new(pk, FRAC_BITS).unwrap();
    let values: Vec<f64> = (0..64).map(|i| (i as f64 - 32.0) / 8.0).collect();

    let mut group = c.benchmark_group("encrypt_64");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_mode(mode, || ev.encrypt_reals(black_box(&values), &mut rng).unwrap()))
        });
    }
    group.finish();
}

fn matvec(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let (pk, _) = keygen(KEY_BITS, &mut rng).unwrap();
    let ev = Evaluator::new(pk, FRAC_BITS).unwrap();
    let (rows, cols) = (10, 84);
    let v = ev.encrypt_reals(&(0..cols).map(|i| (i % 7) as f64 / 4.0).collect::<Vec<_>>(), &mut rng).unwrap();
    let w = PlainTensor::encode(vec![rows, cols], FRAC_BITS, &(0..rows * cols).map(|i| ((i % 11) as f64 - 5.0) / 16.0).collect::<Vec<_>>()).unwrap();

    let mut group = c.benchmark_group("matvec_10x84");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| par::with_mode(mode, || ev.matvec(black_box(&w), black_box(&v)).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, encrypt, matvec);
criterion_main!(benches);
