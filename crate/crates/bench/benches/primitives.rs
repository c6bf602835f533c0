use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use keytrust_bench::{Fixture, KEY_BITS};
use keytrust_core::compare::{compare_gt, CompareHooks, CompareRhs, LocalPeer};
use keytrust_core::FixedPointParams;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn paillier(c: &mut Criterion) {
    let mut group = c.benchmark_group("paillier");
    for bits in KEY_BITS {
        let mut fx = Fixture::new(bits);
        let a = fx.encrypt(12_345);
        let b = fx.encrypt(-678);
        group.bench_with_input(BenchmarkId::new("encrypt", bits), &bits, |bench, _| {
            bench.iter(|| fx.pk.encrypt_i64(42, &mut fx.rng).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("decrypt", bits), &bits, |bench, _| {
            bench.iter(|| fx.sk.decrypt(&a).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("is_zero", bits), &bits, |bench, _| {
            bench.iter(|| fx.sk.is_zero(&a).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("add", bits), &bits, |bench, _| {
            bench.iter(|| fx.pk.add(&a, &b).unwrap())
        });
        let s40: i64 = (1 << 40) - 3;
        group.bench_with_input(BenchmarkId::new("scalar_mul_40", bits), &bits, |bench, _| {
            bench.iter(|| fx.pk.scalar_mul_i64(&a, s40).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("negate", bits), &bits, |bench, _| {
            bench.iter(|| fx.pk.negate(&a).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("rerandomize", bits), &bits, |bench, _| {
            bench.iter(|| fx.pk.rerandomize(&a, &mut fx.rng).unwrap())
        });
    }
    group.finish();
}

fn comparison(c: &mut Criterion) {
    let mut group = c.benchmark_group("compare_gt");
    group.sample_size(20);
    for bits in KEY_BITS {
        let mut fx = Fixture::new(bits);
        for l in [5u32, 10, 40] {
            let params = FixedPointParams::new(1, l, 40).unwrap();
            let x = fx.encrypt(3);
            let rhs = CompareRhs::Plain(2);
            let mut client_rng = ChaCha20Rng::seed_from_u64(u64::from(l));
            group.bench_with_input(BenchmarkId::new(format!("k{bits}"), l), &l, |bench, _| {
                bench.iter(|| {
                    let mut peer = LocalPeer {
                        sk: &fx.sk,
                        params,
                        rng: &mut client_rng,
                    };
                    compare_gt(&fx.pk, params, &x, &rhs, CompareHooks::default(), &mut peer, &mut fx.rng)
                        .unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, paillier, comparison);
criterion_main!(benches);
