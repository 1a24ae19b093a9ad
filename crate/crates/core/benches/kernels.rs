//! Hot kernels, timed under whichever build is active. The ids do not
//! depend on the build, so the two runs compare directly.
//!
//! Compare the two builds with criterion baselines:
//!
//! ```text
//! cargo bench -p aniframe-core --bench kernels -- --save-baseline parallel
//! cargo bench -p aniframe-core --bench kernels --no-default-features -- --baseline parallel
//! ```

use std::hint::black_box;

use aniframe_core::calderon::{obstruction_index, FrequencyGrid, Normalization};
use aniframe_core::frame_ops::{analysis, gram_matrix, FrameSystem, InnerMethod};
use aniframe_core::generators::{fft_transform, Generator, GridSpec};
use aniframe_core::geometry::{matrix_from_rows, DilationInfo, QuasiNormMode};
use aniframe_core::lattice::TruncationWindow;
use criterion::{criterion_group, criterion_main, Criterion};

fn dyadic() -> DilationInfo {
    let m = matrix_from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
    DilationInfo::new(&m, QuasiNormMode::Step).unwrap()
}

fn kernels(c: &mut Criterion) {
    let d = dyadic();
    let g = Generator::mexican_hat_2d();
    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);

    let sys = FrameSystem::self_dual(g.clone(), d.clone(), TruncationWindow::symmetric(2, 1, 2).unwrap()).unwrap();
    group.bench_function("gram_matrix_75", |b| {
        b.iter(|| gram_matrix(black_box(&sys), InnerMethod::Fourier, 1e-8).unwrap())
    });

    let grid = FrequencyGrid {
        radial: 32,
        angular: 64,
    };
    group.bench_function("obstruction_index_32x64", |b| {
        b.iter(|| obstruction_index(black_box(&g), &d, grid, 12, Normalization::Auto).unwrap())
    });

    let spec = GridSpec::symmetric(2, 256, 1.0 / 16.0);
    let f = spec.sample(|x| g.eval(x));
    group.bench_function("fft_256x256", |b| b.iter(|| fft_transform(black_box(&f))));
    group.bench_function("analysis_256x256", |b| {
        b.iter(|| analysis(&sys, black_box(&f)).unwrap())
    });

    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
